//! Annotated federated scenarios with label, feature and concept shift.
//!
//! The base task is a Gaussian-blob classifier: class `c` draws
//! `x = mu_c + N(0, I)`. Clients then receive
//!
//! * Dirichlet-skewed class proportions (label shift),
//! * optionally one invertible affine style `x -> A_s x + b_s` (feature shift),
//! * exactly one concept, a permutation applied to the class label (concept
//!   shift).
//!
//! One balanced, style-free holdout client per concept measures global
//! accuracy. Every sample keeps its true class, and every client keeps its
//! style and concept, so cluster composition can be tallied exactly.
//!
//! # File format
//!
//! [`write_scenario`] produces two files in a directory:
//!
//! * `scenario.json`: header with dimensions, concept maps, the generating
//!   config (when known) and one record per client
//!   `{id, participating, concept, style, n_train, n_test}`.
//! * `scenario.csv`: a header line `x0,..,x{d-1},label,client,concept,style`
//!   followed by one sample per line, client by client in header order, the
//!   client's train samples before its test samples. Floats use the shortest
//!   representation that parses back to the same bits.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LabeledSample;
use crate::rng::{substream, StreamRng};

pub const HEADER_FILE: &str = "scenario.json";
pub const DATA_FILE: &str = "scenario.csv";
const FORMAT_TAG: &str = "fedrc-scenario/1";

/// How a concept relabels classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConceptMapSpec {
    Identity,
    /// `y -> C - 1 - y`
    Reverse,
    /// `y -> (y + n) mod C`
    Shift(usize),
    Permutation(Vec<usize>),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ConceptMapRepr {
    Name(String),
    List(Vec<usize>),
}

impl Serialize for ConceptMapSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match self {
            ConceptMapSpec::Identity => ConceptMapRepr::Name("identity".into()),
            ConceptMapSpec::Reverse => ConceptMapRepr::Name("reverse".into()),
            ConceptMapSpec::Shift(n) => ConceptMapRepr::Name(format!("shift:{n}")),
            ConceptMapSpec::Permutation(p) => ConceptMapRepr::List(p.clone()),
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ConceptMapSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        match ConceptMapRepr::deserialize(d)? {
            ConceptMapRepr::List(p) => Ok(ConceptMapSpec::Permutation(p)),
            ConceptMapRepr::Name(name) => match name.as_str() {
                "identity" => Ok(ConceptMapSpec::Identity),
                "reverse" => Ok(ConceptMapSpec::Reverse),
                other => other
                    .strip_prefix("shift:")
                    .and_then(|n| n.parse().ok())
                    .map(ConceptMapSpec::Shift)
                    .ok_or_else(|| {
                        D::Error::custom(format!(
                            "unknown concept map `{other}` (expected identity, reverse, shift:N or a list)"
                        ))
                    }),
            },
        }
    }
}

impl ConceptMapSpec {
    /// The label of every class, `map[class]`.
    pub fn resolve(&self, num_classes: usize) -> Result<Vec<usize>> {
        let map: Vec<usize> = match self {
            ConceptMapSpec::Identity => (0..num_classes).collect(),
            ConceptMapSpec::Reverse => (0..num_classes).map(|y| num_classes - 1 - y).collect(),
            ConceptMapSpec::Shift(n) => (0..num_classes).map(|y| (y + n) % num_classes).collect(),
            ConceptMapSpec::Permutation(p) => p.clone(),
        };
        let distinct: BTreeSet<usize> = map.iter().copied().collect();
        if map.len() != num_classes || distinct.len() != num_classes || map.iter().any(|&v| v >= num_classes) {
            return Err(Error::config(format!("concept map {self:?} is not a bijection on [0, {num_classes})")));
        }
        Ok(map)
    }
}

/// A scalar broadcast to every concept, or one value per concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PerConcept {
    All(f64),
    Each(Vec<f64>),
}

impl PerConcept {
    fn resolve(&self, n: usize) -> Result<Vec<f64>> {
        match self {
            PerConcept::All(v) => Ok(vec![*v; n]),
            PerConcept::Each(v) if v.len() == n => Ok(v.clone()),
            PerConcept::Each(v) => Err(Error::config(format!(
                "expected {n} per-concept values, got {}",
                v.len()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub num_clients: usize,
    /// Inclusive `[min, max]` sample count per participating client.
    pub samples_per_client: [usize; 2],
    pub test_fraction: f64,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Standard deviation of the class-center coordinates.
    pub class_separation: f64,
    pub dirichlet_alpha: f64,
    pub num_feature_styles: usize,
    pub feature_style_strength: f64,
    pub concept_maps: Vec<ConceptMapSpec>,
    pub concept_proportions: Vec<f64>,
    /// Share of each concept's clients that receive a feature style.
    pub fraction_with_feature_shift: PerConcept,
    /// Per-class sample counts of the holdout clients.
    pub holdout_adapt_per_class: usize,
    pub holdout_test_per_class: usize,
    pub seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig::standard()
    }
}

pub const PRESETS: &[&str] = &["standard", "paper-mix"];

impl ScenarioConfig {
    /// Three concepts (identity, reverse, shift by one) in equal shares,
    /// five styles, Dirichlet(1.0) label skew, 60 clients.
    pub fn standard() -> Self {
        ScenarioConfig {
            num_clients: 60,
            samples_per_client: [100, 200],
            test_fraction: 0.2,
            input_dim: 10,
            num_classes: 10,
            class_separation: 1.5,
            dirichlet_alpha: 1.0,
            num_feature_styles: 5,
            feature_style_strength: 0.1,
            concept_maps: vec![
                ConceptMapSpec::Identity,
                ConceptMapSpec::Reverse,
                ConceptMapSpec::Shift(1),
            ],
            concept_proportions: vec![1.0 / 3.0; 3],
            fraction_with_feature_shift: PerConcept::All(0.4),
            holdout_adapt_per_class: 20,
            holdout_test_per_class: 50,
            seed: 0,
        }
    }

    /// 300 clients: 30% untouched, 20% styled only, 25% reversed labels and
    /// 25% shifted labels, a fifth of each relabeled group also styled.
    pub fn paper_mix() -> Self {
        ScenarioConfig {
            num_clients: 300,
            samples_per_client: [60, 120],
            concept_proportions: vec![0.5, 0.25, 0.25],
            fraction_with_feature_shift: PerConcept::Each(vec![0.4, 0.2, 0.2]),
            ..ScenarioConfig::standard()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "standard" => Ok(Self::standard()),
            "paper-mix" => Ok(Self::paper_mix()),
            other => Err(Error::config(format!(
                "unknown scenario preset `{other}` (available: {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn resolved_maps(&self) -> Result<Vec<Vec<usize>>> {
        self.concept_maps.iter().map(|m| m.resolve(self.num_classes)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("scenario.num_clients must be positive"));
        }
        let [lo, hi] = self.samples_per_client;
        if lo == 0 || lo > hi {
            return Err(Error::config("scenario.samples_per_client must satisfy 0 < min <= max"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::config("scenario.test_fraction must lie in [0, 1)"));
        }
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::config("scenario needs input_dim >= 1 and num_classes >= 2"));
        }
        if !(self.dirichlet_alpha > 0.0) {
            return Err(Error::config("scenario.dirichlet_alpha must be positive"));
        }
        if self.concept_maps.is_empty() {
            return Err(Error::config("scenario.concept_maps must not be empty"));
        }
        if self.concept_proportions.len() != self.concept_maps.len() {
            return Err(Error::config("scenario.concept_proportions needs one entry per concept map"));
        }
        let sum: f64 = self.concept_proportions.iter().sum();
        if self.concept_proportions.iter().any(|p| *p < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("scenario.concept_proportions must be nonnegative and sum to 1"));
        }
        let fr = self.fraction_with_feature_shift.resolve(self.concept_maps.len())?;
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("scenario.fraction_with_feature_shift must lie in [0, 1]"));
        }
        if fr.iter().any(|f| *f > 0.0) && self.num_feature_styles == 0 {
            return Err(Error::config("feature shift requested but scenario.num_feature_styles is 0"));
        }
        if self.holdout_adapt_per_class == 0 || self.holdout_test_per_class == 0 {
            return Err(Error::config("holdout clients need at least one adaptation and one test sample per class"));
        }
        self.resolved_maps()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub id: usize,
    pub participating: bool,
    pub concept: usize,
    /// 0 means no feature style.
    pub style: usize,
    pub train: Vec<LabeledSample>,
    /// True (pre-relabeling) class of every train sample.
    pub train_classes: Vec<usize>,
    pub test: Vec<LabeledSample>,
    pub test_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedScenario {
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_feature_styles: usize,
    pub concept_maps: Vec<Vec<usize>>,
    pub participating: Vec<ClientDataset>,
    /// One balanced, style-free client per concept.
    pub nonparticipating: Vec<ClientDataset>,
}

impl FederatedScenario {
    pub fn num_concepts(&self) -> usize {
        self.concept_maps.len()
    }

    pub fn train_slices(&self) -> Vec<&[LabeledSample]> {
        self.participating.iter().map(|c| c.train.as_slice()).collect()
    }

    pub fn train_counts(&self) -> Vec<usize> {
        self.participating.iter().map(|c| c.train.len()).collect()
    }

    pub fn total_train(&self) -> usize {
        self.participating.iter().map(|c| c.train.len()).sum()
    }
}

/// Samples of each class in consumption order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassPools {
    pub input_dim: usize,
    pub pools: Vec<Vec<Vec<f64>>>,
}

impl ClassPools {
    fn take(&self, cursor: &mut [usize], class: usize) -> Result<Vec<f64>> {
        let pool = &self.pools[class];
        if pool.is_empty() {
            return Err(Error::config(format!("no samples available for class {class}")));
        }
        let x = pool[cursor[class] % pool.len()].clone();
        cursor[class] += 1;
        Ok(x)
    }
}

/// Largest-remainder rounding of `total * weights`.
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    // stable sort keeps lower indices first among equal remainders
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

#[derive(Debug, Clone)]
struct ClientPlan {
    concept: usize,
    style: usize,
    class_counts: Vec<usize>,
}

#[derive(Debug, Clone)]
struct Plan {
    participating: Vec<ClientPlan>,
    holdout: Vec<ClientPlan>,
}

impl Plan {
    fn demand(&self, num_classes: usize) -> Vec<usize> {
        let mut d = vec![0; num_classes];
        for c in self.participating.iter().chain(&self.holdout) {
            for (acc, n) in d.iter_mut().zip(&c.class_counts) {
                *acc += n;
            }
        }
        d
    }
}

fn plan(config: &ScenarioConfig) -> Result<Plan> {
    config.validate()?;
    let mut rng = substream(config.seed, "scenario-structure", &[]);
    let m = config.num_clients;
    let n_concepts = config.concept_maps.len();

    let concept_counts = apportion(m, &config.concept_proportions);
    let mut concepts: Vec<usize> = concept_counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    concepts.shuffle(&mut rng);

    let fractions = config.fraction_with_feature_shift.resolve(n_concepts)?;
    let mut styles = vec![0usize; m];
    for c in 0..n_concepts {
        let mut members: Vec<usize> = (0..m).filter(|&i| concepts[i] == c).collect();
        let styled = (fractions[c] * members.len() as f64).round() as usize;
        members.shuffle(&mut rng);
        for &i in members.iter().take(styled) {
            styles[i] = rng.gen_range(1..=config.num_feature_styles);
        }
    }

    let dirichlet = Dirichlet::new_with_size(config.dirichlet_alpha, config.num_classes)
        .map_err(|e| Error::config(format!("invalid Dirichlet parameters: {e}")))?;
    let [lo, hi] = config.samples_per_client;
    let participating = (0..m)
        .map(|i| {
            let n = rng.gen_range(lo..=hi);
            let p: Vec<f64> = dirichlet.sample(&mut rng);
            ClientPlan {
                concept: concepts[i],
                style: styles[i],
                class_counts: apportion(n, &p),
            }
        })
        .collect();
    let per_class = config.holdout_adapt_per_class + config.holdout_test_per_class;
    let holdout = (0..n_concepts)
        .map(|c| ClientPlan {
            concept: c,
            style: 0,
            class_counts: vec![per_class; config.num_classes],
        })
        .collect();
    Ok(Plan {
        participating,
        holdout,
    })
}

/// Invertible affine feature style `x -> A x + b`, `A = D Q` with `Q` a
/// product of plane rotations and `D` a positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStyle {
    pub matrix: Vec<Vec<f64>>,
    pub offset: Vec<f64>,
}

impl FeatureStyle {
    fn random(dim: usize, strength: f64, rng: &mut StreamRng) -> Self {
        let mut q: Vec<Vec<f64>> = (0..dim)
            .map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        if dim > 1 {
            for i in 0..dim {
                let j = (i + 1) % dim;
                let angle = strength * rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
                let (s, c) = angle.sin_cos();
                for row in q.iter_mut() {
                    let (a, b) = (row[i], row[j]);
                    row[i] = c * a - s * b;
                    row[j] = s * a + c * b;
                }
            }
        }
        let matrix = q
            .into_iter()
            .map(|row| {
                let z: f64 = StandardNormal.sample(rng);
                let scale = (0.5 * strength * z).exp();
                row.into_iter().map(|v| v * scale).collect()
            })
            .collect();
        let offset = (0..dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                strength * z
            })
            .collect();
        FeatureStyle { matrix, offset }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.matrix
            .iter()
            .zip(&self.offset)
            .map(|(row, b)| row.iter().zip(x).fold(*b, |acc, (a, v)| acc + a * v))
            .collect()
    }
}

pub fn feature_styles(config: &ScenarioConfig) -> Vec<FeatureStyle> {
    let mut rng = substream(config.seed, "scenario-styles", &[]);
    (0..config.num_feature_styles)
        .map(|_| FeatureStyle::random(config.input_dim, config.feature_style_strength, &mut rng))
        .collect()
}

fn class_centers(config: &ScenarioConfig) -> Vec<Vec<f64>> {
    let mut rng = substream(config.seed, "scenario-centers", &[]);
    (0..config.num_classes)
        .map(|_| {
            (0..config.input_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    config.class_separation * z
                })
                .collect()
        })
        .collect()
}

/// Exactly the samples [`generate`] consumes, class by class.
pub fn generate_base_pool(config: &ScenarioConfig) -> Result<ClassPools> {
    let plan = plan(config)?;
    let demand = plan.demand(config.num_classes);
    let centers = class_centers(config);
    let pools = demand
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let mut rng = substream(config.seed, "scenario-base", &[c as u64]);
            (0..n)
                .map(|_| {
                    centers[c]
                        .iter()
                        .map(|mu| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            mu + z
                        })
                        .collect()
                })
                .collect()
        })
        .collect();
    Ok(ClassPools {
        input_dim: config.input_dim,
        pools,
    })
}

fn assemble(config: &ScenarioConfig, plan: &Plan, pools: &ClassPools) -> Result<FederatedScenario> {
    let maps = config.resolved_maps()?;
    let styles = feature_styles(config);
    let mut cursor = vec![0usize; config.num_classes];

    let mut build = |id: usize, cp: &ClientPlan, participating: bool| -> Result<ClientDataset> {
        let mut items: Vec<(Vec<f64>, usize)> = Vec::new();
        for (class, &n) in cp.class_counts.iter().enumerate() {
            for _ in 0..n {
                let mut x = pools.take(&mut cursor, class)?;
                if cp.style > 0 {
                    x = styles[cp.style - 1].apply(&x);
                }
                items.push((x, class));
            }
        }
        let mut rng = substream(config.seed, "scenario-split", &[id as u64]);
        let (train_items, test_items) = if participating {
            items.shuffle(&mut rng);
            let n = items.len();
            let mut n_test = (n as f64 * config.test_fraction).round() as usize;
            if config.test_fraction > 0.0 && n >= 2 {
                n_test = n_test.clamp(1, n - 1);
            }
            let train = items.split_off(n_test);
            (train, items)
        } else {
            // first holdout_adapt_per_class of every class adapt, rest test
            let mut train = Vec::new();
            let mut test = Vec::new();
            let mut seen = vec![0usize; config.num_classes];
            for item in items {
                if seen[item.1] < config.holdout_adapt_per_class {
                    train.push(item.clone());
                } else {
                    test.push(item.clone());
                }
                seen[item.1] += 1;
            }
            train.shuffle(&mut rng);
            test.shuffle(&mut rng);
            (train, test)
        };
        let map = &maps[cp.concept];
        let split = |items: Vec<(Vec<f64>, usize)>| -> (Vec<LabeledSample>, Vec<usize>) {
            items
                .into_iter()
                .map(|(x, class)| (LabeledSample::new(x, map[class]), class))
                .unzip()
        };
        let (train, train_classes) = split(train_items);
        let (test, test_classes) = split(test_items);
        Ok(ClientDataset {
            id,
            participating,
            concept: cp.concept,
            style: cp.style,
            train,
            train_classes,
            test,
            test_classes,
        })
    };

    let participating = plan
        .participating
        .iter()
        .enumerate()
        .map(|(i, cp)| build(i, cp, true))
        .collect::<Result<Vec<_>>>()?;
    let m = participating.len();
    let nonparticipating = plan
        .holdout
        .iter()
        .enumerate()
        .map(|(c, cp)| build(m + c, cp, false))
        .collect::<Result<Vec<_>>>()?;
    Ok(FederatedScenario {
        input_dim: config.input_dim,
        num_classes: config.num_classes,
        num_feature_styles: config.num_feature_styles,
        concept_maps: maps,
        participating,
        nonparticipating,
    })
}

pub fn generate(config: &ScenarioConfig) -> Result<FederatedScenario> {
    let plan = plan(config)?;
    let pools = generate_base_pool(config)?;
    assemble(config, &plan, &pools)
}

/// Layout of a delimited numeric file holding a base classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TabularSchema {
    pub path: std::path::PathBuf,
    pub delimiter: char,
    pub has_header: bool,
    /// Column name when `has_header`, otherwise a zero-based index.
    pub label_column: String,
    /// Shuffle each class pool before partitioning.
    pub shuffle: bool,
}

impl Default for TabularSchema {
    fn default() -> Self {
        TabularSchema {
            path: "data.csv".into(),
            delimiter: ',',
            has_header: true,
            label_column: "label".into(),
            shuffle: true,
        }
    }
}

/// Reads a delimited file into per-class pools.
pub fn read_tabular(schema: &TabularSchema, num_classes: usize, input_dim: usize) -> Result<ClassPools> {
    let text = fs::read_to_string(&schema.path).map_err(|e| Error::io(&schema.path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let label_idx = if schema.has_header {
        let (_, header) = lines
            .next()
            .ok_or_else(|| Error::Schema("tabular file is empty".into()))?;
        header
            .split(schema.delimiter)
            .position(|h| h.trim() == schema.label_column)
            .ok_or_else(|| {
                Error::Schema(format!("label column `{}` not found in header", schema.label_column))
            })?
    } else {
        schema.label_column.parse().map_err(|_| {
            Error::Schema(format!(
                "without a header the label column must be an index, got `{}`",
                schema.label_column
            ))
        })?
    };
    let mut pools = vec![Vec::new(); num_classes];
    for (lineno, line) in lines {
        let line_no = lineno + 1;
        let fields: Vec<&str> = line.split(schema.delimiter).map(str::trim).collect();
        if fields.len() != input_dim + 1 || label_idx >= fields.len() {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected {} columns, found {}", input_dim + 1, fields.len()),
            });
        }
        let mut x = Vec::with_capacity(input_dim);
        let mut label = None;
        for (c, f) in fields.iter().enumerate() {
            if c == label_idx {
                let y: usize = f.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("label `{f}` is not a class index"),
                })?;
                if y >= num_classes {
                    return Err(Error::Schema(format!(
                        "line {line_no}: label {y} outside [0, {num_classes})"
                    )));
                }
                label = Some(y);
            } else {
                let v: f64 = f.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("`{f}` is not a number"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        line: line_no,
                        message: "non-finite feature".into(),
                    });
                }
                x.push(v);
            }
        }
        pools[label.expect("label column present")].push(x);
    }
    Ok(ClassPools { input_dim, pools })
}

/// Loads a tabular base task and partitions it with the same label, feature
/// and concept machinery as [`generate`]. Class pools are cycled when the
/// partition needs more samples than the file holds.
pub fn load_tabular(schema: &TabularSchema, config: &ScenarioConfig) -> Result<FederatedScenario> {
    let plan = plan(config)?;
    let mut pools = read_tabular(schema, config.num_classes, config.input_dim)?;
    if let Some(c) = pools.pools.iter().position(|p| p.is_empty()) {
        return Err(Error::Schema(format!("tabular data has no rows of class {c}")));
    }
    if schema.shuffle {
        for (c, pool) in pools.pools.iter_mut().enumerate() {
            pool.shuffle(&mut substream(config.seed, "tabular-shuffle", &[c as u64]));
        }
    }
    assemble(config, &plan, &pools)
}

/// Writes class pools as a tabular file (`f0..f{d-1},label`), class by class.
pub fn write_tabular(path: &Path, pools: &ClassPools) -> Result<()> {
    let mut out = String::new();
    for i in 0..pools.input_dim {
        let _ = write!(out, "f{i},");
    }
    out.push_str("label\n");
    for (class, pool) in pools.pools.iter().enumerate() {
        for x in pool {
            for v in x {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{class}");
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientRecord {
    pub id: usize,
    pub participating: bool,
    pub concept: usize,
    pub style: usize,
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioHeader {
    pub format: String,
    pub input_dim: usize,
    pub num_classes: usize,
    pub num_feature_styles: usize,
    pub concept_maps: Vec<Vec<usize>>,
    /// Realized share of participating clients per concept.
    pub concept_shares: Vec<f64>,
    /// Realized share of participating clients with a feature style, per concept.
    pub styled_shares: Vec<f64>,
    pub config: Option<ScenarioConfig>,
    pub clients: Vec<ClientRecord>,
}

impl ScenarioHeader {
    pub fn describe(scenario: &FederatedScenario, config: Option<&ScenarioConfig>) -> Self {
        let m = scenario.participating.len().max(1) as f64;
        let nc = scenario.num_concepts();
        let mut concept_counts = vec![0usize; nc];
        let mut styled = vec![0usize; nc];
        for c in &scenario.participating {
            concept_counts[c.concept] += 1;
            if c.style > 0 {
                styled[c.concept] += 1;
            }
        }
        ScenarioHeader {
            format: FORMAT_TAG.into(),
            input_dim: scenario.input_dim,
            num_classes: scenario.num_classes,
            num_feature_styles: scenario.num_feature_styles,
            concept_maps: scenario.concept_maps.clone(),
            concept_shares: concept_counts.iter().map(|&n| n as f64 / m).collect(),
            styled_shares: styled
                .iter()
                .zip(&concept_counts)
                .map(|(&s, &n)| if n == 0 { 0.0 } else { s as f64 / n as f64 })
                .collect(),
            config: config.cloned(),
            clients: scenario
                .participating
                .iter()
                .chain(&scenario.nonparticipating)
                .map(|c| ClientRecord {
                    id: c.id,
                    participating: c.participating,
                    concept: c.concept,
                    style: c.style,
                    n_train: c.train.len(),
                    n_test: c.test.len(),
                })
                .collect(),
        }
    }
}

pub fn write_scenario(dir: &Path, scenario: &FederatedScenario, config: Option<&ScenarioConfig>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let header = ScenarioHeader::describe(scenario, config);
    let json = serde_json::to_string_pretty(&header).expect("header serializes");
    let header_path = dir.join(HEADER_FILE);
    fs::write(&header_path, json + "\n").map_err(|e| Error::io(&header_path, e))?;

    let mut out = String::new();
    for i in 0..scenario.input_dim {
        let _ = write!(out, "x{i},");
    }
    out.push_str("label,client,concept,style\n");
    for c in scenario.participating.iter().chain(&scenario.nonparticipating) {
        for s in c.train.iter().chain(&c.test) {
            for v in &s.x {
                let _ = write!(out, "{v},");
            }
            let _ = writeln!(out, "{},{},{},{}", s.y, c.id, c.concept, c.style);
        }
    }
    let data_path = dir.join(DATA_FILE);
    fs::write(&data_path, out).map_err(|e| Error::io(&data_path, e))
}

pub fn read_header(dir: &Path) -> Result<ScenarioHeader> {
    let path = dir.join(HEADER_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let header: ScenarioHeader =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    if header.format != FORMAT_TAG {
        return Err(Error::Schema(format!("unsupported scenario format `{}`", header.format)));
    }
    Ok(header)
}

pub fn read_scenario(dir: &Path) -> Result<FederatedScenario> {
    let header = read_header(dir)?;
    let d = header.input_dim;
    let inverse: Vec<Vec<usize>> = header
        .concept_maps
        .iter()
        .map(|m| {
            let mut inv = vec![0; m.len()];
            for (class, &label) in m.iter().enumerate() {
                inv[label] = class;
            }
            inv
        })
        .collect();
    let path = dir.join(DATA_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut rows = text.lines().enumerate();
    rows.next();
    let mut participating = Vec::new();
    let mut nonparticipating = Vec::new();
    for rec in &header.clients {
        if rec.concept >= inverse.len() {
            return Err(Error::Schema(format!("client {} has unknown concept {}", rec.id, rec.concept)));
        }
        let mut ds = ClientDataset {
            id: rec.id,
            participating: rec.participating,
            concept: rec.concept,
            style: rec.style,
            train: Vec::with_capacity(rec.n_train),
            train_classes: Vec::with_capacity(rec.n_train),
            test: Vec::with_capacity(rec.n_test),
            test_classes: Vec::with_capacity(rec.n_test),
        };
        for idx in 0..rec.n_train + rec.n_test {
            let (lineno, line) = rows.next().ok_or_else(|| {
                Error::Schema(format!("data file ends before client {} is complete", rec.id))
            })?;
            let line_no = lineno + 1;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 4 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {} columns, found {}", d + 4, fields.len()),
                });
            }
            let parse_f = |f: &str| -> Result<f64> {
                f.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("`{f}` is not a number"),
                })
            };
            let parse_u = |f: &str| -> Result<usize> {
                f.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("`{f}` is not a nonnegative integer"),
                })
            };
            let x = fields[..d].iter().map(|f| parse_f(f)).collect::<Result<Vec<f64>>>()?;
            let y = parse_u(fields[d])?;
            let (client, concept, style) = (parse_u(fields[d + 1])?, parse_u(fields[d + 2])?, parse_u(fields[d + 3])?);
            if client != rec.id || concept != rec.concept || style != rec.style || y >= header.num_classes {
                return Err(Error::Schema(format!(
                    "line {line_no}: sample annotations disagree with header record of client {}",
                    rec.id
                )));
            }
            let class = inverse[concept][y];
            if idx < rec.n_train {
                ds.train.push(LabeledSample::new(x, y));
                ds.train_classes.push(class);
            } else {
                ds.test.push(LabeledSample::new(x, y));
                ds.test_classes.push(class);
            }
        }
        if rec.participating {
            participating.push(ds);
        } else {
            nonparticipating.push(ds);
        }
    }
    if let Some((lineno, _)) = rows.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::Parse {
            line: lineno + 1,
            message: "unexpected rows after the last client".into(),
        });
    }
    Ok(FederatedScenario {
        input_dim: d,
        num_classes: header.num_classes,
        num_feature_styles: header.num_feature_styles,
        concept_maps: header.concept_maps,
        participating,
        nonparticipating,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ScenarioConfig {
        ScenarioConfig {
            num_clients: 12,
            samples_per_client: [30, 50],
            holdout_adapt_per_class: 3,
            holdout_test_per_class: 5,
            seed: 42,
            ..ScenarioConfig::standard()
        }
    }

    #[test]
    fn concept_maps_from_the_relabeling_rules() {
        let rev = ConceptMapSpec::Reverse.resolve(10).unwrap();
        assert_eq!(rev[3], 6);
        let shift = ConceptMapSpec::Shift(1).resolve(10).unwrap();
        assert_eq!(shift[9], 0);
        assert!(ConceptMapSpec::Permutation(vec![0, 0, 1]).resolve(3).is_err());
    }

    #[test]
    fn distinct_maps_disagree_somewhere() {
        let maps = ScenarioConfig::standard().resolved_maps().unwrap();
        for a in 0..maps.len() {
            for b in a + 1..maps.len() {
                assert!(maps[a].iter().zip(&maps[b]).any(|(x, y)| x != y));
            }
        }
    }

    #[test]
    fn apportion_is_exact() {
        assert_eq!(apportion(10, &[0.5, 0.25, 0.25]), vec![5, 3, 2]);
        assert_eq!(apportion(300, &[0.5, 0.25, 0.25]), vec![150, 75, 75]);
        assert_eq!(apportion(7, &[1.0, 1.0, 1.0]).iter().sum::<usize>(), 7);
    }

    #[test]
    fn huge_alpha_gives_uniform_labels() {
        let cfg = ScenarioConfig {
            dirichlet_alpha: 1e6,
            samples_per_client: [1000, 1000],
            test_fraction: 0.0,
            num_clients: 4,
            ..small()
        };
        let plan = plan(&cfg).unwrap();
        for c in &plan.participating {
            for &n in &c.class_counts {
                assert!((n as f64 / 1000.0 - 0.1).abs() < 0.01, "{:?}", c.class_counts);
            }
        }
    }

    #[test]
    fn annotations_are_consistent() {
        let cfg = small();
        let sc = generate(&cfg).unwrap();
        assert_eq!(sc.participating.len(), 12);
        assert_eq!(sc.nonparticipating.len(), 3);
        for c in sc.participating.iter().chain(&sc.nonparticipating) {
            let map = &sc.concept_maps[c.concept];
            for (s, &class) in c.train.iter().zip(&c.train_classes).chain(c.test.iter().zip(&c.test_classes)) {
                assert_eq!(s.y, map[class]);
            }
        }
        for (c, h) in sc.nonparticipating.iter().enumerate() {
            assert_eq!(h.concept, c);
            assert_eq!(h.style, 0);
            let mut counts = [0; 10];
            h.test_classes.iter().for_each(|&k| counts[k] += 1);
            assert!(counts.iter().all(|&n| n == 5));
            assert_eq!(h.train.len(), 30);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let other = ScenarioConfig { seed: 43, ..small() };
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn styles_are_invertible_maps() {
        let cfg = small();
        for s in feature_styles(&cfg) {
            // |det D Q| = prod of positive diagonal scales > 0; check rows of
            // D Q are mutually orthogonal (Q orthogonal, D diagonal)
            for i in 0..cfg.input_dim {
                for j in i + 1..cfg.input_dim {
                    let dot: f64 = s.matrix[i].iter().zip(&s.matrix[j]).map(|(a, b)| a * b).sum();
                    assert!(dot.abs() < 1e-12);
                }
                assert!(s.matrix[i].iter().map(|v| v * v).sum::<f64>() > 0.0);
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = ScenarioConfig { num_clients: 0, ..small() };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
        let bad = ScenarioConfig { samples_per_client: [0, 0], ..small() };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
        let bad = ScenarioConfig { concept_proportions: vec![0.5, 0.5, 0.5], ..small() };
        assert!(matches!(generate(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn paper_mix_counts() {
        let cfg = ScenarioConfig::paper_mix();
        let p = plan(&cfg).unwrap();
        let untouched = p.participating.iter().filter(|c| c.concept == 0 && c.style == 0).count();
        let styled_only = p.participating.iter().filter(|c| c.concept == 0 && c.style > 0).count();
        let rev = p.participating.iter().filter(|c| c.concept == 1).count();
        let rev_styled = p.participating.iter().filter(|c| c.concept == 1 && c.style > 0).count();
        assert_eq!((untouched, styled_only, rev, rev_styled), (90, 60, 75, 15));
    }
}
