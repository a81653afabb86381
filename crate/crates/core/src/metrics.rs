//! Accuracy, cluster composition, concept purity and report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{predict_hard, predict_soft};
use crate::ensemble::ClusterEnsemble;
use crate::error::{Error, Result};
use crate::fed::Federation;
use crate::model::LabeledSample;
use crate::rc::{objective, AssignmentState};
use crate::scenario::FederatedScenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Class,
    Style,
    Concept,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::Class, Attribute::Style, Attribute::Concept];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Class => "class",
            Attribute::Style => "style",
            Attribute::Concept => "concept",
        }
    }
}

impl std::str::FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::config(format!("unknown attribute `{s}` (class, style, concept)")))
    }
}

/// Soft mass uses gamma directly; hard mass moves each sample's whole weight
/// to its largest-gamma cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MassMode {
    Soft,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    Soft,
    Hard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionTable {
    pub attribute: Attribute,
    /// Attribute values present in the data, ascending.
    pub values: Vec<usize>,
    /// Active clusters, ascending.
    pub clusters: Vec<usize>,
    /// Total weight mass carrying each value.
    pub value_mass: Vec<f64>,
    /// `shares[v][c]`: fraction of value `values[v]`'s mass in cluster
    /// `clusters[c]`; each row sums to one.
    pub shares: Vec<Vec<f64>>,
}

fn mass_row(row: &[f64], active: &[bool], mode: MassMode) -> Vec<f64> {
    match mode {
        MassMode::Soft => row.to_vec(),
        MassMode::Hard => {
            let mut best: Option<usize> = None;
            for k in 0..row.len() {
                if active[k] && best.is_none_or(|b| row[k] > row[b]) {
                    best = Some(k);
                }
            }
            let mut out = vec![0.0; row.len()];
            if let Some(b) = best {
                out[b] = 1.0;
            }
            out
        }
    }
}

/// Raw `value x cluster` mass over every participating train sample.
fn tally(
    assignment: &AssignmentState,
    scenario: &FederatedScenario,
    active: &[bool],
    attribute: Attribute,
    mode: MassMode,
) -> (usize, Vec<Vec<f64>>) {
    let n_values = match attribute {
        Attribute::Class => scenario.num_classes,
        Attribute::Style => scenario.num_feature_styles + 1,
        Attribute::Concept => scenario.num_concepts(),
    };
    let kk = assignment.num_clusters;
    let mut mass = vec![vec![0.0; kk]; n_values];
    for (client, a) in scenario.participating.iter().zip(&assignment.clients) {
        for (j, row) in a.rows().enumerate() {
            let v = match attribute {
                Attribute::Class => client.train_classes[j],
                Attribute::Style => client.style,
                Attribute::Concept => client.concept,
            };
            for (m, g) in mass[v].iter_mut().zip(mass_row(row, active, mode)) {
                *m += g;
            }
        }
    }
    (n_values, mass)
}

pub fn composition(
    assignment: &AssignmentState,
    scenario: &FederatedScenario,
    active: &[bool],
    attribute: Attribute,
    mode: MassMode,
) -> CompositionTable {
    let (n_values, mass) = tally(assignment, scenario, active, attribute, mode);
    let clusters: Vec<usize> = (0..active.len()).filter(|&k| active[k]).collect();
    let mut values = Vec::new();
    let mut value_mass = Vec::new();
    let mut shares = Vec::new();
    for (v, row) in mass.iter().enumerate().take(n_values) {
        let total: f64 = clusters.iter().map(|&k| row[k]).sum();
        if total <= 0.0 {
            continue;
        }
        values.push(v);
        value_mass.push(total);
        shares.push(clusters.iter().map(|&k| row[k] / total).collect());
    }
    CompositionTable {
        attribute,
        values,
        clusters,
        value_mass,
        shares,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PurityScore {
    /// Largest single-concept fraction of each active cluster's mass.
    pub per_cluster: Vec<f64>,
    /// Mass-weighted mean of `per_cluster`.
    pub mean: f64,
}

pub fn concept_purity(assignment: &AssignmentState, scenario: &FederatedScenario, active: &[bool]) -> PurityScore {
    let (_, mass) = tally(assignment, scenario, active, Attribute::Concept, MassMode::Soft);
    purity_from_mass(&mass, active)
}

/// Purity from a `concept x cluster` mass matrix.
fn purity_from_mass(mass: &[Vec<f64>], active: &[bool]) -> PurityScore {
    let mut per_cluster = Vec::new();
    let mut dominant = 0.0;
    let mut total = 0.0;
    for k in (0..active.len()).filter(|&k| active[k]) {
        let col: Vec<f64> = mass.iter().map(|row| row[k]).collect();
        let t: f64 = col.iter().sum();
        let m = col.iter().copied().fold(0.0, f64::max);
        per_cluster.push(if t > 0.0 { m / t } else { 0.0 });
        dominant += m;
        total += t;
    }
    PurityScore {
        per_cluster,
        mean: if total > 0.0 { dominant / total } else { 0.0 },
    }
}

/// Purity recovered from a concept composition table alone.
pub fn purity_from_table(table: &CompositionTable) -> Result<f64> {
    if table.attribute != Attribute::Concept {
        return Err(Error::config("purity needs the concept composition table"));
    }
    let k = table.clusters.len();
    let mass: Vec<Vec<f64>> = table
        .shares
        .iter()
        .zip(&table.value_mass)
        .map(|(row, m)| row.iter().map(|s| s * m).collect())
        .collect();
    Ok(purity_from_mass(&mass, &vec![true; k]).mean)
}

/// Fraction of `samples` predicted correctly with cluster weights `omega`.
pub fn client_accuracy(
    samples: &[LabeledSample],
    ensemble: &ClusterEnsemble,
    omega: &[f64],
    mode: PredictionMode,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("accuracy over an empty split"));
    }
    let mut correct = 0usize;
    for s in samples {
        let pred = match mode {
            PredictionMode::Soft => predict_soft(&s.x, ensemble, omega)?,
            PredictionMode::Hard => predict_hard(&s.x, ensemble, omega)?,
        };
        if pred == s.y {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Mean per-client accuracy over `(samples, omega)` pairs; empty splits are
/// skipped.
pub fn evaluate_accuracy(
    ensemble: &ClusterEnsemble,
    clients: &[(&[LabeledSample], &[f64])],
    mode: PredictionMode,
) -> Result<f64> {
    let accs = clients
        .par_iter()
        .filter(|(s, _)| !s.is_empty())
        .map(|(s, w)| client_accuracy(s, ensemble, w, mode))
        .collect::<Result<Vec<f64>>>()?;
    if accs.is_empty() {
        return Ok(0.0);
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub objective: f64,
    pub train_acc: f64,
    pub local_acc: f64,
    pub global_acc: f64,
    pub global_acc_hard: f64,
    pub active_clusters: usize,
    /// Largest per-weight change of the round; absent before round 1.
    pub gamma_max_row_change: Option<f64>,
    pub purity: f64,
    /// Share of the total weight mass per cluster (all K, removed ones 0).
    pub cluster_mass: Vec<f64>,
    pub composition: Compositions,
}

/// One composition table per annotated attribute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Compositions {
    pub class: CompositionTable,
    pub style: CompositionTable,
    pub concept: CompositionTable,
}

impl Compositions {
    pub fn compute(
        assignment: &AssignmentState,
        scenario: &FederatedScenario,
        active: &[bool],
        mode: MassMode,
    ) -> Self {
        let table = |a| composition(assignment, scenario, active, a, mode);
        Compositions {
            class: table(Attribute::Class),
            style: table(Attribute::Style),
            concept: table(Attribute::Concept),
        }
    }

    pub fn get(&self, attribute: Attribute) -> &CompositionTable {
        match attribute {
            Attribute::Class => &self.class,
            Attribute::Style => &self.style,
            Attribute::Concept => &self.concept,
        }
    }
}

pub(crate) fn round_report(fed: &Federation<'_>) -> Result<RoundReport> {
    let scenario = fed.scenario;
    let ens = &fed.ensemble;
    let active = &ens.active;
    let train = fed.train_slices();
    let obj = objective(&fed.assignment, ens, &fed.stats, &train)?;

    let omegas: Vec<&[f64]> = fed.assignment.clients.iter().map(|a| a.omega.as_slice()).collect();
    let train_pairs: Vec<(&[LabeledSample], &[f64])> = train.iter().copied().zip(omegas.iter().copied()).collect();
    let test_pairs: Vec<(&[LabeledSample], &[f64])> = scenario
        .participating
        .iter()
        .map(|c| c.test.as_slice())
        .zip(omegas.iter().copied())
        .collect();
    let train_acc = evaluate_accuracy(ens, &train_pairs, PredictionMode::Soft)?;
    let local_acc = evaluate_accuracy(ens, &test_pairs, PredictionMode::Soft)?;

    let holdout_omega = scenario
        .nonparticipating
        .par_iter()
        .map(|c| fed.adapt_client(&c.train))
        .collect::<Result<Vec<_>>>()?;
    let holdout: Vec<(&[LabeledSample], &[f64])> = scenario
        .nonparticipating
        .iter()
        .zip(&holdout_omega)
        .map(|(c, w)| (c.test.as_slice(), w.as_slice()))
        .collect();
    let global_acc = evaluate_accuracy(ens, &holdout, PredictionMode::Soft)?;
    let global_acc_hard = evaluate_accuracy(ens, &holdout, PredictionMode::Hard)?;

    let purity = concept_purity(&fed.assignment, scenario, active).mean;
    let composition = Compositions::compute(&fed.assignment, scenario, active, MassMode::Soft);
    Ok(RoundReport {
        round: fed.round,
        objective: obj,
        train_acc,
        local_acc,
        global_acc,
        global_acc_hard,
        active_clusters: ens.num_active(),
        gamma_max_row_change: (fed.round > 0).then_some(fed.last_change),
        purity,
        cluster_mass: fed.assignment.cluster_mass_fractions(),
        composition,
    })
}

/// The round with the best train accuracy (earliest on ties).
pub fn best_train_round(reports: &[RoundReport]) -> Option<&RoundReport> {
    reports.iter().fold(None, |best: Option<&RoundReport>, r| match best {
        Some(b) if b.train_acc >= r.train_acc => Some(b),
        _ => Some(r),
    })
}

pub const ROUND_CSV_HEADER: &str =
    "round,objective,train_acc,local_acc,global_acc,global_acc_hard,active_clusters,gamma_max_row_change,purity";

pub fn rounds_csv(reports: &[RoundReport]) -> String {
    let mut out = String::from(ROUND_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let change = r.gamma_max_row_change.map(|c| c.to_string()).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.round,
            r.objective,
            r.train_acc,
            r.local_acc,
            r.global_acc,
            r.global_acc_hard,
            r.active_clusters,
            change,
            r.purity
        );
    }
    out
}

pub fn composition_csv(table: &CompositionTable) -> String {
    let mut out = String::from(table.attribute.name());
    out.push_str(",mass");
    for k in &table.clusters {
        let _ = write!(out, ",cluster_{k}");
    }
    out.push('\n');
    for ((v, m), row) in table.values.iter().zip(&table.value_mass).zip(&table.shares) {
        let _ = write!(out, "{v},{m}");
        for s in row {
            let _ = write!(out, ",{s}");
        }
        out.push('\n');
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rc::ClientAssignment;
    use crate::scenario::{generate, ScenarioConfig};

    fn tiny() -> FederatedScenario {
        generate(&ScenarioConfig {
            num_clients: 6,
            samples_per_client: [8, 12],
            holdout_adapt_per_class: 1,
            holdout_test_per_class: 1,
            seed: 5,
            ..ScenarioConfig::standard()
        })
        .unwrap()
    }

    #[test]
    fn uniform_gamma_gives_equal_shares_and_third_purity() {
        let sc = ScenarioConfig {
            concept_proportions: vec![1.0 / 3.0; 3],
            ..ScenarioConfig::standard()
        };
        let sc = generate(&ScenarioConfig { num_clients: 9, seed: 1, ..sc }).unwrap();
        let a = AssignmentState::uniform(&sc.train_counts(), &[true; 3]);
        for attr in Attribute::ALL {
            let t = composition(&a, &sc, &[true; 3], attr, MassMode::Soft);
            for row in &t.shares {
                assert!(row.iter().all(|s| (s - 1.0 / 3.0).abs() < 1e-12));
            }
        }
        // equal concept mass is not guaranteed by client counts alone; check
        // against the tally directly
        let p = concept_purity(&a, &sc, &[true; 3]);
        let mut mass = [0.0; 3];
        for c in &sc.participating {
            mass[c.concept] += c.train.len() as f64;
        }
        let want = mass.iter().copied().fold(0.0, f64::max) / mass.iter().sum::<f64>();
        assert!((p.mean - want).abs() < 1e-12);
    }

    #[test]
    fn one_hot_by_concept_is_a_permutation_matrix() {
        let sc = tiny();
        let perm = [2usize, 0, 1];
        let a = AssignmentState {
            num_clusters: 3,
            clients: sc
                .participating
                .iter()
                .map(|c| ClientAssignment::one_hot(c.train.len(), 3, perm[c.concept]))
                .collect(),
        };
        let t = composition(&a, &sc, &[true; 3], Attribute::Concept, MassMode::Soft);
        for (row, &v) in t.shares.iter().zip(&t.values) {
            for (c, s) in row.iter().enumerate() {
                assert_eq!(*s, if c == perm[v] { 1.0 } else { 0.0 });
            }
        }
        assert_eq!(concept_purity(&a, &sc, &[true; 3]).mean, 1.0);
        assert!((purity_from_table(&t).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hard_mass_moves_weight_to_argmax() {
        assert_eq!(mass_row(&[0.2, 0.5, 0.3], &[true; 3], MassMode::Hard), vec![0.0, 1.0, 0.0]);
        assert_eq!(mass_row(&[0.2, 0.5, 0.3], &[true, false, true], MassMode::Hard), vec![0.0, 0.0, 1.0]);
        assert_eq!(mass_row(&[0.5, 0.5], &[true; 2], MassMode::Hard), vec![1.0, 0.0]);
    }

    #[test]
    fn best_round_prefers_earliest_tie() {
        let sc = tiny();
        let a = AssignmentState::uniform(&sc.train_counts(), &[true]);
        let mut r = RoundReport {
            round: 0,
            objective: 0.0,
            train_acc: 0.5,
            local_acc: 0.0,
            global_acc: 0.0,
            global_acc_hard: 0.0,
            active_clusters: 1,
            gamma_max_row_change: None,
            purity: 0.0,
            cluster_mass: vec![1.0],
            composition: Compositions::compute(&a, &sc, &[true], MassMode::Soft),
        };
        let mut reports = vec![r.clone()];
        r.round = 1;
        r.train_acc = 0.8;
        reports.push(r.clone());
        r.round = 2;
        reports.push(r);
        assert_eq!(best_train_round(&reports).unwrap().round, 1);
    }
}
