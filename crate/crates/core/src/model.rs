//! Small differentiable classifiers shared by every algorithm.
//!
//! A model is a stack of dense layers: zero or more `tanh` hidden layers (the
//! trunk) followed by one affine output layer (the head) feeding a softmax.
//! Parameters live in one flat [`ParamVector`]:
//!
//! ```text
//! [ trunk layer 1 | trunk layer 2 | ... | head ]
//! layer block = weights (row-major, out x in) followed by bias (out)
//! ```
//!
//! The trunk block always comes first so that a shared trunk is a single
//! prefix slice `[0, trunk_len)` of every cluster's vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Architecture {
    Linear,
    Mlp { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub architecture: Architecture,
    pub input_dim: usize,
    pub num_classes: usize,
    /// Trunk parameters are one block shared by all clusters; only heads differ.
    #[serde(default)]
    pub shared_trunk: bool,
}

#[derive(Debug, Clone, Copy)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    offset: usize,
}

impl Layer {
    fn weights(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    fn bias(&self) -> std::ops::Range<usize> {
        let start = self.offset + self.fan_in * self.fan_out;
        start..start + self.fan_out
    }

    fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }
}

impl ModelSpec {
    pub fn linear(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Linear,
            input_dim,
            num_classes,
            shared_trunk: false,
        }
    }

    pub fn mlp(input_dim: usize, hidden: Vec<usize>, num_classes: usize) -> Self {
        ModelSpec {
            architecture: Architecture::Mlp { hidden },
            input_dim,
            num_classes,
            shared_trunk: false,
        }
    }

    pub fn with_shared_trunk(mut self, shared: bool) -> Self {
        self.shared_trunk = shared;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("model input_dim must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("model num_classes must be at least 2"));
        }
        if let Architecture::Mlp { hidden } = &self.architecture {
            if hidden.contains(&0) {
                return Err(Error::config("mlp hidden sizes must be positive"));
            }
        }
        Ok(())
    }

    fn hidden_sizes(&self) -> &[usize] {
        match &self.architecture {
            Architecture::Linear => &[],
            Architecture::Mlp { hidden } => hidden,
        }
    }

    fn layers(&self) -> Vec<Layer> {
        let mut layers = Vec::with_capacity(self.hidden_sizes().len() + 1);
        let mut fan_in = self.input_dim;
        let mut offset = 0;
        for &h in self.hidden_sizes() {
            let layer = Layer {
                fan_in,
                fan_out: h,
                offset,
            };
            offset += layer.len();
            layers.push(layer);
            fan_in = h;
        }
        layers.push(Layer {
            fan_in,
            fan_out: self.num_classes,
            offset,
        });
        layers
    }

    /// Length of the trunk prefix (zero for linear models).
    pub fn trunk_len(&self) -> usize {
        let layers = self.layers();
        layers[layers.len() - 1].offset
    }

    pub fn head_len(&self) -> usize {
        let layers = self.layers();
        layers[layers.len() - 1].len()
    }

    pub fn param_len(&self) -> usize {
        self.trunk_len() + self.head_len()
    }

    /// Uniform initialization in `[-s, s]`, `s = 1/sqrt(fan_in)`, per layer.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = vec![0.0; self.param_len()];
        for layer in self.layers() {
            let s = 1.0 / (layer.fan_in as f64).sqrt();
            for v in &mut values[layer.offset..layer.offset + layer.len()] {
                *v = rng.gen_range(-s..=s);
            }
        }
        ParamVector(values)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`
    pub fn axpy(&mut self, scale: f64, other: &[f64]) {
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += scale * b;
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }
}

impl std::ops::Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub x: Vec<f64>,
    pub y: usize,
}

impl LabeledSample {
    pub fn new(x: Vec<f64>, y: usize) -> Self {
        LabeledSample { x, y }
    }
}

fn check_inputs(x: &[f64], params: &ParamVector, spec: &ModelSpec) -> Result<()> {
    if x.len() != spec.input_dim {
        return Err(Error::config(format!(
            "feature length {} does not match model input_dim {}",
            x.len(),
            spec.input_dim
        )));
    }
    if params.len() != spec.param_len() {
        return Err(Error::config(format!(
            "parameter length {} does not match model layout length {}",
            params.len(),
            spec.param_len()
        )));
    }
    if let Some(i) = params.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("parameter {i} is not finite")));
    }
    Ok(())
}

fn check_label(y: usize, spec: &ModelSpec) -> Result<()> {
    if y >= spec.num_classes {
        return Err(Error::config(format!(
            "label {y} outside [0, {})",
            spec.num_classes
        )));
    }
    Ok(())
}

/// Affine map `out = W a + b` of one layer.
fn affine(layer: &Layer, params: &[f64], input: &[f64]) -> Vec<f64> {
    let w = &params[layer.weights()];
    let b = &params[layer.bias()];
    (0..layer.fan_out)
        .map(|o| {
            let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
            row.iter().zip(input).fold(b[o], |acc, (wi, xi)| acc + wi * xi)
        })
        .collect()
}

/// Returns the post-activation outputs of every trunk layer and the logits.
fn forward(spec: &ModelSpec, params: &[f64], x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let layers = spec.layers();
    let (head, trunk) = layers.split_last().expect("at least one layer");
    let mut activations: Vec<Vec<f64>> = Vec::with_capacity(trunk.len());
    for layer in trunk {
        let input = activations.last().map_or(x, |a| a.as_slice());
        let mut z = affine(layer, params, input);
        z.iter_mut().for_each(|v| *v = v.tanh());
        activations.push(z);
    }
    let input = activations.last().map_or(x, |a| a.as_slice());
    let logits = affine(head, params, input);
    (activations, logits)
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= sum);
    p
}

pub fn logits(x: &[f64], params: &ParamVector, spec: &ModelSpec) -> Result<Vec<f64>> {
    check_inputs(x, params, spec)?;
    Ok(forward(spec, params.as_slice(), x).1)
}

/// Cross-entropy `-ln softmax(m(x))[y]`.
pub fn loss(sample: &LabeledSample, params: &ParamVector, spec: &ModelSpec) -> Result<f64> {
    check_label(sample.y, spec)?;
    let z = logits(&sample.x, params, spec)?;
    // lse >= z[y] mathematically; clamp the rounding residue
    Ok((log_sum_exp(&z) - z[sample.y]).max(0.0))
}

pub fn class_probabilities(x: &[f64], params: &ParamVector, spec: &ModelSpec) -> Result<Vec<f64>> {
    Ok(softmax(&logits(x, params, spec)?))
}

pub fn loss_gradient(
    sample: &LabeledSample,
    params: &ParamVector,
    spec: &ModelSpec,
) -> Result<ParamVector> {
    let mut grad = vec![0.0; params.len()];
    accumulate_gradient(sample, params, spec, 1.0, &mut grad)?;
    Ok(ParamVector(grad))
}

/// Adds `weight * grad f(sample; params)` into `out` and returns the loss.
///
/// Hot path of every trainer; avoids allocating a fresh gradient per sample.
pub fn accumulate_gradient(
    sample: &LabeledSample,
    params: &ParamVector,
    spec: &ModelSpec,
    weight: f64,
    out: &mut [f64],
) -> Result<f64> {
    check_label(sample.y, spec)?;
    check_inputs(&sample.x, params, spec)?;
    if out.len() != params.len() {
        return Err(Error::config("gradient buffer length mismatch"));
    }
    let p = params.as_slice();
    let layers = spec.layers();
    let (activations, z) = forward(spec, p, &sample.x);
    let lse = log_sum_exp(&z);
    let loss = (lse - z[sample.y]).max(0.0);

    // d loss / d logits = softmax - onehot(y)
    let mut delta: Vec<f64> = z.iter().map(|l| (l - lse).exp()).collect();
    delta[sample.y] -= 1.0;

    for (li, layer) in layers.iter().enumerate().rev() {
        let input: &[f64] = if li == 0 {
            &sample.x
        } else {
            &activations[li - 1]
        };
        let w_range = layer.weights();
        let b_range = layer.bias();
        for o in 0..layer.fan_out {
            let d = weight * delta[o];
            let row = &mut out[w_range.start + o * layer.fan_in..w_range.start + (o + 1) * layer.fan_in];
            for (g, xi) in row.iter_mut().zip(input) {
                *g += d * xi;
            }
            out[b_range.start + o] += d;
        }
        if li > 0 {
            let w = &p[w_range];
            let mut back = vec![0.0; layer.fan_in];
            for o in 0..layer.fan_out {
                let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                for (bk, wi) in back.iter_mut().zip(row) {
                    *bk += wi * delta[o];
                }
            }
            // tanh'(z) = 1 - tanh(z)^2
            for (bk, a) in back.iter_mut().zip(input) {
                *bk *= 1.0 - a * a;
            }
            delta = back;
        }
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use rand::Rng;

    /// Straight-line softmax cross-entropy for a linear model.
    fn scalar_linear_loss(x: &[f64], y: usize, w: &[f64], d: usize, c: usize) -> f64 {
        let mut z = Vec::new();
        for o in 0..c {
            let mut s = w[c * d + o];
            for i in 0..d {
                s += w[o * d + i] * x[i];
            }
            z.push(s);
        }
        let mut denom = 0.0;
        for v in &z {
            denom += v.exp();
        }
        -(z[y].exp() / denom).ln()
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let spec = ModelSpec::linear(3, 2);
        let s = LabeledSample::new(vec![0.3, -1.0, 2.0], 1);
        let l = loss(&s, &ParamVector::zeros(spec.param_len()), &spec).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);

        let spec = ModelSpec::linear(3, 4);
        let l = loss(&s, &ParamVector::zeros(spec.param_len()), &spec).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-15);
        let p = class_probabilities(&s.x, &ParamVector::zeros(spec.param_len()), &spec).unwrap();
        assert!(p.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_params_bias_gradient_is_softmax_minus_onehot() {
        let spec = ModelSpec::linear(2, 4);
        let s = LabeledSample::new(vec![1.0, -2.0], 2);
        let g = loss_gradient(&s, &ParamVector::zeros(spec.param_len()), &spec).unwrap();
        let bias = &g.as_slice()[8..12];
        for (c, b) in bias.iter().enumerate() {
            let expected = if c == 2 { -0.75 } else { 0.25 };
            assert!((b - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn loss_matches_scalar_recomputation() {
        let mut rng = substream(3, "model-test", &[]);
        let (d, c) = (5, 3);
        let spec = ModelSpec::linear(d, c);
        for _ in 0..50 {
            let params = spec.init_params(&mut rng);
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let y = rng.gen_range(0..c);
            let got = loss(&LabeledSample::new(x.clone(), y), &params, &spec).unwrap();
            let want = scalar_linear_loss(&x, y, params.as_slice(), d, c);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn probabilities_agree_with_loss() {
        let mut rng = substream(4, "model-test", &[]);
        let spec = ModelSpec::mlp(4, vec![6, 5], 3);
        for _ in 0..20 {
            let params = spec.init_params(&mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let p = class_probabilities(&x, &params, &spec).unwrap();
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let via_loss: Vec<f64> = (0..3)
                .map(|y| (-loss(&LabeledSample::new(x.clone(), y), &params, &spec).unwrap()).exp())
                .collect();
            let total: f64 = via_loss.iter().sum();
            for (a, b) in p.iter().zip(&via_loss) {
                assert!((a - b / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overfitting_one_sample_drives_probability_to_one() {
        let spec = ModelSpec::mlp(3, vec![4], 3);
        let mut rng = substream(5, "model-test", &[]);
        let mut params = spec.init_params(&mut rng);
        let s = LabeledSample::new(vec![0.5, -0.2, 1.0], 1);
        for _ in 0..2000 {
            let g = loss_gradient(&s, &params, &spec).unwrap();
            params.axpy(-0.5, g.as_slice());
        }
        let p = class_probabilities(&s.x, &params, &spec).unwrap();
        assert!(p[1] > 0.99, "{p:?}");
    }

    #[test]
    fn layout_lengths() {
        let spec = ModelSpec::mlp(4, vec![8], 3);
        assert_eq!(spec.trunk_len(), 5 * 8);
        assert_eq!(spec.head_len(), 9 * 3);
        assert_eq!(ModelSpec::linear(4, 3).trunk_len(), 0);
    }

    #[test]
    fn dimension_and_finiteness_errors() {
        let spec = ModelSpec::linear(3, 2);
        let params = ParamVector::zeros(spec.param_len());
        let bad_x = LabeledSample::new(vec![1.0], 0);
        assert!(matches!(loss(&bad_x, &params, &spec), Err(Error::Config(_))));
        let bad_y = LabeledSample::new(vec![1.0, 2.0, 3.0], 2);
        assert!(matches!(loss(&bad_y, &params, &spec), Err(Error::Config(_))));
        let mut nan = params.clone();
        nan.as_mut_slice()[0] = f64::NAN;
        let ok = LabeledSample::new(vec![1.0, 2.0, 3.0], 0);
        assert!(matches!(loss(&ok, &nan, &spec), Err(Error::Numeric(_))));
    }

    #[test]
    fn large_logits_are_stable() {
        let spec = ModelSpec::linear(1, 2);
        let params = ParamVector::from_vec(vec![1000.0, -1000.0, 0.0, 0.0]);
        let s = LabeledSample::new(vec![1.0], 1);
        let l = loss(&s, &params, &spec).unwrap();
        assert!((l - 2000.0).abs() < 1e-9);
        let p = class_probabilities(&s.x, &params, &spec).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }
}
