//! Shared oracles for the integration tests: brute-force transcriptions of
//! the ratio kernel, E-step and objective, plus central finite differences.
#![allow(dead_code)]

use fedrc_core::ensemble::ClusterEnsemble;
use fedrc_core::model::{LabeledSample, ModelSpec, ParamVector};
use fedrc_core::rc::{AssignmentState, ClientAssignment};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Cross-entropy of a linear softmax model written out term by term:
/// weights `C x d` row-major, then `C` biases.
pub fn naive_linear_loss(s: &LabeledSample, params: &[f64], d: usize, c: usize) -> f64 {
    let z: Vec<f64> = (0..c)
        .map(|o| params[c * d + o] + (0..d).map(|i| params[o * d + i] * s.x[i]).sum::<f64>())
        .collect();
    z.iter().map(|v| v.exp()).sum::<f64>().ln() - z[s.y]
}

/// A tiny federation with a linear model and arbitrary (interior) weights.
pub struct TinyInstance {
    pub d: usize,
    pub c: usize,
    pub k: usize,
    pub clients: Vec<Vec<LabeledSample>>,
    pub ensemble: ClusterEnsemble,
    pub assignment: AssignmentState,
}

impl TinyInstance {
    pub fn random(seed: u64) -> Self {
        let mut r = rng(seed);
        let d = r.gen_range(1..=3);
        let c = r.gen_range(2..=4);
        let k = r.gen_range(1..=3);
        let m = r.gen_range(1..=4);
        let mut budget = 20;
        let mut clients = Vec::new();
        for i in 0..m {
            let left = m - i - 1;
            let n = r.gen_range(1..=(budget - left).min(6));
            budget -= n;
            clients.push(
                (0..n)
                    .map(|_| {
                        let x = (0..d).map(|_| r.gen_range(-2.0..2.0)).collect();
                        LabeledSample::new(x, r.gen_range(0..c))
                    })
                    .collect(),
            );
        }
        let spec = ModelSpec::linear(d, c);
        let params = (0..k)
            .map(|_| ParamVector::from_vec((0..spec.param_len()).map(|_| r.gen_range(-1.5..1.5)).collect()))
            .collect();
        let ensemble = ClusterEnsemble::from_params(spec, params).unwrap();
        let assignment = AssignmentState {
            num_clusters: k,
            clients: clients
                .iter()
                .map(|s: &Vec<LabeledSample>| {
                    let mut gamma = Vec::new();
                    for _ in 0..s.len() {
                        let row: Vec<f64> = (0..k).map(|_| r.gen_range(0.05..1.0)).collect();
                        let sum: f64 = row.iter().sum();
                        gamma.extend(row.iter().map(|v| v / sum));
                    }
                    let mut a = ClientAssignment {
                        num_clusters: k,
                        gamma,
                        omega: Vec::new(),
                        adam: None,
                    };
                    a.recompute_omega();
                    a
                })
                .collect(),
        };
        TinyInstance {
            d,
            c,
            k,
            clients,
            ensemble,
            assignment,
        }
    }

    pub fn slices(&self) -> Vec<&[LabeledSample]> {
        self.clients.iter().map(|c| c.as_slice()).collect()
    }

    fn loss(&self, s: &LabeledSample, k: usize) -> f64 {
        naive_linear_loss(s, self.ensemble.params[k].as_slice(), self.d, self.c)
    }

    /// `P~(y; theta_k)` from the current weights: label mass over total mass,
    /// masses floored at `eps`.
    pub fn label_prior(&self, k: usize, y: usize, eps: f64) -> f64 {
        let mass = |label: usize| {
            let mut m = 0.0;
            for (samples, a) in self.clients.iter().zip(&self.assignment.clients) {
                for (j, s) in samples.iter().enumerate() {
                    if s.y == label {
                        m += a.gamma[j * self.k + k];
                    }
                }
            }
            f64::max(m, eps)
        };
        let total: f64 = (0..self.c).map(mass).sum();
        mass(y) / total
    }

    pub fn i_tilde(&self, s: &LabeledSample, k: usize, eps: f64) -> f64 {
        (-self.loss(s, k)).exp() / self.label_prior(k, s.y, eps)
    }

    /// New `(gamma, omega)` of client `i`.
    pub fn e_step(&self, i: usize, eps: f64) -> (Vec<f64>, Vec<f64>) {
        let omega = &self.assignment.clients[i].omega;
        let samples = &self.clients[i];
        let mut gamma = Vec::new();
        for s in samples {
            let w: Vec<f64> = (0..self.k).map(|k| omega[k] * self.i_tilde(s, k, eps)).collect();
            let den: f64 = w.iter().sum();
            gamma.extend(w.iter().map(|v| v / den));
        }
        let new_omega = (0..self.k)
            .map(|k| (0..samples.len()).map(|j| gamma[j * self.k + k]).sum::<f64>() / samples.len() as f64)
            .collect();
        (gamma, new_omega)
    }

    pub fn objective(&self, eps: f64) -> f64 {
        let n: usize = self.clients.iter().map(|c| c.len()).sum();
        let mut sum = 0.0;
        for (samples, a) in self.clients.iter().zip(&self.assignment.clients) {
            for s in samples {
                sum += (0..self.k).map(|k| a.omega[k] * self.i_tilde(s, k, eps)).sum::<f64>().ln();
            }
        }
        sum / n as f64
    }
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// Central differences of `f` at `x` with step `h`.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
