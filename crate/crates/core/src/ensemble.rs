//! The K cluster models plus their active/removed status.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{accumulate_gradient, LabeledSample, ModelSpec, ParamVector};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterEnsemble {
    pub spec: ModelSpec,
    pub params: Vec<ParamVector>,
    pub active: Vec<bool>,
}

impl ClusterEnsemble {
    /// Seeded initialization; with a shared trunk every cluster starts from
    /// cluster 0's trunk.
    pub fn init(spec: ModelSpec, num_clusters: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        if num_clusters == 0 {
            return Err(Error::config("number of clusters must be positive"));
        }
        let mut params: Vec<ParamVector> = (0..num_clusters)
            .map(|k| spec.init_params(&mut substream(seed, "init", &[k as u64])))
            .collect();
        if spec.shared_trunk {
            let trunk = spec.trunk_len();
            let shared = params[0].as_slice()[..trunk].to_vec();
            for p in params.iter_mut().skip(1) {
                p.as_mut_slice()[..trunk].copy_from_slice(&shared);
            }
        }
        Ok(ClusterEnsemble {
            spec,
            params,
            active: vec![true; num_clusters],
        })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<ParamVector>) -> Result<Self> {
        spec.validate()?;
        if params.is_empty() {
            return Err(Error::config("ensemble needs at least one cluster"));
        }
        if params.iter().any(|p| p.len() != spec.param_len()) {
            return Err(Error::config("parameter length does not match model layout"));
        }
        let k = params.len();
        Ok(ClusterEnsemble {
            spec,
            params,
            active: vec![true; k],
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.params.len()
    }

    pub fn num_active(&self) -> usize {
        self.active.iter().filter(|a| **a).count()
    }

    pub fn active_indices(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&k| self.active[k]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(ParamVector::is_finite)
    }

    /// True when every cluster carries a bit-identical trunk slice.
    pub fn trunk_in_sync(&self) -> bool {
        let t = self.spec.trunk_len();
        let first = &self.params[0].as_slice()[..t];
        self.params
            .iter()
            .all(|p| p.as_slice()[..t].iter().zip(first).all(|(a, b)| a.to_bits() == b.to_bits()))
    }
}

/// Gradient of `sum_k weights[k] * f(sample; theta_k)` when the trunk is one
/// shared block.
///
/// Returns `(trunk_grad, head_grads)`: the trunk gradient is the sum of every
/// cluster's chain-rule contribution, heads get their own weighted gradient.
/// Inactive clusters and zero weights contribute nothing.
pub fn shared_trunk_gradient(
    sample: &LabeledSample,
    ensemble: &ClusterEnsemble,
    weights: &[f64],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let spec = &ensemble.spec;
    let t = spec.trunk_len();
    let mut trunk = vec![0.0; t];
    let mut heads = vec![vec![0.0; spec.head_len()]; ensemble.num_clusters()];
    let mut buf = vec![0.0; spec.param_len()];
    for k in ensemble.active_indices() {
        if weights[k] == 0.0 {
            continue;
        }
        buf.iter_mut().for_each(|v| *v = 0.0);
        accumulate_gradient(sample, &ensemble.params[k], spec, weights[k], &mut buf)?;
        for (a, b) in trunk.iter_mut().zip(&buf[..t]) {
            *a += b;
        }
        heads[k].copy_from_slice(&buf[t..]);
    }
    Ok((trunk, heads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::loss;
    use rand::Rng;

    fn mixture_loss(sample: &LabeledSample, ens: &ClusterEnsemble, w: &[f64]) -> f64 {
        ens.active_indices()
            .into_iter()
            .map(|k| w[k] * loss(sample, &ens.params[k], &ens.spec).unwrap())
            .sum()
    }

    #[test]
    fn shared_trunk_init_is_synced() {
        let spec = ModelSpec::mlp(4, vec![5], 3).with_shared_trunk(true);
        let ens = ClusterEnsemble::init(spec, 3, 11).unwrap();
        assert!(ens.trunk_in_sync());
        assert_ne!(ens.params[0], ens.params[1]);
    }

    #[test]
    fn shared_trunk_gradient_matches_finite_differences() {
        let spec = ModelSpec::mlp(3, vec![4], 3).with_shared_trunk(true);
        let mut ens = ClusterEnsemble::init(spec, 3, 2).unwrap();
        let mut rng = substream(9, "ens-test", &[]);
        let sample = LabeledSample::new((0..3).map(|_| rng.gen_range(-1.5..1.5)).collect(), 2);
        let w = [0.5, 0.2, 0.3];
        let (trunk, heads) = shared_trunk_gradient(&sample, &ens, &w).unwrap();
        let t = ens.spec.trunk_len();
        let h = 1e-5;
        for i in 0..t {
            let orig = ens.params[0][i];
            for p in ens.params.iter_mut() {
                p.as_mut_slice()[i] = orig + h;
            }
            let up = mixture_loss(&sample, &ens, &w);
            for p in ens.params.iter_mut() {
                p.as_mut_slice()[i] = orig - h;
            }
            let down = mixture_loss(&sample, &ens, &w);
            for p in ens.params.iter_mut() {
                p.as_mut_slice()[i] = orig;
            }
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - trunk[i]).abs() / fd.abs().max(trunk[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "trunk {i}: fd {fd} analytic {}", trunk[i]);
        }
        for k in 0..3 {
            for j in 0..ens.spec.head_len() {
                let i = t + j;
                let orig = ens.params[k][i];
                ens.params[k].as_mut_slice()[i] = orig + h;
                let up = mixture_loss(&sample, &ens, &w);
                ens.params[k].as_mut_slice()[i] = orig - h;
                let down = mixture_loss(&sample, &ens, &w);
                ens.params[k].as_mut_slice()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = heads[k][j];
                let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
                assert!(rel < 1e-4, "head {k}/{j}: fd {fd} analytic {a}");
            }
        }
    }
}
