//! Contrast algorithms run under the same federation harness.
//!
//! * FedAvg: one model, plain local SGD.
//! * FedEM: soft clustering with the likelihood kernel `exp(-f)`.
//! * IFCA: each client picks the cluster with the lowest mean local loss,
//!   then trains only that cluster.
//! * FeSEM: hard EM. Clients train the cluster they were assigned to, the
//!   server aggregates, then clients reassign themselves to the lowest-loss
//!   cluster of the new models.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::ClusterEnsemble;
use crate::error::{Error, Result};
use crate::fed::{local_train, ClientUpdate, Federation};
use crate::model::{class_probabilities, loss, LabeledSample};
use crate::rc::{e_step_client, AssignmentState, ClientAssignment, Kernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    FedAvg,
    FedEm,
    Ifca,
    FeSem,
    FedRc,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 5] = [
        BaselineKind::FedAvg,
        BaselineKind::FedEm,
        BaselineKind::Ifca,
        BaselineKind::FeSem,
        BaselineKind::FedRc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::FedAvg => "fedavg",
            BaselineKind::FedEm => "fedem",
            BaselineKind::Ifca => "ifca",
            BaselineKind::FeSem => "fesem",
            BaselineKind::FedRc => "fedrc",
        }
    }

    /// Methods that keep soft per-sample weights (and may remove clusters).
    pub fn is_soft(self) -> bool {
        matches!(self, BaselineKind::FedRc | BaselineKind::FedEm)
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown algorithm `{s}`")))
    }
}

/// Likelihood-kernel E-step: `gamma ∝ omega * exp(-f)`.
pub fn fedem_e_step(
    clients: &[&[LabeledSample]],
    ensemble: &ClusterEnsemble,
    prior: &AssignmentState,
) -> Result<AssignmentState> {
    if clients.len() != prior.clients.len() {
        return Err(Error::config("assignment has a different number of clients than the data"));
    }
    let updated = clients
        .par_iter()
        .zip(&prior.clients)
        .map(|(s, p)| e_step_client(s, ensemble, Kernel::Likelihood, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(AssignmentState {
        num_clusters: prior.num_clusters,
        clients: updated,
    })
}

/// Mean local loss of every active cluster (`inf` for inactive ones).
pub fn cluster_losses(samples: &[LabeledSample], ensemble: &ClusterEnsemble) -> Result<Vec<f64>> {
    (0..ensemble.num_clusters())
        .map(|k| {
            if !ensemble.active[k] {
                return Ok(f64::INFINITY);
            }
            let mut sum = 0.0;
            for s in samples {
                sum += loss(s, &ensemble.params[k], &ensemble.spec)?;
            }
            Ok(sum / samples.len() as f64)
        })
        .collect()
}

/// Active cluster with the lowest mean local loss; ties go to the lowest index.
pub fn best_cluster(samples: &[LabeledSample], ensemble: &ClusterEnsemble) -> Result<usize> {
    let losses = cluster_losses(samples, ensemble)?;
    let mut best = None;
    for k in ensemble.active_indices() {
        match best {
            Some(b) if losses[k] >= losses[b] => {}
            _ => best = Some(k),
        }
    }
    best.ok_or_else(|| Error::config("no active cluster"))
}

fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Predicts with the single cluster of largest weight (ties: lowest index).
pub fn predict_hard(x: &[f64], ensemble: &ClusterEnsemble, omega: &[f64]) -> Result<usize> {
    let masked: Vec<f64> = omega
        .iter()
        .zip(&ensemble.active)
        .map(|(w, &a)| if a { *w } else { f64::NEG_INFINITY })
        .collect();
    let k = argmax(&masked);
    Ok(argmax(&class_probabilities(x, &ensemble.params[k], &ensemble.spec)?))
}

/// Predicts with the omega-weighted mixture of all active clusters.
pub fn predict_soft(x: &[f64], ensemble: &ClusterEnsemble, omega: &[f64]) -> Result<usize> {
    let mut mix = vec![0.0; ensemble.spec.num_classes];
    for k in ensemble.active_indices() {
        if omega[k] == 0.0 {
            continue;
        }
        let p = class_probabilities(x, &ensemble.params[k], &ensemble.spec)?;
        for (m, v) in mix.iter_mut().zip(&p) {
            *m += omega[k] * v;
        }
    }
    Ok(argmax(&mix))
}

/// One hard-assignment client update: train only `cluster`.
fn hard_update(fed: &Federation<'_>, t: usize, client: usize, cluster: usize) -> Result<ClientUpdate> {
    let samples = &fed.scenario.participating[client].train;
    let ens = &fed.ensemble;
    let schedule = fed.batch_schedule(t, client);
    let ones = vec![1.0; samples.len()];
    let local = local_train(samples, &ones, &ens.params[cluster], &ens.spec, &schedule, fed.config.eta_local)
        .map_err(|e| Error::numeric(format!("client {client}: {e}")))?;
    let mut local_params = vec![None; ens.num_clusters()];
    local_params[cluster] = Some(local);
    let assignment = ClientAssignment::one_hot(samples.len(), ens.num_clusters(), cluster);
    Ok(ClientUpdate {
        client,
        local_params,
        sample_count: samples.len(),
        label_mass_contrib: fed.label_contribution(t, client, &assignment),
        assignment,
    })
}

/// FedAvg: one model, unweighted local SGD, sample-count weighted average.
pub(crate) fn fedavg_round(fed: &mut Federation<'_>, t: usize, selected: &[usize]) -> Result<()> {
    let updates = selected
        .par_iter()
        .map(|&i| hard_update(fed, t, i, 0))
        .collect::<Result<Vec<_>>>()?;
    fed.apply_updates(updates);
    Ok(())
}

/// IFCA: choose by current loss, then train the chosen cluster. Clusters no
/// client chose keep their parameters.
pub(crate) fn ifca_round(fed: &mut Federation<'_>, t: usize, selected: &[usize]) -> Result<()> {
    let updates = selected
        .par_iter()
        .map(|&i| {
            let k = best_cluster(&fed.scenario.participating[i].train, &fed.ensemble)?;
            hard_update(fed, t, i, k)
        })
        .collect::<Result<Vec<_>>>()?;
    fed.apply_updates(updates);
    Ok(())
}

/// FeSEM: M-step on the stored assignment, then re-assignment against the
/// aggregated models. Clients without an assignment yet choose first.
pub(crate) fn fesem_round(fed: &mut Federation<'_>, t: usize, selected: &[usize]) -> Result<()> {
    let current: Vec<usize> = selected
        .par_iter()
        .map(|&i| match fed.hard_assignment[i] {
            Some(k) if fed.ensemble.active[k] => Ok(k),
            _ => best_cluster(&fed.scenario.participating[i].train, &fed.ensemble),
        })
        .collect::<Result<Vec<_>>>()?;
    let updates = selected
        .par_iter()
        .zip(&current)
        .map(|(&i, &k)| hard_update(fed, t, i, k))
        .collect::<Result<Vec<_>>>()?;
    fed.apply_updates(updates);
    let reassigned: Vec<usize> = selected
        .par_iter()
        .map(|&i| best_cluster(&fed.scenario.participating[i].train, &fed.ensemble))
        .collect::<Result<Vec<_>>>()?;
    let kk = fed.ensemble.num_clusters();
    let mut change: f64 = 0.0;
    for (&i, &k) in selected.iter().zip(&reassigned) {
        fed.hard_assignment[i] = Some(k);
        let n = fed.scenario.participating[i].train.len();
        let next = ClientAssignment::one_hot(n, kk, k);
        change = change.max(next.max_change(&fed.assignment.clients[i]));
        fed.contributions[i] = fed.label_contribution(t, i, &next);
        fed.assignment.clients[i] = next;
    }
    fed.rebuild_stats();
    fed.last_change = fed.last_change.max(change);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelSpec, ParamVector};
    use crate::rc::e_step_from_kernel;

    #[test]
    fn names_round_trip() {
        for k in BaselineKind::ALL {
            assert_eq!(k.name().parse::<BaselineKind>().unwrap(), k);
        }
        assert!("cfl".parse::<BaselineKind>().is_err());
    }

    #[test]
    fn likelihood_kernel_hand_values() {
        let prior = ClientAssignment {
            num_clusters: 2,
            gamma: vec![0.5, 0.5],
            omega: vec![0.5, 0.5],
            adam: None,
        };
        // f = (0, ln 3) -> log kernel (0, -ln 3)
        let (out, _) = e_step_from_kernel(&[0.0, -(3f64.ln())], &prior, &[true, true]);
        assert!((out.gamma[0] - 0.75).abs() < 1e-15);
        let (out, _) = e_step_from_kernel(&[-0.7, -0.7], &prior, &[true, true]);
        assert_eq!(out.gamma, vec![0.5, 0.5]);
    }

    #[test]
    fn ties_prefer_lowest_index() {
        let spec = ModelSpec::linear(2, 3);
        let p = ParamVector::zeros(spec.param_len());
        let ens = ClusterEnsemble::from_params(spec, vec![p.clone(), p]).unwrap();
        let s = vec![LabeledSample::new(vec![1.0, 2.0], 0)];
        assert_eq!(best_cluster(&s, &ens).unwrap(), 0);
        assert_eq!(predict_hard(&s[0].x, &ens, &[0.5, 0.5]).unwrap(), 0);
    }

    #[test]
    fn hard_prediction_uses_dominant_cluster() {
        let spec = ModelSpec::linear(1, 2);
        // cluster 0 prefers class 0, cluster 1 prefers class 1
        let a = ParamVector::from_vec(vec![0.0, 0.0, 2.0, 0.0]);
        let b = ParamVector::from_vec(vec![0.0, 0.0, 0.0, 2.0]);
        let ens = ClusterEnsemble::from_params(spec, vec![a, b]).unwrap();
        assert_eq!(predict_hard(&[0.3], &ens, &[0.9, 0.1]).unwrap(), 0);
        assert_eq!(predict_hard(&[0.3], &ens, &[0.1, 0.9]).unwrap(), 1);
        assert_eq!(predict_soft(&[0.3], &ens, &[0.9, 0.1]).unwrap(), 0);
    }
}
