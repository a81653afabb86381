//! Round-based federated protocol.
//!
//! Each round: optional cluster removal, seeded client sampling, per-client
//! E-step and multi-step local training, weighted aggregation and a refresh
//! of the label statistics. Per-client work runs on the ambient rayon pool;
//! every reduction folds client results in ascending client order, so the
//! outcome does not depend on the number of worker threads.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{self, BaselineKind};
use crate::ensemble::ClusterEnsemble;
use crate::error::{Error, Result};
use crate::metrics::{self, RoundReport};
use crate::model::{accumulate_gradient, LabeledSample, ModelSpec, ParamVector};
use crate::rc::{
    apply_gradients, client_label_mass, e_step_adam_client, e_step_client, e_step_from_kernel,
    log_kernel_matrix, weighted_gradients, AssignmentState, ClientAssignment, Kernel, LabelStats,
    RcHyper,
};
use crate::rng::{substream, StreamRng};
use crate::scenario::FederatedScenario;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub num_clusters: usize,
    pub rounds: usize,
    /// Local steps per round; when unset, `local_epochs` passes over the data.
    pub local_steps: Option<usize>,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub eta_local: f64,
    pub eta_global: f64,
    pub participation_fraction: f64,
    /// Removal threshold on a cluster's share of the total weight mass.
    pub delta: f64,
    pub removal_enabled: bool,
    /// Removal is only checked after this many rounds...
    pub removal_warmup: usize,
    /// ...and once the largest per-weight change of the last round is below this.
    pub removal_tolerance: f64,
    /// Standard deviation of the noise clients add to their label sums.
    pub noise_sigma: f64,
    pub adam_enabled: bool,
    /// Iteration cap of the E-step that adapts unseen clients.
    pub adapt_max_iters: usize,
    pub adapt_tolerance: f64,
    pub seed: u64,
}

impl Default for FedConfig {
    fn default() -> Self {
        FedConfig {
            num_clusters: 3,
            rounds: 100,
            local_steps: None,
            local_epochs: 1,
            batch_size: 32,
            eta_local: 0.5,
            eta_global: 1.0,
            participation_fraction: 1.0,
            delta: 0.05,
            removal_enabled: false,
            removal_warmup: 20,
            removal_tolerance: 1e-3,
            noise_sigma: 0.0,
            adam_enabled: false,
            adapt_max_iters: 200,
            adapt_tolerance: 1e-6,
            seed: 0,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 {
            return Err(Error::config("fed.num_clusters must be positive"));
        }
        if !(self.eta_global > 0.0) || !(self.eta_local > 0.0) {
            return Err(Error::config("fed.eta_local and fed.eta_global must be positive"));
        }
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::config("fed.participation_fraction must lie in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::config("fed.delta must lie in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("fed.batch_size must be positive"));
        }
        if self.local_steps.is_none() && self.local_epochs == 0 {
            return Err(Error::config("fed.local_epochs must be positive when local_steps is unset"));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::config("fed.noise_sigma must be nonnegative"));
        }
        Ok(())
    }

    fn steps_for(&self, n: usize) -> usize {
        self.local_steps
            .unwrap_or_else(|| self.local_epochs * n.div_ceil(self.batch_size))
    }
}

/// Minibatch index lists for one client's local training in one round.
///
/// `batch_size >= n` yields full batches in sample order; otherwise batches
/// of exactly `batch_size` are cut from a permutation that is redrawn
/// whenever it runs out.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSchedule {
    pub batches: Vec<Vec<usize>>,
}

impl BatchSchedule {
    pub fn new(n: usize, steps: usize, batch_size: usize, rng: &mut StreamRng) -> Self {
        if batch_size >= n {
            return BatchSchedule {
                batches: vec![(0..n).collect(); steps],
            };
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        let mut pos = 0;
        let batches = (0..steps)
            .map(|_| {
                let mut batch = Vec::with_capacity(batch_size);
                while batch.len() < batch_size {
                    if pos == n {
                        perm.shuffle(rng);
                        pos = 0;
                    }
                    batch.push(perm[pos]);
                    pos += 1;
                }
                batch
            })
            .collect();
        BatchSchedule { batches }
    }
}

/// Weighted local SGD on one cluster model:
/// `theta <- theta - (eta / |B|) sum_{j in B} w_j grad f(x_j, y_j, theta)`.
/// With full batches this is exactly the per-client gradient step.
pub fn local_train(
    samples: &[LabeledSample],
    weights: &[f64],
    start: &ParamVector,
    spec: &ModelSpec,
    schedule: &BatchSchedule,
    eta_local: f64,
) -> Result<ParamVector> {
    if weights.len() != samples.len() {
        return Err(Error::config("one weight per sample required"));
    }
    let mut theta = start.clone();
    let mut grad = vec![0.0; theta.len()];
    for batch in &schedule.batches {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &j in batch {
            if weights[j] == 0.0 {
                continue;
            }
            accumulate_gradient(&samples[j], &theta, spec, weights[j], &mut grad)?;
        }
        let scale = eta_local / batch.len() as f64;
        for (v, g) in theta.as_mut_slice().iter_mut().zip(&grad) {
            *v -= scale * g;
        }
        if !theta.is_finite() {
            return Err(Error::numeric("local training produced non-finite parameters"));
        }
    }
    Ok(theta)
}

/// Local training of every active cluster at once from one assignment. With a
/// shared trunk, the trunk takes the summed gradient of all heads each step.
pub fn local_train_ensemble(
    samples: &[LabeledSample],
    assignment: &ClientAssignment,
    ensemble: &ClusterEnsemble,
    schedule: &BatchSchedule,
    eta_local: f64,
) -> Result<ClusterEnsemble> {
    let mut local = ensemble.clone();
    for batch in &schedule.batches {
        let grads = weighted_gradients(samples, assignment, &local, Some(batch))?;
        apply_gradients(&mut local, &grads, eta_local / batch.len() as f64);
        if !local.is_finite() {
            return Err(Error::numeric("local training produced non-finite parameters"));
        }
    }
    Ok(local)
}

/// What a client sends back after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client: usize,
    /// Final local parameters per cluster; `None` for clusters the client did
    /// not train (inactive, or not chosen by a hard-assignment method).
    pub local_params: Vec<Option<ParamVector>>,
    pub sample_count: usize,
    /// `K x C` label sums, noised when the round's noise level is positive.
    pub label_mass_contrib: Vec<f64>,
    pub assignment: ClientAssignment,
}

impl ClientUpdate {
    /// `theta_local - theta_start` for cluster `k`.
    pub fn delta(&self, k: usize, start: &ParamVector) -> Option<Vec<f64>> {
        self.local_params[k].as_ref().map(|p| {
            p.as_slice()
                .iter()
                .zip(start.as_slice())
                .map(|(a, b)| a - b)
                .collect()
        })
    }
}

/// `theta + eta_g * (sum_i w_i theta_i / sum_i w_i - theta)`.
///
/// Coordinates on which every local value agrees take that value as the mean,
/// and `eta_g = 1` returns the mean itself, so a single client (or identical
/// clients) reproduce the local parameters bit for bit and untouched clusters
/// stay exactly frozen.
pub fn aggregate(current: &ParamVector, locals: &[(&ParamVector, f64)], eta_global: f64) -> ParamVector {
    if locals.is_empty() {
        return current.clone();
    }
    let total: f64 = locals.iter().map(|(_, w)| w).sum();
    let shares: Vec<f64> = locals.iter().map(|(_, w)| w / total).collect();
    let first = locals[0].0.as_slice();
    let out = current
        .as_slice()
        .iter()
        .enumerate()
        .map(|(c, &cur)| {
            let v0 = first[c];
            let mean = if locals.iter().all(|(p, _)| p.as_slice()[c].to_bits() == v0.to_bits()) {
                v0
            } else {
                locals
                    .iter()
                    .zip(&shares)
                    .fold(0.0, |acc, ((p, _), s)| acc + s * p.as_slice()[c])
            };
            if eta_global == 1.0 {
                mean
            } else {
                cur + eta_global * (mean - cur)
            }
        })
        .collect();
    ParamVector::from_vec(out)
}

/// Applies a round's updates to the ensemble. Each cluster averages over the
/// clients that trained it (weights `N_i`); clusters nobody trained keep their
/// parameters. A shared trunk averages over every reporting client and is
/// written back into all clusters.
pub fn aggregate_updates(ensemble: &mut ClusterEnsemble, updates: &[ClientUpdate], eta_global: f64) {
    let t = if ensemble.spec.shared_trunk {
        ensemble.spec.trunk_len()
    } else {
        0
    };
    let old = ensemble.clone();
    for k in old.active_indices() {
        let locals: Vec<(&ParamVector, f64)> = updates
            .iter()
            .filter_map(|u| u.local_params[k].as_ref().map(|p| (p, u.sample_count as f64)))
            .collect();
        ensemble.params[k] = aggregate(&old.params[k], &locals, eta_global);
    }
    if t > 0 {
        let trunks: Vec<(ParamVector, f64)> = updates
            .iter()
            .filter_map(|u| {
                u.local_params
                    .iter()
                    .flatten()
                    .next()
                    .map(|p| (ParamVector::from_vec(p.as_slice()[..t].to_vec()), u.sample_count as f64))
            })
            .collect();
        let current = ParamVector::from_vec(old.params[0].as_slice()[..t].to_vec());
        let refs: Vec<(&ParamVector, f64)> = trunks.iter().map(|(p, w)| (p, *w)).collect();
        let trunk = aggregate(&current, &refs, eta_global);
        for p in ensemble.params.iter_mut() {
            p.as_mut_slice()[..t].copy_from_slice(trunk.as_slice());
        }
    }
}

/// Deactivates every cluster whose share of the total weight mass is below
/// `delta`, scanning in index order and never removing the last active one.
/// Rows are renormalized over the remaining clusters and omega recomputed.
/// Returns the removed cluster indices.
pub fn check_and_remove(
    ensemble: &mut ClusterEnsemble,
    assignment: &mut AssignmentState,
    delta: f64,
) -> Vec<usize> {
    let mut removed = Vec::new();
    for k in 0..ensemble.num_clusters() {
        if !ensemble.active[k] || ensemble.num_active() <= 1 {
            continue;
        }
        let share = assignment.cluster_mass_fractions()[k];
        if share >= delta {
            continue;
        }
        ensemble.active[k] = false;
        removed.push(k);
        let active = ensemble.active.clone();
        for client in assignment.clients.iter_mut() {
            remove_cluster(client, k, &active);
        }
    }
    removed
}

fn remove_cluster(client: &mut ClientAssignment, k: usize, active: &[bool]) {
    let kk = client.num_clusters;
    let n_active = active.iter().filter(|a| **a).count() as f64;
    for row in client.gamma.chunks_exact_mut(kk) {
        row[k] = 0.0;
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.iter_mut().for_each(|g| *g /= sum);
        } else {
            for (g, &a) in row.iter_mut().zip(active) {
                *g = if a { 1.0 / n_active } else { 0.0 };
            }
        }
    }
    if let Some(m) = client.adam.as_mut() {
        for j in 0..m.nu.len() / kk {
            m.nu[j * kk + k] = 0.0;
            m.a[j * kk + k] = 0.0;
        }
    }
    client.recompute_omega();
}

/// E-step iterations on an unseen client's adaptation data until omega moves
/// less than `tolerance` or `max_iters` is reached. The kernel matrix is
/// fixed during adaptation, so it is evaluated once.
pub fn evaluate_new_client(
    samples: &[LabeledSample],
    ensemble: &ClusterEnsemble,
    kernel: Kernel<'_>,
    max_iters: usize,
    tolerance: f64,
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::config("new client has an empty adaptation split"));
    }
    let lk = log_kernel_matrix(samples, ensemble, kernel)?;
    let mut state = ClientAssignment::uniform(samples.len(), &ensemble.active);
    for _ in 0..max_iters {
        let (next, _) = e_step_from_kernel(&lk, &state, &ensemble.active);
        let change = next
            .omega
            .iter()
            .zip(&state.omega)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        state = next;
        if change < tolerance {
            break;
        }
    }
    Ok(state.omega)
}

/// Full simulation state across rounds.
#[derive(Debug, Clone)]
pub struct Federation<'s> {
    pub scenario: &'s FederatedScenario,
    pub algorithm: BaselineKind,
    pub config: FedConfig,
    pub hyper: RcHyper,
    pub ensemble: ClusterEnsemble,
    pub assignment: AssignmentState,
    /// Statistics the next round's E-step uses.
    pub stats: LabelStats,
    pub(crate) contributions: Vec<Vec<f64>>,
    /// Completed rounds.
    pub round: usize,
    /// Largest per-weight change of the last round (`inf` before round 1).
    pub last_change: f64,
    /// First round whose weight change fell below `removal_tolerance`.
    pub first_converged_round: Option<usize>,
    /// `(round, cluster)` for every removal.
    pub removals: Vec<(usize, usize)>,
    /// Current hard assignment per client (FeSEM).
    pub(crate) hard_assignment: Vec<Option<usize>>,
}

impl<'s> Federation<'s> {
    pub fn new(
        scenario: &'s FederatedScenario,
        algorithm: BaselineKind,
        config: FedConfig,
        hyper: RcHyper,
        spec: ModelSpec,
    ) -> Result<Self> {
        config.validate()?;
        hyper.validate()?;
        if spec.input_dim != scenario.input_dim || spec.num_classes != scenario.num_classes {
            return Err(Error::config("model dimensions do not match the scenario"));
        }
        if scenario.participating.iter().any(|c| c.train.is_empty()) {
            return Err(Error::config("every participating client needs at least one training sample"));
        }
        let k = if algorithm == BaselineKind::FedAvg {
            1
        } else {
            config.num_clusters
        };
        if matches!(algorithm, BaselineKind::Ifca) && k < 2 {
            return Err(Error::config("ifca needs at least two clusters"));
        }
        let ensemble = ClusterEnsemble::init(spec, k, config.seed)?;
        let assignment = AssignmentState::uniform(&scenario.train_counts(), &ensemble.active);
        let mut fed = Federation {
            scenario,
            algorithm,
            config,
            hyper,
            ensemble,
            assignment,
            stats: LabelStats::from_contributions(&[], k, scenario.num_classes, 0.0, 1e-12),
            contributions: Vec::new(),
            round: 0,
            last_change: f64::INFINITY,
            first_converged_round: None,
            removals: Vec::new(),
            hard_assignment: vec![None; scenario.participating.len()],
        };
        fed.refresh_all_contributions("noise-init");
        Ok(fed)
    }

    /// Rebuilds a federation from saved models, weights and statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn restore(
        scenario: &'s FederatedScenario,
        algorithm: BaselineKind,
        config: FedConfig,
        hyper: RcHyper,
        ensemble: ClusterEnsemble,
        assignment: AssignmentState,
        stats: LabelStats,
        round: usize,
    ) -> Result<Self> {
        let mut fed = Federation::new(scenario, algorithm, config, hyper, ensemble.spec.clone())?;
        let k = ensemble.num_clusters();
        if assignment.num_clusters != k
            || stats.num_clusters != k
            || assignment.clients.len() != scenario.participating.len()
            || assignment.clients.iter().zip(&scenario.participating).any(|(a, c)| a.num_samples() != c.train.len())
        {
            return Err(Error::Schema("saved state does not match the scenario".into()));
        }
        fed.ensemble = ensemble;
        fed.assignment = assignment;
        fed.stats = stats;
        fed.round = round;
        Ok(fed)
    }

    pub fn train_slices(&self) -> Vec<&'s [LabeledSample]> {
        self.scenario.participating.iter().map(|c| c.train.as_slice()).collect()
    }

    fn noise_rng(&self, tag: &str, round: usize, client: usize) -> StreamRng {
        substream(self.config.seed, tag, &[round as u64, client as u64])
    }

    /// Every client recomputes its label sums from its current weights.
    fn refresh_all_contributions(&mut self, tag: &str) {
        let c = self.scenario.num_classes;
        let sigma = self.config.noise_sigma;
        self.contributions = self
            .scenario
            .participating
            .iter()
            .zip(&self.assignment.clients)
            .enumerate()
            .map(|(i, (data, a))| {
                let mut rng = self.noise_rng(tag, self.round, i);
                client_label_mass(a, &data.train, c, sigma, &mut rng)
            })
            .collect();
        self.rebuild_stats();
    }

    pub(crate) fn rebuild_stats(&mut self) {
        self.stats = LabelStats::from_contributions(
            &self.contributions,
            self.ensemble.num_clusters(),
            self.scenario.num_classes,
            self.config.noise_sigma,
            self.hyper.eps_floor,
        );
    }

    /// Clients taking part in round `t`, ascending.
    pub fn sample_clients(&self, t: usize) -> Result<Vec<usize>> {
        let m = self.scenario.participating.len();
        let count = ((self.config.participation_fraction * m as f64).ceil() as usize).min(m);
        if count == 0 {
            return Err(Error::config("client sampling selected nobody"));
        }
        let mut rng = substream(self.config.seed, "sampling", &[t as u64]);
        let mut chosen = sample_indices(&mut rng, m, count).into_vec();
        chosen.sort_unstable();
        Ok(chosen)
    }

    pub fn batch_schedule(&self, t: usize, client: usize) -> BatchSchedule {
        let n = self.scenario.participating[client].train.len();
        let mut rng = substream(self.config.seed, "batches", &[t as u64, client as u64]);
        BatchSchedule::new(n, self.config.steps_for(n), self.config.batch_size, &mut rng)
    }

    pub(crate) fn label_contribution(&self, t: usize, client: usize, assignment: &ClientAssignment) -> Vec<f64> {
        let mut rng = self.noise_rng("noise", t, client);
        client_label_mass(
            assignment,
            &self.scenario.participating[client].train,
            self.scenario.num_classes,
            self.config.noise_sigma,
            &mut rng,
        )
    }

    /// E-step plus local training for one client under a soft method.
    fn soft_client_update(&self, t: usize, client: usize) -> Result<ClientUpdate> {
        let samples = &self.scenario.participating[client].train;
        let prior = &self.assignment.clients[client];
        let kernel = match self.algorithm {
            BaselineKind::FedEm => Kernel::Likelihood,
            _ => Kernel::Ratio(&self.stats),
        };
        let assignment = if self.config.adam_enabled {
            e_step_adam_client(samples, &self.ensemble, kernel, prior, &self.hyper)?
        } else {
            e_step_client(samples, &self.ensemble, kernel, prior)?
        };
        let schedule = self.batch_schedule(t, client);
        let local = local_train_ensemble(samples, &assignment, &self.ensemble, &schedule, self.config.eta_local)
            .map_err(|e| Error::numeric(format!("client {client}: {e}")))?;
        let local_params = (0..self.ensemble.num_clusters())
            .map(|k| self.ensemble.active[k].then(|| local.params[k].clone()))
            .collect();
        Ok(ClientUpdate {
            client,
            local_params,
            sample_count: samples.len(),
            label_mass_contrib: self.label_contribution(t, client, &assignment),
            assignment,
        })
    }

    /// Server side of a round: store new weights and label sums, aggregate.
    pub(crate) fn apply_updates(&mut self, updates: Vec<ClientUpdate>) {
        let mut change: f64 = 0.0;
        aggregate_updates(&mut self.ensemble, &updates, self.config.eta_global);
        for u in updates {
            change = change.max(u.assignment.max_change(&self.assignment.clients[u.client]));
            self.assignment.clients[u.client] = u.assignment;
            self.contributions[u.client] = u.label_mass_contrib;
        }
        self.rebuild_stats();
        self.last_change = change;
    }

    /// Runs one round and returns the clients that took part.
    pub fn run_round(&mut self) -> Result<Vec<usize>> {
        let t = self.round + 1;
        if self.config.removal_enabled
            && self.algorithm.is_soft()
            && t > self.config.removal_warmup
            && self.last_change < self.config.removal_tolerance
        {
            let removed = check_and_remove(&mut self.ensemble, &mut self.assignment, self.config.delta);
            if !removed.is_empty() {
                self.removals.extend(removed.iter().map(|&k| (t, k)));
                self.refresh_all_contributions("noise-removal");
            }
        }
        let selected = self.sample_clients(t)?;
        match self.algorithm {
            BaselineKind::FedRc | BaselineKind::FedEm => {
                let updates = selected
                    .par_iter()
                    .map(|&i| self.soft_client_update(t, i))
                    .collect::<Result<Vec<_>>>()?;
                self.apply_updates(updates);
            }
            BaselineKind::FedAvg => baselines::fedavg_round(self, t, &selected)?,
            BaselineKind::Ifca => baselines::ifca_round(self, t, &selected)?,
            BaselineKind::FeSem => baselines::fesem_round(self, t, &selected)?,
        }
        if !self.ensemble.is_finite() {
            return Err(Error::numeric(format!("round {t} produced non-finite parameters")));
        }
        self.round = t;
        if self.first_converged_round.is_none() && self.last_change < self.config.removal_tolerance {
            self.first_converged_round = Some(t);
        }
        Ok(selected)
    }

    /// Cluster weights for an unseen client: soft methods run the E-step on
    /// its adaptation split, hard methods pick the lowest-loss cluster.
    pub fn adapt_client(&self, samples: &[LabeledSample]) -> Result<Vec<f64>> {
        match self.algorithm {
            BaselineKind::FedRc | BaselineKind::FedAvg => evaluate_new_client(
                samples,
                &self.ensemble,
                Kernel::Ratio(&self.stats),
                self.config.adapt_max_iters,
                self.config.adapt_tolerance,
            ),
            BaselineKind::FedEm => evaluate_new_client(
                samples,
                &self.ensemble,
                Kernel::Likelihood,
                self.config.adapt_max_iters,
                self.config.adapt_tolerance,
            ),
            BaselineKind::Ifca | BaselineKind::FeSem => {
                if samples.is_empty() {
                    return Err(Error::config("new client has an empty adaptation split"));
                }
                let k = baselines::best_cluster(samples, &self.ensemble)?;
                let mut omega = vec![0.0; self.ensemble.num_clusters()];
                omega[k] = 1.0;
                Ok(omega)
            }
        }
    }

    /// Metrics of the current state.
    pub fn report(&self) -> Result<RoundReport> {
        metrics::round_report(self)
    }

    /// Runs the configured number of rounds, returning the initial report
    /// followed by one report per round.
    pub fn run(&mut self) -> Result<Vec<RoundReport>> {
        let mut reports = vec![self.report()?];
        for _ in 0..self.config.rounds {
            self.run_round()?;
            reports.push(self.report()?);
        }
        Ok(reports)
    }
}
