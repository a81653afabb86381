//! Robust-clustering engine: the ratio-kernel objective, the E-step on
//! sample/client weights (plain and Adam-accelerated), label statistics with
//! optional Gaussian noise, and the centralized gradient M-step.
//!
//! All sums run in a fixed order (client, then sample, then cluster) so that
//! results are bit-reproducible regardless of how many worker threads are
//! used for the per-client parts.

use log::warn;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ensemble::ClusterEnsemble;
use crate::error::{Error, Result};
use crate::model::{accumulate_gradient, loss, LabeledSample, ParamVector};
use crate::rng::substream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RcHyper {
    /// Step size of the centralized M-step.
    pub eta: f64,
    /// Lower bound applied to every aggregated label mass.
    pub eps_floor: f64,
    pub adam_enabled: bool,
    /// Adam step size on the weights. At 1.0 the weights can keep flipping
    /// between vertices and never settle; around 0.1 they converge quickly,
    /// which matters when removal waits for convergence.
    pub adam_alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for RcHyper {
    fn default() -> Self {
        RcHyper {
            eta: 0.1,
            eps_floor: 1e-12,
            adam_enabled: false,
            adam_alpha: 1.0,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
        }
    }
}

impl RcHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::config("rc.eta must be positive"));
        }
        if !(self.eps_floor > 0.0) {
            return Err(Error::config("rc.eps_floor must be positive"));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("rc.{name} must lie in [0, 1)")));
            }
        }
        if !(self.adam_alpha > 0.0) || !(self.adam_eps >= 0.0) {
            return Err(Error::config("rc.adam_alpha must be positive and adam_eps nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub nu: Vec<f64>,
    pub a: Vec<f64>,
}

/// Weights of one client: `gamma` is `num_samples x num_clusters`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAssignment {
    pub num_clusters: usize,
    pub gamma: Vec<f64>,
    pub omega: Vec<f64>,
    pub adam: Option<AdamMoments>,
}

fn uniform_row(active: &[bool]) -> Vec<f64> {
    let n = active.iter().filter(|a| **a).count() as f64;
    active.iter().map(|&a| if a { 1.0 / n } else { 0.0 }).collect()
}

impl ClientAssignment {
    pub fn uniform(num_samples: usize, active: &[bool]) -> Self {
        let row = uniform_row(active);
        let gamma = row.repeat(num_samples);
        let mut out = ClientAssignment {
            num_clusters: active.len(),
            gamma,
            omega: vec![0.0; active.len()],
            adam: None,
        };
        out.recompute_omega();
        out
    }

    /// One-hot weights on `cluster` for every sample.
    pub fn one_hot(num_samples: usize, num_clusters: usize, cluster: usize) -> Self {
        let mut row = vec![0.0; num_clusters];
        row[cluster] = 1.0;
        let mut omega = vec![0.0; num_clusters];
        omega[cluster] = 1.0;
        ClientAssignment {
            num_clusters,
            gamma: row.repeat(num_samples),
            omega,
            adam: None,
        }
    }

    pub fn num_samples(&self) -> usize {
        self.gamma.len() / self.num_clusters
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.gamma[j * self.num_clusters..(j + 1) * self.num_clusters]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.gamma.chunks_exact(self.num_clusters)
    }

    /// `omega_k = (1/N_i) sum_j gamma_jk`, summed in sample order.
    pub fn recompute_omega(&mut self) {
        let n = self.num_samples();
        let k = self.num_clusters;
        let mut omega = vec![0.0; k];
        for row in self.gamma.chunks_exact(k) {
            for (o, g) in omega.iter_mut().zip(row) {
                *o += g;
            }
        }
        if n > 0 {
            omega.iter_mut().for_each(|o| *o /= n as f64);
        }
        self.omega = omega;
    }

    /// Largest absolute change of any single weight against `other`.
    pub fn max_change(&self, other: &ClientAssignment) -> f64 {
        self.gamma
            .iter()
            .zip(&other.gamma)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentState {
    pub num_clusters: usize,
    pub clients: Vec<ClientAssignment>,
}

impl AssignmentState {
    pub fn uniform(sample_counts: &[usize], active: &[bool]) -> Self {
        AssignmentState {
            num_clusters: active.len(),
            clients: sample_counts
                .iter()
                .map(|&n| ClientAssignment::uniform(n, active))
                .collect(),
        }
    }

    pub fn total_samples(&self) -> usize {
        self.clients.iter().map(ClientAssignment::num_samples).sum()
    }

    /// `(1/N) sum_{i,j} gamma_{i,j;k}` for every cluster.
    pub fn cluster_mass_fractions(&self) -> Vec<f64> {
        let mut mass = vec![0.0; self.num_clusters];
        for c in &self.clients {
            for row in c.rows() {
                for (m, g) in mass.iter_mut().zip(row) {
                    *m += g;
                }
            }
        }
        let n = self.total_samples().max(1) as f64;
        mass.iter_mut().for_each(|m| *m /= n);
        mass
    }

    pub fn max_change(&self, other: &AssignmentState) -> f64 {
        self.clients
            .iter()
            .zip(&other.clients)
            .map(|(a, b)| a.max_change(b))
            .fold(0.0, f64::max)
    }
}

/// Aggregated per-cluster label masses, the estimate of `P(y; theta_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelStats {
    pub num_clusters: usize,
    pub num_classes: usize,
    /// `num_clusters x num_classes`, row-major.
    pub mass: Vec<f64>,
    pub total: Vec<f64>,
    pub noise_sigma: f64,
    pub eps_floor: f64,
    /// `(cluster, label)` pairs whose aggregated mass fell below the floor.
    pub degenerate: Vec<(usize, usize)>,
}

impl LabelStats {
    pub fn mass(&self, k: usize, y: usize) -> f64 {
        self.mass[k * self.num_classes + y]
    }

    pub fn total(&self, k: usize) -> f64 {
        self.total[k]
    }

    /// Server-side sum of client contributions (each `K x C`) in client order,
    /// then flooring. The total per cluster is the sum of its floored label
    /// masses, so the label proportions always form a distribution.
    pub fn from_contributions(
        contributions: &[Vec<f64>],
        num_clusters: usize,
        num_classes: usize,
        noise_sigma: f64,
        eps_floor: f64,
    ) -> Self {
        let mut mass = vec![0.0; num_clusters * num_classes];
        for c in contributions {
            for (m, v) in mass.iter_mut().zip(c) {
                *m += v;
            }
        }
        let mut degenerate = Vec::new();
        for (idx, m) in mass.iter_mut().enumerate() {
            if !(*m >= eps_floor) {
                degenerate.push((idx / num_classes, idx % num_classes));
                *m = eps_floor;
            }
        }
        let total = mass
            .chunks_exact(num_classes)
            .map(|row| row.iter().sum())
            .collect();
        LabelStats {
            num_clusters,
            num_classes,
            mass,
            total,
            noise_sigma,
            eps_floor,
            degenerate,
        }
    }
}

/// One client's `K x C` partial sums `sum_j 1{y_j = y} gamma_jk`, each
/// perturbed by independent `N(0, sigma^2)` noise when `sigma > 0`.
pub fn client_label_mass<R: Rng + ?Sized>(
    assignment: &ClientAssignment,
    samples: &[LabeledSample],
    num_classes: usize,
    noise_sigma: f64,
    rng: &mut R,
) -> Vec<f64> {
    let k = assignment.num_clusters;
    let mut out = vec![0.0; k * num_classes];
    for (s, row) in samples.iter().zip(assignment.rows()) {
        for (c, g) in row.iter().enumerate() {
            out[c * num_classes + s.y] += g;
        }
    }
    if noise_sigma > 0.0 {
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += noise_sigma * z;
        }
    }
    out
}

/// Label statistics over every client, noise drawn from `rng` in client order.
pub fn label_stats<R: Rng + ?Sized>(
    assignment: &AssignmentState,
    clients: &[&[LabeledSample]],
    num_classes: usize,
    noise_sigma: f64,
    eps_floor: f64,
    rng: &mut R,
) -> LabelStats {
    let contributions: Vec<Vec<f64>> = assignment
        .clients
        .iter()
        .zip(clients)
        .map(|(a, s)| client_label_mass(a, s, num_classes, noise_sigma, rng))
        .collect();
    LabelStats::from_contributions(
        &contributions,
        assignment.num_clusters,
        num_classes,
        noise_sigma,
        eps_floor,
    )
}

/// Assignment kernel used by the E-step.
#[derive(Debug, Clone, Copy)]
pub enum Kernel<'a> {
    /// `exp(-f) * total_k / mass_{k,y}`, the ratio estimate.
    Ratio(&'a LabelStats),
    /// `exp(-f)`, plain likelihood weighting.
    Likelihood,
}

impl Kernel<'_> {
    fn log_value(
        &self,
        sample: &LabeledSample,
        k: usize,
        ensemble: &ClusterEnsemble,
    ) -> Result<f64> {
        let f = loss(sample, &ensemble.params[k], &ensemble.spec)?;
        Ok(match self {
            Kernel::Ratio(stats) => -f + stats.total(k).ln() - stats.mass(k, sample.y).ln(),
            Kernel::Likelihood => -f,
        })
    }
}

pub fn log_i_tilde(
    sample: &LabeledSample,
    k: usize,
    ensemble: &ClusterEnsemble,
    stats: &LabelStats,
) -> Result<f64> {
    Kernel::Ratio(stats).log_value(sample, k, ensemble)
}

/// Ratio estimate for `sample` under cluster `k`. The `1/N` factors of
/// numerator and denominator cancel.
pub fn i_tilde(
    sample: &LabeledSample,
    k: usize,
    ensemble: &ClusterEnsemble,
    stats: &LabelStats,
) -> Result<f64> {
    let f = loss(sample, &ensemble.params[k], &ensemble.spec)?;
    Ok((-f).exp() * stats.total(k) / stats.mass(k, sample.y))
}

/// Log kernel values of every sample of a client, `N_i x K`; inactive
/// clusters hold `-inf`.
pub fn log_kernel_matrix(
    samples: &[LabeledSample],
    ensemble: &ClusterEnsemble,
    kernel: Kernel<'_>,
) -> Result<Vec<f64>> {
    let kk = ensemble.num_clusters();
    let mut out = vec![f64::NEG_INFINITY; samples.len() * kk];
    for (j, s) in samples.iter().enumerate() {
        for k in ensemble.active_indices() {
            out[j * kk + k] = kernel.log_value(s, k, ensemble)?;
        }
    }
    Ok(out)
}

/// `gamma_k = omega_k I_k / sum_n omega_n I_n` over active clusters, evaluated
/// with the largest log term factored out. `None` when the denominator
/// vanishes.
fn responsibilities(omega: &[f64], log_kernel: &[f64], active: &[bool]) -> Option<Vec<f64>> {
    let max = (0..omega.len())
        .filter(|&k| active[k] && omega[k] > 0.0)
        .map(|k| log_kernel[k])
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    let weights: Vec<f64> = (0..omega.len())
        .map(|k| {
            if active[k] && omega[k] > 0.0 {
                omega[k] * (log_kernel[k] - max).exp()
            } else {
                0.0
            }
        })
        .collect();
    let denom: f64 = weights.iter().sum();
    if !(denom > 0.0 && denom.is_finite()) {
        return None;
    }
    Some(weights.iter().map(|w| w / denom).collect())
}

/// Plain E-step from a precomputed log-kernel matrix. Returns the new
/// assignment and the number of samples that fell back to uniform weights.
pub fn e_step_from_kernel(
    log_kernel: &[f64],
    prior: &ClientAssignment,
    active: &[bool],
) -> (ClientAssignment, usize) {
    let kk = prior.num_clusters;
    let mut gamma = Vec::with_capacity(prior.gamma.len());
    let mut fallbacks = 0;
    for lk in log_kernel.chunks_exact(kk) {
        match responsibilities(&prior.omega, lk, active) {
            Some(row) => gamma.extend(row),
            None => {
                fallbacks += 1;
                gamma.extend(uniform_row(active));
            }
        }
    }
    let mut out = ClientAssignment {
        num_clusters: kk,
        gamma,
        omega: Vec::new(),
        adam: prior.adam.clone(),
    };
    out.recompute_omega();
    (out, fallbacks)
}

/// E-step for one client under an arbitrary kernel.
pub fn e_step_client(
    samples: &[LabeledSample],
    ensemble: &ClusterEnsemble,
    kernel: Kernel<'_>,
    prior: &ClientAssignment,
) -> Result<ClientAssignment> {
    check_prior(samples, ensemble, prior)?;
    let lk = log_kernel_matrix(samples, ensemble, kernel)?;
    let (out, fallbacks) = e_step_from_kernel(&lk, prior, &ensemble.active);
    if fallbacks > 0 {
        warn!("e-step: {fallbacks} sample(s) had a vanishing denominator, using uniform weights");
    }
    Ok(out)
}

fn check_prior(
    samples: &[LabeledSample],
    ensemble: &ClusterEnsemble,
    prior: &ClientAssignment,
) -> Result<()> {
    if prior.num_clusters != ensemble.num_clusters() || prior.num_samples() != samples.len() {
        return Err(Error::config("assignment shape does not match client data"));
    }
    if ensemble.num_active() == 0 {
        return Err(Error::config("e-step needs at least one active cluster"));
    }
    Ok(())
}

/// Adam-accelerated E-step from a precomputed kernel matrix.
///
/// The plain E-step target is computed first; the difference between the
/// previous weights and the target is treated as a gradient, pushed through
/// Adam moments with constant `1 - beta` corrections, then clamped at zero
/// and renormalized per sample.
pub fn e_step_adam_from_kernel(
    log_kernel: &[f64],
    prior: &ClientAssignment,
    active: &[bool],
    hyper: &RcHyper,
) -> (ClientAssignment, usize) {
    let kk = prior.num_clusters;
    let (target, mut fallbacks) = e_step_from_kernel(log_kernel, prior, active);
    let mut moments = prior.adam.clone().unwrap_or_else(|| AdamMoments {
        nu: vec![0.0; prior.gamma.len()],
        a: vec![0.0; prior.gamma.len()],
    });
    let (b1, b2) = (hyper.adam_beta1, hyper.adam_beta2);
    let mut gamma = prior.gamma.clone();
    for j in 0..prior.num_samples() {
        let range = j * kk..(j + 1) * kk;
        for idx in range.clone() {
            if !active[idx - j * kk] {
                gamma[idx] = 0.0;
                continue;
            }
            let g = prior.gamma[idx] - target.gamma[idx];
            let nu = (1.0 - b1) * g + b1 * moments.nu[idx];
            let a = (1.0 - b2) * g * g + b2 * moments.a[idx];
            moments.nu[idx] = nu;
            moments.a[idx] = a;
            let step = hyper.adam_alpha * (nu / (1.0 - b1)) / ((a / (1.0 - b2)).sqrt() + hyper.adam_eps);
            gamma[idx] = (prior.gamma[idx] - step).max(0.0);
        }
        let row = &mut gamma[range];
        let sum: f64 = row.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            row.iter_mut().for_each(|g| *g /= sum);
        } else {
            fallbacks += 1;
            row.copy_from_slice(&uniform_row(active));
        }
    }
    let mut out = ClientAssignment {
        num_clusters: kk,
        gamma,
        omega: Vec::new(),
        adam: Some(moments),
    };
    out.recompute_omega();
    (out, fallbacks)
}

pub fn e_step_adam_client(
    samples: &[LabeledSample],
    ensemble: &ClusterEnsemble,
    kernel: Kernel<'_>,
    prior: &ClientAssignment,
    hyper: &RcHyper,
) -> Result<ClientAssignment> {
    check_prior(samples, ensemble, prior)?;
    let lk = log_kernel_matrix(samples, ensemble, kernel)?;
    let (out, fallbacks) = e_step_adam_from_kernel(&lk, prior, &ensemble.active, hyper);
    if fallbacks > 0 {
        warn!("adam e-step: {fallbacks} sample(s) collapsed, using uniform weights");
    }
    Ok(out)
}

fn check_clients(clients: &[&[LabeledSample]], prior: &AssignmentState) -> Result<()> {
    if clients.len() != prior.clients.len() {
        return Err(Error::config("assignment has a different number of clients than the data"));
    }
    Ok(())
}

/// Ratio-kernel E-step over every client.
pub fn e_step(
    clients: &[&[LabeledSample]],
    ensemble: &ClusterEnsemble,
    stats: &LabelStats,
    prior: &AssignmentState,
) -> Result<AssignmentState> {
    check_clients(clients, prior)?;
    let updated = clients
        .par_iter()
        .zip(&prior.clients)
        .map(|(s, p)| e_step_client(s, ensemble, Kernel::Ratio(stats), p))
        .collect::<Result<Vec<_>>>()?;
    Ok(AssignmentState {
        num_clusters: prior.num_clusters,
        clients: updated,
    })
}

pub fn e_step_adam(
    clients: &[&[LabeledSample]],
    ensemble: &ClusterEnsemble,
    stats: &LabelStats,
    prior: &AssignmentState,
    hyper: &RcHyper,
) -> Result<AssignmentState> {
    check_clients(clients, prior)?;
    let updated = clients
        .par_iter()
        .zip(&prior.clients)
        .map(|(s, p)| e_step_adam_client(s, ensemble, Kernel::Ratio(stats), p, hyper))
        .collect::<Result<Vec<_>>>()?;
    Ok(AssignmentState {
        num_clusters: prior.num_clusters,
        clients: updated,
    })
}

/// `(1/N) sum_{i,j} ln(sum_k omega_ik I~(x_ij, y_ij, theta_k))`.
///
/// The Lagrange term vanishes because every omega row is normalized.
pub fn objective(
    assignment: &AssignmentState,
    ensemble: &ClusterEnsemble,
    stats: &LabelStats,
    clients: &[&[LabeledSample]],
) -> Result<f64> {
    check_clients(clients, assignment)?;
    let per_client = clients
        .par_iter()
        .zip(&assignment.clients)
        .enumerate()
        .map(|(i, (samples, a))| {
            let lk = log_kernel_matrix(samples, ensemble, Kernel::Ratio(stats))?;
            let kk = a.num_clusters;
            let mut sum = 0.0;
            for (j, row) in lk.chunks_exact(kk).enumerate() {
                let terms: Vec<f64> = (0..kk)
                    .filter(|&k| ensemble.active[k] && a.omega[k] > 0.0)
                    .map(|k| a.omega[k].ln() + row[k])
                    .collect();
                let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let v = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
                if !v.is_finite() {
                    return Err(Error::numeric(format!(
                        "objective term is not finite at client {i}, sample {j}"
                    )));
                }
                sum += v;
            }
            Ok(sum)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = assignment.total_samples();
    if n == 0 {
        return Err(Error::config("objective over an empty dataset"));
    }
    Ok(per_client.iter().sum::<f64>() / n as f64)
}

/// `sum_j gamma_jk grad f(x_j, y_j, theta_k)` per cluster for one client;
/// zero weights are skipped.
pub(crate) fn weighted_gradients(
    samples: &[LabeledSample],
    assignment: &ClientAssignment,
    ensemble: &ClusterEnsemble,
    sample_ids: Option<&[usize]>,
) -> Result<Vec<Vec<f64>>> {
    let p = ensemble.spec.param_len();
    let mut grads = vec![vec![0.0; p]; ensemble.num_clusters()];
    let all: Vec<usize>;
    let ids = match sample_ids {
        Some(ids) => ids,
        None => {
            all = (0..samples.len()).collect();
            &all
        }
    };
    for &j in ids {
        let row = assignment.row(j);
        for k in ensemble.active_indices() {
            if row[k] == 0.0 {
                continue;
            }
            accumulate_gradient(&samples[j], &ensemble.params[k], &ensemble.spec, row[k], &mut grads[k])?;
        }
    }
    Ok(grads)
}

/// `theta_k <- theta_k - scale * grad_k` for active clusters. With a shared
/// trunk the trunk receives the sum of all clusters' trunk gradients and the
/// same result is written into every cluster.
pub(crate) fn apply_gradients(ensemble: &mut ClusterEnsemble, grads: &[Vec<f64>], scale: f64) {
    let active = ensemble.active_indices();
    let t = if ensemble.spec.shared_trunk {
        ensemble.spec.trunk_len()
    } else {
        0
    };
    if t > 0 {
        let mut trunk_grad = vec![0.0; t];
        for &k in &active {
            for (a, g) in trunk_grad.iter_mut().zip(&grads[k][..t]) {
                *a += g;
            }
        }
        let mut trunk = ensemble.params[0].as_slice()[..t].to_vec();
        for (v, g) in trunk.iter_mut().zip(&trunk_grad) {
            *v -= scale * g;
        }
        for p in ensemble.params.iter_mut() {
            p.as_mut_slice()[..t].copy_from_slice(&trunk);
        }
    }
    for &k in &active {
        let p = ensemble.params[k].as_mut_slice();
        for (v, g) in p[t..].iter_mut().zip(&grads[k][t..]) {
            *v -= scale * g;
        }
    }
}

/// Full-batch gradient step on the ratio objective:
/// `theta_k <- theta_k - eta (1/N) sum_{i,j} gamma_ijk grad f`.
pub fn m_step_centralized(
    assignment: &AssignmentState,
    ensemble: &ClusterEnsemble,
    clients: &[&[LabeledSample]],
    eta: f64,
) -> Result<ClusterEnsemble> {
    check_clients(clients, assignment)?;
    let partials = clients
        .par_iter()
        .zip(&assignment.clients)
        .map(|(s, a)| weighted_gradients(s, a, ensemble, None))
        .collect::<Result<Vec<_>>>()?;
    let p = ensemble.spec.param_len();
    let mut grads = vec![vec![0.0; p]; ensemble.num_clusters()];
    for part in &partials {
        for (g, pg) in grads.iter_mut().zip(part) {
            for (a, b) in g.iter_mut().zip(pg) {
                *a += b;
            }
        }
    }
    if let Some(k) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::numeric(format!("non-finite gradient for cluster {k}")));
    }
    let n = assignment.total_samples() as f64;
    let mut out = ensemble.clone();
    apply_gradients(&mut out, &grads, eta / n);
    if !out.is_finite() {
        return Err(Error::numeric("m-step produced non-finite parameters"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSizeEstimate {
    /// Secant estimate of the per-sample smoothness constant.
    pub smoothness: f64,
    /// Largest mean squared per-sample gradient norm over clusters.
    pub grad_bound_sq: f64,
    /// `8 / (40 L + 9 sigma^2)`.
    pub eta: f64,
}

/// Empirical constants for the convergence step size `8 / (40 L + 9 sigma^2)`.
///
/// `sigma^2` is the largest mean squared gradient norm over clusters; `L` is
/// the largest secant ratio `|grad f(theta + u) - grad f(theta)| / |u|` over
/// the samples and `probes` random directions of radius `radius`.
pub fn estimate_step_size(
    ensemble: &ClusterEnsemble,
    clients: &[&[LabeledSample]],
    probes: usize,
    radius: f64,
    seed: u64,
) -> Result<StepSizeEstimate> {
    let spec = &ensemble.spec;
    let p = spec.param_len();
    let n: usize = clients.iter().map(|c| c.len()).sum();
    if n == 0 {
        return Err(Error::config("step size estimate over an empty dataset"));
    }
    let mut rng = substream(seed, "step-size", &[]);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut sigma_sq: f64 = 0.0;
    let mut smooth: f64 = 0.0;
    for k in ensemble.active_indices() {
        let theta = &ensemble.params[k];
        let directions: Vec<ParamVector> = (0..probes)
            .map(|_| {
                let mut u: Vec<f64> = (0..p).map(|_| normal.sample(&mut rng)).collect();
                let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
                u.iter_mut().for_each(|v| *v *= radius / norm);
                ParamVector::from_vec(u)
            })
            .collect();
        let shifted: Vec<ParamVector> = directions
            .iter()
            .map(|u| {
                let mut t = theta.clone();
                t.axpy(1.0, u.as_slice());
                t
            })
            .collect();
        let mut sq_sum = 0.0;
        for s in clients.iter().flat_map(|c| c.iter()) {
            let mut g0 = vec![0.0; p];
            accumulate_gradient(s, theta, spec, 1.0, &mut g0)?;
            sq_sum += g0.iter().map(|v| v * v).sum::<f64>();
            for t in &shifted {
                let mut g1 = vec![0.0; p];
                accumulate_gradient(s, t, spec, 1.0, &mut g1)?;
                let diff = g1.iter().zip(&g0).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                smooth = smooth.max(diff / radius);
            }
        }
        sigma_sq = sigma_sq.max(sq_sum / n as f64);
    }
    Ok(StepSizeEstimate {
        smoothness: smooth,
        grad_bound_sq: sigma_sq,
        eta: 8.0 / (40.0 * smooth + 9.0 * sigma_sq),
    })
}

/// Centralized alternating optimization: exact label statistics, E-step,
/// refreshed statistics, full-batch M-step.
#[derive(Debug, Clone)]
pub struct CentralizedRc {
    pub ensemble: ClusterEnsemble,
    pub assignment: AssignmentState,
    pub stats: LabelStats,
    pub hyper: RcHyper,
    num_classes: usize,
}

impl CentralizedRc {
    pub fn new(
        ensemble: ClusterEnsemble,
        clients: &[&[LabeledSample]],
        hyper: RcHyper,
    ) -> Result<Self> {
        hyper.validate()?;
        let counts: Vec<usize> = clients.iter().map(|c| c.len()).collect();
        let assignment = AssignmentState::uniform(&counts, &ensemble.active);
        let num_classes = ensemble.spec.num_classes;
        let stats = exact_stats(&assignment, clients, num_classes, hyper.eps_floor);
        Ok(CentralizedRc {
            ensemble,
            assignment,
            stats,
            hyper,
            num_classes,
        })
    }

    pub fn objective(&self, clients: &[&[LabeledSample]]) -> Result<f64> {
        objective(&self.assignment, &self.ensemble, &self.stats, clients)
    }

    /// One E/M iteration; returns the objective at the new state.
    pub fn iterate(&mut self, clients: &[&[LabeledSample]]) -> Result<f64> {
        let next = if self.hyper.adam_enabled {
            e_step_adam(clients, &self.ensemble, &self.stats, &self.assignment, &self.hyper)?
        } else {
            e_step(clients, &self.ensemble, &self.stats, &self.assignment)?
        };
        self.assignment = next;
        self.stats = exact_stats(&self.assignment, clients, self.num_classes, self.hyper.eps_floor);
        self.ensemble = m_step_centralized(&self.assignment, &self.ensemble, clients, self.hyper.eta)?;
        self.objective(clients)
    }
}

fn exact_stats(
    assignment: &AssignmentState,
    clients: &[&[LabeledSample]],
    num_classes: usize,
    eps_floor: f64,
) -> LabelStats {
    // sigma = 0 draws nothing, the stream is a placeholder
    let mut rng = substream(0, "exact-stats", &[]);
    label_stats(assignment, clients, num_classes, 0.0, eps_floor, &mut rng)
}
