mod common;

use common::{close, naive_linear_loss, TinyInstance};
use fedrc_core::ensemble::ClusterEnsemble;
use fedrc_core::model::{loss, LabeledSample, ModelSpec};
use fedrc_core::rc::{
    e_step, e_step_adam, label_stats, log_i_tilde, objective, AssignmentState, ClientAssignment, RcHyper,
};
use fedrc_core::rng::substream;
use proptest::prelude::*;

const EPS: f64 = 1e-12;

#[test]
fn tiny_instances_respect_size_bounds() {
    for seed in 0..200 {
        let inst = TinyInstance::random(seed);
        let n: usize = inst.clients.iter().map(|c| c.len()).sum();
        assert!(n <= 20 && inst.k <= 3, "seed {seed}: N={n}, K={}", inst.k);
        assert!(inst.clients.iter().all(|c| !c.is_empty()));
    }
}

#[test]
fn linear_loss_matches_naive_transcription() {
    for seed in 0..50 {
        let inst = TinyInstance::random(seed);
        for s in inst.clients.iter().flatten() {
            for k in 0..inst.k {
                let p = &inst.ensemble.params[k];
                let got = loss(s, p, &inst.ensemble.spec).unwrap();
                assert!(close(got, naive_linear_loss(s, p.as_slice(), inst.d, inst.c), 1e-12));
            }
        }
    }
}

#[test]
fn kernel_estep_and_objective_match_brute_force() {
    for seed in 100..300 {
        let inst = TinyInstance::random(seed);
        let clients = inst.slices();
        let stats = label_stats(&inst.assignment, &clients, inst.c, 0.0, EPS, &mut substream(seed, "s", &[]));
        for s in inst.clients.iter().flatten() {
            for k in 0..inst.k {
                let got = log_i_tilde(s, k, &inst.ensemble, &stats).unwrap();
                assert!(close(got, inst.i_tilde(s, k, EPS).ln(), 1e-10), "seed {seed}");
            }
        }
        let obj = objective(&inst.assignment, &inst.ensemble, &stats, &clients).unwrap();
        assert!(close(obj, inst.objective(EPS), 1e-10), "seed {seed}: {obj} vs {}", inst.objective(EPS));
        let next = e_step(&clients, &inst.ensemble, &stats, &inst.assignment).unwrap();
        for (i, a) in next.clients.iter().enumerate() {
            let (gamma, omega) = inst.e_step(i, EPS);
            for (g, w) in a.gamma.iter().zip(&gamma).chain(a.omega.iter().zip(&omega)) {
                assert!(close(*g, *w, 1e-10), "seed {seed}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn inactive_cluster_gets_no_weight() {
    let inst = (0..)
        .map(TinyInstance::random)
        .find(|i| i.k >= 2)
        .unwrap();
    let clients = inst.slices();
    let stats = label_stats(&inst.assignment, &clients, inst.c, 0.0, EPS, &mut substream(0, "s", &[]));
    let mut ens = inst.ensemble.clone();
    ens.active[0] = false;
    let next = e_step(&clients, &ens, &stats, &inst.assignment).unwrap();
    for a in &next.clients {
        assert!(a.rows().all(|r| r[0] == 0.0));
        assert_eq!(a.omega[0], 0.0);
    }
}

fn assert_simplex(a: &ClientAssignment) -> Result<(), TestCaseError> {
    for row in a.rows() {
        prop_assert!(row.iter().all(|g| *g >= 0.0));
        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    }
    let mut mean = vec![0.0; a.num_clusters];
    for row in a.rows() {
        for (m, g) in mean.iter_mut().zip(row) {
            *m += g;
        }
    }
    mean.iter_mut().for_each(|m| *m /= a.num_samples() as f64);
    prop_assert_eq!(&mean, &a.omega);
    Ok(())
}

fn scenario(
    labels: Vec<Vec<usize>>,
    k: usize,
    scale: f64,
    seed: u64,
) -> (Vec<Vec<LabeledSample>>, ClusterEnsemble) {
    let clients = labels
        .into_iter()
        .enumerate()
        .map(|(i, ys)| {
            ys.into_iter()
                .enumerate()
                .map(|(j, y)| LabeledSample::new(vec![scale * (i as f64 - j as f64).sin(), scale * (j as f64).cos()], y))
                .collect()
        })
        .collect();
    let ens = ClusterEnsemble::init(ModelSpec::mlp(2, vec![3], 3), k, seed).unwrap();
    (clients, ens)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn e_steps_stay_on_the_simplex(
        labels in prop::collection::vec(prop::collection::vec(0usize..3, 1..8), 1..5),
        k in 1usize..4,
        scale in 0.1f64..50.0,
        seed in 0u64..1000,
        iters in 1usize..5,
    ) {
        let (clients, ens) = scenario(labels, k, scale, seed);
        let slices: Vec<&[LabeledSample]> = clients.iter().map(|c| c.as_slice()).collect();
        let counts: Vec<usize> = clients.iter().map(|c| c.len()).collect();
        let hyper = RcHyper::default();
        let mut plain = AssignmentState::uniform(&counts, &ens.active);
        let mut adam = plain.clone();
        for _ in 0..iters {
            let mut rng = substream(seed, "p", &[]);
            let stats = label_stats(&plain, &slices, 3, 0.0, EPS, &mut rng);
            plain = e_step(&slices, &ens, &stats, &plain).unwrap();
            let stats = label_stats(&adam, &slices, 3, 0.0, EPS, &mut rng);
            adam = e_step_adam(&slices, &ens, &stats, &adam, &hyper).unwrap();
            for a in plain.clients.iter().chain(&adam.clients) {
                assert_simplex(a)?;
            }
        }
    }

    #[test]
    fn objective_is_finite_and_bounded_by_best_kernel(
        labels in prop::collection::vec(prop::collection::vec(0usize..3, 1..8), 1..4),
        k in 1usize..4,
        seed in 0u64..1000,
    ) {
        let (clients, ens) = scenario(labels, k, 1.0, seed);
        let slices: Vec<&[LabeledSample]> = clients.iter().map(|c| c.as_slice()).collect();
        let counts: Vec<usize> = clients.iter().map(|c| c.len()).collect();
        let a = AssignmentState::uniform(&counts, &ens.active);
        let stats = label_stats(&a, &slices, 3, 0.0, EPS, &mut substream(seed, "p", &[]));
        let obj = objective(&a, &ens, &stats, &slices).unwrap();
        prop_assert!(obj.is_finite());
        // a convex combination never exceeds its largest term
        let mut upper = 0.0;
        for s in clients.iter().flatten() {
            upper += (0..k).map(|c| log_i_tilde(s, c, &ens, &stats).unwrap()).fold(f64::NEG_INFINITY, f64::max);
        }
        prop_assert!(obj <= upper / a.total_samples() as f64 + 1e-12);
    }
}
