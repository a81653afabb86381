//! Clustered federated learning under simultaneous label, feature and
//! concept shift.
//!
//! The crate is organized bottom-up:
//!
//! * [`model`]: softmax classifiers (linear or `tanh` MLP) with analytic
//!   gradients.
//! * [`ensemble`]: the K cluster models and their active flags.
//! * [`rc`]: the ratio-kernel objective, E-steps, label statistics and the
//!   centralized M-step.
//! * [`fed`]: the round protocol (client sampling, local training,
//!   aggregation, adaptive cluster removal).
//! * [`baselines`]: FedAvg, FedEM, IFCA and FeSEM under the same harness.
//! * [`scenario`]: annotated synthetic and tabular scenario construction.
//! * [`metrics`]: accuracy, cluster composition, purity and report files.
//! * [`experiment`]: config files and the commands behind the CLI.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod ensemble;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod metrics;
pub mod model;
pub mod rc;
pub mod rng;
pub mod scenario;

pub use error::{Error, Result};
