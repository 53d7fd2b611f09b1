//! Multi-expert learning-to-defer (L2D) toolkit.
//!
//! An L2D system pairs a K-class classifier with a rejector that may route
//! each input to one of J experts instead of the classifier. This crate
//! implements the full pipeline on synthetic tasks where the class posterior
//! and every expert's correctness probability are known in closed form:
//!
//! - [`synth`]: Gaussian-mixture tasks, simulated experts, exact posteriors.
//! - [`loss`]: softmax and one-vs-all surrogate losses over K+J logits, with
//!   analytic gradients.
//! - [`model`]: a small deterministic MLP trained by minibatch SGD on either
//!   surrogate, with bit-exact checkpointing.
//! - [`deferral`]: classify/defer decision rules and the two expert-correctness
//!   estimators (softmax ratio with clamping, per-slot sigmoid).
//! - [`calibration`]: expected calibration error of those estimators.
//! - [`conformal`]: conformal expert ensembles: a naive cumulative-score
//!   statistic and regularized risk-controlled sets.
//! - [`ensemble`]: majority-vote evaluation of expert sets and system accuracy.
//! - [`dataset_io`]: CSV + JSON-sidecar persistence for generated datasets.
//!
//! All randomness flows through per-purpose counter-based streams
//! ([`rng`]), so generated data is bit-reproducible and adding experts never
//! perturbs earlier draws.

pub mod calibration;
pub mod conformal;
pub mod dataset_io;
pub mod deferral;
pub mod ensemble;
pub mod loss;
pub mod model;
pub mod rng;
pub mod synth;
