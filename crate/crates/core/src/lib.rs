//! Estimation of latent variable models for binary items.
//!
//! The library fits generalized linear latent variable models — `p` binary
//! items driven by `q` standard-normal factors through a logit link — by
//! maximizing an approximated marginal likelihood. The intractable
//! `q`-dimensional integral behind each subject's marginal density is
//! approximated either by Gauss-Hermite quadrature adapted per subject at
//! the posterior mode and curvature, or by first/second-order Gaussian
//! (Laplace) expansions around the same mode. Standard errors come from the
//! M-estimator sandwich, and a Monte Carlo harness generates populations,
//! runs replicate studies, and renders table-style summaries.
//!
//! Module map:
//!
//! * [`quadrature`] — base Gauss-Hermite rules, per-subject adaptation,
//!   tensor-product integration;
//! * [`model`] — the binary-item kernel: model/parameter/data types and the
//!   complete-data negative log density with derivatives through fourth
//!   order;
//! * [`posterior`] — per-subject Newton solves for mode and curvature;
//! * [`approximation`] — quadrature and Laplace marginal, log-likelihood,
//!   and score evaluators;
//! * [`estimator`] — the quasi-Newton fit driver and sandwich covariance;
//! * [`simulation`] — population generation, replicate studies, reports.
//!
//! Everything is deterministic: fits involve no randomness, studies derive
//! per-replicate RNG streams from a fixed seed, and parallel reductions are
//! ordered, so results are bit-identical across runs and thread counts.

pub mod approximation;
pub mod error;
pub mod estimator;
pub mod linalg;
pub mod model;
pub mod posterior;
pub mod quadrature;
pub mod simulation;

pub use approximation::Method;
pub use error::{Error, Result};
pub use estimator::{fit, sandwich_covariance, FitControls, FitOptions, FitResult};
pub use model::{Dataset, Family, ModelSpec, Theta};
pub use posterior::{find_mode, InnerOptions, PosteriorApprox};
pub use quadrature::{adapt, hermite_rule, integrate, log_integrate, AdaptedRule, HermiteRule};
pub use simulation::{
    generate_dataset, generate_truth, render_table, run_study, Preset, Recipe, SimulationReport,
    StudyConfig, TableFormat,
};
