//! Conditional group distributionally robust classification.
//!
//! Fits a multinomial logistic model that minimizes the worst-case
//! cross-entropy over mixtures of several labeled source domains, evaluated on
//! an unlabeled target covariate sample, and builds perturbation-based
//! confidence intervals for its coefficients.

pub mod data;
pub mod datagen;
pub mod error;
pub mod harness;
pub mod inference;
pub mod linalg;
pub mod metrics;
pub mod moments;
pub mod nuisance;
pub mod rng;
pub mod softmax;
pub mod solver;

pub use data::{
    load_labeled, load_results, load_unlabeled, save_labeled, save_results, save_unlabeled,
    Covariates, LabeledDataset, ProblemConfig, ResultDocument, UnlabeledDataset,
};
pub use datagen::{DgpSpec, Setting, SettingParams};
pub use error::{Error, Result};
pub use inference::{infer, InferenceResult};
pub use moments::MomentSet;
pub use nuisance::NuisancePair;
pub use solver::{cgdro_fit, erm_pooled, group_dro, FitResult};
