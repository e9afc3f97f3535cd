//! Synthetic OCT B-scan pipeline for early-Alzheimer's classification
//! experiments: phantom generation, anatomically guided preprocessing,
//! augmentation, cohort and fold planning, a small CNN with year-weighted
//! loss and SWA, nested cross-validation statistics and Grad-CAM layer
//! overlap.

pub mod augment;
pub mod cohort;
pub mod eval;
pub mod explain;
pub mod model;
pub mod phantom;
pub mod pipeline;
pub mod preprocess;
pub mod store;

use thiserror::Error;

/// Any error raised by the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] store::ConfigError),
    #[error(transparent)]
    Tensor(#[from] store::TensorError),
    #[error(transparent)]
    Manifest(#[from] store::ManifestError),
    #[error(transparent)]
    Phantom(#[from] phantom::PhantomError),
    #[error(transparent)]
    Preprocess(#[from] preprocess::PreprocessError),
    #[error(transparent)]
    Cohort(#[from] cohort::CohortError),
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Explain(#[from] explain::ExplainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Bad input (malformed files, inconsistent configuration or plans)
    /// as opposed to failures while computing.
    pub fn is_validation(&self) -> bool {
        use cohort::CohortError as C;
        use eval::EvalError as E;
        match self {
            Error::Config(_) | Error::Manifest(_) | Error::Tensor(_) => true,
            Error::Phantom(phantom::PhantomError::InvalidSpec(_)) => true,
            Error::Cohort(C::PlanParse { .. } | C::Manifest(_) | C::MixedLabels(_)) => true,
            Error::Eval(E::PlanMismatch(_) | E::Parse(_) | E::Invalid(_)) => true,
            Error::Model(model::ModelError::Bundle(_) | model::ModelError::Config(_)) => true,
            _ => false,
        }
    }
}
