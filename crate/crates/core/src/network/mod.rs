//! A small capsule classifier trained through unrolled routing.

mod agreement;
mod gradcheck;
mod model;
mod train;

pub use agreement::{classifier_agreement, classifier_agreement_with, AgreementBreakdown, InitialScore};
pub use gradcheck::{grad_check, grad_check_fixture, GradCheckReport, FD_STEP, GRAD_CHECK_FLOOR};
pub use model::{forward, Checkpoint, InitScale, ModelShape, NamedParam, ParamSpec, ToyModel, CHECKPOINT_SCHEMA};
pub(crate) use train::mix_seed;
pub use train::{
    evaluate, evaluate_detailed, gradient, loss, loss_with, train, EpochMetrics, FitReport, LossKind, LrSchedule,
    TrainConfig, FIT_REPORT_SCHEMA,
};

use crate::routing::RoutingError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error("input has length {found}, model expects {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged in epoch {}", .0.diverged_at.unwrap_or(0))]
    DivergedTraining(Box<FitReport>),
    #[error("dataset is empty")]
    EmptyDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}
