//! Random-transformation (RT) adversarial defenses, end to end.
//!
//! The crate covers the stochastic defense itself (a differentiable
//! transform pipeline in front of a small residual classifier), the attacks
//! used to evaluate it, gradient-spread diagnostics, BPDA surrogates for
//! non-differentiable transforms, Bayesian-optimisation tuning of the
//! transform distributions, and the experiment harness driving all of it.

pub mod attack;
pub mod backbone;
pub mod bpda;
pub mod data;
pub mod defense;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod rng;
pub mod tensor;
pub mod transforms;
pub mod tuner;

pub use attack::{AttackConfig, AttackState, Objective, Optimizer};
pub use backbone::{AdvTrainConfig, Backbone, BackboneArch, Classifier, TrainConfig};
pub use bpda::{BpdaNet, GradientMode};
pub use data::{Dataset, DatasetSpec};
pub use defense::{DecisionRule, DefenseConfig, PredictionOutcome};
pub use diagnostics::GradientStats;
pub use error::{Error, Result};
pub use graph::Var;
pub use harness::{EvalResult, Experiment, ExperimentConfig, Stage};
pub use tensor::Tensor;
pub use transforms::{Group, TransformKind, TransformParams, TransformSpec};
pub use tuner::{TrialPoint, TunerConfig, TunerState};
