//! One-layer linear self-attention trained with chain-of-thought prompts on
//! in-context weight prediction: task generation, the model and its
//! gradient-descent construction, training objectives and optimizers, rollout
//! evaluation, Wishart moment checks and a looped variant.
//!
//! All randomness flows through [`RngStream`]; every Monte Carlo estimator is
//! reproducible from a single seed regardless of the worker count.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x < y)` also rejects NaN

pub mod error;
pub mod inference;
pub mod linalg;
pub mod looped;
pub mod mc;
pub mod model;
pub mod objectives;
pub mod task;
pub mod theory;
pub mod training;

pub use error::{Error, Result};
pub use inference::{cot_rollout, eval_loss_mc, eval_loss_ood_mc, Rollout};
pub use linalg::{Matrix, RngStream};
pub use looped::{IclTask, LoopRecord, LoopedParams};
pub use mc::Estimate;
pub use model::{construct_multistep, CheckpointMeta, LsaParams, PatternReport, ReducedParams};
pub use objectives::{GradPair, LossReport, McConfig};
pub use task::{GdIterates, PromptSequence, TaskInstance};
pub use theory::{ConcentrationConfig, ConcentrationReport, Verdict};
pub use training::{Mode, Optimizer, SpectralTrace, TrainConfig, TrajectoryRecord};
