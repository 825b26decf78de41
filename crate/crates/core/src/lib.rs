//! End-to-end constellation shaping over AWGN channels with Wiener phase
//! noise, with a differentiable blind phase search in the receiver.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod channel;
pub mod cpe;
pub mod demapper;
pub mod error;
pub mod grad;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod shaping;
pub mod system;
pub mod trainer;

pub use num_complex::Complex64;

pub use channel::{ChannelParams, PhaseTrace};
pub use cpe::{BpsConfig, BpsMode, PhaseSpan};
pub use demapper::{DemapperNet, LlrBatch};
pub use error::{Error, Result};
pub use grad::{AdamConfig, AdamState, Objective, ParamVector};
pub use metrics::BmiEstimate;
pub use shaping::{Constellation, MapperWeights, ShaperConfig, ShaperMode};
pub use system::{Model, ModelSpec};
pub use trainer::{Checkpoint, EvalCpe, TrainConfig, TrainMode, Trainer};
