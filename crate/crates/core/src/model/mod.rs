//! Multi-scale correlation network: parameters, configuration and forward pass.

pub mod config;
pub mod network;
pub mod params;
mod resample;

pub use config::{parse_key_values, ModelConfig, PREDICTION_STRIDE};
pub use network::{forward, predict, to_network_input, ForwardOutput, GruTrace};
pub use params::{param_specs, BoundParams, ModelParams, ParamGroup, ParamSpec};
pub use resample::{downsample_flow, downsample_mask, upsample_flow};

use thiserror::Error;

use crate::tensor::{CheckpointError, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Param(String),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("image size {height}x{width} is not divisible by {multiple}")]
    Divisibility {
        height: usize,
        width: usize,
        multiple: usize,
    },
}
