//! Batch normalization over the (slice, height, width) axes per channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics and constants for one batch-norm layer. The learnable
/// gamma/beta vectors live in the parameter set so the optimizer sees them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            epsilon: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(Error::invalid("batch norm epsilon must be > 0"));
        }
        if self.running_var.iter().any(|v| *v < 0.0) {
            return Err(Error::invalid("batch norm running variance must be >= 0"));
        }
        Ok(())
    }
}

/// Per-call cache of the normalization statistics, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mode: BnMode,
}
