//! Epoch-wise parameter averaging for the evaluation network.

use crate::error::{TrainError, TrainResult};

#[derive(Debug, Clone, PartialEq)]
pub struct MomentumState {
    pub theta_m: Vec<f64>,
    /// Number of updates applied so far.
    pub epoch: usize,
}

impl MomentumState {
    pub fn new(theta: &[f64]) -> Self {
        Self {
            theta_m: theta.to_vec(),
            epoch: 0,
        }
    }
}

/// `Θm ← (Θm + Θb) / 2`, elementwise.
pub fn momentum_update(state: MomentumState, theta_b: &[f64]) -> TrainResult<MomentumState> {
    if state.theta_m.len() != theta_b.len() {
        return Err(TrainError::LengthMismatch {
            momentum: state.theta_m.len(),
            live: theta_b.len(),
        });
    }
    let theta_m = state.theta_m.iter().zip(theta_b).map(|(m, b)| (m + b) / 2.0).collect();
    Ok(MomentumState {
        theta_m,
        epoch: state.epoch + 1,
    })
}
