//! Stochastic gradient descent with Nesterov momentum and L2 weight decay.

use crate::tensor::{ShapeError, Tensor};

/// Per-parameter velocity buffers plus the number of update steps taken.
///
/// Velocities are stored in the same order as the parameter list they were
/// created from, so checkpoints round-trip exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step_count: u64,
    pub velocities: Vec<Tensor>,
}

impl OptimState {
    /// Zero velocities matching the given parameter tensors.
    pub fn new(params: &[&Tensor]) -> Self {
        OptimState {
            step_count: 0,
            velocities: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }
}

/// Hyperparameters for one update step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One in-place update over a parameter set.
///
/// For each parameter: decay is folded into the gradient
/// (`g' = g + weight_decay * theta`), the velocity integrates it
/// (`v = momentum * v + g'`), and the parameter moves along the lookahead
/// direction (`theta -= learning_rate * (g' + momentum * v)`). With zero
/// momentum this reduces to plain SGD with L2 regularization, bit for bit.
pub fn sgd_nesterov_step(
    params: &mut [&mut Tensor],
    grads: &[&Tensor],
    state: &mut OptimState,
    cfg: &SgdConfig,
) -> Result<(), ShapeError> {
    if params.len() != grads.len() || params.len() != state.velocities.len() {
        return Err(ShapeError::mismatch(
            "sgd_nesterov_step",
            format!(
                "{} params, {} grads, {} velocity buffers",
                params.len(),
                grads.len(),
                state.velocities.len()
            ),
        ));
    }
    for ((p, g), v) in params.iter().zip(grads).zip(&state.velocities) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(ShapeError::mismatch(
                "sgd_nesterov_step",
                format!(
                    "param {:?} vs grad {:?} vs velocity {:?}",
                    p.shape(),
                    g.shape(),
                    v.shape()
                ),
            ));
        }
    }

    for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut state.velocities) {
        let pdata = param.data_mut();
        let gdata = grad.data();
        let vdata = vel.data_mut();
        for i in 0..pdata.len() {
            let g = gdata[i] + cfg.weight_decay * pdata[i];
            let v = cfg.momentum * vdata[i] + g;
            vdata[i] = v;
            pdata[i] -= cfg.learning_rate * (g + cfg.momentum * v);
        }
    }
    state.step_count += 1;
    Ok(())
}
