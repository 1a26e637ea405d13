//! SGD with momentum and L2 weight decay.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// One update: `v = momentum * v + grad + weight_decay * param`,
/// `param -= lr * v`.
pub fn sgd_step(
    param: &mut Tensor,
    grad: &[f64],
    velocity: &mut Vec<f64>,
    cfg: SgdConfig,
) -> Result<()> {
    let n = param.numel();
    if grad.len() != n {
        return shape_err(format!("gradient of length {} for {n} values", grad.len()));
    }
    if velocity.is_empty() {
        velocity.resize(n, 0.0);
    } else if velocity.len() != n {
        return shape_err("velocity buffer has the wrong length");
    }
    for ((p, &g), v) in param.data_mut().iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= cfg.lr * *v;
    }
    Ok(())
}
