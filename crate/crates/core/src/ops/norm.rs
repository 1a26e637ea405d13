//! Batch normalization over `[N, H, W]` per channel.

use crate::error::{shape_err, Error, Result};
use crate::tape::{Op, Tape, Var};
use crate::tensor::Tensor;

type Dims4 = (usize, usize, usize, usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct BatchNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub epsilon: f64,
    pub momentum: f64,
    /// Number of running-stat updates applied so far.
    pub updates: u64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        BatchNormParams {
            gamma: Tensor::full([channels], 1.0),
            beta: Tensor::zeros([channels]),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::full([channels], 1.0),
            epsilon: 1e-5,
            momentum: 0.1,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    /// Folds one batch's statistics into the running estimates.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.unbiased_var) {
            *r = (1.0 - m) * *r + m * b;
        }
        self.updates += 1;
    }
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

#[derive(Debug)]
pub(crate) struct BnSaved {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    train: bool,
}

pub(crate) struct BnGrads {
    pub input: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

fn check(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Dims4> {
    let dims = x.dims4()?;
    if gamma.shape() != [dims.1] || beta.shape() != [dims.1] {
        return shape_err(format!(
            "batch norm over {} channels with gamma {:?}, beta {:?}",
            dims.1,
            gamma.shape(),
            beta.shape()
        ));
    }
    Ok(dims)
}

fn normalize(
    dims: Dims4,
    x: &[f64],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    inv_std: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                let v = (x[i] - mean[ch]) * inv_std[ch];
                xhat[i] = v;
                y[i] = gamma[ch] * v + beta[ch];
            }
        }
    }
    (xhat, y)
}

/// Batch norm outside a tape. Train mode also returns the batch statistics.
pub fn batch_norm_forward(
    x: &Tensor,
    p: &BatchNormParams,
    mode: BnMode,
) -> Result<(Tensor, Option<BatchStats>)> {
    let (y, _, stats) = batch_norm_forward_raw(x, &p.gamma, &p.beta, p, mode)?;
    Ok((y, stats))
}

fn batch_norm_forward_raw(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    p: &BatchNormParams,
    mode: BnMode,
) -> Result<(Tensor, BnSaved, Option<BatchStats>)> {
    let dims = check(x, gamma, beta)?;
    let (n, c, h, w) = dims;
    if p.epsilon <= 0.0 {
        return Err(Error::InvalidArgument("batch norm epsilon must be > 0".into()));
    }
    let plane = h * w;
    let count = n * plane;
    let xd = x.data();
    let (mean, var, stats) = match mode {
        BnMode::Train => {
            if count < 2 {
                return shape_err(format!(
                    "training batch norm needs N*H*W >= 2, got {count}"
                ));
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += xd[(b * c + ch) * plane..][..plane].iter().sum::<f64>();
                }
                mean[ch] = s / count as f64;
                let mut sq = 0.0;
                for b in 0..n {
                    sq += xd[(b * c + ch) * plane..][..plane]
                        .iter()
                        .map(|v| (v - mean[ch]) * (v - mean[ch]))
                        .sum::<f64>();
                }
                var[ch] = sq / count as f64;
            }
            let unbiased_var = var.iter().map(|v| v * count as f64 / (count - 1) as f64).collect();
            let stats = BatchStats {
                mean: mean.clone(),
                unbiased_var,
            };
            (mean, var, Some(stats))
        }
        BnMode::Eval => {
            if p.updates == 0 {
                return Err(Error::BnNotCalibrated(
                    "running statistics were never updated".into(),
                ));
            }
            if p.running_var.data().iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidArgument("negative running variance".into()));
            }
            (
                p.running_mean.data().to_vec(),
                p.running_var.data().to_vec(),
                None,
            )
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.epsilon).sqrt()).collect();
    let (xhat, y) = normalize(dims, xd, gamma.data(), beta.data(), &mean, &inv_std);
    let out = Tensor::from_op(vec![n, c, h, w], y, "batch_norm")?;
    Ok((
        out,
        BnSaved {
            xhat,
            inv_std,
            train: mode == BnMode::Train,
        },
        stats,
    ))
}

pub(crate) fn batch_norm_backward(
    dims: Dims4,
    gamma: &[f64],
    saved: &BnSaved,
    dy: &[f64],
) -> BnGrads {
    let (n, c, h, w) = dims;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for i in off..off + plane {
                dgamma[ch] += dy[i] * saved.xhat[i];
                dbeta[ch] += dy[i];
            }
        }
    }
    let mut dx = vec![0.0; dy.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            let scale = gamma[ch] * saved.inv_std[ch];
            for i in off..off + plane {
                dx[i] = if saved.train {
                    // d/dx of gamma * (x - mean(x)) / sqrt(var(x) + eps)
                    scale * (dy[i] - dbeta[ch] / count - saved.xhat[i] * dgamma[ch] / count)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    BnGrads {
        input: dx,
        gamma: dgamma,
        beta: dbeta,
    }
}

impl Tape {
    /// Records batch norm with `gamma`/`beta` taken from tape vars; running
    /// statistics and mode come from `p`. Train mode returns the batch
    /// statistics for the caller to fold into `p`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        p: &BatchNormParams,
        mode: BnMode,
    ) -> Result<(Var, Option<BatchStats>)> {
        let (out, saved, stats) =
            batch_norm_forward_raw(self.value(x), self.value(gamma), self.value(beta), p, mode)?;
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
        );
        Ok((v, stats))
    }
}
