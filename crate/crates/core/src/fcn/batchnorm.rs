//! Per-channel batch normalization over (batch, spatial) positions.

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Inference,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BnConfig {
    pub epsilon: f64,
    pub momentum: f64,
}

impl Default for BnConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            momentum: 0.99,
        }
    }
}

pub struct BnForward<R> {
    pub y: Tensor<R>,
    pub xhat: Tensor<R>,
    /// `1 / sqrt(var + eps)` per channel, with whichever variance was used.
    pub inv_std: Vec<R>,
    pub mean: Vec<R>,
    pub var: Vec<R>,
}

/// Running statistics to update in train mode; `None` leaves them untouched.
pub struct RunningStats<'a, R> {
    pub mean: &'a mut [R],
    pub var: &'a mut [R],
}

#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<R: Real>(
    z: &Tensor<R>,
    gamma: &[R],
    beta: &[R],
    running_mean: &[R],
    running_var: &[R],
    mode: Mode,
    cfg: BnConfig,
    update: Option<RunningStats<'_, R>>,
) -> Result<BnForward<R>> {
    let channels = z.channels;
    let n = z.per_channel();
    if mode == Mode::Train && z.batch < 2 {
        return Err(Error::InvalidConfig(format!(
            "batch normalization in train mode needs a batch of at least 2, got {}",
            z.batch
        )));
    }
    let mut mean = vec![R::zero(); channels];
    let mut var = vec![R::zero(); channels];
    match mode {
        Mode::Train => {
            for c in 0..channels {
                let ch = z.channel(c);
                let m = ch.iter().map(|v| v.f64()).sum::<f64>() / n as f64;
                let v = ch.iter().map(|x| (x.f64() - m).powi(2)).sum::<f64>() / n as f64;
                mean[c] = R::of(m);
                var[c] = R::of(v);
            }
        }
        Mode::Inference => {
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
    }
    let eps = R::of(cfg.epsilon);
    let inv_std: Vec<R> = var.iter().map(|&v| R::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(z.channels, z.batch, z.h, z.w);
    let mut y = Tensor::zeros(z.channels, z.batch, z.h, z.w);
    for c in 0..channels {
        let (m, s, g, b) = (mean[c], inv_std[c], gamma[c], beta[c]);
        let src = z.channel(c);
        let xh = xhat.channel_mut(c);
        for (d, &v) in xh.iter_mut().zip(src) {
            *d = (v - m) * s;
        }
        let out = &mut y.data[c * n..(c + 1) * n];
        for (o, &h) in out.iter_mut().zip(xhat.channel(c)) {
            *o = g * h + b;
        }
    }
    if let (Mode::Train, Some(stats)) = (mode, update) {
        let mom = R::of(cfg.momentum);
        let rest = R::one() - mom;
        for c in 0..channels {
            stats.mean[c] = mom * stats.mean[c] + rest * mean[c];
            stats.var[c] = mom * stats.var[c] + rest * var[c];
        }
    }
    Ok(BnForward {
        y,
        xhat,
        inv_std,
        mean,
        var,
    })
}

pub struct BnBackward<R> {
    pub d_input: Tensor<R>,
    pub d_gamma: Vec<R>,
    pub d_beta: Vec<R>,
}

/// Backward pass. In train mode the batch mean and variance depend on the
/// input, in inference mode they are constants.
pub fn batchnorm_backward<R: Real>(
    dy: &Tensor<R>,
    xhat: &Tensor<R>,
    gamma: &[R],
    inv_std: &[R],
    mode: Mode,
) -> BnBackward<R> {
    let channels = dy.channels;
    let n = dy.per_channel();
    let nf = R::of(n as f64);
    let mut d_input = Tensor::zeros(dy.channels, dy.batch, dy.h, dy.w);
    let mut d_gamma = vec![R::zero(); channels];
    let mut d_beta = vec![R::zero(); channels];
    for c in 0..channels {
        let g = dy.channel(c);
        let xh = xhat.channel(c);
        let sum_dy: R = g.iter().copied().sum();
        let sum_dy_xhat: R = g.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        d_beta[c] = sum_dy;
        d_gamma[c] = sum_dy_xhat;
        let out = d_input.channel_mut(c);
        match mode {
            Mode::Train => {
                // dz = γ·s/n · (n·dy − Σdy − x̂·Σ(dy·x̂))
                let scale = gamma[c] * inv_std[c] / nf;
                for ((o, &d), &h) in out.iter_mut().zip(g).zip(xh) {
                    *o = scale * (nf * d - sum_dy - h * sum_dy_xhat);
                }
            }
            Mode::Inference => {
                let scale = gamma[c] * inv_std[c];
                for (o, &d) in out.iter_mut().zip(g) {
                    *o = scale * d;
                }
            }
        }
    }
    BnBackward {
        d_input,
        d_gamma,
        d_beta,
    }
}
