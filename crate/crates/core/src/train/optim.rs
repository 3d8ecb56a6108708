use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numerics::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moments for a list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub cfg: AdamWConfig,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamWState {
    pub fn new(shapes: &[(usize, usize)], cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            t: 0,
        }
    }

    /// One update of every tensor with `update[i]` set. Tensors with
    /// `decay[i]` false are not decayed.
    pub fn step(
        &mut self,
        params: Vec<&mut Matrix>,
        grads: &[Matrix],
        lr: f64,
        update: &[bool],
        decay: &[bool],
    ) -> Result<()> {
        let k = params.len();
        if grads.len() != k || update.len() != k || decay.len() != k || self.m.len() != k {
            return Err(shape_err("adamw", "parameter, gradient and mask counts differ"));
        }
        self.t += 1;
        for (i, p) in params.into_iter().enumerate() {
            if update[i] {
                let wd = if decay[i] { self.cfg.weight_decay } else { 0.0 };
                adamw_update(p, &grads[i], &mut self.m[i], &mut self.v[i], self.t, lr, &self.cfg, wd)?;
            }
        }
        Ok(())
    }
}

/// Decoupled weight decay followed by the bias-corrected Adam update.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut Matrix,
    grad: &Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
    t: u64,
    lr: f64,
    cfg: &AdamWConfig,
    weight_decay: f64,
) -> Result<()> {
    if param.shape() != grad.shape() || m.shape() != grad.shape() || v.shape() != grad.shape() {
        return Err(shape_err("adamw", format!("param {:?}, grad {:?}", param.shape(), grad.shape())));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let p = param.data_mut();
    let (md, vd) = (m.data_mut(), v.data_mut());
    for (k, &g) in grad.data().iter().enumerate() {
        p[k] -= lr * weight_decay * p[k];
        md[k] = cfg.beta1 * md[k] + (1.0 - cfg.beta1) * g;
        vd[k] = cfg.beta2 * vd[k] + (1.0 - cfg.beta2) * g * g;
        let mh = md[k] / c1;
        let vh = vd[k] / c2;
        p[k] -= lr * mh / (vh.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Linear warmup over the first `warmup_frac` of `total` steps, then linear
/// decay to zero at `total`.
pub fn lr_schedule(step: usize, total: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let step = step.min(total) as f64;
    let total = total as f64;
    let warm = (warmup_frac * total).max(0.0);
    if step < warm {
        base_lr * step / warm
    } else if total > warm {
        base_lr * (total - step) / (total - warm)
    } else {
        base_lr
    }
}
