//! Transformer blocks: the standard Post-LN and Pre-LN flows and their wavy
//! counterparts, where the attention residual is replaced by a step of the
//! wave system (or one of the gated blends) and LN/FFN act on the velocity
//! stream through LN_v and FFN_v.
//!
//! Every block is a literal line-by-line composition of its flow; there are
//! no fused shortcuts.

mod format;
mod model;

pub use format::{load_model, read_model, save_model, write_model, MAGIC, VERSION};
pub use model::{
    model_forward, sinusoidal_positions, ForwardOutput, GateShape, LnPlacement, ModelConfig, ModelParams,
    ParamKind, Positional, WavyLayers,
};
pub(crate) use model::check_tokens;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_matrix, multi_head_attention, AttentionParams};
use crate::dynamics::{gate_lambda, StepConfig, Variant};
use crate::error::{shape_err, Error, Result};
use crate::norms_ffn::{ffn, ffn_velocity, joint_layer_norm, layer_norm, row_stats, FfnParams, LayerNormParams};
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub attn: AttentionParams,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
    pub step: StepConfig,
    /// Whether the attention residual is the wavy (or gated) one.
    pub wavy: bool,
}

impl BlockParams {
    pub fn d_model(&self) -> usize {
        self.attn.d_model()
    }

    /// True when this block runs one of the velocity-carrying residuals.
    pub fn uses_velocity(&self) -> bool {
        self.wavy && self.step.variant != Variant::Diffuse
    }

    pub fn validate(&self) -> Result<()> {
        self.attn.validate()?;
        self.ffn.validate()?;
        self.step.validate()?;
        let d = self.d_model();
        if self.ln1.d() != d || self.ln2.d() != d || self.ffn.w1.rows() != d {
            return Err(shape_err("BlockParams", "sub-layer widths disagree"));
        }
        Ok(())
    }
}

/// Wavy residual stage: given `X^l`, `Y^l` and the attention output, returns
/// the updated `(X, Y)` for the configured variant.
///
/// * wave: `Y' = tau (Attn - X) + Y`, `X' = tau Y' + X`
/// * mix_output: `X' = lambda X_wave + (1 - lambda) (tau (Attn - X) + X)`, `Y'` from the wave branch
/// * mix_velocity: `Y' = lambda [tau (Attn - X) + Y] + (1 - lambda) (Attn - X)`, `X' = tau Y' + X`
pub fn wavy_residual(x: &Matrix, y: &Matrix, attn_out: &Matrix, step: &StepConfig) -> Result<(Matrix, Matrix)> {
    let tau = step.tau;
    let force = attn_out.sub(x)?;
    match step.variant {
        Variant::Wave => {
            let y1 = force.scale(tau).add(y)?;
            let x1 = y1.scale(tau).add(x)?;
            Ok((x1, y1))
        }
        Variant::MixOutput => {
            let lambda = gate_lambda(&step.theta, x.cols())?;
            let y1 = force.scale(tau).add(y)?;
            let x_wave = y1.scale(tau).add(x)?;
            let x_diffuse = force.scale(tau).add(x)?;
            Ok((blend(&lambda, &x_wave, &x_diffuse)?, y1))
        }
        Variant::MixVelocity => {
            let lambda = gate_lambda(&step.theta, x.cols())?;
            let wave_y = force.scale(tau).add(y)?;
            let y1 = blend(&lambda, &wave_y, &force)?;
            let x1 = y1.scale(tau).add(x)?;
            Ok((x1, y1))
        }
        Variant::Diffuse => Err(Error::InvalidArgument(
            "the diffusive residual has no velocity stage".into(),
        )),
    }
}

/// `lambda o hi + (1 - lambda) o lo`, `lambda` broadcast over rows.
fn blend(lambda: &[f64], hi: &Matrix, lo: &Matrix) -> Result<Matrix> {
    if hi.shape() != lo.shape() || lambda.len() != hi.cols() {
        return Err(shape_err("blend", "branch shapes differ"));
    }
    let d = hi.cols();
    let mut out = hi.clone();
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        let l = lambda[k % d];
        *o = l * hi.data()[k] + (1.0 - l) * lo.data()[k];
    }
    Ok(out)
}

fn check_state(x: &Matrix, y: &Matrix, p: &BlockParams) -> Result<()> {
    if x.cols() != p.d_model() || x.shape() != y.shape() {
        return Err(shape_err(
            "block",
            format!("X {:?}, Y {:?} for width {}", x.shape(), y.shape(), p.d_model()),
        ));
    }
    Ok(())
}

/// Standard Post-LN block:
/// `X1 = Attn(X)`, `X2 = X1 + X`, `X3 = LN(X2)`, `X4 = FFN(X3)`, `X5 = X3 + X4`, `LN(X5)`.
pub fn post_ln_block(x: &Matrix, p: &BlockParams) -> Result<Matrix> {
    let x1 = multi_head_attention(x, &p.attn)?;
    let x2 = x1.add(x)?;
    let x3 = layer_norm(&x2, &p.ln1)?;
    let x4 = ffn(&x3, &p.ffn)?;
    let x5 = x3.add(&x4)?;
    layer_norm(&x5, &p.ln2)?.ensure_finite("post_ln_block")
}

/// Standard Pre-LN block:
/// `X1 = LN(X)`, `X2 = Attn(X1)`, `X3 = X + X2`, `X4 = LN(X3)`, `X5 = FFN(X4)`, `X5 + X3`.
pub fn pre_ln_block(x: &Matrix, p: &BlockParams) -> Result<Matrix> {
    let x1 = layer_norm(x, &p.ln1)?;
    let x2 = multi_head_attention(&x1, &p.attn)?;
    let x3 = x.add(&x2)?;
    let x4 = layer_norm(&x3, &p.ln2)?;
    let x5 = ffn(&x4, &p.ffn)?;
    x5.add(&x3)?.ensure_finite("pre_ln_block")
}

/// Post-LN wavy block.
///
/// ```text
/// X1      = Attn(X)
/// X2, Y1  = wavy residual of (X, Y) with X1      (wave: Y1 = tau(X1 - X) + Y, X2 = tau Y1 + X)
/// X3, Y2  = LN(X2), LN_v(X2; Y1)
/// X4, Y3  = FFN(X3), FFN_v(X3; Y2)
/// X5, Y4  = X3 + X4, Y2 + Y3
/// out     = LN(X5), LN_v(X5; Y4)
/// ```
pub fn post_ln_wavy_block(x: &Matrix, y: &Matrix, p: &BlockParams) -> Result<(Matrix, Matrix)> {
    check_state(x, y, p)?;
    let x1 = multi_head_attention(x, &p.attn)?;
    let (x2, y1) = wavy_residual(x, y, &x1, &p.step)?;
    let (x3, y2) = joint_layer_norm(&x2, &y1, &p.ln1)?;
    let x4 = ffn(&x3, &p.ffn)?;
    let y3 = ffn_velocity(&x3, &y2, &p.ffn)?;
    let x5 = x3.add(&x4)?;
    let y4 = y2.add(&y3)?;
    let (xo, yo) = joint_layer_norm(&x5, &y4, &p.ln2)?;
    Ok((xo.ensure_finite("post_ln_wavy_block")?, yo.ensure_finite("post_ln_wavy_block")?))
}

/// Pre-LN wavy block.
///
/// ```text
/// X1, Y1  = LN(X), LN_v(X; Y)
/// X2      = Attn(X1)
/// X3, Y2  = wavy residual of (X, Y) with X2      (wave: Y2 = tau(X2 - X) + Y, X3 = tau Y2 + X)
/// X4, Y3  = LN(X3), LN_v(X3; Y2)
/// X5, Y4  = FFN(X4), FFN_v(X4; Y3)
/// out     = X5 + X3, Y4 + Y2
/// ```
///
/// `Y1` is computed for fidelity with the published flow; only `X1` feeds
/// the attention.
pub fn pre_ln_wavy_block(x: &Matrix, y: &Matrix, p: &BlockParams) -> Result<(Matrix, Matrix)> {
    check_state(x, y, p)?;
    let (x1, _y1) = joint_layer_norm(x, y, &p.ln1)?;
    let x2 = multi_head_attention(&x1, &p.attn)?;
    let (x3, y2) = wavy_residual(x, y, &x2, &p.step)?;
    let (x4, y3) = joint_layer_norm(&x3, &y2, &p.ln2)?;
    let x5 = ffn(&x4, &p.ffn)?;
    let y4 = ffn_velocity(&x4, &y3, &p.ffn)?;
    let xo = x5.add(&x3)?;
    let yo = y4.add(&y2)?;
    Ok((xo.ensure_finite("pre_ln_wavy_block")?, yo.ensure_finite("pre_ln_wavy_block")?))
}

/// Checks the matrix form of Pre-LN attention.
///
/// With `Sigma = diag(sqrt(var_i + eps))`, `S = diag(gamma)` and
/// `M = -(mu / sigma) gamma^T + 1 beta^T`, the Pre-LN attention update is
/// `Attn(LN(X)) + X = (A~ Sigma^-1 X S + A~ M) Wv Wo + X`, where `A~` is the
/// attention matrix of `LN(X)`. The left side is evaluated through the block
/// code path and the right side from the matrix form; the largest absolute
/// discrepancy is returned.
pub fn preln_diffusion_reaction_check(x: &Matrix, p: &BlockParams) -> Result<f64> {
    if p.attn.heads.len() != 1 {
        return Err(Error::InvalidArgument("identity check needs a single head".into()));
    }
    let lhs = multi_head_attention(&layer_norm(x, &p.ln1)?, &p.attn)?.add(x)?;

    let (n, d) = x.shape();
    let gamma = p.ln1.gamma.data();
    let beta = p.ln1.beta.data();
    let mut scaled = Matrix::zeros(n, d);
    let mut source = Matrix::zeros(n, d);
    for i in 0..n {
        let (mu, var) = row_stats(x.row(i));
        let sigma = (var + p.ln1.eps).sqrt();
        for j in 0..d {
            scaled.set(i, j, x.get(i, j) / sigma * gamma[j]);
            source.set(i, j, -(mu / sigma) * gamma[j] + beta[j]);
        }
    }
    let x_tilde = scaled.add(&source)?;
    let a_tilde = attention_matrix(&x_tilde, &p.attn, 0)?;
    let diffusion = a_tilde.apply(&scaled)?;
    let m_tilde = a_tilde.apply(&source)?;
    let rhs = diffusion
        .add(&m_tilde)?
        .matmul(&p.attn.heads[0].wv)?
        .matmul(&p.attn.wo)?
        .add(x)?;
    Ok(lhs.max_abs_diff(&rhs))
}

#[cfg(test)]
mod tests;
