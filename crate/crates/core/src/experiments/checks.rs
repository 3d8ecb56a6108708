use serde::{Deserialize, Serialize};

use crate::attention::{attention_matrix, multi_head_attention, AttentionParams};
use crate::autodiff::{grad_check, GradCheckOptions, ModelObjective, Target};
use crate::blocks::{
    post_ln_block, post_ln_wavy_block, pre_ln_block, pre_ln_wavy_block, preln_diffusion_reaction_check, BlockParams,
    GateShape, LnPlacement, ModelConfig, ModelParams, ParamKind,
};
use crate::dynamics::{sigmoid, wave_step, wave_step_direct, DynamicsState, StepConfig, Variant};
use crate::error::Result;
use crate::norms_ffn::{
    activation, activation_derivative, ffn, ffn_velocity, row_stats, Activation, FfnParams, LayerNormParams,
};
use crate::numerics::{central_jvp, gaussian_init, relative_error, Matrix, Prng};

pub const FFN_V_TOL: f64 = 1e-6;
pub const LN_V_TOL: f64 = 1e-8;
pub const MODEL_GRAD_TOL: f64 = 1e-5;
pub const SCHEME_TOL: f64 = 1e-12;
pub const IDENTITY_TOL: f64 = 1e-10;

/// Signature of the velocity FFN under test.
pub type VelocityFfn = fn(&Matrix, &Matrix, &FfnParams) -> Result<Matrix>;

#[derive(Clone, Debug)]
pub struct GradcheckSettings {
    pub seed: u64,
    pub jvp_instances: usize,
    pub model_samples: usize,
    /// Adds a ReLU model checked with the kink filter.
    pub relu: bool,
    pub ffn_velocity: VelocityFfn,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            jvp_instances: 100,
            model_samples: 20,
            relu: true,
            ffn_velocity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JvpReport {
    pub instances: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl JvpReport {
    fn new(errors: &[f64], tolerance: f64) -> Self {
        let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
        Self {
            instances: errors.len(),
            max_rel_error,
            tolerance,
            pass: max_rel_error <= tolerance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelGradReport {
    pub variant: Variant,
    pub placement: LnPlacement,
    pub activation: Activation,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub ffn_velocity: JvpReport,
    pub ln_velocity: JvpReport,
    pub models: Vec<ModelGradReport>,
    pub pass: bool,
}

fn random_ffn(rng: &mut Prng, d: usize, d_ff: usize, act: Activation) -> FfnParams {
    let mut p = FfnParams::random(rng, d, d_ff, 0.6, act);
    p.b1 = gaussian_init(rng, 1, d_ff, 0.3);
    p.b2 = gaussian_init(rng, 1, d, 0.3);
    p
}

fn random_ln(rng: &mut Prng, d: usize) -> LayerNormParams {
    LayerNormParams {
        gamma: gaussian_init(rng, 1, d, 0.3).map(|v| 1.0 + v),
        beta: gaussian_init(rng, 1, d, 0.3),
        eps: 1e-5,
    }
}

fn ffn_velocity_errors(rng: &mut Prng, count: usize, f: VelocityFfn) -> Result<Vec<f64>> {
    (0..count)
        .map(|_| {
            let (n, d) = (1 + rng.below(6), 2 + rng.below(7));
            let p = random_ffn(rng, d, 2 * d, Activation::Gelu);
            let x = gaussian_init(rng, n, d, 1.0);
            let y = gaussian_init(rng, n, d, 1.0);
            let fd = central_jvp(|m| ffn(m, &p), &x, &y, 1e-6)?;
            Ok(relative_error(&f(&x, &y, &p)?, &fd, 1e-12))
        })
        .collect()
}

fn ln_velocity_errors(rng: &mut Prng, count: usize) -> Result<Vec<f64>> {
    (0..count)
        .map(|_| {
            let (n, d) = (1 + rng.below(6), 2 + rng.below(7));
            let p = random_ln(rng, d);
            let x = gaussian_init(rng, n, d, 1.5);
            let y = gaussian_init(rng, n, d, 1.0);
            let stats: Vec<(f64, f64)> = x.row_iter().map(row_stats).collect();
            let frozen = |m: &Matrix| -> Result<Matrix> {
                Ok(Matrix::from_fn(m.rows(), m.cols(), |i, j| {
                    let (mu, var) = stats[i];
                    (m.get(i, j) - mu) / (var + p.eps).sqrt() * p.gamma.get(0, j) + p.beta.get(0, j)
                }))
            };
            let fd = central_jvp(frozen, &x, &y, 1e-5)?;
            let got = crate::norms_ffn::layer_norm_velocity(&x, &y, &p)?;
            Ok(relative_error(&got, &fd, 1e-12))
        })
        .collect()
}

fn grad_model_config(variant: Variant, placement: LnPlacement, act: Activation) -> ModelConfig {
    ModelConfig {
        vocab: 5,
        max_len: 6,
        layers: 2,
        d_model: 8,
        heads: 2,
        d_ff: 16,
        ln_placement: placement,
        residual_variant: variant,
        theta_init: 0.4,
        gate_shape: GateShape::Scalar,
        activation: act,
        ..ModelConfig::default()
    }
}

fn model_grad(variant: Variant, placement: LnPlacement, act: Activation, samples: usize, seed: u64) -> Result<ModelGradReport> {
    let mut m = ModelParams::init(&grad_model_config(variant, placement, act), seed)?;
    // Move LN and bias parameters off their identity/zero init.
    let mut rng = Prng::new(seed ^ 0x9e37);
    let kinds: Vec<ParamKind> = m.tensors().iter().map(|(k, _)| *k).collect();
    for (t, k) in m.tensors_mut().into_iter().zip(&kinds) {
        if matches!(k, ParamKind::Norm | ParamKind::Bias) {
            for v in t.data_mut() {
                *v += 0.2 * rng.normal();
            }
        }
    }
    let batch: Vec<(Vec<usize>, Target)> = (0..2)
        .map(|_| ((0..6).map(|_| rng.below(5)).collect(), Target::Sequence(rng.below(5))))
        .collect();
    let f = ModelObjective { model: &m, batch: &batch };
    let gates = kinds
        .iter()
        .enumerate()
        .filter(|(_, k)| **k == ParamKind::Gate)
        .map(|(i, _)| i)
        .collect();
    let opts = GradCheckOptions {
        samples,
        seed,
        always_include: gates,
        ..GradCheckOptions::default()
    };
    let r = grad_check(&f, &f.tensors(), &opts)?;
    Ok(ModelGradReport {
        variant,
        placement,
        activation: act,
        checked: r.checks.len(),
        skipped: r.skipped.len(),
        max_rel_error: r.max_rel_error,
        pass: r.max_rel_error <= MODEL_GRAD_TOL && !r.checks.is_empty(),
    })
}

/// JVP suites for the velocity layers and the full-model gradient matrix
/// over every variant and LN placement.
pub fn gradcheck(s: &GradcheckSettings) -> Result<GradcheckReport> {
    let mut rng = Prng::new(s.seed);
    let ffn_velocity = JvpReport::new(&ffn_velocity_errors(&mut rng, s.jvp_instances, s.ffn_velocity)?, FFN_V_TOL);
    let ln_velocity = JvpReport::new(&ln_velocity_errors(&mut rng, s.jvp_instances)?, LN_V_TOL);
    let mut models = Vec::new();
    for (k, variant) in Variant::ALL.into_iter().enumerate() {
        for (j, placement) in [LnPlacement::Post, LnPlacement::Pre].into_iter().enumerate() {
            let seed = s.seed.wrapping_add(1 + 2 * k as u64 + j as u64);
            models.push(model_grad(variant, placement, Activation::Gelu, s.model_samples, seed)?);
        }
    }
    if s.relu {
        models.push(model_grad(Variant::Wave, LnPlacement::Pre, Activation::Relu, s.model_samples, s.seed.wrapping_add(100))?);
    }
    let pass = ffn_velocity.pass && ln_velocity.pass && models.iter().all(|m| m.pass);
    Ok(GradcheckReport {
        ffn_velocity,
        ln_velocity,
        models,
        pass,
    })
}

#[derive(Clone, Debug)]
pub struct BlockcheckSettings {
    pub seed: u64,
    pub instances: usize,
    pub taus: Vec<f64>,
    pub max_n: usize,
    pub max_d: usize,
    pub identity_instances: usize,
}

impl Default for BlockcheckSettings {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 100,
            taus: vec![0.1, 0.5, 0.9],
            max_n: 16,
            max_d: 32,
            identity_instances: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockcheckReport {
    /// Largest gap between the block functions and their element-wise restatement.
    pub table_fidelity: f64,
    /// Largest relative gap between two composed wave steps and the direct scheme.
    pub scheme_equivalence: f64,
    pub scheme_instances: usize,
    pub preln_identity: f64,
    pub identity_instances: usize,
    /// The three checks above at `n = 1`.
    pub single_token: f64,
    pub pass: bool,
}

fn random_block(rng: &mut Prng, d: usize, heads: usize, variant: Variant, tau: f64) -> BlockParams {
    let ln1 = random_ln(rng, d);
    let ln2 = random_ln(rng, d);
    BlockParams {
        attn: AttentionParams::random(rng, d, heads, 0.5, 0.5),
        ln1,
        ln2,
        ffn: random_ffn(rng, d, 2 * d, Activation::Gelu),
        step: StepConfig::new(variant, tau).with_theta(Matrix::filled(1, 1, rng.normal())),
        wavy: variant != Variant::Diffuse,
    }
}

fn layer_norm_oracle(x: &Matrix, p: &LayerNormParams) -> Matrix {
    let d = x.cols() as f64;
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let r = x.row(i);
        let mu = r.iter().sum::<f64>() / d;
        let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        (x.get(i, j) - mu) / (var + p.eps).sqrt() * p.gamma.get(0, j) + p.beta.get(0, j)
    })
}

fn layer_norm_velocity_oracle(x: &Matrix, y: &Matrix, p: &LayerNormParams) -> Matrix {
    let d = x.cols() as f64;
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let r = x.row(i);
        let mu = r.iter().sum::<f64>() / d;
        let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d;
        y.get(i, j) / (var + p.eps).sqrt() * p.gamma.get(0, j)
    })
}

fn pre_activation_oracle(x: &Matrix, p: &FfnParams, i: usize, k: usize) -> f64 {
    (0..x.cols()).map(|t| x.get(i, t) * p.w1.get(t, k)).sum::<f64>() + p.b1.get(0, k)
}

fn ffn_oracle(x: &Matrix, p: &FfnParams) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        p.b2.get(0, j)
            + (0..p.w1.cols())
                .map(|k| activation(pre_activation_oracle(x, p, i, k), p.activation) * p.w2.get(k, j))
                .sum::<f64>()
    })
}

fn ffn_velocity_oracle(x: &Matrix, y: &Matrix, p: &FfnParams) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        (0..p.w1.cols())
            .map(|k| {
                let yw: f64 = (0..x.cols()).map(|t| y.get(i, t) * p.w1.get(t, k)).sum();
                activation_derivative(pre_activation_oracle(x, p, i, k), p.activation) * yw * p.w2.get(k, j)
            })
            .sum::<f64>()
    })
}

fn residual_oracle(x: &Matrix, y: &Matrix, att: &Matrix, step: &StepConfig) -> (Matrix, Matrix) {
    let t = step.tau;
    let lam = sigmoid(step.theta.get(0, 0));
    let mut xo = Matrix::zeros(x.rows(), x.cols());
    let mut yo = y.clone();
    for i in 0..x.rows() {
        for j in 0..x.cols() {
            let (xv, yv, a) = (x.get(i, j), y.get(i, j), att.get(i, j));
            let (nx, ny) = match step.variant {
                Variant::Diffuse => (a + xv, yv),
                Variant::Wave => {
                    let ny = t * (a - xv) + yv;
                    (t * ny + xv, ny)
                }
                Variant::MixOutput => {
                    let ny = t * (a - xv) + yv;
                    (lam * (t * ny + xv) + (1.0 - lam) * (t * a + (1.0 - t) * xv), ny)
                }
                Variant::MixVelocity => {
                    let ny = lam * (t * (a - xv) + yv) + (1.0 - lam) * (a - xv);
                    (t * ny + xv, ny)
                }
            };
            xo.set(i, j, nx);
            yo.set(i, j, ny);
        }
    }
    (xo, yo)
}

fn add(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), a.cols(), |i, j| a.get(i, j) + b.get(i, j))
}

/// Element-wise restatement of one block (standard when `p.step.variant`
/// is diffuse, wavy otherwise). Attention itself is reused from
/// [`multi_head_attention`]. The standard blocks return `Y` unchanged.
pub fn line_by_line_block(x: &Matrix, y: &Matrix, p: &BlockParams, placement: LnPlacement) -> Result<(Matrix, Matrix)> {
    match placement {
        LnPlacement::Post => {
            let x1 = multi_head_attention(x, &p.attn)?;
            let (x2, y1) = residual_oracle(x, y, &x1, &p.step);
            let x3 = layer_norm_oracle(&x2, &p.ln1);
            let y2 = layer_norm_velocity_oracle(&x2, &y1, &p.ln1);
            let x5 = add(&x3, &ffn_oracle(&x3, &p.ffn));
            let y4 = add(&y2, &ffn_velocity_oracle(&x3, &y2, &p.ffn));
            let xo = layer_norm_oracle(&x5, &p.ln2);
            let yo = layer_norm_velocity_oracle(&x5, &y4, &p.ln2);
            if p.step.variant == Variant::Diffuse {
                return Ok((xo, y.clone()));
            }
            Ok((xo, yo))
        }
        LnPlacement::Pre => {
            let x1 = layer_norm_oracle(x, &p.ln1);
            let x2 = multi_head_attention(&x1, &p.attn)?;
            let (x3, y2) = residual_oracle(x, y, &x2, &p.step);
            let x4 = layer_norm_oracle(&x3, &p.ln2);
            let y3 = layer_norm_velocity_oracle(&x3, &y2, &p.ln2);
            let xo = add(&ffn_oracle(&x4, &p.ffn), &x3);
            if p.step.variant == Variant::Diffuse {
                return Ok((xo, y.clone()));
            }
            Ok((xo, add(&ffn_velocity_oracle(&x4, &y3, &p.ffn), &y2)))
        }
    }
}

fn block_gap(x: &Matrix, y: &Matrix, p: &BlockParams, placement: LnPlacement) -> Result<f64> {
    let (ox, oy) = line_by_line_block(x, y, p, placement)?;
    let (gx, gy) = match (p.step.variant, placement) {
        (Variant::Diffuse, LnPlacement::Post) => (post_ln_block(x, p)?, y.clone()),
        (Variant::Diffuse, LnPlacement::Pre) => (pre_ln_block(x, p)?, y.clone()),
        (_, LnPlacement::Post) => post_ln_wavy_block(x, y, p)?,
        (_, LnPlacement::Pre) => pre_ln_wavy_block(x, y, p)?,
    };
    Ok(gx.max_abs_diff(&ox).max(gy.max_abs_diff(&oy)))
}

fn table_fidelity(rng: &mut Prng, n: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for variant in Variant::ALL {
        for placement in [LnPlacement::Post, LnPlacement::Pre] {
            let p = random_block(rng, 6, 2, variant, 0.5);
            let x = gaussian_init(rng, n, 6, 1.0);
            let y = gaussian_init(rng, n, 6, 0.5);
            worst = worst.max(block_gap(&x, &y, &p, placement)?);
        }
    }
    Ok(worst)
}

/// Relative gap between two symplectic steps and one direct step.
fn scheme_gap(rng: &mut Prng, n: usize, d: usize, tau: f64) -> Result<f64> {
    let p = AttentionParams::random(rng, d, 1, 0.5, 1.0);
    let feats = gaussian_init(rng, n, d, 1.0);
    let a = attention_matrix(&feats, &p, 0)?;
    let s0 = DynamicsState::new(gaussian_init(rng, n, d, 1.0), gaussian_init(rng, n, d, 1.0))?;
    let s1 = wave_step(&s0, &a, tau)?;
    let s2 = wave_step(&s1, &a, tau)?;
    let direct = wave_step_direct(&s1.x, &s0.x, &a, tau)?;
    Ok(relative_error(&direct, &s2.x, 1e-300))
}

fn identity_gap(rng: &mut Prng, n: usize, d: usize) -> Result<f64> {
    let p = random_block(rng, d, 1, Variant::Diffuse, 0.5);
    let x = gaussian_init(rng, n, d, 1.0);
    preln_diffusion_reaction_check(&x, &p)
}

/// Table-fidelity oracles, the scheme-equivalence identity and the Pre-LN
/// diffusion-reaction identity, each also at `n = 1`.
pub fn blockcheck(s: &BlockcheckSettings) -> Result<BlockcheckReport> {
    let mut rng = Prng::new(s.seed);
    let table_fidelity = table_fidelity(&mut rng, 5)?;

    let mut scheme_equivalence = 0.0f64;
    let mut scheme_instances = 0;
    for k in 0..s.instances {
        let tau = s.taus[k % s.taus.len().max(1)];
        let (n, d) = (1 + rng.below(s.max_n), 1 + rng.below(s.max_d));
        scheme_equivalence = scheme_equivalence.max(scheme_gap(&mut rng, n, d, tau)?);
        scheme_instances += 1;
    }

    let mut preln_identity = 0.0f64;
    for _ in 0..s.identity_instances {
        let (n, d) = (1 + rng.below(s.max_n), 2 + rng.below(s.max_d - 1));
        preln_identity = preln_identity.max(identity_gap(&mut rng, n, d)?);
    }

    let single_token = table_fidelity_single(&mut rng, s)?;
    let pass = table_fidelity <= IDENTITY_TOL
        && scheme_equivalence <= SCHEME_TOL
        && preln_identity <= IDENTITY_TOL
        && single_token <= IDENTITY_TOL;
    Ok(BlockcheckReport {
        table_fidelity,
        scheme_equivalence,
        scheme_instances,
        preln_identity,
        identity_instances: s.identity_instances,
        single_token,
        pass,
    })
}

fn table_fidelity_single(rng: &mut Prng, s: &BlockcheckSettings) -> Result<f64> {
    let mut worst = table_fidelity(rng, 1)?;
    for &tau in &s.taus {
        worst = worst.max(scheme_gap(rng, 1, 4, tau)?);
    }
    Ok(worst.max(identity_gap(rng, 1, 4)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flipped(x: &Matrix, y: &Matrix, p: &FfnParams) -> Result<Matrix> {
        Ok(ffn_velocity(x, y, p)?.scale(-1.0))
    }

    #[test]
    fn gradcheck_defaults_pass() {
        let r = gradcheck(&GradcheckSettings {
            jvp_instances: 20,
            ..GradcheckSettings::default()
        })
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.models.len(), 9);
        assert!(r.models.iter().all(|m| m.checked >= 15));
    }

    #[test]
    fn wrong_sign_velocity_ffn_fails() {
        let r = gradcheck(&GradcheckSettings {
            jvp_instances: 5,
            model_samples: 1,
            relu: false,
            ffn_velocity: flipped,
            ..GradcheckSettings::default()
        })
        .unwrap();
        assert!(!r.pass);
        assert!(r.ffn_velocity.max_rel_error > 1e-1);
    }

    #[test]
    fn blockcheck_defaults_pass() {
        let r = blockcheck(&BlockcheckSettings::default()).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r.scheme_instances, 100);
    }

    #[test]
    fn large_tau_scheme_over_seeds() {
        for seed in 0..10 {
            let r = blockcheck(&BlockcheckSettings {
                seed,
                instances: 10,
                taus: vec![0.9],
                identity_instances: 2,
                ..BlockcheckSettings::default()
            })
            .unwrap();
            assert!(r.scheme_equivalence <= SCHEME_TOL, "seed {seed}: {}", r.scheme_equivalence);
        }
    }

    #[test]
    fn oracle_catches_wrong_block() {
        let mut rng = Prng::new(3);
        let p = random_block(&mut rng, 4, 1, Variant::Wave, 0.5);
        let x = gaussian_init(&mut rng, 3, 4, 1.0);
        let y = gaussian_init(&mut rng, 3, 4, 1.0);
        let (ox, _) = line_by_line_block(&x, &y, &p, LnPlacement::Post).unwrap();
        let (px, _) = pre_ln_wavy_block(&x, &y, &p).unwrap();
        assert!(ox.max_abs_diff(&px) > 1e-3);
    }
}
