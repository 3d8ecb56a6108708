use serde::{Deserialize, Serialize};

use super::{post_ln_block, post_ln_wavy_block, pre_ln_block, pre_ln_wavy_block, BlockParams};
use crate::attention::AttentionParams;
use crate::dynamics::{gate_lambda, StepConfig, Variant, DEFAULT_TAU};
use crate::error::{shape_err, Error, Result};
use crate::norms_ffn::{joint_layer_norm, layer_norm, Activation, FfnParams, LayerNormParams};
use crate::numerics::{gaussian_init, Matrix, Prng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LnPlacement {
    Post,
    Pre,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateShape {
    /// One `theta` shared by all features.
    Scalar,
    /// One `theta` per feature.
    Vector,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Positional {
    /// Trainable table.
    Learned,
    /// Fixed sinusoidal table, not trained.
    Sinusoidal,
}

/// Which layers run the wavy residual: `"all"` or a list of half-open
/// `[start, end)` layer ranges.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum WavyLayers {
    All(AllLayers),
    Ranges(Vec<[usize; 2]>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AllLayers {
    All,
}

impl WavyLayers {
    pub fn all() -> Self {
        WavyLayers::All(AllLayers::All)
    }

    /// The last `k` of `layers` layers.
    pub fn last(k: usize, layers: usize) -> Self {
        WavyLayers::Ranges(vec![[layers.saturating_sub(k), layers]])
    }

    pub fn contains(&self, layer: usize) -> bool {
        match self {
            WavyLayers::All(_) => true,
            WavyLayers::Ranges(r) => r.iter().any(|&[s, e]| (s..e).contains(&layer)),
        }
    }
}

impl Default for WavyLayers {
    fn default() -> Self {
        Self::all()
    }
}

/// Architecture and initialization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub ln_placement: LnPlacement,
    pub residual_variant: Variant,
    pub tau: f64,
    pub theta_init: f64,
    pub gate_shape: GateShape,
    pub wavy_layers: WavyLayers,
    pub activation: Activation,
    pub positional: Positional,
    pub ln_eps: f64,
    /// Standard deviation of the projection weights; `1/sqrt(d_model)` when absent.
    pub init_std: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab: 16,
            max_len: 16,
            layers: 4,
            d_model: 32,
            heads: 2,
            d_ff: 64,
            ln_placement: LnPlacement::Post,
            residual_variant: Variant::Diffuse,
            tau: DEFAULT_TAU,
            theta_init: 0.0,
            gate_shape: GateShape::Scalar,
            wavy_layers: WavyLayers::all(),
            activation: Activation::Gelu,
            positional: Positional::Learned,
            ln_eps: 1e-5,
            init_std: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab < 2 {
            return bad(format!("vocab must be at least 2, got {}", self.vocab));
        }
        if self.max_len == 0 || self.d_model == 0 || self.d_ff == 0 || self.heads == 0 {
            return bad("max_len, d_model, d_ff and heads must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        if let WavyLayers::Ranges(r) = &self.wavy_layers {
            if let Some(&[s, e]) = r.iter().find(|&&[s, e]| s >= e || e > self.layers) {
                return bad(format!("wavy layer range [{s}, {e}) is empty or exceeds {} layers", self.layers));
            }
        }
        Ok(())
    }

    fn std(&self) -> f64 {
        self.init_std.unwrap_or(1.0 / (self.d_model as f64).sqrt())
    }
}

/// Standard sinusoidal position table.
pub fn sinusoidal_positions(max_len: usize, d: usize) -> Matrix {
    Matrix::from_fn(max_len, d, |pos, j| {
        let freq = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let angle = pos as f64 * freq;
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Role of a tensor, used by the optimizer to decide on weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Embedding,
    Positional,
    Weight,
    Bias,
    Norm,
    Gate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// `V x d` token embedding.
    pub embedding: Matrix,
    /// `max_len x d` additive position table.
    pub positional: Matrix,
    pub positional_kind: Positional,
    pub layers: Vec<BlockParams>,
    pub final_ln: LayerNormParams,
    /// `d x V` output projection.
    pub head: Matrix,
    pub ln_placement: LnPlacement,
}

impl ModelParams {
    /// Seeded initialization.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Prng::new(seed);
        let d = cfg.d_model;
        let std = cfg.std();
        let embedding = gaussian_init(&mut rng, cfg.vocab, d, 1.0);
        let positional = match cfg.positional {
            Positional::Learned => gaussian_init(&mut rng, cfg.max_len, d, 0.1),
            Positional::Sinusoidal => sinusoidal_positions(cfg.max_len, d),
        };
        let gate_cols = match cfg.gate_shape {
            GateShape::Scalar => 1,
            GateShape::Vector => d,
        };
        let layers = (0..cfg.layers)
            .map(|l| {
                let attn = AttentionParams::random(&mut rng, d, cfg.heads, std, std);
                let ffn = FfnParams::random(&mut rng, d, cfg.d_ff, std, cfg.activation);
                let wavy = cfg.residual_variant != Variant::Diffuse && cfg.wavy_layers.contains(l);
                BlockParams {
                    attn,
                    ln1: LayerNormParams::identity(d, cfg.ln_eps),
                    ln2: LayerNormParams::identity(d, cfg.ln_eps),
                    ffn,
                    step: StepConfig::new(cfg.residual_variant, cfg.tau)
                        .with_theta(Matrix::filled(1, gate_cols, cfg.theta_init)),
                    wavy,
                }
            })
            .collect();
        let head = gaussian_init(&mut rng, d, cfg.vocab, std);
        let m = Self {
            embedding,
            positional,
            positional_kind: cfg.positional,
            layers,
            final_ln: LayerNormParams::identity(d, cfg.ln_eps),
            head,
            ln_placement: cfg.ln_placement,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    pub fn d_model(&self) -> usize {
        self.embedding.cols()
    }

    pub fn max_len(&self) -> usize {
        self.positional.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.d_model();
        if self.positional.cols() != d || self.head.rows() != d || self.final_ln.d() != d {
            return Err(shape_err("ModelParams", "embedding, positions, head and final LN widths disagree"));
        }
        for l in &self.layers {
            l.validate()?;
            if l.d_model() != d {
                return Err(shape_err("ModelParams", "layer width differs from embedding width"));
            }
        }
        Ok(())
    }

    /// Mean gate value over the gated layers, if any.
    pub fn lambda_mean(&self) -> Option<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for l in self.layers.iter().filter(|l| l.uses_velocity() && l.step.variant.is_gated()) {
            let lam = gate_lambda(&l.step.theta, l.step.theta.cols()).ok()?;
            total += lam.iter().sum::<f64>();
            count += lam.len();
        }
        (count > 0).then(|| total / count as f64)
    }

    /// Every tensor in declaration order (the serialization order).
    pub fn tensors(&self) -> Vec<(ParamKind, &Matrix)> {
        use ParamKind::*;
        let mut out = vec![(Embedding, &self.embedding), (Positional, &self.positional)];
        for l in &self.layers {
            for h in &l.attn.heads {
                out.extend([(Weight, &h.wq), (Weight, &h.wk), (Weight, &h.wv)]);
            }
            out.push((Weight, &l.attn.wo));
            out.extend([
                (Norm, &l.ln1.gamma),
                (Norm, &l.ln1.beta),
                (Norm, &l.ln2.gamma),
                (Norm, &l.ln2.beta),
                (Weight, &l.ffn.w1),
                (Bias, &l.ffn.b1),
                (Weight, &l.ffn.w2),
                (Bias, &l.ffn.b2),
                (Gate, &l.step.theta),
            ]);
        }
        out.extend([
            (Norm, &self.final_ln.gamma),
            (Norm, &self.final_ln.beta),
            (Weight, &self.head),
        ]);
        out
    }

    /// Mutable view in the same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.embedding, &mut self.positional];
        for l in &mut self.layers {
            for h in &mut l.attn.heads {
                out.extend([&mut h.wq, &mut h.wk, &mut h.wv]);
            }
            out.push(&mut l.attn.wo);
            out.extend([
                &mut l.ln1.gamma,
                &mut l.ln1.beta,
                &mut l.ln2.gamma,
                &mut l.ln2.beta,
                &mut l.ffn.w1,
                &mut l.ffn.b1,
                &mut l.ffn.w2,
                &mut l.ffn.b2,
                &mut l.step.theta,
            ]);
        }
        out.extend([&mut self.final_ln.gamma, &mut self.final_ln.beta, &mut self.head]);
        out
    }

    /// Copy with every tensor replaced, in [`ModelParams::tensors`] order.
    pub fn with_tensors(&self, tensors: &[Matrix]) -> Result<Self> {
        let mut out = self.clone();
        let slots = out.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(shape_err("with_tensors", format!("{} tensors for {} slots", tensors.len(), slots.len())));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(shape_err("with_tensors", format!("{:?} into {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        Ok(out)
    }

    /// Whether the tensor at position `index` of [`ModelParams::tensors`] is
    /// updated by training.
    pub fn trainable_mask(&self) -> Vec<bool> {
        self.tensors()
            .iter()
            .map(|(k, _)| match k {
                ParamKind::Positional => self.positional_kind == Positional::Learned,
                _ => true,
            })
            .collect()
    }
}

/// Result of [`model_forward`].
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `n x V` logits.
    pub logits: Matrix,
    /// Hidden states after the embedding and after every layer (`layers + 1` entries).
    pub trace: Vec<Matrix>,
    pub x: Matrix,
    /// Final velocity; zero when no layer is wavy.
    pub y: Matrix,
}

/// Embeds `tokens`, runs every layer in order and projects to logits.
///
/// The velocity starts at zero at the first wavy layer and passes unchanged
/// through non-wavy layers. Pre-LN stacks apply the final LN (jointly to the
/// velocity when one is present).
pub fn model_forward(tokens: &[usize], m: &ModelParams) -> Result<ForwardOutput> {
    let x = embed(tokens, m)?;
    let mut trace = Vec::with_capacity(m.layers.len() + 1);
    trace.push(x.clone());
    let mut x = x;
    let mut y: Option<Matrix> = None;
    for layer in &m.layers {
        if layer.uses_velocity() {
            let yv = y.take().unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
            let (nx, ny) = match m.ln_placement {
                LnPlacement::Post => post_ln_wavy_block(&x, &yv, layer)?,
                LnPlacement::Pre => pre_ln_wavy_block(&x, &yv, layer)?,
            };
            x = nx;
            y = Some(ny);
        } else {
            x = match m.ln_placement {
                LnPlacement::Post => post_ln_block(&x, layer)?,
                LnPlacement::Pre => pre_ln_block(&x, layer)?,
            };
        }
        trace.push(x.clone());
    }
    if m.ln_placement == LnPlacement::Pre {
        match y.take() {
            Some(yv) => {
                let (nx, ny) = joint_layer_norm(&x, &yv, &m.final_ln)?;
                x = nx;
                y = Some(ny);
            }
            None => x = layer_norm(&x, &m.final_ln)?,
        }
    }
    let logits = x.matmul(&m.head)?.ensure_finite("model_forward")?;
    let y = y.unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
    Ok(ForwardOutput { logits, trace, x, y })
}

/// Token embedding plus positions.
pub(crate) fn embed(tokens: &[usize], m: &ModelParams) -> Result<Matrix> {
    check_tokens(tokens, m)?;
    let d = m.d_model();
    let mut x = Matrix::zeros(tokens.len(), d);
    for (i, &t) in tokens.iter().enumerate() {
        for (j, o) in x.row_mut(i).iter_mut().enumerate() {
            *o = m.embedding.get(t, j) + m.positional.get(i, j);
        }
    }
    Ok(x)
}

pub(crate) fn check_tokens(tokens: &[usize], m: &ModelParams) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if tokens.len() > m.max_len() {
        return Err(Error::SequenceTooLong {
            len: tokens.len(),
            max: m.max_len(),
        });
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= m.vocab()) {
        return Err(Error::VocabOverflow { token: t, vocab: m.vocab() });
    }
    Ok(())
}
