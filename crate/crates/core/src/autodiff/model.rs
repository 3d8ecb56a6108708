use super::check::Differentiable;
use super::tape::{Tape, Var};
use crate::blocks::{model_forward, LnPlacement, ModelParams};
use crate::dynamics::Variant;
use crate::error::{Error, Result};
use crate::norms_ffn::Activation;
use crate::numerics::Matrix;

/// What a sequence is scored against.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Target {
    /// One label for the whole sequence, read from the mean of the
    /// per-position logits.
    Sequence(usize),
    /// Optional label per position.
    Positions(Vec<Option<usize>>),
}

impl Target {
    pub fn check(&self, len: usize) -> Result<()> {
        match self {
            Target::Sequence(_) => Ok(()),
            Target::Positions(t) if t.len() != len => Err(Error::InvalidArgument(format!(
                "{} targets for {} positions",
                t.len(),
                len
            ))),
            Target::Positions(t) if t.iter().all(Option::is_none) => {
                Err(Error::InvalidArgument("no position carries a target".into()))
            }
            Target::Positions(_) => Ok(()),
        }
    }
}

/// Handles into a model forward pass recorded on a tape.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    /// Leaves in [`ModelParams::tensors`] order.
    pub params: Vec<Var>,
    pub logits: Var,
    pub x: Var,
    pub y: Option<Var>,
    /// Every FFN pre-activation node.
    pub pre_activations: Vec<Var>,
}

struct Layer<'a> {
    tape: &'a mut Tape,
    pre_activations: &'a mut Vec<Var>,
}

impl Layer<'_> {
    fn attention(&mut self, x: Var, p: &[Var], heads: usize, scale: f64) -> Result<Var> {
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (wq, wk, wv) = (p[3 * h], p[3 * h + 1], p[3 * h + 2]);
            let q = self.tape.matmul(x, wq)?;
            let k = self.tape.matmul(x, wk)?;
            let s = self.tape.matmul_nt(q, k)?;
            let s = self.tape.scale(s, 1.0 / scale);
            let a = self.tape.row_softmax(s)?;
            let ax = self.tape.matmul(a, x)?;
            outs.push(self.tape.matmul(ax, wv)?);
        }
        let cat = self.tape.concat_cols(&outs)?;
        self.tape.matmul(cat, p[3 * heads])
    }

    fn pre_activation(&mut self, x: Var, w1: Var, b1: Var) -> Result<Var> {
        let xw = self.tape.matmul(x, w1)?;
        let z = self.tape.add_row(xw, b1)?;
        self.pre_activations.push(z);
        Ok(z)
    }

    fn ffn(&mut self, x: Var, f: &[Var], act: Activation) -> Result<Var> {
        let z = self.pre_activation(x, f[0], f[1])?;
        let h = self.tape.activation(z, act);
        let o = self.tape.matmul(h, f[2])?;
        self.tape.add_row(o, f[3])
    }

    fn ffn_velocity(&mut self, x: Var, y: Var, f: &[Var], act: Activation) -> Result<Var> {
        let z = self.pre_activation(x, f[0], f[1])?;
        let slope = self.tape.activation_derivative(z, act);
        let yw = self.tape.matmul(y, f[0])?;
        let h = self.tape.hadamard(slope, yw)?;
        self.tape.matmul(h, f[2])
    }

    fn ln(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Result<Var> {
        self.tape.layer_norm(x, g, b, eps)
    }

    fn joint_ln(&mut self, x: Var, y: Var, g: Var, b: Var, eps: f64) -> Result<(Var, Var)> {
        Ok((self.tape.layer_norm(x, g, b, eps)?, self.tape.layer_norm_velocity(x, y, g, eps)?))
    }

    fn residual(&mut self, x: Var, y: Var, att: Var, variant: Variant, tau: f64, theta: Var) -> Result<(Var, Var)> {
        let force = self.tape.sub(att, x)?;
        let scaled = self.tape.scale(force, tau);
        match variant {
            Variant::Wave => {
                let y1 = self.tape.add(scaled, y)?;
                let ty = self.tape.scale(y1, tau);
                Ok((self.tape.add(ty, x)?, y1))
            }
            Variant::MixOutput => {
                let y1 = self.tape.add(scaled, y)?;
                let ty = self.tape.scale(y1, tau);
                let x_wave = self.tape.add(ty, x)?;
                let scaled_again = self.tape.scale(force, tau);
                let x_diffuse = self.tape.add(scaled_again, x)?;
                Ok((self.tape.blend(x_wave, x_diffuse, theta)?, y1))
            }
            Variant::MixVelocity => {
                let wave_y = self.tape.add(scaled, y)?;
                let y1 = self.tape.blend(wave_y, force, theta)?;
                let ty = self.tape.scale(y1, tau);
                Ok((self.tape.add(ty, x)?, y1))
            }
            Variant::Diffuse => Err(Error::InvalidArgument("the diffusive residual has no velocity stage".into())),
        }
    }
}

/// Records the forward pass of `m` on `tokens`. Mirrors
/// [`model_forward`] operation by operation.
pub fn tape_forward(tape: &mut Tape, tokens: &[usize], m: &ModelParams) -> Result<ModelGraph> {
    crate::blocks::check_tokens(tokens, m)?;
    let params: Vec<Var> = m.tensors().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let n = tokens.len();
    let d = m.d_model();

    let emb = tape.gather(params[0], tokens)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.gather(params[1], &positions)?;
    let mut x = tape.add(emb, pos)?;
    let mut y: Option<Var> = None;

    let mut pre_activations = Vec::new();
    let mut cursor = 2;
    for layer in &m.layers {
        let heads = layer.attn.heads.len();
        let width = 3 * heads + 1 + 4 + 4 + 1;
        let p = &params[cursor..cursor + width];
        cursor += width;
        let attn = &p[..3 * heads + 1];
        let (ln1g, ln1b, ln2g, ln2b) = (p[3 * heads + 1], p[3 * heads + 2], p[3 * heads + 3], p[3 * heads + 4]);
        let ffn = &p[3 * heads + 5..3 * heads + 9];
        let theta = p[3 * heads + 9];
        let scale = layer.attn.scale();
        let act = layer.ffn.activation;
        let (e1, e2) = (layer.ln1.eps, layer.ln2.eps);
        let mut b = Layer {
            tape: &mut *tape,
            pre_activations: &mut pre_activations,
        };

        if layer.uses_velocity() {
            let yv = match y.take() {
                Some(v) => v,
                None => b.tape.leaf(Matrix::zeros(n, d)),
            };
            let (variant, tau) = (layer.step.variant, layer.step.tau);
            let (nx, ny) = match m.ln_placement {
                LnPlacement::Post => {
                    let x1 = b.attention(x, attn, heads, scale)?;
                    let (x2, y1) = b.residual(x, yv, x1, variant, tau, theta)?;
                    let (x3, y2) = b.joint_ln(x2, y1, ln1g, ln1b, e1)?;
                    let x4 = b.ffn(x3, ffn, act)?;
                    let y3 = b.ffn_velocity(x3, y2, ffn, act)?;
                    let x5 = b.tape.add(x3, x4)?;
                    let y4 = b.tape.add(y2, y3)?;
                    b.joint_ln(x5, y4, ln2g, ln2b, e2)?
                }
                LnPlacement::Pre => {
                    let x1 = b.ln(x, ln1g, ln1b, e1)?;
                    let x2 = b.attention(x1, attn, heads, scale)?;
                    let (x3, y2) = b.residual(x, yv, x2, variant, tau, theta)?;
                    let (x4, y3) = b.joint_ln(x3, y2, ln2g, ln2b, e2)?;
                    let x5 = b.ffn(x4, ffn, act)?;
                    let y4 = b.ffn_velocity(x4, y3, ffn, act)?;
                    (b.tape.add(x5, x3)?, b.tape.add(y4, y2)?)
                }
            };
            x = nx;
            y = Some(ny);
        } else {
            x = match m.ln_placement {
                LnPlacement::Post => {
                    let x1 = b.attention(x, attn, heads, scale)?;
                    let x2 = b.tape.add(x1, x)?;
                    let x3 = b.ln(x2, ln1g, ln1b, e1)?;
                    let x4 = b.ffn(x3, ffn, act)?;
                    let x5 = b.tape.add(x3, x4)?;
                    b.ln(x5, ln2g, ln2b, e2)?
                }
                LnPlacement::Pre => {
                    let x1 = b.ln(x, ln1g, ln1b, e1)?;
                    let x2 = b.attention(x1, attn, heads, scale)?;
                    let x3 = b.tape.add(x, x2)?;
                    let x4 = b.ln(x3, ln2g, ln2b, e2)?;
                    let x5 = b.ffn(x4, ffn, act)?;
                    b.tape.add(x5, x3)?
                }
            };
        }
    }
    let (fg, fb, head) = (params[cursor], params[cursor + 1], params[cursor + 2]);
    if m.ln_placement == LnPlacement::Pre {
        let eps = m.final_ln.eps;
        match y.take() {
            Some(yv) => {
                let nx = tape.layer_norm(x, fg, fb, eps)?;
                y = Some(tape.layer_norm_velocity(x, yv, fg, eps)?);
                x = nx;
            }
            None => x = tape.layer_norm(x, fg, fb, eps)?,
        }
    }
    let logits = tape.matmul(x, head)?;
    Ok(ModelGraph {
        params,
        logits,
        x,
        y,
        pre_activations,
    })
}

/// Appends the loss of `target` on the recorded logits.
pub fn tape_loss(tape: &mut Tape, logits: Var, target: &Target) -> Result<Var> {
    target.check(tape.value(logits).rows())?;
    match target {
        Target::Sequence(t) => {
            let pooled = tape.mean_rows(logits);
            tape.cross_entropy(pooled, &[Some(*t)])
        }
        Target::Positions(t) => tape.cross_entropy(logits, t),
    }
}

/// Mean negative log-likelihood over the rows that carry a target.
pub fn cross_entropy(logits: &Matrix, targets: &[Option<usize>]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, t) in targets.iter().enumerate() {
        let Some(t) = *t else { continue };
        let row = logits.row(i);
        if t >= row.len() {
            return Err(Error::VocabOverflow { token: t, vocab: row.len() });
        }
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArgument("cross entropy without targets".into()));
    }
    Ok(total / count as f64)
}

/// Logits the loss is computed from: pooled for sequence targets.
pub fn scored_logits(logits: &Matrix, target: &Target) -> (Matrix, Vec<Option<usize>>) {
    match target {
        Target::Sequence(t) => (logits.mean_rows(), vec![Some(*t)]),
        Target::Positions(t) => (logits.clone(), t.clone()),
    }
}

/// Loss through the plain (non-recording) forward pass.
pub fn model_loss(m: &ModelParams, tokens: &[usize], target: &Target) -> Result<f64> {
    target.check(tokens.len())?;
    let out = model_forward(tokens, m)?;
    let (l, t) = scored_logits(&out.logits, target);
    cross_entropy(&l, &t)
}

/// Loss and gradient for every tensor, in [`ModelParams::tensors`] order.
pub fn model_loss_and_grad(m: &ModelParams, tokens: &[usize], target: &Target) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let g = tape_forward(&mut tape, tokens, m)?;
    let loss = tape_loss(&mut tape, g.logits, target)?;
    let mut grads = tape.backward(loss)?;
    let out = g
        .params
        .iter()
        .map(|&v| {
            let (r, c) = tape.value(v).shape();
            grads.take_or_zeros(v, r, c)
        })
        .collect();
    Ok((tape.scalar(loss), out))
}

/// A model loss on a fixed batch, as a function of the model tensors.
pub struct ModelObjective<'a> {
    pub model: &'a ModelParams,
    pub batch: &'a [(Vec<usize>, Target)],
}

impl ModelObjective<'_> {
    pub fn tensors(&self) -> Vec<Matrix> {
        self.model.tensors().into_iter().map(|(_, t)| t.clone()).collect()
    }
}

impl Differentiable for ModelObjective<'_> {
    fn value(&self, params: &[Matrix]) -> Result<f64> {
        let m = self.model.with_tensors(params)?;
        let mut total = 0.0;
        for (tokens, target) in self.batch {
            total += model_loss(&m, tokens, target)?;
        }
        Ok(total / self.batch.len() as f64)
    }

    fn gradient(&self, params: &[Matrix]) -> Result<Vec<Matrix>> {
        let m = self.model.with_tensors(params)?;
        let mut acc: Option<Vec<Matrix>> = None;
        for (tokens, target) in self.batch {
            let (_, g) = model_loss_and_grad(&m, tokens, target)?;
            match &mut acc {
                None => acc = Some(g),
                Some(a) => {
                    for (p, q) in a.iter_mut().zip(&g) {
                        p.add_scaled_assign(q, 1.0)?;
                    }
                }
            }
        }
        let scale = 1.0 / self.batch.len() as f64;
        Ok(acc.unwrap_or_default().into_iter().map(|g| g.scale(scale)).collect())
    }

    fn kinks(&self, params: &[Matrix]) -> Result<Vec<f64>> {
        let m = self.model.with_tensors(params)?;
        if m.layers.iter().all(|l| l.ffn.activation != Activation::Relu) {
            return Ok(Vec::new());
        }
        let mut out = Vec::new();
        for (tokens, _) in self.batch {
            let mut tape = Tape::new();
            let g = tape_forward(&mut tape, tokens, &m)?;
            for z in g.pre_activations {
                out.extend_from_slice(tape.value(z).data());
            }
        }
        Ok(out)
    }
}
