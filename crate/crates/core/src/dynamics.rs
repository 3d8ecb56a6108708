//! Residual updates viewed as time steps of graph dynamics on the attention
//! graph: first-order diffusion, the second-order wave system in split and
//! direct form, and the two gated blends of the two.
//!
//! Here `A` is a fixed attention matrix and the feature transformation `W_V`
//! is left out; the full blocks in [`crate::blocks`] put it back.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMatrix;
use crate::error::{shape_err, Error, Result};
use crate::numerics::Matrix;

/// Magnitude beyond which a rollout is treated as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

/// Default time interval.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Diffuse,
    Wave,
    MixOutput,
    MixVelocity,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Diffuse,
        Variant::Wave,
        Variant::MixOutput,
        Variant::MixVelocity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Diffuse => "diffuse",
            Variant::Wave => "wave",
            Variant::MixOutput => "mix_output",
            Variant::MixVelocity => "mix_velocity",
        }
    }

    pub fn is_gated(self) -> bool {
        matches!(self, Variant::MixOutput | Variant::MixVelocity)
    }
}

/// Token states, velocities and (optionally) the previous states.
#[derive(Clone, Debug, PartialEq)]
pub struct DynamicsState {
    pub x: Matrix,
    pub y: Matrix,
    pub x_prev: Option<Matrix>,
}

impl DynamicsState {
    /// State at rest: `Y = 0`, no history.
    pub fn at_rest(x: Matrix) -> Self {
        let y = Matrix::zeros(x.rows(), x.cols());
        Self { x, y, x_prev: None }
    }

    pub fn new(x: Matrix, y: Matrix) -> Result<Self> {
        if x.shape() != y.shape() {
            return Err(shape_err(
                "DynamicsState",
                format!("x {:?} vs y {:?}", x.shape(), y.shape()),
            ));
        }
        Ok(Self { x, y, x_prev: None })
    }

    pub fn max_abs(&self) -> f64 {
        self.x.max_abs().max(self.y.max_abs())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepConfig {
    pub tau: f64,
    pub variant: Variant,
    /// Gate pre-activation: `1 x 1` (shared) or `1 x d` (per feature).
    pub theta: Matrix,
}

impl StepConfig {
    pub fn new(variant: Variant, tau: f64) -> Self {
        Self {
            tau,
            variant,
            theta: Matrix::zeros(1, 1),
        }
    }

    pub fn with_theta(mut self, theta: Matrix) -> Self {
        self.theta = theta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::InvalidArgument(format!("tau must be positive, got {}", self.tau)));
        }
        if self.theta.rows() != 1 || self.theta.cols() == 0 {
            return Err(shape_err("StepConfig", "theta must be a 1 x 1 or 1 x d row"));
        }
        Ok(())
    }

    /// `lambda = sigmoid(theta)` broadcast to `d` features.
    pub fn lambda(&self, d: usize) -> Result<Vec<f64>> {
        gate_lambda(&self.theta, d)
    }
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Gate values per feature from a shared or per-feature `theta`.
pub fn gate_lambda(theta: &Matrix, d: usize) -> Result<Vec<f64>> {
    match (theta.rows(), theta.cols()) {
        (1, 1) => Ok(vec![sigmoid(theta.get(0, 0)); d]),
        (1, c) if c == d => Ok(theta.data().iter().map(|&t| sigmoid(t)).collect()),
        s => Err(shape_err("gate", format!("theta {s:?} for {d} features"))),
    }
}

fn check_shapes(x: &Matrix, a: &AttentionMatrix, op: &'static str) -> Result<()> {
    if a.n() != x.rows() {
        return Err(shape_err(op, format!("A is {}x{} but X has {} rows", a.n(), a.n(), x.rows())));
    }
    Ok(())
}

/// `(A - I) X`.
fn laplacian_force(x: &Matrix, a: &AttentionMatrix) -> Result<Matrix> {
    a.apply(x)?.sub(x)
}

/// `tau A X + (1 - tau) X`.
pub fn diffuse_step(x: &Matrix, a: &AttentionMatrix, tau: f64) -> Result<Matrix> {
    check_shapes(x, a, "diffuse_step")?;
    let ax = a.apply(x)?;
    ax.zip_with(x, "diffuse_step", |ax, x| tau * ax + (1.0 - tau) * x)
}

/// Symplectic Euler step of the wave system: velocity first, then position.
///
/// `Y' = tau (A - I) X + Y`, `X' = tau Y' + X`. The returned state records
/// the input `X` as its history.
pub fn wave_step(s: &DynamicsState, a: &AttentionMatrix, tau: f64) -> Result<DynamicsState> {
    check_shapes(&s.x, a, "wave_step")?;
    let force = laplacian_force(&s.x, a)?;
    let y = force.zip_with(&s.y, "wave_step", |f, y| tau * f + y)?;
    let x = y.zip_with(&s.x, "wave_step", |y, x| tau * y + x)?;
    Ok(DynamicsState {
        x,
        y,
        x_prev: Some(s.x.clone()),
    })
}

/// Direct second-order discretization:
/// `tau^2 A X_l + (1 - tau^2) X_l + (X_l - X_{l-1})`.
pub fn wave_step_direct(
    x_curr: &Matrix,
    x_prev: &Matrix,
    a: &AttentionMatrix,
    tau: f64,
) -> Result<Matrix> {
    check_shapes(x_curr, a, "wave_step_direct")?;
    if x_prev.shape() != x_curr.shape() {
        return Err(shape_err("wave_step_direct", "history shape differs"));
    }
    let t2 = tau * tau;
    let ax = a.apply(x_curr)?;
    let mut out = Matrix::zeros(x_curr.rows(), x_curr.cols());
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        let x = x_curr.data()[k];
        *o = t2 * ax.data()[k] + (1.0 - t2) * x + (x - x_prev.data()[k]);
    }
    Ok(out)
}

fn blend_columns(lambda: &[f64], hi: &Matrix, lo: &Matrix) -> Result<Matrix> {
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

/// `X' = lambda X_wave + (1 - lambda) X_diffuse`; the velocity is the wave
/// branch's `Y'`.
pub fn mix_output_step(s: &DynamicsState, a: &AttentionMatrix, cfg: &StepConfig) -> Result<DynamicsState> {
    let lambda = cfg.lambda(s.x.cols())?;
    let wave = wave_step(s, a, cfg.tau)?;
    let diffuse = diffuse_step(&s.x, a, cfg.tau)?;
    Ok(DynamicsState {
        x: blend_columns(&lambda, &wave.x, &diffuse)?,
        y: wave.y,
        x_prev: Some(s.x.clone()),
    })
}

/// `Y' = lambda [tau (A - I) X + Y] + (1 - lambda) (A - I) X`, `X' = tau Y' + X`.
pub fn mix_velocity_step(s: &DynamicsState, a: &AttentionMatrix, cfg: &StepConfig) -> Result<DynamicsState> {
    check_shapes(&s.x, a, "mix_velocity_step")?;
    let lambda = cfg.lambda(s.x.cols())?;
    let tau = cfg.tau;
    let force = laplacian_force(&s.x, a)?;
    let wave_y = force.zip_with(&s.y, "mix_velocity_step", |f, y| tau * f + y)?;
    let y = blend_columns(&lambda, &wave_y, &force)?;
    let x = y.zip_with(&s.x, "mix_velocity_step", |y, x| tau * y + x)?;
    Ok(DynamicsState {
        x,
        y,
        x_prev: Some(s.x.clone()),
    })
}

/// One step of the configured variant. The diffusive step leaves `Y` as is.
pub fn step(s: &DynamicsState, a: &AttentionMatrix, cfg: &StepConfig) -> Result<DynamicsState> {
    match cfg.variant {
        Variant::Diffuse => Ok(DynamicsState {
            x: diffuse_step(&s.x, a, cfg.tau)?,
            y: s.y.clone(),
            x_prev: Some(s.x.clone()),
        }),
        Variant::Wave => wave_step(s, a, cfg.tau),
        Variant::MixOutput => mix_output_step(s, a, cfg),
        Variant::MixVelocity => mix_velocity_step(s, a, cfg),
    }
}

/// Iterates [`step`] under a frozen `A`. The trajectory includes `s0`, so it
/// has `steps + 1` entries.
pub fn rollout(
    s0: &DynamicsState,
    a: &AttentionMatrix,
    cfg: &StepConfig,
    steps: usize,
) -> Result<Vec<DynamicsState>> {
    cfg.validate()?;
    let mut traj = Vec::with_capacity(steps + 1);
    traj.push(s0.clone());
    for _ in 0..steps {
        let next = step(traj.last().expect("non-empty"), a, cfg)?;
        // Only the previous state is kept as history along a trajectory.
        let m = next.max_abs();
        if !m.is_finite() || m > DIVERGENCE_LIMIT {
            return Err(Error::NonFinite("rollout"));
        }
        traj.push(next);
    }
    Ok(traj)
}
