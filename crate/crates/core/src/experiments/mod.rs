//! Experiment drivers shared by the command line and the acceptance suite:
//! frozen-attention rollouts, the energy suite, layer-wise over-smoothing,
//! and the gradient and block identity checks.

mod checks;
mod energy;

pub use checks::{
    blockcheck, gradcheck, line_by_line_block, BlockcheckReport, BlockcheckSettings, GradcheckReport, GradcheckSettings, JvpReport,
    ModelGradReport, VelocityFfn,
};
pub use energy::{diffusion_suite, energy_suite, wave_band, wave_suite, DiffusionReport, EnergyReport, WaveBand, WaveReport};

use serde::{Deserialize, Serialize};

use crate::attention::{frozen_symmetric_attention, AttentionMatrix, AttentionParams, HeadParams};
use crate::blocks::{model_forward, ModelConfig, ModelParams};
use crate::diagnostics::{cosine_similarity, state_record, Trace};
use crate::dynamics::{step, DynamicsState, StepConfig, Variant, DIVERGENCE_LIMIT};
use crate::error::{Error, Result};
use crate::numerics::{gaussian_init, Matrix, Prng};

pub const SINKHORN_TOL: f64 = 1e-14;
pub const SINKHORN_MAX_ITER: usize = 100_000;

fn default_n() -> usize {
    32
}
fn default_d() -> usize {
    16
}
fn default_tau() -> f64 {
    0.5
}
fn default_qk_std() -> f64 {
    0.25
}
fn default_wave_tau() -> f64 {
    0.1
}
fn default_wave_steps() -> usize {
    10_000
}

/// Frozen-attention rollout settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_d")]
    pub d: usize,
    pub steps: usize,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub theta_init: f64,
    /// Std of the shared query/key projection.
    #[serde(default = "default_qk_std")]
    pub qk_std: f64,
    /// Step size and length of the wave-energy study.
    #[serde(default = "default_wave_tau")]
    pub wave_tau: f64,
    #[serde(default = "default_wave_steps")]
    pub wave_steps: usize,
}

impl DynamicsConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            n: default_n(),
            d: default_d(),
            steps,
            tau: default_tau(),
            seed: 0,
            variant: Variant::Diffuse,
            theta_init: 0.0,
            qk_std: default_qk_std(),
            wave_tau: default_wave_tau(),
            wave_steps: default_wave_steps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.d == 0 {
            return Err(Error::InvalidArgument("dynamics needs n >= 2 and d >= 1".into()));
        }
        for (name, v) in [("tau", self.tau), ("wave_tau", self.wave_tau), ("qk_std", self.qk_std)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidArgument(format!("{name} must be positive and finite")));
            }
        }
        if !self.theta_init.is_finite() {
            return Err(Error::InvalidArgument("theta_init must be finite".into()));
        }
        Ok(())
    }

    pub fn step_config(&self) -> StepConfig {
        StepConfig::new(self.variant, self.tau).with_theta(Matrix::filled(1, 1, self.theta_init))
    }
}

/// Seeded features `X0` and the frozen symmetric doubly stochastic attention
/// built from them. Queries and keys share one projection, so the score
/// kernel is symmetric before normalization.
pub fn frozen_attention(cfg: &DynamicsConfig) -> Result<(Matrix, AttentionMatrix)> {
    cfg.validate()?;
    let mut rng = Prng::new(cfg.seed);
    let x0 = gaussian_init(&mut rng, cfg.n, cfg.d, 1.0);
    let w = gaussian_init(&mut rng, cfg.d, cfg.d, cfg.qk_std);
    let p = AttentionParams::new(
        vec![HeadParams {
            wq: w.clone(),
            wk: w,
            wv: Matrix::identity(cfg.d),
        }],
        Matrix::identity(cfg.d),
    )?;
    let a = frozen_symmetric_attention(&x0, &p, SINKHORN_TOL, SINKHORN_MAX_ITER)?;
    Ok((x0, a))
}

#[derive(Clone, Debug)]
pub struct Simulation {
    pub trace: Trace,
    pub attention: AttentionMatrix,
    pub final_state: DynamicsState,
}

/// Rolls out `cfg.variant` from rest for `cfg.steps` steps, recording the
/// metrics of every state including the initial one.
pub fn simulate(cfg: &DynamicsConfig) -> Result<Simulation> {
    let (x0, a) = frozen_attention(cfg)?;
    let step_cfg = step_config_checked(cfg)?;
    let with_velocity = cfg.variant != Variant::Diffuse;
    let mut s = DynamicsState::at_rest(x0);
    let mut trace = Trace::default();
    trace.push(state_record(0, &s, &a, with_velocity)?)?;
    for k in 1..=cfg.steps {
        s = step(&s, &a, &step_cfg)?;
        let m = s.max_abs();
        if !m.is_finite() || m > DIVERGENCE_LIMIT {
            return Err(Error::NonFinite("simulate"));
        }
        trace.push(state_record(k, &s, &a, with_velocity)?)?;
    }
    Ok(Simulation {
        trace,
        attention: a,
        final_state: s,
    })
}

fn step_config_checked(cfg: &DynamicsConfig) -> Result<StepConfig> {
    let s = cfg.step_config();
    s.validate()?;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStat {
    pub layer: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OversmoothingReport {
    /// One entry per hidden-state snapshot (input plus every layer).
    pub layers: Vec<LayerStat>,
    /// `per_input[i][l]`: cosine similarity of input `i` at snapshot `l`.
    pub per_input: Vec<Vec<f64>>,
}

impl OversmoothingReport {
    pub fn means(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.mean).collect()
    }
}

/// Layer-wise cosine similarity of an untrained model over `inputs` seeded
/// random token sequences of length `seq_len`.
pub fn oversmoothing(
    model: &ModelConfig,
    model_seed: u64,
    inputs: usize,
    seq_len: usize,
    input_seed: u64,
) -> Result<OversmoothingReport> {
    if inputs == 0 || seq_len < 2 {
        return Err(Error::InvalidArgument("need at least one input of length >= 2".into()));
    }
    let m = ModelParams::init(model, model_seed)?;
    let mut rng = Prng::new(input_seed);
    let mut per_input = Vec::with_capacity(inputs);
    for _ in 0..inputs {
        let tokens: Vec<usize> = (0..seq_len).map(|_| rng.below(m.vocab())).collect();
        let out = model_forward(&tokens, &m)?;
        per_input.push(out.trace.iter().map(cosine_similarity).collect::<Result<Vec<_>>>()?);
    }
    let snapshots = per_input[0].len();
    let layers = (0..snapshots)
        .map(|l| {
            let vals: Vec<f64> = per_input.iter().map(|r| r[l]).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
            LayerStat {
                layer: l,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(OversmoothingReport { layers, per_input })
}
