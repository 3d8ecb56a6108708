use serde::{Deserialize, Serialize};

use super::{frozen_attention, DynamicsConfig};
use crate::attention::AttentionMatrix;
use crate::diagnostics::{cosine_similarity, potential_energy, wave_energy};
use crate::dynamics::{diffuse_step, wave_step, DynamicsState};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Largest per-step increase of `U` still counted as non-increasing.
pub const DISSIPATION_TOL: f64 = 1e-12;
pub const COS_SIM_TOL: f64 = 1e-6;
pub const BAND_LIMIT: f64 = 0.05;
pub const SLOPE_LIMIT: f64 = 1e-6;
pub const RATIO_RANGE: (f64, f64) = (1.5, 2.5);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionReport {
    pub tau: f64,
    pub steps: usize,
    pub initial_energy: f64,
    pub final_energy: f64,
    /// Steps where `U` grew by more than [`DISSIPATION_TOL`].
    pub violations: usize,
    pub max_increase: f64,
    pub final_cos_sim: f64,
    pub pass: bool,
}

/// Diffusion under frozen `A`: counts increases of the potential energy and
/// reports the final cosine similarity.
pub fn diffusion_suite(x0: &Matrix, a: &AttentionMatrix, tau: f64, steps: usize) -> Result<DiffusionReport> {
    let mut x = x0.clone();
    let initial_energy = potential_energy(&x, a)?;
    let mut prev = initial_energy;
    let (mut violations, mut max_increase) = (0, f64::NEG_INFINITY);
    for _ in 0..steps {
        x = diffuse_step(&x, a, tau)?;
        let u = potential_energy(&x, a)?;
        max_increase = max_increase.max(u - prev);
        if u - prev > DISSIPATION_TOL {
            violations += 1;
        }
        prev = u;
    }
    let final_cos_sim = cosine_similarity(&x)?;
    Ok(DiffusionReport {
        tau,
        steps,
        initial_energy,
        final_energy: prev,
        violations,
        max_increase: if steps == 0 { 0.0 } else { max_increase },
        final_cos_sim,
        pass: violations == 0 && final_cos_sim >= 1.0 - COS_SIM_TOL,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveBand {
    pub tau: f64,
    pub steps: usize,
    pub initial_energy: f64,
    /// `max_k |E_k - E_0| / E_0`.
    pub band: f64,
    /// Least-squares slope of `E_k` against `k`, divided by `E_0`.
    pub relative_slope: f64,
}

/// Energy excursion of the wave rollout started from rest at `x0`.
pub fn wave_band(x0: &Matrix, a: &AttentionMatrix, tau: f64, steps: usize) -> Result<WaveBand> {
    let mut s = DynamicsState::at_rest(x0.clone());
    let e0 = wave_energy(&s.x, &s.y, a)?;
    if !(e0 > 0.0) {
        return Err(Error::InvalidArgument("wave band needs positive initial energy".into()));
    }
    let mut band = 0.0f64;
    // Running sums for the regression of E on k.
    let (mut sk, mut se, mut skk, mut ske) = (0.0, e0, 0.0, 0.0);
    for k in 1..=steps {
        s = wave_step(&s, a, tau)?;
        let e = wave_energy(&s.x, &s.y, a)?;
        if !e.is_finite() {
            return Err(Error::NonFinite("wave_band"));
        }
        band = band.max((e - e0).abs() / e0);
        let kf = k as f64;
        sk += kf;
        se += e;
        skk += kf * kf;
        ske += kf * e;
    }
    let m = (steps + 1) as f64;
    let denom = m * skk - sk * sk;
    let slope = if denom > 0.0 { (m * ske - sk * se) / denom } else { 0.0 };
    Ok(WaveBand {
        tau,
        steps,
        initial_energy: e0,
        band,
        relative_slope: slope / e0,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WaveReport {
    pub full: WaveBand,
    /// Same horizon at half the step size.
    pub half: WaveBand,
    pub band_ratio: f64,
    pub band_ok: bool,
    pub drift_ok: bool,
    pub ratio_ok: bool,
    pub pass: bool,
}

pub fn wave_suite(x0: &Matrix, a: &AttentionMatrix, tau: f64, steps: usize) -> Result<WaveReport> {
    let full = wave_band(x0, a, tau, steps)?;
    let half = wave_band(x0, a, tau / 2.0, 2 * steps)?;
    let band_ratio = full.band / half.band;
    let band_ok = full.band < BAND_LIMIT;
    let drift_ok = full.relative_slope.abs() < SLOPE_LIMIT;
    let ratio_ok = (RATIO_RANGE.0..=RATIO_RANGE.1).contains(&band_ratio);
    Ok(WaveReport {
        full,
        half,
        band_ratio,
        band_ok,
        drift_ok,
        ratio_ok,
        pass: band_ok && drift_ok && ratio_ok,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub diffusion: DiffusionReport,
    pub wave: WaveReport,
    pub pass: bool,
}

/// Diffusion at `cfg.tau` for `cfg.steps` steps and the wave study at
/// `cfg.wave_tau` for `cfg.wave_steps`, both on the same frozen attention.
pub fn energy_suite(cfg: &DynamicsConfig) -> Result<EnergyReport> {
    let (x0, a) = frozen_attention(cfg)?;
    let diffusion = diffusion_suite(&x0, &a, cfg.tau, cfg.steps)?;
    let wave = wave_suite(&x0, &a, cfg.wave_tau, cfg.wave_steps)?;
    let pass = diffusion.pass && wave.pass;
    Ok(EnergyReport { diffusion, wave, pass })
}
