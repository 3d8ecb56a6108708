//! Over-smoothing and energy metrics, traces and their serialization.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionMatrix;
use crate::dynamics::{diffuse_step, DynamicsState};
use crate::error::{shape_err, Error, Result};
use crate::numerics::Matrix;

/// Symmetry tolerance for the energy functions.
pub const SYMMETRY_TOL: f64 = 1e-10;
/// Agreement required between the two forms of the potential.
pub const FORM_TOL: f64 = 1e-10;
/// Rows with a smaller norm are rejected by [`cosine_similarity`].
pub const ZERO_ROW: f64 = 1e-300;

pub const CSV_HEADER: &str = "step,cos_sim,potential_energy,wave_energy,deviation_norm,max_abs";

/// Mean pairwise cosine similarity over distinct rows.
pub fn cosine_similarity(x: &Matrix) -> Result<f64> {
    let n = x.rows();
    if n < 2 {
        return Err(Error::InvalidArgument("cosine similarity needs at least two rows".into()));
    }
    let mut unit = x.clone();
    for i in 0..n {
        let row = unit.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !(norm >= ZERO_ROW) {
            return Err(Error::ZeroRow(i));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += crate::numerics::dot(unit.row(i), unit.row(j));
            }
        }
    }
    Ok((total / (n * (n - 1)) as f64).clamp(-1.0, 1.0))
}

/// `X_bar = A X`.
pub fn attention_weighted_mean(x: &Matrix, a: &AttentionMatrix) -> Result<Matrix> {
    a.apply(x)
}

fn check_symmetric(a: &AttentionMatrix) -> Result<()> {
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::AsymmetricInput(asym));
    }
    Ok(())
}

/// Quadratic form `1/2 sum_ij X_i^T (I - A)_ij X_j`.
fn quadratic_potential(x: &Matrix, a: &AttentionMatrix) -> Result<f64> {
    let ax = a.apply(x)?;
    let cross: f64 = x.data().iter().zip(ax.data()).map(|(p, q)| p * q).sum();
    Ok(0.5 * (x.norm_sq() - cross))
}

/// Pairwise form `1/4 sum_ij A_ij |X_j - X_i|^2`.
fn pairwise_potential(x: &Matrix, a: &AttentionMatrix) -> f64 {
    let n = x.rows();
    let am = a.matrix();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let w = am.get(i, j);
            if w == 0.0 || i == j {
                continue;
            }
            let d2: f64 = x.row(i).iter().zip(x.row(j)).map(|(p, q)| (q - p) * (q - p)).sum();
            total += w * d2;
        }
    }
    0.25 * total
}

/// Dirichlet energy of `X` on the (symmetric) attention graph.
///
/// Both algebraic forms are evaluated; they must agree to [`FORM_TOL`]
/// relative to `max(|U|, |X|_F^2)`, the scale at which the quadratic form
/// cancels. The pairwise value is returned.
pub fn potential_energy(x: &Matrix, a_sym: &AttentionMatrix) -> Result<f64> {
    check_symmetric(a_sym)?;
    if x.rows() != a_sym.n() {
        return Err(shape_err("potential_energy", format!("A is {0}x{0}, X has {1} rows", a_sym.n(), x.rows())));
    }
    let quadratic = quadratic_potential(x, a_sym)?;
    let pairwise = pairwise_potential(x, a_sym);
    let scale = pairwise.abs().max(x.norm_sq()).max(f64::MIN_POSITIVE);
    if (quadratic - pairwise).abs() > FORM_TOL * scale || !pairwise.is_finite() {
        return Err(Error::FormMismatch { quadratic, pairwise });
    }
    Ok(pairwise)
}

/// `E = 1/2 sum_i |Y_i|^2 + U(X)`.
pub fn wave_energy(x: &Matrix, y: &Matrix, a_sym: &AttentionMatrix) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(shape_err("wave_energy", "X and Y shapes differ"));
    }
    Ok(0.5 * y.norm_sq() + potential_energy(x, a_sym)?)
}

/// `sum_i |X_bar_i - X_i|^2`.
pub fn deviation_sq(x: &Matrix, a: &AttentionMatrix) -> Result<f64> {
    Ok(a.apply(x)?.sub(x)?.norm_sq())
}

/// Forward-difference rate `(U(X') - U(X)) / tau` along one diffusion step.
pub fn potential_rate(x: &Matrix, a_sym: &AttentionMatrix, tau: f64) -> Result<f64> {
    let next = diffuse_step(x, a_sym, tau)?;
    Ok((potential_energy(&next, a_sym)? - potential_energy(x, a_sym)?) / tau)
}

/// `|(X' - A X) - (1 - tau)(X - A X)|_inf` for a diffusion step `X -> X'`.
pub fn deviation_contraction_residual(x_next: &Matrix, x: &Matrix, a: &AttentionMatrix, tau: f64) -> Result<f64> {
    if x_next.shape() != x.shape() {
        return Err(shape_err("deviation_contraction_residual", "states differ in shape"));
    }
    let ax = a.apply(x)?;
    let mut worst = 0.0f64;
    for k in 0..x.len() {
        let r = (x_next.data()[k] - ax.data()[k]) - (1.0 - tau) * (x.data()[k] - ax.data()[k]);
        worst = worst.max(r.abs());
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: usize,
    pub cos_sim: f64,
    pub potential_energy: Option<f64>,
    pub wave_energy: Option<f64>,
    pub deviation_norm: Option<f64>,
    pub max_abs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, r: TraceRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if r.step <= last.step {
                return Err(Error::InvalidArgument(format!("trace step {} after {}", r.step, last.step)));
            }
        }
        let vals = [Some(r.cos_sim), r.potential_energy, r.wave_energy, r.deviation_norm, Some(r.max_abs)];
        if vals.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("trace"));
        }
        self.records.push(r);
        Ok(())
    }

    pub fn column(&self, f: impl Fn(&TraceRecord) -> Option<f64>) -> Vec<f64> {
        self.records.iter().filter_map(f).collect()
    }
}

/// Metrics of one state of a frozen-attention trajectory.
pub fn state_record(step: usize, s: &DynamicsState, a_sym: &AttentionMatrix, with_velocity: bool) -> Result<TraceRecord> {
    let u = potential_energy(&s.x, a_sym)?;
    Ok(TraceRecord {
        step,
        cos_sim: cosine_similarity(&s.x)?,
        potential_energy: Some(u),
        wave_energy: with_velocity.then(|| 0.5 * s.y.norm_sq() + u),
        deviation_norm: Some(deviation_sq(&s.x, a_sym)?.sqrt()),
        max_abs: s.max_abs(),
    })
}

/// Trace of a rollout under a frozen symmetric `A`.
pub fn record_trace(states: &[DynamicsState], a_sym: &AttentionMatrix, with_velocity: bool) -> Result<Trace> {
    let mut t = Trace::default();
    for (k, s) in states.iter().enumerate() {
        t.push(state_record(k, s, a_sym, with_velocity)?)?;
    }
    Ok(t)
}

/// Trace of per-layer hidden states from a model forward pass; only the
/// attention-independent columns are filled.
pub fn record_model_trace(states: &[Matrix]) -> Result<Trace> {
    let mut t = Trace::default();
    for (k, x) in states.iter().enumerate() {
        t.push(TraceRecord {
            step: k,
            cos_sim: cosine_similarity(x)?,
            potential_energy: None,
            wave_energy: None,
            deviation_norm: None,
            max_abs: x.max_abs(),
        })?;
    }
    Ok(t)
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn csv_string(t: &Trace) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    let cell = |v: Option<f64>| v.map(format_f64).unwrap_or_default();
    for r in &t.records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.step,
            format_f64(r.cos_sim),
            cell(r.potential_energy),
            cell(r.wave_energy),
            cell(r.deviation_norm),
            format_f64(r.max_abs)
        );
    }
    s
}

pub fn emit_csv(t: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(csv_string(t).as_bytes())?;
    Ok(())
}

/// Parses the output of [`csv_string`].
pub fn parse_csv(text: &str) -> Result<Trace> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err(Error::Format("unexpected trace header".into()));
    }
    let num = |s: &str| -> Result<f64> { s.parse().map_err(|_| Error::Format(format!("bad number {s:?}"))) };
    let opt = |s: &str| -> Result<Option<f64>> { if s.is_empty() { Ok(None) } else { num(s).map(Some) } };
    let mut t = Trace::default();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Format(format!("expected 6 fields, got {}", f.len())));
        }
        t.push(TraceRecord {
            step: f[0].parse().map_err(|_| Error::Format(format!("bad step {:?}", f[0])))?,
            cos_sim: num(f[1])?,
            potential_energy: opt(f[2])?,
            wave_energy: opt(f[3])?,
            deviation_norm: opt(f[4])?,
            max_abs: num(f[5])?,
        })?;
    }
    Ok(t)
}

/// Per-experiment summary file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub config: serde_json::Value,
    pub metrics: serde_json::Value,
    pub wall_clock_secs: f64,
}

pub fn write_summary(s: &Summary, path: impl AsRef<Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(s).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
