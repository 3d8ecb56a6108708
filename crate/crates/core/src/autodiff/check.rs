use crate::error::{Error, Result};
use crate::numerics::{Matrix, Prng};

/// A scalar function of a list of tensors with an analytic gradient.
pub trait Differentiable {
    fn value(&self, params: &[Matrix]) -> Result<f64>;

    fn gradient(&self, params: &[Matrix]) -> Result<Vec<Matrix>>;

    /// Arguments of non-smooth points (ReLU pre-activations). Coordinates
    /// whose perturbation moves one of these across or near zero are skipped.
    fn kinks(&self, _params: &[Matrix]) -> Result<Vec<f64>> {
        Ok(Vec::new())
    }
}

/// Position of one scalar inside a list of tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub tensor: usize,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub eps: f64,
    pub seed: u64,
    /// Tensors that always get one sampled coordinate on top of `samples`.
    pub always_include: Vec<usize>,
    pub kink_margin: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            samples: 20,
            eps: 1e-5,
            seed: 0,
            always_include: Vec::new(),
            kink_margin: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordCheck {
    pub coord: Coord,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checks: Vec<CoordCheck>,
    pub skipped: Vec<Coord>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&CoordCheck> {
        self.checks.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn gradient_rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Uniformly sampled coordinates (weighted by tensor size) plus one per
/// tensor listed in `always_include`.
pub fn sample_coords(params: &[Matrix], opts: &GradCheckOptions) -> Vec<Coord> {
    let mut rng = Prng::new(opts.seed);
    let total: usize = params.iter().map(Matrix::len).sum();
    let mut out = Vec::with_capacity(opts.samples + opts.always_include.len());
    if total > 0 {
        for _ in 0..opts.samples {
            let mut k = rng.below(total);
            for (t, p) in params.iter().enumerate() {
                if k < p.len() {
                    out.push(Coord { tensor: t, index: k });
                    break;
                }
                k -= p.len();
            }
        }
    }
    for &t in &opts.always_include {
        if let Some(p) = params.get(t).filter(|p| !p.is_empty()) {
            out.push(Coord {
                tensor: t,
                index: rng.below(p.len()),
            });
        }
    }
    out
}

/// Compares the analytic gradient of `f` at `params` with central
/// differences on sampled coordinates.
pub fn grad_check(f: &impl Differentiable, params: &[Matrix], opts: &GradCheckOptions) -> Result<GradCheckReport> {
    grad_check_at(f, params, &sample_coords(params, opts), opts)
}

pub fn grad_check_at(
    f: &impl Differentiable,
    params: &[Matrix],
    coords: &[Coord],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !(1e-8..=1e-4).contains(&opts.eps) {
        return Err(Error::InvalidArgument(format!("finite-difference step {} outside [1e-8, 1e-4]", opts.eps)));
    }
    let grads = f.gradient(params)?;
    let mut report = GradCheckReport::default();
    let mut work = params.to_vec();
    for &c in coords {
        let base = params[c.tensor].data()[c.index];
        work[c.tensor].data_mut()[c.index] = base + opts.eps;
        let (up, kink_up) = (f.value(&work)?, f.kinks(&work)?);
        work[c.tensor].data_mut()[c.index] = base - opts.eps;
        let (down, kink_down) = (f.value(&work)?, f.kinks(&work)?);
        work[c.tensor].data_mut()[c.index] = base;

        let near_kink = kink_up.iter().zip(&kink_down).any(|(&p, &q)| {
            p != q && (p.signum() != q.signum() || p.abs().min(q.abs()) <= opts.kink_margin)
        });
        if near_kink {
            report.skipped.push(c);
            continue;
        }
        let numeric = (up - down) / (2.0 * opts.eps);
        let analytic = grads[c.tensor].data()[c.index];
        let rel_error = gradient_rel_error(analytic, numeric);
        report.max_rel_error = report.max_rel_error.max(rel_error);
        report.checks.push(CoordCheck {
            coord: c,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(report)
}
