//! Scaled dot-product attention and the frozen, symmetrized attention
//! matrices used by the dynamics diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{gaussian_init, row_softmax, Matrix, Prng};

/// Tolerance on row sums accepted by [`AttentionMatrix::new`].
pub const STOCHASTIC_TOL: f64 = 1e-10;

/// Query/key/value projections of one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    /// `(H * d_h) x d` output projection.
    pub wo: Matrix,
}

impl AttentionParams {
    pub fn new(heads: Vec<HeadParams>, wo: Matrix) -> Result<Self> {
        let p = Self { heads, wo };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self
            .heads
            .first()
            .ok_or_else(|| shape_err("AttentionParams", "no heads"))?;
        let d = first.wq.rows();
        let (dk, dh) = (first.wq.cols(), first.wv.cols());
        for (i, h) in self.heads.iter().enumerate() {
            if h.wq.shape() != (d, dk) || h.wk.shape() != (d, dk) || h.wv.shape() != (d, dh) {
                return Err(shape_err(
                    "AttentionParams",
                    format!("head {i} has inconsistent projection shapes"),
                ));
            }
        }
        if self.wo.shape() != (self.heads.len() * dh, d) {
            return Err(shape_err(
                "AttentionParams",
                format!(
                    "Wo is {:?}, expected ({}, {d})",
                    self.wo.shape(),
                    self.heads.len() * dh
                ),
            ));
        }
        Ok(())
    }

    /// Gaussian initialization with `d_k = d_h = d / heads`.
    pub fn random(prng: &mut Prng, d: usize, heads: usize, qk_std: f64, v_std: f64) -> Self {
        assert!(heads > 0 && d % heads == 0, "d must be divisible by heads");
        let dh = d / heads;
        let heads_v = (0..heads)
            .map(|_| HeadParams {
                wq: gaussian_init(prng, d, dh, qk_std),
                wk: gaussian_init(prng, d, dh, qk_std),
                wv: gaussian_init(prng, d, dh, v_std),
            })
            .collect();
        let wo = gaussian_init(prng, d, d, v_std);
        Self { heads: heads_v, wo }
    }

    /// Single head with the given projections and `Wo = I`.
    pub fn single_head(wq: Matrix, wk: Matrix, wv: Matrix) -> Result<Self> {
        let dh = wv.cols();
        Self::new(vec![HeadParams { wq, wk, wv }], Matrix::identity(dh))
    }

    pub fn d_model(&self) -> usize {
        self.heads[0].wq.rows()
    }

    pub fn d_k(&self) -> usize {
        self.heads[0].wq.cols()
    }

    pub fn d_h(&self) -> usize {
        self.heads[0].wv.cols()
    }

    pub fn scale(&self) -> f64 {
        (self.d_k() as f64).sqrt()
    }

    fn head(&self, head: usize) -> Result<&HeadParams> {
        self.heads.get(head).ok_or_else(|| {
            Error::InvalidArgument(format!("head {head} of {}", self.heads.len()))
        })
    }
}

/// Right-stochastic `n x n` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix(Matrix);

impl AttentionMatrix {
    /// Validates nonnegativity and unit row sums (within [`STOCHASTIC_TOL`]).
    pub fn new(a: Matrix) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(shape_err("AttentionMatrix", format!("{:?} is not square", a.shape())));
        }
        if !a.is_finite() {
            return Err(Error::NonFinite("AttentionMatrix"));
        }
        for (i, r) in a.row_iter().enumerate() {
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > STOCHASTIC_TOL || r.iter().any(|&v| !(-1e-15..=1.0 + 1e-15).contains(&v)) {
                return Err(Error::InvalidArgument(format!(
                    "row {i} is not a probability vector (sum {s})"
                )));
            }
        }
        Ok(Self(a))
    }

    pub fn uniform(n: usize) -> Self {
        Self(Matrix::filled(n, n, 1.0 / n as f64))
    }

    pub fn identity(n: usize) -> Self {
        Self(Matrix::identity(n))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    /// `max |A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.n();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i + 1..n {
                worst = worst.max((self.0.get(i, j) - self.0.get(j, i)).abs());
            }
        }
        worst
    }

    /// Largest deviation of any row or column sum from one.
    pub fn stochastic_residual(&self) -> f64 {
        let n = self.n();
        let mut worst = 0.0f64;
        for i in 0..n {
            let row: f64 = self.0.row(i).iter().sum();
            let col: f64 = (0..n).map(|k| self.0.get(k, i)).sum();
            worst = worst.max((row - 1.0).abs()).max((col - 1.0).abs());
        }
        worst
    }

    /// `A X`.
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        self.0.matmul(x)
    }
}

fn check_input(x: &Matrix, p: &AttentionParams) -> Result<()> {
    if x.cols() != p.d_model() {
        return Err(shape_err(
            "attention",
            format!("input has {} features, params expect {}", x.cols(), p.d_model()),
        ));
    }
    Ok(())
}

/// `softmax(X Wq (X Wk)^T / sqrt(d_k))` for one head.
pub fn attention_matrix(x: &Matrix, p: &AttentionParams, head: usize) -> Result<AttentionMatrix> {
    check_input(x, p)?;
    let h = p.head(head)?;
    let q = x.matmul(&h.wq)?;
    let k = x.matmul(&h.wk)?;
    let logits = q.matmul_nt(&k)?.scale(1.0 / p.scale());
    Ok(AttentionMatrix(row_softmax(&logits)?))
}

/// `A X Wv` for one head.
pub fn attention(x: &Matrix, p: &AttentionParams, head: usize) -> Result<Matrix> {
    let a = attention_matrix(x, p, head)?;
    let h = p.head(head)?;
    a.apply(x)?.matmul(&h.wv)?.ensure_finite("attention")
}

/// Per-head outputs concatenated in head order, then projected by `Wo`.
pub fn multi_head_attention(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    check_input(x, p)?;
    let outs = (0..p.heads.len())
        .map(|h| attention(x, p, h))
        .collect::<Result<Vec<_>>>()?;
    Matrix::concat_cols(&outs)?.matmul(&p.wo)
}

/// Attention matrix frozen at the initial features and made symmetric and
/// doubly stochastic.
///
/// The head matrices are averaged, symmetrized as `(A + A^T) / 2`, and then
/// scaled as `D A D` with `D = diag(rowsum)^{-1/2}` until every row and column
/// sum is within `tol` of one. The symmetric scaling is the Sinkhorn iteration
/// specialised to symmetric input: it keeps the iterate exactly symmetric, so
/// the result has a real spectrum in `[-1, 1]`.
pub fn frozen_symmetric_attention(
    x0: &Matrix,
    p: &AttentionParams,
    tol: f64,
    max_iter: usize,
) -> Result<AttentionMatrix> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument(format!("tol must be positive, got {tol}")));
    }
    let n = x0.rows();
    let mut mean = Matrix::zeros(n, n);
    for h in 0..p.heads.len() {
        mean.add_scaled_assign(attention_matrix(x0, p, h)?.matrix(), 1.0 / p.heads.len() as f64)?;
    }
    sinkhorn_symmetric(&mean, tol, max_iter)
}

/// Symmetric Sinkhorn scaling of a nonnegative square matrix; see
/// [`frozen_symmetric_attention`].
pub fn sinkhorn_symmetric(a: &Matrix, tol: f64, max_iter: usize) -> Result<AttentionMatrix> {
    let n = a.rows();
    let mut s = Matrix::from_fn(n, n, |i, j| 0.5 * (a.get(i, j) + a.get(j, i)));
    let mut residual = f64::INFINITY;
    for _ in 0..=max_iter {
        let sums: Vec<f64> = s.row_iter().map(|r| r.iter().sum()).collect();
        // Row sums equal column sums for a symmetric matrix.
        residual = sums.iter().fold(0.0f64, |m, v| m.max((v - 1.0).abs()));
        if residual <= tol {
            return Ok(AttentionMatrix(s));
        }
        let d: Vec<f64> = sums.iter().map(|v| 1.0 / v.sqrt()).collect();
        for i in 0..n {
            for j in 0..n {
                let v = s.get(i, j) * (d[i] * d[j]);
                s.set(i, j, v);
            }
        }
        if !s.is_finite() {
            return Err(Error::NonFinite("sinkhorn_symmetric"));
        }
    }
    Err(Error::SinkhornNoConvergence {
        iterations: max_iter,
        residual,
    })
}
