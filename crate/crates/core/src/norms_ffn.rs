//! Layer normalization and the position-wise feed-forward network, each with
//! a velocity counterpart that carries `Y = dX/dt` through the layer.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::numerics::{gaussian_init, Matrix, Prng};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    /// `1 x d` gain.
    pub gamma: Matrix,
    /// `1 x d` shift.
    pub beta: Matrix,
    pub eps: f64,
}

impl LayerNormParams {
    /// `gamma = 1`, `beta = 0`.
    pub fn identity(d: usize, eps: f64) -> Self {
        Self {
            gamma: Matrix::filled(1, d, 1.0),
            beta: Matrix::zeros(1, d),
            eps,
        }
    }

    pub fn d(&self) -> usize {
        self.gamma.cols()
    }

    fn check(&self, d: usize, op: &'static str) -> Result<()> {
        if self.gamma.shape() != (1, d) || self.beta.shape() != (1, d) {
            return Err(shape_err(op, format!("LN params sized {} for {d} features", self.d())));
        }
        Ok(())
    }
}

/// Mean and biased (divisor `d`) variance of a feature row.
pub fn row_stats(x: &[f64]) -> (f64, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, var)
}

pub fn layer_norm_row(x: &[f64], p: &LayerNormParams) -> Vec<f64> {
    let (mean, var) = row_stats(x);
    let inv = 1.0 / (var + p.eps).sqrt();
    x.iter()
        .zip(p.gamma.data())
        .zip(p.beta.data())
        .map(|((&v, &g), &b)| (v - mean) * inv * g + b)
        .collect()
}

/// Velocity normalization: `y / sqrt(var(x) + eps) * gamma`. The statistics
/// come from the state row; no mean is removed and no shift is added.
pub fn layer_norm_velocity_row(x: &[f64], y: &[f64], p: &LayerNormParams) -> Vec<f64> {
    let (_, var) = row_stats(x);
    let inv = 1.0 / (var + p.eps).sqrt();
    y.iter()
        .zip(p.gamma.data())
        .map(|(&v, &g)| v * inv * g)
        .collect()
}

pub fn layer_norm(x: &Matrix, p: &LayerNormParams) -> Result<Matrix> {
    p.check(x.cols(), "layer_norm")?;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        out.row_mut(i).copy_from_slice(&layer_norm_row(x.row(i), p));
    }
    Ok(out)
}

pub fn layer_norm_velocity(x: &Matrix, y: &Matrix, p: &LayerNormParams) -> Result<Matrix> {
    p.check(x.cols(), "layer_norm_velocity")?;
    if x.shape() != y.shape() {
        return Err(shape_err("layer_norm_velocity", "state and velocity shapes differ"));
    }
    let mut out = Matrix::zeros(y.rows(), y.cols());
    for i in 0..x.rows() {
        out.row_mut(i)
            .copy_from_slice(&layer_norm_velocity_row(x.row(i), y.row(i), p));
    }
    Ok(out)
}

/// LN on the state stream and LN_v on the velocity stream, both using the
/// state's statistics.
pub fn joint_layer_norm(x: &Matrix, y: &Matrix, p: &LayerNormParams) -> Result<(Matrix, Matrix)> {
    Ok((layer_norm(x, p)?, layer_norm_velocity(x, y, p)?))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    /// Exact `z * Phi(z)`.
    Gelu,
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + libm::erf(z / SQRT_2))
}

fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

pub fn activation(z: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Relu => z.max(0.0),
        Activation::Gelu => z * normal_cdf(z),
    }
}

/// First derivative. ReLU uses `1{z > 0}`, so the derivative at 0 is 0.
pub fn activation_derivative(z: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Gelu => normal_cdf(z) + z * normal_pdf(z),
    }
}

/// Second derivative (needed to differentiate through FFN_v).
pub fn activation_second_derivative(z: f64, kind: Activation) -> f64 {
    match kind {
        Activation::Relu => 0.0,
        Activation::Gelu => normal_pdf(z) * (2.0 - z * z),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FfnParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
    pub activation: Activation,
}

impl FfnParams {
    pub fn random(prng: &mut Prng, d: usize, d_ff: usize, std: f64, activation: Activation) -> Self {
        Self {
            w1: gaussian_init(prng, d, d_ff, std),
            b1: Matrix::zeros(1, d_ff),
            w2: gaussian_init(prng, d_ff, d, std),
            b2: Matrix::zeros(1, d),
            activation,
        }
    }

    pub fn zeros(d: usize, d_ff: usize, activation: Activation) -> Self {
        Self {
            w1: Matrix::zeros(d, d_ff),
            b1: Matrix::zeros(1, d_ff),
            w2: Matrix::zeros(d_ff, d),
            b2: Matrix::zeros(1, d),
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, dff) = self.w1.shape();
        if self.b1.shape() != (1, dff) || self.w2.shape() != (dff, d) || self.b2.shape() != (1, d) {
            return Err(shape_err("FfnParams", "shapes do not chain d -> d_ff -> d"));
        }
        Ok(())
    }
}

/// `X W1 + 1 b1^T`.
fn pre_activation(x: &Matrix, p: &FfnParams) -> Result<Matrix> {
    p.validate()?;
    x.matmul(&p.w1)?.add_row(&p.b1)
}

/// `phi(X W1 + 1 b1^T) W2 + 1 b2^T`.
pub fn ffn(x: &Matrix, p: &FfnParams) -> Result<Matrix> {
    let h = pre_activation(x, p)?.map(|z| activation(z, p.activation));
    h.matmul(&p.w2)?.add_row(&p.b2)
}

/// `[phi'(X W1 + 1 b1^T) o (Y W1)] W2`: the directional derivative of
/// [`ffn`] at `X` along `Y`. Biases do not enter.
pub fn ffn_velocity(x: &Matrix, y: &Matrix, p: &FfnParams) -> Result<Matrix> {
    if x.shape() != y.shape() {
        return Err(shape_err("ffn_velocity", "state and velocity shapes differ"));
    }
    let slope = pre_activation(x, p)?.map(|z| activation_derivative(z, p.activation));
    slope.hadamard(&y.matmul(&p.w1)?)?.matmul(&p.w2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{central_jvp, relative_error};
    use proptest::prelude::*;

    fn random_ln(rng: &mut Prng, d: usize, eps: f64) -> LayerNormParams {
        LayerNormParams {
            gamma: gaussian_init(rng, 1, d, 1.0),
            beta: gaussian_init(rng, 1, d, 1.0),
            eps,
        }
    }

    #[test]
    fn two_element_layer_norm() {
        let p = LayerNormParams::identity(2, 0.0);
        assert_eq!(layer_norm_row(&[2.0, 4.0], &p), vec![-1.0, 1.0]);
    }

    #[test]
    fn constant_row_gives_beta() {
        let mut p = LayerNormParams::identity(3, 1e-5);
        p.beta = Matrix::row_vector(vec![0.1, -0.2, 0.3]);
        assert_eq!(layer_norm_row(&[7.0, 7.0, 7.0], &p), p.beta.data().to_vec());
    }

    #[test]
    fn layer_norm_direct_formula() {
        let mut rng = Prng::new(1);
        let p = random_ln(&mut rng, 8, 1e-5);
        let x = gaussian_init(&mut rng, 1, 8, 2.0);
        let got = layer_norm_row(x.data(), &p);
        let mu = x.data().iter().sum::<f64>() / 8.0;
        let var = x.data().iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 8.0;
        for j in 0..8 {
            let want = (x.get(0, j) - mu) / (var + 1e-5).sqrt() * p.gamma.get(0, j) + p.beta.get(0, j);
            assert!((got[j] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn velocity_layer_norm_examples() {
        let p = LayerNormParams::identity(2, 0.0);
        assert_eq!(layer_norm_velocity_row(&[2.0, 4.0], &[0.0, 0.0], &p), vec![0.0, 0.0]);
        assert_eq!(layer_norm_velocity_row(&[2.0, 4.0], &[1.0, 2.0], &p), vec![1.0, 2.0]);
    }

    #[test]
    fn velocity_layer_norm_is_frozen_stats_jvp() {
        let mut rng = Prng::new(2);
        for _ in 0..20 {
            let p = random_ln(&mut rng, 6, 1e-5);
            let x = gaussian_init(&mut rng, 4, 6, 1.5);
            let y = gaussian_init(&mut rng, 4, 6, 1.0);
            let stats: Vec<(f64, f64)> = x.row_iter().map(row_stats).collect();
            let frozen = |m: &Matrix| -> Result<Matrix> {
                Ok(Matrix::from_fn(m.rows(), m.cols(), |i, j| {
                    let (mu, var) = stats[i];
                    (m.get(i, j) - mu) / (var + p.eps).sqrt() * p.gamma.get(0, j) + p.beta.get(0, j)
                }))
            };
            let fd = central_jvp(frozen, &x, &y, 1e-5).unwrap();
            let got = layer_norm_velocity(&x, &y, &p).unwrap();
            assert!(relative_error(&got, &fd, 1e-12) <= 1e-8);
        }
    }

    #[test]
    fn velocity_layer_norm_differs_from_full_jvp() {
        let mut rng = Prng::new(3);
        let p = random_ln(&mut rng, 6, 1e-5);
        let x = gaussian_init(&mut rng, 3, 6, 1.0);
        let y = gaussian_init(&mut rng, 3, 6, 1.0);
        let full = central_jvp(|m| layer_norm(m, &p), &x, &y, 1e-5).unwrap();
        let got = layer_norm_velocity(&x, &y, &p).unwrap();
        assert!(relative_error(&got, &full, 1e-12) > 1e-3);
    }

    #[test]
    fn ffn_examples() {
        let mut p = FfnParams::zeros(3, 5, Activation::Gelu);
        p.b2 = Matrix::row_vector(vec![1.0, -2.0, 0.5]);
        let x = gaussian_init(&mut Prng::new(4), 4, 3, 1.0);
        let out = ffn(&x, &p).unwrap();
        for r in out.row_iter() {
            assert_eq!(r, p.b2.data());
        }

        let relu = FfnParams {
            w1: Matrix::from_rows(&[[-1.0]]),
            b1: Matrix::zeros(1, 1),
            w2: Matrix::from_rows(&[[5.0]]),
            b2: Matrix::zeros(1, 1),
            activation: Activation::Relu,
        };
        assert_eq!(ffn(&Matrix::from_rows(&[[1.0]]), &relu).unwrap(), Matrix::from_rows(&[[0.0]]));
    }

    #[test]
    fn ffn_direct_formula() {
        let mut rng = Prng::new(5);
        let mut p = FfnParams::random(&mut rng, 4, 6, 0.7, Activation::Gelu);
        p.b1 = gaussian_init(&mut rng, 1, 6, 0.5);
        p.b2 = gaussian_init(&mut rng, 1, 4, 0.5);
        let x = gaussian_init(&mut rng, 3, 4, 1.0);
        let got = ffn(&x, &p).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut acc = p.b2.get(0, j);
                for k in 0..6 {
                    let z: f64 = (0..4).map(|t| x.get(i, t) * p.w1.get(t, k)).sum::<f64>() + p.b1.get(0, k);
                    let g = 0.5 * z * (1.0 + libm::erf(z / SQRT_2));
                    acc += g * p.w2.get(k, j);
                }
                assert!((got.get(i, j) - acc).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ffn_velocity_examples() {
        let mut rng = Prng::new(6);
        let p = FfnParams::random(&mut rng, 4, 6, 0.7, Activation::Gelu);
        let x = gaussian_init(&mut rng, 3, 4, 1.0);
        assert_eq!(ffn_velocity(&x, &Matrix::zeros(3, 4), &p).unwrap(), Matrix::zeros(3, 4));

        // All pre-activations positive: relu' = 1, so FFN_v = Y W1 W2.
        let mut lin = FfnParams::random(&mut rng, 4, 6, 0.1, Activation::Relu);
        lin.b1 = Matrix::filled(1, 6, 100.0);
        let y = gaussian_init(&mut rng, 3, 4, 1.0);
        let want = y.matmul(&lin.w1).unwrap().matmul(&lin.w2).unwrap();
        assert!(ffn_velocity(&x, &y, &lin).unwrap().max_abs_diff(&want) <= 1e-15);
    }

    #[test]
    fn ffn_velocity_is_jvp() {
        let mut rng = Prng::new(7);
        for _ in 0..20 {
            let mut p = FfnParams::random(&mut rng, 5, 8, 0.6, Activation::Gelu);
            p.b1 = gaussian_init(&mut rng, 1, 8, 0.3);
            p.b2 = gaussian_init(&mut rng, 1, 5, 0.3);
            let x = gaussian_init(&mut rng, 4, 5, 1.0);
            let y = gaussian_init(&mut rng, 4, 5, 1.0);
            let fd = central_jvp(|m| ffn(m, &p), &x, &y, 1e-6).unwrap();
            let got = ffn_velocity(&x, &y, &p).unwrap();
            assert!(relative_error(&got, &fd, 1e-12) <= 1e-6);
        }
    }

    #[test]
    fn activation_values() {
        assert_eq!(activation(-1.0, Activation::Relu), 0.0);
        assert_eq!(activation_derivative(-1.0, Activation::Relu), 0.0);
        assert_eq!(activation_derivative(0.0, Activation::Relu), 0.0);
        assert_eq!(activation(0.0, Activation::Gelu), 0.0);
        assert_eq!(activation_derivative(0.0, Activation::Gelu), 0.5);
    }

    #[test]
    fn gelu_derivatives_match_finite_differences() {
        let h = 1e-5;
        for k in 0..50 {
            let z = -5.0 + 10.0 * k as f64 / 49.0;
            let fd = (activation(z + h, Activation::Gelu) - activation(z - h, Activation::Gelu)) / (2.0 * h);
            assert!((activation_derivative(z, Activation::Gelu) - fd).abs() <= 1e-8, "z={z}");
            let fd2 = (activation_derivative(z + h, Activation::Gelu)
                - activation_derivative(z - h, Activation::Gelu))
                / (2.0 * h);
            assert!((activation_second_derivative(z, Activation::Gelu) - fd2).abs() <= 1e-8);
        }
    }

    proptest! {
        #[test]
        fn normalized_rows_have_unit_variance(v in prop::collection::vec(-10.0..10.0f64, 2..16)) {
            let (_, var) = row_stats(&v);
            prop_assume!(var > 1e-6);
            let p = LayerNormParams::identity(v.len(), 0.0);
            let out = layer_norm_row(&v, &p);
            let (m, s) = row_stats(&out);
            prop_assert!(m.abs() <= 1e-10);
            prop_assert!((s - 1.0).abs() <= 1e-10);
        }

        #[test]
        fn velocity_norm_is_homogeneous(seed in 0u64..1000, c in -5.0..5.0f64) {
            let mut rng = Prng::new(seed);
            let p = random_ln(&mut rng, 5, 1e-5);
            let x = gaussian_init(&mut rng, 2, 5, 1.0);
            let y = gaussian_init(&mut rng, 2, 5, 1.0);
            let lhs = layer_norm_velocity(&x, &y.scale(c), &p).unwrap();
            let rhs = layer_norm_velocity(&x, &y, &p).unwrap().scale(c);
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-14 * rhs.max_abs().max(1.0));
        }

        #[test]
        fn ffn_velocity_is_linear(seed in 0u64..1000) {
            let mut rng = Prng::new(seed);
            let p = FfnParams::random(&mut rng, 4, 6, 0.7, Activation::Gelu);
            let x = gaussian_init(&mut rng, 3, 4, 1.0);
            let y1 = gaussian_init(&mut rng, 3, 4, 1.0);
            let y2 = gaussian_init(&mut rng, 3, 4, 1.0);
            let lhs = ffn_velocity(&x, &y1.add(&y2).unwrap(), &p).unwrap();
            let rhs = ffn_velocity(&x, &y1, &p).unwrap().add(&ffn_velocity(&x, &y2, &p).unwrap()).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-12);
        }
    }
}
