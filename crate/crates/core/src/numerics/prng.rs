//! Deterministic pseudo-random numbers.
//!
//! The generator is xoshiro256** seeded by four successive outputs of
//! splitmix64. Both are specified by their published constants, so a stream
//! can be reproduced bit for bit by any other implementation:
//!
//! ```text
//! splitmix64:  x += 0x9E3779B97F4A7C15
//!              z = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9
//!              z = (z ^ (z >> 27)) * 0x94D049BB133111EB
//!              z ^ (z >> 31)
//! xoshiro256**: out = rotl(s1 * 5, 7) * 9, then the standard state shuffle
//! ```
//!
//! Uniform doubles take the top 53 bits. Normals use the Box-Muller transform
//! and hand out the cosine branch first, then the cached sine branch.

use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Prng {
    state: [u64; 4],
    spare_normal: Option<f64>,
}

fn splitmix64(x: &mut u64) -> u64 {
    *x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Prng {
    pub fn new(seed: u64) -> Self {
        let mut x = seed;
        let state = [
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
            splitmix64(&mut x),
        ];
        Self {
            state,
            spare_normal: None,
        }
    }

    /// Independent child stream; used to give sub-tasks their own sequence.
    pub fn fork(&mut self) -> Prng {
        Prng::new(self.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by multiply-shift (bias below 2^-50 for the
    /// small ranges used here).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], keeping ln finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare_normal = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Matrix of i.i.d. `N(0, std^2)` entries drawn in row-major order.
pub fn gaussian_init(prng: &mut Prng, rows: usize, cols: usize, std: f64) -> Matrix {
    assert!(std >= 0.0, "negative std");
    Matrix::from_fn(rows, cols, |_, _| std * prng.normal())
}
