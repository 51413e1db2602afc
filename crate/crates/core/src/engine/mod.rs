//! Disorder fields and transfer-matrix evaluation of partition functions.
//!
//! All sweeps run in rotated coordinates `u = x1 + x2`, `v = x1 − x2`. At a
//! given time every reachable site has the same parity `s ∈ {0, 1}` of `u`
//! (and of `v`), and is stored at grid index `(i, j) = (⌊u/2⌋, ⌊v/2⌋)`. A walk
//! step moves `(u, v)` by `(±1, ±1)`, so each cell gathers from a 2×2 block of
//! the previous slice.

mod collision;
mod exact;
mod field;
mod gradient;
mod sizebias;
mod sweep;

pub use collision::{collision_moment, CollisionMoment};
pub use exact::{exact_partition, Ring};
pub use field::{CounterField, DiamondField, ParityMode, Tilted};
pub use gradient::{grad_log_norm, polymer_marginals, GradReport};
pub use sizebias::{sample_path, sizebias_sample};
pub use sweep::{
    backward, endpoint_profile, partition_all_starts, partition_constrained, partition_field,
    partition_field_at, EndpointProfile, PartitionResult, Renorm, StartTable, SweepOptions, Window,
};

use crate::disorder::DisorderModel;

pub(crate) const SQRT3: f64 = 1.732_050_807_568_877_2;
use crate::error::Result;

/// β together with the matching cumulant λ(β), so weights are `e^{βω−λ}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coupling {
    pub beta: f64,
    pub lambda: f64,
    /// Weights of `ω = ±1` for each 4-bit sign pattern (bit set means `+1`).
    sign_table: [[f64; 4]; 16],
    /// `e^{βω−λ}` for `ω = √3(2U−1)` at `U = k/256`.
    uniform_table: [f64; 256],
    /// Leading Taylor coefficient index used by `uniform_weight`.
    taylor_from: usize,
}

/// Taylor coefficients `1/k!` for `k = 12, 11, …, 0`.
const EXP_TAYLOR: [f64; 13] = {
    let mut c = [1.0; 13];
    let mut k = 1;
    while k < 13 {
        c[12 - k] = c[13 - k] / k as f64;
        k += 1;
    }
    c
};

impl Coupling {
    pub fn new(model: &DisorderModel, beta: f64) -> Result<Self> {
        Ok(Self::from_parts(beta, model.cumulant(beta)?))
    }

    pub fn from_parts(beta: f64, lambda: f64) -> Self {
        let (wp, wm) = ((beta - lambda).exp(), (-beta - lambda).exp());
        let mut sign_table = [[0.0; 4]; 16];
        for (pat, e) in sign_table.iter_mut().enumerate() {
            for (t, w) in e.iter_mut().enumerate() {
                *w = if (pat >> t) & 1 == 1 { wp } else { wm };
            }
        }
        let rate = 2.0 * SQRT3 * beta;
        let mut uniform_table = [0.0; 256];
        for (k, w) in uniform_table.iter_mut().enumerate() {
            *w = (rate * k as f64 / 256.0 - SQRT3 * beta - lambda).exp();
        }
        // Smallest degree whose remainder x^{d+1}/(d+1)! stays below 1e−17.
        let x_max = rate.abs() / 256.0;
        let mut d = 1;
        let mut term = x_max * x_max / 2.0;
        while d < 12 && term > 1e-17 {
            d += 1;
            term *= x_max / (d + 1) as f64;
        }
        Self {
            beta,
            lambda,
            sign_table,
            uniform_table,
            taylor_from: 12 - d,
        }
    }

    #[inline]
    pub fn weight(&self, omega: f64) -> f64 {
        (self.beta * omega - self.lambda).exp()
    }

    /// Weight of the uniform variate `ω = √3(2U−1)` with `U = (bits >> 11)·2^−53`:
    /// the top byte of `U` is looked up, the rest goes through a Taylor series
    /// whose argument stays below `2√3β/256`.
    #[inline(always)]
    pub(crate) fn uniform_weight(&self, bits: u64) -> f64 {
        let lo = ((bits >> 11) & ((1 << 45) - 1)) as f64 * (1.0 / (1u64 << 53) as f64);
        let x = 2.0 * SQRT3 * self.beta * lo;
        let mut p = EXP_TAYLOR[self.taylor_from];
        for &c in &EXP_TAYLOR[self.taylor_from + 1..] {
            p = p * x + c;
        }
        self.uniform_table[(bits >> 56) as usize] * p
    }

    #[inline(always)]
    pub(crate) fn sign_weights(&self, pattern: u64) -> &[f64; 4] {
        &self.sign_table[(pattern & 15) as usize]
    }
}

/// Read access to a space-time disorder field, addressed by time and rotated
/// coordinates.
pub trait Environment: Sync {
    fn omega(&self, n: usize, u: i64, v: i64) -> f64;

    /// Weights `e^{βω(n,u,v)−λ}` for `v = v0, v0 + 2, …` into `out`.
    fn fill_weights(&self, c: &Coupling, n: usize, u: i64, v0: i64, out: &mut [f64]) {
        for (k, w) in out.iter_mut().enumerate() {
            *w = c.weight(self.omega(n, u, v0 + 2 * k as i64));
        }
    }

    /// Whether start points of parity `p` (0 even, 1 odd) are covered.
    fn admits_parity(&self, _p: u8) -> bool {
        true
    }

    /// Whether every cell a walk started within ℓ¹ radius `r0` can visit by
    /// time `n` is available.
    fn covers(&self, _n: usize, _r0: i64) -> bool {
        true
    }
}

impl<E: Environment + ?Sized> Environment for &E {
    fn omega(&self, n: usize, u: i64, v: i64) -> f64 {
        (**self).omega(n, u, v)
    }
    fn fill_weights(&self, c: &Coupling, n: usize, u: i64, v0: i64, out: &mut [f64]) {
        (**self).fill_weights(c, n, u, v0, out)
    }
    fn admits_parity(&self, p: u8) -> bool {
        (**self).admits_parity(p)
    }
    fn covers(&self, n: usize, r0: i64) -> bool {
        (**self).covers(n, r0)
    }
}

#[inline]
pub(crate) fn floor_div2(a: i64) -> i64 {
    a.div_euclid(2)
}

#[inline]
pub(crate) fn ceil_div2(a: i64) -> i64 {
    -((-a).div_euclid(2))
}
