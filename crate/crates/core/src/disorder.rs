//! Disorder laws with mean 0 and variance 1, their log-moment generating
//! functions, exponential tilts, and the (N, β) ↔ θ calibration.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_2, PI};
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::kernels::KernelTable;

const SQRT3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Gaussian,
    Rademacher,
    /// Uniform on `[−√3, √3]`.
    BoundedUniform,
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Gaussian => "gaussian",
            Family::Rademacher => "rademacher",
            Family::BoundedUniform => "bounded-uniform",
        })
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Family::Gaussian),
            "rademacher" => Ok(Family::Rademacher),
            "bounded-uniform" | "uniform" => Ok(Family::BoundedUniform),
            other => Err(Error::Parse(format!("unknown disorder family {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DisorderModel {
    pub family: Family,
}

/// `log cosh x` without overflow.
fn log_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - LN_2
}

/// `log(sinh(x)/x)` for `x ≥ 0`, stable at both ends.
fn log_sinhc(x: f64) -> f64 {
    let a = x.abs();
    if a < 1e-3 {
        let a2 = a * a;
        return a2 / 6.0 - a2 * a2 / 180.0;
    }
    if a > 20.0 {
        return a - (2.0 * a).ln() + (-(-2.0 * a).exp()).ln_1p();
    }
    (a.sinh() / a).ln()
}

impl DisorderModel {
    pub const fn new(family: Family) -> Self {
        Self { family }
    }

    pub const fn gaussian() -> Self {
        Self::new(Family::Gaussian)
    }

    pub const fn rademacher() -> Self {
        Self::new(Family::Rademacher)
    }

    pub const fn bounded_uniform() -> Self {
        Self::new(Family::BoundedUniform)
    }

    /// Largest β for which `λ(2β)` is comfortably finite in double precision.
    pub fn beta_max(&self) -> f64 {
        match self.family {
            Family::Gaussian => 13.0,
            Family::Rademacher | Family::BoundedUniform => 150.0,
        }
    }

    /// Supremum of `σ²(β)` over the supported range.
    pub fn sigma2_sup(&self) -> f64 {
        match self.family {
            Family::Rademacher => 1.0,
            _ => self.pair_variance(self.beta_max()).unwrap_or(f64::INFINITY),
        }
    }

    fn check_beta(&self, beta: f64) -> Result<()> {
        if !beta.is_finite() || beta.abs() > self.beta_max() {
            return Err(Error::Domain(format!(
                "beta = {beta} outside the supported range |beta| <= {} for {}",
                self.beta_max(),
                self.family
            )));
        }
        Ok(())
    }

    /// `λ(β) = log E[e^{βω}]`.
    pub fn cumulant(&self, beta: f64) -> Result<f64> {
        self.check_beta(beta / 2.0)?;
        Ok(match self.family {
            Family::Gaussian => 0.5 * beta * beta,
            Family::Rademacher => log_cosh(beta),
            Family::BoundedUniform => log_sinhc(SQRT3 * beta),
        })
    }

    /// `σ²(β) = e^{λ(2β) − 2λ(β)} − 1 = Var(e^{βω−λ(β)})`.
    pub fn pair_variance(&self, beta: f64) -> Result<f64> {
        self.check_beta(beta)?;
        Ok(match self.family {
            Family::Gaussian => (beta * beta).exp_m1(),
            Family::Rademacher => beta.tanh().powi(2),
            Family::BoundedUniform => {
                (self.cumulant(2.0 * beta)? - 2.0 * self.cumulant(beta)?).exp_m1()
            }
        })
    }

    /// `λ₂ = λ(2β) − 2λ(β) = log(1 + σ²(β))`.
    pub fn pair_cumulant(&self, beta: f64) -> Result<f64> {
        Ok(self.pair_variance(beta)?.ln_1p())
    }

    /// Weight `e^{βω − λ(β)}` for a given cumulant value.
    #[inline]
    pub fn weight(beta: f64, lambda: f64, omega: f64) -> f64 {
        (beta * omega - lambda).exp()
    }

    /// One draw of ω.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            Family::Gaussian => StandardNormal.sample(rng),
            Family::Rademacher => {
                if rng.next_u64() >> 63 == 1 {
                    1.0
                } else {
                    -1.0
                }
            }
            Family::BoundedUniform => SQRT3 * (2.0 * rng.random::<f64>() - 1.0),
        }
    }

    /// One draw from the tilted law `e^{βω−λ(β)} dP(ω)`.
    pub fn sample_tilted<R: Rng + ?Sized>(&self, beta: f64, rng: &mut R) -> f64 {
        if beta == 0.0 {
            return self.sample(rng);
        }
        match self.family {
            Family::Gaussian => beta + Distribution::<f64>::sample(&StandardNormal, rng),
            Family::Rademacher => {
                if rng.random::<f64>() < self.tilted_plus_prob(beta) {
                    1.0
                } else {
                    -1.0
                }
            }
            Family::BoundedUniform => {
                // Inverse CDF of the density ∝ e^{βω} on [−a, a], written so that
                // neither exponential overflows.
                let u: f64 = rng.random::<f64>();
                let a = SQRT3;
                if beta > 0.0 {
                    a + (u + (1.0 - u) * (-2.0 * beta * a).exp()).ln() / beta
                } else {
                    -a + ((1.0 - u) + u * (2.0 * beta * a).exp()).ln() / beta
                }
            }
        }
    }

    /// `P̃(ω = +1) = e^β/(2 cosh β)` for Rademacher disorder.
    pub fn tilted_plus_prob(&self, beta: f64) -> f64 {
        0.5 * (1.0 + beta.tanh())
    }
}

/// θ, with β = 0 mapped to a tagged −∞.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "kebab-case")]
pub enum Theta {
    NegInfinity,
    Finite(f64),
}

impl Theta {
    pub fn finite(&self) -> Option<f64> {
        match self {
            Theta::Finite(t) => Some(*t),
            Theta::NegInfinity => None,
        }
    }

    /// `e^θ`, which is legitimately 0 at θ = −∞.
    pub fn exp(&self) -> f64 {
        match self {
            Theta::Finite(t) => t.exp(),
            Theta::NegInfinity => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CriticalPoint {
    pub n: usize,
    pub beta: f64,
    pub theta: f64,
    pub sigma2: f64,
}

impl CriticalPoint {
    /// `σ²(R_N − θ/π) − 1`, zero when calibrated.
    pub fn defect(&self, r_n: f64) -> f64 {
        self.sigma2 * (r_n - self.theta / PI) - 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaReport {
    pub theta: Theta,
    /// `e^θ` from `e^{α_N} N e^{−π/σ²}`.
    pub e_theta: f64,
    /// `|(πR_N − π/σ²) − log(e^{α_N} N e^{−π/σ²})|`.
    pub route_gap: f64,
}

/// `θ(N, β) = πR_N − π/σ²(β)`.
pub fn theta_of(
    model: &DisorderModel,
    table: &KernelTable,
    n: usize,
    beta: f64,
) -> Result<ThetaReport> {
    let (r_n, alpha_n) = table.overlap_sum(n)?;
    if beta == 0.0 {
        return Ok(ThetaReport {
            theta: Theta::NegInfinity,
            e_theta: 0.0,
            route_gap: 0.0,
        });
    }
    let s2 = model.pair_variance(beta)?;
    let direct = PI * r_n - PI / s2;
    let log_route = alpha_n + (n as f64).ln() - PI / s2;
    let e_theta = alpha_n.exp() * n as f64 * (-PI / s2).exp();
    Ok(ThetaReport {
        theta: Theta::Finite(direct),
        e_theta,
        route_gap: (direct - log_route).abs(),
    })
}

/// The calibrated variance `σ² = 1/(R_N − θ/π)`, defined for `θ < πR_N`.
pub fn critical_sigma2(table: &KernelTable, n: usize, theta: f64) -> Result<f64> {
    let (r_n, _) = table.overlap_sum(n)?;
    let limit = PI * r_n;
    if !(theta < limit) {
        return Err(Error::BeyondCalibration { theta, limit });
    }
    Ok(1.0 / (r_n - theta / PI))
}

/// Solve `σ²(β) = 1/(R_N − θ/π)` for β by bisection.
pub fn solve_beta(
    model: &DisorderModel,
    table: &KernelTable,
    n: usize,
    theta: f64,
) -> Result<CriticalPoint> {
    let target = critical_sigma2(table, n, theta)?;
    if target >= model.sigma2_sup() {
        return Err(Error::Range(format!(
            "target sigma^2 = {target} not reachable by {} (sup {})",
            model.family,
            model.sigma2_sup()
        )));
    }
    let s2 = |b: f64| model.pair_variance(b).expect("beta inside bracket");
    let mut lo = 1e-8;
    if s2(lo) >= target {
        return Err(Error::Range(format!(
            "target sigma^2 = {target} below sigma^2(1e-8)"
        )));
    }
    let mut hi = 2e-8;
    while s2(hi) < target {
        lo = hi;
        hi = (hi * 2.0).min(model.beta_max());
        if hi == model.beta_max() && s2(hi) < target {
            return Err(Error::Range(format!(
                "no beta <= {} reaches sigma^2 = {target}",
                model.beta_max()
            )));
        }
    }
    let mut beta = 0.5 * (lo + hi);
    for _ in 0..200 {
        beta = 0.5 * (lo + hi);
        let v = s2(beta);
        if (v - target).abs() <= 1e-12 * target {
            break;
        }
        if v < target {
            lo = beta;
        } else {
            hi = beta;
        }
    }
    let sigma2 = s2(beta);
    Ok(CriticalPoint {
        n,
        beta,
        theta,
        sigma2,
    })
}
