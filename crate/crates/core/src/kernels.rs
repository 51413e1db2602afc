//! Simple random walk kernels on ℤ²: transition masses, return masses, overlap
//! sums, renewal laws, Laplace transforms and the Dickman density.

use num_bigint::BigUint;
use num_traits::{One, ToPrimitive};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};
use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::lattice::Site;
use crate::quad;

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_860_6;

/// Limit of `πR_N − log N`.
pub fn alpha() -> f64 {
    4.0 * LN_2 + EULER_GAMMA - PI
}

/// Up to this `n` the central binomial mass is computed in exact integer
/// arithmetic; beyond it an asymptotic series accurate to ~1e−16.
const EXACT_CENTRAL_MAX: usize = 256;

/// `2^{−2n} C(2n, n)` exactly as a ratio of big integers, then rounded once.
pub fn central_binomial_exact(n: usize) -> f64 {
    let mut c = BigUint::one();
    for k in 0..n {
        c = c * BigUint::from(2 * n - k) / BigUint::from(k + 1);
    }
    let num = c.to_f64().unwrap();
    // Divide by 4^n through exponent arithmetic to avoid overflow.
    let (m, e) = frexp(num);
    m * 2f64.powi(e - 2 * n as i32)
}

fn frexp(x: f64) -> (f64, i32) {
    if x == 0.0 {
        return (0.0, 0);
    }
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32 - 1022;
    let m = f64::from_bits((bits & !(0x7ff << 52)) | (1022u64 << 52));
    (m, exp)
}

/// `2^{−2n} C(2n, n) = P(S¹_{2n} = 0)` for the one-dimensional walk.
pub fn central_binomial(n: usize) -> f64 {
    if n <= EXACT_CENTRAL_MAX {
        return central_binomial_exact(n);
    }
    let x = 1.0 / n as f64;
    let series = 1.0
        + x * (-1.0 / 8.0
            + x * (1.0 / 128.0
                + x * (5.0 / 1024.0
                    + x * (-21.0 / 32768.0 + x * (-399.0 / 262144.0 + x * (869.0 / 4194304.0))))));
    series / (PI * n as f64).sqrt()
}

/// Closed form of the return mass `u(n) = P(S_{2n} = 0)`.
pub fn return_mass_closed(n: usize) -> f64 {
    let c = central_binomial(n);
    c * c
}

/// Exact `u(n)` as a rational `num/4^{2n}`, for oracle checks.
pub fn return_mass_rational(n: usize) -> num_rational::BigRational {
    use num_bigint::BigInt;
    let mut c = BigInt::one();
    for k in 0..n {
        c = c * BigInt::from(2 * n - k) / BigInt::from(k + 1);
    }
    let den = BigInt::one() << (4 * n);
    num_rational::BigRational::new(&c * &c, den)
}

/// Exact `q_n(x)` as a rational, for enumeration oracles.
pub fn step_kernel_rational(n: usize, x: Site) -> num_rational::BigRational {
    use num_bigint::BigInt;
    let ni = n as i64;
    let (u, v) = (x.u(), x.v());
    if (u + ni).rem_euclid(2) != 0 || u.abs() > ni || v.abs() > ni {
        return num_rational::BigRational::from_integer(BigInt::from(0));
    }
    let choose = |j: i64| {
        let mut c = BigInt::one();
        for k in 0..j {
            c = c * BigInt::from(ni - k) / BigInt::from(k + 1);
        }
        c
    };
    let num = choose((ni + u) / 2) * choose((ni + v) / 2);
    num_rational::BigRational::new(num, BigInt::one() << (2 * n))
}

/// Masses `b_n(k) = C(n, (n+k)/2)/2^n` of one rotated coordinate after `n`
/// steps, indexed by `k = −n, −n+2, …, n` (entry `i` is `k = 2i − n`).
pub fn binomial_row(n: usize) -> Vec<f64> {
    let mut row = vec![0.0; n + 1];
    // Start at the centre and walk outward with ratio C(n,j+1)/C(n,j).
    let mid = n / 2;
    let centre = if n % 2 == 0 {
        central_binomial(mid)
    } else {
        // C(n, (n−1)/2)/2^n = C(n+1, (n+1)/2)/2^{n+1}
        central_binomial(mid + 1)
    };
    row[mid] = centre;
    for j in mid..n {
        row[j + 1] = row[j] * (n - j) as f64 / (j + 1) as f64;
    }
    for j in (1..=mid).rev() {
        row[j - 1] = row[j] * j as f64 / (n - j + 1) as f64;
    }
    row
}

/// `P(S_n = x)` from the product of the two rotated one-dimensional laws.
pub fn step_kernel_closed(n: usize, x: Site) -> f64 {
    let (u, v) = (x.u(), x.v());
    let ni = n as i64;
    if (u + ni).rem_euclid(2) != 0 || u.abs() > ni || v.abs() > ni {
        return 0.0;
    }
    b_single(n, u) * b_single(n, v)
}

fn b_single(n: usize, k: i64) -> f64 {
    // log C(n, j) via the central value and a product of ratios would be
    // O(n); use lnΓ for isolated lookups.
    let j = ((n as i64 + k) / 2) as f64;
    let nf = n as f64;
    if n <= 60 {
        let row = binomial_row(n);
        return row[((n as i64 + k) / 2) as usize];
    }
    (statrs::function::gamma::ln_gamma(nf + 1.0)
        - statrs::function::gamma::ln_gamma(j + 1.0)
        - statrs::function::gamma::ln_gamma(nf - j + 1.0)
        - nf * LN_2)
        .exp()
}

/// Local CLT approximation `q_n(x) ≈ 2/(πn)·e^{−|x|²/n}` on admissible sites.
pub fn step_kernel_lclt(n: usize, x: Site) -> f64 {
    let ni = n as i64;
    if n == 0 || (x.u() + ni).rem_euclid(2) != 0 {
        return if n == 0 && x == Site::ORIGIN {
            1.0
        } else {
            0.0
        };
    }
    let r2 = (x.x1 * x.x1 + x.x2 * x.x2) as f64;
    2.0 / (PI * n as f64) * (-r2 / n as f64).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum KernelMode {
    #[default]
    Exact,
    LocalClt,
}

/// A persisted square window `|x1|, |x2| ≤ r` of the slice at one time.
#[derive(Debug, Clone, PartialEq)]
struct Window {
    r: i64,
    vals: Vec<f64>,
}

impl Window {
    fn get(&self, x: Site) -> Option<f64> {
        if x.x1.abs() > self.r || x.x2.abs() > self.r {
            return None;
        }
        let w = (2 * self.r + 1) as usize;
        Some(self.vals[(x.x1 + self.r) as usize * w + (x.x2 + self.r) as usize])
    }
}

/// Return masses, overlap sums and windowed transition masses.
#[derive(Debug, Clone)]
pub struct KernelTable {
    pub n_max: usize,
    /// `u[n]` for `0 ≤ n ≤ n_max`; `u[0] = 1` is stored for indexing convenience.
    u: Vec<f64>,
    /// `r[n] = Σ_{m≤n} u(m)`, `r[0] = 0`.
    r: Vec<f64>,
    /// Horizon of the convolution pass (u(n) beyond it is closed form).
    pub conv_horizon: usize,
    pub r_win: i64,
    windows: BTreeMap<usize, Window>,
    pub mode: KernelMode,
}

impl KernelTable {
    /// Return masses and overlap sums only, to horizon `n_max`.
    pub fn new(n_max: usize) -> Self {
        Self::build(n_max, 0, &[], 0)
    }

    /// Full construction. The convolution is run to
    /// `max(conv_horizon, times)`; `u(n)` for `n ≤ conv_horizon` comes from
    /// `Σ_x q_n(x)²` on the evolved slices and from the closed form beyond.
    /// Slices at `times` are persisted on the window `|x_i| ≤ r_win`.
    pub fn build(n_max: usize, r_win: i64, times: &[usize], conv_horizon: usize) -> Self {
        let conv_horizon = conv_horizon.min(n_max);
        let t_max = times.iter().copied().max().unwrap_or(0).max(conv_horizon);
        let mut u = vec![0.0; n_max + 1];
        u[0] = 1.0;
        let mut windows = BTreeMap::new();

        // Rolling 2D slices on the box |x_i| ≤ t_max.
        let rad = t_max as i64;
        let w = (2 * rad + 1) as usize;
        let mut cur = vec![0.0f64; w * w];
        let mut nxt = vec![0.0f64; w * w];
        let idx = |x1: i64, x2: i64| (x1 + rad) as usize * w + (x2 + rad) as usize;
        cur[idx(0, 0)] = 1.0;
        let wanted: std::collections::BTreeSet<usize> = times.iter().copied().collect();
        if wanted.contains(&0) {
            windows.insert(0, persist(&cur, rad, r_win));
        }
        for n in 1..=t_max {
            let ni = n as i64;
            for x1 in -ni..=ni {
                let rem = ni - x1.abs();
                let mut x2 = -rem;
                while x2 <= rem {
                    // Sites with x1 + x2 + n odd are zero; step by 2 from the first admissible.
                    let mut s = 0.0;
                    for (d1, d2) in [(1, 0), (-1, 0), (0, 1), (0, -1)] {
                        let (y1, y2) = (x1 - d1, x2 - d2);
                        if y1.abs() + y2.abs() <= ni - 1 {
                            s += cur[idx(y1, y2)];
                        }
                    }
                    nxt[idx(x1, x2)] = 0.25 * s;
                    x2 += 2;
                }
            }
            // Clear the previous parity class so the buffer only holds time n.
            let prev = ni - 1;
            for x1 in -prev..=prev {
                let rem = prev - x1.abs();
                let mut x2 = -rem;
                while x2 <= rem {
                    cur[idx(x1, x2)] = 0.0;
                    x2 += 2;
                }
            }
            std::mem::swap(&mut cur, &mut nxt);
            if n <= conv_horizon {
                u[n] = cur.iter().map(|q| q * q).sum();
            }
            if wanted.contains(&n) {
                windows.insert(n, persist(&cur, rad, r_win));
            }
        }
        for (n, slot) in u.iter_mut().enumerate().skip(conv_horizon + 1) {
            *slot = return_mass_closed(n);
        }
        let mut r = vec![0.0; n_max + 1];
        for n in 1..=n_max {
            r[n] = r[n - 1] + u[n];
        }
        Self {
            n_max,
            u,
            r,
            conv_horizon,
            r_win,
            windows,
            mode: KernelMode::Exact,
        }
    }

    pub fn with_mode(mut self, mode: KernelMode) -> Self {
        self.mode = mode;
        self
    }

    /// `u(n)`; `n = 0` is rejected because overlap sums start at 1.
    pub fn return_mass(&self, n: usize) -> Result<f64> {
        if n == 0 {
            return Err(Error::Domain("return mass u(n) needs n >= 1".into()));
        }
        self.u
            .get(n)
            .copied()
            .ok_or_else(|| Error::Range(format!("n = {n} beyond table horizon {}", self.n_max)))
    }

    /// Slice `u[0..=n]` with `u[0] = 1`.
    pub fn u_slice(&self) -> &[f64] {
        &self.u
    }

    pub fn overlap(&self, n: usize) -> f64 {
        self.r[n]
    }

    /// `(R_N, α_N)` with `α_N = πR_N − log N`.
    pub fn overlap_sum(&self, n: usize) -> Result<(f64, f64)> {
        if n == 0 || n > self.n_max {
            return Err(Error::Range(format!(
                "overlap sum at N = {n}, horizon {}",
                self.n_max
            )));
        }
        let r = self.r[n];
        Ok((r, PI * r - (n as f64).ln()))
    }

    /// `q_n(x)` from the persisted window (exact mode) or the local CLT.
    pub fn step_kernel(&self, n: usize, x: Site) -> Result<f64> {
        if self.mode == KernelMode::LocalClt {
            return Ok(step_kernel_lclt(n, x));
        }
        let ni = n as i64;
        if (x.u() + ni).rem_euclid(2) != 0 {
            return Ok(0.0);
        }
        let win = self
            .windows
            .get(&n)
            .ok_or_else(|| Error::WindowExceeded(format!("time {n} not persisted")))?;
        win.get(x)
            .ok_or_else(|| Error::WindowExceeded(format!("site {x} outside window {}", win.r)))
    }

    /// Sum of a persisted window (equals 1 when the window covers the cone).
    pub fn window_mass(&self, n: usize) -> Option<f64> {
        self.windows.get(&n).map(|w| w.vals.iter().sum())
    }

    pub fn persisted_times(&self) -> Vec<usize> {
        self.windows.keys().copied().collect()
    }

    pub fn renewal_law(&self, n: usize) -> RenewalLaw {
        RenewalLaw::new(&self.u[..=n])
    }

    /// `P(τ_k ≤ n)` for the renewal with law `u(j)/R_n` on `⟦1,n⟧`.
    pub fn renewal_hit_prob(&self, k: usize, n: usize) -> f64 {
        self.renewal_law(n).hit_prob(k)
    }

    /// Largest `|q_n(x) − lclt(n,x)|` over a persisted window.
    pub fn lclt_gap(&self, n: usize) -> Option<f64> {
        let w = self.windows.get(&n)?;
        let mut gap: f64 = 0.0;
        for x1 in -w.r..=w.r {
            for x2 in -w.r..=w.r {
                let s = Site::new(x1, x2);
                gap = gap.max((w.get(s).unwrap() - step_kernel_lclt(n, s)).abs());
            }
        }
        Some(gap)
    }

    /// CSV with columns `n,u_n,R_n` at 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "n,u_n,R_n")?;
        for n in 1..=self.n_max {
            writeln!(out, "{},{:.16e},{:.16e}", n, self.u[n], self.r[n])?;
        }
        Ok(())
    }

    /// Rebuild return masses and overlap sums from a CSV written by
    /// [`write_csv`](Self::write_csv). No windows are restored.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Self> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Parse("empty kernel table".into()))??;
        if header.trim() != "n,u_n,R_n" {
            return Err(Error::Parse(format!("unexpected header {header:?}")));
        }
        let mut u = vec![1.0];
        let mut r = vec![0.0];
        for (i, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(Error::Parse(format!("line {}: expected 3 columns", i + 2)));
            }
            let p = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", i + 2)))
            };
            let n: usize = cols[0]
                .trim()
                .parse()
                .map_err(|e| Error::Parse(format!("line {}: {e}", i + 2)))?;
            if n != u.len() {
                return Err(Error::Parse(format!(
                    "line {}: expected n = {}",
                    i + 2,
                    u.len()
                )));
            }
            u.push(p(cols[1])?);
            r.push(p(cols[2])?);
        }
        let n_max = u.len() - 1;
        Ok(Self {
            n_max,
            u,
            r,
            conv_horizon: 0,
            r_win: 0,
            windows: BTreeMap::new(),
            mode: KernelMode::Exact,
        })
    }
}

fn persist(slice: &[f64], rad: i64, r_win: i64) -> Window {
    let r = r_win.min(rad).max(0);
    let w_full = (2 * rad + 1) as usize;
    let w = (2 * r + 1) as usize;
    let mut vals = Vec::with_capacity(w * w);
    for x1 in -r..=r {
        for x2 in -r..=r {
            vals.push(slice[(x1 + rad) as usize * w_full + (x2 + rad) as usize]);
        }
    }
    Window { r, vals }
}

/// Law of `T^{(n)}` with `P(T = j) = u(j)/R_n` on `⟦1, n⟧`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenewalLaw {
    pub n: usize,
    /// `mass[j-1] = P(T = j)`.
    pub mass: Vec<f64>,
    pub r_n: f64,
}

impl RenewalLaw {
    /// From `u[0..=n]` (entry 0 ignored).
    pub fn new(u: &[f64]) -> Self {
        let n = u.len() - 1;
        let r_n: f64 = u[1..].iter().sum();
        Self {
            n,
            mass: u[1..].iter().map(|x| x / r_n).collect(),
            r_n,
        }
    }

    /// `P(τ_k ≤ n)` by k-fold convolution truncated at `n`.
    pub fn hit_prob(&self, k: usize) -> f64 {
        let n = self.n;
        // dist[s] = P(τ_j = s) for s ≤ n.
        let mut dist = vec![0.0; n + 1];
        dist[0] = 1.0;
        for _ in 0..k {
            let mut next = vec![0.0; n + 1];
            for (s, &p) in dist.iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                for j in 1..=n - s {
                    next[s + j] += p * self.mass[j - 1];
                }
            }
            dist = next;
        }
        dist.iter().sum()
    }

    /// Cumulative masses, for sampling.
    pub fn cdf(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.mass
            .iter()
            .map(|m| {
                acc += m;
                acc
            })
            .collect()
    }
}

/// Result of a truncated infinite sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaplaceOverlap {
    pub value: f64,
    /// Number of terms summed.
    pub terms: usize,
    /// Upper bound on the omitted tail.
    pub tail_bound: f64,
}

/// `R̂(λ) = Σ_{n≥1} e^{−λn} u(n)`, stopping once the geometric tail envelope
/// `u(m)e^{−λm}/(1−e^{−λ})` (valid since `u` is decreasing) is below `tail_tol`.
pub fn laplace_overlap(lambda: f64, tail_tol: f64) -> Result<LaplaceOverlap> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!(
            "laplace_overlap needs lambda > 0, got {lambda}"
        )));
    }
    let denom = -(-lambda).exp_m1();
    let mut terms = Vec::new();
    let mut n = 1usize;
    loop {
        let t = (-lambda * n as f64).exp() * return_mass_closed(n);
        terms.push(t);
        let next = (-lambda * (n + 1) as f64).exp() * return_mass_closed(n + 1) / denom;
        if next <= tail_tol {
            let mut value = 0.0;
            for t in terms.iter().rev() {
                value += t;
            }
            return Ok(LaplaceOverlap {
                value,
                terms: n,
                tail_bound: next,
            });
        }
        n += 1;
    }
}

fn check_unit_interval(t: f64) -> Result<()> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::Domain(format!(
            "Dickman density needs t in (0,1], got {t}"
        )));
    }
    Ok(())
}

/// Integrand bound `e^{−γs}/Γ(s+1)` integrated over `[50, ∞)`, via
/// `Γ(s+1) ≥ Γ(51)·50^{s−50}` for `s ≥ 50`.
fn tail_beyond_50() -> f64 {
    let lg51 = statrs::function::gamma::ln_gamma(51.0);
    let rate = EULER_GAMMA + 50f64.ln();
    (-EULER_GAMMA * 50.0 - lg51).exp() / rate
}

/// Quadrature result with the analytic tail certificate folded into the error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DickmanValue {
    pub value: f64,
    pub abs_err: f64,
}

/// `G_0(t) = ∫_0^∞ s t^{s−1} e^{−γs}/Γ(s+1) ds`, split at `s = 1` and `s = 50`.
pub fn dickman_density(t: f64, quad_tol: f64) -> Result<DickmanValue> {
    check_unit_interval(t)?;
    let lt = t.ln();
    let f = |s: f64| {
        if s == 0.0 {
            return 0.0;
        }
        (s.ln() + (s - 1.0) * lt - EULER_GAMMA * s - statrs::function::gamma::ln_gamma(s + 1.0))
            .exp()
    };
    let a = quad::integrate(f, 0.0, 1.0, quad_tol / 4.0);
    let b = quad::integrate(f, 1.0, 50.0, quad_tol / 4.0);
    // For s ≥ 50 and t ≤ 1: s·t^{s−1} ≤ s/t, and s/Γ(s+1) = 1/Γ(s).
    let tail = tail_beyond_50() * 51.0 / t;
    Ok(DickmanValue {
        value: a.value + b.value,
        abs_err: a.abs_err + b.abs_err + tail,
    })
}

/// `∫_0^1 G_0(u)e^{−λu} du = ∫_0^∞ e^{−γs} λ^{−s} P(s, λ) ds` with `P` the
/// regularized lower incomplete gamma function.
pub fn dickman_laplace(lambda: f64, quad_tol: f64) -> Result<DickmanValue> {
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!(
            "dickman_laplace needs lambda > 0, got {lambda}"
        )));
    }
    let ll = lambda.ln();
    let f = |s: f64| {
        if s == 0.0 {
            return 1.0;
        }
        (-EULER_GAMMA * s - s * ll).exp() * statrs::function::gamma::gamma_lr(s, lambda)
    };
    let a = quad::integrate(f, 0.0, 1.0, quad_tol / 4.0);
    let b = quad::integrate(f, 1.0, 50.0, quad_tol / 4.0);
    // P(s,λ) ≤ λ^s/Γ(s+1), so the integrand is ≤ e^{−γs}/Γ(s+1).
    Ok(DickmanValue {
        value: a.value + b.value,
        abs_err: a.abs_err + b.abs_err + tail_beyond_50(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;
    use proptest::prelude::*;

    /// Enumerate all 4^n paths of length n.
    fn path_count(n: usize, x: Site) -> f64 {
        fn rec(n: usize, pos: Site, x: Site) -> u64 {
            if n == 0 {
                return (pos == x) as u64;
            }
            pos.neighbors().iter().map(|&p| rec(n - 1, p, x)).sum()
        }
        rec(n, Site::ORIGIN, x) as f64 / 4f64.powi(n as i32)
    }

    #[test]
    fn step_kernel_matches_path_enumeration() {
        let t = KernelTable::build(8, 4, &[0, 1, 2, 3, 4], 8);
        assert_eq!(t.step_kernel(1, Site::new(1, 0)).unwrap(), 0.25);
        assert_eq!(t.step_kernel(1, Site::new(1, 1)).unwrap(), 0.0);
        assert_eq!(t.step_kernel(2, Site::ORIGIN).unwrap(), 0.25);
        for n in 0..=4 {
            for x1 in -3..=3 {
                for x2 in -3..=3 {
                    let s = Site::new(x1, x2);
                    assert_eq!(t.step_kernel(n, s).unwrap(), path_count(n, s));
                    assert_eq!(step_kernel_closed(n, s), path_count(n, s));
                }
            }
        }
    }

    #[test]
    fn window_exceeded_is_an_error() {
        let t = KernelTable::build(8, 2, &[4], 0);
        assert!(matches!(
            t.step_kernel(4, Site::new(4, 0)),
            Err(Error::WindowExceeded(_))
        ));
        assert!(matches!(
            t.step_kernel(3, Site::new(1, 0)),
            Err(Error::WindowExceeded(_))
        ));
    }

    #[test]
    fn small_return_masses() {
        let t = KernelTable::build(4, 0, &[], 4);
        assert_eq!(t.return_mass(1).unwrap(), 0.25);
        assert_eq!(t.return_mass(2).unwrap(), 9.0 / 64.0);
        assert!(t.return_mass(0).is_err());
        assert_eq!(t.overlap_sum(1).unwrap().0, 0.25);
        assert_eq!(t.overlap_sum(2).unwrap().0, 0.390625);
    }

    #[test]
    fn convolution_agrees_with_closed_form() {
        let t = KernelTable::build(64, 0, &[], 64);
        for n in 1..=64 {
            let closed = return_mass_rational(n).to_f64().unwrap();
            let conv = t.return_mass(n).unwrap();
            assert!(
                (conv - closed).abs() <= 1e-14 * closed,
                "n={n}: {conv} vs {closed}"
            );
        }
    }

    #[test]
    fn exact_rational_return_masses() {
        for n in 1..=64 {
            let c = central_binomial_exact(n);
            let q = return_mass_rational(n);
            // Compare c² against the rational through a scaled integer check.
            let approx = BigRational::from_float(c * c).unwrap();
            let rel = ((approx - &q) / &q).to_f64().unwrap().abs();
            assert!(rel < 1e-15, "n={n}: rel {rel}");
        }
    }

    #[test]
    fn series_matches_exact_on_overlap() {
        for n in 257..=400 {
            let mut c = BigUint::one();
            for k in 0..n {
                c = c * BigUint::from(2 * n - k) / BigUint::from(k + 1);
            }
            let exact = BigRational::new(c.into(), num_bigint::BigInt::one() << (2 * n));
            let s = BigRational::from_float(central_binomial(n)).unwrap();
            let rel = ((s - &exact) / &exact).to_f64().unwrap().abs();
            assert!(rel < 4.5e-16, "n={n}: {rel}");
        }
    }

    #[test]
    fn alpha_n_near_limit() {
        let t = KernelTable::new(10_000);
        let (_, a) = t.overlap_sum(10_000).unwrap();
        assert!((0.20821..=0.20853).contains(&a), "{a}");
        for n in [1000, 4000, 10_000] {
            let (_, a) = t.overlap_sum(n).unwrap();
            assert!(
                a >= alpha() - 1e-12 && a <= alpha() + PI / n as f64,
                "N={n} α_N={a}"
            );
        }
    }

    #[test]
    fn slices_are_probabilities_and_satisfy_chapman_kolmogorov() {
        let t = KernelTable::build(12, 12, &[3, 5, 8], 0);
        for n in [3, 5, 8] {
            assert!((t.window_mass(n).unwrap() - 1.0).abs() < 1e-14);
        }
        for x1 in -8..=8 {
            for x2 in -8..=8 {
                let x = Site::new(x1, x2);
                let mut s = 0.0;
                for y1 in -3..=3 {
                    for y2 in -3..=3 {
                        let y = Site::new(y1, y2);
                        s += t.step_kernel(3, y).unwrap() * t.step_kernel(5, x - y).unwrap_or(0.0);
                    }
                }
                assert!((s - t.step_kernel(8, x).unwrap()).abs() <= 1e-12);
            }
        }
    }

    /// Σ over I ⊆ ⟦1,n⟧ with |I| = k of u(I), by explicit subset enumeration.
    fn subset_sum(u: &[f64], n: usize, k: usize) -> f64 {
        fn rec(u: &[f64], n: usize, last: usize, left: usize, acc: f64) -> f64 {
            if left == 0 {
                return acc;
            }
            let mut s = 0.0;
            for i in last + 1..=n {
                s += rec(u, n, i, left - 1, acc * u[i - last]);
            }
            s
        }
        rec(u, n, 0, k, 1.0)
    }

    #[test]
    fn renewal_identity_against_subsets() {
        let t = KernelTable::new(30);
        assert_eq!(t.renewal_hit_prob(0, 5), 1.0);
        assert!((t.renewal_hit_prob(1, 5) - 1.0).abs() < 1e-15);
        for n in 1..=30 {
            for k in 0..=5.min(n) {
                let lhs = subset_sum(t.u_slice(), n, k);
                let rhs = t.overlap(n).powi(k as i32) * t.renewal_hit_prob(k, n);
                assert!(
                    (lhs - rhs).abs() <= 1e-12 * lhs,
                    "n={n} k={k}: {lhs} vs {rhs}"
                );
            }
        }
    }

    #[test]
    fn renewal_law_is_normalized() {
        let law = KernelTable::new(500).renewal_law(500);
        assert!((law.mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(law.mass.iter().all(|&m| m > 0.0));
    }

    #[test]
    fn laplace_overlap_limits() {
        let big = laplace_overlap(20.0, 1e-18).unwrap();
        assert!((big.value - (-20f64).exp() / 4.0).abs() <= 1e-12);
        let small = laplace_overlap(1e-3, 1e-14).unwrap();
        let gap = PI * small.value - (1e3f64).ln();
        assert!((gap - (-0.369)).abs() <= 0.01, "{gap}");
        assert!(laplace_overlap(0.0, 1e-12).is_err());
        let grid = [0.01, 0.05, 0.1, 0.5, 1.0, 3.0];
        let vals: Vec<f64> = grid
            .iter()
            .map(|&l| laplace_overlap(l, 1e-15).unwrap().value)
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    // Reference values from 30-digit quadrature.
    const G0_AT_1: f64 = 1.074_623_622_260_269_5;
    const G0_AT_HALF: f64 = 0.915_940_205_512_797_6;
    const G0_AT_TENTH: f64 = 1.241_132_427_964_862_5;

    #[test]
    fn dickman_density_reference_values() {
        for (t, want) in [(1.0, G0_AT_1), (0.5, G0_AT_HALF), (0.1, G0_AT_TENTH)] {
            let g = dickman_density(t, 1e-12).unwrap();
            assert!(g.value > 0.0);
            assert!(
                (g.value - want).abs() <= 1e-10,
                "t={t}: {} vs {want}",
                g.value
            );
        }
        assert!(dickman_density(0.0, 1e-10).is_err());
        assert!(dickman_density(1.5, 1e-10).is_err());
    }

    /// Independent oracle: composite Simpson on a fine grid of the same integrand.
    #[test]
    fn dickman_density_against_simpson() {
        let f = |s: f64| {
            if s == 0.0 {
                0.0
            } else {
                s * (-EULER_GAMMA * s).exp() / statrs::function::gamma::gamma(s + 1.0)
            }
        };
        let m = 200_000;
        let h = 40.0 / m as f64;
        let mut acc = f(0.0) + f(40.0);
        for i in 1..m {
            acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
        }
        let simpson = acc * h / 3.0;
        assert!((simpson - dickman_density(1.0, 1e-12).unwrap().value).abs() < 1e-10);
    }

    #[test]
    fn dickman_laplace_decreases_and_tracks_log_trend() {
        let lams = [1.0, 10.0, 100.0, 1000.0];
        let vals: Vec<f64> = lams
            .iter()
            .map(|&l| dickman_laplace(l, 1e-12).unwrap().value)
            .collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
        assert!((vals[0] - 0.887_107_360_278_133).abs() < 1e-9);
        let c: Vec<f64> = lams
            .iter()
            .zip(&vals)
            .map(|(l, v)| v * (2.0 + l.ln()))
            .collect();
        let cmax = c.iter().cloned().fold(0.0, f64::max);
        for (l, v) in lams.iter().zip(&vals) {
            assert!(*v <= cmax / (2.0 + l.ln()) + 1e-15);
        }
    }

    #[test]
    fn csv_round_trip() {
        let t = KernelTable::new(50);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"n,u_n,R_n\n"));
        let back = KernelTable::read_csv(&buf[..]).unwrap();
        for n in 1..=50 {
            assert_eq!(back.return_mass(n).unwrap(), t.return_mass(n).unwrap());
            assert_eq!(back.overlap(n), t.overlap(n));
        }
    }

    #[test]
    fn lclt_gap_shrinks() {
        let t = KernelTable::build(64, 6, &[16, 64], 0);
        assert!(t.lclt_gap(64).unwrap() < t.lclt_gap(16).unwrap());
        let clt = t.clone().with_mode(KernelMode::LocalClt);
        assert!((clt.step_kernel(16, Site::ORIGIN).unwrap() - 2.0 / (PI * 16.0)).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn closed_kernel_parity_and_symmetry(n in 0usize..40, x1 in -45i64..45, x2 in -45i64..45) {
            let s = Site::new(x1, x2);
            let q = step_kernel_closed(n, s);
            if (x1 + x2 + n as i64).rem_euclid(2) != 0 {
                prop_assert_eq!(q, 0.0);
            }
            prop_assert_eq!(q, step_kernel_closed(n, Site::new(-x1, x2)));
            prop_assert_eq!(q, step_kernel_closed(n, Site::new(x2, x1)));
        }

        #[test]
        fn binomial_rows_sum_to_one(n in 0usize..3000) {
            let s: f64 = binomial_row(n).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
