//! Exact second moments of the chaos expansion: renewal recursions for the
//! point-to-plane moment, chaos-truncated variances and weighted collision
//! sums, together with an enumeration oracle for tiny systems.

use std::io::Write;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::disorder::critical_sigma2;
use crate::engine::Ring;
use crate::error::{Error, Result};
use crate::kernels::{central_binomial, KernelTable, EULER_GAMMA};
use crate::lattice::{MassFunction, Site};
use crate::rng::sample_cdf;

/// `B(m) = 1 + s Σ_{j=1}^m u(j) B(m−j)` for `m = 0..=n`; `u[0]` is unused.
pub fn renewal_series<T: Ring>(u: &[T], s: &T, n: usize) -> Vec<T> {
    let mut b = Vec::with_capacity(n + 1);
    b.push(T::one());
    for m in 1..=n {
        let mut acc = T::zero();
        for j in 1..=m {
            acc = acc + u[j].clone() * b[m - j].clone();
        }
        b.push(T::one() + s.clone() * acc);
    }
    b
}

/// `V(m) = Σ_{k<K} s^k Σ_{|I|=k, I⊆⟦1,m⟧} u(I)` for `m = 0..=n`, one chaos
/// order at a time: `W_k(m) = Σ_j u(j) W_{k−1}(m−j)`.
pub fn graded_series<T: Ring>(u: &[T], s: &T, n: usize, k: usize) -> Vec<T> {
    let mut level = vec![T::one(); n + 1];
    let mut total = level.clone();
    let mut pow = T::one();
    for _ in 1..k {
        let mut next = vec![T::zero(); n + 1];
        for (m, slot) in next.iter_mut().enumerate().skip(1) {
            let mut acc = T::zero();
            for j in 1..=m {
                acc = acc + u[j].clone() * level[m - j].clone();
            }
            *slot = acc;
        }
        level = next;
        pow = pow * s.clone();
        for (t, l) in total.iter_mut().zip(&level) {
            *t = t.clone() + pow.clone() * l.clone();
        }
    }
    total
}

/// `q_{2i}(f, g)` for `i = 0..=n` by the direct double sum, with any kernel.
pub fn pair_overlaps_direct<T: Ring>(
    f: &[(Site, T)],
    g: &[(Site, T)],
    n: usize,
    kernel: impl Fn(usize, Site) -> T,
) -> Vec<T> {
    (0..=n)
        .map(|i| {
            let mut acc = T::zero();
            for (x, a) in f {
                for (y, b) in g {
                    acc = acc + a.clone() * b.clone() * kernel(2 * i, *y - *x);
                }
            }
            acc
        })
        .collect()
}

/// `s Σ_{i=1}^n q[i] w[n−i]`.
fn first_collision_sum<T: Ring>(q: &[T], w: &[T], s: &T, n: usize) -> T {
    let mut acc = T::zero();
    for i in 1..=n {
        acc = acc + q[i].clone() * w[n - i].clone();
    }
    s.clone() * acc
}

/// The default chaos truncation `⌊log N⌋`.
pub fn default_truncation(n: usize) -> usize {
    ((n as f64).ln().floor() as usize).max(1)
}

fn u_prefix(table: &KernelTable, n: usize) -> Result<&[f64]> {
    if n > table.n_max {
        return Err(Error::Range(format!(
            "horizon {n} beyond kernel table {}",
            table.n_max
        )));
    }
    Ok(&table.u_slice()[..=n])
}

fn check_sigma2(sigma2: f64) -> Result<()> {
    if !(sigma2 >= 0.0 && sigma2.is_finite()) {
        return Err(Error::Domain(format!(
            "sigma^2 = {sigma2} must be finite and >= 0"
        )));
    }
    Ok(())
}

/// `B(m) = E[Z_m(0)²]` for `m = 0..=n`.
pub fn second_moment_point(table: &KernelTable, n: usize, sigma2: f64) -> Result<Vec<f64>> {
    check_sigma2(sigma2)?;
    Ok(renewal_series(u_prefix(table, n)?, &sigma2, n))
}

/// `V(m, K)` for `m = 0..=n`, chaos orders `0..K−1`.
pub fn truncated_variance(
    table: &KernelTable,
    n: usize,
    sigma2: f64,
    k: usize,
) -> Result<Vec<f64>> {
    check_sigma2(sigma2)?;
    if k == 0 {
        return Err(Error::Domain("truncation level K must be >= 1".into()));
    }
    Ok(graded_series(u_prefix(table, n)?, &sigma2, n, k))
}

/// Masses `b_{2i}(2k)` of one rotated coordinate after `2i` steps, for
/// `k = 0..=k_max` (the law is symmetric).
pub(crate) fn even_binomial_band(i: usize, k_max: usize) -> Vec<f64> {
    let mut band = vec![0.0; k_max + 1];
    band[0] = central_binomial(i);
    for k in 0..k_max.min(i) {
        band[k + 1] = band[k] * (i - k) as f64 / (i + k + 1) as f64;
    }
    band
}

/// Cross-correlation `C(d) = Σ_x f(x) g(x + d)` on even rotated offsets
/// `d = (2a, 2b)`, from which `q_{2i}(f, g) = Σ_d C(d) b_{2i}(2a) b_{2i}(2b)`
/// follows because the two rotated coordinates of the walk are independent.
#[derive(Debug, Clone)]
pub struct PairOverlap {
    a_max: i64,
    b_max: i64,
    grid: Vec<f64>,
}

impl PairOverlap {
    pub fn new(f: &MassFunction, g: &MassFunction) -> Self {
        use std::collections::BTreeMap;
        // Rows by u, each a dense run over v in steps of 2.
        fn rows(m: &MassFunction) -> BTreeMap<i64, (i64, Vec<f64>)> {
            let mut by_u: BTreeMap<i64, Vec<(i64, f64)>> = BTreeMap::new();
            for (x, w) in m.iter() {
                by_u.entry(x.u()).or_default().push((x.v(), w));
            }
            by_u.into_iter()
                .map(|(u, e)| {
                    let v0 = e.iter().map(|p| p.0).min().unwrap();
                    let v1 = e.iter().map(|p| p.0).max().unwrap();
                    let mut dense = vec![0.0; ((v1 - v0) / 2 + 1) as usize];
                    for (v, w) in e {
                        dense[((v - v0) / 2) as usize] += w;
                    }
                    (u, (v0, dense))
                })
                .collect()
        }
        let (rf, rg) = (rows(f), rows(g));
        let ext = |m: &MassFunction| m.rotated_radius();
        let (a_max, b_max) = ((ext(f) + ext(g)) / 2 + 1, (ext(f) + ext(g)) / 2 + 1);
        let wb = (2 * b_max + 1) as usize;
        let mut grid = vec![0.0; (2 * a_max + 1) as usize * wb];
        for (&uf, (vf0, df)) in &rf {
            for (&ug, (vg0, dg)) in &rg {
                if (ug - uf).rem_euclid(2) != 0 {
                    continue;
                }
                let a = (ug - uf) / 2;
                let row = &mut grid[(a + a_max) as usize * wb..(a + a_max + 1) as usize * wb];
                // Offset of g's entry q relative to f's entry p is (vg0 − vf0)/2 + q − p.
                let base = (vg0 - vf0) / 2 + b_max;
                for (p, &wf) in df.iter().enumerate() {
                    if wf == 0.0 {
                        continue;
                    }
                    let start = (base - p as i64) as usize;
                    for (c, &wg) in row[start..start + dg.len()].iter_mut().zip(dg) {
                        *c += wf * wg;
                    }
                }
            }
        }
        Self { a_max, b_max, grid }
    }

    /// `q_{2i}(f, g)`.
    pub fn at(&self, i: usize) -> f64 {
        let wb = (2 * self.b_max + 1) as usize;
        let k_max = self.a_max.max(self.b_max) as usize;
        let band = even_binomial_band(i, k_max);
        let sym: Vec<f64> = (-self.b_max..=self.b_max)
            .map(|b| band[b.unsigned_abs() as usize])
            .collect();
        let mut acc = 0.0;
        for a in -self.a_max..=self.a_max {
            let ba = band[a.unsigned_abs() as usize];
            if ba == 0.0 {
                continue;
            }
            let row =
                &self.grid[(a + self.a_max) as usize * wb..(a + self.a_max + 1) as usize * wb];
            let dot: f64 = row.iter().zip(&sym).map(|(c, s)| c * s).sum();
            acc += ba * dot;
        }
        acc
    }

    /// `q_{2i}(f, g)` for `i = 0..=n`.
    pub fn series(&self, n: usize) -> Vec<f64> {
        (0..=n).map(|i| self.at(i)).collect()
    }
}

/// Weighted Green function `G_n(f, g) = Σ_{i=1}^n q_{2i}(f, g)`.
pub fn green_weighted(n: usize, f: &MassFunction, g: &MassFunction) -> f64 {
    PairOverlap::new(f, g).series(n)[1..].iter().sum()
}

/// `E[Z_N(f)²] = (Σf)² + σ² Σ_{i=1}^N q_{2i}(f,f) B(N−i)`; the first term is
/// the empty chaos set, equal to 1 for a probability `f`.
pub fn second_moment_field(
    table: &KernelTable,
    n: usize,
    sigma2: f64,
    f: &MassFunction,
) -> Result<f64> {
    let b = second_moment_point(table, n, sigma2)?;
    let q = PairOverlap::new(f, f).series(n);
    Ok(f.total().powi(2) + first_collision_sum(&q, &b, &sigma2, n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HatMoment {
    /// `E[Ẑ_n(f) Ẑ_n(g)] = σ² Σ_{i=1}^n q_{2i}(f,g) V_{n−i}`.
    pub value: f64,
    /// `σ² V_{n/2} G_{n/2}(f,g)`.
    pub lower: f64,
    /// `σ² V_n G_n(f,g)`.
    pub upper: f64,
}

/// Covariance of the chaos projections onto orders `1..=K`.
pub fn hat_moment(
    table: &KernelTable,
    n: usize,
    sigma2: f64,
    k: usize,
    f: &MassFunction,
    g: &MassFunction,
) -> Result<HatMoment> {
    let v = truncated_variance(table, n, sigma2, k)?;
    let q = PairOverlap::new(f, g).series(n);
    let value = first_collision_sum(&q, &v, &sigma2, n);
    let half = n / 2;
    let g_half: f64 = q[1..=half].iter().sum();
    let g_full: f64 = q[1..].iter().sum();
    Ok(HatMoment {
        value,
        lower: sigma2 * v[half] * g_half,
        upper: sigma2 * v[n] * g_full,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuasiCriticalReport {
    pub n: usize,
    pub theta: f64,
    pub sigma2: f64,
    /// `E[Z_N(U)²]` with `U` uniform on the disc of radius `√N`.
    pub second_moment: f64,
    pub log_log: f64,
    /// `log log E[Z²] − (θ − γ)`.
    pub ratio: f64,
}

/// Exact second moment at the calibrated variance, against the growth
/// `log E[Z²] ≈ e^{θ−γ}`.
pub fn quasicritical_bound_check(
    table: &KernelTable,
    n: usize,
    theta: f64,
) -> Result<QuasiCriticalReport> {
    let sigma2 = critical_sigma2(table, n, theta)?;
    let u = MassFunction::uniform_disc((n as f64).sqrt());
    let second_moment = second_moment_field(table, n, sigma2, &u)?;
    let log_log = second_moment.ln().ln();
    Ok(QuasiCriticalReport {
        n,
        theta,
        sigma2,
        second_moment,
        log_log,
        ratio: log_log - (theta - EULER_GAMMA),
    })
}

/// `σ²V_{Ñ/2}` and `σ²V_Ñ` in units of `e^{θ−η}/(θ−η)`, with `Ñ = ⌊e^{−η}N⌋`
/// and σ² calibrated at `N`.
pub fn truncated_variance_scale(
    table: &KernelTable,
    n: usize,
    theta: f64,
    eta: f64,
    k: usize,
) -> Result<(f64, f64)> {
    if !(eta < theta) {
        return Err(Error::Domain(format!(
            "need eta < theta, got eta = {eta}, theta = {theta}"
        )));
    }
    let sigma2 = critical_sigma2(table, n, theta)?;
    let nt = ((-eta).exp() * n as f64).floor() as usize;
    let v = truncated_variance(table, nt, sigma2, k)?;
    let unit = (theta - eta).exp() / (theta - eta);
    Ok((sigma2 * v[nt / 2] / unit, sigma2 * v[nt] / unit))
}

/// `B(m)` and `V(m, K)` side by side, for export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentSeries {
    pub sigma2: f64,
    pub k: usize,
    pub b: Vec<f64>,
    pub v: Vec<f64>,
}

impl MomentSeries {
    pub fn new(table: &KernelTable, n: usize, sigma2: f64, k: usize) -> Result<Self> {
        Ok(Self {
            sigma2,
            k,
            b: second_moment_point(table, n, sigma2)?,
            v: truncated_variance(table, n, sigma2, k)?,
        })
    }

    /// CSV with header `m,B_m,V_m_K<k>`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "m,B_m,V_m_K{}", self.k)?;
        for (m, (b, v)) in self.b.iter().zip(&self.v).enumerate() {
            writeln!(out, "{m},{b:.16e},{v:.16e}")?;
        }
        Ok(())
    }
}

/// Estimates of `J_ℓ = P(τ∩τ′ = ∅, L(τ,τ′) ≥ ℓ)` for `ℓ = 0..=ell_max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StretchEstimate {
    pub n_tilde: usize,
    pub reps: usize,
    pub j: Vec<f64>,
    pub std_err: Vec<f64>,
}

/// Points in `⟦1, Ñ⟧` of a renewal started uniformly in `⟦1, Ñ⟧` with steps
/// drawn from `cdf` (which covers `⟦1, Ñ⟧`).
fn renewal_points<R: Rng + ?Sized>(n_tilde: usize, cdf: &[f64], rng: &mut R) -> Vec<usize> {
    let mut pts = vec![rng.random_range(1..=n_tilde)];
    loop {
        let next = pts.last().unwrap() + sample_cdf(cdf, rng) + 1;
        if next > n_tilde {
            return pts;
        }
        pts.push(next);
    }
}

/// Number of maximal runs of points from the same renewal in the merged
/// order, or `None` when the two renewals share a point.
pub fn alternating_stretches(a: &[usize], b: &[usize]) -> Option<usize> {
    let (mut i, mut j) = (0, 0);
    let mut runs = 0;
    let mut last = None;
    while i < a.len() || j < b.len() {
        let from_a = match (a.get(i), b.get(j)) {
            (Some(x), Some(y)) if x == y => return None,
            (Some(x), Some(y)) => x < y,
            (Some(_), None) => true,
            _ => false,
        };
        if from_a {
            i += 1;
        } else {
            j += 1;
        }
        if last != Some(from_a) {
            runs += 1;
            last = Some(from_a);
        }
    }
    Some(runs)
}

/// Monte Carlo for alternating stretches of two independent renewals with
/// step law `K(m) = u(m)/R_Ñ` on `⟦1, Ñ⟧`.
pub fn stretch_prob_mc<R: Rng + ?Sized>(
    table: &KernelTable,
    n_tilde: usize,
    ell_max: usize,
    reps: usize,
    rng: &mut R,
) -> Result<StretchEstimate> {
    if reps < 1000 {
        return Err(Error::Domain(format!(
            "stretch estimate needs >= 1000 replicas, got {reps}"
        )));
    }
    if n_tilde > table.n_max || n_tilde == 0 {
        return Err(Error::Range(format!(
            "N~ = {n_tilde} outside kernel table 1..={}",
            table.n_max
        )));
    }
    let cdf = table.renewal_law(n_tilde).cdf();
    let mut hits = vec![0usize; ell_max + 1];
    for _ in 0..reps {
        let a = renewal_points(n_tilde, &cdf, rng);
        let b = renewal_points(n_tilde, &cdf, rng);
        if let Some(l) = alternating_stretches(&a, &b) {
            for h in hits.iter_mut().take(l.min(ell_max) + 1) {
                *h += 1;
            }
        }
    }
    let r = reps as f64;
    let j: Vec<f64> = hits.iter().map(|&h| h as f64 / r).collect();
    let std_err = j.iter().map(|p| (p * (1.0 - p) / r).sqrt()).collect();
    Ok(StretchEstimate {
        n_tilde,
        reps,
        j,
        std_err,
    })
}

/// Moments obtained by summing over every Rademacher configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedMoments {
    pub cells: usize,
    pub mean: BigRational,
    pub second: BigRational,
    /// `E[Ẑ(f) Ẑ(g)]` with chaos orders `1..=K`.
    pub hat: BigRational,
}

/// Rational moments from the recursions, for comparison with
/// [`enumerate_rademacher`].
pub fn rational_moments(
    n: usize,
    t: &BigRational,
    f: &[(Site, BigRational)],
    g: &[(Site, BigRational)],
    k: usize,
) -> (BigRational, BigRational, BigRational) {
    let s = t.clone() * t.clone();
    let u: Vec<BigRational> = (0..=n)
        .map(|j| {
            if j == 0 {
                <BigRational as Ring>::one()
            } else {
                crate::kernels::return_mass_rational(j)
            }
        })
        .collect();
    let b = renewal_series(&u, &s, n);
    let v = graded_series(&u, &s, n, k);
    let kernel = crate::kernels::step_kernel_rational;
    let qff = pair_overlaps_direct(f, f, n, kernel);
    let qfg = pair_overlaps_direct(f, g, n, kernel);
    let total = f
        .iter()
        .fold(<BigRational as Ring>::zero(), |a, e| a + e.1.clone());
    let second = total.clone() * total.clone() + first_collision_sum(&qff, &b, &s, n);
    let hat = first_collision_sum(&qfg, &v, &s, n);
    (total, second, hat)
}

/// Walks of `n` steps from `x` as lists of visited cells `(time, site)`.
fn paths_from(x: Site, n: usize) -> Vec<Vec<(usize, Site)>> {
    let mut out = vec![(x, Vec::new())];
    for t in 1..=n {
        out = out
            .into_iter()
            .flat_map(|(y, cells)| {
                y.neighbors().into_iter().map(move |z| {
                    let mut c = cells.clone();
                    c.push((t, z));
                    (z, c)
                })
            })
            .collect();
    }
    out.into_iter().map(|p| p.1).collect()
}

fn common_denominator(ws: &[&BigRational]) -> BigInt {
    ws.iter().fold(BigInt::one(), |d, w| d * w.denom())
}

/// `E[Z(f)]`, `E[Z(f)²]` and `E[Ẑ(f)Ẑ(g)]` for Rademacher disorder with
/// `tanh β = t`, by summing over all `2^cells` configurations. The weight of a
/// cell is `1 + tω`, and `ξ = tω`. Integer arithmetic after clearing
/// denominators; at most 24 cells.
pub fn enumerate_rademacher(
    n: usize,
    t: &BigRational,
    f: &[(Site, BigRational)],
    g: &[(Site, BigRational)],
    k: usize,
) -> Result<EnumeratedMoments> {
    let mut cells: Vec<(usize, Site)> = Vec::new();
    let mut paths_f = Vec::new();
    let mut paths_g = Vec::new();
    let fd = common_denominator(&f.iter().map(|e| &e.1).collect::<Vec<_>>());
    let gd = common_denominator(&g.iter().map(|e| &e.1).collect::<Vec<_>>());
    let to_i128 = |b: BigInt| {
        b.to_i128()
            .ok_or_else(|| Error::Range("enumeration weights overflow".into()))
    };
    for (set, den, out) in [(f, &fd, &mut paths_f), (g, &gd, &mut paths_g)] {
        for (x, w) in set {
            let wi = to_i128((w * BigRational::from_integer(den.clone())).to_integer())?;
            for p in paths_from(*x, n) {
                let idx: Vec<usize> = p
                    .iter()
                    .map(|c| match cells.iter().position(|d| d == c) {
                        Some(i) => i,
                        None => {
                            cells.push(*c);
                            cells.len() - 1
                        }
                    })
                    .collect();
                out.push((wi, idx));
            }
        }
    }
    if cells.len() > 24 {
        return Err(Error::Unsupported(format!(
            "{} cells is too many to enumerate",
            cells.len()
        )));
    }
    let p = to_i128(t.numer().clone())?;
    let q = to_i128(t.denom().clone())?;
    if p.abs() > q {
        return Err(Error::Domain("need |tanh beta| <= 1".into()));
    }
    if n > 24 {
        return Err(Error::Unsupported(format!(
            "enumeration horizon {n} too long"
        )));
    }
    let qpow: Vec<i128> = (0..=n).map(|d| q.pow((n - d) as u32)).collect();
    let kk = k.min(n);
    // Per path, Σ_d e_d(pω) q^{n−d} over all orders and over orders 1..=K,
    // with e_d the elementary symmetric polynomials of the cell values.
    let weigh = |paths: &[(i128, Vec<usize>)], signs: u32| -> (i128, i128) {
        let (mut full, mut hat) = (0i128, 0i128);
        let mut e = [0i128; 25];
        for (w, idx) in paths {
            e[..=n].fill(0);
            e[0] = 1;
            for (len, &c) in idx.iter().enumerate() {
                let x = if (signs >> c as u32) & 1 == 1 { p } else { -p };
                for d in (1..=len + 1).rev() {
                    e[d] += e[d - 1] * x;
                }
            }
            let trunc: i128 = (1..=kk).map(|d| e[d] * qpow[d]).sum();
            full +=
                w * (e[0] * qpow[0] + trunc + (kk + 1..=n).map(|d| e[d] * qpow[d]).sum::<i128>());
            hat += w * trunc;
        }
        (full, hat)
    };
    let same = f == g;
    let overflow = || Error::Range("enumeration sums overflow".into());
    let (mut sum_z, mut sum_z2, mut sum_hat) = (0i128, 0i128, 0i128);
    for signs in 0u32..(1u32 << cells.len()) {
        let (z, hf) = weigh(&paths_f, signs);
        let hg = if same { hf } else { weigh(&paths_g, signs).1 };
        sum_z = sum_z.checked_add(z).ok_or_else(overflow)?;
        sum_z2 = z
            .checked_mul(z)
            .and_then(|v| sum_z2.checked_add(v))
            .ok_or_else(overflow)?;
        sum_hat = hf
            .checked_mul(hg)
            .and_then(|v| sum_hat.checked_add(v))
            .ok_or_else(overflow)?;
    }
    let (sum_z, sum_z2, sum_hat) = (
        BigInt::from(sum_z),
        BigInt::from(sum_z2),
        BigInt::from(sum_hat),
    );
    let configs = BigInt::one() << cells.len();
    // Z = z / (den · (4q)^n).
    let scale = |den: &BigInt| den * num_traits::pow(BigInt::from(4 * q), n);
    let (sf, sg) = (scale(&fd), scale(&gd));
    let mean = BigRational::new(sum_z, &configs * &sf);
    let second = BigRational::new(sum_z2, &configs * &sf * &sf);
    let hat = BigRational::new(sum_hat, &configs * &sf * &sg);
    Ok(EnumeratedMoments {
        cells: cells.len(),
        mean,
        second,
        hat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::binomial_row;
    use proptest::prelude::*;
    use rand::Rng;

    fn rat(a: i64, b: i64) -> BigRational {
        BigRational::new(a.into(), b.into())
    }

    #[test]
    fn first_values() {
        let t = KernelTable::new(10);
        let b = second_moment_point(&t, 10, 0.7).unwrap();
        assert_eq!(b[0], 1.0);
        assert!((b[1] - (1.0 + 0.7 / 4.0)).abs() < 1e-15);
        let v = truncated_variance(&t, 10, 0.7, 1).unwrap();
        assert!(v.iter().all(|&x| x == 1.0));
    }

    #[test]
    fn renewal_series_equals_hitting_series() {
        let t = KernelTable::new(64);
        let s2 = 0.8;
        for n in [1usize, 5, 17, 64] {
            let b = second_moment_point(&t, n, s2).unwrap()[n];
            let law = t.renewal_law(n);
            let series: f64 = (0..=n)
                .map(|k| (s2 * law.r_n).powi(k as i32) * law.hit_prob(k))
                .sum();
            assert!((b / series - 1.0).abs() < 1e-10, "n={n}: {b} vs {series}");
        }
    }

    #[test]
    fn truncation_exhausts_at_n_plus_one() {
        let t = KernelTable::new(40);
        let b = second_moment_point(&t, 40, 1.3).unwrap();
        let v = truncated_variance(&t, 40, 1.3, 41).unwrap();
        for m in 0..=40 {
            assert!((v[m] / b[m] - 1.0).abs() < 1e-12);
        }
        // Exact equality of the two finite sums in rationals.
        let u: Vec<BigRational> = (0..=8)
            .map(|j| {
                if j == 0 {
                    <BigRational as Ring>::one()
                } else {
                    crate::kernels::return_mass_rational(j)
                }
            })
            .collect();
        let s = rat(3, 7);
        assert_eq!(renewal_series(&u, &s, 8), graded_series(&u, &s, 8, 9));
    }

    #[test]
    fn truncated_variance_is_monotone_and_below_full() {
        let t = KernelTable::new(200);
        let b = second_moment_point(&t, 200, 0.5).unwrap();
        let mut prev = truncated_variance(&t, 200, 0.5, 1).unwrap();
        for k in 2..8 {
            let v = truncated_variance(&t, 200, 0.5, k).unwrap();
            for m in 0..=200 {
                assert!(v[m] >= prev[m] && v[m] <= b[m] * (1.0 + 1e-15));
            }
            prev = v;
        }
    }

    #[test]
    fn pair_overlap_matches_direct_sum() {
        let f = MassFunction::new([
            (Site::new(0, 0), 0.3),
            (Site::new(2, 1), 0.5),
            (Site::new(-1, 0), 0.2),
        ])
        .unwrap();
        let g = MassFunction::new([(Site::new(1, 1), 0.6), (Site::new(-3, 2), 0.4)]).unwrap();
        let fe: Vec<_> = f.iter().collect();
        let ge: Vec<_> = g.iter().collect();
        let fast = PairOverlap::new(&f, &g).series(40);
        // Reference kernel from full binomial rows, without lnΓ shortcuts.
        let kernel = |n: usize, x: Site| {
            let row = binomial_row(n);
            let at = |k: i64| {
                let i = (n as i64 + k) / 2;
                if (n as i64 + k) % 2 != 0 || !(0..=n as i64).contains(&i) {
                    0.0
                } else {
                    row[i as usize]
                }
            };
            at(x.u()) * at(x.v())
        };
        let slow = pair_overlaps_direct(&fe, &ge, 40, kernel);
        for i in 0..=40 {
            assert!(
                (fast[i] - slow[i]).abs() <= 1e-13 * slow[i].abs().max(1e-300),
                "i={i}"
            );
        }
    }

    #[test]
    fn green_function_special_cases() {
        let t = KernelTable::new(100);
        let d = MassFunction::dirac(Site::ORIGIN);
        assert!((green_weighted(100, &d, &d) - t.overlap(100)).abs() < 1e-13);
        let f = MassFunction::uniform_disc(3.0);
        let g = MassFunction::new([(Site::new(4, 1), 1.0), (Site::new(0, 0), 2.0)]).unwrap();
        assert_eq!(green_weighted(50, &f, &g), green_weighted(50, &g, &f));
        let b = second_moment_point(&t, 100, 0.9).unwrap();
        assert!((second_moment_field(&t, 100, 0.9, &d).unwrap() - b[100]).abs() < 1e-12);
        assert!((second_moment_field(&t, 100, 0.0, &f).unwrap() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn hat_moment_special_cases() {
        let t = KernelTable::new(60);
        let d = MassFunction::dirac(Site::ORIGIN);
        let f = MassFunction::uniform_disc(2.0);
        let h = hat_moment(&t, 60, 0.7, 1, &f, &d).unwrap();
        assert!((h.value - 0.7 * green_weighted(60, &f, &d)).abs() < 1e-14);
        let v = truncated_variance(&t, 60, 0.7, 4).unwrap();
        let direct: f64 = (1..=60).map(|i| t.u_slice()[i] * v[60 - i]).sum::<f64>() * 0.7;
        assert!((hat_moment(&t, 60, 0.7, 4, &d, &d).unwrap().value - direct).abs() < 1e-14);
    }

    #[test]
    fn brute_force_point_moments() {
        let f = [(Site::ORIGIN, <BigRational as Ring>::one())];
        for (n, t) in [(1usize, rat(1, 2)), (2, rat(2, 3))] {
            let e = enumerate_rademacher(n, &t, &f, &f, 2).unwrap();
            let (mean, second, hat) = rational_moments(n, &t, &f, &f, 2);
            assert_eq!(e.mean, mean);
            assert_eq!(e.second, second);
            assert_eq!(e.hat, hat);
            if n == 1 {
                assert_eq!(e.cells, 4);
                assert_eq!(
                    second,
                    <BigRational as Ring>::one() + t.clone() * t.clone() / rat(4, 1)
                );
            } else {
                assert_eq!(e.cells, 13);
            }
        }
    }

    #[test]
    fn brute_force_field_moments() {
        let f = [(Site::new(1, 1), rat(1, 2)), (Site::new(-1, 1), rat(1, 2))];
        let g = [(Site::new(1, 1), rat(1, 3)), (Site::new(0, 0), rat(2, 3))];
        let t = rat(3, 5);
        for k in [1, 2] {
            let e = enumerate_rademacher(2, &t, &f, &f, k).unwrap();
            let (mean, second, hat) = rational_moments(2, &t, &f, &f, k);
            assert_eq!((e.mean, e.second, e.hat), (mean, second, hat));
        }
        let e = enumerate_rademacher(1, &t, &f, &g, 1).unwrap();
        let (_, _, hat) = rational_moments(1, &t, &f, &g, 1);
        assert_eq!(e.hat, hat);
    }

    #[test]
    fn sandwich_on_random_pairs() {
        let t = KernelTable::new(64);
        let mut rng = crate::rng::StreamKey::new(4, 0, crate::rng::Tag::Aux).stream();
        for _ in 0..50 {
            let mut pick = || {
                let sites: Vec<(Site, f64)> = (0..4)
                    .map(|_| {
                        (
                            Site::new(rng.random_range(-6..=6), rng.random_range(-6..=6)),
                            rng.random_range(0.01..1.0),
                        )
                    })
                    .collect();
                MassFunction::new(sites).unwrap()
            };
            let (f, g) = (pick(), pick());
            let s2 = rng.random_range(0.05..1.5);
            let h = hat_moment(&t, 64, s2, 4, &f, &g).unwrap();
            assert!(
                h.lower <= h.value * (1.0 + 1e-12) && h.value <= h.upper * (1.0 + 1e-12),
                "{h:?}"
            );
        }
    }

    #[test]
    fn quasicritical_growth_is_within_slack() {
        let t = KernelTable::new(1 << 10);
        let r = quasicritical_bound_check(&t, 1 << 10, 2.0).unwrap();
        assert!(r.second_moment > 1.0 && r.ratio.is_finite());
        assert!(quasicritical_bound_check(&t, 1 << 10, 100.0).is_err());
    }

    #[test]
    fn stretches_count_runs() {
        assert_eq!(alternating_stretches(&[1, 2, 9], &[4, 5]), Some(3));
        assert_eq!(alternating_stretches(&[3], &[1, 7]), Some(3));
        assert_eq!(alternating_stretches(&[3, 4], &[4]), None);
        assert_eq!(alternating_stretches(&[], &[2]), Some(1));
    }

    #[test]
    fn stretch_probabilities_are_nested() {
        let t = KernelTable::new(256);
        let mut rng = crate::rng::StreamKey::new(9, 0, crate::rng::Tag::Renewal).stream();
        let e = stretch_prob_mc(&t, 256, 8, 20_000, &mut rng).unwrap();
        assert!(e.j[2] <= 1.0);
        for l in 2..8 {
            assert!(e.j[l + 1] <= e.j[l] + 2.0 * e.std_err[l]);
        }
        assert!(stretch_prob_mc(&t, 256, 8, 10, &mut rng).is_err());
    }

    #[test]
    fn csv_header_records_truncation() {
        let t = KernelTable::new(8);
        let s = MomentSeries::new(&t, 8, 0.5, 3).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("m,B_m,V_m_K3\n0,1.0000000000000000e0,1.0000000000000000e0\n"));
        assert_eq!(text.lines().count(), 10);
    }

    proptest! {
        #[test]
        fn field_second_moment_at_least_one(s2 in 0.0f64..2.0, r in 0.0f64..4.0, n in 1usize..40) {
            let t = KernelTable::new(40);
            let f = MassFunction::uniform_disc(r);
            prop_assert!(second_moment_field(&t, n, s2, &f).unwrap() >= 1.0 - 1e-12);
        }
    }
}
