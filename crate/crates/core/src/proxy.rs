//! The coarse-grained proxy `X = Σ_ℓ X_{2ℓ}`: strip-wise first chaos blocks
//! of the partition function, their exact second moments, Monte Carlo under
//! the plain and size-biased laws, and the Chebyshev event `A_N`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::disorder::DisorderModel;
use crate::engine::{
    partition_constrained, sizebias_sample, CounterField, Coupling, Environment, SweepOptions,
    Window,
};
use crate::error::{Error, Result};
use crate::kernels::{binomial_row, KernelTable};
use crate::lattice::{disc_sites, MassFunction, Site};
use crate::moments::{even_binomial_band, graded_series, renewal_series};
use crate::rng::tilted_seed;
use crate::stats::{run_replicas, Check, Estimate};

/// Start laws and sweeps are cut to `|u|, |v| ≤ cutoff·√n` in rotated
/// coordinates; at 5 the discarded walk mass is below 1e−5.
pub const DEFAULT_CUTOFF: f64 = 5.0;

/// Largest effective length for the truncated proxy, which enumerates chaos
/// orders site by site.
pub const TRUNCATED_MAX_N: usize = 12;

/// Grid size above which [`default_grid`] subsamples.
pub const GRID_CAP: usize = 10_000;

/// Time axis `⟦1, 2MÑ⟧` cut into `2M` strips of width `Ñ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StripDecomposition {
    pub n: usize,
    pub n_effective: usize,
    pub n_tilde: usize,
    pub eta: f64,
    pub m: usize,
}

/// `M = ⌈e^η/2⌉`, `Ñ = ⌊N/2M⌋`, `N_effective = 2MÑ`.
pub fn make_strips(n: usize, eta: f64) -> Result<StripDecomposition> {
    if !(eta >= std::f64::consts::LN_2 - 1e-12) || !eta.is_finite() {
        return Err(Error::Domain(format!(
            "strip parameter eta must be >= log 2, got {eta}"
        )));
    }
    // The slack keeps η = log 2 at M = 1 despite rounding in e^η.
    let m = (eta.exp() / 2.0 - 1e-12).ceil().max(1.0) as usize;
    let n_tilde = n / (2 * m);
    if n_tilde < 4 {
        return Err(Error::StripsTooThin { width: n_tilde });
    }
    Ok(StripDecomposition {
        n,
        n_effective: 2 * m * n_tilde,
        n_tilde,
        eta,
        m,
    })
}

impl StripDecomposition {
    /// Strips of a given width without the thinness guard, for toy sizes.
    pub fn from_width(n_tilde: usize, m: usize) -> Result<Self> {
        if n_tilde == 0 || m == 0 {
            return Err(Error::Domain(
                "strip width and count must be positive".into(),
            ));
        }
        let n = 2 * m * n_tilde;
        Ok(Self {
            n,
            n_effective: n,
            n_tilde,
            eta: (2.0 * m as f64).ln(),
            m,
        })
    }

    /// Times `(s, t)` with strip `j` covering `s+1..=t`.
    pub fn interval(&self, j: usize) -> (usize, usize) {
        ((j - 1) * self.n_tilde, j * self.n_tilde)
    }

    /// Indices `2, 4, …, 2M`.
    pub fn even_strips(&self) -> Vec<usize> {
        (1..=self.m).map(|l| 2 * l).collect()
    }
}

/// Law of `x + S_n`, cut to `|Δu|, |Δv| ≤ cutoff·√n` when a cutoff is given,
/// with the retained mass.
pub fn walk_law(n: usize, x: Site, cutoff: Option<f64>) -> (MassFunction, f64) {
    let row = binomial_row(n);
    let ni = n as i64;
    let h = cutoff
        .map(|c| (c * (n as f64).sqrt()).floor() as i64)
        .unwrap_or(ni)
        .min(ni);
    // Entry i of the row is the displacement 2i − n.
    let idx: Vec<usize> = (0..=n)
        .filter(|&i| (2 * i as i64 - ni).abs() <= h)
        .collect();
    let mut entries = Vec::with_capacity(idx.len() * idx.len());
    let mut kept = 0.0;
    for &a in &idx {
        for &b in &idx {
            let w = row[a] * row[b];
            kept += w;
            entries.push((
                Site::from_rotated(x.u() + 2 * a as i64 - ni, x.v() + 2 * b as i64 - ni),
                w,
            ));
        }
    }
    (
        MassFunction::new(entries).expect("binomial masses are finite"),
        kept,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProxyMode {
    /// `X_j = Z_Ñ(μ_j) − 1`, all chaos orders.
    Untruncated,
    /// Chaos orders `1..=K` only.
    Truncated(usize),
}

#[derive(Debug, Clone)]
struct StripLaw {
    s: usize,
    t: usize,
    mu: MassFunction,
    /// Mean of the windowed `Z(μ)`, subtracted so that `E[X_j] = 0` exactly.
    offset: f64,
}

/// A configured proxy: strips, mode and the strip start laws `μ_j = q_{(j−1)Ñ}`.
#[derive(Debug, Clone)]
pub struct Proxy {
    pub strips: StripDecomposition,
    pub mode: ProxyMode,
    pub cutoff: f64,
    laws: Vec<StripLaw>,
    opts: SweepOptions,
}

/// Per-strip values `X_{2ℓ}` and their sum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyValue {
    pub total: f64,
    pub strips: Vec<f64>,
}

/// A field with every ω = 0.
struct Flat;

impl Environment for Flat {
    fn omega(&self, _n: usize, _u: i64, _v: i64) -> f64 {
        0.0
    }
}

impl Proxy {
    pub fn new(strips: StripDecomposition, mode: ProxyMode, cutoff: f64) -> Result<Self> {
        if !(cutoff > 0.0) {
            return Err(Error::Domain(format!(
                "cutoff must be positive, got {cutoff}"
            )));
        }
        if let ProxyMode::Truncated(k) = mode {
            if strips.n_effective > TRUNCATED_MAX_N {
                return Err(Error::Unsupported(format!(
                    "truncated proxy needs N_effective <= {TRUNCATED_MAX_N}, got {}",
                    strips.n_effective
                )));
            }
            if k == 0 {
                return Err(Error::Domain("truncation order must be >= 1".into()));
            }
        }
        let opts = SweepOptions {
            window: Some(Window {
                base: 2.0,
                slope: cutoff,
            }),
            ..Default::default()
        };
        let flat = Coupling::from_parts(0.0, 0.0);
        let mut laws = Vec::new();
        for j in strips.even_strips() {
            let (s, t) = strips.interval(j);
            let (mu, _) = walk_law(s, Site::ORIGIN, Some(cutoff));
            let offset = match mode {
                ProxyMode::Untruncated => {
                    partition_constrained(&Flat, &flat, &mu, s, t, &|_| true, &opts)?.z()
                }
                ProxyMode::Truncated(_) => 0.0,
            };
            laws.push(StripLaw { s, t, mu, offset });
        }
        Ok(Self {
            strips,
            mode,
            cutoff,
            laws,
            opts,
        })
    }

    /// `X` on one disorder field.
    pub fn value<E: Environment>(&self, env: &E, c: &Coupling) -> Result<ProxyValue> {
        let mut strips = Vec::with_capacity(self.laws.len());
        for law in &self.laws {
            let x = match self.mode {
                ProxyMode::Untruncated => {
                    partition_constrained(env, c, &law.mu, law.s, law.t, &|_| true, &self.opts)?.z()
                        - law.offset
                }
                ProxyMode::Truncated(k) => graded_strip(env, c, law.s, law.t, k),
            };
            strips.push(x);
        }
        Ok(ProxyValue {
            total: strips.iter().sum(),
            strips,
        })
    }
}

/// `Σ_{A ⊆ ⟦s+1,t⟧×ℤ², 1 ≤ |A| ≤ k} q(A) ξ(A)` for the walk from the origin,
/// by carrying chaos orders `0..=k` along the sweep.
fn graded_strip<E: Environment>(env: &E, c: &Coupling, s: usize, t: usize, k: usize) -> f64 {
    let mut cur: BTreeMap<Site, Vec<f64>> = BTreeMap::new();
    let mut start = vec![0.0; k + 1];
    start[0] = 1.0;
    cur.insert(Site::ORIGIN, start);
    for n in 1..=t {
        let mut nxt: BTreeMap<Site, Vec<f64>> = BTreeMap::new();
        for (x, w) in &cur {
            for y in x.neighbors() {
                let e = nxt.entry(y).or_insert_with(|| vec![0.0; k + 1]);
                for (a, b) in e.iter_mut().zip(w) {
                    *a += 0.25 * b;
                }
            }
        }
        if n > s {
            for (y, w) in nxt.iter_mut() {
                let xi = c.weight(env.omega(n, y.u(), y.v())) - 1.0;
                for ord in (1..=k).rev() {
                    w[ord] += xi * w[ord - 1];
                }
            }
        }
        cur = nxt;
    }
    cur.values().map(|w| w[1..].iter().sum::<f64>()).sum()
}

/// Even-parity sites with `|x| ≤ √Ñ`; beyond [`GRID_CAP`] sites, an evenly
/// spaced subsample in order of radius that keeps the outermost site.
pub fn default_grid(n_tilde: usize) -> Vec<Site> {
    let mut sites: Vec<Site> = disc_sites((n_tilde as f64).sqrt())
        .into_iter()
        .filter(|x| x.parity() == 0)
        .collect();
    if sites.len() <= GRID_CAP {
        return sites;
    }
    sites.sort_by(|a, b| a.norm2().total_cmp(&b.norm2()).then(a.cmp(b)));
    let n = sites.len();
    (0..GRID_CAP)
        .map(|i| sites[(i * (n - 1)) / (GRID_CAP - 1)])
        .collect()
}

/// `W = B` or `V(·, K)` on `0..=Ñ`.
fn chaos_weights(
    table: &KernelTable,
    strips: &StripDecomposition,
    sigma2: f64,
    mode: ProxyMode,
) -> Vec<f64> {
    let nt = strips.n_tilde;
    let u = &table.u_slice()[..=nt];
    match mode {
        ProxyMode::Untruncated => renewal_series(u, &sigma2, nt),
        ProxyMode::Truncated(k) => graded_series(u, &sigma2, nt, k),
    }
}

/// `Σ_i u((j−1)Ñ+i) W(Ñ−i)` and `Σ_i q_{2((j−1)Ñ+i)}(x) W(Ñ−i)` for each `x`,
/// both without the factor σ².
fn strip_sums(u: &[f64], w: &[f64], nt: usize, j: usize, grid: &[Site]) -> (f64, Vec<f64>) {
    let k_max = grid.iter().map(|x| x.l1()).max().unwrap_or(0) as usize / 2;
    let base = (j - 1) * nt;
    let mut var = 0.0;
    let mut means = vec![0.0; grid.len()];
    for i in 1..=nt {
        let m = base + i;
        let wi = w[nt - i];
        var += u[m] * wi;
        let band = even_binomial_band(m, k_max);
        for (acc, x) in means.iter_mut().zip(grid) {
            let (a, b) = (
                (x.u().unsigned_abs() / 2) as usize,
                (x.v().unsigned_abs() / 2) as usize,
            );
            *acc += band[a] * band[b] * wi;
        }
    }
    (var, means)
}

fn check_moment_inputs(
    table: &KernelTable,
    strips: &StripDecomposition,
    sigma2: f64,
    grid: &[Site],
) -> Result<()> {
    if !(sigma2 >= 0.0) || !sigma2.is_finite() {
        return Err(Error::Domain(format!(
            "sigma^2 must be finite and >= 0, got {sigma2}"
        )));
    }
    if table.n_max < strips.n_effective {
        return Err(Error::Range(format!(
            "kernel table covers n <= {}, need {}",
            table.n_max, strips.n_effective
        )));
    }
    if grid.is_empty() {
        return Err(Error::Domain("empty x-grid".into()));
    }
    if let Some(x) = grid.iter().find(|x| x.parity() != 0) {
        return Err(Error::Parity(format!(
            "grid site {x} has odd parity; the tilted mean vanishes there"
        )));
    }
    Ok(())
}

/// `Ẽ_x[X_j]` for one strip `j` and start `x`.
pub fn strip_tilted_mean(
    table: &KernelTable,
    strips: &StripDecomposition,
    sigma2: f64,
    mode: ProxyMode,
    j: usize,
    x: Site,
) -> Result<f64> {
    check_moment_inputs(table, strips, sigma2, &[x])?;
    if j == 0 || j > 2 * strips.m {
        return Err(Error::Domain(format!(
            "strip index {j} outside 1..={}",
            2 * strips.m
        )));
    }
    let w = chaos_weights(table, strips, sigma2, mode);
    Ok(sigma2 * strip_sums(table.u_slice(), &w, strips.n_tilde, j, &[x]).1[0])
}

/// Exact `Var(X)` and `Ẽ_x[X]` on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactProxyMoments {
    pub sigma2: f64,
    pub variance: f64,
    pub strip_variance: Vec<f64>,
    pub tilted_mean: Vec<(Site, f64)>,
    /// Minimum over the grid, a grid infimum only.
    pub e_inf: f64,
    pub e_inf_site: Site,
}

/// `Var(X_j) = σ² Σ_{i=1}^{Ñ} u((j−1)Ñ+i) W(Ñ−i)` and
/// `Ẽ_x[X_j] = σ² Σ_{i=1}^{Ñ} q_{2((j−1)Ñ+i)}(x) W(Ñ−i)`, with `W = B` for the
/// untruncated proxy and `W = V(·, K)` for the truncated one.
pub fn proxy_exact_moments(
    table: &KernelTable,
    strips: &StripDecomposition,
    sigma2: f64,
    mode: ProxyMode,
    grid: &[Site],
) -> Result<ExactProxyMoments> {
    check_moment_inputs(table, strips, sigma2, grid)?;
    let w = chaos_weights(table, strips, sigma2, mode);
    let u = table.u_slice();
    let mut strip_variance = Vec::new();
    let mut means = vec![0.0; grid.len()];
    for j in strips.even_strips() {
        let (var, m) = strip_sums(u, &w, strips.n_tilde, j, grid);
        strip_variance.push(sigma2 * var);
        for (a, b) in means.iter_mut().zip(m) {
            *a += b;
        }
    }
    let tilted_mean: Vec<(Site, f64)> = grid
        .iter()
        .zip(&means)
        .map(|(&x, &m)| (x, sigma2 * m))
        .collect();
    let (e_inf_site, e_inf) = tilted_mean
        .iter()
        .copied()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .expect("grid is not empty");
    Ok(ExactProxyMoments {
        sigma2,
        variance: strip_variance.iter().sum(),
        strip_variance,
        tilted_mean,
        e_inf,
        e_inf_site,
    })
}

/// `X` on `reps` plain fields.
pub fn proxy_plain_mc(
    model: DisorderModel,
    beta: f64,
    proxy: &Proxy,
    reps: u64,
    seed: u64,
) -> Result<Vec<ProxyValue>> {
    let c = Coupling::new(&model, beta)?;
    run_replicas(reps, |r| {
        proxy.value(&CounterField::new(model, seed, r), &c)
    })
}

/// `X` on `reps` size-biased fields `P̃_x`.
pub fn proxy_tilted_mc(
    model: DisorderModel,
    beta: f64,
    proxy: &Proxy,
    x: Site,
    reps: u64,
    seed: u64,
) -> Result<Vec<ProxyValue>> {
    let c = Coupling::new(&model, beta)?;
    let start = MassFunction::dirac(x);
    let n = proxy.strips.n_effective;
    let seed = tilted_seed(seed);
    run_replicas(reps, |r| {
        let (_, env) = sizebias_sample(model, beta, n, &start, seed, r)?;
        proxy.value(&env, &c)
    })
}

/// MC estimate of `Ẽ_x[X]` and `Var̃_x(X)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TiltedVariance {
    pub x: Site,
    pub reps: u64,
    pub mean: Estimate,
    pub variance: Estimate,
}

pub fn proxy_tilted_variance_mc(
    model: DisorderModel,
    beta: f64,
    proxy: &Proxy,
    x: Site,
    reps: u64,
    seed: u64,
) -> Result<TiltedVariance> {
    if reps < 1000 {
        return Err(Error::Domain(format!(
            "tilted variance needs at least 1000 replicas, got {reps}"
        )));
    }
    let xs: Vec<f64> = proxy_tilted_mc(model, beta, proxy, x, reps, seed)?
        .into_iter()
        .map(|v| v.total)
        .collect();
    Ok(TiltedVariance {
        x,
        reps,
        mean: Estimate::mean_of(&xs),
        variance: Estimate::variance_of(&xs),
    })
}

/// Exact moments, plain and size-biased Monte Carlo, and the Chebyshev bounds
/// for `A_N = {X ≥ ½Ẽ_inf}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyReport {
    pub strips: StripDecomposition,
    pub mode: ProxyMode,
    pub cutoff: f64,
    pub beta: f64,
    pub reps: u64,
    pub seed: u64,
    pub exact: ExactProxyMoments,
    /// Start of the size-biased walk: the grid minimizer of `Ẽ_x[X]`.
    pub tilt_site: Site,
    pub tilted_mean_exact: f64,
    pub mean_mc: Estimate,
    pub variance_mc: Estimate,
    pub tilted_mean_mc: Estimate,
    pub tilted_variance_mc: Estimate,
    /// Sample covariance of the first two even strips under `P`.
    pub strip_covariance: Option<Estimate>,
    pub threshold: f64,
    pub chebyshev_plain: f64,
    pub chebyshev_tilted: f64,
    pub prob_event: Estimate,
    pub prob_tilted_complement: Estimate,
    pub checks: Vec<Check>,
}

impl ProxyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

pub fn event_report(
    model: DisorderModel,
    beta: f64,
    table: &KernelTable,
    proxy: &Proxy,
    grid: &[Site],
    reps: u64,
    seed: u64,
) -> Result<ProxyReport> {
    let sigma2 = model.pair_variance(beta)?;
    let exact = proxy_exact_moments(table, &proxy.strips, sigma2, proxy.mode, grid)?;
    if !(exact.e_inf > 0.0) {
        return Err(Error::TiltedMeanNotPositive(exact.e_inf));
    }
    let tilt_site = exact.e_inf_site;
    let plain = proxy_plain_mc(model, beta, proxy, reps, seed)?;
    let tilted = proxy_tilted_mc(model, beta, proxy, tilt_site, reps, seed)?;
    let xs: Vec<f64> = plain.iter().map(|v| v.total).collect();
    let ys: Vec<f64> = tilted.iter().map(|v| v.total).collect();
    let threshold = 0.5 * exact.e_inf;
    let inf2 = exact.e_inf * exact.e_inf;
    let mean_mc = Estimate::mean_of(&xs);
    let variance_mc = Estimate::variance_of(&xs);
    let tilted_mean_mc = Estimate::mean_of(&ys);
    let tilted_variance_mc = Estimate::variance_of(&ys);
    let prob_event = Estimate::fraction(&xs, |&x| x >= threshold);
    let prob_tilted_complement = Estimate::fraction(&ys, |&y| y < threshold);
    let chebyshev_plain = 4.0 * exact.variance / inf2;
    let chebyshev_tilted = 4.0 * tilted_variance_mc.value / inf2;
    let bound_se = 4.0 * tilted_variance_mc.se / inf2;
    let strip_covariance = (proxy.strips.m >= 2).then(|| {
        let pairs: Vec<f64> = plain.iter().map(|v| v.strips[0] * v.strips[1]).collect();
        Estimate::mean_of(&pairs)
    });
    let tilted_mean_exact = exact.e_inf;
    let mut checks = vec![
        Check::agree("mean zero", mean_mc.value, 0.0, mean_mc.se, 3.0),
        Check::agree(
            "variance matches exact",
            variance_mc.value,
            exact.variance,
            variance_mc.se,
            3.0,
        ),
        Check::agree(
            "tilted mean matches exact",
            tilted_mean_mc.value,
            tilted_mean_exact,
            tilted_mean_mc.se,
            3.0,
        ),
        Check::at_most(
            "P(A_N) within Chebyshev bound",
            prob_event.value,
            chebyshev_plain + 3.0 * prob_event.se,
        ),
        Check::at_most(
            "tilted P(A_N^c) within Chebyshev bound",
            prob_tilted_complement.value,
            chebyshev_tilted + 3.0 * (bound_se + prob_tilted_complement.se),
        ),
    ];
    if let Some(cov) = strip_covariance {
        checks.push(Check::agree(
            "even strips uncorrelated",
            cov.value,
            0.0,
            cov.se,
            3.0,
        ));
    }
    Ok(ProxyReport {
        strips: proxy.strips,
        mode: proxy.mode,
        cutoff: proxy.cutoff,
        beta,
        reps,
        seed,
        exact,
        tilt_site,
        tilted_mean_exact,
        mean_mc,
        variance_mc,
        tilted_mean_mc,
        tilted_variance_mc,
        strip_covariance,
        threshold,
        chebyshev_plain,
        chebyshev_tilted,
        prob_event,
        prob_tilted_complement,
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::step_kernel_rational;
    use crate::{critical_sigma2, solve_beta};
    use num_traits::ToPrimitive;
    use proptest::prelude::*;

    #[test]
    fn strip_rounding() {
        let s = make_strips(1024, std::f64::consts::LN_2).unwrap();
        assert_eq!((s.m, s.n_tilde, s.n_effective), (1, 512, 1024));
        let s = make_strips(1000, 1.0).unwrap();
        assert_eq!((s.m, s.n_tilde, s.n_effective), (2, 250, 1000));
        assert!(matches!(
            make_strips(16, 3.0),
            Err(Error::StripsTooThin { .. })
        ));
        assert!(make_strips(1024, 0.5).is_err());
        let s = make_strips(1030, 4.0 / 3.0).unwrap();
        assert_eq!((s.m, s.n_tilde, s.n_effective), (2, 257, 1028));
        assert_eq!(s.interval(2), (257, 514));
        assert_eq!(s.even_strips(), vec![2, 4]);
    }

    #[test]
    fn walk_law_is_the_step_kernel() {
        let x = Site::new(2, -1);
        let (law, kept) = walk_law(7, x, None);
        assert!((kept - 1.0).abs() < 1e-14);
        assert_eq!(law.len(), 64);
        for (z, w) in law.iter() {
            let want = step_kernel_rational(7, z - x).to_f64().unwrap();
            assert!((w - want).abs() < 1e-16, "{z}: {w} vs {want}");
        }
        let (cut, kept) = walk_law(400, Site::ORIGIN, Some(3.0));
        assert!(kept < 1.0 && kept > 0.99);
        assert!((cut.total() - kept).abs() < 1e-12);
    }

    #[test]
    fn zero_beta_gives_zero() {
        let strips = StripDecomposition::from_width(3, 2).unwrap();
        let c = Coupling::from_parts(0.0, 0.0);
        for model in [DisorderModel::gaussian(), DisorderModel::rademacher()] {
            let env = CounterField::new(model, 3, 0);
            for mode in [ProxyMode::Untruncated, ProxyMode::Truncated(3)] {
                let p = Proxy::new(strips, mode, DEFAULT_CUTOFF).unwrap();
                assert_eq!(p.value(&env, &c).unwrap().total, 0.0);
            }
        }
    }

    #[test]
    fn truncated_mode_needs_small_sizes() {
        let s = make_strips(64, 2.0).unwrap();
        assert!(Proxy::new(s, ProxyMode::Truncated(2), DEFAULT_CUTOFF).is_err());
        assert!(Proxy::new(s, ProxyMode::Untruncated, DEFAULT_CUTOFF).is_ok());
    }

    /// `Σ_{A, |A| ≤ 2} q(A) ξ(A)` by listing cells and pairs of cells.
    fn subset_oracle(env: &CounterField, c: &Coupling, s: usize, t: usize) -> f64 {
        let mut cells = Vec::new();
        for n in s + 1..=t {
            let r = n as i64;
            for x1 in -r..=r {
                for x2 in -r..=r {
                    let x = Site::new(x1, x2);
                    if x.l1() <= r && (x.l1() - r) % 2 == 0 {
                        cells.push((n, x, c.weight(env.omega(n, x.u(), x.v())) - 1.0));
                    }
                }
            }
        }
        let q = |n: usize, x: Site| step_kernel_rational(n, x).to_f64().unwrap();
        let mut acc = 0.0;
        for (i, &(n1, x1, xi1)) in cells.iter().enumerate() {
            acc += q(n1, x1) * xi1;
            for &(n2, x2, xi2) in &cells[i + 1..] {
                if n2 > n1 {
                    acc += q(n1, x1) * q(n2 - n1, x2 - x1) * xi1 * xi2;
                }
            }
        }
        acc
    }

    #[test]
    fn truncated_mode_matches_subset_enumeration() {
        let strips = StripDecomposition::from_width(2, 2).unwrap();
        assert_eq!(strips.n_effective, 8);
        let model = DisorderModel::rademacher();
        let c = Coupling::new(&model, 0.7).unwrap();
        let p = Proxy::new(strips, ProxyMode::Truncated(2), DEFAULT_CUTOFF).unwrap();
        for seed in 0..3 {
            let env = CounterField::new(model, seed, 0);
            let got = p.value(&env, &c).unwrap();
            for (k, j) in strips.even_strips().into_iter().enumerate() {
                let (s, t) = strips.interval(j);
                let want = subset_oracle(&env, &c, s, t);
                assert!(
                    (got.strips[k] - want).abs() < 1e-13,
                    "strip {j}: {} vs {want}",
                    got.strips[k]
                );
            }
        }
    }

    #[test]
    fn all_orders_recover_the_untruncated_proxy() {
        // A strip of width 3 holds at most 3 cells of any path.
        let strips = StripDecomposition::from_width(3, 2).unwrap();
        let model = DisorderModel::gaussian();
        let c = Coupling::new(&model, 0.8).unwrap();
        let full = Proxy::new(strips, ProxyMode::Untruncated, DEFAULT_CUTOFF).unwrap();
        let trunc = Proxy::new(strips, ProxyMode::Truncated(3), DEFAULT_CUTOFF).unwrap();
        for seed in 0..4 {
            let env = CounterField::new(model, seed, 1);
            let (a, b) = (
                full.value(&env, &c).unwrap(),
                trunc.value(&env, &c).unwrap(),
            );
            assert!(
                (a.total - b.total).abs() < 1e-13 * (1.0 + a.total.abs()),
                "{a:?} vs {b:?}"
            );
        }
    }

    #[test]
    fn exact_moments_vanish_without_disorder() {
        let table = KernelTable::new(64);
        let strips = make_strips(64, 2.0).unwrap();
        let m = proxy_exact_moments(
            &table,
            &strips,
            0.0,
            ProxyMode::Untruncated,
            &default_grid(strips.n_tilde),
        )
        .unwrap();
        assert_eq!(m.variance, 0.0);
        assert!(m.tilted_mean.iter().all(|e| e.1 == 0.0));
        assert!(proxy_exact_moments(
            &table,
            &strips,
            0.5,
            ProxyMode::Untruncated,
            &[Site::new(1, 0)]
        )
        .is_err());
    }

    #[test]
    fn tilted_mean_decays_like_inverse_strip_index() {
        let n = 1 << 12;
        let table = KernelTable::new(n);
        let strips = make_strips(n, 8f64.ln()).unwrap();
        assert_eq!(strips.m, 4);
        let sigma2 = critical_sigma2(&table, n, 3.0).unwrap();
        let e = |j| {
            strip_tilted_mean(
                &table,
                &strips,
                sigma2,
                ProxyMode::Untruncated,
                j,
                Site::ORIGIN,
            )
            .unwrap()
        };
        let r = e(4) / e(8);
        assert!((1.5..=2.5).contains(&r), "ratio {r}");
    }

    /// Truncation only removes chaos orders, so the truncated moments sit below.
    #[test]
    fn truncation_lowers_both_moments() {
        let table = KernelTable::new(256);
        let strips = make_strips(256, 2.0).unwrap();
        let grid = default_grid(strips.n_tilde);
        let full =
            proxy_exact_moments(&table, &strips, 0.6, ProxyMode::Untruncated, &grid).unwrap();
        let k2 = proxy_exact_moments(&table, &strips, 0.6, ProxyMode::Truncated(2), &grid).unwrap();
        assert!(k2.variance < full.variance);
        for (a, b) in k2.tilted_mean.iter().zip(&full.tilted_mean) {
            assert!(a.1 <= b.1 && a.1 > 0.0);
        }
    }

    #[test]
    fn plain_mc_matches_exact_variance() {
        let n = 64;
        let table = KernelTable::new(n);
        let strips = make_strips(n, 4f64.ln()).unwrap();
        assert_eq!((strips.m, strips.n_tilde), (2, 16));
        let model = DisorderModel::gaussian();
        let cp = solve_beta(&model, &table, n, 2.0).unwrap();
        let p = Proxy::new(strips, ProxyMode::Untruncated, DEFAULT_CUTOFF).unwrap();
        let xs = proxy_plain_mc(model, cp.beta, &p, 6000, 11).unwrap();
        let tot: Vec<f64> = xs.iter().map(|v| v.total).collect();
        let exact = proxy_exact_moments(
            &table,
            &strips,
            cp.sigma2,
            ProxyMode::Untruncated,
            &[Site::ORIGIN],
        )
        .unwrap();
        let var = Estimate::variance_of(&tot);
        assert!(
            (var.value - exact.variance).abs() <= 3.0 * var.se,
            "{var:?} vs {}",
            exact.variance
        );
        let mean = Estimate::mean_of(&tot);
        assert!(mean.value.abs() <= 3.0 * mean.se);
        let cov = Estimate::mean_of(
            &xs.iter()
                .map(|v| v.strips[0] * v.strips[1])
                .collect::<Vec<_>>(),
        );
        assert!(cov.value.abs() <= 3.0 * cov.se);
    }

    #[test]
    fn chaos_tail_matches_truncation_gap() {
        // E[(X_full − X_K)²] = Var(X_full) − Var(X_K) by orthogonality.
        let strips = StripDecomposition::from_width(3, 2).unwrap();
        let table = KernelTable::new(12);
        let model = DisorderModel::rademacher();
        let beta = 0.9;
        let c = Coupling::new(&model, beta).unwrap();
        let full = Proxy::new(strips, ProxyMode::Untruncated, DEFAULT_CUTOFF).unwrap();
        let trunc = Proxy::new(strips, ProxyMode::Truncated(1), DEFAULT_CUTOFF).unwrap();
        let d2: Vec<f64> = (0..4000)
            .map(|r| {
                let env = CounterField::new(model, 21, r);
                let d = full.value(&env, &c).unwrap().total - trunc.value(&env, &c).unwrap().total;
                d * d
            })
            .collect();
        let s2 = model.pair_variance(beta).unwrap();
        let g = [Site::ORIGIN];
        let gap = proxy_exact_moments(&table, &strips, s2, ProxyMode::Untruncated, &g)
            .unwrap()
            .variance
            - proxy_exact_moments(&table, &strips, s2, ProxyMode::Truncated(1), &g)
                .unwrap()
                .variance;
        let est = Estimate::mean_of(&d2);
        assert!(gap > 0.0);
        assert!((est.value - gap).abs() <= 3.0 * est.se, "{est:?} vs {gap}");
    }

    #[test]
    fn tilted_mc_matches_exact_mean() {
        let n = 64;
        let table = KernelTable::new(n);
        let strips = make_strips(n, 4f64.ln()).unwrap();
        let model = DisorderModel::bounded_uniform();
        let cp = solve_beta(&model, &table, n, 2.0).unwrap();
        let p = Proxy::new(strips, ProxyMode::Untruncated, DEFAULT_CUTOFF).unwrap();
        let x = Site::new(2, 2);
        let tv = proxy_tilted_variance_mc(model, cp.beta, &p, x, 4000, 5).unwrap();
        let exact = strip_tilted_mean(&table, &strips, cp.sigma2, ProxyMode::Untruncated, 2, x)
            .unwrap()
            + strip_tilted_mean(&table, &strips, cp.sigma2, ProxyMode::Untruncated, 4, x).unwrap();
        assert!(
            (tv.mean.value - exact).abs() <= 3.0 * tv.mean.se,
            "{:?} vs {exact}",
            tv.mean
        );
        assert!(tv.variance.value > 0.0);
        assert!(proxy_tilted_variance_mc(model, cp.beta, &p, x, 999, 5).is_err());
    }

    #[test]
    fn event_needs_a_positive_tilted_mean() {
        let table = KernelTable::new(64);
        let strips = make_strips(64, 2.0).unwrap();
        let p = Proxy::new(strips, ProxyMode::Untruncated, DEFAULT_CUTOFF).unwrap();
        let r = event_report(
            DisorderModel::gaussian(),
            0.0,
            &table,
            &p,
            &default_grid(strips.n_tilde),
            100,
            1,
        );
        assert!(matches!(r, Err(Error::TiltedMeanNotPositive(_))));
    }

    #[test]
    fn event_report_at_small_size() {
        // Mild disorder: at larger θ the sample variance of X is dominated by
        // rare fields and undershoots the exact value at this replica count.
        let n = 128;
        let table = KernelTable::new(n);
        let strips = make_strips(n, 1.0).unwrap();
        let model = DisorderModel::gaussian();
        let cp = solve_beta(&model, &table, n, 1.0).unwrap();
        let p = Proxy::new(strips, ProxyMode::Untruncated, DEFAULT_CUTOFF).unwrap();
        let rep = event_report(
            model,
            cp.beta,
            &table,
            &p,
            &default_grid(strips.n_tilde),
            2000,
            8,
        )
        .unwrap();
        for c in &rep.checks {
            assert!(c.pass, "{c:?}");
        }
        for pr in [rep.prob_event.value, rep.prob_tilted_complement.value] {
            assert!((0.0..=1.0).contains(&pr));
        }
        assert!(rep.chebyshev_plain >= 0.0 && rep.chebyshev_tilted >= 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn grid_sites_are_even_and_inside(nt in 4usize..2000) {
            let g = default_grid(nt);
            prop_assert!(!g.is_empty());
            let r = (nt as f64).sqrt();
            prop_assert!(g.iter().all(|x| x.parity() == 0 && x.norm2() <= r + 1e-9));
        }

        #[test]
        fn strips_partition_the_effective_length(n in 8usize..5000, eta in 0.7f64..4.0) {
            if let Ok(s) = make_strips(n, eta) {
                prop_assert!(s.n_effective <= n && s.n_tilde >= 4);
                prop_assert_eq!(s.interval(2 * s.m).1, s.n_effective);
                prop_assert_eq!(s.n_effective, 2 * s.m * s.n_tilde);
            }
        }
    }
}
