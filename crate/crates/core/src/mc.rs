//! Replica Monte Carlo estimators: truncated and fractional moments of the
//! partition function, the total-variation identity, change-of-measure and
//! change-of-scale audits, free energy, the finite-volume criterion and the
//! coarse-grained skeleton weights `Q(y)`.
//!
//! Every estimator draws replica `r` from the counter-based field keyed by
//! `(seed, r)` and reduces in replica order, so results are bit-identical for
//! any worker count. Standard errors are block jackknife (blocks of 64).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::disorder::DisorderModel;
use crate::engine::{
    endpoint_profile, partition_all_starts, partition_field, partition_field_at, sizebias_sample,
    CounterField, Coupling, EndpointProfile, SweepOptions, Window,
};
use crate::error::{Error, Result};
use crate::kernels::KernelTable;
use crate::lattice::{disc_sites, MassFunction, Site};
use crate::proxy::DEFAULT_CUTOFF;
use crate::rng::tilted_seed;
use crate::stats::{
    block_means, configured_workers, jackknife, least_squares_slope, run_replicas, run_replicas_on,
    Check, Estimate,
};

/// Replicas per batch in the batch-level audits.
pub const BATCH: usize = 1000;

/// Threshold of the finite-volume criterion for `E[Z^{1/2}]`.
pub const CRITERION_LEVEL: f64 = 1.0 / 300.0;

/// Window `|x|₁ ≤ r_f + 2 + 5√n` around the support of `f`.
pub fn default_window(f: &MassFunction) -> SweepOptions {
    window_around(f.rotated_radius())
}

fn window_around(r: i64) -> SweepOptions {
    SweepOptions {
        window: Some(Window {
            base: r as f64 + 2.0,
            slope: DEFAULT_CUTOFF,
        }),
        ..Default::default()
    }
}

/// Estimate of a replica mean, with its audit trail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub name: String,
    pub estimate: f64,
    pub stderr: f64,
    pub reps: u64,
    pub seed: u64,
    /// Digest of the configuration that produced the run; empty unless the
    /// caller owns a configuration.
    pub config_digest: String,
    pub block_means: Vec<f64>,
    pub checks: Vec<Check>,
}

impl McSummary {
    /// Mean of per-replica `values`; the error is infinite below two replicas.
    pub fn of_values(name: &str, values: &[f64], seed: u64) -> Self {
        let e = Estimate::mean_of(values);
        Self {
            name: name.to_string(),
            estimate: e.value,
            stderr: if e.se.is_nan() { f64::INFINITY } else { e.se },
            reps: values.len() as u64,
            seed,
            config_digest: String::new(),
            block_means: block_means(values),
            checks: Vec::new(),
        }
    }

    pub fn as_estimate(&self) -> Estimate {
        Estimate {
            value: self.estimate,
            se: self.stderr,
        }
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// What to sample: `Z_N(f)` for replicas `0..reps` of the field keyed by `seed`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicaSpec {
    pub model: DisorderModel,
    pub beta: f64,
    pub n: usize,
    pub start: MassFunction,
    pub reps: u64,
    pub seed: u64,
    pub opts: SweepOptions,
}

impl ReplicaSpec {
    /// A spec with [`default_window`] around the start.
    pub fn new(
        model: DisorderModel,
        beta: f64,
        n: usize,
        start: MassFunction,
        reps: u64,
        seed: u64,
    ) -> Self {
        let opts = default_window(&start);
        Self {
            model,
            beta,
            n,
            start,
            reps,
            seed,
            opts,
        }
    }

    pub fn with_options(mut self, opts: SweepOptions) -> Self {
        self.opts = opts;
        self
    }

    fn coupling(&self) -> Result<Coupling> {
        if !self.start.is_probability(1e-12) {
            return Err(Error::Domain(format!(
                "start must be a probability mass function, total = {}",
                self.start.total()
            )));
        }
        Coupling::new(&self.model, self.beta)
    }
}

/// `Z_N(f)` under the plain law, one value per replica.
pub fn sample_partition(spec: &ReplicaSpec) -> Result<Vec<f64>> {
    sample_partition_on(spec, configured_workers()?)
}

fn sample_partition_on(spec: &ReplicaSpec, workers: Option<usize>) -> Result<Vec<f64>> {
    let c = spec.coupling()?;
    run_replicas_on(workers, spec.reps, |r| {
        let env = CounterField::new(spec.model, spec.seed, r);
        Ok(partition_field(&env, &c, &spec.start, spec.n, &spec.opts)?.z())
    })
}

/// `Z_N(f)` under the size-biased law `P̃ = Z_N(f)·P`, one value per replica.
pub fn sample_partition_tilted(spec: &ReplicaSpec) -> Result<Vec<f64>> {
    let c = spec.coupling()?;
    let seed = tilted_seed(spec.seed);
    run_replicas(spec.reps, |r| {
        let (_, env) = sizebias_sample(spec.model, spec.beta, spec.n, &spec.start, seed, r)?;
        Ok(partition_field(&env, &c, &spec.start, spec.n, &spec.opts)?.z())
    })
}

/// `E[Z ∧ 1]` from plain samples.
pub fn truncated_mean_of(z: &[f64], seed: u64) -> McSummary {
    let v: Vec<f64> = z.iter().map(|&x| x.min(1.0)).collect();
    McSummary::of_values("truncated_mean", &v, seed)
}

pub fn truncated_mean(spec: &ReplicaSpec) -> Result<McSummary> {
    Ok(truncated_mean_of(&sample_partition(spec)?, spec.seed))
}

/// `E[Z∧1] ≥ E[Z]²/(1 + E[Z²])` with `E[Z] = 1` and the exact second moment.
pub fn paley_zygmund_check(truncated: &McSummary, second_moment: f64) -> Check {
    Check::at_most(
        "paley-zygmund floor",
        1.0 / (1.0 + second_moment) - 3.0 * truncated.stderr,
        truncated.estimate,
    )
}

/// `E[Z^γ]` from plain samples, with the sandwich audit on every batch.
pub fn fractional_moment_of(z: &[f64], gamma: f64, seed: u64) -> Result<McSummary> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Domain(format!(
            "gamma must lie in [0, 1], got {gamma}"
        )));
    }
    let v: Vec<f64> = z.iter().map(|&x| x.powf(gamma)).collect();
    let mut s = McSummary::of_values("fractional_moment", &v, seed);
    s.checks = sandwich_checks(z);
    Ok(s)
}

pub fn fractional_moment(spec: &ReplicaSpec, gamma: f64) -> Result<McSummary> {
    fractional_moment_of(&sample_partition(spec)?, gamma, spec.seed)
}

/// Index ranges of consecutive batches of at least [`BATCH`] items (one
/// range if there are fewer).
fn batches(n: usize) -> Vec<(usize, usize)> {
    let nb = (n / BATCH).max(1);
    (0..nb).map(|b| (b * n / nb, (b + 1) * n / nb)).collect()
}

/// `E[Z∧1] ≤ E[Z^{1/2}] ≤ √2·E[Z∧1]^{1/2}` per batch, each side at 3σ.
pub fn sandwich_checks(z: &[f64]) -> Vec<Check> {
    let mut out = Vec::new();
    for (b, (lo, hi)) in batches(z.len()).into_iter().enumerate() {
        let x = &z[lo..hi];
        let low = |s: &[f64]| mean_map(s, |v| v.sqrt() - v.min(1.0));
        let high = |s: &[f64]| (2.0 * mean_map(s, |v| v.min(1.0))).sqrt() - mean_map(s, f64::sqrt);
        let (a, sa) = jackknife(x, low);
        let (c, sc) = jackknife(x, high);
        out.push(Check::at_most(
            format!("sandwich lower, batch {b}"),
            -a,
            3.0 * sa,
        ));
        out.push(Check::at_most(
            format!("sandwich upper, batch {b}"),
            -c,
            3.0 * sc,
        ));
    }
    out
}

fn mean_map(x: &[f64], f: impl Fn(f64) -> f64) -> f64 {
    x.iter().map(|&v| f(v)).sum::<f64>() / x.len() as f64
}

/// Change of measure with `A = {Z ≥ 1}`, per batch: `E[Z∧K] ≤ K·P(A) +
/// E[Z·1_{A^c}]` from the plain samples alone, the same with `E[Z·1_{A^c}]`
/// replaced by `P̃(A^c)` from the size-biased samples, and the fractional form
/// `E[Z^{1/2}] ≤ P(A)^{1/2} + P̃(A^c)^{1/2}`.
pub fn change_of_measure_checks(plain: &[f64], tilted: &[f64], ks: &[f64]) -> Vec<Check> {
    let n = plain.len().min(tilted.len());
    let mut out = Vec::new();
    for (b, (lo, hi)) in batches(n).into_iter().enumerate() {
        let (p, t) = (&plain[lo..hi], &tilted[lo..hi]);
        let hit = |v: f64| if v >= 1.0 { 1.0 } else { 0.0 };
        let miss = |s: &[f64]| mean_map(s, |v| 1.0 - hit(v));
        let (m, sm) = jackknife(t, miss);
        for &k in ks {
            // Nonpositive sample by sample.
            let direct = |s: &[f64]| mean_map(s, |v| v.min(k) - k * hit(v) - v * (1.0 - hit(v)));
            let (d, sd) = jackknife(p, direct);
            out.push(Check::at_most(
                format!("change of measure K={k}, batch {b}"),
                d,
                3.0 * sd,
            ));
            let lhs = |s: &[f64]| mean_map(s, |v| v.min(k)) - k * mean_map(s, hit);
            let (l, sl) = jackknife(p, lhs);
            out.push(Check::at_most(
                format!("change of measure K={k} size-biased, batch {b}"),
                l,
                m + 3.0 * sl.hypot(sm),
            ));
        }
        let lhs = |s: &[f64]| mean_map(s, f64::sqrt) - mean_map(s, hit).sqrt();
        let (l, sl) = jackknife(p, lhs);
        let (r, sr) = jackknife(t, |s: &[f64]| miss(s).sqrt());
        out.push(Check::at_most(
            format!("change of measure gamma=1/2, batch {b}"),
            l,
            r + 3.0 * sl.hypot(sr),
        ));
    }
    out
}

/// Two estimates of `E[Z∧1] = 1 − d_TV(P, P̃)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TvReport {
    /// `E[Z∧1]` under `P`.
    pub route1: Estimate,
    /// `P(Z ≥ 1)`.
    pub plain_hit: Estimate,
    /// `P̃(Z < 1)`.
    pub tilted_miss: Estimate,
    /// `P(Z ≥ 1) + P̃(Z < 1)`.
    pub route2: Estimate,
    pub checks: Vec<Check>,
}

pub fn sizebias_tv_of(plain: &[f64], tilted: &[f64]) -> TvReport {
    let route1 = Estimate::mean_of(&plain.iter().map(|v| v.min(1.0)).collect::<Vec<_>>());
    let plain_hit = Estimate::fraction(plain, |&v| v >= 1.0);
    let tilted_miss = Estimate::fraction(tilted, |&v| v < 1.0);
    let route2 = Estimate {
        value: plain_hit.value + tilted_miss.value,
        se: plain_hit.se.hypot(tilted_miss.se),
    };
    let checks = vec![
        Check::agree(
            "tv routes agree",
            route1.value,
            route2.value,
            route1.se.hypot(route2.se),
            3.0,
        ),
        Check::at_most("tv route 1 at most 1", route1.value, 1.0 + 3.0 * route1.se),
        Check::at_most("tv route 2 at most 1", route2.value, 1.0 + 3.0 * route2.se),
    ];
    TvReport {
        route1,
        plain_hit,
        tilted_miss,
        route2,
        checks,
    }
}

pub fn sizebias_tv(spec: &ReplicaSpec) -> Result<TvReport> {
    Ok(sizebias_tv_of(
        &sample_partition(spec)?,
        &sample_partition_tilted(spec)?,
    ))
}

/// The inequality suite on one plain and one size-biased sample set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InequalityReport {
    pub truncated: McSummary,
    pub half_moment: McSummary,
    pub tv: TvReport,
    pub second_moment: Option<f64>,
    pub checks: Vec<Check>,
}

impl InequalityReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Sandwich, Paley–Zygmund (when the exact `E[Z²]` is given), change of
/// measure for `K ∈ {1, 2, 4}` and the two-route TV identity.
pub fn inequality_suite(
    spec: &ReplicaSpec,
    second_moment: Option<f64>,
) -> Result<InequalityReport> {
    let plain = sample_partition(spec)?;
    let tilted = sample_partition_tilted(spec)?;
    let truncated = truncated_mean_of(&plain, spec.seed);
    let half_moment = fractional_moment_of(&plain, 0.5, spec.seed)?;
    let tv = sizebias_tv_of(&plain, &tilted);
    let mut checks = half_moment.checks.clone();
    if let Some(m2) = second_moment {
        checks.push(paley_zygmund_check(&truncated, m2));
    }
    checks.extend(change_of_measure_checks(&plain, &tilted, &[1.0, 2.0, 4.0]));
    checks.extend(tv.checks.iter().cloned());
    Ok(InequalityReport {
        truncated,
        half_moment,
        tv,
        second_moment,
        checks,
    })
}

/// `E[log Z_N]/N` at one length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyRow {
    pub n: usize,
    pub value: Estimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreeEnergyReport {
    pub beta: f64,
    pub reps: u64,
    pub seed: u64,
    pub rows: Vec<FreeEnergyRow>,
    /// The largest-N row.
    pub estimate: Estimate,
    /// Gap between the two largest-N rows.
    pub band: f64,
    /// `−π/σ²(β)`, the centre of the log bracket.
    pub log_center: Option<f64>,
    pub checks: Vec<Check>,
}

impl FreeEnergyReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// `E[log Z_N(0)]/N` for each `N` in `n_grid`, all lengths from one forward
/// sweep per replica. By superadditivity every row is a lower bound on the
/// free energy; no extrapolation beyond the largest row is attempted.
pub fn free_energy(
    model: DisorderModel,
    beta: f64,
    n_grid: &[usize],
    reps: u64,
    seed: u64,
    opts: &SweepOptions,
) -> Result<FreeEnergyReport> {
    if n_grid.is_empty() || n_grid[0] == 0 || n_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain(
            "free energy needs a strictly increasing grid of positive lengths".into(),
        ));
    }
    let c = Coupling::new(&model, beta)?;
    let start = MassFunction::dirac(Site::ORIGIN);
    let per_rep = if beta == 0.0 {
        // Every weight is 1, so log Z_N = 0 without sampling.
        vec![vec![0.0; n_grid.len()]; reps as usize]
    } else {
        run_replicas(reps, |r| {
            let env = CounterField::new(model, seed, r);
            let z = partition_field_at(&env, &c, &start, n_grid, opts)?;
            Ok(z.iter()
                .zip(n_grid)
                .map(|(p, &n)| p.log_z() / n as f64)
                .collect::<Vec<f64>>())
        })?
    };
    let cols = columns(&per_rep, n_grid.len());
    let rows: Vec<FreeEnergyRow> = n_grid
        .iter()
        .zip(&cols)
        .map(|(&n, col)| FreeEnergyRow {
            n,
            value: Estimate::mean_of(col),
        })
        .collect();
    let estimate = rows.last().unwrap().value;
    let band = if rows.len() > 1 {
        (estimate.value - rows[rows.len() - 2].value.value).abs()
    } else {
        0.0
    };
    let mut checks = Vec::new();
    let mut log_center = None;
    if beta > 0.0 {
        let center = -PI / model.pair_variance(beta)?;
        log_center = Some(center);
        checks.push(Check::at_most(
            "free energy negative",
            estimate.value + 3.0 * estimate.se,
            0.0,
        ));
        checks.push(Check::at_most(
            "log|F| within 3 of -pi/sigma^2",
            (estimate.value.abs().ln() - center).abs(),
            3.0,
        ));
    }
    Ok(FreeEnergyReport {
        beta,
        reps,
        seed,
        rows,
        estimate,
        band,
        log_center,
        checks,
    })
}

/// Per-replica rows to per-quantity columns.
fn columns(rows: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    (0..k)
        .map(|j| rows.iter().map(|r| r[j]).collect())
        .collect()
}

/// Largest of a family of estimates and where it was attained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSup {
    pub estimate: Estimate,
    /// A site `(x1,x2)` or `uniform`.
    pub argmax: String,
}

fn grid_sup(est: &[Estimate], labels: &[String]) -> GridSup {
    let i = (0..est.len())
        .max_by(|&a, &b| est[a].value.total_cmp(&est[b].value))
        .expect("nonempty grid");
    GridSup {
        estimate: est[i],
        argmax: labels[i].clone(),
    }
}

/// `E[Z_n(δ_x)^{1/2}]` for each start and `E[Z_n(g)^{1/2}]` for each law `g`,
/// all from one backward sweep per replica.
fn half_moments_on_grid(
    model: DisorderModel,
    beta: f64,
    n: usize,
    starts: &[Site],
    laws: &[MassFunction],
    reps: u64,
    seed: u64,
) -> Result<Vec<Estimate>> {
    let c = Coupling::new(&model, beta)?;
    let r = starts
        .iter()
        .map(|x| x.l1())
        .chain(laws.iter().map(|g| g.rotated_radius()))
        .max()
        .unwrap_or(0);
    let opts = window_around(r);
    let rows = run_replicas(reps, |rep| {
        let env = CounterField::new(model, seed, rep);
        let t = partition_all_starts(&env, &c, n, r, &opts)?;
        let mut row = Vec::with_capacity(starts.len() + laws.len());
        for &x in starts {
            row.push(t.get(x)?.sqrt());
        }
        for g in laws {
            row.push(t.integrate(g)?.sqrt());
        }
        Ok(row)
    })?;
    Ok(columns(&rows, starts.len() + laws.len())
        .iter()
        .map(|c| Estimate::mean_of(c))
        .collect())
}

fn labels(starts: &[Site], uniforms: usize) -> Vec<String> {
    starts
        .iter()
        .map(|x| x.to_string())
        .chain((0..uniforms).map(|_| "uniform".to_string()))
        .collect()
}

/// `sup` of `E[Z_n^{1/2}]` over Dirac starts in `B(ρ)` and the uniform law on it.
pub fn half_moment_sup(
    model: DisorderModel,
    beta: f64,
    n: usize,
    rho: f64,
    reps: u64,
    seed: u64,
) -> Result<GridSup> {
    let starts = disc_sites(rho);
    let est = half_moments_on_grid(
        model,
        beta,
        n,
        &starts,
        &[MassFunction::uniform_disc(rho)],
        reps,
        seed,
    )?;
    Ok(grid_sup(&est, &labels(&starts, 1)))
}

/// The grid sup at `N = round(m·L)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub m: f64,
    pub n: usize,
    pub sup: GridSup,
    /// `3e^{−m}` for `N ≥ L`, the trivial `1` below.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteVolumeReport {
    pub l: usize,
    pub beta: f64,
    /// `θ(L, β)`; absent at `β = 0`.
    pub theta: Option<f64>,
    pub reps: u64,
    pub seed: u64,
    pub sup: GridSup,
    pub level: f64,
    /// `sup + 3σ ≤ 1/300`.
    pub satisfied: bool,
    pub decay: Vec<DecayRow>,
    /// Least-squares slope of `log E[Z^{1/2}]` against `m` over rows with `N ≥ L`.
    pub slope: Option<f64>,
    pub checks: Vec<Check>,
}

impl FiniteVolumeReport {
    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Tests `sup_{f} E[Z_L(f)^{1/2}] ≤ 1/300` over Dirac starts in `B(√L)` and
/// the uniform law on it; when it holds, audits `E[Z_{mL}^{1/2}] ≤ 3e^{−m}`
/// for each `m` and the decay slope. Lengths below `L` only get the trivial
/// bound 1.
pub fn finite_volume_criterion(
    model: DisorderModel,
    l: usize,
    beta: f64,
    reps: u64,
    m_list: &[f64],
    seed: u64,
) -> Result<FiniteVolumeReport> {
    if l < 16 {
        return Err(Error::Domain(format!(
            "criterion scale must be >= 16, got {l}"
        )));
    }
    if m_list.iter().any(|&m| !(m > 0.0) || !m.is_finite()) {
        return Err(Error::Domain("multipliers must be positive".into()));
    }
    let rho = (l as f64).sqrt();
    let sup = half_moment_sup(model, beta, l, rho, reps, seed)?;
    let satisfied = sup.estimate.value + 3.0 * sup.estimate.se <= CRITERION_LEVEL;
    let mut decay = Vec::new();
    let mut checks = Vec::new();
    for &m in m_list {
        let n = ((m * l as f64).round() as usize).max(1);
        let s = half_moment_sup(model, beta, n, rho, reps, seed)?;
        let e = s.estimate;
        let bound = if n < l { 1.0 } else { 3.0 * (-m).exp() };
        if n < l {
            checks.push(Check::at_most(
                format!("half moment at most 1, m={m}"),
                e.value,
                // Rounding slack: at β = 0 the value is 1 up to summation order.
                1.0 + 3.0 * e.se + 1e-12,
            ));
        } else if satisfied {
            checks.push(Check::at_most(
                format!("decay bound 3e^-m, m={m}"),
                e.value,
                bound + 3.0 * e.se,
            ));
        }
        decay.push(DecayRow {
            m,
            n,
            sup: s,
            bound,
        });
    }
    let pts: Vec<(f64, f64)> = decay
        .iter()
        .filter(|d| d.n >= l && d.sup.estimate.value > 0.0)
        .map(|d| (d.m, d.sup.estimate.value.ln()))
        .collect();
    let slope = least_squares_slope(&pts);
    if satisfied {
        if let Some(s) = slope {
            checks.push(Check::at_most("decay slope at most -0.5", s, -0.5));
        }
    }
    let theta = if beta == 0.0 {
        None
    } else {
        crate::disorder::theta_of(&model, &KernelTable::new(l), l, beta)?
            .theta
            .finite()
    };
    Ok(FiniteVolumeReport {
        l,
        beta,
        theta,
        reps,
        seed,
        sup,
        level: CRITERION_LEVEL,
        satisfied,
        decay,
        slope,
        checks,
    })
}

/// Change of scale for `γ = 1/2`: the grid sup over `B(√B)` is at most
/// `(4B/A)^{1/2}` times the grid sup over `B(√A)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleReport {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub sup_a: GridSup,
    pub sup_b: GridSup,
    pub factor: f64,
    pub check: Check,
}

/// Audits the change-of-scale inequality with `B = 4A`.
pub fn change_of_scale(
    model: DisorderModel,
    beta: f64,
    n: usize,
    a: f64,
    reps: u64,
    seed: u64,
) -> Result<ScaleReport> {
    if !(a >= 1.0) || !a.is_finite() {
        return Err(Error::Domain(format!("inner scale must be >= 1, got {a}")));
    }
    let b = 4.0 * a;
    let (ra, rb) = (a.sqrt(), b.sqrt());
    let starts = disc_sites(rb);
    let inner: Vec<usize> = (0..starts.len())
        .filter(|&i| starts[i].norm2() <= ra + 1e-9)
        .collect();
    let est = half_moments_on_grid(
        model,
        beta,
        n,
        &starts,
        &[
            MassFunction::uniform_disc(ra),
            MassFunction::uniform_disc(rb),
        ],
        reps,
        seed,
    )?;
    let names = labels(&starts, 2);
    let k = starts.len();
    let pick = |idx: &[usize]| {
        let e: Vec<Estimate> = idx.iter().map(|&i| est[i]).collect();
        let l: Vec<String> = idx.iter().map(|&i| names[i].clone()).collect();
        grid_sup(&e, &l)
    };
    let sup_a = pick(&inner.iter().copied().chain([k]).collect::<Vec<_>>());
    let sup_b = pick(&(0..k).chain([k + 1]).collect::<Vec<_>>());
    let factor = (4.0 * b / a).sqrt();
    let se = sup_b.estimate.se.hypot(factor * sup_a.estimate.se);
    let check = Check::at_most(
        "change of scale",
        sup_b.estimate.value,
        factor * sup_a.estimate.value + 3.0 * se,
    );
    Ok(ScaleReport {
        n,
        a,
        b,
        sup_a,
        sup_b,
        factor,
        check,
    })
}

/// Threshold for the skeleton sum.
pub fn skeleton_sum_level() -> f64 {
    (-1.0f64).exp()
}

/// `(2K² + 2K + 1)/300`: the number of `|y|₁ ≤ K` times the criterion level.
pub fn skeleton_bookkeeping(k: i64) -> f64 {
    (2 * k * k + 2 * k + 1) as f64 * CRITERION_LEVEL
}

/// `e^{−(|y|₁−2)²/4}`.
pub fn skeleton_tail_bound(y: Site) -> f64 {
    let d = (y.l1() - 2) as f64;
    (-d * d / 4.0).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonRow {
    pub y: Site,
    /// Larger of the Dirac sup and the uniform start.
    pub q: Estimate,
    pub argmax: String,
    pub uniform: Estimate,
    pub tail_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSum {
    pub k: i64,
    pub sum: f64,
    pub level: f64,
    pub bookkeeping: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonReport {
    pub n0: usize,
    pub beta: f64,
    pub reps: u64,
    pub seed: u64,
    pub rows: Vec<SkeletonRow>,
    pub checks: Vec<Check>,
}

impl SkeletonReport {
    /// `Σ_{|y|₁ ≤ k} Q̂(y)` over the rows present.
    pub fn sum_within(&self, k: i64) -> SkeletonSum {
        SkeletonSum {
            k,
            sum: self
                .rows
                .iter()
                .filter(|r| r.y.l1() <= k)
                .map(|r| r.q.value)
                .sum(),
            level: skeleton_sum_level(),
            bookkeeping: skeleton_bookkeeping(k),
        }
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// Endpoint weights on a dense square `[−h, h]²`.
struct DenseProfile {
    h: i64,
    w: Vec<f64>,
}

impl DenseProfile {
    fn new(p: &EndpointProfile, h: i64) -> Self {
        let side = (2 * h + 1) as usize;
        let mut w = vec![0.0; side * side];
        let k = p.log_norm.exp();
        for &(z, v) in &p.cells {
            if z.x1.abs() <= h && z.x2.abs() <= h {
                w[((z.x1 + h) as usize) * side + (z.x2 + h) as usize] += v * k;
            }
        }
        Self { h, w }
    }

    /// Total weight on lattice points within Euclidean distance `r` of `c`.
    fn ball(&self, c: (f64, f64), r: f64) -> f64 {
        let side = (2 * self.h + 1) as usize;
        let (lo1, hi1) = ((c.0 - r).ceil() as i64, (c.0 + r).floor() as i64);
        let mut s = 0.0;
        for z1 in lo1.max(-self.h)..=hi1.min(self.h) {
            let d1 = z1 as f64 - c.0;
            let half = (r * r - d1 * d1).max(0.0).sqrt();
            let (lo2, hi2) = ((c.1 - half).ceil() as i64, (c.1 + half).floor() as i64);
            for z2 in lo2.max(-self.h)..=hi2.min(self.h) {
                let d2 = z2 as f64 - c.1;
                if d1 * d1 + d2 * d2 <= r * r + 1e-9 {
                    s += self.w[((z1 + self.h) as usize) * side + (z2 + self.h) as usize];
                }
            }
        }
        s
    }
}

/// `Q̂(y)`: the larger of `max_x E[Z_{0,N₀}(δ_x; B(y√N₀, ½√N₀))^{1/2}]` over
/// Dirac starts in `B(½√N₀)` and the same quantity for the uniform law on
/// that disc. Dirac starts use one endpoint profile from the origin per
/// replica and the translation invariance of the field law. Sweeps are not
/// windowed. Rows with `|y|₁ ≥ 3` are checked against the Gaussian tail.
pub fn skeleton_q(
    model: DisorderModel,
    n0: usize,
    beta: f64,
    ys: &[Site],
    reps: u64,
    seed: u64,
) -> Result<SkeletonReport> {
    if n0 < 16 {
        return Err(Error::Domain(format!(
            "skeleton scale must be >= 16, got {n0}"
        )));
    }
    let c = Coupling::new(&model, beta)?;
    let s = (n0 as f64).sqrt();
    let rad = 0.5 * s;
    let starts = disc_sites(rad);
    let uniform = MassFunction::uniform_disc(rad);
    let opts = SweepOptions::default();
    let h0 = n0 as i64;
    let hu = h0 + uniform.rotated_radius();
    let per_rep = run_replicas(reps, |r| {
        let env = CounterField::new(model, seed, r);
        let p0 = DenseProfile::new(
            &endpoint_profile(&env, &c, &MassFunction::dirac(Site::ORIGIN), n0, &opts)?,
            h0,
        );
        let pu = DenseProfile::new(&endpoint_profile(&env, &c, &uniform, n0, &opts)?, hu);
        let mut row = Vec::with_capacity(ys.len() * (starts.len() + 1));
        for y in ys {
            let centre = (y.x1 as f64 * s, y.x2 as f64 * s);
            for x in &starts {
                row.push(
                    p0.ball((centre.0 - x.x1 as f64, centre.1 - x.x2 as f64), rad)
                        .sqrt(),
                );
            }
            row.push(pu.ball(centre, rad).sqrt());
        }
        Ok(row)
    })?;
    let width = starts.len() + 1;
    let est: Vec<Estimate> = columns(&per_rep, ys.len() * width)
        .iter()
        .map(|c| Estimate::mean_of(c))
        .collect();
    let names = labels(&starts, 1);
    let mut rows = Vec::new();
    let mut checks = Vec::new();
    for (i, &y) in ys.iter().enumerate() {
        let block = &est[i * width..(i + 1) * width];
        let sup = grid_sup(block, &names);
        let tail_bound = skeleton_tail_bound(y);
        if y.l1() >= 3 {
            checks.push(Check::at_most(
                format!("skeleton tail at y={y}"),
                sup.estimate.value,
                tail_bound + 3.0 * sup.estimate.se,
            ));
        }
        rows.push(SkeletonRow {
            y,
            q: sup.estimate,
            argmax: sup.argmax,
            uniform: block[width - 1],
            tail_bound,
        });
    }
    Ok(SkeletonReport {
        n0,
        beta,
        reps,
        seed,
        rows,
        checks,
    })
}

/// All `y` with `|y|₁ ≤ k`, ordered by `|y|₁` then lexicographically.
pub fn skeleton_sites(k: i64) -> Vec<Site> {
    let mut ys: Vec<Site> = (-k..=k)
        .flat_map(|a| (-k..=k).map(move |b| Site::new(a, b)))
        .filter(|y| y.l1() <= k)
        .collect();
    ys.sort_by_key(|y| (y.l1(), y.x1, y.x2));
    ys
}
