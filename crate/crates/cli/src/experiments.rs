//! The experiment catalog: one driver per named experiment, each turning a
//! validated configuration into a summary, a data table, a plot and checks.

use std::f64::consts::{LN_2, PI};

use num_traits::ToPrimitive;
use polymer2d::disorder::{critical_sigma2, solve_beta, theta_of, Family};
use polymer2d::engine::{
    collision_moment, grad_log_norm, partition_field, Coupling, DiamondField, ParityMode,
    SweepOptions, Window,
};
use polymer2d::kernels::{alpha, return_mass_rational, EULER_GAMMA};
use polymer2d::mc::{
    finite_volume_criterion, inequality_suite, paley_zygmund_check, skeleton_q, skeleton_sites,
    truncated_mean, ReplicaSpec,
};
use polymer2d::moments::{
    default_truncation, hat_moment, quasicritical_bound_check, second_moment_field,
    stretch_prob_mc, truncated_variance, MomentSeries,
};
use polymer2d::proxy::{default_grid, event_report, make_strips, Proxy, ProxyMode, DEFAULT_CUTOFF};
use polymer2d::rng::{StreamKey, Tag};
use polymer2d::stats::{least_squares_slope, Check};
use polymer2d::{DisorderModel, KernelTable, MassFunction, Site};
use serde_json::{json, Value};

use crate::config::{key, Config, Key, Kind, Violation};
use crate::output::{Plot, Table};

/// Largest length accepted for sweeps and kernel tables built on demand.
pub const MAX_N: usize = 1 << 16;

/// Largest kernel horizon.
pub const MAX_KERNEL_N: usize = 1 << 22;

#[derive(Debug)]
pub enum Failure {
    Invalid(Violation),
    Runtime(String),
}

impl From<Violation> for Failure {
    fn from(v: Violation) -> Self {
        Failure::Invalid(v)
    }
}

impl From<polymer2d::Error> for Failure {
    fn from(e: polymer2d::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

pub struct Outcome {
    pub summary: Value,
    pub table: Table,
    pub plot: Plot,
    pub checks: Vec<Check>,
}

pub struct Experiment {
    pub name: &'static str,
    pub about: &'static str,
    /// The result the experiment exercises.
    pub anchor: &'static str,
    keys: &'static [Key],
    /// Whether exactly one of `calibration.beta`, `calibration.theta` is required.
    calibrated: bool,
    family: Family,
    /// Default `calibration.n`.
    n: usize,
    extra: fn(&Config, &Experiment) -> Vec<Violation>,
    run: fn(&Ctx) -> Result<Outcome, Failure>,
}

const COMMON: [Key; 4] = [
    key("experiment", Kind::Text),
    key("seed", Kind::Int),
    key("output.dir", Kind::Text),
    key("workers", Kind::Int),
];

const FAMILY: Key = key("disorder.family", Kind::Text);
const N: Key = key("calibration.n", Kind::Int);
const BETA: Key = key("calibration.beta", Kind::Float);
const THETA: Key = key("calibration.theta", Kind::Float);
const REPS: Key = key("replicas", Kind::Int);

static CATALOG: [Experiment; 12] = [
    Experiment {
        name: "kernels",
        about: "return masses u(n) and overlap sums R_n",
        anchor: "overlap sum asymptotics",
        keys: &[
            key("kernels.n_max", Kind::Int),
            key("kernels.conv_horizon", Kind::Int),
        ],
        calibrated: false,
        family: Family::Gaussian,
        n: 0,
        extra: kernels_extra,
        run: kernels,
    },
    Experiment {
        name: "calibrate",
        about: "beta from theta and back, with both e^theta routes",
        anchor: "critical window calibration",
        keys: &[
            FAMILY,
            key("calibrate.ns", Kind::IntList),
            key("calibrate.thetas", Kind::FloatList),
        ],
        calibrated: false,
        family: Family::Gaussian,
        n: 0,
        extra: calibrate_extra,
        run: calibrate,
    },
    Experiment {
        name: "decay-vs-theta",
        about: "E[Z_N(U) ^ 1] across theta with Paley-Zygmund floors",
        anchor: "quasi-critical decay of the truncated mean",
        keys: &[FAMILY, N, REPS, key("decay.thetas", Kind::FloatList)],
        calibrated: false,
        family: Family::Rademacher,
        n: 1024,
        extra: decay_extra,
        run: decay_vs_theta,
    },
    Experiment {
        name: "second-moment",
        about: "exact E[Z_N(U)^2] against exp(e^(theta - gamma))",
        anchor: "quasi-critical second moment",
        keys: &[N, key("second_moment.thetas", Kind::FloatList)],
        calibrated: false,
        family: Family::Gaussian,
        n: 16384,
        extra: second_moment_extra,
        run: second_moment,
    },
    Experiment {
        name: "truncated-variance",
        about: "second moments B(m) and chaos-truncated V(m, K)",
        anchor: "truncated chaos variance",
        keys: &[FAMILY, N, BETA, THETA, key("truncated.k", Kind::Int)],
        calibrated: true,
        family: Family::Gaussian,
        n: 1024,
        extra: no_extra,
        run: truncated_variance_run,
    },
    Experiment {
        name: "proxy-report",
        about: "coarse-grained proxy: exact moments, Monte Carlo and the event A_N",
        anchor: "proxy variance, size-biased mean and event choice",
        keys: &[
            FAMILY,
            N,
            BETA,
            THETA,
            REPS,
            key("proxy.eta", Kind::Float),
            key("proxy.mode", Kind::Text),
            key("proxy.k", Kind::Int),
            key("proxy.cutoff", Kind::Float),
        ],
        calibrated: true,
        family: Family::BoundedUniform,
        n: 1024,
        extra: proxy_extra,
        run: proxy_report,
    },
    Experiment {
        name: "stretches",
        about: "alternating stretches of two renewals",
        anchor: "stretch probabilities J_l",
        keys: &[
            REPS,
            key("stretches.n_tilde", Kind::Int),
            key("stretches.ell_max", Kind::Int),
        ],
        calibrated: false,
        family: Family::Gaussian,
        n: 0,
        extra: stretches_extra,
        run: stretches,
    },
    Experiment {
        name: "free-energy",
        about: "E[log Z_N]/N on a grid of lengths",
        anchor: "free energy bounds",
        keys: &[
            FAMILY,
            N,
            BETA,
            THETA,
            REPS,
            key("free_energy.n_grid", Kind::IntList),
            key("free_energy.slope", Kind::Float),
        ],
        calibrated: true,
        family: Family::Gaussian,
        n: 1024,
        extra: free_energy_extra,
        run: free_energy_run,
    },
    Experiment {
        name: "finite-volume",
        about: "half moment at scale L against 1/300, and its decay",
        anchor: "finite-volume criterion",
        keys: &[
            FAMILY,
            N,
            BETA,
            THETA,
            REPS,
            key("finite_volume.m_list", Kind::FloatList),
        ],
        calibrated: true,
        family: Family::Gaussian,
        n: 64,
        extra: finite_volume_extra,
        run: finite_volume,
    },
    Experiment {
        name: "skeleton-q",
        about: "coarse-grained weights Q(y) and their tail",
        anchor: "coarse-grained skeleton weights",
        keys: &[FAMILY, N, BETA, THETA, REPS, key("skeleton.k", Kind::Int)],
        calibrated: true,
        family: Family::Gaussian,
        n: 64,
        extra: skeleton_extra,
        run: skeleton,
    },
    Experiment {
        name: "tv-identity",
        about: "E[Z ^ 1] two ways, sandwich, Paley-Zygmund and change of measure",
        anchor: "total variation to the size-biased law",
        keys: &[FAMILY, N, BETA, THETA, REPS, key("tv.start", Kind::Text)],
        calibrated: true,
        family: Family::Rademacher,
        n: 512,
        extra: tv_extra,
        run: tv_identity,
    },
    Experiment {
        name: "appendix-b",
        about: "collision local time moments and the disorder gradient",
        anchor: "bounded-environment lower bound ingredients",
        keys: &[
            FAMILY,
            key("appendix_b.ns", Kind::IntList),
            key("appendix_b.theta", Kind::Float),
            key("appendix_b.fd_n", Kind::Int),
            key("appendix_b.fd_beta", Kind::Float),
        ],
        calibrated: false,
        family: Family::Gaussian,
        n: 0,
        extra: appendix_b_extra,
        run: appendix_b,
    },
];

pub fn catalog() -> &'static [Experiment] {
    &CATALOG
}

pub fn find(name: &str) -> Option<&'static Experiment> {
    CATALOG.iter().find(|e| e.name == name)
}

/// A resolved calibration.
#[derive(Debug, Clone, Copy)]
pub struct Calib {
    pub n: usize,
    pub beta: f64,
    pub theta: Option<f64>,
    pub sigma2: f64,
}

fn out_of_range(detail: impl std::fmt::Display) -> Violation {
    Violation(format!("calibration out of range: {detail}"))
}

/// `β` directly, or `β` solving `σ²(β) = 1/(R_N − θ/π)`.
fn resolve(
    model: DisorderModel,
    n: usize,
    beta: Option<f64>,
    theta: Option<f64>,
) -> Result<Calib, Violation> {
    match (beta, theta) {
        (Some(_), Some(_)) | (None, None) => Err(Violation(
            "exactly one of calibration.beta or calibration.theta must be given".into(),
        )),
        (None, Some(t)) => {
            let cp = solve_beta(&model, &KernelTable::new(n), n, t).map_err(out_of_range)?;
            Ok(Calib {
                n,
                beta: cp.beta,
                theta: Some(t),
                sigma2: cp.sigma2,
            })
        }
        (Some(b), None) => {
            if !(b >= 0.0) || b > model.beta_max() {
                return Err(out_of_range(format!(
                    "beta = {b} outside [0, {}]",
                    model.beta_max()
                )));
            }
            let sigma2 = model.pair_variance(b).map_err(out_of_range)?;
            Ok(Calib {
                n,
                beta: b,
                theta: None,
                sigma2,
            })
        }
    }
}

/// `θ < πR_N` and reachable by the family.
fn theta_in_range(model: DisorderModel, n: usize, theta: f64) -> Option<Violation> {
    let table = KernelTable::new(n);
    match critical_sigma2(&table, n, theta) {
        Err(e) => Some(out_of_range(e)),
        Ok(s2) if s2 >= model.sigma2_sup() => Some(out_of_range(format!(
            "theta = {theta} at N = {n} needs sigma^2 = {s2}, beyond {} (sup {})",
            model.family,
            model.sigma2_sup()
        ))),
        Ok(_) => None,
    }
}

fn family_of(cfg: &Config, exp: &Experiment) -> Result<Family, Violation> {
    match cfg.raw(FAMILY.name) {
        None => Ok(exp.family),
        Some(s) => s
            .parse()
            .map_err(|e: polymer2d::Error| Violation(e.to_string())),
    }
}

fn n_of(cfg: &Config, exp: &Experiment) -> Result<usize, Violation> {
    let n = cfg.count(N.name, exp.n as u64)? as usize;
    if n == 0 || n > MAX_N {
        return Err(Violation(format!(
            "window size: calibration.n = {n} outside 1..={MAX_N}"
        )));
    }
    Ok(n)
}

/// Every violation of `cfg` for `exp`, schema first.
pub fn violations(exp: &Experiment, cfg: &Config) -> Vec<Violation> {
    let schema: Vec<Key> = COMMON.iter().chain(exp.keys).copied().collect();
    let mut out = cfg.schema_violations(&schema);
    if !out.is_empty() {
        return out;
    }
    if let Some(named) = cfg.raw("experiment") {
        if named != exp.name {
            out.push(Violation(format!(
                "experiment key names '{named}' but '{}' was requested",
                exp.name
            )));
        }
    }
    if let Err(v) = cfg.count("seed", 0) {
        out.push(v);
    }
    if let Some(w) = cfg.raw("workers") {
        if !w.parse::<usize>().is_ok_and(|k| k > 0) {
            out.push(Violation(format!(
                "key 'workers': expected a positive integer, got {w:?}"
            )));
        }
    }
    if let Err(v) = cfg.count(REPS.name, 1) {
        out.push(v);
    }
    let family = match family_of(cfg, exp) {
        Ok(f) => f,
        Err(v) => {
            out.push(v);
            return out;
        }
    };
    if exp.calibrated {
        match n_of(cfg, exp) {
            Err(v) => out.push(v),
            Ok(n) => {
                if let Err(v) = resolve(
                    DisorderModel::new(family),
                    n,
                    cfg.float(BETA.name),
                    cfg.float(THETA.name),
                ) {
                    out.push(v);
                }
            }
        }
    }
    if out.is_empty() {
        out.extend((exp.extra)(cfg, exp));
    }
    out
}

/// A validated configuration bound to its experiment.
pub struct Ctx<'a> {
    pub exp: &'static Experiment,
    pub cfg: &'a Config,
    pub seed: u64,
}

impl Ctx<'_> {
    fn model(&self) -> Result<DisorderModel, Violation> {
        Ok(DisorderModel::new(family_of(self.cfg, self.exp)?))
    }

    fn n(&self) -> Result<usize, Violation> {
        n_of(self.cfg, self.exp)
    }

    fn calib(&self) -> Result<Calib, Violation> {
        resolve(
            self.model()?,
            self.n()?,
            self.cfg.float(BETA.name),
            self.cfg.float(THETA.name),
        )
    }

    fn reps(&self, default: u64) -> Result<u64, Violation> {
        self.cfg.count(REPS.name, default)
    }
}

pub fn execute(exp: &'static Experiment, cfg: &Config, seed: u64) -> Result<Outcome, Failure> {
    (exp.run)(&Ctx { exp, cfg, seed })
}

fn calib_json(c: &Calib) -> Value {
    json!({"n": c.n, "beta": c.beta, "theta": c.theta, "sigma2": c.sigma2})
}

fn no_extra(_: &Config, _: &Experiment) -> Vec<Violation> {
    Vec::new()
}

fn renamed(mut c: Check, suffix: &str) -> Check {
    c.name = format!("{} {suffix}", c.name);
    c
}

fn kernels_extra(cfg: &Config, _: &Experiment) -> Vec<Violation> {
    let mut out = Vec::new();
    match cfg.count("kernels.n_max", 10_000) {
        Ok(n) if n == 0 || n as usize > MAX_KERNEL_N => out.push(Violation(format!(
            "window size: kernels.n_max = {n} outside 1..={MAX_KERNEL_N}"
        ))),
        Err(v) => out.push(v),
        _ => {}
    }
    match cfg.count("kernels.conv_horizon", 64) {
        // Two (2c+1)² slices of doubles.
        Ok(c) if c > 4096 => out.push(Violation(format!(
            "memory cap: kernels.conv_horizon = {c} needs {} bytes",
            16 * (2 * c + 1).pow(2)
        ))),
        Err(v) => out.push(v),
        _ => {}
    }
    out
}

fn kernels(ctx: &Ctx) -> Result<Outcome, Failure> {
    let n_max = ctx.cfg.count("kernels.n_max", 10_000)? as usize;
    let conv = (ctx.cfg.count("kernels.conv_horizon", 64)? as usize).min(n_max);
    let t = KernelTable::build(n_max, 0, &[], conv);
    let mut table = Table::new(&["n", "u_n", "R_n"]);
    for n in 0..=n_max {
        table.push(vec![n.into(), t.u_slice()[n].into(), t.overlap(n).into()]);
    }
    // Convolution against the exact rational (2^{−2n} C(2n,n))².
    let conv_err = (1..=conv)
        .map(|n| {
            let exact = return_mass_rational(n).to_f64().unwrap();
            (t.u_slice()[n] - exact).abs() / exact
        })
        .fold(0.0, f64::max);
    let (r, a_n) = t.overlap_sum(n_max)?;
    let a = alpha();
    let checks = vec![
        Check::at_most("convolution matches closed form", conv_err, 1e-14),
        Check::at_most("alpha_N at least alpha", a - a_n, 0.0),
        Check::at_most("alpha_N at most alpha + pi/N", a_n, a + PI / n_max as f64),
    ];
    Ok(Outcome {
        summary: json!({
            "n_max": n_max, "conv_horizon": conv, "R_n_max": r, "alpha_n_max": a_n,
            "alpha": a, "max_conv_rel_error": conv_err,
        }),
        table,
        plot: Plot::lines(1, &[2, 3], "n", "u_n, R_n").logx().logy(),
        checks,
    })
}

fn calibrate_lists(cfg: &Config) -> Result<(Vec<usize>, Vec<f64>), Violation> {
    Ok((
        cfg.counts("calibrate.ns", &[1024, 16384])?,
        cfg.floats("calibrate.thetas", &[-2.0, 0.0, 1.0, 3.0]),
    ))
}

fn calibrate_extra(cfg: &Config, exp: &Experiment) -> Vec<Violation> {
    let model = match family_of(cfg, exp) {
        Ok(f) => DisorderModel::new(f),
        Err(v) => return vec![v],
    };
    let (ns, thetas) = match calibrate_lists(cfg) {
        Ok(l) => l,
        Err(v) => return vec![v],
    };
    let mut out = Vec::new();
    for &n in &ns {
        if n == 0 || n > MAX_N {
            out.push(Violation(format!(
                "window size: N = {n} outside 1..={MAX_N}"
            )));
            continue;
        }
        out.extend(thetas.iter().filter_map(|&t| theta_in_range(model, n, t)));
    }
    out
}

fn calibrate(ctx: &Ctx) -> Result<Outcome, Failure> {
    let model = ctx.model()?;
    let (ns, thetas) = calibrate_lists(ctx.cfg)?;
    let mut table = Table::new(&[
        "n",
        "theta",
        "beta",
        "sigma2",
        "theta_roundtrip",
        "e_theta_direct",
        "e_theta_product",
    ]);
    let mut checks = Vec::new();
    for &n in &ns {
        let kt = KernelTable::new(n);
        for &theta in &thetas {
            let cp = solve_beta(&model, &kt, n, theta)?;
            let rep = theta_of(&model, &kt, n, cp.beta)?;
            let back = rep.theta.finite().unwrap_or(f64::NAN);
            let direct = back.exp();
            checks.push(Check::at_most(
                format!("round trip N={n} theta={theta}"),
                (back - theta).abs(),
                1e-9,
            ));
            checks.push(Check::at_most(
                format!("e^theta routes N={n} theta={theta}"),
                (direct - rep.e_theta).abs() / direct,
                1e-10,
            ));
            table.push(vec![
                n.into(),
                theta.into(),
                cp.beta.into(),
                cp.sigma2.into(),
                back.into(),
                direct.into(),
                rep.e_theta.into(),
            ]);
        }
    }
    Ok(Outcome {
        summary: json!({"family": model.family.to_string(), "ns": ns, "thetas": thetas}),
        table,
        plot: Plot::lines(2, &[3], "theta", "beta"),
        checks,
    })
}

fn thetas_in_range(cfg: &Config, exp: &Experiment, k: &str, default: &[f64]) -> Vec<Violation> {
    let model = match family_of(cfg, exp) {
        Ok(f) => DisorderModel::new(f),
        Err(v) => return vec![v],
    };
    let n = match n_of(cfg, exp) {
        Ok(n) => n,
        Err(v) => return vec![v],
    };
    cfg.floats(k, default)
        .into_iter()
        .filter_map(|t| theta_in_range(model, n, t))
        .collect()
}

const DECAY_THETAS: [f64; 4] = [0.0, 1.0, 2.0, 3.0];

fn decay_extra(cfg: &Config, exp: &Experiment) -> Vec<Violation> {
    let mut out = thetas_in_range(cfg, exp, "decay.thetas", &DECAY_THETAS);
    let t = cfg.floats("decay.thetas", &DECAY_THETAS);
    if t.windows(2).any(|w| w[1] <= w[0]) {
        out.push(Violation("decay.thetas must be strictly increasing".into()));
    }
    out
}

fn decay_vs_theta(ctx: &Ctx) -> Result<Outcome, Failure> {
    let model = ctx.model()?;
    let n = ctx.n()?;
    let reps = ctx.reps(5000)?;
    let thetas = ctx.cfg.floats("decay.thetas", &DECAY_THETAS);
    let kt = KernelTable::new(n);
    let start = MassFunction::uniform_disc((n as f64).sqrt());
    let mut table = Table::new(&[
        "theta",
        "beta",
        "sigma2",
        "truncated_mean",
        "stderr",
        "minus_log",
        "pz_floor",
    ]);
    let mut checks = Vec::new();
    let mut est = Vec::new();
    let mut runs = Vec::new();
    for &theta in &thetas {
        let cp = solve_beta(&model, &kt, n, theta)?;
        let spec = ReplicaSpec::new(model, cp.beta, n, start.clone(), reps, ctx.seed);
        let s = truncated_mean(&spec)?;
        let m2 = second_moment_field(&kt, n, cp.sigma2, &start)?;
        checks.push(renamed(
            paley_zygmund_check(&s, m2),
            &format!("at theta={theta}"),
        ));
        table.push(vec![
            theta.into(),
            cp.beta.into(),
            cp.sigma2.into(),
            s.estimate.into(),
            s.stderr.into(),
            (-s.estimate.ln()).into(),
            (1.0 / (1.0 + m2)).into(),
        ]);
        est.push((s.estimate, s.stderr));
        runs.push(s);
    }
    checks.extend(decay_trend_checks(&thetas, &est));
    Ok(Outcome {
        summary: json!({
            "family": model.family.to_string(), "n": n, "reps": reps,
            "thetas": thetas,
            "estimates": runs,
        }),
        table,
        plot: Plot::lines(1, &[4, 7], "theta", "E[Z ^ 1]"),
        checks,
    })
}

/// Strictly decreasing, `2σ` between the ends, and `−log` convex: each
/// second difference positive at `1σ`.
pub fn decay_trend_checks(thetas: &[f64], est: &[(f64, f64)]) -> Vec<Check> {
    let mut out = Vec::new();
    if est.len() < 2 {
        return out;
    }
    let strictly = est.windows(2).all(|w| w[1].0 < w[0].0);
    out.push(Check {
        name: "strictly decreasing in theta".into(),
        pass: strictly,
        margin: est
            .windows(2)
            .map(|w| w[0].0 - w[1].0)
            .fold(f64::INFINITY, f64::min),
    });
    let (first, last) = (est[0], est[est.len() - 1]);
    out.push(Check::at_most(
        format!(
            "2 sigma separation theta={} vs theta={}",
            thetas[0],
            thetas[thetas.len() - 1]
        ),
        2.0 * first.1.hypot(last.1),
        first.0 - last.0,
    ));
    // −log m has error se/m.
    let y: Vec<(f64, f64)> = est.iter().map(|&(m, s)| (-m.ln(), s / m)).collect();
    for i in 1..y.len().saturating_sub(1) {
        let d2 = y[i + 1].0 - 2.0 * y[i].0 + y[i - 1].0;
        let se = (y[i + 1].1.powi(2) + 4.0 * y[i].1.powi(2) + y[i - 1].1.powi(2)).sqrt();
        out.push(Check::at_most(
            format!("-log convex at theta={}", thetas[i]),
            se,
            d2,
        ));
    }
    out
}

const SECOND_THETAS: [f64; 2] = [2.0, 3.0];

fn second_moment_extra(cfg: &Config, exp: &Experiment) -> Vec<Violation> {
    thetas_in_range(cfg, exp, "second_moment.thetas", &SECOND_THETAS)
}

fn second_moment(ctx: &Ctx) -> Result<Outcome, Failure> {
    let n = ctx.n()?;
    let thetas = ctx.cfg.floats("second_moment.thetas", &SECOND_THETAS);
    let kt = KernelTable::new(n);
    let mut table = Table::new(&["theta", "sigma2", "second_moment", "log_log", "bound"]);
    let mut checks = Vec::new();
    for &theta in &thetas {
        let r = quasicritical_bound_check(&kt, n, theta)?;
        let bound = theta - EULER_GAMMA + 0.5;
        checks.push(Check::at_most(
            format!("log log E[Z^2] at theta={theta}"),
            r.log_log,
            bound,
        ));
        table.push(vec![
            theta.into(),
            r.sigma2.into(),
            r.second_moment.into(),
            r.log_log.into(),
            bound.into(),
        ]);
    }
    Ok(Outcome {
        summary: json!({"n": n, "thetas": thetas}),
        table,
        plot: Plot::lines(1, &[4, 5], "theta", "log log E[Z^2]"),
        checks,
    })
}

fn truncated_variance_run(ctx: &Ctx) -> Result<Outcome, Failure> {
    let c = ctx.calib()?;
    let n = c.n;
    let k = ctx.cfg.count("truncated.k", default_truncation(n) as u64)? as usize;
    if k == 0 {
        return Err(Violation("truncated.k must be positive".into()).into());
    }
    let kt = KernelTable::new(n);
    let s = MomentSeries::new(&kt, n, c.sigma2, k)?;
    let v_next = truncated_variance(&kt, n, c.sigma2, k + 1)?;
    let mut table = Table::new(&["m", "B_m", "V_m"]);
    for (m, (b, v)) in s.b.iter().zip(&s.v).enumerate() {
        table.push(vec![m.into(), (*b).into(), (*v).into()]);
    }
    let tol = |x: f64| 1e-12 * x.abs();
    let worst_vb =
        s.v.iter()
            .zip(&s.b)
            .map(|(v, b)| v - b - tol(*b))
            .fold(f64::NEG_INFINITY, f64::max);
    let worst_k =
        s.v.iter()
            .zip(&v_next)
            .map(|(v, w)| v - w - tol(*w))
            .fold(f64::NEG_INFINITY, f64::max);
    let worst_m =
        s.v.windows(2)
            .map(|w| w[0] - w[1])
            .fold(f64::NEG_INFINITY, f64::max);
    let origin = MassFunction::dirac(Site::ORIGIN);
    let hat = hat_moment(&kt, n, c.sigma2, k, &origin, &origin)?;
    let checks = vec![
        Check::at_most("V(m,K) <= B(m)", worst_vb, 0.0),
        Check::at_most("V(m,K) <= V(m,K+1)", worst_k, 0.0),
        Check::at_most("V(m,K) nondecreasing in m", worst_m, 0.0),
        Check::at_most("hat moment lower bound", hat.lower, hat.value),
        Check::at_most("hat moment upper bound", hat.value, hat.upper),
    ];
    Ok(Outcome {
        summary: json!({"calibration": calib_json(&c), "k": k, "hat_moment": hat}),
        table,
        plot: Plot::lines(1, &[2, 3], "m", "second moment").logy(),
        checks,
    })
}

fn proxy_eta(cfg: &Config) -> Option<f64> {
    cfg.float("proxy.eta")
        .or_else(|| cfg.float(THETA.name).map(|t| t / 3.0))
}

fn proxy_mode(cfg: &Config) -> Result<ProxyMode, Violation> {
    match cfg.text("proxy.mode", "untruncated").as_str() {
        "untruncated" => Ok(ProxyMode::Untruncated),
        "truncated" => Ok(ProxyMode::Truncated(cfg.count("proxy.k", 2)? as usize)),
        other => Err(Violation(format!(
            "proxy.mode must be untruncated or truncated, got {other:?}"
        ))),
    }
}

fn proxy_extra(cfg: &Config, exp: &Experiment) -> Vec<Violation> {
    let mut out = Vec::new();
    let Some(eta) = proxy_eta(cfg) else {
        return vec![Violation(
            "proxy.eta is required when calibrating by beta".into(),
        )];
    };
    if !(eta >= LN_2 - 1e-12) {
        out.push(Violation(format!("proxy.eta = {eta} below log 2")));
    }
    if !(cfg.float_or("proxy.cutoff", DEFAULT_CUTOFF) > 0.0) {
        out.push(Violation("proxy.cutoff must be positive".into()));
    }
    let mode = match proxy_mode(cfg) {
        Ok(m) => m,
        Err(v) => {
            out.push(v);
            return out;
        }
    };
    if out.is_empty() {
        let n = n_of(cfg, exp).unwrap_or(exp.n);
        match make_strips(n, eta) {
            Err(e) => out.push(Violation(format!("strips: {e}"))),
            Ok(s) => {
                if let Err(e) = Proxy::new(s, mode, cfg.float_or("proxy.cutoff", DEFAULT_CUTOFF)) {
                    out.push(Violation(format!("proxy: {e}")));
                }
            }
        }
    }
    out
}

fn proxy_report(ctx: &Ctx) -> Result<Outcome, Failure> {
    let model = ctx.model()?;
    let c = ctx.calib()?;
    let reps = ctx.reps(10_000)?;
    let eta = proxy_eta(ctx.cfg)
        .ok_or_else(|| Violation("proxy.eta is required when calibrating by beta".into()))?;
    let strips = make_strips(c.n, eta)?;
    let proxy = Proxy::new(
        strips,
        proxy_mode(ctx.cfg)?,
        ctx.cfg.float_or("proxy.cutoff", DEFAULT_CUTOFF),
    )?;
    let kt = KernelTable::new(c.n);
    let grid = default_grid(strips.n_tilde);
    let rep = event_report(model, c.beta, &kt, &proxy, &grid, reps, ctx.seed)?;
    let mut table = Table::new(&["strip", "start", "end", "variance_exact"]);
    for (l, v) in rep.exact.strip_variance.iter().enumerate() {
        let j = 2 * (l + 1);
        let (s, t) = strips.interval(j);
        table.push(vec![j.into(), s.into(), t.into(), (*v).into()]);
    }
    Ok(Outcome {
        summary: json!({
            "calibration": calib_json(&c), "family": model.family.to_string(),
            "report": serde_json::to_value(&rep).map_err(|e| Failure::Runtime(e.to_string()))?,
        }),
        table,
        plot: Plot::lines(1, &[4], "strip", "Var(X_j)"),
        checks: rep.checks.clone(),
    })
}

fn stretches_extra(cfg: &Config, _: &Experiment) -> Vec<Violation> {
    let mut out = Vec::new();
    match cfg.count(REPS.name, 100_000) {
        Ok(r) if r < 1000 => out.push(Violation(format!("replicas = {r} below 1000"))),
        _ => {}
    }
    match cfg.count("stretches.n_tilde", 4096) {
        Ok(n) if n == 0 || n as usize > MAX_N => out.push(Violation(format!(
            "window size: stretches.n_tilde = {n} outside 1..={MAX_N}"
        ))),
        Err(v) => out.push(v),
        _ => {}
    }
    out
}

fn stretches(ctx: &Ctx) -> Result<Outcome, Failure> {
    let n_tilde = ctx.cfg.count("stretches.n_tilde", 4096)? as usize;
    let ell_max = ctx.cfg.count("stretches.ell_max", 8)? as usize;
    let reps = ctx.reps(100_000)? as usize;
    let kt = KernelTable::new(n_tilde);
    let mut rng = StreamKey::new(ctx.seed, 0, Tag::Aux).stream();
    let est = stretch_prob_mc(&kt, n_tilde, ell_max, reps, &mut rng)?;
    let mut table = Table::new(&["ell", "J", "stderr"]);
    for (l, (j, s)) in est.j.iter().zip(&est.std_err).enumerate() {
        table.push(vec![l.into(), (*j).into(), (*s).into()]);
    }
    let mut checks = Vec::new();
    for l in 0..ell_max {
        checks.push(Check::at_most(
            format!("J nonincreasing at ell={}", l + 1),
            est.j[l + 1] - est.j[l],
            2.0 * est.std_err[l].hypot(est.std_err[l + 1]),
        ));
    }
    if ell_max >= 2 {
        checks.push(Check::at_most("J_2 at most 1", est.j[2], 1.0));
    }
    let pts: Vec<(f64, f64)> = (2..=ell_max)
        .filter(|&l| est.j[l] > 0.0)
        .map(|l| (l as f64, est.j[l].ln()))
        .collect();
    let slope = least_squares_slope(&pts);
    // Faster than exponential decay: the last ratio J_{l+1}/J_l is no larger
    // than the first one past l = 2.
    if ell_max >= 4 && est.j[ell_max - 1] > 0.0 && est.j[2] > 0.0 {
        let ratio = |l: usize| {
            let r = est.j[l + 1] / est.j[l];
            let se = r * (est.std_err[l + 1] / est.j[l + 1]).hypot(est.std_err[l] / est.j[l]);
            (r, se)
        };
        let (first, last) = (ratio(2), ratio(ell_max - 1));
        checks.push(Check::at_most(
            "J decays faster than exponentially",
            last.0,
            first.0 + 2.0 * first.1.hypot(last.1),
        ));
    }
    Ok(Outcome {
        summary: json!({"n_tilde": n_tilde, "reps": reps, "slope": slope}),
        table,
        plot: Plot::lines(1, &[2], "ell", "J_ell").logy(),
        checks,
    })
}

const FE_GRID: [usize; 4] = [128, 256, 512, 1024];

fn free_energy_extra(cfg: &Config, _: &Experiment) -> Vec<Violation> {
    match cfg.counts("free_energy.n_grid", &FE_GRID) {
        Err(v) => vec![v],
        Ok(g) if g.is_empty() || g[0] == 0 || g.windows(2).any(|w| w[1] <= w[0]) => {
            vec![Violation(
                "free_energy.n_grid must be strictly increasing and positive".into(),
            )]
        }
        Ok(g) if *g.last().unwrap() > MAX_N => vec![Violation(format!(
            "window size: free_energy.n_grid reaches beyond {MAX_N}"
        ))],
        Ok(_) if !(cfg.float_or("free_energy.slope", DEFAULT_CUTOFF) > 0.0) => {
            vec![Violation("free_energy.slope must be positive".into())]
        }
        Ok(_) => Vec::new(),
    }
}

fn free_energy_run(ctx: &Ctx) -> Result<Outcome, Failure> {
    let model = ctx.model()?;
    let c = ctx.calib()?;
    let reps = ctx.reps(200)?;
    let grid = ctx.cfg.counts("free_energy.n_grid", &FE_GRID)?;
    let opts = SweepOptions {
        window: Some(Window {
            base: 2.0,
            slope: ctx.cfg.float_or("free_energy.slope", DEFAULT_CUTOFF),
        }),
        ..Default::default()
    };
    let rep = polymer2d::mc::free_energy(model, c.beta, &grid, reps, ctx.seed, &opts)?;
    let mut table = Table::new(&["n", "mean_log_z_over_n", "stderr"]);
    for r in &rep.rows {
        table.push(vec![r.n.into(), r.value.value.into(), r.value.se.into()]);
    }
    Ok(Outcome {
        summary: json!({
            "calibration": calib_json(&c), "family": model.family.to_string(),
            "estimate": rep.estimate.value, "stderr": rep.estimate.se, "reps": reps,
            "band": rep.band, "log_center": rep.log_center,
        }),
        table,
        plot: Plot::lines(1, &[2], "N", "E[log Z_N]/N").logx(),
        checks: rep.checks,
    })
}

const M_LIST: [f64; 3] = [1.0, 2.0, 3.0];

fn finite_volume_extra(cfg: &Config, exp: &Experiment) -> Vec<Violation> {
    let mut out = Vec::new();
    if n_of(cfg, exp).is_ok_and(|l| l < 16) {
        out.push(Violation(
            "finite-volume scale calibration.n must be >= 16".into(),
        ));
    }
    let m = cfg.floats("finite_volume.m_list", &M_LIST);
    if m.iter().any(|&x| !(x > 0.0)) {
        out.push(Violation(
            "finite_volume.m_list entries must be positive".into(),
        ));
    }
    let l = n_of(cfg, exp).unwrap_or(exp.n) as f64;
    if m.iter().any(|&x| x * l > MAX_N as f64) {
        out.push(Violation(format!("window size: m*L beyond {MAX_N}")));
    }
    out
}

fn finite_volume(ctx: &Ctx) -> Result<Outcome, Failure> {
    let model = ctx.model()?;
    let c = ctx.calib()?;
    let reps = ctx.reps(2000)?;
    let m_list = ctx.cfg.floats("finite_volume.m_list", &M_LIST);
    let rep = finite_volume_criterion(model, c.n, c.beta, reps, &m_list, ctx.seed)?;
    let mut table = Table::new(&["m", "n", "half_moment", "stderr", "bound", "argmax"]);
    for d in &rep.decay {
        table.push(vec![
            d.m.into(),
            d.n.into(),
            d.sup.estimate.value.into(),
            d.sup.estimate.se.into(),
            d.bound.into(),
            d.sup.argmax.clone().into(),
        ]);
    }
    Ok(Outcome {
        summary: json!({
            "calibration": calib_json(&c), "family": model.family.to_string(),
            "report": serde_json::to_value(&rep).map_err(|e| Failure::Runtime(e.to_string()))?,
        }),
        table,
        plot: Plot::lines(1, &[3, 5], "m", "E[Z^(1/2)]").logy(),
        checks: rep.checks,
    })
}

fn skeleton_extra(cfg: &Config, exp: &Experiment) -> Vec<Violation> {
    let mut out = Vec::new();
    if n_of(cfg, exp).is_ok_and(|n| n < 16) {
        out.push(Violation(
            "skeleton scale calibration.n must be >= 16".into(),
        ));
    }
    match cfg.count("skeleton.k", 8) {
        Ok(k) if k > 16 => out.push(Violation(format!("skeleton.k = {k} above 16"))),
        Err(v) => out.push(v),
        _ => {}
    }
    out
}

fn skeleton(ctx: &Ctx) -> Result<Outcome, Failure> {
    let model = ctx.model()?;
    let c = ctx.calib()?;
    let reps = ctx.reps(1000)?;
    let k = ctx.cfg.count("skeleton.k", 8)? as i64;
    let rep = skeleton_q(model, c.n, c.beta, &skeleton_sites(k), reps, ctx.seed)?;
    let mut table = Table::new(&[
        "y1",
        "y2",
        "l1",
        "q",
        "stderr",
        "uniform",
        "tail_bound",
        "argmax",
    ]);
    for r in &rep.rows {
        table.push(vec![
            r.y.x1.into(),
            r.y.x2.into(),
            r.y.l1().into(),
            r.q.value.into(),
            r.q.se.into(),
            r.uniform.value.into(),
            r.tail_bound.into(),
            r.argmax.clone().into(),
        ]);
    }
    let sum = rep.sum_within(k.min(6));
    Ok(Outcome {
        summary: json!({
            "calibration": calib_json(&c), "family": model.family.to_string(),
            "reps": reps, "sum": sum,
        }),
        table,
        plot: Plot::lines(3, &[4, 7], "|y|_1", "Q(y)").logy(),
        checks: rep.checks,
    })
}

fn tv_start(cfg: &Config, n: usize) -> Result<MassFunction, Violation> {
    match cfg.text("tv.start", "disc").as_str() {
        "disc" => Ok(MassFunction::uniform_disc((n as f64).sqrt())),
        "point" => Ok(MassFunction::dirac(Site::ORIGIN)),
        other => Err(Violation(format!(
            "tv.start must be disc or point, got {other:?}"
        ))),
    }
}

fn tv_extra(cfg: &Config, exp: &Experiment) -> Vec<Violation> {
    tv_start(cfg, exp.n).err().into_iter().collect()
}

fn tv_identity(ctx: &Ctx) -> Result<Outcome, Failure> {
    let model = ctx.model()?;
    let c = ctx.calib()?;
    let reps = ctx.reps(10_000)?;
    let start = tv_start(ctx.cfg, c.n)?;
    let m2 = second_moment_field(&KernelTable::new(c.n), c.n, c.sigma2, &start)?;
    let spec = ReplicaSpec::new(model, c.beta, c.n, start, reps, ctx.seed);
    let rep = inequality_suite(&spec, Some(m2))?;
    let mut table = Table::new(&["quantity", "estimate", "stderr"]);
    let rows = [
        (
            "truncated_mean",
            rep.truncated.estimate,
            rep.truncated.stderr,
        ),
        (
            "half_moment",
            rep.half_moment.estimate,
            rep.half_moment.stderr,
        ),
        ("plain_hit", rep.tv.plain_hit.value, rep.tv.plain_hit.se),
        (
            "tilted_miss",
            rep.tv.tilted_miss.value,
            rep.tv.tilted_miss.se,
        ),
        ("route2", rep.tv.route2.value, rep.tv.route2.se),
    ];
    for (q, e, s) in rows {
        table.push(vec![q.into(), e.into(), s.into()]);
    }
    Ok(Outcome {
        summary: json!({
            "calibration": calib_json(&c), "family": model.family.to_string(),
            "estimate": rep.truncated.estimate, "stderr": rep.truncated.stderr, "reps": reps,
            "second_moment": m2,
            "report": serde_json::to_value(&rep).map_err(|e| Failure::Runtime(e.to_string()))?,
        }),
        table,
        plot: Plot::lines(0, &[2], "quantity", "estimate"),
        checks: rep.checks,
    })
}

const B_NS: [usize; 3] = [256, 512, 1024];

fn appendix_b_extra(cfg: &Config, exp: &Experiment) -> Vec<Violation> {
    let model = match family_of(cfg, exp) {
        Ok(f) => DisorderModel::new(f),
        Err(v) => return vec![v],
    };
    let ns = match cfg.counts("appendix_b.ns", &B_NS) {
        Ok(n) => n,
        Err(v) => return vec![v],
    };
    let theta = cfg.float_or("appendix_b.theta", 0.0);
    let mut out = Vec::new();
    for &n in &ns {
        if n < 2 || n > MAX_N {
            out.push(Violation(format!(
                "window size: N = {n} outside 2..={MAX_N}"
            )));
        } else {
            out.extend(theta_in_range(model, n, theta));
        }
    }
    match cfg.count("appendix_b.fd_n", 8) {
        Ok(n) if n == 0 || n > 24 => out.push(Violation(format!(
            "memory cap: appendix_b.fd_n = {n} outside 1..=24"
        ))),
        Err(v) => out.push(v),
        _ => {}
    }
    out
}

fn appendix_b(ctx: &Ctx) -> Result<Outcome, Failure> {
    let model = ctx.model()?;
    let ns = ctx.cfg.counts("appendix_b.ns", &B_NS)?;
    let theta = ctx.cfg.float_or("appendix_b.theta", 0.0);
    let kt = KernelTable::new(*ns.iter().max().unwrap_or(&1));
    let mut table = Table::new(&[
        "n",
        "R_n",
        "local_time_mean",
        "beta",
        "sigma2",
        "l_exp_moment",
        "ratio",
    ]);
    let mut checks = Vec::new();
    let mut ratios = Vec::new();
    for &n in &ns {
        let r_n = kt.overlap(n);
        let flat = collision_moment(n, 0.0);
        checks.push(Check::at_most(
            format!("E[L_N] = R_N at N={n}"),
            (flat.l_exp_moment - r_n).abs() / r_n,
            1e-12,
        ));
        let cp = solve_beta(&model, &kt, n, theta)?;
        let lambda2 = cp.sigma2.ln_1p();
        let cm = collision_moment(n, lambda2);
        let l_exp = cm.log_l_exp_moment.exp();
        let ratio = cp.beta.powi(2) * (1.0 + 1.0 / cp.sigma2) * l_exp / (n as f64).ln().powi(2);
        ratios.push(ratio);
        table.push(vec![
            n.into(),
            r_n.into(),
            flat.l_exp_moment.into(),
            cp.beta.into(),
            cp.sigma2.into(),
            l_exp.into(),
            ratio.into(),
        ]);
    }
    if ratios.len() > 1 {
        let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        checks.push(Check::at_most(
            "L e^(lambda2 L) ratio varies by less than 50%",
            hi / lo - 1.0,
            0.5,
        ));
    }
    let fd_n = ctx.cfg.count("appendix_b.fd_n", 8)? as usize;
    let fd_beta = ctx.cfg.float_or("appendix_b.fd_beta", 0.8);
    let (grad, fd) = gradient_vs_differences(model, fd_beta, fd_n, ctx.seed)?;
    checks.push(Check::at_most(
        "gradient matches finite differences",
        (grad - fd).abs() / grad,
        1e-4,
    ));
    Ok(Outcome {
        summary: json!({
            "family": model.family.to_string(), "theta": theta, "ratios": ratios,
            "gradient": {"n": fd_n, "beta": fd_beta, "formula": grad, "finite_difference": fd},
        }),
        table,
        plot: Plot::lines(1, &[7], "N", "ratio").logx(),
        checks,
    })
}

/// `|∇_ω log Z_n|²` from the polymer marginals, and the same from central
/// differences over every cell of an exact field.
fn gradient_vs_differences(
    model: DisorderModel,
    beta: f64,
    n: usize,
    seed: u64,
) -> Result<(f64, f64), Failure> {
    let key = StreamKey::new(seed, 0, Tag::Field);
    let base = DiamondField::sample(model, key, n, 0, ParityMode::Even, 1 << 26)?;
    let c = Coupling::new(&model, beta)?;
    let f = MassFunction::dirac(Site::ORIGIN);
    let opts = SweepOptions::default();
    let grad = grad_log_norm(&base, &c, &f, n)?.value;
    let log_z = |d: &DiamondField| -> Result<f64, Failure> {
        Ok(partition_field(d, &c, &f, n, &opts)?.log_z())
    };
    let h = 1e-5;
    let mut fd = 0.0;
    let mut field = base.clone();
    for (t, x, w) in base.cells() {
        field.set(t, x, w + h)?;
        let up = log_z(&field)?;
        field.set(t, x, w - h)?;
        let down = log_z(&field)?;
        field.set(t, x, w)?;
        fd += ((up - down) / (2.0 * h)).powi(2);
    }
    Ok((grad, fd))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn catalog_names_are_unique() {
        let mut names: Vec<&str> = catalog().iter().map(|e| e.name).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 12);
    }

    #[test]
    fn trend_checks_on_known_sequences() {
        let th: [f64; 4] = [0.0, 1.0, 2.0, 3.0];
        // −log m = 0.1·θ²: convex, decreasing m.
        let est: Vec<(f64, f64)> = th.iter().map(|t| ((-0.1 * t * t).exp(), 1e-4)).collect();
        assert!(decay_trend_checks(&th, &est).iter().all(|c| c.pass));
        // Linear −log m: second differences vanish, so convexity fails.
        let lin: Vec<(f64, f64)> = th.iter().map(|t| ((-0.3 * t).exp(), 1e-4)).collect();
        let c = decay_trend_checks(&th, &lin);
        assert!(c[0].pass && c[1].pass);
        assert!(!c[2].pass && !c[3].pass);
    }

    #[test]
    fn calibration_needs_exactly_one_input() {
        let m = DisorderModel::gaussian();
        assert!(resolve(m, 64, Some(0.3), Some(1.0))
            .unwrap_err()
            .0
            .contains("exactly one of"));
        assert!(resolve(m, 64, None, None)
            .unwrap_err()
            .0
            .contains("exactly one of"));
        assert!(resolve(m, 64, None, Some(50.0))
            .unwrap_err()
            .0
            .starts_with("calibration out of range"));
        let c = resolve(m, 64, None, Some(1.0)).unwrap();
        assert!(c.beta > 0.0);
    }
}
