use serde::{Deserialize, Serialize};

use super::{ceil_div2, floor_div2, Coupling, Environment};
use crate::error::{Error, Result};
use crate::lattice::{MassFunction, Site};

const HI: f64 = 4_294_967_296.0; // 2^32
const LO: f64 = 1.0 / HI;

/// Spatial truncation to the ℓ¹ ball `|x|₁ ≤ ⌊base + slope·√n⌋` at time `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub base: f64,
    pub slope: f64,
}

impl Window {
    pub fn constant(h: f64) -> Self {
        Self {
            base: h,
            slope: 0.0,
        }
    }

    #[inline]
    pub fn radius(&self, n: usize) -> i64 {
        (self.base + self.slope * (n as f64).sqrt()).floor() as i64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Renorm {
    /// Rescale when the slice maximum leaves `[2^−32, 2^32]`.
    #[default]
    OnRangeExit,
    EveryStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepOptions {
    pub window: Option<Window>,
    pub renorm: Renorm,
}

/// `Z = value · e^{log_norm}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PartitionResult {
    pub log_norm: f64,
    pub value: f64,
    pub renorm_count: u32,
    /// Set when the target set was empty.
    pub empty_target: bool,
}

impl PartitionResult {
    fn zero() -> Self {
        Self {
            log_norm: 0.0,
            value: 0.0,
            renorm_count: 0,
            empty_target: false,
        }
    }

    pub fn z(&self) -> f64 {
        self.value * self.log_norm.exp()
    }

    pub fn log_z(&self) -> f64 {
        self.value.ln() + self.log_norm
    }

    /// Sum of independent contributions, keeping the larger normalizer.
    fn merge(self, o: Self) -> Self {
        if o.value == 0.0 {
            return Self {
                renorm_count: self.renorm_count + o.renorm_count,
                ..self
            };
        }
        if self.value == 0.0 {
            return Self {
                renorm_count: self.renorm_count + o.renorm_count,
                ..o
            };
        }
        let ln = self.log_norm.max(o.log_norm);
        let value = self.value * (self.log_norm - ln).exp() + o.value * (o.log_norm - ln).exp();
        Self {
            log_norm: ln,
            value,
            renorm_count: self.renorm_count + o.renorm_count,
            empty_target: false,
        }
    }
}

/// Inclusive index box; empty when `lo > hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Rect {
    i_lo: i64,
    i_hi: i64,
    j_lo: i64,
    j_hi: i64,
}

impl Rect {
    fn empty(&self) -> bool {
        self.i_lo > self.i_hi || self.j_lo > self.j_hi
    }

    /// Indices of sites with `u, v ∈ [lo, hi]` and parity `s`.
    fn from_range(lo_u: i64, hi_u: i64, lo_v: i64, hi_v: i64, s: i64) -> Self {
        Self {
            i_lo: ceil_div2(lo_u - s),
            i_hi: floor_div2(hi_u - s),
            j_lo: ceil_div2(lo_v - s),
            j_hi: floor_div2(hi_v - s),
        }
    }
}

/// A dense buffer over a fixed index box.
struct Plane {
    i0: i64,
    j0: i64,
    wj: usize,
    data: Vec<f64>,
}

impl Plane {
    fn new(i0: i64, i1: i64, j0: i64, j1: i64) -> Self {
        let wi = (i1 - i0 + 1) as usize;
        let wj = (j1 - j0 + 1) as usize;
        Self {
            i0,
            j0,
            wj,
            data: vec![0.0; wi * wj],
        }
    }

    #[inline]
    fn at(&self, i: i64, j: i64) -> usize {
        (i - self.i0) as usize * self.wj + (j - self.j0) as usize
    }

    fn get(&self, i: i64, j: i64) -> f64 {
        self.data[self.at(i, j)]
    }

    fn set(&mut self, i: i64, j: i64, x: f64) {
        let k = self.at(i, j);
        self.data[k] = x;
    }

    fn sum(&self, r: &Rect) -> f64 {
        let mut s = 0.0;
        if r.empty() {
            return s;
        }
        for i in r.i_lo..=r.i_hi {
            let a = self.at(i, r.j_lo);
            s += self.data[a..=a + (r.j_hi - r.j_lo) as usize]
                .iter()
                .sum::<f64>();
        }
        s
    }

    fn scale(&mut self, r: &Rect, by: f64) {
        if r.empty() {
            return;
        }
        for i in r.i_lo..=r.i_hi {
            let a = self.at(i, r.j_lo);
            for x in &mut self.data[a..=a + (r.j_hi - r.j_lo) as usize] {
                *x *= by;
            }
        }
    }

    /// Zero the cells of `old` that are not in `new`.
    fn clear_outside(&mut self, old: &Rect, new: &Rect) {
        if old.empty() {
            return;
        }
        for i in old.i_lo..=old.i_hi {
            let row = self.at(i, old.j_lo);
            let cells = &mut self.data[row..=row + (old.j_hi - old.j_lo) as usize];
            if new.empty() || i < new.i_lo || i > new.i_hi {
                cells.fill(0.0);
                continue;
            }
            let lo = (new.j_lo - old.j_lo).clamp(0, cells.len() as i64) as usize;
            let hi = (new.j_hi - old.j_lo + 1).clamp(lo as i64, cells.len() as i64) as usize;
            cells[..lo].fill(0.0);
            cells[hi..].fill(0.0);
        }
    }
}

/// `dst[i][j] = ¼ Σ_{a,b∈{0,1}} src[i+δ+a][j+δ+b]` over `rect`, times the
/// row weights if given, with `δ = s − 1` for target parity `s`. Returns the
/// largest value written.
fn gather<E: Environment>(
    src: &Plane,
    dst: &mut Plane,
    rect: &Rect,
    s: i64,
    weights: Option<(&E, &Coupling, usize)>,
    wbuf: &mut Vec<f64>,
) -> f64 {
    let mx: f64 = 0.0;
    if rect.empty() {
        return mx;
    }
    let d = s - 1;
    let len = (rect.j_hi - rect.j_lo + 1) as usize;
    if wbuf.len() < len {
        wbuf.resize(len, 0.0);
    }
    let w = &mut wbuf[..len];
    let mut lanes = [0.0f64; 4];
    for i in rect.i_lo..=rect.i_hi {
        let a0 = src.at(i + d, rect.j_lo + d);
        let b0 = src.at(i + d + 1, rect.j_lo + d);
        // Equal-length views let the loops below run without bounds checks.
        let (a_l, a_r) = (&src.data[a0..a0 + len], &src.data[a0 + 1..a0 + 1 + len]);
        let (b_l, b_r) = (&src.data[b0..b0 + len], &src.data[b0 + 1..b0 + 1 + len]);
        let o0 = dst.at(i, rect.j_lo);
        let out = &mut dst.data[o0..o0 + len];
        match weights {
            Some((env, c, n)) => {
                env.fill_weights(c, n, 2 * i + s, 2 * rect.j_lo + s, w);
                for k in 0..len {
                    out[k] = 0.25 * w[k] * ((a_l[k] + b_l[k]) + (a_r[k] + b_r[k]));
                }
            }
            None => {
                for k in 0..len {
                    out[k] = 0.25 * ((a_l[k] + b_l[k]) + (a_r[k] + b_r[k]));
                }
            }
        }
        // Comparison form rather than f64::max so the reduction vectorizes.
        let mut chunks = out.chunks_exact(4);
        for ch in &mut chunks {
            for (m, &x) in lanes.iter_mut().zip(ch) {
                *m = if x > *m { x } else { *m };
            }
        }
        for &x in chunks.remainder() {
            lanes[0] = if x > lanes[0] { x } else { lanes[0] };
        }
    }
    lanes.iter().fold(mx, |a, &b| if b > a { b } else { a })
}

/// Multiply a slice in place by the weights at time `n`.
fn apply_weights<E: Environment>(
    p: &mut Plane,
    rect: &Rect,
    s: i64,
    env: &E,
    c: &Coupling,
    n: usize,
    wbuf: &mut Vec<f64>,
) {
    if rect.empty() {
        return;
    }
    let len = (rect.j_hi - rect.j_lo + 1) as usize;
    if wbuf.len() < len {
        wbuf.resize(len, 0.0);
    }
    for i in rect.i_lo..=rect.i_hi {
        let w = &mut wbuf[..len];
        env.fill_weights(c, n, 2 * i + s, 2 * rect.j_lo + s, w);
        let o = p.at(i, rect.j_lo);
        for (x, wk) in p.data[o..o + len].iter_mut().zip(w.iter()) {
            *x *= wk;
        }
    }
}

fn maybe_renorm(
    p: &mut Plane,
    r: &Rect,
    mx: f64,
    mode: Renorm,
    log_norm: &mut f64,
    count: &mut u32,
) {
    let out_of_range = mx > HI || (mx < LO && mx > 0.0);
    if mode == Renorm::EveryStep || out_of_range {
        let s = p.sum(r);
        if s > 0.0 && s.is_finite() {
            p.scale(r, 1.0 / s);
            *log_norm += s.ln();
            *count += 1;
        }
    }
}

/// Start masses of one parity class, in rotated coordinates.
fn split_by_parity(f: &MassFunction) -> [Vec<(i64, i64, f64)>; 2] {
    let mut out: [Vec<(i64, i64, f64)>; 2] = [Vec::new(), Vec::new()];
    for (x, w) in f.iter() {
        out[x.parity() as usize].push((x.u(), x.v(), w));
    }
    out
}

fn check_parity<E: Environment>(env: &E, f: &MassFunction) -> Result<()> {
    let (even, odd) = f.parities();
    for (p, present) in [(0u8, even), (1u8, odd)] {
        if present && !env.admits_parity(p) {
            return Err(Error::Parity(format!(
                "start mass has sites of parity {p}, which the field does not cover"
            )));
        }
    }
    Ok(())
}

/// Forward sweep of one parity class from time `t0`, reporting
/// `Σ_x term(x) W_t(x)` at each requested time `t` (ascending).
fn forward_class<E: Environment>(
    env: &E,
    c: &Coupling,
    t0: usize,
    starts: &[(i64, i64, f64)],
    times: &[usize],
    terminal: Option<&dyn Fn(Site) -> f64>,
    opts: &SweepOptions,
    profile: Option<&mut Vec<(Site, f64)>>,
) -> Vec<PartitionResult> {
    let t_end = *times.last().unwrap();
    if starts.is_empty() {
        return vec![PartitionResult::zero(); times.len()];
    }
    let p = starts[0].0.rem_euclid(2);
    let (mut umin, mut umax, mut vmin, mut vmax) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
    for &(u, v, _) in starts {
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let k_max = (t_end - t0) as i64;
    let hmax = opts
        .window
        .map(|w| w.radius(t_end).max(0))
        .unwrap_or(i64::MAX / 4);
    let gl_u = (umin - k_max).max(-hmax).min(umin) - 4;
    let gh_u = (umax + k_max).min(hmax).max(umax) + 4;
    let gl_v = (vmin - k_max).max(-hmax).min(vmin) - 4;
    let gh_v = (vmax + k_max).min(hmax).max(vmax) + 4;
    let (i0, i1, j0, j1) = (
        floor_div2(gl_u),
        floor_div2(gh_u) + 1,
        floor_div2(gl_v),
        floor_div2(gh_v) + 1,
    );
    let mut cur = Plane::new(i0, i1, j0, j1);
    let mut nxt = Plane::new(i0, i1, j0, j1);
    for &(u, v, w) in starts {
        let (i, j) = (floor_div2(u), floor_div2(v));
        cur.set(i, j, cur.get(i, j) + w);
    }
    let rect_at = |n: usize| -> Rect {
        let k = (n - t0) as i64;
        let s = (p + k).rem_euclid(2);
        let (mut lu, mut hu, mut lv, mut hv) = (umin - k, umax + k, vmin - k, vmax + k);
        if let Some(w) = opts.window {
            if n > t0 {
                let h = w.radius(n);
                lu = lu.max(-h);
                hu = hu.min(h);
                lv = lv.max(-h);
                hv = hv.min(h);
            }
        }
        Rect::from_range(lu, hu, lv, hv, s)
    };
    let mut log_norm = 0.0;
    let mut count = 0u32;
    let mut wbuf = Vec::new();
    let mut out = Vec::with_capacity(times.len());
    let mut ti = 0;
    let report =
        |plane: &Plane, rect: &Rect, n: usize, log_norm: f64, count: u32| -> PartitionResult {
            let s = (p + (n - t0) as i64).rem_euclid(2);
            let value = match terminal {
                None => plane.sum(rect),
                Some(g) => {
                    let mut acc = 0.0;
                    if !rect.empty() {
                        for i in rect.i_lo..=rect.i_hi {
                            for j in rect.j_lo..=rect.j_hi {
                                let x = plane.get(i, j);
                                if x != 0.0 {
                                    acc += x * g(Site::from_rotated(2 * i + s, 2 * j + s));
                                }
                            }
                        }
                    }
                    acc
                }
            };
            PartitionResult {
                log_norm,
                value,
                renorm_count: count,
                empty_target: false,
            }
        };
    // The start slice is never clipped by the window.
    let mut rect = rect_at(t0);
    while ti < times.len() && times[ti] == t0 {
        out.push(report(&cur, &rect, t0, log_norm, count));
        ti += 1;
    }
    let mut prev_same_parity = Rect {
        i_lo: 1,
        i_hi: 0,
        j_lo: 1,
        j_hi: 0,
    };
    for n in t0 + 1..=t_end {
        let new_rect = rect_at(n);
        let s = (p + (n - t0) as i64).rem_euclid(2);
        // nxt holds the slice from time n−2; drop anything outside the new box.
        nxt.clear_outside(&prev_same_parity, &new_rect);
        let mx = gather(&cur, &mut nxt, &new_rect, s, Some((env, c, n)), &mut wbuf);
        maybe_renorm(
            &mut nxt,
            &new_rect,
            mx,
            opts.renorm,
            &mut log_norm,
            &mut count,
        );
        prev_same_parity = rect;
        rect = new_rect;
        std::mem::swap(&mut cur, &mut nxt);
        while ti < times.len() && times[ti] == n {
            out.push(report(&cur, &rect, n, log_norm, count));
            ti += 1;
        }
    }
    if let Some(cells) = profile {
        if !rect.empty() {
            let s = (p + (t_end - t0) as i64).rem_euclid(2);
            for i in rect.i_lo..=rect.i_hi {
                for j in rect.j_lo..=rect.j_hi {
                    let x = cur.get(i, j);
                    if x != 0.0 {
                        cells.push((Site::from_rotated(2 * i + s, 2 * j + s), x));
                    }
                }
            }
        }
    }
    out
}

/// `Z_t(f)` at each time in `times` (ascending), in one forward pass.
pub fn partition_field_at<E: Environment>(
    env: &E,
    c: &Coupling,
    f: &MassFunction,
    times: &[usize],
    opts: &SweepOptions,
) -> Result<Vec<PartitionResult>> {
    if times.is_empty() {
        return Ok(Vec::new());
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Domain("observation times must be ascending".into()));
    }
    check_parity(env, f)?;
    if !env.covers(*times.last().unwrap(), f.rotated_radius()) {
        return Err(Error::WindowExceeded(
            "field does not cover the walk cone".into(),
        ));
    }
    let classes = split_by_parity(f);
    let mut acc = vec![PartitionResult::zero(); times.len()];
    for cls in classes.iter().filter(|c| !c.is_empty()) {
        let r = forward_class(env, c, 0, cls, times, None, opts, None);
        for (a, b) in acc.iter_mut().zip(r) {
            *a = a.merge(b);
        }
    }
    Ok(acc)
}

/// `Z_N(f) = Σ_x f(x) Z_N(x)` by a forward sweep.
pub fn partition_field<E: Environment>(
    env: &E,
    c: &Coupling,
    f: &MassFunction,
    n: usize,
    opts: &SweepOptions,
) -> Result<PartitionResult> {
    Ok(partition_field_at(env, c, f, &[n], opts)?[0])
}

/// `Z_{s,t}(μ; B)`: walks started from `μ` at time `s`, weighted by the
/// disorder at times `s+1..=t`, restricted to end in `B`.
pub fn partition_constrained<E: Environment>(
    env: &E,
    c: &Coupling,
    mu: &MassFunction,
    s: usize,
    t: usize,
    target: &dyn Fn(Site) -> bool,
    opts: &SweepOptions,
) -> Result<PartitionResult> {
    if t < s {
        return Err(Error::Domain(format!(
            "constrained partition needs s <= t, got {s} > {t}"
        )));
    }
    check_parity(env, mu)?;
    let g = |x: Site| if target(x) { 1.0 } else { 0.0 };
    let mut acc = PartitionResult::zero();
    for cls in split_by_parity(mu).iter().filter(|c| !c.is_empty()) {
        acc = acc.merge(forward_class(env, c, s, cls, &[t], Some(&g), opts, None)[0]);
    }
    if acc.value == 0.0 {
        acc.empty_target = true;
    }
    Ok(acc)
}

/// Unnormalized endpoint law: `Z_n(f; {x}) = value · e^{log_norm}` per site.
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointProfile {
    pub log_norm: f64,
    pub cells: Vec<(Site, f64)>,
}

impl EndpointProfile {
    /// `Z_n(f; B)` for the set `B`.
    pub fn mass(&self, set: impl Fn(Site) -> bool) -> f64 {
        self.cells
            .iter()
            .filter(|c| set(c.0))
            .map(|c| c.1)
            .sum::<f64>()
            * self.log_norm.exp()
    }
}

/// Endpoint weights of `Z_n(f)` after one forward sweep.
pub fn endpoint_profile<E: Environment>(
    env: &E,
    c: &Coupling,
    f: &MassFunction,
    n: usize,
    opts: &SweepOptions,
) -> Result<EndpointProfile> {
    check_parity(env, f)?;
    if !env.covers(n, f.rotated_radius()) {
        return Err(Error::WindowExceeded(
            "field does not cover the walk cone".into(),
        ));
    }
    let mut parts = Vec::new();
    for cls in split_by_parity(f).iter().filter(|c| !c.is_empty()) {
        let mut cells = Vec::new();
        let r = forward_class(env, c, 0, cls, &[n], None, opts, Some(&mut cells))[0];
        parts.push((r.log_norm, cells));
    }
    let log_norm = parts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let mut cells = Vec::new();
    for (ln, part) in parts {
        let k = (ln - log_norm).exp();
        cells.extend(part.into_iter().map(|(x, v)| (x, v * k)));
    }
    Ok(EndpointProfile {
        log_norm: if log_norm.is_finite() { log_norm } else { 0.0 },
        cells,
    })
}

/// Backward values at time `s` for every start in `|x|₁ ≤ r`, both parities.
pub struct StartTable {
    pub r: i64,
    pub s: usize,
    classes: [Option<(Plane, Rect, f64)>; 2],
}

impl std::fmt::Debug for StartTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("StartTable")
            .field("r", &self.r)
            .field("s", &self.s)
            .finish()
    }
}

impl StartTable {
    /// `Z(x)` for a start `x` in the window.
    pub fn get(&self, x: Site) -> Result<f64> {
        let (v, ln) = self.parts(x)?;
        Ok(v * ln.exp())
    }

    pub fn log_get(&self, x: Site) -> Result<f64> {
        let (v, ln) = self.parts(x)?;
        Ok(v.ln() + ln)
    }

    fn parts(&self, x: Site) -> Result<(f64, f64)> {
        if x.l1() > self.r {
            return Err(Error::WindowExceeded(format!(
                "start {x} outside |x|_1 <= {}",
                self.r
            )));
        }
        let p = x.parity() as usize;
        let (plane, _, ln) = self.classes[p]
            .as_ref()
            .ok_or_else(|| Error::Parity(format!("no table for parity {p}")))?;
        Ok((plane.get(floor_div2(x.u()), floor_div2(x.v())), *ln))
    }

    /// `Σ_x f(x) Z(x)`.
    pub fn integrate(&self, f: &MassFunction) -> Result<f64> {
        let mut s = 0.0;
        for (x, w) in f.iter() {
            s += w * self.get(x)?;
        }
        Ok(s)
    }
}

/// Backward sweep: `V_t = term` (or 1), `V_{n−1}(x) = ¼ Σ_{y∼x} w_n(y) V_n(y)`,
/// returning `V_s` on `|x|₁ ≤ r` for the requested parities.
pub fn backward<E: Environment>(
    env: &E,
    c: &Coupling,
    s: usize,
    t: usize,
    r: i64,
    parities: &[u8],
    terminal: Option<&dyn Fn(Site) -> f64>,
    opts: &SweepOptions,
) -> Result<StartTable> {
    if t < s {
        return Err(Error::Domain(format!(
            "backward sweep needs s <= t, got {s} > {t}"
        )));
    }
    if !env.covers(t, r) {
        return Err(Error::WindowExceeded(
            "field does not cover the walk cone".into(),
        ));
    }
    let mut classes: [Option<(Plane, Rect, f64)>; 2] = [None, None];
    for &p in parities {
        if !env.admits_parity(p) {
            return Err(Error::Parity(format!(
                "field does not cover starts of parity {p}"
            )));
        }
        let p = p as i64;
        let k_max = (t - s) as i64;
        let reach = r + k_max + 4;
        let rect_at = |n: usize| -> Rect {
            let k = (n - s) as i64;
            let par = (p + k).rem_euclid(2);
            let mut h = r + k;
            if let Some(w) = opts.window {
                if n > s {
                    h = h.min(w.radius(n));
                }
            }
            Rect::from_range(-h, h, -h, h, par)
        };
        let (i0, i1) = (floor_div2(-reach), floor_div2(reach) + 1);
        let mut cur = Plane::new(i0, i1, i0, i1);
        let mut nxt = Plane::new(i0, i1, i0, i1);
        let mut rect = rect_at(t);
        let par_t = (p + k_max).rem_euclid(2);
        if !rect.empty() {
            for i in rect.i_lo..=rect.i_hi {
                for j in rect.j_lo..=rect.j_hi {
                    let x = Site::from_rotated(2 * i + par_t, 2 * j + par_t);
                    cur.set(i, j, terminal.map_or(1.0, |g| g(x)));
                }
            }
        }
        let mut log_norm = 0.0;
        let mut count = 0u32;
        let mut wbuf = Vec::new();
        let mut prev_same_parity = Rect {
            i_lo: 1,
            i_hi: 0,
            j_lo: 1,
            j_hi: 0,
        };
        for n in (s + 1..=t).rev() {
            let par_n = (p + (n - s) as i64).rem_euclid(2);
            apply_weights(&mut cur, &rect, par_n, env, c, n, &mut wbuf);
            let new_rect = rect_at(n - 1);
            let par_prev = (p + (n - 1 - s) as i64).rem_euclid(2);
            nxt.clear_outside(&prev_same_parity, &new_rect);
            let mx = gather::<E>(&cur, &mut nxt, &new_rect, par_prev, None, &mut wbuf);
            maybe_renorm(
                &mut nxt,
                &new_rect,
                mx,
                opts.renorm,
                &mut log_norm,
                &mut count,
            );
            prev_same_parity = rect;
            rect = new_rect;
            std::mem::swap(&mut cur, &mut nxt);
        }
        classes[p as usize] = Some((cur, rect, log_norm));
    }
    Ok(StartTable { r, s, classes })
}

/// `Z_N(x)` for every `|x|₁ ≤ r` by one backward sweep per parity class.
pub fn partition_all_starts<E: Environment>(
    env: &E,
    c: &Coupling,
    n: usize,
    r: i64,
    opts: &SweepOptions,
) -> Result<StartTable> {
    let parities: Vec<u8> = [0u8, 1]
        .into_iter()
        .filter(|&p| env.admits_parity(p))
        .collect();
    backward(env, c, 0, n, r, &parities, None, opts)
}
