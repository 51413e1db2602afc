use rand_distr::{Distribution, StandardNormal};
use std::io::Write;

use super::{ceil_div2, floor_div2, Coupling, Environment, SQRT3};
use crate::disorder::{DisorderModel, Family};
use crate::error::{Error, Result};
use crate::lattice::Site;
use crate::rng::{unit_f64, StreamKey, Tag};

const J_SHIFT: i64 = 1 << 40;

/// A disorder field evaluated on demand: every cell is a pure function of the
/// stream key and `(n, u, v)`, so nothing is stored.
#[derive(Debug, Clone, Copy)]
pub struct CounterField {
    pub model: DisorderModel,
    pub key: StreamKey,
}

impl CounterField {
    pub fn new(model: DisorderModel, seed: u64, replica: u64) -> Self {
        Self {
            model,
            key: StreamKey::new(seed, replica, Tag::Field),
        }
    }
}

impl Environment for CounterField {
    #[inline]
    fn omega(&self, n: usize, u: i64, v: i64) -> f64 {
        match self.model.family {
            Family::Rademacher => {
                // One hash supplies 64 consecutive cells along v.
                let j = floor_div2(v) + J_SHIFT;
                let bits = self.key.hash3(n as i64, u, j >> 6);
                if (bits >> (j & 63)) & 1 == 1 {
                    1.0
                } else {
                    -1.0
                }
            }
            Family::Gaussian => StandardNormal.sample(&mut self.key.cell(n as i64, u, v)),
            Family::BoundedUniform => {
                SQRT3 * (2.0 * unit_f64(self.key.hash3(n as i64, u, v)) - 1.0)
            }
        }
    }

    fn fill_weights(&self, c: &Coupling, n: usize, u: i64, v0: i64, out: &mut [f64]) {
        let row = self.key.row(n as i64, u);
        match self.model.family {
            Family::Rademacher => {
                let mut j = floor_div2(v0) + J_SHIFT;
                let mut k = 0;
                while k < out.len() {
                    let bits = row.hash(j >> 6);
                    let start = (j & 63) as usize;
                    let take = (64 - start).min(out.len() - k);
                    let mut word = bits >> start;
                    let mut quads = out[k..k + take].chunks_exact_mut(4);
                    for q in &mut quads {
                        q.copy_from_slice(c.sign_weights(word));
                        word >>= 4;
                    }
                    let rest = quads.into_remainder();
                    let len = rest.len();
                    rest.copy_from_slice(&c.sign_weights(word)[..len]);
                    k += take;
                    j += take as i64;
                }
            }
            Family::Gaussian => {
                for (k, w) in out.iter_mut().enumerate() {
                    let g: f64 = StandardNormal.sample(&mut row.cell(v0 + 2 * k as i64));
                    *w = c.weight(g);
                }
            }
            Family::BoundedUniform => {
                for (k, w) in out.iter_mut().enumerate() {
                    *w = c.uniform_weight(row.hash(v0 + 2 * k as i64));
                }
            }
        }
    }
}

/// Which start-point parities a stored field serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParityMode {
    /// Only walks started on the even sublattice (x1 + x2 even).
    Even,
    Both,
}

/// Stored values of one cell class at one time: a dense `(i, j)` box.
#[derive(Debug, Clone)]
struct Slab {
    i_lo: i64,
    j_lo: i64,
    wi: usize,
    wj: usize,
    vals: Vec<f64>,
}

/// A materialized disorder field on the reachable cone
/// `{(n, x): 1 ≤ n ≤ N, |x|₁ ≤ n + r0}` of admissible parity.
#[derive(Debug, Clone)]
pub struct DiamondField {
    pub model: DisorderModel,
    pub n: usize,
    pub r0: i64,
    pub parity: ParityMode,
    /// `slabs[n−1][s]` holds cells with `u ≡ s (mod 2)` at time `n`.
    slabs: Vec<[Option<Slab>; 2]>,
}

impl DiamondField {
    /// Bytes needed to store the cone.
    pub fn memory_estimate(n: usize, r0: i64, parity: ParityMode) -> u64 {
        let classes = if parity == ParityMode::Both { 2 } else { 1 };
        (1..=n as u64)
            .map(|t| classes * (t + r0 as u64 + 1).pow(2) * 8)
            .sum()
    }

    /// Copy the cone of `source` into memory. Values agree bit-for-bit with
    /// the lazy field.
    pub fn sample(
        model: DisorderModel,
        key: StreamKey,
        n: usize,
        r0: i64,
        parity: ParityMode,
        cap_bytes: u64,
    ) -> Result<Self> {
        let needed = Self::memory_estimate(n, r0, parity);
        if needed > cap_bytes {
            return Err(Error::MemoryCap {
                needed_bytes: needed,
                cap_bytes,
            });
        }
        let src = CounterField {
            model,
            key: key.with_tag(Tag::Field),
        };
        Ok(Self::from_environment(&src, model, n, r0, parity))
    }

    pub fn from_environment<E: Environment>(
        src: &E,
        model: DisorderModel,
        n: usize,
        r0: i64,
        parity: ParityMode,
    ) -> Self {
        let mut slabs = Vec::with_capacity(n);
        for t in 1..=n {
            let reach = t as i64 + r0;
            let mut pair: [Option<Slab>; 2] = [None, None];
            for s in 0..2i64 {
                // Even starts occupy class s = t mod 2 at time t.
                if parity == ParityMode::Even && s != (t as i64) % 2 {
                    continue;
                }
                let i_lo = ceil_div2(-reach - s);
                let i_hi = floor_div2(reach - s);
                let wi = (i_hi - i_lo + 1) as usize;
                let mut vals = Vec::with_capacity(wi * wi);
                for i in i_lo..=i_hi {
                    for j in i_lo..=i_hi {
                        vals.push(src.omega(t, 2 * i + s, 2 * j + s));
                    }
                }
                pair[s as usize] = Some(Slab {
                    i_lo,
                    j_lo: i_lo,
                    wi,
                    wj: wi,
                    vals,
                });
            }
            slabs.push(pair);
        }
        Self {
            model,
            n,
            r0,
            parity,
            slabs,
        }
    }

    fn slot(&self, n: usize, u: i64, v: i64) -> Option<(usize, usize)> {
        let s = u.rem_euclid(2) as usize;
        let slab = self.slabs.get(n.checked_sub(1)?)?[s].as_ref()?;
        let i = floor_div2(u) - slab.i_lo;
        let j = floor_div2(v) - slab.j_lo;
        if i < 0 || j < 0 || i as usize >= slab.wi || j as usize >= slab.wj {
            return None;
        }
        Some((s, i as usize * slab.wj + j as usize))
    }

    pub fn get(&self, n: usize, x: Site) -> Option<f64> {
        let (s, k) = self.slot(n, x.u(), x.v())?;
        Some(self.slabs[n - 1][s].as_ref().unwrap().vals[k])
    }

    /// Overwrite one cell (used for finite-difference checks).
    pub fn set(&mut self, n: usize, x: Site, omega: f64) -> Result<()> {
        let (s, k) = self
            .slot(n, x.u(), x.v())
            .ok_or_else(|| Error::Domain(format!("cell ({n}, {x}) not stored")))?;
        self.slabs[n - 1][s].as_mut().unwrap().vals[k] = omega;
        Ok(())
    }

    /// Every stored cell as `(n, x, ω)` in time-major order.
    pub fn cells(&self) -> Vec<(usize, Site, f64)> {
        let mut out = Vec::new();
        for (t, pair) in self.slabs.iter().enumerate() {
            for (s, slab) in pair.iter().enumerate() {
                let Some(slab) = slab else { continue };
                for a in 0..slab.wi {
                    for b in 0..slab.wj {
                        let u = 2 * (slab.i_lo + a as i64) + s as i64;
                        let v = 2 * (slab.j_lo + b as i64) + s as i64;
                        let x = Site::from_rotated(u, v);
                        if x.l1() <= t as i64 + 1 + self.r0 {
                            out.push((t + 1, x, slab.vals[a * slab.wj + b]));
                        }
                    }
                }
            }
        }
        out
    }

    /// CSV snapshot `n,x1,x2,omega`, only for tiny fields.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        if self.n > 8 {
            return Err(Error::Unsupported(format!(
                "field export is limited to N <= 8, got N = {}",
                self.n
            )));
        }
        writeln!(out, "n,x1,x2,omega")?;
        let mut cells = self.cells();
        cells.sort_by_key(|&(n, x, _)| (n, x));
        for (n, x, w) in cells {
            writeln!(out, "{},{},{},{:.16e}", n, x.x1, x.x2, w)?;
        }
        Ok(())
    }
}

impl Environment for DiamondField {
    fn omega(&self, n: usize, u: i64, v: i64) -> f64 {
        let (s, k) = self
            .slot(n, u, v)
            .unwrap_or_else(|| panic!("cell (n={n}, u={u}, v={v}) outside stored cone"));
        self.slabs[n - 1][s].as_ref().unwrap().vals[k]
    }

    fn admits_parity(&self, p: u8) -> bool {
        self.parity == ParityMode::Both || p == 0
    }

    fn covers(&self, n: usize, r0: i64) -> bool {
        n <= self.n && r0 <= self.r0
    }
}

/// A field whose cells along one space-time path are redrawn from the
/// exponentially tilted law.
#[derive(Debug, Clone)]
pub struct Tilted<E> {
    pub inner: E,
    pub model: DisorderModel,
    pub beta: f64,
    /// `path[n]` is the walk position at time `n` (entry 0 is the start).
    pub path: Vec<Site>,
    key: StreamKey,
}

impl<E: Environment> Tilted<E> {
    pub fn new(inner: E, model: DisorderModel, beta: f64, path: Vec<Site>, key: StreamKey) -> Self {
        Self {
            inner,
            model,
            beta,
            path,
            key: key.with_tag(Tag::Tilt),
        }
    }

    #[inline]
    fn tilted_value(&self, n: usize, u: i64, v: i64) -> f64 {
        self.model
            .sample_tilted(self.beta, &mut self.key.cell(n as i64, u, v))
    }

    #[inline]
    fn on_path(&self, n: usize, u: i64, v: i64) -> bool {
        self.path.get(n).is_some_and(|p| p.u() == u && p.v() == v) && n >= 1
    }
}

impl<E: Environment> Environment for Tilted<E> {
    fn omega(&self, n: usize, u: i64, v: i64) -> f64 {
        if self.on_path(n, u, v) {
            self.tilted_value(n, u, v)
        } else {
            self.inner.omega(n, u, v)
        }
    }

    fn fill_weights(&self, c: &Coupling, n: usize, u: i64, v0: i64, out: &mut [f64]) {
        self.inner.fill_weights(c, n, u, v0, out);
        if n == 0 {
            return;
        }
        if let Some(p) = self.path.get(n) {
            if p.u() == u {
                let k = (p.v() - v0).div_euclid(2);
                if (p.v() - v0).rem_euclid(2) == 0 && k >= 0 && (k as usize) < out.len() {
                    out[k as usize] = c.weight(self.tilted_value(n, u, p.v()));
                }
            }
        }
    }

    fn admits_parity(&self, p: u8) -> bool {
        self.inner.admits_parity(p)
    }

    fn covers(&self, n: usize, r0: i64) -> bool {
        self.inner.covers(n, r0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lazy_and_stored_fields_agree() {
        for model in [
            DisorderModel::gaussian(),
            DisorderModel::rademacher(),
            DisorderModel::bounded_uniform(),
        ] {
            let key = StreamKey::new(9, 2, Tag::Field);
            let lazy = CounterField { model, key };
            let a = DiamondField::sample(model, key, 6, 2, ParityMode::Both, 1 << 30).unwrap();
            let b = DiamondField::sample(model, key, 6, 2, ParityMode::Both, 1 << 30).unwrap();
            for (n, x, w) in a.cells() {
                assert_eq!(w.to_bits(), lazy.omega(n, x.u(), x.v()).to_bits());
                assert_eq!(w.to_bits(), b.get(n, x).unwrap().to_bits());
            }
        }
    }

    #[test]
    fn rademacher_row_fill_matches_cellwise() {
        let model = DisorderModel::rademacher();
        let f = CounterField::new(model, 4, 0);
        let c = Coupling::new(&model, 0.6).unwrap();
        for (u, v0, len) in [(3, -201, 150), (0, 0, 1), (-7, 125, 70)] {
            let mut row = vec![0.0; len];
            f.fill_weights(&c, 5, u, v0, &mut row);
            for (k, w) in row.iter().enumerate() {
                assert_eq!(*w, c.weight(f.omega(5, u, v0 + 2 * k as i64)));
            }
        }
    }

    #[test]
    fn cone_cells_are_unique_and_counted() {
        let model = DisorderModel::rademacher();
        let f = DiamondField::sample(
            model,
            StreamKey::new(1, 0, Tag::Field),
            2,
            0,
            ParityMode::Even,
            1 << 20,
        )
        .unwrap();
        let cells = f.cells();
        assert_eq!(cells.len(), 13);
        let mut keys: Vec<_> = cells.iter().map(|(n, x, _)| (*n, *x)).collect();
        keys.sort();
        keys.dedup();
        assert_eq!(keys.len(), 13);
    }

    #[test]
    fn memory_cap_refuses() {
        let err = DiamondField::sample(
            DisorderModel::gaussian(),
            StreamKey::new(0, 0, Tag::Field),
            4096,
            0,
            ParityMode::Both,
            1 << 20,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MemoryCap { .. }));
    }

    #[test]
    fn cell_statistics() {
        let model = DisorderModel::gaussian();
        let f = DiamondField::sample(
            model,
            StreamKey::new(21, 0, Tag::Field),
            500,
            0,
            ParityMode::Both,
            1 << 32,
        )
        .unwrap();
        let vals: Vec<f64> = f.cells().into_iter().map(|c| c.2).take(1_000_000).collect();
        assert!(vals.len() >= 1_000_000);
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let v = vals.iter().map(|x| x * x).sum::<f64>() / vals.len() as f64 - m * m;
        assert!(m.abs() < 4e-3 && (v - 1.0).abs() < 1e-2, "{m} {v}");
    }

    #[test]
    fn csv_export_only_for_tiny_fields() {
        let model = DisorderModel::rademacher();
        let key = StreamKey::new(1, 0, Tag::Field);
        let f = DiamondField::sample(model, key, 2, 0, ParityMode::Even, 1 << 20).unwrap();
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,x1,x2,omega\n"));
        assert_eq!(text.lines().count(), 14);
        let big = DiamondField::sample(model, key, 9, 0, ParityMode::Even, 1 << 20).unwrap();
        assert!(big.write_csv(Vec::new()).is_err());
    }
}
