use serde::{Deserialize, Serialize};

use super::{Coupling, Environment};
use crate::error::{Error, Result};
use crate::lattice::{MassFunction, Site};

/// Dense slice over the plain-coordinate box `|x_i| ≤ r`.
struct Slice {
    r: i64,
    vals: Vec<f64>,
    log_scale: f64,
}

impl Slice {
    fn new(r: i64) -> Self {
        let w = (2 * r + 1) as usize;
        Self {
            r,
            vals: vec![0.0; w * w],
            log_scale: 0.0,
        }
    }

    #[inline]
    fn idx(&self, x: Site) -> Option<usize> {
        if x.x1.abs() > self.r || x.x2.abs() > self.r {
            return None;
        }
        let w = (2 * self.r + 1) as usize;
        Some((x.x1 + self.r) as usize * w + (x.x2 + self.r) as usize)
    }

    fn get(&self, x: Site) -> f64 {
        self.idx(x).map_or(0.0, |k| self.vals[k])
    }

    fn sites(&self) -> impl Iterator<Item = Site> + '_ {
        let r = self.r;
        (-r..=r).flat_map(move |a| (-r..=r).map(move |b| Site::new(a, b)))
    }

    fn normalize(&mut self) {
        let s: f64 = self.vals.iter().sum();
        if s > 0.0 {
            for v in &mut self.vals {
                *v /= s;
            }
            self.log_scale += s.ln();
        }
    }
}

/// Quenched polymer marginals `P^ω(S_t = x)` for `1 ≤ t ≤ n`, by a stored
/// forward pass and a backward pass over the cone.
pub fn polymer_marginals<E: Environment>(
    env: &E,
    c: &Coupling,
    f: &MassFunction,
    n: usize,
) -> Result<(f64, Vec<Vec<(Site, f64)>>)> {
    let r0 = f.rotated_radius();
    let r = n as i64 + r0;
    let cells = (2 * r + 1).pow(2) as u64 * (n as u64 + 1);
    if cells > 1 << 27 {
        return Err(Error::MemoryCap {
            needed_bytes: cells * 8,
            cap_bytes: 8 << 27,
        });
    }
    // Sites whose parity no start in `f` can reach carry no weight.
    let w = |t: usize, y: Site| {
        if env.admits_parity((y.u() + t as i64).rem_euclid(2) as u8) {
            c.weight(env.omega(t, y.u(), y.v()))
        } else {
            0.0
        }
    };
    // Forward: fwd[t](x) ∝ E_f[Π_{k≤t} w_k ; S_t = x].
    let mut fwd = Vec::with_capacity(n + 1);
    let mut s0 = Slice::new(r);
    for (x, m) in f.iter() {
        let k = s0.idx(x).unwrap();
        s0.vals[k] += m;
    }
    s0.normalize();
    fwd.push(s0);
    for t in 1..=n {
        let prev = &fwd[t - 1];
        let mut s = Slice::new(r);
        s.log_scale = prev.log_scale;
        let sites: Vec<Site> = s.sites().filter(|y| y.l1() <= t as i64 + r0).collect();
        for y in sites {
            let g: f64 = y.neighbors().iter().map(|&x| prev.get(x)).sum();
            if g != 0.0 {
                let k = s.idx(y).unwrap();
                s.vals[k] = 0.25 * g * w(t, y);
            }
        }
        s.normalize();
        fwd.push(s);
    }
    let log_z = fwd[n].log_scale;
    // Backward: bwd(x) at time t is E_x[Π_{k=t+1}^{n} w_k].
    let mut bwd = Slice::new(r);
    for v in &mut bwd.vals {
        *v = 1.0;
    }
    let mut out = vec![Vec::new(); n];
    for t in (1..=n).rev() {
        let ft = &fwd[t];
        let mut m = Vec::new();
        for x in ft.sites() {
            let a = ft.get(x);
            if a != 0.0 {
                let p = a * bwd.get(x) * (ft.log_scale + bwd.log_scale - log_z).exp();
                m.push((x, p));
            }
        }
        out[t - 1] = m;
        let mut nb = Slice::new(r);
        nb.log_scale = bwd.log_scale;
        let sites: Vec<Site> = nb.sites().filter(|x| x.l1() < t as i64 + r0).collect();
        for x in sites {
            let g: f64 = x.neighbors().iter().map(|&y| w(t, y) * bwd.get(y)).sum();
            let k = nb.idx(x).unwrap();
            nb.vals[k] = 0.25 * g;
        }
        nb.normalize();
        bwd = nb;
    }
    Ok((log_z, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub log_z: f64,
    /// `|∇_ω log Z|² = β² Σ_{t,x} P^ω(S_t = x)²`.
    pub value: f64,
}

/// Squared gradient of `log Z_N(f)` in the disorder. Since
/// `∂ log Z/∂ω(t,x) = β P^ω(S_t = x)`, the sum of squares is `β²` times the
/// expected collision count of two replicas under the quenched polymer
/// measure, i.e. the two-replica collision sweep divided by `Z²`.
pub fn grad_log_norm<E: Environment>(
    env: &E,
    c: &Coupling,
    f: &MassFunction,
    n: usize,
) -> Result<GradReport> {
    if c.beta == 0.0 {
        return Ok(GradReport {
            log_z: f.total().ln(),
            value: 0.0,
        });
    }
    let (log_z, marg) = polymer_marginals(env, c, f, n)?;
    let s: f64 = marg.iter().flatten().map(|(_, p)| p * p).sum();
    Ok(GradReport {
        log_z,
        value: c.beta * c.beta * s,
    })
}
