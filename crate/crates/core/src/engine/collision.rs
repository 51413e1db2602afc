use serde::{Deserialize, Serialize};

/// `E^{⊗2}[e^{λ₂L_N}]` and `E^{⊗2}[L_N e^{λ₂L_N}]` for the collision local time
/// `L_N = Σ_{n≤N} 1{S_n = S̃_n}` of two independent walks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CollisionMoment {
    pub n: usize,
    pub lambda2: f64,
    pub exp_moment: f64,
    pub l_exp_moment: f64,
    /// Logarithms of the two moments, finite even if the moments overflow.
    pub log_exp_moment: f64,
    pub log_l_exp_moment: f64,
}

/// One lazy step `¼, ½, ¼` along each axis, on the quadrant `d1, d2 ≥ 0` of a
/// grid that is even in both coordinates, so `g(−1) = g(1)` at the fold.
fn smooth(grid: &mut [f64], tmp: &mut [f64], w: usize, hi: usize) {
    // Along the second coordinate.
    for a in 0..=hi {
        let r = a * w;
        tmp[r] = 0.5 * (grid[r] + grid[r + 1]);
        for b in 1..=hi {
            tmp[r + b] = 0.25 * (grid[r + b - 1] + grid[r + b + 1]) + 0.5 * grid[r + b];
        }
    }
    // Along the first.
    for b in 0..=hi {
        grid[b] = 0.5 * (tmp[b] + tmp[w + b]);
    }
    for a in 1..=hi {
        let r = a * w;
        let (up, rest) = tmp.split_at(r);
        let (mid, down) = rest.split_at(w);
        let g = &mut grid[r..r + hi + 1];
        for (b, x) in g.iter_mut().enumerate() {
            *x = 0.25 * (up[r - w + b] + down[b]) + 0.5 * mid[b];
        }
    }
}

/// Sum over the full plane of a quadrant grid with reflection symmetry.
fn unfold_sum(grid: &[f64], w: usize, hi: usize) -> f64 {
    let mult = |k: usize| if k == 0 { 1.0 } else { 2.0 };
    let mut s = 0.0;
    for a in 0..=hi {
        let row: f64 = (0..=hi).map(|b| mult(b) * grid[a * w + b]).sum();
        s += mult(a) * row;
    }
    s
}

/// Exact moments through the difference walk `D = S − S̃`. In rotated
/// coordinates each component of `D` moves by `−2, 0, +2` with probabilities
/// `¼, ½, ¼`, independently, so one step is a separable smoothing; the law is
/// even in each component, so only one quadrant is stored. A second grid
/// carries `E[L e^{λ₂L}; D_n = d]`: on a collision
/// `(L+1)e^{λ₂(L+1)} = e^{λ₂}(L e^{λ₂L} + e^{λ₂L})`.
pub fn collision_moment(n: usize, lambda2: f64) -> CollisionMoment {
    let w = n + 3;
    let mut a = vec![0.0f64; w * w];
    let mut b = vec![0.0f64; w * w];
    let mut tmp = vec![0.0f64; w * w];
    a[0] = 1.0;
    let tilt = lambda2.exp();
    let mut log_scale = 0.0;
    for t in 1..=n {
        smooth(&mut a, &mut tmp, w, t);
        smooth(&mut b, &mut tmp, w, t);
        b[0] = tilt * (b[0] + a[0]);
        a[0] *= tilt;
        let mx = a[0].max(b[0]);
        if mx > 1e200 {
            for x in a.iter_mut().chain(b.iter_mut()) {
                *x *= 1e-200;
            }
            log_scale += 200.0 * std::f64::consts::LN_10;
        }
    }
    let sa = unfold_sum(&a, w, n);
    let sb = unfold_sum(&b, w, n);
    CollisionMoment {
        n,
        lambda2,
        exp_moment: sa * log_scale.exp(),
        l_exp_moment: sb * log_scale.exp(),
        log_exp_moment: sa.ln() + log_scale,
        log_l_exp_moment: sb.ln() + log_scale,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelTable;
    use crate::lattice::Site;

    #[test]
    fn mean_local_time_is_overlap_sum() {
        let t = KernelTable::new(300);
        for n in [1, 2, 7, 64, 300] {
            let m = collision_moment(n, 0.0);
            assert!((m.exp_moment - 1.0).abs() < 1e-12);
            assert!((m.l_exp_moment - t.overlap(n)).abs() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn single_step() {
        let l2 = 0.7f64;
        let m = collision_moment(1, l2);
        assert!((m.exp_moment - (1.0 + 0.25 * l2.exp_m1())).abs() < 1e-15);
        assert!((m.l_exp_moment - 0.25 * l2.exp()).abs() < 1e-15);
    }

    /// Enumerate all 16^n pairs of paths for small n.
    #[test]
    fn matches_pair_enumeration() {
        fn rec(n: usize, a: Site, b: Site, l: u32, out: &mut Vec<u32>) {
            if n == 0 {
                out.push(l);
                return;
            }
            for x in a.neighbors() {
                for y in b.neighbors() {
                    rec(n - 1, x, y, l + (x == y) as u32, out);
                }
            }
        }
        let l2 = 0.4f64;
        for n in 1..=3 {
            let mut ls = Vec::new();
            rec(n, Site::ORIGIN, Site::ORIGIN, 0, &mut ls);
            let cnt = ls.len() as f64;
            let e: f64 = ls.iter().map(|&l| (l2 * l as f64).exp()).sum::<f64>() / cnt;
            let le: f64 = ls
                .iter()
                .map(|&l| l as f64 * (l2 * l as f64).exp())
                .sum::<f64>()
                / cnt;
            let m = collision_moment(n, l2);
            assert!((m.exp_moment - e).abs() < 1e-14);
            assert!((m.l_exp_moment - le).abs() < 1e-14);
        }
    }

    /// Expanding `e^{λ₂L} = Π_n (1 + s 1{D_n = 0})` with `s = e^{λ₂} − 1` gives
    /// `G(m) = 1 + s Σ_j u(j) G(m − j)`, and differentiating in `λ₂` the
    /// second moment.
    #[test]
    fn matches_renewal_expansion() {
        let n = 400;
        let t = KernelTable::new(n);
        let l2 = 0.35f64;
        let s = l2.exp_m1();
        let mut g = vec![1.0f64; n + 1];
        let mut dg = vec![0.0f64; n + 1];
        for m in 1..=n {
            let (mut a, mut b) = (0.0, 0.0);
            for j in 1..=m {
                let u = t.return_mass(j).unwrap();
                a += u * g[m - j];
                b += u * (g[m - j] + s * dg[m - j]);
            }
            g[m] = 1.0 + s * a;
            dg[m] = b;
        }
        let m = collision_moment(n, l2);
        assert!((m.exp_moment / g[n] - 1.0).abs() < 1e-12);
        assert!((m.l_exp_moment / (l2.exp() * dg[n]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn huge_tilt_stays_finite_in_log() {
        let m = collision_moment(200, 30.0);
        assert!(m.log_exp_moment.is_finite() && m.log_l_exp_moment > m.log_exp_moment);
    }
}
