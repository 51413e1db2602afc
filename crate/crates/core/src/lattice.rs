//! Sites of ℤ² and finitely supported mass functions on them.
//!
//! Internally the engine works in rotated coordinates `u = x1 + x2`,
//! `v = x1 - x2`. In those coordinates a simple random walk step changes both
//! `u` and `v` by ±1 independently, so the two components are independent
//! one-dimensional walks and the reachable sites at time `n` form a dense grid.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Site {
    pub x1: i64,
    pub x2: i64,
}

impl Site {
    pub const ORIGIN: Site = Site { x1: 0, x2: 0 };

    pub const fn new(x1: i64, x2: i64) -> Self {
        Self { x1, x2 }
    }

    pub fn from_rotated(u: i64, v: i64) -> Self {
        debug_assert!((u - v).rem_euclid(2) == 0);
        Self {
            x1: (u + v) / 2,
            x2: (u - v) / 2,
        }
    }

    #[inline]
    pub fn u(&self) -> i64 {
        self.x1 + self.x2
    }

    #[inline]
    pub fn v(&self) -> i64 {
        self.x1 - self.x2
    }

    pub fn l1(&self) -> i64 {
        self.x1.abs() + self.x2.abs()
    }

    pub fn norm2(&self) -> f64 {
        ((self.x1 * self.x1 + self.x2 * self.x2) as f64).sqrt()
    }

    /// 0 for the even sublattice, 1 for the odd one.
    pub fn parity(&self) -> u8 {
        (self.u().rem_euclid(2)) as u8
    }

    pub fn neighbors(&self) -> [Site; 4] {
        [
            Site::new(self.x1 + 1, self.x2),
            Site::new(self.x1 - 1, self.x2),
            Site::new(self.x1, self.x2 + 1),
            Site::new(self.x1, self.x2 - 1),
        ]
    }
}

impl std::ops::Sub for Site {
    type Output = Site;
    fn sub(self, o: Site) -> Site {
        Site::new(self.x1 - o.x1, self.x2 - o.x2)
    }
}

impl std::ops::Add for Site {
    type Output = Site;
    fn add(self, o: Site) -> Site {
        Site::new(self.x1 + o.x1, self.x2 + o.x2)
    }
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.x1, self.x2)
    }
}

/// All lattice points with Euclidean norm at most `r`.
pub fn disc_sites(r: f64) -> Vec<Site> {
    let k = r.floor() as i64;
    let mut out = Vec::new();
    for x1 in -k..=k {
        for x2 in -k..=k {
            let s = Site::new(x1, x2);
            if ((x1 * x1 + x2 * x2) as f64) <= r * r + 1e-9 {
                out.push(s);
            }
        }
    }
    out
}

/// Finitely supported nonnegative weights on ℤ².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MassFunction {
    weights: BTreeMap<Site, f64>,
}

impl MassFunction {
    pub fn new(entries: impl IntoIterator<Item = (Site, f64)>) -> Result<Self> {
        let mut weights = BTreeMap::new();
        for (s, w) in entries {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Domain(format!(
                    "mass at {s} must be finite and >= 0, got {w}"
                )));
            }
            if w > 0.0 {
                *weights.entry(s).or_insert(0.0) += w;
            }
        }
        Ok(Self { weights })
    }

    pub fn dirac(s: Site) -> Self {
        Self {
            weights: BTreeMap::from([(s, 1.0)]),
        }
    }

    /// Uniform law on the lattice points of the closed disc of radius `r`.
    pub fn uniform_disc(r: f64) -> Self {
        let sites = disc_sites(r);
        let w = 1.0 / sites.len() as f64;
        Self {
            weights: sites.into_iter().map(|s| (s, w)).collect(),
        }
    }

    /// Uniform law on the given sites.
    pub fn uniform_on(sites: &[Site]) -> Result<Self> {
        if sites.is_empty() {
            return Err(Error::Domain("uniform law on an empty set".into()));
        }
        let w = 1.0 / sites.len() as f64;
        Self::new(sites.iter().map(|&s| (s, w)))
    }

    pub fn total(&self) -> f64 {
        self.weights.values().sum()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Site, f64)> + '_ {
        self.weights.iter().map(|(&s, &w)| (s, w))
    }

    pub fn get(&self, s: Site) -> f64 {
        self.weights.get(&s).copied().unwrap_or(0.0)
    }

    /// Largest Euclidean norm in the support.
    pub fn radius(&self) -> f64 {
        self.weights.keys().map(|s| s.norm2()).fold(0.0, f64::max)
    }

    /// Largest |u| or |v| in the support (equals the largest ℓ¹ norm).
    pub fn rotated_radius(&self) -> i64 {
        self.weights.keys().map(|s| s.l1()).max().unwrap_or(0)
    }

    pub fn parities(&self) -> (bool, bool) {
        let even = self.weights.keys().any(|s| s.parity() == 0);
        let odd = self.weights.keys().any(|s| s.parity() == 1);
        (even, odd)
    }

    pub fn is_probability(&self, tol: f64) -> bool {
        (self.total() - 1.0).abs() <= tol
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            weights: self
                .weights
                .iter()
                .map(|(&s, &w)| (s, w * a))
                .filter(|(_, w)| *w > 0.0)
                .collect(),
        }
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Result<Self> {
        Self::new(
            self.iter()
                .map(|(s, w)| (s, a * w))
                .chain(other.iter().map(|(s, w)| (s, b * w))),
        )
    }

    pub fn translated(&self, by: Site) -> Self {
        Self {
            weights: self.weights.iter().map(|(&s, &w)| (s + by, w)).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_round_trip() {
        for x1 in -5..=5 {
            for x2 in -5..=5 {
                let s = Site::new(x1, x2);
                assert_eq!(Site::from_rotated(s.u(), s.v()), s);
                assert_eq!(s.l1(), s.u().abs().max(s.v().abs()));
            }
        }
    }

    #[test]
    fn neighbors_move_both_rotated_coordinates() {
        let s = Site::new(2, -1);
        for nb in s.neighbors() {
            assert_eq!((nb.u() - s.u()).abs(), 1);
            assert_eq!((nb.v() - s.v()).abs(), 1);
        }
    }

    #[test]
    fn uniform_disc_is_a_probability() {
        let f = MassFunction::uniform_disc(3.0);
        assert_eq!(f.len(), 29);
        assert!(f.is_probability(1e-12));
        assert!(f.radius() <= 3.0);
        assert_eq!(f.parities(), (true, true));
    }

    #[test]
    fn negative_mass_rejected() {
        assert!(MassFunction::new([(Site::ORIGIN, -0.1)]).is_err());
    }
}
