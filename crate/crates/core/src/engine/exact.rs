use std::collections::BTreeMap;
use std::ops::{Add, Mul};

use crate::lattice::Site;

/// The arithmetic the plain-coordinate sweep needs: `f64` for cross-checks,
/// exact rationals for enumeration oracles.
pub trait Ring: Clone + Add<Output = Self> + Mul<Output = Self> {
    fn zero() -> Self;
    fn one() -> Self;
}

impl Ring for f64 {
    fn zero() -> Self {
        0.0
    }
    fn one() -> Self {
        1.0
    }
}

impl Ring for num_rational::BigRational {
    fn zero() -> Self {
        num_traits::Zero::zero()
    }
    fn one() -> Self {
        num_traits::One::one()
    }
}

/// `Z_N(f)` by the forward recursion on plain coordinates, with arbitrary
/// weights `weight(n, y)` at times `1..=n`. Slow, but generic over the number
/// type and independent of the rotated-grid sweeps.
pub fn exact_partition<T: Ring>(
    n: usize,
    f: &[(Site, T)],
    weight: impl Fn(usize, Site) -> T,
    quarter: T,
) -> T {
    let mut cur: BTreeMap<Site, T> = BTreeMap::new();
    for (x, w) in f {
        let e = cur.entry(*x).or_insert_with(T::zero);
        *e = e.clone() + w.clone();
    }
    for t in 1..=n {
        let mut nxt: BTreeMap<Site, T> = BTreeMap::new();
        for (x, w) in &cur {
            for y in x.neighbors() {
                let e = nxt.entry(y).or_insert_with(T::zero);
                *e = e.clone() + w.clone();
            }
        }
        cur = nxt
            .into_iter()
            .map(|(y, s)| (y, s * quarter.clone() * weight(t, y)))
            .collect();
    }
    cur.into_values().fold(T::zero(), |a, b| a + b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::BigRational;

    #[test]
    fn unit_weights_preserve_mass() {
        let one = || BigRational::from_integer(1.into());
        let q = BigRational::new(1.into(), 4.into());
        let z = exact_partition(4, &[(Site::ORIGIN, one())], |_, _| one(), q);
        assert_eq!(z, one());
    }
}
