//! Counter-based random numbers.
//!
//! Every random quantity in the crate is a pure function of a [`StreamKey`]
//! (master seed, replica id, purpose tag) and a small coordinate tuple. Fields
//! can therefore be evaluated lazily, in any traversal order and on any number
//! of workers, and still reproduce bit-for-bit.

use rand::{Rng, RngCore, SeedableRng};

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline(always)]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Master seed for size-biased replicas, so their unbiased cells are
/// independent of a plain run with the same seed.
pub fn tilted_seed(seed: u64) -> u64 {
    mix64(seed ^ 0x7117_ED00_0000_0000)
}

/// Absorb one word into a running hash.
#[inline(always)]
fn absorb(h: u64, w: u64) -> u64 {
    mix64(h ^ w.wrapping_mul(GOLDEN).wrapping_add(0x632B_E59B_D9B4_E019))
}

/// Purpose tags. Distinct tags give statistically independent streams for the
/// same (seed, replica).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Tag {
    Field = 1,
    Tilt = 2,
    Path = 3,
    Renewal = 4,
    Aux = 5,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub seed: u64,
    pub replica: u64,
    pub tag: Tag,
}

impl StreamKey {
    pub fn new(seed: u64, replica: u64, tag: Tag) -> Self {
        Self { seed, replica, tag }
    }

    pub fn with_tag(self, tag: Tag) -> Self {
        Self { tag, ..self }
    }

    #[inline(always)]
    fn base(&self) -> u64 {
        absorb(
            absorb(absorb(0x5EED, self.seed), self.replica),
            self.tag as u64,
        )
    }

    /// Hash of a space-time coordinate under this key.
    #[inline(always)]
    pub fn hash3(&self, a: i64, b: i64, c: i64) -> u64 {
        let h = self.base();
        absorb(absorb(absorb(h, a as u64), b as u64), c as u64)
    }

    /// A sequential generator for this key; used where a stream (not a cell
    /// lookup) is the natural interface, e.g. sampling walk paths.
    pub fn stream(&self) -> CellRng {
        CellRng::seed_from_u64(self.base())
    }

    /// A generator dedicated to one coordinate tuple.
    #[inline(always)]
    pub fn cell(&self, a: i64, b: i64, c: i64) -> CellRng {
        CellRng {
            state: self.hash3(a, b, c),
        }
    }

    /// The hash state after absorbing `(a, b)`; finishing it with `c` gives
    /// the same value as `hash3(a, b, c)` at a third of the cost.
    #[inline(always)]
    pub fn row(&self, a: i64, b: i64) -> RowKey {
        RowKey(absorb(absorb(self.base(), a as u64), b as u64))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RowKey(u64);

impl RowKey {
    #[inline(always)]
    pub fn hash(&self, c: i64) -> u64 {
        absorb(self.0, c as u64)
    }

    #[inline(always)]
    pub fn cell(&self, c: i64) -> CellRng {
        CellRng {
            state: self.hash(c),
        }
    }
}

/// SplitMix64 generator. Small state, so constructing one per lattice cell is
/// cheap.
#[derive(Debug, Clone)]
pub struct CellRng {
    state: u64,
}

impl RngCore for CellRng {
    #[inline(always)]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline(always)]
    fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let v = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&v[..chunk.len()]);
        }
    }
}

impl SeedableRng for CellRng {
    type Seed = [u8; 8];

    fn from_seed(seed: Self::Seed) -> Self {
        Self {
            state: u64::from_le_bytes(seed),
        }
    }

    fn seed_from_u64(state: u64) -> Self {
        Self {
            state: mix64(state),
        }
    }
}

/// Uniform in [0, 1) with 53 random bits.
#[inline(always)]
pub fn unit_f64(bits: u64) -> f64 {
    (bits >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform in (0, 1).
#[inline(always)]
pub fn open_unit_f64(bits: u64) -> f64 {
    ((bits >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// Draw an index from a cumulative distribution (last entry ~1).
pub fn sample_cdf<R: Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> usize {
    let x: f64 = rng.random::<f64>() * cdf[cdf.len() - 1];
    cdf.partition_point(|&c| c <= x).min(cdf.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_hash_is_pure() {
        let k = StreamKey::new(7, 3, Tag::Field);
        assert_eq!(k.hash3(1, -2, 5), k.hash3(1, -2, 5));
        assert_ne!(k.hash3(1, -2, 5), k.hash3(1, 2, 5));
        assert_ne!(k.hash3(1, -2, 5), k.with_tag(Tag::Tilt).hash3(1, -2, 5));
        assert_ne!(
            k.hash3(1, -2, 5),
            StreamKey::new(7, 4, Tag::Field).hash3(1, -2, 5)
        );
        assert_eq!(k.row(1, -2).hash(5), k.hash3(1, -2, 5));
    }

    #[test]
    fn uniforms_look_uniform() {
        let k = StreamKey::new(1, 0, Tag::Aux);
        let n = 200_000;
        let mut s = 0.0;
        let mut s2 = 0.0;
        for i in 0..n {
            let x = unit_f64(k.hash3(i, 0, 0));
            s += x;
            s2 += x * x;
        }
        let m = s / n as f64;
        let v = s2 / n as f64 - m * m;
        assert!((m - 0.5).abs() < 4.0 * (1.0 / 12.0f64 / n as f64).sqrt());
        assert!((v - 1.0 / 12.0).abs() < 2e-3);
    }

    #[test]
    fn cdf_sampling_hits_all_atoms() {
        let cdf = [0.25, 0.5, 1.0];
        let mut rng = StreamKey::new(2, 0, Tag::Aux).stream();
        let mut counts = [0usize; 3];
        for _ in 0..40_000 {
            counts[sample_cdf(&cdf, &mut rng)] += 1;
        }
        assert!((counts[2] as f64 / 40_000.0 - 0.5).abs() < 0.02);
        assert!(counts[0] > 9_000 && counts[1] > 9_000);
    }
}
