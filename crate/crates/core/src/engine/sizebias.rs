use rand::Rng;

use super::{CounterField, Tilted};
use crate::disorder::DisorderModel;
use crate::error::{Error, Result};
use crate::lattice::{MassFunction, Site};
use crate::rng::{sample_cdf, StreamKey, Tag};

/// A walk of `n` steps started from a point drawn from `f`.
pub fn sample_path<R: Rng + ?Sized>(f: &MassFunction, n: usize, rng: &mut R) -> Vec<Site> {
    let entries: Vec<(Site, f64)> = f.iter().collect();
    let mut acc = 0.0;
    let cdf: Vec<f64> = entries
        .iter()
        .map(|e| {
            acc += e.1;
            acc
        })
        .collect();
    let mut x = entries[sample_cdf(&cdf, rng)].0;
    let mut path = Vec::with_capacity(n + 1);
    path.push(x);
    for _ in 0..n {
        x = x.neighbors()[(rng.next_u32() >> 30) as usize];
        path.push(x);
    }
    path
}

/// A draw from the size-biased law `P̃_f(dω) = Z_N(f) P(dω)`: a walk under
/// `P_f`, then the disorder redrawn from the tilted law along its graph.
/// The path uses the replica's `Path` stream and the tilted cells its `Tilt`
/// stream, so the plain cells coincide with the untilted replica.
pub fn sizebias_sample(
    model: DisorderModel,
    beta: f64,
    n: usize,
    f: &MassFunction,
    seed: u64,
    replica: u64,
) -> Result<(Vec<Site>, Tilted<CounterField>)> {
    if !f.is_probability(1e-12) {
        return Err(Error::Domain(format!(
            "size-biasing needs a probability mass function, total = {}",
            f.total()
        )));
    }
    let key = StreamKey::new(seed, replica, Tag::Path);
    let path = sample_path(f, n, &mut key.stream());
    let field = CounterField::new(model, seed, replica);
    Ok((path.clone(), Tilted::new(field, model, beta, path, key)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{partition_field, Coupling, Environment, SweepOptions};

    #[test]
    fn unnormalized_start_is_rejected() {
        let f = MassFunction::new([(Site::ORIGIN, 0.5)]).unwrap();
        assert!(sizebias_sample(DisorderModel::gaussian(), 0.5, 4, &f, 1, 0).is_err());
    }

    #[test]
    fn path_is_a_walk_from_the_support() {
        let f = MassFunction::uniform_disc(2.0);
        let (p, _) = sizebias_sample(DisorderModel::gaussian(), 0.5, 30, &f, 3, 7).unwrap();
        assert_eq!(p.len(), 31);
        assert!(f.get(p[0]) > 0.0);
        assert!(p.windows(2).all(|w| (w[1] - w[0]).l1() == 1));
    }

    #[test]
    fn zero_beta_leaves_the_field_alone() {
        let model = DisorderModel::rademacher();
        let f = MassFunction::dirac(Site::ORIGIN);
        let (p, env) = sizebias_sample(model, 0.0, 10, &f, 5, 1).unwrap();
        // With β = 0 the tilt is the plain law, drawn from an independent stream.
        let plain = CounterField::new(model, 5, 1);
        let mut same = 0;
        for t in 1..=10 {
            let x = p[t];
            if env.omega(t, x.u(), x.v()) == plain.omega(t, x.u(), x.v()) {
                same += 1;
            }
            let off = Site::new(x.x1 + 2, x.x2);
            assert_eq!(
                env.omega(t, off.u(), off.v()),
                plain.omega(t, off.u(), off.v())
            );
        }
        assert!(same < 10);
    }

    /// `Ẽ_f[ω(t,y)] = E[ω(t,y) Z_N(f)]`, estimated two independent ways.
    #[test]
    fn size_bias_is_unbiased_for_one_cell() {
        let model = DisorderModel::gaussian();
        let beta = 0.6;
        let n = 16;
        let c = Coupling::new(&model, beta).unwrap();
        let f = MassFunction::dirac(Site::ORIGIN);
        let cell = (1usize, Site::new(1, 0));
        let reps = 40_000u64;
        let (mut a, mut a2) = (0.0, 0.0);
        let (mut b, mut b2) = (0.0, 0.0);
        for r in 0..reps {
            let (_, env) = sizebias_sample(model, beta, n, &f, 99, r).unwrap();
            let g = env.omega(cell.0, cell.1.u(), cell.1.v());
            a += g;
            a2 += g * g;
            let plain = CounterField::new(model, 1234, r);
            let z = partition_field(&plain, &c, &f, n, &SweepOptions::default())
                .unwrap()
                .z();
            let h = plain.omega(cell.0, cell.1.u(), cell.1.v()) * z;
            b += h;
            b2 += h * h;
        }
        let k = reps as f64;
        let (ma, mb) = (a / k, b / k);
        let se = ((a2 / k - ma * ma) / k + (b2 / k - mb * mb) / k).sqrt();
        // Exact value: β·P(S_1 = (1,0)) = β/4.
        assert!((ma - mb).abs() <= 3.0 * se, "{ma} vs {mb} (se {se})");
        assert!((ma - beta / 4.0).abs() <= 3.0 * se);
    }
}
