//! Gradient protection: L-infinity clipping, Laplace noise, pseudo interacted
//! items with moment-matched fake gradients, and the privacy accounting helpers.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Clip threshold and Laplace scale applied to every uploaded gradient value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LdpConfig {
    pub clip_delta: f64,
    pub noise_lambda: f64,
}

impl LdpConfig {
    pub fn new(clip_delta: f64, noise_lambda: f64) -> Result<Self> {
        if !(clip_delta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "clip threshold {clip_delta} must be positive"
            )));
        }
        if !(noise_lambda >= 0.0 && noise_lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise strength {noise_lambda} must be finite and non-negative"
            )));
        }
        Ok(Self {
            clip_delta,
            noise_lambda,
        })
    }

    /// No clipping and no noise.
    pub fn disabled() -> Self {
        Self {
            clip_delta: f64::INFINITY,
            noise_lambda: 0.0,
        }
    }
}

impl Default for LdpConfig {
    fn default() -> Self {
        Self {
            clip_delta: 0.1,
            noise_lambda: 0.2,
        }
    }
}

/// Projects onto the L-infinity ball of radius `delta`.
pub fn clip_linf(grads: &mut [f64], delta: f64) {
    for g in grads {
        *g = g.clamp(-delta, delta);
    }
}

/// One Laplace(0, scale) draw by inverse CDF.
pub fn sample_laplace(scale: f64, rng: &mut impl Rng) -> f64 {
    // u in (-1/2, 1/2); the open lower end avoids ln(0)
    let u = loop {
        let r: f64 = rng.random();
        if r > 0.0 {
            break r - 0.5;
        }
    };
    -scale * u.signum() * (1.0 - 2.0 * u.abs()).ln()
}

/// Adds independent Laplace(0, `lambda`) noise to every component.
pub fn add_laplace(grads: &mut [f64], lambda: f64, rng: &mut impl Rng) {
    if lambda == 0.0 {
        return;
    }
    for g in grads {
        *g += sample_laplace(lambda, rng);
    }
}

/// `clip(g, delta) + Laplace(0, lambda)`, in that order.
pub fn protect(grads: &mut [f64], ldp: &LdpConfig, rng: &mut impl Rng) {
    clip_linf(grads, ldp.clip_delta);
    add_laplace(grads, ldp.noise_lambda, rng);
}

/// `count` distinct items drawn uniformly from `[0, item_count)` minus `real_items`.
pub fn sample_pseudo_items(
    real_items: &BTreeSet<usize>,
    item_count: usize,
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let excluded = real_items.iter().filter(|&&i| i < item_count).count();
    let available = item_count - excluded;
    if count > available {
        return Err(Error::TooManyPseudoItems {
            requested: count,
            available,
        });
    }
    if count == 0 {
        return Ok(Vec::new());
    }
    let pool: Vec<usize> = (0..item_count).filter(|i| !real_items.contains(i)).collect();
    Ok(index::sample(rng, pool.len(), count)
        .into_iter()
        .map(|j| pool[j])
        .collect())
}

/// Per-dimension sample mean and unbiased variance of a set of vectors.
/// A single vector yields zero variance.
pub fn moments<'a>(vectors: impl IntoIterator<Item = &'a Vec<f64>>) -> (Vec<f64>, Vec<f64>) {
    let vectors: Vec<&Vec<f64>> = vectors.into_iter().collect();
    let n = vectors.len();
    let dim = vectors.first().map_or(0, |v| v.len());
    let mut mean = vec![0.0; dim];
    for v in &vectors {
        for (m, x) in mean.iter_mut().zip(v.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    if n > 1 {
        for v in &vectors {
            for ((s, x), m) in var.iter_mut().zip(v.iter()).zip(&mean) {
                *s += (x - m).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s /= (n - 1) as f64);
    }
    (mean, var)
}

/// Fake gradients for `pseudo_ids`, drawn from a diagonal Gaussian whose
/// per-dimension mean and variance match the real item gradients.
pub fn pseudo_gradients(
    real_item_grads: &BTreeMap<usize, Vec<f64>>,
    pseudo_ids: &[usize],
    rng: &mut impl Rng,
) -> Result<BTreeMap<usize, Vec<f64>>> {
    if real_item_grads.is_empty() {
        return Err(Error::InvalidArgument(
            "pseudo gradients need at least one real item gradient".into(),
        ));
    }
    let (mean, var) = moments(real_item_grads.values());
    let std: Vec<f64> = var.iter().map(|v| v.sqrt()).collect();
    Ok(pseudo_ids
        .iter()
        .map(|&id| {
            let g = mean
                .iter()
                .zip(&std)
                .map(|(&m, &s)| {
                    if s == 0.0 {
                        m
                    } else {
                        let z: f64 = StandardNormal.sample(rng);
                        m + s * z
                    }
                })
                .collect();
            (id, g)
        })
        .collect())
}

/// Per-round upper bound `2 delta / lambda` on the privacy budget.
pub fn privacy_budget(delta: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::UnboundedBudget);
    }
    Ok(2.0 * delta / lambda)
}

/// Anonymity degree `1 + M P / |Y_o|` provided by pseudo interacted items.
pub fn anonymity_degree(pseudo_items: usize, users: usize, observed_ratings: usize) -> Result<f64> {
    if observed_ratings == 0 {
        return Err(Error::InvalidArgument("zero observed ratings".into()));
    }
    Ok(1.0 + (pseudo_items as f64) * (users as f64) / observed_ratings as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn clip_examples() {
        let mut g = [0.05, -0.3, 0.2];
        clip_linf(&mut g, 0.1);
        assert_eq!(g, [0.05, -0.1, 0.1]);
        let mut h = [0.01, -0.02];
        clip_linf(&mut h, 0.1);
        assert_eq!(h, [0.01, -0.02]);
    }

    #[test]
    fn clip_bounds_many_random_inputs() {
        let mut r = rng::stream(11, &[]);
        let mut g: Vec<f64> = (0..100_000).map(|_| r.random_range(-5.0..5.0)).collect();
        clip_linf(&mut g, 0.1);
        assert!(g.iter().all(|x| x.abs() <= 0.1));
    }

    proptest! {
        #[test]
        fn clip_is_idempotent_and_non_expansive(
            xs in prop::collection::vec(-10.0f64..10.0, 1..32),
            ys in prop::collection::vec(-10.0f64..10.0, 32),
            delta in 0.001f64..2.0,
        ) {
            let ys = &ys[..xs.len()];
            let mut cx = xs.clone();
            clip_linf(&mut cx, delta);
            let mut twice = cx.clone();
            clip_linf(&mut twice, delta);
            prop_assert_eq!(&cx, &twice);
            let mut cy = ys.to_vec();
            clip_linf(&mut cy, delta);
            let before = xs.iter().zip(ys).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let after = cx.iter().zip(&cy).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(after <= before);
        }

        #[test]
        fn budget_monotone(d1 in 0.01f64..1.0, d2 in 0.01f64..1.0, l in 0.01f64..1.0) {
            let (lo, hi) = if d1 < d2 { (d1, d2) } else { (d2, d1) };
            prop_assert!(privacy_budget(lo, l).unwrap() <= privacy_budget(hi, l).unwrap());
            prop_assert!(privacy_budget(lo, l).unwrap() >= privacy_budget(lo, l * 2.0).unwrap());
        }
    }

    #[test]
    fn zero_noise_is_identity() {
        let mut g = vec![0.5, -1.0, 3.0];
        add_laplace(&mut g, 0.0, &mut rng::stream(1, &[]));
        assert_eq!(g, vec![0.5, -1.0, 3.0]);
    }

    #[test]
    fn noise_is_seeded() {
        let mut a = vec![0.0; 16];
        let mut b = vec![0.0; 16];
        add_laplace(&mut a, 0.2, &mut rng::stream(3, &[]));
        add_laplace(&mut b, 0.2, &mut rng::stream(3, &[]));
        assert_eq!(a, b);
        assert!(a.iter().any(|x| *x != 0.0));
    }

    #[test]
    fn pseudo_item_examples() {
        let real: BTreeSet<usize> = [0, 1].into();
        let mut r = rng::stream(5, &[]);
        let mut got = sample_pseudo_items(&real, 5, 3, &mut r).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![2, 3, 4]);
        assert!(sample_pseudo_items(&real, 5, 0, &mut r).unwrap().is_empty());
        let err = sample_pseudo_items(&real, 5, 4, &mut r).unwrap_err();
        assert!(matches!(err, Error::TooManyPseudoItems { requested: 4, available: 3 }));
    }

    #[test]
    fn pseudo_items_never_hit_real_items() {
        let mut r = rng::stream(6, &[]);
        for _ in 0..1000 {
            let k = r.random_range(1..20);
            let real: BTreeSet<usize> = (0..k).map(|_| r.random_range(0..50)).collect();
            let m = r.random_range(0..=(50 - real.len()));
            let p = sample_pseudo_items(&real, 50, m, &mut r).unwrap();
            assert_eq!(p.len(), m);
            let set: BTreeSet<usize> = p.iter().copied().collect();
            assert_eq!(set.len(), m);
            assert!(set.is_disjoint(&real));
        }
    }

    #[test]
    fn single_real_gradient_is_copied() {
        let real: BTreeMap<usize, Vec<f64>> = [(3, vec![0.1, -0.2, 0.3])].into();
        let fake = pseudo_gradients(&real, &[7, 1, 9], &mut rng::stream(0, &[])).unwrap();
        assert_eq!(fake.keys().copied().collect::<Vec<_>>(), vec![1, 7, 9]);
        assert!(fake.values().all(|g| g == &real[&3]));
        assert!(pseudo_gradients(&BTreeMap::new(), &[1], &mut rng::stream(0, &[])).is_err());
    }

    #[test]
    fn accounting_examples() {
        assert_eq!(privacy_budget(0.1, 0.2).unwrap(), 1.0);
        assert_eq!(privacy_budget(0.05, 0.2).unwrap(), 0.5);
        assert!((privacy_budget(0.2, 0.1).unwrap() - 4.0).abs() < 1e-15);
        assert!(matches!(privacy_budget(0.1, 0.0), Err(Error::UnboundedBudget)));
        assert_eq!(anonymity_degree(0, 943, 100_000).unwrap(), 1.0);
        assert!((anonymity_degree(1000, 943, 100_000).unwrap() - 10.43).abs() < 1e-9);
        let one = anonymity_degree(300, 943, 100_000).unwrap() - 1.0;
        let two = anonymity_degree(600, 943, 100_000).unwrap() - 1.0;
        assert!((two - 2.0 * one).abs() < 1e-12);
        assert!(anonymity_degree(1, 1, 0).is_err());
    }

    #[test]
    fn ldp_config_validation() {
        assert!(LdpConfig::new(0.0, 0.2).is_err());
        assert!(LdpConfig::new(0.1, -1.0).is_err());
        assert_eq!(LdpConfig::new(0.1, 0.2).unwrap(), LdpConfig::default());
    }
}
