//! Seeded, schedule-independent RANSAC over the constrained solver.

use nalgebra::{Matrix3, Vector2};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::eight_point::{solve_constrained_fundamental, CorrespondenceSet, MIN_PAIRS};
use crate::error::{Error, Result};
use crate::geometry::ReflectiveFundamental;
use crate::scalar::Scalar;

/// Slack applied to the threshold when checking the inlier refit.
pub const REFIT_SLACK: f64 = 1.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RansacConfig {
    pub sample_size: usize,
    pub iterations: usize,
    /// Inlier threshold on the symmetric epipolar distance, in pixels.
    pub threshold: f64,
    pub rng_seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self { sample_size: MIN_PAIRS, iterations: 1000, threshold: 2.0, rng_seed: 0 }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_size < MIN_PAIRS {
            return Err(Error::InvalidConfig(format!("ransac sample_size must be >= {MIN_PAIRS}")));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("ransac iterations must be >= 1".into()));
        }
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::InvalidConfig("ransac threshold must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult<T: Scalar> {
    pub fundamental: ReflectiveFundamental<T>,
    /// Indices into the input set, ascending.
    pub inliers: Vec<usize>,
    /// Distance of every pair under the winning minimal-sample model.
    pub distances: Vec<T>,
    pub best_iteration: usize,
    /// False when the refit lost inliers and the minimal model was kept.
    pub refit_accepted: bool,
}

/// `dist(x′, Fx) + dist(x, Fᵀx′)` in pixels.
pub fn epipolar_distance_g<T: Scalar>(f: &Matrix3<T>, x: &Vector2<T>, xp: &Vector2<T>) -> Result<T> {
    let (xh, xph) = (x.push(T::one()), xp.push(T::one()));
    let l = f * xh;
    let lp = f.transpose() * xph;
    let (nl, nlp) = (l.xy().norm(), lp.xy().norm());
    if nl == T::zero() || nlp == T::zero() {
        return Err(Error::DegenerateEpipolarLine);
    }
    Ok(xph.dot(&l).abs() / nl + xh.dot(&lp).abs() / nlp)
}

/// Degenerate lines count as infinitely far.
fn all_distances<T: Scalar>(f: &Matrix3<T>, corr: &CorrespondenceSet<T>) -> Vec<T> {
    corr.pairs()
        .iter()
        .map(|p| epipolar_distance_g(f, &p.real, &p.mirror).unwrap_or(T::lit(f64::INFINITY)))
        .collect()
}

struct Scored<T: Scalar> {
    iteration: usize,
    fundamental: ReflectiveFundamental<T>,
    count: usize,
    mean: T,
}

impl<T: Scalar> Scored<T> {
    fn better_than(&self, other: &Self) -> bool {
        (self.count, other.mean, other.iteration) > (other.count, self.mean, self.iteration)
    }
}

fn score<T: Scalar>(f: &Matrix3<T>, corr: &CorrespondenceSet<T>, threshold: T) -> (usize, T) {
    let (mut count, mut sum) = (0usize, T::zero());
    for p in corr.pairs() {
        if let Ok(g) = epipolar_distance_g(f, &p.real, &p.mirror) {
            if g <= threshold {
                count += 1;
                sum += g;
            }
        }
    }
    let mean = if count > 0 { sum / T::from_usize_lossy(count) } else { T::zero() };
    (count, mean)
}

/// The random draw of iteration `i`; independent of scheduling.
pub fn iteration_sample(seed: u64, iteration: usize, n: usize, k: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    let mut idx = sample(&mut rng, n, k).into_vec();
    idx.sort_unstable();
    idx
}

pub fn ransac_fundamental<T: Scalar>(corr: &CorrespondenceSet<T>, cfg: &RansacConfig) -> Result<RansacResult<T>> {
    cfg.validate()?;
    let n = corr.len();
    if n < cfg.sample_size {
        return Err(Error::TooFewPairs { needed: cfg.sample_size, got: n });
    }
    let threshold = T::lit(cfg.threshold);
    let best = (0..cfg.iterations)
        .into_par_iter()
        .filter_map(|it| {
            let idx = iteration_sample(cfg.rng_seed, it, n, cfg.sample_size);
            let sub = corr.subset(&idx).ok()?;
            let f = solve_constrained_fundamental(&sub).ok()?;
            let (count, mean) = score(&f.0, corr, threshold);
            Some(Scored { iteration: it, fundamental: f, count, mean })
        })
        .reduce_with(|a, b| if b.better_than(&a) { b } else { a })
        .ok_or(Error::NoModelFound)?;

    let distances = all_distances(&best.fundamental.0, corr);
    let inliers: Vec<usize> = (0..n).filter(|&i| distances[i] <= threshold).collect();
    if inliers.len() < MIN_PAIRS {
        return Err(Error::InsufficientInliers(inliers.len()));
    }
    let refit = corr.subset(&inliers).and_then(|s| solve_constrained_fundamental(&s));
    let (fundamental, refit_accepted) = match refit {
        Ok(f) => {
            let (count, _) = score(&f.0, corr, threshold * T::lit(REFIT_SLACK));
            if count >= inliers.len() {
                (f, true)
            } else {
                (best.fundamental, false)
            }
        }
        Err(_) => (best.fundamental, false),
    };
    Ok(RansacResult { fundamental, inliers, distances, best_iteration: best.iteration, refit_accepted })
}
