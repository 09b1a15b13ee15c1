//! Empirical regularity probes for `u = d^2` on pairs of points: an estimate of
//! the semiconcavity constant away from the diagonal and of the Lipschitz
//! constant.
//!
//! Both probes take a maximum over a seeded sample sequence. Sample `k` does
//! not depend on the total count, so estimates are non-decreasing in the
//! sample count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::frames::{ControlFrame, Point};
use crate::metric::{distance, DistanceOptions, MetricError};

/// Default lower bound on `d` for every pair a semiconcavity sample touches.
pub const R_MIN: f64 = 0.3;

/// Default perturbation scale of the Lipschitz probe.
pub const LIPSCHITZ_SCALE: f64 = 1e-2;

const BATCH: usize = 16;

/// A ball of pairs `(x, y)` in `R^n x R^n` around a base pair, restricted to a
/// band of distances.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairRegion {
    pub base_x: Vec<f64>,
    pub base_y: Vec<f64>,
    /// Chart radius of the ball in `R^{2n}`.
    pub radius: f64,
    pub d_min: f64,
    pub d_max: f64,
}

impl PairRegion {
    pub fn new(base_x: &[f64], base_y: &[f64], radius: f64) -> Self {
        Self { base_x: base_x.to_vec(), base_y: base_y.to_vec(), radius, d_min: R_MIN, d_max: f64::INFINITY }
    }

    pub fn with_band(mut self, d_min: f64, d_max: f64) -> Self {
        self.d_min = d_min.max(R_MIN);
        self.d_max = d_max;
        self
    }
}

/// An axis-aligned box; both points of a pair are drawn from it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoxRegion {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxRegion {
    pub fn unit(n: usize) -> Self {
        Self { lo: vec![0.0; n], hi: vec![1.0; n] }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| rng.random_range(*a..=*b)).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SemiconcavityEstimate {
    pub c_hat: f64,
    pub samples: usize,
    /// Candidates drawn but rejected because some pair left the band.
    pub rejected: usize,
    /// `prefix_max[k]` is the estimate from the first `k + 1` samples.
    pub prefix_max: Vec<f64>,
    pub mu_grid: Vec<f64>,
    pub region: PairRegion,
}

#[derive(Clone, Debug, Serialize)]
pub struct LipschitzEstimate {
    pub l_hat: f64,
    pub samples: usize,
    pub scale: f64,
    /// Samples whose segment crosses the diagonal.
    pub diagonal_pairs: usize,
    pub prefix_max: Vec<f64>,
    pub region: BoxRegion,
}

fn u(frame: &ControlFrame, x: &[f64], y: &[f64], opts: &DistanceOptions) -> Result<f64, MetricError> {
    let d = distance(frame, &Point::new(x), &Point::new(y), opts)?.value;
    Ok(d * d)
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|a| a / norm).collect();
        }
    }
}

/// Uniform point of the ball of `radius` in `R^dim` around `center`.
fn ball_point(rng: &mut ChaCha8Rng, center: &[f64], radius: f64) -> Vec<f64> {
    let dir = random_direction(rng, center.len());
    let r = radius * rng.random::<f64>().powf(1.0 / center.len() as f64);
    center.iter().zip(dir).map(|(c, d)| c + r * d).collect()
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

/// Outcome of one semiconcavity sample: the largest quotient over `mu_grid`,
/// or `None` when some evaluated pair left the distance band.
fn semiconcavity_sample(
    frame: &ControlFrame,
    region: &PairRegion,
    a: &[f64],
    b: &[f64],
    mu_grid: &[f64],
    opts: &DistanceOptions,
) -> Result<Option<f64>, MetricError> {
    let n = frame.dim();
    let in_band = |v: f64| {
        let d = v.sqrt();
        d >= region.d_min && d <= region.d_max
    };
    let ua = u(frame, &a[..n], &a[n..], opts)?;
    let ub = u(frame, &b[..n], &b[n..], opts)?;
    if !in_band(ua) || !in_band(ub) {
        return Ok(None);
    }
    let sep = dist2(a, b);
    let mut best = 0.0_f64;
    for &mu in mu_grid {
        let w = mu * (1.0 - mu);
        if w <= 0.0 {
            continue;
        }
        // u(mu a + (1 - mu) b) against mu u(a) + (1 - mu) u(b)
        let c: Vec<f64> = a.iter().zip(b).map(|(p, q)| mu * p + (1.0 - mu) * q).collect();
        let uc = u(frame, &c[..n], &c[n..], opts)?;
        if !in_band(uc) {
            return Ok(None);
        }
        best = best.max((mu * ua + (1.0 - mu) * ub - uc) / (w * sep));
    }
    Ok(Some(best))
}

/// Largest observed `[mu u(a) + (1-mu) u(b) - u(mu a + (1-mu) b)] / [mu (1-mu) |a-b|^2]`
/// over `samples` accepted pairs `a, b` of the region and every `mu` of the grid.
pub fn semiconcavity_probe(
    frame: &ControlFrame,
    region: &PairRegion,
    samples: usize,
    mu_grid: &[f64],
    seed: u64,
    opts: &DistanceOptions,
) -> Result<SemiconcavityEstimate, MetricError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center: Vec<f64> = region.base_x.iter().chain(&region.base_y).copied().collect();
    let mut quotients = Vec::with_capacity(samples);
    let mut rejected = 0;
    while quotients.len() < samples {
        let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..BATCH)
            .map(|_| (ball_point(&mut rng, &center, region.radius), ball_point(&mut rng, &center, region.radius)))
            .collect();
        let results: Vec<Result<Option<f64>, MetricError>> = batch
            .par_iter()
            .map(|(a, b)| semiconcavity_sample(frame, region, a, b, mu_grid, opts))
            .collect();
        for r in results {
            match r? {
                Some(q) if quotients.len() < samples => quotients.push(q),
                Some(_) => {}
                None => rejected += 1,
            }
        }
        if quotients.is_empty() && rejected > 100 * BATCH {
            break;
        }
    }
    let prefix_max = prefix_max(&quotients);
    Ok(SemiconcavityEstimate {
        c_hat: prefix_max.last().copied().unwrap_or(0.0),
        samples: quotients.len(),
        rejected,
        prefix_max,
        mu_grid: mu_grid.to_vec(),
        region: region.clone(),
    })
}

fn prefix_max(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .scan(f64::NEG_INFINITY, |m, v| {
            *m = m.max(*v);
            Some(*m)
        })
        .collect()
}

/// Largest observed `|u(a) - u(b)| / |a - b|` over pairs `a = (x, y)` drawn
/// from the box and `b` a perturbation of chart size `scale`. Every fourth
/// sample is `a = (x, x + v)`, `b = (x, x - v)`, crossing the diagonal.
pub fn lipschitz_probe(
    frame: &ControlFrame,
    region: &BoxRegion,
    samples: usize,
    scale: f64,
    seed: u64,
    opts: &DistanceOptions,
) -> Result<LipschitzEstimate, MetricError> {
    let n = frame.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..samples)
        .map(|k| {
            let x = region.sample(&mut rng);
            if k % 4 == 3 {
                let v: Vec<f64> = random_direction(&mut rng, n).into_iter().map(|d| 0.5 * scale * d).collect();
                let shifted = |sign: f64| -> Vec<f64> { x.iter().copied().chain(x.iter().zip(&v).map(|(p, q)| p + sign * q)).collect() };
                (shifted(1.0), shifted(-1.0))
            } else {
                let y = region.sample(&mut rng);
                let a: Vec<f64> = x.into_iter().chain(y).collect();
                let dir = random_direction(&mut rng, 2 * n);
                let b: Vec<f64> = a.iter().zip(dir).map(|(p, d)| p + scale * d).collect();
                (a, b)
            }
        })
        .collect();
    let ratios: Vec<f64> = pairs
        .par_iter()
        .map(|(a, b)| {
            let ua = u(frame, &a[..n], &a[n..], opts)?;
            let ub = u(frame, &b[..n], &b[n..], opts)?;
            Ok((ua - ub).abs() / dist2(a, b).sqrt())
        })
        .collect::<Result<_, MetricError>>()?;
    let prefix_max = prefix_max(&ratios);
    Ok(LipschitzEstimate {
        l_hat: prefix_max.last().copied().unwrap_or(0.0),
        samples,
        scale,
        diagonal_pairs: samples / 4,
        prefix_max,
        region: region.clone(),
    })
}
