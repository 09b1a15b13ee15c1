//! Sub-Riemannian distance by covector shooting, with a direct-control
//! fallback, multiplicity detection of minimizers, and the eikonal residual.

mod direct;
mod shooting;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{ControlFrame, Covector, FrameError, Point};
use crate::geodesics::{hamiltonian_raw, GeodesicError};

use shooting::{polish, radial_scales, search_from, solve_from, adapted_directions, Candidate, EndpointMap, Root};

const CONJUGATE_STEPS: usize = 400;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceOptions {
    /// RK4 steps on `[0, 1]` for the final polish of every root.
    pub steps: usize,
    /// RK4 steps per unit covector norm during screening and search.
    pub search_steps: usize,
    /// Screened covector directions; `None` picks a count from the dimension.
    pub directions: Option<usize>,
    pub radial_scales: usize,
    /// Lower bound on the largest screened covector norm.
    pub min_radius: f64,
    /// Number of screened starts refined by Levenberg-Marquardt; 0 refines all.
    pub refined_starts: usize,
    pub endpoint_tol: f64,
    pub max_iterations: usize,
    /// Roots with energy within this relative band of the best are minimizers.
    pub minimizer_rel_tol: f64,
    /// Midpoint separation above which two minimizers count as distinct.
    pub sep_tol: f64,
    pub direct_segments: usize,
    pub direct_substeps: usize,
    pub direct_rho_start: f64,
    pub direct_rho_end: f64,
    /// Endpoint tolerance accepted for a pure direct solution.
    pub direct_endpoint_tol: f64,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            search_steps: 20,
            directions: None,
            radial_scales: 6,
            min_radius: 16.0,
            refined_starts: 24,
            endpoint_tol: 1e-8,
            max_iterations: 100,
            minimizer_rel_tol: 1e-6,
            sep_tol: 1e-3,
            direct_segments: 20,
            direct_substeps: 10,
            direct_rho_start: 1e2,
            direct_rho_end: 1e6,
            direct_endpoint_tol: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Shooting,
    Direct,
    Hybrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceResult {
    pub value: f64,
    /// Minimizing initial covectors, one per distinct geodesic, best first.
    pub covectors: Vec<Covector>,
    pub method: Method,
    pub endpoint_error: f64,
    pub multiplicity: usize,
    /// False when the result is the best non-converged candidate.
    pub converged: bool,
}

impl DistanceResult {
    pub fn best_covector(&self) -> Option<&Covector> {
        self.covectors.first()
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no candidate met the endpoint tolerance (best error {:.3e})", best.endpoint_error)]
    NoConvergence { best: Box<DistanceResult> },
    #[error("point is on the diagonal or has several minimizing geodesics (multiplicity {multiplicity})")]
    CutLocusPoint { multiplicity: usize },
    #[error("non-finite point coordinates")]
    NonFinite,
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Result of the multi-geodesic probe: distinct minimizers and their count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplicityReport {
    pub multiplicity: usize,
    pub value: f64,
    pub representatives: Vec<Covector>,
    pub midpoints: Vec<Point>,
}

fn check(frame: &ControlFrame, x: &Point, y: &Point) -> Result<(), MetricError> {
    frame.check_point(x.as_slice())?;
    frame.check_point(y.as_slice())?;
    if !x.is_finite() || !y.is_finite() {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

fn zero_result(n: usize) -> DistanceResult {
    DistanceResult {
        value: 0.0,
        covectors: vec![Covector::zeros(n)],
        method: Method::Shooting,
        endpoint_error: 0.0,
        multiplicity: 1,
        converged: true,
    }
}

/// Screens every direction-radius start by its endpoint residual. Each
/// direction contributes its best radius first, so the leading starts are
/// spread over all directions. Every fourth slot goes to the best start on
/// the innermost sphere instead: Levenberg-Marquardt from a short covector
/// tends to land on a low-energy root even when its residual ranks poorly.
/// The remaining radii follow.
fn screened_starts(map: &mut EndpointMap<'_>, frame: &ControlFrame, x: &[f64], separation: f64, opts: &DistanceOptions) -> Vec<Vec<f64>> {
    let radii = radial_scales(separation, opts.radial_scales.max(1), opts.min_radius);
    let mut first: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut inner: Vec<(f64, Vec<f64>)> = Vec::new();
    let mut rest: Vec<(f64, Vec<f64>)> = Vec::new();
    let count = opts.directions.unwrap_or_else(|| default_direction_count(x.len())).max(1);
    for dir in adapted_directions(frame, x, map.target(), count) {
        let res = map.ray_residuals(&dir, &radii, opts.search_steps.max(4));
        let best = (0..res.len()).min_by(|&a, &b| res[a].1.total_cmp(&res[b].1)).unwrap_or(0);
        for (k, (r, s)) in res.into_iter().enumerate() {
            let p = dir.iter().map(|d| d * r).collect();
            if k == best {
                first.push((s, p));
            } else if k == 0 {
                inner.push((s, p));
            } else {
                rest.push((s, p));
            }
        }
    }
    for list in [&mut first, &mut inner, &mut rest] {
        list.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let mut first = first.into_iter();
    let mut inner = inner.into_iter();
    let mut out = Vec::new();
    loop {
        let next = if out.len() % 4 == 3 { inner.next().or_else(|| first.next()) } else { first.next().or_else(|| inner.next()) };
        match next {
            Some((_, p)) => out.push(p),
            None => break,
        }
    }
    out.extend(rest.into_iter().map(|(_, p)| p));
    out
}

/// All primitive directions of `{-2..2}^n`, capped at `100 * 3^(n - 3)`:
/// 98 in dimension three and 300 in dimension four.
pub fn default_direction_count(n: usize) -> usize {
    let primitive = 5usize.pow(n as u32) - 3usize.pow(n as u32);
    let cap = 100 * 3usize.pow(n.saturating_sub(3) as u32);
    primitive.min(cap)
}

/// Minimizers among `roots`, deduplicated on their midpoints, best first.
fn minimizers(mut roots: Vec<Root>, opts: &DistanceOptions) -> Vec<Root> {
    roots.sort_by(|a, b| a.energy.total_cmp(&b.energy));
    let Some(best) = roots.first().map(|r| r.energy) else { return roots };
    let cut = best * (1.0 + opts.minimizer_rel_tol) + 1e-14;
    let mut kept: Vec<Root> = Vec::new();
    for r in roots.into_iter().take_while(|r| r.energy <= cut) {
        let distinct = kept.iter().all(|k| {
            k.midpoint.iter().zip(&r.midpoint).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() > opts.sep_tol
        });
        if distinct {
            kept.push(r);
        }
    }
    kept
}

fn from_roots(roots: Vec<Root>, method: Method) -> DistanceResult {
    let best = &roots[0];
    DistanceResult {
        value: best.energy.max(0.0).sqrt(),
        endpoint_error: best.endpoint_error,
        multiplicity: roots.len(),
        covectors: roots.iter().map(|r| Covector::new(&r.p)).collect(),
        method,
        converged: true,
    }
}

fn shoot(frame: &ControlFrame, x: &[f64], y: &[f64], opts: &DistanceOptions, refine: usize) -> Vec<Root> {
    let separation = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let mut map = EndpointMap::new(frame, x, y);
    let starts = screened_starts(&mut map, frame, x, separation, opts);
    let take = if refine == 0 { starts.len() } else { refine.min(starts.len()) };
    let screen_steps = map.rk_steps;
    let mut cands: Vec<Candidate> = starts.iter().take(take).filter_map(|p0| search_from(&mut map, p0, opts)).collect();
    cands.sort_by(|a, b| a.energy.total_cmp(&b.energy));
    let Some(best) = cands.first().map(|c| c.energy) else { return Vec::new() };
    // search roots carry a discretization error far below this band
    let band = best * (1.0 + 1e-3) + 1e-12;
    let mut kept: Vec<&Candidate> = Vec::new();
    for c in cands.iter().take_while(|c| c.energy <= band) {
        let scale = c.p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        let dup = kept.iter().any(|k| k.p.iter().zip(&c.p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() < 1e-4 * scale);
        if !dup {
            kept.push(c);
        }
    }
    let search_steps = map.rk_steps - screen_steps;
    let polished: Vec<Root> = kept.iter().filter_map(|c| polish(&mut map, c, opts)).collect();
    log::debug!(
        "shooting: {} search roots, {} polished; rk steps screen {screen_steps} search {search_steps} polish {}",
        cands.len(),
        polished.len(),
        map.rk_steps - screen_steps - search_steps
    );
    polished
}

fn distance_impl(
    frame: &ControlFrame,
    x: &Point,
    y: &Point,
    opts: &DistanceOptions,
    refine: usize,
) -> Result<DistanceResult, MetricError> {
    check(frame, x, y)?;
    let n = frame.dim();
    if x.as_slice() == y.as_slice() {
        return Ok(zero_result(n));
    }
    let mut roots = minimizers(shoot(frame, x.as_slice(), y.as_slice(), opts, refine), opts);
    if refine != 0 && roots.is_empty() {
        log::debug!("no root among the leading starts for {:?} -> {:?}; refining every start", x.as_slice(), y.as_slice());
        roots = minimizers(shoot(frame, x.as_slice(), y.as_slice(), opts, 0), opts);
    } else if refine != 0 {
        // a best root past its first conjugate point is not minimizing: widen the search
        let mut map = EndpointMap::new(frame, x.as_slice(), y.as_slice());
        if map.has_interior_conjugate_point(&roots[0].p, CONJUGATE_STEPS) {
            log::debug!("best root for {:?} -> {:?} has a conjugate point; refining every start", x.as_slice(), y.as_slice());
            roots.extend(shoot(frame, x.as_slice(), y.as_slice(), opts, 0));
            roots = minimizers(roots, opts);
        }
    }
    if !roots.is_empty() {
        return Ok(from_roots(roots, Method::Shooting));
    }
    log::debug!("shooting failed for {:?} -> {:?}; trying direct method", x.as_slice(), y.as_slice());
    let Some(sol) = direct::solve(frame, x.as_slice(), y.as_slice(), opts) else {
        let best = DistanceResult {
            value: f64::NAN,
            covectors: Vec::new(),
            method: Method::Direct,
            endpoint_error: f64::INFINITY,
            multiplicity: 0,
            converged: false,
        };
        return Err(MetricError::NoConvergence { best: Box::new(best) });
    };
    if let Some(guess) = &sol.covector_guess {
        let mut map = EndpointMap::new(frame, x.as_slice(), y.as_slice());
        if let Some(root) = solve_from(&mut map, guess, opts) {
            // the polished normal geodesic only replaces the direct path if no longer
            if root.energy <= sol.energy * (1.0 + 1e-3) {
                return Ok(from_roots(vec![root], Method::Hybrid));
            }
        }
    }
    let result = DistanceResult {
        value: sol.energy.sqrt(),
        covectors: sol.covector_guess.iter().map(|p| Covector::new(p)).collect(),
        method: Method::Direct,
        endpoint_error: sol.endpoint_error,
        multiplicity: 1,
        converged: sol.endpoint_error <= opts.direct_endpoint_tol,
    };
    if result.converged {
        Ok(result)
    } else {
        Err(MetricError::NoConvergence { best: Box::new(result) })
    }
}

/// `d(x, y)` by multi-start shooting on `p -> exp_x(p) - y`.
pub fn distance(frame: &ControlFrame, x: &Point, y: &Point, opts: &DistanceOptions) -> Result<DistanceResult, MetricError> {
    distance_impl(frame, x, y, opts, opts.refined_starts)
}

/// Refines every screened start and counts the distinct minimizing geodesics.
pub fn multi_geodesic_probe(
    frame: &ControlFrame,
    x: &Point,
    y: &Point,
    opts: &DistanceOptions,
) -> Result<MultiplicityReport, MetricError> {
    check(frame, x, y)?;
    if x.as_slice() == y.as_slice() {
        return Ok(MultiplicityReport {
            multiplicity: 1,
            value: 0.0,
            representatives: vec![Covector::zeros(frame.dim())],
            midpoints: vec![x.clone()],
        });
    }
    let roots = shoot(frame, x.as_slice(), y.as_slice(), opts, 0);
    if roots.is_empty() {
        // no normal minimizer; the fallback still yields a value
        let res = distance_impl(frame, x, y, opts, 0)?;
        return Ok(MultiplicityReport { multiplicity: 1, value: res.value, representatives: res.covectors, midpoints: Vec::new() });
    }
    let mins = minimizers(roots, opts);
    Ok(MultiplicityReport {
        multiplicity: mins.len(),
        value: mins[0].energy.sqrt(),
        representatives: mins.iter().map(|r| Covector::new(&r.p)).collect(),
        midpoints: mins.iter().map(|r| Point::new(&r.midpoint)).collect(),
    })
}

/// `H(y, grad f(y)) - 1/2` for `f = d(x, .)`, with the gradient taken by
/// central differences of step `h`.
pub fn eikonal_residual(
    frame: &ControlFrame,
    x: &Point,
    y: &Point,
    h: f64,
    opts: &DistanceOptions,
) -> Result<f64, MetricError> {
    check(frame, x, y)?;
    if x.as_slice() == y.as_slice() {
        return Err(MetricError::CutLocusPoint { multiplicity: 0 });
    }
    let probe = multi_geodesic_probe(frame, x, y, opts)?;
    if probe.multiplicity >= 2 {
        return Err(MetricError::CutLocusPoint { multiplicity: probe.multiplicity });
    }
    let n = frame.dim();
    let mut grad = vec![0.0; n];
    for (k, g) in grad.iter_mut().enumerate() {
        let mut plus = y.clone();
        plus.0[k] += h;
        let mut minus = y.clone();
        minus.0[k] -= h;
        let fp = distance(frame, x, &plus, opts)?.value;
        let fm = distance(frame, x, &minus, opts)?.value;
        *g = (fp - fm) / (2.0 * h);
    }
    Ok(hamiltonian_raw(frame.fields(), y.as_slice(), &grad) - 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::catalog;
    use crate::geodesics::exp_map;
    use std::f64::consts::PI;

    fn heis() -> ControlFrame {
        catalog("heisenberg").unwrap()
    }

    /// Heisenberg distance oracle for targets on the vertical axis through
    /// the origin: the minimizers are circles enclosing area `|z|`.
    fn vertical_oracle(z: f64) -> f64 {
        (4.0 * PI * z.abs()).sqrt()
    }

    #[test]
    fn straight_line_target() {
        let res = distance(&heis(), &Point::new(&[0.0, 0.0, 0.0]), &Point::new(&[1.0, 1.0, 0.5]), &Default::default()).unwrap();
        assert!((res.value - 2f64.sqrt()).abs() < 1e-6, "{}", res.value);
        assert_eq!(res.multiplicity, 1);
        assert_eq!(res.method, Method::Shooting);
        let p = res.best_covector().unwrap();
        assert!((p.0[0] - 1.0).abs() < 1e-5 && (p.0[1] - 1.0).abs() < 1e-5 && p.0[2].abs() < 1e-5);
    }

    #[test]
    fn diagonal_is_zero() {
        let x = Point::new(&[0.3, -0.2, 0.1]);
        let res = distance(&heis(), &x, &x, &Default::default()).unwrap();
        assert_eq!(res.value, 0.0);
        assert_eq!(res.covectors, vec![Covector::zeros(3)]);
        let probe = multi_geodesic_probe(&heis(), &x, &x, &Default::default()).unwrap();
        assert_eq!(probe.multiplicity, 1);
    }

    #[test]
    fn vertical_target_has_many_minimizers() {
        let frame = heis();
        let x = Point::zeros(3);
        let y = Point::new(&[0.0, 0.0, 0.25]);
        let opts = DistanceOptions::default();
        let res = distance(&frame, &x, &y, &opts).unwrap();
        assert!((res.value - vertical_oracle(0.25)).abs() < 1e-6, "{}", res.value);
        let probe = multi_geodesic_probe(&frame, &x, &y, &opts).unwrap();
        assert!(probe.multiplicity >= 2);
        for p in &probe.representatives {
            let end = exp_map(&frame, &x, p).unwrap();
            assert!((end.0 - &y.0).norm() < 1e-7);
            let e = 2.0 * hamiltonian_raw(frame.fields(), x.as_slice(), p.as_slice());
            assert!((e.sqrt() - probe.value).abs() < 1e-6);
        }
    }

    #[test]
    fn value_matches_energy_of_covector() {
        let frame = heis();
        let x = Point::new(&[0.1, -0.3, 0.2]);
        let y = Point::new(&[-0.4, 0.5, -0.1]);
        let res = distance(&frame, &x, &y, &Default::default()).unwrap();
        let p = res.best_covector().unwrap();
        let e = 2.0 * hamiltonian_raw(frame.fields(), x.as_slice(), p.as_slice());
        assert!((res.value * res.value - e).abs() <= 1e-6 * e);
        assert!(res.endpoint_error <= 1e-8);
    }

    #[test]
    fn eikonal_on_axis_and_line() {
        let frame = heis();
        let x = Point::zeros(3);
        for y in [[1.0, 1.0, 0.5], [2.0, 0.0, 0.0]] {
            let r = eikonal_residual(&frame, &x, &Point::new(&y), 1e-3, &Default::default()).unwrap();
            assert!(r.abs() < 5e-2, "{r}");
        }
        assert!(matches!(
            eikonal_residual(&frame, &x, &x, 1e-3, &Default::default()),
            Err(MetricError::CutLocusPoint { .. })
        ));
    }

    #[test]
    fn direct_method_agrees_with_shooting() {
        let frame = heis();
        let x = [0.0, 0.0, 0.0];
        let y = [0.6, -0.2, 0.15];
        let opts = DistanceOptions::default();
        let sol = direct::solve(&frame, &x, &y, &opts).unwrap();
        let shot = distance(&frame, &Point::new(&x), &Point::new(&y), &opts).unwrap();
        // piecewise-constant controls can only overshoot the optimal energy
        assert!(sol.energy.sqrt() >= shot.value - 1e-3);
        assert!((sol.energy.sqrt() - shot.value).abs() < 2e-2, "{} {}", sol.energy.sqrt(), shot.value);
        assert!(sol.endpoint_error < 1e-3);
        let guess = sol.covector_guess.unwrap();
        let mut map = EndpointMap::new(&frame, &x, &y);
        let root = solve_from(&mut map, &guess, &opts).unwrap();
        assert!((root.energy.sqrt() - shot.value).abs() < 1e-6);
    }
}
