//! The optimal map and displacement interpolation reconstructed from an exact
//! discrete plan: per-pair minimizing covectors, regressed potential gradients,
//! interpolated clouds, and Jacobian residuals of the reconstructed map.
//!
//! Every support entry `(a, b)` of the plan is a particle of mass `gamma_ab`
//! moving along the minimizing geodesic from `x_a` to `y_b`. Rows with more
//! than one destination are still moved this way but are flagged and left out
//! of the map statistics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{ControlFrame, Covector, Point};
use crate::geodesics::{exp_map_with_steps, GeodesicError};
use crate::kantorovich::{
    distance_table, solve_kantorovich, DiscreteMeasure, DistanceTable, DualPotentials, KantorovichError, TransportPlan,
};
use crate::linalg;
use crate::metric::{distance, DistanceOptions, MetricError};

#[derive(Debug, Error)]
pub enum DisplacementError {
    #[error("{count} of {total} source rows have several destinations")]
    MultiDestinationRow { count: usize, total: usize },
    #[error("neighbors of atom {index} do not determine an affine fit")]
    DegenerateNeighborhood { index: usize },
    #[error("evaluation grid with {nodes} nodes per axis has no interior node")]
    GridTooCoarse { nodes: usize },
    #[error("time {0} is outside [0, 1] or not in the interpolation")]
    InvalidTime(f64),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Geodesic(#[from] GeodesicError),
    #[error(transparent)]
    Kantorovich(#[from] KantorovichError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapOptions {
    pub distance: DistanceOptions,
    /// Sources within this chart distance of their destination are static.
    pub static_tol: f64,
    pub pairing_tol: f64,
    /// Fraction of multi-destination rows above which the map is rejected.
    pub max_multi_fraction: f64,
    /// Neighbors in the local affine fits.
    pub neighbors: usize,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            distance: DistanceOptions::default(),
            static_tol: 1e-6,
            pairing_tol: 1e-8,
            max_multi_fraction: 0.05,
            neighbors: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Moving,
    Static,
}

/// One support entry of the plan.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MapRecord {
    pub source: usize,
    pub target: usize,
    pub mass: f64,
    pub x: Vec<f64>,
    pub destination: Vec<f64>,
    /// Initial covector of the minimizing geodesic `x -> destination`.
    pub covector: Vec<f64>,
    pub distance: f64,
    pub label: Label,
    /// `|exp_x(p) - destination|`.
    pub endpoint_residual: f64,
    /// `|phi(x) + phi^c(x)|` for static records.
    pub pairing_residual: Option<f64>,
    /// Regressed `dphi(x)`; absent when the neighborhood was degenerate.
    pub gradient: Option<Vec<f64>>,
    pub multi_destination: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransportMapEstimate {
    pub records: Vec<MapRecord>,
    pub multi_destination_rows: Vec<usize>,
    pub n_source: usize,
}

impl TransportMapEstimate {
    /// Records of single-destination rows, one per source.
    pub fn graph_records(&self) -> impl Iterator<Item = &MapRecord> {
        self.records.iter().filter(|r| !r.multi_destination)
    }
}

fn chart_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt()
}

/// The dual potential half-way between the extreme ones: with
/// `w(a, a') = min_{(a,b) in support} C_{a',b} - C_{a,b}` and `D` its shortest
/// paths, every `u` with `u_{a'} - u_a <= D(a, a')` is optimal, and this
/// returns the average over roots `r` of `(D(r, .) - D(., r)) / 2`. Unlike a
/// simplex basis it does not depend on the pivot path.
pub fn centered_potential(plan: &TransportPlan, cost: &DMatrix<f64>) -> Vec<f64> {
    let n = cost.nrows();
    let mut d = DMatrix::from_element(n, n, f64::INFINITY);
    for &(a, b, _) in &plan.entries {
        for a2 in 0..n {
            d[(a, a2)] = f64::min(d[(a, a2)], cost[(a2, b)] - cost[(a, b)]);
        }
    }
    for a in 0..n {
        d[(a, a)] = 0.0;
    }
    for k in 0..n {
        for i in 0..n {
            let dik = d[(i, k)];
            if dik == f64::INFINITY {
                continue;
            }
            for j in 0..n {
                let v = dik + d[(k, j)];
                if v < d[(i, j)] {
                    d[(i, j)] = v;
                }
            }
        }
    }
    (0..n).map(|b| (0..n).map(|r| 0.5 * (d[(r, b)] - d[(b, r)])).sum::<f64>() / n as f64).collect()
}

/// Minimizing covectors for every support entry of an exact plan, reusing
/// the covectors of the distance table behind the cost matrix. Gradients are
/// regressed on [`centered_potential`].
pub fn build_map(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    plan: &TransportPlan,
    duals: &DualPotentials,
    frame: &ControlFrame,
    table: &DistanceTable,
    opts: &MapOptions,
) -> Result<TransportMapEstimate, DisplacementError> {
    let multi = plan.multi_destination_rows();
    if multi.len() as f64 > opts.max_multi_fraction * mu.len() as f64 {
        return Err(DisplacementError::MultiDestinationRow { count: multi.len(), total: mu.len() });
    }
    if !multi.is_empty() {
        log::warn!("{} source rows have several destinations; excluded from map statistics", multi.len());
    }
    let potential = centered_potential(plan, &table.cost_matrix());
    let gradients = regress_dphi(&potential, mu.points(), opts.neighbors, None);
    let gradients = match gradients {
        Ok(g) => g.into_iter().map(|r| Some(r.gradient)).collect(),
        Err(e) => {
            log::warn!("potential regression skipped: {e}");
            vec![None; mu.len()]
        }
    };
    let mut records = Vec::with_capacity(plan.entries.len());
    for &(a, b, mass) in &plan.entries {
        let x = mu.points()[a].as_slice().to_vec();
        let y = nu.points()[b].as_slice().to_vec();
        let gap = chart_distance(&x, &y);
        let (label, covector, dist) = if gap <= opts.static_tol {
            (Label::Static, vec![0.0; x.len()], 0.0)
        } else {
            (Label::Moving, table.covector(a, b).to_vec(), table.value(a, b))
        };
        let endpoint_residual = match label {
            Label::Static => gap,
            Label::Moving => {
                let end = exp_map_with_steps(frame, &mu.points()[a], &Covector::new(&covector), opts.distance.steps)?;
                chart_distance(end.as_slice(), &y)
            }
        };
        let pairing_residual = (label == Label::Static).then(|| (duals.phi[a] + duals.phic[b]).abs());
        records.push(MapRecord {
            source: a,
            target: b,
            mass,
            x,
            destination: y,
            covector,
            distance: dist,
            label,
            endpoint_residual,
            pairing_residual,
            gradient: gradients[a].clone(),
            multi_destination: multi.contains(&a),
        });
    }
    Ok(TransportMapEstimate { records, multi_destination_rows: multi, n_source: mu.len() })
}

#[derive(Clone, Debug, Serialize)]
pub struct Regression {
    pub gradient: Vec<f64>,
    /// Weighted RMS misfit of the affine model.
    pub residual: f64,
    /// Distance to the farthest neighbor used.
    pub radius: f64,
}

/// Tricube weights on the `k` nearest of `points` to `center`.
fn neighborhood(center: &[f64], points: &[&[f64]], k: usize) -> (Vec<usize>, Vec<f64>, f64) {
    let mut order: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (chart_distance(center, p), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    order.truncate(k);
    let radius = order.last().map(|o| o.0).unwrap_or(0.0);
    let scale = 1.01 * radius.max(1e-300);
    let weights = order.iter().map(|(d, _)| (1.0 - (d / scale).powi(3)).powi(3)).collect();
    (order.into_iter().map(|o| o.1).collect(), weights, radius)
}

/// Weighted least-squares fit `value ~ c + g . (z - center)` for every column
/// of `values`; returns the slopes (one row per column) and the RMS misfit.
fn affine_fit(
    center: &[f64],
    points: &[&[f64]],
    values: &[Vec<f64>],
    idx: &[usize],
    weights: &[f64],
) -> Option<(Vec<Vec<f64>>, f64)> {
    let n = center.len();
    let rows = idx.len();
    let design = DMatrix::from_fn(rows, n + 1, |r, c| {
        let w = weights[r].sqrt();
        if c == 0 {
            w
        } else {
            w * (points[idx[r]][c - 1] - center[c - 1])
        }
    });
    if linalg::numerical_rank(&design, 1e-10) < n + 1 {
        return None;
    }
    let cols = values[0].len();
    let mut slopes = Vec::with_capacity(cols);
    let mut misfit = 0.0;
    for c in 0..cols {
        let rhs = DVector::from_fn(rows, |r, _| weights[r].sqrt() * values[idx[r]][c]);
        let sol = linalg::least_squares(&design, &rhs, 1e-10)?;
        misfit += (&design * &sol - &rhs).norm_squared();
        slopes.push(sol.as_slice()[1..].to_vec());
    }
    let wsum: f64 = weights.iter().sum();
    Some((slopes, (misfit / (wsum * cols as f64).max(1e-300)).sqrt()))
}

/// Gradient of the potential at every source atom from an affine fit over its
/// `k` nearest atoms (the atom itself included). With `radius`, every used
/// neighbor must lie within it.
pub fn regress_dphi(
    phi: &[f64],
    sources: &[Point],
    k: usize,
    radius: Option<f64>,
) -> Result<Vec<Regression>, DisplacementError> {
    let n = sources.first().map(|p| p.dim()).unwrap_or(0);
    let points: Vec<&[f64]> = sources.iter().map(|p| p.as_slice()).collect();
    let values: Vec<Vec<f64>> = phi.iter().map(|v| vec![*v]).collect();
    if k < n + 1 || sources.len() < n + 1 {
        return Err(DisplacementError::DegenerateNeighborhood { index: 0 });
    }
    (0..sources.len())
        .map(|i| {
            let (idx, weights, r) = neighborhood(points[i], &points, k);
            if radius.is_some_and(|limit| r > limit) {
                return Err(DisplacementError::DegenerateNeighborhood { index: i });
            }
            let (slopes, residual) = affine_fit(points[i], &points, &values, &idx, &weights)
                .ok_or(DisplacementError::DegenerateNeighborhood { index: i })?;
            Ok(Regression { gradient: slopes[0].clone(), residual, radius: r })
        })
        .collect()
}

/// Covector field `x -> p(x)` interpolating the records' covectors by local
/// affine fits; exact wherever the neighbors agree.
pub fn covector_at(map: &TransportMapEstimate, x: &[f64], k: usize) -> Result<Vec<f64>, DisplacementError> {
    let records: Vec<&MapRecord> = map.graph_records().collect();
    let points: Vec<&[f64]> = records.iter().map(|r| r.x.as_slice()).collect();
    let values: Vec<Vec<f64>> = records.iter().map(|r| r.covector.clone()).collect();
    let (idx, weights, _) = neighborhood(x, &points, k.min(points.len()));
    let first = &values[idx[0]];
    if idx.iter().all(|&i| &values[i] == first) {
        return Ok(first.clone());
    }
    let (slopes, _) = affine_fit(x, &points, &values, &idx, &weights)
        .ok_or(DisplacementError::DegenerateNeighborhood { index: idx[0] })?;
    // the intercept is the value at x; recover it from the weighted mean
    let wsum: f64 = weights.iter().sum();
    let n = x.len();
    Ok((0..values[0].len())
        .map(|c| {
            let mean_v: f64 = idx.iter().zip(&weights).map(|(&i, w)| w * values[i][c]).sum::<f64>() / wsum;
            let mean_dx: Vec<f64> =
                (0..n).map(|d| idx.iter().zip(&weights).map(|(&i, w)| w * (points[i][d] - x[d])).sum::<f64>() / wsum).collect();
            mean_v - slopes[c].iter().zip(&mean_dx).map(|(g, dx)| g * dx).sum::<f64>()
        })
        .collect())
}

#[derive(Clone, Debug, Serialize)]
pub struct InterpolationResult {
    pub t: Vec<f64>,
    /// `clouds[k][j]`: position of particle `j` at time `t[k]`.
    pub clouds: Vec<Vec<Vec<f64>>>,
    /// Position of each particle at time 0.
    pub sources: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub min_spacing: Vec<f64>,
    /// Filled in by [`geodesic_check`].
    pub w2_from_source: Vec<Option<f64>>,
    pub w2_to_target: Vec<Option<f64>>,
}

impl InterpolationResult {
    fn index_of(&self, t: f64) -> Result<usize, DisplacementError> {
        self.t.iter().position(|s| (s - t).abs() < 1e-12).ok_or(DisplacementError::InvalidTime(t))
    }

    pub fn measure_at(&self, k: usize) -> Result<DiscreteMeasure, KantorovichError> {
        DiscreteMeasure::new(self.clouds[k].iter().map(|p| Point::new(p)).collect(), self.weights.clone())
    }
}

fn min_spacing(cloud: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..cloud.len() {
        for j in (i + 1)..cloud.len() {
            best = best.min(chart_distance(&cloud[i], &cloud[j]));
        }
    }
    best
}

/// `T_t(x) = exp_x(t p)`: the time-`t` point of each stored geodesic; static
/// particles stay put.
pub fn interpolate(
    map: &TransportMapEstimate,
    frame: &ControlFrame,
    t_list: &[f64],
    steps: usize,
) -> Result<InterpolationResult, DisplacementError> {
    if let Some(&bad) = t_list.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(DisplacementError::InvalidTime(bad));
    }
    let mut clouds = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let cloud = map
            .records
            .iter()
            .map(|r| match r.label {
                Label::Static => Ok(r.x.clone()),
                Label::Moving if t == 0.0 => Ok(r.x.clone()),
                Label::Moving => {
                    let p: Vec<f64> = r.covector.iter().map(|v| t * v).collect();
                    Ok(exp_map_with_steps(frame, &Point::new(&r.x), &Covector::new(&p), steps)?.0.as_slice().to_vec())
                }
            })
            .collect::<Result<Vec<_>, DisplacementError>>()?;
        clouds.push(cloud);
    }
    let min_spacing = clouds.iter().map(|c| min_spacing(c)).collect();
    Ok(InterpolationResult {
        t: t_list.to_vec(),
        clouds,
        sources: map.records.iter().map(|r| r.x.clone()).collect(),
        weights: map.records.iter().map(|r| r.mass).collect(),
        min_spacing,
        w2_from_source: vec![None; t_list.len()],
        w2_to_target: vec![None; t_list.len()],
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SplitReport {
    pub t: f64,
    /// Max over moving particles of
    /// `|d(x,T_t)^2/t + d(T_t,T)^2/(1-t) - d(x,T)^2| / d(x,T)^2`.
    pub split_error: f64,
    /// Max over moving particles of `|d(x,T_t) - t d(x,T)|`.
    pub speed_error: f64,
}

/// Checks that every interpolated particle splits its geodesic exactly,
/// using fresh distance solves.
pub fn geodesic_split(
    map: &TransportMapEstimate,
    interp: &InterpolationResult,
    frame: &ControlFrame,
    t: f64,
    opts: &DistanceOptions,
) -> Result<SplitReport, DisplacementError> {
    let k = interp.index_of(t)?;
    if t <= 0.0 || t >= 1.0 {
        return Err(DisplacementError::InvalidTime(t));
    }
    let mut split_error = 0.0_f64;
    let mut speed_error = 0.0_f64;
    for (j, r) in map.records.iter().enumerate() {
        if r.label == Label::Static {
            continue;
        }
        let mid = Point::new(&interp.clouds[k][j]);
        let d1 = distance(frame, &Point::new(&r.x), &mid, opts)?.value;
        let d2 = distance(frame, &mid, &Point::new(&r.destination), opts)?.value;
        let total = r.distance * r.distance;
        split_error = split_error.max((d1 * d1 / t + d2 * d2 / (1.0 - t) - total).abs() / total);
        speed_error = speed_error.max((d1 - t * r.distance).abs());
    }
    Ok(SplitReport { t, split_error, speed_error })
}

#[derive(Clone, Debug, Serialize)]
pub struct GeodesicReport {
    pub w2: f64,
    pub t: Vec<f64>,
    pub w2_from_source: Vec<f64>,
    pub w2_to_target: Vec<f64>,
    /// `|W2(mu, mu_t) - t W2(mu, nu)| / W2(mu, nu)`; absolute when `W2(mu, nu) = 0`.
    pub relative_error: Vec<f64>,
}

/// Fresh exact solves of `W2(mu, mu_t)` and `W2(mu_t, nu)` for every `t`, run
/// one after another.
pub fn geodesic_check(
    mu: &DiscreteMeasure,
    interp: &mut InterpolationResult,
    nu: &DiscreteMeasure,
    frame: &ControlFrame,
    opts: &DistanceOptions,
) -> Result<GeodesicReport, DisplacementError> {
    let w2_of = |a: &DiscreteMeasure, b: &DiscreteMeasure| -> Result<f64, DisplacementError> {
        let cost = distance_table(frame, a.points(), b.points(), opts)?.cost_matrix();
        let (plan, _) = solve_kantorovich(a, b, &cost)?;
        Ok(plan.cost.max(0.0).sqrt())
    };
    let w2 = w2_of(mu, nu)?;
    let mut report = GeodesicReport { w2, t: interp.t.clone(), w2_from_source: vec![], w2_to_target: vec![], relative_error: vec![] };
    for k in 0..interp.t.len() {
        let t = interp.t[k];
        let mt = interp.measure_at(k)?;
        let from = w2_of(mu, &mt)?;
        let to = w2_of(&mt, nu)?;
        interp.w2_from_source[k] = Some(from);
        interp.w2_to_target[k] = Some(to);
        let err = (from - t * w2).abs();
        report.relative_error.push(if w2 > 0.0 { err / w2 } else { err });
        report.w2_from_source.push(from);
        report.w2_to_target.push(to);
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct AbsContinuityReport {
    pub t: f64,
    /// `min |T_t(x_a) - T_t(x_b)| / |x_a - x_b|` over particles with distinct sources.
    pub injectivity_margin: f64,
    /// Largest total mass within `r_cluster` of a particle.
    pub max_cluster_mass: f64,
    pub r_cluster: f64,
}

pub fn abs_continuity_probe(interp: &InterpolationResult, t: f64, r_cluster: f64) -> Result<AbsContinuityReport, DisplacementError> {
    let k = interp.index_of(t)?;
    let cloud = &interp.clouds[k];
    let sources = &interp.sources;
    let mut margin = f64::INFINITY;
    let mut cluster = 0.0_f64;
    for i in 0..cloud.len() {
        let mut mass = interp.weights[i];
        for j in 0..cloud.len() {
            if i == j {
                continue;
            }
            let moved = chart_distance(&cloud[i], &cloud[j]);
            if moved <= r_cluster {
                mass += interp.weights[j];
            }
            let base = chart_distance(&sources[i], &sources[j]);
            if j > i && base > 0.0 {
                margin = margin.min(moved / base);
            }
        }
        cluster = cluster.max(mass);
    }
    Ok(AbsContinuityReport { t, injectivity_margin: margin, max_cluster_mass: cluster, r_cluster })
}

/// A regular evaluation grid over a box, `nodes` points per axis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalGrid {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nodes: usize,
}

impl EvalGrid {
    fn coord(&self, axis: usize, i: usize) -> f64 {
        self.lo[axis] + (self.hi[axis] - self.lo[axis]) * i as f64 / (self.nodes - 1) as f64
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct JacobianReport {
    pub nodes: usize,
    pub interior_nodes: usize,
    pub median_residual: f64,
    pub max_residual: f64,
    pub min_abs_det: f64,
    pub nondegenerate: bool,
    /// `max |f - g|` over static particles; `None` when nothing is static.
    pub static_density_residual: Option<f64>,
}

/// Evaluates the reconstructed map `T(x) = exp_x(p(x))` on every node of the
/// grid, takes central differences at interior nodes, and compares
/// `det dT(x)` against `f(x) / g(T(x))`.
pub fn jacobian_residual(
    map: &TransportMapEstimate,
    frame: &ControlFrame,
    f: &dyn Fn(&[f64]) -> f64,
    g: &dyn Fn(&[f64]) -> f64,
    grid: &EvalGrid,
    opts: &MapOptions,
) -> Result<JacobianReport, DisplacementError> {
    let n = frame.dim();
    let nodes = grid.nodes;
    if nodes < 3 {
        return Err(DisplacementError::GridTooCoarse { nodes });
    }
    let total = nodes.pow(n as u32);
    let multi_index = |mut flat: usize| -> Vec<usize> {
        let mut idx = vec![0; n];
        for d in (0..n).rev() {
            idx[d] = flat % nodes;
            flat /= nodes;
        }
        idx
    };
    let flat_of = |idx: &[usize]| idx.iter().fold(0, |acc, &i| acc * nodes + i);
    let position = |idx: &[usize]| -> Vec<f64> { (0..n).map(|d| grid.coord(d, idx[d])).collect() };
    let mut images = Vec::with_capacity(total);
    for flat in 0..total {
        let x = position(&multi_index(flat));
        let p = covector_at(map, &x, opts.neighbors)?;
        let y = if p.iter().all(|v| *v == 0.0) {
            x
        } else {
            exp_map_with_steps(frame, &Point::new(&x), &Covector::new(&p), opts.distance.steps)?.0.as_slice().to_vec()
        };
        images.push(y);
    }
    let mut residuals = Vec::new();
    let mut min_abs_det = f64::INFINITY;
    for flat in 0..total {
        let idx = multi_index(flat);
        if idx.iter().any(|&i| i == 0 || i == nodes - 1) {
            continue;
        }
        let mut jac = DMatrix::zeros(n, n);
        for c in 0..n {
            let (mut up, mut down) = (idx.clone(), idx.clone());
            up[c] += 1;
            down[c] -= 1;
            let step = grid.coord(c, up[c]) - grid.coord(c, down[c]);
            let (a, b) = (&images[flat_of(&up)], &images[flat_of(&down)]);
            for r in 0..n {
                jac[(r, c)] = (a[r] - b[r]) / step;
            }
        }
        let det = jac.determinant();
        min_abs_det = min_abs_det.min(det.abs());
        let x = position(&idx);
        residuals.push((det - f(&x) / g(&images[flat])).abs());
    }
    residuals.sort_by(f64::total_cmp);
    let median = if residuals.is_empty() {
        0.0
    } else if residuals.len() % 2 == 1 {
        residuals[residuals.len() / 2]
    } else {
        0.5 * (residuals[residuals.len() / 2 - 1] + residuals[residuals.len() / 2])
    };
    let statics: Vec<f64> = map.records.iter().filter(|r| r.label == Label::Static).map(|r| (f(&r.x) - g(&r.x)).abs()).collect();
    Ok(JacobianReport {
        nodes,
        interior_nodes: residuals.len(),
        median_residual: median,
        max_residual: residuals.last().copied().unwrap_or(0.0),
        min_abs_det,
        nondegenerate: min_abs_det > 0.0,
        static_density_residual: (!statics.is_empty()).then(|| statics.iter().copied().fold(0.0, f64::max)),
    })
}

/// `max_b |(T_# mu)(y_b) - nu(y_b)|` with mass booked on destination atoms.
pub fn mass_balance(map: &TransportMapEstimate, nu: &DiscreteMeasure) -> f64 {
    let mut pushed = vec![0.0; nu.len()];
    for r in &map.records {
        pushed[r.target] += r.mass;
    }
    pushed.iter().zip(nu.weights()).map(|(p, w)| (p - w).abs()).fold(0.0, f64::max)
}

/// `max C_{a,T(a)} + C_{b,T(b)} - C_{a,T(b)} - C_{b,T(a)}` over pairs of moving
/// particles; nonpositive up to round-off for an optimal support.
pub fn monotonicity_violation(map: &TransportMapEstimate, cost: &DMatrix<f64>) -> f64 {
    let moving: Vec<&MapRecord> = map.records.iter().filter(|r| r.label == Label::Moving).collect();
    let mut worst = f64::NEG_INFINITY;
    for (i, a) in moving.iter().enumerate() {
        for b in &moving[i + 1..] {
            let v = cost[(a.source, a.target)] + cost[(b.source, b.target)] - cost[(a.source, b.target)] - cost[(b.source, a.target)];
            worst = worst.max(v);
        }
    }
    worst
}

/// Fraction of graph records whose `-1/2 g` (regressed) has cosine at least
/// `threshold` with the covector, among those accepted by `filter`.
pub fn gradient_agreement(map: &TransportMapEstimate, threshold: f64, filter: impl Fn(&MapRecord) -> bool) -> (usize, usize) {
    let mut total = 0;
    let mut good = 0;
    for r in map.graph_records().filter(|r| r.label == Label::Moving && filter(r)) {
        let Some(g) = &r.gradient else { continue };
        total += 1;
        let dot: f64 = g.iter().zip(&r.covector).map(|(a, b)| -0.5 * a * b).sum();
        let ng = 0.5 * g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let np = r.covector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if ng > 0.0 && np > 0.0 && dot / (ng * np) >= threshold {
            good += 1;
        }
    }
    (good, total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::catalog;
    use crate::kantorovich::solve_kantorovich;

    fn cloud(n: usize, seed: u64, shift: f64) -> Vec<Point> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point::new(&[rng.random_range(0.0..1.0) + shift, rng.random_range(0.0..1.0), rng.random_range(-0.5..0.5)]))
            .collect()
    }

    #[test]
    fn affine_potential_is_recovered_exactly() {
        let pts = cloud(20, 1, 0.0);
        let slope = [1.5, -2.0, 0.25];
        let phi: Vec<f64> = pts.iter().map(|p| 0.7 + p.as_slice().iter().zip(&slope).map(|(a, b)| a * b).sum::<f64>()).collect();
        for r in regress_dphi(&phi, &pts, 6, None).unwrap() {
            for (g, s) in r.gradient.iter().zip(&slope) {
                assert!((g - s).abs() < 1e-10);
            }
            assert!(r.residual < 1e-10);
        }
        assert!(matches!(regress_dphi(&phi, &pts, 3, None), Err(DisplacementError::DegenerateNeighborhood { .. })));
        let flat: Vec<Point> = (0..8).map(|k| Point::new(&[k as f64, 0.0, 0.0])).collect();
        assert!(matches!(regress_dphi(&[0.0; 8], &flat, 5, None), Err(DisplacementError::DegenerateNeighborhood { .. })));
    }

    #[test]
    fn identity_transport_is_static() {
        let h = catalog("heisenberg").unwrap();
        let mu = DiscreteMeasure::uniform(cloud(6, 2, 0.0)).unwrap();
        let opts = MapOptions::default();
        let table = distance_table(&h, mu.points(), mu.points(), &opts.distance).unwrap();
        let cost = table.cost_matrix();
        let (plan, duals) = solve_kantorovich(&mu, &mu, &cost).unwrap();
        let map = build_map(&mu, &mu, &plan, &duals, &h, &table, &opts).unwrap();
        assert!(map.records.iter().all(|r| r.label == Label::Static && r.covector.iter().all(|v| *v == 0.0)));
        assert!(map.records.iter().all(|r| r.pairing_residual.unwrap() <= opts.pairing_tol));
        let interp = interpolate(&map, &h, &[0.0, 0.5, 1.0], 1000).unwrap();
        assert_eq!(interp.clouds[0], interp.clouds[2]);
        assert_eq!(abs_continuity_probe(&interp, 0.5, 1e-3).unwrap().injectivity_margin, 1.0);
        assert_eq!(mass_balance(&map, &mu), 0.0);
    }

    #[test]
    fn translation_moves_along_the_first_field() {
        let h = catalog("heisenberg").unwrap();
        let src = cloud(8, 3, 0.0);
        let dst: Vec<Point> = src.iter().map(|p| Point::new(&[p.0[0] + 1.0, p.0[1], p.0[2]])).collect();
        let mu = DiscreteMeasure::uniform(src).unwrap();
        let nu = DiscreteMeasure::uniform(dst).unwrap();
        let opts = MapOptions { neighbors: 5, ..MapOptions::default() };
        let table = distance_table(&h, mu.points(), nu.points(), &opts.distance).unwrap();
        let cost = table.cost_matrix();
        let (plan, duals) = solve_kantorovich(&mu, &nu, &cost).unwrap();
        let map = build_map(&mu, &nu, &plan, &duals, &h, &table, &opts).unwrap();
        for r in &map.records {
            assert_eq!(r.source, r.target);
            assert!((r.covector[0] - 1.0).abs() < 1e-6 && r.covector[1].abs() < 1e-6 && r.covector[2].abs() < 1e-6);
            assert!(r.endpoint_residual < 1e-6);
        }
        assert!(mass_balance(&map, &nu) < 1e-12);
        assert!(monotonicity_violation(&map, &cost) <= 1e-9);
        let interp = interpolate(&map, &h, &[0.0, 0.5, 1.0], 1000).unwrap();
        for (a, b) in interp.clouds[2].iter().zip(nu.points()) {
            assert!(chart_distance(a, b.as_slice()) < 1e-8);
        }
        let split = geodesic_split(&map, &interp, &h, 0.5, &opts.distance).unwrap();
        assert!(split.split_error < 1e-3 && split.speed_error < 1e-4);
        assert!(abs_continuity_probe(&interp, 0.5, 1e-3).unwrap().injectivity_margin > 0.0);
        assert!(matches!(interpolate(&map, &h, &[1.5], 10), Err(DisplacementError::InvalidTime(_))));
    }

    #[test]
    fn jacobian_of_translation_and_identity() {
        let h = catalog("heisenberg").unwrap();
        let lattice: Vec<Point> = (0..27).map(|k| Point::new(&[(k % 3) as f64 * 0.5, (k / 3 % 3) as f64 * 0.5, (k / 9) as f64 * 0.5])).collect();
        let shifted: Vec<Point> = lattice.iter().map(|p| Point::new(&[p.0[0] + 1.0, p.0[1], p.0[2]])).collect();
        let make = |src: &[Point], dst: &[Point]| {
            let rec = |i: usize, target: &Point| MapRecord {
                source: i,
                target: i,
                mass: 1.0 / 27.0,
                x: src[i].as_slice().to_vec(),
                destination: target.as_slice().to_vec(),
                covector: if src[i] == *target { vec![0.0; 3] } else { vec![1.0, 0.0, 0.0] },
                distance: chart_distance(src[i].as_slice(), target.as_slice()),
                label: if src[i] == *target { Label::Static } else { Label::Moving },
                endpoint_residual: 0.0,
                pairing_residual: None,
                gradient: None,
                multi_destination: false,
            };
            TransportMapEstimate { records: dst.iter().enumerate().map(|(i, y)| rec(i, y)).collect(), multi_destination_rows: vec![], n_source: 27 }
        };
        let grid = EvalGrid { lo: vec![0.0; 3], hi: vec![1.0; 3], nodes: 5 };
        let opts = MapOptions { neighbors: 8, ..MapOptions::default() };
        let uniform = |_: &[f64]| 1.0;
        let moved = jacobian_residual(&make(&lattice, &shifted), &h, &uniform, &uniform, &grid, &opts).unwrap();
        assert!(moved.median_residual < 1e-9 && moved.nondegenerate);
        assert_eq!(moved.interior_nodes, 27);
        let doubled = |_: &[f64]| 2.0;
        let wrong = jacobian_residual(&make(&lattice, &shifted), &h, &uniform, &doubled, &grid, &opts).unwrap();
        assert!((wrong.median_residual - 0.5).abs() < 1e-9);
        let still = jacobian_residual(&make(&lattice, &lattice), &h, &uniform, &uniform, &grid, &opts).unwrap();
        assert_eq!(still.median_residual, 0.0);
        assert_eq!(still.static_density_residual, Some(0.0));
        let coarse = EvalGrid { nodes: 2, ..grid };
        assert!(matches!(jacobian_residual(&make(&lattice, &lattice), &h, &uniform, &uniform, &coarse, &opts), Err(DisplacementError::GridTooCoarse { nodes: 2 })));
    }
}
