//! Discrete optimal transport for the cost `c = d^2`: cost matrices, the exact
//! Kantorovich LP with its basis duals, c-transforms and the c-superdifferential
//! check.

mod simplex;
pub mod sinkhorn;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frames::{ControlFrame, Point};
use crate::metric::{distance, DistanceOptions, MetricError, Method};

/// Plan entries at or below this mass are dropped (flow round-off).
pub const SUPPORT_TOL: f64 = 1e-15;

/// Absolute tolerance on potential inequalities.
pub const POTENTIAL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum KantorovichError {
    #[error("invalid measure: {0}")]
    InvalidMeasure(String),
    #[error("cost matrix is {rows}x{cols} but the measures have {n} and {m} atoms")]
    SizeMismatch { rows: usize, cols: usize, n: usize, m: usize },
    #[error("marginal totals differ by {0:e}")]
    Infeasible(f64),
    #[error("LP solver failed: {0}")]
    NumericalFailure(String),
    #[error("distance ({a}, {b}) did not converge: {source}")]
    NoConvergence {
        a: usize,
        b: usize,
        #[source]
        source: Box<MetricError>,
    },
}

/// A finitely supported probability measure on the chart.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DiscreteMeasure {
    points: Vec<Point>,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(points: Vec<Point>, weights: Vec<f64>) -> Result<Self, KantorovichError> {
        if points.is_empty() || points.len() != weights.len() {
            return Err(KantorovichError::InvalidMeasure(format!("{} points, {} weights", points.len(), weights.len())));
        }
        let dim = points[0].dim();
        if points.iter().any(|p| p.dim() != dim || !p.is_finite()) {
            return Err(KantorovichError::InvalidMeasure("points must be finite and of one dimension".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(KantorovichError::InvalidMeasure("weights must be finite and nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(KantorovichError::InvalidMeasure(format!("weights sum to {total}")));
        }
        Ok(Self { points, weights })
    }

    pub fn uniform(points: Vec<Point>) -> Result<Self, KantorovichError> {
        let w = 1.0 / points.len().max(1) as f64;
        let n = points.len();
        Self::new(points, vec![w; n])
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.points[0].dim()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// A coupling stored as `(source, target, mass)` triplets.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TransportPlan {
    pub n_source: usize,
    pub n_target: usize,
    pub entries: Vec<(usize, usize, f64)>,
    pub cost: f64,
}

impl TransportPlan {
    fn from_flow(flow: &[f64], n: usize, m: usize, cost: &DMatrix<f64>) -> Self {
        let entries: Vec<(usize, usize, f64)> =
            (0..n * m).filter(|&k| flow[k] > SUPPORT_TOL).map(|k| (k / m, k % m, flow[k])).collect();
        let total = entries.iter().map(|&(a, b, g)| g * cost[(a, b)]).sum();
        Self { n_source: n, n_target: m, entries, cost: total }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n_source];
        for &(a, _, g) in &self.entries {
            s[a] += g;
        }
        s
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n_target];
        for &(_, b, g) in &self.entries {
            s[b] += g;
        }
        s
    }

    pub fn dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.n_source, self.n_target);
        for &(a, b, g) in &self.entries {
            d[(a, b)] += g;
        }
        d
    }

    /// Targets receiving mass from source `a`.
    pub fn destinations(&self, a: usize) -> Vec<usize> {
        self.entries.iter().filter(|e| e.0 == a).map(|e| e.1).collect()
    }

    /// Sources sending mass to more than one target.
    pub fn multi_destination_rows(&self) -> Vec<usize> {
        (0..self.n_source).filter(|&a| self.destinations(a).len() > 1).collect()
    }

    /// Total cost of this plan's support under another cost matrix.
    pub fn cost_under(&self, cost: &DMatrix<f64>) -> f64 {
        self.entries.iter().map(|&(a, b, g)| g * cost[(a, b)]).sum()
    }
}

/// Kantorovich potentials on the supports: `phi` on sources, `phic` on targets.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DualPotentials {
    pub phi: Vec<f64>,
    pub phic: Vec<f64>,
    /// Primal cost minus dual value.
    pub gap: f64,
}

impl DualPotentials {
    /// `max_{a,b} phi_a + phic_b - C_ab`, positive when the pair is infeasible.
    pub fn max_infeasibility(&self, cost: &DMatrix<f64>) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for (a, pa) in self.phi.iter().enumerate() {
            for (b, pb) in self.phic.iter().enumerate() {
                worst = worst.max(pa + pb - cost[(a, b)]);
            }
        }
        worst
    }
}

/// Pairwise distances with the minimizing covector and solver flags of every
/// entry; row-major.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DistanceTable {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
    pub covectors: Vec<Vec<f64>>,
    pub methods: Vec<Method>,
    pub multiplicities: Vec<usize>,
}

impl DistanceTable {
    pub fn value(&self, a: usize, b: usize) -> f64 {
        self.values[a * self.cols + b]
    }

    pub fn covector(&self, a: usize, b: usize) -> &[f64] {
        &self.covectors[a * self.cols + b]
    }

    /// `C_ab = d(x_a, y_b)^2`.
    pub fn cost_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.rows, self.cols, |a, b| self.value(a, b).powi(2))
    }
}

/// All distances `d(x_a, y_b)`, computed in parallel. The first failing entry
/// in row-major order is reported.
pub fn distance_table(
    frame: &ControlFrame,
    xs: &[Point],
    ys: &[Point],
    opts: &DistanceOptions,
) -> Result<DistanceTable, KantorovichError> {
    let (n, m) = (xs.len(), ys.len());
    let results: Vec<_> = (0..n * m).into_par_iter().map(|k| distance(frame, &xs[k / m], &ys[k % m], opts)).collect();
    let mut table = DistanceTable {
        rows: n,
        cols: m,
        values: Vec::with_capacity(n * m),
        covectors: Vec::with_capacity(n * m),
        methods: Vec::with_capacity(n * m),
        multiplicities: Vec::with_capacity(n * m),
    };
    for (k, r) in results.into_iter().enumerate() {
        let r = r.map_err(|e| KantorovichError::NoConvergence { a: k / m, b: k % m, source: Box::new(e) })?;
        table.values.push(r.value);
        table.covectors.push(r.best_covector().map(|p| p.as_slice().to_vec()).unwrap_or_else(|| vec![0.0; frame.dim()]));
        table.methods.push(r.method);
        table.multiplicities.push(r.multiplicity);
    }
    Ok(table)
}

/// `C_ab = d(x_a, y_b)^2`.
pub fn cost_matrix(
    frame: &ControlFrame,
    xs: &[Point],
    ys: &[Point],
    opts: &DistanceOptions,
) -> Result<DMatrix<f64>, KantorovichError> {
    Ok(distance_table(frame, xs, ys, opts)?.cost_matrix())
}

fn check_sizes(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &DMatrix<f64>) -> Result<(), KantorovichError> {
    if cost.nrows() != mu.len() || cost.ncols() != nu.len() {
        return Err(KantorovichError::SizeMismatch { rows: cost.nrows(), cols: cost.ncols(), n: mu.len(), m: nu.len() });
    }
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(KantorovichError::NumericalFailure("cost matrix has non-finite entries".into()));
    }
    let diff = mu.weights.iter().sum::<f64>() - nu.weights.iter().sum::<f64>();
    if diff.abs() > 1e-9 {
        return Err(KantorovichError::Infeasible(diff));
    }
    Ok(())
}

/// Exact optimal plan and basis duals, normalized so that `min phi = 0`.
pub fn solve_kantorovich(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &DMatrix<f64>,
) -> Result<(TransportPlan, DualPotentials), KantorovichError> {
    check_sizes(mu, nu, cost)?;
    let (n, m) = (mu.len(), nu.len());
    let sol = simplex::solve(&mu.weights, &nu.weights, cost)
        .map_err(|e| KantorovichError::NumericalFailure(e.to_string()))?;
    log::debug!("network simplex: {n} x {m} in {} pivots", sol.pivots);
    let plan = TransportPlan::from_flow(&sol.flow, n, m, cost);
    let shift = sol.u.iter().copied().fold(f64::INFINITY, f64::min);
    let phi: Vec<f64> = sol.u.iter().map(|u| u - shift).collect();
    let phic: Vec<f64> = sol.v.iter().map(|v| v + shift).collect();
    let gap = plan.cost - dual_value(mu, nu, &phi, &phic);
    Ok((plan, DualPotentials { phi, phic, gap }))
}

fn dual_value(mu: &DiscreteMeasure, nu: &DiscreteMeasure, phi: &[f64], phic: &[f64]) -> f64 {
    mu.weights.iter().zip(phi).map(|(w, p)| w * p).sum::<f64>() + nu.weights.iter().zip(phic).map(|(w, p)| w * p).sum::<f64>()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// `phi^c(y_b) = min_a C_ab - phi(x_a)`.
    SourceToTarget,
    /// `psi^c(x_a) = min_b C_ab - psi(y_b)`.
    TargetToSource,
}

pub fn c_transform(values: &[f64], cost: &DMatrix<f64>, direction: Direction) -> Vec<f64> {
    match direction {
        Direction::SourceToTarget => (0..cost.ncols())
            .map(|b| (0..cost.nrows()).map(|a| cost[(a, b)] - values[a]).fold(f64::INFINITY, f64::min))
            .collect(),
        Direction::TargetToSource => (0..cost.nrows())
            .map(|a| (0..cost.ncols()).map(|b| cost[(a, b)] - values[b]).fold(f64::INFINITY, f64::min))
            .collect(),
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SuperdifferentialReport {
    /// `max(0, max over the support of C_ab - phi_a - phic_b)`.
    pub max_violation: f64,
    /// Support pairs whose violation exceeds the tolerance.
    pub violations: Vec<(usize, usize, f64)>,
    pub support_size: usize,
}

/// Checks that the plan lives on the c-superdifferential of `phi`, i.e.
/// `phi_a + phic_b >= C_ab - tol` on every support pair.
pub fn superdifferential_check(
    plan: &TransportPlan,
    duals: &DualPotentials,
    cost: &DMatrix<f64>,
    tol: f64,
) -> SuperdifferentialReport {
    let mut max_violation = 0.0_f64;
    let mut violations = Vec::new();
    for &(a, b, _) in &plan.entries {
        let v = cost[(a, b)] - duals.phi[a] - duals.phic[b];
        max_violation = max_violation.max(v);
        if v > tol {
            violations.push((a, b, v));
        }
    }
    SuperdifferentialReport { max_violation, violations, support_size: plan.entries.len() }
}

/// `W_2(mu, nu)` for the cost matrix `C = d^2`.
pub fn wasserstein(mu: &DiscreteMeasure, nu: &DiscreteMeasure, cost: &DMatrix<f64>) -> Result<f64, KantorovichError> {
    let (plan, _) = solve_kantorovich(mu, nu, cost)?;
    Ok(plan.cost.max(0.0).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use itertools::Itertools;
    use proptest::prelude::*;

    fn brute_force(cost: &DMatrix<f64>) -> f64 {
        let n = cost.nrows();
        (0..n)
            .permutations(n)
            .map(|perm| perm.iter().enumerate().map(|(a, &b)| cost[(a, b)]).sum::<f64>() / n as f64)
            .fold(f64::INFINITY, f64::min)
    }

    fn points(n: usize) -> Vec<Point> {
        (0..n).map(|k| Point::new(&[k as f64, 0.0, 0.0])).collect()
    }

    #[test]
    fn measures_validate() {
        assert!(DiscreteMeasure::new(points(2), vec![0.5, 0.6]).is_err());
        assert!(DiscreteMeasure::new(points(2), vec![1.5, -0.5]).is_err());
        assert!(DiscreteMeasure::new(points(2), vec![0.5]).is_err());
        assert!(DiscreteMeasure::uniform(points(3)).is_ok());
    }

    #[test]
    fn identity_transport_costs_nothing() {
        let mu = DiscreteMeasure::uniform(points(5)).unwrap();
        let cost = DMatrix::from_fn(5, 5, |a, b| (a as f64 - b as f64).powi(2));
        let (plan, duals) = solve_kantorovich(&mu, &mu, &cost).unwrap();
        assert_eq!(plan.cost, 0.0);
        assert!(plan.entries.iter().all(|&(a, b, _)| a == b));
        for a in 0..5 {
            assert!((duals.phi[a] + duals.phic[a]).abs() < 1e-12);
        }
        assert_eq!(wasserstein(&mu, &mu, &cost).unwrap(), 0.0);
    }

    #[test]
    fn crossing_costs_pick_the_monotone_matching() {
        let mu = DiscreteMeasure::uniform(points(2)).unwrap();
        // sources 0, 1 and targets 2, 3 on a line, squared distance
        let cost = DMatrix::from_row_slice(2, 2, &[4.0, 9.0, 1.0, 4.0]);
        let (plan, _) = solve_kantorovich(&mu, &mu, &cost).unwrap();
        assert_eq!(plan.destinations(0), vec![0]);
        assert_eq!(plan.destinations(1), vec![1]);
        assert!((plan.cost - 4.0).abs() < 1e-15);
    }

    #[test]
    fn singleton_and_point_masses() {
        let cost = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        assert_eq!(c_transform(&[0.5], &cost, Direction::SourceToTarget), vec![0.5, 1.5, 2.5]);
        let x = DiscreteMeasure::uniform(vec![Point::new(&[0.0])]).unwrap();
        let c = DMatrix::from_element(1, 1, 2.0);
        assert!((wasserstein(&x, &x, &c).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn perturbed_plan_is_flagged() {
        let n = 5;
        let mu = DiscreteMeasure::uniform(points(n)).unwrap();
        let cost = DMatrix::from_fn(n, n, |a, b| (a as f64 - b as f64 - 0.3).powi(2));
        let (plan, duals) = solve_kantorovich(&mu, &mu, &cost).unwrap();
        assert!(superdifferential_check(&plan, &duals, &cost, POTENTIAL_TOL).max_violation <= 1e-9);
        let mut swapped = plan.clone();
        let (b0, b1) = (plan.destinations(0)[0], plan.destinations(1)[0]);
        for e in swapped.entries.iter_mut() {
            if e.0 == 0 {
                e.1 = b1;
            } else if e.0 == 1 {
                e.1 = b0;
            }
        }
        let report = superdifferential_check(&swapped, &duals, &cost, POTENTIAL_TOL);
        assert!(report.max_violation > 1e-3);
        assert!(!report.violations.is_empty());
    }

    #[test]
    fn double_transform_dominates() {
        let cost = DMatrix::from_fn(4, 3, |a, b| ((a * 7 + b * 3) % 5) as f64);
        let phi = vec![0.3, -1.0, 2.0, 0.0];
        let phic = c_transform(&phi, &cost, Direction::SourceToTarget);
        let phicc = c_transform(&phic, &cost, Direction::TargetToSource);
        for (a, b) in phicc.iter().zip(&phi) {
            assert!(a >= b);
        }
        // phi^cc is c-concave, hence a fixed point
        let again = c_transform(&c_transform(&phicc, &cost, Direction::SourceToTarget), &cost, Direction::TargetToSource);
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&again, &phicc));
        let phiccc = c_transform(&phicc, &cost, Direction::SourceToTarget);
        assert!(close(&phiccc, &phic));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn lp_matches_permutation_oracle(n in 1usize..=8, entries in proptest::collection::vec(0.0f64..4.0, 64)) {
            let cost = DMatrix::from_fn(n, n, |a, b| entries[a * 8 + b]);
            let mu = DiscreteMeasure::uniform(points(n)).unwrap();
            let (plan, duals) = solve_kantorovich(&mu, &mu, &cost).unwrap();
            prop_assert!((plan.cost - brute_force(&cost)).abs() <= 1e-12);
            prop_assert!(duals.gap.abs() <= 1e-9 * (1.0 + plan.cost));
            prop_assert!(duals.max_infeasibility(&cost) <= 1e-9);
            prop_assert_eq!(duals.phi.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
            for (r, w) in plan.row_sums().iter().zip(mu.weights()) {
                prop_assert!((r - w).abs() <= 1e-12);
            }
            for (c, w) in plan.col_sums().iter().zip(mu.weights()) {
                prop_assert!((c - w).abs() <= 1e-12);
            }
            prop_assert!(plan.multi_destination_rows().is_empty());
            // basis duals are c-concave pairs
            let phic = c_transform(&duals.phi, &cost, Direction::SourceToTarget);
            let phi = c_transform(&duals.phic, &cost, Direction::TargetToSource);
            for (a, b) in phic.iter().zip(&duals.phic) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
            for (a, b) in phi.iter().zip(&duals.phi) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn general_weights_are_feasible_and_dual_optimal(
            n in 1usize..=6,
            m in 1usize..=6,
            raw_a in proptest::collection::vec(0.0f64..1.0, 6),
            raw_b in proptest::collection::vec(0.0f64..1.0, 6),
            entries in proptest::collection::vec(0.0f64..4.0, 36),
        ) {
            let norm = |raw: &[f64]| -> Vec<f64> {
                let w: Vec<f64> = raw.iter().map(|v| v + 0.05).collect();
                let s: f64 = w.iter().sum();
                w.iter().map(|v| v / s).collect()
            };
            let mu = DiscreteMeasure::new(points(n), norm(&raw_a[..n])).unwrap();
            let nu = DiscreteMeasure::new(points(m), norm(&raw_b[..m])).unwrap();
            let cost = DMatrix::from_fn(n, m, |a, b| entries[a * 6 + b]);
            let (plan, duals) = solve_kantorovich(&mu, &nu, &cost).unwrap();
            for (r, w) in plan.row_sums().iter().zip(mu.weights()) {
                prop_assert!((r - w).abs() <= 1e-9);
            }
            for (c, w) in plan.col_sums().iter().zip(nu.weights()) {
                prop_assert!((c - w).abs() <= 1e-9);
            }
            prop_assert!(plan.entries.iter().all(|e| e.2 >= 0.0));
            prop_assert!(duals.gap.abs() <= 1e-9 * (1.0 + plan.cost));
            prop_assert!(duals.max_infeasibility(&cost) <= 1e-9);
            prop_assert!(superdifferential_check(&plan, &duals, &cost, POTENTIAL_TOL).max_violation <= 1e-9);
        }
    }
}
