//! Entropic transport for large instances: log-domain Sinkhorn with
//! epsilon-scaling, then rounding onto the exact marginals. Approximate; the
//! exact solver is the reference everywhere else.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{dual_value, check_sizes, DiscreteMeasure, DualPotentials, KantorovichError, TransportPlan};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornOptions {
    /// Final regularization, relative to the largest cost entry.
    pub epsilon: f64,
    /// Epsilon is divided by this factor between stages.
    pub scaling: f64,
    pub max_iterations: usize,
    /// Stop a stage when the L1 row-marginal error drops below this.
    pub tol: f64,
}

impl Default for SinkhornOptions {
    fn default() -> Self {
        Self { epsilon: 1e-3, scaling: 2.0, max_iterations: 10_000, tol: 1e-9 }
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn solve_sinkhorn(
    mu: &DiscreteMeasure,
    nu: &DiscreteMeasure,
    cost: &DMatrix<f64>,
    opts: &SinkhornOptions,
) -> Result<(TransportPlan, DualPotentials), KantorovichError> {
    check_sizes(mu, nu, cost)?;
    let (n, m) = (mu.len(), nu.len());
    let (a, b) = (mu.weights(), nu.weights());
    let (la, lb): (Vec<f64>, Vec<f64>) = (a.iter().map(|w| w.ln()).collect(), b.iter().map(|w| w.ln()).collect());
    let scale = cost.iter().fold(0.0_f64, |s, c| s.max(c.abs())).max(1e-300);
    let target = opts.epsilon * scale;
    let mut eps = scale;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    loop {
        for _ in 0..opts.max_iterations {
            for i in 0..n {
                f[i] = -eps * log_sum_exp((0..m).map(|j| lb[j] + (g[j] - cost[(i, j)]) / eps));
            }
            for j in 0..m {
                g[j] = -eps * log_sum_exp((0..n).map(|i| la[i] + (f[i] - cost[(i, j)]) / eps));
            }
            let row_err: f64 = (0..n)
                .map(|i| {
                    let r: f64 = (0..m).map(|j| (la[i] + lb[j] + (f[i] + g[j] - cost[(i, j)]) / eps).exp()).sum();
                    (r - a[i]).abs()
                })
                .sum();
            if row_err < opts.tol {
                break;
            }
        }
        if eps <= target {
            break;
        }
        eps = (eps / opts.scaling).max(target);
    }
    let mut plan = DMatrix::from_fn(n, m, |i, j| (la[i] + lb[j] + (f[i] + g[j] - cost[(i, j)]) / eps).exp());
    if plan.iter().any(|v| !v.is_finite()) {
        return Err(KantorovichError::NumericalFailure("Sinkhorn plan is not finite".into()));
    }
    round_to_marginals(&mut plan, a, b);
    let flow: Vec<f64> = (0..n * m).map(|k| plan[(k / m, k % m)]).collect();
    let plan = TransportPlan::from_flow(&flow, n, m, cost);
    let shift = f.iter().copied().fold(f64::INFINITY, f64::min);
    let phi: Vec<f64> = f.iter().map(|v| v - shift).collect();
    let phic: Vec<f64> = g.iter().map(|v| v + shift).collect();
    let gap = plan.cost - dual_value(mu, nu, &phi, &phic);
    Ok((plan, DualPotentials { phi, phic, gap }))
}

/// Scales rows and columns down onto their marginals, then restores the
/// missing mass with a rank-one correction; the result has exact marginals.
fn round_to_marginals(plan: &mut DMatrix<f64>, a: &[f64], b: &[f64]) {
    let (n, m) = plan.shape();
    for i in 0..n {
        let r: f64 = plan.row(i).sum();
        if r > a[i] {
            plan.row_mut(i).scale_mut(a[i] / r);
        }
    }
    for j in 0..m {
        let c: f64 = plan.column(j).sum();
        if c > b[j] {
            plan.column_mut(j).scale_mut(b[j] / c);
        }
    }
    let er: Vec<f64> = (0..n).map(|i| (a[i] - plan.row(i).sum()).max(0.0)).collect();
    let ec: Vec<f64> = (0..m).map(|j| (b[j] - plan.column(j).sum()).max(0.0)).collect();
    let total: f64 = er.iter().sum();
    if total > 0.0 {
        for i in 0..n {
            for j in 0..m {
                plan[(i, j)] += er[i] * ec[j] / total;
            }
        }
    }
}
