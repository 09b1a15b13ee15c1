//! Direct fallback: energy minimization over piecewise-constant controls with
//! a quadratic endpoint penalty and penalty continuation.

use argmin::core::{CostFunction, Error as ArgminError, Executor, Gradient, State};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::BFGS;
use nalgebra::{DMatrix, DVector};

use crate::frames::ControlFrame;
use crate::geodesics::Rk4;
use crate::linalg;

use super::DistanceOptions;

pub(crate) struct DirectSolution {
    pub energy: f64,
    pub endpoint_error: f64,
    /// Least-squares initial covector consistent with the controls, if the
    /// fit is well posed.
    pub covector_guess: Option<Vec<f64>>,
}

struct Problem<'a> {
    frame: &'a ControlFrame,
    x: &'a [f64],
    y: &'a [f64],
    segments: usize,
    substeps: usize,
}

impl Problem<'_> {
    fn endpoint(&self, u: &[f64], out: &mut [f64]) -> bool {
        let (n, m) = (self.frame.dim(), self.frame.rank());
        let fields = self.frame.fields();
        let mut f = vec![0.0; n];
        let mut rk = Rk4::new(n);
        out.copy_from_slice(self.x);
        let h = 1.0 / (self.segments * self.substeps) as f64;
        for seg in 0..self.segments {
            let us = &u[seg * m..(seg + 1) * m];
            let mut rhs = |_t: f64, z: &[f64], dz: &mut [f64]| {
                dz.fill(0.0);
                for (i, ui) in us.iter().enumerate() {
                    fields.field(i, z, &mut f);
                    for (d, fv) in dz.iter_mut().zip(&f) {
                        *d += ui * fv;
                    }
                }
            };
            for _ in 0..self.substeps {
                rk.step(&mut rhs, 0.0, h, out);
            }
        }
        out.iter().all(|v| v.is_finite())
    }

    fn energy(&self, u: &[f64]) -> f64 {
        u.iter().map(|v| v * v).sum::<f64>() / self.segments as f64
    }

    fn objective(&self, u: &[f64], rho: f64, buf: &mut [f64]) -> f64 {
        if !self.endpoint(u, buf) {
            return f64::INFINITY;
        }
        let miss: f64 = buf.iter().zip(self.y).map(|(a, b)| (a - b) * (a - b)).sum();
        self.energy(u) + rho * miss
    }

    fn gradient(&self, u: &[f64], rho: f64, f0: f64, buf: &mut [f64]) -> Vec<f64> {
        let mut g = vec![0.0; u.len()];
        let mut v = u.to_vec();
        for k in 0..u.len() {
            let eps = 1e-7 * (1.0 + u[k].abs());
            v[k] = u[k] + eps;
            let fp = self.objective(&v, rho, buf);
            v[k] = u[k] - eps;
            let fm = self.objective(&v, rho, buf);
            v[k] = u[k];
            g[k] = if fp.is_finite() && fm.is_finite() { (fp - fm) / (2.0 * eps) } else { (fp - f0) / eps };
        }
        g
    }

    /// Fits `p0` in `u_i(t) = p0 . Q(t) f_i(x(t))`, where `Q = Phi(t)^{-1}` is the
    /// inverse flow derivative along the controlled path.
    fn covector_fit(&self, u: &[f64]) -> Option<Vec<f64>> {
        let (n, m) = (self.frame.dim(), self.frame.rank());
        let fields = self.frame.fields();
        let mut f = vec![0.0; n];
        let mut jac = vec![0.0; n * n];
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut rhs_vals: Vec<f64> = Vec::new();
        let dim = n + n * n;
        let mut state = vec![0.0; dim];
        state[..n].copy_from_slice(self.x);
        for r in 0..n {
            state[n + r * n + r] = 1.0;
        }
        let mut rk = Rk4::new(dim);
        let h = 1.0 / (self.segments * self.substeps) as f64;
        for seg in 0..self.segments {
            let us = &u[seg * m..(seg + 1) * m];
            // sample at the segment midpoint after half the substeps
            for sub in 0..self.substeps {
                if sub == self.substeps / 2 {
                    let (xs, q) = state.split_at(n);
                    for (i, ui) in us.iter().enumerate() {
                        fields.field(i, xs, &mut f);
                        let row: Vec<f64> = (0..n).map(|r| (0..n).map(|c| q[r * n + c] * f[c]).sum()).collect();
                        rows.push(row);
                        rhs_vals.push(*ui);
                    }
                }
                let mut rhs = |_t: f64, z: &[f64], dz: &mut [f64]| {
                    let (xs, q) = z.split_at(n);
                    let (dx, dq) = dz.split_at_mut(n);
                    dx.fill(0.0);
                    dq.fill(0.0);
                    for (i, ui) in us.iter().enumerate() {
                        fields.field(i, xs, &mut f);
                        for (d, fv) in dx.iter_mut().zip(&f) {
                            *d += ui * fv;
                        }
                        fields.field_jacobian(i, xs, &mut jac);
                        // dQ = -Q A, A = sum u_i Df_i
                        for r in 0..n {
                            for c in 0..n {
                                let mut acc = 0.0;
                                for k in 0..n {
                                    acc += q[r * n + k] * jac[k * n + c];
                                }
                                dq[r * n + c] -= ui * acc;
                            }
                        }
                    }
                };
                rk.step(&mut rhs, 0.0, h, &mut state);
            }
        }
        let a = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
        let b = DVector::from_vec(rhs_vals);
        linalg::least_squares(&a, &b, 1e-10).map(|v| v.as_slice().to_vec())
    }
}

/// The penalized objective at a fixed `rho`, in the form the quasi-Newton
/// solver consumes.
struct Penalized<'p, 'a> {
    problem: &'p Problem<'a>,
    rho: f64,
}

impl CostFunction for Penalized<'_, '_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, u: &Self::Param) -> Result<f64, ArgminError> {
        Ok(self.problem.objective(u, self.rho, &mut vec![0.0; self.problem.x.len()]))
    }
}

impl Gradient for Penalized<'_, '_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, u: &Self::Param) -> Result<Vec<f64>, ArgminError> {
        let mut buf = vec![0.0; self.problem.x.len()];
        let f0 = self.problem.objective(u, self.rho, &mut buf);
        Ok(self.problem.gradient(u, self.rho, f0, &mut buf))
    }
}

/// BFGS with a More-Thuente line search; returns the start unchanged if the
/// solver cannot make progress.
fn bfgs(problem: &Problem<'_>, rho: f64, u0: Vec<f64>, max_iter: u64) -> Vec<f64> {
    let dim = u0.len();
    let identity: Vec<Vec<f64>> = (0..dim).map(|i| (0..dim).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
    let solver = BFGS::new(MoreThuenteLineSearch::new()).with_tolerance_cost(1e-14).and_then(|s| s.with_tolerance_grad(1e-10));
    let Ok(solver) = solver else { return u0 };
    let run = Executor::new(Penalized { problem, rho }, solver)
        .configure(|state| state.param(u0.clone()).inv_hessian(identity).max_iters(max_iter))
        .run();
    match run {
        Ok(res) => res.state().get_best_param().cloned().unwrap_or(u0),
        Err(_) => u0,
    }
}

pub(crate) fn solve(frame: &ControlFrame, x: &[f64], y: &[f64], opts: &DistanceOptions) -> Option<DirectSolution> {
    let (n, m) = (frame.dim(), frame.rank());
    let problem = Problem { frame, x, y, segments: opts.direct_segments.max(1), substeps: opts.direct_substeps.max(1) };
    // constant control that best matches the chart displacement at x
    let fmat = frame.frame_matrix(x);
    let disp = DVector::from_iterator(n, y.iter().zip(x).map(|(a, b)| a - b));
    let u0 = linalg::least_squares(&fmat, &disp, 1e-12).unwrap_or_else(|| DVector::zeros(m));
    let mut u: Vec<f64> = (0..problem.segments).flat_map(|_| u0.iter().copied()).collect();
    // break the symmetry of purely transverse targets
    for (k, v) in u.iter_mut().enumerate() {
        let seg = (k / m) as f64 / problem.segments as f64;
        *v += 0.1 * (2.0 * std::f64::consts::PI * seg + (k % m) as f64).sin();
    }
    let mut rho = opts.direct_rho_start;
    let mut buf = vec![0.0; n];
    loop {
        u = bfgs(&problem, rho, u, 200);
        if rho >= opts.direct_rho_end {
            break;
        }
        rho = (rho * 10.0).min(opts.direct_rho_end);
    }
    if !problem.endpoint(&u, &mut buf) {
        return None;
    }
    let endpoint_error = buf.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let energy = problem.energy(&u);
    let covector_guess = problem.covector_fit(&u);
    Some(DirectSolution { energy, endpoint_error, covector_guess })
}
