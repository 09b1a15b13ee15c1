//! Covector shooting on `p -> exp_x(p) - y`.

use nalgebra::{DMatrix, DVector};

use crate::frames::ControlFrame;
use crate::geodesics::{hamiltonian_raw, ExtremalIntegrator};

use super::DistanceOptions;

/// A root of the shooting equation, polished at the fine step count.
#[derive(Clone, Debug)]
pub(crate) struct Root {
    pub p: Vec<f64>,
    pub energy: f64,
    pub endpoint_error: f64,
    pub midpoint: Vec<f64>,
}

/// Endpoint residual `exp_x(p) - y` with buffers kept between calls.
pub(crate) struct EndpointMap<'a> {
    frame: &'a ControlFrame,
    integrator: ExtremalIntegrator<'a>,
    x: &'a [f64],
    y: &'a [f64],
    end: Vec<f64>,
    mid: Vec<f64>,
    /// Inverse of the adapted basis at `y`; screening residuals are measured
    /// in its coordinates.
    metric_at_y: Option<DMatrix<f64>>,
    /// Total RK4 steps taken, for diagnostics.
    pub rk_steps: usize,
}

impl<'a> EndpointMap<'a> {
    pub(crate) fn new(frame: &'a ControlFrame, x: &'a [f64], y: &'a [f64]) -> Self {
        let n = x.len();
        let metric_at_y = adapted_basis(frame, y).and_then(|(b, _)| b.try_inverse());
        Self { frame, integrator: ExtremalIntegrator::new(frame), x, y, end: vec![0.0; n], mid: vec![0.0; n], metric_at_y, rk_steps: 0 }
    }

    pub(crate) fn target(&self) -> &'a [f64] {
        self.y
    }

    pub(crate) fn residual(&mut self, p: &[f64], steps: usize) -> Option<DVector<f64>> {
        self.rk_steps += steps;
        if !self.integrator.endpoint(self.x, p, steps, &mut self.end) {
            return None;
        }
        let r = DVector::from_iterator(self.end.len(), self.end.iter().zip(self.y).map(|(a, b)| a - b));
        r.iter().all(|v| v.is_finite()).then_some(r)
    }

    pub(crate) fn residual_and_midpoint(&mut self, p: &[f64], steps: usize) -> Option<(DVector<f64>, Vec<f64>)> {
        let steps = steps + steps % 2;
        self.rk_steps += steps;
        if !self.integrator.endpoint_and_midpoint(self.x, p, steps, &mut self.end, &mut self.mid) {
            return None;
        }
        let r = DVector::from_iterator(self.end.len(), self.end.iter().zip(self.y).map(|(a, b)| a - b));
        Some((r, self.mid.clone()))
    }

    /// Forward-difference jacobian of the endpoint map at `p`.
    pub(crate) fn jacobian(&mut self, p: &[f64], r0: &DVector<f64>, steps: usize) -> Option<DMatrix<f64>> {
        let n = p.len();
        let scale = p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        let mut jac = DMatrix::zeros(n, n);
        let mut q = p.to_vec();
        for k in 0..n {
            let eps = 1e-7 * scale;
            q[k] = p[k] + eps;
            let r = self.residual(&q, steps)?;
            q[k] = p[k];
            jac.set_column(k, &((r - r0) / eps));
        }
        Some(jac)
    }

    /// True when `det d_p exp_x(s p)` changes sign for some `s` in
    /// `[0.02, 0.999]`: the extremal then has an interior conjugate point and
    /// does not minimize past it.
    pub(crate) fn has_interior_conjugate_point(&mut self, p: &[f64], steps: usize) -> bool {
        let n = self.x.len();
        let record = |integrator: &mut ExtremalIntegrator<'_>, q: &[f64]| -> Option<Vec<f64>> {
            let mut traj = vec![0.0; (steps + 1) * n];
            integrator.run(self.x, q, 1.0, steps, |k, _, z| traj[k * n..(k + 1) * n].copy_from_slice(&z[..n])).then_some(traj)
        };
        self.rk_steps += (n + 1) * steps;
        let Some(base) = record(&mut self.integrator, p) else { return false };
        let eps = 1e-6 * p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
        let mut columns = Vec::with_capacity(n);
        let mut q = p.to_vec();
        for k in 0..n {
            q[k] = p[k] + eps;
            let Some(t) = record(&mut self.integrator, &q) else { return false };
            q[k] = p[k];
            columns.push(t);
        }
        let mut reference = 0.0;
        for k in 0..=steps {
            let s = k as f64 / steps as f64;
            if !(0.02..=0.999).contains(&s) {
                continue;
            }
            let jac = DMatrix::from_fn(n, n, |i, j| (columns[j][k * n + i] - base[k * n + i]) / eps);
            let scale: f64 = jac.column_iter().map(|c| c.norm()).product();
            if scale == 0.0 {
                continue;
            }
            let ratio = jac.determinant() / scale;
            if ratio.abs() < 1e-6 {
                continue;
            }
            if reference == 0.0 {
                reference = ratio.signum();
            } else if ratio.signum() != reference {
                return true;
            }
        }
        false
    }

    /// Integrates the ray `s -> exp_x(s d)` and, for each radius `r_k`,
    /// returns the point of the geometric bin `[r_k / sqrt(q), r_k sqrt(q)]`
    /// (`q` the ratio of consecutive radii) with the smallest endpoint
    /// residual, together with that residual.
    pub(crate) fn ray_residuals(&mut self, dir: &[f64], radii: &[f64], steps_per_unit: usize) -> Vec<(f64, f64)> {
        let n = self.x.len();
        let q = if radii.len() > 1 { (radii[1] / radii[0]).sqrt() } else { 2.0 };
        let r_max = radii.last().copied().unwrap_or(0.0) * q;
        let r_min = radii.first().copied().unwrap_or(0.0) / q;
        let total = ((r_max * steps_per_unit as f64).ceil() as usize).max(radii.len());
        let y = self.y;
        let mut out: Vec<(f64, f64)> = radii.iter().map(|&r| (r, f64::INFINITY)).collect();
        let metric = self.metric_at_y.as_ref();
        let mut diff = DVector::zeros(n);
        self.rk_steps += total;
        self.integrator.run(self.x, dir, r_max, total, |_, s, z| {
            if s < r_min {
                return;
            }
            for (d, (a, b)) in diff.iter_mut().zip(z[..n].iter().zip(y)) {
                *d = a - b;
            }
            let err = match metric {
                Some(m) => (m * &diff).norm(),
                None => diff.norm(),
            };
            let bin = radii.partition_point(|&r| r * q < s).min(radii.len() - 1);
            if err < out[bin].1 {
                out[bin] = (s, err);
            }
        });
        out
    }
}

/// Deterministic start directions: normalized integer vectors of growing
/// sup-norm, primitive ones only, ordered by sup-norm and then by number of
/// non-zeros. The first `3^n - 1` are the `{-1,0,1}^n` directions with the
/// axes first; more are taken from `{-2..2}^n` and so on when `count` asks.
pub(crate) fn start_directions(n: usize, count: usize) -> Vec<Vec<f64>> {
    fn gcd(a: i64, b: i64) -> i64 {
        if b == 0 { a.abs() } else { gcd(b, a % b) }
    }
    let mut out: Vec<Vec<f64>> = Vec::new();
    let mut k: i64 = 1;
    while out.len() < count {
        let side = (2 * k + 1) as usize;
        let mut shell: Vec<Vec<i64>> = Vec::new();
        for idx in 0..side.pow(n as u32) {
            let mut v = vec![0i64; n];
            let mut r = idx;
            for c in v.iter_mut() {
                *c = (r % side) as i64 - k;
                r /= side;
            }
            let sup = v.iter().map(|c| c.abs()).max().unwrap_or(0);
            let g = v.iter().fold(0, |g, &c| gcd(g, c));
            if sup == k && g == 1 {
                shell.push(v);
            }
        }
        shell.sort_by_key(|v| v.iter().filter(|&&c| c != 0).count());
        for v in shell {
            let norm = (v.iter().map(|c| (c * c) as f64).sum::<f64>()).sqrt();
            out.push(v.iter().map(|&c| c as f64 / norm).collect());
        }
        k += 1;
    }
    out.truncate(count);
    out
}

/// Tangent basis at `x` made of the frame fields followed by brackets of
/// length `<= 4`, taking a column only when its part orthogonal to the
/// previous ones has norm at least `0.1`, with the bracket length of each
/// column. `None` if no such basis exists.
pub(crate) fn adapted_basis(frame: &ControlFrame, x: &[f64]) -> Option<(DMatrix<f64>, Vec<usize>)> {
    let n = x.len();
    let m = frame.rank();
    let candidates = frame.bracket_matrix(x, 4);
    // bracket_matrix lists m words of length 1, m(m-1) of length 2, then m times more per length
    let mut lengths = vec![1; m];
    let mut count = m * (m - 1);
    for len in 2..=4 {
        lengths.extend(std::iter::repeat_n(len, count));
        count *= m;
    }
    let mut taken: Vec<DVector<f64>> = Vec::new();
    let mut degrees = Vec::new();
    let mut ortho: Vec<DVector<f64>> = Vec::new();
    for (col, &len) in candidates.column_iter().zip(&lengths) {
        let mut r = col.clone_owned();
        for q in &ortho {
            r -= q * q.dot(&r);
        }
        let norm = r.norm();
        if norm.is_finite() && norm >= 0.1 {
            ortho.push(r / norm);
            taken.push(col.clone_owned());
            degrees.push(len);
            if taken.len() == n {
                return Some((DMatrix::from_columns(&taken), degrees));
            }
        }
    }
    None
}

/// Unit chart covectors for the grid directions `q`, read as pairings with
/// the basis `B` of [`adapted_basis`] and weighted by `rho^(2 - degree)`,
/// where `rho` is the homogeneous size of `y - x` in that basis. On a Carnot
/// group this makes the screening invariant under left translations and
/// dilations. Falls back to the grid itself.
pub(crate) fn adapted_directions(frame: &ControlFrame, x: &[f64], y: &[f64], count: usize) -> Vec<Vec<f64>> {
    let grid = start_directions(x.len(), count);
    let Some((basis, degrees)) = adapted_basis(frame, x) else { return grid };
    let Some(inv) = basis.clone().try_inverse() else { return grid };
    let offset = &inv * DVector::from_iterator(x.len(), y.iter().zip(x).map(|(b, a)| b - a));
    let rho = offset.iter().zip(&degrees).map(|(c, &k)| c.abs().powf(1.0 / k as f64)).fold(0.0, f64::max);
    let rho = if rho > 0.0 && rho.is_finite() { rho } else { 1.0 };
    let inv_t = inv.transpose();
    grid.into_iter()
        .map(|q| {
            let q = DVector::from_iterator(q.len(), q.iter().zip(&degrees).map(|(v, &k)| v * rho.powi(2 - k as i32)));
            let p = &inv_t * q;
            (&p / p.norm()).iter().copied().collect()
        })
        .collect()
}

/// Geometric radii from `0.5 |y - x|` up to `max(8 |y - x|, floor)`.
pub(crate) fn radial_scales(separation: f64, count: usize, floor: f64) -> Vec<f64> {
    let lo = 0.5 * separation.max(1e-6);
    let hi = (8.0 * separation).max(floor).max(2.0 * lo);
    if count <= 1 {
        return vec![hi];
    }
    let ratio = (hi / lo).powf(1.0 / (count - 1) as f64);
    (0..count).map(|k| lo * ratio.powi(k as i32)).collect()
}

fn steps_for(p: &[f64], per_unit: usize, cap: usize) -> usize {
    let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
    ((per_unit as f64 * norm.max(1.0)).ceil() as usize).clamp(per_unit, cap.max(per_unit))
}

/// Outcome of a Levenberg-Marquardt run.
pub(crate) struct LmRun {
    pub p: Vec<f64>,
    pub norm: f64,
    /// Jacobian at the last accepted iterate.
    pub jacobian: Option<DMatrix<f64>>,
}

/// Levenberg-Marquardt on the endpoint map. Stops early once the residual
/// stalls, which is the common fate of starts outside every basin.
fn levenberg_marquardt(
    map: &mut EndpointMap<'_>,
    p0: &[f64],
    tol: f64,
    max_iter: usize,
    steps: impl Fn(&[f64]) -> usize,
) -> Option<LmRun> {
    let n = p0.len();
    let mut p = p0.to_vec();
    let mut s = steps(&p);
    let mut r = map.residual(&p, s)?;
    let mut norm = r.norm();
    let mut lambda = 1e-3;
    let mut iters = 0;
    let mut stalled = 0;
    let mut last_jac = None;
    while iters < max_iter && norm > tol {
        iters += 1;
        let jac = map.jacobian(&p, &r, s)?;
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &r;
        let diag_scale = (0..n).map(|i| jtj[(i, i)]).fold(0.0, f64::max).max(1e-12);
        let mut accepted = false;
        for _ in 0..12 {
            let mut a = jtj.clone();
            for i in 0..n {
                a[(i, i)] += lambda * (jtj[(i, i)] + 1e-12 * diag_scale);
            }
            let Some(mut delta) = a.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                continue;
            };
            // keep each step within a multiple of the current covector size
            let bound = 2.0 * p.iter().map(|v| v * v).sum::<f64>().sqrt().max(1.0);
            let len = delta.norm();
            if len > bound {
                delta *= bound / len;
            }
            let cand: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            let cs = steps(&cand);
            match map.residual(&cand, cs) {
                Some(rc) if rc.norm() < norm => {
                    let new_norm = rc.norm();
                    stalled = if new_norm > 0.9 * norm { stalled + 1 } else { 0 };
                    p = cand;
                    s = cs;
                    r = rc;
                    norm = new_norm;
                    lambda = (lambda / 10.0).max(1e-15);
                    accepted = true;
                    break;
                }
                _ => lambda *= 5.0,
            }
        }
        last_jac = Some(jac);
        if !accepted || stalled >= 6 {
            break;
        }
    }
    Some(LmRun { p, norm, jacobian: last_jac })
}

/// Search-resolution root of the shooting equation, before polishing.
pub(crate) struct Candidate {
    pub p: Vec<f64>,
    pub energy: f64,
    jacobian: Option<DMatrix<f64>>,
}

/// Runs Levenberg-Marquardt from `p0` at search resolution.
pub(crate) fn search_from(map: &mut EndpointMap<'_>, p0: &[f64], opts: &DistanceOptions) -> Option<Candidate> {
    let fine = opts.steps;
    let per_unit = opts.search_steps;
    // short targets need search roots accurate relative to their size
    let separation = map.x.iter().zip(map.y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let search_tol = (1e3 * opts.endpoint_tol).max(1e-7).min(1e-4 * separation).max(opts.endpoint_tol);
    let run = levenberg_marquardt(map, p0, search_tol, opts.max_iterations, |q| steps_for(q, per_unit, fine))?;
    if run.norm > search_tol {
        return None;
    }
    let energy = 2.0 * hamiltonian_raw(map.frame.fields(), map.x, &run.p);
    Some(Candidate { p: run.p, energy, jacobian: run.jacobian })
}

/// Polishes a candidate at the fine step count: chord Newton steps with the
/// search jacobian, then full Levenberg-Marquardt if those stall.
pub(crate) fn polish(map: &mut EndpointMap<'_>, cand: &Candidate, opts: &DistanceOptions) -> Option<Root> {
    let fine = opts.steps;
    let mut p = cand.p.clone();
    let mut r = map.residual(&p, fine)?;
    if let Some(lu) = cand.jacobian.clone().map(|j| j.lu()) {
        for _ in 0..8 {
            if r.norm() <= opts.endpoint_tol {
                break;
            }
            let Some(delta) = lu.solve(&(-&r)) else { break };
            let q: Vec<f64> = p.iter().zip(delta.iter()).map(|(a, b)| a + b).collect();
            match map.residual(&q, fine) {
                Some(rq) if rq.norm() < 0.5 * r.norm() => {
                    p = q;
                    r = rq;
                }
                _ => break,
            }
        }
    }
    if r.norm() > opts.endpoint_tol {
        let run = levenberg_marquardt(map, &p, opts.endpoint_tol, 20, |_| fine)?;
        if run.norm > opts.endpoint_tol {
            return None;
        }
        p = run.p;
    }
    let (r, midpoint) = map.residual_and_midpoint(&p, fine)?;
    let energy = 2.0 * hamiltonian_raw(map.frame.fields(), map.x, &p);
    Some(Root { endpoint_error: r.norm(), energy, midpoint, p })
}

/// Search followed by polish from a single start.
pub(crate) fn solve_from(map: &mut EndpointMap<'_>, p0: &[f64], opts: &DistanceOptions) -> Option<Root> {
    let cand = search_from(map, p0, opts)?;
    polish(map, &cand, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directions_in_three_dimensions() {
        let d = start_directions(3, 26);
        assert_eq!(d.len(), 26);
        assert!(d.iter().all(|v| (v.iter().map(|c| c * c).sum::<f64>() - 1.0).abs() < 1e-12));
        assert_eq!(d[0].iter().filter(|c| **c != 0.0).count(), 1);
        assert_eq!(start_directions(4, 26).len(), 26);
        let dense = start_directions(3, 98);
        assert_eq!(dense.len(), 98);
        for (i, a) in dense.iter().enumerate() {
            for b in &dense[..i] {
                let dot: f64 = a.iter().zip(b).map(|(u, v)| u * v).sum();
                assert!(dot < 1.0 - 1e-9);
            }
        }
    }

    #[test]
    fn radii_are_increasing() {
        let r = radial_scales(0.25, 6, 8.0);
        assert_eq!(r.len(), 6);
        assert!((r[0] - 0.125).abs() < 1e-12 && (r[5] - 8.0).abs() < 1e-9);
        assert!(r.windows(2).all(|w| w[1] > w[0]));
    }
}
