//! Singular (abnormal) paths: end-point map rank, abnormal lifts and the Goh
//! condition.
//!
//! Along a horizontal path with controls `u`, let `A(t) = sum_i u_i Df_i(x(t))`
//! and `Q(t)` the inverse of the flow derivative, `Q' = -Q A`, `Q(0) = I`.
//! Any adjoint solving `p' = -p A` is `p(t) = p(0) Q(t)`, so abnormal lifts are
//! the `p(0)` with `p(0) Q(t) f_i(x(t)) = 0` for all `t` and `i`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::frames::ControlFrame;
use crate::geodesics::{GeodesicError, HorizontalPath, Rk4};
use crate::linalg;

/// Singular values at or below this fraction of the largest count as zero
/// in the Gramian.
pub const GRAMIAN_TOL: f64 = 1e-7;

/// At most this many grid nodes enter the stacked annihilation constraints.
const CONSTRAINT_NODES: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SingularError {
    #[error("variational equation became non-finite at t = {t}")]
    NonFinite { t: f64 },
    #[error("classifier needs a rank-2 frame on R^3, got m = {m}, n = {n}")]
    WrongDimension { n: usize, m: usize },
    #[error(transparent)]
    Path(#[from] GeodesicError),
}

/// An abnormal lift of a horizontal path.
#[derive(Clone, Debug, Serialize)]
pub struct AbnormalCertificate {
    pub grid: Vec<f64>,
    /// The path's states at the grid nodes.
    pub xs: Vec<Vec<f64>>,
    /// `p(t_k)`, re-integrated from `p(0)` along the path.
    pub adjoint: Vec<Vec<f64>>,
    /// `max_k max_i |p(t_k) . f_i(x(t_k))| / |p(t_k)|`.
    pub residual: f64,
    /// Same with the brackets `[f_i, f_j]`; filled in by [`goh_test`].
    pub goh_residual: Option<f64>,
    /// `|p(1) - p(0) Q(1)| / |p(0)|`: re-integrated against transported adjoint.
    pub reintegration_error: f64,
}

impl AbnormalCertificate {
    pub fn initial_covector(&self) -> &[f64] {
        &self.adjoint[0]
    }
}

/// `x(t_k)` and `Q(t_k)` (row-major) at every grid node.
struct Variational {
    xs: Vec<Vec<f64>>,
    qs: Vec<Vec<f64>>,
}

fn variational(path: &HorizontalPath) -> Result<Variational, SingularError> {
    let frame = &path.frame;
    let (n, m) = (frame.dim(), frame.rank());
    let fields = frame.fields();
    let dim = n + n * n;
    let mut state = vec![0.0; dim];
    state[..n].copy_from_slice(path.start.as_slice());
    for r in 0..n {
        state[n + r * n + r] = 1.0;
    }
    let mut f = vec![0.0; n];
    let mut jac = vec![0.0; n * n];
    let mut u = vec![0.0; m];
    let mut rk = Rk4::new(dim);
    let split = |s: &[f64]| (s[..n].to_vec(), s[n..].to_vec());
    let (x0, q0) = split(&state);
    let mut out = Variational { xs: vec![x0], qs: vec![q0] };
    for k in 0..path.grid.len() - 1 {
        let (t0, h) = (path.grid[k], path.grid[k + 1] - path.grid[k]);
        let mut rhs = |t: f64, z: &[f64], dz: &mut [f64]| {
            path.control_between(k, (t - t0) / h, &mut u);
            let (xs, q) = z.split_at(n);
            let (dx, dq) = dz.split_at_mut(n);
            dx.fill(0.0);
            dq.fill(0.0);
            for (i, ui) in u.iter().enumerate() {
                if *ui == 0.0 {
                    continue;
                }
                fields.field(i, xs, &mut f);
                for (d, fv) in dx.iter_mut().zip(&f) {
                    *d += ui * fv;
                }
                fields.field_jacobian(i, xs, &mut jac);
                for r in 0..n {
                    for c in 0..n {
                        let acc: f64 = (0..n).map(|s| q[r * n + s] * jac[s * n + c]).sum();
                        dq[r * n + c] -= ui * acc;
                    }
                }
            }
        };
        rk.step(&mut rhs, t0, h, &mut state);
        if !state.iter().all(|v| v.is_finite()) {
            return Err(SingularError::NonFinite { t: path.grid[k + 1] });
        }
        let (x, q) = split(&state);
        out.xs.push(x);
        out.qs.push(q);
    }
    Ok(out)
}

fn q_matrix(q: &[f64], n: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, n, q)
}

fn gramian(path: &HorizontalPath, var: &Variational) -> DMatrix<f64> {
    let n = path.frame.dim();
    let mut inner = DMatrix::zeros(n, n);
    let weight = |k: usize| {
        let g = &path.grid;
        let left = if k > 0 { g[k] - g[k - 1] } else { 0.0 };
        let right = if k + 1 < g.len() { g[k + 1] - g[k] } else { 0.0 };
        0.5 * (left + right)
    };
    for k in 0..path.grid.len() {
        let b = q_matrix(&var.qs[k], n) * path.frame.frame_matrix(&var.xs[k]);
        inner += weight(k) * &b * b.transpose();
    }
    // G = Phi(1) W Phi(1)^T with Phi(1) = Q(1)^{-1}
    match q_matrix(var.qs.last().expect("non-empty"), n).try_inverse() {
        Some(phi) => &phi * inner * phi.transpose(),
        None => inner,
    }
}

/// Numerical rank of the controllability Gramian of the end-point map along
/// `path`; `rank < n` means the path is singular. `tol` is relative to the
/// largest singular value (see [`GRAMIAN_TOL`]).
pub fn endpoint_rank(frame: &ControlFrame, path: &HorizontalPath, tol: f64) -> Result<usize, SingularError> {
    let path = with_frame(frame, path)?;
    let var = variational(&path)?;
    Ok(linalg::numerical_rank(&gramian(&path, &var), tol))
}

/// The same controls read against `frame` (usually the path's own frame).
fn with_frame(frame: &ControlFrame, path: &HorizontalPath) -> Result<HorizontalPath, SingularError> {
    if frame.name() == path.frame.name() {
        return Ok(path.clone());
    }
    Ok(HorizontalPath::new(frame, path.start.clone(), path.grid.clone(), path.controls.clone())?)
}

fn constraint_nodes(len: usize) -> Vec<usize> {
    if len <= CONSTRAINT_NODES {
        return (0..len).collect();
    }
    let mut nodes: Vec<usize> = (0..CONSTRAINT_NODES).map(|j| j * (len - 1) / (CONSTRAINT_NODES - 1)).collect();
    nodes.dedup();
    nodes
}

/// Looks for an abnormal lift of `path`. Returns `None` when the end-point
/// map has full rank (the path is regular).
///
/// When the annihilator is more than one dimensional, the lift that best
/// annihilates the first brackets is chosen, so a Goh lift is found whenever
/// one exists.
pub fn abnormal_certificate(
    frame: &ControlFrame,
    path: &HorizontalPath,
) -> Result<Option<AbnormalCertificate>, SingularError> {
    let path = with_frame(frame, path)?;
    let n = frame.dim();
    let var = variational(&path)?;
    let rank = linalg::numerical_rank(&gramian(&path, &var), GRAMIAN_TOL);
    if rank == n {
        return Ok(None);
    }
    let nodes = constraint_nodes(path.grid.len());
    let transported = |k: usize, v: &DVector<f64>| q_matrix(&var.qs[k], n) * v;
    let mut rows: Vec<DVector<f64>> = Vec::new();
    for &k in &nodes {
        let fm = path.frame.frame_matrix(&var.xs[k]);
        for col in fm.column_iter() {
            rows.push(transported(k, &col.into_owned()));
        }
    }
    let stacked = DMatrix::from_fn(rows.len(), n, |r, c| rows[r][c]);
    let basis = smallest_right_vectors(&stacked, n - rank);
    let p0 = if basis.ncols() == 1 {
        basis.column(0).into_owned()
    } else {
        let mut goh_rows: Vec<DVector<f64>> = Vec::new();
        for &k in &nodes {
            for b in frame.first_brackets(&var.xs[k]) {
                goh_rows.push(basis.transpose() * transported(k, &b));
            }
        }
        if goh_rows.is_empty() {
            basis.column(0).into_owned()
        } else {
            let d = basis.ncols();
            let g = DMatrix::from_fn(goh_rows.len(), d, |r, c| goh_rows[r][c]);
            &basis * linalg::smallest_right_singular(&g).0
        }
    };
    let p0 = p0.normalize();

    let adjoint = integrate_adjoint(&path, p0.as_slice())?;
    let residual = (0..path.grid.len())
        .map(|k| annihilation(&path.frame.frame_matrix(&var.xs[k]).column_iter().map(|c| c.into_owned()).collect::<Vec<_>>(), &adjoint[k]))
        .fold(0.0, f64::max);
    let transported_end = q_matrix(var.qs.last().expect("non-empty"), n).transpose() * &p0;
    let p1 = DVector::from_column_slice(adjoint.last().expect("non-empty"));
    let reintegration_error = (p1 - transported_end).norm();
    Ok(Some(AbnormalCertificate {
        grid: path.grid.clone(),
        xs: var.xs,
        adjoint,
        residual,
        goh_residual: None,
        reintegration_error,
    }))
}

/// `max_v |p . v| / |p|`.
fn annihilation(vectors: &[DVector<f64>], p: &[f64]) -> f64 {
    let p = DVector::from_column_slice(p);
    let norm = p.norm();
    vectors.iter().map(|v| p.dot(v).abs() / norm).fold(0.0, f64::max)
}

/// The `count` right singular vectors of `a` with the smallest singular values.
fn smallest_right_vectors(a: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let n = a.ncols();
    let rows = a.nrows().max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("requested V^T");
    let sv = &svd.singular_values;
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&i, &j| sv[i].total_cmp(&sv[j]));
    let cols: Vec<DVector<f64>> = order.into_iter().take(count.max(1)).map(|k| v_t.row(k).transpose()).collect();
    DMatrix::from_columns(&cols)
}

/// Integrates `p' = -sum_i u_i p . Df_i(x)` along the path from `p0`, with the
/// path state carried alongside.
fn integrate_adjoint(path: &HorizontalPath, p0: &[f64]) -> Result<Vec<Vec<f64>>, SingularError> {
    let frame = &path.frame;
    let (n, m) = (frame.dim(), frame.rank());
    let fields = frame.fields();
    let mut z = path.start.as_slice().to_vec();
    z.extend_from_slice(p0);
    let mut f = vec![0.0; n];
    let mut jac = vec![0.0; n * n];
    let mut u = vec![0.0; m];
    let mut rk = Rk4::new(2 * n);
    let mut out = vec![p0.to_vec()];
    for k in 0..path.grid.len() - 1 {
        let (t0, h) = (path.grid[k], path.grid[k + 1] - path.grid[k]);
        let mut rhs = |t: f64, s: &[f64], ds: &mut [f64]| {
            path.control_between(k, (t - t0) / h, &mut u);
            let (x, p) = s.split_at(n);
            ds.fill(0.0);
            for (i, ui) in u.iter().enumerate() {
                fields.field(i, x, &mut f);
                fields.field_jacobian(i, x, &mut jac);
                for c in 0..n {
                    ds[c] += ui * f[c];
                    let pj: f64 = (0..n).map(|r| p[r] * jac[r * n + c]).sum();
                    ds[n + c] -= ui * pj;
                }
            }
        };
        rk.step(&mut rhs, t0, h, &mut z);
        if !z.iter().all(|v| v.is_finite()) {
            return Err(SingularError::NonFinite { t: path.grid[k + 1] });
        }
        out.push(z[n..].to_vec());
    }
    Ok(out)
}

/// `max_k max_{i<j} |p(t_k) . [f_i, f_j](x(t_k))| / |p(t_k)|`.
pub fn goh_residual(frame: &ControlFrame, certificate: &AbnormalCertificate) -> f64 {
    certificate
        .xs
        .iter()
        .zip(&certificate.adjoint)
        .map(|(x, p)| annihilation(&frame.first_brackets(x), p))
        .fold(0.0, f64::max)
}

/// True iff the abnormal lift also annihilates `[Delta, Delta]` along the whole
/// path (a Goh path). Records the residual on the certificate.
pub fn goh_test(frame: &ControlFrame, certificate: &mut AbnormalCertificate, tol: f64) -> bool {
    let r = goh_residual(frame, certificate);
    certificate.goh_residual = Some(r);
    r < tol
}

/// Rank-2 frames on `R^3`: a nontrivial path is singular iff it stays in the
/// Martinet set. Returns true iff every grid node is a Martinet point.
pub fn dim3_singular_classifier(frame: &ControlFrame, path: &HorizontalPath, tol: f64) -> Result<bool, SingularError> {
    if frame.dim() != 3 || frame.rank() != 2 {
        return Err(SingularError::WrongDimension { n: frame.dim(), m: frame.rank() });
    }
    let path = with_frame(frame, path)?;
    Ok(path.xs.iter().all(|x| frame.martinet_set_membership(&x.clone().into(), tol)))
}

/// Verdict bundle emitted by the CLI.
#[derive(Clone, Debug, Serialize)]
pub struct SingularReport {
    pub rank: usize,
    pub singular: bool,
    pub goh: Option<bool>,
    pub residual: Option<f64>,
    pub goh_residual: Option<f64>,
    pub reintegration_error: Option<f64>,
    pub covector: Option<Vec<f64>>,
    pub martinet_classifier: Option<bool>,
}

pub fn classify(frame: &ControlFrame, path: &HorizontalPath, tol: f64) -> Result<SingularReport, SingularError> {
    let rank = endpoint_rank(frame, path, GRAMIAN_TOL)?;
    let mut cert = abnormal_certificate(frame, path)?;
    let goh = cert.as_mut().map(|c| goh_test(frame, c, tol));
    let martinet_classifier = dim3_singular_classifier(frame, path, tol).ok();
    Ok(SingularReport {
        rank,
        singular: rank < frame.dim(),
        goh,
        residual: cert.as_ref().map(|c| c.residual),
        goh_residual: cert.as_ref().and_then(|c| c.goh_residual),
        reintegration_error: cert.as_ref().map(|c| c.reintegration_error),
        covector: cert.as_ref().map(|c| c.initial_covector().to_vec()),
        martinet_classifier,
    })
}
