//! Control frames: chart-level vector fields `f_1..f_m` spanning a distribution,
//! plus the bracket algebra needed for Hörmander and Martinet-set tests.
//!
//! Every frame lives on a single global chart `R^n`. Indices are zero-based
//! throughout the crate (`f_1` of the usual notation is field `0` here).
//!
//! The ambient metric is taken Euclidean in the chart. It only enters through
//! chart norms used for tolerances; the sub-Riemannian quantities depend on the
//! frame alone (the frame is treated as orthonormal on the distribution).

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// Step used for central-difference jacobians when a frame has no analytic one.
pub const JACOBIAN_STEP: f64 = 1e-5;

/// Default relative tolerance for numerical rank decisions.
pub const RANK_TOL: f64 = 1e-8;

/// Names of the compiled catalog frames.
pub const CATALOG: [&str; 4] = ["heisenberg", "martinet", "two_generating_r4", "rank2_dim4"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FrameError {
    #[error("unknown frame `{0}` (known: heisenberg, martinet, two_generating_r4, rank2_dim4)")]
    UnknownFrame(String),
    #[error("field index {index} out of range for a rank-{rank} frame")]
    IndexOutOfRange { index: usize, rank: usize },
    #[error("expected a point of dimension {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// A point of the chart `R^n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct Point(pub DVector<f64>);

/// A covector at some base point, in the chart dual basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<f64>", into = "Vec<f64>")]
pub struct Covector(pub DVector<f64>);

macro_rules! chart_vector {
    ($name:ident) => {
        impl $name {
            pub fn new(coords: &[f64]) -> Self {
                Self(DVector::from_column_slice(coords))
            }

            pub fn zeros(n: usize) -> Self {
                Self(DVector::zeros(n))
            }

            pub fn dim(&self) -> usize {
                self.0.len()
            }

            pub fn as_slice(&self) -> &[f64] {
                self.0.as_slice()
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }

            pub fn norm(&self) -> f64 {
                self.0.norm()
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(v: Vec<f64>) -> Self {
                Self(DVector::from_vec(v))
            }
        }

        impl From<$name> for Vec<f64> {
            fn from(v: $name) -> Self {
                v.0.as_slice().to_vec()
            }
        }

        impl From<DVector<f64>> for $name {
            fn from(v: DVector<f64>) -> Self {
                Self(v)
            }
        }
    };
}

chart_vector!(Point);
chart_vector!(Covector);

impl Covector {
    /// Pairing `p(v)`.
    pub fn pair(&self, v: &DVector<f64>) -> f64 {
        self.0.dot(v)
    }
}

/// The vector fields of a frame, written against raw slices so the
/// integrators can run without allocating.
///
/// This is the extension point for frames outside the catalog: implement
/// `field` (and `field_jacobian` when an analytic derivative is known) and
/// wrap the value with [`ControlFrame::new`].
pub trait VectorFields: Send + Sync {
    fn dim(&self) -> usize;
    fn rank(&self) -> usize;

    /// Writes `f_i(x)` into `out` (length `n`).
    fn field(&self, i: usize, x: &[f64], out: &mut [f64]);

    /// Writes the derivative of `f_i` at `x`, row-major:
    /// `out[r * n + c] = d f_i^r / d x_c`.
    fn field_jacobian(&self, i: usize, x: &[f64], out: &mut [f64]) {
        let n = self.dim();
        let mut xp = x.to_vec();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        for c in 0..n {
            let h = JACOBIAN_STEP * (1.0 + x[c].abs());
            xp[c] = x[c] + h;
            self.field(i, &xp, &mut fp);
            xp[c] = x[c] - h;
            self.field(i, &xp, &mut fm);
            xp[c] = x[c];
            for r in 0..n {
                out[r * n + c] = (fp[r] - fm[r]) / (2.0 * h);
            }
        }
    }

    /// Closed-form Hamiltonian vector field `dz = [dH/dp, -dH/dx]` at
    /// `z = [x, p]`. Returns false when not provided, in which case callers
    /// assemble it from `field` and `field_jacobian`.
    fn hamiltonian_rhs(&self, _z: &[f64], _dz: &mut [f64]) -> bool {
        false
    }
}

/// An immutable, cheaply clonable control frame.
#[derive(Clone)]
pub struct ControlFrame {
    name: String,
    fields: Arc<dyn VectorFields>,
}

impl fmt::Debug for ControlFrame {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlFrame")
            .field("name", &self.name)
            .field("n", &self.dim())
            .field("m", &self.rank())
            .finish()
    }
}

/// Serializable description of a frame, emitted alongside reports.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct FrameDescription {
    pub name: String,
    pub n: usize,
    pub m: usize,
    pub metric: String,
    pub test_lattice: Vec<Vec<f64>>,
}

impl ControlFrame {
    pub fn new(name: impl Into<String>, fields: Arc<dyn VectorFields>) -> Self {
        let frame = Self { name: name.into(), fields };
        assert!(frame.rank() >= 1 && frame.rank() < frame.dim(), "frame rank must satisfy 1 <= m < n");
        frame
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.fields.dim()
    }

    pub fn rank(&self) -> usize {
        self.fields.rank()
    }

    pub fn fields(&self) -> &dyn VectorFields {
        self.fields.as_ref()
    }

    fn check_index(&self, i: usize) -> Result<(), FrameError> {
        if i >= self.rank() {
            return Err(FrameError::IndexOutOfRange { index: i, rank: self.rank() });
        }
        Ok(())
    }

    pub(crate) fn check_point(&self, x: &[f64]) -> Result<(), FrameError> {
        if x.len() != self.dim() {
            return Err(FrameError::DimensionMismatch { expected: self.dim(), got: x.len() });
        }
        Ok(())
    }

    /// Value of field `i` at `x`.
    pub fn eval(&self, i: usize, x: &Point) -> Result<DVector<f64>, FrameError> {
        self.check_index(i)?;
        self.check_point(x.as_slice())?;
        let mut out = DVector::zeros(self.dim());
        self.fields.field(i, x.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    /// Derivative matrix of field `i` at `x`.
    pub fn jacobian(&self, i: usize, x: &Point) -> Result<DMatrix<f64>, FrameError> {
        self.check_index(i)?;
        self.check_point(x.as_slice())?;
        let n = self.dim();
        let mut buf = vec![0.0; n * n];
        self.fields.field_jacobian(i, x.as_slice(), &mut buf);
        Ok(DMatrix::from_row_slice(n, n, &buf))
    }

    /// The `n x m` matrix `[f_1(x) .. f_m(x)]`.
    pub fn frame_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let (n, m) = (self.dim(), self.rank());
        let mut mat = DMatrix::zeros(n, m);
        let mut buf = vec![0.0; n];
        for i in 0..m {
            self.fields.field(i, x, &mut buf);
            mat.column_mut(i).copy_from_slice(&buf);
        }
        mat
    }

    /// Lie bracket `[f_i, f_j](x) = Df_j(x) f_i(x) - Df_i(x) f_j(x)`.
    pub fn lie_bracket(&self, i: usize, j: usize, x: &Point) -> Result<DVector<f64>, FrameError> {
        self.check_index(i)?;
        self.check_index(j)?;
        self.check_point(x.as_slice())?;
        Ok(self.bracket_word(&[i, j], x.as_slice()))
    }

    /// Evaluates the right-nested bracket `[f_{w0}, [f_{w1}, ... f_{wk}]]` at `x`.
    ///
    /// Derivatives of single fields are analytic (or the frame's own
    /// fallback); derivatives of brackets are central differences.
    pub fn bracket_word(&self, word: &[usize], x: &[f64]) -> DVector<f64> {
        let n = self.dim();
        let mut out = vec![0.0; n];
        match word {
            [] => DVector::zeros(n),
            [i] => {
                self.fields.field(*i, x, &mut out);
                DVector::from_vec(out)
            }
            [i, rest @ ..] => {
                let inner = self.bracket_word(rest, x);
                let d_inner = self.word_jacobian(rest, x);
                let mut fi = vec![0.0; n];
                self.fields.field(*i, x, &mut fi);
                let fi = DVector::from_vec(fi);
                let mut jac = vec![0.0; n * n];
                self.fields.field_jacobian(*i, x, &mut jac);
                let d_fi = DMatrix::from_row_slice(n, n, &jac);
                d_inner * fi - d_fi * inner
            }
        }
    }

    fn word_jacobian(&self, word: &[usize], x: &[f64]) -> DMatrix<f64> {
        let n = self.dim();
        if let [i] = word {
            let mut jac = vec![0.0; n * n];
            self.fields.field_jacobian(*i, x, &mut jac);
            return DMatrix::from_row_slice(n, n, &jac);
        }
        let mut d = DMatrix::zeros(n, n);
        let mut xp = x.to_vec();
        for c in 0..n {
            let h = JACOBIAN_STEP * (1.0 + x[c].abs());
            xp[c] = x[c] + h;
            let fp = self.bracket_word(word, &xp);
            xp[c] = x[c] - h;
            let fm = self.bracket_word(word, &xp);
            xp[c] = x[c];
            d.set_column(c, &((fp - fm) / (2.0 * h)));
        }
        d
    }

    /// Columns: every right-nested bracket of length `<= depth` at `x`.
    pub fn bracket_matrix(&self, x: &[f64], depth: usize) -> DMatrix<f64> {
        let m = self.rank();
        let mut columns: Vec<DVector<f64>> = Vec::new();
        let mut words: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
        for len in 1..=depth.max(1) {
            if len > 1 {
                words = words
                    .iter()
                    .flat_map(|w| {
                        (0..m).filter(move |&i| w.len() > 1 || i != w[0]).map(move |i| {
                            let mut next = vec![i];
                            next.extend_from_slice(w);
                            next
                        })
                    })
                    .collect();
            }
            columns.extend(words.iter().map(|w| self.bracket_word(w, x)));
        }
        DMatrix::from_columns(&columns)
    }

    /// Numerical rank of the span of all brackets of length `<= depth` at `x`;
    /// singular values at or below `tol * sigma_max` count as zero.
    pub fn bracket_span_rank(&self, x: &Point, depth: usize, tol: f64) -> usize {
        linalg::numerical_rank(&self.bracket_matrix(x.as_slice(), depth), tol)
    }

    /// True iff `Delta + [Delta, Delta]` fails to span `T_x M`.
    pub fn martinet_set_membership(&self, x: &Point, tol: f64) -> bool {
        let m = self.rank();
        let mut columns: Vec<DVector<f64>> = (0..m).map(|i| self.bracket_word(&[i], x.as_slice())).collect();
        for i in 0..m {
            for j in (i + 1)..m {
                columns.push(self.bracket_word(&[i, j], x.as_slice()));
            }
        }
        linalg::numerical_rank(&DMatrix::from_columns(&columns), tol) < self.dim()
    }

    /// All `[f_i, f_j](x)` with `i < j`.
    pub fn first_brackets(&self, x: &[f64]) -> Vec<DVector<f64>> {
        let m = self.rank();
        let mut out = Vec::with_capacity(m * (m - 1) / 2);
        for i in 0..m {
            for j in (i + 1)..m {
                out.push(self.bracket_word(&[i, j], x));
            }
        }
        out
    }

    /// The lattice `{-1, -1/2, 0, 1/2, 1}^n` used for structural self-checks.
    pub fn test_lattice(&self) -> Vec<Point> {
        lattice(self.dim(), 5, 1.0)
    }

    pub fn describe(&self) -> FrameDescription {
        FrameDescription {
            name: self.name.clone(),
            n: self.dim(),
            m: self.rank(),
            metric: "euclidean chart metric; frame orthonormal on the distribution".into(),
            test_lattice: self.test_lattice().into_iter().map(Vec::from).collect(),
        }
    }
}

/// Regular lattice with `per_axis` nodes on `[-half_width, half_width]^n`.
pub fn lattice(n: usize, per_axis: usize, half_width: f64) -> Vec<Point> {
    let nodes: Vec<f64> = (0..per_axis)
        .map(|k| {
            if per_axis == 1 {
                0.0
            } else {
                -half_width + 2.0 * half_width * k as f64 / (per_axis - 1) as f64
            }
        })
        .collect();
    let total = per_axis.pow(n as u32);
    (0..total)
        .map(|mut idx| {
            let mut coords = vec![0.0; n];
            for c in coords.iter_mut() {
                *c = nodes[idx % per_axis];
                idx /= per_axis;
            }
            Point::from(coords)
        })
        .collect()
}

/// Looks up a catalog frame by identifier.
pub fn catalog(name: &str) -> Result<ControlFrame, FrameError> {
    let fields: Arc<dyn VectorFields> = match name {
        "heisenberg" => Arc::new(Heisenberg),
        "martinet" => Arc::new(Martinet),
        "two_generating_r4" => Arc::new(TwoGeneratingR4),
        "rank2_dim4" => Arc::new(Rank2Dim4),
        other => return Err(FrameError::UnknownFrame(other.to_string())),
    };
    Ok(ControlFrame::new(name, fields))
}

/// `f_1 = d1`, `f_2 = d2 + x1 d3` on `R^3`.
#[derive(Debug, Clone, Copy)]
pub struct Heisenberg;

impl VectorFields for Heisenberg {
    fn dim(&self) -> usize {
        3
    }
    fn rank(&self) -> usize {
        2
    }
    fn field(&self, i: usize, x: &[f64], out: &mut [f64]) {
        match i {
            0 => out.copy_from_slice(&[1.0, 0.0, 0.0]),
            _ => out.copy_from_slice(&[0.0, 1.0, x[0]]),
        }
    }
    fn field_jacobian(&self, i: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if i == 1 {
            out[2 * 3] = 1.0;
        }
    }
    fn hamiltonian_rhs(&self, z: &[f64], dz: &mut [f64]) -> bool {
        let (x, p) = z.split_at(3);
        let (u0, u1) = (p[0], p[1] + x[0] * p[2]);
        dz.copy_from_slice(&[u0, u1, x[0] * u1, -u1 * p[2], 0.0, 0.0]);
        true
    }
}

/// `f_1 = d1`, `f_2 = d2 + x1^2 d3` on `R^3`.
#[derive(Debug, Clone, Copy)]
pub struct Martinet;

impl VectorFields for Martinet {
    fn dim(&self) -> usize {
        3
    }
    fn rank(&self) -> usize {
        2
    }
    fn field(&self, i: usize, x: &[f64], out: &mut [f64]) {
        match i {
            0 => out.copy_from_slice(&[1.0, 0.0, 0.0]),
            _ => out.copy_from_slice(&[0.0, 1.0, x[0] * x[0]]),
        }
    }
    fn field_jacobian(&self, i: usize, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if i == 1 {
            out[2 * 3] = 2.0 * x[0];
        }
    }
    fn hamiltonian_rhs(&self, z: &[f64], dz: &mut [f64]) -> bool {
        let (x, p) = z.split_at(3);
        let (u0, u1) = (p[0], p[1] + x[0] * x[0] * p[2]);
        dz.copy_from_slice(&[u0, u1, x[0] * x[0] * u1, -2.0 * x[0] * u1 * p[2], 0.0, 0.0]);
        true
    }
}

/// `f_1 = d1`, `f_2 = d2`, `f_3 = d3 + x1 d4` on `R^4`.
#[derive(Debug, Clone, Copy)]
pub struct TwoGeneratingR4;

impl VectorFields for TwoGeneratingR4 {
    fn dim(&self) -> usize {
        4
    }
    fn rank(&self) -> usize {
        3
    }
    fn field(&self, i: usize, x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        out[i] = 1.0;
        if i == 2 {
            out[3] = x[0];
        }
    }
    fn field_jacobian(&self, i: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if i == 2 {
            out[3 * 4] = 1.0;
        }
    }
    fn hamiltonian_rhs(&self, z: &[f64], dz: &mut [f64]) -> bool {
        let (x, p) = z.split_at(4);
        let u2 = p[2] + x[0] * p[3];
        dz.copy_from_slice(&[p[0], p[1], u2, x[0] * u2, -u2 * p[3], 0.0, 0.0, 0.0]);
        true
    }
}

/// `f_1 = d1`, `f_2 = d2 + x1 d3 + x3 d4` on `R^4`.
#[derive(Debug, Clone, Copy)]
pub struct Rank2Dim4;

impl VectorFields for Rank2Dim4 {
    fn dim(&self) -> usize {
        4
    }
    fn rank(&self) -> usize {
        2
    }
    fn field(&self, i: usize, x: &[f64], out: &mut [f64]) {
        match i {
            0 => out.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]),
            _ => out.copy_from_slice(&[0.0, 1.0, x[0], x[2]]),
        }
    }
    fn field_jacobian(&self, i: usize, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        if i == 1 {
            out[2 * 4] = 1.0;
            out[3 * 4 + 2] = 1.0;
        }
    }
    fn hamiltonian_rhs(&self, z: &[f64], dz: &mut [f64]) -> bool {
        let (x, p) = z.split_at(4);
        let u1 = p[1] + x[0] * p[2] + x[2] * p[3];
        dz.copy_from_slice(&[p[0], u1, x[0] * u1, x[2] * u1, -u1 * p[2], 0.0, -u1 * p[3], 0.0]);
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Bracket oracle built only from `field`, by nested central differences.
    fn fd_bracket(frame: &ControlFrame, i: usize, j: usize, x: &[f64]) -> Vec<f64> {
        let n = frame.dim();
        let h = 1e-4;
        let eval = |k: usize, y: &[f64]| {
            let mut out = vec![0.0; n];
            frame.fields().field(k, y, &mut out);
            out
        };
        // D f_k(x) v ~ (f_k(x + h v) - f_k(x - h v)) / 2h
        let dir = |k: usize, v: &[f64]| {
            let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
            let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
            let (fp, fm) = (eval(k, &xp), eval(k, &xm));
            fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>()
        };
        let a = dir(j, &eval(i, x));
        let b = dir(i, &eval(j, x));
        a.iter().zip(&b).map(|(p, q)| p - q).collect()
    }

    #[test]
    fn catalog_field_values() {
        let h = catalog("heisenberg").unwrap();
        assert_eq!(h.eval(1, &Point::new(&[1.0, 0.0, 0.0])).unwrap().as_slice(), &[0.0, 1.0, 1.0]);
        assert_eq!(h.eval(0, &Point::new(&[3.0, -2.0, 5.0])).unwrap().as_slice(), &[1.0, 0.0, 0.0]);
        let m = catalog("martinet").unwrap();
        assert_eq!(m.eval(1, &Point::new(&[0.0, 5.0, 7.0])).unwrap().as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn unknown_frame_is_an_error() {
        assert_eq!(catalog("engel").unwrap_err(), FrameError::UnknownFrame("engel".into()));
    }

    #[test]
    fn index_out_of_range() {
        let h = catalog("heisenberg").unwrap();
        let x = Point::zeros(3);
        assert!(matches!(h.lie_bracket(0, 2, &x), Err(FrameError::IndexOutOfRange { index: 2, rank: 2 })));
        assert!(matches!(h.eval(5, &x), Err(FrameError::IndexOutOfRange { .. })));
    }

    #[test]
    fn brackets_match_difference_oracle() {
        // frozen from fd_bracket: heisenberg [f1,f2] = (0,0,1), martinet at (1,0,0) = (0,0,2)
        let h = catalog("heisenberg").unwrap();
        for x in [[0.0, 0.0, 0.0], [0.3, -1.2, 4.0]] {
            let b = h.lie_bracket(0, 1, &Point::new(&x)).unwrap();
            assert_abs_diff_eq!(b.as_slice(), &[0.0, 0.0, 1.0][..], epsilon = 1e-12);
            let oracle = fd_bracket(&h, 0, 1, &x);
            assert_abs_diff_eq!(b.as_slice(), &oracle[..], epsilon = 1e-8);
        }
        let m = catalog("martinet").unwrap();
        let b = m.lie_bracket(0, 1, &Point::new(&[1.0, 0.0, 0.0])).unwrap();
        assert_abs_diff_eq!(b.as_slice(), &[0.0, 0.0, 2.0][..], epsilon = 1e-12);
        assert_abs_diff_eq!(b.as_slice(), &fd_bracket(&m, 0, 1, &[1.0, 0.0, 0.0])[..], epsilon = 1e-7);
    }

    #[test]
    fn analytic_jacobians_agree_with_differences() {
        for name in CATALOG {
            let frame = catalog(name).unwrap();
            let n = frame.dim();
            for x in lattice(n, 3, 0.7) {
                for i in 0..frame.rank() {
                    let analytic = frame.jacobian(i, &x).unwrap();
                    let mut fd = vec![0.0; n * n];
                    // the default trait method is the central-difference fallback
                    struct Plain<'a>(&'a dyn VectorFields);
                    impl VectorFields for Plain<'_> {
                        fn dim(&self) -> usize {
                            self.0.dim()
                        }
                        fn rank(&self) -> usize {
                            self.0.rank()
                        }
                        fn field(&self, i: usize, x: &[f64], out: &mut [f64]) {
                            self.0.field(i, x, out)
                        }
                    }
                    Plain(frame.fields()).field_jacobian(i, x.as_slice(), &mut fd);
                    let fd = DMatrix::from_row_slice(n, n, &fd);
                    assert!((analytic - fd).amax() < 1e-8, "{name} field {i}");
                }
            }
        }
    }

    #[test]
    fn self_bracket_vanishes() {
        for name in CATALOG {
            let frame = catalog(name).unwrap();
            for x in lattice(frame.dim(), 3, 1.0) {
                for i in 0..frame.rank() {
                    assert_eq!(frame.lie_bracket(i, i, &x).unwrap().amax(), 0.0);
                }
            }
        }
    }

    #[test]
    fn span_rank_examples() {
        let h = catalog("heisenberg").unwrap();
        assert_eq!(h.bracket_span_rank(&Point::zeros(3), 2, RANK_TOL), 3);
        let m = catalog("martinet").unwrap();
        assert_eq!(m.bracket_span_rank(&Point::zeros(3), 1, RANK_TOL), 2);
        assert_eq!(m.bracket_span_rank(&Point::zeros(3), 2, RANK_TOL), 2);
        assert_eq!(m.bracket_span_rank(&Point::zeros(3), 3, RANK_TOL), 3);
        // [f1,[f1,f2]] = (0,0,2) on the Martinet frame
        let w = m.bracket_word(&[0, 0, 1], &[0.0, 0.4, -1.0]);
        assert_abs_diff_eq!(w.as_slice(), &[0.0, 0.0, 2.0][..], epsilon = 1e-6);
    }

    #[test]
    fn hormander_certificate_on_test_lattice() {
        for name in CATALOG {
            let frame = catalog(name).unwrap();
            for x in frame.test_lattice() {
                assert_eq!(frame.bracket_span_rank(&x, 3, RANK_TOL), frame.dim(), "{name} at {:?}", x.as_slice());
            }
        }
    }

    #[test]
    fn frames_have_full_rank_on_lattice() {
        for name in CATALOG {
            let frame = catalog(name).unwrap();
            for x in frame.test_lattice() {
                assert_eq!(linalg::numerical_rank(&frame.frame_matrix(x.as_slice()), RANK_TOL), frame.rank());
            }
        }
    }

    #[test]
    fn martinet_membership() {
        let m = catalog("martinet").unwrap();
        assert!(m.martinet_set_membership(&Point::new(&[0.0, 2.0, -1.0]), RANK_TOL));
        assert!(!m.martinet_set_membership(&Point::new(&[0.5, 0.0, 0.0]), RANK_TOL));
        for x in lattice(3, 9, 1.0) {
            assert_eq!(m.martinet_set_membership(&x, RANK_TOL), x.as_slice()[0] == 0.0);
        }
        let h = catalog("heisenberg").unwrap();
        assert!(lattice(3, 9, 1.0).iter().all(|x| !h.martinet_set_membership(x, RANK_TOL)));
    }

    #[test]
    fn description_lists_lattice() {
        let d = catalog("rank2_dim4").unwrap().describe();
        assert_eq!((d.n, d.m), (4, 2));
        assert_eq!(d.test_lattice.len(), 625);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn bracket_antisymmetry(idx in 0usize..4, x in proptest::collection::vec(-2.0f64..2.0, 4)) {
                let frame = catalog(CATALOG[idx]).unwrap();
                let p = Point::new(&x[..frame.dim()]);
                for i in 0..frame.rank() {
                    for j in 0..frame.rank() {
                        let a = frame.lie_bracket(i, j, &p).unwrap();
                        let b = frame.lie_bracket(j, i, &p).unwrap();
                        prop_assert!((a + b).amax() < 1e-9);
                    }
                }
            }
        }
    }
}
