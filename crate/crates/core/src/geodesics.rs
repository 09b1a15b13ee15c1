//! Normal extremals, the exponential map, and length/energy of horizontal paths.
//!
//! The Hamiltonian is `H(x, p) = 1/2 sum_i (p . f_i(x))^2`. Normal extremals
//! solve `x' = dH/dp`, `p' = -dH/dx` and are integrated with fixed-step RK4 on
//! `[0, 1]`. The controls `u_i = p . f_i(x)` are stored next to the states.

use serde::Serialize;
use thiserror::Error;

use crate::frames::{ControlFrame, Covector, FrameError, Point, VectorFields};

pub const DEFAULT_STEPS: usize = 1000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeodesicError {
    #[error("trajectory became non-finite at t = {t}")]
    NonFinite { t: f64 },
    #[error("step count must be at least 1")]
    InvalidSteps,
    #[error("control grid and control samples disagree: {0}")]
    InvalidPath(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
}

/// Reusable RK4 scratch space for a state of fixed dimension.
pub(crate) struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    pub(crate) fn new(dim: usize) -> Self {
        Self { k1: vec![0.0; dim], k2: vec![0.0; dim], k3: vec![0.0; dim], k4: vec![0.0; dim], tmp: vec![0.0; dim] }
    }

    /// One classical RK4 step of `y' = f(t, y)` in place.
    #[inline]
    pub(crate) fn step<F: FnMut(f64, &[f64], &mut [f64])>(&mut self, f: &mut F, t: f64, h: f64, y: &mut [f64]) {
        let Self { k1, k2, k3, k4, tmp } = self;
        f(t, y, k1);
        for ((o, a), b) in tmp.iter_mut().zip(y.iter()).zip(k1.iter()) {
            *o = a + 0.5 * h * b;
        }
        f(t + 0.5 * h, tmp, k2);
        for ((o, a), b) in tmp.iter_mut().zip(y.iter()).zip(k2.iter()) {
            *o = a + 0.5 * h * b;
        }
        f(t + 0.5 * h, tmp, k3);
        for ((o, a), b) in tmp.iter_mut().zip(y.iter()).zip(k3.iter()) {
            *o = a + h * b;
        }
        f(t + h, tmp, k4);
        for (i, v) in y.iter_mut().enumerate() {
            *v += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// Evaluates the Hamiltonian vector field without allocating.
pub(crate) struct HamiltonianField<'a> {
    fields: &'a dyn VectorFields,
    n: usize,
    m: usize,
    f: Vec<f64>,
    jac: Vec<f64>,
}

impl<'a> HamiltonianField<'a> {
    pub(crate) fn new(fields: &'a dyn VectorFields) -> Self {
        let (n, m) = (fields.dim(), fields.rank());
        Self { fields, n, m, f: vec![0.0; n], jac: vec![0.0; n * n] }
    }

    /// `z = [x, p]`, writes `dz = [dH/dp, -dH/dx]`. The jacobian route gives
    /// `dH/dx_k = sum_i (p . f_i)(p . d f_i / d x_k)`.
    #[inline]
    pub(crate) fn rhs(&mut self, z: &[f64], dz: &mut [f64]) {
        if self.fields.hamiltonian_rhs(z, dz) {
            return;
        }
        self.generic_rhs(z, dz);
    }

    pub(crate) fn generic_rhs(&mut self, z: &[f64], dz: &mut [f64]) {
        let n = self.n;
        let (x, p) = z.split_at(n);
        let (dx, dp) = dz.split_at_mut(n);
        dx.fill(0.0);
        dp.fill(0.0);
        for i in 0..self.m {
            self.fields.field(i, x, &mut self.f);
            let u: f64 = p.iter().zip(&self.f).map(|(a, b)| a * b).sum();
            if u == 0.0 {
                continue;
            }
            for (d, fv) in dx.iter_mut().zip(&self.f) {
                *d += u * fv;
            }
            self.fields.field_jacobian(i, x, &mut self.jac);
            for r in 0..n {
                let pr = p[r];
                if pr == 0.0 {
                    continue;
                }
                let row = &self.jac[r * n..(r + 1) * n];
                for (d, j) in dp.iter_mut().zip(row) {
                    *d -= u * pr * j;
                }
            }
        }
    }

    pub(crate) fn controls(&mut self, x: &[f64], p: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            self.fields.field(i, x, &mut self.f);
            *o = p.iter().zip(&self.f).map(|(a, b)| a * b).sum();
        }
    }
}

/// Integrates normal extremals repeatedly with shared buffers.
pub(crate) struct ExtremalIntegrator<'a> {
    field: HamiltonianField<'a>,
    rk: Rk4,
    z: Vec<f64>,
}

impl<'a> ExtremalIntegrator<'a> {
    pub(crate) fn new(frame: &'a ControlFrame) -> Self {
        let n = frame.dim();
        Self { field: HamiltonianField::new(frame.fields()), rk: Rk4::new(2 * n), z: vec![0.0; 2 * n] }
    }

    /// Flows `(x0, p0)` over `[0, horizon]` in `steps` RK4 steps, calling
    /// `observe(k, t, z)` at every node (including `k = 0`). Returns false on
    /// blow-up.
    pub(crate) fn run<O: FnMut(usize, f64, &[f64])>(
        &mut self,
        x0: &[f64],
        p0: &[f64],
        horizon: f64,
        steps: usize,
        mut observe: O,
    ) -> bool {
        let n = x0.len();
        self.z[..n].copy_from_slice(x0);
        self.z[n..].copy_from_slice(p0);
        observe(0, 0.0, &self.z);
        let h = horizon / steps as f64;
        // fixed-size state for the common dimensions lets the compiler unroll RK4
        match 2 * n {
            6 => return run_fixed::<6, O>(&mut self.field, &mut self.z, h, steps, observe),
            8 => return run_fixed::<8, O>(&mut self.field, &mut self.z, h, steps, observe),
            _ => {}
        }
        let field = &mut self.field;
        let mut rhs = |_t: f64, z: &[f64], dz: &mut [f64]| field.rhs(z, dz);
        for k in 0..steps {
            let t = k as f64 * h;
            self.rk.step(&mut rhs, t, h, &mut self.z);
            if !self.z.iter().all(|v| v.is_finite()) {
                return false;
            }
            observe(k + 1, (k + 1) as f64 * h, &self.z);
        }
        true
    }

    /// Endpoint of the flow on `[0, 1]`, written into `out`.
    pub(crate) fn endpoint(&mut self, x0: &[f64], p0: &[f64], steps: usize, out: &mut [f64]) -> bool {
        let n = x0.len();
        let ok = self.run(x0, p0, 1.0, steps, |_, _, _| {});
        out.copy_from_slice(&self.z[..n]);
        ok
    }

    /// Endpoint and midpoint (time 1/2) of the flow on `[0, 1]`; `steps` must be even.
    pub(crate) fn endpoint_and_midpoint(
        &mut self,
        x0: &[f64],
        p0: &[f64],
        steps: usize,
        end: &mut [f64],
        mid: &mut [f64],
    ) -> bool {
        let n = x0.len();
        let half = steps / 2;
        let ok = self.run(x0, p0, 1.0, steps, |k, _, z| {
            if k == half {
                mid.copy_from_slice(&z[..n]);
            }
        });
        end.copy_from_slice(&self.z[..n]);
        ok
    }
}

fn run_fixed<const D: usize, O: FnMut(usize, f64, &[f64])>(
    field: &mut HamiltonianField<'_>,
    z: &mut [f64],
    h: f64,
    steps: usize,
    mut observe: O,
) -> bool {
    let mut y = [0.0; D];
    y.copy_from_slice(z);
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = ([0.0; D], [0.0; D], [0.0; D], [0.0; D], [0.0; D]);
    let mut ok = true;
    for k in 0..steps {
        field.rhs(&y, &mut k1);
        for i in 0..D {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        field.rhs(&tmp, &mut k2);
        for i in 0..D {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        field.rhs(&tmp, &mut k3);
        for i in 0..D {
            tmp[i] = y[i] + h * k3[i];
        }
        field.rhs(&tmp, &mut k4);
        for i in 0..D {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !y.iter().all(|v| v.is_finite()) {
            ok = false;
            break;
        }
        observe(k + 1, (k + 1) as f64 * h, &y);
    }
    z.copy_from_slice(&y);
    ok
}

/// `H(x, p) = 1/2 sum_i (p . f_i(x))^2`.
pub fn hamiltonian(frame: &ControlFrame, x: &Point, p: &Covector) -> f64 {
    hamiltonian_raw(frame.fields(), x.as_slice(), p.as_slice())
}

pub(crate) fn hamiltonian_raw(fields: &dyn VectorFields, x: &[f64], p: &[f64]) -> f64 {
    let mut f = vec![0.0; x.len()];
    (0..fields.rank())
        .map(|i| {
            fields.field(i, x, &mut f);
            let u: f64 = p.iter().zip(&f).map(|(a, b)| a * b).sum();
            0.5 * u * u
        })
        .sum()
}

/// A discretized normal extremal `t -> (x(t), p(t))` with its controls.
#[derive(Clone, Debug, Serialize)]
pub struct NormalExtremal {
    #[serde(skip)]
    pub frame: Option<ControlFrame>,
    pub grid: Vec<f64>,
    pub xs: Vec<Vec<f64>>,
    pub ps: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub hamiltonian: Vec<f64>,
}

impl NormalExtremal {
    pub fn start(&self) -> Point {
        Point::new(&self.xs[0])
    }

    pub fn end(&self) -> Point {
        Point::new(self.xs.last().expect("non-empty extremal"))
    }

    /// Largest relative deviation of `H` from its initial value.
    pub fn hamiltonian_drift(&self) -> f64 {
        let h0 = self.hamiltonian[0];
        self.hamiltonian.iter().map(|h| (h - h0).abs()).fold(0.0, f64::max) / h0.max(1e-12)
    }

    pub fn length_energy(&self) -> (f64, f64) {
        length_energy(&self.grid, &self.controls)
    }

    /// Point at time `t`, linearly interpolated between grid nodes.
    pub fn point_at(&self, t: f64) -> Point {
        let steps = self.grid.len() - 1;
        let s = (t.clamp(0.0, 1.0) * steps as f64).min(steps as f64);
        let k = (s.floor() as usize).min(steps.saturating_sub(1));
        let w = s - k as f64;
        let a = &self.xs[k];
        let b = &self.xs[(k + 1).min(steps)];
        Point::from(a.iter().zip(b).map(|(u, v)| u + w * (v - u)).collect::<Vec<_>>())
    }
}

/// RK4 integration of the normal extremal from `(x0, p0)` on `[0, 1]`.
pub fn flow_extremal(
    frame: &ControlFrame,
    x0: &Point,
    p0: &Covector,
    steps: usize,
) -> Result<NormalExtremal, GeodesicError> {
    if steps == 0 {
        return Err(GeodesicError::InvalidSteps);
    }
    frame.check_point(x0.as_slice())?;
    frame.check_point(p0.as_slice())?;
    let (n, m) = (frame.dim(), frame.rank());
    let mut grid = Vec::with_capacity(steps + 1);
    let mut xs = Vec::with_capacity(steps + 1);
    let mut ps = Vec::with_capacity(steps + 1);
    let mut states: Vec<f64> = Vec::with_capacity(2 * n * (steps + 1));
    let mut integrator = ExtremalIntegrator::new(frame);
    let ok = integrator.run(x0.as_slice(), p0.as_slice(), 1.0, steps, |_, t, z| {
        grid.push(t);
        states.extend_from_slice(z);
    });
    if !ok {
        return Err(GeodesicError::NonFinite { t: grid.last().copied().unwrap_or(0.0) });
    }
    let mut field = HamiltonianField::new(frame.fields());
    let mut controls = Vec::with_capacity(steps + 1);
    let mut hamiltonian = Vec::with_capacity(steps + 1);
    for z in states.chunks_exact(2 * n) {
        let (x, p) = z.split_at(n);
        let mut u = vec![0.0; m];
        field.controls(x, p, &mut u);
        hamiltonian.push(0.5 * u.iter().map(|v| v * v).sum::<f64>());
        controls.push(u);
        xs.push(x.to_vec());
        ps.push(p.to_vec());
    }
    // pin the last node exactly at 1
    if let Some(last) = grid.last_mut() {
        *last = 1.0;
    }
    Ok(NormalExtremal { frame: Some(frame.clone()), grid, xs, ps, controls, hamiltonian })
}

/// `exp_x(p)`: endpoint of the normal extremal at time 1.
pub fn exp_map(frame: &ControlFrame, x0: &Point, p0: &Covector) -> Result<Point, GeodesicError> {
    exp_map_with_steps(frame, x0, p0, DEFAULT_STEPS)
}

pub fn exp_map_with_steps(
    frame: &ControlFrame,
    x0: &Point,
    p0: &Covector,
    steps: usize,
) -> Result<Point, GeodesicError> {
    if steps == 0 {
        return Err(GeodesicError::InvalidSteps);
    }
    frame.check_point(x0.as_slice())?;
    frame.check_point(p0.as_slice())?;
    let mut out = vec![0.0; frame.dim()];
    let mut integrator = ExtremalIntegrator::new(frame);
    if !integrator.endpoint(x0.as_slice(), p0.as_slice(), steps, &mut out) {
        return Err(GeodesicError::NonFinite { t: 1.0 });
    }
    Ok(Point::from(out))
}

/// `(length, energy) = (int |u| dt, int |u|^2 dt)` by the composite trapezoid rule.
pub fn length_energy(grid: &[f64], controls: &[Vec<f64>]) -> (f64, f64) {
    let speed: Vec<f64> = controls.iter().map(|u| u.iter().map(|v| v * v).sum::<f64>()).collect();
    let mut length = 0.0;
    let mut energy = 0.0;
    for k in 1..grid.len() {
        let dt = grid[k] - grid[k - 1];
        length += 0.5 * dt * (speed[k - 1].sqrt() + speed[k].sqrt());
        energy += 0.5 * dt * (speed[k - 1] + speed[k]);
    }
    (length, energy)
}

/// A horizontal path given by its controls on a grid of `[0, 1]` and a start
/// point; the trajectory solves `x' = sum_i u_i(t) f_i(x)` with controls
/// interpolated linearly between nodes.
#[derive(Clone, Debug)]
pub struct HorizontalPath {
    pub frame: ControlFrame,
    pub grid: Vec<f64>,
    pub controls: Vec<Vec<f64>>,
    pub start: Point,
    pub xs: Vec<Vec<f64>>,
}

impl HorizontalPath {
    pub fn new(
        frame: &ControlFrame,
        start: Point,
        grid: Vec<f64>,
        controls: Vec<Vec<f64>>,
    ) -> Result<Self, GeodesicError> {
        frame.check_point(start.as_slice())?;
        if grid.len() < 2 || grid.len() != controls.len() {
            return Err(GeodesicError::InvalidPath(format!(
                "{} grid nodes, {} control samples",
                grid.len(),
                controls.len()
            )));
        }
        if controls.iter().any(|u| u.len() != frame.rank()) {
            return Err(GeodesicError::InvalidPath(format!("controls must have {} components", frame.rank())));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GeodesicError::InvalidPath("grid must be strictly increasing".into()));
        }
        let xs = integrate_controls(frame, start.as_slice(), &grid, &controls)?;
        Ok(Self { frame: frame.clone(), grid, controls, start, xs })
    }

    /// Constant controls on a uniform grid with `steps` intervals.
    pub fn constant_control(
        frame: &ControlFrame,
        start: Point,
        control: &[f64],
        steps: usize,
    ) -> Result<Self, GeodesicError> {
        if steps == 0 {
            return Err(GeodesicError::InvalidSteps);
        }
        let grid = uniform_grid(steps);
        let controls = vec![control.to_vec(); steps + 1];
        Self::new(frame, start, grid, controls)
    }

    pub fn end(&self) -> Point {
        Point::new(self.xs.last().expect("non-empty path"))
    }

    pub fn length_energy(&self) -> (f64, f64) {
        length_energy(&self.grid, &self.controls)
    }

    pub fn is_constant(&self) -> bool {
        self.controls.iter().all(|u| u.iter().all(|v| *v == 0.0))
    }

    /// Control interpolated linearly between nodes `k` and `k + 1`.
    pub(crate) fn control_between(&self, k: usize, w: f64, out: &mut [f64]) {
        let (a, b) = (&self.controls[k], &self.controls[k + 1]);
        for (o, (u, v)) in out.iter_mut().zip(a.iter().zip(b)) {
            *o = u + w * (v - u);
        }
    }

    /// Largest chart residual of `x' - sum u_i f_i(x)` at interval midpoints,
    /// estimated from the stored nodes.
    pub fn horizontality_residual(&self) -> f64 {
        let n = self.frame.dim();
        let mut worst: f64 = 0.0;
        let mut u = vec![0.0; self.frame.rank()];
        let mut f = vec![0.0; n];
        for k in 0..self.grid.len() - 1 {
            let dt = self.grid[k + 1] - self.grid[k];
            let mid: Vec<f64> = self.xs[k].iter().zip(&self.xs[k + 1]).map(|(a, b)| 0.5 * (a + b)).collect();
            self.control_between(k, 0.5, &mut u);
            let mut v = vec![0.0; n];
            for (i, ui) in u.iter().enumerate() {
                self.frame.fields().field(i, &mid, &mut f);
                for (vv, fv) in v.iter_mut().zip(&f) {
                    *vv += ui * fv;
                }
            }
            for c in 0..n {
                let xdot = (self.xs[k + 1][c] - self.xs[k][c]) / dt;
                worst = worst.max((xdot - v[c]).abs());
            }
        }
        worst
    }
}

pub fn uniform_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|k| k as f64 / steps as f64).collect()
}

fn integrate_controls(
    frame: &ControlFrame,
    x0: &[f64],
    grid: &[f64],
    controls: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>, GeodesicError> {
    let (n, m) = (frame.dim(), frame.rank());
    let fields = frame.fields();
    let mut f = vec![0.0; n];
    let mut u = vec![0.0; m];
    let mut rk = Rk4::new(n);
    let mut x = x0.to_vec();
    let mut xs = Vec::with_capacity(grid.len());
    xs.push(x.clone());
    for k in 0..grid.len() - 1 {
        let (t0, h) = (grid[k], grid[k + 1] - grid[k]);
        let (ua, ub) = (&controls[k], &controls[k + 1]);
        let mut rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
            let w = (t - t0) / h;
            for (o, (a, b)) in u.iter_mut().zip(ua.iter().zip(ub)) {
                *o = a + w * (b - a);
            }
            dy.fill(0.0);
            for (i, ui) in u.iter().enumerate() {
                fields.field(i, y, &mut f);
                for (d, fv) in dy.iter_mut().zip(&f) {
                    *d += ui * fv;
                }
            }
        };
        rk.step(&mut rhs, t0, h, &mut x);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(GeodesicError::NonFinite { t: grid[k + 1] });
        }
        xs.push(x.clone());
    }
    Ok(xs)
}
