#![allow(dead_code)]

use std::f64::consts::PI;

/// Closed-form Heisenberg distance from `x` to `y` for the frame
/// `e1, e2 + x1 e3`: left-translate `y` to the origin, then solve for the
/// rotation angle of the circular-arc geodesic by bisection.
pub fn heisenberg_distance(x: &[f64], y: &[f64]) -> f64 {
    let d = [y[0] - x[0], y[1] - x[1], y[2] - x[2] - x[0] * (y[1] - x[1])];
    let r = d[0].hypot(d[1]);
    let a = (d[2] - d[0] * d[1] / 2.0).abs();
    if a < 1e-15 {
        return r;
    }
    if r < 1e-15 {
        return (4.0 * PI * a).sqrt();
    }
    let g = |t: f64| (t - t.sin()) / (8.0 * (t / 2.0).sin().powi(2)) - a / (r * r);
    let (mut lo, mut hi) = (1e-9, 2.0 * PI - 1e-12);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    t * r / (2.0 * (t / 2.0).sin())
}

/// `two_generating_r4` is Heisenberg on `(x1, x3, x4)` times a line in `x2`.
pub fn two_generating_distance(x: &[f64], y: &[f64]) -> f64 {
    let h = heisenberg_distance(&[x[0], x[2], x[3]], &[y[0], y[2], y[3]]);
    h.hypot(y[1] - x[1])
}
