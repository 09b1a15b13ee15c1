//! Transportation simplex on the bipartite network rows -> columns.
//!
//! The basis is a spanning tree of the `n + m` nodes with `n + m - 1` cells.
//! Potentials come from the tree (MODI), the entering cell is the first cell
//! with negative reduced cost and ties on the leaving side go to the lowest
//! cell index (Bland), which rules out cycling on degenerate bases.

use nalgebra::DMatrix;

pub(crate) struct Solution {
    /// Row-major `n x m` flows.
    pub flow: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub pivots: usize,
}

#[derive(Debug, thiserror::Error)]
pub(crate) enum SimplexError {
    #[error("no optimal basis after {0} pivots")]
    PivotLimit(usize),
    #[error("basis is not a spanning tree")]
    BrokenTree,
}

struct Tree {
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl Tree {
    /// Nodes `0..n` are rows, `n..n+m` columns; edges carry the basis slot.
    fn new(n: usize, m: usize, basis: &[(usize, usize)]) -> Self {
        let mut adjacency = vec![Vec::new(); n + m];
        for (slot, &(i, j)) in basis.iter().enumerate() {
            adjacency[i].push((n + j, slot));
            adjacency[n + j].push((i, slot));
        }
        Self { adjacency }
    }

    /// Parent links `(parent node, basis slot)` of a traversal from `root`,
    /// and the nodes in visiting order.
    fn parents(&self, root: usize) -> (Vec<Option<(usize, usize)>>, Vec<usize>) {
        let mut parent = vec![None; self.adjacency.len()];
        let mut seen = vec![false; self.adjacency.len()];
        let mut order = Vec::with_capacity(self.adjacency.len());
        let mut stack = vec![root];
        seen[root] = true;
        while let Some(node) = stack.pop() {
            order.push(node);
            for &(next, slot) in &self.adjacency[node] {
                if !seen[next] {
                    seen[next] = true;
                    parent[next] = Some((node, slot));
                    stack.push(next);
                }
            }
        }
        (parent, order)
    }
}

fn northwest_corner(supply: &[f64], demand: &[f64], flow: &mut [f64]) -> Vec<(usize, usize)> {
    let (n, m) = (supply.len(), demand.len());
    let (mut a, mut b) = (supply.to_vec(), demand.to_vec());
    let (mut i, mut j) = (0, 0);
    let mut basis = Vec::with_capacity(n + m - 1);
    loop {
        let q = a[i].min(b[j]).max(0.0);
        flow[i * m + j] = q;
        a[i] -= q;
        b[j] -= q;
        basis.push((i, j));
        if i == n - 1 && j == m - 1 {
            break;
        }
        if i == n - 1 {
            j += 1;
        } else if j == m - 1 || a[i] <= b[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    basis
}

fn potentials(n: usize, m: usize, basis: &[(usize, usize)], cost: &DMatrix<f64>) -> Result<(Vec<f64>, Vec<f64>), SimplexError> {
    let (parent, order) = Tree::new(n, m, basis).parents(0);
    let mut u = vec![f64::NAN; n];
    let mut v = vec![f64::NAN; m];
    u[0] = 0.0;
    if order.len() != n + m {
        return Err(SimplexError::BrokenTree);
    }
    for &node in order.iter().skip(1) {
        let (par, slot) = parent[node].ok_or(SimplexError::BrokenTree)?;
        let (i, j) = basis[slot];
        if node < n {
            u[node] = cost[(i, j)] - v[par - n];
        } else {
            v[node - n] = cost[(i, j)] - u[par];
        }
    }
    Ok((u, v))
}

/// Minimizes `sum C_ij x_ij` over `x >= 0` with row sums `supply` and column
/// sums `demand`. The two totals must agree.
pub(crate) fn solve(supply: &[f64], demand: &[f64], cost: &DMatrix<f64>) -> Result<Solution, SimplexError> {
    let (n, m) = (supply.len(), demand.len());
    let mut flow = vec![0.0; n * m];
    let mut basis = northwest_corner(supply, demand, &mut flow);
    let mut in_basis = vec![false; n * m];
    for &(i, j) in &basis {
        in_basis[i * m + j] = true;
    }
    let scale = cost.iter().fold(0.0_f64, |a, c| a.max(c.abs()));
    let eps = 1e-13 * (1.0 + scale);
    let limit = 50 * (n * m + n + m) + 1000;
    let mut pivots = 0;
    loop {
        let (u, v) = potentials(n, m, &basis, cost)?;
        let entering = (0..n * m).find(|&k| !in_basis[k] && cost[(k / m, k % m)] - u[k / m] - v[k % m] < -eps);
        let Some(k) = entering else {
            return Ok(Solution { flow, u, v, pivots });
        };
        if pivots >= limit {
            return Err(SimplexError::PivotLimit(pivots));
        }
        pivots += 1;
        let (ei, ej) = (k / m, k % m);
        // tree path from row ei to column ej; its edges alternate -, +, -, ...
        let (parent, _) = Tree::new(n, m, &basis).parents(ei);
        let mut path_slots = Vec::new();
        let mut node = n + ej;
        while node != ei {
            let (par, slot) = parent[node].ok_or(SimplexError::BrokenTree)?;
            path_slots.push(slot);
            node = par;
        }
        path_slots.reverse();
        let minus: Vec<usize> = path_slots.iter().step_by(2).copied().collect();
        let plus: Vec<usize> = path_slots.iter().skip(1).step_by(2).copied().collect();
        let cell = |slot: usize| {
            let (i, j) = basis[slot];
            i * m + j
        };
        let theta = minus.iter().map(|&s| flow[cell(s)]).fold(f64::INFINITY, f64::min);
        let leaving = *minus
            .iter()
            .filter(|&&s| flow[cell(s)] <= theta)
            .min_by_key(|&&s| cell(s))
            .ok_or(SimplexError::BrokenTree)?;
        for &s in &minus {
            let c = cell(s);
            flow[c] = if s == leaving { 0.0 } else { (flow[c] - theta).max(0.0) };
        }
        for &s in &plus {
            flow[cell(s)] += theta;
        }
        flow[k] = theta;
        in_basis[cell(leaving)] = false;
        in_basis[k] = true;
        basis[leaving] = (ei, ej);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn northwest_corner_builds_a_spanning_tree() {
        let mut flow = vec![0.0; 9];
        let basis = northwest_corner(&[0.5, 0.25, 0.25], &[0.25, 0.5, 0.25], &mut flow);
        assert_eq!(basis.len(), 5);
        assert!(potentials(3, 3, &basis, &DMatrix::zeros(3, 3)).is_ok());
        let rows: Vec<f64> = (0..3).map(|i| flow[i * 3..i * 3 + 3].iter().sum()).collect();
        assert_eq!(rows, vec![0.5, 0.25, 0.25]);
    }

    #[test]
    fn degenerate_equal_weights_terminate() {
        // all-equal costs and equal weights: maximally degenerate
        let n = 7;
        let w = vec![1.0 / n as f64; n];
        let sol = solve(&w, &w, &DMatrix::from_element(n, n, 1.0)).unwrap();
        assert_eq!(sol.pivots, 0);
        let anti = DMatrix::from_fn(n, n, |i, j| if i + j == n - 1 { 0.0 } else { 1.0 });
        let sol = solve(&w, &w, &anti).unwrap();
        let cost: f64 = (0..n * n).map(|k| sol.flow[k] * anti[(k / n, k % n)]).sum();
        assert!(cost.abs() < 1e-15);
    }

    #[test]
    fn rectangular_problem() {
        let c = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0]);
        let sol = solve(&[0.6, 0.4], &[0.3, 0.3, 0.4], &c).unwrap();
        let cost: f64 = (0..6).map(|k| sol.flow[k] * c[(k / 3, k % 3)]).sum();
        // enumerate the two free flows of row 0; every vertex lies on this grid
        let mut best = f64::INFINITY;
        let steps = 60;
        for a in 0..=steps {
            for b in 0..=steps {
                let x00 = 0.3 * a as f64 / steps as f64;
                let x01 = 0.3 * b as f64 / steps as f64;
                let x02 = 0.6 - x00 - x01;
                if !(0.0..=0.4 + 1e-12).contains(&x02) {
                    continue;
                }
                let (x10, x11, x12) = (0.3 - x00, 0.3 - x01, 0.4 - x02);
                let val = x00 + 2.0 * x01 + 3.0 * x02 + 4.0 * x10 + x11 + 2.0 * x12;
                best = best.min(val);
            }
        }
        assert!((cost - best).abs() < 1e-12, "{cost} vs {best}");
    }
}
