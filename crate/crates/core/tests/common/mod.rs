//! Helpers shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod gradchecks;

use misa::gradcore::{Graph, Matrix, Var};
use misa::seed::StreamRng;
use rand::{Rng, SeedableRng};

pub const FD_STEP: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;
/// Absolute floor so entries whose true gradient is ~0 compare sensibly.
pub const FD_ABS_FLOOR: f64 = 1e-7;

pub fn rng(seed: u64) -> StreamRng {
    StreamRng::seed_from_u64(seed)
}

pub fn uniform(n: usize, d: usize, lo: f64, hi: f64, seed: u64) -> Matrix {
    let mut r = rng(seed);
    Matrix::from_fn(n, d, |_, _| r.gen_range(lo..hi))
}

pub fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= FD_REL_TOL * analytic.abs().max(numeric.abs()) + FD_ABS_FLOOR
}

/// Worst mismatch between analytic and central-difference gradients of a
/// scalar function, as `(entry, analytic, numeric)`; `None` when all agree.
pub fn first_mismatch(analytic: &Matrix, mut numeric_at: impl FnMut(usize) -> f64) -> Option<(usize, f64, f64)> {
    (0..analytic.len())
        .map(|k| (k, analytic.as_slice()[k], numeric_at(k)))
        .find(|&(_, a, n)| !close(a, n))
}

/// Central difference of `f` at `x` along entry `k`.
pub fn central_diff(x: &Matrix, k: usize, f: &mut impl FnMut(&Matrix) -> f64) -> f64 {
    let mut plus = x.clone();
    plus.as_mut_slice()[k] += FD_STEP;
    let mut minus = x.clone();
    minus.as_mut_slice()[k] -= FD_STEP;
    (f(&plus) - f(&minus)) / (2.0 * FD_STEP)
}

/// Checks every input of a graph-built scalar function against finite
/// differences. `build` receives the graph and one leaf per input.
pub fn check_graph_fn(inputs: &[Matrix], build: impl Fn(&mut Graph, &[Var]) -> Var) -> Result<(), String> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|m| g.variable(m.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).map_err(|e| e.to_string())?;
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(x.rows(), x.cols()));
        let mut eval = |xi: &Matrix| {
            let mut g = Graph::new();
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(j, m)| g.constant(if j == i { xi.clone() } else { m.clone() }))
                .collect();
            let o = build(&mut g, &vs);
            g.value(o).get(0, 0)
        };
        if let Some((k, a, n)) = first_mismatch(&analytic, |k| central_diff(x, k, &mut eval)) {
            return Err(format!("input {i} entry {k}: analytic {a} vs numeric {n}"));
        }
    }
    Ok(())
}
