//! Non-negative least squares via the Lawson-Hanson active-set method.
//!
//! Solves `min ||A x - b||` subject to `x >= 0`. The passive-set subproblems
//! are solved with a column-pivoted QR; the whole procedure is deterministic
//! for a fixed input.

use nalgebra::{DMatrix, DVector};

/// Relative tolerance on the scaled dual (normal-equation residual).
pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 500;

#[derive(Debug, Clone)]
pub struct NnlsSolution {
    pub x: DVector<f64>,
    /// Final residual norm squared, `||A x - b||^2`.
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum NnlsError {
    #[error("empty problem: {rows} rows x {cols} cols")]
    EmptyProblem { rows: usize, cols: usize },
    #[error("no convergence after {0} iterations")]
    NoConvergence(usize),
}

pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<NnlsSolution, NnlsError> {
    nnls_with(a, b, DEFAULT_TOL, DEFAULT_MAX_ITER)
}

pub fn nnls_with(
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<NnlsSolution, NnlsError> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(NnlsError::EmptyProblem { rows: m, cols: n });
    }

    let mut x = DVector::<f64>::zeros(n);
    let mut passive = vec![false; n];
    // Scale for the dual tolerance: w = A^T (b - A x) has magnitude up to
    // ||A||_col * ||b||.
    let col_norm_max = (0..n)
        .map(|j| a.column(j).norm())
        .fold(0.0_f64, f64::max);
    let dual_scale = (col_norm_max * b.norm()).max(f64::MIN_POSITIVE);

    let mut iterations = 0usize;

    loop {
        let residual = b - a * &x;
        let w = a.transpose() * &residual;

        // Most positive dual among active (zero) coordinates; ties broken by
        // lowest index for determinism.
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if !passive[j] {
                let wj = w[j];
                if wj > tol * dual_scale && best.map_or(true, |(_, bw)| wj > bw) {
                    best = Some((j, wj));
                }
            }
        }
        let Some((enter, _)) = best else {
            let objective = residual.norm_squared();
            return Ok(NnlsSolution {
                x,
                objective,
                iterations,
            });
        };
        passive[enter] = true;

        // Inner loop: solve on the passive set, walk back along the segment
        // from x while any passive coordinate would go non-positive.
        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(NnlsError::NoConvergence(max_iter));
            }
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let z = solve_passive(a, b, &idx);

            let min_z = idx
                .iter()
                .zip(z.iter())
                .map(|(_, &zj)| zj)
                .fold(f64::INFINITY, f64::min);
            if min_z > 0.0 {
                let mut new_x = DVector::<f64>::zeros(n);
                for (k, &j) in idx.iter().enumerate() {
                    new_x[j] = z[k];
                }
                x = new_x;
                break;
            }

            // Step length to the first coordinate hitting zero.
            let mut alpha = f64::INFINITY;
            for (k, &j) in idx.iter().enumerate() {
                if z[k] <= 0.0 {
                    let step = x[j] / (x[j] - z[k]);
                    if step < alpha {
                        alpha = step;
                    }
                }
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (z[k] - x[j]);
            }
            let clamp = 1e-12 * x.amax().max(1.0);
            for &j in &idx {
                if x[j] <= clamp {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                // Degenerate step removed everything, including the entering
                // variable; treat it as converged at the boundary.
                let residual = b - a * &x;
                return Ok(NnlsSolution {
                    objective: residual.norm_squared(),
                    x,
                    iterations,
                });
            }
        }
    }
}

/// Unconstrained least squares restricted to the `idx` columns of `a`.
fn solve_passive(a: &DMatrix<f64>, b: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    let m = a.nrows();
    let mut sub = DMatrix::<f64>::zeros(m, idx.len());
    for (k, &j) in idx.iter().enumerate() {
        sub.set_column(k, &a.column(j));
    }
    let svd = sub.svd(true, true);
    svd.solve(b, 1e-14 * svd.singular_values.max().max(1.0))
        .expect("svd solve with u/v computed")
}
