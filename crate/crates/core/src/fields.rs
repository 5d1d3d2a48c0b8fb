//! Centred finite differences for periodic node fields.

use crate::grid::XGrid;
use crate::linalg::{Matrix, Vector, ZERO_VECTOR};

/// Second-order centred first difference along axis `d`.
pub fn centered_diff_axis(xgrid: &XGrid, f: &[f64], d: usize) -> Vec<f64> {
    let h = xgrid.spacing();
    (0..xgrid.cells())
        .map(|idx| (f[xgrid.shift(idx, d, 1)] - f[xgrid.shift(idx, d, -1)]) / (2.0 * h))
        .collect()
}

/// Gradient of a scalar field.
pub fn centered_gradient(xgrid: &XGrid, f: &[f64]) -> Vec<Vector> {
    let h = xgrid.spacing();
    (0..xgrid.cells())
        .map(|idx| {
            let mut g = ZERO_VECTOR;
            for d in 0..xgrid.n {
                g[d] = (f[xgrid.shift(idx, d, 1)] - f[xgrid.shift(idx, d, -1)]) / (2.0 * h);
            }
            g
        })
        .collect()
}

/// Divergence of a vector field.
pub fn centered_divergence(xgrid: &XGrid, v: &[Vector]) -> Vec<f64> {
    let h = xgrid.spacing();
    (0..xgrid.cells())
        .map(|idx| {
            let mut s = 0.0;
            for d in 0..xgrid.n {
                s += (v[xgrid.shift(idx, d, 1)][d] - v[xgrid.shift(idx, d, -1)][d]) / (2.0 * h);
            }
            s
        })
        .collect()
}

/// Divergence of the matrix-vector product field x -> M(x) c(x),
/// i.e. components sum_j d_j (M_ij c).
pub fn centered_div_matrix_scalar(xgrid: &XGrid, m: &[Matrix], c: &[f64]) -> Vec<Vector> {
    let h = xgrid.spacing();
    (0..xgrid.cells())
        .map(|idx| {
            let mut out = ZERO_VECTOR;
            for i in 0..xgrid.n {
                for d in 0..xgrid.n {
                    let p = xgrid.shift(idx, d, 1);
                    let q = xgrid.shift(idx, d, -1);
                    out[i] += (m[p][i][d] * c[p] - m[q][i][d] * c[q]) / (2.0 * h);
                }
            }
            out
        })
        .collect()
}
