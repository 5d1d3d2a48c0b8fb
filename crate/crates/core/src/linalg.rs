//! Small fixed-size vector/matrix helpers for dimensions 1 and 2.
//!
//! All quantities are stored in `[f64; 2]` / `[[f64; 2]; 2]` buffers; only the
//! leading `n` components are meaningful. Unused components stay zero.

/// Spatial/velocity vector, components beyond the active dimension are zero.
pub type Vector = [f64; 2];
/// Square matrix, entries beyond the active dimension are zero.
pub type Matrix = [[f64; 2]; 2];
/// Rank-3 tensor (third directional moment).
pub type Tensor3 = [[[f64; 2]; 2]; 2];

pub const ZERO_VECTOR: Vector = [0.0; 2];
pub const ZERO_MATRIX: Matrix = [[0.0; 2]; 2];
pub const ZERO_TENSOR3: Tensor3 = [[[0.0; 2]; 2]; 2];

pub fn dot(n: usize, a: &Vector, b: &Vector) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(n: usize, a: &Vector) -> f64 {
    dot(n, a, a).sqrt()
}

pub fn scale(n: usize, a: &Vector, c: f64) -> Vector {
    let mut out = ZERO_VECTOR;
    for i in 0..n {
        out[i] = a[i] * c;
    }
    out
}

pub fn add(n: usize, a: &Vector, b: &Vector) -> Vector {
    let mut out = ZERO_VECTOR;
    for i in 0..n {
        out[i] = a[i] + b[i];
    }
    out
}

pub fn sub(n: usize, a: &Vector, b: &Vector) -> Vector {
    let mut out = ZERO_VECTOR;
    for i in 0..n {
        out[i] = a[i] - b[i];
    }
    out
}

pub fn matvec(n: usize, m: &Matrix, v: &Vector) -> Vector {
    let mut out = ZERO_VECTOR;
    for i in 0..n {
        for j in 0..n {
            out[i] += m[i][j] * v[j];
        }
    }
    out
}

pub fn outer(n: usize, a: &Vector, b: &Vector) -> Matrix {
    let mut out = ZERO_MATRIX;
    for i in 0..n {
        for j in 0..n {
            out[i][j] = a[i] * b[j];
        }
    }
    out
}

pub fn mat_add(n: usize, a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = ZERO_MATRIX;
    for i in 0..n {
        for j in 0..n {
            out[i][j] = a[i][j] + b[i][j];
        }
    }
    out
}

pub fn mat_sub(n: usize, a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = ZERO_MATRIX;
    for i in 0..n {
        for j in 0..n {
            out[i][j] = a[i][j] - b[i][j];
        }
    }
    out
}

pub fn mat_scale(n: usize, a: &Matrix, c: f64) -> Matrix {
    let mut out = ZERO_MATRIX;
    for i in 0..n {
        for j in 0..n {
            out[i][j] = a[i][j] * c;
        }
    }
    out
}

pub fn trace(n: usize, a: &Matrix) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        s += a[i][i];
    }
    s
}

pub fn max_abs_entry(n: usize, a: &Matrix) -> f64 {
    let mut m = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            m = m.max(a[i][j].abs());
        }
    }
    m
}

/// Eigenvalues of a symmetric matrix, ascending. Exact closed form.
pub fn sym_eigenvalues(n: usize, m: &Matrix) -> Vector {
    if n == 1 {
        return [m[0][0], 0.0];
    }
    let half_tr = 0.5 * (m[0][0] + m[1][1]);
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = (half_tr * half_tr - det).max(0.0).sqrt();
    [half_tr - disc, half_tr + disc]
}

/// Spectral norm estimate of `m` via power iteration on `m^T m`.
pub fn spectral_norm_power_iteration(n: usize, m: &Matrix, iterations: usize) -> f64 {
    // m^T m
    let mut mtm = ZERO_MATRIX;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                mtm[i][j] += m[k][i] * m[k][j];
            }
        }
    }
    let mut v = ZERO_VECTOR;
    for i in 0..n {
        // deterministic start with components on all axes
        v[i] = 1.0 + 0.1 * i as f64;
    }
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let w = matvec(n, &mtm, &v);
        let nrm = norm(n, &w);
        if nrm == 0.0 {
            return 0.0;
        }
        lambda = nrm;
        v = scale(n, &w, 1.0 / nrm);
    }
    lambda.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_eigenvalues_2x2() {
        let m = [[2.0, 1.0], [1.0, 2.0]];
        let ev = sym_eigenvalues(2, &m);
        assert!((ev[0] - 1.0).abs() < 1e-14);
        assert!((ev[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn power_iteration_matches_closed_form() {
        let m = [[0.8, 0.3], [0.1, 0.5]];
        let est = spectral_norm_power_iteration(2, &m, 200);
        // singular values from eigenvalues of m^T m
        let mtm = [
            [0.8 * 0.8 + 0.1 * 0.1, 0.8 * 0.3 + 0.1 * 0.5],
            [0.8 * 0.3 + 0.1 * 0.5, 0.3 * 0.3 + 0.5 * 0.5],
        ];
        let ev = sym_eigenvalues(2, &mtm);
        assert!((est - ev[1].sqrt()).abs() < 1e-10);
    }
}
