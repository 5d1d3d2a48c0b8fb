//! 1D quadrature helpers: adaptive Simpson and graded-mesh midpoint rules.

use crate::error::{Error, Result};

/// Adaptive Simpson quadrature with relative tolerance.
pub fn adaptive_simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(a, b, fa, fm, fb);
    let scale = whole.abs().max(1e-300);
    recurse(f, a, b, fa, fm, fb, whole, rel_tol * scale, 60)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn recurse<F: Fn(f64) -> f64>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    abs_tol: f64,
    depth: u32,
) -> Result<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let err = left + right - whole;
    if err.abs() <= 15.0 * abs_tol || (b - a) < 1e-15 {
        return Ok(left + right + err / 15.0);
    }
    if depth == 0 {
        return Err(Error::Numerical(format!(
            "adaptive quadrature failed to converge on [{a}, {b}]"
        )));
    }
    let l = recurse(f, a, m, fa, flm, fm, left, 0.5 * abs_tol, depth - 1)?;
    let r = recurse(f, m, b, fm, frm, fb, right, 0.5 * abs_tol, depth - 1)?;
    Ok(l + r)
}

/// Midpoint rule on the graded mesh s_i = (i/cells)^p over (0, 1).
///
/// Suited to integrands with an integrable power singularity at zero.
pub fn graded_midpoint<F: Fn(f64) -> f64>(f: F, cells: usize, p: f64) -> f64 {
    let mut sum = 0.0;
    let inv = 1.0 / cells as f64;
    let mut lo = 0.0;
    for i in 0..cells {
        let hi = (((i + 1) as f64) * inv).powf(p);
        sum += f(0.5 * (lo + hi)) * (hi - lo);
        lo = hi;
    }
    sum
}

/// Trapezoid rule over uniformly spaced samples.
pub fn trapezoid_uniform(values: &[f64], dt: f64) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    dt * (0.5 * values[0] + inner + 0.5 * values[values.len() - 1])
}
