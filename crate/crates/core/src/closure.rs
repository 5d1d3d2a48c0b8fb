//! Equilibrium and first-order closures of the kinetic equation.
//!
//! The leading-order velocity profile is c0 = cbar0 * q * xi1(|v|) with
//! xi1(s) = n/(na - 1) (s^{1/a - n} - 1), vanishing at |v| = 1 and with the
//! logarithmic limit -(n/a) ln s at na = 1. The first-order correction is
//! assembled from four further radial weights obtained by integrating the
//! source terms along the backward velocity characteristics v(sigma) =
//! e^{-a sigma} v(0); they are tabulated here by adaptive quadrature after
//! substituting to the radial variable s = e^{-a sigma}.

use crate::environment::{Environment, ScalingParams};
use crate::error::{Error, Result};
use crate::fiber::FiberDistribution;
use crate::fields;
use crate::grid::{DirectionGrid, PhaseGrid, RadialGrid, XGrid};
use crate::linalg::{self, Matrix, Vector, ZERO_VECTOR};
use crate::quad;

/// Threshold below which na - 1 is treated as zero (removable singularity).
const NA_SWITCH: f64 = 1e-8;

/// Equilibrium radial profile xi1(s).
///
/// Errors on s <= 0: the profile is integrable against s^{n-1} ds but
/// pointwise singular at the origin whenever n > 1/a.
pub fn xi1(s: f64, a: f64, n: usize) -> Result<f64> {
    if !(s > 0.0) {
        return Err(Error::Numerical(format!(
            "xi1 is singular at radius {s}; only s > 0 is admissible"
        )));
    }
    let nf = n as f64;
    let na1 = nf * a - 1.0;
    if na1.abs() <= NA_SWITCH {
        Ok(-(nf / a) * s.ln())
    } else {
        Ok(nf / na1 * (s.powf(-nf + 1.0 / a) - 1.0))
    }
}

/// d xi1 / ds = -(n/a) s^{1/a - n - 1}; the same formula covers na = 1.
pub fn xi1_prime(s: f64, a: f64, n: usize) -> f64 {
    let nf = n as f64;
    -(nf / a) * s.powf(1.0 / a - nf - 1.0)
}

/// Radial closure integral int_0^1 s^{n-1+extra} xi1(s) ds by graded
/// midpoint quadrature. extra = 0 gives the mass consistency integral
/// (exactly 1), extra = 1 and 2 the first and second moment coefficients.
pub fn xi1_radial_integral(a: f64, n: usize, extra: i32, cells: usize) -> f64 {
    let p = RadialGrid::grading_power(a);
    quad::graded_midpoint(
        |s| s.powi(n as i32 - 1 + extra) * xi1(s, a, n).expect("s > 0"),
        cells,
        p,
    )
}

/// The five radial weights of the first-order closure, tabulated on a fixed
/// set of radial nodes.
///
/// Weights 2-5 multiply, respectively: the time derivative of the leading
/// density, the spatial divergence of the fiber-weighted flux, the angular
/// gradient of q, and the radial taxis forcing.
#[derive(Debug, Clone)]
pub struct ProfileSet {
    pub a: f64,
    pub n: usize,
    pub nodes: Vec<f64>,
    pub xi1: Vec<f64>,
    pub xi2: Vec<f64>,
    pub xi3: Vec<f64>,
    pub xi4: Vec<f64>,
    pub xi5: Vec<f64>,
}

impl ProfileSet {
    /// Tabulate on the given radial nodes with adaptive quadrature
    /// (relative tolerance 1e-8 per characteristic integral).
    pub fn tabulate(nodes: &[f64], a: f64, n: usize) -> Result<Self> {
        let nf = n as f64;
        let xi1_vals = nodes
            .iter()
            .map(|&s| xi1(s, a, n))
            .collect::<Result<Vec<f64>>>()?;
        // Each weight is (1/a) s^{-e} int_s^1 y^{e-1} G(y) dy with the
        // exponent e fixed by how the source term scales along
        // characteristics.
        let xi2 = weight_table(nodes, a, nf - 1.0 / a, |y| xi1(y, a, n), false)?;
        let xi3 = weight_table(nodes, a, nf + 1.0 - 1.0 / a, |y| xi1(y, a, n), false)?;
        let xi4 = weight_table(nodes, a, nf - 1.0 - 1.0 / a, |y| xi1(y, a, n), false)?;
        let xi5 = weight_table(nodes, a, nf - 1.0 / a, |y| Ok(xi1_prime(y, a, n)), true)?;
        Ok(Self {
            a,
            n,
            nodes: nodes.to_vec(),
            xi1: xi1_vals,
            xi2,
            xi3,
            xi4,
            xi5,
        })
    }

    /// Dump as CSV rows `s,xi1,xi2,xi3,xi4,xi5`.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "s,xi1,xi2,xi3,xi4,xi5")?;
        for (i, &s) in self.nodes.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                crate::harness::report::fmt_float(s),
                crate::harness::report::fmt_float(self.xi1[i]),
                crate::harness::report::fmt_float(self.xi2[i]),
                crate::harness::report::fmt_float(self.xi3[i]),
                crate::harness::report::fmt_float(self.xi4[i]),
                crate::harness::report::fmt_float(self.xi5[i]),
            )?;
        }
        Ok(())
    }
}

fn weight_table<G: Fn(f64) -> Result<f64>>(
    nodes: &[f64],
    a: f64,
    e: f64,
    g: G,
    divide_by_s: bool,
) -> Result<Vec<f64>> {
    // cumulative integral from 1 down to each node, largest node first
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&i, &j| nodes[j].partial_cmp(&nodes[i]).unwrap());
    let mut values = vec![0.0; nodes.len()];
    let mut acc = 0.0;
    let mut upper = 1.0;
    for &idx in &order {
        let s = nodes[idx];
        if !(s > 0.0 && s <= 1.0) {
            return Err(Error::Numerical(format!(
                "profile tabulation requires radial nodes in (0, 1], got {s}"
            )));
        }
        let seg = quad::adaptive_simpson(
            &|y: f64| y.powf(e - 1.0) * g(y).unwrap_or(f64::NAN),
            s,
            upper,
            1e-9,
        )
        .map_err(|err| Error::Numerical(format!("profile quadrature failed at s = {s}: {err}")))?;
        if !seg.is_finite() {
            return Err(Error::Numerical(format!(
                "profile quadrature diverged at s = {s}"
            )));
        }
        acc += seg;
        upper = s;
        let mut v = acc * s.powf(-e) / a;
        if divide_by_s {
            v /= s;
        }
        values[idx] = v;
    }
    Ok(values)
}

/// Leading-order mesoscopic reconstruction c0(x, v) = cbar0(x) q(x, v_hat)
/// xi1(|v|) on a phase grid. The velocity integral reproduces `cbar0` within
/// quadrature tolerance.
pub fn zero_order_meso(
    cbar0: &[f64],
    fiber: &FiberDistribution,
    grid: &PhaseGrid,
    a: f64,
) -> Result<Vec<f64>> {
    if cbar0.iter().any(|v| *v < 0.0) {
        return Err(Error::Precondition(
            "leading-order density must be non-negative".into(),
        ));
    }
    let n = grid.x.n;
    let nxt = grid.x.cells();
    let kk = grid.dirs.len();
    let q_table = fiber.direction_table(&grid.x, &grid.dirs)?;
    let mut c = vec![0.0; grid.velocity_count() * nxt];
    for j in 0..grid.radial.len() {
        let xi = xi1(grid.radial.nodes[j], a, n)?;
        for k in 0..kk {
            let row = grid.row(j, k);
            for x in 0..nxt {
                c[row * nxt + x] = cbar0[x] * q_table[x * kk + k] * xi;
            }
        }
    }
    Ok(c)
}

/// Closed-form zero-order moments: first moment coefficient
/// 1/(a+1) * n/(n+1), second moment coefficient 1/(2a+1) * n/(n+2).
pub fn closed_moments(
    cbar0: &[f64],
    fiber: &FiberDistribution,
    xgrid: &XGrid,
    a: f64,
) -> Result<(Vec<Vector>, Vec<Matrix>)> {
    let n = xgrid.n;
    let nf = n as f64;
    let c1 = 1.0 / (a + 1.0) * nf / (nf + 1.0);
    let c2 = 1.0 / (2.0 * a + 1.0) * nf / (nf + 2.0);
    let mut m1 = Vec::with_capacity(xgrid.cells());
    let mut m2 = Vec::with_capacity(xgrid.cells());
    for idx in 0..xgrid.cells() {
        let m = fiber.moments(&xgrid.node(idx))?;
        m1.push(linalg::scale(n, &m.mean, c1 * cbar0[idx]));
        m2.push(linalg::mat_scale(n, &m.second, c2 * cbar0[idx]));
    }
    Ok((m1, m2))
}

/// First-order mesoscopic correction c1(x, v), assembled from the tabulated
/// radial weights. For kappa = 1 the required time derivative of the leading
/// density is taken from the drift limit equation.
pub fn first_order_meso(
    cbar1: &[f64],
    cbar0: &[f64],
    fiber: &FiberDistribution,
    env: &Environment,
    params: &ScalingParams,
    grid: &PhaseGrid,
) -> Result<Vec<f64>> {
    let n = params.n;
    let nf = n as f64;
    let a = params.a;
    let nxt = grid.x.cells();
    let kk = grid.dirs.len();
    let profiles = ProfileSet::tabulate(&grid.radial.nodes, a, n)?;
    let q_table = fiber.direction_table(&grid.x, &grid.dirs)?;

    // d/dt of the leading density from the drift limit (kappa = 1 only)
    let dt_cbar0: Vec<f64> = if params.kappa == 1 {
        let mut flux = Vec::with_capacity(nxt);
        for idx in 0..nxt {
            let m = fiber.moments(&grid.x.node(idx))?;
            flux.push(linalg::scale(n, &m.mean, cbar0[idx]));
        }
        let div = fields::centered_divergence(&grid.x, &flux);
        div.iter()
            .map(|d| -d * nf / ((a + 1.0) * (nf + 1.0)))
            .collect()
    } else {
        vec![0.0; nxt]
    };

    // grad_x (q cbar0) per direction
    let mut grad_qc: Vec<Vector> = vec![ZERO_VECTOR; nxt * kk];
    {
        let mut product = vec![0.0; nxt];
        for k in 0..kk {
            for x in 0..nxt {
                product[x] = q_table[x * kk + k] * cbar0[x];
            }
            let g = fields::centered_gradient(&grid.x, &product);
            for x in 0..nxt {
                grad_qc[x * kk + k] = g[x];
            }
        }
    }

    // angular derivative of q at the phase grid's direction angles (n = 2)
    let mut dq_table = vec![0.0; nxt * kk];
    if n == 2 {
        for x in 0..nxt {
            let pos = grid.x.node(x);
            for k in 0..kk {
                dq_table[x * kk + k] = fiber.angular_derivative(&pos, grid.dirs.angle(k))?;
            }
        }
    }

    // F grad Q per cell
    let fg: Vec<Vector> = (0..nxt)
        .map(|x| {
            let pos = grid.x.node(x);
            let g = env.grad_q(&pos);
            linalg::matvec(n, &env.tensor(&pos), &g)
        })
        .collect();

    let delta1 = if params.kappa == 1 { 1.0 } else { 0.0 };
    let mut c1 = vec![0.0; grid.velocity_count() * nxt];
    for j in 0..grid.radial.len() {
        let s = grid.radial.nodes[j];
        for k in 0..kk {
            let th = grid.dirs.dirs[k];
            let tangent = [-th[1], th[0]];
            let row = grid.row(j, k);
            for x in 0..nxt {
                let q = q_table[x * kk + k];
                let mut v = cbar1[x] * q * profiles.xi1[j];
                v -= delta1 * dt_cbar0[x] * q * profiles.xi2[j];
                v -= s * linalg::dot(n, &th, &grad_qc[x * kk + k]) * profiles.xi3[j];
                let mut taxis = linalg::dot(n, &fg[x], &th) * s * q * profiles.xi5[j];
                if n == 2 {
                    taxis += linalg::dot(n, &fg[x], &tangent) * dq_table[x * kk + k] / s
                        * profiles.xi4[j];
                }
                v -= a * cbar0[x] * taxis;
                c1[row * nxt + x] = v;
            }
        }
    }
    Ok(c1)
}

/// Corrected moments of the first-order approximation.
///
/// The second-moment formula drops the third-moment transport term and is
/// therefore only valid for fiber distributions with vanishing third moment;
/// other configurations are rejected.
pub fn corrected_moments(
    cbar1: &[f64],
    cbar0: &[f64],
    fiber: &FiberDistribution,
    env: &Environment,
    params: &ScalingParams,
    xgrid: &XGrid,
) -> Result<(Vec<Vector>, Vec<Matrix>)> {
    let n = params.n;
    let nf = n as f64;
    let a = params.a;
    let nxt = xgrid.cells();

    // third-moment gate
    let mut max_t = 0.0f64;
    for x in fiber.sample_positions() {
        let m = fiber.moments(&x)?;
        for i in 0..n {
            for j in 0..n {
                for l in 0..n {
                    max_t = max_t.max(m.third[i][j][l].abs());
                }
            }
        }
    }
    if max_t > 1e-8 {
        return Err(Error::Precondition(format!(
            "corrected second moments require a vanishing third fiber moment; max |T| = {max_t}"
        )));
    }

    let moments: Vec<_> = (0..nxt)
        .map(|idx| fiber.moments(&xgrid.node(idx)))
        .collect::<Result<Vec<_>>>()?;

    let c_m1 = nf / (nf + 1.0);
    let c_m2 = 1.0 / (2.0 * a + 1.0) * nf / (nf + 2.0);

    let dt_cbar0: Vec<f64> = if params.kappa == 1 {
        let flux: Vec<Vector> = (0..nxt)
            .map(|idx| linalg::scale(n, &moments[idx].mean, cbar0[idx]))
            .collect();
        fields::centered_divergence(xgrid, &flux)
            .iter()
            .map(|d| -d / (a + 1.0) * c_m1)
            .collect()
    } else {
        vec![0.0; nxt]
    };

    // div(D cbar0)
    let dfield: Vec<Matrix> = moments.iter().map(|m| m.second).collect();
    let div_dc = fields::centered_div_matrix_scalar(xgrid, &dfield, cbar0);

    let delta1 = if params.kappa == 1 { 1.0 } else { 0.0 };
    let mut m1c = Vec::with_capacity(nxt);
    let mut m2c = Vec::with_capacity(nxt);
    for x in 0..nxt {
        let pos = xgrid.node(x);
        let e = moments[x].mean;
        let d = moments[x].second;
        let g = env.grad_q(&pos);
        let fg = linalg::matvec(n, &env.tensor(&pos), &g);

        let mut v1 = linalg::scale(n, &e, c_m1 * cbar1[x]);
        v1 = linalg::sub(
            n,
            &v1,
            &linalg::scale(n, &e, delta1 / (a + 1.0) * c_m1 * dt_cbar0[x]),
        );
        v1 = linalg::sub(n, &v1, &linalg::scale(n, &div_dc[x], c_m2));
        v1 = linalg::add(n, &v1, &linalg::scale(n, &fg, a * cbar0[x]));
        m1c.push(linalg::scale(n, &v1, 1.0 / (a + 1.0)));

        let mut v2 = linalg::mat_scale(n, &d, nf / (nf + 2.0) * cbar1[x]);
        v2 = linalg::mat_sub(
            n,
            &v2,
            &linalg::mat_scale(n, &d, delta1 * c_m2 * dt_cbar0[x]),
        );
        let sym = linalg::mat_add(n, &linalg::outer(n, &fg, &e), &linalg::outer(n, &e, &fg));
        v2 = linalg::mat_sub(
            n,
            &v2,
            &linalg::mat_scale(n, &sym, a / (a + 1.0) * c_m1 * cbar0[x]),
        );
        m2c.push(linalg::mat_scale(n, &v2, 1.0 / (2.0 * a + 1.0)));
    }
    Ok((m1c, m2c))
}

/// Solve a v . grad psi + psi = g on the unit ball for g supported away from
/// the origin: psi(v) = -(1/a) |v|^{-1/a} int_{|v|}^1 y^{1/a - 1} g(y v_hat) dy.
///
/// Returned row-major over (radial node, direction).
pub fn resolve_adjoint<G: Fn(Vector) -> f64>(
    g: G,
    a: f64,
    nodes: &[f64],
    dirs: &DirectionGrid,
) -> Result<Vec<f64>> {
    let mut psi = vec![0.0; nodes.len() * dirs.len()];
    let mut order: Vec<usize> = (0..nodes.len()).collect();
    order.sort_by(|&i, &j| nodes[j].partial_cmp(&nodes[i]).unwrap());
    for (k, th) in dirs.dirs.iter().enumerate() {
        let mut acc = 0.0;
        let mut upper = 1.0;
        for &j in &order {
            let s = nodes[j];
            acc += quad::adaptive_simpson(
                &|y: f64| y.powf(1.0 / a - 1.0) * g([y * th[0], y * th[1]]),
                s,
                upper,
                1e-10,
            )?;
            upper = s;
            psi[j * dirs.len() + k] = -acc * s.powf(-1.0 / a) / a;
        }
    }
    Ok(psi)
}

/// Apply the transport operator a v . grad(.) + (.) to a tabulated psi with
/// second-order finite-difference radial derivatives (centred in the
/// interior, one-sided three-point stencils at the ends). Used to round-trip
/// `resolve_adjoint`.
pub fn transport_apply(psi: &[f64], a: f64, nodes: &[f64], dirs: &DirectionGrid) -> Vec<f64> {
    let ns = nodes.len();
    let kk = dirs.len();
    // derivative of the quadratic through three nodes, evaluated at `at`
    let three_point = |i0: usize, i1: usize, i2: usize, at: f64, col: &dyn Fn(usize) -> f64| {
        let (x0, x1, x2) = (nodes[i0], nodes[i1], nodes[i2]);
        let w0 = (2.0 * at - x1 - x2) / ((x0 - x1) * (x0 - x2));
        let w1 = (2.0 * at - x0 - x2) / ((x1 - x0) * (x1 - x2));
        let w2 = (2.0 * at - x0 - x1) / ((x2 - x0) * (x2 - x1));
        w0 * col(i0) + w1 * col(i1) + w2 * col(i2)
    };
    let mut out = vec![0.0; ns * kk];
    for k in 0..kk {
        let col = |j: usize| psi[j * kk + k];
        for j in 0..ns {
            let dpsi = if j == 0 {
                three_point(0, 1, 2, nodes[0], &col)
            } else if j == ns - 1 {
                three_point(ns - 3, ns - 2, ns - 1, nodes[ns - 1], &col)
            } else {
                three_point(j - 1, j, j + 1, nodes[j], &col)
            };
            out[j * kk + k] = a * nodes[j] * dpsi + psi[j * kk + k];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{SignalField, TensorField};
    use crate::fiber::FiberKind;
    use crate::linalg::ZERO_MATRIX;

    #[test]
    fn xi1_direct_and_boundary() {
        // a = 1, n = 2, s = 0.5 -> 2 (1/0.5 - 1) = 2
        assert!((xi1(0.5, 1.0, 2).unwrap() - 2.0).abs() < 1e-14);
        for (a, n) in [(0.5, 1), (1.0, 2), (2.0, 2), (0.7, 1)] {
            assert!(xi1(1.0, a, n).unwrap().abs() < 1e-14);
        }
        assert!(xi1(0.0, 1.0, 2).is_err());
    }

    #[test]
    fn xi1_logarithmic_limit() {
        // na = 1 at a = 0.5, n = 2: xi1(e^{-1}) = -(n/a) ln s = 4; the
        // oracle evaluates the generic formula at a = 0.5 +- 1e-4 and
        // confirms convergence to the same value.
        let s = (-1.0f64).exp();
        let v = xi1(s, 0.5, 2).unwrap();
        assert!((v - 4.0).abs() < 1e-12);
        for da in [1e-4, -1e-4] {
            let a = 0.5 + da;
            let generic = 2.0 / (2.0 * a - 1.0) * (s.powf(-2.0 + 1.0 / a) - 1.0);
            assert!((generic - 4.0).abs() < 2e-3, "a={a}: {generic}");
        }
    }

    #[test]
    fn closure_integral_is_one() {
        for a in [0.5, 1.0, 2.0] {
            for n in [1usize, 2] {
                let v = xi1_radial_integral(a, n, 0, 8192);
                assert!((v - 1.0).abs() < 1e-6, "a={a} n={n}: {v}");
            }
        }
    }

    #[test]
    fn moment_integrals_match_closed_coefficients() {
        for a in [0.5, 1.0, 2.0] {
            for n in [1usize, 2] {
                let nf = n as f64;
                let m1 = xi1_radial_integral(a, n, 1, 8192);
                assert!((m1 - nf / ((a + 1.0) * (nf + 1.0))).abs() < 1e-7);
                let m2 = xi1_radial_integral(a, n, 2, 8192);
                assert!((m2 - nf / ((2.0 * a + 1.0) * (nf + 2.0))).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn radial_characteristic_map_matches_ode_integration() {
        // |v(sigma)| = e^{-a sigma} against RK4 on dv/dsigma = -a v
        for a in [0.5, 1.3] {
            let mut v = [0.6, 0.8];
            let steps = 4000;
            let sigma_end = 2.0;
            let h = sigma_end / steps as f64;
            for _ in 0..steps {
                let f = |y: [f64; 2]| [-a * y[0], -a * y[1]];
                let k1 = f(v);
                let k2 = f([v[0] + 0.5 * h * k1[0], v[1] + 0.5 * h * k1[1]]);
                let k3 = f([v[0] + 0.5 * h * k2[0], v[1] + 0.5 * h * k2[1]]);
                let k4 = f([v[0] + h * k3[0], v[1] + h * k3[1]]);
                v[0] += h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]);
                v[1] += h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]);
            }
            let exact = (-a * sigma_end).exp();
            let norm = (v[0] * v[0] + v[1] * v[1]).sqrt();
            assert!((norm - exact).abs() < 1e-10);
        }
    }

    // Closed forms for the correction weights, derived by carrying out the
    // characteristic integrals analytically (na != 1 and the relevant
    // exponents non-zero). Independent of the adaptive-quadrature path.
    fn xi2_closed(s: f64, a: f64, n: usize) -> f64 {
        let nf = n as f64;
        let na1 = nf * a - 1.0;
        -nf * s.powf(1.0 / a - nf) * s.ln() / (a * na1) - xi1(s, a, n).unwrap() / na1
    }

    fn xi3_closed(s: f64, a: f64, n: usize) -> f64 {
        let nf = n as f64;
        let mu = nf + 1.0 - 1.0 / a;
        nf / (a * (nf * a - 1.0)) * s.powf(-mu) * ((1.0 - s) - (1.0 - s.powf(mu)) / mu)
    }

    fn xi5_closed(s: f64, a: f64, n: usize) -> f64 {
        let nf = n as f64;
        -(nf / (a * a)) * s.powf(1.0 / a - nf) * (1.0 - s) / (s * s)
    }

    #[test]
    fn tabulated_profiles_match_closed_forms() {
        let radial = RadialGrid::graded(48, 2.0).unwrap();
        for (a, n) in [(1.0, 2usize), (0.8, 2), (1.5, 1)] {
            let p = ProfileSet::tabulate(&radial.nodes, a, n).unwrap();
            for (i, &s) in p.nodes.iter().enumerate() {
                let rel = |x: f64, y: f64| (x - y).abs() / y.abs().max(1e-12);
                assert!(
                    rel(p.xi2[i], xi2_closed(s, a, n)) < 1e-7,
                    "xi2 a={a} n={n} s={s}: {} vs {}",
                    p.xi2[i],
                    xi2_closed(s, a, n)
                );
                assert!(rel(p.xi3[i], xi3_closed(s, a, n)) < 1e-7);
                assert!(rel(p.xi5[i], xi5_closed(s, a, n)) < 1e-7);
            }
        }
    }

    #[test]
    fn profile_moment_identities() {
        // Radial integrals of the tabulated weights reproduce the closed
        // corrected-moment coefficients:
        //   int s^{n-1} xi2 = 1
        //   int s^{n+1} xi2 = [1/(2a+1)]^2 n/(n+2)
        //   int s^{n+1} xi3 = [1/((a+1)(2a+1))] n/(n+2)
        //   n = 2: int s xi4 = 1/(a+1), int s^3 xi5 = -2/(a+1)
        let radial = RadialGrid::graded(6000, 2.0).unwrap();
        for (a, n) in [(1.0, 2usize), (0.8, 2)] {
            let nf = n as f64;
            let p = ProfileSet::tabulate(&radial.nodes, a, n).unwrap();
            let int = |vals: &[f64], pw: i32| -> f64 {
                vals.iter()
                    .enumerate()
                    .map(|(j, v)| v * radial.nodes[j].powi(pw) * radial.widths[j])
                    .sum()
            };
            let i2 = int(&p.xi2, n as i32 - 1);
            assert!((i2 - 1.0).abs() < 2e-4, "a={a} n={n}: {i2}");
            let i2m = int(&p.xi2, n as i32 + 1);
            let expect = (1.0 / (2.0 * a + 1.0)).powi(2) * nf / (nf + 2.0);
            assert!((i2m - expect).abs() < 1e-5);
            let i3 = int(&p.xi3, n as i32 + 1);
            let expect = 1.0 / ((a + 1.0) * (2.0 * a + 1.0)) * nf / (nf + 2.0);
            assert!((i3 - expect).abs() < 1e-5);
            if n == 2 {
                let i4 = int(&p.xi4, 1);
                assert!((i4 - 1.0 / (a + 1.0)).abs() < 2e-4, "{i4}");
                let i5 = int(&p.xi5, 3);
                assert!((i5 + 2.0 / (a + 1.0)).abs() < 1e-5, "{i5}");
            }
        }
    }

    fn test_grid(n: usize, nx: usize, ns: usize, k: usize, a: f64) -> PhaseGrid {
        PhaseGrid::new(XGrid::new(n, nx, 1.0).unwrap(), ns, k, a).unwrap()
    }

    #[test]
    fn zero_order_velocity_integral_reproduces_density() {
        // cbar0 = 1, uniform q, a = 1, n = 2: s^{n-1} xi1 is linear, so the
        // graded midpoint rule integrates it exactly
        let grid = test_grid(2, 4, 32, 16, 1.0);
        let fiber = FiberDistribution::new(2, FiberKind::Uniform).unwrap();
        let cbar0 = vec![1.0; grid.x.cells()];
        let c = zero_order_meso(&cbar0, &fiber, &grid, 1.0).unwrap();
        let m0 = grid.velocity_integral(&c);
        for v in &m0 {
            assert!((v - 1.0).abs() < 1e-6);
        }
        // pointwise: c0(s = 0.5) = (1/2pi) * 2 = 1/pi
        let j = grid
            .radial
            .nodes
            .iter()
            .position(|&s| (s - 0.5).abs() < 0.02)
            .unwrap();
        let xi = xi1(grid.radial.nodes[j], 1.0, 2).unwrap();
        let got = c[grid.row(j, 0) * grid.x.cells()];
        assert!((got - xi / (2.0 * std::f64::consts::PI)).abs() < 1e-12);

        // zero density stays zero
        let z = zero_order_meso(&vec![0.0; grid.x.cells()], &fiber, &grid, 1.0).unwrap();
        assert!(z.iter().all(|v| *v == 0.0));
    }

    fn bump_field(xgrid: &XGrid, center: f64, width: f64) -> Vec<f64> {
        (0..xgrid.cells())
            .map(|i| {
                let x = xgrid.node(i);
                let mut r2 = 0.0;
                for d in 0..xgrid.n {
                    let mut dd = (x[d] - center).rem_euclid(xgrid.length);
                    if dd >= 0.5 * xgrid.length {
                        dd -= xgrid.length;
                    }
                    r2 += dd * dd;
                }
                (-r2 / (2.0 * width * width)).exp()
            })
            .collect()
    }

    #[test]
    fn first_order_correction_carries_no_net_mass() {
        // kappa = 2 with undirected fibers: integrating the correction
        // equation over the ball shows the non-leading terms cancel
        let a = 0.8;
        let grid = test_grid(2, 12, 40, 24, a);
        let fiber = FiberDistribution::new(
            2,
            FiberKind::Mixture(vec![
                (
                    0.5,
                    FiberKind::VonMises {
                        mean: [1.0, 0.0],
                        concentration: 1.2,
                    },
                ),
                (
                    0.5,
                    FiberKind::VonMises {
                        mean: [-1.0, 0.0],
                        concentration: 1.2,
                    },
                ),
            ]),
        )
        .unwrap();
        let env = Environment::new(
            grid.x.clone(),
            SignalField::Gaussian {
                center: [0.5, 0.5],
                width: 0.2,
                amplitude: 0.8,
            },
            TensorField::ScaledIdentity { alpha: 0.9 },
        )
        .unwrap();
        let params = ScalingParams::new(0.1, 2, a, 2).unwrap();
        let cbar0 = bump_field(&grid.x, 0.5, 0.15);
        let cbar1 = bump_field(&grid.x, 0.4, 0.2);
        let c1 = first_order_meso(&cbar1, &cbar0, &fiber, &env, &params, &grid).unwrap();
        let lead = zero_order_meso(&cbar1, &fiber, &grid, a).unwrap();
        let m0_c1 = grid.velocity_integral(&c1);
        let m0_lead = grid.velocity_integral(&lead);
        for x in 0..grid.x.cells() {
            assert!(
                (m0_c1[x] - m0_lead[x]).abs() < 1e-6,
                "net correction mass {} at cell {x}",
                m0_c1[x] - m0_lead[x]
            );
        }
    }

    #[test]
    fn first_order_reduces_to_leading_term_without_sources() {
        // cbar0 = 0 kills every non-leading term
        let grid = test_grid(1, 8, 24, 2, 1.5);
        let fiber = FiberDistribution::new(1, FiberKind::Discrete { p_plus: 0.6 }).unwrap();
        let env = Environment::new(
            grid.x.clone(),
            SignalField::Ramp {
                direction: [1.0, 0.0],
                slope: 0.5,
            },
            TensorField::ScaledIdentity { alpha: 1.0 },
        )
        .unwrap();
        let params = ScalingParams::new(0.2, 2, 1.5, 1).unwrap();
        let cbar0 = vec![0.0; grid.x.cells()];
        let cbar1 = bump_field(&grid.x, 0.5, 0.1);
        let c1 = first_order_meso(&cbar1, &cbar0, &fiber, &env, &params, &grid).unwrap();
        let lead = zero_order_meso(&cbar1, &fiber, &grid, 1.5).unwrap();
        for (u, v) in c1.iter().zip(&lead) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn corrected_second_moment_coefficient() {
        // kappa = 2, E = 0, grad Q = 0, stationary: m2c = 1/6 * D * cbar1,
        // with D = I/2 at a = 1, n = 2 giving I/12; cross-checked against
        // quadrature of the assembled first-order correction
        let a = 1.0;
        let grid = test_grid(2, 8, 64, 32, a);
        let fiber = FiberDistribution::new(2, FiberKind::Uniform).unwrap();
        let env = Environment::new(
            grid.x.clone(),
            SignalField::Ramp {
                direction: [1.0, 0.0],
                slope: 0.0,
            },
            TensorField::ScaledIdentity { alpha: 1.0 },
        )
        .unwrap();
        let params = ScalingParams::new(0.1, 2, a, 2).unwrap();
        let cbar0 = vec![1.0; grid.x.cells()];
        let cbar1 = vec![1.0; grid.x.cells()];
        let (m1c, m2c) = corrected_moments(&cbar1, &cbar0, &fiber, &env, &params, &grid.x).unwrap();
        for x in 0..grid.x.cells() {
            assert!((m2c[x][0][0] - 1.0 / 12.0).abs() < 1e-12);
            assert!((m2c[x][1][1] - 1.0 / 12.0).abs() < 1e-12);
            assert!(m2c[x][0][1].abs() < 1e-12);
            assert!(linalg::norm(2, &m1c[x]) < 1e-12);
        }
        // quadrature cross-check on the reconstructed correction
        let c1 = first_order_meso(&cbar1, &cbar0, &fiber, &env, &params, &grid).unwrap();
        let nxt = grid.x.cells();
        let mut m2 = ZERO_MATRIX;
        for j in 0..grid.radial.len() {
            for k in 0..grid.dirs.len() {
                let w = grid.weight(j, k);
                let v = grid.velocity(j, k);
                let val = c1[grid.row(j, k) * nxt];
                for i in 0..2 {
                    for l in 0..2 {
                        m2[i][l] += w * v[i] * v[l] * val;
                    }
                }
            }
        }
        assert!((m2[0][0] - 1.0 / 12.0).abs() < 2e-4, "{}", m2[0][0]);
        assert!((m2[1][1] - 1.0 / 12.0).abs() < 2e-4);

        // zero inputs give zero
        let (z1, z2) = corrected_moments(
            &vec![0.0; nxt],
            &vec![0.0; nxt],
            &fiber,
            &env,
            &params,
            &grid.x,
        )
        .unwrap();
        assert!(z1.iter().all(|v| linalg::norm(2, v) == 0.0));
        assert!(z2.iter().all(|m| linalg::max_abs_entry(2, m) == 0.0));
    }

    #[test]
    fn corrected_moments_reject_directed_third_moment() {
        let grid = XGrid::new(1, 8, 1.0).unwrap();
        let fiber = FiberDistribution::new(1, FiberKind::Discrete { p_plus: 0.75 }).unwrap();
        let env = Environment::new(
            grid.clone(),
            SignalField::Ramp {
                direction: [1.0, 0.0],
                slope: 0.0,
            },
            TensorField::ScaledIdentity { alpha: 1.0 },
        )
        .unwrap();
        let params = ScalingParams::new(0.1, 1, 1.0, 1).unwrap();
        let z = vec![0.0; 8];
        let err = corrected_moments(&z, &z, &fiber, &env, &params, &grid);
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn zero_and_first_order_not_orthogonal() {
        // weighted inner product int c0 c1 dv / (n q) at a generic
        // configuration stays away from zero
        let a = 1.0;
        let grid = test_grid(1, 16, 32, 2, a);
        let fiber = FiberDistribution::new(1, FiberKind::Discrete { p_plus: 0.5 }).unwrap();
        let env = Environment::new(
            grid.x.clone(),
            SignalField::Gaussian {
                center: [0.5, 0.0],
                width: 0.15,
                amplitude: 1.0,
            },
            TensorField::ScaledIdentity { alpha: 1.0 },
        )
        .unwrap();
        let params = ScalingParams::new(0.1, 2, a, 1).unwrap();
        let cbar0 = bump_field(&grid.x, 0.45, 0.12);
        let cbar1 = bump_field(&grid.x, 0.55, 0.12);
        let c0 = zero_order_meso(&cbar0, &fiber, &grid, a).unwrap();
        let c1 = first_order_meso(&cbar1, &cbar0, &fiber, &env, &params, &grid).unwrap();
        let q_table = fiber.direction_table(&grid.x, &grid.dirs).unwrap();
        let nxt = grid.x.cells();
        let mut max_inner = 0.0f64;
        for x in 0..nxt {
            let mut inner = 0.0;
            for j in 0..grid.radial.len() {
                for k in 0..grid.dirs.len() {
                    let w = grid.weight(j, k);
                    let idx = grid.row(j, k) * nxt + x;
                    let q = q_table[x * grid.dirs.len() + k];
                    inner += w * c0[idx] * c1[idx] / (1.0 * q);
                }
            }
            max_inner = max_inner.max(inner.abs());
        }
        assert!(max_inner > 1e-8, "inner product {max_inner}");
    }

    #[test]
    fn adjoint_closed_form_and_roundtrip() {
        // g = 1, a = 1: psi = 1 - 1/|v| solves r psi' + psi = 1
        let dirs = DirectionGrid::new(1, 2).unwrap();
        let nodes: Vec<f64> = (0..40)
            .map(|i| 0.1 + 0.9 * (i as f64 + 0.5) / 40.0)
            .collect();
        let psi = resolve_adjoint(|_v| 1.0, 1.0, &nodes, &dirs).unwrap();
        for (j, &s) in nodes.iter().enumerate() {
            assert!((psi[j * 2] - (1.0 - 1.0 / s)).abs() < 1e-9);
        }
        // zero source
        let z = resolve_adjoint(|_v| 0.0, 0.7, &nodes, &dirs).unwrap();
        assert!(z.iter().all(|v| v.abs() < 1e-14));

        // smooth g vanishing near the origin: operator round-trip error
        // halves (at least) when the grid is refined
        let g = |v: Vector| {
            let r = (v[0] * v[0] + v[1] * v[1]).sqrt();
            if !(0.3..=0.9).contains(&r) {
                0.0
            } else {
                let u = (r - 0.3) / 0.6;
                (std::f64::consts::PI * u).sin().powi(2) * (1.0 + 0.5 * v[0].signum())
            }
        };
        let dirs2 = DirectionGrid::new(2, 8).unwrap();
        let mut errs = Vec::new();
        for m in [80usize, 160] {
            let nodes: Vec<f64> = (0..m)
                .map(|i| 0.1 + 0.9 * (i as f64 + 0.5) / m as f64)
                .collect();
            let psi = resolve_adjoint(g, 0.8, &nodes, &dirs2).unwrap();
            let back = transport_apply(&psi, 0.8, &nodes, &dirs2);
            let mut err = 0.0f64;
            for (j, &s) in nodes.iter().enumerate() {
                for (k, th) in dirs2.dirs.iter().enumerate() {
                    let expect = g([s * th[0], s * th[1]]);
                    err = err.max((back[j * dirs2.len() + k] - expect).abs());
                }
            }
            errs.push(err);
        }
        assert!(
            errs[1] <= errs[0] / 1.8,
            "refinement errors {:?} did not halve",
            errs
        );
    }
}
