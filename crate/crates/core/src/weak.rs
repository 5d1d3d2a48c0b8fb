//! Weak-formulation residuals of discrete trajectories.
//!
//! Test functions are triples (phi(x), psi(v), eta(t)) with closed-form
//! derivatives: a Gaussian bump times a polynomial of degree at most two in
//! x, a velocity polynomial from {1, v_i, v_i v_j}, and a C^2 window in time
//! that vanishes together with its derivative at the window end. Each weak
//! identity is assembled by grid quadrature in x and v and trapezoidal
//! quadrature in t, including the initial-data terms, and reported as
//! |LHS - RHS| together with a normalised value.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;

use crate::environment::{Environment, ScalingParams};
use crate::error::{Error, Result};
use crate::fiber::FiberDistribution;
use crate::grid::{PhaseGrid, XGrid};
use crate::linalg::{self, Matrix, Vector, ZERO_MATRIX, ZERO_VECTOR};
use crate::macroscale::MacroTrajectory;
use crate::quad;

/// Polynomial factor of the spatial test function.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolyFactor {
    One,
    Linear(usize),
    Quadratic(usize, usize),
}

/// Gaussian bump times polynomial, with analytic gradient and Hessian.
#[derive(Debug, Clone)]
pub struct SpatialTest {
    pub n: usize,
    pub center: Vector,
    pub width: f64,
    pub poly: PolyFactor,
}

impl SpatialTest {
    /// Construct, enforcing decay below 1e-12 at the box boundary.
    pub fn new(xgrid: &XGrid, center: Vector, width: f64, poly: PolyFactor) -> Result<Self> {
        let mut dist = f64::INFINITY;
        for d in 0..xgrid.n {
            dist = dist.min(center[d].min(xgrid.length - center[d]));
        }
        let tail =
            (-dist * dist / (2.0 * width * width)).exp() * (1.0 + xgrid.length * xgrid.length);
        if tail > 1e-12 {
            return Err(Error::Config(format!(
                "spatial test bump does not decay at the box boundary (tail {tail:.2e})"
            )));
        }
        Ok(Self {
            n: xgrid.n,
            center,
            width,
            poly,
        })
    }

    fn poly_parts(&self, d: &Vector) -> (f64, Vector, Matrix) {
        match self.poly {
            PolyFactor::One => (1.0, ZERO_VECTOR, ZERO_MATRIX),
            PolyFactor::Linear(i) => {
                let mut g = ZERO_VECTOR;
                g[i] = 1.0;
                (d[i], g, ZERO_MATRIX)
            }
            PolyFactor::Quadratic(i, j) => {
                let mut g = ZERO_VECTOR;
                g[i] += d[j];
                g[j] += d[i];
                let mut h = ZERO_MATRIX;
                h[i][j] += 1.0;
                h[j][i] += 1.0;
                (d[i] * d[j], g, h)
            }
        }
    }

    pub fn eval(&self, x: &Vector) -> f64 {
        let d = linalg::sub(self.n, x, &self.center);
        let b = (-linalg::dot(self.n, &d, &d) / (2.0 * self.width * self.width)).exp();
        b * self.poly_parts(&d).0
    }

    pub fn grad(&self, x: &Vector) -> Vector {
        let d = linalg::sub(self.n, x, &self.center);
        let w2 = self.width * self.width;
        let b = (-linalg::dot(self.n, &d, &d) / (2.0 * w2)).exp();
        let (p, gp, _) = self.poly_parts(&d);
        let mut out = ZERO_VECTOR;
        for i in 0..self.n {
            out[i] = b * (gp[i] - p * d[i] / w2);
        }
        out
    }

    pub fn hessian(&self, x: &Vector) -> Matrix {
        let d = linalg::sub(self.n, x, &self.center);
        let w2 = self.width * self.width;
        let b = (-linalg::dot(self.n, &d, &d) / (2.0 * w2)).exp();
        let (p, gp, hp) = self.poly_parts(&d);
        let mut out = ZERO_MATRIX;
        for i in 0..self.n {
            for j in 0..self.n {
                let mut v = hp[i][j];
                v -= (gp[i] * d[j] + gp[j] * d[i]) / w2;
                v += p * (d[i] * d[j] / (w2 * w2));
                if i == j {
                    v -= p / w2;
                }
                out[i][j] = b * v;
            }
        }
        out
    }
}

/// Velocity polynomial from {1, v_i, v_i v_j}.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VelocityTest {
    One,
    Component(usize),
    Product(usize, usize),
}

impl VelocityTest {
    pub fn eval(&self, v: &Vector) -> f64 {
        match self {
            Self::One => 1.0,
            Self::Component(i) => v[*i],
            Self::Product(i, j) => v[*i] * v[*j],
        }
    }

    pub fn grad(&self, v: &Vector) -> Vector {
        match self {
            Self::One => ZERO_VECTOR,
            Self::Component(i) => {
                let mut g = ZERO_VECTOR;
                g[*i] = 1.0;
                g
            }
            Self::Product(i, j) => {
                let mut g = ZERO_VECTOR;
                g[*i] += v[*j];
                g[*j] += v[*i];
                g
            }
        }
    }
}

/// C^2 time window on [0, t_end), vanishing with its first derivative (and
/// second) at t_end. The sloped variant has a non-zero slope at t = 0, which
/// exercises the d eta/dt(0) initial term of the second-order identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeWindow {
    pub t_end: f64,
    pub sloped: bool,
}

impl TimeWindow {
    pub fn eval(&self, t: f64) -> f64 {
        let u = t / self.t_end;
        if !(0.0..1.0).contains(&u) {
            return 0.0;
        }
        let m = 1.0 - u;
        if self.sloped {
            m * m * m * (1.0 + u)
        } else {
            m * m * m * (1.0 + 3.0 * u + 6.0 * u * u)
        }
    }

    pub fn deriv(&self, t: f64) -> f64 {
        let u = t / self.t_end;
        if !(0.0..1.0).contains(&u) {
            return 0.0;
        }
        let m = 1.0 - u;
        let du = if self.sloped {
            m * m * (-2.0 - 4.0 * u)
        } else {
            -3.0 * m * m * (1.0 + 3.0 * u + 6.0 * u * u) + m * m * m * (3.0 + 12.0 * u)
        };
        du / self.t_end
    }

    pub fn second_deriv(&self, t: f64) -> f64 {
        let u = t / self.t_end;
        if !(0.0..1.0).contains(&u) {
            return 0.0;
        }
        let m = 1.0 - u;
        let ddu = if self.sloped {
            12.0 * u * m
        } else {
            6.0 * m * (1.0 + 3.0 * u + 6.0 * u * u) - 6.0 * m * m * (3.0 + 12.0 * u)
                + 12.0 * m * m * m
        };
        ddu / (self.t_end * self.t_end)
    }
}

/// One weak test function triple.
#[derive(Debug, Clone)]
pub struct TestTriple {
    pub phi: SpatialTest,
    pub psi: VelocityTest,
    pub eta: TimeWindow,
}

/// Deterministic seeded suite. The first triple is fixed: centred Gaussian,
/// psi = 1, the plateau window.
pub fn build_test_suite(
    xgrid: &XGrid,
    t_end: f64,
    count: usize,
    seed: u64,
) -> Result<Vec<TestTriple>> {
    if count < 1 {
        return Err(Error::Config("test suite needs count >= 1".into()));
    }
    let n = xgrid.n;
    let l = xgrid.length;
    let mut center = ZERO_VECTOR;
    for d in 0..n {
        center[d] = 0.5 * l;
    }
    // centres: the box centre plus axis offsets; widths scale with the
    // distance to the boundary so every bump decays below 1e-12 there
    let mut centers = vec![center];
    for d in 0..n {
        for sign in [1.0, -1.0] {
            let mut c = center;
            c[d] += sign * l / 8.0;
            centers.push(c);
        }
    }
    let mut polys = vec![
        PolyFactor::One,
        PolyFactor::Linear(0),
        PolyFactor::Quadratic(0, 0),
    ];
    let mut psis = vec![
        VelocityTest::One,
        VelocityTest::Component(0),
        VelocityTest::Product(0, 0),
    ];
    if n == 2 {
        polys.push(PolyFactor::Linear(1));
        polys.push(PolyFactor::Quadratic(0, 1));
        psis.push(VelocityTest::Component(1));
        psis.push(VelocityTest::Product(0, 1));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = centers.clone();
    shuffled[1..].shuffle(&mut rng);

    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let c = if i == 0 {
            center
        } else {
            shuffled[i % shuffled.len()]
        };
        let mut dist = f64::INFINITY;
        for d in 0..n {
            dist = dist.min(c[d].min(l - c[d]));
        }
        let widths = [dist / 9.0, dist / 12.0];
        let phi = SpatialTest::new(
            xgrid,
            c,
            if i == 0 { widths[0] } else { widths[i % 2] },
            if i == 0 {
                PolyFactor::One
            } else {
                polys[i % polys.len()]
            },
        )?;
        let psi = if i == 0 {
            VelocityTest::One
        } else {
            psis[i % psis.len()]
        };
        let eta = TimeWindow {
            t_end,
            sloped: i % 2 == 1,
        };
        out.push(TestTriple { phi, psi, eta });
    }
    Ok(out)
}

/// Which weak identity to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualKind {
    Kte,
    ParabolicLimit,
    HyperbolicLimit,
    Moment0,
    Moment012,
}

impl ResidualKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kte" => Ok(Self::Kte),
            "parabolic_limit" => Ok(Self::ParabolicLimit),
            "hyperbolic_limit" => Ok(Self::HyperbolicLimit),
            "moment0" => Ok(Self::Moment0),
            "moment012" => Ok(Self::Moment012),
            other => Err(Error::Config(format!("unknown residual kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Kte => "kte",
            Self::ParabolicLimit => "parabolic_limit",
            Self::HyperbolicLimit => "hyperbolic_limit",
            Self::Moment0 => "moment0",
            Self::Moment012 => "moment012",
        }
    }
}

/// Full phase-space trajectory (uniform snapshot times).
#[derive(Debug, Clone)]
pub struct KineticTrajectory {
    pub grid: Arc<PhaseGrid>,
    pub times: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
}

/// Velocity-moment trajectory (uniform snapshot times).
#[derive(Debug, Clone)]
pub struct MomentTrajectory {
    pub xgrid: XGrid,
    pub times: Vec<f64>,
    pub m0: Vec<Vec<f64>>,
    pub m1: Vec<Vec<Vector>>,
    pub m2: Vec<Vec<Matrix>>,
}

/// Trajectory input for residual evaluation.
pub enum TrajectoryData<'a> {
    Kinetic(&'a KineticTrajectory),
    Moments(&'a MomentTrajectory),
    Macro(&'a MacroTrajectory),
}

#[derive(Debug, Clone)]
pub struct ResidualRow {
    pub test_id: usize,
    pub residual: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone)]
pub struct ResidualReport {
    pub kind: ResidualKind,
    pub rows: Vec<ResidualRow>,
    pub max_normalized: f64,
}

fn check_density(times: &[f64]) -> Result<f64> {
    if times.len() < 20 {
        return Err(Error::Config(format!(
            "weak residual needs >= 20 snapshots per window, got {}",
            times.len()
        )));
    }
    let dt = times[1] - times[0];
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-9 * dt.max(1e-30) {
            return Err(Error::Config("snapshot times must be uniform".into()));
        }
    }
    Ok(dt)
}

/// Evaluate one weak identity on a trajectory for every test triple.
pub fn weak_residual(
    kind: ResidualKind,
    data: &TrajectoryData,
    fiber: &FiberDistribution,
    env: &Environment,
    params: &ScalingParams,
    tests: &[TestTriple],
) -> Result<ResidualReport> {
    let mut rows = Vec::with_capacity(tests.len());
    let mut max_norm = 0.0f64;
    for (id, triple) in tests.iter().enumerate() {
        let (residual, scale) = match (kind, data) {
            (ResidualKind::Kte, TrajectoryData::Kinetic(tr)) => {
                kte_residual(tr, fiber, env, params, triple)?
            }
            (ResidualKind::Moment0, TrajectoryData::Moments(tr)) => {
                moment0_residual(tr, params, triple)?
            }
            (ResidualKind::Moment012, TrajectoryData::Moments(tr)) => {
                moment012_residual(tr, fiber, env, params, triple)?
            }
            (ResidualKind::ParabolicLimit, TrajectoryData::Macro(tr)) => {
                limit_residual(tr, fiber, env, params, triple, true)?
            }
            (ResidualKind::HyperbolicLimit, TrajectoryData::Macro(tr)) => {
                limit_residual(tr, fiber, env, params, triple, false)?
            }
            _ => {
                return Err(Error::Config(format!(
                    "residual kind {} does not accept the supplied trajectory type",
                    kind.name()
                )))
            }
        };
        let normalized = residual / scale;
        max_norm = max_norm.max(normalized);
        rows.push(ResidualRow {
            test_id: id,
            residual,
            normalized,
        });
    }
    Ok(ResidualReport {
        kind,
        rows,
        max_normalized: max_norm,
    })
}

/// Normalisation: test-function magnitude times trajectory mass times window
/// length.
fn norm_scale(triple: &TestTriple, phi_sup: f64, psi_sup: f64, mass: f64, t_end: f64) -> f64 {
    let eta_sup = 1.0f64.max(triple.eta.deriv(0.0).abs());
    (eta_sup * phi_sup * psi_sup * mass * t_end).max(1e-300)
}

fn kte_residual(
    tr: &KineticTrajectory,
    fiber: &FiberDistribution,
    env: &Environment,
    params: &ScalingParams,
    triple: &TestTriple,
) -> Result<(f64, f64)> {
    let dt = check_density(&tr.times)?;
    let grid = &tr.grid;
    let n = grid.x.n;
    let nxt = grid.x.cells();
    let cell = grid.x.cell_volume();
    let eps = params.epsilon;
    let epsk = params.eps_kappa();
    let a = params.a;

    // spatial tables
    let mut phi = vec![0.0; nxt];
    let mut gphi = vec![ZERO_VECTOR; nxt];
    let mut phi_sup = 0.0f64;
    for x in 0..nxt {
        let pos = grid.x.node(x);
        phi[x] = triple.phi.eval(&pos);
        gphi[x] = triple.phi.grad(&pos);
        phi_sup = phi_sup.max(phi[x].abs() + linalg::norm(n, &gphi[x]));
    }
    let vstar: Vec<Vector> = (0..nxt).map(|x| env.v_star(&grid.x.node(x), eps)).collect();
    // velocity tables
    let rr = grid.velocity_count();
    let mut psi = vec![0.0; rr];
    let mut gpsi = vec![ZERO_VECTOR; rr];
    let mut psi_sup = 0.0f64;
    for j in 0..grid.radial.len() {
        for k in 0..grid.dirs.len() {
            let v = grid.velocity(j, k);
            let r = grid.row(j, k);
            psi[r] = triple.psi.eval(&v);
            gpsi[r] = triple.psi.grad(&v);
            psi_sup = psi_sup.max(psi[r].abs() + linalg::norm(n, &gpsi[r]));
        }
    }
    // int psi dq per cell (the direction measure times r^{n-1} dr)
    let q_table = fiber.direction_table(&grid.x, &grid.dirs)?;
    let kk = grid.dirs.len();
    let mut psi_q = vec![0.0; nxt];
    for x in 0..nxt {
        let mut sum = 0.0;
        for j in 0..grid.radial.len() {
            for k in 0..kk {
                sum += grid.weight(j, k) * psi[grid.row(j, k)] * q_table[x * kk + k];
            }
        }
        psi_q[x] = sum;
    }

    let m = tr.times.len();
    let mut i_mass = vec![0.0; m]; // int phi psi c
    let mut i_adv = vec![0.0; m]; // int (v . grad phi) psi c
    let mut i_drift = vec![0.0; m]; // int phi ((v - v*) . grad psi) c
    let mut i_turn = vec![0.0; m]; // n int phi (int psi dq) cbar
    let mut mass_sup = 0.0f64;
    for (ti, snap) in tr.snapshots.iter().enumerate() {
        let mut s_mass = 0.0;
        let mut s_adv = 0.0;
        let mut s_drift = 0.0;
        let mut total = 0.0;
        let m0 = grid.velocity_integral(snap);
        for j in 0..grid.radial.len() {
            for k in 0..kk {
                let r = grid.row(j, k);
                let w = grid.weight(j, k);
                let v = grid.velocity(j, k);
                let row = &snap[r * nxt..(r + 1) * nxt];
                for x in 0..nxt {
                    let cw = row[x] * w;
                    s_mass += cw * phi[x] * psi[r];
                    s_adv += cw * linalg::dot(n, &v, &gphi[x]) * psi[r];
                    let rel = linalg::sub(n, &v, &vstar[x]);
                    s_drift += cw * phi[x] * linalg::dot(n, &rel, &gpsi[r]);
                    total += cw;
                }
            }
        }
        let mut s_turn = 0.0;
        for x in 0..nxt {
            s_turn += phi[x] * psi_q[x] * m0[x];
        }
        i_mass[ti] = s_mass * cell;
        i_adv[ti] = s_adv * cell;
        i_drift[ti] = s_drift * cell;
        i_turn[ti] = s_turn * cell * n as f64;
        mass_sup = mass_sup.max(total * cell);
    }

    let t_end = triple.eta.t_end;
    let integ: Vec<f64> = (0..m)
        .map(|ti| {
            let t = tr.times[ti];
            let eta = triple.eta.eval(t);
            let etad = triple.eta.deriv(t);
            // transport terms on the left, turning operator on the right
            epsk * etad * i_mass[ti] + eps * eta * i_adv[ti] - a * eta * i_drift[ti]
                + eta * (i_turn[ti] - i_mass[ti])
        })
        .collect();
    let lhs = -epsk * triple.eta.eval(0.0) * i_mass[0] - quad::trapezoid_uniform(&integ, dt);
    let scale = norm_scale(triple, phi_sup, psi_sup, mass_sup, t_end);
    Ok((lhs.abs(), scale))
}

fn moment0_residual(
    tr: &MomentTrajectory,
    params: &ScalingParams,
    triple: &TestTriple,
) -> Result<(f64, f64)> {
    let dt = check_density(&tr.times)?;
    let xgrid = &tr.xgrid;
    let n = xgrid.n;
    let nxt = xgrid.cells();
    let cell = xgrid.cell_volume();
    let mut phi = vec![0.0; nxt];
    let mut gphi = vec![ZERO_VECTOR; nxt];
    let mut phi_sup = 0.0f64;
    for x in 0..nxt {
        let pos = xgrid.node(x);
        phi[x] = triple.phi.eval(&pos);
        gphi[x] = triple.phi.grad(&pos);
        phi_sup = phi_sup.max(phi[x].abs() + linalg::norm(n, &gphi[x]));
    }
    let adv = params.advection_factor();
    let m = tr.times.len();
    let mut mass_sup = 0.0f64;
    let integ: Vec<f64> = (0..m)
        .map(|ti| {
            let mut j = 0.0;
            let mut f = 0.0;
            let mut total = 0.0;
            for x in 0..nxt {
                j += phi[x] * tr.m0[ti][x];
                f += linalg::dot(n, &gphi[x], &tr.m1[ti][x]);
                total += tr.m0[ti][x];
            }
            mass_sup = mass_sup.max(total * cell);
            let t = tr.times[ti];
            triple.eta.deriv(t) * j * cell + adv * triple.eta.eval(t) * f * cell
        })
        .collect();
    let mut j0 = 0.0;
    for x in 0..nxt {
        j0 += phi[x] * tr.m0[0][x];
    }
    let residual = (-triple.eta.eval(0.0) * j0 * cell - quad::trapezoid_uniform(&integ, dt)).abs();
    let scale = norm_scale(triple, phi_sup, 1.0, mass_sup, triple.eta.t_end);
    Ok((residual, scale))
}

fn moment012_residual(
    tr: &MomentTrajectory,
    fiber: &FiberDistribution,
    env: &Environment,
    params: &ScalingParams,
    triple: &TestTriple,
) -> Result<(f64, f64)> {
    let dt = check_density(&tr.times)?;
    let xgrid = &tr.xgrid;
    let n = xgrid.n;
    let nf = n as f64;
    let nxt = xgrid.cells();
    let cell = xgrid.cell_volume();
    let eps = params.epsilon;
    let epsk = params.eps_kappa();
    let a = params.a;

    let mut phi = vec![0.0; nxt];
    let mut gphi = vec![ZERO_VECTOR; nxt];
    let mut hphi = vec![ZERO_MATRIX; nxt];
    let mut vstar = vec![ZERO_VECTOR; nxt];
    let mut e_mean = vec![ZERO_VECTOR; nxt];
    let mut phi_sup = 0.0f64;
    for x in 0..nxt {
        let pos = xgrid.node(x);
        phi[x] = triple.phi.eval(&pos);
        gphi[x] = triple.phi.grad(&pos);
        hphi[x] = triple.phi.hessian(&pos);
        vstar[x] = env.v_star(&pos, eps);
        e_mean[x] = fiber.moments(&pos)?.mean;
        phi_sup = phi_sup
            .max(phi[x].abs() + linalg::norm(n, &gphi[x]) + linalg::max_abs_entry(n, &hphi[x]));
    }

    let m = tr.times.len();
    let mut mass_sup = 0.0f64;
    let mut j_series = vec![0.0; m];
    let mut rhs_series = vec![0.0; m];
    for ti in 0..m {
        let mut j = 0.0;
        let mut g2 = 0.0;
        let mut fv = 0.0;
        let mut fe = 0.0;
        let mut total = 0.0;
        for x in 0..nxt {
            j += phi[x] * tr.m0[ti][x];
            total += tr.m0[ti][x];
            let mut hm = 0.0;
            for i in 0..n {
                for l in 0..n {
                    hm += hphi[x][i][l] * tr.m2[ti][x][i][l];
                }
            }
            g2 += hm;
            fv += linalg::dot(n, &gphi[x], &vstar[x]) * tr.m0[ti][x];
            fe += linalg::dot(n, &gphi[x], &e_mean[x]) * tr.m0[ti][x];
        }
        mass_sup = mass_sup.max(total * cell);
        j_series[ti] = j * cell;
        let advf = params.advection_factor();
        rhs_series[ti] = eps.powi(2 - params.kappa as i32) / (a + 1.0) * g2 * cell
            + advf * (a / (a + 1.0)) * fv * cell
            + advf * (1.0 / (a + 1.0)) * (nf / (nf + 1.0)) * fe * cell;
    }

    // Second-order identity, obtained by eliminating the first moment from
    // the weak formulation (psi = v against grad phi) with the zeroth-order
    // identity: the eps^kappa/(a+1) second-derivative terms and the initial
    // eps/(a+1) flux term enter with positive sign.
    let lhs_int: Vec<f64> = (0..m)
        .map(|ti| {
            let t = tr.times[ti];
            -epsk / (a + 1.0) * triple.eta.second_deriv(t) * j_series[ti]
                + triple.eta.deriv(t) * j_series[ti]
        })
        .collect();
    let rhs_int: Vec<f64> = (0..m)
        .map(|ti| triple.eta.eval(tr.times[ti]) * rhs_series[ti])
        .collect();

    let mut fm1_0 = 0.0;
    for x in 0..nxt {
        fm1_0 += linalg::dot(n, &gphi[x], &tr.m1[0][x]);
    }
    let lhs = epsk / (a + 1.0) * triple.eta.deriv(0.0) * j_series[0]
        - triple.eta.eval(0.0) * j_series[0]
        - quad::trapezoid_uniform(&lhs_int, dt);
    let rhs = quad::trapezoid_uniform(&rhs_int, dt)
        + triple.eta.eval(0.0) * eps / (a + 1.0) * fm1_0 * cell;
    let scale = norm_scale(triple, phi_sup, 1.0, mass_sup, triple.eta.t_end);
    Ok(((lhs - rhs).abs(), scale))
}

fn limit_residual(
    tr: &MacroTrajectory,
    fiber: &FiberDistribution,
    env: &Environment,
    params: &ScalingParams,
    triple: &TestTriple,
    parabolic: bool,
) -> Result<(f64, f64)> {
    let dt = check_density(&tr.times)?;
    let xgrid = &tr.xgrid;
    let n = xgrid.n;
    let nf = n as f64;
    let nxt = xgrid.cells();
    let cell = xgrid.cell_volume();
    let a = params.a;

    let mut phi = vec![0.0; nxt];
    let mut weight = vec![0.0; nxt]; // per-cell weak operator on phi
    let mut phi_sup = 0.0f64;
    for x in 0..nxt {
        let pos = xgrid.node(x);
        phi[x] = triple.phi.eval(&pos);
        let g = triple.phi.grad(&pos);
        let h = triple.phi.hessian(&pos);
        let m = fiber.moments(&pos)?;
        phi_sup = phi_sup.max(phi[x].abs() + linalg::norm(n, &g) + linalg::max_abs_entry(n, &h));
        weight[x] = if parabolic {
            let c_pl = nf / ((a + 1.0) * (2.0 * a + 1.0) * (nf + 2.0));
            let mut dd = 0.0;
            for i in 0..n {
                for l in 0..n {
                    dd += h[i][l] * m.second[i][l];
                }
            }
            let fg = linalg::matvec(n, &env.tensor(&pos), &env.grad_q(&pos));
            c_pl * dd + a / (a + 1.0) * linalg::dot(n, &g, &fg)
        } else {
            let c_hl = nf / ((a + 1.0) * (nf + 1.0));
            c_hl * linalg::dot(n, &g, &m.mean)
        }
    }

    let m = tr.times.len();
    let mut mass_sup = 0.0f64;
    let integ: Vec<f64> = (0..m)
        .map(|ti| {
            let mut j = 0.0;
            let mut r = 0.0;
            let mut total = 0.0;
            for x in 0..nxt {
                j += phi[x] * tr.fields[ti][x];
                r += weight[x] * tr.fields[ti][x];
                total += tr.fields[ti][x];
            }
            mass_sup = mass_sup.max(total * cell);
            let t = tr.times[ti];
            triple.eta.deriv(t) * j * cell + triple.eta.eval(t) * r * cell
        })
        .collect();
    let mut j0 = 0.0;
    for x in 0..nxt {
        j0 += phi[x] * tr.fields[0][x];
    }
    let residual = (-triple.eta.eval(0.0) * j0 * cell - quad::trapezoid_uniform(&integ, dt)).abs();
    let scale = norm_scale(triple, phi_sup, 1.0, mass_sup, triple.eta.t_end);
    Ok((residual, scale))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_boundary_conditions() {
        for sloped in [false, true] {
            let eta = TimeWindow { t_end: 0.8, sloped };
            assert_eq!(eta.eval(0.8), 0.0);
            assert_eq!(eta.deriv(0.8), 0.0);
            assert_eq!(eta.eval(1.7), 0.0);
            assert!((eta.eval(0.0) - 1.0).abs() < 1e-15);
        }
        assert!(
            TimeWindow {
                t_end: 1.0,
                sloped: true
            }
            .deriv(0.0)
                < -1.0
        );
        assert_eq!(
            TimeWindow {
                t_end: 1.0,
                sloped: false
            }
            .deriv(0.0),
            0.0
        );
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        // tolerance 1e-8 relative to each derivative's natural scale
        // (1/w per gradient order for the narrow bumps)
        let xgrid = XGrid::new(2, 16, 1.0).unwrap();
        let suite = build_test_suite(&xgrid, 0.7, 8, 11).unwrap();
        for triple in &suite {
            let x0 = [0.47, 0.52];
            let w = triple.phi.width;
            let h = 3e-6;
            let g = triple.phi.grad(&x0);
            let hess = triple.phi.hessian(&x0);
            let gscale = 1.0 + 1.0 / w;
            let hscale = 1.0 + 1.0 / (w * w);
            for d in 0..2 {
                let mut xp = x0;
                xp[d] += h;
                let mut xm = x0;
                xm[d] -= h;
                let fd = (triple.phi.eval(&xp) - triple.phi.eval(&xm)) / (2.0 * h);
                assert!(
                    (fd - g[d]).abs() <= 1e-8 * gscale,
                    "grad fd {fd} vs {}",
                    g[d]
                );
                for e in 0..2 {
                    let fdh = (triple.phi.grad(&xp)[e] - triple.phi.grad(&xm)[e]) / (2.0 * h);
                    assert!(
                        (fdh - hess[e][d]).abs() <= 1e-8 * hscale,
                        "hessian fd {fdh} vs {}",
                        hess[e][d]
                    );
                }
            }
            // eta derivatives (order-one scale)
            let t0 = 0.31;
            let ht = 1e-6;
            let fd = (triple.eta.eval(t0 + ht) - triple.eta.eval(t0 - ht)) / (2.0 * ht);
            assert!((fd - triple.eta.deriv(t0)).abs() <= 1e-8);
            let fd2 = (triple.eta.deriv(t0 + ht) - triple.eta.deriv(t0 - ht)) / (2.0 * ht);
            assert!((fd2 - triple.eta.second_deriv(t0)).abs() <= 1e-7);
            // psi gradient
            let v0 = [0.3, -0.4];
            let gv = triple.psi.grad(&v0);
            for d in 0..2 {
                let mut vp = v0;
                vp[d] += 1e-6;
                let mut vm = v0;
                vm[d] -= 1e-6;
                let fd = (triple.psi.eval(&vp) - triple.psi.eval(&vm)) / 2e-6;
                assert!((fd - gv[d]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn suite_is_deterministic_with_fixed_first_triple() {
        let xgrid = XGrid::new(1, 32, 1.0).unwrap();
        let a = build_test_suite(&xgrid, 0.5, 6, 3).unwrap();
        let b = build_test_suite(&xgrid, 0.5, 6, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.phi.center, y.phi.center);
            assert_eq!(x.phi.width, y.phi.width);
            assert_eq!(x.psi, y.psi);
        }
        // count = 1: centred Gaussian, psi = 1, plateau window
        let one = build_test_suite(&xgrid, 0.5, 1, 99).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].psi, VelocityTest::One);
        assert_eq!(one[0].phi.poly, PolyFactor::One);
        assert!((one[0].phi.center[0] - 0.5).abs() < 1e-15);
        assert!(!one[0].eta.sloped);
    }

    #[test]
    fn bump_decay_enforced() {
        let xgrid = XGrid::new(1, 32, 1.0).unwrap();
        // too wide: tail above 1e-12 at the boundary
        assert!(SpatialTest::new(&xgrid, [0.5, 0.0], 0.2, PolyFactor::One).is_err());
        assert!(SpatialTest::new(&xgrid, [0.5, 0.0], 0.05, PolyFactor::One).is_ok());
    }

    #[test]
    fn zero_trajectory_zero_residual() {
        let xgrid = XGrid::new(1, 32, 1.0).unwrap();
        let times: Vec<f64> = (0..25).map(|i| i as f64 * 0.02).collect();
        let zeros = vec![vec![0.0; 32]; 25];
        let tr = MacroTrajectory {
            xgrid: xgrid.clone(),
            times: times.clone(),
            fields: zeros,
        };
        let fiber = crate::fiber::FiberDistribution::new(
            1,
            crate::fiber::FiberKind::Discrete { p_plus: 0.5 },
        )
        .unwrap();
        let env = Environment::new(
            xgrid.clone(),
            crate::environment::SignalField::Ramp {
                direction: [1.0, 0.0],
                slope: 0.0,
            },
            crate::environment::TensorField::ScaledIdentity { alpha: 1.0 },
        )
        .unwrap();
        let params = ScalingParams::new(0.5, 2, 1.0, 1).unwrap();
        let tests = build_test_suite(&xgrid, 0.48, 3, 1).unwrap();
        for kind in [ResidualKind::ParabolicLimit, ResidualKind::HyperbolicLimit] {
            let rep = weak_residual(
                kind,
                &TrajectoryData::Macro(&tr),
                &fiber,
                &env,
                &params,
                &tests,
            )
            .unwrap();
            for row in &rep.rows {
                assert_eq!(row.residual, 0.0);
            }
        }
        // mismatched trajectory type is rejected
        assert!(weak_residual(
            ResidualKind::Kte,
            &TrajectoryData::Macro(&tr),
            &fiber,
            &env,
            &params,
            &tests
        )
        .is_err());
        // insufficient snapshot density is rejected
        let sparse = MacroTrajectory {
            xgrid: xgrid.clone(),
            times: times[..10].to_vec(),
            fields: vec![vec![0.0; 32]; 10],
        };
        assert!(weak_residual(
            ResidualKind::ParabolicLimit,
            &TrajectoryData::Macro(&sparse),
            &fiber,
            &env,
            &params,
            &tests
        )
        .is_err());
    }
}
