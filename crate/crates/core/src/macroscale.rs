//! Macroscopic limit equations and their finite-volume integration.
//!
//! Four model kinds, written after dividing the limit equations by (a + 1):
//!   ParabolicZero       d_t c = cPL grad grad : (D c) - div(c uP)
//!   ParabolicCorrected  same with the flux-limited drift uP / (1 + eps|grad Q|)
//!   HyperbolicZero      d_t c + div(c uH) = 0
//!   HyperbolicCorrected d_t c + div(c uH) = eps [ cPL grad grad : (D c)
//!                         - cEE div(E div(c E)) - div(c uP) ]
//! with cPL = n / ((a+1)(2a+1)(n+2)), uP = a/(a+1) F grad Q,
//! uH = n / ((a+1)(n+1)) E[q], cEE = n^2 / ((a+1)^3 (n+1)^2).
//!
//! Drift terms use first-order upwind fluxes (monotone), the myopic term
//! nested centred differences of the products D_ij c, and time stepping is
//! two-stage Heun. All pieces are conservative on the periodic box.

use crate::environment::{Environment, ScalingParams};
use crate::error::{Error, Result};
use crate::fiber::{FiberDistribution, FiberMoments};
use crate::fields;
use crate::grid::XGrid;
use crate::linalg::{self, Matrix, Vector, ZERO_MATRIX, ZERO_VECTOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MacroKind {
    ParabolicZero,
    HyperbolicZero,
    ParabolicCorrected,
    HyperbolicCorrected,
}

impl MacroKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "parabolic_zero" => Ok(Self::ParabolicZero),
            "hyperbolic_zero" => Ok(Self::HyperbolicZero),
            "parabolic_corrected" => Ok(Self::ParabolicCorrected),
            "hyperbolic_corrected" => Ok(Self::HyperbolicCorrected),
            other => Err(Error::Config(format!("unknown macro kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ParabolicZero => "parabolic_zero",
            Self::HyperbolicZero => "hyperbolic_zero",
            Self::ParabolicCorrected => "parabolic_corrected",
            Self::HyperbolicCorrected => "hyperbolic_corrected",
        }
    }
}

/// Assembled coefficient fields of one macroscopic model.
#[derive(Debug, Clone)]
pub struct MacroModel {
    pub kind: MacroKind,
    pub xgrid: XGrid,
    /// Drift velocity u(x).
    pub drift: Vec<Vector>,
    /// Tensor inside the double-divergence myopic term (coefficient folded in).
    pub myopic: Vec<Matrix>,
    /// Mean-orientation field for the corrected hyperbolic transport term.
    pub e_field: Vec<Vector>,
    /// Coefficient of div(E div(c E)) (zero except HyperbolicCorrected).
    pub edd_coef: f64,
    /// Effective diffusion tensor (myopic combined with the E-term),
    /// symmetric positive semidefinite at every node; drives the CFL bound.
    pub diffusion: Vec<Matrix>,
}

/// Macroscopic density with its clock.
#[derive(Debug, Clone)]
pub struct MacroState {
    pub t: f64,
    pub cbar: Vec<f64>,
}

/// Uniformly sampled macroscopic trajectory.
#[derive(Debug, Clone)]
pub struct MacroTrajectory {
    pub xgrid: XGrid,
    pub times: Vec<f64>,
    pub fields: Vec<Vec<f64>>,
}

impl MacroTrajectory {
    /// Linear interpolation in time.
    pub fn at_time(&self, t: f64) -> Vec<f64> {
        if self.times.len() == 1 || t <= self.times[0] {
            return self.fields[0].clone();
        }
        let last = *self.times.last().unwrap();
        if t >= last {
            return self.fields.last().unwrap().clone();
        }
        let mut i = 0;
        while self.times[i + 1] < t {
            i += 1;
        }
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let w = (t - t0) / (t1 - t0);
        self.fields[i]
            .iter()
            .zip(&self.fields[i + 1])
            .map(|(a, b)| (1.0 - w) * a + w * b)
            .collect()
    }

    /// True when `t` coincides with a stored snapshot time.
    pub fn has_time(&self, t: f64) -> bool {
        self.times.iter().any(|&s| (s - t).abs() < 1e-12)
    }
}

/// Diffusion tensor of the corrected hyperbolic model (up to constants):
/// V[q] + (1 - (2a+1) n (n+2) / ((a+1)^2 (n+1)^2)) E (x) E. The coefficient
/// is positive for every a > 0, so the combination stays PSD.
pub fn hyperbolic_first_order_tensor(m: &FiberMoments, a: f64, n: usize) -> Matrix {
    let nf = n as f64;
    let coef =
        1.0 - (2.0 * a + 1.0) * nf * (nf + 2.0) / ((a + 1.0) * (a + 1.0) * (nf + 1.0) * (nf + 1.0));
    let t = linalg::mat_add(
        n,
        &m.covariance,
        &linalg::mat_scale(n, &linalg::outer(n, &m.mean, &m.mean), coef),
    );
    let ev = linalg::sym_eigenvalues(n, &t);
    assert!(
        ev[0] >= -1e-12,
        "first-order hyperbolic tensor lost positive semidefiniteness: {ev:?}"
    );
    t
}

/// Assemble coefficient fields for the requested model kind.
pub fn assemble(
    kind: MacroKind,
    fiber: &FiberDistribution,
    env: &Environment,
    params: &ScalingParams,
) -> Result<MacroModel> {
    let xgrid = env.xgrid.clone();
    let n = params.n;
    let nf = n as f64;
    let a = params.a;
    let eps = params.epsilon;

    if matches!(
        kind,
        MacroKind::ParabolicZero | MacroKind::ParabolicCorrected
    ) {
        let rep = fiber.symmetry_check(1e-8)?;
        if !rep.undirected {
            return Err(Error::Precondition(format!(
                "{} requires a vanishing mean fiber orientation; max |E[q]| = {}",
                kind.name(),
                rep.max_mean
            )));
        }
    }
    if kind == MacroKind::ParabolicCorrected {
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
                "parabolic_corrected requires a vanishing third fiber moment; max |T| = {max_t}"
            )));
        }
    }

    let c_pl = nf / ((a + 1.0) * (2.0 * a + 1.0) * (nf + 2.0));
    let c_hl = nf / ((a + 1.0) * (nf + 1.0));
    let c_ee = nf * nf / ((a + 1.0).powi(3) * (nf + 1.0) * (nf + 1.0));
    let taxis = a / (a + 1.0);

    let cells = xgrid.cells();
    let mut drift = vec![ZERO_VECTOR; cells];
    let mut myopic = vec![ZERO_MATRIX; cells];
    let mut e_field = vec![ZERO_VECTOR; cells];
    let mut diffusion = vec![ZERO_MATRIX; cells];
    let mut edd_coef = 0.0;

    for idx in 0..cells {
        let x = xgrid.node(idx);
        let m = fiber.moments(&x)?;
        let g = env.grad_q(&x);
        let gn = linalg::norm(n, &g);
        let fg = linalg::matvec(n, &env.tensor(&x), &g);
        match kind {
            MacroKind::ParabolicZero => {
                drift[idx] = linalg::scale(n, &fg, taxis);
                myopic[idx] = linalg::mat_scale(n, &m.second, c_pl);
                diffusion[idx] = myopic[idx];
            }
            MacroKind::ParabolicCorrected => {
                drift[idx] = linalg::scale(n, &fg, taxis / (1.0 + eps * gn));
                myopic[idx] = linalg::mat_scale(n, &m.second, c_pl);
                diffusion[idx] = myopic[idx];
            }
            MacroKind::HyperbolicZero => {
                drift[idx] = linalg::scale(n, &m.mean, c_hl);
            }
            MacroKind::HyperbolicCorrected => {
                let base = linalg::scale(n, &m.mean, c_hl);
                drift[idx] = linalg::add(n, &base, &linalg::scale(n, &fg, eps * taxis));
                myopic[idx] = linalg::mat_scale(n, &m.second, eps * c_pl);
                e_field[idx] = m.mean;
                edd_coef = eps * c_ee;
                // combined effective tensor, PSD by the remark's decomposition
                diffusion[idx] =
                    linalg::mat_scale(n, &hyperbolic_first_order_tensor(&m, a, n), eps * c_pl);
            }
        }
        let ev = linalg::sym_eigenvalues(n, &diffusion[idx]);
        if ev[0] < -1e-12 {
            return Err(Error::Numerical(format!(
                "assembled diffusion tensor indefinite at cell {idx}: {ev:?}"
            )));
        }
    }

    Ok(MacroModel {
        kind,
        xgrid,
        drift,
        myopic,
        e_field,
        edd_coef,
        diffusion,
    })
}

/// Conservative upwind divergence of (u c) with face-averaged velocities.
pub fn upwind_divergence(xgrid: &XGrid, u: &[Vector], c: &[f64]) -> Vec<f64> {
    let h = xgrid.spacing();
    let cells = xgrid.cells();
    let mut out = vec![0.0; cells];
    for d in 0..xgrid.n {
        for idx in 0..cells {
            let up = xgrid.shift(idx, d, 1);
            let dn = xgrid.shift(idx, d, -1);
            let u_plus = 0.5 * (u[idx][d] + u[up][d]);
            let u_minus = 0.5 * (u[dn][d] + u[idx][d]);
            let flux_plus = u_plus.max(0.0) * c[idx] + u_plus.min(0.0) * c[up];
            let flux_minus = u_minus.max(0.0) * c[dn] + u_minus.min(0.0) * c[idx];
            out[idx] += (flux_plus - flux_minus) / h;
        }
    }
    out
}

/// Myopic operator grad grad^T : (M c) by nested centred differences of the
/// products M_ij c.
pub fn myopic_nested(xgrid: &XGrid, m: &[Matrix], c: &[f64]) -> Vec<f64> {
    let cells = xgrid.cells();
    let mut out = vec![0.0; cells];
    let mut product = vec![0.0; cells];
    for d1 in 0..xgrid.n {
        for d2 in 0..xgrid.n {
            for idx in 0..cells {
                product[idx] = m[idx][d1][d2] * c[idx];
            }
            let inner = fields::centered_diff_axis(xgrid, &product, d2);
            let outer = fields::centered_diff_axis(xgrid, &inner, d1);
            for idx in 0..cells {
                out[idx] += outer[idx];
            }
        }
    }
    out
}

/// div(E div(c E)) by nested centred divergences.
fn e_double_divergence(xgrid: &XGrid, e: &[Vector], c: &[f64]) -> Vec<f64> {
    let cells = xgrid.cells();
    let flux: Vec<Vector> = (0..cells)
        .map(|idx| linalg::scale(xgrid.n, &e[idx], c[idx]))
        .collect();
    let w = fields::centered_divergence(xgrid, &flux);
    let outer: Vec<Vector> = (0..cells)
        .map(|idx| linalg::scale(xgrid.n, &e[idx], w[idx]))
        .collect();
    fields::centered_divergence(xgrid, &outer)
}

fn rhs(model: &MacroModel, c: &[f64]) -> Vec<f64> {
    let mut out = upwind_divergence(&model.xgrid, &model.drift, c);
    for v in out.iter_mut() {
        *v = -*v;
    }
    let has_myopic = model
        .myopic
        .iter()
        .any(|m| linalg::max_abs_entry(model.xgrid.n, m) > 0.0);
    if has_myopic {
        let myo = myopic_nested(&model.xgrid, &model.myopic, c);
        for (o, m) in out.iter_mut().zip(&myo) {
            *o += m;
        }
    }
    if model.edd_coef != 0.0 {
        let edd = e_double_divergence(&model.xgrid, &model.e_field, c);
        for (o, e) in out.iter_mut().zip(&edd) {
            *o -= model.edd_coef * e;
        }
    }
    out
}

/// Stability bound min(h / max|u|, h^2 / (2 n max eig)); infinite when the
/// model has neither drift nor diffusion.
pub fn cfl_bound(model: &MacroModel) -> f64 {
    let n = model.xgrid.n;
    let h = model.xgrid.spacing();
    let mut umax = 0.0f64;
    for u in &model.drift {
        umax = umax.max(linalg::norm(n, u));
    }
    let mut digmax = 0.0f64;
    for m in &model.diffusion {
        digmax = digmax.max(linalg::sym_eigenvalues(n, m)[n - 1]);
    }
    let mut bound = f64::INFINITY;
    if umax > 0.0 {
        bound = bound.min(h / umax);
    }
    if digmax > 0.0 {
        bound = bound.min(h * h / (2.0 * n as f64 * digmax));
    }
    bound
}

/// One Heun step; errors when `dt` violates the CFL bound.
pub fn step_macro(model: &MacroModel, state: &mut MacroState, dt: f64) -> Result<()> {
    let bound = cfl_bound(model);
    if dt > bound * (1.0 + 1e-9) {
        return Err(Error::Numerical(format!(
            "macro CFL violated: dt = {dt} > bound = {bound}"
        )));
    }
    let k1 = rhs(model, &state.cbar);
    let stage: Vec<f64> = state
        .cbar
        .iter()
        .zip(&k1)
        .map(|(c, r)| c + dt * r)
        .collect();
    let k2 = rhs(model, &stage);
    for ((c, r1), r2) in state.cbar.iter_mut().zip(&k1).zip(&k2) {
        *c += 0.5 * dt * (r1 + r2);
    }
    state.t += dt;
    Ok(())
}

/// Integrate to `t_end` with automatic step size, storing `snapshots`
/// uniformly spaced fields (including t = 0).
pub fn solve(
    model: &MacroModel,
    cbar_init: &[f64],
    t_end: f64,
    snapshots: usize,
) -> Result<MacroTrajectory> {
    if cbar_init.len() != model.xgrid.cells() {
        return Err(Error::Config("initial density size mismatch".into()));
    }
    let mut state = MacroState {
        t: 0.0,
        cbar: cbar_init.to_vec(),
    };
    let mut times = vec![0.0];
    let mut fields = vec![state.cbar.clone()];
    if t_end <= 0.0 || snapshots < 2 {
        return Ok(MacroTrajectory {
            xgrid: model.xgrid.clone(),
            times,
            fields,
        });
    }
    let interval = t_end / (snapshots - 1) as f64;
    let dt_max = 0.45 * cfl_bound(model);
    let per = if dt_max.is_finite() {
        (interval / dt_max).ceil() as usize
    } else {
        1
    }
    .max(1);
    let dt = interval / per as f64;
    for snap in 1..snapshots {
        for _ in 0..per {
            step_macro(model, &mut state, dt)?;
        }
        // land exactly on the snapshot time
        state.t = interval * snap as f64;
        times.push(state.t);
        fields.push(state.cbar.clone());
    }
    Ok(MacroTrajectory {
        xgrid: model.xgrid.clone(),
        times,
        fields,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::environment::{SignalField, TensorField};
    use crate::fiber::FiberKind;

    fn env_with(xgrid: &XGrid, signal: SignalField) -> Environment {
        Environment::new(
            xgrid.clone(),
            signal,
            TensorField::ScaledIdentity { alpha: 1.0 },
        )
        .unwrap()
    }

    fn flat() -> SignalField {
        SignalField::Ramp {
            direction: [1.0, 0.0],
            slope: 0.0,
        }
    }

    fn bump(xgrid: &XGrid, width: f64) -> Vec<f64> {
        let c = 0.5 * xgrid.length;
        (0..xgrid.cells())
            .map(|i| {
                let x = xgrid.node(i);
                let mut r2 = 0.0;
                for d in 0..xgrid.n {
                    r2 += (x[d] - c) * (x[d] - c);
                }
                (-r2 / (2.0 * width * width)).exp()
            })
            .collect()
    }

    #[test]
    fn parabolic_coefficients_at_unit_a() {
        // a = 1, n = 2: myopic coefficient 1/12 on D = I/2 entries 1/24;
        // drift coefficient 1/2
        let xgrid = XGrid::new(2, 8, 1.0).unwrap();
        let fiber = FiberDistribution::new(2, FiberKind::Uniform).unwrap();
        let env = env_with(
            &xgrid,
            SignalField::Ramp {
                direction: [1.0, 0.0],
                slope: 0.4,
            },
        );
        let params = ScalingParams::new(0.1, 2, 1.0, 2).unwrap();
        let model = assemble(MacroKind::ParabolicZero, &fiber, &env, &params).unwrap();
        // c_pl = 1/(2*3) * 2/4 = 1/12; on D = diag(1/2)
        assert!((model.myopic[0][0][0] - 1.0 / 24.0).abs() < 1e-12);
        assert!((model.drift[0][0] - 0.5 * 0.4).abs() < 1e-12);
        assert!(model.drift[0][1].abs() < 1e-14);
    }

    #[test]
    fn hyperbolic_drift_speed() {
        // a = 1, n = 1, E = 0.5 -> drift 0.125
        let xgrid = XGrid::new(1, 8, 1.0).unwrap();
        let fiber = FiberDistribution::new(1, FiberKind::Discrete { p_plus: 0.75 }).unwrap();
        let env = env_with(&xgrid, flat());
        let params = ScalingParams::new(0.1, 1, 1.0, 1).unwrap();
        let model = assemble(MacroKind::HyperbolicZero, &fiber, &env, &params).unwrap();
        assert!((model.drift[0][0] - 0.125).abs() < 1e-12);
        assert!(model.diffusion[0][0][0] == 0.0);
    }

    #[test]
    fn parabolic_rejects_directed_fibers() {
        let xgrid = XGrid::new(1, 8, 1.0).unwrap();
        let fiber = FiberDistribution::new(1, FiberKind::Discrete { p_plus: 0.75 }).unwrap();
        let env = env_with(&xgrid, flat());
        let params = ScalingParams::new(0.1, 2, 1.0, 1).unwrap();
        let err = assemble(MacroKind::ParabolicZero, &fiber, &env, &params);
        assert!(matches!(err, Err(Error::Precondition(_))));
    }

    #[test]
    fn first_order_tensor_coefficient_and_psd() {
        // a = 1, n = 2: coefficient 1 - 24/36 = 1/3
        let fiber = FiberDistribution::new(
            2,
            FiberKind::VonMises {
                mean: [1.0, 0.0],
                concentration: 2.0,
            },
        )
        .unwrap();
        let m = fiber.moments(&ZERO_VECTOR).unwrap();
        let t = hyperbolic_first_order_tensor(&m, 1.0, 2);
        let expect = m.covariance[0][0] + (1.0 / 3.0) * m.mean[0] * m.mean[0];
        assert!((t[0][0] - expect).abs() < 1e-12);

        // n = 1, p+ = 0.75, a = 1: 0.75 + (7/16) 0.25
        let f1 = FiberDistribution::new(1, FiberKind::Discrete { p_plus: 0.75 }).unwrap();
        let m1 = f1.moments(&ZERO_VECTOR).unwrap();
        let t1 = hyperbolic_first_order_tensor(&m1, 1.0, 1);
        assert!((t1[0][0] - (0.75 + 7.0 / 16.0 * 0.25)).abs() < 1e-12);
        assert!(t1[0][0] > 0.0);

        // E = 0 returns V
        let fu = FiberDistribution::new(2, FiberKind::Uniform).unwrap();
        let mu = fu.moments(&ZERO_VECTOR).unwrap();
        let tu = hyperbolic_first_order_tensor(&mu, 0.7, 2);
        assert!((tu[0][0] - mu.covariance[0][0]).abs() < 1e-14);
    }

    #[test]
    fn zero_model_is_identity_map() {
        let xgrid = XGrid::new(1, 16, 1.0).unwrap();
        let fiber = FiberDistribution::new(1, FiberKind::Discrete { p_plus: 0.5 }).unwrap();
        let env = env_with(&xgrid, flat());
        let params = ScalingParams::new(0.1, 1, 1.0, 1).unwrap();
        // undirected fibers: E = 0, hyperbolic drift vanishes
        let model = assemble(MacroKind::HyperbolicZero, &fiber, &env, &params).unwrap();
        let init = bump(&xgrid, 0.1);
        let mut st = MacroState {
            t: 0.0,
            cbar: init.clone(),
        };
        step_macro(&model, &mut st, 0.01).unwrap();
        for (a, b) in st.cbar.iter().zip(&init) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn pure_drift_translates_bump() {
        // hyperbolic, E = 0.5, a = 1: centre of mass moves at 0.125
        let xgrid = XGrid::new(1, 256, 1.0).unwrap();
        let fiber = FiberDistribution::new(1, FiberKind::Discrete { p_plus: 0.75 }).unwrap();
        let env = env_with(&xgrid, flat());
        let params = ScalingParams::new(0.1, 1, 1.0, 1).unwrap();
        let model = assemble(MacroKind::HyperbolicZero, &fiber, &env, &params).unwrap();
        let init = bump(&xgrid, 0.05);
        let traj = solve(&model, &init, 1.0, 11).unwrap();
        let com = |f: &[f64]| -> f64 {
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, v) in f.iter().enumerate() {
                num += xgrid.node(i)[0] * v;
                den += v;
            }
            num / den
        };
        let shift = com(traj.fields.last().unwrap()) - com(&traj.fields[0]);
        assert!((shift - 0.125).abs() < 0.05 * 0.125, "shift {shift}");
        // upwind drift keeps the density non-negative
        assert!(traj.fields.last().unwrap().iter().all(|v| *v >= 0.0));
        // mass conservation
        let mass: Vec<f64> = traj.fields.iter().map(|f| f.iter().sum()).collect();
        for m in &mass {
            assert!(((m - mass[0]) / mass[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn pure_drift_matches_exact_translation_in_l1() {
        // constant E: the drift equation translates the data; the upwind
        // solution converges to the exact translate at first order
        let fiber = FiberDistribution::new(1, FiberKind::Discrete { p_plus: 0.75 }).unwrap();
        let params = ScalingParams::new(0.1, 1, 1.0, 1).unwrap();
        let (speed, t_end, w) = (0.125, 1.0, 0.06);
        let mut errs = Vec::new();
        for nx in [128usize, 256] {
            let xgrid = XGrid::new(1, nx, 1.0).unwrap();
            let env = env_with(&xgrid, flat());
            let model = assemble(MacroKind::HyperbolicZero, &fiber, &env, &params).unwrap();
            let init: Vec<f64> = (0..nx)
                .map(|i| {
                    let x = xgrid.node(i)[0];
                    (-(x - 0.4) * (x - 0.4) / (2.0 * w * w)).exp()
                })
                .collect();
            let traj = solve(&model, &init, t_end, 3).unwrap();
            let exact: Vec<f64> = (0..nx)
                .map(|i| {
                    let x = xgrid.node(i)[0] - speed * t_end;
                    (-(x - 0.4) * (x - 0.4) / (2.0 * w * w)).exp()
                })
                .collect();
            let err: f64 = traj
                .fields
                .last()
                .unwrap()
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / nx as f64;
            errs.push(err);
        }
        assert!(errs[1] < errs[0], "no refinement: {errs:?}");
        // first-order bound C h with C pinned from the coarse run
        let c_bound = errs[0] * 128.0;
        assert!(errs[1] <= c_bound / 256.0 * 1.2, "{errs:?}");
    }

    #[test]
    fn diffusion_variance_growth() {
        // n = 1 undirected: D = 1, variance grows at 2 cPL per unit time
        let xgrid = XGrid::new(1, 256, 1.0).unwrap();
        let fiber = FiberDistribution::new(1, FiberKind::Discrete { p_plus: 0.5 }).unwrap();
        let env = env_with(&xgrid, flat());
        let a = 1.0;
        let params = ScalingParams::new(0.1, 2, a, 1).unwrap();
        let model = assemble(MacroKind::ParabolicZero, &fiber, &env, &params).unwrap();
        let c_pl = 1.0 / ((a + 1.0) * (2.0 * a + 1.0) * 3.0);
        let init = bump(&xgrid, 0.04);
        let t_end = 0.05;
        let traj = solve(&model, &init, t_end, 6).unwrap();
        let variance = |f: &[f64]| -> f64 {
            let mut m0 = 0.0;
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for (i, v) in f.iter().enumerate() {
                let x = xgrid.node(i)[0];
                m0 += v;
                m1 += x * v;
                m2 += x * x * v;
            }
            m2 / m0 - (m1 / m0) * (m1 / m0)
        };
        let rate = (variance(traj.fields.last().unwrap()) - variance(&traj.fields[0])) / t_end;
        let expect = 2.0 * c_pl;
        assert!(
            (rate - expect).abs() < 0.02 * expect,
            "variance rate {rate} vs {expect}"
        );
        let min = traj
            .fields
            .last()
            .unwrap()
            .iter()
            .cloned()
            .fold(f64::INFINITY, f64::min);
        assert!(min >= -1e-12, "min {min:e}");
    }

    #[test]
    fn mass_conserved_all_kinds() {
        let xgrid = XGrid::new(2, 24, 1.0).unwrap();
        let fiber = FiberDistribution::new(
            2,
            FiberKind::Mixture(vec![
                (
                    0.5,
                    FiberKind::VonMises {
                        mean: [0.0, 1.0],
                        concentration: 1.0,
                    },
                ),
                (
                    0.5,
                    FiberKind::VonMises {
                        mean: [0.0, -1.0],
                        concentration: 1.0,
                    },
                ),
            ]),
        )
        .unwrap();
        let directed = FiberDistribution::new(
            2,
            FiberKind::VonMises {
                mean: [1.0, 1.0],
                concentration: 1.5,
            },
        )
        .unwrap();
        let env = env_with(
            &xgrid,
            SignalField::Gaussian {
                center: [0.5, 0.5],
                width: 0.2,
                amplitude: 0.5,
            },
        );
        let init = bump(&xgrid, 0.12);
        for (kind, fib, kappa) in [
            (MacroKind::ParabolicZero, &fiber, 2u8),
            (MacroKind::ParabolicCorrected, &fiber, 2),
            (MacroKind::HyperbolicZero, &directed, 1),
            (MacroKind::HyperbolicCorrected, &directed, 1),
        ] {
            let params = ScalingParams::new(0.1, kappa, 1.0, 2).unwrap();
            let model = assemble(kind, fib, &env, &params).unwrap();
            let traj = solve(&model, &init, 0.2, 5).unwrap();
            let m0: f64 = traj.fields[0].iter().sum();
            let m1: f64 = traj.fields.last().unwrap().iter().sum();
            assert!(
                ((m1 - m0) / m0).abs() <= 1e-10,
                "{}: mass drift {}",
                kind.name(),
                (m1 - m0) / m0
            );
            for d in &model.diffusion {
                assert!(linalg::sym_eigenvalues(2, d)[0] >= -1e-12);
            }
        }
    }

    #[test]
    fn cfl_violation_rejected() {
        let xgrid = XGrid::new(1, 64, 1.0).unwrap();
        let fiber = FiberDistribution::new(1, FiberKind::Discrete { p_plus: 0.75 }).unwrap();
        let env = env_with(&xgrid, flat());
        let params = ScalingParams::new(0.1, 1, 1.0, 1).unwrap();
        let model = assemble(MacroKind::HyperbolicZero, &fiber, &env, &params).unwrap();
        let mut st = MacroState {
            t: 0.0,
            cbar: bump(&xgrid, 0.1),
        };
        let bound = cfl_bound(&model);
        assert!(step_macro(&model, &mut st, 2.0 * bound).is_err());
    }

    #[test]
    fn myopic_decomposition_consistency() {
        // nested double divergence = divergence form + transport by div(D),
        // verified by refinement on a smooth manufactured tensor field
        let mut errors = Vec::new();
        for nx in [32usize, 64] {
            let xgrid = XGrid::new(2, nx, 1.0).unwrap();
            let cells = xgrid.cells();
            let mut d = vec![ZERO_MATRIX; cells];
            let mut c = vec![0.0; cells];
            for idx in 0..cells {
                let x = xgrid.node(idx);
                let p = (2.0 * std::f64::consts::PI * x[0]).sin();
                let q = (2.0 * std::f64::consts::PI * x[1]).cos();
                d[idx] = [[0.6 + 0.2 * p, 0.1 * p * q], [0.1 * p * q, 0.4 + 0.1 * q]];
                c[idx] = (2.0 * std::f64::consts::PI * x[0]).cos()
                    * (2.0 * std::f64::consts::PI * x[1]).sin()
                    + 1.5;
            }
            let nested = myopic_nested(&xgrid, &d, &c);

            // divergence form: sum_i d_i ( sum_j D_ij d_j c )
            let grad_c = fields::centered_gradient(&xgrid, &c);
            let flux: Vec<Vector> = (0..cells)
                .map(|idx| linalg::matvec(2, &d[idx], &grad_c[idx]))
                .collect();
            let div_form = fields::centered_divergence(&xgrid, &flux);
            // transport form: div( c div(D) )
            let ones = vec![1.0; cells];
            let div_d = fields::centered_div_matrix_scalar(&xgrid, &d, &ones);
            let trans: Vec<Vector> = (0..cells)
                .map(|idx| linalg::scale(2, &div_d[idx], c[idx]))
                .collect();
            let div_trans = fields::centered_divergence(&xgrid, &trans);

            let mut err = 0.0f64;
            for idx in 0..cells {
                err = err.max((nested[idx] - div_form[idx] - div_trans[idx]).abs());
            }
            errors.push(err);
        }
        assert!(
            errors[1] < errors[0] / 3.0,
            "decomposition defect {errors:?} not O(h^2)"
        );
    }

    use crate::linalg::ZERO_VECTOR;
}
