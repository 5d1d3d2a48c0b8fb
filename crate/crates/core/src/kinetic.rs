//! Operator-splitting solver for the rescaled kinetic transport equation.
//!
//! One Strang step A(dt/2) B(dt/2) C(dt) B(dt/2) A(dt/2):
//!   (A) semi-Lagrangian x-advection at speed eps^{1-kappa} v with
//!       multilinear interpolation and periodic wrap;
//!   (B) velocity drift towards v*_eps along exact backward characteristics
//!       v0 = v* + (v - v*) e^{a d / eps^kappa}, with the divergence-form
//!       Jacobian e^{n a d / eps^kappa}; backtraced points outside the unit
//!       ball receive 0 (absorbing boundary);
//!   (C) exact relaxation c <- e^{-d/eps^kappa} c + (1 - e^{-d/eps^kappa})
//!       n q cbar, which leaves the velocity average invariant.
//!
//! Interpolating substeps are followed by a global mass renormalisation, so
//! nonnegativity and total mass are preserved to rounding. The outermost
//! radial layer is cleared after every step (ghost form of the absorbing
//! boundary condition).

use std::sync::Arc;

use rayon::prelude::*;

use crate::closure;
use crate::environment::{Environment, ScalingParams};
use crate::error::{Error, Result};
use crate::fiber::FiberDistribution;
use crate::grid::PhaseGrid;
use crate::linalg::{Matrix, Vector, ZERO_MATRIX, ZERO_VECTOR};

/// Run rayon only when a pass touches enough cells to pay for it.
const PAR_THRESHOLD: usize = 1 << 15;

/// Initial velocity profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitProfile {
    /// Equilibrium closure q * xi1(|v|).
    Equilibrium,
    /// Uniform density on the velocity ball.
    Isotropic,
}

/// Velocity moments per spatial cell.
#[derive(Debug, Clone)]
pub struct Moments {
    pub m0: Vec<f64>,
    pub m1: Vec<Vector>,
    pub m2: Vec<Matrix>,
}

/// Phase-space density together with its clock.
#[derive(Debug, Clone)]
pub struct KineticState {
    pub t: f64,
    c: Vec<f64>,
    scratch: Vec<f64>,
}

impl KineticState {
    pub fn values(&self) -> &[f64] {
        &self.c
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.c
    }
}

/// Relaxation target of substep (C).
pub(crate) enum RelaxTarget<'a> {
    /// n q cbar with cbar the state's own velocity average.
    SelfConsistent,
    /// n q source(x) with an externally supplied macroscopic field.
    External(&'a [f64]),
}

/// Immutable solver context: grid, scaling, and precomputed tables.
pub struct KineticSolver {
    pub grid: Arc<PhaseGrid>,
    pub params: ScalingParams,
    /// Normalised fiber table, k-major: index k * cells + x.
    q_rows: Vec<f64>,
    /// Taxis velocity v*_eps at each cell.
    vstar: Vec<Vector>,
    /// Equilibrium radial profile at the radial nodes.
    xi1_nodes: Vec<f64>,
    max_speed: f64,
}

impl KineticSolver {
    pub fn new(
        grid: Arc<PhaseGrid>,
        fiber: &FiberDistribution,
        env: &Environment,
        params: ScalingParams,
    ) -> Result<Self> {
        if grid.x.n != params.n {
            return Err(Error::Config("grid/scaling dimension mismatch".into()));
        }
        let nxt = grid.x.cells();
        let kk = grid.dirs.len();
        let table = fiber.direction_table(&grid.x, &grid.dirs)?;
        let mut q_rows = vec![0.0; nxt * kk];
        for x in 0..nxt {
            for k in 0..kk {
                q_rows[k * nxt + x] = table[x * kk + k];
            }
        }
        let vstar = (0..nxt)
            .map(|x| env.v_star(&grid.x.node(x), params.epsilon))
            .collect();
        let xi1_nodes = grid
            .radial
            .nodes
            .iter()
            .map(|&s| closure::xi1(s, params.a, params.n))
            .collect::<Result<Vec<f64>>>()?;
        let max_speed = *grid
            .radial
            .nodes
            .last()
            .ok_or_else(|| Error::Config("empty radial grid".into()))?;
        Ok(Self {
            grid,
            params,
            q_rows,
            vstar,
            xi1_nodes,
            max_speed,
        })
    }

    /// CFL-guided default step 0.5 h / max(eps^{1-kappa}, 1).
    pub fn default_dt(&self) -> f64 {
        0.5 * self.grid.x.spacing() / self.params.advection_factor().max(1.0)
    }

    /// Build an initial state whose velocity integral reproduces `cbar_init`.
    pub fn init_state(&self, cbar_init: &[f64], profile: InitProfile) -> Result<KineticState> {
        let nxt = self.grid.x.cells();
        if cbar_init.len() != nxt {
            return Err(Error::Config("initial density size mismatch".into()));
        }
        if cbar_init.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Precondition(
                "initial density must be finite and non-negative".into(),
            ));
        }
        let kk = self.grid.dirs.len();
        let mut c = vec![0.0; self.grid.velocity_count() * nxt];
        match profile {
            InitProfile::Equilibrium => {
                for j in 0..self.grid.radial.len() {
                    for k in 0..kk {
                        let row = self.grid.row(j, k);
                        let xi = self.xi1_nodes[j];
                        let q = &self.q_rows[k * nxt..(k + 1) * nxt];
                        for x in 0..nxt {
                            c[row * nxt + x] = cbar_init[x] * q[x] * xi;
                        }
                    }
                }
            }
            InitProfile::Isotropic => {
                let inv_vol = 1.0 / self.grid.ball_volume();
                for row in 0..self.grid.velocity_count() {
                    for x in 0..nxt {
                        c[row * nxt + x] = cbar_init[x] * inv_vol;
                    }
                }
            }
        }
        let mut state = KineticState {
            t: 0.0,
            scratch: vec![0.0; c.len()],
            c,
        };
        self.clear_outer_layer(&mut state.c);
        // exact per-cell normalisation of the velocity integral
        let m0 = self.grid.velocity_integral(&state.c);
        let factors: Vec<f64> = (0..nxt)
            .map(|x| {
                if m0[x] > 0.0 {
                    cbar_init[x] / m0[x]
                } else {
                    0.0
                }
            })
            .collect();
        for row in 0..self.grid.velocity_count() {
            let slice = &mut state.c[row * nxt..(row + 1) * nxt];
            for (v, f) in slice.iter_mut().zip(&factors) {
                *v *= f;
            }
        }
        Ok(state)
    }

    /// Advance one Strang step. Errors on CFL violation and on NaNs.
    pub fn step(&self, state: &mut KineticState, dt: f64) -> Result<()> {
        self.step_core(state, dt, RelaxTarget::SelfConsistent)
    }

    pub(crate) fn step_core(
        &self,
        state: &mut KineticState,
        dt: f64,
        target: RelaxTarget,
    ) -> Result<()> {
        let h = self.grid.x.spacing();
        let courant = self.params.advection_factor() * self.max_speed * dt;
        if courant > h * (1.0 + 1e-9) {
            return Err(Error::Numerical(format!(
                "advection CFL violated: eps^(1-kappa) max|v| dt = {courant} > h = {h}"
            )));
        }
        let half = 0.5 * dt;
        let m_pre = self.total_mass_values(&state.c);

        self.advect(state, half);
        self.renormalize(&mut state.c, m_pre)?;
        self.drift(state, half)?;
        self.renormalize(&mut state.c, m_pre)?;

        let m0 = self.grid.velocity_integral(&state.c);
        match target {
            RelaxTarget::SelfConsistent => self.relax(&mut state.c, dt, &m0),
            RelaxTarget::External(src) => self.relax(&mut state.c, dt, src),
        }
        let m_mid = self.total_mass_values(&state.c);
        if !m_mid.is_finite() {
            return Err(self.locate_nan(&state.c, state.t));
        }

        self.drift(state, half)?;
        self.renormalize(&mut state.c, m_mid)?;
        self.advect(state, half);
        self.clear_outer_layer(&mut state.c);
        self.renormalize(&mut state.c, m_mid)?;

        state.t += dt;
        Ok(())
    }

    /// Velocity moments of order 0, 1, 2 per spatial cell.
    pub fn moments(&self, state: &KineticState) -> Moments {
        let nxt = self.grid.x.cells();
        let n = self.grid.x.n;
        let mut m0 = vec![0.0; nxt];
        let mut m1 = vec![ZERO_VECTOR; nxt];
        let mut m2 = vec![ZERO_MATRIX; nxt];
        for j in 0..self.grid.radial.len() {
            for k in 0..self.grid.dirs.len() {
                let w = self.grid.weight(j, k);
                let v = self.grid.velocity(j, k);
                let row = &state.c[self.grid.row(j, k) * nxt..(self.grid.row(j, k) + 1) * nxt];
                for x in 0..nxt {
                    let wv = w * row[x];
                    m0[x] += wv;
                    for i in 0..n {
                        m1[x][i] += wv * v[i];
                        for l in 0..n {
                            m2[x][i][l] += wv * v[i] * v[l];
                        }
                    }
                }
            }
        }
        Moments { m0, m1, m2 }
    }

    /// Total mass: velocity integral summed over the box.
    pub fn total_mass(&self, state: &KineticState) -> f64 {
        self.total_mass_values(&state.c)
    }

    fn total_mass_values(&self, c: &[f64]) -> f64 {
        let nxt = self.grid.x.cells();
        let cell = self.grid.x.cell_volume();
        let mut total = 0.0;
        for j in 0..self.grid.radial.len() {
            for k in 0..self.grid.dirs.len() {
                let w = self.grid.weight(j, k);
                let row = &c[self.grid.row(j, k) * nxt..(self.grid.row(j, k) + 1) * nxt];
                let s: f64 = row.iter().sum();
                total += w * s;
            }
        }
        total * cell
    }

    /// L1 velocity-profile distance from the equilibrium closure q xi1,
    /// maximised over cells whose density exceeds 1% of the peak.
    pub fn profile_distance(&self, state: &KineticState) -> f64 {
        let nxt = self.grid.x.cells();
        let kk = self.grid.dirs.len();
        let m0 = self.grid.velocity_integral(&state.c);
        let peak = m0.iter().cloned().fold(0.0f64, f64::max);
        if peak <= 0.0 {
            return 0.0;
        }
        // discrete-normalised target per cell
        let mut worst = 0.0f64;
        for x in 0..nxt {
            if m0[x] < 0.01 * peak {
                continue;
            }
            let mut norm = 0.0;
            for j in 0..self.grid.radial.len() - 1 {
                for k in 0..kk {
                    norm += self.grid.weight(j, k) * self.q_rows[k * nxt + x] * self.xi1_nodes[j];
                }
            }
            let mut dist = 0.0;
            for j in 0..self.grid.radial.len() {
                for k in 0..kk {
                    let target = if j + 1 == self.grid.radial.len() {
                        0.0
                    } else {
                        self.q_rows[k * nxt + x] * self.xi1_nodes[j] / norm
                    };
                    let have = state.c[self.grid.row(j, k) * nxt + x] / m0[x];
                    dist += self.grid.weight(j, k) * (have - target).abs();
                }
            }
            worst = worst.max(dist);
        }
        worst
    }

    // ---- substeps ----------------------------------------------------

    /// (A) semi-Lagrangian advection, one uniform shift per velocity row.
    pub(crate) fn advect(&self, state: &mut KineticState, delta: f64) {
        let nxt = self.grid.x.cells();
        let nx = self.grid.x.nx;
        let n = self.grid.x.n;
        let h = self.grid.x.spacing();
        let factor = self.params.advection_factor();
        let kk = self.grid.dirs.len();
        let radial = &self.grid.radial.nodes;
        let dirs = &self.grid.dirs.dirs;
        let src = &state.c;
        let dst = &mut state.scratch;

        let work = |row: usize, out: &mut [f64]| {
            let j = row / kk;
            let k = row % kk;
            let s = radial[j];
            let th = dirs[k];
            // backtrace offset in index units per axis
            let mut fo = [0isize; 2];
            let mut fr = [0.0f64; 2];
            for d in 0..n {
                let off = -factor * s * th[d] * delta / h;
                let fl = off.floor();
                fo[d] = fl as isize;
                fr[d] = off - fl;
            }
            let base = &src[row * nxt..(row + 1) * nxt];
            if n == 1 {
                let i0 = fo[0].rem_euclid(nx as isize) as usize;
                let a = fr[0];
                for (i, o) in out.iter_mut().enumerate() {
                    let ia = (i + i0) % nx;
                    let ib = (ia + 1) % nx;
                    *o = (1.0 - a) * base[ia] + a * base[ib];
                }
            } else {
                let i0 = fo[0].rem_euclid(nx as isize) as usize;
                let j0 = fo[1].rem_euclid(nx as isize) as usize;
                let (a, b) = (fr[0], fr[1]);
                for i in 0..nx {
                    let ia = (i + i0) % nx;
                    let ib = (ia + 1) % nx;
                    for jj in 0..nx {
                        let ja = (jj + j0) % nx;
                        let jb = (ja + 1) % nx;
                        out[i * nx + jj] = (1.0 - a)
                            * ((1.0 - b) * base[ia * nx + ja] + b * base[ia * nx + jb])
                            + a * ((1.0 - b) * base[ib * nx + ja] + b * base[ib * nx + jb]);
                    }
                }
            }
        };

        if dst.len() >= PAR_THRESHOLD {
            dst.par_chunks_mut(nxt)
                .enumerate()
                .for_each(|(row, out)| work(row, out));
        } else {
            for (row, out) in dst.chunks_mut(nxt).enumerate() {
                work(row, out);
            }
        }
        std::mem::swap(&mut state.c, &mut state.scratch);
    }

    /// (B) exact-characteristic velocity drift, subdivided so that the
    /// contraction factor per sub-substep stays below e^5.
    pub(crate) fn drift(&self, state: &mut KineticState, delta: f64) -> Result<()> {
        let rate = self.params.a * delta / self.params.eps_kappa();
        let pieces = if rate > 5.0 {
            (rate / 5.0).ceil() as usize
        } else {
            1
        };
        let sub = delta / pieces as f64;
        for _ in 0..pieces {
            let m_pre = self.total_mass_values(&state.c);
            self.drift_once(state, sub);
            self.renormalize(&mut state.c, m_pre)?;
        }
        Ok(())
    }

    fn drift_once(&self, state: &mut KineticState, delta: f64) {
        let nxt = self.grid.x.cells();
        let n = self.grid.x.n;
        let kk = self.grid.dirs.len();
        let lam = (self.params.a * delta / self.params.eps_kappa()).exp();
        let jac = lam.powi(n as i32);
        let radial = &self.grid.radial.nodes;
        let dirs = &self.grid.dirs.dirs;
        let vstar = &self.vstar;
        let src = &state.c;
        let dst = &mut state.scratch;

        let work = |row: usize, out: &mut [f64]| {
            let j = row / kk;
            let k = row % kk;
            let s = radial[j];
            let th = dirs[k];
            let v = [s * th[0], s * th[1]];
            for (x, o) in out.iter_mut().enumerate() {
                let vs = vstar[x];
                let mut v0 = [0.0f64; 2];
                for d in 0..n {
                    v0[d] = vs[d] + (v[d] - vs[d]) * lam;
                }
                *o = jac * self.sample(src, x, &v0);
            }
        };

        if dst.len() >= PAR_THRESHOLD {
            dst.par_chunks_mut(nxt)
                .enumerate()
                .for_each(|(row, out)| work(row, out));
        } else {
            for (row, out) in dst.chunks_mut(nxt).enumerate() {
                work(row, out);
            }
        }
        std::mem::swap(&mut state.c, &mut state.scratch);
    }

    /// Interpolate the phase density at velocity `v0` for spatial cell `x`.
    fn sample(&self, c: &[f64], x: usize, v0: &Vector) -> f64 {
        let nxt = self.grid.x.cells();
        let nodes = &self.grid.radial.nodes;
        let ns = nodes.len();
        let kk = self.grid.dirs.len();
        if self.grid.x.n == 1 {
            let v = v0[0];
            if v.abs() >= 1.0 {
                return 0.0;
            }
            let col = |j: usize, k: usize| c[(j * kk + k) * nxt + x];
            let smin = nodes[0];
            if v.abs() < smin {
                // across the origin: linear between -s_min and +s_min
                let beta = (v + smin) / (2.0 * smin);
                return beta * col(0, 0) + (1.0 - beta) * col(0, 1);
            }
            let k = if v > 0.0 { 0 } else { 1 };
            let s = v.abs();
            if s >= nodes[ns - 1] {
                // taper to the absorbing boundary at s = 1
                let beta = (1.0 - s) / (1.0 - nodes[ns - 1]);
                return beta * col(ns - 1, k);
            }
            let j = lower_index(nodes, s);
            let beta = (s - nodes[j]) / (nodes[j + 1] - nodes[j]);
            (1.0 - beta) * col(j, k) + beta * col(j + 1, k)
        } else {
            let s = (v0[0] * v0[0] + v0[1] * v0[1]).sqrt();
            if s >= 1.0 {
                return 0.0;
            }
            let col = |j: usize, k: usize| c[(j * kk + k) * nxt + x];
            let phi = v0[1].atan2(v0[0]).rem_euclid(2.0 * std::f64::consts::PI);
            let kf = phi / (2.0 * std::f64::consts::PI) * kk as f64;
            let k0 = (kf.floor() as usize) % kk;
            let k1 = (k0 + 1) % kk;
            let alpha = kf - kf.floor();
            let ang = |j: usize| (1.0 - alpha) * col(j, k0) + alpha * col(j, k1);
            if s <= nodes[0] {
                // constant extension inside the innermost shell
                return ang(0);
            }
            if s >= nodes[ns - 1] {
                let beta = (1.0 - s) / (1.0 - nodes[ns - 1]);
                return beta * ang(ns - 1);
            }
            let j = lower_index(nodes, s);
            let beta = (s - nodes[j]) / (nodes[j + 1] - nodes[j]);
            (1.0 - beta) * ang(j) + beta * ang(j + 1)
        }
    }

    /// (C) exact relaxation towards n q times the supplied macroscopic field.
    pub(crate) fn relax(&self, c: &mut [f64], delta: f64, cbar: &[f64]) {
        let nxt = self.grid.x.cells();
        let kk = self.grid.dirs.len();
        let n = self.grid.x.n as f64;
        let decay = (-delta / self.params.eps_kappa()).exp();
        let feed = 1.0 - decay;
        let q_rows = &self.q_rows;
        let work = |row: usize, slice: &mut [f64]| {
            let k = row % kk;
            let q = &q_rows[k * nxt..(k + 1) * nxt];
            for (x, v) in slice.iter_mut().enumerate() {
                *v = decay * *v + feed * n * q[x] * cbar[x];
            }
        };
        if c.len() >= PAR_THRESHOLD {
            c.par_chunks_mut(nxt)
                .enumerate()
                .for_each(|(row, slice)| work(row, slice));
        } else {
            for (row, slice) in c.chunks_mut(nxt).enumerate() {
                work(row, slice);
            }
        }
    }

    pub(crate) fn clear_outer_layer(&self, c: &mut [f64]) {
        let nxt = self.grid.x.cells();
        let kk = self.grid.dirs.len();
        let j = self.grid.radial.len() - 1;
        for k in 0..kk {
            let row = self.grid.row(j, k);
            c[row * nxt..(row + 1) * nxt].fill(0.0);
        }
    }

    pub(crate) fn renormalize(&self, c: &mut [f64], target_mass: f64) -> Result<()> {
        let current = self.total_mass_values(c);
        if !current.is_finite() {
            return Err(self.locate_nan(c, f64::NAN));
        }
        if current <= 0.0 || target_mass <= 0.0 {
            return Ok(());
        }
        let f = target_mass / current;
        if (f - 1.0).abs() < 1e-15 {
            return Ok(());
        }
        if c.len() >= PAR_THRESHOLD {
            c.par_iter_mut().for_each(|v| *v *= f);
        } else {
            c.iter_mut().for_each(|v| *v *= f);
        }
        Ok(())
    }

    fn locate_nan(&self, c: &[f64], t: f64) -> Error {
        let nxt = self.grid.x.cells();
        let kk = self.grid.dirs.len();
        for (idx, v) in c.iter().enumerate() {
            if !v.is_finite() {
                let row = idx / nxt;
                let x = idx % nxt;
                return Error::Numerical(format!(
                    "non-finite density at t = {t}, cell {:?}, radial {}, direction {}",
                    self.grid.x.unflat(x),
                    row / kk,
                    row % kk
                ));
            }
        }
        Error::Numerical(format!("non-finite total mass at t = {t}"))
    }
}

fn lower_index(nodes: &[f64], s: f64) -> usize {
    // nodes ascending; returns j with nodes[j] <= s < nodes[j+1]
    match nodes.binary_search_by(|v| v.partial_cmp(&s).unwrap()) {
        Ok(j) => j.min(nodes.len() - 2),
        Err(ins) => ins.saturating_sub(1).min(nodes.len() - 2),
    }
}
