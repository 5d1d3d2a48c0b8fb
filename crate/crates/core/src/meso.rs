//! Positivity- and mass-preserving mesoscopic first-order approximation.
//!
//! Instead of adding the (possibly sign-changing) first-order correction to
//! the leading term, the truncated transport equation is solved directly:
//! the relaxation target n q cbar of the kinetic equation is replaced by the
//! frozen external source n q c01(t, x), where c01 is the first-order
//! macroscopic approximation obtained from the limit equations. Transport
//! and drift substeps are shared with the kinetic solver, so nonnegativity
//! is inherited; the total mass obeys the linear relaxation ODE
//! eps^kappa M' + M = M_source.

use crate::error::{Error, Result};
use crate::kinetic::{KineticSolver, KineticState, RelaxTarget};
use crate::macroscale::MacroTrajectory;

/// Output of a truncated-equation run.
#[derive(Debug, Clone)]
pub struct TildeRun {
    pub times: Vec<f64>,
    /// Total mass at every accepted step.
    pub masses: Vec<f64>,
    /// Velocity-average fields at the stored snapshot times.
    pub m0_snapshots: Vec<Vec<f64>>,
    pub snapshot_times: Vec<f64>,
    /// Global minimum of the phase density over the whole run.
    pub min_value: f64,
    /// The solver's step times did not line up with the source snapshots,
    /// so the source was interpolated linearly in time.
    pub interpolated_source: bool,
    /// Monitored: largest L1 distance between the velocity average of the
    /// solution and the source field at the snapshot times. Shrinks with
    /// epsilon when the source is the solved macroscopic limit.
    pub tracking_l1: f64,
    pub final_state: KineticState,
}

/// Conservation verdict for a tilde run.
#[derive(Debug, Clone)]
pub struct ConservationReport {
    /// max_t |M(t) - M(0)| / M(0).
    pub mass_drift: f64,
    pub min_value: f64,
    /// Source mass equals the initial mass (within tolerance).
    pub precondition_ok: bool,
    /// Largest deviation of the measured mass from the analytic transient
    /// M_src + (M_0 - M_src) e^{-t / eps^kappa}.
    pub max_transient_deviation: f64,
}

/// Integrate the truncated first-order equation against a frozen
/// macroscopic source trajectory.
pub fn solve_tilde(
    solver: &KineticSolver,
    mut state: KineticState,
    source: &MacroTrajectory,
    t_end: f64,
    snapshots: usize,
) -> Result<TildeRun> {
    if source.xgrid != solver.grid.x {
        return Err(Error::Config("source trajectory grid mismatch".into()));
    }
    if source
        .fields
        .iter()
        .any(|f| f.iter().any(|v| !v.is_finite() || *v < 0.0))
    {
        return Err(Error::Precondition(
            "source trajectory must be finite and non-negative".into(),
        ));
    }
    if state.values().iter().any(|v| *v < 0.0) {
        return Err(Error::Precondition(
            "initial phase density must be non-negative".into(),
        ));
    }

    let dt_max = solver.default_dt();
    let snapshots = snapshots.max(2);
    let interval = t_end / (snapshots - 1) as f64;
    let per = (interval / dt_max).ceil().max(1.0) as usize;
    let dt = interval / per as f64;

    let mut interpolated = false;
    let mut min_value = state.values().iter().cloned().fold(f64::INFINITY, f64::min);
    let mut times = vec![state.t];
    let mut masses = vec![solver.total_mass(&state)];
    let mut snapshot_times = vec![state.t];
    let mut m0_snapshots = vec![solver.grid.velocity_integral(state.values())];

    for snap in 1..snapshots {
        for _ in 0..per {
            // midpoint-in-time source for the exact relaxation formula
            let t_mid = state.t + 0.5 * dt;
            if !source.has_time(t_mid) {
                interpolated = true;
            }
            let src = source.at_time(t_mid);
            solver.step_core(&mut state, dt, RelaxTarget::External(&src))?;
            times.push(state.t);
            masses.push(solver.total_mass(&state));
            min_value = min_value.min(state.values().iter().cloned().fold(f64::INFINITY, f64::min));
        }
        state.t = interval * snap as f64;
        snapshot_times.push(state.t);
        m0_snapshots.push(solver.grid.velocity_integral(state.values()));
    }

    let cell = solver.grid.x.cell_volume();
    let mut tracking_l1 = 0.0f64;
    for (t, m0) in snapshot_times.iter().zip(&m0_snapshots) {
        let src = source.at_time(*t);
        let d: f64 = m0.iter().zip(&src).map(|(a, b)| (a - b).abs()).sum();
        tracking_l1 = tracking_l1.max(d * cell);
    }

    Ok(TildeRun {
        times,
        masses,
        m0_snapshots,
        snapshot_times,
        min_value,
        interpolated_source: interpolated,
        tracking_l1,
        final_state: state,
    })
}

/// Check mass preservation of a tilde run against its source trajectory.
///
/// When the source mass matches the initial mass the total mass is
/// conserved; otherwise the mass follows the analytic transient solving
/// eps^kappa M' + M = M_src, which is reported instead.
pub fn verify_conservation(
    solver: &KineticSolver,
    run: &TildeRun,
    source: &MacroTrajectory,
) -> ConservationReport {
    let cell = source.xgrid.cell_volume();
    let m_init = run.masses[0];
    let m_src: f64 = source.fields[0].iter().sum::<f64>() * cell;
    // source mass is constant for admissible sources; probe the first field
    let precondition_ok = (m_src - m_init).abs() <= 1e-6 * m_init.abs().max(1e-30);

    let mut drift = 0.0f64;
    let mut transient_dev = 0.0f64;
    let tau = solver.params.eps_kappa();
    for (t, m) in run.times.iter().zip(&run.masses) {
        drift = drift.max((m - m_init).abs() / m_init.abs().max(1e-30));
        let expected = m_src + (m_init - m_src) * (-t / tau).exp();
        transient_dev = transient_dev.max((m - expected).abs() / m_init.abs().max(1e-30));
    }
    ConservationReport {
        mass_drift: drift,
        min_value: run.min_value,
        precondition_ok,
        max_transient_deviation: transient_dev,
    }
}
