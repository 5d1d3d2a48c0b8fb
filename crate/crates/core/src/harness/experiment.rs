//! Experiment orchestration: simulation pipelines, epsilon sweeps,
//! profile checks and weak-formulation checks, with CSV artifacts and a
//! reproducibility manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use crate::closure;
use crate::environment::{Environment, ScalingParams};
use crate::error::{Error, Result};
use crate::fiber::FiberDistribution;
use crate::grid::PhaseGrid;
use crate::harness::config::{ExperimentConfig, Stage};
use crate::harness::report::{self, fmt_float, ConvergenceReport, ConvergenceRow};
use crate::kinetic::{KineticSolver, KineticState};
use crate::linalg;
use crate::macroscale::{self, MacroTrajectory};
use crate::meso;
use crate::weak::{
    build_test_suite, weak_residual, KineticTrajectory, MomentTrajectory, ResidualKind,
    ResidualReport, TrajectoryData,
};

/// Everything a pipeline stage needs, built once from the config.
pub struct Scenario {
    pub phase: Arc<PhaseGrid>,
    pub fiber: Arc<FiberDistribution>,
    pub env: Arc<Environment>,
    pub params: ScalingParams,
    pub cbar_init: Vec<f64>,
}

impl Scenario {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            phase: Arc::new(cfg.phase_grid()?),
            fiber: Arc::new(cfg.build_fiber()?),
            env: Arc::new(cfg.build_environment()?),
            params: cfg.scaling()?,
            cbar_init: cfg.initial_density()?,
        })
    }

    pub fn solver(&self) -> Result<KineticSolver> {
        KineticSolver::new(self.phase.clone(), &self.fiber, &self.env, self.params)
    }

    pub fn solver_with_epsilon(&self, cfg: &ExperimentConfig, eps: f64) -> Result<KineticSolver> {
        KineticSolver::new(
            self.phase.clone(),
            &self.fiber,
            &self.env,
            cfg.scaling_with_epsilon(eps)?,
        )
    }
}

/// Files written by a pipeline run.
#[derive(Debug, Clone, Default)]
pub struct RunArtifacts {
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

/// Outcome of a kinetic integration with uniform snapshots.
pub struct KineticRun {
    pub solver: KineticSolver,
    pub moments: MomentTrajectory,
    pub full: Option<KineticTrajectory>,
    pub final_state: KineticState,
}

/// Integrate the kinetic equation to `t_end`, storing `snapshots` uniformly
/// spaced moment fields (and optionally full phase snapshots).
pub fn run_kinetic(
    scenario: &Scenario,
    solver: KineticSolver,
    t_end: f64,
    snapshots: usize,
    capture_full: bool,
) -> Result<KineticRun> {
    let state = solver.init_state(
        &scenario.cbar_init,
        crate::kinetic::InitProfile::Equilibrium,
    )?;
    run_kinetic_from(solver, state, t_end, snapshots, capture_full)
}

/// As `run_kinetic` but starting from a prepared state.
pub fn run_kinetic_from(
    solver: KineticSolver,
    mut state: KineticState,
    t_end: f64,
    snapshots: usize,
    capture_full: bool,
) -> Result<KineticRun> {
    let snapshots = snapshots.max(2);
    let xgrid = solver.grid.x.clone();
    let mut times = vec![state.t];
    let mom0 = solver.moments(&state);
    let mut m0s = vec![mom0.m0.clone()];
    let mut m1s = vec![mom0.m1.clone()];
    let mut m2s = vec![mom0.m2.clone()];
    let mut fulls = if capture_full {
        vec![state.values().to_vec()]
    } else {
        Vec::new()
    };

    if t_end > 0.0 {
        let interval = t_end / (snapshots - 1) as f64;
        let per = (interval / solver.default_dt()).ceil().max(1.0) as usize;
        let dt = interval / per as f64;
        for snap in 1..snapshots {
            for _ in 0..per {
                solver.step(&mut state, dt)?;
            }
            state.t = interval * snap as f64;
            times.push(state.t);
            let m = solver.moments(&state);
            m0s.push(m.m0);
            m1s.push(m.m1);
            m2s.push(m.m2);
            if capture_full {
                fulls.push(state.values().to_vec());
            }
        }
    }

    let moments = MomentTrajectory {
        xgrid,
        times: times.clone(),
        m0: m0s,
        m1: m1s,
        m2: m2s,
    };
    let full = if capture_full {
        Some(KineticTrajectory {
            grid: solver.grid.clone(),
            times,
            snapshots: fulls,
        })
    } else {
        None
    };
    Ok(KineticRun {
        solver,
        moments,
        full,
        final_state: state,
    })
}

fn write_m0_trajectory(path: &Path, moments: &MomentTrajectory) -> Result<()> {
    let traj = MacroTrajectory {
        xgrid: moments.xgrid.clone(),
        times: moments.times.clone(),
        fields: moments.m0.clone(),
    };
    let mut out = std::fs::File::create(path)?;
    use std::io::Write;
    if moments.xgrid.n == 1 {
        writeln!(out, "t,x_index,m0")?;
    } else {
        writeln!(out, "t,x_index,y_index,m0")?;
    }
    for (ti, t) in traj.times.iter().enumerate() {
        for idx in 0..traj.xgrid.cells() {
            let ij = traj.xgrid.unflat(idx);
            if traj.xgrid.n == 1 {
                writeln!(
                    out,
                    "{},{},{}",
                    fmt_float(*t),
                    ij[0],
                    fmt_float(traj.fields[ti][idx])
                )?;
            } else {
                writeln!(
                    out,
                    "{},{},{},{}",
                    fmt_float(*t),
                    ij[0],
                    ij[1],
                    fmt_float(traj.fields[ti][idx])
                )?;
            }
        }
    }
    Ok(())
}

/// Execute the configured pipeline and write artifacts plus a manifest.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts> {
    std::fs::create_dir_all(out_dir)?;
    let scenario = Scenario::build(cfg)?;
    let mut artifacts = RunArtifacts::default();
    let mut runtimes: Vec<(String, f64)> = Vec::new();

    let mut macro_traj: Option<MacroTrajectory> = None;

    for stage in &cfg.pipeline {
        match stage {
            Stage::Kinetic => {
                let t0 = Instant::now();
                let run = run_kinetic(
                    &scenario,
                    scenario.solver()?,
                    cfg.t_end,
                    cfg.snapshots,
                    false,
                )?;
                let m0_path = out_dir.join("kinetic_m0.csv");
                write_m0_trajectory(&m0_path, &run.moments)?;
                artifacts.files.push(m0_path);
                let snap_path = out_dir.join("kinetic_final.csv");
                report::write_kinetic_snapshot(
                    &snap_path,
                    &run.solver.grid,
                    run.final_state.t,
                    run.final_state.values(),
                )?;
                artifacts.files.push(snap_path);
                runtimes.push(("kinetic".into(), t0.elapsed().as_secs_f64()));
            }
            Stage::Macro => {
                let t0 = Instant::now();
                let model = macroscale::assemble(
                    cfg.macro_kind,
                    &scenario.fiber,
                    &scenario.env,
                    &scenario.params,
                )?;
                let traj =
                    macroscale::solve(&model, &scenario.cbar_init, cfg.t_end, cfg.snapshots)?;
                let path = out_dir.join("macro.csv");
                report::write_macro_trajectory(&path, &traj)?;
                artifacts.files.push(path);
                macro_traj = Some(traj);
                runtimes.push(("macro".into(), t0.elapsed().as_secs_f64()));
            }
            Stage::Tilde => {
                let t0 = Instant::now();
                let source = macro_traj.as_ref().ok_or_else(|| {
                    Error::Config(
                        "tilde stage needs the macro stage earlier in the pipeline".into(),
                    )
                })?;
                let solver = scenario.solver()?;
                let init = solver.init_state(&scenario.cbar_init, cfg.init_profile)?;
                let run = meso::solve_tilde(&solver, init, source, cfg.t_end, cfg.snapshots)?;
                if run.interpolated_source {
                    artifacts
                        .warnings
                        .push("tilde source interpolated linearly in time".into());
                }
                let rep = meso::verify_conservation(&solver, &run, source);
                let path = out_dir.join("tilde_m0.csv");
                let traj = MacroTrajectory {
                    xgrid: solver.grid.x.clone(),
                    times: run.snapshot_times.clone(),
                    fields: run.m0_snapshots.clone(),
                };
                report::write_macro_trajectory(&path, &traj)?;
                artifacts.files.push(path);
                let cons_path = out_dir.join("tilde_conservation.csv");
                {
                    use std::io::Write;
                    let mut out = std::fs::File::create(&cons_path)?;
                    writeln!(
                        out,
                        "mass_drift,min_value,precondition_ok,max_transient_deviation,tracking_l1"
                    )?;
                    writeln!(
                        out,
                        "{},{},{},{},{}",
                        fmt_float(rep.mass_drift),
                        fmt_float(rep.min_value),
                        rep.precondition_ok,
                        fmt_float(rep.max_transient_deviation),
                        fmt_float(run.tracking_l1)
                    )?;
                }
                artifacts.files.push(cons_path);
                runtimes.push(("tilde".into(), t0.elapsed().as_secs_f64()));
            }
        }
    }

    // radial profile dump for inspection
    let profiles = closure::ProfileSet::tabulate(&scenario.phase.radial.nodes, cfg.a, cfg.n)?;
    let prof_path = out_dir.join("profiles.csv");
    profiles.write_csv(&prof_path)?;
    artifacts.files.push(prof_path);

    let manifest = out_dir.join("manifest.txt");
    report::write_manifest(&manifest, &cfg.lines, &runtimes)?;
    artifacts.files.push(manifest);
    Ok(artifacts)
}

/// L1 distance between two density fields.
pub fn l1_distance(xgrid: &crate::grid::XGrid, a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() * xgrid.cell_volume()
}

/// Epsilon-sweep convergence study: for every epsilon, the kinetic density
/// is compared in L1 against the configured macroscopic model at half and
/// full horizon.
pub fn converge(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<ConvergenceReport> {
    if cfg.sweep_epsilons.len() < 2 {
        return Err(Error::Config(
            "sweep needs at least two epsilon values".into(),
        ));
    }
    cfg.validate_macro_preconditions()?;
    let scenario = Scenario::build(cfg)?;
    let xgrid = scenario.phase.x.clone();
    let mut report_data = ConvergenceReport::default();
    let mut prev: Option<Vec<(f64, f64)>> = None;

    for &eps in &cfg.sweep_epsilons {
        let t0 = Instant::now();
        let params = cfg.scaling_with_epsilon(eps)?;
        let solver = scenario.solver_with_epsilon(cfg, eps)?;
        let run = run_kinetic(&scenario, solver, cfg.t_end, cfg.snapshots.max(3), false)?;
        let model = macroscale::assemble(cfg.macro_kind, &scenario.fiber, &scenario.env, &params)?;
        let macro_traj =
            macroscale::solve(&model, &scenario.cbar_init, cfg.t_end, cfg.snapshots.max(3))?;
        let runtime = t0.elapsed().as_secs_f64();

        let mut these = Vec::new();
        for t_cmp in [0.5 * cfg.t_end, cfg.t_end] {
            let ti = run
                .moments
                .times
                .iter()
                .position(|&t| (t - t_cmp).abs() < 1e-9)
                .ok_or_else(|| Error::Numerical(format!("no kinetic snapshot at t = {t_cmp}")))?;
            let mi = macro_traj
                .times
                .iter()
                .position(|&t| (t - t_cmp).abs() < 1e-9)
                .ok_or_else(|| Error::Numerical(format!("no macro snapshot at t = {t_cmp}")))?;
            let err = l1_distance(&xgrid, &run.moments.m0[ti], &macro_traj.fields[mi]);
            these.push((t_cmp, err));
        }
        for (i, (t_cmp, err)) in these.iter().enumerate() {
            let ratio = prev.as_ref().map(|p| err / p[i].1);
            report_data.rows.push(ConvergenceRow {
                epsilon: eps,
                time: *t_cmp,
                l1_error: *err,
                ratio,
                runtime_seconds: runtime,
            });
        }
        prev = Some(these);
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        report::write_convergence_report(&dir.join("convergence.csv"), &report_data)?;
        report::write_manifest(&dir.join("manifest.txt"), &cfg.lines, &[])?;
    }
    Ok(report_data)
}

/// Distance of the final kinetic velocity profile from the equilibrium
/// closure (maximised over cells carrying at least 1% of the peak density).
pub fn profile_check(cfg: &ExperimentConfig) -> Result<f64> {
    let scenario = Scenario::build(cfg)?;
    let solver = scenario.solver()?;
    let mut state = solver.init_state(&scenario.cbar_init, cfg.init_profile)?;
    if cfg.t_end > 0.0 {
        let dt_max = solver.default_dt();
        let steps = (cfg.t_end / dt_max).ceil().max(1.0) as usize;
        let dt = cfg.t_end / steps as f64;
        for _ in 0..steps {
            solver.step(&mut state, dt)?;
        }
    }
    let mass = solver.total_mass(&state);
    if !(mass > 0.0) {
        return Err(Error::Precondition(
            "profile check needs a final snapshot with positive mass".into(),
        ));
    }
    Ok(solver.profile_distance(&state))
}

/// Evaluate the configured weak-formulation residuals; returns one report
/// per requested kind and writes `residual_report.csv` when `out_dir` is
/// given.
pub fn weak_check(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<Vec<ResidualReport>> {
    let scenario = Scenario::build(cfg)?;
    let tests = build_test_suite(&scenario.phase.x, cfg.t_end, cfg.weak_tests, cfg.seed)?;

    let needs_kinetic = cfg.weak_kinds.iter().any(|k| {
        matches!(
            k,
            ResidualKind::Kte | ResidualKind::Moment0 | ResidualKind::Moment012
        )
    });
    let needs_full = cfg.weak_kinds.contains(&ResidualKind::Kte);
    let needs_macro = cfg.weak_kinds.iter().any(|k| {
        matches!(
            k,
            ResidualKind::ParabolicLimit | ResidualKind::HyperbolicLimit
        )
    });

    let kinetic_run = if needs_kinetic {
        Some(run_kinetic(
            &scenario,
            scenario.solver()?,
            cfg.t_end,
            cfg.snapshots,
            needs_full,
        )?)
    } else {
        None
    };
    let macro_traj = if needs_macro {
        cfg.validate_macro_preconditions()?;
        let model = macroscale::assemble(
            cfg.macro_kind,
            &scenario.fiber,
            &scenario.env,
            &scenario.params,
        )?;
        Some(macroscale::solve(
            &model,
            &scenario.cbar_init,
            cfg.t_end,
            cfg.snapshots,
        )?)
    } else {
        None
    };

    let mut reports = Vec::new();
    for kind in &cfg.weak_kinds {
        let data = match kind {
            ResidualKind::Kte => TrajectoryData::Kinetic(
                kinetic_run
                    .as_ref()
                    .and_then(|r| r.full.as_ref())
                    .expect("kinetic trajectory captured"),
            ),
            ResidualKind::Moment0 | ResidualKind::Moment012 => {
                TrajectoryData::Moments(&kinetic_run.as_ref().unwrap().moments)
            }
            ResidualKind::ParabolicLimit | ResidualKind::HyperbolicLimit => {
                TrajectoryData::Macro(macro_traj.as_ref().unwrap())
            }
        };
        reports.push(weak_residual(
            *kind,
            &data,
            &scenario.fiber,
            &scenario.env,
            &scenario.params,
            &tests,
        )?);
    }

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        report::write_residual_report(&dir.join("residual_report.csv"), &reports)?;
        report::write_manifest(&dir.join("manifest.txt"), &cfg.lines, &[])?;
    }
    Ok(reports)
}

/// Human-readable fiber-moment and model-coefficient summary.
pub fn moments_summary(cfg: &ExperimentConfig) -> Result<String> {
    let scenario = Scenario::build(cfg)?;
    let x = scenario.phase.x.node(scenario.phase.x.cells() / 2);
    let m = scenario.fiber.moments(&x)?;
    let rep = scenario.fiber.symmetry_check(1e-8)?;
    let n = cfg.n;
    let nf = n as f64;
    let a = cfg.a;
    let mut out = String::new();
    out.push_str(&format!("scenario: {}\n", cfg.scenario));
    out.push_str(&format!("dimension: {n}, a: {a}, kappa: {}\n", cfg.kappa));
    out.push_str(&format!(
        "undirected: {} (max |E| = {:.3e})\n",
        rep.undirected, rep.max_mean
    ));
    out.push_str(&format!("E[q] = {:?}\n", &m.mean[..n]));
    out.push_str("D[q] =");
    for i in 0..n {
        out.push_str(&format!(" {:?}", &m.second[i][..n]));
    }
    out.push('\n');
    out.push_str("V[q] =");
    for i in 0..n {
        out.push_str(&format!(" {:?}", &m.covariance[i][..n]));
    }
    out.push('\n');
    out.push_str(&format!(
        "closure coefficients: m1 = {:.6}, m2 = {:.6}\n",
        1.0 / (a + 1.0) * nf / (nf + 1.0),
        1.0 / (2.0 * a + 1.0) * nf / (nf + 2.0)
    ));
    out.push_str(&format!(
        "macro coefficients ({}): myopic = {:.6}, drift = {:.6}\n",
        cfg.macro_kind.name(),
        nf / ((a + 1.0) * (2.0 * a + 1.0) * (nf + 2.0)),
        a / (a + 1.0)
    ));
    let t = macroscale::hyperbolic_first_order_tensor(&m, a, n);
    out.push_str(&format!(
        "first-order hyperbolic tensor eigenvalues: {:?}\n",
        &linalg::sym_eigenvalues(n, &t)[..n]
    ));
    Ok(out)
}

/// Write per-cell fiber moments: `x_index[,y_index],e...,d...`.
pub fn write_moments_csv(cfg: &ExperimentConfig, path: &Path) -> Result<()> {
    use std::io::Write;
    let scenario = Scenario::build(cfg)?;
    let xgrid = &scenario.phase.x;
    let n = xgrid.n;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    if n == 1 {
        writeln!(out, "x_index,e1,d11,v11")?;
    } else {
        writeln!(out, "x_index,y_index,e1,e2,d11,d12,d21,d22,v11,v12,v21,v22")?;
    }
    for idx in 0..xgrid.cells() {
        let ij = xgrid.unflat(idx);
        let m = scenario.fiber.moments(&xgrid.node(idx))?;
        if n == 1 {
            writeln!(
                out,
                "{},{},{},{}",
                ij[0],
                fmt_float(m.mean[0]),
                fmt_float(m.second[0][0]),
                fmt_float(m.covariance[0][0])
            )?;
        } else {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                ij[0],
                ij[1],
                fmt_float(m.mean[0]),
                fmt_float(m.mean[1]),
                fmt_float(m.second[0][0]),
                fmt_float(m.second[0][1]),
                fmt_float(m.second[1][0]),
                fmt_float(m.second[1][1]),
                fmt_float(m.covariance[0][0]),
                fmt_float(m.covariance[0][1]),
                fmt_float(m.covariance[1][0]),
                fmt_float(m.covariance[1][1])
            )?;
        }
    }
    Ok(())
}
