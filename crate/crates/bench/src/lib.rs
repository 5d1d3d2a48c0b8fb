//! Shared setup helpers for the solver benchmarks.

use std::sync::Arc;

use fibrokin::environment::{Environment, ScalingParams, SignalField, TensorField};
use fibrokin::fiber::{FiberDistribution, FiberKind};
use fibrokin::grid::{PhaseGrid, XGrid};
use fibrokin::kinetic::{InitProfile, KineticSolver, KineticState};

/// A ready-to-step kinetic solver on a bump initial state.
pub fn kinetic_case(
    n: usize,
    nx: usize,
    ns: usize,
    k: usize,
    epsilon: f64,
    kappa: u8,
) -> (KineticSolver, KineticState) {
    let xgrid = XGrid::new(n, nx, 1.0).unwrap();
    let grid = Arc::new(PhaseGrid::new(xgrid.clone(), ns, k, 1.0).unwrap());
    let fiber = if n == 1 {
        FiberDistribution::new(1, FiberKind::Discrete { p_plus: 0.5 }).unwrap()
    } else {
        FiberDistribution::new(
            2,
            FiberKind::VonMises {
                mean: [1.0, 0.0],
                concentration: 1.0,
            },
        )
        .unwrap()
    };
    let env = Environment::new(
        xgrid.clone(),
        SignalField::Gaussian {
            center: [0.5, 0.5],
            width: 0.15,
            amplitude: 1.0,
        },
        TensorField::ScaledIdentity { alpha: 1.0 },
    )
    .unwrap();
    let params = ScalingParams::new(epsilon, kappa, 1.0, n).unwrap();
    let solver = KineticSolver::new(grid, &fiber, &env, params).unwrap();
    let cbar: Vec<f64> = (0..xgrid.cells())
        .map(|i| {
            let x = xgrid.node(i);
            let mut r2 = 0.0;
            for xd in x.iter().take(n) {
                r2 += (xd - 0.5) * (xd - 0.5);
            }
            (-r2 / (2.0 * 0.1 * 0.1)).exp()
        })
        .collect();
    let state = solver.init_state(&cbar, InitProfile::Equilibrium).unwrap();
    (solver, state)
}
