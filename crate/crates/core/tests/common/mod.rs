#![allow(dead_code)]

use std::f64::consts::PI;

use nonlocal_ramsey::calculus::{Calculus, Field};
use nonlocal_ramsey::control::{BoxBounds, ControlTrajectory};
use nonlocal_ramsey::geometry::{build_grid, Domain, Grid};
use nonlocal_ramsey::kernel::{KernelParams, Radius};
use nonlocal_ramsey::model::{productivity_production, ModelParams, ProductivityData, Profile};
use nonlocal_ramsey::solver::{SolverOptions, StateProblem, StateTrajectory};

/// 1-D calculus on `(0,1)` with interaction radius `epsilon` and kernel width `sigma`.
pub fn calculus_1d(h: f64, epsilon: f64, sigma: f64) -> Calculus {
    let d = Domain::interval(0.0, 1.0, epsilon).unwrap();
    let g = build_grid(&d, h).unwrap();
    let k = KernelParams::new(1, sigma, epsilon, epsilon / 2.0).unwrap();
    Calculus::new(g, k).unwrap()
}

/// Manufactured state `(1+t)² sin(πx)` on `Ω`, zero on the shell.
pub fn mms_exact(grid: &Grid, t: f64) -> Field {
    Field::constrained(grid, |x| (1.0 + t).powi(2) * (PI * x[0]).sin())
}

/// Manufactured instance: the control is chosen so that [`mms_exact`] solves
/// the continuous state equation, evaluated at the left end of each step.
pub struct Mms {
    pub problem: StateProblem,
    pub k0: Field,
    pub control: ControlTrajectory,
}

pub fn mms(calc: &Calculus, steps: usize, horizon: f64, options: SolverOptions) -> Mms {
    let grid = calc.grid().clone();
    let params = ModelParams { horizon, ..ModelParams::default() };
    let data = ProductivityData::from_profiles(&grid, Profile::Constant(1.0), Profile::Constant(0.0)).unwrap();
    let dt = horizon / steps as f64;
    let mut values = Vec::with_capacity(steps * grid.interior_count());
    for m in 0..steps {
        let t = m as f64 * dt;
        let k = mms_exact(&grid, t);
        let nl = calc.nl_diffusion(&k, Radius::Epsilon).unwrap();
        let prod = productivity_production(calc, &k, t, &data, &params);
        for &x in grid.interior() {
            let dk = 2.0 * (1.0 + t) * (PI * grid.point(x)[0]).sin();
            values.push(-dk + params.beta * nl.0[x] - params.delta * k.0[x] + prod.0[x]);
        }
    }
    let control = ControlTrajectory::new(steps, grid.interior_count(), values, BoxBounds::unbounded()).unwrap();
    let problem = StateProblem::new(calc.clone(), params, data, steps, options).unwrap();
    Mms { problem, k0: mms_exact(&grid, 0.0), control }
}

/// Max over steps and nodes of `|k - k̂|`.
pub fn mms_error(grid: &Grid, k: &StateTrajectory) -> f64 {
    (0..=k.steps())
        .map(|m| {
            let exact = mms_exact(grid, k.time(m));
            k.field(m).0.iter().zip(&exact.0).fold(0.0f64, |a, (u, v)| a.max((u - v).abs()))
        })
        .fold(0.0, f64::max)
}
