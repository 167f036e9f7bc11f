//! Consumption controls and the reduced optimal control problem.
//!
//! The gradient is the exact transpose of the discrete forward map (up to the
//! finite-difference linearization of `𝒫`), so it can be checked against
//! central differences of the reduced objective.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::calculus::Field;
use crate::geometry::Grid;
use crate::linalg::{dot, norm2, norm_inf};
use crate::model::{objective, production_jacobian_transpose, utility_derivative, ModelError, ObjectiveValue};
use crate::solver::{write_time_csv, PicardReport, SolverError, StateProblem, StateTrajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid bounds [{lower}, {upper}]: requires 0 <= c_min <= c_max < inf")]
    Bounds { lower: f64, upper: f64 },
    #[error("control has {got} values, expected {expected}")]
    Mismatch { expected: usize, got: usize },
    #[error("control value {value} at entry {index} lies outside [{lower}, {upper}]")]
    Inadmissible { index: usize, value: f64, lower: f64, upper: f64 },
    #[error("adjoint fixed point did not converge at step {step} after {iterations} iterations")]
    Adjoint { step: usize, iterations: usize },
    #[error("line search failed after {halvings} halvings at iteration {iteration}")]
    LineSearch { iteration: usize, halvings: usize, trace: Box<OptimizationTrace> },
}

/// Pointwise bounds `c_min ≤ c ≤ c_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoxBounds {
    pub lower: f64,
    pub upper: f64,
}

impl BoxBounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self, ControlError> {
        if !(lower >= 0.0 && lower <= upper && upper.is_finite()) {
            return Err(ControlError::Bounds { lower, upper });
        }
        Ok(Self { lower, upper })
    }

    /// No constraint at all; for forward solves with arbitrary forcing.
    pub fn unbounded() -> Self {
        Self { lower: f64::NEG_INFINITY, upper: f64::INFINITY }
    }

    pub fn project(&self, v: f64) -> f64 {
        v.clamp(self.lower, self.upper)
    }

    pub fn project_all(&self, v: &mut [f64]) {
        v.iter_mut().for_each(|x| *x = self.project(*x));
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lower && v <= self.upper
    }
}

/// `c(x, t_m)` on interior dofs for `m = 0..M`, piecewise constant on
/// `[t_m, t_{m+1})`, stored row-major by time.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlTrajectory {
    steps: usize,
    dofs: usize,
    values: Vec<f64>,
    bounds: BoxBounds,
}

impl ControlTrajectory {
    pub fn new(steps: usize, dofs: usize, values: Vec<f64>, bounds: BoxBounds) -> Result<Self, ControlError> {
        if values.len() != steps * dofs {
            return Err(ControlError::Mismatch { expected: steps * dofs, got: values.len() });
        }
        if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !bounds.contains(**v)) {
            return Err(ControlError::Inadmissible { index, value, lower: bounds.lower, upper: bounds.upper });
        }
        Ok(Self { steps, dofs, values, bounds })
    }

    pub fn constant(steps: usize, dofs: usize, value: f64, bounds: BoxBounds) -> Self {
        Self { steps, dofs, values: vec![value; steps * dofs], bounds }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dofs(&self) -> usize {
        self.dofs
    }

    pub fn bounds(&self) -> BoxBounds {
        self.bounds
    }

    pub fn value(&self, m: usize, dof: usize) -> f64 {
        self.values[m * self.dofs + dof]
    }

    pub fn row(&self, m: usize) -> &[f64] {
        &self.values[m * self.dofs..(m + 1) * self.dofs]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// CSV rows `m,t,idx,x1[,x2],c` over interior points.
    pub fn write_csv<W: Write>(&self, grid: &Grid, dt: f64, writer: W) -> csv::Result<()> {
        write_time_csv(
            grid,
            writer,
            "c",
            self.steps,
            |m| m as f64 * dt,
            |m, i| self.value(m, grid.dof(i).expect("interior")),
            Some(grid.interior()),
        )
    }
}

/// A differentiable function on flat vectors, as seen by the optimizer.
pub trait Objective {
    fn dimension(&self) -> usize;
    fn value(&self, x: &[f64]) -> Result<ObjectiveValue, ControlError>;
    fn value_and_gradient(&self, x: &[f64]) -> Result<(ObjectiveValue, Vec<f64>), ControlError>;
}

/// `c ↦ 𝒥(k(c), c)` for a fixed initial state.
#[derive(Debug, Clone)]
pub struct ReducedProblem {
    problem: StateProblem,
    k0: Field,
    bounds: BoxBounds,
}

const ADJOINT_BUDGET: usize = 1000;

impl ReducedProblem {
    pub fn new(problem: StateProblem, k0: Field, bounds: BoxBounds) -> Self {
        Self { problem, k0, bounds }
    }

    pub fn problem(&self) -> &StateProblem {
        &self.problem
    }

    pub fn k0(&self) -> &Field {
        &self.k0
    }

    pub fn bounds(&self) -> BoxBounds {
        self.bounds
    }

    pub fn control(&self, values: Vec<f64>) -> Result<ControlTrajectory, ControlError> {
        ControlTrajectory::new(self.problem.steps(), self.problem.dofs(), values, self.bounds)
    }

    /// Forward solve followed by the objective.
    pub fn reduced_objective(&self, c: &ControlTrajectory) -> Result<(ObjectiveValue, StateTrajectory, PicardReport), ControlError> {
        let (k, report) = self.problem.picard_solve(&self.k0, c)?;
        let p = &self.problem;
        let value = objective(p.grid(), p.params(), p.data(), &k, c)?;
        Ok((value, k, report))
    }

    /// `∂𝒥/∂c(x, t_m)` for every entry of `c`, flat in the same layout.
    ///
    /// The converged state satisfies `B_{m+1} k_{m+1} = k_m/Δt + 𝒫_{m+1}(k_{m+1}) - c_m`
    /// with `B = (1/Δt + δ)I - β𝒩ℒ`. The adjoint runs backward:
    /// `(B - P'_M)ᵀ λ_M = (w/ρ)(k_M - k_T)` and `(B - P'_j)ᵀ λ_j = λ_{j+1}/Δt`, where
    /// `P'_j` is the Jacobian of `𝒫(·, t_j)` at `k_j`. Then
    /// `g_m = -U'(c_m) e^{-τt_m - γ‖x‖²} w Δt - λ_{m+1}`.
    pub fn reduced_gradient(&self, c: &ControlTrajectory) -> Result<(ObjectiveValue, Vec<f64>), ControlError> {
        let (value, k, _) = self.reduced_objective(c)?;
        let p = &self.problem;
        let g = p.grid();
        let params = p.params();
        let dt = p.dt();
        let w = g.cell_volume();
        let steps = p.steps();
        let n = p.dofs();
        let target = p.data().k_target().interior_values(g);
        let mut grad = vec![0.0; steps * n];
        let mut lambda_next: Vec<f64> = Vec::new();
        let tol = p.options().cg_tol.max(1e-15);
        for j in (1..=steps).rev() {
            let kj = k.field(j);
            let rhs: Vec<f64> = if j == steps {
                kj.interior_values(g).iter().zip(&target).map(|(a, b)| w / params.rho * (a - b)).collect()
            } else {
                lambda_next.iter().map(|l| l / dt).collect()
            };
            let jt = production_jacobian_transpose(p.calculus(), kj, p.time(j), p.data(), params);
            let mut lambda = vec![0.0; n];
            p.solve_system(&rhs, &mut lambda, j)?;
            if (0..n).flat_map(|i| jt.row(i)).any(|(_, v)| v != 0.0) {
                let mut converged = false;
                for _ in 0..ADJOINT_BUDGET {
                    let coupled = jt.apply(&lambda);
                    let r: Vec<f64> = rhs.iter().zip(&coupled).map(|(a, b)| a + b).collect();
                    let mut next = lambda.clone();
                    p.solve_system(&r, &mut next, j)?;
                    let change = norm2(&next.iter().zip(&lambda).map(|(a, b)| a - b).collect::<Vec<_>>());
                    lambda = next;
                    if change <= tol * norm2(&lambda) || change == 0.0 {
                        converged = true;
                        break;
                    }
                }
                if !converged {
                    return Err(ControlError::Adjoint { step: j, iterations: ADJOINT_BUDGET });
                }
            }
            let m = j - 1;
            let t = p.time(m);
            for (d, &x) in g.interior().iter().enumerate() {
                let up = utility_derivative(c.value(m, d), params)?;
                grad[m * n + d] = -up * params.discount(t, g.point(x)) * w * dt - lambda[d];
            }
            lambda_next = lambda;
        }
        Ok((value, grad))
    }
}

impl Objective for ReducedProblem {
    fn dimension(&self) -> usize {
        self.problem.steps() * self.problem.dofs()
    }

    fn value(&self, x: &[f64]) -> Result<ObjectiveValue, ControlError> {
        let c = self.control(x.to_vec())?;
        Ok(self.reduced_objective(&c)?.0)
    }

    fn value_and_gradient(&self, x: &[f64]) -> Result<(ObjectiveValue, Vec<f64>), ControlError> {
        let c = self.control(x.to_vec())?;
        self.reduced_gradient(&c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DescentOptions {
    /// Stop when `‖x - Π(x - g)‖₂ < tol`.
    pub tol: f64,
    pub max_iter: usize,
    /// Sufficient-decrease parameter of the Armijo test.
    pub armijo: f64,
    pub max_halvings: usize,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200, armijo: 1e-4, max_halvings: 40 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub value: f64,
    pub utility: f64,
    pub terminal: f64,
    pub projected_gradient_norm: f64,
    /// Step that produced this iterate; zero for the start.
    pub step: f64,
    pub halvings: usize,
    /// Fraction of entries sitting on a bound.
    pub active_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationTrace {
    pub entries: Vec<TraceEntry>,
    pub converged: bool,
    pub iterations: usize,
}

impl OptimizationTrace {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }
}

fn projected_gradient_norm(x: &[f64], g: &[f64], bounds: &BoxBounds) -> f64 {
    x.iter()
        .zip(g)
        .map(|(xi, gi)| (xi - bounds.project(xi - gi)).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn active_fraction(x: &[f64], bounds: &BoxBounds) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().filter(|&&v| v == bounds.lower || v == bounds.upper).count() as f64 / x.len() as f64
}

/// Projected gradient descent with Armijo backtracking.
///
/// The first trial step is `(c_max - c_min)/‖g‖_∞`; after an accepted step
/// `s` the next trial is `2s`. Trials are halved until
/// `f(x⁺) ≤ f(x) + a⟨g, x⁺ - x⟩` and `f(x⁺) < f(x)`. Returns the best iterate.
pub fn projected_gradient_descent<O: Objective>(
    objective: &O,
    bounds: BoxBounds,
    x0: Vec<f64>,
    options: DescentOptions,
) -> Result<(Vec<f64>, OptimizationTrace), ControlError> {
    if x0.len() != objective.dimension() {
        return Err(ControlError::Mismatch { expected: objective.dimension(), got: x0.len() });
    }
    if let Some((index, &value)) = x0.iter().enumerate().find(|(_, v)| !bounds.contains(**v)) {
        return Err(ControlError::Inadmissible { index, value, lower: bounds.lower, upper: bounds.upper });
    }
    let mut x = x0;
    let (mut f, mut g) = objective.value_and_gradient(&x)?;
    let mut trace = OptimizationTrace { entries: Vec::new(), converged: false, iterations: 0 };
    let mut best = (x.clone(), f.total);
    let mut trial = {
        let gi = norm_inf(&g);
        let span = bounds.upper - bounds.lower;
        if gi > 0.0 && span.is_finite() && span > 0.0 {
            span / gi
        } else if gi > 0.0 {
            1.0 / gi
        } else {
            1.0
        }
    };
    let (mut last_step, mut last_halvings) = (0.0, 0);
    for it in 0..=options.max_iter {
        let pg = projected_gradient_norm(&x, &g, &bounds);
        trace.entries.push(TraceEntry {
            iteration: it,
            value: f.total,
            utility: f.utility,
            terminal: f.terminal,
            projected_gradient_norm: pg,
            step: last_step,
            halvings: last_halvings,
            active_fraction: active_fraction(&x, &bounds),
        });
        trace.iterations = it;
        if pg < options.tol {
            trace.converged = true;
            return Ok((x, trace));
        }
        if it == options.max_iter {
            break;
        }
        let mut step = trial;
        let mut halvings = 0;
        let (next, next_f) = loop {
            let mut cand: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - step * gi).collect();
            bounds.project_all(&mut cand);
            let diff: Vec<f64> = cand.iter().zip(&x).map(|(a, b)| a - b).collect();
            let fc = objective.value(&cand)?;
            if fc.total < f.total && fc.total <= f.total + options.armijo * dot(&g, &diff) {
                break (cand, fc);
            }
            halvings += 1;
            if halvings > options.max_halvings {
                return Err(ControlError::LineSearch { iteration: it, halvings: options.max_halvings, trace: Box::new(trace) });
            }
            step *= 0.5;
        };
        debug_assert!(next_f.total < f.total);
        x = next;
        let (nf, ng) = objective.value_and_gradient(&x)?;
        f = nf;
        g = ng;
        if f.total < best.1 {
            best = (x.clone(), f.total);
        }
        last_step = step;
        last_halvings = halvings;
        trial = 2.0 * step;
    }
    Ok((best.0, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calculus::Calculus;
    use crate::geometry::{build_grid, Domain};
    use crate::kernel::KernelParams;
    use crate::model::{ModelParams, ProductivityData, Profile};
    use crate::solver::SolverOptions;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Quadratic {
        center: Vec<f64>,
        scale: f64,
    }

    impl Objective for Quadratic {
        fn dimension(&self) -> usize {
            self.center.len()
        }
        fn value(&self, x: &[f64]) -> Result<ObjectiveValue, ControlError> {
            let v = self.scale * x.iter().zip(&self.center).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            Ok(ObjectiveValue { total: v, utility: v, terminal: 0.0 })
        }
        fn value_and_gradient(&self, x: &[f64]) -> Result<(ObjectiveValue, Vec<f64>), ControlError> {
            let g = x.iter().zip(&self.center).map(|(a, b)| 2.0 * self.scale * (a - b)).collect();
            Ok((self.value(x)?, g))
        }
    }

    #[test]
    fn bounds_validation_and_projection() {
        assert!(BoxBounds::new(-1.0, 1.0).is_err());
        assert!(BoxBounds::new(2.0, 1.0).is_err());
        let b = BoxBounds::new(0.0, 1.0).unwrap();
        assert_eq!(b.project(1.5), 1.0);
        assert_eq!(b.project(-0.5), 0.0);
        assert!(ControlTrajectory::new(2, 2, vec![0.0, 0.5, 1.0, 1.1], b).is_err());
        assert!(ControlTrajectory::new(2, 2, vec![0.0; 3], b).is_err());
    }

    #[test]
    fn stationary_start_returns_immediately() {
        let q = Quadratic { center: vec![0.3, 0.7], scale: 1.0 };
        let b = BoxBounds::new(0.0, 1.0).unwrap();
        let (x, tr) = projected_gradient_descent(&q, b, vec![0.3, 0.7], DescentOptions::default()).unwrap();
        assert_eq!(x, vec![0.3, 0.7]);
        assert_eq!(tr.iterations, 0);
        assert!(tr.converged);
    }

    #[test]
    fn descent_decreases_and_hits_bounds() {
        let q = Quadratic { center: vec![0.3, 1.7, -0.4], scale: 3.0 };
        let b = BoxBounds::new(0.0, 1.0).unwrap();
        // strict decrease stalls at rounding level near f ≈ 1.95, so stop well above it
        let opts = DescentOptions { tol: 1e-6, ..Default::default() };
        let (x, tr) = projected_gradient_descent(&q, b, vec![0.5; 3], opts).unwrap();
        assert!(tr.converged);
        assert!(tr.entries.windows(2).all(|e| e[1].value < e[0].value));
        assert!((x[0] - 0.3).abs() < 1e-6);
        assert_eq!(x[1], 1.0);
        assert_eq!(x[2], 0.0);
    }

    #[test]
    fn scaling_objective_keeps_iterates() {
        let b = BoxBounds::new(0.0, 1.0).unwrap();
        let opts = DescentOptions { max_iter: 5, ..Default::default() };
        let a = Quadratic { center: vec![0.2, 0.9], scale: 1.0 };
        let s = Quadratic { center: vec![0.2, 0.9], scale: 8.0 };
        let (_, ta) = projected_gradient_descent(&a, b, vec![1.0, 0.0], opts).unwrap();
        let (_, ts) = projected_gradient_descent(&s, b, vec![1.0, 0.0], opts).unwrap();
        for (ea, es) in ta.entries.iter().zip(&ts.entries) {
            assert!((ea.value * 8.0 - es.value).abs() <= 1e-12 * es.value.max(1e-300));
            assert_eq!(ea.active_fraction, es.active_fraction);
        }
    }

    fn small_problem(a0: Profile, rho: f64, steps: usize) -> ReducedProblem {
        let d = Domain::interval(0.0, 1.0, 0.1).unwrap();
        let grid = build_grid(&d, 0.05).unwrap();
        let calc = Calculus::new(grid, KernelParams::new(1, 0.05, 0.1, 0.05).unwrap()).unwrap();
        let data = ProductivityData::from_profiles(calc.grid(), a0, Profile::Constant(0.2)).unwrap();
        let params = ModelParams { rho, tau: 0.1, space_discount: 0.5, ..Default::default() };
        let opts = SolverOptions { picard_tol: 1e-13, cg_tol: 1e-13, ..Default::default() };
        let problem = StateProblem::new(calc, params, data, steps, opts).unwrap();
        let k0 = Field::constrained(problem.grid(), |x| 0.5 + 0.5 * (std::f64::consts::PI * x[0]).sin());
        ReducedProblem::new(problem, k0, BoxBounds::new(0.0, 1.0).unwrap())
    }

    #[test]
    fn gradient_matches_central_differences() {
        let r = small_problem(Profile::Gaussian { amplitude: 1.0, center: [0.5, 0.0], width: 0.25 }, 0.5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = r.dimension();
        let c: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..0.8)).collect();
        let (_, g) = r.value_and_gradient(&c).unwrap();
        for _ in 0..3 {
            let d: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let h = 1e-5;
            let plus: Vec<f64> = c.iter().zip(&d).map(|(a, b)| a + h * b).collect();
            let minus: Vec<f64> = c.iter().zip(&d).map(|(a, b)| a - h * b).collect();
            let fd = (r.value(&plus).unwrap().total - r.value(&minus).unwrap().total) / (2.0 * h);
            let an = dot(&g, &d);
            assert!((fd - an).abs() < 1e-4 * an.abs(), "{fd} vs {an}");
        }
    }

    #[test]
    fn decoupled_limit_gives_utility_gradient() {
        let r = small_problem(Profile::Constant(0.0), 1e12, 4);
        let c = vec![0.4; r.dimension()];
        let (_, g) = r.value_and_gradient(&c).unwrap();
        let p = r.problem();
        let (w, dt) = (p.grid().cell_volume(), p.dt());
        for m in 0..4 {
            for (d, &x) in p.grid().interior().iter().enumerate() {
                let want = -utility_derivative(0.4, p.params()).unwrap() * p.params().discount(p.time(m), p.grid().point(x)) * w * dt;
                let got = g[m * p.dofs() + d];
                assert!((got - want).abs() < 1e-9 * want.abs());
                assert!(got < 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn projection_is_idempotent(v in proptest::collection::vec(-3.0..3.0f64, 1..20)) {
            let b = BoxBounds::new(0.0, 1.0).unwrap();
            let mut once = v.clone();
            b.project_all(&mut once);
            let mut twice = once.clone();
            b.project_all(&mut twice);
            prop_assert_eq!(&once, &twice);
            prop_assert!(once.iter().all(|&x| b.contains(x)));
        }
    }
}
