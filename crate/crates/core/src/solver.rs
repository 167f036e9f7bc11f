//! Time stepping of the capital accumulation equation
//! `∂ₜk - β𝒩ℒ(k) + δk = 𝒫(k) - c` with `k = 0` on the shell.
//!
//! Each step is implicit Euler on the linear part. `𝒫` enters through a Picard
//! loop: one sweep over a window freezes `𝒫` at the previous iterate, so the
//! map iterated is the fixed-point map of the existence argument and its
//! contraction factor is measured directly.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::calculus::{Calculus, EquivalenceConstants, Field};
use crate::control::ControlTrajectory;
use crate::geometry::Grid;
use crate::kernel::Radius;
use crate::linalg::{conjugate_gradient, dot, CgFailure, CsrMatrix};
use crate::model::{nominal, production, productivity_production, ModelError, ModelParams, ProductivityData};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("linear solve failed at step {step}: {failure}")]
    LinearSolve { step: usize, failure: CgFailure },
    #[error("Picard iteration did not converge on steps {start_step}..{end_step} after {iterations} iterations (last distance {last_distance:e})")]
    NonConvergence {
        start_step: usize,
        end_step: usize,
        iterations: usize,
        last_distance: f64,
        report: Box<PicardReport>,
    },
    #[error("{what} has length {got}, expected {expected}")]
    Mismatch { what: &'static str, expected: usize, got: usize },
    #[error("initial state must be nonnegative on the domain and zero on the shell (point {0})")]
    InitialState(usize),
    #[error("invalid solver option {key}: requires {constraint}")]
    Option { key: &'static str, constraint: &'static str },
}

/// `k(·, t_m)` for `m = 0..=M`, one full-grid field per node.
#[derive(Debug, Clone, PartialEq)]
pub struct StateTrajectory {
    dt: f64,
    fields: Vec<Field>,
}

impl StateTrajectory {
    pub fn new(dt: f64, fields: Vec<Field>) -> Self {
        Self { dt, fields }
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of time steps `M`; there are `M + 1` nodes.
    pub fn steps(&self) -> usize {
        self.fields.len() - 1
    }

    pub fn time(&self, m: usize) -> f64 {
        m as f64 * self.dt
    }

    pub fn field(&self, m: usize) -> &Field {
        &self.fields[m]
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    /// Smallest value over interior points and all nodes.
    pub fn min_interior(&self, grid: &Grid) -> f64 {
        self.fields
            .iter()
            .flat_map(|f| grid.interior().iter().map(move |&i| f.0[i]))
            .fold(f64::INFINITY, f64::min)
    }

    /// CSV rows `m,t,idx,x1[,x2],k` over every grid point.
    pub fn write_csv<W: Write>(&self, grid: &Grid, writer: W) -> csv::Result<()> {
        write_time_csv(grid, writer, "k", self.fields.len(), |m| self.time(m), |m, i| self.fields[m].0[i], None)
    }
}

/// Shared writer for per-node CSVs. `only` restricts rows to the listed points.
pub(crate) fn write_time_csv<W: Write>(
    grid: &Grid,
    writer: W,
    column: &str,
    nodes: usize,
    time: impl Fn(usize) -> f64,
    value: impl Fn(usize, usize) -> f64,
    only: Option<&[usize]>,
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["m".to_string(), "t".into(), "idx".into(), "x1".into()];
    if grid.dim() == 2 {
        header.push("x2".into());
    }
    header.push(column.into());
    w.write_record(&header)?;
    let all: Vec<usize> = (0..grid.len()).collect();
    let points = only.unwrap_or(&all);
    for m in 0..nodes {
        for &i in points {
            let p = grid.point(i);
            let mut rec = vec![m.to_string(), time(m).to_string(), i.to_string(), p[0].to_string()];
            if grid.dim() == 2 {
                rec.push(p[1].to_string());
            }
            rec.push(value(m, i).to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverOptions {
    /// Initial window length as a fraction of the horizon.
    pub window_fraction: f64,
    pub picard_tol: f64,
    pub max_iter: usize,
    pub cg_tol: f64,
    /// Defaults to `10·dofs + 100` when `None`.
    pub cg_max_iter: Option<usize>,
    /// Nonnegativity is flagged when `min k < -threshold`.
    pub nonnegativity_threshold: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            window_fraction: 0.25,
            picard_tol: 1e-10,
            max_iter: 100,
            cg_tol: 1e-10,
            cg_max_iter: None,
            nonnegativity_threshold: 0.0,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.window_fraction > 0.0 && self.window_fraction <= 1.0) {
            return Err(SolverError::Option { key: "window_fraction", constraint: "0 < window_fraction <= 1" });
        }
        if !(self.picard_tol > 0.0) {
            return Err(SolverError::Option { key: "picard_tol", constraint: "picard_tol > 0" });
        }
        if self.max_iter == 0 {
            return Err(SolverError::Option { key: "max_iter", constraint: "max_iter >= 1" });
        }
        if !(self.cg_tol > 0.0) {
            return Err(SolverError::Option { key: "cg_tol", constraint: "cg_tol > 0" });
        }
        if !(self.nonnegativity_threshold >= 0.0) {
            return Err(SolverError::Option { key: "nonnegativity_threshold", constraint: "threshold >= 0" });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WindowReport {
    pub start_step: usize,
    pub end_step: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub iterations: usize,
    /// `d_j = max_m |||k^{(j+1)} - k^{(j)}|||(t_m)`.
    pub distances: Vec<f64>,
    /// `q_j = d_{j+1} / d_j`.
    pub contraction_factors: Vec<f64>,
    /// Largest measured `q_j`, absent if fewer than two distances were seen.
    pub q: Option<f64>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PicardReport {
    pub steps: usize,
    pub dt: f64,
    pub windows: Vec<WindowReport>,
    /// Attempts abandoned because of non-contraction, before halving.
    pub rejected: Vec<WindowReport>,
    pub total_iterations: usize,
    pub min_state: f64,
    pub nonnegative: bool,
}

impl PicardReport {
    pub fn max_q(&self) -> Option<f64> {
        self.windows.iter().filter_map(|w| w.q).reduce(f64::max)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Everything fixed across solves: operators, data, time grid, tolerances.
#[derive(Debug, Clone)]
pub struct StateProblem {
    calc: Calculus,
    params: ModelParams,
    data: ProductivityData,
    steps: usize,
    options: SolverOptions,
    system: CsrMatrix,
    gram: CsrMatrix,
}

impl StateProblem {
    pub fn new(
        calc: Calculus,
        params: ModelParams,
        data: ProductivityData,
        steps: usize,
        options: SolverOptions,
    ) -> Result<Self, SolverError> {
        params.validate()?;
        options.validate()?;
        if steps == 0 {
            return Err(SolverError::Option { key: "steps", constraint: "steps >= 1" });
        }
        if data.a0().len() != calc.grid().len() {
            return Err(SolverError::Mismatch { what: "productivity data", expected: calc.grid().len(), got: data.a0().len() });
        }
        let dt = params.horizon / steps as f64;
        let gram = calc.assemble(-1.0).matrix;
        let shift = 1.0 / dt + params.delta;
        let rows = (0..gram.dim())
            .map(|i| {
                gram.row(i)
                    .map(|(j, v)| (j, params.beta * v + if i == j { shift } else { 0.0 }))
                    .collect()
            })
            .collect();
        let system = CsrMatrix::from_rows(rows);
        Ok(Self { calc, params, data, steps, options, system, gram })
    }

    pub fn calculus(&self) -> &Calculus {
        &self.calc
    }

    pub fn grid(&self) -> &Grid {
        self.calc.grid()
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn data(&self) -> &ProductivityData {
        &self.data
    }

    pub fn options(&self) -> &SolverOptions {
        &self.options
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dofs(&self) -> usize {
        self.system.dim()
    }

    pub fn dt(&self) -> f64 {
        self.params.horizon / self.steps as f64
    }

    pub fn time(&self, m: usize) -> f64 {
        m as f64 * self.dt()
    }

    /// Matrix `(1/Δt + δ)I - β𝒩ℒ` on interior dofs.
    pub fn system_matrix(&self) -> &CsrMatrix {
        &self.system
    }

    /// Matrix of `-𝒩ℒ` (β = 1) on interior dofs; `|||u|||² = w·uᵀGu`.
    pub fn gram_matrix(&self) -> &CsrMatrix {
        &self.gram
    }

    fn cg_budget(&self) -> usize {
        self.options.cg_max_iter.unwrap_or(10 * self.dofs() + 100)
    }

    /// Energy norm of a constrained field given by its interior values.
    pub fn energy_norm_dofs(&self, u: &[f64]) -> f64 {
        (self.grid().cell_volume() * dot(u, &self.gram.apply(u))).max(0.0).sqrt()
    }

    /// Solves `S x = rhs` starting from `x`.
    pub(crate) fn solve_system(&self, rhs: &[f64], x: &mut [f64], step: usize) -> Result<(), SolverError> {
        conjugate_gradient(|v, o| self.system.matvec(v, o), rhs, x, self.options.cg_tol, self.cg_budget())
            .map(|_| ())
            .map_err(|failure| SolverError::LinearSolve { step, failure })
    }

    /// `(I/Δt - β𝒩ℒ + δI) k_new = k_prev/Δt + source` on Ω, zero on the shell.
    pub fn linear_step(&self, k_prev: &Field, source: &Field) -> Result<Field, SolverError> {
        let g = self.grid();
        for (what, f) in [("k_prev", k_prev), ("source", source)] {
            if f.len() != g.len() {
                return Err(SolverError::Mismatch { what, expected: g.len(), got: f.len() });
            }
        }
        let dt = self.dt();
        let prev = k_prev.interior_values(g);
        let rhs: Vec<f64> = prev.iter().zip(source.interior_values(g)).map(|(k, s)| k / dt + s).collect();
        let mut x = prev;
        self.solve_system(&rhs, &mut x, 0)?;
        Ok(Field::from_interior(g, &x))
    }

    fn production_dofs(&self, k: &[f64], t: f64) -> Vec<f64> {
        let g = self.grid();
        productivity_production(&self.calc, &Field::from_interior(g, k), t, &self.data, &self.params).interior_values(g)
    }

    fn check_control(&self, c: &ControlTrajectory) -> Result<(), SolverError> {
        if c.steps() != self.steps {
            return Err(SolverError::Mismatch { what: "control steps", expected: self.steps, got: c.steps() });
        }
        if c.dofs() != self.dofs() {
            return Err(SolverError::Mismatch { what: "control dofs", expected: self.dofs(), got: c.dofs() });
        }
        Ok(())
    }

    // One application of the fixed-point map on steps m0..m0+len: 𝒫 is frozen
    // at the iterate v, the linear part is stepped implicitly from `start`.
    fn sweep(&self, m0: usize, v: &[Vec<f64>], c: &ControlTrajectory) -> Result<Vec<Vec<f64>>, SolverError> {
        let dt = self.dt();
        let mut out = Vec::with_capacity(v.len());
        out.push(v[0].clone());
        for i in 0..v.len() - 1 {
            let m = m0 + i;
            let p = self.production_dofs(&v[i + 1], self.time(m + 1));
            let cm = c.row(m);
            let rhs: Vec<f64> = (0..p.len()).map(|d| out[i][d] / dt + p[d] - cm[d]).collect();
            let mut x = v[i + 1].clone();
            self.solve_system(&rhs, &mut x, m + 1)?;
            out.push(x);
        }
        Ok(out)
    }

    fn window_distance(&self, a: &[Vec<f64>], b: &[Vec<f64>]) -> (f64, f64) {
        let mut d = 0.0f64;
        let mut scale = 0.0f64;
        for (x, y) in a.iter().zip(b) {
            let diff: Vec<f64> = x.iter().zip(y).map(|(p, q)| p - q).collect();
            d = d.max(self.energy_norm_dofs(&diff));
            scale = scale.max(self.energy_norm_dofs(x));
        }
        (d, scale)
    }

    /// Windowed Picard iteration for the whole horizon.
    ///
    /// The first window spans `max(1, round(M·window_fraction))` steps. If the
    /// latest contraction factor is still `≥ 1` after three iterations, or the
    /// iteration budget runs out, the window is halved and retried; a
    /// one-step window that fails aborts the solve.
    pub fn picard_solve(&self, k0: &Field, c: &ControlTrajectory) -> Result<(StateTrajectory, PicardReport), SolverError> {
        let g = self.grid();
        if k0.len() != g.len() {
            return Err(SolverError::Mismatch { what: "k0", expected: g.len(), got: k0.len() });
        }
        for (i, &v) in k0.values().iter().enumerate() {
            let ok = if g.is_interior(i) { v.is_finite() && v >= 0.0 } else { v == 0.0 };
            if !ok {
                return Err(SolverError::InitialState(i));
            }
        }
        self.check_control(c)?;
        let m_total = self.steps;
        let dt = self.dt();
        let mut window = ((m_total as f64 * self.options.window_fraction).round() as usize).clamp(1, m_total);
        let mut nodes: Vec<Vec<f64>> = vec![k0.interior_values(g)];
        let mut report = PicardReport {
            steps: m_total,
            dt,
            windows: Vec::new(),
            rejected: Vec::new(),
            total_iterations: 0,
            min_state: 0.0,
            nonnegative: true,
        };

        let mut m0 = 0;
        while m0 < m_total {
            let len = window.min(m_total - m0);
            let start = nodes[m0].clone();
            let mut v = vec![start; len + 1];
            let mut wr = WindowReport {
                start_step: m0,
                end_step: m0 + len,
                t_start: self.time(m0),
                t_end: self.time(m0 + len),
                iterations: 0,
                distances: Vec::new(),
                contraction_factors: Vec::new(),
                q: None,
                converged: false,
            };
            let mut halve = false;
            for _ in 0..self.options.max_iter {
                let next = self.sweep(m0, &v, c)?;
                let (d, scale) = self.window_distance(&next, &v);
                wr.iterations += 1;
                report.total_iterations += 1;
                if let Some(&prev) = wr.distances.last() {
                    if prev > 0.0 {
                        wr.contraction_factors.push(d / prev);
                    }
                }
                wr.distances.push(d);
                v = next;
                if d < self.options.picard_tol || d <= 1e-14 * (1.0 + scale) {
                    wr.converged = true;
                    break;
                }
                if len > 1 && wr.distances.len() >= 3 && wr.contraction_factors.last().is_some_and(|&q| q >= 1.0) {
                    halve = true;
                    break;
                }
            }
            wr.q = wr.contraction_factors.iter().copied().reduce(f64::max);
            if wr.converged {
                nodes.extend(v.into_iter().skip(1));
                report.windows.push(wr);
                m0 += len;
            } else if halve || len > 1 {
                report.rejected.push(wr);
                window = len / 2;
            } else {
                let last_distance = *wr.distances.last().unwrap_or(&f64::NAN);
                let iterations = wr.iterations;
                report.rejected.push(wr);
                return Err(SolverError::NonConvergence {
                    start_step: m0,
                    end_step: m0 + len,
                    iterations,
                    last_distance,
                    report: Box::new(report),
                });
            }
        }

        let fields: Vec<Field> = nodes.iter().map(|n| Field::from_interior(g, n)).collect();
        let traj = StateTrajectory::new(dt, fields);
        report.min_state = traj.min_interior(g);
        report.nonnegative = report.min_state >= -self.options.nonnegativity_threshold;
        Ok((traj, report))
    }

    /// Independent per-point check: integrates
    /// `k̇ = -(βΓ̂ + δ)k + g(t)`, `g = β Σ_y w_y k(y,t) Γ_ε(x,y) + 𝒫(k)(x,t) - c`,
    /// by variation of constants with trapezoidal quadrature, using the given
    /// trajectory for the neighbour values. `c` is held at its interval value
    /// at both quadrature ends.
    pub fn pointwise_ode_oracle(&self, k: &StateTrajectory, c: &ControlTrajectory, x: usize) -> Result<Vec<f64>, SolverError> {
        self.check_control(c)?;
        if k.steps() != self.steps {
            return Err(SolverError::Mismatch { what: "trajectory steps", expected: self.steps, got: k.steps() });
        }
        let g = self.grid();
        let Some(dof) = g.dof(x) else {
            return Err(SolverError::Mismatch { what: "oracle point (interior index)", expected: g.interior_count(), got: x });
        };
        let a = self.params.beta * self.calc.kernel_mass(x) + self.params.delta;
        let forcing = |m: usize| self.smooth_forcing(k.field(m), x, self.time(m));
        let dt = self.dt();
        let decay = (-a * dt).exp();
        let mut out = Vec::with_capacity(self.steps + 1);
        out.push(k.field(0).0[x]);
        let mut g_left = forcing(0);
        for m in 0..self.steps {
            let g_right = forcing(m + 1);
            let cm = c.value(m, dof);
            let prev = *out.last().expect("nonempty");
            let next = decay * prev + 0.5 * dt * ((g_left - cm) * decay + (g_right - cm));
            out.push(next);
            g_left = g_right;
        }
        Ok(out)
    }

    // β Σ_{y≠x} w_y k(y) Γ_ε(x,y) + 𝒫(k)(x,t), evaluated locally at x.
    fn smooth_forcing(&self, k: &Field, x: usize, t: f64) -> f64 {
        let pairs = self.calc.pairs();
        let w = self.grid().weights();
        let peak = self.calc.kernel().peak();
        let (mut coupling, mut phi_mu, mut phi_eps) = (0.0, 0.0, 0.0);
        for e in pairs.row(x) {
            let y = pairs.neighbor(e);
            let ge = pairs.gamma(Radius::Epsilon, e);
            coupling += w[y] * k.0[y] * ge;
            phi_eps += w[y] * nominal(k.0[y]) * ge;
            phi_mu += w[y] * nominal(k.0[y]) * pairs.gamma(Radius::Mu, e);
        }
        phi_eps += w[x] * nominal(k.0[x]) * peak;
        phi_mu += w[x] * nominal(k.0[x]) * peak;
        let prod = self.data.a0().0[x] * (t * phi_mu / (phi_eps + self.params.xi)).exp() * production(k.0[x], &self.params);
        self.params.beta * coupling + prod
    }

    /// Evaluates the a-priori estimate `‖k‖ ≤ C_∞(‖c‖ + ‖k₀‖ + 1)`.
    ///
    /// Left side: `(Σ_{m≥1} Δt |||k_m|||² + Σ_m Δt ‖(k_{m+1} - k_m)/Δt‖²)^{1/2}`,
    /// the dual norm of the time derivative bounded by its L² norm.
    ///
    /// `C_∞` follows the discrete energy argument. Implicit Euler gives
    /// `‖k_m‖ ≤ S := ‖k₀‖ + P_T + √T‖c‖` with
    /// `P_T = ‖A₀‖_∞ M_p |Ω|^{1/2} e^{Δt}(e^T - 1)`. Then
    /// `Σ Δt|||k_m|||² ≤ C₂² T S²` and the difference quotient is bounded
    /// through the equation by `(βC₂² + δ)√T S + P₂ + ‖c‖` with
    /// `P₂ = ‖A₀‖_∞ M_p |Ω|^{1/2} e^{Δt} ((e^{2T} - 1)/2)^{1/2}`. Writing
    /// `a = (C₂ + βC₂² + δ)√T`, the sum is bounded with
    /// `C_∞ = max(a, a√T + 1, a P_T + P₂)`.
    pub fn apriori_check(
        &self,
        k: &StateTrajectory,
        c: &ControlTrajectory,
        k0: &Field,
        constants: &EquivalenceConstants,
    ) -> Result<AprioriReport, SolverError> {
        self.check_control(c)?;
        let g = self.grid();
        let dt = self.dt();
        let w = g.cell_volume();
        let dofs: Vec<Vec<f64>> = k.fields().iter().map(|f| f.interior_values(g)).collect();
        let energy_sq: f64 = dofs.iter().skip(1).map(|u| dt * self.energy_norm_dofs(u).powi(2)).sum();
        let deriv_sq: f64 = dofs
            .windows(2)
            .map(|p| dt * w * p[1].iter().zip(&p[0]).map(|(b, a)| ((b - a) / dt).powi(2)).sum::<f64>())
            .sum();
        let lhs = (energy_sq + deriv_sq).sqrt();

        let c_norm = (0..c.steps())
            .map(|m| dt * w * c.row(m).iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let k0_norm = (w * k0.interior_values(g).iter().map(|v| v * v).sum::<f64>()).sqrt();
        let t = self.params.horizon;
        let c2 = constants.c2;
        let growth = self.data.a0_sup() * self.params.mp * g.interior_volume().sqrt() * dt.exp();
        let p_t = growth * t.exp_m1();
        let p_2 = growth * ((2.0 * t).exp_m1() / 2.0).sqrt();
        let a = (c2 + self.params.beta * c2 * c2 + self.params.delta) * t.sqrt();
        let c_inf = a.max(a * t.sqrt() + 1.0).max(a * p_t + p_2);
        let rhs = c_inf * (c_norm + k0_norm + 1.0);
        Ok(AprioriReport {
            lhs,
            rhs,
            c_infinity: c_inf,
            c_norm,
            k0_norm,
            energy_part: energy_sq.sqrt(),
            derivative_part: deriv_sq.sqrt(),
            pass: lhs <= rhs,
        })
    }

    /// `Σ_x w_x k(x)` over the whole grid.
    pub fn mass(&self, k: &Field) -> f64 {
        k.values().iter().zip(self.grid().weights()).map(|(v, w)| v * w).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AprioriReport {
    pub lhs: f64,
    pub rhs: f64,
    pub c_infinity: f64,
    pub c_norm: f64,
    pub k0_norm: f64,
    pub energy_part: f64,
    pub derivative_part: f64,
    pub pass: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::BoxBounds;
    use crate::geometry::{build_grid, Domain};
    use crate::kernel::KernelParams;
    use crate::model::Profile;

    fn problem(params: ModelParams, a0: f64, steps: usize, options: SolverOptions) -> StateProblem {
        let d = Domain::interval(0.0, 1.0, 0.2).unwrap();
        let grid = build_grid(&d, 0.05).unwrap();
        let calc = Calculus::new(grid, KernelParams::new(1, 0.1, 0.2, 0.1).unwrap()).unwrap();
        let data = ProductivityData::from_profiles(calc.grid(), Profile::Constant(a0), Profile::Constant(0.0)).unwrap();
        StateProblem::new(calc, params, data, steps, options).unwrap()
    }

    fn zero_control(p: &StateProblem) -> ControlTrajectory {
        ControlTrajectory::constant(p.steps(), p.dofs(), 0.0, BoxBounds::unbounded())
    }

    #[test]
    fn zero_system_stays_zero() {
        let p = problem(ModelParams::default(), 0.0, 8, SolverOptions::default());
        let (k, r) = p.picard_solve(&Field::zeros(p.grid()), &zero_control(&p)).unwrap();
        assert!(k.fields().iter().all(|f| f.0.iter().all(|&v| v == 0.0)));
        assert!(r.windows.iter().all(|w| w.iterations == 1));
    }

    #[test]
    fn linear_step_trivial_cases() {
        let p = problem(ModelParams::default(), 0.0, 4, SolverOptions::default());
        let z = Field::zeros(p.grid());
        assert!(p.linear_step(&z, &z).unwrap().0.iter().all(|&v| v == 0.0));

        let params = ModelParams { beta: 0.0, delta: 0.3, ..Default::default() };
        let p = problem(params, 0.0, 4, SolverOptions { cg_tol: 1e-14, ..Default::default() });
        let prev = Field::constrained(p.grid(), |x| 1.0 + x[0]);
        let src = Field::constrained(p.grid(), |x| x[0] * x[0]);
        let got = p.linear_step(&prev, &src).unwrap();
        let dt = p.dt();
        for &i in p.grid().interior() {
            let want = (prev.0[i] / dt + src.0[i]) / (1.0 / dt + 0.3);
            assert!((got.0[i] - want).abs() < 1e-13);
        }
    }

    #[test]
    fn linear_step_three_dofs_against_elimination() {
        // Ω = (0, 0.3), h = 0.1, ε = 0.1: three interior points, one shell layer each side.
        let d = Domain::interval(0.0, 0.3, 0.1).unwrap();
        let grid = build_grid(&d, 0.1).unwrap();
        let calc = Calculus::new(grid, KernelParams::new(1, 0.08, 0.1, 0.05).unwrap()).unwrap();
        let data = ProductivityData::from_profiles(calc.grid(), Profile::Constant(0.0), Profile::Constant(0.0)).unwrap();
        let params = ModelParams { beta: 0.7, delta: 0.2, horizon: 0.5, ..Default::default() };
        let p = StateProblem::new(calc, params, data, 5, SolverOptions { cg_tol: 1e-14, ..Default::default() }).unwrap();
        assert_eq!(p.dofs(), 3);
        let dt = 0.1;
        let w = 0.1;
        let gam = (1.0 / (2.0 * std::f64::consts::PI * 0.0064)).sqrt() * (-0.01 / 0.0128f64).exp();
        // every interior point has two neighbours at distance h
        let diag = 1.0 / dt + 0.2 + 0.7 * 2.0 * w * gam;
        let off = -0.7 * w * gam;
        let m = nalgebra::Matrix3::new(diag, off, 0.0, off, diag, off, 0.0, off, diag);
        let prev = [0.3, 0.5, 0.2];
        let src = [1.0, -0.5, 0.25];
        let rhs = nalgebra::Vector3::from_fn(|i, _| prev[i] / dt + src[i]);
        let want = m.lu().solve(&rhs).unwrap();
        let got = p
            .linear_step(&Field::from_interior(p.grid(), &prev), &Field::from_interior(p.grid(), &src))
            .unwrap()
            .interior_values(p.grid());
        for i in 0..3 {
            assert!((got[i] - want[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn shell_values_remain_bit_zero() {
        let p = problem(ModelParams::default(), 1.0, 10, SolverOptions::default());
        let k0 = Field::constrained(p.grid(), |x| 1.0 + x[0]);
        let c = ControlTrajectory::constant(10, p.dofs(), 0.2, BoxBounds::unbounded());
        let (k, r) = p.picard_solve(&k0, &c).unwrap();
        assert!(k.fields().iter().all(|f| f.is_constrained(p.grid())));
        assert_eq!(k.field(0), &k0);
        for w in &r.windows {
            assert!(w.converged);
            if let Some(q) = w.q {
                assert!(q < 1.0);
            }
        }
        assert_eq!(r.windows.last().unwrap().end_step, 10);
    }

    #[test]
    fn mass_is_nonincreasing_for_pure_diffusion() {
        let params = ModelParams { delta: 0.0, ..Default::default() };
        let p = problem(params, 0.0, 20, SolverOptions::default());
        let k0 = Field::constrained(p.grid(), |_| 1.0);
        let (k, _) = p.picard_solve(&k0, &zero_control(&p)).unwrap();
        let masses: Vec<f64> = k.fields().iter().map(|f| p.mass(f)).collect();
        assert!(masses.windows(2).all(|m| m[1] <= m[0] + 1e-12));
    }

    #[test]
    fn oracle_trivial_cases() {
        // g ≡ 0: A₀ = 0, c = 0, β = 0 (decay only)
        let params = ModelParams { beta: 0.0, delta: 0.4, ..Default::default() };
        let p = problem(params, 0.0, 10, SolverOptions::default());
        let x = p.grid().interior()[3];
        let fields = (0..=10).map(|_| Field::constrained(p.grid(), |_| 2.0)).collect();
        let traj = StateTrajectory::new(p.dt(), fields);
        let out = p.pointwise_ode_oracle(&traj, &zero_control(&p), x).unwrap();
        for (m, v) in out.iter().enumerate() {
            assert!((v - 2.0 * (-0.4 * p.time(m)).exp()).abs() < 1e-14);
        }
        // constant forcing through c → steady state -c/a
        let params = ModelParams { beta: 0.0, delta: 2.0, horizon: 10.0, ..Default::default() };
        let p = problem(params, 0.0, 100, SolverOptions::default());
        let x = p.grid().interior()[3];
        let traj = StateTrajectory::new(p.dt(), vec![Field::zeros(p.grid()); 101]);
        let c = ControlTrajectory::constant(100, p.dofs(), -1.0, BoxBounds::unbounded());
        let out = p.pointwise_ode_oracle(&traj, &c, x).unwrap();
        // trapezoid fixed point is (Δt/2)(1+e)/(1-e) with e = e^{-aΔt}; tends to 1/a = 0.5
        let e = (-2.0 * p.dt()).exp();
        let discrete = 0.5 * p.dt() * (1.0 + e) / (1.0 - e);
        assert!((out[100] - discrete).abs() < 1e-8);
        assert!((out[100] - 0.5).abs() < 5e-3);
    }

    #[test]
    fn apriori_holds_on_zero_and_forced_runs() {
        let p = problem(ModelParams::default(), 1.0, 10, SolverOptions::default());
        let consts = p.calculus().estimate_equivalence_constants().unwrap();
        let zero = Field::zeros(p.grid());
        let pz = problem(ModelParams::default(), 0.0, 10, SolverOptions::default());
        let (k, _) = pz.picard_solve(&zero, &zero_control(&pz)).unwrap();
        let r = pz.apriori_check(&k, &zero_control(&pz), &zero, &consts).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.pass);

        let k0 = Field::constrained(p.grid(), |x| (std::f64::consts::PI * x[0]).sin());
        let c = ControlTrajectory::constant(10, p.dofs(), 0.3, BoxBounds::unbounded());
        let (k, _) = p.picard_solve(&k0, &c).unwrap();
        let r = p.apriori_check(&k, &c, &k0, &consts).unwrap();
        assert!(r.pass, "{r:?}");
        let c2 = ControlTrajectory::constant(10, p.dofs(), 0.6, BoxBounds::unbounded());
        let r2 = p.apriori_check(&k, &c2, &k0, &consts).unwrap();
        assert!(r2.rhs <= 2.0 * r.rhs + r.c_infinity * (r.k0_norm + 1.0) + 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = problem(ModelParams::default(), 0.0, 4, SolverOptions::default());
        let neg = Field::constrained(p.grid(), |_| -1.0);
        assert!(matches!(p.picard_solve(&neg, &zero_control(&p)), Err(SolverError::InitialState(_))));
        let short = ControlTrajectory::constant(3, p.dofs(), 0.0, BoxBounds::unbounded());
        assert!(matches!(p.picard_solve(&Field::zeros(p.grid()), &short), Err(SolverError::Mismatch { .. })));
    }

    #[test]
    fn aborts_on_one_step_budget_exhaustion() {
        let opts = SolverOptions { max_iter: 1, picard_tol: 1e-300, ..Default::default() };
        let p = problem(ModelParams::default(), 2.0, 4, opts);
        let k0 = Field::constrained(p.grid(), |_| 1.0);
        let err = p.picard_solve(&k0, &zero_control(&p)).unwrap_err();
        match err {
            SolverError::NonConvergence { report, .. } => assert!(!report.rejected.is_empty()),
            other => panic!("unexpected {other:?}"),
        }
    }
}
