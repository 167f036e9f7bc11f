//! Economic ingredients of the spatial growth model.

use serde::Serialize;
use thiserror::Error;

use crate::calculus::{Calculus, Field};
use crate::control::ControlTrajectory;
use crate::exec;
use crate::geometry::{Grid, Point};
use crate::kernel::Radius;
use crate::linalg::CsrMatrix;
use crate::solver::StateTrajectory;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid {key} = {value}: requires {constraint}")]
    Invalid { key: &'static str, value: f64, constraint: &'static str },
    #[error("utility is undefined for negative consumption {0}")]
    NegativeConsumption(f64),
    #[error("{what} has length {got}, expected {expected}")]
    Mismatch { what: &'static str, expected: usize, got: usize },
    #[error("productivity A0 must be finite and nonnegative on the domain and zero on the shell (point {0})")]
    Productivity(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ModelParams {
    pub beta: f64,
    pub delta: f64,
    pub tau: f64,
    pub space_discount: f64,
    pub rho: f64,
    pub xi: f64,
    pub horizon: f64,
    pub mp: f64,
    pub lambda_p: f64,
    pub theta: f64,
    pub eta: f64,
}

impl Default for ModelParams {
    fn default() -> Self {
        Self {
            beta: 1.0,
            delta: 0.05,
            tau: 0.03,
            space_discount: 0.0,
            rho: 1.0,
            xi: 0.1,
            horizon: 1.0,
            mp: 1.0,
            lambda_p: 1.0,
            theta: 0.5,
            eta: 0.01,
        }
    }
}

impl ModelParams {
    pub fn validate(&self) -> Result<(), ModelError> {
        let checks: [(&'static str, f64, bool, &'static str); 11] = [
            ("beta", self.beta, self.beta >= 0.0, "beta >= 0"),
            ("delta", self.delta, self.delta >= 0.0, "delta >= 0"),
            ("tau", self.tau, self.tau >= 0.0, "tau >= 0"),
            ("space_discount", self.space_discount, self.space_discount >= 0.0, "space_discount >= 0"),
            ("rho", self.rho, self.rho > 0.0, "rho > 0"),
            ("xi", self.xi, self.xi > 0.0, "xi > 0"),
            ("horizon", self.horizon, self.horizon > 0.0, "horizon > 0"),
            ("mp", self.mp, self.mp > 0.0, "mp > 0"),
            ("lambda_p", self.lambda_p, self.lambda_p > 0.0, "lambda_p > 0"),
            ("theta", self.theta, self.theta > 0.0 && self.theta < 1.0, "0 < theta < 1"),
            ("eta", self.eta, self.eta > 0.0, "eta > 0"),
        ];
        for (key, value, ok, constraint) in checks {
            if !ok || !value.is_finite() {
                return Err(ModelError::Invalid { key, value, constraint });
            }
        }
        Ok(())
    }

    /// Lipschitz constant of [`production`].
    pub fn production_lipschitz(&self) -> f64 {
        self.mp * self.lambda_p
    }

    /// Lipschitz constant of [`utility`] on `[0, ∞)`.
    pub fn utility_lipschitz(&self) -> f64 {
        self.eta.powf(-self.theta)
    }

    pub fn discount(&self, t: f64, x: &Point) -> f64 {
        (-self.tau * t - self.space_discount * (x[0] * x[0] + x[1] * x[1])).exp()
    }
}

/// `p(k) = M_p (1 - e^{-λ_p max(k, 0)})`.
pub fn production(k: f64, params: &ModelParams) -> f64 {
    params.mp * -(-params.lambda_p * k.max(0.0)).exp_m1()
}

/// `φ(k) = max(k, 0)`.
pub fn nominal(k: f64) -> f64 {
    k.max(0.0)
}

/// `U(c) = ((c + η)^{1-θ} - η^{1-θ}) / (1 - θ)`.
pub fn utility(c: f64, params: &ModelParams) -> Result<f64, ModelError> {
    if c < 0.0 || c.is_nan() {
        return Err(ModelError::NegativeConsumption(c));
    }
    let e = 1.0 - params.theta;
    Ok(((c + params.eta).powf(e) - params.eta.powf(e)) / e)
}

pub fn utility_derivative(c: f64, params: &ModelParams) -> Result<f64, ModelError> {
    if c < 0.0 || c.is_nan() {
        return Err(ModelError::NegativeConsumption(c));
    }
    Ok((c + params.eta).powf(-params.theta))
}

/// Initial productivity `A₀` and terminal target `k_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductivityData {
    a0: Field,
    k_target: Field,
}

/// Built-in analytic profiles. Shell values are always forced to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Profile {
    Constant(f64),
    Gaussian { amplitude: f64, center: Point, width: f64 },
}

impl Profile {
    pub fn eval(&self, x: &Point) -> f64 {
        match *self {
            Profile::Constant(v) => v,
            Profile::Gaussian { amplitude, center, width } => {
                let r2 = (x[0] - center[0]).powi(2) + (x[1] - center[1]).powi(2);
                amplitude * (-r2 / (2.0 * width * width)).exp()
            }
        }
    }

    pub fn field(&self, grid: &Grid) -> Field {
        Field::constrained(grid, |x| self.eval(x))
    }
}

impl ProductivityData {
    pub fn new(grid: &Grid, a0: Field, k_target: Field) -> Result<Self, ModelError> {
        for (what, f) in [("A0", &a0), ("k_target", &k_target)] {
            if f.len() != grid.len() {
                return Err(ModelError::Mismatch { what, expected: grid.len(), got: f.len() });
            }
        }
        for (i, &v) in a0.values().iter().enumerate() {
            let ok = if grid.is_interior(i) { v.is_finite() && v >= 0.0 } else { v == 0.0 };
            if !ok {
                return Err(ModelError::Productivity(i));
            }
        }
        Ok(Self { a0, k_target })
    }

    pub fn from_profiles(grid: &Grid, a0: Profile, k_target: Profile) -> Result<Self, ModelError> {
        Self::new(grid, a0.field(grid), k_target.field(grid))
    }

    pub fn a0(&self) -> &Field {
        &self.a0
    }

    pub fn k_target(&self) -> &Field {
        &self.k_target
    }

    pub fn a0_sup(&self) -> f64 {
        self.a0.values().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `Φ_ν(k)(x) = Σ_y w_y φ(k(y)) Γ_ν(x,y)`, the sum running over the whole grid
/// including `y = x`. Evaluated on Ω; shell entries are zero.
pub fn phi_integral(calc: &Calculus, k: &Field, radius: Radius) -> Field {
    let grid = calc.grid();
    let pairs = calc.pairs();
    let w = grid.weights();
    let peak = calc.kernel().peak();
    Field(exec::map_range(grid.len(), |x| {
        if !grid.is_interior(x) {
            return 0.0;
        }
        let off: f64 = pairs
            .row(x)
            .map(|e| {
                let y = pairs.neighbor(e);
                w[y] * nominal(k.0[y]) * pairs.gamma(radius, e)
            })
            .sum();
        off + w[x] * nominal(k.0[x]) * peak
    }))
}

/// The exponent fraction `Φ_μ / (Φ_ε + ξ)` on Ω.
pub fn production_fraction(calc: &Calculus, k: &Field, params: &ModelParams) -> Field {
    let mu = phi_integral(calc, k, Radius::Mu);
    let eps = phi_integral(calc, k, Radius::Epsilon);
    Field(mu.0.iter().zip(&eps.0).map(|(m, e)| m / (e + params.xi)).collect())
}

/// `𝒫(k)(x,t) = A₀(x) exp(t Φ_μ(k)(x) / (Φ_ε(k)(x) + ξ)) p(k(x))`, zero on Ω_I.
pub fn productivity_production(calc: &Calculus, k: &Field, t: f64, data: &ProductivityData, params: &ModelParams) -> Field {
    let frac = production_fraction(calc, k, params);
    let grid = calc.grid();
    Field(
        (0..grid.len())
            .map(|x| {
                if grid.is_interior(x) {
                    data.a0.0[x] * (t * frac.0[x]).exp() * production(k.0[x], params)
                } else {
                    0.0
                }
            })
            .collect(),
    )
}

/// Transpose of the Jacobian of `𝒫(·, t)` at `k`, restricted to interior dofs:
/// row `y` holds `∂𝒫(x)/∂k(y)` for every interior `x` coupled to `y`. Each
/// column is a central difference with step `10⁻⁶(1 + |k(y)|)`, evaluated by
/// updating only the `Φ` values that `k(y)` touches.
pub fn production_jacobian_transpose(
    calc: &Calculus,
    k: &Field,
    t: f64,
    data: &ProductivityData,
    params: &ModelParams,
) -> CsrMatrix {
    let grid = calc.grid();
    let pairs = calc.pairs();
    let w = grid.weights();
    let peak = calc.kernel().peak();
    let phi_mu = phi_integral(calc, k, Radius::Mu);
    let phi_eps = phi_integral(calc, k, Radius::Epsilon);
    let a0 = &data.a0.0;
    let value = |x: usize, mu: f64, eps: f64, kx: f64| a0[x] * (t * mu / (eps + params.xi)).exp() * production(kx, params);

    let rows = exec::map_slice(grid.interior(), |&y| {
        let ky = k.0[y];
        let h = 1e-6 * (1.0 + ky.abs());
        let dphi_p = nominal(ky + h) - nominal(ky);
        let dphi_m = nominal(ky - h) - nominal(ky);
        let mut row = Vec::with_capacity(pairs.row(y).len() + 1);
        let self_p = value(y, phi_mu.0[y] + w[y] * peak * dphi_p, phi_eps.0[y] + w[y] * peak * dphi_p, ky + h);
        let self_m = value(y, phi_mu.0[y] + w[y] * peak * dphi_m, phi_eps.0[y] + w[y] * peak * dphi_m, ky - h);
        row.push((grid.dof(y).expect("interior"), (self_p - self_m) / (2.0 * h)));
        for e in pairs.row(y) {
            let x = pairs.neighbor(e);
            let Some(dof) = grid.dof(x) else { continue };
            if a0[x] == 0.0 {
                continue;
            }
            let (gm, ge) = (pairs.gamma(Radius::Mu, e), pairs.gamma(Radius::Epsilon, e));
            let kx = k.0[x];
            let p = value(x, phi_mu.0[x] + w[y] * gm * dphi_p, phi_eps.0[x] + w[y] * ge * dphi_p, kx);
            let m = value(x, phi_mu.0[x] + w[y] * gm * dphi_m, phi_eps.0[x] + w[y] * ge * dphi_m, kx);
            row.push((dof, (p - m) / (2.0 * h)));
        }
        row
    });
    CsrMatrix::from_rows(rows)
}

/// Discrete L² pair norm `(Σ_{x∈Ω} Σ_y w_x w_y Γ_ν(x,y)²)^{1/2}`, diagonal included.
pub fn kernel_pair_norm(calc: &Calculus, radius: Radius) -> f64 {
    let grid = calc.grid();
    let pairs = calc.pairs();
    let w = grid.weights();
    let peak = calc.kernel().peak();
    let rows = exec::map_slice(grid.interior(), |&x| {
        let off: f64 = pairs
            .row(x)
            .map(|e| w[pairs.neighbor(e)] * pairs.gamma(radius, e).powi(2))
            .sum();
        w[x] * (off + w[x] * peak * peak)
    });
    rows.iter().sum::<f64>().sqrt()
}

/// Lipschitz bound `L(s) = ‖A₀‖_∞ (L_p e^s + M_p K s)` of `𝒫(·, s)` from
/// `L²(Ω ∪ Ω_I)` to `L²(Ω)`, with
/// `K = (L_exp L_φ ‖Γ_ε‖ + 2 L_exp L_φ ‖Γ_μ‖) / ξ`, `L_φ = 1`. The exponent
/// `s·Φ_μ/(Φ_ε+ξ)` ranges over `[0, s]`, so `L_exp = e^{max(s,1)}`.
pub fn lipschitz_bound(calc: &Calculus, data: &ProductivityData, params: &ModelParams, s: f64) -> f64 {
    let l_exp = s.max(1.0).exp();
    let k = (l_exp * kernel_pair_norm(calc, Radius::Epsilon) + 2.0 * l_exp * kernel_pair_norm(calc, Radius::Mu)) / params.xi;
    data.a0_sup() * (params.production_lipschitz() * s.exp() + params.mp * k * s)
}

/// Both terms of the objective and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveValue {
    pub total: f64,
    pub utility: f64,
    pub terminal: f64,
}

/// `𝒥 = Σ_m Δt Σ_{x∈Ω} w_x (-U(c_m(x)) e^{-τt_m - γ‖x‖²}) + (1/2ρ) Σ_{x∈Ω} w_x (k_M(x) - k_T(x))²`.
pub fn objective(
    grid: &Grid,
    params: &ModelParams,
    data: &ProductivityData,
    k: &StateTrajectory,
    c: &ControlTrajectory,
) -> Result<ObjectiveValue, ModelError> {
    if k.steps() != c.steps() {
        return Err(ModelError::Mismatch { what: "control steps", expected: k.steps(), got: c.steps() });
    }
    if c.dofs() != grid.interior_count() {
        return Err(ModelError::Mismatch { what: "control dofs", expected: grid.interior_count(), got: c.dofs() });
    }
    let dt = k.dt();
    let w = grid.weights();
    let mut util = 0.0;
    for m in 0..c.steps() {
        let t = m as f64 * dt;
        let mut s = 0.0;
        for (d, &x) in grid.interior().iter().enumerate() {
            s += w[x] * utility(c.value(m, d), params)? * params.discount(t, grid.point(x));
        }
        util -= dt * s;
    }
    let last = k.field(k.steps());
    let target = data.k_target();
    let terminal = grid
        .interior()
        .iter()
        .map(|&x| w[x] * (last.0[x] - target.0[x]).powi(2))
        .sum::<f64>()
        / (2.0 * params.rho);
    Ok(ObjectiveValue { total: util + terminal, utility: util, terminal })
}
