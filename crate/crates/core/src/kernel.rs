//! Truncated isotropic Gaussian kernel `Γ_ν` and its antisymmetric root `α_ε`.

use std::f64::consts::PI;

use serde::Serialize;
use thiserror::Error;

use crate::exec;
use crate::geometry::{Grid, Point};

/// Relative slack on the closed-ball support test. Lattice pairs that sit at
/// distance exactly ν (up to the rounding of their coordinates) are kept.
pub const SUPPORT_SLACK: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("kernel width sigma must be positive and finite, got {0}")]
    Sigma(f64),
    #[error("radii must satisfy 0 < mu < epsilon, got mu={mu}, epsilon={epsilon}")]
    Radii { mu: f64, epsilon: f64 },
    #[error("dimension must be 1 or 2, got {0}")]
    Dimension(usize),
    #[error("grid (dim {grid_dim}, epsilon {grid_eps}) is incompatible with kernel (dim {dim}, epsilon {eps})")]
    Incompatible { grid_dim: usize, grid_eps: f64, dim: usize, eps: f64 },
    #[error("kernel property {property} violated: witnessed {witnessed}, bound {bound}")]
    PropertyViolation { property: u8, witnessed: f64, bound: f64, report: Box<KernelReport> },
}

/// Which truncation radius to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Radius {
    Epsilon,
    Mu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KernelParams {
    sigma: f64,
    epsilon: f64,
    mu: f64,
    dim: usize,
}

impl KernelParams {
    pub fn new(dim: usize, sigma: f64, epsilon: f64, mu: f64) -> Result<Self, KernelError> {
        if !(1..=2).contains(&dim) {
            return Err(KernelError::Dimension(dim));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(KernelError::Sigma(sigma));
        }
        if !(epsilon.is_finite() && mu > 0.0 && mu < epsilon) {
            return Err(KernelError::Radii { mu, epsilon });
        }
        Ok(Self { sigma, epsilon, mu, dim })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn radius(&self, which: Radius) -> f64 {
        match which {
            Radius::Epsilon => self.epsilon,
            Radius::Mu => self.mu,
        }
    }

    /// Gaussian normalization `(2πσ²)^{-n/2}`, the kernel's value on the diagonal.
    pub fn peak(&self) -> f64 {
        (2.0 * PI * self.sigma * self.sigma).powf(-(self.dim as f64) / 2.0)
    }

    /// Kernel value as a function of the squared distance.
    pub fn gamma_sq_dist(&self, which: Radius, dist_sq: f64) -> f64 {
        let r = self.radius(which);
        if in_support(dist_sq, r) {
            self.peak() * (-dist_sq / (2.0 * self.sigma * self.sigma)).exp()
        } else {
            0.0
        }
    }

    pub fn gamma(&self, which: Radius, x: &Point, y: &Point) -> f64 {
        self.gamma_sq_dist(which, dist_sq(x, y))
    }

    pub fn alpha(&self, x: &Point, y: &Point) -> f64 {
        let s = sign_factor(x, y);
        if s == 0.0 {
            return 0.0;
        }
        s * self.gamma(Radius::Epsilon, x, y).sqrt()
    }
}

#[inline]
pub fn dist_sq(x: &Point, y: &Point) -> f64 {
    let a = x[0] - y[0];
    let b = x[1] - y[1];
    a * a + b * b
}

#[inline]
pub fn in_support(dist_sq: f64, radius: f64) -> bool {
    dist_sq <= radius * radius * (1.0 + SUPPORT_SLACK)
}

/// Antisymmetric sign `sign(‖x‖-‖y‖)`, with ties between distinct points of
/// equal norm broken lexicographically (+1 when `x` precedes `y`).
pub fn sign_factor(x: &Point, y: &Point) -> f64 {
    let nx = x[0] * x[0] + x[1] * x[1];
    let ny = y[0] * y[0] + y[1] * y[1];
    if nx > ny {
        1.0
    } else if nx < ny {
        -1.0
    } else {
        match x.partial_cmp(y) {
            Some(std::cmp::Ordering::Less) => 1.0,
            Some(std::cmp::Ordering::Greater) => -1.0,
            _ => 0.0,
        }
    }
}

/// Volume of the unit ball in `R^n`.
pub fn unit_ball_volume(dim: usize) -> f64 {
    match dim {
        1 => 2.0,
        2 => PI,
        n => PI.powf(n as f64 / 2.0) / gamma_half_integer(n + 2),
    }
}

// Γ(k/2) for positive integer k.
fn gamma_half_integer(k: usize) -> f64 {
    match k {
        1 => PI.sqrt(),
        2 => 1.0,
        _ => (k as f64 / 2.0 - 1.0) * gamma_half_integer(k - 2),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropertyEntry {
    pub property: u8,
    pub name: &'static str,
    pub witnessed_constant: f64,
    pub bound: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Outcome of checking the five kernel properties on a grid. Property 5's
/// witnessed constant is `γ_2²`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KernelReport {
    pub entries: Vec<PropertyEntry>,
    pub all_pass: bool,
}

impl KernelReport {
    pub fn entry(&self, property: u8) -> &PropertyEntry {
        &self.entries[(property - 1) as usize]
    }
}

// Midpoint lattice sum of f(Γ_ε) over the ε-ball around x at spacing h.
fn ball_lattice_sum(params: &KernelParams, x: &Point, h: f64, f: impl Fn(f64) -> f64) -> f64 {
    let reach = (params.epsilon / h).ceil() as i64 + 1;
    let span = if params.dim == 2 { reach } else { 0 };
    let mut sum = 0.0;
    for a in -reach..=reach {
        for b in -span..=span {
            let y = [x[0] + a as f64 * h, x[1] + b as f64 * h];
            let g = params.gamma(Radius::Epsilon, x, &y);
            if g > 0.0 {
                sum += f(g);
            }
        }
    }
    sum * h.powi(params.dim as i32)
}

#[derive(Debug, Clone, Copy)]
struct PointWitness {
    idx: usize,
    min_in_ball: f64,
    min_half_ball: f64,
    max_outside: f64,
    integral: f64,
    integral_sq: f64,
}

/// Checks the five kernel properties on every interior point of `grid`.
///
/// Properties 1-3 are pointwise and exact. Properties 4 and 5 compare the
/// quadrature witnesses `γ_1 = min_x ∫Γ_ε` and `γ_2² = max_x ∫Γ_ε²` against
/// the closed-form bounds, allowing the Richardson error estimate obtained by
/// repeating the witness quadrature at half the spacing.
pub fn verify_kernel_properties(params: &KernelParams, grid: &Grid) -> Result<KernelReport, KernelError> {
    let eps = params.epsilon;
    if grid.dim() != params.dim || (grid.domain().epsilon() - eps).abs() > 1e-12 * eps {
        return Err(KernelError::Incompatible {
            grid_dim: grid.dim(),
            grid_eps: grid.domain().epsilon(),
            dim: params.dim,
            eps,
        });
    }
    let w = grid.cell_volume();
    let half_sq = 0.25 * eps * eps;
    let witnesses: Vec<PointWitness> = exec::map_slice(grid.interior(), |&i| {
        let x = grid.point(i);
        let mut wit = PointWitness {
            idx: i,
            min_in_ball: f64::INFINITY,
            min_half_ball: f64::INFINITY,
            max_outside: 0.0,
            integral: 0.0,
            integral_sq: 0.0,
        };
        for y in grid.points() {
            let d2 = dist_sq(x, y);
            let g = params.gamma_sq_dist(Radius::Epsilon, d2);
            if in_support(d2, eps) {
                wit.min_in_ball = wit.min_in_ball.min(g);
                wit.integral += w * g;
                wit.integral_sq += w * g * g;
                if in_support(d2, 0.5 * eps) {
                    wit.min_half_ball = wit.min_half_ball.min(g);
                }
            } else {
                wit.max_outside = wit.max_outside.max(g);
            }
        }
        wit
    });

    let peak = params.peak();
    let n = params.dim;
    let sigma2 = params.sigma * params.sigma;
    let c_n = unit_ball_volume(n);
    let h = grid.spacing();

    let min_in_ball = witnesses.iter().map(|w| w.min_in_ball).fold(f64::INFINITY, f64::min);
    let gamma0 = witnesses.iter().map(|w| w.min_half_ball).fold(f64::INFINITY, f64::min);
    let max_outside = witnesses.iter().map(|w| w.max_outside).fold(0.0, f64::max);
    let w1 = witnesses
        .iter()
        .min_by(|a, b| a.integral.total_cmp(&b.integral))
        .copied()
        .expect("grid has interior points");
    let w2 = witnesses
        .iter()
        .max_by(|a, b| a.integral_sq.total_cmp(&b.integral_sq))
        .copied()
        .expect("grid has interior points");

    let richardson = |x: &Point, coarse: f64, f: &dyn Fn(f64) -> f64| {
        let fine = ball_lattice_sum(params, x, 0.5 * h, f);
        (4.0 / 3.0) * (coarse - fine).abs() + 64.0 * f64::EPSILON * coarse.abs()
    };
    let tol4 = richardson(grid.point(w1.idx), w1.integral, &|g| g);
    let tol5 = richardson(grid.point(w2.idx), w2.integral_sq, &|g| g * g);

    let bound2 = peak * (-half_sq / sigma2).exp();
    let bound4 = c_n * eps.powi(n as i32) * peak * (-eps * eps / sigma2).exp();
    let bound5 = c_n * eps.powi(n as i32) * peak * peak;

    let entries = vec![
        PropertyEntry {
            property: 1,
            name: "nonnegative on the epsilon-ball",
            witnessed_constant: min_in_ball,
            bound: 0.0,
            tolerance: 0.0,
            pass: min_in_ball >= 0.0,
        },
        PropertyEntry {
            property: 2,
            name: "positive lower bound gamma_0 on the half ball",
            witnessed_constant: gamma0,
            bound: bound2,
            tolerance: 0.0,
            pass: gamma0 > 0.0 && gamma0 >= bound2,
        },
        PropertyEntry {
            property: 3,
            name: "vanishes outside the epsilon-ball",
            witnessed_constant: max_outside,
            bound: 0.0,
            tolerance: 0.0,
            pass: max_outside == 0.0,
        },
        PropertyEntry {
            property: 4,
            name: "integral lower bound gamma_1",
            witnessed_constant: w1.integral,
            bound: bound4,
            tolerance: tol4,
            pass: w1.integral > 0.0 && w1.integral >= bound4 - tol4,
        },
        PropertyEntry {
            property: 5,
            name: "square-integral upper bound gamma_2^2",
            witnessed_constant: w2.integral_sq,
            bound: bound5,
            tolerance: tol5,
            pass: w2.integral_sq <= bound5 + tol5,
        },
    ];
    let all_pass = entries.iter().all(|e| e.pass);
    let report = KernelReport { entries, all_pass };
    if let Some(bad) = report.entries.iter().find(|e| !e.pass) {
        return Err(KernelError::PropertyViolation {
            property: bad.property,
            witnessed: bad.witnessed_constant,
            bound: bad.bound,
            report: Box::new(report.clone()),
        });
    }
    Ok(report)
}
