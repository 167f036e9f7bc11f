//! Discrete nonlocal vector calculus on a midpoint grid.
//!
//! Every integral is the grid's midpoint rule, and all operators share one
//! precomputed [`PairSet`] holding the ordered pairs `(x, y)`, `x ≠ y`, with
//! `‖x - y‖ ≤ ε`. Because the same weights are used on both sides, the
//! discrete identities (adjointness of `𝒟` and `𝒟*`, the Gauss theorem, the
//! composition `𝒩ℒ = -½𝒟𝒟*`) hold to rounding.

use thiserror::Error;

use crate::exec;
use crate::geometry::Grid;
use crate::kernel::{dist_sq, in_support, KernelError, KernelParams, Radius};
use crate::linalg::{conjugate_gradient, dot, norm2, CgFailure, CsrMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CalculusError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("{what} has length {got}, expected {expected}")]
    LengthMismatch { what: &'static str, expected: usize, got: usize },
    #[error("grid has no interior points")]
    EmptyInterior,
    #[error("power iteration for the {which} eigenvalue stagnated after {iterations} iterations")]
    Stagnation { which: &'static str, iterations: usize },
    #[error(transparent)]
    Cg(#[from] CgFailure),
}

/// Scalar values, one per grid point (`Ω ∪ Ω_I`).
#[derive(Debug, Clone, PartialEq)]
pub struct Field(pub Vec<f64>);

impl Field {
    pub fn zeros(grid: &Grid) -> Self {
        Field(vec![0.0; grid.len()])
    }

    pub fn from_fn(grid: &Grid, f: impl FnMut(&[f64; 2]) -> f64) -> Self {
        Field(grid.points().iter().map(f).collect())
    }

    /// Evaluates `f` on interior points and sets the interaction shell to zero.
    pub fn constrained(grid: &Grid, mut f: impl FnMut(&[f64; 2]) -> f64) -> Self {
        Field(
            (0..grid.len())
                .map(|i| if grid.is_interior(i) { f(grid.point(i)) } else { 0.0 })
                .collect(),
        )
    }

    /// Scatters interior (dof-ordered) values into a constrained field.
    pub fn from_interior(grid: &Grid, dofs: &[f64]) -> Self {
        let mut v = vec![0.0; grid.len()];
        for (d, &i) in grid.interior().iter().enumerate() {
            v[i] = dofs[d];
        }
        Field(v)
    }

    pub fn interior_values(&self, grid: &Grid) -> Vec<f64> {
        grid.interior().iter().map(|&i| self.0[i]).collect()
    }

    /// Discrete counterpart of `E_c(u; 0) = 0`: bit-zero on every shell point.
    pub fn is_constrained(&self, grid: &Grid) -> bool {
        self.0.iter().enumerate().all(|(i, &v)| grid.is_interior(i) || v == 0.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Values on the ordered pairs of a [`PairSet`], in CSR entry order.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoPointField(pub Vec<f64>);

impl TwoPointField {
    pub fn values(&self) -> &[f64] {
        &self.0
    }
}

/// Sparse symmetric interaction pattern with cached kernel values.
#[derive(Debug, Clone)]
pub struct PairSet {
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
    gamma_eps: Vec<f64>,
    gamma_mu: Vec<f64>,
    alpha: Vec<f64>,
    transpose: Vec<usize>,
}

impl PairSet {
    pub fn build(grid: &Grid, kernel: &KernelParams) -> Self {
        let eps = kernel.epsilon();
        let reach = grid.layers().max((eps / grid.spacing()).ceil() as usize);
        let rows: Vec<Vec<usize>> = exec::map_range(grid.len(), |i| {
            let x = grid.point(i);
            let mut row = Vec::new();
            grid.for_each_lattice_neighbor(i, reach, |j| {
                if in_support(dist_sq(x, grid.point(j)), eps) {
                    row.push(j);
                }
            });
            row
        });
        let mut offsets = Vec::with_capacity(grid.len() + 1);
        offsets.push(0);
        let mut neighbors = Vec::new();
        for row in &rows {
            neighbors.extend_from_slice(row);
            offsets.push(neighbors.len());
        }
        let entry_x: Vec<usize> = (0..grid.len())
            .flat_map(|i| std::iter::repeat_n(i, offsets[i + 1] - offsets[i]))
            .collect();
        let gamma_eps = exec::map_range(neighbors.len(), |e| {
            kernel.gamma(Radius::Epsilon, grid.point(entry_x[e]), grid.point(neighbors[e]))
        });
        let gamma_mu = exec::map_range(neighbors.len(), |e| {
            kernel.gamma(Radius::Mu, grid.point(entry_x[e]), grid.point(neighbors[e]))
        });
        let alpha = exec::map_range(neighbors.len(), |e| {
            kernel.alpha(grid.point(entry_x[e]), grid.point(neighbors[e]))
        });
        let transpose = exec::map_range(neighbors.len(), |e| {
            let (x, y) = (entry_x[e], neighbors[e]);
            let row = &neighbors[offsets[y]..offsets[y + 1]];
            offsets[y] + row.binary_search(&x).expect("pair set is symmetric")
        });
        Self { offsets, neighbors, gamma_eps, gamma_mu, alpha, transpose }
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Entry range of row `x`.
    pub fn row(&self, x: usize) -> std::ops::Range<usize> {
        self.offsets[x]..self.offsets[x + 1]
    }

    pub fn neighbor(&self, e: usize) -> usize {
        self.neighbors[e]
    }

    pub fn neighbors(&self, x: usize) -> &[usize] {
        &self.neighbors[self.row(x)]
    }

    /// Index of the reversed pair `(y, x)` of entry `e = (x, y)`.
    pub fn transpose(&self, e: usize) -> usize {
        self.transpose[e]
    }

    pub fn gamma(&self, which: Radius, e: usize) -> f64 {
        match which {
            Radius::Epsilon => self.gamma_eps[e],
            Radius::Mu => self.gamma_mu[e],
        }
    }

    pub fn alpha(&self, e: usize) -> f64 {
        self.alpha[e]
    }
}

/// Matrix of `u ↦ β·𝒩ℒ(u)` on interior degrees of freedom, shell values
/// eliminated (they are zero for constrained fields).
#[derive(Debug, Clone)]
pub struct AssembledOperator {
    pub beta: f64,
    pub matrix: CsrMatrix,
}

impl AssembledOperator {
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        self.matrix.matvec(x, y)
    }

    pub fn to_coo_text(&self) -> String {
        self.matrix.to_coo_text()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EquivalenceConstants {
    pub c1: f64,
    pub c2: f64,
    pub iterations_min: usize,
    pub iterations_max: usize,
}

pub const EQUIVALENCE_TOL: f64 = 1e-8;
const POWER_ITERATION_BUDGET: usize = 10_000;

/// Grid, kernel, and their shared pair set.
#[derive(Debug, Clone)]
pub struct Calculus {
    grid: Grid,
    kernel: KernelParams,
    pairs: PairSet,
}

impl Calculus {
    pub fn new(grid: Grid, kernel: KernelParams) -> Result<Self, CalculusError> {
        let eps = kernel.epsilon();
        if grid.dim() != kernel.dim() || (grid.domain().epsilon() - eps).abs() > 1e-12 * eps {
            return Err(KernelError::Incompatible {
                grid_dim: grid.dim(),
                grid_eps: grid.domain().epsilon(),
                dim: kernel.dim(),
                eps,
            }
            .into());
        }
        if grid.interior_count() == 0 {
            return Err(CalculusError::EmptyInterior);
        }
        let pairs = PairSet::build(&grid, &kernel);
        Ok(Self { grid, kernel, pairs })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn pairs(&self) -> &PairSet {
        &self.pairs
    }

    pub fn zero_two_point(&self) -> TwoPointField {
        TwoPointField(vec![0.0; self.pairs.len()])
    }

    fn check_field(&self, u: &Field) -> Result<(), CalculusError> {
        if u.len() != self.grid.len() {
            return Err(CalculusError::LengthMismatch { what: "field", expected: self.grid.len(), got: u.len() });
        }
        Ok(())
    }

    fn check_pairs(&self, nu: &TwoPointField) -> Result<(), CalculusError> {
        if nu.0.len() != self.pairs.len() {
            return Err(CalculusError::LengthMismatch {
                what: "two-point field",
                expected: self.pairs.len(),
                got: nu.0.len(),
            });
        }
        Ok(())
    }

    fn symmetrized_flux(&self, nu: &TwoPointField, x: usize) -> f64 {
        let w = self.grid.weights();
        self.pairs
            .row(x)
            .map(|e| {
                let y = self.pairs.neighbor(e);
                w[y] * (nu.0[e] + nu.0[self.pairs.transpose(e)]) * self.pairs.alpha(e)
            })
            .sum()
    }

    /// `𝒟(ν)(x) = Σ_y w_y (ν(x,y) + ν(y,x)) α(x,y)` at every grid point.
    pub fn nl_divergence(&self, nu: &TwoPointField) -> Result<Field, CalculusError> {
        self.check_pairs(nu)?;
        Ok(Field(exec::map_range(self.grid.len(), |x| self.symmetrized_flux(nu, x))))
    }

    /// `𝒟*(u)(x,y) = -(u(y) - u(x)) α(x,y)` on every stored pair.
    pub fn nl_adjoint_gradient(&self, u: &Field) -> Result<TwoPointField, CalculusError> {
        self.check_field(u)?;
        let mut out = vec![0.0; self.pairs.len()];
        for x in 0..self.grid.len() {
            for e in self.pairs.row(x) {
                let y = self.pairs.neighbor(e);
                out[e] = -(u.0[y] - u.0[x]) * self.pairs.alpha(e);
            }
        }
        Ok(TwoPointField(out))
    }

    /// Direct form `𝒩ℒ(u)(x) = Σ_y w_y (u(y) - u(x)) Γ(x,y)` on interior
    /// points; the shell entries of the result are zero.
    pub fn nl_diffusion(&self, u: &Field, radius: Radius) -> Result<Field, CalculusError> {
        self.check_field(u)?;
        let w = self.grid.weights();
        Ok(Field(exec::map_range(self.grid.len(), |x| {
            if !self.grid.is_interior(x) {
                return 0.0;
            }
            self.pairs
                .row(x)
                .map(|e| {
                    let y = self.pairs.neighbor(e);
                    w[y] * (u.0[y] - u.0[x]) * self.pairs.gamma(radius, e)
                })
                .sum()
        })))
    }

    /// `-½𝒟(𝒟*u)` restricted to interior points.
    pub fn nl_diffusion_composed(&self, u: &Field) -> Result<Field, CalculusError> {
        let grad = self.nl_adjoint_gradient(u)?;
        let mut div = self.nl_divergence(&grad)?;
        for (i, v) in div.0.iter_mut().enumerate() {
            *v = if self.grid.is_interior(i) { -0.5 * *v } else { 0.0 };
        }
        Ok(div)
    }

    /// Interaction operator `𝒱(ν)(x) = -Σ_y w_y (ν(x,y) + ν(y,x)) α(x,y)` on
    /// the shell; interior entries of the result are zero.
    pub fn nl_interaction(&self, nu: &TwoPointField) -> Result<Field, CalculusError> {
        self.check_pairs(nu)?;
        Ok(Field(exec::map_range(self.grid.len(), |x| {
            if self.grid.is_interior(x) {
                0.0
            } else {
                -self.symmetrized_flux(nu, x)
            }
        })))
    }

    /// `½ Σ_x Σ_y w_x w_y a(x,y) b(x,y)` for two-point fields.
    pub fn pair_inner(&self, a: &TwoPointField, b: &TwoPointField) -> f64 {
        let w = self.grid.weights();
        let rows = exec::map_range(self.grid.len(), |x| {
            self.pairs
                .row(x)
                .map(|e| w[x] * w[self.pairs.neighbor(e)] * a.0[e] * b.0[e])
                .sum::<f64>()
        });
        0.5 * rows.iter().sum::<f64>()
    }

    /// `|||u||| = (½ ΣΣ w_x w_y 𝒟*(u)²)^{1/2}` over `Ω ∪ Ω_I`.
    pub fn energy_norm(&self, u: &Field) -> Result<f64, CalculusError> {
        let g = self.nl_adjoint_gradient(u)?;
        Ok(self.pair_inner(&g, &g).sqrt())
    }

    /// `a(u,v) = β·½ΣΣ w w 𝒟*(u)𝒟*(v) + δ Σ_{x∈Ω} w_x u(x) v(x)`.
    pub fn bilinear_a(&self, u: &Field, v: &Field, delta: f64, beta: f64) -> Result<f64, CalculusError> {
        let gu = self.nl_adjoint_gradient(u)?;
        let gv = self.nl_adjoint_gradient(v)?;
        let mass = self.l2_inner_interior(u, v);
        Ok(beta * self.pair_inner(&gu, &gv) + delta * mass)
    }

    pub fn l2_inner_interior(&self, u: &Field, v: &Field) -> f64 {
        let w = self.grid.weights();
        self.grid.interior().iter().map(|&i| w[i] * u.0[i] * v.0[i]).sum()
    }

    /// `‖u‖_{L²(Ω ∪ Ω_I)}`.
    pub fn l2_norm(&self, u: &Field) -> f64 {
        let w = self.grid.weights();
        u.0.iter().zip(w).map(|(v, wi)| wi * v * v).sum::<f64>().sqrt()
    }

    /// `Γ̂(x) = Σ_{y≠x} w_y Γ_ε(x,y)`.
    pub fn kernel_mass(&self, x: usize) -> f64 {
        let w = self.grid.weights();
        self.pairs
            .row(x)
            .map(|e| w[self.pairs.neighbor(e)] * self.pairs.gamma(Radius::Epsilon, e))
            .sum()
    }

    pub fn assemble(&self, beta: f64) -> AssembledOperator {
        let g = &self.grid;
        let w = g.weights();
        let rows = exec::map_slice(g.interior(), |&x| {
            let mut row = Vec::new();
            let mut diag = 0.0;
            for e in self.pairs.row(x) {
                let y = self.pairs.neighbor(e);
                let k = w[y] * self.pairs.gamma(Radius::Epsilon, e);
                diag += k;
                if let Some(dof) = g.dof(y) {
                    row.push((dof, beta * k));
                }
            }
            row.push((g.dof(x).expect("interior"), -beta * diag));
            row
        });
        AssembledOperator { beta, matrix: CsrMatrix::from_rows(rows) }
    }

    /// Extreme values of `|||u||| / ‖u‖` over constrained fields, from the
    /// extreme eigenvalues of `-𝒩ℒ` on interior dofs. The top of that spectrum
    /// is tightly clustered, so the largest eigenvalue comes from Lanczos; the
    /// smallest is well separated and inverse iteration with CG solves suffices.
    pub fn estimate_equivalence_constants(&self) -> Result<EquivalenceConstants, CalculusError> {
        let neg = self.assemble(-1.0);
        let n = neg.matrix.dim();
        let apply = |v: &[f64], out: &mut [f64]| neg.apply(v, out);
        let start: Vec<f64> = (0..n).map(|i| 1.0 + 0.1 * (1.7 * i as f64).sin()).collect();

        let (lambda_max, it_max) = lanczos_largest(&start, apply)?;
        let (inv, it_min) = power_iteration(
            &start,
            |v, out| {
                out.iter_mut().for_each(|o| *o = 0.0);
                let _ = conjugate_gradient(apply, v, out, 1e-14, 20 * n + 100);
            },
            "smallest",
        )?;
        let lambda_min = 1.0 / inv;
        Ok(EquivalenceConstants {
            c1: lambda_min.sqrt(),
            c2: lambda_max.sqrt(),
            iterations_min: it_min,
            iterations_max: it_max,
        })
    }
}

// Largest eigenvalue via Lanczos with full reorthogonalization. Converged when
// the Ritz residual bound `β_k |s_k|` falls below EQUIVALENCE_TOL·θ, or the
// Krylov space is exhausted.
fn lanczos_largest(start: &[f64], apply: impl Fn(&[f64], &mut [f64])) -> Result<(f64, usize), CalculusError> {
    let n = start.len();
    let s = norm2(start);
    let mut basis: Vec<Vec<f64>> = vec![start.iter().map(|x| x / s).collect()];
    let mut alphas = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut w = vec![0.0; n];
    let budget = POWER_ITERATION_BUDGET.min(n);
    for k in 1..=budget {
        apply(&basis[k - 1], &mut w);
        let a = dot(&basis[k - 1], &w);
        alphas.push(a);
        for _ in 0..2 {
            for q in &basis {
                let c = dot(q, &w);
                w.iter_mut().zip(q).for_each(|(wi, qi)| *wi -= c * qi);
            }
        }
        let b = norm2(&w);
        let t = nalgebra::DMatrix::from_fn(k, k, |i, j| {
            if i == j {
                alphas[i]
            } else if i + 1 == j {
                betas[i]
            } else if j + 1 == i {
                betas[j]
            } else {
                0.0
            }
        });
        let eig = nalgebra::SymmetricEigen::new(t);
        let (top, theta) = eig
            .eigenvalues
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, v)| if v > acc.1 { (i, v) } else { acc });
        let bound = b * eig.eigenvectors[(k - 1, top)].abs();
        if bound <= EQUIVALENCE_TOL * theta.abs() || k == n || b <= f64::EPSILON * theta.abs() {
            return Ok((theta, k));
        }
        betas.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
    Err(CalculusError::Stagnation { which: "largest", iterations: budget })
}

// Dominant eigenvalue of a symmetric positive operator via Rayleigh quotients;
// converged when consecutive quotients agree to EQUIVALENCE_TOL.
fn power_iteration(
    start: &[f64],
    apply: impl Fn(&[f64], &mut [f64]),
    which: &'static str,
) -> Result<(f64, usize), CalculusError> {
    let mut v = start.to_vec();
    let s = norm2(&v);
    v.iter_mut().for_each(|x| *x /= s);
    let mut w = vec![0.0; v.len()];
    apply(&v, &mut w);
    let mut lambda = dot(&v, &w);
    for it in 1..=POWER_ITERATION_BUDGET {
        let s = norm2(&w);
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / s;
        }
        apply(&v, &mut w);
        let next = dot(&v, &w);
        if (next - lambda).abs() <= EQUIVALENCE_TOL * next.abs() {
            return Ok((next, it));
        }
        lambda = next;
    }
    Err(CalculusError::Stagnation { which, iterations: POWER_ITERATION_BUDGET })
}
