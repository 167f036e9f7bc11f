//! Box domains, their interaction shells, and midpoint quadrature grids.
//!
//! A [`Grid`] covers the closure `Ω ∪ Ω_I` with a full rectangular lattice of
//! cell midpoints: the interior cells of the box plus `⌈ε/h⌉` cell layers on
//! every face. Points are stored in lexicographic lattice order (first axis
//! outermost), so the lattice index of a point is recoverable from its flat
//! index alone.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coordinates in up to two dimensions. Unused trailing axes are held at zero,
/// which leaves distances and norms unaffected.
pub type Point = [f64; 2];

/// Default upper limit on the number of grid points.
pub const DEFAULT_POINT_BUDGET: usize = 1_000_000;

// Absorbs float noise when ε/h or (b-a)/h is an integer up to rounding.
const LATTICE_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension must be 1 or 2, got {0}")]
    Dimension(usize),
    #[error("axis {axis}: bounds must satisfy lower < upper, got [{lower}, {upper}]")]
    EmptyAxis { axis: usize, lower: f64, upper: f64 },
    #[error("interaction radius must be positive and finite, got {0}")]
    Epsilon(f64),
    #[error("grid spacing must be positive and finite, got {0}")]
    Spacing(f64),
    #[error("spacing {spacing} exceeds the extent {extent} of axis {axis}")]
    SpacingTooLarge { axis: usize, spacing: f64, extent: f64 },
    #[error("spacing {spacing} does not divide the extent {extent} of axis {axis}")]
    NotDivisible { axis: usize, spacing: f64, extent: f64 },
    #[error("grid would need {requested} points, budget is {budget}")]
    PointBudget { requested: usize, budget: usize },
}

/// An open axis-aligned box `Ω` together with its interaction radius `ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    dim: usize,
    lower: Point,
    upper: Point,
    epsilon: f64,
}

/// Where a point sits relative to `Ω` and its ε-shell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PointClass {
    Interior,
    Interaction,
    Outside,
}

/// Grid point tag. Serialized as `I` (interior) and `B` (interaction shell).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "I")]
    Interior,
    #[serde(rename = "B")]
    Interaction,
}

impl Region {
    pub fn tag(self) -> &'static str {
        match self {
            Region::Interior => "I",
            Region::Interaction => "B",
        }
    }
}

impl Domain {
    pub fn new(dim: usize, lower: &[f64], upper: &[f64], epsilon: f64) -> Result<Self, GeometryError> {
        if !(1..=2).contains(&dim) || lower.len() != dim || upper.len() != dim {
            return Err(GeometryError::Dimension(dim));
        }
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(GeometryError::Epsilon(epsilon));
        }
        let mut lo = [0.0; 2];
        let mut hi = [0.0; 2];
        for axis in 0..dim {
            let (a, b) = (lower[axis], upper[axis]);
            if !(a.is_finite() && b.is_finite() && b > a) {
                return Err(GeometryError::EmptyAxis { axis, lower: a, upper: b });
            }
            lo[axis] = a;
            hi[axis] = b;
        }
        Ok(Self { dim, lower: lo, upper: hi, epsilon })
    }

    pub fn interval(a: f64, b: f64, epsilon: f64) -> Result<Self, GeometryError> {
        Self::new(1, &[a], &[b], epsilon)
    }

    pub fn rectangle(lower: [f64; 2], upper: [f64; 2], epsilon: f64) -> Result<Self, GeometryError> {
        Self::new(2, &lower, &upper, epsilon)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower[..self.dim]
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper[..self.dim]
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self, GeometryError> {
        Self::new(self.dim, self.lower(), self.upper(), epsilon)
    }

    /// Lebesgue measure of `Ω`.
    pub fn volume(&self) -> f64 {
        (0..self.dim).map(|i| self.upper[i] - self.lower[i]).product()
    }

    /// Exact measure of the open ε-shell around the box.
    pub fn shell_volume(&self) -> f64 {
        let e = self.epsilon;
        match self.dim {
            1 => 2.0 * e,
            _ => {
                let w = self.upper[0] - self.lower[0];
                let h = self.upper[1] - self.lower[1];
                2.0 * (w + h) * e + std::f64::consts::PI * e * e
            }
        }
    }

    /// Euclidean distance from `x` to the closed box.
    pub fn distance_to_box(&self, x: &Point) -> f64 {
        (0..self.dim)
            .map(|i| {
                let d = (self.lower[i] - x[i]).max(x[i] - self.upper[i]).max(0.0);
                d * d
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn classify_point(&self, x: &Point) -> PointClass {
        let inside = (0..self.dim).all(|i| self.lower[i] < x[i] && x[i] < self.upper[i]);
        if inside {
            PointClass::Interior
        } else if self.distance_to_box(x) < self.epsilon {
            PointClass::Interaction
        } else {
            PointClass::Outside
        }
    }
}

/// Midpoint quadrature grid over `Ω ∪ Ω_I`. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    domain: Domain,
    spacing: f64,
    layers: usize,
    cells: [usize; 2],
    extent: [usize; 2],
    points: Vec<Point>,
    weights: Vec<f64>,
    regions: Vec<Region>,
    interior: Vec<usize>,
    dof_of: Vec<Option<usize>>,
}

pub fn build_grid(domain: &Domain, spacing: f64) -> Result<Grid, GeometryError> {
    build_grid_with_budget(domain, spacing, DEFAULT_POINT_BUDGET)
}

pub fn build_grid_with_budget(domain: &Domain, spacing: f64, budget: usize) -> Result<Grid, GeometryError> {
    let h = spacing;
    if !(h.is_finite() && h > 0.0) {
        return Err(GeometryError::Spacing(h));
    }
    let dim = domain.dim;
    let mut cells = [1usize; 2];
    for (axis, cell) in cells.iter_mut().enumerate().take(dim) {
        let extent = domain.upper[axis] - domain.lower[axis];
        if h > extent * (1.0 + LATTICE_SLACK) {
            return Err(GeometryError::SpacingTooLarge { axis, spacing: h, extent });
        }
        let n = (extent / h).round();
        if (n * h - extent).abs() > LATTICE_SLACK * extent {
            return Err(GeometryError::NotDivisible { axis, spacing: h, extent });
        }
        *cell = n as usize;
    }
    let layers = ((domain.epsilon / h - LATTICE_SLACK).ceil() as usize).max(1);
    let mut extent = [1usize; 2];
    let mut requested = 1usize;
    for axis in 0..dim {
        extent[axis] = cells[axis] + 2 * layers;
        requested = requested.saturating_mul(extent[axis]);
    }
    if requested > budget {
        return Err(GeometryError::PointBudget { requested, budget });
    }

    let weight = h.powi(dim as i32);
    let mut points = Vec::with_capacity(requested);
    let mut regions = Vec::with_capacity(requested);
    let mut interior = Vec::new();
    let mut dof_of = Vec::with_capacity(requested);
    let coord = |axis: usize, j: usize| domain.lower[axis] + (j as f64 - layers as f64 + 0.5) * h;
    let in_core = |axis: usize, j: usize| j >= layers && j < layers + cells[axis];
    for i0 in 0..extent[0] {
        for i1 in 0..extent[1] {
            let mut p = [coord(0, i0), 0.0];
            let mut is_interior = in_core(0, i0);
            if dim == 2 {
                p[1] = coord(1, i1);
                is_interior &= in_core(1, i1);
            }
            let idx = points.len();
            points.push(p);
            if is_interior {
                dof_of.push(Some(interior.len()));
                interior.push(idx);
                regions.push(Region::Interior);
            } else {
                dof_of.push(None);
                regions.push(Region::Interaction);
            }
        }
    }
    let weights = vec![weight; points.len()];
    Ok(Grid {
        domain: domain.clone(),
        spacing: h,
        layers,
        cells,
        extent,
        points,
        weights,
        regions,
        interior,
        dof_of,
    })
}

impl Grid {
    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    /// Number of cell layers in the interaction shell on each face.
    pub fn layers(&self) -> usize {
        self.layers
    }

    /// Interior cell counts per axis (1 on unused axes).
    pub fn cells(&self) -> [usize; 2] {
        self.cells
    }

    /// Total lattice extent per axis, shell included (1 on unused axes).
    pub fn extent(&self) -> [usize; 2] {
        self.extent
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn point(&self, idx: usize) -> &Point {
        &self.points[idx]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Common cell volume `h^n`.
    pub fn cell_volume(&self) -> f64 {
        self.weights.first().copied().unwrap_or(0.0)
    }

    pub fn regions(&self) -> &[Region] {
        &self.regions
    }

    pub fn region(&self, idx: usize) -> Region {
        self.regions[idx]
    }

    pub fn is_interior(&self, idx: usize) -> bool {
        self.regions[idx] == Region::Interior
    }

    /// Flat indices of interior points, ascending.
    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    pub fn interior_count(&self) -> usize {
        self.interior.len()
    }

    /// Position of `idx` among the interior points, if interior.
    pub fn dof(&self, idx: usize) -> Option<usize> {
        self.dof_of[idx]
    }

    pub fn interior_volume(&self) -> f64 {
        self.interior.iter().map(|&i| self.weights[i]).sum()
    }

    pub fn interaction_volume(&self) -> f64 {
        self.weights
            .iter()
            .zip(&self.regions)
            .filter(|(_, r)| **r == Region::Interaction)
            .map(|(w, _)| w)
            .sum()
    }

    /// Quadrature volume of the shell points that lie in the exact ε-shell.
    pub fn exact_shell_quadrature_volume(&self) -> f64 {
        self.points
            .iter()
            .zip(&self.weights)
            .filter(|(p, _)| self.domain.classify_point(p) == PointClass::Interaction)
            .map(|(_, w)| w)
            .sum()
    }

    pub fn classify_point(&self, x: &Point) -> PointClass {
        self.domain.classify_point(x)
    }

    pub fn lattice_index(&self, idx: usize) -> [usize; 2] {
        [idx / self.extent[1], idx % self.extent[1]]
    }

    pub fn flat_index(&self, lattice: [usize; 2]) -> usize {
        lattice[0] * self.extent[1] + lattice[1]
    }

    /// Calls `f(j)` for every grid point `j != idx` whose lattice offset from
    /// `idx` is at most `reach` cells along every axis, in ascending order of `j`.
    pub fn for_each_lattice_neighbor<F: FnMut(usize)>(&self, idx: usize, reach: usize, mut f: F) {
        let [i0, i1] = self.lattice_index(idx);
        let lo0 = i0.saturating_sub(reach);
        let hi0 = (i0 + reach).min(self.extent[0] - 1);
        let (lo1, hi1) = if self.dim() == 2 {
            (i1.saturating_sub(reach), (i1 + reach).min(self.extent[1] - 1))
        } else {
            (0, 0)
        };
        for j0 in lo0..=hi0 {
            for j1 in lo1..=hi1 {
                let j = self.flat_index([j0, j1]);
                if j != idx {
                    f(j);
                }
            }
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["idx", "x1"];
        if self.dim() == 2 {
            header.push("x2");
        }
        header.extend(["weight", "region"]);
        w.write_record(&header)?;
        for (i, p) in self.points.iter().enumerate() {
            let mut rec = vec![i.to_string(), p[0].to_string()];
            if self.dim() == 2 {
                rec.push(p[1].to_string());
            }
            rec.push(self.weights[i].to_string());
            rec.push(self.regions[i].tag().to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One parsed row of a grid CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub idx: usize,
    pub point: Point,
    pub weight: f64,
    pub region: Region,
}

#[derive(Debug, Error)]
pub enum GridCsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
}

/// Reads a grid CSV (optionally with extra columns, which are returned by name).
pub fn read_grid_csv<R: Read>(
    reader: R,
    extra: &[&str],
) -> Result<(Vec<GridRow>, Vec<Vec<f64>>), GridCsvError> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| col(name).ok_or_else(|| GridCsvError::MissingColumn(name.to_string()));
    let idx_col = need("idx")?;
    let x1_col = need("x1")?;
    let x2_col = col("x2");
    let w_col = need("weight")?;
    let r_col = need("region")?;
    let extra_cols = extra.iter().map(|n| need(n)).collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    let mut extras = vec![Vec::new(); extra.len()];
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| GridCsvError::Row { row, message };
        let num = |c: usize| -> Result<f64, GridCsvError> {
            rec.get(c)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .map_err(|e| bad(format!("column {c}: {e}")))
        };
        let idx = rec
            .get(idx_col)
            .unwrap_or("")
            .trim()
            .parse::<usize>()
            .map_err(|e| bad(format!("idx: {e}")))?;
        let mut point = [num(x1_col)?, 0.0];
        if let Some(c) = x2_col {
            point[1] = num(c)?;
        }
        let region = match rec.get(r_col).map(str::trim) {
            Some("I") => Region::Interior,
            Some("B") => Region::Interaction,
            other => return Err(bad(format!("unknown region {other:?}"))),
        };
        rows.push(GridRow { idx, point, weight: num(w_col)?, region });
        for (k, &c) in extra_cols.iter().enumerate() {
            extras[k].push(num(c)?);
        }
    }
    Ok((rows, extras))
}
