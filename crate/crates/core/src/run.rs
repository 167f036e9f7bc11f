//! Mode dispatch, artifact files, and exit codes for the command-line front end.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::calculus::{Calculus, Field, TwoPointField};
use crate::config::{FieldSource, Mode, RunConfig};
use crate::control::{projected_gradient_descent, BoxBounds, ControlError, ControlTrajectory, ReducedProblem};
use crate::exec;
use crate::geometry::{build_grid_with_budget, read_grid_csv, Domain, Grid, Region};
use crate::kernel::{verify_kernel_properties, KernelError, KernelParams, Radius};
use crate::model::{objective, ProductivityData, Profile};
use crate::solver::{PicardReport, SolverError, StateProblem, StateTrajectory};

/// Relative residual bound for the discrete calculus identities.
pub const IDENTITY_TOL: f64 = 1e-12;
/// Relative slack when bracketing `|||u|||/‖u‖` by the equivalence constants.
pub const EQUIVALENCE_SLACK: f64 = 1e-8;
/// Accepted band for the Δt-refinement ratio of first-order quantities.
pub const RATIO_BAND: (f64, f64) = (1.7, 2.3);

#[derive(Debug, Error)]
pub enum RunError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-convergence: {0}")]
    NonConvergence(String),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 1,
            RunError::NonConvergence(_) => 2,
            RunError::Io { .. } => 4,
        }
    }
}

/// Summary lines of a completed run and whether every check passed.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub lines: Vec<String>,
    pub pass: bool,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            3
        }
    }
}

fn status(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn check_line(name: &str, witnessed: f64, bound: f64, pass: bool) -> String {
    format!("{name}: witnessed={witnessed:.6e} bound={bound:.6e} {}", status(pass))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Io { path: path.to_path_buf(), message: e.to_string() }
}

fn write_text(path: &Path, text: &str) -> Result<(), RunError> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    s.push('\n');
    write_text(path, &s)
}

fn write_with<F>(path: &Path, f: F) -> Result<(), RunError>
where
    F: FnOnce(BufWriter<fs::File>) -> csv::Result<()>,
{
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    f(BufWriter::new(file)).map_err(|e| io_err(path, e))
}

fn config_err(e: impl std::fmt::Display) -> RunError {
    RunError::Config(e.to_string())
}

struct Setup {
    calc: Calculus,
}

fn setup(cfg: &RunConfig) -> Result<Setup, RunError> {
    let domain = Domain::new(cfg.dim, &cfg.lower, &cfg.upper, cfg.epsilon).map_err(config_err)?;
    let grid = build_grid_with_budget(&domain, cfg.spacing, cfg.point_budget).map_err(config_err)?;
    let kernel = KernelParams::new(cfg.dim, cfg.sigma, cfg.epsilon, cfg.mu).map_err(config_err)?;
    let calc = Calculus::new(grid, kernel).map_err(config_err)?;
    Ok(Setup { calc })
}

/// Reads a grid CSV with a `value` column and checks it matches `grid`.
pub fn load_field(grid: &Grid, path: &Path) -> Result<Field, RunError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let (rows, extras) = read_grid_csv(file, &["value"]).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    if rows.len() != grid.len() {
        return Err(config_err(format!("{}: {} rows, grid has {} points", path.display(), rows.len(), grid.len())));
    }
    let mut values = vec![0.0; grid.len()];
    let scale = grid.spacing() * 1e-6;
    for (row, v) in rows.iter().zip(&extras[0]) {
        let ok = row.idx < grid.len() && {
            let p = grid.point(row.idx);
            (p[0] - row.point[0]).abs() <= scale
                && (grid.dim() == 1 || (p[1] - row.point[1]).abs() <= scale)
                && grid.region(row.idx) == row.region
        };
        if !ok {
            return Err(config_err(format!("{}: row idx {} does not match the grid", path.display(), row.idx)));
        }
        values[row.idx] = *v;
    }
    Ok(Field(values))
}

/// Writes a field as a grid CSV with a `value` column (the format read by [`load_field`]).
pub fn write_field_csv<W: std::io::Write>(grid: &Grid, field: &Field, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["idx", "x1"];
    if grid.dim() == 2 {
        header.push("x2");
    }
    header.extend(["weight", "region", "value"]);
    w.write_record(&header)?;
    for i in 0..grid.len() {
        let p = grid.point(i);
        let mut rec = vec![i.to_string(), p[0].to_string()];
        if grid.dim() == 2 {
            rec.push(p[1].to_string());
        }
        rec.push(grid.weights()[i].to_string());
        rec.push(grid.region(i).tag().to_string());
        rec.push(field.0[i].to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn make_field(cfg: &RunConfig, grid: &Grid, src: &FieldSource) -> Result<Field, RunError> {
    match src {
        FieldSource::Constant(v) => Ok(Profile::Constant(*v).field(grid)),
        FieldSource::Gaussian { amplitude, center, width } => {
            Ok(Profile::Gaussian { amplitude: *amplitude, center: *center, width: *width }.field(grid))
        }
        FieldSource::File(p) => load_field(grid, &cfg.resolve(p)),
    }
}

/// Reads a control CSV (`m,t,idx,x1[,x2],c`) for `steps` steps on `grid`.
pub fn load_control(grid: &Grid, steps: usize, path: &Path) -> Result<Vec<f64>, RunError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let bad = |msg: String| config_err(format!("{}: {msg}", path.display()));
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let col = |n: &str| headers.iter().position(|h| h.trim() == n).ok_or_else(|| bad(format!("missing column `{n}`")));
    let (mc, ic, cc) = (col("m")?, col("idx")?, col("c")?);
    let n = grid.interior_count();
    let mut values = vec![f64::NAN; steps * n];
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |c: usize| rec.get(c).unwrap_or("").trim().to_string();
        let m: usize = field(mc).parse().map_err(|_| bad(format!("bad m `{}`", field(mc))))?;
        let idx: usize = field(ic).parse().map_err(|_| bad(format!("bad idx `{}`", field(ic))))?;
        let c: f64 = field(cc).parse().map_err(|_| bad(format!("bad c `{}`", field(cc))))?;
        let dof = (idx < grid.len()).then(|| grid.dof(idx)).flatten();
        match dof {
            Some(d) if m < steps => values[m * n + d] = c,
            _ => return Err(bad(format!("row (m={m}, idx={idx}) outside the interior time grid"))),
        }
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(bad(format!("control must list every interior point for {steps} steps")));
    }
    Ok(values)
}

fn solve_control(cfg: &RunConfig, grid: &Grid, steps: usize) -> Result<ControlTrajectory, RunError> {
    let n = grid.interior_count();
    let values = match &cfg.control {
        FieldSource::Constant(v) => vec![*v; steps * n],
        FieldSource::File(p) => {
            let path = cfg.resolve(p);
            if steps == cfg.steps {
                load_control(grid, steps, &path)?
            } else {
                // piecewise-constant refinement of the configured control
                let base = load_control(grid, cfg.steps, &path)?;
                let factor = steps / cfg.steps;
                (0..steps).flat_map(|m| base[(m / factor) * n..(m / factor + 1) * n].to_vec()).collect()
            }
        }
        FieldSource::Gaussian { .. } => return Err(config_err("control: gaussian profiles are not supported")),
    };
    ControlTrajectory::new(steps, n, values, BoxBounds::unbounded()).map_err(config_err)
}

fn problem(cfg: &RunConfig, calc: &Calculus, steps: usize) -> Result<(StateProblem, Field), RunError> {
    let grid = calc.grid();
    let a0 = make_field(cfg, grid, &cfg.a0)?;
    let kt = make_field(cfg, grid, &cfg.k_target)?;
    let k0 = make_field(cfg, grid, &cfg.k0)?;
    let data = ProductivityData::new(grid, a0, kt).map_err(config_err)?;
    let p = StateProblem::new(calc.clone(), cfg.model, data, steps, cfg.solver).map_err(config_err)?;
    Ok((p, k0))
}

fn solve_err(out: &Path, e: SolverError) -> RunError {
    match e {
        SolverError::NonConvergence { ref report, .. } => {
            let _ = write_json(&out.join("picard_report.json"), report.as_ref());
            RunError::NonConvergence(e.to_string())
        }
        SolverError::LinearSolve { .. } => RunError::NonConvergence(e.to_string()),
        other => config_err(other),
    }
}

/// Executes the configured mode, writing artifacts under `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunOutcome, RunError> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    match cfg.mode {
        Mode::VerifyKernel => verify_kernel(cfg, out),
        Mode::VerifyCalculus => verify_calculus(cfg, out),
        Mode::Solve => solve(cfg, out),
        Mode::OracleCheck => oracle_check(cfg, out),
        Mode::Optimize => optimize(cfg, out),
        Mode::Sweep => sweep(cfg, out),
    }
}

fn verify_kernel(cfg: &RunConfig, out: &Path) -> Result<RunOutcome, RunError> {
    let s = setup(cfg)?;
    let report = match verify_kernel_properties(s.calc.kernel(), s.calc.grid()) {
        Ok(r) => r,
        Err(KernelError::PropertyViolation { report, .. }) => *report,
        Err(e) => return Err(config_err(e)),
    };
    write_json(&out.join("kernel_report.json"), &report)?;
    let lines = report
        .entries
        .iter()
        .map(|e| check_line(&format!("property {} ({})", e.property, e.name), e.witnessed_constant, e.bound, e.pass))
        .collect();
    Ok(RunOutcome { lines, pass: report.all_pass })
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub samples: usize,
    pub max_residual: f64,
    pub bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalculusReport {
    pub points: usize,
    pub pairs: usize,
    pub identities: Vec<IdentityCheck>,
    pub c1: f64,
    pub c2: f64,
    pub equivalence_samples: usize,
    pub equivalence_violations: usize,
    pub equivalence_pass: bool,
}

/// Neumaier-compensated sum, used so the identity checks measure operator
/// rounding rather than reduction rounding.
fn accurate_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for v in values {
        let t = s + v;
        c += if s.abs() >= v.abs() { (s - t) + v } else { (v - t) + s };
        s = t;
    }
    s + c
}

/// `|a - b|` relative to the larger of `|a|`, `|b|` and the absolute-term
/// magnitude `terms` of the underlying sums.
fn rel(a: f64, b: f64, terms: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(terms);
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Runs the four calculus identities and the norm-equivalence bracket on
/// `samples` seeded random inputs each.
pub fn calculus_checks(calc: &Calculus, beta: f64, delta: f64, samples: usize, seed: u64) -> Result<CalculusReport, RunError> {
    let grid = calc.grid();
    let w = grid.weights();
    let npairs = calc.pairs().len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field = |rng: &mut ChaCha8Rng, constrained: bool| {
        Field(
            (0..grid.len())
                .map(|i| if constrained && !grid.is_interior(i) { 0.0 } else { rng.random_range(-1.0..1.0) })
                .collect(),
        )
    };
    let two_point = |rng: &mut ChaCha8Rng| TwoPointField((0..npairs).map(|_| rng.random_range(-1.0..1.0)).collect());
    let e = |x| config_err(x);
    let (mut adj, mut comp, mut gauss, mut bil) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..samples {
        let u = field(&mut rng, false);
        let nu = two_point(&mut rng);
        let div = calc.nl_divergence(&nu).map_err(e)?;
        let lhs = accurate_sum((0..grid.len()).map(|x| w[x] * div.0[x] * u.0[x]));
        let grad = calc.nl_adjoint_gradient(&u).map_err(e)?;
        let pairs = calc.pairs();
        let rhs = accurate_sum(
            (0..grid.len()).flat_map(|x| pairs.row(x).map(move |e| (x, e))).map(|(x, e)| w[x] * w[pairs.neighbor(e)] * nu.0[e] * grad.0[e]),
        );
        let terms = accurate_sum(
            (0..grid.len()).flat_map(|x| pairs.row(x).map(move |e| (x, e))).map(|(x, e)| (w[x] * w[pairs.neighbor(e)] * nu.0[e] * grad.0[e]).abs()),
        );
        adj = adj.max(rel(lhs, rhs, terms));

        let direct = calc.nl_diffusion(&u, Radius::Epsilon).map_err(e)?;
        let composed = calc.nl_diffusion_composed(&u).map_err(e)?;
        let scale = direct.0.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = direct.0.iter().zip(&composed.0).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        comp = comp.max(if scale == 0.0 { diff } else { diff / scale });

        let flux = calc.nl_interaction(&nu).map_err(e)?;
        let inside = accurate_sum(grid.interior().iter().map(|&i| w[i] * div.0[i]));
        let shell = accurate_sum((0..grid.len()).filter(|&i| grid.region(i) == Region::Interaction).map(|i| w[i] * flux.0[i]));
        let terms = accurate_sum(grid.interior().iter().flat_map(|&x| pairs.row(x).map(move |e| (x, e))).map(|(x, e)| {
            (w[x] * w[pairs.neighbor(e)] * (nu.0[e] + nu.0[pairs.transpose(e)]) * pairs.alpha(e)).abs()
        }));
        gauss = gauss.max(rel(inside, shell, terms));

        let uc = field(&mut rng, true);
        let a = calc.bilinear_a(&uc, &uc, delta, beta).map_err(e)?;
        let energy = calc.energy_norm(&uc).map_err(e)?;
        let l2: f64 = grid.interior().iter().map(|&i| w[i] * uc.0[i] * uc.0[i]).sum();
        bil = bil.max(rel(a, beta * energy * energy + delta * l2, 0.0));
    }
    let identities = [
        ("adjointness", adj),
        ("composition", comp),
        ("gauss", gauss),
        ("bilinear_energy", bil),
    ]
    .into_iter()
    .map(|(name, r)| IdentityCheck { name, samples, max_residual: r, bound: IDENTITY_TOL, pass: r <= IDENTITY_TOL })
    .collect();

    let k = calc.estimate_equivalence_constants().map_err(e)?;
    let mut violations = 0;
    for _ in 0..samples {
        let u = field(&mut rng, true);
        let ratio = calc.energy_norm(&u).map_err(e)? / calc.l2_norm(&u);
        if ratio < k.c1 * (1.0 - EQUIVALENCE_SLACK) || ratio > k.c2 * (1.0 + EQUIVALENCE_SLACK) {
            violations += 1;
        }
    }
    Ok(CalculusReport {
        points: grid.len(),
        pairs: npairs,
        identities,
        c1: k.c1,
        c2: k.c2,
        equivalence_samples: samples,
        equivalence_violations: violations,
        equivalence_pass: violations == 0 && k.c1 > 0.0,
    })
}

fn verify_calculus(cfg: &RunConfig, out: &Path) -> Result<RunOutcome, RunError> {
    let s = setup(cfg)?;
    let report = calculus_checks(&s.calc, cfg.model.beta, cfg.model.delta, cfg.samples, cfg.seed)?;
    write_json(&out.join("calculus_report.json"), &report)?;
    write_text(&out.join("operator.coo"), &s.calc.assemble(cfg.model.beta).to_coo_text())?;
    let mut lines: Vec<String> = report
        .identities
        .iter()
        .map(|c| check_line(c.name, c.max_residual, c.bound, c.pass))
        .collect();
    lines.push(format!(
        "norm_equivalence: C1={:.6e} C2={:.6e} violations={}/{} {}",
        report.c1,
        report.c2,
        report.equivalence_violations,
        report.equivalence_samples,
        status(report.equivalence_pass)
    ));
    let pass = report.identities.iter().all(|c| c.pass) && report.equivalence_pass;
    Ok(RunOutcome { lines, pass })
}

fn picard_line(r: &PicardReport) -> String {
    let q = r.max_q().map_or("none".to_string(), |q| format!("{q:.6e}"));
    let pass = r.max_q().is_none_or(|q| q < 1.0);
    format!(
        "picard: windows={} iterations={} halvings={} max_q={q} {}",
        r.windows.len(),
        r.total_iterations,
        r.rejected.len(),
        status(pass)
    )
}

fn write_state(out: &Path, grid: &Grid, k: &StateTrajectory) -> Result<(), RunError> {
    write_with(&out.join("grid.csv"), |w| grid.write_csv(w))?;
    write_with(&out.join("trajectory.csv"), |w| k.write_csv(grid, w))
}

fn solve(cfg: &RunConfig, out: &Path) -> Result<RunOutcome, RunError> {
    let s = setup(cfg)?;
    let (p, k0) = problem(cfg, &s.calc, cfg.steps)?;
    let c = solve_control(cfg, p.grid(), cfg.steps)?;
    let (k, report) = p.picard_solve(&k0, &c).map_err(|e| solve_err(out, e))?;
    write_state(out, p.grid(), &k)?;
    write_json(&out.join("picard_report.json"), &report)?;
    let mut lines = vec![picard_line(&report)];
    let mut pass = report.max_q().is_none_or(|q| q < 1.0);
    lines.push(format!(
        "nonnegativity: min_state={:.6e} threshold={:.6e} {}",
        report.min_state,
        cfg.solver.nonnegativity_threshold,
        if report.nonnegative { "OK" } else { "WARN" }
    ));
    let constants = p.calculus().estimate_equivalence_constants().map_err(config_err)?;
    let apriori = p.apriori_check(&k, &c, &k0, &constants).map_err(config_err)?;
    write_json(&out.join("apriori.json"), &apriori)?;
    lines.push(check_line("apriori", apriori.lhs, apriori.rhs, apriori.pass));
    pass &= apriori.pass;
    if c.values().iter().all(|&v| v >= 0.0) {
        let j = objective(p.grid(), p.params(), p.data(), &k, &c).map_err(config_err)?;
        write_json(&out.join("objective.json"), &j)?;
        lines.push(format!("objective: total={:.12e} utility={:.12e} terminal={:.12e}", j.total, j.utility, j.terminal));
    }
    Ok(RunOutcome { lines, pass })
}

#[derive(Debug, Clone, Serialize)]
pub struct OraclePoint {
    pub idx: usize,
    pub deviation_coarse: f64,
    pub deviation_fine: f64,
    pub ratio: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub steps_coarse: usize,
    pub steps_fine: usize,
    pub points: Vec<OraclePoint>,
    pub max_deviation: f64,
    pub band: (f64, f64),
    pub pass: bool,
}

/// Interior points spread evenly through the interior ordering.
pub fn sample_interior(grid: &Grid, count: usize) -> Vec<usize> {
    let n = grid.interior_count();
    let count = count.min(n);
    (0..count).map(|i| grid.interior()[(2 * i + 1) * n / (2 * count)]).collect()
}

/// Solver-vs-oracle deviations at two resolutions `steps` and `2·steps`.
pub fn oracle_study(
    p_coarse: &StateProblem,
    p_fine: &StateProblem,
    k0: &Field,
    c_coarse: &ControlTrajectory,
    c_fine: &ControlTrajectory,
    points: &[usize],
) -> Result<OracleReport, SolverError> {
    let (kc, _) = p_coarse.picard_solve(k0, c_coarse)?;
    let (kf, _) = p_fine.picard_solve(k0, c_fine)?;
    let dev = |p: &StateProblem, k: &StateTrajectory, c: &ControlTrajectory, x: usize| -> Result<f64, SolverError> {
        let o = p.pointwise_ode_oracle(k, c, x)?;
        Ok(o.iter().enumerate().fold(0.0f64, |m, (i, v)| m.max((v - k.field(i).0[x]).abs())))
    };
    let mut out = Vec::new();
    for &x in points {
        let a = dev(p_coarse, &kc, c_coarse, x)?;
        let b = dev(p_fine, &kf, c_fine, x)?;
        let ratio = a / b;
        out.push(OraclePoint {
            idx: x,
            deviation_coarse: a,
            deviation_fine: b,
            ratio,
            pass: ratio >= RATIO_BAND.0 && ratio <= RATIO_BAND.1,
        });
    }
    let max_deviation = out.iter().fold(0.0f64, |m, p| m.max(p.deviation_coarse));
    let pass = out.iter().all(|p| p.pass);
    Ok(OracleReport {
        steps_coarse: p_coarse.steps(),
        steps_fine: p_fine.steps(),
        points: out,
        max_deviation,
        band: RATIO_BAND,
        pass,
    })
}

fn oracle_check(cfg: &RunConfig, out: &Path) -> Result<RunOutcome, RunError> {
    let s = setup(cfg)?;
    let (pc, k0) = problem(cfg, &s.calc, cfg.steps)?;
    let (pf, _) = problem(cfg, &s.calc, 2 * cfg.steps)?;
    let cc = solve_control(cfg, pc.grid(), cfg.steps)?;
    let cf = solve_control(cfg, pc.grid(), 2 * cfg.steps)?;
    let points = sample_interior(pc.grid(), cfg.oracle_points);
    let report = oracle_study(&pc, &pf, &k0, &cc, &cf, &points).map_err(|e| solve_err(out, e))?;
    write_json(&out.join("oracle_report.json"), &report)?;
    let ratios: Vec<String> = report.points.iter().map(|p| format!("{:.4}", p.ratio)).collect();
    let lines = vec![format!(
        "oracle: max_deviation={:.6e} ratios=[{}] band=[{}, {}] {}",
        report.max_deviation,
        ratios.join(", "),
        RATIO_BAND.0,
        RATIO_BAND.1,
        status(report.pass)
    )];
    Ok(RunOutcome { lines, pass: report.pass })
}

fn optimize(cfg: &RunConfig, out: &Path) -> Result<RunOutcome, RunError> {
    let s = setup(cfg)?;
    let (p, k0) = problem(cfg, &s.calc, cfg.steps)?;
    let bounds = BoxBounds::new(cfg.c_min, cfg.c_max).map_err(config_err)?;
    let dim = p.steps() * p.dofs();
    let grid = p.grid().clone();
    let dt = p.dt();
    let reduced = ReducedProblem::new(p, k0, bounds);
    let result = projected_gradient_descent(&reduced, bounds, vec![cfg.c_init; dim], cfg.descent);
    let (best, trace) = match result {
        Ok(r) => r,
        Err(ControlError::LineSearch { trace, .. }) => {
            write_json(&out.join("trace.json"), trace.as_ref())?;
            return Err(RunError::NonConvergence("line search failed".into()));
        }
        Err(ControlError::Solver(e)) => return Err(solve_err(out, e)),
        Err(ControlError::Adjoint { step, iterations }) => {
            return Err(RunError::NonConvergence(format!("adjoint step {step} after {iterations} iterations")))
        }
        Err(e) => return Err(config_err(e)),
    };
    write_json(&out.join("trace.json"), &trace)?;
    let c = reduced.control(best).map_err(config_err)?;
    let (value, k, _) = reduced.reduced_objective(&c).map_err(|e| match e {
        ControlError::Solver(e) => solve_err(out, e),
        other => config_err(other),
    })?;
    write_with(&out.join("grid.csv"), |w| grid.write_csv(w))?;
    write_with(&out.join("control.csv"), |w| c.write_csv(&grid, dt, w))?;
    write_with(&out.join("trajectory.csv"), |w| k.write_csv(&grid, w))?;
    write_json(&out.join("objective.json"), &value)?;
    let last = trace.entries.last().expect("trace has the start entry");
    let lines = vec![
        format!(
            "optimize: iterations={} objective={:.12e} utility={:.12e} terminal={:.12e}",
            trace.iterations, value.total, value.utility, value.terminal
        ),
        check_line("projected_gradient", last.projected_gradient_norm, cfg.descent.tol, trace.converged),
    ];
    if !trace.converged {
        return Err(RunError::NonConvergence(format!(
            "projected gradient {:.3e} after {} iterations",
            last.projected_gradient_norm, trace.iterations
        )));
    }
    Ok(RunOutcome { lines, pass: true })
}

fn sweep(cfg: &RunConfig, out: &Path) -> Result<RunOutcome, RunError> {
    let param = cfg.sweep_param.clone().expect("validated");
    let jobs: Vec<(usize, f64)> = cfg.sweep_values.iter().copied().enumerate().collect();
    let results = exec::map_slice(&jobs, |&(i, v)| {
        let dir = out.join(format!("sweep_{i:03}"));
        let child = cfg
            .with_override(&param, &v.to_string())
            .and_then(|c| c.with_override("mode", cfg.sweep_mode.name()))
            .map_err(config_err);
        match child.and_then(|c| run(&c, &dir)) {
            Ok(o) => (o.exit_code(), o.lines.first().cloned().unwrap_or_default()),
            Err(e) => (e.exit_code(), e.to_string()),
        }
    });
    let path = out.join("summary.csv");
    write_with(&path, |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["index", "parameter", "value", "mode", "exit_code", "summary"])?;
        for ((i, v), (code, line)) in jobs.iter().zip(&results) {
            w.write_record([i.to_string(), param.clone(), v.to_string(), cfg.sweep_mode.name().into(), code.to_string(), line.clone()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let lines = jobs
        .iter()
        .zip(&results)
        .map(|((i, v), (code, line))| format!("sweep {i}: {param}={v} exit={code} {line}"))
        .collect();
    Ok(RunOutcome { lines, pass: results.iter().all(|(c, _)| *c == 0) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config;

    #[test]
    fn field_csv_round_trip() {
        let d = Domain::rectangle([0.0, 0.0], [1.0, 0.5], 0.1).unwrap();
        let g = crate::geometry::build_grid(&d, 0.1).unwrap();
        let f = Field::constrained(&g, |x| x[0].sin() + x[1] / 3.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.csv");
        write_with(&path, |w| write_field_csv(&g, &f, w)).unwrap();
        assert_eq!(load_field(&g, &path).unwrap(), f);
    }

    #[test]
    fn control_csv_round_trip() {
        let d = Domain::interval(0.0, 1.0, 0.1).unwrap();
        let g = crate::geometry::build_grid(&d, 0.1).unwrap();
        let values: Vec<f64> = (0..3 * g.interior_count()).map(|i| i as f64 / 7.0).collect();
        let c = ControlTrajectory::new(3, g.interior_count(), values.clone(), BoxBounds::unbounded()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        write_with(&path, |w| c.write_csv(&g, 0.1, w)).unwrap();
        assert_eq!(load_control(&g, 3, &path).unwrap(), values);
        assert!(load_control(&g, 4, &path).is_err());
    }

    #[test]
    fn verify_kernel_defaults_pass() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config("mode = verify-kernel\n").unwrap();
        let o = run(&cfg, dir.path()).unwrap();
        assert_eq!(o.lines.len(), 5);
        assert!(o.pass);
        assert!(o.lines.iter().all(|l| l.ends_with("PASS")));
    }

    #[test]
    fn zero_solve_writes_zero_trajectory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config("mode = solve\na0 = 0\nk0 = 0\ncontrol = 0\nsteps = 4\n").unwrap();
        let o = run(&cfg, dir.path()).unwrap();
        assert_eq!(o.exit_code(), 0);
        let text = fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
        let mut r = csv::Reader::from_reader(text.as_bytes());
        for rec in r.records() {
            let rec = rec.unwrap();
            assert_eq!(rec.get(4).unwrap().parse::<f64>().unwrap(), 0.0);
        }
    }

    #[test]
    fn bad_geometry_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = parse_config("mode = solve\nh = 0.3\n").unwrap();
        assert_eq!(run(&cfg, dir.path()).unwrap_err().exit_code(), 1);
    }
}
