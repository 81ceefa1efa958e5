//! Command execution: runs a scenario, checks its thresholds and writes
//! `results.csv`, `report.json` and legacy VTK field files.

use std::collections::BTreeMap;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use nalgebra::SVector;
use serde::Serialize;

use crate::beam::BeamLayout;
use crate::dual::{dump_rows, step1_elementwise_dual, step2_glue, step3_optimal, DualBasis, TraceSpace};
use crate::embedded::matrix_block;
use crate::error::{Error, Result};
use crate::patch::{Patch, PointEval};
use crate::quadrature::gauss_on;
use crate::scenario::{DualStageName, Overrides, Scenario};
use crate::solver::SolveReport;
use crate::spline::KnotVector;
use crate::studies::{
    cantilever_model, convergence_slope, manufactured, run_cantilever, run_patch_test, solve_poisson_level, ConvergenceRow,
    TwoPatchSolution,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    PatchTest,
    MortarConvergence,
    BeamCantilever,
    EmbeddedBeam,
    DualBasisDump,
}

impl Command {
    pub const ALL: [Command; 5] =
        [Command::PatchTest, Command::MortarConvergence, Command::BeamCantilever, Command::EmbeddedBeam, Command::DualBasisDump];

    pub fn name(self) -> &'static str {
        match self {
            Command::PatchTest => "patch-test",
            Command::MortarConvergence => "mortar-convergence",
            Command::BeamCantilever => "beam-cantilever",
            Command::EmbeddedBeam => "embedded-beam",
            Command::DualBasisDump => "dual-basis-dump",
        }
    }

    /// Scenario section the command reads.
    pub fn section(self) -> &'static str {
        match self {
            Command::PatchTest => "patch_test",
            Command::MortarConvergence => "mortar_convergence",
            Command::BeamCantilever => "beam_cantilever",
            Command::EmbeddedBeam => "embedded_beam",
            Command::DualBasisDump => "dual_basis",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Configuration(format!("unknown command '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Quantity {
    EnergyNormError,
    MaxVmStressError,
    TipDisplacement,
    ConstraintViolation,
    Iterations,
}

impl Quantity {
    pub fn name(self) -> &'static str {
        match self {
            Quantity::EnergyNormError => "energy-norm-error",
            Quantity::MaxVmStressError => "max-vm-stress-error",
            Quantity::TipDisplacement => "tip-displacement",
            Quantity::ConstraintViolation => "constraint-violation",
            Quantity::Iterations => "iterations",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub level: usize,
    pub dofs: usize,
    pub quantity: Quantity,
    pub value: f64,
    /// Run variant, e.g. the quadrature mode.
    pub label: String,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn push(&mut self, level: usize, dofs: usize, quantity: Quantity, value: f64, label: impl Into<String>) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::Internal(format!("non-finite {} at level {level}", quantity.name())));
        }
        self.rows.push(ResultRow { level, dofs, quantity, value, label: label.into() });
        Ok(())
    }

    /// Stable sort by level.
    pub fn sort(&mut self) {
        self.rows.sort_by_key(|r| r.level);
    }

    pub fn values(&self, quantity: Quantity) -> Vec<f64> {
        self.rows.iter().filter(|r| r.quantity == quantity).map(|r| r.value).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Internal(format!("csv: {e}"));
        w.write_record(["level", "dofs", "quantity", "value", "label"]).map_err(io)?;
        for r in &self.rows {
            w.write_record([r.level.to_string(), r.dofs.to_string(), r.quantity.name().into(), format!("{:e}", r.value), r.label.clone()])
                .map_err(io)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Internal(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Internal(e.to_string()))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    /// `"<"`, `"<="`, `">="` or `">"`.
    pub relation: &'static str,
    pub limit: f64,
    pub passed: bool,
}

impl Check {
    fn below(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, relation: "<", limit, passed: value < limit }
    }

    fn at_most(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, relation: "<=", limit, passed: value <= limit }
    }

    fn at_least(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, relation: ">=", limit, passed: value >= limit }
    }

    fn above(name: impl Into<String>, value: f64, limit: f64) -> Self {
        Self { name: name.into(), value, relation: ">", limit, passed: value > limit }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Pass,
    ThresholdFailure,
    ConfigurationError,
    SolverFailure,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Pass => 0,
            Status::ThresholdFailure => 1,
            Status::ConfigurationError => 2,
            Status::SolverFailure => 3,
        }
    }
}

/// Newton history of one solve.
#[derive(Debug, Clone, Serialize)]
pub struct SolveRecord {
    pub label: String,
    pub load_step: usize,
    pub iterations: usize,
    pub final_residual: f64,
    pub converged: bool,
}

impl SolveRecord {
    fn from_reports(label: &str, reports: &[SolveReport]) -> Vec<Self> {
        reports
            .iter()
            .map(|r| Self {
                label: label.into(),
                load_step: r.load_step,
                iterations: r.iterations,
                final_residual: r.final_residual,
                converged: r.converged,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub command: Command,
    pub scenario: String,
    pub status: Status,
    pub error: Option<String>,
    pub checks: Vec<Check>,
    pub solver: Vec<SolveRecord>,
    /// Wall-clock seconds per phase.
    pub timings: BTreeMap<String, f64>,
    pub details: serde_json::Value,
    pub warnings: Vec<String>,
}

impl RunReport {
    fn new(command: Command, scenario: &str) -> Self {
        Self {
            command,
            scenario: scenario.into(),
            status: Status::Pass,
            error: None,
            checks: Vec::new(),
            solver: Vec::new(),
            timings: BTreeMap::new(),
            details: serde_json::Value::Null,
            warnings: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Everything a command produces before it is written to disk.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub table: ResultTable,
    pub report: RunReport,
    /// `(name, contents)` of `fields_<name>.vtk` files.
    pub fields: Vec<(String, String)>,
    /// Additional files `(file name, contents)`.
    pub files: Vec<(String, String)>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        self.report.status.exit_code()
    }
}

/// Exit status for a failed run.
pub fn error_status(e: &Error) -> Status {
    match e {
        Error::Configuration(_) | Error::Domain(_) | Error::Unsupported(_) | Error::Embedding { .. } | Error::Io(_) => {
            Status::ConfigurationError
        }
        _ => Status::SolverFailure,
    }
}

/// Size of the global rayon pool; call once before any work.
pub fn configure_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Configuration("--threads must be at least 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Configuration(format!("thread pool: {e}")))
}

/// One point-data array of a VTK file, 1 or 3 components.
#[derive(Debug, Clone)]
pub struct VtkField {
    pub name: String,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Unstructured grid with a single cell type.
#[derive(Debug, Clone)]
pub struct VtkGrid {
    pub points: Vec<[f64; 3]>,
    pub cells: Vec<Vec<usize>>,
    pub cell_type: u8,
    pub fields: Vec<VtkField>,
}

pub const VTK_LINE: u8 = 3;
pub const VTK_QUAD: u8 = 9;
pub const VTK_HEXAHEDRON: u8 = 12;

impl VtkGrid {
    fn new(cell_type: u8, fields: &[(&str, usize)]) -> Self {
        Self {
            points: Vec::new(),
            cells: Vec::new(),
            cell_type,
            fields: fields.iter().map(|&(n, w)| VtkField { name: n.into(), width: w, data: Vec::new() }).collect(),
        }
    }

    fn add_point(&mut self, x: [f64; 3], values: &[f64]) -> usize {
        let mut k = 0;
        for f in &mut self.fields {
            f.data.extend_from_slice(&values[k..k + f.width]);
            k += f.width;
        }
        self.points.push(x);
        self.points.len() - 1
    }

    /// Legacy ASCII text.
    pub fn to_legacy(&self, title: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# vtk DataFile Version 3.0\n{title}\nASCII\nDATASET UNSTRUCTURED_GRID");
        let _ = writeln!(s, "POINTS {} double", self.points.len());
        for p in &self.points {
            let _ = writeln!(s, "{:e} {:e} {:e}", p[0], p[1], p[2]);
        }
        let size: usize = self.cells.iter().map(|c| c.len() + 1).sum();
        let _ = writeln!(s, "CELLS {} {size}", self.cells.len());
        for c in &self.cells {
            let ids: Vec<String> = c.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "{} {}", c.len(), ids.join(" "));
        }
        let _ = writeln!(s, "CELL_TYPES {}", self.cells.len());
        for _ in &self.cells {
            let _ = writeln!(s, "{}", self.cell_type);
        }
        let _ = writeln!(s, "POINT_DATA {}", self.points.len());
        for f in &self.fields {
            if f.width == 3 {
                let _ = writeln!(s, "VECTORS {} double", f.name);
                for v in f.data.chunks(3) {
                    let _ = writeln!(s, "{:e} {:e} {:e}", v[0], v[1], v[2]);
                }
            } else {
                let _ = writeln!(s, "SCALARS {} double 1\nLOOKUP_TABLE default", f.name);
                for v in &f.data {
                    let _ = writeln!(s, "{v:e}");
                }
            }
        }
        s
    }
}

/// Samples 2D patches on a `lattice × lattice` grid per element.
fn lattice_2d(
    patches: &[Patch<2>],
    lattice: usize,
    fields: &[(&str, usize)],
    mut sample: impl FnMut(usize, &PointEval<2>) -> Result<Vec<f64>>,
) -> Result<VtkGrid> {
    let mut g = VtkGrid::new(VTK_QUAD, fields);
    let m = lattice + 1;
    for (pi, p) in patches.iter().enumerate() {
        for el in p.elements() {
            let base = g.points.len();
            for j in 0..m {
                for i in 0..m {
                    let t = SVector::<f64, 2>::new(i as f64 / lattice as f64, j as f64 / lattice as f64);
                    let xi = el.lower + (el.upper - el.lower).component_mul(&t);
                    let ev = p.evaluate(&xi)?;
                    let v = sample(pi, &ev)?;
                    g.add_point([ev.x[0], ev.x[1], 0.0], &v);
                }
            }
            for j in 0..lattice {
                for i in 0..lattice {
                    let a = base + j * m + i;
                    g.cells.push(vec![a, a + 1, a + m + 1, a + m]);
                }
            }
        }
    }
    Ok(g)
}

fn lattice_3d(patch: &Patch<3>, lattice: usize, u: &[f64]) -> Result<VtkGrid> {
    let mut g = VtkGrid::new(VTK_HEXAHEDRON, &[("displacement", 3)]);
    let m = lattice + 1;
    for el in patch.elements() {
        let base = g.points.len();
        for k in 0..m {
            for j in 0..m {
                for i in 0..m {
                    let t = SVector::<f64, 3>::new(i as f64, j as f64, k as f64) / lattice as f64;
                    let xi = el.lower + (el.upper - el.lower).component_mul(&t);
                    let ev = patch.evaluate(&xi)?;
                    let mut d = [0.0; 3];
                    for (a, &idx) in ev.indices.iter().enumerate() {
                        for (c, dc) in d.iter_mut().enumerate() {
                            *dc += ev.values[a] * u[3 * idx + c];
                        }
                    }
                    g.add_point([ev.x[0], ev.x[1], ev.x[2]], &d);
                }
            }
        }
        for k in 0..lattice {
            for j in 0..lattice {
                for i in 0..lattice {
                    let a = base + (k * m + j) * m + i;
                    let b = a + m * m;
                    g.cells.push(vec![a, a + 1, a + m + 1, a + m, b, b + 1, b + m + 1, b + m]);
                }
            }
        }
    }
    Ok(g)
}

/// Beam centerline as a polyline with displacement and stress resultants.
fn beam_polyline(model: &crate::beam::BeamModel, x: &[f64], samples: usize) -> Result<VtkGrid> {
    let layout = BeamLayout::standard(0, model.num_coefficients());
    let mut g = VtkGrid::new(VTK_LINE, &[("displacement", 3), ("force", 3), ("moment", 3)]);
    for k in 0..=samples {
        let s = model.length * k as f64 / samples as f64;
        let pos = model.position(x, &layout, s)?;
        let (n, m) = model.stress_fields(x, &layout, s)?;
        let d = pos - model.reference_position(s);
        g.add_point([pos[0], pos[1], pos[2]], &[d[0], d[1], d[2], n[0], n[1], n[2], m[0], m[1], m[2]]);
        if k > 0 {
            g.cells.push(vec![k - 1, k]);
        }
    }
    Ok(g)
}

fn field_value(ev: &PointEval<2>, c: &[f64], ncomp: usize, comp: usize) -> f64 {
    ev.indices.iter().zip(&ev.values).map(|(&i, v)| v * c[ncomp * i + comp]).sum()
}

fn run_patch_test_cmd(sc: &Scenario, out: &mut RunOutcome) -> Result<()> {
    let s = sc.patch_test.as_ref().expect("validated");
    let th = &sc.thresholds;
    let mut merged_worst: Option<f64> = None;
    let mut sampled: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
    let mut runs = Vec::new();
    for (p, q) in s.runs() {
        let t0 = Instant::now();
        let cfg = s.config(p, q);
        let res = run_patch_test(&cfg)?;
        let label = format!("p{p}-{q}");
        out.report.timings.insert(label.clone(), t0.elapsed().as_secs_f64());
        let dofs = res.solution.ndof();
        out.table.push(p, dofs, Quantity::MaxVmStressError, res.von_mises_error, &label)?;
        out.table.push(p, dofs, Quantity::ConstraintViolation, res.solution.constraint_violation, &label)?;
        out.report.warnings.extend(res.solution.warnings.iter().map(|w| format!("{label}: {w}")));
        match q {
            crate::mortar::QuadratureMode::Sample(m) => sampled.entry(p).or_default().push((m, res.stress_error)),
            _ => merged_worst = Some(merged_worst.unwrap_or(0.0).max(res.stress_error)),
        }
        runs.push(serde_json::json!({
            "degree": p,
            "quadrature": q.to_string(),
            "dofs": dofs,
            "stress_error": res.stress_error,
            "von_mises_error": res.von_mises_error,
            "constraint_violation": res.solution.constraint_violation,
        }));
        if sc.output.vtk {
            let sol = &res.solution;
            let mat = crate::continuum::Material::new(
                crate::continuum::MaterialKind::LinearElasticPlaneStrain,
                s.young_modulus_pa,
                s.poisson_ratio,
            )?;
            let g = lattice_2d(&sol.patches, sc.output.vtk_lattice, &[("displacement", 3), ("von_mises", 1)], |pi, ev| {
                let c = sol.patch_coefficients(pi);
                let xi = sol.patches[pi].invert_point(&ev.x, &ev.x)?;
                let (_, vm) = crate::continuum::plane_strain_stress(&sol.patches[pi], &mat, c, &xi)?;
                Ok(vec![field_value(ev, c, 2, 0), field_value(ev, c, 2, 1), 0.0, vm])
            })?;
            let name = format!("p{p}_{}", q.to_string().replace(':', ""));
            out.fields.push((name.clone(), g.to_legacy(&format!("patch test {name}"))));
        }
    }
    if let (Some(limit), Some(err)) = (th.merged_stress_error, merged_worst) {
        out.report.checks.push(Check::below("merged-stress-error", err, limit));
    }
    if th.monotone_sampling == Some(true) {
        for (p, errs) in &sampled {
            let mut sorted = errs.clone();
            sorted.sort_by_key(|e| e.0);
            let worst_ratio = sorted.windows(2).map(|w| w[1].1 / w[0].1).fold(0.0f64, f64::max);
            out.report.checks.push(Check::below(format!("sampling-decrease-p{p}"), worst_ratio, 1.0));
        }
    }
    out.report.details = serde_json::json!({ "runs": runs, "sampled_stress_error": sampled });
    Ok(())
}

fn run_convergence_cmd(sc: &Scenario, out: &mut RunOutcome) -> Result<()> {
    let cfg = sc.mortar_convergence.as_ref().expect("validated");
    let mut rows = Vec::new();
    let mut finest: Option<TwoPatchSolution> = None;
    let label = format!("{:?}-p{}", cfg.multiplier, cfg.degree).to_lowercase();
    for &k in &cfg.levels {
        let t0 = Instant::now();
        let (sol, err) = solve_poisson_level(cfg, k)?;
        out.report.timings.insert(format!("level-{k}"), t0.elapsed().as_secs_f64());
        let row = ConvergenceRow {
            level: k,
            h: 1.0 / (cfg.slave_factor.max(cfg.master_factor) * k) as f64,
            dofs: sol.ndof(),
            energy_error: err,
            constraint_violation: sol.constraint_violation,
        };
        out.table.push(k, row.dofs, Quantity::EnergyNormError, err, &label)?;
        out.table.push(k, row.dofs, Quantity::ConstraintViolation, sol.constraint_violation, &label)?;
        out.report.warnings.extend(sol.warnings.iter().map(|w| format!("level {k}: {w}")));
        rows.push(row);
        finest = Some(sol);
    }
    let slope = if rows.len() >= 2 { Some(convergence_slope(&rows, 3)) } else { None };
    let th = &sc.thresholds;
    if th.min_slope.is_some() || th.max_slope.is_some() {
        let s = slope.ok_or_else(|| Error::Configuration("slope thresholds need at least two levels".into()))?;
        if let Some(lo) = th.min_slope {
            out.report.checks.push(Check::at_least("slope-min", s, lo));
        }
        if let Some(hi) = th.max_slope {
            out.report.checks.push(Check::below("slope-max", s, hi));
        }
    }
    out.report.details = serde_json::json!({ "slope": slope, "rows": rows, "quadrature": cfg.quadrature.to_string() });
    if let (true, Some(sol)) = (sc.output.vtk, finest) {
        let g = lattice_2d(&sol.patches, sc.output.vtk_lattice, &[("u", 1), ("error", 1)], |pi, ev| {
            let uh = field_value(ev, sol.patch_coefficients(pi), 1, 0);
            Ok(vec![uh, uh - manufactured(&ev.x)])
        })?;
        out.fields.push(("poisson".into(), g.to_legacy("manufactured Poisson, finest level")));
    }
    Ok(())
}

fn run_cantilever_cmd(sc: &Scenario, out: &mut RunOutcome) -> Result<()> {
    let cfg = sc.beam_cantilever.as_ref().expect("validated");
    let t0 = Instant::now();
    let rows = run_cantilever(cfg)?;
    out.report.timings.insert("solve".into(), t0.elapsed().as_secs_f64());
    for r in &rows {
        let label = format!("{}-elements", r.elements);
        out.table.push(r.elements, r.dofs, Quantity::TipDisplacement, r.tip_displacement, &label)?;
        out.table.push(r.elements, r.dofs, Quantity::Iterations, r.iterations as f64, &label)?;
        out.report.solver.extend(SolveRecord::from_reports(&label, &r.reports));
    }
    let last = rows.last().expect("validated non-empty");
    let th = &sc.thresholds;
    let need = |v: Option<f64>, what: &str| {
        v.ok_or_else(|| Error::Configuration(format!("{what} threshold needs a pure end moment about the first director")))
    };
    if let Some(lim) = th.max_rotation_error {
        out.report.checks.push(Check::below("rotation-error", need(last.rotation_error, "rotation")?, lim));
    }
    if let Some(lim) = th.max_position_error_rel {
        out.report.checks.push(Check::below("position-error-rel", need(last.position_error, "position")? / cfg.length_m, lim));
    }
    if let Some(lim) = th.max_unit_defect {
        let worst = rows.iter().map(|r| r.unit_defect).fold(0.0f64, f64::max);
        out.report.checks.push(Check::below("unit-defect", worst, lim));
    }
    if let Some(lim) = th.max_newton_iterations {
        let worst = rows.iter().flat_map(|r| r.reports.iter().map(|s| s.iterations)).max().unwrap_or(0);
        out.report.checks.push(Check::at_most("newton-iterations", worst as f64, lim as f64));
    }
    out.report.details = serde_json::json!({ "rows": rows });
    if sc.output.vtk {
        let model = cantilever_model(cfg, last.elements)?;
        let g = beam_polyline(&model, &last.state, 16 * last.elements)?;
        out.fields.push(("beam".into(), g.to_legacy("cantilever centerline")));
    }
    Ok(())
}

fn run_embedded_cmd(sc: &Scenario, out: &mut RunOutcome) -> Result<()> {
    let cfg = sc.embedded_beam.as_ref().expect("validated");
    let mut rows = Vec::new();
    for &n in &cfg.levels {
        let row = cfg.run_level(n).map_err(|e| match e {
            Error::Divergence { reason, iterations, residual } => {
                Error::Divergence { reason: format!("level {n}: {reason}"), iterations, residual }
            }
            other => other,
        })?;
        let label = format!("n{n}");
        out.report.timings.insert(format!("level-{n}"), row.seconds);
        out.table.push(n, row.dofs, Quantity::TipDisplacement, row.tip_displacement, &label)?;
        out.table.push(n, row.dofs, Quantity::ConstraintViolation, row.constraint_violation, &label)?;
        let max_its = row.iterations.iter().copied().max().unwrap_or(0);
        out.table.push(n, row.dofs, Quantity::Iterations, max_its as f64, &label)?;
        out.report.solver.extend(SolveRecord::from_reports(&label, &row.reports));
        rows.push(row);
    }
    let th = &sc.thresholds;
    let last = rows.last().expect("validated non-empty");
    let plateau = (rows.len() >= 2).then(|| {
        let prev = &rows[rows.len() - 2];
        (last.tip_displacement - prev.tip_displacement).abs() / last.tip_displacement
    });
    if let Some(lim) = th.max_constraint_violation_rel {
        let worst = rows.iter().map(|r| r.constraint_violation).fold(0.0f64, f64::max) / cfg.length_m;
        out.report.checks.push(Check::below("constraint-violation-rel", worst, lim));
    }
    if let Some(lim) = th.max_plateau_change {
        let p = plateau.ok_or_else(|| Error::Configuration("plateau threshold needs at least two levels".into()))?;
        out.report.checks.push(Check::below("plateau-change", p, lim));
    }
    if th.require_model_gap == Some(true) {
        let gap = last.gap.ok_or_else(|| Error::Configuration("model gap check needs reference_tip_displacement_m".into()))?;
        let noise = plateau.map_or(0.0, |p| p * last.tip_displacement);
        out.report.checks.push(Check::above("model-gap", gap, noise));
    }
    if let Some(lim) = th.max_newton_iterations {
        let worst = rows.iter().flat_map(|r| r.iterations.iter().copied()).max().unwrap_or(0);
        out.report.checks.push(Check::at_most("newton-iterations", worst as f64, lim as f64));
    }
    out.report.details = serde_json::json!({
        "setup": {
            "fiber_young_modulus_pa": cfg.fiber_young_modulus_pa,
            "matrix_young_modulus_pa": cfg.matrix_young_modulus_pa,
            "tip_moment_nm": cfg.tip_moment_nm,
            "reference_tip_displacement_m": cfg.reference_tip_displacement_m,
            "length_m": cfg.length_m,
            "fiber_radius_m": cfg.fiber_radius_m,
            "degrees": [cfg.matrix_degree_xy, cfg.matrix_degree_xy, cfg.axial_degree],
            "formulation": cfg.formulation,
        },
        "rows": rows,
        "plateau_change": plateau,
        "gap_m": last.gap,
    });
    if sc.output.vtk {
        let n = last.level;
        let patch = matrix_block(
            [cfg.matrix_degree_xy, cfg.matrix_degree_xy, cfg.axial_degree],
            n,
            cfg.axial_ratio,
            cfg.width_m,
            cfg.length_m,
        )?;
        let g = lattice_3d(&patch, sc.output.vtk_lattice, &last.matrix_displacement)?;
        out.fields.push(("matrix".into(), g.to_legacy(&format!("embedded matrix n={n}"))));
        let model = cfg.problem(n)?.beam;
        let g = beam_polyline(&model, &last.beam_state, 8 * model.num_points())?;
        out.fields.push(("fiber".into(), g.to_legacy(&format!("embedded fiber n={n}"))));
    }
    Ok(())
}

/// Dual basis of the requested stage.
pub fn build_dual(degree: usize, knots: &[f64], stage: DualStageName) -> Result<DualBasis> {
    let trace = TraceSpace::new(KnotVector::new(knots.to_vec(), degree)?)?;
    let d = step1_elementwise_dual(&trace)?;
    Ok(match stage {
        DualStageName::Elementwise => d,
        DualStageName::Glued => step2_glue(&d)?,
        DualStageName::Optimal => step3_optimal(&step2_glue(&d)?)?,
    })
}

/// `∫_e φ_j` for every trace function and element.
fn element_integrals(trace: &TraceSpace) -> Result<Vec<Vec<f64>>> {
    let kv = trace.knot_vector();
    let mut out = vec![vec![0.0; trace.num_elements()]; trace.num_functions()];
    for (e, &(a, b)) in trace.elements().iter().enumerate() {
        for (t, w) in gauss_on(kv.degree() + 1, a, b) {
            for (j, v) in kv.eval_all(t, 0)?.iter().enumerate() {
                out[j][e] += w * v;
            }
        }
    }
    Ok(out)
}

/// Largest deviation of `∫ψ_i φ_j` from `δ(owner_i, j) ∫_{supp ψ_i} φ_j`.
pub fn biorthogonality_error(d: &DualBasis) -> Result<f64> {
    let g = d.coupling_matrix();
    let ints = element_integrals(&d.trace)?;
    let mut worst: f64 = 0.0;
    for (i, f) in d.functions.iter().enumerate() {
        for j in 0..g.ncols() {
            let expect = if j == f.owner { f.support().iter().map(|&e| ints[j][e]).sum() } else { 0.0 };
            worst = worst.max((g[(i, j)] - expect).abs());
        }
    }
    Ok(worst)
}

fn run_dual_dump_cmd(sc: &Scenario, out: &mut RunOutcome) -> Result<()> {
    let s = sc.dual_basis.as_ref().expect("validated");
    let d = build_dual(s.degree, &s.knots, s.stage)?;
    let rows = dump_rows(&d);
    let width = rows.iter().map(|r| r.coefficients.len()).max().unwrap_or(0);
    let io = |e: csv::Error| Error::Internal(format!("csv: {e}"));
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["function", "owner", "element", "element_start", "element_end"].map(String::from).to_vec();
    header.extend((0..width).map(|k| format!("c{k}")));
    w.write_record(&header).map_err(io)?;
    for r in &rows {
        let mut rec = vec![
            r.function.to_string(),
            d.functions[r.function].owner.to_string(),
            r.element.to_string(),
            format!("{:e}", r.element_start),
            format!("{:e}", r.element_end),
        ];
        rec.extend((0..width).map(|k| format!("{:e}", r.coefficients.get(k).copied().unwrap_or(0.0))));
        w.write_record(&rec).map_err(io)?;
    }
    let dump = String::from_utf8(w.into_inner().map_err(|e| Error::Internal(e.to_string()))?).map_err(|e| Error::Internal(e.to_string()))?;

    let g = d.coupling_matrix();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["dual".to_string()];
    header.extend((0..g.ncols()).map(|j| format!("phi{j}")));
    w.write_record(&header).map_err(io)?;
    for i in 0..g.nrows() {
        let mut rec = vec![i.to_string()];
        rec.extend((0..g.ncols()).map(|j| format!("{:e}", g[(i, j)])));
        w.write_record(&rec).map_err(io)?;
    }
    let check = String::from_utf8(w.into_inner().map_err(|e| Error::Internal(e.to_string()))?).map_err(|e| Error::Internal(e.to_string()))?;

    let err = biorthogonality_error(&d)?;
    // Σ_i ∫_e ψ_i over each element equals its length when the duals sum to one.
    let column_sums: Vec<f64> = (0..d.trace.num_elements())
        .map(|e| {
            let (a, b) = d.trace.elements()[e];
            gauss_on(s.degree + 2, a, b)
                .into_iter()
                .map(|(t, wt)| wt * (0..d.len()).map(|i| d.eval(i, t).unwrap_or(0.0)).sum::<f64>())
                .sum()
        })
        .collect();
    if let Some(lim) = sc.thresholds.max_biorthogonality_error {
        out.report.checks.push(Check::below("biorthogonality", err, lim));
    }
    out.report.details = serde_json::json!({
        "stage": s.stage,
        "functions": d.len(),
        "biorthogonality_error": err,
        "element_lengths": d.trace.elements().iter().map(|(a, b)| b - a).collect::<Vec<_>>(),
        "element_integrals_of_sum": column_sums,
    });
    out.files.push(("dual_basis.csv".into(), dump));
    out.files.push(("biorthogonality.csv".into(), check));
    Ok(())
}

/// Runs `command` on an already validated scenario.
pub fn run(command: Command, sc: &Scenario) -> Result<RunOutcome> {
    let mut out = RunOutcome {
        table: ResultTable::default(),
        report: RunReport::new(command, &sc.name),
        fields: Vec::new(),
        files: Vec::new(),
    };
    let t0 = Instant::now();
    match command {
        Command::PatchTest => run_patch_test_cmd(sc, &mut out)?,
        Command::MortarConvergence => run_convergence_cmd(sc, &mut out)?,
        Command::BeamCantilever => run_cantilever_cmd(sc, &mut out)?,
        Command::EmbeddedBeam => run_embedded_cmd(sc, &mut out)?,
        Command::DualBasisDump => run_dual_dump_cmd(sc, &mut out)?,
    }
    out.report.timings.insert("total".into(), t0.elapsed().as_secs_f64());
    out.table.sort();
    out.report.status = if out.report.passed() { Status::Pass } else { Status::ThresholdFailure };
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub scenario: PathBuf,
    pub out: PathBuf,
    pub overrides: Overrides,
}

fn write_outputs(dir: &Path, out: &RunOutcome) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("results.csv"), out.table.to_csv()?)?;
    for (name, text) in &out.fields {
        std::fs::write(dir.join(format!("fields_{name}.vtk")), text)?;
    }
    for (name, text) in &out.files {
        std::fs::write(dir.join(name), text)?;
    }
    write_report(dir, &out.report)
}

fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(dir.join("report.json"), json)?;
    Ok(())
}

/// Loads, validates and runs a scenario, then writes all outputs. Failed runs
/// still leave a `report.json` describing the error when possible.
pub fn execute(command: Command, opts: &RunOptions) -> (Status, Result<RunOutcome>) {
    let prepared = Scenario::load(&opts.scenario).and_then(|mut sc| {
        sc.apply(&opts.overrides)?;
        sc.validate(command.section())?;
        Ok(sc)
    });
    let sc = match prepared {
        Ok(sc) => sc,
        Err(e) => return (error_status(&e), Err(e)),
    };
    match run(command, &sc) {
        Ok(out) => match write_outputs(&opts.out, &out) {
            Ok(()) => (out.report.status, Ok(out)),
            Err(e) => (Status::ConfigurationError, Err(e)),
        },
        Err(e) => {
            let status = error_status(&e);
            let mut report = RunReport::new(command, &sc.name);
            report.status = status;
            report.error = Some(e.to_string());
            let _ = write_report(&opts.out, &report);
            (status, Err(e))
        }
    }
}
