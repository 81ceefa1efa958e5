//! Parameter studies: two-patch mortar problems on the unit square split at
//! `x = 1/2`, the end-loaded cantilever and the embedded fiber.

use std::time::Instant;

use nalgebra::{Matrix2, Matrix3, SVector, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::beam::{BeamModel, BeamSection, Cantilever};
use crate::continuum::{assemble_linear_2d, assemble_neumann, plane_strain_stress, DirichletSet, Material, MaterialKind};
use crate::dual::End;
use crate::embedded::{matrix_block, EmbeddedProblem, FiberEmbedding, Formulation};
use crate::error::{Error, Result};
use crate::mortar::{CoupledSystem, Interface, InterfaceConfig, MultiplierKind, QuadratureMode, Side};
use crate::patch::Patch;
use crate::solver::{solve_incremental, NewtonConfig, SolveReport};
use crate::sparse::CsrMatrix;
use crate::spline::{KnotVector, SplineSpace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingSolver {
    #[default]
    Condensed,
    Saddle,
}

/// Solution of a two-patch problem.
#[derive(Debug, Clone)]
pub struct TwoPatchSolution {
    pub patches: Vec<Patch<2>>,
    pub offsets: Vec<usize>,
    pub ncomp: usize,
    pub u: Vec<f64>,
    pub constraint_violation: f64,
    pub warnings: Vec<String>,
}

impl TwoPatchSolution {
    pub fn patch_coefficients(&self, i: usize) -> &[f64] {
        let n = self.ncomp * self.patches[i].num_basis();
        &self.u[self.offsets[i]..self.offsets[i] + n]
    }

    pub fn ndof(&self) -> usize {
        self.u.len()
    }
}

/// Left patch `[0, 1/2] × [0, 1]`, right patch `[1/2, 1] × [0, 1]`.
pub fn split_square(degree: usize, left: [usize; 2], right: [usize; 2]) -> Result<Vec<Patch<2>>> {
    Ok(vec![
        Patch::block([degree, degree], left, [0.0, 0.0], [0.5, 1.0])?,
        Patch::block([degree, degree], right, [0.5, 0.0], [1.0, 1.0])?,
    ])
}

/// Box with uniform elements in `x` and the given interior breakpoints in `y`.
pub fn graded_block(degree: usize, nx: usize, y_breaks: &[f64], lower: [f64; 2], upper: [f64; 2]) -> Result<Patch<2>> {
    let sx = SplineSpace::uniform(degree, nx, lower[0], upper[0])?;
    let mut knots = vec![lower[1]; degree + 1];
    for &b in y_breaks {
        if !(b > lower[1] && b < upper[1]) {
            return Err(Error::Configuration(format!("breakpoint {b} outside ({}, {})", lower[1], upper[1])));
        }
        knots.push(b);
    }
    knots.extend(vec![upper[1]; degree + 1]);
    let sy = SplineSpace::polynomial(KnotVector::new(knots, degree)?);
    let (gx, gy) = (sx.knot_vector().greville(), sy.knot_vector().greville());
    let cps = (0..gx.len() * gy.len()).map(|i| Vector2::new(gx[i % gx.len()], gy[i / gx.len()])).collect();
    Patch::new([sx, sy], cps)
}

fn interface_config(
    slave_right: bool,
    multiplier: MultiplierKind,
    quadrature: QuadratureMode,
    crosspoints: Vec<(End, usize)>,
) -> InterfaceConfig {
    let right = Side { patch: 1, dir: 0, end: false };
    let left = Side { patch: 0, dir: 0, end: true };
    let (slave, master) = if slave_right { (right, left) } else { (left, right) };
    InterfaceConfig { slave, master, multiplier, quadrature, crosspoints }
}

fn global_system(patches: &[Patch<2>], mat: &Material, ncomp: usize, source: impl Fn(&SVector<f64, 2>) -> Vec<f64> + Sync + Copy) -> Result<(Vec<usize>, CsrMatrix, Vec<f64>)> {
    let offsets = vec![0, ncomp * patches[0].num_basis()];
    let n = offsets[1] + ncomp * patches[1].num_basis();
    let mut trip = Vec::new();
    let mut f = vec![0.0; n];
    for (p, &off) in patches.iter().zip(&offsets) {
        let (k, fp) = assemble_linear_2d(p, mat, off, n, source)?;
        trip.extend(k.triplets());
        for (a, b) in f.iter_mut().zip(fp) {
            *a += b;
        }
    }
    Ok((offsets.clone(), CsrMatrix::from_triplets(n, n, &trip), f))
}

fn solve_coupled(
    sys: &mut CoupledSystem,
    iface: &Interface,
    solver: CouplingSolver,
) -> Result<(Vec<f64>, f64, Vec<String>)> {
    let block = iface.assemble_c0()?;
    sys.add_block(&block);
    let u = match solver {
        CouplingSolver::Condensed => sys.solve_condensed()?,
        CouplingSolver::Saddle => sys.solve_saddle()?.0,
    };
    let viol = sys.constraint_matrix().mul_vec(&u).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    Ok((u, viol, block.warnings))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchTestConfig {
    pub degree: usize,
    /// Elements per direction of the left (master) and right (slave) patch.
    pub left_elements: [usize; 2],
    pub right_elements: [usize; 2],
    /// Interior breakpoints of the left patch along the interface; empty
    /// for a uniform mesh.
    #[serde(default)]
    pub left_interface_breaks: Vec<f64>,
    pub young_modulus_pa: f64,
    pub poisson_ratio: f64,
    /// Exact displacement gradient `[∂u/∂x, ∂u/∂y, ∂v/∂x, ∂v/∂y]`.
    pub displacement_gradient: [f64; 4],
    pub multiplier: MultiplierKind,
    pub quadrature: QuadratureMode,
    #[serde(default)]
    pub solver: CouplingSolver,
}

#[derive(Debug, Clone)]
pub struct PatchTestOutcome {
    pub solution: TwoPatchSolution,
    /// Max Frobenius norm of the stress deviation over the evaluation points.
    pub stress_error: f64,
    pub von_mises_error: f64,
    pub exact_stress: Matrix2<f64>,
}

/// Plane-strain two-patch patch test with a linear exact displacement.
///
/// Displacements are prescribed on `x = 0` and `y = 0`, the exact traction on
/// `x = 1` and `y = 1`.
pub fn run_patch_test(cfg: &PatchTestConfig) -> Result<PatchTestOutcome> {
    let mat = Material::new(MaterialKind::LinearElasticPlaneStrain, cfg.young_modulus_pa, cfg.poisson_ratio)?;
    let mut patches = split_square(cfg.degree, cfg.left_elements, cfg.right_elements)?;
    if !cfg.left_interface_breaks.is_empty() {
        patches[0] = graded_block(cfg.degree, cfg.left_elements[0], &cfg.left_interface_breaks, [0.0, 0.0], [0.5, 1.0])?;
    }
    let g = cfg.displacement_gradient;
    let exact = move |x: &SVector<f64, 2>| vec![g[0] * x[0] + g[1] * x[1], g[2] * x[0] + g[3] * x[1]];
    let (lambda, mu) = mat.lame();
    let eps = Matrix2::new(g[0], 0.5 * (g[1] + g[2]), 0.5 * (g[1] + g[2]), g[3]);
    let sigma = Matrix2::identity() * (lambda * eps.trace()) + eps * (2.0 * mu);
    let (offsets, k, mut f) = global_system(&patches, &mat, 2, |_| vec![0.0, 0.0])?;
    let traction = |n: Vector2<f64>| move |_: &SVector<f64, 2>| {
        let t = sigma * n;
        vec![t[0], t[1]]
    };
    let loads = [
        (1, 0, true, Vector2::new(1.0, 0.0)),
        (0, 1, true, Vector2::new(0.0, 1.0)),
        (1, 1, true, Vector2::new(0.0, 1.0)),
    ];
    for (pi, dir, end, n) in loads {
        let fl = assemble_neumann(&patches[pi], dir, end, 2, traction(n))?;
        for (a, b) in f[offsets[pi]..].iter_mut().zip(fl) {
            *a += b;
        }
    }
    let mut bc = DirichletSet::new();
    bc.add_face(&patches[0], 0, false, 2, &[0, 1], offsets[0], exact)?;
    bc.add_face(&patches[0], 1, false, 2, &[0, 1], offsets[0], exact)?;
    bc.add_face(&patches[1], 1, false, 2, &[0, 1], offsets[1], exact)?;
    let iface = Interface::new(&patches, interface_config(true, cfg.multiplier, cfg.quadrature, vec![(End::Left, 1)]))?;
    let mut sys = CoupledSystem::new(2, offsets.clone(), k, f, bc);
    let (u, viol, warnings) = solve_coupled(&mut sys, &iface, cfg.solver)?;
    let solution = TwoPatchSolution { patches, offsets, ncomp: 2, u, constraint_violation: viol, warnings };

    let svm = {
        let szz = cfg.poisson_ratio * (sigma[(0, 0)] + sigma[(1, 1)]);
        let (a, b, c) = (sigma[(0, 0)], sigma[(1, 1)], sigma[(0, 1)]);
        (0.5 * ((a - b).powi(2) + (b - szz).powi(2) + (szz - a).powi(2)) + 3.0 * c * c).sqrt()
    };
    let mut stress_error: f64 = 0.0;
    let mut vm_error: f64 = 0.0;
    for (pi, p) in solution.patches.iter().enumerate() {
        let coeffs = solution.patch_coefficients(pi);
        for el in p.elements() {
            let mut pts = el.gauss([cfg.degree + 1; 2]).points;
            pts.push(el.lower);
            pts.push(el.upper);
            for xi in pts {
                let (s, vm) = plane_strain_stress(p, &mat, coeffs, &xi)?;
                let d = Matrix2::new(s[0], s[2], s[2], s[1]) - sigma;
                stress_error = stress_error.max(d.norm());
                vm_error = vm_error.max((vm - svm).abs());
            }
        }
    }
    Ok(PatchTestOutcome { solution, stress_error, von_mises_error: vm_error, exact_stress: sigma })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceConfig {
    pub degree: usize,
    pub multiplier: MultiplierKind,
    pub quadrature: QuadratureMode,
    /// Elements per direction of the slave and master patch at level `k`
    /// are `slave_factor · k` and `master_factor · k`.
    pub slave_factor: usize,
    pub master_factor: usize,
    /// Slave on the right patch.
    #[serde(default = "default_true")]
    pub slave_right: bool,
    pub levels: Vec<usize>,
    #[serde(default)]
    pub solver: CouplingSolver,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub level: usize,
    pub h: f64,
    pub dofs: usize,
    pub energy_error: f64,
    pub constraint_violation: f64,
}

/// Manufactured solution `sin(3x + 1) cos(2y)` of `-Δu = 13 u`.
pub fn manufactured(x: &SVector<f64, 2>) -> f64 {
    (3.0 * x[0] + 1.0).sin() * (2.0 * x[1]).cos()
}

pub fn manufactured_gradient(x: &SVector<f64, 2>) -> Vector2<f64> {
    Vector2::new(
        3.0 * (3.0 * x[0] + 1.0).cos() * (2.0 * x[1]).cos(),
        -2.0 * (3.0 * x[0] + 1.0).sin() * (2.0 * x[1]).sin(),
    )
}

/// Solves the manufactured Poisson problem on one refinement level.
pub fn solve_poisson_level(cfg: &ConvergenceConfig, k: usize) -> Result<(TwoPatchSolution, f64)> {
    let mat = Material::new(MaterialKind::Poisson, 1.0, 0.0)?;
    let (ns, nm) = (cfg.slave_factor * k, cfg.master_factor * k);
    let (left, right) = if cfg.slave_right { (nm, ns) } else { (ns, nm) };
    let patches = split_square(cfg.degree, [left; 2], [right; 2])?;
    let (offsets, kmat, f) = global_system(&patches, &mat, 1, |x| vec![13.0 * manufactured(x)])?;
    let mut bc = DirichletSet::new();
    let g = |x: &SVector<f64, 2>| vec![manufactured(x)];
    for (pi, outer) in [(0usize, false), (1, true)] {
        bc.add_face(&patches[pi], 0, outer, 1, &[0], offsets[pi], g)?;
        bc.add_face(&patches[pi], 1, false, 1, &[0], offsets[pi], g)?;
        bc.add_face(&patches[pi], 1, true, 1, &[0], offsets[pi], g)?;
    }
    let iface = Interface::new(
        &patches,
        interface_config(cfg.slave_right, cfg.multiplier, cfg.quadrature, vec![(End::Left, 1), (End::Right, 1)]),
    )?;
    let mut sys = CoupledSystem::new(1, offsets.clone(), kmat, f, bc);
    let (u, viol, warnings) = solve_coupled(&mut sys, &iface, cfg.solver)?;
    let sol = TwoPatchSolution { patches, offsets, ncomp: 1, u, constraint_violation: viol, warnings };
    let err = energy_error(&sol, manufactured_gradient)?;
    Ok((sol, err))
}

/// `sqrt(Σ ∫ |∇u_h - ∇u|²)` over both patches.
pub fn energy_error(sol: &TwoPatchSolution, grad: impl Fn(&SVector<f64, 2>) -> Vector2<f64>) -> Result<f64> {
    let mut total = 0.0;
    for (pi, p) in sol.patches.iter().enumerate() {
        let c = sol.patch_coefficients(pi);
        let q = p.spaces()[0].degree() + 3;
        for el in p.elements() {
            let rule = el.gauss([q, q]);
            for (pt, w) in rule.points.iter().zip(&rule.weights) {
                let ev = p.evaluate(pt)?;
                let mut gh = Vector2::zeros();
                for (a, &i) in ev.indices.iter().enumerate() {
                    gh += ev.grads[a] * c[i];
                }
                total += w * ev.det * (gh - grad(&ev.x)).norm_squared();
            }
        }
    }
    Ok(total.sqrt())
}

pub fn run_convergence(cfg: &ConvergenceConfig) -> Result<Vec<ConvergenceRow>> {
    if cfg.levels.is_empty() {
        return Err(Error::Configuration("convergence study needs at least one level".into()));
    }
    cfg.levels
        .iter()
        .map(|&k| {
            let (sol, err) = solve_poisson_level(cfg, k)?;
            Ok(ConvergenceRow {
                level: k,
                h: 1.0 / (cfg.slave_factor.max(cfg.master_factor) * k) as f64,
                dofs: sol.ndof(),
                energy_error: err,
                constraint_violation: sol.constraint_violation,
            })
        })
        .collect()
}

/// Least-squares slope of `log e` against `log h` over the last `count` rows.
pub fn convergence_slope(rows: &[ConvergenceRow], count: usize) -> f64 {
    let tail = &rows[rows.len().saturating_sub(count)..];
    let xs: Vec<f64> = tail.iter().map(|r| r.h.ln()).collect();
    let ys: Vec<f64> = tail.iter().map(|r| r.energy_error.ln()).collect();
    let n = xs.len() as f64;
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CantileverConfig {
    pub young_modulus_pa: f64,
    pub poisson_ratio: f64,
    pub radius_m: f64,
    pub length_m: f64,
    #[serde(default = "default_kin_degree")]
    pub degree: usize,
    #[serde(default = "default_stress_degree")]
    pub stress_degree: usize,
    /// Element counts, one run each.
    pub elements: Vec<usize>,
    #[serde(default)]
    pub tip_force_n: [f64; 3],
    #[serde(default)]
    pub tip_moment_nm: [f64; 3],
    #[serde(default)]
    pub newton: NewtonConfig,
}

fn default_kin_degree() -> usize {
    3
}

fn default_stress_degree() -> usize {
    2
}

#[derive(Debug, Clone, Serialize)]
pub struct CantileverRow {
    pub elements: usize,
    pub dofs: usize,
    pub tip_position: [f64; 3],
    pub tip_displacement: f64,
    /// Rotation of the tip about `D1`.
    pub tip_rotation: f64,
    /// Relative error of the tip rotation against the circular elastica
    /// (pure moment about `D1` only).
    pub rotation_error: Option<f64>,
    /// Distance of the tip to the analytic elastica tip.
    pub position_error: Option<f64>,
    pub unit_defect: f64,
    pub iterations: usize,
    #[serde(skip)]
    pub state: Vec<f64>,
    #[serde(skip)]
    pub reports: Vec<SolveReport>,
}

pub fn cantilever_model(cfg: &CantileverConfig, elements: usize) -> Result<BeamModel> {
    let section = BeamSection::new(cfg.young_modulus_pa, cfg.poisson_ratio, cfg.radius_m)?;
    BeamModel::new(section, cfg.length_m, Vector3::zeros(), Matrix3::identity(), elements, cfg.degree, cfg.stress_degree)
}

/// Clamped beam along `z` with end force and moment.
pub fn run_cantilever(cfg: &CantileverConfig) -> Result<Vec<CantileverRow>> {
    if cfg.elements.is_empty() {
        return Err(Error::Configuration("cantilever study needs at least one element count".into()));
    }
    let (force, moment) = (Vector3::from(cfg.tip_force_n), Vector3::from(cfg.tip_moment_nm));
    cfg.elements
        .iter()
        .map(|&e| {
            let model = cantilever_model(cfg, e)?;
            let ei = model.section.k2()[0];
            let c = Cantilever::new(model, force, moment);
            let (x, reports) = solve_incremental(&c, &c.model.reference_state(), &cfg.newton)?;
            let tip = c.tip_position(&x)?;
            let rot = c.tip_rotation(&x)?;
            let pure = force.norm() == 0.0 && moment.y == 0.0 && moment.z == 0.0 && moment.x != 0.0;
            let (rotation_error, position_error) = if pure {
                let kappa = moment.x / ei;
                let th = kappa * cfg.length_m;
                let exact = Vector3::new(0.0, (th.cos() - 1.0) / kappa, th.sin() / kappa);
                let wrapped = (rot - th + std::f64::consts::PI).rem_euclid(2.0 * std::f64::consts::PI) - std::f64::consts::PI;
                (Some(wrapped.abs() / th.abs()), Some((tip - exact).norm()))
            } else {
                (None, None)
            };
            Ok(CantileverRow {
                elements: e,
                dofs: c.model.num_unknowns(),
                tip_position: tip.into(),
                tip_displacement: (tip - c.model.reference_position(cfg.length_m)).norm(),
                tip_rotation: rot,
                rotation_error,
                position_error,
                unit_defect: c.model.unit_defect(&x, &c.layout())?,
                iterations: reports.iter().map(|r| r.iterations).sum(),
                state: x,
                reports,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddedConfig {
    /// Matrix degree in `x` and `y`.
    pub matrix_degree_xy: usize,
    /// Matrix degree in `z`, equal to the beam centerline degree.
    pub axial_degree: usize,
    /// Degree of the beam force and moment fields; defaults to `axial_degree - 1`.
    #[serde(default)]
    pub stress_degree: Option<usize>,
    /// Matrix refinement levels `n` (`n × n × ratio·n` elements).
    pub levels: Vec<usize>,
    #[serde(default = "default_ratio")]
    pub axial_ratio: usize,
    /// Beam elements per unit of `n`.
    #[serde(default = "default_ratio")]
    pub beam_elements_per_level: usize,
    pub width_m: f64,
    pub length_m: f64,
    pub matrix_young_modulus_pa: f64,
    pub matrix_poisson_ratio: f64,
    pub fiber_young_modulus_pa: f64,
    pub fiber_poisson_ratio: f64,
    pub fiber_radius_m: f64,
    pub tip_moment_nm: [f64; 3],
    #[serde(default)]
    pub reference_tip_displacement_m: Option<f64>,
    #[serde(default = "default_formulation")]
    pub formulation: Formulation,
    #[serde(default = "default_embedded_newton")]
    pub newton: NewtonConfig,
}

fn default_ratio() -> usize {
    5
}

fn default_formulation() -> Formulation {
    Formulation::Condensed
}

pub fn default_embedded_newton() -> NewtonConfig {
    NewtonConfig { load_steps: 5, ..NewtonConfig::default() }
}

#[derive(Debug, Clone, Serialize)]
pub struct EmbeddedRow {
    pub level: usize,
    pub dofs: usize,
    pub tip: [f64; 3],
    pub tip_displacement: f64,
    pub gap: Option<f64>,
    pub constraint_violation: f64,
    pub iterations: Vec<usize>,
    pub seconds: f64,
    #[serde(skip)]
    pub reports: Vec<SolveReport>,
    #[serde(skip)]
    pub matrix_displacement: Vec<f64>,
    #[serde(skip)]
    pub beam_state: Vec<f64>,
}

impl EmbeddedConfig {
    pub fn problem(&self, n: usize) -> Result<EmbeddedProblem> {
        if n == 0 {
            return Err(Error::Configuration("embedded level must be positive".into()));
        }
        let p = self.axial_degree;
        let patch = matrix_block([self.matrix_degree_xy, self.matrix_degree_xy, p], n, self.axial_ratio, self.width_m, self.length_m)?;
        let mat = Material::new(MaterialKind::SaintVenantKirchhoff, self.matrix_young_modulus_pa, self.matrix_poisson_ratio)?;
        let fiber = FiberEmbedding {
            origin_m: [0.5 * self.width_m, 0.5 * self.width_m, 0.0],
            direction: [0.0, 0.0, 1.0],
            length_m: self.length_m,
            section: BeamSection::new(self.fiber_young_modulus_pa, self.fiber_poisson_ratio, self.fiber_radius_m)?,
            elements: self.beam_elements_per_level * n,
            kin_degree: p,
            stress_degree: self.stress_degree.unwrap_or(p.saturating_sub(1)),
            alpha: 0.0,
        };
        EmbeddedProblem::new(patch, mat, &fiber, Vector3::from(self.tip_moment_nm))
    }

    pub fn run_level(&self, n: usize) -> Result<EmbeddedRow> {
        let start = Instant::now();
        let pb = self.problem(n)?;
        let sys = pb.system(self.formulation)?;
        let (x, reports) = solve_incremental(&sys, &pb.initial_state(self.formulation), &self.newton)?;
        let tip = sys.tip_displacement(&x)?;
        Ok(EmbeddedRow {
            level: n,
            dofs: x.len(),
            tip: tip.into(),
            tip_displacement: tip.norm(),
            gap: self.reference_tip_displacement_m.map(|r| (tip.norm() - r).abs()),
            constraint_violation: sys.constraint_violation(&x)?,
            iterations: reports.iter().map(|r| r.iterations).collect(),
            seconds: start.elapsed().as_secs_f64(),
            matrix_displacement: pb.matrix_displacement(&x),
            beam_state: sys.beam_state(&x),
            reports,
        })
    }
}

pub fn run_embedded(cfg: &EmbeddedConfig) -> Result<Vec<EmbeddedRow>> {
    if cfg.levels.is_empty() {
        return Err(Error::Configuration("embedded study needs at least one level".into()));
    }
    cfg.levels.iter().map(|&n| cfg.run_level(n)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patch_cfg(p: usize, q: QuadratureMode) -> PatchTestConfig {
        PatchTestConfig {
            degree: p,
            left_elements: [2, 2],
            right_elements: [3, 3],
            left_interface_breaks: vec![0.439],
            young_modulus_pa: 1000.0,
            poisson_ratio: 0.3,
            displacement_gradient: [0.01, 0.004, -0.002, 0.006],
            multiplier: MultiplierKind::Dual,
            quadrature: q,
            solver: CouplingSolver::Condensed,
        }
    }

    #[test]
    fn patch_test_passes_with_merged_quadrature() {
        for p in 1..=2 {
            for mult in [MultiplierKind::Dual, MultiplierKind::Standard] {
                let mut cfg = patch_cfg(p, QuadratureMode::MergedParametric);
                cfg.multiplier = mult;
                let out = run_patch_test(&cfg).unwrap();
                assert!(out.stress_error < 1e-9, "p={p} {mult:?}: {}", out.stress_error);
            }
        }
    }

    #[test]
    fn sample_quadrature_error_decreases() {
        for p in 1..=2 {
            let errs: Vec<f64> = [2, 4, 9, 16, 25]
                .iter()
                .map(|&m| run_patch_test(&patch_cfg(p, QuadratureMode::Sample(m))).unwrap().stress_error)
                .collect();
            assert!(errs.windows(2).all(|w| w[1] < w[0]), "p={p}: {errs:?}");
        }
    }

    #[test]
    fn slope_of_exact_power_law() {
        let rows: Vec<ConvergenceRow> = [1usize, 2, 4, 8]
            .iter()
            .map(|&k| ConvergenceRow { level: k, h: 1.0 / k as f64, dofs: 0, energy_error: 3.0 * (1.0 / k as f64).powi(2), constraint_violation: 0.0 })
            .collect();
        assert!((convergence_slope(&rows, 3) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn quadratic_slopes_with_standard_and_optimal_multipliers() {
        for mult in [MultiplierKind::Standard, MultiplierKind::OptimalDual] {
            let cfg = ConvergenceConfig {
                degree: 2,
                multiplier: mult,
                quadrature: QuadratureMode::MergedParametric,
                slave_factor: 3,
                master_factor: 2,
                slave_right: true,
                levels: vec![1, 2, 4, 8],
                solver: CouplingSolver::Condensed,
            };
            let rows = run_convergence(&cfg).unwrap();
            let slope = convergence_slope(&rows, 3);
            assert!((1.8..=2.2).contains(&slope), "{mult:?}: {slope}");
            assert!(rows.iter().all(|r| r.constraint_violation < 1e-12));
        }
    }
}
