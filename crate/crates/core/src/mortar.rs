//! Mortar coupling of 2D patches along geometrically matching sides.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::continuum::{apply_dirichlet, DirichletSet};
use crate::dual::{step1_elementwise_dual, step2_glue, step3_optimal, End, MultiplierBase, MultiplierSpace, TraceSpace};
use crate::error::{Error, Result};
use crate::patch::Patch;
use crate::quadrature::gauss_on;
use crate::sparse::{CsrMatrix, SparseLu};

/// Patch side `xi_dir = lower` (`end = false`) or `xi_dir = upper`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Side {
    pub patch: usize,
    pub dir: usize,
    pub end: bool,
}

impl Side {
    fn tangent_dir(&self) -> usize {
        1 - self.dir
    }

    fn point(&self, patch: &Patch<2>, t: f64) -> Vector2<f64> {
        let mut xi = Vector2::zeros();
        xi[self.dir] = if self.end { patch.param_upper()[self.dir] } else { patch.param_lower()[self.dir] };
        xi[self.tangent_dir()] = t;
        xi
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Continuity {
    C0,
    C1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuadratureMode {
    MergedParametric,
    MergedPhysical,
    Sample(usize),
}

impl FromStr for QuadratureMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "merged" | "merged-gauss-parametric" => Ok(Self::MergedParametric),
            "merged-physical" | "merged-gauss-physical" => Ok(Self::MergedPhysical),
            _ => {
                let m = s
                    .strip_prefix("sample:")
                    .and_then(|m| m.parse::<usize>().ok())
                    .filter(|&m| m >= 1)
                    .ok_or_else(|| Error::Configuration(format!("unknown quadrature mode '{s}'")))?;
                Ok(Self::Sample(m))
            }
        }
    }
}

impl fmt::Display for QuadratureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MergedParametric => write!(f, "merged"),
            Self::MergedPhysical => write!(f, "merged-physical"),
            Self::Sample(m) => write!(f, "sample:{m}"),
        }
    }
}

impl Serialize for QuadratureMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for QuadratureMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Multiplier family on the slave trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MultiplierKind {
    /// Trace B-splines.
    Standard,
    /// Glued elementwise dual basis.
    Dual,
    /// Dual basis with enlarged support reproducing degree-p polynomials.
    OptimalDual,
}

pub fn multiplier_space(trace: &TraceSpace, kind: MultiplierKind) -> Result<MultiplierSpace> {
    Ok(match kind {
        MultiplierKind::Standard => MultiplierSpace::new(MultiplierBase::Standard(trace.clone())),
        MultiplierKind::Dual => MultiplierSpace::new(MultiplierBase::Dual(step2_glue(&step1_elementwise_dual(trace)?)?)),
        MultiplierKind::OptimalDual => {
            MultiplierSpace::new(MultiplierBase::Dual(step3_optimal(&step2_glue(&step1_elementwise_dual(trace)?)?)?))
        }
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InterfaceConfig {
    pub slave: Side,
    pub master: Side,
    pub multiplier: MultiplierKind,
    pub quadrature: QuadratureMode,
    /// Ends of the slave trace where `l` multipliers are removed.
    #[serde(default)]
    pub crosspoints: Vec<(End, usize)>,
}

/// Interface between two patch sides with its multiplier space.
#[derive(Debug, Clone)]
pub struct Interface {
    pub config: InterfaceConfig,
    slave: Patch<2>,
    master: Patch<2>,
    pub trace: TraceSpace,
    pub multipliers: MultiplierSpace,
    /// Master parameters of the slave trace ends.
    master_ends: (f64, f64),
}

/// Constraint rows `slave · u_s - master · u_m` over the full patch bases.
#[derive(Debug, Clone)]
pub struct ConstraintBlock {
    pub continuity: Continuity,
    pub slave_patch: usize,
    pub master_patch: usize,
    pub slave: DMatrix<f64>,
    pub master: DMatrix<f64>,
    pub slave_face: Vec<usize>,
    pub master_face: Vec<usize>,
    pub warnings: Vec<String>,
}

impl ConstraintBlock {
    pub fn rows(&self) -> usize {
        self.slave.nrows()
    }

    /// Multiplier × slave-trace block.
    pub fn m_ss(&self) -> DMatrix<f64> {
        self.slave.select_columns(&self.slave_face)
    }

    /// Multiplier × master-trace block.
    pub fn m_sm(&self) -> DMatrix<f64> {
        self.master.select_columns(&self.master_face)
    }

    /// `M_ss⁻¹ M_sm` for a square slave block.
    pub fn projection(&self) -> Result<DMatrix<f64>> {
        let mss = self.m_ss();
        if mss.nrows() != mss.ncols() {
            return Err(Error::Condensation(format!("M_ss is {}x{}", mss.nrows(), mss.ncols())));
        }
        mss.lu().solve(&self.m_sm()).ok_or_else(|| Error::Condensation("singular M_ss".into()))
    }

    /// Row residuals for scalar coefficient vectors of both patches.
    pub fn residual(&self, u_slave: &[f64], u_master: &[f64]) -> Vec<f64> {
        let us = nalgebra::DVector::from_column_slice(u_slave);
        let um = nalgebra::DVector::from_column_slice(u_master);
        (&self.slave * us - &self.master * um).iter().copied().collect()
    }
}

/// Projects `x` onto the side `side` of `patch`, returning the trace parameter.
fn invert_on_side(patch: &Patch<2>, side: &Side, x: &Vector2<f64>, guess: f64) -> Result<f64> {
    let td = side.tangent_dir();
    let (lo, hi) = (patch.param_lower()[td], patch.param_upper()[td]);
    let diam = patch.diameter();
    let mut t = guess.clamp(lo, hi);
    for _ in 0..50 {
        let xi = side.point(patch, t);
        let r = patch.map_point(&xi)? - x;
        if r.norm() <= 1e-13 * diam {
            return Ok(t);
        }
        let (jac, _) = patch.jacobian(&xi)?;
        let tau: Vector2<f64> = jac.column(td).into_owned();
        let dt = tau.dot(&r) / tau.norm_squared();
        t = (t - dt).clamp(lo, hi);
        if dt.abs() <= 1e-15 * (hi - lo) {
            break;
        }
    }
    let dist = (patch.map_point(&side.point(patch, t))? - x).norm();
    if dist <= 1e-10 * diam {
        Ok(t)
    } else {
        Err(Error::Inversion { point: x.as_slice().to_vec(), iterations: 50, distance: dist })
    }
}

impl Interface {
    pub fn new(patches: &[Patch<2>], config: InterfaceConfig) -> Result<Self> {
        for s in [&config.slave, &config.master] {
            if s.patch >= patches.len() || s.dir > 1 {
                return Err(Error::Configuration(format!("interface side {s:?} does not exist")));
            }
        }
        if config.slave.patch == config.master.patch {
            return Err(Error::Configuration("interface couples a patch with itself".into()));
        }
        let slave = patches[config.slave.patch].clone();
        let master = patches[config.master.patch].clone();
        let kv = slave.spaces()[config.slave.tangent_dir()].knot_vector().clone();
        let trace = TraceSpace::new(kv)?;
        let mut multipliers = multiplier_space(&trace, config.multiplier)?;
        for &(end, l) in &config.crosspoints {
            if l > 0 {
                multipliers.modify_crosspoint(end, l)?;
            }
        }
        let td = config.slave.tangent_dir();
        let (t0, t1) = (slave.param_lower()[td], slave.param_upper()[td]);
        let mtd = config.master.tangent_dir();
        let mid = 0.5 * (master.param_lower()[mtd] + master.param_upper()[mtd]);
        let x0 = slave.map_point(&config.slave.point(&slave, t0))?;
        let x1 = slave.map_point(&config.slave.point(&slave, t1))?;
        let m0 = invert_on_side(&master, &config.master, &x0, mid)
            .map_err(|_| Error::Configuration("interface sides do not share their end points".into()))?;
        let m1 = invert_on_side(&master, &config.master, &x1, mid)
            .map_err(|_| Error::Configuration("interface sides do not share their end points".into()))?;
        let (ml, mu) = (master.param_lower()[mtd], master.param_upper()[mtd]);
        let tol = 1e-9 * (mu - ml);
        if !(((m0 - ml).abs() < tol && (m1 - mu).abs() < tol) || ((m0 - mu).abs() < tol && (m1 - ml).abs() < tol)) {
            return Err(Error::Configuration("interface sides cover different curves".into()));
        }
        Ok(Self { config, slave, master, trace, multipliers, master_ends: (m0, m1) })
    }

    fn slave_range(&self) -> (f64, f64) {
        let kv = self.trace.knot_vector();
        (kv.start(), kv.end())
    }

    fn master_affine(&self, t: f64) -> f64 {
        let (t0, t1) = self.slave_range();
        let (m0, m1) = self.master_ends;
        m0 + (t - t0) / (t1 - t0) * (m1 - m0)
    }

    fn slave_from_master_affine(&self, m: f64) -> f64 {
        let (t0, t1) = self.slave_range();
        let (m0, m1) = self.master_ends;
        t0 + (m - m0) / (m1 - m0) * (t1 - t0)
    }

    /// Master trace parameter of the slave trace parameter `t`.
    fn master_param(&self, t: f64, physical: bool) -> Result<f64> {
        let guess = self.master_affine(t);
        if !physical {
            return Ok(guess);
        }
        let x = self.slave.map_point(&self.config.slave.point(&self.slave, t))?;
        invert_on_side(&self.master, &self.config.master, &x, guess)
    }

    /// Sorted union of slave breakpoints and master breakpoints mapped to the
    /// slave parameter.
    pub fn merge_interface_mesh(&self) -> Result<Vec<f64>> {
        self.merged(matches!(self.config.quadrature, QuadratureMode::MergedPhysical))
    }

    fn merged(&self, physical: bool) -> Result<Vec<f64>> {
        let (t0, t1) = self.slave_range();
        let mut pts = self.trace.knot_vector().breakpoints();
        let mkv = self.master.spaces()[self.config.master.tangent_dir()].knot_vector();
        for m in mkv.breakpoints() {
            let guess = self.slave_from_master_affine(m);
            let t = if physical {
                let x = self.master.map_point(&self.config.master.point(&self.master, m))?;
                invert_on_side(&self.slave, &self.config.slave, &x, guess)?
            } else {
                guess
            };
            pts.push(t.clamp(t0, t1));
        }
        pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let tol = 1e-12 * (t1 - t0);
        pts.dedup_by(|a, b| (*a - *b).abs() <= tol);
        Ok(pts)
    }

    fn quad_order(&self) -> usize {
        let ps = self.slave.spaces().iter().map(|s| s.degree()).max().unwrap();
        let pm = self.master.spaces().iter().map(|s| s.degree()).max().unwrap();
        ps + pm + 1
    }

    /// Quadrature points `(slave t, weight incl. arc length)` on the merged mesh.
    fn merged_points(&self, physical: bool) -> Result<Vec<(f64, f64)>> {
        let cells = self.merged(physical)?;
        let n = self.quad_order();
        let mut out = Vec::new();
        for w in cells.windows(2) {
            for (t, wt) in gauss_on(n, w[0], w[1]) {
                out.push((t, wt * self.arc_speed(t)?));
            }
        }
        Ok(out)
    }

    fn sample_points(&self, m: usize) -> Result<Vec<(f64, f64)>> {
        let mut out = Vec::new();
        for &(a, b) in self.trace.elements() {
            let h = (b - a) / m as f64;
            for k in 0..m {
                let t = a + (k as f64 + 0.5) * h;
                out.push((t, h * self.arc_speed(t)?));
            }
        }
        Ok(out)
    }

    fn arc_speed(&self, t: f64) -> Result<f64> {
        let (jac, _) = self.slave.jacobian(&self.config.slave.point(&self.slave, t))?;
        Ok(jac.column(self.config.slave.tangent_dir()).norm())
    }

    fn block(&self, continuity: Continuity) -> ConstraintBlock {
        let nm = self.multipliers.len();
        ConstraintBlock {
            continuity,
            slave_patch: self.config.slave.patch,
            master_patch: self.config.master.patch,
            slave: DMatrix::zeros(nm, self.slave.num_basis()),
            master: DMatrix::zeros(nm, self.master.num_basis()),
            slave_face: self.slave.face_indices(self.config.slave.dir, self.config.slave.end),
            master_face: self.master.face_indices(self.config.master.dir, self.config.master.end),
            warnings: Vec::new(),
        }
    }

    fn accumulate_values(
        &self,
        target: &mut DMatrix<f64>,
        patch: &Patch<2>,
        xi: &Vector2<f64>,
        psi: &[f64],
        w: f64,
    ) -> Result<()> {
        let b = patch.basis(xi, 0)?;
        for (&i, &v) in b.indices.iter().zip(b.values()) {
            if v == 0.0 {
                continue;
            }
            for (m, &pm) in psi.iter().enumerate() {
                if pm != 0.0 {
                    target[(m, i)] += w * pm * v;
                }
            }
        }
        Ok(())
    }

    fn outward_normal(&self, t: f64) -> Result<Vector2<f64>> {
        let side = &self.config.slave;
        let (jac, _) = self.slave.jacobian(&side.point(&self.slave, t))?;
        let tau: Vector2<f64> = jac.column(side.tangent_dir()).into_owned();
        let mut n = Vector2::new(tau[1], -tau[0]).normalize();
        let inward: Vector2<f64> = jac.column(side.dir).into_owned() * if side.end { 1.0 } else { -1.0 };
        if n.dot(&inward) < 0.0 {
            n = -n;
        }
        Ok(n)
    }

    fn accumulate_normal(
        &self,
        target: &mut DMatrix<f64>,
        patch: &Patch<2>,
        xi: &Vector2<f64>,
        normal: &Vector2<f64>,
        psi: &[f64],
        w: f64,
    ) -> Result<()> {
        let ev = patch.evaluate(xi)?;
        for (a, &i) in ev.indices.iter().enumerate() {
            let dn = ev.grads[a].dot(normal);
            if dn == 0.0 {
                continue;
            }
            for (m, &pm) in psi.iter().enumerate() {
                if pm != 0.0 {
                    target[(m, i)] += w * pm * dn;
                }
            }
        }
        Ok(())
    }

    fn merged_or_fallback(&self, block: &mut ConstraintBlock, physical: bool) -> Result<(Vec<(f64, f64)>, bool)> {
        match self.merged_points(physical) {
            Ok(p) => Ok((p, physical)),
            Err(Error::Inversion { .. }) => {
                let m = self.quad_order();
                block.warnings.push(format!("merged mesh projection failed; using {m} sample points per element"));
                Ok((self.sample_points(m)?, false))
            }
            Err(e) => Err(e),
        }
    }

    /// Value-continuity rows with the configured quadrature.
    pub fn assemble_c0(&self) -> Result<ConstraintBlock> {
        match self.config.quadrature {
            QuadratureMode::Sample(m) => self.sample_point_constraints(m),
            mode => {
                let mut block = self.block(Continuity::C0);
                let physical = mode == QuadratureMode::MergedPhysical;
                let (points, physical) = self.merged_or_fallback(&mut block, physical)?;
                for (t, w) in points {
                    let psi = self.multipliers.eval(t)?;
                    let xs = self.config.slave.point(&self.slave, t);
                    let xm = self.config.master.point(&self.master, self.master_param(t, physical)?);
                    self.accumulate_values(&mut block.slave, &self.slave, &xs, &psi, w)?;
                    self.accumulate_values(&mut block.master, &self.master, &xm, &psi, w)?;
                }
                Ok(block)
            }
        }
    }

    /// Value rows with both blocks integrated by `m` equidistant midpoints
    /// per slave element with uniform weights.
    pub fn sample_point_constraints(&self, m: usize) -> Result<ConstraintBlock> {
        if m == 0 {
            return Err(Error::Configuration("sample count must be positive".into()));
        }
        let mut block = self.block(Continuity::C0);
        for (t, w) in self.sample_points(m)? {
            let psi = self.multipliers.eval(t)?;
            let xs = self.config.slave.point(&self.slave, t);
            let xm = self.config.master.point(&self.master, self.master_param(t, false)?);
            self.accumulate_values(&mut block.slave, &self.slave, &xs, &psi, w)?;
            self.accumulate_values(&mut block.master, &self.master, &xm, &psi, w)?;
        }
        Ok(block)
    }

    /// Normal-derivative rows `∫ ψ (∂_n u_s - ∂_n u_m)` with `n` the slave
    /// outward normal.
    pub fn assemble_c1(&self) -> Result<ConstraintBlock> {
        let ps = self.slave.spaces()[self.config.slave.dir].degree();
        let pm = self.master.spaces()[self.config.master.dir].degree();
        let pt = self.trace.degree();
        if ps.min(pm).min(pt) < 2 {
            return Err(Error::Unsupported("C1 coupling needs degree >= 2 on both sides".into()));
        }
        let mut block = self.block(Continuity::C1);
        let physical = self.config.quadrature == QuadratureMode::MergedPhysical;
        let (points, physical) = match self.config.quadrature {
            QuadratureMode::Sample(m) => (self.sample_points(m)?, false),
            _ => self.merged_or_fallback(&mut block, physical)?,
        };
        for (t, w) in points {
            let psi = self.multipliers.eval(t)?;
            let n = self.outward_normal(t)?;
            let xs = self.config.slave.point(&self.slave, t);
            let xm = self.config.master.point(&self.master, self.master_param(t, physical)?);
            self.accumulate_normal(&mut block.slave, &self.slave, &xs, &n, &psi, w)?;
            self.accumulate_normal(&mut block.master, &self.master, &xm, &n, &psi, w)?;
        }
        Ok(block)
    }
}

/// Global linear system of coupled patches with mortar constraint rows.
#[derive(Debug, Clone)]
pub struct CoupledSystem {
    pub ndof: usize,
    pub ncomp: usize,
    pub offsets: Vec<usize>,
    pub stiffness: CsrMatrix,
    pub load: Vec<f64>,
    pub dirichlet: DirichletSet,
    constraint_rows: Vec<Vec<(usize, f64)>>,
    slave_dofs: Vec<Vec<usize>>,
}

/// Null-space map `u = T u_o + g`.
#[derive(Debug, Clone)]
pub struct Condensation {
    pub t: CsrMatrix,
    pub g: Vec<f64>,
    /// Global dofs kept as unknowns, in column order of `t`.
    pub retained: Vec<usize>,
    /// Slave dofs expressed through the retained ones.
    pub dependent: Vec<usize>,
}

impl Condensation {
    pub fn expand(&self, uo: &[f64]) -> Vec<f64> {
        let mut u = self.t.mul_vec(uo);
        for (a, b) in u.iter_mut().zip(&self.g) {
            *a += b;
        }
        u
    }
}

impl CoupledSystem {
    pub fn new(
        ncomp: usize,
        offsets: Vec<usize>,
        stiffness: CsrMatrix,
        load: Vec<f64>,
        dirichlet: DirichletSet,
    ) -> Self {
        let ndof = stiffness.nrows();
        Self { ndof, ncomp, offsets, stiffness, load, dirichlet, constraint_rows: Vec::new(), slave_dofs: Vec::new() }
    }

    pub fn num_constraints(&self) -> usize {
        self.constraint_rows.len()
    }

    /// Adds the rows of `block` for every field component.
    pub fn add_block(&mut self, block: &ConstraintBlock) {
        let (os, om) = (self.offsets[block.slave_patch], self.offsets[block.master_patch]);
        let nc = self.ncomp;
        for m in 0..block.rows() {
            for c in 0..nc {
                let mut row = Vec::new();
                for (i, &v) in block.slave.row(m).iter().enumerate() {
                    if v != 0.0 {
                        row.push((os + nc * i + c, v));
                    }
                }
                for (k, &v) in block.master.row(m).iter().enumerate() {
                    if v != 0.0 {
                        row.push((om + nc * k + c, -v));
                    }
                }
                self.constraint_rows.push(row);
            }
        }
        if block.continuity == Continuity::C0 {
            self.slave_dofs.push(
                block.slave_face.iter().flat_map(|&i| (0..nc).map(move |c| os + nc * i + c)).collect(),
            );
        }
    }

    /// Constraint matrix over all global dofs.
    pub fn constraint_matrix(&self) -> CsrMatrix {
        let trip: Vec<(usize, usize, f64)> = self
            .constraint_rows
            .iter()
            .enumerate()
            .flat_map(|(r, row)| row.iter().map(move |&(j, v)| (r, j, v)))
            .collect();
        CsrMatrix::from_triplets(self.constraint_rows.len(), self.ndof, &trip)
    }

    /// Expresses the free slave interface dofs through the remaining ones.
    pub fn condensation(&self) -> Result<Condensation> {
        let n = self.ndof;
        let mut dependent = Vec::new();
        let mut is_dep = vec![false; n];
        for group in &self.slave_dofs {
            for &d in group {
                if !self.dirichlet.contains(d) && !is_dep[d] {
                    is_dep[d] = true;
                    dependent.push(d);
                }
            }
        }
        let nr = self.constraint_rows.len();
        if nr != dependent.len() {
            return Err(Error::Condensation(format!(
                "{nr} constraint rows for {} free slave dofs; adjust the crosspoint modification",
                dependent.len()
            )));
        }
        let dep_pos: BTreeMap<usize, usize> = dependent.iter().enumerate().map(|(k, &d)| (d, k)).collect();
        let mut bss = DMatrix::<f64>::zeros(nr, nr);
        let mut other_cols: BTreeMap<usize, usize> = BTreeMap::new();
        let mut g_rhs = nalgebra::DVector::zeros(nr);
        for (r, row) in self.constraint_rows.iter().enumerate() {
            for &(j, v) in row {
                if let Some(&k) = dep_pos.get(&j) {
                    bss[(r, k)] += v;
                } else if let Some(val) = self.dirichlet.get(j) {
                    g_rhs[r] -= v * val;
                } else {
                    let len = other_cols.len();
                    other_cols.entry(j).or_insert(len);
                }
            }
        }
        let mut bso = DMatrix::zeros(nr, other_cols.len());
        for (r, row) in self.constraint_rows.iter().enumerate() {
            for &(j, v) in row {
                if let Some(&k) = other_cols.get(&j) {
                    bso[(r, k)] += v;
                }
            }
        }
        let lu = bss.clone().lu();
        let scale = bss.amax();
        let udiag = lu.u().diagonal();
        if udiag.iter().any(|d| d.abs() <= 1e-13 * scale) {
            return Err(Error::Condensation("slave block of the constraints is singular".into()));
        }
        let w = lu.solve(&bso).ok_or_else(|| Error::Condensation("singular slave block".into()))?;
        let gs = lu.solve(&g_rhs).ok_or_else(|| Error::Condensation("singular slave block".into()))?;

        let retained: Vec<usize> = (0..n).filter(|&i| !is_dep[i] && !self.dirichlet.contains(i)).collect();
        let mut col_of = vec![usize::MAX; n];
        for (k, &i) in retained.iter().enumerate() {
            col_of[i] = k;
        }
        let mut trip = Vec::new();
        let mut g = vec![0.0; n];
        for &i in &retained {
            trip.push((i, col_of[i], 1.0));
        }
        for (i, v) in self.dirichlet.iter() {
            g[i] = v;
        }
        for (s, &d) in dependent.iter().enumerate() {
            g[d] = gs[s];
            for (&j, &k) in &other_cols {
                let v = -w[(s, k)];
                if v != 0.0 {
                    trip.push((d, col_of[j], v));
                }
            }
        }
        let t = CsrMatrix::from_triplets(n, retained.len(), &trip);
        Ok(Condensation { t, g, retained, dependent })
    }

    /// Solves `Tᵀ K T u_o = Tᵀ (f - K g)` and returns the full solution.
    pub fn solve_condensed(&self) -> Result<Vec<f64>> {
        let c = self.condensation()?;
        let nr = c.retained.len();
        let trows: Vec<Vec<(usize, f64)>> = (0..self.ndof).map(|i| c.t.row(i).collect()).collect();
        let mut trip = Vec::new();
        for (i, j, v) in self.stiffness.triplets() {
            for &(a, ta) in &trows[i] {
                for &(b, tb) in &trows[j] {
                    trip.push((a, b, ta * v * tb));
                }
            }
        }
        let a = CsrMatrix::from_triplets(nr, nr, &trip);
        let kg = self.stiffness.mul_vec(&c.g);
        let mut b = vec![0.0; nr];
        for i in 0..self.ndof {
            let r = self.load[i] - kg[i];
            for &(k, t) in &trows[i] {
                b[k] += t * r;
            }
        }
        let uo = SparseLu::factor(&a)?.solve(&b)?;
        Ok(c.expand(&uo))
    }

    /// Solves the saddle-point system; returns the solution and multipliers.
    pub fn solve_saddle(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        let red = apply_dirichlet(&self.stiffness, &self.load, &self.dirichlet);
        let nf = red.free.len();
        let mut pos = vec![usize::MAX; self.ndof];
        for (k, &i) in red.free.iter().enumerate() {
            pos[i] = k;
        }
        let nr = self.constraint_rows.len();
        let mut trip = red.matrix.triplets();
        let mut rhs = red.rhs.clone();
        rhs.resize(nf + nr, 0.0);
        let kscale = red.matrix.norm_inf();
        for (r, row) in self.constraint_rows.iter().enumerate() {
            let mut rmax: f64 = 0.0;
            for &(j, v) in row {
                if let Some(val) = self.dirichlet.get(j) {
                    rhs[nf + r] -= v * val;
                } else {
                    trip.push((nf + r, pos[j], v));
                    trip.push((pos[j], nf + r, v));
                    rmax = rmax.max(v.abs());
                }
            }
            if rmax <= 1e-14 * kscale.max(1.0) {
                return Err(Error::SingularSystem(format!(
                    "constraint row {r} acts only on prescribed dofs (over-constrained multiplier space)"
                )));
            }
        }
        let kkt = CsrMatrix::from_triplets(nf + nr, nf + nr, &trip);
        let sol = SparseLu::factor(&kkt)?.solve(&rhs)?;
        let u = red.expand(&sol[..nf]);
        let b = self.constraint_matrix();
        let viol = b.mul_vec(&u).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let uscale = u.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        if viol > 1e-10 * uscale * b.norm_inf().max(1.0) {
            return Err(Error::SingularSystem(format!("constraint violation {viol:.3e} after saddle solve")));
        }
        Ok((u, sol[nf..].to_vec()))
    }
}

/// Coefficients of `f` interpolated at the Greville points of a 2D patch.
pub fn interpolate(patch: &Patch<2>, f: impl Fn(&SVector<f64, 2>) -> f64) -> Result<Vec<f64>> {
    let grev: Vec<Vec<f64>> = patch.spaces().iter().map(|s| s.knot_vector().greville()).collect();
    let n = patch.num_basis();
    let mut a = DMatrix::zeros(n, n);
    let mut rhs = nalgebra::DVector::zeros(n);
    for row in 0..n {
        let mi = patch.multi_index(row);
        let xi = Vector2::new(grev[0][mi[0]], grev[1][mi[1]]);
        let b = patch.basis(&xi, 0)?;
        for (&i, &v) in b.indices.iter().zip(b.values()) {
            a[(row, i)] = v;
        }
        rhs[row] = f(&patch.map_point(&xi)?);
    }
    let c = a.lu().solve(&rhs).ok_or_else(|| Error::Internal("singular Greville interpolation".into()))?;
    Ok(c.iter().copied().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::continuum::{assemble_linear_2d, Material, MaterialKind};

    fn two_patches(p: usize, left: [usize; 2], right: [usize; 2]) -> Vec<Patch<2>> {
        vec![
            Patch::block([p, p], left, [0.0, 0.0], [0.5, 1.0]).unwrap(),
            Patch::block([p, p], right, [0.5, 0.0], [1.0, 1.0]).unwrap(),
        ]
    }

    fn config(mult: MultiplierKind, q: QuadratureMode, crosspoints: Vec<(End, usize)>) -> InterfaceConfig {
        InterfaceConfig {
            slave: Side { patch: 1, dir: 0, end: false },
            master: Side { patch: 0, dir: 0, end: true },
            multiplier: mult,
            quadrature: q,
            crosspoints,
        }
    }

    #[test]
    fn quadrature_mode_parsing() {
        assert_eq!("merged".parse::<QuadratureMode>().unwrap(), QuadratureMode::MergedParametric);
        assert_eq!("sample:9".parse::<QuadratureMode>().unwrap(), QuadratureMode::Sample(9));
        assert!("sample:0".parse::<QuadratureMode>().is_err());
        assert!("gauss".parse::<QuadratureMode>().is_err());
        assert_eq!(QuadratureMode::Sample(4).to_string(), "sample:4");
    }

    #[test]
    fn merged_mesh_union() {
        let patches = vec![
            Patch::block([1, 1], [1, 3], [0.0, 0.0], [0.5, 1.0]).unwrap(),
            Patch::block([1, 1], [1, 2], [0.5, 0.0], [1.0, 1.0]).unwrap(),
        ];
        let iface = Interface::new(&patches, config(MultiplierKind::Dual, QuadratureMode::MergedParametric, vec![])).unwrap();
        let m = iface.merge_interface_mesh().unwrap();
        let expect = [0.0, 1.0 / 3.0, 0.5, 2.0 / 3.0, 1.0];
        assert_eq!(m.len(), expect.len());
        for (a, b) in m.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
        let conf = two_patches(2, [2, 4], [2, 4]);
        let iface = Interface::new(&conf, config(MultiplierKind::Dual, QuadratureMode::MergedPhysical, vec![])).unwrap();
        assert_eq!(iface.merge_interface_mesh().unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
    }

    #[test]
    fn conforming_dual_projection_is_identity() {
        for p in 1..=3 {
            let patches = two_patches(p, [2, 5], [3, 5]);
            let iface = Interface::new(&patches, config(MultiplierKind::Dual, QuadratureMode::MergedParametric, vec![])).unwrap();
            let b = iface.assemble_c0().unwrap();
            let d = b.projection().unwrap();
            assert!((d - DMatrix::<f64>::identity(p + 5, p + 5)).amax() < 1e-12);
        }
    }

    #[test]
    fn dual_block_is_diagonal_and_constants_are_coupled() {
        for kind in [MultiplierKind::Dual, MultiplierKind::OptimalDual, MultiplierKind::Standard] {
            for p in 1..=3 {
                let patches = two_patches(p, [2, 4], [3, 6]);
                let cp = vec![(End::Left, 1), (End::Right, 1)];
                let iface = Interface::new(&patches, config(kind, QuadratureMode::MergedParametric, cp)).unwrap();
                let b = iface.assemble_c0().unwrap();
                let (mss, msm) = (b.m_ss(), b.m_sm());
                assert_eq!(mss.nrows(), p + 6 - 2);
                for i in 0..mss.nrows() {
                    assert!((mss.row(i).sum() - msm.row(i).sum()).abs() < 1e-13);
                }
                if kind != MultiplierKind::Standard {
                    // diagonal on the free slave functions
                    let free = mss.columns(1, mss.ncols() - 2);
                    for i in 0..free.nrows() {
                        for j in 0..free.ncols() {
                            if i != j {
                                assert!(free[(i, j)].abs() < 1e-12 * free[(i, i)].abs());
                            }
                        }
                    }
                }
            }
        }
    }

    fn adaptive(f: &dyn Fn(f64) -> f64, a: f64, b: f64, depth: usize) -> f64 {
        let g4: f64 = gauss_on(4, a, b).into_iter().map(|(x, w)| w * f(x)).sum();
        let g6: f64 = gauss_on(6, a, b).into_iter().map(|(x, w)| w * f(x)).sum();
        if (g4 - g6).abs() < 1e-16 || depth == 0 {
            return g6;
        }
        let m = 0.5 * (a + b);
        adaptive(f, a, m, depth - 1) + adaptive(f, m, b, depth - 1)
    }

    #[test]
    fn p1_entries_match_adaptive_integration() {
        let patches = two_patches(1, [2, 2], [3, 3]);
        let iface = Interface::new(&patches, config(MultiplierKind::Dual, QuadratureMode::MergedParametric, vec![])).unwrap();
        let b = iface.assemble_c0().unwrap();
        let slave_kv = KnotVectorRef::new(1, 3);
        let master_kv = KnotVectorRef::new(1, 2);
        let (mss, msm) = (b.m_ss(), b.m_sm());
        for i in 0..iface.multipliers.len() {
            for j in 0..4 {
                let f = |t: f64| iface.multipliers.eval(t).unwrap()[i] * slave_kv.value(j, t);
                assert!((adaptive(&f, 0.0, 1.0, 40) - mss[(i, j)]).abs() < 1e-12);
            }
            for k in 0..3 {
                let f = |t: f64| iface.multipliers.eval(t).unwrap()[i] * master_kv.value(k, t);
                assert!((adaptive(&f, 0.0, 1.0, 40) - msm[(i, k)]).abs() < 1e-12);
            }
        }
    }

    struct KnotVectorRef(crate::spline::KnotVector);

    impl KnotVectorRef {
        fn new(p: usize, n: usize) -> Self {
            Self(crate::spline::KnotVector::uniform(p, n, 0.0, 1.0).unwrap())
        }
        fn value(&self, j: usize, t: f64) -> f64 {
            self.0.eval_all(t, 0).unwrap()[j]
        }
    }

    fn restrict(patches: &[Patch<2>], f: impl Fn(&SVector<f64, 2>) -> f64 + Copy) -> Vec<Vec<f64>> {
        patches.iter().map(|p| interpolate(p, f).unwrap()).collect()
    }

    #[test]
    fn polynomials_annihilate_constraints() {
        for p in 1..=3 {
            let patches = two_patches(p, [2, 8], [3, 12]);
            for kind in [MultiplierKind::Standard, MultiplierKind::Dual, MultiplierKind::OptimalDual] {
                for q in [QuadratureMode::MergedParametric, QuadratureMode::MergedPhysical] {
                    let iface = Interface::new(&patches, config(kind, q, vec![(End::Left, 1)])).unwrap();
                    let b = iface.assemble_c0().unwrap();
                    let f = |x: &SVector<f64, 2>| (0.3 + x[0] - 2.0 * x[1]).powi(p as i32);
                    let u = restrict(&patches, f);
                    let r = b.residual(&u[1], &u[0]);
                    assert!(r.iter().all(|v| v.abs() < 1e-11), "{p} {kind:?} {r:?}");
                    if p >= 2 {
                        let c1 = iface.assemble_c1().unwrap();
                        let r = c1.residual(&u[1], &u[0]);
                        assert!(r.iter().all(|v| v.abs() < 1e-11), "{p} {kind:?} {r:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn c1_detects_kinks_and_needs_quadratics() {
        let patches = two_patches(2, [2, 3], [2, 3]);
        let iface = Interface::new(&patches, config(MultiplierKind::Dual, QuadratureMode::MergedParametric, vec![])).unwrap();
        let c1 = iface.assemble_c1().unwrap();
        let u = restrict(&patches, |x| (x[0] - 0.5).max(0.0) * (1.0 + x[1]));
        let c0 = iface.assemble_c0().unwrap();
        assert!(c0.residual(&u[1], &u[0]).iter().all(|v| v.abs() < 1e-13));
        assert!(c1.residual(&u[1], &u[0]).iter().any(|v| v.abs() > 1e-3));
        let lin = two_patches(1, [2, 3], [2, 3]);
        let iface = Interface::new(&lin, config(MultiplierKind::Dual, QuadratureMode::MergedParametric, vec![])).unwrap();
        assert!(matches!(iface.assemble_c1(), Err(Error::Unsupported(_))));
    }

    #[test]
    fn sample_points_converge_to_merged() {
        let patches = two_patches(2, [2, 4], [3, 6]);
        let merged = Interface::new(&patches, config(MultiplierKind::Dual, QuadratureMode::MergedParametric, vec![]))
            .unwrap()
            .assemble_c0()
            .unwrap();
        let sampled = Interface::new(&patches, config(MultiplierKind::Dual, QuadratureMode::Sample(200), vec![]))
            .unwrap()
            .assemble_c0()
            .unwrap();
        for (a, b) in [(&merged.master, &sampled.master), (&merged.slave, &sampled.slave)] {
            assert!((a - b).amax() / a.amax() < 1e-3);
        }
        // conforming meshes: identical sampled rows couple the traces exactly
        let conf = two_patches(2, [2, 4], [2, 4]);
        let s = Interface::new(&conf, config(MultiplierKind::Dual, QuadratureMode::Sample(3), vec![]))
            .unwrap()
            .assemble_c0()
            .unwrap();
        assert!((s.projection().unwrap() - DMatrix::<f64>::identity(6, 6)).amax() < 1e-12);
    }

    fn poisson_system(
        patches: &[Patch<2>],
        cfg: InterfaceConfig,
    ) -> Result<CoupledSystem> {
        let mat = Material::new(MaterialKind::Poisson, 1.0, 0.0).unwrap();
        let offsets = vec![0, patches[0].num_basis()];
        let n = offsets[1] + patches[1].num_basis();
        let src = |x: &SVector<f64, 2>| vec![1.0 + x[0] * x[1]];
        let (k0, f0) = assemble_linear_2d(&patches[0], &mat, 0, n, src).unwrap();
        let (k1, f1) = assemble_linear_2d(&patches[1], &mat, offsets[1], n, src).unwrap();
        let mut trip = k0.triplets();
        trip.extend(k1.triplets());
        let k = CsrMatrix::from_triplets(n, n, &trip);
        let f: Vec<f64> = f0.iter().zip(&f1).map(|(a, b)| a + b).collect();
        let mut bc = DirichletSet::new();
        let g = |x: &SVector<f64, 2>| vec![x[0] * 0.5 + x[1] * x[1]];
        bc.add_face(&patches[0], 1, false, 1, &[0], 0, g).unwrap();
        bc.add_face(&patches[1], 1, false, 1, &[0], offsets[1], g).unwrap();
        bc.add_face(&patches[0], 0, false, 1, &[0], 0, g).unwrap();
        let iface = Interface::new(patches, cfg)?;
        let mut sys = CoupledSystem::new(1, offsets, k, f, bc);
        sys.add_block(&iface.assemble_c0()?);
        Ok(sys)
    }

    #[test]
    fn condensed_and_saddle_agree() {
        for kind in [MultiplierKind::Standard, MultiplierKind::Dual, MultiplierKind::OptimalDual] {
            for p in 1..=3 {
                let patches = two_patches(p, [2, 3], [3, 5]);
                let sys = poisson_system(&patches, config(kind, QuadratureMode::MergedParametric, vec![(End::Left, 1)])).unwrap();
                let uc = sys.solve_condensed().unwrap();
                let (us, _) = sys.solve_saddle().unwrap();
                let scale = us.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for (a, b) in uc.iter().zip(&us) {
                    assert!((a - b).abs() < 1e-10 * scale, "{kind:?} p={p}");
                }
            }
        }
    }

    #[test]
    fn constants_in_range_of_condensation() {
        let patches = two_patches(2, [2, 3], [3, 5]);
        let sys = poisson_system(&patches, config(MultiplierKind::Dual, QuadratureMode::MergedParametric, vec![(End::Left, 1)])).unwrap();
        let b = sys.constraint_matrix();
        let ones = vec![1.0; sys.ndof];
        assert!(b.mul_vec(&ones).iter().all(|v| v.abs() < 1e-13));
    }

    #[test]
    fn conforming_saddle_equals_single_patch() {
        let p = 2;
        let patches = two_patches(p, [2, 3], [2, 3]);
        let sys = poisson_system(&patches, config(MultiplierKind::Dual, QuadratureMode::MergedParametric, vec![(End::Left, 1)])).unwrap();
        let (u, _) = sys.solve_saddle().unwrap();
        // single patch with a C0 line at x = 0.5
        let mut knots = vec![0.0; p + 1];
        knots.extend([0.25, 0.5, 0.5, 0.75]);
        knots.extend(vec![1.0; p + 1]);
        let sx = crate::spline::SplineSpace::polynomial(crate::spline::KnotVector::new(knots, p).unwrap());
        let sy = crate::spline::SplineSpace::uniform(p, 3, 0.0, 1.0).unwrap();
        let grev: Vec<Vec<f64>> = [&sx, &sy].iter().map(|s| s.knot_vector().greville()).collect();
        let cps: Vec<SVector<f64, 2>> = (0..sx.num_basis() * sy.num_basis())
            .map(|i| Vector2::new(grev[0][i % sx.num_basis()], grev[1][i / sx.num_basis()]))
            .collect();
        let single = Patch::new([sx, sy], cps).unwrap();
        let mat = Material::new(MaterialKind::Poisson, 1.0, 0.0).unwrap();
        let n = single.num_basis();
        let (k, f) = assemble_linear_2d(&single, &mat, 0, n, |x| vec![1.0 + x[0] * x[1]]).unwrap();
        let mut bc = DirichletSet::new();
        let g = |x: &SVector<f64, 2>| vec![x[0] * 0.5 + x[1] * x[1]];
        bc.add_face(&single, 1, false, 1, &[0], 0, g).unwrap();
        bc.add_face(&single, 0, false, 1, &[0], 0, g).unwrap();
        let red = apply_dirichlet(&k, &f, &bc);
        let us = red.expand(&crate::sparse::solve(&red.matrix, &red.rhs).unwrap());
        for &(x, y) in &[(0.1, 0.2), (0.4, 0.9), (0.5, 0.5), (0.7, 0.3), (0.95, 0.95)] {
            let ref_v = single.field_value(&us, &Vector2::new(x, y)).unwrap();
            let (pi, off) = if x < 0.5 { (0, 0) } else { (1, sys.offsets[1]) };
            let np = patches[pi].num_basis();
            let v = patches[pi].field_value(&u[off..off + np], &Vector2::new(x, y)).unwrap();
            assert!((v - ref_v).abs() < 1e-10);
        }
    }

    #[test]
    fn overconstrained_multipliers_flagged() {
        let patches = two_patches(2, [2, 3], [2, 3]);
        let sys = poisson_system(&patches, config(MultiplierKind::Dual, QuadratureMode::MergedParametric, vec![])).unwrap();
        assert!(matches!(sys.solve_saddle(), Err(Error::SingularSystem(_))));
        assert!(matches!(sys.solve_condensed(), Err(Error::Condensation(_))));
    }

    #[test]
    fn mismatched_sides_rejected() {
        let patches = vec![
            Patch::block([1, 1], [1, 2], [0.0, 0.0], [0.5, 1.0]).unwrap(),
            Patch::block([1, 1], [1, 2], [0.5, 0.0], [1.0, 2.0]).unwrap(),
        ];
        let r = Interface::new(&patches, config(MultiplierKind::Dual, QuadratureMode::MergedParametric, vec![]));
        assert!(matches!(r, Err(Error::Configuration(_))));
    }
}
