//! Fiber embedded in a 3D matrix patch: the beam centerline follows the
//! matrix deformation at the collocation points and the beam force is
//! transferred back as point loads.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::beam::{BeamLayout, BeamModel, BeamSection, EndLoad, Jet, LinForm, RowSink, StartCondition};
use crate::continuum::{assemble_internal, internal_forces, Material, MaterialKind};
use crate::error::{Error, Result};
use crate::patch::Patch;
use crate::quadrature::gauss_legendre;
use crate::solver::NonlinearSystem;
use crate::sparse::CsrMatrix;

/// Straight fiber `X_c(s) = origin + s · direction`, `s ∈ [0, length]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiberEmbedding {
    pub origin_m: [f64; 3],
    pub direction: [f64; 3],
    pub length_m: f64,
    pub section: BeamSection,
    pub elements: usize,
    pub kin_degree: usize,
    pub stress_degree: usize,
    /// Spring compliance of the coupling; only `0` (rigid) is supported.
    #[serde(default)]
    pub alpha: f64,
}

impl FiberEmbedding {
    pub fn validate(&self) -> Result<()> {
        if self.alpha != 0.0 {
            return Err(Error::Configuration(format!("spring coupling alpha = {} is not supported, use 0", self.alpha)));
        }
        if Vector3::from(self.direction).norm() < 1e-12 {
            return Err(Error::Configuration("fiber direction is zero".into()));
        }
        self.section.validate()
    }

    /// Director triad with `D3` along the fiber.
    pub fn directors(&self) -> Matrix3<f64> {
        let d3 = Vector3::from(self.direction).normalize();
        let seed = if d3.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let d1 = (seed - d3 * seed.dot(&d3)).normalize();
        let d2 = d3.cross(&d1);
        Matrix3::from_columns(&[d1, d2, d3])
    }

    pub fn model(&self) -> Result<BeamModel> {
        self.validate()?;
        BeamModel::new(
            self.section,
            self.length_m,
            Vector3::from(self.origin_m),
            self.directors(),
            self.elements,
            self.kin_degree,
            self.stress_degree,
        )
    }
}

/// Host-patch parameters and basis of every collocation point.
#[derive(Debug, Clone)]
pub struct BoundCenterline {
    pub arclength: Vec<f64>,
    pub params: Vec<Vector3<f64>>,
    pub indices: Vec<Vec<usize>>,
    pub values: Vec<Vec<f64>>,
}

impl BoundCenterline {
    /// `x(X_c(s_k))` for control positions `x` (three per control point).
    pub fn matrix_point(&self, k: usize, x: &[f64]) -> Vector3<f64> {
        let mut p = Vector3::zeros();
        for (&i, &v) in self.indices[k].iter().zip(&self.values[k]) {
            p += Vector3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2]) * v;
        }
        p
    }
}

/// Locates the collocation points of `model` in `patch`.
pub fn bind_centerline(patch: &Patch<3>, model: &BeamModel) -> Result<BoundCenterline> {
    let tol = 1e-10 * patch.diameter();
    let mid = (patch.param_lower() + patch.param_upper()) * 0.5;
    let mut out = BoundCenterline { arclength: Vec::new(), params: Vec::new(), indices: Vec::new(), values: Vec::new() };
    let mut guess = mid;
    for &s in &model.points {
        let target = model.reference_position(s);
        let fail = |reason: String| Error::Embedding { arclength: s, reason };
        let xi = patch
            .invert_point(&target, &guess)
            .or_else(|_| patch.invert_point(&target, &mid))
            .map_err(|e| fail(e.to_string()))?;
        let back = patch.map_point(&xi)?;
        if (back - target).norm() > tol {
            return Err(fail(format!("point {:?} is outside the host patch", target.as_slice())));
        }
        let ev = patch.evaluate(&xi)?;
        out.arclength.push(s);
        out.params.push(xi);
        out.indices.push(ev.indices);
        out.values.push(ev.values);
        guess = xi;
    }
    Ok(out)
}

/// Coupling rows `φ(s_k) - x(X_c(s_k))`, three per point.
pub fn coupling_constraints(bound: &BoundCenterline, x: &[f64], phi: &[Vector3<f64>]) -> Vec<f64> {
    phi.iter().enumerate().flat_map(|(k, p)| (p - bound.matrix_point(k, x)).iter().copied().collect::<Vec<_>>()).collect()
}

/// Point loads `λ_k` at `X_c(s_k)` distributed to the control points.
pub fn transfer_loads(bound: &BoundCenterline, num_control_points: usize, loads: &[Vector3<f64>]) -> Vec<f64> {
    let mut f = vec![0.0; 3 * num_control_points];
    for (k, lam) in loads.iter().enumerate() {
        for (&i, &v) in bound.indices[k].iter().zip(&bound.values[k]) {
            for c in 0..3 {
                f[3 * i + c] += v * lam[c];
            }
        }
    }
    f
}

/// Matrix block with one embedded fiber, clamped on the face `z = z_min`.
#[derive(Debug, Clone)]
pub struct EmbeddedProblem {
    pub patch: Patch<3>,
    pub material: Material,
    pub beam: BeamModel,
    pub bound: BoundCenterline,
    pub end: EndLoad,
    reference: Vec<f64>,
    fixed: Vec<bool>,
    /// Collocation matrix `A[k][j] = B_j(s_k)` of the centerline space.
    colloc: DMatrix<f64>,
    colloc_inv: Option<DMatrix<f64>>,
    /// `G[j][i] = ∫ B_j' N_i ds`.
    galerkin: DMatrix<f64>,
    /// `λ_k = Σ_i T[k][i] n_i` when the centerline is eliminated.
    transfer: Option<DMatrix<f64>>,
}

/// Unknown arrangement of the coupled system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Formulation {
    /// `[x | φ | q | n | m | λ]`.
    Full,
    /// `[x | q | n | m]` with `φ` interpolated from the matrix and `λ` eliminated.
    Condensed,
}

impl EmbeddedProblem {
    pub fn new(patch: Patch<3>, material: Material, fiber: &FiberEmbedding, end_moment: Vector3<f64>) -> Result<Self> {
        if material.kind != MaterialKind::SaintVenantKirchhoff {
            return Err(Error::Configuration("embedded matrix must use the saint-venant-kirchhoff material".into()));
        }
        let beam = fiber.model()?;
        let bound = bind_centerline(&patch, &beam)?;
        let reference: Vec<f64> = patch.control_points().iter().flat_map(|p| p.iter().copied().collect::<Vec<_>>()).collect();
        let mut fixed = vec![false; reference.len()];
        for i in patch.face_indices(2, false) {
            for c in 0..3 {
                fixed[3 * i + c] = true;
            }
        }
        let kv = beam.kin.knot_vector();
        let colloc = kv.collocation_matrix(&beam.points, 0)?;
        let colloc_inv = colloc.clone().lu().try_inverse().filter(|inv| {
            let defect = (&colloc * inv - DMatrix::<f64>::identity(colloc.nrows(), colloc.nrows())).amax();
            defect < 1e-10
        });
        let galerkin = galerkin_matrix(&beam)?;
        let transfer = colloc_inv.as_ref().map(|inv| inv.transpose() * &galerkin);
        Ok(Self {
            patch,
            material,
            beam,
            bound,
            end: EndLoad { force: Vector3::zeros(), moment: end_moment, torsion_gauge: true },
            reference,
            fixed,
            colloc,
            colloc_inv,
            galerkin,
            transfer,
        })
    }

    pub fn num_matrix_dofs(&self) -> usize {
        self.reference.len()
    }

    /// False if the centerline space is not interpolatory at the collocation
    /// points; the condensed formulation is then unavailable.
    pub fn condensable(&self) -> bool {
        self.colloc_inv.is_some()
    }

    pub fn system(&self, formulation: Formulation) -> Result<EmbeddedSystem<'_>> {
        if formulation == Formulation::Condensed && !self.condensable() {
            return Err(Error::Condensation("centerline space is not interpolatory at the collocation points".into()));
        }
        let nx = self.num_matrix_dofs();
        let nb = self.beam.num_coefficients();
        let layout = match formulation {
            Formulation::Full => BeamLayout::standard(nx, nb),
            Formulation::Condensed => BeamLayout { phi: None, q: nx, n: nx + 4 * nb, m: nx + 7 * nb },
        };
        let npts = self.beam.num_points();
        let jets: Vec<Jet> = match formulation {
            Formulation::Full => (0..npts).map(|k| self.beam.jet(k, &layout, None)).collect(),
            Formulation::Condensed => {
                let inv = self.colloc_inv.as_ref().expect("condensable");
                let deriv = self.beam.kin.knot_vector().collocation_matrix(&self.beam.points, 1)?;
                let w = deriv * inv;
                (0..npts)
                    .map(|k| {
                        let value: [LinForm; 3] = std::array::from_fn(|c| self.point_form(&[(k, 1.0)], c));
                        let weights: Vec<(usize, f64)> = (0..npts).map(|l| (l, w[(k, l)])).collect();
                        let slope: [LinForm; 3] = std::array::from_fn(|c| self.point_form(&weights, c));
                        self.beam.jet(k, &layout, Some((value, slope)))
                    })
                    .collect()
            }
        };
        let size = match formulation {
            Formulation::Full => nx + 16 * nb,
            Formulation::Condensed => nx + 10 * nb,
        };
        Ok(EmbeddedSystem { problem: self, formulation, layout, jets, size })
    }

    /// Linear form of component `c` of `Σ_k w_k x(X_c(s_k))` over matrix positions.
    fn point_form(&self, weights: &[(usize, f64)], c: usize) -> LinForm {
        let mut acc = std::collections::BTreeMap::new();
        for &(k, wk) in weights {
            if wk == 0.0 {
                continue;
            }
            for (&i, &v) in self.bound.indices[k].iter().zip(&self.bound.values[k]) {
                *acc.entry(3 * i + c).or_insert(0.0) += wk * v;
            }
        }
        acc.into_iter().collect()
    }

    /// Reference state of the given formulation.
    pub fn initial_state(&self, formulation: Formulation) -> Vec<f64> {
        let beam = self.beam.reference_state();
        let nb = self.beam.num_coefficients();
        let mut x = self.reference.clone();
        match formulation {
            Formulation::Full => {
                x.extend_from_slice(&beam);
                x.extend(std::iter::repeat(0.0).take(3 * nb));
            }
            Formulation::Condensed => x.extend_from_slice(&beam[3 * nb..]),
        }
        x
    }

    /// Centerline coefficients `A⁻¹ (x(X_c(s_k)))_k` of a condensed state.
    fn interpolated_centerline(&self, x: &[f64]) -> Vec<f64> {
        let inv = self.colloc_inv.as_ref().expect("condensable");
        let npts = self.beam.num_points();
        let vals: Vec<Vector3<f64>> = (0..npts).map(|k| self.bound.matrix_point(k, x)).collect();
        let mut out = vec![0.0; 3 * npts];
        for j in 0..npts {
            for k in 0..npts {
                for c in 0..3 {
                    out[3 * j + c] += inv[(j, k)] * vals[k][c];
                }
            }
        }
        out
    }

    /// Expands a condensed state to the full unknown vector `[x | φ | q | n | m | λ]`.
    pub fn expand(&self, condensed: &[f64]) -> Vec<f64> {
        let nx = self.num_matrix_dofs();
        let nb = self.beam.num_coefficients();
        let mut full = condensed[..nx].to_vec();
        full.extend(self.interpolated_centerline(condensed));
        full.extend_from_slice(&condensed[nx..]);
        let lam = self.condensed_loads(condensed);
        full.extend(lam.iter().flat_map(|l| l.iter().copied().collect::<Vec<_>>()));
        debug_assert_eq!(full.len(), nx + 16 * nb);
        full
    }

    fn stress_coefficients(&self, x: &[f64], layout: &BeamLayout) -> Vec<Vector3<f64>> {
        (0..self.beam.stress.num_basis()).map(|i| Vector3::new(x[layout.n + 3 * i], x[layout.n + 3 * i + 1], x[layout.n + 3 * i + 2])).collect()
    }

    fn condensed_loads(&self, x: &[f64]) -> Vec<Vector3<f64>> {
        let t = self.transfer.as_ref().expect("condensable");
        let nx = self.num_matrix_dofs();
        let nb = self.beam.num_coefficients();
        let n = self.stress_coefficients(x, &BeamLayout { phi: None, q: nx, n: nx + 4 * nb, m: nx + 7 * nb });
        (0..t.nrows()).map(|k| (0..t.ncols()).map(|i| n[i] * t[(k, i)]).sum()).collect()
    }

    /// Displacements of the matrix control points.
    pub fn matrix_displacement(&self, x: &[f64]) -> Vec<f64> {
        x[..self.reference.len()].iter().zip(&self.reference).map(|(a, b)| a - b).collect()
    }
}

fn galerkin_matrix(beam: &BeamModel) -> Result<DMatrix<f64>> {
    let (kin, stress) = (&beam.kin, &beam.stress);
    let mut breaks: Vec<f64> = kin.knot_vector().breakpoints();
    breaks.extend(stress.knot_vector().breakpoints());
    breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite knots"));
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-14 * beam.length);
    let (gp, gw) = gauss_legendre(kin.degree() + stress.degree());
    let mut g = DMatrix::zeros(kin.num_basis(), stress.num_basis());
    for cell in breaks.windows(2) {
        let (a, b) = (cell[0], cell[1]);
        for (t, w) in gp.iter().zip(&gw) {
            let s = 0.5 * (a + b) + 0.5 * (b - a) * t;
            let jw = 0.5 * (b - a) * w;
            let kb = kin.eval(s, 1)?;
            let sb = stress.eval(s, 0)?;
            for (ja, &dj) in kb.ders[1].iter().enumerate() {
                for (ia, &ni) in sb.ders[0].iter().enumerate() {
                    g[(kb.first + ja, sb.first + ia)] += jw * dj * ni;
                }
            }
        }
    }
    Ok(g)
}

/// Residual of the coupled problem in one formulation.
pub struct EmbeddedSystem<'a> {
    pub problem: &'a EmbeddedProblem,
    pub formulation: Formulation,
    pub layout: BeamLayout,
    jets: Vec<Jet>,
    size: usize,
}

impl EmbeddedSystem<'_> {
    fn lambda_offset(&self) -> usize {
        self.problem.num_matrix_dofs() + 13 * self.problem.beam.num_coefficients()
    }

    fn evaluate(&self, x: &[f64], load: f64, jacobian: bool) -> Result<(Vec<f64>, Vec<(usize, usize, f64)>)> {
        let pb = self.problem;
        let nx = pb.num_matrix_dofs();
        let npts = pb.beam.num_points();
        let u = pb.matrix_displacement(x);
        let (mut res, mut trip) = if jacobian {
            let (r, k) = assemble_internal(&pb.patch, &pb.material, &u)?;
            let t: Vec<(usize, usize, f64)> = k.triplets().into_iter().filter(|&(i, _, _)| !pb.fixed[i]).collect();
            (r, t)
        } else {
            (internal_forces(&pb.patch, &pb.material, &u)?, Vec::new())
        };
        // point loads on the matrix
        let loads: Vec<Vector3<f64>> = match self.formulation {
            Formulation::Full => {
                let off = self.lambda_offset();
                (0..npts).map(|k| Vector3::new(x[off + 3 * k], x[off + 3 * k + 1], x[off + 3 * k + 2])).collect()
            }
            Formulation::Condensed => pb.condensed_loads(x),
        };
        let f = transfer_loads(&pb.bound, nx / 3, &loads);
        for (r, v) in res.iter_mut().zip(&f) {
            *r += v;
        }
        if jacobian {
            match self.formulation {
                Formulation::Full => {
                    let off = self.lambda_offset();
                    for k in 0..npts {
                        for (&i, &v) in pb.bound.indices[k].iter().zip(&pb.bound.values[k]) {
                            for c in 0..3 {
                                trip.push((3 * i + c, off + 3 * k + c, v));
                            }
                        }
                    }
                }
                Formulation::Condensed => {
                    let t = pb.transfer.as_ref().expect("condensable");
                    let mut h = std::collections::BTreeMap::<(usize, usize), f64>::new();
                    for k in 0..npts {
                        for (&a, &v) in pb.bound.indices[k].iter().zip(&pb.bound.values[k]) {
                            for i in 0..t.ncols() {
                                *h.entry((a, i)).or_insert(0.0) += v * t[(k, i)];
                            }
                        }
                    }
                    for ((a, i), v) in h {
                        for c in 0..3 {
                            trip.push((3 * a + c, self.layout.n + 3 * i + c, v));
                        }
                    }
                }
            }
        }
        for (i, r) in res.iter_mut().enumerate() {
            if pb.fixed[i] {
                *r = x[i] - pb.reference[i];
            }
        }
        if jacobian {
            trip.retain(|&(i, _, _)| !pb.fixed[i]);
            trip.extend((0..nx).filter(|&i| pb.fixed[i]).map(|i| (i, i, 1.0)));
        }
        let mut sink = RowSink::new(jacobian);
        if self.formulation == Formulation::Full {
            let off = self.lambda_offset();
            let nb = pb.beam.num_coefficients();
            // Aᵀ λ = G n
            let n = pb.stress_coefficients(x, &self.layout);
            let forms_lam: Vec<LinForm> = (0..3 * npts).map(|r| vec![(off + r, 1.0)]).collect();
            let forms_n: Vec<LinForm> = (0..3 * pb.beam.stress.num_basis()).map(|r| vec![(self.layout.n + r, 1.0)]).collect();
            for j in 0..nb {
                for c in 0..3 {
                    let mut value = 0.0;
                    let mut terms: Vec<(&LinForm, f64)> = Vec::new();
                    for k in 0..npts {
                        let a = pb.colloc[(k, j)];
                        if a != 0.0 {
                            value += a * x[off + 3 * k + c];
                            terms.push((&forms_lam[3 * k + c], a));
                        }
                    }
                    for (i, ni) in n.iter().enumerate() {
                        let g = pb.galerkin[(j, i)];
                        if g != 0.0 {
                            value -= g * ni[c];
                            terms.push((&forms_n[3 * i + c], -g));
                        }
                    }
                    sink.push(value, 1.0, &terms);
                }
            }
            // φ(s_k) = x(X_c(s_k))
            for (k, jet) in self.jets.iter().enumerate() {
                let xm = pb.bound.matrix_point(k, x);
                for c in 0..3 {
                    let phi: f64 = jet.phi[c].iter().map(|&(col, w)| w * x[col]).sum();
                    let xf = pb.point_form(&[(k, 1.0)], c);
                    let terms: Vec<(&LinForm, f64)> = vec![(&jet.phi[c], 1.0), (&xf, -1.0)];
                    sink.push(phi - xm[c], 1.0, &terms);
                }
            }
        }
        pb.beam.rotation_rows(x, &self.jets, StartCondition::Free, &pb.end, load, &mut sink);
        let base = res.len();
        res.extend(sink.residual);
        trip.extend(sink.triplets.into_iter().map(|(i, j, v)| (base + i, j, v)));
        debug_assert_eq!(res.len(), self.size);
        Ok((res, trip))
    }

    /// Beam tip displacement `φ(L) - X_c(L)`.
    pub fn tip_displacement(&self, x: &[f64]) -> Result<Vector3<f64>> {
        let pb = self.problem;
        let last = pb.beam.num_points() - 1;
        let tip = match self.formulation {
            Formulation::Full => pb.beam.position(x, &self.layout, pb.beam.length)?,
            Formulation::Condensed => pb.bound.matrix_point(last, x),
        };
        Ok(tip - pb.beam.reference_position(pb.beam.length))
    }

    /// `max_k |φ(s_k) - x(X_c(s_k))|`.
    pub fn constraint_violation(&self, x: &[f64]) -> Result<f64> {
        let pb = self.problem;
        let (state, layout) = match self.formulation {
            Formulation::Full => (x.to_vec(), self.layout),
            Formulation::Condensed => (pb.expand(x), BeamLayout::standard(pb.num_matrix_dofs(), pb.beam.num_coefficients())),
        };
        let mut worst: f64 = 0.0;
        for (k, &s) in pb.beam.points.iter().enumerate() {
            let phi = pb.beam.position(&state, &layout, s)?;
            worst = worst.max((phi - pb.bound.matrix_point(k, &state)).norm());
        }
        Ok(worst)
    }

    /// Loads `λ_k` acting on the matrix.
    pub fn coupling_loads(&self, x: &[f64]) -> Vec<Vector3<f64>> {
        match self.formulation {
            Formulation::Full => {
                let off = self.lambda_offset();
                (0..self.problem.beam.num_points()).map(|k| Vector3::new(x[off + 3 * k], x[off + 3 * k + 1], x[off + 3 * k + 2])).collect()
            }
            Formulation::Condensed => self.problem.condensed_loads(x),
        }
    }

    /// Beam state `[φ | q | n | m]` extracted from `x`.
    pub fn beam_state(&self, x: &[f64]) -> Vec<f64> {
        let pb = self.problem;
        let nx = pb.num_matrix_dofs();
        let nb = pb.beam.num_coefficients();
        match self.formulation {
            Formulation::Full => x[nx..nx + 13 * nb].to_vec(),
            Formulation::Condensed => {
                let mut out = pb.interpolated_centerline(x);
                out.extend_from_slice(&x[nx..nx + 10 * nb]);
                out
            }
        }
    }
}

impl NonlinearSystem for EmbeddedSystem<'_> {
    fn size(&self) -> usize {
        self.size
    }

    fn residual(&self, x: &[f64], load: f64) -> Result<Vec<f64>> {
        Ok(self.evaluate(x, load, false)?.0)
    }

    fn jacobian(&self, x: &[f64], load: f64) -> Result<CsrMatrix> {
        let (_, trip) = self.evaluate(x, load, true)?;
        Ok(CsrMatrix::from_triplets(self.size, self.size, &trip))
    }
}

/// Matrix block `[0, w] × [0, w] × [0, h]` with `n × n × ratio·n` elements.
pub fn matrix_block(degrees: [usize; 3], n: usize, ratio: usize, width: f64, height: f64) -> Result<Patch<3>> {
    Patch::block(degrees, [n, n, ratio * n], [0.0; 3], [width, width, height])
}
