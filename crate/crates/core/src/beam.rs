//! Geometrically exact Simo–Reissner beam discretized by isogeometric
//! collocation with independent force and moment fields.

use nalgebra::{Matrix3, Matrix3x4, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solver::NonlinearSystem;
use crate::sparse::CsrMatrix;
use crate::spline::{BasisValues, SplineSpace};

/// Circular cross-section of radius `r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamSection {
    pub young_modulus_pa: f64,
    pub poisson_ratio: f64,
    pub radius_m: f64,
}

impl BeamSection {
    pub fn new(young_modulus_pa: f64, poisson_ratio: f64, radius_m: f64) -> Result<Self> {
        let s = Self { young_modulus_pa, poisson_ratio, radius_m };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.young_modulus_pa > 0.0 && self.radius_m > 0.0 && self.poisson_ratio > -1.0 && self.poisson_ratio < 0.5) {
            return Err(Error::Configuration(format!("invalid beam section {self:?}")));
        }
        Ok(())
    }

    pub fn shear_modulus(&self) -> f64 {
        self.young_modulus_pa / (2.0 * (1.0 + self.poisson_ratio))
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.radius_m.powi(2)
    }

    pub fn inertia(&self) -> f64 {
        std::f64::consts::PI * self.radius_m.powi(4) / 4.0
    }

    pub fn polar(&self) -> f64 {
        std::f64::consts::PI * self.radius_m.powi(4) / 2.0
    }

    pub fn circumference(&self) -> f64 {
        2.0 * std::f64::consts::PI * self.radius_m
    }

    /// `diag(GA, GA, EA)`; shear correction factors are one.
    pub fn k1(&self) -> Vector3<f64> {
        let (ga, ea) = (self.shear_modulus() * self.area(), self.young_modulus_pa * self.area());
        Vector3::new(ga, ga, ea)
    }

    /// `diag(EI, EI, GJ)`.
    pub fn k2(&self) -> Vector3<f64> {
        let ei = self.young_modulus_pa * self.inertia();
        Vector3::new(ei, ei, self.shear_modulus() * self.polar())
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Axial vector of the skew part of `a`.
fn axl_skew(a: &Matrix3<f64>) -> Vector3<f64> {
    0.5 * Vector3::new(a[(2, 1)] - a[(1, 2)], a[(0, 2)] - a[(2, 0)], a[(1, 0)] - a[(0, 1)])
}

/// Quadratic quaternion map `(q4² - v·v) I + 2 v vᵀ + 2 q4 [v]×`, `v = (q1, q2, q3)`;
/// a rotation for unit `q`.
pub fn rotation_raw(q: &Vector4<f64>) -> Matrix3<f64> {
    let v = Vector3::new(q[0], q[1], q[2]);
    Matrix3::identity() * (q[3] * q[3] - v.dot(&v)) + v * v.transpose() * 2.0 + skew(&v) * (2.0 * q[3])
}

/// Partial derivatives `∂R/∂q_i` of [`rotation_raw`].
pub fn rotation_partials(q: &Vector4<f64>) -> [Matrix3<f64>; 4] {
    let v = Vector3::new(q[0], q[1], q[2]);
    let mut out = [Matrix3::zeros(); 4];
    for a in 0..3 {
        let e = Vector3::ith(a, 1.0);
        out[a] = Matrix3::identity() * (-2.0 * v[a]) + (e * v.transpose() + v * e.transpose()) * 2.0 + skew(&e) * (2.0 * q[3]);
    }
    out[3] = Matrix3::identity() * (2.0 * q[3]) + skew(&v) * 2.0;
    out
}

/// Constant second derivatives `∂²R/∂q_i∂q_j`.
fn rotation_second(i: usize, j: usize) -> Matrix3<f64> {
    match (i, j) {
        (3, 3) => Matrix3::identity() * 2.0,
        (a, 3) | (3, a) => skew(&Vector3::ith(a, 1.0)) * 2.0,
        (a, b) => {
            let (ea, eb) = (Vector3::<f64>::ith(a, 1.0), Vector3::<f64>::ith(b, 1.0));
            let diag = if a == b { -2.0 } else { 0.0 };
            Matrix3::identity() * diag + (ea * eb.transpose() + eb * ea.transpose()) * 2.0
        }
    }
}

/// Rotation of a (normalized) quaternion `(q1, q2, q3, q4)`, `q4` scalar.
pub fn quat_to_rotation(q: &Vector4<f64>) -> Result<Matrix3<f64>> {
    let n = q.norm();
    if n < 1e-12 {
        return Err(Error::Domain("degenerate quaternion".into()));
    }
    Ok(rotation_raw(&(q / n)))
}

/// Curvature `axl(skew(RᵀR'))` with its derivatives w.r.t. `q` and `q'`.
pub fn curvature(q: &Vector4<f64>, dq: &Vector4<f64>) -> (Vector3<f64>, Matrix3x4<f64>, Matrix3x4<f64>) {
    let r = rotation_raw(q);
    let ri = rotation_partials(q);
    let rp: Matrix3<f64> = (0..4).map(|i| ri[i] * dq[i]).sum();
    let kappa = axl_skew(&(r.transpose() * rp));
    let mut d_q = Matrix3x4::zeros();
    let mut d_dq = Matrix3x4::zeros();
    for i in 0..4 {
        let rpi: Matrix3<f64> = (0..4).map(|j| rotation_second(i, j) * dq[j]).sum();
        d_q.set_column(i, &axl_skew(&(ri[i].transpose() * rp + r.transpose() * rpi)));
        d_dq.set_column(i, &axl_skew(&(r.transpose() * ri[i])));
    }
    (kappa, d_q, d_dq)
}

/// Strain measures `ε = Rᵀφ' - D3`, `κ = axl(RᵀR')` from pointwise values.
pub fn strains_local(d3: &Vector3<f64>, dphi: &Vector3<f64>, q: &Vector4<f64>, dq: &Vector4<f64>) -> (Vector3<f64>, Vector3<f64>) {
    let r = rotation_raw(q);
    (r.transpose() * dphi - d3, curvature(q, dq).0)
}

/// Sparse linear functional `Σ w · x[col]`.
pub type LinForm = Vec<(usize, f64)>;

fn eval_form(f: &LinForm, x: &[f64]) -> f64 {
    f.iter().map(|&(c, w)| w * x[c]).sum()
}

/// Residual rows and Jacobian triplets under construction.
#[derive(Debug, Default)]
pub struct RowSink {
    pub residual: Vec<f64>,
    pub triplets: Vec<(usize, usize, f64)>,
    pub jacobian: bool,
}

impl RowSink {
    pub fn new(jacobian: bool) -> Self {
        Self { residual: Vec::new(), triplets: Vec::new(), jacobian }
    }

    /// Appends one row with value `value * scale` and derivative
    /// `scale · Σ partial · form`.
    pub fn push(&mut self, value: f64, scale: f64, terms: &[(&LinForm, f64)]) {
        let row = self.residual.len();
        self.residual.push(value * scale);
        if self.jacobian {
            for (form, partial) in terms {
                if *partial != 0.0 {
                    for &(c, w) in form.iter() {
                        self.triplets.push((row, c, scale * partial * w));
                    }
                }
            }
        }
    }
}

/// Local quantities at one collocation point as linear forms of the unknowns.
#[derive(Debug, Clone)]
pub struct Jet {
    pub phi: [LinForm; 3],
    pub dphi: [LinForm; 3],
    pub q: [LinForm; 4],
    pub dq: [LinForm; 4],
    pub n: [LinForm; 3],
    pub dn: [LinForm; 3],
    pub m: [LinForm; 3],
    pub dm: [LinForm; 3],
}

struct JetValues {
    phi: Vector3<f64>,
    dphi: Vector3<f64>,
    q: Vector4<f64>,
    dq: Vector4<f64>,
    n: Vector3<f64>,
    dn: Vector3<f64>,
    m: Vector3<f64>,
    dm: Vector3<f64>,
}

impl Jet {
    fn values(&self, x: &[f64]) -> JetValues {
        let v3 = |f: &[LinForm; 3]| Vector3::new(eval_form(&f[0], x), eval_form(&f[1], x), eval_form(&f[2], x));
        let v4 = |f: &[LinForm; 4]| Vector4::from_fn(|i, _| eval_form(&f[i], x));
        JetValues {
            phi: v3(&self.phi),
            dphi: v3(&self.dphi),
            q: v4(&self.q),
            dq: v4(&self.dq),
            n: v3(&self.n),
            dn: v3(&self.dn),
            m: v3(&self.m),
            dm: v3(&self.dm),
        }
    }
}

/// Offsets of the beam unknown blocks in a global vector. `phi` is `None`
/// when the centerline is eliminated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BeamLayout {
    pub phi: Option<usize>,
    pub q: usize,
    pub n: usize,
    pub m: usize,
}

impl BeamLayout {
    /// `[φ | q | n | m]` starting at `offset`.
    pub fn standard(offset: usize, n: usize) -> Self {
        Self { phi: Some(offset), q: offset + 3 * n, n: offset + 7 * n, m: offset + 10 * n }
    }
}

/// Condition at `s = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StartCondition {
    /// `φ(0) = X(0)` and `q_{1,2,3}(0) = 0`.
    Clamped,
    /// `m(0) = 0`; force rows are supplied elsewhere.
    Free,
}

/// Loads at `s = L`, scaled by the load factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EndLoad {
    pub force: Vector3<f64>,
    pub moment: Vector3<f64>,
    /// Replace the third moment row by `m_3(L) = d_1 · D_2`.
    pub torsion_gauge: bool,
}

/// Beam discretization: kinematic space for `φ` and `q`, stress space for
/// `n` and `m`, collocation points at the Greville abscissae of the
/// kinematic space.
#[derive(Debug, Clone)]
pub struct BeamModel {
    pub section: BeamSection,
    pub length: f64,
    pub origin: Vector3<f64>,
    /// Columns `D1, D2, D3`; `D3` is the reference tangent.
    pub directors: Matrix3<f64>,
    pub kin: SplineSpace,
    pub stress: SplineSpace,
    pub points: Vec<f64>,
    kin_basis: Vec<BasisValues>,
    stress_basis: Vec<BasisValues>,
}

impl BeamModel {
    pub fn new(
        section: BeamSection,
        length: f64,
        origin: Vector3<f64>,
        directors: Matrix3<f64>,
        elements: usize,
        kin_degree: usize,
        stress_degree: usize,
    ) -> Result<Self> {
        section.validate()?;
        if !(length > 0.0) || elements == 0 {
            return Err(Error::Configuration("beam needs positive length and at least one element".into()));
        }
        if (directors.transpose() * directors - Matrix3::identity()).amax() > 1e-10 || directors.determinant() < 0.0 {
            return Err(Error::Configuration("beam directors must form a right-handed orthonormal triad".into()));
        }
        if kin_degree < 2 || stress_degree < 1 || stress_degree > kin_degree {
            return Err(Error::Configuration("beam degrees need kinematic >= 2 and 1 <= stress <= kinematic".into()));
        }
        let kin = SplineSpace::uniform(kin_degree, elements, 0.0, length)?;
        let n = kin.num_basis();
        let stress_elements = n - stress_degree;
        let stress = SplineSpace::uniform(stress_degree, stress_elements, 0.0, length)?;
        let points = kin.knot_vector().greville();
        let kin_basis = points.iter().map(|&s| kin.eval(s, 1)).collect::<Result<Vec<_>>>()?;
        let stress_basis = points.iter().map(|&s| stress.eval(s, 1)).collect::<Result<Vec<_>>>()?;
        Ok(Self { section, length, origin, directors, kin, stress, points, kin_basis, stress_basis })
    }

    /// Number of coefficients of every field component.
    pub fn num_coefficients(&self) -> usize {
        self.kin.num_basis()
    }

    pub fn num_points(&self) -> usize {
        self.points.len()
    }

    /// Size of the standalone unknown vector `[φ | q | n | m]`.
    pub fn num_unknowns(&self) -> usize {
        13 * self.num_coefficients()
    }

    pub fn d(&self, i: usize) -> Vector3<f64> {
        self.directors.column(i).into_owned()
    }

    pub fn reference_position(&self, s: f64) -> Vector3<f64> {
        self.origin + self.d(2) * s
    }

    fn c1(&self) -> Matrix3<f64> {
        self.directors * Matrix3::from_diagonal(&self.section.k1()) * self.directors.transpose()
    }

    fn c2(&self) -> Matrix3<f64> {
        self.directors * Matrix3::from_diagonal(&self.section.k2()) * self.directors.transpose()
    }

    fn force_scale(&self) -> f64 {
        1.0 / self.section.k1()[2]
    }

    fn moment_scale(&self) -> f64 {
        self.length / self.section.k2()[0]
    }

    /// Reference configuration: straight centerline, identity rotation,
    /// zero stress resultants.
    pub fn reference_state(&self) -> Vec<f64> {
        let n = self.num_coefficients();
        let mut x = vec![0.0; 13 * n];
        for (j, g) in self.kin.knot_vector().greville().iter().enumerate() {
            let p = self.reference_position(*g);
            for c in 0..3 {
                x[3 * j + c] = p[c];
            }
            x[3 * n + 4 * j + 3] = 1.0;
        }
        x
    }

    /// Jet at collocation point `k`; `phi_forms` overrides `(φ, φ')` when
    /// the centerline is not an unknown.
    pub fn jet(&self, k: usize, layout: &BeamLayout, phi_forms: Option<([LinForm; 3], [LinForm; 3])>) -> Jet {
        let kb = &self.kin_basis[k];
        let sb = &self.stress_basis[k];
        let form = |b: &BasisValues, order: usize, off: usize, stride: usize, c: usize| -> LinForm {
            b.ders[order].iter().enumerate().map(|(a, &w)| (off + stride * (b.first + a) + c, w)).collect()
        };
        let (phi, dphi) = match (phi_forms, layout.phi) {
            (Some(f), _) => f,
            (None, Some(off)) => (
                std::array::from_fn(|c| form(kb, 0, off, 3, c)),
                std::array::from_fn(|c| form(kb, 1, off, 3, c)),
            ),
            (None, None) => panic!("beam jet needs centerline forms"),
        };
        Jet {
            phi,
            dphi,
            q: std::array::from_fn(|c| form(kb, 0, layout.q, 4, c)),
            dq: std::array::from_fn(|c| form(kb, 1, layout.q, 4, c)),
            n: std::array::from_fn(|c| form(sb, 0, layout.n, 3, c)),
            dn: std::array::from_fn(|c| form(sb, 1, layout.n, 3, c)),
            m: std::array::from_fn(|c| form(sb, 0, layout.m, 3, c)),
            dm: std::array::from_fn(|c| form(sb, 1, layout.m, 3, c)),
        }
    }

    /// Force balance rows: clamp at `s = 0`, `n' = 0` inside, `n(L) = t F`.
    pub fn force_rows(&self, x: &[f64], jets: &[Jet], end: &EndLoad, load: f64, sink: &mut RowSink) {
        let last = jets.len() - 1;
        let fs = self.force_scale();
        for (k, jet) in jets.iter().enumerate() {
            let v = jet.values(x);
            for c in 0..3 {
                if k == 0 {
                    let x0 = self.reference_position(0.0);
                    sink.push(v.phi[c] - x0[c], 1.0 / self.length, &[(&jet.phi[c], 1.0)]);
                } else if k == last {
                    sink.push(v.n[c] - load * end.force[c], fs, &[(&jet.n[c], 1.0)]);
                } else {
                    sink.push(v.dn[c], fs * self.length, &[(&jet.dn[c], 1.0)]);
                }
            }
        }
    }

    /// Moment balance, constitutive and unit-quaternion rows at all points.
    pub fn rotation_rows(
        &self,
        x: &[f64],
        jets: &[Jet],
        start: StartCondition,
        end: &EndLoad,
        load: f64,
        sink: &mut RowSink,
    ) {
        let last = jets.len() - 1;
        let (fs, ms) = (self.force_scale(), self.moment_scale());
        let (c1, c2) = (self.c1(), self.c2());
        let (d1, d2, d3) = (self.d(0), self.d(1), self.d(2));
        for (k, jet) in jets.iter().enumerate() {
            let v = jet.values(x);
            let r = rotation_raw(&v.q);
            let ri = rotation_partials(&v.q);
            // moment balance
            if k == 0 {
                match start {
                    StartCondition::Clamped => {
                        for c in 0..3 {
                            sink.push(v.q[c], 1.0, &[(&jet.q[c], 1.0)]);
                        }
                    }
                    StartCondition::Free => {
                        for c in 0..3 {
                            sink.push(v.m[c], ms, &[(&jet.m[c], 1.0)]);
                        }
                    }
                }
            } else if k == last {
                for c in 0..3 {
                    if c == 2 && end.torsion_gauge {
                        let g = (r * d1).dot(&d2);
                        let dg: Vec<f64> = (0..4).map(|i| -(ri[i] * d1).dot(&d2)).collect();
                        let mut terms: Vec<(&LinForm, f64)> = vec![(&jet.m[2], 1.0)];
                        terms.extend((0..4).map(|i| (&jet.q[i], dg[i])));
                        sink.push(v.m[2] - g, ms, &terms);
                    } else {
                        sink.push(v.m[c] - load * end.moment[c], ms, &[(&jet.m[c], 1.0)]);
                    }
                }
            } else {
                let res = v.dm + v.dphi.cross(&v.n);
                let d_dphi = -skew(&v.n);
                let d_n = skew(&v.dphi);
                for c in 0..3 {
                    let mut terms: Vec<(&LinForm, f64)> = vec![(&jet.dm[c], 1.0)];
                    for j in 0..3 {
                        terms.push((&jet.dphi[j], d_dphi[(c, j)]));
                        terms.push((&jet.n[j], d_n[(c, j)]));
                    }
                    sink.push(res[c], ms * self.length, &terms);
                }
            }
            // n = R C1 (Rᵀφ' - D3)
            let eps = r.transpose() * v.dphi - d3;
            let res_n = v.n - r * c1 * eps;
            let d_dphi = -(r * c1 * r.transpose());
            let d_q: Vec<Vector3<f64>> =
                (0..4).map(|i| -(ri[i] * c1 * eps + r * c1 * ri[i].transpose() * v.dphi)).collect();
            for c in 0..3 {
                let mut terms: Vec<(&LinForm, f64)> = vec![(&jet.n[c], 1.0)];
                for j in 0..3 {
                    terms.push((&jet.dphi[j], d_dphi[(c, j)]));
                }
                for i in 0..4 {
                    terms.push((&jet.q[i], d_q[i][c]));
                }
                sink.push(res_n[c], fs, &terms);
            }
            // m = R C2 κ
            let (kappa, dk_q, dk_dq) = curvature(&v.q, &v.dq);
            let res_m = v.m - r * c2 * kappa;
            let rc2 = r * c2;
            for c in 0..3 {
                let mut terms: Vec<(&LinForm, f64)> = vec![(&jet.m[c], 1.0)];
                for i in 0..4 {
                    let dq_i = -(ri[i] * c2 * kappa)[c] - (rc2 * dk_q.column(i))[c];
                    let ddq_i = -(rc2 * dk_dq.column(i))[c];
                    terms.push((&jet.q[i], dq_i));
                    terms.push((&jet.dq[i], ddq_i));
                }
                sink.push(res_m[c], ms, &terms);
            }
            // q·q = 1
            let terms: Vec<(&LinForm, f64)> = (0..4).map(|i| (&jet.q[i], 2.0 * v.q[i])).collect();
            sink.push(v.q.dot(&v.q) - 1.0, 1.0, &terms);
        }
    }

    fn field_values(&self, x: &[f64], layout: &BeamLayout, s: f64) -> Result<JetValues> {
        let kb = self.kin.eval(s, 1)?;
        let sb = self.stress.eval(s, 1)?;
        let comb = |b: &BasisValues, order: usize, off: usize, stride: usize, c: usize| -> f64 {
            b.ders[order].iter().enumerate().map(|(a, &w)| w * x[off + stride * (b.first + a) + c]).sum()
        };
        let phi_off = layout.phi.ok_or_else(|| Error::Internal("centerline coefficients not in state".into()))?;
        Ok(JetValues {
            phi: Vector3::from_fn(|c, _| comb(&kb, 0, phi_off, 3, c)),
            dphi: Vector3::from_fn(|c, _| comb(&kb, 1, phi_off, 3, c)),
            q: Vector4::from_fn(|c, _| comb(&kb, 0, layout.q, 4, c)),
            dq: Vector4::from_fn(|c, _| comb(&kb, 1, layout.q, 4, c)),
            n: Vector3::from_fn(|c, _| comb(&sb, 0, layout.n, 3, c)),
            dn: Vector3::from_fn(|c, _| comb(&sb, 1, layout.n, 3, c)),
            m: Vector3::from_fn(|c, _| comb(&sb, 0, layout.m, 3, c)),
            dm: Vector3::from_fn(|c, _| comb(&sb, 1, layout.m, 3, c)),
        })
    }

    pub fn position(&self, x: &[f64], layout: &BeamLayout, s: f64) -> Result<Vector3<f64>> {
        Ok(self.field_values(x, layout, s)?.phi)
    }

    pub fn quaternion(&self, x: &[f64], layout: &BeamLayout, s: f64) -> Result<Vector4<f64>> {
        Ok(self.field_values(x, layout, s)?.q)
    }

    /// `(ε, κ)` at arclength `s`.
    pub fn strains(&self, x: &[f64], layout: &BeamLayout, s: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let v = self.field_values(x, layout, s)?;
        Ok(strains_local(&self.d(2), &v.dphi, &v.q, &v.dq))
    }

    /// Constitutive `(n, m)` from the kinematic fields at `s`.
    pub fn forces(&self, x: &[f64], layout: &BeamLayout, s: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let (eps, kappa) = self.strains(x, layout, s)?;
        let r = rotation_raw(&self.quaternion(x, layout, s)?);
        Ok((r * self.c1() * eps, r * self.c2() * kappa))
    }

    /// Independent stress fields `(n, m)` at `s`.
    pub fn stress_fields(&self, x: &[f64], layout: &BeamLayout, s: f64) -> Result<(Vector3<f64>, Vector3<f64>)> {
        let v = self.field_values(x, layout, s)?;
        Ok((v.n, v.m))
    }

    /// `max_k ||q(s_k)| - 1|` over the collocation points.
    pub fn unit_defect(&self, x: &[f64], layout: &BeamLayout) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for &s in &self.points {
            worst = worst.max((self.quaternion(x, layout, s)?.norm() - 1.0).abs());
        }
        Ok(worst)
    }
}

/// Cantilever clamped at `s = 0` with end force and moment.
#[derive(Debug, Clone)]
pub struct Cantilever {
    pub model: BeamModel,
    pub end: EndLoad,
    layout: BeamLayout,
    jets: Vec<Jet>,
}

impl Cantilever {
    pub fn new(model: BeamModel, force: Vector3<f64>, moment: Vector3<f64>) -> Self {
        let layout = BeamLayout::standard(0, model.num_coefficients());
        let jets = (0..model.num_points()).map(|k| model.jet(k, &layout, None)).collect();
        Self { model, end: EndLoad { force, moment, torsion_gauge: false }, layout, jets }
    }

    pub fn layout(&self) -> BeamLayout {
        self.layout
    }

    fn rows(&self, x: &[f64], load: f64, jacobian: bool) -> RowSink {
        let mut sink = RowSink::new(jacobian);
        self.model.force_rows(x, &self.jets, &self.end, load, &mut sink);
        self.model.rotation_rows(x, &self.jets, StartCondition::Clamped, &self.end, load, &mut sink);
        sink
    }

    pub fn tip_position(&self, x: &[f64]) -> Result<Vector3<f64>> {
        self.model.position(x, &self.layout, self.model.length)
    }

    /// Rotation angle of the tip about `D1`.
    pub fn tip_rotation(&self, x: &[f64]) -> Result<f64> {
        let q = self.model.quaternion(x, &self.layout, self.model.length)?;
        let axis = self.model.d(0);
        let v = Vector3::new(q[0], q[1], q[2]).dot(&axis);
        Ok(2.0 * v.atan2(q[3]))
    }
}

impl NonlinearSystem for Cantilever {
    fn size(&self) -> usize {
        self.model.num_unknowns()
    }

    fn residual(&self, x: &[f64], load: f64) -> Result<Vec<f64>> {
        Ok(self.rows(x, load, false).residual)
    }

    fn jacobian(&self, x: &[f64], load: f64) -> Result<CsrMatrix> {
        let sink = self.rows(x, load, true);
        let n = self.size();
        Ok(CsrMatrix::from_triplets(n, n, &sink.triplets))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{check_jacobian, solve_incremental, NewtonConfig};
    use std::f64::consts::PI;

    fn quat_mul(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
        let (va, vb) = (Vector3::new(a[0], a[1], a[2]), Vector3::new(b[0], b[1], b[2]));
        let v = vb * a[3] + va * b[3] + va.cross(&vb);
        Vector4::new(v[0], v[1], v[2], a[3] * b[3] - va.dot(&vb))
    }

    fn pseudo(k: usize) -> f64 {
        ((k as f64 * 78.233).sin() * 43758.5453).fract()
    }

    fn unit_q(k: usize) -> Vector4<f64> {
        Vector4::new(pseudo(k), pseudo(k + 1), pseudo(k + 2), pseudo(k + 3) + 0.2).normalize()
    }

    #[test]
    fn rotation_examples() {
        assert_eq!(quat_to_rotation(&Vector4::new(0.0, 0.0, 0.0, 1.0)).unwrap(), Matrix3::identity());
        let h = PI / 4.0;
        let r = quat_to_rotation(&Vector4::new(0.0, 0.0, h.sin(), h.cos())).unwrap();
        let expect = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!((r - expect).amax() < 1e-15);
        for k in 0..20 {
            let r = quat_to_rotation(&(unit_q(k) * 3.0)).unwrap();
            assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-13);
            assert!((r.determinant() - 1.0).abs() < 1e-13);
        }
        assert!(quat_to_rotation(&Vector4::zeros()).is_err());
    }

    #[test]
    fn rotation_matches_quaternion_product() {
        for k in 0..10 {
            let (a, b) = (unit_q(k), unit_q(k + 10));
            let lhs = rotation_raw(&quat_mul(&a, &b));
            assert!((lhs - rotation_raw(&a) * rotation_raw(&b)).amax() < 1e-13);
        }
    }

    #[test]
    fn curvature_derivatives_match_finite_differences() {
        let h = 1e-6;
        for k in 0..10 {
            let q = unit_q(k) * 1.1;
            let dq = Vector4::new(pseudo(k + 20), pseudo(k + 21), pseudo(k + 22), pseudo(k + 23));
            let (_, d_q, d_dq) = curvature(&q, &dq);
            for i in 0..4 {
                let e = Vector4::ith(i, h);
                let fd_q = (curvature(&(q + e), &dq).0 - curvature(&(q - e), &dq).0) / (2.0 * h);
                let fd_dq = (curvature(&q, &(dq + e)).0 - curvature(&q, &(dq - e)).0) / (2.0 * h);
                assert!((fd_q - d_q.column(i)).amax() < 1e-7);
                assert!((fd_dq - d_dq.column(i)).amax() < 1e-7);
            }
        }
    }

    #[test]
    fn strains_of_reference_rigid_and_arc() {
        let d3 = Vector3::z();
        let id = Vector4::new(0.0, 0.0, 0.0, 1.0);
        let (e, k) = strains_local(&d3, &d3, &id, &Vector4::zeros());
        assert_eq!((e.norm(), k.norm()), (0.0, 0.0));
        // rigid rotation
        let q = unit_q(3);
        let (e, k) = strains_local(&d3, &(rotation_raw(&q) * d3), &q, &Vector4::zeros());
        assert!(e.norm() < 1e-14 && k.norm() < 1e-14);
        // arc of radius rho in the D2-D3 plane: R = rot about D1 by s/rho
        let rho: f64 = 2.5;
        for s in [0.0f64, 0.7, 3.0] {
            let th = s / rho;
            let q = Vector4::new((th / 2.0).sin(), 0.0, 0.0, (th / 2.0).cos());
            let dq = Vector4::new((th / 2.0).cos(), 0.0, 0.0, -(th / 2.0).sin()) / (2.0 * rho);
            let dphi = Vector3::new(0.0, -th.sin(), th.cos());
            let (e, k) = strains_local(&d3, &dphi, &q, &dq);
            assert!(e.norm() < 1e-14);
            assert!((k - Vector3::new(1.0 / rho, 0.0, 0.0)).norm() < 1e-14);
        }
    }

    #[test]
    fn objectivity_of_strains() {
        let d3 = Vector3::z();
        for k in 0..10 {
            let q = unit_q(k);
            let dq = Vector4::new(pseudo(k + 5), pseudo(k + 6), pseudo(k + 7), pseudo(k + 8)) * 0.3;
            let dphi = Vector3::new(pseudo(k + 9), pseudo(k + 10), 1.0);
            let qq = unit_q(k + 40);
            let (e0, k0) = strains_local(&d3, &dphi, &q, &dq);
            let (e1, k1) = strains_local(&d3, &(rotation_raw(&qq) * dphi), &quat_mul(&qq, &q), &quat_mul(&qq, &dq));
            assert!((e0 - e1).norm() < 1e-10 && (k0 - k1).norm() < 1e-10);
        }
    }

    fn section() -> BeamSection {
        BeamSection::new(1.0e4, 0.3, 0.05).unwrap()
    }

    fn model(elements: usize) -> BeamModel {
        BeamModel::new(section(), 1.0, Vector3::zeros(), Matrix3::identity(), elements, 3, 2).unwrap()
    }

    #[test]
    fn section_properties_and_force_examples() {
        let s = section();
        let (e, a, i) = (s.young_modulus_pa, s.area(), s.inertia());
        assert!((s.k1()[2] - e * a).abs() < 1e-12);
        assert!((s.k2()[0] - e * i).abs() < 1e-15 && s.k2()[1] == s.k2()[0]);
        assert!((s.polar() - 2.0 * i).abs() < 1e-18);
        assert!((s.circumference() - 2.0 * PI * 0.05).abs() < 1e-15);
        // pure axial strain: n = EA e d3
        let m = model(4);
        let mut x = m.reference_state();
        let lay = BeamLayout::standard(0, m.num_coefficients());
        for j in 0..m.num_coefficients() {
            x[3 * j + 2] *= 1.01;
        }
        let (n, mm) = m.forces(&x, &lay, 0.4).unwrap();
        assert!((n - Vector3::new(0.0, 0.0, e * a * 0.01)).norm() < 1e-9);
        assert!(mm.norm() < 1e-12);
    }

    #[test]
    fn reference_state_has_zero_residual() {
        let c = Cantilever::new(model(6), Vector3::zeros(), Vector3::zeros());
        let x = c.model.reference_state();
        assert!(c.residual(&x, 1.0).unwrap().iter().all(|v| v.abs() < 1e-14));
        assert_eq!(c.residual(&x, 1.0).unwrap().len(), c.size());
        // the embedded variant with the torsion gauge also vanishes
        let mut sink = RowSink::new(false);
        let end = EndLoad { force: Vector3::zeros(), moment: Vector3::zeros(), torsion_gauge: true };
        c.model.rotation_rows(&x, &c.jets, StartCondition::Free, &end, 1.0, &mut sink);
        assert!(sink.residual.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let c = Cantilever::new(model(5), Vector3::new(0.1, -0.2, 0.3), Vector3::new(0.05, 0.02, -0.01));
        let n = c.size();
        let x: Vec<f64> = c.model.reference_state().iter().enumerate().map(|(i, v)| v + 0.05 * pseudo(i)).collect();
        let dirs: Vec<Vec<f64>> = (0..6).map(|d| (0..n).map(|i| pseudo(i * 7 + d)).collect()).collect();
        let err = check_jacobian(&c, &x, 0.7, &dirs, 1e-6).unwrap();
        assert!(err < 1e-6, "{err}");
        let mut end = c.end;
        end.torsion_gauge = true;
        let g = Cantilever { end, ..c.clone() };
        assert!(check_jacobian(&g, &x, 0.7, &dirs, 1e-6).unwrap() < 1e-6);
    }

    fn roll_up(elements: usize, turns: f64, steps: usize) -> (Cantilever, Vec<f64>) {
        let m = model(elements);
        let ei = m.section.k2()[0];
        let moment = 2.0 * PI * turns * ei / m.length;
        let c = Cantilever::new(m, Vector3::zeros(), Vector3::new(moment, 0.0, 0.0));
        let cfg = NewtonConfig { load_steps: steps, abs_tol: 1e-12, ..NewtonConfig::default() };
        let (x, reps) = solve_incremental(&c, &c.model.reference_state(), &cfg).unwrap();
        assert!(reps.iter().all(|r| r.converged));
        (c, x)
    }

    #[test]
    fn quarter_circle_roll_up() {
        let (c, x) = roll_up(32, 0.25, 1);
        let th = c.tip_rotation(&x).unwrap();
        assert!((th - PI / 2.0).abs() / (PI / 2.0) < 1e-4, "{th}");
        let rho = 1.0 / (PI / 2.0);
        let tip = c.tip_position(&x).unwrap();
        let expect = Vector3::new(0.0, -rho * (1.0 - (PI / 2.0).cos()), rho * (PI / 2.0).sin());
        assert!((tip - expect).norm() < 1e-4, "{tip:?}");
        assert!(c.model.unit_defect(&x, &c.layout()).unwrap() < 1e-10);
    }

    #[test]
    fn moment_constant_along_beam() {
        let (c, x) = roll_up(64, 0.25, 1);
        for k in 0..=20 {
            let (_, m) = c.model.stress_fields(&x, &c.layout(), k as f64 / 20.0).unwrap();
            assert!((m - c.end.moment).norm() < 1e-8, "{:e}", (m - c.end.moment).norm());
        }
    }

    #[test]
    fn full_circle_closes() {
        let (c, x) = roll_up(32, 1.0, 8);
        let tip = c.tip_position(&x).unwrap();
        assert!(tip.norm() < 1e-3 * c.model.length, "{tip:?}");
    }

    #[test]
    fn small_axial_force() {
        let m = model(8);
        let ea = m.section.k1()[2];
        let f = 1e-4 * ea;
        let c = Cantilever::new(m, Vector3::new(0.0, 0.0, f), Vector3::zeros());
        let (x, _) = solve_incremental(&c, &c.model.reference_state(), &NewtonConfig::default()).unwrap();
        let u = c.tip_position(&x).unwrap()[2] - 1.0;
        assert!((u - f / ea).abs() < 0.01 * f / ea);
        // zero load: reference state
        let c0 = Cantilever::new(model(8), Vector3::zeros(), Vector3::zeros());
        let (x0, rep) = solve_incremental(&c0, &c0.model.reference_state(), &NewtonConfig::default()).unwrap();
        assert_eq!(rep[0].iterations, 0);
        assert!((c0.tip_position(&x0).unwrap() - Vector3::z()).norm() < 1e-14);
    }
}
