//! Matrix material: Saint-Venant–Kirchhoff in 3D, linear plane strain and
//! Poisson in 2D, Neumann loads and Dirichlet elimination.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, SVector, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::Patch;
use crate::sparse::{assemble, CsrMatrix, ElementContribution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaterialKind {
    Poisson,
    LinearElasticPlaneStrain,
    SaintVenantKirchhoff,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Material {
    pub kind: MaterialKind,
    pub young: f64,
    pub poisson: f64,
}

impl Material {
    pub fn new(kind: MaterialKind, young: f64, poisson: f64) -> Result<Self> {
        if !(young > 0.0) || !(poisson > -1.0 && poisson < 0.5) {
            return Err(Error::Configuration(format!(
                "material needs E > 0 and -1 < nu < 0.5 (E = {young}, nu = {poisson})"
            )));
        }
        Ok(Self { kind, young, poisson })
    }

    /// Lamé parameters `(λ, μ)`.
    pub fn lame(&self) -> (f64, f64) {
        let (e, nu) = (self.young, self.poisson);
        (e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), e / (2.0 * (1.0 + nu)))
    }
}

/// Stress state of a Saint-Venant–Kirchhoff material at one point.
#[derive(Debug, Clone, Copy)]
pub struct SvkState {
    /// First Piola–Kirchhoff stress.
    pub p: Matrix3<f64>,
    /// Second Piola–Kirchhoff stress.
    pub s: Matrix3<f64>,
    /// Strain energy density.
    pub psi: f64,
}

/// `P = F S`, `S = λ tr(E) I + 2μ E`, `E = (FᵀF - I)/2`, `Ψ = E:S/2`.
pub fn svk_stress(mat: &Material, f: &Matrix3<f64>) -> Result<SvkState> {
    let det = f.determinant();
    if !(det > 0.0) {
        return Err(Error::ElementInversion { element: usize::MAX, det });
    }
    let (lambda, mu) = mat.lame();
    let e = 0.5 * (f.transpose() * f - Matrix3::identity());
    let s = Matrix3::identity() * (lambda * e.trace()) + e * (2.0 * mu);
    Ok(SvkState { p: f * s, s, psi: 0.5 * e.component_mul(&s).sum() })
}

/// Tangent block `∂(P G_a)/∂u_b` for reference gradients `G_a`, `G_b`.
pub fn svk_tangent_block(
    mat: &Material,
    f: &Matrix3<f64>,
    s: &Matrix3<f64>,
    ga: &Vector3<f64>,
    gb: &Vector3<f64>,
) -> Matrix3<f64> {
    let (lambda, mu) = mat.lame();
    let va = f * ga;
    let vb = f * gb;
    Matrix3::identity() * ga.dot(&(s * gb)) + va * vb.transpose() * lambda + (f * f.transpose() * ga.dot(gb) + vb * va.transpose()) * mu
}

fn with_element<T>(r: Result<T>, element: usize) -> Result<T> {
    r.map_err(|e| match e {
        Error::ElementInversion { det, .. } => Error::ElementInversion { element, det },
        other => other,
    })
}

/// Internal force vector and tangent of a 3D SVK patch.
///
/// `u` holds control-point displacements, three per control point.
pub fn assemble_internal(patch: &Patch<3>, mat: &Material, u: &[f64]) -> Result<(Vec<f64>, CsrMatrix)> {
    let n = 3 * patch.num_basis();
    if u.len() != n {
        return Err(Error::Configuration(format!("state of length {} for {n} dofs", u.len())));
    }
    let elements = patch.elements();
    let npts = patch.default_points();
    let (k, r) = assemble(n, elements.len(), |ei| {
        let el = &elements[ei];
        let rule = el.gauss(npts);
        let mut dofs: Vec<usize> = Vec::new();
        let mut ke = DMatrix::zeros(0, 0);
        let mut fe = DVector::zeros(0);
        for (q, (pt, w)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let ev = patch.evaluate(pt)?;
            if q == 0 {
                dofs = ev.indices.iter().flat_map(|&i| (0..3).map(move |c| 3 * i + c)).collect();
                ke = DMatrix::zeros(dofs.len(), dofs.len());
                fe = DVector::zeros(dofs.len());
            }
            let mut f = Matrix3::identity();
            for (a, &i) in ev.indices.iter().enumerate() {
                let ua = Vector3::new(u[3 * i], u[3 * i + 1], u[3 * i + 2]);
                f += ua * ev.grads[a].transpose();
            }
            let st = with_element(svk_stress(mat, &f), el.id)?;
            let dv = w * ev.det;
            let (lambda, mu) = mat.lame();
            let ffp = f * f.transpose() * mu;
            let fg: Vec<Vector3<f64>> = ev.grads.iter().map(|g| f * g).collect();
            let sg: Vec<Vector3<f64>> = ev.grads.iter().map(|g| st.s * g).collect();
            for (a, ga) in ev.grads.iter().enumerate() {
                let ra = st.p * ga * dv;
                for c in 0..3 {
                    fe[3 * a + c] += ra[c];
                }
                for b in a..ev.grads.len() {
                    let gb = &ev.grads[b];
                    let (va, vb) = (&fg[a], &fg[b]);
                    let kab = (Matrix3::identity() * ga.dot(&sg[b]) + va * vb.transpose() * lambda + ffp * ga.dot(gb) + vb * va.transpose() * mu) * dv;
                    for i in 0..3 {
                        for j in 0..3 {
                            ke[(3 * a + i, 3 * b + j)] += kab[(i, j)];
                        }
                    }
                }
            }
        }
        for a in 0..dofs.len() / 3 {
            for b in 0..a {
                for i in 0..3 {
                    for j in 0..3 {
                        ke[(3 * a + i, 3 * b + j)] = ke[(3 * b + j, 3 * a + i)];
                    }
                }
            }
        }
        Ok(ElementContribution { dofs, matrix: ke, vector: fe })
    })?;
    Ok((r, k))
}

/// Internal force vector of a 3D SVK patch without the tangent.
pub fn internal_forces(patch: &Patch<3>, mat: &Material, u: &[f64]) -> Result<Vec<f64>> {
    let n = 3 * patch.num_basis();
    if u.len() != n {
        return Err(Error::Configuration(format!("state of length {} for {n} dofs", u.len())));
    }
    let elements = patch.elements();
    let npts = patch.default_points();
    let parts: Vec<(Vec<usize>, Vec<f64>)> = elements
        .par_iter()
        .map(|el| {
            let rule = el.gauss(npts);
            let mut idx = Vec::new();
            let mut fe = Vec::new();
            for (q, (pt, w)) in rule.points.iter().zip(&rule.weights).enumerate() {
                let ev = patch.evaluate(pt)?;
                if q == 0 {
                    idx = ev.indices.clone();
                    fe = vec![0.0; 3 * idx.len()];
                }
                let mut f = Matrix3::identity();
                for (a, &i) in ev.indices.iter().enumerate() {
                    f += Vector3::new(u[3 * i], u[3 * i + 1], u[3 * i + 2]) * ev.grads[a].transpose();
                }
                let p = with_element(svk_stress(mat, &f), el.id)?.p * (w * ev.det);
                for (a, ga) in ev.grads.iter().enumerate() {
                    let ra = p * ga;
                    for c in 0..3 {
                        fe[3 * a + c] += ra[c];
                    }
                }
            }
            Ok((idx, fe))
        })
        .collect::<Result<_>>()?;
    let mut r = vec![0.0; n];
    for (idx, fe) in parts {
        for (a, &i) in idx.iter().enumerate() {
            for c in 0..3 {
                r[3 * i + c] += fe[3 * a + c];
            }
        }
    }
    Ok(r)
}

/// Total strain energy of a 3D SVK patch.
pub fn strain_energy(patch: &Patch<3>, mat: &Material, u: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for el in patch.elements() {
        let rule = el.gauss(patch.default_points());
        for (pt, w) in rule.points.iter().zip(&rule.weights) {
            let ev = patch.evaluate(pt)?;
            let mut f = Matrix3::identity();
            for (a, &i) in ev.indices.iter().enumerate() {
                f += Vector3::new(u[3 * i], u[3 * i + 1], u[3 * i + 2]) * ev.grads[a].transpose();
            }
            total += w * ev.det * with_element(svk_stress(mat, &f), el.id)?.psi;
        }
    }
    Ok(total)
}

/// Measure of the face tangent frame (length in 2D, area element in 3D).
fn face_measure<const D: usize>(jac: &nalgebra::SMatrix<f64, D, D>, dir: usize) -> f64 {
    let cols: Vec<SVector<f64, D>> = (0..D).filter(|&d| d != dir).map(|d| jac.column(d).into_owned()).collect();
    match D {
        2 => cols[0].norm(),
        3 => {
            let a = Vector3::new(cols[0][0], cols[0][1], cols[0][2]);
            let b = Vector3::new(cols[1][0], cols[1][1], cols[1][2]);
            a.cross(&b).norm()
        }
        _ => unimplemented!("faces of {D}-dimensional patches"),
    }
}

/// Quadrature points `(parameter, weight × surface measure)` on a patch face.
pub fn face_quadrature<const D: usize>(
    patch: &Patch<D>,
    dir: usize,
    end: bool,
) -> Result<Vec<(SVector<f64, D>, f64)>> {
    let fixed = if end { patch.param_upper()[dir] } else { patch.param_lower()[dir] };
    let mut out = Vec::new();
    for el in patch.elements() {
        if (if end { el.upper[dir] } else { el.lower[dir] }) != fixed {
            continue;
        }
        let mut n = patch.default_points();
        n[dir] = 1;
        let rule = el.gauss(n);
        for (pt, w) in rule.points.iter().zip(&rule.weights) {
            let mut xi = *pt;
            xi[dir] = fixed;
            // the collapsed direction contributed its element length to w
            let w_face = w / (el.upper[dir] - el.lower[dir]);
            let (jac, _) = patch.jacobian(&xi)?;
            out.push((xi, w_face * face_measure(&jac, dir)));
        }
    }
    Ok(out)
}

/// Consistent load vector of a traction `t(x)` on the face `(dir, end)`.
///
/// Dofs are `ncomp` per control point, interleaved.
pub fn assemble_neumann<const D: usize, F>(
    patch: &Patch<D>,
    dir: usize,
    end: bool,
    ncomp: usize,
    traction: F,
) -> Result<Vec<f64>>
where
    F: Fn(&SVector<f64, D>) -> Vec<f64>,
{
    let mut f = vec![0.0; ncomp * patch.num_basis()];
    for (xi, w) in face_quadrature(patch, dir, end)? {
        let x = patch.map_point(&xi)?;
        let t = traction(&x);
        let b = patch.basis(&xi, 0)?;
        for (&i, v) in b.indices.iter().zip(b.values()) {
            for c in 0..ncomp {
                f[ncomp * i + c] += w * v * t[c];
            }
        }
    }
    Ok(f)
}

/// Prescribed dof values; conflicting assignments are rejected.
#[derive(Debug, Clone, Default)]
pub struct DirichletSet {
    values: BTreeMap<usize, f64>,
}

impl DirichletSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, dof: usize, value: f64) -> Result<()> {
        if let Some(&old) = self.values.get(&dof) {
            if (old - value).abs() > 1e-10 * (1.0 + old.abs().max(value.abs())) {
                return Err(Error::Configuration(format!(
                    "conflicting Dirichlet values {old} and {value} on dof {dof}"
                )));
            }
            return Ok(());
        }
        self.values.insert(dof, value);
        Ok(())
    }

    pub fn contains(&self, dof: usize) -> bool {
        self.values.contains_key(&dof)
    }

    pub fn get(&self, dof: usize) -> Option<f64> {
        self.values.get(&dof).copied()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.values.iter().map(|(&k, &v)| (k, v))
    }

    /// Interpolates `g(x)` at the Greville points of the face `(dir, end)`
    /// for the listed components; `offset` shifts the patch dof numbering.
    pub fn add_face<const D: usize, G>(
        &mut self,
        patch: &Patch<D>,
        dir: usize,
        end: bool,
        ncomp: usize,
        components: &[usize],
        offset: usize,
        g: G,
    ) -> Result<()>
    where
        G: Fn(&SVector<f64, D>) -> Vec<f64>,
    {
        let face = patch.face_indices(dir, end);
        let fixed = if end { patch.param_upper()[dir] } else { patch.param_lower()[dir] };
        let grev: Vec<Vec<f64>> = patch.spaces().iter().map(|s| s.knot_vector().greville()).collect();
        let m = face.len();
        let mut a = DMatrix::zeros(m, m);
        let mut rhs = DMatrix::zeros(m, ncomp);
        let col_of: BTreeMap<usize, usize> = face.iter().enumerate().map(|(k, &i)| (i, k)).collect();
        for (row, &idx) in face.iter().enumerate() {
            let mi = patch.multi_index(idx);
            let mut xi = SVector::<f64, D>::zeros();
            for d in 0..D {
                xi[d] = if d == dir { fixed } else { grev[d][mi[d]] };
            }
            let b = patch.basis(&xi, 0)?;
            for (&i, &v) in b.indices.iter().zip(b.values()) {
                if let Some(&c) = col_of.get(&i) {
                    a[(row, c)] += v;
                } else if v.abs() > 1e-13 {
                    return Err(Error::Configuration(
                        "Dirichlet interpolation needs open knot vectors on the face".into(),
                    ));
                }
            }
            let val = g(&patch.map_point(&xi)?);
            for c in 0..ncomp {
                rhs[(row, c)] = val[c];
            }
        }
        let coef = a
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Configuration("singular face interpolation".into()))?;
        for (row, &idx) in face.iter().enumerate() {
            for &c in components {
                self.insert(offset + ncomp * idx + c, coef[(row, c)])?;
            }
        }
        Ok(())
    }
}

/// System after strong elimination of prescribed dofs.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    pub free: Vec<usize>,
    pub matrix: CsrMatrix,
    pub rhs: Vec<f64>,
    full: Vec<f64>,
}

impl ReducedSystem {
    /// Full vector from free values (prescribed entries filled in).
    pub fn expand(&self, free_values: &[f64]) -> Vec<f64> {
        let mut out = self.full.clone();
        for (k, &i) in self.free.iter().enumerate() {
            out[i] = free_values[k];
        }
        out
    }
}

/// Eliminates prescribed dofs symmetrically: `K_ff u_f = f_f - K_fd u_d`.
pub fn apply_dirichlet(k: &CsrMatrix, f: &[f64], bcs: &DirichletSet) -> ReducedSystem {
    let n = k.nrows();
    let mut full = vec![0.0; n];
    for (i, v) in bcs.iter() {
        full[i] = v;
    }
    let free: Vec<usize> = (0..n).filter(|&i| !bcs.contains(i)).collect();
    let mut map = vec![usize::MAX; n];
    for (k_, &i) in free.iter().enumerate() {
        map[i] = k_;
    }
    let mut trip = Vec::new();
    let mut rhs: Vec<f64> = free.iter().map(|&i| f[i]).collect();
    for (i, j, v) in k.triplets() {
        if map[i] == usize::MAX {
            continue;
        }
        if map[j] == usize::MAX {
            rhs[map[i]] -= v * full[j];
        } else {
            trip.push((map[i], map[j], v));
        }
    }
    let matrix = CsrMatrix::from_triplets(free.len(), free.len(), &trip);
    ReducedSystem { free, matrix, rhs, full }
}

/// Plane-strain constitutive matrix in Voigt order `(xx, yy, xy)`.
pub fn plane_strain_matrix(mat: &Material) -> nalgebra::Matrix3<f64> {
    let (l, m) = mat.lame();
    nalgebra::Matrix3::new(l + 2.0 * m, l, 0.0, l, l + 2.0 * m, 0.0, 0.0, 0.0, m)
}

/// Stiffness and load of a linear 2D problem on one patch.
///
/// Poisson: `∫ ∇u·∇v = ∫ s v`, one dof per control point.
/// Plane strain: `∫ σ(u):ε(v) = ∫ s·v`, two interleaved dofs.
/// Dofs are shifted by `offset` inside a global system of size `n`.
pub fn assemble_linear_2d<S>(
    patch: &Patch<2>,
    mat: &Material,
    offset: usize,
    n: usize,
    source: S,
) -> Result<(CsrMatrix, Vec<f64>)>
where
    S: Fn(&SVector<f64, 2>) -> Vec<f64> + Sync,
{
    let ncomp = match mat.kind {
        MaterialKind::Poisson => 1,
        MaterialKind::LinearElasticPlaneStrain => 2,
        MaterialKind::SaintVenantKirchhoff => {
            return Err(Error::Configuration("2D assembly supports Poisson and plane strain".into()))
        }
    };
    let d = plane_strain_matrix(mat);
    let elements = patch.elements();
    let npts = patch.default_points();
    assemble(n, elements.len(), |ei| {
        let rule = elements[ei].gauss(npts);
        let mut dofs = Vec::new();
        let mut ke = DMatrix::zeros(0, 0);
        let mut fe = DVector::zeros(0);
        for (q, (pt, w)) in rule.points.iter().zip(&rule.weights).enumerate() {
            let ev = patch.evaluate(pt)?;
            let nb = ev.indices.len();
            if q == 0 {
                dofs = ev.indices.iter().flat_map(|&i| (0..ncomp).map(move |c| offset + ncomp * i + c)).collect();
                ke = DMatrix::zeros(nb * ncomp, nb * ncomp);
                fe = DVector::zeros(nb * ncomp);
            }
            let dv = w * ev.det;
            let s = source(&ev.x);
            for a in 0..nb {
                for c in 0..ncomp {
                    fe[ncomp * a + c] += dv * ev.values[a] * s[c];
                }
            }
            if ncomp == 1 {
                for a in 0..nb {
                    for b in 0..nb {
                        ke[(a, b)] += dv * ev.grads[a].dot(&ev.grads[b]);
                    }
                }
            } else {
                let bmat = |a: usize| {
                    let g = ev.grads[a];
                    nalgebra::Matrix3x2::new(g[0], 0.0, 0.0, g[1], g[1], g[0])
                };
                for a in 0..nb {
                    let ba = bmat(a);
                    for b in 0..nb {
                        let kab = ba.transpose() * d * bmat(b) * dv;
                        for i in 0..2 {
                            for j in 0..2 {
                                ke[(2 * a + i, 2 * b + j)] += kab[(i, j)];
                            }
                        }
                    }
                }
            }
        }
        Ok(ElementContribution { dofs, matrix: ke, vector: fe })
    })
}

/// Plane-strain stress `(σxx, σyy, σxy)` and von Mises stress at `xi`.
pub fn plane_strain_stress(
    patch: &Patch<2>,
    mat: &Material,
    u: &[f64],
    xi: &SVector<f64, 2>,
) -> Result<(nalgebra::Vector3<f64>, f64)> {
    let ev = patch.evaluate(xi)?;
    let mut grad = Matrix2::zeros();
    for (a, &i) in ev.indices.iter().enumerate() {
        for c in 0..2 {
            grad[(c, 0)] += u[2 * i + c] * ev.grads[a][0];
            grad[(c, 1)] += u[2 * i + c] * ev.grads[a][1];
        }
    }
    let eps = nalgebra::Vector3::new(grad[(0, 0)], grad[(1, 1)], grad[(0, 1)] + grad[(1, 0)]);
    let sig = plane_strain_matrix(mat) * eps;
    let szz = mat.poisson * (sig[0] + sig[1]);
    let vm = (0.5 * ((sig[0] - sig[1]).powi(2) + (sig[1] - szz).powi(2) + (szz - sig[0]).powi(2)) + 3.0 * sig[2].powi(2)).sqrt();
    Ok((sig, vm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    fn svk(e: f64, nu: f64) -> Material {
        Material::new(MaterialKind::SaintVenantKirchhoff, e, nu).unwrap()
    }

    fn pseudo_random(seed: usize) -> f64 {
        ((seed as f64 * 12.9898).sin() * 43758.5453).fract()
    }

    fn rotation(a: f64, b: f64, c: f64) -> Matrix3<f64> {
        *nalgebra::Rotation3::from_euler_angles(a, b, c).matrix()
    }

    #[test]
    fn reference_state_is_stress_free() {
        let st = svk_stress(&svk(10.0, 0.3), &Matrix3::identity()).unwrap();
        assert_eq!(st.p, Matrix3::zeros());
        assert_eq!(st.psi, 0.0);
    }

    #[test]
    fn uniaxial_stretch_nu_zero() {
        let (e, l) = (7.0, 1.3);
        let st = svk_stress(&svk(e, 0.0), &Matrix3::from_diagonal(&Vector3::new(l, 1.0, 1.0))).unwrap();
        let mut expect = Matrix3::zeros();
        expect[(0, 0)] = l * e * (l * l - 1.0) / 2.0;
        assert!((st.p - expect).amax() < 1e-13);
    }

    #[test]
    fn inverted_gradient_rejected() {
        let f = Matrix3::from_diagonal(&Vector3::new(-1.0, 1.0, 1.0));
        assert!(matches!(svk_stress(&svk(1.0, 0.2), &f), Err(Error::ElementInversion { .. })));
        assert!(Material::new(MaterialKind::Poisson, -1.0, 0.2).is_err());
        assert!(Material::new(MaterialKind::Poisson, 1.0, 0.5).is_err());
    }

    #[test]
    fn stress_is_energy_derivative() {
        let mat = svk(3.0, 0.25);
        let h = 1e-6;
        for s in 0..20 {
            let f = Matrix3::identity() + Matrix3::from_fn(|i, j| 0.2 * pseudo_random(s * 9 + i * 3 + j));
            let st = svk_stress(&mat, &f).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let mut fp = f;
                    fp[(i, j)] += h;
                    let mut fm = f;
                    fm[(i, j)] -= h;
                    let fd = (svk_stress(&mat, &fp).unwrap().psi - svk_stress(&mat, &fm).unwrap().psi) / (2.0 * h);
                    assert!((fd - st.p[(i, j)]).abs() < 1e-7 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn frame_indifference() {
        let mat = svk(5.0, 0.3);
        for s in 0..10 {
            let f = Matrix3::identity() + Matrix3::from_fn(|i, j| 0.3 * pseudo_random(100 + s * 9 + i * 3 + j));
            let q = rotation(pseudo_random(s) * 3.0, pseudo_random(s + 50), pseudo_random(s + 90) * 2.0);
            let a = svk_stress(&mat, &f).unwrap().psi;
            let b = svk_stress(&mat, &(q * f)).unwrap().psi;
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    fn displaced_state(patch: &Patch<3>, scale: f64) -> Vec<f64> {
        (0..3 * patch.num_basis()).map(|k| scale * pseudo_random(k + 7)).collect()
    }

    #[test]
    fn zero_state_zero_residual() {
        let p = Patch::<3>::block([2, 2, 2], [1, 2, 1], [0.0; 3], [1.0; 3]).unwrap();
        let (r, _) = assemble_internal(&p, &svk(10.0, 0.2), &vec![0.0; 3 * p.num_basis()]).unwrap();
        assert!(r.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn tangent_matches_finite_differences_and_is_symmetric() {
        let p = Patch::<3>::block([2, 1, 2], [2, 1, 1], [0.0; 3], [1.0, 0.5, 2.0]).unwrap();
        let mat = svk(4.0, 0.3);
        let u = displaced_state(&p, 0.05);
        let (r, k) = assemble_internal(&p, &mat, &u).unwrap();
        let kd = k.to_dense();
        let asym = (&kd - kd.transpose()).amax() / kd.amax();
        assert!(asym < 1e-10);
        let h = 1e-6;
        for col in 0..u.len() {
            let mut up = u.clone();
            up[col] += h;
            let mut um = u.clone();
            um[col] -= h;
            let rp = assemble_internal(&p, &mat, &up).unwrap().0;
            let rm = assemble_internal(&p, &mat, &um).unwrap().0;
            for row in 0..u.len() {
                let fd = (rp[row] - rm[row]) / (2.0 * h);
                assert!((fd - kd[(row, col)]).abs() < 1e-6 * kd.amax(), "({row},{col})");
            }
        }
        // residual is the gradient of the strain energy
        let e0 = strain_energy(&p, &mat, &u).unwrap();
        let mut up = u.clone();
        up[5] += h;
        let e1 = strain_energy(&p, &mat, &up).unwrap();
        assert!(((e1 - e0) / h - r[5]).abs() < 1e-5);
    }

    #[test]
    fn force_only_path_matches_full_assembly() {
        let p = Patch::<3>::block([2, 2, 3], [2, 1, 2], [0.0; 3], [1.0, 0.5, 2.0]).unwrap();
        let mat = svk(3.0, 0.25);
        let u = displaced_state(&p, 0.04);
        let (r, _) = assemble_internal(&p, &mat, &u).unwrap();
        let f = internal_forces(&p, &mat, &u).unwrap();
        assert!(r.iter().zip(&f).all(|(a, b)| (a - b).abs() < 1e-13));
    }

    #[test]
    fn single_element_uniaxial_nodal_forces() {
        // unit cube, trilinear, u_x = a x: uniform F = diag(1+a,1,1), nu = 0
        let p = Patch::<3>::block([1, 1, 1], [1, 1, 1], [0.0; 3], [1.0; 3]).unwrap();
        let (e, a) = (2.0, 0.1);
        let mut u = vec![0.0; 24];
        for (i, x) in p.control_points().iter().enumerate() {
            u[3 * i] = a * x[0];
        }
        let (r, _) = assemble_internal(&p, &svk(e, 0.0), &u).unwrap();
        let l = 1.0 + a;
        let p11 = l * e * (l * l - 1.0) / 2.0;
        // ∫ P11 ∂N/∂x over the cube = ±P11/4 per node
        for (i, x) in p.control_points().iter().enumerate() {
            let expect = if x[0] > 0.5 { p11 / 4.0 } else { -p11 / 4.0 };
            assert!((r[3 * i] - expect).abs() < 1e-13);
            assert!(r[3 * i + 1].abs() < 1e-13 && r[3 * i + 2].abs() < 1e-13);
        }
    }

    #[test]
    fn neumann_resultants() {
        let p = Patch::<3>::block([2, 2, 3], [2, 1, 3], [0.0; 3], [2.0, 3.0, 1.0]).unwrap();
        let f = assemble_neumann(&p, 2, true, 3, |_| vec![1.0, -2.0, 0.5]).unwrap();
        let total: Vec<f64> = (0..3).map(|c| f.iter().skip(c).step_by(3).sum()).collect();
        for (t, e) in total.iter().zip([6.0, -12.0, 3.0]) {
            assert!((t - e).abs() < 1e-12);
        }
        let zero = assemble_neumann(&p, 0, false, 3, |_| vec![0.0; 3]).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
        // linear traction t_x = y on the face x = 2: resultant ∫∫ y dy dz = 4.5
        let lin = assemble_neumann(&p, 0, true, 3, |x| vec![x[1], 0.0, 0.0]).unwrap();
        assert!((lin.iter().step_by(3).sum::<f64>() - 4.5).abs() < 1e-12);
    }

    #[test]
    fn dirichlet_linear_data_and_conflicts() {
        let p = Patch::<2>::block([2, 3], [3, 2], [0.0, 0.0], [1.0, 1.0]).unwrap();
        let mut bc = DirichletSet::new();
        bc.add_face(&p, 0, false, 1, &[0], 0, |x| vec![1.0 + 2.0 * x[1]]).unwrap();
        let coeffs: Vec<f64> = (0..p.num_basis()).map(|i| bc.get(i).unwrap_or(0.0)).collect();
        for k in 0..10 {
            let y = k as f64 / 9.0;
            let v = p.field_value(&coeffs, &Vector2::new(0.0, y)).unwrap();
            assert!((v - (1.0 + 2.0 * y)).abs() < 1e-12);
        }
        // shared corner with a different value
        let r = bc.add_face(&p, 1, false, 1, &[0], 0, |_| vec![5.0]);
        assert!(matches!(r, Err(Error::Configuration(_))));
    }

    #[test]
    fn elimination_matches_multiplier_enforcement() {
        let p = Patch::<2>::block([2, 2], [3, 3], [0.0, 0.0], [1.0, 1.0]).unwrap();
        let mat = Material::new(MaterialKind::Poisson, 1.0, 0.0).unwrap();
        let n = p.num_basis();
        let (k, f) = assemble_linear_2d(&p, &mat, 0, n, |x| vec![x[0] + 1.0]).unwrap();
        let mut bc = DirichletSet::new();
        bc.add_face(&p, 0, false, 1, &[0], 0, |x| vec![x[1]]).unwrap();
        bc.add_face(&p, 1, true, 1, &[0], 0, |x| vec![x[0] + 1.0]).unwrap();
        let red = apply_dirichlet(&k, &f, &bc);
        let u = red.expand(&crate::sparse::solve(&red.matrix, &red.rhs).unwrap());
        // Lagrange-multiplier enforcement of the same values
        let nc = bc.len();
        let mut t = k.triplets();
        let mut rhs = f.clone();
        for (r, (dof, v)) in bc.iter().enumerate() {
            t.push((n + r, dof, 1.0));
            t.push((dof, n + r, 1.0));
            rhs.push(v);
        }
        let kkt = CsrMatrix::from_triplets(n + nc, n + nc, &t);
        let ul = crate::sparse::solve(&kkt, &rhs).unwrap();
        for i in 0..n {
            assert!((u[i] - ul[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn plane_strain_equals_svk_tangent_at_identity() {
        let mat = Material::new(MaterialKind::LinearElasticPlaneStrain, 3.0, 0.3).unwrap();
        let svkm = svk(3.0, 0.3);
        let d = plane_strain_matrix(&mat);
        for s in 0..5 {
            let ga = Vector3::new(pseudo_random(s), pseudo_random(s + 1), 0.0);
            let gb = Vector3::new(pseudo_random(s + 2), pseudo_random(s + 3), 0.0);
            let k3 = svk_tangent_block(&svkm, &Matrix3::identity(), &Matrix3::zeros(), &ga, &gb);
            let ba = nalgebra::Matrix3x2::new(ga[0], 0.0, 0.0, ga[1], ga[1], ga[0]);
            let bb = nalgebra::Matrix3x2::new(gb[0], 0.0, 0.0, gb[1], gb[1], gb[0]);
            let k2 = ba.transpose() * d * bb;
            for i in 0..2 {
                for j in 0..2 {
                    assert!((k2[(i, j)] - k3[(i, j)]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn constant_strain_stress() {
        let p = Patch::<2>::block([2, 2], [2, 2], [0.0, 0.0], [1.0, 1.0]).unwrap();
        let mat = Material::new(MaterialKind::LinearElasticPlaneStrain, 1.0, 0.25).unwrap();
        let u: Vec<f64> = p.control_points().iter().flat_map(|x| [0.01 * x[0], 0.0]).collect();
        let (s, _) = plane_strain_stress(&p, &mat, &u, &Vector2::new(0.3, 0.6)).unwrap();
        let (l, m) = mat.lame();
        assert!((s[0] - (l + 2.0 * m) * 0.01).abs() < 1e-14);
        assert!((s[1] - l * 0.01).abs() < 1e-14);
    }
}
