//! Tensor-product patches: geometric map, Jacobians, quadrature, inversion.

use nalgebra::{SMatrix, SVector};

use crate::error::{Error, Result};
use crate::quadrature::gauss_legendre;
use crate::spline::{tensor_basis, SplineSpace, TensorBasis};

/// A `D`-variate spline patch mapping the parametric box into `R^D`.
#[derive(Debug, Clone)]
pub struct Patch<const D: usize> {
    spaces: [SplineSpace; D],
    control_points: Vec<SVector<f64, D>>,
}

/// Basis data at a point, gradients in physical coordinates.
#[derive(Debug, Clone)]
pub struct PointEval<const D: usize> {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub grads: Vec<SVector<f64, D>>,
    pub x: SVector<f64, D>,
    pub jac: SMatrix<f64, D, D>,
    pub det: f64,
}

/// Gauss points of one element with parametric weights.
#[derive(Debug, Clone)]
pub struct QuadratureRule<const D: usize> {
    pub points: Vec<SVector<f64, D>>,
    pub weights: Vec<f64>,
}

/// One element: a product of nonzero knot spans.
#[derive(Debug, Clone, Copy)]
pub struct Element<const D: usize> {
    pub id: usize,
    pub lower: SVector<f64, D>,
    pub upper: SVector<f64, D>,
}

impl<const D: usize> Element<D> {
    /// Gauss–Legendre rule with `n[d]` points in direction `d`.
    pub fn gauss(&self, n: [usize; D]) -> QuadratureRule<D> {
        let rules: Vec<(Vec<f64>, Vec<f64>)> = n.iter().map(|&k| gauss_legendre(k)).collect();
        let total: usize = n.iter().product();
        let mut points = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut pt = SVector::<f64, D>::zeros();
            let mut w = 1.0;
            for d in 0..D {
                let k = rem % n[d];
                rem /= n[d];
                let h = 0.5 * (self.upper[d] - self.lower[d]);
                pt[d] = self.lower[d] + h * (rules[d].0[k] + 1.0);
                w *= h * rules[d].1[k];
            }
            points.push(pt);
            weights.push(w);
        }
        QuadratureRule { points, weights }
    }

    pub fn center(&self) -> SVector<f64, D> {
        0.5 * (self.lower + self.upper)
    }
}

impl<const D: usize> Patch<D> {
    pub fn new(spaces: [SplineSpace; D], control_points: Vec<SVector<f64, D>>) -> Result<Self> {
        let n: usize = spaces.iter().map(|s| s.num_basis()).product();
        if control_points.len() != n {
            return Err(Error::Configuration(format!(
                "{} control points for a {:?} basis grid",
                control_points.len(),
                spaces.iter().map(|s| s.num_basis()).collect::<Vec<_>>()
            )));
        }
        Ok(Self { spaces, control_points })
    }

    /// Affine box `[lower, upper]` discretized with uniform open knot vectors.
    ///
    /// Control points sit at the Greville points, so the map is the identity
    /// up to scaling and the parametric domain equals the physical box.
    pub fn block(
        degrees: [usize; D],
        elements: [usize; D],
        lower: [f64; D],
        upper: [f64; D],
    ) -> Result<Self> {
        let mut spaces = Vec::with_capacity(D);
        for d in 0..D {
            spaces.push(SplineSpace::uniform(degrees[d], elements[d], lower[d], upper[d])?);
        }
        let spaces: [SplineSpace; D] = spaces.try_into().expect("D spaces");
        let grev: Vec<Vec<f64>> = spaces.iter().map(|s| s.knot_vector().greville()).collect();
        let dims: Vec<usize> = spaces.iter().map(|s| s.num_basis()).collect();
        let total: usize = dims.iter().product();
        let cps = (0..total)
            .map(|flat| {
                let mut rem = flat;
                let mut p = SVector::<f64, D>::zeros();
                for d in 0..D {
                    p[d] = grev[d][rem % dims[d]];
                    rem /= dims[d];
                }
                p
            })
            .collect();
        Self::new(spaces, cps)
    }

    pub fn spaces(&self) -> &[SplineSpace; D] {
        &self.spaces
    }

    pub fn control_points(&self) -> &[SVector<f64, D>] {
        &self.control_points
    }

    pub fn num_basis(&self) -> usize {
        self.control_points.len()
    }

    pub fn dims(&self) -> [usize; D] {
        std::array::from_fn(|d| self.spaces[d].num_basis())
    }

    pub fn flat_index(&self, multi: [usize; D]) -> usize {
        let dims = self.dims();
        let mut idx = 0;
        let mut stride = 1;
        for d in 0..D {
            idx += multi[d] * stride;
            stride *= dims[d];
        }
        idx
    }

    pub fn multi_index(&self, mut flat: usize) -> [usize; D] {
        let dims = self.dims();
        std::array::from_fn(|d| {
            let v = flat % dims[d];
            flat /= dims[d];
            v
        })
    }

    pub fn param_lower(&self) -> SVector<f64, D> {
        SVector::from_fn(|d, _| self.spaces[d].knot_vector().start())
    }

    pub fn param_upper(&self) -> SVector<f64, D> {
        SVector::from_fn(|d, _| self.spaces[d].knot_vector().end())
    }

    fn check_domain(&self, xi: &SVector<f64, D>) -> Result<()> {
        let (lo, hi) = (self.param_lower(), self.param_upper());
        for d in 0..D {
            let tol = 1e-12 * (hi[d] - lo[d]).max(1.0);
            if !(xi[d] >= lo[d] - tol && xi[d] <= hi[d] + tol) {
                return Err(Error::Domain(format!("parameter {:?} outside the patch domain", xi.as_slice())));
            }
        }
        Ok(())
    }

    pub fn basis(&self, xi: &SVector<f64, D>, order: usize) -> Result<TensorBasis> {
        self.check_domain(xi)?;
        tensor_basis(&self.spaces, xi.as_slice(), order)
    }

    pub fn map_point(&self, xi: &SVector<f64, D>) -> Result<SVector<f64, D>> {
        let b = self.basis(xi, 0)?;
        Ok(b.indices
            .iter()
            .zip(b.values())
            .fold(SVector::zeros(), |acc, (&i, &v)| acc + self.control_points[i] * v))
    }

    fn unit(d: usize) -> [usize; D] {
        std::array::from_fn(|k| usize::from(k == d))
    }

    fn jacobian_from(&self, b: &TensorBasis) -> SMatrix<f64, D, D> {
        let mut j = SMatrix::<f64, D, D>::zeros();
        for l in 0..D {
            let dl = b.deriv(&Self::unit(l));
            for (k, &i) in b.indices.iter().enumerate() {
                let cp = &self.control_points[i];
                for r in 0..D {
                    j[(r, l)] += cp[r] * dl[k];
                }
            }
        }
        j
    }

    /// Jacobian `dx/dxi` (columns are parametric tangents) and its determinant.
    pub fn jacobian(&self, xi: &SVector<f64, D>) -> Result<(SMatrix<f64, D, D>, f64)> {
        let b = self.basis(xi, 1)?;
        let j = self.jacobian_from(&b);
        let det = det_small(&j);
        if !(det > 0.0) {
            return Err(Error::SingularMap { location: xi.as_slice().to_vec(), det });
        }
        Ok((j, det))
    }

    /// Basis functions, physical gradients and geometry at `xi`.
    pub fn evaluate(&self, xi: &SVector<f64, D>) -> Result<PointEval<D>> {
        let b = self.basis(xi, 1)?;
        let jac = self.jacobian_from(&b);
        let det = det_small(&jac);
        if !(det > 0.0) {
            return Err(Error::SingularMap { location: xi.as_slice().to_vec(), det });
        }
        let jinv_t = inverse_small(&jac, det).transpose();
        let partials: Vec<&[f64]> = (0..D).map(|l| b.deriv(&Self::unit(l))).collect();
        let mut grads = Vec::with_capacity(b.indices.len());
        let mut x = SVector::zeros();
        for (k, &i) in b.indices.iter().enumerate() {
            let g = SVector::<f64, D>::from_fn(|l, _| partials[l][k]);
            grads.push(jinv_t * g);
            x += self.control_points[i] * b.values()[k];
        }
        Ok(PointEval { indices: b.indices.clone(), values: b.values().to_vec(), grads, x, jac, det })
    }

    /// Gradient in physical coordinates of the scalar field with coefficients `coeffs`.
    pub fn physical_gradient(&self, coeffs: &[f64], xi: &SVector<f64, D>) -> Result<SVector<f64, D>> {
        if coeffs.len() != self.num_basis() {
            return Err(Error::Configuration(format!(
                "{} field coefficients for {} basis functions",
                coeffs.len(),
                self.num_basis()
            )));
        }
        let e = self.evaluate(xi)?;
        Ok(e.indices.iter().zip(&e.grads).fold(SVector::zeros(), |acc, (&i, g)| acc + g * coeffs[i]))
    }

    /// Scalar field value at `xi`.
    pub fn field_value(&self, coeffs: &[f64], xi: &SVector<f64, D>) -> Result<f64> {
        let b = self.basis(xi, 0)?;
        Ok(b.indices.iter().zip(b.values()).map(|(&i, v)| coeffs[i] * v).sum())
    }

    /// Elements in lexicographic order, first direction fastest.
    pub fn elements(&self) -> Vec<Element<D>> {
        let spans: Vec<Vec<(f64, f64)>> = self.spaces.iter().map(|s| s.knot_vector().elements()).collect();
        let counts: Vec<usize> = spans.iter().map(|s| s.len()).collect();
        let total: usize = counts.iter().product();
        (0..total)
            .map(|id| {
                let mut rem = id;
                let mut lower = SVector::zeros();
                let mut upper = SVector::zeros();
                for d in 0..D {
                    let (a, b) = spans[d][rem % counts[d]];
                    rem /= counts[d];
                    lower[d] = a;
                    upper[d] = b;
                }
                Element { id, lower, upper }
            })
            .collect()
    }

    /// Default rule: `p + 1` Gauss points per direction.
    pub fn default_points(&self) -> [usize; D] {
        std::array::from_fn(|d| self.spaces[d].degree() + 1)
    }

    /// Diagonal of the control-point bounding box.
    pub fn diameter(&self) -> f64 {
        let mut lo = self.control_points[0];
        let mut hi = lo;
        for p in &self.control_points {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (hi - lo).norm()
    }

    /// Parameter of the physical point `x` by damped Newton from `guess`.
    pub fn invert_point(&self, x: &SVector<f64, D>, guess: &SVector<f64, D>) -> Result<SVector<f64, D>> {
        let (lo, hi) = (self.param_lower(), self.param_upper());
        let tol = 1e-10 * self.diameter();
        let clamp = |v: SVector<f64, D>| SVector::<f64, D>::from_fn(|d, _| v[d].clamp(lo[d], hi[d]));
        let mut xi = clamp(*guess);
        let mut r = x - self.map_point(&xi)?;
        let max_iter = 50;
        for _ in 0..max_iter {
            if r.norm() <= tol {
                return Ok(xi);
            }
            let (j, det) = self.jacobian(&xi)?;
            let step = inverse_small(&j, det) * r;
            let mut alpha = 1.0;
            let mut accepted = false;
            while alpha > 1e-4 {
                let trial = clamp(xi + step * alpha);
                let rt = x - self.map_point(&trial)?;
                if rt.norm() < r.norm() {
                    xi = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if r.norm() <= tol {
            return Ok(xi);
        }
        Err(Error::Inversion { point: x.as_slice().to_vec(), iterations: max_iter, distance: r.norm() })
    }

    /// Flat indices of the basis functions on the face `xi_dir = start` (`end = false`)
    /// or `xi_dir = end`, ordered with the remaining directions first-fastest.
    pub fn face_indices(&self, dir: usize, end: bool) -> Vec<usize> {
        let dims = self.dims();
        let fixed = if end { dims[dir] - 1 } else { 0 };
        (0..self.num_basis())
            .filter(|&i| self.multi_index(i)[dir] == fixed)
            .collect()
    }

    /// Integral of `f(x)` over the physical patch by Gauss quadrature.
    pub fn integrate<F: Fn(&SVector<f64, D>) -> f64>(&self, f: F) -> Result<f64> {
        let mut total = 0.0;
        for e in self.elements() {
            let rule = e.gauss(self.default_points());
            for (pt, w) in rule.points.iter().zip(&rule.weights) {
                let (_, det) = self.jacobian(pt)?;
                total += w * det * f(&self.map_point(pt)?);
            }
        }
        Ok(total)
    }
}

/// Determinant of a 1x1, 2x2 or 3x3 matrix.
pub fn det_small<const D: usize>(m: &SMatrix<f64, D, D>) -> f64 {
    match D {
        1 => m[(0, 0)],
        2 => m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)],
        3 => {
            m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
                - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
                + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)])
        }
        _ => unimplemented!("dimension {D}"),
    }
}

/// Inverse via the adjugate, given the determinant.
pub fn inverse_small<const D: usize>(m: &SMatrix<f64, D, D>, det: f64) -> SMatrix<f64, D, D> {
    let mut inv = SMatrix::<f64, D, D>::zeros();
    match D {
        1 => inv[(0, 0)] = 1.0 / det,
        2 => {
            inv[(0, 0)] = m[(1, 1)] / det;
            inv[(0, 1)] = -m[(0, 1)] / det;
            inv[(1, 0)] = -m[(1, 0)] / det;
            inv[(1, 1)] = m[(0, 0)] / det;
        }
        3 => {
            for i in 0..3 {
                for j in 0..3 {
                    let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
                    let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
                    inv[(i, j)] = (m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)]) / det;
                }
            }
        }
        _ => unimplemented!("dimension {D}"),
    }
    inv
}
