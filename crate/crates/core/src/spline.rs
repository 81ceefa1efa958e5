//! Univariate and tensor-product B-spline / NURBS bases.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Knot vector together with the polynomial degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotVector {
    knots: Vec<f64>,
    degree: usize,
}

impl KnotVector {
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if knots.iter().any(|k| !k.is_finite()) {
            return Err(Error::Configuration("non-finite knot".into()));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Configuration("knots must be non-decreasing".into()));
        }
        if knots.len() < 2 * (degree + 1) {
            return Err(Error::Configuration(format!(
                "{} knots cannot carry p+1 = {} functions of degree {degree}",
                knots.len(),
                degree + 1
            )));
        }
        let mut i = 0;
        while i < knots.len() {
            let mut j = i;
            while j < knots.len() && knots[j] == knots[i] {
                j += 1;
            }
            if j - i > degree + 1 {
                return Err(Error::Configuration(format!(
                    "knot {} has multiplicity {} > p+1",
                    knots[i],
                    j - i
                )));
            }
            i = j;
        }
        let kv = Self { knots, degree };
        if kv.knots[degree] >= kv.knots[kv.num_basis()] {
            return Err(Error::Configuration("empty parametric domain".into()));
        }
        Ok(kv)
    }

    /// Open (clamped) knot vector with `elements` equal spans on `[a, b]`.
    pub fn uniform(degree: usize, elements: usize, a: f64, b: f64) -> Result<Self> {
        if elements == 0 || !(b > a) {
            return Err(Error::Configuration(format!(
                "uniform knot vector needs elements > 0 and b > a (got {elements}, [{a}, {b}])"
            )));
        }
        let mut knots = vec![a; degree + 1];
        for i in 1..elements {
            knots.push(a + (b - a) * i as f64 / elements as f64);
        }
        knots.extend(std::iter::repeat(b).take(degree + 1));
        Self::new(knots, degree)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// Lower end of the parametric domain.
    pub fn start(&self) -> f64 {
        self.knots[self.degree]
    }

    /// Upper end of the parametric domain.
    pub fn end(&self) -> f64 {
        self.knots[self.num_basis()]
    }

    pub fn is_clamped(&self) -> bool {
        let p = self.degree;
        let k = &self.knots;
        k[..=p].iter().all(|&x| x == k[0]) && k[k.len() - p - 1..].iter().all(|&x| x == k[k.len() - 1])
    }

    /// Distinct knot values inside the domain, ends included.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut b: Vec<f64> = Vec::new();
        for &k in &self.knots[self.degree..=self.num_basis()] {
            if b.last() != Some(&k) {
                b.push(k);
            }
        }
        b
    }

    /// Non-empty knot spans as parameter intervals.
    pub fn elements(&self) -> Vec<(f64, f64)> {
        self.breakpoints().windows(2).map(|w| (w[0], w[1])).collect()
    }

    /// Span index `i` with `knots[i] <= xi < knots[i+1]`, last span closed.
    pub fn find_span(&self, xi: f64) -> Result<usize> {
        let (a, b) = (self.start(), self.end());
        let tol = 1e-12 * (b - a).max(1.0);
        if !(xi >= a - tol && xi <= b + tol) {
            return Err(Error::Domain(format!("parameter {xi} outside [{a}, {b}]")));
        }
        let n = self.num_basis();
        let k = &self.knots;
        if xi >= b {
            let mut i = n - 1;
            while k[i] >= k[i + 1] {
                i -= 1;
            }
            return Ok(i);
        }
        if xi <= a {
            let mut i = self.degree;
            while k[i] >= k[i + 1] {
                i += 1;
            }
            return Ok(i);
        }
        let (mut lo, mut hi) = (self.degree, n);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if xi < k[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(lo)
    }

    fn clamp_param(&self, xi: f64) -> f64 {
        xi.clamp(self.start(), self.end())
    }

    /// Nonzero basis values on the span containing `xi`.
    ///
    /// Returns the span index; the values belong to functions
    /// `span - p ..= span`.
    pub fn eval_basis(&self, xi: f64) -> Result<(usize, Vec<f64>)> {
        let span = self.find_span(xi)?;
        let xi = self.clamp_param(xi);
        let p = self.degree;
        let k = &self.knots;
        let mut n = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        n[0] = 1.0;
        for j in 1..=p {
            left[j] = xi - k[span + 1 - j];
            right[j] = k[span + j] - xi;
            let mut saved = 0.0;
            for r in 0..j {
                let den = right[r + 1] + left[j - r];
                let temp = if den == 0.0 { 0.0 } else { n[r] / den };
                n[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            n[j] = saved;
        }
        Ok((span, n))
    }

    /// Values and derivatives up to order `order` of the nonzero functions.
    ///
    /// Row `d` of the result holds the `d`-th derivatives.
    pub fn eval_basis_derivs(&self, xi: f64, order: usize) -> Result<(usize, Vec<Vec<f64>>)> {
        let p = self.degree;
        if order > p {
            return Err(Error::Domain(format!("derivative order {order} exceeds degree {p}")));
        }
        let span = self.find_span(xi)?;
        let xi = self.clamp_param(xi);
        let k = &self.knots;
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = xi - k[span + 1 - j];
            right[j] = k[span + j] - xi;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = if ndu[j][r] == 0.0 { 0.0 } else { ndu[r][j - 1] / ndu[j][r] };
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; order + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for kk in 1..=order {
                let mut d = 0.0;
                let rk = r as isize - kk as isize;
                let pk = p - kk;
                if r >= kk {
                    let den = ndu[pk + 1][rk as usize];
                    a[s2][0] = if den == 0.0 { 0.0 } else { a[s1][0] / den };
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { kk - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    let den = ndu[pk + 1][idx];
                    a[s2][j] = if den == 0.0 { 0.0 } else { (a[s1][j] - a[s1][j - 1]) / den };
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    let den = ndu[pk + 1][r];
                    a[s2][kk] = if den == 0.0 { 0.0 } else { -a[s1][kk - 1] / den };
                    d += a[s2][kk] * ndu[r][pk];
                }
                ders[kk][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut fac = p as f64;
        for kk in 1..=order {
            for v in ders[kk].iter_mut() {
                *v *= fac;
            }
            fac *= (p - kk) as f64;
        }
        Ok((span, ders))
    }

    /// Greville abscissae, one per basis function.
    pub fn greville(&self) -> Vec<f64> {
        let p = self.degree;
        (0..self.num_basis())
            .map(|i| {
                if p == 0 {
                    0.5 * (self.knots[i] + self.knots[i + 1])
                } else {
                    self.knots[i + 1..=i + p].iter().sum::<f64>() / p as f64
                }
            })
            .collect()
    }

    /// Values of all `n` basis functions at `xi` (dense, mostly zero).
    pub fn eval_all(&self, xi: f64, order: usize) -> Result<Vec<f64>> {
        let (span, ders) = self.eval_basis_derivs(xi, order)?;
        let mut out = vec![0.0; self.num_basis()];
        for (j, v) in ders[order].iter().enumerate() {
            out[span - self.degree + j] = *v;
        }
        Ok(out)
    }

    /// Collocation matrix `A[k][i] = B_i(points[k])`.
    pub fn collocation_matrix(&self, points: &[f64], order: usize) -> Result<DMatrix<f64>> {
        let mut a = DMatrix::zeros(points.len(), self.num_basis());
        for (r, &x) in points.iter().enumerate() {
            let (span, ders) = self.eval_basis_derivs(x, order)?;
            for (j, v) in ders[order].iter().enumerate() {
                a[(r, span - self.degree + j)] = *v;
            }
        }
        Ok(a)
    }

    /// True for clamped vectors with equally spaced simple interior knots.
    pub fn is_uniform(&self) -> bool {
        if !self.is_clamped() {
            return false;
        }
        let b = self.breakpoints();
        let interior = &self.knots[self.degree + 1..self.num_basis()];
        if interior.len() != b.len() - 2 {
            return false;
        }
        let h = b[1] - b[0];
        b.windows(2).all(|w| ((w[1] - w[0]) - h).abs() <= 1e-12 * h.abs().max(1.0))
    }

    /// Uniformly refined vector: every element halved.
    pub fn bisected(&self) -> Result<Self> {
        let mut knots = Vec::with_capacity(2 * self.knots.len());
        for w in self.knots.windows(2) {
            knots.push(w[0]);
            if w[1] > w[0] && w[0] >= self.start() && w[1] <= self.end() {
                knots.push(0.5 * (w[0] + w[1]));
            }
        }
        knots.push(*self.knots.last().unwrap());
        Self::new(knots, self.degree)
    }
}

/// Basis values and derivatives on one span.
#[derive(Debug, Clone)]
pub struct BasisValues {
    /// Index of the first nonzero function.
    pub first: usize,
    /// `ders[d][j]`: `d`-th derivative of function `first + j`.
    pub ders: Vec<Vec<f64>>,
}

/// Rational univariate spline space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplineSpace {
    kv: KnotVector,
    weights: Vec<f64>,
    rational: bool,
}

impl SplineSpace {
    pub fn polynomial(kv: KnotVector) -> Self {
        let n = kv.num_basis();
        Self { kv, weights: vec![1.0; n], rational: false }
    }

    pub fn rational(kv: KnotVector, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != kv.num_basis() {
            return Err(Error::Configuration(format!(
                "{} weights for {} basis functions",
                weights.len(),
                kv.num_basis()
            )));
        }
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Configuration("weights must be positive".into()));
        }
        let rational = weights.iter().any(|&w| w != 1.0);
        Ok(Self { kv, weights, rational })
    }

    pub fn uniform(degree: usize, elements: usize, a: f64, b: f64) -> Result<Self> {
        Ok(Self::polynomial(KnotVector::uniform(degree, elements, a, b)?))
    }

    pub fn knot_vector(&self) -> &KnotVector {
        &self.kv
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn is_rational(&self) -> bool {
        self.rational
    }

    pub fn degree(&self) -> usize {
        self.kv.degree
    }

    pub fn num_basis(&self) -> usize {
        self.kv.num_basis()
    }

    /// Basis values and derivatives up to `order` (quotient rule when rational).
    pub fn eval(&self, xi: f64, order: usize) -> Result<BasisValues> {
        let (span, b) = self.kv.eval_basis_derivs(xi, order)?;
        let p = self.kv.degree;
        let first = span - p;
        if !self.rational {
            return Ok(BasisValues { first, ders: b });
        }
        let w = &self.weights[first..=span];
        let wd: Vec<f64> = (0..=order).map(|d| (0..=p).map(|j| b[d][j] * w[j]).sum()).collect();
        let mut r = vec![vec![0.0; p + 1]; order + 1];
        for d in 0..=order {
            for j in 0..=p {
                let mut v = b[d][j] * w[j];
                for i in 1..=d {
                    v -= binomial(d, i) * wd[i] * r[d - i][j];
                }
                r[d][j] = v / wd[0];
            }
        }
        Ok(BasisValues { first, ders: r })
    }

    /// Dense vector of all basis values (or `order`-th derivatives) at `xi`.
    pub fn eval_all(&self, xi: f64, order: usize) -> Result<Vec<f64>> {
        let bv = self.eval(xi, order)?;
        let mut out = vec![0.0; self.num_basis()];
        for (j, v) in bv.ders[order].iter().enumerate() {
            out[bv.first + j] = *v;
        }
        Ok(out)
    }
}

pub fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let mut r = 1.0;
    for i in 0..k {
        r = r * (n - i) as f64 / (i + 1) as f64;
    }
    r
}

/// Coarse-to-fine refinement relation for a uniform B-spline basis.
#[derive(Debug, Clone)]
pub struct SubdivisionMatrix {
    pub coarse: KnotVector,
    pub fine: KnotVector,
    /// `entries[(i, j)]`: coefficient of fine function `j` in coarse function `i`.
    pub entries: DMatrix<f64>,
}

/// Halve every element of a uniform open knot vector.
pub fn subdivide(kv: &KnotVector) -> Result<SubdivisionMatrix> {
    if !kv.is_uniform() {
        return Err(Error::Unsupported(
            "subdivision requires an open knot vector with uniform simple interior knots".into(),
        ));
    }
    let p = kv.degree();
    let mut knots = kv.knots().to_vec();
    let mut s = DMatrix::<f64>::identity(kv.num_basis(), kv.num_basis());
    for (a, b) in kv.elements() {
        let u = 0.5 * (a + b);
        let cur = KnotVector::new(knots.clone(), p)?;
        let k = cur.find_span(u)?;
        let n = cur.num_basis();
        // B_j = alpha_j B'_j + (1 - alpha_{j+1}) B'_{j+1}
        let alpha = |i: usize| -> f64 {
            if i + p <= k {
                1.0
            } else if i > k {
                0.0
            } else {
                (u - knots[i]) / (knots[i + p] - knots[i])
            }
        };
        let mut step = DMatrix::<f64>::zeros(n, n + 1);
        for j in 0..n {
            step[(j, j)] = alpha(j);
            step[(j, j + 1)] = 1.0 - alpha(j + 1);
        }
        s = s * step;
        knots.insert(k + 1, u);
    }
    Ok(SubdivisionMatrix { coarse: kv.clone(), fine: KnotVector::new(knots, p)?, entries: s })
}

/// Tensor-product basis values and partial derivatives at one point.
#[derive(Debug, Clone)]
pub struct TensorBasis {
    /// Flattened global indices, first direction fastest.
    pub indices: Vec<usize>,
    order: usize,
    dim: usize,
    /// Derivative blocks keyed by multi-index position (see [`TensorBasis::deriv`]).
    blocks: Vec<(Vec<usize>, Vec<f64>)>,
}

impl TensorBasis {
    /// Values of `∂^{orders}` for every nonzero function (same order as `indices`).
    pub fn deriv(&self, orders: &[usize]) -> &[f64] {
        assert_eq!(orders.len(), self.dim);
        assert!(orders.iter().sum::<usize>() <= self.order, "order not computed");
        &self.blocks.iter().find(|(o, _)| o == orders).expect("derivative block").1
    }

    pub fn values(&self) -> &[f64] {
        &self.blocks[0].1
    }
}

/// Products of univariate bases, derivatives of total order up to `order`.
pub fn tensor_basis(spaces: &[SplineSpace], xi: &[f64], order: usize) -> Result<TensorBasis> {
    if spaces.len() != xi.len() || spaces.is_empty() {
        return Err(Error::Domain(format!(
            "{} parameters for {} directions",
            xi.len(),
            spaces.len()
        )));
    }
    let dim = spaces.len();
    let uni: Vec<BasisValues> = spaces
        .iter()
        .zip(xi)
        .map(|(s, &x)| s.eval(x, order.min(s.degree())))
        .collect::<Result<_>>()?;
    let counts: Vec<usize> = uni.iter().map(|b| b.ders[0].len()).collect();
    let total: usize = counts.iter().product();
    let mut indices = Vec::with_capacity(total);
    let mut locals = Vec::with_capacity(total);
    for flat in 0..total {
        let mut rem = flat;
        let mut gidx = 0;
        let mut stride = 1;
        let mut loc = Vec::with_capacity(dim);
        for d in 0..dim {
            let l = rem % counts[d];
            rem /= counts[d];
            loc.push(l);
            gidx += (uni[d].first + l) * stride;
            stride *= spaces[d].num_basis();
        }
        indices.push(gidx);
        locals.push(loc);
    }
    let mut blocks = Vec::new();
    for ord in multi_indices(dim, order) {
        let vals = locals
            .iter()
            .map(|loc| {
                (0..dim)
                    .map(|d| uni[d].ders.get(ord[d]).map_or(0.0, |row| row[loc[d]]))
                    .product()
            })
            .collect();
        blocks.push((ord, vals));
    }
    Ok(TensorBasis { indices, order, dim, blocks })
}

/// All multi-indices of length `dim` with total order at most `order`, graded.
fn multi_indices(dim: usize, order: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 0..=order {
        let mut cur = vec![0; dim];
        gen(&mut out, &mut cur, 0, total);
    }
    return out;

    fn gen(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, d: usize, left: usize) {
        if d + 1 == cur.len() {
            cur[d] = left;
            out.push(cur.clone());
            return;
        }
        for k in (0..=left).rev() {
            cur[d] = k;
            gen(out, cur, d + 1, left - k);
        }
    }
}
