//! Biorthogonal multiplier bases on 1D interface traces and crosspoint
//! modification.
//!
//! Every multiplier function is stored elementwise as monomial coefficients
//! in the local coordinate `u = (t - a_e) / (b_e - a_e)` of element `e`.

use nalgebra::{DMatrix, DVector};
use num_rational::Ratio;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::spline::KnotVector;

type Poly = Vec<f64>;

fn poly_eval(c: &[f64], u: f64) -> f64 {
    c.iter().rev().fold(0.0, |acc, &a| acc * u + a)
}

fn poly_mul(a: &[f64], b: &[f64]) -> Poly {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// Integral of a polynomial over `[0, 1]`.
fn poly_int(c: &[f64]) -> f64 {
    c.iter().enumerate().map(|(r, a)| a / (r + 1) as f64).sum()
}

fn poly_deriv(c: &[f64]) -> Poly {
    if c.len() <= 1 {
        return vec![0.0];
    }
    c.iter().enumerate().skip(1).map(|(r, a)| r as f64 * a).collect()
}

/// Primal trace space of an interface (polynomial B-splines).
#[derive(Debug, Clone)]
pub struct TraceSpace {
    kv: KnotVector,
    elements: Vec<(f64, f64)>,
    /// `local[e][k]`: coefficients of function `first(e) + k` on element `e`.
    local: Vec<Vec<Poly>>,
    first: Vec<usize>,
}

impl TraceSpace {
    pub fn new(kv: KnotVector) -> Result<Self> {
        let p = kv.degree();
        let elements = kv.elements();
        let mut local = Vec::with_capacity(elements.len());
        let mut first = Vec::with_capacity(elements.len());
        for &(a, b) in &elements {
            // Taylor expansion at the left end of the element
            let (span, d) = kv.eval_basis_derivs(a, p)?;
            let h = b - a;
            let mut fact = 1.0;
            let mut polys = vec![vec![0.0; p + 1]; p + 1];
            for r in 0..=p {
                if r > 0 {
                    fact *= r as f64;
                }
                for k in 0..=p {
                    polys[k][r] = d[r][k] * h.powi(r as i32) / fact;
                }
            }
            local.push(polys);
            first.push(span - p);
        }
        Ok(Self { kv, elements, local, first })
    }

    pub fn uniform(degree: usize, elements: usize, a: f64, b: f64) -> Result<Self> {
        Self::new(KnotVector::uniform(degree, elements, a, b)?)
    }

    pub fn knot_vector(&self) -> &KnotVector {
        &self.kv
    }

    pub fn degree(&self) -> usize {
        self.kv.degree()
    }

    pub fn num_functions(&self) -> usize {
        self.kv.num_basis()
    }

    pub fn elements(&self) -> &[(f64, f64)] {
        &self.elements
    }

    pub fn num_elements(&self) -> usize {
        self.elements.len()
    }

    fn h(&self, e: usize) -> f64 {
        self.elements[e].1 - self.elements[e].0
    }

    /// Element containing `t` (last element closed).
    pub fn element_of(&self, t: f64) -> Result<usize> {
        let (a, b) = (self.elements[0].0, self.elements.last().unwrap().1);
        let tol = 1e-12 * (b - a).max(1.0);
        if !(t >= a - tol && t <= b + tol) {
            return Err(Error::Domain(format!("parameter {t} outside the trace [{a}, {b}]")));
        }
        let idx = self.elements.partition_point(|&(lo, _)| lo <= t);
        Ok(idx.saturating_sub(1).min(self.elements.len() - 1))
    }

    /// Local coordinate of `t` in element `e`.
    pub fn local_coord(&self, e: usize, t: f64) -> f64 {
        (t - self.elements[e].0) / self.h(e)
    }

    /// Polynomial of primal function `i` on element `e`, if supported there.
    pub fn piece(&self, i: usize, e: usize) -> Option<&Poly> {
        let f = self.first[e];
        (i >= f && i <= f + self.degree()).then(|| &self.local[e][i - f])
    }

    /// Element indices where function `i` is nonzero.
    pub fn support(&self, i: usize) -> Vec<usize> {
        (0..self.num_elements()).filter(|&e| self.piece(i, e).is_some()).collect()
    }

    /// `∫ φ_i` over the trace.
    pub fn integral(&self, i: usize) -> f64 {
        self.support(i).iter().map(|&e| self.h(e) * poly_int(self.piece(i, e).unwrap())).sum()
    }

    /// `∫_e φ_i q` for a local polynomial `q`.
    fn moment(&self, i: usize, e: usize, q: &[f64]) -> f64 {
        self.piece(i, e).map_or(0.0, |ph| self.h(e) * poly_int(&poly_mul(ph, q)))
    }

    /// Monomial `s^d` with `s` the trace coordinate scaled to `[0, 1]`,
    /// expressed in the local coordinate of element `e`.
    fn scaled_monomial(&self, d: usize, e: usize) -> Poly {
        let t0 = self.elements[0].0;
        let len = self.elements.last().unwrap().1 - t0;
        let alpha = (self.elements[e].0 - t0) / len;
        let beta = self.h(e) / len;
        let mut out = vec![0.0; d + 1];
        let mut binom = 1.0;
        for r in 0..=d {
            if r > 0 {
                binom = binom * (d - r + 1) as f64 / r as f64;
            }
            out[r] = binom * alpha.powi((d - r) as i32) * beta.powi(r as i32);
        }
        out
    }
}

/// Construction stage of a dual basis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum DualStage {
    /// Step I: one function per (element, local primal function).
    Elementwise,
    /// Step II: elementwise pieces glued into one function per primal function.
    Glued,
    /// Step III: support enlarged so that polynomials of degree `p` are reproduced.
    Optimal,
}

/// One multiplier function given by elementwise polynomials.
#[derive(Debug, Clone, Serialize)]
pub struct DualFunction {
    /// Primal trace function this dual is paired with.
    pub owner: usize,
    /// `(element, local monomial coefficients)`, sorted by element.
    pub pieces: Vec<(usize, Vec<f64>)>,
}

impl DualFunction {
    pub fn support(&self) -> Vec<usize> {
        self.pieces.iter().map(|p| p.0).collect()
    }

    fn piece(&self, e: usize) -> Option<&Poly> {
        self.pieces.iter().find(|p| p.0 == e).map(|p| &p.1)
    }
}

/// Biorthogonal basis for a [`TraceSpace`].
#[derive(Debug, Clone)]
pub struct DualBasis {
    pub stage: DualStage,
    pub trace: TraceSpace,
    pub functions: Vec<DualFunction>,
}

impl DualBasis {
    pub fn len(&self) -> usize {
        self.functions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functions.is_empty()
    }

    /// Value of function `i` at trace parameter `t`.
    pub fn eval(&self, i: usize, t: f64) -> Result<f64> {
        let e = self.trace.element_of(t)?;
        let u = self.trace.local_coord(e, t);
        Ok(self.functions[i].piece(e).map_or(0.0, |c| poly_eval(c, u)))
    }

    /// Nonzero `(function, value, d/dt)` at `t`.
    pub fn eval_nonzero(&self, t: f64) -> Result<Vec<(usize, f64, f64)>> {
        let e = self.trace.element_of(t)?;
        let u = self.trace.local_coord(e, t);
        let h = self.trace.h(e);
        Ok(self
            .functions
            .iter()
            .enumerate()
            .filter_map(|(i, f)| {
                f.piece(e).map(|c| (i, poly_eval(c, u), poly_eval(&poly_deriv(c), u) / h))
            })
            .collect())
    }

    /// Coupling matrix `G[i][j] = ∫ ψ_i φ_j` (exact, elementwise).
    pub fn coupling_matrix(&self) -> DMatrix<f64> {
        let n = self.trace.num_functions();
        let mut g = DMatrix::zeros(self.functions.len(), n);
        for (i, f) in self.functions.iter().enumerate() {
            for (e, c) in &f.pieces {
                for j in 0..n {
                    g[(i, j)] += self.trace.moment(j, *e, c);
                }
            }
        }
        g
    }

    /// Functionals `a_j(P) = ∫ P φ_j / ∫ φ_j` for monomials of degree `< count`.
    ///
    /// Any polynomial in the span equals `Σ_j a_j(P) ψ_j` by biorthogonality.
    pub fn monomial_functionals(&self, count: usize) -> DMatrix<f64> {
        let n = self.trace.num_functions();
        let mut a = DMatrix::zeros(count, n);
        for d in 0..count {
            for j in 0..n {
                let m: f64 = self
                    .trace
                    .support(j)
                    .iter()
                    .map(|&e| self.trace.moment(j, e, &self.trace.scaled_monomial(d, e)))
                    .sum();
                a[(d, j)] = m / self.trace.integral(j);
            }
        }
        a
    }
}

/// Step I: invert the local mass matrix on each element.
pub fn step1_elementwise_dual(trace: &TraceSpace) -> Result<DualBasis> {
    let p = trace.degree();
    let mut functions = Vec::new();
    for e in 0..trace.num_elements() {
        let polys = &trace.local[e];
        let mut m = DMatrix::zeros(p + 1, p + 1);
        for i in 0..=p {
            for j in 0..=p {
                m[(i, j)] = trace.h(e) * poly_int(&poly_mul(&polys[i], &polys[j]));
            }
        }
        let lu = m.clone().lu();
        let inv = lu
            .try_inverse()
            .ok_or_else(|| Error::Internal(format!("singular local mass matrix on element {e}")))?;
        let d = DMatrix::from_diagonal(&DVector::from_iterator(
            p + 1,
            (0..=p).map(|i| trace.h(e) * poly_int(&polys[i])),
        ));
        // A = D M^{-1}, polished by two steps of iterative refinement
        let mut coef = &d * &inv;
        for _ in 0..2 {
            let r = &d - &coef * &m;
            coef += r * &inv;
        }
        // the columns of D M^{-1} sum to one exactly; restore that in floating point
        let dsum: f64 = d.diagonal().sum();
        for k in 0..=p {
            let defect = 1.0 - coef.column(k).sum();
            for i in 0..=p {
                coef[(i, k)] += defect * d[(i, i)] / dsum;
            }
        }
        for i in 0..=p {
            let mut c = vec![0.0; p + 1];
            for k in 0..=p {
                let a = coef[(i, k)];
                for r in 0..=p {
                    c[r] += a * polys[k][r];
                }
            }
            functions.push(DualFunction { owner: trace.first[e] + i, pieces: vec![(e, c)] });
        }
    }
    Ok(DualBasis { stage: DualStage::Elementwise, trace: trace.clone(), functions })
}

/// Step II: glue the elementwise duals of each primal function.
pub fn step2_glue(dual: &DualBasis) -> Result<DualBasis> {
    if dual.stage != DualStage::Elementwise {
        return Err(Error::Domain("gluing expects an elementwise dual basis".into()));
    }
    let n = dual.trace.num_functions();
    let mut functions: Vec<DualFunction> = (0..n).map(|i| DualFunction { owner: i, pieces: Vec::new() }).collect();
    for f in &dual.functions {
        functions[f.owner].pieces.extend(f.pieces.iter().cloned());
    }
    for f in functions.iter_mut() {
        f.pieces.sort_by_key(|p| p.0);
    }
    Ok(DualBasis { stage: DualStage::Glued, trace: dual.trace.clone(), functions })
}

/// Orthonormal basis of the null space of `a` (columns).
fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let (m, n) = a.shape();
    let mut sq = DMatrix::zeros(n.max(m), n);
    sq.rows_mut(0, m).copy_from(a);
    let svd = sq.svd(false, true);
    let vt = svd.v_t.expect("right singular vectors");
    let smax = svd.singular_values.max();
    let keep: Vec<usize> = (0..n).filter(|&k| svd.singular_values[k] <= 1e-11 * smax.max(1e-300)).collect();
    let mut out = DMatrix::zeros(n, keep.len());
    for (c, &k) in keep.iter().enumerate() {
        out.set_column(c, &vt.row(k).transpose());
    }
    out
}

/// Step III: enlarge supports to at most `2p+1` elements so that the dual
/// span reproduces all polynomials of degree `p`.
///
/// Each `ψ_j` receives a correction supported on the elements of `φ_j`
/// widened by `⌊p/2⌋` on the left and `⌈p/2⌉` on the right. Corrections are
/// orthogonal to every primal trace function, which keeps biorthogonality;
/// their coefficients are the minimum-norm solution of the reproduction
/// conditions.
pub fn step3_optimal(dual: &DualBasis) -> Result<DualBasis> {
    if dual.stage != DualStage::Glued {
        return Err(Error::Domain("Step III expects a glued dual basis".into()));
    }
    let trace = &dual.trace;
    let p = trace.degree();
    let n = trace.num_functions();
    let ne = trace.num_elements();
    let (left, right) = (p / 2, p - p / 2);
    let windows: Vec<Vec<usize>> = (0..n)
        .map(|j| {
            let s = trace.support(j);
            let lo = s[0].saturating_sub(left);
            let hi = (s[s.len() - 1] + right).min(ne - 1);
            (lo..=hi).collect()
        })
        .collect();
    let local_monomial = |r: usize| -> Poly {
        let mut c = vec![0.0; r + 1];
        c[r] = 1.0;
        c
    };
    // per-function null space of the orthogonality conditions
    let mut nulls = Vec::with_capacity(n);
    for w in &windows {
        let neighbours: Vec<usize> = (0..n).filter(|&k| w.iter().any(|&e| trace.piece(k, e).is_some())).collect();
        let mut o = DMatrix::zeros(neighbours.len(), w.len() * (p + 1));
        for (row, &k) in neighbours.iter().enumerate() {
            for (we, &e) in w.iter().enumerate() {
                for r in 0..=p {
                    o[(row, we * (p + 1) + r)] = trace.moment(k, e, &local_monomial(r));
                }
            }
        }
        nulls.push(null_space(&o));
    }
    let offsets: Vec<usize> = nulls
        .iter()
        .scan(0, |acc, nmat| {
            let o = *acc;
            *acc += nmat.ncols();
            Some(o)
        })
        .collect();
    let unknowns = offsets[n - 1] + nulls[n - 1].ncols();
    let a = dual.monomial_functionals(p + 1);
    let rows = (p + 1) * ne * (p + 1);
    let mut sys = DMatrix::zeros(rows, unknowns);
    let mut rhs = DVector::zeros(rows);
    for d in 0..=p {
        for e in 0..ne {
            let mut err = trace.scaled_monomial(d, e);
            err.resize(p + 1, 0.0);
            for (j, f) in dual.functions.iter().enumerate() {
                if let Some(c) = f.piece(e) {
                    for r in 0..=p {
                        err[r] -= a[(d, j)] * c[r];
                    }
                }
            }
            for r in 0..=p {
                let row = (d * ne + e) * (p + 1) + r;
                rhs[row] = err[r];
                for j in 0..n {
                    if let Some(we) = windows[j].iter().position(|&x| x == e) {
                        let nm = &nulls[j];
                        for q in 0..nm.ncols() {
                            sys[(row, offsets[j] + q)] += a[(d, j)] * nm[(we * (p + 1) + r, q)];
                        }
                    }
                }
            }
        }
    }
    let svd = sys.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let z = svd
        .solve(&rhs, 1e-12 * smax)
        .map_err(|e| Error::Internal(format!("Step III least squares: {e}")))?;
    let resid = (&sys * &z - &rhs).amax();
    if resid > 1e-10 {
        return Err(Error::Unsupported(format!(
            "Step III reproduction system inconsistent on this mesh (residual {resid:e})"
        )));
    }
    let mut functions = dual.functions.clone();
    for j in 0..n {
        let nm = &nulls[j];
        let cj = nm * z.rows(offsets[j], nm.ncols());
        for (we, &e) in windows[j].iter().enumerate() {
            let corr: Vec<f64> = (0..=p).map(|r| cj[we * (p + 1) + r]).collect();
            if corr.iter().all(|v| v.abs() < 1e-15) {
                continue;
            }
            let f = &mut functions[j];
            match f.pieces.iter_mut().find(|pc| pc.0 == e) {
                Some(pc) => pc.1.iter_mut().zip(&corr).for_each(|(a, b)| *a += b),
                None => f.pieces.push((e, corr)),
            }
        }
        functions[j].pieces.sort_by_key(|pc| pc.0);
    }
    Ok(DualBasis { stage: DualStage::Optimal, trace: trace.clone(), functions })
}

/// Coefficient matrix of the crosspoint modification.
#[derive(Debug, Clone)]
pub struct CrosspointModification {
    pub p: usize,
    pub l: usize,
    /// `c[(i, j)]`, `i < p`, `j < l`.
    pub c: DMatrix<f64>,
    /// Exact entries when computed in rational arithmetic.
    pub exact: Option<Vec<Vec<Ratio<i64>>>>,
}

/// Elementary symmetric polynomial `e_k` of rational arguments.
fn elem_sym(x: &[Ratio<i64>], k: usize) -> Ratio<i64> {
    let mut e = vec![Ratio::from_integer(0); k + 1];
    e[0] = Ratio::from_integer(1);
    for &xi in x {
        for j in (1..=k).rev() {
            e[j] = e[j] + e[j - 1] * xi;
        }
    }
    e[k]
}

fn rational_solve(mut a: Vec<Vec<Ratio<i64>>>, mut b: Vec<Vec<Ratio<i64>>>) -> Option<Vec<Vec<Ratio<i64>>>> {
    let n = a.len();
    let zero = Ratio::from_integer(0);
    for col in 0..n {
        let piv = (col..n).find(|&r| a[r][col] != zero)?;
        a.swap(col, piv);
        b.swap(col, piv);
        for r in 0..n {
            if r != col && a[r][col] != zero {
                let f = a[r][col] / a[col][col];
                for c in 0..n {
                    let v = a[col][c];
                    a[r][c] = a[r][c] - f * v;
                }
                for c in 0..b[0].len() {
                    let v = b[col][c];
                    b[r][c] = b[r][c] - f * v;
                }
            }
        }
    }
    for r in 0..n {
        let d = a[r][r];
        for v in b[r].iter_mut() {
            *v = *v / d;
        }
    }
    Some(b)
}

/// Modification matrix for an open knot vector with unit interior spacing
/// at the crosspoint, in exact rational arithmetic.
///
/// `C` maps the coefficients of the `l` removed functions onto the next `p`
/// so that polynomials of degree `< p` stay in the reduced span.
pub fn crosspoint_matrix(p: usize, l: usize) -> Result<CrosspointModification> {
    if p == 0 || l == 0 || l > p || p > 8 {
        return Err(Error::Unsupported(format!("crosspoint modification for p={p}, l={l}")));
    }
    let r = |v: i64| Ratio::from_integer(v);
    let mut knots = vec![r(0); p + 1];
    for k in 1..=(p + l + 1) as i64 {
        knots.push(r(k));
    }
    // g[k][j]: coefficient of s^k in B-spline j (blossom at t_{j+1..j+p})
    let binom = |n: usize, k: usize| -> i64 { (0..k).fold(1i64, |acc, i| acc * (n - i) as i64 / (i + 1) as i64) };
    let g: Vec<Vec<Ratio<i64>>> = (0..p)
        .map(|k| (0..p + l).map(|j| elem_sym(&knots[j + 1..=j + p], k) / r(binom(p, k))).collect())
        .collect();
    let a1: Vec<Vec<Ratio<i64>>> = g.iter().map(|row| row[..l].to_vec()).collect();
    let a2: Vec<Vec<Ratio<i64>>> = g.iter().map(|row| row[l..l + p].to_vec()).collect();
    let exact = rational_solve(a2, a1).ok_or_else(|| Error::Internal("singular crosspoint system".into()))?;
    let c = DMatrix::from_fn(p, l, |i, j| *exact[i][j].numer() as f64 / *exact[i][j].denom() as f64);
    Ok(CrosspointModification { p, l, c, exact: Some(exact) })
}

/// Modification matrix from coefficient functionals: `g[(k, j)]` is the
/// coefficient of the `k`-th polynomial (degree `< p`) on function `j`,
/// functions ordered away from the crosspoint.
pub fn crosspoint_from_functionals(g: &DMatrix<f64>, p: usize, l: usize) -> Result<CrosspointModification> {
    if l == 0 || l > p || g.nrows() < p || g.ncols() < p + l {
        return Err(Error::Unsupported(format!("crosspoint modification for p={p}, l={l}")));
    }
    let a1 = g.view((0, 0), (p, l)).into_owned();
    let a2 = g.view((0, l), (p, p)).into_owned();
    let c = a2
        .lu()
        .solve(&a1)
        .ok_or_else(|| Error::Internal("singular crosspoint functional matrix".into()))?;
    Ok(CrosspointModification { p, l, c, exact: None })
}

/// Interface end at which a crosspoint sits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum End {
    Left,
    Right,
}

/// Base family of a multiplier space.
#[derive(Debug, Clone)]
pub enum MultiplierBase {
    /// The primal trace B-splines themselves.
    Standard(TraceSpace),
    Dual(DualBasis),
}

/// Multiplier space: linear combinations of a base family.
#[derive(Debug, Clone)]
pub struct MultiplierSpace {
    pub base: MultiplierBase,
    /// `combos[m]`: `(base index, coefficient)` terms of multiplier `m`.
    pub combos: Vec<Vec<(usize, f64)>>,
}

impl MultiplierSpace {
    pub fn new(base: MultiplierBase) -> Self {
        let n = match &base {
            MultiplierBase::Standard(t) => t.num_functions(),
            MultiplierBase::Dual(d) => d.len(),
        };
        Self { base, combos: (0..n).map(|i| vec![(i, 1.0)]).collect() }
    }

    pub fn trace(&self) -> &TraceSpace {
        match &self.base {
            MultiplierBase::Standard(t) => t,
            MultiplierBase::Dual(d) => &d.trace,
        }
    }

    pub fn len(&self) -> usize {
        self.combos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combos.is_empty()
    }

    /// Nonzero base functions `(index, value)` at trace parameter `t`.
    fn base_values(&self, t: f64) -> Result<Vec<(usize, f64)>> {
        match &self.base {
            MultiplierBase::Standard(tr) => {
                let (span, v) = tr.kv.eval_basis(t)?;
                let first = span - tr.degree();
                Ok(v.into_iter().enumerate().map(|(k, x)| (first + k, x)).collect())
            }
            MultiplierBase::Dual(d) => Ok(d.eval_nonzero(t)?.into_iter().map(|(i, v, _)| (i, v)).collect()),
        }
    }

    /// Values of all multipliers at `t` (dense).
    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let base = self.base_values(t)?;
        let nb = match &self.base {
            MultiplierBase::Standard(tr) => tr.num_functions(),
            MultiplierBase::Dual(d) => d.len(),
        };
        let mut dense = vec![0.0; nb];
        for (i, v) in base {
            dense[i] = v;
        }
        Ok(self.combos.iter().map(|c| c.iter().map(|&(i, a)| a * dense[i]).sum()).collect())
    }

    /// Coefficient functionals of monomials of degree `< count` on the base family.
    fn base_functionals(&self, count: usize, end: End) -> Result<DMatrix<f64>> {
        match &self.base {
            MultiplierBase::Dual(d) => {
                let g = d.monomial_functionals(count);
                Ok(if end == End::Right { mirror_monomials(&g) } else { g })
            }
            MultiplierBase::Standard(tr) => {
                // B-spline coefficients of s^k: blossoms at t_{j+1..j+p}
                let kv = tr.knot_vector();
                let p = kv.degree();
                let (a, b) = (kv.start(), kv.end());
                let n = kv.num_basis();
                let mut g = DMatrix::zeros(count, n);
                for j in 0..n {
                    let args: Vec<f64> = kv.knots()[j + 1..=j + p].iter().map(|t| (t - a) / (b - a)).collect();
                    for k in 0..count {
                        g[(k, j)] = elem_sym_f64(&args, k) / crate::spline::binomial(p, k);
                    }
                }
                Ok(if end == End::Right { mirror_monomials(&g) } else { g })
            }
        }
    }

    /// Removes `l` multipliers at `end` and adds their coefficients onto the
    /// next `p` ones so that polynomials of degree `< p` remain representable.
    pub fn modify_crosspoint(&mut self, end: End, l: usize) -> Result<CrosspointModification> {
        let p = self.trace().degree();
        let n = self.len();
        if n < p + l {
            return Err(Error::Domain(format!(
                "crosspoint modification needs {} multipliers, only {n} available",
                p + l
            )));
        }
        let nb = match &self.base {
            MultiplierBase::Standard(t) => t.num_functions(),
            MultiplierBase::Dual(d) => d.len(),
        };
        let g_base = self.base_functionals(p, end)?;
        // functionals of the current multipliers, ordered away from the end
        let order: Vec<usize> = match end {
            End::Left => (0..n).collect(),
            End::Right => (0..n).rev().collect(),
        };
        let mut g = DMatrix::zeros(p, p + l);
        for (col, &m) in order.iter().take(p + l).enumerate() {
            // after earlier modifications a multiplier keeps the coefficient
            // functional of the base function it started from
            let bi = self.combos[m][0].0;
            if bi >= nb {
                return Err(Error::Internal("multiplier without a base function".into()));
            }
            g.set_column(col, &g_base.column(bi));
        }
        let pristine = order.iter().take(p + l).all(|&m| self.combos[m].len() == 1);
        let cm = if let (MultiplierBase::Standard(tr), true) = (&self.base, pristine && unit_spacing_at(self.trace(), end)) {
            let _ = tr;
            crosspoint_matrix(p, l)?
        } else {
            crosspoint_from_functionals(&g, p, l)?
        };
        let removed: Vec<usize> = order[..l].to_vec();
        for i in 0..p {
            let target = order[l + i];
            for (j, &rm) in removed.iter().enumerate() {
                let extra: Vec<(usize, f64)> = self.combos[rm].iter().map(|&(b, a)| (b, a * cm.c[(i, j)])).collect();
                self.combos[target].extend(extra);
            }
        }
        let mut keep: Vec<bool> = vec![true; n];
        for &rm in &removed {
            keep[rm] = false;
        }
        let mut k = 0;
        self.combos.retain(|_| {
            let r = keep[k];
            k += 1;
            r
        });
        Ok(cm)
    }
}

fn elem_sym_f64(x: &[f64], k: usize) -> f64 {
    let mut e = vec![0.0; k + 1];
    e[0] = 1.0;
    for &xi in x {
        for j in (1..=k).rev() {
            e[j] += e[j - 1] * xi;
        }
    }
    e[k]
}

/// Re-expresses functionals of `s^k` as functionals of `(1 - s)^k`.
fn mirror_monomials(g: &DMatrix<f64>) -> DMatrix<f64> {
    let count = g.nrows();
    let mut out = DMatrix::zeros(count, g.ncols());
    for k in 0..count {
        // (1 - s)^k = Σ_r binom(k, r) (-1)^r s^r
        for r in 0..=k {
            let c = crate::spline::binomial(k, r) * if r % 2 == 0 { 1.0 } else { -1.0 };
            for j in 0..g.ncols() {
                out[(k, j)] += c * g[(r, j)];
            }
        }
    }
    out
}

/// True when the first `p+1` knot spans at `end` are uniform, i.e. the
/// tabulated modification applies after scaling.
fn unit_spacing_at(trace: &TraceSpace, end: End) -> bool {
    let p = trace.degree();
    let el = trace.elements();
    if el.len() < p + 2 || !trace.knot_vector().is_clamped() {
        return false;
    }
    let interior = &trace.knot_vector().knots()[p + 1..trace.num_functions()];
    if interior.windows(2).any(|w| w[0] == w[1]) {
        return false;
    }
    let span: Vec<f64> = match end {
        End::Left => el[..p + 1].iter().map(|e| e.1 - e.0).collect(),
        End::Right => el[el.len() - p - 1..].iter().map(|e| e.1 - e.0).collect(),
    };
    span.iter().all(|h| (h - span[0]).abs() <= 1e-12 * span[0])
}

/// Per-element coefficient dump of a dual basis.
#[derive(Debug, Clone, Serialize)]
pub struct DualDumpRow {
    pub function: usize,
    pub element: usize,
    pub element_start: f64,
    pub element_end: f64,
    pub coefficients: Vec<f64>,
}

pub fn dump_rows(d: &DualBasis) -> Vec<DualDumpRow> {
    let mut out = Vec::new();
    for (i, f) in d.functions.iter().enumerate() {
        for (e, c) in &f.pieces {
            let (a, b) = d.trace.elements()[*e];
            out.push(DualDumpRow { function: i, element: *e, element_start: a, element_end: b, coefficients: c.clone() });
        }
    }
    out
}
