//! Newton's method with backtracking and incremental loading.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{CsrMatrix, SparseLu};

/// Residual `r(x; t)` with its Jacobian, `t ∈ [0, 1]` the load factor.
pub trait NonlinearSystem {
    fn size(&self) -> usize;

    fn residual(&self, x: &[f64], load: f64) -> Result<Vec<f64>>;

    fn jacobian(&self, x: &[f64], load: f64) -> Result<CsrMatrix>;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NewtonConfig {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_iters: usize,
    pub backtrack: f64,
    pub min_step: f64,
    pub load_steps: usize,
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self { abs_tol: 1e-10, rel_tol: 1e-12, max_iters: 30, backtrack: 0.5, min_step: 1.0 / 1024.0, load_steps: 1 }
    }
}

impl NewtonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) || self.max_iters == 0 || self.load_steps == 0 {
            return Err(Error::Configuration("Newton tolerances must be positive, iteration and load-step counts at least 1".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0 && self.min_step > 0.0 && self.min_step <= 1.0) {
            return Err(Error::Configuration("line search needs 0 < factor < 1 and 0 < min step <= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SolveReport {
    pub load_step: usize,
    pub load: f64,
    pub iterations: usize,
    /// Max-norm residual before each iteration and after the last one.
    pub residual_history: Vec<f64>,
    pub step_lengths: Vec<f64>,
    pub final_residual: f64,
    pub converged: bool,
}

fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

fn divergence(reason: &str, report: &SolveReport) -> Error {
    Error::Divergence { reason: reason.into(), iterations: report.iterations, residual: report.final_residual }
}

/// Newton iteration at a fixed load factor.
pub fn newton_solve<S: NonlinearSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    load: f64,
    cfg: &NewtonConfig,
) -> Result<(Vec<f64>, SolveReport)> {
    cfg.validate()?;
    let mut x = x0.to_vec();
    let mut r = sys.residual(&x, load)?;
    let mut norm = max_norm(&r);
    let r0 = norm;
    let mut report = SolveReport {
        load_step: 0,
        load,
        iterations: 0,
        residual_history: vec![norm],
        step_lengths: Vec::new(),
        final_residual: norm,
        converged: false,
    };
    let mut lu: Option<SparseLu> = None;
    let mut growth = 0;
    while !(norm <= cfg.abs_tol || norm <= cfg.rel_tol * r0) {
        if !norm.is_finite() {
            return Err(divergence("non-finite residual", &report));
        }
        if report.iterations == cfg.max_iters {
            return Err(divergence("iteration limit reached", &report));
        }
        let jac = sys.jacobian(&x, load)?;
        let fact = match lu.take() {
            Some(f) => f.refactor(&jac)?,
            None => SparseLu::factor(&jac)?,
        };
        let dx = fact.solve(&r)?;
        lu = Some(fact);
        let mut alpha = 1.0;
        let (xn, rn, nn) = loop {
            let trial: Vec<f64> = x.iter().zip(&dx).map(|(a, d)| a - alpha * d).collect();
            let accepted = match sys.residual(&trial, load) {
                Ok(rt) => {
                    let nt = max_norm(&rt);
                    if (nt.is_finite() && nt < norm) || alpha * cfg.backtrack < cfg.min_step {
                        Some((trial, rt, nt))
                    } else {
                        None
                    }
                }
                Err(e) if alpha * cfg.backtrack < cfg.min_step => return Err(e),
                Err(_) => None,
            };
            if let Some(a) = accepted {
                break a;
            }
            alpha *= cfg.backtrack;
        };
        growth = if nn > norm { growth + 1 } else { 0 };
        x = xn;
        r = rn;
        norm = nn;
        report.iterations += 1;
        report.residual_history.push(norm);
        report.step_lengths.push(alpha);
        report.final_residual = norm;
        if growth >= 5 {
            return Err(divergence("residual grew over 5 consecutive steps", &report));
        }
    }
    report.converged = true;
    Ok((x, report))
}

/// Applies the load in `cfg.load_steps` equal increments.
pub fn solve_incremental<S: NonlinearSystem + ?Sized>(
    sys: &S,
    x0: &[f64],
    cfg: &NewtonConfig,
) -> Result<(Vec<f64>, Vec<SolveReport>)> {
    cfg.validate()?;
    let mut x = x0.to_vec();
    let mut reports = Vec::with_capacity(cfg.load_steps);
    for step in 1..=cfg.load_steps {
        let load = step as f64 / cfg.load_steps as f64;
        let (xn, mut rep) = newton_solve(sys, &x, load, cfg).map_err(|e| match e {
            Error::Divergence { reason, iterations, residual } => Error::Divergence {
                reason: format!("load step {step}/{}: {reason}", cfg.load_steps),
                iterations,
                residual,
            },
            other => other,
        })?;
        rep.load_step = step;
        reports.push(rep);
        x = xn;
    }
    Ok((x, reports))
}

/// Largest relative mismatch between `J v` and the central difference
/// `(r(x + h v) - r(x - h v)) / 2h` over the given directions.
pub fn check_jacobian<S: NonlinearSystem + ?Sized>(
    sys: &S,
    x: &[f64],
    load: f64,
    directions: &[Vec<f64>],
    h: f64,
) -> Result<f64> {
    let jac = sys.jacobian(x, load)?;
    let mut worst: f64 = 0.0;
    for v in directions {
        let jv = jac.mul_vec(v);
        let xp: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + h * b).collect();
        let xm: Vec<f64> = x.iter().zip(v).map(|(a, b)| a - h * b).collect();
        let rp = sys.residual(&xp, load)?;
        let rm = sys.residual(&xm, load)?;
        let fd: Vec<f64> = rp.iter().zip(&rm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        let scale = max_norm(&jv).max(max_norm(&fd)).max(1e-300);
        let diff = jv.iter().zip(&fd).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(diff / scale);
    }
    Ok(worst)
}
