//! Scenario files: TOML documents whose field names carry their units.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mortar::{MultiplierKind, QuadratureMode};
use crate::spline::KnotVector;
use crate::studies::{CantileverConfig, ConvergenceConfig, CouplingSolver, EmbeddedConfig, PatchTestConfig};

/// Two-patch plane-strain patch test, swept over degrees and sample counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchTestScenario {
    pub degrees: Vec<usize>,
    pub left_elements: [usize; 2],
    pub right_elements: [usize; 2],
    #[serde(default)]
    pub left_interface_breaks: Vec<f64>,
    pub young_modulus_pa: f64,
    pub poisson_ratio: f64,
    pub displacement_gradient: [f64; 4],
    pub multiplier: MultiplierKind,
    #[serde(default)]
    pub solver: CouplingSolver,
    /// Run the merged-mesh quadrature.
    #[serde(default = "yes")]
    pub merged: bool,
    /// Sample points per slave element for the sampled runs.
    #[serde(default)]
    pub sample_counts: Vec<usize>,
}

fn yes() -> bool {
    true
}

impl PatchTestScenario {
    /// `(degree, quadrature)` runs in reporting order.
    pub fn runs(&self) -> Vec<(usize, QuadratureMode)> {
        let mut out = Vec::new();
        for &p in &self.degrees {
            if self.merged {
                out.push((p, QuadratureMode::MergedParametric));
            }
            out.extend(self.sample_counts.iter().map(|&m| (p, QuadratureMode::Sample(m))));
        }
        out
    }

    pub fn config(&self, degree: usize, quadrature: QuadratureMode) -> PatchTestConfig {
        PatchTestConfig {
            degree,
            left_elements: self.left_elements,
            right_elements: self.right_elements,
            left_interface_breaks: self.left_interface_breaks.clone(),
            young_modulus_pa: self.young_modulus_pa,
            poisson_ratio: self.poisson_ratio,
            displacement_gradient: self.displacement_gradient,
            multiplier: self.multiplier,
            quadrature,
            solver: self.solver,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DualStageName {
    Elementwise,
    Glued,
    Optimal,
}

/// Trace knot vector whose dual basis is dumped.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualBasisScenario {
    pub degree: usize,
    pub knots: Vec<f64>,
    pub stage: DualStageName,
}

/// Pass/fail limits; only those relevant to the command are checked.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Max stress deviation with merged-mesh quadrature.
    pub merged_stress_error: Option<f64>,
    /// Stress error must strictly decrease with the sample count.
    pub monotone_sampling: Option<bool>,
    pub min_slope: Option<f64>,
    pub max_slope: Option<f64>,
    /// Relative tip rotation error on the finest mesh.
    pub max_rotation_error: Option<f64>,
    /// Tip position error over beam length on the finest mesh.
    pub max_position_error_rel: Option<f64>,
    pub max_unit_defect: Option<f64>,
    /// Coupling violation over fiber length, every level.
    pub max_constraint_violation_rel: Option<f64>,
    /// Relative tip change between the two finest levels.
    pub max_plateau_change: Option<f64>,
    /// The gap to the reference must exceed the plateau change.
    pub require_model_gap: Option<bool>,
    pub max_newton_iterations: Option<usize>,
    pub max_biorthogonality_error: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "yes")]
    pub vtk: bool,
    /// Subdivisions per element direction of the VTK sampling lattice.
    #[serde(default = "default_lattice")]
    pub vtk_lattice: usize,
}

fn default_lattice() -> usize {
    3
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { vtk: true, vtk_lattice: default_lattice() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub patch_test: Option<PatchTestScenario>,
    pub mortar_convergence: Option<ConvergenceConfig>,
    pub beam_cantilever: Option<CantileverConfig>,
    pub embedded_beam: Option<EmbeddedConfig>,
    pub dual_basis: Option<DualBasisScenario>,
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Command-line adjustments applied on top of a scenario.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Number of refinement levels; extra levels continue the last step.
    pub refinement_levels: Option<usize>,
    pub quadrature: Option<QuadratureMode>,
}

fn cfg_err(msg: impl Into<String>) -> Error {
    Error::Configuration(msg.into())
}

fn resize_levels(levels: &mut Vec<usize>, k: usize, next: impl Fn(usize) -> usize) -> Result<()> {
    if k == 0 {
        return Err(cfg_err("--refinement-levels must be at least 1"));
    }
    if levels.is_empty() {
        return Err(cfg_err("scenario lists no refinement levels"));
    }
    levels.truncate(k);
    while levels.len() < k {
        let last = *levels.last().expect("non-empty");
        levels.push(next(last));
    }
    Ok(())
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| cfg_err(format!("scenario: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn apply(&mut self, ov: &Overrides) -> Result<()> {
        if let Some(k) = ov.refinement_levels {
            if let Some(c) = self.mortar_convergence.as_mut() {
                resize_levels(&mut c.levels, k, |l| 2 * l)?;
            }
            if let Some(c) = self.beam_cantilever.as_mut() {
                resize_levels(&mut c.elements, k, |l| 2 * l)?;
            }
            if let Some(c) = self.embedded_beam.as_mut() {
                resize_levels(&mut c.levels, k, |l| l + 1)?;
            }
        }
        if let Some(q) = ov.quadrature {
            if let Some(c) = self.mortar_convergence.as_mut() {
                c.quadrature = q;
            }
            if let Some(c) = self.patch_test.as_mut() {
                match q {
                    QuadratureMode::Sample(m) => {
                        c.merged = false;
                        c.sample_counts = vec![m];
                    }
                    _ => {
                        c.merged = true;
                        c.sample_counts.clear();
                    }
                }
            }
        }
        Ok(())
    }

    /// Checks that the section needed by `command` exists and is consistent.
    pub fn validate(&self, section: &str) -> Result<()> {
        let missing = || cfg_err(format!("scenario '{}' has no [{section}] section", self.name));
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(cfg_err(format!("{name} must be positive and finite, got {v}")))
            }
        };
        let t = &self.thresholds;
        for (name, v) in [
            ("merged_stress_error", t.merged_stress_error),
            ("max_rotation_error", t.max_rotation_error),
            ("max_position_error_rel", t.max_position_error_rel),
            ("max_unit_defect", t.max_unit_defect),
            ("max_constraint_violation_rel", t.max_constraint_violation_rel),
            ("max_plateau_change", t.max_plateau_change),
            ("max_biorthogonality_error", t.max_biorthogonality_error),
        ] {
            if let Some(v) = v {
                positive(name, v)?;
            }
        }
        if let (Some(a), Some(b)) = (t.min_slope, t.max_slope) {
            if a > b {
                return Err(cfg_err("min_slope exceeds max_slope"));
            }
        }
        if self.output.vtk_lattice == 0 {
            return Err(cfg_err("vtk_lattice must be at least 1"));
        }
        match section {
            "patch_test" => {
                let s = self.patch_test.as_ref().ok_or_else(missing)?;
                if s.degrees.is_empty() || s.degrees.iter().any(|&p| p == 0) {
                    return Err(cfg_err("patch_test.degrees must list positive degrees"));
                }
                if !s.merged && s.sample_counts.is_empty() {
                    return Err(cfg_err("patch_test runs neither merged nor sampled quadrature"));
                }
                if s.sample_counts.iter().any(|&m| m == 0) {
                    return Err(cfg_err("sample counts must be positive"));
                }
                positive("young_modulus_pa", s.young_modulus_pa)?;
                if s.left_elements.iter().chain(&s.right_elements).any(|&n| n == 0) {
                    return Err(cfg_err("element counts must be positive"));
                }
                if s.left_interface_breaks.iter().any(|&y| !(y > 0.0 && y < 1.0)) {
                    return Err(cfg_err("left_interface_breaks must lie in (0, 1)"));
                }
            }
            "mortar_convergence" => {
                let s = self.mortar_convergence.as_ref().ok_or_else(missing)?;
                if s.levels.is_empty() || s.levels.iter().any(|&k| k == 0) || s.slave_factor == 0 || s.master_factor == 0 {
                    return Err(cfg_err("mortar_convergence needs positive levels and element factors"));
                }
                if s.levels.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(cfg_err("mortar_convergence.levels must increase"));
                }
            }
            "beam_cantilever" => {
                let s = self.beam_cantilever.as_ref().ok_or_else(missing)?;
                if s.elements.is_empty() || s.elements.iter().any(|&e| e == 0) {
                    return Err(cfg_err("beam_cantilever.elements must list positive counts"));
                }
                positive("length_m", s.length_m)?;
                positive("radius_m", s.radius_m)?;
                positive("young_modulus_pa", s.young_modulus_pa)?;
                s.newton.validate()?;
            }
            "embedded_beam" => {
                let s = self.embedded_beam.as_ref().ok_or_else(missing)?;
                if s.levels.is_empty() || s.levels.iter().any(|&n| n == 0) || s.levels.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(cfg_err("embedded_beam.levels must be positive and increasing"));
                }
                for (name, v) in [
                    ("width_m", s.width_m),
                    ("length_m", s.length_m),
                    ("matrix_young_modulus_pa", s.matrix_young_modulus_pa),
                    ("fiber_young_modulus_pa", s.fiber_young_modulus_pa),
                    ("fiber_radius_m", s.fiber_radius_m),
                ] {
                    positive(name, v)?;
                }
                if 2.0 * s.fiber_radius_m >= s.width_m {
                    return Err(cfg_err("fiber diameter must be smaller than the matrix width"));
                }
                s.newton.validate()?;
            }
            "dual_basis" => {
                let s = self.dual_basis.as_ref().ok_or_else(missing)?;
                KnotVector::new(s.knots.clone(), s.degree)?;
            }
            other => return Err(cfg_err(format!("unknown scenario section {other}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CANTILEVER: &str = r#"
name = "roll-up"
[beam_cantilever]
young_modulus_pa = 1.0e4
poisson_ratio = 0.3
radius_m = 0.05
length_m = 1.0
elements = [8, 16]
tip_moment_nm = [0.1, 0.0, 0.0]
[beam_cantilever.newton]
load_steps = 2
[thresholds]
max_unit_defect = 1e-10
"#;

    #[test]
    fn parses_and_validates() {
        let s = Scenario::parse(CANTILEVER).unwrap();
        s.validate("beam_cantilever").unwrap();
        let c = s.beam_cantilever.as_ref().unwrap();
        assert_eq!(c.degree, 3);
        assert_eq!(c.newton.load_steps, 2);
        assert_eq!(c.newton.max_iters, 30);
        assert!(s.output.vtk);
        assert!(matches!(s.validate("embedded_beam"), Err(Error::Configuration(_))));
    }

    #[test]
    fn unknown_fields_and_bad_values_are_configuration_errors() {
        let typo = CANTILEVER.replace("radius_m", "radius");
        assert!(matches!(Scenario::parse(&typo), Err(Error::Configuration(_))));
        let bad = CANTILEVER.replace("length_m = 1.0", "length_m = -1.0");
        assert!(matches!(Scenario::parse(&bad).unwrap().validate("beam_cantilever"), Err(Error::Configuration(_))));
        let thr = CANTILEVER.replace("max_unit_defect = 1e-10", "max_unit_defect = 0.0");
        assert!(Scenario::parse(&thr).unwrap().validate("beam_cantilever").is_err());
    }

    #[test]
    fn overrides_resize_levels_and_quadrature() {
        let mut s = Scenario::parse(CANTILEVER).unwrap();
        s.apply(&Overrides { refinement_levels: Some(4), quadrature: None }).unwrap();
        assert_eq!(s.beam_cantilever.as_ref().unwrap().elements, vec![8, 16, 32, 64]);
        s.apply(&Overrides { refinement_levels: Some(1), quadrature: None }).unwrap();
        assert_eq!(s.beam_cantilever.as_ref().unwrap().elements, vec![8]);
        assert!(s.apply(&Overrides { refinement_levels: Some(0), quadrature: None }).is_err());

        let text = r#"
name = "pt"
[patch_test]
degrees = [1]
left_elements = [2, 2]
right_elements = [3, 3]
young_modulus_pa = 1000.0
poisson_ratio = 0.3
displacement_gradient = [0.01, 0.0, 0.0, 0.0]
multiplier = "dual"
sample_counts = [2, 4]
"#;
        let mut s = Scenario::parse(text).unwrap();
        s.validate("patch_test").unwrap();
        assert_eq!(s.patch_test.as_ref().unwrap().runs().len(), 3);
        s.apply(&Overrides { refinement_levels: None, quadrature: Some(QuadratureMode::Sample(9)) }).unwrap();
        assert_eq!(s.patch_test.as_ref().unwrap().runs(), vec![(1, QuadratureMode::Sample(9))]);
    }
}
