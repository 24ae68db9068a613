//! Scenario documents: the JSON configuration for a whole run.
//!
//! A scenario bundles the model coefficients, the grid, the initial hybrid
//! state, solver settings, the list of entropy functionals to certify, and
//! output options.  Parsing is strict: unknown keys, duplicate keys and
//! semantically invalid values are all rejected with a message naming the
//! offending path.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use serde::de::{DeserializeSeed, MapAccess, SeqAccess, Visitor};
use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientSet, FunctionSpec};
use crate::dynamics::SolverConfig;
use crate::entropy::EntropySpec;
use crate::grid::{Atom, Grid, HybridMeasure};
use crate::{Error, Result};

/// Grid block of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub m: usize,
    pub x_max: f64,
}

impl GridConfig {
    pub fn to_grid(&self) -> Result<Grid> {
        Grid::new(self.m, self.x_max)
    }
}

/// Initial density profiles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DensityInit {
    /// No absolutely continuous part.
    Zero,
    /// Smooth compactly supported bump, normalized to the given mass.
    Bump { center: f64, width: f64, mass: f64 },
    /// Per-cell density values (length must match the grid).
    Samples { values: Vec<f64> },
    /// The steady profile scaled to the given mass; requires the
    /// eigenprofile to be available.
    Steady { mass: f64 },
}

impl Default for DensityInit {
    fn default() -> Self {
        DensityInit::Zero
    }
}

/// Initial state block: a density profile plus point masses.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialConfig {
    #[serde(default)]
    pub density: DensityInit,
    #[serde(default)]
    pub atoms: Vec<Atom>,
}

/// An entropy center: either a number or `"auto"`, which resolves to the
/// conserved mass `⟨n⁰, φ⟩` of the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CenterSpec {
    Value(f64),
    Keyword(String),
}

impl CenterSpec {
    fn validate(&self, path: &str) -> Result<()> {
        match self {
            CenterSpec::Value(v) if v.is_finite() => Ok(()),
            CenterSpec::Value(v) => Err(Error::Scenario {
                path: path.into(),
                message: format!("center must be finite, got {v}"),
            }),
            CenterSpec::Keyword(k) if k == "auto" => Ok(()),
            CenterSpec::Keyword(k) => Err(Error::Scenario {
                path: path.into(),
                message: format!("center must be a number or \"auto\", got \"{k}\""),
            }),
        }
    }

    pub fn resolve(&self, auto_center: f64) -> f64 {
        match self {
            CenterSpec::Value(v) => *v,
            CenterSpec::Keyword(_) => auto_center,
        }
    }
}

/// One entropy functional requested in a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum EntropyConfig {
    Quadratic { center: CenterSpec },
    PseudoHuber { center: CenterSpec, delta: f64 },
    Abs { center: CenterSpec },
}

impl EntropyConfig {
    fn center(&self) -> &CenterSpec {
        match self {
            EntropyConfig::Quadratic { center }
            | EntropyConfig::PseudoHuber { center, .. }
            | EntropyConfig::Abs { center } => center,
        }
    }

    /// Turn the config into a concrete spec, substituting the auto center.
    pub fn resolve(&self, auto_center: f64) -> Result<EntropySpec> {
        match self {
            EntropyConfig::Quadratic { center } => {
                Ok(EntropySpec::quadratic(center.resolve(auto_center)))
            }
            EntropyConfig::PseudoHuber { center, delta } => {
                EntropySpec::pseudo_huber(center.resolve(auto_center), *delta)
            }
            EntropyConfig::Abs { center } => Ok(EntropySpec::abs(center.resolve(auto_center))),
        }
    }
}

/// Numerical tolerances the pipeline enforces as stage contracts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    /// Eigensolver stopping tolerance (eigenvalue increment and residual).
    #[serde(default = "default_eigen_tol")]
    pub eigen_tol: f64,
    #[serde(default = "default_eigen_max_iter")]
    pub eigen_max_iter: usize,
    /// Largest allowed relative drift of the conserved quantity.
    #[serde(default = "default_drift_limit")]
    pub drift_limit: f64,
    /// Allowed entropy increase per time step, relative to `H(0)`.
    #[serde(default = "default_mono_tol")]
    pub mono_tol_per_step: f64,
    /// Slack added to `H(0)` when checking the dissipation budget.
    #[serde(default = "default_budget_slack")]
    pub budget_slack: f64,
    /// Tolerance for the coefficient-assumption checks.
    #[serde(default = "default_validation_tol")]
    pub validation_tol: f64,
    /// Acceptable observed convergence orders in a refinement study.
    #[serde(default = "default_order_min")]
    pub order_min: f64,
    #[serde(default = "default_order_max")]
    pub order_max: f64,
}

fn default_eigen_tol() -> f64 {
    1e-8
}
fn default_eigen_max_iter() -> usize {
    200_000
}
fn default_drift_limit() -> f64 {
    1e-2
}
fn default_mono_tol() -> f64 {
    1e-8
}
fn default_budget_slack() -> f64 {
    1e-6
}
fn default_validation_tol() -> f64 {
    1e-8
}
fn default_order_min() -> f64 {
    0.5
}
fn default_order_max() -> f64 {
    1.5
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            eigen_tol: default_eigen_tol(),
            eigen_max_iter: default_eigen_max_iter(),
            drift_limit: default_drift_limit(),
            mono_tol_per_step: default_mono_tol(),
            budget_slack: default_budget_slack(),
            validation_tol: default_validation_tol(),
            order_min: default_order_min(),
            order_max: default_order_max(),
        }
    }
}

/// Output block: artifact directory, contract tolerances, study levels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: String,
    #[serde(default)]
    pub tolerances: Tolerances,
    /// Grid sizes for the refinement study (the reference runs at twice the
    /// finest level).
    #[serde(default = "default_study_levels")]
    pub study_levels: Vec<usize>,
}

fn default_dir() -> String {
    "out".into()
}
fn default_study_levels() -> Vec<usize> {
    vec![100, 200, 400]
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_dir(),
            tolerances: Tolerances::default(),
            study_levels: default_study_levels(),
        }
    }
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub coefficients: CoefficientSet,
    pub grid: GridConfig,
    #[serde(default)]
    pub initial: InitialConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub entropy: Vec<EntropyConfig>,
    #[serde(default)]
    pub output: OutputConfig,
}

fn fail(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Scenario {
        path: path.into(),
        message: message.into(),
    }
}

fn check_samples_spec(path: &str, spec: &FunctionSpec, m: usize) -> Result<()> {
    if let FunctionSpec::Samples { values } = spec {
        if values.len() != m {
            return Err(fail(
                format!("{path}.values"),
                format!("expected {m} samples (one per cell), got {}", values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(fail(
                format!("{path}.values[{i}]"),
                "samples must be finite",
            ));
        }
    }
    Ok(())
}

impl Scenario {
    /// Semantic validation beyond what the type structure enforces.
    pub fn validate(&self) -> Result<()> {
        if self.grid.m < 2 {
            return Err(fail("grid.m", "need at least two cells"));
        }
        if !(self.grid.x_max > 0.0) || !self.grid.x_max.is_finite() {
            return Err(fail(
                "grid.x_max",
                format!("domain size must be positive and finite, got {}", self.grid.x_max),
            ));
        }
        if !(self.coefficients.g_floor > 0.0) {
            return Err(fail(
                "coefficients.g_floor",
                format!("growth floor must be positive, got {}", self.coefficients.g_floor),
            ));
        }
        check_samples_spec("coefficients.growth", &self.coefficients.growth, self.grid.m)?;
        check_samples_spec(
            "coefficients.division",
            &self.coefficients.division,
            self.grid.m,
        )?;

        match &self.initial.density {
            DensityInit::Zero => {}
            DensityInit::Bump {
                center,
                width,
                mass,
            } => {
                if !center.is_finite() {
                    return Err(fail("initial.density.center", "center must be finite"));
                }
                if !(*width > 0.0) || !width.is_finite() {
                    return Err(fail(
                        "initial.density.width",
                        format!("width must be positive, got {width}"),
                    ));
                }
                if !(*mass >= 0.0) || !mass.is_finite() {
                    return Err(fail(
                        "initial.density.mass",
                        format!("mass must be non-negative, got {mass}"),
                    ));
                }
            }
            DensityInit::Samples { values } => {
                if values.len() != self.grid.m {
                    return Err(fail(
                        "initial.density.values",
                        format!(
                            "expected {} samples (one per cell), got {}",
                            self.grid.m,
                            values.len()
                        ),
                    ));
                }
                if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
                    return Err(fail(
                        format!("initial.density.values[{i}]"),
                        format!("densities must be finite and non-negative, got {}", values[i]),
                    ));
                }
            }
            DensityInit::Steady { mass } => {
                if !(*mass > 0.0) || !mass.is_finite() {
                    return Err(fail(
                        "initial.density.mass",
                        format!("steady mass must be positive, got {mass}"),
                    ));
                }
            }
        }
        for (i, atom) in self.initial.atoms.iter().enumerate() {
            if !(atom.position > 0.0) || atom.position > self.grid.x_max {
                return Err(fail(
                    format!("initial.atoms[{i}].position"),
                    format!(
                        "atom position must lie in (0, {}], got {}",
                        self.grid.x_max, atom.position
                    ),
                ));
            }
            if !(atom.mass > 0.0) || !atom.mass.is_finite() {
                return Err(fail(
                    format!("initial.atoms[{i}].mass"),
                    format!("atom mass must be positive, got {}", atom.mass),
                ));
            }
        }

        self.solver
            .validate()
            .map_err(|e| fail("solver", e.to_string()))?;

        for (i, spec) in self.entropy.iter().enumerate() {
            spec.center().validate(&format!("entropy[{i}].center"))?;
            if let EntropyConfig::PseudoHuber { delta, .. } = spec {
                if !(*delta > 0.0) || !delta.is_finite() {
                    return Err(fail(
                        format!("entropy[{i}].delta"),
                        format!("smoothing scale must be positive, got {delta}"),
                    ));
                }
            }
        }

        let t = &self.output.tolerances;
        for (name, v) in [
            ("eigen_tol", t.eigen_tol),
            ("drift_limit", t.drift_limit),
            ("mono_tol_per_step", t.mono_tol_per_step),
            ("budget_slack", t.budget_slack),
            ("validation_tol", t.validation_tol),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(fail(
                    format!("output.tolerances.{name}"),
                    format!("must be positive, got {v}"),
                ));
            }
        }
        if !(t.order_min < t.order_max) {
            return Err(fail(
                "output.tolerances.order_min",
                format!(
                    "order window is empty: [{}, {}]",
                    t.order_min, t.order_max
                ),
            ));
        }
        if self.output.dir.is_empty() {
            return Err(fail("output.dir", "output directory must not be empty"));
        }
        let levels = &self.output.study_levels;
        if levels.len() < 2 {
            return Err(fail(
                "output.study_levels",
                "a refinement study needs at least two levels",
            ));
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) || levels[0] < 2 {
            return Err(fail(
                "output.study_levels",
                format!("levels must be strictly increasing grid sizes, got {levels:?}"),
            ));
        }
        Ok(())
    }

    /// Build the initial hybrid state.  `profile` supplies the steady shape
    /// when the density kind requires it.
    pub fn initial_measure(&self, grid: &Grid, profile: Option<&[f64]>) -> Result<HybridMeasure> {
        let densities = match &self.initial.density {
            DensityInit::Zero => vec![0.0; grid.m],
            DensityInit::Bump {
                center,
                width,
                mass,
            } => {
                let mut v: Vec<f64> = (0..grid.m)
                    .map(|i| {
                        let s = (grid.center(i) - center) / width;
                        if s.abs() < 1.0 {
                            (-1.0 / (1.0 - s * s)).exp()
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let total: f64 = v.iter().sum::<f64>() * grid.dx();
                if *mass > 0.0 && !(total > 0.0) {
                    return Err(Error::Domain(format!(
                        "bump at {center} with width {width} has no mass on the grid"
                    )));
                }
                if total > 0.0 {
                    let s = mass / total;
                    v.iter_mut().for_each(|x| *x *= s);
                }
                v
            }
            DensityInit::Samples { values } => values.clone(),
            DensityInit::Steady { mass } => {
                let profile = profile.ok_or_else(|| {
                    Error::Domain(
                        "steady initial data requires the computed eigenprofile".into(),
                    )
                })?;
                if profile.len() != grid.m {
                    return Err(Error::Domain(format!(
                        "profile length {} does not match grid with {} cells",
                        profile.len(),
                        grid.m
                    )));
                }
                let total: f64 = profile.iter().sum::<f64>() * grid.dx();
                profile.iter().map(|n| mass * n / total).collect()
            }
        };
        HybridMeasure::new(grid, densities, self.initial.atoms.clone())
    }

    /// Resolve every requested entropy into a concrete spec.
    pub fn resolved_entropies(&self, auto_center: f64) -> Result<Vec<EntropySpec>> {
        self.entropy
            .iter()
            .map(|e| e.resolve(auto_center))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Strict parsing
// ---------------------------------------------------------------------------

struct DupSeed;

struct DupVisitor;

impl<'de> Visitor<'de> for DupVisitor {
    type Value = ();

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("any JSON value")
    }

    fn visit_bool<E>(self, _: bool) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_i64<E>(self, _: i64) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_u64<E>(self, _: u64) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_f64<E>(self, _: f64) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_str<E>(self, _: &str) -> std::result::Result<(), E> {
        Ok(())
    }
    fn visit_unit<E>(self) -> std::result::Result<(), E> {
        Ok(())
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<(), A::Error> {
        while seq.next_element_seed(DupSeed)?.is_some() {}
        Ok(())
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<(), A::Error> {
        let mut seen = HashSet::new();
        while let Some(key) = map.next_key::<String>()? {
            if !seen.insert(key.clone()) {
                return Err(serde::de::Error::custom(format!(
                    "duplicate key \"{key}\""
                )));
            }
            map.next_value_seed(DupSeed)?;
        }
        Ok(())
    }
}

impl<'de> DeserializeSeed<'de> for DupSeed {
    type Value = ();

    fn deserialize<D>(self, deserializer: D) -> std::result::Result<(), D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        deserializer.deserialize_any(DupVisitor)
    }
}

/// JSON objects silently keep the last of two identical keys; a scenario
/// with a repeated key is almost certainly a typo, so reject it outright.
fn reject_duplicate_keys(text: &str) -> Result<()> {
    let mut de = serde_json::Deserializer::from_str(text);
    DupSeed.deserialize(&mut de).map_err(|e| Error::Scenario {
        path: "document".into(),
        message: e.to_string(),
    })
}

/// Parse and validate a scenario document.
pub fn parse_scenario(text: &str) -> Result<Scenario> {
    reject_duplicate_keys(text)?;
    let mut de = serde_json::Deserializer::from_str(text);
    let scenario: Scenario =
        serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Scenario {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
    scenario.validate()?;
    Ok(scenario)
}

/// Read and parse a scenario file.
pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    parse_scenario(&text)
}
