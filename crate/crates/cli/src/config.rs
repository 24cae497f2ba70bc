//! Experiment configuration documents.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use stoplab::condest::{Observable, SmoothFn};
use stoplab::paths::TimeGrid;
use stoplab::processes::{Adaptation, ProcessSpec};
use stoplab::stopderiv::{Estimator, ShrinkFamily, VarianceVariant};
use stoplab::stopping::StoppingRule;
use stoplab::theorems::{RuleId, Sizes, Tolerances};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

fn default_dt() -> f64 {
    1e-4
}

fn default_horizon() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_horizon")]
    pub horizon: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig { dt: default_dt(), horizon: default_horizon() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyKindConfig {
    Offset,
    FirstExit,
}

fn default_initial() -> f64 {
    0.1
}

fn default_factor() -> f64 {
    0.5
}

fn default_levels() -> usize {
    4
}

fn default_cap() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyConfig {
    #[serde(default = "FamilyConfig::default_kind")]
    pub kind: FamilyKindConfig,
    #[serde(default = "default_initial")]
    pub initial: f64,
    #[serde(default = "default_factor")]
    pub factor: f64,
    #[serde(default = "default_levels")]
    pub levels: usize,
    /// Cap of first-exit rules, in model time.
    #[serde(default = "default_cap")]
    pub cap: f64,
}

impl FamilyConfig {
    fn default_kind() -> FamilyKindConfig {
        FamilyKindConfig::Offset
    }

    pub fn family(&self) -> ShrinkFamily {
        let mut f = match self.kind {
            FamilyKindConfig::Offset => ShrinkFamily::offset(self.initial, self.levels),
            FamilyKindConfig::FirstExit => ShrinkFamily::first_exit(self.initial, self.cap, self.levels),
        };
        f.factor = self.factor;
        f
    }
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            kind: FamilyKindConfig::Offset,
            initial: default_initial(),
            factor: default_factor(),
            levels: default_levels(),
            cap: default_cap(),
        }
    }
}

fn default_outer() -> usize {
    200
}

fn default_continuations() -> usize {
    1000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizesConfig {
    #[serde(default = "default_outer")]
    pub outer: usize,
    #[serde(default = "default_continuations")]
    pub continuations: usize,
}

impl Default for SizesConfig {
    fn default() -> Self {
        SizesConfig { outer: default_outer(), continuations: default_continuations() }
    }
}

fn default_intervals() -> usize {
    3
}

fn default_samples() -> usize {
    2000
}

/// Parameters used only by `check:` experiments on theorems.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    /// Anchors for zero-drift, FTC and quadratic-variation checks; defaults
    /// to the experiment anchor.
    #[serde(default)]
    pub anchors: Option<Vec<StoppingRule>>,
    /// Claimed variance rate `a` (quadratic variation, time change).
    #[serde(default)]
    pub rate: Option<Adaptation>,
    #[serde(default = "default_intervals")]
    pub intervals: usize,
    /// Paths for pathwise checks (QV, time change, first exit, laws).
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Time of the marginal compared by the distribution check.
    #[serde(default)]
    pub t: Option<f64>,
    #[serde(default)]
    pub other_process: Option<ProcessSpec>,
    #[serde(default)]
    pub level: Option<f64>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub target: Option<f64>,
}

impl Default for CheckConfig {
    fn default() -> Self {
        CheckConfig {
            anchors: None,
            rate: None,
            intervals: default_intervals(),
            samples: default_samples(),
            t: None,
            other_process: None,
            level: None,
            radius: None,
            target: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default)]
    pub dir: Option<String>,
    /// Prepended to every artifact file name.
    #[serde(default)]
    pub prefix: String,
}

fn default_paths() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: String,
    #[serde(default)]
    pub process: Option<ProcessSpec>,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default = "ExperimentConfig::default_anchor")]
    pub anchor: StoppingRule,
    #[serde(default)]
    pub family: FamilyConfig,
    #[serde(default)]
    pub sizes: SizesConfig,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub tolerances: Option<Tolerances>,
    #[serde(default)]
    pub observable: Option<Observable>,
    #[serde(default)]
    pub variant: Option<VarianceVariant>,
    /// Coordinates for `covariance`; omitted means the full matrix.
    #[serde(default)]
    pub pair: Option<[usize; 2]>,
    #[serde(default)]
    pub function: Option<SmoothFn>,
    /// Number of paths written by `simulate`.
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default)]
    pub check: CheckConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

/// Theorem checks that run on the configured process.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TheoremId {
    ZeroDrift,
    Ftc,
    QuadraticVariation,
    LevyTimeChange,
    DistinctDistributions,
    EqualCharacteristics,
    CharacteristicOperator,
    FirstExitMean,
}

impl TheoremId {
    pub const ALL: [(&'static str, TheoremId); 8] = [
        ("ZeroDrift", TheoremId::ZeroDrift),
        ("FTC", TheoremId::Ftc),
        ("QuadraticVariation", TheoremId::QuadraticVariation),
        ("LevyTimeChange", TheoremId::LevyTimeChange),
        ("DistinctDistributions", TheoremId::DistinctDistributions),
        ("EqualCharacteristics", TheoremId::EqualCharacteristics),
        ("CharacteristicOperator", TheoremId::CharacteristicOperator),
        ("FirstExitMean", TheoremId::FirstExitMean),
    ];

    pub fn name(&self) -> &'static str {
        TheoremId::ALL.iter().find(|(_, t)| t == self).map(|(n, _)| *n).expect("listed")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckTarget {
    Rule(RuleId),
    Theorem(TheoremId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Simulate,
    Drift,
    VarianceRate,
    Covariance,
    Characteristic,
    Check(CheckTarget),
}

impl FromStr for Experiment {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        Ok(match s {
            "simulate" => Experiment::Simulate,
            "drift" => Experiment::Drift,
            "variance_rate" => Experiment::VarianceRate,
            "covariance" => Experiment::Covariance,
            "characteristic" => Experiment::Characteristic,
            _ => {
                let id = s
                    .strip_prefix("check:")
                    .ok_or_else(|| CliError::config("experiment", format!("unknown experiment {s:?}")))?;
                if let Some((_, t)) = TheoremId::ALL.iter().find(|(n, _)| n.eq_ignore_ascii_case(id)) {
                    Experiment::Check(CheckTarget::Theorem(*t))
                } else {
                    let rule = id
                        .parse::<RuleId>()
                        .map_err(|_| CliError::config("experiment", format!("unknown check {id:?}")))?;
                    Experiment::Check(CheckTarget::Rule(rule))
                }
            }
        })
    }
}

fn positive(field: &str, x: f64) -> CliResult<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(CliError::config(field, format!("must be a positive finite number, got {x}")))
    }
}

fn at_least(field: &str, n: usize, min: usize) -> CliResult<()> {
    if n >= min {
        Ok(())
    } else {
        Err(CliError::config(field, format!("must be at least {min}, got {n}")))
    }
}

impl ExperimentConfig {
    fn default_anchor() -> StoppingRule {
        StoppingRule::AtTime { t: 0.0 }
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "<root>".to_string() } else { path };
            CliError::config(field, e.inner())
        })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn experiment(&self) -> CliResult<Experiment> {
        self.experiment.parse()
    }

    /// Checks every field and returns the parsed experiment kind.
    pub fn validate(&self) -> CliResult<Experiment> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        let exp = self.experiment()?;
        positive("grid.dt", self.grid.dt)?;
        positive("grid.horizon", self.grid.horizon)?;
        self.grid()?;
        positive("family.initial", self.family.initial)?;
        if !(self.family.factor > 0.0 && self.family.factor < 1.0) {
            return Err(CliError::config("family.factor", format!("must lie in (0, 1), got {}", self.family.factor)));
        }
        at_least("family.levels", self.family.levels, 2)?;
        positive("family.cap", self.family.cap)?;
        at_least("sizes.outer", self.sizes.outer, 2)?;
        at_least("sizes.continuations", self.sizes.continuations, 2)?;
        at_least("paths", self.paths, 1)?;
        at_least("check.intervals", self.check.intervals, 2)?;
        at_least("check.samples", self.check.samples, 2)?;
        self.anchor.validate().map_err(|e| CliError::config("anchor", e))?;
        if let Some(t) = &self.tolerances {
            if !(t.z >= 0.0 && t.tol_abs >= 0.0 && t.tol_rel >= 0.0) {
                return Err(CliError::config("tolerances", "tolerances must be nonnegative"));
            }
        }
        if let Some(p) = &self.process {
            p.validate().map_err(|e| CliError::config("process", e))?;
        }
        let needs_process = !matches!(exp, Experiment::Check(CheckTarget::Rule(_)));
        if needs_process && self.process.is_none() {
            return Err(CliError::config("process", "required for this experiment"));
        }
        if let Some(p) = &self.check.other_process {
            p.validate().map_err(|e| CliError::config("check.other_process", e))?;
        }
        if let (Some(obs), Some(p)) = (&self.observable, &self.process) {
            obs.check_dim(p.dim()).map_err(|e| CliError::config("observable", e))?;
        }
        if let (Some([x, y]), Some(p)) = (self.pair, &self.process) {
            if x >= p.dim() || y >= p.dim() {
                return Err(CliError::config("pair", format!("coordinates must be below {}", p.dim())));
            }
        }
        Ok(exp)
    }

    pub fn grid(&self) -> CliResult<TimeGrid> {
        TimeGrid::with_horizon(self.grid.dt, self.grid.horizon).map_err(|e| CliError::config("grid", e))
    }

    /// The explicit seed: `--seed` wins over the document.
    pub fn seed(&self, cli_seed: Option<u64>) -> CliResult<u64> {
        cli_seed.or(self.seed).ok_or_else(|| CliError::config("seed", "a seed is required (config or --seed)"))
    }

    pub fn process(&self) -> CliResult<&ProcessSpec> {
        self.process.as_ref().ok_or_else(|| CliError::config("process", "required for this experiment"))
    }

    pub fn observable(&self) -> Observable {
        self.observable.clone().unwrap_or_else(|| Observable::coord(0))
    }

    pub fn tolerances(&self) -> Tolerances {
        self.tolerances.unwrap_or_default()
    }

    pub fn estimator(&self, seed: u64) -> CliResult<Estimator> {
        let est = Estimator::new(self.process()?.clone(), self.grid()?)
            .anchor(self.anchor.clone())
            .family(self.family.family())
            .sizes(self.sizes.outer, self.sizes.continuations)
            .seed(seed);
        est.validate().map_err(|e| CliError::from_lab("family", e))?;
        Ok(est)
    }

    /// Sizes for canonical rule scenarios.
    pub fn sizes(&self) -> Sizes {
        Sizes {
            dt: self.grid.dt,
            n_outer: self.sizes.outer,
            m: self.sizes.continuations,
            h0: self.family.initial,
            levels: self.family.levels,
        }
    }

    pub fn anchors(&self) -> Vec<StoppingRule> {
        self.check.anchors.clone().unwrap_or_else(|| vec![self.anchor.clone()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"schema_version": 1, "experiment": "drift", "seed": 3,
        "process": {"kind": "brownian_motion", "x0": 0.0}}"#;

    #[test]
    fn defaults_follow_the_documented_values() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.validate().unwrap(), Experiment::Drift);
        assert_eq!(c.grid, GridConfig { dt: 1e-4, horizon: 1.0 });
        assert_eq!(c.sizes, SizesConfig { outer: 200, continuations: 1000 });
        assert_eq!(c.family.family(), ShrinkFamily::offset(0.1, 4));
        assert_eq!(c.seed(None).unwrap(), 3);
        assert_eq!(c.seed(Some(9)).unwrap(), 9);
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_path() {
        let text = r#"{"schema_version": 1, "experiment": "drift", "seed": 3,
            "grid": {"dt": 0.001, "horizn": 2}}"#;
        match ExperimentConfig::from_json(text) {
            Err(CliError::Config { field, message }) => {
                assert!(field.starts_with("grid"), "{field}");
                assert!(message.contains("horizn"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_dt_names_the_field() {
        let text = r#"{"schema_version": 1, "experiment": "drift", "seed": 3,
            "process": {"kind": "brownian_motion", "x0": 0.0}, "grid": {"dt": -0.001}}"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        match c.validate() {
            Err(CliError::Config { field, .. }) => assert_eq!(field, "grid.dt"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_seed_is_an_error() {
        let text = r#"{"schema_version": 1, "experiment": "drift",
            "process": {"kind": "brownian_motion", "x0": 0.0}}"#;
        let c = ExperimentConfig::from_json(text).unwrap();
        assert!(matches!(c.seed(None), Err(CliError::Config { ref field, .. }) if field == "seed"));
    }

    #[test]
    fn experiment_names() {
        assert_eq!("check:Ito1D_drift".parse::<Experiment>().unwrap(), Experiment::Check(CheckTarget::Rule(RuleId::Ito1dDrift)));
        assert_eq!("check:zerodrift".parse::<Experiment>().unwrap(), Experiment::Check(CheckTarget::Theorem(TheoremId::ZeroDrift)));
        assert!("check:Nothing".parse::<Experiment>().is_err());
        assert!("estimate".parse::<Experiment>().is_err());
    }

    #[test]
    fn config_round_trips() {
        let c = ExperimentConfig::from_json(MINIMAL).unwrap();
        let back = ExperimentConfig::from_json(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&c).unwrap());
    }
}
