//! Stopping-derivative estimators: drift, variance rate, covariance rate and
//! the characteristic operator, each evaluated along a shrinking family of
//! stopping times and extrapolated to the limit.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condest::{moment_from_stops, realize_in_bundle, stop_samples, MomentKind, Observable, SmoothFn};
use crate::error::{LabError, Result};
use crate::paths::{fmt_full, stream_seed, streams, TimeGrid, VectorPath};
use crate::processes::{branch, simulate, Adaptation, BranchEnd, Bundle, ProcessSpec};
use crate::stats::{z_for_level, CI};
use crate::stopping::{realize, RealizedStop, StoppingRule};

/// Share of continuations with `T = S` at which a scale is rejected.
pub const DEGENERATE_FRACTION: f64 = 0.01;

fn default_factor() -> f64 {
    0.5
}

fn default_cap() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FamilyKind {
    Offset,
    FirstExit {
        #[serde(default = "default_cap")]
        cap: f64,
    },
}

/// Geometric family `T_j` with scale `initial * factor^j`, `j < levels`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShrinkFamily {
    pub kind: FamilyKind,
    pub initial: f64,
    #[serde(default = "default_factor")]
    pub factor: f64,
    pub levels: usize,
}

impl ShrinkFamily {
    pub fn offset(initial: f64, levels: usize) -> Self {
        ShrinkFamily { kind: FamilyKind::Offset, initial, factor: 0.5, levels }
    }

    pub fn first_exit(initial: f64, cap: f64, levels: usize) -> Self {
        ShrinkFamily { kind: FamilyKind::FirstExit { cap }, initial, factor: 0.5, levels }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(LabError::InvalidParameter(format!("family needs at least 2 levels, got {}", self.levels)));
        }
        if !(self.initial > 0.0 && self.initial.is_finite()) {
            return Err(LabError::InvalidParameter(format!("initial scale must be positive, got {}", self.initial)));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(LabError::InvalidParameter(format!("factor must lie in (0, 1), got {}", self.factor)));
        }
        if let FamilyKind::FirstExit { cap } = self.kind {
            if !(cap > 0.0 && cap.is_finite()) {
                return Err(LabError::InvalidParameter(format!("first-exit cap must be positive, got {cap}")));
            }
        }
        Ok(())
    }

    pub fn scales(&self) -> Vec<f64> {
        (0..self.levels).map(|j| self.initial * self.factor.powi(j as i32)).collect()
    }

    pub fn rule(&self, scale: f64) -> StoppingRule {
        match self.kind {
            FamilyKind::Offset => StoppingRule::OffsetFromS { h: scale },
            FamilyKind::FirstExit { cap } => StoppingRule::FirstExit { radius: scale, cap },
        }
    }

    pub fn rules(&self) -> Vec<StoppingRule> {
        self.scales().into_iter().map(|s| self.rule(s)).collect()
    }

    /// `(r_J - f r_{J-1}) / (1 - f)`, which removes a bias linear in the scale.
    pub fn extrapolate(&self, coarse: f64, fine: f64) -> f64 {
        (fine - self.factor * coarse) / (1.0 - self.factor)
    }
}

/// How the centre `B_S` of the projected-centre variant is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CentreSource {
    Supplied { value: f64 },
    /// The per-path drift ratio at the same scale.
    EstimatedDrift,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VarianceVariant {
    CondVar,
    RelSecondMoment,
    ProjectedCentre { centre: CentreSource },
    IntegratedDriftCentre { b: Adaptation },
}

/// A quantity evaluated per outer path and per scale.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Functional {
    /// `(E[Y_{T-}] - Y_S) / E[T - S]`
    Drift { obs: Observable },
    VarianceRate { obs: Observable, variant: VarianceVariant },
    CovarianceRate { x: Observable, y: Observable },
    /// `(E[f(Y_T)] - f(Y_S)) / E[T - S]`, evaluated at `T` rather than `T-`.
    Characteristic { obs: Observable },
    /// Stopping derivative of the product of two conditional expectations.
    ProductOfCondExp { x: Observable, y: Observable },
    /// Stopping derivative of `f(E[Y_{T-}])`.
    ComposedCondExp { f: SmoothFn, obs: Observable },
    /// `Y_S`, constant across scales.
    AnchorValue { obs: Observable },
    /// Mean of `T - S`.
    Denominator,
}

impl Functional {
    pub fn drift(obs: Observable) -> Self {
        Functional::Drift { obs }
    }

    pub fn variance(obs: Observable, variant: VarianceVariant) -> Self {
        Functional::VarianceRate { obs, variant }
    }

    fn observables(&self) -> Vec<&Observable> {
        match self {
            Functional::Drift { obs }
            | Functional::VarianceRate { obs, .. }
            | Functional::Characteristic { obs }
            | Functional::ComposedCondExp { obs, .. }
            | Functional::AnchorValue { obs } => vec![obs],
            Functional::CovarianceRate { x, y } | Functional::ProductOfCondExp { x, y } => vec![x, y],
            Functional::Denominator => vec![],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Estimator {
    pub spec: ProcessSpec,
    pub grid: TimeGrid,
    /// Anchor `S`, realized on the outer path from time 0.
    pub anchor: StoppingRule,
    pub family: ShrinkFamily,
    pub n_outer: usize,
    pub m: usize,
    pub seed: u64,
    /// Seed for continuations; defaults to `seed`. Two estimators with the
    /// same `seed` share outer paths even when their branch seeds differ.
    #[serde(default)]
    pub branch_seed: Option<u64>,
    #[serde(default)]
    pub stop_coord: usize,
    pub eps: f64,
    pub tol_rel: f64,
    pub tol_abs: f64,
}

impl Estimator {
    pub fn new(spec: ProcessSpec, grid: TimeGrid) -> Self {
        Estimator {
            spec,
            grid,
            anchor: StoppingRule::AtTime { t: 0.0 },
            family: ShrinkFamily::offset(0.1, 4),
            n_outer: 200,
            m: 1000,
            seed: 0,
            branch_seed: None,
            stop_coord: 0,
            eps: 0.1,
            tol_rel: 0.05,
            tol_abs: 1e-3,
        }
    }

    pub fn anchor(mut self, rule: StoppingRule) -> Self {
        self.anchor = rule;
        self
    }

    pub fn family(mut self, family: ShrinkFamily) -> Self {
        self.family = family;
        self
    }

    pub fn sizes(mut self, n_outer: usize, m: usize) -> Self {
        self.n_outer = n_outer;
        self.m = m;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn branch_seed(mut self, seed: u64) -> Self {
        self.branch_seed = Some(seed);
        self
    }

    pub fn stop_coord(mut self, coord: usize) -> Self {
        self.stop_coord = coord;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.anchor.validate()?;
        self.family.validate()?;
        if self.n_outer < 2 {
            return Err(LabError::InsufficientSamples { n: self.n_outer, needed: 2 });
        }
        if self.m < 2 {
            return Err(LabError::InsufficientBundle { m: self.m });
        }
        if self.stop_coord >= self.spec.dim() {
            return Err(LabError::InvalidParameter(format!("stop coordinate {} out of range", self.stop_coord)));
        }
        Ok(())
    }

    fn outer_seed(&self, i: usize) -> u64 {
        stream_seed(self.seed, streams::OUTER, i as u64)
    }

    fn continuation_seed(&self, i: usize) -> u64 {
        stream_seed(self.branch_seed.unwrap_or(self.seed), streams::BRANCH, i as u64)
    }

    /// Simulates outer path `i`, realizes the anchor, branches and realizes
    /// the whole family on the bundle.
    pub fn draw(&self, i: usize) -> Result<OuterDraw> {
        let outer = simulate(&self.spec, &self.grid, self.outer_seed(i))?;
        let s = realize(&self.anchor, &outer.coords[self.stop_coord], 0, &self.grid)?;
        let s_idx = s.index;
        let rules = self.family.rules();
        let end = match self.family.kind {
            FamilyKind::Offset => BranchEnd::Index(s_idx.saturating_add(self.grid.steps_in(self.family.initial))),
            FamilyKind::FirstExit { .. } => BranchEnd::UntilStopped { rule: &rules[0], coord: self.stop_coord },
        };
        let bundle = branch(&self.spec, &outer, s_idx, self.m, self.continuation_seed(i), end)?;
        let mut stops = Vec::with_capacity(rules.len());
        for (rule, scale) in rules.iter().zip(self.family.scales()) {
            let realized = realize_in_bundle(&bundle, rule, self.stop_coord)?;
            let zero = realized.iter().filter(|r| r.index == s_idx).count();
            let fraction = zero as f64 / realized.len() as f64;
            if fraction >= DEGENERATE_FRACTION {
                return Err(LabError::DegenerateStoppingFamily { scale, fraction });
            }
            stops.push(realized);
        }
        Ok(OuterDraw { index: i, outer, s_idx, bundle, stops })
    }

    /// Applies `f` to every outer draw, in parallel, keeping outer order.
    pub fn map_outer<R: Send>(&self, f: impl Fn(&OuterDraw) -> Result<R> + Sync) -> Result<Vec<R>> {
        self.validate()?;
        (0..self.n_outer).into_par_iter().map(|i| f(&self.draw(i)?)).collect()
    }

    /// Evaluates every functional on the same outer paths and bundles.
    pub fn estimate_many(&self, functionals: &[Functional]) -> Result<Vec<DerivEstimate>> {
        for f in functionals {
            for o in f.observables() {
                o.check_dim(self.spec.dim())?;
            }
        }
        let per_outer = self.map_outer(|d| functionals.iter().map(|f| d.evaluate(f)).collect::<Result<Vec<_>>>())?;
        let scales = self.family.scales();
        Ok((0..functionals.len())
            .map(|q| {
                let per_path: Vec<Vec<f64>> =
                    (0..scales.len()).map(|j| per_outer.iter().map(|o| o[q][j]).collect()).collect();
                DerivEstimate::from_per_path(scales.clone(), self.family.factor, per_path, self.eps, self.tol_rel, self.tol_abs)
            })
            .collect())
    }

    pub fn estimate(&self, functional: &Functional) -> Result<DerivEstimate> {
        Ok(self.estimate_many(std::slice::from_ref(functional))?.remove(0))
    }
}

/// One outer path with its bundle and the realized family.
pub struct OuterDraw {
    pub index: usize,
    pub outer: VectorPath,
    pub s_idx: usize,
    pub bundle: Bundle,
    /// `stops[j][m]`: realization of family level `j` on continuation `m`.
    pub stops: Vec<Vec<RealizedStop>>,
}

impl OuterDraw {
    pub fn anchor_value(&self, obs: &Observable) -> f64 {
        obs.eval(&self.bundle.anchor_row(), self.bundle.grid.time(self.s_idx))
    }

    fn denominator(&self, j: usize) -> f64 {
        let dt = self.bundle.grid.dt;
        let stops = &self.stops[j];
        stops.iter().map(|s| (s.index - self.s_idx) as f64 * dt).sum::<f64>() / stops.len() as f64
    }

    fn cond_exp(&self, j: usize, obs: &Observable) -> Result<f64> {
        Ok(moment_from_stops(&MomentKind::CondExp, &self.bundle, &self.stops[j], obs)?.value)
    }

    /// Values of `f` per family level.
    pub fn evaluate(&self, f: &Functional) -> Result<Vec<f64>> {
        (0..self.stops.len()).map(|j| self.evaluate_level(f, j)).collect()
    }

    pub fn evaluate_level(&self, f: &Functional, j: usize) -> Result<f64> {
        let den = self.denominator(j);
        let stops = &self.stops[j];
        Ok(match f {
            Functional::Drift { obs } => (self.cond_exp(j, obs)? - self.anchor_value(obs)) / den,
            Functional::VarianceRate { obs, variant } => {
                let kind = match variant {
                    VarianceVariant::CondVar => MomentKind::CondVar,
                    VarianceVariant::RelSecondMoment => MomentKind::RelSecondMoment,
                    VarianceVariant::ProjectedCentre { centre: CentreSource::Supplied { value } } => {
                        MomentKind::ProjectedCentre { centre: *value }
                    }
                    VarianceVariant::ProjectedCentre { centre: CentreSource::EstimatedDrift } => {
                        let b = (self.cond_exp(j, obs)? - self.anchor_value(obs)) / den;
                        MomentKind::ProjectedCentre { centre: b }
                    }
                    VarianceVariant::IntegratedDriftCentre { b } => MomentKind::IntegratedDriftCentre { b: b.clone() },
                };
                moment_from_stops(&kind, &self.bundle, stops, obs)?.value / den
            }
            Functional::CovarianceRate { x, y } => {
                moment_from_stops(&MomentKind::CondCov { other: y.clone() }, &self.bundle, stops, x)?.value / den
            }
            Functional::Characteristic { obs } => {
                let samples = stop_samples(&self.bundle, stops, obs)?;
                let mean = samples.iter().map(|s| s.at_stop).sum::<f64>() / samples.len() as f64;
                (mean - self.anchor_value(obs)) / den
            }
            Functional::ProductOfCondExp { x, y } => {
                let fx = self.cond_exp(j, x)?;
                let fy = self.cond_exp(j, y)?;
                (fx * fy - self.anchor_value(x) * self.anchor_value(y)) / den
            }
            Functional::ComposedCondExp { f, obs } => {
                (f.value(self.cond_exp(j, obs)?) - f.value(self.anchor_value(obs))) / den
            }
            Functional::AnchorValue { obs } => self.anchor_value(obs),
            Functional::Denominator => den,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivEstimate {
    pub scales: Vec<f64>,
    pub factor: f64,
    /// `per_path[j][i]`: ratio at scale `j` on outer path `i`.
    pub per_path: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
    pub stderr: Vec<f64>,
    pub extrapolated: f64,
    pub extrapolated_stderr: f64,
    pub converged: bool,
    pub eps: f64,
    /// Share of outer paths whose ratio lies within `eps` of `extrapolated`.
    pub frac_within_eps: Vec<f64>,
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

impl DerivEstimate {
    pub fn from_per_path(scales: Vec<f64>, factor: f64, per_path: Vec<Vec<f64>>, eps: f64, tol_rel: f64, tol_abs: f64) -> Self {
        let (pooled, stderr): (Vec<f64>, Vec<f64>) = per_path.iter().map(|r| mean_and_se(r)).unzip();
        let extra = Self::richardson(&per_path, factor);
        let (extrapolated, extrapolated_stderr) = mean_and_se(&extra);
        let j = pooled.len() - 1;
        let converged = (pooled[j] - pooled[j - 1]).abs() <= tol_rel * (pooled[j].abs() + tol_abs);
        let frac_within_eps = per_path
            .iter()
            .map(|r| r.iter().filter(|x| (*x - extrapolated).abs() <= eps).count() as f64 / r.len() as f64)
            .collect();
        DerivEstimate {
            scales,
            factor,
            per_path,
            pooled,
            stderr,
            extrapolated,
            extrapolated_stderr,
            converged,
            eps,
            frac_within_eps,
        }
    }

    fn richardson(per_path: &[Vec<f64>], factor: f64) -> Vec<f64> {
        let j = per_path.len() - 1;
        per_path[j]
            .iter()
            .zip(&per_path[j - 1])
            .map(|(fine, coarse)| (fine - factor * coarse) / (1.0 - factor))
            .collect()
    }

    /// Per-path extrapolated values.
    pub fn per_path_extrapolated(&self) -> Vec<f64> {
        Self::richardson(&self.per_path, self.factor)
    }

    pub fn finest(&self) -> f64 {
        *self.pooled.last().expect("at least two scales")
    }

    pub fn finest_stderr(&self) -> f64 {
        *self.stderr.last().expect("at least two scales")
    }

    pub fn finest_per_path(&self) -> &[f64] {
        self.per_path.last().expect("at least two scales")
    }

    pub fn ci(&self, level: f64) -> Result<CI> {
        let z = z_for_level(level)?;
        Ok(CI {
            mean: self.extrapolated,
            halfwidth: z * self.extrapolated_stderr,
            level,
            n: self.per_path[0].len(),
        })
    }

    /// CSV with header `scale_index,scale,ratio,stderr,frac_within_eps,converged`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scale_index,scale,ratio,stderr,frac_within_eps,converged\n");
        for j in 0..self.scales.len() {
            out.push_str(&format!(
                "{j},{},{},{},{},{}\n",
                fmt_full(self.scales[j]),
                fmt_full(self.pooled[j]),
                fmt_full(self.stderr[j]),
                fmt_full(self.frac_within_eps[j]),
                self.converged
            ));
        }
        out
    }

    pub fn summary(&self) -> EstimateSummary {
        EstimateSummary {
            scales: self.scales.clone(),
            ratios: self.pooled.clone(),
            stderr: self.stderr.clone(),
            extrapolated: self.extrapolated,
            extrapolated_stderr: self.extrapolated_stderr,
            ci: self.ci(0.95).expect("0.95 is a valid level"),
            converged: self.converged,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateSummary {
    pub scales: Vec<f64>,
    pub ratios: Vec<f64>,
    pub stderr: Vec<f64>,
    pub extrapolated: f64,
    pub extrapolated_stderr: f64,
    pub ci: CI,
    pub converged: bool,
}

pub fn drift_at(est: &Estimator) -> Result<DerivEstimate> {
    est.estimate(&Functional::drift(Observable::coord(est.stop_coord)))
}

pub fn variance_rate_at(est: &Estimator, variant: VarianceVariant) -> Result<DerivEstimate> {
    est.estimate(&Functional::variance(Observable::coord(est.stop_coord), variant))
}

pub fn covariance_rate_at(est: &Estimator, x: usize, y: usize) -> Result<DerivEstimate> {
    est.estimate(&Functional::CovarianceRate { x: Observable::coord(x), y: Observable::coord(y) })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrixEstimate {
    pub entries: Vec<Vec<DerivEstimate>>,
    pub extrapolated: Vec<Vec<f64>>,
    pub min_eigenvalue: f64,
}

/// Covariance-rate matrix of all coordinates, symmetric by construction.
pub fn covariance_matrix_at(est: &Estimator) -> Result<CovMatrixEstimate> {
    let d = est.spec.dim();
    let mut pairs = Vec::new();
    let mut functionals = Vec::new();
    for i in 0..d {
        for j in i..d {
            pairs.push((i, j));
            functionals.push(Functional::CovarianceRate { x: Observable::coord(i), y: Observable::coord(j) });
        }
    }
    let estimates = est.estimate_many(&functionals)?;
    let mut entries: Vec<Vec<Option<DerivEstimate>>> = vec![vec![None; d]; d];
    for ((i, j), e) in pairs.into_iter().zip(estimates) {
        entries[j][i] = Some(e.clone());
        entries[i][j] = Some(e);
    }
    let entries: Vec<Vec<DerivEstimate>> =
        entries.into_iter().map(|r| r.into_iter().map(|e| e.expect("every pair filled")).collect()).collect();
    let extrapolated: Vec<Vec<f64>> = entries.iter().map(|r| r.iter().map(|e| e.extrapolated).collect()).collect();
    let min_eigenvalue = min_eigenvalue(&extrapolated);
    Ok(CovMatrixEstimate { entries, extrapolated, min_eigenvalue })
}

pub fn min_eigenvalue(m: &[Vec<f64>]) -> f64 {
    let d = m.len();
    let mat = nalgebra::DMatrix::from_fn(d, d, |i, j| 0.5 * (m[i][j] + m[j][i]));
    mat.symmetric_eigen().eigenvalues.min()
}

/// Characteristic operator of `f` at the deterministic start of `est.spec`,
/// along `est.family` (normally first exits) anchored at time 0.
pub fn characteristic_at(est: &Estimator, f: SmoothFn) -> Result<DerivEstimate> {
    let est = est.clone().anchor(StoppingRule::AtTime { t: 0.0 });
    est.estimate(&Functional::Characteristic { obs: Observable::apply(f, Observable::coord(est.stop_coord)) })
}

/// Whether at least `1 - delta` of the ratios lie within `eps` of `target`;
/// also returns that share.
pub fn convergence_probability_check(ratios: &[f64], target: f64, eps: f64, delta: f64) -> (bool, f64) {
    if ratios.is_empty() {
        return (false, 0.0);
    }
    let within = ratios.iter().filter(|r| (*r - target).abs() <= eps).count() as f64 / ratios.len() as f64;
    (within >= 1.0 - delta, within)
}
