//! Statistical checks of stochastic calculus identities and theorems.
//!
//! Each check estimates both sides of an identity (or an estimate and its
//! closed-form target) and returns a [`CheckReport`]. A comparison passes when
//! the difference lies within `max(tol_abs, tol_rel * |right|, z * stderr)`,
//! both at the finest scale and after extrapolation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::condest::{Observable, SmoothFn};
use crate::error::{LabError, Result};
use crate::paths::{cadlag_eval, fmt_full, stream_seed, streams, SamplePath, TimeGrid};
use crate::processes::{simulate, simulate_ensemble, simulate_until, Adaptation, PrefixCtx, ProcessSpec, TimeFn};
use crate::stats::{correlation, ks_normal, ks_two_sample, mean, mean_ci, z_for_level, CI};
use crate::stopderiv::{characteristic_at, DerivEstimate, Estimator, Functional, ShrinkFamily, VarianceVariant};
use crate::stopping::{realize_time_change, realize_time_change_with, RatePolicy, StoppingRule, TimeChangeRealization};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RuleId {
    Linearity,
    ProductRule,
    ChainRule,
    TimeChangeRule,
    #[serde(rename = "Ito1D_drift")]
    Ito1dDrift,
    #[serde(rename = "Ito1D_var")]
    Ito1dVar,
    #[serde(rename = "ItoND_drift")]
    ItoNdDrift,
    #[serde(rename = "ItoND_var")]
    ItoNdVar,
    VarianceSum,
    ProductDrift,
    VariancePreserved,
    KillDrift,
    StoppedZeroDrift,
}

impl RuleId {
    pub const ALL: [RuleId; 13] = [
        RuleId::Linearity,
        RuleId::ProductRule,
        RuleId::ChainRule,
        RuleId::TimeChangeRule,
        RuleId::Ito1dDrift,
        RuleId::Ito1dVar,
        RuleId::ItoNdDrift,
        RuleId::ItoNdVar,
        RuleId::VarianceSum,
        RuleId::ProductDrift,
        RuleId::VariancePreserved,
        RuleId::KillDrift,
        RuleId::StoppedZeroDrift,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RuleId::Linearity => "Linearity",
            RuleId::ProductRule => "ProductRule",
            RuleId::ChainRule => "ChainRule",
            RuleId::TimeChangeRule => "TimeChangeRule",
            RuleId::Ito1dDrift => "Ito1D_drift",
            RuleId::Ito1dVar => "Ito1D_var",
            RuleId::ItoNdDrift => "ItoND_drift",
            RuleId::ItoNdVar => "ItoND_var",
            RuleId::VarianceSum => "VarianceSum",
            RuleId::ProductDrift => "ProductDrift",
            RuleId::VariancePreserved => "VariancePreserved",
            RuleId::KillDrift => "KillDrift",
            RuleId::StoppedZeroDrift => "StoppedZeroDrift",
        }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RuleId {
    type Err = LabError;

    fn from_str(s: &str) -> Result<Self> {
        RuleId::ALL
            .iter()
            .find(|r| r.as_str().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| LabError::InvalidParameter(format!("unknown rule id {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::Fail => "fail",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub z: f64,
    pub tol_abs: f64,
    #[serde(default)]
    pub tol_rel: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { z: 3.0, tol_abs: 1e-3, tol_rel: 0.0 }
    }
}

impl Tolerances {
    pub fn relative(tol_rel: f64) -> Self {
        Tolerances { tol_rel, ..Self::default() }
    }

    pub fn bound(&self, right: f64, stderr: f64) -> f64 {
        self.tol_abs.max(self.tol_rel * right.abs()).max(self.z * stderr)
    }
}

/// One side of a comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SideSummary {
    pub finest: f64,
    pub finest_stderr: f64,
    pub extrapolated: f64,
    pub extrapolated_stderr: f64,
    pub ci: CI,
}

impl SideSummary {
    fn from_estimate(e: &DerivEstimate) -> Self {
        SideSummary {
            finest: e.finest(),
            finest_stderr: e.finest_stderr(),
            extrapolated: e.extrapolated,
            extrapolated_stderr: e.extrapolated_stderr,
            ci: e.ci(0.95).expect("valid level"),
        }
    }

    /// A single value with its standard error.
    pub fn point(value: f64, stderr: f64) -> Self {
        let half = z_for_level(0.95).expect("valid level") * stderr;
        SideSummary {
            finest: value,
            finest_stderr: stderr,
            extrapolated: value,
            extrapolated_stderr: stderr,
            ci: CI { mean: value, halfwidth: half, level: 0.95, n: 0 },
        }
    }
}

/// A single assertion inside a check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Part {
    pub name: String,
    pub left: f64,
    pub right: f64,
    pub stderr: f64,
    pub bound: f64,
    pub pass: bool,
}

impl Part {
    pub fn compare(name: impl Into<String>, left: f64, right: f64, stderr: f64, tol: &Tolerances) -> Self {
        let bound = tol.bound(right, stderr);
        Part { name: name.into(), left, right, stderr, bound, pass: (left - right).abs() <= bound }
    }

    /// An assertion that is either true or false, such as a test verdict.
    pub fn flag(name: impl Into<String>, value: f64, threshold: f64, pass: bool) -> Self {
        Part { name: name.into(), left: value, right: threshold, stderr: 0.0, bound: 0.0, pass }
    }

    fn is_finite(&self) -> bool {
        self.left.is_finite() && self.right.is_finite() && !self.stderr.is_nan()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub id: String,
    pub verdict: Verdict,
    pub left: SideSummary,
    pub right: SideSummary,
    /// 95% interval for the extrapolated difference `left - right`.
    pub ci: CI,
    pub tolerances: Tolerances,
    pub seed: u64,
    pub runtime_s: f64,
    pub parts: Vec<Part>,
}

impl CheckReport {
    fn new(id: impl Into<String>, left: SideSummary, right: SideSummary, diff_se: f64, tol: Tolerances, seed: u64, parts: Vec<Part>, start: Instant) -> Self {
        let verdict = if parts.iter().any(|p| !p.is_finite()) {
            Verdict::Inconclusive
        } else if parts.iter().all(|p| p.pass) {
            Verdict::Pass
        } else {
            Verdict::Fail
        };
        let half = z_for_level(0.95).expect("valid level") * diff_se;
        CheckReport {
            id: id.into(),
            verdict,
            ci: CI { mean: left.extrapolated - right.extrapolated, halfwidth: half, level: 0.95, n: left.ci.n },
            left,
            right,
            tolerances: tol,
            seed,
            runtime_s: start.elapsed().as_secs_f64(),
            parts,
        }
    }

    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    /// Same report with the wall-clock time zeroed, for byte-stable output.
    pub fn without_timing(mut self) -> Self {
        self.runtime_s = 0.0;
        self
    }

    pub fn part(&self, name: &str) -> Option<&Part> {
        self.parts.iter().find(|p| p.name == name)
    }
}

/// CSV with header `id,verdict,left,right,stderr,seed,runtime_s`, sorted by id.
pub fn summary_csv(reports: &[CheckReport]) -> String {
    let mut rows: Vec<&CheckReport> = reports.iter().collect();
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = String::from("id,verdict,left,right,stderr,seed,runtime_s\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.id,
            r.verdict,
            fmt_full(r.left.extrapolated),
            fmt_full(r.right.extrapolated),
            fmt_full(r.ci.halfwidth / z_for_level(0.95).expect("valid level")),
            r.seed,
            r.runtime_s
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// scenario sizes

/// Grid and sample sizes used by the canonical scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sizes {
    pub dt: f64,
    pub n_outer: usize,
    pub m: usize,
    pub h0: f64,
    pub levels: usize,
}

impl Sizes {
    /// Sizes used by the regression suite.
    pub fn standard() -> Self {
        Sizes { dt: 1e-3, n_outer: 100, m: 400, h0: 0.1, levels: 3 }
    }

    /// Small sizes for smoke tests and reproducibility runs.
    pub fn quick() -> Self {
        Sizes { dt: 2e-3, n_outer: 16, m: 64, h0: 0.1, levels: 2 }
    }

    fn estimator(&self, spec: ProcessSpec, horizon: f64, seed: u64) -> Result<Estimator> {
        Ok(Estimator::new(spec, TimeGrid::with_horizon(self.dt, horizon)?)
            .family(ShrinkFamily::offset(self.h0, self.levels))
            .sizes(self.n_outer, self.m)
            .seed(seed))
    }
}

// ---------------------------------------------------------------------------
// identity checks

type Combine = Box<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// One side of an identity: functionals on an estimator, combined per path.
pub struct Side {
    pub est: Estimator,
    pub functionals: Vec<Functional>,
    pub combine: Combine,
}

impl Side {
    pub fn new(est: Estimator, functionals: Vec<Functional>, combine: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Side { est, functionals, combine: Box::new(combine) }
    }

    pub fn estimate(&self) -> Result<DerivEstimate> {
        let parts = self.est.estimate_many(&self.functionals)?;
        let first = &parts[0];
        let per_path: Vec<Vec<f64>> = (0..first.scales.len())
            .map(|j| {
                (0..first.per_path[j].len())
                    .map(|i| {
                        let vals: Vec<f64> = parts.iter().map(|p| p.per_path[j][i]).collect();
                        (self.combine)(&vals)
                    })
                    .collect()
            })
            .collect();
        Ok(DerivEstimate::from_per_path(
            first.scales.clone(),
            first.factor,
            per_path,
            self.est.eps,
            self.est.tol_rel,
            self.est.tol_abs,
        ))
    }
}

fn paired_se(a: &[f64], b: &[f64]) -> f64 {
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    crate::stats::std_error(&d)
}

/// Compares two sides. Sides that share outer seed and path count are
/// compared through per-path differences; otherwise as independent samples.
pub fn compare_sides(id: impl Into<String>, left: &Side, right: &Side, tol: Tolerances) -> Result<CheckReport> {
    let start = Instant::now();
    let l = left.estimate()?;
    let r = right.estimate()?;
    let paired = left.est.seed == right.est.seed
        && left.est.n_outer == right.est.n_outer
        && left.est.grid == right.est.grid;
    let (se_fine, se_ex) = if paired {
        (
            paired_se(l.finest_per_path(), r.finest_per_path()),
            paired_se(&l.per_path_extrapolated(), &r.per_path_extrapolated()),
        )
    } else {
        (
            l.finest_stderr().hypot(r.finest_stderr()),
            l.extrapolated_stderr.hypot(r.extrapolated_stderr),
        )
    };
    let parts = vec![
        Part::compare("finest", l.finest(), r.finest(), se_fine, &tol),
        Part::compare("extrapolated", l.extrapolated, r.extrapolated, se_ex, &tol),
    ];
    Ok(CheckReport::new(
        id,
        SideSummary::from_estimate(&l),
        SideSummary::from_estimate(&r),
        se_ex,
        tol,
        left.est.seed,
        parts,
        start,
    ))
}

/// Left and right sides use the same outer paths and independent
/// continuations.
fn split_sides(est: &Estimator) -> (Estimator, Estimator) {
    let l = est.clone().branch_seed(stream_seed(est.seed, streams::LEFT_SIDE, 0));
    let r = est.clone().branch_seed(stream_seed(est.seed, streams::RIGHT_SIDE, 0));
    (l, r)
}

fn c(i: usize) -> Observable {
    Observable::coord(i)
}

fn drift(o: Observable) -> Functional {
    Functional::drift(o)
}

fn var(o: Observable) -> Functional {
    Functional::variance(o, VarianceVariant::CondVar)
}

fn cov(x: Observable, y: Observable) -> Functional {
    Functional::CovarianceRate { x, y }
}

fn anchor(o: Observable) -> Functional {
    Functional::AnchorValue { obs: o }
}

fn sum(terms: Vec<Observable>) -> Observable {
    Observable::Sum { terms }
}

/// Geometric Brownian motion `dX = mu X dt + v X dW`.
pub fn geometric_bm(x0: f64, mu: f64, v: f64) -> ProcessSpec {
    ProcessSpec::ito(
        x0,
        Adaptation::Linear { slope: mu, intercept: 0.0 },
        Adaptation::Linear { slope: v, intercept: 0.0 },
    )
}

/// The canonical scenario of a rule as a pair of sides.
pub fn canonical_sides(rule: RuleId, sizes: &Sizes, seed: u64) -> Result<(Side, Side)> {
    let bm = ProcessSpec::brownian;
    let mk = |spec: ProcessSpec, t: f64| -> Result<(Estimator, Estimator)> {
        let est = sizes.estimator(spec, 1.0, seed)?.anchor(StoppingRule::AtTime { t });
        Ok(split_sides(&est))
    };
    Ok(match rule {
        RuleId::Linearity => {
            let spec = ProcessSpec::Joint {
                components: vec![ProcessSpec::ito_constant(0.0, 0.3, 0.7), ProcessSpec::ito_constant(0.0, -0.2, 0.5)],
            };
            let (l, r) = mk(spec, 0.5)?;
            let combo = sum(vec![Observable::scaled(2.0, c(0)), Observable::scaled(-1.5, c(1))]);
            (
                Side::new(l, vec![drift(combo)], |v| v[0]),
                Side::new(r, vec![drift(c(0)), drift(c(1))], |v| 2.0 * v[0] - 1.5 * v[1]),
            )
        }
        RuleId::ProductRule => {
            let spec = ProcessSpec::Joint {
                components: vec![ProcessSpec::BrownianMotion { x0: 2.0 }, ProcessSpec::ito_constant(1.0, 0.5, 0.3)],
            };
            let (l, r) = mk(spec, 0.0)?;
            (
                Side::new(l, vec![Functional::ProductOfCondExp { x: c(0), y: c(1) }], |v| v[0]),
                Side::new(r, vec![anchor(c(0)), drift(c(1)), anchor(c(1)), drift(c(0))], |v| v[0] * v[1] + v[2] * v[3]),
            )
        }
        RuleId::ChainRule => {
            let (l, r) = mk(ProcessSpec::ito_constant(0.0, 0.3, 0.7), 0.5)?;
            (
                Side::new(l, vec![Functional::ComposedCondExp { f: SmoothFn::Exp, obs: c(0) }], |v| v[0]),
                Side::new(r, vec![anchor(c(0)), drift(c(0))], |v| v[0].exp() * v[1]),
            )
        }
        RuleId::TimeChangeRule => {
            let inner = ProcessSpec::ito_constant(0.0, 0.3, 0.7);
            let rate = 2.0;
            let changed = ProcessSpec::TimeChanged { inner: Box::new(inner.clone()), rate };
            let l = sizes.estimator(changed, 1.0, seed)?;
            let r = sizes.estimator(inner, 1.0, stream_seed(seed, streams::RIGHT_SIDE, 1))?;
            (Side::new(l, vec![drift(c(0))], |v| v[0]), Side::new(r, vec![drift(c(0))], move |v| rate * v[0]))
        }
        RuleId::Ito1dDrift => {
            let (l, r) = mk(geometric_bm(1.0, 0.5, 0.4), 0.5)?;
            (
                Side::new(l, vec![drift(Observable::apply(SmoothFn::Log, c(0)))], |v| v[0]),
                Side::new(r, vec![anchor(c(0)), drift(c(0)), var(c(0))], |v| {
                    let f = SmoothFn::Log;
                    f.d1(v[0]) * v[1] + 0.5 * f.d2(v[0]) * v[2]
                }),
            )
        }
        RuleId::Ito1dVar => {
            let (l, r) = mk(geometric_bm(1.0, 0.5, 0.4), 0.5)?;
            (
                Side::new(l, vec![var(Observable::apply(SmoothFn::Log, c(0)))], |v| v[0]),
                Side::new(r, vec![anchor(c(0)), var(c(0))], |v| SmoothFn::Log.d1(v[0]).powi(2) * v[1]),
            )
        }
        RuleId::ItoNdDrift | RuleId::ItoNdVar => {
            let rho = 0.5;
            let spec = ProcessSpec::CorrelatedBm { corr: vec![vec![1.0, rho], vec![rho, 1.0]] };
            let (l, r) = mk(spec, 0.5)?;
            let xy = Observable::product(c(0), c(1));
            if rule == RuleId::ItoNdDrift {
                // f = xy: f_x = y, f_y = x, f_xy = 1
                (
                    Side::new(l, vec![drift(xy)], |v| v[0]),
                    Side::new(r, vec![anchor(c(0)), anchor(c(1)), drift(c(0)), drift(c(1)), cov(c(0), c(1))], |v| {
                        v[1] * v[2] + v[0] * v[3] + v[4]
                    }),
                )
            } else {
                (
                    Side::new(l, vec![var(xy)], |v| v[0]),
                    Side::new(r, vec![anchor(c(0)), anchor(c(1)), var(c(0)), var(c(1)), cov(c(0), c(1))], |v| {
                        v[1] * v[1] * v[2] + v[0] * v[0] * v[3] + 2.0 * v[0] * v[1] * v[4]
                    }),
                )
            }
        }
        RuleId::VarianceSum => {
            let spec = ProcessSpec::CorrelatedBm { corr: vec![vec![1.0, 0.5], vec![0.5, 1.0]] };
            let (l, r) = mk(spec, 0.5)?;
            (
                Side::new(l, vec![var(sum(vec![c(0), c(1)]))], |v| v[0]),
                Side::new(r, vec![var(c(0)), cov(c(0), c(1)), var(c(1))], |v| v[0] + 2.0 * v[1] + v[2]),
            )
        }
        RuleId::ProductDrift => {
            let spec = ProcessSpec::Joint {
                components: vec![ProcessSpec::ito_constant(1.0, 0.4, 0.5), ProcessSpec::ito_constant(2.0, -0.3, 0.6)],
            };
            let (l, r) = mk(spec, 0.0)?;
            (
                Side::new(l, vec![drift(Observable::product(c(0), c(1)))], |v| v[0]),
                Side::new(r, vec![anchor(c(0)), drift(c(1)), anchor(c(1)), drift(c(0)), cov(c(0), c(1))], |v| {
                    v[0] * v[1] + v[2] * v[3] + v[4]
                }),
            )
        }
        RuleId::VariancePreserved => {
            let spec = ProcessSpec::Joint {
                components: vec![bm(), ProcessSpec::Deterministic { f: TimeFn::Power { coef: 1.0, exponent: 2.0 } }],
            };
            let (l, r) = mk(spec, 0.5)?;
            (
                Side::new(l, vec![var(sum(vec![c(0), c(1)]))], |v| v[0]),
                Side::new(r, vec![var(c(0))], |v| v[0]),
            )
        }
        RuleId::KillDrift => {
            // Ornstein-Uhlenbeck with its drift integral as a second coordinate
            let b = Adaptation::Linear { slope: -1.0, intercept: 0.0 };
            let spec = ProcessSpec::WithIntegral {
                inner: Box::new(ProcessSpec::ito(1.0, b.clone(), Adaptation::constant(1.0))),
                coord: 0,
                integrand: b,
            };
            let (l, r) = mk(spec, 0.5)?;
            (
                Side::new(l, vec![drift(sum(vec![c(0), Observable::scaled(-1.0, c(1))]))], |v| v[0]),
                Side::new(r, vec![anchor(Observable::Const { value: 0.0 })], |v| v[0]),
            )
        }
        RuleId::StoppedZeroDrift => {
            let spec = ProcessSpec::Stopped { inner: Box::new(bm()), rule: StoppingRule::Debut { level: 0.5 } };
            let (l, r) = mk(spec, 0.3)?;
            (
                Side::new(l, vec![drift(c(0))], |v| v[0]),
                Side::new(r, vec![anchor(Observable::Const { value: 0.0 })], |v| v[0]),
            )
        }
    })
}

pub fn check_identity(rule: RuleId, sizes: &Sizes, seed: u64) -> Result<CheckReport> {
    let (left, right) = canonical_sides(rule, sizes, seed)?;
    compare_sides(rule.as_str(), &left, &right, Tolerances::default())
}

// ---------------------------------------------------------------------------
// theorem checks

/// Drift of `obs` is zero at every anchor.
pub fn check_zero_drift(id: &str, base: &Estimator, obs: Observable, anchors: &[StoppingRule], tol: Tolerances) -> Result<CheckReport> {
    let start = Instant::now();
    if anchors.is_empty() {
        return Err(LabError::InvalidParameter("zero-drift check needs an anchor".into()));
    }
    let mut parts = Vec::new();
    let mut first = None;
    for (i, a) in anchors.iter().enumerate() {
        let e = base.clone().anchor(a.clone()).estimate(&Functional::drift(obs.clone()))?;
        parts.push(Part::compare(format!("anchor{i}_finest"), e.finest(), 0.0, e.finest_stderr(), &tol));
        parts.push(Part::compare(format!("anchor{i}_extrapolated"), e.extrapolated, 0.0, e.extrapolated_stderr, &tol));
        first.get_or_insert(e);
    }
    let e = first.expect("at least one anchor");
    Ok(CheckReport::new(
        id,
        SideSummary::from_estimate(&e),
        SideSummary::point(0.0, 0.0),
        e.extrapolated_stderr,
        tol,
        base.seed,
        parts,
        start,
    ))
}

/// `X = x0 + int b ds + int sigma dW`: drift equals `b` and variance rate
/// equals `sigma^2`, both evaluated on the prefix at the anchor.
pub fn check_ftc(id: &str, x0: f64, b: Adaptation, sigma: Adaptation, base: &Estimator, anchors: &[StoppingRule], tol: Tolerances) -> Result<CheckReport> {
    let start = Instant::now();
    let spec = ProcessSpec::ito(x0, b.clone(), sigma.clone());
    let est = Estimator { spec, ..base.clone() };
    let mut parts = Vec::new();
    let mut headline = None;
    for (i, a) in anchors.iter().enumerate() {
        let e = est.clone().anchor(a.clone());
        let outs = e.estimate_many(&[
            Functional::drift(c(0)),
            Functional::variance(c(0), VarianceVariant::CondVar),
        ])?;
        // integrands evaluated on each outer prefix at S
        let targets = e.map_outer(|d| {
            let path = &d.outer.coords[0];
            let ctx = PrefixCtx::scan(path, d.s_idx, &d.outer.grid);
            Ok((b.eval(&ctx), sigma.eval(&ctx).powi(2)))
        })?;
        let (bs, s2): (Vec<f64>, Vec<f64>) = targets.into_iter().unzip();
        let (b_bar, s2_bar) = (mean(&bs), mean(&s2));
        parts.push(Part::compare(format!("anchor{i}_drift"), outs[0].extrapolated, b_bar, outs[0].extrapolated_stderr, &tol));
        parts.push(Part::compare(format!("anchor{i}_variance_rate"), outs[1].extrapolated, s2_bar, outs[1].extrapolated_stderr, &tol));
        headline.get_or_insert((outs[0].clone(), b_bar));
    }
    let (e, target) = headline.ok_or_else(|| LabError::InvalidParameter("FTC check needs an anchor".into()))?;
    Ok(CheckReport::new(
        id,
        SideSummary::from_estimate(&e),
        SideSummary::point(target, 0.0),
        e.extrapolated_stderr,
        tol,
        base.seed,
        parts,
        start,
    ))
}

/// Realized quadratic variation `sum (dX)^2` over the whole path.
pub fn realized_qv(values: &[f64]) -> f64 {
    values.windows(2).map(|w| (w[1] - w[0]) * (w[1] - w[0])).sum()
}

/// (i) realized quadratic variation on `[0, horizon]` against `int a ds`,
/// pooled over `n_paths`; (ii) `X^2 - int a ds` has zero drift at `anchors`.
pub fn check_quadratic_variation(
    id: &str,
    spec: &ProcessSpec,
    a: &Adaptation,
    grid: &TimeGrid,
    n_paths: usize,
    base: &Estimator,
    anchors: &[StoppingRule],
    tol: Tolerances,
) -> Result<CheckReport> {
    let start = Instant::now();
    let ens = simulate_ensemble(spec, grid, base.seed, streams::CHECK, n_paths)?;
    let (qv, target): (Vec<f64>, Vec<f64>) = ens
        .paths
        .par_iter()
        .map(|p| {
            let x = &p.coords[0];
            let rates = a.eval_along(x, grid);
            let integral: f64 = rates[..rates.len() - 1].iter().sum::<f64>() * grid.dt;
            (realized_qv(x), integral)
        })
        .unzip();
    let qv_ci = mean_ci(&qv, 0.95)?;
    let target_mean = mean(&target);
    let diffs: Vec<f64> = qv.iter().zip(&target).map(|(q, t)| q - t).collect();
    let se = crate::stats::std_error(&diffs);
    let mut parts = vec![Part::compare("realized_qv", qv_ci.mean, target_mean, se, &tol)];
    if !anchors.is_empty() {
        let aug = ProcessSpec::WithIntegral { inner: Box::new(spec.clone()), coord: 0, integrand: a.clone() };
        let obs = sum(vec![Observable::product(c(0), c(0)), Observable::scaled(-1.0, c(1))]);
        let est = Estimator { spec: aug, ..base.clone() };
        let zero = check_zero_drift("qv_compensated", &est, obs, anchors, Tolerances { tol_rel: 0.0, ..tol })?;
        parts.extend(zero.parts.into_iter().map(|mut p| {
            p.name = format!("compensated_{}", p.name);
            p
        }));
    }
    Ok(CheckReport::new(
        id,
        SideSummary::point(qv_ci.mean, qv_ci.halfwidth / z_for_level(0.95)?),
        SideSummary::point(target_mean, 0.0),
        se,
        tol,
        base.seed,
        parts,
        start,
    ))
}

// ---------------------------------------------------------------------------
// time change

/// `Phi_a(f)(s) = f(R_s)` on the grid of `f`, for every `s` the cumulative
/// rate reaches.
pub fn phi_apply(a: &Adaptation, f: &SamplePath) -> Result<SamplePath> {
    let tc = realize_time_change(a, &f.values, &f.grid)?;
    phi_from_realization(&tc, f, None)
}

/// Like [`phi_apply`], requiring the result to cover `[0, s_max]`.
pub fn phi_apply_to(a: &Adaptation, f: &SamplePath, s_max: f64) -> Result<SamplePath> {
    let tc = realize_time_change(a, &f.values, &f.grid)?;
    phi_from_realization(&tc, f, Some(s_max))
}

fn phi_from_realization(tc: &TimeChangeRealization, f: &SamplePath, s_max: Option<f64>) -> Result<SamplePath> {
    let dt = f.grid.dt;
    let total = tc.total();
    let wanted = s_max.unwrap_or(total);
    if total + 1e-12 < wanted {
        return Err(LabError::InsufficientIntrinsicTime { available: total, requested: wanted });
    }
    let n = f.grid.steps_in(wanted.min(total));
    if n == 0 {
        return Err(LabError::InsufficientIntrinsicTime { available: total, requested: dt });
    }
    let values = (0..=n)
        .map(|k| {
            let r = tc.r_index(k as f64 * dt - 1e-9 * dt).unwrap_or(tc.cum.len() - 1);
            f.values[r]
        })
        .collect();
    SamplePath::new(TimeGrid { dt, n_steps: n }, values)
}

/// Inverse of [`phi_apply`]: rebuilds `f` on `grid` from `g = Phi_a(f)`,
/// evaluating `a` on the reconstructed prefix as it grows.
pub fn phi_invert(a: &Adaptation, g: &SamplePath, grid: &TimeGrid) -> Result<SamplePath> {
    let horizon = g.grid.horizon();
    let mut f = vec![g.values[0]];
    let mut cum = 0.0;
    let (mut hi, mut lo) = (g.values[0], g.values[0]);
    for k in 0..grid.n_steps {
        let ctx = PrefixCtx::from_slice(&f, k, grid.time(k), hi, lo);
        let r = a.eval(&ctx);
        if !(r > 0.0) || !r.is_finite() {
            return Err(LabError::NonPositiveRate { index: k, value: r });
        }
        cum += r * grid.dt;
        if cum > horizon * (1.0 + 1e-12) {
            break;
        }
        let v = cadlag_eval(g, &g.grid, cum.min(horizon))?;
        hi = hi.max(v);
        lo = lo.min(v);
        f.push(v);
    }
    let n = f.len() - 1;
    if n == 0 {
        return Err(LabError::InsufficientIntrinsicTime { available: horizon, requested: grid.dt });
    }
    SamplePath::new(TimeGrid { dt: grid.dt, n_steps: n }, f)
}

/// Outcome of the Lévy check in numbers, before verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevyStats {
    pub increments: Vec<f64>,
    pub ks_statistic: f64,
    pub ks_critical: f64,
    pub ks_reject: bool,
    pub adjacent_correlation: f64,
    pub terminal_variance: f64,
    pub capped_fraction: f64,
}

/// Time-changed values `W_s = X_{R_s}` at `s = 0, 1, ..., intervals`.
/// Paths whose intrinsic clock stops short are frozen at their last value.
fn levy_samples(spec: &ProcessSpec, a: &Adaptation, grid: &TimeGrid, n_paths: usize, intervals: usize, seed: u64, policy: RatePolicy) -> Result<(Vec<Vec<f64>>, usize)> {
    let rows = (0..n_paths)
        .into_par_iter()
        .map(|i| {
            let p = simulate(spec, grid, stream_seed(seed, streams::CHECK, i as u64))?;
            let x = &p.coords[0];
            let tc = realize_time_change_with(a, x, grid, policy)?;
            let mut capped = false;
            let w: Vec<f64> = (0..=intervals)
                .map(|s| match tc.r_index(s as f64) {
                    Some(k) => x[k],
                    None => {
                        capped = true;
                        x[x.len() - 1]
                    }
                })
                .collect();
            Ok((w, capped))
        })
        .collect::<Result<Vec<_>>>()?;
    let capped = rows.iter().filter(|r| r.1).count();
    Ok((rows.into_iter().map(|r| r.0).collect(), capped))
}

pub fn levy_stats(spec: &ProcessSpec, a: &Adaptation, grid: &TimeGrid, n_paths: usize, intervals: usize, seed: u64, alpha: f64, policy: RatePolicy) -> Result<LevyStats> {
    if intervals < 2 {
        return Err(LabError::InvalidParameter("need at least two unit intervals".into()));
    }
    let (w, capped) = levy_samples(spec, a, grid, n_paths, intervals, seed, policy)?;
    if capped == n_paths {
        return Err(LabError::InsufficientIntrinsicTime { available: grid.horizon(), requested: intervals as f64 });
    }
    let mut increments = Vec::with_capacity(n_paths * intervals);
    let (mut first, mut second) = (Vec::new(), Vec::new());
    for row in &w {
        for s in 0..intervals {
            increments.push(row[s + 1] - row[s]);
        }
        for s in 0..intervals - 1 {
            first.push(row[s + 1] - row[s]);
            second.push(row[s + 2] - row[s + 1]);
        }
    }
    let ks = ks_normal(&increments, 0.0, 1.0, alpha)?;
    let terminal: Vec<f64> = w.iter().map(|row| row[intervals] - row[0]).collect();
    Ok(LevyStats {
        ks_statistic: ks.statistic,
        ks_critical: ks.critical,
        ks_reject: ks.reject,
        adjacent_correlation: correlation(&first, &second),
        terminal_variance: crate::stats::sample_variance(&terminal),
        capped_fraction: capped as f64 / n_paths as f64,
        increments,
    })
}

/// `X∘R` is standard Brownian motion: unit increments are N(0,1) by KS,
/// adjacent increments are uncorrelated, and `Var W_s = s`.
pub fn check_levy_time_change(
    id: &str,
    spec: &ProcessSpec,
    a: &Adaptation,
    grid: &TimeGrid,
    n_paths: usize,
    intervals: usize,
    seed: u64,
    policy: RatePolicy,
) -> Result<CheckReport> {
    let start = Instant::now();
    let st = levy_stats(spec, a, grid, n_paths, intervals, seed, 0.01, policy)?;
    let s = intervals as f64;
    let tol = Tolerances { z: 0.0, tol_abs: 0.0, tol_rel: 0.1 };
    let parts = vec![
        Part::flag("ks_normal", st.ks_statistic, st.ks_critical, !st.ks_reject),
        Part::compare("adjacent_correlation", st.adjacent_correlation, 0.0, 0.0, &Tolerances { z: 0.0, tol_abs: 0.05, tol_rel: 0.0 }),
        Part::compare("terminal_variance", st.terminal_variance, s, 0.0, &tol),
        Part::flag("capped_fraction", st.capped_fraction, 0.0, true),
    ];
    Ok(CheckReport::new(
        id,
        SideSummary::point(st.terminal_variance, 0.0),
        SideSummary::point(s, 0.0),
        0.0,
        tol,
        seed,
        parts,
        start,
    ))
}

/// Rate used by the time-change uniqueness check:
/// `a(f, t) = clamp(1 + 0.5 |f(t)|, 0.5, 2)`.
pub fn clipped_rate() -> Adaptation {
    Adaptation::Clamp { inner: Box::new(Adaptation::AbsAffine { base: 1.0, slope: 0.5 }), lo: 0.5, hi: 2.0 }
}

/// Zero-drift process with variance rate `a`: `dX = sqrt(a(X, t)) dW`.
pub fn driftless_with_rate(a: &Adaptation) -> ProcessSpec {
    ProcessSpec::ito(0.0, Adaptation::constant(0.0), Adaptation::Sqrt { inner: Box::new(a.clone()) })
}

// ---------------------------------------------------------------------------
// distinct laws with equal characteristics

/// `W^T` and `-W^T` for `T` the first time `W >= 1`, and the rate
/// `a(f, t) = 1(max f < 1)` they share.
pub fn nonunique_pair() -> (ProcessSpec, ProcessSpec, Adaptation) {
    let stopped = ProcessSpec::Stopped { inner: Box::new(ProcessSpec::brownian()), rule: StoppingRule::Debut { level: 1.0 } };
    let negated = ProcessSpec::Negated { inner: Box::new(stopped.clone()) };
    (stopped, negated, Adaptation::BelowRunningMax { level: 1.0 })
}

/// `P(W_t >= 1)` for the stopped path, i.e. `P(T <= t) = 2 (1 - Phi(t^{-1/2}))`.
pub fn hit_probability(t: f64) -> f64 {
    2.0 * (1.0 - crate::stats::normal_cdf(1.0 / t.sqrt()))
}

/// Two-sample KS on the marginals at `t`; passes when equality is rejected
/// at `alpha`. Also reports `P(A_t >= level)` when `level` is given.
pub fn check_distinct_distributions(
    id: &str,
    spec_a: &ProcessSpec,
    spec_b: &ProcessSpec,
    grid: &TimeGrid,
    t: f64,
    n: usize,
    seed: u64,
    level: Option<f64>,
) -> Result<CheckReport> {
    let start = Instant::now();
    let k = grid.floor_index(t);
    let a = simulate_ensemble(spec_a, grid, stream_seed(seed, streams::LEFT_SIDE, 0), streams::CHECK, n)?;
    let b = simulate_ensemble(spec_b, grid, stream_seed(seed, streams::RIGHT_SIDE, 0), streams::CHECK, n)?;
    let xa: Vec<f64> = a.paths.iter().map(|p| p.coords[0][k]).collect();
    let xb: Vec<f64> = b.paths.iter().map(|p| p.coords[0][k]).collect();
    let ks = ks_two_sample(&xa, &xb, 0.01)?;
    let mut parts = vec![Part::flag("ks_rejects", ks.statistic, ks.critical, ks.reject)];
    if let Some(level) = level {
        let hits = xa.iter().filter(|&&x| x >= level).count() as f64 / n as f64;
        parts.push(Part::flag("hit_fraction", hits, level, true));
    }
    Ok(CheckReport::new(
        id,
        SideSummary::point(ks.statistic, 0.0),
        SideSummary::point(ks.critical, 0.0),
        0.0,
        Tolerances { z: 0.0, tol_abs: 0.0, tol_rel: 0.0 },
        seed,
        parts,
        start,
    ))
}

/// Drift and variance rate of two processes agree at an anchor. The second
/// process is estimated on independent outer paths.
pub fn check_equal_characteristics(id: &str, est_a: &Estimator, spec_b: &ProcessSpec, tol: Tolerances) -> Result<CheckReport> {
    let start = Instant::now();
    let est_b = Estimator { spec: spec_b.clone(), branch_seed: None, ..est_a.clone() }.seed(stream_seed(est_a.seed, streams::RIGHT_SIDE, 0));
    let functionals = [Functional::drift(c(0)), Functional::variance(c(0), VarianceVariant::CondVar)];
    let ea = est_a.estimate_many(&functionals)?;
    let eb = est_b.estimate_many(&functionals)?;
    let parts = vec![
        Part::compare("drift", ea[0].extrapolated, eb[0].extrapolated, ea[0].extrapolated_stderr.hypot(eb[0].extrapolated_stderr), &tol),
        Part::compare("variance_rate", ea[1].extrapolated, eb[1].extrapolated, ea[1].extrapolated_stderr.hypot(eb[1].extrapolated_stderr), &tol),
    ];
    let se = ea[0].extrapolated_stderr.hypot(eb[0].extrapolated_stderr);
    Ok(CheckReport::new(
        id,
        SideSummary::from_estimate(&ea[0]),
        SideSummary::from_estimate(&eb[0]),
        se,
        tol,
        est_a.seed,
        parts,
        start,
    ))
}

// ---------------------------------------------------------------------------
// exit times and the characteristic operator

/// Exit times of `(x0 - radius, x0 + radius)` for `n` paths.
pub fn first_exit_times(spec: &ProcessSpec, grid: &TimeGrid, radius: f64, cap: f64, n: usize, seed: u64) -> Result<Vec<(f64, bool)>> {
    let rule = StoppingRule::FirstExit { radius, cap };
    (0..n)
        .into_par_iter()
        .map(|i| {
            let (_, stop) = simulate_until(spec, grid, stream_seed(seed, streams::CHECK, i as u64), &rule, 0)?;
            Ok((grid.time(stop.index), stop.capped))
        })
        .collect()
}

/// Mean exit time against `target` within relative tolerance.
pub fn check_first_exit_mean(id: &str, spec: &ProcessSpec, grid: &TimeGrid, radius: f64, n: usize, seed: u64, target: f64, tol_rel: f64) -> Result<CheckReport> {
    let start = Instant::now();
    let times: Vec<f64> = first_exit_times(spec, grid, radius, grid.horizon(), n, seed)?.into_iter().map(|t| t.0).collect();
    let ci = mean_ci(&times, 0.95)?;
    let tol = Tolerances { z: 0.0, tol_abs: 0.0, tol_rel };
    let parts = vec![Part::compare("mean_exit_time", ci.mean, target, 0.0, &tol)];
    Ok(CheckReport::new(
        id,
        SideSummary::point(ci.mean, ci.halfwidth / z_for_level(0.95)?),
        SideSummary::point(target, 0.0),
        ci.halfwidth / z_for_level(0.95)?,
        tol,
        seed,
        parts,
        start,
    ))
}

/// Stopping-limit characteristic operator of `f` against `target`.
pub fn check_characteristic(id: &str, est: &Estimator, f: SmoothFn, target: f64, tol: Tolerances) -> Result<CheckReport> {
    let start = Instant::now();
    let e = characteristic_at(est, f)?;
    let parts = vec![
        Part::compare("finest", e.finest(), target, e.finest_stderr(), &tol),
        Part::compare("extrapolated", e.extrapolated, target, e.extrapolated_stderr, &tol),
    ];
    Ok(CheckReport::new(id, SideSummary::from_estimate(&e), SideSummary::point(target, 0.0), e.extrapolated_stderr, tol, est.seed, parts, start))
}

// ---------------------------------------------------------------------------
// suite

/// Runs every rule on its canonical scenario plus the theorem checks, at the
/// given sizes. Reports are sorted by id.
pub fn run_suite(sizes: &Sizes, seed: u64) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    for rule in RuleId::ALL {
        reports.push(check_identity(rule, sizes, seed)?);
    }
    let grid = TimeGrid::with_horizon(sizes.dt, 1.0)?;
    let base = sizes.estimator(ProcessSpec::brownian(), 1.0, seed)?;

    reports.push(check_zero_drift(
        "ZeroDrift_BM",
        &base,
        c(0),
        &[StoppingRule::AtTime { t: 0.3 }, StoppingRule::Min { rules: vec![StoppingRule::Debut { level: 0.5 }, StoppingRule::AtTime { t: 0.8 }] }],
        Tolerances::default(),
    )?);
    let staircase = Estimator { spec: ProcessSpec::Staircase, ..base.clone() }
        .family(ShrinkFamily::offset(0.1, 4))
        .sizes(2, 2);
    reports.push(check_zero_drift("ZeroDrift_Staircase", &staircase, c(0), &[StoppingRule::AtTime { t: 0.0 }], Tolerances { z: 0.0, tol_abs: 0.02, tol_rel: 0.0 })?);
    reports.push(check_ftc(
        "FTC",
        0.0,
        Adaptation::constant(0.3),
        Adaptation::constant(0.7),
        &base.clone().family(ShrinkFamily::offset(2.0 * sizes.h0, 2)),
        &[StoppingRule::AtTime { t: 0.5 }],
        Tolerances { tol_rel: 0.1, ..Tolerances::default() },
    )?);
    reports.push(check_quadratic_variation(
        "QuadraticVariation",
        &ProcessSpec::brownian(),
        &Adaptation::constant(1.0),
        &grid,
        sizes.n_outer,
        &base,
        &[StoppingRule::AtTime { t: 0.5 }],
        Tolerances::default(),
    )?);
    let levy_grid = TimeGrid::with_horizon(sizes.dt, 8.0)?;
    let a = clipped_rate();
    reports.push(check_levy_time_change("LevyTimeChange", &driftless_with_rate(&a), &a, &levy_grid, 20 * sizes.n_outer, 3, seed, RatePolicy::StrictlyPositive)?);
    let (wt, neg, _) = nonunique_pair();
    let long = TimeGrid::with_horizon(sizes.dt, 20.0)?;
    reports.push(check_distinct_distributions("DistinctDistributions", &wt, &neg, &long, 20.0, 20 * sizes.n_outer, seed, Some(1.0))?);
    let exit_est = Estimator { family: ShrinkFamily::first_exit(0.2, 1.0, sizes.levels), ..base.clone() };
    reports.push(check_characteristic("CharacteristicOperator", &exit_est, SmoothFn::Square, 1.0, Tolerances::relative(0.1))?);
    let fine = TimeGrid::with_horizon(1e-5, 0.2)?;
    reports.push(check_first_exit_mean("FirstExitMean", &ProcessSpec::brownian(), &fine, 0.1, 10 * sizes.n_outer, seed, 0.01, 0.1)?);
    reports.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_ids_round_trip() {
        for r in RuleId::ALL {
            assert_eq!(r.as_str().parse::<RuleId>().unwrap(), r);
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(json, format!("\"{}\"", r.as_str()));
        }
        assert!("Nope".parse::<RuleId>().is_err());
    }

    #[test]
    fn tolerance_bound() {
        let t = Tolerances { z: 3.0, tol_abs: 0.01, tol_rel: 0.1 };
        assert_eq!(t.bound(1.0, 0.0), 0.1);
        assert_eq!(t.bound(0.0, 0.0), 0.01);
        assert_eq!(t.bound(0.0, 1.0), 3.0);
    }

    #[test]
    fn phi_identity_and_rescaling() {
        let g = TimeGrid::with_horizon(0.01, 1.0).unwrap();
        let f = SamplePath::from_fn(g, |t| t);
        let same = phi_apply(&Adaptation::constant(1.0), &f).unwrap();
        assert_eq!(same.values.len(), f.values.len());
        for (a, b) in same.values.iter().zip(&f.values) {
            assert!((a - b).abs() < 1e-12);
        }
        let fast = phi_apply(&Adaptation::constant(4.0), &f).unwrap();
        // intrinsic time runs to 4, and Phi(f)(s) = s / 4 up to one grid step
        assert_eq!(fast.grid.n_steps, 400);
        for k in 0..=fast.grid.n_steps {
            assert!((fast.values[k] - fast.grid.time(k) / 4.0).abs() <= g.dt + 1e-9);
        }
        assert!(matches!(
            phi_apply_to(&Adaptation::constant(0.5), &f, 1.0),
            Err(LabError::InsufficientIntrinsicTime { .. })
        ));
        assert!(matches!(phi_apply(&Adaptation::constant(-1.0), &f), Err(LabError::NonPositiveRate { .. })));
    }

    #[test]
    fn phi_round_trip_on_brownian_path() {
        let g = TimeGrid::with_horizon(1e-3, 1.0).unwrap();
        let a = clipped_rate();
        for seed in 0..5 {
            let f = crate::processes::simulate_path(&ProcessSpec::brownian(), &g, seed).unwrap();
            let phi = phi_apply(&a, &f).unwrap();
            let back = phi_invert(&a, &phi, &g).unwrap();
            let max_step = f.values.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max);
            let n = back.values.len().min(f.values.len());
            assert!(n > g.len() / 2, "overlap {n}");
            let err = (0..n).map(|k| (back.values[k] - f.values[k]).abs()).fold(0.0, f64::max);
            assert!(err <= 2.0 * max_step, "seed {seed}: {err} > 2 * {max_step}");
        }
    }

    #[test]
    fn hit_probability_closed_form() {
        assert!((hit_probability(20.0) - 0.8231).abs() < 1e-3);
    }

    #[test]
    fn quick_identity_reports_are_complete() {
        let r = check_identity(RuleId::Linearity, &Sizes::quick(), 3).unwrap();
        assert_eq!(r.id, "Linearity");
        assert_eq!(r.parts.len(), 2);
        assert!(r.left.ci.halfwidth >= 0.0);
        let json = serde_json::to_value(&r).unwrap();
        for key in ["id", "verdict", "left", "right", "ci", "tolerances", "seed", "runtime_s"] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn summary_is_sorted() {
        let mut a = check_identity(RuleId::Linearity, &Sizes::quick(), 1).unwrap();
        let mut b = a.clone();
        a.id = "b".into();
        b.id = "a".into();
        let csv = summary_csv(&[a, b]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "id,verdict,left,right,stderr,seed,runtime_s");
        assert!(lines[1].starts_with("a,"));
        assert!(lines[2].starts_with("b,"));
    }

    #[test]
    fn wrong_target_fails() {
        let est = Estimator::new(ProcessSpec::Deterministic { f: TimeFn::identity() }, TimeGrid::with_horizon(1e-3, 1.0).unwrap())
            .sizes(2, 2);
        let r = check_zero_drift("wrong", &est, c(0), &[StoppingRule::AtTime { t: 0.2 }], Tolerances::default()).unwrap();
        assert_eq!(r.verdict, Verdict::Fail);
    }
}
