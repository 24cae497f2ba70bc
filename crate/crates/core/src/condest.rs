//! Bundle estimators of cadlag-adjusted conditional moments at stopping times.
//!
//! A bundle fixes one outer prefix up to the anchor `S`; the empirical law of
//! its continuations stands in for the conditional law given the history up to
//! `S`. Every estimator evaluates the observable at `T-`, the left limit at the
//! realized stop (or at `S` itself when `T = S`).

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::paths::left_limit_index;
use crate::processes::{Adaptation, Bundle, PrefixCtx};
use crate::stopping::{realize, RealizedStop, StoppingRule};

/// Smooth scalar functions with first and second derivatives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SmoothFn {
    Identity,
    Square,
    Exp,
    Log,
    Sin,
    Power { p: f64 },
}

impl SmoothFn {
    pub fn value(&self, x: f64) -> f64 {
        match self {
            SmoothFn::Identity => x,
            SmoothFn::Square => x * x,
            SmoothFn::Exp => x.exp(),
            SmoothFn::Log => x.ln(),
            SmoothFn::Sin => x.sin(),
            SmoothFn::Power { p } => x.powf(*p),
        }
    }

    pub fn d1(&self, x: f64) -> f64 {
        match self {
            SmoothFn::Identity => 1.0,
            SmoothFn::Square => 2.0 * x,
            SmoothFn::Exp => x.exp(),
            SmoothFn::Log => 1.0 / x,
            SmoothFn::Sin => x.cos(),
            SmoothFn::Power { p } => p * x.powf(p - 1.0),
        }
    }

    pub fn d2(&self, x: f64) -> f64 {
        match self {
            SmoothFn::Identity => 0.0,
            SmoothFn::Square => 2.0,
            SmoothFn::Exp => x.exp(),
            SmoothFn::Log => -1.0 / (x * x),
            SmoothFn::Sin => -x.sin(),
            SmoothFn::Power { p } => p * (p - 1.0) * x.powf(p - 2.0),
        }
    }
}

/// Pointwise function of the state vector and time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Observable {
    Coord { index: usize },
    Time,
    Const { value: f64 },
    Sum { terms: Vec<Observable> },
    Scaled { factor: f64, inner: Box<Observable> },
    Product { left: Box<Observable>, right: Box<Observable> },
    Apply { f: SmoothFn, inner: Box<Observable> },
}

impl Observable {
    pub fn coord(index: usize) -> Self {
        Observable::Coord { index }
    }

    pub fn apply(f: SmoothFn, inner: Observable) -> Self {
        Observable::Apply { f, inner: Box::new(inner) }
    }

    pub fn product(left: Observable, right: Observable) -> Self {
        Observable::Product { left: Box::new(left), right: Box::new(right) }
    }

    pub fn scaled(factor: f64, inner: Observable) -> Self {
        Observable::Scaled { factor, inner: Box::new(inner) }
    }

    pub fn eval(&self, x: &[f64], t: f64) -> f64 {
        match self {
            Observable::Coord { index } => x[*index],
            Observable::Time => t,
            Observable::Const { value } => *value,
            Observable::Sum { terms } => terms.iter().map(|o| o.eval(x, t)).sum(),
            Observable::Scaled { factor, inner } => factor * inner.eval(x, t),
            Observable::Product { left, right } => left.eval(x, t) * right.eval(x, t),
            Observable::Apply { f, inner } => f.value(inner.eval(x, t)),
        }
    }

    /// Largest coordinate index referenced, if any.
    pub fn max_coord(&self) -> Option<usize> {
        match self {
            Observable::Coord { index } => Some(*index),
            Observable::Time | Observable::Const { .. } => None,
            Observable::Sum { terms } => terms.iter().filter_map(|o| o.max_coord()).max(),
            Observable::Scaled { inner, .. } | Observable::Apply { inner, .. } => inner.max_coord(),
            Observable::Product { left, right } => left.max_coord().max(right.max_coord()),
        }
    }

    pub fn check_dim(&self, dim: usize) -> Result<()> {
        match self.max_coord() {
            Some(i) if i >= dim => Err(LabError::InvalidParameter(format!(
                "observable uses coordinate {i} of a {dim}-dimensional process"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MomentKind {
    CondExp,
    CondVar,
    CondCov { other: Observable },
    RelSecondMoment,
    /// Second moment of `X_{T-} - X_S - centre * (T - S)`.
    ProjectedCentre { centre: f64 },
    /// Second moment of `X_{T-} - X_S - int_S^{T-} b(X, u) du`, with `b`
    /// evaluated on the observable's path.
    IntegratedDriftCentre { b: Adaptation },
}

/// What a bundle estimate is computed on: the observable and the coordinate
/// on which stopping rules are realized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub observable: Observable,
    pub stop_coord: usize,
}

impl Default for Target {
    fn default() -> Self {
        Target { observable: Observable::coord(0), stop_coord: 0 }
    }
}

impl Target {
    pub fn on(observable: Observable) -> Self {
        Target { observable, stop_coord: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BundleEstimate {
    pub value: f64,
    pub stderr: f64,
    /// Mean of `T - S` over the continuations, in time units.
    pub denominator: f64,
    pub m: usize,
}

/// Per-continuation quantities at the realized stop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StopSample {
    pub stop: RealizedStop,
    /// Observable at `T-`.
    pub left: f64,
    /// Observable at `T` itself.
    pub at_stop: f64,
}

/// Realizes `rule` on every continuation of `bundle`.
pub fn realize_in_bundle(bundle: &Bundle, rule: &StoppingRule, stop_coord: usize) -> Result<Vec<RealizedStop>> {
    if stop_coord >= bundle.dim() {
        return Err(LabError::InvalidParameter(format!("stop coordinate {stop_coord} out of range")));
    }
    (0..bundle.m())
        .map(|m| realize(rule, &bundle.continuation(m).coord(stop_coord), bundle.s_idx, &bundle.grid))
        .collect()
}

fn observe(bundle: &Bundle, m: usize, k: usize, obs: &Observable, row: &mut [f64]) -> f64 {
    bundle.continuation(m).row_into(k, row);
    obs.eval(row, bundle.grid.time(k))
}

/// Observable at `T-` and at `T` for every continuation.
pub fn stop_samples(bundle: &Bundle, stops: &[RealizedStop], obs: &Observable) -> Result<Vec<StopSample>> {
    obs.check_dim(bundle.dim())?;
    let mut row = vec![0.0; bundle.dim()];
    Ok(stops
        .iter()
        .enumerate()
        .map(|(m, stop)| {
            let left = observe(bundle, m, left_limit_index(bundle.s_idx, stop.index), obs, &mut row);
            let at_stop = observe(bundle, m, stop.index, obs, &mut row);
            StopSample { stop: *stop, left, at_stop }
        })
        .collect())
}

pub fn bundle_moment(kind: &MomentKind, bundle: &Bundle, rule: &StoppingRule) -> Result<BundleEstimate> {
    bundle_moment_on(kind, bundle, rule, &Target::default())
}

pub fn bundle_moment_on(kind: &MomentKind, bundle: &Bundle, rule: &StoppingRule, target: &Target) -> Result<BundleEstimate> {
    if bundle.m() < 2 {
        return Err(LabError::InsufficientBundle { m: bundle.m() });
    }
    let stops = realize_in_bundle(bundle, rule, target.stop_coord)?;
    moment_from_stops(kind, bundle, &stops, &target.observable)
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Moment estimate from already realized stops.
pub fn moment_from_stops(kind: &MomentKind, bundle: &Bundle, stops: &[RealizedStop], obs: &Observable) -> Result<BundleEstimate> {
    let m = stops.len();
    if m < 2 {
        return Err(LabError::InsufficientBundle { m });
    }
    let s_idx = bundle.s_idx;
    let dt = bundle.grid.dt;
    let samples = stop_samples(bundle, stops, obs)?;
    let durations: Vec<f64> = stops.iter().map(|s| (s.index - s_idx) as f64 * dt).collect();
    let denominator = durations.iter().sum::<f64>() / m as f64;
    let zero = stops.iter().filter(|s| s.index == s_idx).count();
    if zero == m && !matches!(kind, MomentKind::CondExp) {
        return Err(LabError::DegenerateStoppingFamily { scale: 0.0, fraction: 1.0 });
    }
    let anchor_row = bundle.anchor_row();
    let x_s = obs.eval(&anchor_row, bundle.grid.time(s_idx));
    let left: Vec<f64> = samples.iter().map(|s| s.left).collect();

    let terms: Vec<f64> = match kind {
        MomentKind::CondExp => left.clone(),
        MomentKind::CondVar => {
            let c = left.iter().sum::<f64>() / m as f64;
            left.iter().map(|x| (x - c) * (x - c)).collect()
        }
        MomentKind::CondCov { other } => {
            let other_samples = stop_samples(bundle, stops, other)?;
            let right: Vec<f64> = other_samples.iter().map(|s| s.left).collect();
            let cx = left.iter().sum::<f64>() / m as f64;
            let cy = right.iter().sum::<f64>() / m as f64;
            left.iter().zip(&right).map(|(x, y)| (x - cx) * (y - cy)).collect()
        }
        MomentKind::RelSecondMoment => left.iter().map(|x| (x - x_s) * (x - x_s)).collect(),
        MomentKind::ProjectedCentre { centre } => left
            .iter()
            .zip(&durations)
            .map(|(x, d)| {
                let e = x - x_s - centre * d;
                e * e
            })
            .collect(),
        MomentKind::IntegratedDriftCentre { b } => {
            let integrals = drift_integrals(bundle, stops, obs, b)?;
            left.iter()
                .zip(&integrals)
                .map(|(x, i)| {
                    let e = x - x_s - i;
                    e * e
                })
                .collect()
        }
    };
    let (value, sd) = mean_sd(&terms);
    Ok(BundleEstimate { value, stderr: sd / (m as f64).sqrt(), denominator, m })
}

/// `sum_{j=s}^{T-2} b_j dt` per continuation: the left Riemann integral of `b`
/// from `S` up to the grid point of `T-`.
fn drift_integrals(bundle: &Bundle, stops: &[RealizedStop], obs: &Observable, b: &Adaptation) -> Result<Vec<f64>> {
    let s_idx = bundle.s_idx;
    let grid = bundle.grid;
    let mut row = vec![0.0; bundle.dim()];
    let mut series: Vec<f64> = (0..=s_idx).map(|k| observe(bundle, 0, k, obs, &mut row)).collect();
    let (hi0, lo0) = series.iter().fold((f64::NEG_INFINITY, f64::INFINITY), |(h, l), &v| (h.max(v), l.min(v)));
    let mut out = Vec::with_capacity(stops.len());
    for (m, stop) in stops.iter().enumerate() {
        let last = left_limit_index(s_idx, stop.index);
        series.truncate(s_idx + 1);
        for k in (s_idx + 1)..=last {
            series.push(observe(bundle, m, k, obs, &mut row));
        }
        let (mut hi, mut lo) = (hi0, lo0);
        let mut acc = 0.0;
        for k in s_idx..last {
            hi = hi.max(series[k]);
            lo = lo.min(series[k]);
            let ctx = PrefixCtx::from_slice(&series[..=k], k, grid.time(k), hi, lo);
            acc += b.eval(&ctx) * grid.dt;
        }
        if !acc.is_finite() {
            return Err(LabError::NumericalBlowup { index: last });
        }
        out.push(acc);
    }
    Ok(out)
}

/// Conditional covariance matrix of `observables` at `T-`.
pub fn cond_cov_matrix(bundle: &Bundle, rule: &StoppingRule, observables: &[Observable], stop_coord: usize) -> Result<Vec<Vec<f64>>> {
    if bundle.m() < 2 {
        return Err(LabError::InsufficientBundle { m: bundle.m() });
    }
    let stops = realize_in_bundle(bundle, rule, stop_coord)?;
    let d = observables.len();
    let mut out = vec![vec![0.0; d]; d];
    for i in 0..d {
        for j in i..d {
            let kind = MomentKind::CondCov { other: observables[j].clone() };
            let v = moment_from_stops(&kind, bundle, &stops, &observables[i])?.value;
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    Ok(out)
}

/// Deviations from the stopping limit along a shrinking family: `|CondExp -
/// X_S|` or `|CondVar|` per rule.
pub fn stopping_continuity_probe(kind: &MomentKind, bundle: &Bundle, family: &[StoppingRule]) -> Result<Vec<f64>> {
    let x_s = bundle.anchor_value(0);
    family
        .iter()
        .map(|rule| match kind {
            MomentKind::CondExp => Ok((bundle_moment(kind, bundle, rule)?.value - x_s).abs()),
            MomentKind::CondVar => Ok(bundle_moment(kind, bundle, rule)?.value.abs()),
            _ => Err(LabError::InvalidParameter("continuity probe supports cond_exp and cond_var".into())),
        })
        .collect()
}

/// CSV with header `outer_index,value,stderr,denominator`.
pub fn estimates_to_csv(estimates: &[BundleEstimate]) -> String {
    let mut out = String::from("outer_index,value,stderr,denominator\n");
    for (i, e) in estimates.iter().enumerate() {
        out.push_str(&format!(
            "{i},{},{},{}\n",
            crate::paths::fmt_full(e.value),
            crate::paths::fmt_full(e.stderr),
            crate::paths::fmt_full(e.denominator)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::TimeGrid;
    use crate::processes::{branch, branch_continuations, simulate, BranchEnd, ProcessSpec};
    use crate::stopping::Event;
    use proptest::prelude::*;

    fn grid() -> TimeGrid {
        TimeGrid::with_horizon(0.001, 1.0).unwrap()
    }

    fn bm_bundle(s_idx: usize, m: usize, seed: u64) -> Bundle {
        let g = grid();
        let spec = ProcessSpec::brownian();
        let outer = simulate(&spec, &g, seed).unwrap();
        branch_continuations(&spec, &outer, s_idx, m, seed + 1).unwrap()
    }

    #[test]
    fn frozen_bundle_moments() {
        let g = grid();
        let spec = ProcessSpec::ito_constant(1.5, 0.0, 0.0);
        let outer = simulate(&spec, &g, 0).unwrap();
        let b = branch_continuations(&spec, &outer, 200, 10, 1).unwrap();
        let rule = StoppingRule::OffsetFromS { h: 0.1 };
        assert_eq!(bundle_moment(&MomentKind::CondExp, &b, &rule).unwrap().value, 1.5);
        assert_eq!(bundle_moment(&MomentKind::CondVar, &b, &rule).unwrap().value, 0.0);
        let probe = stopping_continuity_probe(&MomentKind::CondExp, &b, &[rule.clone(), StoppingRule::OffsetFromS { h: 0.05 }]).unwrap();
        assert!(probe.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn stop_at_anchor_returns_anchor_value() {
        let b = bm_bundle(300, 8, 3);
        let rule = StoppingRule::AtTime { t: 0.0 };
        let e = bundle_moment(&MomentKind::CondExp, &b, &rule).unwrap();
        assert_eq!(e.value, b.anchor_value(0));
        assert_eq!(e.denominator, 0.0);
        assert!(matches!(
            bundle_moment(&MomentKind::CondVar, &b, &rule),
            Err(LabError::DegenerateStoppingFamily { .. })
        ));
    }

    #[test]
    fn brownian_relative_second_moment() {
        let m = 4000;
        let b = bm_bundle(250, m, 7);
        let h = 0.1;
        let e = bundle_moment(&MomentKind::RelSecondMoment, &b, &StoppingRule::OffsetFromS { h }).unwrap();
        // X_{T-} sits one grid step before S + h
        let eff = h - grid().dt;
        let tol = 3.0 * eff * (2.0 / m as f64).sqrt();
        assert!((e.value - eff).abs() <= tol, "{} vs {eff} ± {tol}", e.value);
        assert!((e.denominator - h).abs() < 1e-12);
    }

    #[test]
    fn continuity_probe_shrinks() {
        let b = bm_bundle(100, 2000, 11);
        let family: Vec<StoppingRule> = (0..4).map(|j| StoppingRule::OffsetFromS { h: 0.1 / 2f64.powi(j) }).collect();
        let var = stopping_continuity_probe(&MomentKind::CondVar, &b, &family).unwrap();
        for (j, v) in var.iter().enumerate() {
            let h = 0.1 / 2f64.powi(j as i32) - grid().dt;
            assert!((v - h).abs() < 0.15 * h, "scale {j}: {v} vs {h}");
        }
        let mean = stopping_continuity_probe(&MomentKind::CondExp, &b, &family).unwrap();
        for (j, d) in mean.iter().enumerate() {
            let h = 0.1 / 2f64.powi(j as i32);
            assert!(*d <= 4.0 * (h / 2000.0).sqrt(), "scale {j}: {d}");
        }
        assert!(stopping_continuity_probe(&MomentKind::RelSecondMoment, &b, &family).is_err());
    }

    #[test]
    fn insufficient_bundle() {
        let mut b = bm_bundle(10, 2, 1);
        b.tails.truncate(1);
        assert_eq!(
            bundle_moment(&MomentKind::CondExp, &b, &StoppingRule::OffsetFromS { h: 0.1 }).unwrap_err(),
            LabError::InsufficientBundle { m: 1 }
        );
    }

    #[test]
    fn cov_of_same_coordinate_is_variance_bitwise() {
        let b = bm_bundle(100, 50, 5);
        let rule = StoppingRule::FirstExit { radius: 0.05, cap: 0.5 };
        let v = bundle_moment(&MomentKind::CondVar, &b, &rule).unwrap();
        let c = bundle_moment(&MomentKind::CondCov { other: Observable::coord(0) }, &b, &rule).unwrap();
        assert_eq!(v.value.to_bits(), c.value.to_bits());
        assert_eq!(v.stderr.to_bits(), c.stderr.to_bits());
    }

    #[test]
    fn integrated_drift_centre_removes_linear_drift() {
        let g = grid();
        let spec = ProcessSpec::ito_constant(0.0, 3.0, 0.0);
        let outer = simulate(&spec, &g, 0).unwrap();
        let b = branch_continuations(&spec, &outer, 100, 4, 1).unwrap();
        let rule = StoppingRule::OffsetFromS { h: 0.2 };
        let e = bundle_moment(&MomentKind::IntegratedDriftCentre { b: Adaptation::constant(3.0) }, &b, &rule).unwrap();
        assert!(e.value < 1e-20, "{}", e.value);
        let raw = bundle_moment(&MomentKind::RelSecondMoment, &b, &rule).unwrap();
        assert!((raw.value - (3.0 * 0.199f64).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn csv_header() {
        let csv = estimates_to_csv(&[BundleEstimate { value: 1.0, stderr: 0.5, denominator: 0.1, m: 3 }]);
        assert!(csv.starts_with("outer_index,value,stderr,denominator\n0,1.0000000000000000e0,"));
    }

    #[test]
    fn cov_matrix_is_psd() {
        let g = grid();
        let spec = ProcessSpec::CorrelatedBm { corr: vec![vec![1.0, 0.6, 0.0], vec![0.6, 1.0, -0.3], vec![0.0, -0.3, 1.0]] };
        let outer = simulate(&spec, &g, 2).unwrap();
        let b = branch(&spec, &outer, 100, 30, 3, BranchEnd::Index(400)).unwrap();
        let obs: Vec<Observable> = (0..3).map(Observable::coord).collect();
        let c = cond_cov_matrix(&b, &StoppingRule::OffsetFromS { h: 0.2 }, &obs, 0).unwrap();
        let mat = nalgebra::DMatrix::from_fn(3, 3, |i, j| c[i][j]);
        let min = mat.symmetric_eigen().eigenvalues.min();
        assert!(min >= -1e-12, "{min}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn partition_property_is_exact(seed in 0u64..1000, split in -0.5f64..0.5, h1 in 0.01f64..0.3, h2 in 0.01f64..0.3, kind_ix in 0usize..4) {
            let b = bm_bundle(200, 16, seed);
            let events = vec![Event::AnchorValueAtLeast { value: split }, Event::AnchorValueBelow { value: split }];
            let rules = vec![StoppingRule::OffsetFromS { h: h1 }, StoppingRule::FirstExit { radius: h2, cap: 0.5 }];
            let glued = StoppingRule::PartitionGlue { events: events.clone(), rules: rules.clone() };
            let kind = [
                MomentKind::CondExp,
                MomentKind::CondVar,
                MomentKind::RelSecondMoment,
                MomentKind::ProjectedCentre { centre: 0.4 },
            ][kind_ix].clone();
            let chosen = if b.anchor_value(0) >= split { 0 } else { 1 };
            let g = bundle_moment(&kind, &b, &glued).unwrap();
            let direct = bundle_moment(&kind, &b, &rules[chosen]).unwrap();
            prop_assert_eq!(g.value.to_bits(), direct.value.to_bits());
            prop_assert_eq!(g.denominator.to_bits(), direct.denominator.to_bits());
        }

        #[test]
        fn variance_identity(seed in 0u64..1000, h in 0.005f64..0.3, drift in -3.0f64..3.0) {
            let g = grid();
            let spec = ProcessSpec::ito_constant(0.2, drift, 1.0);
            let outer = simulate(&spec, &g, seed).unwrap();
            let b = branch(&spec, &outer, 300, 12, seed, BranchEnd::Index(700)).unwrap();
            let rule = StoppingRule::OffsetFromS { h };
            let var = bundle_moment(&MomentKind::CondVar, &b, &rule).unwrap().value;
            let rsm = bundle_moment(&MomentKind::RelSecondMoment, &b, &rule).unwrap().value;
            let mean = bundle_moment(&MomentKind::CondExp, &b, &rule).unwrap().value;
            let shift = mean - b.anchor_value(0);
            prop_assert!(var >= 0.0);
            prop_assert!((var - (rsm - shift * shift)).abs() <= 2f64.powi(-40) * rsm.max(f64::MIN_POSITIVE));
        }
    }
}
