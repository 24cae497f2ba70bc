//! Stopping rules and their realization as grid indices.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::paths::{PathAccess, TimeGrid};
use crate::processes::Adaptation;

fn default_cap() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StoppingRule {
    /// Deterministic time `t`, never earlier than the anchor.
    AtTime { t: f64 },
    /// `S + h`.
    OffsetFromS { h: f64 },
    /// First approach beyond the anchor to `{x : |x - X_S| >= radius}`, capped
    /// at `S + cap`.
    FirstExit {
        radius: f64,
        #[serde(default = "default_cap")]
        cap: f64,
    },
    /// First time after the anchor with `X_t >= level`.
    Debut { level: f64 },
    Min { rules: Vec<StoppingRule> },
    /// Selects `rules[i]` on the event `events[i]`, judged at the anchor.
    PartitionGlue { events: Vec<Event>, rules: Vec<StoppingRule> },
}

#[derive(Clone)]
pub struct CustomEvent(pub Arc<dyn Fn(&dyn PathAccess, usize, &TimeGrid) -> bool + Send + Sync>);

impl CustomEvent {
    pub fn new(f: impl Fn(&dyn PathAccess, usize, &TimeGrid) -> bool + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }
}

impl fmt::Debug for CustomEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomEvent(..)")
    }
}

/// Predicate on the path prefix up to the anchor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    Always,
    AnchorValueAtLeast { value: f64 },
    AnchorValueBelow { value: f64 },
    AnchorTimeAtLeast { t: f64 },
    AnchorTimeBelow { t: f64 },
    #[serde(skip)]
    Custom(CustomEvent),
}

impl Event {
    pub fn holds<P: PathAccess>(&self, path: &P, s_idx: usize, grid: &TimeGrid) -> bool {
        self.holds_dyn(path, s_idx, grid)
    }

    fn holds_dyn(&self, path: &dyn PathAccess, s_idx: usize, grid: &TimeGrid) -> bool {
        match self {
            Event::Always => true,
            Event::AnchorValueAtLeast { value } => path.at(s_idx) >= *value,
            Event::AnchorValueBelow { value } => path.at(s_idx) < *value,
            Event::AnchorTimeAtLeast { t } => grid.time(s_idx) >= *t,
            Event::AnchorTimeBelow { t } => grid.time(s_idx) < *t,
            Event::Custom(f) => (f.0)(path, s_idx, grid),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RealizedStop {
    pub index: usize,
    /// True when a cap or the horizon fired instead of the rule itself.
    pub capped: bool,
}

impl StoppingRule {
    pub fn validate(&self) -> Result<()> {
        match self {
            StoppingRule::AtTime { t } => {
                if !(*t >= 0.0 && t.is_finite()) {
                    return Err(LabError::InvalidRule(format!("at_time needs a finite t >= 0, got {t}")));
                }
            }
            StoppingRule::OffsetFromS { h } => {
                if !(*h > 0.0 && h.is_finite()) {
                    return Err(LabError::InvalidRule(format!("offset h must be positive, got {h}")));
                }
            }
            StoppingRule::FirstExit { radius, cap } => {
                if !(*radius > 0.0 && radius.is_finite()) {
                    return Err(LabError::InvalidRule(format!("first_exit radius must be positive, got {radius}")));
                }
                if !(*cap > 0.0 && cap.is_finite()) {
                    return Err(LabError::InvalidRule(format!("first_exit cap must be positive and finite, got {cap}")));
                }
            }
            StoppingRule::Debut { level } => {
                if !level.is_finite() {
                    return Err(LabError::InvalidRule(format!("debut level must be finite, got {level}")));
                }
            }
            StoppingRule::Min { rules } => {
                if rules.is_empty() {
                    return Err(LabError::InvalidRule("min of no rules".into()));
                }
                rules.iter().try_for_each(|r| r.validate())?;
            }
            StoppingRule::PartitionGlue { events, rules } => {
                if events.is_empty() || events.len() != rules.len() {
                    return Err(LabError::InvalidRule(format!(
                        "partition needs matching events and rules, got {} and {}",
                        events.len(),
                        rules.len()
                    )));
                }
                rules.iter().try_for_each(|r| r.validate())?;
            }
        }
        Ok(())
    }
}

/// Realizes `rule` on `path` from the anchor index `s_idx`.
pub fn realize<P: PathAccess>(rule: &StoppingRule, path: &P, s_idx: usize, grid: &TimeGrid) -> Result<RealizedStop> {
    rule.validate()?;
    if s_idx > grid.n_steps || s_idx >= path.len() {
        return Err(LabError::OutOfRange { what: "s_idx", value: s_idx as f64 });
    }
    let end = grid.n_steps.min(path.len() - 1);
    let (index, capped) = scan(rule, path, grid, s_idx, s_idx, end)?.unwrap_or((end, true));
    Ok(RealizedStop { index, capped })
}

/// Realizes `rule` on every path; the result is ordered like the input.
pub fn realize_all<P: PathAccess + Sync>(rule: &StoppingRule, paths: &[P], s_idx: usize, grid: &TimeGrid) -> Result<Vec<RealizedStop>> {
    use rayon::prelude::*;
    paths.par_iter().map(|p| realize(rule, p, s_idx, grid)).collect()
}

/// Per-path selection `sum_i 1_{P_i} T_i`.
pub fn glue_partition<P: PathAccess>(
    events: &[Event],
    realized: &[RealizedStop],
    path: &P,
    s_idx: usize,
    grid: &TimeGrid,
) -> Result<RealizedStop> {
    if events.len() != realized.len() {
        return Err(LabError::InvalidRule(format!(
            "{} events for {} realized stops",
            events.len(),
            realized.len()
        )));
    }
    Ok(realized[select_event(events, path, s_idx, grid)?])
}

fn select_event(events: &[Event], path: &dyn PathAccess, s_idx: usize, grid: &TimeGrid) -> Result<usize> {
    let mut chosen = None;
    let mut holding = 0;
    for (i, e) in events.iter().enumerate() {
        if e.holds_dyn(path, s_idx, grid) {
            holding += 1;
            chosen.get_or_insert(i);
        }
    }
    match (holding, chosen) {
        (1, Some(i)) => Ok(i),
        _ => Err(LabError::PartitionViolation { holding }),
    }
}

/// Looks for the firing index of `rule` (anchored at `anchor`) among grid
/// indices `from..=to`, assuming earlier indices were already scanned without
/// firing. Returns the index and whether a cap fired. Reaching the horizon
/// without firing counts as a capped stop at the horizon.
pub(crate) fn scan<P: PathAccess>(
    rule: &StoppingRule,
    path: &P,
    grid: &TimeGrid,
    anchor: usize,
    from: usize,
    to: usize,
) -> Result<Option<(usize, bool)>> {
    scan_dyn(rule, path, grid, anchor, from, to)
}

fn scan_dyn(
    rule: &StoppingRule,
    path: &dyn PathAccess,
    grid: &TimeGrid,
    anchor: usize,
    from: usize,
    to: usize,
) -> Result<Option<(usize, bool)>> {
    let n = grid.n_steps;
    let fixed = |target: usize, over: bool| -> Option<(usize, bool)> {
        let (idx, capped) = if target > n { (n, true) } else { (target.max(anchor), over) };
        (from <= idx && idx <= to).then_some((idx, capped))
    };
    let horizon = || (to >= n).then_some((n, true));
    Ok(match rule {
        StoppingRule::AtTime { t } => {
            let over = *t > grid.horizon() * (1.0 + 1e-12);
            fixed(grid.floor_index(*t), over)
        }
        StoppingRule::OffsetFromS { h } => fixed(anchor.saturating_add(grid.steps_in(*h)), false),
        StoppingRule::FirstExit { radius, cap } => {
            let base = path.at(anchor);
            let cap_idx = anchor.saturating_add(grid.steps_in(*cap)).min(n);
            let mut hit = None;
            for k in from.max(anchor + 1)..=to.min(cap_idx) {
                if (path.at(k) - base).abs() >= *radius || (path.at(k - 1) - base).abs() >= *radius {
                    hit = Some((k, false));
                    break;
                }
            }
            hit.or_else(|| (from <= cap_idx && cap_idx <= to).then_some((cap_idx, true)))
        }
        StoppingRule::Debut { level } => {
            let mut hit = None;
            for k in from.max(anchor + 1)..=to {
                if path.at(k) >= *level || path.at(k - 1) >= *level {
                    hit = Some((k, false));
                    break;
                }
            }
            hit.or_else(horizon)
        }
        StoppingRule::Min { rules } => {
            if rules.is_empty() {
                return Err(LabError::InvalidRule("min of no rules".into()));
            }
            let mut best: Option<(usize, bool)> = None;
            for r in rules {
                if let Some(c) = scan_dyn(r, path, grid, anchor, from, to)? {
                    best = Some(match best {
                        None => c,
                        Some(b) if c.0 < b.0 || (c.0 == b.0 && !c.1) => c,
                        Some(b) => b,
                    });
                }
            }
            best
        }
        StoppingRule::PartitionGlue { events, rules } => {
            if events.len() != rules.len() {
                return Err(LabError::InvalidRule("partition events and rules differ in length".into()));
            }
            let i = select_event(events, path, anchor, grid)?;
            scan_dyn(&rules[i], path, grid, anchor, from, to)?
        }
    })
}

/// Whether the rule accepts zero rates in [`realize_time_change`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatePolicy {
    StrictlyPositive,
    AllowZero,
}

/// Cumulative rate table `Cum[k] = sum_{j<k} a(prefix, j) dt` and its
/// generalized inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeChangeRealization {
    pub grid: TimeGrid,
    pub cum: Vec<f64>,
}

impl TimeChangeRealization {
    /// Smallest grid index `k` with `Cum[k] >= s`, or `None` when the table
    /// never reaches `s`.
    pub fn r_index(&self, s: f64) -> Option<usize> {
        let k = self.cum.partition_point(|&c| c < s);
        (k < self.cum.len()).then_some(k)
    }

    pub fn r_time(&self, s: f64) -> Option<f64> {
        self.r_index(s).map(|k| self.grid.time(k))
    }

    /// Total intrinsic time available on the path.
    pub fn total(&self) -> f64 {
        *self.cum.last().expect("table is never empty")
    }
}

pub fn realize_time_change(a: &Adaptation, values: &[f64], grid: &TimeGrid) -> Result<TimeChangeRealization> {
    realize_time_change_with(a, values, grid, RatePolicy::StrictlyPositive)
}

pub fn realize_time_change_with(
    a: &Adaptation,
    values: &[f64],
    grid: &TimeGrid,
    policy: RatePolicy,
) -> Result<TimeChangeRealization> {
    if values.is_empty() {
        return Err(LabError::InvalidParameter("empty path".into()));
    }
    let rates = a.eval_along(values, grid);
    let mut cum = Vec::with_capacity(values.len());
    cum.push(0.0);
    for (j, &r) in rates.iter().enumerate().take(values.len() - 1) {
        let bad = match policy {
            RatePolicy::StrictlyPositive => !(r > 0.0),
            RatePolicy::AllowZero => !(r >= 0.0),
        };
        if bad || !r.is_finite() {
            return Err(LabError::NonPositiveRate { index: j, value: r });
        }
        cum.push(cum[j] + r * grid.dt);
    }
    Ok(TimeChangeRealization { grid: *grid, cum })
}

/// CSV with header `path_index,stop_index,capped`.
pub fn stops_to_csv(stops: &[RealizedStop]) -> String {
    let mut out = String::from("path_index,stop_index,capped\n");
    for (i, s) in stops.iter().enumerate() {
        out.push_str(&format!("{i},{},{}\n", s.index, s.capped));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::paths::SamplePath;
    use crate::processes::{simulate_path, ProcessSpec};
    use proptest::prelude::*;

    fn g(dt: f64, horizon: f64) -> TimeGrid {
        TimeGrid::with_horizon(dt, horizon).unwrap()
    }

    #[test]
    fn first_exit_on_linear_path() {
        let grid = g(0.001, 1.0);
        let p = SamplePath::from_fn(grid, |t| t);
        let r = realize(&StoppingRule::FirstExit { radius: 0.1, cap: 1.0 }, &p, 0, &grid).unwrap();
        assert!(!r.capped && (100..=101).contains(&r.index), "{r:?}");
        let r = realize(&StoppingRule::FirstExit { radius: 0.1, cap: 1.0 }, &p, 250, &grid).unwrap();
        assert!((350..=351).contains(&r.index), "{r:?}");
    }

    #[test]
    fn first_exit_cap_fires() {
        let grid = g(0.01, 2.0);
        let p = SamplePath::from_fn(grid, |_| 0.0);
        let r = realize(&StoppingRule::FirstExit { radius: 0.1, cap: 0.5 }, &p, 10, &grid).unwrap();
        assert_eq!(r, RealizedStop { index: 60, capped: true });
    }

    #[test]
    fn debut_never_reached_is_capped_at_horizon() {
        let grid = g(0.01, 1.0);
        let p = SamplePath::from_fn(grid, |t| t * 0.5);
        let r = realize(&StoppingRule::Debut { level: 1.0 }, &p, 0, &grid).unwrap();
        assert_eq!(r, RealizedStop { index: grid.n_steps, capped: true });
    }

    #[test]
    fn fixed_times_round_down_and_respect_anchor() {
        let grid = g(0.1, 1.0);
        let p = SamplePath::from_fn(grid, |_| 0.0);
        assert_eq!(realize(&StoppingRule::AtTime { t: 0.35 }, &p, 0, &grid).unwrap().index, 3);
        assert_eq!(realize(&StoppingRule::AtTime { t: 0.3 }, &p, 0, &grid).unwrap().index, 3);
        assert_eq!(realize(&StoppingRule::AtTime { t: 0.3 }, &p, 5, &grid).unwrap().index, 5);
        assert_eq!(realize(&StoppingRule::OffsetFromS { h: 0.25 }, &p, 4, &grid).unwrap().index, 6);
        let far = realize(&StoppingRule::OffsetFromS { h: 5.0 }, &p, 4, &grid).unwrap();
        assert_eq!(far, RealizedStop { index: 10, capped: true });
    }

    #[test]
    fn empty_min_is_invalid() {
        let grid = g(0.1, 1.0);
        let p = SamplePath::from_fn(grid, |_| 0.0);
        assert!(matches!(realize(&StoppingRule::Min { rules: vec![] }, &p, 0, &grid), Err(LabError::InvalidRule(_))));
    }

    #[test]
    fn first_exit_brownian_mean_exit_time() {
        let grid = g(1e-4, 1.0);
        let rule = StoppingRule::FirstExit { radius: 0.1, cap: 1.0 };
        let n = 2000;
        let mut total = 0.0;
        for i in 0..n {
            let p = simulate_path(&ProcessSpec::brownian(), &grid, crate::paths::stream_seed(3, 1, i)).unwrap();
            total += grid.time(realize(&rule, &p, 0, &grid).unwrap().index);
        }
        let mean = total / n as f64;
        // exit-time variance of (-e, e) is 2 e^4 / 3; discrete monitoring adds O(sqrt(dt) e)
        assert!((mean - 0.01).abs() < 0.0015, "mean exit time {mean}");
    }

    #[test]
    fn partition_glue_selects_branch() {
        let grid = g(0.01, 1.0);
        let events = vec![Event::AnchorValueAtLeast { value: 0.0 }, Event::AnchorValueBelow { value: 0.0 }];
        let rules = vec![StoppingRule::OffsetFromS { h: 0.1 }, StoppingRule::OffsetFromS { h: 0.2 }];
        let glued = StoppingRule::PartitionGlue { events: events.clone(), rules: rules.clone() };
        for seed in 0..10 {
            let p = simulate_path(&ProcessSpec::brownian(), &grid, seed).unwrap();
            let s = 30;
            let each: Vec<RealizedStop> = rules.iter().map(|r| realize(r, &p, s, &grid).unwrap()).collect();
            let direct = realize(&glued, &p, s, &grid).unwrap();
            assert_eq!(glue_partition(&events, &each, &p, s, &grid).unwrap(), direct);
            let expect = if p.values[s] >= 0.0 { 40 } else { 50 };
            assert_eq!(direct.index, expect);
        }
        let trivial = StoppingRule::PartitionGlue { events: vec![Event::Always], rules: vec![StoppingRule::OffsetFromS { h: 0.1 }] };
        let p = SamplePath::from_fn(grid, |t| t);
        assert_eq!(realize(&trivial, &p, 5, &grid).unwrap(), realize(&StoppingRule::OffsetFromS { h: 0.1 }, &p, 5, &grid).unwrap());
    }

    #[test]
    fn partition_violations() {
        let grid = g(0.01, 1.0);
        let p = SamplePath::from_fn(grid, |t| t);
        let both = vec![Event::Always, Event::AnchorValueAtLeast { value: -1.0 }];
        let stops = vec![RealizedStop { index: 1, capped: false }; 2];
        assert_eq!(glue_partition(&both, &stops, &p, 3, &grid).unwrap_err(), LabError::PartitionViolation { holding: 2 });
        let none = vec![Event::AnchorValueBelow { value: -1.0 }, Event::AnchorTimeAtLeast { t: 0.9 }];
        assert_eq!(glue_partition(&none, &stops, &p, 3, &grid).unwrap_err(), LabError::PartitionViolation { holding: 0 });
    }

    #[test]
    fn time_change_constant_rates() {
        let grid = g(0.01, 1.0);
        let p = vec![0.0; grid.len()];
        let unit = realize_time_change(&Adaptation::constant(1.0), &p, &grid).unwrap();
        assert!((unit.r_time(0.37).unwrap() - 0.37).abs() < 1e-9);
        let fast = realize_time_change(&Adaptation::constant(4.0), &p, &grid).unwrap();
        assert!((fast.r_time(0.2).unwrap() - 0.05).abs() < 1e-9);
        assert!(fast.r_index(5.0).is_none());
        assert!(matches!(
            realize_time_change(&Adaptation::constant(-1.0), &p, &grid),
            Err(LabError::NonPositiveRate { index: 0, .. })
        ));
        assert!(matches!(
            realize_time_change(&Adaptation::constant(0.0), &p, &grid),
            Err(LabError::NonPositiveRate { .. })
        ));
    }

    #[test]
    fn time_change_indicator_flattens_after_level() {
        let grid = g(0.01, 1.0);
        // reaches 1 at t = 0.5
        let p: Vec<f64> = (0..grid.len()).map(|k| 2.0 * grid.time(k)).collect();
        let a = Adaptation::BelowRunningMax { level: 1.0 };
        assert!(realize_time_change(&a, &p, &grid).is_err());
        let tc = realize_time_change_with(&a, &p, &grid, RatePolicy::AllowZero).unwrap();
        // indicator is 1 for indices 0..=49 and 0 from 50 on
        assert!((tc.total() - 0.5).abs() < 1e-9);
        assert!(tc.cum[51..].iter().all(|&c| c == tc.cum[50]));
        assert_eq!(tc.r_index(0.3), Some(30));
        assert!(tc.r_index(0.6).is_none());
    }

    #[test]
    fn stops_csv_format() {
        let csv = stops_to_csv(&[RealizedStop { index: 3, capped: false }, RealizedStop { index: 9, capped: true }]);
        assert_eq!(csv, "path_index,stop_index,capped\n0,3,false\n1,9,true\n");
    }

    fn path_strategy() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-0.2f64..0.2, 20..120).prop_map(|steps| {
            let mut x = 0.0;
            let mut out = vec![0.0];
            for s in steps {
                x += s;
                out.push(x);
            }
            out
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(96))]

        #[test]
        fn first_exit_monotone_in_radius(path in path_strategy(), e1 in 0.01f64..1.0, de in 0.0f64..1.0, s_frac in 0.0f64..1.0) {
            let grid = TimeGrid::new(0.01, path.len() - 1).unwrap();
            let s = ((path.len() - 1) as f64 * s_frac) as usize;
            let a = realize(&StoppingRule::FirstExit { radius: e1, cap: 10.0 }, &path, s, &grid).unwrap();
            let b = realize(&StoppingRule::FirstExit { radius: e1 + de, cap: 10.0 }, &path, s, &grid).unwrap();
            prop_assert!(a.index <= b.index);
            prop_assert!(a.index >= s);
        }

        #[test]
        fn min_is_pointwise_min(path in path_strategy(), e in 0.01f64..1.0, h in 0.01f64..1.0, c in -1.0f64..1.0, s_frac in 0.0f64..1.0) {
            let grid = TimeGrid::new(0.01, path.len() - 1).unwrap();
            let s = ((path.len() - 1) as f64 * s_frac) as usize;
            let rules = vec![
                StoppingRule::FirstExit { radius: e, cap: 10.0 },
                StoppingRule::OffsetFromS { h },
                StoppingRule::Debut { level: c },
            ];
            let each: Vec<usize> = rules.iter().map(|r| realize(r, &path, s, &grid).unwrap().index).collect();
            let m = realize(&StoppingRule::Min { rules }, &path, s, &grid).unwrap();
            prop_assert_eq!(m.index, *each.iter().min().unwrap());
            for i in each {
                prop_assert!(i >= s && i <= grid.n_steps);
            }
        }

        #[test]
        fn chunked_scan_matches_full_scan(path in path_strategy(), e in 0.01f64..0.5, chunk in 1usize..17) {
            let grid = TimeGrid::new(0.01, path.len() - 1).unwrap();
            let rule = StoppingRule::Min { rules: vec![StoppingRule::FirstExit { radius: e, cap: 0.5 }, StoppingRule::Debut { level: 0.3 }] };
            let full = realize(&rule, &path, 0, &grid).unwrap();
            let mut found = scan(&rule, &path, &grid, 0, 0, 0).unwrap();
            let mut reached = 0;
            while found.is_none() && reached < grid.n_steps {
                let to = (reached + chunk).min(grid.n_steps);
                found = scan(&rule, &path, &grid, 0, reached + 1, to).unwrap();
                reached = to;
            }
            prop_assert_eq!(found, Some((full.index, full.capped)));
        }

        #[test]
        fn time_change_is_generalized_inverse(rates in proptest::collection::vec(0.1f64..3.0, 10..80), s in 0.0f64..2.0) {
            let grid = TimeGrid::new(0.05, rates.len() - 1).unwrap();
            let rates2 = rates.clone();
            let a = Adaptation::Custom(crate::processes::CustomAdaptation::new(move |ctx| rates2[ctx.k]));
            let tc = realize_time_change(&a, &rates, &grid).unwrap();
            prop_assert!(tc.cum.windows(2).all(|w| w[0] <= w[1]));
            if let Some(k) = tc.r_index(s) {
                prop_assert!(tc.cum[k] >= s);
                prop_assert!(tc.cum[..k].iter().all(|&c| c < s));
            } else {
                prop_assert!(tc.total() < s);
            }
        }
    }
}
