//! Process specifications, Euler–Maruyama simulation and branched
//! continuations.
//!
//! Every process is simulated through a small tree of stepping nodes. A node
//! can be primed with an already observed prefix and then extended with fresh
//! randomness, which is how bundles of continuations share one history. Each
//! random leaf owns its own RNG stream, so the values of a continuation do not
//! depend on how far ahead it is generated.

use std::fmt;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::paths::{rng_from_seed, stream_seed, streams, Ensemble, PathAccess, TimeGrid, VectorPath};
use crate::stopping::{self, StoppingRule};

/// The view an adaptation gets of a path at grid index `k`: values up to and
/// including `k`, and nothing later.
pub struct PrefixCtx<'a> {
    values: PrefixValues<'a>,
    pub k: usize,
    pub t: f64,
    pub running_max: f64,
    pub running_min: f64,
}

#[derive(Clone, Copy)]
enum PrefixValues<'a> {
    Slice(&'a [f64]),
    Dyn(&'a dyn PathAccess),
}

impl PrefixValues<'_> {
    #[inline]
    fn at(&self, k: usize) -> f64 {
        match self {
            PrefixValues::Slice(s) => s[k],
            PrefixValues::Dyn(p) => p.at(k),
        }
    }
}

impl<'a> PrefixCtx<'a> {
    /// Builds a context by scanning `values[0..=k]`.
    pub fn scan<P: PathAccess>(values: &'a P, k: usize, grid: &TimeGrid) -> PrefixCtx<'a> {
        let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
        for j in 0..=k {
            let v = values.at(j);
            hi = hi.max(v);
            lo = lo.min(v);
        }
        PrefixCtx { values: PrefixValues::Dyn(values), k, t: grid.time(k), running_max: hi, running_min: lo }
    }

    pub(crate) fn from_slice(values: &'a [f64], k: usize, t: f64, running_max: f64, running_min: f64) -> PrefixCtx<'a> {
        PrefixCtx { values: PrefixValues::Slice(values), k, t, running_max, running_min }
    }

    pub fn value(&self) -> f64 {
        self.values.at(self.k)
    }

    /// Value at an earlier index. Panics when asked to look ahead.
    pub fn value_at(&self, j: usize) -> f64 {
        assert!(j <= self.k, "adaptation looked ahead: index {j} > {}", self.k);
        self.values.at(j)
    }
}

#[derive(Clone)]
pub struct CustomAdaptation(pub Arc<dyn Fn(&PrefixCtx<'_>) -> f64 + Send + Sync>);

impl CustomAdaptation {
    pub fn new(f: impl Fn(&PrefixCtx<'_>) -> f64 + Send + Sync + 'static) -> Self {
        Self(Arc::new(f))
    }
}

impl fmt::Debug for CustomAdaptation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("CustomAdaptation(..)")
    }
}

/// A non-anticipating path functional `a(f, t)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Adaptation {
    Constant { value: f64 },
    /// `slope * f(t) + intercept`
    Linear { slope: f64, intercept: f64 },
    /// `base + slope * |f(t)|`
    AbsAffine { base: f64, slope: f64 },
    Clamp { inner: Box<Adaptation>, lo: f64, hi: f64 },
    Sqrt { inner: Box<Adaptation> },
    /// 1 while the running maximum of the path stays below `level`, else 0.
    BelowRunningMax { level: f64 },
    #[serde(skip)]
    Custom(CustomAdaptation),
}

impl Adaptation {
    pub fn constant(value: f64) -> Self {
        Adaptation::Constant { value }
    }

    pub fn eval(&self, ctx: &PrefixCtx<'_>) -> f64 {
        match self {
            Adaptation::Constant { value } => *value,
            Adaptation::Linear { slope, intercept } => slope * ctx.value() + intercept,
            Adaptation::AbsAffine { base, slope } => base + slope * ctx.value().abs(),
            Adaptation::Clamp { inner, lo, hi } => inner.eval(ctx).clamp(*lo, *hi),
            Adaptation::Sqrt { inner } => inner.eval(ctx).sqrt(),
            Adaptation::BelowRunningMax { level } => {
                if ctx.running_max < *level {
                    1.0
                } else {
                    0.0
                }
            }
            Adaptation::Custom(f) => (f.0)(ctx),
        }
    }

    /// Evaluates the adaptation at every grid index of `values`, maintaining
    /// the running extremes incrementally.
    pub fn eval_along(&self, values: &[f64], grid: &TimeGrid) -> Vec<f64> {
        let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut out = Vec::with_capacity(values.len());
        for k in 0..values.len() {
            hi = hi.max(values[k]);
            lo = lo.min(values[k]);
            let ctx = PrefixCtx { values: PrefixValues::Slice(&values[..=k]), k, t: grid.time(k), running_max: hi, running_min: lo };
            out.push(self.eval(&ctx));
        }
        out
    }

    fn validate(&self) -> Result<()> {
        match self {
            Adaptation::Clamp { inner, lo, hi } => {
                if !(lo <= hi) {
                    return Err(LabError::InvalidParameter(format!("clamp bounds {lo} > {hi}")));
                }
                inner.validate()
            }
            Adaptation::Sqrt { inner } => inner.validate(),
            _ => Ok(()),
        }
    }

    fn is_constant(&self) -> Option<f64> {
        match self {
            Adaptation::Constant { value } => Some(*value),
            _ => None,
        }
    }
}

/// Deterministic time functions for [`ProcessSpec::Deterministic`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TimeFn {
    /// `slope * t + intercept`
    Linear { slope: f64, intercept: f64 },
    /// `coef * t^exponent`
    Power { coef: f64, exponent: f64 },
}

impl TimeFn {
    pub fn identity() -> Self {
        TimeFn::Linear { slope: 1.0, intercept: 0.0 }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self {
            TimeFn::Linear { slope, intercept } => slope * t + intercept,
            TimeFn::Power { coef, exponent } => coef * t.powf(*exponent),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProcessSpec {
    BrownianMotion {
        x0: f64,
    },
    /// `dX = b dt + sigma dW` with non-anticipating integrands.
    Ito {
        x0: f64,
        drift: Adaptation,
        diffusion: Adaptation,
    },
    Deterministic {
        f: TimeFn,
    },
    /// Deterministic cadlag zero-drift process that is not a local martingale.
    Staircase,
    /// Inner process frozen from the realized stop index onwards; the rule is
    /// realized on coordinate 0 with anchor 0.
    Stopped {
        inner: Box<ProcessSpec>,
        rule: StoppingRule,
    },
    Negated {
        inner: Box<ProcessSpec>,
    },
    /// `scale * X + shift`, applied to every coordinate.
    Affine {
        inner: Box<ProcessSpec>,
        scale: f64,
        shift: f64,
    },
    /// Brownian motion in `d` dimensions started at 0 with increment
    /// correlation `corr`.
    CorrelatedBm {
        corr: Vec<Vec<f64>>,
    },
    /// Independent components stacked into one vector process.
    Joint {
        components: Vec<ProcessSpec>,
    },
    /// Deterministic linear time change `Y_s = X_{rate * s}`.
    TimeChanged {
        inner: Box<ProcessSpec>,
        rate: f64,
    },
    /// Appends the coordinate `int_0^t a(X^coord, u) du` (left Riemann sum).
    WithIntegral {
        inner: Box<ProcessSpec>,
        coord: usize,
        integrand: Adaptation,
    },
}

impl ProcessSpec {
    pub fn brownian() -> Self {
        ProcessSpec::BrownianMotion { x0: 0.0 }
    }

    pub fn ito(x0: f64, drift: Adaptation, diffusion: Adaptation) -> Self {
        ProcessSpec::Ito { x0, drift, diffusion }
    }

    pub fn ito_constant(x0: f64, b: f64, sigma: f64) -> Self {
        Self::ito(x0, Adaptation::constant(b), Adaptation::constant(sigma))
    }

    pub fn dim(&self) -> usize {
        match self {
            ProcessSpec::BrownianMotion { .. }
            | ProcessSpec::Ito { .. }
            | ProcessSpec::Deterministic { .. }
            | ProcessSpec::Staircase => 1,
            ProcessSpec::CorrelatedBm { corr } => corr.len(),
            ProcessSpec::Joint { components } => components.iter().map(|c| c.dim()).sum(),
            ProcessSpec::Stopped { inner, .. }
            | ProcessSpec::Negated { inner }
            | ProcessSpec::Affine { inner, .. }
            | ProcessSpec::TimeChanged { inner, .. } => inner.dim(),
            ProcessSpec::WithIntegral { inner, .. } => inner.dim() + 1,
        }
    }

    /// Values at grid index 0.
    pub fn initial_values(&self) -> Vec<f64> {
        match self {
            ProcessSpec::BrownianMotion { x0 } | ProcessSpec::Ito { x0, .. } => vec![*x0],
            ProcessSpec::Deterministic { f } => vec![f.eval(0.0)],
            ProcessSpec::Staircase => vec![0.0],
            ProcessSpec::CorrelatedBm { corr } => vec![0.0; corr.len()],
            ProcessSpec::Joint { components } => components.iter().flat_map(|c| c.initial_values()).collect(),
            ProcessSpec::Stopped { inner, .. } | ProcessSpec::TimeChanged { inner, .. } => inner.initial_values(),
            ProcessSpec::Negated { inner } => inner.initial_values().into_iter().map(|x| -x).collect(),
            ProcessSpec::Affine { inner, scale, shift } => {
                inner.initial_values().into_iter().map(|x| scale * x + shift).collect()
            }
            ProcessSpec::WithIntegral { inner, .. } => {
                let mut v = inner.initial_values();
                v.push(0.0);
                v
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ProcessSpec::BrownianMotion { x0 } => finite("x0", *x0),
            ProcessSpec::Ito { x0, drift, diffusion } => {
                finite("x0", *x0)?;
                drift.validate()?;
                diffusion.validate()
            }
            ProcessSpec::Deterministic { .. } | ProcessSpec::Staircase => Ok(()),
            ProcessSpec::Stopped { inner, rule } => {
                inner.validate()?;
                rule.validate()
            }
            ProcessSpec::Negated { inner } => inner.validate(),
            ProcessSpec::Affine { inner, scale, shift } => {
                if !(scale.is_finite() && *scale != 0.0) {
                    return Err(LabError::InvalidParameter(format!("affine scale must be finite and nonzero, got {scale}")));
                }
                finite("shift", *shift)?;
                inner.validate()
            }
            ProcessSpec::CorrelatedBm { corr } => cholesky(corr).map(|_| ()),
            ProcessSpec::Joint { components } => {
                if components.is_empty() {
                    return Err(LabError::InvalidParameter("joint process needs a component".into()));
                }
                components.iter().try_for_each(|c| c.validate())
            }
            ProcessSpec::TimeChanged { inner, rate } => {
                if !(*rate > 0.0 && rate.is_finite()) {
                    return Err(LabError::InvalidParameter(format!("time-change rate must be positive, got {rate}")));
                }
                inner.validate()
            }
            ProcessSpec::WithIntegral { inner, coord, integrand } => {
                if *coord >= inner.dim() {
                    return Err(LabError::InvalidParameter(format!(
                        "integral coordinate {coord} out of range for dimension {}",
                        inner.dim()
                    )));
                }
                integrand.validate()?;
                inner.validate()
            }
        }
    }
}

fn finite(what: &str, x: f64) -> Result<()> {
    if x.is_finite() {
        Ok(())
    } else {
        Err(LabError::InvalidParameter(format!("{what} must be finite, got {x}")))
    }
}

/// Value of the staircase path: 0 at t = 0, otherwise `n^-2` for the integer
/// `n > 0` with `1/n <= t < 1/(n-1)` (reading `1/0` as infinity).
pub fn staircase_value(t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    if t >= 1.0 {
        return 1.0;
    }
    let mut n = (1.0 / t).ceil();
    if 1.0 / n > t {
        n += 1.0;
    }
    if n > 1.0 && t >= 1.0 / (n - 1.0) {
        n -= 1.0;
    }
    1.0 / (n * n)
}

/// Lower-triangular factor `L` with `L L^T = corr`. Accepts singular PSD input.
pub fn cholesky(corr: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let d = corr.len();
    if d == 0 {
        return Err(LabError::InvalidParameter("correlation matrix is empty".into()));
    }
    for (i, row) in corr.iter().enumerate() {
        if row.len() != d {
            return Err(LabError::InvalidParameter("correlation matrix is not square".into()));
        }
        if (row[i] - 1.0).abs() > 1e-12 {
            return Err(LabError::InvalidParameter(format!("correlation diagonal entry {i} is {}", row[i])));
        }
        for j in 0..d {
            if (row[j] - corr[j][i]).abs() > 1e-12 {
                return Err(LabError::InvalidParameter("correlation matrix is not symmetric".into()));
            }
        }
    }
    let mut l = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut diag = corr[j][j];
        for k in 0..j {
            diag -= l[j][k] * l[j][k];
        }
        if diag < -1e-10 {
            return Err(LabError::InvalidParameter("correlation matrix is not positive semi-definite".into()));
        }
        let pivot = diag.max(0.0).sqrt();
        l[j][j] = pivot;
        for i in (j + 1)..d {
            let mut s = corr[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            l[i][j] = if pivot > 1e-14 { s / pivot } else { 0.0 };
        }
    }
    Ok(l)
}

// ---------------------------------------------------------------------------
// stepping nodes

struct ItoNode {
    grid: TimeGrid,
    drift: Adaptation,
    diffusion: Adaptation,
    constant: Option<(f64, f64)>,
    path: Vec<f64>,
    base: usize,
    base_max: f64,
    base_min: f64,
    hi: f64,
    lo: f64,
    leaf: u64,
    rng: ChaCha8Rng,
}

impl ItoNode {
    fn advance(&mut self, to: usize) -> Result<()> {
        let dt = self.grid.dt;
        let sqrt_dt = dt.sqrt();
        while self.path.len() <= to {
            let k = self.path.len() - 1;
            let x = self.path[k];
            let (b, s) = match self.constant {
                Some(bs) => bs,
                None => {
                    let ctx = PrefixCtx {
                        values: PrefixValues::Slice(&self.path),
                        k,
                        t: self.grid.time(k),
                        running_max: self.hi,
                        running_min: self.lo,
                    };
                    (self.drift.eval(&ctx), self.diffusion.eval(&ctx))
                }
            };
            let xi: f64 = StandardNormal.sample(&mut self.rng);
            let next = x + b * dt + s * sqrt_dt * xi;
            if !next.is_finite() {
                return Err(LabError::NumericalBlowup { index: k + 1 });
            }
            self.path.push(next);
            self.hi = self.hi.max(next);
            self.lo = self.lo.min(next);
        }
        Ok(())
    }
}

struct CorrelatedNode {
    grid: TimeGrid,
    chol: Vec<Vec<f64>>,
    paths: Vec<Vec<f64>>,
    base: usize,
    leaf: u64,
    rng: ChaCha8Rng,
    xi: Vec<f64>,
}

impl CorrelatedNode {
    fn advance(&mut self, to: usize) -> Result<()> {
        let sqrt_dt = self.grid.dt.sqrt();
        let d = self.paths.len();
        while self.paths[0].len() <= to {
            let k = self.paths[0].len() - 1;
            for z in self.xi.iter_mut() {
                *z = StandardNormal.sample(&mut self.rng);
            }
            for i in 0..d {
                let mut inc = 0.0;
                for j in 0..=i {
                    inc += self.chol[i][j] * self.xi[j];
                }
                let next = self.paths[i][k] + sqrt_dt * inc;
                if !next.is_finite() {
                    return Err(LabError::NumericalBlowup { index: k + 1 });
                }
                self.paths[i].push(next);
            }
        }
        Ok(())
    }
}

struct StoppedNode {
    inner: Node,
    rule: StoppingRule,
    grid: TimeGrid,
    base_stop: Option<usize>,
    base_scanned: usize,
    stop: Option<usize>,
    scanned: usize,
}

struct IntegralNode {
    inner: Node,
    coord: usize,
    integrand: Adaptation,
    inner_dim: usize,
    grid: TimeGrid,
    source: Vec<f64>,
    integral: Vec<f64>,
    base: usize,
    base_max: f64,
    base_min: f64,
    hi: f64,
    lo: f64,
}

enum Node {
    Ito(Box<ItoNode>),
    Correlated(Box<CorrelatedNode>),
    Deterministic { f: TimeFn, grid: TimeGrid },
    Staircase { grid: TimeGrid },
    Joint { children: Vec<Node>, offsets: Vec<usize> },
    Affine { inner: Box<Node>, scale: f64, shift: f64 },
    Stopped(Box<StoppedNode>),
    TimeChanged(Box<Node>),
    Integral(Box<IntegralNode>),
}

/// Coordinate view over a node, used to realize stopping rules on it.
struct NodeCoord<'a> {
    node: &'a Node,
    coord: usize,
}

impl PathAccess for NodeCoord<'_> {
    fn len(&self) -> usize {
        self.node.len()
    }
    fn at(&self, k: usize) -> f64 {
        self.node.value(self.coord, k)
    }
}

impl Node {
    /// Builds a node primed with `prefix` (one slice per coordinate, each of
    /// length `s_idx + 1`).
    fn prepare(spec: &ProcessSpec, grid: TimeGrid, prefix: &[Vec<f64>], leaf: &mut u64) -> Result<Node> {
        let s_idx = prefix[0].len() - 1;
        let mut next_leaf = || {
            let id = *leaf;
            *leaf += 1;
            id
        };
        Ok(match spec {
            ProcessSpec::BrownianMotion { .. } => {
                let ito = ProcessSpec::ito_constant(0.0, 0.0, 1.0);
                return Node::prepare(&ito, grid, prefix, leaf);
            }
            ProcessSpec::Ito { drift, diffusion, .. } => {
                let path = prefix[0].clone();
                let (hi, lo) = extremes(&path);
                let constant = drift.is_constant().zip(diffusion.is_constant());
                Node::Ito(Box::new(ItoNode {
                    grid,
                    drift: drift.clone(),
                    diffusion: diffusion.clone(),
                    constant,
                    path,
                    base: s_idx,
                    base_max: hi,
                    base_min: lo,
                    hi,
                    lo,
                    leaf: next_leaf(),
                    rng: rng_from_seed(0),
                }))
            }
            ProcessSpec::Deterministic { f } => Node::Deterministic { f: f.clone(), grid },
            ProcessSpec::Staircase => Node::Staircase { grid },
            ProcessSpec::CorrelatedBm { corr } => {
                let chol = cholesky(corr)?;
                Node::Correlated(Box::new(CorrelatedNode {
                    grid,
                    xi: vec![0.0; chol.len()],
                    chol,
                    paths: prefix.to_vec(),
                    base: s_idx,
                    leaf: next_leaf(),
                    rng: rng_from_seed(0),
                }))
            }
            ProcessSpec::Joint { components } => {
                let mut children = Vec::with_capacity(components.len());
                let mut offsets = Vec::with_capacity(components.len());
                let mut off = 0;
                for c in components {
                    let d = c.dim();
                    offsets.push(off);
                    children.push(Node::prepare(c, grid, &prefix[off..off + d], leaf)?);
                    off += d;
                }
                Node::Joint { children, offsets }
            }
            ProcessSpec::Negated { inner } => {
                let inv: Vec<Vec<f64>> = prefix.iter().map(|c| c.iter().map(|x| -x).collect()).collect();
                Node::Affine { inner: Box::new(Node::prepare(inner, grid, &inv, leaf)?), scale: -1.0, shift: 0.0 }
            }
            ProcessSpec::Affine { inner, scale, shift } => {
                let inv: Vec<Vec<f64>> =
                    prefix.iter().map(|c| c.iter().map(|x| (x - shift) / scale).collect()).collect();
                Node::Affine { inner: Box::new(Node::prepare(inner, grid, &inv, leaf)?), scale: *scale, shift: *shift }
            }
            ProcessSpec::Stopped { inner, rule } => {
                let inner = Node::prepare(inner, grid, prefix, leaf)?;
                let stop = stopping::scan(rule, &NodeCoord { node: &inner, coord: 0 }, &grid, 0, 0, s_idx)?
                    .map(|(k, _)| k);
                Node::Stopped(Box::new(StoppedNode {
                    inner,
                    rule: rule.clone(),
                    grid,
                    base_stop: stop,
                    base_scanned: s_idx,
                    stop,
                    scanned: s_idx,
                }))
            }
            ProcessSpec::TimeChanged { inner, rate } => {
                Node::TimeChanged(Box::new(Node::prepare(inner, grid.scaled(*rate), prefix, leaf)?))
            }
            ProcessSpec::WithIntegral { inner, coord, integrand } => {
                let d = inner.dim();
                let node = Node::prepare(inner, grid, &prefix[..d], leaf)?;
                let (hi, lo) = extremes(&prefix[*coord]);
                Node::Integral(Box::new(IntegralNode {
                    inner: node,
                    coord: *coord,
                    integrand: integrand.clone(),
                    inner_dim: d,
                    grid,
                    source: prefix[*coord].clone(),
                    integral: prefix[d].clone(),
                    base: s_idx,
                    base_max: hi,
                    base_min: lo,
                    hi,
                    lo,
                }))
            }
        })
    }

    /// Rewinds to the primed prefix and reseeds every random leaf from `seed`.
    fn reset(&mut self, seed: u64) {
        match self {
            Node::Ito(n) => {
                n.path.truncate(n.base + 1);
                n.hi = n.base_max;
                n.lo = n.base_min;
                n.rng = rng_from_seed(stream_seed(seed, streams::LEAF, n.leaf));
            }
            Node::Correlated(n) => {
                for p in n.paths.iter_mut() {
                    p.truncate(n.base + 1);
                }
                n.rng = rng_from_seed(stream_seed(seed, streams::LEAF, n.leaf));
            }
            Node::Deterministic { .. } | Node::Staircase { .. } => {}
            Node::Joint { children, .. } => children.iter_mut().for_each(|c| c.reset(seed)),
            Node::Affine { inner, .. } | Node::TimeChanged(inner) => inner.reset(seed),
            Node::Stopped(n) => {
                n.inner.reset(seed);
                n.stop = n.base_stop;
                n.scanned = n.base_scanned;
            }
            Node::Integral(n) => {
                n.inner.reset(seed);
                n.source.truncate(n.base + 1);
                n.integral.truncate(n.base + 1);
                n.hi = n.base_max;
                n.lo = n.base_min;
            }
        }
    }

    fn advance(&mut self, to: usize) -> Result<()> {
        match self {
            Node::Ito(n) => n.advance(to),
            Node::Correlated(n) => n.advance(to),
            Node::Deterministic { .. } | Node::Staircase { .. } => Ok(()),
            Node::Joint { children, .. } => children.iter_mut().try_for_each(|c| c.advance(to)),
            Node::Affine { inner, .. } | Node::TimeChanged(inner) => inner.advance(to),
            Node::Stopped(n) => {
                n.inner.advance(to)?;
                if n.stop.is_none() && to > n.scanned {
                    let view = NodeCoord { node: &n.inner, coord: 0 };
                    n.stop = stopping::scan(&n.rule, &view, &n.grid, 0, n.scanned + 1, to)?.map(|(k, _)| k);
                    n.scanned = to;
                }
                Ok(())
            }
            Node::Integral(n) => {
                n.inner.advance(to)?;
                let dt = n.grid.dt;
                while n.source.len() <= to {
                    let k = n.source.len();
                    n.source.push(n.inner.value(n.coord, k));
                }
                while n.integral.len() <= to {
                    let k = n.integral.len() - 1;
                    let x = n.source[k];
                    n.hi = n.hi.max(x);
                    n.lo = n.lo.min(x);
                    let ctx = PrefixCtx {
                        values: PrefixValues::Slice(&n.source[..=k]),
                        k,
                        t: n.grid.time(k),
                        running_max: n.hi,
                        running_min: n.lo,
                    };
                    let a = n.integrand.eval(&ctx);
                    let next = n.integral[k] + a * dt;
                    if !next.is_finite() {
                        return Err(LabError::NumericalBlowup { index: k + 1 });
                    }
                    n.integral.push(next);
                }
                Ok(())
            }
        }
    }

    fn len(&self) -> usize {
        match self {
            Node::Ito(n) => n.path.len(),
            Node::Correlated(n) => n.paths[0].len(),
            Node::Deterministic { grid, .. } | Node::Staircase { grid } => grid.len(),
            Node::Joint { children, .. } => children.iter().map(|c| c.len()).min().unwrap_or(0),
            Node::Affine { inner, .. } | Node::TimeChanged(inner) => inner.len(),
            Node::Stopped(n) => n.inner.len(),
            Node::Integral(n) => n.integral.len().min(n.inner.len()),
        }
    }

    fn value(&self, coord: usize, k: usize) -> f64 {
        match self {
            Node::Ito(n) => n.path[k],
            Node::Correlated(n) => n.paths[coord][k],
            Node::Deterministic { f, grid } => f.eval(grid.time(k)),
            Node::Staircase { grid } => staircase_value(grid.time(k)),
            Node::Joint { children, offsets } => {
                let i = offsets.partition_point(|&o| o <= coord) - 1;
                children[i].value(coord - offsets[i], k)
            }
            Node::Affine { inner, scale, shift } => scale * inner.value(coord, k) + shift,
            Node::TimeChanged(inner) => inner.value(coord, k),
            Node::Stopped(n) => n.inner.value(coord, n.stop.map_or(k, |s| k.min(s))),
            Node::Integral(n) => {
                if coord < n.inner_dim {
                    n.inner.value(coord, k)
                } else {
                    n.integral[k]
                }
            }
        }
    }
}

fn extremes(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::NEG_INFINITY, f64::INFINITY), |(hi, lo), &v| (hi.max(v), lo.min(v)))
}

// ---------------------------------------------------------------------------
// simulation

/// Simulates one path of `spec` on `grid`. Deterministic specs ignore `seed`.
pub fn simulate(spec: &ProcessSpec, grid: &TimeGrid, seed: u64) -> Result<VectorPath> {
    spec.validate()?;
    let init: Vec<Vec<f64>> = spec.initial_values().into_iter().map(|x| vec![x]).collect();
    let mut leaf = 0;
    let mut node = Node::prepare(spec, *grid, &init, &mut leaf)?;
    node.reset(seed);
    node.advance(grid.n_steps)?;
    let coords = (0..spec.dim()).map(|c| (0..grid.len()).map(|k| node.value(c, k)).collect()).collect();
    VectorPath::new(*grid, coords)
}

/// Simulates from time 0 only until `rule` (anchored at 0, realized on
/// `coord`) fires. The returned path ends at the stop index and agrees with
/// [`simulate`] under the same seed up to that index.
pub fn simulate_until(
    spec: &ProcessSpec,
    grid: &TimeGrid,
    seed: u64,
    rule: &StoppingRule,
    coord: usize,
) -> Result<(VectorPath, crate::stopping::RealizedStop)> {
    spec.validate()?;
    rule.validate()?;
    if coord >= spec.dim() {
        return Err(LabError::InvalidParameter(format!("stop coordinate {coord} out of range")));
    }
    let init: Vec<Vec<f64>> = spec.initial_values().into_iter().map(|x| vec![x]).collect();
    let mut leaf = 0;
    let mut node = Node::prepare(spec, *grid, &init, &mut leaf)?;
    node.reset(seed);
    let mut fired = stopping::scan(rule, &NodeCoord { node: &node, coord }, grid, 0, 0, 0)?;
    let mut reached = 0;
    while fired.is_none() && reached < grid.n_steps {
        let to = (reached + CHUNK).min(grid.n_steps);
        node.advance(to)?;
        fired = stopping::scan(rule, &NodeCoord { node: &node, coord }, grid, 0, reached + 1, to)?;
        reached = to;
    }
    let (index, capped) = fired.unwrap_or((reached, true));
    let coords = (0..spec.dim()).map(|c| (0..=index).map(|k| node.value(c, k)).collect()).collect();
    let path = VectorPath { grid: TimeGrid { dt: grid.dt, n_steps: index }, coords };
    Ok((path, crate::stopping::RealizedStop { index, capped }))
}

/// Scalar convenience wrapper around [`simulate`].
pub fn simulate_path(spec: &ProcessSpec, grid: &TimeGrid, seed: u64) -> Result<crate::paths::SamplePath> {
    if spec.dim() != 1 {
        return Err(LabError::ScenarioInvalid(format!("expected a scalar process, got dimension {}", spec.dim())));
    }
    let mut p = simulate(spec, grid, seed)?;
    Ok(crate::paths::SamplePath { grid: p.grid, values: p.coords.swap_remove(0) })
}

/// Simulates `n` paths in parallel; path `i` uses `stream_seed(master, stream, i)`.
pub fn simulate_ensemble(spec: &ProcessSpec, grid: &TimeGrid, master_seed: u64, stream_id: u64, n: usize) -> Result<Ensemble> {
    let paths = (0..n)
        .into_par_iter()
        .map(|i| simulate(spec, grid, stream_seed(master_seed, stream_id, i as u64)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble { master_seed, stream_id, paths })
}

// ---------------------------------------------------------------------------
// bundles

/// One shared prefix up to the anchor index plus `M` continuations.
///
/// Continuations are stored as tails (indices `s_idx + 1 ..`), so every
/// continuation reproduces the prefix bit-identically. Tails may have
/// different lengths when generation stopped early.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub grid: TimeGrid,
    pub s_idx: usize,
    pub prefix: Vec<Vec<f64>>,
    pub tails: Vec<Vec<Vec<f64>>>,
}

impl Bundle {
    pub fn m(&self) -> usize {
        self.tails.len()
    }

    pub fn dim(&self) -> usize {
        self.prefix.len()
    }

    /// Value of coordinate `coord` at the anchor.
    pub fn anchor_value(&self, coord: usize) -> f64 {
        self.prefix[coord][self.s_idx]
    }

    pub fn anchor_row(&self) -> Vec<f64> {
        self.prefix.iter().map(|c| c[self.s_idx]).collect()
    }

    pub fn continuation(&self, m: usize) -> Continuation<'_> {
        Continuation { bundle: self, m }
    }
}

#[derive(Clone, Copy)]
pub struct Continuation<'a> {
    bundle: &'a Bundle,
    m: usize,
}

impl<'a> Continuation<'a> {
    pub fn coord(&self, c: usize) -> ContinuationCoord<'a> {
        ContinuationCoord {
            prefix: &self.bundle.prefix[c],
            tail: &self.bundle.tails[self.m][c],
        }
    }

    pub fn len(&self) -> usize {
        self.bundle.s_idx + 1 + self.bundle.tails[self.m][0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn row_into(&self, k: usize, out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.coord(c).at(k);
        }
    }
}

#[derive(Clone, Copy)]
pub struct ContinuationCoord<'a> {
    prefix: &'a [f64],
    tail: &'a [f64],
}

impl PathAccess for ContinuationCoord<'_> {
    fn len(&self) -> usize {
        self.prefix.len() + self.tail.len()
    }
    #[inline]
    fn at(&self, k: usize) -> f64 {
        if k < self.prefix.len() {
            self.prefix[k]
        } else {
            self.tail[k - self.prefix.len()]
        }
    }
}

/// How far continuations are generated.
#[derive(Debug, Clone, Copy)]
pub enum BranchEnd<'r> {
    /// Up to a fixed grid index.
    Index(usize),
    /// Until the rule (realized from the anchor on `coord`) fires, or the
    /// horizon is reached.
    UntilStopped { rule: &'r StoppingRule, coord: usize },
}

const CHUNK: usize = 64;

/// `M` continuations of `spec` from `prefix` at `s_idx`, each simulated to the
/// horizon with a fresh substream.
pub fn branch_continuations(spec: &ProcessSpec, prefix: &VectorPath, s_idx: usize, m: usize, seed: u64) -> Result<Bundle> {
    branch(spec, prefix, s_idx, m, seed, BranchEnd::Index(prefix.grid.n_steps))
}

/// Like [`branch_continuations`] with explicit control over the generated
/// length.
pub fn branch(spec: &ProcessSpec, prefix: &VectorPath, s_idx: usize, m: usize, seed: u64, end: BranchEnd<'_>) -> Result<Bundle> {
    if m < 2 {
        return Err(LabError::InsufficientBundle { m });
    }
    let grid = prefix.grid;
    if s_idx > grid.n_steps || s_idx >= prefix.coords[0].len() {
        return Err(LabError::OutOfRange { what: "s_idx", value: s_idx as f64 });
    }
    if prefix.dim() != spec.dim() {
        return Err(LabError::ScenarioInvalid(format!(
            "prefix dimension {} does not match process dimension {}",
            prefix.dim(),
            spec.dim()
        )));
    }
    spec.validate()?;
    let head: Vec<Vec<f64>> = prefix.coords.iter().map(|c| c[..=s_idx].to_vec()).collect();
    let mut leaf = 0;
    let mut node = Node::prepare(spec, grid, &head, &mut leaf)?;
    let dim = spec.dim();
    let mut tails = Vec::with_capacity(m);
    for j in 0..m {
        node.reset(stream_seed(seed, streams::CONTINUATION, j as u64));
        let last = match end {
            BranchEnd::Index(to) => {
                let to = to.min(grid.n_steps).max(s_idx);
                node.advance(to)?;
                to
            }
            BranchEnd::UntilStopped { rule, coord } => {
                let mut reached = s_idx;
                let mut fired = stopping::scan(rule, &NodeCoord { node: &node, coord }, &grid, s_idx, s_idx, s_idx)?;
                while fired.is_none() && reached < grid.n_steps {
                    let to = (reached + CHUNK).min(grid.n_steps);
                    node.advance(to)?;
                    fired = stopping::scan(rule, &NodeCoord { node: &node, coord }, &grid, s_idx, reached + 1, to)?;
                    reached = to;
                }
                match fired {
                    Some((k, _)) => k,
                    None => reached,
                }
            }
        };
        let tail: Vec<Vec<f64>> =
            (0..dim).map(|c| ((s_idx + 1)..=last).map(|k| node.value(c, k)).collect()).collect();
        tails.push(tail);
    }
    Ok(Bundle { grid, s_idx, prefix: head, tails })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::mean_ci;

    fn grid(dt: f64, horizon: f64) -> TimeGrid {
        TimeGrid::with_horizon(dt, horizon).unwrap()
    }

    #[test]
    fn staircase_examples() {
        assert_eq!(staircase_value(0.0), 0.0);
        assert_eq!(staircase_value(0.6), 0.25);
        assert_eq!(staircase_value(0.3), 0.0625);
        assert_eq!(staircase_value(0.5), 0.25);
        assert_eq!(staircase_value(1.0 / 3.0), 1.0 / 9.0);
        assert_eq!(staircase_value(1.5), 1.0);
        assert_eq!(staircase_value(0.9), 0.25);
    }

    #[test]
    fn deterministic_identity_path() {
        let g = grid(0.01, 1.0);
        let p = simulate_path(&ProcessSpec::Deterministic { f: TimeFn::identity() }, &g, 3).unwrap();
        for (k, v) in p.values.iter().enumerate() {
            assert_eq!(*v, k as f64 * g.dt);
        }
    }

    #[test]
    fn degenerate_ode() {
        let g = grid(0.001, 1.0);
        let p = simulate_path(&ProcessSpec::ito_constant(0.25, 0.5, 0.0), &g, 9).unwrap();
        assert!((p.values[g.n_steps] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn brownian_terminal_mean() {
        let g = grid(0.01, 1.0);
        let ens = simulate_ensemble(&ProcessSpec::brownian(), &g, 11, streams::OUTER, 10_000).unwrap();
        let ends: Vec<f64> = ens.paths.iter().map(|p| p.coords[0][g.n_steps]).collect();
        let ci = mean_ci(&ends, 0.95).unwrap();
        assert!(ci.mean.abs() <= 3.0 * (g.horizon().sqrt() / 100.0), "mean {}", ci.mean);
    }

    #[test]
    fn ensemble_regenerates_bit_identically() {
        let g = grid(0.01, 0.5);
        let spec = ProcessSpec::ito(1.0, Adaptation::Linear { slope: -1.0, intercept: 0.0 }, Adaptation::AbsAffine { base: 1.0, slope: 0.5 });
        let a = simulate_ensemble(&spec, &g, 5, 9, 16).unwrap();
        let b = simulate_ensemble(&spec, &g, 5, 9, 16).unwrap();
        assert_eq!(a, b);
        let single = simulate(&spec, &g, a.path_seed(7)).unwrap();
        assert_eq!(single, a.paths[7]);
    }

    #[test]
    fn simulate_until_agrees_with_full_path() {
        let g = grid(0.001, 1.0);
        let spec = ProcessSpec::ito(0.0, Adaptation::constant(0.2), Adaptation::AbsAffine { base: 1.0, slope: 0.5 });
        let rule = StoppingRule::FirstExit { radius: 0.2, cap: 1.0 };
        for seed in 0..5 {
            let full = simulate(&spec, &g, seed).unwrap();
            let (part, stop) = simulate_until(&spec, &g, seed, &rule, 0).unwrap();
            assert_eq!(stop, crate::stopping::realize(&rule, &full.coords[0], 0, &g).unwrap());
            assert_eq!(part.coords[0][..], full.coords[0][..=stop.index]);
        }
    }

    #[test]
    fn frozen_continuations_are_constant() {
        let g = grid(0.01, 1.0);
        let spec = ProcessSpec::ito_constant(0.7, 0.0, 0.0);
        let outer = simulate(&spec, &g, 1).unwrap();
        let b = branch_continuations(&spec, &outer, 30, 5, 2).unwrap();
        for m in 0..b.m() {
            let c = b.continuation(m).coord(0);
            for k in 0..c.len() {
                assert_eq!(c.at(k), 0.7);
            }
        }
    }

    #[test]
    fn continuations_share_prefix() {
        let g = grid(0.01, 1.0);
        let spec = ProcessSpec::ito(0.0, Adaptation::constant(0.1), Adaptation::AbsAffine { base: 1.0, slope: 0.5 });
        let outer = simulate(&spec, &g, 4).unwrap();
        let b = branch_continuations(&spec, &outer, 40, 4, 8).unwrap();
        for m in 0..b.m() {
            let c = b.continuation(m).coord(0);
            assert_eq!(c.len(), g.len());
            for k in 0..=40 {
                assert_eq!(c.at(k).to_bits(), outer.coords[0][k].to_bits());
            }
        }
        // distinct continuations diverge
        assert_ne!(b.tails[0][0][5], b.tails[1][0][5]);
    }

    #[test]
    fn brownian_bundle_increment_mean() {
        let g = grid(0.001, 1.0);
        let spec = ProcessSpec::brownian();
        let outer = simulate(&spec, &g, 21).unwrap();
        let s_idx = 300;
        let h_steps = 100;
        let m = 10_000;
        let b = branch(&spec, &outer, s_idx, m, 22, BranchEnd::Index(s_idx + h_steps)).unwrap();
        let incs: Vec<f64> = (0..m)
            .map(|j| b.continuation(j).coord(0).at(s_idx + h_steps) - b.anchor_value(0))
            .collect();
        let mean = incs.iter().sum::<f64>() / m as f64;
        let h = h_steps as f64 * g.dt;
        assert!(mean.abs() <= 3.0 * (h / m as f64).sqrt(), "mean {mean}");
    }

    #[test]
    fn bundle_rejects_bad_arguments() {
        let g = grid(0.01, 1.0);
        let spec = ProcessSpec::brownian();
        let outer = simulate(&spec, &g, 1).unwrap();
        assert!(matches!(branch_continuations(&spec, &outer, 10, 1, 0), Err(LabError::InsufficientBundle { m: 1 })));
        assert!(matches!(branch_continuations(&spec, &outer, 1000, 4, 0), Err(LabError::OutOfRange { .. })));
    }

    #[test]
    fn blowup_is_reported() {
        let g = grid(0.1, 1.0);
        let spec = ProcessSpec::ito(1.0, Adaptation::Sqrt { inner: Box::new(Adaptation::constant(-1.0)) }, Adaptation::constant(0.0));
        assert_eq!(simulate(&spec, &g, 0).unwrap_err(), LabError::NumericalBlowup { index: 1 });
    }

    #[test]
    fn stopped_path_is_constant_after_stop() {
        let g = grid(0.001, 2.0);
        let rule = StoppingRule::Debut { level: 0.3 };
        let spec = ProcessSpec::Stopped { inner: Box::new(ProcessSpec::brownian()), rule: rule.clone() };
        for seed in 0..20 {
            let p = simulate_path(&spec, &g, seed).unwrap();
            let stop = crate::stopping::realize(&rule, &p, 0, &g).unwrap();
            if !stop.capped {
                assert!(p.values[stop.index] >= 0.3);
                assert!(p.values[stop.index..].iter().all(|&v| v == p.values[stop.index]));
            }
            // path before the stop never reached the level
            assert!(p.values[..stop.index].iter().all(|&v| v < 0.3));
        }
    }

    #[test]
    fn stopped_bundle_continuations_respect_prior_stop() {
        let g = grid(0.001, 2.0);
        let rule = StoppingRule::Debut { level: 0.2 };
        let spec = ProcessSpec::Stopped { inner: Box::new(ProcessSpec::brownian()), rule };
        // find an outer path that stopped before index 500
        let (outer, _) = (0..200)
            .map(|s| (simulate(&spec, &g, s).unwrap(), s))
            .find(|(p, _)| p.coords[0][500] >= 0.2)
            .expect("some path hits 0.2 by t = 0.5");
        let b = branch_continuations(&spec, &outer, 500, 3, 1).unwrap();
        for m in 0..3 {
            let c = b.continuation(m).coord(0);
            for k in 500..c.len() {
                assert_eq!(c.at(k), outer.coords[0][500]);
            }
        }
    }

    #[test]
    fn negated_and_affine_branching() {
        let g = grid(0.01, 1.0);
        let spec = ProcessSpec::Affine { inner: Box::new(ProcessSpec::brownian()), scale: 2.0, shift: 1.0 };
        let outer = simulate(&spec, &g, 3).unwrap();
        assert_eq!(outer.coords[0][0], 1.0);
        let b = branch_continuations(&spec, &outer, 50, 2, 5).unwrap();
        assert_eq!(b.continuation(1).coord(0).at(50), outer.coords[0][50]);
        let neg = ProcessSpec::Negated { inner: Box::new(ProcessSpec::brownian()) };
        let p = simulate(&neg, &g, 3).unwrap();
        let q = simulate(&ProcessSpec::brownian(), &g, 3).unwrap();
        for k in 0..g.len() {
            assert_eq!(p.coords[0][k], -q.coords[0][k]);
        }
    }

    #[test]
    fn time_changed_relabels_inner_path() {
        let g = grid(0.01, 1.0);
        let inner = ProcessSpec::ito_constant(0.0, 0.3, 0.7);
        let tc = ProcessSpec::TimeChanged { inner: Box::new(inner.clone()), rate: 2.0 };
        let a = simulate(&tc, &g, 8).unwrap();
        let b = simulate(&inner, &g.scaled(2.0), 8).unwrap();
        assert_eq!(a.coords, b.coords);
    }

    #[test]
    fn integral_coordinate_is_left_riemann() {
        let g = grid(0.01, 1.0);
        let spec = ProcessSpec::WithIntegral {
            inner: Box::new(ProcessSpec::Deterministic { f: TimeFn::identity() }),
            coord: 0,
            integrand: Adaptation::Linear { slope: 1.0, intercept: 0.0 },
        };
        let p = simulate(&spec, &g, 0).unwrap();
        for k in 0..g.len() {
            let expect: f64 = (0..k).map(|j| j as f64 * g.dt * g.dt).sum();
            assert!((p.coords[1][k] - expect).abs() < 1e-12);
        }
        let outer = p.clone();
        let b = branch_continuations(&spec, &outer, 37, 2, 1).unwrap();
        let c = b.continuation(0);
        for k in 0..g.len() {
            assert!((c.coord(1).at(k) - p.coords[1][k]).abs() < 1e-12);
        }
    }

    #[test]
    fn correlated_bm_increment_correlation() {
        let g = grid(0.001, 10.0);
        let rho = 0.7;
        let spec = ProcessSpec::CorrelatedBm { corr: vec![vec![1.0, rho], vec![rho, 1.0]] };
        let p = simulate(&spec, &g, 17).unwrap();
        let dx: Vec<f64> = p.coords[0].windows(2).map(|w| w[1] - w[0]).collect();
        let dy: Vec<f64> = p.coords[1].windows(2).map(|w| w[1] - w[0]).collect();
        let r = crate::stats::correlation(&dx, &dy);
        assert!((r - rho).abs() <= 0.05, "corr {r}");
    }

    #[test]
    fn cholesky_rejects_invalid() {
        assert!(cholesky(&[vec![1.0, 2.0], vec![2.0, 1.0]]).is_err());
        assert!(cholesky(&[vec![1.0, 0.5], vec![0.4, 1.0]]).is_err());
        let l = cholesky(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert_eq!(l[1][1], 0.0);
    }

    #[test]
    fn negated_brownian_is_symmetric() {
        let g = grid(0.01, 1.0);
        let neg = ProcessSpec::Negated { inner: Box::new(ProcessSpec::brownian()) };
        let a = simulate_ensemble(&ProcessSpec::brownian(), &g, 1, 1, 2000).unwrap();
        let b = simulate_ensemble(&neg, &g, 2, 1, 2000).unwrap();
        let xa: Vec<f64> = a.paths.iter().map(|p| p.coords[0][50]).collect();
        let xb: Vec<f64> = b.paths.iter().map(|p| p.coords[0][50]).collect();
        let ks = crate::stats::ks_two_sample(&xa, &xb, 0.01).unwrap();
        assert!(!ks.reject, "D = {}", ks.statistic);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn adaptations_do_not_anticipate(
            vals in proptest::collection::vec(-3.0f64..3.0, 3..40),
            k_frac in 0.0f64..1.0,
            noise in proptest::collection::vec(-5.0f64..5.0, 40),
        ) {
            let g = TimeGrid::new(0.01, vals.len() - 1).unwrap();
            let k = ((vals.len() - 1) as f64 * k_frac) as usize;
            let mut perturbed = vals.clone();
            for j in (k + 1)..vals.len() {
                perturbed[j] += noise[j];
            }
            let adaptations = [
                Adaptation::constant(0.3),
                Adaptation::Linear { slope: 0.5, intercept: -1.0 },
                Adaptation::AbsAffine { base: 1.0, slope: 0.5 },
                Adaptation::Clamp { inner: Box::new(Adaptation::AbsAffine { base: 1.0, slope: 0.5 }), lo: 0.5, hi: 2.0 },
                Adaptation::BelowRunningMax { level: 1.0 },
            ];
            for a in &adaptations {
                let x = a.eval(&PrefixCtx::scan(&vals, k, &g));
                let y = a.eval(&PrefixCtx::scan(&perturbed, k, &g));
                proptest::prop_assert_eq!(x.to_bits(), y.to_bits());
                proptest::prop_assert_eq!(a.eval_along(&vals, &g)[k].to_bits(), x.to_bits());
            }
        }
    }
}
