//! Uniform time grids, cadlag sample paths and counter-based seeding.
//!
//! A path stores one value per grid point `t_k = k * dt`. Between grid points
//! the path is held constant, so the value at `t in [t_k, t_{k+1})` is
//! `values[k]` and the left limit at `t_k` is `values[k - 1]`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// Absorbs representation error when converting a time into a grid index,
/// e.g. `0.3 / 0.1 = 2.9999999999999996` must land on index 3.
const INDEX_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(LabError::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if n_steps == 0 {
            return Err(LabError::InvalidParameter("n_steps must be at least 1".into()));
        }
        Ok(Self { dt, n_steps })
    }

    /// Grid with step `dt` covering `[0, horizon]`, rounding the step count to
    /// the nearest integer.
    pub fn with_horizon(dt: f64, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(LabError::InvalidParameter(format!("horizon must be positive, got {horizon}")));
        }
        let n = (horizon / dt).round();
        if !(n >= 1.0) {
            return Err(LabError::InvalidParameter(format!(
                "horizon {horizon} is shorter than one step of {dt}"
            )));
        }
        Self::new(dt, n as usize)
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn len(&self) -> usize {
        self.n_steps + 1
    }

    /// Index of the grid cell containing `t`, clamped to the last grid point.
    pub fn floor_index(&self, t: f64) -> usize {
        if t <= 0.0 {
            return 0;
        }
        let k = (t / self.dt + INDEX_SLACK).floor();
        if k >= self.n_steps as f64 {
            self.n_steps
        } else {
            k as usize
        }
    }

    /// Number of whole steps in a duration, rounded down to the containing cell.
    pub fn steps_in(&self, h: f64) -> usize {
        if h <= 0.0 {
            return 0;
        }
        let k = (h / self.dt + INDEX_SLACK).floor();
        if k >= usize::MAX as f64 {
            usize::MAX
        } else {
            k as usize
        }
    }

    /// Same step count, step scaled by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self { dt: self.dt * factor, n_steps: self.n_steps }
    }
}

/// Read access to grid-indexed values; implemented by stored paths and by
/// spliced bundle continuations.
pub trait PathAccess {
    fn len(&self) -> usize;
    fn at(&self, k: usize) -> f64;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl PathAccess for [f64] {
    fn len(&self) -> usize {
        <[f64]>::len(self)
    }
    fn at(&self, k: usize) -> f64 {
        self[k]
    }
}

impl PathAccess for Vec<f64> {
    fn len(&self) -> usize {
        Vec::len(self)
    }
    fn at(&self, k: usize) -> f64 {
        self[k]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    pub grid: TimeGrid,
    pub values: Vec<f64>,
}

impl SamplePath {
    pub fn new(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(LabError::InvalidParameter(format!(
                "path has {} values, grid needs {}",
                values.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.len()).map(|k| f(grid.time(k))).collect();
        Self { grid, values }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x\n");
        for (k, v) in self.values.iter().enumerate() {
            out.push_str(&format!("{},{}\n", fmt_full(self.grid.time(k)), fmt_full(*v)));
        }
        out
    }
}

impl PathAccess for SamplePath {
    fn len(&self) -> usize {
        self.values.len()
    }
    fn at(&self, k: usize) -> f64 {
        self.values[k]
    }
}

/// A multi-dimensional path; every coordinate shares one grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorPath {
    pub grid: TimeGrid,
    pub coords: Vec<Vec<f64>>,
}

impl VectorPath {
    pub fn new(grid: TimeGrid, coords: Vec<Vec<f64>>) -> Result<Self> {
        if coords.is_empty() {
            return Err(LabError::InvalidParameter("vector path needs a coordinate".into()));
        }
        if coords.iter().any(|c| c.len() != grid.len()) {
            return Err(LabError::InvalidParameter("coordinate length does not match grid".into()));
        }
        Ok(Self { grid, coords })
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coord(&self, i: usize) -> &[f64] {
        &self.coords[i]
    }

    pub fn row(&self, k: usize) -> Vec<f64> {
        self.coords.iter().map(|c| c[k]).collect()
    }

    pub fn sample_path(&self, i: usize) -> SamplePath {
        SamplePath { grid: self.grid, values: self.coords[i].clone() }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        if self.dim() == 1 {
            out.push_str(",x");
        } else {
            for i in 1..=self.dim() {
                out.push_str(&format!(",x{i}"));
            }
        }
        out.push('\n');
        for k in 0..self.grid.len() {
            out.push_str(&fmt_full(self.grid.time(k)));
            for c in &self.coords {
                out.push(',');
                out.push_str(&fmt_full(c[k]));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the CSV layout written by [`VectorPath::to_csv`]. The step is
    /// recovered from the first two time stamps.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| LabError::InvalidParameter("empty csv".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols.len() < 2 || cols[0] != "t" {
            return Err(LabError::InvalidParameter(format!("unexpected header {header:?}")));
        }
        let dim = cols.len() - 1;
        let mut times = Vec::new();
        let mut coords = vec![Vec::new(); dim];
        for line in lines.filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != dim + 1 {
                return Err(LabError::InvalidParameter(format!("bad row {line:?}")));
            }
            let parse = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| LabError::InvalidParameter(format!("bad number {s:?}")))
            };
            times.push(parse(fields[0])?);
            for (c, f) in coords.iter_mut().zip(&fields[1..]) {
                c.push(parse(f)?);
            }
        }
        if times.len() < 2 {
            return Err(LabError::InvalidParameter("csv needs at least two rows".into()));
        }
        let grid = TimeGrid::new(times[1] - times[0], times.len() - 1)?;
        Self::new(grid, coords)
    }
}

impl From<SamplePath> for VectorPath {
    fn from(p: SamplePath) -> Self {
        Self { grid: p.grid, coords: vec![p.values] }
    }
}

/// A seeded collection of paths; path `i` depends only on
/// `(master_seed, stream_id, i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    pub master_seed: u64,
    pub stream_id: u64,
    pub paths: Vec<VectorPath>,
}

impl Ensemble {
    pub fn path_seed(&self, i: usize) -> u64 {
        stream_seed(self.master_seed, self.stream_id, i as u64)
    }
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_full(x: f64) -> String {
    format!("{x:.16e}")
}

/// Value of the path at time `t` under the cadlag convention.
pub fn cadlag_eval<P: PathAccess + ?Sized>(path: &P, grid: &TimeGrid, t: f64) -> Result<f64> {
    let horizon = grid.horizon();
    if !(t >= 0.0) || t > horizon * (1.0 + 1e-12) {
        return Err(LabError::OutOfRange { what: "t", value: t });
    }
    Ok(path.at(grid.floor_index(t).min(path.len() - 1)))
}

/// `X_{T-}` relative to the anchor `S`: the previous grid value when `T > S`,
/// and `X_S` itself when `T = S`.
pub fn left_limit_at_stop<P: PathAccess + ?Sized>(path: &P, s_idx: usize, t_idx: usize) -> Result<f64> {
    if t_idx < s_idx {
        return Err(LabError::InvalidStopOrder { s_idx, t_idx });
    }
    if t_idx >= path.len() {
        return Err(LabError::OutOfRange { what: "t_idx", value: t_idx as f64 });
    }
    Ok(path.at(left_limit_index(s_idx, t_idx)))
}

#[inline]
pub(crate) fn left_limit_index(s_idx: usize, t_idx: usize) -> usize {
    if t_idx > s_idx {
        t_idx - 1
    } else {
        s_idx
    }
}

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based seed derivation: a pure function of its three inputs, so the
/// seed of any path is independent of generation order and thread count.
pub fn stream_seed(master: u64, stream: u64, index: u64) -> u64 {
    let a = splitmix64(index);
    let b = splitmix64(stream.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ a);
    splitmix64(master ^ b)
}

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stream identifiers used when deriving seeds.
pub mod streams {
    pub const OUTER: u64 = 1;
    pub const BRANCH: u64 = 2;
    pub const LEAF: u64 = 3;
    pub const CONTINUATION: u64 = 4;
    pub const LEFT_SIDE: u64 = 5;
    pub const RIGHT_SIDE: u64 = 6;
    pub const CHECK: u64 = 7;
}
