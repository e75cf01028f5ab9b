//! Parametric toolpath generator and design of experiments.
//!
//! A toolpath prescribes the tool depth along the span `y in [0, 120]` mm as
//! a single-lobe sinusoid plus a linear trend,
//!
//! ```text
//! z(y) = A sin(2 pi f y_n + phi) + T y_n,      y_n = y / 120 in [0, 1]
//! ```
//!
//! with amplitude `A in [10, 30]` mm, frequency `f` in cycles per span,
//! phase `phi`, and net trend `T` in mm over the span. The phase interval is
//! chosen per curvature class so the sine lobe keeps one sign across the
//! span (downward for the negative class, upward for the positive class);
//! frequency stays at or below one half cycle per span so that such a phase
//! interval exists and the profile stays a single mode. Samples whose
//! evaluated profile still shows more than one interior extremum (the trend
//! can tilt a shallow lobe) are rejected and redrawn.
//!
//! The experiment plan pairs a pool of base paths with per-slot stratified
//! sequences: every slot of the episode cycle draws each base index the same
//! number of times across the plan, a Latin-hypercube-style balance that
//! keeps per-cycle input coverage uniform.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Toolpath span along y, mm.
pub const SPAN_MM: f64 = 120.0;
/// Amplitude bounds, mm.
pub const AMPLITUDE_RANGE: (f64, f64) = (10.0, 30.0);
/// Frequency bounds, cycles per span. The upper bound of one half cycle
/// keeps the lobe single-signed and the profile Chebyshev-representable
/// within the approximation band used downstream.
pub const FREQUENCY_RANGE: (f64, f64) = (0.08, 0.5);
/// Net trend magnitude bound over the span, mm.
pub const TREND_LIMIT_MM: f64 = 10.0;
/// Attempts before the rejection sampler gives up.
pub const REJECTION_BUDGET: usize = 10_000;

/// Dominant bending direction of a base path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CurvatureClass {
    /// Downward lobe (the common forming direction).
    Negative,
    /// Upward lobe.
    Positive,
}

/// Parameters of one sinusoid-plus-trend toolpath.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToolpathParams {
    /// Lobe amplitude, mm.
    pub amplitude: f64,
    /// Cycles per span.
    pub frequency: f64,
    /// Phase, radians.
    pub phase: f64,
    /// Net linear rise over the span, mm.
    pub trend: f64,
    pub class: CurvatureClass,
}

/// Evaluate a toolpath on a station grid (positions in mm along the span).
pub fn evaluate(params: &ToolpathParams, station_grid: &[f64]) -> Vec<f64> {
    station_grid
        .iter()
        .map(|&y| {
            let yn = y / SPAN_MM;
            params.amplitude * (2.0 * std::f64::consts::PI * params.frequency * yn + params.phase).sin()
                + params.trend * yn
        })
        .collect()
}

/// Number of interior extrema of a sampled profile (sign changes of the
/// discrete slope).
pub fn interior_extrema(values: &[f64]) -> usize {
    let mut count = 0;
    let mut prev_slope = 0.0_f64;
    for w in values.windows(2) {
        let slope = w[1] - w[0];
        if slope != 0.0 {
            if prev_slope != 0.0 && slope.signum() != prev_slope.signum() {
                count += 1;
            }
            prev_slope = slope;
        }
    }
    count
}

fn sample_one(rng: &mut ChaCha8Rng, class: CurvatureClass, station_grid: &[f64]) -> Result<ToolpathParams> {
    use std::f64::consts::PI;
    for _ in 0..REJECTION_BUDGET {
        let amplitude = rng.random_range(AMPLITUDE_RANGE.0..AMPLITUDE_RANGE.1);
        let frequency = rng.random_range(FREQUENCY_RANGE.0..FREQUENCY_RANGE.1);
        let trend = rng.random_range(-TREND_LIMIT_MM..TREND_LIMIT_MM);
        // The sine's phase across the span covers [phi, phi + 2 pi f]. Keep
        // that interval inside [pi, 2 pi] (negative lobe) or [0, pi]
        // (positive lobe); f <= 1/2 guarantees the interval fits.
        let slack = PI - 2.0 * PI * frequency;
        let offset = rng.random_range(0.0..slack.max(f64::MIN_POSITIVE));
        let phase = match class {
            CurvatureClass::Negative => PI + offset,
            CurvatureClass::Positive => offset,
        };
        let params = ToolpathParams { amplitude, frequency, phase, trend, class };
        let z = evaluate(&params, station_grid);
        if interior_extrema(&z) > 1 {
            continue;
        }
        // The trend may tilt a shallow lobe far enough to flip the dominant
        // direction; require the lobe sign to dominate.
        let zmin = z.iter().cloned().fold(f64::INFINITY, f64::min);
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let dominant = match class {
            CurvatureClass::Negative => zmin < 0.0 && -zmin >= zmax.max(0.0),
            CurvatureClass::Positive => zmax > 0.0 && zmax >= (-zmin).max(0.0),
        };
        if dominant {
            return Ok(params);
        }
    }
    Err(Error::numerical(format!(
        "toolpath rejection sampling exhausted {REJECTION_BUDGET} attempts for class {class:?}"
    )))
}

/// Draw the base-path pool: `negative + positive` single-lobe paths.
pub fn sample_base_paths(
    rng: &mut ChaCha8Rng,
    negative: usize,
    positive: usize,
    station_grid: &[f64],
) -> Result<Vec<ToolpathParams>> {
    let mut paths = Vec::with_capacity(negative + positive);
    for _ in 0..negative {
        paths.push(sample_one(rng, CurvatureClass::Negative, station_grid)?);
    }
    for _ in 0..positive {
        paths.push(sample_one(rng, CurvatureClass::Positive, station_grid)?);
    }
    Ok(paths)
}

/// Per-slot stratified sequences: `n_sequences` rows of `slots` base-path
/// indices, where each slot position uses every index in `0..n_base` equally
/// often (up to remainder when `n_sequences` is not a multiple of `n_base`).
pub fn lhs_sequences(
    rng: &mut ChaCha8Rng,
    n_sequences: usize,
    slots: usize,
    n_base: usize,
) -> Result<Vec<Vec<usize>>> {
    if n_base == 0 || slots == 0 || n_sequences == 0 {
        return Err(Error::argument("sequence plan dimensions must be positive"));
    }
    let mut columns: Vec<Vec<usize>> = Vec::with_capacity(slots);
    for _ in 0..slots {
        // Balanced multiset of indices, shuffled: a stratified permutation.
        let mut column: Vec<usize> = (0..n_sequences).map(|i| i % n_base).collect();
        column.shuffle(rng);
        columns.push(column);
    }
    Ok((0..n_sequences)
        .map(|row| (0..slots).map(|s| columns[s][row]).collect())
        .collect())
}

/// A complete design-of-experiments plan.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DoePlan {
    pub seed: u64,
    /// Station y-positions shared by all paths, mm.
    pub station_grid: Vec<f64>,
    pub base_paths: Vec<ToolpathParams>,
    /// `n_sequences x slots` base-path indices.
    pub sequences: Vec<Vec<usize>>,
}

impl DoePlan {
    /// Build the default-sized plan: a 20-path pool (16 downward, 4 upward)
    /// and 80 balanced sequences of 6 cycles.
    pub fn build(seed: u64, station_grid: Vec<f64>, episodes: usize, cycles: usize) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base_paths = sample_base_paths(&mut rng, 16, 4, &station_grid)?;
        let sequences = lhs_sequences(&mut rng, episodes, cycles, base_paths.len())?;
        Ok(DoePlan { seed, station_grid, base_paths, sequences })
    }

    /// Toolpath values for one cycle of one sequence.
    pub fn toolpath_values(&self, sequence: usize, slot: usize) -> Result<Vec<f64>> {
        let idx = *self
            .sequences
            .get(sequence)
            .and_then(|s| s.get(slot))
            .ok_or_else(|| Error::argument(format!("sequence {sequence} slot {slot} out of range")))?;
        Ok(evaluate(&self.base_paths[idx], &self.station_grid))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            Error::argument(format!("cannot read plan file {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Evenly spaced grid helper used for default station/tracker layouts.
pub fn uniform_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 2, "grid needs at least two points");
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}
