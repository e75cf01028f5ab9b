//! Synthetic elastoplastic forming plant.
//!
//! The plant keeps a residual curvature field on the station grid. Each
//! cycle, the commanded depth `u_j` at station `j` creates a plastic demand
//! `d_j = c0 * u_j`; demand below the (hardening-raised) yield threshold
//! springs back completely, demand above it leaves a permanent curvature
//! increment:
//!
//! ```text
//! dk_j = sign(d_j) * max(|d_j| - k_y * (1 + h * s_j), 0) * gamma
//! k_j += dk_j,    s_j += |dk_j|
//! ```
//!
//! Deformation is recovered like a clamped beam: the curvature field is
//! integrated twice with the trapezoidal rule (`w(0) = w'(0) = 0`), extended
//! linearly past the last station (zero curvature there), and read off at
//! the tracker positions with linear interpolation. Optional seeded Gaussian
//! noise models measurement scatter, and an optional per-episode bias models
//! blank-to-blank repeatability.
//!
//! Material drift (an aged or substituted blank) multiplies the yield
//! threshold; the surrogate trained on nominal data then overpredicts the
//! plastic response, which is exactly the regime the online adapter exists
//! for.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetMeta, Episode, Snapshot, Toolpath};
use crate::error::{Error, Result};
use crate::toolpath::uniform_grid;

/// Sheet length along y, mm (trackers live on this span).
pub const SHEET_LENGTH_MM: f64 = 240.0;
/// Toolpath span along y, mm (stations live on this span).
pub const STATION_SPAN_MM: f64 = 120.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// Yield threshold of the curvature demand, 1/mm.
    pub yield_threshold: f64,
    /// Dimensionless hardening coefficient on accumulated plastic curvature.
    pub hardening: f64,
    /// Fraction of over-yield demand retained as permanent curvature.
    pub plastic_gain: f64,
    /// Curvature demand per mm of commanded depth, 1/mm per mm.
    pub demand_gain: f64,
    /// Measurement noise standard deviation, mm.
    pub noise_sigma: f64,
    /// Multiplier on the yield threshold; 1.0 is the nominal material.
    pub drift_factor: f64,
    /// Half-width of the uniform per-episode bias, mm (0 disables it).
    pub episode_bias_mm: f64,
    /// Station y-positions, mm.
    pub station_grid: Vec<f64>,
    /// Tracker y-positions, mm.
    pub tracker_grid: Vec<f64>,
}

impl Default for PlantParams {
    fn default() -> Self {
        PlantParams {
            yield_threshold: 8.0e-4,
            hardening: 0.8,
            plastic_gain: 0.35,
            demand_gain: 1.2e-4,
            noise_sigma: 0.1,
            drift_factor: 1.0,
            episode_bias_mm: 0.0,
            station_grid: uniform_grid(0.0, STATION_SPAN_MM, 20),
            tracker_grid: uniform_grid(0.0, SHEET_LENGTH_MM, 8),
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("yield_threshold", self.yield_threshold),
            ("plastic_gain", self.plastic_gain),
            ("demand_gain", self.demand_gain),
            ("drift_factor", self.drift_factor),
        ];
        for (name, v) in positive {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::argument(format!("plant parameter {name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("hardening", self.hardening),
            ("noise_sigma", self.noise_sigma),
            ("episode_bias_mm", self.episode_bias_mm),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::argument(format!("plant parameter {name} must be non-negative, got {v}")));
            }
        }
        if self.station_grid.len() < 2 || self.tracker_grid.len() < 2 {
            return Err(Error::argument("plant grids need at least two points"));
        }
        if self.station_grid.windows(2).any(|w| w[1] <= w[0])
            || self.tracker_grid.windows(2).any(|w| w[1] <= w[0])
        {
            return Err(Error::argument("plant grids must be strictly increasing"));
        }
        if self.station_grid[0] != 0.0 || self.tracker_grid[0] != 0.0 {
            return Err(Error::argument("plant grids must start at the clamped edge y = 0"));
        }
        Ok(())
    }
}

/// Simulated plant with persistent plastic state.
#[derive(Debug, Clone)]
pub struct Plant {
    params: PlantParams,
    /// Residual curvature per station, 1/mm.
    curvature: Vec<f64>,
    /// Accumulated plastic curvature magnitude per station (hardening state).
    hardening_accum: Vec<f64>,
    rng: ChaCha8Rng,
    episode_bias: f64,
}

impl Plant {
    pub fn new(params: PlantParams, seed: u64) -> Result<Self> {
        params.validate()?;
        let n = params.station_grid.len();
        let mut plant = Plant {
            params,
            curvature: vec![0.0; n],
            hardening_accum: vec![0.0; n],
            rng: ChaCha8Rng::seed_from_u64(seed),
            episode_bias: 0.0,
        };
        plant.draw_episode_bias();
        Ok(plant)
    }

    pub fn params(&self) -> &PlantParams {
        &self.params
    }

    fn draw_episode_bias(&mut self) {
        self.episode_bias = if self.params.episode_bias_mm > 0.0 {
            let b = self.params.episode_bias_mm;
            Uniform::new_inclusive(-b, b).unwrap().sample(&mut self.rng)
        } else {
            0.0
        };
    }

    /// Zero the plastic state and redraw the per-episode bias (a fresh
    /// blank).
    pub fn reset(&mut self) {
        self.curvature.iter_mut().for_each(|k| *k = 0.0);
        self.hardening_accum.iter_mut().for_each(|s| *s = 0.0);
        self.draw_episode_bias();
    }

    /// Apply one toolpath; returns the snapshot measured afterwards.
    pub fn apply_cycle(&mut self, toolpath_values: &[f64]) -> Result<Vec<f64>> {
        if toolpath_values.len() != self.params.station_grid.len() {
            return Err(Error::argument(format!(
                "toolpath has {} stations, plant expects {}",
                toolpath_values.len(),
                self.params.station_grid.len()
            )));
        }
        if toolpath_values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("toolpath contains non-finite values"));
        }
        let yield_eff = self.params.yield_threshold * self.params.drift_factor;
        for (j, &u) in toolpath_values.iter().enumerate() {
            let demand = self.params.demand_gain * u;
            let threshold = yield_eff * (1.0 + self.params.hardening * self.hardening_accum[j]);
            let over = demand.abs() - threshold;
            if over > 0.0 {
                let dk = demand.signum() * over * self.params.plastic_gain;
                self.curvature[j] += dk;
                self.hardening_accum[j] += dk.abs();
            }
        }
        Ok(self.measure())
    }

    /// Deformation at the tracker positions, with noise and bias applied.
    pub fn measure(&mut self) -> Vec<f64> {
        let mut w = self.deformation_at_trackers();
        if self.params.noise_sigma > 0.0 {
            let normal = Normal::new(0.0, self.params.noise_sigma).unwrap();
            for v in &mut w {
                *v += normal.sample(&mut self.rng);
            }
        }
        if self.episode_bias != 0.0 {
            for v in &mut w {
                *v += self.episode_bias;
            }
        }
        w
    }

    /// Noise-free deformation field at the tracker positions.
    pub fn deformation_at_trackers(&self) -> Vec<f64> {
        let stations = &self.params.station_grid;
        let n = stations.len();
        // First pass: slope theta(y) = integral of curvature.
        let mut theta = vec![0.0; n];
        for j in 1..n {
            let dy = stations[j] - stations[j - 1];
            theta[j] = theta[j - 1] + 0.5 * (self.curvature[j] + self.curvature[j - 1]) * dy;
        }
        // Second pass: deflection w(y) = integral of slope, clamped at 0.
        let mut w = vec![0.0; n];
        for j in 1..n {
            let dy = stations[j] - stations[j - 1];
            w[j] = w[j - 1] + 0.5 * (theta[j] + theta[j - 1]) * dy;
        }
        // Past the last station the curvature is zero, so the deflection
        // continues linearly with the final slope; append a virtual node at
        // the sheet end so interpolation covers every tracker.
        let mut ys: Vec<f64> = stations.clone();
        let mut ws = w;
        let y_end = self.params.tracker_grid[self.params.tracker_grid.len() - 1];
        if y_end > ys[n - 1] {
            ws.push(ws[n - 1] + theta[n - 1] * (y_end - ys[n - 1]));
            ys.push(y_end);
        }
        self.params
            .tracker_grid
            .iter()
            .map(|&y| linear_interp(&ys, &ws, y))
            .collect()
    }

    /// Run a full episode from a fresh blank: snapshot 0 is the all-zero
    /// reference, then one snapshot after each toolpath.
    pub fn run_episode(&mut self, id: &str, toolpaths: &[Vec<f64>]) -> Result<Episode> {
        self.reset();
        let n_x = self.params.tracker_grid.len();
        let mut snapshots = vec![Snapshot { cycle_index: 0, values: vec![0.0; n_x] }];
        let mut tps = Vec::with_capacity(toolpaths.len());
        for (k, tp) in toolpaths.iter().enumerate() {
            let measured = self.apply_cycle(tp)?;
            snapshots.push(Snapshot { cycle_index: k + 1, values: measured });
            tps.push(Toolpath { cycle_index: k, values: tp.clone() });
        }
        let episode = Episode { id: id.to_string(), snapshots, toolpaths: tps };
        episode.validate()?;
        Ok(episode)
    }

    /// Dataset metadata describing this plant's geometry.
    pub fn dataset_meta(&self, provenance: String) -> DatasetMeta {
        DatasetMeta {
            tracker_count: self.params.tracker_grid.len(),
            station_count: self.params.station_grid.len(),
            tracker_grid: self.params.tracker_grid.clone(),
            station_grid: self.params.station_grid.clone(),
            units: "mm".to_string(),
            provenance,
        }
    }
}

fn linear_interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let i = xs.partition_point(|&v| v < x).max(1);
    let (x0, x1) = (xs[i - 1], xs[i]);
    let t = (x - x0) / (x1 - x0);
    ys[i - 1] * (1.0 - t) + ys[i] * t
}
