//! The run manifest: one TOML document that pins every knob of the
//! pipeline — seeds, plant parameters, experiment sizes, training and
//! controller configuration, and artifact file names. All defaults are
//! embedded in the binary (`RunManifest::default()`, dumped by
//! `--print-defaults`), and the manifest's content hash is recorded in
//! every metrics file so artifacts can be traced back to the exact
//! configuration that produced them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use formtwin_core::adapt::AdaptConfig;
use formtwin_core::koopman::train::TrainConfig;
use formtwin_core::koopman::NetDims;
use formtwin_core::mpc::MpcSpec;
use formtwin_core::plant::PlantParams;
use formtwin_core::{Error, Result};

/// Per-command random seeds. Training carries its own seed inside
/// [`TrainConfig`]; everything else draws from here. Distinct defaults keep
/// the command streams independent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Experiment-design sampling.
    pub doe: u64,
    /// Base seed for plant measurement noise; episode `i` uses `plant + i`.
    pub plant: u64,
    /// Validation replicate resampling.
    pub validate: u64,
    /// Plant seed of closed-loop runs.
    pub control: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { doe: 101, plant: 202, validate: 404, control: 505 }
    }
}

/// Experiment-design sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoeSettings {
    /// Number of toolpath sequences (one forming episode each).
    pub episodes: usize,
    /// Forming cycles per episode.
    pub cycles: usize,
}

impl Default for DoeSettings {
    fn default() -> Self {
        DoeSettings { episodes: 80, cycles: 6 }
    }
}

/// Dimension-reduction sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionSettings {
    /// Deformation modes kept.
    pub pod_modes: usize,
    /// Polynomial terms per toolpath.
    pub chebyshev_terms: usize,
    /// Center snapshots before the mode fit. Off by default so the flat
    /// sheet maps to the origin of the reduced space.
    pub subtract_mean: bool,
}

impl Default for ReductionSettings {
    fn default() -> Self {
        ReductionSettings { pod_modes: 4, chebyshev_terms: 5, subtract_mean: false }
    }
}

/// Network architecture. Reduced and input dimensions come from the
/// reduction settings; these are the free sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSettings {
    /// Learned observables; the lifted dimension is this plus the mode count.
    pub observable_dim: usize,
    /// Hidden widths of the encoder/decoder blocks.
    pub hidden: Vec<usize>,
}

impl Default for ModelSettings {
    fn default() -> Self {
        let dims = NetDims::standard(4, 5);
        ModelSettings { observable_dim: dims.observable_dim, hidden: dims.hidden }
    }
}

impl ModelSettings {
    pub fn dims(&self, reduced_dim: usize, input_dim: usize) -> NetDims {
        NetDims {
            reduced_dim,
            observable_dim: self.observable_dim,
            input_dim,
            hidden: self.hidden.clone(),
        }
    }
}

/// Compact controller parameterization. The full cost vectors depend on the
/// lifted dimension, so the manifest stores the handful of scalars they are
/// built from and [`MpcSettings::to_spec`] expands them against the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpcSettings {
    pub horizon: usize,
    /// Stage weight on every learned observable.
    pub observable_weight: f64,
    /// Stage weights on the appended reduced states, heaviest first; length
    /// must equal the mode count.
    pub tail_weights: Vec<f64>,
    /// Terminal cost = this factor times the stage cost.
    pub terminal_scale: f64,
    /// Cost on each input coefficient.
    pub input_cost: f64,
    /// Symmetric bound on each toolpath coefficient, mm.
    pub input_bound_mm: f64,
    /// Loaded-edge strictness margin, mm.
    pub end_load_eps_mm: f64,
    pub termination_tol_mm: f64,
    pub max_cycles: usize,
}

impl Default for MpcSettings {
    fn default() -> Self {
        MpcSettings {
            horizon: 6,
            observable_weight: 1.0,
            tail_weights: vec![20.0, 10.0, 10.0, 1.0],
            terminal_scale: 0.1,
            input_cost: 1e-5,
            input_bound_mm: 40.0,
            end_load_eps_mm: 1e-6,
            termination_tol_mm: 1.5,
            max_cycles: 6,
        }
    }
}

impl MpcSettings {
    pub fn to_spec(&self, dims: &NetDims) -> Result<MpcSpec> {
        if self.tail_weights.len() != dims.reduced_dim {
            return Err(Error::argument(format!(
                "mpc.tail_weights has {} entries, the model keeps {} modes",
                self.tail_weights.len(),
                dims.reduced_dim
            )));
        }
        let p = dims.input_dim;
        let mut q_diag = vec![self.observable_weight; dims.lifted_dim()];
        q_diag[dims.observable_dim..].copy_from_slice(&self.tail_weights);
        let q_n_diag: Vec<f64> = q_diag.iter().map(|v| self.terminal_scale * v).collect();
        let spec = MpcSpec {
            horizon: self.horizon,
            q_diag,
            q_n_diag,
            r_diag: vec![self.input_cost; p],
            u_min: vec![-self.input_bound_mm; p],
            u_max: vec![self.input_bound_mm; p],
            c1: (0..p).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect(),
            c2: vec![1.0; p],
            end_load_eps: self.end_load_eps_mm,
            termination_tol_mm: self.termination_tol_mm,
            max_cycles: self.max_cycles,
        };
        spec.validate(dims)?;
        Ok(spec)
    }
}

/// Closed-loop run settings beyond the controller itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlSettings {
    /// Default target: this fraction of the nominal plant's saturation
    /// profile (the deformation a maximal toolpath converges to).
    pub target_scale: f64,
}

impl Default for ControlSettings {
    fn default() -> Self {
        ControlSettings { target_scale: 0.6 }
    }
}

/// Artifact file names, all resolved relative to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathSettings {
    /// Artifact directory; a relative path is resolved against the working
    /// directory (or the `--out-dir` flag replaces it outright).
    pub out_dir: String,
    pub plan: String,
    pub episodes: String,
    pub bases: String,
    pub model: String,
    pub history: String,
    pub trace_adapt_off: String,
    pub trace_adapt_on: String,
    pub report_dir: String,
}

impl Default for PathSettings {
    fn default() -> Self {
        PathSettings {
            out_dir: "artifacts".to_string(),
            plan: "doe_plan.json".to_string(),
            episodes: "episodes.csv".to_string(),
            bases: "bases.json".to_string(),
            model: "model.json".to_string(),
            history: "history.json".to_string(),
            trace_adapt_off: "trace_adapt_off.jsonl".to_string(),
            trace_adapt_on: "trace_adapt_on.jsonl".to_string(),
            report_dir: "report".to_string(),
        }
    }
}

/// The complete pipeline configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunManifest {
    pub tool_version: ToolVersion,
    pub seeds: Seeds,
    pub plant: PlantParams,
    pub doe: DoeSettings,
    pub reduction: ReductionSettings,
    pub model: ModelSettings,
    pub train: TrainConfig,
    pub mpc: MpcSettings,
    pub adapt: AdaptConfig,
    pub control: ControlSettings,
    pub paths: PathSettings,
}

/// Newtype so the version serializes as a plain string but defaults to the
/// compiled package version.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ToolVersion(pub String);

impl Default for ToolVersion {
    fn default() -> Self {
        ToolVersion(env!("CARGO_PKG_VERSION").to_string())
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::argument(format!("cannot read manifest {}: {e}", path.display()))
        })?;
        let manifest: RunManifest = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            row: e.span().map(|s| text[..s.start].lines().count()).unwrap_or(0),
            message: e.message().to_string(),
        })?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::argument(format!("cannot serialize manifest: {e}")))
    }

    /// SHA-256 over the canonical TOML serialization. Stable under
    /// load/save round trips because field order is fixed by the struct.
    pub fn content_hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml()?.as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(digest.len() * 2);
        for b in digest {
            hex.push_str(&format!("{b:02x}"));
        }
        Ok(hex)
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        if self.doe.episodes == 0 || self.doe.cycles == 0 {
            return Err(Error::argument("doe.episodes and doe.cycles must be positive"));
        }
        if self.reduction.pod_modes == 0
            || self.reduction.pod_modes > self.plant.tracker_grid.len()
        {
            return Err(Error::argument(format!(
                "reduction.pod_modes must lie in 1..={}",
                self.plant.tracker_grid.len()
            )));
        }
        if self.reduction.chebyshev_terms == 0
            || self.reduction.chebyshev_terms > self.plant.station_grid.len()
        {
            return Err(Error::argument(format!(
                "reduction.chebyshev_terms must lie in 1..={}",
                self.plant.station_grid.len()
            )));
        }
        if self.mpc.tail_weights.len() != self.reduction.pod_modes {
            return Err(Error::argument(format!(
                "mpc.tail_weights has {} entries, reduction keeps {} modes",
                self.mpc.tail_weights.len(),
                self.reduction.pod_modes
            )));
        }
        if !(self.control.target_scale.is_finite() && self.control.target_scale > 0.0) {
            return Err(Error::argument("control.target_scale must be positive"));
        }
        // Expanding the controller spec against the configured dimensions
        // surfaces bad scalar values (negative costs, zero horizon) now
        // rather than at control time.
        let dims = self
            .model
            .dims(self.reduction.pod_modes, self.reduction.chebyshev_terms);
        dims.validate()?;
        self.mpc.to_spec(&dims)?;
        Ok(())
    }

    /// The artifact directory, honoring an override from the command line.
    pub fn out_dir(&self, override_dir: Option<&Path>) -> PathBuf {
        override_dir
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(&self.paths.out_dir))
    }
}
