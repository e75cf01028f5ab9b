//! Online adaptation of the lifted input map.
//!
//! When the plant drifts away from the data the surrogate was trained on
//! (aged material, substituted blank), the state dynamics `A` stay useful
//! but the input map `B` overpredicts the effect of each toolpath. This
//! module updates `B` between forming cycles by exponentially weighted
//! recursive least squares on the lifted one-step residual
//! `e_k = z*_{k+1} − A z_k`, keeping `A` fixed:
//!
//! ```text
//! K = P ũ / (λ + ũᵀ P ũ)
//! P ← (P − P ũ ũᵀ P / (λ + ũᵀ P ũ)) / λ
//! B ← B + (e − B ũ) Kᵀ
//! ```
//!
//! Updates fire at most once per cycle and only when one of two triggers
//! is met: the previous cycle's prediction missed the measurement by more
//! than a threshold (deviation), or the sheet stopped moving between
//! cycles (stagnation).

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::KoopmanModel;

/// Thresholds of the two update triggers, in millimetres.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptTriggers {
    /// Fires when max |measured − predicted| exceeds this.
    pub deviation_threshold_mm: f64,
    /// Fires when max |x_k − x_{k−1}| falls below this.
    pub stagnation_threshold_mm: f64,
}

impl Default for AdaptTriggers {
    fn default() -> Self {
        AdaptTriggers { deviation_threshold_mm: 3.0, stagnation_threshold_mm: 3.0 }
    }
}

impl AdaptTriggers {
    pub fn validate(&self) -> Result<()> {
        if !(self.deviation_threshold_mm > 0.0 && self.stagnation_threshold_mm > 0.0) {
            return Err(Error::argument("adaptation trigger thresholds must be positive"));
        }
        Ok(())
    }
}

/// Full adaptation configuration: triggers plus the estimator constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptConfig {
    pub triggers: AdaptTriggers,
    /// Forgetting factor λ ∈ (0, 1]; 1 weights all cycles equally.
    pub forgetting: f64,
    /// Initial covariance scale: P₀ = scale · I.
    pub initial_covariance: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            triggers: AdaptTriggers::default(),
            forgetting: 0.9,
            initial_covariance: 0.001,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.triggers.validate()?;
        if !(self.forgetting > 0.0 && self.forgetting <= 1.0) {
            return Err(Error::argument("forgetting factor must lie in (0, 1]"));
        }
        if self.initial_covariance.is_nan() || self.initial_covariance <= 0.0 {
            return Err(Error::argument("initial covariance scale must be positive"));
        }
        Ok(())
    }
}

/// Which trigger fired, with the measured quantity that fired it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "trigger", rename_all = "snake_case")]
pub enum UpdateReason {
    Deviation { max_error_mm: f64 },
    Stagnation { max_change_mm: f64 },
}

impl std::fmt::Display for UpdateReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            UpdateReason::Deviation { max_error_mm } => {
                write!(f, "deviation: prediction missed by {max_error_mm:.3} mm")
            }
            UpdateReason::Stagnation { max_change_mm } => {
                write!(f, "stagnation: sheet moved only {max_change_mm:.3} mm")
            }
        }
    }
}

/// Decide whether to update `B` after a cycle. `measured` is the snapshot
/// just taken, `predicted` the previous solve's one-step prediction of it
/// (both in reconstructed snapshot space), `previous_measured` the snapshot
/// one cycle earlier. Deviation takes precedence when both conditions hold.
pub fn should_update(
    measured: &[f64],
    predicted: &[f64],
    previous_measured: &[f64],
    triggers: &AdaptTriggers,
) -> Result<Option<UpdateReason>> {
    triggers.validate()?;
    if measured.len() != predicted.len() || measured.len() != previous_measured.len() {
        return Err(Error::argument(format!(
            "snapshot lengths disagree: measured {}, predicted {}, previous {}",
            measured.len(),
            predicted.len(),
            previous_measured.len()
        )));
    }
    if measured.is_empty() {
        return Err(Error::argument("snapshots must be non-empty"));
    }
    let max_error = measured
        .iter()
        .zip(predicted)
        .map(|(m, p)| (m - p).abs())
        .fold(0.0_f64, f64::max);
    if max_error > triggers.deviation_threshold_mm {
        return Ok(Some(UpdateReason::Deviation { max_error_mm: max_error }));
    }
    let max_change = measured
        .iter()
        .zip(previous_measured)
        .map(|(m, p)| (m - p).abs())
        .fold(0.0_f64, f64::max);
    if max_change < triggers.stagnation_threshold_mm {
        return Ok(Some(UpdateReason::Stagnation { max_change_mm: max_change }));
    }
    Ok(None)
}

/// Lifted one-step residual `e = z*_{k+1} − A z_k`: the part of the
/// measured transition the fixed state dynamics cannot explain.
pub fn residual(
    model: &KoopmanModel,
    z_now: &Array1<f64>,
    z_next_measured: &Array1<f64>,
) -> Result<Array1<f64>> {
    let d_z = model.dims.lifted_dim();
    if z_now.len() != d_z || z_next_measured.len() != d_z {
        return Err(Error::argument(format!(
            "lifted states have lengths {} and {}, expected {d_z}",
            z_now.len(),
            z_next_measured.len()
        )));
    }
    Ok(z_next_measured - &model.a.dot(z_now))
}

/// Covariance state of the recursive estimator.
#[derive(Debug, Clone, PartialEq)]
pub struct RlsState {
    p: Array2<f64>,
    forgetting: f64,
    update_count: usize,
}

impl RlsState {
    /// Fresh state with `P₀ = initial_covariance · I` over `input_dim`
    /// toolpath coefficients.
    pub fn new(input_dim: usize, forgetting: f64, initial_covariance: f64) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::argument("input dimension must be positive"));
        }
        if !(forgetting > 0.0 && forgetting <= 1.0) {
            return Err(Error::argument("forgetting factor must lie in (0, 1]"));
        }
        if !(initial_covariance > 0.0 && initial_covariance.is_finite()) {
            return Err(Error::argument("initial covariance scale must be positive"));
        }
        Ok(RlsState {
            p: Array2::eye(input_dim) * initial_covariance,
            forgetting,
            update_count: 0,
        })
    }

    pub fn covariance(&self) -> &Array2<f64> {
        &self.p
    }

    pub fn forgetting(&self) -> f64 {
        self.forgetting
    }

    pub fn update_count(&self) -> usize {
        self.update_count
    }

    /// One recursive step on a raw input map. Returns the gain vector `K`
    /// (useful for diagnostics); the increment applied to `b` is the outer
    /// product `(e − Bũ) Kᵀ`, rank one by construction.
    pub fn update_matrix(
        &mut self,
        b: &mut Array2<f64>,
        e: &ArrayView1<f64>,
        u: &ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        let p_dim = self.p.nrows();
        if u.len() != p_dim {
            return Err(Error::argument(format!(
                "input has length {}, covariance is {p_dim}x{p_dim}",
                u.len()
            )));
        }
        if b.ncols() != p_dim || b.nrows() != e.len() {
            return Err(Error::argument(format!(
                "input map is {}x{}, expected {}x{p_dim}",
                b.nrows(),
                b.ncols(),
                e.len()
            )));
        }
        if e.iter().chain(u.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numerical("adaptation inputs contain non-finite values"));
        }
        let pu = self.p.dot(u);
        let denom = self.forgetting + u.dot(&pu);
        let k = &pu / denom;
        // P ← (P − (Pũ)(Pũ)ᵀ/denom)/λ, then re-symmetrize to keep the
        // positive-definite invariant through rounding.
        let outer = outer_product(&pu.view(), &pu.view());
        self.p = (&self.p - &(outer / denom)) / self.forgetting;
        self.p = (&self.p + &self.p.t()) / 2.0;
        let innovation = e.to_owned() - b.dot(u);
        *b += &outer_product(&innovation.view(), &k.view());
        self.update_count += 1;
        Ok(k)
    }

    /// One recursive step on a model's input map; `A`, the networks, and
    /// the statistics are never touched.
    pub fn update_model(
        &mut self,
        model: &mut KoopmanModel,
        e: &Array1<f64>,
        u: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        if e.len() != model.dims.lifted_dim() {
            return Err(Error::argument(format!(
                "residual has length {}, lifted dimension is {}",
                e.len(),
                model.dims.lifted_dim()
            )));
        }
        let mut b = std::mem::take(&mut model.b);
        let out = self.update_matrix(&mut b, &e.view(), &u.view());
        model.b = b;
        out
    }
}

fn outer_product(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    let am = a.view().insert_axis(ndarray::Axis(1));
    let bm = b.view().insert_axis(ndarray::Axis(0));
    am.to_owned().dot(&bm.to_owned())
}

/// One entry of the change report: which lifted coordinate's coupling to
/// which toolpath coefficient moved, and by how much.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BIncrementEntry {
    pub lifted_index: usize,
    pub input_index: usize,
    pub change: f64,
}

/// Elementwise difference of an input map across an update, plus its
/// largest-magnitude entries for interpretability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BIncrementReport {
    pub delta: Array2<f64>,
    pub top: Vec<BIncrementEntry>,
}

pub fn b_increment_report(
    b_before: &Array2<f64>,
    b_after: &Array2<f64>,
    top_k: usize,
) -> Result<BIncrementReport> {
    if b_before.dim() != b_after.dim() {
        return Err(Error::argument(format!(
            "input map shapes disagree: {:?} vs {:?}",
            b_before.dim(),
            b_after.dim()
        )));
    }
    let delta = b_after - b_before;
    let mut entries: Vec<BIncrementEntry> = delta
        .indexed_iter()
        .map(|((i, j), &v)| BIncrementEntry { lifted_index: i, input_index: j, change: v })
        .collect();
    entries.sort_by(|a, b| {
        b.change
            .abs()
            .partial_cmp(&a.change.abs())
            .expect("finite changes")
            .then(a.lifted_index.cmp(&b.lifted_index))
            .then(a.input_index.cmp(&b.input_index))
    });
    entries.truncate(top_k);
    Ok(BIncrementReport { delta, top: entries })
}
