//! Dimension reduction for states and inputs.
//!
//! States (deformation snapshots) are reduced with proper orthogonal
//! decomposition: the leading left singular vectors of the snapshot matrix.
//! Inputs (toolpaths on a fixed station grid) are reduced by least-squares
//! projection onto Chebyshev polynomials of the first kind, evaluated on the
//! station grid mapped affinely onto [-1, 1].
//!
//! Both bases serialize into one JSON document whose SHA-256 fingerprint ties
//! downstream artifacts (surrogate model, controller) to the exact bases they
//! were built against.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::Episode;
use crate::error::{Error, Result};
use crate::linalg;

/// Orthonormal POD modes with the full singular spectrum of the snapshot
/// matrix they were fitted on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PodBasis {
    /// `n_x x r` matrix whose columns are the retained modes.
    pub modes: Array2<f64>,
    /// All `min(n_x, m)` singular values of the snapshot matrix, descending.
    pub singular_values: Vec<f64>,
    /// Snapshot mean, present only when fitted with mean subtraction.
    pub mean: Option<Array1<f64>>,
}

impl PodBasis {
    pub fn state_dim(&self) -> usize {
        self.modes.nrows()
    }

    pub fn mode_count(&self) -> usize {
        self.modes.ncols()
    }

    /// Reduced coordinates of a snapshot: `Phi^T (x - mean)`.
    pub fn project(&self, x: &ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.state_dim() {
            return Err(Error::argument(format!(
                "snapshot length {} does not match basis state dimension {}",
                x.len(),
                self.state_dim()
            )));
        }
        let centered = match &self.mean {
            Some(m) => x.to_owned() - m,
            None => x.to_owned(),
        };
        Ok(self.modes.t().dot(&centered))
    }

    /// Back-projection into snapshot space: `Phi x_tilde + mean`.
    pub fn reconstruct(&self, x_reduced: &ArrayView1<f64>) -> Result<Array1<f64>> {
        if x_reduced.len() != self.mode_count() {
            return Err(Error::argument(format!(
                "reduced state length {} does not match mode count {}",
                x_reduced.len(),
                self.mode_count()
            )));
        }
        let mut x = self.modes.dot(x_reduced);
        if let Some(m) = &self.mean {
            x += m;
        }
        Ok(x)
    }

    /// Fraction of squared-singular-value energy captured by the leading `r`
    /// modes of the fitted spectrum.
    pub fn energy_fraction(&self, r: usize) -> Result<f64> {
        if r == 0 || r > self.singular_values.len() {
            return Err(Error::argument(format!(
                "energy fraction requested for r = {r}, spectrum has {} values",
                self.singular_values.len()
            )));
        }
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        if total == 0.0 {
            return Err(Error::numerical("snapshot matrix has zero energy"));
        }
        let lead: f64 = self.singular_values[..r].iter().map(|s| s * s).sum();
        Ok(lead / total)
    }
}

/// Fit a POD basis on a snapshot matrix (columns are snapshots).
///
/// Mean subtraction is off by default in this pipeline: the all-zero flat
/// blank is the natural origin of the deformation space, and centering would
/// shift it.
pub fn fit_pod(snapshots: &Array2<f64>, r: usize, subtract_mean: bool) -> Result<PodBasis> {
    let (n_x, m) = snapshots.dim();
    if r == 0 || r > n_x.min(m) {
        return Err(Error::argument(format!(
            "mode count r = {r} out of range for a {n_x} x {m} snapshot matrix"
        )));
    }
    let (work, mean) = if subtract_mean {
        let mean = snapshots.sum_axis(ndarray::Axis(1)) / m as f64;
        let mut centered = snapshots.clone();
        for mut col in centered.columns_mut() {
            col -= &mean;
        }
        (centered, Some(mean))
    } else {
        (snapshots.clone(), None)
    };
    let svd = linalg::jacobi_svd(&work)?;
    let modes = svd.u.slice(ndarray::s![.., ..r]).to_owned();
    Ok(PodBasis {
        modes,
        singular_values: svd.sigma,
        mean,
    })
}

/// Chebyshev polynomial of the first kind, `T_degree(x)`, by the three-term
/// recurrence `T_0 = 1`, `T_1 = x`, `T_{i+1} = 2 x T_i - T_{i-1}`.
pub fn chebyshev_value(degree: usize, x: f64) -> f64 {
    match degree {
        0 => 1.0,
        1 => x,
        _ => {
            let mut prev = 1.0;
            let mut cur = x;
            for _ in 1..degree {
                let next = 2.0 * x * cur - prev;
                prev = cur;
                cur = next;
            }
            cur
        }
    }
}

/// Chebyshev design basis on a fixed station grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChebyshevBasis {
    /// Station y-positions in mm; the first and last station are the span
    /// endpoints and map to x = -1 and x = +1.
    pub y_grid: Vec<f64>,
    /// Number of polynomial columns (degrees `0..degree_count`).
    pub degree_count: usize,
    /// `n_u x degree_count` design matrix, column `i` holding `T_i` sampled
    /// on the mapped grid.
    pub design: Array2<f64>,
}

impl ChebyshevBasis {
    pub fn new(y_grid: Vec<f64>, degree_count: usize) -> Result<Self> {
        if y_grid.len() < 2 {
            return Err(Error::argument("station grid needs at least two points"));
        }
        if degree_count == 0 || degree_count > y_grid.len() {
            return Err(Error::argument(format!(
                "degree count {degree_count} out of range for {} stations",
                y_grid.len()
            )));
        }
        let (lo, hi) = (y_grid[0], y_grid[y_grid.len() - 1]);
        if y_grid.iter().any(|v| !v.is_finite()) || y_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::argument("station grid must be strictly increasing"));
        }
        let n_u = y_grid.len();
        let mut design = Array2::<f64>::zeros((n_u, degree_count));
        for (row, &y) in y_grid.iter().enumerate() {
            let x = 2.0 * (y - lo) / (hi - lo) - 1.0;
            for deg in 0..degree_count {
                design[[row, deg]] = chebyshev_value(deg, x);
            }
        }
        Ok(ChebyshevBasis { y_grid, degree_count, design })
    }

    pub fn station_count(&self) -> usize {
        self.y_grid.len()
    }

    /// Least-squares Chebyshev coefficients of a toolpath sampled on the
    /// station grid (normal equations; the design is a tall, well-conditioned
    /// matrix for the small degree counts used here).
    pub fn fit(&self, u: &ArrayView1<f64>) -> Result<Array1<f64>> {
        if u.len() != self.station_count() {
            return Err(Error::argument(format!(
                "toolpath length {} does not match {} stations",
                u.len(),
                self.station_count()
            )));
        }
        let gram = self.design.t().dot(&self.design);
        let rhs = self.design.t().dot(u);
        linalg::cholesky_solve(&gram, &rhs)
    }

    /// Evaluate a coefficient vector back onto the station grid.
    pub fn reconstruct(&self, coeffs: &ArrayView1<f64>) -> Result<Array1<f64>> {
        if coeffs.len() != self.degree_count {
            return Err(Error::argument(format!(
                "coefficient length {} does not match degree count {}",
                coeffs.len(),
                self.degree_count
            )));
        }
        Ok(self.design.dot(coeffs))
    }

    /// Polynomial values at the left endpoint of the span (x = -1), one per
    /// degree: `T_i(-1) = (-1)^i`. This is the constraint row pinning a
    /// toolpath's start.
    pub fn endpoint_row_start(&self) -> Array1<f64> {
        Array1::from_shape_fn(self.degree_count, |i| if i % 2 == 0 { 1.0 } else { -1.0 })
    }

    /// Polynomial values at the right endpoint (x = +1): `T_i(1) = 1`.
    pub fn endpoint_row_end(&self) -> Array1<f64> {
        Array1::ones(self.degree_count)
    }
}

/// The pair of bases every downstream artifact depends on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReductionBases {
    pub pod: PodBasis,
    pub chebyshev: ChebyshevBasis,
}

impl ReductionBases {
    /// SHA-256 over the canonical JSON serialization; stable across
    /// re-serialization because field order and float formatting are fixed.
    pub fn fingerprint(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        Ok(hex_string(&hasher.finalize()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            Error::argument(format!("cannot read bases file {}: {e}", path.display()))
        })?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// An episode expressed in reduced coordinates: `x` is `r x (N+1)`, `u` is
/// `p x N`.
#[derive(Debug, Clone)]
pub struct ReducedEpisode {
    pub id: String,
    pub x: Array2<f64>,
    pub u: Array2<f64>,
}

/// Project a full episode through both bases.
pub fn reduce_episode(bases: &ReductionBases, episode: &Episode) -> Result<ReducedEpisode> {
    episode.validate()?;
    let r = bases.pod.mode_count();
    let p = bases.chebyshev.degree_count;
    let n = episode.cycles();
    let mut x = Array2::<f64>::zeros((r, n + 1));
    let mut u = Array2::<f64>::zeros((p, n));
    for (k, snap) in episode.snapshots.iter().enumerate() {
        let xr = bases.pod.project(&ArrayView1::from(&snap.values[..]))?;
        x.column_mut(k).assign(&xr);
    }
    for (k, tp) in episode.toolpaths.iter().enumerate() {
        let ur = bases.chebyshev.fit(&ArrayView1::from(&tp.values[..]))?;
        u.column_mut(k).assign(&ur);
    }
    Ok(ReducedEpisode { id: episode.id.clone(), x, u })
}
