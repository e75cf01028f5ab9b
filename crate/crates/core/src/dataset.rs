//! Episode container and on-disk dataset format.
//!
//! An episode is one forming run: `N + 1` deformation snapshots interleaved
//! with the `N` toolpaths applied between them. Snapshot `k` is the state
//! *before* toolpath `k` is applied; snapshot 0 is the pre-forming reference
//! (all-zero for a flat blank).
//!
//! Datasets are stored as a flat CSV with a JSON metadata sidecar:
//!
//! ```text
//! episode_id,record_kind,cycle_index,v0,v1,...
//! ```
//!
//! where `record_kind` is `snapshot` (arity = number of trackers) or
//! `toolpath` (arity = number of stations). Values are written with six
//! significant decimal digits, which round-trips bit-exactly once a file has
//! been loaded and saved again.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deformation measured at the tracker positions after `cycle_index` cycles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub cycle_index: usize,
    /// Deflection in mm at each tracker position.
    pub values: Vec<f64>,
}

/// Commanded tool depth at the station positions for one cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Toolpath {
    pub cycle_index: usize,
    /// Commanded depth in mm at each station position.
    pub values: Vec<f64>,
}

/// One forming run: `N + 1` snapshots and the `N` toolpaths between them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub snapshots: Vec<Snapshot>,
    pub toolpaths: Vec<Toolpath>,
}

impl Episode {
    /// Number of applied cycles.
    pub fn cycles(&self) -> usize {
        self.toolpaths.len()
    }

    /// Check the snapshot/toolpath count relation and value finiteness.
    pub fn validate(&self) -> Result<()> {
        if self.snapshots.len() != self.toolpaths.len() + 1 {
            return Err(Error::argument(format!(
                "episode {}: {} snapshots but {} toolpaths (need snapshots = toolpaths + 1)",
                self.id,
                self.snapshots.len(),
                self.toolpaths.len()
            )));
        }
        for (k, s) in self.snapshots.iter().enumerate() {
            if s.cycle_index != k {
                return Err(Error::argument(format!(
                    "episode {}: snapshot {k} carries cycle_index {}",
                    self.id, s.cycle_index
                )));
            }
        }
        for (k, t) in self.toolpaths.iter().enumerate() {
            if t.cycle_index != k {
                return Err(Error::argument(format!(
                    "episode {}: toolpath {k} carries cycle_index {}",
                    self.id, t.cycle_index
                )));
            }
        }
        let finite = self
            .snapshots
            .iter()
            .flat_map(|s| s.values.iter())
            .chain(self.toolpaths.iter().flat_map(|t| t.values.iter()))
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::numerical(format!(
                "episode {}: non-finite value",
                self.id
            )));
        }
        Ok(())
    }
}

/// Sidecar metadata describing the geometry behind a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    /// Number of tracker positions (snapshot arity).
    pub tracker_count: usize,
    /// Number of station positions (toolpath arity).
    pub station_count: usize,
    /// Tracker y-positions along the sheet, mm.
    pub tracker_grid: Vec<f64>,
    /// Station y-positions along the toolpath span, mm.
    pub station_grid: Vec<f64>,
    /// Unit of every stored value.
    pub units: String,
    /// Free-form provenance note (generator, seed, drift setting, ...).
    pub provenance: String,
}

/// Transition triples flattened across episodes: column `c` of `x_now`,
/// `u_now`, `x_next` is one `(x_k, u_k, x_{k+1})` pair.
#[derive(Debug, Clone)]
pub struct ShiftedPair {
    pub x_now: Array2<f64>,
    pub x_next: Array2<f64>,
    pub u_now: Array2<f64>,
}

/// Path of the JSON sidecar belonging to a dataset CSV.
pub fn sidecar_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Six significant decimal digits; round-trips bit-exactly for values that
/// already carry at most that precision.
fn format_value(v: f64) -> String {
    format!("{v:.5e}")
}

/// Write episodes as CSV plus the JSON metadata sidecar.
pub fn save_episodes(path: &Path, episodes: &[Episode], meta: &DatasetMeta) -> Result<()> {
    let mut out = String::from("episode_id,record_kind,cycle_index\n");
    // The header names only the fixed columns; value arity is declared by the
    // sidecar and checked on load.
    for ep in episodes {
        ep.validate()?;
        for s in &ep.snapshots {
            if s.values.len() != meta.tracker_count {
                return Err(Error::argument(format!(
                    "episode {}: snapshot arity {} does not match metadata tracker_count {}",
                    ep.id,
                    s.values.len(),
                    meta.tracker_count
                )));
            }
            out.push_str(&format!("{},snapshot,{}", ep.id, s.cycle_index));
            for v in &s.values {
                out.push(',');
                out.push_str(&format_value(*v));
            }
            out.push('\n');
        }
        for t in &ep.toolpaths {
            if t.values.len() != meta.station_count {
                return Err(Error::argument(format!(
                    "episode {}: toolpath arity {} does not match metadata station_count {}",
                    ep.id,
                    t.values.len(),
                    meta.station_count
                )));
            }
            out.push_str(&format!("{},toolpath,{}", ep.id, t.cycle_index));
            for v in &t.values {
                out.push(',');
                out.push_str(&format_value(*v));
            }
            out.push('\n');
        }
    }
    fs::write(path, out)?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(meta)?)?;
    Ok(())
}

/// Load episodes and metadata from a CSV written by [`save_episodes`].
pub fn load_episodes(path: &Path) -> Result<(Vec<Episode>, DatasetMeta)> {
    let meta_path = sidecar_path(path);
    let meta: DatasetMeta = serde_json::from_slice(&fs::read(&meta_path).map_err(|e| {
        Error::argument(format!(
            "cannot read dataset sidecar {}: {e}",
            meta_path.display()
        ))
    })?)?;
    let text = fs::read_to_string(path)?;
    let path_str = path.display().to_string();

    let mut episodes: Vec<Episode> = Vec::new();
    let mut index_of: std::collections::HashMap<String, usize> = std::collections::HashMap::new();

    for (line_no, line) in text.lines().enumerate() {
        if line_no == 0 || line.trim().is_empty() {
            continue; // header
        }
        let row = line_no + 1; // 1-based, matching editor conventions
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::Schema {
                path: path_str.clone(),
                row,
                expected: 3,
                found: fields.len(),
            });
        }
        let id = fields[0].to_string();
        let kind = fields[1];
        let cycle_index: usize = fields[2].parse().map_err(|_| Error::Parse {
            path: path_str.clone(),
            row,
            message: format!("cycle_index `{}` is not an unsigned integer", fields[2]),
        })?;
        let expected = match kind {
            "snapshot" => meta.tracker_count,
            "toolpath" => meta.station_count,
            other => {
                return Err(Error::Parse {
                    path: path_str.clone(),
                    row,
                    message: format!("unknown record_kind `{other}`"),
                })
            }
        };
        let found = fields.len() - 3;
        if found != expected {
            return Err(Error::Schema {
                path: path_str.clone(),
                row,
                expected,
                found,
            });
        }
        let mut values = Vec::with_capacity(expected);
        for f in &fields[3..] {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                path: path_str.clone(),
                row,
                message: format!("value `{f}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path_str.clone(),
                    row,
                    message: format!("value `{f}` is not finite"),
                });
            }
            values.push(v);
        }
        let idx = *index_of.entry(id.clone()).or_insert_with(|| {
            episodes.push(Episode {
                id,
                snapshots: Vec::new(),
                toolpaths: Vec::new(),
            });
            episodes.len() - 1
        });
        match kind {
            "snapshot" => episodes[idx].snapshots.push(Snapshot { cycle_index, values }),
            _ => episodes[idx].toolpaths.push(Toolpath { cycle_index, values }),
        }
    }

    for ep in &mut episodes {
        ep.snapshots.sort_by_key(|s| s.cycle_index);
        ep.toolpaths.sort_by_key(|t| t.cycle_index);
        ep.validate()?;
    }
    Ok((episodes, meta))
}

/// Flatten episodes into transition triples. With `E` episodes of `N` cycles
/// each, the result has `E * N` columns.
pub fn to_shifted_pairs(episodes: &[Episode]) -> Result<ShiftedPair> {
    let mut cols = 0;
    for ep in episodes {
        ep.validate()?;
        cols += ep.cycles();
    }
    if cols == 0 {
        return Err(Error::argument("no transitions in dataset"));
    }
    let n_x = episodes[0].snapshots[0].values.len();
    let n_u = episodes[0].toolpaths[0].values.len();
    let mut x_now = Array2::<f64>::zeros((n_x, cols));
    let mut x_next = Array2::<f64>::zeros((n_x, cols));
    let mut u_now = Array2::<f64>::zeros((n_u, cols));
    let mut c = 0;
    for ep in episodes {
        for k in 0..ep.cycles() {
            for r in 0..n_x {
                x_now[[r, c]] = ep.snapshots[k].values[r];
                x_next[[r, c]] = ep.snapshots[k + 1].values[r];
            }
            for r in 0..n_u {
                u_now[[r, c]] = ep.toolpaths[k].values[r];
            }
            c += 1;
        }
    }
    Ok(ShiftedPair { x_now, x_next, u_now })
}

/// Deterministic train/validation split: shuffles episode indices with a
/// seeded generator and holds out the last `holdout` episodes.
pub fn split_train_validation(
    episodes: &[Episode],
    holdout: usize,
    seed: u64,
) -> Result<(Vec<Episode>, Vec<Episode>)> {
    if holdout == 0 || holdout >= episodes.len() {
        return Err(Error::argument(format!(
            "holdout {} out of range for {} episodes",
            holdout,
            episodes.len()
        )));
    }
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let split = episodes.len() - holdout;
    let train = order[..split].iter().map(|&i| episodes[i].clone()).collect();
    let validation = order[split..].iter().map(|&i| episodes[i].clone()).collect();
    Ok((train, validation))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn meta(n_x: usize, n_u: usize) -> DatasetMeta {
        DatasetMeta {
            tracker_count: n_x,
            station_count: n_u,
            tracker_grid: (0..n_x).map(|i| i as f64).collect(),
            station_grid: (0..n_u).map(|i| i as f64).collect(),
            units: "mm".to_string(),
            provenance: "test".to_string(),
        }
    }

    fn episode(id: &str, cycles: usize, n_x: usize, n_u: usize, scale: f64) -> Episode {
        let snapshots = (0..=cycles)
            .map(|k| Snapshot {
                cycle_index: k,
                values: (0..n_x).map(|i| scale * (k as f64) + i as f64 * 0.125).collect(),
            })
            .collect();
        let toolpaths = (0..cycles)
            .map(|k| Toolpath {
                cycle_index: k,
                values: (0..n_u).map(|i| -(i as f64) * 0.5 - k as f64).collect(),
            })
            .collect();
        Episode { id: id.to_string(), snapshots, toolpaths }
    }

    #[test]
    fn round_trip_is_bit_exact_after_first_load() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("episodes.csv");
        let eps = vec![episode("ep0", 3, 4, 5, 1.5), episode("ep1", 3, 4, 5, -0.75)];
        save_episodes(&path, &eps, &meta(4, 5)).unwrap();
        let (loaded, m) = load_episodes(&path).unwrap();
        assert_eq!(m.tracker_count, 4);
        // Save what was loaded and load again: values must be identical bits.
        let path2 = dir.path().join("episodes2.csv");
        save_episodes(&path2, &loaded, &m).unwrap();
        let (loaded2, _) = load_episodes(&path2).unwrap();
        assert_eq!(loaded, loaded2);
    }

    #[test]
    fn values_at_declared_precision_survive_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("episodes.csv");
        let mut ep = episode("ep0", 1, 2, 2, 0.0);
        ep.snapshots[1].values = vec![12.3456, -0.00123456];
        ep.toolpaths[0].values = vec![1.0, -250.0];
        save_episodes(&path, &[ep.clone()], &meta(2, 2)).unwrap();
        let (loaded, _) = load_episodes(&path).unwrap();
        assert_eq!(loaded[0], ep);
    }

    #[test]
    fn malformed_row_reports_position_and_arity() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("episodes.csv");
        save_episodes(&path, &[episode("ep0", 1, 3, 4, 1.0)], &meta(3, 4)).unwrap();
        // Truncate one value from the second data row.
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let truncated = lines[2].rsplit_once(',').unwrap().0.to_string();
        lines[2] = truncated;
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_episodes(&path) {
            Err(Error::Schema { row, expected, found, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(expected, 3);
                assert_eq!(found, 2);
            }
            other => panic!("expected schema error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_field_is_a_parse_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("episodes.csv");
        save_episodes(&path, &[episode("ep0", 1, 2, 2, 1.0)], &meta(2, 2)).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replace("1.25000e-1", "abc");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_episodes(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn shifted_pairs_have_one_column_per_transition() {
        let eps: Vec<Episode> = (0..4).map(|i| episode(&format!("e{i}"), 6, 3, 4, 1.0)).collect();
        let pairs = to_shifted_pairs(&eps).unwrap();
        assert_eq!(pairs.x_now.dim(), (3, 24));
        assert_eq!(pairs.x_next.dim(), (3, 24));
        assert_eq!(pairs.u_now.dim(), (4, 24));
        // Spot-check the pairing: column k of x_next equals snapshot k+1.
        assert_eq!(pairs.x_now[[0, 0]], eps[0].snapshots[0].values[0]);
        assert_eq!(pairs.x_next[[0, 0]], eps[0].snapshots[1].values[0]);
        assert_eq!(pairs.x_next[[0, 5]], eps[0].snapshots[6].values[0]);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let eps: Vec<Episode> = (0..10).map(|i| episode(&format!("e{i}"), 2, 2, 2, 1.0)).collect();
        let (tr1, va1) = split_train_validation(&eps, 3, 42).unwrap();
        let (tr2, va2) = split_train_validation(&eps, 3, 42).unwrap();
        assert_eq!(tr1.len(), 7);
        assert_eq!(va1.len(), 3);
        let ids = |v: &[Episode]| v.iter().map(|e| e.id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&tr1), ids(&tr2));
        assert_eq!(ids(&va1), ids(&va2));
        let mut all: Vec<String> = ids(&tr1).into_iter().chain(ids(&va1)).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10, "train and validation must not overlap");
        // A different seed produces a different shuffle.
        let (tr3, _) = split_train_validation(&eps, 3, 43).unwrap();
        assert_ne!(ids(&tr1), ids(&tr3));
    }

    #[test]
    fn mismatched_counts_fail_validation() {
        let mut ep = episode("bad", 2, 2, 2, 1.0);
        ep.snapshots.pop();
        assert!(ep.validate().is_err());
    }
}
