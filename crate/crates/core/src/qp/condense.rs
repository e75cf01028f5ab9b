//! Assembly of the condensed control QP.
//!
//! The controller optimizes over the stacked decision vector
//! `[z₁ … z_N; ũ₀ … ũ_{N−1}]` where `z_k` are lifted states and `ũ_k`
//! toolpath coefficient vectors. Constraint rows appear in this order:
//!
//! 1. lifted dynamics `z_{k+1} = A z_k + B ũ_k` as equalities (the first
//!    block carries the known initial state on its right-hand side),
//! 2. per-coefficient input boxes,
//! 3. one equality per stage pinning the toolpath to zero displacement at
//!    the clamped sheet edge (`c₁ᵀũ_k = 0`),
//! 4. one inequality per stage keeping the loaded edge strictly pressed
//!    down (`c₂ᵀũ_k ≤ −ε`).
//!
//! The quadratic cost is diagonal per block: `2Q` on intermediate states,
//! `2Q_N` on the terminal state, `2R` on every input; the linear term
//! `−2Q z_r` tracks the lifted reference. The cost contribution of the
//! known `z₀` is constant and dropped.

use ndarray::Array2;

use crate::error::{Error, Result};

use super::sparse::CscMatrix;
use super::QpProblem;

/// Everything needed to stack one instance of the control QP.
#[derive(Debug, Clone)]
pub struct MpcQpData {
    /// Lifted state transition, `d_z × d_z`.
    pub a: Array2<f64>,
    /// Lifted input map, `d_z × p`.
    pub b: Array2<f64>,
    /// Stage cost diagonal on lifted states.
    pub q_diag: Vec<f64>,
    /// Terminal cost diagonal.
    pub q_n_diag: Vec<f64>,
    /// Input cost diagonal.
    pub r_diag: Vec<f64>,
    /// Current lifted state.
    pub z0: Vec<f64>,
    /// Lifted reference to track.
    pub z_r: Vec<f64>,
    /// Per-coefficient input bounds.
    pub u_min: Vec<f64>,
    pub u_max: Vec<f64>,
    /// Coefficients of the clamped-edge equality `c₁ᵀũ_k = 0`.
    pub c1: Vec<f64>,
    /// Coefficients of the loaded-edge inequality `c₂ᵀũ_k ≤ −end_load_eps`.
    pub c2: Vec<f64>,
    /// Prediction horizon `N ≥ 1`.
    pub horizon: usize,
    /// Strictness margin of the loaded-edge inequality, in millimetres.
    pub end_load_eps: f64,
}

impl MpcQpData {
    pub fn state_dim(&self) -> usize {
        self.z0.len()
    }

    pub fn input_dim(&self) -> usize {
        self.u_min.len()
    }

    pub fn num_vars(&self) -> usize {
        self.horizon * (self.state_dim() + self.input_dim())
    }

    pub fn num_constraints(&self) -> usize {
        self.horizon * (self.state_dim() + self.input_dim() + 2)
    }

    /// Column offset of stage state `z_k`, `k ∈ 1..=N`.
    pub fn z_offset(&self, k: usize) -> usize {
        debug_assert!((1..=self.horizon).contains(&k));
        (k - 1) * self.state_dim()
    }

    /// Column offset of stage input `ũ_k`, `k ∈ 0..N`.
    pub fn u_offset(&self, k: usize) -> usize {
        debug_assert!(k < self.horizon);
        self.horizon * self.state_dim() + k * self.input_dim()
    }

    fn validate(&self) -> Result<()> {
        let dz = self.state_dim();
        let p = self.input_dim();
        if self.horizon == 0 {
            return Err(Error::argument("the horizon must be at least one stage"));
        }
        if dz == 0 || p == 0 {
            return Err(Error::argument("state and input dimensions must be positive"));
        }
        if self.a.dim() != (dz, dz) {
            return Err(Error::argument(format!(
                "transition matrix is {:?}, expected ({dz}, {dz})",
                self.a.dim()
            )));
        }
        if self.b.dim() != (dz, p) {
            return Err(Error::argument(format!(
                "input map is {:?}, expected ({dz}, {p})",
                self.b.dim()
            )));
        }
        for (name, v, want) in [
            ("stage cost diagonal", &self.q_diag, dz),
            ("terminal cost diagonal", &self.q_n_diag, dz),
            ("input cost diagonal", &self.r_diag, p),
            ("initial lifted state", &self.z0, dz),
            ("lifted reference", &self.z_r, dz),
            ("clamped-edge coefficients", &self.c1, p),
            ("loaded-edge coefficients", &self.c2, p),
        ] {
            if v.len() != want {
                return Err(Error::argument(format!(
                    "{name} has length {}, expected {want}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::argument(format!("{name} must be finite")));
            }
        }
        if self.a.iter().chain(self.b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::argument("model matrices must be finite"));
        }
        if self.q_diag.iter().chain(&self.q_n_diag).chain(&self.r_diag).any(|&v| v < 0.0) {
            return Err(Error::argument("cost diagonals must be nonnegative"));
        }
        // Input bounds may be infinite (an unbounded coefficient), never NaN.
        if self.u_min.len() != p || self.u_max.len() != p {
            return Err(Error::argument(format!(
                "input bounds have lengths {} and {}, expected {p}",
                self.u_min.len(),
                self.u_max.len()
            )));
        }
        for (lo, hi) in self.u_min.iter().zip(&self.u_max) {
            if lo.is_nan() || hi.is_nan() || lo > hi {
                return Err(Error::argument(format!(
                    "input bounds must satisfy u_min ≤ u_max, got [{lo}, {hi}]"
                )));
            }
        }
        if !(self.end_load_eps.is_finite() && self.end_load_eps >= 0.0) {
            return Err(Error::argument("the loaded-edge margin must be nonnegative"));
        }
        Ok(())
    }

    /// Linear cost `q` of the condensed QP (tracks the lifted reference).
    pub fn linear_cost(&self) -> Vec<f64> {
        let mut q = vec![0.0; self.num_vars()];
        for k in 1..=self.horizon {
            let diag = if k == self.horizon { &self.q_n_diag } else { &self.q_diag };
            let off = self.z_offset(k);
            for (i, &qv) in diag.iter().enumerate() {
                q[off + i] = -2.0 * qv * self.z_r[i];
            }
        }
        q
    }

    /// Row bounds `(l, u)` of the condensed QP; the first dynamics block
    /// carries `A z₀`.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let dz = self.state_dim();
        let p = self.input_dim();
        let m = self.num_constraints();
        let mut l = vec![0.0; m];
        let mut u = vec![0.0; m];
        for r in 0..dz {
            let mut az = 0.0;
            for c in 0..dz {
                az += self.a[[r, c]] * self.z0[c];
            }
            l[r] = az;
            u[r] = az;
        }
        let box_base = self.horizon * dz;
        for k in 0..self.horizon {
            for j in 0..p {
                l[box_base + k * p + j] = self.u_min[j];
                u[box_base + k * p + j] = self.u_max[j];
            }
        }
        let load_base = box_base + self.horizon * p + self.horizon;
        for k in 0..self.horizon {
            l[load_base + k] = f64::NEG_INFINITY;
            u[load_base + k] = -self.end_load_eps;
        }
        (l, u)
    }
}

/// Stack the condensed QP. Model entries are embedded as explicit values
/// even when zero, so the sparsity pattern depends only on the dimensions
/// and a solver built once can take refreshed values after online updates
/// of the input map.
pub fn condense(data: &MpcQpData) -> Result<QpProblem> {
    data.validate()?;
    let dz = data.state_dim();
    let p = data.input_dim();
    let stages = data.horizon;
    let n = data.num_vars();
    let m = data.num_constraints();

    let mut p_triplets = Vec::with_capacity(n);
    for k in 1..=stages {
        let diag = if k == stages { &data.q_n_diag } else { &data.q_diag };
        let off = data.z_offset(k);
        for (i, &qv) in diag.iter().enumerate() {
            p_triplets.push((off + i, off + i, 2.0 * qv));
        }
    }
    for k in 0..stages {
        let off = data.u_offset(k);
        for (j, &rv) in data.r_diag.iter().enumerate() {
            p_triplets.push((off + j, off + j, 2.0 * rv));
        }
    }
    let p_mat = CscMatrix::from_triplets(n, n, &p_triplets)?;

    let mut c_triplets =
        Vec::with_capacity(stages * dz * (dz + p + 1) + 3 * stages * p);
    for k in 0..stages {
        let row0 = k * dz;
        if k > 0 {
            let zoff = data.z_offset(k);
            for r in 0..dz {
                for c in 0..dz {
                    c_triplets.push((row0 + r, zoff + c, -data.a[[r, c]]));
                }
            }
        }
        let zoff_next = data.z_offset(k + 1);
        for r in 0..dz {
            c_triplets.push((row0 + r, zoff_next + r, 1.0));
        }
        let uoff = data.u_offset(k);
        for r in 0..dz {
            for j in 0..p {
                c_triplets.push((row0 + r, uoff + j, -data.b[[r, j]]));
            }
        }
    }
    let box_base = stages * dz;
    for k in 0..stages {
        let uoff = data.u_offset(k);
        for j in 0..p {
            c_triplets.push((box_base + k * p + j, uoff + j, 1.0));
        }
    }
    let pin_base = box_base + stages * p;
    let load_base = pin_base + stages;
    for k in 0..stages {
        let uoff = data.u_offset(k);
        for j in 0..p {
            c_triplets.push((pin_base + k, uoff + j, data.c1[j]));
            c_triplets.push((load_base + k, uoff + j, data.c2[j]));
        }
    }
    let c_mat = CscMatrix::from_triplets(m, n, &c_triplets)?;

    let (l, u) = data.bounds();
    QpProblem::new(p_mat, data.linear_cost(), c_mat, l, u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(rng: &mut ChaCha8Rng, dz: usize, p: usize, horizon: usize) -> MpcQpData {
        MpcQpData {
            a: Array2::from_shape_fn((dz, dz), |_| rng.random_range(-0.3..0.3)),
            b: Array2::from_shape_fn((dz, p), |_| rng.random_range(-0.5..0.5)),
            q_diag: (0..dz).map(|_| rng.random_range(0.1..2.0)).collect(),
            q_n_diag: (0..dz).map(|_| rng.random_range(0.1..2.0)).collect(),
            r_diag: (0..p).map(|_| rng.random_range(0.0..0.1)).collect(),
            z0: (0..dz).map(|_| rng.random_range(-1.0..1.0)).collect(),
            z_r: (0..dz).map(|_| rng.random_range(-1.0..1.0)).collect(),
            u_min: vec![-1.0; p],
            u_max: vec![1.0; p],
            c1: {
                let mut c = vec![0.0; p];
                for (j, v) in c.iter_mut().enumerate() {
                    *v = if j % 2 == 0 { 1.0 } else { -1.0 };
                }
                c
            },
            c2: vec![1.0; p],
            horizon,
            end_load_eps: 1e-6,
        }
    }

    #[test]
    fn stacked_dimensions_match_the_horizon() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let small = random_data(&mut rng, 3, 2, 4);
        let qp = condense(&small).unwrap();
        assert_eq!(qp.num_variables(), 4 * (3 + 2));
        assert_eq!(qp.num_constraints(), 4 * (3 + 2 + 2));

        // Default controller sizing: 260 lifted states, 5 coefficients,
        // horizon 6 → 1590 decision variables, 1602 rows.
        let full = random_data(&mut rng, 260, 5, 6);
        let qp = condense(&full).unwrap();
        assert_eq!(qp.num_variables(), 1590);
        assert_eq!(qp.num_constraints(), 1602);
    }

    #[test]
    fn feasible_rollouts_satisfy_every_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut data = random_data(&mut rng, 4, 3, 3);
        // c₁ = [1, −1, 1], c₂ = [1, 1, 1]: inputs of the form (a, a, 0)
        // with a < 0 satisfy the pin exactly and press the loaded edge down.
        data.c1 = vec![1.0, -1.0, 1.0];
        data.c2 = vec![1.0, 1.0, 1.0];
        let us: Vec<Vec<f64>> = (0..data.horizon)
            .map(|_| {
                let a = rng.random_range(-0.4..-0.1);
                vec![a, a, 0.0]
            })
            .collect();
        // Roll the dynamics to build the matching decision vector.
        let mut z = data.z0.clone();
        let mut x = vec![0.0; data.num_vars()];
        for (k, u) in us.iter().enumerate() {
            let mut z_next = vec![0.0; 4];
            for r in 0..4 {
                for c in 0..4 {
                    z_next[r] += data.a[[r, c]] * z[c];
                }
                for j in 0..3 {
                    z_next[r] += data.b[[r, j]] * u[j];
                }
            }
            x[data.z_offset(k + 1)..data.z_offset(k + 1) + 4].copy_from_slice(&z_next);
            x[data.u_offset(k)..data.u_offset(k) + 3].copy_from_slice(u);
            z = z_next;
        }
        let qp = condense(&data).unwrap();
        let cx = qp.constraint_matrix().mul_vec(&x);
        for i in 0..qp.num_constraints() {
            assert!(
                cx[i] >= qp.lower()[i] - 1e-12 && cx[i] <= qp.upper()[i] + 1e-12,
                "row {i}: {} outside [{}, {}]",
                cx[i],
                qp.lower()[i],
                qp.upper()[i]
            );
        }
        // Dynamics rows must hold exactly.
        for i in 0..data.horizon * 4 {
            assert!((cx[i] - qp.lower()[i]).abs() < 1e-12, "dynamics row {i}");
        }
    }

    #[test]
    fn objective_matches_the_stage_cost_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = random_data(&mut rng, 3, 2, 4);
        let qp = condense(&data).unwrap();

        let stage_cost = |x: &[f64]| -> f64 {
            let mut acc = 0.0;
            for k in 1..=data.horizon {
                let diag = if k == data.horizon { &data.q_n_diag } else { &data.q_diag };
                let off = data.z_offset(k);
                for (i, &qv) in diag.iter().enumerate() {
                    let d = x[off + i] - data.z_r[i];
                    acc += qv * d * d;
                }
            }
            for k in 0..data.horizon {
                let off = data.u_offset(k);
                for (j, &rv) in data.r_diag.iter().enumerate() {
                    acc += rv * x[off + j] * x[off + j];
                }
            }
            acc
        };

        // The condensed objective differs from the stage cost only by a
        // constant, so differences must agree.
        let x1: Vec<f64> = (0..qp.num_variables()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..qp.num_variables()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lhs = qp.objective(&x1) - qp.objective(&x2);
        let rhs = stage_cost(&x1) - stage_cost(&x2);
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn rejects_inconsistent_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let good = random_data(&mut rng, 3, 2, 2);
        assert!(condense(&good).is_ok());

        let mut bad = good.clone();
        bad.horizon = 0;
        assert!(condense(&bad).is_err());

        let mut bad = good.clone();
        bad.b = Array2::zeros((3, 3));
        assert!(condense(&bad).is_err());

        let mut bad = good.clone();
        bad.u_min = vec![2.0, 2.0];
        assert!(condense(&bad).is_err());

        let mut bad = good.clone();
        bad.z_r = vec![f64::NAN, 0.0, 0.0];
        assert!(condense(&bad).is_err());

        let mut bad = good.clone();
        bad.q_diag = vec![-1.0, 1.0, 1.0];
        assert!(condense(&bad).is_err());
    }
}
