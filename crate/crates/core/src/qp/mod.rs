//! Sparse convex quadratic programming by operator splitting (ADMM).
//!
//! Problems have the form
//!
//! ```text
//! minimize   ½ xᵀP x + qᵀx
//! subject to l ≤ C x ≤ u        (equality rows encoded as l = u)
//! ```
//!
//! with `P` symmetric positive semidefinite. The solver follows the
//! well-known splitting scheme: each iteration solves one quasi-definite
//! KKT system
//!
//! ```text
//! [ P + σI   Cᵀ       ] [x̃]   [σx − q ]
//! [ C       −diag(1/ρ)] [ν] = [z − y/ρ]
//! ```
//!
//! whose sparse LDLᵀ factorization is computed once and reused across
//! iterations (and across resolves when only `q`, `l`, `u` change), followed
//! by over-relaxed projection and dual updates. Ruiz equilibration scales
//! the problem first; a penalty parameter per constraint row (stiffer on
//! equality rows) is adapted from the residual ratio at a fixed cadence.
//! Solutions satisfy the KKT conditions `‖Px + q + Cᵀy‖∞ ≤ tol` and
//! `‖Cx − Π_{[l,u]}(Cx)‖∞ ≤ tol`; the multiplier sign convention follows
//! from that stationarity identity (negative at active lower bounds,
//! positive at active upper bounds). Primal/dual infeasibility is certified
//! from the one-step displacement rays, and an optional active-set polish
//! step (off by default) refines solutions to near machine precision.

// Sparse kernels here walk CSC index ranges and several parallel arrays
// (values, row indices, bounds, scales) in lockstep; explicit indices read
// better than the zipped iterator chains clippy would prefer.
#![allow(clippy::needless_range_loop)]

pub mod condense;
pub mod ldl;
pub mod sparse;

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use self::ldl::{rcm_ordering, LdlFactor};
use self::sparse::CscMatrix;

/// A sparse convex QP instance. `P` is stored full (both triangles) and must
/// be symmetric within 1e-12.
#[derive(Debug, Clone)]
pub struct QpProblem {
    p: CscMatrix,
    q: Vec<f64>,
    c: CscMatrix,
    l: Vec<f64>,
    u: Vec<f64>,
}

impl QpProblem {
    pub fn new(p: CscMatrix, q: Vec<f64>, c: CscMatrix, l: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        let n = q.len();
        let m = l.len();
        if n == 0 {
            return Err(Error::argument("a QP needs at least one variable"));
        }
        if p.nrows() != n || p.ncols() != n {
            return Err(Error::argument(format!(
                "cost matrix is {}x{}, expected {n}x{n}",
                p.nrows(),
                p.ncols()
            )));
        }
        if c.ncols() != n || c.nrows() != m || u.len() != m {
            return Err(Error::argument(format!(
                "constraint matrix is {}x{} with {} lower / {} upper bounds",
                c.nrows(),
                c.ncols(),
                l.len(),
                u.len()
            )));
        }
        if !p.is_symmetric(1e-12) {
            return Err(Error::argument("cost matrix must be symmetric within 1e-12"));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("linear cost must be finite"));
        }
        for i in 0..m {
            if l[i].is_nan() || u[i].is_nan() || l[i] > u[i] {
                return Err(Error::argument(format!(
                    "bounds of row {i} violate l ≤ u: [{}, {}]",
                    l[i], u[i]
                )));
            }
        }
        Ok(QpProblem { p, q, c, l, u })
    }

    pub fn num_variables(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.l.len()
    }

    pub fn cost_matrix(&self) -> &CscMatrix {
        &self.p
    }

    pub fn linear_cost(&self) -> &[f64] {
        &self.q
    }

    pub fn constraint_matrix(&self) -> &CscMatrix {
        &self.c
    }

    pub fn lower(&self) -> &[f64] {
        &self.l
    }

    pub fn upper(&self) -> &[f64] {
        &self.u
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let px = self.p.mul_vec(x);
        0.5 * dot(&px, x) + dot(&self.q, x)
    }

    /// Plain-text dump (dimensions, then `P` and `C` as `row col value`
    /// triplets, then `q`, `l`, `u`) for offline debugging.
    pub fn dump_triplets(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "# qp n={} m={}", self.num_variables(), self.num_constraints())?;
        writeln!(w, "# P")?;
        self.p.dump_triplets(w)?;
        writeln!(w, "# C")?;
        self.c.dump_triplets(w)?;
        writeln!(w, "# q l u")?;
        for (i, v) in self.q.iter().enumerate() {
            writeln!(w, "q {i} {v:.17e}")?;
        }
        for i in 0..self.num_constraints() {
            writeln!(w, "b {i} {:.17e} {:.17e}", self.l[i], self.u[i])?;
        }
        Ok(())
    }
}

/// Solver parameters. Defaults follow common practice for this solver
/// family; tolerances are absolute/relative infinity norms on the KKT
/// residuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpSettings {
    pub eps_abs: f64,
    pub eps_rel: f64,
    /// Tolerance of the primal/dual infeasibility certificates.
    pub eps_infeasible: f64,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation coefficient in (0, 2).
    pub alpha_relax: f64,
    pub max_iter: usize,
    /// Termination/infeasibility checks run every this many iterations.
    pub check_interval: usize,
    /// Penalty rebalancing cadence (0 disables adaptation).
    pub adaptive_rho_interval: usize,
    /// Ruiz equilibration passes.
    pub scaling_iters: usize,
    /// Active-set refinement of solved problems (off by default).
    pub polish: bool,
    pub polish_delta: f64,
    pub polish_refine_iters: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            eps_abs: 1e-5,
            eps_rel: 1e-5,
            eps_infeasible: 1e-6,
            rho: 0.1,
            sigma: 1e-6,
            alpha_relax: 1.6,
            max_iter: 20_000,
            check_interval: 25,
            adaptive_rho_interval: 50,
            scaling_iters: 10,
            polish: false,
            polish_delta: 1e-6,
            polish_refine_iters: 3,
        }
    }
}

impl QpSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_abs > 0.0 && self.eps_rel >= 0.0 && self.eps_infeasible > 0.0) {
            return Err(Error::argument("tolerances must be positive"));
        }
        if !(self.rho > 0.0 && self.sigma > 0.0) {
            return Err(Error::argument("rho and sigma must be positive"));
        }
        if !(self.alpha_relax > 0.0 && self.alpha_relax < 2.0) {
            return Err(Error::argument("relaxation must lie in (0, 2)"));
        }
        if self.max_iter == 0 || self.check_interval == 0 {
            return Err(Error::argument("iteration limits must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Solved,
    MaxIterations,
    PrimalInfeasible,
    DualInfeasible,
}

impl std::fmt::Display for QpStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            QpStatus::Solved => "solved",
            QpStatus::MaxIterations => "max_iterations",
            QpStatus::PrimalInfeasible => "primal_infeasible",
            QpStatus::DualInfeasible => "dual_infeasible",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: Vec<f64>,
    pub dual: Vec<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    /// Wall-clock seconds; diagnostic only, excluded from serialized
    /// artifacts so runs stay byte-reproducible.
    pub solve_time: f64,
    /// Whether the polish step ran and was accepted.
    pub polished: bool,
}

/// Independent KKT residuals of a candidate primal/dual pair on the raw
/// problem data: (‖Cx − Π_{[l,u]}(Cx)‖∞, ‖Px + q + Cᵀy‖∞).
pub fn kkt_residuals(problem: &QpProblem, x: &[f64], y: &[f64]) -> (f64, f64) {
    let cx = problem.c.mul_vec(x);
    let mut prim = 0.0_f64;
    for i in 0..cx.len() {
        let proj = cx[i].clamp(problem.l[i], problem.u[i]);
        prim = prim.max((cx[i] - proj).abs());
    }
    let mut grad = problem.p.mul_vec(x);
    for (g, qv) in grad.iter_mut().zip(&problem.q) {
        *g += qv;
    }
    problem.c.axpy_transpose(y, &mut grad, 1.0);
    let dual = grad.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    (prim, dual)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

const MIN_SCALE: f64 = 1e-4;
const MAX_SCALE: f64 = 1e4;
const RHO_MIN: f64 = 1e-6;
const RHO_MAX: f64 = 1e6;
const RHO_EQUALITY_FACTOR: f64 = 1e3;

fn limit_scale(s: f64) -> f64 {
    if s == 0.0 { 1.0 } else { s.clamp(MIN_SCALE, MAX_SCALE) }
}

/// Permuted KKT matrix with slot maps for in-place value refreshes.
struct KktSystem {
    perm: Vec<usize>,
    upper: CscMatrix,
    diag_rho_pos: Vec<usize>,
    c_pos: Vec<usize>,
    factor: LdlFactor,
    work: Vec<f64>,
}

impl KktSystem {
    fn build(p: &CscMatrix, c: &CscMatrix, sigma: f64, rho_vec: &[f64]) -> Result<Self> {
        let n = p.ncols();
        let m = c.nrows();
        let nm = n + m;

        // Assemble slots in original coordinates: x-diagonal, strict upper
        // of P, C entries (in CSC order), penalty diagonal.
        let mut slots: Vec<(usize, usize, f64)> = Vec::new();
        let mut p_diag = vec![0.0; n];
        for col in 0..n {
            for k in p.col_ptr()[col]..p.col_ptr()[col + 1] {
                let row = p.row_idx()[k];
                if row == col {
                    p_diag[col] = p.values()[k];
                } else if row < col {
                    slots.push((row, col, p.values()[k]));
                }
            }
        }
        let p_off_count = slots.len();
        for j in 0..n {
            slots.push((j, j, p_diag[j] + sigma));
        }
        let c_slot_start = slots.len();
        for col in 0..n {
            for k in c.col_ptr()[col]..c.col_ptr()[col + 1] {
                slots.push((col, n + c.row_idx()[k], c.values()[k]));
            }
        }
        let rho_slot_start = slots.len();
        for i in 0..m {
            slots.push((n + i, n + i, -1.0 / rho_vec[i]));
        }

        let edges: Vec<(usize, usize)> = slots[..p_off_count]
            .iter()
            .chain(&slots[c_slot_start..rho_slot_start])
            .map(|&(r, c, _)| (r, c))
            .collect();
        let perm = rcm_ordering(nm, &edges);
        let mut iperm = vec![0usize; nm];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }

        // Permute slots into the upper triangle of the reordered matrix and
        // build the CSC arrays directly, remembering where each slot landed.
        let permuted: Vec<(usize, usize)> = slots
            .iter()
            .map(|&(r, c, _)| {
                let (pr, pc) = (iperm[r], iperm[c]);
                (pr.min(pc), pr.max(pc))
            })
            .collect();
        let mut order: Vec<usize> = (0..slots.len()).collect();
        order.sort_by_key(|&k| (permuted[k].1, permuted[k].0));
        let mut col_ptr = vec![0usize; nm + 1];
        let mut row_idx = Vec::with_capacity(slots.len());
        let mut values = Vec::with_capacity(slots.len());
        let mut pos_of = vec![0usize; slots.len()];
        for (pos, &k) in order.iter().enumerate() {
            pos_of[k] = pos;
            col_ptr[permuted[k].1 + 1] += 1;
            row_idx.push(permuted[k].0);
            values.push(slots[k].2);
        }
        for c in 0..nm {
            col_ptr[c + 1] += col_ptr[c];
        }
        let upper = CscMatrix::from_parts(nm, nm, col_ptr, row_idx, values)?;

        let c_pos = pos_of[c_slot_start..rho_slot_start].to_vec();
        let diag_rho_pos = pos_of[rho_slot_start..].to_vec();

        let mut factor = LdlFactor::symbolic(&upper)?;
        factor.factor(&upper)?;
        let kkt = KktSystem { perm, upper, diag_rho_pos, c_pos, factor, work: vec![0.0; nm] };
        kkt.check_inertia(m)?;
        Ok(kkt)
    }

    fn check_inertia(&self, m: usize) -> Result<()> {
        if self.factor.negative_pivots() != m {
            return Err(Error::numerical(
                "cost matrix is not positive semidefinite (KKT inertia mismatch)",
            ));
        }
        Ok(())
    }

    fn set_rho(&mut self, rho_vec: &[f64]) -> Result<()> {
        let vals = self.upper.values_mut();
        for (i, &pos) in self.diag_rho_pos.iter().enumerate() {
            vals[pos] = -1.0 / rho_vec[i];
        }
        self.factor.factor(&self.upper)?;
        self.check_inertia(rho_vec.len())
    }

    fn set_constraint_values(&mut self, c_values: &[f64], rho_len: usize) -> Result<()> {
        let vals = self.upper.values_mut();
        for (k, &pos) in self.c_pos.iter().enumerate() {
            vals[pos] = c_values[k];
        }
        self.factor.factor(&self.upper)?;
        self.check_inertia(rho_len)
    }

    fn solve(&mut self, rhs: &mut [f64]) {
        for (new, &old) in self.perm.iter().enumerate() {
            self.work[new] = rhs[old];
        }
        self.factor.solve_in_place(&mut self.work);
        for (new, &old) in self.perm.iter().enumerate() {
            rhs[old] = self.work[new];
        }
    }
}

/// Reusable solver instance: scaling, factorization, and iterates persist,
/// so repeated solves after `update_*` calls warm-start from the previous
/// solution and reuse the factorization whenever the matrices are untouched.
pub struct QpSolver {
    orig: QpProblem,
    settings: QpSettings,
    n: usize,
    m: usize,
    // Scaled data.
    p: CscMatrix,
    q: Vec<f64>,
    c: CscMatrix,
    l: Vec<f64>,
    u: Vec<f64>,
    d_scale: Vec<f64>,
    e_scale: Vec<f64>,
    gamma: f64,
    rho: f64,
    rho_vec: Vec<f64>,
    rho_inv: Vec<f64>,
    eq_row: Vec<bool>,
    kkt: KktSystem,
    // Scaled iterates.
    x: Vec<f64>,
    z: Vec<f64>,
    y: Vec<f64>,
}

struct ResidualInfo {
    r_prim: f64,
    r_dual: f64,
    eps_prim: f64,
    eps_dual: f64,
    rel_prim: f64,
    rel_dual: f64,
}

impl QpSolver {
    pub fn new(problem: QpProblem, settings: QpSettings) -> Result<Self> {
        settings.validate()?;
        let n = problem.num_variables();
        let m = problem.num_constraints();

        // Ruiz equilibration on [[P, Cᵀ], [C, 0]] plus cost normalization.
        let mut p = problem.p.clone();
        let mut q = problem.q.clone();
        let mut c = problem.c.clone();
        let mut l = problem.l.clone();
        let mut u = problem.u.clone();
        let mut d_scale = vec![1.0; n];
        let mut e_scale = vec![1.0; m];
        let mut gamma = 1.0;
        let mut col_p = vec![0.0; n];
        let mut col_c = vec![0.0; n];
        let mut row_c = vec![0.0; m];
        for _ in 0..settings.scaling_iters {
            p.col_inf_norms(&mut col_p);
            c.col_inf_norms(&mut col_c);
            row_c.iter_mut().for_each(|v| *v = 0.0);
            c.accumulate_row_inf_norms(&mut row_c);
            let dx: Vec<f64> = (0..n)
                .map(|j| 1.0 / limit_scale(col_p[j].max(col_c[j])).sqrt())
                .collect();
            let dr: Vec<f64> = (0..m).map(|i| 1.0 / limit_scale(row_c[i]).sqrt()).collect();
            p.scale(Some(&dx), Some(&dx));
            c.scale(Some(&dr), Some(&dx));
            for j in 0..n {
                q[j] *= dx[j];
                d_scale[j] *= dx[j];
            }
            for i in 0..m {
                l[i] *= dr[i];
                u[i] *= dr[i];
                e_scale[i] *= dr[i];
            }
            // Cost normalization.
            p.col_inf_norms(&mut col_p);
            let mean_p = if n > 0 { col_p.iter().sum::<f64>() / n as f64 } else { 0.0 };
            let g_step = 1.0 / limit_scale(mean_p.max(inf_norm(&q)));
            gamma *= g_step;
            p.scale_all(g_step);
            q.iter_mut().for_each(|v| *v *= g_step);
        }

        let eq_row: Vec<bool> = (0..m).map(|i| problem.l[i] == problem.u[i]).collect();
        let rho = settings.rho;
        let rho_vec: Vec<f64> = eq_row
            .iter()
            .map(|&eq| {
                if eq {
                    (rho * RHO_EQUALITY_FACTOR).clamp(RHO_MIN, RHO_MAX)
                } else {
                    rho.clamp(RHO_MIN, RHO_MAX)
                }
            })
            .collect();
        let rho_inv: Vec<f64> = rho_vec.iter().map(|r| 1.0 / r).collect();

        let kkt = KktSystem::build(&p, &c, settings.sigma, &rho_vec)?;
        Ok(QpSolver {
            orig: problem,
            settings,
            n,
            m,
            p,
            q,
            c,
            l,
            u,
            d_scale,
            e_scale,
            gamma,
            rho,
            rho_vec,
            rho_inv,
            eq_row,
            kkt,
            x: vec![0.0; n],
            z: vec![0.0; m],
            y: vec![0.0; m],
        })
    }

    pub fn problem(&self) -> &QpProblem {
        &self.orig
    }

    /// Seed the iterates with an unscaled primal/dual guess.
    pub fn warm_start(&mut self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != self.n || y.len() != self.m {
            return Err(Error::argument("warm start dimensions do not match the problem"));
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::argument("warm start must be finite"));
        }
        for j in 0..self.n {
            self.x[j] = x[j] / self.d_scale[j];
        }
        for i in 0..self.m {
            self.y[i] = y[i] * self.gamma / self.e_scale[i];
        }
        let cx = self.c.mul_vec(&self.x);
        for i in 0..self.m {
            self.z[i] = cx[i].clamp(self.l[i], self.u[i]);
        }
        Ok(())
    }

    /// Replace the linear cost; the factorization is reused as-is.
    pub fn update_linear_cost(&mut self, q: &[f64]) -> Result<()> {
        if q.len() != self.n {
            return Err(Error::argument("linear cost has the wrong length"));
        }
        if q.iter().any(|v| !v.is_finite()) {
            return Err(Error::argument("linear cost must be finite"));
        }
        self.orig.q.copy_from_slice(q);
        for j in 0..self.n {
            self.q[j] = q[j] * self.d_scale[j] * self.gamma;
        }
        Ok(())
    }

    /// Replace the bounds. Refactorizes only if a row switches between
    /// equality and inequality (the penalty grouping changes).
    pub fn update_bounds(&mut self, l: &[f64], u: &[f64]) -> Result<()> {
        if l.len() != self.m || u.len() != self.m {
            return Err(Error::argument("bounds have the wrong length"));
        }
        for i in 0..self.m {
            if l[i].is_nan() || u[i].is_nan() || l[i] > u[i] {
                return Err(Error::argument(format!(
                    "bounds of row {i} violate l ≤ u: [{}, {}]",
                    l[i], u[i]
                )));
            }
        }
        self.orig.l.copy_from_slice(l);
        self.orig.u.copy_from_slice(u);
        let mut regroup = false;
        for i in 0..self.m {
            self.l[i] = l[i] * self.e_scale[i];
            self.u[i] = u[i] * self.e_scale[i];
            let eq = l[i] == u[i];
            if eq != self.eq_row[i] {
                self.eq_row[i] = eq;
                regroup = true;
            }
        }
        if regroup {
            self.rebuild_rho_vec()?;
        }
        Ok(())
    }

    /// Replace the numeric values of the constraint matrix (same sparsity
    /// pattern, e.g. after an online update of the model's input map) and
    /// refactorize.
    pub fn update_constraint_values(&mut self, c_values: &[f64]) -> Result<()> {
        if c_values.len() != self.orig.c.nnz() {
            return Err(Error::argument(format!(
                "expected {} constraint values, got {}",
                self.orig.c.nnz(),
                c_values.len()
            )));
        }
        self.orig.c.set_values(c_values)?;
        // Re-apply the existing scaling to the new values.
        let mut scaled = c_values.to_vec();
        let col_ptr = self.orig.c.col_ptr().to_vec();
        let row_idx = self.orig.c.row_idx().to_vec();
        for col in 0..self.n {
            for k in col_ptr[col]..col_ptr[col + 1] {
                scaled[k] *= self.e_scale[row_idx[k]] * self.d_scale[col];
            }
        }
        self.c.set_values(&scaled)?;
        self.kkt.set_constraint_values(&scaled, self.m)
    }

    fn rebuild_rho_vec(&mut self) -> Result<()> {
        for i in 0..self.m {
            let base = if self.eq_row[i] { self.rho * RHO_EQUALITY_FACTOR } else { self.rho };
            self.rho_vec[i] = base.clamp(RHO_MIN, RHO_MAX);
            self.rho_inv[i] = 1.0 / self.rho_vec[i];
        }
        self.kkt.set_rho(&self.rho_vec)
    }

    fn residuals(&self) -> ResidualInfo {
        let cx = self.c.mul_vec(&self.x);
        let px = self.p.mul_vec(&self.x);
        let cty = self.c.mul_vec_transpose(&self.y);
        let mut r_prim = 0.0_f64;
        let mut n_ax = 0.0_f64;
        let mut n_z = 0.0_f64;
        for i in 0..self.m {
            let ax_u = cx[i] / self.e_scale[i];
            let z_u = self.z[i] / self.e_scale[i];
            r_prim = r_prim.max((ax_u - z_u).abs());
            n_ax = n_ax.max(ax_u.abs());
            n_z = n_z.max(z_u.abs());
        }
        let mut r_dual = 0.0_f64;
        let mut n_px = 0.0_f64;
        let mut n_cty = 0.0_f64;
        let mut n_q = 0.0_f64;
        let ginv = 1.0 / self.gamma;
        for j in 0..self.n {
            let s = ginv / self.d_scale[j];
            let px_u = px[j] * s;
            let cty_u = cty[j] * s;
            let q_u = self.q[j] * s;
            r_dual = r_dual.max((px_u + cty_u + q_u).abs());
            n_px = n_px.max(px_u.abs());
            n_cty = n_cty.max(cty_u.abs());
            n_q = n_q.max(q_u.abs());
        }
        let rel_prim = n_ax.max(n_z);
        let rel_dual = n_px.max(n_cty).max(n_q);
        ResidualInfo {
            r_prim,
            r_dual,
            eps_prim: self.settings.eps_abs + self.settings.eps_rel * rel_prim,
            eps_dual: self.settings.eps_abs + self.settings.eps_rel * rel_dual,
            rel_prim,
            rel_dual,
        }
    }

    fn is_primal_infeasible(&self, dy_scaled: &[f64]) -> bool {
        let eps = self.settings.eps_infeasible;
        // Unscale the dual displacement ray.
        let dy: Vec<f64> =
            (0..self.m).map(|i| dy_scaled[i] * self.e_scale[i] / self.gamma).collect();
        let nrm = inf_norm(&dy);
        if nrm <= 0.0 {
            return false;
        }
        let ct_dy = self.orig.c.mul_vec_transpose(&dy);
        if inf_norm(&ct_dy) > eps * nrm {
            return false;
        }
        let mut support = 0.0;
        for i in 0..self.m {
            if dy[i] > 0.0 {
                if self.orig.u[i].is_infinite() {
                    return false;
                }
                support += self.orig.u[i] * dy[i];
            } else if dy[i] < 0.0 {
                if self.orig.l[i].is_infinite() {
                    return false;
                }
                support += self.orig.l[i] * dy[i];
            }
        }
        support <= -eps * nrm
    }

    fn is_dual_infeasible(&self, dx_scaled: &[f64]) -> bool {
        let eps = self.settings.eps_infeasible;
        let dx: Vec<f64> = (0..self.n).map(|j| dx_scaled[j] * self.d_scale[j]).collect();
        let nrm = inf_norm(&dx);
        if nrm <= 0.0 {
            return false;
        }
        if dot(&self.orig.q, &dx) > -eps * nrm {
            return false;
        }
        if inf_norm(&self.orig.p.mul_vec(&dx)) > eps * nrm {
            return false;
        }
        let c_dx = self.orig.c.mul_vec(&dx);
        for i in 0..self.m {
            // A feasible ray must not increase rows with a finite upper
            // bound nor decrease rows with a finite lower bound.
            let lo_ok = self.orig.l[i].is_infinite() || c_dx[i] >= -eps * nrm;
            let hi_ok = self.orig.u[i].is_infinite() || c_dx[i] <= eps * nrm;
            if !(lo_ok && hi_ok) {
                return false;
            }
        }
        true
    }

    fn maybe_adapt_rho(&mut self, info: &ResidualInfo) -> Result<()> {
        let tiny = 1e-30;
        let num = info.r_prim / info.rel_prim.max(tiny);
        let den = info.r_dual / info.rel_dual.max(tiny);
        let candidate = (self.rho * (num / den.max(tiny)).sqrt()).clamp(RHO_MIN, RHO_MAX);
        if candidate > 5.0 * self.rho || candidate < 0.2 * self.rho {
            self.rho = candidate;
            self.rebuild_rho_vec()?;
        }
        Ok(())
    }

    /// Run the iteration from the current (warm) state.
    pub fn solve(&mut self) -> Result<QpSolution> {
        let start = Instant::now();
        let (n, m) = (self.n, self.m);
        let alpha = self.settings.alpha_relax;
        let sigma = self.settings.sigma;
        let mut rhs = vec![0.0; n + m];
        let mut dx = vec![0.0; n];
        let mut dy = vec![0.0; m];
        let mut status = QpStatus::MaxIterations;
        let mut iterations = self.settings.max_iter;

        for iter in 1..=self.settings.max_iter {
            for j in 0..n {
                rhs[j] = sigma * self.x[j] - self.q[j];
                dx[j] = self.x[j];
            }
            for i in 0..m {
                rhs[n + i] = self.z[i] - self.rho_inv[i] * self.y[i];
                dy[i] = self.y[i];
            }
            self.kkt.solve(&mut rhs);
            for j in 0..n {
                self.x[j] = alpha * rhs[j] + (1.0 - alpha) * self.x[j];
                dx[j] = self.x[j] - dx[j];
            }
            for i in 0..m {
                let z_tilde = self.z[i] + self.rho_inv[i] * (rhs[n + i] - self.y[i]);
                let w = alpha * z_tilde + (1.0 - alpha) * self.z[i];
                let z_new = (w + self.rho_inv[i] * self.y[i]).clamp(self.l[i], self.u[i]);
                self.y[i] += self.rho_vec[i] * (w - z_new);
                dy[i] = self.y[i] - dy[i];
                self.z[i] = z_new;
            }

            if iter % self.settings.check_interval == 0 || iter == self.settings.max_iter {
                if self.x.iter().any(|v| !v.is_finite()) || self.y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::numerical("QP iterates diverged to non-finite values"));
                }
                let info = self.residuals();
                if info.r_prim <= info.eps_prim && info.r_dual <= info.eps_dual {
                    status = QpStatus::Solved;
                    iterations = iter;
                    break;
                }
                if self.is_primal_infeasible(&dy) {
                    status = QpStatus::PrimalInfeasible;
                    iterations = iter;
                    break;
                }
                if self.is_dual_infeasible(&dx) {
                    status = QpStatus::DualInfeasible;
                    iterations = iter;
                    break;
                }
                if self.settings.adaptive_rho_interval > 0
                    && iter % self.settings.adaptive_rho_interval == 0
                {
                    self.maybe_adapt_rho(&info)?;
                }
            }
        }

        // Unscale and report.
        let mut x_out: Vec<f64> = (0..n).map(|j| self.x[j] * self.d_scale[j]).collect();
        let mut y_out: Vec<f64> =
            (0..m).map(|i| self.y[i] * self.e_scale[i] / self.gamma).collect();
        let (mut r_prim, mut r_dual) = kkt_residuals(&self.orig, &x_out, &y_out);
        let mut polished = false;
        if status == QpStatus::Solved && self.settings.polish {
            if let Some((xp, yp, rp, rd)) = self.polish(&y_out, r_prim.max(r_dual)) {
                x_out = xp;
                y_out = yp;
                r_prim = rp;
                r_dual = rd;
                polished = true;
            }
        }
        Ok(QpSolution {
            x: x_out,
            dual: y_out,
            status,
            primal_residual: r_prim,
            dual_residual: r_dual,
            iterations,
            solve_time: start.elapsed().as_secs_f64(),
            polished,
        })
    }

    /// Active-set refinement: re-solve the equality-constrained QP defined
    /// by the constraints the duals mark active, with slight regularization
    /// and iterative refinement, and keep the result if the independent KKT
    /// residuals do not get worse.
    fn polish(&self, y: &[f64], admm_residual: f64) -> Option<(Vec<f64>, Vec<f64>, f64, f64)> {
        let delta = self.settings.polish_delta;
        let orig = &self.orig;
        let n = self.n;
        let mut active: Vec<(usize, f64)> = Vec::new();
        for i in 0..self.m {
            if y[i] < 0.0 && orig.l[i].is_finite() {
                active.push((i, orig.l[i]));
            } else if y[i] > 0.0 && orig.u[i].is_finite() {
                active.push((i, orig.u[i]));
            } else if orig.l[i] == orig.u[i] {
                active.push((i, orig.l[i]));
            }
        }
        let ma = active.len();
        let mut row_of = vec![usize::MAX; self.m];
        for (k, &(i, _)) in active.iter().enumerate() {
            row_of[i] = k;
        }

        // G = active rows of C, as triplets gathered column-wise.
        let mut g_triplets: Vec<(usize, usize, f64)> = Vec::new();
        let cp = orig.c.col_ptr();
        let ci = orig.c.row_idx();
        let cv = orig.c.values();
        for col in 0..n {
            for k in cp[col]..cp[col + 1] {
                let r = row_of[ci[k]];
                if r != usize::MAX {
                    g_triplets.push((r, col, cv[k]));
                }
            }
        }
        let g = CscMatrix::from_triplets(ma, n, &g_triplets).ok()?;

        // KKT = [[P + δI, Gᵀ], [G, −δI]] in upper-triangle form.
        let mut slots: Vec<(usize, usize, f64)> = Vec::new();
        let mut p_diag = vec![0.0; n];
        let pp = orig.p.col_ptr();
        let pi = orig.p.row_idx();
        let pv = orig.p.values();
        for col in 0..n {
            for k in pp[col]..pp[col + 1] {
                match pi[k].cmp(&col) {
                    std::cmp::Ordering::Less => slots.push((pi[k], col, pv[k])),
                    std::cmp::Ordering::Equal => p_diag[col] = pv[k],
                    std::cmp::Ordering::Greater => {}
                }
            }
        }
        for j in 0..n {
            slots.push((j, j, p_diag[j] + delta));
        }
        for &(r, col, v) in &g_triplets {
            slots.push((col, n + r, v));
        }
        for k in 0..ma {
            slots.push((n + k, n + k, -delta));
        }
        let edges: Vec<(usize, usize)> =
            slots.iter().filter(|&&(r, c, _)| r != c).map(|&(r, c, _)| (r, c)).collect();
        let perm = rcm_ordering(n + ma, &edges);
        let mut iperm = vec![0usize; n + ma];
        for (new, &old) in perm.iter().enumerate() {
            iperm[old] = new;
        }
        let permuted: Vec<(usize, usize, f64)> = slots
            .iter()
            .map(|&(r, c, v)| {
                let (pr, pc) = (iperm[r], iperm[c]);
                (pr.min(pc), pr.max(pc), v)
            })
            .collect();
        let kkt = CscMatrix::from_triplets(n + ma, n + ma, &permuted).ok()?;
        let mut factor = LdlFactor::symbolic(&kkt).ok()?;
        factor.factor(&kkt).ok()?;

        let solve = |factor: &LdlFactor, rhs: &[f64]| -> Vec<f64> {
            let mut work = vec![0.0; n + ma];
            for (new, &old) in perm.iter().enumerate() {
                work[new] = rhs[old];
            }
            factor.solve_in_place(&mut work);
            let mut out = vec![0.0; n + ma];
            for (new, &old) in perm.iter().enumerate() {
                out[old] = work[new];
            }
            out
        };

        let mut rhs = vec![0.0; n + ma];
        for j in 0..n {
            rhs[j] = -orig.q[j];
        }
        for (k, &(_, b)) in active.iter().enumerate() {
            rhs[n + k] = b;
        }
        let mut sol = solve(&factor, &rhs);
        // Iterative refinement against the unregularized KKT system.
        for _ in 0..self.settings.polish_refine_iters {
            let xs = &sol[..n];
            let nu = &sol[n..];
            let mut r = vec![0.0; n + ma];
            let px = orig.p.mul_vec(xs);
            let gt_nu = g.mul_vec_transpose(nu);
            for j in 0..n {
                r[j] = -orig.q[j] - px[j] - gt_nu[j];
            }
            let gx = g.mul_vec(xs);
            for k in 0..ma {
                r[n + k] = active[k].1 - gx[k];
            }
            let corr = solve(&factor, &r);
            for t in 0..n + ma {
                sol[t] += corr[t];
            }
        }

        let x_pol = sol[..n].to_vec();
        let mut y_pol = vec![0.0; self.m];
        for (k, &(i, _)) in active.iter().enumerate() {
            y_pol[i] = sol[n + k];
        }
        let (rp, rd) = kkt_residuals(orig, &x_pol, &y_pol);
        if rp.max(rd) <= admm_residual * (1.0 + 1e-9) {
            Some((x_pol, y_pol, rp, rd))
        } else {
            None
        }
    }
}

/// One-shot convenience: build a solver, run it cold, return the solution.
pub fn solve(problem: QpProblem, settings: &QpSettings) -> Result<QpSolution> {
    QpSolver::new(problem, settings.clone())?.solve()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn settings() -> QpSettings {
        QpSettings::default()
    }

    fn box_problem(p: &Array2<f64>, q: &[f64], l: &[f64], u: &[f64]) -> QpProblem {
        let n = q.len();
        QpProblem::new(
            CscMatrix::from_dense(p),
            q.to_vec(),
            CscMatrix::identity(n),
            l.to_vec(),
            u.to_vec(),
        )
        .unwrap()
    }

    /// Dense LU solve with partial pivoting (oracle helper).
    fn dense_solve(a: &Array2<f64>, b: &[f64]) -> Option<Vec<f64>> {
        let n = b.len();
        let mut m = a.clone();
        let mut x = b.to_vec();
        let mut piv: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut best = k;
            for r in k + 1..n {
                if m[[piv[r], k]].abs() > m[[piv[best], k]].abs() {
                    best = r;
                }
            }
            piv.swap(k, best);
            let d = m[[piv[k], k]];
            if d.abs() < 1e-10 {
                return None;
            }
            for r in k + 1..n {
                let f = m[[piv[r], k]] / d;
                if f == 0.0 {
                    continue;
                }
                for c in k..n {
                    m[[piv[r], c]] -= f * m[[piv[k], c]];
                }
                x[piv[r]] -= f * x[piv[k]];
            }
        }
        let mut out = vec![0.0; n];
        for k in (0..n).rev() {
            let mut acc = x[piv[k]];
            for c in k + 1..n {
                acc -= m[[piv[k], c]] * out[c];
            }
            out[k] = acc / m[[piv[k], k]];
        }
        Some(out)
    }

    /// Exhaustive active-set oracle for small dense QPs with general row
    /// constraints: every row is enumerated as inactive, at its lower bound,
    /// or at its upper bound; each candidate's KKT system is solved and
    /// checked for primal feasibility and dual signs.
    pub(crate) fn active_set_oracle(
        p: &Array2<f64>,
        q: &[f64],
        c: &Array2<f64>,
        l: &[f64],
        u: &[f64],
    ) -> Option<(Vec<f64>, f64)> {
        let n = q.len();
        let m = l.len();
        let tol = 1e-7;
        let mut best: Option<(Vec<f64>, f64)> = None;
        // Each row takes one of three states encoded in a base-3 counter.
        let total = 3usize.pow(m as u32);
        'outer: for code in 0..total {
            let mut state = Vec::with_capacity(m);
            let mut rem = code;
            for _ in 0..m {
                state.push(rem % 3);
                rem /= 3;
            }
            // Equality rows must be active; skip inconsistent assignments.
            let mut active: Vec<(usize, f64)> = Vec::new();
            for i in 0..m {
                match state[i] {
                    0 => {
                        if l[i] == u[i] {
                            continue 'outer;
                        }
                    }
                    1 => {
                        if !l[i].is_finite() {
                            continue 'outer;
                        }
                        active.push((i, l[i]));
                    }
                    _ => {
                        if !u[i].is_finite() {
                            continue 'outer;
                        }
                        if l[i] == u[i] {
                            continue 'outer; // same as state 1, avoid duplicates
                        }
                        active.push((i, u[i]));
                    }
                }
            }
            let ma = active.len();
            let dim = n + ma;
            let mut kkt = Array2::zeros((dim, dim));
            let mut rhs = vec![0.0; dim];
            for i in 0..n {
                for j in 0..n {
                    kkt[[i, j]] = p[[i, j]];
                }
                rhs[i] = -q[i];
            }
            for (k, &(row, b)) in active.iter().enumerate() {
                for j in 0..n {
                    kkt[[n + k, j]] = c[[row, j]];
                    kkt[[j, n + k]] = c[[row, j]];
                }
                rhs[n + k] = b;
            }
            let Some(sol) = dense_solve(&kkt, &rhs) else { continue };
            let x = &sol[..n];
            // Primal feasibility of inactive rows.
            for i in 0..m {
                if state[i] == 0 {
                    let cx: f64 = (0..n).map(|j| c[[i, j]] * x[j]).sum();
                    if cx < l[i] - tol || cx > u[i] + tol {
                        continue 'outer;
                    }
                }
            }
            // Dual sign conditions (y ≤ 0 at lower bounds, y ≥ 0 at upper).
            for (k, &(row, _)) in active.iter().enumerate() {
                if l[row] == u[row] {
                    continue;
                }
                let y = sol[n + k];
                if state[row] == 1 && y > tol {
                    continue 'outer;
                }
                if state[row] == 2 && y < -tol {
                    continue 'outer;
                }
            }
            let obj: f64 = {
                let mut acc = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        acc += 0.5 * x[i] * p[[i, j]] * x[j];
                    }
                    acc += q[i] * x[i];
                }
                acc
            };
            if best.as_ref().is_none_or(|(_, b)| obj < b - 1e-12) {
                best = Some((x.to_vec(), obj));
            }
        }
        best
    }

    #[test]
    fn projection_onto_a_single_bound() {
        // min ½x² subject to x ≥ 1. The multiplier satisfies
        // Px + q + Cᵀy = 0, so it is −1 at the active lower bound.
        let problem = box_problem(&array![[1.0]], &[0.0], &[1.0], &[f64::INFINITY]);
        let sol = solve(problem.clone(), &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.x[0] - 1.0).abs() < 1e-5, "x = {}", sol.x[0]);
        assert!((sol.dual[0] + 1.0).abs() < 1e-4, "dual = {}", sol.dual[0]);
        let (rp, rd) = kkt_residuals(&problem, &sol.x, &sol.dual);
        assert!(rp < 1e-5 && rd < 1e-5, "residuals {rp} {rd}");
    }

    #[test]
    fn symmetric_equality_constrained_qp() {
        // min ½‖x‖² subject to x₁+x₂ = 2 → (1, 1).
        let problem = QpProblem::new(
            CscMatrix::from_dense(&array![[1.0, 0.0], [0.0, 1.0]]),
            vec![0.0, 0.0],
            CscMatrix::from_dense(&array![[1.0, 1.0]]),
            vec![2.0],
            vec![2.0],
        )
        .unwrap();
        let sol = solve(problem, &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.x[0] - 1.0).abs() < 1e-5);
        assert!((sol.x[1] - 1.0).abs() < 1e-5);
    }

    fn random_box_qp(rng: &mut ChaCha8Rng, n: usize) -> (Array2<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let g = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        let mut p = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..n {
                    acc += g[[t, i]] * g[[t, j]];
                }
                p[[i, j]] = acc;
            }
            p[[i, i]] += 0.2;
        }
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..0.0)).collect();
        let u: Vec<f64> = l.iter().map(|lo| lo + rng.random_range(0.1..1.5)).collect();
        (p, q, l, u)
    }

    #[test]
    fn matches_the_active_set_oracle_on_random_box_qps() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..12 {
            let n = rng.random_range(2..6);
            let (p, q, l, u) = random_box_qp(&mut rng, n);
            let eye = Array2::from_shape_fn((n, n), |(i, j)| f64::from(u8::from(i == j)));
            let (x_oracle, obj_oracle) = active_set_oracle(&p, &q, &eye, &l, &u).unwrap();
            let problem = box_problem(&p, &q, &l, &u);
            let sol = solve(problem.clone(), &settings()).unwrap();
            assert_eq!(sol.status, QpStatus::Solved, "trial {trial}");
            for j in 0..n {
                assert!(
                    (sol.x[j] - x_oracle[j]).abs() < 1e-4,
                    "trial {trial} x[{j}]: {} vs oracle {}",
                    sol.x[j],
                    x_oracle[j]
                );
            }
            assert!(problem.objective(&sol.x) <= obj_oracle + 1e-6, "trial {trial} objective");
            let (rp, rd) = kkt_residuals(&problem, &sol.x, &sol.dual);
            assert!(rp < 1e-5 && rd < 1e-5, "trial {trial} residuals {rp} {rd}");
        }
    }

    #[test]
    fn solution_beats_random_feasible_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (p, q, l, u) = random_box_qp(&mut rng, 5);
        let problem = box_problem(&p, &q, &l, &u);
        let sol = solve(problem.clone(), &settings()).unwrap();
        let best = problem.objective(&sol.x);
        for _ in 0..100 {
            let x: Vec<f64> =
                (0..5).map(|j| rng.random_range(l[j]..=u[j])).collect();
            assert!(best <= problem.objective(&x) + 1e-9);
        }
    }

    #[test]
    fn argmin_is_invariant_to_cost_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (p, q, l, u) = random_box_qp(&mut rng, 4);
        let base = solve(box_problem(&p, &q, &l, &u), &settings()).unwrap();
        let scaled_p = p.mapv(|v| v * 37.5);
        let scaled_q: Vec<f64> = q.iter().map(|v| v * 37.5).collect();
        let scaled = solve(box_problem(&scaled_p, &scaled_q, &l, &u), &settings()).unwrap();
        for j in 0..4 {
            assert!(
                (base.x[j] - scaled.x[j]).abs() < 1e-6,
                "x[{j}]: {} vs {}",
                base.x[j],
                scaled.x[j]
            );
        }
    }

    #[test]
    fn detects_primal_infeasibility() {
        // x ≥ 1 and x ≤ 0 cannot hold together.
        let problem = QpProblem::new(
            CscMatrix::from_dense(&array![[1.0]]),
            vec![0.0],
            CscMatrix::from_dense(&array![[1.0], [1.0]]),
            vec![1.0, f64::NEG_INFINITY],
            vec![f64::INFINITY, 0.0],
        )
        .unwrap();
        let sol = solve(problem, &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::PrimalInfeasible);
    }

    #[test]
    fn detects_dual_infeasibility() {
        // min −x subject to x ≥ 0 is unbounded below.
        let problem = QpProblem::new(
            CscMatrix::from_triplets(1, 1, &[]).unwrap(),
            vec![-1.0],
            CscMatrix::from_dense(&array![[1.0]]),
            vec![0.0],
            vec![f64::INFINITY],
        )
        .unwrap();
        let sol = solve(problem, &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::DualInfeasible);
    }

    #[test]
    fn warm_start_and_vector_updates_reuse_the_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (p, q, l, u) = random_box_qp(&mut rng, 6);
        let problem = box_problem(&p, &q, &l, &u);
        let mut solver = QpSolver::new(problem.clone(), settings()).unwrap();
        let first = solver.solve().unwrap();
        assert_eq!(first.status, QpStatus::Solved);

        // Re-solving from the solution should converge almost immediately.
        let again = solver.solve().unwrap();
        assert!(
            again.iterations <= first.iterations,
            "warm resolve took {} vs {}",
            again.iterations,
            first.iterations
        );

        // Perturb the linear cost and bounds; compare to a fresh solver.
        let q2: Vec<f64> = q.iter().map(|v| v + 0.1).collect();
        let l2: Vec<f64> = l.iter().map(|v| v - 0.05).collect();
        solver.update_linear_cost(&q2).unwrap();
        solver.update_bounds(&l2, &u).unwrap();
        let updated = solver.solve().unwrap();
        let fresh = solve(box_problem(&p, &q2, &l2, &u), &settings()).unwrap();
        for j in 0..6 {
            assert!(
                (updated.x[j] - fresh.x[j]).abs() < 1e-4,
                "x[{j}] {} vs {}",
                updated.x[j],
                fresh.x[j]
            );
        }
    }

    #[test]
    fn constraint_value_updates_match_a_fresh_solve() {
        let p = array![[2.0, 0.0], [0.0, 2.0]];
        let c = array![[1.0, 1.0], [1.0, -1.0]];
        let problem = QpProblem::new(
            CscMatrix::from_dense(&p),
            vec![-1.0, -2.0],
            CscMatrix::from_dense(&c),
            vec![1.0, f64::NEG_INFINITY],
            vec![1.0, 0.5],
        )
        .unwrap();
        let mut solver = QpSolver::new(problem, settings()).unwrap();
        solver.solve().unwrap();
        // Same pattern, different values.
        let c2 = array![[2.0, 0.5], [0.5, -1.5]];
        let new_vals = CscMatrix::from_dense(&c2);
        solver.update_constraint_values(new_vals.values()).unwrap();
        let updated = solver.solve().unwrap();
        let fresh = solve(
            QpProblem::new(
                CscMatrix::from_dense(&p),
                vec![-1.0, -2.0],
                new_vals,
                vec![1.0, f64::NEG_INFINITY],
                vec![1.0, 0.5],
            )
            .unwrap(),
            &settings(),
        )
        .unwrap();
        assert_eq!(fresh.status, QpStatus::Solved);
        for j in 0..2 {
            assert!((updated.x[j] - fresh.x[j]).abs() < 1e-4);
        }
    }

    #[test]
    fn polish_refines_to_machine_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (p, q, l, u) = random_box_qp(&mut rng, 5);
        let problem = box_problem(&p, &q, &l, &u);
        let polished = solve(
            problem.clone(),
            &QpSettings { polish: true, ..settings() },
        )
        .unwrap();
        assert!(polished.polished, "polish should apply on a clean box QP");
        let (rp, rd) = kkt_residuals(&problem, &polished.x, &polished.dual);
        assert!(rp < 1e-9 && rd < 1e-9, "polished residuals {rp} {rd}");
    }

    #[test]
    fn rejects_indefinite_cost_matrices() {
        let problem = QpProblem::new(
            CscMatrix::from_dense(&array![[-1.0]]),
            vec![0.0],
            CscMatrix::from_dense(&array![[1.0]]),
            vec![0.0],
            vec![1.0],
        )
        .unwrap();
        let err = solve(problem, &settings()).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "got {err:?}");
    }

    #[test]
    fn validates_problem_shape_and_symmetry() {
        let p = CscMatrix::from_dense(&array![[1.0, 0.5], [0.0, 1.0]]);
        assert!(QpProblem::new(
            p,
            vec![0.0, 0.0],
            CscMatrix::identity(2),
            vec![0.0, 0.0],
            vec![1.0, 1.0]
        )
        .is_err());
        let p = CscMatrix::identity(2);
        assert!(QpProblem::new(
            p.clone(),
            vec![0.0, 0.0],
            CscMatrix::identity(2),
            vec![2.0, 0.0],
            vec![1.0, 1.0]
        )
        .is_err());
        assert!(QpProblem::new(p, vec![0.0], CscMatrix::identity(2), vec![0.0], vec![1.0])
            .is_err());
    }

    #[test]
    fn unconstrained_problems_solve_the_normal_equations() {
        let problem = QpProblem::new(
            CscMatrix::from_dense(&array![[2.0, 0.0], [0.0, 4.0]]),
            vec![-2.0, -4.0],
            CscMatrix::from_triplets(0, 2, &[]).unwrap(),
            vec![],
            vec![],
        )
        .unwrap();
        let sol = solve(problem, &settings()).unwrap();
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.x[0] - 1.0).abs() < 1e-5);
        assert!((sol.x[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    #[ignore = "timing probe, run manually"]
    fn timing_probe_default_mpc_size() {
        use super::condense::{condense, MpcQpData};
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let dz = 260;
        let p = 5;
        let mut a = Array2::from_shape_fn((dz, dz), |_| rng.random_range(-0.01..0.01));
        for i in 0..dz {
            a[[i, i]] += 0.95;
        }
        let b = Array2::from_shape_fn((dz, p), |_| rng.random_range(-0.02..0.02));
        let mut q_diag = vec![1.0; dz];
        q_diag[dz - 4] = 20.0;
        q_diag[dz - 3] = 10.0;
        q_diag[dz - 2] = 10.0;
        q_diag[dz - 1] = 1.0;
        let data = MpcQpData {
            a,
            b,
            q_n_diag: q_diag.iter().map(|v| 0.1 * v).collect(),
            q_diag,
            r_diag: vec![1e-5; p],
            z0: (0..dz).map(|_| rng.random_range(-0.5..0.5)).collect(),
            z_r: (0..dz).map(|_| rng.random_range(-0.5..0.5)).collect(),
            u_min: vec![-40.0; p],
            u_max: vec![40.0; p],
            c1: vec![1.0, -1.0, 1.0, -1.0, 1.0],
            c2: vec![1.0; p],
            horizon: 6,
            end_load_eps: 1e-6,
        };
        let t0 = std::time::Instant::now();
        let problem = condense(&data).unwrap();
        let t_condense = t0.elapsed();
        let t0 = std::time::Instant::now();
        let mut solver = QpSolver::new(
            problem,
            QpSettings { polish: true, rho: 1.0, ..QpSettings::default() },
        )
        .unwrap();
        let t_setup = t0.elapsed();
        let t0 = std::time::Instant::now();
        let sol = solver.solve().unwrap();
        let t_cold = t0.elapsed();
        let z0b: Vec<f64> = (0..dz).map(|_| rng.random_range(-0.5..0.5)).collect();
        let d2 = MpcQpData { z0: z0b, ..data };
        let (l, u) = d2.bounds();
        solver.update_bounds(&l, &u).unwrap();
        let t0 = std::time::Instant::now();
        let sol2 = solver.solve().unwrap();
        let t_warm = t0.elapsed();
        eprintln!(
            "condense {:?}  setup {:?}  cold {:?} ({} iters)  warm {:?} ({} iters)",
            t_condense, t_setup, t_cold, sol.iterations, t_warm, sol2.iterations
        );
        assert_eq!(sol.status, QpStatus::Solved);
        assert_eq!(sol2.status, QpStatus::Solved);
    }

    #[test]
    fn problem_dump_has_all_sections() {
        let problem = box_problem(&array![[1.0]], &[0.5], &[0.0], &[1.0]);
        let mut buf = Vec::new();
        problem.dump_triplets(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.contains("# qp n=1 m=1"));
        assert!(text.contains("# P"));
        assert!(text.contains("# C"));
        assert!(text.lines().any(|l| l.starts_with("q 0")));
        assert!(text.lines().any(|l| l.starts_with("b 0")));
    }
}
