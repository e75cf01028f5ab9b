//! Sparse LDLᵀ factorization of symmetric quasi-definite matrices, plus a
//! reverse Cuthill–McKee ordering to keep fill-in down on the stage-banded
//! KKT systems the MPC condensation produces.
//!
//! The factorization is the up-looking algorithm driven by the elimination
//! tree: a symbolic pass computes the tree and exact column counts of L, and
//! the numeric pass can then be repeated for any matrix with the same
//! pattern (the solver refactorizes this way when the penalty parameter
//! changes). No pivoting is performed — quasi-definite matrices admit an
//! LDLᵀ factorization under any symmetric permutation, with D carrying the
//! signs.

use crate::error::{Error, Result};

use super::sparse::CscMatrix;

const NONE: usize = usize::MAX;

/// Reverse Cuthill–McKee ordering of a symmetric sparsity pattern given by
/// upper-triangle triplets (diagonal entries are ignored). Returns `perm`
/// with `perm[new] = old`. Deterministic: ties break on vertex index.
pub fn rcm_ordering(n: usize, upper_edges: &[(usize, usize)]) -> Vec<usize> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(r, c) in upper_edges {
        if r != c {
            adj[r].push(c);
            adj[c].push(r);
        }
    }
    for list in &mut adj {
        list.sort_unstable();
        list.dedup();
    }
    let degree: Vec<usize> = adj.iter().map(Vec::len).collect();

    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let mut queue = std::collections::VecDeque::new();
    // Process every connected component, starting each from a minimum-degree
    // vertex (a cheap stand-in for a pseudo-peripheral start).
    let mut starts: Vec<usize> = (0..n).collect();
    starts.sort_by_key(|&v| (degree[v], v));
    for &s in &starts {
        if visited[s] {
            continue;
        }
        visited[s] = true;
        queue.push_back(s);
        while let Some(v) = queue.pop_front() {
            order.push(v);
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (degree[w], w));
            for w in next {
                visited[w] = true;
                queue.push_back(w);
            }
        }
    }
    order.reverse();
    order
}

/// Up-looking LDLᵀ factorization with reusable symbolic analysis.
pub struct LdlFactor {
    n: usize,
    parent: Vec<usize>,
    lp: Vec<usize>,
    li: Vec<usize>,
    lx: Vec<f64>,
    d: Vec<f64>,
    // Workspaces reused across numeric factorizations.
    lnz: Vec<usize>,
    flag: Vec<usize>,
    y: Vec<f64>,
    pattern: Vec<usize>,
    factored: bool,
}

impl LdlFactor {
    /// Symbolic analysis of a square matrix given by its upper triangle in
    /// CSC form. Computes the elimination tree and allocates L exactly.
    pub fn symbolic(a_upper: &CscMatrix) -> Result<Self> {
        let n = a_upper.ncols();
        if a_upper.nrows() != n {
            return Err(Error::argument("LDL factorization needs a square matrix"));
        }
        let ap = a_upper.col_ptr();
        let ai = a_upper.row_idx();
        let mut parent = vec![NONE; n];
        let mut flag = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        for k in 0..n {
            flag[k] = k;
            for p in ap[k]..ap[k + 1] {
                let mut i = ai[p];
                if i > k {
                    return Err(Error::argument(
                        "LDL factorization expects the upper triangle only",
                    ));
                }
                while i < k && flag[i] != k {
                    if parent[i] == NONE {
                        parent[i] = k;
                    }
                    lnz[i] += 1;
                    flag[i] = k;
                    i = parent[i];
                }
            }
        }
        let mut lp = vec![0usize; n + 1];
        for k in 0..n {
            lp[k + 1] = lp[k] + lnz[k];
        }
        let nnz_l = lp[n];
        Ok(LdlFactor {
            n,
            parent,
            lp,
            li: vec![0; nnz_l],
            lx: vec![0.0; nnz_l],
            d: vec![0.0; n],
            lnz,
            flag,
            y: vec![0.0; n],
            pattern: vec![0; n],
            factored: false,
        })
    }

    /// Numeric factorization. `a_upper` must have the same pattern that the
    /// symbolic pass saw; values are free to change.
    pub fn factor(&mut self, a_upper: &CscMatrix) -> Result<()> {
        let n = self.n;
        let ap = a_upper.col_ptr();
        let ai = a_upper.row_idx();
        let ax = a_upper.values();
        self.lnz.iter_mut().for_each(|v| *v = 0);
        for k in 0..n {
            // Scatter column k of A and collect the nonzero pattern of row k
            // of L as a stack of elimination-tree paths.
            let mut top = n;
            self.flag[k] = k;
            for p in ap[k]..ap[k + 1] {
                let mut i = ai[p];
                self.y[i] += ax[p];
                let mut len = 0;
                while i < k && self.flag[i] != k {
                    self.pattern[len] = i;
                    len += 1;
                    self.flag[i] = k;
                    i = self.parent[i];
                }
                while len > 0 {
                    len -= 1;
                    top -= 1;
                    self.pattern[top] = self.pattern[len];
                }
            }
            self.d[k] = self.y[k];
            self.y[k] = 0.0;
            // Sparse triangular solve along the pattern, topmost ancestor
            // last (the stack construction yields ascending etree order).
            for t in top..n {
                let i = self.pattern[t];
                let yi = self.y[i];
                self.y[i] = 0.0;
                let p2 = self.lp[i] + self.lnz[i];
                for p in self.lp[i]..p2 {
                    self.y[self.li[p]] -= self.lx[p] * yi;
                }
                let l_ki = yi / self.d[i];
                self.d[k] -= l_ki * yi;
                self.li[p2] = k;
                self.lx[p2] = l_ki;
                self.lnz[i] += 1;
            }
            if self.d[k] == 0.0 || !self.d[k].is_finite() {
                self.factored = false;
                return Err(Error::numerical(format!(
                    "LDL factorization broke down at pivot {k} (matrix is singular or badly scaled)"
                )));
            }
        }
        self.factored = true;
        Ok(())
    }

    /// Solve A x = b in place. Requires a successful `factor` call.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        debug_assert!(self.factored, "solve before factorization");
        debug_assert_eq!(b.len(), self.n);
        for j in 0..self.n {
            let bj = b[j];
            for p in self.lp[j]..self.lp[j + 1] {
                b[self.li[p]] -= self.lx[p] * bj;
            }
        }
        for j in 0..self.n {
            b[j] /= self.d[j];
        }
        for j in (0..self.n).rev() {
            let mut acc = b[j];
            for p in self.lp[j]..self.lp[j + 1] {
                acc -= self.lx[p] * b[self.li[p]];
            }
            b[j] = acc;
        }
    }

    /// Number of negative pivots in D. For a quasi-definite KKT matrix
    /// [[P+σI, Cᵀ], [C, −E]] this must equal the number of constraint rows;
    /// any other count certifies that P+σI is not positive definite.
    pub fn negative_pivots(&self) -> usize {
        debug_assert!(self.factored);
        self.d.iter().filter(|&&v| v < 0.0).count()
    }

    pub fn l_nnz(&self) -> usize {
        self.lp[self.n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Dense partial-pivoting LU solve, the oracle for factorization tests.
    fn dense_solve(a: &Array2<f64>, b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let mut m = a.clone();
        let mut x: Vec<f64> = b.to_vec();
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
            assert!(d.abs() > 1e-12, "oracle matrix singular");
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
        out
    }

    /// Random quasi-definite KKT matrix [[P+σI, Cᵀ], [C, −E]] as a dense
    /// array, with roughly half the C entries zero.
    fn random_kkt(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Array2<f64> {
        let mut k = Array2::zeros((n + m, n + m));
        // P = GᵀG + small diagonal.
        let g = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..n {
                    acc += g[[t, i]] * g[[t, j]];
                }
                k[[i, j]] = acc;
            }
            k[[i, i]] += 0.1;
        }
        for r in 0..m {
            for c in 0..n {
                if rng.random::<f64>() < 0.5 {
                    let v = rng.random_range(-1.0..1.0);
                    k[[n + r, c]] = v;
                    k[[c, n + r]] = v;
                }
            }
            k[[n + r, n + r]] = -rng.random_range(0.5..2.0);
        }
        k
    }

    fn factor_dense(k: &Array2<f64>) -> LdlFactor {
        let upper = CscMatrix::from_dense(k).upper_triangle();
        let mut f = LdlFactor::symbolic(&upper).unwrap();
        f.factor(&upper).unwrap();
        f
    }

    #[test]
    fn solves_match_a_dense_lu_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for trial in 0..20 {
            let n = rng.random_range(2..7);
            let m = rng.random_range(1..6);
            let k = random_kkt(&mut rng, n, m);
            let f = factor_dense(&k);
            let b: Vec<f64> = (0..n + m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut x = b.clone();
            f.solve_in_place(&mut x);
            let want = dense_solve(&k, &b);
            for i in 0..n + m {
                assert!(
                    (x[i] - want[i]).abs() < 1e-9,
                    "trial {trial} entry {i}: {} vs {}",
                    x[i],
                    want[i]
                );
            }
            assert_eq!(f.negative_pivots(), m, "trial {trial} inertia");
        }
    }

    #[test]
    fn refactorization_reuses_the_symbolic_analysis() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k1 = random_kkt(&mut rng, 5, 3);
        let upper1 = CscMatrix::from_dense(&k1).upper_triangle();
        let mut f = LdlFactor::symbolic(&upper1).unwrap();
        f.factor(&upper1).unwrap();
        // Same pattern, new values (scale everything).
        let k2 = k1.mapv(|v| v * 2.0);
        let upper2 = CscMatrix::from_dense(&k2).upper_triangle();
        f.factor(&upper2).unwrap();
        let b: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut x = b.clone();
        f.solve_in_place(&mut x);
        let want = dense_solve(&k2, &b);
        for i in 0..8 {
            assert!((x[i] - want[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn singular_matrices_are_reported() {
        let k = ndarray::array![[1.0, 1.0], [1.0, 1.0]];
        let upper = CscMatrix::from_dense(&k).upper_triangle();
        let mut f = LdlFactor::symbolic(&upper).unwrap();
        let err = f.factor(&upper).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "got {err:?}");
    }

    #[test]
    fn rejects_lower_triangle_input() {
        let full = CscMatrix::from_dense(&ndarray::array![[2.0, 0.0], [1.0, 3.0]]);
        assert!(LdlFactor::symbolic(&full).is_err());
    }

    #[test]
    fn rcm_is_a_permutation_and_shrinks_bandwidth() {
        // A path graph scrambled by a fixed shuffle: natural bandwidth is
        // huge, RCM should restore something close to 1.
        let n = 40;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut relabel: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        relabel.shuffle(&mut rng);
        let edges: Vec<(usize, usize)> = (0..n - 1)
            .map(|i| {
                let (a, b) = (relabel[i], relabel[i + 1]);
                (a.min(b), a.max(b))
            })
            .collect();
        let perm = rcm_ordering(n, &edges);
        let mut seen = vec![false; n];
        for &p in &perm {
            assert!(!seen[p], "duplicate vertex in ordering");
            seen[p] = true;
        }
        let mut inv = vec![0usize; n];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let bandwidth = edges
            .iter()
            .map(|&(a, b)| inv[a].abs_diff(inv[b]))
            .max()
            .unwrap();
        assert!(bandwidth <= 2, "RCM bandwidth {bandwidth} on a path graph");
        // Determinism.
        assert_eq!(perm, rcm_ordering(n, &edges));
    }

    #[test]
    fn rcm_handles_disconnected_graphs_and_isolated_vertices() {
        let perm = rcm_ordering(5, &[(0, 1), (3, 4)]);
        let mut sorted = perm.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }
}
