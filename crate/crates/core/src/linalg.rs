//! Small dense linear-algebra kernels used across the crate.
//!
//! The singular value decomposition is a one-sided Jacobi iteration: columns
//! of the (tall) working matrix are rotated pairwise until mutually
//! orthogonal, after which column norms are the singular values. Jacobi is
//! slower than blocked bidiagonalization but converges to machine precision
//! on the small, well-conditioned matrices this crate produces (snapshot
//! matrices with eight rows, lifted operators of a few hundred rows), and it
//! is simple enough to audit against a Gram-matrix oracle.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

/// Thin singular value decomposition `a = u * diag(sigma) * v^T`.
///
/// `u` is `n x k` and `v` is `m x k` with `k = min(n, m)`; both have
/// orthonormal columns (zero singular directions are completed with an
/// orthonormal fill so the factors stay usable as bases). Singular values are
/// sorted in descending order.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Array2<f64>,
    pub sigma: Vec<f64>,
    pub v: Array2<f64>,
}

/// One-sided Jacobi SVD of an arbitrary real matrix.
pub fn jacobi_svd(a: &Array2<f64>) -> Result<Svd> {
    check_finite(a)?;
    let (n, m) = a.dim();
    if n == 0 || m == 0 {
        return Err(Error::argument("SVD input must be non-empty"));
    }
    // Work on a tall matrix: rows >= cols, so the rotation loop runs over the
    // small dimension. For a wide input, factor the transpose and swap the
    // roles of u and v on the way out.
    let transposed = n < m;
    let w = if transposed { a.t().to_owned() } else { a.clone() };
    let svd = factor_tall(w, None)?;
    if transposed {
        Ok(Svd { u: svd.v, sigma: svd.sigma, v: svd.u })
    } else {
        Ok(svd)
    }
}

/// Jacobi SVD warm-started from an orthogonal guess of the right singular
/// vectors — typically the `v` factor of a previous, nearby matrix. The
/// working matrix `a * guess` then starts with nearly orthogonal columns and
/// the sweep loop finishes in one or two passes instead of ten. The guess
/// must be orthogonal for the factorization to be valid; a poor (but
/// orthogonal) guess only costs speed, never accuracy. Requires rows >= cols.
pub fn jacobi_svd_warm(a: &Array2<f64>, guess: &Array2<f64>) -> Result<Svd> {
    check_finite(a)?;
    let (n, m) = a.dim();
    if n == 0 || m == 0 {
        return Err(Error::argument("SVD input must be non-empty"));
    }
    if n < m {
        return Err(Error::argument("warm-started SVD expects rows >= cols"));
    }
    if guess.dim() != (m, m) {
        return Err(Error::argument(format!(
            "warm-start guess must be {m}x{m}, got {}x{}",
            guess.nrows(),
            guess.ncols()
        )));
    }
    factor_tall(a.dot(guess), Some(guess))
}

fn check_finite(a: &Array2<f64>) -> Result<()> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("SVD input contains non-finite entries"));
    }
    Ok(())
}

/// Core one-sided Jacobi sweep on a tall matrix, given in `w`. When `guess`
/// is present, `w` is assumed to be `a * guess` and the returned `v` is
/// `guess` composed with the accumulated rotations.
fn factor_tall(w: Array2<f64>, guess: Option<&Array2<f64>>) -> Result<Svd> {
    let (rows, k) = w.dim();
    // Column-major buffers so each column is one contiguous slice; the inner
    // rotation loop is the whole cost of this routine.
    let mut wc = vec![0.0; rows * k];
    for j in 0..k {
        for r in 0..rows {
            wc[j * rows + r] = w[[r, j]];
        }
    }
    let mut vc = vec![0.0; k * k];
    for j in 0..k {
        vc[j * k + j] = 1.0;
    }

    // Convergence: a pair (i, j) counts as orthogonal when
    //   |w_i . w_j|^2 <= tol * |w_i|^2 |w_j|^2,
    // with tol a small multiple of machine epsilon squared. Columns whose
    // norm has collapsed to rounding level (relative to the largest initial
    // column) are frozen: on rank-deficient input they hold pure noise, and
    // rotating them forever would prevent the sweep loop from settling.
    let tol = 4.0 * f64::EPSILON * f64::EPSILON;
    let mut norms_sq: Vec<f64> = (0..k).map(|j| dot_self(&wc[j * rows..][..rows])).collect();
    let scale_sq = norms_sq.iter().fold(0.0_f64, |m, &n| m.max(n));
    let floor_sq = scale_sq * 16.0 * f64::EPSILON * f64::EPSILON;
    const MAX_SWEEPS: usize = 64;
    let mut converged = false;
    for sweep in 0..MAX_SWEEPS {
        // Squared norms are updated in closed form after each rotation;
        // refresh them from scratch once per sweep so rounding drift cannot
        // accumulate across thousands of rotations.
        if sweep > 0 {
            for (j, n) in norms_sq.iter_mut().enumerate() {
                *n = dot_self(&wc[j * rows..][..rows]);
            }
        }
        let mut rotated = false;
        for i in 0..k {
            for j in (i + 1)..k {
                let aii = norms_sq[i];
                let ajj = norms_sq[j];
                if aii <= floor_sq || ajj <= floor_sq {
                    continue;
                }
                let aij = dot_pair(&wc, rows, i, j);
                if aij * aij <= tol * aii * ajj {
                    continue;
                }
                rotated = true;
                // Jacobi rotation that orthogonalizes columns i and j.
                let zeta = (ajj - aii) / (2.0 * aij);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut wc, rows, i, j, c, s);
                rotate_pair(&mut vc, k, i, j, c, s);
                norms_sq[i] = c * c * aii - 2.0 * c * s * aij + s * s * ajj;
                norms_sq[j] = s * s * aii + 2.0 * c * s * aij + c * c * ajj;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical(format!(
            "Jacobi SVD did not converge within {MAX_SWEEPS} sweeps"
        )));
    }

    // Column norms are the singular values; sort descending.
    let mut order: Vec<usize> = (0..k).collect();
    let norms: Vec<f64> = (0..k)
        .map(|j| dot_self(&wc[j * rows..][..rows]).sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap());

    let v_rot = {
        let mut v = Array2::<f64>::zeros((k, k));
        for j in 0..k {
            for r in 0..k {
                v[[r, j]] = vc[j * k + r];
            }
        }
        v
    };
    let v_full = match guess {
        Some(g) => g.dot(&v_rot),
        None => v_rot,
    };

    let mut u = Array2::<f64>::zeros((rows, k));
    let mut v_sorted = Array2::<f64>::zeros((k, k));
    let mut sigma = Vec::with_capacity(k);
    let sigma_max = norms[order[0]];
    for (dst, &src) in order.iter().enumerate() {
        sigma.push(norms[src]);
        if norms[src] > sigma_max * 1e-300 && norms[src] > 0.0 {
            let inv = 1.0 / norms[src];
            let col = &wc[src * rows..][..rows];
            for r in 0..rows {
                u[[r, dst]] = col[r] * inv;
            }
        }
        for r in 0..k {
            v_sorted[[r, dst]] = v_full[[r, src]];
        }
    }
    complete_orthonormal(&mut u, &sigma, sigma_max);
    Ok(Svd { u, sigma, v: v_sorted })
}

fn dot_self(col: &[f64]) -> f64 {
    col.iter().map(|x| x * x).sum()
}

fn dot_pair(buf: &[f64], rows: usize, i: usize, j: usize) -> f64 {
    let ci = &buf[i * rows..][..rows];
    let cj = &buf[j * rows..][..rows];
    ci.iter().zip(cj).map(|(a, b)| a * b).sum()
}

fn rotate_pair(buf: &mut [f64], rows: usize, i: usize, j: usize, c: f64, s: f64) {
    debug_assert!(i < j);
    let (left, right) = buf.split_at_mut(j * rows);
    let ci = &mut left[i * rows..][..rows];
    let cj = &mut right[..rows];
    for (a, b) in ci.iter_mut().zip(cj.iter_mut()) {
        let x = *a;
        let y = *b;
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Replace columns belonging to (numerically) zero singular values with an
/// orthonormal completion so the factor keeps full column rank.
fn complete_orthonormal(u: &mut Array2<f64>, sigma: &[f64], sigma_max: f64) {
    let (rows, cols) = u.dim();
    let cutoff = sigma_max * f64::EPSILON * rows as f64;
    for j in 0..cols {
        if sigma[j] > cutoff && u.column(j).iter().map(|x| x * x).sum::<f64>() > 0.25 {
            continue;
        }
        // Try canonical basis vectors until one survives projection onto the
        // orthogonal complement of the columns built so far.
        let mut replaced = false;
        for cand in 0..rows {
            let mut col = vec![0.0; rows];
            col[cand] = 1.0;
            for prev in 0..j {
                let dot: f64 = (0..rows).map(|r| col[r] * u[[r, prev]]).sum();
                for r in 0..rows {
                    col[r] -= dot * u[[r, prev]];
                }
            }
            let norm = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for r in 0..rows {
                    u[[r, j]] = col[r] / norm;
                }
                replaced = true;
                break;
            }
        }
        debug_assert!(replaced, "orthonormal completion exhausted basis vectors");
    }
}

/// Cholesky factor (lower triangular) of a symmetric positive-definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::argument("Cholesky input must be square"));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::numerical(format!(
                "Cholesky breakdown at pivot {j}: d = {d:e} (matrix not positive definite)"
            )));
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Ok(l)
}

/// Solve `a x = b` for symmetric positive-definite `a` via Cholesky.
pub fn cholesky_solve(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let l = cholesky(a)?;
    cholesky_solve_factored(&l, b)
}

/// Forward/back substitution against an existing lower-triangular Cholesky
/// factor — lets callers with many right-hand sides factor once.
pub fn cholesky_solve_factored(l: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = l.nrows();
    if b.len() != n {
        return Err(Error::argument("right-hand side length mismatch"));
    }
    let mut y = b.to_owned();
    for i in 0..n {
        for k in 0..i {
            let t = l[[i, k]] * y[k];
            y[i] -= t;
        }
        y[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let t = l[[k, i]] * y[k];
            y[i] -= t;
        }
        y[i] /= l[[i, i]];
    }
    Ok(y)
}

/// Estimate of the spectral radius of a square matrix via Gelfand's formula,
/// `rho(a) = lim ||a^p||^(1/p)`, evaluated by repeated squaring with
/// normalization. Used for training diagnostics only; accuracy is a few
/// percent for mildly non-normal matrices.
pub fn spectral_radius_estimate(a: &Array2<f64>, squarings: usize) -> f64 {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "spectral radius needs a square matrix");
    let frob = |m: &Array2<f64>| m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut b = a.clone();
    let mut acc = 0.0_f64;
    let mut weight = 1.0_f64;
    for _ in 0..squarings {
        let f = frob(&b);
        if f == 0.0 || !f.is_finite() {
            return 0.0;
        }
        acc += weight * f.ln();
        let scaled = b.mapv(|x| x / f);
        b = scaled.dot(&scaled);
        weight *= 0.5;
    }
    let f = frob(&b);
    if f > 0.0 && f.is_finite() {
        acc += weight * f.ln();
    }
    acc.exp()
}
