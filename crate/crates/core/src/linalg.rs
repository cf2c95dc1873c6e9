//! Small dense helpers shared by the solvers and the gradient code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Condition estimates above this are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// Diagonal jitter added when the first factorization attempt fails.
pub const JITTER: f64 = 1e-10;

/// Cholesky factor of symmetric positive-definite `a`.
///
/// The squared ratio of the extreme Cholesky pivots serves as a cheap
/// condition estimate. On factorization failure the diagonal is bumped by
/// [`JITTER`] and the factorization retried once; the jitter does not count
/// toward conditioning, so the estimate then comes from the eigenvalues of
/// `a` itself. Above [`MAX_CONDITION`] the system is rejected.
fn factor(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = a.nrows();
    let (chol, condition) = match a.clone().cholesky() {
        Some(c) => {
            let l = c.l_dirty();
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for i in 0..n {
                let v = l[(i, i)] * l[(i, i)];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
            (c, condition)
        }
        None => {
            let eig = a.clone().symmetric_eigenvalues();
            let lo = eig.min();
            let condition = if lo > 0.0 { eig.max() / lo } else { f64::INFINITY };
            let jittered = a + DMatrix::<f64>::identity(n, n) * JITTER;
            let c = jittered.cholesky().ok_or(Error::SingularSystem { condition })?;
            (c, condition)
        }
    };
    if !(condition <= MAX_CONDITION) {
        return Err(Error::SingularSystem { condition });
    }
    Ok(chol)
}

/// Solves `a x = b` for symmetric positive-definite `a`.
pub fn spd_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let x = factor(a)?.solve(b);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem { condition: f64::INFINITY });
    }
    Ok(x)
}

/// Matrix version of [`spd_solve`] for several right-hand sides.
pub fn spd_solve_mat(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let out = factor(a)?.solve(b);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem { condition: f64::INFINITY });
    }
    Ok(out)
}

/// Solves `(K ⊗ I_P + c·Γ) vec(V) = vec(R)` with unknowns ordered row by
/// row, where `Γ = ⊕ᵢ (I_P/‖aᵢ‖ − aᵢᵀaᵢ/‖aᵢ‖³)` is built from the rows `aᵢ`
/// of `rows` (`N_Λ × P`), and `V`, `R` are `N_Λ × P`.
///
/// Writing `Γᵢ = (I − uᵢuᵢᵀ)/nᵢ` splits the matrix into
/// `(K + c·diag(1/n)) ⊗ I` minus a rank-`N_Λ` term, which the Woodbury
/// identity reduces to two `N_Λ × N_Λ` SPD solves.
pub fn solve_group_system(
    k: &DMatrix<f64>,
    rows: &DMatrix<f64>,
    c: f64,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let na = rows.nrows();
    let mut norms = Vec::with_capacity(na);
    for i in 0..na {
        let norm = rows.row(i).norm();
        if !(norm > f64::MIN_POSITIVE) || !norm.is_finite() {
            return Err(Error::ZeroRow { row: i });
        }
        norms.push(norm);
    }
    let mut base = k.clone();
    for i in 0..na {
        base[(i, i)] += c / norms[i];
    }
    let chol = factor(&base)?;
    let base_inv = chol.inverse();
    let y = chol.solve(rhs);
    let mut u = rows.clone();
    for i in 0..na {
        u.row_mut(i).scale_mut(1.0 / norms[i]);
    }
    let s: Vec<f64> = norms.iter().map(|n| (c / n).sqrt()).collect();
    let uu = &u * u.transpose();
    let cap = DMatrix::from_fn(na, na, |j, i| {
        let q = s[j] * base_inv[(j, i)] * s[i] * uu[(i, j)];
        if i == j { 1.0 - q } else { -q }
    });
    let b = DVector::from_fn(na, |j, _| s[j] * y.row(j).dot(&u.row(j)));
    let ct = factor(&cap)?.solve(&b);
    let mut corr = u;
    for i in 0..na {
        corr.row_mut(i).scale_mut(s[i] * ct[i]);
    }
    let v = y + chol.solve(&corr);
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::SingularSystem { condition: f64::INFINITY });
    }
    Ok(v)
}

/// Largest eigenvalue of `dᵀd` by power iteration.
pub fn gram_spectral_norm(d: &DMatrix<f64>, steps: usize) -> f64 {
    let n = d.ncols();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut estimate = 0.0;
    for _ in 0..steps {
        let w = d.tr_mul(&(d * &v));
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        estimate = v.dot(&w);
        v = w / norm;
    }
    // Rayleigh quotient of the final vector.
    let w = d.tr_mul(&(d * &v));
    estimate.max(v.dot(&w))
}

pub fn frobenius_sq(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}
