//! Gradients of the classification loss with respect to the dictionary,
//! obtained by differentiating each solver's optimality conditions at its
//! fixed point.
//!
//! All three priors share the final assembly
//! `∂L/∂D = ξβᵀ − DβAᵀ` with residual `ξ = X − DA`; they differ only in how
//! the auxiliary `β` is solved for on the active set.
//!
//! Scaling: the sparse-coding objectives carry an un-halved quadratic term,
//! so every optimality condition reads `2Dᵀ(X − DA) − … = λ ∂Ψ(A)`.
//! Differentiating it with respect to `D` leaves a factor 2 on the quadratic
//! side only. For the ℓ1 and Laplacian priors the penalty side has zero
//! derivative on the active set, so the 2 cancels and the systems are
//! `D_ΛᵀD_Λ` and `(I_P ⊗ DᵀD + γ L ⊗ I_N)_ΛΛ` as is. For the joint prior the
//! row-normalization term survives and the system becomes
//! `D̃ᵀD̃ ⊗ I_P + (λ/2)Γ`. These scalings are what make the analytic gradient
//! agree with central differences of the loss through the solvers.
//!
//! `vec(·)` is column-major throughout, except that the joint system orders
//! its unknowns row by row (`vec(β_Λᵀ)`, index `i·P + p`).

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, solve_group_system, spd_solve};
use crate::sparse_recovery::Patch;

/// Default magnitude below which a coefficient counts as inactive.
pub const ACTIVE_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActiveKind {
    /// Indices into column-major `vec(A)`.
    Entries,
    /// Row indices of `A`.
    Rows,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub indices: Vec<usize>,
    pub kind: ActiveKind,
}

impl ActiveSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn active_set(code: &DMatrix<f64>, kind: ActiveKind, tol: f64) -> ActiveSet {
    let indices = match kind {
        ActiveKind::Entries => (0..code.len()).filter(|&k| code[k].abs() > tol).collect(),
        ActiveKind::Rows => (0..code.nrows())
            .filter(|&i| code.row(i).norm() > tol)
            .collect(),
    };
    ActiveSet { indices, kind }
}

/// Block-diagonal `Γ = Γ₁ ⊕ … ⊕ Γ_{N_Λ}` with
/// `Γᵢ = I_P/‖aᵢ‖ − aᵢᵀaᵢ/‖aᵢ‖³` for each row `aᵢ` of `active_rows`.
pub fn build_gamma(active_rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (na, p) = active_rows.shape();
    let mut gamma = DMatrix::zeros(na * p, na * p);
    for i in 0..na {
        let row = active_rows.row(i);
        let norm = row.norm();
        if !(norm > f64::MIN_POSITIVE) || !norm.is_finite() {
            return Err(Error::ZeroRow { row: i });
        }
        let n3 = norm * norm * norm;
        for j in 0..p {
            for l in 0..p {
                let eye = if j == l { 1.0 / norm } else { 0.0 };
                gamma[(i * p + j, i * p + l)] = eye - row[j] * row[l] / n3;
            }
        }
    }
    Ok(gamma)
}

/// Classifier weights, the center label and the classifier regularizer.
#[derive(Debug, Clone, Copy)]
pub struct Target<'a> {
    pub w: &'a DMatrix<f64>,
    pub y: &'a DVector<f64>,
    pub mu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradOutput {
    pub grad_d: DMatrix<f64>,
    pub grad_w: DMatrix<f64>,
    pub beta: DMatrix<f64>,
}

/// `½‖y − Wα‖² + (μ/2)‖W‖²_F`.
pub fn classification_loss(w: &DMatrix<f64>, alpha_c: &DVector<f64>, y: &DVector<f64>, mu: f64) -> f64 {
    0.5 * (y - w * alpha_c).norm_squared() + 0.5 * mu * frobenius_sq(w)
}

/// `(Wα_c − y)α_cᵀ + μW`.
pub fn grad_w(w: &DMatrix<f64>, alpha_c: &DVector<f64>, y: &DVector<f64>, mu: f64) -> Result<DMatrix<f64>> {
    if w.ncols() != alpha_c.len() || w.nrows() != y.len() {
        return Err(Error::dims(format!(
            "W is {}x{}, alpha has {}, y has {}",
            w.nrows(),
            w.ncols(),
            alpha_c.len(),
            y.len()
        )));
    }
    Ok((w * alpha_c - y) * alpha_c.transpose() + w * mu)
}

/// `Wᵀ(WÂ − Ŷ)`: the loss gradient with respect to the code, nonzero only
/// in the center column.
fn code_gradient(target: &Target<'_>, alpha_c: &DVector<f64>, n: usize, p: usize, center: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(n, p);
    let col = target.w.tr_mul(&(target.w * alpha_c - target.y));
    g.set_column(center, &col);
    g
}

fn assemble(d: &DMatrix<f64>, x: &DMatrix<f64>, a: &DMatrix<f64>, beta: &DMatrix<f64>) -> DMatrix<f64> {
    let residual = x - d * a;
    &residual * beta.transpose() - d * beta * a.transpose()
}

fn check_shapes(d: &DMatrix<f64>, x: &DMatrix<f64>, a: &DMatrix<f64>, target: &Target<'_>) -> Result<()> {
    if d.nrows() != x.nrows() || a.nrows() != d.ncols() || a.ncols() != x.ncols() {
        return Err(Error::dims(format!(
            "D {}x{}, X {}x{}, A {}x{}",
            d.nrows(),
            d.ncols(),
            x.nrows(),
            x.ncols(),
            a.nrows(),
            a.ncols()
        )));
    }
    if target.w.ncols() != d.ncols() || target.w.nrows() != target.y.len() {
        return Err(Error::dims(format!(
            "W is {}x{} with {} labels for {} atoms",
            target.w.nrows(),
            target.w.ncols(),
            target.y.len(),
            d.ncols()
        )));
    }
    Ok(())
}

/// Dictionary gradient for the ℓ1 prior on a single signal.
///
/// `β_Λ = (D_ΛᵀD_Λ)⁻¹ (Wᵀ(Wα − y))_Λ`, `β_Λᶜ = 0`. `lambda` does not enter:
/// the sign pattern is locally constant.
pub fn grad_d_l1(
    d: &DMatrix<f64>,
    x: &DVector<f64>,
    alpha: &DVector<f64>,
    target: &Target<'_>,
    _lambda: f64,
    tol: f64,
) -> Result<GradOutput> {
    let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    let am = DMatrix::from_column_slice(alpha.len(), 1, alpha.as_slice());
    check_shapes(d, &xm, &am, target)?;
    let active = active_set(&am, ActiveKind::Entries, tol);
    if active.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let d_act = d.select_columns(active.indices.iter());
    let g = target.w.tr_mul(&(target.w * alpha - target.y));
    let rhs = DVector::from_iterator(active.len(), active.indices.iter().map(|&i| g[i]));
    let sol = spd_solve(&d_act.tr_mul(&d_act), &rhs)?;
    let mut beta = DMatrix::zeros(d.ncols(), 1);
    for (r, &i) in active.indices.iter().enumerate() {
        beta[i] = sol[r];
    }
    Ok(GradOutput {
        grad_d: assemble(d, &xm, &am, &beta),
        grad_w: grad_w(target.w, alpha, target.y, target.mu)?,
        beta,
    })
}

/// Dictionary gradient for the joint prior.
///
/// `vec(β_Λᵀ)` solves `(D̃ᵀD̃ ⊗ I_P + (λ/2)Γ) v = vec(g_Λᵀ)` where
/// `g = Wᵀ(WÂ − Ŷ)`; in the transposed layout this is the same quantity as
/// `(WÂ − Ŷ)ᵀW̃`.
pub fn grad_d_joint(
    d: &DMatrix<f64>,
    patch: &Patch,
    code: &DMatrix<f64>,
    target: &Target<'_>,
    lambda: f64,
    tol: f64,
) -> Result<GradOutput> {
    let x = patch.pixels();
    check_shapes(d, x, code, target)?;
    let (n, p) = code.shape();
    let c = patch.center_index();
    let active = active_set(code, ActiveKind::Rows, tol);
    if active.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let a_act = code.select_rows(active.indices.iter());
    let d_act = d.select_columns(active.indices.iter());
    let gram = d_act.tr_mul(&d_act);

    let alpha_c = code.column(c).into_owned();
    let g = code_gradient(target, &alpha_c, n, p, c);
    let rhs = g.select_rows(active.indices.iter());
    let sol = solve_group_system(&gram, &a_act, 0.5 * lambda, &rhs)?;
    let mut beta = DMatrix::zeros(n, p);
    for (r, &i) in active.indices.iter().enumerate() {
        beta.row_mut(i).copy_from(&sol.row(r));
    }
    Ok(GradOutput {
        grad_d: assemble(d, x, code, &beta),
        grad_w: grad_w(target.w, &alpha_c, target.y, target.mu)?,
        beta,
    })
}

/// Dictionary gradient for the Laplacian prior.
///
/// `vec(β)_Λ` solves `(I_P ⊗ DᵀD + γ L ⊗ I_N)_ΛΛ v = vec(Wᵀ(WÂ − Ŷ))_Λ` on
/// the entry-wise active set, `vec(β)_Λᶜ = 0`.
#[allow(clippy::too_many_arguments)]
pub fn grad_d_laplacian(
    d: &DMatrix<f64>,
    patch: &Patch,
    code: &DMatrix<f64>,
    target: &Target<'_>,
    _lambda: f64,
    gamma: f64,
    lap: &DMatrix<f64>,
    tol: f64,
) -> Result<GradOutput> {
    let x = patch.pixels();
    check_shapes(d, x, code, target)?;
    let (n, p) = code.shape();
    if lap.nrows() != p || lap.ncols() != p {
        return Err(Error::dims(format!("Laplacian must be {p}x{p}")));
    }
    let c = patch.center_index();
    let active = active_set(code, ActiveKind::Entries, tol);
    if active.is_empty() {
        return Err(Error::EmptyActiveSet);
    }
    let gram = d.tr_mul(d);
    let size = active.len();
    let mut system = DMatrix::zeros(size, size);
    for (r, &kr) in active.indices.iter().enumerate() {
        let (ir, pr) = (kr % n, kr / n);
        for (s, &ks) in active.indices.iter().enumerate() {
            let (is, ps) = (ks % n, ks / n);
            let mut v = 0.0;
            if pr == ps {
                v += gram[(ir, is)];
            }
            if ir == is {
                v += gamma * lap[(pr, ps)];
            }
            system[(r, s)] = v;
        }
    }
    let alpha_c = code.column(c).into_owned();
    let g = code_gradient(target, &alpha_c, n, p, c);
    let rhs = DVector::from_iterator(size, active.indices.iter().map(|&k| g[k]));
    let sol = spd_solve(&system, &rhs)?;
    let mut beta = DMatrix::zeros(n, p);
    for (r, &k) in active.indices.iter().enumerate() {
        beta[k] = sol[r];
    }
    Ok(GradOutput {
        grad_d: assemble(d, x, code, &beta),
        grad_w: grad_w(target.w, &alpha_c, target.y, target.mu)?,
        beta,
    })
}

/// Central-difference gradient of a loss evaluated through a solver.
#[derive(Debug, Clone)]
pub struct FdGradient {
    pub grad: DMatrix<f64>,
    /// Entries `(m, n)` whose support differed between the `+h` and `−h`
    /// evaluations (or from the unperturbed support).
    pub unstable: Vec<(usize, usize)>,
}

impl FdGradient {
    pub fn is_stable(&self) -> bool {
        self.unstable.is_empty()
    }
}

/// `(L(D + hE_mn) − L(D − hE_mn)) / 2h` for every entry.
///
/// `loss` returns the loss and, optionally, a support signature of the code
/// it produced; entries whose signatures disagree are reported.
pub fn finite_diff_grad_d<F>(mut loss: F, d: &DMatrix<f64>, h: f64) -> Result<FdGradient>
where
    F: FnMut(&DMatrix<f64>) -> Result<(f64, Option<Vec<usize>>)>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step must be > 0, got {h}")));
    }
    let (_, base_support) = loss(d)?;
    let mut grad = DMatrix::zeros(d.nrows(), d.ncols());
    let mut unstable = Vec::new();
    let mut probe = d.clone();
    for n in 0..d.ncols() {
        for m in 0..d.nrows() {
            let orig = probe[(m, n)];
            probe[(m, n)] = orig + h;
            let (plus, s_plus) = loss(&probe)?;
            probe[(m, n)] = orig - h;
            let (minus, s_minus) = loss(&probe)?;
            probe[(m, n)] = orig;
            grad[(m, n)] = (plus - minus) / (2.0 * h);
            if s_plus != s_minus || s_plus != base_support {
                unstable.push((m, n));
            }
        }
    }
    Ok(FdGradient { grad, unstable })
}
