//! Sparse coding under three priors.
//!
//! All objectives use an un-halved quadratic data term:
//!
//! * ℓ1:        `‖X − DA‖²_F + λ Σ |A_ij|`
//! * joint:     `‖X − DA‖²_F + λ Σ_i ‖A_i‖₂` (rows `A_i`)
//! * Laplacian: `‖X − DA‖²_F + λ Σ |A_ij| + γ tr(A L Aᵀ)`
//!
//! The ℓ1 and joint problems are solved by monotone accelerated proximal
//! gradient with a backtracked Lipschitz constant; the Laplacian problem by
//! a SpaRSA iteration with Barzilai–Borwein scale selection. Every solver
//! starts from `A = 0` and finishes with an active-set refinement that solves
//! the optimality conditions on the identified support exactly. The
//! refinement is kept only if it satisfies the full KKT conditions and does
//! not increase the objective, so the accepted objective sequence stays
//! monotone.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::{frobenius_sq, gram_spectral_norm, solve_group_system, spd_solve};

/// Tolerance on the unit-norm invariant of dictionary columns.
pub const UNIT_NORM_TOL: f64 = 1e-9;

const POWER_ITERATION_STEPS: usize = 50;
const SPARSA_SIGMA: f64 = 1e-5;
const KKT_SLACK: f64 = 1e-7;

/// An `M×N` matrix of unit-norm atoms.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    atoms: DMatrix<f64>,
}

impl Dictionary {
    /// Wraps `atoms`, checking that every column has unit ℓ2 norm.
    pub fn new(atoms: DMatrix<f64>) -> Result<Self> {
        check_shape_finite(&atoms)?;
        for (j, col) in atoms.column_iter().enumerate() {
            let norm = col.norm();
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::InvalidDictionary(format!(
                    "column {j} has norm {norm}"
                )));
            }
        }
        Ok(Dictionary { atoms })
    }

    /// Normalizes every column of `atoms` to unit ℓ2 norm.
    pub fn normalized(mut atoms: DMatrix<f64>) -> Result<Self> {
        check_shape_finite(&atoms)?;
        normalize_columns(&mut atoms)?;
        Ok(Dictionary { atoms })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.atoms
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.atoms
    }

    /// Band count `M`.
    pub fn bands(&self) -> usize {
        self.atoms.nrows()
    }

    /// Atom count `N`.
    pub fn n_atoms(&self) -> usize {
        self.atoms.ncols()
    }
}

fn check_shape_finite(m: &DMatrix<f64>) -> Result<()> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Err(Error::InvalidDictionary("empty matrix".into()));
    }
    if let Some(index) = m.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { index });
    }
    Ok(())
}

/// Rescales every column to unit norm in place.
pub fn normalize_columns(m: &mut DMatrix<f64>) -> Result<()> {
    for (j, mut col) in m.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidDictionary(format!(
                "column {j} cannot be normalized (norm {norm})"
            )));
        }
        col /= norm;
    }
    Ok(())
}

/// The pixels of a neighbourhood window, one spectrum per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pixels: DMatrix<f64>,
    center_index: usize,
}

impl Patch {
    pub fn new(pixels: DMatrix<f64>, center_index: usize) -> Result<Self> {
        if pixels.ncols() == 0 || pixels.nrows() == 0 {
            return Err(Error::InvalidArgument("patch has no pixels".into()));
        }
        if center_index >= pixels.ncols() {
            return Err(Error::InvalidArgument(format!(
                "center index {center_index} outside patch of {} pixels",
                pixels.ncols()
            )));
        }
        if let Some(index) = pixels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        Ok(Patch {
            pixels,
            center_index,
        })
    }

    /// A one-pixel patch.
    pub fn single(x: &DVector<f64>) -> Result<Self> {
        Patch::new(DMatrix::from_column_slice(x.len(), 1, x.as_slice()), 0)
    }

    pub fn pixels(&self) -> &DMatrix<f64> {
        &self.pixels
    }

    pub fn center_index(&self) -> usize {
        self.center_index
    }

    /// Number of pixels `P`.
    pub fn len(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.ncols() == 0
    }

    pub fn bands(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn center_pixel(&self) -> DVector<f64> {
        self.pixels.column(self.center_index).into_owned()
    }
}

/// `N×P` coefficient matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCode {
    pub coeffs: DMatrix<f64>,
}

impl SparseCode {
    pub fn zeros(n: usize, p: usize) -> Self {
        SparseCode {
            coeffs: DMatrix::zeros(n, p),
        }
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.coeffs.column(j).into_owned()
    }

    pub fn n_atoms(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn n_pixels(&self) -> usize {
        self.coeffs.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PriorKind {
    L1,
    Joint,
    Laplacian,
}

impl PriorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorKind::L1 => "l1",
            PriorKind::Joint => "js",
            PriorKind::Laplacian => "lp",
        }
    }
}

impl fmt::Display for PriorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l1" => Ok(PriorKind::L1),
            "js" | "joint" => Ok(PriorKind::Joint),
            "lp" | "laplacian" => Ok(PriorKind::Laplacian),
            other => Err(Error::parse(format!("unknown prior '{other}'"))),
        }
    }
}

/// Regularizer and its weights. `gamma` exists only for the Laplacian prior.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prior {
    L1 { lambda: f64 },
    Joint { lambda: f64 },
    Laplacian { lambda: f64, gamma: f64 },
}

impl Prior {
    pub fn new(kind: PriorKind, lambda: f64, gamma: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
        }
        Ok(match kind {
            PriorKind::L1 => Prior::L1 { lambda },
            PriorKind::Joint => Prior::Joint { lambda },
            PriorKind::Laplacian => {
                if !(gamma >= 0.0) || !gamma.is_finite() {
                    return Err(Error::InvalidArgument(format!(
                        "gamma must be >= 0, got {gamma}"
                    )));
                }
                Prior::Laplacian { lambda, gamma }
            }
        })
    }

    pub fn kind(&self) -> PriorKind {
        match self {
            Prior::L1 { .. } => PriorKind::L1,
            Prior::Joint { .. } => PriorKind::Joint,
            Prior::Laplacian { .. } => PriorKind::Laplacian,
        }
    }

    pub fn lambda(&self) -> f64 {
        match *self {
            Prior::L1 { lambda } | Prior::Joint { lambda } | Prior::Laplacian { lambda, .. } => {
                lambda
            }
        }
    }

    pub fn gamma(&self) -> Option<f64> {
        match *self {
            Prior::Laplacian { gamma, .. } => Some(gamma),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub max_outer_iters: usize,
    /// Relative objective change below which iteration stops.
    pub tol: f64,
    pub eta0: f64,
    pub eta_min: f64,
    pub eta_max: f64,
    /// Backtracking multiplier for the SpaRSA scale.
    pub eta_mu: f64,
    /// Keep the objective value of every accepted iterate in
    /// [`Solution::history`].
    pub record_history: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_outer_iters: 2000,
            tol: 1e-7,
            eta0: 1.0,
            eta_min: 1e-8,
            eta_max: 1e8,
            eta_mu: 2.0,
            record_history: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if self.max_outer_iters == 0 {
            return bad("max_outer_iters must be positive");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be > 0");
        }
        if !(self.eta_min > 0.0 && self.eta_min < self.eta_max) {
            return bad("need 0 < eta_min < eta_max");
        }
        if !(self.eta_min <= self.eta0 && self.eta0 <= self.eta_max) {
            return bad("need eta_min <= eta0 <= eta_max");
        }
        if !(self.eta_mu > 1.0) {
            return bad("eta_mu must be > 1");
        }
        Ok(())
    }

    /// A tight configuration for gradient checking.
    pub fn precise() -> Self {
        SolverConfig {
            max_outer_iters: 20_000,
            tol: 1e-14,
            ..SolverConfig::default()
        }
    }
}

/// Solver output. A solver that hits the iteration cap still returns its
/// best iterate with `converged == false`.
#[derive(Debug, Clone)]
pub struct Solution {
    pub code: SparseCode,
    pub converged: bool,
    pub iterations: usize,
    pub objective: f64,
    pub history: Vec<f64>,
}

impl Solution {
    /// Turns a non-converged solution into [`Error::NonConvergence`].
    pub fn require_converged(self) -> Result<SparseCode> {
        if self.converged {
            Ok(self.code)
        } else {
            Err(Error::NonConvergence {
                iterations: self.iterations,
            })
        }
    }
}

/// `sign(u)·max(0, |u| − tau)`.
#[inline]
pub fn soft_threshold(u: f64, tau: f64) -> f64 {
    if u > tau {
        u - tau
    } else if u < -tau {
        u + tau
    } else {
        0.0
    }
}

/// Proximal operator of `tau·‖·‖₂` applied to one row.
pub fn row_group_shrink(row: &[f64], tau: f64) -> Vec<f64> {
    let mut out = row.to_vec();
    shrink_in_place(&mut out, tau);
    out
}

fn shrink_in_place(row: &mut [f64], tau: f64) {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= tau {
        row.iter_mut().for_each(|v| *v = 0.0);
    } else {
        let scale = 1.0 - tau / norm;
        row.iter_mut().for_each(|v| *v *= scale);
    }
}

/// Exact objective of the problem selected by `prior`.
///
/// `lap` is required for the Laplacian prior and ignored otherwise.
pub fn objective(
    d: &DMatrix<f64>,
    x: &DMatrix<f64>,
    code: &DMatrix<f64>,
    prior: &Prior,
    lap: Option<&DMatrix<f64>>,
) -> Result<f64> {
    check_dims(d, x, code)?;
    let residual = x - d * code;
    let fit = frobenius_sq(&residual);
    Ok(match *prior {
        Prior::L1 { lambda } => fit + lambda * l1_norm(code),
        Prior::Joint { lambda } => fit + lambda * l12_norm(code),
        Prior::Laplacian { lambda, gamma } => {
            let lap = lap.ok_or_else(|| Error::InvalidArgument("Laplacian prior needs L".into()))?;
            check_lap(lap, code.ncols())?;
            fit + lambda * l1_norm(code) + gamma * laplacian_trace(code, lap)
        }
    })
}

fn check_dims(d: &DMatrix<f64>, x: &DMatrix<f64>, code: &DMatrix<f64>) -> Result<()> {
    if d.nrows() != x.nrows() {
        return Err(Error::dims(format!(
            "dictionary has {} bands, data has {}",
            d.nrows(),
            x.nrows()
        )));
    }
    if code.nrows() != d.ncols() || code.ncols() != x.ncols() {
        return Err(Error::dims(format!(
            "code is {}x{}, expected {}x{}",
            code.nrows(),
            code.ncols(),
            d.ncols(),
            x.ncols()
        )));
    }
    Ok(())
}

fn check_lap(lap: &DMatrix<f64>, p: usize) -> Result<()> {
    if lap.nrows() != p || lap.ncols() != p {
        return Err(Error::dims(format!(
            "Laplacian is {}x{}, patch has {p} pixels",
            lap.nrows(),
            lap.ncols()
        )));
    }
    Ok(())
}

pub(crate) fn l1_norm(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|v| v.abs()).sum()
}

pub(crate) fn l12_norm(a: &DMatrix<f64>) -> f64 {
    a.row_iter().map(|r| r.norm()).sum()
}

/// `tr(A L Aᵀ)`.
pub fn laplacian_trace(a: &DMatrix<f64>, lap: &DMatrix<f64>) -> f64 {
    (a * lap).component_mul(a).sum()
}

/// ℓ1 coding of one signal: `min ‖x − Dα‖² + λ‖α‖₁`.
pub fn solve_l1(d: &DMatrix<f64>, x: &DVector<f64>, lambda: f64, cfg: &SolverConfig) -> Result<Solution> {
    let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    accelerated_prox(d, &xm, lambda, Penalty::Elementwise, cfg)
}

/// Joint (row-sparse) coding of a patch: `min ‖X − DA‖²_F + λ Σ_i ‖A_i‖₂`.
pub fn solve_joint(d: &DMatrix<f64>, patch: &Patch, lambda: f64, cfg: &SolverConfig) -> Result<Solution> {
    accelerated_prox(d, patch.pixels(), lambda, Penalty::Rows, cfg)
}

/// Column-wise ℓ1 coding of every pixel in a patch.
pub fn solve_l1_columns(
    d: &DMatrix<f64>,
    x: &DMatrix<f64>,
    lambda: f64,
    cfg: &SolverConfig,
) -> Result<Solution> {
    accelerated_prox(d, x, lambda, Penalty::Elementwise, cfg)
}

/// Dispatches to the solver for `prior`. `lap` is required for the
/// Laplacian prior.
pub fn solve(
    d: &DMatrix<f64>,
    patch: &Patch,
    prior: &Prior,
    lap: Option<&DMatrix<f64>>,
    cfg: &SolverConfig,
) -> Result<Solution> {
    match *prior {
        Prior::L1 { lambda } => solve_l1_columns(d, patch.pixels(), lambda, cfg),
        Prior::Joint { lambda } => solve_joint(d, patch, lambda, cfg),
        Prior::Laplacian { lambda, gamma } => {
            let lap = lap.ok_or_else(|| Error::InvalidArgument("Laplacian prior needs L".into()))?;
            solve_laplacian(d, patch, lambda, gamma, lap, cfg)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Penalty {
    Elementwise,
    Rows,
}

impl Penalty {
    fn value(self, a: &DMatrix<f64>) -> f64 {
        match self {
            Penalty::Elementwise => l1_norm(a),
            Penalty::Rows => l12_norm(a),
        }
    }

    fn prox(self, a: &mut DMatrix<f64>, tau: f64) {
        match self {
            Penalty::Elementwise => a.iter_mut().for_each(|v| *v = soft_threshold(*v, tau)),
            Penalty::Rows => {
                let p = a.ncols();
                let mut row = vec![0.0; p];
                for i in 0..a.nrows() {
                    for j in 0..p {
                        row[j] = a[(i, j)];
                    }
                    shrink_in_place(&mut row, tau);
                    for j in 0..p {
                        a[(i, j)] = row[j];
                    }
                }
            }
        }
    }
}

fn validate_inputs(d: &DMatrix<f64>, x: &DMatrix<f64>, lambda: f64, cfg: &SolverConfig) -> Result<()> {
    cfg.validate()?;
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be > 0, got {lambda}")));
    }
    if d.nrows() != x.nrows() {
        return Err(Error::dims(format!(
            "dictionary has {} bands, data has {}",
            d.nrows(),
            x.nrows()
        )));
    }
    if x.ncols() == 0 {
        return Err(Error::InvalidArgument("no signals to code".into()));
    }
    if let Some(index) = x.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteValue { index });
    }
    Ok(())
}

fn relative_change(before: f64, after: f64) -> f64 {
    (before - after).abs() / before.abs().max(f64::MIN_POSITIVE)
}

/// Iterations the support must stay fixed before an active-set refinement
/// is attempted mid-run.
const SUPPORT_PATIENCE: usize = 5;

/// Updates the running support signature of `a`; true after it has been
/// unchanged for [`SUPPORT_PATIENCE`] iterations, and periodically after.
fn track_support(a: &DMatrix<f64>, penalty: Penalty, support: &mut Vec<usize>, stable_for: &mut usize) -> bool {
    let current: Vec<usize> = match penalty {
        Penalty::Elementwise => (0..a.len()).filter(|&k| a[k] != 0.0).collect(),
        Penalty::Rows => (0..a.nrows()).filter(|&i| a.row(i).iter().any(|&v| v != 0.0)).collect(),
    };
    if current.is_empty() || current != *support {
        *support = current;
        *stable_for = 0;
        return false;
    }
    *stable_for += 1;
    *stable_for % (4 * SUPPORT_PATIENCE) == SUPPORT_PATIENCE
}

/// Runs `refine` and keeps its result when the objective does not rise.
fn try_refine(
    phi_a: f64,
    phi: &impl Fn(&DMatrix<f64>) -> f64,
    refine: impl FnOnce() -> Option<DMatrix<f64>>,
) -> Option<(DMatrix<f64>, f64)> {
    let refined = refine()?;
    let phi_r = phi(&refined);
    if phi_r <= phi_a + 1e-14 * phi_a.abs().max(1.0) {
        Some((refined, phi_r.min(phi_a)))
    } else {
        None
    }
}

/// The smooth part `‖X − DA‖²_F + γ tr(A L Aᵀ)` expressed through
/// `H(A) = DᵀD·A + γ·A·L`, so each evaluation costs one `N × N` product.
struct Smooth<'a> {
    gram: DMatrix<f64>,
    dtx: DMatrix<f64>,
    xx: f64,
    lap: Option<(&'a DMatrix<f64>, f64)>,
}

impl<'a> Smooth<'a> {
    fn new(d: &DMatrix<f64>, x: &DMatrix<f64>, lap: Option<(&'a DMatrix<f64>, f64)>) -> Self {
        Smooth {
            gram: d.tr_mul(d),
            dtx: d.tr_mul(x),
            xx: frobenius_sq(x),
            lap: lap.filter(|&(_, gamma)| gamma != 0.0),
        }
    }

    fn hess(&self, a: &DMatrix<f64>) -> DMatrix<f64> {
        let mut h = &self.gram * a;
        if let Some((lap, gamma)) = self.lap {
            h.gemm(gamma, a, lap, 1.0);
        }
        h
    }

    /// Value at `a` given `h = H(a)`.
    fn value(&self, a: &DMatrix<f64>, h: &DMatrix<f64>) -> f64 {
        (self.xx - 2.0 * self.dtx.dot(a) + a.dot(h)).max(0.0)
    }

    /// Gradient `2(H(a) − DᵀX)` given `h = H(a)`.
    fn grad(&self, h: &DMatrix<f64>) -> DMatrix<f64> {
        (h - &self.dtx) * 2.0
    }
}

/// Monotone FISTA on `‖X − DA‖²_F + λ·penalty(A)`.
fn accelerated_prox(
    d: &DMatrix<f64>,
    x: &DMatrix<f64>,
    lambda: f64,
    penalty: Penalty,
    cfg: &SolverConfig,
) -> Result<Solution> {
    validate_inputs(d, x, lambda, cfg)?;
    let (n, p) = (d.ncols(), x.ncols());
    let smooth = Smooth::new(d, x, None);
    let dtx = &smooth.dtx;
    let phi = |a: &DMatrix<f64>| smooth.value(a, &smooth.hess(a)) + lambda * penalty.value(a);

    let mut lip = (2.0 * gram_spectral_norm(d, POWER_ITERATION_STEPS)).max(f64::MIN_POSITIVE);
    let mut a = DMatrix::<f64>::zeros(n, p);
    let mut ha = a.clone();
    let mut y = a.clone();
    let mut hy = a.clone();
    let mut t = 1.0f64;
    let mut phi_a = smooth.value(&a, &ha);
    let mut history = Vec::new();
    if cfg.record_history {
        history.push(phi_a);
    }

    let mut converged = false;
    let mut certified = false;
    let mut iterations = 0;
    let mut support = Vec::new();
    let mut stable_for = 0usize;
    while iterations < cfg.max_outer_iters {
        iterations += 1;
        let f_y = smooth.value(&y, &hy);
        let grad = smooth.grad(&hy);

        let (z, hz, f_z) = loop {
            let mut z = &y - &grad / lip;
            penalty.prox(&mut z, lambda / lip);
            let hz = smooth.hess(&z);
            let f_z = smooth.value(&z, &hz);
            let diff = &z - &y;
            let bound = f_y + grad.dot(&diff) + 0.5 * lip * frobenius_sq(&diff);
            if f_z <= bound + 1e-14 * f_y.abs().max(1.0) || !lip.is_finite() {
                break (z, hz, f_z);
            }
            lip *= 2.0;
        };
        let phi_z = f_z + lambda * penalty.value(&z);

        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let accepted = phi_z <= phi_a;
        let (a_next, ha_next, phi_next) = if accepted {
            (z.clone(), hz.clone(), phi_z)
        } else {
            (a.clone(), ha.clone(), phi_a)
        };
        let (c1, c2) = (t / t_next, (t - 1.0) / t_next);
        // H is linear, so H(y) follows the same combination as y.
        y = &a_next + (&z - &a_next) * c1 + (&a_next - &a) * c2;
        hy = &ha_next + (&hz - &ha_next) * c1 + (&ha_next - &ha) * c2;
        t = t_next;

        // A rejected candidate that ties the incumbent to within tol also
        // signals a fixed point.
        let change = relative_change(phi_a, phi_z);
        let step = (&z - &a).norm();
        a = a_next;
        ha = ha_next;
        phi_a = phi_next;
        if cfg.record_history {
            history.push(phi_a);
        }
        if change < cfg.tol || step == 0.0 {
            converged = true;
            break;
        }
        if track_support(&a, penalty, &mut support, &mut stable_for) {
            if let Some((refined, phi_r)) = try_refine(phi_a, &phi, || {
                refine_rows(d, x, dtx, &a, lambda, penalty)
            }) {
                a = refined;
                phi_a = phi_r;
                if cfg.record_history {
                    history.push(phi_a);
                }
                converged = true;
                certified = true;
                break;
            }
        }
    }

    if !certified {
        if let Some((refined, phi_r)) = try_refine(phi_a, &phi, || refine_rows(d, x, dtx, &a, lambda, penalty)) {
            a = refined;
            phi_a = phi_r;
            if cfg.record_history {
                history.push(phi_a);
            }
        }
    }

    let objective = frobenius_sq(&(x - d * &a)) + lambda * penalty.value(&a);
    Ok(Solution {
        code: SparseCode { coeffs: a },
        converged,
        iterations,
        objective,
        history,
    })
}

/// Newton refinement of the row-wise optimality system
/// `2D̃ᵀ(D̃Ã − X) + λ·Ã_i/‖Ã_i‖ = 0` on the active rows.
///
/// For the elementwise penalty every nonzero entry is treated as its own
/// group, which reduces to a single linear solve with fixed signs.
fn refine_rows(
    d: &DMatrix<f64>,
    x: &DMatrix<f64>,
    dtx: &DMatrix<f64>,
    a: &DMatrix<f64>,
    lambda: f64,
    penalty: Penalty,
) -> Option<DMatrix<f64>> {
    match penalty {
        Penalty::Rows => refine_joint(d, x, dtx, a, lambda),
        Penalty::Elementwise => {
            // Columns decouple; reuse the Laplacian solve with γ = 0.
            let lap = DMatrix::zeros(a.ncols(), a.ncols());
            refine_laplacian(d, dtx, a, lambda, 0.0, &lap)
        }
    }
}

fn refine_joint(
    d: &DMatrix<f64>,
    x: &DMatrix<f64>,
    dtx: &DMatrix<f64>,
    a: &DMatrix<f64>,
    lambda: f64,
) -> Option<DMatrix<f64>> {
    let p = a.ncols();
    let mut active: Vec<usize> = (0..a.nrows()).filter(|&i| a.row(i).norm() > 0.0).collect();
    let scale = lambda.max(dtx.amax());
    let mut cur = a.select_rows(active.iter());

    // Rows that collapse under Newton are dropped and the solve restarted.
    let solved = 'prune: loop {
        if active.is_empty() {
            return None;
        }
        let na = active.len();
        let d_act = d.select_columns(active.iter());
        let gram = d_act.tr_mul(&d_act);
        let dtx_act = dtx.select_rows(active.iter());
        let residual_of = |cur: &DMatrix<f64>| -> DMatrix<f64> {
            let mut f = (&gram * cur - &dtx_act) * 2.0;
            for i in 0..na {
                let norm = cur.row(i).norm();
                for j in 0..p {
                    f[(i, j)] += lambda * cur[(i, j)] / norm;
                }
            }
            f
        };

        let mut f = residual_of(&cur);
        for _ in 0..50 {
            if f.amax() <= 1e-13 * scale {
                break;
            }
            // Jacobian 2(G̃ ⊗ I_P) + λΓ, unknowns ordered row by row.
            let step = solve_group_system(&(&gram * 2.0), &cur, lambda, &(-&f)).ok()?;
            let mut next = cur.clone();
            next += step;
            // A row collapsing or reversing means it does not belong in the
            // support.
            let collapsed: Vec<usize> = (0..na)
                .filter(|&i| {
                    let (before, after) = (cur.row(i), next.row(i));
                    after.dot(&before) <= 0.0 || after.norm() < 1e-3 * before.norm()
                })
                .collect();
            if !collapsed.is_empty() {
                let keep: Vec<usize> = (0..na).filter(|i| !collapsed.contains(i)).collect();
                cur = cur.select_rows(keep.iter());
                active = keep.iter().map(|&i| active[i]).collect();
                continue 'prune;
            }
            cur = next;
            f = residual_of(&cur);
        }
        if f.amax() > 1e-9 * scale {
            return None;
        }
        break cur;
    };

    let mut full = DMatrix::zeros(a.nrows(), p);
    for (r, &i) in active.iter().enumerate() {
        full.set_row(i, &solved.row(r));
    }
    // Inactive rows must satisfy ‖2D_jᵀ(X − DA)‖₂ ≤ λ.
    let corr = d.tr_mul(&(x - d * &full)) * 2.0;
    for i in 0..a.nrows() {
        if !active.contains(&i) && corr.row(i).norm() > lambda * (1.0 + KKT_SLACK) {
            return None;
        }
    }
    Some(full)
}

/// Rounds of the active-set refinement for the Laplacian prior.
const LAPLACIAN_REFINE_ROUNDS: usize = 8;

/// Active-set refinement for the Laplacian prior. Starting from the signed
/// support of `a`, solves the sign-fixed optimality conditions
/// `(I_P ⊗ DᵀD + γ L ⊗ I_N)_ΛΛ vec(A)_Λ = vec(DᵀX)_Λ − (λ/2) sign_Λ`,
/// drops entries whose sign flips and adds zero entries that violate
/// `|[2Dᵀ(X − DA) − 2γAL]_k| ≤ λ`, until no change is needed.
fn refine_laplacian(
    d: &DMatrix<f64>,
    dtx: &DMatrix<f64>,
    a: &DMatrix<f64>,
    lambda: f64,
    gamma: f64,
    lap: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let gram = d.tr_mul(d);
    // Column-major vec index n_idx + p_idx·N.
    let mut signs = DMatrix::<f64>::zeros(n, a.ncols());
    for k in 0..a.len() {
        signs[k] = if a[k] == 0.0 { 0.0 } else { a[k].signum() };
    }
    for _ in 0..LAPLACIAN_REFINE_ROUNDS {
        let full = sign_fixed_laplacian(&gram, dtx, &mut signs, lambda, gamma, lap)?;
        let corr = (dtx - &gram * &full - (&full * lap) * gamma) * 2.0;
        let mut added = false;
        for k in 0..full.len() {
            if full[k] == 0.0 && corr[k].abs() > lambda * (1.0 + KKT_SLACK) {
                signs[k] = corr[k].signum();
                added = true;
            }
        }
        if !added {
            return Some(full);
        }
    }
    None
}

/// Solves the sign-fixed system on the entries with nonzero `signs`,
/// zeroing the sign of every entry that flips and re-solving.
fn sign_fixed_laplacian(
    gram: &DMatrix<f64>,
    dtx: &DMatrix<f64>,
    signs: &mut DMatrix<f64>,
    lambda: f64,
    gamma: f64,
    lap: &DMatrix<f64>,
) -> Option<DMatrix<f64>> {
    let n = signs.nrows();
    let mut active: Vec<usize> = (0..signs.len()).filter(|&k| signs[k] != 0.0).collect();
    for _ in 0..=signs.len() {
        if active.is_empty() {
            return None;
        }
        let size = active.len();
        let mut h = DMatrix::<f64>::zeros(size, size);
        let mut rhs = DVector::<f64>::zeros(size);
        for (r, &kr) in active.iter().enumerate() {
            let (ir, pr) = (kr % n, kr / n);
            rhs[r] = dtx[(ir, pr)] - 0.5 * lambda * signs[kr];
            for (c, &kc) in active.iter().enumerate() {
                let (ic, pc) = (kc % n, kc / n);
                let mut v = 0.0;
                if pr == pc {
                    v += gram[(ir, ic)];
                }
                if ir == ic {
                    v += gamma * lap[(pr, pc)];
                }
                h[(r, c)] = v;
            }
        }
        let sol = spd_solve(&h, &rhs).ok()?;
        let keep: Vec<usize> = (0..size).filter(|&r| sol[r] * signs[active[r]] > 0.0).collect();
        if keep.len() == size {
            let mut full = DMatrix::zeros(n, signs.ncols());
            for (r, &k) in active.iter().enumerate() {
                full[k] = sol[r];
            }
            return Some(full);
        }
        for r in 0..size {
            if sol[r] * signs[active[r]] <= 0.0 {
                signs[active[r]] = 0.0;
            }
        }
        active = keep.iter().map(|&r| active[r]).collect();
    }
    None
}

/// Laplacian-regularized ℓ1 coding by SpaRSA:
/// `min ‖X − DA‖²_F + λ‖A‖₁ + γ tr(A L Aᵀ)`.
pub fn solve_laplacian(
    d: &DMatrix<f64>,
    patch: &Patch,
    lambda: f64,
    gamma: f64,
    lap: &DMatrix<f64>,
    cfg: &SolverConfig,
) -> Result<Solution> {
    let x = patch.pixels();
    validate_inputs(d, x, lambda, cfg)?;
    check_lap(lap, x.ncols())?;
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidArgument(format!("gamma must be >= 0, got {gamma}")));
    }
    let (n, p) = (d.ncols(), x.ncols());
    let smooth = Smooth::new(d, x, Some((lap, gamma)));
    let dtx = &smooth.dtx;
    let phi = |a: &DMatrix<f64>| smooth.value(a, &smooth.hess(a)) + lambda * l1_norm(a);

    let mut a = DMatrix::<f64>::zeros(n, p);
    let mut grad = smooth.grad(&a);
    let mut phi_a = smooth.xx;
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut history = Vec::new();
    if cfg.record_history {
        history.push(phi_a);
    }

    let mut converged = false;
    let mut certified = false;
    let mut iterations = 0;
    let mut support = Vec::new();
    let mut stable_for = 0usize;
    'outer: while iterations < cfg.max_outer_iters {
        iterations += 1;
        let mut eta = match &prev {
            None => cfg.eta0,
            Some((a_prev, g_prev)) => {
                let s = &a - a_prev;
                let yv = &grad - g_prev;
                let ss = frobenius_sq(&s);
                let sy = s.dot(&yv);
                if ss > 0.0 && sy > 0.0 {
                    (sy / ss).clamp(cfg.eta_min, cfg.eta_max)
                } else {
                    cfg.eta_min
                }
            }
        };

        let (z, hz, phi_z) = loop {
            let mut z = &a - &grad / eta;
            let tau = lambda / eta;
            z.iter_mut().for_each(|v| *v = soft_threshold(*v, tau));
            let hz = smooth.hess(&z);
            let phi_z = smooth.value(&z, &hz) + lambda * l1_norm(&z);
            let dist = frobenius_sq(&(&z - &a));
            if phi_z <= phi_a - 0.5 * SPARSA_SIGMA * eta * dist {
                break (z, hz, phi_z);
            }
            eta *= cfg.eta_mu;
            if eta > cfg.eta_max {
                // No acceptable step left at the largest scale.
                break 'outer;
            }
        };

        let change = relative_change(phi_a, phi_z);
        let moved = z != a;
        let g_next = smooth.grad(&hz);
        prev = Some((std::mem::replace(&mut a, z), std::mem::replace(&mut grad, g_next)));
        phi_a = phi_z;
        if cfg.record_history {
            history.push(phi_a);
        }
        if change < cfg.tol || !moved {
            converged = true;
            break;
        }
        if track_support(&a, Penalty::Elementwise, &mut support, &mut stable_for) {
            if let Some((refined, phi_r)) = try_refine(phi_a, &phi, || {
                refine_laplacian(d, dtx, &a, lambda, gamma, lap)
            }) {
                a = refined;
                phi_a = phi_r;
                if cfg.record_history {
                    history.push(phi_a);
                }
                converged = true;
                certified = true;
                break;
            }
        }
    }

    if !certified {
        if let Some((refined, phi_r)) =
            try_refine(phi_a, &phi, || refine_laplacian(d, dtx, &a, lambda, gamma, lap))
        {
            a = refined;
            phi_a = phi_r;
            if cfg.record_history {
                history.push(phi_a);
            }
        }
    }

    let objective = frobenius_sq(&(x - d * &a)) + lambda * l1_norm(&a) + gamma * laplacian_trace(&a, lap);
    Ok(Solution {
        code: SparseCode { coeffs: a },
        converged,
        iterations,
        objective,
        history,
    })
}
