#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tddl_core::classification::{build_laplacian, LaplacianSpec};
use tddl_core::fixed_point::{self, Target, ACTIVE_TOL};
use tddl_core::sparse_recovery::{self, normalize_columns, objective, Patch, Prior, PriorKind, SolverConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut impl Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample::<f64, _>(StandardNormal))
}

pub fn unit_dictionary(rng: &mut impl Rng, m: usize, n: usize) -> DMatrix<f64> {
    let mut d = gaussian(rng, m, n);
    normalize_columns(&mut d).unwrap();
    d
}

/// Plain proximal gradient with the fixed step `1/L`, where `L` bounds the
/// Lipschitz constant of the smooth part via a full eigendecomposition.
pub fn ista_oracle(d: &DMatrix<f64>, x: &DMatrix<f64>, prior: &Prior, lap: Option<&DMatrix<f64>>) -> (DMatrix<f64>, f64) {
    let gram = d.tr_mul(d);
    let dtx = d.tr_mul(x);
    let top = |m: &DMatrix<f64>| m.clone().symmetric_eigen().eigenvalues.max();
    let gamma = prior.gamma().unwrap_or(0.0);
    let lap_top = lap.map(top).unwrap_or(0.0).max(0.0);
    let lip = 2.0 * (top(&gram) + gamma * lap_top);
    let step = 1.0 / lip;
    let tau = prior.lambda() * step;
    let mut a = DMatrix::<f64>::zeros(d.ncols(), x.ncols());
    for _ in 0..400_000 {
        let mut grad = (&gram * &a - &dtx) * 2.0;
        if let Some(l) = lap {
            grad += (&a * l) * (2.0 * gamma);
        }
        let mut next = &a - grad * step;
        match prior.kind() {
            PriorKind::Joint => {
                for mut row in next.row_iter_mut() {
                    let norm = row.norm();
                    let scale = if norm <= tau { 0.0 } else { 1.0 - tau / norm };
                    row *= scale;
                }
            }
            _ => next.iter_mut().for_each(|v| *v = v.signum() * (v.abs() - tau).max(0.0)),
        }
        let moved = (&next - &a).amax();
        a = next;
        if moved < 1e-15 {
            break;
        }
    }
    let f = objective(d, x, &a, prior, lap).unwrap();
    (a, f)
}

/// Small random coding problem for the solver comparison.
pub struct SmallInstance {
    pub d: DMatrix<f64>,
    pub patch: Patch,
    pub prior: Prior,
    pub lap: Option<DMatrix<f64>>,
}

pub fn small_instance(kind: PriorKind, seed: u64) -> SmallInstance {
    let mut r = rng(seed);
    let m = r.random_range(4..=8);
    let n = r.random_range(2..=6);
    let p = match kind {
        PriorKind::L1 => 1,
        _ => r.random_range(1..=3),
    };
    let d = unit_dictionary(&mut r, m, n);
    let x = gaussian(&mut r, m, p);
    let lambda = r.random_range(0.05..0.8);
    let prior = Prior::new(kind, lambda, 0.2).unwrap();
    let patch = Patch::new(x, p / 2).unwrap();
    let lap = (kind == PriorKind::Laplacian).then(|| build_laplacian(&patch, LaplacianSpec::Median));
    SmallInstance { d, patch, prior, lap }
}

/// Solver vs fixed-step oracle on 20 instances; returns the worst objective
/// gap and whether every run kept a non-increasing objective history.
pub fn solver_oracle_gap(kind: PriorKind, seed0: u64) -> (f64, bool) {
    let cfg = SolverConfig {
        record_history: true,
        ..SolverConfig::default()
    };
    let mut worst: f64 = 0.0;
    let mut monotone = true;
    for s in 0..20 {
        let inst = small_instance(kind, seed0 + s);
        let sol = sparse_recovery::solve(&inst.d, &inst.patch, &inst.prior, inst.lap.as_ref(), &cfg).unwrap();
        let (_, f_oracle) = ista_oracle(&inst.d, inst.patch.pixels(), &inst.prior, inst.lap.as_ref());
        worst = worst.max((sol.objective - f_oracle).abs());
        monotone &= sol
            .history
            .windows(2)
            .all(|w| w[1] <= w[0] + 1e-12 * w[0].abs().max(1.0));
    }
    (worst, monotone)
}

/// Largest objective and gradient disagreements between the three priors
/// on single-pixel problems with `γ = 0`.
pub fn reduction_gaps(seed: u64) -> (f64, f64) {
    let mut r = rng(seed);
    let (m, n, k) = (10, 8, 3);
    let d = unit_dictionary(&mut r, m, n);
    let x: DVector<f64> = gaussian(&mut r, m, 1).column(0).into_owned();
    let patch = Patch::single(&x).unwrap();
    let lap = DMatrix::zeros(1, 1);
    let lambda = 0.1;
    let cfg = SolverConfig::precise();
    let l1 = sparse_recovery::solve_l1(&d, &x, lambda, &cfg).unwrap();
    let js = sparse_recovery::solve_joint(&d, &patch, lambda, &cfg).unwrap();
    let lp = sparse_recovery::solve_laplacian(&d, &patch, lambda, 0.0, &lap, &cfg).unwrap();
    let obj_gap = (l1.objective - js.objective)
        .abs()
        .max((l1.objective - lp.objective).abs());

    let w = gaussian(&mut r, k, n);
    let mut y = DVector::zeros(k);
    y[r.random_range(0..k)] = 1.0;
    let target = Target { w: &w, y: &y, mu: 1e-4 };
    let code = &l1.code.coeffs;
    let g1 = fixed_point::grad_d_l1(&d, &x, &l1.code.column(0), &target, lambda, ACTIVE_TOL).unwrap();
    let gj = fixed_point::grad_d_joint(&d, &patch, code, &target, lambda, ACTIVE_TOL).unwrap();
    let gl = fixed_point::grad_d_laplacian(&d, &patch, code, &target, lambda, 0.0, &lap, ACTIVE_TOL).unwrap();
    let grad_gap = (&g1.grad_d - &gj.grad_d)
        .amax()
        .max((&g1.grad_d - &gl.grad_d).amax());
    (obj_gap, grad_gap)
}

/// A random patch of `p` pixels with `m` bands, positive like radiance.
pub fn random_patch(rng: &mut impl Rng, m: usize, p: usize) -> Patch {
    let x = DMatrix::from_fn(m, p, |_, _| rng.random_range(0.0..1.0));
    Patch::new(x, p / 2).unwrap()
}

/// Checks symmetry, zero row sums and positive semidefiniteness.
pub fn laplacian_is_valid(l: &DMatrix<f64>) -> bool {
    let p = l.nrows();
    let symmetric = (l - l.transpose()).amax() <= 1e-12;
    let zero_rows = (0..p).all(|i| l.row(i).sum().abs() <= 1e-9);
    let psd = l.clone().symmetric_eigen().eigenvalues.min() >= -1e-10;
    symmetric && zero_rows && psd
}
