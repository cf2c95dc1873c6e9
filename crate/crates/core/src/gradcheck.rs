//! Randomized agreement checks between the analytic dictionary gradients
//! and central differences of the loss evaluated through the solvers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::classification::{build_laplacian, LaplacianSpec};
use crate::error::{Error, Result};
use crate::fixed_point::{
    self, active_set, classification_loss, finite_diff_grad_d, ActiveKind, GradOutput, Target, ACTIVE_TOL,
};
use crate::sparse_recovery::{normalize_columns, solve, Patch, Prior, PriorKind, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub bands: usize,
    pub atoms: usize,
    pub classes: usize,
    pub lambda: f64,
    pub gamma: f64,
    pub mu: f64,
    pub h: f64,
    /// Maximum relative Frobenius error for a trial to pass.
    pub tol: f64,
    /// Patch widths used by the joint and Laplacian priors, cycled per
    /// trial. The ℓ1 prior always uses one pixel.
    pub patch_sizes: [usize; 2],
    /// Support-unstable draws allowed per requested trial before giving up.
    pub redraws_per_trial: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            bands: 10,
            atoms: 8,
            classes: 3,
            lambda: 0.1,
            gamma: 1e-3,
            mu: 1e-4,
            h: 1e-6,
            tol: 1e-4,
            patch_sizes: [1, 4],
            redraws_per_trial: 20,
        }
    }
}

/// A random problem instance.
#[derive(Debug, Clone)]
pub struct Instance {
    pub d: DMatrix<f64>,
    pub patch: Patch,
    pub w: DMatrix<f64>,
    pub y: DVector<f64>,
    pub lap: Option<DMatrix<f64>>,
    pub prior: Prior,
    pub mu: f64,
}

impl Instance {
    /// Draws normalized `D`, a sparse `A₀`, `X = DA₀ + 0.01·noise`, Gaussian
    /// `W` and a one-hot label.
    pub fn random(prior: PriorKind, pixels: usize, cfg: &GradcheckConfig, rng: &mut impl Rng) -> Result<Self> {
        let (m, n, k) = (cfg.bands, cfg.atoms, cfg.classes);
        let mut d = DMatrix::from_fn(m, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        normalize_columns(&mut d)?;
        let mut a0 = DMatrix::zeros(n, pixels);
        let support = rand::seq::index::sample(rng, n, 3.min(n));
        for i in support.iter() {
            for p in 0..pixels {
                let mag = rng.random_range(0.5..1.5);
                a0[(i, p)] = if rng.random_bool(0.5) { mag } else { -mag };
            }
        }
        let noise = DMatrix::from_fn(m, pixels, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
        let x = &d * a0 + noise;
        let patch = Patch::new(x, pixels / 2)?;
        let w = DMatrix::from_fn(k, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut y = DVector::zeros(k);
        y[rng.random_range(0..k)] = 1.0;
        let prior = Prior::new(prior, cfg.lambda, cfg.gamma)?;
        let lap = (prior.kind() == PriorKind::Laplacian).then(|| build_laplacian(&patch, LaplacianSpec::Median));
        Ok(Instance {
            d,
            patch,
            w,
            y,
            lap,
            prior,
            mu: cfg.mu,
        })
    }

    fn support_kind(&self) -> ActiveKind {
        match self.prior.kind() {
            PriorKind::Joint => ActiveKind::Rows,
            _ => ActiveKind::Entries,
        }
    }

    /// Classification loss of the center code under dictionary `d`, and the
    /// support of the full code.
    pub fn loss(&self, d: &DMatrix<f64>, solver: &SolverConfig) -> Result<(f64, Vec<usize>)> {
        let sol = solve(d, &self.patch, &self.prior, self.lap.as_ref(), solver)?;
        let alpha_c = sol.code.column(self.patch.center_index());
        let support = active_set(&sol.code.coeffs, self.support_kind(), ACTIVE_TOL).indices;
        Ok((classification_loss(&self.w, &alpha_c, &self.y, self.mu), support))
    }

    /// The analytic gradients at `self.d`.
    pub fn analytic(&self, solver: &SolverConfig) -> Result<GradOutput> {
        let sol = solve(&self.d, &self.patch, &self.prior, self.lap.as_ref(), solver)?;
        let code = &sol.code.coeffs;
        let target = Target {
            w: &self.w,
            y: &self.y,
            mu: self.mu,
        };
        match self.prior {
            Prior::L1 { lambda } => fixed_point::grad_d_l1(
                &self.d,
                &self.patch.center_pixel(),
                &sol.code.column(0),
                &target,
                lambda,
                ACTIVE_TOL,
            ),
            Prior::Joint { lambda } => {
                fixed_point::grad_d_joint(&self.d, &self.patch, code, &target, lambda, ACTIVE_TOL)
            }
            Prior::Laplacian { lambda, gamma } => fixed_point::grad_d_laplacian(
                &self.d,
                &self.patch,
                code,
                &target,
                lambda,
                gamma,
                self.lap.as_ref().expect("laplacian instance"),
                ACTIVE_TOL,
            ),
        }
    }
}

/// Outcome of one support-stable trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trial {
    pub pixels: usize,
    pub rel_error: f64,
    pub passed: bool,
}

/// Runs one trial; `None` when the support moved under the perturbations
/// or the active system was degenerate.
pub fn run_trial(inst: &Instance, cfg: &GradcheckConfig) -> Result<Option<Trial>> {
    let solver = SolverConfig::precise();
    let analytic = match inst.analytic(&solver) {
        Ok(g) => g,
        Err(Error::EmptyActiveSet | Error::SingularSystem { .. } | Error::ZeroRow { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let fd = finite_diff_grad_d(
        |d| inst.loss(d, &solver).map(|(l, s)| (l, Some(s))),
        &inst.d,
        cfg.h,
    )?;
    if !fd.is_stable() {
        return Ok(None);
    }
    let denom = fd.grad.norm().max(f64::MIN_POSITIVE);
    let rel_error = (&analytic.grad_d - &fd.grad).norm() / denom;
    Ok(Some(Trial {
        pixels: inst.patch.len(),
        rel_error,
        passed: rel_error <= cfg.tol,
    }))
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub prior: PriorKind,
    pub requested: usize,
    pub trials: Vec<Trial>,
    /// Instances drawn, including discarded unstable ones.
    pub attempts: usize,
}

impl GradcheckReport {
    pub fn passed(&self) -> usize {
        self.trials.iter().filter(|t| t.passed).count()
    }

    pub fn max_error(&self) -> f64 {
        self.trials.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }

    /// At least `ceil(fraction · requested)` stable trials passed.
    pub fn meets(&self, fraction: f64) -> bool {
        self.passed() as f64 >= (fraction * self.requested as f64).ceil()
    }

    pub fn summary(&self) -> String {
        format!(
            "prior={} passed {}/{} (stable {}, attempts {}, max rel error {:.3e})",
            self.prior,
            self.passed(),
            self.requested,
            self.trials.len(),
            self.attempts,
            self.max_error()
        )
    }
}

/// Draws instances until `trials` support-stable ones have been checked or
/// the redraw budget is exhausted.
pub fn gradcheck(prior: PriorKind, trials: usize, seed: u64, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if trials == 0 {
        return Err(Error::InvalidArgument("need at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let budget = trials * cfg.redraws_per_trial.max(1);
    let mut out = Vec::with_capacity(trials);
    let mut attempts = 0;
    while out.len() < trials && attempts < budget {
        let pixels = match prior {
            PriorKind::L1 => 1,
            _ => cfg.patch_sizes[out.len() % cfg.patch_sizes.len()],
        };
        attempts += 1;
        let inst = Instance::random(prior, pixels, cfg, &mut rng)?;
        if let Some(t) = run_trial(&inst, cfg)? {
            out.push(t);
        }
    }
    Ok(GradcheckReport {
        prior,
        requested: trials,
        trials: out,
        attempts,
    })
}
