//! Dictionary and classifier initialization, the unsupervised online
//! dictionary learning baseline, and the supervised stochastic-gradient
//! training loop.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::classification::{build_laplacian, LaplacianSpec};
use crate::error::{Error, Result};
use crate::fixed_point::{self, classification_loss, GradOutput, Target, ACTIVE_TOL};
use crate::linalg::spd_solve_mat;
use crate::sparse_recovery::{
    self, solve_l1, Dictionary, Patch, Prior, PriorKind, SolverConfig,
};

/// Linear classifier weights `W` (`K × N`).
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    weights: DMatrix<f64>,
}

impl Classifier {
    pub fn new(weights: DMatrix<f64>) -> Result<Self> {
        if let Some(index) = weights.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        Ok(Classifier { weights })
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub gamma: f64,
    pub mu: f64,
    pub rho: f64,
    pub t0: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub atoms_per_class: usize,
    pub window: usize,
    pub prior: PriorKind,
    pub seed: u64,
    pub laplacian: LaplacianSpec,
}

impl TrainConfig {
    /// Defaults for a prior: λ = 1e-2, γ = 1e-3, μ = 1e-4, ρ = 1e-2 (ℓ1),
    /// 1e-3 (joint) or 1e-1 (Laplacian), T = 200, batch 100, t0 = T/10,
    /// 5 atoms per class, 3×3 window.
    pub fn for_prior(prior: PriorKind) -> Self {
        let rho = match prior {
            PriorKind::L1 => 1e-2,
            PriorKind::Joint => 1e-3,
            PriorKind::Laplacian => 1e-1,
        };
        let total_iters = 200;
        TrainConfig {
            lambda: 1e-2,
            gamma: 1e-3,
            mu: 1e-4,
            rho,
            t0: total_iters as f64 / 10.0,
            total_iters,
            batch_size: 100,
            atoms_per_class: 5,
            window: 3,
            prior,
            seed: 0,
            laplacian: LaplacianSpec::Median,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if !(self.lambda > 0.0) {
            return bad(format!("lambda must be > 0, got {}", self.lambda));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if !(self.mu >= 0.0) {
            return bad(format!("mu must be >= 0, got {}", self.mu));
        }
        if !(self.rho >= 0.0) || !self.rho.is_finite() {
            return bad(format!("rho must be >= 0, got {}", self.rho));
        }
        if !(self.t0 >= 0.0) || self.t0 > self.total_iters as f64 {
            return bad(format!("t0 must lie in [0, T], got {}", self.t0));
        }
        if self.batch_size == 0 || self.atoms_per_class == 0 {
            return bad("batch size and atoms per class must be positive".into());
        }
        if self.window == 0 || self.window % 2 == 0 {
            return bad(format!("window must be odd, got {}", self.window));
        }
        if let LaplacianSpec::Fixed(s) = self.laplacian {
            if !(s > 0.0) || !s.is_finite() {
                return bad(format!("sigma must be finite and > 0, got {s}"));
            }
        }
        Ok(())
    }

    pub fn prior(&self) -> Result<Prior> {
        Prior::new(self.prior, self.lambda, self.gamma)
    }

    /// The ℓ1 prior codes single pixels.
    pub fn effective_window(&self) -> usize {
        match self.prior {
            PriorKind::L1 => 1,
            _ => self.window,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub dictionary: Dictionary,
    pub classifier: Classifier,
    pub config: TrainConfig,
    pub class_names: Vec<String>,
}

/// A training patch and the zero-based class of its center pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub patch: Patch,
    pub label: usize,
}

/// `min(ρ, ρ·t0/t)`.
pub fn learning_rate(t: usize, rho: f64, t0: f64) -> f64 {
    let t = t.max(1) as f64;
    rho.min(rho * t0 / t)
}

fn one_hot(label: usize, k: usize) -> DVector<f64> {
    let mut y = DVector::zeros(k);
    y[label] = 1.0;
    y
}

/// Draws `atoms_per_class` training pixels per class as normalized atoms.
///
/// A class with fewer pixels than requested atoms is sampled with
/// replacement and every atom drawn for it is perturbed by `N(0, 1e-3²)`
/// noise before normalization.
pub fn init_dictionary(
    pixels: &DMatrix<f64>,
    labels: &[usize],
    k: usize,
    atoms_per_class: usize,
    seed: u64,
) -> Result<Dictionary> {
    if pixels.ncols() != labels.len() {
        return Err(Error::dims(format!("{} pixels, {} labels", pixels.ncols(), labels.len())));
    }
    if atoms_per_class == 0 || k == 0 {
        return Err(Error::InvalidArgument("need at least one class and one atom".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            return Err(Error::InvalidArgument(format!("label {l} out of range for {k} classes")));
        }
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1e-3).expect("valid sd");
    let m = pixels.nrows();
    let mut atoms = DMatrix::zeros(m, k * atoms_per_class);
    for (class, members) in by_class.iter().enumerate() {
        if members.is_empty() {
            return Err(Error::EmptyClass { class });
        }
        let short = members.len() < atoms_per_class;
        let picks: Vec<usize> = if short {
            (0..atoms_per_class)
                .map(|_| members[rng.random_range(0..members.len())])
                .collect()
        } else {
            sample(&mut rng, members.len(), atoms_per_class)
                .into_iter()
                .map(|i| members[i])
                .collect()
        };
        for (a, &src) in picks.iter().enumerate() {
            let mut col = pixels.column(src).into_owned();
            if short {
                col.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            }
            atoms.set_column(class * atoms_per_class + a, &col);
        }
    }
    Dictionary::normalized(atoms)
}

/// Mean ℓ1 sparse-coding objective of the columns of `probe` under `d`.
pub fn coding_objective(d: &DMatrix<f64>, probe: &DMatrix<f64>, lambda: f64, cfg: &SolverConfig) -> Result<f64> {
    let values: Vec<Result<f64>> = (0..probe.ncols())
        .into_par_iter()
        .map(|j| Ok(solve_l1(d, &probe.column(j).into_owned(), lambda, cfg)?.objective))
        .collect();
    let mut total = 0.0;
    for v in values {
        total += v?;
    }
    Ok(total / probe.ncols() as f64)
}

/// Online dictionary learning on the columns of `samples`.
pub fn odl_train(
    samples: &DMatrix<f64>,
    d0: &Dictionary,
    lambda: f64,
    iters: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Dictionary> {
    odl_run(samples, d0, lambda, iters, batch_size, seed, None).map(|(d, _)| d)
}

/// [`odl_train`] that also reports the mean coding objective on `probe`
/// before training and after every iteration.
pub fn odl_train_with_probe(
    samples: &DMatrix<f64>,
    d0: &Dictionary,
    lambda: f64,
    iters: usize,
    batch_size: usize,
    seed: u64,
    probe: &DMatrix<f64>,
) -> Result<(Dictionary, Vec<f64>)> {
    odl_run(samples, d0, lambda, iters, batch_size, seed, Some(probe))
}

fn odl_run(
    samples: &DMatrix<f64>,
    d0: &Dictionary,
    lambda: f64,
    iters: usize,
    batch_size: usize,
    seed: u64,
    probe: Option<&DMatrix<f64>>,
) -> Result<(Dictionary, Vec<f64>)> {
    if iters == 0 {
        return Err(Error::InvalidArgument("ODL needs at least one iteration".into()));
    }
    if samples.ncols() == 0 || batch_size == 0 {
        return Err(Error::EmptyBatch);
    }
    if samples.nrows() != d0.bands() {
        return Err(Error::dims(format!(
            "samples have {} bands, dictionary {}",
            samples.nrows(),
            d0.bands()
        )));
    }
    let cfg = SolverConfig::default();
    let n = d0.n_atoms();
    let mut d = d0.matrix().clone();
    let mut gram_acc = DMatrix::<f64>::zeros(n, n);
    let mut cross_acc = DMatrix::<f64>::zeros(d.nrows(), n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe_trace = Vec::new();
    if let Some(p) = probe {
        probe_trace.push(coding_objective(&d, p, lambda, &cfg)?);
    }

    for _ in 0..iters {
        let batch: Vec<usize> = (0..batch_size)
            .map(|_| rng.random_range(0..samples.ncols()))
            .collect();
        let codes: Vec<Result<DVector<f64>>> = batch
            .par_iter()
            .map(|&j| {
                let x = samples.column(j).into_owned();
                Ok(solve_l1(&d, &x, lambda, &cfg)?.code.column(0))
            })
            .collect();
        for (&j, code) in batch.iter().zip(codes) {
            let alpha = code?;
            gram_acc += &alpha * alpha.transpose();
            cross_acc += samples.column(j) * alpha.transpose();
        }
        // One sweep of block-coordinate descent over the atoms, each
        // projected back to the unit sphere.
        for j in 0..n {
            let ajj = gram_acc[(j, j)];
            if ajj <= 1e-12 {
                continue;
            }
            let u = d.column(j) + (cross_acc.column(j) - &d * gram_acc.column(j)) / ajj;
            let norm = u.norm();
            if norm > 0.0 && norm.is_finite() {
                d.set_column(j, &(u / norm));
            }
        }
        if let Some(p) = probe {
            probe_trace.push(coding_objective(&d, p, lambda, &cfg)?);
        }
    }
    Ok((Dictionary::new(d)?, probe_trace))
}

/// Ridge least squares `W = Y Aᵀ (A Aᵀ + μ S I)⁻¹` for codes `A` (`N × S`)
/// and one-hot labels `Y` (`K × S`).
pub fn init_classifier(codes: &DMatrix<f64>, labels_onehot: &DMatrix<f64>, mu: f64) -> Result<Classifier> {
    let s = codes.ncols();
    if s == 0 {
        return Err(Error::InvalidArgument("no training codes".into()));
    }
    if labels_onehot.ncols() != s {
        return Err(Error::dims(format!("{s} codes, {} labels", labels_onehot.ncols())));
    }
    let n = codes.nrows();
    let system = codes * codes.transpose() + DMatrix::<f64>::identity(n, n) * (mu * s as f64);
    // (AAᵀ + μSI) Wᵀ = A Yᵀ
    let wt = spd_solve_mat(&system, &(codes * labels_onehot.transpose()))?;
    Classifier::new(wt.transpose())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    /// Mean classification loss over the non-skipped batch samples, before
    /// the update.
    pub loss: f64,
    pub skip_count: usize,
    pub wall_ms: u128,
}

impl TrainRecord {
    pub fn to_line(&self) -> String {
        format!(
            "iteration={} loss={:.9e} skip_count={} wall_ms={}",
            self.iteration, self.loss, self.skip_count, self.wall_ms
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<TrainRecord>,
}

enum SampleResult {
    Grad { out: GradOutput, loss: f64 },
    Skipped,
}

fn sample_gradient(
    d: &DMatrix<f64>,
    w: &DMatrix<f64>,
    sample: &TrainingSample,
    cfg: &TrainConfig,
    prior: &Prior,
    solver: &SolverConfig,
) -> Result<SampleResult> {
    let k = w.nrows();
    let y = one_hot(sample.label, k);
    let target = Target { w, y: &y, mu: cfg.mu };
    let patch = match prior.kind() {
        PriorKind::L1 => Patch::single(&sample.patch.center_pixel())?,
        _ => sample.patch.clone(),
    };
    let lap = match prior.kind() {
        PriorKind::Laplacian => Some(build_laplacian(&patch, cfg.laplacian)),
        _ => None,
    };
    let sol = sparse_recovery::solve(d, &patch, prior, lap.as_ref(), solver)?;
    if !sol.converged {
        return Ok(SampleResult::Skipped);
    }
    let code = &sol.code.coeffs;
    let alpha_c = sol.code.column(patch.center_index());
    let loss = classification_loss(w, &alpha_c, &y, cfg.mu);
    let grad = match *prior {
        Prior::L1 { lambda } => {
            fixed_point::grad_d_l1(d, &patch.center_pixel(), &alpha_c, &target, lambda, ACTIVE_TOL)
        }
        Prior::Joint { lambda } => fixed_point::grad_d_joint(d, &patch, code, &target, lambda, ACTIVE_TOL),
        Prior::Laplacian { lambda, gamma } => fixed_point::grad_d_laplacian(
            d,
            &patch,
            code,
            &target,
            lambda,
            gamma,
            lap.as_ref().expect("built above"),
            ACTIVE_TOL,
        ),
    };
    match grad {
        Ok(out) => Ok(SampleResult::Grad { out, loss }),
        Err(Error::EmptyActiveSet | Error::SingularSystem { .. } | Error::ZeroRow { .. }) => {
            Ok(SampleResult::Skipped)
        }
        Err(e) => Err(e),
    }
}

fn renormalize(d: &mut DMatrix<f64>) -> Result<()> {
    for (j, mut col) in d.column_iter_mut().enumerate() {
        let norm = col.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::InvalidDictionary(format!("atom {j} collapsed during training")));
        }
        // Columns already at unit norm are left bit-identical.
        if (norm - 1.0).abs() > 4.0 * f64::EPSILON {
            col /= norm;
        }
    }
    Ok(())
}

/// Supervised mini-batch SGD on `(D, W)`.
///
/// Each iteration draws `batch_size` samples uniformly with replacement,
/// codes them under the configured prior, averages the per-sample gradients
/// over the batch (skipped samples contribute zero), takes a step of size
/// `learning_rate(t)` and renormalizes the atoms. Per-sample work runs in
/// parallel; the reduction is sequential in batch order, so results are
/// deterministic for a given seed.
pub fn tddl_train(data: &[TrainingSample], model0: Model, solver: &SolverConfig) -> Result<TrainOutcome> {
    tddl_train_observed(data, model0, solver, |_, _, _| {})
}

/// [`tddl_train`], calling `observe(t, D, W)` after every iteration.
pub fn tddl_train_observed(
    data: &[TrainingSample],
    model0: Model,
    solver: &SolverConfig,
    mut observe: impl FnMut(usize, &DMatrix<f64>, &DMatrix<f64>),
) -> Result<TrainOutcome> {
    let cfg = model0.config;
    cfg.validate()?;
    let prior = cfg.prior()?;
    if cfg.total_iters == 0 {
        return Ok(TrainOutcome { model: model0, log: Vec::new() });
    }
    if data.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let k = model0.classifier.n_classes();
    if let Some(bad) = data.iter().find(|s| s.label >= k) {
        return Err(Error::InvalidArgument(format!("label {} out of range for {k} classes", bad.label)));
    }
    if data.iter().any(|s| s.patch.bands() != model0.dictionary.bands()) {
        return Err(Error::dims("training patches do not match the dictionary band count"));
    }

    let mut d = model0.dictionary.matrix().clone();
    let mut w = model0.classifier.weights().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5eed));
    let mut log = Vec::with_capacity(cfg.total_iters);
    let start = Instant::now();

    for t in 1..=cfg.total_iters {
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        let results: Vec<Result<SampleResult>> = batch
            .par_iter()
            .map(|&i| sample_gradient(&d, &w, &data[i], &cfg, &prior, solver))
            .collect();

        let mut grad_d = DMatrix::zeros(d.nrows(), d.ncols());
        let mut grad_w = DMatrix::zeros(w.nrows(), w.ncols());
        let (mut loss, mut used, mut skipped) = (0.0, 0usize, 0usize);
        for r in results {
            match r? {
                SampleResult::Grad { out, loss: l } => {
                    grad_d += &out.grad_d;
                    grad_w += &out.grad_w;
                    loss += l;
                    used += 1;
                }
                SampleResult::Skipped => skipped += 1,
            }
        }
        let step = learning_rate(t, cfg.rho, cfg.t0) / cfg.batch_size as f64;
        if used > 0 && step > 0.0 {
            w -= grad_w * step;
            d -= grad_d * step;
            if d.iter().chain(w.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("training diverged at iteration {t}")));
            }
            renormalize(&mut d)?;
        }
        let record = TrainRecord {
            iteration: t,
            loss: if used > 0 { loss / used as f64 } else { f64::NAN },
            skip_count: skipped,
            wall_ms: start.elapsed().as_millis(),
        };
        if skipped > 0 {
            log::debug!("iteration {t}: skipped {skipped}/{} samples", cfg.batch_size);
        }
        log.push(record);
        observe(t, &d, &w);
    }

    Ok(TrainOutcome {
        model: Model {
            dictionary: Dictionary::new(d)?,
            classifier: Classifier::new(w)?,
            config: cfg,
            class_names: model0.class_names,
        },
        log,
    })
}

/// Settings for the unsupervised stage that initializes supervised training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OdlConfig {
    pub iters: usize,
    pub batch_size: usize,
}

impl Default for OdlConfig {
    fn default() -> Self {
        OdlConfig {
            iters: 30,
            batch_size: 200,
        }
    }
}

/// Codes every sample under the configured prior and returns the center
/// columns (`N × S`).
pub fn center_codes(
    d: &DMatrix<f64>,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    solver: &SolverConfig,
) -> Result<DMatrix<f64>> {
    let prior = cfg.prior()?;
    let cols: Vec<Result<DVector<f64>>> = samples
        .par_iter()
        .map(|s| {
            let patch = match prior.kind() {
                PriorKind::L1 => Patch::single(&s.patch.center_pixel())?,
                _ => s.patch.clone(),
            };
            let lap = match prior.kind() {
                PriorKind::Laplacian => Some(build_laplacian(&patch, cfg.laplacian)),
                _ => None,
            };
            let sol = sparse_recovery::solve(d, &patch, &prior, lap.as_ref(), solver)?;
            Ok(sol.code.column(patch.center_index()))
        })
        .collect();
    let mut out = DMatrix::zeros(d.ncols(), samples.len());
    for (j, c) in cols.into_iter().enumerate() {
        out.set_column(j, &c?);
    }
    Ok(out)
}

/// Per-class dictionary initialization followed by ODL on the center
/// pixels of `samples` (skipped when `odl.iters` is 0).
pub fn unsupervised_dictionary(
    samples: &[TrainingSample],
    k: usize,
    cfg: &TrainConfig,
    odl: &OdlConfig,
) -> Result<Dictionary> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let m = samples[0].patch.bands();
    let mut centers = DMatrix::zeros(m, samples.len());
    for (j, s) in samples.iter().enumerate() {
        if s.patch.bands() != m {
            return Err(Error::dims("training patches have inconsistent band counts"));
        }
        centers.set_column(j, &s.patch.center_pixel());
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let dictionary = init_dictionary(&centers, &labels, k, cfg.atoms_per_class, cfg.seed)?;
    if odl.iters == 0 {
        return Ok(dictionary);
    }
    odl_train(&centers, &dictionary, cfg.lambda, odl.iters, odl.batch_size, cfg.seed)
}

/// Wraps `dictionary` with a ridge classifier fit on the center codes under
/// the configured prior.
pub fn initial_model(
    samples: &[TrainingSample],
    class_names: Vec<String>,
    cfg: &TrainConfig,
    dictionary: Dictionary,
    solver: &SolverConfig,
) -> Result<Model> {
    cfg.validate()?;
    let k = class_names.len();
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let codes = center_codes(dictionary.matrix(), samples, cfg, solver)?;
    let mut onehot = DMatrix::zeros(k, samples.len());
    for (j, s) in samples.iter().enumerate() {
        if s.label >= k {
            return Err(Error::InvalidArgument(format!("label {} out of range for {k} classes", s.label)));
        }
        onehot[(s.label, j)] = 1.0;
    }
    let classifier = init_classifier(&codes, &onehot, cfg.mu)?;
    Ok(Model {
        dictionary,
        classifier,
        config: *cfg,
        class_names,
    })
}

/// The full training pipeline: [`unsupervised_dictionary`], then
/// [`initial_model`], then supervised training for `cfg.total_iters`
/// iterations.
pub fn train_model(
    samples: &[TrainingSample],
    class_names: Vec<String>,
    cfg: &TrainConfig,
    odl: &OdlConfig,
    solver: &SolverConfig,
) -> Result<TrainOutcome> {
    let dictionary = unsupervised_dictionary(samples, class_names.len(), cfg, odl)?;
    let model0 = initial_model(samples, class_names, cfg, dictionary, solver)?;
    tddl_train(samples, model0, solver)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn learning_rate_examples() {
        assert_eq!(learning_rate(1, 0.1, 100.0), 0.1);
        assert_abs_diff_eq!(learning_rate(1000, 0.1, 100.0), 0.01, epsilon = 1e-15);
        assert_eq!(learning_rate(100, 0.1, 100.0), 0.1);
    }

    #[test]
    fn init_dictionary_shapes_and_determinism() {
        let pixels = DMatrix::from_fn(6, 14, |i, j| ((i * 14 + j) as f64 * 0.31).sin() + 1.1);
        let labels: Vec<usize> = (0..14).map(|j| if j < 11 { 0 } else { 1 }).collect();
        let a = init_dictionary(&pixels, &labels, 2, 5, 9).unwrap();
        assert_eq!(a.n_atoms(), 10);
        for col in a.matrix().column_iter() {
            assert_abs_diff_eq!(col.norm(), 1.0, epsilon = 1e-9);
        }
        assert_eq!(a, init_dictionary(&pixels, &labels, 2, 5, 9).unwrap());
        // Class 1 has 3 pixels for 5 atoms: perturbed copies, not exact.
        let d = a.matrix();
        for x in 5..10 {
            for y in (x + 1)..10 {
                assert_ne!(d.column(x), d.column(y));
            }
        }
    }

    #[test]
    fn init_dictionary_empty_class() {
        let pixels = DMatrix::from_element(3, 2, 1.0);
        assert!(matches!(
            init_dictionary(&pixels, &[0, 0], 2, 1, 0),
            Err(Error::EmptyClass { class: 1 })
        ));
    }

    #[test]
    fn odl_rank_one_data_recovers_direction() {
        let x = DVector::from_vec(vec![0.3, -1.0, 0.5, 2.0]);
        let samples = DMatrix::from_fn(4, 20, |i, _| x[i]);
        let d0 = Dictionary::normalized(DMatrix::from_column_slice(4, 1, &[1.0, 1.0, 1.0, 1.0])).unwrap();
        let d = odl_train(&samples, &d0, 0.01, 15, 10, 3).unwrap();
        let target = &x / x.norm();
        let atom = d.matrix().column(0).into_owned();
        let err = (&atom - &target).norm().min((&atom + &target).norm());
        assert!(err < 1e-3, "atom error {err}");
    }

    #[test]
    fn odl_rejects_zero_iterations() {
        let samples = DMatrix::from_element(2, 3, 1.0);
        let d0 = Dictionary::normalized(DMatrix::from_element(2, 1, 1.0)).unwrap();
        assert!(odl_train(&samples, &d0, 0.1, 0, 5, 0).is_err());
        assert!(matches!(
            odl_train(&DMatrix::zeros(2, 0), &d0, 0.1, 1, 5, 0),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn classifier_limits() {
        let codes = DMatrix::<f64>::identity(3, 3);
        let y = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let w = init_classifier(&codes, &y, 1e-12).unwrap();
        assert!((w.weights() - &y).amax() < 1e-9);
        let w = init_classifier(&codes, &y, 1e12).unwrap();
        assert!(w.weights().amax() < 1e-9);
    }

    #[test]
    fn classifier_first_order_optimality() {
        let codes = DMatrix::from_fn(5, 12, |i, j| ((i * 12 + j) as f64 * 0.77).cos());
        let y = DMatrix::from_fn(3, 12, |i, j| if j % 3 == i { 1.0 } else { 0.0 });
        let mu = 1e-3;
        let w = init_classifier(&codes, &y, mu).unwrap();
        let w = w.weights();
        let grad = (w * &codes - &y) * codes.transpose() + w * (mu * 12.0);
        assert!(grad.amax() < 1e-8);
    }
}
