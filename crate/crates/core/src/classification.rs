//! Neighbourhood extraction, Laplacian weights, pixel classification and
//! accuracy metrics.

use nalgebra::DMatrix;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::hsi_io::{GroundTruth, HsiCube};
use crate::learning::{Model, TrainingSample};
use crate::sparse_recovery::{self, Patch, PriorKind, Solution, SolverConfig};

/// Odd side length of a square neighbourhood window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    size: usize,
}

impl WindowSpec {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::InvalidArgument(format!("window size must be odd, got {size}")));
        }
        Ok(WindowSpec { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        self.size / 2
    }
}

/// Bandwidth of the Gaussian similarity `c_ij = exp(−‖xᵢ − xⱼ‖²/σ²)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LaplacianSpec {
    /// σ is the median pairwise distance within the patch.
    Median,
    Fixed(f64),
}

/// Pixels of the window around `(row, col)`, clipped at the image border,
/// in row-major order. Positions flagged in `train_mask` are dropped except
/// the center itself.
pub fn extract_window(
    cube: &HsiCube,
    row: usize,
    col: usize,
    spec: WindowSpec,
    train_mask: Option<&[bool]>,
) -> Patch {
    let rad = spec.radius();
    let r0 = row.saturating_sub(rad);
    let r1 = (row + rad).min(cube.rows() - 1);
    let c0 = col.saturating_sub(rad);
    let c1 = (col + rad).min(cube.cols() - 1);
    let mut positions = Vec::with_capacity(spec.size() * spec.size());
    let mut center = 0;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let is_center = r == row && c == col;
            let masked = train_mask.is_some_and(|m| m[r * cube.cols() + c]);
            if is_center {
                center = positions.len();
                positions.push((r, c));
            } else if !masked {
                positions.push((r, c));
            }
        }
    }
    let bands = cube.bands();
    let mut pixels = DMatrix::zeros(bands, positions.len());
    for (j, &(r, c)) in positions.iter().enumerate() {
        for b in 0..bands {
            pixels[(b, j)] = cube.value(r, c, b) as f64;
        }
    }
    Patch::new(pixels, center).expect("window always holds its finite center pixel")
}

/// `L = B − C` with Gaussian similarity weights and `b_ii = Σ_j c_ij`.
///
/// Under the median heuristic a patch whose pixels are all identical has no
/// usable scale; σ = 1 is used instead.
pub fn build_laplacian(patch: &Patch, spec: LaplacianSpec) -> DMatrix<f64> {
    let x = patch.pixels();
    let p = x.ncols();
    let mut dist2 = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in (i + 1)..p {
            let v = (x.column(i) - x.column(j)).norm_squared();
            dist2[(i, j)] = v;
            dist2[(j, i)] = v;
        }
    }
    let sigma = match spec {
        LaplacianSpec::Fixed(s) => s,
        LaplacianSpec::Median => {
            let mut d: Vec<f64> = (0..p)
                .flat_map(|i| ((i + 1)..p).map(move |j| (i, j)))
                .map(|(i, j)| dist2[(i, j)].sqrt())
                .collect();
            if d.is_empty() {
                1.0
            } else {
                d.sort_by(f64::total_cmp);
                let mid = d.len() / 2;
                let median = if d.len() % 2 == 0 { 0.5 * (d[mid - 1] + d[mid]) } else { d[mid] };
                if median > 0.0 {
                    median
                } else {
                    log::debug!("degenerate patch under median heuristic, using sigma = 1");
                    1.0
                }
            }
        }
    };
    let s2 = sigma * sigma;
    let mut lap = DMatrix::zeros(p, p);
    for i in 0..p {
        let mut degree = 0.0;
        for j in 0..p {
            if i != j {
                let c = (-dist2[(i, j)] / s2).exp();
                lap[(i, j)] = -c;
                degree += c;
            }
        }
        lap[(i, i)] = degree;
    }
    lap
}

/// Codes `patch` with the model's prior. The ℓ1 prior codes the center
/// pixel alone.
pub fn code_patch(model: &Model, patch: &Patch, cfg: &SolverConfig) -> Result<(Patch, Solution)> {
    let prior = model.config.prior()?;
    let d = model.dictionary.matrix();
    let patch = match prior.kind() {
        PriorKind::L1 => Patch::single(&patch.center_pixel())?,
        _ => patch.clone(),
    };
    let lap = match prior.kind() {
        PriorKind::Laplacian => Some(build_laplacian(&patch, model.config.laplacian)),
        _ => None,
    };
    let sol = sparse_recovery::solve(d, &patch, &prior, lap.as_ref(), cfg)?;
    Ok((patch, sol))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Classified {
    /// Zero-based class index.
    pub class: usize,
    pub converged: bool,
}

/// `argmax_k (Wα_c)_k` with ties going to the lowest index.
pub fn argmax_class(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, s) in scores.into_iter().enumerate() {
        if s > best.1 {
            best = (k, s);
        }
    }
    best.0
}

pub fn classify_pixel(model: &Model, patch: &Patch, cfg: &SolverConfig) -> Result<Classified> {
    if patch.bands() != model.dictionary.bands() {
        return Err(Error::dims(format!(
            "patch has {} bands, model expects {}",
            patch.bands(),
            model.dictionary.bands()
        )));
    }
    let (coded, sol) = code_patch(model, patch, cfg)?;
    let alpha = sol.code.column(coded.center_index());
    let scores = model.classifier.weights() * alpha;
    Ok(Classified {
        class: argmax_class(scores.iter().copied()),
        converged: sol.converged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MapOptions {
    /// Classify unlabeled pixels too.
    pub all_pixels: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub rows: usize,
    pub cols: usize,
    /// 1-based class labels; 0 for training and unclassified pixels.
    pub labels: Vec<u16>,
    pub nonconverged: usize,
}

/// Classifies every labeled non-training pixel (every non-training pixel
/// when `gt` is absent or `opts.all_pixels` is set). Windows skip training
/// pixels.
pub fn classify_map(
    model: &Model,
    cube: &HsiCube,
    train_mask: &[bool],
    gt: Option<&GroundTruth>,
    opts: MapOptions,
    cfg: &SolverConfig,
) -> Result<ClassMap> {
    let n = cube.n_pixels();
    if train_mask.len() != n {
        return Err(Error::dims(format!("mask has {} entries for {n} pixels", train_mask.len())));
    }
    if let Some(gt) = gt {
        if gt.rows != cube.rows() || gt.cols != cube.cols() {
            return Err(Error::dims("ground truth does not match cube"));
        }
    }
    let window = WindowSpec::new(model.config.effective_window())?;
    let results: Vec<Result<(u16, bool)>> = (0..n)
        .into_par_iter()
        .map(|idx| {
            let labeled = gt.is_none_or(|g| g.labels[idx] != 0);
            if train_mask[idx] || !(labeled || opts.all_pixels) {
                return Ok((0, true));
            }
            let (r, c) = (idx / cube.cols(), idx % cube.cols());
            let patch = extract_window(cube, r, c, window, Some(train_mask));
            let out = classify_pixel(model, &patch, cfg)?;
            Ok((out.class as u16 + 1, out.converged))
        })
        .collect();
    let mut labels = Vec::with_capacity(n);
    let mut nonconverged = 0;
    for r in results {
        let (label, converged) = r?;
        labels.push(label);
        if !converged {
            nonconverged += 1;
        }
    }
    Ok(ClassMap {
        rows: cube.rows(),
        cols: cube.cols(),
        labels,
        nonconverged,
    })
}

/// Seeded per-class split: `fraction` of each class's labeled pixels (at
/// least one) is marked as training.
pub fn stratified_split(gt: &GroundTruth, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("split fraction must lie in (0, 1], got {fraction}")));
    }
    let k = gt.n_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (idx, &l) in gt.labels.iter().enumerate() {
        if l != 0 {
            by_class[l as usize - 1].push(idx);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; gt.labels.len()];
    for members in by_class.iter_mut() {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        let take = ((fraction * members.len() as f64).round() as usize).clamp(1, members.len());
        for &idx in &members[..take] {
            mask[idx] = true;
        }
    }
    Ok(mask)
}

/// Training samples for every masked labeled pixel. Training windows use
/// the full clipped neighbourhood.
pub fn training_samples(cube: &HsiCube, gt: &GroundTruth, mask: &[bool], window: WindowSpec) -> Result<Vec<TrainingSample>> {
    if gt.rows != cube.rows() || gt.cols != cube.cols() || mask.len() != cube.n_pixels() {
        return Err(Error::dims("cube, ground truth and mask disagree in size"));
    }
    let samples = (0..cube.n_pixels())
        .filter(|&idx| mask[idx] && gt.labels[idx] != 0)
        .map(|idx| TrainingSample {
            patch: extract_window(cube, idx / cube.cols(), idx % cube.cols(), window, None),
            label: gt.labels[idx] as usize - 1,
        })
        .collect();
    Ok(samples)
}

/// `counts[t][p]`: pixels of true class `t` predicted as `p` (zero-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if counts.iter().any(|r| r.len() != k) {
            return Err(Error::dims("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.counts[i][i]).sum()
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let total = self.total();
        if total == 0 {
            return Err(Error::NoTestPixels);
        }
        // Exact rational arithmetic, rounded once at the end.
        let ratio = |num: u64, den: u64| BigRational::new(BigInt::from(num), BigInt::from(den));
        let row_sums: Vec<u64> = self.counts.iter().map(|r| r.iter().sum()).collect();
        let col_sums: Vec<u64> = (0..self.k).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect();
        let recalls: Vec<Option<BigRational>> = (0..self.k)
            .map(|i| (row_sums[i] > 0).then(|| ratio(self.counts[i][i], row_sums[i])))
            .collect();
        let per_class: Vec<Option<f64>> = recalls.iter().map(|r| r.as_ref().map(to_f64)).collect();
        let present: Vec<&BigRational> = recalls.iter().flatten().collect();
        let aa_sum = present.iter().fold(BigRational::zero(), |acc, r| acc + *r);
        let aa = to_f64(&(aa_sum / BigInt::from(present.len())));
        let oa_exact = ratio(self.trace(), total);
        let n = BigInt::from(total);
        let pe_num: BigInt = row_sums
            .iter()
            .zip(&col_sums)
            .map(|(&r, &c)| BigInt::from(r) * BigInt::from(c))
            .sum();
        let nn = &n * &n;
        let kappa = if pe_num >= nn {
            1.0
        } else {
            let obs = BigInt::from(self.trace()) * &n;
            to_f64(&BigRational::new(obs - &pe_num, nn - pe_num))
        };
        let oa = to_f64(&oa_exact);
        Ok(Metrics {
            oa,
            aa,
            kappa,
            per_class,
        })
    }
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().unwrap_or(f64::NAN)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub oa: f64,
    /// Mean recall over classes with at least one test pixel.
    pub aa: f64,
    pub kappa: f64,
    /// Recall per class; `None` for classes without test pixels.
    pub per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub metrics: Metrics,
    pub confusion: ConfusionMatrix,
}

/// Scores 1-based `predictions` against `truth`. Pixels where either is 0
/// are ignored.
pub fn evaluate(predictions: &[u16], truth: &[u16], k: usize) -> Result<Evaluation> {
    if predictions.len() != truth.len() {
        return Err(Error::dims(format!(
            "{} predictions for {} ground-truth pixels",
            predictions.len(),
            truth.len()
        )));
    }
    let mut confusion = ConfusionMatrix::new(k);
    for (&p, &t) in predictions.iter().zip(truth) {
        if p == 0 || t == 0 {
            continue;
        }
        for label in [p, t] {
            if label as usize > k {
                return Err(Error::InvalidLabel { label, classes: k });
            }
        }
        confusion.counts[t as usize - 1][p as usize - 1] += 1;
    }
    let metrics = confusion.metrics()?;
    Ok(Evaluation { metrics, confusion })
}
