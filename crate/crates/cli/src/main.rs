use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use log::info;
use nalgebra::DMatrix;

use tddl_core::classification::{
    build_laplacian, classify_map, evaluate, extract_window, stratified_split, training_samples, LaplacianSpec,
    MapOptions, WindowSpec,
};
use tddl_core::gradcheck::{gradcheck, GradcheckConfig};
use tddl_core::hsi_io::{
    format_metrics_csv, load_cube, load_model, read_label_raster, read_label_raster_any, render_map, save_cube,
    save_model, synth_scene, write_label_raster, Palette, SceneSpec,
};
use tddl_core::learning::{init_dictionary, train_model, OdlConfig, TrainConfig};
use tddl_core::sparse_recovery::{solve, Patch, Prior, PriorKind, SolverConfig};
use tddl_core::{Error, GroundTruth, HsiCube};

#[derive(Parser, Debug)]
#[command(name = "tddl", version, about = "Task-driven dictionary learning for hyperspectral classification")]
struct Cli {
    /// Worker threads for coding and classification
    #[arg(long, global = true, env = "TDDL_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labeled scene
    Synth(SynthArgs),
    /// Train a model on a labeled cube
    Train(TrainArgs),
    /// Classify the non-training pixels of a cube
    Classify(ClassifyArgs),
    /// Score a label raster against ground truth
    Eval(EvalArgs),
    /// Check analytic dictionary gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Sparse-code one window and dump the coefficients
    Recover(RecoverArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Header path to write; data and ground truth go next to it
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    rows: usize,
    #[arg(long, default_value_t = 32)]
    cols: usize,
    #[arg(long, default_value_t = 30)]
    bands: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Signal-to-noise ratio in dB
    #[arg(long, default_value_t = 20.0)]
    snr: f64,
    /// Approximate side length of a class region in pixels
    #[arg(long, default_value_t = 8)]
    region_scale: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Cube header
    #[arg(long)]
    cube: PathBuf,
    /// Ground-truth raster (defaults to the one named in the header)
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, value_parser = parse_prior)]
    prior: PriorKind,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    /// Schedule knee; defaults to iters / 10
    #[arg(long)]
    t0: Option<f64>,
    /// Supervised iterations
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    /// Unsupervised iterations before supervised training
    #[arg(long, default_value_t = 30)]
    odl_iters: usize,
    #[arg(long, default_value_t = 200)]
    odl_batch: usize,
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Atoms per class
    #[arg(long, default_value_t = 5)]
    atoms: usize,
    /// Fraction of each class used for training
    #[arg(long, default_value_t = 0.1, conflicts_with = "mask")]
    split: f64,
    /// Use this training mask instead of a random split
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Fixed Laplacian bandwidth instead of the median heuristic
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model file to write
    #[arg(long)]
    out: PathBuf,
    /// Training log (defaults to <out>.log)
    #[arg(long)]
    log: Option<PathBuf>,
    /// Training mask to write (defaults to <out>.mask)
    #[arg(long)]
    mask_out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ClassifyArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    cube: PathBuf,
    /// Training mask written by `train`
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Ground truth restricting which pixels are classified
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Classify unlabeled pixels as well
    #[arg(long)]
    all_pixels: bool,
    /// Label raster to write
    #[arg(long)]
    out: PathBuf,
    /// PPM classification map (defaults to <out>.ppm)
    #[arg(long)]
    map: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Predicted label raster
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth raster, or a cube header naming one
    #[arg(long)]
    gt: PathBuf,
    /// Model whose class names label the report
    #[arg(long)]
    model: Option<PathBuf>,
    /// Number of classes (defaults to the largest label seen)
    #[arg(long)]
    classes: Option<usize>,
    /// CSV destination (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, value_parser = parse_prior)]
    prior: PriorKind,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fraction of trials that must pass
    #[arg(long, default_value_t = 0.95)]
    min_pass: f64,
}

#[derive(Args, Debug)]
struct RecoverArgs {
    #[arg(long)]
    cube: PathBuf,
    #[arg(long)]
    gt: Option<PathBuf>,
    #[arg(long, value_parser = parse_prior)]
    prior: PriorKind,
    /// Use this model's dictionary instead of one drawn from labeled pixels
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    row: usize,
    #[arg(long)]
    col: usize,
    #[arg(long, default_value_t = 3)]
    window: usize,
    #[arg(long, default_value_t = 1e-2)]
    lambda: f64,
    #[arg(long, default_value_t = 1e-3)]
    gamma: f64,
    #[arg(long, default_value_t = 5)]
    atoms: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dump destination (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_prior(s: &str) -> Result<PriorKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Failure classes mapped to exit codes 1 and 2.
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Invalid(e.into())
}

type Outcome = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid(anyhow!("--threads must be positive")));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Classify(a) => classify(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => grad_check(a),
        Command::Recover(a) => recover(a),
    }
}

fn synth(a: SynthArgs) -> Outcome {
    let spec = SceneSpec {
        rows: a.rows,
        cols: a.cols,
        bands: a.bands,
        k: a.classes,
        snr_db: a.snr,
        region_scale: a.region_scale,
        seed: a.seed,
    };
    spec.validate().map_err(invalid)?;
    let scene = synth_scene(&spec).context("generating scene")?;
    save_cube(&a.out, &scene.cube, Some(&scene.gt)).with_context(|| format!("writing {}", a.out.display()))?;
    info!("wrote {}x{}x{} scene with {} classes", a.rows, a.cols, a.bands, a.classes);
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_labeled(cube: &Path, gt: Option<&Path>) -> anyhow::Result<(HsiCube, Option<GroundTruth>)> {
    let (cube, header_gt) = load_cube(cube).with_context(|| format!("loading {}", cube.display()))?;
    let gt = match gt {
        Some(path) => {
            let labels = read_label_raster(path, cube.n_pixels()).with_context(|| format!("loading {}", path.display()))?;
            Some(GroundTruth::new(cube.rows(), cube.cols(), labels)?)
        }
        None => header_gt,
    };
    Ok((cube, gt))
}

fn read_mask(path: &Path, n: usize) -> anyhow::Result<Vec<bool>> {
    let raw = read_label_raster(path, n).with_context(|| format!("loading mask {}", path.display()))?;
    Ok(raw.into_iter().map(|v| v != 0).collect())
}

fn train(a: TrainArgs) -> Outcome {
    let mut cfg = TrainConfig::for_prior(a.prior);
    cfg.lambda = a.lambda.unwrap_or(cfg.lambda);
    cfg.gamma = a.gamma.unwrap_or(cfg.gamma);
    cfg.rho = a.rho.unwrap_or(cfg.rho);
    cfg.mu = a.mu.unwrap_or(cfg.mu);
    cfg.total_iters = a.iters;
    cfg.t0 = a.t0.unwrap_or(a.iters as f64 / 10.0);
    cfg.batch_size = a.batch;
    cfg.window = a.window;
    cfg.atoms_per_class = a.atoms;
    cfg.seed = a.seed;
    if let Some(s) = a.sigma {
        cfg.laplacian = LaplacianSpec::Fixed(s);
    }
    cfg.validate().map_err(invalid)?;
    if a.mask.is_none() && !(a.split > 0.0 && a.split <= 1.0) {
        return Err(invalid(anyhow!("--split must lie in (0, 1], got {}", a.split)));
    }
    if a.odl_batch == 0 {
        return Err(invalid(anyhow!("--odl-batch must be positive")));
    }

    let (cube, gt) = load_labeled(&a.cube, a.gt.as_deref())?;
    let gt = gt.ok_or_else(|| invalid(anyhow!("no ground truth: pass --gt or name one in the header")))?;
    let mask = match &a.mask {
        Some(path) => read_mask(path, cube.n_pixels())?,
        None => stratified_split(&gt, a.split, a.seed).context("splitting")?,
    };
    let window = WindowSpec::new(cfg.effective_window()).map_err(invalid)?;
    let samples = training_samples(&cube, &gt, &mask, window)?;
    let names: Vec<String> = (1..=gt.n_classes()).map(|i| format!("class{i}")).collect();
    info!(
        "training prior={} on {} samples, {} classes",
        cfg.prior,
        samples.len(),
        names.len()
    );
    let odl = OdlConfig {
        iters: a.odl_iters,
        batch_size: a.odl_batch,
    };
    let outcome = train_model(&samples, names, &cfg, &odl, &SolverConfig::default()).context("training")?;

    save_model(&outcome.model, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let mask_path = a.mask_out.unwrap_or_else(|| with_suffix(&a.out, ".mask"));
    let mask_raw: Vec<u16> = mask.iter().map(|&m| m as u16).collect();
    write_label_raster(&mask_path, &mask_raw)?;
    let log_path = a.log.unwrap_or_else(|| with_suffix(&a.out, ".log"));
    let mut text = String::new();
    for r in &outcome.log {
        writeln!(text, "{}", r.to_line()).expect("writing to a String");
    }
    fs::write(&log_path, text).with_context(|| format!("writing {}", log_path.display()))?;
    if let Some(last) = outcome.log.last() {
        info!("final batch loss {:.6}", last.loss);
    }
    Ok(())
}

fn classify(a: ClassifyArgs) -> Outcome {
    let model = load_model(&a.model).with_context(|| format!("loading {}", a.model.display()))?;
    let (cube, gt) = load_labeled(&a.cube, a.gt.as_deref())?;
    if cube.bands() != model.dictionary.bands() {
        return Err(invalid(anyhow!(
            "model expects {} bands, cube has {}",
            model.dictionary.bands(),
            cube.bands()
        )));
    }
    let mask = match &a.mask {
        Some(path) => read_mask(path, cube.n_pixels())?,
        None => vec![false; cube.n_pixels()],
    };
    let opts = MapOptions {
        all_pixels: a.all_pixels,
    };
    let map = classify_map(&model, &cube, &mask, gt.as_ref(), opts, &SolverConfig::default()).context("classifying")?;
    if map.nonconverged > 0 {
        log::warn!("{} pixels classified from non-converged codes", map.nonconverged);
    }
    write_label_raster(&a.out, &map.labels)?;
    let map_path = a.map.unwrap_or_else(|| with_suffix(&a.out, ".ppm"));
    render_map(&map.labels, map.rows, map.cols, &Palette::default(), &map_path)?;
    info!("classified {} pixels", map.labels.iter().filter(|&&l| l != 0).count());
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let pred = read_label_raster_any(&a.pred).with_context(|| format!("loading {}", a.pred.display()))?;
    let truth = if a.gt.extension().is_some_and(|e| e == "hdr") {
        load_cube(&a.gt)?
            .1
            .ok_or_else(|| invalid(anyhow!("{} names no ground truth", a.gt.display())))?
            .labels
    } else {
        read_label_raster(&a.gt, pred.len()).with_context(|| format!("loading {}", a.gt.display()))?
    };
    let seen = pred.iter().chain(&truth).copied().max().unwrap_or(0) as usize;
    let names = match &a.model {
        Some(path) => load_model(path)?.class_names,
        None => Vec::new(),
    };
    let k = a.classes.unwrap_or(seen.max(names.len()));
    let names: Vec<String> = if names.len() == k {
        names
    } else {
        (1..=k).map(|i| format!("class{i}")).collect()
    };
    let evaluation = match evaluate(&pred, &truth, k) {
        Ok(e) => e,
        Err(e @ (Error::InvalidLabel { .. } | Error::DimensionMismatch(_))) => return Err(invalid(e)),
        Err(e) => return Err(Failure::Runtime(e.into())),
    };
    let csv = format_metrics_csv(&evaluation, &names);
    match &a.out {
        Some(path) => fs::write(path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn grad_check(a: GradcheckArgs) -> Outcome {
    if a.trials == 0 {
        return Err(invalid(anyhow!("--trials must be positive")));
    }
    if !(a.min_pass > 0.0 && a.min_pass <= 1.0) {
        return Err(invalid(anyhow!("--min-pass must lie in (0, 1]")));
    }
    let report = gradcheck(a.prior, a.trials, a.seed, &GradcheckConfig::default()).context("gradient check")?;
    let verdict = if report.meets(a.min_pass) { "PASS" } else { "FAIL" };
    println!("{verdict} {}", report.summary());
    if verdict == "FAIL" {
        bail_runtime(format!("only {} of {} trials agreed", report.passed(), a.trials))
    } else {
        Ok(())
    }
}

fn bail_runtime(msg: String) -> Outcome {
    Err(Failure::Runtime(anyhow!(msg)))
}

fn recover(a: RecoverArgs) -> Outcome {
    let window = WindowSpec::new(match a.prior {
        PriorKind::L1 => 1,
        _ => a.window,
    })
    .map_err(invalid)?;
    let prior = Prior::new(a.prior, a.lambda, a.gamma).map_err(invalid)?;
    let (cube, gt) = load_labeled(&a.cube, a.gt.as_deref())?;
    if a.row >= cube.rows() || a.col >= cube.cols() {
        return Err(invalid(anyhow!(
            "pixel ({}, {}) outside a {}x{} cube",
            a.row,
            a.col,
            cube.rows(),
            cube.cols()
        )));
    }
    let dictionary = match &a.model {
        Some(path) => load_model(path)?.dictionary,
        None => {
            let gt = gt.ok_or_else(|| invalid(anyhow!("need --model or ground truth to build a dictionary")))?;
            let labeled: Vec<usize> = (0..cube.n_pixels()).filter(|&i| gt.labels[i] != 0).collect();
            let mut pixels = DMatrix::zeros(cube.bands(), labeled.len());
            for (j, &idx) in labeled.iter().enumerate() {
                pixels.set_column(j, &cube.pixel(idx / cube.cols(), idx % cube.cols()));
            }
            let labels: Vec<usize> = labeled.iter().map(|&i| gt.labels[i] as usize - 1).collect();
            init_dictionary(&pixels, &labels, gt.n_classes(), a.atoms, a.seed).context("building dictionary")?
        }
    };
    if dictionary.bands() != cube.bands() {
        return Err(invalid(anyhow!("dictionary and cube band counts differ")));
    }
    let patch: Patch = extract_window(&cube, a.row, a.col, window, None);
    let lap = (a.prior == PriorKind::Laplacian).then(|| build_laplacian(&patch, LaplacianSpec::Median));
    let sol = solve(dictionary.matrix(), &patch, &prior, lap.as_ref(), &SolverConfig::default()).context("coding")?;

    let mut out = String::new();
    writeln!(out, "# prior={} row={} col={} pixels={} center={}", a.prior, a.row, a.col, patch.len(), patch.center_index())
        .expect("writing to a String");
    writeln!(
        out,
        "# objective={:.12e} iterations={} converged={}",
        sol.objective, sol.iterations, sol.converged
    )
    .expect("writing to a String");
    let code = &sol.code.coeffs;
    for i in 0..code.nrows() {
        let row: Vec<String> = code.row(i).iter().map(|v| format!("{v:.9e}")).collect();
        writeln!(out, "{}", row.join(" ")).expect("writing to a String");
    }
    match &a.out {
        Some(path) => fs::write(path, out).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{out}"),
    }
    if !sol.converged {
        return bail_runtime(format!("solver did not converge in {} iterations", sol.iterations));
    }
    Ok(())
}
