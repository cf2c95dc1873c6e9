use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tddl_core::classification::{stratified_split, training_samples, WindowSpec};
use tddl_core::hsi_io::{load_cube, load_model};
use tddl_core::learning::{initial_model, unsupervised_dictionary, OdlConfig, TrainConfig};
use tddl_core::{PriorKind, SolverConfig};

fn tddl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tddl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("running tddl")
}

fn ok(args: &[&str]) -> Output {
    let out = tddl(args);
    assert!(
        out.status.success(),
        "tddl {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new() -> Self {
        Run {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn synth(&self) -> PathBuf {
        let hdr = self.path("scene.hdr");
        ok(&["synth", "--out", s(&hdr), "--rows", "14", "--cols", "12", "--bands", "10", "--classes", "3", "--seed", "4"]);
        hdr
    }

    fn train(&self, hdr: &Path, prior: &str, iters: &str) -> PathBuf {
        let model = self.path("model.tddl");
        ok(&[
            "train", "--cube", s(hdr), "--prior", prior, "--iters", iters, "--batch", "12", "--odl-iters", "3",
            "--odl-batch", "40", "--split", "0.2", "--seed", "9", "--out", s(&model),
        ]);
        model
    }
}

#[test]
fn pipeline_runs_end_to_end() {
    let run = Run::new();
    let hdr = run.synth();
    let model = run.train(&hdr, "js", "4");
    let mask = run.path("model.tddl.mask");
    let log = std::fs::read_to_string(run.path("model.tddl.log")).unwrap();
    assert_eq!(log.lines().count(), 4);
    assert!(log.lines().all(|l| l.starts_with("iteration=")));

    let pred = run.path("pred.u16");
    ok(&["classify", "--model", s(&model), "--cube", s(&hdr), "--mask", s(&mask), "--out", s(&pred)]);
    let ppm = std::fs::read(run.path("pred.u16.ppm")).unwrap();
    assert!(ppm.starts_with(b"P6\n12 14\n255\n"));

    let out = ok(&["eval", "--pred", s(&pred), "--gt", s(&hdr), "--model", s(&model)]);
    let csv = String::from_utf8(out.stdout).unwrap();
    assert!(csv.starts_with("class,name,accuracy\n"));
    let oa: f64 = csv
        .lines()
        .find_map(|l| l.strip_prefix("oa,"))
        .unwrap()
        .parse()
        .unwrap();
    assert!(oa > 0.5 && oa <= 1.0, "oa {oa}");
    assert!(csv.contains("\naa,") && csv.contains("\nkappa,"));
}

#[test]
fn zero_iterations_write_the_initial_model() {
    let run = Run::new();
    let hdr = run.synth();
    let model_path = run.train(&hdr, "lp", "0");
    assert_eq!(std::fs::read_to_string(run.path("model.tddl.log")).unwrap(), "");

    let (cube, gt) = load_cube(&hdr).unwrap();
    let gt = gt.unwrap();
    let mask = stratified_split(&gt, 0.2, 9).unwrap();
    let samples = training_samples(&cube, &gt, &mask, WindowSpec::new(3).unwrap()).unwrap();
    let mut cfg = TrainConfig::for_prior(PriorKind::Laplacian);
    cfg.total_iters = 0;
    cfg.t0 = 0.0;
    cfg.batch_size = 12;
    cfg.seed = 9;
    let odl = OdlConfig { iters: 3, batch_size: 40 };
    let names: Vec<String> = (1..=3).map(|i| format!("class{i}")).collect();
    let dict = unsupervised_dictionary(&samples, 3, &cfg, &odl).unwrap();
    let expected = initial_model(&samples, names, &cfg, dict, &SolverConfig::default()).unwrap();
    assert_eq!(load_model(&model_path).unwrap(), expected);
}

#[test]
fn perfect_predictions_score_one() {
    let run = Run::new();
    let hdr = run.synth();
    let out = ok(&["eval", "--pred", s(&run.path("scene.gt")), "--gt", s(&hdr)]);
    let csv = String::from_utf8(out.stdout).unwrap();
    let get = |key: &str| -> f64 {
        csv.lines()
            .find_map(|l| l.strip_prefix(key))
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(get("oa,"), 1.0);
    assert_eq!(get("kappa,"), 1.0);
}

#[test]
fn artifacts_are_byte_identical_across_runs() {
    let artifacts = |run: &Run| {
        let hdr = run.synth();
        let model = run.train(&hdr, "l1", "3");
        let pred = run.path("pred.u16");
        ok(&[
            "classify", "--model", s(&model), "--cube", s(&hdr), "--mask", s(&run.path("model.tddl.mask")), "--out",
            s(&pred),
        ]);
        ["scene.hdr", "scene.bsq", "scene.gt", "model.tddl", "model.tddl.mask", "pred.u16", "pred.u16.ppm"]
            .map(|f| std::fs::read(run.path(f)).unwrap())
    };
    let (a, b) = (Run::new(), Run::new());
    assert_eq!(artifacts(&a), artifacts(&b));
}

#[test]
fn gradcheck_reports_agreement() {
    let out = ok(&["gradcheck", "--prior", "js", "--trials", "100", "--seed", "7"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("PASS "), "{text}");
    let passed: usize = text
        .split("passed ")
        .nth(1)
        .and_then(|r| r.split('/').next())
        .unwrap()
        .parse()
        .unwrap();
    assert!(passed >= 95, "{text}");
}

#[test]
fn recover_dumps_one_code() {
    let run = Run::new();
    let hdr = run.synth();
    let out = ok(&["recover", "--cube", s(&hdr), "--prior", "lp", "--row", "5", "--col", "6", "--atoms", "2"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("# prior=lp row=5 col=6 pixels=9"));
    assert!(lines.next().unwrap().contains("converged=true"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.split(' ').count() == 9));
}

#[test]
fn exit_codes_separate_usage_from_runtime_errors() {
    let code = |args: &[&str]| tddl(args).status.code().unwrap();
    assert_eq!(code(&["train", "--prior", "xx", "--cube", "a", "--out", "b"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["gradcheck", "--prior", "l1", "--trials", "0"]), 1);
    assert_eq!(code(&["train", "--prior", "l1", "--cube", "a", "--out", "b", "--split", "1.5"]), 1);
    assert_eq!(code(&["train", "--prior", "l1", "--cube", "a", "--out", "b", "--window", "4"]), 1);
    assert_eq!(code(&["classify", "--model", "/nonexistent/m", "--cube", "c", "--out", "o"]), 2);
    assert_eq!(code(&["--help"]), 0);

    let run = Run::new();
    let hdr = run.synth();
    assert_eq!(
        code(&["recover", "--cube", s(&hdr), "--prior", "l1", "--row", "99", "--col", "0"]),
        1
    );
}
