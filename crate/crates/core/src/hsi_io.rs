//! Cube, label raster, model and map formats, plus the synthetic scene
//! generator.
//!
//! Cubes are described by a small `key=value` header:
//!
//! ```text
//! version=1
//! rows=32
//! cols=32
//! bands=30
//! data=scene.bsq
//! gt=scene.gt
//! ```
//!
//! `data` is band-sequential `f32` little-endian, `gt` an optional `u16`
//! little-endian row-major label raster (0 = unlabeled). Relative paths are
//! resolved against the header's directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::classification::{Evaluation, LaplacianSpec};
use crate::error::{Error, Result};
use crate::learning::{Classifier, Model, TrainConfig};
use crate::sparse_recovery::{Dictionary, PriorKind};

pub const CUBE_VERSION: u32 = 1;
pub const MODEL_MAGIC: &str = "TDDL1";
pub const MODEL_VERSION: u32 = 1;

/// A `rows × cols × bands` spectral raster stored band-sequentially.
#[derive(Debug, Clone, PartialEq)]
pub struct HsiCube {
    rows: usize,
    cols: usize,
    bands: usize,
    data: Vec<f32>,
}

impl HsiCube {
    pub fn new(rows: usize, cols: usize, bands: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || bands == 0 {
            return Err(Error::InvalidArgument("cube dimensions must be positive".into()));
        }
        if data.len() != rows * cols * bands {
            return Err(Error::dims(format!(
                "cube {rows}x{cols}x{bands} needs {} values, got {}",
                rows * cols * bands,
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteValue { index });
        }
        Ok(HsiCube {
            rows,
            cols,
            bands,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bands(&self) -> usize {
        self.bands
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize, band: usize) -> f32 {
        self.data[band * self.rows * self.cols + row * self.cols + col]
    }

    pub fn pixel(&self, row: usize, col: usize) -> DVector<f64> {
        DVector::from_iterator(self.bands, (0..self.bands).map(|b| self.value(row, col, b) as f64))
    }
}

/// Row-major `u16` labels; 0 means unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub rows: usize,
    pub cols: usize,
    pub labels: Vec<u16>,
}

impl GroundTruth {
    pub fn new(rows: usize, cols: usize, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != rows * cols {
            return Err(Error::dims(format!(
                "label raster {rows}x{cols} needs {} values, got {}",
                rows * cols,
                labels.len()
            )));
        }
        Ok(GroundTruth { rows, cols, labels })
    }

    pub fn label(&self, row: usize, col: usize) -> u16 {
        self.labels[row * self.cols + col]
    }

    /// Largest label present.
    pub fn n_classes(&self) -> usize {
        self.labels.iter().copied().max().unwrap_or(0) as usize
    }
}

fn parse_header(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::parse(format!("line {}: expected key=value", lineno + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn header_field<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = map
        .get(key)
        .ok_or_else(|| Error::parse(format!("missing key '{key}'")))?;
    raw.parse()
        .map_err(|_| Error::parse(format!("bad value for '{key}': {raw}")))
}

fn resolve(base: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads a cube and, when the header names one, its ground truth.
pub fn load_cube(header_path: impl AsRef<Path>) -> Result<(HsiCube, Option<GroundTruth>)> {
    let header_path = header_path.as_ref();
    let text = fs::read_to_string(header_path)?;
    let map = parse_header(&text)?;
    let version: u32 = header_field(&map, "version")?;
    if version != CUBE_VERSION {
        return Err(Error::parse(format!("unsupported cube version {version}")));
    }
    let rows: usize = header_field(&map, "rows")?;
    let cols: usize = header_field(&map, "cols")?;
    let bands: usize = header_field(&map, "bands")?;
    let base = header_path.parent().unwrap_or(Path::new("."));
    let data_path = resolve(base, &header_field::<String>(&map, "data")?);
    let bytes = fs::read(&data_path)?;
    let expected = rows * cols * bands;
    if bytes.len() != expected * 4 {
        return Err(Error::LengthMismatch {
            path: data_path,
            expected,
            found: bytes.len() / 4,
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let cube = HsiCube::new(rows, cols, bands, data)?;
    let gt = match map.get("gt") {
        Some(name) if !name.is_empty() => {
            let labels = read_label_raster(resolve(base, name), rows * cols)?;
            Some(GroundTruth::new(rows, cols, labels)?)
        }
        _ => None,
    };
    Ok((cube, gt))
}

/// Writes `header_path` plus sibling `.bsq` (and `.gt`) files.
pub fn save_cube(header_path: impl AsRef<Path>, cube: &HsiCube, gt: Option<&GroundTruth>) -> Result<()> {
    let header_path = header_path.as_ref();
    let base = header_path.parent().unwrap_or(Path::new("."));
    let stem = header_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidArgument("header path has no file name".into()))?;
    let data_name = format!("{stem}.bsq");
    let mut bytes = Vec::with_capacity(cube.data.len() * 4);
    for v in &cube.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(base.join(&data_name), bytes)?;

    let mut header = format!(
        "version={CUBE_VERSION}\nrows={}\ncols={}\nbands={}\ndata={data_name}\n",
        cube.rows, cube.cols, cube.bands
    );
    if let Some(gt) = gt {
        if gt.rows != cube.rows || gt.cols != cube.cols {
            return Err(Error::dims("ground truth does not match cube"));
        }
        let gt_name = format!("{stem}.gt");
        write_label_raster(base.join(&gt_name), &gt.labels)?;
        header.push_str(&format!("gt={gt_name}\n"));
    }
    fs::write(header_path, header)?;
    Ok(())
}

/// Reads a raw `u16` LE raster of exactly `expected` values.
pub fn read_label_raster(path: impl AsRef<Path>, expected: usize) -> Result<Vec<u16>> {
    let path = path.as_ref();
    let labels = read_label_raster_any(path)?;
    if labels.len() != expected {
        return Err(Error::LengthMismatch {
            path: path.to_path_buf(),
            expected,
            found: labels.len(),
        });
    }
    Ok(labels)
}

/// Reads a raw `u16` LE raster of whatever length the file holds.
pub fn read_label_raster_any(path: impl AsRef<Path>) -> Result<Vec<u16>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    if bytes.len() % 2 != 0 {
        return Err(Error::parse(format!("{}: odd byte count", path.display())));
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect())
}

pub fn write_label_raster(path: impl AsRef<Path>, labels: &[u16]) -> Result<()> {
    let mut bytes = Vec::with_capacity(labels.len() * 2);
    for v in labels {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn encode_model_header(model: &Model) -> Result<String> {
    let cfg = &model.config;
    for name in &model.class_names {
        if name.contains(',') || name.contains('\n') || name.contains('\r') {
            return Err(Error::InvalidArgument(format!("class name {name:?} contains a separator")));
        }
    }
    let sigma = match cfg.laplacian {
        LaplacianSpec::Median => "median".to_string(),
        LaplacianSpec::Fixed(s) => s.to_string(),
    };
    let d = model.dictionary.matrix();
    let w = model.classifier.weights();
    Ok(format!(
        "{MODEL_MAGIC}\nversion={MODEL_VERSION}\nbands={}\natoms={}\nclasses={}\nprior={}\nlambda={}\n\
         gamma={}\nmu={}\nrho={}\nt0={}\niters={}\nbatch={}\natoms_per_class={}\nwindow={}\nseed={}\n\
         sigma={sigma}\nnames={}\npayload=f64le\nend\n",
        d.nrows(),
        d.ncols(),
        w.nrows(),
        cfg.prior,
        cfg.lambda,
        cfg.gamma,
        cfg.mu,
        cfg.rho,
        cfg.t0,
        cfg.total_iters,
        cfg.batch_size,
        cfg.atoms_per_class,
        cfg.window,
        cfg.seed,
        model.class_names.join(","),
    ))
}

/// Text header followed by `D` then `W`, each column-major `f64` LE.
pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut out = encode_model_header(model)?.into_bytes();
    for v in model.dictionary.matrix().iter().chain(model.classifier.weights().iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = fs::read(path)?;
    let marker = b"\nend\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::parse("model header not terminated"))?;
    let header = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::parse("model header is not UTF-8"))?;
    let payload = &bytes[split + marker.len()..];

    let mut lines = header.lines();
    if lines.next() != Some(MODEL_MAGIC) {
        return Err(Error::parse("missing TDDL1 magic"));
    }
    let map = parse_header(&lines.collect::<Vec<_>>().join("\n"))?;
    let version: u32 = header_field(&map, "version")?;
    if version != MODEL_VERSION {
        return Err(Error::parse(format!("unsupported model version {version}")));
    }
    let m: usize = header_field(&map, "bands")?;
    let n: usize = header_field(&map, "atoms")?;
    let k: usize = header_field(&map, "classes")?;
    let prior: PriorKind = header_field::<String>(&map, "prior")?.parse()?;
    let sigma_raw: String = header_field(&map, "sigma")?;
    let laplacian = if sigma_raw == "median" {
        LaplacianSpec::Median
    } else {
        LaplacianSpec::Fixed(
            sigma_raw
                .parse()
                .map_err(|_| Error::parse(format!("bad sigma {sigma_raw}")))?,
        )
    };
    let config = TrainConfig {
        lambda: header_field(&map, "lambda")?,
        gamma: header_field(&map, "gamma")?,
        mu: header_field(&map, "mu")?,
        rho: header_field(&map, "rho")?,
        t0: header_field(&map, "t0")?,
        total_iters: header_field(&map, "iters")?,
        batch_size: header_field(&map, "batch")?,
        atoms_per_class: header_field(&map, "atoms_per_class")?,
        window: header_field(&map, "window")?,
        prior,
        seed: header_field(&map, "seed")?,
        laplacian,
    };
    let names_raw: String = map.get("names").cloned().unwrap_or_default();
    let class_names: Vec<String> = if names_raw.is_empty() {
        Vec::new()
    } else {
        names_raw.split(',').map(str::to_string).collect()
    };
    if class_names.len() != k {
        return Err(Error::dims(format!("{} class names for {k} classes", class_names.len())));
    }

    let expected = (m * n + k * n) * 8;
    if payload.len() != expected {
        return Err(Error::dims(format!(
            "model payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let d = DMatrix::from_column_slice(m, n, &values[..m * n]);
    let w = DMatrix::from_column_slice(k, n, &values[m * n..]);
    Ok(Model {
        dictionary: Dictionary::new(d)?,
        classifier: Classifier::new(w)?,
        config,
        class_names,
    })
}

/// Parameters of the synthetic scene.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    pub rows: usize,
    pub cols: usize,
    pub bands: usize,
    pub k: usize,
    /// Signal-to-noise ratio in dB; `f64::INFINITY` disables noise.
    pub snr_db: f64,
    /// Typical side length of a Voronoi region, in pixels.
    pub region_scale: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            rows: 32,
            cols: 32,
            bands: 30,
            k: 4,
            snr_db: 20.0,
            region_scale: 8,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument("scene needs at least 2 classes".into()));
        }
        if self.rows == 0 || self.cols == 0 || self.bands == 0 || self.region_scale == 0 {
            return Err(Error::InvalidArgument("scene dimensions must be positive".into()));
        }
        if self.rows * self.cols < self.k {
            return Err(Error::InvalidArgument("fewer pixels than classes".into()));
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::InvalidArgument("snr_db must be finite or +inf".into()));
        }
        if self.k > u16::MAX as usize {
            return Err(Error::InvalidArgument("too many classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticScene {
    pub cube: HsiCube,
    pub gt: GroundTruth,
    /// `bands × k` unit-norm class signatures.
    pub signatures: DMatrix<f64>,
}

/// Norm of the class-specific bump relative to the shared background.
const CLASS_CONTRAST: f64 = 0.055;

fn gaussian(band: f64, center: f64, width: f64) -> f64 {
    let z = (band - center) / width;
    (-0.5 * z * z).exp()
}

/// Generates a labelled scene: smooth per-class signatures (a shared sum of
/// Gaussians plus one class-specific bump), Voronoi class regions, and white
/// Gaussian noise at the requested SNR.
pub fn synth_scene(spec: &SceneSpec) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let bands = spec.bands as f64;

    let mut base = DVector::from_element(spec.bands, 0.2);
    for _ in 0..3 {
        let amp = rng.random_range(0.5..1.0);
        let center = rng.random_range(0.0..bands);
        let width = rng.random_range(0.15..0.35) * bands;
        for b in 0..spec.bands {
            base[b] += amp * gaussian(b as f64, center, width);
        }
    }
    let base_norm = base.norm();
    let mut signatures = DMatrix::zeros(spec.bands, spec.k);
    for class in 0..spec.k {
        let slot = bands / spec.k as f64;
        let center = (class as f64 + 0.5) * slot + rng.random_range(-0.1..0.1) * slot;
        let width = (0.08 * bands).max(0.75);
        let mut bump = DVector::from_fn(spec.bands, |b, _| gaussian(b as f64, center, width));
        let bump_norm = bump.norm();
        if bump_norm > 0.0 {
            bump *= CLASS_CONTRAST * base_norm / bump_norm;
        }
        let sig = &base + bump;
        signatures.set_column(class, &(&sig / sig.norm()));
    }

    let n_sites = ((spec.rows * spec.cols) as f64 / (spec.region_scale * spec.region_scale) as f64)
        .round()
        .max(spec.k as f64) as usize;
    let mut sites: Vec<(f64, f64, usize)> = (0..n_sites)
        .map(|i| {
            let r = rng.random_range(0.0..spec.rows as f64);
            let c = rng.random_range(0.0..spec.cols as f64);
            let class = if i < spec.k { i } else { rng.random_range(0..spec.k) };
            (r, c, class)
        })
        .collect();
    // Each class owns at least one site; pin those to distinct pixel centers
    // so every class is guaranteed at least one pixel.
    for (i, site) in sites.iter_mut().enumerate().take(spec.k) {
        let idx = (i * spec.rows * spec.cols) / spec.k;
        site.0 = (idx / spec.cols) as f64 + 0.5;
        site.1 = (idx % spec.cols) as f64 + 0.5;
    }
    let mut labels = vec![0u16; spec.rows * spec.cols];
    for r in 0..spec.rows {
        for c in 0..spec.cols {
            let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
            let best = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - pr).powi(2) + (a.1 - pc).powi(2);
                    let db = (b.0 - pr).powi(2) + (b.1 - pc).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one site");
            labels[r * spec.cols + c] = best.2 as u16 + 1;
        }
    }

    let noise_sd = if spec.snr_db.is_infinite() {
        0.0
    } else {
        // Unit-norm signatures have mean per-band power 1/bands.
        (1.0 / (bands * 10f64.powf(spec.snr_db / 10.0))).sqrt()
    };
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let plane = spec.rows * spec.cols;
    let mut data = vec![0f32; plane * spec.bands];
    for (pix, &label) in labels.iter().enumerate() {
        let class = label as usize - 1;
        for b in 0..spec.bands {
            let noise = if noise_sd > 0.0 { noise_sd * normal.sample(&mut rng) } else { 0.0 };
            data[b * plane + pix] = (signatures[(b, class)] + noise) as f32;
        }
    }
    Ok(SyntheticScene {
        cube: HsiCube::new(spec.rows, spec.cols, spec.bands, data)?,
        gt: GroundTruth::new(spec.rows, spec.cols, labels)?,
        signatures,
    })
}

/// Labels every pixel with the closest signature (1-based).
pub fn nearest_signature_labels(cube: &HsiCube, signatures: &DMatrix<f64>) -> Vec<u16> {
    let mut out = Vec::with_capacity(cube.n_pixels());
    for r in 0..cube.rows() {
        for c in 0..cube.cols() {
            let x = cube.pixel(r, c);
            let best = (0..signatures.ncols())
                .map(|k| (k, (&x - signatures.column(k)).norm_squared()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(k, _)| k)
                .unwrap_or(0);
            out.push(best as u16 + 1);
        }
    }
    out
}

/// Fixed class colors; label 0 renders black.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
}

impl Default for Palette {
    fn default() -> Self {
        Palette {
            colors: vec![
                [230, 25, 75],
                [60, 180, 75],
                [255, 225, 25],
                [0, 130, 200],
                [245, 130, 48],
                [145, 30, 180],
                [70, 240, 240],
                [240, 50, 230],
                [210, 245, 60],
                [250, 190, 212],
                [0, 128, 128],
                [220, 190, 255],
                [170, 110, 40],
                [255, 250, 200],
                [128, 0, 0],
                [170, 255, 195],
            ],
        }
    }
}

/// Binary PPM (P6) bytes for a label raster.
pub fn encode_ppm(labels: &[u16], rows: usize, cols: usize, palette: &Palette) -> Result<Vec<u8>> {
    if labels.len() != rows * cols {
        return Err(Error::dims(format!("{} labels for a {rows}x{cols} map", labels.len())));
    }
    let mut out = format!("P6\n{cols} {rows}\n255\n").into_bytes();
    out.reserve(labels.len() * 3);
    for &label in labels {
        let rgb = if label == 0 {
            [0, 0, 0]
        } else {
            *palette
                .colors
                .get(label as usize - 1)
                .ok_or(Error::PaletteOverflow {
                    label,
                    palette: palette.colors.len(),
                })?
        };
        out.extend_from_slice(&rgb);
    }
    Ok(out)
}

pub fn render_map(labels: &[u16], rows: usize, cols: usize, palette: &Palette, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_ppm(labels, rows, cols, palette)?)?;
    Ok(())
}

/// `class,name,accuracy` rows followed by `oa`, `aa` and `kappa` lines.
/// Classes without test pixels report `NA`.
pub fn format_metrics_csv(eval: &Evaluation, class_names: &[String]) -> String {
    let mut out = String::from("class,name,accuracy\n");
    for (k, acc) in eval.metrics.per_class.iter().enumerate() {
        let name = class_names
            .get(k)
            .cloned()
            .unwrap_or_else(|| format!("class_{}", k + 1));
        match acc {
            Some(a) => out.push_str(&format!("{},{name},{a}\n", k + 1)),
            None => out.push_str(&format!("{},{name},NA\n", k + 1)),
        }
    }
    out.push_str(&format!("oa,{}\n", eval.metrics.oa));
    out.push_str(&format!("aa,{}\n", eval.metrics.aa));
    out.push_str(&format!("kappa,{}\n", eval.metrics.kappa));
    out
}
