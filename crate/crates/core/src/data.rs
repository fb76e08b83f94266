//! Dataset representation, folder ingestion, stratified splitting and the
//! positive-ratio ladder used by the ablation sweep.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

/// Smallest accepted image side.
pub const MIN_SIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn from_bit(bit: u8) -> Result<Self> {
        match bit {
            0 => Ok(Label::Normal),
            1 => Ok(Label::Anomalous),
            other => Err(Error::validation(format!("label must be 0 or 1, got {other}"))),
        }
    }

    pub fn bit(self) -> u8 {
        match self {
            Label::Normal => 0,
            Label::Anomalous => 1,
        }
    }

    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Calibration,
    Test,
}

/// Axis-aligned pixel box, `x0..x1` by `y0..y1` (exclusive ends).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x0 + self.x1) as f64 / 2.0 - 0.5,
            (self.y0 + self.y1) as f64 / 2.0 - 0.5,
        )
    }
}

/// One image with its binary anomaly label.
///
/// `pixels` is stored `h × w × c` with values in `[0, 1]`. `class_id` refines
/// the binary label for multi-class data (0 is always the normal class).
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Array3<f32>,
    pub label: Label,
    pub class_id: u32,
    pub split: Option<Split>,
    /// Ground-truth defect location, when known.
    pub defect: Option<BoundingBox>,
}

impl ImageSample {
    pub fn new(id: impl Into<String>, pixels: Array3<f32>, label: Label) -> Result<Self> {
        let id = id.into();
        let (h, w, c) = pixels.dim();
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::validation(format!(
                "sample {id}: image {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if c == 0 {
            return Err(Error::validation(format!("sample {id}: zero channels")));
        }
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::validation(format!(
                "sample {id}: pixels must be finite and within [0, 1]"
            )));
        }
        let class_id = label.bit() as u32;
        Ok(Self {
            id,
            pixels,
            label,
            class_id,
            split: None,
            defect: None,
        })
    }

    pub fn with_class(mut self, class_id: u32) -> Self {
        self.class_id = class_id;
        self
    }

    pub fn with_defect(mut self, defect: BoundingBox) -> Self {
        self.defect = Some(defect);
        self
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }
}

/// Summary counts for a split dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    /// Training images per class (N_d).
    pub n_train_per_class: usize,
    pub n_calibration: usize,
    pub n_test: usize,
    pub class_names: Vec<String>,
}

impl DatasetSpec {
    /// Derives the counts from a realized partition. `n_train_per_class` is
    /// the normal training count, which is the ladder's N_d.
    pub fn from_partition(name: impl Into<String>, partition: &Partition) -> Self {
        let n_train_per_class = partition
            .train
            .iter()
            .filter(|s| s.label == Label::Normal)
            .count();
        let mut classes: Vec<u32> = partition
            .train
            .iter()
            .chain(&partition.calibration)
            .chain(&partition.test)
            .map(|s| s.class_id)
            .collect();
        classes.sort_unstable();
        classes.dedup();
        Self {
            name: name.into(),
            n_train_per_class,
            n_calibration: partition.calibration.len(),
            n_test: partition.test.len(),
            class_names: classes
                .into_iter()
                .map(|c| if c == 0 { "normal".to_string() } else { format!("anomalous-{c}") })
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Ratio ladder

/// Denominator `a` of a positive ratio `1/a`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Denominator {
    Ratio(u32),
    OneShot,
}

impl Denominator {
    /// Ordering key: larger is more imbalanced; one-shot sorts last.
    pub fn sort_key(self) -> u64 {
        match self {
            Denominator::Ratio(a) => a as u64,
            Denominator::OneShot => u64::MAX,
        }
    }
}

impl fmt::Display for Denominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Denominator::Ratio(a) => write!(f, "1/{a}"),
            Denominator::OneShot => f.write_str("one-shot"),
        }
    }
}

impl FromStr for Denominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        if t == "one-shot" || t == "oneshot" || t == "one_shot" {
            return Ok(Denominator::OneShot);
        }
        let a = t
            .strip_prefix("1/")
            .and_then(|d| d.parse::<u32>().ok())
            .filter(|a| *a >= 1)
            .ok_or_else(|| Error::validation(format!("bad ratio '{s}', expected 1/a or one-shot")))?;
        Ok(Denominator::Ratio(a))
    }
}

/// One rung of the ladder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rung {
    pub label: String,
    pub denominator: Denominator,
    pub anomaly_count: usize,
    /// Set when rounding gave zero anomalies and the count was raised to 1.
    pub clamped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioLadder {
    pub n_train: usize,
    pub rungs: Vec<Rung>,
}

pub const LADDER_DENOMINATORS: [u32; 8] = [1, 2, 4, 8, 16, 32, 64, 128];

/// Anomaly counts for the standard ladder `1/1 … 1/128, one-shot`.
///
/// Counts use round-half-away-from-zero of `n_train / a`; the one-shot rung
/// always has exactly one anomaly.
pub fn ladder_counts(n_train: usize) -> Result<RatioLadder> {
    if n_train == 0 {
        return Err(Error::validation("ladder needs N_d >= 1"));
    }
    let mut rungs: Vec<Rung> = LADDER_DENOMINATORS
        .iter()
        .map(|&a| {
            let raw = round_half_away(n_train, a as usize);
            Rung {
                label: Denominator::Ratio(a).to_string(),
                denominator: Denominator::Ratio(a),
                anomaly_count: raw.max(1),
                clamped: raw == 0,
            }
        })
        .collect();
    rungs.push(Rung {
        label: Denominator::OneShot.to_string(),
        denominator: Denominator::OneShot,
        anomaly_count: 1,
        clamped: false,
    });
    for r in rungs.iter().filter(|r| r.clamped) {
        log::warn!("rung {} rounds to zero anomalies for N_d={n_train}; clamped to 1", r.label);
    }
    Ok(RatioLadder { n_train, rungs })
}

fn round_half_away(n: usize, a: usize) -> usize {
    (2 * n + a) / (2 * a)
}

impl RatioLadder {
    /// Keeps only the requested rungs, in ladder order.
    pub fn select(&self, wanted: &[Denominator]) -> Result<RatioLadder> {
        for w in wanted {
            if !self.rungs.iter().any(|r| r.denominator == *w) {
                return Err(Error::validation(format!("rung {w} is not on the ladder")));
            }
        }
        Ok(RatioLadder {
            n_train: self.n_train,
            rungs: self
                .rungs
                .iter()
                .filter(|r| wanted.contains(&r.denominator))
                .cloned()
                .collect(),
        })
    }

    pub fn rung(&self, d: Denominator) -> Option<&Rung> {
        self.rungs.iter().find(|r| r.denominator == d)
    }
}

// ---------------------------------------------------------------------------
// Splitting

/// Train / calibration / test fractions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub calibration: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.65,
            calibration: 0.15,
            test: 0.20,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.calibration, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::validation("split ratios must be finite and non-negative"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::validation(format!(
                "split ratios must sum to 1, got {}",
                parts.iter().sum::<f64>()
            )));
        }
        Ok(())
    }

    /// `(train, calibration, test)` sizes for a class of `n` samples.
    /// Calibration and test are rounded; the remainder goes to train.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let cal = (n as f64 * self.calibration).round() as usize;
        let test = (n as f64 * self.test).round() as usize;
        let cal = cal.min(n);
        let test = test.min(n - cal);
        (n - cal - test, cal, test)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Partition {
    pub train: Vec<ImageSample>,
    pub calibration: Vec<ImageSample>,
    pub test: Vec<ImageSample>,
}

impl Partition {
    pub fn all(&self) -> impl Iterator<Item = &ImageSample> {
        self.train.iter().chain(&self.calibration).chain(&self.test)
    }

    pub fn assignments(&self) -> BTreeMap<String, Split> {
        self.all()
            .filter_map(|s| s.split.map(|sp| (s.id.clone(), sp)))
            .collect()
    }
}

/// Stratified split per class id. Within each split, samples keep their
/// input order.
pub fn split_dataset(samples: &[ImageSample], ratios: SplitRatios, seed: u64) -> Result<Partition> {
    ratios.validate()?;
    if let Some(s) = samples.iter().find(|s| s.split.is_some()) {
        return Err(Error::validation(format!("sample {} already has a split", s.id)));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_class.entry(s.class_id).or_default().push(i);
    }
    let mut assigned = vec![Split::Train; samples.len()];
    for (class, idx) in &by_class {
        if idx.len() < 3 {
            return Err(Error::validation(format!(
                "class {class} has {} samples; at least 3 are needed to split",
                idx.len()
            )));
        }
        let mut order = idx.clone();
        order.shuffle(&mut seeded(derive_seed(seed, *class as u64)));
        let (_, n_cal, n_test) = ratios.sizes(order.len());
        for &i in &order[..n_cal] {
            assigned[i] = Split::Calibration;
        }
        for &i in &order[n_cal..n_cal + n_test] {
            assigned[i] = Split::Test;
        }
    }
    let mut out = Partition::default();
    for (s, split) in samples.iter().zip(assigned) {
        let mut s = s.clone();
        s.split = Some(split);
        match split {
            Split::Train => out.train.push(s),
            Split::Calibration => out.calibration.push(s),
            Split::Test => out.test.push(s),
        }
    }
    Ok(out)
}

/// Persisted split assignment (`splits.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub seed: u64,
    pub ratios: SplitRatios,
    pub assignments: BTreeMap<String, Split>,
}

impl SplitFile {
    pub fn new(partition: &Partition, ratios: SplitRatios, seed: u64) -> Self {
        Self {
            seed,
            ratios,
            assignments: partition.assignments(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        crate::io::read_json(path)
    }
}

// ---------------------------------------------------------------------------
// Subsampling

/// Keeps every normal training sample and `count` anomalous ones.
///
/// Anomalies are drawn by a seeded permutation and the first `count` are
/// kept, so for a fixed seed a smaller count always selects a subset of a
/// larger one.
pub fn subsample_anomalies(train: &[ImageSample], count: usize, seed: u64) -> Result<Vec<ImageSample>> {
    let anomalous: Vec<usize> = train
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label.is_anomalous())
        .map(|(i, _)| i)
        .collect();
    if count > anomalous.len() {
        return Err(Error::validation(format!(
            "requested {count} anomalies but only {} are available",
            anomalous.len()
        )));
    }
    let mut order = anomalous;
    order.shuffle(&mut seeded(seed));
    let mut keep = vec![false; train.len()];
    for &i in &order[..count] {
        keep[i] = true;
    }
    Ok(train
        .iter()
        .zip(keep)
        .filter(|(s, k)| !s.label.is_anomalous() || *k)
        .map(|(s, _)| s.clone())
        .collect())
}

// ---------------------------------------------------------------------------
// Ingestion

/// Where to find images under a dataset root.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct FolderLayout {
    pub normal_dir: String,
    pub anomalous_dir: String,
    /// Manifest file relative to the root; used instead of the directories
    /// when present.
    pub manifest: String,
}

impl Default for FolderLayout {
    fn default() -> Self {
        Self {
            normal_dir: "normal".into(),
            anomalous_dir: "anomalous".into(),
            manifest: "manifest.csv".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkipRecord {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct Ingested {
    pub samples: Vec<ImageSample>,
    pub skipped: Vec<SkipRecord>,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Deserialize)]
struct ManifestRow {
    path: String,
    label: String,
    /// Defaults to the label bit.
    #[serde(default)]
    class_id: Option<u32>,
}

fn parse_label(raw: &str) -> Result<Label> {
    match raw.trim().to_ascii_lowercase().as_str() {
        "0" | "normal" => Ok(Label::Normal),
        "1" | "anomalous" | "anomaly" => Ok(Label::Anomalous),
        other => Err(Error::config(format!("unknown manifest label '{other}'"))),
    }
}

/// Reads every decodable image under `root`. Undecodable or missing files
/// are skipped and reported, not fatal.
pub fn ingest_folder(root: &Path, layout: &FolderLayout) -> Result<Ingested> {
    if !root.is_dir() {
        return Err(Error::config(format!("dataset root {} is not a directory", root.display())));
    }
    let manifest = root.join(&layout.manifest);
    let mut entries: Vec<(PathBuf, Label, u32)> = if manifest.is_file() {
        let mut rdr = csv::Reader::from_path(&manifest)?;
        let mut rows = Vec::new();
        for row in rdr.deserialize::<ManifestRow>() {
            let row = row?;
            let label = parse_label(&row.label)?;
            let class = row.class_id.unwrap_or(u32::from(label.bit()));
            rows.push((root.join(&row.path), label, class));
        }
        rows
    } else {
        let mut rows = Vec::new();
        for (dir, label) in [
            (&layout.normal_dir, Label::Normal),
            (&layout.anomalous_dir, Label::Anomalous),
        ] {
            let dir = root.join(dir);
            if !dir.is_dir() {
                return Err(Error::config(format!("missing directory {}", dir.display())));
            }
            for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
                let path = entry.map_err(|e| Error::io(&dir, e))?.path();
                let ext = path
                    .extension()
                    .and_then(|e| e.to_str())
                    .map(|e| e.to_ascii_lowercase());
                if ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
                    rows.push((path, label, u32::from(label.bit())));
                }
            }
        }
        rows
    };
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let decoded: Vec<std::result::Result<ImageSample, SkipRecord>> = entries
        .par_iter()
        .map(|(path, label, class)| {
            let id = path
                .strip_prefix(root)
                .unwrap_or(path)
                .to_string_lossy()
                .replace('\\', "/");
            load_image(path)
                .and_then(|px| ImageSample::new(id, px, *label))
                .map(|s| s.with_class(*class))
                .map_err(|e| SkipRecord {
                    path: path.clone(),
                    reason: e.to_string(),
                })
        })
        .collect();

    let mut out = Ingested::default();
    for d in decoded {
        match d {
            Ok(s) => out.samples.push(s),
            Err(skip) => {
                log::warn!("skipping {}: {}", skip.path.display(), skip.reason);
                out.skipped.push(skip);
            }
        }
    }
    Ok(out)
}

/// Decodes an image file to `h × w × 3` reals in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<Array3<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory(&bytes)?.to_rgb32f();
    let (w, h) = img.dimensions();
    let data: Vec<f32> = img.into_raw().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Array3::from_shape_vec((h as usize, w as usize, 3), data)
        .map_err(|e| Error::validation(e.to_string()))
}

/// Writes `h × w × c` pixels (c = 1 or 3) as an 8-bit PNG.
pub fn save_png(pixels: &Array3<f32>, path: &Path) -> Result<()> {
    let (h, w, c) = pixels.dim();
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px: [u8; 3] = std::array::from_fn(|k| {
                let v = pixels[[y, x, if c == 1 { 0 } else { k.min(c - 1) }]];
                (v.clamp(0.0, 1.0) * 255.0).round() as u8
            });
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    crate::io::ensure_parent(path)?;
    buf.save(path)?;
    Ok(())
}
