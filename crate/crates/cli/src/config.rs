//! Run configuration: a TOML file whose keys command-line flags override.
//!
//! Every section and key is optional; missing values take the defaults
//! below. `configs/run.toml` lists every key with its default.

use std::path::{Path, PathBuf};

use fcdd_core::cluster::{TsneConfig, DEFAULT_EPS, DEFAULT_MIN_NEIGHBORS, DEFAULT_PERPLEXITY};
use fcdd_core::data::{Denominator, SplitRatios, LADDER_DENOMINATORS};
use fcdd_core::harness::DEFAULT_DELTA;
use fcdd_core::heatmap::DEFAULT_BINS;
use fcdd_core::mnpair::ContrastiveConfig;
use fcdd_core::nn::AdamConfig;
use fcdd_core::synth::{AnomalyKind, SynthSpec};
use fcdd_core::{fcdd::TrainConfig, io};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives the split, subsampling, initialization and batch order.
    pub seed: u64,
    pub out: PathBuf,
    pub dataset: DatasetSection,
    pub split: SplitRatios,
    pub train: TrainSection,
    pub ablation: AblationSection,
    pub contrastive: ContrastiveSection,
    pub cluster: ClusterSection,
    pub heatmap: HeatmapSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("fcdd-out"),
            dataset: DatasetSection::default(),
            split: SplitRatios::default(),
            train: TrainSection::default(),
            ablation: AblationSection::default(),
            contrastive: ContrastiveSection::default(),
            cluster: ClusterSection::default(),
            heatmap: HeatmapSection::default(),
        }
    }
}

/// Either a folder on disk or a synthetic dataset generated in memory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Folder layout (`normal/`, `anomalous/`, optional `manifest.csv`).
    pub folder: Option<PathBuf>,
    pub synth: SynthSection,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            folder: None,
            synth: SynthSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    BrightBlob,
    StripeDefect,
    MultiClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub image_size: [usize; 2],
    pub n_per_class: usize,
    pub noise_level: f64,
    pub kind: SynthKind,
    /// Class count for `multi-class`, normal class included.
    pub classes: u32,
    /// Generator seed, independent of the run seed.
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthSpec::default();
        Self {
            image_size: [d.image_size.0, d.image_size.1],
            n_per_class: SynthSpec::per_class_for_train(256, SplitRatios::default()),
            noise_level: d.noise_level,
            kind: SynthKind::BrightBlob,
            classes: 3,
            seed: 0,
        }
    }
}

impl SynthSection {
    pub fn spec(&self) -> SynthSpec {
        SynthSpec {
            image_size: (self.image_size[0], self.image_size[1]),
            n_per_class: self.n_per_class,
            noise_level: self.noise_level,
            anomaly_kind: match self.kind {
                SynthKind::BrightBlob => AnomalyKind::BrightBlob,
                SynthKind::StripeDefect => AnomalyKind::StripeDefect,
                SynthKind::MultiClass => AnomalyKind::MultiClass(self.classes),
            },
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub input_size: [usize; 2],
    /// Positive ratio used by `train` (`1/a` or `one-shot`).
    pub ratio: String,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::desk();
        Self {
            epochs: d.epochs,
            batch_size: d.batch_size,
            lr: d.optimizer.lr,
            beta1: d.optimizer.beta1,
            beta2: d.optimizer.beta2,
            input_size: [d.input_size.0, d.input_size.1],
            ratio: "1/1".into(),
        }
    }
}

impl TrainSection {
    pub fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            optimizer: AdamConfig {
                lr: self.lr,
                beta1: self.beta1,
                beta2: self.beta2,
                ..AdamConfig::default()
            },
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            input_size: (self.input_size[0], self.input_size[1]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub rungs: Vec<String>,
    pub delta: f64,
    /// Seeds `seed, seed + 1, …` are each run over the whole ladder.
    pub repeats: usize,
    /// Concurrent rung jobs; defaults to the CPU count.
    pub workers: Option<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        let mut rungs: Vec<String> = LADDER_DENOMINATORS.iter().map(|a| format!("1/{a}")).collect();
        rungs.push("one-shot".into());
        Self {
            rungs,
            delta: DEFAULT_DELTA,
            repeats: 1,
            workers: None,
        }
    }
}

impl AblationSection {
    pub fn denominators(&self) -> Result<Vec<Denominator>, CliError> {
        self.rungs
            .iter()
            .map(|r| r.parse::<Denominator>().map_err(|e| CliError::flag("--rungs", e.to_string())))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveSection {
    pub tau: f64,
    pub pi: f64,
    pub m: usize,
    pub n: usize,
    pub dim: usize,
    pub epochs: usize,
    pub anchors_per_step: usize,
    pub lr: f64,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        let d = ContrastiveConfig::default();
        Self {
            tau: d.tau,
            pi: d.pi,
            m: d.m,
            n: d.n,
            dim: d.dim,
            epochs: d.epochs,
            anchors_per_step: d.anchors_per_step,
            lr: d.optimizer.lr,
        }
    }
}

impl ContrastiveSection {
    pub fn config(&self, seed: u64, input_size: (usize, usize)) -> ContrastiveConfig {
        ContrastiveConfig {
            tau: self.tau,
            pi: self.pi,
            m: self.m,
            n: self.n,
            dim: self.dim,
            epochs: self.epochs,
            anchors_per_step: self.anchors_per_step,
            input_size,
            optimizer: AdamConfig {
                lr: self.lr,
                ..AdamConfig::default()
            },
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub eps: f64,
    pub min_neighbors: usize,
    pub perplexity: f64,
    pub iterations: usize,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            min_neighbors: DEFAULT_MIN_NEIGHBORS,
            perplexity: DEFAULT_PERPLEXITY,
            iterations: TsneConfig::default().iterations,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeatmapSection {
    /// Gaussian width in pixels; half the field stride when absent.
    pub sigma: Option<f64>,
    pub bins: usize,
}

impl Default for HeatmapSection {
    fn default() -> Self {
        Self {
            sigma: None,
            bins: DEFAULT_BINS,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        if !path.is_file() {
            return Err(CliError::flag("--config", format!("{} does not exist", path.display())));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::flag("--config", format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::flag("--config", format!("{}: {e}", path.display())))
    }

    /// SHA-256 of the canonical JSON form, with the output directory and
    /// worker count left out because neither changes any result.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out = PathBuf::new();
        canonical.ablation.workers = None;
        let json = serde_json::to_string(&canonical).expect("config serializes");
        io::sha256_hex(json.as_bytes())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(dir) = &self.dataset.folder {
            if !dir.is_dir() {
                return Err(CliError::flag("--data", format!("{} is not a directory", dir.display())));
            }
        }
        if !(self.ablation.delta >= 0.0) {
            return Err(CliError::flag("--delta", "must be non-negative"));
        }
        if self.ablation.workers == Some(0) {
            return Err(CliError::flag("--workers", "must be at least 1"));
        }
        if self.ablation.repeats == 0 {
            return Err(CliError::flag("--config", "ablation.repeats must be at least 1"));
        }
        if self.heatmap.sigma.is_some_and(|s| !(s > 0.0)) {
            return Err(CliError::flag("--sigma", "must be positive"));
        }
        if !(self.cluster.eps > 0.0) {
            return Err(CliError::flag("--eps", "must be positive"));
        }
        if self.cluster.min_neighbors == 0 {
            return Err(CliError::flag("--min-neighbors", "must be at least 1"));
        }
        if !(self.contrastive.tau > 0.0) {
            return Err(CliError::flag("--tau", "must be positive"));
        }
        if !(self.contrastive.pi > 0.0 && self.contrastive.pi < 1.0) {
            return Err(CliError::flag("--pi", "must lie in (0, 1)"));
        }
        self.ablation.denominators()?;
        self.train
            .ratio
            .parse::<Denominator>()
            .map_err(|e| CliError::flag("--config", format!("train.ratio: {e}")))?;
        self.split.validate()?;
        Ok(())
    }
}
