//! Positive-ratio ablation: one detector per ladder rung, fixed evaluation
//! splits, and the effective-ratio / phase analysis on top.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{calibrate_threshold, compute_metrics, Calibration, MetricsRecord};
use crate::data::{subsample_anomalies, Denominator, ImageSample, Label, Partition, RatioLadder, Rung};
use crate::error::{Error, Result};
use crate::fcdd::{score_dataset, train_detector, Backbone, TrainConfig};
use crate::io;
use crate::plot::{self, Canvas};

/// AUC tolerance defining "consistently high".
pub const DEFAULT_DELTA: f64 = 0.01;

/// One trained-and-evaluated rung for one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioPoint {
    pub ratio_label: String,
    pub denominator: Denominator,
    pub anomaly_count: usize,
    pub seed: u64,
    /// Absent when the rung failed.
    pub metrics: Option<MetricsRecord>,
    pub calibration: Option<Calibration>,
    /// Hash of the sorted test ids this point was evaluated on.
    pub test_set_hash: String,
    pub failure: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// More anomalous images still buy accuracy.
    MiningOpportunity,
    /// Extra anomalous images bring no effective gain.
    OverMining,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::MiningOpportunity => "mining-opportunity",
            Phase::OverMining => "over-mining",
        }
    }
}

/// Per-rung aggregate over seeds; failed runs are left out of the means,
/// which are absent when every run failed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RungSummary {
    pub ratio_label: String,
    pub denominator: Denominator,
    pub anomaly_count: usize,
    pub runs: usize,
    pub failures: usize,
    pub auc_mean: Option<f64>,
    pub auc_std: Option<f64>,
    pub f1_mean: Option<f64>,
    pub precision_mean: Option<f64>,
    pub recall_mean: Option<f64>,
    pub phase: Phase,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EffectiveRatio {
    pub a_star: u32,
    /// No rung came within `delta` of the best AUC; `a_star` defaulted to 1.
    pub flagged: bool,
}

/// Last over-mining rung and first mining-opportunity rung.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseBoundary {
    pub over_mining_edge: Option<String>,
    pub opportunity_edge: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Ladder order, seeds in the order given, for every rung.
    pub points: Vec<RatioPoint>,
    pub summary: Vec<RungSummary>,
    pub a_star: u32,
    pub a_star_flagged: bool,
    pub phase_boundary: PhaseBoundary,
    pub delta: f64,
    pub seeds: Vec<u64>,
    pub n_train_normal: usize,
    pub test_set_hash: String,
    #[serde(default)]
    pub cluster_count: Option<usize>,
}

/// Largest non-one-shot denominator whose AUC is within `delta` of the best.
pub fn find_effective_ratio(points: &[(Denominator, f64)], delta: f64) -> Result<EffectiveRatio> {
    let valid: Vec<(Denominator, f64)> = points.iter().copied().filter(|(_, a)| a.is_finite()).collect();
    if valid.len() < 2 {
        return Err(Error::validation("effective ratio needs at least two rungs with an AUC"));
    }
    if !(delta >= 0.0) {
        return Err(Error::validation("delta must be non-negative"));
    }
    let best = valid.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let a_star = valid
        .iter()
        .filter_map(|(d, auc)| match d {
            Denominator::Ratio(a) if *auc >= best - delta => Some(*a),
            _ => None,
        })
        .max();
    match a_star {
        Some(a_star) => Ok(EffectiveRatio { a_star, flagged: false }),
        None => {
            log::warn!("no ratio rung is within {delta} of the best AUC {best}; a* set to 1");
            Ok(EffectiveRatio { a_star: 1, flagged: true })
        }
    }
}

/// Rungs more imbalanced than `1/a*` (one-shot included) are
/// mining-opportunity; the rest are over-mining.
pub fn classify_phases(denominators: &[Denominator], a_star: u32) -> Vec<Phase> {
    denominators
        .iter()
        .map(|d| match d {
            Denominator::Ratio(a) if *a <= a_star => Phase::OverMining,
            _ => Phase::MiningOpportunity,
        })
        .collect()
}

fn phase_boundary(denominators: &[Denominator], phases: &[Phase]) -> PhaseBoundary {
    let mut order: Vec<usize> = (0..denominators.len()).collect();
    order.sort_by_key(|&i| denominators[i].sort_key());
    let last_over = order.iter().rev().find(|&&i| phases[i] == Phase::OverMining);
    let first_opp = order.iter().find(|&&i| phases[i] == Phase::MiningOpportunity);
    PhaseBoundary {
        over_mining_edge: last_over.map(|&i| denominators[i].to_string()),
        opportunity_edge: first_opp.map(|&i| denominators[i].to_string()),
    }
}

/// SHA-256 of the newline-joined sorted sample ids.
pub fn test_set_hash(samples: &[ImageSample]) -> String {
    let mut ids: Vec<&str> = samples.iter().map(|s| s.id.as_str()).collect();
    ids.sort_unstable();
    io::sha256_hex(ids.join("\n").as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub train: TrainConfig,
    /// One full ladder sweep per seed.
    pub seeds: Vec<u64>,
    pub delta: f64,
    /// Concurrent rung jobs.
    pub workers: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::desk(),
            seeds: vec![0],
            delta: DEFAULT_DELTA,
            workers: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
        }
    }
}

/// Mean and population standard deviation.
fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    Some((m, v.sqrt()))
}

fn run_rung(
    partition: &Partition,
    rung: &Rung,
    seed: u64,
    config: &AblationConfig,
    make_backbone: &(dyn Fn(u64) -> Result<Backbone> + Sync),
) -> RatioPoint {
    let test_hash = test_set_hash(&partition.test);
    let outcome = (|| -> Result<(MetricsRecord, Calibration)> {
        let train = subsample_anomalies(&partition.train, rung.anomaly_count, seed)?;
        let mut cfg = config.train;
        cfg.seed = seed;
        let (detector, _) = train_detector(&train, make_backbone(seed)?, &cfg)?;
        let cal_rows = score_dataset(&detector, &partition.calibration);
        let cal_scores: Vec<f64> = cal_rows.iter().map(|r| r.score).collect();
        let cal_labels: Vec<Label> = partition.calibration.iter().map(|s| s.label).collect();
        let calibration = calibrate_threshold(&cal_scores, &cal_labels)?;
        let rows = score_dataset(&detector, &partition.test);
        let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
        let labels: Vec<Label> = partition.test.iter().map(|s| s.label).collect();
        Ok((compute_metrics(&scores, &labels, calibration.threshold)?, calibration))
    })();
    let (metrics, calibration, failure) = match outcome {
        Ok((m, c)) => (Some(m), Some(c), None),
        Err(e) => {
            log::error!("rung {} seed {seed} failed: {e}", rung.label);
            (None, None, Some(e.to_string()))
        }
    };
    RatioPoint {
        ratio_label: rung.label.clone(),
        denominator: rung.denominator,
        anomaly_count: rung.anomaly_count,
        seed,
        metrics,
        calibration,
        test_set_hash: test_hash,
        failure,
    }
}

/// Sweep with the toy backbone at the configured input size.
pub fn run_ablation(partition: &Partition, ladder: &RatioLadder, config: &AblationConfig) -> Result<AblationReport> {
    let channels = partition.train.first().map(|s| s.channels()).unwrap_or(3);
    let size = config.train.input_size;
    run_ablation_with(partition, ladder, config, &move |seed| Backbone::toy_fcn(size, channels, seed))
}

/// Trains one detector per (rung, seed) from scratch, calibrates on the
/// calibration split and evaluates on the fixed test split.
///
/// Jobs run concurrently on `config.workers` threads; results are merged in
/// ladder order. A failing job leaves a marked point instead of aborting.
pub fn run_ablation_with(
    partition: &Partition,
    ladder: &RatioLadder,
    config: &AblationConfig,
    make_backbone: &(dyn Fn(u64) -> Result<Backbone> + Sync),
) -> Result<AblationReport> {
    use rayon::prelude::*;

    config.train.validate()?;
    if config.seeds.is_empty() {
        return Err(Error::validation("ablation needs at least one seed"));
    }
    if ladder.rungs.is_empty() {
        return Err(Error::validation("ladder has no rungs"));
    }
    for part in [&partition.calibration, &partition.test] {
        let anom = part.iter().filter(|s| s.label.is_anomalous()).count();
        if anom == 0 || anom == part.len() {
            return Err(Error::validation("calibration and test splits need both classes"));
        }
    }
    let jobs: Vec<(&Rung, u64)> = ladder
        .rungs
        .iter()
        .flat_map(|r| config.seeds.iter().map(move |&s| (r, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("worker pool: {e}")))?;
    let points: Vec<RatioPoint> = pool.install(|| {
        jobs.par_iter()
            .map(|(rung, seed)| {
                log::info!("training rung {} (anomalies {}) seed {seed}", rung.label, rung.anomaly_count);
                run_rung(partition, rung, *seed, config, make_backbone)
            })
            .collect()
    });
    assemble_report(points, ladder, config, partition)
}

fn assemble_report(
    points: Vec<RatioPoint>,
    ladder: &RatioLadder,
    config: &AblationConfig,
    partition: &Partition,
) -> Result<AblationReport> {
    let hash = test_set_hash(&partition.test);
    if points.iter().any(|p| p.test_set_hash != hash) {
        return Err(Error::validation("test set changed between rungs"));
    }
    let mut summary: Vec<RungSummary> = ladder
        .rungs
        .iter()
        .map(|rung| {
            let ok: Vec<&MetricsRecord> = points
                .iter()
                .filter(|p| p.denominator == rung.denominator)
                .filter_map(|p| p.metrics.as_ref())
                .collect();
            let runs = points.iter().filter(|p| p.denominator == rung.denominator).count();
            let col = |f: fn(&MetricsRecord) -> f64| ok.iter().map(|m| f(m)).collect::<Vec<_>>();
            let auc = mean_std(&col(|m| m.auc));
            RungSummary {
                ratio_label: rung.label.clone(),
                denominator: rung.denominator,
                anomaly_count: rung.anomaly_count,
                runs,
                failures: runs - ok.len(),
                auc_mean: auc.map(|a| a.0),
                auc_std: auc.map(|a| a.1),
                f1_mean: mean_std(&col(|m| m.f1)).map(|a| a.0),
                precision_mean: mean_std(&col(|m| m.precision)).map(|a| a.0),
                recall_mean: mean_std(&col(|m| m.recall)).map(|a| a.0),
                phase: Phase::OverMining,
            }
        })
        .collect();
    let aucs: Vec<(Denominator, f64)> = summary
        .iter()
        .filter_map(|s| s.auc_mean.map(|a| (s.denominator, a)))
        .collect();
    let eff = find_effective_ratio(&aucs, config.delta)?;
    let denoms: Vec<Denominator> = summary.iter().map(|s| s.denominator).collect();
    let phases = classify_phases(&denoms, eff.a_star);
    for (s, p) in summary.iter_mut().zip(&phases) {
        s.phase = *p;
    }
    Ok(AblationReport {
        points,
        summary,
        a_star: eff.a_star,
        a_star_flagged: eff.flagged,
        phase_boundary: phase_boundary(&denoms, &phases),
        delta: config.delta,
        seeds: config.seeds.clone(),
        n_train_normal: ladder.n_train,
        test_set_hash: hash,
        cluster_count: None,
    })
}

#[derive(Serialize)]
struct ReportRow<'a> {
    ratio_label: &'a str,
    anomaly_count: usize,
    auc: Option<f64>,
    f1: Option<f64>,
    precision: Option<f64>,
    recall: Option<f64>,
    phase: &'static str,
    auc_std: Option<f64>,
    runs: usize,
    failures: usize,
}

impl AblationReport {
    /// Checks that a (possibly re-parsed) report is self-consistent.
    pub fn validate(&self) -> Result<()> {
        let in_ladder = self
            .summary
            .iter()
            .any(|s| s.denominator == Denominator::Ratio(self.a_star));
        if !in_ladder && !self.a_star_flagged {
            return Err(Error::validation(format!("a* = {} is not a ladder rung", self.a_star)));
        }
        if self.points.iter().any(|p| p.test_set_hash != self.test_set_hash) {
            return Err(Error::validation("points were evaluated on different test sets"));
        }
        let denoms: Vec<Denominator> = self.summary.iter().map(|s| s.denominator).collect();
        let phases = classify_phases(&denoms, self.a_star);
        if self.summary.iter().zip(&phases).any(|(s, p)| s.phase != *p) {
            return Err(Error::validation("phase labels disagree with a*"));
        }
        for p in self.points.iter().filter_map(|p| p.metrics.as_ref()) {
            if !(0.0..=1.0).contains(&p.auc) {
                return Err(Error::validation("AUC outside [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        io::read_json(path)
    }

    /// One row per rung with seed-averaged metrics.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wr = io::csv_writer(path)?;
        for s in &self.summary {
            wr.serialize(ReportRow {
                ratio_label: &s.ratio_label,
                anomaly_count: s.anomaly_count,
                auc: s.auc_mean,
                f1: s.f1_mean,
                precision: s.precision_mean,
                recall: s.recall_mean,
                phase: s.phase.as_str(),
                auc_std: s.auc_std,
                runs: s.runs,
                failures: s.failures,
            })?;
        }
        wr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// AUC and F1 against ladder position, with the `1/a*` boundary dashed.
    pub fn write_effect_png(&self, path: &Path) -> Result<()> {
        let n = self.summary.len();
        let xs: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let series = |f: fn(&RungSummary) -> Option<f64>| -> Vec<(f64, f64)> {
            xs.iter().zip(&self.summary).filter_map(|(x, s)| f(s).map(|v| (*x, v))).collect()
        };
        let auc = series(|s| s.auc_mean);
        let f1 = series(|s| s.f1_mean);
        let (lo, _) = plot::padded_range(auc.iter().chain(&f1).map(|p| p.1));
        let mut c = Canvas::new(480, 320, (-0.5, n as f64 - 0.5), (lo.min(0.5), 1.02));
        c.polyline(&auc, plot::BLUE);
        c.polyline(&f1, plot::RED);
        for p in &auc {
            c.dot(p.0, p.1, 2, plot::BLUE);
        }
        for p in &f1 {
            c.dot(p.0, p.1, 2, plot::RED);
        }
        if let Some(i) = self.summary.iter().position(|s| s.denominator == Denominator::Ratio(self.a_star)) {
            c.vmarker(i as f64 + 0.5, plot::BLACK);
        }
        c.save(path)
    }
}
