//! One function per subcommand. Every file written gets a sidecar.

use std::path::{Path, PathBuf};

use fcdd_core::cluster::{self, TsneConfig};
use fcdd_core::data::{
    ingest_folder, ladder_counts, split_dataset, subsample_anomalies, Denominator, FolderLayout, ImageSample, Label,
    Partition, SplitFile,
};
use fcdd_core::fcdd::{score_dataset, train_detector, Backbone, Detector, ScoreRow};
use fcdd_core::harness::{calibrate_threshold, compute_metrics, run_ablation, AblationConfig, AblationReport};
use fcdd_core::heatmap::{render_overlay, score_histogram, upsample_field, GaussianParams};
use fcdd_core::mnpair::{
    read_embeddings_csv, similarity_margin, train_embedder, write_embeddings_csv, ContrastiveEpoch, EmbeddingMeta,
    SimilarityMargin,
};
use fcdd_core::{io, synth};
use serde::{Deserialize, Serialize};

use crate::{sidecar, CliError, RunConfig};

fn out_path(config: &RunConfig, rel: &str) -> PathBuf {
    config.out.join(rel)
}

fn load_samples(config: &RunConfig) -> Result<Vec<ImageSample>, CliError> {
    match &config.dataset.folder {
        Some(dir) => {
            let ingested = ingest_folder(dir, &FolderLayout::default())?;
            if ingested.samples.is_empty() {
                return Err(CliError::flag("--data", format!("no readable images under {}", dir.display())));
            }
            Ok(ingested.samples)
        }
        None => Ok(synth::generate(&config.dataset.synth.spec())?),
    }
}

fn load_partition(config: &RunConfig) -> Result<Partition, CliError> {
    let samples = load_samples(config)?;
    Ok(split_dataset(&samples, config.split, config.seed)?)
}

fn labels_of(samples: &[ImageSample]) -> Vec<Label> {
    samples.iter().map(|s| s.label).collect()
}

fn write_json_artifact<T: Serialize>(config: &RunConfig, command: &str, path: &Path, value: &T) -> Result<(), CliError> {
    io::write_json(path, value)?;
    sidecar::write(path, command, config)
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut wr = io::csv_writer(path)?;
    for row in rows {
        wr.serialize(row).map_err(fcdd_core::Error::from)?;
    }
    wr.flush()
        .map_err(|e| fcdd_core::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
    Ok(())
}

/// `synth`: writes the dataset folder with manifest and ground truth.
pub fn synth(config: &RunConfig) -> Result<(), CliError> {
    if config.dataset.folder.is_some() {
        return Err(CliError::flag("--data", "synth generates a dataset; drop --data"));
    }
    let samples = synth::generate(&config.dataset.synth.spec())?;
    let root = out_path(config, "dataset");
    synth::write_folder(&samples, &root)?;
    for name in ["manifest.csv", "ground_truth.json"] {
        sidecar::write(&root.join(name), "synth", config)?;
    }
    println!("wrote {} images to {}", samples.len(), root.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub ratio: String,
    pub anomaly_count: usize,
    pub n_train: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// `train`: subsamples the training anomalies to `train.ratio`, trains and
/// saves `checkpoint/`, `train_log.csv`, `splits.json` and `train.json`.
pub fn train(config: &RunConfig) -> Result<(), CliError> {
    let partition = load_partition(config)?;
    let n_normal = partition.train.iter().filter(|s| !s.label.is_anomalous()).count();
    let wanted: Denominator = config.train.ratio.parse().map_err(|e| CliError::flag("--config", format!("{e}")))?;
    let ladder = ladder_counts(n_normal)?.select(&[wanted])?;
    let rung = &ladder.rungs[0];
    let train = subsample_anomalies(&partition.train, rung.anomaly_count, config.seed)?;
    let train_cfg = config.train.config(config.seed);
    let channels = train.first().map(|s| s.channels()).unwrap_or(3);
    let backbone = Backbone::toy_fcn(train_cfg.input_size, channels, config.seed)?;
    let (detector, log) = train_detector(&train, backbone, &train_cfg)?;

    let ckpt = out_path(config, "checkpoint");
    detector.save(&ckpt)?;
    sidecar::write(&ckpt.join("config.json"), "train", config)?;
    let log_path = out_path(config, "train_log.csv");
    log.write_csv(&log_path)?;
    sidecar::write(&log_path, "train", config)?;
    let splits = out_path(config, "splits.json");
    SplitFile::new(&partition, config.split, config.seed).save(&splits)?;
    sidecar::write(&splits, "train", config)?;
    let summary = TrainSummary {
        ratio: rung.label.clone(),
        anomaly_count: rung.anomaly_count,
        n_train: train.len(),
        initial_loss: log.initial_loss(),
        final_loss: log.final_loss(),
    };
    write_json_artifact(config, "train", &out_path(config, "train.json"), &summary)?;
    println!(
        "trained at {} on {} images: loss {:.6} -> {:.6}; checkpoint in {}",
        summary.ratio,
        summary.n_train,
        summary.initial_loss,
        summary.final_loss,
        ckpt.display()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub calibration: fcdd_core::harness::Calibration,
    pub metrics: fcdd_core::harness::MetricsRecord,
    pub n_test: usize,
}

/// `score`: scores the test split with a saved checkpoint; writes
/// `scores.csv`, `metrics.json`, `histogram.{csv,png}` and one overlay PNG
/// plus raw dump per test image under `heatmaps/`.
pub fn score(config: &RunConfig, checkpoint: Option<&Path>) -> Result<(), CliError> {
    let ckpt = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| out_path(config, "checkpoint"));
    if !ckpt.join("config.json").is_file() {
        return Err(CliError::flag("--checkpoint", format!("no checkpoint at {}", ckpt.display())));
    }
    let detector = Detector::load(&ckpt)?;
    let partition = load_partition(config)?;

    let cal_rows = score_dataset(&detector, &partition.calibration);
    let cal_scores: Vec<f64> = cal_rows.iter().map(|r| r.score).collect();
    let calibration = calibrate_threshold(&cal_scores, &labels_of(&partition.calibration))?;

    let test = &partition.test;
    let rows: Vec<ScoreRow> = score_dataset(&detector, test);
    let scores: Vec<f64> = rows.iter().map(|r| r.score).collect();
    let labels = labels_of(test);
    let scores_path = out_path(config, "scores.csv");
    write_rows(&scores_path, &rows)?;
    sidecar::write(&scores_path, "score", config)?;

    match compute_metrics(&scores, &labels, calibration.threshold) {
        Ok(metrics) => {
            let summary = ScoreSummary {
                calibration,
                metrics,
                n_test: test.len(),
            };
            write_json_artifact(config, "score", &out_path(config, "metrics.json"), &summary)?;
            println!(
                "AUC {:.4}  F1 {:.4}  precision {:.4}  recall {:.4}  threshold {:.6}",
                metrics.auc, metrics.f1, metrics.precision, metrics.recall, calibration.threshold
            );
        }
        Err(e) => log::warn!("metrics skipped: {e}"),
    }

    let hist = score_histogram(&scores, &labels, config.heatmap.bins)?;
    let hist_csv = out_path(config, "histogram.csv");
    hist.write_csv(&hist_csv)?;
    sidecar::write(&hist_csv, "score", config)?;
    hist.write_png(&out_path(config, "histogram.png"))?;

    let maps = detector.field_maps(test);
    let dir = out_path(config, "heatmaps");
    for (map, sample) in maps.iter().zip(test) {
        let sigma = config
            .heatmap
            .sigma
            .unwrap_or_else(|| GaussianParams::for_geometry(&map.geometry).sigma);
        let heat = upsample_field(map, sigma, (sample.height(), sample.width()))?;
        let stem = dir.join(&sample.id).with_extension("");
        render_overlay(sample, &heat, &stem.with_extension("png"))?;
        heat.save_raw(&stem)?;
    }
    println!("scored {} test images; heatmaps in {}", test.len(), dir.display());
    Ok(())
}

/// `ablate`: sweeps the configured rungs over `repeats` seeds.
pub fn ablate(config: &RunConfig) -> Result<(), CliError> {
    let partition = load_partition(config)?;
    let n_normal = partition.train.iter().filter(|s| !s.label.is_anomalous()).count();
    let ladder = ladder_counts(n_normal)?
        .select(&config.ablation.denominators()?)
        .map_err(|e| CliError::flag("--rungs", e.to_string()))?;
    let ab = AblationConfig {
        train: config.train.config(config.seed),
        seeds: (0..config.ablation.repeats as u64).map(|k| config.seed + k).collect(),
        delta: config.ablation.delta,
        workers: config.ablation.workers.unwrap_or(AblationConfig::default().workers),
    };
    let report = run_ablation(&partition, &ladder, &ab)?;
    let dir = out_path(config, "ablation");
    let json = dir.join("report.json");
    report.write_json(&json)?;
    sidecar::write(&json, "ablate", config)?;
    let csv = dir.join("report.csv");
    report.write_csv(&csv)?;
    sidecar::write(&csv, "ablate", config)?;
    report.write_effect_png(&dir.join("effect.png"))?;
    print!("{}", summary_table(&report));
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub meta: EmbeddingMeta,
    /// Cosine margin over the held-out (calibration and test) points.
    pub held_out_margin: SimilarityMargin,
    pub log: Vec<ContrastiveEpoch>,
}

/// `embed`: trains the encoder on the training split (class ids as labels)
/// and writes every sample's embedding to `embeddings.csv`.
pub fn embed(config: &RunConfig) -> Result<(), CliError> {
    let partition = load_partition(config)?;
    let cfg = config
        .contrastive
        .config(config.seed, (config.train.input_size[0], config.train.input_size[1]));
    let run = train_embedder(&partition.train, &cfg)?;
    let held: Vec<ImageSample> = partition
        .calibration
        .iter()
        .chain(&partition.test)
        .cloned()
        .collect();
    let held_points = run.encoder.embed(&held)?;
    let margin = similarity_margin(&held_points)?;

    let mut points = run.points.clone();
    let mut flags = vec![false; points.len()];
    flags.extend(std::iter::repeat_n(true, held_points.len()));
    points.extend(held_points);
    let csv = out_path(config, "embeddings.csv");
    write_embeddings_csv(&points, &flags, &csv)?;
    sidecar::write(&csv, "embed", config)?;
    let summary = EmbedSummary {
        meta: EmbeddingMeta::new(&cfg, points.len()),
        held_out_margin: margin,
        log: run.log,
    };
    write_json_artifact(config, "embed", &out_path(config, "embeddings.json"), &summary)?;
    println!(
        "embedded {} samples; held-out intra {:.4} inter {:.4} margin {:.4}",
        points.len(),
        margin.intra,
        margin.inter,
        margin.margin()
    );
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub count: usize,
    pub noise: usize,
    pub points: usize,
    pub eps: f64,
    pub min_neighbors: usize,
    pub perplexity: f64,
}

/// `cluster`: t-SNE to 2-D, then DBSCAN; writes `scatter.csv`, two scatter
/// PNGs and `clusters.json`, and prints the cluster count.
pub fn cluster(config: &RunConfig, embeddings: Option<&Path>) -> Result<(), CliError> {
    let path = embeddings
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out_path(config, "embeddings.csv"));
    if !path.is_file() {
        return Err(CliError::flag("--embeddings", format!("{} does not exist", path.display())));
    }
    let (points, _) = read_embeddings_csv(&path)?;
    let tsne = TsneConfig {
        perplexity: config.cluster.perplexity,
        iterations: config.cluster.iterations,
        ..TsneConfig::default()
    };
    let flat = cluster::reduce_2d_with(&points, &tsne, config.seed)?;
    let assign = cluster::dbscan(&flat, config.cluster.eps, config.cluster.min_neighbors)?;
    let count = cluster::count_clusters(&assign);
    let csv = out_path(config, "scatter.csv");
    cluster::write_scatter_csv(&flat, &assign, &csv)?;
    sidecar::write(&csv, "cluster", config)?;
    cluster::write_scatter_pngs(
        &flat,
        &assign,
        &out_path(config, "scatter_label.png"),
        &out_path(config, "scatter_cluster.png"),
    )?;
    let summary = ClusterSummary {
        count,
        noise: assign.iter().filter(|a| a.cluster.is_none()).count(),
        points: flat.len(),
        eps: config.cluster.eps,
        min_neighbors: config.cluster.min_neighbors,
        perplexity: config.cluster.perplexity,
    };
    write_json_artifact(config, "cluster", &out_path(config, "clusters.json"), &summary)?;
    println!("clusters: {count} ({} noise points of {})", summary.noise, summary.points);
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Markdown table of the per-rung summary.
pub fn summary_table(report: &AblationReport) -> String {
    let mut s = String::from("| ratio | anomalies | AUC | AUC std | F1 | phase |\n|---|---|---|---|---|---|\n");
    for r in &report.summary {
        s.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} |\n",
            r.ratio_label,
            r.anomaly_count,
            fmt_opt(r.auc_mean),
            fmt_opt(r.auc_std),
            fmt_opt(r.f1_mean),
            r.phase.as_str()
        ));
    }
    s.push_str(&format!(
        "\neffective ratio 1/a* = 1/{}{}\n",
        report.a_star,
        if report.a_star_flagged { " (flagged: no rung within delta)" } else { "" }
    ));
    if let Some(c) = report.cluster_count {
        s.push_str(&format!("feature clusters: {c}\n"));
    }
    s
}

/// `report`: re-reads `ablation/report.json`, attaches the cluster count
/// when `clusters.json` exists and writes `report.json`, `summary.md` and
/// the effect plot.
pub fn report(config: &RunConfig) -> Result<(), CliError> {
    let src = out_path(config, "ablation/report.json");
    if !src.is_file() {
        return Err(CliError::flag("--out", format!("no ablation report at {}", src.display())));
    }
    let mut report = AblationReport::read_json(&src)?;
    report.validate()?;
    let clusters = out_path(config, "clusters.json");
    if clusters.is_file() {
        let c: ClusterSummary = io::read_json(&clusters)?;
        report.cluster_count = Some(c.count);
    }
    let json = out_path(config, "report.json");
    report.write_json(&json)?;
    sidecar::write(&json, "report", config)?;
    let table = summary_table(&report);
    let md = out_path(config, "summary.md");
    std::fs::write(&md, &table).map_err(|e| fcdd_core::Error::Io { path: md.clone(), source: e })?;
    sidecar::write(&md, "report", config)?;
    report.write_effect_png(&out_path(config, "effect.png"))?;
    print!("{table}");
    Ok(())
}
