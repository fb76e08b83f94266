//! Fully convolutional one-class detector.
//!
//! The backbone maps an image to a `u × v` single-channel receptive field.
//! Each cell passes through the pseudo-Huber function `H`, the per-image mean
//! of `H` drives the loss and the sum of `H` is the anomaly score.

use std::path::Path;
use std::sync::Once;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, Label};
use crate::error::{Error, Result};
use crate::io;
use crate::nn::{Activation, Adam, AdamConfig, ConvSpec, ConvStack, Shape};
use crate::rng::{derive_seed, seeded};

/// Lower bound applied to every log argument.
pub const LOG_CLAMP: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Pseudo-Huber

/// `H(x) = sqrt(x² + 1) − 1`.
pub fn pseudo_huber(x: f64) -> f64 {
    // x² / (sqrt(x²+1) + 1) is the same value without cancellation near 0
    let x2 = x * x;
    x2 / ((x2 + 1.0).sqrt() + 1.0)
}

/// `dH/dx = x / sqrt(x² + 1)`.
pub fn pseudo_huber_grad(x: f64) -> f64 {
    x / (x * x + 1.0).sqrt()
}

/// Companion likelihood `ℓ(x) = exp(−H(x))`.
pub fn huber_likelihood(x: f64) -> f64 {
    (-pseudo_huber(x)).exp()
}

pub fn pseudo_huber_map(raw: &Array2<f64>) -> Array2<f64> {
    raw.mapv(pseudo_huber)
}

// ---------------------------------------------------------------------------
// Field maps

/// Where each field cell sits in input-pixel coordinates: cell `(row, col)`
/// is centered on `(offset + stride·col, offset + stride·row)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldGeometry {
    pub stride: f64,
    pub offset: f64,
    /// Input image `(h, w)` the geometry refers to.
    pub input_size: (usize, usize),
}

impl FieldGeometry {
    /// `(x, y)` center of a cell.
    pub fn center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.offset + self.stride * col as f64,
            self.offset + self.stride * row as f64,
        )
    }

    /// Geometry of the toy backbone family: stride 8, patch-centered.
    pub fn stride8(input_size: (usize, usize)) -> Self {
        Self {
            stride: 8.0,
            offset: 3.5,
            input_size,
        }
    }
}

/// A pseudo-Huber receptive-field map (non-negative values) with geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldMap {
    pub values: Array2<f64>,
    pub geometry: FieldGeometry,
}

impl FieldMap {
    pub fn new(values: Array2<f64>, geometry: FieldGeometry) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("field map has non-finite values"));
        }
        if values.is_empty() {
            return Err(Error::validation("field map is empty"));
        }
        Ok(Self { values, geometry })
    }

    /// Map without meaningful geometry, for loss computations in isolation.
    pub fn bare(values: Array2<f64>) -> Self {
        let (u, v) = values.dim();
        Self {
            geometry: FieldGeometry::stride8((u * 8, v * 8)),
            values,
        }
    }

    pub fn mean(&self) -> f64 {
        self.values.mean().unwrap_or(0.0)
    }

    pub fn size(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Anomaly score: the sum of all cells of a pseudo-Huber map.
pub fn anomaly_score(map: &FieldMap) -> f64 {
    map.values.sum()
}

// ---------------------------------------------------------------------------
// Losses

/// Loss value plus the number of samples whose log argument hit the clamp.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub saturated: usize,
}

fn check_batch(maps: &[FieldMap], labels: &[Label]) -> Result<()> {
    if maps.len() != labels.len() {
        return Err(Error::validation(format!(
            "{} maps but {} labels",
            maps.len(),
            labels.len()
        )));
    }
    if maps.is_empty() {
        return Err(Error::validation("empty batch"));
    }
    Ok(())
}

/// Per-sample term and `d term / d m` of the cross-entropy objective, with
/// `ℓ = exp(−m)`.
fn svdd_term(m: f64, label: Label) -> (f64, f64, bool) {
    let ell = (-m).exp();
    match label {
        Label::Normal => {
            if ell < LOG_CLAMP {
                (-LOG_CLAMP.ln(), 0.0, true)
            } else {
                // −log ℓ, d/dm = 1
                (-ell.ln(), 1.0, false)
            }
        }
        Label::Anomalous => {
            let arg = 1.0 - ell;
            if arg < LOG_CLAMP {
                (-LOG_CLAMP.ln(), 0.0, true)
            } else {
                // −log(1 − ℓ), d/dm = −ℓ / (1 − ℓ)
                (-arg.ln(), -ell / arg, false)
            }
        }
    }
}

/// Per-sample term of the FCDD objective and its derivative in `m`.
fn fcdd_term(m: f64, label: Label) -> (f64, f64, bool) {
    match label {
        Label::Normal => (m, 1.0, false),
        Label::Anomalous => {
            let e = (-m).exp();
            if e > 1.0 - LOG_CLAMP {
                (-LOG_CLAMP.ln(), 0.0, true)
            } else {
                (-(1.0 - e).ln(), -e / (1.0 - e), false)
            }
        }
    }
}

fn batch_loss(
    maps: &[FieldMap],
    labels: &[Label],
    term: fn(f64, Label) -> (f64, f64, bool),
) -> Result<(LossValue, Vec<Array2<f64>>)> {
    check_batch(maps, labels)?;
    let n = maps.len() as f64;
    let mut total = 0.0;
    let mut saturated = 0;
    let mut grads = Vec::with_capacity(maps.len());
    for (map, label) in maps.iter().zip(labels) {
        let (value, dm, sat) = term(map.mean(), *label);
        total += value;
        saturated += sat as usize;
        let cells = map.values.len() as f64;
        grads.push(Array2::from_elem(map.values.dim(), dm / (n * cells)));
    }
    Ok((
        LossValue {
            value: total / n,
            saturated,
        },
        grads,
    ))
}

/// Cross-entropy one-class loss over pseudo-Huber maps, with the per-image
/// likelihood `ℓ_k = exp(−mean H)`.
pub fn deep_svdd_loss(maps: &[FieldMap], labels: &[Label]) -> Result<LossValue> {
    batch_loss(maps, labels, svdd_term).map(|(l, _)| l)
}

/// `deep_svdd_loss` and its gradient with respect to every map cell.
pub fn deep_svdd_loss_grad(maps: &[FieldMap], labels: &[Label]) -> Result<(LossValue, Vec<Array2<f64>>)> {
    batch_loss(maps, labels, svdd_term)
}

/// FCDD loss: normal maps contribute their mean `H`, anomalous maps
/// `−log(1 − exp(−mean H))`. With no anomalies it reduces to the mean of the
/// per-map means.
pub fn fcdd_loss(maps: &[FieldMap], labels: &[Label]) -> Result<LossValue> {
    batch_loss(maps, labels, fcdd_term).map(|(l, _)| l)
}

/// `fcdd_loss` and its gradient with respect to every map cell.
pub fn fcdd_loss_grad(maps: &[FieldMap], labels: &[Label]) -> Result<(LossValue, Vec<Array2<f64>>)> {
    batch_loss(maps, labels, fcdd_term)
}

// ---------------------------------------------------------------------------
// Backbone

/// How pixels are conditioned before the first convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputNorm {
    /// `x − 0.5`
    Center,
    /// Subtract each image's per-channel mean.
    PerImageMean,
}

/// Fully convolutional network producing one receptive-field map per image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub name: String,
    pub input_size: (usize, usize),
    pub input_channels: usize,
    pub norm: InputNorm,
    pub net: ConvStack,
}

/// Channel widths of the toy network's three stride-2 blocks.
pub const TOY_WIDTHS: [usize; 3] = [8, 16, 32];

impl Backbone {
    /// Three stride-2 convolution blocks and a 1×1 head: field = input / 8.
    pub fn toy_fcn(input_size: (usize, usize), input_channels: usize, seed: u64) -> Result<Self> {
        Self::toy_fcn_with(input_size, input_channels, TOY_WIDTHS, seed)
    }

    pub fn toy_fcn_with(
        input_size: (usize, usize),
        input_channels: usize,
        widths: [usize; 3],
        seed: u64,
    ) -> Result<Self> {
        let (h, w) = input_size;
        if h % 8 != 0 || w % 8 != 0 || h < 8 || w < 8 {
            return Err(Error::validation(format!(
                "toy backbone needs input sides divisible by 8, got {h}x{w}"
            )));
        }
        let block = |i, o| ConvSpec {
            in_ch: i,
            out_ch: o,
            kernel: 4,
            stride: 2,
            pad: 1,
            activation: Activation::LeakyRelu,
            bias: false,
        };
        let specs = vec![
            block(input_channels, widths[0]),
            block(widths[0], widths[1]),
            block(widths[1], widths[2]),
            ConvSpec {
                in_ch: widths[2],
                out_ch: 1,
                kernel: 1,
                stride: 1,
                pad: 0,
                activation: Activation::Identity,
                bias: false,
            },
        ];
        Ok(Self {
            name: "toy-fcn".into(),
            input_size,
            input_channels,
            norm: InputNorm::PerImageMean,
            net: ConvStack::new(specs, &mut seeded(seed)),
        })
    }

    /// Any convolution stack ending in a single channel can act as backbone.
    pub fn plug_in(
        name: impl Into<String>,
        input_size: (usize, usize),
        input_channels: usize,
        norm: InputNorm,
        net: ConvStack,
    ) -> Result<Self> {
        let out = net.output_shape(Shape {
            c: input_channels,
            b: 1,
            h: input_size.0,
            w: input_size.1,
        });
        if net.specs().first().map(|s| s.in_ch) != Some(input_channels) || out.c != 1 {
            return Err(Error::validation(
                "plug-in backbone must take the input channels and emit one channel",
            ));
        }
        Ok(Self {
            name: name.into(),
            input_size,
            input_channels,
            norm,
            net,
        })
    }

    pub fn field_size(&self) -> (usize, usize) {
        let out = self.net.output_shape(self.input_shape(1));
        (out.h, out.w)
    }

    pub fn geometry(&self) -> FieldGeometry {
        let (stride, offset) = self.net.geometry();
        FieldGeometry {
            stride,
            offset,
            input_size: self.input_size,
        }
    }

    fn input_shape(&self, b: usize) -> Shape {
        Shape {
            c: self.input_channels,
            b,
            h: self.input_size.0,
            w: self.input_size.1,
        }
    }

    /// Packs images (already at `input_size`) into the batch layout.
    fn pack(&self, images: &[&Array3<f32>]) -> (Vec<f32>, Shape) {
        pack_batch(images, self.input_channels, self.input_size, self.norm)
    }

    /// Raw single-channel outputs, one `u × v` block per image.
    fn raw_maps(&self, images: &[&Array3<f32>]) -> Vec<Array2<f64>> {
        let (x, shape) = self.pack(images);
        let (y, out) = self.net.forward(&x, shape);
        split_maps(&y, out)
    }

    /// Pseudo-Huber field maps for images already at `input_size`.
    pub fn field_maps(&self, images: &[&Array3<f32>]) -> Vec<FieldMap> {
        let geometry = self.geometry();
        self.raw_maps(images)
            .into_iter()
            .map(|raw| FieldMap {
                values: pseudo_huber_map(&raw),
                geometry,
            })
            .collect()
    }
}

/// Images of size `(h, w)` into the `[C][B][H][W]` layout, normalized.
/// Images with fewer channels repeat their last channel.
pub(crate) fn pack_batch(images: &[&Array3<f32>], c: usize, (h, w): (usize, usize), norm: InputNorm) -> (Vec<f32>, Shape) {
    let shape = Shape { c, b: images.len(), h, w };
    let mut x = vec![0.0f32; shape.len()];
    for (b, img) in images.iter().enumerate() {
        for ch in 0..c {
            let src_ch = ch.min(img.dim().2 - 1);
            let shift = match norm {
                InputNorm::Center => 0.5,
                InputNorm::PerImageMean => {
                    let s: f64 = (0..h)
                        .flat_map(|y| (0..w).map(move |xx| (y, xx)))
                        .map(|(y, xx)| img[[y, xx, src_ch]] as f64)
                        .sum();
                    (s / (h * w) as f64) as f32
                }
            };
            let base = (ch * shape.b + b) * h * w;
            for y in 0..h {
                for xx in 0..w {
                    x[base + y * w + xx] = img[[y, xx, src_ch]] - shift;
                }
            }
        }
    }
    (x, shape)
}

fn split_maps(y: &[f32], out: Shape) -> Vec<Array2<f64>> {
    let cells = out.h * out.w;
    (0..out.b)
        .map(|b| {
            Array2::from_shape_fn((out.h, out.w), |(r, c)| y[b * cells + r * out.w + c] as f64)
        })
        .collect()
}

/// Bilinear resize to `(h, w)`; returns the input unchanged when it already fits.
pub fn resize_bilinear(pixels: &Array3<f32>, size: (usize, usize)) -> Array3<f32> {
    let (h, w, c) = pixels.dim();
    if (h, w) == size {
        return pixels.clone();
    }
    let (th, tw) = size;
    let mut out = Array3::zeros((th, tw, c));
    for ch in 0..c {
        let plane = image::ImageBuffer::<image::Luma<f32>, Vec<f32>>::from_fn(w as u32, h as u32, |x, y| {
            image::Luma([pixels[[y as usize, x as usize, ch]]])
        });
        let resized = image::imageops::resize(&plane, tw as u32, th as u32, image::imageops::FilterType::Triangle);
        for (x, y, p) in resized.enumerate_pixels() {
            out[[y as usize, x as usize, ch]] = p.0[0].clamp(0.0, 1.0);
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Training

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub input_size: (usize, usize),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            batch_size: 32,
            epochs: 60,
            seed: 0,
            input_size: (224, 224),
        }
    }
}

impl TrainConfig {
    /// 64×64 inputs for CPU-scale runs (8×8 field on the toy backbone).
    pub fn desk() -> Self {
        Self {
            input_size: (64, 64),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::validation("learning rate must be positive"));
        }
        if self.epochs == 0 {
            return Err(Error::validation("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::validation("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// One row of the training log. Epoch 0 is the loss before any update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub saturation_count: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn initial_loss(&self) -> f64 {
        self.epochs.first().map_or(f64::NAN, |e| e.loss)
    }

    pub fn final_loss(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |e| e.loss)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = io::csv_writer(path)?;
        for e in &self.epochs {
            w.serialize(e)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// A trained backbone and the configuration it was trained with.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub backbone: Backbone,
    pub config: TrainConfig,
}

static RESIZE_WARNING: Once = Once::new();

pub(crate) fn prepared(samples: &[ImageSample], size: (usize, usize)) -> Vec<Array3<f32>> {
    samples
        .iter()
        .map(|s| {
            if (s.height(), s.width()) != size {
                RESIZE_WARNING.call_once(|| {
                    log::warn!(
                        "resizing {}x{} inputs to {}x{}",
                        s.height(),
                        s.width(),
                        size.0,
                        size.1
                    )
                });
            }
            resize_bilinear(&s.pixels, size)
        })
        .collect()
}

/// Loss and gradient with respect to the raw outputs of one batch.
fn batch_objective(backbone: &Backbone, raw: &[f32], out: Shape, labels: &[Label]) -> Result<(LossValue, Vec<f32>)> {
    let geometry = backbone.geometry();
    let raws = split_maps(raw, out);
    let maps: Vec<FieldMap> = raws
        .iter()
        .map(|r| FieldMap {
            values: pseudo_huber_map(r),
            geometry,
        })
        .collect();
    let (loss, grads) = fcdd_loss_grad(&maps, labels)?;
    let mut g = Vec::with_capacity(raw.len());
    for (raw_map, grad) in raws.iter().zip(&grads) {
        g.extend(
            raw_map
                .iter()
                .zip(grad.iter())
                .map(|(x, dh)| (dh * pseudo_huber_grad(*x)) as f32),
        );
    }
    Ok((loss, g))
}

fn full_loss(backbone: &Backbone, images: &[Array3<f32>], labels: &[Label], batch: usize) -> Result<LossValue> {
    let mut total = 0.0;
    let mut saturated = 0;
    for (chunk, lab) in images.chunks(batch).zip(labels.chunks(batch)) {
        let refs: Vec<&Array3<f32>> = chunk.iter().collect();
        let maps = backbone.field_maps(&refs);
        let l = fcdd_loss(&maps, lab)?;
        total += l.value * chunk.len() as f64;
        saturated += l.saturated;
    }
    Ok(LossValue {
        value: total / images.len() as f64,
        saturated,
    })
}

/// Minimizes the FCDD loss with Adam on the given training samples.
///
/// Batch order is a function of the seed alone, so runs are reproducible.
pub fn train_detector(samples: &[ImageSample], mut backbone: Backbone, config: &TrainConfig) -> Result<(Detector, TrainLog)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    if !samples.iter().any(|s| s.label == Label::Normal) {
        return Err(Error::validation("training set needs at least one normal sample"));
    }
    if backbone.input_size != config.input_size {
        return Err(Error::validation(format!(
            "backbone input {:?} differs from config input {:?}",
            backbone.input_size, config.input_size
        )));
    }
    let images = prepared(samples, config.input_size);
    let labels: Vec<Label> = samples.iter().map(|s| s.label).collect();

    let mut log = Vec::with_capacity(config.epochs + 1);
    let initial = full_loss(&backbone, &images, &labels, config.batch_size)?;
    log.push(EpochLog {
        epoch: 0,
        loss: initial.value,
        saturation_count: initial.saturated,
    });

    let mut adam = Adam::new(config.optimizer, backbone.net.params().len());
    let mut grads = vec![0.0f32; backbone.net.params().len()];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut seeded(derive_seed(config.seed, epoch as u64)));
        let mut total = 0.0;
        let mut saturated = 0;
        for (bi, batch) in order.chunks(config.batch_size).enumerate() {
            let refs: Vec<&Array3<f32>> = batch.iter().map(|&i| &images[i]).collect();
            let batch_labels: Vec<Label> = batch.iter().map(|&i| labels[i]).collect();
            let (x, shape) = backbone.pack(&refs);
            let (raw, trace) = backbone.net.forward_trace(&x, shape);
            let out = backbone.net.output_shape(shape);
            let (loss, graw) = batch_objective(&backbone, &raw, out, &batch_labels)?;
            if !loss.value.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: bi,
                    loss: loss.value,
                    sample_ids: batch.iter().map(|&i| samples[i].id.clone()).collect(),
                });
            }
            total += loss.value * batch.len() as f64;
            saturated += loss.saturated;
            grads.iter_mut().for_each(|g| *g = 0.0);
            backbone.net.backward_params(&trace, &graw, &mut grads);
            adam.step(backbone.net.params_mut(), &grads);
        }
        log.push(EpochLog {
            epoch,
            loss: total / samples.len() as f64,
            saturation_count: saturated,
        });
    }
    Ok((
        Detector {
            backbone,
            config: *config,
        },
        TrainLog { epochs: log },
    ))
}

/// One scored sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub score: f64,
    pub label: u8,
}

impl Detector {
    /// Pseudo-Huber maps for arbitrary samples (resized when needed).
    pub fn field_maps(&self, samples: &[ImageSample]) -> Vec<FieldMap> {
        let images = prepared(samples, self.backbone.input_size);
        images
            .chunks(self.config.batch_size.max(1))
            .flat_map(|chunk| {
                let refs: Vec<&Array3<f32>> = chunk.iter().collect();
                self.backbone.field_maps(&refs)
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights: Vec<u8> = self.backbone.net.params().iter().flat_map(|p| p.to_le_bytes()).collect();
        let wpath = dir.join("weights.bin");
        std::fs::write(&wpath, weights).map_err(|e| Error::io(&wpath, e))?;
        let cfg = CheckpointConfig {
            backbone: self.backbone.name.clone(),
            input_size: self.backbone.input_size,
            field_size: self.backbone.field_size(),
            input_channels: self.backbone.input_channels,
            norm: self.backbone.norm,
            seed: self.config.seed,
            layers: self.backbone.net.specs().to_vec(),
            train: self.config,
        };
        io::write_json(&dir.join("config.json"), &cfg)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join("config.json");
        if !cfg_path.is_file() {
            return Err(Error::config(format!("no checkpoint at {}", dir.display())));
        }
        let cfg: CheckpointConfig = io::read_json(&cfg_path)?;
        let wpath = dir.join("weights.bin");
        let bytes = std::fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::config("weights.bin length is not a multiple of 4"));
        }
        let params: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let net = ConvStack::from_parts(cfg.layers, params)
            .ok_or_else(|| Error::config("weights do not match the layer specification"))?;
        let backbone = Backbone {
            name: cfg.backbone,
            input_size: cfg.input_size,
            input_channels: cfg.input_channels,
            norm: cfg.norm,
            net,
        };
        if backbone.field_size() != cfg.field_size {
            return Err(Error::config("checkpoint field size disagrees with its layers"));
        }
        Ok(Self {
            backbone,
            config: cfg.train,
        })
    }
}

/// `config.json` inside a checkpoint directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub backbone: String,
    pub input_size: (usize, usize),
    pub field_size: (usize, usize),
    pub input_channels: usize,
    pub norm: InputNorm,
    pub seed: u64,
    pub layers: Vec<ConvSpec>,
    pub train: TrainConfig,
}

/// Scores every sample in input order.
pub fn score_dataset(detector: &Detector, samples: &[ImageSample]) -> Vec<ScoreRow> {
    detector
        .field_maps(samples)
        .iter()
        .zip(samples)
        .map(|(map, s)| ScoreRow {
            id: s.id.clone(),
            score: anomaly_score(map),
            label: s.label.bit(),
        })
        .collect()
}
