//! Contrastive embeddings trained with the MN-pair loss.
//!
//! Every anchor is paired with `M − 1` positives from its own class and
//! `N − 1` negatives from other classes. Cosine similarities between
//! ℓ2-normalized embeddings are divided by the temperature `τ`; positives are
//! weighted by `π` and negatives by `1 − π`.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array3;
use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::fcdd::{pack_batch, prepared, InputNorm};
use crate::io;
use crate::nn::{Activation, Adam, AdamConfig, ConvSpec, ConvStack, Linear, Shape};
use crate::rng::{derive_seed, seeded};

// ---------------------------------------------------------------------------
// Similarities and losses

fn norm(e: &[f64]) -> f64 {
    e.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `e / ‖e‖₂`.
pub fn normalize(e: &[f64]) -> Result<Vec<f64>> {
    let n = norm(e);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::validation("cannot normalize a zero or non-finite vector"));
    }
    Ok(e.iter().map(|x| x / n).collect())
}

/// Cosine similarity of the normalized vectors.
pub fn cosine_similarity(e1: &[f64], e2: &[f64]) -> Result<f64> {
    if e1.len() != e2.len() {
        return Err(Error::validation(format!(
            "vector lengths differ: {} vs {}",
            e1.len(),
            e2.len()
        )));
    }
    let (f1, f2) = (normalize(e1)?, normalize(e2)?);
    Ok(f1.iter().zip(&f2).map(|(a, b)| a * b).sum::<f64>().clamp(-1.0, 1.0))
}

fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn check_weights(pi: f64, tau: f64) -> Result<()> {
    if !(pi > 0.0 && pi < 1.0) {
        return Err(Error::validation(format!("pi must lie in (0, 1), got {pi}")));
    }
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::validation(format!("tau must be positive, got {tau}")));
    }
    Ok(())
}

/// MN-pair loss from precomputed similarities:
/// `−log(π Σ e^{s⁺/τ} / (π Σ e^{s⁺/τ} + (1−π) Σ e^{s⁻/τ}))`.
pub fn mnpair_loss_from_similarities(pos: &[f64], neg: &[f64], pi: f64, tau: f64) -> Result<f64> {
    Ok(mnpair_terms(pos, neg, pi, tau)?.0)
}

/// Loss plus `∂L/∂s` for every positive and negative similarity.
fn mnpair_terms(pos: &[f64], neg: &[f64], pi: f64, tau: f64) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    check_weights(pi, tau)?;
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::validation("need at least one positive and one negative"));
    }
    let (lp, ln) = (pi.ln(), (1.0 - pi).ln());
    let zp = pos.iter().map(|s| lp + s / tau);
    let zn = neg.iter().map(|s| ln + s / tau);
    let lse_all = log_sum_exp(zp.clone().chain(zn.clone()));
    let lse_pos = log_sum_exp(zp.clone());
    let loss = lse_all - lse_pos;
    let gpos = zp.map(|z| ((z - lse_all).exp() - (z - lse_pos).exp()) / tau).collect();
    let gneg = zn.map(|z| (z - lse_all).exp() / tau).collect();
    Ok((loss, gpos, gneg))
}

/// N-pair loss `−log(e^{s⁺/τ} / (e^{s⁺/τ} + Σ_k e^{s_k⁻/τ}))`.
pub fn npair_loss(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    let sp = cosine_similarity(anchor, positive)?;
    let sn = negatives
        .iter()
        .map(|n| cosine_similarity(anchor, n))
        .collect::<Result<Vec<_>>>()?;
    // equal weights cancel, so this is the MN-pair form with π = 1/2
    mnpair_loss_from_similarities(&[sp], &sn, 0.5, tau)
}

pub fn mnpair_loss(anchor: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>], pi: f64, tau: f64) -> Result<f64> {
    Ok(mnpair_loss_grad(anchor, positives, negatives, pi, tau)?.loss)
}

/// Gradients of the loss with respect to the raw (unnormalized) vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct PairGrad {
    pub loss: f64,
    pub anchor: Vec<f64>,
    pub positives: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<f64>>,
}

/// `ds/de1` for `s = F1·F2` is `(F2 − s F1) / ‖e1‖`.
fn cos_grad(f_self: &[f64], f_other: &[f64], s: f64, norm_self: f64) -> Vec<f64> {
    f_self
        .iter()
        .zip(f_other)
        .map(|(a, b)| (b - s * a) / norm_self)
        .collect()
}

pub fn mnpair_loss_grad(
    anchor: &[f64],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    pi: f64,
    tau: f64,
) -> Result<PairGrad> {
    let fa = normalize(anchor)?;
    let na = norm(anchor);
    let prep = |vs: &[Vec<f64>]| -> Result<Vec<(Vec<f64>, f64, f64)>> {
        vs.iter()
            .map(|v| {
                if v.len() != anchor.len() {
                    return Err(Error::validation("vector lengths differ"));
                }
                let f = normalize(v)?;
                let s = fa.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>();
                Ok((f, s, norm(v)))
            })
            .collect()
    };
    let p = prep(positives)?;
    let n = prep(negatives)?;
    let sp: Vec<f64> = p.iter().map(|x| x.1).collect();
    let sn: Vec<f64> = n.iter().map(|x| x.1).collect();
    let (loss, gp, gn) = mnpair_terms(&sp, &sn, pi, tau)?;
    let mut ga = vec![0.0; anchor.len()];
    let mut other = |items: &[(Vec<f64>, f64, f64)], g: &[f64]| -> Vec<Vec<f64>> {
        items
            .iter()
            .zip(g)
            .map(|((f, s, nv), dl)| {
                for (acc, d) in ga.iter_mut().zip(cos_grad(&fa, f, *s, na)) {
                    *acc += dl * d;
                }
                cos_grad(f, &fa, *s, *nv).into_iter().map(|d| dl * d).collect()
            })
            .collect()
    };
    let positives = other(&p, &gp);
    let negatives = other(&n, &gn);
    Ok(PairGrad {
        loss,
        anchor: ga,
        positives,
        negatives,
    })
}

// ---------------------------------------------------------------------------
// Batches

/// Indices into the sample list: one anchor, `M − 1` positives, `N − 1` negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MnBatch {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// One batch per sample of the eligible classes, anchors taken round-robin
/// over classes so small classes are revisited as often as large ones.
///
/// A class with fewer than `m` samples provides no anchors (it can still
/// supply negatives).
pub fn build_mn_batches(labels: &[u32], m: usize, n: usize, seed: u64) -> Result<Vec<MnBatch>> {
    if m < 2 || n < 2 {
        return Err(Error::validation("M and N must both be at least 2"));
    }
    let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(Error::validation("contrastive batches need at least two classes"));
    }
    let mut rng = seeded(seed);
    let mut eligible: Vec<(u32, Vec<usize>)> = Vec::new();
    for (class, members) in &by_class {
        if members.len() < m {
            log::warn!(
                "class {class} has {} samples, fewer than M={m}; it yields no anchors",
                members.len()
            );
            continue;
        }
        let mut order = members.clone();
        order.shuffle(&mut rng);
        eligible.push((*class, order));
    }
    if eligible.is_empty() {
        return Err(Error::validation(format!("no class has at least M={m} samples")));
    }
    let total: usize = eligible.iter().map(|(_, v)| v.len()).sum();
    let mut batches = Vec::with_capacity(total);
    for k in 0..total {
        let (class, order) = &eligible[k % eligible.len()];
        let anchor = order[(k / eligible.len()) % order.len()];
        let pool: Vec<usize> = by_class[class].iter().copied().filter(|&i| i != anchor).collect();
        let positives: Vec<usize> = pool.choose_multiple(&mut rng, m - 1).copied().collect();
        let others: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != *class).collect();
        let negatives: Vec<usize> = if others.len() >= n - 1 {
            others.choose_multiple(&mut rng, n - 1).copied().collect()
        } else {
            (0..n - 1).map(|_| *others.choose(&mut rng).expect("two classes")).collect()
        };
        batches.push(MnBatch {
            anchor,
            positives,
            negatives,
        });
    }
    Ok(batches)
}

// ---------------------------------------------------------------------------
// Encoder

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub pi: f64,
    pub m: usize,
    pub n: usize,
    /// Embedding dimension `L`.
    pub dim: usize,
    pub epochs: usize,
    /// Anchors per optimizer step.
    pub anchors_per_step: usize,
    pub input_size: (usize, usize),
    pub optimizer: AdamConfig,
    pub seed: u64,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.3,
            pi: 0.15,
            m: 4,
            n: 8,
            dim: 128,
            epochs: 20,
            anchors_per_step: 8,
            input_size: (64, 64),
            optimizer: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            seed: 0,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        check_weights(self.pi, self.tau)?;
        if self.m < 2 || self.n < 2 {
            return Err(Error::validation("M and N must both be at least 2"));
        }
        if self.dim == 0 || self.anchors_per_step == 0 {
            return Err(Error::validation("dim and anchors_per_step must be positive"));
        }
        let (h, w) = self.input_size;
        if h < 8 || w < 8 {
            return Err(Error::validation("encoder input must be at least 8x8"));
        }
        Ok(())
    }
}

/// Convolution blocks, global average pooling and a linear head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub input_size: (usize, usize),
    pub input_channels: usize,
    pub conv: ConvStack,
    pub head: Linear,
}

/// Channel widths of the encoder's stride-2 blocks.
pub const ENCODER_WIDTHS: [usize; 3] = [16, 32, 64];

struct EncoderPass {
    trace: crate::nn::Trace,
    conv_shape: Shape,
    pooled: Vec<f32>,
    out: Vec<f32>,
}

impl Encoder {
    pub fn new(input_size: (usize, usize), input_channels: usize, dim: usize, seed: u64) -> Self {
        let mut rng = seeded(seed);
        let mut specs = Vec::new();
        let mut c = input_channels;
        for &w in &ENCODER_WIDTHS {
            specs.push(ConvSpec {
                in_ch: c,
                out_ch: w,
                kernel: 4,
                stride: 2,
                pad: 1,
                activation: Activation::LeakyRelu,
                bias: true,
            });
            c = w;
        }
        let conv = ConvStack::new(specs, &mut rng);
        let head = Linear::new(c, dim, &mut rng);
        Self {
            input_size,
            input_channels,
            conv,
            head,
        }
    }

    pub fn dim(&self) -> usize {
        self.head.outputs
    }

    fn pass(&self, images: &[&Array3<f32>]) -> EncoderPass {
        let (x, shape) = pack_batch(images, self.input_channels, self.input_size, InputNorm::Center);
        let (y, trace) = self.conv.forward_trace(&x, shape);
        let s = self.conv.output_shape(shape);
        let pooled = global_pool(&y, s);
        let out = self.head.forward(&pooled, s.b);
        EncoderPass {
            trace,
            conv_shape: s,
            pooled,
            out,
        }
    }

    /// Raw embeddings `e`, one row of length `dim` per image.
    pub fn embed_images(&self, images: &[&Array3<f32>]) -> Vec<Vec<f64>> {
        let mut rows = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let (x, shape) = pack_batch(chunk, self.input_channels, self.input_size, InputNorm::Center);
            let (y, s) = self.conv.forward(&x, shape);
            let out = self.head.forward(&global_pool(&y, s), s.b);
            rows.extend(out.chunks_exact(self.dim()).map(|r| r.iter().map(|&v| v as f64).collect()));
        }
        rows
    }

    /// Embedding points for samples; images are resized when needed.
    pub fn embed(&self, samples: &[ImageSample]) -> Result<Vec<EmbeddingPoint>> {
        let images = prepared(samples, self.input_size);
        let refs: Vec<&Array3<f32>> = images.iter().collect();
        self.embed_images(&refs)
            .into_iter()
            .zip(samples)
            .map(|(e, s)| EmbeddingPoint::new(s.id.clone(), e, s.class_id))
            .collect()
    }
}

/// `[C][B][H][W]` to row-major `[B][C]` means.
fn global_pool(y: &[f32], s: Shape) -> Vec<f32> {
    let hw = s.h * s.w;
    let mut pooled = vec![0.0f32; s.b * s.c];
    for c in 0..s.c {
        for b in 0..s.b {
            let base = (c * s.b + b) * hw;
            pooled[b * s.c + c] = y[base..base + hw].iter().sum::<f32>() / hw as f32;
        }
    }
    pooled
}

fn global_pool_backward(dpooled: &[f32], s: Shape) -> Vec<f32> {
    let hw = s.h * s.w;
    let mut dy = vec![0.0f32; s.len()];
    for c in 0..s.c {
        for b in 0..s.b {
            let g = dpooled[b * s.c + c] / hw as f32;
            let base = (c * s.b + b) * hw;
            dy[base..base + hw].iter_mut().for_each(|v| *v = g);
        }
    }
    dy
}

/// One embedded sample; `f` is the unit-norm version of `e`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingPoint {
    pub id: String,
    pub e: Vec<f64>,
    pub f: Vec<f64>,
    pub label: u32,
}

impl EmbeddingPoint {
    pub fn new(id: String, e: Vec<f64>, label: u32) -> Result<Self> {
        let f = normalize(&e).map_err(|_| Error::validation(format!("{id}: zero embedding")))?;
        Ok(Self { id, e, f, label })
    }
}

/// Mean cosine similarity within classes and across classes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMargin {
    pub intra: f64,
    pub inter: f64,
}

impl SimilarityMargin {
    pub fn margin(&self) -> f64 {
        self.intra - self.inter
    }
}

/// Averages over all unordered pairs of distinct points.
pub fn similarity_margin(points: &[EmbeddingPoint]) -> Result<SimilarityMargin> {
    let (mut intra, mut ni, mut inter, mut nx) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let s: f64 = points[i].f.iter().zip(&points[j].f).map(|(a, b)| a * b).sum();
            if points[i].label == points[j].label {
                intra += s;
                ni += 1;
            } else {
                inter += s;
                nx += 1;
            }
        }
    }
    if ni == 0 || nx == 0 {
        return Err(Error::validation("margin needs same-class and cross-class pairs"));
    }
    Ok(SimilarityMargin {
        intra: intra / ni as f64,
        inter: inter / nx as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveEpoch {
    pub epoch: usize,
    pub loss: f64,
}

/// Result of [`train_embedder`].
#[derive(Clone, Debug)]
pub struct EmbedderRun {
    pub encoder: Encoder,
    /// One point per training sample, in input order.
    pub points: Vec<EmbeddingPoint>,
    /// Epoch 0 is the loss before any update.
    pub log: Vec<ContrastiveEpoch>,
}

/// Mean MN-pair loss and its gradient over a group of batches.
///
/// Returns the loss and the gradient for every raw embedding row in `emb`.
fn group_objective(
    batches: &[&MnBatch],
    slot: &BTreeMap<usize, usize>,
    emb: &[Vec<f64>],
    config: &ContrastiveConfig,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut grads = vec![vec![0.0; config.dim]; emb.len()];
    let mut total = 0.0;
    let scale = 1.0 / batches.len() as f64;
    for b in batches {
        let rows = |ids: &[usize]| ids.iter().map(|i| emb[slot[i]].clone()).collect::<Vec<_>>();
        let g = mnpair_loss_grad(
            &emb[slot[&b.anchor]],
            &rows(&b.positives),
            &rows(&b.negatives),
            config.pi,
            config.tau,
        )?;
        total += g.loss * scale;
        let mut add = |idx: usize, d: &[f64]| {
            grads[slot[&idx]].iter_mut().zip(d).for_each(|(a, v)| *a += v * scale);
        };
        add(b.anchor, &g.anchor);
        for (i, d) in b.positives.iter().zip(&g.positives) {
            add(*i, d);
        }
        for (i, d) in b.negatives.iter().zip(&g.negatives) {
            add(*i, d);
        }
    }
    Ok((total, grads))
}

fn unique_members(group: &[&MnBatch]) -> (Vec<usize>, BTreeMap<usize, usize>) {
    let mut slot = BTreeMap::new();
    let mut members = Vec::new();
    for b in group {
        for &i in std::iter::once(&b.anchor).chain(&b.positives).chain(&b.negatives) {
            slot.entry(i).or_insert_with(|| {
                members.push(i);
                members.len() - 1
            });
        }
    }
    (members, slot)
}

/// Trains an encoder with Adam on MN-pair batches and embeds every sample.
pub fn train_embedder(samples: &[ImageSample], config: &ContrastiveConfig) -> Result<EmbedderRun> {
    config.validate()?;
    let labels: Vec<u32> = samples.iter().map(|s| s.class_id).collect();
    let images = prepared(samples, config.input_size);
    let channels = samples.first().map(|s| s.channels()).unwrap_or(3);
    let mut encoder = Encoder::new(config.input_size, channels, config.dim, derive_seed(config.seed, u64::MAX));

    let epoch_batches = |epoch: usize| build_mn_batches(&labels, config.m, config.n, derive_seed(config.seed, epoch as u64));
    let evaluate = |enc: &Encoder, batches: &[MnBatch]| -> Result<f64> {
        let mut total = 0.0;
        for group in batches.chunks(config.anchors_per_step) {
            let group: Vec<&MnBatch> = group.iter().collect();
            let (members, slot) = unique_members(&group);
            let refs: Vec<&Array3<f32>> = members.iter().map(|&i| &images[i]).collect();
            let emb = enc.embed_images(&refs);
            total += group_objective(&group, &slot, &emb, config)?.0 * group.len() as f64;
        }
        Ok(total / batches.len() as f64)
    };

    let first = epoch_batches(1)?;
    let mut log = vec![ContrastiveEpoch {
        epoch: 0,
        loss: evaluate(&encoder, &first)?,
    }];
    let mut adam_conv = Adam::new(config.optimizer, encoder.conv.params().len());
    let mut adam_head = Adam::new(config.optimizer, encoder.head.param_len());
    for epoch in 1..=config.epochs {
        let batches = if epoch == 1 { first.clone() } else { epoch_batches(epoch)? };
        let mut total = 0.0;
        for (step, group) in batches.chunks(config.anchors_per_step).enumerate() {
            let group: Vec<&MnBatch> = group.iter().collect();
            let (members, slot) = unique_members(&group);
            let refs: Vec<&Array3<f32>> = members.iter().map(|&i| &images[i]).collect();
            let pass = encoder.pass(&refs);
            let emb: Vec<Vec<f64>> = pass
                .out
                .chunks_exact(config.dim)
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect();
            let (loss, g) = group_objective(&group, &slot, &emb, config)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: step,
                    loss,
                    sample_ids: members.iter().map(|&i| samples[i].id.clone()).collect(),
                });
            }
            total += loss * group.len() as f64;
            let dy: Vec<f32> = g.iter().flatten().map(|&v| v as f32).collect();
            let mut head_grads = vec![0.0f32; encoder.head.param_len()];
            let dpooled = encoder.head.backward(&pass.pooled, &dy, members.len(), &mut head_grads);
            let dconv = global_pool_backward(&dpooled, pass.conv_shape);
            let mut conv_grads = vec![0.0f32; encoder.conv.params().len()];
            encoder.conv.backward_params(&pass.trace, &dconv, &mut conv_grads);
            adam_conv.step(encoder.conv.params_mut(), &conv_grads);
            let mut head_params: Vec<f32> = encoder.head.weight.iter().chain(&encoder.head.bias).copied().collect();
            adam_head.step(&mut head_params, &head_grads);
            let nw = encoder.head.weight.len();
            encoder.head.weight.copy_from_slice(&head_params[..nw]);
            encoder.head.bias.copy_from_slice(&head_params[nw..]);
        }
        log.push(ContrastiveEpoch {
            epoch,
            loss: total / batches.len() as f64,
        });
    }
    let points = encoder.embed(samples)?;
    Ok(EmbedderRun { encoder, points, log })
}

// ---------------------------------------------------------------------------
// Persistence

/// `embeddings.json` metadata next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMeta {
    pub dim: usize,
    pub tau: f64,
    pub pi: f64,
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub count: usize,
}

impl EmbeddingMeta {
    pub fn new(config: &ContrastiveConfig, count: usize) -> Self {
        Self {
            dim: config.dim,
            tau: config.tau,
            pi: config.pi,
            m: config.m,
            n: config.n,
            seed: config.seed,
            count,
        }
    }
}

/// CSV columns: `id, label, held_out, e_1 … e_L`.
pub fn write_embeddings_csv(points: &[EmbeddingPoint], held_out: &[bool], path: &Path) -> Result<()> {
    if points.len() != held_out.len() {
        return Err(Error::validation("held_out flags must match points"));
    }
    let dim = points.first().map(|p| p.e.len()).unwrap_or(0);
    let mut wr = io::csv_writer(path)?;
    let mut header = vec!["id".to_string(), "label".into(), "held_out".into()];
    header.extend((1..=dim).map(|i| format!("e_{i}")));
    wr.write_record(&header)?;
    for (p, h) in points.iter().zip(held_out) {
        let mut rec = vec![p.id.clone(), p.label.to_string(), u8::from(*h).to_string()];
        rec.extend(p.e.iter().map(|v| v.to_string()));
        wr.write_record(&rec)?;
    }
    wr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a CSV written by [`write_embeddings_csv`].
pub fn read_embeddings_csv(path: &Path) -> Result<(Vec<EmbeddingPoint>, Vec<bool>)> {
    let mut rd = csv::Reader::from_path(path)?;
    let mut points = Vec::new();
    let mut held = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).ok_or_else(|| Error::validation(format!("{}: short row", path.display())));
        let parse_err = |what: &str| Error::validation(format!("{}: bad {what}", path.display()));
        let label: u32 = field(1)?.parse().map_err(|_| parse_err("label"))?;
        let h = field(2)? == "1";
        let e = (3..rec.len())
            .map(|i| field(i)?.parse::<f64>().map_err(|_| parse_err("embedding value")))
            .collect::<Result<Vec<_>>>()?;
        points.push(EmbeddingPoint::new(field(0)?.to_string(), e, label)?);
        held.push(h);
    }
    Ok((points, held))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cosine_basics() {
        let e = [1.0, 2.0, -0.5];
        assert_abs_diff_eq!(cosine_similarity(&e, &e).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 3.0]).unwrap(), 0.0);
        let neg: Vec<f64> = e.iter().map(|x| -x).collect();
        assert_abs_diff_eq!(cosine_similarity(&e, &neg).unwrap(), -1.0, epsilon = 1e-12);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn uniform_similarities() {
        let l = mnpair_loss_from_similarities(&[0.2], &[0.2; 4], 0.5, 0.3).unwrap();
        assert_abs_diff_eq!(l, 5f64.ln(), epsilon = 1e-12);
        let l = mnpair_loss_from_similarities(&[0.4; 2], &[0.4; 4], 0.15, 0.3).unwrap();
        assert_abs_diff_eq!(l, -(0.3f64 / 3.7).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(l, 2.5123, epsilon = 1e-4);
    }

    #[test]
    fn large_gap_vanishes() {
        // scaled gap of 20/τ between the positive and every negative
        let l = mnpair_loss_from_similarities(&[20.0], &[0.0; 4], 0.5, 0.3).unwrap();
        assert!(l < 1e-6, "{l}");
        let a = vec![1.0, 0.0];
        let negs = vec![vec![-1.0, 0.0]; 3];
        let l = npair_loss(&a, &[1.0, 0.0], &negs, 0.3 / 20.0).unwrap();
        assert!(l < 1e-6, "{l}");
    }

    #[test]
    fn monotone_in_positive_similarity() {
        let base = mnpair_loss_from_similarities(&[0.1, 0.3], &[0.2, 0.0, -0.1], 0.15, 0.3).unwrap();
        let up = mnpair_loss_from_similarities(&[0.2, 0.3], &[0.2, 0.0, -0.1], 0.15, 0.3).unwrap();
        assert!(up < base);
    }

    #[test]
    fn rejects_bad_weights() {
        assert!(mnpair_loss_from_similarities(&[0.0], &[0.0], 1.0, 0.3).is_err());
        assert!(mnpair_loss_from_similarities(&[0.0], &[0.0], 0.5, 0.0).is_err());
    }

    #[test]
    fn batches_have_correct_membership() {
        let labels: Vec<u32> = (0..20).map(|i| (i % 2) as u32).collect();
        let batches = build_mn_batches(&labels, 3, 5, 7).unwrap();
        assert_eq!(batches.len(), 20);
        for b in &batches {
            let c = labels[b.anchor];
            assert_eq!(b.positives.len(), 2);
            assert_eq!(b.negatives.len(), 4);
            assert!(b.positives.iter().all(|&p| labels[p] == c && p != b.anchor));
            assert!(b.negatives.iter().all(|&n| labels[n] != c));
        }
        // anchors alternate between the two classes
        assert!(batches.windows(2).all(|w| labels[w[0].anchor] != labels[w[1].anchor]));
        assert_eq!(batches, build_mn_batches(&labels, 3, 5, 7).unwrap());
    }

    #[test]
    fn small_class_yields_no_anchors() {
        let mut labels = vec![0u32; 10];
        labels.extend([1, 1]);
        labels.extend(vec![2u32; 6]);
        let batches = build_mn_batches(&labels, 3, 4, 1).unwrap();
        assert!(batches.iter().all(|b| labels[b.anchor] != 1));
        assert!(batches.iter().any(|b| b.negatives.iter().any(|&n| labels[n] == 1)));
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pts = vec![
            EmbeddingPoint::new("a".into(), vec![1.0, 2.0, 3.0], 0).unwrap(),
            EmbeddingPoint::new("b".into(), vec![-1.0, 0.5, 0.25], 2).unwrap(),
        ];
        let p = dir.path().join("emb.csv");
        write_embeddings_csv(&pts, &[false, true], &p).unwrap();
        let (back, held) = read_embeddings_csv(&p).unwrap();
        assert_eq!(back, pts);
        assert_eq!(held, vec![false, true]);
        let header = std::fs::read_to_string(&p).unwrap();
        assert_eq!(header.lines().next().unwrap().split(',').count(), 3 + 3);
    }

    #[test]
    fn pool_backward_matches_forward() {
        let s = Shape { c: 2, b: 3, h: 2, w: 2 };
        let y: Vec<f32> = (0..s.len()).map(|i| i as f32).collect();
        let p = global_pool(&y, s);
        assert_eq!(p[0], 1.5);
        let d = global_pool_backward(&[4.0; 6], s);
        assert!(d.iter().all(|&v| v == 1.0));
    }
}
