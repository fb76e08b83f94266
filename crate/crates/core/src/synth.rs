//! Deterministic synthetic imbalanced-vision datasets.
//!
//! Normal images are smooth low-contrast texture with pixel noise and one
//! benign spot in a primary hue (red, green or blue). Anomalous images carry
//! one defect at a recorded location. The bright-blob defect is a spot lifting
//! two channels at once (yellow, cyan or magenta), so it differs from the
//! benign spots in hue rather than in shape.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use ndarray::Array3;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{save_png, BoundingBox, ImageSample, Label, SplitRatios};
use crate::error::{Error, Result};
use crate::io;
use crate::rng::{derive_seed, seeded, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnomalyKind {
    /// Two-channel (secondary hue) disk in place of the benign spot.
    BrightBlob,
    /// Dark straight band across part of the image.
    StripeDefect,
    /// `k` classes: class 0 normal, classes `1..k` each with its own defect.
    MultiClass(u32),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub image_size: (usize, usize),
    pub n_per_class: usize,
    pub noise_level: f64,
    pub anomaly_kind: AnomalyKind,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            n_per_class: 256,
            noise_level: 0.05,
            anomaly_kind: AnomalyKind::BrightBlob,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Smallest per-class count whose split leaves exactly `n_train`
    /// training images per class.
    pub fn per_class_for_train(n_train: usize, ratios: SplitRatios) -> usize {
        let mut n = n_train;
        while ratios.sizes(n).0 < n_train {
            n += 1;
        }
        n
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_per_class < 4 {
            return Err(Error::validation("n_per_class must be at least 4"));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return Err(Error::validation("noise_level must be finite and non-negative"));
        }
        let (h, w) = self.image_size;
        if h < 32 || w < 32 {
            return Err(Error::validation("synthetic images must be at least 32x32"));
        }
        if let AnomalyKind::MultiClass(k) = self.anomaly_kind {
            if k < 2 {
                return Err(Error::validation("multi-class needs k >= 2"));
            }
        }
        Ok(())
    }

    fn n_classes(&self) -> u32 {
        match self.anomaly_kind {
            AnomalyKind::MultiClass(k) => k,
            _ => 2,
        }
    }
}

const PRIMARIES: [[f32; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
const SECONDARIES: [[f32; 3]; 3] = [[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [1.0, 0.0, 1.0]];

const BASE_LEVEL: f64 = 0.35;
const TEXTURE_AMPLITUDE: f64 = 0.015;
const SPOT_AMPLITUDE: f32 = 0.3;
const RING_AMPLITUDE: f32 = 0.4;
const STRIPE_DEPTH: f32 = 0.3;
/// Maximum offset of a spot or defect center from the image center, as a
/// fraction of the side length.
const JITTER: f64 = 0.1;
#[derive(Clone, Copy, Debug)]
enum Defect {
    Blob,
    Stripe,
    DarkSpot,
    Ring,
    Cross,
}

impl Defect {
    fn for_class(kind: AnomalyKind, class: u32) -> Self {
        match kind {
            AnomalyKind::BrightBlob => Defect::Blob,
            AnomalyKind::StripeDefect => Defect::Stripe,
            AnomalyKind::MultiClass(_) => {
                [Defect::Blob, Defect::Stripe, Defect::DarkSpot, Defect::Ring, Defect::Cross][(class as usize - 1) % 5]
            }
        }
    }
}

fn texture(rng: &mut Rng, (h, w): (usize, usize), noise: f64) -> Array3<f32> {
    let base: [f64; 3] = std::array::from_fn(|_| BASE_LEVEL + rng.random_range(-0.03..0.03));
    // a few random plane waves per channel
    let waves: Vec<[f64; 5]> = (0..9)
        .map(|_| {
            let angle = rng.random_range(0.0..PI);
            let freq = rng.random_range(0.03..0.12) * 2.0 * PI;
            [
                freq * angle.cos(),
                freq * angle.sin(),
                rng.random_range(0.0..2.0 * PI),
                TEXTURE_AMPLITUDE * rng.random_range(0.5..1.0),
                0.0,
            ]
        })
        .collect();
    let normal = Normal::new(0.0, noise.max(1e-12)).expect("valid std");
    let mut px = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut v = base[c];
                for wv in &waves[c * 3..c * 3 + 3] {
                    v += wv[3] * (wv[0] * x as f64 + wv[1] * y as f64 + wv[2]).sin();
                }
                if noise > 0.0 {
                    v += normal.sample(rng);
                }
                px[[y, x, c]] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    px
}

fn bbox(cx: f64, cy: f64, r: f64, (h, w): (usize, usize)) -> BoundingBox {
    BoundingBox {
        x0: (cx - r).floor().max(0.0) as usize,
        y0: (cy - r).floor().max(0.0) as usize,
        x1: ((cx + r).ceil() as usize + 1).min(w),
        y1: ((cy + r).ceil() as usize + 1).min(h),
    }
}

fn add_disk(px: &mut Array3<f32>, cx: f64, cy: f64, r: f64, color: [f32; 3], amp: f32, ring: bool) {
    let (h, w, _) = px.dim();
    for y in 0..h {
        for x in 0..w {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            let mut weight = (r + 0.5 - d).clamp(0.0, 1.0) as f32;
            if ring {
                weight *= (d - 0.5 * r + 0.5).clamp(0.0, 1.0) as f32;
            }
            if weight > 0.0 {
                for (c, col) in color.iter().enumerate() {
                    px[[y, x, c]] = (px[[y, x, c]] + amp * col * weight).clamp(0.0, 1.0);
                }
            }
        }
    }
}

fn jittered_center(rng: &mut Rng, (h, w): (usize, usize)) -> (f64, f64) {
    let (hf, wf) = (h as f64, w as f64);
    let cx = wf / 2.0 + rng.random_range(-JITTER..JITTER) * wf;
    let cy = hf / 2.0 + rng.random_range(-JITTER..JITTER) * hf;
    (cx, cy)
}

fn scale((h, w): (usize, usize)) -> f64 {
    h.min(w) as f64 / 64.0
}

fn add_benign_spot(px: &mut Array3<f32>, rng: &mut Rng) {
    let (h, w, _) = px.dim();
    let (cx, cy) = jittered_center(rng, (h, w));
    let r = rng.random_range(7.0..10.0) * scale((h, w));
    let color = PRIMARIES[rng.random_range(0..PRIMARIES.len())];
    add_disk(px, cx, cy, r, color, SPOT_AMPLITUDE, false);
}

fn apply_defect(px: &mut Array3<f32>, defect: Defect, rng: &mut Rng) -> BoundingBox {
    let (h, w, _) = px.dim();
    let size = (h, w);
    let (cx, cy) = jittered_center(rng, size);
    let scale = scale(size);
    match defect {
        Defect::Blob => {
            let r = rng.random_range(7.0..10.0) * scale;
            let color = SECONDARIES[rng.random_range(0..SECONDARIES.len())];
            add_disk(px, cx, cy, r, color, SPOT_AMPLITUDE, false);
            bbox(cx, cy, r, size)
        }
        Defect::DarkSpot => {
            let r = rng.random_range(7.0..10.0) * scale;
            add_disk(px, cx, cy, r, [1.0; 3], -STRIPE_DEPTH, false);
            bbox(cx, cy, r, size)
        }
        Defect::Ring => {
            let r = rng.random_range(8.0..11.0) * scale;
            add_disk(px, cx, cy, r, [1.0; 3], RING_AMPLITUDE, true);
            bbox(cx, cy, r, size)
        }
        Defect::Stripe | Defect::Cross => {
            let half_len = rng.random_range(14.0..20.0) * scale;
            let half_width = 1.5 * scale;
            let angle = rng.random_range(0.0..PI);
            let (dx, dy) = (angle.cos(), angle.sin());
            let arms: &[(f64, f64)] = if matches!(defect, Defect::Cross) {
                &[(dx, dy), (-dy, dx)]
            } else {
                &[(dx, dy)]
            };
            for y in 0..h {
                for x in 0..w {
                    let (rx, ry) = (x as f64 - cx, y as f64 - cy);
                    let hit = arms.iter().any(|(ax, ay)| {
                        let along = rx * ax + ry * ay;
                        let across = (-rx * ay + ry * ax).abs();
                        along.abs() <= half_len && across <= half_width
                    });
                    if hit {
                        for c in 0..3 {
                            px[[y, x, c]] = (px[[y, x, c]] - STRIPE_DEPTH).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            let ext = half_len.max(half_width);
            bbox(cx, cy, ext, size)
        }
    }
}

/// Generates `n_per_class` images per class, normal class first.
///
/// Ids follow the on-disk layout (`normal/000000.png`, `anomalous/…`).
pub fn generate(spec: &SynthSpec) -> Result<Vec<ImageSample>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.n_per_class * spec.n_classes() as usize);
    for class in 0..spec.n_classes() {
        for i in 0..spec.n_per_class {
            let mut rng = seeded(derive_seed(spec.seed, ((class as u64) << 32) | i as u64));
            let mut px = texture(&mut rng, spec.image_size, spec.noise_level);
            let defect_kind = (class > 0).then(|| Defect::for_class(spec.anomaly_kind, class));
            if !matches!(defect_kind, Some(Defect::Blob)) {
                add_benign_spot(&mut px, &mut rng);
            }
            let (label, id, defect) = if class == 0 {
                (Label::Normal, format!("normal/{i:06}.png"), None)
            } else {
                let d = apply_defect(&mut px, defect_kind.expect("anomalous class"), &mut rng);
                let id = match spec.anomaly_kind {
                    AnomalyKind::MultiClass(_) => format!("anomalous/c{class}_{i:06}.png"),
                    _ => format!("anomalous/{i:06}.png"),
                };
                (Label::Anomalous, id, Some(d))
            };
            let mut s = ImageSample::new(id, px, label)?.with_class(class);
            s.defect = defect;
            out.push(s);
        }
    }
    Ok(out)
}

/// `ground_truth.json` entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class_id: u32,
    pub bbox: BoundingBox,
}

/// Writes `root/{normal,anomalous}/*.png`, a `manifest.csv` carrying class
/// ids, and `ground_truth.json`.
pub fn write_folder(samples: &[ImageSample], root: &Path) -> Result<()> {
    let mut truth = BTreeMap::new();
    let manifest = root.join("manifest.csv");
    let mut wr = io::csv_writer(&manifest)?;
    wr.write_record(["path", "label", "class_id"])?;
    for s in samples {
        save_png(&s.pixels, &root.join(&s.id))?;
        wr.write_record([s.id.as_str(), &s.label.bit().to_string(), &s.class_id.to_string()])?;
        if let Some(b) = s.defect {
            truth.insert(
                s.id.clone(),
                GroundTruth {
                    class_id: s.class_id,
                    bbox: b,
                },
            );
        }
    }
    wr.flush().map_err(|e| Error::io(&manifest, e))?;
    io::write_json(&root.join("ground_truth.json"), &truth)
}
