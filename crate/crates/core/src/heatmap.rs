//! Full-resolution heatmaps from receptive-field maps.
//!
//! Every field cell spreads its value over the image as a 2D Gaussian
//! centered on the cell's receptive-field center. The sum of these kernels is
//! the heatmap; it is displayed clipped to `[min, max/4]`.

use std::path::Path;

use image::{Rgb, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, Label};
use crate::error::{Error, Result};
use crate::fcdd::{FieldGeometry, FieldMap};
use crate::io;
use crate::plot::{self, Canvas};

/// Upper bound of the display window, as a fraction of the maximum.
pub const DISPLAY_QUANTILE: f64 = 0.25;
/// Width forced on a degenerate display window.
pub const DISPLAY_EPS: f64 = 1e-9;
pub const DEFAULT_BINS: usize = 50;
/// Weight of the color layer in [`overlay_pixels`].
pub const OVERLAY_ALPHA: f32 = 0.5;

/// Gaussian width in pixels; kernel centers come from the field geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    pub sigma: f64,
}

impl GaussianParams {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::validation(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    /// Half the inter-center spacing of the geometry.
    pub fn for_geometry(geometry: &FieldGeometry) -> Self {
        Self {
            sigma: geometry.stride / 2.0,
        }
    }
}

/// `G(x, y) = exp(−((x−m1)² + (y−m2)²) / 2σ²) / (2πσ²)` sampled at integer
/// pixel positions; row index is `y`, column index is `x`.
pub fn gaussian2d(m1: f64, m2: f64, sigma: f64, grid: (usize, usize)) -> Result<Array2<f64>> {
    GaussianParams::new(sigma)?;
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let s2 = 2.0 * sigma * sigma;
    Ok(Array2::from_shape_fn(grid, |(y, x)| {
        let (dx, dy) = (x as f64 - m1, y as f64 - m2);
        norm * (-(dx * dx + dy * dy) / s2).exp()
    }))
}

/// Clipping window for display.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisplayRange {
    pub lo: f64,
    pub hi: f64,
    /// `max/4` did not exceed `min`; `hi` was forced to `lo + ε`.
    pub degenerate: bool,
}

impl DisplayRange {
    /// Position of `v` inside the window, clipped to `[0, 1]`.
    pub fn normalize(&self, v: f64) -> f64 {
        ((v - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

/// `(min, max/4)`, or `(min, min + ε)` flagged degenerate when that is empty.
pub fn display_range(values: &[f64]) -> Result<DisplayRange> {
    if values.is_empty() {
        return Err(Error::validation("display range of an empty set"));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("display range needs finite values"));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) * DISPLAY_QUANTILE;
    if hi > lo {
        Ok(DisplayRange {
            lo,
            hi,
            degenerate: false,
        })
    } else {
        Ok(DisplayRange {
            lo,
            hi: lo + DISPLAY_EPS,
            degenerate: true,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `(h, w)` non-negative values, row index is `y`.
    pub values: Array2<f64>,
    pub display_range: DisplayRange,
    pub sigma: f64,
    /// Size and geometry of the field the heatmap came from.
    pub field_size: (usize, usize),
    pub geometry: FieldGeometry,
}

impl Heatmap {
    pub fn size(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// `(row, col)` of the largest value; first one in row-major order on ties.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = ((0, 0), f64::NEG_INFINITY);
        for (idx, &v) in self.values.indexed_iter() {
            if v > best.1 {
                best = (idx, v);
            }
        }
        best.0
    }

    /// Writes `<stem>.bin` (row-major f64 little-endian) and `<stem>.json`.
    pub fn save_raw(&self, stem: &Path) -> Result<()> {
        let (h, w) = self.size();
        io::write_f64_le(&stem.with_extension("bin"), self.values.iter().copied())?;
        let header = RawHeader {
            shape: [h, w],
            dtype: "f64-le".into(),
            display_range: self.display_range,
            sigma: self.sigma,
            field_size: self.field_size,
        };
        io::write_json(&stem.with_extension("json"), &header)
    }

    pub fn load_raw(stem: &Path) -> Result<(Array2<f64>, RawHeader)> {
        let header: RawHeader = io::read_json(&stem.with_extension("json"))?;
        let values = io::read_f64_le(&stem.with_extension("bin"))?;
        let [h, w] = header.shape;
        let values = Array2::from_shape_vec((h, w), values)
            .map_err(|_| Error::validation(format!("{}: shape does not match data", stem.display())))?;
        Ok((values, header))
    }
}

/// JSON header next to a raw heatmap dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    pub shape: [usize; 2],
    pub dtype: String,
    pub display_range: DisplayRange,
    pub sigma: f64,
    pub field_size: (usize, usize),
}

/// Gaussian profile along one axis for every cell center, `(cells, pixels)`.
fn axis_kernel(centers: &[f64], pixels: usize, sigma: f64) -> Array2<f64> {
    let s2 = 2.0 * sigma * sigma;
    Array2::from_shape_fn((centers.len(), pixels), |(i, p)| {
        let d = p as f64 - centers[i];
        (-d * d / s2).exp()
    })
}

/// Accumulates `Σ_d d · G(center(d), σ)` over all field cells.
///
/// Geometry is rescaled when `out_size` differs from the geometry's input
/// size. Centers falling outside the image are clamped to the border.
pub fn upsample_field(field: &FieldMap, sigma: f64, out_size: (usize, usize)) -> Result<Heatmap> {
    GaussianParams::new(sigma)?;
    let (oh, ow) = out_size;
    if oh == 0 || ow == 0 {
        return Err(Error::validation("heatmap output size must be non-zero"));
    }
    let (u, v) = field.size();
    let g = field.geometry;
    let (sy, sx) = (
        oh as f64 / g.input_size.0 as f64,
        ow as f64 / g.input_size.1 as f64,
    );
    let mut clamped = false;
    let mut clamp = |c: f64, n: usize| {
        let hi = (n - 1) as f64;
        if c < 0.0 || c > hi {
            clamped = true;
        }
        c.clamp(0.0, hi)
    };
    // pixel i spans [i, i + 1) in both resolutions
    let ys: Vec<f64> = (0..u).map(|r| clamp((g.center(r, 0).1 + 0.5) * sy - 0.5, oh)).collect();
    let xs: Vec<f64> = (0..v).map(|c| clamp((g.center(0, c).0 + 0.5) * sx - 0.5, ow)).collect();
    if clamped {
        log::warn!("receptive-field centers outside the {oh}x{ow} image were clamped to the border");
    }
    // the kernel factorizes per axis, so the accumulation is Aᵀ · D · B
    let a = axis_kernel(&ys, oh, sigma);
    let b = axis_kernel(&xs, ow, sigma);
    let norm = 1.0 / (2.0 * std::f64::consts::PI * sigma * sigma);
    let values = a.t().dot(&field.values).dot(&b) * norm;
    let flat: Vec<f64> = values.iter().copied().collect();
    Ok(Heatmap {
        display_range: display_range(&flat)?,
        values,
        sigma,
        field_size: (u, v),
        geometry: g,
    })
}

/// Blue → cyan → green → yellow → red.
pub fn colormap(t: f64) -> [f32; 3] {
    let t = t.clamp(0.0, 1.0) as f32;
    let seg = |a: f32| (4.0 * (t - a)).clamp(0.0, 1.0);
    let r = seg(0.5);
    let g = if t < 0.75 { seg(0.0) } else { 1.0 - seg(0.75) };
    let b = 1.0 - seg(0.25);
    [r, g, b]
}

fn resize_plane(values: &Array2<f64>, (th, tw): (usize, usize)) -> Array2<f64> {
    let (h, w) = values.dim();
    let plane = image::ImageBuffer::<image::Luma<f32>, Vec<f32>>::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([values[[y as usize, x as usize]] as f32])
    });
    let resized = image::imageops::resize(&plane, tw as u32, th as u32, image::imageops::FilterType::Triangle);
    Array2::from_shape_fn((th, tw), |(y, x)| resized.get_pixel(x as u32, y as u32).0[0] as f64)
}

/// Colorized heatmap alpha-blended over the input image, `(h, w, 3)` in `[0, 1]`.
pub fn overlay_pixels(image: &ImageSample, heatmap: &Heatmap) -> Array3<f32> {
    let (h, w) = (image.height(), image.width());
    let values = if heatmap.size() != (h, w) {
        log::warn!(
            "{}: heatmap {:?} resized to image {h}x{w}",
            image.id,
            heatmap.size()
        );
        resize_plane(&heatmap.values, (h, w))
    } else {
        heatmap.values.clone()
    };
    let gray = image.channels() == 1;
    Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let base = image.pixels[[y, x, if gray { 0 } else { c }]];
        let color = colormap(heatmap.display_range.normalize(values[[y, x]]))[c];
        (1.0 - OVERLAY_ALPHA) * base + OVERLAY_ALPHA * color
    })
}

/// Writes the overlay as a PNG.
pub fn render_overlay(image: &ImageSample, heatmap: &Heatmap, path: &Path) -> Result<()> {
    let px = overlay_pixels(image, heatmap);
    let (h, w, _) = px.dim();
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|c| {
            (px[[y as usize, x as usize, c]] * 255.0).round().clamp(0.0, 255.0) as u8
        }))
    });
    io::ensure_parent(path)?;
    img.save(path)?;
    Ok(())
}

/// Per-class counts over shared bin edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` ascending edges.
    pub edges: Vec<f64>,
    pub normal: Vec<usize>,
    pub anomalous: Vec<usize>,
    pub single_class: bool,
}

#[derive(Serialize)]
struct HistogramRow {
    bin_lo: f64,
    bin_hi: f64,
    count_normal: usize,
    count_anomalous: usize,
}

impl Histogram {
    pub fn bins(&self) -> usize {
        self.normal.len()
    }

    pub fn total(&self) -> usize {
        self.normal.iter().sum::<usize>() + self.anomalous.iter().sum::<usize>()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wr = io::csv_writer(path)?;
        for i in 0..self.bins() {
            wr.serialize(HistogramRow {
                bin_lo: self.edges[i],
                bin_hi: self.edges[i + 1],
                count_normal: self.normal[i],
                count_anomalous: self.anomalous[i],
            })?;
        }
        wr.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Overlaid bars: normal in blue, anomalous in red.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let lo = self.edges[0];
        let hi = *self.edges.last().expect("edges");
        let top = self.normal.iter().chain(&self.anomalous).copied().max().unwrap_or(1).max(1);
        let mut c = Canvas::new(480, 320, (lo, hi), (0.0, top as f64 * 1.05));
        for (counts, color) in [(&self.normal, plot::BLUE), (&self.anomalous, plot::RED)] {
            for i in 0..self.bins() {
                if counts[i] > 0 {
                    let (a, b) = (self.edges[i], self.edges[i + 1]);
                    let inset = (b - a) * 0.15;
                    c.rect((a + inset, 0.0), (b - inset, counts[i] as f64), color);
                }
            }
        }
        c.save(path)
    }
}

/// Histogram of scores per class with `bins` equal-width bins over the pooled range.
pub fn score_histogram(scores: &[f64], labels: &[Label], bins: usize) -> Result<Histogram> {
    if scores.len() != labels.len() {
        return Err(Error::validation("scores and labels differ in length"));
    }
    if scores.is_empty() {
        return Err(Error::validation("histogram of an empty score set"));
    }
    if bins == 0 {
        return Err(Error::validation("bins must be at least 1"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::validation("histogram needs finite scores"));
    }
    let n_anom = labels.iter().filter(|l| l.is_anomalous()).count();
    let single_class = n_anom == 0 || n_anom == labels.len();
    if single_class {
        log::warn!("only one class present; histogram has a single series");
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut normal = vec![0; bins];
    let mut anomalous = vec![0; bins];
    for (&s, l) in scores.iter().zip(labels) {
        let i = (((s - lo) / width) as usize).min(bins - 1);
        if l.is_anomalous() {
            anomalous[i] += 1;
        } else {
            normal[i] += 1;
        }
    }
    Ok(Histogram {
        edges,
        normal,
        anomalous,
        single_class,
    })
}
