//! Minimal raster charts written as PNG.
//!
//! Charts carry no text. Every chart is accompanied by a CSV holding the
//! plotted numbers, so the images only need to show shape.

use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::Result;
use crate::io;

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const BLACK: [u8; 3] = [0, 0, 0];
pub const GREY: [u8; 3] = [190, 190, 190];
pub const BLUE: [u8; 3] = [40, 90, 200];
pub const RED: [u8; 3] = [210, 50, 40];

/// Qualitative colors for categorical series (labels, cluster ids).
pub const CATEGORICAL: [[u8; 3]; 10] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
    [188, 189, 34],
    [23, 190, 207],
];

pub fn categorical(i: usize) -> [u8; 3] {
    CATEGORICAL[i % CATEGORICAL.len()]
}

/// A white canvas with a data window mapped onto a plotting area.
pub struct Canvas {
    img: RgbImage,
    margin: u32,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Canvas {
    pub fn new(width: u32, height: u32, x_range: (f64, f64), y_range: (f64, f64)) -> Self {
        let widen = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let mut c = Self {
            img: RgbImage::from_pixel(width, height, Rgb(WHITE)),
            margin: 24,
            x_range: widen(x_range),
            y_range: widen(y_range),
        };
        c.axes();
        c
    }

    fn axes(&mut self) {
        let (w, h) = self.img.dimensions();
        let m = self.margin as i64;
        self.segment((m, h as i64 - m), (w as i64 - m, h as i64 - m), BLACK);
        self.segment((m, m), (m, h as i64 - m), BLACK);
    }

    /// Data coordinates to pixel coordinates.
    pub fn to_px(&self, x: f64, y: f64) -> (i64, i64) {
        let (w, h) = self.img.dimensions();
        let m = self.margin as f64;
        let (x0, x1) = self.x_range;
        let (y0, y1) = self.y_range;
        let px = m + (x - x0) / (x1 - x0) * (w as f64 - 2.0 * m);
        let py = h as f64 - m - (y - y0) / (y1 - y0) * (h as f64 - 2.0 * m);
        (px.round() as i64, py.round() as i64)
    }

    fn put(&mut self, x: i64, y: i64, color: [u8; 3]) {
        let (w, h) = self.img.dimensions();
        if x >= 0 && y >= 0 && (x as u32) < w && (y as u32) < h {
            self.img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }

    fn segment(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: [u8; 3]) {
        let steps = (x1 - x0).abs().max((y1 - y0).abs()).max(1);
        for i in 0..=steps {
            let t = i as f64 / steps as f64;
            let x = x0 as f64 + t * (x1 - x0) as f64;
            let y = y0 as f64 + t * (y1 - y0) as f64;
            self.put(x.round() as i64, y.round() as i64, color);
        }
    }

    pub fn line(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
        let (pa, pb) = (self.to_px(a.0, a.1), self.to_px(b.0, b.1));
        self.segment(pa, pb, color);
    }

    pub fn polyline(&mut self, points: &[(f64, f64)], color: [u8; 3]) {
        for w in points.windows(2) {
            self.line(w[0], w[1], color);
        }
    }

    /// Filled square marker of half-width `r` pixels.
    pub fn dot(&mut self, x: f64, y: f64, r: i64, color: [u8; 3]) {
        let (px, py) = self.to_px(x, y);
        for dy in -r..=r {
            for dx in -r..=r {
                self.put(px + dx, py + dy, color);
            }
        }
    }

    /// Filled rectangle between two data-space corners.
    pub fn rect(&mut self, a: (f64, f64), b: (f64, f64), color: [u8; 3]) {
        let (ax, ay) = self.to_px(a.0, a.1);
        let (bx, by) = self.to_px(b.0, b.1);
        for y in ay.min(by)..=ay.max(by) {
            for x in ax.min(bx)..=ax.max(bx) {
                self.put(x, y, color);
            }
        }
    }

    /// Dashed vertical line at data coordinate `x`.
    pub fn vmarker(&mut self, x: f64, color: [u8; 3]) {
        let (px, _) = self.to_px(x, 0.0);
        let h = self.img.dimensions().1 as i64;
        let m = self.margin as i64;
        for y in m..h - m {
            if (y / 4) % 2 == 0 {
                self.put(px, y, color);
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::ensure_parent(path)?;
        self.img.save(path)?;
        Ok(())
    }
}

/// Data range of a set of values, padded by 5% on both sides.
pub fn padded_range(values: impl IntoIterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .into_iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.05).max(1e-9);
    (lo - pad, hi + pad)
}
