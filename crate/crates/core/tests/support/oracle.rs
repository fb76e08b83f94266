//! Reference implementations written directly from the defining formulas,
//! with no shared code or numerical tricks from the library.

#![allow(dead_code)]

use std::collections::BTreeMap;

/// `sqrt(x² + 1) − 1`, evaluated literally.
pub fn huber(x: f64) -> f64 {
    (x * x + 1.0).sqrt() - 1.0
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Cross-entropy one-class loss with `ℓ = exp(−mean H)`.
pub fn svdd_loss(maps: &[Vec<f64>], anomalous: &[bool]) -> f64 {
    let mut total = 0.0;
    for (m, &a) in maps.iter().zip(anomalous) {
        let ell = (-mean(m)).exp();
        let y = if a { 1.0 } else { 0.0 };
        total += (1.0 - y) * ell.ln() + y * (1.0 - ell).ln();
    }
    -total / maps.len() as f64
}

/// `(1/n) Σ [(1−a) m − a log(1 − exp(−m))]`.
pub fn fcdd_loss(maps: &[Vec<f64>], anomalous: &[bool]) -> f64 {
    let mut total = 0.0;
    for (m, &a) in maps.iter().zip(anomalous) {
        let mk = mean(m);
        total += if a { -(1.0 - (-mk).exp()).ln() } else { mk };
    }
    total / maps.len() as f64
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// `−log(e^{s⁺/τ} / (e^{s⁺/τ} + Σ e^{s⁻/τ}))`.
pub fn npair_loss(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> f64 {
    let p = (cosine(anchor, positive) / tau).exp();
    let n: f64 = negatives.iter().map(|v| (cosine(anchor, v) / tau).exp()).sum();
    -(p / (p + n)).ln()
}

/// `−log(π Σ e^{s⁺/τ} / (π Σ e^{s⁺/τ} + (1−π) Σ e^{s⁻/τ}))`.
pub fn mnpair_loss(anchor: &[f64], positives: &[Vec<f64>], negatives: &[Vec<f64>], pi: f64, tau: f64) -> f64 {
    let p: f64 = positives.iter().map(|v| (cosine(anchor, v) / tau).exp()).sum();
    let n: f64 = negatives.iter().map(|v| (cosine(anchor, v) / tau).exp()).sum();
    -(pi * p / (pi * p + (1.0 - pi) * n)).ln()
}

/// Fraction of (anomalous, normal) pairs ranked correctly, ties one half.
pub fn auc_pairs(scores: &[f64], anomalous: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if anomalous[i] && !anomalous[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    Core,
    Border,
    Noise,
}

fn find(parent: &mut [usize], i: usize) -> usize {
    let mut r = i;
    while parent[r] != r {
        r = parent[r];
    }
    parent[i] = r;
    r
}

/// DBSCAN by union-find over every core pair. Cluster labels are the
/// smallest point index in each core component; a border point takes the
/// smallest label among the components of its core neighbors.
pub fn dbscan(points: &[(f64, f64)], eps: f64, min_neighbors: usize) -> Vec<(Option<usize>, Role)> {
    let n = points.len();
    let dist = |i: usize, j: usize| ((points[i].0 - points[j].0).powi(2) + (points[i].1 - points[j].1).powi(2)).sqrt();
    let core: Vec<bool> = (0..n)
        .map(|i| (0..n).filter(|&j| dist(i, j) <= eps).count() >= min_neighbors)
        .collect();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && dist(i, j) <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut label_of_root: BTreeMap<usize, usize> = BTreeMap::new();
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            let e = label_of_root.entry(r).or_insert(i);
            *e = (*e).min(i);
        }
    }
    let mut label = vec![None; n];
    for i in 0..n {
        if core[i] {
            let r = find(&mut parent, i);
            label[i] = Some(label_of_root[&r]);
        }
    }
    (0..n)
        .map(|i| {
            if core[i] {
                (label[i], Role::Core)
            } else {
                let best = (0..n).filter(|&j| core[j] && dist(i, j) <= eps).filter_map(|j| label[j]).min();
                match best {
                    Some(l) => (Some(l), Role::Border),
                    None => (None, Role::Noise),
                }
            }
        })
        .collect()
}

/// Heatmap at integer pixels as the sum over cells of value times a
/// normalized 2-D Gaussian at the cell center (`rows = y`).
pub fn upsample(values: &[Vec<f64>], centers: impl Fn(usize, usize) -> (f64, f64), sigma: f64, out: (usize, usize)) -> Vec<Vec<f64>> {
    let mut img = vec![vec![0.0; out.1]; out.0];
    for (r, row) in values.iter().enumerate() {
        for (c, &d) in row.iter().enumerate() {
            let (cx, cy) = centers(r, c);
            for (y, line) in img.iter_mut().enumerate() {
                for (x, px) in line.iter_mut().enumerate() {
                    let q = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)) / (2.0 * sigma * sigma);
                    *px += d * (-q).exp() / (2.0 * std::f64::consts::PI * sigma * sigma);
                }
            }
        }
    }
    img
}

/// `(min, max / 4)` via sorting.
pub fn display_range(values: &[f64]) -> (f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (v[0], v[v.len() - 1] / 4.0)
}

/// Central differences of `f` at `x` with the given step.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
