//! Feature-imbalance analysis: t-SNE to two dimensions, then DBSCAN.
//!
//! The t-SNE implementation is the exact `O(n²)` variant, adequate for the
//! few thousand points an embedding run produces.

use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::mnpair::EmbeddingPoint;
use crate::plot::{self, Canvas};
use crate::rng::seeded;

pub const DEFAULT_EPS: f64 = 3.0;
pub const DEFAULT_MIN_NEIGHBORS: usize = 10;
pub const DEFAULT_PERPLEXITY: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub id: String,
    pub x: f64,
    pub y: f64,
    pub label: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub early_exaggeration: f64,
    /// Iterations run with exaggerated affinities and low momentum.
    pub exaggeration_iters: usize,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: DEFAULT_PERPLEXITY,
            iterations: 1000,
            learning_rate: 200.0,
            early_exaggeration: 12.0,
            exaggeration_iters: 250,
        }
    }
}

/// Conditional affinities `p_{j|i}` for one row at precision `beta`; returns
/// the row and its Shannon entropy (nats).
fn affinity_row(d2: &[f64], i: usize, beta: f64) -> (Vec<f64>, f64) {
    let mut p: Vec<f64> = d2
        .iter()
        .enumerate()
        .map(|(j, &d)| if j == i { 0.0 } else { (-d * beta).exp() })
        .collect();
    let sum: f64 = p.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let mut h = 0.0;
    for (j, v) in p.iter_mut().enumerate() {
        *v /= sum;
        if j != i && *v > 0.0 {
            h -= *v * v.ln();
        }
    }
    (p, h)
}

/// Symmetric joint affinities from a bisection on each row's precision.
fn joint_affinities(x: &[Vec<f64>], perplexity: f64) -> Vec<f64> {
    let n = x.len();
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let d2: Vec<f64> = x
            .iter()
            .map(|xj| xj.iter().zip(&x[i]).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let (mut beta, mut lo, mut hi) = (1.0, 0.0, f64::INFINITY);
        let mut row = Vec::new();
        for _ in 0..100 {
            let (r, h) = affinity_row(&d2, i, beta);
            row = r;
            if (h - target).abs() < 1e-5 {
                break;
            }
            if h > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
        p[i * n..(i + 1) * n].copy_from_slice(&row);
    }
    let mut joint = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((p[i * n + j] + p[j * n + i]) / (2.0 * n as f64)).max(1e-12);
        }
    }
    joint
}

/// Embeds the unit-norm vectors `f` in two dimensions.
pub fn reduce_2d(embeddings: &[EmbeddingPoint], perplexity: f64, seed: u64) -> Result<Vec<Point2D>> {
    reduce_2d_with(
        embeddings,
        &TsneConfig {
            perplexity,
            ..TsneConfig::default()
        },
        seed,
    )
}

pub fn reduce_2d_with(embeddings: &[EmbeddingPoint], config: &TsneConfig, seed: u64) -> Result<Vec<Point2D>> {
    if !(config.perplexity > 0.0) {
        return Err(Error::validation("perplexity must be positive"));
    }
    let n = embeddings.len();
    if (n as f64) < 3.0 * config.perplexity {
        return Err(Error::validation(format!(
            "t-SNE with perplexity {} needs at least {} points, got {n}",
            config.perplexity,
            (3.0 * config.perplexity).ceil()
        )));
    }
    let x: Vec<Vec<f64>> = embeddings.iter().map(|e| e.f.clone()).collect();
    let p = joint_affinities(&x, config.perplexity);

    let mut rng = seeded(seed);
    let init = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut update = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0; 2]; n];
    let mut num = vec![0.0; n * n];
    let mut grad = vec![[0.0; 2]; n];
    for it in 0..config.iterations {
        let early = it < config.exaggeration_iters;
        let exag = if early { config.early_exaggeration } else { 1.0 };
        let momentum = if early { 0.5 } else { 0.8 };
        let mut z = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let q = 1.0 / (1.0 + dx * dx + dy * dy);
                num[i * n + j] = q;
                num[j * n + i] = q;
                z += 2.0 * q;
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in 0..n {
                if i == j {
                    continue;
                }
                let q = num[i * n + j];
                let m = (exag * p[i * n + j] - q / z) * q;
                g[0] += m * (y[i][0] - y[j][0]);
                g[1] += m * (y[i][1] - y[j][1]);
            }
            grad[i] = [4.0 * g[0], 4.0 * g[1]];
        }
        for i in 0..n {
            for d in 0..2 {
                let same_sign = (grad[i][d] > 0.0) == (update[i][d] > 0.0);
                gains[i][d] = if same_sign { (gains[i][d] * 0.8f64).max(0.01) } else { gains[i][d] + 0.2 };
                update[i][d] = momentum * update[i][d] - config.learning_rate * gains[i][d] * grad[i][d];
                y[i][d] += update[i][d];
            }
        }
        let mean = y.iter().fold([0.0; 2], |a, v| [a[0] + v[0], a[1] + v[1]]);
        for v in &mut y {
            v[0] -= mean[0] / n as f64;
            v[1] -= mean[1] / n as f64;
        }
    }
    if y.iter().any(|v| !v[0].is_finite() || !v[1].is_finite()) {
        return Err(Error::validation("t-SNE produced non-finite coordinates"));
    }
    Ok(embeddings
        .iter()
        .zip(y)
        .map(|(e, v)| Point2D {
            id: e.id.clone(),
            x: v[0],
            y: v[1],
            label: e.label,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointRole {
    Core,
    Border,
    Noise,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub id: String,
    /// `None` for noise points.
    pub cluster: Option<usize>,
    pub role: PointRole,
}

/// DBSCAN over 2D points.
///
/// 1. A point with at least `min_neighbors` points within `eps` (itself
///    included) is core; a non-core point within `eps` of a core point is
///    border; the rest is noise.
/// 2. Noise points are dropped.
/// 3. Core points within `eps` of each other are connected.
/// 4. Each connected component of core points is a cluster; ids follow the
///    lowest point index in the component.
/// 5. A border point joins the lowest cluster id among its core neighbors.
pub fn dbscan(points: &[Point2D], eps: f64, min_neighbors: usize) -> Result<Vec<ClusterAssignment>> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::validation(format!("eps must be positive, got {eps}")));
    }
    if min_neighbors == 0 {
        return Err(Error::validation("min_neighbors must be at least 1"));
    }
    let n = points.len();
    let eps2 = eps * eps;
    let near = |i: usize, j: usize| {
        let (dx, dy) = (points[i].x - points[j].x, points[i].y - points[j].y);
        dx * dx + dy * dy <= eps2
    };
    let neighbors: Vec<Vec<usize>> = (0..n).map(|i| (0..n).filter(|&j| near(i, j)).collect()).collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_neighbors).collect();

    let mut cluster: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || cluster[start].is_some() {
            continue;
        }
        cluster[start] = Some(next);
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            for &j in &neighbors[i] {
                if core[j] && cluster[j].is_none() {
                    cluster[j] = Some(next);
                    stack.push(j);
                }
            }
        }
        next += 1;
    }
    Ok((0..n)
        .map(|i| {
            let (c, role) = if core[i] {
                (cluster[i], PointRole::Core)
            } else {
                match neighbors[i].iter().filter(|&&j| core[j]).filter_map(|&j| cluster[j]).min() {
                    Some(c) => (Some(c), PointRole::Border),
                    None => (None, PointRole::Noise),
                }
            };
            ClusterAssignment {
                id: points[i].id.clone(),
                cluster: c,
                role,
            }
        })
        .collect())
}

/// Number of distinct non-noise cluster ids.
pub fn count_clusters(assignments: &[ClusterAssignment]) -> usize {
    let ids: std::collections::BTreeSet<usize> = assignments.iter().filter_map(|a| a.cluster).collect();
    ids.len()
}

#[derive(Serialize)]
struct ScatterRow<'a> {
    id: &'a str,
    x: f64,
    y: f64,
    label: u32,
    /// `-1` marks noise.
    cluster: i64,
    role: PointRole,
}

/// CSV columns: `id, x, y, label, cluster, role`.
pub fn write_scatter_csv(points: &[Point2D], assignments: &[ClusterAssignment], path: &Path) -> Result<()> {
    if points.len() != assignments.len() {
        return Err(Error::validation("points and assignments differ in length"));
    }
    let mut wr = io::csv_writer(path)?;
    for (p, a) in points.iter().zip(assignments) {
        wr.serialize(ScatterRow {
            id: &p.id,
            x: p.x,
            y: p.y,
            label: p.label,
            cluster: a.cluster.map_or(-1, |c| c as i64),
            role: a.role,
        })?;
    }
    wr.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Two scatter plots: colored by label and colored by cluster (noise grey).
pub fn write_scatter_pngs(
    points: &[Point2D],
    assignments: &[ClusterAssignment],
    by_label: &Path,
    by_cluster: &Path,
) -> Result<()> {
    let xr = plot::padded_range(points.iter().map(|p| p.x));
    let yr = plot::padded_range(points.iter().map(|p| p.y));
    let mut a = Canvas::new(480, 480, xr, yr);
    let mut b = Canvas::new(480, 480, xr, yr);
    for (p, c) in points.iter().zip(assignments) {
        a.dot(p.x, p.y, 2, plot::categorical(p.label as usize));
        let color = c.cluster.map_or(plot::GREY, plot::categorical);
        b.dot(p.x, p.y, 2, color);
    }
    a.save(by_label)?;
    b.save(by_cluster)
}
