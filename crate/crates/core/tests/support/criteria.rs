//! Acceptance checks that run on the library alone. Each returns an
//! [`Outcome`] so the same check can back a unit test or a PASS/FAIL line.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use fcdd_core::cluster::{dbscan, Point2D, PointRole};
use fcdd_core::data::{ladder_counts, split_dataset, ImageSample, Label, SplitRatios};
use fcdd_core::fcdd::{deep_svdd_loss, deep_svdd_loss_grad, fcdd_loss, fcdd_loss_grad, FieldGeometry, FieldMap};
use fcdd_core::harness::compute_auc;
use fcdd_core::heatmap::{display_range, upsample_field};
use fcdd_core::mnpair::{mnpair_loss, mnpair_loss_from_similarities, mnpair_loss_grad, npair_loss};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::oracle::{self, Role};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

/// Runs `check` and fails it when it overruns `budget`.
pub fn timed(budget: Duration, check: impl FnOnce() -> Outcome) -> Outcome {
    let start = Instant::now();
    let mut out = check();
    let took = start.elapsed();
    if took > budget {
        out.pass = false;
    }
    out.detail = format!("{} [{:.2?} of {:.0?}]", out.detail, took, budget);
    out
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn gaussian_vec(r: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)).collect()
}

fn label(a: bool) -> Label {
    if a {
        Label::Anomalous
    } else {
        Label::Normal
    }
}

// ---------------------------------------------------------------------------

pub fn ladder_exactness() -> Outcome {
    let expected = [1300, 650, 325, 163, 81, 41, 20, 10, 1];
    let expected_labels = ["1/1", "1/2", "1/4", "1/8", "1/16", "1/32", "1/64", "1/128", "one-shot"];
    match ladder_counts(1300) {
        Ok(l) => {
            let got: Vec<usize> = l.rungs.iter().map(|r| r.anomaly_count).collect();
            let labels: Vec<&str> = l.rungs.iter().map(|r| r.label.as_str()).collect();
            Outcome::new(got == expected && labels == expected_labels, format!("counts {got:?}"))
        }
        Err(e) => Outcome::new(false, e.to_string()),
    }
}

pub fn split_exactness() -> Outcome {
    let mut samples = Vec::new();
    for class in 0..2u32 {
        for i in 0..2000 {
            let l = label(class == 1);
            let s = ImageSample::new(format!("{class}/{i}"), Array3::zeros((8, 8, 1)), l).expect("sample");
            samples.push(s);
        }
    }
    let p = match split_dataset(&samples, SplitRatios::default(), 0) {
        Ok(p) => p,
        Err(e) => return Outcome::new(false, e.to_string()),
    };
    let per_class = |v: &[ImageSample], c: u32| v.iter().filter(|s| s.class_id == c).count();
    let sizes: Vec<(usize, usize, usize)> = (0..2)
        .map(|c| (per_class(&p.train, c), per_class(&p.calibration, c), per_class(&p.test, c)))
        .collect();
    Outcome::new(
        sizes.iter().all(|&s| s == (1300, 300, 400)),
        format!("per class train/cal/test {sizes:?}"),
    )
}

fn random_maps(r: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<bool>, (usize, usize)) {
    let n = r.random_range(1..=6);
    let shape = (r.random_range(1..=4), r.random_range(1..=4));
    let maps = (0..n)
        .map(|_| (0..shape.0 * shape.1).map(|_| r.random_range(0.01..3.0)).collect())
        .collect();
    let labels = (0..n).map(|_| r.random_bool(0.5)).collect();
    (maps, labels, shape)
}

fn field_maps(maps: &[Vec<f64>], shape: (usize, usize)) -> Vec<FieldMap> {
    maps.iter()
        .map(|m| FieldMap::bare(Array2::from_shape_vec(shape, m.clone()).expect("shape")))
        .collect()
}

pub fn loss_oracles() -> Outcome {
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (maps, anomalous, shape) = random_maps(&mut r);
        let fm = field_maps(&maps, shape);
        let labels: Vec<Label> = anomalous.iter().map(|&a| label(a)).collect();
        let a = deep_svdd_loss(&fm, &labels).map(|l| l.value).unwrap_or(f64::NAN);
        let b = fcdd_loss(&fm, &labels).map(|l| l.value).unwrap_or(f64::NAN);
        worst = worst
            .max((a - oracle::svdd_loss(&maps, &anomalous)).abs())
            .max((b - oracle::fcdd_loss(&maps, &anomalous)).abs());
    }
    for _ in 0..1000 {
        let dim = r.random_range(2..=8);
        let tau = r.random_range(0.1..1.0);
        let pi = r.random_range(0.05..0.95);
        let anchor = gaussian_vec(&mut r, dim);
        let pos: Vec<Vec<f64>> = (0..r.random_range(1..=5)).map(|_| gaussian_vec(&mut r, dim)).collect();
        let neg: Vec<Vec<f64>> = (0..r.random_range(1..=7)).map(|_| gaussian_vec(&mut r, dim)).collect();
        let n = npair_loss(&anchor, &pos[0], &neg, tau).unwrap_or(f64::NAN);
        let m = mnpair_loss(&anchor, &pos, &neg, pi, tau).unwrap_or(f64::NAN);
        worst = worst
            .max((n - oracle::npair_loss(&anchor, &pos[0], &neg, tau)).abs())
            .max((m - oracle::mnpair_loss(&anchor, &pos, &neg, pi, tau)).abs());
    }
    let random_ok = worst <= 1e-9;

    // closed forms
    let mut closed: f64 = 0.0;
    for h in [0.0, 0.25, 1.0, 3.7] {
        let maps: Vec<FieldMap> = (0..3).map(|_| FieldMap::bare(Array2::from_elem((4, 5), h))).collect();
        let v = fcdd_loss(&maps, &[Label::Normal; 3]).map(|l| l.value).unwrap_or(f64::NAN);
        closed = closed.max((v - h).abs());
    }
    let ln2 = std::f64::consts::LN_2;
    let half = [FieldMap::bare(Array2::from_elem((3, 3), ln2))];
    for v in [
        fcdd_loss(&half, &[Label::Anomalous]).map(|l| l.value),
        deep_svdd_loss(&half, &[Label::Anomalous]).map(|l| l.value),
    ] {
        closed = closed.max((v.unwrap_or(f64::NAN) - ln2).abs());
    }
    let v = [0.3, -1.2, 0.8];
    for big_n in 2..=9usize {
        let negs = vec![v.to_vec(); big_n - 1];
        let n = npair_loss(&v, &v, &negs, 0.3).unwrap_or(f64::NAN);
        closed = closed.max((n - (big_n as f64).ln()).abs());
        for big_m in 2..=5usize {
            let pi = 0.15;
            let poss = vec![v.to_vec(); big_m - 1];
            let m = mnpair_loss(&v, &poss, &negs, pi, 0.3).unwrap_or(f64::NAN);
            let (pm, nn) = (pi * (big_m - 1) as f64, (1.0 - pi) * (big_n - 1) as f64);
            closed = closed.max((m + (pm / (pm + nn)).ln()).abs());
        }
    }
    let closed_ok = closed <= 1e-12;
    Outcome::new(
        random_ok && closed_ok,
        format!("max random diff {worst:.2e} (tol 1e-9), max closed-form diff {closed:.2e} (tol 1e-12)"),
    )
}

pub fn gradient_checks() -> Outcome {
    const STEP: f64 = 1e-4;
    let mut r = rng(4);
    let mut worst: [f64; 4] = [0.0; 4];
    for _ in 0..100 {
        let n = r.random_range(1..=4);
        let maps: Vec<Vec<f64>> = (0..n).map(|_| (0..5).map(|_| r.random_range(0.05..3.0)).collect()).collect();
        let labels: Vec<Label> = (0..n).map(|_| label(r.random_bool(0.5))).collect();
        let flat: Vec<f64> = maps.concat();
        let as_maps = |x: &[f64]| field_maps(&x.chunks(5).map(<[f64]>::to_vec).collect::<Vec<_>>(), (1, 5));
        for (k, (loss, grad)) in [
            (
                deep_svdd_loss as fn(&[FieldMap], &[Label]) -> fcdd_core::Result<_>,
                deep_svdd_loss_grad as fn(&[FieldMap], &[Label]) -> fcdd_core::Result<_>,
            ),
            (fcdd_loss, fcdd_loss_grad),
        ]
        .into_iter()
        .enumerate()
        {
            let numeric = oracle::central_difference(
                |x| loss(&as_maps(x), &labels).map(|l| l.value).unwrap_or(f64::NAN),
                &flat,
                STEP,
            );
            let analytic: Vec<f64> = match grad(&as_maps(&flat), &labels) {
                Ok((_, g)) => g.iter().flat_map(|a| a.iter().copied()).collect(),
                Err(_) => vec![f64::NAN; flat.len()],
            };
            worst[k] = worst[k].max(oracle::relative_error(&analytic, &numeric));
        }

        let dim = r.random_range(2..=6);
        let tau = r.random_range(0.2..1.0);
        let pi = r.random_range(0.05..0.95);
        let anchor = gaussian_vec(&mut r, dim);
        let pos: Vec<Vec<f64>> = (0..r.random_range(1..=4)).map(|_| gaussian_vec(&mut r, dim)).collect();
        let neg: Vec<Vec<f64>> = (0..r.random_range(1..=5)).map(|_| gaussian_vec(&mut r, dim)).collect();
        let split = |x: &[f64], np: usize| -> (Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>) {
            let vs: Vec<Vec<f64>> = x.chunks(dim).map(<[f64]>::to_vec).collect();
            (vs[0].clone(), vs[1..1 + np].to_vec(), vs[1 + np..].to_vec())
        };
        let flatten = |g: &fcdd_core::mnpair::PairGrad| -> Vec<f64> {
            let mut v = g.anchor.clone();
            v.extend(g.positives.concat());
            v.extend(g.negatives.concat());
            v
        };

        let mut x = anchor.clone();
        x.extend(pos[0].clone());
        x.extend(neg.concat());
        let numeric = oracle::central_difference(
            |x| {
                let (a, p, n) = split(x, 1);
                npair_loss(&a, &p[0], &n, tau).unwrap_or(f64::NAN)
            },
            &x,
            STEP,
        );
        let analytic = mnpair_loss_grad(&anchor, &pos[..1], &neg, 0.5, tau)
            .map(|g| flatten(&g))
            .unwrap_or_else(|_| vec![f64::NAN; x.len()]);
        worst[2] = worst[2].max(oracle::relative_error(&analytic, &numeric));

        let mut x = anchor.clone();
        x.extend(pos.concat());
        x.extend(neg.concat());
        let numeric = oracle::central_difference(
            |x| {
                let (a, p, n) = split(x, pos.len());
                mnpair_loss(&a, &p, &n, pi, tau).unwrap_or(f64::NAN)
            },
            &x,
            STEP,
        );
        let analytic = mnpair_loss_grad(&anchor, &pos, &neg, pi, tau)
            .map(|g| flatten(&g))
            .unwrap_or_else(|_| vec![f64::NAN; x.len()]);
        worst[3] = worst[3].max(oracle::relative_error(&analytic, &numeric));
    }
    Outcome::new(
        worst.iter().all(|w| *w < 1e-4),
        format!(
            "max relative error svdd {:.1e}, fcdd {:.1e}, npair {:.1e}, mnpair {:.1e} (tol 1e-4)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

pub fn mn_to_n_reduction() -> Outcome {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dim = r.random_range(2..=16);
        let tau = r.random_range(0.05..1.0);
        let anchor = gaussian_vec(&mut r, dim);
        let pos = gaussian_vec(&mut r, dim);
        let neg: Vec<Vec<f64>> = (0..r.random_range(1..=10)).map(|_| gaussian_vec(&mut r, dim)).collect();
        let n = npair_loss(&anchor, &pos, &neg, tau).unwrap_or(f64::NAN);
        let m = mnpair_loss(&anchor, &[pos], &neg, 0.5, tau).unwrap_or(f64::NAN);
        worst = worst.max((n - m).abs());
    }
    // the similarity-level entry point too
    let a = mnpair_loss_from_similarities(&[0.4], &[0.1, -0.3], 0.5, 0.3).unwrap_or(f64::NAN);
    let e = |s: f64| (s / 0.3).exp();
    let b = -(e(0.4) / (e(0.4) + e(0.1) + e(-0.3))).ln();
    worst = worst.max((a - b).abs());
    Outcome::new(worst <= 1e-12, format!("max |MN - N| {worst:.2e} (tol 1e-12)"))
}

pub fn upsampling_properties() -> Outcome {
    let mut r = rng(6);
    let mut notes = Vec::new();
    let mut ok = true;

    // linearity and agreement with the direct sum, 8x8 field on 64x64
    let geom = FieldGeometry::stride8((64, 64));
    let sigma = 4.0;
    let mut lin: f64 = 0.0;
    let mut direct: f64 = 0.0;
    for _ in 0..5 {
        let a = Array2::from_shape_fn((8, 8), |_| r.random_range(0.0..2.0));
        let b = Array2::from_shape_fn((8, 8), |_| r.random_range(0.0..2.0));
        let (al, be) = (r.random_range(0.0..3.0), r.random_range(0.0..3.0));
        let up = |v: &Array2<f64>| upsample_field(&FieldMap::new(v.clone(), geom).expect("map"), sigma, (64, 64)).expect("upsample").values;
        let combo = up(&(&a * al + &b * be));
        let sum = up(&a) * al + up(&b) * be;
        lin = lin.max((&combo - &sum).iter().fold(0.0, |m, d| m.max(d.abs())));
        let rows: Vec<Vec<f64>> = a.outer_iter().map(|row| row.to_vec()).collect();
        let reference = oracle::upsample(&rows, |r, c| geom.center(r, c), sigma, (64, 64));
        let got = up(&a);
        for (y, line) in reference.iter().enumerate() {
            for (x, v) in line.iter().enumerate() {
                direct = direct.max((got[(y, x)] - v).abs());
            }
        }
    }
    ok &= lin <= 1e-9 && direct <= 1e-9;
    notes.push(format!("linearity {lin:.1e}, vs direct sum {direct:.1e}"));

    // mass and peak for single interior cells
    let mut mass_err: f64 = 0.0;
    let mut peak_dist: f64 = 0.0;
    for row in 2..6 {
        for col in 2..6 {
            let mut v = Array2::zeros((8, 8));
            v[(row, col)] = 1.0;
            let h = upsample_field(&FieldMap::new(v, geom).expect("map"), sigma, (64, 64)).expect("upsample");
            mass_err = mass_err.max((h.values.sum() - 1.0).abs());
            let (py, px) = h.argmax();
            let (cx, cy) = geom.center(row, col);
            peak_dist = peak_dist.max((px as f64 - cx).abs().max((py as f64 - cy).abs()));
        }
    }
    ok &= mass_err <= 0.02 && peak_dist <= geom.stride;
    notes.push(format!("mass error {:.2}%, peak offset {peak_dist:.1}px", mass_err * 100.0));

    // 28x28 field on 224x224 inputs
    let g224 = FieldGeometry::stride8((224, 224));
    let mut v = Array2::zeros((28, 28));
    v[(13, 20)] = 1.0;
    match upsample_field(&FieldMap::new(v, g224).expect("map"), 4.0, (224, 224)) {
        Ok(h) => {
            let (py, px) = h.argmax();
            let (cx, cy) = g224.center(13, 20);
            let near = (px as f64 - cx).abs() <= 8.0 && (py as f64 - cy).abs() <= 8.0;
            ok &= h.size() == (224, 224) && h.field_size == (28, 28) && near;
            notes.push(format!("28x28 -> {:?}", h.size()));
        }
        Err(e) => {
            ok = false;
            notes.push(e.to_string());
        }
    }
    Outcome::new(ok, notes.join("; "))
}

pub fn display_range_rule() -> Outcome {
    let mut r = rng(7);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n = r.random_range(1..=200);
        let scale = r.random_range(0.1..100.0);
        let values: Vec<f64> = (0..n).map(|_| r.random::<f64>() * scale).collect();
        let (lo, hi) = oracle::display_range(&values);
        let ok = match display_range(&values) {
            Ok(d) if hi > lo => d.lo == lo && d.hi == hi && !d.degenerate,
            Ok(d) => d.lo == lo && d.degenerate && d.hi > d.lo,
            Err(_) => false,
        };
        mismatches += usize::from(!ok);
    }
    Outcome::new(mismatches == 0, format!("{mismatches} of 100 sets differ from (min, max/4)"))
}

pub fn dbscan_oracle() -> Outcome {
    let mut r = rng(8);
    let mut failures = 0;
    let mut clusters_seen = 0;
    for setting in 0..20 {
        let mut pts: Vec<(f64, f64)> = Vec::with_capacity(200);
        let blobs: Vec<(f64, f64)> = (0..r.random_range(2..=5))
            .map(|_| (r.random_range(0.0..40.0), r.random_range(0.0..40.0)))
            .collect();
        while pts.len() < 200 {
            if r.random_bool(0.7) {
                let (bx, by) = blobs[r.random_range(0..blobs.len())];
                let s = r.random_range(0.5..3.0);
                pts.push((bx + s * r.sample::<f64, _>(StandardNormal), by + s * r.sample::<f64, _>(StandardNormal)));
            } else {
                pts.push((r.random_range(0.0..40.0), r.random_range(0.0..40.0)));
            }
        }
        let eps = r.random_range(0.5..4.0);
        let min_n = r.random_range(1..=15);
        let points: Vec<Point2D> = pts
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| Point2D {
                id: i.to_string(),
                x,
                y,
                label: 0,
            })
            .collect();
        let got = match dbscan(&points, eps, min_n) {
            Ok(g) => g,
            Err(_) => {
                failures += 1;
                continue;
            }
        };
        let want = oracle::dbscan(&pts, eps, min_n);
        let mut forward = std::collections::BTreeMap::new();
        let mut backward = std::collections::BTreeMap::new();
        let mut same = true;
        for (g, (wc, wr)) in got.iter().zip(&want) {
            let role = match g.role {
                PointRole::Core => Role::Core,
                PointRole::Border => Role::Border,
                PointRole::Noise => Role::Noise,
            };
            same &= role == *wr;
            match (g.cluster, wc) {
                (Some(a), Some(b)) => {
                    same &= *forward.entry(a).or_insert(*b) == *b;
                    same &= *backward.entry(*b).or_insert(a) == a;
                }
                (None, None) => {}
                _ => same = false,
            }
        }
        clusters_seen += forward.len();
        if !same {
            failures += 1;
            log::error!("dbscan mismatch in setting {setting} (eps {eps:.2}, min {min_n})");
        }
    }
    Outcome::new(
        failures == 0,
        format!("{failures} of 20 settings differ; {clusters_seen} clusters compared"),
    )
}

pub fn auc_oracle() -> Outcome {
    let mut r = rng(9);
    let mut worst: f64 = 0.0;
    let mut fixtures = 0;
    for n in 2..=50 {
        for _ in 0..20 {
            let mut anomalous: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
            anomalous[0] = true;
            anomalous[1] = false;
            // coarse integers force ties
            let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..6) as f64).collect();
            let labels: Vec<Label> = anomalous.iter().map(|&a| label(a)).collect();
            let got = compute_auc(&scores, &labels).unwrap_or(f64::NAN);
            let want = oracle::auc_pairs(&scores, &anomalous);
            worst = worst.max((got - want).abs());
            fixtures += 1;
        }
    }
    let scores: Vec<f64> = (0..10_000).map(|_| r.random::<f64>()).collect();
    let labels: Vec<Label> = (0..10_000).map(|_| label(r.random_bool(0.5))).collect();
    let random_auc = compute_auc(&scores, &labels).unwrap_or(f64::NAN);
    Outcome::new(
        worst <= 1e-12 && (random_auc - 0.5).abs() <= 0.02,
        format!("{fixtures} fixtures, max diff {worst:.1e}; random-label AUC {random_auc:.4}"),
    )
}
