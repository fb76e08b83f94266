//! Python module `fcdd`: the loss, scoring, metric and clustering
//! primitives of `fcdd-core` on plain lists.

use fcdd_core::cluster::{self, Point2D, PointRole};
use fcdd_core::data::{self, Denominator, Label};
use fcdd_core::fcdd::{self as detector, FieldMap};
use fcdd_core::{harness, heatmap, mnpair};
use ndarray::Array2;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: fcdd_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_labels(bits: &[u8]) -> PyResult<Vec<Label>> {
    bits.iter()
        .map(|&b| Label::from_bit(b).map_err(py_err))
        .collect()
}

fn field_maps(maps: Vec<Vec<Vec<f64>>>) -> PyResult<Vec<FieldMap>> {
    maps.into_iter()
        .map(|rows| {
            let h = rows.len();
            let w = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != w) {
                return Err(PyValueError::new_err("map rows differ in length"));
            }
            let values = Array2::from_shape_vec((h, w), rows.concat())
                .map_err(|e| PyValueError::new_err(e.to_string()))?;
            Ok(FieldMap::bare(values))
        })
        .collect()
}

/// `sqrt(x² + 1) − 1`.
#[pyfunction]
fn pseudo_huber(x: f64) -> f64 {
    detector::pseudo_huber(x)
}

/// Sum of a pseudo-Huber map given as a list of rows.
#[pyfunction]
fn anomaly_score(map: Vec<Vec<f64>>) -> PyResult<f64> {
    let m = field_maps(vec![map])?;
    Ok(detector::anomaly_score(&m[0]))
}

#[pyfunction]
fn fcdd_loss(maps: Vec<Vec<Vec<f64>>>, labels: Vec<u8>) -> PyResult<f64> {
    let v = detector::fcdd_loss(&field_maps(maps)?, &to_labels(&labels)?).map_err(py_err)?;
    Ok(v.value)
}

#[pyfunction]
fn deep_svdd_loss(maps: Vec<Vec<Vec<f64>>>, labels: Vec<u8>) -> PyResult<f64> {
    let v = detector::deep_svdd_loss(&field_maps(maps)?, &to_labels(&labels)?).map_err(py_err)?;
    Ok(v.value)
}

#[pyfunction]
fn npair_loss(anchor: Vec<f64>, positive: Vec<f64>, negatives: Vec<Vec<f64>>, tau: f64) -> PyResult<f64> {
    mnpair::npair_loss(&anchor, &positive, &negatives, tau).map_err(py_err)
}

#[pyfunction]
fn mnpair_loss(anchor: Vec<f64>, positives: Vec<Vec<f64>>, negatives: Vec<Vec<f64>>, pi: f64, tau: f64) -> PyResult<f64> {
    mnpair::mnpair_loss(&anchor, &positives, &negatives, pi, tau).map_err(py_err)
}

#[pyfunction]
fn compute_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    harness::compute_auc(&scores, &to_labels(&labels)?).map_err(py_err)
}

/// `(lo, hi, degenerate)`.
#[pyfunction]
fn display_range(values: Vec<f64>) -> PyResult<(f64, f64, bool)> {
    let d = heatmap::display_range(&values).map_err(py_err)?;
    Ok((d.lo, d.hi, d.degenerate))
}

/// `(label, anomaly_count)` for every rung.
#[pyfunction]
fn ladder_counts(n_train: usize) -> PyResult<Vec<(String, usize)>> {
    let l = data::ladder_counts(n_train).map_err(py_err)?;
    Ok(l.rungs.into_iter().map(|r| (r.label, r.anomaly_count)).collect())
}

/// `(a_star, flagged)` from `(ratio label, AUC)` pairs.
#[pyfunction]
#[pyo3(signature = (points, delta = harness::DEFAULT_DELTA))]
fn find_effective_ratio(points: Vec<(String, f64)>, delta: f64) -> PyResult<(u32, bool)> {
    let parsed = points
        .into_iter()
        .map(|(l, a)| {
            l.parse::<Denominator>()
                .map(|d| (d, a))
                .map_err(|e| PyValueError::new_err(e.to_string()))
        })
        .collect::<PyResult<Vec<_>>>()?;
    let e = harness::find_effective_ratio(&parsed, delta).map_err(py_err)?;
    Ok((e.a_star, e.flagged))
}

/// `(cluster or None, role)` per point.
#[pyfunction]
#[pyo3(signature = (points, eps = cluster::DEFAULT_EPS, min_neighbors = cluster::DEFAULT_MIN_NEIGHBORS))]
fn dbscan(points: Vec<(f64, f64)>, eps: f64, min_neighbors: usize) -> PyResult<Vec<(Option<usize>, &'static str)>> {
    let pts: Vec<Point2D> = points
        .iter()
        .enumerate()
        .map(|(i, &(x, y))| Point2D {
            id: i.to_string(),
            x,
            y,
            label: 0,
        })
        .collect();
    let out = cluster::dbscan(&pts, eps, min_neighbors).map_err(py_err)?;
    Ok(out
        .into_iter()
        .map(|a| {
            let role = match a.role {
                PointRole::Core => "core",
                PointRole::Border => "border",
                PointRole::Noise => "noise",
            };
            (a.cluster, role)
        })
        .collect())
}

#[pymodule]
fn fcdd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(pseudo_huber, m)?)?;
    m.add_function(wrap_pyfunction!(anomaly_score, m)?)?;
    m.add_function(wrap_pyfunction!(fcdd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(deep_svdd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(npair_loss, m)?)?;
    m.add_function(wrap_pyfunction!(mnpair_loss, m)?)?;
    m.add_function(wrap_pyfunction!(compute_auc, m)?)?;
    m.add_function(wrap_pyfunction!(display_range, m)?)?;
    m.add_function(wrap_pyfunction!(ladder_counts, m)?)?;
    m.add_function(wrap_pyfunction!(find_effective_ratio, m)?)?;
    m.add_function(wrap_pyfunction!(dbscan, m)?)?;
    Ok(())
}
