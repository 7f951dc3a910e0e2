//! L1-penalised logistic regression on flat feature rows.
//!
//! The objective is `C * mean_BCE(sigmoid(X w + b), y) + sum |w_j|`, solved
//! by proximal gradient with a backtracking step that never increases the
//! objective. The bias is not penalised.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{PanelDataset, RowKey};
use crate::error::{Error, Result};
use crate::features::ImageSet;
use crate::nn::tensor::sigmoid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct L1Config {
    pub c: f64,
    pub max_iters: usize,
    /// Stop once no parameter moves by more than this.
    pub tol: f64,
}

impl Default for L1Config {
    fn default() -> Self {
        L1Config {
            c: 1.0,
            max_iters: 5000,
            tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting from the initial point.
    pub objective: Vec<f64>,
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

struct Problem<'a> {
    x: &'a [Vec<f64>],
    y: &'a [u8],
    c: f64,
}

impl Problem<'_> {
    fn margins(&self, w: &[f64], b: f64) -> Vec<f64> {
        self.x
            .iter()
            .map(|r| r.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b)
            .collect()
    }

    /// Smooth part `C * mean BCE`, evaluated through logits.
    fn smooth(&self, z: &[f64]) -> f64 {
        let n = self.y.len() as f64;
        self.c
            * z.iter()
                .zip(self.y)
                .map(|(&z, &y)| softplus(z) - y as f64 * z)
                .sum::<f64>()
            / n
    }

    fn grad(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let n = self.y.len() as f64;
        let f = self.x.first().map_or(0, |r| r.len());
        let mut gw = vec![0.0; f];
        let mut gb = 0.0;
        for ((row, &z), &y) in self.x.iter().zip(z).zip(self.y) {
            let r = self.c * (sigmoid(z) - y as f64) / n;
            gb += r;
            for (g, v) in gw.iter_mut().zip(row) {
                *g += r * v;
            }
        }
        (gw, gb)
    }
}

fn l1(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum()
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Gradient of the smooth part at `(w, b)`; used for optimality checks.
pub fn smooth_gradient(x: &[Vec<f64>], y: &[u8], c: f64, w: &[f64], b: f64) -> (Vec<f64>, f64) {
    let p = Problem { x, y, c };
    p.grad(&p.margins(w, b))
}

pub fn objective(x: &[Vec<f64>], y: &[u8], c: f64, w: &[f64], b: f64) -> f64 {
    let p = Problem { x, y, c };
    p.smooth(&p.margins(w, b)) + l1(w)
}

pub fn fit_l1_logreg(x: &[Vec<f64>], y: &[u8], cfg: &L1Config) -> Result<(LinearModel, FitReport)> {
    if x.is_empty() || x.len() != y.len() {
        return Err(Error::Shape(format!("{} rows for {} labels", x.len(), y.len())));
    }
    let f = x[0].len();
    if x.iter().any(|r| r.len() != f) {
        return Err(Error::Shape("ragged design matrix".into()));
    }
    if !(cfg.c >= 0.0) || !cfg.c.is_finite() {
        return Err(Error::invalid(format!("C must be finite and >= 0, got {}", cfg.c)));
    }
    let prob = Problem { x, y, c: cfg.c };
    let mut w = vec![0.0; f];
    let mut b = 0.0;
    let mut z = prob.margins(&w, b);
    let mut fs = prob.smooth(&z);
    let mut history = vec![fs + l1(&w)];
    let mut step = 1.0;
    let mut converged = false;
    let mut iters = 0;
    let mut obj = history[0];
    'outer: while iters < cfg.max_iters {
        iters += 1;
        let (gw, gb) = prob.grad(&z);
        // Backtracking: accept once the quadratic upper bound holds and the
        // full objective has not risen.
        let (nw, nb, nz, nfs, new_obj) = loop {
            let nw: Vec<f64> = w
                .iter()
                .zip(&gw)
                .map(|(wi, gi)| soft_threshold(wi - step * gi, step))
                .collect();
            let nb = b - step * gb;
            let nz = prob.margins(&nw, nb);
            let nfs = prob.smooth(&nz);
            let new_obj = nfs + l1(&nw);
            if !new_obj.is_finite() && step >= 1e-14 {
                step *= 0.5;
                continue;
            }
            let mut lin = (nb - b) * gb;
            let mut sq = (nb - b).powi(2);
            for ((a, o), g) in nw.iter().zip(&w).zip(&gw) {
                lin += (a - o) * g;
                sq += (a - o).powi(2);
            }
            if nfs <= fs + lin + sq / (2.0 * step) && new_obj <= obj {
                break (nw, nb, nz, nfs, new_obj);
            }
            step *= 0.5;
            if step < 1e-14 {
                // No representable descent left: stationary to machine
                // precision.
                converged = true;
                break 'outer;
            }
        };
        if !new_obj.is_finite() {
            return Err(Error::Numerical("L1 logistic objective became non-finite".into()));
        }
        let delta = nw
            .iter()
            .zip(&w)
            .map(|(a, o)| (a - o).abs())
            .fold((nb - b).abs(), f64::max);
        (w, b, z, fs, obj) = (nw, nb, nz, nfs, new_obj);
        history.push(obj);
        if delta < cfg.tol {
            converged = true;
            break;
        }
        step *= 1.25;
    }
    Ok((
        LinearModel {
            weights: w,
            bias: b,
            c: cfg.c,
            threshold: 0.35,
        },
        FitReport {
            iterations: iters,
            converged,
            objective: history,
        },
    ))
}

/// Probabilities and hard labels (`1` iff `p >= threshold`).
pub fn predict_binary(m: &LinearModel, x: &[Vec<f64>], threshold: f64) -> Result<(Vec<f64>, Vec<u8>)> {
    let mut probs = Vec::with_capacity(x.len());
    for r in x {
        if r.len() != m.weights.len() {
            return Err(Error::Shape(format!(
                "row has {} features, model {}",
                r.len(),
                m.weights.len()
            )));
        }
        probs.push(sigmoid(
            r.iter().zip(&m.weights).map(|(a, b)| a * b).sum::<f64>() + m.bias,
        ));
    }
    let labels = probs.iter().map(|&p| (p >= threshold) as u8).collect();
    Ok((probs, labels))
}

/// Rows of one temporal split.
#[derive(Debug, Clone, PartialEq)]
pub struct RowSet {
    pub keys: Vec<RowKey>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<u8>,
}

pub type YearRange = (i32, i32);

/// Assigns each (company, year) row to the split whose inclusive year range
/// contains it; rows outside every range are left out. Labels are the
/// row's own year.
pub fn temporal_split(ds: &PanelDataset, train: YearRange, valid: YearRange, test: YearRange) -> Result<[RowSet; 3]> {
    let ranges = [("train", train), ("valid", valid), ("test", test)];
    for (name, (lo, hi)) in ranges {
        if lo > hi {
            return Err(Error::invalid(format!("{name} year range {lo}..={hi} is empty")));
        }
    }
    for i in 0..3 {
        for j in i + 1..3 {
            let (a, b) = (ranges[i].1, ranges[j].1);
            if a.0 <= b.1 && b.0 <= a.1 {
                return Err(Error::invalid(format!(
                    "{} and {} year ranges overlap",
                    ranges[i].0, ranges[j].0
                )));
            }
        }
    }
    let mut sets: [RowSet; 3] = std::array::from_fn(|_| RowSet {
        keys: vec![],
        x: vec![],
        y: vec![],
    });
    for (k, r) in ds.rows() {
        if let Some(i) = ranges.iter().position(|(_, (lo, hi))| (*lo..=*hi).contains(&k.year)) {
            sets[i].keys.push(k.clone());
            sets[i].x.push(r.values.clone());
            sets[i].y.push(ds.is_fraud(k) as u8);
        }
    }
    for (i, (name, (lo, hi))) in ranges.iter().enumerate() {
        if sets[i].keys.is_empty() {
            return Err(Error::invalid(format!("no rows fall in the {name} years {lo}..={hi}")));
        }
    }
    Ok(sets)
}

/// Flattens each image row-major into one feature vector.
pub fn flatten_images(s: &ImageSet) -> (Vec<Vec<f64>>, Vec<u8>) {
    let x = s
        .samples
        .iter()
        .map(|smp| smp.pixels.iter().map(|&v| v as f64).collect())
        .collect();
    (x, s.labels())
}

/// Reads an external prediction file with header `company_id,year,prob`.
pub fn load_external_predictions(path: &Path) -> Result<BTreeMap<RowKey, f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["company_id", "year", "prob"] {
        return Err(Error::Schema(format!(
            "{}: header must be company_id,year,prob",
            path.display()
        )));
    }
    let mut out = BTreeMap::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::invalid(format!("{} line {}: bad {what}", path.display(), line + 2));
        let year: i32 = rec[1].trim().parse().map_err(|_| bad("year"))?;
        let prob: f64 = rec[2].trim().parse().map_err(|_| bad("prob"))?;
        if !(0.0..=1.0).contains(&prob) {
            return Err(bad("prob (outside [0, 1])"));
        }
        if out.insert(RowKey::new(rec[0].trim(), year), prob).is_some() {
            return Err(Error::invalid(format!(
                "{} line {}: duplicate key",
                path.display(),
                line + 2
            )));
        }
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, keys: &[RowKey], probs: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["company_id", "year", "prob"])?;
    for (k, p) in keys.iter().zip(probs) {
        w.write_record([k.company.clone(), k.year.to_string(), p.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
