//! Splitting, the mini-batch training loop and test-set evaluation.

use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ImageSet;
use crate::metrics::{auc, classification_metrics, Metrics};
use crate::nn::{bce_loss, Model, Tensor};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    /// Train, valid and test shares.
    pub ratios: [f64; 3],
    pub stratified: bool,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratios.iter().any(|r| !(*r > 0.0)) || (self.ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split ratios {:?} must be positive and sum to 1",
                self.ratios
            )));
        }
        Ok(())
    }
}

fn ceil_tol(x: f64) -> usize {
    (x - 1e-9).ceil().max(0.0) as usize
}

/// Apportions `draw` items across classes in proportion to `counts` by
/// largest remainder; equal remainders favour the higher label (fraud).
fn apportion(draw: usize, counts: &[usize]) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return vec![0; counts.len()];
    }
    let quota: Vec<f64> = counts.iter().map(|&c| draw as f64 * c as f64 / total as f64).collect();
    let mut out: Vec<usize> = quota.iter().map(|q| q.floor() as usize).collect();
    let mut left = draw - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quota[a] - quota[a].floor(), quota[b] - quota[b].floor());
        rb.total_cmp(&ra).then(b.cmp(&a))
    });
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if out[c] < counts[c] {
            out[c] += 1;
            left -= 1;
        }
    }
    out
}

/// Two-stage split: the held-out share (valid + test, rounded up) is
/// separated from train, then divided into test (rounded up) and valid.
/// Under stratification each stage apportions classes by largest
/// remainder. Members are drawn from a seeded per-class shuffle; each
/// split keeps the input order.
pub fn stratified_split(s: &ImageSet, spec: &SplitSpec) -> Result<(ImageSet, ImageSet, ImageSet)> {
    spec.validate()?;
    let n = s.len();
    let [_, rv, rt] = spec.ratios;
    let held = ceil_tol(n as f64 * (rv + rt)).min(n);
    let n_test = ceil_tol(held as f64 * rt / (rv + rt)).min(held);
    let groups: Vec<Vec<usize>> = if spec.stratified {
        let g: Vec<Vec<usize>> = (0..2u8)
            .map(|c| (0..n).filter(|&i| s.samples[i].label == c).collect())
            .collect();
        if g.iter().any(|v| v.is_empty()) {
            return Err(Error::invalid("stratified split needs both classes present"));
        }
        g
    } else {
        vec![(0..n).collect()]
    };
    let counts: Vec<usize> = groups.iter().map(|g| g.len()).collect();
    let train_k = apportion(n - held, &counts);
    let rest: Vec<usize> = counts.iter().zip(&train_k).map(|(c, t)| c - t).collect();
    let test_k = apportion(n_test, &rest);

    let mut assign = vec![0u8; n];
    for (gi, g) in groups.iter().enumerate() {
        let mut idx = g.clone();
        idx.shuffle(&mut rng::stream(spec.seed, &[rng::TAG_SPLIT, gi as u64]));
        for (pos, &i) in idx.iter().enumerate() {
            assign[i] = if pos < train_k[gi] {
                0
            } else if pos < train_k[gi] + test_k[gi] {
                2
            } else {
                1
            };
        }
    }
    let pick = |which: u8| {
        s.with_samples(
            (0..n)
                .filter(|&i| assign[i] == which)
                .map(|i| s.samples[i].clone())
                .collect(),
        )
    };
    Ok((pick(0), pick(1), pick(2)))
}

/// `[B, H, W, 1]` batch of the selected samples.
pub fn batch_tensor(s: &ImageSet, idx: &[usize]) -> Result<Tensor<f32>> {
    let mut data = Vec::with_capacity(idx.len() * s.height * s.width);
    for &i in idx {
        data.extend_from_slice(&s.samples[i].pixels);
    }
    Tensor::new(vec![idx.len(), s.height, s.width, 1], data)
}

/// Inference-mode probabilities for every sample, in order.
pub fn predict_set(model: &Model<f32>, s: &ImageSet, batch: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(s.len());
    let idx: Vec<usize> = (0..s.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        out.extend(model.predict(&batch_tensor(s, chunk)?)?.into_iter().map(|p| p as f64));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's batches, weighted by size.
    pub train_loss: f64,
    /// AUC of the training-mode outputs collected during the epoch.
    pub train_auc: Option<f64>,
    pub valid_loss: f64,
    pub valid_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    pub hyper: TrainHyper,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "train_auc", "valid_loss", "valid_auc"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                opt(e.train_auc),
                e.valid_loss.to_string(),
                opt(e.valid_auc),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn finite(v: f64, what: &str, epoch: usize) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!(
            "{what} became non-finite in epoch {epoch}; lower the learning rate"
        )))
    }
}

/// Mini-batch Adam training with a seeded shuffle per epoch. The last
/// partial batch is kept.
pub fn train_loop(
    model: &mut Model<f32>,
    train: &ImageSet,
    valid: &ImageSet,
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if hyper.batch_size == 0 || !(hyper.lr > 0.0) {
        return Err(Error::invalid("batch size and learning rate must be positive"));
    }
    let mut logs = Vec::with_capacity(hyper.epochs);
    let labels = train.labels();
    for epoch in 0..hyper.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng::stream(hyper.seed, &[rng::TAG_SHUFFLE, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut seen_p = Vec::with_capacity(train.len());
        let mut seen_y = Vec::with_capacity(train.len());
        for (bi, chunk) in order.chunks(hyper.batch_size).enumerate() {
            let x = batch_tensor(train, chunk)?;
            let y: Vec<u8> = chunk.iter().map(|&i| labels[i]).collect();
            let seed = rng::derive_seed(hyper.seed, &[rng::TAG_DROPOUT, epoch as u64, bi as u64]);
            let cache = model.forward(&x, true, seed)?;
            let p: Vec<f64> = cache.probs().iter().map(|&v| v as f64).collect();
            let l = finite(bce_loss(&y, &p)?, "training loss", epoch)?;
            loss_sum += l * y.len() as f64;
            let grads = model.backward(&cache, &y)?;
            model.adam_step(&grads, hyper.lr)?;
            seen_p.extend(p);
            seen_y.extend(y);
        }
        let train_loss = loss_sum / train.len() as f64;
        if model.params().iter().any(|t| !t.is_finite()) {
            return Err(Error::Numerical(format!(
                "parameters became non-finite in epoch {}",
                epoch + 1
            )));
        }
        let (valid_loss, valid_auc) = if valid.is_empty() {
            (f64::NAN, None)
        } else {
            let p = predict_set(model, valid, hyper.batch_size)?;
            let y = valid.labels();
            (finite(bce_loss(&y, &p)?, "validation loss", epoch)?, auc(&p, &y).ok())
        };
        let log = EpochLog {
            epoch: epoch + 1,
            train_loss,
            train_auc: auc(&seen_p, &seen_y).ok(),
            valid_loss,
            valid_auc,
        };
        info!(
            "epoch {}/{}: loss {:.4} auc {:?} | valid loss {:.4} auc {:?}",
            log.epoch, hyper.epochs, log.train_loss, log.train_auc, log.valid_loss, log.valid_auc
        );
        logs.push(log);
    }
    Ok(TrainReport {
        epochs: logs,
        hyper: hyper.clone(),
    })
}

/// Inference-mode metrics at a fixed threshold (F2).
pub fn evaluate(model: &Model<f32>, test: &ImageSet, threshold: f64) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::invalid("test set is empty"));
    }
    let p = predict_set(model, test, 64)?;
    classification_metrics(&p, &test.labels(), threshold, 2.0)
}
