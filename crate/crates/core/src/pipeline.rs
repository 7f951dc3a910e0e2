//! Command implementations behind the CLI.
//!
//! Commands talk to each other only through files under the output
//! directory:
//!
//! ```text
//! data/        panel.csv schema.csv violations.csv ground_truth.json
//! prepared/    train/ valid/ test/ (image sets), panel.csv, schema.csv,
//!              violations.csv, gray_removed.csv, report.json
//! model/       checkpoint.bin train_report.csv
//! tune/        threshold_curve.csv threshold.json
//! eval/        metrics.json threshold_curve.csv histogram.csv predictions.csv
//! explain/     <company>_overlay.ppm/.json, <company>_heatmap.pgm,
//!              <company>_conv<n>.pgm, localization.json
//! baseline/    metrics.json predictions.csv model.json
//! compare/     comparison.csv
//! ```
//!
//! Every command also writes `config.json` (the resolved config) and
//! `manifest_<command>.json` with SHA-256 digests of its inputs and outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::anomaly::{filter_gray, fit_on_non_fraud, write_removed_csv};
use crate::baseline::{
    fit_l1_logreg, flatten_images, load_external_predictions, predict_binary, temporal_split, write_predictions,
    FitReport, L1Config, LinearModel,
};
use crate::config::{BaselineProtocol, RunConfig};
use crate::data::{
    derive_labels, load_panel_csv, load_standardized_panel_csv, load_violations_csv, write_violations_csv,
    PanelDataset, RowKey,
};
use crate::error::{Error, Result};
use crate::explain::{
    footprint_mask, gradcam, layer_activations, masked_mass, top_decile_mass, upsample_overlay, write_pgm, write_ppm,
    GrayImage, Heatmap,
};
use crate::features::{
    drop_sparse_features, impute_missing, smote_balance, to_images, zscore_fit_apply, ImageSet, ZScaler,
};
use crate::metrics::{auc, classification_metrics, select_threshold, threshold_sweep, write_histogram_csv, Metrics};
use crate::nn::{checkpoint, Model, ModelConfig};
use crate::rng;
use crate::synth::{generate_synthetic, load_ground_truth, write_output, GroundTruth, SynthConfig};
use crate::train::{predict_set, stratified_split, train_loop, SplitSpec, TrainHyper};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Synth,
    Prepare,
    Train,
    Tune,
    Eval,
    Explain,
    Baseline,
    Compare,
    All,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Prepare => "prepare",
            Command::Train => "train",
            Command::Tune => "tune",
            Command::Eval => "eval",
            Command::Explain => "explain",
            Command::Baseline => "baseline",
            Command::Compare => "compare",
            Command::All => "all",
        }
    }
}

impl fmt::Display for Command {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn prepared(&self) -> PathBuf {
        self.root.join("prepared")
    }
    pub fn split(&self, name: &str) -> PathBuf {
        self.prepared().join(name)
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("model").join("checkpoint.bin")
    }
    pub fn threshold(&self) -> PathBuf {
        self.root.join("tune").join("threshold.json")
    }
    pub fn dir(&self, cmd: &str) -> PathBuf {
        self.root.join(cmd)
    }
}

/// Records the files a command read and wrote.
struct Tracker<'a> {
    layout: &'a Layout,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_dir() {
        let mut out = Vec::new();
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(path, err)))
            .collect::<Result<_>>()?;
        entries.sort();
        for e in entries {
            out.extend(files_under(&e)?);
        }
        Ok(out)
    } else {
        Ok(vec![path.to_path_buf()])
    }
}

impl<'a> Tracker<'a> {
    fn new(layout: &'a Layout) -> Self {
        Tracker {
            layout,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }
    fn input(&mut self, p: &Path) {
        self.inputs.push(p.to_path_buf());
    }
    fn output(&mut self, p: &Path) {
        self.outputs.push(p.to_path_buf());
    }

    fn describe(&self, paths: &[PathBuf]) -> Result<Vec<Value>> {
        let mut out = Vec::new();
        for p in paths {
            for f in files_under(p)? {
                let shown = f.strip_prefix(&self.layout.root).unwrap_or(&f);
                out.push(json!({"path": shown, "sha256": sha256_file(&f)?}));
            }
        }
        Ok(out)
    }

    fn finish(self, cmd: Command, cfg: &RunConfig) -> Result<()> {
        let manifest = json!({
            "command": cmd.name(),
            "config_hash": cfg.hash(),
            "preset": cfg.preset,
            "seed": cfg.seed,
            "inputs": self.describe(&self.inputs)?,
            "outputs": self.describe(&self.outputs)?,
        });
        let path = self.layout.root.join(format!("manifest_{}.json", cmd.name()));
        write_json(&path, &manifest)
    }
}

fn write_json<T: Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(v)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingStage(format!("{} not found; {hint}", path.display())))
    }
}

/// Runs one command (or the whole chain for [`Command::All`]).
pub fn run(cmd: Command, cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(cfg.output());
    mkdir(&layout.root)?;
    cfg.write_resolved(&layout.root.join("config.json"))?;
    if cmd == Command::All {
        let mut chain = vec![Command::Synth];
        if cfg.paths.data.is_some() {
            chain.clear();
        }
        chain.extend([
            Command::Prepare,
            Command::Train,
            Command::Tune,
            Command::Eval,
            Command::Explain,
            Command::Baseline,
            Command::Compare,
        ]);
        for c in chain {
            run_one(c, cfg, &layout)?;
        }
        return Ok(());
    }
    run_one(cmd, cfg, &layout)
}

fn run_one(cmd: Command, cfg: &RunConfig, layout: &Layout) -> Result<()> {
    info!("running {cmd}");
    let mut t = Tracker::new(layout);
    match cmd {
        Command::Synth => synth(cfg, layout, &mut t)?,
        Command::Prepare => prepare(cfg, layout, &mut t)?,
        Command::Train => train(cfg, layout, &mut t)?,
        Command::Tune => tune(cfg, layout, &mut t)?,
        Command::Eval => eval(cfg, layout, &mut t)?,
        Command::Explain => explain(cfg, layout, &mut t)?,
        Command::Baseline => baseline(cfg, layout, &mut t)?,
        Command::Compare => compare(cfg, layout, &mut t)?,
        Command::All => unreachable!("expanded by run"),
    }
    t.finish(cmd, cfg)
}

/// The generator seed mixes the run seed with `synth.seed`.
pub fn synth_config(cfg: &RunConfig) -> SynthConfig {
    SynthConfig {
        seed: rng::derive_seed(cfg.seed, &[rng::TAG_SYNTH, cfg.synth.seed]),
        ..cfg.synth.clone()
    }
}

fn synth(cfg: &RunConfig, layout: &Layout, t: &mut Tracker) -> Result<()> {
    let out = generate_synthetic(&synth_config(cfg))?;
    let dir = layout.data();
    write_output(&out, &dir)?;
    info!(
        "synthetic panel: {} rows, {} fraud companies, {} gray companies",
        out.panel.len(),
        out.truth.fraud.len(),
        out.truth.gray.len()
    );
    t.output(&dir);
    Ok(())
}

struct Inputs {
    panel: PathBuf,
    schema: PathBuf,
    violations: PathBuf,
}

fn inputs(cfg: &RunConfig, layout: &Layout) -> Result<Inputs> {
    let d = layout.data();
    let pick = |p: &Option<PathBuf>, name: &str| p.clone().unwrap_or_else(|| d.join(name));
    let i = Inputs {
        panel: pick(&cfg.paths.data, "panel.csv"),
        schema: pick(&cfg.paths.schema, "schema.csv"),
        violations: pick(&cfg.paths.violations, "violations.csv"),
    };
    for p in [&i.panel, &i.schema, &i.violations] {
        require(
            p,
            "run synth first or set paths.data, paths.schema and paths.violations",
        )?;
    }
    Ok(i)
}

#[derive(Debug, Serialize)]
struct PrepareReport {
    rows_loaded: usize,
    features_loaded: usize,
    features_kept: usize,
    labels: crate::data::LabelReport,
    impute: crate::features::ImputeReport,
    gray_removed: usize,
    target_year: i32,
    mode: &'static str,
    image_height: usize,
    image_width: usize,
    companies: usize,
    /// `[negatives, positives]` per split after balancing.
    train: [usize; 2],
    valid: [usize; 2],
    test: [usize; 2],
}

fn counts(s: &ImageSet) -> [usize; 2] {
    let (n, p) = s.class_counts();
    [n, p]
}

fn subset_by_ids(s: &ImageSet, ids: &BTreeSet<String>) -> ImageSet {
    s.with_samples(s.samples.iter().filter(|x| ids.contains(&x.id)).cloned().collect())
}

fn gray_filter(cfg: &RunConfig, ds: PanelDataset, removed_path: &Path) -> Result<(PanelDataset, usize)> {
    let p = &cfg.prepare;
    let forest = fit_on_non_fraud(&ds, p.gray_n_trees, p.gray_psi, cfg.seed)?;
    let res = filter_gray(&ds, &forest, p.gray_quantile)?;
    write_removed_csv(removed_path, &res.removed)?;
    let fraud_rows = ds.labels().iter().filter(|(_, l)| l.is_fraud()).count();
    info!(
        "gray filter removed {} of {} non-fraud rows",
        res.removed.len(),
        ds.len() - fraud_rows
    );
    Ok((res.dataset, res.removed.len()))
}

fn prepare(cfg: &RunConfig, layout: &Layout, t: &mut Tracker) -> Result<()> {
    let p = &cfg.prepare;
    let inp = inputs(cfg, layout)?;
    for f in [&inp.panel, &inp.schema, &inp.violations] {
        t.input(f);
    }
    let dir = layout.prepared();
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    mkdir(&dir)?;

    let mut ds = load_panel_csv(&inp.panel, &inp.schema)?.canonicalize()?;
    let (rows_loaded, features_loaded) = (ds.len(), ds.n_features());
    let (labels, label_report) = derive_labels(&load_violations_csv(&inp.violations)?);
    ds.attach_labels(labels);
    let ds = drop_sparse_features(&ds, p.sparse_threshold)?;
    let (mut ds, impute) = impute_missing(&ds, p.impute_k)?;
    let target_year = match p.target_year {
        Some(y) => y,
        None => *ds.years().last().ok_or_else(|| Error::invalid("panel has no rows"))?,
    };
    let removed_path = dir.join("gray_removed.csv");
    let mut gray_removed = 0;
    if p.gray_filter && !p.gray_after_zscore {
        (ds, gray_removed) = gray_filter(cfg, ds, &removed_path)?;
    }
    let spec = SplitSpec {
        ratios: p.split_ratios,
        stratified: p.stratified,
        seed: cfg.seed,
    };
    // With train-only statistics the split is fixed on unscaled images
    // first; company membership then carries over to the scaled images.
    let mut fixed_split = None;
    if p.zscore_train_only {
        let raw = to_images(&ds, p.mode, target_year, p.min_years)?;
        let (tr, va, te) = stratified_split(&raw, &spec)?;
        let ids: BTreeSet<String> = tr.samples.iter().map(|s| s.id.clone()).collect();
        let scaler = ZScaler::fit(
            ds.rows()
                .iter()
                .filter(|(k, _)| ids.contains(&k.company))
                .map(|(_, r)| r),
            ds.n_features(),
        )?;
        ds = scaler.apply(&ds);
        fixed_split = Some([tr, va, te].map(|s| s.samples.iter().map(|x| x.id.clone()).collect::<BTreeSet<_>>()));
    } else {
        ds = zscore_fit_apply(&ds)?.0;
    }
    if p.gray_filter && p.gray_after_zscore {
        (ds, gray_removed) = gray_filter(cfg, ds, &removed_path)?;
    }
    let images = to_images(&ds, p.mode, target_year, p.min_years)?;
    let (mut train, valid, test) = match (&fixed_split, p.smote && p.smote_before_split) {
        (Some(ids), _) => (
            subset_by_ids(&images, &ids[0]),
            subset_by_ids(&images, &ids[1]),
            subset_by_ids(&images, &ids[2]),
        ),
        (None, true) => stratified_split(&smote_balance(&images, p.smote_k, cfg.seed)?, &spec)?,
        (None, false) => stratified_split(&images, &spec)?,
    };
    if p.smote && !p.smote_before_split {
        train = smote_balance(&train, p.smote_k, cfg.seed)?;
    }
    for (name, s) in [("train", &train), ("valid", &valid), ("test", &test)] {
        s.save(&layout.split(name))?;
    }
    ds.write_csv(&dir.join("panel.csv"))?;
    ds.schema().write_csv(&dir.join("schema.csv"))?;
    let records: Vec<(String, i32, String)> = ds
        .labels()
        .iter()
        .flat_map(|(k, l)| l.codes.iter().map(move |c| (k.company.clone(), k.year, c.clone())))
        .collect();
    write_violations_csv(&dir.join("violations.csv"), &records)?;
    let report = PrepareReport {
        rows_loaded,
        features_loaded,
        features_kept: ds.n_features(),
        labels: label_report,
        impute,
        gray_removed,
        target_year,
        mode: p.mode.as_str(),
        image_height: images.height,
        image_width: images.width,
        companies: images.len(),
        train: counts(&train),
        valid: counts(&valid),
        test: counts(&test),
    };
    info!(
        "prepared {} companies as {}x{} images; train {:?} valid {:?} test {:?}",
        report.companies, report.image_height, report.image_width, report.train, report.valid, report.test
    );
    write_json(&dir.join("report.json"), &report)?;
    t.output(&dir);
    Ok(())
}

fn load_split(layout: &Layout, name: &str, t: &mut Tracker) -> Result<ImageSet> {
    let dir = layout.split(name);
    require(&dir.join("meta.json"), "run prepare first")?;
    t.input(&dir);
    ImageSet::load(&dir)
}

fn load_model(layout: &Layout, t: &mut Tracker) -> Result<Model<f32>> {
    let path = layout.checkpoint();
    require(&path, "run train first")?;
    t.input(&path);
    Ok(checkpoint::load(&path)?.0)
}

pub fn model_config(cfg: &RunConfig, h: usize, w: usize) -> ModelConfig {
    ModelConfig {
        input_h: h,
        input_w: w,
        channels: cfg.model.channels,
        dense_hidden: cfg.model.dense_hidden,
        conv_dropout: cfg.model.conv_dropout,
        dense_dropout: cfg.model.dense_dropout,
    }
}

fn train(cfg: &RunConfig, layout: &Layout, t: &mut Tracker) -> Result<()> {
    let train = load_split(layout, "train", t)?;
    let valid = load_split(layout, "valid", t)?;
    let mut model = Model::build(model_config(cfg, train.height, train.width), cfg.seed)?;
    let hyper = TrainHyper {
        lr: cfg.train.lr,
        batch_size: cfg.train.batch_size,
        epochs: cfg.train.epochs,
        seed: cfg.seed,
    };
    info!("training {} parameters on {} samples", model.n_params(), train.len());
    let report = train_loop(&mut model, &train, &valid, &hyper)?;
    let dir = layout.dir("model");
    mkdir(&dir)?;
    let echo = json!({
        "config_hash": cfg.hash(),
        "preset": cfg.preset,
        "mode": train.mode.as_str(),
        "target_year": train.target_year,
        "hyper": hyper,
    });
    checkpoint::save(&model, &echo, &layout.checkpoint())?;
    report.write_csv(&dir.join("train_report.csv"))?;
    t.output(&dir);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdChoice {
    pub policy: crate::metrics::ThresholdPolicy,
    pub threshold: f64,
    pub valid_metrics: Metrics,
}

fn tune(cfg: &RunConfig, layout: &Layout, t: &mut Tracker) -> Result<()> {
    let model = load_model(layout, t)?;
    let valid = load_split(layout, "valid", t)?;
    let p = predict_set(&model, &valid, 64)?;
    let y = valid.labels();
    let curve = threshold_sweep(&p, &y)?;
    let threshold = select_threshold(&curve, cfg.threshold)?;
    let choice = ThresholdChoice {
        policy: cfg.threshold,
        threshold,
        valid_metrics: classification_metrics(&p, &y, threshold, cfg.beta)?,
    };
    info!(
        "threshold {threshold} ({:?}), valid F2 {:.4}",
        cfg.threshold, choice.valid_metrics.fbeta
    );
    let dir = layout.dir("tune");
    mkdir(&dir)?;
    curve.write_csv(&dir.join("threshold_curve.csv"))?;
    write_json(&layout.threshold(), &choice)?;
    t.output(&dir);
    Ok(())
}

fn write_sample_predictions(path: &Path, s: &ImageSet, p: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["company_id", "year", "label", "prob"])?;
    for (x, prob) in s.samples.iter().zip(p) {
        w.write_record([
            x.id.clone(),
            s.target_year.to_string(),
            x.label.to_string(),
            prob.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn eval(cfg: &RunConfig, layout: &Layout, t: &mut Tracker) -> Result<()> {
    let model = load_model(layout, t)?;
    let test = load_split(layout, "test", t)?;
    let thr_path = layout.threshold();
    require(&thr_path, "run tune first")?;
    t.input(&thr_path);
    let choice: ThresholdChoice = read_json(&thr_path)?;
    let p = predict_set(&model, &test, 64)?;
    let y = test.labels();
    let metrics = classification_metrics(&p, &y, choice.threshold, cfg.beta)?;
    info!(
        "test auc {:?} recall {:.4} precision {:.4} F{} {:.4} at {}",
        metrics.auc, metrics.recall, metrics.precision, cfg.beta, metrics.fbeta, choice.threshold
    );
    let dir = layout.dir("eval");
    mkdir(&dir)?;
    write_json(&dir.join("metrics.json"), &metrics)?;
    if let Ok(curve) = threshold_sweep(&p, &y) {
        curve.write_csv(&dir.join("threshold_curve.csv"))?;
    }
    write_histogram_csv(&dir.join("histogram.csv"), &p, &y)?;
    write_sample_predictions(&dir.join("predictions.csv"), &test, &p)?;
    t.output(&dir);
    Ok(())
}

/// Localization of Grad-CAM mass on planted blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub samples: usize,
    /// Pooled share of top-decile heatmap mass inside the block footprint.
    pub top_decile_share: f64,
    /// Samples whose block holds more mass than an equal-size random region.
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// One-sided sign-test p-value of wins over non-tied pairs.
    pub sign_test_p: f64,
    pub per_sample: Vec<SampleLocalization>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLocalization {
    pub company: String,
    pub top_decile_inside: f64,
    pub top_decile_total: f64,
    pub block_mass: f64,
    pub random_mass: f64,
}

/// `P(X >= wins)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(wins: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    // Log-space binomial terms keep large n finite.
    let ln_fact = |k: usize| (1..=k).map(|i| (i as f64).ln()).sum::<f64>();
    let total = ln_fact(n);
    (wins..=n)
        .map(|k| (total - ln_fact(k) - ln_fact(n - k) - n as f64 * std::f64::consts::LN_2).exp())
        .sum::<f64>()
        .min(1.0)
}

/// Input-pixel rectangle `(rows, cols)` of a planted block within an image
/// set, end exclusive.
pub fn block_region(s: &ImageSet, truth: &GroundTruth, company: &str) -> Option<((usize, usize), (usize, usize))> {
    let b = truth.block_for(company)?;
    let r0 = usize::try_from(b.years.0 - s.start_year).ok()?;
    let r1 = usize::try_from(b.years.1 - s.start_year).ok()? + 1;
    let c0 = s.schema.index_of(&b.feature_ids.0)?;
    let c1 = s.schema.index_of(&b.feature_ids.1)? + 1;
    (r1 <= s.height && c0 < c1).then_some(((r0, r1), (c0, c1)))
}

fn random_rect_mask(hm: &Heatmap, mask: &[bool], r: &mut impl Rng) -> Vec<bool> {
    let cells: Vec<(usize, usize)> = (0..hm.h)
        .flat_map(|i| (0..hm.w).map(move |j| (i, j)))
        .filter(|&(i, j)| mask[i * hm.w + j])
        .collect();
    let mut out = vec![false; mask.len()];
    if cells.is_empty() {
        return out;
    }
    let (i0, i1) = (
        cells.iter().map(|c| c.0).min().unwrap(),
        cells.iter().map(|c| c.0).max().unwrap(),
    );
    let (j0, j1) = (
        cells.iter().map(|c| c.1).min().unwrap(),
        cells.iter().map(|c| c.1).max().unwrap(),
    );
    let (rh, rw) = (i1 - i0 + 1, j1 - j0 + 1);
    let top = r.random_range(0..=hm.h - rh);
    let left = r.random_range(0..=hm.w - rw);
    for i in top..top + rh {
        for j in left..left + rw {
            out[i * hm.w + j] = true;
        }
    }
    out
}

/// Grad-CAM localization over every real fraud sample in `sets` that has a
/// planted block.
pub fn localization(model: &Model<f32>, sets: &[&ImageSet], truth: &GroundTruth, seed: u64) -> Result<Localization> {
    let mut per_sample = Vec::new();
    let mut r = rng::stream(seed, &[rng::TAG_EXPLAIN]);
    for s in sets {
        for smp in s.samples.iter().filter(|x| x.label == 1 && !x.synthetic) {
            let Some((rows, cols)) = block_region(s, truth, &smp.id) else {
                continue;
            };
            let hm = gradcam(model, &smp.pixels)?;
            let stride = (model.config.input_h / hm.h).max(1);
            let mask = footprint_mask(&hm, stride, rows, cols);
            let (inside, total) = top_decile_mass(&hm, &mask);
            let random = random_rect_mask(&hm, &mask, &mut r);
            per_sample.push(SampleLocalization {
                company: smp.id.clone(),
                top_decile_inside: inside,
                top_decile_total: total,
                block_mass: masked_mass(&hm, &mask),
                random_mass: masked_mass(&hm, &random),
            });
        }
    }
    let (inside, total) = per_sample
        .iter()
        .fold((0.0, 0.0), |a, s| (a.0 + s.top_decile_inside, a.1 + s.top_decile_total));
    let wins = per_sample.iter().filter(|s| s.block_mass > s.random_mass).count();
    let losses = per_sample.iter().filter(|s| s.block_mass < s.random_mass).count();
    Ok(Localization {
        samples: per_sample.len(),
        top_decile_share: if total > 0.0 { inside / total } else { 0.0 },
        wins,
        losses,
        ties: per_sample.len() - wins - losses,
        sign_test_p: sign_test_p(wins, wins + losses),
        per_sample,
    })
}

fn file_stem(company: &str) -> String {
    company
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn explain(cfg: &RunConfig, layout: &Layout, t: &mut Tracker) -> Result<()> {
    let model = load_model(layout, t)?;
    let sets = [
        load_split(layout, "train", t)?,
        load_split(layout, "valid", t)?,
        load_split(layout, "test", t)?,
    ];
    let test = &sets[2];
    let names: Vec<String> = if cfg.explain.companies.is_empty() {
        test.samples
            .iter()
            .filter(|x| x.label == 1)
            .map(|x| x.id.clone())
            .collect()
    } else {
        cfg.explain.companies.clone()
    };
    let dir = layout.dir("explain");
    if dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    mkdir(&dir)?;
    for name in &names {
        let (set, smp) = sets
            .iter()
            .find_map(|s| s.samples.iter().find(|x| &x.id == name && !x.synthetic).map(|x| (s, x)))
            .ok_or_else(|| Error::invalid(format!("company `{name}` is not in the prepared image sets")))?;
        let hm = gradcam(&model, &smp.pixels)?;
        let overlay = upsample_overlay(
            &hm,
            &smp.pixels,
            set.height,
            &set.schema,
            cfg.explain.scale,
            cfg.explain.palette,
        )?;
        let stem = file_stem(name);
        write_ppm(&dir.join(format!("{stem}_overlay.ppm")), &overlay)?;
        let prob = model.predict(&crate::train::batch_tensor(&set.with_samples(vec![smp.clone()]), &[0])?)?[0];
        write_json(
            &dir.join(format!("{stem}_overlay.json")),
            &json!({
                "company": name,
                "target_year": set.target_year,
                "start_year": set.start_year,
                "label": smp.label,
                "probability": prob,
                "heatmap": hm,
                "overlay": overlay.sidecar(),
            }),
        )?;
        write_pgm(
            &dir.join(format!("{stem}_heatmap.pgm")),
            &GrayImage {
                width: hm.w,
                height: hm.h,
                data: hm.values.clone(),
            },
        )?;
        for &layer in &cfg.explain.layers {
            let grid = layer_activations(&model, &smp.pixels, layer)?;
            write_pgm(&dir.join(format!("{stem}_conv{layer}.pgm")), &grid.grid)?;
        }
    }
    info!("explained {} companies", names.len());
    let gt = cfg
        .paths
        .ground_truth
        .clone()
        .unwrap_or_else(|| layout.data().join("ground_truth.json"));
    if gt.exists() {
        t.input(&gt);
        let truth = load_ground_truth(&gt)?;
        let loc = localization(&model, &sets.iter().collect::<Vec<_>>(), &truth, cfg.seed)?;
        info!(
            "localization over {} samples: top-decile share {:.3}, wins {}/{}, p {:.2e}",
            loc.samples,
            loc.top_decile_share,
            loc.wins,
            loc.wins + loc.losses,
            loc.sign_test_p
        );
        write_json(&dir.join("localization.json"), &loc)?;
    }
    t.output(&dir);
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BaselineResult {
    pub protocol: BaselineProtocol,
    /// Description of the rows the metrics were computed on.
    pub test_set: String,
    /// Selected penalty balance and the validation AUC of every candidate.
    pub c: f64,
    pub candidates: Vec<Value>,
    pub iterations: usize,
    pub converged: bool,
    pub nonzero_weights: usize,
    pub valid: Metrics,
    pub test: Metrics,
}

fn baseline(cfg: &RunConfig, layout: &Layout, t: &mut Tracker) -> Result<()> {
    let b = &cfg.baseline;
    let l1 = L1Config {
        c: b.c,
        max_iters: b.max_iters,
        tol: b.tol,
    };
    let (train, valid, test, test_set, test_keys) = match b.protocol {
        BaselineProtocol::Flattened => {
            let sets = [
                load_split(layout, "train", t)?,
                load_split(layout, "valid", t)?,
                load_split(layout, "test", t)?,
            ];
            let keys = sets[2]
                .samples
                .iter()
                .map(|x| RowKey::new(x.id.clone(), sets[2].target_year))
                .collect::<Vec<_>>();
            let [tr, va, te] = sets.map(|s| flatten_images(&s));
            (tr, va, te, "company_split".to_string(), keys)
        }
        BaselineProtocol::Temporal => {
            let dir = layout.prepared();
            let (panel, schema, viol) = (
                dir.join("panel.csv"),
                dir.join("schema.csv"),
                dir.join("violations.csv"),
            );
            for p in [&panel, &schema, &viol] {
                require(p, "run prepare first")?;
                t.input(p);
            }
            let mut ds = load_standardized_panel_csv(&panel, &schema)?;
            ds.attach_labels(derive_labels(&load_violations_csv(&viol)?).0);
            let [tr, va, te] = temporal_split(&ds, b.train_years, b.valid_years, b.test_years)?;
            let desc = format!("years {}-{}", b.test_years.0, b.test_years.1);
            ((tr.x, tr.y), (va.x, va.y), (te.x, te.y), desc, te.keys)
        }
    };
    let grid = if b.c_grid.is_empty() {
        vec![b.c]
    } else {
        b.c_grid.clone()
    };
    let mut candidates = Vec::new();
    let mut best: Option<(f64, LinearModel, FitReport)> = None;
    for &c in &grid {
        let (m, fit) = fit_l1_logreg(&train.0, &train.1, &L1Config { c, ..l1 })?;
        let (p, _) = predict_binary(&m, &valid.0, b.threshold)?;
        let valid_auc = auc(&p, &valid.1).unwrap_or(0.5);
        info!(
            "L1 logistic C={c}: {} iterations, converged {}, valid auc {valid_auc:.4}",
            fit.iterations, fit.converged
        );
        candidates.push(json!({"c": c, "valid_auc": valid_auc, "iterations": fit.iterations}));
        if best.as_ref().is_none_or(|(a, _, _)| valid_auc > *a) {
            best = Some((valid_auc, m, fit));
        }
    }
    let (_, mut model, fit) = best.expect("grid is nonempty");
    model.threshold = b.threshold;
    let score = |x: &[Vec<f64>], y: &[u8]| -> Result<(Vec<f64>, Metrics)> {
        let (p, _) = predict_binary(&model, x, b.threshold)?;
        let m = classification_metrics(&p, y, b.threshold, cfg.beta)?;
        Ok((p, m))
    };
    let (_, valid_m) = score(&valid.0, &valid.1)?;
    let (test_p, test_m) = score(&test.0, &test.1)?;
    info!("baseline test auc {:?} recall {:.4}", test_m.auc, test_m.recall);
    let dir = layout.dir("baseline");
    mkdir(&dir)?;
    let result = BaselineResult {
        protocol: b.protocol,
        test_set,
        c: model.c,
        candidates,
        iterations: fit.iterations,
        converged: fit.converged,
        nonzero_weights: model.weights.iter().filter(|w| **w != 0.0).count(),
        valid: valid_m,
        test: test_m,
    };
    write_json(&dir.join("metrics.json"), &result)?;
    write_json(&dir.join("model.json"), &model)?;
    write_predictions(&dir.join("predictions.csv"), &test_keys, &test_p)?;
    t.output(&dir);
    Ok(())
}

const COMPARE_HEADER: [&str; 14] = [
    "model",
    "test_set",
    "n",
    "auc",
    "recall",
    "precision",
    "fbeta",
    "fraud_accuracy",
    "normal_accuracy",
    "threshold",
    "tp",
    "fp",
    "tn",
    "fn",
];

fn compare_row(name: &str, test_set: &str, m: &Metrics) -> Vec<String> {
    let opt = m.auc.map(|a| a.to_string()).unwrap_or_default();
    vec![
        name.to_string(),
        test_set.to_string(),
        (m.tp + m.fp + m.tn + m.fn_).to_string(),
        opt,
        m.recall.to_string(),
        m.precision.to_string(),
        m.fbeta.to_string(),
        m.fraud_accuracy.to_string(),
        m.normal_accuracy.to_string(),
        m.threshold.to_string(),
        m.tp.to_string(),
        m.fp.to_string(),
        m.tn.to_string(),
        m.fn_.to_string(),
    ]
}

fn compare(cfg: &RunConfig, layout: &Layout, t: &mut Tracker) -> Result<()> {
    let cnn_path = layout.dir("eval").join("metrics.json");
    require(&cnn_path, "run eval first")?;
    let base_path = layout.dir("baseline").join("metrics.json");
    require(&base_path, "run baseline first")?;
    t.input(&cnn_path);
    t.input(&base_path);
    let cnn: Metrics = read_json(&cnn_path)?;
    let base: BaselineResult = read_json(&base_path)?;
    let mut rows = vec![
        compare_row("cnn", "company_split", &cnn),
        compare_row("l1_logistic", &base.test_set, &base.test),
    ];
    if !cfg.paths.external.is_empty() {
        let test = load_split(layout, "test", t)?;
        let thr: Option<ThresholdChoice> = read_json(&layout.threshold()).ok();
        for ext in &cfg.paths.external {
            require(&ext.path, "check paths.external")?;
            t.input(&ext.path);
            let preds = load_external_predictions(&ext.path)?;
            let mut p = Vec::with_capacity(test.len());
            for s in &test.samples {
                let key = RowKey::new(s.id.clone(), test.target_year);
                p.push(
                    *preds
                        .get(&key)
                        .ok_or_else(|| Error::invalid(format!("{} has no prediction for {key}", ext.path.display())))?,
                );
            }
            let threshold = thr.as_ref().map_or(0.5, |c| c.threshold);
            let m = classification_metrics(&p, &test.labels(), threshold, cfg.beta)?;
            rows.push(compare_row(&ext.name, "company_split", &m));
        }
    }
    let dir = layout.dir("compare");
    mkdir(&dir)?;
    let path = dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(COMPARE_HEADER)?;
    for r in &rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    t.output(&dir);
    Ok(())
}

/// Tests in `tests/` read these back.
pub fn read_metrics(path: &Path) -> Result<Metrics> {
    read_json(path)
}

pub fn read_baseline(path: &Path) -> Result<BaselineResult> {
    read_json(path)
}

pub fn read_localization(path: &Path) -> Result<Localization> {
    read_json(path)
}

/// Company ids of every real sample across the prepared splits.
pub fn prepared_companies(layout: &Layout) -> Result<BTreeMap<String, u8>> {
    let mut out = BTreeMap::new();
    for name in ["train", "valid", "test"] {
        for s in ImageSet::load(&layout.split(name))?
            .samples
            .into_iter()
            .filter(|s| !s.synthetic)
        {
            out.insert(s.id, s.label);
        }
    }
    Ok(out)
}
