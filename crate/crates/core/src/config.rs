//! Run configuration: strict JSON layered over named presets.
//!
//! Resolution order is built-in defaults, then the preset, then the config
//! file, then command-line overrides. Objects merge key by key; any key the
//! defaults do not know is rejected with its full dotted path.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::baseline::YearRange;
use crate::error::{Error, Result};
use crate::explain::Palette;
use crate::features::Mode;
use crate::metrics::ThresholdPolicy;
use crate::synth::SynthConfig;

pub const DEFAULT_PRESET: &str = "exante-paper";
pub const PRESETS: [&str; 3] = ["exante-paper", "expost-paper", "initial-paper"];

/// Values replaced wholesale rather than merged key by key.
const ATOMIC: [&str; 1] = ["threshold"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalModel {
    pub name: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Panel CSV; `None` means the synth output under the output dir.
    pub data: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    pub violations: Option<PathBuf>,
    /// Synthetic ground truth used for localization statistics.
    pub ground_truth: Option<PathBuf>,
    pub output: PathBuf,
    /// Prediction files (`company_id,year,prob`) joined into the comparison.
    pub external: Vec<ExternalModel>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            data: None,
            schema: None,
            violations: None,
            ground_truth: None,
            output: PathBuf::from("out"),
            external: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareConfig {
    pub mode: Mode,
    /// `None` means the last year in the panel.
    pub target_year: Option<i32>,
    pub min_years: usize,
    pub sparse_threshold: f64,
    pub impute_k: usize,
    pub gray_filter: bool,
    pub gray_n_trees: usize,
    /// `None` means `min(256, N)`.
    pub gray_psi: Option<usize>,
    pub gray_quantile: f64,
    /// Score gray rows on the standardised panel instead of the raw one.
    pub gray_after_zscore: bool,
    /// Fit z-score statistics on training companies only.
    pub zscore_train_only: bool,
    pub smote: bool,
    pub smote_k: usize,
    /// Balance the whole image set before splitting.
    pub smote_before_split: bool,
    pub split_ratios: [f64; 3],
    pub stratified: bool,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            mode: Mode::ExAnte,
            target_year: None,
            min_years: 6,
            sparse_threshold: 0.30,
            impute_k: 5,
            gray_filter: true,
            gray_n_trees: 100,
            gray_psi: None,
            gray_quantile: 0.05,
            gray_after_zscore: false,
            zscore_train_only: false,
            smote: true,
            smote_k: 5,
            smote_before_split: false,
            split_ratios: [0.70, 0.15, 0.15],
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub channels: [usize; 2],
    pub dense_hidden: usize,
    pub conv_dropout: f64,
    pub dense_dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            channels: [32, 64],
            dense_hidden: 128,
            conv_dropout: 0.25,
            dense_dropout: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            lr: 0.01,
            epochs: 5,
            batch_size: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineProtocol {
    /// Flattened images with the CNN's company split.
    Flattened,
    /// One row per (company, year) with year-range splits.
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineSection {
    pub protocol: BaselineProtocol,
    /// Penalty balance used when `c_grid` is empty.
    pub c: f64,
    /// Candidate values of C; the one with the best validation AUC wins
    /// (ties go to the smaller C).
    pub c_grid: Vec<f64>,
    pub max_iters: usize,
    pub tol: f64,
    pub threshold: f64,
    pub train_years: YearRange,
    pub valid_years: YearRange,
    pub test_years: YearRange,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection {
            protocol: BaselineProtocol::Flattened,
            c: 1.0,
            c_grid: vec![1.0, 10.0, 100.0, 1000.0],
            max_iters: 2000,
            tol: 1e-7,
            threshold: 0.35,
            train_years: (2010, 2017),
            valid_years: (2018, 2019),
            test_years: (2020, 2021),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainSection {
    /// Companies to explain; empty means every fraud company in the test
    /// split.
    pub companies: Vec<String>,
    pub scale: usize,
    pub palette: Palette,
    /// 1-based convolutions rendered as representation grids.
    pub layers: Vec<usize>,
}

impl Default for ExplainSection {
    fn default() -> Self {
        ExplainSection {
            companies: Vec::new(),
            scale: 4,
            palette: Palette::Gray,
            layers: vec![1, 4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub prepare: PrepareConfig,
    pub model: ModelSection,
    pub train: TrainSection,
    pub threshold: ThresholdPolicy,
    pub beta: f64,
    pub baseline: BaselineSection,
    pub explain: ExplainSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            preset: DEFAULT_PRESET.to_string(),
            seed: 0,
            paths: Paths::default(),
            synth: SynthConfig::default(),
            prepare: PrepareConfig::default(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            threshold: ThresholdPolicy::MaxF2,
            beta: 2.0,
            baseline: BaselineSection::default(),
            explain: ExplainSection::default(),
        }
    }
}

/// Overrides applied by a named preset.
pub fn preset(name: &str) -> Result<Value> {
    Ok(match name {
        "exante-paper" => json!({
            "prepare": {"mode": "ex_ante"},
            "train": {"lr": 0.0005, "epochs": 8, "batch_size": 64},
            "threshold": {"policy": "manual", "value": 0.75}
        }),
        "expost-paper" => json!({
            "prepare": {"mode": "ex_post"},
            "train": {"lr": 0.001, "epochs": 6, "batch_size": 32},
            "threshold": {"policy": "manual", "value": 0.45}
        }),
        "initial-paper" => json!({
            "train": {"lr": 0.01, "epochs": 5, "batch_size": 64},
            "threshold": {"policy": "max_f2"}
        }),
        other => {
            return Err(Error::invalid(format!(
                "unknown preset `{other}` (expected one of {})",
                PRESETS.join(", ")
            )))
        }
    })
}

fn check_keys(user: &Value, reference: &Value, path: &str) -> Result<()> {
    let (Value::Object(u), Value::Object(r)) = (user, reference) else {
        return Ok(());
    };
    for (k, v) in u {
        let full = if path.is_empty() {
            k.clone()
        } else {
            format!("{path}.{k}")
        };
        match r.get(k) {
            None => return Err(Error::invalid(format!("unknown config key `{full}`"))),
            Some(rv) if !ATOMIC.contains(&full.as_str()) => check_keys(v, rv, &full)?,
            Some(_) => {}
        }
    }
    Ok(())
}

fn merge(base: &mut Value, over: &Value, path: &str) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) if !ATOMIC.contains(&path) => {
            for (k, v) in o {
                let full = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v, &full),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

/// Command-line overrides.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

/// Resolves a config from an optional JSON document.
pub fn resolve(user: Option<&Value>, ov: &Overrides) -> Result<RunConfig> {
    let defaults = serde_json::to_value(RunConfig::default())?;
    let empty = Value::Object(Map::new());
    let user = user.unwrap_or(&empty);
    if !user.is_object() {
        return Err(Error::invalid("config must be a JSON object"));
    }
    check_keys(user, &defaults, "")?;
    let name = match (&ov.preset, user.get("preset")) {
        (Some(p), _) => p.clone(),
        (None, Some(Value::String(p))) => p.clone(),
        (None, Some(other)) => return Err(Error::invalid(format!("preset must be a string, got {other}"))),
        (None, None) => DEFAULT_PRESET.to_string(),
    };
    let mut v = defaults;
    merge(&mut v, &preset(&name)?, "");
    merge(&mut v, user, "");
    v["preset"] = Value::String(name);
    if let Some(s) = ov.seed {
        v["seed"] = json!(s);
    }
    if let Some(o) = &ov.output {
        v["paths"]["output"] = json!(o);
    }
    let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::invalid(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads and resolves a config file; `None` resolves defaults only.
pub fn parse_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    match path {
        None => resolve(None, ov),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let v: Value = serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", p.display())))?;
            resolve(Some(&v), ov)
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let p = &self.prepare;
        if !(0.0..=1.0).contains(&p.sparse_threshold) {
            return Err(Error::invalid("prepare.sparse_threshold must be in [0, 1]"));
        }
        if p.impute_k == 0 || p.smote_k == 0 || p.min_years == 0 {
            return Err(Error::invalid("prepare.impute_k, smote_k and min_years must be >= 1"));
        }
        if p.gray_filter && !(p.gray_quantile > 0.0 && p.gray_quantile < 1.0) {
            return Err(Error::invalid("prepare.gray_quantile must be in (0, 1)"));
        }
        if p.smote_before_split && p.zscore_train_only {
            return Err(Error::invalid(
                "prepare.smote_before_split and prepare.zscore_train_only cannot be combined",
            ));
        }
        if !(self.train.lr > 0.0) || self.train.batch_size == 0 {
            return Err(Error::invalid("train.lr and train.batch_size must be positive"));
        }
        if let ThresholdPolicy::Manual { value } = self.threshold {
            if !(0.0..=1.0).contains(&value) {
                return Err(Error::invalid("threshold.value must be in [0, 1]"));
            }
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid("beta must be positive"));
        }
        if self.explain.scale == 0 {
            return Err(Error::invalid("explain.scale must be >= 1"));
        }
        if self
            .baseline
            .c_grid
            .iter()
            .chain([&self.baseline.c])
            .any(|c| !(*c >= 0.0))
            || !(0.0..=1.0).contains(&self.baseline.threshold)
        {
            return Err(Error::invalid(
                "baseline.c must be >= 0 and baseline.threshold in [0, 1]",
            ));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of everything except the output dir,
    /// so identical runs in different directories share a hash.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serialises");
        v["paths"]["output"] = Value::Null;
        hex::encode(Sha256::digest(v.to_string().as_bytes()))
    }

    pub fn output(&self) -> &Path {
        &self.paths.output
    }

    pub fn write_resolved(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from(v: Value) -> Result<RunConfig> {
        resolve(Some(&v), &Overrides::default())
    }

    #[test]
    fn empty_config_is_exante_preset() {
        let c = from(json!({})).unwrap();
        assert_eq!(c.preset, "exante-paper");
        assert_eq!(c.prepare.mode, Mode::ExAnte);
        assert_eq!((c.train.lr, c.train.epochs, c.train.batch_size), (0.0005, 8, 64));
        assert_eq!(c.threshold, ThresholdPolicy::Manual { value: 0.75 });
    }

    #[test]
    fn expost_and_initial_presets() {
        let c = from(json!({"preset": "expost-paper"})).unwrap();
        assert_eq!(c.prepare.mode, Mode::ExPost);
        assert_eq!((c.train.lr, c.train.epochs, c.train.batch_size), (0.001, 6, 32));
        assert_eq!(c.threshold, ThresholdPolicy::Manual { value: 0.45 });
        let c = from(json!({"preset": "initial-paper"})).unwrap();
        assert_eq!((c.train.lr, c.train.epochs, c.train.batch_size), (0.01, 5, 64));
        assert_eq!(c.threshold, ThresholdPolicy::MaxF2);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = from(json!({"train": {"learnig_rate": 0.1}})).unwrap_err().to_string();
        assert!(e.contains("train.learnig_rate"), "{e}");
        let e = from(json!({"learnig_rate": 0.1})).unwrap_err().to_string();
        assert!(e.contains("learnig_rate"), "{e}");
    }

    #[test]
    fn explicit_values_override_preset() {
        let c = from(json!({"train": {"lr": 0.01}})).unwrap();
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.train.epochs, 8);
        let c = from(json!({"threshold": {"policy": "max_f2"}})).unwrap();
        assert_eq!(c.threshold, ThresholdPolicy::MaxF2);
    }

    #[test]
    fn type_mismatch_and_bad_preset_rejected() {
        assert!(from(json!({"train": {"epochs": "eight"}})).is_err());
        assert!(from(json!({"preset": "nope"})).is_err());
        assert!(from(json!([1, 2])).is_err());
    }

    #[test]
    fn cli_overrides_win() {
        let ov = Overrides {
            preset: Some("expost-paper".into()),
            seed: Some(9),
            output: Some("elsewhere".into()),
        };
        let c = resolve(Some(&json!({"seed": 1, "preset": "exante-paper"})), &ov).unwrap();
        assert_eq!(c.preset, "expost-paper");
        assert_eq!(c.seed, 9);
        assert_eq!(c.paths.output, PathBuf::from("elsewhere"));
    }

    #[test]
    fn hash_ignores_output_dir() {
        let a = resolve(
            None,
            &Overrides {
                output: Some("a".into()),
                ..Default::default()
            },
        )
        .unwrap();
        let b = resolve(
            None,
            &Overrides {
                output: Some("b".into()),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.hash(), b.hash());
        let c = resolve(
            None,
            &Overrides {
                seed: Some(1),
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn resolved_config_round_trips_through_strict_parsing() {
        let c = from(json!({"synth": {"n_companies": 50}})).unwrap();
        let back = from(serde_json::to_value(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
