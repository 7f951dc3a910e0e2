//! Seeded synthetic panels with planted signal and ground truth.
//!
//! Every company draws i.i.d. standard-normal continuous values and uniform
//! categorical codes. All companies carry persistent per-company offsets
//! ("bands") on a fixed set of continuous columns, so bands never separate
//! the classes. Fraud companies additionally get a block pattern over the
//! last few pre-target years on a contiguous run of financial columns; gray
//! companies get the same pattern at half strength but keep a normal label.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{
    derive_labels, write_violations_csv, FeatureKind, IndicatorSchema, Level1, PanelDataset, Row, RowKey,
};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Adds `+strength` to every block cell.
    Additive,
    /// Adds `strength * s * (-1)^(t + j)` with a random sign `s` per
    /// company, so the class means agree and only local structure differs.
    Checkerboard,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_companies: usize,
    /// Years including the target (last) year.
    pub n_years: usize,
    pub start_year: i32,
    pub f_fin: usize,
    pub f_esg: usize,
    pub f_ic: usize,
    /// Level-2 group counts for the financial, ESG and internal-control
    /// blocks.
    pub groups: [usize; 3],
    pub fraud_rate: f64,
    pub band_strength: f64,
    pub n_band_columns: usize,
    pub cluster_strength: f64,
    pub pattern: Pattern,
    /// Pre-target years covered by a planted block (counted back from the
    /// year before the target).
    pub block_years: usize,
    /// Inclusive range of planted block widths, in features.
    pub block_width: [usize; 2],
    /// Every company has at least this many pre-target years.
    pub min_history: usize,
    pub missing_rate: f64,
    pub gray_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_companies: 1436,
            n_years: 13,
            start_year: 2010,
            f_fin: 180,
            f_esg: 40,
            f_ic: 63,
            groups: [10, 3, 6],
            fraud_rate: 0.048,
            band_strength: 1.0,
            n_band_columns: 12,
            cluster_strength: 3.0,
            pattern: Pattern::Additive,
            block_years: 3,
            block_width: [48, 96],
            min_history: 6,
            missing_rate: 0.02,
            gray_rate: 0.01,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn n_features(&self) -> usize {
        self.f_fin + self.f_esg + self.f_ic
    }

    pub fn target_year(&self) -> i32 {
        self.start_year + self.n_years as i32 - 1
    }

    pub fn n_fraud(&self) -> usize {
        (self.n_companies as f64 * self.fraud_rate).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("fraud_rate", self.fraud_rate),
            ("missing_rate", self.missing_rate),
            ("gray_rate", self.gray_rate),
        ] {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::invalid(format!("{name} = {r} outside [0, 1)")));
            }
        }
        if self.n_companies == 0 || self.n_years < 2 || self.f_fin == 0 || self.f_esg == 0 || self.f_ic == 0 {
            return Err(Error::invalid(
                "company, year and feature counts must be >= 1 (and >= 2 years)",
            ));
        }
        for (g, f) in self.groups.iter().zip([self.f_fin, self.f_esg, self.f_ic]) {
            if *g == 0 || *g > f {
                return Err(Error::invalid(format!("cannot split {f} features into {g} groups")));
            }
        }
        let pre = self.n_years - 1;
        if self.min_history == 0 || self.min_history > pre {
            return Err(Error::invalid(format!(
                "min_history {} does not fit {pre} pre-target years",
                self.min_history
            )));
        }
        if self.block_years == 0 || self.block_years > self.min_history {
            return Err(Error::invalid(format!(
                "block of {} years does not fit a {}-year minimum history",
                self.block_years, self.min_history
            )));
        }
        let [lo, hi] = self.block_width;
        if lo == 0 || lo > hi || hi > self.f_fin {
            return Err(Error::invalid(format!(
                "block widths {lo}..={hi} do not fit {} financial features",
                self.f_fin
            )));
        }
        if self.n_band_columns > self.n_features() {
            return Err(Error::invalid("more band columns than features"));
        }
        if !(self.cluster_strength >= 0.0) || !(self.band_strength >= 0.0) {
            return Err(Error::invalid("pattern strengths must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub company: String,
    /// Inclusive year range.
    pub years: (i32, i32),
    /// Canonical feature columns, end exclusive.
    pub features: (usize, usize),
    /// Ids of the first and last block features.
    pub feature_ids: (String, String),
    pub sign: f64,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub target_year: i32,
    pub pattern: Pattern,
    pub fraud: Vec<Block>,
    pub gray: Vec<Block>,
    /// Continuous columns carrying per-company bands.
    pub band_columns: Vec<usize>,
}

impl GroundTruth {
    pub fn block_for(&self, company: &str) -> Option<&Block> {
        self.fraud.iter().find(|b| b.company == company)
    }
}

pub struct SynthOutput {
    pub panel: PanelDataset,
    /// `(company, year, code)` violation records.
    pub violations: Vec<(String, i32, String)>,
    pub truth: GroundTruth,
}

fn split_even(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|i| n / parts + (i < n % parts) as usize).collect()
}

/// Schema with financial features all continuous and ESG / internal
/// control features alternating continuous and categorical.
pub fn synth_schema(cfg: &SynthConfig) -> Result<IndicatorSchema> {
    let mut listing = Vec::new();
    let blocks = [
        (Level1::Financial, "fin", "F", cfg.f_fin, cfg.groups[0]),
        (Level1::Esg, "esg", "E", cfg.f_esg, cfg.groups[1]),
        (Level1::InternalControl, "ic", "I", cfg.f_ic, cfg.groups[2]),
    ];
    for (l1, prefix, gp, n, g) in blocks {
        let mut i = 0;
        for (gi, size) in split_even(n, g).into_iter().enumerate() {
            for _ in 0..size {
                let kind = if l1 == Level1::Financial || i % 2 == 0 {
                    FeatureKind::Continuous
                } else {
                    FeatureKind::Categorical
                };
                listing.push((format!("{prefix}_{i:03}"), l1, format!("{gp}{:02}", gi + 1), kind));
                i += 1;
            }
        }
    }
    IndicatorSchema::from_listing(listing)
}

fn pattern_value(p: Pattern, strength: f64, sign: f64, t: usize, j: usize) -> f64 {
    match p {
        Pattern::Additive => strength,
        Pattern::Checkerboard => strength * sign * if (t + j) % 2 == 0 { 1.0 } else { -1.0 },
    }
}

fn draw_block(cfg: &SynthConfig, schema: &IndicatorSchema, company: &str, strength: f64, r: &mut impl Rng) -> Block {
    let t = cfg.target_year();
    let width = r.random_range(cfg.block_width[0]..=cfg.block_width[1]);
    let f0 = r.random_range(0..=cfg.f_fin - width);
    let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
    Block {
        company: company.to_string(),
        years: (t - cfg.block_years as i32, t - 1),
        features: (f0, f0 + width),
        feature_ids: (
            schema.entries()[f0].id.clone(),
            schema.entries()[f0 + width - 1].id.clone(),
        ),
        sign,
        strength,
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let schema = synth_schema(cfg)?;
    let f = schema.len();
    let kinds: Vec<FeatureKind> = schema.entries().iter().map(|e| e.kind).collect();
    let continuous: Vec<usize> = (0..f).filter(|&j| kinds[j] == FeatureKind::Continuous).collect();

    let mut sel = rng::stream(cfg.seed, &[rng::TAG_SYNTH, 0]);
    let mut band_columns: Vec<usize> = sample(&mut sel, continuous.len(), cfg.n_band_columns)
        .into_iter()
        .map(|i| continuous[i])
        .collect();
    band_columns.sort_unstable();
    let n = cfg.n_companies;
    let ids: Vec<String> = (0..n).map(|i| format!("C{:05}", i + 1)).collect();
    let n_fraud = cfg.n_fraud().min(n);
    let mut order: Vec<usize> = sample(&mut sel, n, n).into_vec();
    let fraud_idx: Vec<usize> = order.drain(..n_fraud).collect();
    let n_gray = ((n - n_fraud) as f64 * cfg.gray_rate).round() as usize;
    let gray_idx: Vec<usize> = order.drain(..n_gray.min(order.len())).collect();

    let target = cfg.target_year();
    let pre = cfg.n_years - 1;
    let mut fraud_blocks = Vec::new();
    let mut gray_blocks = Vec::new();
    let mut rows = BTreeMap::new();
    let mut violations = Vec::new();
    let normal = StandardNormal;

    for (ci, id) in ids.iter().enumerate() {
        let mut r = rng::stream(cfg.seed, &[rng::TAG_SYNTH, 1, ci as u64]);
        let history = r.random_range(cfg.min_history..=pre);
        let first = target - history as i32;
        let bands: Vec<f64> = band_columns
            .iter()
            .map(|_| cfg.band_strength * Distribution::<f64>::sample(&normal, &mut r))
            .collect();
        let block = if fraud_idx.contains(&ci) {
            let b = draw_block(cfg, &schema, id, cfg.cluster_strength, &mut r);
            violations.push((id.clone(), target, "P2501".to_string()));
            for y in b.years.0..=b.years.1 {
                violations.push((id.clone(), y, "P2501".to_string()));
            }
            fraud_blocks.push(b.clone());
            Some(b)
        } else if gray_idx.contains(&ci) {
            let b = draw_block(cfg, &schema, id, 0.5 * cfg.cluster_strength, &mut r);
            gray_blocks.push(b.clone());
            Some(b)
        } else {
            None
        };
        for year in first..=target {
            let mut values: Vec<f64> = kinds
                .iter()
                .map(|k| match k {
                    FeatureKind::Continuous => Distribution::<f64>::sample(&normal, &mut r),
                    FeatureKind::Categorical => r.random_range(0..3) as f64,
                })
                .collect();
            for (c, b) in band_columns.iter().zip(&bands) {
                values[*c] += b;
            }
            if let Some(b) = &block {
                if (b.years.0..=b.years.1).contains(&year) {
                    let t = (year - b.years.0) as usize;
                    for j in b.features.0..b.features.1 {
                        values[j] += pattern_value(cfg.pattern, b.strength, b.sign, t, j);
                    }
                }
            }
            let missing: Vec<bool> = (0..f).map(|_| r.random::<f64>() < cfg.missing_rate).collect();
            for (v, m) in values.iter_mut().zip(&missing) {
                if *m {
                    *v = f64::NAN;
                }
            }
            rows.insert(RowKey::new(id.clone(), year), Row { values, missing });
        }
    }
    let mut panel = PanelDataset::new(schema, rows)?;
    let (labels, _) = derive_labels(&violations);
    panel.attach_labels(labels);
    let truth = GroundTruth {
        target_year: target,
        pattern: cfg.pattern,
        fraud: fraud_blocks,
        gray: gray_blocks,
        band_columns,
    };
    Ok(SynthOutput {
        panel,
        violations,
        truth,
    })
}

/// Writes `panel.csv`, `schema.csv`, `violations.csv` and
/// `ground_truth.json` into `dir`.
pub fn write_output(out: &SynthOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.panel.write_csv(&dir.join("panel.csv"))?;
    out.panel.schema().write_csv(&dir.join("schema.csv"))?;
    write_violations_csv(&dir.join("violations.csv"), &out.violations)?;
    let gt = dir.join("ground_truth.json");
    fs::write(&gt, serde_json::to_vec_pretty(&out.truth)?).map_err(|e| Error::io(&gt, e))
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruth> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_companies: 60,
            n_years: 9,
            f_fin: 20,
            f_esg: 6,
            f_ic: 6,
            groups: [2, 2, 2],
            fraud_rate: 0.1,
            block_width: [4, 8],
            n_band_columns: 3,
            min_history: 5,
            gray_rate: 0.05,
            seed: 3,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn default_fraud_count() {
        let cfg = SynthConfig::default();
        assert_eq!(cfg.n_fraud(), 69);
        assert_eq!(cfg.n_features(), 283);
        assert_eq!(cfg.target_year(), 2022);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate_synthetic(&small()).unwrap();
        let b = generate_synthetic(&small()).unwrap();
        assert_eq!(a.truth, b.truth);
        // NaN != NaN, so compare the masks and the observed values.
        for ((ka, ra), (kb, rb)) in a.panel.rows().iter().zip(b.panel.rows()) {
            assert_eq!(ka, kb);
            assert_eq!(ra.missing, rb.missing);
            for (x, y) in ra.values.iter().zip(&rb.values) {
                assert!(x.to_bits() == y.to_bits());
            }
        }
        let c = generate_synthetic(&SynthConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a.truth, c.truth);
    }

    #[test]
    fn no_missing_when_rate_zero() {
        let out = generate_synthetic(&SynthConfig {
            missing_rate: 0.0,
            ..small()
        })
        .unwrap();
        assert_eq!(out.panel.missing_count(), 0);
    }

    #[test]
    fn blocks_are_in_bounds_and_labelled() {
        let cfg = small();
        let out = generate_synthetic(&cfg).unwrap();
        assert_eq!(out.truth.fraud.len(), 6);
        let t = cfg.target_year();
        for b in out.truth.fraud.iter().chain(&out.truth.gray) {
            assert!(b.features.1 <= cfg.f_fin);
            assert!((cfg.block_width[0]..=cfg.block_width[1]).contains(&(b.features.1 - b.features.0)));
            assert_eq!(b.years, (t - 3, t - 1));
            for y in b.years.0..=b.years.1 {
                assert!(out.panel.row(&RowKey::new(b.company.clone(), y)).is_some());
            }
        }
        for b in &out.truth.fraud {
            assert!(out.panel.is_fraud(&RowKey::new(b.company.clone(), t)));
        }
        for b in &out.truth.gray {
            assert!(!out.panel.is_fraud(&RowKey::new(b.company.clone(), t)));
        }
        let fraud_at_target = out
            .panel
            .companies()
            .iter()
            .filter(|c| out.panel.is_fraud(&RowKey::new((*c).clone(), t)))
            .count();
        assert_eq!(fraud_at_target, 6);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(24))]
        #[test]
        fn planted_regions_stay_in_bounds(
            seed in 0u64..10_000,
            fraud_rate in 0.05f64..0.5,
            lo in 1usize..10,
            span in 0usize..10,
            n_band_columns in 0usize..8,
            checkerboard in proptest::bool::ANY,
        ) {
            let cfg = SynthConfig {
                seed,
                fraud_rate,
                block_width: [lo, lo + span],
                n_band_columns,
                pattern: if checkerboard { Pattern::Checkerboard } else { Pattern::Additive },
                ..small()
            };
            let out = generate_synthetic(&cfg).unwrap();
            let schema = out.panel.schema();
            proptest::prop_assert_eq!(out.truth.fraud.len(), cfg.n_fraud());
            for b in out.truth.fraud.iter().chain(&out.truth.gray) {
                proptest::prop_assert!(b.features.0 < b.features.1 && b.features.1 <= cfg.f_fin);
                proptest::prop_assert!(b.years.0 >= cfg.start_year && b.years.1 < cfg.target_year());
                proptest::prop_assert_eq!(schema.index_of(&b.feature_ids.0), Some(b.features.0));
                proptest::prop_assert_eq!(schema.index_of(&b.feature_ids.1), Some(b.features.1 - 1));
            }
            proptest::prop_assert_eq!(out.truth.band_columns.len(), n_band_columns);
            for &c in &out.truth.band_columns {
                proptest::prop_assert_eq!(schema.entries()[c].kind, FeatureKind::Continuous);
            }
        }
    }

    #[test]
    fn every_company_has_enough_history() {
        let cfg = small();
        let out = generate_synthetic(&cfg).unwrap();
        for c in out.panel.companies() {
            let pre = out
                .panel
                .company_rows(&c)
                .filter(|(k, _)| k.year < cfg.target_year())
                .count();
            assert!(pre >= cfg.min_history);
        }
    }

    #[test]
    fn oversized_windows_rejected() {
        assert!(generate_synthetic(&SynthConfig {
            block_width: [4, 30],
            ..small()
        })
        .is_err());
        assert!(generate_synthetic(&SynthConfig {
            min_history: 9,
            ..small()
        })
        .is_err());
        assert!(generate_synthetic(&SynthConfig {
            block_years: 6,
            ..small()
        })
        .is_err());
        assert!(generate_synthetic(&SynthConfig {
            fraud_rate: 1.0,
            ..small()
        })
        .is_err());
    }

    #[test]
    fn schema_layout() {
        let s = synth_schema(&SynthConfig::default()).unwrap();
        assert_eq!(s.len(), 283);
        assert!(s.is_canonical());
        assert_eq!(s.level2_groups().len(), 19);
        assert!(s.entries()[..180].iter().all(|e| e.kind == FeatureKind::Continuous));
    }

    #[test]
    fn written_files_load_back() {
        let out = generate_synthetic(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_output(&out, dir.path()).unwrap();
        let panel = crate::data::load_panel_csv(&dir.path().join("panel.csv"), &dir.path().join("schema.csv")).unwrap();
        assert_eq!(panel.len(), out.panel.len());
        assert_eq!(panel.missing_count(), out.panel.missing_count());
        assert_eq!(
            load_ground_truth(&dir.path().join("ground_truth.json")).unwrap(),
            out.truth
        );
    }
}
