//! Missing-value handling, standardisation, the panel to image transform and
//! SMOTE balancing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{FeatureKind, IndicatorSchema, PanelDataset, Row, RowKey};
use crate::error::{Error, Result};
use crate::rng;

/// Drops every feature whose missing fraction over all rows exceeds
/// `threshold`.
pub fn drop_sparse_features(ds: &PanelDataset, threshold: f64) -> Result<PanelDataset> {
    let n = ds.len().max(1) as f64;
    let f = ds.n_features();
    let mut miss = vec![0usize; f];
    for r in ds.rows().values() {
        for (j, &m) in r.missing.iter().enumerate() {
            miss[j] += m as usize;
        }
    }
    let keep: Vec<usize> = (0..f).filter(|&j| miss[j] as f64 / n <= threshold).collect();
    if keep.is_empty() {
        return Err(Error::invalid(format!(
            "every feature exceeds the {threshold} missing-value threshold"
        )));
    }
    ds.select_features(&keep)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ImputeReport {
    pub interpolated: usize,
    pub knn_filled: usize,
    /// Rows with every feature missing.
    pub empty_rows_dropped: usize,
    /// Companies with a continuous feature missing in every year.
    pub companies_dropped: Vec<String>,
}

/// Fills missing cells.
///
/// Continuous features are interpolated linearly along each company's years
/// (by year distance) and extended flat past the first/last observation.
/// Categorical features take the majority code among the `k` nearest rows
/// that observe them, nearest by Euclidean distance over the continuous
/// features, same-company rows ranked ahead of others. Rows with nothing
/// observed are deleted, as are companies that never observe some
/// continuous feature.
pub fn impute_missing(ds: &PanelDataset, k: usize) -> Result<(PanelDataset, ImputeReport)> {
    if k < 1 {
        return Err(Error::invalid("imputation k must be >= 1"));
    }
    let schema = ds.schema();
    let cont: Vec<usize> = (0..schema.len())
        .filter(|&j| schema.entries()[j].kind == FeatureKind::Continuous)
        .collect();
    let cat: Vec<usize> = (0..schema.len())
        .filter(|&j| schema.entries()[j].kind == FeatureKind::Categorical)
        .collect();
    let mut report = ImputeReport::default();

    let mut rows: BTreeMap<RowKey, Row> = BTreeMap::new();
    for company in ds.companies() {
        let mut series: Vec<(RowKey, Row)> = ds
            .company_rows(&company)
            .filter(|(_, r)| !r.all_missing())
            .map(|(k, r)| (k.clone(), r.clone()))
            .collect();
        report.empty_rows_dropped += ds.company_rows(&company).count() - series.len();
        if series.is_empty() {
            continue;
        }
        let mut ok = true;
        for &j in &cont {
            let obs: Vec<(f64, f64)> = series
                .iter()
                .filter(|(_, r)| !r.missing[j])
                .map(|(k, r)| (k.year as f64, r.values[j]))
                .collect();
            if obs.is_empty() {
                ok = false;
                break;
            }
            for (key, row) in series.iter_mut() {
                if row.missing[j] {
                    row.values[j] = interpolate(&obs, key.year as f64);
                    row.missing[j] = false;
                    report.interpolated += 1;
                }
            }
        }
        if !ok {
            report.companies_dropped.push(company);
            continue;
        }
        rows.extend(series);
    }

    if !cat.is_empty() {
        let keys: Vec<RowKey> = rows.keys().cloned().collect();
        let snapshot: Vec<Row> = rows.values().cloned().collect();
        let mut fills: Vec<(usize, usize, f64)> = Vec::new();
        for (i, row) in snapshot.iter().enumerate() {
            for &j in &cat {
                if !row.missing[j] {
                    continue;
                }
                let code = knn_vote(&keys, &snapshot, &cont, i, j, k).ok_or_else(|| {
                    Error::invalid(format!(
                        "categorical `{}` is never observed; cannot impute",
                        schema.entries()[j].id
                    ))
                })?;
                fills.push((i, j, code));
            }
        }
        report.knn_filled = fills.len();
        let mut rows_vec = snapshot;
        for (i, j, v) in fills {
            rows_vec[i].values[j] = v;
            rows_vec[i].missing[j] = false;
        }
        rows = keys.into_iter().zip(rows_vec).collect();
    }
    Ok((ds.replace_rows(rows), report))
}

fn interpolate(obs: &[(f64, f64)], t: f64) -> f64 {
    if t <= obs[0].0 {
        return obs[0].1;
    }
    let last = obs[obs.len() - 1];
    if t >= last.0 {
        return last.1;
    }
    let hi = obs.partition_point(|&(x, _)| x < t);
    let (x0, y0) = obs[hi - 1];
    let (x1, y1) = obs[hi];
    y0 + (y1 - y0) * (t - x0) / (x1 - x0)
}

fn knn_vote(keys: &[RowKey], rows: &[Row], cont: &[usize], target: usize, feature: usize, k: usize) -> Option<f64> {
    let dist = |a: &Row, b: &Row| -> f64 {
        cont.iter()
            .map(|&j| (a.values[j] - b.values[j]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let me = &rows[target];
    let company = &keys[target].company;
    // (other_company, distance, index)
    let mut cands: Vec<(bool, f64, usize)> = keys
        .iter()
        .enumerate()
        .filter(|&(i, key)| i != target && &key.company == company && !rows[i].missing[feature])
        .map(|(i, _)| (false, dist(me, &rows[i]), i))
        .collect();
    if cands.len() < k {
        cands.extend(
            keys.iter()
                .enumerate()
                .filter(|&(i, key)| &key.company != company && !rows[i].missing[feature])
                .map(|(i, _)| (true, dist(me, &rows[i]), i)),
        );
    }
    if cands.is_empty() {
        return None;
    }
    cands.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    Some(majority(cands.iter().take(k).map(|&(_, _, i)| rows[i].values[feature])))
}

/// Most frequent value; ties go to the smallest.
pub fn majority(codes: impl Iterator<Item = f64>) -> f64 {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for c in codes {
        *counts.entry(c.round() as i64).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    counts
        .into_iter()
        .find(|&(_, n)| n == best)
        .map(|(c, _)| c as f64)
        .unwrap_or(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZScaler {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl ZScaler {
    /// Population mean and standard deviation per feature over `rows`.
    pub fn fit<'a>(rows: impl Iterator<Item = &'a Row>, n_features: usize) -> Result<Self> {
        let mut sum = vec![0.0; n_features];
        let mut n = 0usize;
        let collected: Vec<&Row> = rows.collect();
        for r in &collected {
            if r.missing.iter().any(|&m| m) {
                return Err(Error::invalid("standardisation input has missing values"));
            }
            for (s, v) in sum.iter_mut().zip(&r.values) {
                *s += v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::invalid("no rows to standardise"));
        }
        let mu: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut ss = vec![0.0; n_features];
        for r in &collected {
            for ((acc, v), m) in ss.iter_mut().zip(&r.values).zip(&mu) {
                *acc += (v - m).powi(2);
            }
        }
        let sigma = ss.iter().map(|s| (s / n as f64).sqrt()).collect();
        Ok(ZScaler { mu, sigma })
    }

    pub fn transform(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .zip(self.mu.iter().zip(&self.sigma))
            .map(|(x, (m, s))| if *s > 0.0 { (x - m) / s } else { 0.0 })
            .collect()
    }

    pub fn apply(&self, ds: &PanelDataset) -> PanelDataset {
        ds.map_rows(|_, r| Row {
            values: self.transform(&r.values),
            missing: r.missing.clone(),
        })
    }
}

/// Z-scores every feature using statistics over all rows.
pub fn zscore_fit_apply(ds: &PanelDataset) -> Result<(PanelDataset, ZScaler)> {
    let scaler = ZScaler::fit(ds.rows().values(), ds.n_features())?;
    Ok((scaler.apply(ds), scaler))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Classify year Y from data through Y.
    ExPost,
    /// Predict year Y from data through Y-1.
    ExAnte,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ExPost => "ex_post",
            Mode::ExAnte => "ex_ante",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Company id; SMOTE samples are named `smote:<n>`.
    pub id: String,
    /// `T x F`, row-major, row = year, column = canonical feature.
    pub pixels: Vec<f32>,
    pub label: u8,
    pub synthetic: bool,
}

/// One grayscale image per company, all of shape `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSet {
    pub samples: Vec<Sample>,
    pub mode: Mode,
    pub target_year: i32,
    /// First year of the image window (row 0).
    pub start_year: i32,
    pub height: usize,
    pub width: usize,
    pub schema: IndicatorSchema,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.samples.iter().filter(|s| s.label == 1).count();
        (self.samples.len() - pos, pos)
    }

    /// Same metadata, different samples.
    pub fn with_samples(&self, samples: Vec<Sample>) -> Self {
        ImageSet {
            samples,
            mode: self.mode,
            target_year: self.target_year,
            start_year: self.start_year,
            height: self.height,
            width: self.width,
            schema: self.schema.clone(),
        }
    }

    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn validate(&self) -> Result<()> {
        for s in &self.samples {
            if s.pixels.len() != self.height * self.width {
                return Err(Error::Shape(format!(
                    "image {} has {} pixels, expected {}x{}",
                    s.id,
                    s.pixels.len(),
                    self.height,
                    self.width
                )));
            }
            if s.pixels.iter().any(|p| !p.is_finite()) {
                return Err(Error::invalid(format!("image {} has non-finite pixels", s.id)));
            }
            if s.label > 1 {
                return Err(Error::invalid(format!("image {} has label {}", s.id, s.label)));
            }
        }
        if self.schema.len() != self.width {
            return Err(Error::Shape("schema width differs from image width".into()));
        }
        Ok(())
    }

    /// Writes `meta.json`, `schema.csv` and one little-endian f32 file per
    /// image (`img_00000.f32`, row-major).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let meta = ImageSetMeta {
            mode: self.mode,
            target_year: self.target_year,
            start_year: self.start_year,
            t: self.height,
            f: self.width,
            ids: self.samples.iter().map(|s| s.id.clone()).collect(),
            labels: self.labels(),
            synthetic: self.samples.iter().map(|s| s.synthetic).collect(),
        };
        let meta_path = dir.join("meta.json");
        fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))?;
        self.schema.write_csv(&dir.join("schema.csv"))?;
        for (i, s) in self.samples.iter().enumerate() {
            let p = dir.join(format!("img_{i:05}.f32"));
            let f = fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
            let mut w = BufWriter::new(f);
            for v in &s.pixels {
                w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&p, e))?;
            }
            w.flush().map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.json");
        let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ImageSetMeta = serde_json::from_slice(&bytes)?;
        let schema = IndicatorSchema::load_csv(&dir.join("schema.csv"))?;
        if meta.ids.len() != meta.labels.len() || meta.ids.len() != meta.synthetic.len() {
            return Err(Error::invalid(format!("{}: inconsistent lengths", meta_path.display())));
        }
        let mut samples = Vec::with_capacity(meta.ids.len());
        for (i, id) in meta.ids.iter().enumerate() {
            let p = dir.join(format!("img_{i:05}.f32"));
            let mut buf = Vec::new();
            fs::File::open(&p)
                .and_then(|mut f| f.read_to_end(&mut buf))
                .map_err(|e| Error::io(&p, e))?;
            if buf.len() != 4 * meta.t * meta.f {
                return Err(Error::Shape(format!("{}: {} bytes", p.display(), buf.len())));
            }
            let pixels = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            samples.push(Sample {
                id: id.clone(),
                pixels,
                label: meta.labels[i],
                synthetic: meta.synthetic[i],
            });
        }
        let set = ImageSet {
            samples,
            mode: meta.mode,
            target_year: meta.target_year,
            start_year: meta.start_year,
            height: meta.t,
            width: meta.f,
            schema,
        };
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageSetMeta {
    mode: Mode,
    target_year: i32,
    start_year: i32,
    t: usize,
    f: usize,
    ids: Vec<String>,
    labels: Vec<u8>,
    synthetic: Vec<bool>,
}

/// Cuts the panel into one `T x F` image per company.
///
/// The window starts at the panel's first year and ends at `target_year`
/// (ex post) or `target_year - 1` (ex ante). A company qualifies when it has
/// a row in `target_year` and at least `min_years` observed rows inside the
/// window. Years without a row become zero rows. The label is the fraud
/// status of the target-year row.
pub fn to_images(ds: &PanelDataset, mode: Mode, target_year: i32, min_years: usize) -> Result<ImageSet> {
    let schema = ds.schema();
    if !schema.is_canonical() {
        return Err(Error::Schema("dataset columns are not in canonical order".into()));
    }
    if ds.missing_count() > 0 {
        return Err(Error::invalid("image transform needs a fully imputed panel"));
    }
    let years = ds.years();
    let start_year = *years.first().ok_or_else(|| Error::invalid("empty panel"))?;
    let end_year = match mode {
        Mode::ExPost => target_year,
        Mode::ExAnte => target_year - 1,
    };
    if end_year < start_year {
        return Err(Error::invalid(format!(
            "target year {target_year} leaves an empty window starting at {start_year}"
        )));
    }
    let height = (end_year - start_year + 1) as usize;
    let width = ds.n_features();
    let mut samples = Vec::new();
    for company in ds.companies() {
        let target_key = RowKey::new(company.clone(), target_year);
        if ds.row(&target_key).is_none() {
            continue;
        }
        let mut pixels = vec![0f32; height * width];
        let mut observed = 0;
        for (k, r) in ds.company_rows(&company) {
            if k.year < start_year || k.year > end_year {
                continue;
            }
            observed += 1;
            let t = (k.year - start_year) as usize;
            for (p, v) in pixels[t * width..(t + 1) * width].iter_mut().zip(&r.values) {
                *p = *v as f32;
            }
        }
        if observed < min_years {
            continue;
        }
        samples.push(Sample {
            id: company,
            pixels,
            label: ds.is_fraud(&target_key) as u8,
            synthetic: false,
        });
    }
    if samples.is_empty() {
        return Err(Error::invalid(format!(
            "no company has a {target_year} row and at least {min_years} observed years"
        )));
    }
    Ok(ImageSet {
        samples,
        mode,
        target_year,
        start_year,
        height,
        width,
        schema: schema.clone(),
    })
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum()
}

/// `x + gap * (neighbor - x)`, clamped into the segment's bounding box so
/// rounding cannot step outside it.
pub fn interpolate_sample(x: &[f32], neighbor: &[f32], gap: f64) -> Vec<f32> {
    x.iter()
        .zip(neighbor)
        .map(|(&a, &b)| {
            let v = a as f64 + gap * (b as f64 - a as f64);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            (v as f32).clamp(lo, hi)
        })
        .collect()
}

/// Oversamples the minority class until both classes have equal counts.
///
/// Images are treated as flat `T*F` vectors. Minority samples are used as
/// bases round-robin; each synthetic sample interpolates towards one of the
/// base's `k` nearest minority neighbours with a single uniform gap in
/// [0, 1]. Originals are kept, synthetic samples appended.
pub fn smote_balance(s: &ImageSet, k: usize, seed: u64) -> Result<ImageSet> {
    let (neg, pos) = s.class_counts();
    if neg == 0 || pos == 0 {
        return Err(Error::invalid("SMOTE needs both classes present"));
    }
    let minority_label = if pos < neg { 1u8 } else { 0u8 };
    let minority: Vec<&Sample> = s.samples.iter().filter(|x| x.label == minority_label).collect();
    let needed = neg.max(pos) - neg.min(pos);
    if minority.len() <= k {
        return Err(Error::invalid(format!(
            "SMOTE needs more than k={k} minority samples, found {}",
            minority.len()
        )));
    }
    let m = minority.len();
    let neighbours: Vec<Vec<usize>> = (0..m)
        .map(|i| {
            let mut d: Vec<(f64, usize)> = (0..m)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&minority[i].pixels, &minority[j].pixels), j))
                .collect();
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().take(k).map(|(_, j)| j).collect()
        })
        .collect();
    let mut r = rng::stream(seed, &[rng::TAG_SMOTE]);
    let mut samples = s.samples.clone();
    for n in 0..needed {
        let i = n % m;
        let j = neighbours[i][r.random_range(0..k)];
        let gap: f64 = r.random_range(0.0..=1.0);
        samples.push(Sample {
            id: format!("smote:{n}"),
            pixels: interpolate_sample(&minority[i].pixels, &minority[j].pixels, gap),
            label: minority_label,
            synthetic: true,
        });
    }
    Ok(s.with_samples(samples))
}

/// Companies present in an image set, for filtering panels by split.
pub fn company_ids(s: &ImageSet) -> BTreeSet<String> {
    s.samples
        .iter()
        .filter(|x| !x.synthetic)
        .map(|x| x.id.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FraudLabel, Level1};

    fn schema(kinds: &[FeatureKind]) -> IndicatorSchema {
        IndicatorSchema::from_listing(
            kinds
                .iter()
                .enumerate()
                .map(|(i, k)| (format!("f{i}"), Level1::Financial, "g".into(), *k))
                .collect(),
        )
        .unwrap()
    }

    fn row(vals: &[Option<f64>]) -> Row {
        Row {
            values: vals.iter().map(|v| v.unwrap_or(f64::NAN)).collect(),
            missing: vals.iter().map(|v| v.is_none()).collect(),
        }
    }

    fn panel(kinds: &[FeatureKind], rows: Vec<(&str, i32, Vec<Option<f64>>)>) -> PanelDataset {
        let rows = rows.into_iter().map(|(c, y, v)| (RowKey::new(c, y), row(&v))).collect();
        PanelDataset::new(schema(kinds), rows).unwrap()
    }

    use FeatureKind::{Categorical as Cat, Continuous as Con};

    #[test]
    fn sparse_feature_dropped_above_threshold() {
        // feature 0 missing in 31 of 100 rows
        let rows = (0..100)
            .map(|i| ("C", 2000 + i, vec![if i < 31 { None } else { Some(1.0) }, Some(2.0)]))
            .collect();
        let ds = panel(&[Con, Con], rows);
        let out = drop_sparse_features(&ds, 0.30).unwrap();
        assert_eq!(out.n_features(), 1);
        assert_eq!(out.schema().entries()[0].id, "f1");
        assert_eq!(drop_sparse_features(&ds, 1.0).unwrap().n_features(), 2);
    }

    #[test]
    fn dropping_everything_is_an_error() {
        let ds = panel(&[Con], vec![("C", 2000, vec![None]), ("C", 2001, vec![None])]);
        assert!(drop_sparse_features(&ds, 0.3).is_err());
    }

    #[test]
    fn linear_interpolation_midpoint() {
        let ds = panel(
            &[Con, Con],
            vec![
                ("C", 2010, vec![Some(1.0), Some(0.0)]),
                ("C", 2011, vec![None, Some(0.0)]),
                ("C", 2012, vec![Some(3.0), Some(0.0)]),
            ],
        );
        let (out, rep) = impute_missing(&ds, 5).unwrap();
        assert_eq!(out.row(&RowKey::new("C", 2011)).unwrap().values[0], 2.0);
        assert_eq!(rep.interpolated, 1);
        assert_eq!(out.missing_count(), 0);
    }

    #[test]
    fn leading_gap_takes_nearest_observed() {
        let ds = panel(
            &[Con, Con],
            vec![
                ("C", 2010, vec![None, Some(0.0)]),
                ("C", 2011, vec![Some(5.0), Some(0.0)]),
                ("C", 2012, vec![Some(5.0), Some(0.0)]),
            ],
        );
        let (out, _) = impute_missing(&ds, 1).unwrap();
        assert_eq!(out.row(&RowKey::new("C", 2010)).unwrap().values[0], 5.0);
    }

    #[test]
    fn categorical_majority_vote() {
        // Target row at distance 0 from three donors coded 2, 2, 0 and far
        // from a fourth coded 0.
        let ds = panel(
            &[Con, Cat],
            vec![
                ("C", 2010, vec![Some(0.0), None]),
                ("C", 2011, vec![Some(0.1), Some(2.0)]),
                ("C", 2012, vec![Some(0.2), Some(2.0)]),
                ("C", 2013, vec![Some(0.3), Some(0.0)]),
                ("C", 2014, vec![Some(9.0), Some(0.0)]),
            ],
        );
        let (out, rep) = impute_missing(&ds, 3).unwrap();
        assert_eq!(out.row(&RowKey::new("C", 2010)).unwrap().values[1], 2.0);
        assert_eq!(rep.knn_filled, 1);
    }

    #[test]
    fn same_company_neighbours_preferred() {
        let ds = panel(
            &[Con, Cat],
            vec![
                ("A", 2010, vec![Some(0.0), None]),
                ("A", 2011, vec![Some(5.0), Some(1.0)]),
                ("B", 2010, vec![Some(0.0), Some(3.0)]),
            ],
        );
        let (out, _) = impute_missing(&ds, 1).unwrap();
        assert_eq!(out.row(&RowKey::new("A", 2010)).unwrap().values[1], 1.0);
    }

    #[test]
    fn empty_rows_and_unfillable_companies_removed() {
        let ds = panel(
            &[Con, Con],
            vec![
                ("A", 2010, vec![None, None]),
                ("A", 2011, vec![Some(1.0), Some(1.0)]),
                ("B", 2010, vec![Some(1.0), None]),
            ],
        );
        let (out, rep) = impute_missing(&ds, 1).unwrap();
        assert_eq!(rep.empty_rows_dropped, 1);
        assert_eq!(rep.companies_dropped, vec!["B".to_string()]);
        assert_eq!(out.len(), 1);
        assert!(impute_missing(&ds, 0).is_err());
    }

    #[test]
    fn zscore_examples() {
        let ds = panel(
            &[Con, Con],
            vec![
                ("C", 1, vec![Some(1.0), Some(7.0)]),
                ("C", 2, vec![Some(2.0), Some(7.0)]),
                ("C", 3, vec![Some(3.0), Some(7.0)]),
            ],
        );
        let (z, sc) = zscore_fit_apply(&ds).unwrap();
        let col: Vec<f64> = z.rows().values().map(|r| r.values[0]).collect();
        // population sigma of [1,2,3] is sqrt(2/3)
        let s = (2.0f64 / 3.0).sqrt();
        assert!((sc.sigma[0] - s).abs() < 1e-15);
        assert!((col[0] + 1.0 / s).abs() < 1e-12 && col[1].abs() < 1e-15 && (col[2] - 1.0 / s).abs() < 1e-12);
        assert!((col[2] - 1.2247).abs() < 1e-4);
        assert_eq!(sc.sigma[1], 0.0);
        assert!(z.rows().values().all(|r| r.values[1] == 0.0));
    }

    fn image_panel() -> PanelDataset {
        let mut rows = Vec::new();
        // A: 2010..=2016 full; B: only 5 years before 2016.
        for y in 2010..=2016 {
            rows.push(("A", y, vec![Some(y as f64), Some(-(y as f64))]));
        }
        for y in 2011..=2016 {
            rows.push(("B", y, vec![Some(1.0), Some(2.0)]));
        }
        let mut ds = panel(&[Con, Con], rows);
        let mut l = FraudLabel::default();
        l.codes.insert("P2501".into());
        ds.attach_labels([(RowKey::new("A", 2016), l)].into_iter().collect());
        ds
    }

    #[test]
    fn images_ex_ante_and_ex_post() {
        let ds = image_panel();
        let ante = to_images(&ds, Mode::ExAnte, 2016, 6).unwrap();
        assert_eq!(ante.len(), 1, "B has only 5 pre-target years");
        assert_eq!((ante.height, ante.width), (6, 2));
        assert_eq!(ante.samples[0].label, 1);
        assert_eq!(ante.samples[0].pixels[2 * 2], 2012.0);
        assert_eq!(ante.samples[0].pixels[5 * 2 + 1], -2015.0);

        let post = to_images(&ds, Mode::ExPost, 2016, 6).unwrap();
        assert_eq!(post.len(), 2);
        assert_eq!(post.height, 7);
        // B's missing 2010 row is zero-filled.
        let b = post.find("B").unwrap();
        assert_eq!(&b.pixels[..2], &[0.0, 0.0]);
        assert_eq!(b.label, 0);

        assert!(to_images(&ds, Mode::ExAnte, 2016, 10).is_err());
    }

    fn toy_set(n_pos: usize, n_neg: usize) -> ImageSet {
        let schema = schema(&[Con, Con, Con]);
        let mut samples = Vec::new();
        for i in 0..n_pos + n_neg {
            samples.push(Sample {
                id: format!("c{i}"),
                pixels: (0..6).map(|j| ((i * 7 + j * 3) % 11) as f32 - 5.0).collect(),
                label: (i < n_pos) as u8,
                synthetic: false,
            });
        }
        ImageSet {
            samples,
            mode: Mode::ExAnte,
            target_year: 2020,
            start_year: 2018,
            height: 2,
            width: 3,
            schema,
        }
    }

    #[test]
    fn smote_equalises_and_stays_on_segments() {
        let s = toy_set(8, 30);
        let out = smote_balance(&s, 5, 3).unwrap();
        assert_eq!(out.class_counts(), (30, 30));
        assert_eq!(&out.samples[..38], &s.samples[..]);
        let minority: Vec<&Sample> = s.samples.iter().filter(|x| x.label == 1).collect();
        for syn in out.samples.iter().filter(|x| x.synthetic) {
            // Some pair of minority originals must box the synthetic vector.
            let ok = minority.iter().any(|a| {
                minority.iter().any(|b| {
                    syn.pixels.iter().enumerate().all(|(i, v)| {
                        let (lo, hi) = (a.pixels[i].min(b.pixels[i]), a.pixels[i].max(b.pixels[i]));
                        lo <= *v && *v <= hi
                    })
                })
            });
            assert!(ok);
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(48))]
        #[test]
        fn smote_balances_inside_minority_boxes(
            n_pos in 6usize..20,
            extra in 0usize..40,
            k in 1usize..6,
            data_seed in 0u64..1000,
            seed in 0u64..1000,
        ) {
            let mut r = crate::rng::stream(data_seed, &[0]);
            let mut s = toy_set(n_pos, n_pos + extra);
            for x in &mut s.samples {
                x.pixels = (0..6).map(|_| r.random_range(-4.0f32..4.0)).collect();
            }
            let out = smote_balance(&s, k, seed).unwrap();
            proptest::prop_assert_eq!(out.class_counts(), (n_pos + extra, n_pos + extra));
            proptest::prop_assert_eq!(&out.samples[..s.len()], &s.samples[..]);
            let minority: Vec<&Sample> = s.samples.iter().filter(|x| x.label == 1).collect();
            for syn in out.samples.iter().filter(|x| x.synthetic) {
                proptest::prop_assert_eq!(syn.label, 1);
                let boxed = minority.iter().any(|a| {
                    minority.iter().any(|b| {
                        syn.pixels.iter().enumerate().all(|(i, v)| {
                            a.pixels[i].min(b.pixels[i]) <= *v && *v <= a.pixels[i].max(b.pixels[i])
                        })
                    })
                });
                proptest::prop_assert!(boxed);
            }
        }
    }

    #[test]
    fn smote_gap_endpoints() {
        let x = [1.0f32, -2.0, 3.5];
        let y = [0.0f32, 4.0, 3.5];
        assert_eq!(interpolate_sample(&x, &y, 0.0), x.to_vec());
        assert_eq!(interpolate_sample(&x, &y, 1.0), y.to_vec());
    }

    #[test]
    fn smote_needs_enough_minority() {
        assert!(smote_balance(&toy_set(5, 30), 5, 0).is_err());
        assert!(smote_balance(&toy_set(0, 30), 5, 0).is_err());
    }

    #[test]
    fn image_set_round_trip() {
        let s = toy_set(3, 4);
        let dir = tempfile::tempdir().unwrap();
        s.save(dir.path()).unwrap();
        let back = ImageSet::load(dir.path()).unwrap();
        assert_eq!(back, s);
        let raw = fs::read(dir.path().join("img_00000.f32")).unwrap();
        assert_eq!(raw.len(), 24);
        assert_eq!(
            f32::from_le_bytes([raw[0], raw[1], raw[2], raw[3]]),
            s.samples[0].pixels[0]
        );
    }
}
