//! CSV ingestion, preprocessing schema and learn/validation/test splitting.
//!
//! Continuous covariates are min-max scaled with parameters fitted on the
//! learning data only. Categorical covariates are coded `1..=K` through an
//! ordered level dictionary. Every constrained covariate also carries a grid
//! of values that the ICE machinery sweeps over.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Which CSV columns play which part.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub response: String,
    pub exposure: String,
    #[serde(default)]
    pub continuous: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<String>,
}

impl ColumnRoles {
    pub fn covariates(&self) -> impl Iterator<Item = &str> {
        self.continuous
            .iter()
            .chain(&self.categorical)
            .map(String::as_str)
    }
}

/// One observation before scaling. Covariates follow the order of
/// [`ColumnRoles::continuous`] and [`ColumnRoles::categorical`].
#[derive(Debug, Clone, PartialEq)]
pub struct RawRecord {
    pub row: usize,
    pub response: f64,
    pub exposure: f64,
    pub continuous: Vec<f64>,
    pub categorical: Vec<String>,
}

pub fn ingest_csv(path: impl AsRef<Path>, roles: &ColumnRoles) -> Result<Vec<RawRecord>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(file, roles)
}

/// Parses CSV text with a header row. Rows are numbered from 1 (the first
/// data line) in error messages.
pub fn read_records<R: Read>(reader: R, roles: &ColumnRoles) -> Result<Vec<RawRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let y_idx = find(&roles.response)?;
    let v_idx = find(&roles.exposure)?;
    let cont_idx = roles
        .continuous
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;
    let cat_idx = roles
        .categorical
        .iter()
        .map(|c| find(c))
        .collect::<Result<Vec<_>>>()?;

    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let num = |idx: usize, name: &str| -> Result<f64> {
            let s = rec.get(idx).unwrap_or("");
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Row {
                    row,
                    msg: format!("cannot parse `{s}` in column `{name}` as a number"),
                })
        };
        let response = num(y_idx, &roles.response)?;
        if response < 0.0 || response.fract() != 0.0 {
            return Err(Error::Row {
                row,
                msg: format!("response {response} is not a non-negative integer count"),
            });
        }
        let exposure = num(v_idx, &roles.exposure)?;
        if exposure <= 0.0 {
            return Err(Error::Row {
                row,
                msg: format!("exposure must be positive, got {exposure}"),
            });
        }
        let continuous = cont_idx
            .iter()
            .zip(&roles.continuous)
            .map(|(&idx, name)| num(idx, name))
            .collect::<Result<Vec<_>>>()?;
        let categorical = cat_idx
            .iter()
            .map(|&idx| rec.get(idx).unwrap_or("").to_string())
            .collect();
        out.push(RawRecord {
            row,
            response,
            exposure,
            continuous,
            categorical,
        });
    }
    Ok(out)
}

/// Writes records in the same layout [`read_records`] accepts.
pub fn write_records<W: std::io::Write>(
    writer: W,
    roles: &ColumnRoles,
    records: &[RawRecord],
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![roles.response.clone(), roles.exposure.clone()];
    header.extend(roles.continuous.iter().cloned());
    header.extend(roles.categorical.iter().cloned());
    w.write_record(&header)?;
    for r in records {
        let mut fields = vec![r.response.to_string(), r.exposure.to_string()];
        fields.extend(r.continuous.iter().map(|v| v.to_string()));
        fields.extend(r.categorical.iter().cloned());
        w.write_record(&fields)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "index", rename_all = "snake_case")]
pub enum ColumnRef {
    Continuous(usize),
    Categorical(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridPolicy {
    /// Columns with at most this many distinct values use all of them.
    pub distinct_cap: usize,
    /// Otherwise the grid is the 1st..=`percentiles`-th percentile (of 100).
    pub percentiles: usize,
}

impl Default for GridPolicy {
    fn default() -> Self {
        Self {
            distinct_cap: 100,
            percentiles: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousColumn {
    pub name: String,
    pub min: f64,
    pub max: f64,
}

impl ContinuousColumn {
    pub fn scale(&self, raw: f64) -> f64 {
        ((raw - self.min) / (self.max - self.min)).clamp(0.0, 1.0)
    }

    pub fn unscale(&self, scaled: f64) -> f64 {
        self.min + scaled * (self.max - self.min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalColumn {
    pub name: String,
    /// Level `levels[k]` is coded `k + 1`.
    pub levels: Vec<String>,
}

impl CategoricalColumn {
    pub fn cardinality(&self) -> usize {
        self.levels.len()
    }

    pub fn code(&self, level: &str) -> Option<u32> {
        self.levels
            .iter()
            .position(|l| l == level)
            .map(|p| p as u32 + 1)
    }
}

/// Ordered values a constrained column sweeps through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub column: String,
    pub kind: ColumnRef,
    /// Raw values (continuous) or level codes (categorical).
    pub raw: Vec<f64>,
    /// Network-input values: min-max scaled (continuous) or codes.
    pub scaled: Vec<f64>,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub roles: ColumnRoles,
    pub continuous: Vec<ContinuousColumn>,
    pub categorical: Vec<CategoricalColumn>,
    pub grids: Vec<Grid>,
}

fn level_order(a: &String, b: &String) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x.total_cmp(&y).then_with(|| a.cmp(b)),
        _ => a.cmp(b),
    }
}

/// Nearest-rank percentiles `1..=count` (of 100) of sorted data, deduplicated.
fn percentile_grid(sorted: &[f64], count: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut out: Vec<f64> = Vec::with_capacity(count);
    for p in 1..=count {
        let rank = (p * n).div_ceil(100).max(1);
        let v = sorted[rank.min(n) - 1];
        if out.last() != Some(&v) {
            out.push(v);
        }
    }
    out
}

impl Schema {
    /// Fits scaling parameters, dictionaries and grids on `records`
    /// (the learning data).
    pub fn fit(
        records: &[RawRecord],
        roles: &ColumnRoles,
        constrained: &[String],
        policy: GridPolicy,
    ) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Schema("cannot fit a schema on zero records".into()));
        }
        let mut continuous = Vec::with_capacity(roles.continuous.len());
        for (i, name) in roles.continuous.iter().enumerate() {
            let (min, max) = records.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), r| {
                (lo.min(r.continuous[i]), hi.max(r.continuous[i]))
            });
            if min >= max {
                return Err(Error::Schema(format!(
                    "continuous column `{name}` is constant ({min})"
                )));
            }
            continuous.push(ContinuousColumn {
                name: name.clone(),
                min,
                max,
            });
        }
        let mut categorical = Vec::with_capacity(roles.categorical.len());
        for (t, name) in roles.categorical.iter().enumerate() {
            let set: BTreeSet<&String> = records.iter().map(|r| &r.categorical[t]).collect();
            let mut levels: Vec<String> = set.into_iter().cloned().collect();
            levels.sort_by(level_order);
            if levels.len() < 2 {
                return Err(Error::Schema(format!(
                    "categorical column `{name}` has a single level"
                )));
            }
            categorical.push(CategoricalColumn {
                name: name.clone(),
                levels,
            });
        }

        let mut schema = Schema {
            roles: roles.clone(),
            continuous,
            categorical,
            grids: Vec::new(),
        };
        for name in constrained {
            let kind = schema
                .resolve(name)
                .ok_or_else(|| Error::Schema(format!("constrained column `{name}` is not a covariate")))?;
            let grid = match kind {
                ColumnRef::Continuous(i) => {
                    let mut vals: Vec<f64> = records.iter().map(|r| r.continuous[i]).collect();
                    vals.sort_by(f64::total_cmp);
                    let mut distinct = vals.clone();
                    distinct.dedup();
                    let raw = if distinct.len() <= policy.distinct_cap {
                        distinct
                    } else {
                        percentile_grid(&vals, policy.percentiles)
                    };
                    let col = &schema.continuous[i];
                    let scaled = raw.iter().map(|&x| col.scale(x)).collect();
                    Grid {
                        column: name.clone(),
                        kind,
                        raw,
                        scaled,
                    }
                }
                ColumnRef::Categorical(t) => {
                    let codes: Vec<f64> = (1..=schema.categorical[t].cardinality())
                        .map(|c| c as f64)
                        .collect();
                    Grid {
                        column: name.clone(),
                        kind,
                        raw: codes.clone(),
                        scaled: codes,
                    }
                }
            };
            if grid.len() < 2 {
                return Err(Error::Schema(format!(
                    "grid for `{name}` has fewer than 2 values"
                )));
            }
            schema.grids.push(grid);
        }
        Ok(schema)
    }

    pub fn resolve(&self, name: &str) -> Option<ColumnRef> {
        if let Some(i) = self.continuous.iter().position(|c| c.name == name) {
            return Some(ColumnRef::Continuous(i));
        }
        self.categorical
            .iter()
            .position(|c| c.name == name)
            .map(ColumnRef::Categorical)
    }

    pub fn grid(&self, name: &str) -> Option<&Grid> {
        self.grids.iter().find(|g| g.column == name)
    }

    pub fn n_continuous(&self) -> usize {
        self.continuous.len()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.categorical.iter().map(|c| c.cardinality()).collect()
    }

    pub fn transform(&self, records: &[RawRecord]) -> Result<TabularDataset> {
        let q = self.continuous.len();
        let t = self.categorical.len();
        let mut x_cont = Matrix::zeros(records.len(), q);
        let mut x_cat = Vec::with_capacity(records.len() * t);
        let mut y = Vec::with_capacity(records.len());
        let mut v = Vec::with_capacity(records.len());
        let mut ids = Vec::with_capacity(records.len());
        let lookups: Vec<HashMap<&str, u32>> = self
            .categorical
            .iter()
            .map(|c| {
                c.levels
                    .iter()
                    .enumerate()
                    .map(|(k, l)| (l.as_str(), k as u32 + 1))
                    .collect()
            })
            .collect();
        for (n, r) in records.iter().enumerate() {
            if r.continuous.len() != q || r.categorical.len() != t {
                return Err(Error::Row {
                    row: r.row,
                    msg: "record does not match the schema's covariates".into(),
                });
            }
            for (i, col) in self.continuous.iter().enumerate() {
                x_cont.set(n, i, col.scale(r.continuous[i]));
            }
            for (k, col) in self.categorical.iter().enumerate() {
                let code = lookups[k]
                    .get(r.categorical[k].as_str())
                    .copied()
                    .ok_or_else(|| Error::UnknownLevel {
                        column: col.name.clone(),
                        level: r.categorical[k].clone(),
                    })?;
                x_cat.push(code);
            }
            y.push(r.response);
            v.push(r.exposure);
            ids.push(r.row);
        }
        Ok(TabularDataset {
            x_cont,
            x_cat,
            n_cat: t,
            y,
            v,
            ids,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Scaled covariates, responses and exposures, row aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularDataset {
    pub x_cont: Matrix,
    /// Row-major `len() x n_cat` level codes in `1..=K_t`.
    pub x_cat: Vec<u32>,
    pub n_cat: usize,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub ids: Vec<usize>,
}

impl TabularDataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn cat_row(&self, n: usize) -> &[u32] {
        &self.x_cat[n * self.n_cat..(n + 1) * self.n_cat]
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let q = self.x_cont.cols();
        let mut x_cont = Matrix::zeros(rows.len(), q);
        let mut x_cat = Vec::with_capacity(rows.len() * self.n_cat);
        for (k, &r) in rows.iter().enumerate() {
            x_cont.row_mut(k).copy_from_slice(self.x_cont.row(r));
            x_cat.extend_from_slice(self.cat_row(r));
        }
        Self {
            x_cont,
            x_cat,
            n_cat: self.n_cat,
            y: rows.iter().map(|&r| self.y[r]).collect(),
            v: rows.iter().map(|&r| self.v[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
        }
    }

    /// Same covariates and exposures, different responses.
    pub fn with_response(&self, y: Vec<f64>) -> Result<Self> {
        if y.len() != self.len() {
            return Err(Error::dim(
                "TabularDataset::with_response",
                format!("{} responses for {} rows", y.len(), self.len()),
            ));
        }
        Ok(Self { y, ..self.clone() })
    }
}

/// Partition sizes: `floor(n * ratio)` for all but the last part, which
/// takes the remainder.
pub fn partition_sizes(n: usize, ratios: &[f64]) -> Result<Vec<usize>> {
    if ratios.is_empty() || ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
        return Err(Error::Invalid(format!("bad split ratios {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split ratios must sum to 1, got {total}"
        )));
    }
    let mut sizes: Vec<usize> = ratios[..ratios.len() - 1]
        .iter()
        .map(|r| (n as f64 * r + 1e-9).floor() as usize)
        .collect();
    let used: usize = sizes.iter().sum();
    sizes.push(n - used);
    if sizes.contains(&0) {
        return Err(Error::Invalid(format!(
            "split of {n} rows by {ratios:?} leaves an empty partition"
        )));
    }
    Ok(sizes)
}

/// Shuffles `0..n` with `seed` and cuts it into consecutive parts.
pub fn split_indices(n: usize, ratios: &[f64], seed: u64) -> Result<Vec<Vec<usize>>> {
    let sizes = partition_sizes(n, ratios)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut parts = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for s in sizes {
        let mut part = idx[start..start + s].to_vec();
        part.sort_unstable();
        parts.push(part);
        start += s;
    }
    Ok(parts)
}

pub fn split(dataset: &TabularDataset, ratios: &[f64], seed: u64) -> Result<Vec<TabularDataset>> {
    Ok(split_indices(dataset.len(), ratios, seed)?
        .iter()
        .map(|p| dataset.subset(p))
        .collect())
}

/// Row indices of the standard protocol: a `1 - test_ratio : test_ratio`
/// learn/test split, then the learning part cut again into
/// `1 - valid_ratio : valid_ratio` for early stopping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitIndices {
    pub learn: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitIndices {
    pub fn new(n: usize, test_ratio: f64, valid_ratio: f64, seed: u64) -> Result<Self> {
        let outer = split_indices(n, &[1.0 - test_ratio, test_ratio], seed)?;
        let inner = split_indices(
            outer[0].len(),
            &[1.0 - valid_ratio, valid_ratio],
            seed.wrapping_add(1),
        )?;
        let map = |part: &[usize]| part.iter().map(|&k| outer[0][k]).collect::<Vec<_>>();
        Ok(Self {
            learn: map(&inner[0]),
            validation: map(&inner[1]),
            test: outer[1].clone(),
        })
    }

    /// Learning plus validation rows: the data the schema is fitted on.
    pub fn fit_rows(&self) -> Vec<usize> {
        let mut rows: Vec<usize> = self.learn.iter().chain(&self.validation).copied().collect();
        rows.sort_unstable();
        rows
    }
}
