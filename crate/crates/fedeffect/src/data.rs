//! Synthetic data generation, CSV ingestion, splitting, and summaries.

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::mathcore::{mix_seed, moments4, MomentVector};
use crate::model::{SourceData, SourceSummary};
use crate::{Error, Result};

/// Which synthetic benchmark to generate. The two variants share the model
/// family and differ only in outcome scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Data1,
    Data2,
}

impl core::fmt::Display for Variant {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            Variant::Data1 => write!(f, "data1"),
            Variant::Data2 => write!(f, "data2"),
        }
    }
}

impl core::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "data1" => Ok(Variant::Data1),
            "data2" => Ok(Variant::Data2),
            other => Err(Error::InvalidConfig {
                detail: format!("unknown variant {other:?}, expected data1 or data2"),
            }),
        }
    }
}

/// Per-source row budget for train/test/validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub test: usize,
    pub val: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.train + self.test + self.val
    }
}

impl Default for SplitCounts {
    fn default() -> Self {
        SplitCounts {
            train: 50,
            test: 450,
            val: 400,
        }
    }
}

/// Name of one of the three per-source splits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Test,
    Val,
}

impl core::fmt::Display for SplitName {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let name = match self {
            SplitName::Train => "train",
            SplitName::Test => "test",
            SplitName::Val => "val",
        };
        f.write_str(name)
    }
}

impl core::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "test" => Ok(SplitName::Test),
            "val" => Ok(SplitName::Val),
            other => Err(Error::InvalidConfig {
                detail: format!("unknown split {other:?}, expected train, test, or val"),
            }),
        }
    }
}

/// Configuration of one synthetic replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub variant: Variant,
    /// Total records across all sources.
    pub n: usize,
    /// Number of sources; must divide n.
    pub m: usize,
    /// Covariate dimension.
    pub d_x: usize,
    pub seed: u64,
    pub split: SplitCounts,
    /// Emit sequential primary keys so generated files carry an id column.
    #[serde(default)]
    pub with_ids: bool,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::data1(0)
    }
}

impl SyntheticConfig {
    /// Benchmark defaults: 5 sources of 1000 records over 20 covariates,
    /// 50/450/400 split.
    pub fn data1(seed: u64) -> Self {
        SyntheticConfig {
            variant: Variant::Data1,
            n: 5000,
            m: 5,
            d_x: 20,
            seed,
            split: SplitCounts {
                train: 50,
                test: 450,
                val: 400,
            },
            with_ids: false,
        }
    }

    /// Same shape as [`Self::data1`] with larger-scale outcomes.
    pub fn data2(seed: u64) -> Self {
        SyntheticConfig {
            variant: Variant::Data2,
            ..Self::data1(seed)
        }
    }

    pub fn n_per_source(&self) -> usize {
        self.n / self.m
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 || self.d_x == 0 {
            return Err(Error::InvalidConfig {
                detail: "n, m, and d_x must be positive".into(),
            });
        }
        if !self.n.is_multiple_of(self.m) {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "source count {} must divide total records {}",
                    self.m, self.n
                ),
            });
        }
        if self.split.total() > self.n_per_source() {
            return Err(Error::InvalidConfig {
                detail: format!(
                    "split {}+{}+{} exceeds the {} records per source",
                    self.split.train,
                    self.split.test,
                    self.split.val,
                    self.n_per_source()
                ),
            });
        }
        Ok(())
    }
}

/// Ground-truth generator coefficients for one replication.
struct TruthParams {
    a0: f64,
    b0: f64,
    c0: f64,
    a1: DVector<f64>,
    b1: DVector<f64>,
    c1: DVector<f64>,
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl TruthParams {
    /// Coefficients are drawn once per replication from the dataset seed;
    /// the per-source record streams use derived seeds.
    fn draw(cfg: &SyntheticConfig) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let sd = 2.0f64.sqrt();
        let (b0, c0, b1_mean, c1_mean) = match cfg.variant {
            Variant::Data1 => (0.9, 2.0, 0.0, 1.0),
            Variant::Data2 => (6.0, 30.0, 10.0, 15.0),
        };
        let mut normal_vec = |mean: f64| {
            DVector::from_fn(cfg.d_x, |_, _| {
                mean + sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
            })
        };
        let a1 = normal_vec(0.0);
        let b1 = normal_vec(b1_mean);
        let c1 = normal_vec(c1_mean);
        TruthParams {
            a0: 0.6,
            b0,
            c0,
            a1,
            b1,
            c1,
        }
    }
}

/// Generate all sources of one synthetic replication, truth included.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<SourceData>> {
    cfg.validate()?;
    let truth = TruthParams::draw(cfg);
    let n_s = cfg.n_per_source();
    (0..cfg.m)
        .map(|sid| generate_source(cfg, &truth, sid, n_s))
        .collect()
}

fn generate_source(
    cfg: &SyntheticConfig,
    truth: &TruthParams,
    sid: usize,
    n_s: usize,
) -> Result<SourceData> {
    let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(cfg.seed, sid as u64 + 1));
    let mut x = DMatrix::zeros(n_s, cfg.d_x);
    let mut w = Vec::with_capacity(n_s);
    let mut y0 = DVector::zeros(n_s);
    let mut y1 = DVector::zeros(n_s);
    let normal = |rng: &mut ChaCha20Rng| -> f64 {
        <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
    };
    for i in 0..n_s {
        for j in 0..cfg.d_x {
            x[(i, j)] = rng.random_range(-1.0..1.0);
        }
        let row = x.row(i).transpose();
        let p = sigmoid(truth.a0 + row.dot(&truth.a1));
        w.push(rng.random_bool(p) as u8);
        y0[i] = softplus(truth.b0 + row.dot(&truth.b1)) + normal(&mut rng);
        y1[i] = softplus(truth.c0 + row.dot(&truth.c1)) + normal(&mut rng);
    }
    let y_obs = DVector::from_fn(n_s, |i, _| if w[i] == 1 { y1[i] } else { y0[i] });
    let ids = cfg
        .with_ids
        .then(|| (0..n_s).map(|i| format!("u{:07}", sid * n_s + i)).collect());
    SourceData::new(sid, ids, x, w, y_obs, Some(y0), Some(y1))
}

/// Row-index assignment of one source into train/test/validation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub val: Vec<usize>,
}

impl Split {
    /// Rows of the named split.
    pub fn rows(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Test => &self.test,
            SplitName::Val => &self.val,
        }
    }
}

/// Seeded permutation followed by contiguous assignment. Rows beyond the
/// requested counts stay unused.
pub fn split_source(n_rows: usize, counts: &SplitCounts, seed: u64) -> Result<Split> {
    if counts.total() > n_rows {
        return Err(Error::InvalidConfig {
            detail: format!(
                "split of {} rows requested from a source of {} rows",
                counts.total(),
                n_rows
            ),
        });
    }
    let mut order: Vec<usize> = (0..n_rows).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    // Fisher-Yates; explicit so the permutation is pinned by this crate, not
    // by rand's shuffle implementation details.
    for i in (1..n_rows).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let train = order[..counts.train].to_vec();
    let test = order[counts.train..counts.train + counts.test].to_vec();
    let val = order[counts.train + counts.test..counts.total()].to_vec();
    Ok(Split { train, test, val })
}

/// Split one source into `parts` equal sources with fresh ids, via a seeded
/// permutation. The row count must divide evenly.
pub fn partition_source(src: &SourceData, parts: usize, seed: u64) -> Result<Vec<SourceData>> {
    let n = src.n();
    if parts == 0 || !n.is_multiple_of(parts) {
        return Err(Error::InvalidConfig {
            detail: format!("cannot partition {n} rows into {parts} equal sources"),
        });
    }
    let chunk = n / parts;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    (0..parts)
        .map(|p| {
            let rows = &order[p * chunk..(p + 1) * chunk];
            let mut part = src.select(rows)?;
            part.source_id = p;
            Ok(part)
        })
        .collect()
}

/// Moment summary of one source: first four moments per covariate column,
/// per observed-outcome arm, and of the treatment indicator.
///
/// An arm with fewer than two observed outcomes gets an all-zero moment
/// block with a warning; downstream kernels still receive a fixed-length
/// vector.
pub fn summarize(src: &SourceData) -> Result<SourceSummary> {
    let n = src.n();
    if n < 2 {
        return Err(Error::InsufficientData {
            context: "summarize",
            need: 2,
            got: n,
        });
    }
    let arm = |target: u8| -> Vec<f64> {
        (0..n)
            .filter(|&i| src.w[i] == target)
            .map(|i| src.y_obs[i])
            .collect()
    };
    let arm_moments = |values: Vec<f64>, name: &str| -> MomentVector {
        if values.len() < 2 {
            log::warn!(
                "source {}: {} observed {} outcomes; moment block zeroed",
                src.source_id,
                values.len(),
                name
            );
            MomentVector::zeros()
        } else {
            moments4(&values).expect("length checked above")
        }
    };
    let y0_moments = arm_moments(arm(0), "control");
    let y1_moments = arm_moments(arm(1), "treated");
    let x_moments = (0..src.d())
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| src.x[(i, j)]).collect();
            moments4(&col)
        })
        .collect::<Result<Vec<_>>>()?;
    let w_values: Vec<f64> = src.w.iter().map(|&v| v as f64).collect();
    let w_moments = moments4(&w_values)?;
    Ok(SourceSummary {
        source_id: src.source_id,
        y0_moments,
        y1_moments,
        x_moments,
        w_moments,
    })
}

/// CSV schema: optional `id`, then `w`, `y_obs`, optional `y0`/`y1`, then
/// covariates `x1..xD` in order.
struct CsvSchema {
    id: Option<usize>,
    w: usize,
    y_obs: usize,
    y0: Option<usize>,
    y1: Option<usize>,
    x: Vec<usize>,
}

fn parse_header(path: &Path, headers: &csv::StringRecord) -> Result<CsvSchema> {
    let mut id = None;
    let mut w = None;
    let mut y_obs = None;
    let mut y0 = None;
    let mut y1 = None;
    let mut x_cols: Vec<(usize, usize)> = Vec::new();
    for (col, name) in headers.iter().enumerate() {
        match name {
            "id" => id = Some(col),
            "w" => w = Some(col),
            "y_obs" => y_obs = Some(col),
            "y0" => y0 = Some(col),
            "y1" => y1 = Some(col),
            _ => {
                if let Some(idx) = name.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()) {
                    x_cols.push((idx, col));
                } else {
                    return Err(Error::SchemaError {
                        path: path.display().to_string(),
                        detail: format!("unrecognized column {name:?}"),
                    });
                }
            }
        }
    }
    let w = w.ok_or_else(|| Error::SchemaError {
        path: path.display().to_string(),
        detail: "missing required column \"w\"".into(),
    })?;
    let y_obs = y_obs.ok_or_else(|| Error::SchemaError {
        path: path.display().to_string(),
        detail: "missing required column \"y_obs\"".into(),
    })?;
    if x_cols.is_empty() {
        return Err(Error::SchemaError {
            path: path.display().to_string(),
            detail: "no covariate columns x1..xD found".into(),
        });
    }
    x_cols.sort_unstable();
    for (expect, (idx, _)) in x_cols.iter().enumerate() {
        if *idx != expect + 1 {
            return Err(Error::SchemaError {
                path: path.display().to_string(),
                detail: format!(
                    "covariate columns must be x1..x{} without gaps; found x{}",
                    x_cols.len(),
                    idx
                ),
            });
        }
    }
    Ok(CsvSchema {
        id,
        w,
        y_obs,
        y0,
        y1,
        x: x_cols.into_iter().map(|(_, col)| col).collect(),
    })
}

/// Load one source from CSV. Truth columns are kept when present.
pub fn load_csv(path: impl AsRef<Path>, source_id: usize) -> Result<SourceData> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let schema = parse_header(path, reader.headers().map_err(|e| csv_error(path, e))?)?;
    let mut ids = Vec::new();
    let mut w = Vec::new();
    let mut y_obs = Vec::new();
    let mut y0 = Vec::new();
    let mut y1 = Vec::new();
    let mut x_rows: Vec<Vec<f64>> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let field = |col: usize| -> Result<&str> {
            record.get(col).ok_or_else(|| Error::SchemaError {
                path: path.display().to_string(),
                detail: format!("row {}: missing column {}", row + 1, col + 1),
            })
        };
        let number = |col: usize, name: &str| -> Result<f64> {
            let raw = field(col)?;
            raw.parse::<f64>().map_err(|_| Error::SchemaError {
                path: path.display().to_string(),
                detail: format!("row {}: column {name} is not a number: {raw:?}", row + 1),
            })
        };
        if let Some(col) = schema.id {
            ids.push(field(col)?.to_string());
        }
        let w_raw = number(schema.w, "w")?;
        if w_raw != 0.0 && w_raw != 1.0 {
            return Err(Error::NonBinaryTreatment {
                value: w_raw,
                row: row + 1,
            });
        }
        w.push(w_raw as u8);
        y_obs.push(number(schema.y_obs, "y_obs")?);
        if let Some(col) = schema.y0 {
            y0.push(number(col, "y0")?);
        }
        if let Some(col) = schema.y1 {
            y1.push(number(col, "y1")?);
        }
        x_rows.push(
            schema
                .x
                .iter()
                .enumerate()
                .map(|(j, &col)| number(col, &format!("x{}", j + 1)))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    let n = x_rows.len();
    let d = schema.x.len();
    let x = DMatrix::from_fn(n, d, |i, j| x_rows[i][j]);
    SourceData::new(
        source_id,
        schema.id.map(|_| ids),
        x,
        w,
        DVector::from_vec(y_obs),
        schema.y0.map(|_| DVector::from_vec(y0)),
        schema.y1.map(|_| DVector::from_vec(y1)),
    )
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path.display().to_string(), io),
        other => Error::SchemaError {
            path: path.display().to_string(),
            detail: format!("{other:?}"),
        },
    }
}

/// Write one source to CSV with round-trip-exact float formatting.
pub fn save_csv(src: &SourceData, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?,
    );
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
    let mut header = Vec::new();
    if src.ids.is_some() {
        header.push("id".to_string());
    }
    header.push("w".into());
    header.push("y_obs".into());
    if src.y0.is_some() {
        header.push("y0".into());
    }
    if src.y1.is_some() {
        header.push("y1".into());
    }
    for j in 0..src.d() {
        header.push(format!("x{}", j + 1));
    }
    writeln!(out, "{}", header.join(",")).map_err(io_err)?;
    for i in 0..src.n() {
        let mut row = Vec::new();
        if let Some(ids) = &src.ids {
            row.push(ids[i].clone());
        }
        row.push(src.w[i].to_string());
        row.push(src.y_obs[i].to_string());
        if let Some(y0) = &src.y0 {
            row.push(y0[i].to_string());
        }
        if let Some(y1) = &src.y1 {
            row.push(y1[i].to_string());
        }
        for j in 0..src.d() {
            row.push(src.x[(i, j)].to_string());
        }
        writeln!(out, "{}", row.join(",")).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Dataset manifest written alongside generated CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub variant: Variant,
    pub seed: u64,
    pub m: usize,
    pub n_s: usize,
    pub split: SplitCounts,
    /// Per-source CSV file names, ascending source id.
    pub files: Vec<String>,
}

impl DatasetManifest {
    pub fn from_config(cfg: &SyntheticConfig) -> Self {
        DatasetManifest {
            variant: cfg.variant,
            seed: cfg.seed,
            m: cfg.m,
            n_s: cfg.n_per_source(),
            split: cfg.split,
            files: (0..cfg.m).map(|sid| format!("source_{sid}.csv")).collect(),
        }
    }
}
