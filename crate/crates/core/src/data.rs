//! Observed-data records, validated datasets, covariate strata and fold plans.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column `{0}`")]
    MissingColumn(String),
    #[error("row {row}: cannot parse column `{col}`: {detail}")]
    ParseError { row: usize, col: String, detail: String },
    #[error("row {row}: entry time w exceeds follow-up time y (w={w}, y={y})")]
    TruncationViolation { row: usize, w: f64, y: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("record {row}: {detail}")]
    InvalidRecord { row: usize, detail: String },
    #[error("invalid fold count K={k} for n={n}")]
    InvalidK { k: usize, n: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One observation O = (Y, Delta, W, A, Z).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedRecord {
    pub y: f64,
    pub delta: u8,
    pub w: f64,
    pub a: u8,
    pub z: Vec<f64>,
}

impl ObservedRecord {
    pub fn new(y: f64, delta: u8, w: f64, a: u8, z: Vec<f64>) -> Self {
        Self { y, delta, w, a, z }
    }

    pub fn is_event(&self) -> bool {
        self.delta == 1
    }

    fn validate(&self, row: usize) -> Result<(), DataError> {
        let bad = |detail: &str| DataError::InvalidRecord { row, detail: detail.to_string() };
        if !self.y.is_finite() || self.y <= 0.0 {
            return Err(bad("follow-up time y must be finite and positive"));
        }
        if !self.w.is_finite() || self.w < 0.0 {
            return Err(bad("entry time w must be finite and non-negative"));
        }
        if self.w > self.y {
            return Err(DataError::TruncationViolation { row, w: self.w, y: self.y });
        }
        if self.delta > 1 {
            return Err(bad("delta must be 0 or 1"));
        }
        if self.a > 1 {
            return Err(bad("exposure must be 0 or 1"));
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return Err(bad("covariates must be finite"));
        }
        Ok(())
    }
}

/// Per-dimension finite value sets; strata are indexed by a mixed-radix code.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateAlphabet {
    levels: Vec<Vec<f64>>,
}

impl CovariateAlphabet {
    pub fn new(mut levels: Vec<Vec<f64>>) -> Self {
        for dim in levels.iter_mut() {
            dim.sort_by(f64::total_cmp);
            dim.dedup();
        }
        Self { levels }
    }

    /// Alphabet spanned by the distinct values observed in `zs`.
    pub fn infer<'a>(zs: impl IntoIterator<Item = &'a [f64]>, dims: usize) -> Self {
        let mut levels = vec![Vec::new(); dims];
        for z in zs {
            for (d, v) in z.iter().enumerate() {
                levels[d].push(*v);
            }
        }
        Self::new(levels)
    }

    pub fn dims(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Vec<f64>] {
        &self.levels
    }

    /// Number of covariate strata (product of level counts; 1 when there are no covariates).
    pub fn n_codes(&self) -> usize {
        self.levels.iter().map(Vec::len).product()
    }

    pub fn code(&self, z: &[f64]) -> Option<usize> {
        if z.len() != self.levels.len() {
            return None;
        }
        let mut code = 0;
        for (dim, v) in self.levels.iter().zip(z) {
            let idx = dim.iter().position(|l| l == v)?;
            code = code * dim.len() + idx;
        }
        Some(code)
    }

    pub fn decode(&self, mut code: usize) -> Vec<f64> {
        let mut z = vec![0.0; self.levels.len()];
        for (d, dim) in self.levels.iter().enumerate().rev() {
            z[d] = dim[code % dim.len()];
            code /= dim.len();
        }
        z
    }
}

/// Exposure-by-covariate stratum (a, z-code).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stratum {
    pub a: u8,
    pub z: usize,
}

impl Stratum {
    pub fn new(a: u8, z: usize) -> Self {
        Self { a, z }
    }
}

impl std::fmt::Display for Stratum {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "a{}z{}", self.a, self.z)
    }
}

/// A validated, immutable collection of observations.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<ObservedRecord>,
    alphabet: CovariateAlphabet,
    z_codes: Vec<usize>,
    has_exposure: bool,
}

impl Dataset {
    pub fn new(records: Vec<ObservedRecord>, alphabet: CovariateAlphabet) -> Result<Self, DataError> {
        Self::with_exposure(records, alphabet, true)
    }

    /// Builds a dataset whose covariate alphabet is inferred from the records.
    pub fn from_records(records: Vec<ObservedRecord>) -> Result<Self, DataError> {
        let dims = records.first().map(|r| r.z.len()).unwrap_or(0);
        let alphabet = CovariateAlphabet::infer(records.iter().map(|r| r.z.as_slice()), dims);
        Self::new(records, alphabet)
    }

    pub fn with_exposure(
        records: Vec<ObservedRecord>,
        alphabet: CovariateAlphabet,
        has_exposure: bool,
    ) -> Result<Self, DataError> {
        if records.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let mut z_codes = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            r.validate(i + 1)?;
            let code = alphabet.code(&r.z).ok_or_else(|| DataError::ParseError {
                row: i + 1,
                col: "z".into(),
                detail: format!("covariate vector {:?} outside declared alphabet", r.z),
            })?;
            z_codes.push(code);
        }
        Ok(Self { records, alphabet, z_codes, has_exposure })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ObservedRecord] {
        &self.records
    }

    pub fn record(&self, i: usize) -> &ObservedRecord {
        &self.records[i]
    }

    pub fn alphabet(&self) -> &CovariateAlphabet {
        &self.alphabet
    }

    pub fn z_code(&self, i: usize) -> usize {
        self.z_codes[i]
    }

    pub fn stratum(&self, i: usize) -> Stratum {
        Stratum::new(self.records[i].a, self.z_codes[i])
    }

    pub fn has_exposure(&self) -> bool {
        self.has_exposure
    }

    /// Stratum -> record indices; the value sets partition 0..n.
    pub fn strata(&self) -> BTreeMap<Stratum, Vec<usize>> {
        let mut map: BTreeMap<Stratum, Vec<usize>> = BTreeMap::new();
        for i in 0..self.len() {
            map.entry(self.stratum(i)).or_default().push(i);
        }
        map
    }

    /// Sub-dataset on the given indices (same alphabet).
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            records: idx.iter().map(|&i| self.records[i].clone()).collect(),
            alphabet: self.alphabet.clone(),
            z_codes: idx.iter().map(|&i| self.z_codes[i]).collect(),
            has_exposure: self.has_exposure,
        }
    }

    /// Applies `f` to every record, re-validating the result.
    pub fn map_records(&self, f: impl Fn(&ObservedRecord) -> ObservedRecord) -> Result<Dataset, DataError> {
        Dataset::with_exposure(self.records.iter().map(f).collect(), self.alphabet.clone(), self.has_exposure)
    }
}

/// Column declaration for CSV ingestion.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CsvSchema {
    /// Covariate column names; defaults to every `z<k>` column in header order.
    pub covariates: Option<Vec<String>>,
    /// Declared alphabet per covariate; inferred from the data when absent.
    pub alphabet: Option<Vec<Vec<f64>>>,
}

fn parse_field<T: std::str::FromStr>(raw: &str, row: usize, col: &str) -> Result<T, DataError>
where
    T::Err: std::fmt::Display,
{
    raw.trim().parse::<T>().map_err(|e| DataError::ParseError { row, col: col.to_string(), detail: e.to_string() })
}

/// Reads a dataset from a CSV file with header `y,delta,w,a,z1,...,zp`.
///
/// The `a` column may be omitted, in which case the exposure is treated as
/// degenerate (every record has `a = 1`).
pub fn ingest_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset, DataError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let need = |name: &str| col(name).ok_or_else(|| DataError::MissingColumn(name.to_string()));
    let (iy, idelta, iw) = (need("y")?, need("delta")?, need("w")?);
    let ia = col("a");
    let z_names: Vec<String> = match &schema.covariates {
        Some(names) => names.clone(),
        None => headers
            .iter()
            .map(|h| h.trim().to_string())
            .filter(|h| h.len() > 1 && h.starts_with('z') && h[1..].chars().all(|c| c.is_ascii_digit()))
            .collect(),
    };
    let iz: Vec<usize> = z_names.iter().map(|n| need(n)).collect::<Result<_, _>>()?;

    let mut records = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let row = k + 1;
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or("");
        let y: f64 = parse_field(field(iy), row, "y")?;
        let w: f64 = parse_field(field(iw), row, "w")?;
        let delta: u8 = parse_field(field(idelta), row, "delta")?;
        if delta > 1 {
            return Err(DataError::ParseError { row, col: "delta".into(), detail: "expected 0 or 1".into() });
        }
        let a: u8 = match ia {
            Some(i) => parse_field(field(i), row, "a")?,
            None => 1,
        };
        if a > 1 {
            return Err(DataError::ParseError { row, col: "a".into(), detail: "expected 0 or 1".into() });
        }
        let mut z = Vec::with_capacity(iz.len());
        for (name, &i) in z_names.iter().zip(&iz) {
            let v: f64 = parse_field(field(i), row, name)?;
            if let Some(alpha) = &schema.alphabet {
                let dim = z.len();
                if alpha.get(dim).is_none_or(|levels| !levels.contains(&v)) {
                    return Err(DataError::ParseError {
                        row,
                        col: name.clone(),
                        detail: format!("value {v} outside declared alphabet"),
                    });
                }
            }
            z.push(v);
        }
        if w > y {
            return Err(DataError::TruncationViolation { row, w, y });
        }
        records.push(ObservedRecord { y, delta, w, a, z });
    }
    if records.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let alphabet = match &schema.alphabet {
        Some(levels) => CovariateAlphabet::new(levels.clone()),
        None => CovariateAlphabet::infer(records.iter().map(|r| r.z.as_slice()), iz.len()),
    };
    Dataset::with_exposure(records, alphabet, ia.is_some())
}

/// Writes a dataset in the ingestion format; the `a` column is omitted when exposure is degenerate.
pub fn write_csv(data: &Dataset, path: impl AsRef<Path>) -> Result<(), DataError> {
    let mut w = csv::Writer::from_path(path)?;
    let p = data.alphabet().dims();
    let mut header = vec!["y".to_string(), "delta".into(), "w".into()];
    if data.has_exposure() {
        header.push("a".into());
    }
    header.extend((1..=p).map(|k| format!("z{k}")));
    w.write_record(&header)?;
    for r in data.records() {
        let mut row = vec![r.y.to_string(), r.delta.to_string(), r.w.to_string()];
        if data.has_exposure() {
            row.push(r.a.to_string());
        }
        row.extend(r.z.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Random partition of 0..n into K folds of near-equal size.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    k: usize,
    assignment: Vec<usize>,
    seed: u64,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    /// Indices in fold `k` (the evaluation split), in increasing order.
    pub fn members(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == k).collect()
    }

    /// Indices outside fold `k` (the training split).
    pub fn complement(&self, k: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] != k).collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in &self.assignment {
            sizes[f] += 1;
        }
        sizes
    }

    /// Plan from an explicit assignment (labels must be `< k`).
    pub fn from_assignment(k: usize, assignment: Vec<usize>) -> Result<Self, DataError> {
        let n = assignment.len();
        if k < 1 || k > n || assignment.iter().any(|&f| f >= k) {
            return Err(DataError::InvalidK { k, n });
        }
        Ok(Self { k, assignment, seed: 0 })
    }
}

pub fn make_folds(n: usize, k: usize, seed: u64) -> Result<FoldPlan, DataError> {
    if k < 2 || k > n {
        return Err(DataError::InvalidK { k, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        assignment[i] = pos % k;
    }
    Ok(FoldPlan { k, assignment, seed })
}
