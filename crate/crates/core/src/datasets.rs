//! Synthetic datasets, per-column normalization and CSV persistence.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::tagged;
use crate::stats::ExactSum;

/// Affine map of `[min, max]` onto `[-1, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub min: f64,
    pub max: f64,
}

impl ColumnMap {
    pub fn is_constant(&self) -> bool {
        self.max <= self.min
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.is_constant() {
            return 0.0;
        }
        (2.0 * (x - self.min) / (self.max - self.min) - 1.0).clamp(-1.0, 1.0)
    }

    /// Back to the original scale. Constant columns invert to `min`.
    pub fn invert(&self, y: f64) -> f64 {
        if self.is_constant() {
            return self.min;
        }
        (y + 1.0) / 2.0 * (self.max - self.min) + self.min
    }
}

/// `n` users × `d` dimensions, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    values: Vec<f64>,
    n: usize,
    d: usize,
    /// Maps applied by the last [`normalize`], if any.
    pub normalization: Option<Vec<ColumnMap>>,
}

impl Dataset {
    pub fn from_row_major(values: Vec<f64>, n: usize, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::Input(format!("dataset must be non-empty, got {n}x{d}")));
        }
        if values.len() != n * d {
            return Err(Error::LengthMismatch { expected: n * d, actual: values.len() });
        }
        Ok(Self { values, n, d, normalization: None })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * d);
        for row in rows {
            crate::error::check_len(d, row.len())?;
            values.extend_from_slice(row);
        }
        Self::from_row_major(values, rows.len(), d)
    }

    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let d = columns.len();
        let n = columns.first().map_or(0, Vec::len);
        for c in columns {
            crate::error::check_len(n, c.len())?;
        }
        let values = (0..n)
            .flat_map(|i| columns.iter().map(move |c| c[i]))
            .collect();
        Self::from_row_major(values, n, d)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.d)
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.d + j]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// True per-dimension means `θ̄`.
    pub fn column_means(&self) -> Vec<f64> {
        let mut sums = vec![ExactSum::new(); self.d];
        for row in self.rows() {
            for (s, &x) in sums.iter_mut().zip(row) {
                s.add(x);
            }
        }
        sums.iter().map(|s| s.value() / self.n as f64).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Per-column min–max normalization onto `[-1, 1]`. Constant columns map to
/// zero. Already-normalized columns are left bit-for-bit unchanged.
pub fn normalize(dataset: &Dataset) -> Result<Dataset> {
    if dataset.n == 0 {
        return Err(Error::Input("cannot normalize an empty dataset".into()));
    }
    let d = dataset.d;
    let mut maps = vec![ColumnMap { min: f64::INFINITY, max: f64::NEG_INFINITY }; d];
    for row in dataset.rows() {
        for (m, &x) in maps.iter_mut().zip(row) {
            if !x.is_finite() {
                return Err(Error::Input(format!("non-finite value {x}")));
            }
            m.min = m.min.min(x);
            m.max = m.max.max(x);
        }
    }
    let identity: Vec<bool> = maps
        .iter()
        .map(|m| (m.min == -1.0 && m.max == 1.0) || (m.min == 0.0 && m.max == 0.0))
        .collect();
    let mut values = dataset.values.clone();
    for row in values.chunks_exact_mut(d) {
        for j in 0..d {
            if !identity[j] {
                row[j] = maps[j].apply(row[j]);
            }
        }
    }
    let normalization = match &dataset.normalization {
        Some(prev) if identity.iter().all(|&id| id) => Some(prev.clone()),
        _ => Some(maps),
    };
    Ok(Dataset { values, n: dataset.n, d, normalization })
}

fn default_sigma() -> f64 {
    1.0 / 16.0
}
fn default_high_fraction() -> f64 {
    0.1
}
fn default_mu_high() -> f64 {
    0.9
}
fn default_lambda_min() -> f64 {
    1.0
}
fn default_lambda_max() -> f64 {
    99.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Family {
    /// The first `⌈high_fraction·d⌉` columns have mean `mu_high`, the rest
    /// `mu_low`; all share standard deviation `sigma`.
    Gaussian {
        #[serde(default = "default_sigma")]
        sigma: f64,
        #[serde(default = "default_high_fraction")]
        high_fraction: f64,
        #[serde(default = "default_mu_high")]
        mu_high: f64,
        #[serde(default)]
        mu_low: f64,
    },
    /// Each column is Poisson with an expectation drawn from
    /// `[lambda_min, lambda_max]`.
    Poisson {
        #[serde(default = "default_lambda_min")]
        lambda_min: f64,
        #[serde(default = "default_lambda_max")]
        lambda_max: f64,
    },
    /// Uniform on `[-1, 1]`.
    Uniform,
}

impl Family {
    pub fn gaussian() -> Self {
        Family::Gaussian {
            sigma: default_sigma(),
            high_fraction: default_high_fraction(),
            mu_high: default_mu_high(),
            mu_low: 0.0,
        }
    }

    pub fn poisson() -> Self {
        Family::Poisson { lambda_min: default_lambda_min(), lambda_max: default_lambda_max() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub n: usize,
    pub d: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(flatten)]
    pub family: Family,
}

impl GeneratorConfig {
    pub fn new(family: Family, n: usize, d: usize, seed: u64) -> Self {
        Self { n, d, seed, family }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.d == 0 {
            return Err(Error::Config(format!("n and d must be positive, got {}x{}", self.n, self.d)));
        }
        match self.family {
            Family::Gaussian { sigma, high_fraction, mu_high, mu_low } => {
                if !(sigma.is_finite() && sigma > 0.0) {
                    return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
                }
                if !(0.0..=1.0).contains(&high_fraction) {
                    return Err(Error::Config(format!("high_fraction must lie in [0, 1], got {high_fraction}")));
                }
                if !(mu_high.is_finite() && mu_low.is_finite()) {
                    return Err(Error::Config("means must be finite".into()));
                }
            }
            Family::Poisson { lambda_min, lambda_max } => {
                if !(lambda_min > 0.0 && lambda_max >= lambda_min && lambda_max.is_finite()) {
                    return Err(Error::Config(format!(
                        "Poisson expectations need 0 < min <= max, got [{lambda_min}, {lambda_max}]"
                    )));
                }
            }
            Family::Uniform => {}
        }
        Ok(())
    }

    /// Number of leading high-mean columns for the Gaussian family.
    pub fn high_columns(&self) -> usize {
        match self.family {
            Family::Gaussian { high_fraction, .. } => ((high_fraction * self.d as f64).ceil() as usize).min(self.d),
            _ => 0,
        }
    }

    /// Expected value of each raw (pre-normalization) column.
    pub fn column_expectations(&self) -> Vec<f64> {
        match self.family {
            Family::Gaussian { mu_high, mu_low, .. } => {
                let k = self.high_columns();
                (0..self.d).map(|j| if j < k { mu_high } else { mu_low }).collect()
            }
            Family::Poisson { lambda_min, lambda_max } => (0..self.d)
                .map(|j| {
                    let mut rng = tagged(self.seed, "poisson-lambda", j as u64);
                    if lambda_max > lambda_min {
                        rng.random_range(lambda_min..=lambda_max)
                    } else {
                        lambda_min
                    }
                })
                .collect(),
            Family::Uniform => vec![0.0; self.d],
        }
    }
}

/// Draws the raw columns without normalizing them.
pub fn generate_raw(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let expectations = config.column_expectations();
    let columns: Vec<Vec<f64>> = (0..config.d)
        .into_par_iter()
        .map(|j| {
            let mut rng = tagged(config.seed, "column", j as u64);
            let n = config.n;
            match config.family {
                Family::Gaussian { sigma, .. } => {
                    let normal = Normal::new(expectations[j], sigma).expect("validated sigma");
                    normal.sample_iter(&mut rng).take(n).collect()
                }
                Family::Poisson { .. } => {
                    let poisson = Poisson::new(expectations[j]).expect("validated lambda");
                    poisson.sample_iter(&mut rng).take(n).collect()
                }
                Family::Uniform => (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            }
        })
        .collect();
    Dataset::from_columns(&columns)
}

/// Draws a dataset and normalizes each column onto `[-1, 1]`.
pub fn generate(config: &GeneratorConfig) -> Result<Dataset> {
    normalize(&generate_raw(config)?)
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_csv(dataset, BufWriter::new(File::create(path)?))
}

pub fn write_csv<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record((0..dataset.d).map(|j| format!("dim_{j}")))?;
    for row in dataset.rows() {
        // shortest round-trip representation
        w.write_record(row.iter().map(|x| format!("{x:?}")))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv(BufReader::new(File::open(path)?))
}

/// Parses a dataset. Rows and columns in errors are 1-based, counting the
/// header as row 1.
pub fn read_csv<R: Read>(input: R) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let d = reader.headers()?.len();
    let mut values = Vec::new();
    let mut n = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 2;
        if record.len() != d {
            return Err(Error::Parse {
                row,
                column: record.len().min(d) + 1,
                message: format!("expected {d} fields, found {}", record.len()),
            });
        }
        for (j, cell) in record.iter().enumerate() {
            let x: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: j + 1,
                message: format!("not a number: `{cell}`"),
            })?;
            values.push(x);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Input("dataset file has no rows".into()));
    }
    Dataset::from_row_major(values, n, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(xs: &[f64]) -> Dataset {
        Dataset::from_columns(&[xs.to_vec()]).unwrap()
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize(&col(&[0.0, 5.0, 10.0])).unwrap().values(), &[-1.0, 0.0, 1.0]);
        assert_eq!(normalize(&col(&[3.0, 3.0, 3.0])).unwrap().values(), &[0.0, 0.0, 0.0]);
        let v = normalize(&col(&[1.0, 2.0, 4.0])).unwrap();
        assert_eq!(v.values()[0], -1.0);
        assert!((v.values()[1] + 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(v.values()[2], 1.0);
    }

    #[test]
    fn normalization_is_invertible() {
        let raw = col(&[2.0, 7.5, 12.0]);
        let norm = normalize(&raw).unwrap();
        let maps = norm.normalization.as_ref().unwrap();
        for (a, b) in raw.values().iter().zip(norm.values()) {
            assert!((maps[0].invert(*b) - a).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(generate(&GeneratorConfig::new(Family::Uniform, 0, 3, 1)).is_err());
        let bad = Family::Gaussian { sigma: 0.1, high_fraction: 1.5, mu_high: 0.9, mu_low: 0.0 };
        assert!(generate(&GeneratorConfig::new(bad, 10, 3, 1)).is_err());
        let bad = Family::Poisson { lambda_min: 5.0, lambda_max: 1.0 };
        assert!(generate(&GeneratorConfig::new(bad, 10, 3, 1)).is_err());
    }

    #[test]
    fn gaussian_high_columns_are_leading() {
        let cfg = GeneratorConfig::new(Family::gaussian(), 100_000, 100, 42);
        assert_eq!(cfg.high_columns(), 10);
        let raw = generate_raw(&cfg).unwrap();
        let means = raw.column_means();
        for (j, m) in means.iter().enumerate() {
            let target = if j < 10 { 0.9 } else { 0.0 };
            assert!((m - target).abs() < 0.002, "column {j}: {m}");
        }
        let norm = normalize(&raw).unwrap();
        assert!(norm.max_abs() <= 1.0);
    }

    #[test]
    fn uniform_columns_center_on_zero() {
        let n = 50_000;
        let cfg = GeneratorConfig::new(Family::Uniform, n, 20, 7);
        let raw = generate_raw(&cfg).unwrap();
        // four standard deviations of the mean of U[-1, 1]
        let tol = 4.0 * 2.0 / (12.0 * n as f64).sqrt();
        for m in raw.column_means() {
            assert!(m.abs() < tol, "{m}");
        }
        assert!(generate(&cfg).unwrap().max_abs() <= 1.0);
    }

    #[test]
    fn poisson_columns_track_their_expectations() {
        let n = 20_000;
        let cfg = GeneratorConfig::new(Family::poisson(), n, 300, 3);
        let lambdas = cfg.column_expectations();
        assert!(lambdas.iter().all(|l| (1.0..=99.0).contains(l)));
        let raw = generate_raw(&cfg).unwrap();
        for (m, l) in raw.column_means().iter().zip(&lambdas) {
            assert!((m - l).abs() < 4.0 * l.sqrt() / (n as f64).sqrt(), "{m} vs {l}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::new(Family::poisson(), 200, 8, 9);
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
        let other = GeneratorConfig::new(Family::poisson(), 200, 8, 10);
        assert_ne!(generate(&cfg).unwrap().values(), generate(&other).unwrap().values());
    }

    #[test]
    fn config_json_shape() {
        let json = r#"{"kind":"gaussian","n":10,"d":4,"seed":5,"sigma":0.0625}"#;
        let cfg: GeneratorConfig = serde_json::from_str(json).unwrap();
        assert_eq!(cfg.family, Family::gaussian());
        let cfg: GeneratorConfig = serde_json::from_str(r#"{"kind":"uniform","n":3,"d":2}"#).unwrap();
        assert_eq!(cfg.family, Family::Uniform);
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let cfg = GeneratorConfig::new(Family::gaussian(), 50, 6, 1);
        let ds = generate(&cfg).unwrap();
        let mut buf = Vec::new();
        write_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("dim_0,dim_1,dim_2,dim_3,dim_4,dim_5\n"));
        let back = read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.values(), ds.values());

        match read_csv("dim_0,dim_1\n1,2\n3\n".as_bytes()) {
            Err(Error::Parse { row: 3, .. }) => {}
            other => panic!("expected ragged-row error, got {other:?}"),
        }
        match read_csv("dim_0,dim_1\n1,x\n".as_bytes()) {
            Err(Error::Parse { row: 2, column: 2, .. }) => {}
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(read_csv("dim_0\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent_and_bounded(
            rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 3), 1..40)
        ) {
            let ds = Dataset::from_rows(&rows).unwrap();
            let once = normalize(&ds).unwrap();
            prop_assert!(once.max_abs() <= 1.0);
            let twice = normalize(&once).unwrap();
            prop_assert_eq!(once.values(), twice.values());
        }
    }
}
