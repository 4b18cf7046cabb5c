//! Categorical frequency estimation through one-hot (histogram) encoding.
//!
//! Each category becomes a 0/1 entry; the entries are mapped to `{-1, 1}`,
//! perturbed and averaged like any numeric dimension, then mapped back to
//! frequencies.

use std::io::{Read, Write};

use rand::distr::weighted::WeightedIndex;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::collector::{sample_dimensions, AggregateState, Report};
use crate::error::{check_len, Error, Result};
use crate::framework::{deviation_model, ValueDistribution, ValueSpace};
use crate::hdr4me::{recalibrate, RecalibrationConfig};
use crate::mechanisms::{MechanismKind, MechanismSpec, Randomizer};
use crate::rng::tagged;

/// Category counts `v_j ≥ 2` per dimension.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema")]
pub struct CategoricalSchema {
    pub categories: Vec<usize>,
}

#[derive(Deserialize)]
struct RawSchema {
    categories: Vec<usize>,
}

impl TryFrom<RawSchema> for CategoricalSchema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        CategoricalSchema::new(raw.categories)
    }
}

impl CategoricalSchema {
    pub fn new(categories: Vec<usize>) -> Result<Self> {
        if categories.is_empty() {
            return Err(Error::Config("schema needs at least one dimension".into()));
        }
        if let Some((j, v)) = categories.iter().enumerate().find(|(_, &v)| v < 2) {
            return Err(Error::Config(format!("dimension {j} has {v} categories; at least 2 required")));
        }
        Ok(Self { categories })
    }

    pub fn d(&self) -> usize {
        self.categories.len()
    }

    /// Start of each dimension's block in the flattened entry vector.
    pub fn offsets(&self) -> Vec<usize> {
        self.categories
            .iter()
            .scan(0, |acc, &v| {
                let start = *acc;
                *acc += v;
                Some(start)
            })
            .collect()
    }

    pub fn entries(&self) -> usize {
        self.categories.iter().sum()
    }

    fn split<T: Clone>(&self, flat: &[T]) -> Vec<Vec<T>> {
        self.offsets().iter().zip(&self.categories).map(|(&o, &v)| flat[o..o + v].to_vec()).collect()
    }
}

/// One-hot vector of length `v` with a 1 at `index`.
pub fn encode(index: usize, v: usize) -> Result<Vec<f64>> {
    if index >= v {
        return Err(Error::Input(format!("category {index} out of range for {v} categories")));
    }
    let mut out = vec![0.0; v];
    out[index] = 1.0;
    Ok(out)
}

/// Row-major category indices.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoricalDataset {
    schema: CategoricalSchema,
    values: Vec<usize>,
    n: usize,
}

impl CategoricalDataset {
    pub fn new(schema: CategoricalSchema, values: Vec<usize>) -> Result<Self> {
        let d = schema.d();
        if !values.len().is_multiple_of(d) {
            return Err(Error::Input(format!("{} values do not fill rows of width {d}", values.len())));
        }
        for (k, &x) in values.iter().enumerate() {
            let v = schema.categories[k % d];
            if x >= v {
                return Err(Error::Input(format!(
                    "row {}, dimension {}: category {x} out of range for {v} categories",
                    k / d,
                    k % d
                )));
            }
        }
        let n = values.len() / d;
        Ok(Self { schema, values, n })
    }

    pub fn from_rows(schema: CategoricalSchema, rows: &[Vec<usize>]) -> Result<Self> {
        let mut values = Vec::with_capacity(rows.len() * schema.d());
        for row in rows {
            check_len(schema.d(), row.len())?;
            values.extend_from_slice(row);
        }
        Self::new(schema, values)
    }

    pub fn schema(&self) -> &CategoricalSchema {
        &self.schema
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn row(&self, i: usize) -> &[usize] {
        let d = self.schema.d();
        &self.values[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[usize]> {
        self.values.chunks_exact(self.schema.d())
    }

    /// Empirical category frequencies per dimension.
    pub fn frequencies(&self) -> Vec<Vec<f64>> {
        let mut counts: Vec<Vec<usize>> = self.schema.categories.iter().map(|&v| vec![0; v]).collect();
        for row in self.rows() {
            for (c, &x) in counts.iter_mut().zip(row) {
                c[x] += 1;
            }
        }
        counts
            .into_iter()
            .map(|c| c.into_iter().map(|k| k as f64 / self.n as f64).collect())
            .collect()
    }
}

/// Draws `n` users whose categories in dimension `j` follow a random
/// distribution (flat Dirichlet) fixed per dimension by `seed`.
pub fn generate_categorical(schema: &CategoricalSchema, n: usize, seed: u64) -> Result<CategoricalDataset> {
    let samplers: Vec<WeightedIndex<f64>> = schema
        .categories
        .iter()
        .enumerate()
        .map(|(j, &v)| {
            let mut rng = tagged(seed, "category-weights", j as u64);
            let w: Vec<f64> = (0..v).map(|_| Exp1.sample(&mut rng)).collect();
            WeightedIndex::new(w).map_err(|e| Error::Input(e.to_string()))
        })
        .collect::<Result<_>>()?;
    let mut rng = tagged(seed, "categorical-users", 0);
    let mut values = Vec::with_capacity(n * schema.d());
    for _ in 0..n {
        values.extend(samplers.iter().map(|s| s.sample(&mut rng)));
    }
    CategoricalDataset::new(schema.clone(), values)
}

/// Budget for one entry of a one-hot vector.
///
/// Changing a user's category flips two entries in each of the `m` reported
/// dimensions, so each entry gets `ε / (2m)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBudget {
    pub total_eps: f64,
    pub m: usize,
    pub per_entry: f64,
}

impl FrequencyBudget {
    pub fn new(total_eps: f64, m: usize) -> Result<Self> {
        if !(total_eps > 0.0 && total_eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {total_eps}")));
        }
        if m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        let k = 2.0 * m as f64;
        let mut per_entry = total_eps / k;
        // rounding must never overspend
        while per_entry * k > total_eps {
            per_entry = per_entry.next_down();
        }
        Ok(Self { total_eps, m, per_entry })
    }

    /// Worst-case budget one user spends.
    pub fn spent(&self) -> f64 {
        2.0 * self.m as f64 * self.per_entry
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyEstimate {
    pub budget: FrequencyBudget,
    /// Per-dimension frequencies before post-processing; may leave `[0, 1]`.
    pub frequencies: Vec<Vec<f64>>,
    /// Flattened entry means on the `[-1, 1]` scale.
    pub entry_means: Vec<f64>,
    pub entry_counts: Vec<u64>,
}

fn to_frequency(x: f64) -> f64 {
    (x + 1.0) / 2.0
}

/// Frequencies with an arbitrary per-entry randomizer. Dimensions no user
/// reported come back uniform.
pub fn estimate_frequencies_with<P: Randomizer, R: Rng + ?Sized>(
    data: &CategoricalDataset,
    randomizer: &P,
    budget: FrequencyBudget,
    rng: &mut R,
) -> Result<FrequencyEstimate> {
    let schema = data.schema();
    let (d, m) = (schema.d(), budget.m);
    if m > d {
        return Err(Error::Config(format!("m must satisfy 1 <= m <= d, got m={m}, d={d}")));
    }
    let offsets = schema.offsets();
    let mut state = AggregateState::new(schema.entries());
    for row in data.rows() {
        for j in sample_dimensions(d, m, rng)? {
            for k in 0..schema.categories[j] {
                let t = if k == row[j] { 1.0 } else { -1.0 };
                state.push(Report { dim_index: offsets[j] + k, value: randomizer.randomize(t, rng)? })?;
            }
        }
    }
    let uniform: Vec<f64> = schema.categories.iter().flat_map(|&v| vec![1.0 / v as f64; v]).collect();
    let counts = state.counts().to_vec();
    // (Σx + c) / 2c is exact for noiseless ±1 reports, unlike ((Σx / c) + 1) / 2
    let flat: Vec<f64> = state
        .totals()
        .iter()
        .zip(&counts)
        .zip(&uniform)
        .map(|((&s, &c), &u)| if c > 0 { (s + c as f64) / (2.0 * c as f64) } else { u })
        .collect();
    let entry_means = flat.iter().map(|&f| 2.0 * f - 1.0).collect();
    Ok(FrequencyEstimate { budget, frequencies: schema.split(&flat), entry_means, entry_counts: counts })
}

/// Frequencies under `kind` with each entry perturbed at `ε / (2m)`.
pub fn estimate_frequencies<R: Rng + ?Sized>(
    data: &CategoricalDataset,
    kind: MechanismKind,
    m: usize,
    total_eps: f64,
    rng: &mut R,
) -> Result<FrequencyEstimate> {
    let budget = FrequencyBudget::new(total_eps, m)?;
    let spec = MechanismSpec::new(kind, budget.per_entry)?;
    estimate_frequencies_with(data, &spec.sampler(), budget, rng)
}

/// Re-calibrates the underlying entry means and returns the resulting
/// (unprocessed) frequencies.
///
/// Bounded mechanisms model each entry as a two-point `{-1, 1}` variable
/// whose probability is the clipped estimated frequency.
pub fn enhance_frequencies(
    schema: &CategoricalSchema,
    estimate: &FrequencyEstimate,
    kind: MechanismKind,
    config: &RecalibrationConfig,
) -> Result<Vec<Vec<f64>>> {
    check_len(schema.entries(), estimate.entry_means.len())?;
    let spec = MechanismSpec::new(kind, estimate.budget.per_entry)?;
    let reports: Vec<f64> = estimate.entry_counts.iter().map(|&c| c.max(1) as f64).collect();
    let priors = if spec.bounded() {
        let p = estimate
            .entry_means
            .iter()
            .map(|&x| {
                let f = to_frequency(x).clamp(0.0, 1.0);
                ValueDistribution::new(vec![-1.0, 1.0], vec![1.0 - f, f], ValueSpace::Symmetric)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(p)
    } else {
        None
    };
    let model = deviation_model(&spec, priors.as_deref(), &reports)?;
    let rc = recalibrate(&estimate.entry_means, &model, config)?;
    let flat: Vec<f64> = rc.theta_star.iter().map(|&x| to_frequency(x)).collect();
    Ok(schema.split(&flat))
}

/// Projects onto the simplex by clipping negatives and renormalizing; falls
/// back to uniform when nothing positive remains.
pub fn postprocess(frequencies: &[f64]) -> Vec<f64> {
    let clipped: Vec<f64> = frequencies.iter().map(|&f| if f > 0.0 { f } else { 0.0 }).collect();
    let total: f64 = clipped.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return vec![1.0 / frequencies.len() as f64; frequencies.len()];
    }
    clipped.into_iter().map(|f| f / total).collect()
}

/// Reads category indices, one user per row, under a header row. Rows and
/// columns in errors are 1-based with the header as row 1.
pub fn read_categorical_csv<R: Read>(input: R, schema: &CategoricalSchema) -> Result<CategoricalDataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(input);
    let d = schema.d();
    let width = reader.headers()?.len();
    if width != d {
        return Err(Error::LengthMismatch { expected: d, actual: width });
    }
    let mut values = Vec::new();
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
            let x: usize = cell.trim().parse().map_err(|_| Error::Parse {
                row,
                column: j + 1,
                message: format!("not a category index: `{cell}`"),
            })?;
            if x >= schema.categories[j] {
                return Err(Error::Parse {
                    row,
                    column: j + 1,
                    message: format!("category {x} out of range for {} categories", schema.categories[j]),
                });
            }
            values.push(x);
        }
    }
    if values.is_empty() {
        return Err(Error::Input("categorical file has no rows".into()));
    }
    CategoricalDataset::new(schema.clone(), values)
}

pub fn write_categorical_csv<W: Write>(data: &CategoricalDataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record((0..data.schema().d()).map(|j| format!("dim_{j}")))?;
    for row in data.rows() {
        w.write_record(row.iter().map(|x| x.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
