//! Client-side sampling and perturbation; collector-side aggregation and
//! calibration.

use std::collections::HashSet;
use std::io::{Read, Write};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::framework::ValueDistribution;
use crate::mechanisms::{MechanismKind, MechanismSpec, Randomizer};
use crate::stats::ExactSum;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub dim_index: usize,
    pub value: f64,
}

/// Uniform `m`-subset of `0..d`, without replacement.
pub fn sample_dimensions<R: Rng + ?Sized>(d: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m == 0 || m > d {
        return Err(Error::Config(format!("m must satisfy 1 <= m <= d, got m={m}, d={d}")));
    }
    if m == d {
        return Ok((0..d).collect());
    }
    Ok(index::sample(rng, d, m).into_vec())
}

/// Perturbs `m` randomly chosen entries of one user's record. The mechanism
/// must already carry the per-dimension budget `ε/m`.
pub fn perturb_record<P: Randomizer, R: Rng + ?Sized>(
    record: &[f64],
    mechanism: &P,
    m: usize,
    rng: &mut R,
) -> Result<Vec<Report>> {
    let dims = sample_dimensions(record.len(), m, rng)?;
    dims.into_iter()
        .map(|j| {
            Ok(Report { dim_index: j, value: mechanism.randomize(record[j], rng)? })
        })
        .collect()
}

/// Running per-dimension sums and counts.
///
/// Sums are exact, so the estimate does not depend on report order or on
/// how partial states were merged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateState {
    sums: Vec<ExactSum>,
    counts: Vec<u64>,
}

impl AggregateState {
    pub fn new(d: usize) -> Self {
        Self { sums: vec![ExactSum::new(); d], counts: vec![0; d] }
    }

    pub fn d(&self) -> usize {
        self.counts.len()
    }

    pub fn push(&mut self, report: Report) -> Result<()> {
        let d = self.d();
        let j = report.dim_index;
        if j >= d {
            return Err(Error::Input(format!("report dimension {j} out of range for d={d}")));
        }
        self.sums[j].add(report.value);
        self.counts[j] += 1;
        Ok(())
    }

    pub fn extend(&mut self, reports: impl IntoIterator<Item = Report>) -> Result<()> {
        for r in reports {
            self.push(r)?;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &AggregateState) -> Result<()> {
        check_len(self.d(), other.d())?;
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            a.merge(b);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    /// Correctly rounded per-dimension sums.
    pub fn totals(&self) -> Vec<f64> {
        self.sums.iter().map(ExactSum::value).collect()
    }

    pub fn estimate(&self) -> Estimate {
        let theta_hat = self
            .sums
            .iter()
            .zip(&self.counts)
            .map(|(s, &c)| (c > 0).then(|| s.value() / c as f64))
            .collect();
        Estimate { theta_hat, counts: self.counts.clone() }
    }
}

/// Aggregated means. Dimensions nobody reported are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub theta_hat: Vec<Option<f64>>,
    pub counts: Vec<u64>,
}

impl Estimate {
    pub fn missing(&self) -> Vec<usize> {
        self.theta_hat
            .iter()
            .enumerate()
            .filter_map(|(j, v)| v.is_none().then_some(j))
            .collect()
    }

    /// Means with unreported dimensions replaced by `fill`.
    pub fn filled(&self, fill: f64) -> Vec<f64> {
        self.theta_hat.iter().map(|v| v.unwrap_or(fill)).collect()
    }

    /// `{theta_hat, counts, missing}`; missing means serialize as `null`.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "theta_hat": self.theta_hat,
            "counts": self.counts,
            "missing": self.missing(),
        })
    }
}

/// Averages a report stream into per-dimension means.
pub fn aggregate(reports: impl IntoIterator<Item = Report>, d: usize) -> Result<Estimate> {
    let mut state = AggregateState::new(d);
    state.extend(reports)?;
    Ok(state.estimate())
}

/// Runs the full client side for every record and aggregates the reports.
pub fn collect<P: Randomizer, R: Rng + ?Sized>(
    records: impl IntoIterator<Item = impl AsRef<[f64]>>,
    d: usize,
    mechanism: &P,
    m: usize,
    rng: &mut R,
) -> Result<AggregateState> {
    let mut state = AggregateState::new(d);
    for record in records {
        let record = record.as_ref();
        check_len(d, record.len())?;
        if m == d {
            // every dimension is reported; skip building the report list
            for (j, &t) in record.iter().enumerate() {
                state.sums[j].add(mechanism.randomize(t, rng)?);
                state.counts[j] += 1;
            }
        } else {
            state.extend(perturb_record(record, mechanism, m, rng)?)?;
        }
    }
    Ok(state)
}

/// Removes the expected perturbation offset from aggregated means.
///
/// Unbiased mechanisms pass through unchanged. For Square Wave the offset
/// depends on the unknown inputs, so it is averaged over `prior`: one
/// distribution for all dimensions, or one per dimension. `theta_hat` must be
/// expressed in the priors' [`ValueSpace`](crate::framework::ValueSpace).
pub fn calibrate(
    theta_hat: &[f64],
    spec: &MechanismSpec,
    prior: Option<&[ValueDistribution]>,
) -> Result<Vec<f64>> {
    // Laplace noise has zero mean and Piecewise is unbiased
    if spec.kind != MechanismKind::SquareWave {
        return Ok(theta_hat.to_vec());
    }
    let prior = prior.ok_or_else(|| Error::MissingPrior(spec.kind.to_string()))?;
    if prior.len() != 1 {
        check_len(theta_hat.len(), prior.len())?;
    }
    theta_hat
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            let dist = if prior.len() == 1 { &prior[0] } else { &prior[j] };
            Ok(x - dist.mean_bias(spec)?)
        })
        .collect()
}

/// Reads `dim_index,value` rows, with or without a header.
pub fn read_reports<R: Read>(input: R) -> Result<Vec<Report>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(input);
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        if i == 0 && record.get(0).is_some_and(|c| c.trim() == "dim_index") {
            continue;
        }
        let parse_err = |column: usize, message: String| Error::Parse { row: i + 1, column, message };
        if record.len() != 2 {
            return Err(parse_err(record.len().min(2) + 1, format!("expected 2 fields, found {}", record.len())));
        }
        let dim_index = record[0].trim().parse().map_err(|_| parse_err(1, format!("bad index `{}`", &record[0])))?;
        let value = record[1].trim().parse().map_err(|_| parse_err(2, format!("bad value `{}`", &record[1])))?;
        out.push(Report { dim_index, value });
    }
    Ok(out)
}

pub fn write_reports<W: Write>(reports: &[Report], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["dim_index", "value"])?;
    for r in reports {
        w.write_record([r.dim_index.to_string(), format!("{:?}", r.value)])?;
    }
    w.flush()?;
    Ok(())
}

/// Checks that report dimensions within one user's batch are distinct.
pub fn distinct_dimensions(reports: &[Report]) -> bool {
    let mut seen = HashSet::with_capacity(reports.len());
    reports.iter().all(|r| seen.insert(r.dim_index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::Identity;
    use crate::rng::seeded;
    use rand::seq::SliceRandom;

    #[test]
    fn full_sample_when_m_equals_d() {
        let mut rng = seeded(0);
        assert_eq!(sample_dimensions(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(sample_dimensions(5, 0, &mut rng).is_err());
        assert!(sample_dimensions(5, 6, &mut rng).is_err());
    }

    #[test]
    fn sampled_dimensions_are_distinct() {
        let mut rng = seeded(1);
        for _ in 0..200 {
            let mut s = sample_dimensions(30, 7, &mut rng).unwrap();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 7);
            assert!(s.iter().all(|&j| j < 30));
        }
    }

    #[test]
    fn single_dimension_marginals_pass_chi_square() {
        let (d, draws) = (100, 1_000_000);
        let mut rng = seeded(2);
        let mut freq = vec![0u64; d];
        for _ in 0..draws {
            freq[sample_dimensions(d, 1, &mut rng).unwrap()[0]] += 1;
        }
        let expected = draws as f64 / d as f64;
        let chi2: f64 = freq.iter().map(|&f| (f as f64 - expected).powi(2) / expected).sum();
        // χ²(99) upper 1% point
        assert!(chi2 < 134.642, "chi2 = {chi2}");
        for &f in &freq {
            assert!((f as f64 / draws as f64 - 0.01).abs() < 0.0005);
        }
    }

    #[test]
    fn expected_report_counts() {
        let (n, d, m) = (20_000, 40, 6);
        let mut rng = seeded(3);
        let records = vec![vec![0.0; d]; n];
        let state = collect(&records, d, &Identity, m, &mut rng).unwrap();
        assert_eq!(state.counts().iter().sum::<u64>(), (n * m) as u64);
        let expected = (n * m) as f64 / d as f64;
        let sd = (expected * (1.0 - m as f64 / d as f64)).sqrt();
        for &c in state.counts() {
            assert!((c as f64 - expected).abs() < 5.0 * sd);
        }
    }

    #[test]
    fn perturb_record_emits_m_distinct_reports() {
        let spec = MechanismSpec::for_budget(MechanismKind::Piecewise, 1.0, 4).unwrap();
        assert!((spec.eps_per_dim * 4.0 - 1.0).abs() < 1e-15);
        let record: Vec<f64> = (0..10).map(|i| i as f64 / 10.0 - 0.5).collect();
        let a = perturb_record(&record, &spec, 4, &mut seeded(9)).unwrap();
        let b = perturb_record(&record, &spec, 4, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(distinct_dimensions(&a));
        assert!(a.iter().all(|r| r.value.abs() <= spec.report_bound()));
        assert!(perturb_record(&record, &spec, 0, &mut seeded(9)).is_err());
    }

    #[test]
    fn aggregate_basics() {
        let est = aggregate(
            [Report { dim_index: 0, value: 1.0 }, Report { dim_index: 0, value: -1.0 }],
            2,
        )
        .unwrap();
        assert_eq!(est.theta_hat, vec![Some(0.0), None]);
        assert_eq!(est.counts, vec![2, 0]);
        assert_eq!(est.missing(), vec![1]);
        assert!(aggregate([Report { dim_index: 2, value: 0.0 }], 2).is_err());
        let json = est.to_json();
        assert_eq!(json["theta_hat"][1], serde_json::Value::Null);
        assert_eq!(json["missing"][0], 1);
    }

    #[test]
    fn aggregate_is_order_and_grouping_invariant() {
        let mut rng = seeded(4);
        let d = 5;
        let mut reports: Vec<Report> = (0..20_000)
            .map(|_| Report { dim_index: rng.random_range(0..d), value: rng.random_range(-3.0..3.0) })
            .collect();
        let base = aggregate(reports.clone(), d).unwrap();
        reports.shuffle(&mut rng);
        assert_eq!(aggregate(reports.clone(), d).unwrap(), base);

        let mut merged = AggregateState::new(d);
        for chunk in reports.chunks(777) {
            let mut part = AggregateState::new(d);
            part.extend(chunk.iter().copied()).unwrap();
            merged.merge(&part).unwrap();
        }
        assert_eq!(merged.estimate(), base);
    }

    #[test]
    fn identity_mechanism_recovers_true_means() {
        let mut rng = seeded(5);
        let records: Vec<Vec<f64>> =
            (0..500).map(|_| (0..8).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
        let state = collect(&records, 8, &Identity, 8, &mut rng).unwrap();
        let truth = crate::datasets::Dataset::from_rows(&records).unwrap().column_means();
        assert_eq!(state.estimate().filled(f64::NAN), truth);
    }

    #[test]
    fn laplace_pipeline_error_matches_variance() {
        let (n, d, m, eps) = (100_000, 10, 10, 1.0);
        let mut rng = seeded(6);
        let records: Vec<Vec<f64>> =
            (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..=1.0)).collect()).collect();
        let truth = crate::datasets::Dataset::from_rows(&records).unwrap().column_means();
        let spec = MechanismSpec::for_budget(MechanismKind::Laplace, eps, m).unwrap();
        let est = collect(&records, d, &spec, m, &mut rng).unwrap().estimate();
        let lambda = 2.0 * m as f64 / eps;
        for j in 0..d {
            let r = est.counts[j] as f64;
            let tol = 4.0 * (2.0 * lambda * lambda / r).sqrt();
            assert!((est.theta_hat[j].unwrap() - truth[j]).abs() <= tol);
        }
    }

    #[test]
    fn calibration_rules() {
        let theta = vec![0.2, -0.4];
        let lap = MechanismSpec::new(MechanismKind::Laplace, 1.0).unwrap();
        assert_eq!(calibrate(&theta, &lap, None).unwrap(), theta);
        let pw = MechanismSpec::new(MechanismKind::Piecewise, 1.0).unwrap();
        assert_eq!(calibrate(&theta, &pw, None).unwrap(), theta);
        let sw = MechanismSpec::new(MechanismKind::SquareWave, 1.0).unwrap();
        assert!(matches!(calibrate(&theta, &sw, None), Err(Error::MissingPrior(_))));
        let prior = ValueDistribution::point(0.0);
        let out = calibrate(&theta, &sw, Some(&[prior])).unwrap();
        let bias = 2.0 * sw.stats(0.5).unwrap().bias;
        assert!((out[0] - (0.2 - bias)).abs() < 1e-15);
    }

    #[test]
    fn report_csv_round_trip() {
        let reports = vec![Report { dim_index: 3, value: -0.125 }, Report { dim_index: 0, value: 7.5 }];
        let mut buf = Vec::new();
        write_reports(&reports, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "dim_index,value\n3,-0.125\n0,7.5\n");
        assert_eq!(read_reports(buf.as_slice()).unwrap(), reports);
        assert_eq!(read_reports("1,2.0\n".as_bytes()).unwrap(), vec![Report { dim_index: 1, value: 2.0 }]);
        assert!(matches!(read_reports("1,abc\n".as_bytes()), Err(Error::Parse { row: 1, column: 2, .. })));
    }
}
