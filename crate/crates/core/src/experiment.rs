//! Seeded end-to-end runs: accuracy experiments, Monte Carlo validation of
//! the deviation model, and supremum-probability tables.

use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::collector::{calibrate, collect};
use crate::datasets::{generate, load_csv, Dataset, GeneratorConfig};
use crate::error::{check_len, Error, Result};
use crate::framework::{
    berry_esseen_bound, deviation_model, discretize, supremum_probability, DeviationModel, DimensionModel,
    SupremumTolerance, ValueDistribution, ValueSpace,
};
use crate::hdr4me::{recalibrate, RecalibrationConfig, Regularizer};
use crate::mechanisms::{MechanismKind, MechanismSpec, Randomizer};
use crate::rng::tagged;
use crate::stats::{exact_sum, ks_statistic, mean, normal_cdf, variance};

/// `(1/d) Σ (est_j - true_j)²`.
pub fn mse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    check_len(truth.len(), estimate.len())?;
    if truth.is_empty() {
        return Err(Error::Input("mse of empty vectors".into()));
    }
    let sq: Vec<f64> = estimate.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).collect();
    Ok(exact_sum(&sq) / truth.len() as f64)
}

/// `‖est - true‖₂ = √(d · MSE)`.
pub fn l2_deviation(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    Ok((mse(estimate, truth)? * truth.len() as f64).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Generator(GeneratorConfig),
    /// A numeric CSV; columns are min–max normalized onto `[-1, 1]`.
    Csv(PathBuf),
}

impl DataSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DataSource::Generator(g) => generate(g),
            DataSource::Csv(path) => crate::datasets::normalize(&load_csv(path)?),
        }
    }
}

fn default_trials() -> usize {
    100
}
fn default_methods() -> Vec<Regularizer> {
    vec![Regularizer::None, Regularizer::L1, Regularizer::L2]
}
fn default_kappa() -> f64 {
    3.0
}
fn default_clamp() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}
fn default_prior_bins() -> usize {
    32
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub mechanism: MechanismKind,
    /// Total per-user budget, split evenly over the `m` reported dimensions.
    pub eps: f64,
    /// Dimensions reported per user; `None` means all of them.
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "default_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_methods")]
    pub methods: Vec<Regularizer>,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_clamp")]
    pub clamp: f64,
    #[serde(default = "default_true")]
    pub apply_threshold: bool,
    /// Subtract the expected Square Wave offset before re-calibrating.
    #[serde(default)]
    pub calibrate: bool,
    /// Histogram resolution of the per-dimension priors bounded mechanisms need.
    #[serde(default = "default_prior_bins")]
    pub prior_bins: usize,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(source: DataSource, mechanism: MechanismKind, eps: f64) -> Self {
        Self {
            source,
            mechanism,
            eps,
            m: None,
            trials: default_trials(),
            seed: 0,
            methods: default_methods(),
            kappa: default_kappa(),
            clamp: default_clamp(),
            apply_threshold: true,
            calibrate: false,
            prior_bins: default_prior_bins(),
            out: None,
        }
    }

    fn validate(&self, d: usize) -> Result<usize> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        if self.prior_bins == 0 {
            return Err(Error::Config("prior_bins must be at least 1".into()));
        }
        let m = self.m.unwrap_or(d);
        if m == 0 || m > d {
            return Err(Error::Config(format!("m must satisfy 1 <= m <= d, got m={m}, d={d}")));
        }
        for method in &self.methods {
            self.recalibration(*method).validate()?;
        }
        Ok(m)
    }

    fn recalibration(&self, regularizer: Regularizer) -> RecalibrationConfig {
        RecalibrationConfig {
            regularizer,
            kappa: self.kappa,
            clamp: self.clamp,
            apply_threshold: self.apply_threshold,
            theta_bar_proxy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Regularizer,
    pub mse_mean: f64,
    pub mse_std: f64,
    /// Per-trial MSE, in trial order.
    pub mse: Vec<f64>,
    /// Trials in which this method's MSE was strictly below the baseline's.
    pub wins: usize,
    pub theta_star_last: Vec<f64>,
    pub improvement_probability_last: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub seed: u64,
    pub elapsed_seconds: f64,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub spec: MechanismSpec,
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub baseline_mse: Vec<f64>,
    pub methods: Vec<MethodSummary>,
    pub theta_bar: Vec<f64>,
    pub theta_hat_last: Vec<f64>,
    pub metadata: RunMetadata,
}

struct TrialOutcome {
    theta_hat: Vec<f64>,
    baseline: f64,
    methods: Vec<(f64, Vec<f64>, f64)>,
}

/// Per-dimension histogram priors drawn from the data itself.
pub fn empirical_priors(dataset: &Dataset, bins: usize) -> Result<Vec<ValueDistribution>> {
    (0..dataset.d()).map(|j| discretize(&dataset.column(j), bins)).collect()
}

/// Perturb, aggregate, optionally calibrate and re-calibrate, `trials` times.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport> {
    let dataset = config.source.load()?;
    run_experiment_on(config, &dataset)
}

/// [`run_experiment`] on an already loaded, `[-1, 1]`-valued dataset.
pub fn run_experiment_on(config: &ExperimentConfig, dataset: &Dataset) -> Result<ExperimentReport> {
    let start = Instant::now();
    let (n, d) = (dataset.n(), dataset.d());
    let m = config.validate(d)?;
    let spec = MechanismSpec::for_budget(config.mechanism, config.eps, m)?;
    let sampler = spec.sampler();
    let theta_bar = dataset.column_means();
    let priors = if spec.bounded() { Some(empirical_priors(dataset, config.prior_bins)?) } else { None };

    let run_trial = |trial: usize| -> Result<TrialOutcome> {
        let mut rng = tagged(config.seed, "trial", trial as u64);
        let state = collect(dataset.rows(), d, &sampler, m, &mut rng)?;
        let mut theta_hat = state.estimate().filled(0.0);
        let reports: Vec<f64> = state.counts().iter().map(|&c| c.max(1) as f64).collect();
        let mut model = deviation_model(&spec, priors.as_deref(), &reports)?;
        if config.calibrate {
            theta_hat = calibrate(&theta_hat, &spec, priors.as_deref())?;
            for dim in &mut model.dims {
                dim.delta = 0.0;
            }
        }
        let baseline = mse(&theta_hat, &theta_bar)?;
        let methods = config
            .methods
            .iter()
            .map(|&method| {
                let rc = recalibrate(&theta_hat, &model, &config.recalibration(method))?;
                Ok((mse(&rc.theta_star, &theta_bar)?, rc.theta_star, rc.improvement_probability))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TrialOutcome { theta_hat, baseline, methods })
    };

    let outcomes: Vec<TrialOutcome> = (0..config.trials)
        .into_par_iter()
        .map(|t| run_trial(t).map_err(|e| Error::Trial { trial: t, source: Box::new(e) }))
        .collect::<Result<_>>()?;

    let baseline_mse: Vec<f64> = outcomes.iter().map(|o| o.baseline).collect();
    let last = outcomes.last().expect("at least one trial");
    let methods = config
        .methods
        .iter()
        .enumerate()
        .map(|(k, &method)| {
            let per_trial: Vec<f64> = outcomes.iter().map(|o| o.methods[k].0).collect();
            MethodSummary {
                method,
                mse_mean: mean(&per_trial),
                mse_std: if per_trial.len() > 1 { variance(&per_trial).sqrt() } else { 0.0 },
                wins: per_trial.iter().zip(&baseline_mse).filter(|(a, b)| a < b).count(),
                mse: per_trial,
                theta_star_last: last.methods[k].1.clone(),
                improvement_probability_last: last.methods[k].2,
            }
        })
        .collect();
    Ok(ExperimentReport {
        config: config.clone(),
        spec,
        n,
        d,
        m,
        baseline_mse,
        methods,
        theta_bar,
        theta_hat_last: last.theta_hat.clone(),
        metadata: RunMetadata {
            seed: config.seed,
            elapsed_seconds: start.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
        },
    })
}

/// `trial, baseline, <method>...` MSE table.
pub fn write_mse_csv<W: Write>(report: &ExperimentReport, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["trial".to_string(), "baseline".to_string()];
    header.extend(report.methods.iter().map(|m| m.method.to_string()));
    w.write_record(&header)?;
    for (t, base) in report.baseline_mse.iter().enumerate() {
        let mut row = vec![t.to_string(), format!("{base:?}")];
        row.extend(report.methods.iter().map(|m| format!("{:?}", m.mse[t])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn default_validation_trials() -> usize {
    1000
}
fn default_histogram_bins() -> usize {
    30
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    pub source: DataSource,
    pub mechanism: MechanismKind,
    pub eps: f64,
    #[serde(default)]
    pub m: Option<usize>,
    #[serde(default = "default_validation_trials")]
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Tracked dimension.
    #[serde(default)]
    pub dimension: usize,
    #[serde(default = "default_histogram_bins")]
    pub bins: usize,
}

impl ValidationConfig {
    pub fn new(source: DataSource, mechanism: MechanismKind, eps: f64) -> Self {
        Self {
            source,
            mechanism,
            eps,
            m: None,
            trials: default_validation_trials(),
            seed: 0,
            dimension: 0,
            bins: default_histogram_bins(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub mass: f64,
    /// Empirical density `mass / width`.
    pub density: f64,
    /// Model density at the bin midpoint.
    pub model_pdf: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub config: ValidationConfig,
    pub spec: MechanismSpec,
    pub model: DimensionModel,
    pub ks_statistic: f64,
    pub berry_esseen: f64,
    pub deviations: Vec<f64>,
    pub histogram: Vec<HistogramBin>,
}

/// Compares the empirical distribution of `θ̂_j - θ̄_j` over many runs with
/// the Gaussian model.
///
/// Only the tracked dimension is simulated. A user's uniform `m`-subset
/// contains it with probability `m/d`, independently of other users, so each
/// user is included by a Bernoulli draw; this is the same distribution of
/// `θ̂_j` as perturbing every sampled dimension.
pub fn validate_framework(config: &ValidationConfig) -> Result<ValidationReport> {
    let dataset = config.source.load()?;
    validate_framework_on(config, &dataset)
}

pub fn validate_framework_on(config: &ValidationConfig, dataset: &Dataset) -> Result<ValidationReport> {
    if config.trials < 200 {
        return Err(Error::Config(format!("validation needs at least 200 trials, got {}", config.trials)));
    }
    if config.bins == 0 {
        return Err(Error::Config("bins must be at least 1".into()));
    }
    let (n, d) = (dataset.n(), dataset.d());
    if config.dimension >= d {
        return Err(Error::Config(format!("dimension {} out of range for d={d}", config.dimension)));
    }
    let m = config.m.unwrap_or(d);
    if m == 0 || m > d {
        return Err(Error::Config(format!("m must satisfy 1 <= m <= d, got m={m}, d={d}")));
    }
    let spec = MechanismSpec::for_budget(config.mechanism, config.eps, m)?;
    let sampler = spec.sampler();
    let column = dataset.column(config.dimension);
    let truth = exact_sum(&column) / n as f64;
    let prior = ValueDistribution::uniform(column.clone(), ValueSpace::Symmetric)?;
    let p = m as f64 / d as f64;
    let r = n as f64 * p;
    let model = DimensionModel::new(&spec, Some(&prior), r)?;
    let berry_esseen = berry_esseen_bound(&spec, Some(&prior), r)?;

    let deviations: Vec<f64> = (0..config.trials)
        .into_par_iter()
        .map(|t| -> Result<f64> {
            let mut rng = tagged(config.seed, "validate", t as u64);
            let mut reports = Vec::with_capacity((r * 1.2) as usize + 16);
            for &x in &column {
                if m == d || rng.random_bool(p) {
                    reports.push(sampler.randomize(x, &mut rng)?);
                }
            }
            if reports.is_empty() {
                return Err(Error::Trial {
                    trial: t,
                    source: Box::new(Error::Input("no user reported the tracked dimension".into())),
                });
            }
            Ok(exact_sum(&reports) / reports.len() as f64 - truth)
        })
        .collect::<Result<_>>()?;

    let sigma = model.sigma();
    let ks = ks_statistic(&deviations, |x| normal_cdf((x - model.delta) / sigma));
    let histogram = histogram(&deviations, config.bins, &model);
    Ok(ValidationReport {
        config: config.clone(),
        spec,
        model,
        ks_statistic: ks,
        berry_esseen,
        deviations,
        histogram,
    })
}

fn histogram(samples: &[f64], bins: usize, model: &DimensionModel) -> Vec<HistogramBin> {
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &x in samples {
        let k = (((x - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let total = samples.len() as f64;
    counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| {
            let a = lo + k as f64 * width;
            let mass = c as f64 / total;
            HistogramBin {
                lo: a,
                hi: a + width,
                mass,
                density: mass / width,
                model_pdf: model.ln_pdf(a + width / 2.0).exp(),
            }
        })
        .collect()
}

/// Ten equally likely values `0.1, 0.2, …, 1.0` on the `[0, 1]` scale.
pub fn case_study_prior() -> ValueDistribution {
    let values = (1..=10).map(|k| f64::from(k) / 10.0).collect();
    ValueDistribution::uniform(values, ValueSpace::Unit).expect("valid support")
}

fn default_bench_mechanisms() -> Vec<MechanismKind> {
    vec![MechanismKind::Piecewise, MechanismKind::SquareWave]
}
fn default_xi() -> Vec<f64> {
    vec![0.001, 0.01, 0.05, 0.1]
}
fn default_bench_eps() -> f64 {
    0.1
}
fn default_bench_m() -> usize {
    100
}
fn default_bench_reports() -> f64 {
    10_000.0
}
fn default_bench_dims() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(default = "default_bench_mechanisms")]
    pub mechanisms: Vec<MechanismKind>,
    #[serde(default = "default_xi")]
    pub xi: Vec<f64>,
    #[serde(default = "default_bench_eps")]
    pub eps: f64,
    #[serde(default = "default_bench_m")]
    pub m: usize,
    /// Reports per dimension.
    #[serde(default = "default_bench_reports")]
    pub reports: f64,
    /// Dimensions the supremum must hold in jointly.
    #[serde(default = "default_bench_dims")]
    pub dims: usize,
    #[serde(default = "case_study_prior")]
    pub prior: ValueDistribution,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            mechanisms: default_bench_mechanisms(),
            xi: default_xi(),
            eps: default_bench_eps(),
            m: default_bench_m(),
            reports: default_bench_reports(),
            dims: default_bench_dims(),
            prior: case_study_prior(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mechanism: MechanismKind,
    pub xi: f64,
    pub probability: f64,
    pub delta: f64,
    pub sigma2: f64,
}

/// Probability that every dimension's deviation stays within `ξ`, for each
/// mechanism and each `ξ` on the grid.
pub fn benchmark_mechanisms(config: &BenchConfig) -> Result<Vec<BenchRow>> {
    if config.xi.is_empty() || config.mechanisms.is_empty() {
        return Err(Error::Config("benchmark needs at least one mechanism and one xi".into()));
    }
    if config.dims == 0 {
        return Err(Error::Config("dims must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for &kind in &config.mechanisms {
        let spec = MechanismSpec::for_budget(kind, config.eps, config.m)?;
        let dim = DimensionModel::new(&spec, Some(&config.prior), config.reports)?;
        let model = DeviationModel::repeated(dim, config.dims)?;
        for &xi in &config.xi {
            let p = supremum_probability(&model, &SupremumTolerance::uniform(xi, config.dims)?)?;
            rows.push(BenchRow { mechanism: kind, xi, probability: p, delta: dim.delta, sigma2: dim.sigma2 });
        }
    }
    Ok(rows)
}

pub fn write_bench_csv<W: Write>(rows: &[BenchRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(["mechanism", "xi", "probability", "delta", "sigma2"])?;
    for r in rows {
        w.write_record([
            r.mechanism.to_string(),
            format!("{:?}", r.xi),
            format!("{:?}", r.probability),
            format!("{:?}", r.delta),
            format!("{:?}", r.sigma2),
        ])?;
    }
    w.flush()?;
    Ok(())
}
