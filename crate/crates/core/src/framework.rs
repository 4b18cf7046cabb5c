//! Gaussian model of the aggregation error `θ̂ - θ̄`.
//!
//! With `r_j` reports in dimension `j`, the error of the averaged reports is
//! approximately `N(δ_j, σ_j²)`:
//!
//! * unbounded mechanisms (Laplace): `δ_j = E(noise)`, `σ_j² = Var(noise)/r_j`;
//! * bounded mechanisms: `δ_j` and `σ_j²·r_j` are the bias and variance of a
//!   single report averaged over the distribution of true values.
//!
//! Dimensions are independent, so the joint density and the probability of
//! staying inside a per-dimension tolerance box factorize. Products are
//! accumulated in log space.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::mechanisms::{to_unit, MechanismKind, MechanismSpec};
use crate::stats::{exact_sum, ln_normal_mass};

/// Coordinate system of a [`ValueDistribution`]'s support.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueSpace {
    /// `[-1, 1]`, the pipeline's space.
    #[default]
    Symmetric,
    /// `[0, 1]`, Square Wave's native domain. Deviations are then measured
    /// in `[0, 1]` units as well.
    Unit,
}

/// Discrete distribution of the true values in one dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct ValueDistribution {
    pub values: Vec<f64>,
    pub probs: Vec<f64>,
    #[serde(default)]
    pub space: ValueSpace,
}

#[derive(Deserialize)]
struct RawDistribution {
    values: Vec<f64>,
    probs: Vec<f64>,
    #[serde(default)]
    space: ValueSpace,
}

impl TryFrom<RawDistribution> for ValueDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        ValueDistribution::new(raw.values, raw.probs, raw.space)
    }
}

impl ValueDistribution {
    pub fn new(values: Vec<f64>, probs: Vec<f64>, space: ValueSpace) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Input("value distribution has empty support".into()));
        }
        check_len(values.len(), probs.len())?;
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Input("probabilities must be non-negative".into()));
        }
        let total = exact_sum(&probs);
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Input(format!("probabilities sum to {total}, not 1")));
        }
        let (lo, hi) = match space {
            ValueSpace::Symmetric => (-1.0, 1.0),
            ValueSpace::Unit => (0.0, 1.0),
        };
        if let Some(v) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::Input(format!("support value {v} outside [{lo}, {hi}]")));
        }
        Ok(Self { values, probs, space })
    }

    /// Equal weights on `values`.
    pub fn uniform(values: Vec<f64>, space: ValueSpace) -> Result<Self> {
        let p = 1.0 / values.len() as f64;
        let probs = vec![p; values.len()];
        Self::new(values, probs, space)
    }

    pub fn point(value: f64) -> Self {
        Self { values: vec![value], probs: vec![1.0], space: ValueSpace::Symmetric }
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    fn atoms(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values.iter().copied().zip(self.probs.iter().copied())
    }

    // (input to the mechanism, factor converting native deviations into this
    // distribution's space)
    fn native(&self, spec: &MechanismSpec, v: f64) -> (f64, f64) {
        match (spec.kind, self.space) {
            (MechanismKind::SquareWave, ValueSpace::Symmetric) => (to_unit(v), 2.0),
            _ => (v, 1.0),
        }
    }

    /// Average single-report bias `Σ p_z δ(v_z)`.
    pub fn mean_bias(&self, spec: &MechanismSpec) -> Result<f64> {
        self.atoms().try_fold(0.0, |acc, (v, p)| {
            let (t, scale) = self.native(spec, v);
            Ok(acc + p * scale * spec.stats(t)?.bias)
        })
    }

    /// Average single-report variance `Σ p_z Var(t* | v_z)`.
    pub fn mean_variance(&self, spec: &MechanismSpec) -> Result<f64> {
        self.atoms().try_fold(0.0, |acc, (v, p)| {
            let (t, scale) = self.native(spec, v);
            Ok(acc + p * scale * scale * spec.stats(t)?.variance)
        })
    }

    /// Average `E|t* - E(t* | v_z)|^3`.
    pub fn mean_third_abs_moment(&self, spec: &MechanismSpec) -> Result<f64> {
        self.atoms().try_fold(0.0, |acc, (v, p)| {
            let (t, scale) = self.native(spec, v);
            Ok(acc + p * scale.powi(3) * spec.third_abs_central_moment(t)?)
        })
    }
}

/// Equal-width histogram of `samples` with bin midpoints as support. Empty
/// bins are dropped.
pub fn discretize(samples: &[f64], bins: usize) -> Result<ValueDistribution> {
    if samples.is_empty() || bins == 0 {
        return Err(Error::Input("discretize needs samples and at least one bin".into()));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let space = ValueSpace::Symmetric;
    if hi <= lo {
        return Ok(ValueDistribution { values: vec![lo], probs: vec![1.0], space });
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &x in samples {
        let k = (((x - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    let n = samples.len() as f64;
    let (values, probs) = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(k, &c)| (lo + (k as f64 + 0.5) * width, c as f64 / n))
        .unzip();
    Ok(ValueDistribution { values, probs, space })
}

/// `N(δ, σ²)` for one dimension, with the report count it assumes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionModel {
    pub delta: f64,
    pub sigma2: f64,
    pub reports: f64,
}

impl DimensionModel {
    pub fn new(spec: &MechanismSpec, prior: Option<&ValueDistribution>, reports: f64) -> Result<Self> {
        if !(reports > 0.0 && reports.is_finite()) {
            return Err(Error::Input(format!("report count must be positive, got {reports}")));
        }
        if !spec.bounded() {
            let var = spec.stats(0.0)?.variance;
            return Ok(Self { delta: 0.0, sigma2: var / reports, reports });
        }
        let prior = prior.ok_or_else(|| Error::MissingPrior(spec.kind.to_string()))?;
        Ok(Self {
            delta: prior.mean_bias(spec)?,
            sigma2: prior.mean_variance(spec)? / reports,
            reports,
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        let z = x - self.delta;
        -0.5 * (2.0 * PI * self.sigma2).ln() - z * z / (2.0 * self.sigma2)
    }

    /// `ln P(|X| <= half_width)`.
    pub fn ln_central_mass(&self, half_width: f64) -> f64 {
        let s = self.sigma();
        ln_normal_mass((-half_width - self.delta) / s, (half_width - self.delta) / s)
    }

    /// The operational supremum `|δ| + κσ`.
    pub fn operational_sup(&self, kappa: f64) -> f64 {
        self.delta.abs() + kappa * self.sigma()
    }
}

/// Per-dimension Gaussian error model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ModelColumns", into = "ModelColumns")]
pub struct DeviationModel {
    pub dims: Vec<DimensionModel>,
}

#[derive(Serialize, Deserialize)]
struct ModelColumns {
    delta: Vec<f64>,
    sigma2: Vec<f64>,
    reports: Vec<f64>,
}

impl TryFrom<ModelColumns> for DeviationModel {
    type Error = Error;

    fn try_from(c: ModelColumns) -> Result<Self> {
        check_len(c.delta.len(), c.sigma2.len())?;
        check_len(c.delta.len(), c.reports.len())?;
        let dims = c
            .delta
            .into_iter()
            .zip(c.sigma2)
            .zip(c.reports)
            .map(|((delta, sigma2), reports)| DimensionModel { delta, sigma2, reports })
            .collect();
        DeviationModel::new(dims)
    }
}

impl From<DeviationModel> for ModelColumns {
    fn from(m: DeviationModel) -> Self {
        ModelColumns {
            delta: m.dims.iter().map(|x| x.delta).collect(),
            sigma2: m.dims.iter().map(|x| x.sigma2).collect(),
            reports: m.dims.iter().map(|x| x.reports).collect(),
        }
    }
}

impl DeviationModel {
    pub fn new(dims: Vec<DimensionModel>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Input("deviation model needs at least one dimension".into()));
        }
        for (j, m) in dims.iter().enumerate() {
            if !(m.sigma2 > 0.0 && m.sigma2.is_finite() && m.reports > 0.0 && m.delta.is_finite()) {
                return Err(Error::Input(format!("dimension {j}: invalid model {m:?}")));
            }
        }
        Ok(Self { dims })
    }

    /// The same one-dimensional model repeated `d` times.
    pub fn repeated(dim: DimensionModel, d: usize) -> Result<Self> {
        Self::new(vec![dim; d])
    }

    pub fn d(&self) -> usize {
        self.dims.len()
    }

    pub fn delta(&self) -> Vec<f64> {
        self.dims.iter().map(|m| m.delta).collect()
    }

    pub fn sigma2(&self) -> Vec<f64> {
        self.dims.iter().map(|m| m.sigma2).collect()
    }
}

/// Builds the error model for every dimension.
///
/// `priors` holds either one distribution shared by all dimensions or one per
/// dimension; it is required for bounded mechanisms and ignored otherwise.
pub fn deviation_model(
    spec: &MechanismSpec,
    priors: Option<&[ValueDistribution]>,
    reports: &[f64],
) -> Result<DeviationModel> {
    if let Some(p) = priors {
        if p.len() != 1 {
            check_len(reports.len(), p.len())?;
        }
    }
    let dims = reports
        .iter()
        .enumerate()
        .map(|(j, &r)| {
            let prior = priors.map(|p| if p.len() == 1 { &p[0] } else { &p[j] });
            DimensionModel::new(spec, prior, r)
        })
        .collect::<Result<Vec<_>>>()?;
    DeviationModel::new(dims)
}

/// Natural log of the joint error density at `x`.
pub fn ln_deviation_pdf(model: &DeviationModel, x: &[f64]) -> Result<f64> {
    check_len(model.d(), x.len())?;
    Ok(model.dims.iter().zip(x).map(|(m, &xi)| m.ln_pdf(xi)).sum())
}

/// Joint error density at `x`.
pub fn deviation_pdf(model: &DeviationModel, x: &[f64]) -> Result<f64> {
    ln_deviation_pdf(model, x).map(f64::exp)
}

/// Positive per-dimension tolerances `ξ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SupremumTolerance(Vec<f64>);

impl SupremumTolerance {
    pub fn new(xi: Vec<f64>) -> Result<Self> {
        if xi.is_empty() || xi.iter().any(|x| !(*x > 0.0)) {
            return Err(Error::Input("tolerances must be non-empty and positive".into()));
        }
        Ok(Self(xi))
    }

    pub fn uniform(xi: f64, d: usize) -> Result<Self> {
        Self::new(vec![xi; d])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for SupremumTolerance {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<SupremumTolerance> for Vec<f64> {
    fn from(t: SupremumTolerance) -> Self {
        t.0
    }
}

/// `ln P(|θ̂_j - θ̄_j| <= ξ_j for all j)`.
pub fn ln_supremum_probability(model: &DeviationModel, xi: &SupremumTolerance) -> Result<f64> {
    check_len(model.d(), xi.0.len())?;
    Ok(model.dims.iter().zip(&xi.0).map(|(m, &x)| m.ln_central_mass(x)).sum())
}

/// Probability that every dimension's error stays within its tolerance.
pub fn supremum_probability(model: &DeviationModel, xi: &SupremumTolerance) -> Result<f64> {
    ln_supremum_probability(model, xi).map(f64::exp)
}

/// Berry–Esseen bound on the sup-distance between the true CDF of one
/// dimension's error and its Gaussian approximation after `reports` reports.
pub fn berry_esseen_bound(
    spec: &MechanismSpec,
    prior: Option<&ValueDistribution>,
    reports: f64,
) -> Result<f64> {
    if !(reports > 0.0) {
        return Err(Error::Input(format!("report count must be positive, got {reports}")));
    }
    let (rho, var) = if spec.bounded() {
        let prior = prior.ok_or_else(|| Error::MissingPrior(spec.kind.to_string()))?;
        (prior.mean_third_abs_moment(spec)?, prior.mean_variance(spec)?)
    } else {
        (spec.third_abs_central_moment(0.0)?, spec.stats(0.0)?.variance)
    };
    let s3 = var.powf(1.5);
    Ok(0.33554 * (rho + 0.415 * s3) / (s3 * reports.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanisms::MechanismKind::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn case_study_prior() -> ValueDistribution {
        let values = (1..=10).map(|k| f64::from(k) / 10.0).collect();
        ValueDistribution::uniform(values, ValueSpace::Unit).unwrap()
    }

    fn spec(kind: MechanismKind, eps: f64) -> MechanismSpec {
        MechanismSpec::new(kind, eps).unwrap()
    }

    #[test]
    fn distribution_validation() {
        assert!(ValueDistribution::new(vec![], vec![], ValueSpace::Symmetric).is_err());
        assert!(ValueDistribution::new(vec![0.1, 0.2], vec![0.5, 0.6], ValueSpace::Symmetric).is_err());
        assert!(ValueDistribution::new(vec![0.1], vec![-1.0], ValueSpace::Symmetric).is_err());
        assert!(ValueDistribution::new(vec![-0.5], vec![1.0], ValueSpace::Unit).is_err());
        assert!(serde_json::from_str::<ValueDistribution>(r#"{"values":[0.5],"probs":[0.9]}"#).is_err());
        let ok: ValueDistribution = serde_json::from_str(r#"{"values":[0.5,-0.5],"probs":[0.5,0.5]}"#).unwrap();
        assert_eq!(ok.space, ValueSpace::Symmetric);
    }

    #[test]
    fn case_study_piecewise() {
        let m = DimensionModel::new(&spec(Piecewise, 0.001), Some(&case_study_prior()), 10_000.0).unwrap();
        assert_eq!(m.delta, 0.0);
        assert!((m.sigma2 - 533.210).abs() < 0.5, "{}", m.sigma2);
        // peak height 1/√(2π·533.21) ≈ 1/57.881
        let peak = m.ln_pdf(0.0).exp();
        assert!((1.0 / peak - 57.900).abs() / 57.900 < 1e-3, "{}", 1.0 / peak);
    }

    #[test]
    fn case_study_square_wave() {
        let m = DimensionModel::new(&spec(SquareWave, 0.001), Some(&case_study_prior()), 10_000.0).unwrap();
        assert!((m.delta + 0.049).abs() < 0.001, "{}", m.delta);
        assert!((m.sigma2 - 3.365e-5).abs() / 3.365e-5 < 0.05, "{}", m.sigma2);
    }

    #[test]
    fn laplace_model_ignores_prior() {
        let (eps, m, r) = (0.8, 20.0, 500.0);
        let s = spec(Laplace, eps / m);
        let dm = DimensionModel::new(&s, None, r).unwrap();
        let lambda = 2.0 * m / eps;
        assert_eq!(dm.delta, 0.0);
        assert!((dm.sigma2 - 2.0 * lambda * lambda / r).abs() < 1e-9);
    }

    #[test]
    fn bounded_model_needs_prior() {
        assert!(matches!(
            DimensionModel::new(&spec(Piecewise, 1.0), None, 10.0),
            Err(Error::MissingPrior(_))
        ));
        assert!(DimensionModel::new(&spec(Laplace, 1.0), None, 0.0).is_err());
    }

    #[test]
    fn doubling_reports_halves_variance() {
        let prior = case_study_prior();
        for kind in MechanismKind::ALL {
            let s = spec(kind, 0.3);
            let a = DimensionModel::new(&s, Some(&prior), 1000.0).unwrap();
            let b = DimensionModel::new(&s, Some(&prior), 2000.0).unwrap();
            assert_eq!(a.sigma2, 2.0 * b.sigma2, "{kind}");
            assert_eq!(a.delta, b.delta);
        }
    }

    #[test]
    fn symmetric_space_scales_square_wave() {
        let s = spec(SquareWave, 0.5);
        let unit = ValueDistribution::new(vec![0.25, 0.75], vec![0.5, 0.5], ValueSpace::Unit).unwrap();
        let sym = ValueDistribution::new(vec![-0.5, 0.5], vec![0.5, 0.5], ValueSpace::Symmetric).unwrap();
        assert!((sym.mean_bias(&s).unwrap() - 2.0 * unit.mean_bias(&s).unwrap()).abs() < 1e-15);
        assert!((sym.mean_variance(&s).unwrap() - 4.0 * unit.mean_variance(&s).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn pdf_examples() {
        let m = DeviationModel::repeated(DimensionModel { delta: 0.0, sigma2: 1.0, reports: 1.0 }, 1).unwrap();
        assert!((deviation_pdf(&m, &[0.0]).unwrap() - 0.398_942_280_401_432_7).abs() < 1e-15);

        let mut rng = seeded(1);
        for _ in 0..50 {
            let dims: Vec<_> = (0..5)
                .map(|_| DimensionModel {
                    delta: rng.random_range(-1.0..1.0),
                    sigma2: rng.random_range(0.01..4.0),
                    reports: 10.0,
                })
                .collect();
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let model = DeviationModel::new(dims.clone()).unwrap();
            let joint = deviation_pdf(&model, &x).unwrap();
            let product: f64 = dims
                .iter()
                .zip(&x)
                .map(|(m, &xi)| {
                    (-(xi - m.delta).powi(2) / (2.0 * m.sigma2)).exp() / (2.0 * PI * m.sigma2).sqrt()
                })
                .product();
            assert!((joint - product).abs() / product < 1e-12);
        }
    }

    #[test]
    fn log_pdf_survives_high_dimension() {
        let m = DeviationModel::repeated(DimensionModel { delta: 0.0, sigma2: 100.0, reports: 1.0 }, 10_000).unwrap();
        let x = vec![0.0; 10_000];
        let ln = ln_deviation_pdf(&m, &x).unwrap();
        assert!(ln.is_finite());
        assert!((ln - 10_000.0 * (-0.5 * (200.0 * PI).ln())).abs() < 1e-6);
        assert_eq!(deviation_pdf(&m, &x).unwrap(), 0.0);
    }

    #[test]
    fn supremum_probability_limits_and_symmetry() {
        let dims = vec![
            DimensionModel { delta: 0.1, sigma2: 0.04, reports: 1.0 },
            DimensionModel { delta: -0.2, sigma2: 0.5, reports: 1.0 },
            DimensionModel { delta: 0.0, sigma2: 2.0, reports: 1.0 },
        ];
        let model = DeviationModel::new(dims.clone()).unwrap();
        let big = SupremumTolerance::uniform(1e6, 3).unwrap();
        assert!((supremum_probability(&model, &big).unwrap() - 1.0).abs() < 1e-15);
        let tiny = SupremumTolerance::uniform(1e-12, 3).unwrap();
        assert!(supremum_probability(&model, &tiny).unwrap() < 1e-30);
        assert!(SupremumTolerance::uniform(0.0, 3).is_err());

        let xi = SupremumTolerance::new(vec![0.3, 0.7, 1.1]).unwrap();
        let p = supremum_probability(&model, &xi).unwrap();
        let rev = DeviationModel::new(dims.iter().rev().copied().collect()).unwrap();
        let rev_xi = SupremumTolerance::new(vec![1.1, 0.7, 0.3]).unwrap();
        assert!((supremum_probability(&rev, &rev_xi).unwrap() - p).abs() < 1e-15);

        let mut prev = 0.0;
        for k in 1..100 {
            let xi = SupremumTolerance::new(vec![0.3, 0.05 * f64::from(k), 1.1]).unwrap();
            let q = supremum_probability(&model, &xi).unwrap();
            assert!(q >= prev);
            prev = q;
        }
    }

    #[test]
    fn table_piecewise_entries() {
        let dim = DimensionModel::new(&spec(Piecewise, 0.001), Some(&case_study_prior()), 10_000.0).unwrap();
        let model = DeviationModel::repeated(dim, 1).unwrap();
        // high-precision oracle values; near-linear in xi since sigma is large
        for (xi, expect) in [(0.001, 3.4553e-5), (0.01, 3.4553e-4), (0.05, 1.7277e-3), (0.1, 3.4553e-3)] {
            let p = supremum_probability(&model, &SupremumTolerance::uniform(xi, 1).unwrap()).unwrap();
            assert!((p - expect).abs() <= 1e-3 * expect, "xi={xi}: {p}");
        }
    }

    #[test]
    fn laplace_berry_esseen_example() {
        let s = spec(Laplace, 1.0);
        let b = berry_esseen_bound(&s, None, 1000.0).unwrap();
        assert!((b - 0.0157).abs() < 0.0005, "{b}");
        let ratio = berry_esseen_bound(&s, None, 4000.0).unwrap() / b;
        assert!((ratio - 0.5).abs() < 1e-9);
        assert!((s.third_abs_central_moment(0.0).unwrap() - 24.0).abs() < 1e-12);
    }

    #[test]
    fn bounded_berry_esseen_is_finite() {
        let prior = case_study_prior();
        for kind in [Piecewise, SquareWave] {
            let b = berry_esseen_bound(&spec(kind, 0.5), Some(&prior), 2000.0).unwrap();
            assert!(b.is_finite() && b > 0.0 && b < 0.05, "{kind} {b}");
        }
    }

    #[test]
    fn discretize_examples() {
        let single = discretize(&[0.3; 10], 5).unwrap();
        assert_eq!(single.values, vec![0.3]);
        assert_eq!(single.probs, vec![1.0]);

        let mut rng = seeded(2);
        let xs: Vec<f64> = (0..100_000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dist = discretize(&xs, 10).unwrap();
        assert_eq!(dist.values.len(), 10);
        for p in &dist.probs {
            assert!((p - 0.1).abs() < 0.01);
        }
        assert!((exact_sum(&dist.probs) - 1.0).abs() < 1e-15);
        assert!(discretize(&[], 3).is_err());
        assert!(discretize(&[1.0], 0).is_err());
    }

    #[test]
    fn model_json_round_trip() {
        let model = deviation_model(&spec(Laplace, 0.1), None, &[100.0, 200.0]).unwrap();
        let json = serde_json::to_value(&model).unwrap();
        assert_eq!(json["delta"], serde_json::json!([0.0, 0.0]));
        assert_eq!(json["sigma2"][0], 8.0);
        let back: DeviationModel = serde_json::from_value(json).unwrap();
        assert_eq!(back, model);
        assert!(serde_json::from_str::<DeviationModel>(r#"{"delta":[0],"sigma2":[-1],"reports":[1]}"#).is_err());
    }
}
