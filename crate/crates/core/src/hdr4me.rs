//! HDR4ME re-calibration of aggregated means.
//!
//! The aggregate `θ̂` is replaced by the minimizer of
//! `½‖θ - θ̂‖² + R(λ ∘ θ)` with `R` either the L1 norm or the squared L2
//! norm. Both problems separate by coordinate and have closed forms
//! (soft thresholding and uniform shrinkage), so no iterative solver is
//! needed.
//!
//! Weights come from the deviation model: the error in dimension `j` is
//! `N(δ_j, σ_j²)`, whose supremum is infinite, so `|δ_j| + κσ_j` stands in
//! for it. Regularization only helps when that error is large (above 1 for
//! L1, above 2 for L2); with gating on, dimensions below the threshold pass
//! through untouched.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::framework::DeviationModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regularizer {
    None,
    L1,
    L2,
}

impl Regularizer {
    pub fn name(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::L1 => "l1",
            Regularizer::L2 => "l2",
        }
    }

    /// Error magnitude above which the regularizer is expected to help.
    pub fn threshold(self) -> f64 {
        match self {
            Regularizer::None => f64::INFINITY,
            Regularizer::L1 => 1.0,
            Regularizer::L2 => 2.0,
        }
    }
}

impl fmt::Display for Regularizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regularizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "baseline" => Ok(Regularizer::None),
            "l1" => Ok(Regularizer::L1),
            "l2" => Ok(Regularizer::L2),
            other => Err(Error::Config(format!("unknown regularizer `{other}`"))),
        }
    }
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecalibrationConfig {
    pub regularizer: Regularizer,
    /// Multiplier on `σ` in the operational supremum.
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    /// Lower bound on `|θ̄_j|` proxies in L2 weights.
    #[serde(default = "default_clamp")]
    pub clamp: f64,
    /// Zero out weights whose dimension misses the regularizer's threshold.
    #[serde(default = "default_true")]
    pub apply_threshold: bool,
    /// Stand-in for the unknown `θ̄` in L2 weights; defaults to `θ̂ - δ`.
    #[serde(default)]
    pub theta_bar_proxy: Option<Vec<f64>>,
}

impl RecalibrationConfig {
    pub fn new(regularizer: Regularizer) -> Self {
        Self {
            regularizer,
            kappa: default_kappa(),
            clamp: default_clamp(),
            apply_threshold: true,
            theta_bar_proxy: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Config(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.clamp > 0.0) {
            return Err(Error::Config(format!("clamp must be positive, got {}", self.clamp)));
        }
        Ok(())
    }
}

/// Per-dimension weights and whether gating zeroed them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub values: Vec<f64>,
    pub gated: Vec<bool>,
}

pub fn l1_weights(model: &DeviationModel, kappa: f64, apply_threshold: bool) -> Weights {
    let (values, gated) = model
        .dims
        .iter()
        .map(|m| {
            let sup = m.operational_sup(kappa);
            if apply_threshold && sup <= Regularizer::L1.threshold() {
                (0.0, true)
            } else {
                (sup, false)
            }
        })
        .unzip();
    Weights { values, gated }
}

pub fn l2_weights(
    model: &DeviationModel,
    theta_bar_proxy: &[f64],
    kappa: f64,
    clamp: f64,
    apply_threshold: bool,
) -> Result<Weights> {
    if !(clamp > 0.0) {
        return Err(Error::Config(format!("clamp must be positive, got {clamp}")));
    }
    check_len(model.d(), theta_bar_proxy.len())?;
    let (values, gated) = model
        .dims
        .iter()
        .zip(theta_bar_proxy)
        .map(|(m, &proxy)| {
            let sup = m.operational_sup(kappa);
            if apply_threshold && sup <= Regularizer::L2.threshold() {
                (0.0, true)
            } else {
                (sup / (2.0 * proxy.abs().max(clamp)), false)
            }
        })
        .unzip();
    Ok(Weights { values, gated })
}

fn check_weights(theta_hat: &[f64], weights: &[f64]) -> Result<()> {
    check_len(theta_hat.len(), weights.len())?;
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::Input(format!("weights must be non-negative, got {w}")));
    }
    Ok(())
}

/// Soft thresholding, the exact L1 minimizer.
pub fn recalibrate_l1(theta_hat: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    check_weights(theta_hat, weights)?;
    Ok(theta_hat
        .iter()
        .zip(weights)
        .map(|(&x, &w)| {
            if w == 0.0 {
                x
            } else if x > w {
                x - w
            } else if x < -w {
                x + w
            } else {
                0.0
            }
        })
        .collect())
}

/// `θ̂_j / (2λ_j + 1)`, the exact squared-L2 minimizer.
pub fn recalibrate_l2(theta_hat: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    check_weights(theta_hat, weights)?;
    Ok(theta_hat.iter().zip(weights).map(|(&x, &w)| x / (2.0 * w + 1.0)).collect())
}

/// `½‖θ - θ̂‖²` plus `Σ λ_j |θ_j|` (L1) or `Σ λ_j θ_j²` (L2).
pub fn objective(theta: &[f64], theta_hat: &[f64], weights: &[f64], regularizer: Regularizer) -> Result<f64> {
    check_len(theta_hat.len(), theta.len())?;
    check_len(theta_hat.len(), weights.len())?;
    let fit: f64 = theta.iter().zip(theta_hat).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum();
    let penalty: f64 = match regularizer {
        Regularizer::None => 0.0,
        Regularizer::L1 => theta.iter().zip(weights).map(|(t, w)| (w * t).abs()).sum(),
        Regularizer::L2 => theta.iter().zip(weights).map(|(t, w)| w * t * t).sum(),
    };
    Ok(fit + penalty)
}

/// Lower bound on the probability that re-calibration improves the
/// estimate: one minus the chance every error stays inside `[-c, c]`.
pub fn improvement_probability(model: &DeviationModel, regularizer: Regularizer) -> f64 {
    if regularizer == Regularizer::None {
        return 0.0;
    }
    let c = regularizer.threshold();
    let ln_inside: f64 = model.dims.iter().map(|m| m.ln_central_mass(c)).sum();
    -ln_inside.exp_m1()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recalibration {
    pub regularizer: Regularizer,
    pub theta_star: Vec<f64>,
    pub weights: Vec<f64>,
    pub gated: Vec<bool>,
    pub improvement_probability: f64,
}

/// Derives weights from `model` and applies the configured solver.
pub fn recalibrate(theta_hat: &[f64], model: &DeviationModel, config: &RecalibrationConfig) -> Result<Recalibration> {
    config.validate()?;
    check_len(model.d(), theta_hat.len())?;
    let d = theta_hat.len();
    let weights = match config.regularizer {
        Regularizer::None => Weights { values: vec![0.0; d], gated: vec![false; d] },
        Regularizer::L1 => l1_weights(model, config.kappa, config.apply_threshold),
        Regularizer::L2 => {
            let proxy: Vec<f64> = match &config.theta_bar_proxy {
                Some(p) => p.clone(),
                None => theta_hat.iter().zip(&model.dims).map(|(x, m)| x - m.delta).collect(),
            };
            l2_weights(model, &proxy, config.kappa, config.clamp, config.apply_threshold)?
        }
    };
    let theta_star = match config.regularizer {
        Regularizer::None => theta_hat.to_vec(),
        Regularizer::L1 => recalibrate_l1(theta_hat, &weights.values)?,
        Regularizer::L2 => recalibrate_l2(theta_hat, &weights.values)?,
    };
    Ok(Recalibration {
        regularizer: config.regularizer,
        theta_star,
        weights: weights.values,
        gated: weights.gated,
        improvement_probability: improvement_probability(model, config.regularizer),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::framework::DimensionModel;
    use proptest::prelude::*;

    fn model(delta: f64, sigma2: f64, d: usize) -> DeviationModel {
        DeviationModel::repeated(DimensionModel { delta, sigma2, reports: 1.0 }, d).unwrap()
    }

    // σ² of the Piecewise case-study model
    const CASE_SIGMA2: f64 = 533.210_352_969_659_9;

    #[test]
    fn l1_weight_examples() {
        let w = l1_weights(&model(0.0, CASE_SIGMA2, 1), 3.0, true);
        assert!((w.values[0] - 69.274_044_033_295_3).abs() < 1e-9);
        assert!(!w.gated[0]);

        let w = l1_weights(&model(0.0, 1e-20, 1), 3.0, true);
        assert_eq!(w.values[0], 0.0);
        assert!(w.gated[0]);

        // Square Wave case study: 0.049 + 3·0.0058 < 1
        let w = l1_weights(&model(-0.049, 3.365e-5, 1), 3.0, true);
        assert_eq!(w.values[0], 0.0);
        assert!(w.gated[0]);
        let ungated = l1_weights(&model(-0.049, 3.365e-5, 1), 3.0, false);
        assert!((ungated.values[0] - (0.049 + 3.0 * 3.365e-5_f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn l2_weight_examples() {
        let m = model(0.0, CASE_SIGMA2, 1);
        let w = l2_weights(&m, &[1.0], 3.0, 0.05, true).unwrap();
        assert!((w.values[0] - 34.637_022_016_647_7).abs() < 1e-9);
        let w = l2_weights(&m, &[0.0], 3.0, 0.05, true).unwrap();
        assert!((w.values[0] - 69.274_044_033_295_3 / 0.1).abs() < 1e-6);
        assert!(w.values[0].is_finite());
        let w = l2_weights(&model(0.0, 1e-20, 1), &[0.3], 3.0, 0.05, true).unwrap();
        assert_eq!(w.values[0], 0.0);
        assert!(l2_weights(&m, &[1.0], 3.0, 0.0, true).is_err());
        assert!(l2_weights(&m, &[1.0, 2.0], 3.0, 0.05, true).is_err());
    }

    #[test]
    fn soft_threshold_branches() {
        let out = recalibrate_l1(&[0.5, 0.1, -0.5], &[0.2, 0.2, 0.2]).unwrap();
        assert!((out[0] - 0.3).abs() < 1e-15);
        assert_eq!(out[1], 0.0);
        assert!((out[2] + 0.3).abs() < 1e-15);
        assert_eq!(recalibrate_l1(&[0.7], &[0.0]).unwrap(), vec![0.7]);
        assert!(recalibrate_l1(&[0.7], &[0.1, 0.2]).is_err());
        assert!(recalibrate_l1(&[0.7], &[-0.1]).is_err());
    }

    #[test]
    fn shrinkage_examples() {
        assert_eq!(recalibrate_l2(&[1.0], &[0.5]).unwrap(), vec![0.5]);
        assert_eq!(recalibrate_l2(&[0.37], &[0.0]).unwrap(), vec![0.37]);
        assert!(recalibrate_l2(&[1.0, 2.0], &[0.5]).is_err());
    }

    #[test]
    fn objective_examples() {
        assert_eq!(objective(&[0.4, -0.2], &[0.4, -0.2], &[0.0, 0.0], Regularizer::L1).unwrap(), 0.0);
        assert_eq!(objective(&[0.0], &[1.0], &[1.0], Regularizer::L1).unwrap(), 0.5);
        assert_eq!(objective(&[1.0], &[1.0], &[2.0], Regularizer::L2).unwrap(), 2.0);
    }

    #[test]
    fn improvement_probability_examples() {
        // per-dimension central mass 2Φ(1/23.09) - 1 ≈ 0.0345, so 1 - 0.0345^100 ≈ 1
        let p = improvement_probability(&model(0.0, CASE_SIGMA2, 100), Regularizer::L1);
        assert!((p - 1.0).abs() < 1e-12);
        let single = improvement_probability(&model(0.0, CASE_SIGMA2, 1), Regularizer::L1);
        assert!((single - (1.0 - 0.034_542_601_589_549_4)).abs() < 1e-12, "{single}");
        assert!(improvement_probability(&model(0.0, 1e-12, 10), Regularizer::L1) < 1e-12);
        let mut prev = 0.0;
        for k in 1..50 {
            let p = improvement_probability(&model(0.1, 0.01 * f64::from(k), 3), Regularizer::L2);
            assert!(p >= prev);
            prev = p;
        }
    }

    #[test]
    fn gating_passes_through_bitwise() {
        let theta = vec![0.3, -0.0, -0.7, 1e-300];
        let m = model(0.01, 1e-4, 4);
        for reg in [Regularizer::L1, Regularizer::L2] {
            let out = recalibrate(&theta, &m, &RecalibrationConfig::new(reg)).unwrap();
            assert!(out.gated.iter().all(|&g| g));
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&out.theta_star), bits(&theta));
        }
    }

    #[test]
    fn recalibrate_uses_calibrated_proxy() {
        let m = model(0.5, 4.0, 1);
        let out = recalibrate(&[1.5], &m, &RecalibrationConfig::new(Regularizer::L2)).unwrap();
        // proxy = 1.5 - 0.5
        assert!((out.weights[0] - 6.5 / 2.0).abs() < 1e-12);
        let mut cfg = RecalibrationConfig::new(Regularizer::L2);
        cfg.kappa = 0.0;
        assert!(recalibrate(&[1.5], &m, &cfg).is_err());
    }

    fn grid_argmin(theta_hat: f64, w: f64, reg: Regularizer) -> f64 {
        let lo = theta_hat.min(0.0) - 1e-4;
        let hi = theta_hat.max(0.0) + 1e-4;
        let steps = ((hi - lo) / 1e-4).ceil() as usize;
        (0..=steps)
            .map(|k| lo + k as f64 * 1e-4)
            .min_by(|a, b| {
                let fa = objective(&[*a], &[theta_hat], &[w], reg).unwrap();
                let fb = objective(&[*b], &[theta_hat], &[w], reg).unwrap();
                fa.total_cmp(&fb)
            })
            .unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn solvers_match_grid_oracle(theta_hat in -2.0f64..2.0, w in 0.0f64..2.0) {
            let l1 = recalibrate_l1(&[theta_hat], &[w]).unwrap()[0];
            prop_assert!((l1 - grid_argmin(theta_hat, w, Regularizer::L1)).abs() <= 1e-4);
            let l2 = recalibrate_l2(&[theta_hat], &[w]).unwrap()[0];
            prop_assert!((l2 - grid_argmin(theta_hat, w, Regularizer::L2)).abs() <= 1e-4);
        }

        #[test]
        fn shrinks_and_preserves_sign(
            theta in proptest::collection::vec(-5.0f64..5.0, 1..20),
            seed_w in proptest::collection::vec(0.0f64..10.0, 20),
        ) {
            let w = &seed_w[..theta.len()];
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>();
            for out in [recalibrate_l1(&theta, w).unwrap(), recalibrate_l2(&theta, w).unwrap()] {
                prop_assert!(norm(&out) <= norm(&theta));
                for (a, b) in out.iter().zip(&theta) {
                    prop_assert!(a * b >= 0.0);
                }
            }
            for reg in [Regularizer::L1, Regularizer::L2] {
                let out = if reg == Regularizer::L1 { recalibrate_l1(&theta, w) } else { recalibrate_l2(&theta, w) }.unwrap();
                prop_assert!(objective(&out, &theta, w, reg).unwrap() <= objective(&theta, &theta, w, reg).unwrap() + 1e-12);
            }
        }
    }
}
