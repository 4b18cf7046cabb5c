//! Laplace, Piecewise and Square Wave perturbation.
//!
//! Piecewise and Square Wave have piecewise-constant output densities, so
//! both sampling (inverse transform) and moments are computed exactly from
//! the three-interval decomposition returned by [`MechanismSpec::pieces`].
//!
//! Square Wave is defined on `[0, 1]`. The rest of the pipeline works in
//! `[-1, 1]`, so [`Randomizer::randomize`] wraps it with [`to_unit`] /
//! [`from_unit`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::Open01;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    Laplace,
    Piecewise,
    #[serde(rename = "squarewave", alias = "square_wave")]
    SquareWave,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 3] = [
        MechanismKind::Laplace,
        MechanismKind::Piecewise,
        MechanismKind::SquareWave,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Laplace => "laplace",
            MechanismKind::Piecewise => "piecewise",
            MechanismKind::SquareWave => "squarewave",
        }
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MechanismKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplace" => Ok(MechanismKind::Laplace),
            "piecewise" => Ok(MechanismKind::Piecewise),
            "squarewave" | "square_wave" | "square-wave" => Ok(MechanismKind::SquareWave),
            other => Err(Error::Config(format!("unknown mechanism `{other}`"))),
        }
    }
}

/// A mechanism together with the budget each reported dimension receives.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct MechanismSpec {
    pub kind: MechanismKind,
    pub eps_per_dim: f64,
}

#[derive(Deserialize)]
struct RawSpec {
    kind: MechanismKind,
    eps_per_dim: f64,
}

impl TryFrom<RawSpec> for MechanismSpec {
    type Error = Error;

    fn try_from(raw: RawSpec) -> Result<Self> {
        MechanismSpec::new(raw.kind, raw.eps_per_dim)
    }
}

/// Bias and variance of a single perturbed value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationStats {
    pub bias: f64,
    pub variance: f64,
}

/// One constant-density interval of a bounded mechanism's output.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Piece {
    pub lo: f64,
    pub hi: f64,
    pub height: f64,
}

impl Piece {
    pub fn mass(&self) -> f64 {
        (self.hi - self.lo) * self.height
    }

    /// `∫ |x - center|^k · height dx` over the piece.
    pub fn abs_moment(&self, center: f64, k: i32) -> f64 {
        let k1 = f64::from(k + 1);
        // antiderivative of |x - c|^k
        let prim = |x: f64| {
            let u = x - center;
            u.signum() * u.abs().powi(k + 1) / k1
        };
        self.height * (prim(self.hi) - prim(self.lo))
    }

    /// `∫ x^k · height dx` over the piece.
    pub fn raw_moment(&self, k: i32) -> f64 {
        let k1 = f64::from(k + 1);
        self.height * (self.hi.powi(k + 1) - self.lo.powi(k + 1)) / k1
    }
}

/// Maps `[-1, 1]` onto `[0, 1]`.
pub fn to_unit(t: f64) -> f64 {
    (t + 1.0) / 2.0
}

/// Inverse of [`to_unit`].
pub fn from_unit(u: f64) -> f64 {
    2.0 * u - 1.0
}

/// Output half-width `Q` of the Piecewise mechanism.
pub fn piecewise_q(eps: f64) -> f64 {
    let h = eps / 2.0;
    (h.exp() + 1.0) / h.exp_m1()
}

// Central band `[l, r]` of the Piecewise output for input `t`; `Q - 1` is
// taken as `2 / expm1(ε/2)` so the width keeps precision when Q ≈ 1.
fn piecewise_band(eps: f64, t: f64) -> (f64, f64) {
    let qm1 = 2.0 / (eps / 2.0).exp_m1();
    let l = (1.0 + qm1 / 2.0) * t - qm1 / 2.0;
    (l, l + qm1)
}

/// Band half-width `b` of the Square Wave mechanism.
pub fn square_wave_b(eps: f64) -> f64 {
    // numerator ε e^ε − e^ε + 1 and denominator 2 e^ε (e^ε − 1 − ε) both
    // vanish like ε², so small budgets use their series.
    if eps < 0.5 {
        let mut num = 0.0;
        let mut den = 0.0;
        let mut term = 1.0; // ε^k / k!
        for k in 1..40 {
            term *= eps / f64::from(k);
            if k >= 2 {
                num += term * f64::from(k - 1);
                den += term;
            }
        }
        num / (2.0 * eps.exp() * den)
    } else {
        let em = (-eps).exp();
        (eps - 1.0 + em) / (2.0 * (eps.exp_m1() - eps))
    }
}

impl MechanismSpec {
    pub fn new(kind: MechanismKind, eps_per_dim: f64) -> Result<Self> {
        if !(eps_per_dim.is_finite() && eps_per_dim > 0.0) {
            return Err(Error::Config(format!(
                "per-dimension budget must be positive and finite, got {eps_per_dim}"
            )));
        }
        Ok(Self { kind, eps_per_dim })
    }

    /// Splits a total budget evenly over `m` reported dimensions.
    pub fn for_budget(kind: MechanismKind, total_eps: f64, m: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("m must be at least 1".into()));
        }
        Self::new(kind, total_eps / m as f64)
    }

    pub fn bounded(&self) -> bool {
        !matches!(self.kind, MechanismKind::Laplace)
    }

    /// Largest possible `|t*|` in the mechanism's native output space.
    pub fn bound(&self) -> f64 {
        match self.kind {
            MechanismKind::Laplace => f64::INFINITY,
            MechanismKind::Piecewise => self.q(),
            MechanismKind::SquareWave => 1.0 + self.b(),
        }
    }

    /// Largest possible `|report|` once mapped back to `[-1, 1]`-space.
    pub fn report_bound(&self) -> f64 {
        match self.kind {
            MechanismKind::SquareWave => 1.0 + 2.0 * self.b(),
            _ => self.bound(),
        }
    }

    pub fn q(&self) -> f64 {
        piecewise_q(self.eps_per_dim)
    }

    pub fn b(&self) -> f64 {
        square_wave_b(self.eps_per_dim)
    }

    /// Laplace scale `2/ε'` (sensitivity 2 over `[-1, 1]`).
    pub fn laplace_scale(&self) -> f64 {
        2.0 / self.eps_per_dim
    }

    pub fn input_domain(&self) -> (f64, f64) {
        match self.kind {
            MechanismKind::SquareWave => (0.0, 1.0),
            _ => (-1.0, 1.0),
        }
    }

    pub fn output_range(&self) -> (f64, f64) {
        match self.kind {
            MechanismKind::Laplace => (f64::NEG_INFINITY, f64::INFINITY),
            MechanismKind::Piecewise => (-self.q(), self.q()),
            MechanismKind::SquareWave => (-self.b(), 1.0 + self.b()),
        }
    }

    fn check_input(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.input_domain();
        if !(lo..=hi).contains(&t) {
            return Err(Error::Input(format!(
                "{} input {t} outside [{lo}, {hi}]",
                self.kind
            )));
        }
        Ok(())
    }

    /// The output density of a bounded mechanism as three constant pieces.
    /// Empty for Laplace.
    pub fn pieces(&self, t: f64) -> Result<Vec<Piece>> {
        self.check_input(t)?;
        let eps = self.eps_per_dim;
        Ok(match self.kind {
            MechanismKind::Laplace => Vec::new(),
            MechanismKind::Piecewise => {
                let q = self.q();
                let h = eps / 2.0;
                let central = h.exp() * h.exp_m1() / (2.0 * (h.exp() + 1.0));
                let tail = central * (-eps).exp();
                let (l, r) = piecewise_band(eps, t);
                vec![
                    Piece { lo: -q, hi: l, height: tail },
                    Piece { lo: l, hi: r, height: central },
                    Piece { lo: r, hi: q, height: tail },
                ]
            }
            MechanismKind::SquareWave => {
                let b = self.b();
                let (high, low) = self.square_wave_levels();
                vec![
                    Piece { lo: -b, hi: t - b, height: low },
                    Piece { lo: t - b, hi: t + b, height: high },
                    Piece { lo: t + b, hi: 1.0 + b, height: low },
                ]
            }
        })
    }

    // e^ε/(2be^ε+1) and 1/(2be^ε+1), written to survive large ε.
    fn square_wave_levels(&self) -> (f64, f64) {
        let em = (-self.eps_per_dim).exp();
        let high = 1.0 / (2.0 * self.b() + em);
        (high, high * em)
    }

    /// Draws `t*` for an input in the mechanism's native domain.
    pub fn perturb<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<f64> {
        self.sampler().perturb(t, rng)
    }

    /// Precomputes the constants needed for repeated draws.
    pub fn sampler(&self) -> Sampler {
        let eps = self.eps_per_dim;
        let (width, band_mass) = match self.kind {
            MechanismKind::Laplace => (self.laplace_scale(), 0.0),
            MechanismKind::Piecewise => (self.q(), 1.0 / (1.0 + (-eps / 2.0).exp())),
            MechanismKind::SquareWave => {
                let (high, _) = self.square_wave_levels();
                (self.b(), 2.0 * self.b() * high)
            }
        };
        Sampler { spec: *self, width, band_mass }
    }

    /// Closed-form bias `E(t*) - t` and variance `Var(t*)` at input `t`.
    pub fn stats(&self, t: f64) -> Result<PerturbationStats> {
        self.check_input(t)?;
        let eps = self.eps_per_dim;
        Ok(match self.kind {
            MechanismKind::Laplace => {
                let lambda = self.laplace_scale();
                PerturbationStats { bias: 0.0, variance: 2.0 * lambda * lambda }
            }
            MechanismKind::Piecewise => {
                let g = (eps / 2.0).exp_m1();
                let variance = t * t / g + (g + 4.0) / (3.0 * g * g);
                PerturbationStats { bias: 0.0, variance }
            }
            MechanismKind::SquareWave => {
                let b = self.b();
                let (high, low) = self.square_wave_levels();
                // low = 1/(2be^ε+1), 2b·high = 2be^ε/(2be^ε+1)
                let bias = 2.0 * b * (high - low) * t + (1.0 + 2.0 * b) * low / 2.0 - t;
                let variance = b * b / 3.0
                    + (2.0 * b + 1.0) * (b + 1.0 - 3.0 * t * t) * low / 3.0
                    - bias * bias
                    - 2.0 * bias * t;
                PerturbationStats { bias, variance }
            }
        })
    }

    /// Output density at `t_star` given input `t`; zero outside a bounded
    /// mechanism's output range.
    pub fn density(&self, t: f64, t_star: f64) -> Result<f64> {
        self.check_input(t)?;
        let eps = self.eps_per_dim;
        Ok(match self.kind {
            MechanismKind::Laplace => {
                let lambda = self.laplace_scale();
                (-(t_star - t).abs() / lambda).exp() / (2.0 * lambda)
            }
            MechanismKind::Piecewise => {
                let q = self.q();
                if !(-q..=q).contains(&t_star) {
                    return Ok(0.0);
                }
                let (l, r) = piecewise_band(eps, t);
                let h = eps / 2.0;
                let central = h.exp() * h.exp_m1() / (2.0 * (h.exp() + 1.0));
                if (l..=r).contains(&t_star) {
                    central
                } else {
                    central * (-eps).exp()
                }
            }
            MechanismKind::SquareWave => {
                let b = self.b();
                if !(-b..=1.0 + b).contains(&t_star) {
                    return Ok(0.0);
                }
                let (high, low) = self.square_wave_levels();
                if (t - t_star).abs() < b {
                    high
                } else {
                    low
                }
            }
        })
    }

    /// Stats of a `[-1, 1]`-space report for a `[-1, 1]` input.
    pub fn report_stats(&self, t: f64) -> Result<PerturbationStats> {
        match self.kind {
            MechanismKind::SquareWave => {
                let s = self.stats(to_unit(t))?;
                Ok(PerturbationStats { bias: 2.0 * s.bias, variance: 4.0 * s.variance })
            }
            _ => self.stats(t),
        }
    }

    /// `E|t* - E(t*)|^3` at input `t` in the native domain.
    pub fn third_abs_central_moment(&self, t: f64) -> Result<f64> {
        match self.kind {
            MechanismKind::Laplace => {
                let lambda = self.laplace_scale();
                Ok(6.0 * lambda.powi(3) / 2.0)
            }
            _ => {
                let center = t + self.stats(t)?.bias;
                Ok(self.pieces(t)?.iter().map(|p| p.abs_moment(center, 3)).sum())
            }
        }
    }

    /// Worst-case density ratio `f(x | t_a) / f(x | t_b)` over a `grid` ×
    /// `grid` lattice of inputs and outputs. A valid ε'-LDP mechanism never
    /// exceeds `e^{ε'}`.
    pub fn ldp_ratio(&self, grid: usize) -> f64 {
        let grid = grid.max(2);
        let (in_lo, in_hi) = self.input_domain();
        let (out_lo, out_hi) = match self.kind {
            MechanismKind::Laplace => {
                let pad = 3.0 * self.laplace_scale();
                (-1.0 - pad, 1.0 + pad)
            }
            _ => self.output_range(),
        };
        let lattice = |lo: f64, hi: f64| {
            (0..grid).map(move |i| lo + (hi - lo) * i as f64 / (grid - 1) as f64)
        };
        let inputs: Vec<f64> = lattice(in_lo, in_hi).collect();
        let mut worst: f64 = 1.0;
        for x in lattice(out_lo, out_hi) {
            let (mut max, mut min) = (0.0_f64, f64::INFINITY);
            for &t in &inputs {
                let f = self.density(t, x).unwrap_or(0.0);
                max = max.max(f);
                min = min.min(f);
            }
            if max == 0.0 {
                continue;
            }
            worst = worst.max(max / min);
        }
        worst
    }
}

/// Inverse-transform sampler for one mechanism.
#[derive(Clone, Copy, Debug)]
pub struct Sampler {
    spec: MechanismSpec,
    // Laplace scale, Piecewise Q, or Square Wave b
    width: f64,
    // probability of landing in the high-density band
    band_mass: f64,
}

impl Sampler {
    pub fn spec(&self) -> &MechanismSpec {
        &self.spec
    }

    pub fn perturb<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<f64> {
        self.spec.check_input(t)?;
        Ok(match self.spec.kind {
            MechanismKind::Laplace => {
                let u: f64 = rng.sample(Open01);
                let v = u - 0.5;
                t - self.width * v.signum() * (1.0 - 2.0 * v.abs()).ln()
            }
            MechanismKind::Piecewise => {
                let q = self.width;
                let (l, r) = piecewise_band(self.spec.eps_per_dim, t);
                let u: f64 = rng.random();
                if rng.random::<f64>() < self.band_mass {
                    l + u * (r - l)
                } else {
                    // tails have total length Q + 1
                    let s = u * (q + 1.0);
                    let left = l + q;
                    if s < left {
                        -q + s
                    } else {
                        r + (s - left)
                    }
                }
            }
            MechanismKind::SquareWave => {
                let b = self.width;
                let u: f64 = rng.random();
                if rng.random::<f64>() < self.band_mass {
                    t - b + 2.0 * b * u
                } else if u < t {
                    // the two low pieces have total length 1
                    -b + u
                } else {
                    t + b + (u - t)
                }
            }
        })
    }
}

impl Randomizer for Sampler {
    fn randomize<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<f64> {
        match self.spec.kind {
            MechanismKind::SquareWave => {
                if !(-1.0..=1.0).contains(&t) {
                    return Err(Error::Input(format!("input {t} outside [-1, 1]")));
                }
                Ok(from_unit(self.perturb(to_unit(t), rng)?))
            }
            _ => self.perturb(t, rng),
        }
    }
}

/// Anything that turns a `[-1, 1]` value into a `[-1, 1]`-space report.
pub trait Randomizer: Sync {
    fn randomize<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<f64>;
}

impl Randomizer for MechanismSpec {
    fn randomize<R: Rng + ?Sized>(&self, t: f64, rng: &mut R) -> Result<f64> {
        self.sampler().randomize(t, rng)
    }
}

/// Reports the input unchanged. Test stub for noiseless pipelines.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Randomizer for Identity {
    fn randomize<R: Rng + ?Sized>(&self, t: f64, _rng: &mut R) -> Result<f64> {
        Ok(t)
    }
}
