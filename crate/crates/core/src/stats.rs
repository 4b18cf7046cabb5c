//! Numeric helpers: exact summation, the standard normal CDF and the
//! one-sample Kolmogorov–Smirnov statistic.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use serde::{Deserialize, Serialize};

/// Error-free running sum (Shewchuk partials).
///
/// `value()` is the correctly rounded sum of everything added, so it does
/// not depend on insertion order or on how partial sums were merged.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ExactSum {
    partials: Vec<f64>,
}

impl ExactSum {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, mut x: f64) {
        let mut i = 0;
        for j in 0..self.partials.len() {
            let mut y = self.partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                self.partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        self.partials.truncate(i);
        self.partials.push(x);
    }

    pub fn merge(&mut self, other: &ExactSum) {
        for &p in &other.partials {
            self.add(p);
        }
    }

    pub fn value(&self) -> f64 {
        // round-half-even correction from Python's math.fsum
        let p = &self.partials;
        let Some(mut n) = p.len().checked_sub(1) else {
            return 0.0;
        };
        let mut hi = p[n];
        let mut lo = 0.0;
        while n > 0 {
            n -= 1;
            let x = hi;
            let y = p[n];
            hi = x + y;
            let yr = hi - x;
            lo = y - yr;
            if lo != 0.0 {
                break;
            }
        }
        if n > 0 && ((lo < 0.0 && p[n - 1] < 0.0) || (lo > 0.0 && p[n - 1] > 0.0)) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
        hi
    }
}

impl Extend<f64> for ExactSum {
    fn extend<I: IntoIterator<Item = f64>>(&mut self, iter: I) {
        for x in iter {
            self.add(x);
        }
    }
}

pub fn exact_sum(xs: &[f64]) -> f64 {
    let mut s = ExactSum::new();
    s.extend(xs.iter().copied());
    s.value()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(x)` without cancellation.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x * FRAC_1_SQRT_2)
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// `ln(Φ(b) - Φ(a))` for `a <= b`, accurate when both ends sit deep in the
/// same tail.
pub fn ln_normal_mass(a: f64, b: f64) -> f64 {
    if b <= a {
        return f64::NEG_INFINITY;
    }
    let mass = if a >= 0.0 {
        normal_sf(a) - normal_sf(b)
    } else if b <= 0.0 {
        normal_cdf(b) - normal_cdf(a)
    } else {
        1.0 - normal_cdf(a) - normal_sf(b)
    };
    if mass > 1e-300 {
        return mass.ln();
    }
    // both ends far out in one tail: work with ln of the tail densities
    let (near, far) = if a >= 0.0 { (a, b) } else { (-b, -a) };
    let ln_tail = |z: f64| ln_normal_sf_asymptotic(z);
    let ln_near = ln_tail(near);
    let ln_far = if far.is_infinite() { f64::NEG_INFINITY } else { ln_tail(far) };
    ln_near + (-(ln_far - ln_near).exp()).ln_1p()
}

// ln(1 - Φ(z)) for large z via the continued-fraction asymptotic.
fn ln_normal_sf_asymptotic(z: f64) -> f64 {
    let sf = normal_sf(z);
    if sf > 1e-300 {
        return sf.ln();
    }
    let z2 = z * z;
    // Laplace continued fraction, 8 terms is plenty for z > 37
    let mut frac = 0.0;
    for k in (1..=8).rev() {
        frac = f64::from(k) / (z + frac);
    }
    -0.5 * z2 - 0.5 * (2.0 * PI).ln() - (z + frac).ln()
}

/// One-sample KS statistic `sup |F_n(x) - F(x)|`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            let above = (i + 1) as f64 / n - f;
            let below = f - i as f64 / n;
            above.max(below)
        })
        .fold(0.0, f64::max)
}

pub fn mean(xs: &[f64]) -> f64 {
    exact_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    ss / (xs.len() as f64 - 1.0)
}
