//! Chernoff conversions between expected values and observed counts.
//!
//! `upper`/`lower` bound the observed value of a sum of independent Bernoulli
//! trials from its expectation (φ^U, φ^L); `expected_upper`/`expected_lower`
//! invert them to bound an expectation from an observed count.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which tail inequality is solved for the deviation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChernoffForm {
    /// `exp(-δ²x/(2+δ)) = ε` above, `exp(-δ²x/2) = ε` below, closed form.
    Multiplicative,
    /// Relative-entropy form `exp(-x[(1±δ)ln(1±δ) ∓ δ]) = ε`, solved numerically.
    KullbackLeibler,
}

impl fmt::Display for ChernoffForm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChernoffForm::Multiplicative => "multiplicative",
            ChernoffForm::KullbackLeibler => "kl",
        })
    }
}

impl FromStr for ChernoffForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multiplicative" => Ok(ChernoffForm::Multiplicative),
            "kl" | "kullback-leibler" => Ok(ChernoffForm::KullbackLeibler),
            other => Err(Error::InvalidParameter(format!("unknown Chernoff form {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chernoff {
    pub form: ChernoffForm,
    /// Failure probability per use.
    pub failure_prob: f64,
}

impl Chernoff {
    pub fn new(form: ChernoffForm, failure_prob: f64) -> Result<Self> {
        if !(failure_prob > 0.0 && failure_prob < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "Chernoff failure probability must lie in (0, 1), got {failure_prob}"
            )));
        }
        Ok(Chernoff { form, failure_prob })
    }

    pub fn multiplicative(failure_prob: f64) -> Result<Self> {
        Self::new(ChernoffForm::Multiplicative, failure_prob)
    }

    fn log_inv(&self) -> f64 {
        -self.failure_prob.ln()
    }

    /// φ^U(x): upper bound on the realised value given expectation `x`.
    pub fn upper(&self, x: f64) -> f64 {
        let x = x.max(0.0);
        let l = self.log_inv();
        match self.form {
            ChernoffForm::Multiplicative => x + 0.5 * (l + (l * l + 8.0 * l * x).sqrt()),
            ChernoffForm::KullbackLeibler => {
                if x == 0.0 {
                    return 0.0;
                }
                // x[(1+δ)ln(1+δ) - δ] = l, increasing in δ.
                let g = |d: f64| x * ((1.0 + d) * (1.0 + d).ln() - d) - l;
                let mut hi = 1.0;
                while g(hi) < 0.0 {
                    hi *= 2.0;
                }
                x * (1.0 + bisect(g, 0.0, hi))
            }
        }
    }

    /// φ^L(x): lower bound on the realised value given expectation `x`.
    pub fn lower(&self, x: f64) -> f64 {
        if !(x > 0.0) {
            return 0.0;
        }
        let l = self.log_inv();
        match self.form {
            ChernoffForm::Multiplicative => (x - (2.0 * l * x).sqrt()).max(0.0),
            ChernoffForm::KullbackLeibler => {
                // x[(1-δ)ln(1-δ) + δ] = l on δ in [0, 1]; reaches x at δ = 1.
                if x <= l {
                    return 0.0;
                }
                let g = |d: f64| {
                    let t = if d >= 1.0 { 0.0 } else { (1.0 - d) * (1.0 - d).ln() };
                    x * (t + d) - l
                };
                x * (1.0 - bisect(g, 0.0, 1.0))
            }
        }
    }

    /// Smallest expectation whose φ^U reaches the observed count.
    pub fn expected_lower(&self, observed: f64) -> f64 {
        if !(observed > 0.0) {
            return 0.0;
        }
        match self.form {
            ChernoffForm::Multiplicative => {
                let l = self.log_inv();
                (observed - 0.5 * (-l + (l * l + 8.0 * l * observed).sqrt())).max(0.0)
            }
            ChernoffForm::KullbackLeibler => {
                if self.upper(0.0) >= observed {
                    return 0.0;
                }
                bisect(|e| self.upper(e) - observed, 0.0, observed)
            }
        }
    }

    /// Largest expectation whose φ^L does not exceed the observed count.
    pub fn expected_upper(&self, observed: f64) -> f64 {
        let o = observed.max(0.0);
        match self.form {
            ChernoffForm::Multiplicative => {
                let l = self.log_inv();
                let root = 0.5 * ((2.0 * l).sqrt() + (2.0 * l + 4.0 * o).sqrt());
                root * root
            }
            ChernoffForm::KullbackLeibler => {
                let mut hi = o + self.log_inv() + 1.0;
                while self.lower(hi) <= o {
                    hi *= 2.0;
                }
                bisect(|e| self.lower(e) - o, o, hi)
            }
        }
    }
}

/// Root of an increasing function on `[lo, hi]`.
fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn forms() -> [Chernoff; 2] {
        [
            Chernoff::new(ChernoffForm::Multiplicative, 1e-10).unwrap(),
            Chernoff::new(ChernoffForm::KullbackLeibler, 1e-10).unwrap(),
        ]
    }

    #[test]
    fn rejects_bad_failure_probability() {
        for p in [0.0, 1.0, -0.1, 2.0, f64::NAN] {
            assert!(Chernoff::multiplicative(p).is_err());
        }
    }

    #[test]
    fn zero_has_zero_lower_bound() {
        for c in forms() {
            assert_eq!(c.lower(0.0), 0.0);
            assert_eq!(c.expected_lower(0.0), 0.0);
        }
    }

    #[test]
    fn half_width_at_one_million() {
        let c = Chernoff::multiplicative(1e-10).unwrap();
        let x = 1e6;
        let delta_lo = 1.0 - c.lower(x) / x;
        let expected = (2.0 * (1e10f64).ln() / x).sqrt();
        assert!((delta_lo - expected).abs() < 1e-15);
        assert!((delta_lo - 0.006786).abs() < 1e-5);
        // Tail exponents evaluate to the failure probability.
        let delta_hi = c.upper(x) / x - 1.0;
        let tail_hi = (-delta_hi * delta_hi * x / (2.0 + delta_hi)).exp();
        let tail_lo = (-delta_lo * delta_lo * x / 2.0).exp();
        assert!((tail_hi / 1e-10 - 1.0).abs() < 1e-6, "{tail_hi}");
        assert!((tail_lo / 1e-10 - 1.0).abs() < 1e-6, "{tail_lo}");
        assert!(c.lower(x) < x && x < c.upper(x));
    }

    #[test]
    fn kl_tail_matches_exponent() {
        let c = Chernoff::new(ChernoffForm::KullbackLeibler, 1e-6).unwrap();
        let x = 5e4;
        let d = c.upper(x) / x - 1.0;
        let exponent = x * ((1.0 + d) * (1.0 + d).ln() - d);
        assert!((exponent - (1e6f64).ln()).abs() < 1e-6);
        let d = 1.0 - c.lower(x) / x;
        let exponent = x * ((1.0 - d) * (1.0 - d).ln() + d);
        assert!((exponent - (1e6f64).ln()).abs() < 1e-6);
    }

    #[test]
    fn upper_is_strictly_monotone_on_grid() {
        for c in forms() {
            let grid: Vec<f64> = (0..100).map(|i| 10f64.powf(i as f64 * 0.1)).collect();
            for w in grid.windows(2) {
                assert!(c.upper(w[0]) < c.upper(w[1]));
                assert!(c.lower(w[0]) <= c.lower(w[1]));
            }
        }
    }

    #[test]
    fn closed_form_inverse_agrees_with_bisection() {
        let c = Chernoff::multiplicative(1e-10).unwrap();
        for o in [30.0, 75.0, 4173.0, 343572.0, 7.7e6] {
            let lo = bisect(|e| c.upper(e) - o, 0.0, o);
            let hi = bisect(|e| c.lower(e) - o, o, 10.0 * o + 100.0);
            assert!((c.expected_lower(o) / lo - 1.0).abs() < 1e-9);
            assert!((c.expected_upper(o) / hi - 1.0).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn sandwich_holds(x in 0.0f64..1e12, eps_exp in 1.0f64..15.0) {
            for form in [ChernoffForm::Multiplicative, ChernoffForm::KullbackLeibler] {
                let c = Chernoff::new(form, 10f64.powf(-eps_exp)).unwrap();
                prop_assert!(c.lower(x) <= x);
                prop_assert!(x <= c.upper(x));
                prop_assert!(c.expected_lower(x) <= x * (1.0 + 1e-12));
                prop_assert!(x <= c.expected_upper(x) * (1.0 + 1e-12));
            }
        }

        #[test]
        fn inverses_round_trip(o in 1.0f64..1e10) {
            let c = Chernoff::multiplicative(1e-10).unwrap();
            let e_lo = c.expected_lower(o);
            if e_lo > 0.0 {
                prop_assert!((c.upper(e_lo) / o - 1.0).abs() < 1e-9);
            }
            let e_hi = c.expected_upper(o);
            prop_assert!((c.lower(e_hi) / o - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn relative_width_shrinks_like_inverse_sqrt() {
        for c in forms() {
            let mut prev = f64::INFINITY;
            for k in 3..12 {
                let x = 10f64.powi(k);
                let width = (c.upper(x) - c.lower(x)) / x;
                assert!(width < prev);
                // sqrt(x) * width tends to a constant.
                let scaled = width * x.sqrt();
                assert!(scaled < 2.0 * (2.0 * 2.0 * (1e10f64).ln()).sqrt());
                prev = width;
            }
            assert!((c.upper(1e14) - c.lower(1e14)) / 1e14 < 1e-5);
        }
    }
}
