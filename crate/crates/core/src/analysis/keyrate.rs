//! Final key length, key rate and repeaterless capacity comparators.

use serde::{Deserialize, Serialize};

use super::aopp::AoppChain;
use crate::params::{ChannelModel, ProtocolParams};

/// Binary Shannon entropy in bits, zero at the end points.
pub fn binary_entropy(x: f64) -> f64 {
    if x <= 0.0 || x >= 1.0 {
        return 0.0;
    }
    -x * x.log2() - (1.0 - x) * (1.0 - x).log2()
}

/// Conversion from key bits per pulse to bits per second.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateConversion {
    pub clock_hz: f64,
    /// Fraction of wall-clock time spent sending quantum pulses.
    pub duty: f64,
}

impl Default for RateConversion {
    fn default() -> Self {
        RateConversion {
            clock_hz: 312.5e6,
            duty: 0.224,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlobBounds {
    pub absolute: f64,
    pub relative: f64,
}

/// `-log2(1-η)` for the total channel transmittance, with and without the
/// detector efficiency folded in.
pub fn plob_bounds(channel: &ChannelModel) -> PlobBounds {
    let eta = 10f64.powf(-channel.loss_db() / 10.0);
    let f = |t: f64| {
        if t > 0.0 {
            -(-t).ln_1p() / std::f64::consts::LN_2
        } else {
            0.0
        }
    };
    PlobBounds {
        absolute: f(eta),
        relative: f(eta * channel.eta_d),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeyRateReport {
    pub key_length: f64,
    /// Key length before clamping at zero.
    pub key_length_raw: f64,
    pub rate_per_pulse: f64,
    pub rate_bps: f64,
    pub privacy_term: f64,
    pub error_correction_term: f64,
    pub security_term: f64,
    pub plob: Option<PlobBounds>,
    pub ratio_absolute: Option<f64>,
    pub ratio_relative: Option<f64>,
    /// Why the key is zero, when it is.
    pub reason: Option<String>,
}

impl KeyRateReport {
    /// A zero key with a reason, e.g. when the chain itself failed.
    pub fn zero(reason: impl Into<String>, channel: Option<&ChannelModel>) -> Self {
        let plob = channel.map(plob_bounds);
        KeyRateReport {
            key_length: 0.0,
            key_length_raw: 0.0,
            rate_per_pulse: 0.0,
            rate_bps: 0.0,
            privacy_term: 0.0,
            error_correction_term: 0.0,
            security_term: 0.0,
            plob,
            ratio_absolute: plob.map(|_| 0.0),
            ratio_relative: plob.map(|_| 0.0),
            reason: Some(reason.into()),
        }
    }
}

pub fn key_rate(
    chain: &AoppChain,
    params: &ProtocolParams,
    channel: Option<&ChannelModel>,
    conversion: &RateConversion,
) -> KeyRateReport {
    let privacy_term = chain.n1_prime * (1.0 - binary_entropy(chain.e1ph_prime));
    let error_correction_term = params.f * chain.nt_prime * binary_entropy(chain.e_prime);
    let security_term = 2.0 * (2.0 / params.eps_cor).log2()
        + 2.0 * (1.0 / (std::f64::consts::SQRT_2 * params.eps_pa * params.eps_hat)).log2();
    let raw = privacy_term - error_correction_term - security_term;
    let mut reason = None;
    let key_length = if chain.e1ph_prime > 0.5 {
        reason = Some(format!("phase-flip error after pairing {:.4} exceeds 1/2", chain.e1ph_prime));
        0.0
    } else if chain.n1_prime <= 0.0 {
        reason = Some("no untagged bits after pairing".into());
        0.0
    } else if !(raw > 0.0) {
        reason = Some(format!("key length {raw:.4e} clamped to 0"));
        0.0
    } else {
        raw
    };
    let rate = key_length / params.n_total;
    let plob = channel.map(plob_bounds);
    let ratio = |b: f64| if b > 0.0 { rate / b } else { f64::INFINITY };
    KeyRateReport {
        key_length,
        key_length_raw: raw,
        rate_per_pulse: rate,
        rate_bps: rate * conversion.clock_hz * conversion.duty,
        privacy_term,
        error_correction_term,
        security_term,
        plob,
        ratio_absolute: plob.map(|p| ratio(p.absolute)),
        ratio_relative: plob.map(|p| ratio(p.relative)),
        reason,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_values() {
        assert_eq!(binary_entropy(0.5), 1.0);
        assert_eq!(binary_entropy(0.0), 0.0);
        assert_eq!(binary_entropy(1.0), 0.0);
        let direct = -0.11 * 0.11f64.log2() - 0.89 * 0.89f64.log2();
        assert!((binary_entropy(0.11) - direct).abs() < 1e-15);
        assert!((binary_entropy(0.11) - 0.4999).abs() < 1e-4);
    }

    #[test]
    fn plob_at_zero_transmittance() {
        let ch = ChannelModel {
            l_ac: f64::INFINITY,
            ..ChannelModel::field_test()
        };
        assert_eq!(plob_bounds(&ch), PlobBounds { absolute: 0.0, relative: 0.0 });
    }

    #[test]
    fn plob_matches_small_eta_limit() {
        let ch = ChannelModel::field_test();
        let eta = 10f64.powf(-ch.loss_db() / 10.0);
        let p = plob_bounds(&ch);
        assert!((p.absolute / (eta / std::f64::consts::LN_2) - 1.0).abs() < 1e-7);
    }

    fn chain(n1p: f64, e1p: f64, ntp: f64, ep: f64) -> AoppChain {
        AoppChain {
            n_g: 0.0,
            n_odd: 0.0,
            u: 0.0,
            n1_low: 0.0,
            n: 0.0,
            k: 0.0,
            r: 0.0,
            r_iterations: 0,
            m_bar: 0.0,
            e_tau: 0.0,
            m_bar_s: 0.0,
            n1_prime: n1p,
            e1ph_prime: e1p,
            nt_prime: ntp,
            e_prime: ep,
        }
    }

    #[test]
    fn zero_untagged_bits_give_zero_rate() {
        let r = key_rate(&chain(0.0, 0.1, 1e6, 0.01), &ProtocolParams::field_test(), None, &RateConversion::default());
        assert_eq!(r.rate_per_pulse, 0.0);
        assert!(r.reason.is_some());
    }

    #[test]
    fn rate_is_non_increasing_in_error_rates() {
        let p = ProtocolParams::field_test();
        let conv = RateConversion::default();
        let mut prev = f64::INFINITY;
        for i in 0..60 {
            let e = i as f64 * 0.01;
            let r = key_rate(&chain(2.4e6, e, 5.7e6, 0.007), &p, None, &conv).rate_per_pulse;
            assert!(r <= prev);
            prev = r;
        }
        let mut prev = f64::INFINITY;
        for i in 0..60 {
            let e = i as f64 * 0.001;
            let r = key_rate(&chain(2.4e6, 0.2, 5.7e6, e), &p, None, &conv).rate_per_pulse;
            assert!(r <= prev);
            prev = r;
        }
    }

    #[test]
    fn phase_error_above_half_has_reason() {
        let r = key_rate(&chain(2.4e6, 0.6, 5.7e6, 0.0), &ProtocolParams::field_test(), None, &RateConversion::default());
        assert_eq!(r.key_length, 0.0);
        assert!(r.reason.unwrap().contains("exceeds 1/2"));
    }
}
