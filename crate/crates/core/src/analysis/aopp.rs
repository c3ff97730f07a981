//! Actively odd-parity pairing: the finite-key chain for untagged bits and
//! phase errors after pairing, and a direct simulation of the pairing on
//! bit strings.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::chernoff::Chernoff;
use super::decoy::DecoyEstimates;
use crate::error::{Error, Result};
use crate::params::ProtocolParams;
use crate::tally::SiftedKeys;

/// Pairing statistics feeding the chain, and the sifted key after pairing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairingStats {
    /// Number of 0-1 pairs Bob forms.
    pub n_g: f64,
    /// Odd-parity pairs when Bob's bits are grouped two by two at random.
    pub n_odd: f64,
    /// Bits surviving the parity check.
    pub nt_prime: f64,
    /// Bit-flip error rate of the surviving bits.
    pub e_prime: f64,
    /// Whether the numbers come from an actual pairing run.
    pub simulated: bool,
}

impl PairingStats {
    /// Expected statistics from bit frequencies and per-value error rates.
    pub fn expected(sifted: &SiftedKeys) -> Result<Self> {
        let (nt, n0, n1) = (sifted.n_t, sifted.n_t0, sifted.n_t1);
        if !(nt >= 2.0 && n0 > 0.0 && n1 > 0.0) {
            return Err(Error::InsufficientStatistics(
                "AOPP needs both bit values in the sifted key".into(),
            ));
        }
        let n_g = n0.min(n1);
        let n_odd = (nt / 2.0).floor() * 2.0 * n0 * n1 / (nt * (nt - 1.0));
        let e0 = sifted.errors_on_zero / n0;
        let e1 = sifted.errors_on_one / n1;
        let keep = (1.0 - e0) * (1.0 - e1) + e0 * e1;
        Ok(PairingStats {
            n_g,
            n_odd,
            nt_prime: n_g * keep,
            e_prime: if keep > 0.0 { e0 * e1 / keep } else { 0.0 },
            simulated: false,
        })
    }
}

/// Intermediates of the AOPP finite-key chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AoppChain {
    pub n_g: f64,
    pub n_odd: f64,
    pub u: f64,
    pub n1_low: f64,
    pub n: f64,
    pub k: f64,
    pub r: f64,
    pub r_iterations: u32,
    pub m_bar: f64,
    pub e_tau: f64,
    pub m_bar_s: f64,
    pub n1_prime: f64,
    pub e1ph_prime: f64,
    pub nt_prime: f64,
    pub e_prime: f64,
}

/// Solve `r = (2n+k)/k · ln(3k²/ε(r,k))` by damped fixed-point iteration.
///
/// Returns `(r, iterations)`.
pub fn solve_r<F: Fn(f64, f64) -> f64>(n: f64, k: f64, eps: F) -> Result<(f64, u32)> {
    const DAMPING: f64 = 0.5;
    const TOL: f64 = 1e-9;
    let g = |r: f64| (2.0 * n + k) / k * (3.0 * k * k / eps(r, k)).ln();
    let mut r = g(0.0);
    if !r.is_finite() {
        return Err(Error::InsufficientStatistics("r equation has no finite start".into()));
    }
    for it in 1..=200 {
        let next = (1.0 - DAMPING) * r + DAMPING * g(r);
        if !next.is_finite() {
            break;
        }
        if (next - r).abs() <= TOL * next.abs().max(1e-300) {
            return Ok((next, it));
        }
        r = next;
    }
    Err(Error::InsufficientStatistics("r iteration did not converge".into()))
}

pub fn aopp_chain(
    estimates: &DecoyEstimates,
    sifted: &SiftedKeys,
    pairing: &PairingStats,
    params: &ProtocolParams,
    chernoff: &Chernoff,
) -> Result<AoppChain> {
    let (nt, n_t0, n_t1) = (sifted.n_t, sifted.n_t0, sifted.n_t1);
    let PairingStats { n_g, n_odd, .. } = *pairing;
    if !(n_odd > 0.0 && nt > 0.0) {
        return Err(Error::InsufficientStatistics("no odd-parity pairs".into()));
    }
    if n_g > n_t0.min(n_t1) + 0.5 {
        return Err(Error::InvalidParameter("n_g exceeds min(n_t0, n_t1)".into()));
    }
    let u = n_g / (2.0 * n_odd);
    let n1_low = chernoff.lower(estimates.n1_expected());
    let n = chernoff.lower((n1_low / nt).powi(2) * u * nt / 2.0);
    let k = u * n1_low - 2.0 * n;
    if !(k > 0.0) {
        return Err(Error::InsufficientStatistics(format!("k = {k:.3e} is not positive")));
    }
    let eps_trace = params.eps_trace;
    let (r, r_iterations) = solve_r(n, k, |_, _| eps_trace)?;
    if !(2.0 * n - r > 0.0) {
        return Err(Error::InsufficientStatistics("insufficient statistics for AOPP bound".into()));
    }
    let m_bar = chernoff.upper(2.0 * n * estimates.e1ph_up);
    let e_tau = (m_bar / (2.0 * n - r)).min(1.0);
    // e(1-e) over e <= e_tau peaks at 1/2.
    let e_var = e_tau.min(0.5);
    let m_bar_s = chernoff.upper((n - r).max(0.0) * e_var * (1.0 - e_var)) + r;
    let n1_prime = chernoff.lower(
        chernoff.lower(estimates.n01_low) / n_t0 * chernoff.lower(estimates.n10_low) / n_t1 * n_g,
    );
    let e1ph_prime = if n1_prime > 0.0 { (2.0 * m_bar_s / n1_prime).min(1.0) } else { 1.0 };
    Ok(AoppChain {
        n_g,
        n_odd,
        u,
        n1_low,
        n,
        k,
        r,
        r_iterations,
        m_bar,
        e_tau,
        m_bar_s,
        n1_prime,
        e1ph_prime,
        nt_prime: pairing.nt_prime,
        e_prime: pairing.e_prime,
    })
}

/// One of Bob's 0-1 pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AoppPair {
    pub zero: usize,
    pub one: usize,
    /// Alice's parity over the two positions is 1.
    pub kept: bool,
    /// Position of the surviving bit when kept.
    pub survivor: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AoppOutcome {
    pub n_g: u64,
    pub n_odd: u64,
    pub kept: u64,
    pub discarded: u64,
    pub errors: u64,
    /// Filled by [`aopp_simulate_recorded`].
    pub pairs: Vec<AoppPair>,
}

impl AoppOutcome {
    pub fn nt_prime(&self) -> u64 {
        self.kept
    }

    pub fn e_prime(&self) -> f64 {
        if self.kept > 0 {
            self.errors as f64 / self.kept as f64
        } else {
            0.0
        }
    }

    pub fn stats(&self) -> PairingStats {
        PairingStats {
            n_g: self.n_g as f64,
            n_odd: self.n_odd as f64,
            nt_prime: self.kept as f64,
            e_prime: self.e_prime(),
            simulated: true,
        }
    }
}

/// Pair Bob's 0 bits with his 1 bits at random, keep pairs on which Alice's
/// parity is odd and keep one bit of each at random.
pub fn aopp_simulate(za: &[u8], zb: &[u8], seed: u64) -> Result<AoppOutcome> {
    simulate(za, zb, seed, false)
}

/// As [`aopp_simulate`], also returning every pair.
pub fn aopp_simulate_recorded(za: &[u8], zb: &[u8], seed: u64) -> Result<AoppOutcome> {
    simulate(za, zb, seed, true)
}

fn simulate(za: &[u8], zb: &[u8], seed: u64, record: bool) -> Result<AoppOutcome> {
    if za.len() != zb.len() {
        return Err(Error::LengthMismatch {
            left: za.len(),
            right: zb.len(),
        });
    }
    if za.len() > u32::MAX as usize {
        return Err(Error::InvalidParameter("key strings longer than 2^32 bits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut zeros: Vec<u32> = Vec::new();
    let mut ones: Vec<u32> = Vec::new();
    for (i, &b) in zb.iter().enumerate() {
        if b & 1 == 0 {
            zeros.push(i as u32);
        } else {
            ones.push(i as u32);
        }
    }
    zeros.shuffle(&mut rng);
    ones.shuffle(&mut rng);
    let mut out = AoppOutcome {
        n_g: zeros.len().min(ones.len()) as u64,
        n_odd: 0,
        kept: 0,
        discarded: 0,
        errors: 0,
        pairs: Vec::new(),
    };
    for (&i, &j) in zeros.iter().zip(ones.iter()) {
        let (i, j) = (i as usize, j as usize);
        let kept = (za[i] ^ za[j]) & 1 == 1;
        let survivor = if rng.random::<bool>() { i } else { j };
        if kept {
            out.kept += 1;
            if (za[survivor] ^ zb[survivor]) & 1 == 1 {
                out.errors += 1;
            }
        } else {
            out.discarded += 1;
        }
        if record {
            out.pairs.push(AoppPair {
                zero: i,
                one: j,
                kept,
                survivor,
            });
        }
    }
    drop(zeros);
    drop(ones);
    let mut grouped: Vec<u8> = zb.to_vec();
    grouped.shuffle(&mut rng);
    out.n_odd = grouped.chunks_exact(2).filter(|p| (p[0] ^ p[1]) & 1 == 1).count() as u64;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_zero_bob_string_has_no_pairs() {
        let o = aopp_simulate(&[0, 1, 1, 0], &[0, 0, 0, 0], 1).unwrap();
        assert_eq!(o.n_g, 0);
        assert_eq!(o.kept, 0);
        assert_eq!(o.n_odd, 0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert_eq!(
            aopp_simulate(&[0, 1], &[0], 0).unwrap_err(),
            Error::LengthMismatch { left: 2, right: 1 }
        );
    }

    #[test]
    fn deterministic_under_seed() {
        let za: Vec<u8> = (0..1000u32).map(|i| (i * 7 % 3 == 0) as u8).collect();
        let zb: Vec<u8> = (0..1000u32).map(|i| (i * 5 % 4 == 1) as u8).collect();
        assert_eq!(aopp_simulate_recorded(&za, &zb, 9).unwrap(), aopp_simulate_recorded(&za, &zb, 9).unwrap());
    }

    #[test]
    fn exhaustive_four_bit_strings() {
        for code in 0u32..256 {
            let za: Vec<u8> = (0..4).map(|i| ((code >> i) & 1) as u8).collect();
            let zb: Vec<u8> = (0..4).map(|i| ((code >> (i + 4)) & 1) as u8).collect();
            let o = aopp_simulate_recorded(&za, &zb, code as u64).unwrap();
            let zeros = zb.iter().filter(|&&b| b == 0).count();
            assert_eq!(o.n_g as usize, zeros.min(4 - zeros));
            assert_eq!(o.pairs.len() as u64, o.n_g);
            assert_eq!(o.kept + o.discarded, o.n_g);
            let mut used = [false; 4];
            let mut errors = 0;
            for p in &o.pairs {
                assert_eq!(zb[p.zero], 0);
                assert_eq!(zb[p.one], 1);
                assert!(!used[p.zero] && !used[p.one]);
                used[p.zero] = true;
                used[p.one] = true;
                // Brute force: Bob's parity is 1, so Alice's parity is 1
                // exactly when the two positions carry equal error flags.
                let err_zero = za[p.zero] != zb[p.zero];
                let err_one = za[p.one] != zb[p.one];
                let alice_odd = (za[p.zero] + za[p.one]) % 2 == 1;
                assert_eq!(p.kept, alice_odd);
                assert_eq!(p.kept, err_zero == err_one);
                if p.kept {
                    assert!(p.survivor == p.zero || p.survivor == p.one);
                    // A kept bit is wrong only if both were wrong.
                    if err_zero && err_one {
                        errors += 1;
                    }
                }
            }
            assert_eq!(o.errors, errors);
            // Grouping two by two: odd pairs cannot exceed min(#0, #1).
            assert!(o.n_odd as usize <= zeros.min(4 - zeros));
        }
    }

    #[test]
    fn expected_stats_match_error_algebra() {
        let sifted = SiftedKeys {
            n_t: 1000.0,
            n_t0: 600.0,
            n_t1: 400.0,
            e_count: 200.0,
            errors_on_zero: 120.0,
            errors_on_one: 80.0,
            strings: None,
        };
        let s = PairingStats::expected(&sifted).unwrap();
        assert_eq!(s.n_g, 400.0);
        let keep = 0.8 * 0.8 + 0.2 * 0.2;
        assert!((s.nt_prime - 400.0 * keep).abs() < 1e-9);
        assert!((s.e_prime - 0.04 / keep).abs() < 1e-12);
        assert!((s.n_odd - 500.0 * 2.0 * 600.0 * 400.0 / (1000.0 * 999.0)).abs() < 1e-9);
    }

    #[test]
    fn simulation_matches_expected_stats() {
        // Bernoulli strings with different per-value error rates.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 400_000;
        let mut za = Vec::with_capacity(n);
        let mut zb = Vec::with_capacity(n);
        for _ in 0..n {
            let b = rng.random_bool(0.4) as u8;
            let e = if b == 0 { 0.3 } else { 0.2 };
            let flip = rng.random_bool(e) as u8;
            zb.push(b);
            za.push(b ^ flip);
        }
        let o = aopp_simulate(&za, &zb, 11).unwrap();
        let sifted = SiftedKeys {
            n_t: n as f64,
            n_t0: zb.iter().filter(|&&b| b == 0).count() as f64,
            n_t1: zb.iter().filter(|&&b| b == 1).count() as f64,
            e_count: 0.0,
            errors_on_zero: za.iter().zip(&zb).filter(|(a, b)| **b == 0 && a != b).count() as f64,
            errors_on_one: za.iter().zip(&zb).filter(|(a, b)| **b == 1 && a != b).count() as f64,
            strings: None,
        };
        let e = PairingStats::expected(&sifted).unwrap();
        assert!((o.kept as f64 / e.nt_prime - 1.0).abs() < 0.01);
        assert!((o.e_prime() - e.e_prime).abs() < 0.005);
        assert!((o.n_odd as f64 / e.n_odd - 1.0).abs() < 0.01);
    }

    #[test]
    fn r_is_self_consistent() {
        let (n, k, eps) = (1.5e5, 3.0e6, 1e-10);
        let (r, _) = solve_r(n, k, |_, _| eps).unwrap();
        let back = (2.0 * n + k) / k * (3.0 * k * k / eps).ln();
        assert!((r / back - 1.0).abs() <= 1e-9);
        // Weak dependence of ε on r still converges.
        let (r2, _) = solve_r(n, k, |r, _| eps * (1.0 + 1e-3 * r).recip()).unwrap();
        let back2 = (2.0 * n + k) / k * (3.0 * k * k / (eps / (1.0 + 1e-3 * r2))).ln();
        assert!((r2 / back2 - 1.0).abs() <= 1e-8);
    }
}
