//! Coherent-state interference at the measurement node.
//!
//! Two weak coherent pulses with mean photon numbers `x_a`, `x_b` (after
//! fiber loss and detection efficiency) meet on a 50:50 beam splitter with
//! relative phase `dphi`. The right and left ports see Poissonian light with
//!
//! ```text
//! n_R = (x_a + x_b + 2 sqrt(x_a x_b) cos dphi) / 2
//! n_L = (x_a + x_b - 2 sqrt(x_a x_b) cos dphi) / 2
//! ```
//!
//! and each detector clicks with probability `1 - (1 - p_dark) exp(-n)`.
//! Misalignment flips the sign of the interference term with probability
//! `e_dx`.
//!
//! The module offers a closed-form expected-value mode and a Monte-Carlo
//! event mode. Random draws come from a counter-addressed ChaCha stream so
//! that any index range can be generated independently.

use std::f64::consts::{PI, TAU};
use std::ops::Range;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{cell_probability, CellKey, ChannelModel, Choice, ProtocolParams};
use crate::tally::{SiftedKeys, SourceTally, TallyBuilder};

/// Click probabilities of one pulse pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DetectorRates {
    pub left: f64,
    pub right: f64,
    /// Only the left detector clicked.
    pub left_only: f64,
    pub right_only: f64,
}

impl DetectorRates {
    /// Probability of a one-detector-heralded event.
    pub fn heralded(&self) -> f64 {
        self.left_only + self.right_only
    }
}

/// `1 - (1 - p_dark) exp(-n)` without cancellation for tiny `n`.
fn click_probability(n: f64, p_dark: f64) -> f64 {
    -(-n).exp_m1() + p_dark * (-n).exp()
}

fn received(mu_a: f64, mu_b: f64, channel: &ChannelModel) -> (f64, f64) {
    (mu_a * channel.eta_a(), mu_b * channel.eta_b())
}

fn check_intensities(mu_a: f64, mu_b: f64) -> Result<()> {
    if !(mu_a >= 0.0) || !(mu_b >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "intensities must be non-negative, got {mu_a} and {mu_b}"
        )));
    }
    Ok(())
}

/// Click probabilities for a pulse pair with fixed relative phase `dphi`.
pub fn detector_rates(mu_a: f64, mu_b: f64, dphi: f64, channel: &ChannelModel) -> Result<DetectorRates> {
    check_intensities(mu_a, mu_b)?;
    let (xa, xb) = received(mu_a, mu_b, channel);
    Ok(rates_at(xa, xb, dphi.cos(), channel.p_dark, channel.e_dx))
}

fn rates_at(xa: f64, xb: f64, cos_dphi: f64, p_dark: f64, e_dx: f64) -> DetectorRates {
    let half = 0.5 * (xa + xb);
    let cross = (xa * xb).sqrt() * cos_dphi;
    let port = |interference: f64| {
        let r = click_probability(half + interference, p_dark);
        let l = click_probability(half - interference, p_dark);
        (l, r, l * (1.0 - r), r * (1.0 - l))
    };
    let (l0, r0, lo0, ro0) = port(cross);
    let (l1, r1, lo1, ro1) = port(-cross);
    let mix = |a: f64, b: f64| (1.0 - e_dx) * a + e_dx * b;
    DetectorRates {
        left: mix(l0, l1),
        right: mix(r0, r1),
        left_only: mix(lo0, lo1),
        right_only: mix(ro0, ro1),
    }
}

/// `I0(x) - 1` by its power series.
fn bessel_i0_minus_one(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 0.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term <= sum * 1e-17 {
            break;
        }
    }
    sum
}

/// Click probabilities averaged over a uniformly random relative phase.
///
/// Uses `<exp(-c cos φ)> = I0(c)`; misalignment drops out of the average.
pub fn phase_averaged_rates(mu_a: f64, mu_b: f64, channel: &ChannelModel) -> Result<DetectorRates> {
    check_intensities(mu_a, mu_b)?;
    let (xa, xb) = received(mu_a, mu_b, channel);
    let s = xa + xb;
    let c = (xa * xb).sqrt();
    let q = 1.0 - channel.p_dark;
    let g = (-0.5 * s).exp();
    // single = 1 - q g I0(c); one_only = q g I0(c) - q^2 e^{-s}
    //        = q g [ (I0 - 1) + (1 - q g) ]
    let one_minus_qg = -(-0.5 * s).exp_m1() + channel.p_dark * g;
    let single = one_minus_qg - q * g * bessel_i0_minus_one(c);
    let only = q * g * (bessel_i0_minus_one(c) + one_minus_qg);
    Ok(DetectorRates {
        left: single,
        right: single,
        left_only: only,
        right_only: only,
    })
}

/// Phase-slice test: keep the pair when `1 - |cos(θa - θb - ψ)| <= λ`.
pub fn xwindow_postselect(theta_a: f64, theta_b: f64, psi_ab: f64, lambda: f64) -> bool {
    let d = (theta_a - theta_b - psi_ab).rem_euclid(TAU);
    1.0 - d.cos().abs() <= lambda
}

/// Fraction of uniformly random relative phases accepted by the slice.
pub fn slice_acceptance(lambda: f64) -> f64 {
    if lambda >= 1.0 {
        1.0
    } else if lambda <= 0.0 {
        0.0
    } else {
        (2.0 / PI) * (1.0 - lambda).acos()
    }
}

/// Expected X-window statistics per decoy-level pulse pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SliceExpectation {
    /// Probability the pair's phases fall inside the slice.
    pub accepted: f64,
    /// Probability of an accepted, one-detector-heralded event.
    pub effective: f64,
    /// Probability of an accepted event heralded on the wrong side.
    pub errors: f64,
}

/// Integrate the click model over the accepted phase region, assuming the
/// announced reference phase equals the true channel phase.
pub fn slice_expectation(mu_a: f64, mu_b: f64, lambda: f64, channel: &ChannelModel) -> Result<SliceExpectation> {
    check_intensities(mu_a, mu_b)?;
    let accepted = slice_acceptance(lambda);
    if accepted == 0.0 {
        return Ok(SliceExpectation {
            accepted,
            effective: 0.0,
            errors: 0.0,
        });
    }
    let (xa, xb) = received(mu_a, mu_b, channel);
    let half_width = if lambda >= 1.0 { 0.5 * PI } else { (1.0 - lambda).acos() };
    // The accepted set is four mirror images of [0, half_width]; near φ = 0
    // the right detector is the correct one.
    let (herald, wrong) = simpson(0.0, half_width, 256, |phi| {
        let r = rates_at(xa, xb, phi.cos(), channel.p_dark, channel.e_dx);
        (r.heralded(), r.left_only)
    });
    let weight = 2.0 / PI;
    Ok(SliceExpectation {
        accepted,
        effective: weight * herald,
        errors: weight * wrong,
    })
}

fn simpson<F: Fn(f64) -> (f64, f64)>(a: f64, b: f64, intervals: usize, f: F) -> (f64, f64) {
    let n = intervals + intervals % 2;
    let h = (b - a) / n as f64;
    let mut acc = (0.0, 0.0);
    for i in 0..=n {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let (u, v) = f(a + h * i as f64);
        acc.0 += w * u;
        acc.1 += w * v;
    }
    (acc.0 * h / 3.0, acc.1 * h / 3.0)
}

/// Expected tally and sifted-key statistics for `params.n_total` pulse pairs.
pub fn expected_tally(params: &ProtocolParams, channel: &ChannelModel) -> Result<(SourceTally, SiftedKeys)> {
    crate::params::validate(params).into_result()?;
    channel.validate().into_result()?;
    Ok(expected_tally_unchecked(params, channel))
}

pub(crate) fn expected_tally_unchecked(params: &ProtocolParams, channel: &ChannelModel) -> (SourceTally, SiftedKeys) {
    let n = params.n_total;
    let mut tally = SourceTally::default();
    for cell in CellKey::all() {
        let mu_a = params.alice_mu(cell.alice.intensity());
        let mu_b = params.bob_mu(cell.bob.intensity());
        let sent = cell_probability(params, cell) * n;
        let rate = phase_averaged_rates(mu_a, mu_b, channel)
            .map(|r| r.heralded())
            .unwrap_or(0.0);
        let c = tally.cell_mut(cell);
        c.sent = sent;
        c.heralded = sent * rate;
    }
    let decoy = CellKey::of(Choice::XDecoy, Choice::XDecoy);
    let n_xx = tally.cell(decoy).sent;
    if let Ok(slice) = slice_expectation(params.mu_a1, params.mu_b1, params.lambda, channel) {
        tally.x_sent_in_slice = n_xx * slice.accepted;
        tally.x_effective = n_xx * slice.effective;
        tally.x_errors = n_xx * slice.errors;
    }
    let sifted = SiftedKeys::from_tally(&tally);
    (tally, sifted)
}

/// Process driving the relative phase between the two arms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum DriftModel {
    /// Constant angular velocity of `drift_rate`.
    Linear,
    /// Gaussian random walk on the estimation-block grid; the RMS phase step
    /// per block equals `drift_rate` times the block duration.
    RandomWalk,
}

/// How the reference-region counts are turned into a phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PhaseEstimator {
    /// Inverse cosine from the first region, sign from the second.
    CosineWithSineSign,
    /// `atan2` of the two region contrasts.
    Atan2,
}

/// Knobs of the Monte-Carlo mode that the protocol parameters do not cover.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Pulse-pair repetition rate, Hz.
    pub clock_hz: f64,
    /// Reference-pulse repetition rate, Hz.
    pub ref_rate_hz: f64,
    pub drift: DriftModel,
    pub estimator: PhaseEstimator,
    /// Keep sifted bit strings while their length stays below this cap.
    pub string_cap: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            clock_hz: 312.5e6,
            ref_rate_hz: 200e6,
            drift: DriftModel::RandomWalk,
            estimator: PhaseEstimator::CosineWithSineSign,
            string_cap: 50_000_000,
        }
    }
}

/// Counts from the two reference regions and the phase they imply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseEstimate {
    pub n1: f64,
    pub n2: f64,
    pub m1: f64,
    pub m2: f64,
    pub delta_hat: f64,
    pub block_start_index: u64,
}

/// Solve `n1/(n1+n2) = (1 + cos δ)/2`, `m1/(m1+m2) = (1 - sin δ)/2` for δ in
/// `[0, 2π)`, taking the branch of the inverse cosine selected by the sign
/// of the sine equation.
pub fn estimate_phase(n1: f64, n2: f64, m1: f64, m2: f64) -> Result<f64> {
    let (c, s) = contrasts(n1, n2, m1, m2)?;
    let base = c.acos();
    Ok(if s >= 0.0 { base } else { (TAU - base).rem_euclid(TAU) })
}

/// Same equations solved jointly with `atan2`.
pub fn estimate_phase_atan2(n1: f64, n2: f64, m1: f64, m2: f64) -> Result<f64> {
    let (c, s) = contrasts(n1, n2, m1, m2)?;
    Ok(s.atan2(c).rem_euclid(TAU))
}

fn contrasts(n1: f64, n2: f64, m1: f64, m2: f64) -> Result<(f64, f64)> {
    if !(n1 >= 0.0 && n2 >= 0.0 && m1 >= 0.0 && m2 >= 0.0) {
        return Err(Error::InvalidParameter("reference counts must be non-negative".into()));
    }
    if !(n1 + n2 > 0.0) || !(m1 + m2 > 0.0) {
        return Err(Error::InsufficientReferenceCounts);
    }
    let c = (2.0 * n1 / (n1 + n2) - 1.0).clamp(-1.0, 1.0);
    let s = (1.0 - 2.0 * m1 / (m1 + m2)).clamp(-1.0, 1.0);
    Ok((c, s))
}

/// Expected counts per reference region during one estimation block.
pub fn reference_counts_per_region(channel: &ChannelModel, config: &SimConfig) -> f64 {
    channel.mu_ref * (channel.eta_a() + channel.eta_b()) * config.ref_rate_hz * channel.t_est * 1e-6
}

/// Noise-free region counts for channel phase `delta`.
pub fn expected_reference_counts(delta: f64, total_per_region: f64) -> (f64, f64, f64, f64) {
    let k = total_per_region;
    (
        k * (1.0 + delta.cos()) / 2.0,
        k * (1.0 - delta.cos()) / 2.0,
        k * (1.0 - delta.sin()) / 2.0,
        k * (1.0 + delta.sin()) / 2.0,
    )
}

/// One simulated pulse pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PulsePairOutcome {
    pub index: u64,
    pub cell: CellKey,
    /// Private phases; zero for vacuum pulses.
    pub theta_a: f64,
    pub theta_b: f64,
    /// Reference phase announced for the pair's estimation block.
    pub psi_ab: f64,
    pub click_left: bool,
    pub click_right: bool,
}

impl PulsePairOutcome {
    pub fn heralded(&self) -> bool {
        self.click_left ^ self.click_right
    }
}

const WORDS_PER_PAIR: u128 = 10;
const EVENT_STREAM: u64 = 0;
const DRIFT_STREAM: u64 = 1;
const REFERENCE_STREAM: u64 = 2;

fn unit(word: u64) -> f64 {
    (word >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Precomputed state shared by every partition of one simulation run.
#[derive(Debug, Clone)]
pub struct Simulation {
    params: ProtocolParams,
    channel: ChannelModel,
    config: SimConfig,
    seed: u64,
    n_pairs: u64,
    block_len: u64,
    cumulative: [f64; 16],
    /// True channel phase at each block boundary.
    drift: Vec<f64>,
    /// Announced estimate per block.
    estimates: Vec<PhaseEstimate>,
    eta_a: f64,
    eta_b: f64,
}

impl Simulation {
    pub fn new(
        params: &ProtocolParams,
        channel: &ChannelModel,
        config: SimConfig,
        n_pairs: u64,
        seed: u64,
    ) -> Result<Self> {
        if n_pairs == 0 {
            return Err(Error::InvalidParameter("n_pairs must be at least 1".into()));
        }
        crate::params::validate(params).into_result()?;
        channel.validate().into_result()?;
        let mut cumulative = [0.0; 16];
        let mut acc = 0.0;
        for cell in CellKey::all() {
            acc += cell_probability(params, cell);
            cumulative[cell.code() as usize] = acc;
        }
        cumulative[15] = f64::INFINITY;

        let block_len = ((channel.t_est * 1e-6 * config.clock_hz).round() as u64).max(1);
        let n_blocks = n_pairs.div_ceil(block_len) as usize;
        let block_ms = block_len as f64 / config.clock_hz * 1e3;

        let mut drift_rng = ChaCha8Rng::seed_from_u64(seed);
        drift_rng.set_stream(DRIFT_STREAM);
        let start = drift_rng.random::<f64>() * TAU;
        let mut drift = Vec::with_capacity(n_blocks + 1);
        drift.push(start);
        let step = channel.drift_rate * block_ms;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        for b in 0..n_blocks {
            let next = match config.drift {
                DriftModel::Linear => drift[b] + step,
                DriftModel::RandomWalk => drift[b] + step * normal.sample(&mut drift_rng),
            };
            drift.push(next);
        }

        let per_region = reference_counts_per_region(channel, &config);
        let mut ref_rng = ChaCha8Rng::seed_from_u64(seed);
        ref_rng.set_stream(REFERENCE_STREAM);
        let mut estimates = Vec::with_capacity(n_blocks);
        let mut last = start;
        for b in 0..n_blocks {
            let mid = 0.5 * (drift[b] + drift[b + 1]);
            let (e1, e2, e3, e4) = expected_reference_counts(mid, per_region);
            let mut draw = |mean: f64| -> f64 {
                if mean > 0.0 {
                    Poisson::new(mean).map(|p| p.sample(&mut ref_rng)).unwrap_or(0.0)
                } else {
                    0.0
                }
            };
            let (n1, n2, m1, m2) = (draw(e1), draw(e2), draw(e3), draw(e4));
            let est = match config.estimator {
                PhaseEstimator::CosineWithSineSign => estimate_phase(n1, n2, m1, m2),
                PhaseEstimator::Atan2 => estimate_phase_atan2(n1, n2, m1, m2),
            };
            let delta_hat = est.unwrap_or(last);
            last = delta_hat;
            estimates.push(PhaseEstimate {
                n1,
                n2,
                m1,
                m2,
                delta_hat,
                block_start_index: b as u64 * block_len,
            });
        }

        Ok(Simulation {
            params: *params,
            channel: *channel,
            config,
            seed,
            n_pairs,
            block_len,
            cumulative,
            drift,
            estimates,
            eta_a: channel.eta_a(),
            eta_b: channel.eta_b(),
        })
    }

    pub fn n_pairs(&self) -> u64 {
        self.n_pairs
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ProtocolParams {
        &self.params
    }

    pub fn channel(&self) -> &ChannelModel {
        &self.channel
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn phase_estimates(&self) -> &[PhaseEstimate] {
        &self.estimates
    }

    /// True relative channel phase at pulse `index`.
    pub fn channel_phase(&self, index: u64) -> f64 {
        let b = (index / self.block_len) as usize;
        let frac = (index % self.block_len) as f64 / self.block_len as f64;
        self.drift[b] + (self.drift[b + 1] - self.drift[b]) * frac
    }

    /// Outcomes for pulse indices in `range`; identical to the matching
    /// slice of the full stream regardless of how the range was chosen.
    pub fn events(&self, range: Range<u64>) -> EventIter<'_> {
        let end = range.end.min(self.n_pairs);
        let start = range.start.min(end);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(EVENT_STREAM);
        rng.set_word_pos(start as u128 * WORDS_PER_PAIR);
        EventIter {
            sim: self,
            rng,
            next: start,
            end,
        }
    }

    fn outcome(&self, index: u64, w: [u64; 5]) -> PulsePairOutcome {
        let u_cell = unit(w[0]);
        let code = self.cumulative.iter().position(|&c| u_cell < c).unwrap_or(15) as u8;
        let cell = CellKey::from_code(code).expect("code < 16");
        let mu_a = self.params.alice_mu(cell.alice.intensity());
        let mu_b = self.params.bob_mu(cell.bob.intensity());
        let theta_a = if mu_a > 0.0 { (w[1] >> 32) as f64 * (TAU / 4294967296.0) } else { 0.0 };
        let theta_b = if mu_b > 0.0 { (w[1] & 0xffff_ffff) as f64 * (TAU / 4294967296.0) } else { 0.0 };
        let xa = mu_a * self.eta_a;
        let xb = mu_b * self.eta_b;
        let half = 0.5 * (xa + xb);
        let mut cross = (xa * xb).sqrt() * (theta_b - theta_a + self.channel_phase(index)).cos();
        if unit(w[4]) < self.channel.e_dx {
            cross = -cross;
        }
        let p_right = click_probability(half + cross, self.channel.p_dark);
        let p_left = click_probability(half - cross, self.channel.p_dark);
        PulsePairOutcome {
            index,
            cell,
            theta_a,
            theta_b,
            psi_ab: self.estimates[(index / self.block_len) as usize].delta_hat,
            click_left: unit(w[2]) < p_left,
            click_right: unit(w[3]) < p_right,
        }
    }

    /// Tally and sifted keys over the whole run, generated in `partitions`
    /// concurrent chunks and merged in index order.
    pub fn run(&self, partitions: usize) -> (SourceTally, SiftedKeys) {
        let builder = self.run_builder(partitions);
        builder.finish()
    }

    pub(crate) fn run_builder(&self, partitions: usize) -> TallyBuilder {
        let parts = partitions.max(1) as u64;
        let chunk = self.n_pairs.div_ceil(parts);
        let lambda = self.params.lambda;
        let cap = self.config.string_cap;
        let builders: Vec<TallyBuilder> = (0..parts)
            .into_par_iter()
            .map(|p| {
                let start = p * chunk;
                let end = ((p + 1) * chunk).min(self.n_pairs);
                let mut b = TallyBuilder::new(lambda, cap);
                for ev in self.events(start..end) {
                    b.push(&ev);
                }
                b
            })
            .collect();
        let mut iter = builders.into_iter();
        let mut acc = iter.next().unwrap_or_else(|| TallyBuilder::new(lambda, cap));
        for b in iter {
            acc.merge(b);
        }
        acc
    }
}

/// Lazily generated outcomes for a contiguous index range.
pub struct EventIter<'a> {
    sim: &'a Simulation,
    rng: ChaCha8Rng,
    next: u64,
    end: u64,
}

impl Iterator for EventIter<'_> {
    type Item = PulsePairOutcome;

    fn next(&mut self) -> Option<PulsePairOutcome> {
        if self.next >= self.end {
            return None;
        }
        let mut w = [0u64; 5];
        for x in &mut w {
            *x = self.rng.next_u64();
        }
        let out = self.sim.outcome(self.next, w);
        self.next += 1;
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = (self.end - self.next) as usize;
        (n, Some(n))
    }
}

/// All `n_pairs` outcomes of a seeded run.
pub fn simulate_events(
    params: &ProtocolParams,
    channel: &ChannelModel,
    n_pairs: u64,
    seed: u64,
) -> Result<Simulation> {
    Simulation::new(params, channel, SimConfig::default(), n_pairs, seed)
}
