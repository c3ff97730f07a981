//! Decoy-state bounds on the untagged (single-photon) counting rates and the
//! phase-flip error rate before error rejection.

use serde::{Deserialize, Serialize};

use super::chernoff::Chernoff;
use crate::error::{Error, Result};
use crate::params::{CellKey, Choice, ProtocolParams};
use crate::tally::SourceTally;

/// Which windows contribute to a party's vacuum source.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VacuumPooling {
    /// Not-sending in a signal window and vacuum in a decoy window are the
    /// same state and are pooled.
    AllWindows,
    /// Only decoy-window vacuum counts as the vacuum source.
    DecoyWindowsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoyOptions {
    pub chernoff: Chernoff,
    /// Scale the untagged bit-0 count by `<s10>` instead of `<s01>`.
    pub s9_as_printed: bool,
    pub vacuum_pooling: VacuumPooling,
}

/// Observed counting rate of a source pair and its expected-value bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RateBounds {
    pub sent: f64,
    pub heralded: f64,
    pub observed: f64,
    pub lower: f64,
    pub upper: f64,
}

impl RateBounds {
    fn new(sent: f64, heralded: f64, chernoff: &Chernoff) -> Self {
        RateBounds {
            sent,
            heralded,
            observed: heralded / sent,
            lower: chernoff.expected_lower(heralded) / sent,
            upper: chernoff.expected_upper(heralded) / sent,
        }
    }
}

/// Bounds on untagged counting rates, untagged bit counts and the
/// phase-flip error rate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecoyEstimates {
    pub s_oo: RateBounds,
    pub s_ox: RateBounds,
    pub s_oy: RateBounds,
    pub s_xo: RateBounds,
    pub s_yo: RateBounds,
    pub s01_low: f64,
    pub s10_low: f64,
    pub s1_low: f64,
    /// Expected untagged bits 1 (Alice's single photon).
    pub n10_low: f64,
    /// Expected untagged bits 0 (Bob's single photon).
    pub n01_low: f64,
    /// Decoy pairs inside the phase slice, `N_X`.
    pub n_x: f64,
    pub n_x_inferred: bool,
    /// Wrong-side clicks, `m_X`.
    pub m_x: f64,
    pub t_x: f64,
    pub t_x_upper: f64,
    pub e1ph_up: f64,
    pub warnings: Vec<String>,
}

impl DecoyEstimates {
    /// `<n10> + <n01>`.
    pub fn n1_expected(&self) -> f64 {
        self.n10_low + self.n01_low
    }
}

fn source_cells(pooling: VacuumPooling, alice: char, bob: char) -> Vec<CellKey> {
    let choices = |c: char| -> Vec<Choice> {
        match (c, pooling) {
            ('o', VacuumPooling::AllWindows) => vec![Choice::ZVacuum, Choice::XVacuum],
            ('o', VacuumPooling::DecoyWindowsOnly) => vec![Choice::XVacuum],
            ('x', _) => vec![Choice::XDecoy],
            _ => vec![Choice::ZSignal],
        }
    };
    let mut cells = Vec::new();
    for a in choices(alice) {
        for b in choices(bob) {
            cells.push(CellKey::of(a, b));
        }
    }
    cells
}

pub fn decoy_bounds(tally: &SourceTally, params: &ProtocolParams, opts: &DecoyOptions) -> Result<DecoyEstimates> {
    if !(params.mu_a1 < params.mu_a2 && params.mu_b1 < params.mu_b2 && params.mu_a1 > 0.0 && params.mu_b1 > 0.0) {
        return Err(Error::InvalidParameter(
            "decoy intensities must be positive and below the signal intensities".into(),
        ));
    }
    let c = &opts.chernoff;
    let rate = |a: char, b: char| -> Result<RateBounds> {
        let cells = source_cells(opts.vacuum_pooling, a, b);
        let pooled = tally.pooled(cells.iter().copied());
        if !(pooled.sent > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "source {a}{b}' has no sent pulses ({})",
                cells.iter().map(|c| c.label()).collect::<Vec<_>>().join(", ")
            )));
        }
        Ok(RateBounds::new(pooled.sent, pooled.heralded, c))
    };
    let s_oo = rate('o', 'o')?;
    let s_ox = rate('o', 'x')?;
    let s_oy = rate('o', 'y')?;
    let s_xo = rate('x', 'o')?;
    let s_yo = rate('y', 'o')?;
    let mut warnings = Vec::new();

    let (ma1, ma2, mb1, mb2) = (params.mu_a1, params.mu_a2, params.mu_b1, params.mu_b2);
    let s01_raw = (mb2 * mb2 * mb1.exp() * s_ox.lower - mb1 * mb1 * mb2.exp() * s_oy.upper - (mb2 * mb2 - mb1 * mb1) * s_oo.upper)
        / (mb2 * mb1 * (mb2 - mb1));
    let s10_raw = (ma2 * ma2 * ma1.exp() * s_xo.lower - ma1 * ma1 * ma2.exp() * s_yo.upper - (ma2 * ma2 - ma1 * ma1) * s_oo.upper)
        / (ma2 * ma1 * (ma2 - ma1));
    let s01_low = clamp_nonneg(s01_raw, "s01", &mut warnings);
    let s10_low = clamp_nonneg(s10_raw, "s10", &mut warnings);
    let s1_low = ma1 / (ma1 + mb1) * s10_low + mb1 / (ma1 + mb1) * s01_low;

    let z_pairs = params.n_total * params.p_a2 * params.p_b2;
    let n10_low = z_pairs * params.eps_a * (1.0 - params.eps_b) * ma2 * (-ma2).exp() * s10_low;
    let s_bob = if opts.s9_as_printed { s10_low } else { s01_low };
    let n01_low = z_pairs * params.eps_b * (1.0 - params.eps_a) * mb2 * (-mb2).exp() * s_bob;

    let (n_x, n_x_inferred) = if tally.x_sent_in_slice > 0.0 {
        (tally.x_sent_in_slice, false)
    } else {
        match tally.slice_sent_or_inferred() {
            Some(n) => (n, true),
            None => (0.0, true),
        }
    };
    let m_x = tally.x_errors;
    let (t_x, t_x_upper) = if n_x > 0.0 {
        (m_x / n_x, c.expected_upper(m_x) / n_x)
    } else {
        warnings.push("no decoy pairs inside the phase slice; phase-flip error set to 0.5".into());
        (0.0, f64::NAN)
    };
    let vac = (-ma1 - mb1).exp();
    let e1ph_up = if n_x > 0.0 && s1_low > 0.0 {
        let raw = (t_x_upper - vac * s_oo.lower / 2.0) / (vac * (ma1 + mb1) * s1_low);
        if raw < 0.0 {
            warnings.push(format!("phase-flip error bound {raw:.3e} clamped to 0"));
            0.0
        } else if raw > 0.5 {
            warnings.push(format!("phase-flip error bound {raw:.4} exceeds 1/2"));
            raw
        } else {
            raw
        }
    } else {
        if s1_low <= 0.0 {
            warnings.push("no single-photon yield; phase-flip error set to 0.5".into());
        }
        0.5
    };

    Ok(DecoyEstimates {
        s_oo,
        s_ox,
        s_oy,
        s_xo,
        s_yo,
        s01_low,
        s10_low,
        s1_low,
        n10_low,
        n01_low,
        n_x,
        n_x_inferred,
        m_x,
        t_x,
        t_x_upper,
        e1ph_up,
        warnings,
    })
}

fn clamp_nonneg(v: f64, name: &str, warnings: &mut Vec<String>) -> f64 {
    if v < 0.0 || v.is_nan() {
        warnings.push(format!("{name} lower bound {v:.3e} clamped to 0"));
        0.0
    } else {
        v
    }
}
