//! Security analysis: Chernoff conversions, decoy-state bounds, the AOPP
//! finite-key chain and the key rate.

pub mod aopp;
pub mod chernoff;
pub mod decoy;
pub mod keyrate;

use serde::{Deserialize, Serialize};

pub use aopp::{aopp_chain, aopp_simulate, aopp_simulate_recorded, solve_r, AoppChain, AoppOutcome, AoppPair, PairingStats};
pub use chernoff::{Chernoff, ChernoffForm};
pub use decoy::{decoy_bounds, DecoyEstimates, DecoyOptions, RateBounds, VacuumPooling};
pub use keyrate::{binary_entropy, key_rate, plob_bounds, KeyRateReport, PlobBounds, RateConversion};

use crate::error::Result;
use crate::params::{ChannelModel, ProtocolParams};
use crate::tally::{SiftedKeys, SourceTally};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOptions {
    pub chernoff_form: ChernoffForm,
    /// Failure probability of each Chernoff use; `eps_sec` when `None`.
    pub failure_prob: Option<f64>,
    pub s9_as_printed: bool,
    pub vacuum_pooling: VacuumPooling,
    pub conversion: RateConversion,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            chernoff_form: ChernoffForm::Multiplicative,
            failure_prob: None,
            s9_as_printed: false,
            vacuum_pooling: VacuumPooling::AllWindows,
            conversion: RateConversion::default(),
        }
    }
}

impl AnalysisOptions {
    pub fn chernoff(&self, params: &ProtocolParams) -> Result<Chernoff> {
        Chernoff::new(self.chernoff_form, self.failure_prob.unwrap_or(params.eps_sec))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    PositiveKey,
    ZeroKey,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnalysisReport {
    pub status: Status,
    pub reason: Option<String>,
    pub chernoff: Chernoff,
    pub decoy: Option<DecoyEstimates>,
    pub sifted: SiftedKeys,
    pub pairing: Option<PairingStats>,
    pub chain: Option<AoppChain>,
    pub key: KeyRateReport,
    pub warnings: Vec<String>,
}

/// Decoy bounds, AOPP chain and key rate over a tally.
///
/// Pairing statistics default to their expected values from the sifted
/// counts. Input errors are returned; a chain that cannot certify a key
/// produces a zero-key report with the reason.
pub fn analyze(
    tally: &SourceTally,
    sifted: &SiftedKeys,
    params: &ProtocolParams,
    channel: Option<&ChannelModel>,
    pairing: Option<PairingStats>,
    opts: &AnalysisOptions,
) -> Result<AnalysisReport> {
    let chernoff = opts.chernoff(params)?;
    tally.check()?;
    let zero = |reason: String, decoy, pairing, warnings| AnalysisReport {
        status: Status::ZeroKey,
        reason: Some(reason.clone()),
        chernoff,
        decoy,
        sifted: sifted.clone(),
        pairing,
        chain: None,
        key: KeyRateReport::zero(reason, channel),
        warnings,
    };
    let heralded: f64 = tally.cells.iter().map(|c| c.heralded).sum();
    if heralded <= 0.0 {
        return Ok(zero("no effective events".into(), None, None, Vec::new()));
    }
    let decoy = decoy_bounds(
        tally,
        params,
        &DecoyOptions {
            chernoff,
            s9_as_printed: opts.s9_as_printed,
            vacuum_pooling: opts.vacuum_pooling,
        },
    )?;
    let mut warnings = decoy.warnings.clone();
    if decoy.n_x_inferred && decoy.n_x > 0.0 {
        warnings.push(format!("N_X inferred as {:.4e} from the heralded ratio", decoy.n_x));
    }
    let pairing = match pairing {
        Some(p) => p,
        None => match PairingStats::expected(sifted) {
            Ok(p) => p,
            Err(e) => return Ok(zero(e.to_string(), Some(decoy), None, warnings)),
        },
    };
    let chain = match aopp_chain(&decoy, sifted, &pairing, params, &chernoff) {
        Ok(c) => c,
        Err(e) => return Ok(zero(e.to_string(), Some(decoy), Some(pairing), warnings)),
    };
    let key = key_rate(&chain, params, channel, &opts.conversion);
    if let Some(r) = &key.reason {
        warnings.push(r.clone());
    }
    Ok(AnalysisReport {
        status: if key.key_length > 0.0 { Status::PositiveKey } else { Status::ZeroKey },
        reason: key.reason.clone(),
        chernoff,
        decoy: Some(decoy),
        sifted: sifted.clone(),
        pairing: Some(pairing),
        chain: Some(chain),
        key,
        warnings,
    })
}
