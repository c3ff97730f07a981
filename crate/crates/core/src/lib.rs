//! Sending-or-not-sending twin-field QKD: source and channel model, count
//! bookkeeping, decoy-state bounds, the AOPP finite-key chain and key-rate
//! optimisation.

pub mod analysis;
pub mod error;
pub mod events;
pub mod fixtures;
pub mod optics;
pub mod optimizer;
pub mod params;
pub mod report;
pub mod tally;

pub use analysis::{analyze, AnalysisOptions, AnalysisReport};
pub use error::{Error, Result};
pub use optics::{expected_tally, simulate_events, SimConfig, Simulation};
pub use params::{validate, CellKey, ChannelModel, ProtocolParams};
pub use tally::{SiftedKeys, SourceTally};
