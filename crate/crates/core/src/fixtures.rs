//! Bundled field-test inputs: the 428 km count table, source settings and
//! channel description.

use crate::error::Result;
use crate::params::{ChannelModel, KvFile, ProtocolParams, WindowProbs};
use crate::tally::{parse_counts, SiftedKeys, SourceTally};

pub const COUNTS: &str = include_str!("../fixtures/field_counts.csv");
pub const PARAMS: &str = include_str!("../fixtures/field_params.txt");
pub const CHANNEL: &str = include_str!("../fixtures/field_channel.txt");

#[derive(Debug, Clone)]
pub struct FieldTest {
    pub tally: SourceTally,
    pub sifted: SiftedKeys,
    pub params: ProtocolParams,
    pub window_fit: Option<WindowProbs>,
    pub channel: ChannelModel,
}

/// Parse the bundled inputs, fitting window probabilities from the counts.
pub fn field_test() -> Result<FieldTest> {
    let (tally, sifted) = parse_counts(COUNTS)?;
    let params = ProtocolParams::from_kv(&KvFile::parse(PARAMS)?)?;
    let (params, window_fit) = params.complete_from_tally(&tally)?;
    let channel = ChannelModel::from_kv(&KvFile::parse(CHANNEL)?)?;
    Ok(FieldTest {
        tally,
        sifted,
        params,
        window_fit,
        channel,
    })
}
