//! Delimited-text event stream: a header with the run identity and sent
//! counts, then one record per heralded pulse pair.

use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::optics::{PulsePairOutcome, Simulation};
use crate::params::CellKey;
use crate::report::sha256_hex;
use crate::tally::{SiftedKeys, SourceTally, TallyBuilder};

pub const EVENTS_HEADER: &str = "index,cell,side,theta_a,theta_b,psi_ab";

#[derive(Debug, Clone, PartialEq)]
pub struct EventHeader {
    pub seed: u64,
    pub n_pairs: u64,
    pub params_sha256: String,
    pub lambda: f64,
    /// Sent pulse pairs per cell code.
    pub sent: [f64; 16],
    pub x_sent_in_slice: f64,
}

/// Write the heralded events of a run. Sent counts come from `tally`, which
/// must be the tally of the same run.
pub fn write_events<W: Write>(sim: &Simulation, tally: &SourceTally, out: &mut W) -> io::Result<()> {
    let params = sim.params();
    writeln!(out, "# seed = {}", sim.seed())?;
    writeln!(out, "# n_pairs = {}", sim.n_pairs())?;
    writeln!(out, "# params_sha256 = {}", sha256_hex(params.to_kv_string().as_bytes()))?;
    writeln!(out, "# lambda = {}", params.lambda)?;
    let sent: Vec<String> = tally.cells.iter().map(|c| format!("{}", c.sent)).collect();
    writeln!(out, "# sent = {}", sent.join(" "))?;
    writeln!(out, "# x_sent_in_slice = {}", tally.x_sent_in_slice)?;
    writeln!(out, "{EVENTS_HEADER}")?;
    for ev in sim.events(0..sim.n_pairs()) {
        if !ev.heralded() {
            continue;
        }
        let side = if ev.click_left { 'L' } else { 'R' };
        if ev.cell.is_decoy_pair() {
            writeln!(
                out,
                "{},{},{side},{},{},{}",
                ev.index,
                ev.cell.code(),
                ev.theta_a,
                ev.theta_b,
                ev.psi_ab
            )?;
        } else {
            writeln!(out, "{},{},{side},,,", ev.index, ev.cell.code())?;
        }
    }
    Ok(())
}

fn header_value<'a>(line: &'a str, key: &str) -> Option<&'a str> {
    let rest = line.strip_prefix('#')?.trim();
    let (k, v) = rest.split_once('=')?;
    (k.trim() == key).then(|| v.trim())
}

pub fn read_events(text: &str) -> Result<(EventHeader, Vec<PulsePairOutcome>)> {
    let mut header = EventHeader {
        seed: 0,
        n_pairs: 0,
        params_sha256: String::new(),
        lambda: f64::NAN,
        sent: [0.0; 16],
        x_sent_in_slice: 0.0,
    };
    let parse_err = |line: usize, column: usize, message: String| Error::Parse { line, column, message };
    let mut events = Vec::new();
    let mut seen_columns = false;
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('#') {
            let num = |key: &str| -> Result<Option<f64>> {
                match header_value(line, key) {
                    Some(v) => v.parse().map(Some).map_err(|_| parse_err(ln, 1, format!("bad {key}"))),
                    None => Ok(None),
                }
            };
            if let Some(v) = header_value(line, "seed") {
                header.seed = v.parse().map_err(|_| parse_err(ln, 1, "bad seed".into()))?;
            }
            if let Some(v) = header_value(line, "n_pairs") {
                header.n_pairs = v.parse().map_err(|_| parse_err(ln, 1, "bad n_pairs".into()))?;
            }
            if let Some(v) = header_value(line, "params_sha256") {
                header.params_sha256 = v.to_string();
            }
            if let Some(v) = num("lambda")? {
                header.lambda = v;
            }
            if let Some(v) = num("x_sent_in_slice")? {
                header.x_sent_in_slice = v;
            }
            if let Some(v) = header_value(line, "sent") {
                let parts: Vec<&str> = v.split_whitespace().collect();
                if parts.len() != 16 {
                    return Err(parse_err(ln, 1, format!("expected 16 sent counts, found {}", parts.len())));
                }
                for (k, p) in parts.iter().enumerate() {
                    header.sent[k] = p.parse().map_err(|_| parse_err(ln, k + 1, format!("bad sent count {p:?}")))?;
                }
            }
            continue;
        }
        if !seen_columns {
            if line != EVENTS_HEADER {
                return Err(parse_err(ln, 1, format!("expected header {EVENTS_HEADER:?}")));
            }
            seen_columns = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(parse_err(ln, fields.len().min(6), format!("expected 6 fields, found {}", fields.len())));
        }
        let index: u64 = fields[0].parse().map_err(|_| parse_err(ln, 1, "bad index".into()))?;
        let code: u8 = fields[1].parse().map_err(|_| parse_err(ln, 2, "bad cell code".into()))?;
        let cell = CellKey::from_code(code).map_err(|e| parse_err(ln, 2, e.to_string()))?;
        let (click_left, click_right) = match fields[2] {
            "L" => (true, false),
            "R" => (false, true),
            other => return Err(parse_err(ln, 3, format!("click side must be L or R, got {other:?}"))),
        };
        let phase = |k: usize| -> Result<f64> {
            if fields[k].is_empty() {
                return Ok(0.0);
            }
            fields[k].parse().map_err(|_| parse_err(ln, k + 1, format!("bad phase {:?}", fields[k])))
        };
        events.push(PulsePairOutcome {
            index,
            cell,
            theta_a: phase(3)?,
            theta_b: phase(4)?,
            psi_ab: phase(5)?,
            click_left,
            click_right,
        });
    }
    if !seen_columns {
        return Err(parse_err(1, 1, "missing event header".into()));
    }
    Ok((header, events))
}

/// Rebuild the tally from heralded events and the header's sent counts.
pub fn tally_from_events(header: &EventHeader, events: &[PulsePairOutcome], string_cap: usize) -> (SourceTally, SiftedKeys) {
    let mut b = TallyBuilder::new(header.lambda, string_cap);
    for ev in events {
        b.push(ev);
    }
    let (mut tally, sifted) = b.finish();
    for (c, s) in tally.cells.iter_mut().zip(header.sent.iter()) {
        c.sent = *s;
    }
    tally.x_sent_in_slice = header.x_sent_in_slice;
    (tally, sifted)
}
