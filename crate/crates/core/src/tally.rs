//! Per-cell counts, Z-window sifting and X-window error statistics.
//!
//! Counts are stored as `f64` so that the same types carry observed integer
//! tallies (exact below 2^53) and expected-value tallies from the closed-form
//! channel model.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optics::{xwindow_postselect, PulsePairOutcome};
use crate::params::{CellKey, Choice};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CellCounts {
    pub sent: f64,
    /// One-detector-heralded events.
    pub heralded: f64,
}

impl CellCounts {
    pub fn gain(&self) -> f64 {
        if self.sent > 0.0 {
            self.heralded / self.sent
        } else {
            0.0
        }
    }
}

/// Sent and heralded counts for the 16 cells plus X-window statistics.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SourceTally {
    pub cells: [CellCounts; 16],
    /// Accepted, heralded decoy-pair events.
    pub x_effective: f64,
    /// Wrong-side clicks among `x_effective`.
    pub x_errors: f64,
    /// Decoy pairs whose phases passed the slice, `N_X`. Zero when unknown.
    pub x_sent_in_slice: f64,
}

impl SourceTally {
    pub fn cell(&self, cell: CellKey) -> &CellCounts {
        &self.cells[cell.code() as usize]
    }

    pub fn cell_mut(&mut self, cell: CellKey) -> &mut CellCounts {
        &mut self.cells[cell.code() as usize]
    }

    pub fn total_sent(&self) -> f64 {
        self.cells.iter().map(|c| c.sent).sum()
    }

    /// Field-wise sum.
    pub fn merge(&mut self, other: &SourceTally) {
        for (a, b) in self.cells.iter_mut().zip(other.cells.iter()) {
            a.sent += b.sent;
            a.heralded += b.heralded;
        }
        self.x_effective += other.x_effective;
        self.x_errors += other.x_errors;
        self.x_sent_in_slice += other.x_sent_in_slice;
    }

    /// Sum of sent and heralded counts over several cells.
    pub fn pooled<I: IntoIterator<Item = CellKey>>(&self, cells: I) -> CellCounts {
        cells.into_iter().fold(CellCounts::default(), |acc, c| {
            let x = self.cell(c);
            CellCounts {
                sent: acc.sent + x.sent,
                heralded: acc.heralded + x.heralded,
            }
        })
    }

    /// `N_X`, inferred when absent from the ratio of accepted to all
    /// heralded decoy-pair events. The one-click probability of a decoy pair
    /// does not depend on its relative phase to first order, so the slice
    /// keeps the same fraction of sent and of heralded pairs.
    pub fn slice_sent_or_inferred(&self) -> Option<f64> {
        if self.x_sent_in_slice > 0.0 {
            return Some(self.x_sent_in_slice);
        }
        let xx = self.cell(CellKey::of(Choice::XDecoy, Choice::XDecoy));
        if xx.heralded > 0.0 && self.x_effective > 0.0 {
            Some(self.x_effective * xx.sent / xx.heralded)
        } else {
            None
        }
    }

    /// Check the count invariants.
    pub fn check(&self) -> Result<()> {
        for cell in CellKey::all() {
            let c = self.cell(cell);
            if !(c.sent >= 0.0 && c.heralded >= 0.0) {
                return Err(Error::InvalidParameter(format!("{cell}: negative count")));
            }
            if c.heralded > c.sent {
                return Err(Error::InvalidParameter(format!("{cell}: heralded exceeds sent")));
            }
        }
        if self.x_errors > self.x_effective {
            return Err(Error::InvalidParameter("x_errors exceeds x_effective".into()));
        }
        let xx = self.cell(CellKey::of(Choice::XDecoy, Choice::XDecoy));
        if self.x_effective > xx.heralded {
            return Err(Error::InvalidParameter(
                "x_effective exceeds heralded decoy-pair events".into(),
            ));
        }
        Ok(())
    }
}

/// Z-window key statistics. Alice's bit is 1 when she sends; Bob's bit is 0
/// when he sends, so a bit error is a send-send or a not-send/not-send event.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SiftedKeys {
    pub n_t: f64,
    /// Bob's bit-0 count (Bob sent).
    pub n_t0: f64,
    pub n_t1: f64,
    pub e_count: f64,
    /// Errors among Bob's 0 bits (send-send).
    pub errors_on_zero: f64,
    /// Errors among Bob's 1 bits (neither sent).
    pub errors_on_one: f64,
    /// Alice's and Bob's bit strings, when retained.
    #[serde(skip)]
    pub strings: Option<(Vec<u8>, Vec<u8>)>,
}

impl SiftedKeys {
    /// Bit-flip error rate `E`.
    pub fn error_rate(&self) -> f64 {
        if self.n_t > 0.0 {
            self.e_count / self.n_t
        } else {
            0.0
        }
    }

    /// Statistics implied by the four heralded Z-window cells.
    pub fn from_tally(tally: &SourceTally) -> Self {
        let h = |a, b| tally.cell(CellKey::of(a, b)).heralded;
        let ss = h(Choice::ZSignal, Choice::ZSignal);
        let vs = h(Choice::ZVacuum, Choice::ZSignal);
        let sv = h(Choice::ZSignal, Choice::ZVacuum);
        let vv = h(Choice::ZVacuum, Choice::ZVacuum);
        SiftedKeys {
            n_t: ss + vs + sv + vv,
            n_t0: ss + vs,
            n_t1: sv + vv,
            e_count: ss + vv,
            errors_on_zero: ss,
            errors_on_one: vv,
            strings: None,
        }
    }
}

/// Bits recorded for a heralded Z-window event: `(alice, bob)`.
pub fn z_bits(cell: CellKey) -> Option<(u8, u8)> {
    if !cell.is_z_window() {
        return None;
    }
    let alice = u8::from(cell.alice == Choice::ZSignal);
    let bob = u8::from(cell.bob != Choice::ZSignal);
    Some((alice, bob))
}

/// Single-pass collector for the tally and the sifted keys.
#[derive(Debug, Clone)]
pub struct TallyBuilder {
    pub tally: SourceTally,
    pub sifted: SiftedKeys,
    lambda: f64,
    string_cap: usize,
    alice_bits: Vec<u8>,
    bob_bits: Vec<u8>,
    overflow: bool,
}

impl TallyBuilder {
    pub fn new(lambda: f64, string_cap: usize) -> Self {
        TallyBuilder {
            tally: SourceTally::default(),
            sifted: SiftedKeys::default(),
            lambda,
            string_cap,
            alice_bits: Vec::new(),
            bob_bits: Vec::new(),
            overflow: string_cap == 0,
        }
    }

    pub fn push(&mut self, ev: &PulsePairOutcome) {
        let heralded = ev.heralded();
        let c = self.tally.cell_mut(ev.cell);
        c.sent += 1.0;
        if heralded {
            c.heralded += 1.0;
        }
        if ev.cell.is_decoy_pair() && xwindow_postselect(ev.theta_a, ev.theta_b, ev.psi_ab, self.lambda) {
            self.tally.x_sent_in_slice += 1.0;
            if heralded {
                self.tally.x_effective += 1.0;
                let right_is_correct = (ev.theta_a - ev.theta_b - ev.psi_ab).cos() > 0.0;
                if ev.click_right != right_is_correct {
                    self.tally.x_errors += 1.0;
                }
            }
        }
        if heralded {
            if let Some((a, b)) = z_bits(ev.cell) {
                let s = &mut self.sifted;
                s.n_t += 1.0;
                if b == 0 {
                    s.n_t0 += 1.0;
                } else {
                    s.n_t1 += 1.0;
                }
                if a != b {
                    s.e_count += 1.0;
                    if b == 0 {
                        s.errors_on_zero += 1.0;
                    } else {
                        s.errors_on_one += 1.0;
                    }
                }
                if !self.overflow {
                    if self.alice_bits.len() < self.string_cap {
                        self.alice_bits.push(a);
                        self.bob_bits.push(b);
                    } else {
                        self.overflow = true;
                        self.alice_bits = Vec::new();
                        self.bob_bits = Vec::new();
                    }
                }
            }
        }
    }

    /// Append a builder that covered the following index range.
    pub fn merge(&mut self, other: TallyBuilder) {
        self.tally.merge(&other.tally);
        let s = &mut self.sifted;
        let o = &other.sifted;
        s.n_t += o.n_t;
        s.n_t0 += o.n_t0;
        s.n_t1 += o.n_t1;
        s.e_count += o.e_count;
        s.errors_on_zero += o.errors_on_zero;
        s.errors_on_one += o.errors_on_one;
        if self.overflow || other.overflow || self.alice_bits.len() + other.alice_bits.len() > self.string_cap {
            self.overflow = true;
            self.alice_bits = Vec::new();
            self.bob_bits = Vec::new();
        } else {
            self.alice_bits.extend(other.alice_bits);
            self.bob_bits.extend(other.bob_bits);
        }
    }

    pub fn finish(self) -> (SourceTally, SiftedKeys) {
        let mut sifted = self.sifted;
        if !self.overflow {
            sifted.strings = Some((self.alice_bits, self.bob_bits));
        }
        (self.tally, sifted)
    }
}

/// Count a stream of pulse-pair outcomes into a tally.
pub fn accumulate<I>(events: I, lambda: f64) -> Result<SourceTally>
where
    I: IntoIterator<Item = PulsePairOutcome>,
{
    let mut b = TallyBuilder::new(lambda, 0);
    for (i, ev) in events.into_iter().enumerate() {
        validate_outcome(i, &ev)?;
        b.push(&ev);
    }
    Ok(b.finish().0)
}

/// Sift Z-window bits, retaining the strings up to `string_cap` bits.
pub fn sift_z<I>(events: I, string_cap: usize) -> SiftedKeys
where
    I: IntoIterator<Item = PulsePairOutcome>,
{
    let mut b = TallyBuilder::new(0.0, string_cap);
    for ev in events {
        b.push(&ev);
    }
    b.finish().1
}

fn validate_outcome(index: usize, ev: &PulsePairOutcome) -> Result<()> {
    if !(ev.theta_a.is_finite() && ev.theta_b.is_finite() && ev.psi_ab.is_finite()) {
        return Err(Error::MalformedRecord {
            index,
            message: "non-finite phase".into(),
        });
    }
    Ok(())
}

/// X-window error statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct XErrorRate {
    /// Error counting rate `T_X = m_X / N_X`.
    pub t_x: f64,
    /// Observed error rate among effective X-window events.
    pub qber_x: f64,
    pub n_x: f64,
}

pub fn x_error_rate(tally: &SourceTally) -> Result<XErrorRate> {
    let n_x = tally
        .slice_sent_or_inferred()
        .filter(|n| *n > 0.0)
        .ok_or(Error::ZeroDenominator("N_X"))?;
    if !(tally.x_effective > 0.0) {
        return Err(Error::ZeroDenominator("x_effective"));
    }
    Ok(XErrorRate {
        t_x: tally.x_errors / n_x,
        qber_x: tally.x_errors / tally.x_effective,
        n_x,
    })
}

/// Header line of the counts file.
pub const COUNTS_HEADER: &str = "source,sent,gain";

/// Render a tally in the counts-file format.
pub fn write_counts(tally: &SourceTally, sifted: &SiftedKeys) -> String {
    let mut s = String::new();
    s.push_str(COUNTS_HEADER);
    s.push('\n');
    for cell in CellKey::all() {
        let c = tally.cell(cell);
        let _ = writeln!(s, "{},{},{}", cell.label(), fmt_count(c.sent), fmt_count(c.heralded));
    }
    s.push('\n');
    let _ = writeln!(s, "x_effective = {}", fmt_count(tally.x_effective));
    let _ = writeln!(s, "x_errors = {}", fmt_count(tally.x_errors));
    if tally.x_sent_in_slice > 0.0 {
        let _ = writeln!(s, "x_sent_in_slice = {}", fmt_count(tally.x_sent_in_slice));
    }
    let _ = writeln!(s, "n_t = {}", fmt_count(sifted.n_t));
    let _ = writeln!(s, "n_t0 = {}", fmt_count(sifted.n_t0));
    let _ = writeln!(s, "n_t1 = {}", fmt_count(sifted.n_t1));
    let _ = writeln!(s, "e_count = {}", fmt_count(sifted.e_count));
    s
}

fn fmt_count(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 9.0e15 {
        format!("{}", v as u64)
    } else {
        format!("{v:.6}")
    }
}

/// Parse the counts file: a `source,sent,gain` table with all 16 cells,
/// followed by `name = value` trailer lines.
pub fn parse_counts(text: &str) -> Result<(SourceTally, SiftedKeys)> {
    let mut tally = SourceTally::default();
    let mut seen = [false; 16];
    let mut trailer = crate::params::KvFile::default();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() || line.eq_ignore_ascii_case(COUNTS_HEADER) {
            continue;
        }
        if let Some((k, v)) = line.split_once('=') {
            let value = parse_count(v.trim(), line_no, 2)?;
            trailer.insert(k.trim(), value);
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                line: line_no,
                column: fields.len().min(3) + 1,
                message: format!("expected 3 columns (source, sent, gain), found {}", fields.len()),
            });
        }
        let cell: CellKey = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            column: 1,
            message: format!("unknown source label {:?}", fields[0]),
        })?;
        let sent = parse_count(fields[1], line_no, 2)?;
        let gain = parse_count(fields[2], line_no, 3)?;
        if gain > sent {
            return Err(Error::Parse {
                line: line_no,
                column: 3,
                message: "gain exceeds sent".into(),
            });
        }
        let code = cell.code() as usize;
        if seen[code] {
            return Err(Error::Parse {
                line: line_no,
                column: 1,
                message: format!("duplicate row for {cell}"),
            });
        }
        seen[code] = true;
        tally.cells[code] = CellCounts { sent, heralded: gain };
    }
    if let Some(missing) = CellKey::all().find(|c| !seen[c.code() as usize]) {
        return Err(Error::Parse {
            line: text.lines().count() + 1,
            column: 1,
            message: format!("missing row for {missing}"),
        });
    }
    tally.x_effective = trailer.get_or("x_effective", 0.0);
    tally.x_errors = trailer.get_or("x_errors", 0.0);
    tally.x_sent_in_slice = trailer.get_or("x_sent_in_slice", 0.0);
    tally.check()?;

    let mut sifted = SiftedKeys::from_tally(&tally);
    for (key, field) in [
        ("n_t", &mut sifted.n_t),
        ("n_t0", &mut sifted.n_t0),
        ("n_t1", &mut sifted.n_t1),
        ("e_count", &mut sifted.e_count),
    ] {
        if let Some(v) = trailer.get(key) {
            *field = v;
        }
    }
    if (sifted.n_t0 + sifted.n_t1 - sifted.n_t).abs() > 0.5 {
        return Err(Error::InvalidParameter("trailer: n_t must equal n_t0 + n_t1".into()));
    }
    if sifted.e_count > sifted.n_t {
        return Err(Error::InvalidParameter("trailer: e_count exceeds n_t".into()));
    }
    Ok((tally, sifted))
}

fn parse_count(s: &str, line: usize, column: usize) -> Result<f64> {
    let v: f64 = s.parse().map_err(|_| Error::Parse {
        line,
        column,
        message: format!("not a number: {s:?}"),
    })?;
    if !v.is_finite() || v < 0.0 {
        return Err(Error::Parse {
            line,
            column,
            message: format!("count must be a non-negative number, found {s}"),
        });
    }
    Ok(v)
}
