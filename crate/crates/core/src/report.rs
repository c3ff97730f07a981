//! Machine-readable reports: JSON with every intermediate plus run
//! metadata, a flat CSV view of the same values, and a short text summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::analysis::{AnalysisOptions, AnalysisReport, Status, VacuumPooling};
use crate::params::{ChannelModel, ProtocolParams};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metadata {
    pub version: &'static str,
    pub mode: String,
    pub chernoff_form: String,
    pub chernoff_failure_prob: f64,
    pub eps_sec: f64,
    pub eps_cor: f64,
    pub eps_pa: f64,
    pub eps_hat: f64,
    pub eps_trace: f64,
    /// Counting rate scaling the untagged bit-0 count.
    pub n01_scaled_by: &'static str,
    pub vacuum_source: &'static str,
    pub clock_hz: f64,
    pub duty: f64,
    /// Input name to SHA-256 of its bytes.
    pub inputs: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub n_pairs: Option<u64>,
}

impl Metadata {
    pub fn new(mode: &str, params: &ProtocolParams, opts: &AnalysisOptions) -> Self {
        Metadata {
            version: env!("CARGO_PKG_VERSION"),
            mode: mode.to_string(),
            chernoff_form: opts.chernoff_form.to_string(),
            chernoff_failure_prob: opts.failure_prob.unwrap_or(params.eps_sec),
            eps_sec: params.eps_sec,
            eps_cor: params.eps_cor,
            eps_pa: params.eps_pa,
            eps_hat: params.eps_hat,
            eps_trace: params.eps_trace,
            n01_scaled_by: if opts.s9_as_printed { "s10" } else { "s01" },
            vacuum_source: match opts.vacuum_pooling {
                VacuumPooling::AllWindows => "all windows",
                VacuumPooling::DecoyWindowsOnly => "decoy windows only",
            },
            clock_hz: opts.conversion.clock_hz,
            duty: opts.conversion.duty,
            inputs: BTreeMap::new(),
            seed: None,
            n_pairs: None,
        }
    }

    pub fn with_input(mut self, name: &str, bytes: &[u8]) -> Self {
        self.inputs.insert(name.to_string(), sha256_hex(bytes));
        self
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report<'a> {
    pub metadata: &'a Metadata,
    pub params: &'a ProtocolParams,
    pub channel: Option<&'a ChannelModel>,
    pub analysis: &'a AnalysisReport,
}

impl Report<'_> {
    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("report serialises")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_value()).expect("report serialises");
        s.push('\n');
        s
    }

    /// `name,value` rows with dotted paths into the JSON document.
    pub fn to_csv(&self) -> String {
        let mut rows = Vec::new();
        flatten("", &self.to_value(), &mut rows);
        let mut out = String::from("name,value\n");
        for (k, v) in rows {
            let _ = writeln!(out, "{k},{}", csv_field(&v));
        }
        out
    }
}

fn flatten(prefix: &str, v: &Value, rows: &mut Vec<(String, String)>) {
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                flatten(&join(k), x, rows);
            }
        }
        Value::Array(items) => {
            for (i, x) in items.iter().enumerate() {
                flatten(&join(&i.to_string()), x, rows);
            }
        }
        Value::Null => rows.push((prefix.to_string(), String::new())),
        Value::String(s) => rows.push((prefix.to_string(), s.clone())),
        other => rows.push((prefix.to_string(), other.to_string())),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Human-readable lines for standard output.
pub fn summary(report: &AnalysisReport) -> String {
    let mut s = String::new();
    if let Some(d) = &report.decoy {
        let _ = writeln!(s, "untagged bits n1        {:.4e}", d.n1_expected());
        let _ = writeln!(s, "phase-flip error e1ph   {:.2}%", 100.0 * d.e1ph_up);
    }
    let _ = writeln!(s, "sifted bits n_t         {:.0}", report.sifted.n_t);
    let _ = writeln!(s, "bit error E             {:.2}%", 100.0 * report.sifted.error_rate());
    if let Some(c) = &report.chain {
        let _ = writeln!(s, "after pairing n1'       {:.4e}", c.n1_prime);
        let _ = writeln!(s, "after pairing e1'ph     {:.2}%", 100.0 * c.e1ph_prime);
        let _ = writeln!(s, "after pairing n_t'      {:.4e}", c.nt_prime);
        let _ = writeln!(s, "after pairing E'        {:.3}%", 100.0 * c.e_prime);
    }
    let k = &report.key;
    let _ = writeln!(s, "key length              {:.0}", k.key_length);
    let _ = writeln!(s, "key rate R              {:.4e} per pulse ({:.3} bps)", k.rate_per_pulse, k.rate_bps);
    if let Some(p) = &k.plob {
        let _ = writeln!(
            s,
            "PLOB absolute/relative  {:.4e} / {:.4e} (R is {:.2}x / {:.2}x)",
            p.absolute,
            p.relative,
            k.ratio_absolute.unwrap_or(0.0),
            k.ratio_relative.unwrap_or(0.0)
        );
    }
    match report.status {
        Status::PositiveKey => {}
        Status::ZeroKey => {
            let _ = writeln!(s, "no key: {}", report.reason.as_deref().unwrap_or("unknown"));
        }
    }
    for w in &report.warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    s
}
