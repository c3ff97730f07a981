//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export returns a JSON string. The `*_json` functions hold the logic
//! and also run natively.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use snsqkd::analysis::{analyze, AnalysisOptions, ChernoffForm, VacuumPooling};
use snsqkd::fixtures;
use snsqkd::optics::detector_rates;
use snsqkd::optimizer::{sweep_distance, SearchSpace};

#[derive(Serialize)]
struct CurvePoint {
    km: f64,
    rate: f64,
    plob_absolute: f64,
    plob_relative: f64,
}

/// Expected key rate against total symmetric link length at the field-test
/// settings, or re-optimised at each point when `budget > 0`.
pub fn rate_curve_json(from_km: f64, to_km: f64, steps: usize, alpha: f64, budget: usize) -> Result<String, String> {
    if steps == 0 || !(to_km >= from_km) || from_km < 0.0 {
        return Err("empty distance grid".into());
    }
    let f = fixtures::field_test().map_err(|e| e.to_string())?;
    let km: Vec<f64> = (0..steps)
        .map(|i| if steps == 1 { from_km } else { from_km + (to_km - from_km) * i as f64 / (steps - 1) as f64 })
        .collect();
    let space = if budget == 0 { SearchSpace::single_point(f.params) } else { SearchSpace::wide(f.params) };
    let rows = sweep_distance(&space, &f.channel, alpha, &km, budget, 1).map_err(|e| e.to_string())?;
    let pts: Vec<CurvePoint> = rows
        .iter()
        .map(|r| CurvePoint {
            km: r.distance_km,
            rate: r.rate,
            plob_absolute: r.plob_absolute,
            plob_relative: r.plob_relative,
        })
        .collect();
    serde_json::to_string(&pts).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Interference {
    dphi: Vec<f64>,
    left: Vec<f64>,
    right: Vec<f64>,
}

/// Click probabilities of the two detectors over one period of the
/// relative phase, with the field-test detectors on a symmetric link.
pub fn interference_json(mu_a: f64, mu_b: f64, km: f64, points: usize) -> Result<String, String> {
    let f = fixtures::field_test().map_err(|e| e.to_string())?;
    let ch = f.channel.symmetric(km, 0.5 * (f.channel.alpha_ac + f.channel.alpha_bc));
    let n = points.clamp(2, 4096);
    let mut out = Interference {
        dphi: Vec::with_capacity(n),
        left: Vec::with_capacity(n),
        right: Vec::with_capacity(n),
    };
    for i in 0..n {
        let phi = std::f64::consts::TAU * i as f64 / (n - 1) as f64;
        let r = detector_rates(mu_a, mu_b, phi, &ch).map_err(|e| e.to_string())?;
        out.dphi.push(phi);
        out.left.push(r.left);
        out.right.push(r.right);
    }
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct ReplaySummary {
    n1: f64,
    e1ph: f64,
    n1_prime: Option<f64>,
    e1ph_prime: Option<f64>,
    nt_prime: Option<f64>,
    e_prime: Option<f64>,
    key_length: f64,
    rate: f64,
    plob_absolute: Option<f64>,
    plob_relative: Option<f64>,
    reason: Option<String>,
    warnings: Vec<String>,
}

/// Analyse the bundled field-test counts with the chosen options.
pub fn replay_json(chernoff_form: &str, as_printed_s9: bool, decoy_vacuum_only: bool) -> Result<String, String> {
    let f = fixtures::field_test().map_err(|e| e.to_string())?;
    let form: ChernoffForm = chernoff_form.parse().map_err(|e: snsqkd::Error| e.to_string())?;
    let opts = AnalysisOptions {
        chernoff_form: form,
        s9_as_printed: as_printed_s9,
        vacuum_pooling: if decoy_vacuum_only { VacuumPooling::DecoyWindowsOnly } else { VacuumPooling::AllWindows },
        ..AnalysisOptions::default()
    };
    let a = analyze(&f.tally, &f.sifted, &f.params, Some(&f.channel), None, &opts).map_err(|e| e.to_string())?;
    let d = a.decoy.as_ref();
    let s = ReplaySummary {
        n1: d.map_or(0.0, |d| d.n1_expected()),
        e1ph: d.map_or(0.0, |d| d.e1ph_up),
        n1_prime: a.chain.map(|c| c.n1_prime),
        e1ph_prime: a.chain.map(|c| c.e1ph_prime),
        nt_prime: a.chain.map(|c| c.nt_prime),
        e_prime: a.chain.map(|c| c.e_prime),
        key_length: a.key.key_length,
        rate: a.key.rate_per_pulse,
        plob_absolute: a.key.plob.map(|p| p.absolute),
        plob_relative: a.key.plob.map(|p| p.relative),
        reason: a.reason.clone(),
        warnings: a.warnings.clone(),
    };
    serde_json::to_string(&s).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn rate_curve(from_km: f64, to_km: f64, steps: usize, alpha: f64, budget: usize) -> Result<String, JsError> {
    rate_curve_json(from_km, to_km, steps, alpha, budget).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn interference(mu_a: f64, mu_b: f64, km: f64, points: usize) -> Result<String, JsError> {
    interference_json(mu_a, mu_b, km, points).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn replay(chernoff_form: &str, as_printed_s9: bool, decoy_vacuum_only: bool) -> Result<String, JsError> {
    replay_json(chernoff_form, as_printed_s9, decoy_vacuum_only).map_err(|e| JsError::new(&e))
}
