//! Protocol and channel parameters, the 16 source cells, and the per-cell
//! sending probabilities.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tally::SourceTally;

/// Relative tolerance on the asymmetric-intensity security constraint.
///
/// Published intensities are rounded to three decimals, which leaves a
/// residual of a few parts in 10⁴.
pub const CONSTRAINT_TOLERANCE: f64 = 1e-3;

/// Source intensities, window probabilities and finite-key budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProtocolParams {
    pub mu_a1: f64,
    pub mu_b1: f64,
    pub mu_a2: f64,
    pub mu_b2: f64,
    /// Send probability inside a signal window.
    pub eps_a: f64,
    pub eps_b: f64,
    /// Non-vacuum probability inside a decoy window.
    pub p_a1: f64,
    pub p_b1: f64,
    /// Probability of choosing a signal window.
    pub p_a2: f64,
    pub p_b2: f64,
    /// Phase-slice half-width: a decoy pair is kept when `1 - |cos(..)| <= lambda`.
    pub lambda: f64,
    pub n_total: f64,
    /// Error-correction inefficiency.
    pub f: f64,
    pub eps_sec: f64,
    pub eps_cor: f64,
    pub eps_pa: f64,
    pub eps_hat: f64,
    /// Trace distance ε(r,k) of the de Finetti step in the AOPP chain.
    pub eps_trace: f64,
}

impl ProtocolParams {
    /// Right-hand side of the intensity-ratio security condition; the
    /// left-hand side is `mu_a1 / mu_b1`.
    pub fn constraint_rhs(&self) -> f64 {
        (self.eps_a * (1.0 - self.eps_b) * self.mu_a2 * (-self.mu_a2).exp())
            / (self.eps_b * (1.0 - self.eps_a) * self.mu_b2 * (-self.mu_b2).exp())
    }

    /// `|lhs/rhs - 1|` of the security condition.
    pub fn constraint_residual(&self) -> f64 {
        let lhs = self.mu_a1 / self.mu_b1;
        (lhs / self.constraint_rhs() - 1.0).abs()
    }

    /// The Bob decoy intensity that satisfies the security condition exactly
    /// for the other parameters.
    pub fn solve_mu_b1(&self) -> f64 {
        self.mu_a1 / self.constraint_rhs()
    }

    /// Alice's probability of choosing `(window, intensity)`.
    pub fn alice_choice_probability(&self, window: Window, intensity: Intensity) -> f64 {
        choice_probability(window, intensity, self.p_a2, self.eps_a, self.p_a1)
    }

    pub fn bob_choice_probability(&self, window: Window, intensity: Intensity) -> f64 {
        choice_probability(window, intensity, self.p_b2, self.eps_b, self.p_b1)
    }

    /// Intensity Alice emits for a given choice.
    pub fn alice_mu(&self, intensity: Intensity) -> f64 {
        match intensity {
            Intensity::Vacuum => 0.0,
            Intensity::Decoy => self.mu_a1,
            Intensity::Signal => self.mu_a2,
        }
    }

    pub fn bob_mu(&self, intensity: Intensity) -> f64 {
        match intensity {
            Intensity::Vacuum => 0.0,
            Intensity::Decoy => self.mu_b1,
            Intensity::Signal => self.mu_b2,
        }
    }

    /// Intensities and send probabilities of the field test, with window
    /// probabilities recovered from its sent-count table and λ recovered
    /// from its X-window acceptance ratio.
    pub fn field_test() -> Self {
        ProtocolParams {
            mu_a1: 0.042,
            mu_b1: 0.029,
            mu_a2: 0.454,
            mu_b2: 0.425,
            eps_a: 0.307,
            eps_b: 0.241,
            p_a1: 0.9069,
            p_b1: 0.9079,
            p_a2: 0.819,
            p_b2: 0.8185,
            lambda: 0.0196,
            n_total: 5_590_517_734_411.0,
            f: 1.1,
            eps_sec: 1e-10,
            eps_cor: 1e-10,
            eps_pa: 1e-10,
            eps_hat: 1e-10,
            eps_trace: 1e-10,
        }
    }

    /// Build from a parsed key-value file. Window probabilities and the
    /// failure-probability split are optional; missing window probabilities
    /// are reported through [`ProtocolParams::missing_window_keys`] so that
    /// callers can fit them from sent counts.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let eps_sec = kv.get_or("eps_sec", 1e-10);
        Ok(ProtocolParams {
            mu_a1: kv.require("mu_a1")?,
            mu_b1: kv.require("mu_b1")?,
            mu_a2: kv.require("mu_a2")?,
            mu_b2: kv.require("mu_b2")?,
            eps_a: kv.require("eps_a")?,
            eps_b: kv.require("eps_b")?,
            p_a1: kv.get_or("p_a1", f64::NAN),
            p_b1: kv.get_or("p_b1", f64::NAN),
            p_a2: kv.get_or("p_a2", f64::NAN),
            p_b2: kv.get_or("p_b2", f64::NAN),
            lambda: kv.get_or("lambda", 0.0),
            n_total: kv.get_or("n_total", f64::NAN),
            f: kv.get_or("f", 1.1),
            eps_sec,
            eps_cor: kv.get_or("eps_cor", eps_sec),
            eps_pa: kv.get_or("eps_pa", eps_sec),
            eps_hat: kv.get_or("eps_hat", eps_sec),
            eps_trace: kv.get_or("eps_trace", 1e-10),
        })
    }

    pub fn missing_window_keys(&self) -> Vec<&'static str> {
        [
            ("p_a1", self.p_a1),
            ("p_b1", self.p_b1),
            ("p_a2", self.p_a2),
            ("p_b2", self.p_b2),
        ]
        .into_iter()
        .filter(|(_, v)| v.is_nan())
        .map(|(k, _)| k)
        .collect()
    }

    pub fn with_window_probs(mut self, w: &WindowProbs) -> Self {
        self.p_a1 = w.p_a1;
        self.p_b1 = w.p_b1;
        self.p_a2 = w.p_a2;
        self.p_b2 = w.p_b2;
        self
    }

    /// Fill in what a parameter file may omit from the sent counts: the
    /// window probabilities (fitted) and the total pulse count.
    pub fn complete_from_tally(mut self, tally: &SourceTally) -> Result<(Self, Option<WindowProbs>)> {
        if self.n_total.is_nan() {
            self.n_total = tally.total_sent();
        }
        if self.missing_window_keys().is_empty() {
            return Ok((self, None));
        }
        let fit = derive_window_probs(tally, self.n_total)?;
        Ok((self.with_window_probs(&fit), Some(fit)))
    }

    /// Serialise as a key-value file readable by [`KvFile::parse`].
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.fields() {
            s.push_str(&format!("{k} = {v:e}\n"));
        }
        s
    }

    fn fields(&self) -> [(&'static str, f64); 18] {
        [
            ("mu_a1", self.mu_a1),
            ("mu_b1", self.mu_b1),
            ("mu_a2", self.mu_a2),
            ("mu_b2", self.mu_b2),
            ("eps_a", self.eps_a),
            ("eps_b", self.eps_b),
            ("p_a1", self.p_a1),
            ("p_b1", self.p_b1),
            ("p_a2", self.p_a2),
            ("p_b2", self.p_b2),
            ("lambda", self.lambda),
            ("n_total", self.n_total),
            ("f", self.f),
            ("eps_sec", self.eps_sec),
            ("eps_cor", self.eps_cor),
            ("eps_pa", self.eps_pa),
            ("eps_hat", self.eps_hat),
            ("eps_trace", self.eps_trace),
        ]
    }
}

fn choice_probability(window: Window, intensity: Intensity, p_signal: f64, eps: f64, p_decoy: f64) -> f64 {
    match (window, intensity) {
        (Window::Signal, Intensity::Signal) => p_signal * eps,
        (Window::Signal, Intensity::Vacuum) => p_signal * (1.0 - eps),
        (Window::Decoy, Intensity::Decoy) => (1.0 - p_signal) * p_decoy,
        (Window::Decoy, Intensity::Vacuum) => (1.0 - p_signal) * (1.0 - p_decoy),
        _ => 0.0,
    }
}

/// Physical link between the two senders and the measurement node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    /// Fiber loss, dB/km.
    pub alpha_ac: f64,
    pub alpha_bc: f64,
    /// Fiber length, km.
    pub l_ac: f64,
    pub l_bc: f64,
    /// Overall detection efficiency at the measurement node.
    pub eta_d: f64,
    /// Dark/noise click probability per pulse per detector.
    pub p_dark: f64,
    /// Probability that the interference term lands on the wrong detector.
    pub e_dx: f64,
    /// Relative phase drift, rad/ms.
    pub drift_rate: f64,
    /// Reference-pulse intensity, photons/pulse.
    pub mu_ref: f64,
    /// Phase-estimation integration time, µs.
    pub t_est: f64,
}

impl ChannelModel {
    pub fn field_test() -> Self {
        ChannelModel {
            alpha_ac: 0.182,
            alpha_bc: 0.188,
            l_ac: 223.0,
            l_bc: 205.0,
            eta_d: 0.282,
            p_dark: 2.5e-8,
            e_dx: 0.08,
            drift_rate: 7.80,
            mu_ref: 450.0,
            t_est: 20.0,
        }
    }

    /// Symmetric link of `distance_km` total fiber with the other device
    /// parameters unchanged.
    pub fn symmetric(&self, distance_km: f64, alpha: f64) -> Self {
        ChannelModel {
            alpha_ac: alpha,
            alpha_bc: alpha,
            l_ac: distance_km / 2.0,
            l_bc: distance_km / 2.0,
            ..*self
        }
    }

    pub fn loss_db(&self) -> f64 {
        self.alpha_ac * self.l_ac + self.alpha_bc * self.l_bc
    }

    /// Fiber transmittance of arm A (excluding detection).
    pub fn fiber_a(&self) -> f64 {
        10f64.powf(-self.alpha_ac * self.l_ac / 10.0)
    }

    pub fn fiber_b(&self) -> f64 {
        10f64.powf(-self.alpha_bc * self.l_bc / 10.0)
    }

    /// Arm-A transmittance including detection efficiency.
    pub fn eta_a(&self) -> f64 {
        self.fiber_a() * self.eta_d
    }

    pub fn eta_b(&self) -> f64 {
        self.fiber_b() * self.eta_d
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        Ok(ChannelModel {
            alpha_ac: kv.require("alpha_ac")?,
            alpha_bc: kv.require("alpha_bc")?,
            l_ac: kv.require("l_ac")?,
            l_bc: kv.require("l_bc")?,
            eta_d: kv.require("eta_d")?,
            p_dark: kv.require("p_dark")?,
            e_dx: kv.get_or("e_dx", 0.0),
            drift_rate: kv.get_or("drift_rate", 0.0),
            mu_ref: kv.get_or("mu_ref", 450.0),
            t_est: kv.get_or("t_est", 20.0),
        })
    }

    pub fn to_kv_string(&self) -> String {
        let fields = [
            ("alpha_ac", self.alpha_ac),
            ("alpha_bc", self.alpha_bc),
            ("l_ac", self.l_ac),
            ("l_bc", self.l_bc),
            ("eta_d", self.eta_d),
            ("p_dark", self.p_dark),
            ("e_dx", self.e_dx),
            ("drift_rate", self.drift_rate),
            ("mu_ref", self.mu_ref),
            ("t_est", self.t_est),
        ];
        fields.iter().map(|(k, v)| format!("{k} = {v:e}\n")).collect()
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        for (name, v) in [
            ("alpha_ac", self.alpha_ac),
            ("alpha_bc", self.alpha_bc),
            ("l_ac", self.l_ac),
            ("l_bc", self.l_bc),
            ("drift_rate", self.drift_rate),
            ("mu_ref", self.mu_ref),
            ("t_est", self.t_est),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                report.push(name, "must be finite and non-negative");
            }
        }
        for (name, v) in [("eta_d", self.eta_d), ("p_dark", self.p_dark)] {
            if !(0.0..=1.0).contains(&v) {
                report.push(name, "probability out of range");
            }
        }
        if !(0.0..=0.5).contains(&self.e_dx) {
            report.push("e_dx", "misalignment must lie in [0, 0.5]");
        }
        report
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
    /// Security-constraint residual, when it could be evaluated.
    pub constraint_residual: Option<f64>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: &'static str, message: &str) {
        self.violations.push(Violation {
            field,
            message: message.to_string(),
        });
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_ok() {
            Ok(())
        } else {
            let msg = self
                .violations
                .iter()
                .map(|v| format!("{}: {}", v.field, v.message))
                .collect::<Vec<_>>()
                .join("; ");
            Err(Error::InvalidParameter(msg))
        }
    }
}

/// Check every parameter invariant and report all violations.
pub fn validate(params: &ProtocolParams) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (name, v) in [
        ("mu_a1", params.mu_a1),
        ("mu_b1", params.mu_b1),
        ("mu_a2", params.mu_a2),
        ("mu_b2", params.mu_b2),
    ] {
        if !(v >= 0.0) || !v.is_finite() {
            report.push(name, "intensity must be finite and non-negative");
        }
    }
    if !(params.mu_a1 < params.mu_a2) {
        report.push("mu_a1", "decoy intensity must be strictly below signal intensity");
    }
    if !(params.mu_b1 < params.mu_b2) {
        report.push("mu_b1", "decoy intensity must be strictly below signal intensity");
    }
    for (name, v) in [
        ("eps_a", params.eps_a),
        ("eps_b", params.eps_b),
        ("p_a1", params.p_a1),
        ("p_b1", params.p_b1),
        ("p_a2", params.p_a2),
        ("p_b2", params.p_b2),
        ("lambda", params.lambda),
    ] {
        if !(0.0..=1.0).contains(&v) {
            report.push(name, "probability out of range");
        }
    }
    if !(params.n_total >= 1.0) {
        report.push("n_total", "pulse count must be at least 1");
    }
    if !(params.f >= 1.0) {
        report.push("f", "error-correction efficiency must be at least 1");
    }
    for (name, v) in [
        ("eps_sec", params.eps_sec),
        ("eps_cor", params.eps_cor),
        ("eps_pa", params.eps_pa),
        ("eps_hat", params.eps_hat),
        ("eps_trace", params.eps_trace),
    ] {
        if !(v > 0.0 && v < 1.0) {
            report.push(name, "failure probability must lie in (0, 1)");
        }
    }
    let all_positive = params.mu_a1 > 0.0
        && params.mu_b1 > 0.0
        && params.mu_a2 > 0.0
        && params.mu_b2 > 0.0
        && params.eps_a > 0.0
        && params.eps_a < 1.0
        && params.eps_b > 0.0
        && params.eps_b < 1.0;
    if all_positive {
        let residual = params.constraint_residual();
        report.constraint_residual = Some(residual);
        if !(residual <= CONSTRAINT_TOLERANCE) {
            report.push(
                "mu_a1",
                &format!("security constraint violated: relative residual {residual:.3e}"),
            );
        }
    } else {
        report.push("mu_a1", "security constraint cannot be evaluated with zero intensities or send probabilities");
    }
    report
}

/// Which kind of window a party chose.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Window {
    Signal,
    Decoy,
}

/// Emitted intensity level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Intensity {
    Vacuum,
    Decoy,
    Signal,
}

/// One party's choice in a time window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Choice {
    /// `Z_O`: signal window, not sending.
    ZVacuum,
    /// `X_O`: decoy window, vacuum.
    XVacuum,
    /// `X_1`: decoy window, decoy-level pulse.
    XDecoy,
    /// `Z`: signal window, sending.
    ZSignal,
}

impl Choice {
    /// Row order used by the published count table.
    pub const ALL: [Choice; 4] = [Choice::ZVacuum, Choice::XVacuum, Choice::XDecoy, Choice::ZSignal];

    pub fn window(self) -> Window {
        match self {
            Choice::ZVacuum | Choice::ZSignal => Window::Signal,
            Choice::XVacuum | Choice::XDecoy => Window::Decoy,
        }
    }

    pub fn intensity(self) -> Intensity {
        match self {
            Choice::ZVacuum | Choice::XVacuum => Intensity::Vacuum,
            Choice::XDecoy => Intensity::Decoy,
            Choice::ZSignal => Intensity::Signal,
        }
    }

    pub fn from_parts(window: Window, intensity: Intensity) -> Result<Self> {
        match (window, intensity) {
            (Window::Signal, Intensity::Vacuum) => Ok(Choice::ZVacuum),
            (Window::Signal, Intensity::Signal) => Ok(Choice::ZSignal),
            (Window::Decoy, Intensity::Vacuum) => Ok(Choice::XVacuum),
            (Window::Decoy, Intensity::Decoy) => Ok(Choice::XDecoy),
            (w, i) => Err(Error::InvalidCell(format!("{i:?} intensity is not available in a {w:?} window"))),
        }
    }

    fn index(self) -> usize {
        self as usize
    }

    fn suffix(self) -> &'static str {
        match self {
            Choice::ZVacuum => "O",
            Choice::XVacuum => "O",
            Choice::XDecoy => "1",
            Choice::ZSignal => "",
        }
    }

    fn basis(self) -> char {
        match self.window() {
            Window::Signal => 'Z',
            Window::Decoy => 'X',
        }
    }
}

/// One of the 16 (Alice choice, Bob choice) combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellKey {
    pub alice: Choice,
    pub bob: Choice,
}

impl CellKey {
    pub fn new(a_window: Window, a_intensity: Intensity, b_window: Window, b_intensity: Intensity) -> Result<Self> {
        Ok(CellKey {
            alice: Choice::from_parts(a_window, a_intensity)?,
            bob: Choice::from_parts(b_window, b_intensity)?,
        })
    }

    pub const fn of(alice: Choice, bob: Choice) -> Self {
        CellKey { alice, bob }
    }

    /// All cells in table order (Alice-major).
    pub fn all() -> impl Iterator<Item = CellKey> {
        Choice::ALL
            .into_iter()
            .flat_map(|a| Choice::ALL.into_iter().map(move |b| CellKey::of(a, b)))
    }

    /// Code in `0..16`, Alice-major in table order.
    pub fn code(self) -> u8 {
        (self.alice.index() * 4 + self.bob.index()) as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        if code >= 16 {
            return Err(Error::InvalidCell(format!("cell code {code} out of range")));
        }
        Ok(CellKey::of(Choice::ALL[(code / 4) as usize], Choice::ALL[(code % 4) as usize]))
    }

    pub fn is_z_window(self) -> bool {
        self.alice.window() == Window::Signal && self.bob.window() == Window::Signal
    }

    /// Both parties sent decoy-level pulses (candidate X-window pair).
    pub fn is_decoy_pair(self) -> bool {
        self.alice == Choice::XDecoy && self.bob == Choice::XDecoy
    }

    /// Table label such as `Z_AO X_B1`.
    pub fn label(self) -> String {
        format!(
            "{}_A{} {}_B{}",
            self.alice.basis(),
            self.alice.suffix(),
            self.bob.basis(),
            self.bob.suffix()
        )
    }
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for CellKey {
    type Err = Error;

    /// Accepts `Z_AO X_B1` and the unspaced `Z_AOX_B1`.
    fn from_str(s: &str) -> Result<Self> {
        let compact: String = s.chars().filter(|c| !c.is_whitespace()).collect();
        let alice_tags = [("Z_AO", Choice::ZVacuum), ("X_AO", Choice::XVacuum), ("X_A1", Choice::XDecoy), ("Z_A", Choice::ZSignal)];
        let bob_tags = [("Z_BO", Choice::ZVacuum), ("X_BO", Choice::XVacuum), ("X_B1", Choice::XDecoy), ("Z_B", Choice::ZSignal)];
        for (atag, a) in alice_tags {
            if let Some(rest) = compact.strip_prefix(atag) {
                for (btag, b) in bob_tags {
                    if rest == btag {
                        return Ok(CellKey::of(a, b));
                    }
                }
            }
        }
        Err(Error::InvalidCell(format!("unknown cell label {s:?}")))
    }
}

/// Probability that a pulse pair falls into `cell`.
pub fn cell_probability(params: &ProtocolParams, cell: CellKey) -> f64 {
    params.alice_choice_probability(cell.alice.window(), cell.alice.intensity())
        * params.bob_choice_probability(cell.bob.window(), cell.bob.intensity())
}

/// Same as [`cell_probability`] but from loose window/intensity parts, which
/// may name an impossible combination.
pub fn cell_probability_parts(
    params: &ProtocolParams,
    a_window: Window,
    a_intensity: Intensity,
    b_window: Window,
    b_intensity: Intensity,
) -> Result<f64> {
    Ok(cell_probability(params, CellKey::new(a_window, a_intensity, b_window, b_intensity)?))
}

/// Window and send probabilities fitted from sent counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WindowProbs {
    pub p_a1: f64,
    pub p_b1: f64,
    pub p_a2: f64,
    pub p_b2: f64,
    pub eps_a: f64,
    pub eps_b: f64,
    /// Largest relative deviation between fitted and observed cell counts.
    pub residual: f64,
}

/// Fit the six choice probabilities to the 16 sent counts.
///
/// The sent counts are a product multinomial over independent Alice and Bob
/// choices, so the maximum-likelihood fit is given by the marginal choice
/// frequencies. The returned residual is the worst relative mismatch over
/// the 16 cells.
pub fn derive_window_probs(tally: &SourceTally, n_total: f64) -> Result<WindowProbs> {
    let mut alice = [0.0; 4];
    let mut bob = [0.0; 4];
    for cell in CellKey::all() {
        let sent = tally.cell(cell).sent;
        if !(sent > 0.0) {
            return Err(Error::Unidentifiable(format!("cell {cell} has no sent pulses")));
        }
        alice[cell.alice.index()] += sent;
        bob[cell.bob.index()] += sent;
    }
    let total: f64 = alice.iter().sum();
    if !(n_total > 0.0) {
        return Err(Error::Unidentifiable("total pulse count must be positive".into()));
    }
    let marg = |m: &[f64; 4]| -> Result<(f64, f64, f64)> {
        let signal = m[Choice::ZVacuum.index()] + m[Choice::ZSignal.index()];
        let decoy = m[Choice::XVacuum.index()] + m[Choice::XDecoy.index()];
        if signal <= 0.0 || decoy <= 0.0 {
            return Err(Error::Unidentifiable("a party never chose one of the windows".into()));
        }
        Ok((
            m[Choice::XDecoy.index()] / decoy,
            signal / (signal + decoy),
            m[Choice::ZSignal.index()] / signal,
        ))
    };
    let (p_a1, p_a2, eps_a) = marg(&alice)?;
    let (p_b1, p_b2, eps_b) = marg(&bob)?;
    for v in [p_a1, p_a2, eps_a, p_b1, p_b2, eps_b] {
        if v <= 0.0 || v >= 1.0 {
            return Err(Error::Unidentifiable("a fitted probability sits on the boundary".into()));
        }
    }
    let fitted = ProtocolParams {
        p_a1,
        p_b1,
        p_a2,
        p_b2,
        eps_a,
        eps_b,
        ..ProtocolParams::field_test()
    };
    let scale = if (total - n_total).abs() <= 0.5 { n_total } else { total };
    let residual = CellKey::all()
        .map(|cell| {
            let expected = cell_probability(&fitted, cell) * scale;
            ((expected - tally.cell(cell).sent) / tally.cell(cell).sent).abs()
        })
        .fold(0.0, f64::max);
    Ok(WindowProbs {
        p_a1,
        p_b1,
        p_a2,
        p_b2,
        eps_a,
        eps_b,
        residual,
    })
}

/// Flat `name = value` file with `#` comments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KvFile {
    values: BTreeMap<String, f64>,
}

impl KvFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    column: 1,
                    message: format!("expected `name = value`, found {line:?}"),
                });
            };
            let key = key.trim();
            let value_str = value.trim();
            let value: f64 = value_str.parse().map_err(|_| Error::Parse {
                line: i + 1,
                column: raw.find('=').map_or(1, |c| c + 2),
                message: format!("{key}: not a number: {value_str:?}"),
            })?;
            values.insert(key.to_string(), value);
        }
        Ok(KvFile { values })
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.get(key).copied()
    }

    pub fn get_or(&self, key: &str, default: f64) -> f64 {
        self.get(key).unwrap_or(default)
    }

    pub fn require(&self, key: &str) -> Result<f64> {
        self.get(key)
            .ok_or_else(|| Error::InvalidParameter(format!("missing required key `{key}`")))
    }

    pub fn insert(&mut self, key: &str, value: f64) {
        self.values.insert(key.to_string(), value);
    }
}
