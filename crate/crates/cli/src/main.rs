use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use snsqkd::analysis::{aopp_simulate, analyze, AnalysisOptions, AnalysisReport, ChernoffForm, Status};
use snsqkd::events::write_events;
use snsqkd::fixtures;
use snsqkd::optimizer::{self, SearchSpace};
use snsqkd::params::{ChannelModel, KvFile, ProtocolParams};
use snsqkd::report::{summary, Metadata, Report};
use snsqkd::tally::{parse_counts, write_counts, SiftedKeys, SourceTally};
use snsqkd::{Error, SimConfig, Simulation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Replay,
    Simulate,
    Optimize,
    Sweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Form {
    Multiplicative,
    Kl,
}

/// Sending-or-not-sending twin-field QKD analysis.
#[derive(Debug, Parser)]
#[command(name = "snsqkd", version)]
struct Cli {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Source settings (`name = value` lines).
    #[arg(long)]
    params: Option<PathBuf>,
    /// Channel and detector description.
    #[arg(long)]
    channel: Option<PathBuf>,
    /// Per-cell count table.
    #[arg(long)]
    counts: Option<PathBuf>,
    /// Use the bundled 428 km field-test inputs for anything not given.
    #[arg(long)]
    field_test: bool,
    /// Output directory for machine-readable results.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Pulse pairs to simulate.
    #[arg(long)]
    pairs: Option<u64>,
    /// Also write the heralded-event stream in simulate mode.
    #[arg(long)]
    events: bool,
    /// Sweep start, km.
    #[arg(long)]
    sweep_from: Option<f64>,
    /// Sweep end, km.
    #[arg(long)]
    sweep_to: Option<f64>,
    #[arg(long)]
    sweep_steps: Option<usize>,
    /// Fibre loss for the symmetric sweep link, dB/km. Defaults to the mean
    /// of the channel's two arms.
    #[arg(long)]
    alpha: Option<f64>,
    /// Objective evaluations for optimize mode, and per point for sweep
    /// (0 keeps the given parameters).
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long, value_enum, default_value = "multiplicative")]
    chernoff_form: Form,
    /// Scale the untagged bit-0 count by s10 rather than s01.
    #[arg(long)]
    as_printed_s9: bool,
    /// Clock duty factor for the bits-per-second figure.
    #[arg(long)]
    duty: Option<f64>,
}

enum Failure {
    Input(String),
    Infeasible,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Input(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.mode {
        Mode::Replay => run_replay(&cli),
        Mode::Simulate => run_simulate(&cli),
        Mode::Optimize => run_optimize(&cli),
        Mode::Sweep => run_sweep(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Infeasible) => ExitCode::from(3),
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<(), Failure> {
    fs::create_dir_all(dir).map_err(|e| Failure::Input(format!("{}: {e}", dir.display())))?;
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

fn options(cli: &Cli) -> AnalysisOptions {
    let mut o = AnalysisOptions {
        chernoff_form: match cli.chernoff_form {
            Form::Multiplicative => ChernoffForm::Multiplicative,
            Form::Kl => ChernoffForm::KullbackLeibler,
        },
        s9_as_printed: cli.as_printed_s9,
        ..AnalysisOptions::default()
    };
    if let Some(d) = cli.duty {
        o.conversion.duty = d;
    }
    o
}

/// Text of an input file, or the bundled field-test text when allowed.
fn input(cli: &Cli, path: &Option<PathBuf>, bundled: &'static str, what: &str) -> Result<(String, String), Failure> {
    match path {
        Some(p) => Ok((read(p)?, p.display().to_string())),
        None if cli.field_test => Ok((bundled.to_string(), format!("bundled {what}"))),
        None => Err(Failure::Input(format!("--{what} is required (or pass --field-test)"))),
    }
}

fn load_channel(cli: &Cli, required: bool) -> Result<Option<(ChannelModel, String)>, Failure> {
    if cli.channel.is_none() && !cli.field_test && !required {
        return Ok(None);
    }
    let (text, _) = input(cli, &cli.channel, fixtures::CHANNEL, "channel")?;
    let ch = ChannelModel::from_kv(&KvFile::parse(&text)?)?;
    ch.validate().into_result()?;
    Ok(Some((ch, text)))
}

fn load_params_text(cli: &Cli) -> Result<(ProtocolParams, String), Failure> {
    let (text, _) = input(cli, &cli.params, fixtures::PARAMS, "params")?;
    Ok((ProtocolParams::from_kv(&KvFile::parse(&text)?)?, text))
}

/// Parameters with window probabilities fitted from a count table when the
/// parameter file leaves them out.
fn complete_params(cli: &Cli, params: ProtocolParams) -> Result<ProtocolParams, Failure> {
    if params.missing_window_keys().is_empty() {
        return Ok(params);
    }
    let counts = match (&cli.counts, cli.field_test) {
        (Some(p), _) => read(p)?,
        (None, true) => fixtures::COUNTS.to_string(),
        (None, false) => {
            return Err(Failure::Input(format!(
                "parameters lack {}; give them or a --counts table to fit them from",
                params.missing_window_keys().join(", ")
            )))
        }
    };
    let (tally, _) = parse_counts(&counts)?;
    Ok(params.complete_from_tally(&tally)?.0)
}

fn emit(cli: &Cli, meta: &Metadata, params: &ProtocolParams, channel: Option<&ChannelModel>, a: &AnalysisReport) -> Result<(), Failure> {
    let report = Report {
        metadata: meta,
        params,
        channel,
        analysis: a,
    };
    write(&cli.out, "report.json", &report.to_json())?;
    write(&cli.out, "report.csv", &report.to_csv())?;
    print!("{}", summary(a));
    if a.status == Status::ZeroKey {
        return Err(Failure::Infeasible);
    }
    Ok(())
}

fn run_replay(cli: &Cli) -> Result<(), Failure> {
    let (counts_text, _) = input(cli, &cli.counts, fixtures::COUNTS, "counts")?;
    let (tally, sifted) = parse_counts(&counts_text)?;
    let (params, params_text) = load_params_text(cli)?;
    let (params, fit) = params.complete_from_tally(&tally)?;
    if let Some(w) = fit {
        println!(
            "window probabilities fitted from sent counts: p_a1 {:.4} p_b1 {:.4} p_a2 {:.4} p_b2 {:.4} (worst cell {:.2e})",
            w.p_a1, w.p_b1, w.p_a2, w.p_b2, w.residual
        );
    }
    let report = snsqkd::validate(&params);
    if !report.is_ok() {
        return Err(Failure::Input(report.into_result().unwrap_err().to_string()));
    }
    let channel = load_channel(cli, false)?;
    let opts = options(cli);
    let a = analyze(&tally, &sifted, &params, channel.as_ref().map(|c| &c.0), None, &opts)?;
    let mut meta = Metadata::new("replay", &params, &opts)
        .with_input("counts", counts_text.as_bytes())
        .with_input("params", params_text.as_bytes());
    if let Some((_, text)) = &channel {
        meta = meta.with_input("channel", text.as_bytes());
    }
    emit(cli, &meta, &params, channel.as_ref().map(|c| &c.0), &a)
}

fn run_simulate(cli: &Cli) -> Result<(), Failure> {
    let pairs = cli.pairs.ok_or_else(|| Failure::Input("--pairs is required in simulate mode".into()))?;
    if pairs == 0 {
        return Err(Failure::Input("--pairs must be at least 1".into()));
    }
    let (params, params_text) = load_params_text(cli)?;
    let mut params = complete_params(cli, params)?;
    params.n_total = pairs as f64;
    let (channel, channel_text) = load_channel(cli, true)?.expect("required channel");
    let sim = Simulation::new(&params, &channel, SimConfig::default(), pairs, cli.seed)?;
    let partitions = rayon_partitions(pairs);
    let (tally, sifted) = sim.run(partitions);
    write(&cli.out, "counts.csv", &write_counts(&tally, &sifted))?;
    if cli.events {
        let path = cli.out.join("events.csv");
        let file = fs::File::create(&path).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
        let mut w = BufWriter::new(file);
        write_events(&sim, &tally, &mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Failure::Input(format!("{}: {e}", path.display())))?;
    }
    let pairing = simulated_pairing(&sifted, cli.seed)?;
    let opts = options(cli);
    let a = analyze(&tally, &sifted, &params, Some(&channel), pairing, &opts)?;
    let mut meta = Metadata::new("simulate", &params, &opts)
        .with_input("params", params_text.as_bytes())
        .with_input("channel", channel_text.as_bytes());
    meta.seed = Some(cli.seed);
    meta.n_pairs = Some(pairs);
    println!("simulated {pairs} pulse pairs (seed {})", cli.seed);
    print_tally(&tally);
    emit(cli, &meta, &params, Some(&channel), &a)
}

fn rayon_partitions(pairs: u64) -> usize {
    // Fixed partition count: results do not depend on it, only speed does.
    (pairs / 1_000_000).clamp(1, 64) as usize
}

fn simulated_pairing(sifted: &SiftedKeys, seed: u64) -> Result<Option<snsqkd::analysis::PairingStats>, Failure> {
    match &sifted.strings {
        Some((a, b)) if !a.is_empty() => {
            let o = aopp_simulate(a, b, seed)?;
            println!(
                "pairing on simulated strings: {} pairs, {} kept, E' {:.3}%",
                o.n_g,
                o.kept,
                100.0 * o.e_prime()
            );
            if o.n_g == 0 || o.n_odd == 0 {
                return Ok(None);
            }
            Ok(Some(o.stats()))
        }
        _ => Ok(None),
    }
}

fn print_tally(tally: &SourceTally) {
    for cell in snsqkd::CellKey::all() {
        let c = tally.cell(cell);
        println!("  {:<10} sent {:>14} gain {:>10}", cell.label(), c.sent, c.heralded);
    }
}

fn run_optimize(cli: &Cli) -> Result<(), Failure> {
    let (params, params_text) = load_params_text(cli)?;
    let params = complete_params(cli, params)?;
    let (channel, channel_text) = load_channel(cli, true)?.expect("required channel");
    let budget = cli.budget.unwrap_or(2000);
    let space = SearchSpace::around(params, 0.3);
    let opt = optimizer::optimize(&space, &channel, budget, cli.seed)?;
    println!("best expected rate {:.4e} after {} evaluations", opt.rate, opt.evaluations);
    write(&cli.out, "optimum.txt", &opt.params.to_kv_string())?;
    let (tally, sifted) = snsqkd::expected_tally(&opt.params, &channel)?;
    let opts = options(cli);
    let a = analyze(&tally, &sifted, &opt.params, Some(&channel), None, &opts)?;
    let mut meta = Metadata::new("optimize", &opt.params, &opts)
        .with_input("params", params_text.as_bytes())
        .with_input("channel", channel_text.as_bytes());
    meta.seed = Some(cli.seed);
    emit(cli, &meta, &opt.params, Some(&channel), &a)
}

fn run_sweep(cli: &Cli) -> Result<(), Failure> {
    let from = cli.sweep_from.ok_or_else(|| Failure::Input("--sweep-from is required".into()))?;
    let to = cli.sweep_to.ok_or_else(|| Failure::Input("--sweep-to is required".into()))?;
    let steps = cli.sweep_steps.unwrap_or(10);
    if steps == 0 || !(from.is_finite() && to.is_finite()) || from < 0.0 || to < from {
        return Err(Failure::Input("empty sweep grid".into()));
    }
    let distances: Vec<f64> = if steps == 1 {
        vec![from]
    } else {
        (0..steps).map(|i| from + (to - from) * i as f64 / (steps - 1) as f64).collect()
    };
    let (params, _) = load_params_text(cli)?;
    let params = complete_params(cli, params)?;
    let (channel, _) = load_channel(cli, true)?.expect("required channel");
    let alpha = cli.alpha.unwrap_or(0.5 * (channel.alpha_ac + channel.alpha_bc));
    let budget = cli.budget.unwrap_or(0);
    let space = if budget == 0 { SearchSpace::single_point(params) } else { SearchSpace::wide(params) };
    let rows = optimizer::sweep_distance(&space, &channel, alpha, &distances, budget, cli.seed)?;
    write(&cli.out, "sweep.csv", &optimizer::sweep_csv(&rows))?;
    println!("{:>10} {:>12} {:>12} {:>12}", "km", "R", "PLOB abs", "PLOB rel");
    for r in &rows {
        println!("{:>10.1} {:>12.4e} {:>12.4e} {:>12.4e}", r.distance_km, r.rate, r.plob_absolute, r.plob_relative);
    }
    for w in optimizer::monotonicity_warnings(&rows) {
        println!("warning: {w}");
    }
    if let Some(d) = optimizer::plob_crossing(&rows) {
        println!("rate exceeds the absolute PLOB bound beyond about {d:.0} km");
    }
    Ok(())
}
