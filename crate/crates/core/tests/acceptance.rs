//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the test fails if any criterion fails.

use std::f64::consts::TAU;
use std::time::{Duration, Instant};

use snsqkd::analysis::aopp::aopp_simulate;
use snsqkd::analysis::chernoff::{Chernoff, ChernoffForm};
use snsqkd::analysis::keyrate::plob_bounds;
use snsqkd::analysis::Status;
use snsqkd::optics::{estimate_phase, expected_reference_counts};
use snsqkd::optimizer::{monotonicity_warnings, optimize, plob_crossing, sweep_distance, SearchSpace};
use snsqkd::params::Choice;
use snsqkd::tally::TallyBuilder;
use snsqkd::{analyze, expected_tally, fixtures, AnalysisOptions, CellKey, SimConfig, Simulation};

struct Outcome {
    pass: bool,
    detail: String,
}

fn rel(x: f64, want: f64) -> f64 {
    (x / want - 1.0).abs()
}

fn check(line: &mut Vec<String>, ok: &mut bool, name: &str, value: f64, want: f64, tol: f64) {
    let good = rel(value, want) <= tol;
    *ok &= good;
    line.push(format!("{name} {value:.4e} (want {want:.4e} ±{:.0}%){}", tol * 100.0, if good { "" } else { " !" }));
}

fn replay() -> Outcome {
    let t0 = Instant::now();
    let f = fixtures::field_test().unwrap();
    let a = analyze(&f.tally, &f.sifted, &f.params, Some(&f.channel), None, &AnalysisOptions::default()).unwrap();
    let elapsed = t0.elapsed();
    let d = a.decoy.as_ref().unwrap();
    let c = a.chain.unwrap();
    let (mut ok, mut parts) = (a.status == Status::PositiveKey, Vec::new());
    check(&mut parts, &mut ok, "n1", d.n1_expected(), 1.29e7, 0.05);
    check(&mut parts, &mut ok, "e1ph", d.e1ph_up, 0.1107, 0.05);
    check(&mut parts, &mut ok, "n1'", c.n1_prime, 2.38e6, 0.05);
    check(&mut parts, &mut ok, "e1'ph", c.e1ph_prime, 0.2024, 0.05);
    check(&mut parts, &mut ok, "R", a.key.rate_per_pulse, 4.80e-8, 0.10);
    ok &= elapsed < Duration::from_secs(1);
    parts.push(format!("{elapsed:.2?}"));
    Outcome { pass: ok, detail: parts.join(", ") }
}

fn plob() -> Outcome {
    let f = fixtures::field_test().unwrap();
    let p = plob_bounds(&f.channel);
    let a = analyze(&f.tally, &f.sifted, &f.params, Some(&f.channel), None, &AnalysisOptions::default()).unwrap();
    let (mut ok, mut parts) = (true, Vec::new());
    check(&mut parts, &mut ok, "absolute", p.absolute, 1.78e-8, 0.02);
    check(&mut parts, &mut ok, "relative", p.relative, 5.01e-9, 0.02);
    // The ratios inherit the key-rate tolerance.
    check(&mut parts, &mut ok, "R/absolute", a.key.ratio_absolute.unwrap(), 2.70, 0.10);
    check(&mut parts, &mut ok, "R/relative", a.key.ratio_relative.unwrap(), 9.6, 0.10);
    Outcome { pass: ok, detail: parts.join(", ") }
}

fn simulation_fidelity() -> Outcome {
    let t0 = Instant::now();
    let f = fixtures::field_test().unwrap();
    let (model, _) = expected_tally(&f.params, &f.channel).unwrap();
    let elapsed = t0.elapsed();
    let mut worst_vac: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for cell in CellKey::all() {
        let vacuum = |c: Choice| matches!(c, Choice::ZVacuum | Choice::XVacuum);
        let dev = rel(model.cell(cell).gain(), f.tally.cell(cell).gain());
        if vacuum(cell.alice) && vacuum(cell.bob) {
            worst_vac = worst_vac.max(dev);
        } else {
            worst = worst.max(dev);
        }
    }
    let ok = worst_vac <= 0.15 && worst <= 0.10 && elapsed < Duration::from_secs(1);
    Outcome {
        pass: ok,
        detail: format!(
            "worst vacuum-vacuum gain {:.1}% (≤15%), worst other {:.1}% (≤10%), {elapsed:.2?}",
            worst_vac * 100.0,
            worst * 100.0
        ),
    }
}

fn aopp_behaviour() -> Outcome {
    // Field-test counting rates at desk scale: each arm 30 dB shorter, dark
    // counts and reference brightness rescaled to keep the ratios.
    let f = fixtures::field_test().unwrap();
    let mut ch = f.channel;
    ch.l_ac -= 30.0 / ch.alpha_ac;
    ch.l_bc -= 30.0 / ch.alpha_bc;
    ch.p_dark *= 1000.0;
    ch.mu_ref /= 1000.0;
    let t0 = Instant::now();
    let sim = Simulation::new(&f.params, &ch, SimConfig::default(), 100_000_000, 2024).unwrap();
    let (_, sifted) = sim.run(4);
    let (za, zb) = sifted.strings.as_ref().expect("strings retained");
    let out = aopp_simulate(za, zb, 7).unwrap();
    let (e, e_prime) = (sifted.error_rate(), out.e_prime());
    let ok = (e - 0.2784).abs() <= 0.015 && (e_prime - 0.0069).abs() <= 0.003;
    Outcome {
        pass: ok,
        detail: format!(
            "E {:.2}% (27.84 ±1.5 pp), E' {:.3}% (0.69 ±0.3 pp), n_t {}, kept {}, {:.1?}",
            e * 100.0,
            e_prime * 100.0,
            sifted.n_t,
            out.nt_prime(),
            t0.elapsed()
        ),
    }
}

fn properties() -> Outcome {
    let mut failures = Vec::new();

    // Chernoff sandwich, monotonicity and shrinkage.
    for form in [ChernoffForm::Multiplicative, ChernoffForm::KullbackLeibler] {
        let c = Chernoff::new(form, 1e-10).unwrap();
        let mut prev = (0.0, 0.0, f64::INFINITY);
        for k in 0..60 {
            let x = 10f64.powf(k as f64 / 5.0);
            let (lo, hi) = (c.lower(x), c.upper(x));
            let width = (hi - lo) / x;
            if !(lo <= x && x <= hi && lo >= prev.0 && hi >= prev.1 && width <= prev.2 + 1e-12) {
                failures.push(format!("chernoff {form} at {x}"));
                break;
            }
            prev = (lo, hi, width);
        }
    }

    // Phase estimator inversion.
    let worst = (0..1000)
        .map(|i| {
            let d = TAU * i as f64 / 1000.0;
            let (n1, n2, m1, m2) = expected_reference_counts(d, 200.0);
            let e = estimate_phase(n1, n2, m1, m2).unwrap();
            let diff = (e - d).rem_euclid(TAU);
            diff.min(TAU - diff)
        })
        .fold(0.0, f64::max);
    if worst > 1e-12 {
        failures.push(format!("phase inversion error {worst:e}"));
    }

    // AOPP brute force on every pair of 4-bit strings.
    for a in 0u8..16 {
        for b in 0u8..16 {
            let bits = |v: u8| (0..4).map(|i| (v >> i) & 1).collect::<Vec<u8>>();
            let (za, zb) = (bits(a), bits(b));
            let out = aopp_simulate(&za, &zb, 1).unwrap();
            let zeros = zb.iter().filter(|&&x| x == 0).count();
            if out.n_g as usize != zeros.min(4 - zeros) || out.kept + out.discarded != out.n_g {
                failures.push(format!("aopp {a:04b}/{b:04b}"));
            }
        }
    }

    // Partition exactness of the simulated tally.
    let f = fixtures::field_test().unwrap();
    let ch = f.channel.symmetric(100.0, 0.2);
    let sim = Simulation::new(&f.params, &ch, SimConfig::default(), 300_000, 9).unwrap();
    let whole = sim.run(1);
    for parts in [2, 3, 7] {
        let split = sim.run(parts);
        if split.0 != whole.0 || split.1.strings != whole.1.strings {
            failures.push(format!("partition {parts}"));
        }
    }
    let mut b = TallyBuilder::new(f.params.lambda, usize::MAX);
    for ev in sim.events(0..300_000) {
        b.push(&ev);
    }
    if b.finish().0 != whole.0 {
        failures.push("streaming tally".into());
    }

    Outcome {
        pass: failures.is_empty(),
        detail: if failures.is_empty() {
            "Chernoff grids, phase inversion, 4-bit AOPP, partition exactness (full suites in property tests)".into()
        } else {
            failures.join("; ")
        },
    }
}

fn optimizer() -> Outcome {
    let f = fixtures::field_test().unwrap();
    let t0 = Instant::now();
    let space = SearchSpace::around(f.params, 0.3);
    let opt = optimize(&space, &f.channel, 2000, 1).unwrap();
    let elapsed = t0.elapsed();
    let km: Vec<f64> = (0..10).map(|i| 100.0 + 50.0 * i as f64).collect();
    let rows = sweep_distance(&SearchSpace::single_point(f.params), &f.channel, 0.185, &km, 0, 1).unwrap();
    let warnings = monotonicity_warnings(&rows);
    let cross = plob_crossing(&rows);
    let ok = opt.rate >= 4.3e-8
        && opt.evaluations <= 2000
        && elapsed < Duration::from_secs(120)
        && warnings.is_empty()
        && cross.is_some_and(|d| (300.0..=450.0).contains(&d));
    Outcome {
        pass: ok,
        detail: format!(
            "R* {:.3e} (≥4.3e-8) in {} evaluations, {elapsed:.1?}; sweep monotone: {}; PLOB crossing {:?} km",
            opt.rate,
            opt.evaluations,
            warnings.is_empty(),
            cross.map(|d| d.round())
        ),
    }
}

#[test]
fn acceptance() {
    let criteria: [(&str, fn() -> Outcome); 6] = [
        ("1 replay of field-test counts", replay),
        ("2 PLOB bounds", plob),
        ("3 expected tally against observed gains", simulation_fidelity),
        ("4 Monte-Carlo AOPP error rates", aopp_behaviour),
        ("5 property checks", properties),
        ("6 optimizer and distance sweep", optimizer),
    ];
    let mut failed = Vec::new();
    for (name, run) in criteria {
        let o = run();
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(name);
        }
    }
    assert!(failed.is_empty(), "failed: {failed:?}");
}
