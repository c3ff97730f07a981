use std::f64::consts::TAU;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use snsqkd::analysis::chernoff::{Chernoff, ChernoffForm};
use snsqkd::optics::{
    detector_rates, estimate_phase, estimate_phase_atan2, expected_reference_counts, slice_acceptance,
    xwindow_postselect,
};
use snsqkd::optimizer::{objective, Param};
use snsqkd::params::cell_probability;
use snsqkd::tally::{accumulate, CellCounts, SourceTally};
use snsqkd::{expected_tally, CellKey, ChannelModel, ProtocolParams, SimConfig, Simulation};

fn form() -> impl Strategy<Value = ChernoffForm> {
    prop_oneof![Just(ChernoffForm::Multiplicative), Just(ChernoffForm::KullbackLeibler)]
}

fn short_link() -> (ProtocolParams, ChannelModel) {
    (ProtocolParams::field_test(), ChannelModel::field_test().symmetric(100.0, 0.2))
}

fn tally_strategy() -> impl Strategy<Value = SourceTally> {
    (prop::collection::vec((0u32..1_000_000, 0u32..1000), 16), 0u32..1000, 0u32..1000, 0u32..100_000).prop_map(
        |(cells, xe, xr, ns)| {
            let mut t = SourceTally::default();
            for (c, (s, h)) in t.cells.iter_mut().zip(cells) {
                *c = CellCounts { sent: s as f64, heralded: h as f64 };
            }
            t.x_effective = xe as f64;
            t.x_errors = xr as f64;
            t.x_sent_in_slice = ns as f64;
            t
        },
    )
}

proptest! {
    #[test]
    fn chernoff_sandwich(form in form(), x in 1e-3f64..1e12, eps_exp in 2.0f64..15.0) {
        let c = Chernoff::new(form, 10f64.powf(-eps_exp)).unwrap();
        prop_assert!(c.lower(x) <= x && x <= c.upper(x));
        prop_assert!(c.expected_lower(x) <= x && x <= c.expected_upper(x));
    }

    #[test]
    fn chernoff_monotone_and_shrinking(form in form(), x in 1.0f64..1e10, k in 1.01f64..10.0) {
        let c = Chernoff::new(form, 1e-10).unwrap();
        let y = x * k;
        prop_assert!(c.upper(y) >= c.upper(x) && c.lower(y) >= c.lower(x));
        let width = |v: f64| (c.upper(v) - c.lower(v)) / v;
        prop_assert!(width(y) <= width(x) * (1.0 + 1e-12));
        let loose = Chernoff::new(form, 1e-3).unwrap();
        prop_assert!(loose.upper(x) <= c.upper(x) && loose.lower(x) >= c.lower(x));
    }

    #[test]
    fn chernoff_inverses(form in form(), x in 1e2f64..1e12) {
        let c = Chernoff::new(form, 1e-10).unwrap();
        let back = c.expected_lower(c.upper(x));
        prop_assert!((back / x - 1.0).abs() < 1e-6, "{} vs {}", back, x);
        let lo = c.lower(x);
        if lo > 0.0 {
            let back = c.expected_upper(lo);
            prop_assert!((back / x - 1.0).abs() < 1e-6, "{} vs {}", back, x);
        }
    }

    #[test]
    fn merge_is_associative_and_commutative(a in tally_strategy(), b in tally_strategy(), c in tally_strategy()) {
        let mut left = a.clone();
        left.merge(&b);
        left.merge(&c);
        let mut bc = b.clone();
        bc.merge(&c);
        let mut right = a.clone();
        right.merge(&bc);
        prop_assert_eq!(&left, &right);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        prop_assert_eq!(ab, ba);
    }

    #[test]
    fn detector_rates_swap_under_half_turn(mu_a in 0.0f64..2.0, mu_b in 0.0f64..2.0, phi in 0.0f64..TAU) {
        let mut ch = ChannelModel::field_test().symmetric(50.0, 0.2);
        ch.e_dx = 0.0;
        let r = detector_rates(mu_a, mu_b, phi, &ch).unwrap();
        let s = detector_rates(mu_a, mu_b, phi + std::f64::consts::PI, &ch).unwrap();
        prop_assert!((r.left - s.right).abs() <= 1e-12 && (r.right - s.left).abs() <= 1e-12);
        let swapped = detector_rates(mu_b, mu_a, phi, &ch).unwrap();
        prop_assert!((r.left - swapped.left).abs() <= 1e-12 && (r.right - swapped.right).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn simulation_is_partition_invariant(seed in any::<u64>(), parts in 1usize..9, n in 1u64..40_000) {
        let (p, ch) = short_link();
        let sim = Simulation::new(&p, &ch, SimConfig::default(), n, seed).unwrap();
        let (t1, s1) = sim.run(1);
        let (tk, sk) = sim.run(parts);
        prop_assert_eq!(&t1, &tk);
        prop_assert_eq!(&s1, &sk);
        prop_assert_eq!(s1.strings, sk.strings);
        let streamed = accumulate(sim.events(0..n), p.lambda).unwrap();
        prop_assert_eq!(streamed, t1);
    }
}

#[test]
fn phase_inversion_is_exact() {
    for i in 0..1000 {
        let d = TAU * i as f64 / 1000.0;
        let (n1, n2, m1, m2) = expected_reference_counts(d, 100.0);
        for est in [estimate_phase(n1, n2, m1, m2).unwrap(), estimate_phase_atan2(n1, n2, m1, m2).unwrap()] {
            let diff = (est - d).rem_euclid(TAU);
            assert!(diff.min(TAU - diff) <= 1e-12, "{d}: {est}");
        }
    }
}

#[test]
fn phase_estimate_noise_at_hundred_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut sq = 0.0;
    let n = 4000;
    for i in 0..n {
        let d = TAU * (i as f64 + 0.5) / n as f64;
        let (e1, e2, e3, e4) = expected_reference_counts(d, 100.0);
        let mut draw = |m: f64| if m > 0.0 { Poisson::new(m).unwrap().sample(&mut rng) } else { 0.0 };
        let (n1, n2, m1, m2) = (draw(e1), draw(e2), draw(e3), draw(e4));
        let diff = (estimate_phase(n1, n2, m1, m2).unwrap() - d).rem_euclid(TAU);
        let err = diff.min(TAU - diff);
        sq += err * err;
    }
    let rms = (sq / n as f64).sqrt();
    assert!(rms < 0.15, "rms {rms}");
}

#[test]
fn slice_acceptance_matches_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 400_000;
    for lambda in [0.0005, 0.0196, 0.1, 0.5, 0.9] {
        let hits = (0..n)
            .filter(|_| {
                let (a, b, c) = (rng.random::<f64>() * TAU, rng.random::<f64>() * TAU, rng.random::<f64>() * TAU);
                xwindow_postselect(a, b, c, lambda)
            })
            .count();
        let p = slice_acceptance(lambda);
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let got = hits as f64 / n as f64;
        assert!((got - p).abs() <= 5.0 * sigma, "lambda {lambda}: {got} vs {p}");
    }
}

#[test]
fn simulated_counts_match_expected_tally() {
    let (p, ch) = short_link();
    let n = 4_000_000u64;
    let sim = Simulation::new(&p, &ch, SimConfig::default(), n, 99).unwrap();
    let (tally, _) = sim.run(2);
    let (expected, _) = expected_tally(&p, &ch).unwrap();
    let within = |obs: f64, trials: f64, prob: f64| {
        let sd = (trials * prob * (1.0 - prob)).sqrt();
        (obs - trials * prob).abs() <= 5.0 * sd + 1.0
    };
    for cell in CellKey::all() {
        let c = tally.cell(cell);
        assert!(within(c.sent, n as f64, cell_probability(&p, cell)), "{cell} sent {}", c.sent);
        let g = expected.cell(cell).gain();
        assert!(within(c.heralded, c.sent, g), "{cell} heralded {} of {} (gain {g:e})", c.heralded, c.sent);
    }
}

#[test]
fn objective_is_smooth_near_field_point() {
    let ch = ChannelModel::field_test();
    let base = ProtocolParams::field_test();
    let r0 = objective(&base, &ch);
    assert!(r0 > 0.0);
    for param in Param::ALL.into_iter().filter(|&p| p != Param::MuB1) {
        for step in [0.99, 1.01] {
            let mut q = base;
            param.set(&mut q, param.get(&base) * step);
            q.mu_b1 = q.solve_mu_b1();
            let r = objective(&q, &ch);
            assert!((r / r0 - 1.0).abs() < 0.1, "{} x{step}: {r:e} vs {r0:e}", param.name());
        }
    }
}

#[test]
fn same_seed_same_stream_other_seed_differs() {
    let (p, ch) = short_link();
    let a = Simulation::new(&p, &ch, SimConfig::default(), 50_000, 1).unwrap().run(3);
    let b = Simulation::new(&p, &ch, SimConfig::default(), 50_000, 1).unwrap().run(1);
    let c = Simulation::new(&p, &ch, SimConfig::default(), 50_000, 2).unwrap().run(1);
    assert_eq!(a.0, b.0);
    assert_ne!(a.0, c.0);
}
