//! Expected-key-rate objective and a bounded simplex search over the source
//! parameters, with the Bob decoy intensity eliminated through the security
//! condition and λ searched on an outer grid.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::analysis::{analyze, plob_bounds, AnalysisOptions};
use crate::error::{Error, Result};
use crate::optics::expected_tally_unchecked;
use crate::params::{validate, ChannelModel, ProtocolParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Param {
    MuA1,
    MuB1,
    MuA2,
    MuB2,
    EpsA,
    EpsB,
    PA1,
    PB1,
    PA2,
    PB2,
    Lambda,
}

impl Param {
    pub const ALL: [Param; 11] = [
        Param::MuA1,
        Param::MuB1,
        Param::MuA2,
        Param::MuB2,
        Param::EpsA,
        Param::EpsB,
        Param::PA1,
        Param::PB1,
        Param::PA2,
        Param::PB2,
        Param::Lambda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Param::MuA1 => "mu_a1",
            Param::MuB1 => "mu_b1",
            Param::MuA2 => "mu_a2",
            Param::MuB2 => "mu_b2",
            Param::EpsA => "eps_a",
            Param::EpsB => "eps_b",
            Param::PA1 => "p_a1",
            Param::PB1 => "p_b1",
            Param::PA2 => "p_a2",
            Param::PB2 => "p_b2",
            Param::Lambda => "lambda",
        }
    }

    pub fn get(self, p: &ProtocolParams) -> f64 {
        match self {
            Param::MuA1 => p.mu_a1,
            Param::MuB1 => p.mu_b1,
            Param::MuA2 => p.mu_a2,
            Param::MuB2 => p.mu_b2,
            Param::EpsA => p.eps_a,
            Param::EpsB => p.eps_b,
            Param::PA1 => p.p_a1,
            Param::PB1 => p.p_b1,
            Param::PA2 => p.p_a2,
            Param::PB2 => p.p_b2,
            Param::Lambda => p.lambda,
        }
    }

    pub fn set(self, p: &mut ProtocolParams, v: f64) {
        match self {
            Param::MuA1 => p.mu_a1 = v,
            Param::MuB1 => p.mu_b1 = v,
            Param::MuA2 => p.mu_a2 = v,
            Param::MuB2 => p.mu_b2 = v,
            Param::EpsA => p.eps_a = v,
            Param::EpsB => p.eps_b = v,
            Param::PA1 => p.p_a1 = v,
            Param::PB1 => p.p_b1 = v,
            Param::PA2 => p.p_a2 = v,
            Param::PB2 => p.p_b2 = v,
            Param::Lambda => p.lambda = v,
        }
    }

    fn is_probability(self) -> bool {
        !matches!(self, Param::MuA1 | Param::MuB1 | Param::MuA2 | Param::MuB2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Bound {
    pub lo: f64,
    pub hi: f64,
    pub fixed: bool,
}

/// Box over the source parameters. The `mu_b1` entry is ignored: that
/// intensity always follows from the others through the security condition.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SearchSpace {
    /// Values of fixed parameters and of everything not searched.
    pub base: ProtocolParams,
    pub bounds: [Bound; 11],
}

impl SearchSpace {
    /// Every parameter fixed at `base`.
    pub fn single_point(base: ProtocolParams) -> Self {
        let bounds = Param::ALL.map(|p| {
            let v = p.get(&base);
            Bound { lo: v, hi: v, fixed: true }
        });
        SearchSpace { base, bounds }
    }

    /// Free parameters within `±rel` of `base`, probabilities kept in (0, 1).
    pub fn around(base: ProtocolParams, rel: f64) -> Self {
        let mut s = Self::single_point(base);
        for p in Param::ALL {
            if p == Param::MuB1 {
                continue;
            }
            let v = p.get(&base);
            let (mut lo, mut hi) = (v * (1.0 - rel), v * (1.0 + rel));
            if p.is_probability() {
                lo = lo.max(1e-4);
                hi = hi.min(1.0 - 1e-4);
            }
            s.bounds[p as usize] = Bound { lo, hi, fixed: false };
        }
        s
    }

    /// A broad box suited to distance sweeps.
    pub fn wide(base: ProtocolParams) -> Self {
        let mut s = Self::single_point(base);
        let set = |s: &mut SearchSpace, p: Param, lo: f64, hi: f64| {
            s.bounds[p as usize] = Bound { lo, hi, fixed: false };
        };
        set(&mut s, Param::MuA1, 0.005, 0.2);
        set(&mut s, Param::MuA2, 0.1, 0.8);
        set(&mut s, Param::MuB2, 0.1, 0.8);
        set(&mut s, Param::EpsA, 0.05, 0.6);
        set(&mut s, Param::EpsB, 0.05, 0.6);
        set(&mut s, Param::PA1, 0.5, 0.99);
        set(&mut s, Param::PB1, 0.5, 0.99);
        set(&mut s, Param::PA2, 0.5, 0.95);
        set(&mut s, Param::PB2, 0.5, 0.95);
        set(&mut s, Param::Lambda, 0.002, 0.2);
        s
    }

    pub fn fix(mut self, p: Param, v: f64) -> Self {
        self.bounds[p as usize] = Bound { lo: v, hi: v, fixed: true };
        Param::set(p, &mut self.base, v);
        self
    }

    fn free_continuous(&self) -> Vec<Param> {
        Param::ALL
            .into_iter()
            .filter(|&p| p != Param::MuB1 && p != Param::Lambda && !self.bounds[p as usize].fixed)
            .collect()
    }

    fn check(&self) -> Result<()> {
        for p in Param::ALL {
            if p == Param::MuB1 {
                continue;
            }
            let b = self.bounds[p as usize];
            let v = p.get(&self.base);
            let (lo, hi) = if b.fixed { (v, v) } else { (b.lo, b.hi) };
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return Err(Error::EmptyFeasibleRegion(format!("{}: bounds [{lo}, {hi}]", p.name())));
            }
            if p.is_probability() && hi > 1.0 {
                return Err(Error::EmptyFeasibleRegion(format!("{}: upper bound {hi} above 1", p.name())));
            }
        }
        Ok(())
    }

    /// Whether `params` lies inside the box.
    pub fn contains(&self, params: &ProtocolParams) -> bool {
        Param::ALL.into_iter().all(|p| {
            if p == Param::MuB1 {
                return true;
            }
            let b = self.bounds[p as usize];
            let v = p.get(params);
            if b.fixed {
                v == p.get(&self.base)
            } else {
                v >= b.lo && v <= b.hi
            }
        })
    }

    fn point(&self, dims: &[Param], unit: &[f64], lambda: f64) -> ProtocolParams {
        let mut p = self.base;
        for (&d, &u) in dims.iter().zip(unit) {
            let b = self.bounds[d as usize];
            d.set(&mut p, b.lo + u.clamp(0.0, 1.0) * (b.hi - b.lo));
        }
        p.lambda = lambda;
        p.mu_b1 = p.solve_mu_b1();
        p
    }

    fn unit_of(&self, dims: &[Param], params: &ProtocolParams) -> Vec<f64> {
        dims.iter()
            .map(|&d| {
                let b = self.bounds[d as usize];
                if b.hi > b.lo {
                    ((d.get(params) - b.lo) / (b.hi - b.lo)).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    }

    fn lambda_grid(&self) -> Vec<f64> {
        let b = self.bounds[Param::Lambda as usize];
        if b.fixed || b.hi <= b.lo {
            return vec![if b.fixed { self.base.lambda } else { b.lo }];
        }
        const N: usize = 5;
        (0..N)
            .map(|i| {
                let t = i as f64 / (N - 1) as f64;
                if b.lo > 0.0 {
                    b.lo * (b.hi / b.lo).powf(t)
                } else {
                    b.lo + t * (b.hi - b.lo)
                }
            })
            .collect()
    }
}

/// Expected key rate per pulse at `params`; zero wherever the pipeline
/// cannot certify a key or the parameters are invalid.
pub fn objective(params: &ProtocolParams, channel: &ChannelModel) -> f64 {
    objective_with(params, channel, &AnalysisOptions::default())
}

pub fn objective_with(params: &ProtocolParams, channel: &ChannelModel, opts: &AnalysisOptions) -> f64 {
    if !validate(params).is_ok() || !channel.validate().is_ok() {
        return 0.0;
    }
    let (tally, sifted) = expected_tally_unchecked(params, channel);
    match analyze(&tally, &sifted, params, Some(channel), None, opts) {
        Ok(r) if r.key.rate_per_pulse.is_finite() => r.key.rate_per_pulse,
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizeResult {
    pub params: ProtocolParams,
    pub rate: f64,
    pub evaluations: usize,
    /// Best rate found at each λ of the outer grid.
    pub lambda_grid: Vec<(f64, f64)>,
}

struct Tracker<'a> {
    space: &'a SearchSpace,
    channel: &'a ChannelModel,
    opts: &'a AnalysisOptions,
    budget: usize,
    used: usize,
    best: Option<(f64, ProtocolParams)>,
}

impl Tracker<'_> {
    fn remaining(&self) -> usize {
        self.budget - self.used
    }

    /// Evaluate a batch concurrently; returns `None` entries past the budget.
    fn eval_batch(&mut self, dims: &[Param], pts: &[Vec<f64>], lambda: f64) -> Vec<Option<f64>> {
        let take = pts.len().min(self.remaining());
        let cands: Vec<ProtocolParams> = pts[..take].iter().map(|u| self.space.point(dims, u, lambda)).collect();
        let (channel, opts) = (self.channel, self.opts);
        let vals: Vec<f64> = cands.par_iter().map(|p| objective_with(p, channel, opts)).collect();
        self.used += take;
        for (v, p) in vals.iter().zip(&cands) {
            let better = match &self.best {
                None => true,
                Some((b, _)) => *v > *b,
            };
            if better {
                self.best = Some((*v, *p));
            }
        }
        let mut out: Vec<Option<f64>> = vals.into_iter().map(Some).collect();
        out.resize(pts.len(), None);
        out
    }

    fn eval(&mut self, dims: &[Param], u: &[f64], lambda: f64) -> Option<f64> {
        self.eval_batch(dims, &[u.to_vec()], lambda)[0]
    }
}

/// Maximise the expected key rate over the box within `budget` objective
/// evaluations. Deterministic for a fixed seed.
pub fn optimize(space: &SearchSpace, channel: &ChannelModel, budget: usize, seed: u64) -> Result<OptimizeResult> {
    optimize_with(space, channel, budget, seed, &AnalysisOptions::default())
}

pub fn optimize_with(
    space: &SearchSpace,
    channel: &ChannelModel,
    budget: usize,
    seed: u64,
    opts: &AnalysisOptions,
) -> Result<OptimizeResult> {
    space.check()?;
    let dims = space.free_continuous();
    if budget < dims.len() + 1 {
        return Err(Error::InvalidParameter(format!(
            "budget {budget} is below dimension + 1 = {}",
            dims.len() + 1
        )));
    }
    let grid = space.lambda_grid();
    let mut t = Tracker {
        space,
        channel,
        opts,
        budget,
        used: 0,
        best: None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = if space.contains(&space.base) {
        Some(space.unit_of(&dims, &space.base))
    } else {
        None
    };
    let mid = vec![0.5; dims.len()];
    // The base point at its own λ, which the grid may not contain.
    if let Some(s) = &start {
        t.eval(&dims, s, space.base.lambda);
    }
    let mut per_lambda = Vec::with_capacity(grid.len());
    for (gi, &lambda) in grid.iter().enumerate() {
        let share = (budget - t.used) / (grid.len() - gi);
        let stop_at = t.used + share;
        let mut local_best: Option<(f64, Vec<f64>)> = None;
        let mut seeds = vec![mid.clone()];
        if let Some(s) = &start {
            seeds.push(s.clone());
        }
        for s in &seeds {
            if t.used >= stop_at {
                break;
            }
            if let Some(v) = t.eval(&dims, s, lambda) {
                if local_best.as_ref().is_none_or(|(b, _)| v > *b) {
                    local_best = Some((v, s.clone()));
                }
            }
        }
        if !dims.is_empty() {
            const RESTARTS: usize = 3;
            for r in 0..RESTARTS {
                if t.used >= stop_at {
                    break;
                }
                let from = if r == 0 {
                    local_best.as_ref().map(|(_, u)| u.clone()).unwrap_or_else(|| mid.clone())
                } else {
                    (0..dims.len()).map(|_| rng.random::<f64>()).collect()
                };
                let restart_budget = (stop_at - t.used) / (RESTARTS - r);
                let until = t.used + restart_budget;
                let (v, u) = nelder_mead(&mut t, &dims, from, lambda, until);
                if local_best.as_ref().is_none_or(|(b, _)| v > *b) {
                    local_best = Some((v, u));
                }
            }
        }
        per_lambda.push((lambda, local_best.map(|(v, _)| v).unwrap_or(0.0)));
    }
    let (rate, params) = t
        .best
        .ok_or_else(|| Error::EmptyFeasibleRegion("no candidate was evaluated".into()))?;
    Ok(OptimizeResult {
        params,
        rate,
        evaluations: t.used,
        lambda_grid: per_lambda,
    })
}

/// Maximise over the unit cube until `stop_at` evaluations have been used.
fn nelder_mead(t: &mut Tracker, dims: &[Param], x0: Vec<f64>, lambda: f64, stop_at: usize) -> (f64, Vec<f64>) {
    let n = dims.len();
    let clamp = |v: Vec<f64>| v.into_iter().map(|x| x.clamp(0.0, 1.0)).collect::<Vec<_>>();
    let mut simplex = vec![x0.clone()];
    for i in 0..n {
        let mut v = x0.clone();
        v[i] = if v[i] + 0.1 <= 1.0 { v[i] + 0.1 } else { v[i] - 0.1 };
        simplex.push(v);
    }
    let budget_left = stop_at.saturating_sub(t.used);
    if budget_left < simplex.len() {
        return (f64::NEG_INFINITY, x0);
    }
    // Minimise the negated rate.
    let mut f: Vec<f64> = t
        .eval_batch(dims, &simplex, lambda)
        .into_iter()
        .map(|v| -v.unwrap_or(0.0))
        .collect();
    while t.used < stop_at {
        let mut idx: Vec<usize> = (0..=n).collect();
        idx.sort_by(|&a, &b| f[a].total_cmp(&f[b]));
        simplex = idx.iter().map(|&i| simplex[i].clone()).collect();
        f = idx.iter().map(|&i| f[i]).collect();
        let spread = (f[n] - f[0]).abs();
        let size = simplex.iter().skip(1).map(|v| dist(v, &simplex[0])).fold(0.0, f64::max);
        if size < 1e-9 || (spread <= 1e-12 * f[0].abs() && size < 1e-4) {
            break;
        }
        let centroid: Vec<f64> = (0..n).map(|j| simplex[..n].iter().map(|v| v[j]).sum::<f64>() / n as f64).collect();
        let along = |c: f64| clamp((0..n).map(|j| centroid[j] + c * (simplex[n][j] - centroid[j])).collect());
        let xr = along(-1.0);
        let Some(fr) = t.eval(dims, &xr, lambda).map(|v| -v) else { break };
        if fr < f[0] {
            let xe = along(-2.0);
            match t.eval(dims, &xe, lambda).map(|v| -v) {
                Some(fe) if fe < fr => {
                    simplex[n] = xe;
                    f[n] = fe;
                }
                _ => {
                    simplex[n] = xr;
                    f[n] = fr;
                }
            }
        } else if fr < f[n - 1] {
            simplex[n] = xr;
            f[n] = fr;
        } else {
            let (xc, outside) = if fr < f[n] { (along(-0.5), true) } else { (along(0.5), false) };
            let Some(fc) = t.eval(dims, &xc, lambda).map(|v| -v) else { break };
            if (outside && fc <= fr) || (!outside && fc < f[n]) {
                simplex[n] = xc;
                f[n] = fc;
            } else {
                let best = simplex[0].clone();
                let shrunk: Vec<Vec<f64>> = simplex[1..]
                    .iter()
                    .map(|v| clamp(v.iter().zip(&best).map(|(x, b)| b + 0.5 * (x - b)).collect()))
                    .collect();
                let vals = t.eval_batch(dims, &shrunk, lambda);
                for (k, (v, val)) in shrunk.into_iter().zip(vals).enumerate() {
                    match val {
                        Some(val) => {
                            simplex[k + 1] = v;
                            f[k + 1] = -val;
                        }
                        None => break,
                    }
                }
            }
        }
    }
    let i = (0..=n).min_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap_or(0);
    (-f[i], simplex[i].clone())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub distance_km: f64,
    pub loss_db: f64,
    pub rate: f64,
    pub plob_absolute: f64,
    pub plob_relative: f64,
    pub params: ProtocolParams,
}

/// Key rate along a symmetric link of total length `distances`, either at
/// `base` (when `budget` is zero) or optimised at each point within `space`
/// starting from the previous optimum.
pub fn sweep_distance(
    space: &SearchSpace,
    device: &ChannelModel,
    alpha: f64,
    distances: &[f64],
    budget: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if distances.is_empty() {
        return Err(Error::InvalidParameter("empty sweep grid".into()));
    }
    let mut rows = Vec::with_capacity(distances.len());
    let mut space = space.clone();
    for &d in distances {
        let ch = device.symmetric(d, alpha);
        let (rate, params) = if budget == 0 {
            let mut p = space.base;
            p.mu_b1 = p.solve_mu_b1();
            (objective(&p, &ch), p)
        } else {
            let r = optimize(&space, &ch, budget, seed)?;
            if space.contains(&r.params) {
                space.base = r.params;
            }
            (r.rate, r.params)
        };
        let plob = plob_bounds(&ch);
        rows.push(SweepRow {
            distance_km: d,
            loss_db: ch.loss_db(),
            rate,
            plob_absolute: plob.absolute,
            plob_relative: plob.relative,
            params,
        });
    }
    Ok(rows)
}

/// Warnings for rows where the rate rises with distance.
pub fn monotonicity_warnings(rows: &[SweepRow]) -> Vec<String> {
    rows.windows(2)
        .filter(|w| w[1].distance_km > w[0].distance_km && w[1].rate > w[0].rate * (1.0 + 1e-9))
        .map(|w| {
            format!(
                "rate rises from {:.4e} at {} km to {:.4e} at {} km",
                w[0].rate, w[0].distance_km, w[1].rate, w[1].distance_km
            )
        })
        .collect()
}

/// Distance at which the rate first exceeds the absolute bound, by linear
/// interpolation of `log(R / PLOB)`.
pub fn plob_crossing(rows: &[SweepRow]) -> Option<f64> {
    let g = |r: &SweepRow| (r.rate / r.plob_absolute).ln();
    rows.windows(2).find_map(|w| {
        let (a, b) = (g(&w[0]), g(&w[1]));
        if a.is_finite() && b.is_finite() && a < 0.0 && b >= 0.0 {
            Some(w[0].distance_km + (w[1].distance_km - w[0].distance_km) * (-a) / (b - a))
        } else {
            None
        }
    })
}

pub const SWEEP_HEADER: &str =
    "distance_km,loss_db,rate,plob_absolute,plob_relative,mu_a1,mu_b1,mu_a2,mu_b2,eps_a,eps_b,p_a1,p_b1,p_a2,p_b2,lambda";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_HEADER);
    s.push('\n');
    for r in rows {
        let _ = write!(
            s,
            "{},{},{:e},{:e},{:e}",
            r.distance_km, r.loss_db, r.rate, r.plob_absolute, r.plob_relative
        );
        for p in Param::ALL {
            let _ = write!(s, ",{}", p.get(&r.params));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_detector_efficiency_gives_zero_rate() {
        let ch = ChannelModel {
            eta_d: 0.0,
            ..ChannelModel::field_test()
        };
        assert_eq!(objective(&ProtocolParams::field_test(), &ch), 0.0);
    }

    #[test]
    fn single_point_space_returns_that_point() {
        let mut p = ProtocolParams::field_test();
        p.mu_b1 = p.solve_mu_b1();
        let r = optimize(&SearchSpace::single_point(p), &ChannelModel::field_test(), 5, 1).unwrap();
        assert_eq!(r.params, p);
        assert_eq!(r.rate, objective(&p, &ChannelModel::field_test()));
    }

    #[test]
    fn candidates_satisfy_the_constraint_exactly() {
        let space = SearchSpace::around(ProtocolParams::field_test(), 0.3);
        let dims = space.free_continuous();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let u: Vec<f64> = (0..dims.len()).map(|_| rng.random()).collect();
            let p = space.point(&dims, &u, 0.02);
            assert!(p.constraint_residual() <= 1e-12);
        }
    }

    #[test]
    fn empty_box_is_an_error() {
        let mut s = SearchSpace::around(ProtocolParams::field_test(), 0.1);
        s.bounds[Param::MuA2 as usize] = Bound { lo: 0.5, hi: 0.4, fixed: false };
        assert!(matches!(
            optimize(&s, &ChannelModel::field_test(), 100, 0),
            Err(Error::EmptyFeasibleRegion(_))
        ));
    }

    #[test]
    fn budget_below_dimension_is_rejected() {
        let s = SearchSpace::around(ProtocolParams::field_test(), 0.1);
        assert!(optimize(&s, &ChannelModel::field_test(), 3, 0).is_err());
    }

    #[test]
    fn result_is_best_of_evaluated_and_respects_budget() {
        let s = SearchSpace::around(ProtocolParams::field_test(), 0.2);
        let ch = ChannelModel::field_test();
        let r = optimize(&s, &ch, 150, 7).unwrap();
        assert!(r.evaluations <= 150);
        assert_eq!(objective(&r.params, &ch), r.rate);
        let r2 = optimize(&s, &ch, 150, 7).unwrap();
        assert_eq!(r, r2);
    }

    #[test]
    fn sweep_rejects_empty_grid() {
        let s = SearchSpace::single_point(ProtocolParams::field_test());
        assert!(sweep_distance(&s, &ChannelModel::field_test(), 0.185, &[], 0, 0).is_err());
    }
}
