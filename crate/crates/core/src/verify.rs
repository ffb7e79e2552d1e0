//! Oracles and measurement suites for the rounded policy.
//!
//! * [`optimal_adaptive_dp`] computes the best adaptive policy exactly.
//! * [`simulate`] runs the rounded policy many times and collects the
//!   statistics behind [`simulate_favg`], [`crs_drop_rate`] and
//!   [`drop_bound_decomposition`].
//! * [`survival_closed_form`], [`survival_exact`] and
//!   [`survival_monte_carlo`] give the survival probability of one item
//!   when every other item's size is pinned by a profile.

use std::collections::HashMap;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::cgreedy::{self, GreedyConfig, GreedyError};
use crate::model::{Instance, Reward, Size};
use crate::objective::{self, Estimate, Moments, ObjectiveError, CHUNK, DEFAULT_ENUM_GUARD};
use crate::polytope::{build_constraints, FractionalSolution};
use crate::rng;
use crate::rounding::{self, order_proposals, OrderedProposals, Proposal, RoundingError, RoundingPlan, Status};

/// Default bound on the nominal DP state count.
pub const DEFAULT_DP_GUARD: u64 = 10_000_000;

/// Conditioning events below which a drop-rate estimate is flagged.
pub const LOW_POWER_EVENTS: u64 = 300;

/// Normal quantile used for every interval in this module.
pub const SIGMAS: f64 = 3.0;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("state space {states} exceeds guard {guard}")]
    GuardExceeded { states: u64, guard: u64 },
    #[error("{pairs} proposal pairs exceed the enumeration limit {limit}")]
    TooManyPairs { pairs: usize, limit: usize },
    #[error("size profile has length {got}, expected {expected}")]
    Profile { got: usize, expected: usize },
    #[error("runs must be at least 1")]
    NoRuns,
    #[error(transparent)]
    Rounding(#[from] RoundingError),
    #[error(transparent)]
    Greedy(#[from] GreedyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

// ---------------------------------------------------------------------------
// Exact adaptive optimum

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Action {
    Stop,
    Start { item: usize },
}

/// Optimal adaptive value with the memoized decision table.
#[derive(Clone, Debug)]
pub struct DpSolution {
    pub value: f64,
    /// First decision from the empty state.
    pub first_action: Action,
    /// `(per-partition code, elapsed) -> (value, action)`; code 0 is unused,
    /// otherwise `1 + member * (M + 1) + reward`.
    pub table: HashMap<(Vec<u16>, Size), (f64, Action)>,
}

struct Dp<'a> {
    instance: &'a Instance,
    rewards: Vec<Reward>,
    codes: Vec<u16>,
    memo: HashMap<(Vec<u16>, Size), (f64, Action)>,
    guard: u64,
}

impl Dp<'_> {
    fn value(&mut self, t: Size) -> Result<f64, VerifyError> {
        if let Some(&(v, _)) = self.memo.get(&(self.codes.clone(), t)) {
            return Ok(v);
        }
        let inst = self.instance;
        let mut best = (inst.objective().value(&self.rewards), Action::Stop);
        let levels = inst.reward_bound() as u16 + 1;
        for (p, part) in inst.partitions().iter().enumerate() {
            if self.codes[p] != 0 {
                continue;
            }
            for (m, &i) in part.members.iter().enumerate() {
                if t + inst.item(i).cap > inst.budget() {
                    continue;
                }
                let table = inst.table(i);
                let mut expected = 0.0;
                for (k, (s, prob)) in inst.item(i).sizes.iter().enumerate() {
                    let r = table.rewards[k];
                    self.rewards[i] = r;
                    self.codes[p] = 1 + m as u16 * levels + r as u16;
                    expected += prob * self.value(t + s)?;
                }
                self.rewards[i] = 0;
                self.codes[p] = 0;
                if expected > best.0 {
                    best = (expected, Action::Start { item: i });
                }
            }
        }
        if self.memo.len() as u64 >= self.guard {
            return Err(VerifyError::GuardExceeded { states: self.memo.len() as u64 + 1, guard: self.guard });
        }
        self.memo.insert((self.codes.clone(), t), best);
        Ok(best.0)
    }
}

/// Best expected objective over all adaptive policies.
///
/// A state is the outcome of each partition (unused, or which member ran
/// and what reward it produced) plus the elapsed slots. The nominal count
/// `(M + 2)^partitions * (B + 1)` is checked against `guard` up front and
/// the number of memoized states is capped by it as well.
pub fn optimal_adaptive_dp(instance: &Instance, guard: u64) -> Result<DpSolution, VerifyError> {
    let nominal = (instance.reward_bound() as f64 + 2.0).powi(instance.partitions().len() as i32) * (instance.budget() as f64 + 1.0);
    if nominal > guard as f64 {
        return Err(VerifyError::GuardExceeded { states: nominal.min(u64::MAX as f64) as u64, guard });
    }
    let mut dp = Dp {
        instance,
        rewards: vec![0; instance.n_items()],
        codes: vec![0; instance.partitions().len()],
        memo: HashMap::new(),
        guard,
    };
    let value = dp.value(0)?;
    let first_action = dp.memo[&(vec![0; instance.partitions().len()], 0)].1;
    Ok(DpSolution { value, first_action, table: dp.memo })
}

// ---------------------------------------------------------------------------
// Monte-Carlo simulation of the rounded policy

/// Aggregated statistics over many runs of the rounded policy.
#[derive(Clone, Debug)]
pub struct SimulationStats {
    pub runs: u64,
    pub value: Moments,
    /// Indexed by `item * B + slot - 1`.
    pub sampled: Vec<u64>,
    pub dropped: Vec<u64>,
    /// `blocked_by[pair * n + j]`: drops whose earliest blocker was item `j`.
    pub blocked_by: Vec<u64>,
    /// Runs whose trace broke a feasibility rule.
    pub infeasible_runs: u64,
    /// First few feasibility messages, for diagnostics.
    pub violation_samples: Vec<String>,
    n_items: usize,
    budget: usize,
}

impl SimulationStats {
    fn new(n_items: usize, budget: usize) -> Self {
        let pairs = n_items * budget;
        Self {
            runs: 0,
            value: Moments::default(),
            sampled: vec![0; pairs],
            dropped: vec![0; pairs],
            blocked_by: vec![0; pairs * n_items],
            infeasible_runs: 0,
            violation_samples: Vec::new(),
            n_items,
            budget,
        }
    }

    fn merge(&mut self, other: &SimulationStats) {
        self.runs += other.runs;
        self.value.merge(&other.value);
        for (a, b) in self.sampled.iter_mut().zip(&other.sampled) {
            *a += b;
        }
        for (a, b) in self.dropped.iter_mut().zip(&other.dropped) {
            *a += b;
        }
        for (a, b) in self.blocked_by.iter_mut().zip(&other.blocked_by) {
            *a += b;
        }
        self.infeasible_runs += other.infeasible_runs;
        for v in &other.violation_samples {
            if self.violation_samples.len() < 8 {
                self.violation_samples.push(v.clone());
            }
        }
    }

    fn pair(&self, item: usize, slot: Size) -> usize {
        item * self.budget + slot as usize - 1
    }

    pub fn sampled_count(&self, item: usize, slot: Size) -> u64 {
        self.sampled[self.pair(item, slot)]
    }

    pub fn dropped_count(&self, item: usize, slot: Size) -> u64 {
        self.dropped[self.pair(item, slot)]
    }

    pub fn blocked_count(&self, item: usize, slot: Size, blocker: usize) -> u64 {
        self.blocked_by[self.pair(item, slot) * self.n_items + blocker]
    }

    pub fn favg(&self) -> Estimate {
        self.value.estimate()
    }
}

/// Seed of run `r` under `seed`; independent of chunking and threads.
pub fn run_seed(seed: u64, r: u64) -> u64 {
    rng::derive_seed(seed, &[r])
}

/// Runs the rounded policy `runs` times, in parallel, with a fixed-order merge.
pub fn simulate(instance: &Instance, solution: &FractionalSolution, runs: u64, seed: u64) -> Result<SimulationStats, VerifyError> {
    if runs == 0 {
        return Err(VerifyError::NoRuns);
    }
    if solution.x_start().len() != instance.n_items() {
        return Err(RoundingError::Shape { got: solution.x_start().len(), expected: instance.n_items() }.into());
    }
    let plan = RoundingPlan::new(solution, solution.tol())?;
    let (n, b) = (instance.n_items(), instance.budget() as usize);
    let chunks = runs.div_ceil(CHUNK as u64);
    let parts: Vec<SimulationStats> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut st = SimulationStats::new(n, b);
            for r in c * CHUNK as u64..((c + 1) * CHUNK as u64).min(runs) {
                let trace = plan.run(instance, run_seed(seed, r));
                st.runs += 1;
                st.value.push(trace.value);
                for o in &trace.outcomes {
                    let k = st.pair(o.proposal.item, o.proposal.slot);
                    st.sampled[k] += 1;
                    if o.status == Status::Phantom {
                        st.dropped[k] += 1;
                        if let Some(bk) = o.blocker {
                            st.blocked_by[k * n + trace.outcomes[bk].proposal.item] += 1;
                        }
                    }
                }
                let v = rounding::trace_violations(&trace, instance);
                if !v.is_empty() {
                    st.infeasible_runs += 1;
                    if st.violation_samples.len() < 8 {
                        st.violation_samples.extend(v.into_iter().take(8 - st.violation_samples.len()));
                    }
                }
            }
            st
        })
        .collect();
    let mut total = SimulationStats::new(n, b);
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

/// Mean objective of the rounded policy with its standard error.
pub fn simulate_favg(instance: &Instance, solution: &FractionalSolution, runs: u64, seed: u64) -> Result<Estimate, VerifyError> {
    Ok(simulate(instance, solution, runs, seed)?.favg())
}

/// Wilson score interval for `k` successes in `n` trials at `z` sigmas.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let (nf, p) = (n as f64, k as f64 / n as f64);
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

fn binomial_stderr(k: u64, n: u64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let p = k as f64 / n as f64;
    (p * (1.0 - p) / n as f64).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DropEstimate {
    pub item: usize,
    pub slot: Size,
    pub start_prob: f64,
    pub sampled: u64,
    pub dropped: u64,
    pub rate: f64,
    pub stderr: f64,
    pub wilson_low: f64,
    pub wilson_high: f64,
    pub low_power: bool,
}

impl DropEstimate {
    /// `rate <= limit + 3 stderr`.
    pub fn within(&self, limit: f64) -> bool {
        self.rate <= limit + SIGMAS * self.stderr
    }
}

/// Drop rates from already collected statistics, for every pair with
/// start probability at least `min_prob`.
pub fn drop_rates(stats: &SimulationStats, solution: &FractionalSolution, min_prob: f64) -> Vec<DropEstimate> {
    let mut out = Vec::new();
    for (item, row) in solution.x_start().iter().enumerate() {
        for (k, &x) in row.iter().enumerate() {
            let slot = k as Size + 1;
            if x <= 0.0 || x < min_prob {
                continue;
            }
            let (n, d) = (stats.sampled_count(item, slot), stats.dropped_count(item, slot));
            let (lo, hi) = wilson_interval(d, n, SIGMAS);
            out.push(DropEstimate {
                item,
                slot,
                start_prob: x,
                sampled: n,
                dropped: d,
                rate: if n == 0 { 0.0 } else { d as f64 / n as f64 },
                stderr: binomial_stderr(d, n),
                wilson_low: lo,
                wilson_high: hi,
                low_power: n < LOW_POWER_EVENTS,
            });
        }
    }
    out
}

/// `Pr[(i, t) is phantom | (i, t) was sampled]` for every pair with
/// positive start probability.
pub fn crs_drop_rate(instance: &Instance, solution: &FractionalSolution, runs: u64, seed: u64) -> Result<Vec<DropEstimate>, VerifyError> {
    let stats = simulate(instance, solution, runs, seed)?;
    Ok(drop_rates(&stats, solution, 0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockerBound {
    pub blocker: usize,
    pub same_partition: bool,
    /// `Pr[j is the earliest blocker | (i, t) sampled]`.
    pub rate: f64,
    pub stderr: f64,
    /// Start mass of `j` that has finished before `t`.
    pub completed: f64,
    /// Start mass of `j` still running at `t`.
    pub running: f64,
    /// Start mass of `j` at `t` itself.
    pub same_slot: f64,
    pub bound: f64,
}

impl BlockerBound {
    pub fn within(&self) -> bool {
        self.rate <= self.bound + SIGMAS * self.stderr + 1e-12
    }
}

/// Per-blocker bound from the solution alone: all of `j`'s start mass before
/// `t` (finished or still running) plus its mass at `t`.
pub fn blocker_bounds(instance: &Instance, solution: &FractionalSolution, i: usize, t: Size, j: usize) -> (f64, f64, f64) {
    let sizes = &instance.item(j).sizes;
    let (mut completed, mut running) = (0.0, 0.0);
    for tp in 1..t {
        let x = solution.start_prob(j, tp);
        let done = 1.0 - sizes.tail(t - tp + 1);
        completed += x * done;
        running += x * (1.0 - done);
    }
    let same_slot = if j == i { 0.0 } else { solution.start_prob(j, t) };
    (completed, running, same_slot)
}

/// Measured blocking rate of every other item against its bound, for one pair.
pub fn drop_bound_decomposition(
    instance: &Instance,
    solution: &FractionalSolution,
    i: usize,
    t: Size,
    runs: u64,
    seed: u64,
) -> Result<Vec<BlockerBound>, VerifyError> {
    let stats = simulate(instance, solution, runs, seed)?;
    Ok(decompose(instance, solution, &stats, i, t))
}

/// [`drop_bound_decomposition`] on already collected statistics.
pub fn decompose(instance: &Instance, solution: &FractionalSolution, stats: &SimulationStats, i: usize, t: Size) -> Vec<BlockerBound> {
    let n = stats.sampled_count(i, t);
    (0..instance.n_items())
        .map(|j| {
            let k = stats.blocked_count(i, t, j);
            let (completed, running, same_slot) = blocker_bounds(instance, solution, i, t, j);
            BlockerBound {
                blocker: j,
                same_partition: instance.partition_of(j) == instance.partition_of(i),
                rate: if n == 0 { 0.0 } else { k as f64 / n as f64 },
                stderr: binomial_stderr(k, n),
                completed,
                running,
                same_slot,
                bound: completed + running + same_slot,
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Survival under a fixed size profile

fn check_profile(instance: &Instance, profile: &[Size]) -> Result<(), VerifyError> {
    if profile.len() != instance.n_items() {
        return Err(VerifyError::Profile { got: profile.len(), expected: instance.n_items() });
    }
    Ok(())
}

/// Probability that the earliest proposal of `i` is at `t`, times the
/// probability that no earlier proposal blocks it, split into factors.
/// Returns `(a_t, blocked_before_t, competitor_probs_at_t)` per slot.
fn survival_factors(instance: &Instance, solution: &FractionalSolution, profile: &[Size], i: usize) -> Vec<(f64, f64, Vec<f64>)> {
    let b = instance.budget();
    let part = instance.partition_of(i);
    let mut out = Vec::with_capacity(b as usize);
    let mut none_before = 1.0;
    for t in 1..=b {
        let x = solution.start_prob(i, t).clamp(0.0, 1.0);
        let a = x * none_before;
        none_before *= 1.0 - x;
        // canonical order: items ascending, slots ascending
        let mut clear = 1.0;
        let mut ties = Vec::new();
        for j in 0..instance.n_items() {
            if j == i || profile[j] == 0 {
                continue;
            }
            let first = if instance.partition_of(j) == part { 1 } else { (t + 1).saturating_sub(profile[j]).max(1) };
            for tp in first..t {
                clear *= 1.0 - solution.start_prob(j, tp).clamp(0.0, 1.0);
            }
            let xt = solution.start_prob(j, t).clamp(0.0, 1.0);
            if xt > 0.0 {
                ties.push(xt);
            }
        }
        out.push((a, clear, ties));
    }
    out
}

/// Product-form survival probability of item `i` when every other item `j`
/// runs with fixed size `profile[j]` (0 removes `j`).
///
/// Each competitor proposed in the same slot precedes `i` with probability
/// one half, contributing `1 - x/2`. This is exact when at most one
/// competitor can share a slot with `i` and a lower bound otherwise.
pub fn survival_closed_form(instance: &Instance, solution: &FractionalSolution, profile: &[Size], i: usize) -> Result<f64, VerifyError> {
    check_profile(instance, profile)?;
    Ok(survival_factors(instance, solution, profile, i)
        .into_iter()
        .map(|(a, clear, ties)| ties.iter().fold(a * clear, |acc, x| acc * (1.0 - 0.5 * x)))
        .sum())
}

/// Exact survival probability: same as [`survival_closed_form`] but the
/// same-slot term is `E[1 / (1 + K)]` for the number `K` of competitors
/// proposed in that slot.
pub fn survival_exact(instance: &Instance, solution: &FractionalSolution, profile: &[Size], i: usize) -> Result<f64, VerifyError> {
    check_profile(instance, profile)?;
    Ok(survival_factors(instance, solution, profile, i)
        .into_iter()
        .map(|(a, clear, ties)| {
            let mut dist = vec![1.0];
            for x in ties {
                let mut next = vec![0.0; dist.len() + 1];
                for (k, p) in dist.iter().enumerate() {
                    next[k] += p * (1.0 - x);
                    next[k + 1] += p * x;
                }
                dist = next;
            }
            a * clear * dist.iter().enumerate().map(|(k, p)| p / (k as f64 + 1.0)).sum::<f64>()
        })
        .sum())
}

/// Random profiles `u <= v` that agree at `item`. Every other entry is 0 or
/// a size in that item's support.
pub fn sample_profile_pair(instance: &Instance, item: usize, seed: u64) -> (Vec<Size>, Vec<Size>) {
    let mut r = rng::stream(seed, &[]);
    let mut u = Vec::with_capacity(instance.n_items());
    let mut v = Vec::with_capacity(instance.n_items());
    for j in 0..instance.n_items() {
        let mut options: Vec<Size> = instance.item(j).sizes.sizes().collect();
        if j != item {
            options.insert(0, 0);
        }
        let a = options[r.gen_range(0..options.len())];
        let b = if j == item {
            a
        } else {
            let larger: Vec<Size> = options.into_iter().filter(|&s| s >= a).collect();
            larger[r.gen_range(0..larger.len())]
        };
        u.push(a);
        v.push(b);
    }
    (u, v)
}

/// Empirical survival of `i` with sizes pinned by `profile`.
pub fn survival_monte_carlo(
    instance: &Instance,
    solution: &FractionalSolution,
    profile: &[Size],
    i: usize,
    trials: u64,
    seed: u64,
) -> Result<Estimate, VerifyError> {
    check_profile(instance, profile)?;
    if trials == 0 {
        return Err(VerifyError::NoRuns);
    }
    let plan = RoundingPlan::new(solution, solution.tol())?;
    let chunks = trials.div_ceil(CHUNK as u64);
    let counts: Vec<u64> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut hits = 0;
            for r in c * CHUNK as u64..((c + 1) * CHUNK as u64).min(trials) {
                let s = run_seed(seed, r);
                let proposals: Vec<Proposal> =
                    plan.sample(rng::derive_seed(s, &[0])).into_iter().filter(|p| p.item == i || profile[p.item] > 0).collect();
                let ordered = order_proposals(proposals, rng::derive_seed(s, &[1]));
                let trace = rounding::execute_with(&ordered, instance, |p| profile[p.item].max(1));
                hits += trace.outcomes.iter().any(|o| o.proposal.item == i && o.status == Status::Real) as u64;
            }
            hits
        })
        .collect();
    let hits: u64 = counts.iter().sum();
    let p = hits as f64 / trials as f64;
    Ok(Estimate { mean: p, stderr: (p * (1.0 - p) / trials as f64).sqrt(), samples: trials })
}

// ---------------------------------------------------------------------------
// Exhaustive policy value

/// Exact expected objective of the rounded policy by enumerating every
/// proposal set, every tie order and every size realization. Only usable
/// when at most `max_pairs` pairs have positive start probability.
pub fn enumerate_policy_value(instance: &Instance, solution: &FractionalSolution, max_pairs: usize) -> Result<f64, VerifyError> {
    let plan = RoundingPlan::new(solution, solution.tol())?;
    let pairs = plan.pairs();
    if pairs.len() > max_pairs {
        return Err(VerifyError::TooManyPairs { pairs: pairs.len(), limit: max_pairs });
    }
    let mut total = 0.0;
    for mask in 0u32..(1 << pairs.len()) {
        let mut prob = 1.0;
        let mut chosen = Vec::new();
        for (k, &(p, x)) in pairs.iter().enumerate() {
            if mask >> k & 1 == 1 {
                prob *= x;
                chosen.push(p);
            } else {
                prob *= 1.0 - x;
            }
        }
        if prob == 0.0 {
            continue;
        }
        let orders = tie_orders(&chosen);
        let per_order = prob / orders.len() as f64;
        for order in orders {
            total += per_order * expected_over_sizes(instance, &order);
        }
    }
    Ok(total)
}

/// Every order sorted by slot, permuting ties; all equally likely.
fn tie_orders(chosen: &[Proposal]) -> Vec<Vec<Proposal>> {
    let mut sorted = chosen.to_vec();
    sorted.sort();
    sorted.sort_by_key(|p| p.slot);
    let mut orders = vec![Vec::new()];
    let mut k = 0;
    while k < sorted.len() {
        let end = sorted[k..].iter().position(|p| p.slot != sorted[k].slot).map_or(sorted.len(), |e| k + e);
        let group = &sorted[k..end];
        let perms = permutations(group);
        orders = orders
            .into_iter()
            .flat_map(|o| {
                perms.iter().map(move |perm| {
                    let mut o = o.clone();
                    o.extend_from_slice(perm);
                    o
                })
            })
            .collect();
        k = end;
    }
    orders
}

fn permutations(items: &[Proposal]) -> Vec<Vec<Proposal>> {
    if items.len() <= 1 {
        return vec![items.to_vec()];
    }
    let mut out = Vec::new();
    for k in 0..items.len() {
        let mut rest = items.to_vec();
        let head = rest.remove(k);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

fn expected_over_sizes(instance: &Instance, order: &[Proposal]) -> f64 {
    let ordered = OrderedProposals::new(order.to_vec()).expect("sorted by slot");
    let dists: Vec<Vec<(Size, f64)>> = order.iter().map(|p| instance.item(p.item).sizes.iter().collect()).collect();
    let mut idx = vec![0; order.len()];
    let mut total = 0.0;
    loop {
        let prob: f64 = idx.iter().zip(&dists).map(|(&k, d)| d[k].1).product();
        let sizes: Vec<Size> = idx.iter().zip(&dists).map(|(&k, d)| d[k].0).collect();
        let mut pos = 0;
        let trace = rounding::execute_with(&ordered, instance, |_| {
            pos += 1;
            sizes[pos - 1]
        });
        total += prob * trace.value;
        let mut d = 0;
        loop {
            if d == idx.len() {
                return total;
            }
            idx[d] += 1;
            if idx[d] < dists[d].len() {
                break;
            }
            idx[d] = 0;
            d += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// End to end

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EndToEnd {
    pub favg: Estimate,
    /// Multilinear extension at the greedy output.
    pub fbar: Estimate,
    pub opt: f64,
    /// `favg / opt`; `None` when the optimum is zero.
    pub ratio: Option<f64>,
    pub ratio_stderr: f64,
    /// `favg / fbar`; `None` when `fbar` is zero.
    pub rounding_ratio: Option<f64>,
    pub infeasible_runs: u64,
}

/// Greedy, rounding and simulation compared against the exact optimum.
pub fn end_to_end_ratio(instance: &Instance, config: &GreedyConfig, runs: u64, seed: u64, dp_guard: u64) -> Result<EndToEnd, VerifyError> {
    let opt = optimal_adaptive_dp(instance, dp_guard)?.value;
    let system = build_constraints(instance);
    let greedy = cgreedy::continuous_greedy(instance, &system, config)?;
    let stats = simulate(instance, &greedy.solution, runs, seed)?;
    let favg = stats.favg();
    let xbar: Vec<f64> = greedy.solution.xbar().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let fbar = match objective::multilinear_exact(instance, &xbar, DEFAULT_ENUM_GUARD) {
        Ok(v) => Estimate::exact(v),
        Err(ObjectiveError::GuardExceeded { .. }) => objective::multilinear_estimate(instance, &xbar, runs, rng::derive_seed(seed, &[u64::MAX]))?,
        Err(e) => return Err(e.into()),
    };
    let (ratio, ratio_stderr) = if opt > 0.0 { (Some(favg.mean / opt), favg.stderr / opt) } else { (None, 0.0) };
    Ok(EndToEnd {
        favg,
        fbar,
        opt,
        ratio,
        ratio_stderr,
        rounding_ratio: (fbar.mean > 0.0).then(|| favg.mean / fbar.mean),
        infeasible_runs: stats.infeasible_runs,
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
    /// Recorded for information; never fails a report.
    Info,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationRow {
    pub property: String,
    pub instance: String,
    pub estimate: f64,
    pub stderr: f64,
    pub threshold: f64,
    pub verdict: Verdict,
    pub trials: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct VerificationReport {
    pub rows: Vec<VerificationRow>,
}

impl VerificationReport {
    pub fn push(&mut self, property: &str, instance: &str, estimate: f64, stderr: f64, threshold: f64, pass: bool, trials: u64) {
        self.rows.push(VerificationRow {
            property: property.into(),
            instance: instance.into(),
            estimate,
            stderr,
            threshold,
            verdict: if pass { Verdict::Pass } else { Verdict::Fail },
            trials,
        });
    }

    pub fn info(&mut self, property: &str, instance: &str, estimate: f64, stderr: f64, threshold: f64, trials: u64) {
        self.rows.push(VerificationRow {
            property: property.into(),
            instance: instance.into(),
            estimate,
            stderr,
            threshold,
            verdict: Verdict::Info,
            trials,
        });
    }

    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.verdict != Verdict::Fail)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{expand_with_caps, BaseItem, ExpandedItem, InstanceDraft, PartitionMatroid, RewardCurve, SizeDistribution};
    use crate::objective::ObjectiveSpec;
    use crate::polytope::check_feasibility;
    use std::collections::BTreeMap;

    type Spec<'a> = (&'a str, &'a str, Size, &'a [(Size, f64)], &'a [(Size, Reward)]);

    fn raw(items: &[Spec], budget: Size) -> Instance {
        let items: Vec<ExpandedItem> = items
            .iter()
            .map(|&(id, part, cap, sizes, rewards)| ExpandedItem {
                id: id.into(),
                base_id: id.into(),
                partition_id: part.into(),
                cap,
                sizes: SizeDistribution::new(sizes.iter().copied()).unwrap(),
                rewards: RewardCurve::new(rewards.iter().copied()),
            })
            .collect();
        let weights = items.iter().map(|i| (i.id.clone(), 1.0)).collect();
        Instance::new(InstanceDraft {
            matroid: PartitionMatroid::from_items(&items),
            items,
            budget,
            reward_bound: 3,
            objective: ObjectiveSpec::Additive { weights },
        })
        .unwrap()
    }

    fn base(id: &str, sizes: &[(Size, f64)], rewards: &[(Size, Reward)]) -> BaseItem {
        BaseItem { id: id.into(), sizes: SizeDistribution::new(sizes.iter().copied()).unwrap(), rewards: RewardCurve::new(rewards.iter().copied()) }
    }

    fn expanded(items: &[BaseItem], budget: Size, bound: Reward) -> Instance {
        let weights: BTreeMap<String, f64> = items.iter().map(|b| (b.id.clone(), 1.0)).collect();
        expand_with_caps(items, budget, bound, ObjectiveSpec::Additive { weights }).unwrap()
    }

    fn sol(inst: &Instance, x: Vec<Vec<f64>>) -> FractionalSolution {
        FractionalSolution::from_starts(&build_constraints(inst), &x).unwrap()
    }

    #[test]
    fn dp_examples() {
        let one = expanded(&[base("a", &[(1, 1.0)], &[(1, 2)])], 1, 2);
        assert_eq!(optimal_adaptive_dp(&one, DEFAULT_DP_GUARD).unwrap().value, 2.0);

        let two = expanded(&[base("a", &[(1, 0.5), (2, 0.5)], &[(1, 1), (2, 2)])], 2, 2);
        let dp = optimal_adaptive_dp(&two, DEFAULT_DP_GUARD).unwrap();
        assert!((dp.value - 1.5).abs() < 1e-12);
        assert_eq!(dp.first_action, Action::Start { item: two.index_of("a@2").unwrap() });

        let same = raw(&[("a", "p", 1, &[(1, 1.0)], &[(1, 2)]), ("b", "p", 1, &[(1, 1.0)], &[(1, 3)])], 2);
        assert_eq!(optimal_adaptive_dp(&same, DEFAULT_DP_GUARD).unwrap().value, 3.0);

        assert!(matches!(optimal_adaptive_dp(&two, 5), Err(VerifyError::GuardExceeded { .. })));
    }

    #[test]
    fn dp_adapts_to_realized_size() {
        // a finishes at 1 or 3; b (size 2) only fits when a finished early
        let inst = raw(&[("a", "a", 3, &[(1, 0.5), (3, 0.5)], &[(1, 1)]), ("b", "b", 2, &[(2, 1.0)], &[(1, 1)])], 3);
        let dp = optimal_adaptive_dp(&inst, DEFAULT_DP_GUARD).unwrap();
        // start b first (value 1) then a cannot fit (cap 3 > 1 remaining): 1.
        // start a: 1 + 0.5 * 1 = 1.5
        assert!((dp.value - 1.5).abs() < 1e-12);
    }

    #[test]
    fn zero_and_deterministic_simulation() {
        let inst = raw(&[("a", "a", 1, &[(1, 1.0)], &[(1, 2)])], 1);
        let zero = simulate_favg(&inst, &sol(&inst, vec![vec![0.0]]), 500, 1).unwrap();
        assert_eq!((zero.mean, zero.stderr), (0.0, 0.0));
        let det = simulate_favg(&inst, &sol(&inst, vec![vec![1.0]]), 500, 1).unwrap();
        assert_eq!((det.mean, det.stderr), (2.0, 0.0));
        assert!(matches!(simulate_favg(&inst, &sol(&inst, vec![vec![1.0]]), 0, 1), Err(VerifyError::NoRuns)));
    }

    #[test]
    fn simulation_is_deterministic() {
        let inst = raw(&[("a", "p", 2, &[(1, 0.5), (2, 0.5)], &[(1, 1), (2, 2)]), ("b", "q", 1, &[(1, 1.0)], &[(1, 1)])], 3);
        let s = sol(&inst, vec![vec![0.5, 0.3, 0.0], vec![0.2, 0.4, 0.4]]);
        let a = simulate(&inst, &s, 5000, 9).unwrap();
        let b = simulate(&inst, &s, 5000, 9).unwrap();
        assert_eq!(a.favg(), b.favg());
        assert_eq!(a.dropped, b.dropped);
    }

    #[test]
    fn simulation_matches_enumeration() {
        let inst = raw(&[("a", "p", 2, &[(1, 0.5), (2, 0.5)], &[(1, 1), (2, 2)]), ("b", "q", 1, &[(1, 1.0)], &[(1, 3)])], 2);
        let s = sol(&inst, vec![vec![0.5, 0.0], vec![0.5, 0.5]]);
        let exact = enumerate_policy_value(&inst, &s, 3).unwrap();
        let est = simulate_favg(&inst, &s, 100_000, 3).unwrap();
        assert!(est.within(exact, 3.0), "{est:?} vs {exact}");
        assert!(matches!(enumerate_policy_value(&inst, &s, 2), Err(VerifyError::TooManyPairs { .. })));
    }

    #[test]
    fn drop_rate_examples() {
        let lone = raw(&[("a", "a", 1, &[(1, 1.0)], &[(1, 1)])], 2);
        let r = crs_drop_rate(&lone, &sol(&lone, vec![vec![0.5, 0.0]]), 2000, 1).unwrap();
        assert_eq!(r[0].dropped, 0);

        let tie = raw(&[("a", "p", 1, &[(1, 1.0)], &[(1, 1)]), ("b", "p", 1, &[(1, 1.0)], &[(1, 1)])], 1);
        for d in crs_drop_rate(&tie, &sol(&tie, vec![vec![1.0], vec![1.0]]), 20_000, 2).unwrap() {
            assert!((d.rate - 0.5).abs() <= 3.0 * (0.25f64 / 20_000.0).sqrt());
            assert!(!d.low_power);
        }
    }

    #[test]
    fn decomposition_examples() {
        // b starts at 1 with certain size 2 and covers a's slot 2
        let inst = raw(&[("a", "a", 1, &[(1, 1.0)], &[(1, 1)]), ("b", "b", 2, &[(2, 1.0)], &[(2, 1)]), ("c", "c", 1, &[(1, 1.0)], &[(1, 1)])], 2);
        let s = sol(&inst, vec![vec![0.0, 0.5], vec![0.4, 0.0], vec![0.0, 0.0]]);
        let rows = drop_bound_decomposition(&inst, &s, 0, 2, 40_000, 5).unwrap();
        let b = &rows[1];
        assert!((b.rate - 0.4).abs() <= 3.0 * b.stderr);
        assert!((b.running - 0.4).abs() < 1e-12 && b.completed == 0.0);
        assert_eq!(rows[2].rate, 0.0);
        assert_eq!(rows[2].bound, 0.0);
        assert!(rows.iter().all(BlockerBound::within));
    }

    #[test]
    fn wilson_contains_the_rate() {
        let (lo, hi) = wilson_interval(50, 100, 3.0);
        assert!(lo < 0.5 && 0.5 < hi);
        assert_eq!(wilson_interval(0, 0, 3.0), (0.0, 1.0));
        assert!(wilson_interval(0, 10, 3.0).0 < 1e-12);
    }

    fn survival_instance() -> Instance {
        raw(
            &[
                ("a", "p", 1, &[(1, 1.0)], &[(1, 1)]),
                ("b", "q", 3, &[(1, 0.5), (3, 0.5)], &[(1, 1)]),
                ("c", "p", 2, &[(2, 1.0)], &[(1, 1)]),
            ],
            3,
        )
    }

    #[test]
    fn survival_reduces_to_start_mass_when_alone() {
        let inst = survival_instance();
        let s = sol(&inst, vec![vec![0.3, 0.4, 0.2], vec![0.0; 3], vec![0.0; 3]]);
        let expected = 0.3 + 0.7 * 0.4 + 0.7 * 0.6 * 0.2;
        for profile in [[1, 0, 0], [1, 3, 2]] {
            assert!((survival_closed_form(&inst, &s, &profile, 0).unwrap() - expected).abs() < 1e-15);
            assert!((survival_exact(&inst, &s, &profile, 0).unwrap() - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn survival_closed_form_matches_simulation_with_single_competitors() {
        let inst = survival_instance();
        let s = sol(&inst, vec![vec![0.3, 0.3, 0.2], vec![0.25, 0.25, 0.0], vec![0.2, 0.2, 0.0]]);
        for profile in [[1, 1, 2], [1, 3, 2], [1, 3, 0], [1, 0, 2]] {
            let closed = survival_closed_form(&inst, &s, &profile, 0).unwrap();
            let exact = survival_exact(&inst, &s, &profile, 0).unwrap();
            let mc = survival_monte_carlo(&inst, &s, &profile, 0, 100_000, 4).unwrap();
            assert!(mc.within(exact, 3.0), "{profile:?}: {mc:?} vs {exact}");
            assert!(closed <= exact + 1e-15);
        }
    }

    #[test]
    fn partition_and_slot_mass_can_combine_past_half() {
        // j and i share a partition, k competes for slot 2; doubling stays feasible
        let inst = raw(
            &[("i", "p", 1, &[(1, 1.0)], &[(1, 1)]), ("j", "p", 1, &[(1, 1.0)], &[(1, 1)]), ("k", "q", 1, &[(1, 1.0)], &[(1, 1)])],
            2,
        );
        let s = sol(&inst, vec![vec![0.0, 0.05], vec![0.45, 0.0], vec![0.0, 0.45]]);
        let system = build_constraints(&inst);
        assert!(check_feasibility(&system, s.scaled(2.0).values(), 1e-9).unwrap().is_empty());
        let survive = survival_exact(&inst, &s, &[1, 1, 1], 0).unwrap() / 0.05;
        assert!((1.0 - survive - (1.0 - 0.55 * 0.775)).abs() < 1e-12);
        let stats = simulate(&inst, &s, 200_000, 3).unwrap();
        let d = drop_rates(&stats, &s, 0.01).into_iter().find(|d| d.item == 0 && d.slot == 2).unwrap();
        assert!(d.wilson_low > 0.5, "{d:?}");
    }

    #[test]
    fn survival_is_monotone_in_profile() {
        let inst = survival_instance();
        let s = sol(&inst, vec![vec![0.3, 0.3, 0.2], vec![0.25, 0.25, 0.0], vec![0.2, 0.2, 0.0]]);
        let profiles = [[1, 0, 0], [1, 1, 0], [1, 1, 2], [1, 3, 2]];
        for w in profiles.windows(2) {
            assert!(survival_closed_form(&inst, &s, &w[0], 0).unwrap() >= survival_closed_form(&inst, &s, &w[1], 0).unwrap());
            assert!(survival_exact(&inst, &s, &w[0], 0).unwrap() >= survival_exact(&inst, &s, &w[1], 0).unwrap());
        }
    }

    #[test]
    fn profile_pairs_are_ordered() {
        let inst = survival_instance();
        for seed in 0..50 {
            let (u, v) = sample_profile_pair(&inst, 1, seed);
            assert_eq!(u[1], v[1]);
            assert!(u[1] >= 1);
            assert!(u.iter().zip(&v).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn end_to_end_single_item() {
        let inst = expanded(&[base("a", &[(1, 1.0)], &[(1, 1)])], 1, 1);
        let cfg = GreedyConfig { stopping_time: 0.5, step: 0.1, marginals: cgreedy::Marginals::Exact { guard: 8 }, seed: 1 };
        let e = end_to_end_ratio(&inst, &cfg, 20_000, 2, DEFAULT_DP_GUARD).unwrap();
        assert_eq!(e.opt, 1.0);
        assert!(e.ratio.unwrap() >= 0.1967);
        assert!((e.fbar.mean - 0.5).abs() < 1e-12);
        assert_eq!(e.infeasible_runs, 0);
    }

    #[test]
    fn report_verdicts() {
        let mut r = VerificationReport::default();
        r.push("x", "i", 1.0, 0.0, 1.0, true, 1);
        r.info("y", "i", 0.1, 0.0, 0.35, 1);
        assert!(r.passed());
        r.push("z", "i", 1.0, 0.0, 0.5, false, 1);
        assert!(!r.passed());
    }

    mod props {
        use super::*;
        use crate::polytope::solve_weighted;
        use proptest::prelude::*;

    fn arb_instance() -> impl Strategy<Value = Instance> {
        (1usize..=3, 1u32..=4, 1u32..=3, 0usize..3, any::<bool>(), any::<u64>()).prop_map(|(n_base, budget, reward_bound, f, deterministic, seed)| {
            let family = crate::gen::ObjectiveFamily::ALL[f];
            crate::gen::random_instance(&crate::gen::RandomParams { n_base, budget, reward_bound, family, deterministic }, seed).unwrap()
        })
    }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn no_policy_beats_the_optimum(inst in arb_instance(), raw in proptest::collection::vec(0.0f64..3.0, 12), scale in 0.05f64..=0.5) {
                let sys = build_constraints(&inst);
                let w: Vec<f64> = (0..inst.n_items()).map(|i| raw[i % raw.len()]).collect();
                let sol = solve_weighted(&sys, &w).unwrap().scaled(scale);
                let policy = enumerate_policy_value(&inst, &sol, 10);
                prop_assume!(policy.is_ok());
                let opt = optimal_adaptive_dp(&inst, DEFAULT_DP_GUARD).unwrap().value;
                prop_assert!(policy.unwrap() <= opt + 1e-9);
            }

            #[test]
            fn simulated_runs_stay_feasible(inst in arb_instance(), raw in proptest::collection::vec(0.0f64..3.0, 12), seed in any::<u64>()) {
                let sys = build_constraints(&inst);
                let w: Vec<f64> = (0..inst.n_items()).map(|i| raw[i % raw.len()]).collect();
                let sol = solve_weighted(&sys, &w).unwrap().scaled(0.5);
                let stats = simulate(&inst, &sol, 2000, seed).unwrap();
                prop_assert_eq!(stats.infeasible_runs, 0, "{:?}", stats.violation_samples);
            }
        }
    }
}
