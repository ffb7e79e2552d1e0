//! Objective families over reward vectors, the lifted set function and
//! its multilinear extension (exact and sampled), and an exhaustive
//! checker for monotonicity and lattice-submodularity.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ExpandedItem, Instance, Reward, Violation};
use crate::rng;

/// Largest number of items with more than one possible outcome that the
/// exact evaluators will enumerate.
pub const DEFAULT_ENUM_GUARD: usize = 12;

/// Default number of vector pairs scanned exhaustively by the checker.
pub const DEFAULT_PAIR_GUARD: usize = 1_000_000;

pub(crate) const CHUNK: usize = 1024;
const EVAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("reward vector has length {got}, expected {expected}")]
    Length { got: usize, expected: usize },
    #[error("component {index} = {value} is outside [0, {bound}]")]
    OutOfDomain { index: usize, value: Reward, bound: Reward },
    #[error("exact enumeration over {items} items exceeds the guard of {guard}; use the sampling estimators")]
    GuardExceeded { items: usize, guard: usize },
    #[error("inclusion probability {value} for item {index} is outside [0, 1]")]
    BadProbability { index: usize, value: f64 },
}

/// Serialized objective, with parameters keyed by base item id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "snake_case")]
pub enum ObjectiveSpec {
    /// `f(r) = sum_i w_i r_i`.
    Additive { weights: BTreeMap<String, f64> },
    /// `f(r) = g(sum_i w_i r_i)` for a piecewise-linear `g` through
    /// `breakpoints`, extended past the last breakpoint with the last slope.
    ConcaveOfSum { weights: BTreeMap<String, f64>, breakpoints: Vec<(f64, f64)> },
    /// `f(r) = weight(union_i chains[i][r_i])`; level `l` past the end of a
    /// chain uses its last set.
    NestedCoverage { elements: BTreeMap<String, f64>, chains: BTreeMap<String, Vec<Vec<String>>> },
}

impl ObjectiveSpec {
    pub fn family(&self) -> &'static str {
        match self {
            ObjectiveSpec::Additive { .. } => "additive",
            ObjectiveSpec::ConcaveOfSum { .. } => "concave_of_sum",
            ObjectiveSpec::NestedCoverage { .. } => "nested_coverage",
        }
    }

    pub(crate) fn issues(&self, base_ids: &BTreeSet<&str>) -> Vec<Violation> {
        let mut out = Vec::new();
        let v = |field, detail: String| Violation { subject: "objective".into(), field, detail };
        let check_weights = |weights: &BTreeMap<String, f64>, out: &mut Vec<Violation>| {
            for id in base_ids {
                match weights.get(*id) {
                    None => out.push(v("weights", format!("no weight for `{id}`"))),
                    Some(w) if !(w.is_finite() && *w >= 0.0) => {
                        out.push(v("weights", format!("weight {w} for `{id}` must be finite and >= 0")))
                    }
                    _ => {}
                }
            }
        };
        match self {
            ObjectiveSpec::Additive { weights } => check_weights(weights, &mut out),
            ObjectiveSpec::ConcaveOfSum { weights, breakpoints } => {
                check_weights(weights, &mut out);
                if breakpoints.is_empty() {
                    out.push(v("breakpoints", "at least one breakpoint required".into()));
                } else if breakpoints[0].0 != 0.0 {
                    out.push(v("breakpoints", "first breakpoint must be at x = 0".into()));
                }
                if breakpoints.windows(2).any(|w| !(w[0].0 < w[1].0)) {
                    out.push(v("breakpoints", "x coordinates must be strictly increasing".into()));
                }
                if breakpoints.iter().any(|&(x, y)| !x.is_finite() || !y.is_finite() || y < 0.0) {
                    out.push(v("breakpoints", "values must be finite and non-negative".into()));
                }
            }
            ObjectiveSpec::NestedCoverage { elements, chains } => {
                for (e, w) in elements {
                    if !(w.is_finite() && *w >= 0.0) {
                        out.push(v("elements", format!("weight {w} for element `{e}` must be finite and >= 0")));
                    }
                }
                for id in base_ids {
                    let Some(chain) = chains.get(*id) else {
                        out.push(v("chains", format!("no chain for `{id}`")));
                        continue;
                    };
                    for (level, set) in chain.iter().enumerate() {
                        for e in set {
                            if !elements.contains_key(e) {
                                out.push(v("chains", format!("`{id}` level {level}: unknown element `{e}`")));
                            }
                        }
                        if level > 0 && !chain[level - 1].iter().all(|e| set.contains(e)) {
                            out.push(v("chains", format!("`{id}` level {level} does not contain level {}", level - 1)));
                        }
                    }
                }
            }
        }
        out
    }
}

/// Non-decreasing piecewise-linear function on `[0, inf)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseLinear {
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn new(points: &[(f64, f64)]) -> Self {
        Self { xs: points.iter().map(|p| p.0).collect(), ys: points.iter().map(|p| p.1).collect() }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.xs.len();
        if n == 1 {
            return self.ys[0];
        }
        // index of the segment [xs[k], xs[k+1]] holding x, clamped to the ends
        let k = match self.xs.partition_point(|&b| b <= x) {
            0 => 0,
            p => (p - 1).min(n - 2),
        };
        let slope = (self.ys[k + 1] - self.ys[k]) / (self.xs[k + 1] - self.xs[k]);
        self.ys[k] + slope * (x - self.xs[k])
    }
}

/// An objective resolved onto the dense item order of an instance.
#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    Additive { weights: Vec<f64> },
    ConcaveOfSum { weights: Vec<f64>, curve: PiecewiseLinear },
    NestedCoverage { element_weights: Vec<f64>, levels: Vec<Vec<Vec<u64>>> },
}

impl Objective {
    pub(crate) fn resolve(spec: &ObjectiveSpec, items: &[ExpandedItem]) -> Result<Self, Vec<Violation>> {
        let base_ids: BTreeSet<&str> = items.iter().map(|it| it.base_id.as_str()).collect();
        let issues = spec.issues(&base_ids);
        if !issues.is_empty() {
            return Err(issues);
        }
        Ok(match spec {
            ObjectiveSpec::Additive { weights } => {
                Objective::Additive { weights: items.iter().map(|it| weights[&it.base_id]).collect() }
            }
            ObjectiveSpec::ConcaveOfSum { weights, breakpoints } => Objective::ConcaveOfSum {
                weights: items.iter().map(|it| weights[&it.base_id]).collect(),
                curve: PiecewiseLinear::new(breakpoints),
            },
            ObjectiveSpec::NestedCoverage { elements, chains } => {
                let ids: BTreeMap<&str, usize> = elements.keys().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
                let sets: Vec<Vec<Vec<usize>>> = items
                    .iter()
                    .map(|it| {
                        chains[&it.base_id].iter().map(|set| set.iter().map(|e| ids[e.as_str()]).collect()).collect()
                    })
                    .collect();
                Objective::coverage(elements.values().copied().collect(), sets)
            }
        })
    }

    /// Coverage objective from element weights and, per item, the element
    /// indices covered at each reward level.
    pub fn coverage(element_weights: Vec<f64>, sets: Vec<Vec<Vec<usize>>>) -> Self {
        let words = element_weights.len().div_ceil(64).max(1);
        let levels = sets
            .into_iter()
            .map(|chain| {
                chain
                    .into_iter()
                    .map(|set| {
                        let mut mask = vec![0u64; words];
                        for e in set {
                            mask[e / 64] |= 1 << (e % 64);
                        }
                        mask
                    })
                    .collect()
            })
            .collect();
        Objective::NestedCoverage { element_weights, levels }
    }

    pub fn n_items(&self) -> usize {
        match self {
            Objective::Additive { weights } | Objective::ConcaveOfSum { weights, .. } => weights.len(),
            Objective::NestedCoverage { levels, .. } => levels.len(),
        }
    }

    /// `f(r)` without domain checks.
    pub fn value(&self, r: &[Reward]) -> f64 {
        match self {
            Objective::Additive { weights } => weights.iter().zip(r).map(|(w, &x)| w * x as f64).sum(),
            Objective::ConcaveOfSum { weights, curve } => {
                curve.eval(weights.iter().zip(r).map(|(w, &x)| w * x as f64).sum())
            }
            Objective::NestedCoverage { element_weights, levels } => {
                let words = element_weights.len().div_ceil(64).max(1);
                let mut covered = vec![0u64; words];
                for (chain, &x) in levels.iter().zip(r) {
                    if chain.is_empty() {
                        continue;
                    }
                    let set = &chain[(x as usize).min(chain.len() - 1)];
                    for (c, s) in covered.iter_mut().zip(set) {
                        *c |= s;
                    }
                }
                element_weights
                    .iter()
                    .enumerate()
                    .filter(|(e, _)| covered[e / 64] >> (e % 64) & 1 == 1)
                    .map(|(_, w)| w)
                    .sum()
            }
        }
    }

    /// `f(r)`, rejecting vectors outside `[0, bound]^n`.
    pub fn evaluate(&self, r: &[Reward], bound: Reward) -> Result<f64, ObjectiveError> {
        if r.len() != self.n_items() {
            return Err(ObjectiveError::Length { got: r.len(), expected: self.n_items() });
        }
        if let Some((index, &value)) = r.iter().enumerate().find(|(_, &x)| x > bound) {
            return Err(ObjectiveError::OutOfDomain { index, value, bound });
        }
        Ok(self.value(r))
    }
}

/// A Monte-Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: u64,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Self { mean: value, stderr: 0.0, samples: 0 }
    }

    pub fn within(&self, target: f64, sigmas: f64) -> bool {
        (self.mean - target).abs() <= sigmas * self.stderr
    }
}

/// Streaming mean/variance accumulator (Welford), mergeable in a fixed order.
#[derive(Clone, Copy, Debug, Default)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let d = other.mean - self.mean;
        self.mean += d * other.n as f64 / n as f64;
        self.m2 += other.m2 + d * d * self.n as f64 * other.n as f64 / n as f64;
        self.n = n;
    }

    pub fn estimate(&self) -> Estimate {
        let stderr = if self.n > 1 { (self.m2.max(0.0) / (self.n - 1) as f64 / self.n as f64).sqrt() } else { 0.0 };
        Estimate { mean: self.mean, stderr, samples: self.n }
    }
}

/// Splits `samples` into fixed chunks, each with its own derived stream,
/// and returns the per-chunk results in chunk order.
pub(crate) fn chunked<T: Send>(samples: u64, seed: u64, f: impl Fn(&mut rng::StreamRng, usize) -> T + Sync) -> Vec<T> {
    let chunks = samples.div_ceil(CHUNK as u64);
    (0..chunks)
        .into_par_iter()
        .map(|c| {
            let len = (samples - c * CHUNK as u64).min(CHUNK as u64) as usize;
            let mut r = rng::stream(seed, &[c]);
            f(&mut r, len)
        })
        .collect()
}

fn check_xbar(instance: &Instance, xbar: &[f64]) -> Result<(), ObjectiveError> {
    if xbar.len() != instance.n_items() {
        return Err(ObjectiveError::Length { got: xbar.len(), expected: instance.n_items() });
    }
    match xbar.iter().position(|x| !(0.0..=1.0).contains(x)) {
        Some(index) => Err(ObjectiveError::BadProbability { index, value: xbar[index] }),
        None => Ok(()),
    }
}

/// Expectation of `f` over independent per-item outcome distributions.
fn enumerate(instance: &Instance, outcomes: &[Vec<(Reward, f64)>], guard: usize) -> Result<f64, ObjectiveError> {
    let free: Vec<usize> = (0..outcomes.len()).filter(|&i| outcomes[i].len() > 1).collect();
    if free.len() > guard {
        return Err(ObjectiveError::GuardExceeded { items: free.len(), guard });
    }
    let f = instance.objective();
    let mut r: Vec<Reward> = outcomes.iter().map(|o| o[0].0).collect();
    let mut digit = vec![0usize; free.len()];
    let mut total = 0.0;
    loop {
        let p: f64 = free.iter().zip(&digit).map(|(&i, &d)| outcomes[i][d].1).product();
        for (&i, &d) in free.iter().zip(&digit) {
            r[i] = outcomes[i][d].0;
        }
        let fixed: f64 = (0..outcomes.len()).filter(|&i| outcomes[i].len() == 1).map(|i| outcomes[i][0].1).product();
        total += p * fixed * f.value(&r);
        // odometer step
        let mut k = 0;
        loop {
            if k == free.len() {
                return Ok(total);
            }
            digit[k] += 1;
            if digit[k] < outcomes[free[k]].len() {
                break;
            }
            digit[k] = 0;
            k += 1;
        }
    }
}

/// `E[f(r)]` where items in `set` draw their reward distribution and all
/// other items are pinned to 0.
pub fn lifted_value(instance: &Instance, set: &[usize], guard: usize) -> Result<f64, ObjectiveError> {
    let mut outcomes = vec![vec![(0, 1.0)]; instance.n_items()];
    for &i in set {
        outcomes[i] = instance.table(i).reward_levels.clone();
    }
    enumerate(instance, &outcomes, guard)
}

/// Exact multilinear extension of the lifted set function at `xbar`.
///
/// Item `i` is present with probability `xbar[i]` and then draws its
/// reward; the expectation is taken over the product of these per-item
/// mixtures, which equals the sum over all subsets weighted by their
/// inclusion probabilities.
pub fn multilinear_exact(instance: &Instance, xbar: &[f64], guard: usize) -> Result<f64, ObjectiveError> {
    check_xbar(instance, xbar)?;
    let outcomes: Vec<Vec<(Reward, f64)>> = xbar
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            if x == 0.0 {
                return vec![(0, 1.0)];
            }
            let mut o: Vec<(Reward, f64)> =
                instance.table(i).reward_levels.iter().map(|&(r, q)| (r, x * q)).collect();
            if x < 1.0 {
                match o.iter_mut().find(|(r, _)| *r == 0) {
                    Some(z) => z.1 += 1.0 - x,
                    None => o.insert(0, (0, 1.0 - x)),
                }
            }
            o
        })
        .collect();
    enumerate(instance, &outcomes, guard)
}

#[inline]
fn draw_world(instance: &Instance, xbar: &[f64], rng: &mut rng::StreamRng, r: &mut [Reward]) {
    for (i, x) in xbar.iter().enumerate() {
        r[i] = if rng.gen::<f64>() < *x { instance.table(i).sample_reward(rng.gen()) } else { 0 };
    }
}

/// Unbiased sampled estimate of the multilinear extension at `xbar`.
pub fn multilinear_estimate(instance: &Instance, xbar: &[f64], samples: u64, seed: u64) -> Result<Estimate, ObjectiveError> {
    check_xbar(instance, xbar)?;
    let parts = chunked(samples, seed, |rng, len| {
        let mut m = Moments::default();
        let mut r = vec![0; xbar.len()];
        for _ in 0..len {
            draw_world(instance, xbar, rng, &mut r);
            m.push(instance.objective().value(&r));
        }
        m
    });
    Ok(fold(&parts).estimate())
}

fn fold(parts: &[Moments]) -> Moments {
    parts.iter().fold(Moments::default(), |mut acc, m| {
        acc.merge(m);
        acc
    })
}

/// Marginal gains of every item at `xbar`, estimated on shared worlds.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginalPass {
    /// Estimate of `F(xbar v 1_i) - F(xbar)` per item.
    pub weights: Vec<Estimate>,
    /// Estimate of `F(xbar)` from the same worlds.
    pub value: Estimate,
}

/// Paired estimates of `F(xbar v 1_i) - F(xbar)` for all items at once.
///
/// Each sample draws one world (inclusion flag and reward for every item).
/// For item `i` the "with" side forces `i` in at its drawn reward; when `i`
/// is already present the difference is exactly zero.
pub fn marginal_weights(instance: &Instance, xbar: &[f64], samples: u64, seed: u64) -> Result<MarginalPass, ObjectiveError> {
    check_xbar(instance, xbar)?;
    let n = xbar.len();
    let f = instance.objective();
    let parts = chunked(samples, seed, |rng, len| {
        let mut per_item = vec![Moments::default(); n];
        let mut base = Moments::default();
        let mut r = vec![0; n];
        let mut drawn = vec![0; n];
        let mut present = vec![false; n];
        for _ in 0..len {
            for i in 0..n {
                present[i] = rng.gen::<f64>() < xbar[i];
                drawn[i] = instance.table(i).sample_reward(rng.gen());
                r[i] = if present[i] { drawn[i] } else { 0 };
            }
            let without = f.value(&r);
            base.push(without);
            for i in 0..n {
                if present[i] {
                    per_item[i].push(0.0);
                } else {
                    r[i] = drawn[i];
                    per_item[i].push(f.value(&r) - without);
                    r[i] = 0;
                }
            }
        }
        (per_item, base)
    });
    let mut weights = vec![Moments::default(); n];
    let mut value = Moments::default();
    for (w, b) in &parts {
        for (acc, m) in weights.iter_mut().zip(w) {
            acc.merge(m);
        }
        value.merge(b);
    }
    Ok(MarginalPass { weights: weights.iter().map(Moments::estimate).collect(), value: value.estimate() })
}

/// Paired estimate of the marginal gain of one item.
pub fn marginal_weight_estimate(
    instance: &Instance,
    xbar: &[f64],
    item: usize,
    samples: u64,
    seed: u64,
) -> Result<Estimate, ObjectiveError> {
    Ok(marginal_weights(instance, xbar, samples, seed)?.weights[item])
}

/// Exact marginal gains via [`multilinear_exact`].
pub fn marginal_weights_exact(instance: &Instance, xbar: &[f64], guard: usize) -> Result<(Vec<f64>, f64), ObjectiveError> {
    let base = multilinear_exact(instance, xbar, guard)?;
    let mut bumped = xbar.to_vec();
    let mut out = Vec::with_capacity(xbar.len());
    for i in 0..xbar.len() {
        if xbar[i] == 1.0 {
            out.push(0.0);
            continue;
        }
        bumped[i] = 1.0;
        out.push(multilinear_exact(instance, &bumped, guard)? - base);
        bumped[i] = xbar[i];
    }
    Ok((out, base))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LatticeProperty {
    Monotone,
    LatticeSubmodular,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatticeViolation {
    pub property: LatticeProperty,
    pub u: Vec<Reward>,
    pub v: Vec<Reward>,
    /// By how much the inequality fails.
    pub slack: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatticeReport {
    pub exhaustive: bool,
    pub pairs_checked: u64,
    pub violations: Vec<LatticeViolation>,
}

impl LatticeReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

fn decode(mut code: u64, n: usize, base: u64) -> Vec<Reward> {
    (0..n)
        .map(|_| {
            let d = (code % base) as Reward;
            code /= base;
            d
        })
        .collect()
}

/// Scans pairs `(u, v)` in `[0, bound]^n` for violations of
/// `u <= v => f(u) <= f(v)` and `f(u) + f(v) >= f(u ^ v) + f(u v v)`.
///
/// All pairs are checked when there are at most `pair_guard` of them;
/// otherwise `pair_guard` random pairs are drawn from a fixed seed.
pub fn check_monotone_lattice_submodular(f: &Objective, n: usize, bound: Reward, pair_guard: usize) -> LatticeReport {
    let base = bound as u64 + 1;
    let points = base.checked_pow(n as u32).unwrap_or(u64::MAX);
    let exhaustive = points.checked_mul(points).is_some_and(|p| p <= pair_guard as u64);
    let mut violations = Vec::new();
    let mut check = |u: &[Reward], v: &[Reward]| {
        let (fu, fv) = (f.value(u), f.value(v));
        let tol = EVAL_TOL * (1.0 + fu.abs() + fv.abs());
        if u.iter().zip(v).all(|(a, b)| a <= b) && fu > fv + tol {
            violations.push(LatticeViolation { property: LatticeProperty::Monotone, u: u.to_vec(), v: v.to_vec(), slack: fu - fv });
        }
        let meet: Vec<Reward> = u.iter().zip(v).map(|(a, b)| *a.min(b)).collect();
        let join: Vec<Reward> = u.iter().zip(v).map(|(a, b)| *a.max(b)).collect();
        let gap = f.value(&meet) + f.value(&join) - fu - fv;
        if gap > tol {
            violations.push(LatticeViolation {
                property: LatticeProperty::LatticeSubmodular,
                u: u.to_vec(),
                v: v.to_vec(),
                slack: gap,
            });
        }
    };
    let mut pairs = 0u64;
    if exhaustive {
        let all: Vec<Vec<Reward>> = (0..points).map(|c| decode(c, n, base)).collect();
        for u in &all {
            for v in &all {
                check(u, v);
                pairs += 1;
            }
        }
    } else {
        let mut r = rng::stream(0x5eed, &[n as u64, bound as u64]);
        for _ in 0..pair_guard {
            let u: Vec<Reward> = (0..n).map(|_| r.gen_range(0..=bound)).collect();
            let v: Vec<Reward> = (0..n).map(|_| r.gen_range(0..=bound)).collect();
            check(&u, &v);
            let join: Vec<Reward> = u.iter().zip(&v).map(|(a, b)| *a.max(b)).collect();
            check(&u, &join);
            pairs += 2;
        }
    }
    LatticeReport { exhaustive, pairs_checked: pairs, violations }
}
