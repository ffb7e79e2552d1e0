//! Stochastic continuous greedy over the relaxation.
//!
//! Each iteration estimates the marginal gain of every item at the current
//! inclusion probabilities, solves the LP with those gains as weights and
//! moves a step of size `delta` towards the LP vertex. After `b / delta`
//! steps the point lies in `b` times the polytope.

use serde::Serialize;
use thiserror::Error;

use crate::model::Instance;
use crate::objective::{self, Estimate, ObjectiveError, DEFAULT_ENUM_GUARD};
use crate::polytope::{self, ConstraintSystem, FractionalSolution, PolytopeError};
use crate::rng;

/// Default number of worlds per marginal-weight pass.
pub const DEFAULT_SAMPLES: u64 = 2000;

/// Ratio below which a greedy value is flagged in the quality report.
pub const QUALITY_FLAG: f64 = 0.35;

#[derive(Debug, Error)]
pub enum GreedyError {
    #[error("invalid greedy configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// How per-iteration marginal gains are obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum Marginals {
    /// Paired Monte-Carlo estimates on shared worlds.
    Sampled { samples: u64 },
    /// Exact enumeration; fails if more than `guard` items are uncertain.
    Exact { guard: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GreedyConfig {
    pub stopping_time: f64,
    pub step: f64,
    pub marginals: Marginals,
    pub seed: u64,
}

impl GreedyConfig {
    /// `b = 1/2`, the largest step `<= min(0.05, 1/(2 n^3))` that divides
    /// `b` evenly, and sampled marginals.
    pub fn default_for(n_items: usize, seed: u64) -> Self {
        let b = 0.5;
        Self { stopping_time: b, step: snap_step(b, step_guard(n_items)), marginals: Marginals::Sampled { samples: DEFAULT_SAMPLES }, seed }
    }

    pub fn iterations(&self) -> usize {
        (self.stopping_time / self.step).round() as usize
    }

    pub fn validate(&self) -> Result<(), GreedyError> {
        let b = self.stopping_time;
        if !(b > 0.0 && b <= 1.0) {
            return Err(GreedyError::Config(format!("stopping time {b} must lie in (0, 1]")));
        }
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(GreedyError::Config(format!("step {} must be positive", self.step)));
        }
        let k = self.iterations();
        if k == 0 || (k as f64 * self.step - b).abs() > 1e-12 {
            return Err(GreedyError::Config(format!("step {} does not divide stopping time {b}", self.step)));
        }
        if let Marginals::Sampled { samples: 0 } = self.marginals {
            return Err(GreedyError::Config("sampled marginals need at least one sample".into()));
        }
        Ok(())
    }
}

/// `min(0.05, 1/(2 n^3))`.
pub fn step_guard(n_items: usize) -> f64 {
    let n = n_items.max(1) as f64;
    (0.5 / (n * n * n)).min(0.05)
}

/// The largest `b / k` not exceeding `max_step`.
pub fn snap_step(b: f64, max_step: f64) -> f64 {
    b / (b / max_step).ceil()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub weight_norm: f64,
    /// Value of the multilinear extension at the start of the iteration.
    pub objective_estimate: f64,
    pub objective_stderr: f64,
}

#[derive(Clone, Debug)]
pub struct GreedyOutput {
    pub solution: FractionalSolution,
    pub trace: Vec<IterationRow>,
    pub notices: Vec<String>,
    pub config: GreedyConfig,
}

pub fn continuous_greedy(instance: &Instance, system: &ConstraintSystem, config: &GreedyConfig) -> Result<GreedyOutput, GreedyError> {
    continuous_greedy_with(instance, system, config, |_, _| {})
}

/// As [`continuous_greedy`], calling `observe(k, y)` after every step with
/// the accumulated point.
pub fn continuous_greedy_with(
    instance: &Instance,
    system: &ConstraintSystem,
    config: &GreedyConfig,
    mut observe: impl FnMut(usize, &FractionalSolution),
) -> Result<GreedyOutput, GreedyError> {
    config.validate()?;
    let mut notices = Vec::new();
    let guard = step_guard(instance.n_items());
    if config.step > guard * (1.0 + 1e-12) {
        notices.push(format!("step {} exceeds the n^-3 guard {guard:.3e}; the additive loss term is not controlled", config.step));
    }
    for i in 0..instance.n_items() {
        if instance.last_start(i) < 1 {
            notices.push(format!("singleton {{{}}} is not in the polytope; guarantee does not apply", instance.item(i).id));
        }
    }

    let mut y = FractionalSolution::zero(system);
    let mut trace = Vec::with_capacity(config.iterations());
    let mut zero_rounds = 0;
    let mut cached: Option<(Vec<f64>, FractionalSolution)> = None;
    for k in 0..config.iterations() {
        let xbar: Vec<f64> = y.xbar().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let (weights, value) = match config.marginals {
            Marginals::Exact { guard } => {
                let (w, v) = objective::marginal_weights_exact(instance, &xbar, guard)?;
                (w, Estimate::exact(v))
            }
            Marginals::Sampled { samples } => {
                let pass = objective::marginal_weights(instance, &xbar, samples, rng::derive_seed(config.seed, &[k as u64]))?;
                (pass.weights.iter().map(|e| e.mean).collect(), pass.value)
            }
        };
        let weights: Vec<f64> = weights.into_iter().map(|w| w.max(0.0)).collect();
        trace.push(IterationRow {
            iteration: k + 1,
            weight_norm: weights.iter().map(|w| w * w).sum::<f64>().sqrt(),
            objective_estimate: value.mean,
            objective_stderr: value.stderr,
        });
        if weights.iter().all(|&w| w == 0.0) {
            zero_rounds += 1;
        } else {
            let direction = match &cached {
                Some((w, z)) if *w == weights => z.clone(),
                _ => {
                    let z = polytope::solve_weighted(system, &weights)?;
                    cached = Some((weights, z.clone()));
                    z
                }
            };
            y.add_scaled(&direction, config.step);
        }
        observe(k + 1, &y);
    }
    if zero_rounds > 0 {
        notices.push(format!("all marginal weights were zero in {zero_rounds} of {} iterations", config.iterations()));
    }
    Ok(GreedyOutput { solution: y, trace, notices, config: *config })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QualityReport {
    /// Multilinear extension at the greedy output (exact when it fits the guard).
    pub value: Estimate,
    pub exact: bool,
    pub opt: Option<f64>,
    /// `value / opt`; `None` when no optimum was supplied or it is zero.
    pub ratio: Option<f64>,
    pub flagged: bool,
}

pub fn greedy_quality_report(
    instance: &Instance,
    solution: &FractionalSolution,
    opt: Option<f64>,
    samples: u64,
    seed: u64,
) -> Result<QualityReport, GreedyError> {
    let xbar: Vec<f64> = solution.xbar().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    let (value, exact) = match objective::multilinear_exact(instance, &xbar, DEFAULT_ENUM_GUARD) {
        Ok(v) => (Estimate::exact(v), true),
        Err(ObjectiveError::GuardExceeded { .. }) => (objective::multilinear_estimate(instance, &xbar, samples, seed)?, false),
        Err(e) => return Err(e.into()),
    };
    let ratio = opt.filter(|&o| o > 0.0).map(|o| value.mean / o);
    Ok(QualityReport { value, exact, opt, ratio, flagged: ratio.is_some_and(|r| r + 3.0 * value.stderr / opt.unwrap() < QUALITY_FLAG) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{expand_with_caps, BaseItem, RewardCurve, SizeDistribution};
    use crate::objective::ObjectiveSpec;
    use crate::polytope::{build_constraints, check_feasibility};
    use std::collections::BTreeMap;

    fn additive(items: &[(&str, &[(u32, f64)], &[(u32, u32)], f64)], budget: u32) -> Instance {
        let base: Vec<BaseItem> = items
            .iter()
            .map(|(id, s, r, _)| BaseItem {
                id: id.to_string(),
                sizes: SizeDistribution::new(s.iter().copied()).unwrap(),
                rewards: RewardCurve::new(r.iter().copied()),
            })
            .collect();
        let weights: BTreeMap<String, f64> = items.iter().map(|(id, _, _, w)| (id.to_string(), *w)).collect();
        let bound = items.iter().flat_map(|(_, _, r, _)| r.iter().map(|p| p.1)).max().unwrap().max(1);
        expand_with_caps(&base, budget, bound, ObjectiveSpec::Additive { weights }).unwrap()
    }

    fn config(step: f64, marginals: Marginals) -> GreedyConfig {
        GreedyConfig { stopping_time: 0.5, step, marginals, seed: 11 }
    }

    #[test]
    fn single_item_reaches_half() {
        let inst = additive(&[("a", &[(1, 1.0)], &[(1, 1)], 1.0)], 1);
        let sys = build_constraints(&inst);
        let out = continuous_greedy(&inst, &sys, &config(0.1, Marginals::Exact { guard: 8 })).unwrap();
        assert_eq!(out.trace.len(), 5);
        assert!((out.solution.xbar()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_objective_stays_at_zero() {
        let inst = additive(&[("a", &[(1, 1.0)], &[(1, 1)], 0.0)], 2);
        let sys = build_constraints(&inst);
        let out = continuous_greedy(&inst, &sys, &config(0.1, Marginals::Sampled { samples: 64 })).unwrap();
        assert!(out.solution.xbar().iter().all(|&x| x == 0.0));
        assert!(out.notices.iter().any(|n| n.contains("all marginal weights were zero in 5 of 5")));
    }

    #[test]
    fn config_validation() {
        assert!(config(0.1, Marginals::Exact { guard: 4 }).validate().is_ok());
        assert!(config(0.3, Marginals::Exact { guard: 4 }).validate().is_err());
        assert!(config(0.1, Marginals::Sampled { samples: 0 }).validate().is_err());
        let mut c = config(0.1, Marginals::Exact { guard: 4 });
        c.stopping_time = 1.5;
        assert!(c.validate().is_err());
        let d = GreedyConfig::default_for(3, 0);
        assert!(d.validate().is_ok());
        assert!(d.step <= 0.5 / 27.0 && d.iterations() == 27);
        assert_eq!(GreedyConfig::default_for(1, 0).iterations(), 10);
    }

    #[test]
    fn prefixes_stay_feasible_and_grow() {
        let inst = additive(
            &[("a", &[(1, 0.5), (2, 0.5)], &[(1, 1), (2, 2)], 1.0), ("b", &[(2, 1.0)], &[(2, 1)], 2.0)],
            3,
        );
        let sys = build_constraints(&inst);
        let mut prev = vec![0.0; inst.n_items()];
        let mut steps = 0;
        continuous_greedy_with(&inst, &sys, &config(0.05, Marginals::Sampled { samples: 256 }), |k, y| {
            let scaled = y.scaled(1.0 / 0.5);
            assert!(check_feasibility(&sys, scaled.values(), 1e-6).unwrap().is_empty(), "prefix {k}");
            for (p, x) in prev.iter_mut().zip(y.xbar()) {
                assert!(*x >= *p - 1e-15);
                *p = *x;
            }
            steps += 1;
        })
        .unwrap();
        assert_eq!(steps, 10);
    }

    #[test]
    fn deterministic_per_seed() {
        let inst = additive(&[("a", &[(1, 0.5), (2, 0.5)], &[(1, 1), (2, 3)], 1.0), ("b", &[(1, 1.0)], &[(1, 2)], 1.0)], 2);
        let sys = build_constraints(&inst);
        let c = config(0.1, Marginals::Sampled { samples: 128 });
        let a = continuous_greedy(&inst, &sys, &c).unwrap();
        let b = continuous_greedy(&inst, &sys, &c).unwrap();
        assert_eq!(a.solution, b.solution);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn additive_exact_matches_scaled_lp_optimum() {
        // gains are w_i E[R_i] (1 - xbar_i); with xbar <= 1/2 the ranking
        // 3 * 0.5 > 1 never flips, so every iteration picks the same vertex
        let inst = additive(&[("a", &[(1, 1.0)], &[(1, 1)], 1.0), ("b", &[(1, 1.0)], &[(1, 3)], 1.0)], 1);
        let sys = build_constraints(&inst);
        let out = continuous_greedy(&inst, &sys, &config(0.1, Marginals::Exact { guard: 8 })).unwrap();
        let (w, _) = objective::marginal_weights_exact(&inst, &vec![0.0; inst.n_items()], 8).unwrap();
        let lp = polytope::solve_weighted(&sys, &w).unwrap();
        for (g, l) in out.solution.xbar().iter().zip(lp.xbar()) {
            assert!((g - 0.5 * l).abs() < 1e-9);
        }
        assert!((out.solution.xbar()[1] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn quality_report_handles_zero_opt() {
        let inst = additive(&[("a", &[(1, 1.0)], &[(1, 1)], 0.0)], 1);
        let sys = build_constraints(&inst);
        let r = greedy_quality_report(&inst, &FractionalSolution::zero(&sys), Some(0.0), 100, 1).unwrap();
        assert_eq!(r.value.mean, 0.0);
        assert_eq!(r.ratio, None);
        assert!(!r.flagged);
    }

    #[test]
    fn quality_report_single_item() {
        let inst = additive(&[("a", &[(1, 1.0)], &[(1, 2)], 1.0)], 1);
        let sys = build_constraints(&inst);
        let out = continuous_greedy(&inst, &sys, &config(0.1, Marginals::Exact { guard: 8 })).unwrap();
        let r = greedy_quality_report(&inst, &out.solution, Some(2.0), 100, 1).unwrap();
        assert!(r.exact);
        assert!(r.ratio.unwrap() >= 0.39);
    }
}
