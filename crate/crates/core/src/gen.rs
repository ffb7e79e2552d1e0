//! Seeded instance generators.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    expand_with_caps, spot_reduce, BaseItem, Instance, ModelError, Reward, RewardCurve, Size, SizeDistribution, SpotInstance,
    SpotJob,
};
use crate::objective::ObjectiveSpec;
use crate::rng::{self, StreamRng};

/// Largest parameters accepted for verification-grade instances.
pub const MAX_BASE: usize = 6;
pub const MAX_BUDGET: Size = 12;
pub const MAX_REWARD: Reward = 4;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("parameter {name} = {value} is outside {range}")]
    Param { name: &'static str, value: u64, range: &'static str },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveFamily {
    Additive,
    ConcaveOfSum,
    NestedCoverage,
}

impl ObjectiveFamily {
    pub const ALL: [ObjectiveFamily; 3] = [ObjectiveFamily::Additive, ObjectiveFamily::ConcaveOfSum, ObjectiveFamily::NestedCoverage];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RandomParams {
    pub n_base: usize,
    pub budget: Size,
    pub reward_bound: Reward,
    pub family: ObjectiveFamily,
    /// Sizes are always 1 when set.
    pub deterministic: bool,
}

fn check(name: &'static str, value: u64, lo: u64, hi: u64, range: &'static str) -> Result<(), GenError> {
    if value < lo || value > hi {
        return Err(GenError::Param { name, value, range });
    }
    Ok(())
}

impl RandomParams {
    pub fn validate(&self) -> Result<(), GenError> {
        check("n_base", self.n_base as u64, 1, MAX_BASE as u64, "1..=6")?;
        check("budget", self.budget as u64, 1, MAX_BUDGET as u64, "1..=12")?;
        check("reward_bound", self.reward_bound as u64, 1, MAX_REWARD as u64, "1..=4")
    }
}

/// Probabilities in multiples of `1/20` over `k` sizes.
fn random_probs(r: &mut StreamRng, k: usize) -> Vec<f64> {
    let mut units = vec![1u32; k];
    for _ in k..20 {
        units[r.gen_range(0..k)] += 1;
    }
    units.into_iter().map(|u| u as f64 / 20.0).collect()
}

fn random_item(r: &mut StreamRng, id: String, budget: Size, bound: Reward, deterministic: bool) -> BaseItem {
    let mut support: Vec<Size> = if deterministic {
        vec![r.gen_range(1..=budget.min(3))]
    } else {
        let all: Vec<Size> = (1..=budget).collect();
        let k = r.gen_range(1..=3usize.min(all.len()));
        all.choose_multiple(r, k).copied().collect()
    };
    support.sort_unstable();
    let probs = random_probs(r, support.len());
    let sizes = SizeDistribution::new(support.iter().copied().zip(probs)).expect("generated mass is one");
    // non-decreasing rewards over the support, top level at least 1
    let mut levels: Vec<Reward> = (0..support.len()).map(|_| r.gen_range(0..=bound)).collect();
    levels.sort_unstable();
    let last = levels.len() - 1;
    levels[last] = levels[last].max(1);
    BaseItem { id, sizes, rewards: RewardCurve::new(support.into_iter().zip(levels)) }
}

fn quarter(r: &mut StreamRng, lo: u32, hi: u32) -> f64 {
    r.gen_range(lo..=hi) as f64 / 4.0
}

fn random_objective(r: &mut StreamRng, ids: &[String], bound: Reward, family: ObjectiveFamily) -> ObjectiveSpec {
    match family {
        ObjectiveFamily::Additive => ObjectiveSpec::Additive { weights: ids.iter().map(|id| (id.clone(), quarter(r, 1, 8))).collect() },
        ObjectiveFamily::ConcaveOfSum => {
            let weights: BTreeMap<String, f64> = ids.iter().map(|id| (id.clone(), quarter(r, 1, 8))).collect();
            let knee = quarter(r, 2, 12);
            let slope = quarter(r, 0, 3);
            let far = knee + 10.0 * bound as f64 * ids.len() as f64;
            ObjectiveSpec::ConcaveOfSum { weights, breakpoints: vec![(0.0, 0.0), (knee, knee), (far, knee + slope * (far - knee))] }
        }
        ObjectiveFamily::NestedCoverage => {
            let n_elem = 2 * ids.len() + 2;
            let elements: BTreeMap<String, f64> = (0..n_elem).map(|e| (format!("e{e:02}"), quarter(r, 1, 8))).collect();
            let names: Vec<String> = elements.keys().cloned().collect();
            let chains = ids
                .iter()
                .map(|id| {
                    let mut chain = vec![Vec::new()];
                    let mut current: Vec<String> = Vec::new();
                    for _ in 1..=bound {
                        let add = r.gen_range(1..=2);
                        for e in names.choose_multiple(r, add) {
                            if !current.contains(e) {
                                current.push(e.clone());
                            }
                        }
                        current.sort();
                        chain.push(current.clone());
                    }
                    (id.clone(), chain)
                })
                .collect();
            ObjectiveSpec::NestedCoverage { elements, chains }
        }
    }
}

/// A random instance with caps expanded; identical for identical seeds.
pub fn random_instance(params: &RandomParams, seed: u64) -> Result<Instance, GenError> {
    params.validate()?;
    let mut r = rng::stream(seed, &[]);
    let ids: Vec<String> = (0..params.n_base).map(|k| format!("i{k}")).collect();
    let items: Vec<BaseItem> =
        ids.iter().map(|id| random_item(&mut r, id.clone(), params.budget, params.reward_bound, params.deterministic)).collect();
    let bound = items.iter().map(|it| it.rewards.max_reward()).max().unwrap_or(1).max(1);
    let objective = random_objective(&mut r, &ids, bound, params.family);
    Ok(expand_with_caps(&items, params.budget, bound, objective)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpotParams {
    pub jobs: usize,
    pub instances: usize,
    pub budget: Size,
    pub reward_bound: Reward,
}

impl SpotParams {
    pub fn validate(&self) -> Result<(), GenError> {
        check("jobs", self.jobs as u64, 1, MAX_BASE as u64, "1..=6")?;
        check("instances", self.instances as u64, 1, MAX_BASE as u64, "1..=6")?;
        check("budget", self.budget as u64, 1, MAX_BUDGET as u64, "1..=12")?;
        check("reward_bound", self.reward_bound as u64, 1, MAX_REWARD as u64, "1..=4")
    }
}

/// Random spot-instance scheduling problem, reduced to an instance with an
/// additive objective over jobs.
pub fn spot_instance(params: &SpotParams, seed: u64) -> Result<Instance, GenError> {
    params.validate()?;
    let mut r = rng::stream(seed, &[]);
    let spots: Vec<SpotInstance> = (0..params.instances)
        .map(|k| {
            let all: Vec<Size> = (1..=params.budget).collect();
            let n = r.gen_range(1..=3usize.min(all.len()));
            let mut support: Vec<Size> = all.choose_multiple(&mut r, n).copied().collect();
            support.sort_unstable();
            let probs = random_probs(&mut r, support.len());
            SpotInstance { id: format!("s{k}"), interruption: SizeDistribution::new(support.into_iter().zip(probs)).expect("mass is one") }
        })
        .collect();
    let jobs: Vec<SpotJob> = (0..params.jobs)
        .map(|k| {
            let progress = spots
                .iter()
                .map(|s| {
                    let mut points: Vec<(Size, Reward)> = vec![(1, 0)];
                    let mut level = 0;
                    for t in 1..=params.budget {
                        if r.gen_bool(0.4) && level < params.reward_bound {
                            level += 1;
                            points.retain(|&(s, _)| s != t);
                            points.push((t, level));
                        }
                    }
                    (s.id.clone(), RewardCurve::new(points))
                })
                .collect();
            SpotJob { id: format!("j{k}"), progress }
        })
        .collect();
    let weights = jobs.iter().map(|j| (j.id.clone(), quarter(&mut r, 1, 8))).collect();
    Ok(spot_reduce(&jobs, &spots, params.budget, ObjectiveSpec::Additive { weights })?)
}

/// The two-item instance used in examples and smoke tests.
pub fn canonical_instance() -> Instance {
    let a = BaseItem {
        id: "a".into(),
        sizes: SizeDistribution::new([(1, 0.5), (2, 0.5)]).unwrap(),
        rewards: RewardCurve::new([(1, 1), (2, 2)]),
    };
    let b = BaseItem { id: "b".into(), sizes: SizeDistribution::new([(1, 1.0)]).unwrap(), rewards: RewardCurve::new([(1, 1)]) };
    let weights = BTreeMap::from([("a".to_string(), 1.0), ("b".to_string(), 1.0)]);
    expand_with_caps(&[a, b], 2, 2, ObjectiveSpec::Additive { weights }).expect("canonical instance is valid")
}
