//! Randomized rounding with phantom items.
//!
//! Every `(item, slot)` pair is proposed independently with its start
//! probability. Proposals are processed by slot, ties in random order. A
//! proposal runs for real only if its slot is free and neither its item nor
//! any member of its partition was proposed before; otherwise it becomes a
//! phantom. Phantoms are still simulated: their sampled span blocks later
//! slots exactly as a real run would.

use std::fmt;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::model::{Instance, Reward, Size};
use crate::polytope::FractionalSolution;
use crate::rng;

#[derive(Debug, Error)]
pub enum RoundingError {
    #[error("start probability {value} for item {item} at slot {slot} exceeds 1")]
    ProbabilityAboveOne { item: usize, slot: Size, value: f64 },
    #[error("solution covers {got} items, instance has {expected}")]
    Shape { got: usize, expected: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Proposal {
    pub item: usize,
    pub slot: Size,
}

/// Proposals sorted by slot with ties in random order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderedProposals(Vec<Proposal>);

impl OrderedProposals {
    /// Wraps a sequence, checking it is non-decreasing in slot.
    pub fn new(seq: Vec<Proposal>) -> Option<Self> {
        seq.windows(2).all(|w| w[0].slot <= w[1].slot).then_some(Self(seq))
    }

    pub fn as_slice(&self) -> &[Proposal] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Non-zero start probabilities, flattened for repeated sampling.
#[derive(Clone, Debug)]
pub struct RoundingPlan {
    pairs: Vec<(Proposal, f64)>,
}

impl RoundingPlan {
    pub fn new(solution: &FractionalSolution, tol: f64) -> Result<Self, RoundingError> {
        let mut pairs = Vec::new();
        for (item, row) in solution.x_start().iter().enumerate() {
            for (k, &x) in row.iter().enumerate() {
                let slot = k as Size + 1;
                if x > 1.0 + tol {
                    return Err(RoundingError::ProbabilityAboveOne { item, slot, value: x });
                }
                if x > 0.0 {
                    pairs.push((Proposal { item, slot }, x.min(1.0)));
                }
            }
        }
        Ok(Self { pairs })
    }

    pub fn pairs(&self) -> &[(Proposal, f64)] {
        &self.pairs
    }

    pub fn sample(&self, seed: u64) -> Vec<Proposal> {
        let mut r = rng::stream(seed, &[]);
        self.pairs.iter().filter(|(_, x)| r.gen::<f64>() < *x).map(|(p, _)| *p).collect()
    }

    /// One draw of the rounded policy.
    pub fn run(&self, instance: &Instance, seed: u64) -> ExecutionTrace {
        let proposals = self.sample(rng::derive_seed(seed, &[0]));
        let ordered = order_proposals(proposals, rng::derive_seed(seed, &[1]));
        execute(&ordered, instance, rng::derive_seed(seed, &[2]))
    }
}

/// Includes every `(i, t)` independently with probability `x[start(i), t]`.
pub fn sample_proposals(solution: &FractionalSolution, seed: u64) -> Result<Vec<Proposal>, RoundingError> {
    Ok(RoundingPlan::new(solution, solution.tol())?.sample(seed))
}

pub fn order_proposals(proposals: Vec<Proposal>, seed: u64) -> OrderedProposals {
    let mut r = rng::stream(seed, &[]);
    let mut keyed: Vec<(Size, u64, Proposal)> = proposals.into_iter().map(|p| (p.slot, r.gen(), p)).collect();
    keyed.sort_by_key(|&(slot, rank, _)| (slot, rank));
    OrderedProposals(keyed.into_iter().map(|(_, _, p)| p).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Real,
    Phantom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Cause {
    SlotUnavailable,
    PartitionUsed,
    DuplicateItem,
}

impl fmt::Display for Cause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Cause::SlotUnavailable => "slot_unavailable",
            Cause::PartitionUsed => "partition_used",
            Cause::DuplicateItem => "duplicate_item",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Outcome {
    pub proposal: Proposal,
    pub status: Status,
    /// Every rule the proposal failed; empty for real runs.
    pub causes: Vec<Cause>,
    /// Position (in processing order) of the earliest proposal that blocked this one.
    pub blocker: Option<usize>,
    pub size: Size,
    /// Realized reward; 0 for phantoms.
    pub reward: Reward,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExecutionTrace {
    pub outcomes: Vec<Outcome>,
    /// `unavailable[t-1]` after all proposals were processed.
    pub unavailable: Vec<bool>,
    /// Final reward per item.
    pub rewards: Vec<Reward>,
    pub value: f64,
}

/// Size of `item` for a proposal at `slot` under the size stream `seed`.
pub fn proposal_size(instance: &Instance, seed: u64, p: Proposal) -> Size {
    let table = instance.table(p.item);
    table.sizes[table.size_index(rng::keyed_uniform(seed, &[p.item as u64, p.slot as u64]))]
}

/// Processes proposals in order, drawing each size from a stream keyed by
/// `(item, slot)` so real and phantom runs consume identical randomness.
pub fn execute(ordered: &OrderedProposals, instance: &Instance, seed: u64) -> ExecutionTrace {
    execute_with(ordered, instance, |p| proposal_size(instance, seed, p))
}

/// [`execute`] with sizes supplied by the caller.
pub fn execute_with(ordered: &OrderedProposals, instance: &Instance, mut size_of: impl FnMut(Proposal) -> Size) -> ExecutionTrace {
    let budget = instance.budget() as usize;
    let mut slot_owner: Vec<Option<usize>> = vec![None; budget];
    let mut partition_first: Vec<Option<usize>> = vec![None; instance.partitions().len()];
    let mut item_first: Vec<Option<usize>> = vec![None; instance.n_items()];
    let mut rewards = vec![0; instance.n_items()];
    let mut outcomes = Vec::with_capacity(ordered.len());
    for (k, &p) in ordered.as_slice().iter().enumerate() {
        let t = p.slot as usize - 1;
        let part = instance.partition_of(p.item);
        let slot_block = slot_owner[t];
        let part_block = partition_first[part];
        let item_block = item_first[p.item];
        let mut causes = Vec::new();
        if slot_block.is_some() {
            causes.push(Cause::SlotUnavailable);
        }
        if part_block.is_some() {
            causes.push(Cause::PartitionUsed);
        }
        if item_block.is_some() {
            causes.push(Cause::DuplicateItem);
        }
        let blocker = [slot_block, part_block, item_block].into_iter().flatten().min();
        let size = size_of(p);
        let status = if causes.is_empty() { Status::Real } else { Status::Phantom };
        let reward = match status {
            Status::Real => {
                let r = instance.item(p.item).reward_at(size);
                rewards[p.item] = r;
                r
            }
            Status::Phantom => 0,
        };
        let end = (t + size as usize).min(budget);
        for owner in &mut slot_owner[t..end] {
            owner.get_or_insert(k);
        }
        partition_first[part].get_or_insert(k);
        item_first[p.item].get_or_insert(k);
        outcomes.push(Outcome { proposal: p, status, causes, blocker, size, reward });
    }
    let value = instance.objective().value(&rewards);
    ExecutionTrace { outcomes, unavailable: slot_owner.iter().map(Option::is_some).collect(), rewards, value }
}

/// Sample, order and execute once with substreams derived from `seed`.
pub fn run_policy_once(instance: &Instance, solution: &FractionalSolution, seed: u64) -> Result<ExecutionTrace, RoundingError> {
    if solution.x_start().len() != instance.n_items() {
        return Err(RoundingError::Shape { got: solution.x_start().len(), expected: instance.n_items() });
    }
    Ok(RoundingPlan::new(solution, solution.tol())?.run(instance, seed))
}

/// Feasibility failures of an executed trace; empty when the run is valid.
pub fn trace_violations(trace: &ExecutionTrace, instance: &Instance) -> Vec<String> {
    let mut out = Vec::new();
    let budget = instance.budget();
    let mut per_partition = vec![0; instance.partitions().len()];
    let mut per_item = vec![0; instance.n_items()];
    let mut used = vec![false; budget as usize];
    let mut total = 0;
    for o in &trace.outcomes {
        if o.status == Status::Phantom {
            if o.causes.is_empty() || o.blocker.is_none() {
                out.push(format!("phantom {:?} has no recorded cause", o.proposal));
            }
            continue;
        }
        per_partition[instance.partition_of(o.proposal.item)] += 1;
        per_item[o.proposal.item] += 1;
        total += o.size;
        let end = o.proposal.slot + o.size - 1;
        if o.proposal.slot < 1 || end > budget {
            out.push(format!("real span {}..={end} of item {} leaves 1..={budget}", o.proposal.slot, o.proposal.item));
            continue;
        }
        for t in o.proposal.slot..=end {
            if std::mem::replace(&mut used[t as usize - 1], true) {
                out.push(format!("slot {t} is covered by two real runs"));
            }
        }
    }
    for (k, &c) in per_partition.iter().enumerate() {
        if c > 1 {
            out.push(format!("partition {} has {c} real items", instance.partitions()[k].id));
        }
    }
    for (i, &c) in per_item.iter().enumerate() {
        if c > 1 {
            out.push(format!("item {} runs {c} times", instance.item(i).id));
        }
    }
    if total > budget {
        out.push(format!("total real size {total} exceeds budget {budget}"));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub order: usize,
    pub item: String,
    pub slot: Size,
    pub status: Status,
    pub cause: String,
    pub blocker: Option<usize>,
    pub size: Size,
    pub reward: Reward,
}

pub fn trace_rows(trace: &ExecutionTrace, instance: &Instance) -> Vec<TraceRow> {
    trace
        .outcomes
        .iter()
        .enumerate()
        .map(|(k, o)| TraceRow {
            order: k,
            item: instance.item(o.proposal.item).id.clone(),
            slot: o.proposal.slot,
            status: o.status,
            cause: o.causes.iter().map(Cause::to_string).collect::<Vec<_>>().join("|"),
            blocker: o.blocker,
            size: o.size,
            reward: o.reward,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ExpandedItem, InstanceDraft, PartitionMatroid, RewardCurve, SizeDistribution};
    use crate::objective::ObjectiveSpec;
    use crate::polytope::build_constraints;
    use proptest::prelude::*;

    // (id, partition, cap, sizes, reward curve)
    type Spec<'a> = (&'a str, &'a str, Size, &'a [(Size, f64)], &'a [(Size, Reward)]);

    fn instance(items: &[Spec], budget: Size) -> Instance {
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

    fn solution(inst: &Instance, x: Vec<Vec<f64>>) -> FractionalSolution {
        FractionalSolution::from_starts(&build_constraints(inst), &x).unwrap()
    }

    fn p(item: usize, slot: Size) -> Proposal {
        Proposal { item, slot }
    }

    #[test]
    fn sampling_extremes() {
        let inst = instance(&[("a", "a", 1, &[(1, 1.0)], &[(1, 1)])], 2);
        let zero = solution(&inst, vec![vec![0.0, 0.0]]);
        let one = solution(&inst, vec![vec![1.0, 0.0]]);
        for seed in 0..50 {
            assert!(sample_proposals(&zero, seed).unwrap().is_empty());
            assert_eq!(sample_proposals(&one, seed).unwrap(), vec![p(0, 1)]);
        }
        let bad = solution(&inst, vec![vec![1.5, 0.0]]);
        assert!(matches!(sample_proposals(&bad, 0), Err(RoundingError::ProbabilityAboveOne { .. })));
    }

    #[test]
    fn ordering_sorts_by_slot() {
        let o = order_proposals(vec![p(0, 3), p(1, 1), p(2, 2)], 5);
        assert_eq!(o.as_slice().iter().map(|q| q.slot).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert!(order_proposals(Vec::new(), 5).is_empty());
        assert!(OrderedProposals::new(vec![p(0, 2), p(1, 1)]).is_none());
    }

    #[test]
    fn same_slot_tie_blocks_the_loser() {
        let inst = instance(&[("a", "a", 1, &[(1, 1.0)], &[(1, 1)]), ("b", "b", 1, &[(1, 1.0)], &[(1, 2)])], 1);
        let ord = OrderedProposals::new(vec![p(0, 1), p(1, 1)]).unwrap();
        let tr = execute(&ord, &inst, 0);
        assert_eq!(tr.outcomes[0].status, Status::Real);
        assert_eq!(tr.outcomes[1].status, Status::Phantom);
        assert_eq!(tr.outcomes[1].causes, vec![Cause::SlotUnavailable]);
        assert_eq!(tr.outcomes[1].blocker, Some(0));
        assert_eq!(tr.outcomes[1].reward, 0);
        assert_eq!(tr.value, 1.0);
    }

    #[test]
    fn consecutive_cross_partition_runs_are_both_real() {
        let inst = instance(&[("a", "a", 1, &[(1, 1.0)], &[(1, 1)]), ("b", "b", 2, &[(2, 1.0)], &[(2, 2)])], 3);
        let ord = OrderedProposals::new(vec![p(0, 1), p(1, 2)]).unwrap();
        let tr = execute(&ord, &inst, 0);
        assert!(tr.outcomes.iter().all(|o| o.status == Status::Real));
        assert_eq!(tr.unavailable, vec![true, true, true]);
        assert!(trace_violations(&tr, &inst).is_empty());
        assert_eq!(tr.value, 3.0);
    }

    #[test]
    fn phantom_blocks_like_a_real_run() {
        // a and b share a partition; b is phantom when a precedes it, real
        // when a is absent. c at slot 2 sees the same availability either way.
        let inst = instance(
            &[
                ("a", "p", 1, &[(1, 1.0)], &[(1, 1)]),
                ("b", "p", 2, &[(2, 1.0)], &[(2, 1)]),
                ("c", "c", 1, &[(1, 1.0)], &[(1, 1)]),
            ],
            3,
        );
        let with_a = execute(&OrderedProposals::new(vec![p(0, 1), p(1, 2), p(2, 3)]).unwrap(), &inst, 0);
        let without_a = execute(&OrderedProposals::new(vec![p(1, 2), p(2, 3)]).unwrap(), &inst, 0);
        assert_eq!(with_a.outcomes[1].status, Status::Phantom);
        assert_eq!(without_a.outcomes[0].status, Status::Real);
        assert_eq!(with_a.outcomes[2].status, without_a.outcomes[1].status);
        assert_eq!(with_a.outcomes[2].causes, vec![Cause::SlotUnavailable]);
        assert_eq!(with_a.unavailable[1..], without_a.unavailable[1..]);
    }

    #[test]
    fn duplicate_item_is_phantom() {
        let inst = instance(&[("a", "a", 1, &[(1, 1.0)], &[(1, 1)])], 2);
        let tr = execute(&OrderedProposals::new(vec![p(0, 1), p(0, 2)]).unwrap(), &inst, 0);
        assert_eq!(tr.outcomes[1].causes, vec![Cause::PartitionUsed, Cause::DuplicateItem]);
    }

    #[test]
    fn sizes_follow_the_capped_distribution() {
        let inst = instance(&[("a", "a", 2, &[(1, 0.25), (2, 0.75)], &[(1, 1), (2, 3)])], 2);
        let sol = solution(&inst, vec![vec![1.0, 0.0]]);
        let n = 40_000;
        let small = (0..n).filter(|&s| run_policy_once(&inst, &sol, s).unwrap().outcomes[0].size == 1).count();
        let freq = small as f64 / n as f64;
        let sigma = (0.25f64 * 0.75 / n as f64).sqrt();
        assert!((freq - 0.25).abs() < 4.0 * sigma, "{freq}");
    }

    #[test]
    fn run_is_deterministic() {
        let inst = instance(&[("a", "p", 2, &[(1, 0.5), (2, 0.5)], &[(1, 1), (2, 2)]), ("b", "p", 1, &[(1, 1.0)], &[(1, 1)])], 3);
        let sol = solution(&inst, vec![vec![0.5, 0.3, 0.0], vec![0.2, 0.4, 0.4]]);
        for seed in 0..20 {
            assert_eq!(run_policy_once(&inst, &sol, seed).unwrap(), run_policy_once(&inst, &sol, seed).unwrap());
        }
    }

    #[test]
    fn trace_rows_render_causes() {
        let inst = instance(&[("a", "a", 1, &[(1, 1.0)], &[(1, 1)])], 2);
        let tr = execute(&OrderedProposals::new(vec![p(0, 1), p(0, 2)]).unwrap(), &inst, 0);
        let rows = trace_rows(&tr, &inst);
        assert_eq!(rows[1].cause, "partition_used|duplicate_item");
        assert_eq!(rows[0].cause, "");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn executions_are_feasible(
            x in proptest::collection::vec(0.0f64..=1.0, 12),
            seed in any::<u64>(),
        ) {
            let inst = instance(
                &[
                    ("a", "p", 2, &[(1, 0.5), (2, 0.5)], &[(1, 1), (2, 2)]),
                    ("b", "p", 1, &[(1, 1.0)], &[(1, 1)]),
                    ("c", "q", 3, &[(1, 0.2), (3, 0.8)], &[(1, 1), (3, 3)]),
                ],
                4,
            );
            let mut rows: Vec<Vec<f64>> = x.chunks(4).map(<[f64]>::to_vec).collect();
            for (i, row) in rows.iter_mut().enumerate() {
                for t in (inst.last_start(i) as usize)..4 {
                    row[t] = 0.0;
                }
            }
            let sol = solution(&inst, rows);
            for s in 0..50 {
                let tr = run_policy_once(&inst, &sol, seed.wrapping_add(s)).unwrap();
                prop_assert!(trace_violations(&tr, &inst).is_empty());
                for o in &tr.outcomes {
                    if o.status == Status::Real {
                        prop_assert_eq!(o.reward, inst.item(o.proposal.item).reward_at(o.size));
                    }
                }
            }
        }
    }
}
