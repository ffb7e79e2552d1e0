//! Problem instances: items with random sizes and size-dependent rewards,
//! the size-cap expansion, the spot-instance reduction and validation.
//!
//! Sizes are measured in time slots and are always at least one. Rewards
//! are integers in `[0, M]`. A reward curve is a non-decreasing step
//! function: the reward at size `s` is the value recorded at the largest
//! key not exceeding `s` (zero when there is none), so curves only need
//! to list the sizes where the reward changes.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{Objective, ObjectiveSpec};

pub type Size = u32;
pub type Reward = u32;

/// Tolerance on the total probability mass of a size distribution.
pub const MASS_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("cap {cap} is outside 1..={budget}")]
    InvalidCap { cap: Size, budget: Size },
    #[error("budget must be at least 1")]
    ZeroBudget,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("progress curve for job `{job}` on `{instance}` is not non-decreasing")]
    NonMonotoneProgress { job: String, instance: String },
    #[error("invalid instance:\n{}", format_violations(.0))]
    Invalid(Vec<Violation>),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| format!("  {x}")).collect::<Vec<_>>().join("\n")
}

/// One broken invariant found by [`validate_instance`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub subject: String,
    pub field: &'static str,
    pub detail: String,
}

impl Violation {
    fn new(subject: impl Into<String>, field: &'static str, detail: impl Into<String>) -> Self {
        Self { subject: subject.into(), field, detail: detail.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}: {}", self.subject, self.field, self.detail)
    }
}

/// Sparse size distribution, size (in slots) -> probability.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SizeDistribution(BTreeMap<Size, f64>);

impl SizeDistribution {
    /// Builds a distribution, checking positivity and total mass.
    pub fn new(pairs: impl IntoIterator<Item = (Size, f64)>) -> Result<Self, ModelError> {
        let dist = Self::from_map(pairs.into_iter().collect());
        let issues = dist.issues();
        if issues.is_empty() {
            Ok(dist)
        } else {
            Err(ModelError::Invalid(
                issues.into_iter().map(|d| Violation::new("distribution", "sizes", d)).collect(),
            ))
        }
    }

    /// Wraps a map without checking it; see [`SizeDistribution::issues`].
    pub fn from_map(map: BTreeMap<Size, f64>) -> Self {
        Self(map)
    }

    pub fn as_map(&self) -> &BTreeMap<Size, f64> {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = (Size, f64)> + '_ {
        self.0.iter().map(|(&s, &p)| (s, p))
    }

    pub fn sizes(&self) -> impl Iterator<Item = Size> + '_ {
        self.0.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn prob(&self, s: Size) -> f64 {
        self.0.get(&s).copied().unwrap_or(0.0)
    }

    pub fn max_size(&self) -> Size {
        self.0.keys().next_back().copied().unwrap_or(0)
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }

    /// `Pr[size >= s]`.
    pub fn tail(&self, s: Size) -> f64 {
        self.0.range(s..).map(|(_, p)| p).sum()
    }

    /// Mass strictly below `s` stays put; everything at or above `s` is
    /// moved onto `s` itself.
    pub fn capped(&self, cap: Size) -> SizeDistribution {
        let mut out: BTreeMap<Size, f64> = self.0.range(..cap).map(|(&s, &p)| (s, p)).collect();
        let tail = self.tail(cap);
        if tail > 0.0 {
            out.insert(cap, tail);
        }
        SizeDistribution(out)
    }

    pub fn expected_size(&self) -> f64 {
        self.iter().map(|(s, p)| s as f64 * p).sum()
    }

    /// Human-readable descriptions of every broken invariant.
    pub fn issues(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.0.is_empty() {
            out.push("empty support".to_string());
            return out;
        }
        for (&s, &p) in &self.0 {
            if s == 0 {
                out.push("size 0 in support (sizes must be at least 1)".to_string());
            }
            if !(p > 0.0 && p <= 1.0) {
                out.push(format!("probability {p} of size {s} is outside (0, 1]"));
            }
        }
        let total = self.total();
        if (total - 1.0).abs() > MASS_TOL {
            out.push(format!("probabilities sum to {total} (residual {})", 1.0 - total));
        }
        out
    }
}

/// Non-decreasing step function from size to reward.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardCurve(BTreeMap<Size, Reward>);

impl RewardCurve {
    pub fn new(pairs: impl IntoIterator<Item = (Size, Reward)>) -> Self {
        Self(pairs.into_iter().collect())
    }

    pub fn as_map(&self) -> &BTreeMap<Size, Reward> {
        &self.0
    }

    /// Reward earned when the realized size is `s`.
    pub fn at(&self, s: Size) -> Reward {
        self.0.range(..=s).next_back().map(|(_, &r)| r).unwrap_or(0)
    }

    pub fn max_reward(&self) -> Reward {
        self.0.values().copied().max().unwrap_or(0)
    }

    /// The curve as seen by a copy capped at `cap`: keys above the cap
    /// are dropped and the cap itself gets an explicit value.
    pub fn restricted(&self, cap: Size) -> RewardCurve {
        let mut out: BTreeMap<Size, Reward> = self.0.range(..=cap).map(|(&s, &r)| (s, r)).collect();
        out.insert(cap, self.at(cap));
        RewardCurve(out)
    }

    /// First pair of keys `(s, s')`, `s < s'`, with `R(s) > R(s')`.
    pub fn first_decrease(&self) -> Option<(Size, Size)> {
        self.0
            .iter()
            .zip(self.0.iter().skip(1))
            .find(|((_, a), (_, b))| a > b)
            .map(|((&s, _), (&t, _))| (s, t))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseItem {
    pub id: String,
    pub sizes: SizeDistribution,
    pub rewards: RewardCurve,
}

/// An item as seen by the solver: one capped copy of an original item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandedItem {
    pub id: String,
    pub base_id: String,
    pub partition_id: String,
    pub cap: Size,
    pub sizes: SizeDistribution,
    pub rewards: RewardCurve,
}

impl ExpandedItem {
    pub fn reward_at(&self, s: Size) -> Reward {
        self.rewards.at(s)
    }
}

/// Partition id -> ids of the items in that partition.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PartitionMatroid(pub BTreeMap<String, BTreeSet<String>>);

impl PartitionMatroid {
    /// Groups items by their `partition_id` field.
    pub fn from_items(items: &[ExpandedItem]) -> Self {
        let mut parts: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for it in items {
            parts.entry(it.partition_id.clone()).or_default().insert(it.id.clone());
        }
        Self(parts)
    }
}

/// Unvalidated instance contents; [`Instance::new`] turns it into an
/// [`Instance`] once [`validate_instance`] finds nothing wrong.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceDraft {
    pub items: Vec<ExpandedItem>,
    pub matroid: PartitionMatroid,
    pub budget: Size,
    pub reward_bound: Reward,
    pub objective: ObjectiveSpec,
}

/// Precomputed sampling tables for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemTable {
    pub sizes: Vec<Size>,
    pub size_cdf: Vec<f64>,
    /// Reward realized for each entry of `sizes`.
    pub rewards: Vec<Reward>,
    /// Distinct reward levels with their probabilities.
    pub reward_levels: Vec<(Reward, f64)>,
    pub reward_cdf: Vec<f64>,
}

impl ItemTable {
    fn new(item: &ExpandedItem) -> Self {
        let sizes: Vec<Size> = item.sizes.sizes().collect();
        let size_cdf = cumulative(item.sizes.iter().map(|(_, p)| p));
        let rewards = sizes.iter().map(|&s| item.reward_at(s)).collect();
        let reward_levels: Vec<(Reward, f64)> = reward_distribution(item).into_iter().collect();
        let reward_cdf = cumulative(reward_levels.iter().map(|&(_, p)| p));
        Self { sizes, size_cdf, rewards, reward_levels, reward_cdf }
    }

    /// Index into `sizes` for a uniform draw `u` in `[0, 1)`.
    #[inline]
    pub fn size_index(&self, u: f64) -> usize {
        pick(&self.size_cdf, u)
    }

    #[inline]
    pub fn sample_reward(&self, u: f64) -> Reward {
        self.reward_levels[pick(&self.reward_cdf, u)].0
    }
}

fn cumulative(ps: impl Iterator<Item = f64>) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = ps
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    // Rounding must never leave a gap at the top.
    if let Some(last) = out.last_mut() {
        *last = f64::INFINITY;
    }
    out
}

#[inline]
fn pick(cdf: &[f64], u: f64) -> usize {
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

#[derive(Clone, Debug)]
pub struct Partition {
    pub id: String,
    pub members: Vec<usize>,
}

/// A validated instance. Items are indexed densely in sorted-id order.
#[derive(Clone, Debug)]
pub struct Instance {
    items: Vec<ExpandedItem>,
    tables: Vec<ItemTable>,
    partitions: Vec<Partition>,
    partition_of: Vec<usize>,
    index: BTreeMap<String, usize>,
    budget: Size,
    reward_bound: Reward,
    objective_spec: ObjectiveSpec,
    objective: Objective,
}

impl PartialEq for Instance {
    fn eq(&self, other: &Self) -> bool {
        self.items == other.items
            && self.budget == other.budget
            && self.reward_bound == other.reward_bound
            && self.objective_spec == other.objective_spec
            && self.matroid() == other.matroid()
    }
}

impl Instance {
    pub fn new(mut draft: InstanceDraft) -> Result<Self, ModelError> {
        let violations = validate_instance(&draft);
        if !violations.is_empty() {
            return Err(ModelError::Invalid(violations));
        }
        draft.items.sort_by(|a, b| a.id.cmp(&b.id));
        let index: BTreeMap<String, usize> =
            draft.items.iter().enumerate().map(|(i, it)| (it.id.clone(), i)).collect();
        let mut partitions = Vec::new();
        let mut partition_of = vec![0; draft.items.len()];
        for (k, (pid, members)) in draft.matroid.0.iter().enumerate() {
            let mut idx: Vec<usize> = members.iter().map(|m| index[m]).collect();
            idx.sort_unstable();
            for &i in &idx {
                partition_of[i] = k;
            }
            partitions.push(Partition { id: pid.clone(), members: idx });
        }
        let objective = Objective::resolve(&draft.objective, &draft.items)
            .map_err(ModelError::Invalid)?;
        let tables = draft.items.iter().map(ItemTable::new).collect();
        Ok(Self {
            items: draft.items,
            tables,
            partitions,
            partition_of,
            index,
            budget: draft.budget,
            reward_bound: draft.reward_bound,
            objective_spec: draft.objective,
            objective,
        })
    }

    pub fn to_draft(&self) -> InstanceDraft {
        InstanceDraft {
            items: self.items.clone(),
            matroid: self.matroid(),
            budget: self.budget,
            reward_bound: self.reward_bound,
            objective: self.objective_spec.clone(),
        }
    }

    pub fn matroid(&self) -> PartitionMatroid {
        PartitionMatroid(
            self.partitions
                .iter()
                .map(|p| (p.id.clone(), p.members.iter().map(|&i| self.items[i].id.clone()).collect()))
                .collect(),
        )
    }

    pub fn items(&self) -> &[ExpandedItem] {
        &self.items
    }

    pub fn item(&self, i: usize) -> &ExpandedItem {
        &self.items[i]
    }

    pub fn table(&self, i: usize) -> &ItemTable {
        &self.tables[i]
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn partition_of(&self, i: usize) -> usize {
        self.partition_of[i]
    }

    pub fn budget(&self) -> Size {
        self.budget
    }

    pub fn reward_bound(&self) -> Reward {
        self.reward_bound
    }

    pub fn objective(&self) -> &Objective {
        &self.objective
    }

    pub fn objective_spec(&self) -> &ObjectiveSpec {
        &self.objective_spec
    }

    /// Latest slot at which item `i` may start and still finish in budget.
    pub fn last_start(&self, i: usize) -> Size {
        self.budget + 1 - self.items[i].cap
    }

    /// Number of distinct base items.
    pub fn n_base(&self) -> usize {
        self.items.iter().map(|it| it.base_id.as_str()).collect::<BTreeSet<_>>().len()
    }
}

fn cap_width(budget: Size) -> usize {
    budget.max(1).to_string().len()
}

fn capped_copy(
    id: String,
    base_id: &str,
    partition_id: &str,
    sizes: &SizeDistribution,
    rewards: &RewardCurve,
    cap: Size,
) -> ExpandedItem {
    ExpandedItem {
        id,
        base_id: base_id.to_string(),
        partition_id: partition_id.to_string(),
        cap,
        sizes: sizes.capped(cap),
        rewards: rewards.restricted(cap),
    }
}

/// The copy of `item` whose size is truncated at `cap`.
pub fn apply_size_cap(item: &BaseItem, cap: Size, budget: Size) -> Result<ExpandedItem, ModelError> {
    if cap < 1 || cap > budget {
        return Err(ModelError::InvalidCap { cap, budget });
    }
    let id = format!("{}@{:0w$}", item.id, cap, w = cap_width(budget));
    Ok(capped_copy(id, &item.id, &item.id, &item.sizes, &item.rewards, cap))
}

/// One capped copy per item and cap in `1..=budget`; all copies of an
/// item share a partition named after it.
pub fn expand_with_caps(
    base_items: &[BaseItem],
    budget: Size,
    reward_bound: Reward,
    objective: ObjectiveSpec,
) -> Result<Instance, ModelError> {
    if budget < 1 {
        return Err(ModelError::ZeroBudget);
    }
    let mut seen = BTreeSet::new();
    for it in base_items {
        if !seen.insert(it.id.as_str()) {
            return Err(ModelError::DuplicateId(it.id.clone()));
        }
    }
    let mut items = Vec::with_capacity(base_items.len() * budget as usize);
    for it in base_items {
        for cap in 1..=budget {
            items.push(apply_size_cap(it, cap, budget)?);
        }
    }
    let matroid = PartitionMatroid::from_items(&items);
    Instance::new(InstanceDraft { items, matroid, budget, reward_bound, objective })
}

/// A revocable compute instance; `interruption` is the distribution of
/// the amount spent before it is taken back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotInstance {
    pub id: String,
    pub interruption: SizeDistribution,
}

/// A training job with one progress curve per spot instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpotJob {
    pub id: String,
    pub progress: BTreeMap<String, RewardCurve>,
}

/// Items `(job, instance, cap)`; one partition per spot instance.
///
/// The objective is keyed by job id. The reward bound is the largest
/// progress value on any curve (at least 1).
pub fn spot_reduce(
    jobs: &[SpotJob],
    spots: &[SpotInstance],
    budget: Size,
    objective: ObjectiveSpec,
) -> Result<Instance, ModelError> {
    if jobs.is_empty() {
        return Err(ModelError::Empty("job list"));
    }
    if spots.is_empty() {
        return Err(ModelError::Empty("spot instance list"));
    }
    if budget < 1 {
        return Err(ModelError::ZeroBudget);
    }
    let mut ids = BTreeSet::new();
    for id in jobs.iter().map(|j| &j.id).chain(spots.iter().map(|s| &s.id)) {
        if !ids.insert(id.as_str()) {
            return Err(ModelError::DuplicateId(id.clone()));
        }
    }
    let w = cap_width(budget);
    let mut items = Vec::new();
    let mut bound = 1;
    for job in jobs {
        for spot in spots {
            let curve = job.progress.get(&spot.id).cloned().unwrap_or_default();
            if curve.first_decrease().is_some() {
                return Err(ModelError::NonMonotoneProgress { job: job.id.clone(), instance: spot.id.clone() });
            }
            bound = bound.max(curve.max_reward());
            for cap in 1..=budget {
                let id = format!("{}@{}@{:0w$}", job.id, spot.id, cap);
                items.push(capped_copy(id, &job.id, &spot.id, &spot.interruption, &curve, cap));
            }
        }
    }
    let matroid = PartitionMatroid::from_items(&items);
    Instance::new(InstanceDraft { items, matroid, budget, reward_bound: bound, objective })
}

/// `q(j) = sum of p(s) over sizes s with R(s) = j`.
pub fn reward_distribution(item: &ExpandedItem) -> BTreeMap<Reward, f64> {
    let mut out = BTreeMap::new();
    for (s, p) in item.sizes.iter() {
        *out.entry(item.reward_at(s)).or_insert(0.0) += p;
    }
    out
}

/// Every broken invariant of `draft`; empty iff it is a valid instance.
pub fn validate_instance(draft: &InstanceDraft) -> Vec<Violation> {
    let mut out = Vec::new();
    if draft.budget < 1 {
        out.push(Violation::new("instance", "budget", "budget must be at least 1"));
    }
    if draft.reward_bound < 1 {
        out.push(Violation::new("instance", "reward_bound", "reward bound must be at least 1"));
    }
    let mut ids = BTreeSet::new();
    for it in &draft.items {
        if !ids.insert(it.id.as_str()) {
            out.push(Violation::new(&it.id, "id", "duplicate item id"));
        }
        let subject = format!("item {}", it.id);
        for d in it.sizes.issues() {
            out.push(Violation::new(&subject, "sizes", d));
        }
        if it.cap < 1 || it.cap > draft.budget {
            out.push(Violation::new(&subject, "cap", format!("cap {} outside 1..={}", it.cap, draft.budget)));
        }
        if it.sizes.max_size() > it.cap {
            out.push(Violation::new(
                &subject,
                "sizes",
                format!("size {} exceeds cap {}", it.sizes.max_size(), it.cap),
            ));
        }
        for s in it.sizes.sizes() {
            if !it.rewards.as_map().contains_key(&s) && it.rewards.as_map().range(..s).next().is_none() {
                out.push(Violation::new(&subject, "rewards", format!("no reward defined for size {s}")));
            }
        }
        if let Some((s, t)) = it.rewards.first_decrease() {
            out.push(Violation::new(
                &subject,
                "rewards",
                format!("reward decreases between sizes {s} and {t} ({} > {})", it.rewards.at(s), it.rewards.at(t)),
            ));
        }
        if it.rewards.max_reward() > draft.reward_bound {
            out.push(Violation::new(
                &subject,
                "rewards",
                format!("reward {} exceeds bound {}", it.rewards.max_reward(), draft.reward_bound),
            ));
        }
        if !draft.matroid.0.get(&it.partition_id).is_some_and(|m| m.contains(&it.id)) {
            out.push(Violation::new(
                &subject,
                "partition_id",
                format!("not listed in partition `{}`", it.partition_id),
            ));
        }
    }
    let mut covered: BTreeMap<&str, &str> = BTreeMap::new();
    for (pid, members) in &draft.matroid.0 {
        for m in members {
            if !ids.contains(m.as_str()) {
                out.push(Violation::new(format!("partition {pid}"), "members", format!("unknown item `{m}`")));
            }
            if let Some(prev) = covered.insert(m, pid) {
                out.push(Violation::new(
                    format!("partition {pid}"),
                    "members",
                    format!("item `{m}` also in partition `{prev}`"),
                ));
            }
        }
    }
    for id in &ids {
        if !covered.contains_key(id) {
            out.push(Violation::new(format!("item {id}"), "partition_id", "not covered by the matroid"));
        }
    }
    let base_ids: BTreeSet<&str> = draft.items.iter().map(|it| it.base_id.as_str()).collect();
    out.extend(draft.objective.issues(&base_ids));
    out
}
