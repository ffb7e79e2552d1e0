//! JSON instance and solution files, CSV reports.
//!
//! Instance files come in two shapes. A base file lists original items and
//! is expanded with every size cap on load:
//!
//! ```json
//! {"budget": 2, "reward_bound": 2, "expanded": false,
//!  "objective": {"family": "additive", "params": {"weights": {"a": 1.0}}},
//!  "base_items": [{"id": "a", "sizes": {"1": "0.5", "2": 0.5}, "rewards": {"1": 1, "2": 2}}]}
//! ```
//!
//! An expanded file lists capped items with their partition and base id.
//! Probabilities may be JSON numbers or decimal strings. Writing always
//! produces the expanded shape.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    expand_with_caps, BaseItem, ExpandedItem, Instance, InstanceDraft, ModelError, PartitionMatroid, Reward, RewardCurve,
    Size, SizeDistribution, Violation,
};
use crate::objective::ObjectiveSpec;
use crate::polytope::{ConstraintSystem, FractionalSolution, PolytopeError, LP_TOL};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Format(String),
    #[error("{}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Polytope(#[from] PolytopeError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A probability written as a JSON number or a decimal string.
#[derive(Clone, Debug, Deserialize)]
#[serde(untagged)]
enum Prob {
    Number(f64),
    Text(String),
}

impl Prob {
    fn value(&self) -> Result<f64, String> {
        match self {
            Prob::Number(x) => Ok(*x),
            Prob::Text(s) => s.trim().parse::<f64>().map_err(|_| format!("`{s}` is not a decimal number")),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseItemIn {
    id: String,
    sizes: BTreeMap<String, Prob>,
    rewards: BTreeMap<String, Reward>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExpandedItemIn {
    id: String,
    base_id: String,
    partition_id: String,
    cap: Size,
    sizes: BTreeMap<String, Prob>,
    rewards: BTreeMap<String, Reward>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceIn {
    budget: Size,
    reward_bound: Reward,
    objective: ObjectiveSpec,
    #[serde(default)]
    expanded: Option<bool>,
    #[serde(default)]
    base_items: Option<Vec<BaseItemIn>>,
    #[serde(default)]
    items: Option<Vec<ExpandedItemIn>>,
    #[serde(default)]
    partitions: Option<BTreeMap<String, Vec<String>>>,
}

#[derive(Serialize)]
struct InstanceOut<'a> {
    budget: Size,
    reward_bound: Reward,
    objective: &'a ObjectiveSpec,
    expanded: bool,
    items: &'a [ExpandedItem],
    partitions: &'a PartitionMatroid,
}

fn parse_sizes(subject: &str, raw: &BTreeMap<String, Prob>, out: &mut Vec<Violation>) -> SizeDistribution {
    let mut map = BTreeMap::new();
    for (k, p) in raw {
        let size = k.trim().parse::<Size>();
        let prob = p.value();
        match (size, prob) {
            (Ok(s), Ok(p)) => {
                map.insert(s, p);
            }
            (Err(_), _) => out.push(violation(subject, "sizes", format!("size key `{k}` is not a non-negative integer"))),
            (_, Err(e)) => out.push(violation(subject, "sizes", e)),
        }
    }
    SizeDistribution::from_map(map)
}

fn parse_rewards(subject: &str, raw: &BTreeMap<String, Reward>, out: &mut Vec<Violation>) -> RewardCurve {
    let mut pairs = Vec::new();
    for (k, &r) in raw {
        match k.trim().parse::<Size>() {
            Ok(s) => pairs.push((s, r)),
            Err(_) => out.push(violation(subject, "rewards", format!("size key `{k}` is not a non-negative integer"))),
        }
    }
    RewardCurve::new(pairs)
}

fn violation(subject: &str, field: &'static str, detail: String) -> Violation {
    Violation { subject: subject.to_string(), field, detail }
}

/// Parses and validates an instance file.
pub fn parse_instance(text: &str) -> Result<Instance, IoError> {
    let raw: InstanceIn = serde_json::from_str(text)?;
    let mut issues = Vec::new();
    let expanded = raw.expanded.unwrap_or(raw.items.is_some());
    match (expanded, &raw.base_items, &raw.items) {
        (false, Some(_), None) | (true, None, Some(_)) => {}
        (false, _, _) => return Err(IoError::Format("`expanded: false` requires `base_items` and no `items`".into())),
        (true, _, _) => return Err(IoError::Format("an expanded file requires `items` and no `base_items`".into())),
    }
    if expanded {
        let items: Vec<ExpandedItem> = raw
            .items
            .unwrap_or_default()
            .into_iter()
            .map(|it| ExpandedItem {
                sizes: parse_sizes(&it.id, &it.sizes, &mut issues),
                rewards: parse_rewards(&it.id, &it.rewards, &mut issues),
                id: it.id,
                base_id: it.base_id,
                partition_id: it.partition_id,
                cap: it.cap,
            })
            .collect();
        let matroid = match raw.partitions {
            Some(p) => PartitionMatroid(p.into_iter().map(|(k, v)| (k, v.into_iter().collect())).collect()),
            None => PartitionMatroid::from_items(&items),
        };
        if !issues.is_empty() {
            return Err(IoError::Invalid(issues));
        }
        let draft = InstanceDraft { items, matroid, budget: raw.budget, reward_bound: raw.reward_bound, objective: raw.objective };
        return Instance::new(draft).map_err(|e| match e {
            ModelError::Invalid(v) => IoError::Invalid(v),
            other => other.into(),
        });
    }
    if raw.partitions.is_some() {
        return Err(IoError::Format("`partitions` is only allowed in expanded files".into()));
    }
    let base: Vec<BaseItem> = raw
        .base_items
        .unwrap_or_default()
        .into_iter()
        .map(|it| BaseItem {
            sizes: parse_sizes(&it.id, &it.sizes, &mut issues),
            rewards: parse_rewards(&it.id, &it.rewards, &mut issues),
            id: it.id,
        })
        .collect();
    for it in &base {
        for msg in it.sizes.issues() {
            issues.push(violation(&it.id, "sizes", msg));
        }
    }
    if !issues.is_empty() {
        return Err(IoError::Invalid(issues));
    }
    expand_with_caps(&base, raw.budget, raw.reward_bound, raw.objective).map_err(|e| match e {
        ModelError::Invalid(v) => IoError::Invalid(v),
        other => other.into(),
    })
}

/// Serializes an instance in the expanded shape.
pub fn write_instance(instance: &Instance) -> String {
    let matroid = instance.matroid();
    let out = InstanceOut {
        budget: instance.budget(),
        reward_bound: instance.reward_bound(),
        objective: instance.objective_spec(),
        expanded: true,
        items: instance.items(),
        partitions: &matroid,
    };
    let mut s = serde_json::to_string_pretty(&out).expect("instance serializes");
    s.push('\n');
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub b: f64,
    pub delta: f64,
    pub seed: u64,
    pub xbar: BTreeMap<String, f64>,
    /// item id -> slot -> start probability; zero entries are omitted.
    pub x_start: BTreeMap<String, BTreeMap<String, f64>>,
    /// Every variable of the relaxation, in system order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
}

impl SolutionFile {
    pub fn new(instance: &Instance, solution: &FractionalSolution, b: f64, delta: f64, seed: u64, include_values: bool) -> Self {
        let ids = instance.items().iter().map(|it| it.id.clone());
        let xbar = ids.clone().zip(solution.xbar().iter().copied()).collect();
        let x_start = ids
            .zip(solution.x_start())
            .map(|(id, row)| {
                let slots = row.iter().enumerate().filter(|(_, &x)| x != 0.0).map(|(k, &x)| ((k + 1).to_string(), x)).collect();
                (id, slots)
            })
            .collect();
        Self { b, delta, seed, xbar, x_start, values: include_values.then(|| solution.values().to_vec()) }
    }

    /// The solution as a point of `system`. Without stored values the
    /// remaining variables are completed from the start probabilities.
    pub fn to_solution(&self, instance: &Instance, system: &ConstraintSystem) -> Result<FractionalSolution, IoError> {
        if let Some(values) = &self.values {
            return Ok(FractionalSolution::from_values(system, values.clone(), LP_TOL)?);
        }
        let b = instance.budget() as usize;
        let mut rows = vec![vec![0.0; b]; instance.n_items()];
        for (id, slots) in &self.x_start {
            let i = instance.index_of(id).ok_or_else(|| IoError::Format(format!("solution names unknown item `{id}`")))?;
            for (slot, &x) in slots {
                let t: usize = slot.parse().map_err(|_| IoError::Format(format!("slot `{slot}` of `{id}` is not an integer")))?;
                if t < 1 || t > b {
                    return Err(IoError::Format(format!("slot {t} of `{id}` is outside 1..={b}")));
                }
                rows[i][t - 1] = x;
            }
        }
        Ok(FractionalSolution::from_starts(system, &rows)?)
    }
}

pub fn parse_solution(text: &str) -> Result<SolutionFile, IoError> {
    Ok(serde_json::from_str(text)?)
}

pub fn write_solution(file: &SolutionFile) -> String {
    let mut s = serde_json::to_string_pretty(file).expect("solution serializes");
    s.push('\n');
    s
}

/// Writes `rows` as CSV with a header row.
pub fn write_csv<T: Serialize>(out: impl Write, rows: &[T]) -> Result<(), IoError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String, IoError> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gen::{canonical_instance, random_instance, spot_instance, ObjectiveFamily, RandomParams, SpotParams};
    use crate::polytope::build_constraints;

    const BASE: &str = r#"{
        "budget": 2, "reward_bound": 2, "expanded": false,
        "objective": {"family": "additive", "params": {"weights": {"a": 1.0, "b": 1.0}}},
        "base_items": [
            {"id": "a", "sizes": {"1": "0.5", "2": 0.5}, "rewards": {"1": 1, "2": 2}},
            {"id": "b", "sizes": {"1": "1"}, "rewards": {"1": 1}}
        ]}"#;

    #[test]
    fn base_file_expands() {
        let inst = parse_instance(BASE).unwrap();
        assert_eq!(inst, canonical_instance());
    }

    #[test]
    fn round_trip() {
        let mut all = vec![canonical_instance(), spot_instance(&SpotParams { jobs: 2, instances: 2, budget: 4, reward_bound: 3 }, 3).unwrap()];
        for family in ObjectiveFamily::ALL {
            all.push(random_instance(&RandomParams { n_base: 3, budget: 6, reward_bound: 3, family, deterministic: false }, 5).unwrap());
        }
        for inst in all {
            let text = write_instance(&inst);
            assert_eq!(parse_instance(&text).unwrap(), inst);
            assert_eq!(write_instance(&parse_instance(&text).unwrap()), text);
        }
    }

    #[test]
    fn decimal_strings_parse_to_nearest_double() {
        let text = BASE.replace(r#""1": "0.5", "2": 0.5"#, r#""1": "0.1", "2": "0.9""#);
        let inst = parse_instance(&text).unwrap();
        assert_eq!(inst.item(inst.index_of("a@2").unwrap()).sizes.prob(1), 0.1);
    }

    #[test]
    fn violations_are_listed() {
        let text = BASE.replace(r#""2": 0.5"#, r#""2": 0.7"#).replace(r#""b": 1.0"#, r#""b": -1.0"#);
        match parse_instance(&text) {
            Err(IoError::Invalid(v)) => {
                assert!(v.iter().any(|x| x.subject == "a" && x.field == "sizes"), "{v:?}");
            }
            other => panic!("{other:?}"),
        }
        let text = BASE.replace(r#""1": "0.5""#, r#""1": "half""#);
        assert!(matches!(parse_instance(&text), Err(IoError::Invalid(_))));
        assert!(matches!(parse_instance("{"), Err(IoError::Json(_))));
        let text = BASE.replace(r#""expanded": false"#, r#""expanded": true"#);
        assert!(matches!(parse_instance(&text), Err(IoError::Format(_))));
    }

    #[test]
    fn solution_round_trip() {
        let inst = canonical_instance();
        let sys = build_constraints(&inst);
        let mut rows = vec![vec![0.0; 2]; inst.n_items()];
        rows[0][0] = 0.25;
        rows[2][1] = 0.5;
        let sol = FractionalSolution::from_starts(&sys, &rows).unwrap();
        for values in [false, true] {
            let file = SolutionFile::new(&inst, &sol, 0.5, 0.05, 9, values);
            let back = parse_solution(&write_solution(&file)).unwrap();
            assert_eq!(back, file);
            assert_eq!(back.to_solution(&inst, &sys).unwrap(), sol);
        }
    }

    #[test]
    fn csv_has_header_and_quotes() {
        #[derive(Serialize)]
        struct Row {
            name: String,
            value: f64,
        }
        let s = csv_string(&[Row { name: "a,b".into(), value: 1.5 }]).unwrap();
        assert_eq!(s, "name,value\n\"a,b\",1.5\n");
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

    fn arb_instance() -> impl Strategy<Value = Instance> {
        (1usize..=3, 1u32..=4, 1u32..=3, 0usize..3, any::<bool>(), any::<u64>()).prop_map(|(n_base, budget, reward_bound, f, deterministic, seed)| {
            let family = crate::gen::ObjectiveFamily::ALL[f];
            crate::gen::random_instance(&crate::gen::RandomParams { n_base, budget, reward_bound, family, deterministic }, seed).unwrap()
        })
    }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn instances_round_trip(inst in arb_instance()) {
                let text = write_instance(&inst);
                let back = parse_instance(&text).unwrap();
                prop_assert_eq!(&back, &inst);
                prop_assert_eq!(write_instance(&back), text);
            }
        }
    }
}
