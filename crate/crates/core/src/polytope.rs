//! Time-indexed LP relaxation over per-item Markov chains.
//!
//! Each item is an arm with a start node and forced-continuation nodes
//! `Mid(k, s)`: the arm has been pulled `k` times and its realized size is
//! `s`. A size-`s` item started in slot `t` occupies slots `t..t+s-1`.
//! Completed arms are absorbing and carry no variables.
//!
//! For every node `u` and slot `t` in `1..=B` there are two variables:
//! `x[u,t]` (the arm is pulled from `u` in slot `t`) and `s[u,t]` (the arm
//! sits at `u` at the start of slot `t`).

use std::fmt::{self, Write as _};

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use serde::Serialize;
use thiserror::Error;

use crate::model::{Instance, Size};

/// Primal feasibility / clamping tolerance for LP output.
pub const LP_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PolytopeError {
    #[error("weight vector has length {got}, expected {expected}")]
    WeightLength { got: usize, expected: usize },
    #[error("weight {value} for item {index} must be finite and non-negative")]
    BadWeight { index: usize, value: f64 },
    #[error("LP solver failed: {0}")]
    Solver(String),
    #[error("value vector has length {got}, expected {expected}")]
    ValueLength { got: usize, expected: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Node {
    Start { item: usize },
    Mid { item: usize, pulls: Size, size: Size },
}

impl Node {
    pub fn item(&self) -> usize {
        match *self {
            Node::Start { item } | Node::Mid { item, .. } => item,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    X,
    S,
}

/// Which group of the relaxation a constraint belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Family {
    /// `x <= s` at start nodes.
    PullBounded,
    /// `x = s` at continuation nodes.
    ForcedPull,
    /// At most one pull per slot.
    SlotCapacity,
    /// At most one started item per partition.
    Partition,
    /// Continuation nodes are empty in the first slot.
    MidInitial,
    /// Start-node mass decreases by what was pulled.
    StartFlow,
    /// Continuation mass comes from the previous pull.
    MidFlow,
    /// Starts that cannot finish within the budget are forbidden.
    StartFit,
    /// Variable lower bound.
    NonNegative,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmp {
    Le,
    Eq,
}

#[derive(Clone, Debug)]
pub struct Constraint {
    pub family: Family,
    pub label: String,
    pub terms: Vec<(usize, f64)>,
    pub cmp: Cmp,
    pub rhs: f64,
}

impl Constraint {
    fn lhs(&self, values: &[f64]) -> f64 {
        self.terms.iter().map(|&(v, c)| c * values[v]).sum()
    }
}

/// The start node and continuation nodes of every item.
pub fn build_nodes(instance: &Instance) -> Vec<Node> {
    let mut nodes = Vec::new();
    for (item, it) in instance.items().iter().enumerate() {
        nodes.push(Node::Start { item });
        for pulls in 1..it.sizes.max_size() {
            for size in it.sizes.sizes().filter(|&s| s > pulls) {
                nodes.push(Node::Mid { item, pulls, size });
            }
        }
    }
    nodes
}

#[derive(Clone, Debug)]
pub struct ConstraintSystem {
    budget: Size,
    item_ids: Vec<String>,
    nodes: Vec<Node>,
    start_node: Vec<usize>,
    /// Probability of the realized size for continuation nodes, 0 for starts.
    size_prob: Vec<f64>,
    constraints: Vec<Constraint>,
}

impl ConstraintSystem {
    pub fn budget(&self) -> Size {
        self.budget
    }

    pub fn n_items(&self) -> usize {
        self.start_node.len()
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    pub fn n_vars(&self) -> usize {
        self.nodes.len() * self.budget as usize * 2
    }

    /// Index of the `role` variable of node `node` in slot `t` (1-based).
    #[inline]
    pub fn var(&self, node: usize, t: Size, role: Role) -> usize {
        debug_assert!(t >= 1 && t <= self.budget);
        (node * self.budget as usize + (t - 1) as usize) * 2 + (role == Role::S) as usize
    }

    pub fn start_node(&self, item: usize) -> usize {
        self.start_node[item]
    }

    pub fn var_name(&self, v: usize) -> String {
        let role = if v % 2 == 0 { "x" } else { "s" };
        let t = (v / 2) % self.budget as usize + 1;
        let node = v / 2 / self.budget as usize;
        format!("{role}_{}_{t}", self.node_name(node))
    }

    fn node_name(&self, node: usize) -> String {
        match self.nodes[node] {
            Node::Start { item } => format!("start[{}]", self.item_ids[item]),
            Node::Mid { item, pulls, size } => format!("mid[{},{pulls},{size}]", self.item_ids[item]),
        }
    }

    /// The objective `sum_i w_i sum_t x[start(i), t]` as variable coefficients.
    fn objective_terms(&self, weights: &[f64]) -> Vec<(usize, f64)> {
        let mut out = Vec::new();
        for (item, &w) in weights.iter().enumerate() {
            if w != 0.0 {
                for t in 1..=self.budget {
                    out.push((self.var(self.start_node[item], t, Role::X), w));
                }
            }
        }
        out
    }

    /// The system in CPLEX LP text format, maximizing `weights . xbar`.
    pub fn to_lp_format(&self, weights: &[f64]) -> String {
        let sanitize = |s: String| s.replace(['[', ']', ','], "_").replace('@', "c");
        let expr = |terms: &[(usize, f64)]| {
            let mut s = String::new();
            for (k, &(v, c)) in terms.iter().enumerate() {
                let sign = if c < 0.0 { " - " } else if k == 0 { "" } else { " + " };
                let _ = write!(s, "{sign}{} {}", c.abs(), sanitize(self.var_name(v)));
            }
            if s.is_empty() {
                s.push('0');
            }
            s
        };
        let mut out = String::from("\\ stoknap relaxation\nMaximize\n obj: ");
        out.push_str(&expr(&self.objective_terms(weights)));
        out.push_str("\nSubject To\n");
        for (k, c) in self.constraints.iter().enumerate() {
            let op = match c.cmp {
                Cmp::Le => "<=",
                Cmp::Eq => "=",
            };
            let _ = writeln!(out, " c{k}: {} {op} {}", expr(&c.terms), c.rhs);
        }
        out.push_str("Bounds\n");
        for v in 0..self.n_vars() {
            let _ = writeln!(out, " {} >= 0", sanitize(self.var_name(v)));
        }
        out.push_str("End\n");
        out
    }
}

/// Emits every constraint group of the relaxation for `instance`.
pub fn build_constraints(instance: &Instance) -> ConstraintSystem {
    let budget = instance.budget();
    let nodes = build_nodes(instance);
    let mut start_node = vec![0; instance.n_items()];
    for (k, n) in nodes.iter().enumerate() {
        if let Node::Start { item } = *n {
            start_node[item] = k;
        }
    }
    let size_prob = nodes
        .iter()
        .map(|n| match *n {
            Node::Start { .. } => 0.0,
            Node::Mid { item, size, .. } => instance.item(item).sizes.prob(size),
        })
        .collect();
    let mut sys = ConstraintSystem {
        budget,
        item_ids: instance.items().iter().map(|it| it.id.clone()).collect(),
        nodes,
        start_node,
        size_prob,
        constraints: Vec::new(),
    };
    let mut out = Vec::new();
    let mut push = |family, label: String, terms: Vec<(usize, f64)>, cmp, rhs| {
        out.push(Constraint { family, label, terms, cmp, rhs });
    };
    let n_nodes = sys.nodes.len();
    for node in 0..n_nodes {
        for t in 1..=budget {
            let (x, s) = (sys.var(node, t, Role::X), sys.var(node, t, Role::S));
            match sys.nodes[node] {
                Node::Start { .. } => {
                    push(Family::PullBounded, format!("{} <= {}", sys.var_name(x), sys.var_name(s)), vec![(x, 1.0), (s, -1.0)], Cmp::Le, 0.0)
                }
                Node::Mid { .. } => {
                    push(Family::ForcedPull, format!("{} = {}", sys.var_name(x), sys.var_name(s)), vec![(x, 1.0), (s, -1.0)], Cmp::Eq, 0.0)
                }
            }
        }
    }
    for t in 1..=budget {
        let terms = (0..n_nodes).map(|node| (sys.var(node, t, Role::X), 1.0)).collect();
        push(Family::SlotCapacity, format!("slot {t} capacity"), terms, Cmp::Le, 1.0);
    }
    for part in instance.partitions() {
        let terms = part.members.iter().map(|&i| (sys.var(sys.start_node[i], 1, Role::S), 1.0)).collect();
        push(Family::Partition, format!("partition {}", part.id), terms, Cmp::Le, 1.0);
    }
    for node in 0..n_nodes {
        if let Node::Mid { .. } = sys.nodes[node] {
            let s = sys.var(node, 1, Role::S);
            push(Family::MidInitial, format!("{} = 0", sys.var_name(s)), vec![(s, 1.0)], Cmp::Eq, 0.0);
        }
    }
    for item in 0..instance.n_items() {
        let st = sys.start_node[item];
        for t in 2..=budget {
            let terms = vec![
                (sys.var(st, t, Role::S), 1.0),
                (sys.var(st, t - 1, Role::S), -1.0),
                (sys.var(st, t - 1, Role::X), 1.0),
            ];
            push(Family::StartFlow, format!("flow into {}", sys.var_name(terms[0].0)), terms, Cmp::Eq, 0.0);
        }
    }
    for node in 0..n_nodes {
        let Node::Mid { item, pulls, size } = sys.nodes[node] else { continue };
        let (parent, coeff) = if pulls == 1 {
            (sys.start_node[item], sys.size_prob[node])
        } else {
            let parent = sys
                .nodes
                .iter()
                .position(|n| *n == Node::Mid { item, pulls: pulls - 1, size })
                .expect("continuation chain is contiguous");
            (parent, 1.0)
        };
        for t in 2..=budget {
            let s = sys.var(node, t, Role::S);
            let terms = vec![(s, 1.0), (sys.var(parent, t - 1, Role::X), -coeff)];
            push(Family::MidFlow, format!("flow into {}", sys.var_name(s)), terms, Cmp::Eq, 0.0);
        }
    }
    for item in 0..instance.n_items() {
        for t in (instance.last_start(item) + 1)..=budget {
            let x = sys.var(sys.start_node[item], t, Role::X);
            push(Family::StartFit, format!("{} = 0 (cap does not fit)", sys.var_name(x)), vec![(x, 1.0)], Cmp::Eq, 0.0);
        }
    }
    sys.constraints = out;
    sys
}

/// A point of the relaxation with its per-item start probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct FractionalSolution {
    values: Vec<f64>,
    /// `x_start[i][t-1] = x[start(i), t]`.
    x_start: Vec<Vec<f64>>,
    xbar: Vec<f64>,
    tol: f64,
}

impl FractionalSolution {
    pub fn from_values(system: &ConstraintSystem, values: Vec<f64>, tol: f64) -> Result<Self, PolytopeError> {
        if values.len() != system.n_vars() {
            return Err(PolytopeError::ValueLength { got: values.len(), expected: system.n_vars() });
        }
        let x_start: Vec<Vec<f64>> = (0..system.n_items())
            .map(|i| (1..=system.budget).map(|t| values[system.var(system.start_node[i], t, Role::X)]).collect())
            .collect();
        let xbar = x_start.iter().map(|row| row.iter().sum()).collect();
        Ok(Self { values, x_start, xbar, tol })
    }

    /// Completes start-pull probabilities into a full point: the start
    /// mass in slot 1 is set to the total start probability and every other
    /// variable follows from the flow equations.
    pub fn from_starts(system: &ConstraintSystem, x_start: &[Vec<f64>]) -> Result<Self, PolytopeError> {
        let b = system.budget;
        if x_start.len() != system.n_items() || x_start.iter().any(|r| r.len() != b as usize) {
            return Err(PolytopeError::ValueLength { got: x_start.len(), expected: system.n_items() });
        }
        let mut v = vec![0.0; system.n_vars()];
        for (node, n) in system.nodes.iter().enumerate() {
            match *n {
                Node::Start { item } => {
                    let mut mass: f64 = x_start[item].iter().sum();
                    for t in 1..=b {
                        let x = x_start[item][(t - 1) as usize];
                        v[system.var(node, t, Role::S)] = mass;
                        v[system.var(node, t, Role::X)] = x;
                        mass -= x;
                    }
                }
                Node::Mid { item, pulls, .. } => {
                    // started at t - pulls with realized size `size`
                    let p = system.size_prob[node];
                    for t in (pulls + 1)..=b {
                        let m = x_start[item][(t - pulls - 1) as usize] * p;
                        v[system.var(node, t, Role::S)] = m;
                        v[system.var(node, t, Role::X)] = m;
                    }
                }
            }
        }
        Self::from_values(system, v, LP_TOL)
    }

    pub fn zero(system: &ConstraintSystem) -> Self {
        Self::from_values(system, vec![0.0; system.n_vars()], LP_TOL).expect("length matches")
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn x_start(&self) -> &[Vec<f64>] {
        &self.x_start
    }

    /// `x[start(item), t]` for a 1-based slot.
    pub fn start_prob(&self, item: usize, t: Size) -> f64 {
        self.x_start[item][(t - 1) as usize]
    }

    pub fn xbar(&self) -> &[f64] {
        &self.xbar
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            x_start: self.x_start.iter().map(|r| r.iter().map(|v| v * factor).collect()).collect(),
            xbar: self.xbar.iter().map(|v| v * factor).collect(),
            tol: self.tol,
        }
    }

    /// `self + step * direction`, variable by variable.
    pub fn add_scaled(&mut self, direction: &FractionalSolution, step: f64) {
        for (a, b) in self.values.iter_mut().zip(&direction.values) {
            *a += step * b;
        }
        for (ra, rb) in self.x_start.iter_mut().zip(&direction.x_start) {
            for (a, b) in ra.iter_mut().zip(rb) {
                *a += step * b;
            }
        }
        for (a, row) in self.xbar.iter_mut().zip(&self.x_start) {
            *a = row.iter().sum();
        }
    }
}

/// `xbar(i) = sum_t x[start(i), t]`.
pub fn inclusion_probability(solution: &FractionalSolution) -> Vec<f64> {
    solution.xbar.clone()
}

/// Maximizes `sum_i w_i xbar(i)` over the relaxation.
pub fn solve_weighted(system: &ConstraintSystem, weights: &[f64]) -> Result<FractionalSolution, PolytopeError> {
    if weights.len() != system.n_items() {
        return Err(PolytopeError::WeightLength { got: weights.len(), expected: system.n_items() });
    }
    if let Some(index) = weights.iter().position(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(PolytopeError::BadWeight { index, value: weights[index] });
    }
    let mut coeff = vec![0.0; system.n_vars()];
    for (v, c) in system.objective_terms(weights) {
        coeff[v] = c;
    }
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = coeff.iter().map(|&c| lp.add_var(c, (0.0, f64::INFINITY))).collect();
    for c in &system.constraints {
        let expr: Vec<_> = c.terms.iter().map(|&(v, k)| (vars[v], k)).collect();
        let op = match c.cmp {
            Cmp::Le => ComparisonOp::Le,
            Cmp::Eq => ComparisonOp::Eq,
        };
        lp.add_constraint(expr.as_slice(), op, c.rhs);
    }
    let sol = lp.solve().map_err(|e| PolytopeError::Solver(e.to_string()))?;
    let values = vars
        .iter()
        .map(|&v| {
            let x = *sol.var_value(v);
            if (-LP_TOL..0.0).contains(&x) {
                0.0
            } else {
                x
            }
        })
        .collect();
    FractionalSolution::from_values(system, values, LP_TOL)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConstraintViolation {
    /// Index into [`ConstraintSystem::constraints`], or `None` for a bound.
    pub index: Option<usize>,
    pub family: Family,
    pub label: String,
    /// Amount by which the constraint fails.
    pub slack: f64,
}

impl fmt::Display for ConstraintViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} violated by {:.3e}", self.label, self.slack)
    }
}

/// Every constraint or bound violated by more than `tol`.
pub fn check_feasibility(system: &ConstraintSystem, values: &[f64], tol: f64) -> Result<Vec<ConstraintViolation>, PolytopeError> {
    if values.len() != system.n_vars() {
        return Err(PolytopeError::ValueLength { got: values.len(), expected: system.n_vars() });
    }
    let mut out = Vec::new();
    for (k, c) in system.constraints.iter().enumerate() {
        let lhs = c.lhs(values);
        let slack = match c.cmp {
            Cmp::Le => lhs - c.rhs,
            Cmp::Eq => (lhs - c.rhs).abs(),
        };
        if slack > tol {
            out.push(ConstraintViolation { index: Some(k), family: c.family, label: c.label.clone(), slack });
        }
    }
    for (v, &x) in values.iter().enumerate() {
        if x < -tol {
            out.push(ConstraintViolation {
                index: None,
                family: Family::NonNegative,
                label: format!("{} >= 0", system.var_name(v)),
                slack: -x,
            });
        }
    }
    Ok(out)
}
