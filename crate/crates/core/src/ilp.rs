//! The scheduling problem as a 0-1 integer program.
//!
//! * `O_i_j = 1` when operator `i` runs at step `j` (steps `1..=n`).
//! * `T_t_j = 1` when tensor `t` is resident at step `j` (steps `0..=n`).
//! * `mem` bounds the resident size at every step and is minimized.
//!
//! Tensor ids follow the graph: tensor `i < n` is the output of operator `i`,
//! graph inputs come after. Pruning never adds rows; it records variables that
//! are provably zero in [`IlpModel::fixed`].

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::graph::{ComputationGraph, OpId, Producer, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Var {
    O { op: OpId, step: usize },
    T { tensor: TensorId, step: usize },
    Mem,
}

impl Var {
    pub fn name(&self) -> String {
        self.to_string()
    }

    /// Inverse of [`Var::name`].
    pub fn parse(s: &str) -> Option<Var> {
        if s == "mem" {
            return Some(Var::Mem);
        }
        let mut parts = s.split('_');
        let kind = parts.next()?;
        let a = parts.next()?.parse().ok()?;
        let step = parts.next()?.parse().ok()?;
        if parts.next().is_some() {
            return None;
        }
        match kind {
            "O" => Some(Var::O { op: a, step }),
            "T" => Some(Var::T { tensor: a, step }),
            _ => None,
        }
    }
}

impl fmt::Display for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Var::O { op, step } => write!(f, "O_{op}_{step}"),
            Var::T { tensor, step } => write!(f, "T_{tensor}_{step}"),
            Var::Mem => f.write_str("mem"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstraintTag {
    BijectionStep,
    BijectionOp,
    InputAvailability,
    Persistence,
    InitialEmpty,
    OutputLive,
    Memory,
    PruneAncOp,
    PruneAncT,
    PruneDesOp,
    PruneDesT,
}

impl ConstraintTag {
    pub const ALL: [ConstraintTag; 11] = [
        ConstraintTag::BijectionStep,
        ConstraintTag::BijectionOp,
        ConstraintTag::InputAvailability,
        ConstraintTag::Persistence,
        ConstraintTag::InitialEmpty,
        ConstraintTag::OutputLive,
        ConstraintTag::Memory,
        ConstraintTag::PruneAncOp,
        ConstraintTag::PruneAncT,
        ConstraintTag::PruneDesOp,
        ConstraintTag::PruneDesT,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConstraintTag::BijectionStep => "bijection-step",
            ConstraintTag::BijectionOp => "bijection-op",
            ConstraintTag::InputAvailability => "input-availability",
            ConstraintTag::Persistence => "persistence",
            ConstraintTag::InitialEmpty => "initial-empty",
            ConstraintTag::OutputLive => "output-live",
            ConstraintTag::Memory => "memory",
            ConstraintTag::PruneAncOp => "prune-anc-op",
            ConstraintTag::PruneAncT => "prune-anc-T",
            ConstraintTag::PruneDesOp => "prune-des-op",
            ConstraintTag::PruneDesT => "prune-des-T",
        }
    }

    fn row_prefix(&self) -> &'static str {
        match self {
            ConstraintTag::BijectionStep => "step",
            ConstraintTag::BijectionOp => "once",
            ConstraintTag::InputAvailability => "avail",
            ConstraintTag::Persistence => "keep",
            ConstraintTag::InitialEmpty => "init",
            ConstraintTag::OutputLive => "live",
            ConstraintTag::Memory => "mem",
            _ => "fix",
        }
    }
}

impl fmt::Display for ConstraintTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Le,
    Eq,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Constraint {
    pub tag: ConstraintTag,
    /// Indices identifying the row within its tag, used for naming.
    pub key: Vec<usize>,
    pub terms: Vec<(i64, Var)>,
    pub sense: Sense,
    pub rhs: i64,
}

impl Constraint {
    pub fn name(&self) -> String {
        let mut s = self.tag.row_prefix().to_string();
        for k in &self.key {
            let _ = write!(s, "_{k}");
        }
        s
    }

    /// Terms with fixed variables substituted out (all fixings are zero).
    pub fn free_terms<'a>(
        &'a self,
        fixed: &'a BTreeMap<Var, ConstraintTag>,
    ) -> impl Iterator<Item = (i64, Var)> + 'a {
        self.terms
            .iter()
            .copied()
            .filter(move |(c, v)| *c != 0 && !fixed.contains_key(v))
    }

    pub fn lhs(&self, a: &Assignment) -> i64 {
        self.terms.iter().map(|&(c, v)| c * a.get(v)).sum()
    }

    pub fn satisfied(&self, a: &Assignment) -> bool {
        let lhs = self.lhs(a);
        match self.sense {
            Sense::Le => lhs <= self.rhs,
            Sense::Eq => lhs == self.rhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IlpModel {
    pub num_ops: usize,
    pub num_tensors: usize,
    pub pruned: bool,
    pub constraints: Vec<Constraint>,
    /// Variables pinned to zero by pruning, with the rule that pinned them.
    pub fixed: BTreeMap<Var, ConstraintTag>,
}

/// A value for every variable; missing entries read as zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Assignment {
    pub values: BTreeMap<Var, i64>,
}

impl Assignment {
    pub fn get(&self, v: Var) -> i64 {
        self.values.get(&v).copied().unwrap_or(0)
    }

    pub fn set(&mut self, v: Var, value: i64) {
        if value == 0 {
            self.values.remove(&v);
        } else {
            self.values.insert(v, value);
        }
    }
}

impl IlpModel {
    pub fn variables(&self) -> impl Iterator<Item = Var> + '_ {
        let n = self.num_ops;
        let ops = (0..n).flat_map(move |op| (1..=n).map(move |step| Var::O { op, step }));
        let tensors = (0..self.num_tensors)
            .flat_map(move |tensor| (0..=n).map(move |step| Var::T { tensor, step }));
        ops.chain(tensors).chain(std::iter::once(Var::Mem))
    }

    pub fn is_free(&self, v: Var) -> bool {
        !self.fixed.contains_key(&v)
    }

    /// Rows that still constrain something once fixed variables are removed:
    /// at least one free variable left, and for `<=` rows, some assignment of
    /// the free binaries that could exceed the right-hand side.
    pub fn active_constraints(&self) -> impl Iterator<Item = &Constraint> + '_ {
        self.constraints.iter().filter(|c| {
            let mut free = c.free_terms(&self.fixed).peekable();
            if free.peek().is_none() {
                return false;
            }
            match c.sense {
                Sense::Eq => true,
                Sense::Le => {
                    let mut max_lhs = 0;
                    for (coef, v) in free {
                        if v == Var::Mem && coef > 0 {
                            return true;
                        }
                        max_lhs += coef.max(0);
                    }
                    max_lhs > c.rhs
                }
            }
        })
    }

    /// First constraint the assignment violates, if any. Fixed variables must
    /// be zero and binaries must be 0 or 1.
    pub fn violation(&self, a: &Assignment) -> Option<String> {
        for (&v, &value) in &a.values {
            if v != Var::Mem && !(0..=1).contains(&value) {
                return Some(format!("{v} = {value} is not binary"));
            }
            if let Some(tag) = self.fixed.get(&v) {
                return Some(format!("{v} is fixed to 0 by {tag}"));
            }
        }
        if a.get(Var::Mem) < 0 {
            return Some("mem is negative".into());
        }
        self.constraints
            .iter()
            .find(|c| !c.satisfied(a))
            .map(Constraint::name)
    }
}

/// Builds the model for `g`. With `prune`, variables outside each operator's
/// feasible step window are fixed to zero.
pub fn build_model(g: &ComputationGraph, prune: bool) -> IlpModel {
    let n = g.num_ops();
    let nt = g.num_tensors();
    let mut cs = Vec::new();

    for j in 1..=n {
        cs.push(Constraint {
            tag: ConstraintTag::BijectionStep,
            key: vec![j],
            terms: (0..n).map(|i| (1, Var::O { op: i, step: j })).collect(),
            sense: Sense::Eq,
            rhs: 1,
        });
    }
    for i in 0..n {
        cs.push(Constraint {
            tag: ConstraintTag::BijectionOp,
            key: vec![i],
            terms: (1..=n).map(|j| (1, Var::O { op: i, step: j })).collect(),
            sense: Sense::Eq,
            rhs: 1,
        });
    }
    for (i, op) in g.ops().iter().enumerate() {
        for j in 1..=n {
            for &k in &op.inputs {
                cs.push(Constraint {
                    tag: ConstraintTag::InputAvailability,
                    key: vec![i, j, k],
                    terms: vec![(1, Var::O { op: i, step: j }), (-1, Var::T { tensor: k, step: j })],
                    sense: Sense::Le,
                    rhs: 0,
                });
            }
        }
    }
    for (ti, t) in g.tensors().iter().enumerate() {
        for j in 1..=n {
            let mut terms = vec![
                (1, Var::T { tensor: ti, step: j }),
                (-1, Var::T { tensor: ti, step: j - 1 }),
            ];
            if let Producer::Op(p) = t.producer {
                terms.push((-1, Var::O { op: p, step: j }));
            }
            cs.push(Constraint {
                tag: ConstraintTag::Persistence,
                key: vec![ti, j],
                terms,
                sense: Sense::Le,
                rhs: 0,
            });
        }
    }
    for (ti, t) in g.tensors().iter().enumerate() {
        cs.push(Constraint {
            tag: ConstraintTag::InitialEmpty,
            key: vec![ti],
            terms: vec![(1, Var::T { tensor: ti, step: 0 })],
            sense: Sense::Eq,
            rhs: i64::from(t.producer == Producer::GraphInput),
        });
    }
    for (ti, _) in g.tensors().iter().enumerate().filter(|(_, t)| t.is_output) {
        cs.push(Constraint {
            tag: ConstraintTag::OutputLive,
            key: vec![ti],
            terms: vec![(1, Var::T { tensor: ti, step: n })],
            sense: Sense::Eq,
            rhs: 1,
        });
    }
    for j in 1..=n {
        let mut terms: Vec<(i64, Var)> = g
            .tensors()
            .iter()
            .enumerate()
            .map(|(ti, t)| (t.size, Var::T { tensor: ti, step: j }))
            .collect();
        terms.extend(g.ops().iter().enumerate().map(|(k, op)| (op.extra, Var::O { op: k, step: j })));
        terms.push((-1, Var::Mem));
        cs.push(Constraint {
            tag: ConstraintTag::Memory,
            key: vec![j],
            terms,
            sense: Sense::Le,
            rhs: 0,
        });
    }

    let mut fixed = BTreeMap::new();
    if prune {
        let reach = g.reachability();
        let mut fix = |v: Var, tag: ConstraintTag| {
            fixed.entry(v).or_insert(tag);
        };
        for i in 0..n {
            let anc = reach.ancestors(i).len();
            let des = reach.descendants(i).len();
            for j in 1..=anc.min(n) {
                fix(Var::O { op: i, step: j }, ConstraintTag::PruneAncOp);
                fix(Var::T { tensor: i, step: j }, ConstraintTag::PruneAncT);
            }
            for j in (n - des + 1)..=n {
                fix(Var::O { op: i, step: j }, ConstraintTag::PruneDesOp);
            }
        }
        for (ti, t) in g.tensors().iter().enumerate().filter(|(_, t)| !t.is_output) {
            let slack = t
                .consumers
                .iter()
                .map(|&u| reach.descendants(u).len())
                .min()
                .expect("non-output tensors have consumers");
            for j in (n - slack + 1)..=n {
                fix(Var::T { tensor: ti, step: j }, ConstraintTag::PruneDesT);
            }
        }
    }

    IlpModel {
        num_ops: n,
        num_tensors: nt,
        pruned: prune,
        constraints: cs,
        fixed,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelStats {
    pub variables_total: usize,
    pub variables_free: usize,
    pub constraints: usize,
    /// Active rows per tag, plus fixed-variable counts under the prune tags.
    pub per_tag: BTreeMap<String, usize>,
}

pub fn model_stats(model: &IlpModel) -> ModelStats {
    let n = model.num_ops;
    let variables_total = n * n + model.num_tensors * (n + 1) + 1;
    let mut per_tag = BTreeMap::new();
    let mut constraints = 0;
    for c in model.active_constraints() {
        constraints += 1;
        *per_tag.entry(c.tag.as_str().to_string()).or_insert(0) += 1;
    }
    for tag in model.fixed.values() {
        *per_tag.entry(tag.as_str().to_string()).or_insert(0) += 1;
    }
    ModelStats {
        variables_total,
        variables_free: variables_total - model.fixed.len(),
        constraints,
        per_tag,
    }
}

/// Free operator steps, ascending, for `op`.
pub fn op_window(model: &IlpModel, op: OpId) -> Vec<usize> {
    (1..=model.num_ops)
        .filter(|&step| model.is_free(Var::O { op, step }))
        .collect()
}

const LINE_WIDTH: usize = 78;

struct Wrapped {
    out: String,
    col: usize,
}

impl Wrapped {
    fn start(&mut self, s: &str) {
        self.out.push(' ');
        self.out.push_str(s);
        self.col = s.len() + 1;
    }

    fn push(&mut self, s: &str) {
        if self.col + 1 + s.len() > LINE_WIDTH {
            self.out.push_str("\n   ");
            self.col = 3;
        } else {
            self.out.push(' ');
            self.col += 1;
        }
        self.out.push_str(s);
        self.col += s.len();
    }

    fn end(&mut self) {
        self.out.push('\n');
        self.col = 0;
    }
}

fn term_tokens(first: bool, c: i64, v: Var) -> Vec<String> {
    let mut toks = Vec::new();
    if c < 0 {
        toks.push("-".to_string());
    } else if !first {
        toks.push("+".to_string());
    }
    let mag = c.unsigned_abs();
    if mag == 1 {
        toks.push(v.to_string());
    } else {
        toks.push(format!("{mag} {v}"));
    }
    toks
}

/// CPLEX-style LP text. Fixed variables are substituted out and rows that
/// become vacuous are dropped. Output depends only on the model.
pub fn export_lp(model: &IlpModel) -> String {
    let mut w = Wrapped {
        out: String::new(),
        col: 0,
    };
    let _ = writeln!(
        w.out,
        "\\ memsched schedule model: {} operators, {} tensors{}",
        model.num_ops,
        model.num_tensors,
        if model.pruned { ", pruned" } else { "" }
    );
    w.out.push_str("Minimize\n obj: mem\nSubject To\n");
    for c in model.active_constraints() {
        w.start(&format!("{}:", c.name()));
        let mut first = true;
        for (coef, v) in c.free_terms(&model.fixed) {
            for tok in term_tokens(first, coef, v) {
                w.push(&tok);
            }
            first = false;
        }
        w.push(match c.sense {
            Sense::Le => "<=",
            Sense::Eq => "=",
        });
        w.push(&c.rhs.to_string());
        w.end();
    }
    w.out.push_str("Bounds\n mem >= 0\nBinaries\n");
    let mut any = false;
    for v in model.variables().filter(|&v| v != Var::Mem && model.is_free(v)) {
        if !any {
            w.start(&v.to_string());
            any = true;
        } else {
            w.push(&v.to_string());
        }
    }
    if any {
        w.end();
    }
    w.out.push_str("End\n");
    w.out
}

pub fn write_lp(model: &IlpModel, path: impl AsRef<Path>) -> io::Result<()> {
    std::fs::write(path, export_lp(model))
}
