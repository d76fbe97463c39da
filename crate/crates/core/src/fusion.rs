//! Optimality-preserving graph fusion.
//!
//! A set of operators with a single entry tensor and a single exit tensor can
//! be contracted into one *hypernode* that runs them back to back in a frozen
//! order. The hypernode keeps memory accounting exact by carrying the
//! sub-graph's internal peak `mem_g` as its workspace:
//! `extra = mem_g - size(input) - size(output)`, which may be negative.
//!
//! Fusing is only allowed when it cannot raise the optimal peak of the whole
//! graph. Two tests decide that:
//!
//! * [`check_monotonic_linear`] accepts a chain whose transient footprints are
//!   monotone, with the largest stable footprint at the matching end.
//! * [`check_general_fusable`] accepts an isolated sub-graph when *every*
//!   partially executed state of it holds at least as much as its entry and
//!   its exit tensor. The frozen order is the sub-graph's optimal one.
//!
//! Checking only the frozen order's own transients is not enough: another
//! schedule of the whole graph can park the sub-graph in a cheap state that
//! the frozen order never visits. The unit tests hold such a case.
//!
//! [`iterative_fusion`] applies both tests until nothing changes.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bitset::OpSet;
use crate::footprint::{evaluate_unchecked, FootprintTrace, Schedule, ScheduleError};
use crate::graph::{
    is_isolated_subgraph, ComputationGraph, GraphBuilder, GraphError, Isolation,
    IsolationViolation, OpId, Producer, TensorId,
};
use crate::solver::{solve, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionKind {
    Increasing,
    Decreasing,
    General,
}

/// A sub-graph that passed a fusion test, with the order it will be frozen in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionPlan {
    pub kind: FusionKind,
    pub members: OpSet,
    /// Internal schedule, as operator ids of the graph that was checked.
    pub order: Vec<OpId>,
    pub input: TensorId,
    pub output: TensorId,
    pub mem_g: i64,
    /// Internal transients, from the entry tensor alone to the exit tensor
    /// alone.
    pub transient: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NotFusable {
    #[error("fewer than two operators")]
    TooSmall,
    #[error("{size} operators exceed the limit of {limit}")]
    TooLarge { size: usize, limit: usize },
    #[error("not an isolated sub-graph: {0:?}")]
    NotIsolated(IsolationViolation),
    #[error("not a linear chain at operator {0}")]
    NotLinear(OpId),
    #[error("operator {0} does not depend on the entry tensor")]
    Detached(OpId),
    #[error("entry tensor stays resident to the end")]
    PinnedInput,
    #[error("transients are not monotone")]
    NotMonotone,
    #[error("interior state {state:?} holds {transient}, below the entry size {bound}")]
    InteriorDipBelowInput {
        state: Vec<OpId>,
        transient: i64,
        bound: i64,
    },
    #[error("interior state {state:?} holds {transient}, below the exit size {bound}")]
    InteriorDipBelowOutput {
        state: Vec<OpId>,
        transient: i64,
        bound: i64,
    },
    #[error("more than {0} interior states")]
    TooManyStates(usize),
    #[error("internal schedule could not be proven optimal")]
    Unproven,
}

impl NotFusable {
    /// Short machine-readable reason.
    pub fn code(&self) -> &'static str {
        match self {
            NotFusable::TooSmall => "too-small",
            NotFusable::TooLarge { .. } => "too-large",
            NotFusable::NotIsolated(_) => "not-isolated",
            NotFusable::NotLinear(_) => "not-linear",
            NotFusable::Detached(_) => "detached",
            NotFusable::PinnedInput => "pinned-input",
            NotFusable::NotMonotone => "not-monotone",
            NotFusable::InteriorDipBelowInput { .. } => "interior-dip-below-input",
            NotFusable::InteriorDipBelowOutput { .. } => "interior-dip-below-output",
            NotFusable::TooManyStates(_) => "too-many-states",
            NotFusable::Unproven => "unproven",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FusionError {
    #[error("fusion check failed: {0}")]
    CheckFailed(NotFusable),
    #[error("contraction would create a cycle")]
    WouldCreateCycle,
    #[error("internal schedule is not legal: {0}")]
    IllegalInternalSchedule(String),
    #[error(transparent)]
    Graph(GraphError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FootprintError {
    #[error("record for `{0}` is inconsistent: footprint would be negative")]
    NegativeFootprint(String),
}

/// One contraction, as recorded in [`FusedGraph::records`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionRecord {
    pub hypernode: String,
    pub kind: FusionKind,
    /// Operators of the graph at the time of fusion, in internal order.
    pub members: Vec<String>,
    /// The same block in original operator ids.
    pub original: Vec<OpId>,
    pub mem_g: i64,
    pub input_size: i64,
    pub output_size: i64,
    pub transient: Vec<i64>,
    pub cycle: usize,
}

/// Stable footprint of a hypernode step, where `live_context` counts every
/// tensor resident across the step including the hypernode's own boundary
/// tensors.
pub fn hypernode_stable_footprint(
    record: &FusionRecord,
    live_context: i64,
) -> Result<i64, FootprintError> {
    let s = live_context + record.mem_g - record.input_size - record.output_size;
    if s < 0 || record.mem_g < record.input_size || record.mem_g < record.output_size {
        return Err(FootprintError::NegativeFootprint(record.hypernode.clone()));
    }
    Ok(s)
}

/// A contracted graph plus the way back to the graph it came from.
#[derive(Debug, Clone)]
pub struct FusedGraph {
    pub original: ComputationGraph,
    pub graph: ComputationGraph,
    /// `expansion[v]` lists the original operators that `v` runs, in order.
    pub expansion: Vec<Vec<OpId>>,
    pub records: Vec<FusionRecord>,
    /// Sweeps run by [`iterative_fusion`], including the final idle one.
    pub cycles: usize,
}

impl FusedGraph {
    pub fn identity(g: &ComputationGraph) -> Self {
        FusedGraph {
            original: g.clone(),
            graph: g.clone(),
            expansion: (0..g.num_ops()).map(|o| vec![o]).collect(),
            records: Vec::new(),
            cycles: 0,
        }
    }

    pub fn num_fusions(&self) -> usize {
        self.records.len()
    }

    /// Replaces every hypernode in `sched` by its frozen internal order.
    pub fn expand(&self, sched: &Schedule) -> Result<Schedule, ScheduleError> {
        sched.check(&self.graph)?;
        Ok(Schedule::new(
            sched
                .order()
                .iter()
                .flat_map(|&v| self.expansion[v].iter().copied())
                .collect(),
        ))
    }

    /// Record of the hypernode that currently sits at `v`, if any.
    pub fn record_of(&self, v: OpId) -> Option<&FusionRecord> {
        let id = &self.graph.op(v).id;
        self.records.iter().rev().find(|r| &r.hypernode == id)
    }

    pub fn report(&self) -> FusionReport {
        FusionReport {
            raw_ops: self.original.num_ops(),
            fused_ops: self.graph.num_ops(),
            cycles: self.cycles,
            hypernodes: self
                .records
                .iter()
                .map(|r| ReportEntry {
                    hypernode: r.hypernode.clone(),
                    members: r
                        .original
                        .iter()
                        .map(|&o| self.original.op(o).id.clone())
                        .collect(),
                    mem_g: r.mem_g,
                    cycle: r.cycle,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub hypernode: String,
    pub members: Vec<String>,
    pub mem_g: i64,
    pub cycle: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionReport {
    pub raw_ops: usize,
    pub fused_ops: usize,
    pub cycles: usize,
    pub hypernodes: Vec<ReportEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionConfig {
    /// Largest candidate sub-graph.
    pub max_subgraph: usize,
    /// Cap on interior states enumerated per general check.
    pub max_states: usize,
    /// Used for the internal schedule of general candidates.
    pub solver: SolverConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            max_subgraph: 20,
            max_states: 1 << 16,
            solver: SolverConfig::default(),
        }
    }
}

impl FusionConfig {
    pub fn with_max_subgraph(mut self, m: usize) -> Self {
        self.max_subgraph = m;
        self
    }
}

fn isolation(g: &ComputationGraph, members: &OpSet) -> Result<(TensorId, TensorId), NotFusable> {
    match is_isolated_subgraph(g, members) {
        Isolation::Isolated { input, output } => {
            if g.tensor(input).is_output {
                Err(NotFusable::PinnedInput)
            } else {
                Ok((input, output))
            }
        }
        Isolation::NotIsolated(v) => Err(NotFusable::NotIsolated(v)),
    }
}

/// Fast path for chains `seq[0] -> seq[1] -> ...`.
///
/// Fusable when the chain is isolated and either its transients never
/// decrease and no stable footprint exceeds the last one, or its transients
/// never increase and no stable footprint exceeds the first one. Equal
/// neighbours count as monotone.
pub fn check_monotonic_linear(g: &ComputationGraph, seq: &[OpId]) -> Result<FusionPlan, NotFusable> {
    if seq.len() < 2 {
        return Err(NotFusable::TooSmall);
    }
    let first = g.op(seq[0]);
    if first.inputs.len() != 1 {
        return Err(NotFusable::NotLinear(seq[0]));
    }
    for w in seq.windows(2) {
        let (a, b) = (g.op(w[0]), g.op(w[1]));
        let t = g.tensor(a.output);
        if b.inputs != [a.output] || t.consumers != [w[1]] || t.is_output {
            return Err(NotFusable::NotLinear(w[1]));
        }
    }
    let members = OpSet::of(g.num_ops(), seq.iter().copied());
    if members.len() != seq.len() {
        return Err(NotFusable::NotLinear(seq[0]));
    }
    let (input, output) = isolation(g, &members)?;

    let mut transient = vec![g.tensor(input).size];
    let mut stable = Vec::with_capacity(seq.len());
    for &o in seq {
        let op = g.op(o);
        let out = g.tensor(op.output).size;
        stable.push(transient.last().unwrap() + out + op.extra);
        transient.push(out);
    }
    let n = stable.len();
    let non_decreasing = transient.windows(2).all(|w| w[0] <= w[1]);
    let non_increasing = transient.windows(2).all(|w| w[0] >= w[1]);
    let kind = if non_decreasing && stable.iter().all(|&s| s <= stable[n - 1]) {
        FusionKind::Increasing
    } else if non_increasing && stable.iter().all(|&s| s <= stable[0]) {
        FusionKind::Decreasing
    } else {
        return Err(NotFusable::NotMonotone);
    };
    Ok(FusionPlan {
        kind,
        members,
        order: seq.to_vec(),
        input,
        output,
        mem_g: *stable.iter().max().unwrap(),
        transient,
    })
}

/// General test for an arbitrary operator set.
///
/// Requires isolation, that every member reads at least one tensor, and that
/// every proper, non-empty, dependency-closed subset of the members leaves at
/// least `max(size(input), size(output))` resident. The frozen order is an
/// optimal schedule of the sub-graph.
pub fn check_general_fusable(
    g: &ComputationGraph,
    members: &OpSet,
    cfg: &FusionConfig,
) -> Result<FusionPlan, NotFusable> {
    if members.len() < 2 {
        return Err(NotFusable::TooSmall);
    }
    if members.len() > cfg.max_subgraph {
        return Err(NotFusable::TooLarge {
            size: members.len(),
            limit: cfg.max_subgraph,
        });
    }
    let (input, output) = isolation(g, members)?;
    if let Some(o) = members.iter().find(|&o| g.op(o).inputs.is_empty()) {
        return Err(NotFusable::Detached(o));
    }
    let sub = g
        .extract(members)
        .expect("an isolated set extracts cleanly");
    let sg = &sub.graph;
    let in_size = g.tensor(input).size;
    let out_size = g.tensor(output).size;

    interior_states(sg, in_size, out_size, cfg.max_states).map_err(|e| match e {
        Interior::TooMany => NotFusable::TooManyStates(cfg.max_states),
        Interior::Dip {
            state,
            transient,
            below_input,
        } => {
            let state = state.into_iter().map(|o| sub.ops[o]).collect();
            if below_input {
                NotFusable::InteriorDipBelowInput {
                    state,
                    transient,
                    bound: in_size,
                }
            } else {
                NotFusable::InteriorDipBelowOutput {
                    state,
                    transient,
                    bound: out_size,
                }
            }
        }
    })?;

    let r = solve(sg, &cfg.solver).map_err(|_| NotFusable::Unproven)?;
    if !r.proven_optimal {
        return Err(NotFusable::Unproven);
    }
    let trace = evaluate_unchecked(sg, r.schedule.order());
    Ok(FusionPlan {
        kind: FusionKind::General,
        members: members.clone(),
        order: r.schedule.order().iter().map(|&o| sub.ops[o]).collect(),
        input,
        output,
        mem_g: trace.peak,
        transient: trace.transient,
    })
}

enum Interior {
    TooMany,
    Dip {
        state: Vec<OpId>,
        transient: i64,
        below_input: bool,
    },
}

/// Walks every dependency-closed subset of `sg` and checks its transient.
fn interior_states(
    sg: &ComputationGraph,
    in_size: i64,
    out_size: i64,
    cap: usize,
) -> Result<(), Interior> {
    let n = sg.num_ops();
    let topo = sg.topological_order();
    let mut done = OpSet::new(n);
    let mut visited = 0usize;

    fn resident(sg: &ComputationGraph, done: &OpSet) -> i64 {
        sg.tensors()
            .iter()
            .filter(|t| {
                let created = match t.producer {
                    Producer::GraphInput => true,
                    Producer::Op(p) => done.contains(p),
                };
                created && (t.is_output || t.consumers.iter().any(|&c| !done.contains(c)))
            })
            .map(|t| t.size)
            .sum()
    }

    fn walk(
        sg: &ComputationGraph,
        topo: &[OpId],
        k: usize,
        done: &mut OpSet,
        visited: &mut usize,
        bounds: (i64, i64, usize),
    ) -> Result<(), Interior> {
        let (in_size, out_size, cap) = bounds;
        if k == topo.len() {
            *visited += 1;
            if *visited > cap {
                return Err(Interior::TooMany);
            }
            if done.is_empty() || done.is_full() {
                return Ok(());
            }
            let t = resident(sg, done);
            if t < in_size || t < out_size {
                return Err(Interior::Dip {
                    state: done.iter().collect(),
                    transient: t,
                    below_input: t < in_size,
                });
            }
            return Ok(());
        }
        let o = topo[k];
        walk(sg, topo, k + 1, done, visited, bounds)?;
        if sg.predecessors(o).iter().all(|&p| done.contains(p)) {
            done.insert(o);
            let r = walk(sg, topo, k + 1, done, visited, bounds);
            done.remove(o);
            r?;
        }
        Ok(())
    }

    walk(sg, &topo, 0, &mut done, &mut visited, (in_size, out_size, cap))
}

fn fresh_id(g: &ComputationGraph, counter: usize) -> String {
    let mut id = format!("fused{counter}");
    while g.op_index(&id).is_some() || g.tensor_index(&id).is_some() {
        id.push('_');
    }
    id
}

/// Contracts `plan.members` into one hypernode running `plan.order`.
fn contract(fg: &FusedGraph, plan: &FusionPlan, cycle: usize) -> Result<FusedGraph, FusionError> {
    let g = &fg.graph;
    let id = fresh_id(g, fg.records.len());
    let first = plan.members.first().expect("non-empty plan");
    let in_size = g.tensor(plan.input).size;
    let out_size = g.tensor(plan.output).size;

    let mut b = GraphBuilder::new(g.unit());
    for &t in g.inputs() {
        b.input(g.tensor(t).id.clone(), g.tensor(t).size);
    }
    let mut expansion = Vec::with_capacity(g.num_ops() - plan.members.len() + 1);
    for (o, op) in g.ops().iter().enumerate() {
        if o == first {
            let name = plan
                .order
                .iter()
                .map(|&m| g.op(m).name.as_str())
                .collect::<Vec<_>>()
                .join("+");
            b.raw_op(
                id.clone(),
                name,
                vec![g.tensor(plan.input).id.clone()],
                vec![(g.tensor(plan.output).id.clone(), out_size)],
                plan.mem_g - in_size - out_size,
                true,
            );
            expansion.push(
                plan.order
                    .iter()
                    .flat_map(|&m| fg.expansion[m].iter().copied())
                    .collect(),
            );
        } else if !plan.members.contains(o) {
            let out = g.tensor(op.output);
            b.raw_op(
                op.id.clone(),
                op.name.clone(),
                op.inputs.iter().map(|&t| g.tensor(t).id.clone()).collect(),
                vec![(out.id.clone(), out.size)],
                op.extra,
                true,
            );
            expansion.push(fg.expansion[o].clone());
        }
    }
    for t in g.tensors() {
        if t.is_output && !t.consumers.is_empty() {
            b.pin(t.id.clone());
        }
    }
    let graph = b.build().map_err(|e| match e {
        GraphError::CycleDetected { .. } => FusionError::WouldCreateCycle,
        e => FusionError::Graph(e),
    })?;

    let record = FusionRecord {
        hypernode: id,
        kind: plan.kind,
        members: plan.order.iter().map(|&m| g.op(m).id.clone()).collect(),
        original: plan
            .order
            .iter()
            .flat_map(|&m| fg.expansion[m].iter().copied())
            .collect(),
        mem_g: plan.mem_g,
        input_size: in_size,
        output_size: out_size,
        transient: plan.transient.clone(),
        cycle,
    };
    let mut records = fg.records.clone();
    records.push(record);
    Ok(FusedGraph {
        original: fg.original.clone(),
        graph,
        expansion,
        records,
        cycles: fg.cycles,
    })
}

/// Contracts `members` with the given internal order, without any
/// optimality test. `mem_g` is the order's internal peak.
pub fn fuse(fg: &FusedGraph, members: &OpSet, internal: &[OpId]) -> Result<FusedGraph, FusionError> {
    let g = &fg.graph;
    let (input, output) = match is_isolated_subgraph(g, members) {
        Isolation::Isolated { input, output } => (input, output),
        Isolation::NotIsolated(v) => {
            return Err(FusionError::CheckFailed(NotFusable::NotIsolated(v)))
        }
    };
    let sub = g.extract(members).map_err(FusionError::Graph)?;
    let mut local = HashMap::new();
    for (i, &o) in sub.ops.iter().enumerate() {
        local.insert(o, i);
    }
    let order: Option<Vec<OpId>> = internal.iter().map(|o| local.get(o).copied()).collect();
    let order = order.ok_or_else(|| {
        FusionError::IllegalInternalSchedule("order mentions a non-member".into())
    })?;
    let sched = Schedule::new(order);
    sched
        .check(&sub.graph)
        .map_err(|e| FusionError::IllegalInternalSchedule(e.to_string()))?;
    let trace: FootprintTrace = evaluate_unchecked(&sub.graph, sched.order());
    let plan = FusionPlan {
        kind: FusionKind::General,
        members: members.clone(),
        order: internal.to_vec(),
        input,
        output,
        mem_g: trace.peak,
        transient: trace.transient,
    };
    contract(fg, &plan, fg.cycles)
}

/// Runs the cheapest applicable test on `members` and contracts it.
pub fn fuse_checked(
    fg: &FusedGraph,
    members: &OpSet,
    cfg: &FusionConfig,
) -> Result<FusedGraph, FusionError> {
    let plan = check_candidate(&fg.graph, members, cfg).map_err(FusionError::CheckFailed)?;
    contract(fg, &plan, fg.cycles)
}

/// Members in topological order when they form a simple chain.
fn as_chain(g: &ComputationGraph, members: &OpSet) -> Option<Vec<OpId>> {
    let heads: Vec<OpId> = members
        .iter()
        .filter(|&o| !g.predecessors(o).iter().any(|&p| members.contains(p)))
        .collect();
    let [mut cur] = heads[..] else { return None };
    let mut seq = vec![cur];
    while seq.len() < members.len() {
        let next: Vec<OpId> = g
            .successors(cur)
            .iter()
            .copied()
            .filter(|&s| members.contains(s))
            .collect();
        let [n] = next[..] else { return None };
        seq.push(n);
        cur = n;
    }
    Some(seq)
}

fn check_candidate(
    g: &ComputationGraph,
    members: &OpSet,
    cfg: &FusionConfig,
) -> Result<FusionPlan, NotFusable> {
    if let Some(seq) = as_chain(g, members) {
        if let Ok(plan) = check_monotonic_linear(g, &seq) {
            return Ok(plan);
        }
    }
    check_general_fusable(g, members, cfg)
}

/// Candidate sets entered through tensor `x`: everything between the
/// consumers of `x` and one of their common descendants, largest first.
fn candidates(g: &ComputationGraph, x: TensorId, max: usize) -> Vec<OpSet> {
    let n = g.num_ops();
    let consumers = &g.tensor(x).consumers;
    if consumers.is_empty() {
        return Vec::new();
    }
    let reach = g.reachability();
    let below = |c: OpId| {
        let mut s = reach.descendants(c).clone();
        s.insert(c);
        s
    };
    let mut common = OpSet::full(n);
    let mut any = OpSet::new(n);
    for &c in consumers {
        let d = below(c);
        common.intersect_with(&d);
        any.union_with(&d);
    }
    let mut out: Vec<(usize, OpId, OpSet)> = Vec::new();
    for r in common.iter() {
        let mut u = reach.ancestors(r).clone();
        u.insert(r);
        u.intersect_with(&any);
        if (2..=max).contains(&u.len()) && !out.iter().any(|(_, _, s)| *s == u) {
            out.push((u.len(), r, u));
        }
    }
    out.sort_by_key(|(len, r, _)| (std::cmp::Reverse(*len), *r));
    out.into_iter().map(|(_, _, s)| s).collect()
}

/// Repeated sweeps over every tensor as a candidate entry point, fusing the
/// largest passing candidate each time, until a sweep fuses nothing. A bound
/// below 2 admits no candidate and returns the graph unchanged.
pub fn iterative_fusion(g: &ComputationGraph, max_subgraph: usize) -> FusedGraph {
    iterative_fusion_with(g, &FusionConfig::default().with_max_subgraph(max_subgraph))
}

pub fn iterative_fusion_with(g: &ComputationGraph, cfg: &FusionConfig) -> FusedGraph {
    let mut fg = FusedGraph::identity(g);
    if cfg.max_subgraph < 2 {
        return fg;
    }
    let mut rejected: HashMap<Vec<Vec<OpId>>, NotFusable> = HashMap::new();
    loop {
        fg.cycles += 1;
        let cycle = fg.cycles;
        let mut fired = false;
        let names: Vec<String> = fg.graph.tensors().iter().map(|t| t.id.clone()).collect();
        for name in names {
            let Some(x) = fg.graph.tensor_index(&name) else {
                continue;
            };
            for u in candidates(&fg.graph, x, cfg.max_subgraph) {
                let mut key: Vec<Vec<OpId>> = u.iter().map(|o| fg.expansion[o].clone()).collect();
                key.sort();
                if rejected.contains_key(&key) {
                    continue;
                }
                match check_candidate(&fg.graph, &u, cfg) {
                    Ok(plan) => {
                        fg = contract(&fg, &plan, cycle).expect("checked candidates contract");
                        fired = true;
                        break;
                    }
                    Err(why) => {
                        rejected.insert(key, why);
                    }
                }
            }
        }
        if !fired {
            return fg;
        }
    }
}
