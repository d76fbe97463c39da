//! Shared strategies and independent oracles for the integration tests.
//!
//! The oracles here only look at operator inputs, outputs and sizes. They do
//! not call into the crate's footprint, solver or reachability code.

#![allow(dead_code)]

use memsched::{generate, ComputationGraph, GeneratorSpec, GraphBuilder, OpId};
use proptest::prelude::*;

/// Raw material for a random DAG: per operator, picks into the pool of
/// earlier tensors, an output size and a workspace.
#[derive(Debug, Clone)]
pub struct DagPlan {
    pub inputs: Vec<i64>,
    pub ops: Vec<(Vec<usize>, i64, i64)>,
}

impl DagPlan {
    pub fn build(&self) -> ComputationGraph {
        let mut b = GraphBuilder::new("KB");
        let mut pool: Vec<String> = Vec::new();
        for (i, &s) in self.inputs.iter().enumerate() {
            b.input(format!("in{i}"), s);
            pool.push(format!("in{i}"));
        }
        let mut used = vec![false; self.inputs.len()];
        let last = self.ops.len() - 1;
        for (i, (picks, size, extra)) in self.ops.iter().enumerate() {
            // bias picks towards recent tensors so graphs are not all fans
            let window = pool.len().min(4);
            let mut ins: Vec<String> = picks
                .iter()
                .map(|&p| pool[pool.len() - 1 - p % window].clone())
                .collect();
            if i == last {
                // keep every graph input consumed
                for (k, u) in used.iter().enumerate() {
                    if !u {
                        ins.push(format!("in{k}"));
                    }
                }
            }
            for name in &ins {
                if let Some(k) = name.strip_prefix("in").and_then(|k| k.parse::<usize>().ok()) {
                    used[k] = true;
                }
            }
            let refs: Vec<&str> = ins.iter().map(String::as_str).collect();
            b.op_with_extra(&format!("op{i}"), &refs, &format!("t{i}"), *size, *extra);
            pool.push(format!("t{i}"));
        }
        b.build().expect("plans always build")
    }
}

/// Random DAGs with 1..=`max_ops` operators, 1..=2 graph inputs, fan-in
/// 1..=3 and sizes in `sizes`.
pub fn arb_dag(max_ops: usize, sizes: std::ops::RangeInclusive<i64>, max_extra: i64) -> impl Strategy<Value = ComputationGraph> {
    (1usize..=2, 1usize..=max_ops)
        .prop_flat_map(move |(ni, n)| {
            let op = (
                prop::collection::vec(any::<usize>(), 1..=3),
                sizes.clone(),
                0..=max_extra,
            );
            (
                prop::collection::vec(sizes.clone(), ni),
                prop::collection::vec(op, n),
            )
        })
        .prop_map(|(inputs, ops)| DagPlan { inputs, ops }.build())
}

/// Per-step liveness simulation.
///
/// A tensor is live from the step its producer runs (graph inputs: step 0)
/// through the step of its last consumer, or through the last step if
/// nothing consumes it. Returns (stable for steps 1..=n, transient for steps
/// 0..=n).
pub fn simulate(g: &ComputationGraph, order: &[OpId]) -> (Vec<i64>, Vec<i64>) {
    let n = order.len();
    let mut pos = vec![0usize; g.num_ops()];
    for (j, &op) in order.iter().enumerate() {
        pos[op] = j + 1;
    }
    let mut start = vec![0usize; g.num_tensors()];
    let mut end = vec![0usize; g.num_tensors()];
    for (t, ts) in g.tensors().iter().enumerate() {
        start[t] = (0..g.num_ops()).find(|&o| g.op(o).output == t).map_or(0, |o| pos[o]);
        let last_use = (0..g.num_ops())
            .filter(|&o| g.op(o).inputs.contains(&t))
            .map(|o| pos[o])
            .max();
        end[t] = match last_use {
            Some(e) if !ts.is_output => e,
            _ => n,
        };
    }
    let live_sum = |pred: &dyn Fn(usize) -> bool| -> i64 {
        (0..g.num_tensors()).filter(|&t| pred(t)).map(|t| g.tensor(t).size).sum()
    };
    let stable = (1..=n)
        .map(|i| live_sum(&|t| start[t] <= i && i <= end[t]) + g.op(order[i - 1]).extra)
        .collect();
    let transient = (0..=n)
        .map(|i| live_sum(&|t| start[t] <= i && (i < end[t] || g.tensor(t).is_output)))
        .collect();
    (stable, transient)
}

/// Does every operator come after the producers of its inputs?
pub fn is_legal(g: &ComputationGraph, order: &[OpId]) -> bool {
    if order.len() != g.num_ops() {
        return false;
    }
    let mut pos = vec![usize::MAX; g.num_ops()];
    for (j, &op) in order.iter().enumerate() {
        if op >= g.num_ops() || pos[op] != usize::MAX {
            return false;
        }
        pos[op] = j;
    }
    (0..g.num_ops()).all(|o| {
        g.op(o).inputs.iter().all(|&t| {
            (0..g.num_ops())
                .find(|&p| g.op(p).output == t)
                .is_none_or(|p| pos[p] < pos[o])
        })
    })
}

/// Every legal order by plain recursion, with its peak under [`simulate`].
pub fn all_orders(g: &ComputationGraph) -> Vec<(Vec<OpId>, i64)> {
    fn rec(g: &ComputationGraph, prefix: &mut Vec<OpId>, out: &mut Vec<(Vec<OpId>, i64)>) {
        if prefix.len() == g.num_ops() {
            if is_legal(g, prefix) {
                let peak = simulate(g, prefix).0.into_iter().max().unwrap_or(0);
                out.push((prefix.clone(), peak));
            }
            return;
        }
        for op in 0..g.num_ops() {
            if prefix.contains(&op) {
                continue;
            }
            // prune: every producer of op's inputs must already be placed
            let ready = g.op(op).inputs.iter().all(|&t| {
                (0..g.num_ops())
                    .find(|&p| g.op(p).output == t)
                    .is_none_or(|p| prefix.contains(&p))
            });
            if ready {
                prefix.push(op);
                rec(g, prefix, out);
                prefix.pop();
            }
        }
    }
    let mut out = Vec::new();
    rec(g, &mut Vec::new(), &mut out);
    out
}

pub fn oracle_optimum(g: &ComputationGraph) -> i64 {
    all_orders(g).into_iter().map(|(_, p)| p).min().expect("DAGs have an order")
}

/// Ancestors of every operator by depth-first search over input producers.
pub fn dfs_ancestors(g: &ComputationGraph) -> Vec<Vec<bool>> {
    let n = g.num_ops();
    let producer = |t: usize| (0..n).find(|&p| g.op(p).output == t);
    (0..n)
        .map(|u| {
            let mut seen = vec![false; n];
            let mut stack = vec![u];
            while let Some(v) = stack.pop() {
                for &t in &g.op(v).inputs {
                    if let Some(p) = producer(t) {
                        if !seen[p] {
                            seen[p] = true;
                            stack.push(p);
                        }
                    }
                }
            }
            seen
        })
        .collect()
}

/// `cases` runs, with failing seeds saved under `proptest-regressions/`.
pub fn config(cases: u32, name: &'static str) -> ProptestConfig {
    ProptestConfig {
        cases,
        failure_persistence: Some(Box::new(prop::test_runner::FileFailurePersistence::Direct(name))),
        ..ProptestConfig::default()
    }
}

/// x(3) -> a -> y(2), with a workspace of 5.
pub fn single_op() -> ComputationGraph {
    GraphBuilder::new("KB")
        .input("x", 3)
        .op_with_extra("a", &["x"], "y", 2, 5)
        .build()
        .unwrap()
}

/// Source, two branches of two operators, sink; every tensor 4.
pub fn diamond() -> ComputationGraph {
    generate(&GeneratorSpec::ParallelBranches {
        branches: 2,
        depth: 2,
        residual: false,
        size: 4,
    })
    .unwrap()
}
