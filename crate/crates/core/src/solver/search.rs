use std::cmp::Reverse;
use std::collections::hash_map::Entry;
use std::collections::{BinaryHeap, HashMap};
use std::time::Instant;

use super::{SolveResult, SolverConfig, StopReason};
use crate::bitset::OpSet;
use crate::footprint::{evaluate_unchecked, rpo_schedule, Schedule};
use crate::graph::{ComputationGraph, OpId};

/// Precomputed masks for O(words) state transitions.
struct Transitions<'g> {
    g: &'g ComputationGraph,
    preds: Vec<OpSet>,
    /// Per tensor: every consumer, or `None` when the tensor never leaves.
    release: Vec<Option<OpSet>>,
    /// Operators ordered by decreasing working set.
    by_working_set: Vec<(i64, OpId)>,
    output_residency: i64,
}

impl<'g> Transitions<'g> {
    fn new(g: &'g ComputationGraph) -> Self {
        let n = g.num_ops();
        let preds = (0..n)
            .map(|o| OpSet::of(n, g.predecessors(o).iter().copied()))
            .collect();
        let release = g
            .tensors()
            .iter()
            .map(|t| (!t.is_output).then(|| OpSet::of(n, t.consumers.iter().copied())))
            .collect();
        let mut by_working_set: Vec<(i64, OpId)> =
            (0..n).map(|o| (g.working_set(o), o)).collect();
        by_working_set.sort_by_key(|&(w, o)| (Reverse(w), o));
        let output_residency = g.outputs().iter().map(|&t| g.tensor(t).size).sum();
        Transitions {
            g,
            preds,
            release,
            by_working_set,
            output_residency,
        }
    }

    fn ready(&self, done: &OpSet, op: OpId) -> bool {
        !done.contains(op) && self.preds[op].is_subset(done)
    }

    /// Stable footprint of running `op` after `done`, and the transient
    /// footprint afterwards. `after` must already include `op`.
    fn step(&self, transient: i64, after: &OpSet, op: OpId) -> (i64, i64) {
        let o = self.g.op(op);
        let out = self.g.tensor(o.output).size;
        let stable = transient + out + o.extra;
        let freed: i64 = o
            .inputs
            .iter()
            .filter(|&&t| matches!(&self.release[t], Some(c) if c.is_subset(after)))
            .map(|&t| self.g.tensor(t).size)
            .sum();
        (stable, transient + out - freed)
    }

    /// Lower bound on the peak of any completion of `done`.
    fn remaining_bound(&self, done: &OpSet) -> i64 {
        let ws = self
            .by_working_set
            .iter()
            .find(|&&(_, o)| !done.contains(o))
            .map_or(i64::MIN, |&(w, _)| w);
        if done.is_full() {
            ws
        } else {
            ws.max(self.output_residency)
        }
    }
}

/// At each step run the ready operator with the smallest stable footprint,
/// preferring ones that free more memory, then lower ids.
pub fn greedy_schedule(g: &ComputationGraph) -> Schedule {
    let tr = Transitions::new(g);
    let n = g.num_ops();
    let mut done = OpSet::new(n);
    let mut transient = g.total_input_size();
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<((i64, i64, OpId), i64)> = None;
        for op in 0..n {
            if !tr.ready(&done, op) {
                continue;
            }
            let mut after = done.clone();
            after.insert(op);
            let (stable, next) = tr.step(transient, &after, op);
            let key = (stable, next, op);
            if best.as_ref().is_none_or(|(k, _)| key < *k) {
                best = Some((key, next));
            }
        }
        let ((_, _, op), next) = best.expect("a DAG always has a ready operator");
        done.insert(op);
        transient = next;
        order.push(op);
    }
    Schedule::new(order)
}

struct Node {
    set: OpSet,
    peak: i64,
    transient: i64,
    parent: usize,
    op: OpId,
}

const ROOT: usize = usize::MAX;

pub(super) fn branch_and_bound(g: &ComputationGraph, cfg: &SolverConfig) -> SolveResult {
    let started = Instant::now();
    let n = g.num_ops();
    let tr = Transitions::new(g);

    let mut incumbent = rpo_schedule(g);
    let mut best = evaluate_unchecked(g, incumbent.order()).peak;
    let greedy = greedy_schedule(g);
    let greedy_peak = evaluate_unchecked(g, greedy.order()).peak;
    if greedy_peak < best {
        best = greedy_peak;
        incumbent = greedy;
    }

    let mut arena: Vec<Node> = Vec::new();
    let mut index: HashMap<OpSet, usize> = HashMap::new();
    // min-heap on (bound, deeper first, discovery order)
    let mut heap: BinaryHeap<Reverse<(i64, Reverse<usize>, u64, usize)>> = BinaryHeap::new();
    let mut seq = 0u64;

    let root = OpSet::new(n);
    let root_bound = tr.remaining_bound(&root);
    arena.push(Node {
        set: root.clone(),
        peak: i64::MIN,
        transient: g.total_input_size(),
        parent: ROOT,
        op: 0,
    });
    index.insert(root, 0);
    heap.push(Reverse((root_bound, Reverse(0), seq, 0)));

    let mut explored = 0u64;
    let mut stop = StopReason::Completed;
    let mut found: Option<usize> = None;

    while let Some(Reverse((bound, Reverse(depth), _, idx))) = heap.pop() {
        if bound >= best {
            // Keys pop in non-decreasing order: nothing left can beat the incumbent.
            break;
        }
        let node = &arena[idx];
        let node_peak = node.peak;
        if node_peak.max(tr.remaining_bound(&node.set)) < bound {
            continue; // superseded by a better path to the same set
        }
        if depth == n {
            found = Some(idx);
            break;
        }
        if explored & 1023 == 0 && started.elapsed() >= cfg.time_limit {
            stop = StopReason::TimeLimit;
            break;
        }
        if cfg.node_limit.is_some_and(|limit| explored >= limit) {
            stop = StopReason::NodeLimit;
            break;
        }
        explored += 1;

        let set = node.set.clone();
        let transient = node.transient;
        for op in 0..n {
            if !tr.ready(&set, op) {
                continue;
            }
            let mut after = set.clone();
            after.insert(op);
            let (stable, next_transient) = tr.step(transient, &after, op);
            let peak = node_peak.max(stable);
            if peak >= best {
                continue;
            }
            let key = peak.max(tr.remaining_bound(&after));
            if key >= best {
                continue;
            }
            let child = match index.entry(after) {
                Entry::Occupied(e) => {
                    let c = *e.get();
                    if arena[c].peak <= peak {
                        continue;
                    }
                    arena[c].peak = peak;
                    arena[c].parent = idx;
                    arena[c].op = op;
                    c
                }
                Entry::Vacant(e) => {
                    let c = arena.len();
                    arena.push(Node {
                        set: e.key().clone(),
                        peak,
                        transient: next_transient,
                        parent: idx,
                        op,
                    });
                    e.insert(c);
                    c
                }
            };
            seq += 1;
            heap.push(Reverse((key, Reverse(depth + 1), seq, child)));
        }
    }

    if let Some(goal) = found {
        let mut order = Vec::with_capacity(n);
        let mut cur = goal;
        while arena[cur].parent != ROOT {
            order.push(arena[cur].op);
            cur = arena[cur].parent;
        }
        order.reverse();
        incumbent = Schedule::new(order);
        best = arena[goal].peak;
    }
    debug_assert_eq!(evaluate_unchecked(g, incumbent.order()).peak, best);

    SolveResult {
        schedule: incumbent,
        peak: best,
        proven_optimal: stop == StopReason::Completed,
        explored_states: explored,
        wall_time: started.elapsed(),
        stop,
        legal_orders: None,
    }
}
