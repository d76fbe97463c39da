//! Schedules and their memory footprints.
//!
//! For a schedule of `n` operators there are `2n + 1` memory states. A tensor
//! is resident from the step of its producer (step 0 for graph inputs)
//! through the step of its last consumer, inclusive; graph outputs never
//! leave. The *stable* footprint `s[i]` (steps `1..=n`) is everything
//! resident while operator `i` runs plus that operator's workspace. The
//! *transient* footprint `t[i]` (steps `0..=n`) is what remains resident
//! between step `i` and step `i + 1`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ComputationGraph, OpId, Producer};

/// An execution order: `order[k]` runs at step `k + 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Schedule {
    order: Vec<OpId>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("schedule has {found} entries, graph has {expected} operators")]
    WrongLength { expected: usize, found: usize },
    #[error("operator {0} is not in the graph")]
    UnknownOp(OpId),
    #[error("operator `{0}` is scheduled twice")]
    Duplicate(String),
    #[error("`{consumer}` runs before `{producer}`, which produces its input `{tensor}`")]
    IllegalSchedule {
        tensor: String,
        producer: String,
        consumer: String,
    },
}

impl Schedule {
    pub fn new(order: Vec<OpId>) -> Self {
        Schedule { order }
    }

    pub fn order(&self) -> &[OpId] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn into_order(self) -> Vec<OpId> {
        self.order
    }

    pub fn ids(&self, g: &ComputationGraph) -> Vec<String> {
        self.order.iter().map(|&o| g.op(o).id.clone()).collect()
    }

    /// `positions()[op]` is the 1-based step of `op`.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.order.len()];
        for (k, &o) in self.order.iter().enumerate() {
            if o < pos.len() {
                pos[o] = k + 1;
            }
        }
        pos
    }

    /// Checks that the order is a permutation and respects every
    /// producer-before-consumer constraint.
    pub fn check(&self, g: &ComputationGraph) -> Result<(), ScheduleError> {
        let n = g.num_ops();
        if self.order.len() != n {
            return Err(ScheduleError::WrongLength {
                expected: n,
                found: self.order.len(),
            });
        }
        let mut pos = vec![0usize; n];
        for (k, &o) in self.order.iter().enumerate() {
            if o >= n {
                return Err(ScheduleError::UnknownOp(o));
            }
            if pos[o] != 0 {
                return Err(ScheduleError::Duplicate(g.op(o).id.clone()));
            }
            pos[o] = k + 1;
        }
        for &o in &self.order {
            for &t in &g.op(o).inputs {
                if let Producer::Op(p) = g.tensor(t).producer {
                    if pos[p] > pos[o] {
                        return Err(ScheduleError::IllegalSchedule {
                            tensor: g.tensor(t).id.clone(),
                            producer: g.op(p).id.clone(),
                            consumer: g.op(o).id.clone(),
                        });
                    }
                }
            }
        }
        Ok(())
    }
}

impl From<Vec<OpId>> for Schedule {
    fn from(order: Vec<OpId>) -> Self {
        Schedule::new(order)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintTrace {
    /// `stable[k]` is the footprint at step `k + 1`.
    pub stable: Vec<i64>,
    /// `transient[k]` is the footprint after step `k`; `transient[0]` is the
    /// total graph-input size.
    pub transient: Vec<i64>,
    pub peak: i64,
    /// Index into `stable` of the first maximal entry.
    pub peak_step: usize,
}

/// Stable and transient footprints of `sched` on `g`.
pub fn evaluate(g: &ComputationGraph, sched: &Schedule) -> Result<FootprintTrace, ScheduleError> {
    sched.check(g)?;
    Ok(evaluate_unchecked(g, sched.order()))
}

pub(crate) fn evaluate_unchecked(g: &ComputationGraph, order: &[OpId]) -> FootprintTrace {
    let n = order.len();
    let mut pos = vec![0usize; n];
    for (k, &o) in order.iter().enumerate() {
        pos[o] = k + 1;
    }
    // Difference arrays over steps 0..=n+1.
    let mut live = vec![0i64; n + 2];
    let mut carried = vec![0i64; n + 2];
    for tensor in g.tensors() {
        let start = match tensor.producer {
            Producer::GraphInput => 0,
            Producer::Op(p) => pos[p],
        };
        let end = if tensor.is_output {
            n + 1
        } else {
            tensor.consumers.iter().map(|&c| pos[c]).max().unwrap_or(start)
        };
        // resident during steps start..=end
        live[start] += tensor.size;
        live[(end + 1).min(n + 1)] -= tensor.size;
        // carried over the gaps start..end
        if end > start {
            carried[start] += tensor.size;
            carried[end.min(n + 1)] -= tensor.size;
        }
    }
    let mut stable = Vec::with_capacity(n);
    let mut transient = Vec::with_capacity(n + 1);
    let (mut l, mut c) = (0i64, 0i64);
    for step in 0..=n {
        l += live[step];
        c += carried[step];
        if step > 0 {
            stable.push(l + g.op(order[step - 1]).extra);
        }
        transient.push(c);
    }
    let (peak_step, peak) = first_max(&stable);
    FootprintTrace {
        stable,
        transient,
        peak,
        peak_step,
    }
}

fn first_max(values: &[i64]) -> (usize, i64) {
    let mut best = (0, i64::MIN);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    if values.is_empty() {
        (0, 0)
    } else {
        best
    }
}

/// Peak footprint of a legal schedule.
pub fn peak(g: &ComputationGraph, sched: &Schedule) -> Result<i64, ScheduleError> {
    evaluate(g, sched).map(|t| t.peak)
}

/// Reverse post-order baseline.
///
/// Depth-first search from the output operators (ascending id) walking
/// producer edges, visiting predecessors in ascending id; an operator is
/// emitted once all of its predecessors have been. The result is a
/// deterministic topological order that finishes one branch before starting
/// the next, the way framework default schedulers do.
pub fn rpo_schedule(g: &ComputationGraph) -> Schedule {
    let n = g.num_ops();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    let sinks = (0..n).filter(|&o| g.successors(o).is_empty());
    for root in sinks {
        if visited[root] {
            continue;
        }
        let mut stack: Vec<(OpId, usize)> = vec![(root, 0)];
        visited[root] = true;
        while let Some(top) = stack.last_mut() {
            let (u, next) = *top;
            if let Some(&p) = g.predecessors(u).get(next) {
                top.1 += 1;
                if !visited[p] {
                    visited[p] = true;
                    stack.push((p, 0));
                }
            } else {
                order.push(u);
                stack.pop();
            }
        }
    }
    Schedule::new(order)
}

/// The operator running at the first step where the stable footprint peaks.
pub fn peak_operator(g: &ComputationGraph, sched: &Schedule) -> Result<OpId, ScheduleError> {
    let trace = evaluate(g, sched)?;
    Ok(sched.order()[trace.peak_step])
}

/// JSON form of a trace, tagged with the graph's size unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceDocument {
    pub stable: Vec<i64>,
    pub transient: Vec<i64>,
    pub peak: i64,
    pub peak_step: usize,
    pub unit: String,
}

impl TraceDocument {
    pub fn new(trace: &FootprintTrace, unit: &str) -> Self {
        TraceDocument {
            stable: trace.stable.clone(),
            transient: trace.transient.clone(),
            peak: trace.peak,
            peak_step: trace.peak_step,
            unit: unit.to_string(),
        }
    }

    pub fn trace(&self) -> FootprintTrace {
        FootprintTrace {
            stable: self.stable.clone(),
            transient: self.transient.clone(),
            peak: self.peak,
            peak_step: self.peak_step,
        }
    }
}
