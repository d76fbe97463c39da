use std::time::Instant;

use super::{SolveResult, SolverError, StopReason};
use crate::footprint::Schedule;
use crate::graph::{ComputationGraph, OpId};

pub const BRUTE_FORCE_LIMIT: usize = 14;

struct Enumerator<'g> {
    g: &'g ComputationGraph,
    indegree: Vec<usize>,
    pending_consumers: Vec<usize>,
    order: Vec<OpId>,
    best_order: Vec<OpId>,
    best_peak: i64,
    count: u64,
}

impl Enumerator<'_> {
    fn descend(&mut self, transient: i64, peak: i64) {
        let n = self.g.num_ops();
        if self.order.len() == n {
            self.count += 1;
            if peak < self.best_peak {
                self.best_peak = peak;
                self.best_order = self.order.clone();
            }
            return;
        }
        for op in 0..n {
            if self.indegree[op] != 0 {
                continue;
            }
            let o = self.g.op(op);
            let out = self.g.tensor(o.output).size;
            let stable = transient + out + o.extra;

            // take `op`
            self.indegree[op] = usize::MAX;
            for &s in self.g.successors(op) {
                self.indegree[s] -= 1;
            }
            let mut freed = 0;
            for &t in &o.inputs {
                self.pending_consumers[t] -= 1;
                let tensor = self.g.tensor(t);
                if self.pending_consumers[t] == 0 && !tensor.is_output {
                    freed += tensor.size;
                }
            }
            self.order.push(op);

            self.descend(transient + out - freed, peak.max(stable));

            self.order.pop();
            for &t in &o.inputs {
                self.pending_consumers[t] += 1;
            }
            for &s in self.g.successors(op) {
                self.indegree[s] += 1;
            }
            self.indegree[op] = 0;
        }
    }
}

/// Enumerates every topological order and keeps the first one with the
/// smallest peak. Also reports how many orders exist.
pub fn brute_force(g: &ComputationGraph) -> Result<SolveResult, SolverError> {
    let n = g.num_ops();
    if n > BRUTE_FORCE_LIMIT {
        return Err(SolverError::TooLarge {
            ops: n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    let started = Instant::now();
    let mut e = Enumerator {
        g,
        indegree: (0..n).map(|o| g.predecessors(o).len()).collect(),
        pending_consumers: g.tensors().iter().map(|t| t.consumers.len()).collect(),
        order: Vec::with_capacity(n),
        best_order: Vec::new(),
        best_peak: i64::MAX,
        count: 0,
    };
    e.descend(g.total_input_size(), i64::MIN);
    Ok(SolveResult {
        schedule: Schedule::new(e.best_order),
        peak: e.best_peak,
        proven_optimal: true,
        explored_states: e.count,
        wall_time: started.elapsed(),
        stop: StopReason::Completed,
        legal_orders: Some(e.count),
    })
}
