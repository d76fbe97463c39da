//! Solving and decoding [`IlpModel`]s without going back to the graph.
//!
//! [`solve_model`] reads everything it needs from the model rows: operator
//! inputs from the availability rows, producers from the persistence rows,
//! sizes and workspaces from the memory rows, plus the fixed variables. It is
//! a dynamic program over executed sets, so keep it to small models.

use std::collections::HashMap;
use std::time::Instant;

use thiserror::Error;

use super::{SolveResult, StopReason};
use crate::footprint::{evaluate, Schedule};
use crate::graph::ComputationGraph;
use crate::ilp::{Assignment, ConstraintTag, IlpModel, Var};

/// Largest model [`solve_model`] accepts.
pub const MODEL_SOLVE_LIMIT: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSolution {
    pub mem: i64,
    pub assignment: Assignment,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("assignment is inconsistent with the model: {0}")]
    InconsistentAssignment(String),
    #[error("model has {ops} operators, more than the {limit} the exact model solver handles")]
    TooLarge { ops: usize, limit: usize },
}

struct ModelData {
    inputs: Vec<Vec<usize>>,
    producer: Vec<Option<usize>>,
    size: Vec<i64>,
    extra: Vec<i64>,
    initial: Vec<bool>,
    keep_to_end: Vec<bool>,
    consumers: Vec<u64>,
}

impl ModelData {
    fn read(model: &IlpModel) -> ModelData {
        let n = model.num_ops;
        let nt = model.num_tensors;
        let mut d = ModelData {
            inputs: vec![Vec::new(); n],
            producer: vec![None; nt],
            size: vec![0; nt],
            extra: vec![0; n],
            initial: vec![false; nt],
            keep_to_end: vec![false; nt],
            consumers: vec![0; nt],
        };
        for c in &model.constraints {
            match c.tag {
                ConstraintTag::InputAvailability => {
                    let (op, tensor) = match (c.terms[0].1, c.terms[1].1) {
                        (Var::O { op, .. }, Var::T { tensor, .. }) => (op, tensor),
                        _ => unreachable!("availability rows pair O with T"),
                    };
                    if !d.inputs[op].contains(&tensor) {
                        d.inputs[op].push(tensor);
                        d.consumers[tensor] |= 1 << op;
                    }
                }
                ConstraintTag::Persistence => {
                    if let (Var::T { tensor, .. }, Some(&(_, Var::O { op, .. }))) =
                        (c.terms[0].1, c.terms.get(2))
                    {
                        d.producer[tensor] = Some(op);
                    }
                }
                ConstraintTag::InitialEmpty => {
                    if let Var::T { tensor, .. } = c.terms[0].1 {
                        d.initial[tensor] = c.rhs == 1;
                    }
                }
                ConstraintTag::OutputLive => {
                    if let Var::T { tensor, .. } = c.terms[0].1 {
                        d.keep_to_end[tensor] = true;
                    }
                }
                ConstraintTag::Memory if c.key == [1] => {
                    for &(coef, v) in &c.terms {
                        match v {
                            Var::T { tensor, .. } => d.size[tensor] = coef,
                            Var::O { op, .. } => d.extra[op] = coef,
                            Var::Mem => {}
                        }
                    }
                }
                _ => {}
            }
        }
        d
    }

    fn created(&self, t: usize, done: u64) -> bool {
        self.initial[t] || self.producer[t].is_some_and(|p| done >> p & 1 == 1)
    }

    /// Tensors that must be resident at the step where `op` runs after `done`.
    fn resident(&self, done: u64, op: usize) -> impl Iterator<Item = usize> + '_ {
        let after = done | 1 << op;
        (0..self.size.len()).filter(move |&t| {
            self.created(t, after) && (self.keep_to_end[t] || self.consumers[t] & !done != 0)
        })
    }
}

/// Minimum `mem` over all feasible assignments, with one optimal assignment.
/// `Ok(None)` means the model is infeasible.
pub fn solve_model(model: &IlpModel) -> Result<Option<ModelSolution>, DecodeError> {
    let n = model.num_ops;
    if n > MODEL_SOLVE_LIMIT {
        return Err(DecodeError::TooLarge {
            ops: n,
            limit: MODEL_SOLVE_LIMIT,
        });
    }
    let d = ModelData::read(model);
    let free = |v: Var| model.is_free(v);

    // layers[k]: executed set of size k -> (peak, previous set, op)
    let mut layers: Vec<HashMap<u64, (i64, u64, usize)>> = vec![HashMap::new(); n + 1];
    layers[0].insert(0, (i64::MIN, 0, usize::MAX));
    for k in 0..n {
        let step = k + 1;
        let mut states: Vec<(u64, i64)> = layers[k].iter().map(|(&s, &(p, _, _))| (s, p)).collect();
        states.sort_unstable();
        for (done, peak) in states {
            for op in 0..n {
                if done >> op & 1 == 1 || !free(Var::O { op, step }) {
                    continue;
                }
                let ready = d.inputs[op].iter().all(|&t| d.created(t, done));
                if !ready {
                    continue;
                }
                let mut mem = d.extra[op];
                let mut ok = true;
                for t in d.resident(done, op) {
                    if !free(Var::T { tensor: t, step }) {
                        ok = false;
                        break;
                    }
                    mem += d.size[t];
                }
                if !ok {
                    continue;
                }
                let peak = peak.max(mem);
                let next = done | 1 << op;
                let slot = layers[step].entry(next).or_insert((i64::MAX, 0, 0));
                if (peak, done, op) < *slot {
                    *slot = (peak, done, op);
                }
            }
        }
    }

    let full = if n == 64 { u64::MAX } else { (1u64 << n) - 1 };
    let Some(&(mem, _, _)) = layers[n].get(&full) else {
        return Ok(None);
    };

    let mut order = vec![0; n];
    let mut cur = full;
    for step in (1..=n).rev() {
        let (_, prev, op) = layers[step][&cur];
        order[step - 1] = op;
        cur = prev;
    }

    let mut a = Assignment::default();
    a.set(Var::Mem, mem.max(0));
    for (t, &init) in d.initial.iter().enumerate() {
        a.set(Var::T { tensor: t, step: 0 }, i64::from(init));
    }
    let mut done = 0u64;
    for (j, &op) in order.iter().enumerate() {
        let step = j + 1;
        a.set(Var::O { op, step }, 1);
        for t in d.resident(done, op) {
            a.set(Var::T { tensor: t, step }, 1);
        }
        done |= 1 << op;
    }
    debug_assert_eq!(model.violation(&a), None);
    Ok(Some(ModelSolution { mem, assignment: a }))
}

/// Reads the schedule out of a feasible assignment and evaluates it on `g`.
pub fn decode_ilp_solution(
    model: &IlpModel,
    g: &ComputationGraph,
    assignment: &Assignment,
) -> Result<SolveResult, DecodeError> {
    let started = Instant::now();
    let bad = DecodeError::InconsistentAssignment;
    if model.num_ops != g.num_ops() || model.num_tensors != g.num_tensors() {
        return Err(bad("model and graph dimensions differ".into()));
    }
    if let Some(row) = model.violation(assignment) {
        return Err(bad(row));
    }
    let n = model.num_ops;
    let mut order = Vec::with_capacity(n);
    for step in 1..=n {
        let ops: Vec<usize> = (0..n)
            .filter(|&op| assignment.get(Var::O { op, step }) == 1)
            .collect();
        match ops[..] {
            [op] => order.push(op),
            _ => return Err(bad(format!("step {step} runs {} operators", ops.len()))),
        }
    }
    let schedule = Schedule::new(order);
    let trace = evaluate(g, &schedule).map_err(|e| bad(e.to_string()))?;
    let mem = assignment.get(Var::Mem);
    if trace.peak > mem {
        return Err(bad(format!("decoded peak {} exceeds mem {mem}", trace.peak)));
    }
    Ok(SolveResult {
        schedule,
        peak: trace.peak,
        proven_optimal: false,
        explored_states: 0,
        wall_time: started.elapsed(),
        stop: StopReason::Completed,
        legal_orders: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::fixtures::{chain, diamond};
    use crate::graph::GraphBuilder;
    use crate::ilp::build_model;
    use crate::solver::brute_force;

    #[test]
    fn single_op_optimum_is_its_working_set() {
        let g = GraphBuilder::new("KB")
            .input("x", 3)
            .op_with_extra("a", &["x"], "y", 2, 5)
            .build()
            .unwrap();
        let m = build_model(&g, false);
        let sol = solve_model(&m).unwrap().unwrap();
        assert_eq!(sol.mem, 10);
        let r = decode_ilp_solution(&m, &g, &sol.assignment).unwrap();
        assert_eq!(r.schedule.order(), &[0]);
    }

    #[test]
    fn model_optimum_matches_brute_force() {
        for sizes in [[1, 8, 1, 8, 1, 1], [5, 1, 9, 2, 2, 3], [0, 0, 0, 0, 0, 0]] {
            let g = diamond(sizes);
            let oracle = brute_force(&g).unwrap().peak;
            for prune in [false, true] {
                let sol = solve_model(&build_model(&g, prune)).unwrap().unwrap();
                assert_eq!(sol.mem, oracle, "sizes {sizes:?}, prune {prune}");
            }
        }
    }

    #[test]
    fn hand_built_chain_assignment_decodes() {
        let g = chain();
        let m = build_model(&g, false);
        let mut a = Assignment::default();
        // a, b, c at steps 1..3; keep everything resident (feasible, wasteful)
        for op in 0..3 {
            a.set(Var::O { op, step: op + 1 }, 1);
        }
        for step in 0..=3 {
            a.set(Var::T { tensor: 3, step }, 1);
        }
        for t in 0..3 {
            for step in t + 1..=3 {
                a.set(Var::T { tensor: t, step }, 1);
            }
        }
        a.set(Var::Mem, 15);
        let r = decode_ilp_solution(&m, &g, &a).unwrap();
        assert_eq!(r.peak, 12);
    }

    #[test]
    fn missing_input_is_inconsistent() {
        let g = chain();
        let m = build_model(&g, false);
        let mut a = solve_model(&m).unwrap().unwrap().assignment;
        a.set(Var::T { tensor: 0, step: 2 }, 0);
        assert!(matches!(
            decode_ilp_solution(&m, &g, &a),
            Err(DecodeError::InconsistentAssignment(_))
        ));
    }
}
