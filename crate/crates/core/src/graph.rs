//! Computation graphs: operators joined by hyperedge tensors.
//!
//! Every operator produces exactly one tensor. After construction ids are
//! dense and follow declaration order, with one extra convention that the
//! rest of the crate leans on: **tensor `i` is the output of operator `i`**
//! for `i < num_ops()`, and graph inputs occupy the ids after that.

use std::collections::{HashMap, HashSet};

use thiserror::Error;

use crate::bitset::OpSet;

pub type OpId = usize;
pub type TensorId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Producer {
    GraphInput,
    Op(OpId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tensor {
    pub id: String,
    pub size: i64,
    pub producer: Producer,
    /// Consuming operators, ascending and without duplicates.
    pub consumers: Vec<OpId>,
    /// Stays resident until the end of any schedule.
    pub is_output: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Operator {
    pub id: String,
    pub name: String,
    pub inputs: Vec<TensorId>,
    pub output: TensorId,
    /// Workspace needed while the operator runs, beyond its inputs and
    /// output. Hypernodes created by fusion may carry a negative value.
    pub extra: i64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("graph has no operators")]
    EmptyGraph,
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
    #[error("`{referrer}` references unknown tensor `{missing}`")]
    DanglingReference { referrer: String, missing: String },
    #[error("cycle detected: {}", cycle.join(" -> "))]
    CycleDetected { cycle: Vec<String> },
    #[error("operator `{op}` declares {outputs} outputs; split it upstream")]
    MultiOutputOperator { op: String, outputs: usize },
    #[error("`{id}` has negative size {size}")]
    NegativeSize { id: String, size: i64 },
    #[error("graph input `{0}` has no consumer")]
    UnusedInput(String),
    #[error("operator index {0} is not in the graph")]
    UnknownVertex(usize),
}

/// An immutable, validated computation graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComputationGraph {
    unit: String,
    ops: Vec<Operator>,
    tensors: Vec<Tensor>,
    inputs: Vec<TensorId>,
    preds: Vec<Vec<OpId>>,
    succs: Vec<Vec<OpId>>,
}

#[derive(Debug, Clone)]
struct OpDecl {
    id: String,
    name: String,
    inputs: Vec<String>,
    outputs: Vec<(String, i64)>,
    extra: i64,
    hyper: bool,
}

/// Incremental, name-based constructor for [`ComputationGraph`].
///
/// Operators may reference tensors declared later; everything is resolved and
/// validated in [`GraphBuilder::build`].
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    unit: String,
    inputs: Vec<(String, i64)>,
    ops: Vec<OpDecl>,
    pinned: Vec<String>,
}

impl GraphBuilder {
    pub fn new(unit: impl Into<String>) -> Self {
        GraphBuilder {
            unit: unit.into(),
            inputs: Vec::new(),
            ops: Vec::new(),
            pinned: Vec::new(),
        }
    }

    pub fn input(&mut self, id: impl Into<String>, size: i64) -> &mut Self {
        self.inputs.push((id.into(), size));
        self
    }

    pub fn op(&mut self, id: &str, inputs: &[&str], output: &str, size: i64) -> &mut Self {
        self.op_with_extra(id, inputs, output, size, 0)
    }

    pub fn op_with_extra(
        &mut self,
        id: &str,
        inputs: &[&str],
        output: &str,
        size: i64,
        extra: i64,
    ) -> &mut Self {
        self.ops.push(OpDecl {
            id: id.to_string(),
            name: id.to_string(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: vec![(output.to_string(), size)],
            extra,
            hyper: false,
        });
        self
    }

    /// Sets the display name of the most recently added operator.
    pub fn name(&mut self, name: impl Into<String>) -> &mut Self {
        if let Some(op) = self.ops.last_mut() {
            op.name = name.into();
        }
        self
    }

    /// Forces a tensor to stay resident until the end of the schedule even if
    /// it has consumers.
    pub fn pin(&mut self, tensor: impl Into<String>) -> &mut Self {
        self.pinned.push(tensor.into());
        self
    }

    pub(crate) fn raw_op(
        &mut self,
        id: String,
        name: String,
        inputs: Vec<String>,
        outputs: Vec<(String, i64)>,
        extra: i64,
        hyper: bool,
    ) -> &mut Self {
        self.ops.push(OpDecl {
            id,
            name,
            inputs,
            outputs,
            extra,
            hyper,
        });
        self
    }

    pub fn build(&self) -> Result<ComputationGraph, GraphError> {
        if self.ops.is_empty() {
            return Err(GraphError::EmptyGraph);
        }
        let n = self.ops.len();

        let mut op_ids = HashSet::new();
        for op in &self.ops {
            if !op_ids.insert(op.id.as_str()) {
                return Err(GraphError::DuplicateId(op.id.clone()));
            }
            if op.outputs.len() != 1 {
                return Err(GraphError::MultiOutputOperator {
                    op: op.id.clone(),
                    outputs: op.outputs.len(),
                });
            }
            if op.extra < 0 && !op.hyper {
                return Err(GraphError::NegativeSize {
                    id: op.id.clone(),
                    size: op.extra,
                });
            }
        }

        let mut tensor_index: HashMap<&str, TensorId> = HashMap::new();
        let mut tensors = Vec::with_capacity(n + self.inputs.len());
        for (i, op) in self.ops.iter().enumerate() {
            let (tid, size) = &op.outputs[0];
            if *size < 0 {
                return Err(GraphError::NegativeSize {
                    id: tid.clone(),
                    size: *size,
                });
            }
            if tensor_index.insert(tid.as_str(), i).is_some() {
                return Err(GraphError::DuplicateId(tid.clone()));
            }
            tensors.push(Tensor {
                id: tid.clone(),
                size: *size,
                producer: Producer::Op(i),
                consumers: Vec::new(),
                is_output: false,
            });
        }
        let mut inputs = Vec::with_capacity(self.inputs.len());
        for (id, size) in &self.inputs {
            if *size < 0 {
                return Err(GraphError::NegativeSize {
                    id: id.clone(),
                    size: *size,
                });
            }
            let t = tensors.len();
            if tensor_index.insert(id.as_str(), t).is_some() {
                return Err(GraphError::DuplicateId(id.clone()));
            }
            tensors.push(Tensor {
                id: id.clone(),
                size: *size,
                producer: Producer::GraphInput,
                consumers: Vec::new(),
                is_output: false,
            });
            inputs.push(t);
        }

        let mut ops = Vec::with_capacity(n);
        for (i, decl) in self.ops.iter().enumerate() {
            let mut op_inputs: Vec<TensorId> = Vec::with_capacity(decl.inputs.len());
            for name in &decl.inputs {
                let t = *tensor_index
                    .get(name.as_str())
                    .ok_or_else(|| GraphError::DanglingReference {
                        referrer: decl.id.clone(),
                        missing: name.clone(),
                    })?;
                if !op_inputs.contains(&t) {
                    op_inputs.push(t);
                }
            }
            for &t in &op_inputs {
                tensors[t].consumers.push(i);
            }
            ops.push(Operator {
                id: decl.id.clone(),
                name: decl.name.clone(),
                inputs: op_inputs,
                output: i,
                extra: decl.extra,
            });
        }

        for name in &self.pinned {
            let t = *tensor_index
                .get(name.as_str())
                .ok_or_else(|| GraphError::DanglingReference {
                    referrer: "<pinned outputs>".to_string(),
                    missing: name.clone(),
                })?;
            tensors[t].is_output = true;
        }
        for t in tensors.iter_mut() {
            if t.consumers.is_empty() {
                if t.producer == Producer::GraphInput {
                    return Err(GraphError::UnusedInput(t.id.clone()));
                }
                t.is_output = true;
            }
        }

        let mut preds = vec![Vec::new(); n];
        let mut succs = vec![Vec::new(); n];
        for (i, op) in ops.iter().enumerate() {
            for &t in &op.inputs {
                if let Producer::Op(p) = tensors[t].producer {
                    preds[i].push(p);
                    succs[p].push(i);
                }
            }
        }
        for list in preds.iter_mut().chain(succs.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }

        let g = ComputationGraph {
            unit: self.unit.clone(),
            ops,
            tensors,
            inputs,
            preds,
            succs,
        };
        if let Some(cycle) = g.find_cycle() {
            return Err(GraphError::CycleDetected {
                cycle: cycle.into_iter().map(|o| g.ops[o].id.clone()).collect(),
            });
        }
        Ok(g)
    }
}

impl ComputationGraph {
    pub fn unit(&self) -> &str {
        &self.unit
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    pub fn num_tensors(&self) -> usize {
        self.tensors.len()
    }

    pub fn ops(&self) -> &[Operator] {
        &self.ops
    }

    pub fn op(&self, op: OpId) -> &Operator {
        &self.ops[op]
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, t: TensorId) -> &Tensor {
        &self.tensors[t]
    }

    pub fn inputs(&self) -> &[TensorId] {
        &self.inputs
    }

    /// Tensors that remain resident through the final step.
    pub fn outputs(&self) -> Vec<TensorId> {
        (0..self.tensors.len())
            .filter(|&t| self.tensors[t].is_output)
            .collect()
    }

    pub fn op_index(&self, id: &str) -> Option<OpId> {
        self.ops.iter().position(|o| o.id == id)
    }

    pub fn tensor_index(&self, id: &str) -> Option<TensorId> {
        self.tensors.iter().position(|t| t.id == id)
    }

    pub fn predecessors(&self, op: OpId) -> &[OpId] {
        &self.preds[op]
    }

    pub fn successors(&self, op: OpId) -> &[OpId] {
        &self.succs[op]
    }

    pub fn output_size(&self, op: OpId) -> i64 {
        self.tensors[self.ops[op].output].size
    }

    /// Inputs, output and workspace of `op` summed: memory that must be
    /// resident while it runs, whatever the schedule.
    pub fn working_set(&self, op: OpId) -> i64 {
        let o = &self.ops[op];
        o.inputs.iter().map(|&t| self.tensors[t].size).sum::<i64>()
            + self.tensors[o.output].size
            + o.extra
    }

    pub fn total_input_size(&self) -> i64 {
        self.inputs.iter().map(|&t| self.tensors[t].size).sum()
    }

    /// Kahn's algorithm, always releasing the smallest ready id first.
    pub fn topological_order(&self) -> Vec<OpId> {
        use std::cmp::Reverse;
        use std::collections::BinaryHeap;
        let mut indeg: Vec<usize> = self.preds.iter().map(Vec::len).collect();
        let mut ready: BinaryHeap<Reverse<OpId>> = (0..self.ops.len())
            .filter(|&i| indeg[i] == 0)
            .map(Reverse)
            .collect();
        let mut order = Vec::with_capacity(self.ops.len());
        while let Some(Reverse(u)) = ready.pop() {
            order.push(u);
            for &v in &self.succs[u] {
                indeg[v] -= 1;
                if indeg[v] == 0 {
                    ready.push(Reverse(v));
                }
            }
        }
        order
    }

    fn find_cycle(&self) -> Option<Vec<OpId>> {
        let order = self.topological_order();
        if order.len() == self.ops.len() {
            return None;
        }
        let mut left = vec![true; self.ops.len()];
        for u in order {
            left[u] = false;
        }
        // Every leftover op has a leftover predecessor; walk back until a repeat.
        let start = left.iter().position(|&l| l)?;
        let mut seen = vec![usize::MAX; self.ops.len()];
        let mut path = Vec::new();
        let mut cur = start;
        while seen[cur] == usize::MAX {
            seen[cur] = path.len();
            path.push(cur);
            cur = *self.preds[cur].iter().find(|&&p| left[p])?;
        }
        let mut cycle = path[seen[cur]..].to_vec();
        cycle.reverse();
        Some(cycle)
    }

    pub fn reachability(&self) -> Reachability {
        Reachability::new(self)
    }

    /// Producer/consumer operator pairs, one per (tensor, consumer).
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for (t, tensor) in self.tensors.iter().enumerate() {
            if let Producer::Op(p) = tensor.producer {
                for &c in &tensor.consumers {
                    out.push(Edge {
                        from: p,
                        to: c,
                        tensor: t,
                    });
                }
            }
        }
        out
    }

    pub fn op_set(&self, ops: &[OpId]) -> Result<OpSet, GraphError> {
        let mut s = OpSet::new(self.ops.len());
        for &o in ops {
            if o >= self.ops.len() {
                return Err(GraphError::UnknownVertex(o));
            }
            s.insert(o);
        }
        Ok(s)
    }

    /// Tensors entering and leaving the operator set `s`.
    pub fn boundary(&self, s: &OpSet) -> Boundary {
        let mut incoming = Vec::new();
        let mut outgoing = Vec::new();
        for (t, tensor) in self.tensors.iter().enumerate() {
            let inside_producer = matches!(tensor.producer, Producer::Op(p) if s.contains(p));
            if inside_producer {
                if tensor.is_output || tensor.consumers.iter().any(|&c| !s.contains(c)) {
                    outgoing.push(t);
                }
            } else if tensor.consumers.iter().any(|&c| s.contains(c)) {
                incoming.push(t);
            }
        }
        Boundary { incoming, outgoing }
    }

    /// Materializes the sub-graph induced by `s` as a standalone graph.
    ///
    /// Tensors entering `s` become graph inputs; tensors leaving it are pinned
    /// so they stay resident to the end, as they would in the parent graph.
    /// Ids and sizes are preserved.
    pub fn extract(&self, s: &OpSet) -> Result<Extracted, GraphError> {
        let boundary = self.boundary(s);
        let mut b = GraphBuilder::new(self.unit.clone());
        for &t in &boundary.incoming {
            b.input(self.tensors[t].id.clone(), self.tensors[t].size);
        }
        let members: Vec<OpId> = s.iter().collect();
        for &o in &members {
            let op = &self.ops[o];
            let out = &self.tensors[op.output];
            b.raw_op(
                op.id.clone(),
                op.name.clone(),
                op.inputs.iter().map(|&t| self.tensors[t].id.clone()).collect(),
                vec![(out.id.clone(), out.size)],
                op.extra,
                true,
            );
        }
        for &t in &boundary.outgoing {
            b.pin(self.tensors[t].id.clone());
        }
        Ok(Extracted {
            graph: b.build()?,
            ops: members,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Edge {
    pub from: OpId,
    pub to: OpId,
    pub tensor: TensorId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Boundary {
    pub incoming: Vec<TensorId>,
    pub outgoing: Vec<TensorId>,
}

/// A standalone copy of an induced sub-graph plus the map back to the parent.
#[derive(Debug, Clone)]
pub struct Extracted {
    pub graph: ComputationGraph,
    /// `ops[i]` is the parent-graph id of sub-graph operator `i`.
    pub ops: Vec<OpId>,
}

/// Transitive ancestor and descendant sets of every operator.
#[derive(Debug, Clone)]
pub struct Reachability {
    anc: Vec<OpSet>,
    des: Vec<OpSet>,
}

impl Reachability {
    pub fn new(g: &ComputationGraph) -> Self {
        let n = g.num_ops();
        let order = g.topological_order();
        let mut anc = vec![OpSet::new(n); n];
        for &u in &order {
            for &p in g.predecessors(u) {
                let pa = anc[p].clone();
                anc[u].union_with(&pa);
                anc[u].insert(p);
            }
        }
        let mut des = vec![OpSet::new(n); n];
        for &u in order.iter().rev() {
            for &s in g.successors(u) {
                let sd = des[s].clone();
                des[u].union_with(&sd);
                des[u].insert(s);
            }
        }
        Reachability { anc, des }
    }

    pub fn len(&self) -> usize {
        self.anc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anc.is_empty()
    }

    pub fn ancestors(&self, u: OpId) -> &OpSet {
        &self.anc[u]
    }

    pub fn descendants(&self, u: OpId) -> &OpSet {
        &self.des[u]
    }

    /// Operators neither upstream nor downstream of `u`.
    pub fn parallel(&self, u: OpId) -> OpSet {
        let mut p = self.anc[u].complement();
        p.difference_with(&self.des[u]);
        p.remove(u);
        p
    }

    pub fn is_ancestor(&self, a: OpId, u: OpId) -> bool {
        self.anc[u].contains(a)
    }
}

/// Vertex subset plus the edges with both endpoints inside it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubgraphRef {
    pub vertices: OpSet,
    pub edges: Vec<Edge>,
}

pub fn induced_subgraph(g: &ComputationGraph, s: &[OpId]) -> Result<SubgraphRef, GraphError> {
    let vertices = g.op_set(s)?;
    let edges = g
        .edges()
        .into_iter()
        .filter(|e| vertices.contains(e.from) && vertices.contains(e.to))
        .collect();
    Ok(SubgraphRef { vertices, edges })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IsolationViolation {
    Empty,
    /// Exactly one tensor must enter the sub-graph.
    InputCount(Vec<TensorId>),
    /// Exactly one tensor must leave the sub-graph.
    OutputCount(Vec<TensorId>),
    /// The entering tensor also feeds an operator outside the sub-graph.
    InputConsumedOutside { tensor: TensorId, consumer: OpId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Isolation {
    Isolated { input: TensorId, output: TensorId },
    NotIsolated(IsolationViolation),
}

impl Isolation {
    pub fn is_isolated(&self) -> bool {
        matches!(self, Isolation::Isolated { .. })
    }
}

/// Single entering tensor, single leaving tensor, and every consumer of the
/// entering tensor inside `s`.
pub fn is_isolated_subgraph(g: &ComputationGraph, s: &OpSet) -> Isolation {
    if s.is_empty() {
        return Isolation::NotIsolated(IsolationViolation::Empty);
    }
    let Boundary { incoming, outgoing } = g.boundary(s);
    if incoming.len() != 1 {
        return Isolation::NotIsolated(IsolationViolation::InputCount(incoming));
    }
    if outgoing.len() != 1 {
        return Isolation::NotIsolated(IsolationViolation::OutputCount(outgoing));
    }
    let input = incoming[0];
    if let Some(&c) = g.tensor(input).consumers.iter().find(|&&c| !s.contains(c)) {
        return Isolation::NotIsolated(IsolationViolation::InputConsumedOutside {
            tensor: input,
            consumer: c,
        });
    }
    Isolation::Isolated {
        input,
        output: outgoing[0],
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// x(8) -> a -> A(4) -> b -> B(2) -> c -> C(1)
    pub fn chain() -> ComputationGraph {
        GraphBuilder::new("KB")
            .input("x", 8)
            .op("a", &["x"], "A", 4)
            .op("b", &["A"], "B", 2)
            .op("c", &["B"], "C", 1)
            .build()
            .unwrap()
    }

    /// src, two 2-op branches (a1 a2) and (b1 b2), sink.
    pub fn diamond(sizes: [i64; 6]) -> ComputationGraph {
        GraphBuilder::new("KB")
            .input("x", 1)
            .op("src", &["x"], "S", sizes[0])
            .op("a1", &["S"], "A1", sizes[1])
            .op("a2", &["A1"], "A2", sizes[2])
            .op("b1", &["S"], "B1", sizes[3])
            .op("b2", &["B1"], "B2", sizes[4])
            .op("sink", &["A2", "B2"], "Y", sizes[5])
            .build()
            .unwrap()
    }
}
