//! Peak-memory-aware operator scheduling for DNN computation graphs.
//!
//! A [`ComputationGraph`] is a DAG of operators, each producing one tensor.
//! Any topological order is a valid [`Schedule`]; they differ in how much
//! activation memory has to be resident at once. This crate
//!
//! * evaluates the memory footprint of a schedule ([`footprint`]),
//! * finds schedules with minimum peak exactly ([`solver`]) and states the
//!   same problem as an integer program ([`ilp`]),
//! * shrinks graphs without changing the optimum ([`fusion`]),
//! * splits large graphs into acyclic parts ([`partition`]),
//! * and generates benchmark graphs and runs benchmarks ([`generate`],
//!   [`bench`]).
//!
//! ```
//! use memsched::{evaluate, rpo_schedule, solve, GraphBuilder, SolverConfig};
//!
//! let g = GraphBuilder::new("KB")
//!     .input("x", 1)
//!     .op("src", &["x"], "S", 2)
//!     .op("a1", &["S"], "A1", 10)
//!     .op("a2", &["A1"], "A2", 10)
//!     .op("b1", &["S"], "B1", 1)
//!     .op("b2", &["B1"], "B2", 1)
//!     .op("sink", &["A2", "B2"], "Y", 1)
//!     .build()
//!     .unwrap();
//!
//! let baseline = evaluate(&g, &rpo_schedule(&g)).unwrap();
//! let best = solve(&g, &SolverConfig::default()).unwrap();
//! assert_eq!(baseline.peak, 22);
//! assert_eq!(best.peak, 21);
//! assert!(best.proven_optimal);
//! ```

pub mod bench;
pub mod bitset;
pub mod document;
pub mod footprint;
pub mod fusion;
pub mod generate;
pub mod graph;
pub mod ilp;
pub mod partition;
pub mod solver;

pub use bitset::OpSet;
pub use document::{load_graph, load_graph_file, GraphDocument, LoadError};
pub use footprint::{evaluate, peak, peak_operator, rpo_schedule, FootprintTrace, Schedule};
pub use fusion::{iterative_fusion, FusedGraph};
pub use generate::{generate, GeneratorSpec};
pub use graph::{ComputationGraph, GraphBuilder, GraphError, OpId, TensorId};
pub use ilp::{build_model, export_lp, IlpModel};
pub use partition::{acyclic_partition, partitioned_schedule, PartitionPlan};
pub use solver::{brute_force, solve, SolveResult, SolverConfig, SolverError};
