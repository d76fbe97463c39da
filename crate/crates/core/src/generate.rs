//! Synthetic graph families.
//!
//! Every generator is a pure function of its [`GeneratorSpec`]; randomized
//! families take an explicit seed.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{ComputationGraph, GraphBuilder};

fn default_size() -> i64 {
    4
}
fn default_fan_in() -> usize {
    3
}
fn default_max_size() -> i64 {
    16
}
fn default_blocks() -> usize {
    5
}
fn default_chain_len() -> usize {
    7
}
fn default_hr_blocks() -> usize {
    2
}
fn one() -> usize {
    1
}
fn default_hr_size() -> i64 {
    16
}

/// A graph family and its parameters. Serialized with a `family` tag, e.g.
/// `{"family": "parallel-branches", "branches": 2, "depth": 2}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorSpec {
    /// `depth` operators in a row.
    Linear {
        depth: usize,
        #[serde(default = "default_size")]
        size: i64,
    },
    /// A stem followed by `blocks` residual blocks (two convolutions and an
    /// add that also reads the block input).
    ResidualChain {
        blocks: usize,
        #[serde(default = "default_size")]
        size: i64,
    },
    /// A source, `branches` parallel chains of `depth` operators, and a sink
    /// reading every chain. With `residual`, each chain ends in an add that
    /// also reads the source.
    ParallelBranches {
        branches: usize,
        depth: usize,
        #[serde(default)]
        residual: bool,
        #[serde(default = "default_size")]
        size: i64,
    },
    /// Cells of `blocks` blocks; each block adds two operator chains whose
    /// inputs are drawn from the cell input and earlier blocks.
    NasnetCellLike {
        cells: usize,
        #[serde(default = "default_blocks")]
        blocks: usize,
        #[serde(default = "default_chain_len")]
        chain_len: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default = "default_size")]
        size: i64,
    },
    /// Parallel multi-resolution branches of residual units. Between stages,
    /// every branch input of the next stage sums all branch outputs.
    HrnetBlockLike {
        branches: usize,
        #[serde(default = "default_hr_blocks")]
        blocks: usize,
        #[serde(default = "one")]
        stages: usize,
        #[serde(default = "default_hr_size")]
        size: i64,
    },
    /// `n` operators, each reading 1..=`max_fan_in` earlier tensors, sizes
    /// uniform in `1..=max_size`, workspaces in `0..=max_extra`.
    RandomDag {
        n: usize,
        seed: u64,
        #[serde(default = "default_fan_in")]
        max_fan_in: usize,
        #[serde(default = "default_max_size")]
        max_size: i64,
        #[serde(default)]
        max_extra: i64,
    },
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GenerateError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
}

impl GeneratorSpec {
    /// Short label used in reports.
    pub fn label(&self) -> String {
        match self {
            GeneratorSpec::Linear { depth, .. } => format!("linear-{depth}"),
            GeneratorSpec::ResidualChain { blocks, .. } => format!("residual-chain-{blocks}"),
            GeneratorSpec::ParallelBranches {
                branches,
                depth,
                residual,
                ..
            } => format!(
                "parallel-branches-{branches}x{depth}{}",
                if *residual { "-res" } else { "" }
            ),
            GeneratorSpec::NasnetCellLike {
                cells, blocks, seed, ..
            } => format!("nasnet-cell-like-{cells}x{blocks}-s{seed}"),
            GeneratorSpec::HrnetBlockLike {
                branches,
                blocks,
                stages,
                ..
            } => format!("hrnet-block-like-{branches}x{blocks}-{stages}s"),
            GeneratorSpec::RandomDag { n, seed, .. } => format!("random-dag-{n}-s{seed}"),
        }
    }

    pub fn family(&self) -> &'static str {
        match self {
            GeneratorSpec::Linear { .. } => "linear",
            GeneratorSpec::ResidualChain { .. } => "residual-chain",
            GeneratorSpec::ParallelBranches { .. } => "parallel-branches",
            GeneratorSpec::NasnetCellLike { .. } => "nasnet-cell-like",
            GeneratorSpec::HrnetBlockLike { .. } => "hrnet-block-like",
            GeneratorSpec::RandomDag { .. } => "random-dag",
        }
    }
}

fn require(ok: bool, msg: &str) -> Result<(), GenerateError> {
    if ok {
        Ok(())
    } else {
        Err(GenerateError::InvalidSpec(msg.to_string()))
    }
}

pub fn generate(spec: &GeneratorSpec) -> Result<ComputationGraph, GenerateError> {
    let g = match *spec {
        GeneratorSpec::Linear { depth, size } => {
            require(depth >= 1, "depth must be at least 1")?;
            require(size >= 0, "size must be non-negative")?;
            linear(depth, size)
        }
        GeneratorSpec::ResidualChain { blocks, size } => {
            require(blocks >= 1, "blocks must be at least 1")?;
            require(size >= 0, "size must be non-negative")?;
            residual_chain(blocks, size)
        }
        GeneratorSpec::ParallelBranches {
            branches,
            depth,
            residual,
            size,
        } => {
            require(branches >= 1 && depth >= 1, "branches and depth must be at least 1")?;
            require(size >= 0, "size must be non-negative")?;
            parallel_branches(branches, depth, residual, size)
        }
        GeneratorSpec::NasnetCellLike {
            cells,
            blocks,
            chain_len,
            seed,
            size,
        } => {
            require(cells >= 1 && blocks >= 1, "cells and blocks must be at least 1")?;
            require(chain_len >= 1, "chain_len must be at least 1")?;
            require(size >= 0, "size must be non-negative")?;
            nasnet(cells, blocks, chain_len, seed, size)
        }
        GeneratorSpec::HrnetBlockLike {
            branches,
            blocks,
            stages,
            size,
        } => {
            require(branches >= 1 && blocks >= 1 && stages >= 1, "counts must be at least 1")?;
            require(size >= 1, "size must be positive")?;
            hrnet(branches, blocks, stages, size)
        }
        GeneratorSpec::RandomDag {
            n,
            seed,
            max_fan_in,
            max_size,
            max_extra,
        } => {
            require(n >= 1, "n must be at least 1")?;
            require(max_fan_in >= 1, "max_fan_in must be at least 1")?;
            require(max_size >= 1 && max_extra >= 0, "sizes must be positive")?;
            random_dag(n, seed, max_fan_in, max_size, max_extra)
        }
    };
    Ok(g.build().expect("generators emit valid graphs"))
}

fn linear(depth: usize, size: i64) -> GraphBuilder {
    let mut b = GraphBuilder::new("KB");
    b.input("x", size);
    let mut prev = "x".to_string();
    for i in 0..depth {
        let out = format!("t{i}");
        b.op(&format!("op{i}"), &[&prev], &out, size);
        prev = out;
    }
    b
}

fn residual_chain(blocks: usize, size: i64) -> GraphBuilder {
    let mut b = GraphBuilder::new("KB");
    b.input("x", size);
    b.op("stem", &["x"], "h0", size);
    for k in 0..blocks {
        let h = format!("h{k}");
        let (c1, c2, out) = (format!("r{k}a"), format!("r{k}b"), format!("h{}", k + 1));
        b.op(&format!("conv{k}a"), &[&h], &c1, size);
        b.op(&format!("conv{k}b"), &[&c1], &c2, size);
        b.op(&format!("add{k}"), &[&c2, &h], &out, size);
    }
    b
}

fn parallel_branches(branches: usize, depth: usize, residual: bool, size: i64) -> GraphBuilder {
    let mut b = GraphBuilder::new("KB");
    b.input("x", size);
    b.op("src", &["x"], "s", size);
    let mut ends = Vec::new();
    for br in 0..branches {
        let mut prev = "s".to_string();
        for d in 0..depth {
            let out = format!("b{br}_{d}");
            b.op(&format!("op{br}_{d}"), &[&prev], &out, size);
            prev = out;
        }
        if residual {
            let out = format!("b{br}_sum");
            b.op(&format!("add{br}"), &[&prev, "s"], &out, size);
            prev = out;
        }
        ends.push(prev);
    }
    let ends: Vec<&str> = ends.iter().map(String::as_str).collect();
    b.op("sink", &ends, "y", size);
    b
}

fn nasnet(cells: usize, blocks: usize, chain_len: usize, seed: u64, size: i64) -> GraphBuilder {
    const OPS: [&str; 3] = ["relu", "sepconv", "bn"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new("KB");
    b.input("x", size);
    let mut cell_in = "x".to_string();
    for c in 0..cells {
        let mut avail = vec![cell_in.clone()];
        let mut used = vec![false; blocks];
        for k in 0..blocks {
            let mut legs = Vec::new();
            for leg in 0..2 {
                let pick = rng.gen_range(0..avail.len());
                if pick > 0 {
                    used[pick - 1] = true;
                }
                let mut prev = avail[pick].clone();
                for step in 0..chain_len {
                    let out = format!("c{c}b{k}l{leg}_{step}");
                    b.op(&format!("c{c}b{k}l{leg}_op{step}"), &[&prev], &out, size);
                    b.name(OPS[step % OPS.len()]);
                    prev = out;
                }
                legs.push(prev);
            }
            let out = format!("c{c}b{k}");
            b.op(&format!("c{c}b{k}_add"), &[&legs[0], &legs[1]], &out, size);
            b.name("add");
            avail.push(out);
        }
        let loose: Vec<&str> = (0..blocks)
            .filter(|&k| !used[k])
            .map(|k| avail[k + 1].as_str())
            .collect();
        let out = format!("cell{c}");
        b.op(&format!("cell{c}_concat"), &loose, &out, size * loose.len() as i64);
        b.name("concat");
        cell_in = out;
    }
    b
}

fn hrnet(branches: usize, blocks: usize, stages: usize, size: i64) -> GraphBuilder {
    let mut b = GraphBuilder::new("KB");
    let sizes: Vec<i64> = (0..branches).map(|br| (size >> br).max(1)).collect();
    let mut heads: Vec<String> = (0..branches).map(|br| format!("in{br}")).collect();
    for (br, h) in heads.iter().enumerate() {
        b.input(h.clone(), sizes[br]);
    }
    for st in 0..stages {
        if st > 0 {
            let srcs: Vec<String> = heads.clone();
            let srcs: Vec<&str> = srcs.iter().map(String::as_str).collect();
            for (br, head) in heads.iter_mut().enumerate() {
                let out = format!("s{st}x{br}");
                b.op(&format!("s{st}_exchange{br}"), &srcs, &out, sizes[br]);
                b.name("exchange");
                *head = out;
            }
        }
        for (br, head) in heads.iter_mut().enumerate() {
            let s = sizes[br];
            for k in 0..blocks {
                let p = format!("s{st}b{br}u{k}");
                let names = ["conv1", "bn1", "relu1", "conv2", "bn2"];
                let mut prev = head.clone();
                for name in names {
                    let out = format!("{p}_{name}");
                    b.op(&format!("{p}_{name}_op"), &[&prev], &out, s);
                    b.name(name);
                    prev = out;
                }
                let sum = format!("{p}_add");
                b.op(&format!("{p}_add_op"), &[&prev, head.as_str()], &sum, s);
                b.name("add");
                let out = format!("{p}_out");
                b.op(&format!("{p}_relu_op"), &[&sum], &out, s);
                b.name("relu");
                *head = out;
            }
        }
    }
    b
}

fn random_dag(n: usize, seed: u64, max_fan_in: usize, max_size: i64, max_extra: i64) -> GraphBuilder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new("KB");
    b.input("x", rng.gen_range(1..=max_size));
    // tensor 0 is the graph input, tensor k + 1 the output of op k
    let name = |t: usize| {
        if t == 0 {
            "x".to_string()
        } else {
            format!("t{}", t - 1)
        }
    };
    for i in 0..n {
        let avail = i + 1;
        let k = rng.gen_range(1..=max_fan_in.min(avail));
        let mut picks = sample(&mut rng, avail, k).into_vec();
        picks.sort_unstable();
        let inputs: Vec<String> = picks.into_iter().map(name).collect();
        let inputs: Vec<&str> = inputs.iter().map(String::as_str).collect();
        let size = rng.gen_range(1..=max_size);
        let extra = if max_extra > 0 {
            rng.gen_range(0..=max_extra)
        } else {
            0
        };
        b.op_with_extra(&format!("v{i}"), &inputs, &name(i + 1), size, extra);
    }
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::brute_force;

    #[test]
    fn diamond_family_has_six_orders() {
        let g = generate(&GeneratorSpec::ParallelBranches {
            branches: 2,
            depth: 2,
            residual: false,
            size: 4,
        })
        .unwrap();
        assert_eq!(g.num_ops(), 6);
        assert_eq!(brute_force(&g).unwrap().legal_orders, Some(6));
    }

    #[test]
    fn random_dags_are_deterministic() {
        let spec = GeneratorSpec::RandomDag {
            n: 10,
            seed: 7,
            max_fan_in: 3,
            max_size: 16,
            max_extra: 0,
        };
        assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
        let other = GeneratorSpec::RandomDag {
            n: 10,
            seed: 8,
            max_fan_in: 3,
            max_size: 16,
            max_extra: 0,
        };
        assert_ne!(generate(&spec).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn spec_json_uses_family_tag() {
        let spec: GeneratorSpec =
            serde_json::from_str(r#"{"family": "hrnet-block-like", "branches": 3}"#).unwrap();
        assert_eq!(
            spec,
            GeneratorSpec::HrnetBlockLike {
                branches: 3,
                blocks: 2,
                stages: 1,
                size: 16
            }
        );
        let g = generate(&spec).unwrap();
        assert_eq!(g.num_ops(), 3 * 2 * 7);
        assert_eq!(g.inputs().len(), 3);
    }

    #[test]
    fn invalid_specs_are_reported() {
        assert!(generate(&GeneratorSpec::Linear { depth: 0, size: 1 }).is_err());
        assert!(serde_json::from_str::<GeneratorSpec>(r#"{"family": "mystery"}"#).is_err());
    }

    #[test]
    fn nasnet_cells_have_expected_size() {
        let g = generate(&GeneratorSpec::NasnetCellLike {
            cells: 1,
            blocks: 5,
            chain_len: 7,
            seed: 1,
            size: 4,
        })
        .unwrap();
        assert_eq!(g.num_ops(), 5 * (2 * 7 + 1) + 1);
    }
}
