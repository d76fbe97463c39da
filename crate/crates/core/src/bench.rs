//! Benchmark driver: run scheduling methods over a corpus of generated graphs
//! and write the results as CSV, JSON or plot-ready TSV.

use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::footprint::{evaluate, rpo_schedule, FootprintTrace, Schedule};
use crate::fusion::{iterative_fusion_with, FusionConfig};
use crate::generate::{generate, GeneratorSpec};
use crate::graph::ComputationGraph;
use crate::ilp::{build_model, model_stats};
use crate::partition::partitioned_schedule;
use crate::solver::{brute_force, solve, SolverConfig, SolverMode};

/// A scheduling method as named on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Rpo,
    /// Branch and bound on the raw graph.
    Exact,
    /// Iterative fusion, then branch and bound on the fused graph.
    Fused,
    Brute,
    /// The partitioning pipeline with `k` parts.
    Partition(usize),
}

impl Method {
    pub const DEFAULTS: [Method; 3] = [Method::Rpo, Method::Exact, Method::Fused];
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Rpo => f.write_str("rpo"),
            Method::Exact => f.write_str("exact"),
            Method::Fused => f.write_str("fused"),
            Method::Brute => f.write_str("brute"),
            Method::Partition(k) => write!(f, "partition-{k}"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rpo" => Ok(Method::Rpo),
            "exact" => Ok(Method::Exact),
            "fused" => Ok(Method::Fused),
            "brute" => Ok(Method::Brute),
            _ => s
                .strip_prefix("partition-")
                .and_then(|k| k.parse().ok())
                .filter(|&k| k >= 1)
                .map(Method::Partition)
                .ok_or_else(|| {
                    format!("unknown method `{s}` (expected rpo, exact, fused, brute or partition-K)")
                }),
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub solver: SolverConfig,
    /// Largest sub-graph iterative fusion tries.
    pub max_fuse: usize,
    /// Prune the model counted for the raw-graph methods.
    pub prune: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            solver: SolverConfig::default(),
            max_fuse: 20,
            prune: false,
        }
    }
}

/// One (graph, method) measurement. `peak` is `None` when the method failed,
/// in which case `error` says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub generator: String,
    pub family: String,
    pub raw_ops: usize,
    pub fused_ops: usize,
    pub variables_free: usize,
    pub variables_total: usize,
    pub method: Method,
    pub peak: Option<i64>,
    pub wall_time_ms: f64,
    pub proven_optimal: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

struct Prepared {
    graph: ComputationGraph,
    fused: crate::fusion::FusedGraph,
    fuse_time: Duration,
    raw_vars: (usize, usize),
    fused_vars: (usize, usize),
}

fn prepare(spec: &GeneratorSpec, cfg: &BenchConfig) -> Result<Prepared, String> {
    let graph = generate(spec).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let fusion_cfg = FusionConfig {
        max_subgraph: cfg.max_fuse,
        solver: cfg.solver.clone(),
        ..FusionConfig::default()
    };
    let fused = iterative_fusion_with(&graph, &fusion_cfg);
    let fuse_time = started.elapsed();
    let raw = model_stats(&build_model(&graph, cfg.prune));
    let fz = model_stats(&build_model(&fused.graph, true));
    Ok(Prepared {
        graph,
        fused,
        fuse_time,
        raw_vars: (raw.variables_free, raw.variables_total),
        fused_vars: (fz.variables_free, fz.variables_total),
    })
}

/// Schedule of the original graph, whether it is proven optimal, and the
/// time spent.
fn run_method(p: &Prepared, method: Method, cfg: &BenchConfig) -> Result<(Schedule, bool, Duration), String> {
    let started = Instant::now();
    let g = &p.graph;
    match method {
        Method::Rpo => Ok((rpo_schedule(g), false, started.elapsed())),
        Method::Exact => {
            let cfg = SolverConfig {
                mode: SolverMode::ExactBb,
                ..cfg.solver.clone()
            };
            let r = solve(g, &cfg).map_err(|e| e.to_string())?;
            Ok((r.schedule, r.proven_optimal, started.elapsed()))
        }
        Method::Fused => {
            let cfg = SolverConfig {
                mode: SolverMode::ExactBb,
                ..cfg.solver.clone()
            };
            let r = solve(&p.fused.graph, &cfg).map_err(|e| e.to_string())?;
            let sched = p.fused.expand(&r.schedule).map_err(|e| e.to_string())?;
            // fusion is part of the method's cost
            Ok((sched, r.proven_optimal, started.elapsed() + p.fuse_time))
        }
        Method::Brute => {
            let r = brute_force(g).map_err(|e| e.to_string())?;
            Ok((r.schedule, true, started.elapsed()))
        }
        Method::Partition(k) => {
            let r = partitioned_schedule(g, k, &cfg.solver, cfg.max_fuse).map_err(|e| e.to_string())?;
            Ok((r.result.schedule, r.result.proven_optimal, started.elapsed()))
        }
    }
}

fn bench_graph(spec: &GeneratorSpec, methods: &[Method], cfg: &BenchConfig) -> Vec<BenchRow> {
    let prepared = prepare(spec, cfg);
    methods
        .iter()
        .map(|&method| {
            let mut row = BenchRow {
                generator: spec.label(),
                family: spec.family().to_string(),
                raw_ops: 0,
                fused_ops: 0,
                variables_free: 0,
                variables_total: 0,
                method,
                peak: None,
                wall_time_ms: 0.0,
                proven_optimal: false,
                error: None,
            };
            let p = match &prepared {
                Ok(p) => p,
                Err(e) => {
                    row.error = Some(e.clone());
                    return row;
                }
            };
            row.raw_ops = p.graph.num_ops();
            row.fused_ops = p.fused.graph.num_ops();
            (row.variables_free, row.variables_total) = match method {
                Method::Fused | Method::Partition(_) => p.fused_vars,
                _ => p.raw_vars,
            };
            match run_method(p, method, cfg) {
                Ok((sched, proven, time)) => {
                    row.wall_time_ms = time.as_micros() as f64 / 1e3;
                    // never trust a method's own bookkeeping
                    match evaluate(&p.graph, &sched) {
                        Ok(trace) => {
                            row.peak = Some(trace.peak);
                            row.proven_optimal = proven;
                        }
                        Err(e) => row.error = Some(format!("illegal schedule: {e}")),
                    }
                }
                Err(e) => row.error = Some(e),
            }
            row
        })
        .collect()
}

/// Runs every method on every graph. Graphs are processed in parallel on the
/// current rayon pool; rows come back in corpus order, methods in the order
/// given.
pub fn run_bench(corpus: &[GeneratorSpec], methods: &[Method], cfg: &BenchConfig) -> BenchReport {
    let rows = corpus
        .par_iter()
        .map(|spec| bench_graph(spec, methods, cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    BenchReport { rows }
}

/// `count` random DAGs with 1..=`max_ops` operators and tensor sizes in
/// 1..=16, reproducible from `seed`.
pub fn random_corpus(count: usize, max_ops: usize, seed: u64) -> Vec<GeneratorSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| GeneratorSpec::RandomDag {
            n: rng.gen_range(1..=max_ops),
            seed: rng.gen(),
            max_fan_in: 3,
            max_size: 16,
            max_extra: 0,
        })
        .collect()
}

impl BenchReport {
    pub fn write_csv<W: Write>(&self, w: W) -> io::Result<()> {
        let mut out = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .has_headers(false)
            .from_writer(w);
        out.write_record(HEADER)?;
        for row in &self.rows {
            out.serialize(row)?;
        }
        out.flush()
    }

    pub fn read_csv<R: io::Read>(r: R) -> Result<BenchReport, csv::Error> {
        let rows = csv::Reader::from_reader(r)
            .deserialize()
            .collect::<Result<_, _>>()?;
        Ok(BenchReport { rows })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rows serialize")
    }

    /// Rows that errored or whose method failed to produce a schedule.
    pub fn errors(&self) -> impl Iterator<Item = &BenchRow> {
        self.rows.iter().filter(|r| r.error.is_some())
    }
}

// Written explicitly so an empty report still gets a header line.
const HEADER: [&str; 11] = [
    "generator",
    "family",
    "raw_ops",
    "fused_ops",
    "variables_free",
    "variables_total",
    "method",
    "peak",
    "wall_time_ms",
    "proven_optimal",
    "error",
];

/// What [`emit_plot_data`] can write.
#[derive(Debug, Clone, Copy)]
pub enum PlotSource<'a> {
    /// Per-step footprints.
    Trace(&'a FootprintTrace),
    /// One bar per graph: operators before and after fusion.
    Report(&'a BenchReport),
}

/// Tab-separated columns for external plotting.
///
/// A trace gives `step  stable  transient` for steps `0..=n`; step 0 has no
/// stable value. A report gives `graph  raw_ops  fused_ops`, one line per
/// graph in first-seen order.
pub fn emit_plot_data<W: Write>(src: PlotSource<'_>, mut w: W) -> io::Result<()> {
    match src {
        PlotSource::Trace(t) => {
            writeln!(w, "step\tstable\ttransient")?;
            for (step, tr) in t.transient.iter().enumerate() {
                match step.checked_sub(1).map(|i| t.stable[i]) {
                    Some(s) => writeln!(w, "{step}\t{s}\t{tr}")?,
                    None => writeln!(w, "{step}\t\t{tr}")?,
                }
            }
        }
        PlotSource::Report(r) => {
            writeln!(w, "graph\traw_ops\tfused_ops")?;
            let mut seen = std::collections::HashSet::new();
            for row in &r.rows {
                if seen.insert(row.generator.as_str()) {
                    writeln!(w, "{}\t{}\t{}", row.generator, row.raw_ops, row.fused_ops)?;
                }
            }
        }
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::footprint::evaluate;
    use crate::graph::fixtures::chain;

    fn fig2() -> Vec<GeneratorSpec> {
        serde_json::from_str(
            r#"[
                {"family": "linear", "depth": 5},
                {"family": "residual-chain", "blocks": 2},
                {"family": "parallel-branches", "branches": 2, "depth": 2, "residual": true},
                {"family": "parallel-branches", "branches": 4, "depth": 2}
            ]"#,
        )
        .unwrap()
    }

    #[test]
    fn method_names_round_trip() {
        for m in [Method::Rpo, Method::Exact, Method::Fused, Method::Brute, Method::Partition(3)] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert!("partition-0".parse::<Method>().is_err());
        assert!("ilp".parse::<Method>().is_err());
    }

    #[test]
    fn exact_never_loses_to_rpo() {
        let corpus = fig2();
        let r = run_bench(&corpus, &[Method::Rpo, Method::Exact], &BenchConfig::default());
        assert_eq!(r.rows.len(), corpus.len() * 2);
        for pair in r.rows.chunks(2) {
            assert_eq!(pair[0].generator, pair[1].generator);
            assert!(pair[1].peak.unwrap() <= pair[0].peak.unwrap(), "{pair:?}");
            assert!(pair[1].proven_optimal);
        }
        assert_eq!(r.errors().count(), 0);
    }

    #[test]
    fn nasnet_fuses_to_fewer_ops() {
        let corpus: Vec<GeneratorSpec> = (0..3)
            .map(|seed| GeneratorSpec::NasnetCellLike {
                cells: 1,
                blocks: 5,
                chain_len: 7,
                seed,
                size: 4,
            })
            .collect();
        let r = run_bench(&corpus, &[Method::Rpo], &BenchConfig::default());
        for row in &r.rows {
            assert!(row.fused_ops < row.raw_ops, "{row:?}");
        }
    }

    #[test]
    fn rows_keep_corpus_order() {
        let corpus = random_corpus(24, 8, 5);
        let methods = [Method::Exact, Method::Brute, Method::Fused, Method::Partition(2)];
        let r = run_bench(&corpus, &methods, &BenchConfig::default());
        assert_eq!(r.rows.len(), corpus.len() * methods.len());
        for (i, row) in r.rows.iter().enumerate() {
            assert_eq!(row.generator, corpus[i / methods.len()].label());
            assert_eq!(row.method, methods[i % methods.len()]);
        }
        for chunk in r.rows.chunks(methods.len()) {
            let brute = chunk[1].peak.unwrap();
            assert_eq!(chunk[0].peak, Some(brute));
            assert_eq!(chunk[2].peak, Some(brute));
            assert!(chunk[3].peak.unwrap() >= brute);
        }
    }

    #[test]
    fn failures_are_recorded_per_row() {
        let corpus = vec![
            GeneratorSpec::Linear { depth: 0, size: 4 },
            GeneratorSpec::Linear { depth: 20, size: 4 },
        ];
        let r = run_bench(&corpus, &[Method::Brute, Method::Rpo], &BenchConfig::default());
        assert_eq!(r.rows.len(), 4);
        assert!(r.rows[0].error.as_deref().unwrap().contains("invalid generator spec"));
        assert!(r.rows[1].error.is_some());
        assert!(r.rows[2].error.as_deref().unwrap().contains("14"));
        assert_eq!(r.rows[3].peak, Some(8));
    }

    #[test]
    fn csv_has_header_and_round_trips() {
        let mut buf = Vec::new();
        BenchReport::default().write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), HEADER.join(",") + "\n");

        let r = run_bench(&fig2()[..2], &[Method::Rpo, Method::Brute], &BenchConfig::default());
        let mut buf = Vec::new();
        r.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(!text.contains('\r'));
        assert_eq!(text.lines().count(), 1 + r.rows.len());
        let back = BenchReport::read_csv(&buf[..]).unwrap();
        assert_eq!(back.rows.len(), r.rows.len());
        for (a, b) in back.rows.iter().zip(&r.rows) {
            assert_eq!((a.method, a.peak, &a.error), (b.method, b.peak, &b.error));
        }
        let json: BenchReport = serde_json::from_str(&r.to_json()).unwrap();
        for (a, b) in json.rows.iter().zip(&r.rows) {
            assert!((a.wall_time_ms - b.wall_time_ms).abs() < 1e-9);
            assert_eq!(
                BenchRow { wall_time_ms: 0.0, ..a.clone() },
                BenchRow { wall_time_ms: 0.0, ..b.clone() }
            );
        }
    }

    #[test]
    fn chain_trace_plot_data() {
        let g = chain();
        let t = evaluate(&g, &rpo_schedule(&g)).unwrap();
        let mut buf = Vec::new();
        emit_plot_data(PlotSource::Trace(&t), &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "step\tstable\ttransient\n0\t\t8\n1\t12\t4\n2\t6\t2\n3\t3\t1\n"
        );
    }

    #[test]
    fn report_plot_data_has_one_bar_per_graph() {
        let mut buf = Vec::new();
        emit_plot_data(PlotSource::Report(&BenchReport::default()), &mut buf).unwrap();
        assert_eq!(buf, b"graph\traw_ops\tfused_ops\n");

        let corpus = fig2();
        let r = run_bench(&corpus, &Method::DEFAULTS, &BenchConfig::default());
        let mut buf = Vec::new();
        emit_plot_data(PlotSource::Report(&r), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + corpus.len());
        assert!(text.lines().nth(1).unwrap().starts_with("linear-5\t5\t"));
    }

    #[test]
    fn random_corpus_is_reproducible() {
        assert_eq!(random_corpus(10, 12, 1), random_corpus(10, 12, 1));
        assert_ne!(random_corpus(10, 12, 1), random_corpus(10, 12, 2));
    }
}
