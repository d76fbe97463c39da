//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. Thresholds are the constants below.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use memsched::bench::{random_corpus, run_bench, BenchConfig, Method};
use memsched::ilp::{build_model, export_lp, model_stats, op_window};
use memsched::partition::naive_partition;
use memsched::solver::solve_model;
use memsched::{
    acyclic_partition, brute_force, generate, iterative_fusion, partitioned_schedule, solve, ComputationGraph,
    GeneratorSpec, GraphBuilder, SolverConfig,
};

const CORPUS_SEED: u64 = 20_241_017;
const CORPUS_SIZE: usize = 1000;
const CORPUS_MAX_OPS: usize = 12;
const ORACLE_BUDGET: Duration = Duration::from_secs(300);
const PRUNE_CHECK_MAX_OPS: usize = 10;
const COUNT_BUDGET: Duration = Duration::from_secs(1);
const CONTRACTION_BUDGET: Duration = Duration::from_secs(1);
const MIN_VARIABLE_REDUCTION: f64 = 0.80;
const SLOW_RAW_SOLVE: Duration = Duration::from_secs(1);
const MIN_SPEEDUP: f64 = 5.0;
const MAX_HRNET_PARTITION_GAP: f64 = 0.05;
const MAX_FUSE: usize = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn criterion(n: usize, title: &str, f: impl FnOnce() -> Outcome) -> bool {
    let started = Instant::now();
    let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        outcome(false, format!("panicked: {msg}"))
    });
    println!(
        "criterion {n:>2} [{}] {title}: {} ({:.2?})",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        started.elapsed()
    );
    o.pass
}

fn spec(json: &str) -> GeneratorSpec {
    serde_json::from_str(json).unwrap()
}

fn nasnet_corpus() -> Vec<GeneratorSpec> {
    let mut c: Vec<GeneratorSpec> = (0..4)
        .map(|seed| GeneratorSpec::NasnetCellLike {
            cells: 1,
            blocks: 5,
            chain_len: 7,
            seed,
            size: 4,
        })
        .collect();
    c.push(spec(r#"{"family":"nasnet-cell-like","cells":2,"seed":9,"size":7}"#));
    c
}

fn hrnet_corpus() -> Vec<GeneratorSpec> {
    [
        r#"{"family":"hrnet-block-like","branches":3}"#,
        r#"{"family":"hrnet-block-like","branches":3,"stages":2}"#,
        r#"{"family":"hrnet-block-like","branches":4,"blocks":3}"#,
        r#"{"family":"hrnet-block-like","branches":4,"stages":3}"#,
        r#"{"family":"hrnet-block-like","branches":5}"#,
        r#"{"family":"hrnet-block-like","branches":7,"blocks":1,"size":256}"#,
        r#"{"family":"hrnet-block-like","branches":6,"blocks":2,"size":256}"#,
    ]
    .into_iter()
    .map(spec)
    .collect()
}

fn main() {
    let cfg = SolverConfig::default();
    let corpus: Vec<ComputationGraph> = random_corpus(CORPUS_SIZE, CORPUS_MAX_OPS, CORPUS_SEED)
        .iter()
        .map(|s| generate(s).unwrap())
        .collect();
    let mut optimum: Vec<i64> = Vec::new();
    let mut results = Vec::new();

    results.push(criterion(1, "oracle equivalence", || {
        let started = Instant::now();
        let mut mismatches = 0;
        for g in &corpus {
            let bb = solve(g, &cfg).unwrap();
            let bf = brute_force(g).unwrap();
            if bb.peak != bf.peak || !bb.proven_optimal {
                mismatches += 1;
            }
            optimum.push(bf.peak);
        }
        let took = started.elapsed();
        let max_ops = corpus.iter().map(|g| g.num_ops()).max().unwrap();
        outcome(
            mismatches == 0 && corpus.len() >= 1000 && max_ops <= 12 && took < ORACLE_BUDGET,
            format!(
                "{} random DAGs (<= {max_ops} ops, sizes 1..=16), {mismatches} mismatches, {took:.1?} of {ORACLE_BUDGET:?}",
                corpus.len()
            ),
        )
    }));

    results.push(criterion(2, "fusion preserves the optimum", || {
        let mut bad = 0;
        let mut fused_graphs = 0;
        let mut ops_saved = 0;
        for (g, &opt) in corpus.iter().zip(&optimum) {
            let fg = iterative_fusion(g, MAX_FUSE);
            let r = solve(&fg.graph, &cfg).unwrap();
            let expanded = fg.expand(&r.schedule).unwrap();
            let back = memsched::evaluate(g, &expanded).unwrap().peak;
            if r.peak != opt || back != opt {
                bad += 1;
            }
            if fg.num_fusions() > 0 {
                fused_graphs += 1;
                ops_saved += g.num_ops() - fg.graph.num_ops();
            }
        }
        outcome(
            bad == 0 && optimum.len() == corpus.len(),
            format!("{bad} differences; {fused_graphs} graphs fused, {ops_saved} operators removed"),
        )
    }));

    results.push(criterion(3, "pruning soundness", || {
        let mut checked = 0;
        let mut bad = 0;
        for (g, &opt) in corpus.iter().zip(&optimum) {
            if g.num_ops() > PRUNE_CHECK_MAX_OPS {
                continue;
            }
            checked += 1;
            let raw = solve_model(&build_model(g, false)).unwrap().map(|s| s.mem);
            let pruned = solve_model(&build_model(g, true)).unwrap().map(|s| s.mem);
            if raw != Some(opt) || pruned != Some(opt) {
                bad += 1;
            }
        }
        let chain = generate(&GeneratorSpec::Linear { depth: 10, size: 4 }).unwrap();
        let m = build_model(&chain, true);
        let windows: Vec<Vec<usize>> = (0..10).map(|op| op_window(&m, op)).collect();
        let one_each = windows.iter().enumerate().all(|(op, w)| *w == vec![op + 1]);
        outcome(
            bad == 0 && one_each && checked > 0,
            format!(
                "{checked} graphs <= {PRUNE_CHECK_MAX_OPS} ops, {bad} optimum differences; 10-op chain windows {}",
                if one_each { "are single steps" } else { "are wider than one step" }
            ),
        )
    }));

    results.push(criterion(4, "schedule counts", || {
        let count = |json: &str| {
            let g = generate(&spec(json)).unwrap();
            let started = Instant::now();
            let r = brute_force(&g).unwrap();
            (r.legal_orders.unwrap(), started.elapsed())
        };
        let (two, t2) = count(r#"{"family":"parallel-branches","branches":2,"depth":2}"#);
        let (lin, tl) = count(r#"{"family":"linear","depth":8}"#);
        let (four, t4) = count(r#"{"family":"parallel-branches","branches":4,"depth":2}"#);
        let fast = [t2, tl, t4].iter().all(|&t| t < COUNT_BUDGET);
        outcome(
            two == 6 && lin == 1 && four > 100 && fast,
            format!("2-branch {two}, linear {lin}, 4-branch {four}; slowest {:.2?}", t2.max(tl).max(t4)),
        )
    }));

    results.push(criterion(5, "hrnet block contraction", || {
        let g = generate(&spec(r#"{"family":"hrnet-block-like","branches":3}"#)).unwrap();
        let started = Instant::now();
        let fg = iterative_fusion(&g, MAX_FUSE);
        let took = started.elapsed();
        outcome(
            fg.graph.num_ops() == 3 && took < CONTRACTION_BUDGET,
            format!("{} -> {} operators in {took:.2?}", g.num_ops(), fg.graph.num_ops()),
        )
    }));

    results.push(criterion(6, "pruning window", || {
        // a1..a4 -> u -> d1 -> d2, plus p1 -> p2 -> p3 feeding d2: 10 operators
        let g = GraphBuilder::new("KB")
            .input("x", 1)
            .op("a1", &["x"], "A1", 1)
            .op("a2", &["A1"], "A2", 1)
            .op("a3", &["A2"], "A3", 1)
            .op("a4", &["A3"], "A4", 1)
            .op("u", &["A4"], "U", 1)
            .op("d1", &["U"], "D1", 1)
            .op("p1", &["x"], "P1", 1)
            .op("p2", &["P1"], "P2", 1)
            .op("p3", &["P2"], "P3", 1)
            .op("d2", &["D1", "P3"], "D2", 1)
            .build()
            .unwrap();
        let u = g.op_index("u").unwrap();
        let r = g.reachability();
        let w = op_window(&build_model(&g, true), u);
        outcome(
            g.num_ops() == 10 && r.ancestors(u).len() == 4 && r.descendants(u).len() == 2 && w == vec![5, 6, 7, 8],
            format!("free steps {w:?}"),
        )
    }));

    results.push(criterion(7, "fusion and pruning ablation", || {
        let mut lines = Vec::new();
        let mut pass = true;
        let mut slow = 0;
        for s in nasnet_corpus().iter().chain(&hrnet_corpus()) {
            let g = generate(s).unwrap();
            let raw_vars = model_stats(&build_model(&g, false)).variables_free;
            let t0 = Instant::now();
            let raw = solve(&g, &cfg).unwrap();
            let raw_time = t0.elapsed();
            let t1 = Instant::now();
            let fg = iterative_fusion(&g, MAX_FUSE);
            let fused = solve(&fg.graph, &cfg).unwrap();
            let fused_time = t1.elapsed();
            let fused_vars = model_stats(&build_model(&fg.graph, true)).variables_free;
            let reduction = 1.0 - fused_vars as f64 / raw_vars as f64;
            let speedup = raw_time.as_secs_f64() / fused_time.as_secs_f64();
            let mut ok = reduction >= MIN_VARIABLE_REDUCTION && fused.peak <= raw.peak;
            if raw.proven_optimal {
                ok &= fused.peak == raw.peak;
            }
            if raw_time > SLOW_RAW_SOLVE {
                slow += 1;
                ok &= speedup >= MIN_SPEEDUP;
            }
            pass &= ok;
            lines.push(format!(
                "{} vars {raw_vars}->{fused_vars} (-{:.1}%), time {raw_time:.2?}->{fused_time:.2?}{}",
                s.label(),
                reduction * 100.0,
                if raw_time > SLOW_RAW_SOLVE { format!(" ({speedup:.0}x)") } else { String::new() }
            ));
        }
        for l in &lines {
            println!("    {l}");
        }
        outcome(
            pass,
            format!("{} instances, {slow} with raw solve over {SLOW_RAW_SOLVE:?}", lines.len()),
        )
    }));

    results.push(criterion(8, "partition quality", || {
        let mut k1_bad = 0;
        let mut below = 0;
        let mut gaps = [Vec::new(), Vec::new()];
        let (mut heur, mut naive) = (0i64, 0i64);
        for (g, &opt) in corpus.iter().zip(&optimum) {
            let p1 = partitioned_schedule(g, 1, &cfg, MAX_FUSE).unwrap().result.peak;
            if p1 != opt {
                k1_bad += 1;
            }
            for (i, k) in [2, 3].into_iter().enumerate() {
                let pk = partitioned_schedule(g, k, &cfg, MAX_FUSE).unwrap().result.peak;
                if pk < p1 {
                    below += 1;
                }
                gaps[i].push((pk - p1) as f64 / p1 as f64);
                if k <= g.num_ops() {
                    heur += acyclic_partition(g, k).unwrap().cut_weight;
                    naive += naive_partition(g, k).unwrap().cut_weight;
                }
            }
        }
        let mut hr_gaps = [Vec::new(), Vec::new()];
        for s in hrnet_corpus() {
            let g = generate(&s).unwrap();
            let p1 = partitioned_schedule(&g, 1, &cfg, MAX_FUSE).unwrap().result.peak;
            for (i, k) in [2, 3].into_iter().enumerate() {
                let pk = partitioned_schedule(&g, k, &cfg, MAX_FUSE).unwrap().result.peak;
                if pk < p1 {
                    below += 1;
                }
                hr_gaps[i].push((pk - p1) as f64 / p1 as f64);
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let hr_ok = hr_gaps.iter().all(|g| mean(g) <= MAX_HRNET_PARTITION_GAP);
        outcome(
            k1_bad == 0 && below == 0 && hr_ok && heur <= naive,
            format!(
                "k=1 mismatches {k1_bad}; mean gap random k=2 {:.2}% k=3 {:.2}%, hrnet k=2 {:.2}% k=3 {:.2}%; cut heuristic {heur} vs naive {naive}",
                mean(&gaps[0]) * 100.0,
                mean(&gaps[1]) * 100.0,
                mean(&hr_gaps[0]) * 100.0,
                mean(&hr_gaps[1]) * 100.0
            ),
        )
    }));

    results.push(criterion(9, "exact never worse than rpo", || {
        let mut bench: Vec<GeneratorSpec> = [
            r#"{"family":"linear","depth":6}"#,
            r#"{"family":"residual-chain","blocks":3}"#,
            r#"{"family":"parallel-branches","branches":2,"depth":2,"residual":true}"#,
            r#"{"family":"parallel-branches","branches":4,"depth":3}"#,
        ]
        .into_iter()
        .map(spec)
        .collect();
        bench.extend(nasnet_corpus());
        bench.extend(hrnet_corpus().into_iter().take(5));
        bench.extend(random_corpus(40, 30, CORPUS_SEED + 1));
        let report = run_bench(&bench, &[Method::Rpo, Method::Exact], &BenchConfig::default());
        let mut bad = 0;
        let mut strictly = 0;
        for pair in report.rows.chunks(2) {
            match (pair[0].peak, pair[1].peak) {
                (Some(rpo), Some(exact)) if exact <= rpo => strictly += usize::from(exact < rpo),
                _ => bad += 1,
            }
        }
        outcome(
            bad == 0 && report.rows.len() == 2 * bench.len(),
            format!("{} rows, {bad} violations, exact strictly better on {strictly}", report.rows.len()),
        )
    }));

    results.push(criterion(10, "golden LP files", || {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
        let mut same = 0;
        let cases = [
            ("single_op.lp", common::single_op(), false),
            ("diamond.lp", common::diamond(), false),
            ("diamond_pruned.lp", common::diamond(), true),
        ];
        for (name, g, prune) in &cases {
            let want = std::fs::read(dir.join(name)).unwrap();
            let a = export_lp(&build_model(g, *prune));
            let b = export_lp(&build_model(g, *prune));
            if a.as_bytes() == want && a == b {
                same += 1;
            }
        }
        outcome(same == cases.len(), format!("{same}/{} byte-identical", cases.len()))
    }));

    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
