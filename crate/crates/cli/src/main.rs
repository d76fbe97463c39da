use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use memsched::bench::{emit_plot_data, run_bench, BenchConfig, BenchReport, Method, PlotSource};
use memsched::footprint::TraceDocument;
use memsched::fusion::{iterative_fusion_with, FusionConfig, FusionReport};
use memsched::ilp::{model_stats, write_lp, ModelStats};
use memsched::partition::PlanDocument;
use memsched::solver::SolverMode;
use memsched::{
    build_model, evaluate, generate, load_graph_file, partitioned_schedule, rpo_schedule, solve, GeneratorSpec,
    Schedule, SolverConfig,
};
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Parser)]
#[command(name = "memsched", version, about = "Operator scheduling for minimum peak activation memory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Schedule a graph and print the result as JSON.
    Schedule(ScheduleArgs),
    /// Write a synthetic graph.
    Gen(GenArgs),
    /// Run methods over a corpus of generator specs.
    Bench(BenchArgs),
    /// Turn a trace or a bench report into plot-ready columns.
    PlotData(PlotArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ScheduleMethod {
    Rpo,
    Exact,
    Brute,
}

#[derive(Args)]
struct ScheduleArgs {
    /// Graph JSON document.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_enum, default_value = "exact")]
    method: ScheduleMethod,
    /// Fuse the graph before solving.
    #[arg(long)]
    fuse: bool,
    /// Prune the ILP model written by --emit-lp.
    #[arg(long)]
    prune: bool,
    /// Split into K parts and solve the part holding the peak exactly.
    #[arg(long, value_name = "K")]
    partition: Option<usize>,
    /// Largest sub-graph considered for fusion.
    #[arg(long, value_name = "M", default_value_t = 20)]
    max_fuse: usize,
    /// Search budget in seconds.
    #[arg(long, value_name = "S", default_value_t = 30.0)]
    time_limit: f64,
    /// Write the ILP model of the scheduled graph in LP format.
    #[arg(long, value_name = "PATH")]
    emit_lp: Option<PathBuf>,
    /// Write the fusion report as JSON.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Write step, stable and transient footprints as TSV.
    #[arg(long, value_name = "PATH")]
    plot_data: Option<PathBuf>,
    /// Write the footprint trace as JSON.
    #[arg(long, value_name = "PATH")]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// linear, residual-chain, parallel-branches, nasnet-cell-like,
    /// hrnet-block-like or random-dag.
    #[arg(long)]
    family: String,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    branches: Option<usize>,
    #[arg(long)]
    residual: bool,
    #[arg(long)]
    cells: Option<usize>,
    #[arg(long)]
    chain_len: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    /// Operator count for random-dag.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_fan_in: Option<usize>,
    #[arg(long)]
    max_size: Option<i64>,
    #[arg(long)]
    max_extra: Option<i64>,
    /// Base tensor size.
    #[arg(long)]
    size: Option<i64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// JSON list of generator specs.
    #[arg(long)]
    corpus: PathBuf,
    /// CSV report.
    #[arg(long)]
    out: PathBuf,
    /// Also write the report as JSON.
    #[arg(long, value_name = "PATH")]
    json: Option<PathBuf>,
    /// Comma-separated: rpo, exact, fused, brute, partition-K.
    #[arg(long, value_delimiter = ',', default_value = "rpo,exact,fused")]
    methods: Vec<Method>,
    #[arg(long, value_name = "M", default_value_t = 20)]
    max_fuse: usize,
    #[arg(long, value_name = "S", default_value_t = 30.0)]
    time_limit: f64,
    /// Count variables of the raw model after pruning.
    #[arg(long)]
    prune: bool,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct PlotArgs {
    /// Trace JSON written by `schedule --trace`.
    #[arg(long, conflicts_with = "report", required_unless_present = "report")]
    trace: Option<PathBuf>,
    /// Bench report CSV.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct ScheduleOutput {
    schedule: Vec<String>,
    peak: i64,
    proven_optimal: bool,
    wall_time_ms: f64,
    explored_states: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    fused_ops: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    plan: Option<PlanDocument>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<ModelStats>,
}

fn solver_config(time_limit: f64) -> Result<SolverConfig> {
    if !(time_limit.is_finite() && time_limit > 0.0) {
        bail!("--time-limit must be a positive number of seconds");
    }
    Ok(SolverConfig::default().with_time_limit(Duration::from_secs_f64(time_limit)))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn schedule(args: ScheduleArgs) -> Result<()> {
    let g = load_graph_file(&args.input)?;
    let mut cfg = solver_config(args.time_limit)?;
    if args.method == ScheduleMethod::Brute {
        cfg.mode = SolverMode::BruteForce;
    }
    let fusion_cfg = FusionConfig {
        max_subgraph: args.max_fuse,
        solver: cfg.clone(),
        ..FusionConfig::default()
    };
    let started = Instant::now();

    let mut fusion: Option<FusionReport> = None;
    let mut plan = None;
    let mut fused_ops = None;
    let mut model = None;
    let (sched, proven, explored): (Schedule, bool, u64);
    if let Some(k) = args.partition {
        if args.method == ScheduleMethod::Rpo {
            bail!("--partition needs --method exact or brute for the peak part");
        }
        let r = partitioned_schedule(&g, k, &cfg, args.max_fuse)?;
        if let Some(path) = &args.emit_lp {
            model = Some(emit_lp(&r.fused.graph, args.prune, path)?);
        }
        fusion = Some(r.fused.report());
        fused_ops = Some(r.fused_ops());
        plan = Some(r.plan_document());
        (sched, proven, explored) = (r.result.schedule, r.result.proven_optimal, r.result.explored_states);
    } else {
        let fg = args.fuse.then(|| iterative_fusion_with(&g, &fusion_cfg));
        let target = fg.as_ref().map_or(&g, |f| &f.graph);
        if let Some(path) = &args.emit_lp {
            model = Some(emit_lp(target, args.prune, path)?);
        }
        let (local, p, e) = match args.method {
            ScheduleMethod::Rpo => (rpo_schedule(target), false, 0),
            ScheduleMethod::Exact | ScheduleMethod::Brute => {
                let r = solve(target, &cfg)?;
                (r.schedule, r.proven_optimal, r.explored_states)
            }
        };
        (sched, proven, explored) = match &fg {
            Some(f) => {
                fusion = Some(f.report());
                fused_ops = Some(f.graph.num_ops());
                (f.expand(&local)?, p, e)
            }
            None => (local, p, e),
        };
    }
    let wall = started.elapsed();
    // re-evaluated on the original graph whatever the route
    let trace = evaluate(&g, &sched)?;

    if let Some(path) = &args.report {
        let Some(report) = &fusion else {
            bail!("--report needs --fuse or --partition");
        };
        write_json(path, report)?;
    }
    if let Some(path) = &args.plot_data {
        emit_plot_data(PlotSource::Trace(&trace), create(path)?)?;
    }
    if let Some(path) = &args.trace {
        write_json(path, &TraceDocument::new(&trace, g.unit()))?;
    }
    let out = ScheduleOutput {
        schedule: sched.ids(&g),
        peak: trace.peak,
        proven_optimal: proven,
        wall_time_ms: wall.as_secs_f64() * 1e3,
        explored_states: explored,
        fused_ops,
        plan,
        model,
    };
    let mut stdout = std::io::stdout().lock();
    match writeln!(stdout, "{}", serde_json::to_string_pretty(&out)?) {
        // a closed pipe (`| head`) is not an error
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn emit_lp(g: &memsched::ComputationGraph, prune: bool, path: &Path) -> Result<ModelStats> {
    let m = build_model(g, prune);
    write_lp(&m, path).with_context(|| format!("cannot write {}", path.display()))?;
    Ok(model_stats(&m))
}

fn gen(args: GenArgs) -> Result<()> {
    let mut obj = Map::new();
    obj.insert("family".into(), Value::from(args.family.clone()));
    let mut put = |key: &str, v: Option<Value>| {
        if let Some(v) = v {
            obj.insert(key.into(), v);
        }
    };
    put("depth", args.depth.map(Value::from));
    put("blocks", args.blocks.map(Value::from));
    put("branches", args.branches.map(Value::from));
    put("residual", args.residual.then_some(Value::Bool(true)));
    put("cells", args.cells.map(Value::from));
    put("chain_len", args.chain_len.map(Value::from));
    put("stages", args.stages.map(Value::from));
    put("n", args.n.map(Value::from));
    put("seed", args.seed.map(Value::from));
    put("max_fan_in", args.max_fan_in.map(Value::from));
    put("max_size", args.max_size.map(Value::from));
    put("max_extra", args.max_extra.map(Value::from));
    put("size", args.size.map(Value::from));
    let spec: GeneratorSpec = serde_json::from_value(Value::Object(obj))
        .with_context(|| format!("invalid parameters for family `{}`", args.family))?;
    let g = generate(&spec)?;
    fs::write(&args.out, memsched::document::to_json(&g))
        .with_context(|| format!("cannot write {}", args.out.display()))?;
    eprintln!("{}: {} operators -> {}", spec.label(), g.num_ops(), args.out.display());
    Ok(())
}

fn bench(args: BenchArgs) -> Result<()> {
    let text = fs::read_to_string(&args.corpus).with_context(|| format!("cannot read {}", args.corpus.display()))?;
    let corpus: Vec<GeneratorSpec> = serde_json::from_str(&text).context("corpus must be a JSON list of generator specs")?;
    let cfg = BenchConfig {
        solver: solver_config(args.time_limit)?,
        max_fuse: args.max_fuse,
        prune: args.prune,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.jobs.unwrap_or(0))
        .build()?;
    let report = pool.install(|| run_bench(&corpus, &args.methods, &cfg));
    report.write_csv(create(&args.out)?)?;
    if let Some(path) = &args.json {
        fs::write(path, report.to_json()).with_context(|| format!("cannot write {}", path.display()))?;
    }
    let failed = report.errors().count();
    eprintln!("{} rows, {failed} errors -> {}", report.rows.len(), args.out.display());
    for row in report.errors() {
        eprintln!("  {} {}: {}", row.generator, row.method, row.error.as_deref().unwrap_or_default());
    }
    Ok(())
}

fn plot_data(args: PlotArgs) -> Result<()> {
    let w = create(&args.out)?;
    if let Some(path) = &args.trace {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let doc: TraceDocument = serde_json::from_str(&text).context("not a trace document")?;
        emit_plot_data(PlotSource::Trace(&doc.trace()), w)?;
    } else if let Some(path) = &args.report {
        let f = File::open(path).with_context(|| format!("cannot read {}", path.display()))?;
        let report = BenchReport::read_csv(f).context("not a bench report")?;
        emit_plot_data(PlotSource::Report(&report), w)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.command {
        Command::Schedule(a) => schedule(a),
        Command::Gen(a) => gen(a),
        Command::Bench(a) => bench(a),
        Command::PlotData(a) => plot_data(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
