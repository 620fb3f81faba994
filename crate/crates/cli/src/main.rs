use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vcgraph::job::{default_guest_command, run_job, JobConfig, ProgramSource};
use vcgraph::report::{latency_json, latency_table};
use vcgraph_core::engine::EngineKind;
use vcgraph_core::graph::{generate_lognormal, save_edges, save_vertices};
use vcgraph_core::program::ProgramSchemas;
use vcgraph_ipc::bench::{bench_echo, BenchConfig};

#[derive(Parser)]
#[command(name = "vcgraph", version, about = "Vertex-centric graph processing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a vertex program over a graph.
    Run(RunArgs),
    /// Write a random graph with log-normal out-degrees.
    Generate(GenerateArgs),
    /// Measure echo round-trip latency over shared memory and sockets.
    BenchIpc(BenchArgs),
}

fn parse_param(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn logical_cores() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Args)]
struct RunArgs {
    /// pregel, gas or pushpull.
    #[arg(long, default_value = "pregel")]
    engine: EngineKind,
    /// Worker threads (default: logical core count).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, default_value_t = 100)]
    max_iter: u32,
    /// Built-in program: sssp, pagerank or cc.
    #[arg(long, required_unless_present = "program_file", conflicts_with = "program_file")]
    program: Option<String>,
    /// Program parameter for --program, repeatable.
    #[arg(long = "param", value_parser = parse_param)]
    params: Vec<(String, String)>,
    /// Program file served by guest processes.
    #[arg(long, requires = "schemas")]
    program_file: Option<PathBuf>,
    /// Schemas of a file program as `vertex;edge;message`.
    #[arg(long)]
    schemas: Option<String>,
    /// Guest executable (default: vcgraph-guest next to this binary).
    #[arg(long)]
    guest: Option<String>,
    /// Extra leading argument for the guest, repeatable.
    #[arg(long = "guest-arg", allow_hyphen_values = true)]
    guest_args: Vec<String>,
    #[arg(long)]
    vertices: PathBuf,
    #[arg(long)]
    edges: PathBuf,
    #[arg(long)]
    output: PathBuf,
    /// JSON-lines report (default: <output>.report.jsonl).
    #[arg(long)]
    report: Option<PathBuf>,
    /// Directory for channel files (default: a scratch directory).
    #[arg(long)]
    ipc_workdir: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    num_vertices: usize,
    #[arg(long, default_value_t = 4.0)]
    mu: f64,
    #[arg(long, default_value_t = 1.3)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    vertices: PathBuf,
    #[arg(long)]
    edges: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Payload sizes in bytes.
    #[arg(long, value_delimiter = ',', default_value = "64,4096")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    calls: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    workdir: Option<PathBuf>,
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let program = match (a.program, a.program_file) {
        (Some(name), None) => ProgramSource::Native { name, params: a.params },
        (None, Some(path)) => {
            if !a.params.is_empty() {
                bail!("--param applies to built-in programs; put parameters in the program file");
            }
            let text = a.schemas.context("--schemas is required with --program-file")?;
            let schemas = ProgramSchemas::parse(&text).with_context(|| format!("--schemas `{text}`"))?;
            let guest = match a.guest {
                Some(g) => std::iter::once(g).chain(a.guest_args).collect(),
                None => default_guest_command().into_iter().chain(a.guest_args).collect(),
            };
            ProgramSource::File { path, schemas, guest }
        }
        _ => bail!("give exactly one of --program or --program-file"),
    };
    let report = a.report.unwrap_or_else(|| {
        let mut s = a.output.clone().into_os_string();
        s.push(".report.jsonl");
        PathBuf::from(s)
    });
    let cfg = JobConfig {
        engine: a.engine,
        workers: a.workers.unwrap_or_else(logical_cores),
        max_iter: a.max_iter,
        program,
        vertices: a.vertices,
        edges: a.edges,
        output: a.output,
        report,
        ipc_workdir: a.ipc_workdir,
    };
    let r = run_job(&cfg)?;
    eprintln!(
        "{} on {} worker(s): {} iteration(s){} in {:.1} ms",
        r.kind,
        r.num_workers,
        r.iterations_executed,
        if r.converged_early { ", converged" } else { "" },
        r.wall_time.as_secs_f64() * 1e3
    );
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let g = generate_lognormal(a.num_vertices, a.mu, a.sigma, a.seed)?;
    save_vertices(&g, &a.vertices)?;
    save_edges(&g, &a.edges)?;
    eprintln!("{} vertices, {} edges", g.num_vertices(), g.num_edges());
    Ok(())
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let cfg = BenchConfig {
        sizes: a.sizes,
        calls: a.calls,
        warmup: a.warmup,
        ..BenchConfig::default()
    };
    let scratch = a.workdir.is_none();
    let workdir = a
        .workdir
        .unwrap_or_else(|| std::env::temp_dir().join(format!("vcgraph-bench-{}", std::process::id())));
    std::fs::create_dir_all(&workdir).with_context(|| format!("creating {}", workdir.display()))?;
    let rows = bench_echo(&cfg, &workdir);
    if scratch {
        let _ = std::fs::remove_dir_all(&workdir);
    }
    let rows = rows?;
    let json = serde_json::to_string_pretty(&latency_json(&rows))?;
    print!("{}", latency_table(&rows));
    println!("{json}");
    if let Some(path) = a.json {
        std::fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

/// Joins the error chain, skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !prev.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
        prev = text;
    }
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Generate(a) => cmd_generate(a),
        Command::BenchIpc(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}
