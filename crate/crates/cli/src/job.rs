//! A `run` job: load, build the program (native or guest-served), execute,
//! save the vertex table and write the report.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use vcgraph_core::engine::{run_with_programs, EngineConfig, EngineKind, RunReport};
use vcgraph_core::graph::{load_graph, save_vertices};
use vcgraph_core::program::{native_program, ProgramSchemas, RemoteSpec, VertexProgram};
use vcgraph_ipc::GuestPool;

use crate::report::{write_run_report, RunMeta};

#[derive(Debug, Clone, PartialEq)]
pub enum ProgramSource {
    Native {
        name: String,
        params: Vec<(String, String)>,
    },
    /// A program file served by one guest process per worker.
    File {
        path: PathBuf,
        schemas: ProgramSchemas,
        guest: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobConfig {
    pub engine: EngineKind,
    pub workers: usize,
    pub max_iter: u32,
    pub program: ProgramSource,
    pub vertices: PathBuf,
    pub edges: PathBuf,
    pub output: PathBuf,
    pub report: PathBuf,
    pub ipc_workdir: Option<PathBuf>,
}

fn readable(path: &Path, what: &str) -> Result<()> {
    File::open(path).with_context(|| format!("{what} {}", path.display()))?;
    Ok(())
}

impl JobConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            bail!("--workers must be at least 1");
        }
        if self.max_iter == 0 {
            bail!("--max-iter must be at least 1");
        }
        readable(&self.vertices, "vertex file")?;
        readable(&self.edges, "edge file")?;
        match &self.program {
            ProgramSource::Native { name, params } => {
                native_program(name, params)?;
            }
            ProgramSource::File { path, guest, .. } => {
                readable(path, "program file")?;
                if guest.is_empty() {
                    bail!("empty guest command");
                }
            }
        }
        Ok(())
    }

    fn program_label(&self) -> String {
        match &self.program {
            ProgramSource::Native { name, .. } => name.clone(),
            ProgramSource::File { path, .. } => path.display().to_string(),
        }
    }
}

/// Default guest: the `vcgraph-guest` binary installed next to this one.
pub fn default_guest_command() -> Vec<String> {
    let exe = std::env::current_exe()
        .ok()
        .and_then(|p| p.parent().map(|d| d.join("vcgraph-guest")))
        .unwrap_or_else(|| PathBuf::from("vcgraph-guest"));
    vec![exe.display().to_string()]
}

pub fn run_job(cfg: &JobConfig) -> Result<RunReport> {
    cfg.validate()?;
    let graph = load_graph(&cfg.vertices, &cfg.edges).context("loading graph")?;
    let engine_cfg = EngineConfig {
        kind: cfg.engine,
        num_workers: cfg.workers,
        max_iter: cfg.max_iter,
    };

    let (out, report) = match &cfg.program {
        ProgramSource::Native { name, params } => {
            let program = native_program(name, params)?;
            let programs: Vec<&dyn VertexProgram> = vec![program.as_ref(); cfg.workers];
            run_with_programs(&graph, programs, engine_cfg)?
        }
        ProgramSource::File { path, schemas, guest } => {
            let spec = RemoteSpec {
                program_path: path.clone(),
                schemas: schemas.clone(),
                guest_command: guest.clone(),
            };
            let (workdir, scratch) = match &cfg.ipc_workdir {
                Some(d) => (d.clone(), false),
                None => (std::env::temp_dir().join(format!("vcgraph-ipc-{}", std::process::id())), true),
            };
            let cleanup = || {
                if scratch {
                    let _ = std::fs::remove_dir(&workdir);
                }
            };
            let pool = match GuestPool::launch(&spec, cfg.workers, &workdir) {
                Ok(p) => p,
                Err(e) => {
                    cleanup();
                    return Err(anyhow::Error::from(e).context("starting guest processes"));
                }
            };
            let result = run_with_programs(&graph, pool.programs(), engine_cfg);
            let stderr: Vec<String> = pool.stderr().into_iter().filter(|s| !s.trim().is_empty()).collect();
            let teardown = pool.shutdown();
            cleanup();
            let result = match result {
                Ok(r) => r,
                Err(e) => {
                    let text = e.to_string();
                    let unseen: Vec<&str> = stderr.iter().map(|s| s.trim()).filter(|s| !text.contains(s)).collect();
                    if unseen.is_empty() {
                        return Err(e.into());
                    }
                    return Err(anyhow::Error::from(e).context(format!("guest stderr:\n{}", unseen.join("\n"))));
                }
            };
            teardown.context("stopping guest processes")?;
            result
        }
    };

    save_vertices(&out, &cfg.output).context("saving vertex table")?;
    let file = File::create(&cfg.report).with_context(|| format!("creating {}", cfg.report.display()))?;
    let mut w = BufWriter::new(file);
    let label = cfg.program_label();
    write_run_report(
        &mut w,
        &report,
        &RunMeta {
            program: &label,
            num_vertices: graph.num_vertices(),
            num_edges: graph.num_edges(),
        },
    )
    .and_then(|_| std::io::Write::flush(&mut w))
    .context("writing report")?;
    Ok(report)
}
