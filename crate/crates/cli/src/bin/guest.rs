//! Serves a program file over one shared-memory channel.
//!
//! Usage: `vcgraph-guest --program <file> --channel <file> --schemas <vertex;edge;message>`.
//! Exits 0 after SHUTDOWN, nonzero on any error (details on stderr).

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use vcgraph::progfile::ProgramFile;
use vcgraph_core::program::ProgramSchemas;
use vcgraph_ipc::{program_dispatcher, ShmChannel};

#[derive(Parser)]
#[command(name = "vcgraph-guest", version)]
struct Args {
    #[arg(long)]
    program: PathBuf,
    #[arg(long)]
    channel: PathBuf,
    #[arg(long)]
    schemas: String,
}

fn serve(args: Args) -> Result<()> {
    let expected = ProgramSchemas::parse(&args.schemas).with_context(|| format!("--schemas `{}`", args.schemas))?;
    let program = ProgramFile::read(&args.program)?.instantiate()?;
    if program.schemas() != &expected {
        bail!(
            "program declares `{}`, launched with `{}`",
            program.schemas().to_text(),
            expected.to_text()
        );
    }
    let mut channel = ShmChannel::open(&args.channel)?;
    // Stop serving if the host goes away without sending SHUTDOWN.
    let parent = std::os::unix::process::parent_id();
    channel.serve_until(program_dispatcher(program.as_ref()), || {
        std::os::unix::process::parent_id() == parent
    })?;
    if std::os::unix::process::parent_id() != parent {
        bail!("host exited without SHUTDOWN");
    }
    Ok(())
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match serve(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("vcgraph-guest: {e:#}");
            ExitCode::from(2)
        }
    }
}
