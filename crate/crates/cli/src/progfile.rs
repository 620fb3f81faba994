//! Program files served by `vcgraph-guest`: `key = value` lines naming a
//! built-in operator and its parameters.
//!
//! ```text
//! # shortest paths from vertex 0
//! program = sssp
//! source = 0
//! weight = weight
//! ```

use std::path::Path;

use anyhow::{bail, Context, Result};
use vcgraph_core::program::{native_program, VertexProgram};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramFile {
    pub program: String,
    pub params: Vec<(String, String)>,
}

impl ProgramFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut program = None;
        let mut params = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .with_context(|| format!("line {}: expected `key = value`", n + 1))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "program" {
                if program.replace(v.to_string()).is_some() {
                    bail!("line {}: `program` given twice", n + 1);
                }
            } else {
                params.push((k.to_string(), v.to_string()));
            }
        }
        let program = program.context("no `program = <name>` line")?;
        Ok(ProgramFile { program, params })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("program file {}", path.display()))
    }

    pub fn instantiate(&self) -> Result<Box<dyn VertexProgram>> {
        Ok(native_program(&self.program, &self.params)?)
    }
}
