//! Machine-readable run and benchmark reports.

use std::io::Write;

use serde::Serialize;
use vcgraph_core::engine::RunReport;
use vcgraph_ipc::bench::LatencySummary;

#[derive(Debug, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReportLine<'a> {
    Iteration {
        iter: u32,
        active: usize,
        participants: usize,
        messages: usize,
    },
    Summary {
        engine: &'a str,
        workers: usize,
        program: &'a str,
        num_vertices: usize,
        num_edges: usize,
        iterations: u32,
        converged_early: bool,
        active_counts: Vec<usize>,
        wall_time_ms: f64,
    },
}

pub struct RunMeta<'a> {
    pub program: &'a str,
    pub num_vertices: usize,
    pub num_edges: usize,
}

/// One JSON object per superstep, then a summary object.
pub fn write_run_report(out: &mut impl Write, report: &RunReport, meta: &RunMeta<'_>) -> std::io::Result<()> {
    for s in &report.iterations {
        let line = ReportLine::Iteration {
            iter: s.iter,
            active: s.active,
            participants: s.participants,
            messages: s.messages,
        };
        serde_json::to_writer(&mut *out, &line)?;
        out.write_all(b"\n")?;
    }
    let summary = ReportLine::Summary {
        engine: report.kind.as_str(),
        workers: report.num_workers,
        program: meta.program,
        num_vertices: meta.num_vertices,
        num_edges: meta.num_edges,
        iterations: report.iterations_executed,
        converged_early: report.converged_early,
        active_counts: report.active_counts(),
        wall_time_ms: report.wall_time.as_secs_f64() * 1e3,
    };
    serde_json::to_writer(&mut *out, &summary)?;
    out.write_all(b"\n")
}

#[derive(Debug, Serialize)]
pub struct LatencyRow {
    pub transport: String,
    pub payload_bytes: usize,
    pub calls: usize,
    pub mean_ns: f64,
    pub median_ns: u64,
    pub p99_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
}

impl From<&LatencySummary> for LatencyRow {
    fn from(s: &LatencySummary) -> Self {
        LatencyRow {
            transport: s.transport.to_string(),
            payload_bytes: s.payload_bytes,
            calls: s.calls,
            mean_ns: s.mean_ns,
            median_ns: s.median_ns,
            p99_ns: s.p99_ns,
            min_ns: s.min_ns,
            max_ns: s.max_ns,
        }
    }
}

pub fn latency_json(rows: &[LatencySummary]) -> serde_json::Value {
    let rows: Vec<LatencyRow> = rows.iter().map(LatencyRow::from).collect();
    serde_json::json!({ "results": rows })
}

pub fn latency_table(rows: &[LatencySummary]) -> String {
    let mut s = format!(
        "{:<9} {:>10} {:>9} {:>12} {:>12} {:>12}\n",
        "transport", "bytes", "calls", "mean_ns", "median_ns", "p99_ns"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<9} {:>10} {:>9} {:>12.1} {:>12} {:>12}\n",
            r.transport.to_string(),
            r.payload_bytes,
            r.calls,
            r.mean_ns,
            r.median_ns,
            r.p99_ns
        ));
    }
    s
}
