//! The vertex-program contract invoked by the engines.
//!
//! A [`VertexProgram`] supplies five behaviours: vertex initialisation, the
//! empty (identity) message, message merging, the per-vertex compute step,
//! and per-edge message emission. Engines rely on the merge operation being
//! commutative and associative with the empty message as identity;
//! [`check_message_laws`] samples random messages to look for violations.

use std::fmt;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::VertexId;
use crate::record::{FieldType, Record, RecordError, Schema, Value};

#[derive(Debug, Error)]
pub enum ProgramError {
    #[error("unknown native program `{0}`")]
    UnknownProgram(String),
    #[error("invalid parameter: {0}")]
    InvalidParams(String),
    #[error("record does not match schema: {0}")]
    Schema(#[from] RecordError),
    /// The guest process reported a failure for this call.
    #[error("remote program failed: {0}")]
    Remote(String),
    /// The call could not be carried out over the transport.
    #[error("program channel failed: {0}")]
    Channel(String),
    #[error("{0}")]
    Other(String),
}

/// The three record schemas a program works with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramSchemas {
    /// Vertex records as produced by `init_vertex_attr` and `vertex_compute`.
    pub vertex: Schema,
    /// Fields of the graph's edge records that `emit_message` receives.
    pub edge: Schema,
    pub message: Schema,
}

impl ProgramSchemas {
    /// `vertex;edge;message` schema texts, as passed to guest processes.
    pub fn to_text(&self) -> String {
        format!("{};{};{}", self.vertex, self.edge, self.message)
    }

    pub fn parse(text: &str) -> Result<Self, RecordError> {
        let parts: Vec<&str> = text.split(';').collect();
        if parts.len() != 3 {
            return Err(RecordError::MalformedField(format!(
                "expected `vertex;edge;message`, got `{text}`"
            )));
        }
        Ok(ProgramSchemas {
            vertex: Schema::parse(parts[0])?,
            edge: Schema::parse(parts[1])?,
            message: Schema::parse(parts[2])?,
        })
    }
}

/// What a program learns about the graph before the first call.
#[derive(Debug, Clone, Copy)]
pub struct GraphInfo<'a> {
    pub num_vertices: usize,
    /// Schema of the vertex records passed to `init_vertex_attr`.
    pub input_vertex_schema: &'a Schema,
    /// Ascending vertex ids, when the caller has them.
    pub vertex_ids: Option<&'a [VertexId]>,
}

/// Five-method vertex program. Implementations must behave as pure functions
/// of their arguments so engines may call them from any worker thread.
pub trait VertexProgram: Send + Sync {
    fn schemas(&self) -> &ProgramSchemas;

    /// Called once per program instance before a run starts.
    fn prepare(&self, _graph: &GraphInfo<'_>) -> Result<(), ProgramError> {
        Ok(())
    }

    fn init_vertex_attr(
        &self,
        id: VertexId,
        out_degree: usize,
        prop: &Record,
    ) -> Result<Record, ProgramError>;

    fn empty_message(&self) -> Result<Record, ProgramError>;

    fn merge_message(&self, m1: &Record, m2: &Record) -> Result<Record, ProgramError>;

    /// Returns the updated vertex record and whether the vertex stays active.
    fn vertex_compute(
        &self,
        prop: &Record,
        msg: &Record,
        iter: u32,
    ) -> Result<(Record, bool), ProgramError>;

    /// Message to send along edge `(src, dst)`, or `None` to send nothing.
    fn emit_message(
        &self,
        src: VertexId,
        dst: VertexId,
        src_prop: &Record,
        edge_prop: &Record,
    ) -> Result<Option<Record>, ProgramError>;
}

impl<P: VertexProgram + ?Sized> VertexProgram for Box<P> {
    fn schemas(&self) -> &ProgramSchemas {
        (**self).schemas()
    }
    fn prepare(&self, graph: &GraphInfo<'_>) -> Result<(), ProgramError> {
        (**self).prepare(graph)
    }
    fn init_vertex_attr(&self, id: VertexId, out_degree: usize, prop: &Record) -> Result<Record, ProgramError> {
        (**self).init_vertex_attr(id, out_degree, prop)
    }
    fn empty_message(&self) -> Result<Record, ProgramError> {
        (**self).empty_message()
    }
    fn merge_message(&self, m1: &Record, m2: &Record) -> Result<Record, ProgramError> {
        (**self).merge_message(m1, m2)
    }
    fn vertex_compute(&self, prop: &Record, msg: &Record, iter: u32) -> Result<(Record, bool), ProgramError> {
        (**self).vertex_compute(prop, msg, iter)
    }
    fn emit_message(
        &self,
        src: VertexId,
        dst: VertexId,
        src_prop: &Record,
        edge_prop: &Record,
    ) -> Result<Option<Record>, ProgramError> {
        (**self).emit_message(src, dst, src_prop, edge_prop)
    }
}

// ---------------------------------------------------------------------------
// Descriptors
// ---------------------------------------------------------------------------

/// Where a program comes from: a built-in operator, or a program file served
/// by a guest process.
#[derive(Debug, Clone, PartialEq)]
pub enum ProgramDescriptor {
    Native {
        name: String,
        params: Vec<(String, String)>,
    },
    Remote(RemoteSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteSpec {
    pub program_path: PathBuf,
    pub schemas: ProgramSchemas,
    /// Guest executable followed by its leading arguments.
    pub guest_command: Vec<String>,
}

impl ProgramDescriptor {
    pub fn validate(&self) -> Result<(), ProgramError> {
        match self {
            ProgramDescriptor::Native { name, params } => native_program(name, params).map(|_| ()),
            ProgramDescriptor::Remote(spec) => {
                std::fs::File::open(&spec.program_path).map_err(|e| {
                    ProgramError::InvalidParams(format!(
                        "program file {}: {e}",
                        spec.program_path.display()
                    ))
                })?;
                if spec.guest_command.is_empty() {
                    return Err(ProgramError::InvalidParams("empty guest command".into()));
                }
                Ok(())
            }
        }
    }
}

/// Builds a built-in program by name: `pagerank`, `sssp` or `cc`.
pub fn native_program(
    name: &str,
    params: &[(String, String)],
) -> Result<Box<dyn VertexProgram>, ProgramError> {
    use crate::ops::{cc_program, pagerank_program, sssp_program, PageRankParams, SsspParams};

    let mut params = Params::new(params);
    let program: Box<dyn VertexProgram> = match name.to_ascii_lowercase().as_str() {
        "pagerank" | "pr" => {
            let defaults = PageRankParams::default();
            Box::new(pagerank_program(PageRankParams {
                damping: params.take("damping", defaults.damping)?,
                iters: params.take("iters", defaults.iters)?,
            })?)
        }
        "sssp" => {
            let defaults = SsspParams::default();
            Box::new(sssp_program(SsspParams {
                source: params.take("source", defaults.source)?,
                weight_field: params.take("weight", defaults.weight_field)?,
            })?)
        }
        "cc" => Box::new(cc_program()),
        other => return Err(ProgramError::UnknownProgram(other.to_string())),
    };
    params.finish()?;
    Ok(program)
}

struct Params<'a> {
    remaining: Vec<&'a (String, String)>,
}

impl<'a> Params<'a> {
    fn new(params: &'a [(String, String)]) -> Self {
        Params {
            remaining: params.iter().collect(),
        }
    }

    fn take<T>(&mut self, key: &str, default: T) -> Result<T, ProgramError>
    where
        T: std::str::FromStr,
    {
        let Some(pos) = self.remaining.iter().position(|(k, _)| k == key) else {
            return Ok(default);
        };
        let (_, value) = self.remaining.remove(pos);
        value
            .parse()
            .map_err(|_| ProgramError::InvalidParams(format!("{key}={value}")))
    }

    fn finish(self) -> Result<(), ProgramError> {
        match self.remaining.first() {
            Some((k, _)) => Err(ProgramError::InvalidParams(format!("unknown parameter `{k}`"))),
            None => Ok(()),
        }
    }
}

// ---------------------------------------------------------------------------
// Merge-law checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Law {
    Commutativity,
    Associativity,
    Identity,
}

impl fmt::Display for Law {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Law::Commutativity => "commutativity",
            Law::Associativity => "associativity",
            Law::Identity => "empty-message identity",
        })
    }
}

#[derive(Debug, Clone)]
pub struct LawViolation {
    pub law: Law,
    /// The sampled messages that exhibit the violation.
    pub operands: Vec<Record>,
    pub left: Record,
    pub right: Record,
}

#[derive(Debug, Clone, Default)]
pub struct LawReport {
    pub samples: usize,
    pub violations: Vec<LawViolation>,
    /// Calls that returned an error, with the law being checked.
    pub errors: Vec<(Law, String)>,
}

impl LawReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty() && self.errors.is_empty()
    }

    pub fn first(&self, law: Law) -> Option<&LawViolation> {
        self.violations.iter().find(|v| v.law == law)
    }
}

/// Relative tolerance for comparing `F64` fields. Floating-point addition is
/// not associative bit-for-bit, so sums are compared up to rounding.
pub const LAW_F64_RELATIVE_TOLERANCE: f64 = 1e-12;

/// Samples `samples` random message triples `(a, b, c)` and checks
/// `merge(a, b) = merge(b, a)`, `merge(merge(a, b), c) = merge(a, merge(b, c))`
/// and `merge(a, empty) = a`.
pub fn check_message_laws(p: &dyn VertexProgram, samples: usize, seed: u64) -> LawReport {
    let schema = &p.schemas().message;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = LawReport {
        samples,
        ..LawReport::default()
    };
    let empty = match p.empty_message() {
        Ok(e) => e,
        Err(e) => {
            report.errors.push((Law::Identity, e.to_string()));
            return report;
        }
    };

    for _ in 0..samples {
        let a = random_record(schema, &mut rng);
        let b = random_record(schema, &mut rng);
        let c = random_record(schema, &mut rng);
        let operands = [&a, &b, &c];

        let mut check = |law: Law, ops: &[&Record], left: Result<Record, ProgramError>, right: Result<Record, ProgramError>| {
            match (left, right) {
                (Ok(l), Ok(r)) => {
                    if !records_agree(&l, &r, ops) {
                        report.violations.push(LawViolation {
                            law,
                            operands: ops.iter().map(|r| (*r).clone()).collect(),
                            left: l,
                            right: r,
                        });
                    }
                }
                (Err(e), _) | (_, Err(e)) => report.errors.push((law, e.to_string())),
            }
        };

        check(
            Law::Commutativity,
            &operands[..2],
            p.merge_message(&a, &b),
            p.merge_message(&b, &a),
        );
        let left = p.merge_message(&a, &b).and_then(|ab| p.merge_message(&ab, &c));
        let right = p.merge_message(&b, &c).and_then(|bc| p.merge_message(&a, &bc));
        check(Law::Associativity, &operands, left, right);
        check(Law::Identity, &operands[..1], p.merge_message(&a, &empty), Ok(a.clone()));
    }
    report
}

fn random_record(schema: &Schema, rng: &mut ChaCha8Rng) -> Record {
    schema
        .fields()
        .iter()
        .map(|f| match f.ty {
            FieldType::I64 => Value::I64(match rng.random_range(0..10) {
                0 => i64::MAX,
                1 => i64::MIN,
                2 => 0,
                _ => rng.random_range(-1_000_000..1_000_000),
            }),
            FieldType::F64 => Value::F64(match rng.random_range(0..12) {
                0 => f64::INFINITY,
                1 => f64::NEG_INFINITY,
                2 => 0.0,
                3 => -0.0,
                _ => rng.random_range(-1e3..1e3),
            }),
            FieldType::Bool => Value::Bool(rng.random()),
            FieldType::Str => {
                let len = rng.random_range(0..6);
                Value::Str((0..len).map(|_| rng.random_range('a'..='e')).collect())
            }
        })
        .collect()
}

/// Field-wise comparison: exact for non-float fields; floats must be equal,
/// both NaN, or within the relative tolerance scaled by the operands.
fn records_agree(l: &Record, r: &Record, operands: &[&Record]) -> bool {
    if l.len() != r.len() {
        return false;
    }
    l.values().iter().zip(r.values()).enumerate().all(|(i, pair)| match pair {
        (Value::F64(x), Value::F64(y)) => {
            if x == y || (x.is_nan() && y.is_nan()) {
                return true;
            }
            let scale = operands
                .iter()
                .filter_map(|rec| rec.get(i).and_then(Value::as_f64))
                .filter(|v| v.is_finite())
                .fold(1.0f64, |acc, v| acc.max(v.abs()));
            (x - y).abs() <= LAW_F64_RELATIVE_TOLERANCE * scale
        }
        (a, b) => a == b,
    })
}
