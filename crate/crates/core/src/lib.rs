//! Vertex-centric graph processing: typed records, property graphs, the
//! vertex program interface and bulk-synchronous engines.

pub mod engine;
pub mod graph;
pub mod ops;
pub mod program;
pub mod record;

pub use engine::{run, run_with_programs, EngineConfig, EngineError, EngineKind, Execution, RunReport};
pub use graph::{load_graph, PropertyGraph, VertexId};
pub use program::{native_program, ProgramError, ProgramSchemas, VertexProgram};
pub use record::{FieldType, Record, Schema, Value};
