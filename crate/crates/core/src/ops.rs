//! Built-in vertex programs: PageRank, single-source shortest paths
//! (Bellman-Ford style relaxation) and connected components (min-label
//! propagation).

use std::sync::atomic::{AtomicUsize, Ordering};

use crate::graph::VertexId;
use crate::program::{GraphInfo, ProgramError, ProgramSchemas, VertexProgram};
use crate::record::{FieldType, Record, Schema, Value};

fn f64_field(rec: &Record, index: usize) -> Result<f64, ProgramError> {
    rec.get(index)
        .and_then(Value::as_f64)
        .ok_or_else(|| ProgramError::Other(format!("expected f64 at field {index} of {rec:?}")))
}

fn i64_field(rec: &Record, index: usize) -> Result<i64, ProgramError> {
    rec.get(index)
        .and_then(Value::as_i64)
        .ok_or_else(|| ProgramError::Other(format!("expected i64 at field {index} of {rec:?}")))
}

fn single(value: Value) -> Record {
    Record::new([value])
}

// ---------------------------------------------------------------------------
// PageRank
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PageRankParams {
    pub damping: f64,
    /// Number of rank updates.
    pub iters: u32,
}

impl Default for PageRankParams {
    fn default() -> Self {
        PageRankParams {
            damping: 0.85,
            iters: 10,
        }
    }
}

/// Fixed-iteration PageRank.
///
/// Superstep 1 only distributes the initial rank `1/|V|`; supersteps
/// `2..=iters + 1` each apply `rank = (1 - d)/|V| + d * sum(in-contributions)`.
/// A vertex with no out-edges sends nothing, so its mass is dropped.
/// The run therefore takes `iters + 1` supersteps.
#[derive(Debug)]
pub struct PageRank {
    params: PageRankParams,
    schemas: ProgramSchemas,
    num_vertices: AtomicUsize,
}

pub fn pagerank_program(params: PageRankParams) -> Result<PageRank, ProgramError> {
    if !(params.damping > 0.0 && params.damping < 1.0) {
        return Err(ProgramError::InvalidParams(format!(
            "damping must be in (0, 1), got {}",
            params.damping
        )));
    }
    let message = Schema::new([("rank", FieldType::F64)]).expect("valid schema");
    Ok(PageRank {
        params,
        schemas: ProgramSchemas {
            vertex: Schema::new([("rank", FieldType::F64), ("outdeg", FieldType::F64)])
                .expect("valid schema"),
            edge: Schema::empty(),
            message,
        },
        num_vertices: AtomicUsize::new(0),
    })
}

impl PageRank {
    pub fn params(&self) -> PageRankParams {
        self.params
    }

    fn n(&self) -> Result<f64, ProgramError> {
        match self.num_vertices.load(Ordering::Relaxed) {
            0 => Err(ProgramError::Other("pagerank used before prepare".into())),
            n => Ok(n as f64),
        }
    }
}

impl VertexProgram for PageRank {
    fn schemas(&self) -> &ProgramSchemas {
        &self.schemas
    }

    fn prepare(&self, graph: &GraphInfo<'_>) -> Result<(), ProgramError> {
        self.num_vertices.store(graph.num_vertices, Ordering::Relaxed);
        Ok(())
    }

    fn init_vertex_attr(&self, _id: VertexId, out_degree: usize, _prop: &Record) -> Result<Record, ProgramError> {
        Ok(Record::new([
            Value::F64(1.0 / self.n()?),
            Value::F64(out_degree as f64),
        ]))
    }

    fn empty_message(&self) -> Result<Record, ProgramError> {
        Ok(single(Value::F64(0.0)))
    }

    fn merge_message(&self, m1: &Record, m2: &Record) -> Result<Record, ProgramError> {
        Ok(single(Value::F64(f64_field(m1, 0)? + f64_field(m2, 0)?)))
    }

    fn vertex_compute(&self, prop: &Record, msg: &Record, iter: u32) -> Result<(Record, bool), ProgramError> {
        let active = iter <= self.params.iters;
        if iter <= 1 {
            return Ok((prop.clone(), active));
        }
        let d = self.params.damping;
        let rank = (1.0 - d) / self.n()? + d * f64_field(msg, 0)?;
        Ok((
            Record::new([Value::F64(rank), Value::F64(f64_field(prop, 1)?)]),
            active,
        ))
    }

    fn emit_message(&self, _src: VertexId, _dst: VertexId, src_prop: &Record, _edge: &Record) -> Result<Option<Record>, ProgramError> {
        let rank = f64_field(src_prop, 0)?;
        let outdeg = f64_field(src_prop, 1)?;
        Ok(Some(single(Value::F64(rank / outdeg))))
    }
}

// ---------------------------------------------------------------------------
// SSSP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SsspParams {
    pub source: VertexId,
    /// Name of the `f64` edge field holding the edge length.
    pub weight_field: String,
}

impl Default for SsspParams {
    fn default() -> Self {
        SsspParams {
            source: 0,
            weight_field: "weight".to_string(),
        }
    }
}

/// Shortest distances from `source`. Unreachable vertices keep `+inf`.
#[derive(Debug)]
pub struct Sssp {
    params: SsspParams,
    schemas: ProgramSchemas,
}

pub fn sssp_program(params: SsspParams) -> Result<Sssp, ProgramError> {
    let edge = Schema::new([(params.weight_field.clone(), FieldType::F64)])
        .map_err(|e| ProgramError::InvalidParams(format!("weight field: {e}")))?;
    let dist = Schema::new([("dist", FieldType::F64)]).expect("valid schema");
    Ok(Sssp {
        params,
        schemas: ProgramSchemas {
            vertex: dist.clone(),
            edge,
            message: dist,
        },
    })
}

impl VertexProgram for Sssp {
    fn schemas(&self) -> &ProgramSchemas {
        &self.schemas
    }

    fn prepare(&self, graph: &GraphInfo<'_>) -> Result<(), ProgramError> {
        if let Some(ids) = graph.vertex_ids {
            if ids.binary_search(&self.params.source).is_err() {
                return Err(ProgramError::InvalidParams(format!(
                    "source vertex {} is not in the graph",
                    self.params.source
                )));
            }
        }
        Ok(())
    }

    fn init_vertex_attr(&self, id: VertexId, _out_degree: usize, _prop: &Record) -> Result<Record, ProgramError> {
        let dist = if id == self.params.source { 0.0 } else { f64::INFINITY };
        Ok(single(Value::F64(dist)))
    }

    fn empty_message(&self) -> Result<Record, ProgramError> {
        Ok(single(Value::F64(f64::INFINITY)))
    }

    fn merge_message(&self, m1: &Record, m2: &Record) -> Result<Record, ProgramError> {
        Ok(single(Value::F64(f64_field(m1, 0)?.min(f64_field(m2, 0)?))))
    }

    fn vertex_compute(&self, prop: &Record, msg: &Record, iter: u32) -> Result<(Record, bool), ProgramError> {
        let old = f64_field(prop, 0)?;
        let new = old.min(f64_field(msg, 0)?);
        // Before any message arrives only the source has a finite distance.
        let active = new < old || (iter == 1 && new.is_finite());
        Ok((single(Value::F64(new)), active))
    }

    fn emit_message(&self, _src: VertexId, _dst: VertexId, src_prop: &Record, edge: &Record) -> Result<Option<Record>, ProgramError> {
        let dist = f64_field(src_prop, 0)?;
        if !dist.is_finite() {
            return Ok(None);
        }
        Ok(Some(single(Value::F64(dist + f64_field(edge, 0)?))))
    }
}

// ---------------------------------------------------------------------------
// Connected components
// ---------------------------------------------------------------------------

/// Labels every vertex with the smallest id that can reach it. On a
/// symmetrised graph this is the smallest id in its connected component.
#[derive(Debug)]
pub struct ConnectedComponents {
    schemas: ProgramSchemas,
}

pub fn cc_program() -> ConnectedComponents {
    let label = Schema::new([("label", FieldType::I64)]).expect("valid schema");
    ConnectedComponents {
        schemas: ProgramSchemas {
            vertex: label.clone(),
            edge: Schema::empty(),
            message: label,
        },
    }
}

impl VertexProgram for ConnectedComponents {
    fn schemas(&self) -> &ProgramSchemas {
        &self.schemas
    }

    fn init_vertex_attr(&self, id: VertexId, _out_degree: usize, _prop: &Record) -> Result<Record, ProgramError> {
        Ok(single(Value::I64(id)))
    }

    fn empty_message(&self) -> Result<Record, ProgramError> {
        Ok(single(Value::I64(i64::MAX)))
    }

    fn merge_message(&self, m1: &Record, m2: &Record) -> Result<Record, ProgramError> {
        Ok(single(Value::I64(i64_field(m1, 0)?.min(i64_field(m2, 0)?))))
    }

    fn vertex_compute(&self, prop: &Record, msg: &Record, iter: u32) -> Result<(Record, bool), ProgramError> {
        let old = i64_field(prop, 0)?;
        let new = old.min(i64_field(msg, 0)?);
        Ok((single(Value::I64(new)), new < old || iter == 1))
    }

    fn emit_message(&self, _src: VertexId, _dst: VertexId, src_prop: &Record, _edge: &Record) -> Result<Option<Record>, ProgramError> {
        Ok(Some(single(Value::I64(i64_field(src_prop, 0)?))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::program::check_message_laws;

    fn f(v: f64) -> Record {
        single(Value::F64(v))
    }

    fn info(n: usize, ids: &[VertexId]) -> GraphInfo<'_> {
        static EMPTY: std::sync::OnceLock<Schema> = std::sync::OnceLock::new();
        GraphInfo {
            num_vertices: n,
            input_vertex_schema: EMPTY.get_or_init(Schema::empty),
            vertex_ids: Some(ids),
        }
    }

    #[test]
    fn all_native_programs_are_lawful() {
        let pr = pagerank_program(PageRankParams::default()).unwrap();
        let sssp = sssp_program(SsspParams::default()).unwrap();
        let cc = cc_program();
        for (name, p) in [
            ("pagerank", &pr as &dyn VertexProgram),
            ("sssp", &sssp),
            ("cc", &cc),
        ] {
            let report = check_message_laws(p, 1000, 11);
            assert!(report.is_clean(), "{name}: {:?}", report.violations.first());
        }
    }

    #[test]
    fn sssp_behaviour() {
        let p = sssp_program(SsspParams::default()).unwrap();
        assert_eq!(p.init_vertex_attr(0, 2, &Record::empty()).unwrap(), f(0.0));
        assert_eq!(p.init_vertex_attr(5, 2, &Record::empty()).unwrap(), f(f64::INFINITY));
        // Source at iteration 1 stays active; others deactivate.
        assert_eq!(p.vertex_compute(&f(0.0), &f(f64::INFINITY), 1).unwrap(), (f(0.0), true));
        assert_eq!(
            p.vertex_compute(&f(f64::INFINITY), &f(f64::INFINITY), 1).unwrap(),
            (f(f64::INFINITY), false)
        );
        assert_eq!(p.vertex_compute(&f(5.0), &f(3.0), 4).unwrap(), (f(3.0), true));
        assert_eq!(p.vertex_compute(&f(3.0), &f(5.0), 4).unwrap(), (f(3.0), false));
        assert_eq!(p.emit_message(0, 1, &f(2.0), &f(1.5)).unwrap(), Some(f(3.5)));
        assert_eq!(p.emit_message(0, 1, &f(f64::INFINITY), &f(1.0)).unwrap(), None);
        assert!(p.prepare(&info(3, &[0, 1, 2])).is_ok());
        assert!(p.prepare(&info(2, &[1, 2])).is_err());
    }

    #[test]
    fn custom_weight_field() {
        let p = sssp_program(SsspParams {
            source: 1,
            weight_field: "len".into(),
        })
        .unwrap();
        assert_eq!(p.schemas().edge.to_string(), "len:f64");
        assert!(sssp_program(SsspParams {
            source: 0,
            weight_field: String::new()
        })
        .is_err());
    }

    #[test]
    fn pagerank_behaviour() {
        let p = pagerank_program(PageRankParams { damping: 0.85, iters: 3 }).unwrap();
        assert!(p.init_vertex_attr(0, 1, &Record::empty()).is_err());
        p.prepare(&info(4, &[0, 1, 2, 3])).unwrap();
        let init = p.init_vertex_attr(0, 2, &Record::empty()).unwrap();
        assert_eq!(init, Record::new([Value::F64(0.25), Value::F64(2.0)]));
        // First superstep keeps the initial rank.
        assert_eq!(p.vertex_compute(&init, &f(0.0), 1).unwrap(), (init.clone(), true));
        let (next, active) = p.vertex_compute(&init, &f(0.5), 2).unwrap();
        assert_eq!(next.get(0).and_then(Value::as_f64), Some((1.0 - 0.85) / 4.0 + 0.85 * 0.5));
        assert!(active);
        assert!(!p.vertex_compute(&init, &f(0.5), 4).unwrap().1);
        assert_eq!(p.emit_message(0, 1, &init, &Record::empty()).unwrap(), Some(f(0.125)));
        for bad in [0.0, 1.0, -0.1, f64::NAN] {
            assert!(pagerank_program(PageRankParams { damping: bad, iters: 1 }).is_err());
        }
    }

    #[test]
    fn cc_behaviour() {
        let p = cc_program();
        let l = |v| single(Value::I64(v));
        assert_eq!(p.init_vertex_attr(7, 0, &Record::empty()).unwrap(), l(7));
        assert_eq!(p.vertex_compute(&l(7), &l(i64::MAX), 1).unwrap(), (l(7), true));
        assert_eq!(p.vertex_compute(&l(7), &l(i64::MAX), 2).unwrap(), (l(7), false));
        assert_eq!(p.vertex_compute(&l(7), &l(3), 2).unwrap(), (l(3), true));
        assert_eq!(p.emit_message(7, 3, &l(3), &Record::empty()).unwrap(), Some(l(3)));
    }
}
