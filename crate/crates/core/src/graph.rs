//! Property-graph storage, the tab-separated graph file format, modulo
//! partitioning and the log-normal graph generator.
//!
//! Vertices are kept sorted by id and addressed internally by their dense
//! position in that order. Out-edges live in CSR form, grouped by source in
//! ascending id order and, within a source, in input order.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::record::{format_value, parse_value, FieldType, Record, RecordError, Schema, Value};

pub type VertexId = i64;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: malformed header: {reason}")]
    Header {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("{path}:{line}: {source}")]
    Row {
        path: PathBuf,
        line: usize,
        #[source]
        source: RecordError,
    },
    #[error("{path}:{line}: expected {expected} columns, found {found}")]
    Columns {
        path: PathBuf,
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("vertex id {0} is negative")]
    NegativeId(VertexId),
    #[error("duplicate vertex id {0}")]
    DuplicateVertex(VertexId),
    #[error("edge ({src}, {dst}) references missing vertex {missing}")]
    DanglingEndpoint {
        src: VertexId,
        dst: VertexId,
        missing: VertexId,
    },
    #[error("vertex {id}: {source}")]
    VertexRecord {
        id: VertexId,
        #[source]
        source: RecordError,
    },
    #[error("edge ({src}, {dst}): {source}")]
    EdgeRecord {
        src: VertexId,
        dst: VertexId,
        #[source]
        source: RecordError,
    },
    #[error("number of workers must be at least 1")]
    ZeroWorkers,
    #[error("invalid generator parameters: {0}")]
    InvalidParams(String),
    #[error("too many vertices for 32-bit dense indexing")]
    TooLarge,
}

/// Immutable topology shared between a graph and the graphs derived from it
/// by running programs.
#[derive(Debug)]
pub struct Topology {
    ids: Vec<VertexId>,
    index: HashMap<VertexId, u32>,
    out_offsets: Vec<usize>,
    out_targets: Vec<u32>,
    edge_records: Vec<Record>,
    edge_schema: Schema,
    directed: bool,
}

impl Topology {
    pub fn num_vertices(&self) -> usize {
        self.ids.len()
    }

    pub fn num_edges(&self) -> usize {
        self.out_targets.len()
    }

    /// Vertex ids in ascending order; position in this slice is the dense index.
    pub fn ids(&self) -> &[VertexId] {
        &self.ids
    }

    pub fn dense(&self, id: VertexId) -> Option<u32> {
        self.index.get(&id).copied()
    }

    /// Edge-index range of the out-edges of dense vertex `v`.
    pub fn out_range(&self, v: u32) -> std::ops::Range<usize> {
        self.out_offsets[v as usize]..self.out_offsets[v as usize + 1]
    }

    pub fn out_degree(&self, v: u32) -> usize {
        let r = self.out_range(v);
        r.end - r.start
    }

    pub fn target(&self, edge: usize) -> u32 {
        self.out_targets[edge]
    }

    pub fn edge_record(&self, edge: usize) -> &Record {
        &self.edge_records[edge]
    }

    pub fn edge_records(&self) -> &[Record] {
        &self.edge_records
    }

    pub fn edge_schema(&self) -> &Schema {
        &self.edge_schema
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    /// Reverse adjacency: for each dense vertex, its in-edges as
    /// `(source dense index, edge index)`, ordered by edge index.
    pub fn in_edges(&self) -> InEdges {
        let n = self.num_vertices();
        let mut offsets = vec![0usize; n + 1];
        for &t in &self.out_targets {
            offsets[t as usize + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut sources = vec![0u32; self.num_edges()];
        let mut edges = vec![0usize; self.num_edges()];
        for src in 0..n as u32 {
            for e in self.out_range(src) {
                let t = self.out_targets[e] as usize;
                sources[cursor[t]] = src;
                edges[cursor[t]] = e;
                cursor[t] += 1;
            }
        }
        InEdges {
            offsets,
            sources,
            edges,
        }
    }
}

/// CSR reverse index produced by [`Topology::in_edges`].
#[derive(Debug, Clone)]
pub struct InEdges {
    offsets: Vec<usize>,
    sources: Vec<u32>,
    edges: Vec<usize>,
}

impl InEdges {
    pub fn range(&self, v: u32) -> std::ops::Range<usize> {
        self.offsets[v as usize]..self.offsets[v as usize + 1]
    }

    pub fn source(&self, slot: usize) -> u32 {
        self.sources[slot]
    }

    pub fn edge(&self, slot: usize) -> usize {
        self.edges[slot]
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Directed property graph with per-vertex and per-edge records.
#[derive(Debug, Clone)]
pub struct PropertyGraph {
    vertex_schema: Schema,
    vertex_records: Vec<Record>,
    topology: Arc<Topology>,
}

impl PropertyGraph {
    /// Builds a graph from vertex rows and edge rows. Undirected input edges
    /// `{u, v}` are stored as both `(u, v)` and `(v, u)`; an undirected
    /// self-loop is stored once.
    pub fn new(
        vertex_schema: Schema,
        edge_schema: Schema,
        directed: bool,
        vertices: Vec<(VertexId, Record)>,
        edges: Vec<(VertexId, VertexId, Record)>,
    ) -> Result<Self, GraphError> {
        let mut vertices = vertices;
        for (id, rec) in &vertices {
            if *id < 0 {
                return Err(GraphError::NegativeId(*id));
            }
            vertex_schema
                .check(rec)
                .map_err(|source| GraphError::VertexRecord { id: *id, source })?;
        }
        vertices.sort_by_key(|(id, _)| *id);
        if let Some(w) = vertices.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(GraphError::DuplicateVertex(w[0].0));
        }
        if vertices.len() > u32::MAX as usize {
            return Err(GraphError::TooLarge);
        }
        let (ids, vertex_records): (Vec<_>, Vec<_>) = vertices.into_iter().unzip();
        let index: HashMap<VertexId, u32> =
            ids.iter().enumerate().map(|(i, &id)| (id, i as u32)).collect();

        let mut stored: Vec<(u32, u32, Record)> =
            Vec::with_capacity(if directed { edges.len() } else { edges.len() * 2 });
        for (src, dst, rec) in edges {
            edge_schema
                .check(&rec)
                .map_err(|source| GraphError::EdgeRecord { src, dst, source })?;
            let lookup = |id: VertexId| {
                index.get(&id).copied().ok_or(GraphError::DanglingEndpoint {
                    src,
                    dst,
                    missing: id,
                })
            };
            let (s, d) = (lookup(src)?, lookup(dst)?);
            if !directed && s != d {
                stored.push((d, s, rec.clone()));
            }
            stored.push((s, d, rec));
        }
        // Counting sort by source keeps input order within each source.
        let n = ids.len();
        let mut out_offsets = vec![0usize; n + 1];
        for (s, _, _) in &stored {
            out_offsets[*s as usize + 1] += 1;
        }
        for i in 0..n {
            out_offsets[i + 1] += out_offsets[i];
        }
        let mut cursor = out_offsets.clone();
        let mut slots: Vec<Option<(u32, Record)>> = (0..stored.len()).map(|_| None).collect();
        for (s, d, rec) in stored {
            slots[cursor[s as usize]] = Some((d, rec));
            cursor[s as usize] += 1;
        }
        let (out_targets, edge_records) = slots
            .into_iter()
            .map(|slot| slot.expect("every slot filled"))
            .unzip();

        Ok(PropertyGraph {
            vertex_schema,
            vertex_records,
            topology: Arc::new(Topology {
                ids,
                index,
                out_offsets,
                out_targets,
                edge_records,
                edge_schema,
                directed,
            }),
        })
    }

    /// A graph sharing `self`'s topology and edge records, with a new vertex
    /// table. `records` is indexed densely (ascending id order).
    pub fn with_vertex_records(
        &self,
        vertex_schema: Schema,
        records: Vec<Record>,
    ) -> Result<Self, GraphError> {
        assert_eq!(records.len(), self.num_vertices(), "one record per vertex");
        for (id, rec) in self.topology.ids.iter().zip(&records) {
            vertex_schema
                .check(rec)
                .map_err(|source| GraphError::VertexRecord { id: *id, source })?;
        }
        Ok(PropertyGraph {
            vertex_schema,
            vertex_records: records,
            topology: Arc::clone(&self.topology),
        })
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }

    pub fn vertex_schema(&self) -> &Schema {
        &self.vertex_schema
    }

    pub fn edge_schema(&self) -> &Schema {
        &self.topology.edge_schema
    }

    pub fn is_directed(&self) -> bool {
        self.topology.directed
    }

    pub fn num_vertices(&self) -> usize {
        self.topology.num_vertices()
    }

    pub fn num_edges(&self) -> usize {
        self.topology.num_edges()
    }

    pub fn vertex_ids(&self) -> &[VertexId] {
        &self.topology.ids
    }

    pub fn contains(&self, id: VertexId) -> bool {
        self.topology.index.contains_key(&id)
    }

    pub fn vertex(&self, id: VertexId) -> Option<&Record> {
        self.topology
            .dense(id)
            .map(|v| &self.vertex_records[v as usize])
    }

    /// Vertex records in ascending id order.
    pub fn vertex_records(&self) -> &[Record] {
        &self.vertex_records
    }

    pub fn vertices(&self) -> impl Iterator<Item = (VertexId, &Record)> {
        self.topology.ids.iter().copied().zip(&self.vertex_records)
    }

    pub fn out_edges(&self, id: VertexId) -> impl Iterator<Item = (VertexId, &Record)> {
        let t = &self.topology;
        let range = t.dense(id).map(|v| t.out_range(v)).unwrap_or(0..0);
        range.map(move |e| (t.ids[t.out_targets[e] as usize], &t.edge_records[e]))
    }

    /// All stored edges as `(src, dst, record)` in CSR order.
    pub fn edges(&self) -> impl Iterator<Item = (VertexId, VertexId, &Record)> {
        let t = &self.topology;
        (0..t.num_vertices() as u32).flat_map(move |v| {
            t.out_range(v)
                .map(move |e| (t.ids[v as usize], t.ids[t.out_targets[e] as usize], &t.edge_records[e]))
        })
    }

    pub fn out_degree(&self, id: VertexId) -> Option<usize> {
        self.topology.dense(id).map(|v| self.topology.out_degree(v))
    }

    pub fn out_degrees(&self) -> BTreeMap<VertexId, usize> {
        let t = &self.topology;
        (0..t.num_vertices() as u32)
            .map(|v| (t.ids[v as usize], t.out_degree(v)))
            .collect()
    }
}

pub fn out_degrees(g: &PropertyGraph) -> BTreeMap<VertexId, usize> {
    g.out_degrees()
}

/// Modulo assignment of vertices to workers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partitioning {
    num_workers: usize,
}

impl Partitioning {
    pub fn new(num_workers: usize) -> Result<Self, GraphError> {
        if num_workers == 0 {
            return Err(GraphError::ZeroWorkers);
        }
        Ok(Partitioning { num_workers })
    }

    pub fn num_workers(&self) -> usize {
        self.num_workers
    }

    /// Owner of a non-negative vertex id.
    pub fn owner(&self, id: VertexId) -> usize {
        (id.rem_euclid(self.num_workers as i64)) as usize
    }

    /// Vertices of `g` owned by `worker`, ascending.
    pub fn members(&self, g: &PropertyGraph, worker: usize) -> Vec<VertexId> {
        g.vertex_ids()
            .iter()
            .copied()
            .filter(|&id| self.owner(id) == worker)
            .collect()
    }
}

pub fn partition(_g: &PropertyGraph, num_workers: usize) -> Result<Partitioning, GraphError> {
    Partitioning::new(num_workers)
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

const VERTEX_TAG: &str = "#vertex";
const EDGE_TAG: &str = "#edge";

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> GraphError + '_ {
    move |source| GraphError::Io {
        path: path.to_path_buf(),
        source,
    }
}

struct Rows {
    path: PathBuf,
    lines: std::iter::Enumerate<io::Lines<BufReader<File>>>,
}

impl Rows {
    fn open(path: &Path) -> Result<(Rows, String), GraphError> {
        let file = File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let header = match lines.next() {
            Some((_, line)) => line.map_err(io_err(path))?,
            None => {
                return Err(GraphError::Header {
                    path: path.to_path_buf(),
                    line: 1,
                    reason: "empty file".into(),
                })
            }
        };
        Ok((
            Rows {
                path: path.to_path_buf(),
                lines,
            },
            header,
        ))
    }

    /// Next non-comment, non-blank row as `(1-based line number, columns)`.
    fn next_row(&mut self) -> Option<Result<(usize, String), GraphError>> {
        for (i, line) in self.lines.by_ref() {
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(io_err(&self.path)(e))),
            };
            let trimmed = line.trim_end_matches('\r');
            if trimmed.starts_with('#') || trimmed.is_empty() {
                continue;
            }
            return Some(Ok((i + 1, trimmed.to_string())));
        }
        None
    }

    fn header_err(&self, reason: impl Into<String>) -> GraphError {
        GraphError::Header {
            path: self.path.clone(),
            line: 1,
            reason: reason.into(),
        }
    }
}

fn parse_fields(
    path: &Path,
    line: usize,
    cols: &[&str],
    schema: &Schema,
) -> Result<Record, GraphError> {
    if cols.len() != schema.len() {
        return Err(GraphError::Columns {
            path: path.to_path_buf(),
            line,
            expected: schema.len(),
            found: cols.len(),
        });
    }
    schema
        .fields()
        .iter()
        .zip(cols)
        .map(|(f, text)| parse_value(text, f.ty))
        .collect::<Result<Record, _>>()
        .map_err(|source| GraphError::Row {
            path: path.to_path_buf(),
            line,
            source,
        })
}

fn parse_id(path: &Path, line: usize, text: &str) -> Result<VertexId, GraphError> {
    let id = parse_value(text, FieldType::I64)
        .map_err(|source| GraphError::Row {
            path: path.to_path_buf(),
            line,
            source,
        })?
        .as_i64()
        .expect("parsed as i64");
    if id < 0 {
        return Err(GraphError::NegativeId(id));
    }
    Ok(id)
}

fn split_cols(row: &str) -> Vec<&str> {
    row.split('\t').collect()
}

/// Parses `#vertex id:i64 [schema]`.
fn parse_vertex_header(rows: &Rows, header: &str) -> Result<Schema, GraphError> {
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(VERTEX_TAG) {
        return Err(rows.header_err(format!("expected `{VERTEX_TAG}`")));
    }
    if !tokens.next().is_some_and(|t| t.eq_ignore_ascii_case("id:i64")) {
        return Err(rows.header_err("expected `id:i64` after `#vertex`"));
    }
    let rest: Vec<&str> = tokens.collect();
    Schema::parse(&rest.join("")).map_err(|e| rows.header_err(e.to_string()))
}

/// Parses `#edge src:i64 dst:i64 directed:<bool> [schema]`.
fn parse_edge_header(rows: &Rows, header: &str) -> Result<(bool, Schema), GraphError> {
    let mut tokens = header.split_whitespace();
    if tokens.next() != Some(EDGE_TAG) {
        return Err(rows.header_err(format!("expected `{EDGE_TAG}`")));
    }
    if !tokens.next().is_some_and(|t| t.eq_ignore_ascii_case("src:i64"))
        || !tokens.next().is_some_and(|t| t.eq_ignore_ascii_case("dst:i64"))
    {
        return Err(rows.header_err("expected `src:i64 dst:i64`"));
    }
    let directed = match tokens.next().map(|t| t.to_ascii_lowercase()) {
        Some(t) if t == "directed:true" => true,
        Some(t) if t == "directed:false" => false,
        _ => return Err(rows.header_err("expected `directed:true` or `directed:false`")),
    };
    let rest: Vec<&str> = tokens.collect();
    let schema = Schema::parse(&rest.join("")).map_err(|e| rows.header_err(e.to_string()))?;
    Ok((directed, schema))
}

pub fn load_graph(vertex_path: &Path, edge_path: &Path) -> Result<PropertyGraph, GraphError> {
    let (vertex_schema, vertices) = read_vertex_table(vertex_path)?;

    let (mut rows, header) = Rows::open(edge_path)?;
    let (directed, edge_schema) = parse_edge_header(&rows, &header)?;
    let mut edges = Vec::new();
    while let Some(row) = rows.next_row() {
        let (line, row) = row?;
        let cols = split_cols(&row);
        if cols.len() < 2 {
            return Err(GraphError::Columns {
                path: edge_path.to_path_buf(),
                line,
                expected: 2 + edge_schema.len(),
                found: cols.len(),
            });
        }
        let src = parse_id(edge_path, line, cols[0])?;
        let dst = parse_id(edge_path, line, cols[1])?;
        let rec = parse_fields(edge_path, line, &cols[2..], &edge_schema)?;
        edges.push((src, dst, rec));
    }
    PropertyGraph::new(vertex_schema, edge_schema, directed, vertices, edges)
}

/// Reads a vertex table (input file or a saved output table).
pub fn read_vertex_table(path: &Path) -> Result<(Schema, Vec<(VertexId, Record)>), GraphError> {
    let (mut rows, header) = Rows::open(path)?;
    let schema = parse_vertex_header(&rows, &header)?;
    let mut vertices = Vec::new();
    while let Some(row) = rows.next_row() {
        let (line, row) = row?;
        let cols = split_cols(&row);
        let id = parse_id(path, line, cols[0])?;
        let rec = parse_fields(path, line, &cols[1..], &schema)?;
        vertices.push((id, rec));
    }
    Ok((schema, vertices))
}

fn write_row(out: &mut impl Write, lead: &[VertexId], rec: &Record) -> io::Result<()> {
    let mut first = true;
    for id in lead {
        if !first {
            out.write_all(b"\t")?;
        }
        write!(out, "{id}")?;
        first = false;
    }
    for value in rec.values() {
        if !first {
            out.write_all(b"\t")?;
        }
        out.write_all(format_value(value).as_bytes())?;
        first = false;
    }
    out.write_all(b"\n")
}

fn header_line(prefix: &str, schema: &Schema) -> String {
    if schema.is_empty() {
        prefix.to_string()
    } else {
        format!("{prefix} {schema}")
    }
}

/// Writes the vertex table: header, then one row per vertex in ascending id order.
pub fn write_vertex_table(g: &PropertyGraph, out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "{}", header_line("#vertex id:i64", g.vertex_schema()))?;
    for (id, rec) in g.vertices() {
        write_row(out, &[id], rec)?;
    }
    Ok(())
}

/// Writes the edge table. For undirected graphs each stored pair is written
/// once, from its smaller endpoint.
pub fn write_edge_table(g: &PropertyGraph, out: &mut impl Write) -> io::Result<()> {
    let prefix = format!("#edge src:i64 dst:i64 directed:{}", g.is_directed());
    writeln!(out, "{}", header_line(&prefix, g.edge_schema()))?;
    for (src, dst, rec) in g.edges() {
        if g.is_directed() || src <= dst {
            write_row(out, &[src, dst], rec)?;
        }
    }
    Ok(())
}

pub fn save_vertices(g: &PropertyGraph, path: &Path) -> Result<(), GraphError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write_vertex_table(g, &mut out)
        .and_then(|_| out.flush())
        .map_err(io_err(path))
}

pub fn save_edges(g: &PropertyGraph, path: &Path) -> Result<(), GraphError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    write_edge_table(g, &mut out)
        .and_then(|_| out.flush())
        .map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Directed graph on ids `0..num_vertices` whose out-degrees follow
/// `round(exp(Normal(mu, sigma)))`, clamped to `[0, num_vertices - 1]`.
/// Targets are distinct, exclude the source, and are chosen uniformly.
/// Vertices have the empty schema; edges carry `weight:f64 = 1.0`.
pub fn generate_lognormal(
    num_vertices: usize,
    mu: f64,
    sigma: f64,
    seed: u64,
) -> Result<PropertyGraph, GraphError> {
    if num_vertices == 0 {
        return Err(GraphError::InvalidParams("num_vertices must be at least 1".into()));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) || !mu.is_finite() {
        return Err(GraphError::InvalidParams(format!(
            "need finite mu and sigma >= 0, got mu={mu} sigma={sigma}"
        )));
    }
    let normal = Normal::new(mu, sigma).map_err(|e| GraphError::InvalidParams(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let max_degree = num_vertices - 1;
    let edge_schema = Schema::new([("weight", FieldType::F64)]).expect("valid schema");
    let weight = Record::new([Value::F64(1.0)]);

    let mut edges = Vec::new();
    for v in 0..num_vertices {
        let degree = normal.sample(&mut rng).exp().round();
        let degree = if degree.is_nan() {
            0
        } else {
            degree.clamp(0.0, max_degree as f64) as usize
        };
        for t in rand::seq::index::sample(&mut rng, max_degree, degree) {
            let t = if t >= v { t + 1 } else { t };
            edges.push((v as VertexId, t as VertexId, weight.clone()));
        }
    }
    let vertices = (0..num_vertices as VertexId).map(|id| (id, Record::empty())).collect();
    PropertyGraph::new(Schema::empty(), edge_schema, true, vertices, edges)
}
