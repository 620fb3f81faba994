//! Random instances, reference algorithms and instrumentation shared by the
//! integration and acceptance tests.
#![allow(dead_code)]

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcgraph_core::engine::{EngineConfig, EngineKind, Execution, RunReport};
use vcgraph_core::graph::{PropertyGraph, VertexId};
use vcgraph_core::program::{GraphInfo, ProgramError, ProgramSchemas, VertexProgram};
use vcgraph_core::record::{FieldType, Record, Schema, Value};

pub struct GraphShape {
    pub max_vertices: usize,
    pub max_edges: usize,
    pub directed: Option<bool>,
}

/// Random multigraph with sparse non-contiguous ids, self-loops allowed.
/// Edges carry `weight:f64` (positive) and `tag:i64`; vertices carry `seed:i64`.
pub fn random_graph(seed: u64, shape: &GraphShape) -> PropertyGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(1..=shape.max_vertices);
    let directed = shape.directed.unwrap_or_else(|| rng.random_bool(0.5));
    let max_m = if directed { shape.max_edges } else { shape.max_edges / 2 };
    let m = rng.random_range(0..=max_m.min(n * 8));
    let mut ids = Vec::with_capacity(n);
    let mut next = 0i64;
    for _ in 0..n {
        next += rng.random_range(1..=3);
        ids.push(next);
    }
    // Shuffle the input order so the loader has to sort.
    let mut vertices: Vec<(VertexId, Record)> =
        ids.iter().map(|&id| (id, Record::new([Value::I64(id * 7)]))).collect();
    for i in (1..vertices.len()).rev() {
        let j = rng.random_range(0..=i);
        vertices.swap(i, j);
    }
    let integer_weights = rng.random_bool(0.5);
    let edges = (0..m)
        .map(|k| {
            let s = ids[rng.random_range(0..n)];
            let d = ids[rng.random_range(0..n)];
            let w = if integer_weights {
                rng.random_range(1..=9) as f64
            } else {
                rng.random_range(0.001..10.0)
            };
            (s, d, Record::new([Value::F64(w), Value::I64(k as i64)]))
        })
        .collect();
    PropertyGraph::new(
        Schema::new([("seed", FieldType::I64)]).unwrap(),
        Schema::new([("weight", FieldType::F64), ("tag", FieldType::I64)]).unwrap(),
        directed,
        vertices,
        edges,
    )
    .expect("valid random graph")
}

pub fn pick_vertex(g: &PropertyGraph, seed: u64) -> VertexId {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    g.vertex_ids()[rng.random_range(0..g.num_vertices())]
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Binary-heap Dijkstra over the stored (directed) edges.
pub fn dijkstra(g: &PropertyGraph, source: VertexId, weight_field: &str) -> Vec<f64> {
    let wi = g.edge_schema().index_of(weight_field).expect("weight field");
    let ids = g.vertex_ids();
    let index = |id: VertexId| ids.binary_search(&id).expect("known id");
    let mut adj: Vec<Vec<(usize, f64)>> = vec![Vec::new(); ids.len()];
    for (s, d, rec) in g.edges() {
        adj[index(s)].push((index(d), rec.get(wi).and_then(Value::as_f64).unwrap()));
    }
    let mut dist = vec![f64::INFINITY; ids.len()];
    let mut done = vec![false; ids.len()];
    let src = index(source);
    dist[src] = 0.0;
    let mut heap = BinaryHeap::from([Entry(0.0, src)]);
    while let Some(Entry(du, u)) = heap.pop() {
        if done[u] {
            continue;
        }
        done[u] = true;
        for &(v, w) in &adj[u] {
            let cand = du + w;
            if cand < dist[v] {
                dist[v] = cand;
                heap.push(Entry(cand, v));
            }
        }
    }
    dist
}

pub struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    pub fn new(n: usize) -> Self {
        UnionFind {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    pub fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            Ordering::Less => self.parent[ra] = rb,
            Ordering::Greater => self.parent[rb] = ra,
            Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Component representative for each vertex (dense order), as the smallest
/// member id, computed with union-find.
pub fn components(g: &PropertyGraph) -> Vec<VertexId> {
    let ids = g.vertex_ids();
    let index = |id: VertexId| ids.binary_search(&id).expect("known id");
    let mut uf = UnionFind::new(ids.len());
    for (s, d, _) in g.edges() {
        uf.union(index(s), index(d));
    }
    let mut smallest: BTreeMap<usize, VertexId> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        let root = uf.find(i);
        let e = smallest.entry(root).or_insert(id);
        *e = (*e).min(id);
    }
    (0..ids.len()).map(|i| smallest[&uf.find(i)]).collect()
}

/// `iters` rounds of `r <- (1-d)/n + d * M r` from the uniform vector, with
/// `M[v][u] = (#edges u->v) / outdeg(u)`, built as a dense matrix. Mass at
/// dangling vertices is dropped.
pub fn power_iteration(g: &PropertyGraph, damping: f64, iters: u32) -> Vec<f64> {
    let ids = g.vertex_ids();
    let n = ids.len();
    let index = |id: VertexId| ids.binary_search(&id).expect("known id");
    let mut m = vec![0.0f64; n * n];
    for (u, &id) in ids.iter().enumerate() {
        let deg = g.out_degree(id).unwrap();
        for (d, _) in g.out_edges(id) {
            m[index(d) * n + u] += 1.0 / deg as f64;
        }
    }
    let mut r = vec![1.0 / n as f64; n];
    for _ in 0..iters {
        r = (0..n)
            .map(|v| {
                let row = &m[v * n..(v + 1) * n];
                let s: f64 = row.iter().zip(&r).map(|(a, b)| a * b).sum();
                (1.0 - damping) / n as f64 + damping * s
            })
            .collect();
    }
    r
}

// ---------------------------------------------------------------------------
// Running and comparing
// ---------------------------------------------------------------------------

pub fn run_program(
    g: &PropertyGraph,
    p: &dyn VertexProgram,
    kind: EngineKind,
    workers: usize,
    max_iter: u32,
) -> (PropertyGraph, RunReport) {
    vcgraph_core::engine::run(
        g,
        p,
        EngineConfig {
            kind,
            num_workers: workers,
            max_iter,
        },
    )
    .unwrap_or_else(|e| panic!("{kind} with {workers} workers: {e}"))
}

pub fn f64_column(g: &PropertyGraph, field: usize) -> Vec<f64> {
    g.vertex_records()
        .iter()
        .map(|r| r.get(field).and_then(Value::as_f64).expect("f64 field"))
        .collect()
}

pub fn i64_column(g: &PropertyGraph, field: usize) -> Vec<i64> {
    g.vertex_records()
        .iter()
        .map(|r| r.get(field).and_then(Value::as_i64).expect("i64 field"))
        .collect()
}

/// First difference between two vertex tables: I64/Bool/Str exact, F64
/// within `tol` absolute (equal infinities and NaN-with-NaN match).
pub fn table_difference(a: &PropertyGraph, b: &PropertyGraph, tol: f64) -> Option<String> {
    if a.vertex_ids() != b.vertex_ids() {
        return Some("vertex id sets differ".into());
    }
    if a.vertex_schema() != b.vertex_schema() {
        return Some(format!("schemas differ: {} vs {}", a.vertex_schema(), b.vertex_schema()));
    }
    for ((id, ra), rb) in a.vertices().zip(b.vertex_records()) {
        for (va, vb) in ra.values().iter().zip(rb.values()) {
            let same = match (va, vb) {
                (Value::F64(x), Value::F64(y)) => {
                    x == y || (x.is_nan() && y.is_nan()) || (x - y).abs() <= tol
                }
                _ => va == vb,
            };
            if !same {
                return Some(format!("vertex {id}: {va:?} vs {vb:?}"));
            }
        }
    }
    None
}

/// Per-vertex participation observed through [`Traced`].
#[derive(Default)]
pub struct CallLog {
    pub computes: Mutex<Vec<(u32, VertexId)>>,
}

/// Wraps a program and appends the vertex id to its vertex record so every
/// `vertex_compute` call can be attributed to a vertex.
pub struct Traced<'a, P: ?Sized> {
    inner: &'a P,
    schemas: ProgramSchemas,
    pub log: CallLog,
}

impl<'a, P: VertexProgram + ?Sized> Traced<'a, P> {
    pub fn new(inner: &'a P) -> Self {
        let base = inner.schemas();
        let mut fields: Vec<(String, FieldType)> = base
            .vertex
            .fields()
            .iter()
            .map(|f| (f.name.clone(), f.ty))
            .collect();
        fields.push(("traced_id".into(), FieldType::I64));
        Traced {
            inner,
            schemas: ProgramSchemas {
                vertex: Schema::new(fields).unwrap(),
                edge: base.edge.clone(),
                message: base.message.clone(),
            },
            log: CallLog::default(),
        }
    }

    pub fn take_calls(&self) -> Vec<(u32, VertexId)> {
        std::mem::take(&mut *self.log.computes.lock().unwrap())
    }

    fn split(prop: &Record) -> (Record, VertexId) {
        let vals = prop.values();
        let (last, rest) = vals.split_last().expect("traced record");
        (Record::new(rest.iter().cloned()), last.as_i64().unwrap())
    }

    fn join(mut rec: Record, id: VertexId) -> Record {
        rec.push(Value::I64(id));
        rec
    }
}

impl<P: VertexProgram + ?Sized> VertexProgram for Traced<'_, P> {
    fn schemas(&self) -> &ProgramSchemas {
        &self.schemas
    }
    fn prepare(&self, graph: &GraphInfo<'_>) -> Result<(), ProgramError> {
        self.inner.prepare(graph)
    }
    fn init_vertex_attr(&self, id: VertexId, out_degree: usize, prop: &Record) -> Result<Record, ProgramError> {
        Ok(Self::join(self.inner.init_vertex_attr(id, out_degree, prop)?, id))
    }
    fn empty_message(&self) -> Result<Record, ProgramError> {
        self.inner.empty_message()
    }
    fn merge_message(&self, m1: &Record, m2: &Record) -> Result<Record, ProgramError> {
        self.inner.merge_message(m1, m2)
    }
    fn vertex_compute(&self, prop: &Record, msg: &Record, iter: u32) -> Result<(Record, bool), ProgramError> {
        let (inner, id) = Self::split(prop);
        self.log.computes.lock().unwrap().push((iter, id));
        let (next, active) = self.inner.vertex_compute(&inner, msg, iter)?;
        Ok((Self::join(next, id), active))
    }
    fn emit_message(
        &self,
        src: VertexId,
        dst: VertexId,
        src_prop: &Record,
        edge_prop: &Record,
    ) -> Result<Option<Record>, ProgramError> {
        let (inner, id) = Self::split(src_prop);
        assert_eq!(id, src, "emit called with another vertex's record");
        self.inner.emit_message(src, dst, &inner, edge_prop)
    }
}

/// Steps `exec` to completion while checking, before every superstep, that
/// exactly the vertices that are active or have a pending message get a
/// `vertex_compute` call. Returns a description of the first violation.
pub fn check_activity_rule<P: VertexProgram + ?Sized>(
    exec: &mut Execution<'_>,
    traced: &Traced<'_, P>,
    max_iter: u32,
) -> Result<u32, String> {
    traced.take_calls();
    while exec.next_iter() <= max_iter {
        let before = exec.snapshot().map_err(|e| e.to_string())?;
        let ids = exec_ids(&before);
        let mut expected: Vec<VertexId> = ids
            .iter()
            .enumerate()
            .filter(|(i, _)| before.active[*i] || before.pending[*i].is_some())
            .map(|(_, &id)| id)
            .collect();
        let stats = exec.step().map_err(|e| e.to_string())?;
        let mut called: Vec<VertexId> = traced
            .take_calls()
            .into_iter()
            .map(|(iter, id)| {
                assert_eq!(iter, stats.iter);
                id
            })
            .collect();
        called.sort_unstable();
        expected.sort_unstable();
        if called != expected {
            return Err(format!(
                "superstep {}: {} compute calls, {} vertices eligible",
                stats.iter,
                called.len(),
                expected.len()
            ));
        }
        if stats.participants != expected.len() {
            return Err(format!("superstep {}: participant count {}", stats.iter, stats.participants));
        }
        let after = exec.snapshot().map_err(|e| e.to_string())?;
        for (i, id) in ids.iter().enumerate() {
            if !(before.active[i] || before.pending[i].is_some()) && after.values[i] != before.values[i] {
                return Err(format!("vertex {id} changed without participating"));
            }
        }
        if stats.active == 0 && after.pending.iter().all(Option::is_none) {
            return Ok(stats.iter);
        }
    }
    Ok(max_iter)
}

/// Ids recovered from the traced field (the last value of each record).
fn exec_ids(s: &vcgraph_core::engine::StateSnapshot) -> Vec<VertexId> {
    s.values
        .iter()
        .map(|r| r.values().last().and_then(Value::as_i64).unwrap())
        .collect()
}
