//! Bulk-synchronous execution of a [`VertexProgram`] over a partitioned graph.
//!
//! Every superstep has the same observable semantics whichever backend runs
//! it: a vertex participates iff it was left active by its previous compute
//! or has incoming messages; its messages are folded into one (starting from
//! the empty message), `vertex_compute` runs, and vertices that come out
//! active emit along their out-edges. The run stops after `max_iter`
//! supersteps, or earlier once no vertex is active and no message is pending.
//!
//! Messages bound for one vertex are always folded in ascending edge order
//! (sources by ascending id, then each source's out-edges in storage order).
//! With a lawful merge this only pins down floating-point rounding, but it
//! makes results bit-identical across backends and worker counts.
//!
//! Backends:
//! * [`EngineKind::Pregel`]: compute then send. Messages are routed to the
//!   destination worker's mailbox and merged there after the barrier.
//! * [`EngineKind::Gas`]: gather, apply, scatter as three sub-phases separated
//!   by barriers. Scatter writes per-edge message slots that the next gather
//!   reads along in-edges.
//! * [`EngineKind::PushPullDense`]: each vertex scans its in-edges and calls
//!   `emit_message` on behalf of sources that were left active, then computes.

use std::borrow::Cow;
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Barrier, Mutex, RwLock};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::graph::{GraphError, InEdges, PropertyGraph, Topology, VertexId};
use crate::program::{GraphInfo, ProgramError, VertexProgram};
use crate::record::{Record, RecordError, Schema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EngineKind {
    Pregel,
    Gas,
    PushPullDense,
}

impl EngineKind {
    pub const ALL: [EngineKind; 3] = [EngineKind::Pregel, EngineKind::Gas, EngineKind::PushPullDense];

    pub fn as_str(self) -> &'static str {
        match self {
            EngineKind::Pregel => "pregel",
            EngineKind::Gas => "gas",
            EngineKind::PushPullDense => "pushpull",
        }
    }
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EngineKind {
    type Err = EngineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pregel" => Ok(EngineKind::Pregel),
            "gas" => Ok(EngineKind::Gas),
            "pushpull" | "pushpull-dense" | "pushpull_dense" | "push-pull" => {
                Ok(EngineKind::PushPullDense)
            }
            _ => Err(EngineError::Config(format!("unknown engine `{s}`"))),
        }
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("schema mismatch: {0}")]
    Schema(String),
    #[error("worker {worker}, vertex {vertex}: {source}")]
    Program {
        worker: usize,
        vertex: VertexId,
        #[source]
        source: ProgramError,
    },
    #[error("program: {0}")]
    Setup(#[source] ProgramError),
    #[error("vertex {vertex}: returned record does not match schema: {source}")]
    BadRecord {
        vertex: VertexId,
        #[source]
        source: RecordError,
    },
    #[error("worker {worker} panicked: {message}")]
    WorkerPanic { worker: usize, message: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EngineConfig {
    pub kind: EngineKind,
    pub num_workers: usize,
    pub max_iter: u32,
}

/// Counters for one superstep, summed over workers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct IterationStats {
    pub iter: u32,
    /// Vertices whose compute returned active.
    pub active: usize,
    /// Vertices that ran `vertex_compute`.
    pub participants: usize,
    /// Messages folded into inboxes at the start of the superstep.
    pub messages: usize,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub kind: EngineKind,
    pub num_workers: usize,
    pub iterations_executed: u32,
    /// The run stopped because no vertex was active and no message pending.
    pub converged_early: bool,
    pub iterations: Vec<IterationStats>,
    pub wall_time: Duration,
}

impl RunReport {
    pub fn active_counts(&self) -> Vec<usize> {
        self.iterations.iter().map(|s| s.active).collect()
    }
}

/// Runs `program` on every worker (the program is shared).
pub fn run(
    graph: &PropertyGraph,
    program: &dyn VertexProgram,
    config: EngineConfig,
) -> Result<(PropertyGraph, RunReport), EngineError> {
    let programs = vec![program; config.num_workers.max(1)];
    run_with_programs(graph, programs, config)
}

/// Runs with one program instance per worker, e.g. one IPC channel each.
pub fn run_with_programs<'a>(
    graph: &'a PropertyGraph,
    programs: Vec<&'a dyn VertexProgram>,
    config: EngineConfig,
) -> Result<(PropertyGraph, RunReport), EngineError> {
    if config.max_iter == 0 {
        return Err(EngineError::Config("max_iter must be at least 1".into()));
    }
    let start = Instant::now();
    let mut exec = Execution::new(graph, programs, config.kind, config.num_workers)?;
    let mut report = exec.run(config.max_iter)?;
    report.wall_time = start.elapsed();
    Ok((exec.into_graph()?, report))
}

/// Per-vertex state at a superstep boundary, densely indexed by ascending id.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSnapshot {
    /// The superstep that would run next (1-based).
    pub next_iter: u32,
    pub values: Vec<Record>,
    pub active: Vec<bool>,
    /// Merged message each vertex would receive next superstep.
    pub pending: Vec<Option<Record>>,
}

/// A message in flight to vertex `dst` (local index on the receiving worker),
/// sent along edge `edge`.
#[derive(Debug)]
struct Envelope {
    dst: u32,
    edge: usize,
    msg: Record,
}

struct Shard {
    values: Vec<Record>,
    active: Vec<bool>,
}

/// Static routing data for one execution.
struct Plan<'a> {
    topo: &'a Topology,
    workers: usize,
    members: Vec<Vec<u32>>,
    owner: Vec<u32>,
    local: Vec<u32>,
    edges: Cow<'a, [Record]>,
    in_edges: Option<InEdges>,
    /// GAS: first scatter slot of each member, per worker.
    slot_base: Vec<Vec<usize>>,
    /// GAS: `(worker, slot)` holding the message for each in-edge entry.
    in_slot: Vec<(u32, usize)>,
}

impl Plan<'_> {
    fn id(&self, dense: u32) -> VertexId {
        self.topo.ids()[dense as usize]
    }
}

const STAT_ACTIVE: usize = 0;
const STAT_PARTICIPANTS: usize = 1;
const STAT_MESSAGES: usize = 2;
const STAT_SENT: usize = 3;
const STAT_ERRORS: usize = 4;
const NUM_STATS: usize = 5;

/// Step counters reused round-robin over three supersteps, so a slot is only
/// reset once every worker has finished reading it.
#[derive(Default)]
struct StepTotals {
    slots: [[AtomicUsize; NUM_STATS]; 3],
}

impl StepTotals {
    fn add(&self, iter: u32, stats: &[usize; NUM_STATS]) {
        let slot = &self.slots[iter as usize % 3];
        for (counter, v) in slot.iter().zip(stats) {
            counter.fetch_add(*v, Ordering::AcqRel);
        }
    }

    fn read(&self, iter: u32) -> [usize; NUM_STATS] {
        let slot = &self.slots[iter as usize % 3];
        std::array::from_fn(|i| slot[i].load(Ordering::Acquire))
    }

    fn reset(&self, iter: u32) {
        for c in &self.slots[iter as usize % 3] {
            c.store(0, Ordering::Release);
        }
    }
}

struct StepOutcome {
    stats: Vec<IterationStats>,
    converged: bool,
}

/// One message slot per out-edge of a worker's members, plus whether each
/// member wrote any.
type ScatterSlots = (Vec<Option<Record>>, Vec<bool>);

/// Engine state between supersteps.
pub struct Execution<'a> {
    kind: EngineKind,
    plan: Plan<'a>,
    graph: &'a PropertyGraph,
    programs: Vec<&'a dyn VertexProgram>,
    empty: Record,
    state: Vec<RwLock<Shard>>,
    inbox: Vec<Mutex<Vec<Option<Record>>>>,
    /// Pregel mailboxes `[parity][destination][source]`.
    mail: [Vec<Vec<Mutex<Vec<Envelope>>>>; 2],
    /// GAS scatter slots per worker.
    scatter: Vec<RwLock<ScatterSlots>>,
    errors: Mutex<Vec<EngineError>>,
    next_iter: u32,
}

impl<'a> Execution<'a> {
    /// Validates schemas, prepares the programs and initialises every vertex.
    pub fn new(
        graph: &'a PropertyGraph,
        programs: Vec<&'a dyn VertexProgram>,
        kind: EngineKind,
        num_workers: usize,
    ) -> Result<Self, EngineError> {
        if num_workers == 0 {
            return Err(EngineError::Config("num_workers must be at least 1".into()));
        }
        if programs.len() != num_workers {
            return Err(EngineError::Config(format!(
                "{} program instances for {num_workers} workers",
                programs.len()
            )));
        }
        let schemas = programs[0].schemas().clone();
        if programs.iter().any(|p| *p.schemas() != schemas) {
            return Err(EngineError::Schema("program instances disagree on schemas".into()));
        }
        let edges = project_edges(graph, &schemas.edge)?;

        let info = GraphInfo {
            num_vertices: graph.num_vertices(),
            input_vertex_schema: graph.vertex_schema(),
            vertex_ids: Some(graph.vertex_ids()),
        };
        for (i, p) in programs.iter().enumerate() {
            let seen = programs[..i].iter().any(|q| std::ptr::addr_eq(*q, *p));
            if !seen {
                p.prepare(&info).map_err(EngineError::Setup)?;
            }
        }
        let empty = programs[0].empty_message().map_err(EngineError::Setup)?;
        schemas
            .message
            .check(&empty)
            .map_err(|e| EngineError::Schema(format!("empty message: {e}")))?;

        let plan = build_plan(graph.topology(), num_workers, kind, edges);
        let state = init_vertices(graph, &plan, &programs, &schemas.vertex)?;
        let w = num_workers;
        let mailboxes = || -> Vec<Vec<Mutex<Vec<Envelope>>>> {
            (0..w).map(|_| (0..w).map(|_| Mutex::new(Vec::new())).collect()).collect()
        };
        let (mail, scatter) = match kind {
            EngineKind::Pregel => ([mailboxes(), mailboxes()], Vec::new()),
            EngineKind::Gas => (
                [Vec::new(), Vec::new()],
                (0..w)
                    .map(|wk| {
                        let slots = plan.members[wk]
                            .iter()
                            .map(|&d| plan.topo.out_degree(d))
                            .sum::<usize>();
                        RwLock::new((vec![None; slots], vec![false; plan.members[wk].len()]))
                    })
                    .collect(),
            ),
            EngineKind::PushPullDense => ([Vec::new(), Vec::new()], Vec::new()),
        };
        let inbox = plan
            .members
            .iter()
            .map(|m| Mutex::new(vec![None; m.len()]))
            .collect();

        Ok(Execution {
            kind,
            graph,
            programs,
            empty,
            state,
            inbox,
            mail,
            scatter,
            errors: Mutex::new(Vec::new()),
            next_iter: 1,
            plan,
        })
    }

    pub fn kind(&self) -> EngineKind {
        self.kind
    }

    pub fn next_iter(&self) -> u32 {
        self.next_iter
    }

    /// Runs exactly one superstep.
    pub fn step(&mut self) -> Result<IterationStats, EngineError> {
        let outcome = self.execute(1, false)?;
        Ok(outcome.stats[0])
    }

    /// Runs supersteps until `next_iter > max_iter` or the computation goes idle.
    pub fn run(&mut self, max_iter: u32) -> Result<RunReport, EngineError> {
        let start = Instant::now();
        let remaining = (max_iter + 1).saturating_sub(self.next_iter);
        let outcome = if remaining == 0 {
            StepOutcome {
                stats: Vec::new(),
                converged: false,
            }
        } else {
            self.execute(remaining, true)?
        };
        Ok(RunReport {
            kind: self.kind,
            num_workers: self.plan.workers,
            iterations_executed: outcome.stats.len() as u32,
            converged_early: outcome.converged,
            iterations: outcome.stats,
            wall_time: start.elapsed(),
        })
    }

    /// Vertex records in ascending id order.
    pub fn vertex_records(&self) -> Vec<Record> {
        let shards: Vec<_> = self.state.iter().map(|s| s.read().expect("state lock")).collect();
        (0..self.plan.topo.num_vertices())
            .map(|d| shards[self.plan.owner[d] as usize].values[self.plan.local[d] as usize].clone())
            .collect()
    }

    pub fn into_graph(self) -> Result<PropertyGraph, EngineError> {
        let records = self.vertex_records();
        let schema = self.programs[0].schemas().vertex.clone();
        Ok(self.graph.with_vertex_records(schema, records)?)
    }

    /// Current state, including the merged messages waiting for the next
    /// superstep, computed without consuming them.
    pub fn snapshot(&self) -> Result<StateSnapshot, EngineError> {
        let plan = &self.plan;
        let n = plan.topo.num_vertices();
        let shards: Vec<_> = self.state.iter().map(|s| s.read().expect("state lock")).collect();
        let values = self.vertex_records();
        let active: Vec<bool> = (0..n)
            .map(|d| shards[plan.owner[d] as usize].active[plan.local[d] as usize])
            .collect();
        let program = self.programs[0];
        let mut pending: Vec<Option<Record>> = vec![None; n];
        let fold_err = |e| EngineError::Setup(e);
        match self.kind {
            EngineKind::Pregel => {
                let parity = (self.next_iter as usize + 1) % 2;
                for (w, members) in plan.members.iter().enumerate() {
                    let streams: Vec<Vec<Envelope>> = self.mail[parity][w]
                        .iter()
                        .map(|m| {
                            m.lock()
                                .expect("mail lock")
                                .iter()
                                .map(|e| Envelope {
                                    dst: e.dst,
                                    edge: e.edge,
                                    msg: e.msg.clone(),
                                })
                                .collect()
                        })
                        .collect();
                    let mut local = vec![None; members.len()];
                    fold_streams(streams, &mut local, program).map_err(|(_, e)| fold_err(e))?;
                    for (k, m) in local.into_iter().enumerate() {
                        pending[members[k] as usize] = m;
                    }
                }
            }
            EngineKind::Gas => {
                let bufs: Vec<_> = self.scatter.iter().map(|s| s.read().expect("scatter lock")).collect();
                let in_edges = plan.in_edges.as_ref().expect("gas has in-edges");
                for (d, slot) in pending.iter_mut().enumerate() {
                    for i in in_edges.range(d as u32) {
                        let (sw, s) = plan.in_slot[i];
                        if let Some(m) = &bufs[sw as usize].0[s] {
                            fold_into(slot, m.clone(), program).map_err(fold_err)?;
                        }
                    }
                }
            }
            EngineKind::PushPullDense => {
                if self.next_iter > 1 {
                    let in_edges = plan.in_edges.as_ref().expect("pull has in-edges");
                    for (d, slot) in pending.iter_mut().enumerate() {
                        for i in in_edges.range(d as u32) {
                            let s = in_edges.source(i);
                            let shard = &shards[plan.owner[s as usize] as usize];
                            let sl = plan.local[s as usize] as usize;
                            if !shard.active[sl] {
                                continue;
                            }
                            let e = in_edges.edge(i);
                            if let Some(m) = program
                                .emit_message(plan.id(s), plan.id(d as u32), &shard.values[sl], &plan.edges[e])
                                .map_err(fold_err)?
                            {
                                fold_into(slot, m, program).map_err(fold_err)?;
                            }
                        }
                    }
                }
            }
        }
        Ok(StateSnapshot {
            next_iter: self.next_iter,
            values,
            active,
            pending,
        })
    }

    fn execute(&mut self, max_steps: u32, stop_when_idle: bool) -> Result<StepOutcome, EngineError> {
        let start_iter = self.next_iter;
        let workers = self.plan.workers;
        let barrier = Barrier::new(workers);
        let totals = StepTotals::default();
        let this = &*self;
        let outcomes: Vec<Result<StepOutcome, String>> = if workers == 1 {
            vec![catch_panic(|| this.worker_loop(0, start_iter, max_steps, stop_when_idle, &barrier, &totals))]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = (0..workers)
                    .map(|w| {
                        let (barrier, totals) = (&barrier, &totals);
                        s.spawn(move || {
                            catch_panic(|| this.worker_loop(w, start_iter, max_steps, stop_when_idle, barrier, totals))
                        })
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err("worker thread died".into())))
                    .collect()
            })
        };

        let mut errors = std::mem::take(&mut *self.errors.lock().expect("error lock"));
        let mut first_ok = None;
        for (w, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(o) => {
                    first_ok.get_or_insert(o);
                }
                Err(message) => errors.push(EngineError::WorkerPanic { worker: w, message }),
            }
        }
        if let Some(err) = errors.into_iter().next() {
            return Err(err);
        }
        let outcome = first_ok.expect("at least one worker");
        self.next_iter += outcome.stats.len() as u32;
        Ok(outcome)
    }

    fn worker_loop(
        &self,
        w: usize,
        start_iter: u32,
        max_steps: u32,
        stop_when_idle: bool,
        barrier: &Barrier,
        totals: &StepTotals,
    ) -> StepOutcome {
        let mut stats = Vec::new();
        let mut converged = false;
        for iter in start_iter..start_iter + max_steps {
            if w == 0 {
                totals.reset(iter + 1);
            }
            let mut local = [0usize; NUM_STATS];
            match self.kind {
                EngineKind::Pregel => self.pregel_step(w, iter, &mut local),
                EngineKind::Gas => self.gas_step(w, iter, barrier, &mut local),
                EngineKind::PushPullDense => self.pull_step(w, iter, barrier, &mut local),
            }
            totals.add(iter, &local);
            barrier.wait();
            let t = totals.read(iter);
            if t[STAT_ERRORS] > 0 {
                break;
            }
            stats.push(IterationStats {
                iter,
                active: t[STAT_ACTIVE],
                participants: t[STAT_PARTICIPANTS],
                messages: t[STAT_MESSAGES],
            });
            if stop_when_idle && t[STAT_ACTIVE] == 0 && t[STAT_SENT] == 0 {
                converged = true;
                break;
            }
        }
        StepOutcome { stats, converged }
    }

    /// Runs `f`, recording any error or panic. Returns false on failure.
    fn guarded(&self, failed: &mut bool, w: usize, f: impl FnOnce() -> Result<(), EngineError>) -> bool {
        if *failed {
            return false;
        }
        let result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|panic| {
            Err(EngineError::WorkerPanic {
                worker: w,
                message: panic_message(&panic),
            })
        });
        match result {
            Ok(()) => true,
            Err(e) => {
                self.errors.lock().expect("error lock").push(e);
                *failed = true;
                false
            }
        }
    }

    fn program_err(&self, w: usize, dense: u32) -> impl Fn(ProgramError) -> EngineError + '_ {
        move |source| EngineError::Program {
            worker: w,
            vertex: self.plan.id(dense),
            source,
        }
    }

    /// Computes every participating member of worker `w` using the merged
    /// messages in its inbox; calls `emit` for each active vertex.
    fn compute_members(
        &self,
        w: usize,
        iter: u32,
        shard: &mut Shard,
        inbox: &mut [Option<Record>],
        stats: &mut [usize; NUM_STATS],
        mut emit: impl FnMut(u32, &Record) -> Result<(), EngineError>,
    ) -> Result<(), EngineError> {
        let program = self.programs[w];
        for (k, &d) in self.plan.members[w].iter().enumerate() {
            if !shard.active[k] && inbox[k].is_none() {
                continue;
            }
            let msg = inbox[k].take().unwrap_or_else(|| self.empty.clone());
            let (value, active) = program
                .vertex_compute(&shard.values[k], &msg, iter)
                .map_err(self.program_err(w, d))?;
            shard.values[k] = value;
            shard.active[k] = active;
            stats[STAT_PARTICIPANTS] += 1;
            if active {
                stats[STAT_ACTIVE] += 1;
                emit(d, &shard.values[k])?;
            }
        }
        Ok(())
    }

    fn pregel_step(&self, w: usize, iter: u32, stats: &mut [usize; NUM_STATS]) {
        let mut failed = false;
        let plan = &self.plan;
        let program = self.programs[w];
        let mut inbox = self.inbox[w].lock().expect("inbox lock");

        self.guarded(&mut failed, w, || {
            let incoming: Vec<Vec<Envelope>> = self.mail[(iter as usize + 1) % 2][w]
                .iter()
                .map(|m| std::mem::take(&mut *m.lock().expect("mail lock")))
                .collect();
            stats[STAT_MESSAGES] += fold_streams(incoming, &mut inbox, program)
                .map_err(|(dst, e)| self.program_err(w, plan.members[w][dst as usize])(e))?;
            Ok(())
        });

        let mut outboxes: Vec<Vec<Envelope>> = (0..plan.workers).map(|_| Vec::new()).collect();
        self.guarded(&mut failed, w, || {
            let mut shard = self.state[w].write().expect("state lock");
            let mut sent = 0;
            self.compute_members(w, iter, &mut shard, &mut inbox, stats, |d, value| {
                for e in plan.topo.out_range(d) {
                    let t = plan.topo.target(e);
                    if let Some(msg) = program
                        .emit_message(plan.id(d), plan.id(t), value, &plan.edges[e])
                        .map_err(self.program_err(w, d))?
                    {
                        outboxes[plan.owner[t as usize] as usize].push(Envelope {
                            dst: plan.local[t as usize],
                            edge: e,
                            msg,
                        });
                        sent += 1;
                    }
                }
                Ok(())
            })?;
            stats[STAT_SENT] += sent;
            Ok(())
        });
        let parity = iter as usize % 2;
        for (dst, out) in outboxes.into_iter().enumerate() {
            *self.mail[parity][dst][w].lock().expect("mail lock") = out;
        }
        stats[STAT_ERRORS] += usize::from(failed);
    }

    fn gas_step(&self, w: usize, iter: u32, barrier: &Barrier, stats: &mut [usize; NUM_STATS]) {
        let mut failed = false;
        let plan = &self.plan;
        let program = self.programs[w];
        let in_edges = plan.in_edges.as_ref().expect("gas has in-edges");

        // Gather.
        self.guarded(&mut failed, w, || {
            let bufs: Vec<_> = self.scatter.iter().map(|s| s.read().expect("scatter lock")).collect();
            let mut inbox = self.inbox[w].lock().expect("inbox lock");
            for (k, &d) in plan.members[w].iter().enumerate() {
                for i in in_edges.range(d) {
                    let (sw, slot) = plan.in_slot[i];
                    if let Some(m) = &bufs[sw as usize].0[slot] {
                        fold_into(&mut inbox[k], m.clone(), program).map_err(self.program_err(w, d))?;
                        stats[STAT_MESSAGES] += 1;
                    }
                }
            }
            Ok(())
        });
        barrier.wait();

        // Apply.
        self.guarded(&mut failed, w, || {
            let mut shard = self.state[w].write().expect("state lock");
            let mut inbox = self.inbox[w].lock().expect("inbox lock");
            self.compute_members(w, iter, &mut shard, &mut inbox, stats, |_, _| Ok(()))
        });
        barrier.wait();

        // Scatter.
        self.guarded(&mut failed, w, || {
            let shard = self.state[w].read().expect("state lock");
            let mut guard = self.scatter[w].write().expect("scatter lock");
            let (slots, written) = &mut *guard;
            let mut sent = 0;
            for (k, &d) in plan.members[w].iter().enumerate() {
                let base = plan.slot_base[w][k];
                let range = plan.topo.out_range(d);
                if !shard.active[k] {
                    if written[k] {
                        slots[base..base + range.len()].fill(None);
                        written[k] = false;
                    }
                    continue;
                }
                for (j, e) in range.enumerate() {
                    let t = plan.topo.target(e);
                    let msg = program
                        .emit_message(plan.id(d), plan.id(t), &shard.values[k], &plan.edges[e])
                        .map_err(self.program_err(w, d))?;
                    sent += usize::from(msg.is_some());
                    slots[base + j] = msg;
                }
                written[k] = true;
            }
            stats[STAT_SENT] += sent;
            Ok(())
        });
        stats[STAT_ERRORS] += usize::from(failed);
    }

    fn pull_step(&self, w: usize, iter: u32, barrier: &Barrier, stats: &mut [usize; NUM_STATS]) {
        let mut failed = false;
        let plan = &self.plan;
        let program = self.programs[w];
        let in_edges = plan.in_edges.as_ref().expect("pull has in-edges");

        // Pull along in-edges from sources left active by the previous superstep.
        if iter > 1 {
            self.guarded(&mut failed, w, || {
                let shards: Vec<_> = self.state.iter().map(|s| s.read().expect("state lock")).collect();
                let mut inbox = self.inbox[w].lock().expect("inbox lock");
                for (k, &d) in plan.members[w].iter().enumerate() {
                    for i in in_edges.range(d) {
                        let s = in_edges.source(i);
                        let shard = &shards[plan.owner[s as usize] as usize];
                        let sl = plan.local[s as usize] as usize;
                        if !shard.active[sl] {
                            continue;
                        }
                        let e = in_edges.edge(i);
                        if let Some(m) = program
                            .emit_message(plan.id(s), plan.id(d), &shard.values[sl], &plan.edges[e])
                            .map_err(self.program_err(w, s))?
                        {
                            fold_into(&mut inbox[k], m, program).map_err(self.program_err(w, d))?;
                            stats[STAT_MESSAGES] += 1;
                        }
                    }
                }
                Ok(())
            });
        }
        barrier.wait();

        self.guarded(&mut failed, w, || {
            let mut shard = self.state[w].write().expect("state lock");
            let mut inbox = self.inbox[w].lock().expect("inbox lock");
            self.compute_members(w, iter, &mut shard, &mut inbox, stats, |_, _| Ok(()))
        });
        stats[STAT_ERRORS] += usize::from(failed);
    }
}

fn catch_panic<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|p| panic_message(&p))
}

fn panic_message(panic: &Box<dyn std::any::Any + Send>) -> String {
    panic
        .downcast_ref::<&str>()
        .map(|s| s.to_string())
        .or_else(|| panic.downcast_ref::<String>().cloned())
        .unwrap_or_else(|| "unknown panic".into())
}

fn fold_into(slot: &mut Option<Record>, msg: Record, program: &dyn VertexProgram) -> Result<(), ProgramError> {
    *slot = Some(match slot.take() {
        None => msg,
        Some(acc) => program.merge_message(&acc, &msg)?,
    });
    Ok(())
}

/// Merges per-source-worker streams (each sorted by edge index) into `inbox`
/// in global edge order. Returns the number of messages folded; on failure,
/// the local index of the vertex whose merge failed.
fn fold_streams(
    streams: Vec<Vec<Envelope>>,
    inbox: &mut [Option<Record>],
    program: &dyn VertexProgram,
) -> Result<usize, (u32, ProgramError)> {
    let total: usize = streams.iter().map(Vec::len).sum();
    let nonempty = streams.iter().filter(|s| !s.is_empty()).count();
    let mut deliver = |env: Envelope| {
        let dst = env.dst;
        fold_into(&mut inbox[dst as usize], env.msg, program).map_err(|e| (dst, e))
    };
    if nonempty <= 1 {
        for env in streams.into_iter().flatten() {
            deliver(env)?;
        }
        return Ok(total);
    }
    let mut iters: Vec<_> = streams.into_iter().map(|s| s.into_iter().peekable()).collect();
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = iters
        .iter_mut()
        .enumerate()
        .filter_map(|(i, it)| it.peek().map(|e| Reverse((e.edge, i))))
        .collect();
    while let Some(Reverse((_, i))) = heap.pop() {
        let env = iters[i].next().expect("peeked");
        deliver(env)?;
        if let Some(next) = iters[i].peek() {
            heap.push(Reverse((next.edge, i)));
        }
    }
    Ok(total)
}

/// Edge records as seen by the program: the graph's records restricted to the
/// fields of `wanted`, in that order.
fn project_edges<'a>(graph: &'a PropertyGraph, wanted: &Schema) -> Result<Cow<'a, [Record]>, EngineError> {
    let have = graph.edge_schema();
    if have == wanted {
        return Ok(Cow::Borrowed(graph.topology().edge_records()));
    }
    let mut indices = Vec::with_capacity(wanted.len());
    for field in wanted.fields() {
        match have.index_of(&field.name) {
            Some(i) if have.fields()[i].ty == field.ty => indices.push(i),
            Some(i) => {
                return Err(EngineError::Schema(format!(
                    "edge field `{}` is {} in the graph but the program expects {}",
                    field.name,
                    have.fields()[i].ty,
                    field.ty
                )))
            }
            None => {
                return Err(EngineError::Schema(format!(
                    "program needs edge field `{}:{}`, graph edge schema is `{have}`",
                    field.name, field.ty
                )))
            }
        }
    }
    Ok(Cow::Owned(
        graph
            .topology()
            .edge_records()
            .iter()
            .map(|r| r.project(&indices))
            .collect(),
    ))
}

fn build_plan<'a>(topo: &'a Topology, workers: usize, kind: EngineKind, edges: Cow<'a, [Record]>) -> Plan<'a> {
    let n = topo.num_vertices();
    let mut members = vec![Vec::new(); workers];
    let mut owner = vec![0u32; n];
    let mut local = vec![0u32; n];
    for (d, &id) in topo.ids().iter().enumerate() {
        let w = id.rem_euclid(workers as i64) as usize;
        owner[d] = w as u32;
        local[d] = members[w].len() as u32;
        members[w].push(d as u32);
    }
    let in_edges = match kind {
        EngineKind::Pregel => None,
        EngineKind::Gas | EngineKind::PushPullDense => Some(topo.in_edges()),
    };
    let mut slot_base: Vec<Vec<usize>> = Vec::new();
    let mut in_slot = Vec::new();
    if kind == EngineKind::Gas {
        slot_base = members
            .iter()
            .map(|m| {
                let mut base = 0;
                m.iter()
                    .map(|&d| {
                        let b = base;
                        base += topo.out_degree(d);
                        b
                    })
                    .collect()
            })
            .collect();
        let ie = in_edges.as_ref().expect("built above");
        in_slot = (0..ie.len())
            .map(|i| {
                let s = ie.source(i) as usize;
                let e = ie.edge(i);
                let w = owner[s] as usize;
                let offset = e - topo.out_range(s as u32).start;
                (w as u32, slot_base[w][local[s] as usize] + offset)
            })
            .collect();
    }
    Plan {
        topo,
        workers,
        members,
        owner,
        local,
        edges,
        in_edges,
        slot_base,
        in_slot,
    }
}

/// Initialises every vertex on its owning worker, all active.
fn init_vertices(
    graph: &PropertyGraph,
    plan: &Plan<'_>,
    programs: &[&dyn VertexProgram],
    vertex_schema: &Schema,
) -> Result<Vec<RwLock<Shard>>, EngineError> {
    let init = |w: usize| -> Result<Shard, EngineError> {
        let members = &plan.members[w];
        let mut values = Vec::with_capacity(members.len());
        for &d in members {
            let id = plan.id(d);
            let rec = programs[w]
                .init_vertex_attr(id, plan.topo.out_degree(d), &graph.vertex_records()[d as usize])
                .map_err(|source| EngineError::Program { worker: w, vertex: id, source })?;
            vertex_schema
                .check(&rec)
                .map_err(|source| EngineError::BadRecord { vertex: id, source })?;
            values.push(rec);
        }
        Ok(Shard {
            active: vec![true; values.len()],
            values,
        })
    };
    let shards: Vec<Result<Shard, EngineError>> = if plan.workers == 1 {
        vec![init(0)]
    } else {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..plan.workers).map(|w| s.spawn(move || init(w))).collect();
            handles
                .into_iter()
                .enumerate()
                .map(|(w, h)| {
                    h.join().unwrap_or_else(|p| {
                        Err(EngineError::WorkerPanic {
                            worker: w,
                            message: panic_message(&p),
                        })
                    })
                })
                .collect()
        })
    };
    shards
        .into_iter()
        .map(|s| s.map(RwLock::new))
        .collect()
}
