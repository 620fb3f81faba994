#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::borrow::Cow;
use std::path::PathBuf;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::*;
use tempfile::TempDir;
use vcgraph_core::engine::{run_with_programs, EngineConfig, EngineKind};
use vcgraph_core::ops::{cc_program, pagerank_program, sssp_program, PageRankParams, SsspParams};
use vcgraph_core::program::{ProgramError, ProgramSchemas, RemoteSpec, VertexProgram};
use vcgraph_core::record::{FieldType, Record, Schema, Value};
use vcgraph_ipc::protocol::{Codec, Handshake, MethodIndex, Request, Response, MAGIC, VERSION};
use vcgraph_ipc::remote::encode_request_vec;
use vcgraph_ipc::{program_dispatcher, serve_program, GuestPool, IpcError, RemoteProgram, ShmChannel};

const CAP: usize = 1 << 16;

fn sssp_schemas() -> ProgramSchemas {
    sssp_program(SsspParams::default()).unwrap().schemas().clone()
}

#[test]
fn handshake_words_sit_at_payload_start() {
    let hs = Handshake {
        num_vertices: 5,
        input_vertex_schema: Schema::empty(),
        schemas: sssp_schemas(),
    };
    let bytes = hs.to_bytes().unwrap();
    assert_eq!(&bytes[0..4], &MAGIC.to_le_bytes());
    assert_eq!(&bytes[4..8], &VERSION.to_le_bytes());
    assert_eq!(&bytes[8..16], &5u64.to_le_bytes());
    assert_eq!(Handshake::decode(&bytes).unwrap(), hs);

    let mut bad = bytes.clone();
    bad[0] ^= 1;
    assert!(matches!(Handshake::decode(&bad), Err(IpcError::Protocol(_))));
    let mut newer = bytes.clone();
    newer[4] = 9;
    assert!(matches!(Handshake::decode(&newer), Err(IpcError::Protocol(_))));
    assert!(Handshake::decode(&bytes[..bytes.len() - 1]).is_err());

    // In the mapped file the words land at offsets 16..24.
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("h.buf");
    let mut client = ShmChannel::create(&path, CAP).unwrap();
    let mut server = ShmChannel::open(&path).unwrap();
    let file = path.clone();
    let h = std::thread::spawn(move || {
        let p = sssp_program(SsspParams::default()).unwrap();
        let mut inner = program_dispatcher(&p);
        server.serve(move |m, req| {
            if m == MethodIndex::Handshake {
                let raw = std::fs::read(&file).unwrap();
                assert_eq!(&raw[16..20], &MAGIC.to_le_bytes());
                assert_eq!(&raw[20..24], &VERSION.to_le_bytes());
            }
            inner(m, req)
        })
    });
    let remote_client = RemoteProgram::new(sssp_schemas(), {
        client.set_timeout(std::time::Duration::from_secs(10));
        client
    });
    remote_client.handshake(5, &Schema::empty()).unwrap();
    remote_client.shutdown().unwrap();
    h.join().unwrap().unwrap();
}

fn arb_value(ty: FieldType) -> BoxedStrategy<Value> {
    match ty {
        FieldType::I64 => any::<i64>().prop_map(Value::I64).boxed(),
        FieldType::F64 => any::<f64>().prop_map(Value::F64).boxed(),
        FieldType::Bool => any::<bool>().prop_map(Value::Bool).boxed(),
        FieldType::Str => ".{0,12}".prop_map(Value::Str).boxed(),
    }
}

fn arb_schema() -> impl Strategy<Value = Schema> {
    prop::collection::vec(
        prop_oneof![Just(FieldType::I64), Just(FieldType::F64), Just(FieldType::Bool), Just(FieldType::Str)],
        0..4,
    )
    .prop_map(|tys| Schema::new(tys.into_iter().enumerate().map(|(i, t)| (format!("f{i}"), t))).unwrap())
}

fn arb_record(schema: &Schema) -> BoxedStrategy<Record> {
    let parts: Vec<_> = schema.fields().iter().map(|f| arb_value(f.ty)).collect();
    parts.prop_map(Record::new).boxed()
}

fn arb_codec() -> impl Strategy<Value = Codec> {
    (arb_schema(), arb_schema(), arb_schema(), arb_schema()).prop_map(|(i, v, e, m)| {
        Codec::new(
            i,
            ProgramSchemas {
                vertex: v,
                edge: e,
                message: m,
            },
        )
    })
}

fn arb_request(c: &Codec) -> BoxedStrategy<Request<'static>> {
    let s = &c.schemas;
    prop_oneof![
        (any::<i64>(), any::<u64>(), arb_record(&c.input_vertex)).prop_map(|(id, out_degree, p)| Request::Init {
            id,
            out_degree,
            prop: Cow::Owned(p)
        }),
        Just(Request::Empty),
        (arb_record(&s.message), arb_record(&s.message)).prop_map(|(a, b)| Request::Merge {
            m1: Cow::Owned(a),
            m2: Cow::Owned(b)
        }),
        (any::<u32>(), arb_record(&s.vertex), arb_record(&s.message)).prop_map(|(iter, p, m)| Request::Compute {
            iter,
            prop: Cow::Owned(p),
            msg: Cow::Owned(m)
        }),
        (any::<i64>(), any::<i64>(), arb_record(&s.vertex), arb_record(&s.edge)).prop_map(|(src, dst, a, b)| {
            Request::Emit {
                src,
                dst,
                src_prop: Cow::Owned(a),
                edge_prop: Cow::Owned(b),
            }
        }),
    ]
    .boxed()
}

fn same_record(a: &Record, b: &Record) -> bool {
    a.values().len() == b.values().len()
        && a.values().iter().zip(b.values()).all(|(x, y)| match (x, y) {
            (Value::F64(p), Value::F64(q)) => p.to_bits() == q.to_bits(),
            _ => x == y,
        })
}

proptest! {
    #[test]
    fn requests_round_trip((codec, req) in arb_codec().prop_flat_map(|c| { let r = arb_request(&c); (Just(c), r) })) {
        let bytes = encode_request_vec(&codec, &req).unwrap();
        prop_assert_eq!(bytes.len(), codec.request_len(&req));
        let back = codec.decode_request(Codec::method_of(&req), &bytes).unwrap();
        let again = encode_request_vec(&codec, &back).unwrap();
        prop_assert_eq!(bytes, again);
    }

    #[test]
    fn responses_round_trip(
        (codec, v, m, active, emit) in arb_codec().prop_flat_map(|c| {
            let v = arb_record(&c.schemas.vertex);
            let m = arb_record(&c.schemas.message);
            (Just(c), v, m, any::<bool>(), any::<bool>())
        })
    ) {
        let cases = [
            (MethodIndex::InitVertexAttr, Response::Record(v.clone())),
            (MethodIndex::EmptyMessage, Response::Record(m.clone())),
            (MethodIndex::MergeMessage, Response::Record(m.clone())),
            (MethodIndex::VertexCompute, Response::Compute(v.clone(), active)),
            (MethodIndex::EmitMessage, Response::Emit(emit.then(|| m.clone()))),
        ];
        for (method, resp) in cases {
            let bytes = codec.response_bytes(method, &resp).unwrap();
            let back = codec.decode_response(method, &bytes).unwrap();
            let ok = match (&resp, &back) {
                (Response::Record(a), Response::Record(b)) => same_record(a, b),
                (Response::Compute(a, x), Response::Compute(b, y)) => same_record(a, b) && x == y,
                (Response::Emit(None), Response::Emit(None)) => true,
                (Response::Emit(Some(a)), Response::Emit(Some(b))) => same_record(a, b),
                _ => false,
            };
            prop_assert!(ok, "{method}: {resp:?} vs {back:?}");
        }
    }
}

#[test]
fn compound_response_layouts() {
    let codec = Codec::new(Schema::empty(), sssp_schemas());
    let rec = Record::new([Value::F64(1.5)]);
    let compute = codec
        .response_bytes(MethodIndex::VertexCompute, &Response::Compute(rec.clone(), true))
        .unwrap();
    assert_eq!(compute.len(), 9);
    assert_eq!(&compute[..8], &1.5f64.to_le_bytes());
    assert_eq!(compute[8], 1);
    let emit = codec.response_bytes(MethodIndex::EmitMessage, &Response::Emit(Some(rec))).unwrap();
    assert_eq!(emit[0], 1);
    assert_eq!(&emit[1..], &1.5f64.to_le_bytes());
    assert_eq!(codec.response_bytes(MethodIndex::EmitMessage, &Response::Emit(None)).unwrap(), vec![0]);
    assert!(codec.decode_response(MethodIndex::VertexCompute, &[0; 8]).is_err());
    let mut bad_flag = compute.clone();
    bad_flag[8] = 2;
    assert!(codec.decode_response(MethodIndex::VertexCompute, &bad_flag).is_err());
    assert!(codec.decode_response(MethodIndex::EmitMessage, &[0, 0]).is_err());
}

/// Serves `program` on a fresh channel in a thread for the duration of `body`.
fn with_served<T>(
    program: &(dyn VertexProgram + Sync),
    body: impl FnOnce(&RemoteProgram) -> T,
) -> T {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("p.buf");
    let client = ShmChannel::create(&path, CAP).unwrap();
    let mut server = ShmChannel::open(&path).unwrap();
    let remote = RemoteProgram::new(program.schemas().clone(), client);
    std::thread::scope(|s| {
        let h = s.spawn(move || serve_program(program, &mut server));
        let out = body(&remote);
        remote.shutdown().unwrap();
        h.join().unwrap().unwrap();
        out
    })
}

fn random_record(rng: &mut ChaCha8Rng, schema: &Schema) -> Record {
    Record::new(schema.fields().iter().map(|f| match f.ty {
        FieldType::I64 => Value::I64(rng.random_range(-1000..1000)),
        FieldType::F64 => Value::F64(match rng.random_range(0..6) {
            0 => f64::INFINITY,
            1 => 0.0,
            _ => rng.random_range(-100.0..100.0),
        }),
        FieldType::Bool => Value::Bool(rng.random_bool(0.5)),
        FieldType::Str => Value::Str(format!("s{}", rng.random_range(0..100))),
    }))
}

#[test]
fn served_responses_equal_direct_invocation() {
    let pr = pagerank_program(PageRankParams::default()).unwrap();
    let sssp = sssp_program(SsspParams::default()).unwrap();
    let cc = cc_program();
    let programs: [&(dyn VertexProgram + Sync); 3] = [&pr, &sssp, &cc];
    for (k, p) in programs.into_iter().enumerate() {
        let input = Schema::empty();
        p.prepare(&vcgraph_core::program::GraphInfo {
            num_vertices: 50,
            input_vertex_schema: &input,
            vertex_ids: None,
        })
        .unwrap();
        with_served(p, |remote| {
            remote.handshake(50, &input).unwrap();
            let s = p.schemas();
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            for _ in 0..2000 {
                let method = rng.random_range(1..=5u32);
                match method {
                    1 => {
                        let id = rng.random_range(0..50);
                        let deg = rng.random_range(0..5usize);
                        let direct = p.init_vertex_attr(id, deg, &Record::empty()).unwrap();
                        assert_eq!(remote.init_vertex_attr(id, deg, &Record::empty()).unwrap(), direct);
                    }
                    2 => assert_eq!(remote.empty_message().unwrap(), p.empty_message().unwrap()),
                    3 => {
                        let (a, b) = (random_record(&mut rng, &s.message), random_record(&mut rng, &s.message));
                        assert_eq!(remote.merge_message(&a, &b).unwrap(), p.merge_message(&a, &b).unwrap());
                    }
                    4 => {
                        let (v, m) = (random_record(&mut rng, &s.vertex), random_record(&mut rng, &s.message));
                        let iter = rng.random_range(1..20);
                        assert_eq!(remote.vertex_compute(&v, &m, iter).unwrap(), p.vertex_compute(&v, &m, iter).unwrap());
                    }
                    _ => {
                        let (v, e) = (random_record(&mut rng, &s.vertex), random_record(&mut rng, &s.edge));
                        let (src, dst) = (rng.random_range(0..50), rng.random_range(0..50));
                        assert_eq!(
                            remote.emit_message(src, dst, &v, &e).unwrap(),
                            p.emit_message(src, dst, &v, &e).unwrap()
                        );
                    }
                }
            }
            let stats = remote.channel().stats();
            assert_eq!(stats.writes_in, stats.calls);
            assert_eq!(stats.reads_out, stats.calls);
        });
    }
}

#[test]
fn server_rejects_bad_sequences_and_keeps_running() {
    let p = sssp_program(SsspParams::default()).unwrap();
    with_served(&p, |remote| {
        // Program methods before the handshake.
        let err = remote.channel().call(MethodIndex::EmptyMessage, &[]).unwrap_err();
        assert!(matches!(err, IpcError::Remote(ref m) if m.contains("before HANDSHAKE")), "{err}");
        assert!(matches!(remote.empty_message(), Err(ProgramError::Channel(_))));

        let wrong = RemoteProgram::new(cc_program().schemas().clone(), {
            let dir = TempDir::new().unwrap();
            ShmChannel::create(&dir.path().join("unused.buf"), CAP).unwrap()
        });
        let hs = Handshake {
            num_vertices: 1,
            input_vertex_schema: Schema::empty(),
            schemas: wrong.schemas().clone(),
        };
        let err = remote.channel().call(MethodIndex::Handshake, &hs.to_bytes().unwrap()).unwrap_err();
        assert!(matches!(err, IpcError::Remote(ref m) if m.contains("program declares")), "{err}");

        remote.handshake(3, &Schema::empty()).unwrap();
        let err = remote.channel().call(MethodIndex::MergeMessage, &[1, 2, 3]).unwrap_err();
        assert!(matches!(err, IpcError::Remote(ref m) if m.contains("MERGE_MESSAGE")), "{err}");
        let err = remote.channel().call(MethodIndex::EmptyMessage, &[0]).unwrap_err();
        assert!(matches!(err, IpcError::Remote(ref m) if m.contains("trailing")), "{err}");
        assert_eq!(remote.empty_message().unwrap(), Record::new([Value::F64(f64::INFINITY)]));
    });
}

struct Explosive {
    inner: vcgraph_core::ops::ConnectedComponents,
}

impl VertexProgram for Explosive {
    fn schemas(&self) -> &ProgramSchemas {
        self.inner.schemas()
    }
    fn init_vertex_attr(&self, id: i64, d: usize, p: &Record) -> Result<Record, ProgramError> {
        self.inner.init_vertex_attr(id, d, p)
    }
    fn empty_message(&self) -> Result<Record, ProgramError> {
        Err(ProgramError::Other("no identity today".into()))
    }
    fn merge_message(&self, _: &Record, _: &Record) -> Result<Record, ProgramError> {
        panic!("merge blew up")
    }
    fn vertex_compute(&self, _: &Record, _: &Record, _: u32) -> Result<(Record, bool), ProgramError> {
        Ok((Record::new([Value::Str("wrong type".into())]), true))
    }
    fn emit_message(&self, s: i64, d: i64, p: &Record, e: &Record) -> Result<Option<Record>, ProgramError> {
        self.inner.emit_message(s, d, p, e)
    }
}

#[test]
fn program_failures_become_remote_errors() {
    let p = Explosive { inner: cc_program() };
    with_served(&p, |remote| {
        remote.handshake(1, &Schema::empty()).unwrap();
        let l = Record::new([Value::I64(1)]);
        assert!(matches!(remote.empty_message(), Err(ProgramError::Remote(ref m)) if m.contains("no identity today")));
        assert!(matches!(remote.merge_message(&l, &l), Err(ProgramError::Remote(ref m)) if m.contains("merge blew up")));
        assert!(matches!(remote.vertex_compute(&l, &l, 1), Err(ProgramError::Remote(ref m)) if m.contains("schema")));
        assert_eq!(remote.emit_message(1, 2, &l, &Record::empty()).unwrap(), Some(l.clone()));
    });
}

#[test]
fn engine_over_channels_matches_native() {
    for seed in 0..4u64 {
        let g = random_graph(
            seed,
            &GraphShape {
                max_vertices: 60,
                max_edges: 300,
                directed: None,
            },
        );
        let native = sssp_program(SsspParams {
            source: pick_vertex(&g, seed),
            weight_field: "weight".into(),
        })
        .unwrap();
        for kind in EngineKind::ALL {
            let workers = 1 + (seed as usize % 3);
            let (expected, expected_report) = run_program(&g, &native, kind, workers, 1000);
            let dir = TempDir::new().unwrap();
            let paths: Vec<PathBuf> = (0..workers).map(|k| vcgraph_ipc::channel_path(dir.path(), k)).collect();
            let remotes: Vec<RemoteProgram> = paths
                .iter()
                .map(|p| RemoteProgram::new(native.schemas().clone(), ShmChannel::create(p, CAP).unwrap()))
                .collect();
            std::thread::scope(|s| {
                for p in &paths {
                    let mut server = ShmChannel::open(p).unwrap();
                    let native = &native;
                    s.spawn(move || serve_program(native, &mut server).unwrap());
                }
                let programs: Vec<&dyn VertexProgram> = remotes.iter().map(|r| r as &dyn VertexProgram).collect();
                let (out, report) = run_with_programs(
                    &g,
                    programs,
                    EngineConfig {
                        kind,
                        num_workers: workers,
                        max_iter: 1000,
                    },
                )
                .unwrap();
                assert_eq!(table_difference(&expected, &out, 0.0), None, "{kind}");
                assert_eq!(report.iterations, expected_report.iterations);
                for r in &remotes {
                    r.shutdown().unwrap();
                }
            });
        }
    }
}

#[test]
fn guest_launch_failures_are_reported() {
    let dir = TempDir::new().unwrap();
    let program = dir.path().join("prog.txt");
    std::fs::write(&program, "program = sssp\n").unwrap();
    let spec = |cmd: &[&str]| RemoteSpec {
        program_path: program.clone(),
        schemas: sssp_schemas(),
        guest_command: cmd.iter().map(|s| s.to_string()).collect(),
    };

    let missing = GuestPool::launch(&spec(&["/nonexistent/guest-binary"]), 1, dir.path());
    assert!(matches!(missing, Err(IpcError::Launch(_))));

    let pool = GuestPool::launch(&spec(&["sh", "-c", "echo cannot load program >&2; exit 3", "guest"]), 2, dir.path())
        .unwrap();
    assert!(dir.path().join("ipc-worker-1.buf").exists());
    let err = pool.remote(0).handshake(1, &Schema::empty()).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("cannot load program") && text.contains("exit status: 3"), "{text}");
    assert!(pool.shutdown().is_err());
    assert!(!dir.path().join("ipc-worker-0.buf").exists());
}
