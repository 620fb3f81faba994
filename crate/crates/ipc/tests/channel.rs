use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use vcgraph_ipc::channel::{page_size, HEADER_LEN};
use vcgraph_ipc::protocol::MethodIndex;
use vcgraph_ipc::{IpcError, ShmChannel, SocketClient};

const CAP: usize = 65536;

fn pair(dir: &TempDir, cap: usize) -> (ShmChannel, ShmChannel) {
    let path = dir.path().join("ch.buf");
    let client = ShmChannel::create(&path, cap).unwrap();
    let server = ShmChannel::open(&path).unwrap();
    (client, server)
}

fn echo(_: MethodIndex, req: &[u8]) -> Result<Vec<u8>, String> {
    Ok(req.to_vec())
}

/// Runs `serve` with `dispatch` on a thread while `body` drives the client,
/// then shuts the server down.
fn with_server<D, T>(cap: usize, dispatch: D, body: impl FnOnce(&mut ShmChannel) -> T) -> T
where
    D: FnMut(MethodIndex, &[u8]) -> Result<Vec<u8>, String> + Send,
{
    let dir = TempDir::new().unwrap();
    let (mut client, mut server) = pair(&dir, cap);
    std::thread::scope(|s| {
        let h = s.spawn(move || server.serve(dispatch));
        let out = body(&mut client);
        if !client.is_dead() {
            assert_eq!(client.call(MethodIndex::Shutdown, &[]).unwrap(), Vec::<u8>::new());
            h.join().unwrap().unwrap();
        }
        out
    })
}

#[test]
fn created_channel_is_zeroed() {
    let dir = TempDir::new().unwrap();
    let (client, server) = pair(&dir, CAP);
    assert_eq!(client.capacity(), CAP);
    assert_eq!(client.flags(), (0, 0));
    assert_eq!(server.flags(), (0, 0));
    let bytes = std::fs::read(dir.path().join("ch.buf")).unwrap();
    assert_eq!(bytes.len(), CAP);
    assert!(bytes.iter().all(|&b| b == 0));
}

#[test]
fn capacity_must_be_whole_pages_of_at_least_4096() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("x.buf");
    for bad in [0, 100, 4095, page_size() + 1] {
        assert!(matches!(ShmChannel::create(&path, bad), Err(IpcError::Capacity { .. })), "{bad}");
    }
    std::fs::write(&path, [0u8; 100]).unwrap();
    assert!(matches!(ShmChannel::open(&path), Err(IpcError::Capacity { .. })));
    assert!(matches!(
        ShmChannel::open(&dir.path().join("missing.buf")),
        Err(IpcError::Io { .. })
    ));
}

#[test]
fn endpoints_see_each_others_writes() {
    with_server(
        CAP,
        |_, req| Ok(req.iter().rev().copied().collect()),
        |c| {
            assert_eq!(c.call(MethodIndex::MergeMessage, &[1, 2, 3]).unwrap(), vec![3, 2, 1]);
            assert_eq!(c.flags(), (0, 0));
        },
    );
}

#[test]
fn request_size_boundary() {
    with_server(
        CAP,
        |_, req| Ok(req.len().to_le_bytes().to_vec()),
        |c| {
            assert_eq!(c.max_request(), CAP - HEADER_LEN);
            let max = vec![0xAB; CAP - 16];
            let n = c.call(MethodIndex::EmitMessage, &max).unwrap();
            assert_eq!(usize::from_le_bytes(n.try_into().unwrap()), CAP - 16);
            let over = vec![0; CAP - 15];
            assert!(matches!(
                c.call(MethodIndex::EmitMessage, &over),
                Err(IpcError::Oversized { len, max }) if len == CAP - 15 && max == CAP - 16
            ));
            // A rejected request leaves the channel usable.
            assert!(c.call(MethodIndex::EmitMessage, &[1]).is_ok());
        },
    );
}

#[test]
fn response_size_boundary() {
    with_server(
        CAP,
        |_, req| Ok(vec![7; usize::from_le_bytes(req.try_into().unwrap())]),
        |c| {
            let max = c.max_response();
            assert_eq!(max, CAP - 17);
            let r = c.call(MethodIndex::VertexCompute, &max.to_le_bytes()).unwrap();
            assert_eq!(r.len(), max);
            let err = c.call(MethodIndex::VertexCompute, &(max + 1).to_le_bytes()).unwrap_err();
            assert!(matches!(err, IpcError::Remote(ref m) if m.contains("exceeds")), "{err}");
        },
    );
}

#[test]
fn randomized_echo_is_bit_exact() {
    with_server(4 * 4096, echo, |c| {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for i in 0..2000 {
            let len = match i % 4 {
                0 => rng.random_range(0..=c.max_response()),
                1 => rng.random_range(0..64),
                2 => c.max_response() - rng.random_range(0..4),
                _ => rng.random_range(0..4096),
            };
            let mut payload = vec![0u8; len];
            rng.fill(&mut payload[..]);
            assert_eq!(c.call(MethodIndex::VertexCompute, &payload).unwrap(), payload, "len {len}");
        }
    });
}

#[test]
fn sequential_calls_stay_paired() {
    with_server(CAP, echo, |c| {
        for seq in 0u64..10_000 {
            let req = seq.to_le_bytes();
            let resp = c.call(MethodIndex::EmitMessage, &req).unwrap();
            assert_eq!(u64::from_le_bytes(resp.try_into().unwrap()), seq);
        }
        assert_eq!(c.stats().calls, 10_000);
    });
}

#[test]
fn one_write_in_and_one_read_out_per_call() {
    with_server(CAP, echo, |c| {
        c.reset_stats();
        for len in [0, 1, 64, 4096, 60_000] {
            let before = c.stats();
            c.call(MethodIndex::VertexCompute, &vec![1; len]).unwrap();
            let after = c.stats();
            assert_eq!(after.writes_in - before.writes_in, 1);
            assert_eq!(after.reads_out - before.reads_out, 1);
            assert_eq!(after.bytes_in - before.bytes_in, len as u64);
            assert_eq!(after.bytes_out - before.bytes_out, len as u64 + 1);
        }
        let before = c.stats();
        let n = c
            .call_with(
                MethodIndex::VertexCompute,
                |buf| {
                    buf[..3].copy_from_slice(b"abc");
                    Ok(3)
                },
                3,
                |body| Ok(body.len()),
            )
            .unwrap();
        assert_eq!(n, 3);
        let after = c.stats();
        assert_eq!((after.writes_in - before.writes_in, after.reads_out - before.reads_out), (1, 1));
    });
}

#[test]
fn dispatcher_errors_become_remote_failures() {
    with_server(
        CAP,
        |m, req| match m {
            MethodIndex::MergeMessage => Err("merge exploded".to_string()),
            _ => Ok(req.to_vec()),
        },
        |c| {
            let err = c.call(MethodIndex::MergeMessage, b"x").unwrap_err();
            assert!(matches!(err, IpcError::Remote(ref m) if m == "merge exploded"), "{err}");
            // The server keeps serving after an error frame.
            assert_eq!(c.call(MethodIndex::EmitMessage, b"ok").unwrap(), b"ok");
            let err = c.call_raw(42, b"").unwrap_err();
            assert!(matches!(err, IpcError::Remote(ref m) if m.contains("unknown method index 42")), "{err}");
            assert_eq!(c.call(MethodIndex::EmitMessage, b"still").unwrap(), b"still");
        },
    );
}

#[test]
fn shutdown_ends_serve_with_empty_response() {
    let dir = TempDir::new().unwrap();
    let (mut client, mut server) = pair(&dir, CAP);
    let h = std::thread::spawn(move || server.serve(echo));
    assert!(client.call(MethodIndex::Shutdown, &[]).unwrap().is_empty());
    h.join().unwrap().unwrap();
    assert_eq!(client.flags(), (0, 0));
}

#[test]
fn silent_peer_times_out_and_kills_channel() {
    let dir = TempDir::new().unwrap();
    let (mut client, _server) = pair(&dir, CAP);
    client.set_timeout(Duration::from_millis(100));
    let t = Instant::now();
    assert!(matches!(client.call(MethodIndex::EmptyMessage, &[]), Err(IpcError::ChannelDead(_))));
    assert!(t.elapsed() >= Duration::from_millis(100));
    assert!(client.is_dead());
    let t = Instant::now();
    assert!(matches!(client.call(MethodIndex::EmptyMessage, &[]), Err(IpcError::ChannelDead(_))));
    assert!(t.elapsed() < Duration::from_millis(50));
}

#[test]
fn peer_check_reports_dead_peer() {
    let dir = TempDir::new().unwrap();
    let (mut client, _server) = pair(&dir, CAP);
    client.set_peer_check(Box::new(|| Some("peer went away".into())));
    let err = client.call(MethodIndex::EmptyMessage, &[]).unwrap_err();
    assert!(matches!(err, IpcError::ChannelDead(ref m) if m == "peer went away"), "{err}");
}

#[test]
fn serve_until_stops_when_asked() {
    let dir = TempDir::new().unwrap();
    let (_client, mut server) = pair(&dir, CAP);
    let t = Instant::now();
    server.serve_until(echo, || t.elapsed() < Duration::from_millis(50)).unwrap();
}

#[test]
fn socket_baseline_matches_channel_contract() {
    let (a, b) = std::os::unix::net::UnixStream::pair().unwrap();
    let server = std::thread::spawn(move || {
        vcgraph_ipc::socket_serve(b, |m, req| match m {
            MethodIndex::MergeMessage => Err("merge exploded".to_string()),
            _ => Ok(req.to_vec()),
        })
    });
    let mut client = SocketClient::from_stream(a);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let mut payload = vec![0u8; rng.random_range(0..5000)];
        rng.fill(&mut payload[..]);
        assert_eq!(client.call(MethodIndex::EmitMessage, &payload).unwrap(), payload);
    }
    let err = client.call(MethodIndex::MergeMessage, b"x").unwrap_err();
    assert!(matches!(err, IpcError::Remote(ref m) if m == "merge exploded"));
    assert!(client.call(MethodIndex::Shutdown, &[]).unwrap().is_empty());
    server.join().unwrap().unwrap();
}

#[test]
fn channel_files_follow_worker_naming() {
    let p = vcgraph_ipc::channel_path(std::path::Path::new("/tmp/job"), 3);
    assert_eq!(p, std::path::Path::new("/tmp/job/ipc-worker-3.buf"));
}

#[test]
fn bench_reports_both_transports_per_size() {
    let dir = TempDir::new().unwrap();
    let cfg = vcgraph_ipc::bench::BenchConfig {
        sizes: vec![64, 4096],
        calls: 200,
        warmup: 10,
        capacity: CAP,
    };
    let report = vcgraph_ipc::bench::bench_echo(&cfg, dir.path()).unwrap();
    assert_eq!(report.len(), 4);
    for size in [64, 4096] {
        for t in [vcgraph_ipc::bench::Transport::SharedMemory, vcgraph_ipc::bench::Transport::Socket] {
            let r = report.iter().find(|r| r.payload_bytes == size && r.transport == t).unwrap();
            assert_eq!(r.calls, 200);
            assert!(r.min_ns as f64 <= r.mean_ns && r.median_ns <= r.p99_ns && r.p99_ns <= r.max_ns);
        }
    }
    let empty = vcgraph_ipc::bench::BenchConfig { calls: 0, ..cfg };
    assert!(vcgraph_ipc::bench::bench_echo(&empty, dir.path()).unwrap().is_empty());
}
