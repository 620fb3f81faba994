//! Echo round-trip latency over the shared-memory channel and the socket
//! baseline. The server runs on its own thread with its own mapping.

use std::fmt;
use std::os::unix::net::UnixStream;
use std::path::Path;
use std::time::Instant;

use crate::channel::{ShmChannel, DEFAULT_CAPACITY};
use crate::protocol::MethodIndex;
use crate::socket::{socket_serve, SocketClient};
use crate::IpcError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transport {
    SharedMemory,
    Socket,
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transport::SharedMemory => "shm",
            Transport::Socket => "socket",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencySummary {
    pub transport: Transport,
    pub payload_bytes: usize,
    pub calls: usize,
    pub mean_ns: f64,
    pub median_ns: u64,
    pub p99_ns: u64,
    pub min_ns: u64,
    pub max_ns: u64,
}

impl LatencySummary {
    pub fn from_samples(transport: Transport, payload_bytes: usize, mut samples: Vec<u64>) -> Self {
        samples.sort_unstable();
        let n = samples.len();
        let pick = |q: f64| samples[((n as f64 * q).ceil() as usize).clamp(1, n) - 1];
        LatencySummary {
            transport,
            payload_bytes,
            calls: n,
            mean_ns: samples.iter().map(|&s| s as f64).sum::<f64>() / n as f64,
            median_ns: pick(0.5),
            p99_ns: pick(0.99),
            min_ns: samples[0],
            max_ns: samples[n - 1],
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub calls: usize,
    pub warmup: usize,
    pub capacity: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![64, 4096],
            calls: 100_000,
            warmup: 1000,
            capacity: DEFAULT_CAPACITY,
        }
    }
}

fn echo(_: MethodIndex, req: &[u8]) -> Result<Vec<u8>, String> {
    Ok(req.to_vec())
}

fn pattern(len: usize, salt: usize) -> Vec<u8> {
    (0..len).map(|i| (i.wrapping_mul(31) ^ salt) as u8).collect()
}

/// Runs `calls` timed echo round-trips per size and transport. The channel
/// file is created under `workdir`. Zero calls gives an empty report.
pub fn bench_echo(config: &BenchConfig, workdir: &Path) -> Result<Vec<LatencySummary>, IpcError> {
    let mut out = Vec::new();
    if config.calls == 0 {
        return Ok(out);
    }
    for &size in &config.sizes {
        out.push(bench_shm(config, size, workdir)?);
        out.push(bench_socket(config, size)?);
    }
    Ok(out)
}

fn bench_shm(config: &BenchConfig, size: usize, workdir: &Path) -> Result<LatencySummary, IpcError> {
    let path = workdir.join(format!("bench-{size}.buf"));
    let mut client = ShmChannel::create(&path, config.capacity)?;
    let mut server = ShmChannel::open(&path)?;
    let payload = pattern(size, size);
    let result = std::thread::scope(|s| {
        let handle = s.spawn(move || server.serve(echo));
        let samples = time_calls(config, &payload, |p| client.call(MethodIndex::VertexCompute, p));
        let stop = client.call(MethodIndex::Shutdown, &[]);
        let served = handle.join().map_err(|_| IpcError::Protocol("echo server panicked".into()))?;
        served?;
        stop?;
        samples
    });
    let _ = std::fs::remove_file(&path);
    Ok(LatencySummary::from_samples(Transport::SharedMemory, size, result?))
}

fn bench_socket(config: &BenchConfig, size: usize) -> Result<LatencySummary, IpcError> {
    let (a, b) = UnixStream::pair().map_err(IpcError::Socket)?;
    let mut client = SocketClient::from_stream(a);
    let payload = pattern(size, size);
    let samples = std::thread::scope(|s| {
        let handle = s.spawn(move || socket_serve(b, echo));
        let samples = time_calls(config, &payload, |p| client.call(MethodIndex::VertexCompute, p));
        let stop = client.call(MethodIndex::Shutdown, &[]);
        let served = handle.join().map_err(|_| IpcError::Protocol("echo server panicked".into()))?;
        served?;
        stop?;
        samples
    })?;
    Ok(LatencySummary::from_samples(Transport::Socket, size, samples))
}

fn time_calls(
    config: &BenchConfig,
    payload: &[u8],
    mut call: impl FnMut(&[u8]) -> Result<Vec<u8>, IpcError>,
) -> Result<Vec<u64>, IpcError> {
    for _ in 0..config.warmup {
        call(payload)?;
    }
    let mut samples = Vec::with_capacity(config.calls);
    for _ in 0..config.calls {
        let t = Instant::now();
        let resp = call(payload)?;
        samples.push(t.elapsed().as_nanos() as u64);
        if resp != payload {
            return Err(IpcError::Protocol("echo mismatch".into()));
        }
    }
    Ok(samples)
}
