//! A memory-mapped duplex buffer shared by one client and one server.
//!
//! ```text
//! offset  size  field
//! 0       1     client_flag    0 idle, 1 request ready
//! 1       1     server_flag    0 not done, 1 response ready
//! 4       4     method_index   u32 LE
//! 8       4     request_len    u32 LE
//! 12      4     response_len   u32 LE
//! 16      ..    payload
//! ```
//!
//! Payloads and header words are plain memory; the flag bytes are accessed
//! atomically with release stores and acquire loads, so everything written
//! before a flag is raised is visible to the side that observes it.
//! Responses start with a status byte (0 ok, 1 error + UTF-8 message).

use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU8, Ordering};
use std::time::{Duration, Instant};

use memmap2::MmapMut;

use crate::protocol::{MethodIndex, STATUS_ERROR, STATUS_OK};
use crate::IpcError;

pub const HEADER_LEN: usize = 16;
pub const MIN_CAPACITY: usize = 4096;
pub const DEFAULT_CAPACITY: usize = 1 << 20;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

const CLIENT_FLAG: usize = 0;
const SERVER_FLAG: usize = 1;
const METHOD: usize = 4;
const REQUEST_LEN: usize = 8;
const RESPONSE_LEN: usize = 12;

/// After this long without progress a waiting side starts sleeping briefly
/// between polls instead of only yielding.
const IDLE_BACKOFF_AFTER: Duration = Duration::from_millis(10);
const IDLE_SLEEP: Duration = Duration::from_micros(50);

pub fn page_size() -> usize {
    // SAFETY: sysconf has no preconditions.
    let n = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
    if n > 0 {
        n as usize
    } else {
        4096
    }
}

pub fn channel_path(workdir: &Path, worker: usize) -> PathBuf {
    workdir.join(format!("ipc-worker-{worker}.buf"))
}

/// Copies into and out of the mapped region made by the client side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ChannelStats {
    pub calls: u64,
    pub writes_in: u64,
    pub reads_out: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
}

/// Returns `Some(reason)` once the peer is known to be gone.
pub type PeerCheck = Box<dyn FnMut() -> Option<String> + Send>;

pub struct ShmChannel {
    map: MmapMut,
    path: PathBuf,
    timeout: Duration,
    dead: Option<String>,
    stats: ChannelStats,
    peer_check: Option<PeerCheck>,
}

impl std::fmt::Debug for ShmChannel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShmChannel")
            .field("path", &self.path)
            .field("capacity", &self.capacity())
            .field("dead", &self.dead)
            .finish()
    }
}

impl ShmChannel {
    /// Creates (or truncates) `path` as a zero-filled file of `capacity` bytes
    /// and maps it shared.
    pub fn create(path: &Path, capacity: usize) -> Result<Self, IpcError> {
        check_capacity(capacity)?;
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(true)
            .open(path)
            .map_err(|e| IpcError::io(path, e))?;
        file.set_len(capacity as u64).map_err(|e| IpcError::io(path, e))?;
        Self::map(file, path)
    }

    /// Maps an existing channel file; its length is the capacity.
    pub fn open(path: &Path) -> Result<Self, IpcError> {
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(path)
            .map_err(|e| IpcError::io(path, e))?;
        let len = file.metadata().map_err(|e| IpcError::io(path, e))?.len();
        check_capacity(usize::try_from(len).unwrap_or(usize::MAX))?;
        Self::map(file, path)
    }

    fn map(file: std::fs::File, path: &Path) -> Result<Self, IpcError> {
        // SAFETY: the file is shared with exactly one peer, which follows the
        // flag protocol above; neither side truncates it while mapped.
        let map = unsafe { MmapMut::map_mut(&file) }.map_err(|e| IpcError::io(path, e))?;
        Ok(ShmChannel {
            map,
            path: path.to_path_buf(),
            timeout: DEFAULT_TIMEOUT,
            dead: None,
            stats: ChannelStats::default(),
            peer_check: None,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn capacity(&self) -> usize {
        self.map.len()
    }

    /// Largest request payload.
    pub fn max_request(&self) -> usize {
        self.capacity() - HEADER_LEN
    }

    /// Largest response body (the status byte takes one payload byte).
    pub fn max_response(&self) -> usize {
        self.capacity() - HEADER_LEN - 1
    }

    pub fn set_timeout(&mut self, timeout: Duration) {
        self.timeout = timeout;
    }

    pub fn set_peer_check(&mut self, check: PeerCheck) {
        self.peer_check = Some(check);
    }

    pub fn stats(&self) -> ChannelStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = ChannelStats::default();
    }

    pub fn is_dead(&self) -> bool {
        self.dead.is_some()
    }

    /// The two flag bytes, as `(client, server)`.
    pub fn flags(&self) -> (u8, u8) {
        (
            self.flag(CLIENT_FLAG).load(Ordering::Acquire),
            self.flag(SERVER_FLAG).load(Ordering::Acquire),
        )
    }

    fn flag(&self, offset: usize) -> &AtomicU8 {
        // SAFETY: offsets 0 and 1 are within the mapping; AtomicU8 has the
        // same layout as u8 and no alignment requirement beyond 1.
        unsafe { &*(self.map.as_ptr().add(offset) as *const AtomicU8) }
    }

    fn read_u32(&self, offset: usize) -> u32 {
        u32::from_le_bytes(self.map[offset..offset + 4].try_into().expect("4 bytes"))
    }

    fn write_u32(&mut self, offset: usize, v: u32) {
        self.map[offset..offset + 4].copy_from_slice(&v.to_le_bytes());
    }

    fn payload_mut(&mut self) -> &mut [u8] {
        &mut self.map[HEADER_LEN..]
    }

    /// Sends `request` and returns the response body.
    pub fn call(&mut self, method: MethodIndex, request: &[u8]) -> Result<Vec<u8>, IpcError> {
        self.call_with(
            method,
            |buf| {
                buf[..request.len()].copy_from_slice(request);
                Ok(request.len())
            },
            request.len(),
            |body| Ok(body.to_vec()),
        )
    }

    /// Sends a request with an arbitrary method word, valid or not.
    pub fn call_raw(&mut self, method: u32, request: &[u8]) -> Result<Vec<u8>, IpcError> {
        self.call_inner(
            method,
            |buf| {
                buf[..request.len()].copy_from_slice(request);
                Ok(request.len())
            },
            request.len(),
            |body| Ok(body.to_vec()),
        )
    }

    /// Like [`call`](Self::call), but `write` fills the payload region in
    /// place and `read` decodes the response body straight from the mapping.
    /// `size_hint` is checked against the payload capacity before `write` runs.
    pub fn call_with<R>(
        &mut self,
        method: MethodIndex,
        write: impl FnOnce(&mut [u8]) -> Result<usize, IpcError>,
        size_hint: usize,
        read: impl FnOnce(&[u8]) -> Result<R, IpcError>,
    ) -> Result<R, IpcError> {
        self.call_inner(method as u32, write, size_hint, read)
    }

    fn call_inner<R>(
        &mut self,
        method: u32,
        write: impl FnOnce(&mut [u8]) -> Result<usize, IpcError>,
        size_hint: usize,
        read: impl FnOnce(&[u8]) -> Result<R, IpcError>,
    ) -> Result<R, IpcError> {
        if let Some(reason) = &self.dead {
            return Err(IpcError::ChannelDead(reason.clone()));
        }
        let cap = self.max_request();
        if size_hint > cap {
            return Err(IpcError::Oversized { len: size_hint, max: cap });
        }
        let written = write(self.payload_mut())?;
        if written > cap {
            return Err(IpcError::Oversized { len: written, max: cap });
        }
        self.stats.writes_in += 1;
        self.stats.bytes_in += written as u64;
        self.write_u32(METHOD, method);
        self.write_u32(REQUEST_LEN, written as u32);
        self.flag(CLIENT_FLAG).store(1, Ordering::Release);

        if let Err(e) = self.wait_for(SERVER_FLAG, 1) {
            self.dead = Some(e.to_string());
            return Err(e);
        }

        let len = self.read_u32(RESPONSE_LEN) as usize;
        let result = if len == 0 || len > cap {
            Err(IpcError::Protocol(format!("response length {len} out of range")))
        } else {
            let frame = &self.map[HEADER_LEN..HEADER_LEN + len];
            self.stats.reads_out += 1;
            self.stats.bytes_out += len as u64;
            match frame[0] {
                STATUS_OK => read(&frame[1..]),
                STATUS_ERROR => Err(IpcError::Remote(String::from_utf8_lossy(&frame[1..]).into_owned())),
                s => Err(IpcError::Protocol(format!("unknown response status {s}"))),
            }
        };
        self.stats.calls += 1;
        self.flag(CLIENT_FLAG).store(0, Ordering::Release);
        self.flag(SERVER_FLAG).store(0, Ordering::Release);
        result
    }

    /// Polls until the flag at `offset` equals `want`, yielding every spin.
    fn wait_for(&mut self, offset: usize, want: u8) -> Result<(), IpcError> {
        let start = Instant::now();
        let mut spins = 0u32;
        loop {
            if self.flag(offset).load(Ordering::Acquire) == want {
                return Ok(());
            }
            spins = spins.wrapping_add(1);
            if spins.is_multiple_of(64) {
                let waited = start.elapsed();
                if waited >= self.timeout {
                    return Err(IpcError::ChannelDead(format!(
                        "no response within {:?} on {}",
                        self.timeout,
                        self.path.display()
                    )));
                }
                if spins.is_multiple_of(1024) {
                    if let Some(reason) = self.peer_check.as_mut().and_then(|check| check()) {
                        return Err(IpcError::ChannelDead(reason));
                    }
                }
                if waited >= IDLE_BACKOFF_AFTER {
                    std::thread::sleep(IDLE_SLEEP);
                    continue;
                }
            }
            std::thread::yield_now();
        }
    }

    /// Serves requests until SHUTDOWN. `dispatch` returns the response body
    /// or an error message sent back as an error frame.
    pub fn serve<F>(&mut self, dispatch: F) -> Result<(), IpcError>
    where
        F: FnMut(MethodIndex, &[u8]) -> Result<Vec<u8>, String>,
    {
        self.serve_until(dispatch, || true)
    }

    /// Like [`serve`](Self::serve), but also returns once `keep_going`
    /// reports false while idle (checked every few milliseconds).
    pub fn serve_until<F, K>(&mut self, mut dispatch: F, mut keep_going: K) -> Result<(), IpcError>
    where
        F: FnMut(MethodIndex, &[u8]) -> Result<Vec<u8>, String>,
        K: FnMut() -> bool,
    {
        loop {
            if !self.wait_idle(CLIENT_FLAG, 1, &mut keep_going) {
                return Ok(());
            }
            let raw = self.read_u32(METHOD);
            let len = self.read_u32(REQUEST_LEN) as usize;
            let mut shutdown = false;
            let reply = if len > self.max_request() {
                Err(format!("request length {len} exceeds {}", self.max_request()))
            } else {
                match MethodIndex::try_from(raw) {
                    Ok(MethodIndex::Shutdown) => {
                        shutdown = true;
                        Ok(Vec::new())
                    }
                    Ok(m) => {
                        let request = &self.map[HEADER_LEN..HEADER_LEN + len];
                        dispatch(m, request)
                    }
                    Err(e) => Err(e.to_string()),
                }
            };
            self.write_response(reply);
            self.flag(SERVER_FLAG).store(1, Ordering::Release);
            if shutdown {
                return Ok(());
            }
            if !self.wait_idle(SERVER_FLAG, 0, &mut keep_going) {
                return Ok(());
            }
        }
    }

    fn write_response(&mut self, reply: Result<Vec<u8>, String>) {
        let max = self.max_response();
        let (status, body) = match reply {
            Ok(body) if body.len() <= max => (STATUS_OK, body),
            Ok(body) => (
                STATUS_ERROR,
                format!("response of {} bytes exceeds {max}", body.len()).into_bytes(),
            ),
            Err(msg) => {
                let mut b = msg.into_bytes();
                b.truncate(max);
                (STATUS_ERROR, b)
            }
        };
        let payload = self.payload_mut();
        payload[0] = status;
        payload[1..1 + body.len()].copy_from_slice(&body);
        self.write_u32(RESPONSE_LEN, body.len() as u32 + 1);
    }

    /// Server-side wait with no deadline. Returns false if `keep_going` asked
    /// to stop.
    fn wait_idle(&self, offset: usize, want: u8, keep_going: &mut impl FnMut() -> bool) -> bool {
        let start = Instant::now();
        let mut spins = 0u32;
        loop {
            if self.flag(offset).load(Ordering::Acquire) == want {
                return true;
            }
            spins = spins.wrapping_add(1);
            if spins.is_multiple_of(64) {
                let waited = start.elapsed();
                if waited >= IDLE_BACKOFF_AFTER {
                    if !keep_going() {
                        return false;
                    }
                    std::thread::sleep(IDLE_SLEEP);
                    continue;
                }
            }
            std::thread::yield_now();
        }
    }
}

fn check_capacity(capacity: usize) -> Result<(), IpcError> {
    let page = page_size();
    if capacity < MIN_CAPACITY || !capacity.is_multiple_of(page) || capacity > u32::MAX as usize {
        return Err(IpcError::Capacity { capacity, page });
    }
    Ok(())
}
