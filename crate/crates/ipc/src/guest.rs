//! Launching and tearing down guest processes, one per engine worker.
//!
//! A guest is started as `<command...> --program <file> --channel <file>
//! --schemas <vertex;edge;message>` and must serve the channel until SHUTDOWN,
//! then exit 0.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitStatus, Stdio};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use vcgraph_core::program::{ProgramSchemas, RemoteSpec, VertexProgram};

use crate::channel::{channel_path, PeerCheck, ShmChannel, DEFAULT_CAPACITY};
use crate::remote::RemoteProgram;
use crate::IpcError;

/// How long teardown waits for a guest to exit after SHUTDOWN before killing it.
pub const EXIT_GRACE: Duration = Duration::from_secs(5);
const SHUTDOWN_TIMEOUT: Duration = Duration::from_secs(2);

pub struct GuestProcess {
    child: Arc<Mutex<Child>>,
    stderr: Arc<Mutex<Vec<u8>>>,
    reader: Option<JoinHandle<()>>,
}

impl GuestProcess {
    pub fn launch(
        command: &[String],
        program_path: &Path,
        channel_path: &Path,
        schemas: &ProgramSchemas,
    ) -> Result<Self, IpcError> {
        let (exe, leading) = command
            .split_first()
            .ok_or_else(|| IpcError::Launch("empty guest command".into()))?;
        let mut child = Command::new(exe)
            .args(leading)
            .arg("--program")
            .arg(program_path)
            .arg("--channel")
            .arg(channel_path)
            .arg("--schemas")
            .arg(schemas.to_text())
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| IpcError::Launch(format!("cannot start `{exe}`: {e}")))?;
        let stderr = Arc::new(Mutex::new(Vec::new()));
        let reader = child.stderr.take().map(|mut pipe| {
            let sink = Arc::clone(&stderr);
            std::thread::spawn(move || {
                let mut chunk = [0u8; 4096];
                while let Ok(n) = pipe.read(&mut chunk) {
                    if n == 0 {
                        break;
                    }
                    sink.lock().unwrap_or_else(|p| p.into_inner()).extend_from_slice(&chunk[..n]);
                }
            })
        });
        Ok(GuestProcess {
            child: Arc::new(Mutex::new(child)),
            stderr,
            reader,
        })
    }

    pub fn id(&self) -> u32 {
        self.child.lock().unwrap_or_else(|p| p.into_inner()).id()
    }

    /// Everything the guest wrote to stderr so far.
    pub fn stderr_text(&self) -> String {
        String::from_utf8_lossy(&self.stderr.lock().unwrap_or_else(|p| p.into_inner())).into_owned()
    }

    pub fn try_status(&self) -> Option<ExitStatus> {
        self.child.lock().unwrap_or_else(|p| p.into_inner()).try_wait().ok().flatten()
    }

    /// A liveness probe for the client side of this guest's channel. Once
    /// the guest has exited it reports the exit status and captured stderr.
    pub fn peer_check(&self) -> PeerCheck {
        let child = Arc::clone(&self.child);
        let stderr = Arc::clone(&self.stderr);
        Box::new(move || {
            let status = child.lock().unwrap_or_else(|p| p.into_inner()).try_wait().ok().flatten()?;
            // Give the reader thread a moment to drain the pipe.
            std::thread::sleep(Duration::from_millis(50));
            let text = String::from_utf8_lossy(&stderr.lock().unwrap_or_else(|p| p.into_inner())).into_owned();
            Some(format!("guest exited ({status}); stderr: {}", text.trim_end()))
        })
    }

    /// Waits up to `grace` for exit, then kills. Returns the exit status.
    pub fn finish(mut self, grace: Duration) -> Result<ExitStatus, IpcError> {
        let deadline = Instant::now() + grace;
        let status = loop {
            let mut child = self.child.lock().unwrap_or_else(|p| p.into_inner());
            match child.try_wait().map_err(|e| IpcError::Launch(e.to_string()))? {
                Some(status) => break status,
                None if Instant::now() >= deadline => {
                    let _ = child.kill();
                    break child.wait().map_err(|e| IpcError::Launch(e.to_string()))?;
                }
                None => {}
            }
            drop(child);
            std::thread::sleep(Duration::from_millis(5));
        };
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
        Ok(status)
    }
}

impl Drop for GuestProcess {
    fn drop(&mut self) {
        let mut child = self.child.lock().unwrap_or_else(|p| p.into_inner());
        if let Ok(None) = child.try_wait() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

struct GuestWorker {
    program: RemoteProgram,
    process: Option<GuestProcess>,
}

/// One guest process and channel per worker, torn down on drop.
pub struct GuestPool {
    workers: Vec<GuestWorker>,
    paths: Vec<PathBuf>,
}

impl GuestPool {
    /// Creates `<workdir>/ipc-worker-<k>.buf` for each worker and starts a
    /// guest on it. The handshake happens when the engine prepares the
    /// programs.
    pub fn launch(spec: &RemoteSpec, num_workers: usize, workdir: &Path) -> Result<Self, IpcError> {
        Self::launch_with_capacity(spec, num_workers, workdir, DEFAULT_CAPACITY)
    }

    pub fn launch_with_capacity(
        spec: &RemoteSpec,
        num_workers: usize,
        workdir: &Path,
        capacity: usize,
    ) -> Result<Self, IpcError> {
        std::fs::create_dir_all(workdir).map_err(|e| IpcError::io(workdir, e))?;
        let mut pool = GuestPool {
            workers: Vec::with_capacity(num_workers),
            paths: Vec::new(),
        };
        for k in 0..num_workers {
            let path = channel_path(workdir, k);
            let mut channel = ShmChannel::create(&path, capacity)?;
            pool.paths.push(path.clone());
            let process = GuestProcess::launch(&spec.guest_command, &spec.program_path, &path, &spec.schemas)?;
            channel.set_peer_check(process.peer_check());
            pool.workers.push(GuestWorker {
                program: RemoteProgram::new(spec.schemas.clone(), channel),
                process: Some(process),
            });
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.workers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.workers.is_empty()
    }

    pub fn programs(&self) -> Vec<&dyn VertexProgram> {
        self.workers.iter().map(|w| &w.program as &dyn VertexProgram).collect()
    }

    pub fn remote(&self, worker: usize) -> &RemoteProgram {
        &self.workers[worker].program
    }

    /// Captured stderr of every guest, for diagnostics.
    pub fn stderr(&self) -> Vec<String> {
        self.workers
            .iter()
            .map(|w| w.process.as_ref().map(GuestProcess::stderr_text).unwrap_or_default())
            .collect()
    }

    /// Sends SHUTDOWN to every guest, waits for them to exit (killing any
    /// that do not) and removes the channel files. Returns the first failure.
    pub fn shutdown(mut self) -> Result<(), IpcError> {
        self.teardown()
    }

    fn teardown(&mut self) -> Result<(), IpcError> {
        let mut first_err = None;
        for (k, w) in self.workers.iter_mut().enumerate() {
            let Some(process) = w.process.take() else { continue };
            let alive = process.try_status().is_none();
            if alive && !w.program.channel().is_dead() {
                w.program.channel().set_timeout(SHUTDOWN_TIMEOUT);
                if let Err(e) = w.program.shutdown() {
                    first_err.get_or_insert(e);
                }
            }
            match process.finish(EXIT_GRACE) {
                Ok(status) if status.success() => {}
                Ok(status) => {
                    first_err.get_or_insert(IpcError::Launch(format!("guest {k} exited with {status}")));
                }
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        for p in &self.paths {
            let _ = std::fs::remove_file(p);
        }
        self.paths.clear();
        first_err.map_or(Ok(()), Err)
    }
}

impl Drop for GuestPool {
    fn drop(&mut self) {
        let _ = self.teardown();
    }
}
