//! Shared-memory RPC between the engine and guest processes that host
//! vertex programs, plus a socket transport used as a latency baseline.

pub mod bench;
pub mod channel;
pub mod guest;
pub mod protocol;
pub mod remote;
pub mod socket;

use std::path::{Path, PathBuf};

use thiserror::Error;
use vcgraph_core::record::RecordError;

pub use channel::{channel_path, ChannelStats, ShmChannel};
pub use guest::{GuestPool, GuestProcess};
pub use protocol::MethodIndex;
pub use remote::{program_dispatcher, serve_program, ProgramServer, RemoteProgram};
pub use socket::{socket_serve, SocketClient};

#[derive(Debug, Error)]
pub enum IpcError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("capacity {capacity} must be at least 4096 and a multiple of the page size {page}")]
    Capacity { capacity: usize, page: usize },
    #[error("payload of {len} bytes exceeds the {max}-byte limit")]
    Oversized { len: usize, max: usize },
    #[error("channel dead: {0}")]
    ChannelDead(String),
    #[error("remote error: {0}")]
    Remote(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("socket: {0}")]
    Socket(#[source] std::io::Error),
    #[error("guest launch: {0}")]
    Launch(String),
}

impl IpcError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        IpcError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
