//! Local stream-socket transport with the same request/response contract as
//! the shared-memory channel, used as a latency baseline.
//!
//! Request frame: method u32, length u32, payload. Response frame: length
//! u32, then status byte and body.

use std::io::{Read, Write};
use std::os::unix::net::UnixStream;
use std::path::Path;

use crate::protocol::{parse_frame, MethodIndex, STATUS_ERROR, STATUS_OK};
use crate::IpcError;

pub struct SocketClient {
    stream: UnixStream,
    out: Vec<u8>,
    frame: Vec<u8>,
}

impl SocketClient {
    pub fn connect(path: &Path) -> Result<Self, IpcError> {
        let stream = UnixStream::connect(path).map_err(|e| IpcError::io(path, e))?;
        Ok(Self::from_stream(stream))
    }

    pub fn from_stream(stream: UnixStream) -> Self {
        SocketClient {
            stream,
            out: Vec::new(),
            frame: Vec::new(),
        }
    }

    pub fn call(&mut self, method: MethodIndex, request: &[u8]) -> Result<Vec<u8>, IpcError> {
        let len = u32::try_from(request.len()).map_err(|_| IpcError::Oversized {
            len: request.len(),
            max: u32::MAX as usize,
        })?;
        self.out.clear();
        self.out.extend_from_slice(&(method as u32).to_le_bytes());
        self.out.extend_from_slice(&len.to_le_bytes());
        self.out.extend_from_slice(request);
        self.stream.write_all(&self.out).map_err(IpcError::Socket)?;

        let mut header = [0u8; 4];
        self.stream.read_exact(&mut header).map_err(IpcError::Socket)?;
        let n = u32::from_le_bytes(header) as usize;
        self.frame.resize(n, 0);
        self.stream.read_exact(&mut self.frame).map_err(IpcError::Socket)?;
        parse_frame(&self.frame).map(<[u8]>::to_vec)
    }
}

/// Serves one connection until SHUTDOWN or end of stream.
pub fn socket_serve<F>(mut stream: UnixStream, mut dispatch: F) -> Result<(), IpcError>
where
    F: FnMut(MethodIndex, &[u8]) -> Result<Vec<u8>, String>,
{
    let mut request = Vec::new();
    let mut out = Vec::new();
    loop {
        let mut header = [0u8; 8];
        match stream.read_exact(&mut header) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(IpcError::Socket(e)),
        }
        let raw = u32::from_le_bytes(header[..4].try_into().expect("4 bytes"));
        let len = u32::from_le_bytes(header[4..].try_into().expect("4 bytes")) as usize;
        request.resize(len, 0);
        stream.read_exact(&mut request).map_err(IpcError::Socket)?;

        let mut shutdown = false;
        let reply = match MethodIndex::try_from(raw) {
            Ok(MethodIndex::Shutdown) => {
                shutdown = true;
                Ok(Vec::new())
            }
            Ok(m) => dispatch(m, &request),
            Err(e) => Err(e.to_string()),
        };
        let (status, body) = match reply {
            Ok(body) => (STATUS_OK, body),
            Err(msg) => (STATUS_ERROR, msg.into_bytes()),
        };
        out.clear();
        out.extend_from_slice(&(body.len() as u32 + 1).to_le_bytes());
        out.push(status);
        out.extend_from_slice(&body);
        stream.write_all(&out).map_err(IpcError::Socket)?;
        if shutdown {
            return Ok(());
        }
    }
}
