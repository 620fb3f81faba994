//! Vertex programs across the channel: the client-side adapter the engine
//! calls, and the server-side dispatcher that drives a program object.

use std::borrow::Cow;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Mutex, OnceLock};

use vcgraph_core::graph::VertexId;
use vcgraph_core::program::{GraphInfo, ProgramError, ProgramSchemas, VertexProgram};
use vcgraph_core::record::{Record, Schema};

use crate::channel::ShmChannel;
use crate::protocol::{handshake_ack, Codec, Handshake, MethodIndex, Reader, Request, Response};
use crate::IpcError;

fn program_error(e: IpcError) -> ProgramError {
    match e {
        IpcError::Remote(msg) => ProgramError::Remote(msg),
        other => ProgramError::Channel(other.to_string()),
    }
}

/// A program served by another process over a [`ShmChannel`]. Calls are
/// serialised through the channel, so one instance serves one worker.
pub struct RemoteProgram {
    schemas: ProgramSchemas,
    channel: Mutex<ShmChannel>,
    codec: OnceLock<Codec>,
}

impl RemoteProgram {
    pub fn new(schemas: ProgramSchemas, channel: ShmChannel) -> Self {
        RemoteProgram {
            schemas,
            channel: Mutex::new(channel),
            codec: OnceLock::new(),
        }
    }

    pub fn channel(&self) -> std::sync::MutexGuard<'_, ShmChannel> {
        self.channel.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Sends HANDSHAKE; required before any program method.
    pub fn handshake(&self, num_vertices: u64, input_vertex_schema: &Schema) -> Result<(), IpcError> {
        let hs = Handshake {
            num_vertices,
            input_vertex_schema: input_vertex_schema.clone(),
            schemas: self.schemas.clone(),
        };
        let body = self.channel().call(MethodIndex::Handshake, &hs.to_bytes()?)?;
        check_ack(&body)?;
        let codec = Codec::new(input_vertex_schema.clone(), self.schemas.clone());
        if let Err(existing) = self.codec.set(codec.clone()) {
            if existing != codec {
                return Err(IpcError::Protocol("channel already bound to other schemas".into()));
            }
        }
        Ok(())
    }

    /// Sends SHUTDOWN; the server exits its loop after acknowledging.
    pub fn shutdown(&self) -> Result<(), IpcError> {
        self.channel().call(MethodIndex::Shutdown, &[]).map(|_| ())
    }

    fn invoke(&self, req: Request<'_>) -> Result<Response, ProgramError> {
        let codec = self
            .codec
            .get()
            .ok_or_else(|| ProgramError::Channel("no handshake on this channel".into()))?;
        let method = Codec::method_of(&req);
        let size = codec.request_len(&req);
        self.channel()
            .call_with(
                method,
                |buf| codec.encode_request(&req, buf),
                size,
                |body| codec.decode_response(method, body),
            )
            .map_err(program_error)
    }

    fn expect_record(resp: Response) -> Result<Record, ProgramError> {
        match resp {
            Response::Record(r) => Ok(r),
            other => Err(ProgramError::Channel(format!("unexpected response {other:?}"))),
        }
    }
}

impl VertexProgram for RemoteProgram {
    fn schemas(&self) -> &ProgramSchemas {
        &self.schemas
    }

    fn prepare(&self, graph: &GraphInfo<'_>) -> Result<(), ProgramError> {
        self.handshake(graph.num_vertices as u64, graph.input_vertex_schema)
            .map_err(program_error)
    }

    fn init_vertex_attr(&self, id: VertexId, out_degree: usize, prop: &Record) -> Result<Record, ProgramError> {
        Self::expect_record(self.invoke(Request::Init {
            id,
            out_degree: out_degree as u64,
            prop: Cow::Borrowed(prop),
        })?)
    }

    fn empty_message(&self) -> Result<Record, ProgramError> {
        Self::expect_record(self.invoke(Request::Empty)?)
    }

    fn merge_message(&self, m1: &Record, m2: &Record) -> Result<Record, ProgramError> {
        Self::expect_record(self.invoke(Request::Merge {
            m1: Cow::Borrowed(m1),
            m2: Cow::Borrowed(m2),
        })?)
    }

    fn vertex_compute(&self, prop: &Record, msg: &Record, iter: u32) -> Result<(Record, bool), ProgramError> {
        match self.invoke(Request::Compute {
            iter,
            prop: Cow::Borrowed(prop),
            msg: Cow::Borrowed(msg),
        })? {
            Response::Compute(r, active) => Ok((r, active)),
            other => Err(ProgramError::Channel(format!("unexpected response {other:?}"))),
        }
    }

    fn emit_message(
        &self,
        src: VertexId,
        dst: VertexId,
        src_prop: &Record,
        edge_prop: &Record,
    ) -> Result<Option<Record>, ProgramError> {
        match self.invoke(Request::Emit {
            src,
            dst,
            src_prop: Cow::Borrowed(src_prop),
            edge_prop: Cow::Borrowed(edge_prop),
        })? {
            Response::Emit(m) => Ok(m),
            other => Err(ProgramError::Channel(format!("unexpected response {other:?}"))),
        }
    }
}

/// Server-side dispatch of method calls to a program object. Errors and
/// panics in the program become error frames; the server keeps running.
pub struct ProgramServer<'a> {
    program: &'a dyn VertexProgram,
    codec: Option<Codec>,
}

impl<'a> ProgramServer<'a> {
    pub fn new(program: &'a dyn VertexProgram) -> Self {
        ProgramServer { program, codec: None }
    }

    pub fn dispatch(&mut self, method: MethodIndex, request: &[u8]) -> Result<Vec<u8>, String> {
        catch_unwind(AssertUnwindSafe(|| self.dispatch_inner(method, request)))
            .unwrap_or_else(|panic| {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_else(|| "unknown panic".into());
                Err(format!("{method}: panicked: {msg}"))
            })
    }

    fn dispatch_inner(&mut self, method: MethodIndex, request: &[u8]) -> Result<Vec<u8>, String> {
        if method == MethodIndex::Handshake {
            return self.handshake(request).map_err(|e| format!("{method}: {e}"));
        }
        let codec = self
            .codec
            .as_ref()
            .ok_or_else(|| format!("{method} before HANDSHAKE"))?;
        let req = codec.decode_request(method, request).map_err(|e| format!("{method}: {e}"))?;
        let p = self.program;
        let resp = match req {
            Request::Init { id, out_degree, prop } => {
                let degree = usize::try_from(out_degree).map_err(|_| format!("out-degree {out_degree} too large"))?;
                Response::Record(p.init_vertex_attr(id, degree, &prop).map_err(|e| format!("{method}: {e}"))?)
            }
            Request::Empty => Response::Record(p.empty_message().map_err(|e| format!("{method}: {e}"))?),
            Request::Merge { m1, m2 } => {
                Response::Record(p.merge_message(&m1, &m2).map_err(|e| format!("{method}: {e}"))?)
            }
            Request::Compute { iter, prop, msg } => {
                let (r, active) = p.vertex_compute(&prop, &msg, iter).map_err(|e| format!("{method}: {e}"))?;
                Response::Compute(r, active)
            }
            Request::Emit {
                src,
                dst,
                src_prop,
                edge_prop,
            } => Response::Emit(
                p.emit_message(src, dst, &src_prop, &edge_prop)
                    .map_err(|e| format!("{method}: {e}"))?,
            ),
        };
        codec
            .response_bytes(method, &resp)
            .map_err(|e| format!("{method}: result does not match declared schema: {e}"))
    }

    fn handshake(&mut self, request: &[u8]) -> Result<Vec<u8>, String> {
        let hs = Handshake::decode(request).map_err(|e| e.to_string())?;
        let declared = self.program.schemas();
        if &hs.schemas != declared {
            return Err(format!(
                "host expects schemas `{}`, program declares `{}`",
                hs.schemas.to_text(),
                declared.to_text()
            ));
        }
        self.program
            .prepare(&GraphInfo {
                num_vertices: usize::try_from(hs.num_vertices).map_err(|e| e.to_string())?,
                input_vertex_schema: &hs.input_vertex_schema,
                vertex_ids: None,
            })
            .map_err(|e| e.to_string())?;
        self.codec = Some(Codec::new(hs.input_vertex_schema, hs.schemas));
        Ok(handshake_ack())
    }
}

/// Reference dispatcher over an in-process program.
pub fn program_dispatcher(program: &dyn VertexProgram) -> impl FnMut(MethodIndex, &[u8]) -> Result<Vec<u8>, String> + '_ {
    let mut server = ProgramServer::new(program);
    move |m, req| server.dispatch(m, req)
}

/// Serves `program` on `channel` until SHUTDOWN.
pub fn serve_program(program: &dyn VertexProgram, channel: &mut ShmChannel) -> Result<(), IpcError> {
    channel.serve(program_dispatcher(program))
}

/// Encodes a full request frame body for `req` into a new buffer.
pub fn encode_request_vec(codec: &Codec, req: &Request<'_>) -> Result<Vec<u8>, IpcError> {
    let mut buf = vec![0u8; codec.request_len(req)];
    let n = codec.encode_request(req, &mut buf)?;
    buf.truncate(n);
    Ok(buf)
}

/// Decodes a handshake acknowledgement.
pub fn check_ack(body: &[u8]) -> Result<(), IpcError> {
    let mut r = Reader::new(body);
    crate::protocol::check_version(&mut r)?;
    r.finish()
}
