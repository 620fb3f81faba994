//! Method indices and the byte encodings of every request and response.
//!
//! All integers are little-endian. Records use the schema-driven codec from
//! `vcgraph_core::record`, so a request is a fixed sequence of scalars and
//! records with no per-field tags.
//!
//! | method            | request                               | response body            |
//! |-------------------|---------------------------------------|--------------------------|
//! | HANDSHAKE (0)     | magic u32, version u32, n u64, 4 × str | magic u32, version u32  |
//! | INIT_VERTEX_ATTR  | id i64, out_degree u64, prop (input)   | vertex record           |
//! | EMPTY_MESSAGE     | (empty)                                | message record          |
//! | MERGE_MESSAGE     | m1, m2                                 | message record          |
//! | VERTEX_COMPUTE    | iter u32, prop, msg                    | vertex record, active u8 |
//! | EMIT_MESSAGE      | src i64, dst i64, src_prop, edge_prop  | emit u8, [message]      |
//! | SHUTDOWN (6)      | (empty)                                | (empty)                 |
//!
//! `str` is a u32 byte length followed by UTF-8: the input vertex schema and
//! the program's vertex, edge and message schemas, in that order.

use std::borrow::Cow;
use std::fmt;

use vcgraph_core::graph::VertexId;
use vcgraph_core::record::{
    decode_record_prefix, encoded_len, serialize_record_into, Record, RecordError, Schema,
};
use vcgraph_core::program::ProgramSchemas;

use crate::IpcError;

pub const MAGIC: u32 = 0x5643_5047;
pub const VERSION: u32 = 1;
pub const STATUS_OK: u8 = 0;
pub const STATUS_ERROR: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u32)]
pub enum MethodIndex {
    Handshake = 0,
    InitVertexAttr = 1,
    EmptyMessage = 2,
    MergeMessage = 3,
    VertexCompute = 4,
    EmitMessage = 5,
    Shutdown = 6,
}

impl MethodIndex {
    pub const ALL: [MethodIndex; 7] = [
        MethodIndex::Handshake,
        MethodIndex::InitVertexAttr,
        MethodIndex::EmptyMessage,
        MethodIndex::MergeMessage,
        MethodIndex::VertexCompute,
        MethodIndex::EmitMessage,
        MethodIndex::Shutdown,
    ];
}

impl fmt::Display for MethodIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            MethodIndex::Handshake => "HANDSHAKE",
            MethodIndex::InitVertexAttr => "INIT_VERTEX_ATTR",
            MethodIndex::EmptyMessage => "EMPTY_MESSAGE",
            MethodIndex::MergeMessage => "MERGE_MESSAGE",
            MethodIndex::VertexCompute => "VERTEX_COMPUTE",
            MethodIndex::EmitMessage => "EMIT_MESSAGE",
            MethodIndex::Shutdown => "SHUTDOWN",
        };
        f.write_str(name)
    }
}

impl TryFrom<u32> for MethodIndex {
    type Error = IpcError;

    fn try_from(v: u32) -> Result<Self, Self::Error> {
        MethodIndex::ALL
            .get(v as usize)
            .copied()
            .ok_or_else(|| IpcError::Protocol(format!("unknown method index {v}")))
    }
}

/// Builds a response frame: status byte then body.
pub fn ok_frame(body: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 1);
    out.push(STATUS_OK);
    out.extend_from_slice(body);
    out
}

pub fn error_frame(message: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(message.len() + 1);
    out.push(STATUS_ERROR);
    out.extend_from_slice(message.as_bytes());
    out
}

/// Splits a response frame into its body, or the remote error it carries.
pub fn parse_frame(frame: &[u8]) -> Result<&[u8], IpcError> {
    match frame.split_first() {
        Some((&STATUS_OK, body)) => Ok(body),
        Some((&STATUS_ERROR, msg)) => Err(IpcError::Remote(String::from_utf8_lossy(msg).into_owned())),
        Some((s, _)) => Err(IpcError::Protocol(format!("unknown response status {s}"))),
        None => Err(IpcError::Protocol("empty response frame".into())),
    }
}

// ---------------------------------------------------------------------------
// Cursor helpers
// ---------------------------------------------------------------------------

/// Sequential writer over a caller-provided buffer.
pub struct Writer<'a> {
    buf: &'a mut [u8],
    pos: usize,
}

impl<'a> Writer<'a> {
    pub fn new(buf: &'a mut [u8]) -> Self {
        Writer { buf, pos: 0 }
    }

    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }

    fn bytes(&mut self, b: &[u8]) -> Result<(), IpcError> {
        let end = self.pos + b.len();
        if end > self.buf.len() {
            return Err(IpcError::Oversized {
                len: end,
                max: self.buf.len(),
            });
        }
        self.buf[self.pos..end].copy_from_slice(b);
        self.pos = end;
        Ok(())
    }

    pub fn u8(&mut self, v: u8) -> Result<(), IpcError> {
        self.bytes(&[v])
    }

    pub fn u32(&mut self, v: u32) -> Result<(), IpcError> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn u64(&mut self, v: u64) -> Result<(), IpcError> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn i64(&mut self, v: i64) -> Result<(), IpcError> {
        self.bytes(&v.to_le_bytes())
    }

    pub fn str(&mut self, s: &str) -> Result<(), IpcError> {
        self.u32(s.len() as u32)?;
        self.bytes(s.as_bytes())
    }

    pub fn record(&mut self, schema: &Schema, rec: &Record) -> Result<(), IpcError> {
        let n = serialize_record_into(schema, rec, &mut self.buf[self.pos..]).map_err(|e| match e {
            RecordError::BufferTooSmall { needed, .. } => IpcError::Oversized {
                len: self.pos + needed,
                max: self.buf.len(),
            },
            other => IpcError::Record(other),
        })?;
        self.pos += n;
        Ok(())
    }
}

/// Sequential reader that rejects truncated input and trailing bytes.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IpcError> {
        if self.buf.len() - self.pos < n {
            return Err(IpcError::Protocol(format!(
                "truncated frame: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, IpcError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, IpcError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, IpcError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn i64(&mut self) -> Result<i64, IpcError> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn str(&mut self) -> Result<&'a str, IpcError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|e| IpcError::Protocol(format!("invalid UTF-8: {e}")))
    }

    pub fn record(&mut self, schema: &Schema) -> Result<Record, IpcError> {
        let (rec, n) = decode_record_prefix(schema, &self.buf[self.pos..])?;
        self.pos += n;
        Ok(rec)
    }

    pub fn bool_flag(&mut self) -> Result<bool, IpcError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(IpcError::Protocol(format!("flag byte {b} is neither 0 nor 1"))),
        }
    }

    pub fn finish(self) -> Result<(), IpcError> {
        if self.pos != self.buf.len() {
            return Err(IpcError::Protocol(format!(
                "{} trailing bytes in frame",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Handshake
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Handshake {
    pub num_vertices: u64,
    pub input_vertex_schema: Schema,
    pub schemas: ProgramSchemas,
}

impl Handshake {
    pub fn encode(&self, w: &mut Writer<'_>) -> Result<(), IpcError> {
        w.u32(MAGIC)?;
        w.u32(VERSION)?;
        w.u64(self.num_vertices)?;
        w.str(&self.input_vertex_schema.to_string())?;
        w.str(&self.schemas.vertex.to_string())?;
        w.str(&self.schemas.edge.to_string())?;
        w.str(&self.schemas.message.to_string())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, IpcError> {
        let mut buf = vec![0u8; 64 + self.encoded_text_len()];
        let mut w = Writer::new(&mut buf);
        self.encode(&mut w)?;
        let n = w.len();
        buf.truncate(n);
        Ok(buf)
    }

    fn encoded_text_len(&self) -> usize {
        [
            self.input_vertex_schema.to_string(),
            self.schemas.vertex.to_string(),
            self.schemas.edge.to_string(),
            self.schemas.message.to_string(),
        ]
        .iter()
        .map(String::len)
        .sum()
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, IpcError> {
        let mut r = Reader::new(bytes);
        check_version(&mut r)?;
        let num_vertices = r.u64()?;
        let input_vertex_schema = Schema::parse(r.str()?)?;
        let vertex = Schema::parse(r.str()?)?;
        let edge = Schema::parse(r.str()?)?;
        let message = Schema::parse(r.str()?)?;
        r.finish()?;
        Ok(Handshake {
            num_vertices,
            input_vertex_schema,
            schemas: ProgramSchemas { vertex, edge, message },
        })
    }
}

/// Handshake response body.
pub fn handshake_ack() -> Vec<u8> {
    let mut v = MAGIC.to_le_bytes().to_vec();
    v.extend_from_slice(&VERSION.to_le_bytes());
    v
}

pub fn check_version(r: &mut Reader<'_>) -> Result<(), IpcError> {
    let magic = r.u32()?;
    let version = r.u32()?;
    if magic != MAGIC {
        return Err(IpcError::Protocol(format!("bad magic {magic:#010x}")));
    }
    if version != VERSION {
        return Err(IpcError::Protocol(format!(
            "protocol version {version}, expected {VERSION}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Method codecs
// ---------------------------------------------------------------------------

/// Encoders and decoders for the five program methods, bound to one job's
/// schemas.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codec {
    pub input_vertex: Schema,
    pub schemas: ProgramSchemas,
}

/// A program-method request. Records are borrowed when encoding on the
/// client and owned when decoded on the server.
#[derive(Debug, Clone, PartialEq)]
pub enum Request<'a> {
    Init {
        id: VertexId,
        out_degree: u64,
        prop: Cow<'a, Record>,
    },
    Empty,
    Merge {
        m1: Cow<'a, Record>,
        m2: Cow<'a, Record>,
    },
    Compute {
        iter: u32,
        prop: Cow<'a, Record>,
        msg: Cow<'a, Record>,
    },
    Emit {
        src: VertexId,
        dst: VertexId,
        src_prop: Cow<'a, Record>,
        edge_prop: Cow<'a, Record>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Response {
    Record(Record),
    Compute(Record, bool),
    Emit(Option<Record>),
}

impl Codec {
    pub fn new(input_vertex: Schema, schemas: ProgramSchemas) -> Self {
        Codec { input_vertex, schemas }
    }

    pub fn method_of(req: &Request<'_>) -> MethodIndex {
        match req {
            Request::Init { .. } => MethodIndex::InitVertexAttr,
            Request::Empty => MethodIndex::EmptyMessage,
            Request::Merge { .. } => MethodIndex::MergeMessage,
            Request::Compute { .. } => MethodIndex::VertexCompute,
            Request::Emit { .. } => MethodIndex::EmitMessage,
        }
    }

    /// Upper bound on the encoded request size (exact unless a record does
    /// not match its schema, which encoding then reports).
    pub fn request_len(&self, req: &Request<'_>) -> usize {
        let len = |s: &Schema, r: &Record| encoded_len(s, r).unwrap_or(0);
        let s = &self.schemas;
        match req {
            Request::Init { prop, .. } => 16 + len(&self.input_vertex, prop),
            Request::Empty => 0,
            Request::Merge { m1, m2 } => len(&s.message, m1) + len(&s.message, m2),
            Request::Compute { prop, msg, .. } => 4 + len(&s.vertex, prop) + len(&s.message, msg),
            Request::Emit { src_prop, edge_prop, .. } => {
                16 + len(&s.vertex, src_prop) + len(&s.edge, edge_prop)
            }
        }
    }

    pub fn encode_request(&self, req: &Request<'_>, buf: &mut [u8]) -> Result<usize, IpcError> {
        let s = &self.schemas;
        let mut w = Writer::new(buf);
        match req {
            Request::Init { id, out_degree, prop } => {
                w.i64(*id)?;
                w.u64(*out_degree)?;
                w.record(&self.input_vertex, prop)?;
            }
            Request::Empty => {}
            Request::Merge { m1, m2 } => {
                w.record(&s.message, m1)?;
                w.record(&s.message, m2)?;
            }
            Request::Compute { iter, prop, msg } => {
                w.u32(*iter)?;
                w.record(&s.vertex, prop)?;
                w.record(&s.message, msg)?;
            }
            Request::Emit {
                src,
                dst,
                src_prop,
                edge_prop,
            } => {
                w.i64(*src)?;
                w.i64(*dst)?;
                w.record(&s.vertex, src_prop)?;
                w.record(&s.edge, edge_prop)?;
            }
        }
        Ok(w.len())
    }

    pub fn decode_request(&self, method: MethodIndex, bytes: &[u8]) -> Result<Request<'static>, IpcError> {
        let s = &self.schemas;
        let mut r = Reader::new(bytes);
        let req = match method {
            MethodIndex::InitVertexAttr => Request::Init {
                id: r.i64()?,
                out_degree: r.u64()?,
                prop: Cow::Owned(r.record(&self.input_vertex)?),
            },
            MethodIndex::EmptyMessage => Request::Empty,
            MethodIndex::MergeMessage => Request::Merge {
                m1: Cow::Owned(r.record(&s.message)?),
                m2: Cow::Owned(r.record(&s.message)?),
            },
            MethodIndex::VertexCompute => Request::Compute {
                iter: r.u32()?,
                prop: Cow::Owned(r.record(&s.vertex)?),
                msg: Cow::Owned(r.record(&s.message)?),
            },
            MethodIndex::EmitMessage => Request::Emit {
                src: r.i64()?,
                dst: r.i64()?,
                src_prop: Cow::Owned(r.record(&s.vertex)?),
                edge_prop: Cow::Owned(r.record(&s.edge)?),
            },
            MethodIndex::Handshake | MethodIndex::Shutdown => {
                return Err(IpcError::Protocol(format!("{method} is not a program method")))
            }
        };
        r.finish()?;
        Ok(req)
    }

    /// Encodes the response to `method` into a fresh buffer.
    pub fn response_bytes(&self, method: MethodIndex, resp: &Response) -> Result<Vec<u8>, IpcError> {
        let s = &self.schemas;
        let len = |sc: &Schema, r: &Record| encoded_len(sc, r).map_err(IpcError::Record);
        let (size, schema) = match (method, resp) {
            (MethodIndex::InitVertexAttr, Response::Record(r)) => (len(&s.vertex, r)?, &s.vertex),
            (MethodIndex::EmptyMessage | MethodIndex::MergeMessage, Response::Record(r)) => {
                (len(&s.message, r)?, &s.message)
            }
            (MethodIndex::VertexCompute, Response::Compute(r, _)) => (len(&s.vertex, r)? + 1, &s.vertex),
            (MethodIndex::EmitMessage, Response::Emit(m)) => (
                1 + m.as_ref().map(|r| len(&s.message, r)).transpose()?.unwrap_or(0),
                &s.message,
            ),
            _ => return Err(IpcError::Protocol(format!("response kind does not fit {method}"))),
        };
        let mut buf = vec![0u8; size];
        let mut w = Writer::new(&mut buf);
        match resp {
            Response::Record(r) => w.record(schema, r)?,
            Response::Compute(r, active) => {
                w.record(&s.vertex, r)?;
                w.u8(u8::from(*active))?;
            }
            Response::Emit(None) => w.u8(0)?,
            Response::Emit(Some(m)) => {
                w.u8(1)?;
                w.record(&s.message, m)?;
            }
        }
        Ok(buf)
    }

    pub fn decode_response(&self, method: MethodIndex, bytes: &[u8]) -> Result<Response, IpcError> {
        let s = &self.schemas;
        let mut r = Reader::new(bytes);
        let resp = match method {
            MethodIndex::InitVertexAttr => Response::Record(r.record(&s.vertex)?),
            MethodIndex::EmptyMessage | MethodIndex::MergeMessage => Response::Record(r.record(&s.message)?),
            MethodIndex::VertexCompute => {
                let rec = r.record(&s.vertex)?;
                Response::Compute(rec, r.bool_flag()?)
            }
            MethodIndex::EmitMessage => {
                if r.bool_flag()? {
                    Response::Emit(Some(r.record(&s.message)?))
                } else {
                    Response::Emit(None)
                }
            }
            MethodIndex::Handshake | MethodIndex::Shutdown => {
                return Err(IpcError::Protocol(format!("{method} has no program response")))
            }
        };
        r.finish()?;
        Ok(resp)
    }
}
