//! Typed records and the row codec shared by graph I/O and IPC payloads.
//!
//! A [`Schema`] is an ordered list of named scalar fields. A [`Record`] is a
//! row of values conforming to some schema. The schema itself never travels
//! with the bytes: both sides agree on it out of band.
//!
//! Row layout, fields in schema order:
//!
//! | type | bytes                                   |
//! |------|-----------------------------------------|
//! | I64  | 8, little-endian two's complement       |
//! | F64  | 8, little-endian IEEE-754 bit pattern   |
//! | BOOL | 1, `0` or `1`                           |
//! | STR  | 4-byte little-endian length, then UTF-8 |

use std::fmt;
use std::str::FromStr;

use smallvec::SmallVec;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RecordError {
    #[error("field {index} ({name}): expected {expected}, found {found}")]
    TypeMismatch {
        index: usize,
        name: String,
        expected: FieldType,
        found: FieldType,
    },
    #[error("record has {found} values but schema has {expected} fields")]
    Arity { expected: usize, found: usize },
    #[error("truncated input: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("{0} trailing bytes after record")]
    TrailingBytes(usize),
    #[error("field {index}: invalid UTF-8 in string value")]
    InvalidUtf8 { index: usize },
    #[error("field {index}: bool byte {byte:#04x} is not 0 or 1")]
    InvalidBool { index: usize, byte: u8 },
    #[error("field {index}: string of {len} bytes exceeds the 32-bit length prefix")]
    StringTooLong { index: usize, len: usize },
    #[error("output buffer too small: need {needed} bytes, have {available}")]
    BufferTooSmall { needed: usize, available: usize },
    #[error("schema: duplicate field name `{0}`")]
    DuplicateName(String),
    #[error("schema: empty field name")]
    EmptyName,
    #[error("schema: unknown type `{0}`")]
    UnknownType(String),
    #[error("schema: malformed field `{0}`, expected name:type")]
    MalformedField(String),
    #[error("cannot parse `{text}` as {ty}")]
    BadValue { text: String, ty: FieldType },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FieldType {
    I64,
    F64,
    Bool,
    Str,
}

impl FieldType {
    pub fn as_str(self) -> &'static str {
        match self {
            FieldType::I64 => "i64",
            FieldType::F64 => "f64",
            FieldType::Bool => "bool",
            FieldType::Str => "str",
        }
    }
}

impl fmt::Display for FieldType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FieldType {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "i64" => Ok(FieldType::I64),
            "f64" => Ok(FieldType::F64),
            "bool" => Ok(FieldType::Bool),
            "str" => Ok(FieldType::Str),
            _ => Err(RecordError::UnknownType(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Field {
    pub name: String,
    pub ty: FieldType,
}

/// Ordered, uniquely named list of typed fields.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Schema {
    fields: Vec<Field>,
}

impl Schema {
    pub fn empty() -> Self {
        Schema { fields: Vec::new() }
    }

    pub fn new<I, S>(fields: I) -> Result<Self, RecordError>
    where
        I: IntoIterator<Item = (S, FieldType)>,
        S: Into<String>,
    {
        let mut out: Vec<Field> = Vec::new();
        for (name, ty) in fields {
            let name = name.into();
            if name.is_empty() {
                return Err(RecordError::EmptyName);
            }
            if out.iter().any(|f| f.name == name) {
                return Err(RecordError::DuplicateName(name));
            }
            out.push(Field { name, ty });
        }
        Ok(Schema { fields: out })
    }

    /// Parses `name:type(,name:type)*`. Type tokens are case-insensitive and
    /// surrounding whitespace is ignored.
    pub fn parse(text: &str) -> Result<Self, RecordError> {
        let text = text.trim();
        if text.is_empty() {
            return Ok(Schema::empty());
        }
        let mut fields = Vec::new();
        for token in text.split(',') {
            let token = token.trim();
            let (name, ty) = token
                .split_once(':')
                .ok_or_else(|| RecordError::MalformedField(token.to_string()))?;
            fields.push((name.trim().to_string(), ty.trim().parse::<FieldType>()?));
        }
        Schema::new(fields)
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.fields.iter().position(|f| f.name == name)
    }

    pub fn field(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Checks arity and per-field types of `rec`.
    pub fn check(&self, rec: &Record) -> Result<(), RecordError> {
        if rec.len() != self.len() {
            return Err(RecordError::Arity {
                expected: self.len(),
                found: rec.len(),
            });
        }
        for (index, (field, value)) in self.fields.iter().zip(rec.values()).enumerate() {
            if value.field_type() != field.ty {
                return Err(RecordError::TypeMismatch {
                    index,
                    name: field.name.clone(),
                    expected: field.ty,
                    found: value.field_type(),
                });
            }
        }
        Ok(())
    }
}

impl fmt::Display for Schema {
    /// Writes the canonical schema text accepted by [`Schema::parse`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, field) in self.fields.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{}:{}", field.name, field.ty)?;
        }
        Ok(())
    }
}

impl FromStr for Schema {
    type Err = RecordError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Schema::parse(s)
    }
}

/// Convenience wrapper matching the operation name used by the CLI layer.
pub fn parse_schema(text: &str) -> Result<Schema, RecordError> {
    Schema::parse(text)
}

/// A scalar value. Equality on `F64` compares bit patterns, so `NaN == NaN`
/// when the payloads agree and `0.0 != -0.0`.
#[derive(Debug, Clone)]
pub enum Value {
    I64(i64),
    F64(f64),
    Bool(bool),
    Str(String),
}

impl Value {
    pub fn field_type(&self) -> FieldType {
        match self {
            Value::I64(_) => FieldType::I64,
            Value::F64(_) => FieldType::F64,
            Value::Bool(_) => FieldType::Bool,
            Value::Str(_) => FieldType::Str,
        }
    }

    pub fn as_i64(&self) -> Option<i64> {
        match *self {
            Value::I64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match *self {
            Value::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match *self {
            Value::Bool(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Value::Str(v) => Some(v),
            _ => None,
        }
    }

    fn encoded_len(&self) -> usize {
        match self {
            Value::I64(_) | Value::F64(_) => 8,
            Value::Bool(_) => 1,
            Value::Str(s) => 4 + s.len(),
        }
    }
}

impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::I64(a), Value::I64(b)) => a == b,
            (Value::F64(a), Value::F64(b)) => a.to_bits() == b.to_bits(),
            (Value::Bool(a), Value::Bool(b)) => a == b,
            (Value::Str(a), Value::Str(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

impl From<i64> for Value {
    fn from(v: i64) -> Self {
        Value::I64(v)
    }
}

impl From<f64> for Value {
    fn from(v: f64) -> Self {
        Value::F64(v)
    }
}

impl From<bool> for Value {
    fn from(v: bool) -> Self {
        Value::Bool(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Str(v.to_string())
    }
}

impl From<String> for Value {
    fn from(v: String) -> Self {
        Value::Str(v)
    }
}

/// Most records in practice carry one or two fields; keep those inline.
type Values = SmallVec<[Value; 2]>;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Record {
    values: Values,
}

impl Record {
    pub fn new(values: impl IntoIterator<Item = Value>) -> Self {
        Record {
            values: values.into_iter().collect(),
        }
    }

    pub fn empty() -> Self {
        Record {
            values: SmallVec::new(),
        }
    }

    pub fn values(&self) -> &[Value] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Value] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<&Value> {
        self.values.get(index)
    }

    pub fn push(&mut self, value: Value) {
        self.values.push(value);
    }

    /// Keeps the values at `indices`, in that order.
    pub fn project(&self, indices: &[usize]) -> Record {
        Record::new(indices.iter().map(|&i| self.values[i].clone()))
    }
}

impl FromIterator<Value> for Record {
    fn from_iter<T: IntoIterator<Item = Value>>(iter: T) -> Self {
        Record::new(iter)
    }
}

impl From<Vec<Value>> for Record {
    fn from(values: Vec<Value>) -> Self {
        Record::new(values)
    }
}

/// Serialized length of `rec` under `schema`; fails if `rec` does not conform.
pub fn encoded_len(schema: &Schema, rec: &Record) -> Result<usize, RecordError> {
    schema.check(rec)?;
    Ok(rec.values().iter().map(Value::encoded_len).sum())
}

pub fn serialize_record(schema: &Schema, rec: &Record) -> Result<Vec<u8>, RecordError> {
    let len = encoded_len(schema, rec)?;
    let mut out = vec![0u8; len];
    write_values(rec, &mut out)?;
    Ok(out)
}

/// Appends the serialized record to `out`.
pub fn serialize_record_to_vec(
    schema: &Schema,
    rec: &Record,
    out: &mut Vec<u8>,
) -> Result<(), RecordError> {
    let len = encoded_len(schema, rec)?;
    let start = out.len();
    out.resize(start + len, 0);
    write_values(rec, &mut out[start..])?;
    Ok(())
}

/// Serializes directly into `out` and returns the number of bytes written.
pub fn serialize_record_into(
    schema: &Schema,
    rec: &Record,
    out: &mut [u8],
) -> Result<usize, RecordError> {
    let len = encoded_len(schema, rec)?;
    if len > out.len() {
        return Err(RecordError::BufferTooSmall {
            needed: len,
            available: out.len(),
        });
    }
    write_values(rec, &mut out[..len])
}

fn write_values(rec: &Record, out: &mut [u8]) -> Result<usize, RecordError> {
    let mut pos = 0;
    for (index, value) in rec.values().iter().enumerate() {
        match value {
            Value::I64(v) => {
                out[pos..pos + 8].copy_from_slice(&v.to_le_bytes());
                pos += 8;
            }
            Value::F64(v) => {
                out[pos..pos + 8].copy_from_slice(&v.to_bits().to_le_bytes());
                pos += 8;
            }
            Value::Bool(v) => {
                out[pos] = u8::from(*v);
                pos += 1;
            }
            Value::Str(s) => {
                let len = u32::try_from(s.len())
                    .map_err(|_| RecordError::StringTooLong { index, len: s.len() })?;
                out[pos..pos + 4].copy_from_slice(&len.to_le_bytes());
                pos += 4;
                out[pos..pos + s.len()].copy_from_slice(s.as_bytes());
                pos += s.len();
            }
        }
    }
    Ok(pos)
}

/// Decodes a record that must occupy all of `bytes`.
pub fn deserialize_record(schema: &Schema, bytes: &[u8]) -> Result<Record, RecordError> {
    let (rec, used) = decode_record_prefix(schema, bytes)?;
    if used != bytes.len() {
        return Err(RecordError::TrailingBytes(bytes.len() - used));
    }
    Ok(rec)
}

/// Decodes one record from the front of `bytes`, returning it with the number
/// of bytes consumed. Used for frames that carry several records back to back.
pub fn decode_record_prefix(schema: &Schema, bytes: &[u8]) -> Result<(Record, usize), RecordError> {
    let mut pos = 0usize;
    let mut values = Values::with_capacity(schema.len());
    for (index, field) in schema.fields().iter().enumerate() {
        let value = match field.ty {
            FieldType::I64 => Value::I64(i64::from_le_bytes(take::<8>(bytes, pos)?)),
            FieldType::F64 => Value::F64(f64::from_bits(u64::from_le_bytes(take::<8>(bytes, pos)?))),
            FieldType::Bool => {
                let [byte] = take::<1>(bytes, pos)?;
                match byte {
                    0 => Value::Bool(false),
                    1 => Value::Bool(true),
                    _ => return Err(RecordError::InvalidBool { index, byte }),
                }
            }
            FieldType::Str => {
                let len = u32::from_le_bytes(take::<4>(bytes, pos)?) as usize;
                let start = pos + 4;
                let raw = bytes.get(start..start + len).ok_or(RecordError::Truncated {
                    offset: start,
                    needed: len,
                    available: bytes.len().saturating_sub(start),
                })?;
                let s = std::str::from_utf8(raw).map_err(|_| RecordError::InvalidUtf8 { index })?;
                pos = start + len;
                values.push(Value::Str(s.to_string()));
                continue;
            }
        };
        pos += match field.ty {
            FieldType::Bool => 1,
            _ => 8,
        };
        values.push(value);
    }
    Ok((Record { values }, pos))
}

fn take<const N: usize>(bytes: &[u8], pos: usize) -> Result<[u8; N], RecordError> {
    bytes
        .get(pos..pos + N)
        .map(|s| s.try_into().expect("slice length checked"))
        .ok_or(RecordError::Truncated {
            offset: pos,
            needed: N,
            available: bytes.len().saturating_sub(pos),
        })
}

/// Formats `v` with up to 17 significant digits, trailing zeros removed, in
/// the style of C's `%.17g`. Non-finite values print as `inf`, `-inf`, `nan`.
pub fn format_f64(v: f64) -> String {
    if v.is_nan() {
        return "nan".to_string();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    if v == 0.0 {
        return if v.is_sign_negative() { "-0" } else { "0" }.to_string();
    }
    let sci = format!("{:.16e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(|c| c.is_ascii_digit()).collect();
    let digits = digits.trim_end_matches('0');
    let digits = if digits.is_empty() { "0" } else { digits };

    let mut out = String::with_capacity(24);
    if negative {
        out.push('-');
    }
    if !(-4..17).contains(&exp) {
        out.push_str(&digits[..1]);
        if digits.len() > 1 {
            out.push('.');
            out.push_str(&digits[1..]);
        }
        out.push('e');
        out.push_str(&exp.to_string());
    } else if exp < 0 {
        out.push_str("0.");
        for _ in 0..(-exp - 1) {
            out.push('0');
        }
        out.push_str(digits);
    } else {
        let int_len = exp as usize + 1;
        if digits.len() <= int_len {
            out.push_str(digits);
            for _ in digits.len()..int_len {
                out.push('0');
            }
        } else {
            out.push_str(&digits[..int_len]);
            out.push('.');
            out.push_str(&digits[int_len..]);
        }
    }
    out
}

pub fn parse_f64(text: &str) -> Option<f64> {
    match text {
        "inf" | "+inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        "nan" => Some(f64::NAN),
        _ => text.parse().ok(),
    }
}

/// Text form of a single value as used in tab-separated graph files.
/// Strings escape backslash, tab, CR and LF.
pub fn format_value(value: &Value) -> String {
    match value {
        Value::I64(v) => v.to_string(),
        Value::F64(v) => format_f64(*v),
        Value::Bool(v) => v.to_string(),
        Value::Str(s) => {
            let mut out = String::with_capacity(s.len());
            for c in s.chars() {
                match c {
                    '\\' => out.push_str("\\\\"),
                    '\t' => out.push_str("\\t"),
                    '\n' => out.push_str("\\n"),
                    '\r' => out.push_str("\\r"),
                    c => out.push(c),
                }
            }
            out
        }
    }
}

pub fn parse_value(text: &str, ty: FieldType) -> Result<Value, RecordError> {
    let bad = || RecordError::BadValue {
        text: text.to_string(),
        ty,
    };
    match ty {
        FieldType::I64 => text.parse().map(Value::I64).map_err(|_| bad()),
        FieldType::F64 => parse_f64(text).map(Value::F64).ok_or_else(bad),
        FieldType::Bool => match text {
            "true" | "1" => Ok(Value::Bool(true)),
            "false" | "0" => Ok(Value::Bool(false)),
            _ => Err(bad()),
        },
        FieldType::Str => {
            let mut out = String::with_capacity(text.len());
            let mut chars = text.chars();
            while let Some(c) = chars.next() {
                if c != '\\' {
                    out.push(c);
                    continue;
                }
                match chars.next() {
                    Some('\\') => out.push('\\'),
                    Some('t') => out.push('\t'),
                    Some('n') => out.push('\n'),
                    Some('r') => out.push('\r'),
                    _ => return Err(bad()),
                }
            }
            Ok(Value::Str(out))
        }
    }
}
