//! Binary trace format, version 1.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! magic        8 bytes   "HAVETR1\0"
//! version      u32       1
//! vocab        u32
//! layers       u32
//! heads        u32
//! kv_heads     u32
//! sink policy  u16
//! tokenizer    u32 byte length + UTF-8 bytes
//! step record, repeated until end of stream:
//!   step       u64
//!   |C|        u32
//!   |C| x { id u32, surface (u32 length + UTF-8), sink flag u8 }
//!   attention  f32 x layers*heads*|C|     (layer, head, position) row-major
//!   norms      f32 x layers*kv_heads*|C|  (layer, kv_head, position) row-major
//!   logits     f32 x vocab
//! ```

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::snapshot::{
    validate_snapshot, AttentionRow, ContextToken, ModelDims, StepSnapshot, ValidationReport,
    ValueNorms,
};

pub const MAGIC: [u8; 8] = *b"HAVETR1\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad magic bytes {found:?}")]
    BadMagic { found: [u8; 8] },
    #[error("unsupported trace format version {0}")]
    UnsupportedVersion(u32),
    #[error("trace truncated at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("malformed trace at byte offset {offset}: {reason}")]
    Malformed { offset: u64, reason: String },
    #[error("value too large for the trace format: {0}")]
    Overflow(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceHeader {
    pub version: u32,
    pub dims: ModelDims,
    pub sink_policy_id: u16,
    pub tokenizer: String,
}

impl TraceHeader {
    pub fn new(dims: ModelDims, sink_policy_id: u16, tokenizer: impl Into<String>) -> Self {
        Self {
            version: FORMAT_VERSION,
            dims,
            sink_policy_id,
            tokenizer: tokenizer.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub snapshots: Vec<StepSnapshot>,
}

impl TraceFile {
    pub fn new(header: TraceHeader) -> Self {
        Self {
            header,
            snapshots: Vec::new(),
        }
    }

    /// Per-step validation reports plus any ordering problem in the step
    /// sequence (reported as `(index, step)` pairs that do not increase).
    pub fn validate(&self) -> TraceValidation {
        let mut steps = Vec::with_capacity(self.snapshots.len());
        let mut non_increasing = Vec::new();
        let mut last: Option<u64> = None;
        for (i, s) in self.snapshots.iter().enumerate() {
            if let Some(prev) = last {
                if s.step <= prev {
                    non_increasing.push((i, s.step));
                }
            }
            last = Some(s.step);
            steps.push(validate_snapshot(s, &self.header.dims));
        }
        TraceValidation {
            steps,
            non_increasing,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TraceValidation {
    pub steps: Vec<ValidationReport>,
    pub non_increasing: Vec<(usize, u64)>,
}

impl TraceValidation {
    pub fn violation_count(&self) -> usize {
        self.steps.iter().map(|r| r.len()).sum::<usize>() + self.non_increasing.len()
    }

    pub fn is_valid(&self) -> bool {
        self.violation_count() == 0
    }
}

fn u32_of(value: usize, what: &'static str) -> Result<u32, TraceError> {
    u32::try_from(value).map_err(|_| TraceError::Overflow(what))
}

struct CountingWriter<W> {
    inner: W,
    written: u64,
}

impl<W: Write> CountingWriter<W> {
    fn put(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.inner.write_all(bytes)?;
        self.written += bytes.len() as u64;
        Ok(())
    }

    fn put_str(&mut self, s: &str) -> Result<(), TraceError> {
        self.put(&u32_of(s.len(), "string length")?.to_le_bytes())?;
        self.put(s.as_bytes())?;
        Ok(())
    }

    fn put_f32s(&mut self, values: &[f32]) -> io::Result<()> {
        let mut buf = Vec::with_capacity(values.len() * 4);
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.put(&buf)
    }
}

/// Serializes `trace` and returns the number of bytes written. Snapshots
/// must agree with the header dimensions.
pub fn write_trace<W: Write>(trace: &TraceFile, sink: W) -> Result<u64, TraceError> {
    let mut w = CountingWriter {
        inner: sink,
        written: 0,
    };
    let h = &trace.header;
    let dims = h.dims;
    w.put(&MAGIC)?;
    w.put(&h.version.to_le_bytes())?;
    for (value, what) in [
        (dims.vocab, "vocab"),
        (dims.layers, "layers"),
        (dims.heads, "heads"),
        (dims.kv_heads, "kv_heads"),
    ] {
        w.put(&u32_of(value, what)?.to_le_bytes())?;
    }
    w.put(&h.sink_policy_id.to_le_bytes())?;
    w.put_str(&h.tokenizer)?;

    for s in &trace.snapshots {
        let ctx = s.context.len();
        if s.attention.len() != dims.layers * dims.heads
            || s.value_norms.len() != dims.layers * dims.kv_heads
            || s.logits.len() != dims.vocab
            || s.attention.iter().any(|r| r.weights.len() != ctx)
            || s.value_norms.iter().any(|v| v.norms.len() != ctx)
        {
            return Err(TraceError::Malformed {
                offset: w.written,
                reason: format!(
                    "snapshot for step {} does not match header dimensions",
                    s.step
                ),
            });
        }
        w.put(&s.step.to_le_bytes())?;
        w.put(&u32_of(ctx, "context length")?.to_le_bytes())?;
        for tok in &s.context {
            w.put(&tok.token_id.to_le_bytes())?;
            w.put_str(&tok.surface)?;
            w.put(&[u8::from(tok.is_sink)])?;
        }
        for row in &s.attention {
            w.put_f32s(&row.weights)?;
        }
        for vn in &s.value_norms {
            w.put_f32s(&vn.norms)?;
        }
        w.put_f32s(&s.logits)?;
    }
    w.inner.flush()?;
    Ok(w.written)
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    /// Reads up to `buf.len()` bytes, returning how many arrived before EOF.
    fn fill(&mut self, buf: &mut [u8]) -> Result<usize, TraceError> {
        let mut got = 0;
        while got < buf.len() {
            match self.inner.read(&mut buf[got..]) {
                Ok(0) => break,
                Ok(n) => got += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += got as u64;
        Ok(got)
    }

    fn exact<const N: usize>(&mut self) -> Result<[u8; N], TraceError> {
        let mut buf = [0u8; N];
        if self.fill(&mut buf)? < N {
            return Err(TraceError::Truncated {
                offset: self.offset,
            });
        }
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16, TraceError> {
        Ok(u16::from_le_bytes(self.exact()?))
    }

    fn u32(&mut self) -> Result<u32, TraceError> {
        Ok(u32::from_le_bytes(self.exact()?))
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>, TraceError> {
        let mut buf = Vec::new();
        let got = (&mut self.inner).take(n as u64).read_to_end(&mut buf)?;
        self.offset += got as u64;
        if got < n {
            return Err(TraceError::Truncated {
                offset: self.offset,
            });
        }
        Ok(buf)
    }

    fn string(&mut self) -> Result<String, TraceError> {
        let len = self.u32()? as usize;
        let start = self.offset;
        let raw = self.bytes(len)?;
        String::from_utf8(raw).map_err(|e| TraceError::Malformed {
            offset: start + e.utf8_error().valid_up_to() as u64,
            reason: "invalid UTF-8".into(),
        })
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, TraceError> {
        let len = n
            .checked_mul(4)
            .ok_or(TraceError::Overflow("tensor size"))?;
        let raw = self.bytes(len)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

pub fn read_header<R: Read>(source: R) -> Result<TraceHeader, TraceError> {
    let mut r = CountingReader {
        inner: source,
        offset: 0,
    };
    read_header_from(&mut r)
}

fn read_header_from<R: Read>(r: &mut CountingReader<R>) -> Result<TraceHeader, TraceError> {
    let magic: [u8; 8] = r.exact()?;
    if magic != MAGIC {
        return Err(TraceError::BadMagic { found: magic });
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(TraceError::UnsupportedVersion(version));
    }
    let vocab = r.u32()? as usize;
    let layers = r.u32()? as usize;
    let heads = r.u32()? as usize;
    let kv_heads = r.u32()? as usize;
    let sink_policy_id = r.u16()?;
    let tokenizer = r.string()?;
    Ok(TraceHeader {
        version,
        dims: ModelDims::new(vocab, layers, heads, kv_heads),
        sink_policy_id,
        tokenizer,
    })
}

/// Parses a complete trace. Reading stops cleanly only at a record boundary;
/// any partial record is a truncation error carrying the byte offset.
pub fn read_trace<R: Read>(source: R) -> Result<TraceFile, TraceError> {
    let mut r = CountingReader {
        inner: source,
        offset: 0,
    };
    let header = read_header_from(&mut r)?;
    let dims = header.dims;
    let mut snapshots = Vec::new();

    loop {
        let mut step_buf = [0u8; 8];
        match r.fill(&mut step_buf)? {
            0 => break,
            8 => {}
            _ => {
                return Err(TraceError::Truncated { offset: r.offset });
            }
        }
        let step = u64::from_le_bytes(step_buf);
        let ctx_len = r.u32()? as usize;

        let mut context = Vec::with_capacity(ctx_len.min(1 << 16));
        for position in 0..ctx_len {
            let token_id = r.u32()?;
            let surface = r.string()?;
            let flag_offset = r.offset;
            let [flag] = r.exact::<1>()?;
            let is_sink = match flag {
                0 => false,
                1 => true,
                other => {
                    return Err(TraceError::Malformed {
                        offset: flag_offset,
                        reason: format!("sink flag {other} is not 0 or 1"),
                    })
                }
            };
            context.push(ContextToken {
                position,
                token_id,
                surface,
                is_sink,
            });
        }

        let mut attention = Vec::with_capacity(dims.layers * dims.heads);
        for layer in 0..dims.layers {
            for head in 0..dims.heads {
                attention.push(AttentionRow {
                    layer,
                    head,
                    weights: r.f32s(ctx_len)?,
                });
            }
        }
        let mut value_norms = Vec::with_capacity(dims.layers * dims.kv_heads);
        for layer in 0..dims.layers {
            for kv_head in 0..dims.kv_heads {
                value_norms.push(ValueNorms {
                    layer,
                    kv_head,
                    norms: r.f32s(ctx_len)?,
                });
            }
        }
        let logits = r.f32s(dims.vocab)?;
        snapshots.push(StepSnapshot {
            step,
            dims,
            context,
            attention,
            value_norms,
            logits,
        });
    }

    Ok(TraceFile { header, snapshots })
}

/// Plain-text sidecar duplicating the header for human inspection.
pub fn manifest(trace: &TraceFile) -> String {
    let h = &trace.header;
    format!(
        "format = HAVETR1\nversion = {}\nvocab = {}\nlayers = {}\nheads = {}\nkv_heads = {}\nsink_policy = {}\ntokenizer = {}\nsteps = {}\n",
        h.version,
        h.dims.vocab,
        h.dims.layers,
        h.dims.heads,
        h.dims.kv_heads,
        h.sink_policy_id,
        h.tokenizer,
        trace.snapshots.len()
    )
}
