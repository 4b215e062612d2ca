//! Binary envelope for federation messages. The byte layout is documented in
//! `docs/protocol.md`.

use std::io::{Read, Write};

use flate2::read::DeflateDecoder;
use flate2::write::DeflateEncoder;
use flate2::Compression;
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"FGFL";
pub const PROTOCOL_VERSION: u16 = 1;
pub const FLAG_DEFLATE: u8 = 0x01;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum WireError {
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported protocol version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("checksum mismatch: header {expected:#010x}, body {actual:#010x}")]
    Checksum { expected: u32, actual: u32 },
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("decompression failed: {0}")]
    Decompress(String),
    #[error("message {message_id} is missing chunks {missing:?}")]
    MissingChunks { message_id: String, missing: Vec<u32> },
    #[error("inconsistent chunks: {0}")]
    InconsistentChunks(String),
}

impl WireError {
    /// Stable numeric code for logs and exit paths.
    pub fn code(&self) -> u16 {
        match self {
            WireError::BadMagic => 10,
            WireError::UnsupportedVersion(_) => 11,
            WireError::UnknownKind(_) => 12,
            WireError::Truncated { .. } => 13,
            WireError::Checksum { .. } => 14,
            WireError::Malformed(_) => 15,
            WireError::Decompress(_) => 16,
            WireError::MissingChunks { .. } => 20,
            WireError::InconsistentChunks(_) => 21,
        }
    }
}

pub type Result<T> = std::result::Result<T, WireError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MessageKind {
    Join = 1,
    JoinAck = 2,
    GlobalModel = 3,
    LocalUpdate = 4,
    RoundAbort = 5,
    ExperimentEnd = 6,
}

impl MessageKind {
    pub fn from_u8(b: u8) -> Result<Self> {
        Ok(match b {
            1 => MessageKind::Join,
            2 => MessageKind::JoinAck,
            3 => MessageKind::GlobalModel,
            4 => MessageKind::LocalUpdate,
            5 => MessageKind::RoundAbort,
            6 => MessageKind::ExperimentEnd,
            other => return Err(WireError::UnknownKind(other)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AlgorithmTag {
    FedAvg = 1,
    Scaffold = 2,
}

impl AlgorithmTag {
    fn from_u8(b: u8) -> Result<Self> {
        match b {
            1 => Ok(AlgorithmTag::FedAvg),
            2 => Ok(AlgorithmTag::Scaffold),
            other => Err(WireError::Malformed(format!("unknown algorithm tag {other}"))),
        }
    }
}

/// Flat parameter vector (and SCAFFOLD control variate) as sent on the wire.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPayload {
    pub feature_scheme: u8,
    pub algorithm: AlgorithmTag,
    pub params: Vec<f32>,
    pub control: Option<Vec<f32>>,
}

impl ModelPayload {
    pub fn from_f64(feature_scheme: u8, algorithm: AlgorithmTag, params: &[f64], control: Option<&[f64]>) -> Self {
        Self {
            feature_scheme,
            algorithm,
            params: params.iter().map(|&x| x as f32).collect(),
            control: control.map(|c| c.iter().map(|&x| x as f32).collect()),
        }
    }

    pub fn params_f64(&self) -> Vec<f64> {
        self.params.iter().map(|&x| f64::from(x)).collect()
    }

    pub fn control_f64(&self) -> Option<Vec<f64>> {
        self.control.as_ref().map(|c| c.iter().map(|&x| f64::from(x)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Join {
    pub nonce: u64,
    pub n_samples: u32,
    pub feature_scheme: u8,
    pub param_count: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JoinAck {
    pub client: String,
    pub accepted: bool,
    pub session: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub session: u64,
    pub attempt: u8,
    pub round_seed: u64,
    pub local_lr: f64,
    /// 0 means one pass over the local shard.
    pub local_steps: u32,
    pub participants: Vec<String>,
    pub model: ModelPayload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdateMsg {
    pub session: u64,
    pub attempt: u8,
    pub n_samples: u32,
    pub local_steps: u32,
    pub model: ModelPayload,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundAbort {
    pub attempt: u8,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndReason {
    Completed = 0,
    EarlyStopped = 1,
    Aborted = 2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentEnd {
    pub reason: EndReason,
    pub best_round: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Join(Join),
    JoinAck(JoinAck),
    GlobalModel(GlobalModel),
    LocalUpdate(LocalUpdateMsg),
    RoundAbort(RoundAbort),
    ExperimentEnd(ExperimentEnd),
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::Join(_) => MessageKind::Join,
            Body::JoinAck(_) => MessageKind::JoinAck,
            Body::GlobalModel(_) => MessageKind::GlobalModel,
            Body::LocalUpdate(_) => MessageKind::LocalUpdate,
            Body::RoundAbort(_) => MessageKind::RoundAbort,
            Body::ExperimentEnd(_) => MessageKind::ExperimentEnd,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationMessage {
    pub experiment: String,
    pub round: u32,
    pub sender: String,
    pub body: Body,
}

impl FederationMessage {
    pub fn kind(&self) -> MessageKind {
        self.body.kind()
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        let b = s.as_bytes();
        assert!(b.len() <= u16::MAX as usize, "string field longer than 65535 bytes");
        self.u16(b.len() as u16);
        self.0.extend_from_slice(b);
    }
    fn f32s(&mut self, v: &[f32]) {
        self.u32(v.len() as u32);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(WireError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| WireError::Malformed("string field is not UTF-8".into()))
    }
    fn f32s(&mut self) -> Result<Vec<f32>> {
        let n = self.u32()? as usize;
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| WireError::Malformed("vector length overflow".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => Err(WireError::Malformed(format!("boolean byte {b}"))),
        }
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(WireError::Malformed(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

fn write_model(w: &mut Writer, m: &ModelPayload) {
    w.u8(m.feature_scheme);
    w.u8(m.algorithm as u8);
    w.f32s(&m.params);
    match &m.control {
        Some(c) => {
            w.u8(1);
            w.f32s(c);
        }
        None => w.u8(0),
    }
}

fn read_model(r: &mut Reader<'_>) -> Result<ModelPayload> {
    let feature_scheme = r.u8()?;
    let algorithm = AlgorithmTag::from_u8(r.u8()?)?;
    let params = r.f32s()?;
    let control = if r.bool()? { Some(r.f32s()?) } else { None };
    if control.is_some() != (algorithm == AlgorithmTag::Scaffold) {
        return Err(WireError::Malformed("control variate must be present exactly for scaffold".into()));
    }
    if let Some(c) = &control {
        if c.len() != params.len() {
            return Err(WireError::Malformed("control variate length differs from parameters".into()));
        }
    }
    Ok(ModelPayload {
        feature_scheme,
        algorithm,
        params,
        control,
    })
}

fn encode_body(body: &Body) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    match body {
        Body::Join(j) => {
            w.u64(j.nonce);
            w.u32(j.n_samples);
            w.u8(j.feature_scheme);
            w.u32(j.param_count);
        }
        Body::JoinAck(a) => {
            w.str(&a.client);
            w.u8(a.accepted as u8);
            w.u64(a.session);
            w.str(&a.reason);
        }
        Body::GlobalModel(g) => {
            w.u64(g.session);
            w.u8(g.attempt);
            w.u64(g.round_seed);
            w.f64(g.local_lr);
            w.u32(g.local_steps);
            w.u16(g.participants.len() as u16);
            for p in &g.participants {
                w.str(p);
            }
            write_model(&mut w, &g.model);
        }
        Body::LocalUpdate(u) => {
            w.u64(u.session);
            w.u8(u.attempt);
            w.u32(u.n_samples);
            w.u32(u.local_steps);
            write_model(&mut w, &u.model);
        }
        Body::RoundAbort(a) => {
            w.u8(a.attempt);
            w.str(&a.reason);
        }
        Body::ExperimentEnd(e) => {
            w.u8(e.reason as u8);
            w.u32(e.best_round);
        }
    }
    w.0
}

fn decode_body(kind: MessageKind, bytes: &[u8]) -> Result<Body> {
    let mut r = Reader::new(bytes);
    let body = match kind {
        MessageKind::Join => Body::Join(Join {
            nonce: r.u64()?,
            n_samples: r.u32()?,
            feature_scheme: r.u8()?,
            param_count: r.u32()?,
        }),
        MessageKind::JoinAck => Body::JoinAck(JoinAck {
            client: r.str()?,
            accepted: r.bool()?,
            session: r.u64()?,
            reason: r.str()?,
        }),
        MessageKind::GlobalModel => {
            let session = r.u64()?;
            let attempt = r.u8()?;
            let round_seed = r.u64()?;
            let local_lr = r.f64()?;
            let local_steps = r.u32()?;
            let n = r.u16()? as usize;
            let participants = (0..n).map(|_| r.str()).collect::<Result<_>>()?;
            Body::GlobalModel(GlobalModel {
                session,
                attempt,
                round_seed,
                local_lr,
                local_steps,
                participants,
                model: read_model(&mut r)?,
            })
        }
        MessageKind::LocalUpdate => Body::LocalUpdate(LocalUpdateMsg {
            session: r.u64()?,
            attempt: r.u8()?,
            n_samples: r.u32()?,
            local_steps: r.u32()?,
            model: read_model(&mut r)?,
        }),
        MessageKind::RoundAbort => Body::RoundAbort(RoundAbort {
            attempt: r.u8()?,
            reason: r.str()?,
        }),
        MessageKind::ExperimentEnd => Body::ExperimentEnd(ExperimentEnd {
            reason: match r.u8()? {
                0 => EndReason::Completed,
                1 => EndReason::EarlyStopped,
                2 => EndReason::Aborted,
                b => return Err(WireError::Malformed(format!("unknown end reason {b}"))),
            },
            best_round: r.u32()?,
        }),
    };
    r.finish()?;
    Ok(body)
}

/// Serialise a message. With `compress`, the body is deflated and flag bit 0 is set.
pub fn encode_with(msg: &FederationMessage, compress: bool) -> Vec<u8> {
    let mut body = encode_body(&msg.body);
    if compress {
        let mut enc = DeflateEncoder::new(Vec::new(), Compression::default());
        enc.write_all(&body).expect("in-memory deflate");
        body = enc.finish().expect("in-memory deflate");
    }
    let mut w = Writer(Vec::with_capacity(body.len() + 64));
    w.0.extend_from_slice(MAGIC);
    w.u16(PROTOCOL_VERSION);
    w.u8(msg.kind() as u8);
    w.u8(if compress { FLAG_DEFLATE } else { 0 });
    w.u32(msg.round);
    w.str(&msg.experiment);
    w.str(&msg.sender);
    w.u32(body.len() as u32);
    w.u32(crc32fast::hash(&body));
    w.0.extend_from_slice(&body);
    w.0
}

pub fn encode(msg: &FederationMessage) -> Vec<u8> {
    encode_with(msg, false)
}

pub fn decode(bytes: &[u8]) -> Result<FederationMessage> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != MAGIC {
        return Err(WireError::BadMagic);
    }
    let version = r.u16()?;
    if version != PROTOCOL_VERSION {
        return Err(WireError::UnsupportedVersion(version));
    }
    let kind = MessageKind::from_u8(r.u8()?)?;
    let flags = r.u8()?;
    if flags & !FLAG_DEFLATE != 0 {
        return Err(WireError::Malformed(format!("unknown flag bits {flags:#04x}")));
    }
    let round = r.u32()?;
    let experiment = r.str()?;
    let sender = r.str()?;
    let len = r.u32()? as usize;
    let expected = r.u32()?;
    let body = r.take(len)?;
    r.finish()?;
    let actual = crc32fast::hash(body);
    if actual != expected {
        return Err(WireError::Checksum { expected, actual });
    }
    let body = if flags & FLAG_DEFLATE != 0 {
        let mut out = Vec::new();
        DeflateDecoder::new(body)
            .read_to_end(&mut out)
            .map_err(|e| WireError::Decompress(e.to_string()))?;
        decode_body(kind, &out)?
    } else {
        decode_body(kind, body)?
    };
    Ok(FederationMessage {
        experiment,
        round,
        sender,
        body,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update(params: Vec<f32>) -> FederationMessage {
        FederationMessage {
            experiment: "exp1".into(),
            round: 3,
            sender: "hosp-a".into(),
            body: Body::LocalUpdate(LocalUpdateMsg {
                session: 9,
                attempt: 0,
                n_samples: 12,
                local_steps: 6,
                model: ModelPayload {
                    feature_scheme: 2,
                    algorithm: AlgorithmTag::FedAvg,
                    params,
                    control: None,
                },
            }),
        }
    }

    #[test]
    fn float_bytes_are_little_endian_ieee() {
        let bytes = encode(&update(vec![1.0, -2.5]));
        let hay = bytes.windows(8).any(|w| w == [0x00, 0x00, 0x80, 0x3f, 0x00, 0x00, 0x20, 0xc0]);
        assert!(hay);
    }

    #[test]
    fn empty_vector_round_trip() {
        let m = update(Vec::new());
        assert_eq!(decode(&encode(&m)).unwrap(), m);
        assert_eq!(decode(&encode_with(&m, true)).unwrap(), m);
    }

    #[test]
    fn flipped_body_byte_is_a_checksum_error() {
        let mut b = encode(&update(vec![1.0, 2.0, 3.0]));
        let last = b.len() - 1;
        b[last] ^= 0x40;
        assert!(matches!(decode(&b), Err(WireError::Checksum { .. })));
    }

    #[test]
    fn version_checked_before_body() {
        let mut b = encode(&update(vec![1.0]));
        b[4] = 9;
        let n = b.len();
        b[n - 1] ^= 1;
        assert_eq!(decode(&b), Err(WireError::UnsupportedVersion(9)));
        let mut b = encode(&update(vec![1.0]));
        b[6] = 77;
        assert_eq!(decode(&b), Err(WireError::UnknownKind(77)));
        let b = encode(&update(vec![1.0]));
        assert!(matches!(decode(&b[..b.len() - 2]), Err(WireError::Truncated { .. })));
    }

    #[test]
    fn control_presence_tied_to_algorithm() {
        let mut m = update(vec![1.0]);
        if let Body::LocalUpdate(u) = &mut m.body {
            u.model.algorithm = AlgorithmTag::Scaffold;
        }
        assert!(matches!(decode(&encode(&m)), Err(WireError::Malformed(_))));
    }
}
