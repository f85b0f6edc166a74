use std::io::Read;

use super::tensor::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SPLZ";
pub const VERSION: u8 = 0x01;
pub const FRAME_HEADER_LEN: usize = 18;
pub const DEFAULT_MAX_PAYLOAD: u32 = 256 * 1024 * 1024;

/// Message types and their wire codes.
///
/// The four boundary messages of a double-split step follow the client/server
/// interaction order: `ActAB` (A's output to the server), `ActBC` (B's output
/// pushed to C), `GradCB` (dL/d(B output) from C), `GradBA` (dL/d(A output)
/// back to A). `Labels` is only used in single-split mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0x01,
    PlanAck = 0x02,
    ActAB = 0x10,
    ActBC = 0x11,
    GradCB = 0x12,
    GradBA = 0x13,
    Labels = 0x14,
    StepDone = 0x20,
    Bye = 0x21,
    Error = 0x7F,
}

impl MsgType {
    pub const ALL: [MsgType; 10] = [
        MsgType::Hello,
        MsgType::PlanAck,
        MsgType::ActAB,
        MsgType::ActBC,
        MsgType::GradCB,
        MsgType::GradBA,
        MsgType::Labels,
        MsgType::StepDone,
        MsgType::Bye,
        MsgType::Error,
    ];

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == code)
    }

    /// Boundary activations and gradients.
    pub fn is_boundary(self) -> bool {
        matches!(self, MsgType::ActAB | MsgType::ActBC | MsgType::GradCB | MsgType::GradBA)
    }

    pub fn carries_tensor(self) -> bool {
        self.is_boundary() || self == MsgType::Labels
    }

    /// Control messages that may carry a non-tensor payload.
    fn carries_control(self) -> bool {
        matches!(self, MsgType::Hello | MsgType::Error)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Empty,
    Tensor(Tensor),
    /// Opaque control bytes (HELLO parameters, ERROR text).
    Control(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub kind: MsgType,
    pub step_id: u64,
    pub payload: Payload,
}

impl WireMessage {
    pub fn control(kind: MsgType, step_id: u64) -> Self {
        Self {
            kind,
            step_id,
            payload: Payload::Empty,
        }
    }

    pub fn tensor(kind: MsgType, step_id: u64, t: Tensor) -> Self {
        Self {
            kind,
            step_id,
            payload: Payload::Tensor(t),
        }
    }

    pub fn error(step_id: u64, text: &str) -> Self {
        Self {
            kind: MsgType::Error,
            step_id,
            payload: Payload::Control(text.as_bytes().to_vec()),
        }
    }

    pub fn into_tensor(self) -> Result<Tensor> {
        match self.payload {
            Payload::Tensor(t) => Ok(t),
            _ => Err(Error::Wire(format!("{:?} frame carries no tensor", self.kind))),
        }
    }

    pub(crate) fn validate(&self) -> Result<()> {
        let ok = match &self.payload {
            Payload::Tensor(_) => self.kind.carries_tensor(),
            Payload::Control(_) => self.kind.carries_control(),
            Payload::Empty => !self.kind.carries_tensor(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Wire(format!("{:?} frame cannot carry this payload", self.kind)))
        }
    }
}

pub fn frame_message(m: &WireMessage) -> Result<Vec<u8>> {
    m.validate()?;
    let payload = match &m.payload {
        Payload::Empty => Vec::new(),
        Payload::Tensor(t) => encode_tensor(t)?,
        Payload::Control(b) => b.clone(),
    };
    let len = u32::try_from(payload.len())
        .map_err(|_| Error::Wire(format!("payload of {} bytes exceeds u32", payload.len())))?;
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + payload.len());
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(m.kind as u8);
    out.extend_from_slice(&m.step_id.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&payload);
    Ok(out)
}

fn parse_header(h: &[u8; FRAME_HEADER_LEN], max_payload: u32) -> Result<(MsgType, u64, usize)> {
    if h[..4] != MAGIC {
        return Err(Error::Wire(format!("bad magic {:02x?}", &h[..4])));
    }
    if h[4] != VERSION {
        return Err(Error::Wire(format!("unsupported version {:#04x}", h[4])));
    }
    let kind = MsgType::from_code(h[5]).ok_or_else(|| Error::Wire(format!("unknown message type {:#04x}", h[5])))?;
    let step_id = u64::from_le_bytes(h[6..14].try_into().expect("8 bytes"));
    let len = u32::from_le_bytes(h[14..18].try_into().expect("4 bytes"));
    if len > max_payload {
        return Err(Error::Wire(format!(
            "payload length {len} exceeds the configured maximum {max_payload}"
        )));
    }
    Ok((kind, step_id, len as usize))
}

fn build(kind: MsgType, step_id: u64, payload: &[u8]) -> Result<WireMessage> {
    let payload = if kind.carries_tensor() {
        Payload::Tensor(decode_tensor(payload)?)
    } else if payload.is_empty() {
        Payload::Empty
    } else if kind.carries_control() {
        Payload::Control(payload.to_vec())
    } else {
        return Err(Error::Wire(format!("{kind:?} frame must not carry a payload")));
    };
    Ok(WireMessage { kind, step_id, payload })
}

/// Parses one frame from the front of `buf`, returning it and the bytes consumed.
pub fn parse_message(buf: &[u8], max_payload: u32) -> Result<(WireMessage, usize)> {
    let header: &[u8; FRAME_HEADER_LEN] = buf
        .get(..FRAME_HEADER_LEN)
        .and_then(|h| h.try_into().ok())
        .ok_or_else(|| Error::Wire(format!("frame header truncated ({} bytes)", buf.len())))?;
    let (kind, step_id, len) = parse_header(header, max_payload)?;
    let end = FRAME_HEADER_LEN + len;
    let payload = buf
        .get(FRAME_HEADER_LEN..end)
        .ok_or_else(|| Error::Wire(format!("frame payload truncated: need {len} bytes")))?;
    Ok((build(kind, step_id, payload)?, end))
}

/// Reads the raw bytes of exactly one frame, validating its header. A clean
/// EOF before the first header byte reports [`Error::Disconnected`].
pub fn read_frame_bytes<R: Read + ?Sized>(r: &mut R, max_payload: u32) -> Result<Vec<u8>> {
    let mut header = [0u8; FRAME_HEADER_LEN];
    let mut got = 0;
    while got < FRAME_HEADER_LEN {
        match r.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Err(Error::Disconnected),
            Ok(0) => return Err(Error::Wire("stream ended inside a frame header".into())),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (_, _, len) = parse_header(&header, max_payload)?;
    let mut frame = vec![0u8; FRAME_HEADER_LEN + len];
    frame[..FRAME_HEADER_LEN].copy_from_slice(&header);
    r.read_exact(&mut frame[FRAME_HEADER_LEN..]).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Wire("stream ended inside a frame payload".into()),
        _ => e.into(),
    })?;
    Ok(frame)
}

/// Reads and decodes exactly one frame from a stream.
pub fn read_message<R: Read + ?Sized>(r: &mut R, max_payload: u32) -> Result<WireMessage> {
    let frame = read_frame_bytes(r, max_payload)?;
    parse_message(&frame, max_payload).map(|(m, _)| m)
}
