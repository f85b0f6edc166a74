//! Byte-exact framing for everything exchanged between client and server.
//!
//! Frame layout (all integers little-endian):
//!
//! ```text
//! "SPLZ" | version u8 (0x01) | msg_type u8 | step_id u64 | payload_len u32 | payload
//! ```
//!
//! Tensor payloads are `dtype u8 (0x01 = f32 LE) | ndim u8 | dims u32 × ndim | elements`.

mod frame;
mod hello;
mod tensor;

pub use frame::{
    frame_message, parse_message, read_frame_bytes, read_message, MsgType, Payload, WireMessage, DEFAULT_MAX_PAYLOAD,
    FRAME_HEADER_LEN, MAGIC, VERSION,
};
pub use hello::Hello;
pub use tensor::{decode_tensor, encode_tensor, tensor_header_len, tensor_payload_len, DTYPE_F32};

/// Byte accounting for one frame, computed without encoding it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FrameSize {
    /// Tensor element bytes (4 per element).
    pub tensor_payload: u64,
    /// Frame header, tensor header and any control payload.
    pub overhead: u64,
}

impl FrameSize {
    pub fn total(&self) -> u64 {
        self.tensor_payload + self.overhead
    }
}

pub fn frame_size(msg: &WireMessage) -> FrameSize {
    let header = FRAME_HEADER_LEN as u64;
    match &msg.payload {
        Payload::Empty => FrameSize { tensor_payload: 0, overhead: header },
        Payload::Control(bytes) => FrameSize {
            tensor_payload: 0,
            overhead: header + bytes.len() as u64,
        },
        Payload::Tensor(t) => FrameSize {
            tensor_payload: tensor_payload_len(t) as u64,
            overhead: header + tensor_header_len(t) as u64,
        },
    }
}
