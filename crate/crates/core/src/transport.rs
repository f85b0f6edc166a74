//! Message transports: framed byte streams (TCP) and the in-process loopback
//! in [`crate::harness::loopback`].

use serde::Serialize;
use std::io::{BufReader, BufWriter, Read, Write};
use std::net::TcpStream;
use std::time::Instant;

use crate::error::Result;
use crate::wire::{
    frame_message, frame_size, parse_message, read_frame_bytes, FrameSize, MsgType, WireMessage,
    DEFAULT_MAX_PAYLOAD,
};

/// Running totals for one connection end.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LinkCounters {
    pub frames_sent: u64,
    pub frames_received: u64,
    /// ACT/GRAD frames.
    pub boundary_frames_sent: u64,
    pub boundary_frames_received: u64,
    pub label_frames_sent: u64,
    pub label_frames_received: u64,
    /// Tensor element bytes only.
    pub payload_bytes_sent: u64,
    pub payload_bytes_received: u64,
    /// Frame headers, tensor headers and control payloads.
    pub overhead_bytes_sent: u64,
    pub overhead_bytes_received: u64,
    pub serialize_ns: u64,
    /// Seconds spent (or modeled) moving bytes.
    pub transfer_s: f64,
    /// Part of `transfer_s` proportional to bytes over bandwidth (modeled links only).
    pub bandwidth_s: f64,
}

impl LinkCounters {
    pub(crate) fn on_send(&mut self, kind: MsgType, size: FrameSize) {
        self.frames_sent += 1;
        self.boundary_frames_sent += kind.is_boundary() as u64;
        self.label_frames_sent += (kind == MsgType::Labels) as u64;
        self.payload_bytes_sent += size.tensor_payload;
        self.overhead_bytes_sent += size.overhead;
    }

    pub(crate) fn on_recv(&mut self, kind: MsgType, size: FrameSize) {
        self.frames_received += 1;
        self.boundary_frames_received += kind.is_boundary() as u64;
        self.label_frames_received += (kind == MsgType::Labels) as u64;
        self.payload_bytes_received += size.tensor_payload;
        self.overhead_bytes_received += size.overhead;
    }

    /// Counts accumulated since `earlier`.
    pub fn since(&self, earlier: &LinkCounters) -> LinkCounters {
        LinkCounters {
            frames_sent: self.frames_sent - earlier.frames_sent,
            frames_received: self.frames_received - earlier.frames_received,
            boundary_frames_sent: self.boundary_frames_sent - earlier.boundary_frames_sent,
            boundary_frames_received: self.boundary_frames_received - earlier.boundary_frames_received,
            label_frames_sent: self.label_frames_sent - earlier.label_frames_sent,
            label_frames_received: self.label_frames_received - earlier.label_frames_received,
            payload_bytes_sent: self.payload_bytes_sent - earlier.payload_bytes_sent,
            payload_bytes_received: self.payload_bytes_received - earlier.payload_bytes_received,
            overhead_bytes_sent: self.overhead_bytes_sent - earlier.overhead_bytes_sent,
            overhead_bytes_received: self.overhead_bytes_received - earlier.overhead_bytes_received,
            serialize_ns: self.serialize_ns - earlier.serialize_ns,
            transfer_s: self.transfer_s - earlier.transfer_s,
            bandwidth_s: self.bandwidth_s - earlier.bandwidth_s,
        }
    }
}

/// One end of a duplex, ordered, lossless message channel.
pub trait Transport: Send {
    fn send(&mut self, msg: WireMessage) -> Result<()>;
    fn recv(&mut self) -> Result<WireMessage>;
    fn counters(&self) -> LinkCounters;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, msg: WireMessage) -> Result<()> {
        (**self).send(msg)
    }
    fn recv(&mut self) -> Result<WireMessage> {
        (**self).recv()
    }
    fn counters(&self) -> LinkCounters {
        (**self).counters()
    }
}

/// Frames over any byte stream. Transfer time is measured wall-clock time in
/// writes and blocking reads, so on the client it also covers the peer's
/// compute while the client waits.
pub struct StreamTransport<R, W> {
    reader: R,
    writer: W,
    max_payload: u32,
    counters: LinkCounters,
}

impl<R: Read + Send, W: Write + Send> StreamTransport<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader,
            writer,
            max_payload: DEFAULT_MAX_PAYLOAD,
            counters: LinkCounters::default(),
        }
    }

    pub fn with_max_payload(mut self, max: u32) -> Self {
        self.max_payload = max;
        self
    }
}

pub type TcpTransport = StreamTransport<BufReader<TcpStream>, BufWriter<TcpStream>>;

impl TcpTransport {
    pub fn tcp(stream: TcpStream) -> Result<Self> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(StreamTransport::new(reader, BufWriter::new(stream)))
    }
}

impl<R: Read + Send, W: Write + Send> Transport for StreamTransport<R, W> {
    fn send(&mut self, msg: WireMessage) -> Result<()> {
        let t0 = Instant::now();
        let bytes = frame_message(&msg)?;
        let t1 = Instant::now();
        self.writer.write_all(&bytes)?;
        self.writer.flush()?;
        self.counters.serialize_ns += (t1 - t0).as_nanos() as u64;
        self.counters.transfer_s += t1.elapsed().as_secs_f64();
        self.counters.on_send(msg.kind, frame_size(&msg));
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage> {
        let t0 = Instant::now();
        let bytes = read_frame_bytes(&mut self.reader, self.max_payload)?;
        let t1 = Instant::now();
        let (msg, _) = parse_message(&bytes, self.max_payload)?;
        self.counters.transfer_s += (t1 - t0).as_secs_f64();
        self.counters.serialize_ns += t1.elapsed().as_nanos() as u64;
        self.counters.on_recv(msg.kind, frame_size(&msg));
        Ok(msg)
    }

    fn counters(&self) -> LinkCounters {
        self.counters
    }
}
