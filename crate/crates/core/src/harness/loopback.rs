//! In-process duplex channel with modeled transfer times.

use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use super::link::{LinkDirection, LinkModel};
use crate::error::{Error, Result};
use crate::transport::{LinkCounters, Transport};
use crate::wire::{frame_message, frame_size, parse_message, WireMessage, DEFAULT_MAX_PAYLOAD};

/// What crosses the loopback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fidelity {
    /// Messages move as 64-bit tensors, untouched. Byte counts are still those
    /// of the wire encoding.
    #[default]
    Exact64,
    /// Every message is framed to bytes and parsed again, with 32-bit payloads.
    Wire32,
}

enum Carried {
    Message(WireMessage),
    Bytes(Vec<u8>),
}

struct Delivery {
    carried: Carried,
    transfer_s: f64,
    bandwidth_s: f64,
}

pub struct LoopbackEnd {
    tx: Sender<Delivery>,
    rx: Receiver<Delivery>,
    link: LinkDirection,
    fidelity: Fidelity,
    timeout: Option<Duration>,
    counters: LinkCounters,
}

impl LoopbackEnd {
    /// Fails `recv` with a desync error instead of blocking forever.
    pub fn set_timeout(&mut self, timeout: Option<Duration>) {
        self.timeout = timeout;
    }
}

/// A connected `(client, server)` pair. Client-to-server frames use the
/// uplink model, the reverse direction the downlink. Delivery is FIFO and
/// lossless; both ends account every frame's modeled time.
pub fn loopback_transport(link: LinkModel, fidelity: Fidelity) -> (LoopbackEnd, LoopbackEnd) {
    let (to_server, from_client) = channel();
    let (to_client, from_server) = channel();
    let end = |tx, rx, link| LoopbackEnd {
        tx,
        rx,
        link,
        fidelity,
        timeout: None,
        counters: LinkCounters::default(),
    };
    (
        end(to_server, from_server, link.uplink),
        end(to_client, from_client, link.downlink),
    )
}

impl Transport for LoopbackEnd {
    fn send(&mut self, msg: WireMessage) -> Result<()> {
        let size = frame_size(&msg);
        let carried = match self.fidelity {
            Fidelity::Exact64 => {
                msg.validate()?;
                Carried::Message(msg.clone())
            }
            Fidelity::Wire32 => {
                let t0 = Instant::now();
                let bytes = frame_message(&msg)?;
                self.counters.serialize_ns += t0.elapsed().as_nanos() as u64;
                debug_assert_eq!(bytes.len() as u64, size.total());
                Carried::Bytes(bytes)
            }
        };
        let (transfer_s, bandwidth_s) = self.link.transfer_time(size.total());
        self.tx
            .send(Delivery {
                carried,
                transfer_s,
                bandwidth_s,
            })
            .map_err(|_| Error::Disconnected)?;
        self.counters.on_send(msg.kind, size);
        self.counters.transfer_s += transfer_s;
        self.counters.bandwidth_s += bandwidth_s;
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage> {
        let d = match self.timeout {
            None => self.rx.recv().map_err(|_| Error::Disconnected)?,
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => Error::Desync(format!("no frame from peer within {t:?}")),
                RecvTimeoutError::Disconnected => Error::Disconnected,
            })?,
        };
        let msg = match d.carried {
            Carried::Message(m) => m,
            Carried::Bytes(b) => {
                let t0 = Instant::now();
                let (m, _) = parse_message(&b, DEFAULT_MAX_PAYLOAD)?;
                self.counters.serialize_ns += t0.elapsed().as_nanos() as u64;
                m
            }
        };
        self.counters.on_recv(msg.kind, frame_size(&msg));
        self.counters.transfer_s += d.transfer_s;
        self.counters.bandwidth_s += d.bandwidth_s;
        Ok(msg)
    }

    fn counters(&self) -> LinkCounters {
        self.counters
    }
}
