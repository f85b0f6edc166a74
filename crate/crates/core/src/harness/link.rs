use serde::Serialize;

use crate::error::{Error, Result};

/// Latency and bandwidth of one direction of a link.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkDirection {
    pub latency_s: f64,
    /// Bytes per second; `f64::INFINITY` for a free link.
    pub bytes_per_s: f64,
}

impl LinkDirection {
    /// `(total, bandwidth part)` in seconds for a frame of `bytes`.
    pub fn transfer_time(&self, bytes: u64) -> (f64, f64) {
        let bw = bytes as f64 / self.bytes_per_s;
        (self.latency_s + bw, bw)
    }
}

/// Deterministic link model: each frame costs `latency + bytes / bandwidth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LinkModel {
    /// Client to server.
    pub uplink: LinkDirection,
    /// Server to client.
    pub downlink: LinkDirection,
}

impl LinkModel {
    pub fn symmetric(latency_s: f64, bytes_per_s: f64) -> Result<Self> {
        let d = Self::direction(latency_s, bytes_per_s)?;
        Ok(Self { uplink: d, downlink: d })
    }

    pub fn asymmetric(up: (f64, f64), down: (f64, f64)) -> Result<Self> {
        Ok(Self {
            uplink: Self::direction(up.0, up.1)?,
            downlink: Self::direction(down.0, down.1)?,
        })
    }

    fn direction(latency_s: f64, bytes_per_s: f64) -> Result<LinkDirection> {
        if !(latency_s >= 0.0 && latency_s.is_finite()) {
            return Err(Error::Config(format!("latency must be finite and non-negative, got {latency_s}")));
        }
        if bytes_per_s.is_nan() || bytes_per_s <= 0.0 {
            return Err(Error::Config(format!("bandwidth must be positive, got {bytes_per_s}")));
        }
        Ok(LinkDirection { latency_s, bytes_per_s })
    }

    /// Zero latency, infinite bandwidth.
    pub fn ideal() -> Self {
        let d = LinkDirection {
            latency_s: 0.0,
            bytes_per_s: f64::INFINITY,
        };
        Self { uplink: d, downlink: d }
    }

    /// From milliseconds and megabits per second (`mbps <= 0` means unlimited).
    pub fn from_ms_mbps(latency_ms: f64, mbps: f64) -> Result<Self> {
        let bytes_per_s = if mbps > 0.0 { mbps * 1e6 / 8.0 } else { f64::INFINITY };
        Self::symmetric(latency_ms / 1e3, bytes_per_s)
    }

    /// Server on the same local network.
    pub fn lan() -> Self {
        Self::from_ms_mbps(2.0, 100.0).expect("valid preset")
    }

    /// Cloud server over a direct connection.
    pub fn wan() -> Self {
        Self::from_ms_mbps(40.0, 20.0).expect("valid preset")
    }

    /// Server behind a tunneling relay: several extra hops.
    pub fn tunneled() -> Self {
        Self::from_ms_mbps(150.0, 10.0).expect("valid preset")
    }

    pub fn with_bandwidth_scaled(&self, k: f64) -> Self {
        let mut m = *self;
        m.uplink.bytes_per_s *= k;
        m.downlink.bytes_per_s *= k;
        m
    }
}
