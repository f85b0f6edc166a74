use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt;

use crate::error::Error;
use crate::layer::LayerParams;
use crate::plan::SplitMode;
use crate::segment::Segment;
use crate::transport::LinkCounters;

/// Per-step time and byte accounting.
///
/// `transfer_ns` is modeled on a loopback link and measured (blocking time,
/// including the peer's compute) on a socket. Byte counts are tensor element
/// bytes; framing is in the `overhead_*` fields.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TimingRecord {
    pub step_id: u64,
    pub compute_ns: u64,
    pub serialize_ns: u64,
    pub transfer_ns: u64,
    /// Part of `transfer_ns` spent on bytes over bandwidth (modeled links only).
    pub bandwidth_ns: u64,
    pub total_ns: u64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub overhead_bytes_sent: u64,
    pub overhead_bytes_received: u64,
    pub tensor_frames_sent: u64,
    pub tensor_frames_received: u64,
    pub label_frames_sent: u64,
    pub label_frames_received: u64,
}

fn secs_to_ns(s: f64) -> u64 {
    (s * 1e9).round().max(0.0) as u64
}

impl TimingRecord {
    pub(crate) fn from_link(step_id: u64, compute_ns: u64, link: &LinkCounters) -> Self {
        let transfer_ns = secs_to_ns(link.transfer_s);
        Self {
            step_id,
            compute_ns,
            serialize_ns: link.serialize_ns,
            transfer_ns,
            bandwidth_ns: secs_to_ns(link.bandwidth_s),
            total_ns: compute_ns + link.serialize_ns + transfer_ns,
            bytes_sent: link.payload_bytes_sent,
            bytes_received: link.payload_bytes_received,
            overhead_bytes_sent: link.overhead_bytes_sent,
            overhead_bytes_received: link.overhead_bytes_received,
            tensor_frames_sent: link.boundary_frames_sent + link.label_frames_sent,
            tensor_frames_received: link.boundary_frames_received + link.label_frames_received,
            label_frames_sent: link.label_frames_sent,
            label_frames_received: link.label_frames_received,
        }
    }

    /// Folds the peer's compute and serialization into a client record, for
    /// simulated runs where both sides share one clock budget.
    pub fn absorb_peer(&mut self, peer: &TimingRecord) {
        self.compute_ns += peer.compute_ns;
        self.serialize_ns += peer.serialize_ns;
        self.total_ns = self.compute_ns + self.serialize_ns + self.transfer_ns;
    }
}

/// Parameters by global layer index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSnapshot(pub BTreeMap<usize, LayerParams>);

impl ParamSnapshot {
    pub fn of(segments: &[&Segment]) -> Self {
        let mut map = BTreeMap::new();
        for seg in segments {
            for (i, p) in seg.params().into_iter().enumerate() {
                if let Some(p) = p {
                    map.insert(seg.first_layer() + i, p.clone());
                }
            }
        }
        Self(map)
    }

    pub fn merge(&mut self, other: &ParamSnapshot) {
        self.0.extend(other.0.iter().map(|(k, v)| (*k, v.clone())));
    }

    /// Largest elementwise difference; `None` if the layer sets differ.
    pub fn max_abs_diff(&self, other: &ParamSnapshot) -> Option<f64> {
        if self.0.len() != other.0.len() {
            return None;
        }
        self.0.iter().try_fold(0.0f64, |m, (k, a)| {
            let b = other.0.get(k)?;
            Some(m.max(a.max_abs_diff(b)?))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepLog {
    pub epoch: usize,
    /// `None` on a party that does not hold the labels.
    pub loss: Option<f64>,
    pub accuracy: Option<f64>,
    pub timing: TimingRecord,
    /// Unrounded link accounting for this step.
    #[serde(skip)]
    pub link: LinkCounters,
}

#[derive(Debug, Clone, Default)]
pub struct TrainState {
    pub mode: Option<SplitMode>,
    pub epoch: usize,
    /// Completed steps. On the client in double-split mode this equals the
    /// number of GRAD_BA frames received.
    pub step: u64,
    pub steps: Vec<StepLog>,
    /// Parameters after step `i` at index `i` (index 0 is the initial state).
    /// Only filled when weight recording is on.
    pub weights: Vec<ParamSnapshot>,
    /// Link totals for the whole session, handshake included.
    pub link: LinkCounters,
}

impl TrainState {
    pub fn last_loss(&self) -> Option<f64> {
        self.steps.iter().rev().find_map(|s| s.loss)
    }

    /// Mean loss over the most recent `window` steps that report one.
    pub fn running_loss(&self, window: usize) -> Option<f64> {
        let v: Vec<f64> = self.steps.iter().rev().filter_map(|s| s.loss).take(window).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn running_accuracy(&self, window: usize) -> Option<f64> {
        let v: Vec<f64> = self.steps.iter().rev().filter_map(|s| s.accuracy).take(window).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn losses(&self) -> Vec<Option<f64>> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// A session that stopped early. Everything trained so far is kept.
pub struct SessionAbort {
    pub state: Box<TrainState>,
    pub segments: Vec<Segment>,
    pub cause: Error,
}

impl fmt::Debug for SessionAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionAbort")
            .field("completed_steps", &self.state.step)
            .field("cause", &self.cause)
            .finish()
    }
}

impl fmt::Display for SessionAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "session aborted after {} steps: {}", self.state.step, self.cause)
    }
}

impl std::error::Error for SessionAbort {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.cause)
    }
}

impl From<SessionAbort> for Error {
    fn from(a: SessionAbort) -> Self {
        a.cause
    }
}
