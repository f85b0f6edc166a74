//! Line-delimited JSON reports: one `step` record per step, then one `summary`.

use serde::Serialize;
use std::io::Write;
use std::path::Path;

use super::state::{StepLog, TimingRecord, TrainState};
use crate::error::Result;
use crate::plan::SplitMode;
use crate::transport::LinkCounters;

#[derive(Debug, Clone, Serialize)]
struct StepRecord<'a> {
    record: &'static str,
    epoch: usize,
    loss: Option<f64>,
    accuracy: Option<f64>,
    #[serde(flatten)]
    timing: &'a TimingRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub record: &'static str,
    pub role: String,
    pub mode: Option<SplitMode>,
    pub plan: String,
    pub plan_hash: String,
    /// Single split ships labels to the server: weaker isolation than double split.
    pub labels_on_server: bool,
    pub dataset: String,
    pub seed: u64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub mean_compute_ns: f64,
    pub mean_serialize_ns: f64,
    pub mean_transfer_ns: f64,
    pub mean_total_ns: f64,
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub link: LinkCounters,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Summary {
    /// Fills the aggregate fields from `state`; the rest is left for the caller.
    pub fn from_state(state: &TrainState) -> Self {
        let n = state.steps.len().max(1) as f64;
        let mean = |f: fn(&StepLog) -> u64| state.steps.iter().map(f).sum::<u64>() as f64 / n;
        Summary {
            record: "summary",
            role: String::new(),
            mode: state.mode,
            plan: String::new(),
            plan_hash: String::new(),
            labels_on_server: state.mode == Some(SplitMode::SingleSplit),
            dataset: String::new(),
            seed: 0,
            lr: 0.0,
            batch_size: 0,
            epochs: 0,
            steps: state.steps.len() as u64,
            final_loss: state.last_loss(),
            final_accuracy: state.steps.iter().rev().find_map(|s| s.accuracy),
            mean_compute_ns: mean(|s| s.timing.compute_ns),
            mean_serialize_ns: mean(|s| s.timing.serialize_ns),
            mean_transfer_ns: mean(|s| s.timing.transfer_ns),
            mean_total_ns: mean(|s| s.timing.total_ns),
            bytes_sent: state.steps.iter().map(|s| s.timing.bytes_sent).sum(),
            bytes_received: state.steps.iter().map(|s| s.timing.bytes_received).sum(),
            link: state.link,
        }
    }
}

pub fn write_report_to(w: &mut impl Write, state: &TrainState, summary: &Summary) -> Result<()> {
    for s in &state.steps {
        let rec = StepRecord {
            record: "step",
            epoch: s.epoch,
            loss: s.loss,
            accuracy: s.accuracy,
            timing: &s.timing,
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    serde_json::to_writer(&mut *w, summary)?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn write_report(path: impl AsRef<Path>, state: &TrainState, summary: &Summary) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_report_to(&mut f, state, summary)?;
    f.flush()?;
    Ok(())
}
