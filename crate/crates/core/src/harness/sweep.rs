//! Where to cut: time per step as the first cut moves through the network.

use serde::Serialize;
use std::fmt::Write as _;

use super::data::Dataset;
use super::link::LinkModel;
use super::loopback::Fidelity;
use crate::error::Result;
use crate::plan::SplitPlan;
use crate::runtime::{simulate_session, ClientOptions};
use crate::segment::HyperParams;

/// Per-step means for one cut position. Times are seconds; transfer is modeled.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub cut: usize,
    pub boundary_shape: Vec<usize>,
    /// Per-sample elements crossing the cut.
    pub boundary_elements: usize,
    pub client_compute_s: f64,
    pub server_compute_s: f64,
    pub serialize_s: f64,
    pub transfer_s: f64,
    pub bandwidth_s: f64,
    pub latency_s: f64,
    pub total_s: f64,
    /// Tensor bytes per step, both directions.
    pub payload_bytes: u64,
}

impl SweepRow {
    /// Everything that is not computation.
    pub fn communication_s(&self) -> f64 {
        self.serialize_s + self.transfer_s
    }
}

/// Moves the first cut over `cuts`, keeping a second cut fixed if the plan
/// has one, and runs `steps` steps at each position over `link` with real
/// 32-bit framing. Invalid positions are skipped with a warning.
pub fn split_location_sweep(
    plan: &SplitPlan,
    cuts: &[usize],
    link: LinkModel,
    dataset: &Dataset,
    hp: &HyperParams,
    seed: u64,
    steps: usize,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &cut in cuts {
        let cut_list = match plan.cuts.get(1) {
            Some(&second) if cut < second => vec![cut, second],
            _ => vec![cut],
        };
        let vp = match plan.with_cuts(&cut_list).validate() {
            Ok(vp) => vp,
            Err(e) => {
                log::warn!("skipping cut {cut}: {e}");
                continue;
            }
        };
        let opts = ClientOptions {
            hp: *hp,
            seed,
            steps,
            record_weights: false,
        };
        let (client, server) = simulate_session(&vp, dataset, &opts, link, Fidelity::Wire32)?;
        let n = steps.max(1) as f64;
        let ns = |v: u64| v as f64 / 1e9 / n;
        let link_c = client.state.steps.iter().map(|s| &s.timing);
        let client_compute_s = ns(link_c.clone().map(|t| t.compute_ns).sum());
        let server_compute_s = ns(server.state.steps.iter().map(|s| s.timing.compute_ns).sum());
        let serialize_s = ns(link_c.clone().map(|t| t.serialize_ns).sum::<u64>()
            + server.state.steps.iter().map(|s| s.timing.serialize_ns).sum::<u64>());
        // Unrounded modeled times from the client's per-step link counters;
        // the handshake is left out.
        let transfer_s = client.state.steps.iter().map(|s| s.link.transfer_s).sum::<f64>() / n;
        let bandwidth_s = client.state.steps.iter().map(|s| s.link.bandwidth_s).sum::<f64>() / n;
        let payload_bytes = link_c.map(|t| t.bytes_sent + t.bytes_received).sum::<u64>() / steps.max(1) as u64;
        let shape = vp.boundary_shapes()[0].clone();
        rows.push(SweepRow {
            cut,
            boundary_elements: shape.iter().product(),
            boundary_shape: shape,
            client_compute_s,
            server_compute_s,
            serialize_s,
            transfer_s,
            bandwidth_s,
            latency_s: transfer_s - bandwidth_s,
            total_s: client_compute_s + server_compute_s + serialize_s + transfer_s,
            payload_bytes,
        });
    }
    Ok(rows)
}

pub fn summary_table(rows: &[SweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>4}  {:>16}  {:>9}  {:>10}  {:>10}  {:>10}  {:>10}  {:>10}",
        "cut", "boundary", "elements", "client s", "server s", "serial s", "transfer s", "total s"
    );
    for r in rows {
        let shape: Vec<String> = r.boundary_shape.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(
            s,
            "{:>4}  {:>16}  {:>9}  {:>10.4}  {:>10.4}  {:>10.4}  {:>10.4}  {:>10.4}",
            r.cut,
            shape.join("x"),
            r.boundary_elements,
            r.client_compute_s,
            r.server_compute_s,
            r.serialize_s,
            r.transfer_s,
            r.total_s
        );
    }
    s
}
