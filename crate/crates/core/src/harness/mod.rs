//! Test and benchmark infrastructure: modeled links, datasets, the reference
//! run and split-location sweeps.

pub mod data;
pub mod idx;
pub mod link;
pub mod loopback;
pub mod oracle;
pub mod sweep;

pub use data::{gen_synthetic, gen_synthetic_with, Batch, Dataset};
pub use idx::load_idx;
pub use link::{LinkDirection, LinkModel};
pub use loopback::{loopback_transport, Fidelity, LoopbackEnd};
pub use oracle::{equivalence_check, monolithic_train, split_train, EquivalenceReport, Trajectory};
pub use sweep::{split_location_sweep, summary_table, SweepRow};
