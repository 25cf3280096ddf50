//! Simulated Bluetooth Mesh clients.
//!
//! Covers group/unicast addressing, discovery broadcasts, lower-transport
//! segmentation with per-segment acknowledgements and retransmission, and
//! the timing model for network-layer repeats and SAR segment intervals.

mod config;
mod network;

pub use config::{avg_tx_time, seg_interval, AddressKind, MeshAddress, MeshConfig, TimingError, TX_SLOT_MS};
pub use network::{
    Completion, Delivery, MeshClient, MeshError, MeshEvent, MeshMessage, MeshNetwork, MeshOutput, PayloadKind, SendId,
    SendOutcome,
};
