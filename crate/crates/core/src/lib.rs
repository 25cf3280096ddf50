//! Opportunistic edge communication over a serial-attached Bluetooth Mesh
//! radio: the Bridge frame codec and queues, a simulated mesh transport
//! with segmentation-and-reassembly timing, a libp2p-style host with
//! multistream negotiation and connection upgrade, FloodSub, and a
//! deterministic experiment harness.

pub mod bridge;
pub mod frame_codec;
pub mod harness;
pub mod mesh;
pub mod p2p;
pub mod pubsub;
pub mod sim;
