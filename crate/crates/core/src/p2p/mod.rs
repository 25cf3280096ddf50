//! The libp2p-style host: key-derived peer ids, multistream-select, a
//! Noise-shaped handshake, a minimal stream multiplexer, and the table
//! mapping peer ids to mesh client addresses.

mod config;
mod connection;
mod handshake;
mod host;
mod multistream;
mod muxer;
mod peer_id;
mod routing;

pub use config::HostConfig;
pub use connection::{pump, ConnError, ConnEvent, Connection, Phase, Protocols, Stage};
pub use handshake::{
    respond, HandshakeError, InitiatorHandshake, SealError, SecureChannel, Session, MSG1_LEN, MSG2_LEN,
};
pub use host::{Command, CommandSender, Host, HostError, HostEvent, HostOutput, HostTimer, MAX_FRAGMENT_CHUNK};
pub use multistream::{
    multistream_decode, multistream_decode_all, multistream_encode, negotiate, Dialer, Listener, Negotiation,
    NegotiationError, Side, Step, TranscriptEntry, FLOODSUB_ID, MULTISTREAM_ID, NA, NOISE_ID, TLS_ID, YAMUX_ID,
};
pub use muxer::{decode_frames, MuxError, MuxFrame, StreamIdAllocator, DATA, FIN, PING, PONG, SESSION_STREAM, SYN};
pub use peer_id::{Keypair, PeerId};
pub use routing::{Route, RoutingTable};
