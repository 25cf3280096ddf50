//! Connection upgrade as a sans-IO state machine: security negotiation,
//! handshake, muxer negotiation over the sealed channel, then the
//! application stream. Records go out through [`Connection::poll_transmit`]
//! and come back in through [`Connection::on_record`].

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use rand::{CryptoRng, RngCore};
use thiserror::Error;

use super::handshake::{respond, InitiatorHandshake, SealError, Session};
use super::multistream::{
    multistream_decode_all, Dialer, Listener, NegotiationError, Side, Step, FLOODSUB_ID, NOISE_ID, TLS_ID, YAMUX_ID,
};
use super::muxer::{decode_frames, MuxFrame, StreamIdAllocator, DATA, FIN, PING, PONG, SESSION_STREAM, SYN};
use super::peer_id::{Keypair, PeerId};

const RECORD_PLAIN: u8 = 0x00;
const RECORD_HANDSHAKE: u8 = 0x01;
const RECORD_SEALED: u8 = 0x02;

/// Security protocols this implementation can actually run.
const IMPLEMENTED_SECURITY: &[&str] = &[NOISE_ID];
const IMPLEMENTED_MUXERS: &[&str] = &[YAMUX_ID];

/// Where a connection attempt gave up.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Connect,
    Security,
    Handshake,
    Muxer,
    Protocol,
    Channel,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Connect => "connect",
            Stage::Security => "security",
            Stage::Handshake => "handshake",
            Stage::Muxer => "muxer",
            Stage::Protocol => "protocol",
            Stage::Channel => "channel",
        };
        f.write_str(s)
    }
}

/// Phases in the order a connection moves through them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    Idle,
    PeerExchanged,
    MultistreamAgreed,
    Secured,
    Muxed,
    Ready,
    Failed(Stage),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConnError {
    #[error("connection is not ready (phase {0:?})")]
    NotReady(Phase),
    #[error("stream {0} is unknown")]
    UnknownStream(u64),
    #[error("stream {0} is not open")]
    StreamNotOpen(u64),
    #[error(transparent)]
    Negotiation(#[from] NegotiationError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Protocols {
    /// Security ids, in proposal order when dialing.
    pub security: Vec<String>,
    pub muxers: Vec<String>,
    /// Protocols accepted on inbound streams.
    pub streams: Vec<String>,
    /// Stream the initiator opens to become ready.
    pub app: String,
}

impl Default for Protocols {
    fn default() -> Self {
        Protocols {
            security: vec![TLS_ID.into(), NOISE_ID.into()],
            muxers: vec![YAMUX_ID.into()],
            streams: vec![FLOODSUB_ID.into()],
            app: FLOODSUB_ID.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ConnEvent {
    Ready { app_stream: u64 },
    Failed { stage: Stage, reason: String },
    StreamOpened { stream: u64, protocol: String },
    StreamRejected { stream: u64, error: NegotiationError },
    Data { stream: u64, data: Vec<u8> },
    StreamClosed { stream: u64 },
    Pong { data: Vec<u8> },
}

enum Negotiator {
    None,
    Dialer(Dialer),
    Listener(Listener),
}

impl Negotiator {
    fn on_message(&mut self, msg: &str) -> Result<Step, NegotiationError> {
        match self {
            Negotiator::Dialer(d) => d.on_message(msg),
            Negotiator::Listener(l) => l.on_message(msg),
            Negotiator::None => Err(NegotiationError::Unexpected(msg.to_string())),
        }
    }
}

enum StreamState {
    Negotiating(Negotiator),
    Open(String),
    Closed,
}

pub struct Connection {
    side: Side,
    local: Keypair,
    remote: PeerId,
    protocols: Protocols,
    phase: Phase,
    selected_security: Option<String>,
    selected_muxer: Option<String>,
    negotiator: Negotiator,
    handshake: Option<InitiatorHandshake>,
    session: Option<Session>,
    ids: StreamIdAllocator,
    streams: BTreeMap<u64, StreamState>,
    app_stream: Option<u64>,
    outbox: VecDeque<Vec<u8>>,
    events: VecDeque<ConnEvent>,
}

fn record(kind: u8, body: &[u8]) -> Vec<u8> {
    let mut r = Vec::with_capacity(body.len() + 1);
    r.push(kind);
    r.extend_from_slice(body);
    r
}

fn supported(configured: &[String], implemented: &[&str]) -> Vec<String> {
    configured.iter().filter(|p| implemented.contains(&p.as_str())).cloned().collect()
}

impl Connection {
    /// Starts the upgrade right after peer ids have been exchanged. Both
    /// sides queue their multistream header immediately.
    pub fn new(side: Side, local: Keypair, remote: PeerId, protocols: Protocols) -> Self {
        let (negotiator, header) = match side {
            Side::Initiator => {
                let (d, h) = Dialer::new(protocols.security.clone());
                (Negotiator::Dialer(d), h)
            }
            Side::Responder => {
                let (l, h) = Listener::new(supported(&protocols.security, IMPLEMENTED_SECURITY));
                (Negotiator::Listener(l), h)
            }
        };
        Connection {
            side,
            local,
            remote,
            protocols,
            phase: Phase::PeerExchanged,
            selected_security: None,
            selected_muxer: None,
            negotiator,
            handshake: None,
            session: None,
            ids: StreamIdAllocator::new(side),
            streams: BTreeMap::new(),
            app_stream: None,
            outbox: VecDeque::from([record(RECORD_PLAIN, &header)]),
            events: VecDeque::new(),
        }
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn remote(&self) -> &PeerId {
        &self.remote
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_ready(&self) -> bool {
        self.phase == Phase::Ready
    }

    pub fn is_failed(&self) -> bool {
        matches!(self.phase, Phase::Failed(_))
    }

    pub fn selected_security(&self) -> Option<&str> {
        self.selected_security.as_deref()
    }

    pub fn selected_muxer(&self) -> Option<&str> {
        self.selected_muxer.as_deref()
    }

    pub fn session_secret(&self) -> Option<&[u8; 32]> {
        self.session.as_ref().map(|s| &s.secret)
    }

    pub fn app_stream(&self) -> Option<u64> {
        self.app_stream
    }

    pub fn poll_transmit(&mut self) -> Option<Vec<u8>> {
        self.outbox.pop_front()
    }

    pub fn poll_event(&mut self) -> Option<ConnEvent> {
        self.events.pop_front()
    }

    /// Marks the connection failed from outside, e.g. on a timeout.
    pub fn fail(&mut self, stage: Stage, reason: impl Into<String>) {
        if self.is_failed() {
            return;
        }
        self.phase = Phase::Failed(stage);
        self.outbox.clear();
        self.events.push_back(ConnEvent::Failed { stage, reason: reason.into() });
    }

    pub fn on_record<R: RngCore + CryptoRng>(&mut self, rec: &[u8], rng: &mut R) {
        if self.is_failed() {
            return;
        }
        let Some((&kind, body)) = rec.split_first() else { return };
        match kind {
            RECORD_PLAIN | RECORD_HANDSHAKE if self.session.is_some() => {
                self.fail(Stage::Channel, "plaintext record after the handshake");
            }
            RECORD_PLAIN if self.phase == Phase::PeerExchanged => self.on_security_negotiation(body, rng),
            RECORD_HANDSHAKE if self.phase == Phase::MultistreamAgreed => self.on_handshake(body, rng),
            RECORD_SEALED => {
                let Some(session) = self.session.as_mut() else { return };
                match session.channel.open(body) {
                    Ok(pt) => self.on_sealed(&pt),
                    // a stale duplicate; the original was already processed
                    Err(SealError::Replay(_)) => {}
                    Err(e) => self.fail(Stage::Channel, e.to_string()),
                }
            }
            _ => {}
        }
    }

    fn on_security_negotiation<R: RngCore + CryptoRng>(&mut self, body: &[u8], rng: &mut R) {
        let step = multistream_decode_all(body).and_then(|ids| {
            ids.iter().try_fold(Step::default(), |acc, id| {
                let s = self.negotiator.on_message(id)?;
                Ok(Step { send: s.send.or(acc.send), agreed: s.agreed.or(acc.agreed) })
            })
        });
        match step {
            Err(e) => self.fail(Stage::Security, e.to_string()),
            Ok(step) => {
                if let Some(b) = step.send {
                    self.outbox.push_back(record(RECORD_PLAIN, &b));
                }
                if let Some(p) = step.agreed {
                    self.selected_security = Some(p);
                    self.phase = Phase::MultistreamAgreed;
                    self.negotiator = Negotiator::None;
                    if self.side == Side::Initiator {
                        self.start_handshake(rng);
                    }
                }
            }
        }
    }

    fn start_handshake<R: RngCore + CryptoRng>(&mut self, rng: &mut R) {
        if self.side != Side::Initiator || self.phase != Phase::MultistreamAgreed || self.handshake.is_some() {
            return;
        }
        let (hs, msg1) = InitiatorHandshake::start(&self.local, Some(self.remote.clone()), rng);
        self.handshake = Some(hs);
        self.outbox.push_back(record(RECORD_HANDSHAKE, &msg1));
    }

    fn on_handshake<R: RngCore + CryptoRng>(&mut self, body: &[u8], rng: &mut R) {
        let result = match self.side {
            Side::Responder => respond(&self.local, Some(&self.remote), body, rng).map(|(session, msg2)| {
                self.outbox.push_back(record(RECORD_HANDSHAKE, &msg2));
                session
            }),
            Side::Initiator => match self.handshake.take() {
                Some(hs) => hs.finish(body),
                None => return,
            },
        };
        match result {
            Err(e) => self.fail(Stage::Handshake, e.to_string()),
            Ok(session) => {
                self.session = Some(session);
                self.phase = Phase::Secured;
                let (negotiator, header) = match self.side {
                    Side::Initiator => {
                        let (d, h) = Dialer::new(self.protocols.muxers.clone());
                        (Negotiator::Dialer(d), h)
                    }
                    Side::Responder => {
                        let (l, h) = Listener::new(supported(&self.protocols.muxers, IMPLEMENTED_MUXERS));
                        (Negotiator::Listener(l), h)
                    }
                };
                self.negotiator = negotiator;
                self.push_sealed(&header);
            }
        }
    }

    fn push_sealed(&mut self, plaintext: &[u8]) {
        let session = self.session.as_mut().expect("sealed sends only after the handshake");
        let sealed = session.channel.seal(plaintext);
        self.outbox.push_back(record(RECORD_SEALED, &sealed));
    }

    fn push_frame(&mut self, frame: MuxFrame) {
        self.push_sealed(&frame.encode());
    }

    fn on_sealed(&mut self, pt: &[u8]) {
        if self.phase == Phase::Secured {
            let step = multistream_decode_all(pt).and_then(|ids| {
                ids.iter().try_fold(Step::default(), |acc, id| {
                    let s = self.negotiator.on_message(id)?;
                    Ok(Step { send: s.send.or(acc.send), agreed: s.agreed.or(acc.agreed) })
                })
            });
            match step {
                Err(e) => self.fail(Stage::Muxer, e.to_string()),
                Ok(step) => {
                    if let Some(b) = step.send {
                        self.push_sealed(&b);
                    }
                    if let Some(p) = step.agreed {
                        self.selected_muxer = Some(p);
                        self.phase = Phase::Muxed;
                        self.negotiator = Negotiator::None;
                        if self.side == Side::Initiator {
                            let app = self.protocols.app.clone();
                            self.app_stream = Some(self.open_stream_unchecked(&app));
                        }
                    }
                }
            }
            return;
        }
        match decode_frames(pt) {
            Err(e) => self.fail(Stage::Channel, e.to_string()),
            Ok(frames) => {
                for frame in frames {
                    self.on_frame(frame);
                    if self.is_failed() {
                        break;
                    }
                }
            }
        }
    }

    fn on_frame(&mut self, frame: MuxFrame) {
        if frame.stream == SESSION_STREAM {
            if frame.has(PING) {
                self.push_frame(MuxFrame::new(SESSION_STREAM, PONG, frame.data));
            } else if frame.has(PONG) {
                self.events.push_back(ConnEvent::Pong { data: frame.data });
            }
            return;
        }
        let id = frame.stream;
        if frame.has(SYN) && StreamIdAllocator::is_remote(self.side, id) && !self.streams.contains_key(&id) {
            let (l, header) = Listener::new(self.protocols.streams.clone());
            self.streams.insert(id, StreamState::Negotiating(Negotiator::Listener(l)));
            self.push_frame(MuxFrame::new(id, DATA, header));
        }
        let fin = frame.has(FIN);
        if frame.has(DATA) && !frame.data.is_empty() {
            self.on_stream_data(id, frame.data);
        }
        if fin {
            if let Some(st) = self.streams.get_mut(&id) {
                if !matches!(st, StreamState::Closed) {
                    *st = StreamState::Closed;
                    self.events.push_back(ConnEvent::StreamClosed { stream: id });
                }
            }
        }
    }

    fn on_stream_data(&mut self, id: u64, data: Vec<u8>) {
        let Some(state) = self.streams.get_mut(&id) else { return };
        match state {
            StreamState::Open(_) => self.events.push_back(ConnEvent::Data { stream: id, data }),
            StreamState::Closed => {}
            StreamState::Negotiating(neg) => {
                let step = multistream_decode_all(&data).and_then(|ids| {
                    ids.iter().try_fold(Step::default(), |acc, m| {
                        let s = neg.on_message(m)?;
                        Ok(Step { send: s.send.or(acc.send), agreed: s.agreed.or(acc.agreed) })
                    })
                });
                match step {
                    Err(error) => {
                        *state = StreamState::Closed;
                        self.push_frame(MuxFrame::new(id, FIN, vec![]));
                        if self.app_stream == Some(id) {
                            self.fail(Stage::Protocol, error.to_string());
                        } else {
                            self.events.push_back(ConnEvent::StreamRejected { stream: id, error });
                        }
                    }
                    Ok(step) => {
                        if let Some(p) = &step.agreed {
                            *state = StreamState::Open(p.clone());
                        }
                        if let Some(b) = step.send {
                            self.push_frame(MuxFrame::new(id, DATA, b));
                        }
                        if let Some(protocol) = step.agreed {
                            self.events.push_back(ConnEvent::StreamOpened { stream: id, protocol: protocol.clone() });
                            let becomes_app = match self.side {
                                Side::Initiator => self.app_stream == Some(id),
                                Side::Responder => self.app_stream.is_none() && protocol == self.protocols.app,
                            };
                            if becomes_app && self.phase == Phase::Muxed {
                                self.app_stream = Some(id);
                                self.phase = Phase::Ready;
                                self.events.push_back(ConnEvent::Ready { app_stream: id });
                            }
                        }
                    }
                }
            }
        }
    }

    fn open_stream_unchecked(&mut self, protocol: &str) -> u64 {
        let id = self.ids.next_id();
        let (d, header) = Dialer::new([protocol]);
        self.streams.insert(id, StreamState::Negotiating(Negotiator::Dialer(d)));
        self.push_frame(MuxFrame::new(id, SYN | DATA, header));
        id
    }

    /// Opens an outbound stream and starts negotiating `protocol` on it.
    /// [`ConnEvent::StreamOpened`] or [`ConnEvent::StreamRejected`] follows.
    pub fn open_stream(&mut self, protocol: &str) -> Result<u64, ConnError> {
        if self.phase != Phase::Ready {
            return Err(ConnError::NotReady(self.phase));
        }
        super::multistream::multistream_encode(protocol)?;
        Ok(self.open_stream_unchecked(protocol))
    }

    pub fn stream_protocol(&self, id: u64) -> Option<&str> {
        match self.streams.get(&id) {
            Some(StreamState::Open(p)) => Some(p),
            _ => None,
        }
    }

    pub fn send(&mut self, stream: u64, data: &[u8]) -> Result<(), ConnError> {
        if self.phase != Phase::Ready {
            return Err(ConnError::NotReady(self.phase));
        }
        match self.streams.get(&stream) {
            None => Err(ConnError::UnknownStream(stream)),
            Some(StreamState::Open(_)) => {
                self.push_frame(MuxFrame::new(stream, DATA, data.to_vec()));
                Ok(())
            }
            Some(_) => Err(ConnError::StreamNotOpen(stream)),
        }
    }

    pub fn close_stream(&mut self, stream: u64) -> Result<(), ConnError> {
        match self.streams.get_mut(&stream) {
            None => Err(ConnError::UnknownStream(stream)),
            Some(st) => {
                *st = StreamState::Closed;
                self.push_frame(MuxFrame::new(stream, FIN, vec![]));
                Ok(())
            }
        }
    }

    /// Session-level liveness probe; the peer answers with a pong
    /// carrying the same bytes.
    pub fn ping(&mut self, data: &[u8]) -> Result<(), ConnError> {
        if self.phase != Phase::Ready {
            return Err(ConnError::NotReady(self.phase));
        }
        self.push_frame(MuxFrame::new(SESSION_STREAM, PING, data.to_vec()));
        Ok(())
    }
}

impl fmt::Debug for Connection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Connection")
            .field("side", &self.side)
            .field("remote", &self.remote)
            .field("phase", &self.phase)
            .field("security", &self.selected_security)
            .field("muxer", &self.selected_muxer)
            .finish_non_exhaustive()
    }
}

/// Shuttles records between two connections until neither has anything
/// left to send. `tap` sees every record in wire order and may rewrite it.
pub fn pump<R, F>(a: &mut Connection, b: &mut Connection, rng: &mut R, mut tap: F)
where
    R: RngCore + CryptoRng,
    F: FnMut(Side, &mut Vec<u8>),
{
    loop {
        let mut moved = false;
        while let Some(mut rec) = a.poll_transmit() {
            tap(a.side(), &mut rec);
            b.on_record(&rec, rng);
            moved = true;
        }
        while let Some(mut rec) = b.poll_transmit() {
            tap(b.side(), &mut rec);
            a.on_record(&rec, rng);
            moved = true;
        }
        if !moved {
            break;
        }
    }
}
