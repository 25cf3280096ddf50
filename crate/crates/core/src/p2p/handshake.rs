//! A two-message handshake shaped like Noise IX, and the sealed channel
//! keyed by its result.
//!
//! ```text
//! -> e, s
//! <- e, ee, se, s, es
//! ```
//!
//! The initiator's static key travels in clear in the first message, as in
//! IX. Chaining keys are mixed with HKDF-SHA256 and payloads sealed with
//! ChaCha20-Poly1305. This is not a conformant Noise implementation.

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hkdf::Hkdf;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use thiserror::Error;
use x25519_dalek::{PublicKey, StaticSecret};

use super::peer_id::{Keypair, PeerId};

const PROTOCOL_NAME: &[u8] = b"oec-noise-ix-25519-chachapoly-sha256";
const DH_LEN: usize = 32;
const TAG_LEN: usize = 16;
pub const MSG1_LEN: usize = 2 * DH_LEN;
pub const MSG2_LEN: usize = DH_LEN + (DH_LEN + TAG_LEN) + TAG_LEN;
const RECORD_NONCE_LEN: usize = 8;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("handshake message has length {0}")]
    BadLength(usize),
    #[error("handshake message failed authentication")]
    Decrypt,
    #[error("remote key does not match the expected peer id")]
    PeerMismatch,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SealError {
    #[error("record too short")]
    Short,
    #[error("record failed authentication")]
    Auth,
    #[error("record nonce {0} was already used")]
    Replay(u64),
}

struct SymmetricState {
    ck: [u8; 32],
    h: [u8; 32],
    k: Option<[u8; 32]>,
}

impl SymmetricState {
    fn new() -> Self {
        let h: [u8; 32] = Sha256::digest(PROTOCOL_NAME).into();
        SymmetricState { ck: h, h, k: None }
    }

    fn mix_hash(&mut self, data: &[u8]) {
        let mut hasher = Sha256::new();
        hasher.update(self.h);
        hasher.update(data);
        self.h = hasher.finalize().into();
    }

    fn mix_key(&mut self, ikm: &[u8]) {
        let (ck, k) = hkdf2(&self.ck, ikm);
        self.ck = ck;
        self.k = Some(k);
    }

    fn encrypt_and_hash(&mut self, plaintext: &[u8]) -> Vec<u8> {
        let key = self.k.expect("key mixed before encryption");
        let ct = ChaCha20Poly1305::new(Key::from_slice(&key))
            .encrypt(&nonce(0), Payload { msg: plaintext, aad: &self.h })
            .expect("encryption cannot fail");
        self.mix_hash(&ct);
        ct
    }

    fn decrypt_and_hash(&mut self, ciphertext: &[u8]) -> Result<Vec<u8>, HandshakeError> {
        let key = self.k.expect("key mixed before decryption");
        let pt = ChaCha20Poly1305::new(Key::from_slice(&key))
            .decrypt(&nonce(0), Payload { msg: ciphertext, aad: &self.h })
            .map_err(|_| HandshakeError::Decrypt)?;
        self.mix_hash(ciphertext);
        Ok(pt)
    }

    /// Initiator-to-responder key, responder-to-initiator key, session secret.
    fn split(&self) -> ([u8; 32], [u8; 32], [u8; 32]) {
        let (k1, k2) = hkdf2(&self.ck, &[]);
        let mut hasher = Sha256::new();
        hasher.update(self.ck);
        hasher.update(self.h);
        (k1, k2, hasher.finalize().into())
    }
}

fn hkdf2(salt: &[u8; 32], ikm: &[u8]) -> ([u8; 32], [u8; 32]) {
    let mut okm = [0u8; 64];
    Hkdf::<Sha256>::new(Some(salt), ikm).expand(&[], &mut okm).expect("64 bytes is a valid length");
    let mut a = [0u8; 32];
    let mut b = [0u8; 32];
    a.copy_from_slice(&okm[..32]);
    b.copy_from_slice(&okm[32..]);
    (a, b)
}

fn nonce(counter: u64) -> Nonce {
    let mut n = [0u8; 12];
    n[4..].copy_from_slice(&counter.to_be_bytes());
    *Nonce::from_slice(&n)
}

fn public_from(bytes: &[u8]) -> PublicKey {
    let mut b = [0u8; 32];
    b.copy_from_slice(bytes);
    PublicKey::from(b)
}

/// Keys both sides hold once the handshake completes.
pub struct Session {
    pub remote_static: PublicKey,
    pub secret: [u8; 32],
    pub channel: SecureChannel,
}

/// Initiator state between sending message 1 and receiving message 2.
pub struct InitiatorHandshake {
    state: SymmetricState,
    e: StaticSecret,
    s: StaticSecret,
    expected: Option<PeerId>,
}

impl InitiatorHandshake {
    /// Starts a handshake; returns the state and message 1.
    pub fn start<R: RngCore + CryptoRng>(local: &Keypair, expected: Option<PeerId>, rng: &mut R) -> (Self, Vec<u8>) {
        let e = StaticSecret::random_from_rng(rng);
        let e_pub = PublicKey::from(&e);
        let mut state = SymmetricState::new();
        let mut msg = Vec::with_capacity(MSG1_LEN);
        msg.extend_from_slice(e_pub.as_bytes());
        msg.extend_from_slice(local.public().as_bytes());
        state.mix_hash(e_pub.as_bytes());
        state.mix_hash(local.public().as_bytes());
        (InitiatorHandshake { state, e, s: local.secret().clone(), expected }, msg)
    }

    pub fn finish(mut self, msg2: &[u8]) -> Result<Session, HandshakeError> {
        if msg2.len() != MSG2_LEN {
            return Err(HandshakeError::BadLength(msg2.len()));
        }
        let st = &mut self.state;
        let re = public_from(&msg2[..DH_LEN]);
        st.mix_hash(re.as_bytes());
        st.mix_key(self.e.diffie_hellman(&re).as_bytes());
        st.mix_key(self.s.diffie_hellman(&re).as_bytes());
        let rs_bytes = st.decrypt_and_hash(&msg2[DH_LEN..2 * DH_LEN + TAG_LEN])?;
        let rs = public_from(&rs_bytes);
        st.mix_key(self.e.diffie_hellman(&rs).as_bytes());
        st.decrypt_and_hash(&msg2[2 * DH_LEN + TAG_LEN..])?;
        if let Some(expected) = &self.expected {
            if PeerId::from_public_key(&rs) != *expected {
                return Err(HandshakeError::PeerMismatch);
            }
        }
        let (i2r, r2i, secret) = st.split();
        Ok(Session { remote_static: rs, secret, channel: SecureChannel::new(i2r, r2i) })
    }
}

/// Responder side: consumes message 1 and produces message 2 in one step.
pub fn respond<R: RngCore + CryptoRng>(
    local: &Keypair,
    expected: Option<&PeerId>,
    msg1: &[u8],
    rng: &mut R,
) -> Result<(Session, Vec<u8>), HandshakeError> {
    if msg1.len() != MSG1_LEN {
        return Err(HandshakeError::BadLength(msg1.len()));
    }
    let ie = public_from(&msg1[..DH_LEN]);
    let is = public_from(&msg1[DH_LEN..]);
    if let Some(expected) = expected {
        if PeerId::from_public_key(&is) != *expected {
            return Err(HandshakeError::PeerMismatch);
        }
    }
    let mut st = SymmetricState::new();
    st.mix_hash(ie.as_bytes());
    st.mix_hash(is.as_bytes());
    let e = StaticSecret::random_from_rng(rng);
    let e_pub = PublicKey::from(&e);
    let mut msg = Vec::with_capacity(MSG2_LEN);
    msg.extend_from_slice(e_pub.as_bytes());
    st.mix_hash(e_pub.as_bytes());
    st.mix_key(e.diffie_hellman(&ie).as_bytes());
    st.mix_key(e.diffie_hellman(&is).as_bytes());
    msg.extend(st.encrypt_and_hash(local.public().as_bytes()));
    st.mix_key(local.secret().diffie_hellman(&ie).as_bytes());
    msg.extend(st.encrypt_and_hash(&[]));
    let (i2r, r2i, secret) = st.split();
    Ok((Session { remote_static: is, secret, channel: SecureChannel::new(r2i, i2r) }, msg))
}

/// Authenticated record sealing. Each record carries its own 8-byte
/// counter so a lost record does not desynchronise the two ends; a
/// counter at or below the highest one seen is refused.
pub struct SecureChannel {
    send: ChaCha20Poly1305,
    recv: ChaCha20Poly1305,
    send_counter: u64,
    recv_highest: Option<u64>,
}

impl SecureChannel {
    fn new(send_key: [u8; 32], recv_key: [u8; 32]) -> Self {
        SecureChannel {
            send: ChaCha20Poly1305::new(Key::from_slice(&send_key)),
            recv: ChaCha20Poly1305::new(Key::from_slice(&recv_key)),
            send_counter: 0,
            recv_highest: None,
        }
    }

    pub fn seal(&mut self, plaintext: &[u8]) -> Vec<u8> {
        let counter = self.send_counter;
        self.send_counter += 1;
        let ct = self.send.encrypt(&nonce(counter), plaintext).expect("encryption cannot fail");
        let mut out = Vec::with_capacity(RECORD_NONCE_LEN + ct.len());
        out.extend_from_slice(&counter.to_be_bytes());
        out.extend(ct);
        out
    }

    pub fn open(&mut self, record: &[u8]) -> Result<Vec<u8>, SealError> {
        if record.len() < RECORD_NONCE_LEN + TAG_LEN {
            return Err(SealError::Short);
        }
        let counter = u64::from_be_bytes(record[..RECORD_NONCE_LEN].try_into().unwrap());
        if self.recv_highest.is_some_and(|h| counter <= h) {
            return Err(SealError::Replay(counter));
        }
        let pt = self.recv.decrypt(&nonce(counter), &record[RECORD_NONCE_LEN..]).map_err(|_| SealError::Auth)?;
        self.recv_highest = Some(counter);
        Ok(pt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn keys() -> (Keypair, Keypair, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (Keypair::generate(&mut rng), Keypair::generate(&mut rng), rng)
    }

    #[test]
    fn honest_run_agrees() {
        let (i, r, mut rng) = keys();
        let (hs, m1) = InitiatorHandshake::start(&i, Some(r.peer_id()), &mut rng);
        assert_eq!(m1.len(), MSG1_LEN);
        let (mut rs, m2) = respond(&r, Some(&i.peer_id()), &m1, &mut rng).unwrap();
        assert_eq!(m2.len(), MSG2_LEN);
        let mut is = hs.finish(&m2).unwrap();
        assert_eq!(is.secret, rs.secret);
        assert_eq!(PeerId::from_public_key(&is.remote_static), r.peer_id());
        assert_eq!(PeerId::from_public_key(&rs.remote_static), i.peer_id());
        let rec = is.channel.seal(b"hello");
        assert_eq!(rs.channel.open(&rec).unwrap(), b"hello");
        let rec = rs.channel.seal(b"back");
        assert_eq!(is.channel.open(&rec).unwrap(), b"back");
    }

    #[test]
    fn random_second_message_fails() {
        let (i, r, mut rng) = keys();
        let (hs, m1) = InitiatorHandshake::start(&i, None, &mut rng);
        let _ = respond(&r, None, &m1, &mut rng).unwrap();
        let mut junk = vec![0u8; MSG2_LEN];
        rng.fill_bytes(&mut junk);
        assert_eq!(hs.finish(&junk).err(), Some(HandshakeError::Decrypt));
    }

    #[test]
    fn replayed_second_message_fails_against_fresh_ephemeral() {
        let (i, r, mut rng) = keys();
        let (_, m1) = InitiatorHandshake::start(&i, None, &mut rng);
        let (_, old_m2) = respond(&r, None, &m1, &mut rng).unwrap();
        let (fresh, _) = InitiatorHandshake::start(&i, None, &mut rng);
        assert_eq!(fresh.finish(&old_m2).err(), Some(HandshakeError::Decrypt));
    }

    #[test]
    fn wrong_peer_is_rejected() {
        let (i, r, mut rng) = keys();
        let other = Keypair::generate(&mut rng);
        let (hs, m1) = InitiatorHandshake::start(&i, Some(other.peer_id()), &mut rng);
        let (_, m2) = respond(&r, None, &m1, &mut rng).unwrap();
        assert_eq!(hs.finish(&m2).err(), Some(HandshakeError::PeerMismatch));
        assert_eq!(respond(&r, Some(&other.peer_id()), &m1, &mut rng).err(), Some(HandshakeError::PeerMismatch));
    }

    #[test]
    fn tampered_and_replayed_records() {
        let (i, r, mut rng) = keys();
        let (hs, m1) = InitiatorHandshake::start(&i, None, &mut rng);
        let (mut rs, m2) = respond(&r, None, &m1, &mut rng).unwrap();
        let mut is = hs.finish(&m2).unwrap();
        let mut rec = is.channel.seal(b"payload");
        let copy = rec.clone();
        rec[10] ^= 0x01;
        assert_eq!(rs.channel.open(&rec), Err(SealError::Auth));
        assert_eq!(rs.channel.open(&copy).unwrap(), b"payload");
        assert_eq!(rs.channel.open(&copy), Err(SealError::Replay(0)));
        // a lost record does not block later ones
        let _lost = is.channel.seal(b"lost");
        let next = is.channel.seal(b"next");
        assert_eq!(rs.channel.open(&next).unwrap(), b"next");
    }
}
