use std::fmt;

use data_encoding::BASE32_NOPAD;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use x25519_dalek::{PublicKey, StaticSecret};

/// Printable node identity: lower-case base-32 of the SHA-256 of the
/// node's static public key.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PeerId(String);

impl PeerId {
    pub fn from_public_key(key: &PublicKey) -> Self {
        let digest = Sha256::digest(key.as_bytes());
        PeerId(BASE32_NOPAD.encode(&digest).to_ascii_lowercase())
    }

    /// Accepts only strings that could have come from [`from_public_key`].
    ///
    /// [`from_public_key`]: PeerId::from_public_key
    pub fn parse(s: &str) -> Option<Self> {
        let upper = s.to_ascii_uppercase();
        match BASE32_NOPAD.decode(upper.as_bytes()) {
            Ok(bytes) if bytes.len() == 32 && s == upper.to_ascii_lowercase() => Some(PeerId(s.to_string())),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for PeerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A node's static X25519 key pair.
#[derive(Clone)]
pub struct Keypair {
    secret: StaticSecret,
    public: PublicKey,
}

impl Keypair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        Self::from_secret(StaticSecret::random_from_rng(rng))
    }

    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self::from_secret(StaticSecret::from(bytes))
    }

    fn from_secret(secret: StaticSecret) -> Self {
        let public = PublicKey::from(&secret);
        Keypair { secret, public }
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub(crate) fn secret(&self) -> &StaticSecret {
        &self.secret
    }

    pub fn peer_id(&self) -> PeerId {
        PeerId::from_public_key(&self.public)
    }
}

impl fmt::Debug for Keypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keypair").field("peer_id", &self.peer_id()).finish_non_exhaustive()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stable_and_printable() {
        let kp = Keypair::from_bytes([7u8; 32]);
        let id = kp.peer_id();
        assert_eq!(id, Keypair::from_bytes([7u8; 32]).peer_id());
        assert_eq!(id.as_str().len(), 52);
        assert!(id.as_str().chars().all(|c| c.is_ascii_lowercase() || ('2'..='7').contains(&c)));
        assert_eq!(PeerId::parse(id.as_str()), Some(id.clone()));
    }

    #[test]
    fn parse_rejects_garbage() {
        assert_eq!(PeerId::parse(""), None);
        assert_eq!(PeerId::parse("not a peer"), None);
        let id = Keypair::from_bytes([1u8; 32]).peer_id();
        assert_eq!(PeerId::parse(&id.as_str().to_ascii_uppercase()), None);
        assert_eq!(PeerId::parse(&id.as_str()[1..]), None);
    }

    #[test]
    fn distinct_keys_distinct_ids() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Keypair::generate(&mut rng);
        let b = Keypair::generate(&mut rng);
        assert_ne!(a.peer_id(), b.peer_id());
    }
}
