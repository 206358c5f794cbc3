//! Ed25519 key pairs, signatures and compact actor identities.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::Path;

use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::hashtree::Digest;

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("invalid secret key")]
    InvalidKey,
    #[error("malformed input: {0}")]
    MalformedInput(&'static str),
    #[error("io error: {0}")]
    Io(#[from] io::Error),
}

/// A validated Ed25519 public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey([u8; 32]);

impl PublicKey {
    pub const LEN: usize = 32;

    /// Rejects byte strings that are not a 32-byte compressed curve point.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IdentityError> {
        let raw: [u8; 32] = bytes
            .try_into()
            .map_err(|_| IdentityError::MalformedInput("public key must be 32 bytes"))?;
        VerifyingKey::from_bytes(&raw).map_err(|_| IdentityError::MalformedInput("public key is not a curve point"))?;
        Ok(PublicKey(raw))
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
        let bytes = hex::decode(s.trim()).map_err(|_| IdentityError::MalformedInput("bad hex"))?;
        Self::from_bytes(&bytes)
    }

    pub fn actor_id(&self) -> ActorId {
        ActorId(Digest::sha256(&self.0))
    }

    /// Strict Ed25519 verification of `signature` over `message`.
    pub fn verify(&self, message: &[u8], signature: &Signature) -> bool {
        let Ok(key) = VerifyingKey::from_bytes(&self.0) else {
            return false;
        };
        let sig = ed25519_dalek::Signature::from_bytes(&signature.0);
        key.verify_strict(message, &sig).is_ok()
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", &self.to_hex()[..16])
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Signature([u8; 64]);

impl Signature {
    pub const LEN: usize = 64;

    pub fn from_bytes(bytes: [u8; 64]) -> Self {
        Signature(bytes)
    }

    pub fn from_slice(bytes: &[u8]) -> Result<Self, IdentityError> {
        bytes
            .try_into()
            .map(Signature)
            .map_err(|_| IdentityError::MalformedInput("signature must be 64 bytes"))
    }

    pub fn as_bytes(&self) -> &[u8; 64] {
        &self.0
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({}..)", hex::encode(&self.0[..8]))
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(self.0))
    }
}

/// SHA-256 fingerprint of a public key.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ActorId(Digest);

impl ActorId {
    pub fn from_digest(d: Digest) -> Self {
        ActorId(d)
    }

    pub fn digest(&self) -> &Digest {
        &self.0
    }
}

impl fmt::Display for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.to_hex()[..16])
    }
}

impl fmt::Debug for ActorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ActorId({self})")
    }
}

impl Serialize for ActorId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

#[derive(Clone)]
pub struct KeyPair {
    public: PublicKey,
    signing: SigningKey,
}

impl KeyPair {
    /// Deterministic: the same seed always yields the same key pair.
    pub fn from_seed(seed: [u8; 32]) -> Self {
        let signing = SigningKey::from_bytes(&seed);
        let public = PublicKey(signing.verifying_key().to_bytes());
        KeyPair { public, signing }
    }

    pub fn public(&self) -> PublicKey {
        self.public
    }

    pub fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }

    pub fn actor_id(&self) -> ActorId {
        self.public.actor_id()
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.signing.sign(message).to_bytes())
    }

    /// Writes `<prefix>.key` (seed hex) and `<prefix>.pub` (public key hex).
    pub fn save(&self, prefix: &Path) -> Result<(), IdentityError> {
        fs::write(prefix.with_extension("key"), format!("{}\n", hex::encode(self.seed())))?;
        fs::write(prefix.with_extension("pub"), format!("{}\n", self.public.to_hex()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IdentityError> {
        let text = fs::read_to_string(path)?;
        let bytes = hex::decode(text.trim()).map_err(|_| IdentityError::MalformedInput("bad hex"))?;
        let seed: [u8; 32] = bytes.try_into().map_err(|_| IdentityError::InvalidKey)?;
        Ok(Self::from_seed(seed))
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

pub fn generate_keypair(seed: [u8; 32]) -> KeyPair {
    KeyPair::from_seed(seed)
}

/// Signs with a raw 32-byte secret seed.
pub fn sign(secret: &[u8], message: &[u8]) -> Result<Signature, IdentityError> {
    let seed: [u8; 32] = secret.try_into().map_err(|_| IdentityError::InvalidKey)?;
    Ok(KeyPair::from_seed(seed).sign(message))
}

/// Verifies raw encodings. Undecodable keys or signatures are errors; a
/// well-formed but wrong signature is `Ok(false)`.
pub fn verify(public: &[u8], message: &[u8], signature: &[u8]) -> Result<bool, IdentityError> {
    let key = PublicKey::from_bytes(public)?;
    let sig = Signature::from_slice(signature)?;
    Ok(key.verify(message, &sig))
}

pub fn load_public_key(path: &Path) -> Result<PublicKey, IdentityError> {
    PublicKey::from_hex(&fs::read_to_string(path)?)
}

/// Flat certificate registry: actor id to public key.
#[derive(Debug, Clone, Default)]
pub struct Registry {
    keys: BTreeMap<ActorId, PublicKey>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, key: PublicKey) -> ActorId {
        let id = key.actor_id();
        self.keys.insert(id, key);
        id
    }

    pub fn remove(&mut self, id: &ActorId) -> Option<PublicKey> {
        self.keys.remove(id)
    }

    pub fn get(&self, id: &ActorId) -> Option<&PublicKey> {
        self.keys.get(id)
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use std::collections::HashSet;

    fn seed(i: u32) -> [u8; 32] {
        let mut s = [0u8; 32];
        s[..4].copy_from_slice(&i.to_be_bytes());
        s
    }

    #[test]
    fn same_seed_same_keypair() {
        let a = generate_keypair(seed(3));
        let b = generate_keypair(seed(3));
        assert_eq!(a.public(), b.public());
        assert_eq!(a.sign(b"m"), b.sign(b"m"));
    }

    #[test]
    fn distinct_seeds_distinct_keys() {
        let keys: HashSet<_> = (0..1000).map(|i| generate_keypair(seed(i)).public()).collect();
        assert_eq!(keys.len(), 1000);
    }

    #[test]
    fn sign_verify_roundtrip_and_wrong_key() {
        let a = generate_keypair(seed(1));
        let b = generate_keypair(seed(2));
        let sig = a.sign(b"probe");
        assert!(a.public().verify(b"probe", &sig));
        assert!(!b.public().verify(b"probe", &sig));
        assert!(verify(a.public().as_bytes(), b"probe", sig.as_bytes()).unwrap());
    }

    #[test]
    fn message_mutation_rejected() {
        let a = generate_keypair(seed(9));
        let msg = b"the quick brown fox".to_vec();
        let sig = a.sign(&msg);
        for i in 0..msg.len() {
            let mut m = msg.clone();
            m[i] ^= 0x20;
            assert!(!a.public().verify(&m, &sig));
        }
    }

    #[test]
    fn malformed_inputs() {
        let a = generate_keypair(seed(1));
        let sig = a.sign(b"x");
        assert!(matches!(
            verify(a.public().as_bytes(), b"x", &sig.as_bytes()[..63]),
            Err(IdentityError::MalformedInput(_))
        ));
        assert!(matches!(
            verify(&[1u8; 31], b"x", sig.as_bytes()),
            Err(IdentityError::MalformedInput(_))
        ));
        assert!(matches!(sign(&[0u8; 31], b"x"), Err(IdentityError::InvalidKey)));
    }

    #[test]
    fn random_signatures_never_verify() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let a = generate_keypair(seed(5));
        for _ in 0..10_000 {
            let mut raw = [0u8; 64];
            rng.fill(&mut raw[..]);
            let msg: [u8; 16] = rng.gen();
            assert!(!a.public().verify(&msg, &Signature::from_bytes(raw)));
        }
    }

    #[test]
    fn key_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let kp = generate_keypair(seed(77));
        let prefix = dir.path().join("node");
        kp.save(&prefix).unwrap();
        let back = KeyPair::load(&prefix.with_extension("key")).unwrap();
        assert_eq!(back.public(), kp.public());
        assert_eq!(load_public_key(&prefix.with_extension("pub")).unwrap(), kp.public());
    }

    #[test]
    fn registry_tracks_actor_ids() {
        let mut reg = Registry::new();
        let kp = generate_keypair(seed(4));
        let id = reg.insert(kp.public());
        assert_eq!(id, kp.actor_id());
        assert_eq!(reg.get(&id), Some(&kp.public()));
        reg.remove(&id);
        assert!(reg.is_empty());
    }
}
