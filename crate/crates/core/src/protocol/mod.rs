//! Protocol messages: ledger creation and extension requests, Notary
//! receipts and misbehavior proofs, with their canonical encodings.
//!
//! Signing inputs are the canonical encoding with the signature fields left
//! out, so every signature commits to the exact bytes carried on the wire.

pub mod codec;

use std::fmt;

use serde::{Serialize, Serializer};

use crate::hashtree::{empty_root, ConsistencyProof, Digest};
use crate::identity::{KeyPair, PublicKey, Signature};

use codec::tags;
pub use codec::{decode, encode, DecodeError, Reader, Wire, Writer};

/// 16-byte ledger identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct LedgerId([u8; 16]);

impl LedgerId {
    pub const LEN: usize = 16;

    pub const fn from_bytes(bytes: [u8; 16]) -> Self {
        LedgerId(bytes)
    }

    /// First 16 bytes of `SHA-256(creator_key || nonce)`.
    pub fn derive(creator: &PublicKey, nonce: u64) -> Self {
        let mut input = creator.as_bytes().to_vec();
        input.extend_from_slice(&nonce.to_be_bytes());
        let d = Digest::sha256(&input);
        LedgerId(d.as_bytes()[..16].try_into().expect("16 of 32 bytes"))
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let b = hex::decode(s.trim()).ok()?;
        Some(LedgerId(b.try_into().ok()?))
    }
}

impl fmt::Display for LedgerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for LedgerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LedgerId({})", self.to_hex())
    }
}

impl Serialize for LedgerId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

/// Position of a transaction in the anchor log.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct AnchorTxnId(pub u64);

impl fmt::Display for AnchorTxnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// The set of keys allowed to extend a ledger, kept sorted by key bytes.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(transparent)]
pub struct AuthorSet(Vec<PublicKey>);

impl AuthorSet {
    /// Sorts and deduplicates. Returns `None` for an empty key list.
    pub fn new(mut keys: Vec<PublicKey>) -> Option<Self> {
        keys.sort();
        keys.dedup();
        (!keys.is_empty()).then_some(AuthorSet(keys))
    }

    /// Keeps `keys` exactly as given; [`AuthorSet::is_canonical`] reports
    /// whether they form a valid set.
    pub fn from_raw(keys: Vec<PublicKey>) -> Self {
        AuthorSet(keys)
    }

    /// Nonempty and strictly increasing.
    pub fn is_canonical(&self) -> bool {
        !self.0.is_empty() && self.0.windows(2).all(|w| w[0] < w[1])
    }

    pub fn contains(&self, key: &PublicKey) -> bool {
        self.0.binary_search(key).is_ok() || self.0.contains(key)
    }

    pub fn keys(&self) -> &[PublicKey] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    fn write(&self, w: &mut Writer) {
        w.count(self.0.len());
        for k in &self.0 {
            w.public_key(k);
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.count(PublicKey::LEN)?;
        let keys = (0..n).map(|_| r.public_key()).collect::<Result<Vec<_>, _>>()?;
        let set = AuthorSet(keys);
        if !set.is_canonical() {
            return Err(DecodeError::Invalid("author set not canonical"));
        }
        Ok(set)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct CreationRequest {
    pub ledger_id: LedgerId,
    pub authors: AuthorSet,
    pub initial_digest: Digest,
    pub initial_size: u64,
    pub creator_key: PublicKey,
    pub creator_sig: Signature,
}

impl CreationRequest {
    pub fn signed(
        creator: &KeyPair,
        ledger_id: LedgerId,
        authors: AuthorSet,
        initial_digest: Digest,
        initial_size: u64,
    ) -> Self {
        let mut req = CreationRequest {
            ledger_id,
            authors,
            initial_digest,
            initial_size,
            creator_key: creator.public(),
            creator_sig: Signature::from_bytes([0; 64]),
        };
        req.creator_sig = creator.sign(&req.signing_bytes());
        req
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(tags::CREATION_REQUEST);
        self.write_unsigned(&mut w);
        w.into_bytes()
    }

    fn write_unsigned(&self, w: &mut Writer) {
        w.raw(self.ledger_id.as_bytes());
        self.authors.write(w);
        w.digest(&self.initial_digest);
        w.u64(self.initial_size);
        w.public_key(&self.creator_key);
    }

    pub fn signature_valid(&self) -> bool {
        self.creator_key.verify(&self.signing_bytes(), &self.creator_sig)
    }
}

impl Wire for CreationRequest {
    const TAG: u8 = tags::CREATION_REQUEST;

    fn write_body(&self, w: &mut Writer) {
        self.write_unsigned(w);
        w.signature(&self.creator_sig);
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let req = CreationRequest {
            ledger_id: LedgerId(r.take(16)?.try_into().expect("16 bytes")),
            authors: AuthorSet::read(r)?,
            initial_digest: r.digest()?,
            initial_size: r.u64()?,
            creator_key: r.public_key()?,
            creator_sig: r.signature()?,
        };
        if req.initial_size == 0 {
            return Err(DecodeError::Invalid("initial size must be positive"));
        }
        Ok(req)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExtensionRequest {
    pub ledger_id: LedgerId,
    pub prev_digest: Digest,
    pub prev_size: u64,
    pub new_digest: Digest,
    pub new_size: u64,
    pub proof: ConsistencyProof,
    pub author_keys: Vec<PublicKey>,
    pub author_sigs: Vec<Signature>,
}

impl ExtensionRequest {
    /// Builds the request and collects one signature per signer, in order.
    pub fn signed(
        ledger_id: LedgerId,
        prev: (Digest, u64),
        new: (Digest, u64),
        proof: ConsistencyProof,
        signers: &[&KeyPair],
    ) -> Self {
        let mut req = ExtensionRequest {
            ledger_id,
            prev_digest: prev.0,
            prev_size: prev.1,
            new_digest: new.0,
            new_size: new.1,
            proof,
            author_keys: signers.iter().map(|k| k.public()).collect(),
            author_sigs: Vec::new(),
        };
        let input = req.signing_bytes();
        req.author_sigs = signers.iter().map(|k| k.sign(&input)).collect();
        req
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(tags::EXTENSION_REQUEST);
        self.write_unsigned(&mut w);
        w.into_bytes()
    }

    fn write_unsigned(&self, w: &mut Writer) {
        w.raw(self.ledger_id.as_bytes());
        w.digest(&self.prev_digest);
        w.u64(self.prev_size);
        w.digest(&self.new_digest);
        w.u64(self.new_size);
        w.consistency_proof(&self.proof);
        w.count(self.author_keys.len());
        for k in &self.author_keys {
            w.public_key(k);
        }
    }

    /// Structural invariants shared by the decoder and the validators.
    pub fn check_shape(&self) -> Result<(), &'static str> {
        if self.new_size <= self.prev_size {
            return Err("new size must exceed previous size");
        }
        if self.proof.old_size != self.prev_size || self.proof.new_size != self.new_size {
            return Err("proof sizes disagree with request sizes");
        }
        if self.author_keys.is_empty() {
            return Err("no signers");
        }
        if self.author_keys.len() != self.author_sigs.len() {
            return Err("signature count differs from signer count");
        }
        let mut sorted = self.author_keys.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err("duplicate signer");
        }
        Ok(())
    }

    /// Index of the first signer whose signature does not verify.
    pub fn first_bad_signature(&self) -> Option<usize> {
        let input = self.signing_bytes();
        self.author_keys
            .iter()
            .zip(&self.author_sigs)
            .position(|(k, s)| !k.verify(&input, s))
    }
}

impl Wire for ExtensionRequest {
    const TAG: u8 = tags::EXTENSION_REQUEST;

    fn write_body(&self, w: &mut Writer) {
        self.write_unsigned(w);
        w.count(self.author_sigs.len());
        for s in &self.author_sigs {
            w.signature(s);
        }
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let ledger_id = LedgerId(r.take(16)?.try_into().expect("16 bytes"));
        let prev_digest = r.digest()?;
        let prev_size = r.u64()?;
        let new_digest = r.digest()?;
        let new_size = r.u64()?;
        let proof = r.consistency_proof()?;
        let nk = r.count(PublicKey::LEN)?;
        let author_keys = (0..nk).map(|_| r.public_key()).collect::<Result<_, _>>()?;
        let ns = r.count(Signature::LEN)?;
        let author_sigs = (0..ns).map(|_| r.signature()).collect::<Result<_, _>>()?;
        let req = ExtensionRequest {
            ledger_id,
            prev_digest,
            prev_size,
            new_digest,
            new_size,
            proof,
            author_keys,
            author_sigs,
        };
        req.check_shape().map_err(DecodeError::Invalid)?;
        Ok(req)
    }
}

/// The request embedded in a receipt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(untagged)]
pub enum ReceiptRequest {
    Creation(CreationRequest),
    Extension(ExtensionRequest),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReceiptKind {
    Creation,
    Extension,
}

/// Where the Notary anchored (or promises to anchor) the receipt's step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorRef {
    Txn(AnchorTxnId),
    /// Delayed notarization: the step will be anchored by a transaction
    /// submitted no later than `due_by_ms`.
    Pending {
        due_by_ms: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Receipt {
    pub request: ReceiptRequest,
    pub timestamp_ms: u64,
    pub anchor_ref: AnchorRef,
    pub notary_seq: u64,
    pub notary_sig: Signature,
}

impl Receipt {
    pub fn signed(
        notary: &KeyPair,
        request: ReceiptRequest,
        timestamp_ms: u64,
        anchor_ref: AnchorRef,
        notary_seq: u64,
    ) -> Self {
        let mut r = Receipt {
            request,
            timestamp_ms,
            anchor_ref,
            notary_seq,
            notary_sig: Signature::from_bytes([0; 64]),
        };
        r.notary_sig = notary.sign(&r.signing_bytes());
        r
    }

    pub fn kind(&self) -> ReceiptKind {
        match self.request {
            ReceiptRequest::Creation(_) => ReceiptKind::Creation,
            ReceiptRequest::Extension(_) => ReceiptKind::Extension,
        }
    }

    pub fn ledger_id(&self) -> LedgerId {
        match &self.request {
            ReceiptRequest::Creation(c) => c.ledger_id,
            ReceiptRequest::Extension(e) => e.ledger_id,
        }
    }

    /// The history state this receipt extends; creation extends the empty
    /// history `(empty_root(), 0)`.
    pub fn prev(&self) -> (Digest, u64) {
        match &self.request {
            ReceiptRequest::Creation(_) => (empty_root(), 0),
            ReceiptRequest::Extension(e) => (e.prev_digest, e.prev_size),
        }
    }

    pub fn new_state(&self) -> (Digest, u64) {
        match &self.request {
            ReceiptRequest::Creation(c) => (c.initial_digest, c.initial_size),
            ReceiptRequest::Extension(e) => (e.new_digest, e.new_size),
        }
    }

    /// Keys that signed the embedded request.
    pub fn signers(&self) -> Vec<PublicKey> {
        match &self.request {
            ReceiptRequest::Creation(c) => vec![c.creator_key],
            ReceiptRequest::Extension(e) => e.author_keys.clone(),
        }
    }

    pub fn creation(&self) -> Option<&CreationRequest> {
        match &self.request {
            ReceiptRequest::Creation(c) => Some(c),
            ReceiptRequest::Extension(_) => None,
        }
    }

    pub fn extension(&self) -> Option<&ExtensionRequest> {
        match &self.request {
            ReceiptRequest::Creation(_) => None,
            ReceiptRequest::Extension(e) => Some(e),
        }
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(tags::RECEIPT);
        self.write_unsigned(&mut w);
        w.into_bytes()
    }

    fn write_unsigned(&self, w: &mut Writer) {
        match &self.request {
            ReceiptRequest::Creation(c) => {
                w.u8(0);
                w.nested(c);
            }
            ReceiptRequest::Extension(e) => {
                w.u8(1);
                w.nested(e);
            }
        }
        w.u64(self.timestamp_ms);
        match self.anchor_ref {
            AnchorRef::Txn(id) => {
                w.u8(1);
                w.u64(id.0);
            }
            AnchorRef::Pending { due_by_ms } => {
                w.u8(0);
                w.u64(due_by_ms);
            }
        }
        w.u64(self.notary_seq);
    }

    pub fn notary_sig_valid(&self, notary_key: &PublicKey) -> bool {
        notary_key.verify(&self.signing_bytes(), &self.notary_sig)
    }

    /// Hash of the canonical encoding; identifies the receipt for dedup.
    pub fn content_hash(&self) -> Digest {
        Digest::sha256(&encode(self))
    }

    pub fn encoded_len(&self) -> usize {
        encode(self).len()
    }
}

impl Wire for Receipt {
    const TAG: u8 = tags::RECEIPT;

    fn write_body(&self, w: &mut Writer) {
        self.write_unsigned(w);
        w.signature(&self.notary_sig);
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let request = match r.u8()? {
            0 => ReceiptRequest::Creation(r.nested()?),
            1 => ReceiptRequest::Extension(r.nested()?),
            _ => return Err(DecodeError::Invalid("receipt kind")),
        };
        let timestamp_ms = r.u64()?;
        let anchor_ref = match r.u8()? {
            0 => AnchorRef::Pending { due_by_ms: r.u64()? },
            1 => AnchorRef::Txn(AnchorTxnId(r.u64()?)),
            _ => return Err(DecodeError::Invalid("anchor ref flag")),
        };
        Ok(Receipt {
            request,
            timestamp_ms,
            anchor_ref,
            notary_seq: r.u64()?,
            notary_sig: r.signature()?,
        })
    }
}

impl Serialize for Receipt {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("Receipt", 6)?;
        s.serialize_field("kind", &self.kind())?;
        s.serialize_field("request", &self.request)?;
        s.serialize_field("timestamp", &self.timestamp_ms)?;
        s.serialize_field("anchor_ref", &self.anchor_ref)?;
        s.serialize_field("notary_seq", &self.notary_seq)?;
        s.serialize_field("notary_sig", &self.notary_sig)?;
        s.end()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReceiptRejection {
    BadNotarySig,
    BadAuthorSig,
    AuthorNotInSet,
    Malformed,
}

impl fmt::Display for ReceiptRejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ReceiptRejection::BadNotarySig => "BAD_NOTARY_SIG",
            ReceiptRejection::BadAuthorSig => "BAD_AUTHOR_SIG",
            ReceiptRejection::AuthorNotInSet => "AUTHOR_NOT_IN_SET",
            ReceiptRejection::Malformed => "MALFORMED",
        };
        f.write_str(s)
    }
}

/// Accepts a receipt iff the Notary signature holds, the embedded request is
/// well formed, every request signer belongs to `authors`, and every request
/// signature holds.
pub fn verify_receipt(receipt: &Receipt, notary_key: &PublicKey, authors: &AuthorSet) -> Result<(), ReceiptRejection> {
    if !receipt.notary_sig_valid(notary_key) {
        return Err(ReceiptRejection::BadNotarySig);
    }
    match &receipt.request {
        ReceiptRequest::Creation(c) => {
            if c.initial_size == 0 || !c.authors.is_canonical() {
                return Err(ReceiptRejection::Malformed);
            }
            if !authors.contains(&c.creator_key) || !c.authors.contains(&c.creator_key) {
                return Err(ReceiptRejection::AuthorNotInSet);
            }
            if !c.signature_valid() {
                return Err(ReceiptRejection::BadAuthorSig);
            }
        }
        ReceiptRequest::Extension(e) => {
            if e.check_shape().is_err() {
                return Err(ReceiptRejection::Malformed);
            }
            if e.author_keys.iter().any(|k| !authors.contains(k)) {
                return Err(ReceiptRejection::AuthorNotInSet);
            }
            if e.first_bad_signature().is_some() {
                return Err(ReceiptRejection::BadAuthorSig);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MisbehaviorKind {
    /// Two Notary-signed receipts extend the same history state differently.
    Fork,
    /// The Notary signed a receipt whose request fails author validation.
    UnauthorizedAccept,
    /// A receipt's anchoring obligation is unmet in the anchor log.
    AnchorDesync,
}

/// Self-contained evidence of Notary misbehavior.
///
/// * `Fork`: `receipts` holds the two conflicting receipts.
/// * `UnauthorizedAccept`: `receipts[0]` is the ledger's creation receipt;
///   `receipts[1]`, when present, is the offending receipt. A lone creation
///   receipt is itself the offender.
/// * `AnchorDesync`: `receipts[0]` is the receipt whose anchoring is unmet;
///   `anchor_txn` repeats its cited transaction, if any.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct MisbehaviorProof {
    pub kind: MisbehaviorKind,
    pub ledger_id: LedgerId,
    pub receipts: Vec<Receipt>,
    pub anchor_txn: Option<AnchorTxnId>,
}

impl Wire for MisbehaviorProof {
    const TAG: u8 = tags::MISBEHAVIOR_PROOF;

    fn write_body(&self, w: &mut Writer) {
        w.u8(match self.kind {
            MisbehaviorKind::Fork => 0,
            MisbehaviorKind::UnauthorizedAccept => 1,
            MisbehaviorKind::AnchorDesync => 2,
        });
        w.raw(self.ledger_id.as_bytes());
        w.count(self.receipts.len());
        for r in &self.receipts {
            w.nested(r);
        }
        match self.anchor_txn {
            None => w.u8(0),
            Some(id) => {
                w.u8(1);
                w.u64(id.0);
            }
        }
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let kind = match r.u8()? {
            0 => MisbehaviorKind::Fork,
            1 => MisbehaviorKind::UnauthorizedAccept,
            2 => MisbehaviorKind::AnchorDesync,
            _ => return Err(DecodeError::Invalid("misbehavior kind")),
        };
        let ledger_id = LedgerId(r.take(16)?.try_into().expect("16 bytes"));
        let n = r.count(4)?;
        let receipts = (0..n).map(|_| r.nested()).collect::<Result<_, _>>()?;
        let anchor_txn = match r.u8()? {
            0 => None,
            1 => Some(AnchorTxnId(r.u64()?)),
            _ => return Err(DecodeError::Invalid("anchor txn flag")),
        };
        Ok(MisbehaviorProof {
            kind,
            ledger_id,
            receipts,
            anchor_txn,
        })
    }
}

/// One JSON debug line: `{"type": <name>, ...fields}` with binary values in
/// lowercase hex.
pub fn json_line<T: Serialize>(type_name: &str, message: &T) -> String {
    let mut value = serde_json::to_value(message).expect("message serializes");
    if let serde_json::Value::Object(map) = &mut value {
        map.insert("type".into(), serde_json::Value::String(type_name.into()));
    }
    value.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashtree::{leaf_hash, prove_consistency, root_from_leaf_digests};
    use crate::identity::generate_keypair;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn kp(i: u8) -> KeyPair {
        generate_keypair([i; 32])
    }

    fn creation(creator: &KeyPair, others: &[&KeyPair]) -> CreationRequest {
        let mut keys: Vec<_> = others.iter().map(|k| k.public()).collect();
        keys.push(creator.public());
        let authors = AuthorSet::new(keys).unwrap();
        let id = LedgerId::derive(&creator.public(), 0);
        CreationRequest::signed(creator, id, authors, leaf_hash(b"g"), 1)
    }

    fn random_extension(rng: &mut ChaCha8Rng, signers: &[&KeyPair]) -> ExtensionRequest {
        let n = rng.gen_range(2..40usize);
        let m = rng.gen_range(1..n);
        let leaves: Vec<Digest> = (0..n).map(|_| leaf_hash(&rng.gen::<[u8; 8]>())).collect();
        let proof = prove_consistency(&leaves, m as u64).unwrap();
        let mut id = [0u8; 16];
        rng.fill(&mut id);
        ExtensionRequest::signed(
            LedgerId::from_bytes(id),
            (root_from_leaf_digests(&leaves[..m]), m as u64),
            (root_from_leaf_digests(&leaves), n as u64),
            proof,
            signers,
        )
    }

    #[test]
    fn creation_request_roundtrip_and_signature() {
        let a = kp(1);
        let req = creation(&a, &[&kp(2)]);
        assert!(req.signature_valid());
        let bytes = encode(&req);
        assert_eq!(encode(&req), bytes);
        assert_eq!(decode::<CreationRequest>(&bytes).unwrap(), req);
    }

    #[test]
    fn trailing_byte_and_bad_length_are_malformed() {
        let req = creation(&kp(1), &[]);
        let mut bytes = encode(&req);
        bytes.push(0);
        assert_eq!(decode::<CreationRequest>(&bytes), Err(DecodeError::TrailingBytes(1)));

        let receipt = Receipt::signed(
            &kp(9),
            ReceiptRequest::Creation(req),
            5,
            AnchorRef::Txn(AnchorTxnId(0)),
            0,
        );
        let mut bytes = encode(&receipt);
        // The nested request length prefix starts right after tag and kind.
        bytes[2..6].copy_from_slice(&u32::MAX.to_be_bytes());
        assert_eq!(decode::<Receipt>(&bytes), Err(DecodeError::Truncated));
        assert!(matches!(
            decode::<Receipt>(&[tags::CREATION_REQUEST]),
            Err(DecodeError::WrongTag { .. })
        ));
    }

    #[test]
    fn non_canonical_author_set_rejected_on_decode() {
        let a = kp(1);
        let b = kp(2);
        let mut keys = vec![a.public(), b.public()];
        keys.sort();
        keys.reverse();
        let req = CreationRequest::signed(
            &a,
            LedgerId::derive(&a.public(), 1),
            AuthorSet::from_raw(keys),
            leaf_hash(b"x"),
            1,
        );
        assert!(matches!(
            decode::<CreationRequest>(&encode(&req)),
            Err(DecodeError::Invalid(_))
        ));
    }

    #[test]
    fn fuzz_roundtrip_and_injectivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let keys: Vec<KeyPair> = (1..=4).map(kp).collect();
        let notary = kp(99);
        let mut seen = HashSet::new();
        for i in 0..10_000u64 {
            let signer_count = rng.gen_range(1..=3);
            let signers: Vec<&KeyPair> = keys.iter().take(signer_count).collect();
            let ext = random_extension(&mut rng, &signers);
            let anchor_ref = if rng.gen_bool(0.5) {
                AnchorRef::Txn(AnchorTxnId(rng.gen_range(0..1000)))
            } else {
                AnchorRef::Pending { due_by_ms: rng.gen() }
            };
            let receipt = Receipt {
                request: ReceiptRequest::Extension(ext),
                timestamp_ms: rng.gen(),
                anchor_ref,
                notary_seq: i,
                notary_sig: notary.sign(&[i as u8]),
            };
            let bytes = encode(&receipt);
            assert_eq!(decode::<Receipt>(&bytes).unwrap(), receipt);
            assert!(seen.insert(bytes), "two messages share an encoding");
        }
    }

    #[test]
    fn one_field_difference_changes_bytes() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = kp(1);
        for _ in 0..500 {
            let ext = random_extension(&mut rng, &[&a]);
            let base = encode(&ext);
            let mut other = ext.clone();
            match rng.gen_range(0..4) {
                0 => other.new_size += 1,
                1 => other.prev_digest = leaf_hash(b"other"),
                2 => {
                    let mut id = *other.ledger_id.as_bytes();
                    id[0] ^= 1;
                    other.ledger_id = LedgerId::from_bytes(id);
                }
                _ => other.author_sigs[0] = a.sign(b"different"),
            }
            assert_ne!(encode(&other), base);
        }
    }

    #[test]
    fn verify_receipt_reasons() {
        let a = kp(1);
        let outsider = kp(3);
        let notary = kp(50);
        let req = creation(&a, &[&kp(2)]);
        let authors = req.authors.clone();
        let creation_receipt = Receipt::signed(
            &notary,
            ReceiptRequest::Creation(req.clone()),
            1,
            AnchorRef::Txn(AnchorTxnId(0)),
            0,
        );
        assert_eq!(verify_receipt(&creation_receipt, &notary.public(), &authors), Ok(()));

        let forged = Receipt::signed(
            &kp(51),
            ReceiptRequest::Creation(req.clone()),
            1,
            AnchorRef::Txn(AnchorTxnId(0)),
            0,
        );
        assert_eq!(
            verify_receipt(&forged, &notary.public(), &authors),
            Err(ReceiptRejection::BadNotarySig)
        );

        let leaves = vec![leaf_hash(b"g"), leaf_hash(b"h")];
        let ext = ExtensionRequest::signed(
            req.ledger_id,
            (leaves[0], 1),
            (root_from_leaf_digests(&leaves), 2),
            prove_consistency(&leaves, 1).unwrap(),
            &[&outsider],
        );
        let bad = Receipt::signed(
            &notary,
            ReceiptRequest::Extension(ext.clone()),
            2,
            AnchorRef::Txn(AnchorTxnId(1)),
            1,
        );
        assert_eq!(
            verify_receipt(&bad, &notary.public(), &authors),
            Err(ReceiptRejection::AuthorNotInSet)
        );

        let mut tampered = ExtensionRequest::signed(
            req.ledger_id,
            (leaves[0], 1),
            (root_from_leaf_digests(&leaves), 2),
            prove_consistency(&leaves, 1).unwrap(),
            &[&a],
        );
        tampered.author_sigs[0] = a.sign(b"something else");
        let bad_sig = Receipt::signed(
            &notary,
            ReceiptRequest::Extension(tampered),
            2,
            AnchorRef::Txn(AnchorTxnId(1)),
            1,
        );
        assert_eq!(
            verify_receipt(&bad_sig, &notary.public(), &authors),
            Err(ReceiptRejection::BadAuthorSig)
        );
    }

    #[test]
    fn json_line_uses_hex_fields() {
        let req = creation(&kp(1), &[]);
        let line = json_line("CreationRequest", &req);
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        assert_eq!(v["type"], "CreationRequest");
        assert_eq!(v["ledger_id"], req.ledger_id.to_hex());
        assert_eq!(v["initial_digest"], req.initial_digest.to_hex());
        assert!(!line.contains('\n'));
    }

    #[test]
    fn misbehavior_proof_roundtrip() {
        let notary = kp(50);
        let req = creation(&kp(1), &[]);
        let r = Receipt::signed(
            &notary,
            ReceiptRequest::Creation(req.clone()),
            1,
            AnchorRef::Pending { due_by_ms: 10 },
            0,
        );
        let p = MisbehaviorProof {
            kind: MisbehaviorKind::AnchorDesync,
            ledger_id: req.ledger_id,
            receipts: vec![r],
            anchor_txn: None,
        };
        assert_eq!(decode::<MisbehaviorProof>(&encode(&p)).unwrap(), p);
    }
}
