//! The Notary: validates creation and extension requests, keeps the single
//! official history of every ledger, anchors it to the public log and signs
//! receipts.
//!
//! In base mode the Notary never looks at block contents. Repository mode
//! additionally stores verified blocks, can certify them and serves them to
//! authors; policy mode enforces a per-ledger [`Policy`] held in block 0.
//! Delayed notarization returns receipts first and anchors queued steps in
//! one batch per interval.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard, PoisonError, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::{AnchorPayload, ExtendStep, SharedAnchorLog};
use crate::hashtree::{empty_root, leaf_hash, verify_consistency, Digest, Frontier};
use crate::identity::{ActorId, KeyPair, PublicKey, Signature};
use crate::protocol::codec::{self, tags, DecodeError, Reader, Wire, Writer};
use crate::protocol::{AnchorRef, AuthorSet, CreationRequest, ExtensionRequest, LedgerId, Receipt, ReceiptRequest};

/// File magic of Notary state snapshots.
pub const SNAPSHOT_MAGIC: &[u8; 4] = b"HYBN";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NotaryError {
    #[error("ledger id already in use")]
    IdInUse,
    #[error("invalid author set: {0}")]
    InvalidAuthorSet(&'static str),
    #[error("request signature does not verify")]
    BadSignature,
    #[error("blocks do not hash to the requested digest")]
    DigestMismatch,
    #[error("policy violation: {0}")]
    PolicyViolation(String),
    #[error("unknown ledger")]
    UnknownLedger,
    #[error("request extends a stale digest; official state has size {current_size}")]
    StaleDigest { current_digest: Digest, current_size: u64 },
    #[error("consistency proof does not verify")]
    InvalidProof,
    #[error("signer is not an author of the ledger")]
    Unauthorized,
    #[error("requested block is not stored")]
    NotStored,
    #[error("repository mode requires the request's blocks")]
    MissingBlocks,
    #[error("operation requires repository mode")]
    RepositoryDisabled,
    #[error("malformed request: {0}")]
    Malformed(&'static str),
    #[error("snapshot is behind the anchor log for ledger {0}")]
    SnapshotStale(LedgerId),
    #[error("snapshot io: {0}")]
    SnapshotIo(String),
}

impl NotaryError {
    /// Stable upper-case code used in reports.
    pub fn code(&self) -> &'static str {
        match self {
            NotaryError::IdInUse => "ID_IN_USE",
            NotaryError::InvalidAuthorSet(_) => "INVALID_AUTHOR_SET",
            NotaryError::BadSignature => "BAD_SIGNATURE",
            NotaryError::DigestMismatch => "DIGEST_MISMATCH",
            NotaryError::PolicyViolation(_) => "POLICY_VIOLATION",
            NotaryError::UnknownLedger => "UNKNOWN_LEDGER",
            NotaryError::StaleDigest { .. } => "STALE_DIGEST",
            NotaryError::InvalidProof => "INVALID_PROOF",
            NotaryError::Unauthorized => "UNAUTHORIZED",
            NotaryError::NotStored => "NOT_STORED",
            NotaryError::MissingBlocks => "MISSING_BLOCKS",
            NotaryError::RepositoryDisabled => "REPOSITORY_DISABLED",
            NotaryError::Malformed(_) => "MALFORMED",
            NotaryError::SnapshotStale(_) => "SNAPSHOT_STALE",
            NotaryError::SnapshotIo(_) => "SNAPSHOT_IO",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Notarization {
    Immediate,
    Delayed { interval_ms: u64 },
}

#[derive(Clone, Debug)]
pub struct NotaryConfig {
    pub keypair: KeyPair,
    pub repository: bool,
    pub policy: bool,
    pub notarization: Notarization,
}

impl NotaryConfig {
    /// Base mode with immediate notarization.
    pub fn base(keypair: KeyPair) -> Self {
        NotaryConfig {
            keypair,
            repository: false,
            policy: false,
            notarization: Notarization::Immediate,
        }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if self.policy && !self.repository {
            return Err("policy mode requires repository mode");
        }
        if let Notarization::Delayed { interval_ms: 0 } = self.notarization {
            return Err("delayed notarization needs a positive interval");
        }
        Ok(())
    }
}

/// Ledger-specific rules enforced in policy mode. Its canonical encoding is
/// the entire content of block 0 of the ledger.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Policy {
    pub max_block_bytes: Option<u32>,
    pub min_signers: Option<u32>,
    /// Allowed values of the first byte of every block.
    pub allowed_content_tags: Option<Vec<u8>>,
}

impl Policy {
    pub fn to_block(&self) -> Vec<u8> {
        codec::encode(self)
    }

    pub fn from_block(block: &[u8]) -> Result<Self, DecodeError> {
        codec::decode(block)
    }

    pub fn check_blocks<B: AsRef<[u8]>>(&self, blocks: &[B]) -> Result<(), String> {
        for (i, b) in blocks.iter().enumerate() {
            let b = b.as_ref();
            if let Some(max) = self.max_block_bytes {
                if b.len() > max as usize {
                    return Err(format!("block {i} has {} bytes, limit {max}", b.len()));
                }
            }
            if let Some(tags) = &self.allowed_content_tags {
                match b.first() {
                    Some(t) if tags.contains(t) => {}
                    Some(t) => return Err(format!("block {i} has content tag {t:#04x}")),
                    None => return Err(format!("block {i} is empty and has no content tag")),
                }
            }
        }
        Ok(())
    }

    pub fn check_signers(&self, count: usize) -> Result<(), String> {
        match self.min_signers {
            Some(min) if count < min as usize => Err(format!("{count} signers, {min} required")),
            _ => Ok(()),
        }
    }
}

impl Wire for Policy {
    const TAG: u8 = tags::POLICY;

    fn write_body(&self, w: &mut Writer) {
        for bound in [self.max_block_bytes, self.min_signers] {
            match bound {
                None => w.u8(0),
                Some(v) => {
                    w.u8(1);
                    w.u32(v);
                }
            }
        }
        match &self.allowed_content_tags {
            None => w.u8(0),
            Some(t) => {
                w.u8(1);
                w.bytes(t);
            }
        }
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let bound = |r: &mut Reader<'_>| -> Result<Option<u32>, DecodeError> {
            if !r.bool()? {
                return Ok(None);
            }
            match r.u32()? {
                0 => Err(DecodeError::Invalid("policy bounds must be positive")),
                v => Ok(Some(v)),
            }
        };
        let max_block_bytes = bound(r)?;
        let min_signers = bound(r)?;
        let allowed_content_tags = if r.bool()? {
            let t = r.bytes()?.to_vec();
            if t.is_empty() {
                return Err(DecodeError::Invalid("empty content tag list"));
            }
            Some(t)
        } else {
            None
        };
        Ok(Policy {
            max_block_bytes,
            min_signers,
            allowed_content_tags,
        })
    }
}

/// Notary statement that blocks with the given leaf digests were stored at
/// `indices` of the ledger whose official state was `(digest, size)`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockCertificate {
    pub ledger_id: LedgerId,
    pub digest: Digest,
    pub size: u64,
    pub indices: Vec<u64>,
    pub leaf_digests: Vec<Digest>,
    pub timestamp_ms: u64,
    pub notary_sig: Signature,
}

impl BlockCertificate {
    fn write_unsigned(&self, w: &mut Writer) {
        w.raw(self.ledger_id.as_bytes());
        w.digest(&self.digest);
        w.u64(self.size);
        w.count(self.indices.len());
        for i in &self.indices {
            w.u64(*i);
        }
        w.digests(&self.leaf_digests);
        w.u64(self.timestamp_ms);
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(tags::BLOCK_CERTIFICATE);
        self.write_unsigned(&mut w);
        w.into_bytes()
    }

    pub fn verify(&self, notary_key: &PublicKey) -> bool {
        self.indices.len() == self.leaf_digests.len() && notary_key.verify(&self.signing_bytes(), &self.notary_sig)
    }
}

impl Wire for BlockCertificate {
    const TAG: u8 = tags::BLOCK_CERTIFICATE;

    fn write_body(&self, w: &mut Writer) {
        self.write_unsigned(w);
        w.signature(&self.notary_sig);
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let ledger_id = LedgerId::from_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let digest = r.digest()?;
        let size = r.u64()?;
        let n = r.count(8)?;
        let indices = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
        Ok(BlockCertificate {
            ledger_id,
            digest,
            size,
            indices,
            leaf_digests: r.digests()?,
            timestamp_ms: r.u64()?,
            notary_sig: r.signature()?,
        })
    }
}

/// Signed request for stored blocks, proving control of `requester`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AccessRequest {
    pub ledger_id: LedgerId,
    pub indices: Vec<u64>,
    pub requester: PublicKey,
    pub signature: Signature,
}

impl AccessRequest {
    pub fn signed(keypair: &KeyPair, ledger_id: LedgerId, indices: Vec<u64>) -> Self {
        let mut req = AccessRequest {
            ledger_id,
            indices,
            requester: keypair.public(),
            signature: Signature::from_bytes([0; 64]),
        };
        req.signature = keypair.sign(&req.signing_bytes());
        req
    }

    fn write_unsigned(&self, w: &mut Writer) {
        w.raw(self.ledger_id.as_bytes());
        w.count(self.indices.len());
        for i in &self.indices {
            w.u64(*i);
        }
        w.public_key(&self.requester);
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(tags::ACCESS_REQUEST);
        self.write_unsigned(&mut w);
        w.into_bytes()
    }
}

impl Wire for AccessRequest {
    const TAG: u8 = tags::ACCESS_REQUEST;

    fn write_body(&self, w: &mut Writer) {
        self.write_unsigned(w);
        w.signature(&self.signature);
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let ledger_id = LedgerId::from_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let n = r.count(8)?;
        let indices = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
        Ok(AccessRequest {
            ledger_id,
            indices,
            requester: r.public_key()?,
            signature: r.signature()?,
        })
    }
}

/// The operations nodes and the simulator use. Implemented by [`Notary`]
/// and by fault-injecting variants.
pub trait NotaryService: Send + Sync {
    fn public_key(&self) -> PublicKey;

    fn address(&self) -> ActorId {
        self.public_key().actor_id()
    }

    /// `blocks` is required in repository mode and ignored otherwise.
    fn handle_create(
        &self,
        request: &CreationRequest,
        blocks: Option<&[Vec<u8>]>,
        now_ms: u64,
    ) -> Result<Receipt, NotaryError>;

    /// `blocks` is required in repository mode and ignored otherwise.
    fn handle_extend(
        &self,
        request: &ExtensionRequest,
        blocks: Option<&[Vec<u8>]>,
        now_ms: u64,
    ) -> Result<Receipt, NotaryError>;

    /// Anchors every queued step that is due. No-op in immediate mode.
    fn flush(&self, now_ms: u64) -> Vec<crate::protocol::AnchorTxnId>;

    /// Earliest time at which [`NotaryService::flush`] has work to do.
    fn next_due(&self) -> Option<u64>;

    fn certify_blocks(
        &self,
        ledger_id: LedgerId,
        indices: &[u64],
        now_ms: u64,
    ) -> Result<BlockCertificate, NotaryError>;

    fn serve_blocks(&self, request: &AccessRequest) -> Result<Vec<(u64, Vec<u8>)>, NotaryError>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LedgerRecord {
    pub ledger_id: LedgerId,
    pub authors: AuthorSet,
    pub digest: Digest,
    pub size: u64,
    pub next_seq: u64,
    pub policy: Option<Policy>,
    pub last_anchored_digest: Digest,
    pub last_anchored_size: u64,
    /// Delayed mode: the Init transaction has not been submitted yet.
    pub init_pending: bool,
    pub pending_steps: Vec<ExtendStep>,
    pub due_by_ms: Option<u64>,
    /// Repository mode only.
    pub blocks: Vec<Vec<u8>>,
    leaves: Frontier,
}

impl LedgerRecord {
    fn write(&self, w: &mut Writer) {
        w.raw(self.ledger_id.as_bytes());
        w.count(self.authors.len());
        for k in self.authors.keys() {
            w.public_key(k);
        }
        w.digest(&self.digest);
        w.u64(self.size);
        w.u64(self.next_seq);
        match &self.policy {
            None => w.u8(0),
            Some(p) => {
                w.u8(1);
                w.nested(p);
            }
        }
        w.digest(&self.last_anchored_digest);
        w.u64(self.last_anchored_size);
        w.bool(self.init_pending);
        w.count(self.pending_steps.len());
        for s in &self.pending_steps {
            w.nested(&StepMessage(s.clone()));
        }
        match self.due_by_ms {
            None => w.u8(0),
            Some(t) => {
                w.u8(1);
                w.u64(t);
            }
        }
        w.count(self.blocks.len());
        for b in &self.blocks {
            w.bytes(b);
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let ledger_id = LedgerId::from_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let nk = r.count(PublicKey::LEN)?;
        let keys = (0..nk).map(|_| r.public_key()).collect::<Result<Vec<_>, _>>()?;
        let authors = AuthorSet::from_raw(keys);
        if !authors.is_canonical() {
            return Err(DecodeError::Invalid("author set not canonical"));
        }
        let digest = r.digest()?;
        let size = r.u64()?;
        let next_seq = r.u64()?;
        let policy = if r.bool()? { Some(r.nested()?) } else { None };
        let last_anchored_digest = r.digest()?;
        let last_anchored_size = r.u64()?;
        let init_pending = r.bool()?;
        let ns = r.count(4)?;
        let pending_steps = (0..ns)
            .map(|_| r.nested::<StepMessage>().map(|m| m.0))
            .collect::<Result<_, _>>()?;
        let due_by_ms = if r.bool()? { Some(r.u64()?) } else { None };
        let nb = r.count(4)?;
        let blocks: Vec<Vec<u8>> = (0..nb)
            .map(|_| r.bytes().map(<[u8]>::to_vec))
            .collect::<Result<_, _>>()?;
        let mut leaves = Frontier::new();
        for b in &blocks {
            leaves.push(leaf_hash(b));
        }
        Ok(LedgerRecord {
            ledger_id,
            authors,
            digest,
            size,
            next_seq,
            policy,
            last_anchored_digest,
            last_anchored_size,
            init_pending,
            pending_steps,
            due_by_ms,
            blocks,
            leaves,
        })
    }
}

/// Pending steps are stored as length-prefixed anchor payloads.
struct StepMessage(ExtendStep);

impl Wire for StepMessage {
    const TAG: u8 = tags::ANCHOR_TXN;

    fn write_body(&self, w: &mut Writer) {
        let txn = crate::anchor::AnchorTxn {
            txn_id: crate::protocol::AnchorTxnId(0),
            address: ActorId::from_digest(Digest::default()),
            submitted_at_ms: 0,
            payload: AnchorPayload::Extend(self.0.clone()),
        };
        txn.write_body(w);
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match crate::anchor::AnchorTxn::read_body(r)?.payload {
            AnchorPayload::Extend(step) => Ok(StepMessage(step)),
            _ => Err(DecodeError::Invalid("pending step")),
        }
    }
}

struct Snapshot(Vec<LedgerRecord>);

impl Wire for Snapshot {
    const TAG: u8 = tags::NOTARY_SNAPSHOT;

    fn write_body(&self, w: &mut Writer) {
        w.count(self.0.len());
        for rec in &self.0 {
            rec.write(w);
        }
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let n = r.count(16)?;
        (0..n)
            .map(|_| LedgerRecord::read(r))
            .collect::<Result<_, _>>()
            .map(Snapshot)
    }
}

/// Checks a faulty Notary variant may skip.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Checks {
    pub id_availability: bool,
    pub authorization: bool,
    pub anchoring: bool,
}

impl Checks {
    pub(crate) const ALL: Checks = Checks {
        id_availability: true,
        authorization: true,
        anchoring: true,
    };
}

type Record = Arc<Mutex<LedgerRecord>>;

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

/// The honest Notary. Requests for one ledger are serialized by that
/// ledger's mutex; the map lock is held exclusively only to allocate ids.
pub struct Notary {
    config: NotaryConfig,
    anchor: SharedAnchorLog,
    ledgers: RwLock<BTreeMap<LedgerId, Record>>,
}

impl Notary {
    pub fn new(config: NotaryConfig, anchor: SharedAnchorLog) -> Self {
        assert!(config.validate().is_ok(), "invalid notary configuration");
        Notary {
            config,
            anchor,
            ledgers: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn config(&self) -> &NotaryConfig {
        &self.config
    }

    pub fn anchor_log(&self) -> &SharedAnchorLog {
        &self.anchor
    }

    fn record(&self, id: &LedgerId) -> Result<Record, NotaryError> {
        let map = self.ledgers.read().unwrap_or_else(PoisonError::into_inner);
        map.get(id).cloned().ok_or(NotaryError::UnknownLedger)
    }

    /// A copy of the current record for `id`.
    pub fn ledger(&self, id: &LedgerId) -> Option<LedgerRecord> {
        self.record(id).ok().map(|r| lock(&r).clone())
    }

    pub fn ledger_ids(&self) -> Vec<LedgerId> {
        let map = self.ledgers.read().unwrap_or_else(PoisonError::into_inner);
        map.keys().copied().collect()
    }

    pub(crate) fn authors_of(&self, id: &LedgerId) -> Option<AuthorSet> {
        self.ledger(id).map(|r| r.authors)
    }

    fn submit(&self, now_ms: u64, payload: AnchorPayload) -> crate::protocol::AnchorTxnId {
        let mut log = lock(&self.anchor);
        log.advance_to(now_ms);
        log.submit(self.config.keypair.actor_id(), payload)
    }

    fn next_anchor_id(&self) -> crate::protocol::AnchorTxnId {
        lock(&self.anchor).next_id()
    }

    /// Repository-mode block requirement; `None` in base mode.
    fn required_blocks<'a>(&self, blocks: Option<&'a [Vec<u8>]>) -> Result<Option<&'a [Vec<u8>]>, NotaryError> {
        if !self.config.repository {
            return Ok(None);
        }
        blocks.map(Some).ok_or(NotaryError::MissingBlocks)
    }

    pub(crate) fn create_with(
        &self,
        req: &CreationRequest,
        blocks: Option<&[Vec<u8>]>,
        now_ms: u64,
        checks: Checks,
    ) -> Result<Receipt, NotaryError> {
        let mut map = self.ledgers.write().unwrap_or_else(PoisonError::into_inner);
        if checks.id_availability && map.contains_key(&req.ledger_id) {
            return Err(NotaryError::IdInUse);
        }
        if !req.authors.is_canonical() {
            return Err(NotaryError::InvalidAuthorSet("empty, unsorted or duplicated keys"));
        }
        if !req.authors.contains(&req.creator_key) {
            return Err(NotaryError::InvalidAuthorSet("creator is not a member"));
        }
        if req.initial_size == 0 {
            return Err(NotaryError::Malformed("initial size must be positive"));
        }
        if !req.signature_valid() {
            return Err(NotaryError::BadSignature);
        }
        let mut leaves = Frontier::new();
        let mut policy = None;
        let stored = match self.required_blocks(blocks)? {
            None => Vec::new(),
            Some(blocks) => {
                for b in blocks {
                    leaves.push(leaf_hash(b));
                }
                if blocks.len() as u64 != req.initial_size || leaves.root() != req.initial_digest {
                    return Err(NotaryError::DigestMismatch);
                }
                if self.config.policy {
                    let p = Policy::from_block(&blocks[0])
                        .map_err(|e| NotaryError::PolicyViolation(format!("block 0 is not a policy: {e}")))?;
                    p.check_blocks(&blocks[1..]).map_err(NotaryError::PolicyViolation)?;
                    policy = Some(p);
                }
                blocks.to_vec()
            }
        };

        let mut record = LedgerRecord {
            ledger_id: req.ledger_id,
            authors: req.authors.clone(),
            digest: req.initial_digest,
            size: req.initial_size,
            next_seq: 1,
            policy,
            last_anchored_digest: empty_root(),
            last_anchored_size: 0,
            init_pending: false,
            pending_steps: Vec::new(),
            due_by_ms: None,
            blocks: stored,
            leaves,
        };
        let init = AnchorPayload::Init {
            ledger_id: req.ledger_id,
            digest: req.initial_digest,
            size: req.initial_size,
        };
        let anchor_ref = match self.config.notarization {
            Notarization::Immediate if checks.anchoring => {
                record.last_anchored_digest = req.initial_digest;
                record.last_anchored_size = req.initial_size;
                AnchorRef::Txn(self.submit(now_ms, init))
            }
            Notarization::Immediate => AnchorRef::Txn(self.next_anchor_id()),
            Notarization::Delayed { interval_ms } => {
                let due_by_ms = now_ms + interval_ms;
                record.init_pending = checks.anchoring;
                record.due_by_ms = checks.anchoring.then_some(due_by_ms);
                AnchorRef::Pending { due_by_ms }
            }
        };
        let receipt = Receipt::signed(
            &self.config.keypair,
            ReceiptRequest::Creation(req.clone()),
            now_ms,
            anchor_ref,
            0,
        );
        log::debug!("created ledger {}", req.ledger_id);
        map.insert(req.ledger_id, Arc::new(Mutex::new(record)));
        Ok(receipt)
    }

    pub(crate) fn extend_with(
        &self,
        req: &ExtensionRequest,
        blocks: Option<&[Vec<u8>]>,
        now_ms: u64,
        checks: Checks,
    ) -> Result<Receipt, NotaryError> {
        let record = self.record(&req.ledger_id)?;
        let mut rec = lock(&record);
        req.check_shape().map_err(NotaryError::Malformed)?;
        if (req.prev_digest, req.prev_size) != (rec.digest, rec.size) {
            return Err(NotaryError::StaleDigest {
                current_digest: rec.digest,
                current_size: rec.size,
            });
        }
        if !verify_consistency(
            &req.prev_digest,
            req.prev_size,
            &req.new_digest,
            req.new_size,
            &req.proof,
        ) {
            return Err(NotaryError::InvalidProof);
        }
        if checks.authorization && req.author_keys.iter().any(|k| !rec.authors.contains(k)) {
            return Err(NotaryError::Unauthorized);
        }
        if req.first_bad_signature().is_some() {
            return Err(NotaryError::BadSignature);
        }
        let mut leaves = rec.leaves.clone();
        if let Some(blocks) = self.required_blocks(blocks)? {
            for b in blocks {
                leaves.push(leaf_hash(b));
            }
            if blocks.len() as u64 != req.new_size - req.prev_size || leaves.root() != req.new_digest {
                return Err(NotaryError::DigestMismatch);
            }
            if let Some(p) = &rec.policy {
                p.check_signers(req.author_keys.len())
                    .map_err(NotaryError::PolicyViolation)?;
                p.check_blocks(blocks).map_err(NotaryError::PolicyViolation)?;
            }
            rec.blocks.extend_from_slice(blocks);
            rec.leaves = leaves;
        }

        let step = ExtendStep::from_request(req);
        let anchor_ref = match self.config.notarization {
            Notarization::Immediate if checks.anchoring => {
                rec.last_anchored_digest = req.new_digest;
                rec.last_anchored_size = req.new_size;
                AnchorRef::Txn(self.submit(now_ms, AnchorPayload::Extend(step)))
            }
            Notarization::Immediate => AnchorRef::Txn(self.next_anchor_id()),
            Notarization::Delayed { interval_ms } => {
                let due_by_ms = *rec.due_by_ms.get_or_insert(now_ms + interval_ms);
                if checks.anchoring {
                    rec.pending_steps.push(step);
                }
                AnchorRef::Pending { due_by_ms }
            }
        };
        let seq = rec.next_seq;
        rec.next_seq += 1;
        rec.digest = req.new_digest;
        rec.size = req.new_size;
        Ok(Receipt::signed(
            &self.config.keypair,
            ReceiptRequest::Extension(req.clone()),
            now_ms,
            anchor_ref,
            seq,
        ))
    }

    /// Canonical snapshot of every ledger record.
    pub fn snapshot(&self) -> Vec<u8> {
        let map = self.ledgers.read().unwrap_or_else(PoisonError::into_inner);
        let records = map.values().map(|r| lock(r).clone()).collect();
        codec::to_file_bytes(SNAPSHOT_MAGIC, &Snapshot(records))
    }

    pub fn persist(&self, path: &Path) -> Result<(), NotaryError> {
        fs::write(path, self.snapshot()).map_err(|e| NotaryError::SnapshotIo(e.to_string()))
    }

    /// Rebuilds a Notary from a snapshot and reconciles it with the anchor
    /// log: steps the log already holds are dropped from the queues, the
    /// rest stay pending and go out with the next flush. Receipts issued
    /// after the snapshot was taken cannot be recovered, so a log that is
    /// ahead of a record is an error.
    pub fn restore(config: NotaryConfig, anchor: SharedAnchorLog, snapshot: &[u8]) -> Result<Self, NotaryError> {
        let Snapshot(mut records) =
            codec::from_file_bytes(SNAPSHOT_MAGIC, snapshot).map_err(|e| NotaryError::SnapshotIo(e.to_string()))?;
        let address = config.keypair.actor_id();
        {
            let log = lock(&anchor);
            for rec in &mut records {
                let mut anchored: Option<(Digest, u64)> = None;
                for t in log.submitted().iter().filter(|t| t.address == address) {
                    if t.payload.ledger_id() != rec.ledger_id {
                        continue;
                    }
                    if let AnchorPayload::Init { digest, size, .. } = t.payload {
                        anchored.get_or_insert((digest, size));
                    }
                    for s in t.payload.steps() {
                        if anchored == Some((s.prev_digest, s.prev_size)) {
                            anchored = Some((s.new_digest, s.new_size));
                        }
                    }
                }
                let Some((digest, size)) = anchored else { continue };
                if size > rec.size {
                    return Err(NotaryError::SnapshotStale(rec.ledger_id));
                }
                rec.init_pending = false;
                rec.pending_steps.retain(|s| s.new_size > size);
                rec.last_anchored_digest = digest;
                rec.last_anchored_size = size;
                if rec.pending_steps.is_empty() {
                    rec.due_by_ms = None;
                }
            }
        }
        let notary = Notary::new(config, anchor);
        {
            let mut map = notary.ledgers.write().unwrap_or_else(PoisonError::into_inner);
            for rec in records {
                map.insert(rec.ledger_id, Arc::new(Mutex::new(rec)));
            }
        }
        Ok(notary)
    }

    pub fn load(config: NotaryConfig, anchor: SharedAnchorLog, path: &Path) -> Result<Self, NotaryError> {
        let bytes = fs::read(path).map_err(|e| NotaryError::SnapshotIo(e.to_string()))?;
        Self::restore(config, anchor, &bytes)
    }
}

impl NotaryService for Notary {
    fn public_key(&self) -> PublicKey {
        self.config.keypair.public()
    }

    fn handle_create(
        &self,
        request: &CreationRequest,
        blocks: Option<&[Vec<u8>]>,
        now_ms: u64,
    ) -> Result<Receipt, NotaryError> {
        self.create_with(request, blocks, now_ms, Checks::ALL)
    }

    fn handle_extend(
        &self,
        request: &ExtensionRequest,
        blocks: Option<&[Vec<u8>]>,
        now_ms: u64,
    ) -> Result<Receipt, NotaryError> {
        self.extend_with(request, blocks, now_ms, Checks::ALL)
    }

    fn flush(&self, now_ms: u64) -> Vec<crate::protocol::AnchorTxnId> {
        let map = self.ledgers.read().unwrap_or_else(PoisonError::into_inner);
        let mut ids = Vec::new();
        for record in map.values() {
            let mut rec = lock(record);
            match rec.due_by_ms {
                Some(due) if due <= now_ms => {}
                _ => continue,
            }
            if rec.init_pending {
                let init = AnchorPayload::Init {
                    ledger_id: rec.ledger_id,
                    digest: rec.digest,
                    size: rec.size,
                };
                // The initial state is the prev of the first pending step,
                // or the current state when nothing was appended since.
                let init = match rec.pending_steps.first() {
                    Some(s) => AnchorPayload::Init {
                        ledger_id: rec.ledger_id,
                        digest: s.prev_digest,
                        size: s.prev_size,
                    },
                    None => init,
                };
                ids.push(self.submit(now_ms, init));
                rec.init_pending = false;
            }
            if !rec.pending_steps.is_empty() {
                let steps = std::mem::take(&mut rec.pending_steps);
                ids.push(self.submit(
                    now_ms,
                    AnchorPayload::Batch {
                        ledger_id: rec.ledger_id,
                        steps,
                    },
                ));
            }
            rec.last_anchored_digest = rec.digest;
            rec.last_anchored_size = rec.size;
            rec.due_by_ms = None;
        }
        ids
    }

    fn next_due(&self) -> Option<u64> {
        let map = self.ledgers.read().unwrap_or_else(PoisonError::into_inner);
        map.values().filter_map(|r| lock(r).due_by_ms).min()
    }

    fn certify_blocks(
        &self,
        ledger_id: LedgerId,
        indices: &[u64],
        now_ms: u64,
    ) -> Result<BlockCertificate, NotaryError> {
        if !self.config.repository {
            return Err(NotaryError::RepositoryDisabled);
        }
        let record = self.record(&ledger_id)?;
        let rec = lock(&record);
        let leaf_digests = indices
            .iter()
            .map(|&i| {
                rec.blocks
                    .get(i as usize)
                    .map(|b| leaf_hash(b))
                    .ok_or(NotaryError::NotStored)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut cert = BlockCertificate {
            ledger_id,
            digest: rec.digest,
            size: rec.size,
            indices: indices.to_vec(),
            leaf_digests,
            timestamp_ms: now_ms,
            notary_sig: Signature::from_bytes([0; 64]),
        };
        cert.notary_sig = self.config.keypair.sign(&cert.signing_bytes());
        Ok(cert)
    }

    fn serve_blocks(&self, request: &AccessRequest) -> Result<Vec<(u64, Vec<u8>)>, NotaryError> {
        if !self.config.repository {
            return Err(NotaryError::RepositoryDisabled);
        }
        if !request.requester.verify(&request.signing_bytes(), &request.signature) {
            return Err(NotaryError::Unauthorized);
        }
        let record = self.record(&request.ledger_id)?;
        let rec = lock(&record);
        if !rec.authors.contains(&request.requester) {
            return Err(NotaryError::Unauthorized);
        }
        request
            .indices
            .iter()
            .map(|&i| {
                rec.blocks
                    .get(i as usize)
                    .map(|b| (i, b.clone()))
                    .ok_or(NotaryError::NotStored)
            })
            .collect()
    }
}
