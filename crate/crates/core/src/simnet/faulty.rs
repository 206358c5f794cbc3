//! A Notary that misbehaves on cue. Each fault fires at most `count` times,
//! and only from its trigger time on, and only on a request where it
//! changes the outcome.

use std::collections::BTreeMap;
use std::sync::{Mutex, MutexGuard, PoisonError};

use serde::{Deserialize, Serialize};

use crate::anchor::{AnchorPayload, ExtendStep};
use crate::hashtree::Digest;
use crate::identity::PublicKey;
use crate::notary::{AccessRequest, BlockCertificate, Checks, Notary, NotaryError, NotaryService};
use crate::protocol::{AnchorTxnId, CreationRequest, ExtensionRequest, LedgerId, Receipt, ReceiptRequest};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FaultKind {
    /// Signs a competing extension of an already extended state, reusing
    /// the winner's sequence number and anchor reference.
    NotaryFork,
    /// Accepts an extension signed by a key outside the author set.
    NotaryUnauthorizedAccept,
    /// Signs an immediate receipt without anchoring its step.
    AnchorOmit,
    /// Accepts a creation request for a ledger id already in use.
    DuplicateInit,
    /// The transport corrupts one block delivered between nodes.
    NodeTamperBlock,
    /// Anchors an extension with a corrupted consistency proof.
    AnchorInvalidProof,
    /// Anchors an already anchored step a second time.
    AnchorReplay,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    /// Simulated time from which the fault may fire.
    pub trigger_ms: u64,
    #[serde(default = "one")]
    pub count: u32,
}

fn one() -> u32 {
    1
}

impl FaultSpec {
    pub fn new(kind: FaultKind, trigger_ms: u64) -> Self {
        FaultSpec {
            kind,
            trigger_ms,
            count: 1,
        }
    }
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

/// Fault-injecting [`NotaryService`] around an honest [`Notary`].
pub struct FaultyNotary {
    inner: Notary,
    remaining: Mutex<Vec<(FaultSpec, u32)>>,
    last_receipt: Mutex<BTreeMap<LedgerId, Receipt>>,
    fired: Mutex<Vec<(FaultKind, u64)>>,
}

impl FaultyNotary {
    pub fn new(inner: Notary, faults: &[FaultSpec]) -> Self {
        FaultyNotary {
            inner,
            remaining: Mutex::new(faults.iter().map(|f| (f.clone(), f.count)).collect()),
            last_receipt: Mutex::new(BTreeMap::new()),
            fired: Mutex::new(Vec::new()),
        }
    }

    pub fn inner(&self) -> &Notary {
        &self.inner
    }

    /// Faults that fired, with the simulated time.
    pub fn fired(&self) -> Vec<(FaultKind, u64)> {
        lock(&self.fired).clone()
    }

    /// Whether `kind` may fire at `now_ms`.
    pub fn armed(&self, kind: FaultKind, now_ms: u64) -> bool {
        lock(&self.remaining)
            .iter()
            .any(|(f, left)| f.kind == kind && f.trigger_ms <= now_ms && *left > 0)
    }

    /// Fires `kind` if armed.
    pub fn fire(&self, kind: FaultKind, now_ms: u64) -> bool {
        let mut faults = lock(&self.remaining);
        let Some((_, left)) = faults
            .iter_mut()
            .find(|(f, left)| f.kind == kind && f.trigger_ms <= now_ms && *left > 0)
        else {
            return false;
        };
        *left -= 1;
        log::info!("fault {kind:?} fired at {now_ms} ms");
        lock(&self.fired).push((kind, now_ms));
        true
    }

    /// Persists the inner Notary to a snapshot and restores it, as after a
    /// crash.
    pub fn restart(&mut self) -> Result<(), NotaryError> {
        let snapshot = self.inner.snapshot();
        let config = self.inner.config().clone();
        let anchor = self.inner.anchor_log().clone();
        self.inner = Notary::restore(config, anchor, &snapshot)?;
        Ok(())
    }

    fn anchor_raw(&self, payload: AnchorPayload, now_ms: u64) -> AnchorTxnId {
        let mut log = lock(self.inner.anchor_log());
        log.advance_to(now_ms);
        log.submit(self.inner.config().keypair.actor_id(), payload)
    }

    fn remember(&self, result: &Result<Receipt, NotaryError>) {
        if let Ok(r) = result {
            lock(&self.last_receipt).insert(r.ledger_id(), r.clone());
        }
    }

    fn forged_fork(&self, req: &ExtensionRequest, now_ms: u64) -> Option<Receipt> {
        let last = lock(&self.last_receipt).get(&req.ledger_id).cloned()?;
        let competing = last.kind() == crate::protocol::ReceiptKind::Extension
            && last.prev() == (req.prev_digest, req.prev_size)
            && last.new_state() != (req.new_digest, req.new_size);
        let valid = req.check_shape().is_ok()
            && req.first_bad_signature().is_none()
            && crate::hashtree::verify_consistency(
                &req.prev_digest,
                req.prev_size,
                &req.new_digest,
                req.new_size,
                &req.proof,
            );
        if !(competing && valid && self.fire(FaultKind::NotaryFork, now_ms)) {
            return None;
        }
        Some(Receipt::signed(
            &self.inner.config().keypair,
            ReceiptRequest::Extension(req.clone()),
            now_ms,
            last.anchor_ref,
            last.notary_seq,
        ))
    }
}

impl NotaryService for FaultyNotary {
    fn public_key(&self) -> PublicKey {
        self.inner.public_key()
    }

    fn handle_create(
        &self,
        request: &CreationRequest,
        blocks: Option<&[Vec<u8>]>,
        now_ms: u64,
    ) -> Result<Receipt, NotaryError> {
        let mut checks = Checks::ALL;
        if self.inner.ledger(&request.ledger_id).is_some() && self.fire(FaultKind::DuplicateInit, now_ms) {
            checks.id_availability = false;
        }
        let result = self.inner.create_with(request, blocks, now_ms, checks);
        self.remember(&result);
        result
    }

    fn handle_extend(
        &self,
        request: &ExtensionRequest,
        blocks: Option<&[Vec<u8>]>,
        now_ms: u64,
    ) -> Result<Receipt, NotaryError> {
        let mut checks = Checks::ALL;
        let outsider = self
            .inner
            .authors_of(&request.ledger_id)
            .is_some_and(|a| request.author_keys.iter().any(|k| !a.contains(k)));
        if outsider && self.fire(FaultKind::NotaryUnauthorizedAccept, now_ms) {
            checks.authorization = false;
        }
        let omit = self.armed(FaultKind::AnchorOmit, now_ms);
        let corrupt = self.armed(FaultKind::AnchorInvalidProof, now_ms);
        if omit || corrupt {
            checks.anchoring = false;
        }
        let result = self.inner.extend_with(request, blocks, now_ms, checks);
        match &result {
            Ok(_) if corrupt && self.fire(FaultKind::AnchorInvalidProof, now_ms) => {
                let mut step = ExtendStep::from_request(request);
                match step.proof.path.first_mut() {
                    Some(h) => *h = Digest::sha256(h.as_bytes()),
                    None => step.new_digest = Digest::sha256(step.new_digest.as_bytes()),
                }
                self.anchor_raw(AnchorPayload::Extend(step), now_ms);
            }
            Ok(_) if omit => {
                self.fire(FaultKind::AnchorOmit, now_ms);
            }
            Ok(_) if self.fire(FaultKind::AnchorReplay, now_ms) => {
                self.anchor_raw(AnchorPayload::Extend(ExtendStep::from_request(request)), now_ms);
            }
            Err(NotaryError::StaleDigest { .. }) => {
                if let Some(forged) = self.forged_fork(request, now_ms) {
                    return Ok(forged);
                }
            }
            _ => {}
        }
        self.remember(&result);
        result
    }

    fn flush(&self, now_ms: u64) -> Vec<AnchorTxnId> {
        self.inner.flush(now_ms)
    }

    fn next_due(&self) -> Option<u64> {
        self.inner.next_due()
    }

    fn certify_blocks(
        &self,
        ledger_id: LedgerId,
        indices: &[u64],
        now_ms: u64,
    ) -> Result<BlockCertificate, NotaryError> {
        self.inner.certify_blocks(ledger_id, indices, now_ms)
    }

    fn serve_blocks(&self, request: &AccessRequest) -> Result<Vec<(u64, Vec<u8>)>, NotaryError> {
        self.inner.serve_blocks(request)
    }
}
