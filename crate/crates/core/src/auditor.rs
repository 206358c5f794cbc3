//! External verification using only the anchor log, the Notary public key
//! and material handed over by nodes: anchor audits, export checks and
//! misbehavior proof checks.

use std::collections::BTreeMap;

use serde::Serialize;
use thiserror::Error;

use crate::anchor::{AnchorLog, AnchorPayload, AnchorTxn, ExtendStep};
use crate::hashtree::{leaf_hash, verify_consistency, verify_inclusion, Digest};
use crate::identity::{ActorId, PublicKey};
use crate::ledgerstore::{BlockEntry, ExportArchive};
use crate::protocol::{
    verify_receipt, AnchorRef, AnchorTxnId, LedgerId, MisbehaviorKind, MisbehaviorProof, Receipt, ReceiptKind,
    ReceiptRejection, ReceiptRequest,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViolationKind {
    DuplicateInit,
    InvalidProof,
    BrokenChain,
    MalformedTxn,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub txns: Vec<AnchorTxnId>,
    pub detail: String,
}

/// Audit result for one ledger id found in the log.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LedgerAudit {
    pub ledger_id: LedgerId,
    pub init_txn: Option<AnchorTxnId>,
    /// Every anchored state in order, starting with the Init state.
    pub states: Vec<(Digest, u64)>,
    pub violations: Vec<Violation>,
}

impl LedgerAudit {
    pub fn is_coherent(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn current_state(&self) -> Option<(Digest, u64)> {
        self.states.last().copied()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub ledgers: BTreeMap<LedgerId, LedgerAudit>,
}

impl AuditReport {
    pub fn all_coherent(&self) -> bool {
        self.ledgers.values().all(LedgerAudit::is_coherent)
    }

    pub fn ledger(&self, id: &LedgerId) -> Option<&LedgerAudit> {
        self.ledgers.get(id)
    }

    pub fn violations(&self) -> impl Iterator<Item = &Violation> {
        self.ledgers.values().flat_map(|l| l.violations.iter())
    }

    /// One JSON line per ledger: status and violations.
    pub fn json_lines(&self) -> String {
        let mut out = String::new();
        for l in self.ledgers.values() {
            let line = serde_json::json!({
                "type": "LedgerAudit",
                "ledger_id": l.ledger_id,
                "status": if l.is_coherent() { "coherent" } else { "violations" },
                "init_txn": l.init_txn,
                "size": l.current_state().map(|s| s.1),
                "digest": l.current_state().map(|s| s.0),
                "violations": l.violations,
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

fn violation(kind: ViolationKind, txns: Vec<AnchorTxnId>, detail: impl Into<String>) -> Violation {
    Violation {
        kind,
        txns,
        detail: detail.into(),
    }
}

fn new_audit(ledger_id: LedgerId) -> LedgerAudit {
    LedgerAudit {
        ledger_id,
        init_txn: None,
        states: Vec::new(),
        violations: Vec::new(),
    }
}

fn step_proof_valid(s: &ExtendStep) -> bool {
    s.new_size > s.prev_size && verify_consistency(&s.prev_digest, s.prev_size, &s.new_digest, s.new_size, &s.proof)
}

fn audit_step(audit: &mut LedgerAudit, txn: AnchorTxnId, step: &ExtendStep) {
    let Some(&current) = audit.states.last() else {
        audit.violations.push(violation(
            ViolationKind::MalformedTxn,
            vec![txn],
            "extension before the ledger's Init",
        ));
        return;
    };
    if (step.prev_digest, step.prev_size) != current {
        audit.violations.push(violation(
            ViolationKind::BrokenChain,
            vec![txn],
            format!(
                "step starts at size {} but the history is at size {}",
                step.prev_size, current.1
            ),
        ));
    }
    if step_proof_valid(step) {
        audit.states.push((step.new_digest, step.new_size));
    } else {
        audit.violations.push(violation(
            ViolationKind::InvalidProof,
            vec![txn],
            format!(
                "consistency proof {} -> {} does not verify",
                step.prev_size, step.new_size
            ),
        ));
    }
}

/// Audits every ledger written to the log by `notary_address`, using
/// confirmed transactions only.
pub fn audit_anchor(log: &AnchorLog, notary_address: &ActorId) -> AuditReport {
    let mut ledgers: BTreeMap<LedgerId, LedgerAudit> = BTreeMap::new();
    for txn in log.read_all(notary_address) {
        let id = txn.payload.ledger_id();
        let audit = ledgers.entry(id).or_insert_with(|| new_audit(id));
        match &txn.payload {
            AnchorPayload::Init { digest, size, .. } => {
                if *size == 0 {
                    audit.violations.push(violation(
                        ViolationKind::MalformedTxn,
                        vec![txn.txn_id],
                        "Init with zero size",
                    ));
                } else if let Some(first) = audit.init_txn {
                    audit.violations.push(violation(
                        ViolationKind::DuplicateInit,
                        vec![first, txn.txn_id],
                        "second Init for the same ledger id",
                    ));
                } else {
                    audit.init_txn = Some(txn.txn_id);
                    audit.states.push((*digest, *size));
                }
            }
            AnchorPayload::Extend(step) => audit_step(audit, txn.txn_id, step),
            AnchorPayload::Batch { steps, .. } => {
                if steps.is_empty() {
                    audit
                        .violations
                        .push(violation(ViolationKind::MalformedTxn, vec![txn.txn_id], "empty batch"));
                } else if steps.iter().any(|s| s.ledger_id != id) {
                    audit.violations.push(violation(
                        ViolationKind::MalformedTxn,
                        vec![txn.txn_id],
                        "batch step for another ledger",
                    ));
                } else {
                    for s in steps {
                        audit_step(audit, txn.txn_id, s);
                    }
                }
            }
        }
    }
    AuditReport { ledgers }
}

#[derive(Debug, Error, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "reason", content = "detail", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExportRejection {
    #[error("HISTORY_INCOHERENT: {0}")]
    HistoryIncoherent(String),
    #[error("BAD_RECEIPT: {0}")]
    BadReceipt(String),
    #[error("RECEIPT_ANCHOR_MISMATCH: {0}")]
    ReceiptAnchorMismatch(String),
    #[error("BAD_INCLUSION: item for block {0}")]
    BadInclusion(u64),
    #[error("CONTENT_MISMATCH: item for block {0}")]
    ContentMismatch(u64),
}

impl ExportRejection {
    pub fn code(&self) -> &'static str {
        match self {
            ExportRejection::HistoryIncoherent(_) => "HISTORY_INCOHERENT",
            ExportRejection::BadReceipt(_) => "BAD_RECEIPT",
            ExportRejection::ReceiptAnchorMismatch(_) => "RECEIPT_ANCHOR_MISMATCH",
            ExportRejection::BadInclusion(_) => "BAD_INCLUSION",
            ExportRejection::ContentMismatch(_) => "CONTENT_MISMATCH",
        }
    }
}

/// Checks an export archive against the public history.
pub fn verify_export(archive: &ExportArchive, log: &AnchorLog, notary_key: &PublicKey) -> Result<(), ExportRejection> {
    let report = audit_anchor(log, &notary_key.actor_id());
    let audit = report
        .ledger(&archive.ledger_id)
        .ok_or_else(|| ExportRejection::HistoryIncoherent("ledger is not anchored".into()))?;
    if !audit.is_coherent() || audit.init_txn.is_none() {
        return Err(ExportRejection::HistoryIncoherent(format!(
            "{} violations in the anchored history",
            audit.violations.len()
        )));
    }

    let bad = |s: String| Err(ExportRejection::BadReceipt(s));
    let Some(creation) = archive.receipts.first().and_then(Receipt::creation) else {
        return bad("first receipt is not a creation receipt".into());
    };
    if creation.ledger_id != archive.ledger_id || creation.authors != archive.authors {
        return bad("creation receipt does not match the archive's ledger".into());
    }
    for (i, r) in archive.receipts.iter().enumerate() {
        if r.ledger_id() != archive.ledger_id {
            return bad(format!("receipt {i} belongs to another ledger"));
        }
        if let Err(reason) = verify_receipt(r, notary_key, &creation.authors) {
            return bad(format!("receipt {i}: {reason}"));
        }
        if r.notary_seq != i as u64 || (i > 0 && r.kind() != ReceiptKind::Extension) {
            return bad(format!("receipt {i} is out of sequence"));
        }
        if i > 0 && r.prev() != archive.receipts[i - 1].new_state() {
            return bad(format!("receipt {i} does not chain"));
        }
    }
    let last = archive.receipts.last().expect("nonempty").new_state();
    if last != (archive.claimed_digest, archive.claimed_size) {
        return bad("claimed state differs from the last receipt".into());
    }

    let mismatch = |s: String| Err(ExportRejection::ReceiptAnchorMismatch(s));
    if audit.states.first() != Some(&creation_state(creation)) {
        return mismatch("creation receipt differs from the anchored Init".into());
    }
    for (i, pair) in archive.receipts.windows(2).enumerate() {
        let from = pair[0].new_state();
        let to = pair[1].new_state();
        let anchored = audit.states.windows(2).any(|w| w[0] == from && w[1] == to);
        if !anchored {
            return mismatch(format!("receipt {} is not in the anchored history", i + 1));
        }
    }

    for item in &archive.items {
        if item.index >= archive.claimed_size
            || !verify_inclusion(
                &archive.claimed_digest,
                archive.claimed_size,
                item.index,
                &item.leaf_digest,
                &item.proof,
            )
        {
            return Err(ExportRejection::BadInclusion(item.index));
        }
        let content_digest = match &item.entry {
            BlockEntry::Present(content) => leaf_hash(content),
            BlockEntry::Omitted(d) => *d,
        };
        if content_digest != item.leaf_digest {
            return Err(ExportRejection::ContentMismatch(item.index));
        }
    }
    Ok(())
}

fn creation_state(c: &crate::protocol::CreationRequest) -> (Digest, u64) {
    (c.initial_digest, c.initial_size)
}

/// Whether a receipt's anchoring promise can be checked in the log yet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Obligation {
    Met,
    Unmet,
    /// Not decidable yet: the cited transaction or the deadline is not
    /// confirmed.
    Undetermined,
}

fn anchors_receipt(txn: &AnchorTxn, receipt: &Receipt) -> bool {
    if txn.payload.ledger_id() != receipt.ledger_id() {
        return false;
    }
    match &receipt.request {
        ReceiptRequest::Creation(c) => {
            txn.payload
                == AnchorPayload::Init {
                    ledger_id: c.ledger_id,
                    digest: c.initial_digest,
                    size: c.initial_size,
                }
        }
        ReceiptRequest::Extension(e) => {
            let expected = ExtendStep::from_request(e);
            txn.payload.steps().contains(&expected)
        }
    }
}

/// Checks that the step notarized by `receipt` was anchored as promised.
///
/// A receipt citing a transaction needs that transaction to come from the
/// Notary and carry the receipt's step. A pending receipt needs a matching
/// Notary transaction submitted no later than its deadline.
pub fn anchor_obligation(receipt: &Receipt, log: &AnchorLog, notary_address: &ActorId) -> Obligation {
    match receipt.anchor_ref {
        AnchorRef::Txn(id) => match log.get_confirmed(id) {
            Some(txn) if txn.address == *notary_address && anchors_receipt(txn, receipt) => Obligation::Met,
            Some(_) => Obligation::Unmet,
            None if log.is_submitted(id) => Obligation::Undetermined,
            // Immediate receipts are signed after submission, so the cited
            // transaction must already exist.
            None if log.now_ms() >= receipt.timestamp_ms => Obligation::Unmet,
            None => Obligation::Undetermined,
        },
        AnchorRef::Pending { due_by_ms } => {
            let met = log
                .read_all(notary_address)
                .into_iter()
                .any(|t| t.submitted_at_ms <= due_by_ms && anchors_receipt(t, receipt));
            if met {
                Obligation::Met
            } else if log.now_ms() >= due_by_ms.saturating_add(log.confirmation_latency_ms()) {
                Obligation::Unmet
            } else {
                Obligation::Undetermined
            }
        }
    }
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ProofRejection {
    #[error("evidence has the wrong shape for its kind")]
    WrongShape,
    #[error("evidence is not signed by the Notary")]
    BadNotarySig,
    #[error("receipts belong to another ledger")]
    WrongLedger,
    #[error("receipts do not conflict")]
    NotConflicting,
    #[error("receipt passes author validation")]
    ReceiptValid,
    #[error("anchor log required")]
    LogRequired,
    #[error("anchoring obligation is met")]
    ObligationMet,
    #[error("anchoring obligation is not yet decidable")]
    Undetermined,
}

/// Verifies a misbehavior proof with only the Notary key and, for
/// `AnchorDesync`, the anchor log.
pub fn verify_misbehavior_proof(
    proof: &MisbehaviorProof,
    notary_key: &PublicKey,
    log: Option<&AnchorLog>,
) -> Result<(), ProofRejection> {
    if proof.receipts.iter().any(|r| r.ledger_id() != proof.ledger_id) {
        return Err(ProofRejection::WrongLedger);
    }
    if proof.receipts.iter().any(|r| !r.notary_sig_valid(notary_key)) {
        return Err(ProofRejection::BadNotarySig);
    }
    match proof.kind {
        MisbehaviorKind::Fork => {
            let [a, b] = proof.receipts.as_slice() else {
                return Err(ProofRejection::WrongShape);
            };
            if a.prev() == b.prev() && a.new_state().0 != b.new_state().0 {
                Ok(())
            } else {
                Err(ProofRejection::NotConflicting)
            }
        }
        MisbehaviorKind::UnauthorizedAccept => {
            let (creation, offender) = match proof.receipts.as_slice() {
                [c] => (c, c),
                [c, o] => (c, o),
                _ => return Err(ProofRejection::WrongShape),
            };
            let Some(req) = creation.creation() else {
                return Err(ProofRejection::WrongShape);
            };
            match verify_receipt(offender, notary_key, &req.authors) {
                Ok(()) => Err(ProofRejection::ReceiptValid),
                Err(ReceiptRejection::BadNotarySig) => Err(ProofRejection::BadNotarySig),
                Err(_) => Ok(()),
            }
        }
        MisbehaviorKind::AnchorDesync => {
            let [receipt] = proof.receipts.as_slice() else {
                return Err(ProofRejection::WrongShape);
            };
            let log = log.ok_or(ProofRejection::LogRequired)?;
            match anchor_obligation(receipt, log, &notary_key.actor_id()) {
                Obligation::Unmet => Ok(()),
                Obligation::Met => Err(ProofRejection::ObligationMet),
                Obligation::Undetermined => Err(ProofRejection::Undetermined),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchor::AnchorLog;
    use crate::hashtree::{prove_consistency, root_from_leaf_digests};
    use crate::identity::{generate_keypair, KeyPair};
    use crate::ledgerstore::tests::Fixture;
    use crate::protocol::{AuthorSet, CreationRequest, ExtensionRequest};

    fn step(leaves: &[Digest], m: usize, id: LedgerId) -> ExtendStep {
        ExtendStep {
            ledger_id: id,
            prev_digest: root_from_leaf_digests(&leaves[..m]),
            prev_size: m as u64,
            new_digest: root_from_leaf_digests(leaves),
            new_size: leaves.len() as u64,
            proof: prove_consistency(leaves, m as u64).unwrap(),
        }
    }

    fn leaves(n: usize, salt: u8) -> Vec<Digest> {
        (0..n).map(|i| leaf_hash(&[salt, i as u8])).collect()
    }

    fn honest_log(notary: &ActorId, id: LedgerId, n: usize) -> AnchorLog {
        let l = leaves(n, 0);
        let mut log = AnchorLog::new(0);
        log.submit(
            *notary,
            AnchorPayload::Init {
                ledger_id: id,
                digest: l[0],
                size: 1,
            },
        );
        for k in 2..=n {
            log.submit(*notary, AnchorPayload::Extend(step(&l[..k], k - 1, id)));
        }
        log
    }

    fn kinds(report: &AuditReport) -> Vec<ViolationKind> {
        report.violations().map(|v| v.kind).collect()
    }

    #[test]
    fn honest_log_is_coherent_and_other_writers_ignored() {
        let notary = generate_keypair([1; 32]).actor_id();
        let other = generate_keypair([2; 32]).actor_id();
        let mut log = honest_log(&notary, LedgerId::from_bytes([1; 16]), 6);
        log.submit(
            other,
            AnchorPayload::Init {
                ledger_id: LedgerId::from_bytes([1; 16]),
                digest: leaf_hash(b"x"),
                size: 1,
            },
        );
        let report = audit_anchor(&log, &notary);
        assert!(report.all_coherent());
        assert_eq!(report.ledger(&LedgerId::from_bytes([1; 16])).unwrap().states.len(), 6);
        for line in report.json_lines().lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert_eq!(v["status"], "coherent");
        }
    }

    #[test]
    fn duplicate_init_cites_both_txns() {
        let notary = generate_keypair([1; 32]).actor_id();
        let id = LedgerId::from_bytes([1; 16]);
        let mut log = honest_log(&notary, id, 3);
        let second = log.submit(
            notary,
            AnchorPayload::Init {
                ledger_id: id,
                digest: leaf_hash(b"other"),
                size: 1,
            },
        );
        let report = audit_anchor(&log, &notary);
        let v: Vec<&Violation> = report.violations().collect();
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::DuplicateInit);
        assert_eq!(v[0].txns, vec![AnchorTxnId(0), second]);
    }

    #[test]
    fn broken_chain_invalid_proof_and_malformed() {
        let notary = generate_keypair([1; 32]).actor_id();
        let id = LedgerId::from_bytes([1; 16]);
        let mut log = honest_log(&notary, id, 3);
        let fork = leaves(5, 9);
        log.submit(notary, AnchorPayload::Extend(step(&fork, 4, id)));
        assert_eq!(kinds(&audit_anchor(&log, &notary)), vec![ViolationKind::BrokenChain]);

        let mut log = honest_log(&notary, id, 3);
        let l = leaves(4, 0);
        let mut bad = step(&l, 3, id);
        bad.proof.path[0] = leaf_hash(b"junk");
        log.submit(notary, AnchorPayload::Extend(bad));
        assert_eq!(kinds(&audit_anchor(&log, &notary)), vec![ViolationKind::InvalidProof]);

        let mut log = AnchorLog::new(0);
        let other = LedgerId::from_bytes([2; 16]);
        log.submit(notary, AnchorPayload::Extend(step(&l, 3, other)));
        log.submit(
            notary,
            AnchorPayload::Batch {
                ledger_id: id,
                steps: vec![step(&l, 3, other)],
            },
        );
        log.submit(
            notary,
            AnchorPayload::Init {
                ledger_id: id,
                digest: l[0],
                size: 0,
            },
        );
        assert_eq!(
            kinds(&audit_anchor(&log, &notary)),
            vec![ViolationKind::MalformedTxn; 3]
        );
    }

    #[test]
    fn batches_audit_step_by_step() {
        let notary = generate_keypair([1; 32]).actor_id();
        let id = LedgerId::from_bytes([1; 16]);
        let l = leaves(5, 0);
        let mut log = AnchorLog::new(0);
        log.submit(
            notary,
            AnchorPayload::Init {
                ledger_id: id,
                digest: l[0],
                size: 1,
            },
        );
        let steps = (2..=5).map(|k| step(&l[..k], k - 1, id)).collect();
        log.submit(notary, AnchorPayload::Batch { ledger_id: id, steps });
        let report = audit_anchor(&log, &notary);
        assert!(report.all_coherent());
        assert_eq!(
            report.ledger(&id).unwrap().current_state(),
            Some((root_from_leaf_digests(&l), 5))
        );
    }

    /// Fixture ledger anchored honestly, as the Notary would have done.
    fn anchored(f: &Fixture) -> AnchorLog {
        let mut log = AnchorLog::new(0);
        let addr = f.notary.actor_id();
        for r in f.replica.receipts() {
            match &r.request {
                ReceiptRequest::Creation(c) => log.submit(
                    addr,
                    AnchorPayload::Init {
                        ledger_id: c.ledger_id,
                        digest: c.initial_digest,
                        size: c.initial_size,
                    },
                ),
                ReceiptRequest::Extension(e) => log.submit(addr, AnchorPayload::Extend(ExtendStep::from_request(e))),
            };
        }
        log
    }

    fn fixture() -> Fixture {
        let mut f = Fixture::new(&[b"genesis"]);
        for i in 0..5u8 {
            f.extend(vec![vec![b'b', i], vec![b'c', i]]);
        }
        f
    }

    #[test]
    fn honest_export_accepted_and_mutations_rejected() {
        let mut f = fixture();
        let log = anchored(&f);
        let nk = f.notary.public();
        let full = f.replica.full_export();
        assert_eq!(verify_export(&full, &log, &nk), Ok(()));
        let last = f.replica.official_size() - 1;
        assert_eq!(
            verify_export(&f.replica.make_export(&[0, last]).unwrap(), &log, &nk),
            Ok(())
        );

        for item in 0..full.items.len() {
            let mut a = full.clone();
            if let BlockEntry::Present(c) = &mut a.items[item].entry {
                c[0] ^= 0x01;
            }
            assert_eq!(
                verify_export(&a, &log, &nk),
                Err(ExportRejection::ContentMismatch(item as u64))
            );
        }
        let mut a = full.clone();
        a.items[1].leaf_digest = leaf_hash(b"forged");
        a.items[1].entry = BlockEntry::Present(b"forged".to_vec());
        assert_eq!(verify_export(&a, &log, &nk), Err(ExportRejection::BadInclusion(1)));

        let mut a = full.clone();
        a.receipts.remove(2);
        assert!(matches!(
            verify_export(&a, &log, &nk),
            Err(ExportRejection::BadReceipt(_))
        ));

        let mut truncated = AnchorLog::new(0);
        for t in log.submitted().iter().take(3) {
            truncated.submit(t.address, t.payload.clone());
        }
        assert!(matches!(
            verify_export(&full, &truncated, &nk),
            Err(ExportRejection::ReceiptAnchorMismatch(_))
        ));

        f.replica.erase_block(3).unwrap();
        let erased = f.replica.full_export();
        assert_eq!(verify_export(&erased, &log, &nk), Ok(()));
        assert_eq!(
            verify_export(&full, &log, &generate_keypair([0; 32]).public()),
            Err(ExportRejection::HistoryIncoherent("ledger is not anchored".into()))
        );
    }

    #[test]
    fn forked_anchor_history_is_incoherent() {
        let f = fixture();
        let mut log = anchored(&f);
        let base = f.replica.leaf_digests();
        let mut forked = base[..3].to_vec();
        forked.push(leaf_hash(b"rewrite"));
        log.submit(
            f.notary.actor_id(),
            AnchorPayload::Extend(step(&forked, 3, f.replica.ledger_id())),
        );
        assert!(matches!(
            verify_export(&f.replica.full_export(), &log, &f.notary.public()),
            Err(ExportRejection::HistoryIncoherent(_))
        ));
    }

    fn two_receipts(notary: &KeyPair, author: &KeyPair) -> (Receipt, Receipt, Receipt) {
        let authors = AuthorSet::new(vec![author.public()]).unwrap();
        let id = LedgerId::derive(&author.public(), 0);
        let g = leaf_hash(b"g");
        let creation = Receipt::signed(
            notary,
            ReceiptRequest::Creation(CreationRequest::signed(author, id, authors, g, 1)),
            0,
            AnchorRef::Txn(AnchorTxnId(0)),
            0,
        );
        let ext = |content: &[u8], who: &KeyPair| {
            let l = vec![g, leaf_hash(content)];
            let req = ExtensionRequest::signed(
                id,
                (g, 1),
                (root_from_leaf_digests(&l), 2),
                prove_consistency(&l, 1).unwrap(),
                &[who],
            );
            Receipt::signed(
                notary,
                ReceiptRequest::Extension(req),
                1,
                AnchorRef::Txn(AnchorTxnId(1)),
                1,
            )
        };
        (creation, ext(b"x", author), ext(b"y", author))
    }

    #[test]
    fn fork_proofs() {
        let notary = generate_keypair([50; 32]);
        let author = generate_keypair([1; 32]);
        let (creation, a, b) = two_receipts(&notary, &author);
        let id = creation.ledger_id();
        let proof = |receipts: Vec<Receipt>| MisbehaviorProof {
            kind: MisbehaviorKind::Fork,
            ledger_id: id,
            receipts,
            anchor_txn: None,
        };
        let nk = notary.public();
        assert_eq!(
            verify_misbehavior_proof(&proof(vec![a.clone(), b.clone()]), &nk, None),
            Ok(())
        );
        assert_eq!(
            verify_misbehavior_proof(&proof(vec![a.clone(), a.clone()]), &nk, None),
            Err(ProofRejection::NotConflicting)
        );
        let mut forged = b.clone();
        forged.notary_sig = generate_keypair([51; 32]).sign(&forged.signing_bytes());
        assert_eq!(
            verify_misbehavior_proof(&proof(vec![a.clone(), forged]), &nk, None),
            Err(ProofRejection::BadNotarySig)
        );
        assert_eq!(
            verify_misbehavior_proof(&proof(vec![a]), &nk, None),
            Err(ProofRejection::WrongShape)
        );
    }

    #[test]
    fn unauthorized_accept_proofs() {
        let notary = generate_keypair([50; 32]);
        let author = generate_keypair([1; 32]);
        let outsider = generate_keypair([2; 32]);
        let (creation, honest, _) = two_receipts(&notary, &author);
        let (_, rogue, _) = two_receipts(&notary, &outsider);
        // Same ledger id but signed by the outsider.
        let mut rogue_req = rogue.extension().unwrap().clone();
        rogue_req.ledger_id = creation.ledger_id();
        rogue_req.author_sigs = vec![outsider.sign(&rogue_req.signing_bytes())];
        let rogue = Receipt::signed(
            &notary,
            ReceiptRequest::Extension(rogue_req),
            1,
            AnchorRef::Txn(AnchorTxnId(1)),
            1,
        );
        let proof = |offender: Receipt| MisbehaviorProof {
            kind: MisbehaviorKind::UnauthorizedAccept,
            ledger_id: creation.ledger_id(),
            receipts: vec![creation.clone(), offender],
            anchor_txn: None,
        };
        let nk = notary.public();
        assert_eq!(verify_misbehavior_proof(&proof(rogue), &nk, None), Ok(()));
        assert_eq!(
            verify_misbehavior_proof(&proof(honest), &nk, None),
            Err(ProofRejection::ReceiptValid)
        );
    }

    #[test]
    fn anchor_desync_proofs_and_obligations() {
        let notary = generate_keypair([50; 32]);
        let author = generate_keypair([1; 32]);
        let (creation, ext, other) = two_receipts(&notary, &author);
        let addr = notary.actor_id();
        let mut log = AnchorLog::new(0);
        let c = creation.creation().unwrap();
        log.submit(
            addr,
            AnchorPayload::Init {
                ledger_id: c.ledger_id,
                digest: c.initial_digest,
                size: 1,
            },
        );
        assert_eq!(anchor_obligation(&creation, &log, &addr), Obligation::Met);
        log.advance_to(1);
        // `ext` cites txn 1, which does not exist yet.
        assert_eq!(anchor_obligation(&ext, &log, &addr), Obligation::Unmet);
        log.submit(
            addr,
            AnchorPayload::Extend(ExtendStep::from_request(other.extension().unwrap())),
        );
        assert_eq!(anchor_obligation(&other, &log, &addr), Obligation::Met);
        assert_eq!(anchor_obligation(&ext, &log, &addr), Obligation::Unmet);

        let proof = MisbehaviorProof {
            kind: MisbehaviorKind::AnchorDesync,
            ledger_id: ext.ledger_id(),
            receipts: vec![ext.clone()],
            anchor_txn: Some(AnchorTxnId(1)),
        };
        let nk = notary.public();
        assert_eq!(verify_misbehavior_proof(&proof, &nk, Some(&log)), Ok(()));
        assert_eq!(
            verify_misbehavior_proof(&proof, &nk, None),
            Err(ProofRejection::LogRequired)
        );
        let honest = MisbehaviorProof {
            receipts: vec![other.clone()],
            ..proof.clone()
        };
        assert_eq!(
            verify_misbehavior_proof(&honest, &nk, Some(&log)),
            Err(ProofRejection::ObligationMet)
        );

        let mut slow = AnchorLog::new(1000);
        let mut pending = other.clone();
        pending.anchor_ref = AnchorRef::Pending { due_by_ms: 100 };
        pending.notary_sig = notary.sign(&pending.signing_bytes());
        assert_eq!(anchor_obligation(&pending, &slow, &addr), Obligation::Undetermined);
        slow.advance_to(100);
        slow.submit(
            addr,
            AnchorPayload::Extend(ExtendStep::from_request(pending.extension().unwrap())),
        );
        assert_eq!(anchor_obligation(&pending, &slow, &addr), Obligation::Undetermined);
        slow.advance_to(1100);
        assert_eq!(anchor_obligation(&pending, &slow, &addr), Obligation::Met);
        let mut late = AnchorLog::new(0);
        late.advance_to(101);
        late.submit(
            addr,
            AnchorPayload::Extend(ExtendStep::from_request(pending.extension().unwrap())),
        );
        assert_eq!(anchor_obligation(&pending, &late, &addr), Obligation::Unmet);
    }
}
