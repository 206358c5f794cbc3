//! Network participant. A [`Node`] builds and signs requests, keeps replicas
//! of the ledgers it authors, validates gossiped receipts, shares blocks
//! only with authors and turns conflicting or unanchored receipts into
//! [`MisbehaviorProof`]s.
//!
//! The node is an event processor: every input returns the [`NodeAction`]s
//! the transport must carry out. [`Node::create_ledger`] and
//! [`Node::extend_ledger`] wrap the same machinery for direct calls.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::Serialize;
use thiserror::Error;

use crate::anchor::AnchorLog;
use crate::auditor::{anchor_obligation, Obligation};
use crate::hashtree::{empty_root, verify_inclusion, Digest, InclusionProof};
use crate::identity::{KeyPair, PublicKey, Registry, Signature};
use crate::ledgerstore::{BlockEntry, ExportArchive, LedgerReplica, StoreError};
use crate::notary::{NotaryError, NotaryService};
use crate::protocol::codec::encode;
use crate::protocol::{
    verify_receipt, AnchorRef, AuthorSet, CreationRequest, ExtensionRequest, LedgerId, MisbehaviorKind,
    MisbehaviorProof, Receipt, ReceiptKind,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum NodeError {
    #[error("node key is not in the author set")]
    SelfNotAuthor,
    #[error("a ledger needs at least one initial block")]
    NoBlocks,
    #[error("node does not participate in the ledger")]
    NotParticipant,
    #[error("unknown ledger")]
    UnknownLedger,
    #[error("requester is not an author of the ledger")]
    Refused,
    #[error("another operation on this ledger is in flight")]
    Busy,
    #[error("notary rejected the request: {0}")]
    Notary(NotaryError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

impl NodeError {
    pub fn code(&self) -> &'static str {
        match self {
            NodeError::SelfNotAuthor => "SELF_NOT_AUTHOR",
            NodeError::NoBlocks => "NO_BLOCKS",
            NodeError::NotParticipant => "NOT_PARTICIPANT",
            NodeError::UnknownLedger => "UNKNOWN_LEDGER",
            NodeError::Refused => "REFUSED",
            NodeError::Busy => "BUSY",
            NodeError::Notary(e) => e.code(),
            NodeError::Store(_) => "STORE",
        }
    }
}

/// A block sent to another author, with its inclusion proof in the ledger
/// prefix of the requested size.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockDelivery {
    pub index: u64,
    pub entry: BlockEntry,
    pub proof: InclusionProof,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub accepted: Vec<u64>,
    pub rejected: Vec<u64>,
}

/// What the transport must do after a node event.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeAction {
    /// `blocks` is set only when the Notary runs a repository.
    SendCreate {
        request: CreationRequest,
        blocks: Option<Vec<Vec<u8>>>,
    },
    SendExtend {
        request: ExtensionRequest,
        blocks: Option<Vec<Vec<u8>>>,
    },
    /// Asks a co-author to sign `request`; the new blocks let it check the
    /// request against its own replica.
    RequestCosign {
        to: PublicKey,
        request: ExtensionRequest,
        blocks: Vec<Vec<u8>>,
    },
    CosignReply {
        to: PublicKey,
        ledger_id: LedgerId,
        signature: Option<Signature>,
    },
    /// Gossip a newly learned receipt.
    Forward(Receipt),
    FetchBlocks {
        from: PublicKey,
        ledger_id: LedgerId,
        indices: Vec<u64>,
        at_size: u64,
    },
    Misbehavior(MisbehaviorProof),
    Committed {
        ledger_id: LedgerId,
        seq: u64,
        size: u64,
    },
    CreateFailed {
        ledger_id: LedgerId,
        error: NotaryError,
    },
    ExtensionFailed {
        ledger_id: LedgerId,
        error: NodeError,
    },
    StaleRetry {
        ledger_id: LedgerId,
    },
    BlocksRejected {
        ledger_id: LedgerId,
        from: PublicKey,
        indices: Vec<u64>,
    },
}

type StateKey = (Digest, u64);

/// Everything a node knows about one ledger.
#[derive(Clone, Debug)]
struct LedgerView {
    creation: Receipt,
    /// Valid receipts by Notary sequence number.
    by_seq: BTreeMap<u64, Receipt>,
    /// First valid receipt seen for each prior state; a second receipt with
    /// a different new digest is fork evidence.
    by_prev: BTreeMap<StateKey, Receipt>,
    /// Digest of every history size attested by a valid receipt.
    states: BTreeMap<u64, Digest>,
    replica: Option<LedgerReplica>,
    /// Verified blocks not yet committed.
    staged: BTreeMap<u64, BlockEntry>,
    fetching: BTreeSet<u64>,
    /// Receipts that conflict with `by_prev` or failed validation; kept for
    /// the internal audit.
    rejected: Vec<Receipt>,
}

impl LedgerView {
    fn new(creation: Receipt) -> Self {
        let (digest, size) = creation.new_state();
        let mut by_prev = BTreeMap::new();
        by_prev.insert((empty_root(), 0), creation.clone());
        LedgerView {
            by_seq: BTreeMap::new(),
            by_prev,
            states: BTreeMap::from([(size, digest)]),
            replica: None,
            staged: BTreeMap::new(),
            fetching: BTreeSet::new(),
            rejected: Vec::new(),
            creation,
        }
    }

    fn authors(&self) -> &AuthorSet {
        &self.creation.creation().expect("creation receipt").authors
    }

    fn creator(&self) -> PublicKey {
        self.creation.creation().expect("creation receipt").creator_key
    }

    fn known_receipts(&self) -> impl Iterator<Item = &Receipt> {
        std::iter::once(&self.creation)
            .chain(self.by_seq.values())
            .chain(self.rejected.iter())
    }
}

#[derive(Clone, Debug)]
enum OpState {
    Cosigning {
        request: ExtensionRequest,
        signatures: BTreeMap<PublicKey, Signature>,
    },
    AwaitingNotary,
    /// Stale: waiting for the replica to reach the official state.
    AwaitingSync {
        target_size: u64,
    },
}

#[derive(Clone, Debug)]
struct ExtendOp {
    blocks: Vec<Vec<u8>>,
    cosigners: Vec<PublicKey>,
    retried: bool,
    state: OpState,
}

#[derive(Clone, Debug)]
struct QueuedExtend {
    blocks: Vec<Vec<u8>>,
    cosigners: Vec<PublicKey>,
}

pub struct Node {
    keypair: KeyPair,
    notary_key: PublicKey,
    share_blocks_with_notary: bool,
    registry: Registry,
    ledgers: BTreeMap<LedgerId, LedgerView>,
    orphans: BTreeMap<LedgerId, Vec<Receipt>>,
    seen: BTreeSet<Digest>,
    proofs: Vec<MisbehaviorProof>,
    proof_hashes: BTreeSet<Digest>,
    creating: BTreeMap<LedgerId, Vec<Vec<u8>>>,
    ops: BTreeMap<LedgerId, ExtendOp>,
    queued: BTreeMap<LedgerId, VecDeque<QueuedExtend>>,
    next_nonce: u64,
}

impl Node {
    /// `share_blocks_with_notary` must be set iff the Notary runs a
    /// repository; in base mode blocks never leave the author group.
    pub fn new(keypair: KeyPair, notary_key: PublicKey, share_blocks_with_notary: bool) -> Self {
        Node {
            keypair,
            notary_key,
            share_blocks_with_notary,
            registry: Registry::new(),
            ledgers: BTreeMap::new(),
            orphans: BTreeMap::new(),
            seen: BTreeSet::new(),
            proofs: Vec::new(),
            proof_hashes: BTreeSet::new(),
            creating: BTreeMap::new(),
            ops: BTreeMap::new(),
            queued: BTreeMap::new(),
            next_nonce: 0,
        }
    }

    pub fn public_key(&self) -> PublicKey {
        self.keypair.public()
    }

    pub fn keypair(&self) -> &KeyPair {
        &self.keypair
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn replica(&self, id: &LedgerId) -> Option<&LedgerReplica> {
        self.ledgers.get(id).and_then(|v| v.replica.as_ref())
    }

    pub fn replicas(&self) -> impl Iterator<Item = &LedgerReplica> {
        self.ledgers.values().filter_map(|v| v.replica.as_ref())
    }

    pub fn known_ledgers(&self) -> Vec<LedgerId> {
        self.ledgers.keys().copied().collect()
    }

    pub fn authors_of(&self, id: &LedgerId) -> Option<&AuthorSet> {
        self.ledgers.get(id).map(LedgerView::authors)
    }

    /// Valid receipts known for `id`, creation first, in sequence order.
    pub fn receipts(&self, id: &LedgerId) -> Vec<&Receipt> {
        self.ledgers
            .get(id)
            .map(|v| std::iter::once(&v.creation).chain(v.by_seq.values()).collect())
            .unwrap_or_default()
    }

    pub fn has_receipt(&self, receipt: &Receipt) -> bool {
        self.seen.contains(&receipt.content_hash())
    }

    pub fn proofs(&self) -> &[MisbehaviorProof] {
        &self.proofs
    }

    pub fn is_idle(&self, id: &LedgerId) -> bool {
        !self.ops.contains_key(id) && self.queued.get(id).map_or(true, VecDeque::is_empty)
    }

    fn is_author(&self, id: &LedgerId) -> bool {
        self.authors_of(id).is_some_and(|a| a.contains(&self.public_key()))
    }

    fn record_proof(&mut self, proof: MisbehaviorProof, actions: &mut Vec<NodeAction>) {
        if self.proof_hashes.insert(Digest::sha256(&encode(&proof))) {
            log::info!("{:?} evidence for ledger {}", proof.kind, proof.ledger_id);
            self.proofs.push(proof.clone());
            actions.push(NodeAction::Misbehavior(proof));
        }
    }

    /// Starts a ledger. `ledger_id` overrides the id derived from the node
    /// key and a local nonce.
    pub fn begin_create(
        &mut self,
        authors: AuthorSet,
        blocks: Vec<Vec<u8>>,
        ledger_id: Option<LedgerId>,
    ) -> Result<Vec<NodeAction>, NodeError> {
        if !authors.contains(&self.public_key()) {
            return Err(NodeError::SelfNotAuthor);
        }
        if blocks.is_empty() {
            return Err(NodeError::NoBlocks);
        }
        let id = ledger_id.unwrap_or_else(|| {
            self.next_nonce += 1;
            LedgerId::derive(&self.public_key(), self.next_nonce - 1)
        });
        if self.creating.contains_key(&id) {
            return Err(NodeError::Busy);
        }
        let digest = crate::hashtree::root(&blocks);
        let request = CreationRequest::signed(&self.keypair, id, authors, digest, blocks.len() as u64);
        let shared = self.share_blocks_with_notary.then(|| blocks.clone());
        self.creating.insert(id, blocks);
        Ok(vec![NodeAction::SendCreate {
            request,
            blocks: shared,
        }])
    }

    pub fn on_create_reply(&mut self, ledger_id: LedgerId, result: Result<Receipt, NotaryError>) -> Vec<NodeAction> {
        let Some(blocks) = self.creating.remove(&ledger_id) else {
            return Vec::new();
        };
        let receipt = match result {
            Ok(r) => r,
            Err(error) => return vec![NodeAction::CreateFailed { ledger_id, error }],
        };
        let mut actions = self.learn(receipt.clone(), None);
        if let Some(view) = self.ledgers.get_mut(&ledger_id) {
            if view.creation == receipt && view.replica.is_none() {
                let entries = blocks.into_iter().map(BlockEntry::Present).collect();
                match LedgerReplica::from_creation(receipt, entries, &self.notary_key) {
                    Ok(replica) => {
                        view.replica = Some(replica);
                        view.staged.clear();
                        actions.push(NodeAction::Committed {
                            ledger_id,
                            seq: 0,
                            size: view.creation.new_state().1,
                        });
                    }
                    Err(e) => log::warn!("own creation receipt for {ledger_id} unusable: {e}"),
                }
            }
        }
        actions.extend(self.advance(ledger_id));
        actions
    }

    /// Queues an extension. `cosigners` must also sign; `force` skips the
    /// local authorization checks.
    pub fn begin_extend(
        &mut self,
        ledger_id: LedgerId,
        blocks: Vec<Vec<u8>>,
        cosigners: Vec<PublicKey>,
        force: bool,
    ) -> Result<Vec<NodeAction>, NodeError> {
        let view = self.ledgers.get(&ledger_id).ok_or(NodeError::UnknownLedger)?;
        if view.replica.is_none() {
            return Err(if self.is_author(&ledger_id) {
                NodeError::UnknownLedger
            } else {
                NodeError::NotParticipant
            });
        }
        if !force && (!self.is_author(&ledger_id) || cosigners.iter().any(|k| !view.authors().contains(k))) {
            return Err(NodeError::NotParticipant);
        }
        if blocks.is_empty() {
            return Err(NodeError::NoBlocks);
        }
        let job = QueuedExtend { blocks, cosigners };
        if self.ops.contains_key(&ledger_id) {
            self.queued.entry(ledger_id).or_default().push_back(job);
            return Ok(Vec::new());
        }
        let op = ExtendOp {
            blocks: job.blocks,
            cosigners: job.cosigners,
            retried: false,
            state: OpState::AwaitingNotary,
        };
        Ok(self.start_op(ledger_id, op))
    }

    fn start_op(&mut self, ledger_id: LedgerId, mut op: ExtendOp) -> Vec<NodeAction> {
        let replica = self.replica(&ledger_id).expect("checked by caller");
        let staged = match replica.stage_blocks(&op.blocks) {
            Ok(s) => s,
            Err(e) => {
                return self.finish_op(
                    ledger_id,
                    vec![NodeAction::ExtensionFailed {
                        ledger_id,
                        error: e.into(),
                    }],
                )
            }
        };
        let prev = (replica.official_digest(), replica.official_size());
        let new = (staged.new_digest, staged.new_size);
        let mut actions = Vec::new();
        if op.cosigners.is_empty() {
            let request = ExtensionRequest::signed(ledger_id, prev, new, staged.proof, &[&self.keypair]);
            op.state = OpState::AwaitingNotary;
            actions.push(NodeAction::SendExtend {
                request,
                blocks: self.share_blocks_with_notary.then(|| op.blocks.clone()),
            });
        } else {
            let mut keys = vec![self.public_key()];
            keys.extend(op.cosigners.iter().copied());
            let request = ExtensionRequest {
                ledger_id,
                prev_digest: prev.0,
                prev_size: prev.1,
                new_digest: new.0,
                new_size: new.1,
                proof: staged.proof,
                author_keys: keys,
                author_sigs: Vec::new(),
            };
            let own = self.keypair.sign(&request.signing_bytes());
            for to in &op.cosigners {
                actions.push(NodeAction::RequestCosign {
                    to: *to,
                    request: request.clone(),
                    blocks: op.blocks.clone(),
                });
            }
            op.state = OpState::Cosigning {
                request,
                signatures: BTreeMap::from([(self.public_key(), own)]),
            };
        }
        self.ops.insert(ledger_id, op);
        actions
    }

    fn finish_op(&mut self, ledger_id: LedgerId, mut actions: Vec<NodeAction>) -> Vec<NodeAction> {
        self.ops.remove(&ledger_id);
        if let Some(next) = self.queued.get_mut(&ledger_id).and_then(VecDeque::pop_front) {
            let op = ExtendOp {
                blocks: next.blocks,
                cosigners: next.cosigners,
                retried: false,
                state: OpState::AwaitingNotary,
            };
            actions.extend(self.start_op(ledger_id, op));
        }
        actions
    }

    /// A co-author asks this node to sign an extension. The node signs iff
    /// both are authors and `blocks` extend its replica to the requested
    /// state; the checked blocks are kept for the commit.
    pub fn on_cosign_request(
        &mut self,
        from: &PublicKey,
        request: &ExtensionRequest,
        blocks: &[Vec<u8>],
    ) -> Vec<NodeAction> {
        let me = self.public_key();
        let ledger_id = request.ledger_id;
        let reply = |signature| {
            vec![NodeAction::CosignReply {
                to: *from,
                ledger_id,
                signature,
            }]
        };
        let Some(view) = self.ledgers.get_mut(&ledger_id) else {
            return reply(None);
        };
        let authorized =
            view.authors().contains(&me) && view.authors().contains(from) && request.author_keys.contains(&me);
        let Some(replica) = view.replica.as_ref().filter(|_| authorized) else {
            return reply(None);
        };
        let matches = (replica.official_digest(), replica.official_size()) == (request.prev_digest, request.prev_size)
            && replica.stage_blocks(blocks).is_ok_and(|s| {
                (s.new_digest, s.new_size, &s.proof) == (request.new_digest, request.new_size, &request.proof)
            });
        if !matches {
            log::debug!("declined to cosign extension of {ledger_id}");
            return reply(None);
        }
        for (i, b) in blocks.iter().enumerate() {
            view.staged
                .insert(request.prev_size + i as u64, BlockEntry::Present(b.clone()));
        }
        reply(Some(self.keypair.sign(&request.signing_bytes())))
    }

    pub fn on_cosign_reply(
        &mut self,
        from: &PublicKey,
        ledger_id: LedgerId,
        signature: Option<Signature>,
    ) -> Vec<NodeAction> {
        let Some(op) = self.ops.get_mut(&ledger_id) else {
            return Vec::new();
        };
        let OpState::Cosigning { request, signatures } = &mut op.state else {
            return Vec::new();
        };
        let Some(signature) = signature else {
            let error = NodeError::Notary(NotaryError::Unauthorized);
            return self.finish_op(ledger_id, vec![NodeAction::ExtensionFailed { ledger_id, error }]);
        };
        if !request.author_keys.contains(from) || !from.verify(&request.signing_bytes(), &signature) {
            return Vec::new();
        }
        signatures.insert(*from, signature);
        if signatures.len() < request.author_keys.len() {
            return Vec::new();
        }
        let mut request = request.clone();
        request.author_sigs = request.author_keys.iter().map(|k| signatures[k]).collect();
        let blocks = self.share_blocks_with_notary.then(|| op.blocks.clone());
        op.state = OpState::AwaitingNotary;
        vec![NodeAction::SendExtend { request, blocks }]
    }

    pub fn on_extend_reply(&mut self, ledger_id: LedgerId, result: Result<Receipt, NotaryError>) -> Vec<NodeAction> {
        let Some(op) = self.ops.get_mut(&ledger_id) else {
            return Vec::new();
        };
        if !matches!(op.state, OpState::AwaitingNotary) {
            return Vec::new();
        }
        match result {
            Ok(receipt) => {
                let blocks = op.blocks.iter().cloned().map(BlockEntry::Present).collect();
                let seq = receipt.notary_seq;
                let size = receipt.new_state().1;
                let mut actions = Vec::new();
                let view = self.ledgers.get_mut(&ledger_id).expect("op implies view");
                let replica = view.replica.as_mut().expect("op implies replica");
                match replica.commit(receipt.clone(), blocks, &self.notary_key) {
                    Ok(()) => actions.push(NodeAction::Committed { ledger_id, seq, size }),
                    Err(e) => log::warn!("own receipt for {ledger_id} not committed: {e}"),
                }
                actions.extend(self.learn(receipt, None));
                self.finish_op(ledger_id, actions)
            }
            Err(NotaryError::StaleDigest { current_size, .. }) if !op.retried => {
                op.retried = true;
                op.state = OpState::AwaitingSync {
                    target_size: current_size,
                };
                log::debug!("stale extension of {ledger_id}; waiting for size {current_size}");
                let mut actions = vec![NodeAction::StaleRetry { ledger_id }];
                actions.extend(self.advance(ledger_id));
                actions
            }
            Err(e) => self.finish_op(
                ledger_id,
                vec![NodeAction::ExtensionFailed {
                    ledger_id,
                    error: NodeError::Notary(e),
                }],
            ),
        }
    }

    /// Processes a gossiped receipt. `from` is the peer that sent it.
    pub fn on_receipt(&mut self, receipt: Receipt, from: Option<&PublicKey>) -> Vec<NodeAction> {
        let id = receipt.ledger_id();
        let mut actions = self.learn(receipt, from);
        actions.extend(self.advance(id));
        actions
    }

    /// Validates, indexes and forwards a receipt; no block traffic.
    fn learn(&mut self, receipt: Receipt, from: Option<&PublicKey>) -> Vec<NodeAction> {
        if !self.seen.insert(receipt.content_hash()) {
            return Vec::new();
        }
        if !receipt.notary_sig_valid(&self.notary_key) {
            log::debug!("dropped receipt without a valid notary signature");
            return Vec::new();
        }
        if from.is_some_and(|k| *k == self.public_key()) {
            log::debug!("receipt echoed back to its sender");
        }
        let id = receipt.ledger_id();
        let mut actions = vec![NodeAction::Forward(receipt.clone())];
        match receipt.kind() {
            ReceiptKind::Creation => self.learn_creation(receipt, &mut actions),
            ReceiptKind::Extension => {
                if self.ledgers.contains_key(&id) {
                    self.learn_extension(receipt, &mut actions);
                } else {
                    self.orphans.entry(id).or_default().push(receipt);
                }
            }
        }
        actions
    }

    fn learn_creation(&mut self, receipt: Receipt, actions: &mut Vec<NodeAction>) {
        let id = receipt.ledger_id();
        let req = receipt.creation().expect("creation").clone();
        if verify_receipt(&receipt, &self.notary_key, &req.authors).is_err() {
            let proof = MisbehaviorProof {
                kind: MisbehaviorKind::UnauthorizedAccept,
                ledger_id: id,
                receipts: vec![receipt],
                anchor_txn: None,
            };
            self.record_proof(proof, actions);
            return;
        }
        if let Some(view) = self.ledgers.get_mut(&id) {
            let first = view.creation.clone();
            if first.new_state() != receipt.new_state() || first.creation() != Some(&req) {
                view.rejected.push(receipt.clone());
                let proof = MisbehaviorProof {
                    kind: MisbehaviorKind::Fork,
                    ledger_id: id,
                    receipts: vec![first, receipt],
                    anchor_txn: None,
                };
                self.record_proof(proof, actions);
            }
            return;
        }
        for k in req.authors.keys() {
            self.registry.insert(*k);
        }
        self.ledgers.insert(id, LedgerView::new(receipt));
        for orphan in self.orphans.remove(&id).unwrap_or_default() {
            self.learn_extension(orphan, actions);
        }
    }

    fn learn_extension(&mut self, receipt: Receipt, actions: &mut Vec<NodeAction>) {
        let id = receipt.ledger_id();
        let view = self.ledgers.get_mut(&id).expect("caller checked");
        if verify_receipt(&receipt, &self.notary_key, view.authors()).is_err() {
            view.rejected.push(receipt.clone());
            let proof = MisbehaviorProof {
                kind: MisbehaviorKind::UnauthorizedAccept,
                ledger_id: id,
                receipts: vec![view.creation.clone(), receipt],
                anchor_txn: None,
            };
            self.record_proof(proof, actions);
            return;
        }
        let key = receipt.prev();
        if let Some(first) = view.by_prev.get(&key) {
            if first.new_state().0 != receipt.new_state().0 {
                let first = first.clone();
                view.rejected.push(receipt.clone());
                let proof = MisbehaviorProof {
                    kind: MisbehaviorKind::Fork,
                    ledger_id: id,
                    receipts: vec![first, receipt],
                    anchor_txn: None,
                };
                self.record_proof(proof, actions);
            }
            return;
        }
        view.by_prev.insert(key, receipt.clone());
        let (digest, size) = receipt.new_state();
        view.states.entry(size).or_insert(digest);
        view.by_seq.entry(receipt.notary_seq).or_insert(receipt);
    }

    /// Commits every receipt whose blocks are available, fetches the
    /// missing ones and resumes a stale extension once caught up.
    fn advance(&mut self, id: LedgerId) -> Vec<NodeAction> {
        let me = self.public_key();
        let mut actions = Vec::new();
        let Some(view) = self.ledgers.get_mut(&id) else {
            return actions;
        };
        if !view.authors().contains(&me) {
            return actions;
        }
        loop {
            let (from, range, at_size) = match &view.replica {
                None => {
                    let size = view.creation.new_state().1;
                    if self.creating.contains_key(&id) {
                        break;
                    }
                    if (0..size).all(|i| view.staged.contains_key(&i)) {
                        let entries = (0..size).map(|i| view.staged.remove(&i).expect("staged")).collect();
                        match LedgerReplica::from_creation(view.creation.clone(), entries, &self.notary_key) {
                            Ok(r) => {
                                view.replica = Some(r);
                                actions.push(NodeAction::Committed {
                                    ledger_id: id,
                                    seq: 0,
                                    size,
                                });
                                continue;
                            }
                            Err(e) => {
                                log::warn!("initial blocks of {id} rejected: {e}");
                                break;
                            }
                        }
                    }
                    (view.creator(), 0..size, size)
                }
                Some(replica) => {
                    let Some(next) = view.by_seq.get(&(replica.last_seq() + 1)) else {
                        break;
                    };
                    let official = (replica.official_digest(), replica.official_size());
                    if next.prev() != official {
                        break;
                    }
                    let (prev_size, new_size) = (official.1, next.new_state().1);
                    if (prev_size..new_size).all(|i| view.staged.contains_key(&i)) {
                        let entries = (prev_size..new_size)
                            .map(|i| view.staged.remove(&i).expect("staged"))
                            .collect();
                        let next = next.clone();
                        let seq = next.notary_seq;
                        let replica = view.replica.as_mut().expect("matched");
                        match replica.commit(next, entries, &self.notary_key) {
                            Ok(()) => {
                                actions.push(NodeAction::Committed {
                                    ledger_id: id,
                                    seq,
                                    size: new_size,
                                });
                                continue;
                            }
                            Err(e) => {
                                log::warn!("blocks for {id} seq {seq} rejected: {e}");
                                break;
                            }
                        }
                    }
                    let signers = next.signers();
                    let from = signers.iter().find(|k| **k != me).copied().unwrap_or(signers[0]);
                    (from, prev_size..new_size, new_size)
                }
            };
            let indices: Vec<u64> = range
                .filter(|i| !view.staged.contains_key(i) && !view.fetching.contains(i))
                .collect();
            if !indices.is_empty() && from != me {
                view.fetching.extend(indices.iter().copied());
                actions.push(NodeAction::FetchBlocks {
                    from,
                    ledger_id: id,
                    indices,
                    at_size,
                });
            }
            break;
        }
        actions.extend(self.resume_stale(id));
        actions
    }

    /// Periodic step: re-requests anything still missing.
    pub fn poll(&mut self) -> Vec<NodeAction> {
        let ids = self.known_ledgers();
        ids.into_iter().flat_map(|id| self.advance(id)).collect()
    }

    /// A fetch got no blocks back; the indices are requested again on the
    /// next [`Node::poll`].
    pub fn on_fetch_failed(&mut self, ledger_id: &LedgerId, indices: &[u64]) {
        if let Some(view) = self.ledgers.get_mut(ledger_id) {
            for i in indices {
                view.fetching.remove(i);
            }
        }
    }

    fn resume_stale(&mut self, id: LedgerId) -> Vec<NodeAction> {
        let Some(op) = self.ops.get(&id) else {
            return Vec::new();
        };
        let OpState::AwaitingSync { target_size } = op.state else {
            return Vec::new();
        };
        if self.replica(&id).map_or(true, |r| r.official_size() < target_size) {
            return Vec::new();
        }
        let op = self.ops.remove(&id).expect("present");
        log::debug!("retrying extension of {id}");
        self.start_op(id, op)
    }

    /// Blocks for another node. Only authors receive content; erased blocks
    /// go out as their leaf digest.
    pub fn serve_blocks(
        &self,
        ledger_id: &LedgerId,
        indices: &[u64],
        at_size: u64,
        requester: &PublicKey,
    ) -> Result<Vec<BlockDelivery>, NodeError> {
        let view = self.ledgers.get(ledger_id).ok_or(NodeError::UnknownLedger)?;
        let replica = view.replica.as_ref().ok_or(NodeError::UnknownLedger)?;
        if !view.authors().contains(requester) {
            return Err(NodeError::Refused);
        }
        indices
            .iter()
            .map(|&index| {
                let proof = replica.prove_inclusion_at(index, at_size)?;
                Ok(BlockDelivery {
                    index,
                    entry: replica.entries()[index as usize].clone(),
                    proof,
                })
            })
            .collect()
    }

    /// Accepts each delivered block iff it is included at its index in the
    /// history of size `at_size` attested by a known receipt. Rejected blocks
    /// are refetched from `from`.
    pub fn ingest_blocks(
        &mut self,
        ledger_id: LedgerId,
        at_size: u64,
        deliveries: Vec<BlockDelivery>,
        from: &PublicKey,
    ) -> (IngestReport, Vec<NodeAction>) {
        let mut report = IngestReport::default();
        let mut actions = Vec::new();
        let Some(view) = self.ledgers.get_mut(&ledger_id) else {
            report.rejected = deliveries.iter().map(|d| d.index).collect();
            return (report, actions);
        };
        let root = view.states.get(&at_size).copied();
        for d in deliveries {
            view.fetching.remove(&d.index);
            let ok = root.is_some_and(|root| {
                d.index < at_size && verify_inclusion(&root, at_size, d.index, &d.entry.leaf_digest(), &d.proof)
            });
            if ok {
                view.staged.entry(d.index).or_insert(d.entry);
                report.accepted.push(d.index);
            } else {
                report.rejected.push(d.index);
            }
        }
        if !report.rejected.is_empty() {
            log::info!(
                "rejected {} blocks of {ledger_id} from {}",
                report.rejected.len(),
                from.actor_id()
            );
            actions.push(NodeAction::BlocksRejected {
                ledger_id,
                from: *from,
                indices: report.rejected.clone(),
            });
        }
        actions.extend(self.advance(ledger_id));
        (report, actions)
    }

    /// Anchoring check of every known receipt against the public log.
    /// Returns the proofs found in this pass.
    pub fn audit_internal(&mut self, log: &AnchorLog) -> Vec<MisbehaviorProof> {
        let addr = self.notary_key.actor_id();
        let found: Vec<MisbehaviorProof> = self
            .ledgers
            .values()
            .flat_map(|v| v.known_receipts())
            .filter(|r| anchor_obligation(r, log, &addr) == Obligation::Unmet)
            .map(|r| MisbehaviorProof {
                kind: MisbehaviorKind::AnchorDesync,
                ledger_id: r.ledger_id(),
                receipts: vec![r.clone()],
                anchor_txn: match r.anchor_ref {
                    AnchorRef::Txn(id) => Some(id),
                    AnchorRef::Pending { .. } => None,
                },
            })
            .collect();
        let mut sink = Vec::new();
        for p in &found {
            self.record_proof(p.clone(), &mut sink);
        }
        found
    }

    /// Latest known sequence number per ledger, for anti-entropy exchange.
    pub fn summary(&self) -> BTreeMap<LedgerId, u64> {
        self.ledgers
            .iter()
            .map(|(id, v)| (*id, v.by_seq.keys().next_back().copied().unwrap_or(0)))
            .collect()
    }

    /// Receipts a peer with `summary` is missing.
    pub fn receipts_missing_from(&self, summary: &BTreeMap<LedgerId, u64>) -> Vec<Receipt> {
        let mut out = Vec::new();
        for (id, v) in &self.ledgers {
            match summary.get(id) {
                None => {
                    out.push(v.creation.clone());
                    out.extend(v.by_seq.values().cloned());
                }
                Some(&seq) => out.extend(v.by_seq.range(seq + 1..).map(|(_, r)| r.clone())),
            }
        }
        out
    }

    pub fn erase(&mut self, ledger_id: &LedgerId, index: u64) -> Result<(), NodeError> {
        let view = self.ledgers.get_mut(ledger_id).ok_or(NodeError::UnknownLedger)?;
        let replica = view.replica.as_mut().ok_or(NodeError::NotParticipant)?;
        Ok(replica.erase_block(index)?)
    }

    /// Export of `indices`; with `digests_only` every entry is an explicit
    /// omission, so the archive carries no block content.
    pub fn export(
        &self,
        ledger_id: &LedgerId,
        indices: &[u64],
        digests_only: bool,
    ) -> Result<ExportArchive, NodeError> {
        let replica = self.replica(ledger_id).ok_or(NodeError::UnknownLedger)?;
        let mut archive = replica.make_export(indices)?;
        if digests_only {
            for item in &mut archive.items {
                item.entry = BlockEntry::Omitted(item.leaf_digest);
            }
        }
        Ok(archive)
    }

    /// Builds a replica from a complete export, e.g. one received from an
    /// author.
    pub fn import_export(&mut self, archive: &ExportArchive) -> Result<(), NodeError> {
        let replica = LedgerReplica::from_export(archive, &self.notary_key)?;
        let mut actions = Vec::new();
        for r in replica.receipts() {
            self.seen.insert(r.content_hash());
        }
        let mut receipts = replica.receipts().iter();
        let creation = receipts.next().expect("nonempty").clone();
        if !self.ledgers.contains_key(&archive.ledger_id) {
            self.learn_creation(creation, &mut actions);
        }
        for r in receipts {
            self.learn_extension(r.clone(), &mut actions);
        }
        self.ledgers.get_mut(&archive.ledger_id).expect("learned").replica = Some(replica);
        Ok(())
    }

    /// Rebuilds the replica of `ledger_id` from full block contents, e.g.
    /// recovered from a repository Notary, using the known receipts.
    pub fn restore_blocks(&mut self, ledger_id: &LedgerId, blocks: Vec<Vec<u8>>) -> Result<(), NodeError> {
        let view = self.ledgers.get_mut(ledger_id).ok_or(NodeError::UnknownLedger)?;
        let mut entries = blocks.into_iter().map(BlockEntry::Present);
        let initial = view.creation.new_state().1;
        let first = entries.by_ref().take(initial as usize).collect();
        let mut replica = LedgerReplica::from_creation(view.creation.clone(), first, &self.notary_key)?;
        for r in view.by_seq.values() {
            let (_, from) = r.prev();
            let (_, to) = r.new_state();
            let chunk: Vec<BlockEntry> = entries.by_ref().take((to - from) as usize).collect();
            if chunk.is_empty() {
                break;
            }
            replica.commit(r.clone(), chunk, &self.notary_key)?;
        }
        view.replica = Some(replica);
        view.staged.clear();
        Ok(())
    }

    /// Drops the replica of `ledger_id`, keeping its receipts.
    pub fn lose_replica(&mut self, ledger_id: &LedgerId) {
        if let Some(view) = self.ledgers.get_mut(ledger_id) {
            view.replica = None;
            view.staged.clear();
            view.fetching.clear();
        }
    }

    /// Creates a ledger by calling `notary` directly.
    pub fn create_ledger(
        &mut self,
        notary: &dyn NotaryService,
        authors: AuthorSet,
        blocks: Vec<Vec<u8>>,
        now_ms: u64,
    ) -> Result<Receipt, NodeError> {
        let actions = self.begin_create(authors, blocks, None)?;
        let Some(NodeAction::SendCreate { request, blocks }) = actions.into_iter().next() else {
            unreachable!("begin_create emits SendCreate");
        };
        let result = notary.handle_create(&request, blocks.as_deref(), now_ms);
        let id = request.ledger_id;
        self.on_create_reply(id, result.clone());
        result.map_err(NodeError::Notary)
    }

    /// Extends a ledger by calling `notary` directly, without cosigners.
    /// A stale request is retried once if the replica has already caught up.
    pub fn extend_ledger(
        &mut self,
        notary: &dyn NotaryService,
        ledger_id: LedgerId,
        blocks: Vec<Vec<u8>>,
        now_ms: u64,
    ) -> Result<Receipt, NodeError> {
        if !self.is_idle(&ledger_id) {
            return Err(NodeError::Busy);
        }
        let mut actions = self.begin_extend(ledger_id, blocks, Vec::new(), false)?;
        loop {
            let send = actions.iter().find_map(|a| match a {
                NodeAction::SendExtend { request, blocks } => Some((request.clone(), blocks.clone())),
                _ => None,
            });
            if let Some(NodeAction::ExtensionFailed { error, .. }) =
                actions.iter().find(|a| matches!(a, NodeAction::ExtensionFailed { .. }))
            {
                return Err(error.clone());
            }
            let Some((request, blocks)) = send else {
                let stale = self.ops.remove(&ledger_id);
                return match stale.map(|op| op.state) {
                    Some(OpState::AwaitingSync { .. }) => Err(NodeError::Notary(NotaryError::StaleDigest {
                        current_digest: empty_root(),
                        current_size: 0,
                    })),
                    _ => Err(NodeError::Busy),
                };
            };
            let result = notary.handle_extend(&request, blocks.as_deref(), now_ms);
            if let Ok(receipt) = &result {
                self.on_extend_reply(ledger_id, Ok(receipt.clone()));
                return Ok(receipt.clone());
            }
            actions = self.on_extend_reply(ledger_id, result);
        }
    }

    /// Replica invariants plus the receipt index invariants.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (id, v) in &self.ledgers {
            for r in std::iter::once(&v.creation).chain(v.by_seq.values()) {
                verify_receipt(r, &self.notary_key, v.authors()).map_err(|e| format!("{id}: indexed receipt {e}"))?;
            }
            if let Some(replica) = &v.replica {
                replica.check_invariants()?;
                for r in replica.receipts() {
                    if !self.seen.contains(&r.content_hash()) {
                        return Err(format!("{id}: replica receipt not indexed"));
                    }
                }
            }
        }
        Ok(())
    }
}
