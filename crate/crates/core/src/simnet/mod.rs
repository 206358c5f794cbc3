//! Deterministic discrete-event simulation of a private network: nodes, the
//! Notary and the anchor log, driven by a seeded clock and a script of
//! timed actions.
//!
//! Events are ordered by simulated time, ties by insertion order. Gossip is
//! push-based with a per-round fanout plus one anti-entropy exchange per
//! node and round.

mod faulty;
mod scenarios;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anchor::{AnchorLog, SharedAnchorLog};
use crate::auditor::{
    audit_anchor, verify_export, verify_misbehavior_proof, AuditReport, ExportRejection, ProofRejection, ViolationKind,
};
use crate::hashtree::{ceil_log2, Digest};
use crate::identity::{generate_keypair, KeyPair, PublicKey, Signature};
use crate::ledgerstore::ExportArchive;
use crate::node::{BlockDelivery, Node, NodeAction};
use crate::notary::{AccessRequest, Notary, NotaryConfig, NotaryError, NotaryService, Policy};
use crate::protocol::{
    AuthorSet, CreationRequest, ExtensionRequest, LedgerId, MisbehaviorKind, MisbehaviorProof, Receipt, ReceiptKind,
};

pub use faulty::{FaultKind, FaultSpec, FaultyNotary};
pub use scenarios::{scenario, scenario_corpus, Scenario};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error("SCRIPT_ERROR: {0}")]
    Script(String),
    #[error("invalid configuration: {0}")]
    Config(&'static str),
}

fn script_err(msg: impl Into<String>) -> SimError {
    SimError::Script(msg.into())
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    pub seed: u64,
    pub node_count: usize,
    pub fanout: usize,
    /// Uniform message delay bounds, inclusive.
    pub latency_ms: (u64, u64),
    pub notary: NotaryConfig,
    pub anchor_latency_ms: u64,
    pub gossip_interval_ms: u64,
    /// Rounds a node keeps pushing a receipt after learning it.
    pub hot_rounds: u32,
    /// Simulated time after the last script step during which gossip still
    /// runs.
    pub settle_ms: u64,
    pub faults: Vec<FaultSpec>,
}

fn seeded_key(label: &[u8], seed: u64, index: u64) -> KeyPair {
    let mut input = label.to_vec();
    input.extend_from_slice(&seed.to_be_bytes());
    input.extend_from_slice(&index.to_be_bytes());
    generate_keypair(*Digest::sha256(&input).as_bytes())
}

impl SimConfig {
    /// Defaults: fanout 2, 5 to 20 ms latency, base-mode immediate Notary,
    /// 10 ms gossip rounds.
    pub fn new(seed: u64, node_count: usize) -> Self {
        SimConfig {
            seed,
            node_count,
            fanout: 2,
            latency_ms: (5, 20),
            notary: NotaryConfig::base(seeded_key(b"notary", seed, 0)),
            anchor_latency_ms: 50,
            gossip_interval_ms: 10,
            hot_rounds: ceil_log2(node_count.max(1) as u64) + 3,
            settle_ms: 1500,
            faults: Vec::new(),
        }
    }

    pub fn node_key(&self, index: usize) -> KeyPair {
        seeded_key(b"node", self.seed, index as u64)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.node_count == 0 {
            return Err(SimError::Config("node_count must be at least 1"));
        }
        if self.latency_ms.0 > self.latency_ms.1 {
            return Err(SimError::Config("min latency exceeds max latency"));
        }
        if self.gossip_interval_ms == 0 {
            return Err(SimError::Config("gossip interval must be positive"));
        }
        self.notary.validate().map_err(SimError::Config)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CreateParams {
    pub ledger: String,
    /// Node indices; the actor must be one of them.
    pub authors: Vec<usize>,
    /// Includes the policy block when `policy` is set.
    pub blocks: usize,
    pub block_bytes: usize,
    pub tag: u8,
    pub policy: Option<Policy>,
    /// Request the ledger id of an earlier ledger.
    pub reuse: Option<String>,
}

impl Default for CreateParams {
    fn default() -> Self {
        CreateParams {
            ledger: String::new(),
            authors: Vec::new(),
            blocks: 1,
            block_bytes: 64,
            tag: 1,
            policy: None,
            reuse: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtendParams {
    pub ledger: String,
    pub blocks: usize,
    pub block_bytes: usize,
    pub tag: u8,
    pub cosigners: Vec<usize>,
    /// Skip the node's own authorization checks.
    pub force: bool,
}

impl Default for ExtendParams {
    fn default() -> Self {
        ExtendParams {
            ledger: String::new(),
            blocks: 1,
            block_bytes: 64,
            tag: 1,
            cosigners: Vec::new(),
            force: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportParams {
    pub ledger: String,
    /// All blocks when absent.
    pub indices: Option<Vec<u64>>,
    pub digests_only: bool,
    /// Node that imports the archive.
    pub to: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerIndex {
    pub ledger: String,
    pub index: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerIndices {
    pub ledger: String,
    pub indices: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerName {
    pub ledger: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "action", content = "params", rename_all = "snake_case")]
pub enum Action {
    Create(CreateParams),
    Extend(ExtendParams),
    Erase(LedgerIndex),
    Export(ExportParams),
    /// The actor loses its replica and restores it from the repository.
    Recover(LedgerName),
    Certify(LedgerIndices),
    RestartNotary,
    /// Every node checks its receipts against the anchor log.
    Audit,
}

/// One line of a scenario script.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptStep {
    pub time_ms: u64,
    /// `n<index>` for a node, `notary` for the Notary.
    pub actor: String,
    #[serde(flatten)]
    pub action: Action,
}

impl ScriptStep {
    pub fn new(time_ms: u64, actor: impl Into<String>, action: Action) -> Self {
        ScriptStep {
            time_ms,
            actor: actor.into(),
            action,
        }
    }
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptStep>, SimError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| script_err(format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn script_to_jsonl(script: &[ScriptStep]) -> String {
    script
        .iter()
        .map(|s| serde_json::to_string(s).expect("script serializes") + "\n")
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SimMetrics {
    /// Gossip rounds from issuance until every node held the receipt, in
    /// issuance order.
    pub receipt_propagation_rounds: Vec<u64>,
    /// Receipts that never reached every node.
    pub receipts_not_propagated: u64,
    /// Per extension: simulated time from issuance until every author
    /// committed its blocks.
    pub sync_delay_ms: Vec<u64>,
    /// Encoded receipt size → count.
    pub receipt_bytes: BTreeMap<usize, u64>,
    pub message_count: u64,
    pub messages_by_kind: BTreeMap<String, u64>,
    pub confinement_violations: u64,
    pub stale_rejections: u64,
    pub receipts_issued: u64,
    pub anchor_txns: u64,
    pub end_time_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(tag = "by", content = "kind", rename_all = "snake_case")]
pub enum Detection {
    Audit(ViolationKind),
    Proof(MisbehaviorKind),
    BlockRejected,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmittedProof {
    pub node: usize,
    pub time_ms: u64,
    pub proof: MisbehaviorProof,
    pub verdict: Result<(), ProofRejection>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportRecord {
    pub name: String,
    pub node: usize,
    pub time_ms: u64,
    pub archive: ExportArchive,
    pub verdict: Result<(), ExportRejection>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Failure {
    pub time_ms: u64,
    pub node: usize,
    pub ledger: String,
    pub code: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RejectedBlocks {
    pub time_ms: u64,
    pub node: usize,
    pub ledger_id: LedgerId,
    pub indices: Vec<u64>,
}

/// Final world state and outputs of a run.
pub struct SimOutcome {
    pub nodes: Vec<Node>,
    pub notary: FaultyNotary,
    pub ledgers: BTreeMap<String, LedgerId>,
    pub authors: BTreeMap<LedgerId, Vec<usize>>,
    pub anchor_log: AnchorLog,
    pub audit: AuditReport,
    pub metrics: SimMetrics,
    pub proofs: Vec<EmittedProof>,
    pub exports: Vec<ExportRecord>,
    pub failures: Vec<Failure>,
    pub rejected_blocks: Vec<RejectedBlocks>,
    pub certificates_valid: Vec<bool>,
    pub recoveries: Vec<(usize, String, bool)>,
    /// Every receipt the Notary returned, in order.
    pub issued: Vec<Receipt>,
    /// Violated module invariants and divergent replicas.
    pub invariant_errors: Vec<String>,
}

impl SimOutcome {
    pub fn detections(&self) -> BTreeSet<Detection> {
        let mut d: BTreeSet<Detection> = self.audit.violations().map(|v| Detection::Audit(v.kind)).collect();
        d.extend(self.proofs.iter().map(|p| Detection::Proof(p.proof.kind)));
        if !self.rejected_blocks.is_empty() {
            d.insert(Detection::BlockRejected);
        }
        d
    }

    pub fn notary_key(&self) -> PublicKey {
        self.notary.public_key()
    }

    pub fn ledger_id(&self, name: &str) -> Option<LedgerId> {
        self.ledgers.get(name).copied()
    }

    pub fn metrics_json(&self) -> String {
        serde_json::to_string_pretty(&self.metrics).expect("metrics serialize") + "\n"
    }

    pub fn proofs_jsonl(&self) -> String {
        self.proofs
            .iter()
            .map(|p| {
                let mut v = serde_json::to_value(&p.proof).expect("proof serializes");
                let map = v.as_object_mut().expect("object");
                map.insert("type".into(), "MisbehaviorProof".into());
                map.insert("node".into(), p.node.into());
                map.insert("time_ms".into(), p.time_ms.into());
                map.insert("verified".into(), p.verdict.is_ok().into());
                map.insert(
                    "encoded".into(),
                    hex::encode(crate::protocol::codec::encode(&p.proof)).into(),
                );
                v.to_string() + "\n"
            })
            .collect()
    }

    /// Gossip rounds between the later of the two receipts of the first
    /// fork proof and that proof's emission.
    pub fn fork_detection_rounds(&self, gossip_interval_ms: u64) -> Option<u64> {
        self.proofs
            .iter()
            .filter(|p| p.proof.kind == MisbehaviorKind::Fork)
            .map(|p| {
                let second = p.proof.receipts.iter().map(|r| r.timestamp_ms).max().unwrap_or(0);
                p.time_ms.saturating_sub(second).div_ceil(gossip_interval_ms)
            })
            .min()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Actor {
    Node(usize),
    Notary,
}

#[derive(Clone, Debug)]
enum Msg {
    Receipts(Vec<Receipt>),
    Summary(BTreeMap<LedgerId, u64>),
    Fetch {
        ledger_id: LedgerId,
        indices: Vec<u64>,
        at_size: u64,
    },
    Blocks {
        ledger_id: LedgerId,
        at_size: u64,
        deliveries: Vec<BlockDelivery>,
    },
    FetchFailed {
        ledger_id: LedgerId,
        indices: Vec<u64>,
    },
    CosignRequest {
        request: ExtensionRequest,
        blocks: Vec<Vec<u8>>,
    },
    CosignReply {
        ledger_id: LedgerId,
        signature: Option<Signature>,
    },
    Create {
        request: CreationRequest,
        blocks: Option<Vec<Vec<u8>>>,
    },
    Extend {
        request: ExtensionRequest,
        blocks: Option<Vec<Vec<u8>>>,
    },
    CreateReply {
        ledger_id: LedgerId,
        result: Result<Receipt, NotaryError>,
    },
    ExtendReply {
        ledger_id: LedgerId,
        result: Result<Receipt, NotaryError>,
    },
}

impl Msg {
    fn kind(&self) -> &'static str {
        match self {
            Msg::Receipts(_) => "receipts",
            Msg::Summary(_) => "summary",
            Msg::Fetch { .. } => "fetch",
            Msg::Blocks { .. } => "blocks",
            Msg::FetchFailed { .. } => "fetch_failed",
            Msg::CosignRequest { .. } => "cosign_request",
            Msg::CosignReply { .. } => "cosign_reply",
            Msg::Create { .. } => "create",
            Msg::Extend { .. } => "extend",
            Msg::CreateReply { .. } => "create_reply",
            Msg::ExtendReply { .. } => "extend_reply",
        }
    }
}

#[derive(Clone, Debug)]
enum Event {
    Script(usize),
    Deliver { from: Actor, to: Actor, msg: Box<Msg> },
    Tick,
    Flush,
}

struct Propagation {
    issued_ms: u64,
    holders: BTreeSet<usize>,
    done: bool,
}

struct Sim {
    config: SimConfig,
    script: Vec<ScriptStep>,
    rng: ChaCha8Rng,
    now: u64,
    seq: u64,
    horizon: u64,
    queue: BTreeMap<(u64, u64), Event>,
    flushes: BTreeSet<u64>,
    nodes: Vec<Node>,
    key_index: BTreeMap<PublicKey, usize>,
    notary: FaultyNotary,
    anchor: SharedAnchorLog,
    hot: Vec<BTreeMap<Digest, (Receipt, u32)>>,
    names: BTreeMap<String, LedgerId>,
    id_names: BTreeMap<LedgerId, String>,
    authors: BTreeMap<LedgerId, Vec<usize>>,
    propagation: BTreeMap<Digest, Propagation>,
    propagation_order: Vec<Digest>,
    issue_times: BTreeMap<(LedgerId, u64), u64>,
    commits: BTreeMap<(LedgerId, u64), BTreeSet<usize>>,
    synced: BTreeSet<(LedgerId, u64)>,
    metrics: SimMetrics,
    proofs: Vec<EmittedProof>,
    exports: Vec<ExportRecord>,
    failures: Vec<Failure>,
    rejected_blocks: Vec<RejectedBlocks>,
    certificates_valid: Vec<bool>,
    recoveries: Vec<(usize, String, bool)>,
    issued: Vec<Receipt>,
}

/// Runs `script` under `config`. Identical inputs give identical outputs.
pub fn run(config: &SimConfig, script: &[ScriptStep]) -> Result<SimOutcome, SimError> {
    config.validate()?;
    for step in script {
        check_actor(config, step)?;
    }
    let mut sim = Sim::new(config.clone(), script.to_vec());
    sim.run_loop()?;
    Ok(sim.finish())
}

fn parse_actor(config: &SimConfig, actor: &str) -> Option<Actor> {
    if actor == "notary" {
        return Some(Actor::Notary);
    }
    let i: usize = actor.strip_prefix('n')?.parse().ok()?;
    (i < config.node_count).then_some(Actor::Node(i))
}

fn check_actor(config: &SimConfig, step: &ScriptStep) -> Result<(), SimError> {
    let actor =
        parse_actor(config, &step.actor).ok_or_else(|| script_err(format!("unknown actor {:?}", step.actor)))?;
    let needs_node = !matches!(step.action, Action::RestartNotary | Action::Audit);
    if needs_node && actor == Actor::Notary {
        return Err(script_err("this action needs a node actor"));
    }
    if matches!(step.action, Action::RestartNotary) && actor != Actor::Notary {
        return Err(script_err("restart_notary needs the notary actor"));
    }
    let in_range = |v: &[usize]| v.iter().all(|&i| i < config.node_count);
    match &step.action {
        Action::Create(p) if !in_range(&p.authors) => Err(script_err("author index out of range")),
        Action::Extend(p) if !in_range(&p.cosigners) => Err(script_err("cosigner index out of range")),
        Action::Export(ExportParams { to: Some(t), .. }) if *t >= config.node_count => {
            Err(script_err("export target out of range"))
        }
        _ => Ok(()),
    }
}

impl Sim {
    fn new(config: SimConfig, script: Vec<ScriptStep>) -> Self {
        let anchor = AnchorLog::new(config.anchor_latency_ms).shared();
        let notary = FaultyNotary::new(Notary::new(config.notary.clone(), anchor.clone()), &config.faults);
        let share = config.notary.repository;
        let nodes: Vec<Node> = (0..config.node_count)
            .map(|i| Node::new(config.node_key(i), notary.public_key(), share))
            .collect();
        let key_index = nodes.iter().enumerate().map(|(i, n)| (n.public_key(), i)).collect();
        let horizon = script.iter().map(|s| s.time_ms).max().unwrap_or(0) + config.settle_ms;
        let mut sim = Sim {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            now: 0,
            seq: 0,
            horizon,
            queue: BTreeMap::new(),
            flushes: BTreeSet::new(),
            hot: vec![BTreeMap::new(); nodes.len()],
            nodes,
            key_index,
            notary,
            anchor,
            names: BTreeMap::new(),
            id_names: BTreeMap::new(),
            authors: BTreeMap::new(),
            propagation: BTreeMap::new(),
            propagation_order: Vec::new(),
            issue_times: BTreeMap::new(),
            commits: BTreeMap::new(),
            synced: BTreeSet::new(),
            metrics: SimMetrics::default(),
            proofs: Vec::new(),
            exports: Vec::new(),
            failures: Vec::new(),
            rejected_blocks: Vec::new(),
            certificates_valid: Vec::new(),
            recoveries: Vec::new(),
            issued: Vec::new(),
            config,
            script,
        };
        for i in 0..sim.script.len() {
            let t = sim.script[i].time_ms;
            sim.schedule(t, Event::Script(i));
        }
        let first_tick = sim.config.gossip_interval_ms;
        sim.schedule(first_tick, Event::Tick);
        sim
    }

    fn schedule(&mut self, at: u64, event: Event) {
        self.queue.insert((at, self.seq), event);
        self.seq += 1;
    }

    fn send(&mut self, from: Actor, to: Actor, msg: Msg) {
        self.metrics.message_count += 1;
        *self.metrics.messages_by_kind.entry(msg.kind().into()).or_default() += 1;
        if to == Actor::Notary && !self.config.notary.repository {
            let carries = matches!(
                &msg,
                Msg::Create { blocks: Some(_), .. } | Msg::Extend { blocks: Some(_), .. }
            );
            if carries {
                self.metrics.confinement_violations += 1;
            }
        }
        let (lo, hi) = self.config.latency_ms;
        let delay = self.rng.gen_range(lo..=hi);
        self.schedule(
            self.now + delay,
            Event::Deliver {
                from,
                to,
                msg: Box::new(msg),
            },
        );
    }

    fn node_of(&self, key: &PublicKey) -> Option<usize> {
        self.key_index.get(key).copied()
    }

    fn ledger_name(&self, id: &LedgerId) -> String {
        self.id_names.get(id).cloned().unwrap_or_else(|| id.to_hex())
    }

    fn lookup(&self, name: &str) -> Result<LedgerId, SimError> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| script_err(format!("unknown ledger {name:?}")))
    }

    fn random_peers(&mut self, me: usize, count: usize) -> Vec<usize> {
        let others: Vec<usize> = (0..self.nodes.len()).filter(|&j| j != me).collect();
        others.choose_multiple(&mut self.rng, count).copied().collect()
    }

    fn gen_block(&mut self, tag: u8, bytes: usize) -> Vec<u8> {
        let mut b = vec![0u8; bytes.max(1)];
        self.rng.fill_bytes(&mut b);
        b[0] = tag;
        b
    }

    fn run_loop(&mut self) -> Result<(), SimError> {
        while let Some(((t, _), event)) = self.queue.pop_first() {
            self.now = t;
            self.anchor
                .lock()
                .unwrap_or_else(std::sync::PoisonError::into_inner)
                .advance_to(t);
            match event {
                Event::Script(i) => self.exec(i)?,
                Event::Deliver { from, to, msg } => self.deliver(from, to, *msg),
                Event::Tick => self.tick(),
                Event::Flush => {
                    self.flushes.remove(&t);
                    self.notary.flush(t);
                    self.schedule_flush();
                }
            }
        }
        Ok(())
    }

    fn schedule_flush(&mut self) {
        if let Some(due) = self.notary.next_due() {
            let at = due.max(self.now);
            if self.flushes.insert(at) {
                self.schedule(at, Event::Flush);
            }
        }
    }

    fn exec(&mut self, i: usize) -> Result<(), SimError> {
        let step = self.script[i].clone();
        let actor = parse_actor(&self.config, &step.actor).expect("checked");
        let node = match actor {
            Actor::Node(n) => n,
            Actor::Notary => usize::MAX,
        };
        match step.action {
            Action::Create(p) => {
                let keys = p.authors.iter().map(|&a| self.nodes[a].public_key()).collect();
                let authors = AuthorSet::new(keys).ok_or_else(|| script_err("empty author set"))?;
                let reuse = p.reuse.as_deref().map(|n| self.lookup(n)).transpose()?;
                let mut blocks = Vec::new();
                if let Some(policy) = &p.policy {
                    blocks.push(policy.to_block());
                }
                while blocks.len() < p.blocks {
                    blocks.push(self.gen_block(p.tag, p.block_bytes));
                }
                let actions = self.nodes[node]
                    .begin_create(authors, blocks, reuse)
                    .map_err(|e| script_err(format!("create {:?}: {e}", p.ledger)))?;
                for a in &actions {
                    if let NodeAction::SendCreate { request, .. } = a {
                        self.names.insert(p.ledger.clone(), request.ledger_id);
                        self.id_names.entry(request.ledger_id).or_insert(p.ledger.clone());
                        self.authors.insert(request.ledger_id, p.authors.clone());
                    }
                }
                self.dispatch(node, actions);
            }
            Action::Extend(p) => {
                let id = self.lookup(&p.ledger)?;
                let blocks = (0..p.blocks).map(|_| self.gen_block(p.tag, p.block_bytes)).collect();
                let cosigners = p.cosigners.iter().map(|&c| self.nodes[c].public_key()).collect();
                match self.nodes[node].begin_extend(id, blocks, cosigners, p.force) {
                    Ok(actions) => self.dispatch(node, actions),
                    Err(e) => self.fail(node, &id, e.code()),
                }
            }
            Action::Erase(p) => {
                let id = self.lookup(&p.ledger)?;
                if let Err(e) = self.nodes[node].erase(&id, p.index) {
                    self.fail(node, &id, e.code());
                }
            }
            Action::Export(p) => {
                let id = self.lookup(&p.ledger)?;
                let replica = self.nodes[node].replica(&id).map(|r| r.official_size());
                let indices = p.indices.clone().unwrap_or_else(|| (0..replica.unwrap_or(0)).collect());
                match self.nodes[node].export(&id, &indices, p.digests_only) {
                    Ok(archive) => {
                        if let Some(to) = p.to {
                            if let Err(e) = self.nodes[to].import_export(&archive) {
                                self.fail(to, &id, e.code());
                            }
                        }
                        let name = format!("{}-{}", p.ledger, self.exports.len());
                        self.exports.push(ExportRecord {
                            name,
                            node,
                            time_ms: self.now,
                            archive,
                            verdict: Ok(()),
                        });
                    }
                    Err(e) => self.fail(node, &id, e.code()),
                }
            }
            Action::Recover(p) => {
                let id = self.lookup(&p.ledger)?;
                let size = self.nodes[node].replica(&id).map(|r| r.official_size()).unwrap_or(0);
                self.nodes[node].lose_replica(&id);
                let request = AccessRequest::signed(self.nodes[node].keypair(), id, (0..size).collect());
                let ok = match self.notary.serve_blocks(&request) {
                    Ok(served) => {
                        let blocks = served.into_iter().map(|(_, b)| b).collect();
                        self.nodes[node].restore_blocks(&id, blocks).is_ok()
                    }
                    Err(e) => {
                        self.fail(node, &id, e.code());
                        false
                    }
                };
                self.recoveries.push((node, p.ledger.clone(), ok));
                let actions = self.nodes[node].poll();
                self.dispatch(node, actions);
            }
            Action::Certify(p) => {
                let id = self.lookup(&p.ledger)?;
                match self.notary.certify_blocks(id, &p.indices, self.now) {
                    Ok(cert) => {
                        let valid = cert.verify(&self.notary.public_key())
                            && self.nodes[node].replica(&id).is_some_and(|r| {
                                cert.indices
                                    .iter()
                                    .zip(&cert.leaf_digests)
                                    .all(|(&i, d)| r.leaf_digests().get(i as usize) == Some(d))
                            });
                        self.certificates_valid.push(valid);
                    }
                    Err(e) => self.fail(node, &id, e.code()),
                }
            }
            Action::RestartNotary => {
                self.notary
                    .restart()
                    .map_err(|e| script_err(format!("notary restart failed: {e}")))?;
            }
            Action::Audit => {
                let log = self
                    .anchor
                    .lock()
                    .unwrap_or_else(std::sync::PoisonError::into_inner)
                    .clone();
                for n in 0..self.nodes.len() {
                    for proof in self.nodes[n].audit_internal(&log) {
                        self.emit_proof(n, proof);
                    }
                }
            }
        }
        Ok(())
    }

    fn fail(&mut self, node: usize, id: &LedgerId, code: &str) {
        log::debug!("node {node} failed on {}: {code}", self.ledger_name(id));
        self.failures.push(Failure {
            time_ms: self.now,
            node,
            ledger: self.ledger_name(id),
            code: code.into(),
        });
    }

    fn emit_proof(&mut self, node: usize, proof: MisbehaviorProof) {
        if self.proofs.iter().any(|p| p.node == node && p.proof == proof) {
            return;
        }
        self.proofs.push(EmittedProof {
            node,
            time_ms: self.now,
            proof,
            verdict: Ok(()),
        });
    }

    fn push_receipts(&mut self, at: usize, receipts: Vec<Receipt>) {
        let peers = self.random_peers(at, self.config.fanout);
        for p in peers {
            self.send(Actor::Node(at), Actor::Node(p), Msg::Receipts(receipts.clone()));
        }
    }

    fn dispatch(&mut self, at: usize, actions: Vec<NodeAction>) {
        let me = Actor::Node(at);
        for action in actions {
            match action {
                NodeAction::SendCreate { request, blocks } => {
                    self.send(me, Actor::Notary, Msg::Create { request, blocks })
                }
                NodeAction::SendExtend { request, blocks } => {
                    self.send(me, Actor::Notary, Msg::Extend { request, blocks })
                }
                NodeAction::RequestCosign { to, request, blocks } => {
                    if let Some(j) = self.node_of(&to) {
                        self.send(me, Actor::Node(j), Msg::CosignRequest { request, blocks });
                    }
                }
                NodeAction::CosignReply {
                    to,
                    ledger_id,
                    signature,
                } => {
                    if let Some(j) = self.node_of(&to) {
                        self.send(me, Actor::Node(j), Msg::CosignReply { ledger_id, signature });
                    }
                }
                NodeAction::Forward(receipt) => {
                    let h = receipt.content_hash();
                    self.hot[at].insert(h, (receipt.clone(), self.config.hot_rounds));
                    self.push_receipts(at, vec![receipt]);
                }
                NodeAction::FetchBlocks {
                    from,
                    ledger_id,
                    indices,
                    at_size,
                } => match self.node_of(&from) {
                    Some(j) => self.send(
                        me,
                        Actor::Node(j),
                        Msg::Fetch {
                            ledger_id,
                            indices,
                            at_size,
                        },
                    ),
                    None => self.nodes[at].on_fetch_failed(&ledger_id, &indices),
                },
                NodeAction::Misbehavior(proof) => self.emit_proof(at, proof),
                NodeAction::Committed { ledger_id, seq, .. } => self.record_commit(at, ledger_id, seq),
                NodeAction::CreateFailed { ledger_id, error } => self.fail(at, &ledger_id, error.code()),
                NodeAction::ExtensionFailed { ledger_id, error } => self.fail(at, &ledger_id, error.code()),
                NodeAction::StaleRetry { .. } => self.metrics.stale_rejections += 1,
                NodeAction::BlocksRejected { ledger_id, indices, .. } => self.rejected_blocks.push(RejectedBlocks {
                    time_ms: self.now,
                    node: at,
                    ledger_id,
                    indices,
                }),
            }
        }
    }

    fn record_commit(&mut self, node: usize, id: LedgerId, seq: u64) {
        if seq == 0 || self.synced.contains(&(id, seq)) {
            return;
        }
        self.commits.entry((id, seq)).or_default().insert(node);
        let Some(authors) = self.authors.get(&id) else { return };
        let all = authors.iter().all(|a| self.commits[&(id, seq)].contains(a));
        if let (true, Some(&issued)) = (all, self.issue_times.get(&(id, seq))) {
            self.synced.insert((id, seq));
            self.metrics.sync_delay_ms.push(self.now - issued);
        }
    }

    fn track(&mut self, node: usize, receipts: &[Receipt]) {
        let n = self.nodes.len();
        for r in receipts {
            let h = r.content_hash();
            let held = self.nodes[node].has_receipt(r);
            let Some(p) = self.propagation.get_mut(&h) else {
                continue;
            };
            if held && !p.done {
                p.holders.insert(node);
                if p.holders.len() == n {
                    p.done = true;
                    let rounds = (self.now - p.issued_ms).div_ceil(self.config.gossip_interval_ms);
                    self.metrics.receipt_propagation_rounds.push(rounds);
                }
            }
        }
    }

    fn issue(&mut self, result: &Result<Receipt, NotaryError>) {
        let Ok(r) = result else { return };
        *self.metrics.receipt_bytes.entry(r.encoded_len()).or_default() += 1;
        self.metrics.receipts_issued += 1;
        self.issued.push(r.clone());
        let h = r.content_hash();
        if !self.propagation.contains_key(&h) {
            self.propagation_order.push(h);
            self.propagation.insert(
                h,
                Propagation {
                    issued_ms: self.now,
                    holders: BTreeSet::new(),
                    done: false,
                },
            );
        }
        if r.kind() == ReceiptKind::Extension {
            self.issue_times
                .entry((r.ledger_id(), r.notary_seq))
                .or_insert(self.now);
        }
    }

    fn deliver(&mut self, from: Actor, to: Actor, msg: Msg) {
        let Actor::Node(j) = to else {
            let Actor::Node(i) = from else { return };
            let (reply, result) = match msg {
                Msg::Create { request, blocks } => {
                    let result = self.notary.handle_create(&request, blocks.as_deref(), self.now);
                    (
                        Msg::CreateReply {
                            ledger_id: request.ledger_id,
                            result: result.clone(),
                        },
                        result,
                    )
                }
                Msg::Extend { request, blocks } => {
                    let result = self.notary.handle_extend(&request, blocks.as_deref(), self.now);
                    (
                        Msg::ExtendReply {
                            ledger_id: request.ledger_id,
                            result: result.clone(),
                        },
                        result,
                    )
                }
                _ => return,
            };
            self.issue(&result);
            self.schedule_flush();
            self.send(Actor::Notary, Actor::Node(i), reply);
            return;
        };
        let sender = match from {
            Actor::Node(i) => Some(self.nodes[i].public_key()),
            Actor::Notary => None,
        };
        match msg {
            Msg::Receipts(receipts) => {
                let mut actions = Vec::new();
                for r in &receipts {
                    actions.extend(self.nodes[j].on_receipt(r.clone(), sender.as_ref()));
                }
                self.track(j, &receipts);
                self.dispatch(j, actions);
            }
            Msg::Summary(summary) => {
                let missing = self.nodes[j].receipts_missing_from(&summary);
                if let (false, Actor::Node(i)) = (missing.is_empty(), from) {
                    self.send(to, Actor::Node(i), Msg::Receipts(missing));
                }
            }
            Msg::Fetch {
                ledger_id,
                indices,
                at_size,
            } => {
                let Actor::Node(i) = from else { return };
                let requester = self.nodes[i].public_key();
                let reply = match self.nodes[j].serve_blocks(&ledger_id, &indices, at_size, &requester) {
                    Ok(mut deliveries) => {
                        self.maybe_tamper(&mut deliveries);
                        Msg::Blocks {
                            ledger_id,
                            at_size,
                            deliveries,
                        }
                    }
                    Err(e) => {
                        log::debug!("node {j} did not serve {ledger_id}: {e}");
                        Msg::FetchFailed { ledger_id, indices }
                    }
                };
                self.send(to, from, reply);
            }
            Msg::Blocks {
                ledger_id,
                at_size,
                deliveries,
            } => {
                let outsider = !self.authors.get(&ledger_id).is_some_and(|a| a.contains(&j));
                if outsider && deliveries.iter().any(|d| d.entry.is_present()) {
                    self.metrics.confinement_violations += 1;
                }
                let sender = sender.expect("blocks come from nodes");
                let (_, actions) = self.nodes[j].ingest_blocks(ledger_id, at_size, deliveries, &sender);
                self.dispatch(j, actions);
            }
            Msg::FetchFailed { ledger_id, indices } => self.nodes[j].on_fetch_failed(&ledger_id, &indices),
            Msg::CosignRequest { request, blocks } => {
                if !self.authors.get(&request.ledger_id).is_some_and(|a| a.contains(&j)) {
                    self.metrics.confinement_violations += 1;
                }
                let sender = sender.expect("cosign requests come from nodes");
                let actions = self.nodes[j].on_cosign_request(&sender, &request, &blocks);
                self.dispatch(j, actions);
            }
            Msg::CosignReply { ledger_id, signature } => {
                let sender = sender.expect("cosign replies come from nodes");
                let actions = self.nodes[j].on_cosign_reply(&sender, ledger_id, signature);
                self.dispatch(j, actions);
            }
            Msg::CreateReply { ledger_id, result } => {
                let actions = self.nodes[j].on_create_reply(ledger_id, result.clone());
                if let Ok(r) = &result {
                    self.track(j, std::slice::from_ref(r));
                }
                self.dispatch(j, actions);
            }
            Msg::ExtendReply { ledger_id, result } => {
                let actions = self.nodes[j].on_extend_reply(ledger_id, result.clone());
                if let Ok(r) = &result {
                    self.track(j, std::slice::from_ref(r));
                }
                self.dispatch(j, actions);
            }
            Msg::Create { .. } | Msg::Extend { .. } => {}
        }
    }

    fn maybe_tamper(&mut self, deliveries: &mut [BlockDelivery]) {
        let Some(d) = deliveries.iter_mut().find(|d| d.entry.is_present()) else {
            return;
        };
        if !self.notary.fire(FaultKind::NodeTamperBlock, self.now) {
            return;
        }
        if let crate::ledgerstore::BlockEntry::Present(content) = &mut d.entry {
            let last = content.len() - 1;
            content[last] ^= 0x01;
        }
    }

    fn tick(&mut self) {
        for i in 0..self.nodes.len() {
            let hot: Vec<Receipt> = self.hot[i].values().map(|(r, _)| r.clone()).collect();
            self.hot[i].retain(|_, (_, left)| {
                *left -= 1;
                *left > 0
            });
            if !hot.is_empty() {
                self.push_receipts(i, hot);
            }
            if let Some(&peer) = self.random_peers(i, 1).first() {
                let summary = self.nodes[i].summary();
                if !summary.is_empty() {
                    self.send(Actor::Node(i), Actor::Node(peer), Msg::Summary(summary));
                }
            }
            let actions = self.nodes[i].poll();
            self.dispatch(i, actions);
        }
        let next = self.now + self.config.gossip_interval_ms;
        if next <= self.horizon {
            self.schedule(next, Event::Tick);
        }
    }

    fn finish(mut self) -> SimOutcome {
        let end = self.now;
        self.notary.flush(end);
        let log = {
            let mut guard = self.anchor.lock().unwrap_or_else(std::sync::PoisonError::into_inner);
            guard.advance_to(end + self.config.anchor_latency_ms);
            guard.clone()
        };
        let notary_key = self.notary.public_key();
        let audit = audit_anchor(&log, &notary_key.actor_id());
        for n in 0..self.nodes.len() {
            for proof in self.nodes[n].audit_internal(&log) {
                self.emit_proof(n, proof);
            }
        }
        for p in &mut self.proofs {
            p.verdict = verify_misbehavior_proof(&p.proof, &notary_key, Some(&log));
        }
        for e in &mut self.exports {
            e.verdict = verify_export(&e.archive, &log, &notary_key);
        }
        self.metrics.receipts_not_propagated = self.propagation.values().filter(|p| !p.done).count() as u64;
        self.metrics.anchor_txns = log.len() as u64;
        self.metrics.end_time_ms = end;
        let invariant_errors = self.invariant_errors();
        SimOutcome {
            nodes: self.nodes,
            notary: self.notary,
            ledgers: self.names,
            authors: self.authors,
            anchor_log: log,
            audit,
            metrics: self.metrics,
            proofs: self.proofs,
            exports: self.exports,
            failures: self.failures,
            rejected_blocks: self.rejected_blocks,
            certificates_valid: self.certificates_valid,
            recoveries: self.recoveries,
            issued: self.issued,
            invariant_errors,
        }
    }

    fn invariant_errors(&self) -> Vec<String> {
        let mut errors = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Err(e) = n.check_invariants() {
                errors.push(format!("node {i}: {e}"));
            }
        }
        for (id, authors) in &self.authors {
            let name = self.ledger_name(id);
            let Some(official) = self.notary.inner().ledger(id) else {
                continue;
            };
            for &a in authors {
                match self.nodes[a].replica(id) {
                    None => errors.push(format!("{name}: node {a} has no replica")),
                    Some(r) => {
                        if (r.official_digest(), r.official_size()) != (official.digest, official.size) {
                            errors.push(format!(
                                "{name}: node {a} holds state ({}, {}), official is ({}, {})",
                                r.official_digest(),
                                r.official_size(),
                                official.digest,
                                official.size
                            ));
                        }
                    }
                }
            }
            let first = authors.first().and_then(|&a| self.nodes[a].replica(id));
            for &a in authors.iter().skip(1) {
                if let (Some(x), Some(y)) = (first, self.nodes[a].replica(id)) {
                    if x.leaf_digests() != y.leaf_digests() {
                        errors.push(format!("{name}: node {a} holds different blocks"));
                    }
                }
            }
        }
        errors
    }
}

/// The fields an honest run must satisfy, as human-readable errors.
pub fn honest_run_errors(outcome: &SimOutcome) -> Vec<String> {
    let mut errors = outcome.invariant_errors.clone();
    if !outcome.audit.all_coherent() {
        errors.push("anchor audit reports violations".into());
    }
    for e in &outcome.exports {
        if let Err(r) = &e.verdict {
            errors.push(format!("export {} rejected: {r}", e.name));
        }
    }
    if !outcome.detections().is_empty() {
        errors.push(format!("unexpected detections: {:?}", outcome.detections()));
    }
    if outcome.metrics.confinement_violations > 0 {
        errors.push(format!(
            "{} confinement violations",
            outcome.metrics.confinement_violations
        ));
    }
    if outcome.metrics.receipts_not_propagated > 0 {
        errors.push(format!(
            "{} receipts never reached every node",
            outcome.metrics.receipts_not_propagated
        ));
    }
    errors
}

/// Anchor log bytes plus metrics JSON, the artifacts compared for
/// determinism.
pub fn fingerprint(outcome: &SimOutcome) -> (Vec<u8>, String) {
    (outcome.anchor_log.to_bytes(), outcome.metrics_json())
}
