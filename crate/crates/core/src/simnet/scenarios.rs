//! The built-in scenario corpus: honest workloads and one scenario per
//! injected fault, each with the detections a correct run must produce.

use std::collections::BTreeSet;

use crate::auditor::ViolationKind;
use crate::notary::{Notarization, Policy};
use crate::protocol::MisbehaviorKind;

use super::{
    Action, CreateParams, Detection, ExportParams, ExtendParams, FaultKind, FaultSpec, LedgerIndex, LedgerIndices,
    LedgerName, ScriptStep, SimConfig,
};

#[derive(Clone, Debug)]
pub struct Scenario {
    pub name: &'static str,
    pub description: &'static str,
    pub config: SimConfig,
    pub script: Vec<ScriptStep>,
    /// Exactly the detection classes the run must report.
    pub expected: BTreeSet<Detection>,
    pub honest: bool,
}

fn node(i: usize) -> String {
    format!("n{i}")
}

fn create(t: u64, by: usize, ledger: &str, authors: &[usize], blocks: usize) -> ScriptStep {
    ScriptStep::new(
        t,
        node(by),
        Action::Create(CreateParams {
            ledger: ledger.into(),
            authors: authors.to_vec(),
            blocks,
            ..CreateParams::default()
        }),
    )
}

fn extend(t: u64, by: usize, ledger: &str, blocks: usize) -> ScriptStep {
    extend_with(
        t,
        by,
        ledger,
        ExtendParams {
            blocks,
            ..ExtendParams::default()
        },
    )
}

fn extend_with(t: u64, by: usize, ledger: &str, params: ExtendParams) -> ScriptStep {
    ScriptStep::new(
        t,
        node(by),
        Action::Extend(ExtendParams {
            ledger: ledger.into(),
            ..params
        }),
    )
}

fn export(t: u64, by: usize, ledger: &str) -> ScriptStep {
    ScriptStep::new(
        t,
        node(by),
        Action::Export(ExportParams {
            ledger: ledger.into(),
            ..ExportParams::default()
        }),
    )
}

fn audit(t: u64) -> ScriptStep {
    ScriptStep::new(t, "notary", Action::Audit)
}

fn faulty(seed: u64, n: usize, kind: FaultKind, trigger_ms: u64) -> SimConfig {
    let mut c = SimConfig::new(seed, n);
    c.faults.push(FaultSpec::new(kind, trigger_ms));
    c
}

fn set(items: &[Detection]) -> BTreeSet<Detection> {
    items.iter().cloned().collect()
}

fn honest(name: &'static str, description: &'static str, config: SimConfig, script: Vec<ScriptStep>) -> Scenario {
    Scenario {
        name,
        description,
        config,
        script,
        expected: BTreeSet::new(),
        honest: true,
    }
}

fn fault(
    name: &'static str,
    description: &'static str,
    config: SimConfig,
    script: Vec<ScriptStep>,
    expected: &[Detection],
) -> Scenario {
    Scenario {
        name,
        description,
        config,
        script,
        expected: set(expected),
        honest: false,
    }
}

fn honest_medium(seed: u64) -> Scenario {
    let mut script = vec![create(0, 0, "L", &[0, 1, 2, 3, 4], 1)];
    for i in 0..10u64 {
        script.push(extend(200 + 200 * i, (i % 5) as usize, "L", 3));
    }
    script.push(export(2400, 0, "L"));
    honest(
        "honest-medium",
        "5 co-authors, 10 extensions of 3 blocks by rotating writers",
        SimConfig::new(seed, 5),
        script,
    )
}

/// The corpus for `seed`. Names are stable.
pub fn scenario_corpus(seed: u64) -> Vec<Scenario> {
    use Detection::{Audit, BlockRejected, Proof};
    let mut out = Vec::new();

    out.push(honest(
        "honest-small",
        "two co-authors alternate extensions",
        SimConfig::new(seed, 2),
        vec![
            create(0, 0, "L", &[0, 1], 2),
            extend(100, 0, "L", 1),
            extend(250, 1, "L", 2),
            extend(400, 0, "L", 1),
            export(700, 1, "L"),
        ],
    ));

    out.push(honest_medium(seed));

    let mut large = vec![
        create(0, 0, "A", &(0..10).collect::<Vec<_>>(), 1),
        create(0, 10, "B", &(10..20).collect::<Vec<_>>(), 1),
    ];
    for i in 0..8u64 {
        large.push(extend(200 + 150 * i, (i % 10) as usize, "A", 2));
        large.push(extend(275 + 150 * i, 10 + (i % 10) as usize, "B", 2));
    }
    large.push(export(1800, 3, "A"));
    large.push(export(1800, 13, "B"));
    out.push(honest(
        "honest-large",
        "20 nodes, two disjoint ledgers of 10 authors each",
        SimConfig::new(seed, 20),
        large,
    ));

    let mut multi = Vec::new();
    for l in 0..5usize {
        multi.push(create(10 * l as u64, l, &format!("L{l}"), &[l, (l + 1) % 5], 1));
    }
    for round in 0..4u64 {
        for l in 0..5usize {
            let writer = if round % 2 == 0 { l } else { (l + 1) % 5 };
            multi.push(extend(200 + 200 * round + 10 * l as u64, writer, &format!("L{l}"), 1));
        }
    }
    for l in 0..5usize {
        multi.push(export(1200, (l + 1) % 5, &format!("L{l}")));
    }
    out.push(honest(
        "multi-ledger",
        "5 ledgers with overlapping author pairs",
        SimConfig::new(seed, 5),
        multi,
    ));

    out.push(honest(
        "race",
        "two co-authors extend the same state at once; one is stale and retries",
        SimConfig::new(seed, 3),
        vec![
            create(0, 0, "L", &[0, 1, 2], 1),
            extend(200, 0, "L", 1),
            extend(200, 1, "L", 1),
            export(1000, 2, "L"),
        ],
    ));

    out.push(honest(
        "erasure-export",
        "erased blocks stay verifiable in exports",
        SimConfig::new(seed, 3),
        vec![
            create(0, 0, "L", &[0, 1, 2], 4),
            extend(150, 1, "L", 2),
            ScriptStep::new(
                500,
                node(0),
                Action::Erase(LedgerIndex {
                    ledger: "L".into(),
                    index: 1,
                }),
            ),
            ScriptStep::new(
                500,
                node(2),
                Action::Erase(LedgerIndex {
                    ledger: "L".into(),
                    index: 4,
                }),
            ),
            ScriptStep::new(
                600,
                node(0),
                Action::Export(ExportParams {
                    ledger: "L".into(),
                    indices: Some(vec![0, 1, 2, 5]),
                    ..ExportParams::default()
                }),
            ),
            export(600, 2, "L"),
            extend(700, 2, "L", 1),
            export(1200, 1, "L"),
        ],
    ));

    let mut delayed = SimConfig::new(seed, 3);
    delayed.notary.notarization = Notarization::Delayed { interval_ms: 400 };
    let mut script = vec![create(0, 0, "L", &[0, 1, 2], 1)];
    for i in 0..8u64 {
        script.push(extend(100 + 150 * i, (i % 3) as usize, "L", 1));
    }
    script.push(export(1400, 1, "L"));
    out.push(honest(
        "delayed-notarization",
        "extensions anchored in batches every 400 ms",
        delayed,
        script,
    ));

    let mut repo = SimConfig::new(seed, 3);
    repo.notary.repository = true;
    out.push(honest(
        "repository-recovery",
        "a node restores a lost replica from the repository Notary",
        repo,
        vec![
            create(0, 0, "L", &[0, 1, 2], 2),
            extend(150, 1, "L", 2),
            extend(300, 2, "L", 1),
            ScriptStep::new(600, node(1), Action::Recover(LedgerName { ledger: "L".into() })),
            ScriptStep::new(
                650,
                node(1),
                Action::Certify(LedgerIndices {
                    ledger: "L".into(),
                    indices: vec![0, 3, 4],
                }),
            ),
            ScriptStep::new(700, "notary", Action::RestartNotary),
            extend(800, 1, "L", 1),
            export(1200, 1, "L"),
        ],
    ));

    let mut pol = SimConfig::new(seed, 3);
    pol.notary.repository = true;
    pol.notary.policy = true;
    let policy = Policy {
        max_block_bytes: Some(64),
        min_signers: Some(2),
        allowed_content_tags: Some(vec![1]),
    };
    out.push(honest(
        "policy-enforcement",
        "the Notary rejects extensions that break the ledger policy",
        pol,
        vec![
            ScriptStep::new(
                0,
                node(0),
                Action::Create(CreateParams {
                    ledger: "L".into(),
                    authors: vec![0, 1, 2],
                    blocks: 2,
                    policy: Some(policy),
                    ..CreateParams::default()
                }),
            ),
            extend(200, 0, "L", 1),
            extend_with(
                400,
                1,
                "L",
                ExtendParams {
                    tag: 2,
                    cosigners: vec![2],
                    ..ExtendParams::default()
                },
            ),
            extend_with(
                600,
                2,
                "L",
                ExtendParams {
                    cosigners: vec![0],
                    ..ExtendParams::default()
                },
            ),
            export(1000, 0, "L"),
        ],
    ));

    out.push(fault(
        "notary-fork",
        "the Notary signs a competing extension of an extended state",
        faulty(seed, 3, FaultKind::NotaryFork, 0),
        vec![
            create(0, 0, "L", &[0, 1, 2], 1),
            extend(200, 0, "L", 1),
            extend(200, 1, "L", 1),
        ],
        &[Proof(MisbehaviorKind::Fork), Proof(MisbehaviorKind::AnchorDesync)],
    ));

    out.push(fault(
        "unauthorized-accept",
        "the Notary accepts an extension signed by a non-author",
        faulty(seed, 3, FaultKind::NotaryUnauthorizedAccept, 0),
        vec![
            create(0, 0, "L", &[0, 1], 1),
            extend(150, 1, "L", 1),
            ScriptStep::new(
                400,
                node(0),
                Action::Export(ExportParams {
                    ledger: "L".into(),
                    digests_only: true,
                    to: Some(2),
                    ..ExportParams::default()
                }),
            ),
            extend_with(
                500,
                2,
                "L",
                ExtendParams {
                    force: true,
                    ..ExtendParams::default()
                },
            ),
        ],
        &[Proof(MisbehaviorKind::UnauthorizedAccept)],
    ));

    out.push(fault(
        "anchor-omit",
        "the Notary signs an extension without anchoring it",
        faulty(seed, 3, FaultKind::AnchorOmit, 150),
        vec![
            create(0, 0, "L", &[0, 1, 2], 1),
            extend(200, 1, "L", 1),
            extend(400, 2, "L", 1),
        ],
        &[Audit(ViolationKind::BrokenChain), Proof(MisbehaviorKind::AnchorDesync)],
    ));

    out.push(fault(
        "duplicate-init",
        "the Notary creates a second ledger under an id already in use",
        faulty(seed, 3, FaultKind::DuplicateInit, 0),
        vec![
            create(0, 0, "L", &[0, 1], 1),
            ScriptStep::new(
                200,
                node(2),
                Action::Create(CreateParams {
                    ledger: "M".into(),
                    authors: vec![1, 2],
                    reuse: Some("L".into()),
                    ..CreateParams::default()
                }),
            ),
        ],
        &[Audit(ViolationKind::DuplicateInit), Proof(MisbehaviorKind::Fork)],
    ));

    out.push(fault(
        "node-tamper",
        "a block is corrupted in transit between co-authors",
        faulty(seed, 3, FaultKind::NodeTamperBlock, 150),
        vec![
            create(0, 0, "L", &[0, 1, 2], 1),
            extend(200, 0, "L", 2),
            extend(500, 1, "L", 1),
        ],
        &[BlockRejected],
    ));

    out.push(fault(
        "anchor-invalid-proof",
        "the Notary anchors an extension with a corrupted consistency proof",
        faulty(seed, 3, FaultKind::AnchorInvalidProof, 350),
        vec![
            create(0, 0, "L", &[0, 1, 2], 1),
            extend(200, 0, "L", 2),
            extend(400, 1, "L", 1),
        ],
        &[Audit(ViolationKind::InvalidProof), Proof(MisbehaviorKind::AnchorDesync)],
    ));

    out.push(fault(
        "anchor-replay",
        "the Notary anchors an extension step twice",
        faulty(seed, 3, FaultKind::AnchorReplay, 150),
        vec![
            create(0, 0, "L", &[0, 1, 2], 1),
            extend(200, 0, "L", 1),
            extend(400, 1, "L", 1),
            audit(800),
        ],
        &[Audit(ViolationKind::BrokenChain)],
    ));

    out
}

pub fn scenario(name: &str, seed: u64) -> Option<Scenario> {
    if name == "honest-medium" {
        return Some(honest_medium(seed));
    }
    scenario_corpus(seed).into_iter().find(|s| s.name == name)
}
