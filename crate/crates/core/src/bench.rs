//! Throughput benchmark of the Notary and of node-side hashing.
//!
//! Nodes generate block content, hash it into leaves and build signed
//! extension requests; only the digests reach the Notary. Immediate mode
//! drives the Notary from worker threads, one ledger per worker at a time.
//! Delayed mode runs on one thread against a simulated clock that advances
//! 1 ms per round of one request per ledger.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::anchor::AnchorLog;
use crate::auditor::audit_anchor;
use crate::hashtree::{leaf_hash, prove_consistency, Digest, Frontier};
use crate::identity::generate_keypair;
use crate::notary::{Notarization, Notary, NotaryConfig, NotaryError, NotaryService};
use crate::protocol::{AuthorSet, CreationRequest, ExtensionRequest, LedgerId, Receipt};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid bench configuration: {0}")]
    Config(&'static str),
    #[error("notary rejected a benchmark request: {0}")]
    Notary(#[from] NotaryError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BenchConfig {
    /// Single-block extensions per ledger.
    pub extensions: u64,
    pub block_bytes: usize,
    pub ledgers: usize,
    pub notarization: Notarization,
    /// Worker threads in immediate mode.
    pub threads: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            extensions: 1000,
            block_bytes: 1024,
            ledgers: 4,
            notarization: Notarization::Immediate,
            threads: 4,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub requests: u64,
    pub receipts: u64,
    pub notary_seconds: f64,
    pub requests_per_second: f64,
    pub notary_ns_per_request_mean: f64,
    pub notary_ns_per_request_median: f64,
    /// Time spent hashing block content into leaves.
    pub node_hash_seconds: f64,
    pub node_bytes_hashed_per_second: f64,
    /// Time spent building proofs and signing requests.
    pub node_request_seconds: f64,
    pub receipt_bytes_min: usize,
    pub receipt_bytes_max: usize,
    pub anchor_txns: u64,
    /// Anchor transactions that carry extension steps.
    pub extension_anchor_txns: u64,
    /// Delayed mode: the most extension anchors any ledger may need.
    pub extension_anchor_bound: Option<u64>,
    pub max_extension_anchors_per_ledger: u64,
    pub audit_coherent: bool,
    pub receipt_chains_coherent: bool,
}

struct PreparedLedger {
    creation: CreationRequest,
    extensions: Vec<ExtensionRequest>,
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn prepare(
    config: &BenchConfig,
    index: usize,
    rng: &mut ChaCha8Rng,
    hash_time: &mut Duration,
    req_time: &mut Duration,
) -> PreparedLedger {
    let mut seed = [0u8; 32];
    rng.fill_bytes(&mut seed);
    let author = generate_keypair(seed);
    let ledger_id = LedgerId::derive(&author.public(), index as u64);
    let authors = AuthorSet::new(vec![author.public()]).expect("one author");
    let mut content = vec![0u8; config.block_bytes];
    let mut leaves: Vec<Digest> = Vec::new();
    let mut frontier = Frontier::new();
    let next_leaf = |rng: &mut ChaCha8Rng, content: &mut Vec<u8>, hash_time: &mut Duration| {
        rng.fill_bytes(content);
        let t = Instant::now();
        let leaf = leaf_hash(content);
        *hash_time += t.elapsed();
        leaf
    };
    let first = next_leaf(rng, &mut content, hash_time);
    leaves.push(first);
    frontier.push(first);
    let creation = CreationRequest::signed(&author, ledger_id, authors, frontier.root(), 1);
    let mut extensions = Vec::with_capacity(config.extensions as usize);
    for _ in 0..config.extensions {
        let prev = (frontier.root(), frontier.size());
        let leaf = next_leaf(rng, &mut content, hash_time);
        leaves.push(leaf);
        frontier.push(leaf);
        let t = Instant::now();
        let proof = prove_consistency(&leaves, prev.1).expect("prefix");
        extensions.push(ExtensionRequest::signed(
            ledger_id,
            prev,
            (frontier.root(), frontier.size()),
            proof,
            &[&author],
        ));
        *req_time += t.elapsed();
    }
    PreparedLedger { creation, extensions }
}

fn chain_coherent(creation: &Receipt, receipts: &[Receipt]) -> bool {
    let mut state = creation.new_state();
    let mut seq = creation.notary_seq;
    for r in receipts {
        if r.prev() != state || r.notary_seq != seq + 1 {
            return false;
        }
        state = r.new_state();
        seq = r.notary_seq;
    }
    true
}

fn median(v: &mut [u64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_unstable();
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        (v[m - 1] + v[m]) as f64 / 2.0
    } else {
        v[m] as f64
    }
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchReport, BenchError> {
    if config.extensions == 0 || config.ledgers == 0 || config.threads == 0 || config.block_bytes == 0 {
        return Err(BenchError::Config(
            "blocks, ledgers, threads and block_bytes must be positive",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut hash_time, mut req_time) = (Duration::ZERO, Duration::ZERO);
    let prepared: Vec<PreparedLedger> = (0..config.ledgers)
        .map(|i| prepare(config, i, &mut rng, &mut hash_time, &mut req_time))
        .collect();

    let notary_key = generate_keypair(*Digest::sha256(&config.seed.to_be_bytes()).as_bytes());
    let mut notary_config = NotaryConfig::base(notary_key);
    notary_config.notarization = config.notarization;
    notary_config.validate().map_err(BenchError::Config)?;
    let anchor = AnchorLog::new(0).shared();
    let notary = Notary::new(notary_config, anchor.clone());

    let creations = prepared
        .iter()
        .map(|p| notary.handle_create(&p.creation, None, 0))
        .collect::<Result<Vec<_>, _>>()?;

    let (results, durations, wall, end_ms) = match config.notarization {
        Notarization::Immediate => immediate(&notary, &prepared, config.threads)?,
        Notarization::Delayed { .. } => delayed(&notary, &prepared)?,
    };

    let log = {
        let mut guard = anchor.lock().unwrap_or_else(std::sync::PoisonError::into_inner);
        guard.advance_to(end_ms + 1);
        guard.clone()
    };
    let audit = audit_anchor(&log, &notary.address());
    let audit_coherent = audit.all_coherent()
        && prepared.iter().zip(&results).all(|(p, rs)| {
            let last = rs.last().map(|r| r.new_state());
            audit.ledger(&p.creation.ledger_id).and_then(|a| a.current_state())
                == last.or(Some((p.creation.initial_digest, p.creation.initial_size)))
        });
    let receipt_chains_coherent = creations.iter().zip(&results).all(|(c, rs)| chain_coherent(c, rs));

    let mut per_ledger: BTreeMap<LedgerId, u64> = BTreeMap::new();
    let mut extension_anchor_txns = 0;
    for txn in log.confirmed() {
        if !txn.payload.steps().is_empty() {
            extension_anchor_txns += 1;
            *per_ledger.entry(txn.payload.ledger_id()).or_default() += 1;
        }
    }
    let extension_anchor_bound = match config.notarization {
        Notarization::Immediate => None,
        Notarization::Delayed { interval_ms } => Some(config.extensions.div_ceil(interval_ms)),
    };

    let all: Vec<&Receipt> = creations.iter().chain(results.iter().flatten()).collect();
    let sizes = all.iter().map(|r| r.encoded_len());
    let requests = durations.len() as u64;
    let mut durations = durations;
    let total_ns: u64 = durations.iter().sum();
    let hashed = (config.block_bytes as u64) * (config.extensions + 1) * config.ledgers as u64;
    Ok(BenchReport {
        config: config.clone(),
        requests,
        receipts: results.iter().map(|r| r.len() as u64).sum(),
        notary_seconds: secs(wall),
        requests_per_second: requests as f64 / secs(wall).max(1e-9),
        notary_ns_per_request_mean: total_ns as f64 / requests.max(1) as f64,
        notary_ns_per_request_median: median(&mut durations),
        node_hash_seconds: secs(hash_time),
        node_bytes_hashed_per_second: hashed as f64 / secs(hash_time).max(1e-9),
        node_request_seconds: secs(req_time),
        receipt_bytes_min: sizes.clone().min().unwrap_or(0),
        receipt_bytes_max: sizes.max().unwrap_or(0),
        anchor_txns: log.len() as u64,
        extension_anchor_txns,
        extension_anchor_bound,
        max_extension_anchors_per_ledger: per_ledger.values().copied().max().unwrap_or(0),
        audit_coherent,
        receipt_chains_coherent,
    })
}

type Outcome = (Vec<Vec<Receipt>>, Vec<u64>, Duration, u64);

/// Ledger index, its receipts and per-request durations.
type LedgerRun = (usize, Vec<Receipt>, Vec<u64>);

fn immediate(notary: &Notary, prepared: &[PreparedLedger], threads: usize) -> Result<Outcome, BenchError> {
    let start = Instant::now();
    let per_thread: Vec<Result<Vec<LedgerRun>, NotaryError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads.min(prepared.len()))
            .map(|t| {
                s.spawn(move || {
                    let mut out = Vec::new();
                    for (i, p) in prepared.iter().enumerate().skip(t).step_by(threads) {
                        let mut receipts = Vec::with_capacity(p.extensions.len());
                        let mut times = Vec::with_capacity(p.extensions.len());
                        for req in &p.extensions {
                            let t0 = Instant::now();
                            let r = notary.handle_extend(req, None, 0)?;
                            times.push(t0.elapsed().as_nanos() as u64);
                            receipts.push(r);
                        }
                        out.push((i, receipts, times));
                    }
                    Ok(out)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bench worker panicked"))
            .collect()
    });
    let wall = start.elapsed();
    let mut results = vec![Vec::new(); prepared.len()];
    let mut durations = Vec::new();
    for chunk in per_thread {
        for (i, receipts, times) in chunk? {
            results[i] = receipts;
            durations.extend(times);
        }
    }
    Ok((results, durations, wall, 0))
}

fn delayed(notary: &Notary, prepared: &[PreparedLedger]) -> Result<Outcome, BenchError> {
    let rounds = prepared.iter().map(|p| p.extensions.len()).max().unwrap_or(0);
    let mut results = vec![Vec::new(); prepared.len()];
    let mut durations = Vec::new();
    let start = Instant::now();
    let mut now = 0;
    for round in 0..rounds {
        now = round as u64;
        for (i, p) in prepared.iter().enumerate() {
            if let Some(req) = p.extensions.get(round) {
                let t0 = Instant::now();
                let r = notary.handle_extend(req, None, now)?;
                durations.push(t0.elapsed().as_nanos() as u64);
                results[i].push(r);
            }
        }
        notary.flush(now);
    }
    while let Some(due) = notary.next_due() {
        now = now.max(due);
        notary.flush(now);
    }
    Ok((results, durations, start.elapsed(), now))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(notarization: Notarization) -> BenchConfig {
        BenchConfig {
            extensions: 40,
            block_bytes: 256,
            ledgers: 3,
            notarization,
            threads: 2,
            seed: 3,
        }
    }

    #[test]
    fn immediate_bench_is_coherent() {
        let r = run_bench(&small(Notarization::Immediate)).unwrap();
        assert_eq!(r.requests, 120);
        assert_eq!(r.receipts, 120);
        assert_eq!(r.extension_anchor_txns, 120);
        assert_eq!(r.anchor_txns, 123);
        assert!(r.audit_coherent && r.receipt_chains_coherent);
    }

    #[test]
    fn delayed_bench_batches_anchors() {
        let r = run_bench(&small(Notarization::Delayed { interval_ms: 10 })).unwrap();
        assert_eq!(r.receipts, 120);
        assert!(r.max_extension_anchors_per_ledger <= r.extension_anchor_bound.unwrap());
        assert!(r.audit_coherent && r.receipt_chains_coherent, "{r:?}");
    }

    #[test]
    fn zero_ledgers_is_rejected() {
        let mut c = small(Notarization::Immediate);
        c.ledgers = 0;
        assert!(matches!(run_bench(&c), Err(BenchError::Config(_))));
    }
}
