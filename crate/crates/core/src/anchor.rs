//! Mock public DLT: an append-only, totally ordered transaction log with a
//! simulated confirmation delay.

use std::fs;
use std::io;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::hashtree::{ConsistencyProof, Digest};
use crate::identity::ActorId;
use crate::protocol::codec::{self, tags, DecodeError, Reader, Wire, Writer};
use crate::protocol::{AnchorTxnId, ExtensionRequest, LedgerId};

/// File magic of persisted anchor logs.
pub const ANCHOR_MAGIC: &[u8; 4] = b"HYBA";

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed anchor log file: {0}")]
    MalformedFile(#[from] DecodeError),
}

/// One anchored history step: `(prev) -> (new)` with its consistency proof.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExtendStep {
    pub ledger_id: LedgerId,
    pub prev_digest: Digest,
    pub prev_size: u64,
    pub new_digest: Digest,
    pub new_size: u64,
    pub proof: ConsistencyProof,
}

impl ExtendStep {
    pub fn from_request(req: &ExtensionRequest) -> Self {
        ExtendStep {
            ledger_id: req.ledger_id,
            prev_digest: req.prev_digest,
            prev_size: req.prev_size,
            new_digest: req.new_digest,
            new_size: req.new_size,
            proof: req.proof.clone(),
        }
    }

    fn write(&self, w: &mut Writer) {
        w.raw(self.ledger_id.as_bytes());
        w.digest(&self.prev_digest);
        w.u64(self.prev_size);
        w.digest(&self.new_digest);
        w.u64(self.new_size);
        w.consistency_proof(&self.proof);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        Ok(ExtendStep {
            ledger_id: read_ledger_id(r)?,
            prev_digest: r.digest()?,
            prev_size: r.u64()?,
            new_digest: r.digest()?,
            new_size: r.u64()?,
            proof: r.consistency_proof()?,
        })
    }
}

fn read_ledger_id(r: &mut Reader<'_>) -> Result<LedgerId, DecodeError> {
    Ok(LedgerId::from_bytes(
        r.take(LedgerId::LEN)?.try_into().expect("16 bytes"),
    ))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnchorPayload {
    Init {
        ledger_id: LedgerId,
        digest: Digest,
        size: u64,
    },
    Extend(ExtendStep),
    Batch {
        ledger_id: LedgerId,
        steps: Vec<ExtendStep>,
    },
}

impl AnchorPayload {
    pub fn ledger_id(&self) -> LedgerId {
        match self {
            AnchorPayload::Init { ledger_id, .. } | AnchorPayload::Batch { ledger_id, .. } => *ledger_id,
            AnchorPayload::Extend(step) => step.ledger_id,
        }
    }

    /// Extension steps carried by this payload, in order.
    pub fn steps(&self) -> &[ExtendStep] {
        match self {
            AnchorPayload::Init { .. } => &[],
            AnchorPayload::Extend(step) => std::slice::from_ref(step),
            AnchorPayload::Batch { steps, .. } => steps,
        }
    }
}

/// A submitted transaction. Semantic validity is the auditor's business, so
/// decoding accepts any field values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct AnchorTxn {
    pub txn_id: AnchorTxnId,
    pub address: ActorId,
    pub submitted_at_ms: u64,
    pub payload: AnchorPayload,
}

impl Wire for AnchorTxn {
    const TAG: u8 = tags::ANCHOR_TXN;

    fn write_body(&self, w: &mut Writer) {
        w.u64(self.txn_id.0);
        w.digest(self.address.digest());
        w.u64(self.submitted_at_ms);
        match &self.payload {
            AnchorPayload::Init {
                ledger_id,
                digest,
                size,
            } => {
                w.u8(0);
                w.raw(ledger_id.as_bytes());
                w.digest(digest);
                w.u64(*size);
            }
            AnchorPayload::Extend(step) => {
                w.u8(1);
                step.write(w);
            }
            AnchorPayload::Batch { ledger_id, steps } => {
                w.u8(2);
                w.raw(ledger_id.as_bytes());
                w.count(steps.len());
                for s in steps {
                    s.write(w);
                }
            }
        }
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let txn_id = AnchorTxnId(r.u64()?);
        let address = ActorId::from_digest(r.digest()?);
        let submitted_at_ms = r.u64()?;
        let payload = match r.u8()? {
            0 => AnchorPayload::Init {
                ledger_id: read_ledger_id(r)?,
                digest: r.digest()?,
                size: r.u64()?,
            },
            1 => AnchorPayload::Extend(ExtendStep::read(r)?),
            2 => {
                let ledger_id = read_ledger_id(r)?;
                let n = r.count(16 + 32 + 8 + 32 + 8 + 20)?;
                let steps = (0..n).map(|_| ExtendStep::read(r)).collect::<Result<_, _>>()?;
                AnchorPayload::Batch { ledger_id, steps }
            }
            _ => return Err(DecodeError::Invalid("anchor payload kind")),
        };
        Ok(AnchorTxn {
            txn_id,
            address,
            submitted_at_ms,
            payload,
        })
    }
}

/// Append-only log. A transaction becomes readable once the simulated
/// clock reaches `submitted_at_ms + confirmation_latency_ms`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AnchorLog {
    txns: Vec<AnchorTxn>,
    confirmation_latency_ms: u64,
    now_ms: u64,
}

pub type SharedAnchorLog = Arc<Mutex<AnchorLog>>;

impl AnchorLog {
    pub fn new(confirmation_latency_ms: u64) -> Self {
        AnchorLog {
            txns: Vec::new(),
            confirmation_latency_ms,
            now_ms: 0,
        }
    }

    pub fn shared(self) -> SharedAnchorLog {
        Arc::new(Mutex::new(self))
    }

    pub fn confirmation_latency_ms(&self) -> u64 {
        self.confirmation_latency_ms
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    /// Moves the simulated clock forward; earlier times are ignored.
    pub fn advance_to(&mut self, now_ms: u64) {
        self.now_ms = self.now_ms.max(now_ms);
    }

    pub fn submit(&mut self, address: ActorId, payload: AnchorPayload) -> AnchorTxnId {
        let txn_id = AnchorTxnId(self.txns.len() as u64);
        self.txns.push(AnchorTxn {
            txn_id,
            address,
            submitted_at_ms: self.now_ms,
            payload,
        });
        txn_id
    }

    /// Id the next submission will receive.
    pub fn next_id(&self) -> AnchorTxnId {
        AnchorTxnId(self.txns.len() as u64)
    }

    pub fn len(&self) -> usize {
        self.txns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.txns.is_empty()
    }

    fn is_confirmed(&self, txn: &AnchorTxn) -> bool {
        txn.submitted_at_ms.saturating_add(self.confirmation_latency_ms) <= self.now_ms
    }

    /// Confirmed transactions of every writer, in submission order.
    pub fn confirmed(&self) -> impl Iterator<Item = &AnchorTxn> {
        self.txns.iter().filter(|t| self.is_confirmed(t))
    }

    /// Every submitted transaction, confirmed or not.
    pub fn submitted(&self) -> &[AnchorTxn] {
        &self.txns
    }

    /// Confirmed transactions written by `address`, in submission order.
    pub fn read_all(&self, address: &ActorId) -> Vec<&AnchorTxn> {
        self.confirmed().filter(|t| t.address == *address).collect()
    }

    pub fn get_confirmed(&self, id: AnchorTxnId) -> Option<&AnchorTxn> {
        self.txns.get(id.0 as usize).filter(|t| self.is_confirmed(t))
    }

    /// Whether `id` was submitted, confirmed or not.
    pub fn is_submitted(&self, id: AnchorTxnId) -> bool {
        (id.0 as usize) < self.txns.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        codec::to_file_bytes(ANCHOR_MAGIC, self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, AnchorError> {
        Ok(codec::from_file_bytes(ANCHOR_MAGIC, bytes)?)
    }

    pub fn persist(&self, path: &Path) -> Result<(), AnchorError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AnchorError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Hex JSON-lines dump, one transaction per line, confirmed or not.
    pub fn json_lines(&self) -> String {
        self.txns
            .iter()
            .map(|t| crate::protocol::json_line("AnchorTxn", t) + "\n")
            .collect()
    }
}

impl Wire for AnchorLog {
    const TAG: u8 = tags::ANCHOR_LOG;

    fn write_body(&self, w: &mut Writer) {
        w.u64(self.confirmation_latency_ms);
        w.u64(self.now_ms);
        w.count(self.txns.len());
        for t in &self.txns {
            w.nested(t);
        }
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let confirmation_latency_ms = r.u64()?;
        let now_ms = r.u64()?;
        let n = r.count(4)?;
        let mut txns = Vec::with_capacity(n);
        for i in 0..n {
            let t: AnchorTxn = r.nested()?;
            if t.txn_id.0 != i as u64 {
                return Err(DecodeError::Invalid("transaction ids not sequential"));
            }
            txns.push(t);
        }
        Ok(AnchorLog {
            txns,
            confirmation_latency_ms,
            now_ms,
        })
    }
}
