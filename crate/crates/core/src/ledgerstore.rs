//! Node-local ledger replicas: ordered blocks, the receipt chain that
//! notarizes them, erasure by explicit omission, and export archives.

use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::hashtree::{
    self, leaf_hash, prove_consistency, root_from_leaf_digests, ConsistencyProof, Digest, InclusionProof,
};
use crate::identity::PublicKey;
use crate::protocol::codec::{self, tags, DecodeError, Reader, Wire, Writer};
use crate::protocol::{verify_receipt, AuthorSet, LedgerId, Receipt, ReceiptKind, ReceiptRejection};

/// File magic of export archives.
pub const ARCHIVE_MAGIC: &[u8; 4] = b"HYBX";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("nothing to append")]
    EmptyAppend,
    #[error("receipt does not match replica: {0}")]
    ReceiptMismatch(&'static str),
    #[error("receipt rejected: {0}")]
    BadReceipt(ReceiptRejection),
    #[error("index {index} out of range for ledger of size {size}")]
    IndexOutOfRange { index: u64, size: u64 },
    #[error("block {0} is already omitted")]
    AlreadyOmitted(u64),
    #[error("export does not cover the whole ledger")]
    PartialExport,
}

/// A data block, or its leaf digest alone once the content has been erased.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BlockEntry {
    Present(Vec<u8>),
    Omitted(Digest),
}

impl BlockEntry {
    pub fn leaf_digest(&self) -> Digest {
        match self {
            BlockEntry::Present(content) => leaf_hash(content),
            BlockEntry::Omitted(d) => *d,
        }
    }

    pub fn content(&self) -> Option<&[u8]> {
        match self {
            BlockEntry::Present(c) => Some(c),
            BlockEntry::Omitted(_) => None,
        }
    }

    pub fn is_present(&self) -> bool {
        matches!(self, BlockEntry::Present(_))
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        match self {
            BlockEntry::Present(c) => {
                w.u8(1);
                w.bytes(c);
            }
            BlockEntry::Omitted(d) => {
                w.u8(0);
                w.digest(d);
            }
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        match r.u8()? {
            1 => Ok(BlockEntry::Present(r.bytes()?.to_vec())),
            0 => Ok(BlockEntry::Omitted(r.digest()?)),
            _ => Err(DecodeError::Invalid("block entry status")),
        }
    }
}

impl Serialize for BlockEntry {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mut s = serializer.serialize_struct("BlockEntry", 2)?;
        match self {
            BlockEntry::Present(c) => {
                s.serialize_field("status", "present")?;
                s.serialize_field("content", &hex::encode(c))?;
            }
            BlockEntry::Omitted(d) => {
                s.serialize_field("status", "omitted")?;
                s.serialize_field("leaf_digest", d)?;
            }
        }
        s.end()
    }
}

/// The digest, size and proof a staged append would produce.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagedExtension {
    pub new_digest: Digest,
    pub new_size: u64,
    pub proof: ConsistencyProof,
}

#[derive(Clone, Debug)]
pub struct LedgerReplica {
    ledger_id: LedgerId,
    authors: AuthorSet,
    entries: Vec<BlockEntry>,
    leaves: Vec<Digest>,
    receipts: Vec<Receipt>,
    official_digest: Digest,
    official_size: u64,
}

impl LedgerReplica {
    /// Starts a replica from a verified creation receipt and its blocks.
    pub fn from_creation(
        receipt: Receipt,
        blocks: Vec<BlockEntry>,
        notary_key: &PublicKey,
    ) -> Result<Self, StoreError> {
        let Some(req) = receipt.creation() else {
            return Err(StoreError::ReceiptMismatch("not a creation receipt"));
        };
        verify_receipt(&receipt, notary_key, &req.authors).map_err(StoreError::BadReceipt)?;
        if receipt.notary_seq != 0 {
            return Err(StoreError::ReceiptMismatch("creation receipt sequence must be 0"));
        }
        if blocks.len() as u64 != req.initial_size {
            return Err(StoreError::ReceiptMismatch("block count differs from initial size"));
        }
        let leaves: Vec<Digest> = blocks.iter().map(BlockEntry::leaf_digest).collect();
        if root_from_leaf_digests(&leaves) != req.initial_digest {
            return Err(StoreError::ReceiptMismatch("blocks do not hash to initial digest"));
        }
        Ok(LedgerReplica {
            ledger_id: req.ledger_id,
            authors: req.authors.clone(),
            official_digest: req.initial_digest,
            official_size: req.initial_size,
            entries: blocks,
            leaves,
            receipts: vec![receipt],
        })
    }

    pub fn ledger_id(&self) -> LedgerId {
        self.ledger_id
    }

    pub fn authors(&self) -> &AuthorSet {
        &self.authors
    }

    pub fn entries(&self) -> &[BlockEntry] {
        &self.entries
    }

    pub fn leaf_digests(&self) -> &[Digest] {
        &self.leaves
    }

    pub fn receipts(&self) -> &[Receipt] {
        &self.receipts
    }

    pub fn official_digest(&self) -> Digest {
        self.official_digest
    }

    pub fn official_size(&self) -> u64 {
        self.official_size
    }

    pub fn last_seq(&self) -> u64 {
        self.receipts.last().map_or(0, |r| r.notary_seq)
    }

    /// Digest, size and consistency proof for the ledger extended by
    /// `blocks`. Official state is not touched; see [`LedgerReplica::commit`].
    pub fn stage_blocks(&self, blocks: &[Vec<u8>]) -> Result<StagedExtension, StoreError> {
        if blocks.is_empty() {
            return Err(StoreError::EmptyAppend);
        }
        let mut leaves = self.leaves.clone();
        leaves.extend(blocks.iter().map(|b| leaf_hash(b)));
        let proof = prove_consistency(&leaves, self.official_size).expect("old size within range");
        Ok(StagedExtension {
            new_digest: root_from_leaf_digests(&leaves),
            new_size: leaves.len() as u64,
            proof,
        })
    }

    /// Appends `blocks` under a verified extension receipt that continues
    /// the current official state.
    pub fn commit(
        &mut self,
        receipt: Receipt,
        blocks: Vec<BlockEntry>,
        notary_key: &PublicKey,
    ) -> Result<(), StoreError> {
        let Some(ext) = receipt.extension() else {
            return Err(StoreError::ReceiptMismatch("not an extension receipt"));
        };
        verify_receipt(&receipt, notary_key, &self.authors).map_err(StoreError::BadReceipt)?;
        if ext.ledger_id != self.ledger_id {
            return Err(StoreError::ReceiptMismatch("receipt for another ledger"));
        }
        if (ext.prev_digest, ext.prev_size) != (self.official_digest, self.official_size) {
            return Err(StoreError::ReceiptMismatch(
                "receipt does not extend the official state",
            ));
        }
        if receipt.notary_seq != self.last_seq() + 1 {
            return Err(StoreError::ReceiptMismatch("receipt sequence gap"));
        }
        if blocks.len() as u64 != ext.new_size - ext.prev_size {
            return Err(StoreError::ReceiptMismatch("block count differs from receipt"));
        }
        let mut leaves = self.leaves.clone();
        leaves.extend(blocks.iter().map(BlockEntry::leaf_digest));
        if root_from_leaf_digests(&leaves) != ext.new_digest {
            return Err(StoreError::ReceiptMismatch("blocks do not hash to new digest"));
        }
        self.official_digest = ext.new_digest;
        self.official_size = ext.new_size;
        self.leaves = leaves;
        self.entries.extend(blocks);
        self.receipts.push(receipt);
        Ok(())
    }

    /// Replaces a block's content by its leaf digest. The digest of the
    /// ledger is unchanged.
    pub fn erase_block(&mut self, index: u64) -> Result<(), StoreError> {
        let size = self.official_size;
        let entry = self
            .entries
            .get_mut(index as usize)
            .ok_or(StoreError::IndexOutOfRange { index, size })?;
        match entry {
            BlockEntry::Omitted(_) => Err(StoreError::AlreadyOmitted(index)),
            BlockEntry::Present(_) => {
                *entry = BlockEntry::Omitted(self.leaves[index as usize]);
                Ok(())
            }
        }
    }

    /// Inclusion proof for `index` in the ledger prefix of `tree_size` leaves.
    pub fn prove_inclusion_at(&self, index: u64, tree_size: u64) -> Result<InclusionProof, StoreError> {
        if tree_size > self.official_size {
            return Err(StoreError::IndexOutOfRange {
                index: tree_size,
                size: self.official_size,
            });
        }
        hashtree::prove_inclusion(&self.leaves[..tree_size as usize], index)
            .map_err(|_| StoreError::IndexOutOfRange { index, size: tree_size })
    }

    pub fn make_export(&self, indices: &[u64]) -> Result<ExportArchive, StoreError> {
        let mut indices = indices.to_vec();
        indices.sort_unstable();
        indices.dedup();
        let items = indices
            .into_iter()
            .map(|index| {
                let proof = self.prove_inclusion_at(index, self.official_size)?;
                Ok(ExportItem {
                    index,
                    leaf_digest: self.leaves[index as usize],
                    entry: self.entries[index as usize].clone(),
                    proof,
                })
            })
            .collect::<Result<Vec<_>, StoreError>>()?;
        Ok(ExportArchive {
            ledger_id: self.ledger_id,
            authors: self.authors.clone(),
            receipts: self.receipts.clone(),
            items,
            claimed_digest: self.official_digest,
            claimed_size: self.official_size,
        })
    }

    pub fn full_export(&self) -> ExportArchive {
        let all: Vec<u64> = (0..self.official_size).collect();
        self.make_export(&all).expect("all indices in range")
    }

    /// Rebuilds a replica from an export that covers every block.
    pub fn from_export(archive: &ExportArchive, notary_key: &PublicKey) -> Result<Self, StoreError> {
        if archive.items.len() as u64 != archive.claimed_size
            || archive.items.iter().enumerate().any(|(i, it)| it.index != i as u64)
        {
            return Err(StoreError::PartialExport);
        }
        let mut receipts = archive.receipts.iter();
        let creation = receipts
            .next()
            .ok_or(StoreError::ReceiptMismatch("archive has no receipts"))?;
        let (_, initial) = creation.new_state();
        let entries = |from: u64, to: u64| -> Result<Vec<BlockEntry>, StoreError> {
            archive
                .items
                .get(from as usize..to as usize)
                .map(|s| s.iter().map(|it| it.entry.clone()).collect())
                .ok_or(StoreError::ReceiptMismatch("receipt beyond archived blocks"))
        };
        let mut replica = LedgerReplica::from_creation(creation.clone(), entries(0, initial)?, notary_key)?;
        for r in receipts {
            let (_, from) = r.prev();
            let (_, to) = r.new_state();
            replica.commit(r.clone(), entries(from, to)?, notary_key)?;
        }
        if (replica.official_digest, replica.official_size) != (archive.claimed_digest, archive.claimed_size) {
            return Err(StoreError::ReceiptMismatch("archive claim differs from receipts"));
        }
        Ok(replica)
    }

    /// Checks every replica invariant; used by tests and the simulator.
    pub fn check_invariants(&self) -> Result<(), String> {
        if self.entries.len() as u64 != self.official_size || self.leaves.len() != self.entries.len() {
            return Err("entry count differs from official size".into());
        }
        if self
            .entries
            .iter()
            .zip(&self.leaves)
            .any(|(e, l)| e.leaf_digest() != *l)
        {
            return Err("cached leaf digest differs from entry".into());
        }
        if root_from_leaf_digests(&self.leaves) != self.official_digest {
            return Err("root over entries differs from official digest".into());
        }
        let first = self.receipts.first().ok_or("no receipts")?;
        if first.kind() != ReceiptKind::Creation {
            return Err("first receipt is not a creation receipt".into());
        }
        for (i, pair) in self.receipts.windows(2).enumerate() {
            if pair[1].notary_seq != pair[0].notary_seq + 1 {
                return Err(format!("sequence gap after receipt {i}"));
            }
            if pair[1].prev() != pair[0].new_state() {
                return Err(format!("receipt {} does not chain", i + 1));
            }
        }
        if self.receipts.iter().enumerate().any(|(i, r)| r.notary_seq != i as u64) {
            return Err("receipt sequence does not start at 0".into());
        }
        let last = self.receipts.last().expect("nonempty");
        if last.new_state() != (self.official_digest, self.official_size) {
            return Err("official state differs from last receipt".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExportItem {
    pub index: u64,
    /// Leaf digest the inclusion proof is about.
    pub leaf_digest: Digest,
    pub entry: BlockEntry,
    pub proof: InclusionProof,
}

/// Selected blocks, their inclusion proofs and the full receipt chain up to
/// the claimed state.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ExportArchive {
    pub ledger_id: LedgerId,
    pub authors: AuthorSet,
    pub receipts: Vec<Receipt>,
    pub items: Vec<ExportItem>,
    pub claimed_digest: Digest,
    pub claimed_size: u64,
}

impl ExportArchive {
    pub fn to_file_bytes(&self) -> Vec<u8> {
        codec::to_file_bytes(ARCHIVE_MAGIC, self)
    }

    pub fn from_file_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        codec::from_file_bytes(ARCHIVE_MAGIC, bytes)
    }

    /// Hex JSON-lines dump: one header line, then one line per receipt and
    /// per item.
    pub fn json_lines(&self) -> String {
        let header = serde_json::json!({
            "type": "ExportArchive",
            "ledger_id": self.ledger_id,
            "author_set": self.authors,
            "claimed_digest": self.claimed_digest,
            "claimed_size": self.claimed_size,
        });
        let mut out = format!("{header}\n");
        for r in &self.receipts {
            out.push_str(&crate::protocol::json_line("Receipt", r));
            out.push('\n');
        }
        for it in &self.items {
            out.push_str(&crate::protocol::json_line("ExportItem", it));
            out.push('\n');
        }
        out
    }
}

impl Wire for ExportArchive {
    const TAG: u8 = tags::EXPORT_ARCHIVE;

    fn write_body(&self, w: &mut Writer) {
        w.raw(self.ledger_id.as_bytes());
        w.count(self.authors.len());
        for k in self.authors.keys() {
            w.public_key(k);
        }
        w.count(self.receipts.len());
        for r in &self.receipts {
            w.nested(r);
        }
        w.count(self.items.len());
        for it in &self.items {
            w.u64(it.index);
            w.digest(&it.leaf_digest);
            it.entry.write(w);
            w.inclusion_proof(&it.proof);
        }
        w.digest(&self.claimed_digest);
        w.u64(self.claimed_size);
    }

    fn read_body(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        let ledger_id = LedgerId::from_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let nk = r.count(PublicKey::LEN)?;
        let keys = (0..nk).map(|_| r.public_key()).collect::<Result<Vec<_>, _>>()?;
        let authors = AuthorSet::from_raw(keys);
        if !authors.is_canonical() {
            return Err(DecodeError::Invalid("author set not canonical"));
        }
        let nr = r.count(4)?;
        let receipts = (0..nr).map(|_| r.nested()).collect::<Result<Vec<_>, _>>()?;
        let ni = r.count(8 + 32 + 1)?;
        let items = (0..ni)
            .map(|_| {
                Ok(ExportItem {
                    index: r.u64()?,
                    leaf_digest: r.digest()?,
                    entry: BlockEntry::read(r)?,
                    proof: r.inclusion_proof()?,
                })
            })
            .collect::<Result<Vec<_>, DecodeError>>()?;
        Ok(ExportArchive {
            ledger_id,
            authors,
            receipts,
            items,
            claimed_digest: r.digest()?,
            claimed_size: r.u64()?,
        })
    }
}
