//! RFC 6962 Merkle tree hashing over ordered data blocks.
//!
//! A ledger digest is the Merkle Tree Hash of the leaf digests of its blocks.
//! Leaves are hashed as `SHA-256(0x00 || data)` and interior nodes as
//! `SHA-256(0x01 || left || right)`; the tree over `n > 1` leaves splits at
//! the largest power of two strictly less than `n`. The empty tree hashes to
//! `SHA-256("")`.
//!
//! Every function here works on leaf digests rather than block contents, so a
//! replica that has erased a block (keeping only its leaf digest) can still
//! compute roots and proofs.

use std::fmt;

use serde::{Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Domain separation prefix for leaf hashes.
pub const LEAF_PREFIX: u8 = 0x00;
/// Domain separation prefix for interior node hashes.
pub const NODE_PREFIX: u8 = 0x01;

/// A 32-byte SHA-256 value: a leaf digest, a subtree hash or a ledger digest.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Digest([u8; 32]);

impl Digest {
    pub const LEN: usize = 32;

    pub const fn from_bytes(bytes: [u8; 32]) -> Self {
        Digest(bytes)
    }

    /// Returns `None` unless `bytes` is exactly 32 bytes long.
    pub fn from_slice(bytes: &[u8]) -> Option<Self> {
        <[u8; 32]>::try_from(bytes).ok().map(Digest)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, HashTreeError> {
        let bytes = hex::decode(s.trim()).map_err(|_| HashTreeError::BadHex)?;
        Self::from_slice(&bytes).ok_or(HashTreeError::BadHex)
    }

    /// Plain SHA-256 of `data`, without domain separation.
    pub fn sha256(data: &[u8]) -> Self {
        Digest(Sha256::digest(data).into())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", &self.to_hex()[..16])
    }
}

impl Serialize for Digest {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_hex())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum HashTreeError {
    #[error("leaf index {index} out of range for tree of size {size}")]
    IndexOutOfRange { index: u64, size: u64 },
    #[error("old size {old} out of range for tree of size {new}")]
    SizeOutOfRange { old: u64, new: u64 },
    #[error("invalid hex digest")]
    BadHex,
}

/// Audit path for one leaf, ordered from the leaf's sibling up to the root.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InclusionProof {
    pub leaf_index: u64,
    pub tree_size: u64,
    pub path: Vec<Digest>,
}

/// Proof that the tree of `old_size` leaves is a prefix of the tree of
/// `new_size` leaves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConsistencyProof {
    pub old_size: u64,
    pub new_size: u64,
    pub path: Vec<Digest>,
}

impl ConsistencyProof {
    /// The proof for an unchanged tree or for growth from the empty tree.
    pub fn trivial(old_size: u64, new_size: u64) -> Self {
        ConsistencyProof {
            old_size,
            new_size,
            path: Vec::new(),
        }
    }
}

pub fn leaf_hash(data: &[u8]) -> Digest {
    let mut h = Sha256::new();
    h.update([LEAF_PREFIX]);
    h.update(data);
    Digest(h.finalize().into())
}

pub fn node_hash(left: &Digest, right: &Digest) -> Digest {
    let mut h = Sha256::new();
    h.update([NODE_PREFIX]);
    h.update(left.0);
    h.update(right.0);
    Digest(h.finalize().into())
}

/// Digest of the zero-leaf tree.
pub fn empty_root() -> Digest {
    Digest::sha256(&[])
}

/// Merkle Tree Hash over block contents.
pub fn root<B: AsRef<[u8]>>(leaves: &[B]) -> Digest {
    let mut frontier = Frontier::new();
    for leaf in leaves {
        frontier.push(leaf_hash(leaf.as_ref()));
    }
    frontier.root()
}

/// Merkle Tree Hash over precomputed leaf digests.
pub fn root_from_leaf_digests(leaf_digests: &[Digest]) -> Digest {
    let mut frontier = Frontier::new();
    for leaf in leaf_digests {
        frontier.push(*leaf);
    }
    frontier.root()
}

/// Incremental tree builder holding the roots of the maximal perfect
/// subtrees ("peaks") of the leaves pushed so far.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Frontier {
    size: u64,
    peaks: Vec<Digest>,
}

impl Frontier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn size(&self) -> u64 {
        self.size
    }

    pub fn push(&mut self, leaf: Digest) {
        let mut node = leaf;
        let mut carry = self.size;
        while carry & 1 == 1 {
            let left = self.peaks.pop().expect("one peak per set bit");
            node = node_hash(&left, &node);
            carry >>= 1;
        }
        self.peaks.push(node);
        self.size += 1;
    }

    pub fn root(&self) -> Digest {
        match self.peaks.split_last() {
            None => empty_root(),
            Some((last, rest)) => rest.iter().rev().fold(*last, |acc, peak| node_hash(peak, &acc)),
        }
    }
}

/// Largest power of two strictly less than `n` (`n >= 2`).
fn split_point(n: usize) -> usize {
    debug_assert!(n >= 2);
    let mut k = 1;
    while k << 1 < n {
        k <<= 1;
    }
    k
}

pub fn prove_inclusion(leaf_digests: &[Digest], index: u64) -> Result<InclusionProof, HashTreeError> {
    let size = leaf_digests.len() as u64;
    if index >= size {
        return Err(HashTreeError::IndexOutOfRange { index, size });
    }
    let mut path = Vec::new();
    inclusion_path(index as usize, leaf_digests, &mut path);
    Ok(InclusionProof {
        leaf_index: index,
        tree_size: size,
        path,
    })
}

fn inclusion_path(m: usize, leaves: &[Digest], out: &mut Vec<Digest>) {
    let n = leaves.len();
    if n <= 1 {
        return;
    }
    let k = split_point(n);
    if m < k {
        inclusion_path(m, &leaves[..k], out);
        out.push(root_from_leaf_digests(&leaves[k..]));
    } else {
        inclusion_path(m - k, &leaves[k..], out);
        out.push(root_from_leaf_digests(&leaves[..k]));
    }
}

/// Checks an audit path. `tree_size` and `index` must agree with the proof.
pub fn verify_inclusion(
    root: &Digest,
    tree_size: u64,
    index: u64,
    leaf_digest: &Digest,
    proof: &InclusionProof,
) -> bool {
    if proof.tree_size != tree_size || proof.leaf_index != index || index >= tree_size {
        return false;
    }
    let mut fnode = index;
    let mut snode = tree_size - 1;
    let mut r = *leaf_digest;
    for p in &proof.path {
        if snode == 0 {
            return false;
        }
        if fnode & 1 == 1 || fnode == snode {
            r = node_hash(p, &r);
            if fnode & 1 == 0 {
                while fnode & 1 == 0 && fnode != 0 {
                    fnode >>= 1;
                    snode >>= 1;
                }
            }
        } else {
            r = node_hash(&r, p);
        }
        fnode >>= 1;
        snode >>= 1;
    }
    snode == 0 && r == *root
}

pub fn prove_consistency(leaf_digests: &[Digest], old_size: u64) -> Result<ConsistencyProof, HashTreeError> {
    let new_size = leaf_digests.len() as u64;
    if old_size > new_size {
        return Err(HashTreeError::SizeOutOfRange {
            old: old_size,
            new: new_size,
        });
    }
    let mut path = Vec::new();
    if old_size != 0 && old_size != new_size {
        subproof(old_size as usize, leaf_digests, true, &mut path);
    }
    Ok(ConsistencyProof {
        old_size,
        new_size,
        path,
    })
}

fn subproof(m: usize, leaves: &[Digest], whole_old_tree: bool, out: &mut Vec<Digest>) {
    let n = leaves.len();
    if m == n {
        if !whole_old_tree {
            out.push(root_from_leaf_digests(leaves));
        }
        return;
    }
    let k = split_point(n);
    if m <= k {
        subproof(m, &leaves[..k], whole_old_tree, out);
        out.push(root_from_leaf_digests(&leaves[k..]));
    } else {
        subproof(m - k, &leaves[k..], false, out);
        out.push(root_from_leaf_digests(&leaves[..k]));
    }
}

/// Checks that `new_root` over `new_size` leaves extends `old_root` over
/// `old_size` leaves. Growth from size 0 is accepted only with an empty path
/// and `old_root == empty_root()`.
pub fn verify_consistency(
    old_root: &Digest,
    old_size: u64,
    new_root: &Digest,
    new_size: u64,
    proof: &ConsistencyProof,
) -> bool {
    if proof.old_size != old_size || proof.new_size != new_size || old_size > new_size {
        return false;
    }
    if old_size == 0 {
        return proof.path.is_empty() && *old_root == empty_root();
    }
    if old_size == new_size {
        return proof.path.is_empty() && old_root == new_root;
    }
    if proof.path.is_empty() {
        return false;
    }

    let mut path = proof.path.iter();
    let first = if old_size.is_power_of_two() {
        *old_root
    } else {
        *path.next().expect("path is nonempty")
    };
    let mut fnode = old_size - 1;
    let mut snode = new_size - 1;
    while fnode & 1 == 1 {
        fnode >>= 1;
        snode >>= 1;
    }
    let mut fr = first;
    let mut sr = first;
    for c in path {
        if snode == 0 {
            return false;
        }
        if fnode & 1 == 1 || fnode == snode {
            fr = node_hash(c, &fr);
            sr = node_hash(c, &sr);
            if fnode & 1 == 0 {
                while fnode & 1 == 0 && fnode != 0 {
                    fnode >>= 1;
                    snode >>= 1;
                }
            }
        } else {
            sr = node_hash(&sr, c);
        }
        fnode >>= 1;
        snode >>= 1;
    }
    fr == *old_root && sr == *new_root && snode == 0
}

/// `ceil(log2(n))`, with `ceil_log2(0) == ceil_log2(1) == 0`.
pub fn ceil_log2(n: u64) -> u32 {
    if n <= 1 {
        0
    } else {
        64 - (n - 1).leading_zeros()
    }
}
