//! Private, notarized ledgers with publicly auditable histories.
//!
//! Nodes keep ledger data to themselves and send the Notary only Merkle
//! digests and consistency proofs. The Notary keeps one official history per
//! ledger, anchors it to an append-only public log and signs receipts that
//! nodes gossip among themselves. Anyone holding the anchor log and the
//! Notary's public key can audit every ledger history, check exported blocks
//! against it, and verify proofs of Notary misbehavior.

pub mod anchor;
pub mod auditor;
pub mod bench;
pub mod hashtree;
pub mod identity;
pub mod ledgerstore;
pub mod node;
pub mod notary;
pub mod protocol;
pub mod simnet;
