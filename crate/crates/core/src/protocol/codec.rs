//! Canonical binary encoding.
//!
//! Every top-level message is `tag:u8 || body`. Integers are fixed-width
//! big-endian. Byte strings and nested messages carry a `u32` big-endian
//! length prefix; lists of fixed-width items carry a `u32` item count.
//! Fields appear in declaration order. Decoding is strict: unknown tags,
//! short reads, non-canonical flags and trailing bytes are all rejected.

use thiserror::Error;

use crate::hashtree::{ConsistencyProof, Digest, InclusionProof};
use crate::identity::{PublicKey, Signature};

/// Every decoding failure is a malformed input.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("unexpected tag {found:#04x}, expected {expected:#04x}")]
    WrongTag { expected: u8, found: u8 },
    #[error("{0} trailing bytes")]
    TrailingBytes(usize),
    #[error("bad magic or version")]
    BadHeader,
    #[error("invalid field: {0}")]
    Invalid(&'static str),
}

/// Message tags of the wire format.
pub mod tags {
    pub const CREATION_REQUEST: u8 = 0x01;
    pub const EXTENSION_REQUEST: u8 = 0x02;
    pub const RECEIPT: u8 = 0x03;
    pub const ANCHOR_TXN: u8 = 0x10;
    pub const ANCHOR_LOG: u8 = 0x11;
    pub const EXPORT_ARCHIVE: u8 = 0x20;
    pub const MISBEHAVIOR_PROOF: u8 = 0x30;
    pub const POLICY: u8 = 0x40;
    pub const BLOCK_CERTIFICATE: u8 = 0x41;
    pub const ACCESS_REQUEST: u8 = 0x42;
    pub const NOTARY_SNAPSHOT: u8 = 0x43;
}

/// Version byte written after every file magic.
pub const FILE_VERSION: u8 = 0x01;

#[derive(Debug, Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn bool(&mut self, v: bool) {
        self.buf.push(v as u8);
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }

    pub fn raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn count(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("list longer than u32::MAX"));
    }

    pub fn bytes(&mut self, bytes: &[u8]) {
        self.count(bytes.len());
        self.raw(bytes);
    }

    pub fn digest(&mut self, d: &Digest) {
        self.raw(d.as_bytes());
    }

    pub fn digests(&mut self, ds: &[Digest]) {
        self.count(ds.len());
        for d in ds {
            self.digest(d);
        }
    }

    pub fn public_key(&mut self, k: &PublicKey) {
        self.raw(k.as_bytes());
    }

    pub fn signature(&mut self, s: &Signature) {
        self.raw(s.as_bytes());
    }

    pub fn consistency_proof(&mut self, p: &ConsistencyProof) {
        self.u64(p.old_size);
        self.u64(p.new_size);
        self.digests(&p.path);
    }

    pub fn inclusion_proof(&mut self, p: &InclusionProof) {
        self.u64(p.leaf_index);
        self.u64(p.tree_size);
        self.digests(&p.path);
    }

    /// Length-prefixed full encoding (tag included) of a nested message.
    pub fn nested<T: Wire>(&mut self, m: &T) {
        self.bytes(&encode(m));
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }
}

pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(DecodeError::Truncated);
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn bool(&mut self) -> Result<bool, DecodeError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(DecodeError::Invalid("boolean flag")),
        }
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    /// Reads a list count, refusing counts that cannot fit in the remaining
    /// input given a minimum per-item encoding size.
    pub fn count(&mut self, min_item_len: usize) -> Result<usize, DecodeError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item_len.max(1)) > self.remaining() {
            return Err(DecodeError::Truncated);
        }
        Ok(n)
    }

    pub fn bytes(&mut self) -> Result<&'a [u8], DecodeError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub fn digest(&mut self) -> Result<Digest, DecodeError> {
        Ok(Digest::from_bytes(self.array()?))
    }

    pub fn digests(&mut self) -> Result<Vec<Digest>, DecodeError> {
        let n = self.count(Digest::LEN)?;
        (0..n).map(|_| self.digest()).collect()
    }

    pub fn public_key(&mut self) -> Result<PublicKey, DecodeError> {
        PublicKey::from_bytes(self.take(PublicKey::LEN)?).map_err(|_| DecodeError::Invalid("public key"))
    }

    pub fn signature(&mut self) -> Result<Signature, DecodeError> {
        Ok(Signature::from_bytes(self.array()?))
    }

    pub fn consistency_proof(&mut self) -> Result<ConsistencyProof, DecodeError> {
        Ok(ConsistencyProof {
            old_size: self.u64()?,
            new_size: self.u64()?,
            path: self.digests()?,
        })
    }

    pub fn inclusion_proof(&mut self) -> Result<InclusionProof, DecodeError> {
        Ok(InclusionProof {
            leaf_index: self.u64()?,
            tree_size: self.u64()?,
            path: self.digests()?,
        })
    }

    pub fn nested<T: Wire>(&mut self) -> Result<T, DecodeError> {
        decode(self.bytes()?)
    }

    pub fn finish(self) -> Result<(), DecodeError> {
        match self.remaining() {
            0 => Ok(()),
            n => Err(DecodeError::TrailingBytes(n)),
        }
    }
}

/// A message with a canonical tagged encoding.
pub trait Wire: Sized {
    const TAG: u8;
    fn write_body(&self, w: &mut Writer);
    fn read_body(r: &mut Reader<'_>) -> Result<Self, DecodeError>;
}

pub fn encode<T: Wire>(message: &T) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(T::TAG);
    message.write_body(&mut w);
    w.into_bytes()
}

pub fn decode<T: Wire>(bytes: &[u8]) -> Result<T, DecodeError> {
    let mut r = Reader::new(bytes);
    let found = r.u8()?;
    if found != T::TAG {
        return Err(DecodeError::WrongTag {
            expected: T::TAG,
            found,
        });
    }
    let message = T::read_body(&mut r)?;
    r.finish()?;
    Ok(message)
}

/// `magic || FILE_VERSION || encode(message)`.
pub fn to_file_bytes<T: Wire>(magic: &[u8; 4], message: &T) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(magic);
    out.push(FILE_VERSION);
    out.extend_from_slice(&encode(message));
    out
}

pub fn from_file_bytes<T: Wire>(magic: &[u8; 4], bytes: &[u8]) -> Result<T, DecodeError> {
    if bytes.len() < 5 || &bytes[..4] != magic || bytes[4] != FILE_VERSION {
        return Err(DecodeError::BadHeader);
    }
    decode(&bytes[5..])
}
