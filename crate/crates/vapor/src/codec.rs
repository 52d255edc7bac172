//! Canonical byte encoding, hashing, signatures, and Merkle trees.
//!
//! Every hash and signature in the protocol is computed over the canonical
//! encoding defined here. The format is deliberately rigid so that encodings
//! are bit-exact across implementations:
//!
//! - integers are fixed-width big-endian (`u8`, `u32`, `u64`),
//! - variable-length byte strings carry a 4-byte big-endian length prefix,
//! - lists carry a 4-byte big-endian element count followed by the elements,
//! - enums carry a single tag byte followed by the variant payload.
//!
//! See `docs/wire-format.md` for the field-by-field layout of each protocol
//! type and the frozen test vectors.

use std::fmt;

use ed25519_dalek::{Signer, Verifier};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

/// Length in bytes of every digest, node id, and public key.
pub const DIGEST_LEN: usize = 32;
/// Length in bytes of a detached signature.
pub const SIGNATURE_LEN: usize = 64;

/// Domain prefix for Merkle leaf hashes.
pub const MERKLE_LEAF_PREFIX: u8 = 0x00;
/// Domain prefix for Merkle internal-node hashes.
pub const MERKLE_NODE_PREFIX: u8 = 0x01;

/// Domain tag under every block-commitment signature.
pub const ABSTRACT_SIGN_DOMAIN: &[u8] = b"vapor/abstract/v1";
/// Domain tag under every off-chain payment signature.
pub const PAYMENT_SIGN_DOMAIN: &[u8] = b"vapor/payment/v1";
/// Domain tag mixed into main-chain block digests.
pub const CHAIN_BLOCK_DOMAIN: &[u8] = b"vapor/chain-block/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("buffer too short: need {need} bytes, have {have}")]
    BufferTooShort { need: usize, have: usize },

    #[error("{remaining} trailing bytes after decoding")]
    TrailingBytes { remaining: usize },

    #[error("invalid tag {tag:#04x} for {type_name}")]
    InvalidTag { tag: u8, type_name: &'static str },

    #[error("declared length {declared} exceeds remaining input {remaining}")]
    LengthOverflow { declared: usize, remaining: usize },

    #[error("invalid public key bytes")]
    InvalidKey,

    #[error("invalid hex string")]
    InvalidHex,

    #[error("merkle root of an empty leaf set")]
    EmptyLeafSet,

    #[error("bad file magic: expected {expected:?}")]
    BadMagic { expected: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
}

// ---------------------------------------------------------------------------
// Digests
// ---------------------------------------------------------------------------

/// A 32-byte SHA-256 output. Equality is byte equality.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; DIGEST_LEN]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; DIGEST_LEN]);

    pub fn as_bytes(&self) -> &[u8; DIGEST_LEN] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    /// First four bytes as hex, for logs and displays.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..4])
    }

    pub fn from_hex(s: &str) -> Result<Digest, CodecError> {
        let bytes = hex::decode(s).map_err(|_| CodecError::InvalidHex)?;
        let arr: [u8; DIGEST_LEN] = bytes.try_into().map_err(|_| CodecError::InvalidHex)?;
        Ok(Digest(arr))
    }

    /// Whether the digest is "even": its least-significant bit is zero.
    pub fn is_even(&self) -> bool {
        self.0[DIGEST_LEN - 1] & 1 == 0
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({})", self.short())
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

pub fn sha256(data: &[u8]) -> Digest {
    let mut hasher = Sha256::new();
    hasher.update(data);
    Digest(hasher.finalize().into())
}

// ---------------------------------------------------------------------------
// Keys and signatures
// ---------------------------------------------------------------------------

/// Node identifier: the hash of the node's public key.
///
/// Ids are derivable from keys, so showing a key alongside an id lets anyone
/// match the two.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub Digest);

impl NodeId {
    pub fn to_hex(&self) -> String {
        self.0.to_hex()
    }

    pub fn short(&self) -> String {
        self.0.short()
    }

    pub fn from_hex(s: &str) -> Result<NodeId, CodecError> {
        Ok(NodeId(Digest::from_hex(s)?))
    }
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", self.short())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.short())
    }
}

/// Ed25519 verification key.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PublicKey(ed25519_dalek::VerifyingKey);

impl PublicKey {
    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8; 32]) -> Result<PublicKey, CodecError> {
        ed25519_dalek::VerifyingKey::from_bytes(bytes)
            .map(PublicKey)
            .map_err(|_| CodecError::InvalidKey)
    }

    /// H(pk): the key hash carried in block commitments.
    pub fn key_hash(&self) -> Digest {
        sha256(&self.to_bytes())
    }

    /// The node id this key belongs to (identical to the key hash).
    pub fn node_id(&self) -> NodeId {
        NodeId(self.key_hash())
    }

    pub fn verify(&self, message: &[u8], signature: &Signature) -> bool {
        match ed25519_dalek::Signature::try_from(&signature.0[..]) {
            Ok(sig) => self.0.verify(message, &sig).is_ok(),
            Err(_) => false,
        }
    }
}

impl PartialOrd for PublicKey {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PublicKey {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.to_bytes().cmp(&other.to_bytes())
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.node_id().short())
    }
}

/// Detached Ed25519 signature bytes.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(&self.0[..4]))
    }
}

/// Signing and verification pair for one node.
pub struct KeyPair {
    signing: ed25519_dalek::SigningKey,
}

impl KeyPair {
    /// Derives a key pair from a 32-byte seed. Deterministic.
    pub fn from_seed(seed: &[u8; 32]) -> KeyPair {
        KeyPair {
            signing: ed25519_dalek::SigningKey::from_bytes(seed),
        }
    }

    pub fn public(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key())
    }

    pub fn node_id(&self) -> NodeId {
        self.public().node_id()
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        Signature(self.signing.sign(message).to_bytes())
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyPair({})", self.node_id().short())
    }
}

/// Builds the exact byte string signed in a block commitment:
/// domain tag, node id, key hash, Merkle root of the committed block.
pub fn abstract_message(node: &NodeId, key_hash: &Digest, tx_root: &Digest) -> Vec<u8> {
    let mut msg = Vec::with_capacity(ABSTRACT_SIGN_DOMAIN.len() + 3 * DIGEST_LEN);
    msg.extend_from_slice(ABSTRACT_SIGN_DOMAIN);
    msg.extend_from_slice(node.0.as_bytes());
    msg.extend_from_slice(key_hash.as_bytes());
    msg.extend_from_slice(tx_root.as_bytes());
    msg
}

// ---------------------------------------------------------------------------
// Merkle trees
// ---------------------------------------------------------------------------

/// Computes the Merkle root of an ordered, non-empty leaf list.
///
/// Leaf hash is `H(0x00 || leaf)`, internal hash is `H(0x01 || left || right)`.
/// An odd node at any level is promoted unchanged to the next level; leaves
/// are never duplicated.
pub fn merkle_root(leaves: &[Vec<u8>]) -> Result<Digest, CodecError> {
    if leaves.is_empty() {
        return Err(CodecError::EmptyLeafSet);
    }
    let mut level: Vec<Digest> = leaves.iter().map(|leaf| merkle_leaf_hash(leaf)).collect();
    while level.len() > 1 {
        let mut next = Vec::with_capacity(level.len() / 2 + 1);
        let mut pairs = level.chunks_exact(2);
        for pair in &mut pairs {
            next.push(merkle_node_hash(&pair[0], &pair[1]));
        }
        if let [odd] = pairs.remainder() {
            next.push(*odd);
        }
        level = next;
    }
    Ok(level[0])
}

pub fn merkle_leaf_hash(leaf: &[u8]) -> Digest {
    let mut hasher = Sha256::new();
    hasher.update([MERKLE_LEAF_PREFIX]);
    hasher.update(leaf);
    Digest(hasher.finalize().into())
}

pub fn merkle_node_hash(left: &Digest, right: &Digest) -> Digest {
    let mut hasher = Sha256::new();
    hasher.update([MERKLE_NODE_PREFIX]);
    hasher.update(left.0);
    hasher.update(right.0);
    Digest(hasher.finalize().into())
}

// ---------------------------------------------------------------------------
// Canonical encoding
// ---------------------------------------------------------------------------

/// Append-only buffer for canonical encodings.
#[derive(Default)]
pub struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    pub fn new() -> Writer {
        Writer::default()
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
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

    /// Length-prefixed byte string (4-byte big-endian length).
    pub fn var_bytes(&mut self, bytes: &[u8]) {
        self.u32(bytes.len() as u32);
        self.raw(bytes);
    }

    /// Count-prefixed list (4-byte big-endian count).
    pub fn list<T: Canon>(&mut self, items: &[T]) {
        self.u32(items.len() as u32);
        for item in items {
            item.write(self);
        }
    }
}

/// Cursor over a canonical encoding.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.remaining() < n {
            return Err(CodecError::BufferTooShort {
                need: self.pos + n,
                have: self.buf.len(),
            });
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, CodecError> {
        let bytes: [u8; 4] = self.take(4)?.try_into().unwrap();
        Ok(u32::from_be_bytes(bytes))
    }

    pub fn u64(&mut self) -> Result<u64, CodecError> {
        let bytes: [u8; 8] = self.take(8)?.try_into().unwrap();
        Ok(u64::from_be_bytes(bytes))
    }

    pub fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    pub fn var_bytes(&mut self) -> Result<&'a [u8], CodecError> {
        let len = self.u32()? as usize;
        if len > self.remaining() {
            return Err(CodecError::LengthOverflow {
                declared: len,
                remaining: self.remaining(),
            });
        }
        self.take(len)
    }

    pub fn list<T: Canon>(&mut self) -> Result<Vec<T>, CodecError> {
        let count = self.u32()? as usize;
        // Each element occupies at least one byte; reject absurd counts early.
        if count > self.remaining() {
            return Err(CodecError::LengthOverflow {
                declared: count,
                remaining: self.remaining(),
            });
        }
        let mut items = Vec::with_capacity(count);
        for _ in 0..count {
            items.push(T::read(self)?);
        }
        Ok(items)
    }

    pub fn expect_end(&self) -> Result<(), CodecError> {
        if self.remaining() != 0 {
            return Err(CodecError::TrailingBytes {
                remaining: self.remaining(),
            });
        }
        Ok(())
    }
}

/// Types with a canonical, injective byte encoding.
///
/// `read(write(x)) == x` for every well-formed value, and distinct values of
/// one type never share an encoding.
pub trait Canon: Sized {
    fn write(&self, w: &mut Writer);
    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError>;

    fn canon_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write(&mut w);
        w.into_bytes()
    }

    fn from_canon_bytes(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut r = Reader::new(bytes);
        let value = Self::read(&mut r)?;
        r.expect_end()?;
        Ok(value)
    }

    fn canon_digest(&self) -> Digest {
        sha256(&self.canon_bytes())
    }
}

impl Canon for Digest {
    fn write(&self, w: &mut Writer) {
        w.raw(&self.0);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Digest(r.array()?))
    }
}

impl Canon for NodeId {
    fn write(&self, w: &mut Writer) {
        self.0.write(w);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(NodeId(Digest::read(r)?))
    }
}

impl Canon for PublicKey {
    fn write(&self, w: &mut Writer) {
        w.raw(&self.to_bytes());
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        PublicKey::from_bytes(&r.array()?)
    }
}

impl Canon for Signature {
    fn write(&self, w: &mut Writer) {
        w.raw(&self.0);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Signature(r.array()?))
    }
}

impl Canon for u64 {
    fn write(&self, w: &mut Writer) {
        w.u64(*self);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        r.u64()
    }
}

impl Canon for u32 {
    fn write(&self, w: &mut Writer) {
        w.u32(*self);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        r.u32()
    }
}

// ---------------------------------------------------------------------------
// Framed files
// ---------------------------------------------------------------------------

/// Writes a 5-byte file header: 4-byte magic plus a version byte.
pub fn write_header(out: &mut Vec<u8>, magic: [u8; 4], version: u8) {
    out.extend_from_slice(&magic);
    out.push(version);
}

/// Checks a file header and returns the payload after it.
pub fn read_header<'a>(
    data: &'a [u8],
    magic: [u8; 4],
    version: u8,
) -> Result<&'a [u8], CodecError> {
    if data.len() < 5 || data[..4] != magic {
        return Err(CodecError::BadMagic { expected: magic });
    }
    if data[4] != version {
        return Err(CodecError::UnsupportedVersion(data[4]));
    }
    Ok(&data[5..])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seed(tag: u8) -> [u8; 32] {
        let mut s = [0u8; 32];
        s[0] = tag;
        s
    }

    #[test]
    fn sha256_matches_known_vector() {
        // SHA-256 of the empty string.
        assert_eq!(
            sha256(b"").to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            sha256(b"abc").to_hex(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn u64_zero_encodes_as_eight_zero_bytes() {
        assert_eq!(0u64.canon_bytes(), vec![0u8; 8]);
    }

    #[test]
    fn sign_verify_round_trip() {
        let keys = KeyPair::from_seed(&seed(1));
        let msg = b"the quick brown fox";
        let sig = keys.sign(msg);
        assert!(keys.public().verify(msg, &sig));
    }

    #[test]
    fn verify_rejects_mutations() {
        let keys = KeyPair::from_seed(&seed(2));
        let other = KeyPair::from_seed(&seed(3));
        let msg = b"payload".to_vec();
        let sig = keys.sign(&msg);

        let mut bad_msg = msg.clone();
        bad_msg[0] ^= 1;
        assert!(!keys.public().verify(&bad_msg, &sig));

        let mut bad_sig = sig;
        bad_sig.0[5] ^= 1;
        assert!(!keys.public().verify(&msg, &bad_sig));

        assert!(!other.public().verify(&msg, &sig));
    }

    #[test]
    fn node_id_is_key_hash() {
        let keys = KeyPair::from_seed(&seed(4));
        assert_eq!(keys.node_id().0, sha256(&keys.public().to_bytes()));
    }

    #[test]
    fn merkle_empty_rejected() {
        assert_eq!(merkle_root(&[]), Err(CodecError::EmptyLeafSet));
    }

    #[test]
    fn merkle_single_leaf_is_leaf_hash() {
        let leaf = b"L".to_vec();
        assert_eq!(merkle_root(&[leaf.clone()]).unwrap(), merkle_leaf_hash(&leaf));
    }

    #[test]
    fn merkle_two_leaves() {
        let l1 = b"L1".to_vec();
        let l2 = b"L2".to_vec();
        let expected = merkle_node_hash(&merkle_leaf_hash(&l1), &merkle_leaf_hash(&l2));
        assert_eq!(merkle_root(&[l1, l2]).unwrap(), expected);
    }

    /// Independent reference tree: recursive instead of level-iterative.
    fn reference_root(hashes: &[Digest]) -> Digest {
        if let [single] = hashes {
            return *single;
        }
        let mut parents = Vec::new();
        let mut i = 0;
        while i < hashes.len() {
            if i + 1 < hashes.len() {
                parents.push(merkle_node_hash(&hashes[i], &hashes[i + 1]));
            } else {
                parents.push(hashes[i]);
            }
            i += 2;
        }
        reference_root(&parents)
    }

    #[test]
    fn merkle_three_leaves_matches_reference() {
        let leaves: Vec<Vec<u8>> = vec![b"L1".to_vec(), b"L2".to_vec(), b"L3".to_vec()];
        let hashes: Vec<Digest> = leaves.iter().map(|l| merkle_leaf_hash(l)).collect();
        assert_eq!(merkle_root(&leaves).unwrap(), reference_root(&hashes));
    }

    #[test]
    fn merkle_many_sizes_match_reference() {
        for n in 1..=17usize {
            let leaves: Vec<Vec<u8>> = (0..n).map(|i| vec![i as u8; 3]).collect();
            let hashes: Vec<Digest> = leaves.iter().map(|l| merkle_leaf_hash(l)).collect();
            assert_eq!(
                merkle_root(&leaves).unwrap(),
                reference_root(&hashes),
                "mismatch at {n} leaves"
            );
        }
    }

    #[test]
    fn merkle_leaf_mutation_changes_root() {
        let leaves: Vec<Vec<u8>> = (0..5u8).map(|i| vec![i; 4]).collect();
        let root = merkle_root(&leaves).unwrap();
        for i in 0..leaves.len() {
            let mut mutated = leaves.clone();
            mutated[i][0] ^= 0x80;
            assert_ne!(merkle_root(&mutated).unwrap(), root);
        }
    }

    #[test]
    fn reader_rejects_trailing_bytes() {
        let mut bytes = 7u64.canon_bytes();
        bytes.push(0);
        assert!(matches!(
            u64::from_canon_bytes(&bytes),
            Err(CodecError::TrailingBytes { remaining: 1 })
        ));
    }

    #[test]
    fn reader_rejects_short_buffer() {
        assert!(matches!(
            u64::from_canon_bytes(&[1, 2, 3]),
            Err(CodecError::BufferTooShort { .. })
        ));
    }

    #[test]
    fn header_round_trip() {
        let mut out = Vec::new();
        write_header(&mut out, *b"VPRF", 1);
        out.extend_from_slice(b"payload");
        assert_eq!(read_header(&out, *b"VPRF", 1).unwrap(), b"payload");
        assert!(read_header(&out, *b"VCHN", 1).is_err());
        assert!(matches!(
            read_header(&out, *b"VPRF", 2),
            Err(CodecError::UnsupportedVersion(1))
        ));
    }
}
