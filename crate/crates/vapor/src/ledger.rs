//! Value-centric data model: values, transactions, and per-node transaction
//! blocks.
//!
//! A value is an indivisible coin with an integer amount and, at every chain
//! state, at most one owner. Nodes batch their own outgoing transactions into
//! private transaction blocks; a block becomes *confirmed* at height `i` once
//! the creator's signed commitment for it lands in main-chain block `i`.
//! Confirmed blocks are the raw material from which ownership proofs are cut.
//!
//! The global replay oracle over confirmed blocks lives in [`crate::replay`];
//! the per-value proof verifier lives in [`crate::verifier`]. The two are
//! written independently on purpose.

use std::fmt;

use crate::codec::{
    merkle_root, sha256, Canon, CodecError, Digest, Reader, Signature, Writer,
    PAYMENT_SIGN_DOMAIN,
};
use crate::codec::{KeyPair, NodeId, PublicKey};

/// Main-chain height. Height 1 is the genesis block.
pub type Height = u64;

/// Integer value quanta. Divisions must conserve the total exactly.
pub type Amount = u64;

// ---------------------------------------------------------------------------
// Value identifiers
// ---------------------------------------------------------------------------

/// Identifier of a value.
///
/// A base value carries an empty `path`. Dividing a value with id `p` into
/// `n` children names the children `p/0 .. p/(n-1)`; the path therefore
/// encodes the full division lineage back to the origin. Base ids are only
/// ever minted on-chain, so a divided id can never collide with a base id.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ValueId {
    pub base: Digest,
    pub path: Vec<u32>,
}

impl ValueId {
    pub fn base(base: Digest) -> ValueId {
        ValueId { base, path: Vec::new() }
    }

    pub fn is_base(&self) -> bool {
        self.path.is_empty()
    }

    /// The id of the `index`-th child produced by dividing this value.
    pub fn child(&self, index: u32) -> ValueId {
        let mut path = self.path.clone();
        path.push(index);
        ValueId { base: self.base, path }
    }

    /// The parent id, if this value came from a division.
    pub fn parent(&self) -> Option<ValueId> {
        if self.path.is_empty() {
            return None;
        }
        let mut path = self.path.clone();
        path.pop();
        Some(ValueId { base: self.base, path })
    }

    /// Ancestors from the base value down to this value itself.
    pub fn lineage(&self) -> Vec<ValueId> {
        let mut out = Vec::with_capacity(self.path.len() + 1);
        let mut current = ValueId::base(self.base);
        out.push(current.clone());
        for &segment in &self.path {
            current = current.child(segment);
            out.push(current.clone());
        }
        out
    }

    /// Parses the display form: `<64 hex chars>` optionally followed by
    /// `/i` path segments, e.g. `ab..cd/1/0`.
    pub fn parse(s: &str) -> Result<ValueId, CodecError> {
        let mut parts = s.split('/');
        let base = Digest::from_hex(parts.next().unwrap_or_default())?;
        let mut path = Vec::new();
        for part in parts {
            path.push(part.parse::<u32>().map_err(|_| CodecError::InvalidHex)?);
        }
        Ok(ValueId { base, path })
    }
}

impl fmt::Display for ValueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.base.to_hex())?;
        for segment in &self.path {
            write!(f, "/{segment}")?;
        }
        Ok(())
    }
}

impl fmt::Debug for ValueId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ValueId({}", self.base.short())?;
        for segment in &self.path {
            write!(f, "/{segment}")?;
        }
        f.write_str(")")
    }
}

impl Canon for ValueId {
    fn write(&self, w: &mut Writer) {
        self.base.write(w);
        w.list(&self.path);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(ValueId {
            base: Digest::read(r)?,
            path: r.list()?,
        })
    }
}

// ---------------------------------------------------------------------------
// Transactions
// ---------------------------------------------------------------------------

/// Side of a bet. The two stakes in one bet must take opposite sides; the
/// side matching the parity of the target block's digest wins both stakes.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn matches(&self, digest: &Digest) -> bool {
        match self {
            Parity::Even => digest.is_even(),
            Parity::Odd => !digest.is_even(),
        }
    }

    pub fn opposite(&self) -> Parity {
        match self {
            Parity::Even => Parity::Odd,
            Parity::Odd => Parity::Even,
        }
    }
}

/// A payment signed by the sender and handed to the receiver off-chain.
///
/// The receiver redeems it by embedding it in one of its own transaction
/// blocks ([`Receiver::Claim`]); any node can also post it on-chain inside an
/// objection statement to void a pending unlock.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct OffchainPayment {
    pub value: ValueId,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub sn: u64,
    pub signature: Signature,
}

impl OffchainPayment {
    fn message(value: &ValueId, sender: &NodeId, receiver: &NodeId, sn: u64) -> Vec<u8> {
        let mut w = Writer::new();
        w.raw(PAYMENT_SIGN_DOMAIN);
        value.write(&mut w);
        sender.write(&mut w);
        receiver.write(&mut w);
        w.u64(sn);
        w.into_bytes()
    }

    pub fn sign(keys: &KeyPair, value: ValueId, receiver: NodeId, sn: u64) -> OffchainPayment {
        let sender = keys.node_id();
        let signature = keys.sign(&Self::message(&value, &sender, &receiver, sn));
        OffchainPayment { value, sender, receiver, sn, signature }
    }

    /// Checks the sender's signature. The key must hash to `self.sender`.
    pub fn verify(&self, sender_key: &PublicKey) -> bool {
        sender_key.node_id() == self.sender
            && sender_key.verify(
                &Self::message(&self.value, &self.sender, &self.receiver, self.sn),
                &self.signature,
            )
    }
}

impl Canon for OffchainPayment {
    fn write(&self, w: &mut Writer) {
        self.value.write(w);
        self.sender.write(w);
        self.receiver.write(w);
        w.u64(self.sn);
        self.signature.write(w);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(OffchainPayment {
            value: ValueId::read(r)?,
            sender: NodeId::read(r)?,
            receiver: NodeId::read(r)?,
            sn: r.u64()?,
            signature: Signature::read(r)?,
        })
    }
}

/// Destination of a transaction.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Receiver {
    /// Plain transfer to a node.
    Node(NodeId),
    /// Transfer to whichever node proposed the main-chain block that
    /// confirms this transaction (the fee destination).
    Miner,
    /// Split the value into children with the listed amounts; the sender
    /// owns every child. Child `k` takes the id `parent/k`.
    Divide(Vec<Amount>),
    /// Deposit lock reserving the value for one beneficiary. The canonical
    /// lock mechanism is the on-chain lock statement; this transaction form
    /// is the block-embedded equivalent.
    Lock { beneficiary: NodeId },
    /// Stake the value on the parity of the digest of the block at
    /// `target`: counterparty must stake an equal value on the opposite
    /// parity before that height.
    Bet { counterparty: NodeId, target: Height, parity: Parity },
    /// Redemption of an off-chain payment. Appears in the *receiver's*
    /// block, carrying the sender's signed payment.
    Claim(OffchainPayment),
}

const RECEIVER_NODE: u8 = 0;
const RECEIVER_MINER: u8 = 1;
const RECEIVER_DIVIDE: u8 = 2;
const RECEIVER_LOCK: u8 = 3;
const RECEIVER_BET: u8 = 4;
const RECEIVER_CLAIM: u8 = 5;

impl Canon for Receiver {
    fn write(&self, w: &mut Writer) {
        match self {
            Receiver::Node(node) => {
                w.u8(RECEIVER_NODE);
                node.write(w);
            }
            Receiver::Miner => w.u8(RECEIVER_MINER),
            Receiver::Divide(amounts) => {
                w.u8(RECEIVER_DIVIDE);
                w.list(amounts);
            }
            Receiver::Lock { beneficiary } => {
                w.u8(RECEIVER_LOCK);
                beneficiary.write(w);
            }
            Receiver::Bet { counterparty, target, parity } => {
                w.u8(RECEIVER_BET);
                counterparty.write(w);
                w.u64(*target);
                w.u8(match parity {
                    Parity::Even => 0,
                    Parity::Odd => 1,
                });
            }
            Receiver::Claim(payment) => {
                w.u8(RECEIVER_CLAIM);
                payment.write(w);
            }
        }
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        match r.u8()? {
            RECEIVER_NODE => Ok(Receiver::Node(NodeId::read(r)?)),
            RECEIVER_MINER => Ok(Receiver::Miner),
            RECEIVER_DIVIDE => Ok(Receiver::Divide(r.list()?)),
            RECEIVER_LOCK => Ok(Receiver::Lock { beneficiary: NodeId::read(r)? }),
            RECEIVER_BET => {
                let counterparty = NodeId::read(r)?;
                let target = r.u64()?;
                let parity = match r.u8()? {
                    0 => Parity::Even,
                    1 => Parity::Odd,
                    tag => return Err(CodecError::InvalidTag { tag, type_name: "Parity" }),
                };
                Ok(Receiver::Bet { counterparty, target, parity })
            }
            RECEIVER_CLAIM => Ok(Receiver::Claim(OffchainPayment::read(r)?)),
            tag => Err(CodecError::InvalidTag { tag, type_name: "Receiver" }),
        }
    }
}

/// One transaction inside a node's own transaction block.
///
/// The sender is implicit: it is the block creator. `sn` is the creator's
/// monotone serial counter, starting at 1.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Transaction {
    pub value: ValueId,
    pub receiver: Receiver,
    pub sn: u64,
}

impl Canon for Transaction {
    fn write(&self, w: &mut Writer) {
        self.value.write(w);
        self.receiver.write(w);
        w.u64(self.sn);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(Transaction {
            value: ValueId::read(r)?,
            receiver: Receiver::read(r)?,
            sn: r.u64()?,
        })
    }
}

// ---------------------------------------------------------------------------
// Transaction blocks
// ---------------------------------------------------------------------------

/// Reference to one confirmed transaction block: creator and the main-chain
/// height at which its commitment landed.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug)]
pub struct BlockRef {
    pub node: NodeId,
    pub height: Height,
}

impl Canon for BlockRef {
    fn write(&self, w: &mut Writer) {
        self.node.write(w);
        w.u64(self.height);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(BlockRef { node: NodeId::read(r)?, height: r.u64()? })
    }
}

/// A node's privately assembled batch of transactions.
///
/// `height` is the main-chain height at which the block's commitment was
/// confirmed; it is filled in at confirmation time and is not covered by the
/// commitment signature (only the Merkle root of the transactions is).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct TransactionBlock {
    pub creator: NodeId,
    pub height: Height,
    pub transactions: Vec<Transaction>,
}

impl TransactionBlock {
    pub fn block_ref(&self) -> BlockRef {
        BlockRef { node: self.creator, height: self.height }
    }

    /// Merkle root over the canonical encodings of the transactions.
    pub fn tx_root(&self) -> Result<Digest, CodecError> {
        let leaves: Vec<Vec<u8>> = self.transactions.iter().map(|tx| tx.canon_bytes()).collect();
        merkle_root(&leaves)
    }

    /// Transactions touching `value`, paired with their position.
    pub fn transactions_of<'a>(
        &'a self,
        value: &'a ValueId,
    ) -> impl Iterator<Item = &'a Transaction> {
        self.transactions.iter().filter(move |tx| &tx.value == value)
    }
}

impl Canon for TransactionBlock {
    fn write(&self, w: &mut Writer) {
        self.creator.write(w);
        w.u64(self.height);
        w.list(&self.transactions);
    }

    fn read(r: &mut Reader<'_>) -> Result<Self, CodecError> {
        Ok(TransactionBlock {
            creator: NodeId::read(r)?,
            height: r.u64()?,
            transactions: r.list()?,
        })
    }
}

/// Stable id for a genesis value: hashed from the distribution index so that
/// scenario files and tests can name values without carrying digests around.
pub fn genesis_value_id(index: u64) -> ValueId {
    let mut w = Writer::new();
    w.raw(b"vapor/genesis-value/v1");
    w.u64(index);
    ValueId::base(sha256(&w.into_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::KeyPair;

    fn keys(tag: u8) -> KeyPair {
        let mut seed = [0u8; 32];
        seed[0] = tag;
        KeyPair::from_seed(&seed)
    }

    fn sample_value() -> ValueId {
        genesis_value_id(7)
    }

    #[test]
    fn value_id_lineage() {
        let v = sample_value();
        let child = v.child(1);
        let grandchild = child.child(0);
        assert_eq!(grandchild.path, vec![1, 0]);
        assert_eq!(grandchild.parent(), Some(child.clone()));
        assert_eq!(grandchild.lineage(), vec![v.clone(), child, grandchild.clone()]);
        assert!(v.is_base());
        assert!(!grandchild.is_base());
    }

    #[test]
    fn value_id_display_parse_round_trip() {
        let v = sample_value().child(3).child(0);
        let parsed = ValueId::parse(&v.to_string()).unwrap();
        assert_eq!(parsed, v);
        assert!(ValueId::parse("zz").is_err());
    }

    #[test]
    fn transaction_codec_round_trip() {
        let txs = vec![
            Transaction { value: sample_value(), receiver: Receiver::Node(keys(1).node_id()), sn: 1 },
            Transaction { value: sample_value(), receiver: Receiver::Miner, sn: 2 },
            Transaction { value: sample_value(), receiver: Receiver::Divide(vec![4, 6]), sn: 3 },
            Transaction {
                value: sample_value(),
                receiver: Receiver::Lock { beneficiary: keys(2).node_id() },
                sn: 4,
            },
            Transaction {
                value: sample_value(),
                receiver: Receiver::Bet {
                    counterparty: keys(2).node_id(),
                    target: 12,
                    parity: Parity::Odd,
                },
                sn: 5,
            },
            Transaction {
                value: sample_value(),
                receiver: Receiver::Claim(OffchainPayment::sign(
                    &keys(3),
                    sample_value(),
                    keys(1).node_id(),
                    9,
                )),
                sn: 6,
            },
        ];
        for tx in txs {
            let bytes = tx.canon_bytes();
            assert_eq!(Transaction::from_canon_bytes(&bytes).unwrap(), tx);
        }
    }

    #[test]
    fn transactions_differing_in_sn_encode_differently() {
        let a = Transaction { value: sample_value(), receiver: Receiver::Miner, sn: 1 };
        let b = Transaction { value: sample_value(), receiver: Receiver::Miner, sn: 2 };
        assert_ne!(a.canon_bytes(), b.canon_bytes());
    }

    #[test]
    fn offchain_payment_signature_binds_fields() {
        let sender = keys(5);
        let receiver = keys(6).node_id();
        let payment = OffchainPayment::sign(&sender, sample_value(), receiver, 3);
        assert!(payment.verify(&sender.public()));

        let mut wrong_receiver = payment.clone();
        wrong_receiver.receiver = keys(7).node_id();
        assert!(!wrong_receiver.verify(&sender.public()));

        let mut wrong_sn = payment.clone();
        wrong_sn.sn = 4;
        assert!(!wrong_sn.verify(&sender.public()));

        assert!(!payment.verify(&keys(8).public()));
    }

    #[test]
    fn block_root_changes_when_a_transaction_changes() {
        let mk = |sn| Transaction { value: sample_value(), receiver: Receiver::Miner, sn };
        let block = TransactionBlock {
            creator: keys(1).node_id(),
            height: 4,
            transactions: vec![mk(1), mk(2)],
        };
        let altered = TransactionBlock {
            transactions: vec![mk(1), mk(3)],
            ..block.clone()
        };
        assert_ne!(block.tx_root().unwrap(), altered.tx_root().unwrap());
    }

    #[test]
    fn parity_of_digest() {
        let even = Digest([0u8; 32]);
        let mut odd = Digest([0u8; 32]);
        odd.0[31] = 1;
        assert!(Parity::Even.matches(&even));
        assert!(!Parity::Even.matches(&odd));
        assert!(Parity::Odd.matches(&odd));
        assert_eq!(Parity::Even.opposite(), Parity::Odd);
    }
}
