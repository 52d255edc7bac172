//! Per-node database of confirmed transaction blocks and known public keys.
//!
//! A block enters the store only if it checks out against its on-chain
//! abstract: the supplied key must hash to the abstract's key hash and the
//! abstract's signature must cover the Merkle root recomputed from the
//! block's transactions. Everything downstream (replay, proof extraction)
//! relies on that gate and does not re-verify stored blocks.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::codec::{Canon, CodecError, NodeId, PublicKey};
use crate::ledger::{BlockRef, Height, TransactionBlock};
use crate::mainchain::ChainView;

/// Block file magic ("VBLK") and version, used by directory persistence.
pub const BLOCK_MAGIC: [u8; 4] = *b"VBLK";
pub const BLOCK_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StoreError {
    #[error("no abstract from {node} at height {height}")]
    NoMatchingAbstract { node: NodeId, height: Height },

    #[error("merkle root or signature does not match the on-chain abstract")]
    MerkleMismatch,

    #[error("key does not match the abstract for {node}")]
    BadSignature { node: NodeId },

    #[error("no public key known for {node}")]
    UnknownKey { node: NodeId },

    #[error("transaction block is empty")]
    EmptyBlock,

    #[error("io error: {0}")]
    Io(String),

    #[error("codec error: {0}")]
    Codec(#[from] CodecError),
}

#[derive(Default, Clone, Debug)]
pub struct ConfirmedBlockStore {
    blocks: BTreeMap<BlockRef, TransactionBlock>,
    keys: BTreeMap<NodeId, PublicKey>,
}

impl ConfirmedBlockStore {
    pub fn new() -> ConfirmedBlockStore {
        ConfirmedBlockStore::default()
    }

    /// Registers a public key under its derived node id.
    pub fn add_key(&mut self, key: PublicKey) {
        self.keys.insert(key.node_id(), key);
    }

    pub fn key(&self, node: &NodeId) -> Option<&PublicKey> {
        self.keys.get(node)
    }

    pub fn keys(&self) -> impl Iterator<Item = &PublicKey> {
        self.keys.values()
    }

    /// Verifies `block` against its on-chain abstract and stores it.
    /// Returns `Ok(true)` if newly inserted, `Ok(false)` if it was already
    /// present (idempotent).
    pub fn store_block(
        &mut self,
        block: TransactionBlock,
        view: &ChainView<'_>,
    ) -> Result<bool, StoreError> {
        let reference = block.block_ref();
        if let Some(existing) = self.blocks.get(&reference) {
            // The abstract binds the content, so a verified duplicate is
            // byte-identical; nothing to do.
            if *existing == block {
                return Ok(false);
            }
        }
        let abs = view
            .abstract_of(block.height, &block.creator)
            .ok_or(StoreError::NoMatchingAbstract { node: block.creator, height: block.height })?;
        let key = self
            .keys
            .get(&block.creator)
            .ok_or(StoreError::UnknownKey { node: block.creator })?;
        if key.key_hash() != abs.key_hash {
            return Err(StoreError::BadSignature { node: block.creator });
        }
        let root = block.tx_root().map_err(|_| StoreError::EmptyBlock)?;
        if !abs.verify(key, &root) {
            return Err(StoreError::MerkleMismatch);
        }
        self.blocks.insert(reference, block);
        Ok(true)
    }

    pub fn get(&self, reference: &BlockRef) -> Option<&TransactionBlock> {
        self.blocks.get(reference)
    }

    pub fn contains(&self, reference: &BlockRef) -> bool {
        self.blocks.contains_key(reference)
    }

    pub fn remove(&mut self, reference: &BlockRef) -> Option<TransactionBlock> {
        self.blocks.remove(reference)
    }

    pub fn block_refs(&self) -> impl Iterator<Item = BlockRef> + '_ {
        self.blocks.keys().copied()
    }

    pub fn blocks(&self) -> impl Iterator<Item = &TransactionBlock> {
        self.blocks.values()
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Canonical size of all stored blocks, in bytes. Storage metric.
    pub fn stored_bytes(&self) -> u64 {
        self.blocks.values().map(|b| b.canon_bytes().len() as u64).sum()
    }

    // -- directory persistence ----------------------------------------------

    /// Writes one framed file per block, named `<creator>-<height>.vtb`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<(), StoreError> {
        std::fs::create_dir_all(dir).map_err(|e| StoreError::Io(e.to_string()))?;
        for (reference, block) in &self.blocks {
            let mut bytes = Vec::new();
            crate::codec::write_header(&mut bytes, BLOCK_MAGIC, BLOCK_VERSION);
            bytes.extend_from_slice(&block.canon_bytes());
            let name = format!("{}-{}.vtb", reference.node.to_hex(), reference.height);
            std::fs::write(dir.join(name), bytes).map_err(|e| StoreError::Io(e.to_string()))?;
        }
        Ok(())
    }

    /// Loads every `.vtb` file in a directory, verifying each block against
    /// the chain view.
    pub fn load_from_dir(&mut self, dir: &Path, view: &ChainView<'_>) -> Result<usize, StoreError> {
        let mut loaded = 0;
        let mut entries: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| StoreError::Io(e.to_string()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "vtb"))
            .collect();
        entries.sort();
        for path in entries {
            let data = std::fs::read(&path).map_err(|e| StoreError::Io(e.to_string()))?;
            let payload = crate::codec::read_header(&data, BLOCK_MAGIC, BLOCK_VERSION)?;
            let block = TransactionBlock::from_canon_bytes(payload)?;
            if self.store_block(block, view)? {
                loaded += 1;
            }
        }
        Ok(loaded)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::KeyPair;
    use crate::ledger::{genesis_value_id, Receiver, Transaction};
    use crate::mainchain::{
        algorithm, sign_abstract, Chain, ConsensusEngine, GenesisConfig, SimEngine, Statement,
        Submission,
    };

    struct Fixture {
        keys: Vec<KeyPair>,
        chain: Chain,
        block: TransactionBlock,
    }

    fn fixture() -> Fixture {
        let keys: Vec<KeyPair> = (0..3)
            .map(|i| {
                let mut seed = [0u8; 32];
                seed[0] = i;
                seed[1] = 0x31;
                KeyPair::from_seed(&seed)
            })
            .collect();
        let config = GenesisConfig {
            node_keys: keys.iter().map(|k| k.public()).collect(),
            objection_window: 8,
            tau: 1,
        };
        let statements = vec![Statement::AddValue {
            value: genesis_value_id(0),
            amount: 10,
            owner: keys[0].node_id(),
        }];
        let chain = Chain::genesis(config, statements);
        let mut engine = SimEngine::new(chain);

        let mut block = TransactionBlock {
            creator: keys[0].node_id(),
            height: 2,
            transactions: vec![Transaction {
                value: genesis_value_id(0),
                receiver: Receiver::Node(keys[1].node_id()),
                sn: 1,
            }],
        };
        let abs = sign_abstract(&keys[0], keys[0].node_id(), &block).unwrap();
        engine.submit(Submission::Abstract(abs)).unwrap();
        engine.try_advance();
        block.height = 2;
        Fixture { keys, chain: engine.into_chain(), block }
    }

    #[test]
    fn store_and_idempotent_restore() {
        let f = fixture();
        let mut store = ConfirmedBlockStore::new();
        store.add_key(f.keys[0].public());
        let view = f.chain.view();
        assert!(store.store_block(f.block.clone(), &view).unwrap());
        assert!(!store.store_block(f.block.clone(), &view).unwrap());
        assert_eq!(store.len(), 1);
        assert!(store.contains(&f.block.block_ref()));
    }

    #[test]
    fn altered_transaction_rejected() {
        let f = fixture();
        let mut store = ConfirmedBlockStore::new();
        store.add_key(f.keys[0].public());
        let mut altered = f.block.clone();
        altered.transactions[0].sn = 99;
        assert_eq!(
            store.store_block(altered, &f.chain.view()),
            Err(StoreError::MerkleMismatch)
        );
    }

    #[test]
    fn missing_abstract_rejected() {
        let f = fixture();
        let mut store = ConfirmedBlockStore::new();
        store.add_key(f.keys[1].public());
        // keys[1] has no abstract at height 2
        let block = TransactionBlock {
            creator: f.keys[1].node_id(),
            height: 2,
            transactions: f.block.transactions.clone(),
        };
        assert!(matches!(
            store.store_block(block, &f.chain.view()),
            Err(StoreError::NoMatchingAbstract { .. })
        ));
    }

    #[test]
    fn unknown_key_rejected() {
        let f = fixture();
        let mut store = ConfirmedBlockStore::new();
        assert!(matches!(
            store.store_block(f.block.clone(), &f.chain.view()),
            Err(StoreError::UnknownKey { .. })
        ));
    }

    #[test]
    fn directory_round_trip() {
        let f = fixture();
        let mut store = ConfirmedBlockStore::new();
        store.add_key(f.keys[0].public());
        store.store_block(f.block.clone(), &f.chain.view()).unwrap();

        let dir = tempfile::tempdir().unwrap();
        store.write_to_dir(dir.path()).unwrap();

        let mut restored = ConfirmedBlockStore::new();
        restored.add_key(f.keys[0].public());
        let loaded = restored.load_from_dir(dir.path(), &f.chain.view()).unwrap();
        assert_eq!(loaded, 1);
        assert_eq!(restored.get(&f.block.block_ref()), Some(&f.block));
    }

    #[test]
    fn registered_algorithms_visible_from_genesis() {
        // sanity: fixtures register nothing beyond the default statements
        let f = fixture();
        assert!(!f.chain.algorithm_registered(algorithm::BETTING, 1));
    }
}
