//! Scripted protocol driver: runs the consensus engine and an omniscient
//! block store directly, with no network in between.
//!
//! This is the harness behind most unit and integration tests, and behind
//! hand-written protocol walkthroughs: queue transactions per node, advance
//! a round, and every sealed block that got its abstract on-chain lands in
//! the shared store. For full agent behavior under message delays use
//! [`crate::simnet`] instead.

use std::collections::BTreeMap;

use crate::codec::{KeyPair, NodeId};
use crate::ledger::{
    genesis_value_id, Amount, Height, OffchainPayment, Receiver, Transaction, TransactionBlock,
    ValueId,
};
use crate::mainchain::{
    algorithm, sign_abstract, Chain, ChainView, ConsensusEngine, GenesisConfig, SimEngine,
    Statement, Submission,
};
use crate::replay::{derive_ownership, OwnershipHistory};
use crate::store::ConfirmedBlockStore;

/// Deterministic per-node key seeds for scripted worlds.
pub fn script_keys(count: usize) -> Vec<KeyPair> {
    (0..count)
        .map(|i| {
            let mut seed = [0u8; 32];
            seed[..8].copy_from_slice(&(i as u64).to_be_bytes());
            seed[8] = 0x5C;
            KeyPair::from_seed(&seed)
        })
        .collect()
}

pub struct ScriptWorld {
    keys: Vec<KeyPair>,
    values_per_node: usize,
    engine: SimEngine,
    /// Omniscient store holding every confirmed block and every key.
    pub store: ConfirmedBlockStore,
    sn: Vec<u64>,
    pending: BTreeMap<usize, Vec<Transaction>>,
    /// Extra same-round blocks for equivocation scripts.
    extra_blocks: Vec<(usize, Vec<Transaction>)>,
}

impl ScriptWorld {
    /// A world with `nodes` nodes, each owning `values_per_node` genesis
    /// values of `amount` quanta, all verifier families registered, T = 8,
    /// tau = 1.
    pub fn new(nodes: usize, values_per_node: usize, amount: Amount) -> ScriptWorld {
        ScriptWorld::with_window(nodes, values_per_node, amount, 8)
    }

    pub fn with_window(
        nodes: usize,
        values_per_node: usize,
        amount: Amount,
        objection_window: u64,
    ) -> ScriptWorld {
        let keys = script_keys(nodes);
        let config = GenesisConfig {
            node_keys: keys.iter().map(|k| k.public()).collect(),
            objection_window,
            tau: 1,
        };
        let mut statements: Vec<Statement> = [
            algorithm::BASE,
            algorithm::DIVISION,
            algorithm::FAST_PAYMENT,
            algorithm::BETTING,
        ]
        .into_iter()
        .map(|alg| Statement::RegisterVerifier {
            algorithm: alg,
            spec_digest: crate::codec::sha256(&alg.to_be_bytes()),
        })
        .collect();
        for node in 0..nodes {
            for k in 0..values_per_node {
                statements.push(Statement::AddValue {
                    value: genesis_value_id((node * values_per_node + k) as u64),
                    amount,
                    owner: keys[node].node_id(),
                });
            }
        }
        let chain = Chain::genesis(config, statements);
        let mut store = ConfirmedBlockStore::new();
        for key in &keys {
            store.add_key(key.public());
        }
        ScriptWorld {
            sn: vec![0; nodes],
            values_per_node,
            engine: SimEngine::new(chain),
            store,
            pending: BTreeMap::new(),
            extra_blocks: Vec::new(),
            keys,
        }
    }

    pub fn node_count(&self) -> usize {
        self.keys.len()
    }

    pub fn node_id(&self, index: usize) -> NodeId {
        self.keys[index].node_id()
    }

    pub fn keys_of(&self, index: usize) -> &KeyPair {
        &self.keys[index]
    }

    /// The k-th genesis value of a node.
    pub fn value(&self, node: usize, k: usize) -> ValueId {
        genesis_value_id((node * self.values_per_node + k) as u64)
    }

    pub fn next_sn(&mut self, node: usize) -> u64 {
        self.sn[node] += 1;
        self.sn[node]
    }

    /// Queues a transaction into the node's next block.
    pub fn queue(&mut self, node: usize, value: ValueId, receiver: Receiver) {
        let sn = self.next_sn(node);
        self.pending
            .entry(node)
            .or_default()
            .push(Transaction { value, receiver, sn });
    }

    pub fn transfer(&mut self, from: usize, to: usize, value: ValueId) {
        let receiver = Receiver::Node(self.node_id(to));
        self.queue(from, value, receiver);
    }

    /// Queues a second block for the same node this round (equivocation).
    pub fn queue_conflicting_block(&mut self, node: usize, transactions: Vec<Transaction>) {
        self.extra_blocks.push((node, transactions));
    }

    pub fn statement(&mut self, stmt: Statement) {
        self.engine
            .submit(Submission::Statement(stmt))
            .expect("scripted statements are well-formed");
    }

    /// Signs an off-chain payment from one node to another.
    pub fn payment(&mut self, from: usize, value: ValueId, to: usize) -> OffchainPayment {
        let sn = self.next_sn(from);
        let receiver = self.node_id(to);
        OffchainPayment::sign(&self.keys[from], value, receiver, sn)
    }

    /// Seals pending transactions into blocks, submits their abstracts,
    /// advances the engine one round, and stores every block whose abstract
    /// landed. Returns the new chain height.
    pub fn advance(&mut self) -> Height {
        let height = self.engine.chain().height() + 1;
        let mut candidates: Vec<(usize, TransactionBlock)> = Vec::new();
        for (node, txs) in std::mem::take(&mut self.pending) {
            candidates.push((
                node,
                TransactionBlock { creator: self.node_id(node), height, transactions: txs },
            ));
        }
        for (node, txs) in std::mem::take(&mut self.extra_blocks) {
            candidates.push((
                node,
                TransactionBlock { creator: self.node_id(node), height, transactions: txs },
            ));
        }
        for (node, block) in &candidates {
            let abs = sign_abstract(&self.keys[*node], self.node_id(*node), block)
                .expect("scripted blocks are non-empty");
            self.engine
                .submit(Submission::Abstract(abs))
                .expect("scripted abstracts are well-formed");
        }
        self.engine.try_advance();

        // Store whichever candidate each included abstract commits to.
        let view = self.engine.chain().view();
        for (node, block) in candidates {
            let Some(abs) = view.abstract_of(height, &self.node_id(node)) else { continue };
            let root = block.tx_root().expect("non-empty");
            if abs.verify(&self.keys[node].public(), &root) {
                self.store
                    .store_block(block, &view)
                    .expect("sealed block matches its abstract");
            }
        }
        height
    }

    pub fn advance_n(&mut self, rounds: usize) {
        for _ in 0..rounds {
            self.advance();
        }
    }

    pub fn chain(&self) -> &Chain {
        self.engine.chain()
    }

    pub fn view(&self) -> ChainView<'_> {
        self.engine.chain().view()
    }

    /// Replays ownership over the omniscient store.
    pub fn history(&self) -> OwnershipHistory {
        derive_ownership(&self.store, &self.view(), self.chain().height())
    }
}
