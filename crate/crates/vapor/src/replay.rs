//! Global ownership replay: the ledger-side route for deciding who owns
//! which value at which state.
//!
//! Starting from the on-chain creation records, the replay walks every
//! height once and folds three kinds of events into per-value timelines:
//!
//! 1. on-chain statements (mint, demolish, lock, unlock, objection, bet
//!    confirmation), applied before anything else at their height;
//! 2. the current owner's confirmed transaction block at that height, if
//!    any: zero transactions of the value leave it untouched, exactly one
//!    moves it, more than one voids it to `NA`;
//! 3. deposit-lock and bet sessions, which park the value at `NA` until a
//!    claim, an unopposed unlock expiry, or the bet's target height settles
//!    it.
//!
//! The replay is a pure function of (store contents, chain, height). With a
//! partial store it degrades to `Unknown` for exactly the values whose
//! needed blocks are missing; it never guesses. The proof verifier in
//! [`crate::verifier`] re-derives the same answers from a proof alone and is
//! deliberately written as independent code.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::codec::NodeId;
use crate::ledger::{Amount, Height, Parity, Receiver, Transaction, ValueId};
use crate::mainchain::{ChainView, MainChainBlock, Statement};
use crate::store::ConfirmedBlockStore;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplyError {
    #[error("unknown value {0}")]
    UnknownValue(ValueId),

    #[error("cannot demolish {0}: value is locked")]
    DeleteLocked(ValueId),
}

/// Why a value has no owner.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NaCause {
    /// More than one transaction of the value in one confirmed block.
    DoubleSpend,
    /// A structurally invalid transaction (bad division sums, stale bet,
    /// misused receiver form).
    Malformed,
}

/// Ongoing deposit-lock session.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LockSession {
    pub locker: NodeId,
    pub beneficiary: NodeId,
    pub since: Height,
    pub unlocks: Vec<Height>,
    /// Objection heights; only objections inside some unlock's window are
    /// recorded.
    pub objections: Vec<Height>,
}

impl LockSession {
    /// Whether an unlock at `u` was objected within its window.
    fn objected(&self, u: Height, window: u64) -> bool {
        self.objections.iter().any(|&o| u < o && o <= u + window)
    }

    /// Appendix-style claim gate: no unlock has sat unanswered for more
    /// than `window` blocks as of `h`.
    pub fn claim_allowed(&self, h: Height, window: u64) -> bool {
        !self.unlocks.iter().any(|&u| u + window < h && !self.objected(u, window))
    }

    /// The lock lifts back to the locker exactly when a *single* unlock has
    /// passed its whole window with no objection.
    pub fn restores_at(&self, window: u64) -> Option<Height> {
        match self.unlocks.as_slice() {
            [u] if !self.objected(*u, window) => Some(*u + window + 1),
            _ => None,
        }
    }
}

/// Ongoing bet session for one staked value.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct BetSession {
    pub staker: NodeId,
    pub counterparty: NodeId,
    pub parity: Parity,
    pub target: Height,
    pub since: Height,
}

/// Point-in-time standing of one value.
#[derive(Clone, PartialEq, Eq, Debug)]
pub enum Status {
    Owned { owner: NodeId, since: Height },
    NotAssigned { since: Height, cause: NaCause },
    LockedFp { since: Height, session: LockSession },
    LockedBet { since: Height, session: BetSession },
    /// Divided away; the children carry the amount onward.
    Consumed { at: Height },
    Deleted { at: Height },
    /// The replaying store lacks a block needed to continue this value.
    Unknown { since: Height },
}

impl Status {
    /// Projection to the three-way owner view.
    pub fn owner_view(&self) -> OwnerView {
        match self {
            Status::Owned { owner, .. } => OwnerView::Node(*owner),
            Status::Unknown { .. } => OwnerView::Unknown,
            _ => OwnerView::Na,
        }
    }
}

/// What the oracle reports for a (value, height) query.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum OwnerView {
    Node(NodeId),
    /// Exists but has no owner (voided, locked, consumed, demolished).
    Na,
    /// Not decidable from the blocks available to the replaying store.
    Unknown,
}

#[derive(Clone, Debug)]
struct ValueState {
    amount: Amount,
    status: Status,
    timeline: Vec<(Height, Status)>,
}

impl ValueState {
    fn new(height: Height, status: Status, amount: Amount) -> ValueState {
        ValueState { amount, timeline: vec![(height, status.clone())], status }
    }

    fn set(&mut self, height: Height, status: Status) {
        self.status = status.clone();
        self.timeline.push((height, status));
    }
}

/// Per-value ownership timelines derived by replay.
#[derive(Clone, Debug, Default)]
pub struct OwnershipHistory {
    values: BTreeMap<ValueId, (Amount, Vec<(Height, Status)>)>,
    up_to: Height,
}

impl OwnershipHistory {
    pub fn up_to(&self) -> Height {
        self.up_to
    }

    pub fn values(&self) -> impl Iterator<Item = &ValueId> {
        self.values.keys()
    }

    pub fn amount_of(&self, value: &ValueId) -> Option<Amount> {
        self.values.get(value).map(|(a, _)| *a)
    }

    /// Status of a value as of `height`, or `None` if the value did not
    /// exist yet (or never existed).
    pub fn status_at(&self, value: &ValueId, height: Height) -> Option<&Status> {
        let (_, timeline) = self.values.get(value)?;
        timeline
            .iter()
            .rev()
            .find(|(h, _)| *h <= height)
            .map(|(_, status)| status)
    }

    pub fn owner_at(&self, value: &ValueId, height: Height) -> Option<OwnerView> {
        self.status_at(value, height).map(Status::owner_view)
    }

    /// Ownership table snapshot at a height: demolished values drop out,
    /// everything else reports its owner view, amount, and the height since
    /// which the current status holds.
    pub fn table_at(&self, height: Height) -> OwnershipTable {
        let mut rows = BTreeMap::new();
        for (value, (amount, timeline)) in &self.values {
            let Some((since, status)) = timeline.iter().rev().find(|(h, _)| *h <= height) else {
                continue;
            };
            if matches!(status, Status::Deleted { .. } | Status::Consumed { .. }) {
                continue;
            }
            rows.insert(
                value.clone(),
                TableRow { owner: status.owner_view(), since: *since, amount: *amount },
            );
        }
        OwnershipTable { height, rows }
    }

    /// Total quanta of live values at a height (owned, locked, or voided;
    /// consumed and demolished values excluded). Conservation probe input.
    pub fn total_live(&self, height: Height) -> Amount {
        self.values
            .iter()
            .filter_map(|(_, (amount, timeline))| {
                let (_, status) = timeline.iter().rev().find(|(h, _)| *h <= height)?;
                match status {
                    Status::Deleted { .. } | Status::Consumed { .. } => None,
                    _ => Some(*amount),
                }
            })
            .sum()
    }
}

/// Snapshot table: value -> (owner view, since, amount).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OwnershipTable {
    pub height: Height,
    pub rows: BTreeMap<ValueId, TableRow>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TableRow {
    pub owner: OwnerView,
    pub since: Height,
    pub amount: Amount,
}

impl OwnershipTable {
    /// CSV export: `value_id,owner,amount,since_height`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("value_id,owner,amount,since_height\n");
        for (value, row) in &self.rows {
            let owner = match row.owner {
                OwnerView::Node(node) => node.to_hex(),
                OwnerView::Na => "NA".to_string(),
                OwnerView::Unknown => "unknown".to_string(),
            };
            out.push_str(&format!("{value},{owner},{},{}\n", row.amount, row.since));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// The replay fold
// ---------------------------------------------------------------------------

struct ReplayState<'a> {
    view: &'a ChainView<'a>,
    store: &'a ConfirmedBlockStore,
    window: u64,
    values: BTreeMap<ValueId, ValueState>,
    /// Bet confirmations seen on-chain: (low id, high id, target) ->
    /// (height, confirmer). First confirmation wins.
    confirms: BTreeMap<(ValueId, ValueId, Height), (Height, NodeId)>,
}

/// Replays heights `1..=up_to` against the given store.
///
/// With a full store this is the ownership oracle; with a partial store the
/// affected values become `Unknown` from the first height whose needed block
/// is missing. Pure: identical inputs give identical histories.
pub fn derive_ownership(
    store: &ConfirmedBlockStore,
    view: &ChainView<'_>,
    up_to: Height,
) -> OwnershipHistory {
    let up_to = up_to.min(view.height());
    let mut state = ReplayState {
        view,
        store,
        window: view.objection_window(),
        values: BTreeMap::new(),
        confirms: BTreeMap::new(),
    };

    for height in 1..=up_to {
        let block = view.block(height).expect("height clipped to view");
        for stmt in &block.statements {
            state.apply_statement(stmt, height);
        }
        state.step_values(height);
    }

    OwnershipHistory {
        values: state
            .values
            .into_iter()
            .map(|(id, vs)| (id, (vs.amount, vs.timeline)))
            .collect(),
        up_to,
    }
}

impl<'a> ReplayState<'a> {
    fn apply_statement(&mut self, stmt: &Statement, height: Height) {
        match stmt {
            Statement::AddValue { value, amount, owner } => {
                self.values.entry(value.clone()).or_insert_with(|| {
                    ValueState::new(height, Status::Owned { owner: *owner, since: height }, *amount)
                });
            }
            Statement::DeleteValue { value } => {
                if let Some(vs) = self.values.get_mut(value) {
                    // Demolition of a locked or staked value is rejected.
                    if matches!(vs.status, Status::Owned { .. } | Status::NotAssigned { .. }) {
                        vs.set(height, Status::Deleted { at: height });
                    }
                }
            }
            Statement::Lock { value, owner, beneficiary } => {
                if let Some(vs) = self.values.get_mut(value) {
                    if matches!(&vs.status, Status::Owned { owner: o, .. } if o == owner) {
                        vs.set(
                            height,
                            Status::LockedFp {
                                since: height,
                                session: LockSession {
                                    locker: *owner,
                                    beneficiary: *beneficiary,
                                    since: height,
                                    unlocks: Vec::new(),
                                    objections: Vec::new(),
                                },
                            },
                        );
                    }
                }
            }
            Statement::Unlock { value, owner } => {
                if let Some(vs) = self.values.get_mut(value) {
                    if let Status::LockedFp { since, session } = &vs.status {
                        if &session.locker == owner {
                            let mut session = session.clone();
                            session.unlocks.push(height);
                            vs.set(height, Status::LockedFp { since: *since, session });
                        }
                    }
                }
            }
            Statement::Objection { value, payment } => {
                if let Some(vs) = self.values.get_mut(value) {
                    if let Status::LockedFp { since, session } = &vs.status {
                        let window = self.window;
                        let in_window = session
                            .unlocks
                            .iter()
                            .any(|&u| u < height && height <= u + window);
                        let payment_matches = payment.value == *value
                            && payment.sender == session.locker
                            && payment.receiver == session.beneficiary;
                        if in_window && payment_matches {
                            let mut session = session.clone();
                            session.objections.push(height);
                            vs.set(height, Status::LockedFp { since: *since, session });
                        }
                    }
                }
            }
            Statement::BetConfirm { value_a, value_b, confirmer, target } => {
                let key = if value_a <= value_b {
                    (value_a.clone(), value_b.clone(), *target)
                } else {
                    (value_b.clone(), value_a.clone(), *target)
                };
                self.confirms.entry(key).or_insert((height, *confirmer));
            }
            Statement::RegisterVerifier { .. } => {}
        }
    }

    /// Applies block-driven transitions for one height: owner transactions,
    /// beneficiary claims, unlock expiries, and bet resolutions.
    ///
    /// A state acquired at height `h` is first acted on at `h + 1`: both
    /// printed verification walks step past the acquisition height before
    /// examining blocks, so a transaction of a value in the very block that
    /// granted it is inert. Values divided at `h` therefore become spendable
    /// at `h + 1`.
    fn step_values(&mut self, height: Height) {
        let snapshot: Vec<ValueId> = self.values.keys().cloned().collect();
        let mut resolved_bets: Vec<ValueId> = Vec::new();

        for value in snapshot {
            let Some(vs) = self.values.get(&value) else { continue };
            match vs.status.clone() {
                Status::Owned { owner, since } if since < height => {
                    self.step_owned(&value, owner, height);
                }
                Status::LockedFp { since, session } if session.since < height => {
                    self.step_locked(&value, height, since, session);
                }
                Status::LockedBet { session, .. } if session.target == height => {
                    if !resolved_bets.contains(&value) {
                        let settled = self.resolve_bet(&value, &session, height);
                        resolved_bets.extend(settled);
                    }
                }
                _ => {}
            }
        }
    }

    fn step_owned(&mut self, value: &ValueId, owner: NodeId, height: Height) {
        if self.view.abstract_of(height, &owner).is_none() {
            return; // no confirmed block from the owner this round
        }
        let reference = crate::ledger::BlockRef { node: owner, height };
        let Some(block) = self.store.get(&reference) else {
            // The owner confirmed a block we do not hold; this value cannot
            // be tracked past this point.
            let vs = self.values.get_mut(value).expect("value exists");
            vs.set(height, Status::Unknown { since: height });
            return;
        };
        let txs: Vec<Transaction> = block.transactions_of(value).cloned().collect();
        match txs.as_slice() {
            [] => {}
            [tx] => self.apply_owner_tx(value, owner, tx, height),
            _ => {
                let vs = self.values.get_mut(value).expect("value exists");
                vs.set(
                    height,
                    Status::NotAssigned { since: height, cause: NaCause::DoubleSpend },
                );
            }
        }
    }

    fn apply_owner_tx(&mut self, value: &ValueId, owner: NodeId, tx: &Transaction, height: Height) {
        let amount = self.values.get(value).expect("value exists").amount;
        let malformed = |state: &mut ReplayState| {
            let vs = state.values.get_mut(value).expect("value exists");
            vs.set(height, Status::NotAssigned { since: height, cause: NaCause::Malformed });
        };
        match &tx.receiver {
            Receiver::Node(to) => {
                let vs = self.values.get_mut(value).expect("value exists");
                vs.set(height, Status::Owned { owner: *to, since: height });
            }
            Receiver::Miner => {
                let miner = self.view.resolve_miner(height).expect("height exists");
                let vs = self.values.get_mut(value).expect("value exists");
                vs.set(height, Status::Owned { owner: miner, since: height });
            }
            Receiver::Divide(amounts) => {
                let conserved = amounts.iter().copied().sum::<Amount>() == amount;
                if amounts.len() < 2 || amounts.contains(&0) || !conserved {
                    malformed(self);
                    return;
                }
                let vs = self.values.get_mut(value).expect("value exists");
                vs.set(height, Status::Consumed { at: height });
                for (k, child_amount) in amounts.iter().enumerate() {
                    let child = value.child(k as u32);
                    self.values.insert(
                        child,
                        ValueState::new(
                            height,
                            Status::Owned { owner, since: height },
                            *child_amount,
                        ),
                    );
                }
            }
            Receiver::Lock { beneficiary } => {
                // Block-embedded deposit lock: same session as a lock
                // statement by the owner.
                let vs = self.values.get_mut(value).expect("value exists");
                vs.set(
                    height,
                    Status::LockedFp {
                        since: height,
                        session: LockSession {
                            locker: owner,
                            beneficiary: *beneficiary,
                            since: height,
                            unlocks: Vec::new(),
                            objections: Vec::new(),
                        },
                    },
                );
            }
            Receiver::Bet { counterparty, target, parity } => {
                if *target <= height {
                    malformed(self);
                    return;
                }
                let vs = self.values.get_mut(value).expect("value exists");
                vs.set(
                    height,
                    Status::LockedBet {
                        since: height,
                        session: BetSession {
                            staker: owner,
                            counterparty: *counterparty,
                            parity: *parity,
                            target: *target,
                            since: height,
                        },
                    },
                );
            }
            Receiver::Claim(_) => {
                // An owner has no business claiming a value it already owns.
                malformed(self);
            }
        }
    }

    fn step_locked(&mut self, value: &ValueId, height: Height, since: Height, session: LockSession) {
        let window = self.window;

        // Claims first: a claim landing inside an open unlock window beats
        // the expiry that would otherwise trigger at window end + 1.
        if self.view.abstract_of(height, &session.beneficiary).is_some() {
            let reference = crate::ledger::BlockRef { node: session.beneficiary, height };
            let Some(block) = self.store.get(&reference) else {
                let vs = self.values.get_mut(value).expect("value exists");
                vs.set(height, Status::Unknown { since: height });
                return;
            };
            let claims: Vec<&Transaction> = block.transactions_of(value).collect();
            match claims.as_slice() {
                [] => {}
                [tx] => {
                    if let Receiver::Claim(payment) = &tx.receiver {
                        let payment_ok = payment.value == *value
                            && payment.sender == session.locker
                            && payment.receiver == session.beneficiary
                            && self
                                .store
                                .key(&session.locker)
                                .is_some_and(|key| payment.verify(key));
                        if payment_ok && session.claim_allowed(height, window) {
                            let vs = self.values.get_mut(value).expect("value exists");
                            vs.set(
                                height,
                                Status::Owned { owner: session.beneficiary, since: height },
                            );
                            return;
                        }
                    }
                    // Any other transaction of a locked value by the
                    // beneficiary is inert: it is not the owner.
                }
                _ => {
                    let vs = self.values.get_mut(value).expect("value exists");
                    vs.set(
                        height,
                        Status::NotAssigned { since: height, cause: NaCause::DoubleSpend },
                    );
                    return;
                }
            }
        }

        if session.restores_at(window) == Some(height) {
            let vs = self.values.get_mut(value).expect("value exists");
            vs.set(height, Status::Owned { owner: session.locker, since: height });
        } else {
            let _ = since;
        }
    }

    /// Settles every stake whose target is `height`. Returns the values it
    /// settled (self plus possibly the paired stake).
    fn resolve_bet(&mut self, value: &ValueId, session: &BetSession, height: Height) -> Vec<ValueId> {
        let paired = self.find_paired_stake(value, session, height);
        match paired {
            Some(other) => {
                let digest = self.view.digest_at(height).expect("target reached");
                let winner = if session.parity.matches(&digest) {
                    session.staker
                } else {
                    session.counterparty
                };
                for v in [value, &other] {
                    let vs = self.values.get_mut(v).expect("value exists");
                    vs.set(height, Status::Owned { owner: winner, since: height });
                }
                vec![value.clone(), other]
            }
            None => {
                // Unmatched or unconfirmed: the stake reverts to its owner.
                let vs = self.values.get_mut(value).expect("value exists");
                vs.set(height, Status::Owned { owner: session.staker, since: height });
                vec![value.clone()]
            }
        }
    }

    /// Finds the opposite stake for a bet, requiring an on-chain
    /// confirmation naming the pair, mutual party references, equal amounts,
    /// and opposite parities.
    fn find_paired_stake(
        &self,
        value: &ValueId,
        session: &BetSession,
        height: Height,
    ) -> Option<ValueId> {
        let amount = self.values.get(value)?.amount;
        for ((a, b, target), (confirm_height, confirmer)) in &self.confirms {
            if *target != height || *confirm_height > height {
                continue;
            }
            let other = if a == value {
                b
            } else if b == value {
                a
            } else {
                continue;
            };
            if *confirmer != session.staker && *confirmer != session.counterparty {
                continue;
            }
            let Some(other_state) = self.values.get(other) else { continue };
            let Status::LockedBet { session: other_session, .. } = &other_state.status else {
                continue;
            };
            let mutual = other_session.staker == session.counterparty
                && other_session.counterparty == session.staker
                && other_session.target == session.target
                && other_session.parity == session.parity.opposite()
                && other_state.amount == amount;
            if mutual {
                return Some(other.clone());
            }
        }
        None
    }
}

// ---------------------------------------------------------------------------
// Statement application on a table snapshot
// ---------------------------------------------------------------------------

/// Applies one main-chain block's statements (and any unlock expiry due at
/// that height) to a standalone table snapshot.
///
/// This is the statements-only slice of the replay: block-driven transitions
/// (transfers, claims, divisions) are not visible to it. It exists for
/// callers that track the on-chain lifecycle of values without holding any
/// transaction blocks.
pub fn apply_statements(
    table: &mut BTreeMap<ValueId, (Amount, Status)>,
    block: &MainChainBlock,
    window: u64,
) -> Result<(), ApplyError> {
    let height = block.height;
    for stmt in &block.statements {
        match stmt {
            Statement::AddValue { value, amount, owner } => {
                table
                    .entry(value.clone())
                    .or_insert((*amount, Status::Owned { owner: *owner, since: height }));
            }
            Statement::DeleteValue { value } => match table.get_mut(value) {
                None => return Err(ApplyError::UnknownValue(value.clone())),
                Some((_, status)) => match status {
                    Status::LockedFp { .. } | Status::LockedBet { .. } => {
                        return Err(ApplyError::DeleteLocked(value.clone()))
                    }
                    _ => {
                        table.remove(value);
                    }
                },
            },
            Statement::Lock { value, owner, beneficiary } => match table.get_mut(value) {
                None => return Err(ApplyError::UnknownValue(value.clone())),
                Some((_, status)) => {
                    if matches!(status, Status::Owned { owner: o, .. } if o == owner) {
                        *status = Status::LockedFp {
                            since: height,
                            session: LockSession {
                                locker: *owner,
                                beneficiary: *beneficiary,
                                since: height,
                                unlocks: Vec::new(),
                                objections: Vec::new(),
                            },
                        };
                    }
                }
            },
            Statement::Unlock { value, owner } => {
                if let Some((_, Status::LockedFp { session, .. })) = table.get_mut(value) {
                    if &session.locker == owner {
                        session.unlocks.push(height);
                    }
                }
            }
            Statement::Objection { value, payment } => {
                if let Some((_, Status::LockedFp { session, .. })) = table.get_mut(value) {
                    let in_window =
                        session.unlocks.iter().any(|&u| u < height && height <= u + window);
                    if in_window
                        && payment.value == *value
                        && payment.sender == session.locker
                        && payment.receiver == session.beneficiary
                    {
                        session.objections.push(height);
                    }
                }
            }
            Statement::BetConfirm { .. } | Statement::RegisterVerifier { .. } => {}
        }
    }

    // Unlock expiries due exactly at this height.
    for (_, (_, status)) in table.iter_mut() {
        if let Status::LockedFp { session, .. } = status {
            if session.restores_at(window) == Some(height) {
                let locker = session.locker;
                *status = Status::Owned { owner: locker, since: height };
            }
        }
    }
    Ok(())
}
