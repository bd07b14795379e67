//! Per-validator Tendermint state machine: proposal, prevote, precommit and
//! commit steps, locking, nil votes, random-transaction exclusion, round and
//! height advancement.
//!
//! Handlers never touch the world directly. Every side effect (timers,
//! sends, the sleep hook, tracing, the height barrier) goes through [`Env`],
//! which the simulator implements and unit tests mock.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::rotation::{proposer_at, weighted_proposer, ProposerScheme, RotationState};
use crate::timer::{TimerKey, TimerSlot};
use crate::types::{
    exec_digest, identify_random, structurally_valid, BlockId, BlockValue, ConsensusState, MsgKind, Phase,
    ProtocolMessage, Thresholds, Tick, TimeParams, TxId, ValidatorId, VoteAdd, GENESIS_ID,
};
use crate::wal::{reply_wal, wal_append, ReplyWal, WalRecord, WalState};

/// How a precommit quorum turns into a decision.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommitScheme {
    /// Decide on 2f+1 matching precommits.
    #[default]
    PrecommitQuorum,
    /// Broadcast a COMMIT vote after the precommit quorum and decide on 2f+1 of those.
    ExplicitCommitVotes,
}

/// Marks a point-to-point COMMIT that carries an already decided block.
pub const CATCH_UP_TAG: &[u8] = b"catch-up";

/// Round-r timeout of any phase.
pub fn timeout_for(_phase: Phase, round: u64, params: &TimeParams) -> Tick {
    params.timeout(round)
}

/// A trace record produced by a node; the harness stamps time and sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeEvent {
    pub node: usize,
    pub kind: &'static str,
    pub height: u64,
    pub round: u64,
    pub phase: Option<Phase>,
    pub payload: Value,
    pub note: String,
}

/// Side effects available to a handler.
pub trait Env {
    fn now(&self) -> Tick;
    /// Sleep/Wake handshake: the extra delay the adversary imposes on `node`
    /// before it acts in `phase` of `round`.
    fn sleep(&mut self, node: usize, height: u64, phase: Phase, round: u64) -> Tick;
    /// Signs as `msg.sender`.
    fn sign(&mut self, msg: &mut ProtocolMessage);
    fn verify(&mut self, msg: &ProtocolMessage) -> bool;
    fn start_timer(&mut self, key: TimerKey, ticks: Tick);
    fn reset_timer(&mut self, key: TimerKey);
    fn cancel_timers(&mut self, node: usize);
    /// Sends to every validator, the sender included.
    fn broadcast(&mut self, msg: ProtocolMessage);
    fn send(&mut self, to: usize, msg: ProtocolMessage);
    fn trace(&mut self, ev: NodeEvent);
    fn sync_round_ok(&mut self, node: usize) -> bool;
    fn sync_request_round(&mut self, node: usize) -> u8;
}

/// Proposer schedule as a function of the decided chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProposerView {
    pub scheme: ProposerScheme,
    pub rotation: RotationState,
    pub powers: Vec<i64>,
    pub stakes: Vec<u64>,
}

impl ProposerView {
    pub fn new(scheme: ProposerScheme, stakes: Vec<u64>, blocks_per_proposer: u64) -> Self {
        let members = (0..stakes.len()).map(ValidatorId::new).collect();
        Self {
            scheme,
            rotation: RotationState::new(members, blocks_per_proposer),
            powers: stakes.iter().map(|s| *s as i64).collect(),
            stakes,
        }
    }

    pub fn proposer(&self, height: u64, round: u64) -> usize {
        match self.scheme {
            ProposerScheme::IndexRotation => proposer_at(&self.rotation, height, round).index,
            ProposerScheme::WeightedPower => weighted_proposer(&self.powers, &self.stakes, round).0,
        }
    }

    /// Moves the schedule past a height decided in `round`.
    pub fn advance(&mut self, decided: &BlockValue, round: u64) {
        if let Some(m) = self.rotation.members.get(decided.proposer_index) {
            self.rotation.pre_proposer = Some(m.clone());
        }
        self.powers = weighted_proposer(&self.powers, &self.stakes, round).1;
    }
}

/// Which validators locked which block at a (height, round).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PoLC {
    pub records: BTreeMap<(u64, u64, BlockId), BTreeSet<usize>>,
}

impl PoLC {
    pub fn lock(&mut self, height: u64, round: u64, id: BlockId, validator: usize) {
        self.records.entry((height, round, id)).or_default().insert(validator);
    }

    /// Removes `validator` from every record; returns how many it left.
    pub fn unlock_all(&mut self, validator: usize) -> usize {
        let mut n = 0;
        for set in self.records.values_mut() {
            n += usize::from(set.remove(&validator));
        }
        self.records.retain(|_, s| !s.is_empty());
        n
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub n: usize,
    pub thresholds: Thresholds,
    pub params: TimeParams,
    pub commit_scheme: CommitScheme,
    /// Drop the lock on a nil prevote quorum. Off by default: unlocking there
    /// lets a later round decide a second value.
    pub unlock_on_nil: bool,
    pub view: ProposerView,
    pub block_size: usize,
    pub mempool: Vec<TxId>,
}

impl EngineConfig {
    pub fn new(n: usize, f: usize, params: TimeParams) -> Self {
        Self {
            n,
            thresholds: Thresholds::from_f(f),
            params,
            commit_scheme: CommitScheme::default(),
            unlock_on_nil: false,
            view: ProposerView::new(ProposerScheme::IndexRotation, vec![1; n], 1),
            block_size: 2,
            mempool: (1..=32).map(TxId::new).collect(),
        }
    }
}

/// Work deferred until an adversarial sleep ends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Pending {
    Propose,
    EvaluateProposal,
    Lock(BlockId),
    Decide(BlockId),
}

#[derive(Clone, Copy, Debug, Default)]
struct RoundFlags {
    proposed: bool,
    prevoted: bool,
    precommitted: bool,
    commit_sent: bool,
    grace: bool,
    prevote_wait: bool,
    precommit_wait: bool,
}

#[derive(Clone, Debug)]
pub struct ValidatorNode {
    pub id: ValidatorId,
    pub cs: ConsensusState,
    pub polc: PoLC,
    pub wal: WalState,
    pub chain_tip: BlockId,
    pub corrupted: bool,
    pub cfg: EngineConfig,
    pub view: ProposerView,
    /// Executor salt; only nondeterministic transactions observe it.
    pub salt: u64,
    pub mempool: Vec<TxId>,
    pub evicted: BTreeSet<usize>,
    /// Extra execution time accumulated by commit-guard violations this height.
    pub delta_extra: Tick,
    pub down: bool,
    pub waiting_sync: bool,
    pub decision_rounds: BTreeMap<u64, u64>,
    proposals: BTreeMap<u64, (BlockValue, i64)>,
    blocks: BTreeMap<BlockId, BlockValue>,
    pending: BTreeMap<(u64, Phase), Pending>,
    flags: RoundFlags,
    future: Vec<(usize, ProtocolMessage)>,
    catch_up: BTreeMap<BlockId, BTreeSet<usize>>,
    replied: BTreeSet<(usize, u64, u64, MsgKind)>,
    /// Signed votes for a value, by (kind, round, value).
    signed_votes: BTreeMap<(MsgKind, u64, BlockId), BTreeMap<usize, ProtocolMessage>>,
    /// Precommit quorum behind each decision, handed to lagging peers.
    certificates: BTreeMap<u64, Vec<ProtocolMessage>>,
}

pub fn node_salt(index: usize) -> u64 {
    0x5eed_0000_0000_0000 ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

impl ValidatorNode {
    pub fn new(index: usize, cfg: EngineConfig) -> Self {
        Self {
            id: ValidatorId::new(index),
            cs: ConsensusState::default(),
            polc: PoLC::default(),
            wal: WalState::default(),
            chain_tip: GENESIS_ID,
            corrupted: false,
            view: cfg.view.clone(),
            salt: node_salt(index),
            mempool: cfg.mempool.clone(),
            cfg,
            evicted: BTreeSet::new(),
            delta_extra: 0,
            down: false,
            waiting_sync: false,
            decision_rounds: BTreeMap::new(),
            proposals: BTreeMap::new(),
            blocks: BTreeMap::new(),
            pending: BTreeMap::new(),
            flags: RoundFlags::default(),
            future: Vec::new(),
            catch_up: BTreeMap::new(),
            replied: BTreeSet::new(),
            signed_votes: BTreeMap::new(),
            certificates: BTreeMap::new(),
        }
    }

    fn idx(&self) -> usize {
        self.id.index
    }

    pub fn proposer(&self, height: u64, round: u64) -> usize {
        self.view.proposer(height, round)
    }

    pub fn chain_height(&self) -> u64 {
        self.cs.decisions.keys().next_back().copied().unwrap_or(0)
    }

    pub fn decided(&self, height: u64) -> bool {
        self.cs.decisions.contains_key(&height)
    }

    fn tau(&self, round: u64) -> Tick {
        timeout_for(self.cs.phase, round, &self.cfg.params)
    }

    fn delta(&self) -> Tick {
        self.cfg.params.delta_exec + self.delta_extra
    }

    /// The action fits in the round: δ + σ ≤ τ.
    fn guard_ok(&self, sigma: Tick, round: u64) -> bool {
        self.delta() + sigma <= self.tau(round)
    }

    fn key(&self, slot: TimerSlot) -> TimerKey {
        TimerKey {
            height: self.cs.height,
            round: self.cs.round,
            node: self.idx(),
            slot,
        }
    }

    fn emit(&self, env: &mut dyn Env, kind: &'static str, payload: Value) {
        self.emit_note(env, kind, payload, "");
    }

    fn emit_note(&self, env: &mut dyn Env, kind: &'static str, payload: Value, note: &str) {
        env.trace(NodeEvent {
            node: self.idx(),
            kind,
            height: self.cs.height,
            round: self.cs.round,
            phase: Some(self.cs.phase),
            payload,
            note: note.to_string(),
        });
    }

    fn sleep(&self, env: &mut dyn Env, phase: Phase, round: u64) -> Tick {
        let sigma = env.sleep(self.idx(), self.cs.height, phase, round);
        self.emit(env, "sleep", json!({ "phase": phase, "sigma": sigma }));
        sigma
    }

    fn defer(&mut self, env: &mut dyn Env, phase: Phase, sigma: Tick, work: Pending) {
        self.pending.insert((self.cs.round, phase), work);
        env.start_timer(self.key(TimerSlot::Sigma(phase)), sigma);
    }

    // ---- heights and rounds ----------------------------------------------

    /// Starts the next height after the local chain.
    pub fn start(&mut self, env: &mut dyn Env) {
        let h = self.chain_height() + 1;
        self.begin_height(env, h, 0, None);
    }

    pub fn on_new_height(&mut self, env: &mut dyn Env, height: u64) {
        self.begin_height(env, height, 0, None);
    }

    fn begin_height(&mut self, env: &mut dyn Env, height: u64, round: u64, lock: Option<(u64, BlockValue)>) {
        self.cs.reset_for_height(height);
        self.polc.clear();
        self.proposals.clear();
        self.blocks.clear();
        self.pending.clear();
        self.catch_up.clear();
        self.signed_votes.clear();
        self.delta_extra = 0;
        self.waiting_sync = false;
        if let Some((r, v)) = lock {
            self.blocks.insert(v.id(), v.clone());
            self.polc.lock(height, r, v.id(), self.idx());
            self.cs.locked_value = Some(v.clone());
            self.cs.locked_round = r as i64;
            self.cs.valid_value = Some(v);
            self.cs.valid_round = r as i64;
        }
        self.emit(env, "new_height", json!({ "lockedRound": self.cs.locked_round }));
        self.on_new_round(env, round);
        self.drain_future(env);
    }

    pub fn on_new_round(&mut self, env: &mut dyn Env, round: u64) {
        env.cancel_timers(self.idx());
        self.pending.clear();
        self.flags = RoundFlags::default();
        self.cs.round = round;
        self.cs.phase = Phase::Propose;
        let proposer = self.proposer(self.cs.height, round);
        self.emit(env, "new_round", json!({ "proposer": proposer }));
        env.start_timer(self.key(TimerSlot::Phase(Phase::Propose)), self.tau(round));
        if proposer == self.idx() {
            let sigma = self.sleep(env, Phase::Propose, round);
            if !self.guard_ok(sigma, round) {
                let payload = json!({ "sigma": sigma, "delta": self.delta(), "tau": self.tau(round) });
                self.emit_note(env, "abandon", payload, "no proposal this round");
                self.cs.phase = Phase::Prevote;
            } else if sigma == 0 {
                self.propose(env);
            } else {
                self.defer(env, Phase::Propose, sigma, Pending::Propose);
            }
        } else {
            self.cs.phase = Phase::Prevote;
        }
        self.try_proposal(env);
        self.check_prevotes(env, round);
    }

    fn drain_future(&mut self, env: &mut dyn Env) {
        let buffered = std::mem::take(&mut self.future);
        for (from, msg) in buffered {
            self.on_message(env, from, msg);
        }
    }

    /// Called once per tick while waiting at the height barrier.
    pub fn poll_sync(&mut self, env: &mut dyn Env) {
        if self.waiting_sync && !self.down && env.sync_request_round(self.idx()) == 0 {
            self.waiting_sync = false;
            let h = self.cs.height + 1;
            self.emit(env, "switch", json!({ "to": h }));
            self.on_new_height(env, h);
        }
    }

    // ---- proposing ---------------------------------------------------------

    fn build_block(&self) -> BlockValue {
        let txs: Vec<TxId> = self.mempool.iter().take(self.cfg.block_size).copied().collect();
        BlockValue {
            height: self.cs.height,
            read_write_hash: exec_digest(&txs, self.salt),
            transactions: txs,
            prev_block_id: self.chain_tip,
            proposer_index: self.idx(),
        }
    }

    fn propose(&mut self, env: &mut dyn Env) {
        if self.flags.proposed {
            return;
        }
        self.flags.proposed = true;
        let exec = self.key(TimerSlot::Exec(Phase::Propose));
        env.start_timer(exec, self.cfg.params.delta_exec);
        let (block, vr) = match &self.cs.valid_value {
            Some(v) => (v.clone(), self.cs.valid_round),
            None => (self.build_block(), -1),
        };
        let mut msg = ProtocolMessage::proposal(self.cs.height, self.cs.round, block.clone(), vr, self.idx());
        env.sign(&mut msg);
        if vr >= 0 {
            let key = (MsgKind::Prevote, vr as u64, block.id());
            msg.justification = self.signed_votes.get(&key).map(|m| m.values().cloned().collect()).unwrap_or_default();
        }
        let txs: Vec<u64> = block.transactions.iter().map(|t| t.id).collect();
        self.emit(env, "propose", json!({ "value": block.id(), "validRound": vr, "txs": txs }));
        env.broadcast(msg);
        env.reset_timer(exec);
        self.cs.phase = Phase::Prevote;
    }

    // ---- message intake ----------------------------------------------------

    /// Entry point for an authenticated delivery from `from`.
    pub fn on_message(&mut self, env: &mut dyn Env, from: usize, msg: ProtocolMessage) {
        if self.down || self.corrupted {
            return;
        }
        if self.evicted.contains(&from) {
            self.emit_note(env, "drop", json!({ "from": from, "kind": msg.kind }), "evicted sender");
            return;
        }
        let identity = from == msg.sender
            && (msg.kind != MsgKind::Proposal
                || msg.height != self.cs.height
                || self.decided(msg.height)
                || msg.sender == self.proposer(msg.height, msg.round));
        let reason = if !identity {
            Some("identity")
        } else if msg.validate().is_err() {
            Some("malformed")
        } else if !env.verify(&msg) {
            Some("signature")
        } else {
            None
        };
        if let Some(reason) = reason {
            self.evict(env, from, reason);
            let current = msg.height == self.cs.height && msg.round == self.cs.round;
            if msg.kind == MsgKind::Proposal
                && current
                && from == self.proposer(msg.height, msg.round)
                && !self.decided(msg.height)
            {
                self.on_new_round(env, msg.round + 1);
            }
            return;
        }
        if msg.kind == MsgKind::Commit && msg.wildcard == CATCH_UP_TAG {
            self.on_catch_up(env, from, msg);
            return;
        }
        if msg.height < self.cs.height || (msg.height == self.cs.height && self.decided(msg.height)) {
            self.reply_catch_up(env, from, &msg);
            if msg.height < self.cs.height {
                self.emit(env, "stale", json!({ "from": from, "kind": msg.kind, "msgHeight": msg.height }));
            }
            return;
        }
        if msg.height > self.cs.height {
            self.future.push((from, msg));
            return;
        }
        if matches!(msg.kind, MsgKind::NewRound | MsgKind::NewHeight) {
            return;
        }
        if msg.round > self.cs.round {
            self.on_higher_round_message(env, &msg);
        }
        match msg.kind {
            MsgKind::Proposal => self.on_proposal(env, msg),
            MsgKind::Prevote => self.on_prevote(env, msg),
            MsgKind::Precommit => self.on_precommit(env, msg),
            MsgKind::Commit => self.on_commit_vote(env, msg),
            MsgKind::NewRound | MsgKind::NewHeight => {}
        }
    }

    fn evict(&mut self, env: &mut dyn Env, who: usize, reason: &str) {
        if self.evicted.insert(who) {
            self.emit_note(env, "evict", json!({ "validator": who }), reason);
        }
    }

    pub fn on_higher_round_message(&mut self, env: &mut dyn Env, msg: &ProtocolMessage) {
        let seen = self.cs.count_next_round.entry(msg.round).or_default();
        seen.insert(msg.sender);
        if seen.len() >= self.cfg.thresholds.round_skip {
            let from = self.cs.round;
            self.emit(env, "round_jump", json!({ "from": from, "to": msg.round }));
            self.on_new_round(env, msg.round);
        }
    }

    fn reply_catch_up(&mut self, env: &mut dyn Env, to: usize, msg: &ProtocolMessage) {
        let Some(block) = self.cs.decisions.get(&msg.height).cloned() else {
            return;
        };
        if to == self.idx() || !self.replied.insert((to, msg.height, msg.round, msg.kind)) {
            return;
        }
        let round = self.decision_rounds.get(&msg.height).copied().unwrap_or(0);
        let mut reply = ProtocolMessage::new(MsgKind::Commit, msg.height, round, Some(block.id()), self.idx());
        reply.block = Some(block);
        reply.wildcard = CATCH_UP_TAG.to_vec();
        env.sign(&mut reply);
        reply.justification = self.certificates.get(&msg.height).cloned().unwrap_or_default();
        self.emit(env, "catch_up_reply", json!({ "to": to, "msgHeight": msg.height }));
        env.send(to, reply);
    }

    fn on_catch_up(&mut self, env: &mut dyn Env, from: usize, msg: ProtocolMessage) {
        if msg.height != self.cs.height || self.decided(msg.height) {
            return;
        }
        let Some(block) = msg.block else { return };
        if Some(block.id()) != msg.value {
            self.evict(env, from, "catch-up block mismatch");
            return;
        }
        let id = block.id();
        let cert = self.verified_votes(env, &msg.justification, MsgKind::Precommit, msg.height, msg.round, id);
        if cert.len() >= self.cfg.thresholds.quorum {
            self.certificates.insert(msg.height, cert);
            self.finish_commit(env, block, msg.round, "certificate");
            return;
        }
        let senders = self.catch_up.entry(id).or_default();
        senders.insert(from);
        if senders.len() >= self.cfg.thresholds.round_skip {
            self.finish_commit(env, block, msg.round, "catch_up");
        }
    }

    // ---- proposal step ---------------------------------------------------

    pub fn on_proposal(&mut self, env: &mut dyn Env, msg: ProtocolMessage) {
        let Some(block) = msg.block.clone() else { return };
        let r = msg.round;
        if let Some((prev, _)) = self.proposals.get(&r) {
            if prev.id() != block.id() {
                let payload = json!({ "sender": msg.sender, "first": prev.id(), "second": block.id(), "kind": msg.kind });
                self.emit(env, "equivocation", payload);
            }
            return;
        }
        if msg.valid_round >= 0 {
            self.absorb_justification(env, &msg, block.id());
        }
        self.blocks.insert(block.id(), block.clone());
        self.proposals.insert(r, (block, msg.valid_round));
        self.try_proposal(env);
        self.check_prevotes(env, r);
        self.check_precommits(env, r);
        self.check_commits(env, r);
    }

    /// Keeps the forwarded prevotes that match the re-proposal and verify; the
    /// rest are ignored. A verified vote counts toward the proof of lock even
    /// when its sender also voted for something else.
    fn absorb_justification(&mut self, env: &mut dyn Env, msg: &ProtocolMessage, id: BlockId) {
        let vr = msg.valid_round as u64;
        for vote in self.verified_votes(env, &msg.justification, MsgKind::Prevote, msg.height, vr, id) {
            self.record_vote(env, &vote);
            self.keep_signed(vote);
        }
    }

    /// The votes of `kind` for `id` at (height, round) whose signatures check,
    /// one per sender.
    fn verified_votes(
        &self,
        env: &mut dyn Env,
        votes: &[ProtocolMessage],
        kind: MsgKind,
        height: u64,
        round: u64,
        id: BlockId,
    ) -> Vec<ProtocolMessage> {
        let mut senders = BTreeSet::new();
        votes
            .iter()
            .filter(|v| {
                v.kind == kind
                    && v.height == height
                    && v.round == round
                    && v.value == Some(id)
                    && v.sender < self.cfg.n
                    && v.justification.is_empty()
                    && env.verify(v)
                    && senders.insert(v.sender)
            })
            .cloned()
            .collect()
    }

    fn keep_signed(&mut self, vote: ProtocolMessage) {
        if let Some(id) = vote.value {
            self.signed_votes
                .entry((vote.kind, vote.round, id))
                .or_default()
                .entry(vote.sender)
                .or_insert(vote);
        }
    }

    fn signed_count(&self, kind: MsgKind, round: u64, id: BlockId) -> usize {
        self.signed_votes.get(&(kind, round, id)).map_or(0, BTreeMap::len)
    }

    fn try_proposal(&mut self, env: &mut dyn Env) {
        let r = self.cs.round;
        if self.cs.phase != Phase::Prevote
            || self.flags.prevoted
            || self.pending.contains_key(&(r, Phase::Prevote))
            || !self.proposals.contains_key(&r)
        {
            return;
        }
        let sigma = self.sleep(env, Phase::Prevote, r);
        if !self.guard_ok(sigma, r) {
            let payload = json!({ "sigma": sigma, "delta": self.delta(), "tau": self.tau(r) });
            self.emit_note(env, "abandon", payload, "prevote nil");
            self.prevote(env, None, Vec::new());
        } else if sigma == 0 {
            self.evaluate_proposal(env);
        } else {
            self.defer(env, Phase::Prevote, sigma, Pending::EvaluateProposal);
        }
    }

    /// Structural check, lock rule, then execution.
    fn evaluate_proposal(&mut self, env: &mut dyn Env) {
        let r = self.cs.round;
        let Some((block, vr)) = self.proposals.get(&r).cloned() else {
            return;
        };
        let id = block.id();
        if !structurally_valid(&block, self.chain_tip, self.cs.height) || block.proposer_index >= self.cfg.n {
            self.emit_note(env, "reject", json!({ "value": id }), "invalid block");
            self.prevote(env, None, Vec::new());
            return;
        }
        let locked_on_it = self.cs.locked_value.as_ref().map(BlockValue::id) == Some(id);
        let lock_ok = if vr < 0 {
            self.cs.locked_round < 0 || locked_on_it
        } else {
            let polc = self.signed_count(MsgKind::Prevote, vr as u64, id) >= self.cfg.thresholds.quorum;
            polc && (self.cs.locked_round <= vr || locked_on_it)
        };
        if !lock_ok {
            self.emit_note(env, "reject", json!({ "value": id, "validRound": vr }), "lock rule");
            self.prevote(env, None, Vec::new());
            return;
        }
        if exec_digest(&block.transactions, self.salt) != block.read_write_hash {
            let random = identify_random(&block.transactions, self.salt);
            self.prevote(env, None, random);
            return;
        }
        let record = WalRecord {
            round: r,
            proposal: block,
            locked: self.lock_snapshot(),
        };
        self.append_wal(env, record);
        self.prevote(env, Some(id), Vec::new());
    }

    fn lock_snapshot(&self) -> Option<(u64, BlockValue)> {
        let r = u64::try_from(self.cs.locked_round).ok()?;
        self.cs.locked_value.clone().map(|v| (r, v))
    }

    fn append_wal(&mut self, env: &mut dyn Env, record: WalRecord) {
        let round = record.round;
        match wal_append(&mut self.wal, record.entry()) {
            Ok(()) => self.emit(env, "wal", json!({ "op": "append", "walRound": round })),
            Err(e) => self.emit_note(env, "wal", json!({ "op": "append_failed" }), &e.to_string()),
        }
    }

    fn prevote(&mut self, env: &mut dyn Env, value: Option<BlockId>, random: Vec<TxId>) {
        if self.flags.prevoted {
            return;
        }
        self.flags.prevoted = true;
        env.reset_timer(self.key(TimerSlot::Grace));
        let r = self.cs.round;
        let mut msg = ProtocolMessage::vote(MsgKind::Prevote, self.cs.height, r, value, self.idx());
        msg.random_tx_ids = random;
        env.sign(&mut msg);
        let random_ids: Vec<u64> = msg.random_tx_ids.iter().map(|t| t.id).collect();
        self.emit(env, "prevote", json!({ "value": value, "randomTxIds": random_ids }));
        env.broadcast(msg);
        self.cs.phase = Phase::Precommit;
        self.check_prevotes(env, r);
    }

    // ---- prevote step ----------------------------------------------------

    pub fn on_prevote(&mut self, env: &mut dyn Env, msg: ProtocolMessage) {
        if !self.record_vote(env, &msg) {
            return;
        }
        self.keep_signed(msg.clone());
        if msg.value.is_none() && !msg.random_tx_ids.is_empty() {
            self.on_prevote_nil_random(env, &msg);
        }
        self.check_prevotes(env, msg.round);
    }

    /// Tallies a vote; false for duplicates and equivocations.
    fn record_vote(&mut self, env: &mut dyn Env, msg: &ProtocolMessage) -> bool {
        match self.cs.votes.add(msg.round, msg.kind, msg.sender, msg.value) {
            VoteAdd::New => true,
            VoteAdd::Duplicate => false,
            VoteAdd::Equivocation { first } => {
                let payload = json!({ "sender": msg.sender, "kind": msg.kind, "voteRound": msg.round, "first": first, "second": msg.value });
                self.emit(env, "equivocation", payload);
                false
            }
        }
    }

    pub fn on_prevote_nil_random(&mut self, env: &mut dyn Env, msg: &ProtocolMessage) {
        for tx in &msg.random_tx_ids {
            let reporters = self.cs.count_random.entry(*tx).or_default();
            reporters.insert(msg.sender);
            if reporters.len() >= self.cfg.thresholds.random_removal {
                let who: Vec<usize> = reporters.iter().copied().collect();
                self.cs.count_random.remove(tx);
                let present = self.mempool.contains(tx);
                self.mempool.retain(|t| t != tx);
                self.emit(env, "remove_tx", json!({ "tx": tx.id, "reporters": who, "present": present }));
            }
        }
    }

    fn check_prevotes(&mut self, env: &mut dyn Env, r: u64) {
        if r != self.cs.round || self.decided(self.cs.height) {
            return;
        }
        let q = self.cfg.thresholds.quorum;
        let waiting = self.cs.phase == Phase::Precommit
            && !self.flags.precommitted
            && !self.pending.contains_key(&(r, Phase::Precommit));
        match self.cs.votes.quorum_value(r, MsgKind::Prevote, q) {
            Some(Some(id)) => {
                let known = self.proposals.get(&r).filter(|(b, _)| b.id() == id).map(|(b, _)| b.clone());
                let Some(block) = known else { return };
                if self.cs.valid_round < r as i64 {
                    self.cs.valid_value = Some(block);
                    self.cs.valid_round = r as i64;
                }
                if waiting {
                    self.emit(env, "prevote_quorum", json!({ "value": id }));
                    let sigma = self.sleep(env, Phase::Precommit, r);
                    if !self.guard_ok(sigma, r) {
                        let payload = json!({ "sigma": sigma, "delta": self.delta(), "tau": self.tau(r) });
                        self.emit_note(env, "abandon", payload, "precommit nil");
                        self.precommit(env, None);
                    } else if sigma == 0 {
                        self.lock_and_precommit(env, id);
                    } else {
                        self.defer(env, Phase::Precommit, sigma, Pending::Lock(id));
                    }
                }
                return;
            }
            Some(None) if waiting => {
                self.emit(env, "prevote_quorum", json!({ "value": Value::Null }));
                if self.cfg.unlock_on_nil && self.cs.locked_round >= 0 {
                    self.cs.locked_value = None;
                    self.cs.locked_round = -1;
                    let n = self.polc.unlock_all(self.idx());
                    self.emit(env, "unlock", json!({ "records": n }));
                }
                self.precommit(env, None);
                return;
            }
            _ => {}
        }
        if waiting && !self.flags.prevote_wait && self.cs.votes.count_any(r, MsgKind::Prevote) >= q {
            self.flags.prevote_wait = true;
            env.start_timer(self.key(TimerSlot::Phase(Phase::Precommit)), self.tau(r));
        }
    }

    fn lock_and_precommit(&mut self, env: &mut dyn Env, id: BlockId) {
        let r = self.cs.round;
        let Some(block) = self.blocks.get(&id).cloned() else {
            return;
        };
        self.cs.locked_value = Some(block.clone());
        self.cs.locked_round = r as i64;
        self.cs.valid_value = Some(block.clone());
        self.cs.valid_round = r as i64;
        self.polc.lock(self.cs.height, r, id, self.idx());
        let record = WalRecord {
            round: r,
            proposal: block.clone(),
            locked: Some((r, block)),
        };
        self.append_wal(env, record);
        self.emit(env, "lock", json!({ "value": id }));
        self.precommit(env, Some(id));
    }

    fn precommit(&mut self, env: &mut dyn Env, value: Option<BlockId>) {
        if self.flags.precommitted {
            return;
        }
        self.flags.precommitted = true;
        let r = self.cs.round;
        let mut msg = ProtocolMessage::vote(MsgKind::Precommit, self.cs.height, r, value, self.idx());
        env.sign(&mut msg);
        self.emit(env, "precommit", json!({ "value": value }));
        env.broadcast(msg);
        self.cs.phase = Phase::Commit;
        self.check_precommits(env, r);
    }

    // ---- commit step -----------------------------------------------------

    pub fn on_precommit(&mut self, env: &mut dyn Env, msg: ProtocolMessage) {
        if self.record_vote(env, &msg) {
            let r = msg.round;
            self.keep_signed(msg);
            self.check_precommits(env, r);
        }
    }

    fn check_precommits(&mut self, env: &mut dyn Env, r: u64) {
        if self.decided(self.cs.height) {
            return;
        }
        let q = self.cfg.thresholds.quorum;
        match self.cs.votes.quorum_value(r, MsgKind::Precommit, q) {
            Some(Some(id)) => {
                let Some(block) = self.blocks.get(&id).cloned() else {
                    return;
                };
                let in_phase = r == self.cs.round && self.cs.phase == Phase::Commit;
                if !in_phase {
                    self.finish_commit(env, block, r, "precommit_quorum");
                    return;
                }
                if self.flags.commit_sent || self.pending.contains_key(&(r, Phase::Commit)) {
                    return;
                }
                let sigma = self.sleep(env, Phase::Commit, r);
                if !self.guard_ok(sigma, r) {
                    self.delta_extra += (r + 1) * self.cfg.params.delta;
                    let payload = json!({ "sigma": sigma, "delta": self.delta(), "tau": self.tau(r) });
                    self.emit_note(env, "abandon", payload, "commit guard; delta escalated");
                    self.on_new_round(env, r + 1);
                } else if sigma == 0 {
                    self.commit_step(env, id);
                } else {
                    self.defer(env, Phase::Commit, sigma, Pending::Decide(id));
                }
            }
            Some(None) if r == self.cs.round => {
                self.emit(env, "precommit_quorum", json!({ "value": Value::Null }));
                self.on_new_round(env, r + 1);
            }
            _ => {
                let waiting = r == self.cs.round && self.cs.phase == Phase::Commit && !self.flags.precommit_wait;
                if waiting && self.cs.votes.count_any(r, MsgKind::Precommit) >= q {
                    self.flags.precommit_wait = true;
                    env.start_timer(self.key(TimerSlot::Phase(Phase::Commit)), self.tau(r));
                }
            }
        }
    }

    fn commit_step(&mut self, env: &mut dyn Env, id: BlockId) {
        let r = self.cs.round;
        let Some(block) = self.blocks.get(&id).cloned() else {
            return;
        };
        match self.cfg.commit_scheme {
            CommitScheme::PrecommitQuorum => self.finish_commit(env, block, r, "precommit_quorum"),
            CommitScheme::ExplicitCommitVotes => {
                if self.flags.commit_sent {
                    return;
                }
                self.flags.commit_sent = true;
                let mut msg = ProtocolMessage::vote(MsgKind::Commit, self.cs.height, r, Some(id), self.idx());
                env.sign(&mut msg);
                self.emit(env, "commit", json!({ "value": id }));
                env.broadcast(msg);
                if !self.flags.precommit_wait {
                    self.flags.precommit_wait = true;
                    env.start_timer(self.key(TimerSlot::Phase(Phase::Commit)), self.tau(r));
                }
                self.check_commits(env, r);
            }
        }
    }

    fn on_commit_vote(&mut self, env: &mut dyn Env, msg: ProtocolMessage) {
        if self.record_vote(env, &msg) {
            self.check_commits(env, msg.round);
        }
    }

    fn check_commits(&mut self, env: &mut dyn Env, r: u64) {
        if self.decided(self.cs.height) {
            return;
        }
        let q = self.cfg.thresholds.quorum;
        if let Some(Some(id)) = self.cs.votes.quorum_value(r, MsgKind::Commit, q) {
            if let Some(block) = self.blocks.get(&id).cloned() {
                self.finish_commit(env, block, r, "commit_votes");
            }
        }
    }

    fn finish_commit(&mut self, env: &mut dyn Env, block: BlockValue, round: u64, via: &str) {
        let h = self.cs.height;
        let id = block.id();
        if self.cs.record_decision(h, block.clone()).is_err() {
            self.emit(env, "double_decide", json!({ "value": id }));
            return;
        }
        self.decision_rounds.insert(h, round);
        if let Some(cert) = self.signed_votes.get(&(MsgKind::Precommit, round, id)) {
            if cert.len() >= self.cfg.thresholds.quorum {
                let cert = cert.values().cloned().collect();
                self.certificates.entry(h).or_insert(cert);
            }
        }
        self.chain_tip = id;
        self.mempool.retain(|tx| !block.transactions.contains(tx));
        self.view.advance(&block, round);
        env.cancel_timers(self.idx());
        self.pending.clear();
        self.emit_note(env, "decide", json!({ "value": id, "decisionRound": round, "block": block }), via);
        self.announce(env, h, round, block);
        if env.sync_round_ok(self.idx()) {
            self.emit(env, "switch", json!({ "to": h + 1 }));
            self.on_new_height(env, h + 1);
        } else {
            self.waiting_sync = true;
        }
    }

    /// Broadcasts the decision with its certificate so peers that missed the
    /// quorum can still decide.
    fn announce(&mut self, env: &mut dyn Env, height: u64, round: u64, block: BlockValue) {
        let Some(cert) = self.certificates.get(&height).cloned() else {
            return;
        };
        let mut msg = ProtocolMessage::new(MsgKind::Commit, height, round, Some(block.id()), self.idx());
        msg.block = Some(block);
        msg.wildcard = CATCH_UP_TAG.to_vec();
        env.sign(&mut msg);
        msg.justification = cert;
        env.broadcast(msg);
    }

    // ---- timers ----------------------------------------------------------

    pub fn on_timer(&mut self, env: &mut dyn Env, key: TimerKey) {
        if self.down || key.height != self.cs.height || key.round != self.cs.round || self.decided(key.height) {
            return;
        }
        let r = self.cs.round;
        match key.slot {
            TimerSlot::Phase(Phase::Propose) => {
                if self.cs.phase == Phase::Propose {
                    self.cs.phase = Phase::Prevote;
                }
                if !self.flags.prevoted && !self.pending.contains_key(&(r, Phase::Prevote)) && !self.flags.grace {
                    self.flags.grace = true;
                    env.start_timer(self.key(TimerSlot::Grace), self.cfg.params.delta);
                }
            }
            TimerSlot::Grace => {
                if !self.flags.prevoted && !self.pending.contains_key(&(r, Phase::Prevote)) {
                    self.emit_note(env, "timeout", json!({ "slot": "grace" }), "no proposal");
                    self.prevote(env, None, Vec::new());
                }
            }
            TimerSlot::Phase(Phase::Prevote | Phase::Precommit) => {
                if !self.flags.precommitted && !self.pending.contains_key(&(r, Phase::Precommit)) {
                    self.emit_note(env, "timeout", json!({ "slot": "prevote_wait" }), "no prevote quorum");
                    self.precommit(env, None);
                }
            }
            TimerSlot::Phase(Phase::Commit) => {
                self.emit_note(env, "timeout", json!({ "slot": "precommit_wait" }), "no decision");
                self.on_new_round(env, r + 1);
            }
            TimerSlot::Sigma(phase) => {
                if let Some(work) = self.pending.remove(&(r, phase)) {
                    self.emit(env, "wake", json!({ "phase": phase }));
                    match work {
                        Pending::Propose => self.propose(env),
                        Pending::EvaluateProposal => self.evaluate_proposal(env),
                        Pending::Lock(id) => self.lock_and_precommit(env, id),
                        Pending::Decide(id) => self.commit_step(env, id),
                    }
                }
            }
            TimerSlot::Exec(_) => {}
        }
    }

    // ---- crash and restart -----------------------------------------------

    /// Loses everything but the chain, the WAL and the mempool.
    pub fn crash(&mut self) {
        let decisions = std::mem::take(&mut self.cs.decisions);
        self.cs = ConsensusState {
            decisions,
            ..ConsensusState::default()
        };
        self.polc.clear();
        self.proposals.clear();
        self.blocks.clear();
        self.pending.clear();
        self.future.clear();
        self.catch_up.clear();
        self.signed_votes.clear();
        self.replied.clear();
        self.evicted.clear();
        self.flags = RoundFlags::default();
        self.delta_extra = 0;
        self.waiting_sync = false;
        self.down = true;
    }

    /// Resumes from the WAL and announces the resumed round.
    pub fn restart(&mut self, env: &mut dyn Env) -> ReplyWal {
        self.down = false;
        let chain_h = self.chain_height();
        let outcome = reply_wal(&self.wal, chain_h);
        self.emit(env, "wal", json!({ "op": "replay", "outcome": outcome.label(), "chainHeight": chain_h }));
        match &outcome {
            ReplyWal::EnterPrecommit(rec) => {
                let h = rec.proposal.height;
                self.begin_height(env, h, rec.round + 1, rec.locked.clone());
            }
            ReplyWal::WalRestored { height, .. } => self.begin_height(env, height + 1, 0, None),
            ReplyWal::Error(_) => self.begin_height(env, chain_h + 1, 0, None),
        }
        let mut hello = ProtocolMessage::new(MsgKind::NewRound, self.cs.height, self.cs.round, None, self.idx());
        env.sign(&mut hello);
        env.broadcast(hello);
        outcome
    }
}
