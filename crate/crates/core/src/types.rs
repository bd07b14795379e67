//! Domain types shared by every layer: validators, transactions, blocks,
//! protocol messages, vote books and the per-validator consensus state.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Logical time unit of the simulator.
pub type Tick = u64;

/// 64-bit content digest of a [`BlockValue`].
pub type BlockId = u64;

/// Parent id used by the first block of the chain.
pub const GENESIS_ID: BlockId = 0;

/// Errors raised by the core types.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeError {
    /// A decision was already recorded for this height.
    #[error("decision for height {height} is already recorded")]
    DecisionOverwrite { height: u64 },
    /// A message violates its structural invariants.
    #[error("malformed message: {0}")]
    MalformedMessage(&'static str),
    /// Canonical bytes could not be decoded.
    #[error("cannot decode canonical bytes: {0}")]
    Decode(&'static str),
    /// Time parameters are inconsistent.
    #[error("invalid time parameters: {0}")]
    TimeParams(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ValidatorId {
    pub index: usize,
    pub name: String,
}

impl ValidatorId {
    pub fn new(index: usize) -> Self {
        Self {
            index,
            name: format!("v{index}"),
        }
    }
}

/// Largest fault count tolerated by `n` validators.
pub fn max_faults(n: usize) -> usize {
    n.saturating_sub(1) / 3
}

/// Vote thresholds derived from a single fault bound so they cannot drift apart.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub f: usize,
    /// Matching votes needed to lock or decide.
    pub quorum: usize,
    /// Distinct senders at a higher round that trigger a round jump.
    pub round_skip: usize,
    /// Distinct nil-prevote reports that remove a nondeterministic transaction.
    pub random_removal: usize,
}

impl Thresholds {
    pub fn from_f(f: usize) -> Self {
        Self {
            f,
            quorum: 2 * f + 1,
            round_skip: f + 1,
            random_removal: f + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidatorSet {
    pub members: Vec<ValidatorId>,
    pub stakes: Vec<u64>,
    /// Assumed Byzantine bound.
    pub f: usize,
}

impl ValidatorSet {
    /// `n` unit-stake validators. `f` defaults to the largest tolerable bound.
    pub fn new(n: usize, f: Option<usize>) -> Self {
        Self {
            members: (0..n).map(ValidatorId::new).collect(),
            stakes: vec![1; n],
            f: f.unwrap_or_else(|| max_faults(n)),
        }
    }

    pub fn with_stakes(stakes: Vec<u64>, f: Option<usize>) -> Self {
        let mut set = Self::new(stakes.len(), f);
        set.stakes = stakes;
        set
    }

    pub fn n(&self) -> usize {
        self.members.len()
    }

    /// False for sets with `n < 3f + 1`; such sets are constructible but carry
    /// no liveness or safety guarantee.
    pub fn satisfies_fault_bound(&self) -> bool {
        self.n() > 3 * self.f
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds::from_f(self.f)
    }

    pub fn position(&self, id: &ValidatorId) -> Option<usize> {
        self.members.iter().position(|m| m == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TxId {
    pub id: u64,
    #[serde(rename = "isRandom")]
    pub is_random: bool,
}

impl TxId {
    pub fn new(id: u64) -> Self {
        Self {
            id,
            is_random: false,
        }
    }

    pub fn random(id: u64) -> Self {
        Self {
            id,
            is_random: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BlockValue {
    pub height: u64,
    pub transactions: Vec<TxId>,
    /// Digest the proposer obtained by executing the transactions.
    pub read_write_hash: u64,
    pub prev_block_id: BlockId,
    pub proposer_index: usize,
}

impl BlockValue {
    pub fn id(&self) -> BlockId {
        block_id(self)
    }
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    bytes.iter().fold(OFFSET, |h, b| (h ^ u64::from(*b)).wrapping_mul(PRIME))
}

/// Canonical little-endian writer: fixed-width integers, length-prefixed lists.
#[derive(Default)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }
    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }
    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }
    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.u64(v.len() as u64);
        self.buf.extend_from_slice(v);
        self
    }
    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Reader matching [`Encoder`].
pub struct Decoder<'a> {
    buf: &'a [u8],
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], TypeError> {
        if self.buf.len() < n {
            return Err(TypeError::Decode("truncated input"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    pub fn u8(&mut self) -> Result<u8, TypeError> {
        Ok(self.take(1)?[0])
    }
    pub fn u64(&mut self) -> Result<u64, TypeError> {
        let mut b = [0u8; 8];
        b.copy_from_slice(self.take(8)?);
        Ok(u64::from_le_bytes(b))
    }
    pub fn i64(&mut self) -> Result<i64, TypeError> {
        Ok(self.u64()? as i64)
    }
    pub fn bytes(&mut self) -> Result<&'a [u8], TypeError> {
        let len = self.u64()?;
        let len = usize::try_from(len).map_err(|_| TypeError::Decode("length overflow"))?;
        self.take(len)
    }
    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }
}

pub fn encode_block_into(enc: &mut Encoder, v: &BlockValue) {
    enc.u64(v.height);
    enc.u64(v.transactions.len() as u64);
    for tx in &v.transactions {
        enc.u64(tx.id).u8(u8::from(tx.is_random));
    }
    enc.u64(v.read_write_hash)
        .u64(v.prev_block_id)
        .u64(v.proposer_index as u64);
}

pub fn encode_block(v: &BlockValue) -> Vec<u8> {
    let mut enc = Encoder::new();
    encode_block_into(&mut enc, v);
    enc.finish()
}

pub fn decode_block_from(dec: &mut Decoder<'_>) -> Result<BlockValue, TypeError> {
    let height = dec.u64()?;
    let count = dec.u64()?;
    let mut transactions = Vec::new();
    for _ in 0..count {
        let id = dec.u64()?;
        let flag = dec.u8()?;
        if flag > 1 {
            return Err(TypeError::Decode("bad transaction flag"));
        }
        transactions.push(TxId {
            id,
            is_random: flag == 1,
        });
    }
    Ok(BlockValue {
        height,
        transactions,
        read_write_hash: dec.u64()?,
        prev_block_id: dec.u64()?,
        proposer_index: dec.u64()? as usize,
    })
}

pub fn decode_block(bytes: &[u8]) -> Result<BlockValue, TypeError> {
    let mut dec = Decoder::new(bytes);
    let v = decode_block_from(&mut dec)?;
    if !dec.is_empty() {
        return Err(TypeError::Decode("trailing bytes"));
    }
    Ok(v)
}

/// Content id of a block: FNV-1a over its canonical encoding.
pub fn block_id(v: &BlockValue) -> BlockId {
    fnv1a64(&encode_block(v))
}

/// Execution digest of one transaction. Nondeterministic transactions mix in
/// the executor's salt, so two executors disagree on them.
pub fn tx_digest(tx: &TxId, salt: u64) -> u64 {
    let mut enc = Encoder::new();
    enc.u64(tx.id).u8(u8::from(tx.is_random));
    if tx.is_random {
        enc.u64(salt);
    }
    fnv1a64(&enc.finish())
}

/// Read/write digest obtained by executing `txs` in order.
pub fn exec_digest(txs: &[TxId], salt: u64) -> u64 {
    let mut enc = Encoder::new();
    enc.u64(txs.len() as u64);
    for tx in txs {
        enc.u64(tx_digest(tx, salt));
    }
    fnv1a64(&enc.finish())
}

/// Transactions whose effect changes between two executions with different salts.
pub fn identify_random(txs: &[TxId], salt: u64) -> Vec<TxId> {
    const PROBE: u64 = 0x9e37_79b9_7f4a_7c15;
    txs.iter()
        .filter(|tx| tx_digest(tx, salt) != tx_digest(tx, salt ^ PROBE))
        .copied()
        .collect()
}

/// Height and parent linkage only.
pub fn structurally_valid(v: &BlockValue, chain_tip: BlockId, expected_height: u64) -> bool {
    v.height == expected_height && v.prev_block_id == chain_tip
}

/// Full validity: linkage plus a matching re-execution digest under `salt`.
pub fn valid(v: &BlockValue, chain_tip: BlockId, expected_height: u64, salt: u64) -> bool {
    structurally_valid(v, chain_tip, expected_height)
        && exec_digest(&v.transactions, salt) == v.read_write_hash
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgKind {
    Proposal,
    Prevote,
    Precommit,
    Commit,
    NewRound,
    NewHeight,
}

impl MsgKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MsgKind::Proposal => "PROPOSAL",
            MsgKind::Prevote => "PREVOTE",
            MsgKind::Precommit => "PRECOMMIT",
            MsgKind::Commit => "COMMIT",
            MsgKind::NewRound => "NEWROUND",
            MsgKind::NewHeight => "NEWHEIGHT",
        }
    }

    fn code(self) -> u8 {
        match self {
            MsgKind::Proposal => 0,
            MsgKind::Prevote => 1,
            MsgKind::Precommit => 2,
            MsgKind::Commit => 3,
            MsgKind::NewRound => 4,
            MsgKind::NewHeight => 5,
        }
    }

    pub fn is_vote(self) -> bool {
        matches!(self, MsgKind::Prevote | MsgKind::Precommit | MsgKind::Commit)
    }
}

impl fmt::Display for MsgKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Opaque signature token issued by the signature service.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SigToken(pub u64);

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProtocolMessage {
    pub kind: MsgKind,
    pub height: u64,
    pub round: u64,
    /// Block id, or `None` for nil.
    pub value: Option<BlockId>,
    /// Round of the proof of lock behind a re-proposal, `-1` when absent.
    pub valid_round: i64,
    /// Nondeterministic transactions reported by a nil prevote.
    pub random_tx_ids: Vec<TxId>,
    pub sender: usize,
    pub sig: SigToken,
    /// Full block; carried by proposals and by decision catch-up replies.
    pub block: Option<BlockValue>,
    pub wildcard: Vec<u8>,
    /// Signed votes backing the message: the prevotes behind a re-proposal's
    /// valid round, or the precommits behind a decision. Each vote carries its
    /// own signature, so the list is not covered by the sender's.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub justification: Vec<ProtocolMessage>,
}

impl ProtocolMessage {
    pub fn new(kind: MsgKind, height: u64, round: u64, value: Option<BlockId>, sender: usize) -> Self {
        Self {
            kind,
            height,
            round,
            value,
            valid_round: -1,
            random_tx_ids: Vec::new(),
            sender,
            sig: SigToken::default(),
            block: None,
            wildcard: Vec::new(),
            justification: Vec::new(),
        }
    }

    pub fn proposal(height: u64, round: u64, block: BlockValue, valid_round: i64, sender: usize) -> Self {
        let mut m = Self::new(MsgKind::Proposal, height, round, Some(block.id()), sender);
        m.valid_round = valid_round;
        m.block = Some(block);
        m
    }

    pub fn vote(kind: MsgKind, height: u64, round: u64, value: Option<BlockId>, sender: usize) -> Self {
        Self::new(kind, height, round, value, sender)
    }

    /// Canonical bytes covered by the signature (everything except the token).
    pub fn sign_bytes(&self) -> Vec<u8> {
        let mut enc = Encoder::new();
        enc.u8(self.kind.code()).u64(self.height).u64(self.round);
        match self.value {
            Some(id) => enc.u8(1).u64(id),
            None => enc.u8(0),
        };
        enc.i64(self.valid_round);
        enc.u64(self.random_tx_ids.len() as u64);
        for tx in &self.random_tx_ids {
            enc.u64(tx.id).u8(u8::from(tx.is_random));
        }
        enc.u64(self.sender as u64);
        match &self.block {
            Some(b) => {
                enc.u8(1);
                encode_block_into(&mut enc, b);
            }
            None => {
                enc.u8(0);
            }
        }
        enc.bytes(&self.wildcard);
        enc.finish()
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.valid_round >= 0 && self.valid_round as u64 >= self.round {
            return Err(TypeError::MalformedMessage("validRound must precede round"));
        }
        if !self.random_tx_ids.is_empty() && !(self.kind == MsgKind::Prevote && self.value.is_none()) {
            return Err(TypeError::MalformedMessage("random transaction ids only ride on nil prevotes"));
        }
        let may_justify = (self.kind == MsgKind::Proposal && self.valid_round >= 0) || self.kind == MsgKind::Commit;
        if !self.justification.is_empty() && !may_justify {
            return Err(TypeError::MalformedMessage("only re-proposals and commits carry a justification"));
        }
        if self.kind == MsgKind::Proposal {
            match (&self.block, self.value) {
                (Some(b), Some(id)) if b.id() == id && b.height == self.height => {}
                _ => return Err(TypeError::MalformedMessage("proposal must carry its block")),
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Propose,
    Prevote,
    Precommit,
    Commit,
}

impl Phase {
    pub const ALL: [Phase; 4] = [Phase::Propose, Phase::Prevote, Phase::Precommit, Phase::Commit];

    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Propose => "propose",
            Phase::Prevote => "prevote",
            Phase::Precommit => "precommit",
            Phase::Commit => "commit",
        }
    }

    pub fn parse(s: &str) -> Option<Phase> {
        Phase::ALL.into_iter().find(|p| p.as_str() == s)
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Timing parameters, all in ticks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TimeParams {
    /// Post-GST one-way delay bound.
    pub delta: Tick,
    /// Normal execution time per phase.
    pub delta_exec: Tick,
    pub tau_init: Tick,
    pub tau_step: Tick,
    pub gst: Tick,
    pub pre_gst_cap: Tick,
}

impl TimeParams {
    /// Defaults: execution time Δ/2, timeouts (1 + r)Δ, pre-GST cap 10Δ.
    pub fn with_delta(delta: Tick) -> Self {
        Self {
            delta,
            delta_exec: delta / 2,
            tau_init: delta,
            tau_step: delta,
            gst: 0,
            pre_gst_cap: 10 * delta,
        }
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        if self.delta_exec > self.tau_init {
            return Err(TypeError::TimeParams("deltaExec must not exceed tauInit"));
        }
        if self.pre_gst_cap < self.delta {
            return Err(TypeError::TimeParams("preGstCap must be at least delta"));
        }
        Ok(())
    }

    /// Phase timeout of `round`.
    pub fn timeout(&self, round: u64) -> Tick {
        self.tau_init + round * self.tau_step
    }
}

/// Result of adding one vote to a [`VoteBook`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VoteAdd {
    New,
    Duplicate,
    /// The sender already voted for `first` in this (round, kind).
    Equivocation { first: Option<BlockId> },
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoundVotes {
    pub by_sender: BTreeMap<usize, Option<BlockId>>,
    pub tally: BTreeMap<Option<BlockId>, BTreeSet<usize>>,
}

/// Votes of one height keyed by (round, kind); each sender counts once.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VoteBook {
    rounds: BTreeMap<(u64, MsgKind), RoundVotes>,
}

impl VoteBook {
    pub fn add(&mut self, round: u64, kind: MsgKind, sender: usize, value: Option<BlockId>) -> VoteAdd {
        let rv = self.rounds.entry((round, kind)).or_default();
        match rv.by_sender.get(&sender) {
            Some(prev) if *prev == value => VoteAdd::Duplicate,
            Some(prev) => VoteAdd::Equivocation { first: *prev },
            None => {
                rv.by_sender.insert(sender, value);
                rv.tally.entry(value).or_default().insert(sender);
                VoteAdd::New
            }
        }
    }

    pub fn count(&self, round: u64, kind: MsgKind, value: Option<BlockId>) -> usize {
        self.rounds
            .get(&(round, kind))
            .and_then(|rv| rv.tally.get(&value))
            .map_or(0, BTreeSet::len)
    }

    pub fn count_any(&self, round: u64, kind: MsgKind) -> usize {
        self.rounds.get(&(round, kind)).map_or(0, |rv| rv.by_sender.len())
    }

    pub fn voters(&self, round: u64, kind: MsgKind, value: Option<BlockId>) -> BTreeSet<usize> {
        self.rounds
            .get(&(round, kind))
            .and_then(|rv| rv.tally.get(&value))
            .cloned()
            .unwrap_or_default()
    }

    /// A value (possibly nil) that reached `quorum` matching votes.
    pub fn quorum_value(&self, round: u64, kind: MsgKind, quorum: usize) -> Option<Option<BlockId>> {
        let rv = self.rounds.get(&(round, kind))?;
        rv.tally
            .iter()
            .find(|(_, senders)| senders.len() >= quorum)
            .map(|(v, _)| *v)
    }

    /// Rounds holding at least one vote of `kind`.
    pub fn rounds_with(&self, kind: MsgKind) -> Vec<u64> {
        self.rounds
            .keys()
            .filter(|(_, k)| *k == kind)
            .map(|(r, _)| *r)
            .collect()
    }

    pub fn clear(&mut self) {
        self.rounds.clear();
    }
}

/// Volatile consensus state of one validator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsensusState {
    pub height: u64,
    pub round: u64,
    pub phase: Phase,
    pub locked_value: Option<BlockValue>,
    pub locked_round: i64,
    pub valid_value: Option<BlockValue>,
    pub valid_round: i64,
    pub votes: VoteBook,
    /// Distinct senders seen per higher round of the current height.
    pub count_next_round: BTreeMap<u64, BTreeSet<usize>>,
    /// Distinct reporters per nondeterministic transaction.
    pub count_random: BTreeMap<TxId, BTreeSet<usize>>,
    pub decisions: BTreeMap<u64, BlockValue>,
}

impl Default for ConsensusState {
    fn default() -> Self {
        Self {
            height: 1,
            round: 0,
            phase: Phase::Propose,
            locked_value: None,
            locked_round: -1,
            valid_value: None,
            valid_round: -1,
            votes: VoteBook::default(),
            count_next_round: BTreeMap::new(),
            count_random: BTreeMap::new(),
            decisions: BTreeMap::new(),
        }
    }
}

impl ConsensusState {
    pub fn count_prevote(&self, round: u64, value: Option<BlockId>) -> usize {
        self.votes.count(round, MsgKind::Prevote, value)
    }

    pub fn count_precommit(&self, round: u64, value: Option<BlockId>) -> usize {
        self.votes.count(round, MsgKind::Precommit, value)
    }

    pub fn count_commit(&self, round: u64, value: Option<BlockId>) -> usize {
        self.votes.count(round, MsgKind::Commit, value)
    }

    /// Decisions are write-once per height.
    pub fn record_decision(&mut self, height: u64, v: BlockValue) -> Result<(), TypeError> {
        if self.decisions.contains_key(&height) {
            return Err(TypeError::DecisionOverwrite { height });
        }
        self.decisions.insert(height, v);
        Ok(())
    }

    /// Clears everything scoped to one height, keeping decisions.
    pub fn reset_for_height(&mut self, height: u64) {
        let decisions = std::mem::take(&mut self.decisions);
        *self = Self {
            height,
            decisions,
            ..Self::default()
        };
    }
}
