//! Static corruption, per-phase delay injection through the sleep hook, and
//! the Byzantine driver that speaks for corrupted validators.
//!
//! The driver only sees what the network reveals: messages at send time,
//! round entries and decisions. It never reads honest validators' state.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{node_salt, ProposerView};
use crate::types::{exec_digest, BlockId, BlockValue, MsgKind, Phase, ProtocolMessage, Tick, TimeParams, TxId, GENESIS_ID};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    HonestAll,
    DelayProposer,
    WithholdVotes,
    DelayAndWithhold,
    WorstCaseFRounds,
    CustomScript,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::HonestAll,
        Strategy::DelayProposer,
        Strategy::WithholdVotes,
        Strategy::DelayAndWithhold,
        Strategy::WorstCaseFRounds,
        Strategy::CustomScript,
    ];
}

/// One σ rule; absent matchers match anything. The first matching rule wins.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SigmaRule {
    #[serde(default)]
    pub node: Option<usize>,
    #[serde(default)]
    pub phase: Option<Phase>,
    #[serde(default)]
    pub round: Option<u64>,
    pub sigma: Tick,
}

impl SigmaRule {
    fn matches(&self, node: usize, phase: Phase, round: u64) -> bool {
        self.node.is_none_or(|n| n == node)
            && self.phase.is_none_or(|p| p == phase)
            && self.round.is_none_or(|r| r == round)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposeMode {
    #[default]
    Valid,
    Withhold,
    /// Different blocks to different halves of the honest set.
    Equivocate,
    /// A block that fails validation.
    Conflicting,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    #[default]
    Follow,
    Withhold,
    /// Both the observed value and nil in the same step.
    Equivocate,
    Nil,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Behavior {
    #[serde(default)]
    pub propose: ProposeMode,
    #[serde(default)]
    pub vote: VoteMode,
    /// Also emit a vote claiming to come from an honest validator.
    #[serde(default)]
    pub forge: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreGstPolicy {
    /// Uniform in [0, preGstCap].
    #[default]
    Uniform,
    /// Always the cap.
    Max,
}

/// Per-message delay overrides keyed by the harness's message id.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DelayPlan {
    #[serde(default)]
    pub per_message: BTreeMap<u64, Tick>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AdversaryConfig {
    #[serde(default)]
    pub corrupted: Vec<usize>,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub sigma: Vec<SigmaRule>,
    /// Overrides the strategy's default behavior of corrupted validators.
    #[serde(default)]
    pub behavior: Option<Behavior>,
    /// Rounds whose proposer is delayed past the timeout; strategy default when absent.
    #[serde(default)]
    pub kill_rounds: Option<u64>,
    #[serde(default)]
    pub strict: bool,
    #[serde(default)]
    pub pre_gst_policy: PreGstPolicy,
    #[serde(default)]
    pub delay_plan: DelayPlan,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AdversaryError {
    #[error("corrupting validator {node} exceeds the budget of {bound}")]
    CorruptionBudgetExceeded { node: usize, bound: usize },
    #[error("validator {0} is not in the validator set")]
    UnknownValidator(usize),
}

/// Smallest σ that violates δ + σ ≤ τ, never below τ itself.
pub fn kill_sigma(round: u64, params: &TimeParams) -> Tick {
    let tau = params.timeout(round);
    tau.max((tau + 1).saturating_sub(params.delta_exec))
}

impl AdversaryConfig {
    pub fn behavior(&self) -> Behavior {
        if let Some(b) = self.behavior {
            return b;
        }
        let silent = Behavior {
            propose: ProposeMode::Withhold,
            vote: VoteMode::Withhold,
            forge: false,
        };
        match self.strategy {
            Strategy::WithholdVotes => Behavior {
                vote: VoteMode::Withhold,
                ..Behavior::default()
            },
            Strategy::DelayAndWithhold | Strategy::WorstCaseFRounds => silent,
            _ => Behavior::default(),
        }
    }

    /// Proposer rounds the strategy kills.
    pub fn kill_rounds(&self, f: usize) -> u64 {
        self.kill_rounds.unwrap_or(match self.strategy {
            Strategy::DelayProposer | Strategy::DelayAndWithhold => 1,
            Strategy::WorstCaseFRounds => f as u64 + 1,
            _ => 0,
        })
    }

    /// Answer to a Sleep query. `is_proposer` marks the proposer context of
    /// the propose phase.
    pub fn on_sleep(&self, node: usize, phase: Phase, round: u64, is_proposer: bool, f: usize, params: &TimeParams) -> Tick {
        if let Some(rule) = self.sigma.iter().find(|r| r.matches(node, phase, round)) {
            return rule.sigma;
        }
        match self.strategy {
            Strategy::DelayProposer | Strategy::DelayAndWithhold | Strategy::WorstCaseFRounds
                if is_proposer && phase == Phase::Propose && round < self.kill_rounds(f) =>
            {
                kill_sigma(round, params)
            }
            _ => 0,
        }
    }

    /// Marks `node` corrupted. Outside strict mode the budget is advisory.
    pub fn corrupt(&mut self, node: usize, n: usize, bound: usize) -> Result<(), AdversaryError> {
        if node >= n {
            return Err(AdversaryError::UnknownValidator(node));
        }
        if self.corrupted.contains(&node) {
            return Ok(());
        }
        if self.strict && self.corrupted.len() + 1 > bound {
            return Err(AdversaryError::CorruptionBudgetExceeded { node, bound });
        }
        self.corrupted.push(node);
        Ok(())
    }

    /// Corrupted set with strategy defaults applied: the worst case silences
    /// the proposers of rounds 0..f of the first height.
    pub fn resolved_corrupted(&self, f: usize, view: &ProposerView) -> Vec<usize> {
        if self.corrupted.is_empty() && self.strategy == Strategy::WorstCaseFRounds {
            let mut set: Vec<usize> = (0..f as u64).map(|r| view.proposer(1, r)).collect();
            set.sort_unstable();
            set.dedup();
            return set;
        }
        let mut set = self.corrupted.clone();
        set.sort_unstable();
        set.dedup();
        set
    }
}

/// A corrupted validator's step, due at a tick.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Wake {
    pub node: usize,
    pub height: u64,
    pub round: u64,
    pub phase: Phase,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Plan {
    At { tick: Tick, wake: Wake, sigma: Tick },
    /// δ + σ > τ: the step is dropped.
    Suppressed { wake: Wake, sigma: Tick },
}

/// A message a corrupted validator emits. `to` is `None` for a broadcast.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Outgoing {
    pub from: usize,
    pub to: Option<usize>,
    pub msg: ProtocolMessage,
    /// Claims an honest sender; signing cannot make it verify.
    pub forged: bool,
}

/// Observable side effects of a wake, for the trace.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WakeResult {
    pub out: Vec<Outgoing>,
    pub leaked: Option<BlockId>,
}

#[derive(Clone, Debug)]
pub struct Adversary {
    pub cfg: AdversaryConfig,
    pub corrupted: BTreeSet<usize>,
    behavior: Behavior,
    n: usize,
    f: usize,
    quorum: usize,
    params: TimeParams,
    view: ProposerView,
    tip: BlockId,
    mempool: Vec<TxId>,
    block_size: usize,
    decided: BTreeSet<u64>,
    epochs: BTreeSet<(u64, u64)>,
    planned: BTreeSet<Wake>,
    proposals: BTreeMap<(u64, u64), BlockValue>,
    prevotes: BTreeMap<(u64, u64), BTreeMap<usize, Option<BlockId>>>,
}

impl Adversary {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cfg: AdversaryConfig,
        corrupted: Vec<usize>,
        n: usize,
        f: usize,
        params: TimeParams,
        view: ProposerView,
        mempool: Vec<TxId>,
        block_size: usize,
    ) -> Self {
        Self {
            behavior: cfg.behavior(),
            cfg,
            corrupted: corrupted.into_iter().collect(),
            n,
            f,
            quorum: 2 * f + 1,
            params,
            view,
            tip: GENESIS_ID,
            mempool,
            block_size,
            decided: BTreeSet::new(),
            epochs: BTreeSet::new(),
            planned: BTreeSet::new(),
            proposals: BTreeMap::new(),
            prevotes: BTreeMap::new(),
        }
    }

    pub fn is_corrupted(&self, node: usize) -> bool {
        self.corrupted.contains(&node)
    }

    pub fn behavior(&self) -> Behavior {
        self.behavior
    }

    pub fn sleep(&self, node: usize, phase: Phase, round: u64, height: u64) -> Tick {
        let is_proposer = phase == Phase::Propose && self.view_proposer(height, round) == Some(node);
        self.cfg.on_sleep(node, phase, round, is_proposer, self.f, &self.params)
    }

    fn view_proposer(&self, height: u64, round: u64) -> Option<usize> {
        // Only meaningful once the chain below `height` is known.
        (self.decided.len() as u64 + 1 >= height).then(|| self.view.proposer(height, round))
    }

    fn plan(&mut self, now: Tick, wake: Wake) -> Option<Plan> {
        if !self.planned.insert(wake) {
            return None;
        }
        let sigma = self.sleep(wake.node, wake.phase, wake.round, wake.height);
        if self.params.delta_exec + sigma > self.params.timeout(wake.round) {
            return Some(Plan::Suppressed { wake, sigma });
        }
        Some(Plan::At {
            tick: now + sigma,
            wake,
            sigma,
        })
    }

    /// First honest entry into (height, round).
    pub fn observe_epoch(&mut self, now: Tick, height: u64, round: u64) -> Vec<Plan> {
        if !self.epochs.insert((height, round)) || self.behavior.propose == ProposeMode::Withhold {
            return Vec::new();
        }
        let Some(p) = self.view_proposer(height, round) else {
            return Vec::new();
        };
        if !self.is_corrupted(p) {
            return Vec::new();
        }
        let wake = Wake {
            node: p,
            height,
            round,
            phase: Phase::Propose,
        };
        self.plan(now, wake).into_iter().collect()
    }

    /// Every message is visible to the adversary when it is sent.
    pub fn observe_send(&mut self, now: Tick, msg: &ProtocolMessage) -> Vec<Plan> {
        if self.decided.contains(&msg.height) || self.behavior.vote == VoteMode::Withhold {
            if let (MsgKind::Proposal, Some(b)) = (msg.kind, &msg.block) {
                self.proposals.entry((msg.height, msg.round)).or_insert_with(|| b.clone());
            }
            return Vec::new();
        }
        let key = (msg.height, msg.round);
        let phase = match msg.kind {
            MsgKind::Proposal => {
                let Some(b) = &msg.block else { return Vec::new() };
                self.proposals.entry(key).or_insert_with(|| b.clone());
                Phase::Prevote
            }
            MsgKind::Prevote => {
                self.prevotes.entry(key).or_default().entry(msg.sender).or_insert(msg.value);
                let votes = &self.prevotes[&key];
                if votes.len() < self.quorum {
                    return Vec::new();
                }
                Phase::Precommit
            }
            _ => return Vec::new(),
        };
        let nodes: Vec<usize> = self.corrupted.iter().copied().collect();
        nodes
            .into_iter()
            .filter_map(|node| {
                self.plan(
                    now,
                    Wake {
                        node,
                        height: msg.height,
                        round: msg.round,
                        phase,
                    },
                )
            })
            .collect()
    }

    /// First honest decision of a height.
    pub fn observe_decision(&mut self, height: u64, block: &BlockValue, round: u64) {
        if !self.decided.insert(height) {
            return;
        }
        self.tip = block.id();
        self.mempool.retain(|tx| !block.transactions.contains(tx));
        self.view.advance(block, round);
    }

    fn block(&self, node: usize, height: u64, extra: Option<TxId>) -> BlockValue {
        let mut txs: Vec<TxId> = self.mempool.iter().take(self.block_size).copied().collect();
        txs.extend(extra);
        BlockValue {
            height,
            read_write_hash: exec_digest(&txs, node_salt(node)),
            transactions: txs,
            prev_block_id: self.tip,
            proposer_index: node,
        }
    }

    fn honest(&self) -> Vec<usize> {
        (0..self.n).filter(|i| !self.is_corrupted(*i)).collect()
    }

    fn quorum_value(&self, height: u64, round: u64) -> Option<BlockId> {
        let votes = self.prevotes.get(&(height, round))?;
        let mut tally: BTreeMap<Option<BlockId>, usize> = BTreeMap::new();
        for v in votes.values() {
            *tally.entry(*v).or_default() += 1;
        }
        tally
            .into_iter()
            .find(|(v, c)| v.is_some() && *c >= self.quorum)
            .and_then(|(v, _)| v)
    }

    /// Runs a due step for a corrupted validator.
    pub fn wake(&mut self, w: Wake) -> WakeResult {
        let mut out = Vec::new();
        let mut leaked = None;
        let bcast = |msg: ProtocolMessage| Outgoing {
            from: w.node,
            to: None,
            msg,
            forged: false,
        };
        match w.phase {
            Phase::Propose => match self.behavior.propose {
                ProposeMode::Withhold => {}
                ProposeMode::Valid => {
                    let b = self.block(w.node, w.height, None);
                    leaked = Some(b.id());
                    out.push(bcast(ProtocolMessage::proposal(w.height, w.round, b, -1, w.node)));
                }
                ProposeMode::Conflicting => {
                    let mut b = self.block(w.node, w.height, None);
                    b.prev_block_id ^= 0xdead_beef;
                    leaked = Some(b.id());
                    out.push(bcast(ProtocolMessage::proposal(w.height, w.round, b, -1, w.node)));
                }
                ProposeMode::Equivocate => {
                    let a = self.block(w.node, w.height, None);
                    let b = self.block(w.node, w.height, Some(TxId::new(900_000 + w.height * 1000 + w.round)));
                    leaked = Some(a.id());
                    for (i, to) in self.honest().into_iter().enumerate() {
                        let v = if i % 2 == 0 { a.clone() } else { b.clone() };
                        out.push(Outgoing {
                            from: w.node,
                            to: Some(to),
                            msg: ProtocolMessage::proposal(w.height, w.round, v, -1, w.node),
                            forged: false,
                        });
                    }
                }
            },
            Phase::Prevote | Phase::Precommit => {
                let kind = if w.phase == Phase::Prevote {
                    MsgKind::Prevote
                } else {
                    MsgKind::Precommit
                };
                let observed = if kind == MsgKind::Prevote {
                    self.proposals.get(&(w.height, w.round)).map(BlockValue::id)
                } else {
                    self.quorum_value(w.height, w.round)
                };
                let values: Vec<Option<BlockId>> = match self.behavior.vote {
                    VoteMode::Withhold => vec![],
                    VoteMode::Follow => vec![observed],
                    VoteMode::Nil => vec![None],
                    VoteMode::Equivocate => vec![observed.or(Some(0xbad)), None],
                };
                for v in values {
                    out.push(bcast(ProtocolMessage::vote(kind, w.height, w.round, v, w.node)));
                }
                if self.behavior.forge && !out.is_empty() {
                    if let Some(&victim) = self.honest().first() {
                        out.push(Outgoing {
                            from: w.node,
                            to: None,
                            msg: ProtocolMessage::vote(kind, w.height, w.round, observed, victim),
                            forged: true,
                        });
                    }
                }
            }
            Phase::Commit => {}
        }
        WakeResult { out, leaked }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rotation::ProposerScheme;

    fn view(n: usize) -> ProposerView {
        ProposerView::new(ProposerScheme::IndexRotation, vec![1; n], 1)
    }

    fn params() -> TimeParams {
        TimeParams::with_delta(10)
    }

    fn cfg(strategy: Strategy) -> AdversaryConfig {
        AdversaryConfig {
            strategy,
            ..AdversaryConfig::default()
        }
    }

    #[test]
    fn honest_all_never_delays() {
        let c = cfg(Strategy::HonestAll);
        for phase in Phase::ALL {
            for r in 0..5 {
                assert_eq!(c.on_sleep(1, phase, r, true, 1, &params()), 0);
            }
        }
    }

    #[test]
    fn delay_proposer_uses_the_smallest_violating_sigma() {
        let c = cfg(Strategy::DelayProposer);
        let p = params();
        let s = c.on_sleep(1, Phase::Propose, 0, true, 1, &p);
        assert_eq!(s, 10);
        assert!(p.delta_exec + s > p.timeout(0));
        assert!(p.delta_exec + (s - p.delta_exec) <= p.timeout(0));
        assert_eq!(c.on_sleep(1, Phase::Propose, 0, false, 1, &p), 0);
        let zero_exec = TimeParams {
            delta_exec: 0,
            ..p
        };
        assert_eq!(kill_sigma(0, &zero_exec), 11);
    }

    #[test]
    fn worst_case_kills_rounds_up_to_f() {
        let c = cfg(Strategy::WorstCaseFRounds);
        let p = params();
        for f in 1..=3usize {
            for r in 0..=f as u64 {
                let s = c.on_sleep(0, Phase::Propose, r, true, f, &p);
                assert!(p.delta_exec + s > p.timeout(r));
            }
            assert_eq!(c.on_sleep(0, Phase::Propose, f as u64 + 1, true, f, &p), 0);
        }
        assert_eq!(c.resolved_corrupted(1, &view(4)), vec![1]);
        assert_eq!(c.resolved_corrupted(2, &view(7)), vec![1, 2]);
    }

    #[test]
    fn sigma_table_overrides_the_strategy() {
        let mut c = cfg(Strategy::DelayProposer);
        c.sigma.push(SigmaRule {
            node: Some(1),
            phase: Some(Phase::Propose),
            round: Some(0),
            sigma: 3,
        });
        assert_eq!(c.on_sleep(1, Phase::Propose, 0, true, 1, &params()), 3);
        assert_eq!(c.on_sleep(2, Phase::Propose, 0, true, 1, &params()), 10);
    }

    #[test]
    fn corruption_budget() {
        let mut c = cfg(Strategy::WithholdVotes);
        c.corrupt(2, 4, 1).unwrap();
        assert_eq!(c.corrupted, vec![2]);
        c.strict = true;
        assert_eq!(
            c.corrupt(3, 4, 1),
            Err(AdversaryError::CorruptionBudgetExceeded { node: 3, bound: 1 })
        );
        c.strict = false;
        c.corrupt(3, 4, 1).unwrap();
        assert_eq!(c.corrupt(9, 4, 1), Err(AdversaryError::UnknownValidator(9)));
    }

    fn adversary(c: AdversaryConfig, corrupted: Vec<usize>) -> Adversary {
        Adversary::new(c, corrupted, 4, 1, params(), view(4), (1..10).map(TxId::new).collect(), 2)
    }

    #[test]
    fn corrupted_proposer_leaks_its_value() {
        let mut a = adversary(cfg(Strategy::HonestAll), vec![1]);
        let plans = a.observe_epoch(0, 1, 0);
        let Plan::At { tick, wake, .. } = plans[0] else { panic!("expected a wake") };
        assert_eq!(tick, 0);
        let res = a.wake(wake);
        let leaked = res.leaked.unwrap();
        assert_eq!(res.out[0].msg.value, Some(leaked));
        assert!(a.observe_epoch(0, 1, 0).is_empty());
    }

    #[test]
    fn guard_violation_suppresses_byzantine_steps() {
        let mut c = cfg(Strategy::DelayProposer);
        c.behavior = Some(Behavior::default());
        let mut a = adversary(c, vec![1]);
        assert!(matches!(a.observe_epoch(0, 1, 0)[0], Plan::Suppressed { .. }));
    }

    #[test]
    fn withholding_validators_stay_silent() {
        let mut a = adversary(cfg(Strategy::WithholdVotes), vec![2]);
        let b = BlockValue {
            height: 1,
            transactions: vec![],
            read_write_hash: exec_digest(&[], 0),
            prev_block_id: GENESIS_ID,
            proposer_index: 1,
        };
        let p = ProtocolMessage::proposal(1, 0, b, -1, 1);
        assert!(a.observe_send(0, &p).is_empty());
    }

    #[test]
    fn equivocating_votes_carry_two_values() {
        let mut c = cfg(Strategy::CustomScript);
        c.behavior = Some(Behavior {
            vote: VoteMode::Equivocate,
            forge: true,
            ..Behavior::default()
        });
        let mut a = adversary(c, vec![3]);
        let b = a.block(1, 1, None);
        let p = ProtocolMessage::proposal(1, 0, b.clone(), -1, 1);
        let Plan::At { wake, .. } = a.observe_send(0, &p)[0] else { panic!() };
        let res = a.wake(wake);
        let values: Vec<_> = res.out.iter().filter(|o| !o.forged).map(|o| o.msg.value).collect();
        assert_eq!(values, vec![Some(b.id()), None]);
        let forged: Vec<_> = res.out.iter().filter(|o| o.forged).collect();
        assert_eq!(forged.len(), 1);
        assert_eq!(forged[0].from, 3);
        assert_ne!(forged[0].msg.sender, 3);
    }
}
