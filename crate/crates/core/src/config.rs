//! Scenario configuration: JSON with camelCase keys, validation, and the
//! built-in presets for the non-timeout, timeout and worst-case executions.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adversary::{AdversaryConfig, Behavior, ProposeMode, SigmaRule, Strategy, VoteMode};
use crate::analysis::bound;
use crate::engine::{CommitScheme, EngineConfig, ProposerView};
use crate::rotation::ProposerScheme;
use crate::types::{max_faults, Phase, Tick, TimeParams, TxId};
use crate::wal::WalMode;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
}

/// Crash of `node` right after it handles its `eventIndex`-th event.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct CrashSpec {
    pub node: usize,
    pub event_index: u64,
    #[serde(default = "default_downtime")]
    pub downtime: Tick,
}

fn default_downtime() -> Tick {
    20
}

fn default_delta() -> Tick {
    10
}

fn one() -> u64 {
    1
}

fn default_block_size() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Free-form description shown by `scenario list`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub n: usize,
    /// Fault bound used by every threshold; ⌊(n−1)/3⌋ when absent.
    #[serde(default)]
    pub f: Option<usize>,
    #[serde(default = "default_delta")]
    pub delta: Tick,
    #[serde(default, alias = "delta_exec")]
    pub delta_exec: Option<Tick>,
    #[serde(default, alias = "tau_init")]
    pub tau_init: Option<Tick>,
    #[serde(default, alias = "tau_step")]
    pub tau_step: Option<Tick>,
    #[serde(default)]
    pub gst: Tick,
    #[serde(default, alias = "pre_gst_cap")]
    pub pre_gst_cap: Option<Tick>,
    #[serde(default = "one")]
    pub heights: u64,
    #[serde(default, alias = "max_ticks")]
    pub max_ticks: Option<Tick>,
    #[serde(default, alias = "proposer_scheme")]
    pub proposer_scheme: ProposerScheme,
    #[serde(default, alias = "commit_scheme")]
    pub commit_scheme: CommitScheme,
    #[serde(default)]
    pub adversary: AdversaryConfig,
    #[serde(default, alias = "wal_mode")]
    pub wal_mode: WalMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one", alias = "blocks_per_proposer")]
    pub blocks_per_proposer: u64,
    #[serde(default)]
    pub stakes: Option<Vec<u64>>,
    #[serde(default = "default_block_size", alias = "block_size")]
    pub block_size: usize,
    /// Ids of nondeterministic transactions placed at the head of every mempool.
    #[serde(default, alias = "random_txs")]
    pub random_txs: Vec<u64>,
    #[serde(default, alias = "unlock_on_nil")]
    pub unlock_on_nil: bool,
    #[serde(default)]
    pub crashes: Vec<CrashSpec>,
}

impl ScenarioConfig {
    pub fn new(n: usize) -> Self {
        Self {
            description: None,
            n,
            f: None,
            delta: default_delta(),
            delta_exec: None,
            tau_init: None,
            tau_step: None,
            gst: 0,
            pre_gst_cap: None,
            heights: 1,
            max_ticks: None,
            proposer_scheme: ProposerScheme::default(),
            commit_scheme: CommitScheme::default(),
            adversary: AdversaryConfig::default(),
            wal_mode: WalMode::default(),
            seed: 0,
            blocks_per_proposer: 1,
            stakes: None,
            block_size: default_block_size(),
            random_txs: Vec::new(),
            unlock_on_nil: false,
            crashes: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn fault_bound(&self) -> usize {
        self.f.unwrap_or_else(|| max_faults(self.n))
    }

    pub fn time_params(&self) -> TimeParams {
        let base = TimeParams::with_delta(self.delta);
        TimeParams {
            delta_exec: self.delta_exec.unwrap_or(base.delta_exec),
            tau_init: self.tau_init.unwrap_or(base.tau_init),
            tau_step: self.tau_step.unwrap_or(base.tau_step),
            gst: self.gst,
            pre_gst_cap: self.pre_gst_cap.unwrap_or(base.pre_gst_cap),
            ..base
        }
    }

    pub fn horizon(&self) -> Tick {
        self.max_ticks
            .unwrap_or_else(|| self.gst + 10 * bound(self.fault_bound() as u64, self.delta) * self.heights)
    }

    pub fn stakes(&self) -> Vec<u64> {
        self.stakes.clone().unwrap_or_else(|| vec![1; self.n])
    }

    pub fn mempool(&self) -> Vec<TxId> {
        let mut pool: Vec<TxId> = self.random_txs.iter().map(|id| TxId::random(*id)).collect();
        let plain = (self.heights + 8) * self.block_size.max(1) as u64;
        pool.extend((1..=plain).map(TxId::new).filter(|t| !self.random_txs.contains(&t.id)));
        pool
    }

    pub fn engine_config(&self) -> EngineConfig {
        let mut e = EngineConfig::new(self.n, self.fault_bound(), self.time_params());
        e.commit_scheme = self.commit_scheme;
        e.unlock_on_nil = self.unlock_on_nil;
        e.view = ProposerView::new(self.proposer_scheme, self.stakes(), self.blocks_per_proposer);
        e.block_size = self.block_size;
        e.mempool = self.mempool();
        e
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.n == 0 {
            return bad("n must be at least 1".into());
        }
        if self.heights == 0 {
            return bad("heights must be at least 1".into());
        }
        if self.blocks_per_proposer == 0 {
            return bad("blocksPerProposer must be at least 1".into());
        }
        self.time_params()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(s) = &self.stakes {
            if s.len() != self.n || s.contains(&0) {
                return bad("stakes must list a positive stake per validator".into());
            }
        }
        for &c in &self.adversary.corrupted {
            if c >= self.n {
                return bad(format!("corrupted validator {c} is outside 0..{}", self.n));
            }
        }
        if self.adversary.strict && self.adversary.corrupted.len() > self.fault_bound() {
            return bad(format!(
                "{} corruptions exceed the bound f = {}",
                self.adversary.corrupted.len(),
                self.fault_bound()
            ));
        }
        for c in &self.crashes {
            if c.node >= self.n {
                return bad(format!("crash of validator {} is outside 0..{}", c.node, self.n));
            }
        }
        Ok(())
    }
}

fn rule(node: Option<usize>, phase: Phase, round: Option<u64>, sigma: Tick) -> SigmaRule {
    SigmaRule {
        node,
        phase: Some(phase),
        round,
        sigma,
    }
}

pub const PRESET_NAMES: [&str; 8] = ["honest", "case1a", "case1b", "case1c", "case2a", "case2b", "case2c", "case3"];

/// Built-in scenario by name.
pub fn preset(name: &str) -> Result<ScenarioConfig, ConfigError> {
    let mut c = ScenarioConfig::new(4);
    let half = c.delta / 2;
    match name {
        "honest" => {
            c.description = Some("all validators honest, no delays".into());
        }
        "case1a" => {
            c.description = Some("corrupted round-0 proposer sleeps tau-delta, then proposes a valid block".into());
            c.adversary.corrupted = vec![1];
            c.adversary.strategy = Strategy::CustomScript;
            c.adversary.sigma = vec![rule(Some(1), Phase::Propose, Some(0), c.delta - half)];
        }
        "case1b" => {
            c = ScenarioConfig::new(7);
            c.description = Some("corrupted proposer within the guard plus one vote-withholding validator".into());
            c.adversary.corrupted = vec![1, 4];
            c.adversary.strategy = Strategy::CustomScript;
            c.adversary.sigma = vec![rule(Some(1), Phase::Propose, Some(0), c.delta - half)];
            c.adversary.behavior = Some(Behavior {
                propose: ProposeMode::Valid,
                vote: VoteMode::Withhold,
                forge: false,
            });
        }
        "case1c" => {
            c.description = Some("corrupted validator delays its votes within the guard".into());
            c.adversary.corrupted = vec![2];
            c.adversary.strategy = Strategy::CustomScript;
            c.adversary.sigma = vec![
                rule(Some(2), Phase::Prevote, None, c.delta - half),
                rule(Some(2), Phase::Precommit, None, c.delta - half),
            ];
        }
        "case2a" => {
            c.description = Some("round-0 proposer delayed past its timeout".into());
            c.adversary.strategy = Strategy::DelayProposer;
        }
        "case2b" => {
            c = ScenarioConfig::new(7);
            c.description = Some("round-0 proposer delayed past its timeout, two validators withhold".into());
            c.adversary.strategy = Strategy::DelayAndWithhold;
            c.adversary.corrupted = vec![5, 6];
        }
        "case2c" => {
            c.description = Some("corrupted validator's votes delayed past the timeout".into());
            c.adversary.corrupted = vec![2];
            c.adversary.strategy = Strategy::CustomScript;
            c.adversary.sigma = vec![
                rule(Some(2), Phase::Prevote, None, 2 * c.delta),
                rule(Some(2), Phase::Precommit, None, 2 * c.delta),
            ];
        }
        "case3" => {
            c.description = Some("worst case: the first f+1 rounds are killed, the first honest round decides".into());
            c.adversary.strategy = Strategy::WorstCaseFRounds;
        }
        other => return Err(ConfigError::UnknownPreset(other.to_string())),
    }
    Ok(c)
}
