//! Trace checkers and the closed-form termination bound. Every checker is a
//! pure function of a [`Trace`]; run parameters come from its `config`
//! header record, never from simulator state.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::sim::{Trace, TraceRecord};
use crate::types::Tick;

/// Worst-case ticks from GST to a decision: 2(f+2)(f+3)Δ.
pub fn bound(f: u64, delta: Tick) -> Tick {
    2 * (f + 2) * (f + 3) * delta
}

/// The same bound as a sum of phase timeouts: four phases in each of the
/// rounds 0..=f, plus four in the first round that cannot be killed.
pub fn bound_expanded(f: u64, delta: Tick) -> Tick {
    let tau = |r: u64| (1 + r) * delta;
    4 * (0..=f).map(tau).sum::<Tick>() + 4 * tau(f + 1)
}

/// Run parameters recovered from the trace header.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TraceMeta {
    pub n: usize,
    pub f: u64,
    pub delta: Tick,
    pub delta_exec: Tick,
    pub tau_init: Tick,
    pub tau_step: Tick,
    pub gst: Tick,
    pub pre_gst_cap: Tick,
    pub heights: u64,
    pub corrupted: BTreeSet<usize>,
}

impl TraceMeta {
    pub fn from_trace(trace: &Trace) -> Option<Self> {
        let h = &trace.records.iter().find(|r| r.kind == "config")?.payload;
        let num = |k: &str| h[k].as_u64();
        let delta = num("delta")?;
        Some(Self {
            n: num("n")? as usize,
            f: num("f")?,
            delta,
            delta_exec: num("deltaExec").unwrap_or(delta / 2),
            tau_init: num("tauInit").unwrap_or(delta),
            tau_step: num("tauStep").unwrap_or(delta),
            gst: num("gst").unwrap_or(0),
            pre_gst_cap: num("preGstCap").unwrap_or(10 * delta),
            heights: num("heights").unwrap_or(1),
            corrupted: h["corrupted"]
                .as_array()
                .map(|a| a.iter().filter_map(|v| v.as_u64()).map(|v| v as usize).collect())
                .unwrap_or_default(),
        })
    }

    pub fn honest(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(|i| !self.corrupted.contains(i))
    }

    pub fn is_honest(&self, node: usize) -> bool {
        node < self.n && !self.corrupted.contains(&node)
    }

    pub fn tau(&self, round: u64) -> Tick {
        self.tau_init + round * self.tau_step
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckError {
    #[error("trace has no config header")]
    NoHeader,
    #[error("honest node {node} never decided height {height}")]
    MissingDecision { height: u64, node: usize },
    #[error("schedule violation: {milestone} at tick {at}, limit {limit}")]
    ScheduleViolation { milestone: String, at: Tick, limit: Tick },
    #[error("no honest node entered round {round}")]
    NoRoundEntry { round: u64 },
}

fn meta(trace: &Trace) -> Result<TraceMeta, CheckError> {
    TraceMeta::from_trace(trace).ok_or(CheckError::NoHeader)
}

fn honest_records<'a>(trace: &'a Trace, m: &'a TraceMeta, kind: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
    trace
        .records
        .iter()
        .filter(move |r| r.kind == kind && r.node.is_some_and(|n| m.is_honest(n)))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum AgreementReport {
    Agreement,
    Conflict {
        height: u64,
        values: BTreeSet<String>,
        nodes: BTreeSet<usize>,
    },
}

/// Groups honest decide records by height; any height with two values is a
/// conflict. Without a header every decide record counts as honest.
pub fn check_agreement(trace: &Trace) -> AgreementReport {
    let m = TraceMeta::from_trace(trace);
    let mut by_height: BTreeMap<u64, BTreeMap<String, BTreeSet<usize>>> = BTreeMap::new();
    for r in trace.records.iter().filter(|r| r.kind == "decide") {
        let Some(node) = r.node else { continue };
        if m.as_ref().is_some_and(|m| !m.is_honest(node)) {
            continue;
        }
        by_height
            .entry(r.height)
            .or_default()
            .entry(r.payload["value"].to_string())
            .or_default()
            .insert(node);
    }
    for (height, values) in by_height {
        if values.len() > 1 {
            return AgreementReport::Conflict {
                height,
                nodes: values.values().flatten().copied().collect(),
                values: values.into_keys().collect(),
            };
        }
    }
    AgreementReport::Agreement
}

/// (node, height) pairs where a node decided twice or reported a second
/// decision attempt.
pub fn check_double_decisions(trace: &Trace) -> Vec<(usize, u64)> {
    let mut seen = BTreeSet::new();
    let mut out = BTreeSet::new();
    for r in &trace.records {
        let Some(node) = r.node else { continue };
        match r.kind.as_str() {
            "decide" if !seen.insert((node, r.height)) => {
                out.insert((node, r.height));
            }
            "double_decide" => {
                out.insert((node, r.height));
            }
            _ => {}
        }
    }
    out.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct BoundReport {
    pub f: u64,
    pub delta: Tick,
    pub t_star: Tick,
    pub gst: Tick,
    /// Slowest honest decide tick per height.
    pub measured: BTreeMap<u64, Tick>,
    pub compliant: BTreeMap<u64, bool>,
}

impl BoundReport {
    pub fn all_compliant(&self) -> bool {
        self.compliant.values().all(|c| *c)
    }
}

/// Measures the slowest honest decision of each height against GST + T*.
pub fn check_termination(trace: &Trace) -> Result<BoundReport, CheckError> {
    let m = meta(trace)?;
    let t_star = bound(m.f, m.delta);
    let mut decided: BTreeMap<(u64, usize), Tick> = BTreeMap::new();
    for r in honest_records(trace, &m, "decide") {
        decided.entry((r.height, r.node.unwrap_or(0))).or_insert(r.t);
    }
    let mut measured = BTreeMap::new();
    let mut compliant = BTreeMap::new();
    for h in 1..=m.heights {
        let mut worst = 0;
        for node in m.honest() {
            let Some(&t) = decided.get(&(h, node)) else {
                return Err(CheckError::MissingDecision { height: h, node });
            };
            worst = worst.max(t);
        }
        measured.insert(h, worst);
        compliant.insert(h, worst <= m.gst + t_star);
    }
    Ok(BoundReport {
        f: m.f,
        delta: m.delta,
        t_star,
        gst: m.gst,
        measured,
        compliant,
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Milestone {
    pub name: String,
    pub at: Tick,
    pub limit: Tick,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CaseReport {
    /// First round with an honest proposer that the adversary cannot stall.
    pub round: u64,
    /// Earliest honest entry into that round.
    pub t: Tick,
    pub milestones: Vec<Milestone>,
}

/// Height-1 schedule of the first round the adversary cannot kill, r = f+1:
/// every honest node enters r by t + Δ + τ(r−1), reaches a prevote quorum
/// by t + 3Δ + τ(r−1) and decides by t + 5Δ + τ(r−1), where t is the
/// earliest honest entry into r. With f = 0 the first such round is 1 and
/// the milestones reduce to the fast-path bounds.
pub fn check_case3_schedule(trace: &Trace) -> Result<CaseReport, CheckError> {
    let m = meta(trace)?;
    let r = m.f + 1;
    let base = m.tau(r - 1);
    let h = 1;
    let entries: BTreeMap<usize, Tick> = honest_records(trace, &m, "new_round")
        .filter(|x| x.height == h && x.round == r)
        .fold(BTreeMap::new(), |mut acc, x| {
            acc.entry(x.node.unwrap_or(0)).or_insert(x.t);
            acc
        });
    let decides: BTreeMap<usize, Tick> = honest_records(trace, &m, "decide")
        .filter(|x| x.height == h)
        .map(|x| (x.node.unwrap_or(0), x.t))
        .collect();
    let Some(&t) = entries.values().min() else {
        // Decided before round r: the fast-path bound is what remains.
        let t0 = honest_records(trace, &m, "new_round")
            .filter(|x| x.height == h)
            .map(|x| x.t)
            .min()
            .ok_or(CheckError::NoRoundEntry { round: r })?;
        if decides.len() < m.honest().count() {
            return Err(CheckError::NoRoundEntry { round: r });
        }
        let worst = decides.values().copied().max().unwrap_or(t0);
        let limit = t0 + 5 * m.delta + base;
        let ms = Milestone {
            name: "commit".into(),
            at: worst,
            limit,
        };
        if worst > limit {
            return Err(violation(&ms));
        }
        return Ok(CaseReport {
            round: r,
            t: t0,
            milestones: vec![ms],
        });
    };
    let latest_entry = m
        .honest()
        .map(|n| entries.get(&n).copied().or_else(|| decides.get(&n).copied()).unwrap_or(Tick::MAX))
        .max()
        .unwrap_or(t);
    let quorum = honest_records(trace, &m, "prevote_quorum")
        .filter(|x| x.height == h && x.round == r)
        .map(|x| x.t)
        .min()
        .or_else(|| decides.values().copied().min())
        .unwrap_or(Tick::MAX);
    let commit = if decides.len() < m.honest().count() {
        Tick::MAX
    } else {
        decides.values().copied().max().unwrap_or(Tick::MAX)
    };
    let milestones = vec![
        Milestone {
            name: "round_entry".into(),
            at: latest_entry,
            limit: t + m.delta + base,
        },
        Milestone {
            name: "prevote_quorum".into(),
            at: quorum,
            limit: t + 3 * m.delta + base,
        },
        Milestone {
            name: "commit".into(),
            at: commit,
            limit: t + 5 * m.delta + base,
        },
    ];
    if let Some(bad) = milestones.iter().find(|x| x.at > x.limit) {
        return Err(violation(bad));
    }
    Ok(CaseReport { round: r, t, milestones })
}

fn violation(ms: &Milestone) -> CheckError {
    CheckError::ScheduleViolation {
        milestone: ms.name.clone(),
        at: ms.at,
        limit: ms.limit,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct LatencyReport {
    pub height: u64,
    /// First send of the decided proposal.
    pub t0: Tick,
    pub worst_decide: Tick,
    pub limit: Tick,
}

/// Per height: every honest decision lands within 4Δ of the first send of
/// the proposal that was decided.
pub fn check_fast_path_latency(trace: &Trace) -> Result<Vec<LatencyReport>, CheckError> {
    let m = meta(trace)?;
    let mut out = Vec::new();
    for h in 1..=m.heights {
        let decides: Vec<&TraceRecord> = honest_records(trace, &m, "decide").filter(|r| r.height == h).collect();
        let Some(first) = decides.first() else {
            let node = m.honest().next().unwrap_or(0);
            return Err(CheckError::MissingDecision { height: h, node });
        };
        let value = &first.payload["value"];
        let t0 = trace
            .records
            .iter()
            .filter(|r| r.kind == "send" && r.height == h && r.payload["msgKind"] == "PROPOSAL" && &r.payload["value"] == value)
            .map(|r| r.t)
            .min()
            .unwrap_or(0);
        let worst = decides.iter().map(|r| r.t).max().unwrap_or(0);
        let report = LatencyReport {
            height: h,
            t0,
            worst_decide: worst,
            limit: t0 + 4 * m.delta,
        };
        if worst > report.limit {
            return Err(CheckError::ScheduleViolation {
                milestone: format!("decide at height {h}"),
                at: worst,
                limit: report.limit,
            });
        }
        out.push(report);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TimerSample {
    pub node: usize,
    pub height: u64,
    pub round: u64,
    pub ticks: Tick,
    pub expected: Tick,
}

/// Every propose-phase timer start with its expected length τ(r).
pub fn propose_timer_samples(trace: &Trace) -> Result<Vec<TimerSample>, CheckError> {
    let m = meta(trace)?;
    Ok(trace
        .records
        .iter()
        .filter(|r| r.kind == "time_start" && r.payload["slot"] == "timeout:propose")
        .map(|r| TimerSample {
            node: r.node.unwrap_or(0),
            height: r.height,
            round: r.round,
            ticks: r.payload["ticks"].as_u64().unwrap_or(0),
            expected: m.tau(r.round),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct WalConflict {
    pub node: usize,
    pub height: u64,
    pub round: u64,
    pub first: Value,
    pub second: Value,
}

/// A node that precommitted or locked a value at (height, round) must not
/// precommit anything else there, across crashes included.
pub fn check_precommit_consistency(trace: &Trace) -> Vec<WalConflict> {
    let mut first: BTreeMap<(usize, u64, u64), Value> = BTreeMap::new();
    let mut out = Vec::new();
    for r in &trace.records {
        if r.kind != "precommit" && r.kind != "lock" {
            continue;
        }
        let Some(node) = r.node else { continue };
        let v = r.payload["value"].clone();
        match first.get(&(node, r.height, r.round)) {
            Some(prev) if *prev != v => out.push(WalConflict {
                node,
                height: r.height,
                round: r.round,
                first: prev.clone(),
                second: v,
            }),
            Some(_) => {}
            None => {
                first.insert((node, r.height, r.round), v);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DeliveryViolation {
    pub msg_id: u64,
    pub from: usize,
    pub to: usize,
    pub sent: Tick,
    pub delivered: Tick,
    pub reason: String,
}

/// Checks both delivery bounds on every send record and that no message is
/// delivered before it was sent or without a matching send.
pub fn audit_delivery(trace: &Trace) -> Result<Vec<DeliveryViolation>, CheckError> {
    let m = meta(trace)?;
    let mut out = Vec::new();
    let mut sends: BTreeMap<(u64, usize), (usize, Tick)> = BTreeMap::new();
    for r in &trace.records {
        let p = &r.payload;
        let (Some(id), Some(node)) = (p["msgId"].as_u64(), r.node) else { continue };
        match r.kind.as_str() {
            "send" => {
                let to = p["to"].as_u64().unwrap_or(0) as usize;
                let at = p["deliverAt"].as_u64().unwrap_or(r.t);
                sends.insert((id, to), (node, r.t));
                let mut bad = |reason: &str| {
                    out.push(DeliveryViolation {
                        msg_id: id,
                        from: node,
                        to,
                        sent: r.t,
                        delivered: at,
                        reason: reason.to_string(),
                    })
                };
                if at < r.t || at - r.t > m.pre_gst_cap {
                    bad("outside the pre-GST cap");
                }
                if r.t >= m.gst && m.is_honest(node) && m.is_honest(to) && at - r.t > m.delta {
                    bad("post-GST honest delay above delta");
                }
            }
            "deliver" => {
                let from = p["from"].as_u64().unwrap_or(0) as usize;
                match sends.get(&(id, node)) {
                    Some(&(_, sent)) if sent <= r.t => {}
                    _ => out.push(DeliveryViolation {
                        msg_id: id,
                        from,
                        to: node,
                        sent: p["sent"].as_u64().unwrap_or(0),
                        delivered: r.t,
                        reason: "delivered without an earlier send".into(),
                    }),
                }
            }
            _ => {}
        }
    }
    Ok(out)
}

/// Decide times of honest nodes, for summaries.
pub fn decision_stats(trace: &Trace) -> Option<(Tick, Tick, f64)> {
    let m = TraceMeta::from_trace(trace)?;
    let ts: Vec<Tick> = honest_records(trace, &m, "decide").map(|r| r.t).collect();
    let min = *ts.iter().min()?;
    let max = *ts.iter().max()?;
    Some((min, max, ts.iter().sum::<Tick>() as f64 / ts.len() as f64))
}
