//! Deterministic discrete-event harness: one global tick loop, a message
//! queue ordered by (time, seq), partial-synchrony delivery, the shared timer
//! table, and JSON Lines traces.

use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::adversary::{Adversary, DelayPlan, Plan, PreGstPolicy, Wake};
use crate::analysis::bound;
use crate::config::{ConfigError, CrashSpec, ScenarioConfig};
use crate::engine::{Env, NodeEvent, ValidatorNode};
use crate::services::{AuthService, SigService, SyncService};
use crate::timer::{TimeStart, TimerKey, TimerTable};
use crate::types::{BlockValue, Phase, ProtocolMessage, Tick, TimeParams};

/// One line of a trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: Tick,
    pub seq: u64,
    pub node: Option<usize>,
    pub kind: String,
    pub height: u64,
    pub round: u64,
    pub phase: Option<Phase>,
    pub payload: Value,
    pub note: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("trace record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        std::fs::write(path, self.to_jsonl())
    }

    pub fn read(path: &Path) -> io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_jsonl(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.kind == kind)
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("no complete decision within {max_ticks} ticks")]
    HorizonExceeded { max_ticks: Tick, trace: Box<Trace> },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Delivery delays under partial synchrony.
#[derive(Clone, Debug)]
pub struct NetworkModel {
    pub delta: Tick,
    pub gst: Tick,
    pub pre_gst_cap: Tick,
    pub rng: ChaCha8Rng,
    pub delay_plan: DelayPlan,
    pub policy: PreGstPolicy,
}

impl NetworkModel {
    pub fn new(params: &TimeParams, seed: u64, delay_plan: DelayPlan, policy: PreGstPolicy) -> Self {
        Self {
            delta: params.delta,
            gst: params.gst,
            pre_gst_cap: params.pre_gst_cap,
            rng: ChaCha8Rng::seed_from_u64(seed),
            delay_plan,
            policy,
        }
    }
}

/// Delivery tick of message `msg_id` sent at `send_time`. After GST the delay
/// is at most Δ; before GST at most the cap, and honest pairs additionally
/// arrive by GST + Δ. Self-delivery is immediate.
pub fn schedule_delivery(
    model: &mut NetworkModel,
    msg_id: u64,
    from: usize,
    to: usize,
    send_time: Tick,
    honest_pair: bool,
) -> Tick {
    if from == to {
        return send_time;
    }
    let planned = model.delay_plan.per_message.get(&msg_id).copied();
    if send_time >= model.gst {
        let d = planned.unwrap_or_else(|| model.rng.gen_range(0..=model.delta));
        return send_time + d.min(model.delta);
    }
    let cap = model.pre_gst_cap;
    let d = planned.unwrap_or_else(|| match model.policy {
        PreGstPolicy::Uniform => model.rng.gen_range(0..=cap),
        PreGstPolicy::Max => cap,
    });
    let at = send_time + d.min(cap);
    if honest_pair {
        at.min(model.gst + model.delta)
    } else {
        at
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Deliver { from: usize, msg: ProtocolMessage, msg_id: u64, sent: Tick },
    TimeOver(TimerKey),
    AdvWake(Wake),
    Restart,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimEvent {
    pub time: Tick,
    pub seq: u64,
    pub target: usize,
    pub payload: Payload,
}

/// Everything a node handler may touch; kept apart from the nodes so a
/// handler can borrow both.
struct Ctx {
    now: Tick,
    n: usize,
    queue: BTreeMap<(Tick, u64), SimEvent>,
    next_seq: u64,
    next_msg: u64,
    timers: TimerTable,
    adversary: Adversary,
    sigs: SigService,
    auth: AuthService,
    sync: SyncService,
    net: NetworkModel,
    trace: Vec<TraceRecord>,
    epochs: BTreeSet<(u64, u64)>,
}

impl Ctx {
    fn push(&mut self, time: Tick, target: usize, payload: Payload) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.insert(
            (time, seq),
            SimEvent {
                time,
                seq,
                target,
                payload,
            },
        );
    }

    fn record(&mut self, node: Option<usize>, kind: &str, height: u64, round: u64, payload: Value, note: &str) {
        let seq = self.trace.len() as u64;
        self.trace.push(TraceRecord {
            t: self.now,
            seq,
            node,
            kind: kind.to_string(),
            height,
            round,
            phase: None,
            payload,
            note: note.to_string(),
        });
    }

    fn honest(&self, node: usize) -> bool {
        !self.adversary.is_corrupted(node)
    }

    /// Schedules one delivery per honest recipient; the adversary sees the
    /// message at send time instead of receiving it.
    fn route(&mut self, from: usize, to: Option<usize>, msg: ProtocolMessage) {
        let recipients: Vec<usize> = match to {
            Some(t) => vec![t],
            None => (0..self.n).collect(),
        };
        let msg_id = self.next_msg;
        self.next_msg += 1;
        for to in recipients {
            if !self.honest(to) {
                continue;
            }
            let Ok(d) = self.auth.auth_send(from, to, msg.clone(), |_, _| None) else {
                continue;
            };
            let honest_pair = self.honest(from);
            let at = schedule_delivery(&mut self.net, msg_id, from, to, self.now, honest_pair);
            let payload = json!({
                "to": to, "msgKind": msg.kind, "value": msg.value, "msgId": msg_id, "deliverAt": at,
                "sender": msg.sender, "msgRound": msg.round,
            });
            self.record(Some(from), "send", msg.height, msg.round, payload, "");
            self.push(
                at,
                to,
                Payload::Deliver {
                    from: d.from,
                    msg: d.msg,
                    msg_id,
                    sent: self.now,
                },
            );
        }
        let plans = self.adversary.observe_send(self.now, &msg);
        self.apply(plans);
    }

    fn apply(&mut self, plans: Vec<Plan>) {
        for p in plans {
            match p {
                Plan::At { tick, wake, sigma } => {
                    let payload = json!({ "phase": wake.phase, "sigma": sigma });
                    self.record(Some(wake.node), "sleep", wake.height, wake.round, payload, "adversary");
                    self.push(tick, wake.node, Payload::AdvWake(wake));
                }
                Plan::Suppressed { wake, sigma } => {
                    let payload = json!({ "phase": wake.phase, "sigma": sigma });
                    self.record(Some(wake.node), "suppress", wake.height, wake.round, payload, "delta + sigma > tau");
                }
            }
        }
    }
}

impl Env for Ctx {
    fn now(&self) -> Tick {
        self.now
    }

    fn sleep(&mut self, node: usize, height: u64, phase: Phase, round: u64) -> Tick {
        self.adversary.sleep(node, phase, round, height)
    }

    fn sign(&mut self, msg: &mut ProtocolMessage) {
        if let Ok(tok) = self.sigs.sig_sign(msg.sender, &msg.sign_bytes()) {
            msg.sig = tok;
        }
    }

    fn verify(&mut self, msg: &ProtocolMessage) -> bool {
        let Some(key) = self.auth.registry.lookup(msg.sender) else {
            return false;
        };
        self.sigs.sig_verify(msg.sender, &msg.sign_bytes(), msg.sig, key, || false)
    }

    fn start_timer(&mut self, key: TimerKey, ticks: Tick) {
        if self.timers.time_start(key, ticks) == TimeStart::Started {
            let payload = json!({ "slot": key.slot.label(), "ticks": ticks });
            self.record(Some(key.node), "time_start", key.height, key.round, payload, "");
        }
    }

    fn reset_timer(&mut self, key: TimerKey) {
        self.timers.reset_time(&key);
    }

    fn cancel_timers(&mut self, node: usize) {
        self.timers.cancel_where(|k| k.node == node);
    }

    fn broadcast(&mut self, msg: ProtocolMessage) {
        let from = msg.sender;
        self.route(from, None, msg);
    }

    fn send(&mut self, to: usize, msg: ProtocolMessage) {
        let from = msg.sender;
        self.route(from, Some(to), msg);
    }

    fn trace(&mut self, ev: NodeEvent) {
        let seq = self.trace.len() as u64;
        let (h, r) = (ev.height, ev.round);
        let decided = (ev.kind == "decide").then(|| ev.payload.clone());
        self.trace.push(TraceRecord {
            t: self.now,
            seq,
            node: Some(ev.node),
            kind: ev.kind.to_string(),
            height: h,
            round: r,
            phase: ev.phase,
            payload: ev.payload,
            note: ev.note,
        });
        if ev.kind == "new_round" && self.epochs.insert((h, r)) {
            let plans = self.adversary.observe_epoch(self.now, h, r);
            self.apply(plans);
        }
        if let Some(p) = decided {
            if let Ok(block) = serde_json::from_value::<BlockValue>(p["block"].clone()) {
                let round = p["decisionRound"].as_u64().unwrap_or(0);
                self.adversary.observe_decision(h, &block, round);
            }
        }
    }

    fn sync_round_ok(&mut self, node: usize) -> bool {
        self.sync.sync_round_ok(node)
    }

    fn sync_request_round(&mut self, node: usize) -> u8 {
        self.sync.sync_request_round(node)
    }
}

/// A simulation in progress.
pub struct World {
    cfg: ScenarioConfig,
    nodes: Vec<ValidatorNode>,
    ctx: Ctx,
    handled: Vec<u64>,
    crashes: Vec<CrashSpec>,
    honest: Vec<usize>,
    max_ticks: Tick,
    started: bool,
}

impl World {
    pub fn new(cfg: &ScenarioConfig, seed: u64) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let n = cfg.n;
        let f = cfg.fault_bound();
        let params = cfg.time_params();
        let engine = cfg.engine_config();
        let corrupted = cfg.adversary.resolved_corrupted(f, &engine.view);
        let adversary = Adversary::new(
            cfg.adversary.clone(),
            corrupted.clone(),
            n,
            f,
            params,
            engine.view.clone(),
            engine.mempool.clone(),
            engine.block_size,
        );
        let mut sigs = SigService::default();
        let mut auth = AuthService::default();
        for i in 0..n {
            let key = 0x1000 + i as u64;
            sigs.keygen(i, key);
            auth.registry
                .register(i, key, |_, _| true)
                .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        for &c in &corrupted {
            sigs.corrupt(c);
            auth.corrupt(c);
        }
        let honest: Vec<usize> = (0..n).filter(|i| !corrupted.contains(i)).collect();
        let nodes = (0..n)
            .map(|i| {
                let mut node = ValidatorNode::new(i, engine.clone());
                node.corrupted = corrupted.contains(&i);
                node.wal.mode = cfg.wal_mode;
                node
            })
            .collect();
        let net = NetworkModel::new(
            &params,
            seed,
            cfg.adversary.delay_plan.clone(),
            cfg.adversary.pre_gst_policy,
        );
        let mut ctx = Ctx {
            now: 0,
            n,
            queue: BTreeMap::new(),
            next_seq: 0,
            next_msg: 0,
            timers: TimerTable::new(),
            adversary,
            sigs,
            auth,
            sync: SyncService::new(honest.iter().copied()),
            net,
            trace: Vec::new(),
            epochs: BTreeSet::new(),
        };
        let header = json!({
            "n": n, "f": f, "delta": params.delta, "deltaExec": params.delta_exec,
            "tauInit": params.tau_init, "tauStep": params.tau_step, "gst": params.gst,
            "preGstCap": params.pre_gst_cap, "heights": cfg.heights, "maxTicks": cfg.horizon(),
            "bound": bound(f as u64, params.delta), "quorum": 2 * f + 1, "corrupted": corrupted,
            "strategy": cfg.adversary.strategy, "seed": seed, "commitScheme": cfg.commit_scheme,
        });
        ctx.record(None, "config", 0, 0, header, cfg.description.as_deref().unwrap_or(""));
        for &c in &corrupted {
            ctx.record(Some(c), "corrupt", 0, 0, json!({ "validator": c }), "");
        }
        Ok(Self {
            cfg: cfg.clone(),
            nodes,
            ctx,
            handled: vec![0; n],
            crashes: cfg.crashes.clone(),
            honest,
            max_ticks: cfg.horizon(),
            started: false,
        })
    }

    pub fn now(&self) -> Tick {
        self.ctx.now
    }

    pub fn nodes(&self) -> &[ValidatorNode] {
        &self.nodes
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn done(&self) -> bool {
        self.honest
            .iter()
            .all(|&i| self.nodes[i].chain_height() >= self.cfg.heights)
    }

    fn start(&mut self) {
        self.started = true;
        for &i in &self.honest {
            self.nodes[i].start(&mut self.ctx);
        }
    }

    /// Runs one tick and returns the trace records it produced.
    pub fn step(&mut self) -> Vec<TraceRecord> {
        let first = self.ctx.trace.len();
        if !self.started {
            self.start();
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].waiting_sync {
                self.nodes[i].poll_sync(&mut self.ctx);
            }
        }
        let now = self.ctx.now;
        while let Some(entry) = self.ctx.queue.first_entry() {
            if entry.key().0 != now {
                break;
            }
            let ev = entry.remove();
            self.handle(ev);
            if self.done() {
                break;
            }
        }
        for key in self.ctx.timers.tick() {
            self.ctx.push(now + 1, key.node, Payload::TimeOver(key));
        }
        self.ctx.now += 1;
        self.ctx.trace[first..].to_vec()
    }

    fn handle(&mut self, ev: SimEvent) {
        let i = ev.target;
        match ev.payload {
            Payload::Deliver { from, msg, msg_id, sent } => {
                if self.nodes[i].down {
                    let payload = json!({ "from": from, "msgId": msg_id });
                    self.ctx.record(Some(i), "drop", msg.height, msg.round, payload, "receiver down");
                    return;
                }
                let payload = json!({
                    "from": from, "msgKind": msg.kind, "value": msg.value, "msgId": msg_id, "sent": sent,
                    "sender": msg.sender,
                });
                self.ctx.record(Some(i), "deliver", msg.height, msg.round, payload, "");
                self.nodes[i].on_message(&mut self.ctx, from, msg);
                self.after_handled(i);
            }
            Payload::TimeOver(key) => {
                if self.nodes[i].down {
                    return;
                }
                let payload = json!({ "slot": key.slot.label() });
                self.ctx.record(Some(i), "time_over", key.height, key.round, payload, "");
                self.nodes[i].on_timer(&mut self.ctx, key);
                self.after_handled(i);
            }
            Payload::AdvWake(w) => self.adversary_step(w),
            Payload::Restart => {
                self.ctx.record(Some(i), "restart", 0, 0, json!({}), "");
                self.nodes[i].restart(&mut self.ctx);
            }
        }
    }

    fn after_handled(&mut self, i: usize) {
        self.handled[i] += 1;
        let count = self.handled[i];
        let Some(pos) = self.crashes.iter().position(|c| c.node == i && c.event_index == count) else {
            return;
        };
        let crash = self.crashes.remove(pos);
        let (h, r) = (self.nodes[i].cs.height, self.nodes[i].cs.round);
        self.nodes[i].crash();
        self.ctx.cancel_timers(i);
        let payload = json!({ "eventIndex": count, "downtime": crash.downtime });
        self.ctx.record(Some(i), "crash", h, r, payload, "");
        let at = self.ctx.now + crash.downtime.max(1);
        self.ctx.push(at, i, Payload::Restart);
    }

    fn adversary_step(&mut self, w: Wake) {
        let res = self.ctx.adversary.wake(w);
        let payload = json!({ "phase": w.phase });
        self.ctx.record(Some(w.node), "wake", w.height, w.round, payload, "adversary");
        if let Some(v) = res.leaked {
            self.ctx.record(Some(w.node), "leak", w.height, w.round, json!({ "value": v }), "");
        }
        for o in res.out {
            let mut msg = o.msg;
            if o.forged {
                // Signed by the corrupted sender over its own identity, then
                // relabelled: the token cannot verify for the claimed sender.
                let claimed = msg.sender;
                msg.sender = o.from;
                self.ctx.sign(&mut msg);
                msg.sender = claimed;
                let payload = json!({ "claimed": claimed, "msgKind": msg.kind });
                self.ctx.record(Some(o.from), "forge", msg.height, msg.round, payload, "");
            } else {
                self.ctx.sign(&mut msg);
            }
            self.ctx.route(o.from, o.to, msg);
        }
    }

    pub fn trace(&self) -> Trace {
        Trace {
            records: self.ctx.trace.clone(),
        }
    }

    fn into_trace(self) -> Trace {
        Trace {
            records: self.ctx.trace,
        }
    }

    /// Runs to completion or to the horizon.
    pub fn run_to_end(mut self) -> Result<Trace, SimError> {
        while !self.done() && self.ctx.now <= self.max_ticks {
            self.step();
        }
        let completed = self.done();
        let status = if completed { "completed" } else { "horizon_exceeded" };
        let payload = json!({ "status": status, "maxTicks": self.max_ticks });
        self.ctx.record(None, "end", 0, 0, payload, "");
        let max_ticks = self.max_ticks;
        let trace = self.into_trace();
        if completed {
            Ok(trace)
        } else {
            Err(SimError::HorizonExceeded {
                max_ticks,
                trace: Box::new(trace),
            })
        }
    }
}

/// Executes `config` with `seed`. Identical inputs give identical traces.
pub fn run(config: &ScenarioConfig, seed: u64) -> Result<Trace, SimError> {
    World::new(config, seed)?.run_to_end()
}

/// Trace of a run whether or not it completed.
pub fn run_trace(config: &ScenarioConfig, seed: u64) -> Result<(Trace, bool), ConfigError> {
    match run(config, seed) {
        Ok(t) => Ok((t, true)),
        Err(SimError::HorizonExceeded { trace, .. }) => Ok((*trace, false)),
        Err(SimError::Config(e)) => Err(e),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use proptest::prelude::*;

    fn model(gst: Tick) -> NetworkModel {
        let mut p = TimeParams::with_delta(10);
        p.gst = gst;
        NetworkModel::new(&p, 7, DelayPlan::default(), PreGstPolicy::Uniform)
    }

    #[test]
    fn post_gst_plan_is_clamped() {
        let mut m = model(0);
        m.delay_plan.per_message.insert(5, 30);
        assert_eq!(schedule_delivery(&mut m, 5, 0, 1, 100, true), 110);
    }

    #[test]
    fn pre_gst_plan_within_cap_is_honored() {
        let mut m = model(1000);
        m.delay_plan.per_message.insert(5, 50);
        assert_eq!(schedule_delivery(&mut m, 5, 0, 1, 0, false), 50);
        m.delay_plan.per_message.insert(6, 500);
        assert_eq!(schedule_delivery(&mut m, 6, 0, 1, 0, false), 100);
    }

    #[test]
    fn honest_pre_gst_messages_arrive_by_gst_plus_delta() {
        let mut m = model(30);
        m.delay_plan.per_message.insert(1, 90);
        assert_eq!(schedule_delivery(&mut m, 1, 0, 1, 25, true), 40);
    }

    #[test]
    fn zero_delta_is_synchronous() {
        let mut p = TimeParams::with_delta(0);
        p.pre_gst_cap = 0;
        let mut m = NetworkModel::new(&p, 1, DelayPlan::default(), PreGstPolicy::Uniform);
        assert_eq!(schedule_delivery(&mut m, 0, 0, 1, 12, true), 12);
    }

    #[test]
    fn self_delivery_is_immediate() {
        let mut m = model(0);
        assert_eq!(schedule_delivery(&mut m, 0, 2, 2, 9, true), 9);
    }

    proptest! {
        #[test]
        fn delivery_never_exceeds_the_model_bounds(
            gst in 0u64..200, send in 0u64..300, plan in proptest::option::of(0u64..500), honest in any::<bool>(), seed in any::<u64>()
        ) {
            let mut p = TimeParams::with_delta(10);
            p.gst = gst;
            let mut m = NetworkModel::new(&p, seed, DelayPlan::default(), PreGstPolicy::Uniform);
            if let Some(d) = plan {
                m.delay_plan.per_message.insert(0, d);
            }
            let at = schedule_delivery(&mut m, 0, 0, 1, send, honest);
            prop_assert!(at >= send);
            prop_assert!(at - send <= p.pre_gst_cap);
            if send >= gst {
                prop_assert!(at - send <= p.delta);
            }
            if honest {
                prop_assert!(at <= send.max(gst) + p.delta);
            }
        }
    }

    #[test]
    fn same_tick_events_run_in_enqueue_order() {
        let cfg = preset("honest").unwrap();
        let mut w = World::new(&cfg, 1).unwrap();
        let seqs: Vec<u64> = w.step().iter().map(|r| r.seq).collect();
        assert!(seqs.windows(2).all(|p| p[0] < p[1]));
        let delivers: Vec<&TraceRecord> = w.ctx.trace.iter().filter(|r| r.kind == "deliver").collect();
        assert!(delivers.windows(2).all(|p| p[0].t <= p[1].t));
    }

    #[test]
    fn broadcast_fans_out_to_every_validator() {
        let cfg = preset("honest").unwrap();
        let mut w = World::new(&cfg, 1).unwrap();
        let before = w.ctx.queue.len();
        let msg = ProtocolMessage::vote(crate::types::MsgKind::Prevote, 1, 0, None, 0);
        w.ctx.broadcast(msg);
        assert_eq!(w.ctx.queue.len() - before, cfg.n);
    }

    #[test]
    fn empty_queue_only_ticks_timers() {
        let cfg = preset("honest").unwrap();
        let mut w = World::new(&cfg, 1).unwrap();
        w.started = true;
        let key = TimerKey {
            height: 1,
            round: 0,
            node: 0,
            slot: crate::timer::TimerSlot::Grace,
        };
        w.ctx.timers.time_start(key, 2);
        assert!(w.step().is_empty());
        assert_eq!(w.ctx.timers.get_time(&key), Some(1));
        w.step();
        assert_eq!(w.ctx.queue.len(), 1);
    }

    #[test]
    fn honest_run_decides_quickly() {
        let trace = run(&preset("honest").unwrap(), 3).unwrap();
        let decides: Vec<&TraceRecord> = trace.of_kind("decide").collect();
        assert_eq!(decides.len(), 4);
        assert!(decides.iter().all(|d| d.t <= 40));
        let value = &decides[0].payload["value"];
        assert!(decides.iter().all(|d| &d.payload["value"] == value));
    }

    #[test]
    fn identical_inputs_give_identical_traces() {
        let cfg = preset("case1a").unwrap();
        assert_eq!(run(&cfg, 9).unwrap().to_jsonl(), run(&cfg, 9).unwrap().to_jsonl());
    }

    #[test]
    fn trace_round_trips_through_jsonl() {
        let t = run(&preset("honest").unwrap(), 2).unwrap();
        assert_eq!(Trace::from_jsonl(&t.to_jsonl()).unwrap(), t);
    }
}
