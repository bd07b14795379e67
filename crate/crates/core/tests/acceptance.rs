//! Acceptance criteria. Runs as a plain binary so every criterion prints one
//! PASS/FAIL line; exits nonzero when any criterion fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use tmsim_core::adversary::{Behavior, ProposeMode, SigmaRule, Strategy, VoteMode};
use tmsim_core::analysis::{
    audit_delivery, bound, check_agreement, check_case3_schedule, check_double_decisions, check_fast_path_latency,
    check_precommit_consistency, check_termination, propose_timer_samples, AgreementReport,
};
use tmsim_core::config::{preset, CrashSpec, ScenarioConfig, PRESET_NAMES};
use tmsim_core::sim::{run, run_trace, SimError, Trace};
use tmsim_core::types::{BlockValue, Phase, Thresholds, TxId};
use tmsim_core::wal::{reply_wal, WalEntry, WalEntryType, WalMode, WalRecord, WalState};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

/// Checkers only ever see the serialized trace.
fn reparse(t: &Trace) -> Trace {
    Trace::from_jsonl(&t.to_jsonl()).expect("trace parses")
}

fn worst_case(f: usize) -> ScenarioConfig {
    let mut c = preset("case3").unwrap();
    c.n = 3 * f + 1;
    c
}

fn c1_worst_case_bound() -> Outcome {
    let mut worst = Vec::new();
    for f in 1..=3usize {
        let cfg = worst_case(f);
        let limit = bound(f as u64, cfg.delta);
        let results: Vec<Result<u64, String>> = (0..100u64)
            .into_par_iter()
            .map(|seed| {
                let trace = reparse(&run(&cfg, seed).map_err(|e| format!("f={f} seed={seed}: {e}"))?);
                let rep = check_termination(&trace).map_err(|e| format!("f={f} seed={seed}: {e}"))?;
                let t = rep.measured[&1];
                if t > limit {
                    return Err(format!("f={f} seed={seed}: decided at {t} > {limit}"));
                }
                Ok(t)
            })
            .collect();
        let mut max = 0;
        for r in results {
            max = max.max(r?);
        }
        worst.push(format!("f={f}: max {max} <= {limit}"));
    }
    Ok(worst.join(", "))
}

fn c2_fast_path_latency() -> Outcome {
    let base = preset("case1a").unwrap();
    let p = base.time_params();
    let slack = p.timeout(0) - p.delta_exec;
    let mut max_gap = 0;
    for seed in 0..100u64 {
        let mut cfg = base.clone();
        let sigma = seed % (slack + 1);
        cfg.adversary.sigma = vec![SigmaRule {
            node: Some(1),
            phase: Some(Phase::Propose),
            round: Some(0),
            sigma,
        }];
        let trace = reparse(&run(&cfg, seed).map_err(|e| format!("seed {seed}: {e}"))?);
        let reps = check_fast_path_latency(&trace).map_err(|e| format!("seed {seed} sigma {sigma}: {e}"))?;
        for r in reps {
            max_gap = max_gap.max(r.worst_decide - r.t0);
        }
    }
    Ok(format!("max decide - t0 = {max_gap} <= {}", 4 * base.delta))
}

fn c3_case3_schedule() -> Outcome {
    let mut out = Vec::new();
    for f in 1..=2usize {
        let cfg = worst_case(f);
        for seed in 0..20u64 {
            let trace = reparse(&run(&cfg, seed).map_err(|e| format!("f={f} seed={seed}: {e}"))?);
            let rep = check_case3_schedule(&trace).map_err(|e| format!("f={f} seed={seed}: {e}"))?;
            if seed == 0 {
                let ms: Vec<String> = rep.milestones.iter().map(|m| format!("{}={}/{}", m.name, m.at, m.limit)).collect();
                out.push(format!("f={f} r={} t={} {}", rep.round, rep.t, ms.join(" ")));
            }
        }
    }
    Ok(out.join("; "))
}

fn random_scenario(rng: &mut ChaCha8Rng) -> ScenarioConfig {
    let mut c = ScenarioConfig::new(4);
    c.f = Some(1);
    c.heights = rng.gen_range(1..=2);
    c.gst = if rng.gen_bool(0.3) { rng.gen_range(0..100) } else { 0 };
    let strategy = Strategy::ALL[rng.gen_range(0..Strategy::ALL.len())];
    c.adversary.strategy = strategy;
    if strategy != Strategy::WorstCaseFRounds || rng.gen_bool(0.5) {
        c.adversary.corrupted = vec![rng.gen_range(0..4)];
    }
    if rng.gen_bool(0.6) {
        let propose = [ProposeMode::Valid, ProposeMode::Withhold, ProposeMode::Equivocate, ProposeMode::Conflicting];
        let vote = [VoteMode::Follow, VoteMode::Withhold, VoteMode::Equivocate, VoteMode::Nil];
        c.adversary.behavior = Some(Behavior {
            propose: propose[rng.gen_range(0..4)],
            vote: vote[rng.gen_range(0..4)],
            forge: rng.gen_bool(0.3),
        });
    }
    for _ in 0..rng.gen_range(0..4) {
        c.adversary.sigma.push(SigmaRule {
            node: rng.gen_bool(0.5).then(|| rng.gen_range(0..4)),
            phase: Some(Phase::ALL[rng.gen_range(0..3)]),
            round: rng.gen_bool(0.7).then(|| rng.gen_range(0..3)),
            sigma: rng.gen_range(0..40),
        });
    }
    c
}

fn c4_agreement_sweep() -> Outcome {
    let results: Vec<Result<bool, String>> = (0..1000u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xA6EE + i);
            let cfg = random_scenario(&mut rng);
            let (trace, done) = run_trace(&cfg, i).map_err(|e| format!("run {i}: {e}"))?;
            let trace = reparse(&trace);
            if let AgreementReport::Conflict { height, values, .. } = check_agreement(&trace) {
                return Err(format!("run {i}: conflict at height {height}: {values:?}"));
            }
            let doubles = check_double_decisions(&trace);
            if !doubles.is_empty() {
                return Err(format!("run {i}: double decisions {doubles:?}"));
            }
            Ok(done)
        })
        .collect();
    let mut completed = 0;
    for r in results {
        completed += usize::from(r?);
    }
    Ok(format!("1000 runs, 0 conflicts, 0 double decisions, {completed} reached every height"))
}

fn c5_liveness_failure() -> Outcome {
    let mut cfg = ScenarioConfig::new(4);
    cfg.f = Some(1);
    cfg.adversary.strategy = Strategy::WithholdVotes;
    cfg.adversary.corrupted = vec![1, 2];
    let horizon = 10 * bound(1, cfg.delta);
    cfg.max_ticks = Some(horizon);
    match run(&cfg, 1) {
        Err(SimError::HorizonExceeded { trace, max_ticks }) => {
            let decides = trace.of_kind("decide").count();
            if decides == 0 && max_ticks == horizon {
                Ok(format!("HorizonExceeded at {max_ticks} ticks, 0 decisions"))
            } else {
                Err(format!("{decides} decisions before the horizon"))
            }
        }
        Err(e) => Err(e.to_string()),
        Ok(_) => Err("run completed".into()),
    }
}

fn c6_timeout_linearity() -> Outcome {
    let mut cfg = ScenarioConfig::new(4);
    cfg.adversary.strategy = Strategy::CustomScript;
    cfg.adversary.sigma = (0..6)
        .map(|r| SigmaRule {
            node: None,
            phase: Some(Phase::Propose),
            round: Some(r),
            sigma: 10 * cfg.delta,
        })
        .collect();
    let trace = reparse(&run(&cfg, 5).map_err(|e| e.to_string())?);
    let samples = propose_timer_samples(&trace).map_err(|e| e.to_string())?;
    let mut rounds = BTreeSet::new();
    for s in &samples {
        let oracle = (1 + s.round) * cfg.delta;
        if s.ticks != oracle || s.expected != oracle {
            return Err(format!("round {} started with {} ticks, want {oracle}", s.round, s.ticks));
        }
        rounds.insert(s.round);
    }
    let want: BTreeSet<u64> = (0..=6).collect();
    if !want.is_subset(&rounds) {
        return Err(format!("rounds covered {rounds:?}"));
    }
    Ok(format!("{} propose timers over rounds {rounds:?}", samples.len()))
}

fn subsets(n: usize, k: usize) -> Vec<u32> {
    (0u32..1 << n).filter(|m| m.count_ones() as usize == k).collect()
}

fn c7_quorum_intersection() -> Outcome {
    let mut out = Vec::new();
    for n in [4usize, 7, 10] {
        let f = (n - 1) / 3;
        let cfg = ScenarioConfig::new(n).engine_config();
        if cfg.thresholds != Thresholds::from_f(f) || cfg.thresholds.quorum != 2 * f + 1 {
            return Err(format!("n={n}: engine thresholds {:?}", cfg.thresholds));
        }
        let qs = subsets(n, cfg.thresholds.quorum);
        let mut min = usize::MAX;
        for (i, a) in qs.iter().enumerate() {
            for b in &qs[i..] {
                min = min.min((a & b).count_ones() as usize);
            }
        }
        if min < f + 1 {
            return Err(format!("n={n}: two quorums share only {min}"));
        }
        out.push(format!("n={n}: {} quorums, min overlap {min}", qs.len()));
    }
    Ok(out.join(", "))
}

fn c8_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    for i in 0..20usize {
        let name = PRESET_NAMES[i % PRESET_NAMES.len()];
        let cfg = preset(name).unwrap();
        let seed = 11 * i as u64 + 3;
        let mut bytes = Vec::new();
        for k in 0..2 {
            let (trace, _) = run_trace(&cfg, seed).map_err(|e| e.to_string())?;
            let path = dir.path().join(format!("{name}-{seed}-{k}.jsonl"));
            trace.write(&path).map_err(|e| e.to_string())?;
            bytes.push(std::fs::read(&path).map_err(|e| e.to_string())?);
        }
        if bytes[0] != bytes[1] {
            return Err(format!("{name} seed {seed}: traces differ"));
        }
    }
    Ok("20 (preset, seed) pairs byte-identical".into())
}

fn wal_outcome_labels() -> BTreeSet<&'static str> {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut seen = BTreeSet::new();
    for _ in 0..2000 {
        let mut entries: Vec<WalEntry> = (0..rng.gen_range(0..4))
            .map(|_| {
                let h = rng.gen_range(1..8);
                match rng.gen_range(0..3) {
                    0 => WalRecord {
                        round: rng.gen_range(0..3),
                        proposal: BlockValue {
                            height: h,
                            transactions: vec![TxId::new(1)],
                            read_write_hash: 0,
                            prev_block_id: 0,
                            proposer_index: 0,
                        },
                        locked: None,
                    }
                    .entry(),
                    1 => WalEntry {
                        height: h,
                        entry_type: WalEntryType::ProposalEntry,
                        payload: vec![0xff],
                    },
                    _ => WalEntry {
                        height: h,
                        entry_type: WalEntryType::Other,
                        payload: Vec::new(),
                    },
                }
            })
            .collect();
        entries.sort_by_key(|e| e.height);
        let mode = if rng.gen_bool(0.8) { WalMode::WalWrite } else { WalMode::NonWalWrite };
        let st = WalState { mode, entries };
        seen.insert(reply_wal(&st, rng.gen_range(0..8)).label());
    }
    seen
}

fn c9_wal_recovery() -> Outcome {
    let results: Vec<Result<(usize, String), String>> = (0..100u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE + i);
            let mut cfg = ScenarioConfig::new(4);
            cfg.heights = 3;
            cfg.crashes = vec![CrashSpec {
                node: rng.gen_range(0..4),
                event_index: rng.gen_range(1..40),
                downtime: rng.gen_range(1..60),
            }];
            let trace = reparse(&run(&cfg, i).map_err(|e| format!("crash run {i}: {e}"))?);
            let conflicts = check_precommit_consistency(&trace);
            if !conflicts.is_empty() {
                return Err(format!("crash run {i}: {conflicts:?}"));
            }
            if check_agreement(&trace) != AgreementReport::Agreement {
                return Err(format!("crash run {i}: disagreement"));
            }
            let outcome = trace
                .of_kind("wal")
                .find(|r| r.payload["op"] == "replay")
                .map(|r| r.payload["outcome"].as_str().unwrap_or("").to_string())
                .unwrap_or_default();
            Ok((trace.of_kind("crash").count(), outcome))
        })
        .collect();
    let mut crashes = 0;
    let mut outcomes = BTreeSet::new();
    for r in results {
        let (c, o) = r?;
        crashes += c;
        outcomes.insert(o);
    }
    if crashes != 100 {
        return Err(format!("only {crashes} of 100 crash points were reached"));
    }
    let labels = wal_outcome_labels();
    if labels.len() != 7 {
        return Err(format!("generator reached only {labels:?}"));
    }
    Ok(format!("{crashes} crashes, replay outcomes {outcomes:?}, generator covers all 7"))
}

fn c10_random_tx_exclusion() -> Outcome {
    let mut cfg = ScenarioConfig::new(4);
    let random = 1000;
    cfg.random_txs = vec![random];
    let f = cfg.fault_bound();
    let trace = reparse(&run(&cfg, 4).map_err(|e| e.to_string())?);
    let removals: Vec<_> = trace
        .of_kind("remove_tx")
        .filter(|r| r.payload["tx"] == random)
        .collect();
    if removals.is_empty() {
        return Err("random transaction never removed".into());
    }
    let nil_reporters: BTreeSet<u64> = trace
        .of_kind("prevote")
        .filter(|r| {
            r.payload["value"].is_null()
                && r.payload["randomTxIds"].as_array().is_some_and(|a| a.iter().any(|t| *t == random))
        })
        .filter_map(|r| r.node.map(|n| n as u64))
        .collect();
    for r in &removals {
        let reporters: BTreeSet<u64> = r.payload["reporters"]
            .as_array()
            .map(|a| a.iter().filter_map(|v| v.as_u64()).collect())
            .unwrap_or_default();
        if reporters.len() != f + 1 {
            return Err(format!("node {:?} removed after {} reports", r.node, reporters.len()));
        }
        if !reporters.is_subset(&nil_reporters) {
            return Err(format!("node {:?} counted {reporters:?}, nil reporters {nil_reporters:?}", r.node));
        }
    }
    let decide = trace.of_kind("decide").next().ok_or("no decision")?;
    let txs: Vec<TxId> = serde_json::from_value(decide.payload["block"]["transactions"].clone()).map_err(|e| e.to_string())?;
    if txs.iter().any(|t| t.id == random) {
        return Err("decided block still carries the random transaction".into());
    }
    Ok(format!(
        "{} nodes removed tx {random} after exactly {} reports; decided in round {}",
        removals.len(),
        f + 1,
        decide.round
    ))
}

fn c11_bound_identity() -> Outcome {
    let mut checked = 0;
    for delta in [1u64, 3, 10] {
        for f in 0..=50u64 {
            let mut sum = 0;
            for r in 0..=f {
                sum += (1 + r) * delta;
            }
            let expanded = 4 * sum + 4 * (f + 2) * delta;
            if expanded != bound(f, delta) {
                return Err(format!("f={f} delta={delta}: {expanded} != {}", bound(f, delta)));
            }
            checked += 1;
        }
    }
    let cfg = proptest::test_runner::Config {
        failure_persistence: None,
        ..Default::default()
    };
    proptest::proptest!(cfg, |(f in 0u64..=50, delta in proptest::sample::select(vec![1u64, 3, 10]))| {
        let sum: u64 = (0..=f).map(|r| (1 + r) * delta).sum();
        proptest::prop_assert_eq!(4 * sum + 4 * (f + 2) * delta, bound(f, delta));
    });
    Ok(format!("{checked} (f, delta) pairs exact, property holds"))
}

fn delivery_audit_on_presets() -> Result<(), String> {
    for name in PRESET_NAMES {
        let (trace, _) = run_trace(&preset(name).unwrap(), 1).map_err(|e| e.to_string())?;
        let bad = audit_delivery(&reparse(&trace)).map_err(|e| e.to_string())?;
        if let Some(v) = bad.first() {
            return Err(format!("{name}: {v:?}"));
        }
    }
    Ok(())
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("1 worst-case bound", c1_worst_case_bound),
        ("2 non-timeout latency", c2_fast_path_latency),
        ("3 case 3 schedule", c3_case3_schedule),
        ("4 agreement under adversary sweep", c4_agreement_sweep),
        ("5 liveness-failure witness", c5_liveness_failure),
        ("6 timeout linearity", c6_timeout_linearity),
        ("7 quorum intersection", c7_quorum_intersection),
        ("8 determinism", c8_determinism),
        ("9 WAL crash recovery", c9_wal_recovery),
        ("10 random-tx exclusion", c10_random_tx_exclusion),
        ("11 bound identity", c11_bound_identity),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let start = Instant::now();
        let res = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(detail) => println!("PASS criterion {name} ({secs:.2}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {name} ({secs:.2}s): {detail}");
            }
        }
    }
    if let Err(e) = delivery_audit_on_presets() {
        failed += 1;
        println!("FAIL delivery bound audit: {e}");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
