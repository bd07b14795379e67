//! `tmsim`: run scenarios, check traces, and evaluate the termination bound.
//!
//! Exit codes: 0 clean, 1 a check found a violation (or a run hit its
//! horizon), 2 bad input such as a malformed config or unreadable trace.

use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use tmsim_core::analysis::{
    audit_delivery, bound, check_agreement, check_case3_schedule, check_double_decisions, check_termination,
    decision_stats, AgreementReport, TraceMeta,
};
use tmsim_core::config::{preset, ConfigError, ScenarioConfig, PRESET_NAMES};
use tmsim_core::sim::{run_trace, Trace};

const TRACE_DIR_VAR: &str = "SIM_TRACE_DIR";

#[derive(Parser)]
#[command(name = "tmsim", version, about = "Deterministic simulator and trace checker for a Tendermint-style BFT engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one scenario and write its trace.
    Run {
        /// Config file, or the name of a built-in preset.
        #[arg(long)]
        config: String,
        /// Overrides the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; defaults to $SIM_TRACE_DIR (or .) / <config>-seed<S>.jsonl.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Check a trace for agreement, the termination bound and, for worst-case
    /// runs, the first-honest-round schedule.
    Check {
        #[arg(long)]
        trace: PathBuf,
        /// Config the trace should have been produced from; its parameters
        /// are compared against the trace header.
        #[arg(long)]
        config: Option<String>,
    },
    /// Print the closed-form termination bound 2(f+2)(f+3)Δ.
    Bound {
        #[arg(long)]
        f: u64,
        #[arg(long)]
        delta: u64,
    },
    /// Run a seed range in parallel; fails if any run violates a check.
    Batch {
        #[arg(long)]
        config: String,
        /// `A..B` (exclusive) or `A..=B`.
        #[arg(long)]
        seeds: String,
        /// Worker threads; defaults to the number of cores.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Built-in scenarios.
    Scenario {
        #[command(subcommand)]
        cmd: ScenarioCmd,
    },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Name and description of every preset.
    List,
    /// Full JSON config of one preset.
    Show { name: String },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Run { config, seed, trace } => cmd_run(&config, seed, trace),
        Cmd::Check { trace, config } => cmd_check(&trace, config.as_deref()),
        Cmd::Bound { f, delta } => {
            println!("{}", bound(f, delta));
            Ok(true)
        }
        Cmd::Batch { config, seeds, jobs } => cmd_batch(&config, &seeds, jobs),
        Cmd::Scenario { cmd } => cmd_scenario(cmd),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// Loads a config file, falling back to a preset when no such file exists.
fn load_config(source: &str) -> Result<(String, ScenarioConfig)> {
    let path = Path::new(source);
    if path.exists() {
        let cfg = ScenarioConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
        let label = path.file_stem().map_or("trace".into(), |s| s.to_string_lossy().into_owned());
        return Ok((label, cfg));
    }
    match preset(source) {
        Ok(cfg) => Ok((source.to_string(), cfg)),
        Err(ConfigError::UnknownPreset(_)) => bail!("{source:?} is neither a config file nor a preset"),
        Err(e) => Err(e.into()),
    }
}

fn trace_dir() -> PathBuf {
    std::env::var_os(TRACE_DIR_VAR).map_or_else(|| PathBuf::from("."), PathBuf::from)
}

fn cmd_run(source: &str, seed: Option<u64>, out: Option<PathBuf>) -> Result<bool> {
    let (label, cfg) = load_config(source)?;
    let seed = seed.unwrap_or(cfg.seed);
    let (trace, completed) = run_trace(&cfg, seed)?;
    let out = out.unwrap_or_else(|| trace_dir().join(format!("{label}-seed{seed}.jsonl")));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    trace.write(&out).with_context(|| format!("writing {}", out.display()))?;

    let end = trace.records.last().map_or(0, |r| r.t);
    let decisions = trace.of_kind("decide").count();
    let status = if completed { "completed" } else { "horizon exceeded" };
    println!("{label} seed {seed}: {status} at tick {end}, {decisions} decide records");
    if let Some((min, max, mean)) = decision_stats(&trace) {
        println!("decide ticks: min {min}, max {max}, mean {mean:.1}");
    }
    println!("trace: {} ({} records)", out.display(), trace.records.len());
    Ok(completed)
}

fn cmd_check(path: &Path, source: Option<&str>) -> Result<bool> {
    let trace = Trace::read(path).with_context(|| format!("reading {}", path.display()))?;
    let meta = TraceMeta::from_trace(&trace).ok_or_else(|| anyhow!("{} has no config header", path.display()))?;
    if let Some(source) = source {
        let (_, cfg) = load_config(source)?;
        ensure_matches(&meta, &cfg)?;
    }
    let mut clean = true;
    let mut report = |ok: bool, line: String| {
        clean &= ok;
        println!("{} {line}", if ok { "ok  " } else { "FAIL" });
    };

    match check_agreement(&trace) {
        AgreementReport::Agreement => report(true, "agreement".into()),
        AgreementReport::Conflict { height, values, nodes } => {
            report(false, format!("agreement: height {height} values {values:?} at nodes {nodes:?}"))
        }
    }
    let doubles = check_double_decisions(&trace);
    report(doubles.is_empty(), format!("single decision per height: {} repeats", doubles.len()));

    match check_termination(&trace) {
        Ok(b) => {
            for (h, t) in &b.measured {
                let limit = b.gst + b.t_star;
                report(b.compliant[h], format!("termination height {h}: decided by {t}, limit {limit}"));
            }
        }
        Err(e) => report(false, format!("termination: {e}")),
    }

    let strategy = trace
        .records
        .iter()
        .find(|r| r.kind == "config")
        .and_then(|r| r.payload["strategy"].as_str().map(str::to_string))
        .unwrap_or_default();
    if strategy == "worst_case_f_rounds" && meta.gst == 0 {
        match check_case3_schedule(&trace) {
            Ok(c) => {
                for m in &c.milestones {
                    report(true, format!("round {} {}: {} <= {}", c.round, m.name, m.at, m.limit));
                }
            }
            Err(e) => report(false, format!("schedule: {e}")),
        }
    } else {
        println!("skip schedule check (applies to worst_case_f_rounds with gst 0)");
    }

    match audit_delivery(&trace) {
        Ok(v) => report(v.is_empty(), format!("delivery audit: {} violations", v.len())),
        Err(e) => report(false, format!("delivery audit: {e}")),
    }
    Ok(clean)
}

fn ensure_matches(meta: &TraceMeta, cfg: &ScenarioConfig) -> Result<()> {
    let tp = cfg.time_params();
    let pairs = [
        ("n", meta.n as u64, cfg.n as u64),
        ("f", meta.f, cfg.fault_bound() as u64),
        ("delta", meta.delta, cfg.delta),
        ("gst", meta.gst, cfg.gst),
        ("heights", meta.heights, cfg.heights),
        ("tauInit", meta.tau_init, tp.tau_init),
        ("tauStep", meta.tau_step, tp.tau_step),
    ];
    for (key, in_trace, in_config) in pairs {
        if in_trace != in_config {
            bail!("trace has {key} = {in_trace} but the config says {in_config}");
        }
    }
    Ok(())
}

fn parse_seeds(s: &str) -> Result<RangeInclusive<u64>> {
    let (a, b, inclusive) = if let Some((a, b)) = s.split_once("..=") {
        (a, b, true)
    } else if let Some((a, b)) = s.split_once("..") {
        (a, b, false)
    } else {
        bail!("seed range {s:?} is not A..B or A..=B");
    };
    let a: u64 = a.trim().parse().with_context(|| format!("seed range start {a:?}"))?;
    let b: u64 = b.trim().parse().with_context(|| format!("seed range end {b:?}"))?;
    let end = if inclusive { b } else { b.checked_sub(1).filter(|e| *e >= a).ok_or_else(|| anyhow!("empty seed range {s:?}"))? };
    if end < a {
        bail!("empty seed range {s:?}");
    }
    Ok(a..=end)
}

struct SeedOutcome {
    seed: u64,
    problems: Vec<String>,
    slowest: Option<u64>,
}

fn check_seed(cfg: &ScenarioConfig, label: &str, seed: u64, dir: Option<&Path>) -> Result<SeedOutcome> {
    let (trace, completed) = run_trace(cfg, seed)?;
    if let Some(dir) = dir {
        let out = dir.join(format!("{label}-seed{seed}.jsonl"));
        trace.write(&out).with_context(|| format!("writing {}", out.display()))?;
    }
    let mut problems = Vec::new();
    if !completed {
        problems.push("horizon exceeded".to_string());
    }
    if let AgreementReport::Conflict { height, values, .. } = check_agreement(&trace) {
        problems.push(format!("conflict at height {height}: {values:?}"));
    }
    if !check_double_decisions(&trace).is_empty() {
        problems.push("double decision".to_string());
    }
    let mut slowest = None;
    if completed {
        match check_termination(&trace) {
            Ok(b) => {
                slowest = b.measured.values().max().copied();
                if !b.all_compliant() {
                    problems.push(format!("bound {} exceeded: {:?}", b.gst + b.t_star, b.measured));
                }
            }
            Err(e) => problems.push(e.to_string()),
        }
    }
    Ok(SeedOutcome { seed, problems, slowest })
}

fn cmd_batch(source: &str, seeds: &str, jobs: Option<usize>) -> Result<bool> {
    let (label, cfg) = load_config(source)?;
    let seeds = parse_seeds(seeds)?;
    let dir = std::env::var_os(TRACE_DIR_VAR).map(PathBuf::from);
    if let Some(d) = &dir {
        std::fs::create_dir_all(d).with_context(|| format!("creating {}", d.display()))?;
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.unwrap_or(0)).build()?;
    let outcomes: Vec<SeedOutcome> = pool.install(|| {
        seeds
            .clone()
            .into_par_iter()
            .map(|s| check_seed(&cfg, &label, s, dir.as_deref()))
            .collect::<Result<_>>()
    })?;

    let mut failed = 0;
    for o in outcomes.iter().filter(|o| !o.problems.is_empty()) {
        failed += 1;
        println!("seed {}: {}", o.seed, o.problems.join("; "));
    }
    let slowest = outcomes.iter().filter_map(|o| o.slowest).max();
    let limit = cfg.gst + bound(cfg.fault_bound() as u64, cfg.delta);
    println!(
        "{label}: {} runs, {failed} with violations, slowest decision {}, bound {limit}",
        outcomes.len(),
        slowest.map_or("-".into(), |t| t.to_string()),
    );
    Ok(failed == 0)
}

fn cmd_scenario(cmd: ScenarioCmd) -> Result<bool> {
    match cmd {
        ScenarioCmd::List => {
            for name in PRESET_NAMES {
                let c = preset(name)?;
                println!("{name:<8} n={} {}", c.n, c.description.unwrap_or_default());
            }
        }
        ScenarioCmd::Show { name } => println!("{}", preset(&name)?.to_json_pretty()),
    }
    Ok(true)
}
