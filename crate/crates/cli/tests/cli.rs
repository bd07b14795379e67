use std::path::Path;
use std::process::{Command, Output};

fn tmsim(args: &[&str], trace_dir: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_tmsim"));
    cmd.args(args);
    match trace_dir {
        Some(d) => cmd.env("SIM_TRACE_DIR", d),
        None => cmd.env_remove("SIM_TRACE_DIR"),
    };
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn bound_prints_the_closed_form() {
    let o = tmsim(&["bound", "--f", "1", "--delta", "10"], None);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o).trim(), "240");
    let o = tmsim(&["bound", "--f", "3", "--delta", "2"], None);
    assert_eq!(stdout(&o).trim(), "120");
}

#[test]
fn run_then_check_in_a_separate_process() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("honest.jsonl");
    let t = trace.to_str().unwrap();
    let o = tmsim(&["run", "--config", "honest", "--seed", "3", "--trace", t], None);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("completed"));

    let o = tmsim(&["check", "--trace", t, "--config", "honest"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("ok   agreement"));
}

#[test]
fn worst_case_check_includes_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let o = tmsim(&["run", "--config", "case3", "--seed", "1"], Some(dir.path()));
    assert_eq!(o.status.code(), Some(0));
    let trace = dir.path().join("case3-seed1.jsonl");
    assert!(trace.exists());
    let o = tmsim(&["check", "--trace", trace.to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("round 2 commit"));
}

#[test]
fn doctored_trace_fails_the_check() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let t = trace.to_str().unwrap();
    tmsim(&["run", "--config", "honest", "--trace", t], None);
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut decide = text.lines().find(|l| l.contains("\"kind\":\"decide\"")).unwrap().to_string();
    decide = decide.replacen("\"t\":", "\"t\":9", 1);
    std::fs::write(&trace, format!("{text}{decide}\n")).unwrap();
    let o = tmsim(&["check", "--trace", t], None);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
}

#[test]
fn config_missing_n_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"delta": 10, "heights": 1}"#).unwrap();
    let o = tmsim(&["run", "--config", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing field `n`"));
}

#[test]
fn mismatched_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("t.jsonl");
    let t = trace.to_str().unwrap();
    tmsim(&["run", "--config", "honest", "--trace", t], None);
    let o = tmsim(&["check", "--trace", t, "--config", "case1b"], None);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn horizon_exceeded_run_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("stall.json");
    let json = r#"{"n": 4, "f": 1, "maxTicks": 300,
        "adversary": {"strategy": "withhold_votes", "corrupted": [1, 2], "strict": false}}"#;
    std::fs::write(&cfg, json).unwrap();
    let o = tmsim(&["run", "--config", cfg.to_str().unwrap()], Some(dir.path()));
    assert_eq!(o.status.code(), Some(1), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("horizon exceeded"));
}

#[test]
fn batch_over_a_seed_range() {
    let o = tmsim(&["batch", "--config", "case2a", "--seeds", "0..8", "--jobs", "2"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("8 runs, 0 with violations"));
}

#[test]
fn scenario_listing() {
    let o = tmsim(&["scenario", "list"], None);
    let out = stdout(&o);
    for name in ["case1a", "case2c", "case3"] {
        assert!(out.contains(name), "{out}");
    }
    let o = tmsim(&["scenario", "show", "case3"], None);
    assert!(stdout(&o).contains("worst_case_f_rounds"));
    assert_eq!(tmsim(&["scenario", "show", "nope"], None).status.code(), Some(2));
}

#[test]
fn shipped_configs_match_the_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for name in ["honest", "case1a", "case1b", "case1c", "case2a", "case2b", "case2c", "case3"] {
        let file = dir.join(format!("{name}.json"));
        let shown = stdout(&tmsim(&["scenario", "show", name], None));
        assert_eq!(std::fs::read_to_string(&file).unwrap(), shown, "{name}");
        let o = tmsim(&["batch", "--config", file.to_str().unwrap(), "--seeds", "0..2"], None);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stdout(&o));
    }
}
