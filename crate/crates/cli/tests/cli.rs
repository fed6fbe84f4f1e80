use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn semfeed(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semfeed")).args(args).output().expect("spawn semfeed")
}

fn scenarios_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn run_writes_reports_and_trace_that_replays() {
    let out = tempfile::tempdir().unwrap();
    let scenario = scenarios_dir().join("occlusion_crossing.toml");
    let o = semfeed(&["run", "--scenario", p(&scenario), "--seed", "4", "--anticipation", "on", "--out", p(out.path())]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("completed=true"));

    let csv = std::fs::read_to_string(out.path().join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().next().unwrap().starts_with("scenario,seed,rep,anticipation,completed"));
    let jsonl = std::fs::read_to_string(out.path().join("report.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["record"], "run");
    assert_eq!(first["seed"], 4);

    let trace = out.path().join("trace_occlusion_crossing_s4_r0_on.jsonl");
    assert!(trace.exists());
    let r = semfeed(&["replay", "--trace", p(&trace)]);
    assert_eq!(r.status.code(), Some(0));
    let digest = first["digest"].as_str().unwrap();
    assert!(stdout(&r).contains(&format!("replay ok: {digest}")));
}

#[test]
fn tampered_trace_fails_replay() {
    let out = tempfile::tempdir().unwrap();
    let scenario = scenarios_dir().join("occlusion_crossing.toml");
    let o = semfeed(&["run", "--scenario", p(&scenario), "--seed", "1", "--anticipation", "off", "--out", p(out.path())]);
    assert_eq!(o.status.code(), Some(0));
    let trace = out.path().join("trace_occlusion_crossing_s1_r0_off.jsonl");
    let text = std::fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.truncate(lines.len() - 1);
    std::fs::write(&trace, lines.join("\n")).unwrap();
    let r = semfeed(&["replay", "--trace", p(&trace)]);
    assert_eq!(r.status.code(), Some(1));
    assert!(stdout(&r).contains("replay mismatch"));
}

#[test]
fn batch_writes_pairs_summaries_and_traces() {
    let dir = tempfile::tempdir().unwrap();
    let scenarios = dir.path().join("scenarios");
    std::fs::create_dir(&scenarios).unwrap();
    std::fs::copy(scenarios_dir().join("occlusion_crossing.toml"), scenarios.join("occlusion_crossing.toml")).unwrap();
    let out = dir.path().join("out");
    let o = semfeed(&["batch", "--scenarios", p(&scenarios), "--seeds", "0..2", "--reps", "2", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("summary occlusion_crossing on min_safety_distance n=4"));
    assert!(text.contains("delta occlusion_crossing min_safety_distance n=4"));

    let jsonl = std::fs::read_to_string(out.join("report.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let runs: Vec<&serde_json::Value> = records.iter().filter(|r| r["record"] == "run").collect();
    assert_eq!(runs.len(), 8);
    // repetitions of the same seed are identical runs
    let digests = |seed: u64, on: bool| -> Vec<&str> {
        runs.iter()
            .filter(|r| r["seed"] == seed && r["anticipation"] == on)
            .map(|r| r["digest"].as_str().unwrap())
            .collect()
    };
    let d = digests(0, true);
    assert_eq!(d.len(), 2);
    assert_eq!(d[0], d[1]);
    assert_ne!(digests(0, true)[0], digests(0, false)[0]);
    assert!(records.iter().any(|r| r["record"] == "summary"));
    assert!(records.iter().any(|r| r["record"] == "delta"));

    let traces = std::fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("trace_")).count();
    assert_eq!(traces, 8);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 9);
}

#[test]
fn incomplete_run_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenarios_dir().join("carry_layout.toml")).unwrap();
    let short = text.replace("max_duration = 400.0", "max_duration = 5.0");
    assert_ne!(short, text);
    let scenario = dir.path().join("short.toml");
    std::fs::write(&scenario, short).unwrap();
    let o = semfeed(&["run", "--scenario", p(&scenario), "--out", p(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("completed=false"));
}

#[test]
fn bad_inputs_are_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = semfeed(&["run", "--scenario", p(&missing), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error:"));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "id = \"bad\"\nmax_duration = -1.0\n[map]\nsize = [2.0, 2.0]\n[robot]\npose = { x = 1.0, y = 1.0, theta = 0.0 }\n").unwrap();
    assert_eq!(semfeed(&["run", "--scenario", p(&bad), "--out", p(dir.path())]).status.code(), Some(2));

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(semfeed(&["batch", "--scenarios", p(&empty), "--seeds", "0..1", "--out", p(dir.path())]).status.code(), Some(2));

    // argument errors come from the parser
    assert_eq!(semfeed(&["batch", "--scenarios", p(&empty), "--seeds", "5..2"]).status.code(), Some(2));
    assert_eq!(semfeed(&["run", "--scenario", p(&bad), "--anticipation", "maybe"]).status.code(), Some(2));
    assert_eq!(semfeed(&["replay", "--trace", p(&missing)]).status.code(), Some(2));
}
