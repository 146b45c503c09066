use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const FIGURE1: &str = include_str!("../scenarios/figure1.scn");

fn safe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_safe")).args(args).output().expect("binary runs")
}

fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path
}

fn arg(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn figure1_passes() {
    let out = safe(&["run", concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/figure1.scn")]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
}

#[test]
fn expecting_bob_to_get_the_photo_fails() {
    let dir = TempDir::new().unwrap();
    let text = FIGURE1.replace("bob-denied = run leak-to-bob -> FlowDenied", "bob-denied = run leak-to-bob -> ok");
    let path = write(&dir, "wrong.scn", &text);
    let out = safe(&["run", arg(&path)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("FlowDenied"));
}

#[test]
fn malformed_section_is_a_parse_error_with_a_line() {
    let dir = TempDir::new().unwrap();
    let path = write(&dir, "bad.scn", "[principals]\nalice = user\n\n[bogus]\nx = y\n");
    let out = safe(&["run", arg(&path)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 4"), "{err}");
}

#[test]
fn missing_file_is_an_internal_error() {
    let out = safe(&["run", "/nonexistent/scenario.scn"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn json_report_lists_every_expectation() {
    let dir = TempDir::new().unwrap();
    let path = write(&dir, "figure1.scn", FIGURE1);
    let out = safe(&["run", arg(&path), "--json", "--seed", "7"]);
    assert_eq!(out.status.code(), Some(0));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["seed"], 7);
    assert_eq!(report["expectations"].as_array().unwrap().len(), 15);
    assert!(report.get("trace").is_none());
}

#[test]
fn exported_trace_audits_clean_and_tampering_is_caught() {
    let dir = TempDir::new().unwrap();
    let path = write(&dir, "figure1.scn", FIGURE1);
    let out = safe(&["run", arg(&path), "--trace"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let trace: String = text
        .lines()
        .skip_while(|l| !l.starts_with("# safe-trace"))
        .take_while(|l| l.starts_with('#') || l.starts_with(|c: char| c.is_ascii_digit()))
        .map(|l| format!("{l}\n"))
        .collect();
    let clean = write(&dir, "clean.trace", &trace);
    let out = safe(&["audit", arg(&clean)]);
    assert_eq!(out.status.code(), Some(0), "{}", stdout(&out));
    assert!(stdout(&out).contains("0 violations"));

    let forged: String = trace
        .lines()
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            if f.len() == 6 && f[5] == "readers" && f[2].starts_with("betty-phone/") {
                let mut f = f.clone();
                f[2] = "eve-cloud";
                format!("{}\n", f.join("\t"))
            } else {
                format!("{l}\n")
            }
        })
        .collect();
    assert_ne!(forged, trace);
    let bad = write(&dir, "forged.trace", &forged);
    let out = safe(&["audit", arg(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("violation"));
}

#[test]
fn bench_merge_reports_timings() {
    let out = safe(&["bench-merge", "5", "20", "--rounds", "100"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(stdout(&out).contains("merged 5 labels of 20 readers"));
}
