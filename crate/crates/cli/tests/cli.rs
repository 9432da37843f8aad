mod support;

use std::io::{BufRead, BufReader};
use std::process::{Command, Stdio};

use serde_json::Value;

use semfuzz_core::campaign::{read_findings, FindingLine, Status};
use semfuzz_core::message::ProtocolId;
use semfuzz_fixtures::{serve, BugId, FixtureConfig};

use support::{root, semfuzz, tree};

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|e| panic!("{e}: {text}"))
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(semfuzz(&["frobnicate"]).code, 2);
    assert_eq!(semfuzz(&["eval", "rules"]).code, 2);
    assert_eq!(semfuzz(&["campaign", "run", "--mode", "sideways"]).code, 2);
    assert_eq!(semfuzz(&["--help"]).code, 0);
}

#[test]
fn runtime_errors_exit_1_with_a_json_diagnostic() {
    let run = semfuzz(&["eval", "cases", "--manifest", "no/such/manifest.json"]);
    assert_eq!(run.code, 1);
    let line = run.stderr.lines().last().unwrap();
    let v = json(line);
    assert_eq!(v["level"], "error");
    assert!(v["message"].as_str().unwrap().contains("manifest.json"));
}

#[test]
fn unknown_config_keys_are_runtime_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"llm": {"top-p": 0.3}}"#).unwrap();
    let run = semfuzz(&[
        "--config",
        cfg.to_str().unwrap(),
        "eval",
        "cases",
        "--manifest",
        "data/golden/cases/manifest.json",
    ]);
    assert_eq!(run.code, 1);
}

#[test]
fn eval_cases_reports_accuracy() {
    let run = semfuzz(&[
        "eval",
        "cases",
        "--manifest",
        "data/golden/cases/manifest.json",
    ]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let manifest =
        json(&std::fs::read_to_string(root().join("data/golden/cases/manifest.json")).unwrap());
    let cases = manifest["cases"].as_array().unwrap();
    let valid = cases.iter().filter(|c| c["valid"] == true).count();
    assert_eq!(
        json(&run.stdout)["accuracy"].as_f64().unwrap(),
        valid as f64 / cases.len() as f64
    );
}

#[test]
fn eval_rules_reports_counts() {
    let run = semfuzz(&[
        "eval",
        "rules",
        "--extracted",
        "data/golden/rules.json",
        "--benchmark",
        "data/bench/bench.json",
    ]);
    assert_eq!(run.code, 0, "{}", run.stderr);
    let v = json(&run.stdout);
    assert_eq!(
        (v["tp"].as_u64(), v["fp"].as_u64(), v["fn"].as_u64()),
        (Some(8), Some(8), Some(4))
    );
    assert_eq!(v["threshold"], 0.5);
    let stricter = semfuzz(&[
        "eval",
        "rules",
        "--extracted",
        "data/golden/rules.json",
        "--benchmark",
        "data/bench/bench.json",
        "--threshold",
        "1.0",
    ]);
    assert!(json(&stricter.stdout)["tp"].as_u64().unwrap() < 8);
}

#[test]
fn stages_one_by_one_match_the_golden_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let cfg = ["--config", "data/config/replay.json"];
    let step = |args: &[&str]| {
        let all: Vec<&str> = cfg.iter().copied().chain(args.iter().copied()).collect();
        semfuzz(&all)
    };
    assert_eq!(
        step(&["rules", "extract", "--out", &d("rules.json")]).code,
        0
    );
    assert_eq!(
        step(&[
            "strategies",
            "gen",
            "--rules",
            &d("rules.json"),
            "--out",
            &d("strategies.json")
        ])
        .code,
        0
    );
    assert_eq!(
        step(&[
            "cases",
            "gen",
            "--strategies",
            &d("strategies.json"),
            "--out",
            &d("cases")
        ])
        .code,
        0
    );
    let campaign = step(&[
        "campaign",
        "run",
        "--cases",
        &d("cases"),
        "--out",
        &d("findings.jsonl"),
    ]);
    assert_eq!(campaign.code, 10, "{}", campaign.stderr);
    assert_eq!(json(&campaign.stdout)["potential_vulnerabilities"], 4);
    assert_eq!(tree(dir.path()), tree(&root().join("data/golden")));
}

fn tls_findings(bugs: &[BugId]) -> (i32, Vec<FindingLine>) {
    let mut fixture =
        serve(FixtureConfig::new(ProtocolId::Tls13).with_bugs(bugs.iter().copied())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("findings.jsonl");
    let target = fixture.local_addr().to_string();
    let run = semfuzz(&[
        "campaign",
        "run",
        "--cases",
        "data/golden/cases",
        "--target",
        &target,
        "--protocol",
        "tls",
        "--mode",
        "client",
        "--probe",
        "--out",
        out.to_str().unwrap(),
    ]);
    fixture.shutdown();
    (run.code, read_findings(&out).unwrap())
}

#[test]
fn campaign_against_an_explicit_target() {
    let pvs = |lines: &[FindingLine]| {
        lines
            .iter()
            .filter_map(|l| match l {
                FindingLine::Verdict(v) if v.status == Status::PotentialVulnerability => {
                    Some(v.case_id.clone())
                }
                _ => None,
            })
            .collect::<Vec<_>>()
    };
    let (code, lines) = tls_findings(&[BugId::PskNotLastAccepted]);
    assert_eq!(code, 10);
    assert_eq!(pvs(&lines), ["R015-S1-T1"]);
    assert!(lines
        .iter()
        .all(|l| !matches!(l, FindingLine::Verdict(v) if v.protocol != ProtocolId::Tls13)));
    let (code, lines) = tls_findings(&[]);
    assert_eq!(code, 0);
    assert!(pvs(&lines).is_empty());
}

#[test]
fn fixtures_serve_announces_its_address() {
    let mut child = Command::new(env!("CARGO_BIN_EXE_semfuzz"))
        .args([
            "fixtures",
            "serve",
            "--protocol",
            "http",
            "--bugs",
            "cl-whitespace-accepted",
            "--port",
            "0",
        ])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut reader = BufReader::new(child.stdout.take().unwrap());
    let mut text = String::new();
    while !text.trim_end().ends_with('}') {
        assert!(reader.read_line(&mut text).unwrap() > 0, "no announcement");
    }
    child.kill().unwrap();
    child.wait().unwrap();
    let v = json(&text);
    assert_eq!(v["protocol"], "HTTP1");
    assert!(v["addr"].as_str().unwrap().starts_with("127.0.0.1:"));
    assert_eq!(v["bugs"][0], "cl-whitespace-accepted");
}

#[test]
fn fixtures_serve_rejects_unknown_bugs() {
    assert_eq!(
        semfuzz(&["fixtures", "serve", "--protocol", "tls", "--bugs", "nope"]).code,
        1
    );
}
