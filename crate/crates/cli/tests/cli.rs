use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../operators").join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fredholm-lab")).args(args).output().expect("binary runs")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).expect("valid JSON on stdout")
}

fn scratch(name: &str, body: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("fredholm-lab-tests-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn geom_succeeds_with_text_and_json() {
    let f = fixture("hvz_step.op");
    let out = run(&["geom", f.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("t=+inf") && text.contains("predicate: holds"), "{text}");
    let out = run(&["geom", f.to_str().unwrap(), "--format", "json"]);
    let v = json(&out);
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["command"], "geom");
    assert_eq!(v["input"]["geometry"], "sc[1]");
}

#[test]
fn parse_errors_exit_2_with_a_position() {
    let p = scratch(
        "broken.op",
        "geometry { class = \"sc\" dim = 1 }\noperator {\n  order = 2\n  coeff \"1 +\" gens [dt, dt]\n}\n",
    );
    let out = run(&["check", p.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: ") && err.contains("broken.op:4:"), "{err}");
    let out = run(&["geom", "/nonexistent/x.op"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn strict_exits_3_on_indeterminate() {
    let f = fixture("bad_isotropy.op");
    let out = run(&["check", f.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let out = run(&["check", f.to_str().unwrap(), "--strict", "--format", "json"]);
    assert_eq!(out.status.code(), Some(3));
    let v = json(&out);
    assert_eq!(v["status"]["indeterminate"], true);
    let reason = v["payload"]["verdicts"][0]["reasons"][0].as_str().unwrap();
    assert!(reason.starts_with("limit-criterion not justified"), "{reason}");
}

#[test]
fn override_unlocks_the_verdict() {
    let f = fixture("bad_isotropy.op");
    let out = run(&["check", f.to_str().unwrap(), "--override", "--format", "json", "--strict"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(json(&out)["payload"]["verdicts"][0]["result"], "fredholm");
}

#[test]
fn stub_engine_disagreements_exit_4() {
    let f = fixture("hvz_step.op");
    let out =
        run(&["validate", f.to_str().unwrap(), "--lambda-grid", "1.5:2:0.5", "--stub-engine", "--format", "json"]);
    assert_eq!(out.status.code(), Some(4));
    let v = json(&out);
    assert!(v["status"]["disagreements"].as_u64().unwrap() >= 1);
    let out = run(&["validate", f.to_str().unwrap(), "--lambda-grid", "1.5:2:0.5"]);
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn json_is_deterministic_apart_from_timing() {
    let f = fixture("hvz_step.op");
    let strip = |o: &Output| {
        let mut v = json(o);
        v.as_object_mut().unwrap().remove("timing_ms");
        serde_json::to_string(&v).unwrap()
    };
    for cmd in ["limits", "check", "essspec"] {
        let a = run(&[cmd, f.to_str().unwrap(), "--format", "json", "--lambda-grid", "0:2:0.5"]);
        let b = run(&[cmd, f.to_str().unwrap(), "--format", "json", "--lambda-grid", "0:2:0.5"]);
        assert_eq!(strip(&a), strip(&b), "{cmd}");
    }
}

#[test]
fn csv_has_a_header_and_one_row_per_lambda() {
    let f = fixture("hvz_step.op");
    let out = run(&["check", f.to_str().unwrap(), "--format", "csv", "--lambda-grid", "0:2:0.5"]);
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("lambda_re,"), "{text}");
    assert_eq!(lines.len(), 1 + 5, "{text}");
}

#[test]
fn check_reports_the_flip() {
    let f = fixture("hvz_step.op");
    let out = run(&["check", f.to_str().unwrap(), "--lambda-grid", "0:2:0.25", "--format", "json"]);
    let v = json(&out);
    let verdicts = v["payload"]["verdicts"].as_array().unwrap();
    let results: Vec<&str> = verdicts.iter().map(|x| x["result"].as_str().unwrap()).collect();
    assert_eq!(results.iter().filter(|r| **r == "fredholm").count(), 4, "{results:?}");
    let flips = v["payload"]["flips"].as_array().unwrap();
    assert_eq!(flips.len(), 1);
}

#[test]
fn approximate_verdicts_are_not_compared() {
    let f = fixture("edge_circle.op");
    let out = run(&["validate", f.to_str().unwrap(), "--lambda", "0", "--format", "json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    let rows = v["payload"]["rows"].as_array().unwrap();
    assert!(!rows.is_empty());
    for r in rows {
        assert_eq!(r["agreement"]["kind"], "not_comparable", "{r}");
    }
    assert_eq!(v["status"]["disagreements"], 0);
}
