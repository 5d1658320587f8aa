use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use nightlab_core::mapper::{validate_mapping, Mapping};
use nightlab_core::model::{
    to_ndjson, DutNode, Link, NodePredicate, RequiredLink, RequirementGraph, Role, TestSystemGraph,
};
use serde_json::Value;

fn nightlab(args: &[&str], env_store: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_nightlab"));
    cmd.args(args).env_remove("NIGHTLAB_STORE");
    if let Some(s) = env_store {
        cmd.env("NIGHTLAB_STORE", s);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_records(o: &Output) -> Vec<Value> {
    String::from_utf8(o.stdout.clone())
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap_or_else(|e| panic!("not a JSON line `{l}`: {e}")))
        .collect()
}

fn ring(id: &str, n: usize) -> TestSystemGraph {
    let nodes: Vec<DutNode> = (0..n)
        .map(|i| DutNode {
            dut_id: format!("{id}-d{i}"),
            model: "sw".into(),
            capabilities: ["l2".to_string()].into(),
            port_count: 4,
        })
        .collect();
    let edges = (0..n)
        .map(|i| Link::new(format!("{id}-d{i}"), format!("{id}-d{}", (i + 1) % n)))
        .collect();
    TestSystemGraph {
        system_id: id.into(),
        nodes,
        edges,
    }
}

fn req(id: &str, roles: &[(&str, &[&str])], links: &[(&str, &str)]) -> RequirementGraph {
    RequirementGraph {
        test_id: id.into(),
        roles: roles
            .iter()
            .map(|(r, caps)| Role::new(*r, NodePredicate::requiring(caps.iter().copied())))
            .collect(),
        links: links.iter().map(|(a, b)| RequiredLink::new(*a, *b)).collect(),
        est_duration_s: 60.0,
    }
}

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(f.path("sys.ndjson"), to_ndjson(&[ring("lab", 8)])).unwrap();
        std::fs::write(
            f.path("pair.ndjson"),
            to_ndjson(&[req("pair", &[("a", &["l2"]), ("b", &[])], &[("a", "b")])]),
        )
        .unwrap();
        std::fs::write(
            f.path("triangle.ndjson"),
            to_ndjson(&[req("triangle", &[("x", &[]), ("y", &[]), ("z", &[])], &[("x", "y"), ("y", "z"), ("z", "x")])]),
        )
        .unwrap();
        std::fs::write(f.path("wifi.ndjson"), to_ndjson(&[req("wifi", &[("ap", &["wifi6"])], &[])])).unwrap();
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }

    fn simulate(&self, store: &str) -> Output {
        std::fs::write(
            self.path("lab.conf"),
            "n_systems = 2\nn_tests = 8\nn_nights = 10\nregressions = t002@feature-1:4\nintermittent = t005:0.4\nlogs = true\n",
        )
        .unwrap();
        nightlab(&["simulate", &self.arg("lab.conf"), &self.arg(store)], None)
    }
}

fn tree_checksum(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.clone(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn map_prints_one_valid_mapping() {
    let f = Fixture::new();
    let o = nightlab(&["map", &f.arg("sys.ndjson"), &f.arg("pair.ndjson"), "--seed", "7"], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let recs = stdout_records(&o);
    assert_eq!(recs.len(), 1);
    let m: Mapping = serde_json::from_value(recs[0].clone()).unwrap();
    let r = &nightlab_core::model::parse_requirements(&std::fs::read_to_string(f.path("pair.ndjson")).unwrap()).unwrap()[0];
    assert_eq!(validate_mapping(r, &ring("lab", 8), &m), Ok(()));
}

#[test]
fn map_reports_unsatisfiable_on_stderr() {
    let f = Fixture::new();
    for test in ["wifi.ndjson", "triangle.ndjson"] {
        let o = nightlab(&["map", &f.arg("sys.ndjson"), &f.arg(test)], None);
        assert_eq!(code(&o), 1);
        assert!(o.stdout.is_empty());
        assert!(String::from_utf8_lossy(&o.stderr).contains("unsatisfiable"));
    }
}

#[test]
fn map_search_budget_has_its_own_status() {
    let f = Fixture::new();
    let o = nightlab(
        &["map", &f.arg("sys.ndjson"), &f.arg("triangle.ndjson"), "--expansion-cap", "1"],
        None,
    );
    assert_eq!(code(&o), 4);
    assert!(String::from_utf8_lossy(&o.stderr).contains("budget"));
}

#[test]
fn usage_errors_exit_2() {
    let f = Fixture::new();
    assert_eq!(f.simulate("store").status.code(), Some(0));
    let store = f.arg("store");
    for args in [
        vec!["build-suite", store.as_str(), "--budget-s", "0"],
        vec!["build-suite", store.as_str(), "--budget-s", "-5"],
        vec!["build-suite", store.as_str()],
        vec!["frobnicate"],
        vec!["intermittence", store.as_str(), "--colour"],
        vec!["intermittence", store.as_str(), "--tau", "0"],
        vec!["intermittence"],
        vec!["map", "missing.ndjson", "also-missing.ndjson"],
    ] {
        let o = nightlab(&args, None);
        assert_eq!(code(&o), 2, "{args:?}");
        assert!(!o.stderr.is_empty());
    }
    let o = nightlab(&["frobnicate"], None);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&nightlab(&["--help"], None)), 0);
}

#[test]
fn simulate_then_analyse() {
    let f = Fixture::new();
    let o = f.simulate("store");
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = &stdout_records(&o)[0];
    assert_eq!(summary["outcomes"], 8 * 10 * 2 * 2);
    assert!(f.path("store/lab/systems.ndjson").is_file());
    assert!(f.path("store/lab/labels.json").is_file());

    // a second run into the same store is refused
    assert_eq!(code(&f.simulate("store")), 2);

    let store = f.arg("store");
    let sys = f.arg("store/lab/systems.ndjson");
    let tests = f.arg("store/lab/tests.ndjson");
    let before = tree_checksum(&f.path("store"));

    let o = nightlab(&["intermittence", &store, "--branch", "feature-1"], None);
    assert_eq!(code(&o), 0);
    let reports = stdout_records(&o);
    assert_eq!(reports.len(), 8);
    assert_eq!(reports[0]["test_id"], "t005");

    let o = nightlab(&["build-suite", &store, "--budget-s", "900", "--branch", "feature-1"], None);
    assert_eq!(code(&o), 0);
    let recs = stdout_records(&o);
    let last = recs.last().unwrap();
    assert_eq!(last["type"], "summary");
    assert!(last["duration_s"].as_f64().unwrap() <= 900.0);
    assert_eq!(recs[0]["type"], "entry");

    let o = nightlab(&["build-suite", &store, "--budget-s", "900", "--tests", &tests, "--night", "5"], None);
    assert_eq!(code(&o), 0);

    let o = nightlab(&["coverage", &store, &sys, &tests], None);
    assert_eq!(code(&o), 0);
    let rows = stdout_records(&o);
    assert_eq!(rows.len(), 2 * 8);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r["coverage"].as_f64().unwrap())));

    let o = nightlab(&["map", &sys, &tests, "--coverage", &store], None);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_records(&o).len(), 8);

    let o = nightlab(&["--format", "table", "intermittence", &store], None);
    assert_eq!(code(&o), 0);
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("branch"));

    assert_eq!(before, tree_checksum(&f.path("store")), "read-only verbs changed the store");

    let o = nightlab(&["intermittence", &store, "--branch", "release"], None);
    assert_eq!(code(&o), 1);
}

#[test]
fn ingest_appends_and_rejects_duplicates() {
    let f = Fixture::new();
    let batch = [
        r#"{"type":"session","session_id":"s1","branch":"main","system_id":"lab","night_index":0,"started_at":"2024-03-01T22:00:00Z"}"#,
        r#"{"type":"outcome","session_id":"s1","branch":"main","system_id":"lab","test_id":"pair","verdict":"pass","duration_s":30.0,"started_at":"2024-03-01T22:01:00Z"}"#,
        r#"{"type":"outcome","session_id":"s1","branch":"main","system_id":"lab","test_id":"triangle","verdict":"fail","duration_s":45.5,"started_at":"2024-03-01T22:02:00Z","measurements":{"cpu_load":0.4}}"#,
        r#"{"type":"usage","test_id":"pair","system_id":"lab","dut_id":"lab-d0","session_id":"s1"}"#,
    ]
    .join("\n");
    std::fs::write(f.path("batch.ndjson"), batch + "\n").unwrap();
    let store = f.arg("store");
    let o = nightlab(&["ingest", &store, &f.arg("batch.ndjson")], None);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let s = &stdout_records(&o)[0];
    assert_eq!((s["sessions"].as_u64(), s["outcomes"].as_u64(), s["usage"].as_u64()), (Some(1), Some(2), Some(1)));

    let before = tree_checksum(&f.path("store"));
    let o = nightlab(&["ingest", &f.arg("batch.ndjson")], Some(&f.path("store")));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("duplicate"));
    assert_eq!(before, tree_checksum(&f.path("store")));

    std::fs::write(f.path("bad.ndjson"), "{\"type\":\"outcome\"}\n").unwrap();
    assert_eq!(code(&nightlab(&["ingest", &store, &f.arg("bad.ndjson")], None)), 2);

    // the default store comes from the environment
    let o = nightlab(&["intermittence", "--min-runs", "2"], Some(&f.path("store")));
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_records(&o).len(), 2);
    let o = nightlab(
        &["coverage", &f.arg("sys.ndjson"), &f.arg("pair.ndjson")],
        Some(&f.path("store")),
    );
    assert_eq!(code(&o), 0);
    assert_eq!(stdout_records(&o)[0]["used_duts"], 1);
}

#[test]
fn serve_answers_http() {
    let f = Fixture::new();
    assert_eq!(code(&f.simulate("store")), 0);
    let mut child = Command::new(env!("CARGO_BIN_EXE_nightlab"))
        .args(["serve", &f.arg("store"), "--port", "0"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let hello: Value = serde_json::from_str(&line).unwrap();
    let addr = hello["listening"].as_str().unwrap().trim_start_matches("http://").to_string();

    let fetch = |path: &str| {
        let mut s = TcpStream::connect(&addr).unwrap();
        write!(s, "GET {path} HTTP/1.1\r\nHost: local\r\nConnection: close\r\n\r\n").unwrap();
        let mut resp = String::new();
        s.read_to_string(&mut resp).unwrap();
        resp
    };
    let resp = fetch("/api/start");
    child.kill().ok();
    child.wait().ok();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.to_ascii_lowercase().contains("content-type: application/json"));
    let body = &resp[resp.find("\r\n\r\n").unwrap() + 4..];
    let v: Value = serde_json::from_str(body).unwrap();
    assert_eq!(v["totals"]["outcomes"], 320);
}

#[test]
fn serve_refuses_a_missing_store() {
    let f = Fixture::new();
    let o = nightlab(&["serve", &f.arg("nowhere"), "--port", "0"], None);
    assert_eq!(code(&o), 2);
}
