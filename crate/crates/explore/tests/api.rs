use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use nightlab_core::intermittence::{rank, RankParams};
use nightlab_core::model::{Timestamp, Verdict};
use nightlab_core::simulator::{generate_lab, run_nights, FlipModel, IntermittentInjection, LabConfig, RegressionInjection};
use nightlab_core::trdb::{OutcomeFilter, OutcomeRecord, SessionMeta, StoreOptions, Trdb};
use nightlab_explore::views::{
    AnalyzeView, Axis, CompareView, HeatmapView, MeasurementSeries, OutcomeGrid, OutcomeView, SessionView, StartView,
};
use nightlab_explore::{oracle, router, StoreHandle};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde_json::Value;
use tower::ServiceExt;

async fn get_raw(app: &Router, uri: &str) -> (StatusCode, Vec<u8>, axum::http::HeaderMap) {
    let req = Request::get(uri).header("origin", "http://ui.example").body(Body::empty()).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, headers)
}

async fn get<T: DeserializeOwned>(app: &Router, uri: &str) -> T {
    let (status, body, _) = get_raw(app, uri).await;
    assert_eq!(status, StatusCode::OK, "{uri}: {}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

async fn status(app: &Router, uri: &str) -> StatusCode {
    get_raw(app, uri).await.0
}

fn app(root: &Path) -> Router {
    router(Arc::new(StoreHandle::new(root)), None)
}

fn sim_config() -> LabConfig {
    LabConfig {
        n_systems: 2,
        n_duts_per_system: 4,
        n_tests: 12,
        n_branches: 2,
        n_nights: 40,
        seed: 11,
        write_logs: true,
        regression_injections: vec![RegressionInjection {
            test_id: "t002".into(),
            branch: "feature-1".into(),
            start_night: 15,
            end_night: None,
        }],
        intermittent_tests: vec![IntermittentInjection {
            test_id: "t005".into(),
            flip_prob: 0.3,
            model: FlipModel::Bernoulli,
        }],
        ..Default::default()
    }
}

fn simulate(cfg: &LabConfig) -> (tempfile::TempDir, Trdb) {
    let dir = tempfile::tempdir().unwrap();
    let lab = generate_lab(cfg).unwrap();
    let mut db = Trdb::open_with(dir.path(), StoreOptions { sync: false, ..Default::default() }).unwrap();
    run_nights(&lab, cfg, &mut db).unwrap();
    (dir, db)
}

fn ts(secs: i64) -> Timestamp {
    Timestamp::from_unix(1_700_000_000 + secs).unwrap()
}

fn session_meta(id: &str, night: u32) -> SessionMeta {
    SessionMeta {
        session_id: id.into(),
        branch: "main".into(),
        system_id: "sys0".into(),
        night_index: night,
        started_at: ts(night as i64 * 86_400),
    }
}

fn record(session: &str, night: u32, test: &str, verdict: Verdict) -> OutcomeRecord {
    OutcomeRecord {
        session_id: session.into(),
        branch: "main".into(),
        system_id: "sys0".into(),
        test_id: test.into(),
        verdict,
        duration_s: 12.5,
        started_at: ts(night as i64 * 86_400 + 60),
        log_ref: None,
        measurements: BTreeMap::new(),
    }
}

#[tokio::test]
async fn start_counts_follow_the_store() {
    let dir = tempfile::tempdir().unwrap();
    let mut db = Trdb::open_with(dir.path(), StoreOptions { sync: false, ..Default::default() }).unwrap();
    let app = app(dir.path());
    let empty: StartView = get(&app, "/api/start").await;
    assert_eq!(empty.totals.outcomes, 0);
    assert_eq!(empty.totals.sessions, 0);
    assert!(empty.branches.is_empty() && empty.night_range.is_none());

    db.append_sessions(vec![session_meta("s1", 0)]).unwrap();
    db.append((0..7).map(|i| record("s1", 0, &format!("t{i}"), Verdict::Pass)).collect())
        .unwrap();
    let after: StartView = get(&app, "/api/start").await;
    assert_eq!(after.totals.outcomes, 7);
    assert_eq!(after.totals.tests, 7);
    assert_eq!(after.branches, ["main"]);
}

#[tokio::test]
async fn start_totals_are_config_products() {
    let cfg = sim_config();
    let (dir, _db) = simulate(&cfg);
    let s: StartView = get(&app(dir.path()), "/api/start").await;
    let (t, n, b, y) = (12, 40, 2, 2);
    assert_eq!(s.totals.outcomes, t * n * b * y);
    assert_eq!(s.totals.sessions, n * b * y);
    assert_eq!(s.totals.tests, t);
    assert_eq!(s.branches, ["feature-1", "main"]);
    assert_eq!(s.systems, ["sys0", "sys1"]);
    assert_eq!(s.night_range.map(|r| (r.first, r.last)), Some((0, 39)));
    assert_eq!(s.totals.verdicts.total(), s.totals.outcomes);
}

#[tokio::test]
async fn outcome_previews() {
    let dir = tempfile::tempdir().unwrap();
    let root = &dir.path().join("store");
    let mut db = Trdb::open_with(root, StoreOptions { sync: false, ..Default::default() }).unwrap();
    std::fs::create_dir_all(root.join("logs")).unwrap();
    let lines = |n: usize| (1..=n).map(|i| format!("step {i}\n")).collect::<String>();
    std::fs::write(root.join("logs/short.log"), lines(10)).unwrap();
    std::fs::write(root.join("logs/long.log"), lines(500)).unwrap();
    std::fs::write(dir.path().join("outside.log"), "secret\n").unwrap();
    db.append_sessions(vec![session_meta("s1", 0)]).unwrap();
    let with_log = |test: &str, log: &str| OutcomeRecord {
        log_ref: Some(log.into()),
        ..record("s1", 0, test, Verdict::Fail)
    };
    db.append(vec![
        record("s1", 0, "plain", Verdict::Pass),
        with_log("short", "logs/short.log"),
        with_log("long", "logs/long.log"),
        with_log("gone", "logs/missing.log"),
        with_log("escape", "../outside.log"),
    ])
    .unwrap();
    let app = app(root);

    let v: OutcomeView = get(&app, "/api/outcome/s1/plain").await;
    assert!(v.preview.is_none());
    assert_eq!(v.record.test_id, "plain");

    let v: OutcomeView = get(&app, "/api/outcome/s1/short").await;
    let p = v.preview.unwrap();
    assert_eq!((p.total_lines, p.head.len(), p.truncated), (10, 10, false));
    assert!(p.marker.is_none());

    let v: OutcomeView = get(&app, "/api/outcome/s1/long").await;
    let p = v.preview.unwrap();
    assert!(p.truncated);
    assert_eq!((p.head.len(), p.tail.len(), p.omitted_lines), (50, 50, 400));
    assert_eq!(p.tail.last().unwrap(), "step 500");
    assert!(p.marker.is_some());

    let v: OutcomeView = get(&app, "/api/outcome/s1/gone").await;
    assert!(v.preview.is_none());
    let v: OutcomeView = get(&app, "/api/outcome/s1/escape").await;
    assert!(v.preview.is_none());

    assert_eq!(status(&app, "/api/outcome/s1/nope").await, StatusCode::NOT_FOUND);
    assert_eq!(status(&app, "/api/outcome/s9/plain").await, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn session_view_counts() {
    let dir = tempfile::tempdir().unwrap();
    let mut db = Trdb::open_with(dir.path(), StoreOptions { sync: false, ..Default::default() }).unwrap();
    db.append_sessions(vec![session_meta("s1", 3)]).unwrap();
    db.append(
        (0..9)
            .map(|i| record("s1", 3, &format!("t{i}"), if i < 2 { Verdict::Fail } else { Verdict::Pass }))
            .collect(),
    )
    .unwrap();
    let app = app(dir.path());
    let v: SessionView = get(&app, "/api/session/s1").await;
    assert_eq!((v.counts.pass, v.counts.fail, v.counts.error, v.counts.skipped), (7, 2, 0, 0));
    assert_eq!(v.counts.total(), v.outcomes.len());
    assert_eq!(v.session.night_index, 3);
    assert_eq!(status(&app, "/api/session/unknown").await, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn heatmap_by_system() {
    let dir = tempfile::tempdir().unwrap();
    let mut db = Trdb::open_with(dir.path(), StoreOptions { sync: false, ..Default::default() }).unwrap();
    let app = app(dir.path());
    let v: HeatmapView = get(&app, "/api/heatmap?axis=system").await;
    assert!(v.cells.is_empty());

    let mut sessions = Vec::new();
    let mut records = Vec::new();
    for night in 0..4 {
        for sys in ["sys0", "sys1", "sys2"] {
            let id = format!("n{night}-{sys}");
            sessions.push(SessionMeta {
                system_id: sys.into(),
                ..session_meta(&id, night)
            });
            let verdict = if sys == "sys1" { Verdict::Fail } else { Verdict::Pass };
            records.push(OutcomeRecord {
                system_id: sys.into(),
                ..record(&id, night, "t", verdict)
            });
        }
    }
    db.append_sessions(sessions).unwrap();
    db.append(records).unwrap();
    let v: HeatmapView = get(&app, "/api/heatmap?axis=system&branch=main").await;
    let rates: Vec<(String, f64, usize)> = v
        .cells
        .iter()
        .map(|c| (serde_json::to_value(&c.column).unwrap().as_str().unwrap().to_string(), c.fail_rate, c.runs))
        .collect();
    assert_eq!(
        rates,
        [("sys0".to_string(), 0.0, 4), ("sys1".to_string(), 1.0, 4), ("sys2".to_string(), 0.0, 4)]
    );
    assert_eq!(status(&app, "/api/heatmap?axis=branch").await, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn intermittent_night_rates_average_to_flip_probability() {
    let (dir, _db) = simulate(&sim_config());
    let v: HeatmapView = get(&app(dir.path()), "/api/heatmap?axis=night&test=t005").await;
    assert_eq!(v.cells.len(), 40);
    let mean = v.cells.iter().map(|c| c.fail_rate).sum::<f64>() / v.cells.len() as f64;
    assert!((mean - 0.3).abs() <= 0.1, "mean per-night fail rate {mean}");
}

#[tokio::test]
async fn measurements_in_night_order() {
    let dir = tempfile::tempdir().unwrap();
    let mut db = Trdb::open_with(dir.path(), StoreOptions { sync: false, ..Default::default() }).unwrap();
    let ids = ["a", "b", "c"];
    db.append_sessions(ids.iter().enumerate().map(|(i, id)| session_meta(id, 2 - i as u32)).collect())
        .unwrap();
    db.append(
        ids.iter()
            .enumerate()
            .map(|(i, id)| OutcomeRecord {
                measurements: BTreeMap::from([("throughput".to_string(), i as f64)]),
                ..record(id, 2 - i as u32, "t", Verdict::Pass)
            })
            .collect(),
    )
    .unwrap();
    let app = app(dir.path());
    let s: MeasurementSeries = get(&app, "/api/measurements?test=t&metric=throughput&branch=main").await;
    let nights: Vec<u32> = s.points.iter().map(|p| p.night).collect();
    assert_eq!(nights, [0, 1, 2]);
    assert_eq!(s.points[0].value, 2.0);
    let s: MeasurementSeries = get(&app, "/api/measurements?metric=latency").await;
    assert!(s.points.is_empty());
    assert_eq!(status(&app, "/api/measurements?test=t").await, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn compare_finds_exactly_the_injected_regressions() {
    let cfg = LabConfig {
        intermittent_tests: vec![],
        regression_injections: vec![
            RegressionInjection {
                test_id: "t002".into(),
                branch: "feature-1".into(),
                start_night: 15,
                end_night: None,
            },
            RegressionInjection {
                test_id: "t007".into(),
                branch: "feature-1".into(),
                start_night: 30,
                end_night: None,
            },
            RegressionInjection {
                test_id: "t009".into(),
                branch: "feature-1".into(),
                start_night: 5,
                end_night: Some(20),
            },
        ],
        ..sim_config()
    };
    let (dir, _db) = simulate(&cfg);
    let app = app(dir.path());
    let v: CompareView = get(&app, "/api/compare?branch_a=main&branch_b=feature-1").await;
    let regressed: BTreeSet<&str> = v
        .comparisons
        .iter()
        .filter(|c| c.delta == nightlab_explore::views::Delta::Regressed)
        .map(|c| c.test_id.as_str())
        .collect();
    // t009's episode is over by the last night
    assert_eq!(regressed, BTreeSet::from(["t002", "t007"]));
    assert_eq!(v.comparisons.len(), 12);

    let v: CompareView = get(&app, "/api/compare?branch_a=feature-1&branch_b=main&from_night=35").await;
    let fixed = v
        .comparisons
        .iter()
        .filter(|c| c.delta == nightlab_explore::views::Delta::Fixed)
        .count();
    assert_eq!(fixed, 2);
    assert_eq!(status(&app, "/api/compare?branch_a=main&branch_b=main").await, StatusCode::BAD_REQUEST);
    assert_eq!(status(&app, "/api/compare?branch_a=main").await, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn compare_marks_single_branch_tests() {
    let dir = tempfile::tempdir().unwrap();
    let mut db = Trdb::open_with(dir.path(), StoreOptions { sync: false, ..Default::default() }).unwrap();
    db.append_sessions(vec![
        session_meta("m", 0),
        SessionMeta {
            branch: "dev".into(),
            ..session_meta("d", 0)
        },
    ])
    .unwrap();
    let on_dev = |test: &str, v| OutcomeRecord {
        branch: "dev".into(),
        ..record("d", 0, test, v)
    };
    db.append(vec![
        record("m", 0, "both", Verdict::Pass),
        on_dev("both", Verdict::Pass),
        record("m", 0, "main_only", Verdict::Pass),
        on_dev("dev_only", Verdict::Fail),
        on_dev("skipped_only", Verdict::Skipped),
    ])
    .unwrap();
    let v: CompareView = get(&app(dir.path()), "/api/compare?branch_a=main&branch_b=dev").await;
    let classes: Vec<(String, Value)> = v
        .comparisons
        .iter()
        .map(|c| (c.test_id.clone(), serde_json::to_value(c.delta).unwrap()))
        .collect();
    assert_eq!(
        classes,
        [
            ("both".to_string(), Value::from("same")),
            ("dev_only".to_string(), Value::from("only_b")),
            ("main_only".to_string(), Value::from("only_a")),
        ]
    );
}

#[tokio::test]
async fn analyze_delegates_to_rank() {
    let (dir, db) = simulate(&sim_config());
    let app = app(dir.path());
    let v: AnalyzeView = get(&app, "/api/analyze?branch=main").await;
    let expected = rank(
        &db,
        &RankParams {
            branch: Some("main".into()),
            ..Default::default()
        },
    );
    assert_eq!(v.reports, expected);
    assert_eq!(v.reports[0].test_id, "t005");
    assert_eq!(v.top_failing[0].test_id, "t005");

    let v: AnalyzeView = get(&app, "/api/analyze?branch=feature-1&tau=0.2&min_runs=10").await;
    let expected = rank(
        &db,
        &RankParams {
            branch: Some("feature-1".into()),
            thresholds: nightlab_core::intermittence::Thresholds::new(0.2, 10).unwrap(),
            ..Default::default()
        },
    );
    assert_eq!(v.reports, expected);
    assert_eq!(v.tau, 0.2);

    let v: AnalyzeView = get(&app, "/api/analyze?branch=release").await;
    assert!(v.reports.is_empty() && v.top_failing.is_empty());
    assert_eq!(status(&app, "/api/analyze?tau=0").await, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn all_pass_branch_is_never_failing() {
    let cfg = LabConfig {
        intermittent_tests: vec![],
        ..sim_config()
    };
    let (dir, _db) = simulate(&cfg);
    let v: AnalyzeView = get(&app(dir.path()), "/api/analyze?branch=main").await;
    assert_eq!(v.reports.len(), 12);
    assert!(v
        .reports
        .iter()
        .all(|r| r.classification == nightlab_core::intermittence::Classification::NeverFailing));
}

fn random_filter(rng: &mut impl Rng, tests: &[String]) -> (OutcomeFilter, String) {
    let mut f = OutcomeFilter::default();
    let mut q = Vec::new();
    if rng.random_bool(0.5) {
        let b = ["main", "feature-1", "release"][rng.random_range(0..3)];
        f.branch = Some(b.into());
        q.push(format!("branch={b}"));
    }
    if rng.random_bool(0.4) {
        let s = ["sys0", "sys1"][rng.random_range(0..2)];
        f.system_id = Some(s.into());
        q.push(format!("system={s}"));
    }
    if rng.random_bool(0.4) {
        let t = if rng.random_bool(0.9) { tests[rng.random_range(0..tests.len())].clone() } else { "zzz".into() };
        q.push(format!("test={t}"));
        f.test_id = Some(t);
    }
    if rng.random_bool(0.3) {
        let vs: Vec<Verdict> = Verdict::ALL.into_iter().filter(|_| rng.random_bool(0.5)).collect();
        if !vs.is_empty() {
            q.push(format!("verdict={}", vs.iter().map(|v| v.as_str()).collect::<Vec<_>>().join(",")));
            f.verdicts = Some(vs.into_iter().collect());
        }
    }
    if rng.random_bool(0.5) {
        let a = rng.random_range(0..40);
        let b = rng.random_range(a..45);
        f.from_night = Some(a);
        f.to_night = Some(b);
        q.push(format!("from_night={a}&to_night={b}"));
    }
    (f, q.join("&"))
}

#[tokio::test]
async fn aggregated_endpoints_match_full_scan() {
    let (dir, db) = simulate(&sim_config());
    let app = app(dir.path());
    let tests: Vec<String> = db.test_ids().into_iter().map(str::to_string).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..60 {
        let (f, q) = random_filter(&mut rng, &tests);

        // outcomes, walked page by page
        let limit = rng.random_range(1..6);
        let mut rows = Vec::new();
        let mut offset = 0;
        loop {
            let page: OutcomeGrid = get(&app, &format!("/api/outcomes?{q}&limit={limit}&offset={offset}")).await;
            let n = page.rows.len();
            for row in &page.rows {
                for c in &row.cells {
                    assert!(page.sessions.iter().any(|s| s.session_id == c.session_id));
                }
            }
            rows.extend(page.rows);
            offset += limit;
            if n < limit {
                assert_eq!(rows.len(), page.total_rows);
                break;
            }
        }
        let got: BTreeMap<String, Vec<(String, Verdict, f64)>> = rows
            .into_iter()
            .map(|r| (r.test_id, r.cells.into_iter().map(|c| (c.session_id, c.verdict, c.duration_s)).collect()))
            .collect();
        assert_eq!(got, oracle::grid(&db, &f), "outcomes?{q}");

        for axis in [Axis::System, Axis::Night] {
            let name = if axis == Axis::System { "system" } else { "night" };
            let v: HeatmapView = get(&app, &format!("/api/heatmap?{q}&axis={name}")).await;
            let got: BTreeMap<_, _> = v
                .cells
                .into_iter()
                .map(|c| {
                    assert_eq!(c.fail_rate, c.failures as f64 / c.runs as f64);
                    ((c.test_id, c.column), (c.failures, c.runs))
                })
                .collect();
            assert_eq!(got, oracle::heatmap(&db, &f, axis), "heatmap?{q}&axis={name}");
        }

        for metric in ["throughput_mbps", "cpu_load"] {
            let s: MeasurementSeries = get(&app, &format!("/api/measurements?{q}&metric={metric}")).await;
            let got: Vec<_> = s.points.into_iter().map(|p| (p.night, p.value, p.session_id, p.test_id)).collect();
            assert_eq!(got, oracle::measurements(&db, &f, metric));
        }
    }

    for from in [None, Some(10), Some(39)] {
        let q = from.map(|n| format!("&from_night={n}")).unwrap_or_default();
        let v: CompareView = get(&app, &format!("/api/compare?branch_a=main&branch_b=feature-1{q}")).await;
        let got: BTreeMap<String, String> = v
            .comparisons
            .into_iter()
            .map(|c| (c.test_id, serde_json::to_value(c.delta).unwrap().as_str().unwrap().to_string()))
            .collect();
        let want: BTreeMap<String, String> = oracle::compare(&db, "main", "feature-1", from)
            .into_iter()
            .map(|(t, c)| (t, c.to_string()))
            .collect();
        assert_eq!(got, want);
    }

    let sessions: Vec<String> = db.sessions().map(|s| s.session_id.clone()).collect();
    for id in sessions.iter().step_by(7) {
        let v: SessionView = get(&app, &format!("/api/session/{id}")).await;
        let c = &v.counts;
        assert_eq!([c.pass, c.fail, c.error, c.skipped], oracle::session_counts(&db, id));
        let want: Vec<&OutcomeRecord> = oracle::scan(&db, &OutcomeFilter::default().session(id.clone()))
            .into_iter()
            .map(|(_, r)| r)
            .collect();
        assert_eq!(v.outcomes.iter().collect::<Vec<_>>(), want);
    }
}

#[tokio::test]
async fn malformed_filters_are_rejected() {
    let (dir, _db) = simulate(&LabConfig {
        n_nights: 3,
        ..sim_config()
    });
    let app = app(dir.path());
    for uri in [
        "/api/outcomes?from_night=abc",
        "/api/outcomes?verdict=maybe",
        "/api/outcomes?limit=0",
        "/api/outcomes?from_night=5&to_night=2",
        "/api/outcomes?colour=red",
        "/api/outcomes?branch=main&branch=dev",
        "/api/heatmap?axis=",
        "/api/start?x=1",
    ] {
        let expected = if uri.ends_with("axis=") { StatusCode::OK } else { StatusCode::BAD_REQUEST };
        let (code, body, headers) = get_raw(&app, uri).await;
        assert_eq!(code, expected, "{uri}");
        assert_eq!(headers["content-type"], "application/json");
        if code == StatusCode::BAD_REQUEST {
            let v: Value = serde_json::from_slice(&body).unwrap();
            assert!(v["error"].is_string());
        }
    }
    let empty: OutcomeGrid = get(&app, "/api/outcomes?branch=release").await;
    assert_eq!((empty.total_rows, empty.rows.len()), (0, 0));
    assert_eq!(status(&app, "/api/nothing").await, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn cors_is_enabled() {
    let (dir, _db) = simulate(&LabConfig {
        n_nights: 2,
        ..sim_config()
    });
    let (_, _, headers) = get_raw(&app(dir.path()), "/api/start").await;
    assert_eq!(headers["access-control-allow-origin"], "*");
}

#[tokio::test]
async fn unreadable_store_is_unavailable() {
    let dir = tempfile::tempdir().unwrap();
    let missing = app(&dir.path().join("absent"));
    assert_eq!(status(&missing, "/api/start").await, StatusCode::SERVICE_UNAVAILABLE);

    let corrupt = dir.path().join("corrupt");
    std::fs::create_dir(&corrupt).unwrap();
    std::fs::write(corrupt.join("sessions.ndjson"), "{not json}\n{\"type\":\"commit\",\"batch\":0,\"count\":1}\n").unwrap();
    assert_eq!(status(&app(&corrupt), "/api/start").await, StatusCode::SERVICE_UNAVAILABLE);
}

fn checksum(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
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

fn fuzz_uri(rng: &mut impl Rng, sessions: &[String], tests: &[String]) -> String {
    let pick = |rng: &mut ChaCha8Rng, xs: &[&str]| xs[rng.random_range(0..xs.len())].to_string();
    let mut r = ChaCha8Rng::seed_from_u64(rng.random());
    let values = ["main", "feature-1", "x", "", "12", "-3", "sys0", "pass,fail", "night", "system", "%2e%2e"];
    let keys = [
        "branch", "system", "test", "verdict", "from_night", "to_night", "limit", "offset", "axis", "metric", "branch_a",
        "branch_b", "tau", "min_runs", "top", "bogus",
    ];
    let path = match r.random_range(0..9) {
        0 => "/api/start".to_string(),
        1 => "/api/outcomes".to_string(),
        2 => format!(
            "/api/outcome/{}/{}",
            sessions[r.random_range(0..sessions.len())],
            tests[r.random_range(0..tests.len())]
        ),
        3 => format!("/api/session/{}", pick(&mut r, &[&sessions[0], "nope", "..%2F.."])),
        4 => "/api/heatmap".to_string(),
        5 => "/api/measurements".to_string(),
        6 => "/api/compare".to_string(),
        7 => "/api/analyze".to_string(),
        _ => pick(&mut r, &["/api/", "/api/outcome/../../etc", "/api/start/extra"]),
    };
    let n = r.random_range(0..4);
    let q: Vec<String> = (0..n).map(|_| format!("{}={}", pick(&mut r, &keys), pick(&mut r, &values))).collect();
    if q.is_empty() {
        path
    } else {
        format!("{path}?{}", q.join("&"))
    }
}

#[tokio::test]
async fn fuzzed_requests_never_modify_the_store() {
    let (dir, db) = simulate(&sim_config());
    drop(db);
    let before = checksum(dir.path());
    let app = app(dir.path());
    let sessions: Vec<String> = Trdb::open_read_only(dir.path())
        .unwrap()
        .sessions()
        .map(|s| s.session_id.clone())
        .collect();
    let tests: Vec<String> = (0..12).map(|i| format!("t{i:03}")).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut seen = BTreeSet::new();
    for _ in 0..500 {
        let uri = fuzz_uri(&mut rng, &sessions, &tests);
        let code = status(&app, &uri).await;
        assert!(
            [StatusCode::OK, StatusCode::BAD_REQUEST, StatusCode::NOT_FOUND].contains(&code),
            "{uri} -> {code}"
        );
        seen.insert(code);
    }
    assert_eq!(seen.len(), 3);
    assert_eq!(before, checksum(dir.path()));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn endpoints_stay_fast_at_desk_scale() {
    let cfg = LabConfig {
        n_systems: 4,
        n_duts_per_system: 4,
        n_tests: 50,
        n_branches: 2,
        n_nights: 250,
        record_usage: false,
        intermittent_tests: vec![IntermittentInjection {
            test_id: "t010".into(),
            flip_prob: 0.3,
            model: FlipModel::Bernoulli,
        }],
        ..Default::default()
    };
    let (dir, db) = simulate(&cfg);
    assert_eq!(db.outcomes().len(), 100_000);
    let app = app(dir.path());
    let _: StartView = get(&app, "/api/start").await;
    let uris = [
        "/api/start",
        "/api/outcomes",
        "/api/outcomes?branch=main&system=sys1&from_night=100&to_night=200",
        "/api/outcomes?test=t010",
        "/api/outcome/n0100-main-sys2/t010",
        "/api/session/n0200-feature-1-sys3",
        "/api/heatmap?axis=system",
        "/api/heatmap?axis=night&branch=main",
        "/api/measurements?metric=throughput_mbps",
        "/api/compare?branch_a=main&branch_b=feature-1",
        "/api/analyze",
        "/api/analyze?branch=feature-1",
    ];
    let mut times = Vec::new();
    for _ in 0..5 {
        for uri in uris {
            let t = Instant::now();
            assert_eq!(status(&app, uri).await, StatusCode::OK, "{uri}");
            times.push(t.elapsed().as_secs_f64());
        }
    }
    times.sort_by(f64::total_cmp);
    let p95 = times[(times.len() as f64 * 0.95).ceil() as usize - 1];
    assert!(p95 < 0.5, "p95 {p95:.3}s");
}
