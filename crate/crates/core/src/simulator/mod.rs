//! Synthetic labs with known ground truth.
//!
//! Every random choice draws from its own stream, keyed by the lab seed and
//! the names involved, so changing one part of a configuration leaves the
//! others' draws untouched and identical configurations produce identical
//! stores.

mod config;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mapper::{map_once, map_with_coverage, CoverageState, MapError, MapOutcome};
use crate::model::{
    validate_requirement, validate_system, DutNode, Link, NodePredicate, RequiredLink, RequirementGraph, Role,
    TestSystemGraph, Timestamp, Verdict,
};
use crate::trdb::{OutcomeRecord, SessionMeta, Trdb, TrdbError, UsageRecord};

pub use config::{FlipModel, IntermittentInjection, LabConfig, LabConfigError, RegressionInjection};

/// 2024-01-01T20:00:00Z, start of night 0.
pub const BASE_START: i64 = 1_704_139_200;
pub const GENERATION_ATTEMPTS: u32 = 100;

const MODELS: [&str; 3] = ["lynx-3200", "viper-210", "falcon-x"];
const CAPABILITIES: [&str; 5] = ["firewall", "serial", "poe", "vlan", "wifi"];
const LOG_LINES: usize = 120;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] LabConfigError),
    #[error("could not generate a satisfiable `{test_id}` in {attempts} attempts")]
    GenerationFailed { test_id: String, attempts: u32 },
    #[error(transparent)]
    Map(#[from] MapError),
    #[error(transparent)]
    Trdb(#[from] TrdbError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("night {0} is outside the configured range")]
    NightOutOfRange(u32),
    #[error("unknown {0} `{1}`")]
    Unknown(&'static str, String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Healthy,
    ConsistentRegression,
    Intermittent,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub labels: BTreeMap<String, Label>,
    /// Tests that fail, keyed by `(night, branch, system_id)`.
    pub failing: BTreeMap<(u32, String, String), BTreeSet<String>>,
}

impl GroundTruth {
    pub fn label(&self, test_id: &str) -> Option<Label> {
        self.labels.get(test_id).copied()
    }

    pub fn is_failing(&self, night: u32, branch: &str, system_id: &str, test_id: &str) -> bool {
        self.failing
            .get(&(night, branch.to_string(), system_id.to_string()))
            .is_some_and(|s| s.contains(test_id))
    }

    pub fn verdict(&self, night: u32, branch: &str, system_id: &str, test_id: &str) -> Verdict {
        if self.is_failing(night, branch, system_id, test_id) {
            Verdict::Fail
        } else {
            Verdict::Pass
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lab {
    pub systems: Vec<TestSystemGraph>,
    pub tests: Vec<RequirementGraph>,
    pub truth: GroundTruth,
    /// Seconds between consecutive nights; a whole number of days.
    pub night_spacing_s: i64,
}

impl Lab {
    pub fn test(&self, test_id: &str) -> Option<&RequirementGraph> {
        self.tests.iter().find(|t| t.test_id == test_id)
    }

    pub fn session_id(night: u32, branch: &str, system_id: &str) -> String {
        format!("n{night:04}-{branch}-{system_id}")
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Independent random stream for one named purpose.
fn stream(seed: u64, parts: &[&str]) -> ChaCha8Rng {
    // FNV-1a over the parts; stable across platforms and releases, unlike std hashers
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.bytes().chain(std::iter::once(0)) {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(h)))
}

fn generate_system(cfg: &LabConfig, system_id: &str) -> TestSystemGraph {
    let mut rng = stream(cfg.seed, &["topology", system_id]);
    let n = cfg.n_duts_per_system as usize;
    let mut nodes: Vec<DutNode> = (0..n)
        .map(|j| DutNode {
            dut_id: format!("{system_id}-d{j}"),
            model: MODELS[rng.random_range(0..MODELS.len())].to_string(),
            capabilities: CAPABILITIES
                .iter()
                .filter(|_| rng.random_bool(0.4))
                .map(|c| c.to_string())
                .collect(),
            port_count: 0,
        })
        .collect();
    let id = |j: usize| nodes[j].dut_id.clone();
    let mut edges = Vec::new();
    if n == 2 {
        edges.push(Link::new(id(0), id(1)));
    } else if n >= 3 {
        for j in 0..n {
            edges.push(Link::new(id(j), id((j + 1) % n)));
            if rng.random_bool(0.2) {
                edges.push(Link::tagged(id(j), id((j + 1) % n), "fiber"));
            }
        }
        for a in 0..n {
            for b in a + 2..n {
                if !(a == 0 && b == n - 1) && rng.random_bool(0.25) {
                    edges.push(Link::new(id(a), id(b)));
                }
            }
        }
    }
    let mut degree = vec![0u32; n];
    for e in &edges {
        for end in [&e.a, &e.b] {
            degree[nodes.iter().position(|x| &x.dut_id == end).expect("own node")] += 1;
        }
    }
    for (node, d) in nodes.iter_mut().zip(degree) {
        node.port_count = d + rng.random_range(0..=2);
    }
    TestSystemGraph {
        system_id: system_id.to_string(),
        nodes,
        edges,
    }
}

fn generate_requirement(cfg: &LabConfig, test_id: &str, attempt: u32) -> RequirementGraph {
    let mut rng = stream(cfg.seed, &["test", test_id, &attempt.to_string()]);
    let k = rng.random_range(1..=cfg.n_duts_per_system.min(4) as usize);
    let roles: Vec<Role> = (0..k)
        .map(|i| {
            let predicate = if rng.random_bool(0.25) {
                NodePredicate::requiring([CAPABILITIES[rng.random_range(0..CAPABILITIES.len())]])
            } else {
                NodePredicate::default()
            };
            Role::new(format!("r{i}"), predicate)
        })
        .collect();
    let r = |i: usize| format!("r{i}");
    let mut pairs = Vec::new();
    if k >= 2 {
        match rng.random_range(0..3) {
            0 => pairs.extend((1..k).map(|i| (0, i))),
            1 if k >= 3 => pairs.extend((0..k).map(|i| (i, (i + 1) % k))),
            _ => pairs.extend((1..k).map(|i| (i - 1, i))),
        }
    }
    let links = pairs
        .into_iter()
        .map(|(a, b)| {
            if rng.random_bool(0.1) {
                RequiredLink::tagged(r(a), r(b), "fiber")
            } else {
                RequiredLink::new(r(a), r(b))
            }
        })
        .collect();
    RequirementGraph {
        test_id: test_id.to_string(),
        roles,
        links,
        est_duration_s: (cfg.mean_duration_s * rng.random_range(0.5..1.5) * 10.0).round() / 10.0,
    }
}

fn ground_truth(cfg: &LabConfig) -> GroundTruth {
    let mut truth = GroundTruth::default();
    for t in cfg.test_ids() {
        truth.labels.insert(t, Label::Healthy);
    }
    let systems = cfg.system_ids();
    for r in &cfg.regression_injections {
        truth.labels.insert(r.test_id.clone(), Label::ConsistentRegression);
        for night in (0..cfg.n_nights).filter(|&n| r.active(n)) {
            for s in &systems {
                truth
                    .failing
                    .entry((night, r.branch.clone(), s.clone()))
                    .or_default()
                    .insert(r.test_id.clone());
            }
        }
    }
    for it in &cfg.intermittent_tests {
        truth.labels.insert(it.test_id.clone(), Label::Intermittent);
        for branch in cfg.branches() {
            for s in &systems {
                let mut rng = stream(cfg.seed, &["flip", &it.test_id, &branch, s]);
                let mut failing = false;
                for night in 0..cfg.n_nights {
                    failing = match it.model {
                        FlipModel::Bernoulli => rng.random_bool(it.flip_prob),
                        FlipModel::Flip if night == 0 => false,
                        FlipModel::Flip => failing ^ rng.random_bool(it.flip_prob),
                    };
                    if failing {
                        truth
                            .failing
                            .entry((night, branch.clone(), s.clone()))
                            .or_default()
                            .insert(it.test_id.clone());
                    }
                }
            }
        }
    }
    truth
}

/// Builds topologies, tests satisfiable on every system, and the ground truth.
pub fn generate_lab(cfg: &LabConfig) -> Result<Lab, SimError> {
    cfg.validate()?;
    let systems: Vec<TestSystemGraph> = cfg.system_ids().iter().map(|s| generate_system(cfg, s)).collect();
    for s in &systems {
        debug_assert!(validate_system(s).is_ok());
    }
    let mut tests = Vec::with_capacity(cfg.n_tests as usize);
    for test_id in cfg.test_ids() {
        let mut accepted = None;
        for attempt in 0..GENERATION_ATTEMPTS {
            let req = generate_requirement(cfg, &test_id, attempt);
            debug_assert!(validate_requirement(&req).is_ok());
            let mut everywhere = true;
            for s in &systems {
                if map_once(&req, s, cfg.seed)?.mapping().is_none() {
                    everywhere = false;
                    break;
                }
            }
            if everywhere {
                accepted = Some(req);
                break;
            }
        }
        tests.push(accepted.ok_or_else(|| SimError::GenerationFailed {
            test_id: test_id.clone(),
            attempts: GENERATION_ATTEMPTS,
        })?);
    }
    let longest_session: f64 = tests.iter().map(|t| t.est_duration_s * 1.1).sum::<f64>()
        + 1800.0 * cfg.n_branches as f64
        + 60.0 * cfg.n_systems as f64;
    let days = (longest_session / 86_400.0).ceil().max(1.0) as i64;
    Ok(Lab {
        systems,
        tests,
        truth: ground_truth(cfg),
        night_spacing_s: days * 86_400,
    })
}

/// Everything one session writes.
struct SessionOutput {
    meta: SessionMeta,
    outcomes: Vec<OutcomeRecord>,
    usage: Vec<UsageRecord>,
    logs: Vec<(String, String)>,
}

fn log_text(session_id: &str, test_id: &str) -> String {
    let mut out = String::new();
    for i in 1..=LOG_LINES {
        let line = match i {
            1 => format!("[{session_id}] starting {test_id}"),
            _ if i == LOG_LINES => format!("[{session_id}] {test_id}: FAIL"),
            _ if i % 17 == 0 => format!("step {i}: assertion on link state failed, retrying"),
            _ => format!("step {i}: ok"),
        };
        out.push_str(&line);
        out.push('\n');
    }
    out
}

fn run_session(
    lab: &Lab,
    cfg: &LabConfig,
    night: u32,
    branch_idx: u32,
    sys_idx: usize,
    tests: &[&RequirementGraph],
    coverage: Option<&mut CoverageState>,
) -> Result<SessionOutput, SimError> {
    let branch = LabConfig::branch_name(branch_idx);
    let sys = &lab.systems[sys_idx];
    let session_id = Lab::session_id(night, &branch, &sys.system_id);
    let start = Timestamp::from_unix(
        BASE_START + night as i64 * lab.night_spacing_s + branch_idx as i64 * 1800 + sys_idx as i64 * 60,
    )
    .expect("simulated times are in range");
    let meta = SessionMeta {
        session_id: session_id.clone(),
        branch: branch.clone(),
        system_id: sys.system_id.clone(),
        night_index: night,
        started_at: start,
    };
    let night_s = night.to_string();
    let mut out = SessionOutput {
        meta,
        outcomes: Vec::with_capacity(tests.len()),
        usage: Vec::new(),
        logs: Vec::new(),
    };
    let mut coverage = coverage;
    let mut elapsed = 0.0f64;
    for req in tests {
        let key = [req.test_id.as_str(), branch.as_str(), sys.system_id.as_str(), night_s.as_str()];
        let mut rng = stream(cfg.seed, &[&["run"][..], &key[..]].concat());
        let verdict = lab.truth.verdict(night, &branch, &sys.system_id, &req.test_id);
        let duration_s = (req.est_duration_s * rng.random_range(0.9..1.1) * 1000.0).round() / 1000.0;
        let mut measurements = BTreeMap::new();
        let index: u32 = req.test_id[1..].parse().unwrap_or(0);
        if index % 4 == 0 {
            let base: f64 = if verdict.is_failure() { 610.0 } else { 940.0 };
            let throughput = ((base + rng.random_range(-25.0..25.0)) * 100.0).round() / 100.0;
            measurements.insert("throughput_mbps".to_string(), throughput);
            measurements.insert("cpu_load".to_string(), (rng.random_range(0.2..0.9) * 1000.0f64).round() / 1000.0);
        }
        let log_ref = if cfg.write_logs && verdict.is_failure() {
            let rel = format!("logs/{session_id}/{}.log", req.test_id);
            out.logs.push((rel.clone(), log_text(&session_id, &req.test_id)));
            Some(rel)
        } else {
            None
        };
        if let Some(cov) = coverage.as_deref_mut() {
            if let MapOutcome::Mapped(m) = map_with_coverage(req, sys, cov, rng.random())? {
                cov.record(&m);
                out.usage.extend(m.usage_records(&session_id));
            }
        }
        out.outcomes.push(OutcomeRecord {
            session_id: session_id.clone(),
            branch: branch.clone(),
            system_id: sys.system_id.clone(),
            test_id: req.test_id.clone(),
            verdict,
            duration_s,
            started_at: start.plus_secs(elapsed.floor() as i64),
            log_ref,
            measurements,
        });
        elapsed += duration_s;
    }
    Ok(out)
}

fn persist(trdb: &mut Trdb, sessions: Vec<SessionOutput>) -> Result<(), SimError> {
    let root = trdb.root().to_path_buf();
    let mut metas = Vec::new();
    let mut outcomes = Vec::new();
    let mut usage = Vec::new();
    for s in sessions {
        for (rel, text) in &s.logs {
            let path = root.join(rel);
            fs::create_dir_all(path.parent().expect("log paths have a directory"))?;
            fs::write(path, text)?;
        }
        metas.push(s.meta);
        outcomes.extend(s.outcomes);
        usage.extend(s.usage);
    }
    trdb.append_sessions(metas)?;
    trdb.append(outcomes)?;
    trdb.append_usage(usage)?;
    Ok(())
}

/// Runs the full suite on every branch and system for every night.
/// Returns the number of nights written.
pub fn run_nights(lab: &Lab, cfg: &LabConfig, trdb: &mut Trdb) -> Result<u32, SimError> {
    let all: Vec<&RequirementGraph> = lab.tests.iter().collect();
    let mut coverage: HashMap<usize, CoverageState> = (0..lab.systems.len())
        .map(|i| (i, CoverageState::from_snapshot(trdb, &lab.systems[i].system_id)))
        .collect();
    for night in 0..cfg.n_nights {
        let mut sessions = Vec::new();
        for b in 0..cfg.n_branches {
            for s in 0..lab.systems.len() {
                let cov = if cfg.record_usage { coverage.get_mut(&s) } else { None };
                sessions.push(run_session(lab, cfg, night, b, s, &all, cov)?);
            }
        }
        persist(trdb, sessions)?;
    }
    Ok(cfg.n_nights)
}

/// Runs only `tests`, in the given order, as one session. Returns its outcomes.
pub fn run_night_plan(
    lab: &Lab,
    cfg: &LabConfig,
    trdb: &mut Trdb,
    night: u32,
    branch: &str,
    system_id: &str,
    tests: &[String],
) -> Result<Vec<OutcomeRecord>, SimError> {
    if night >= cfg.n_nights {
        return Err(SimError::NightOutOfRange(night));
    }
    let b = (0..cfg.n_branches)
        .find(|&i| LabConfig::branch_name(i) == branch)
        .ok_or_else(|| SimError::Unknown("branch", branch.to_string()))?;
    let s = lab
        .systems
        .iter()
        .position(|x| x.system_id == system_id)
        .ok_or_else(|| SimError::Unknown("system", system_id.to_string()))?;
    let reqs = tests
        .iter()
        .map(|t| lab.test(t).ok_or_else(|| SimError::Unknown("test", t.clone())))
        .collect::<Result<Vec<_>, _>>()?;
    let mut cov = cfg
        .record_usage
        .then(|| CoverageState::from_snapshot(trdb, system_id));
    let out = run_session(lab, cfg, night, b, s, &reqs, cov.as_mut())?;
    let outcomes = out.outcomes.clone();
    persist(trdb, vec![out])?;
    Ok(outcomes)
}

/// Writes the lab's model files and labels under `dir`.
pub fn write_lab_files(lab: &Lab, dir: &Path) -> Result<(), SimError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("systems.ndjson"), crate::model::to_ndjson(&lab.systems))?;
    fs::write(dir.join("tests.ndjson"), crate::model::to_ndjson(&lab.tests))?;
    let labels = serde_json::to_string_pretty(&lab.truth.labels).expect("labels serialize");
    fs::write(dir.join("labels.json"), labels + "\n")?;
    Ok(())
}
