//! Time-budgeted test suite assembly from weighted prioritizers.
//!
//! Every prioritizer maps a test's history to a score in `[0, 1]`. The
//! combined priority is the weighted arithmetic mean of the enabled scores,
//! and the suite is filled greedily in priority order. The five prioritizers
//! and their defaults are configurable stand-ins.

mod config;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{RequirementGraph, Verdict};
use crate::trdb::{OutcomeFilter, Snapshot};

pub use config::{ConfigError, PrioritizerConfig, PrioritizerKind, SuiteConfig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SuiteError {
    #[error("unknown test `{0}`")]
    UnknownTest(String),
    #[error("budget must be a positive number of seconds, got {0}")]
    InvalidBudget(f64),
    #[error("no verdict for planned test `{0}`")]
    MissingVerdict(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorityBreakdown {
    pub test_id: String,
    pub components: BTreeMap<String, f64>,
    pub combined: f64,
}

/// The history a test is scored against.
#[derive(Debug, Clone)]
pub struct ScoringContext<'a> {
    pub snapshot: &'a Snapshot,
    pub config: &'a SuiteConfig,
    /// Most recent completed night; history after it is ignored.
    pub now_night: u32,
    pub branch: Option<String>,
    pub system_id: Option<String>,
    /// Model-declared durations; also the set of tests known to the model.
    pub declared: BTreeMap<String, f64>,
}

impl<'a> ScoringContext<'a> {
    pub fn new(snapshot: &'a Snapshot, config: &'a SuiteConfig, now_night: u32) -> Self {
        ScoringContext {
            snapshot,
            config,
            now_night,
            branch: None,
            system_id: None,
            declared: BTreeMap::new(),
        }
    }

    pub fn branch(mut self, branch: impl Into<String>) -> Self {
        self.branch = Some(branch.into());
        self
    }

    pub fn system(mut self, system_id: impl Into<String>) -> Self {
        self.system_id = Some(system_id.into());
        self
    }

    pub fn with_requirements(mut self, reqs: &[RequirementGraph]) -> Self {
        self.declared
            .extend(reqs.iter().map(|r| (r.test_id.clone(), r.est_duration_s)));
        self
    }

    pub fn knows(&self, test_id: &str) -> bool {
        self.declared.contains_key(test_id) || self.snapshot.has_test(test_id)
    }

    fn history(&self, test_id: &str) -> History {
        let mut filter = OutcomeFilter::default()
            .test(test_id)
            .nights(None, Some(self.now_night));
        filter.branch = self.branch.clone();
        filter.system_id = self.system_id.clone();
        let mut h = History::default();
        for r in self.snapshot.query(&filter) {
            let night = self.snapshot.night_of(r);
            h.first_seen = Some(h.first_seen.map_or(night, |n: u32| n.min(night)));
            if r.verdict == Verdict::Skipped {
                continue;
            }
            h.last_run = Some(h.last_run.map_or(night, |n: u32| n.max(night)));
            h.runs_by_night.push((night, r.verdict.is_failure()));
            if r.verdict.is_failure() {
                h.last_fail = Some(h.last_fail.map_or(night, |n: u32| n.max(night)));
            }
        }
        h
    }
}

#[derive(Debug, Default)]
struct History {
    first_seen: Option<u32>,
    last_run: Option<u32>,
    last_fail: Option<u32>,
    /// Non-skipped runs as `(night, failed)`.
    runs_by_night: Vec<(u32, bool)>,
}

fn component(kind: PrioritizerKind, p: &PrioritizerConfig, h: &History, now: u32, boosted: bool) -> f64 {
    match kind {
        PrioritizerKind::RecentFailure => match h.last_fail {
            Some(n) => (-((now - n) as f64) / p.param("half_life")).exp2(),
            None => 0.0,
        },
        PrioritizerKind::Staleness => match h.last_run {
            Some(n) => ((now - n) as f64 / p.param("horizon")).min(1.0),
            None => 1.0,
        },
        PrioritizerKind::Novelty => match h.first_seen {
            Some(n) if ((now - n) as f64) > p.param("window") => 0.0,
            _ => 1.0,
        },
        PrioritizerKind::HistoricFaultRate => {
            let window = p.param("window") as u32;
            // the window covers `window` nights ending at `now`
            let start = (now + 1).saturating_sub(window);
            let (runs, fails) = h
                .runs_by_night
                .iter()
                .filter(|(n, _)| *n >= start)
                .fold((0u64, 0u64), |(r, f), (_, failed)| (r + 1, f + *failed as u64));
            if runs == 0 {
                0.0
            } else {
                fails as f64 / runs as f64
            }
        }
        PrioritizerKind::TagBoost => boosted as u8 as f64,
    }
}

pub fn score(test_id: &str, ctx: &ScoringContext<'_>) -> Result<PriorityBreakdown, SuiteError> {
    if !ctx.knows(test_id) {
        return Err(SuiteError::UnknownTest(test_id.to_string()));
    }
    let h = ctx.history(test_id);
    let boosted = ctx.config.boosted_tests.contains(test_id);
    let mut components = BTreeMap::new();
    let (mut num, mut den) = (0.0, 0.0);
    for p in &ctx.config.prioritizers {
        let c = component(p.kind, p, &h, ctx.now_night, boosted);
        components.insert(p.kind.name().to_string(), c);
        num += p.weight * c;
        den += p.weight;
    }
    Ok(PriorityBreakdown {
        test_id: test_id.to_string(),
        components,
        combined: if den > 0.0 { (num / den).clamp(0.0, 1.0) } else { 0.0 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub test_id: String,
    pub priority: f64,
    pub est_duration_s: f64,
    pub cumulative_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub test_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuitePlan {
    pub budget_s: f64,
    pub entries: Vec<PlanEntry>,
    pub excluded: Vec<Exclusion>,
}

impl SuitePlan {
    pub fn duration_s(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.cumulative_s)
    }
}

/// A test ready for planning: `(test_id, priority, est_duration_s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub test_id: String,
    pub priority: f64,
    pub est_duration_s: f64,
}

/// Greedy fill in descending priority (ties by ascending `test_id`).
///
/// A test that does not fit the remaining budget is excluded and the fill
/// continues with the next one. Repeated test ids keep their first occurrence.
pub fn plan_greedy(candidates: Vec<Candidate>, budget_s: f64) -> Result<SuitePlan, SuiteError> {
    if !(budget_s.is_finite() && budget_s > 0.0) {
        return Err(SuiteError::InvalidBudget(budget_s));
    }
    let mut seen = BTreeSet::new();
    let mut items: Vec<Candidate> = candidates
        .into_iter()
        .filter(|c| seen.insert(c.test_id.clone()))
        .collect();
    items.sort_by(|a, b| {
        b.priority
            .total_cmp(&a.priority)
            .then_with(|| a.test_id.cmp(&b.test_id))
    });
    let mut plan = SuitePlan {
        budget_s,
        entries: Vec::new(),
        excluded: Vec::new(),
    };
    let mut used = 0.0;
    for c in items {
        let next = used + c.est_duration_s;
        if next <= budget_s {
            used = next;
            plan.entries.push(PlanEntry {
                test_id: c.test_id,
                priority: c.priority,
                est_duration_s: c.est_duration_s,
                cumulative_s: used,
            });
        } else {
            plan.excluded.push(Exclusion {
                test_id: c.test_id,
                reason: "budget".into(),
            });
        }
    }
    Ok(plan)
}

/// Scores every candidate and fills `budget_s` greedily.
///
/// Durations come from the median of recent runs, falling back to the
/// model's declared estimate. Unknown tests are excluded with reason
/// `unknown_test`.
pub fn build_suite(candidates: &[String], budget_s: f64, ctx: &ScoringContext<'_>) -> Result<SuitePlan, SuiteError> {
    if !(budget_s.is_finite() && budget_s > 0.0) {
        return Err(SuiteError::InvalidBudget(budget_s));
    }
    let unique: BTreeSet<&String> = candidates.iter().collect();
    let mut ready = Vec::new();
    let mut unknown = Vec::new();
    for test_id in unique {
        match score(test_id, ctx) {
            Ok(b) => {
                let fallback = ctx.declared.get(test_id.as_str()).copied();
                let est = ctx
                    .snapshot
                    .duration_estimate(test_id, fallback)
                    .expect("known tests have runs or a declared duration");
                ready.push(Candidate {
                    test_id: test_id.clone(),
                    priority: b.combined,
                    est_duration_s: est,
                });
            }
            Err(_) => unknown.push(Exclusion {
                test_id: test_id.clone(),
                reason: "unknown_test".into(),
            }),
        }
    }
    let mut plan = plan_greedy(ready, budget_s)?;
    plan.excluded.extend(unknown);
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanMetrics {
    pub planned: usize,
    pub failing: usize,
    /// Number of leading positions counted as the first third: `⌈n/3⌉`.
    pub first_third: usize,
    pub failing_in_first_third: usize,
    /// Absent when no planned test failed.
    pub fraction_failing_in_first_third: Option<f64>,
    /// Mean 1-based position of failing tests.
    pub mean_failure_position: Option<f64>,
    /// Average percentage of faults detected, one fault per failing test.
    pub apfd: Option<f64>,
}

pub fn evaluate_plan(plan: &SuitePlan, actual: &BTreeMap<String, Verdict>) -> Result<PlanMetrics, SuiteError> {
    let n = plan.entries.len();
    let mut positions = Vec::new();
    for (i, e) in plan.entries.iter().enumerate() {
        let v = actual
            .get(&e.test_id)
            .ok_or_else(|| SuiteError::MissingVerdict(e.test_id.clone()))?;
        if v.is_failure() {
            positions.push(i + 1);
        }
    }
    let first_third = n.div_ceil(3);
    let m = positions.len();
    let early = positions.iter().filter(|&&p| p <= first_third).count();
    let sum: usize = positions.iter().sum();
    let some_if = |v: f64| if m > 0 { Some(v) } else { None };
    Ok(PlanMetrics {
        planned: n,
        failing: m,
        first_third,
        failing_in_first_third: early,
        fraction_failing_in_first_third: some_if(early as f64 / m as f64),
        mean_failure_position: some_if(sum as f64 / m as f64),
        apfd: some_if(1.0 - sum as f64 / (n * m.max(1)) as f64 + 1.0 / (2 * n.max(1)) as f64),
    })
}
