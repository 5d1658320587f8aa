//! Intermittently failing test detection.
//!
//! A verdict history is reduced to a pass/fail chain and summarized by its
//! first-order transition counts. The intermittence score is the product of
//! the two flip probabilities `P(F | P)` and `P(P | F)`: zero for tests that
//! never fail and for single regressions, one for perfect alternation.
//!
//! The score formula and the `tau`/`min_runs` defaults are configurable
//! stand-ins, not a reproduction of any published metric.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Verdict;
use crate::trdb::{OutcomeFilter, Snapshot};

pub const DEFAULT_TAU: f64 = 0.125;
pub const DEFAULT_MIN_RUNS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bit {
    P,
    F,
}

/// `pass → P`, `fail → F`, `error → F` (or dropped when `error_as_fail` is
/// false), `skipped` dropped.
pub fn binarize_with(seq: &[Verdict], error_as_fail: bool) -> Vec<Bit> {
    seq.iter()
        .filter_map(|v| match v {
            Verdict::Pass => Some(Bit::P),
            Verdict::Fail => Some(Bit::F),
            Verdict::Error if error_as_fail => Some(Bit::F),
            Verdict::Error | Verdict::Skipped => None,
        })
        .collect()
}

pub fn binarize(seq: &[Verdict]) -> Vec<Bit> {
    binarize_with(seq, true)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransitionCounts {
    pub n_pp: u64,
    pub n_pf: u64,
    pub n_fp: u64,
    pub n_ff: u64,
}

impl TransitionCounts {
    pub fn total(&self) -> u64 {
        self.n_pp + self.n_pf + self.n_fp + self.n_ff
    }
}

pub fn transition_counts(bits: &[Bit]) -> TransitionCounts {
    let mut c = TransitionCounts::default();
    for pair in bits.windows(2) {
        match (pair[0], pair[1]) {
            (Bit::P, Bit::P) => c.n_pp += 1,
            (Bit::P, Bit::F) => c.n_pf += 1,
            (Bit::F, Bit::P) => c.n_fp += 1,
            (Bit::F, Bit::F) => c.n_ff += 1,
        }
    }
    c
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntermittenceScore {
    pub p_pf: f64,
    pub p_fp: f64,
    pub score: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn score(counts: &TransitionCounts) -> IntermittenceScore {
    let p_pf = ratio(counts.n_pf, counts.n_pp + counts.n_pf);
    let p_fp = ratio(counts.n_fp, counts.n_ff + counts.n_fp);
    IntermittenceScore {
        p_pf,
        p_fp,
        score: p_pf * p_fp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    NeverFailing,
    ConsistentlyFailing,
    IntermittentlyFailing,
    InsufficientData,
}

impl fmt::Display for Classification {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Classification::NeverFailing => "never_failing",
            Classification::ConsistentlyFailing => "consistently_failing",
            Classification::IntermittentlyFailing => "intermittently_failing",
            Classification::InsufficientData => "insufficient_data",
        })
    }
}

/// Root-cause factors for intermittent failures, assigned by humans.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FactorTag {
    TestCaseAssumptions,
    ComplexityOfTesting,
    SoftwareOrHardwareFaults,
    TestCaseDependencies,
    ResourceLeaks,
    NetworkIssues,
    RandomNumbersIssues,
    TestSystemIssues,
    Refactoring,
}

impl FactorTag {
    pub const ALL: [FactorTag; 9] = [
        FactorTag::TestCaseAssumptions,
        FactorTag::ComplexityOfTesting,
        FactorTag::SoftwareOrHardwareFaults,
        FactorTag::TestCaseDependencies,
        FactorTag::ResourceLeaks,
        FactorTag::NetworkIssues,
        FactorTag::RandomNumbersIssues,
        FactorTag::TestSystemIssues,
        FactorTag::Refactoring,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FactorTag::TestCaseAssumptions => "test_case_assumptions",
            FactorTag::ComplexityOfTesting => "complexity_of_testing",
            FactorTag::SoftwareOrHardwareFaults => "software_or_hardware_faults",
            FactorTag::TestCaseDependencies => "test_case_dependencies",
            FactorTag::ResourceLeaks => "resource_leaks",
            FactorTag::NetworkIssues => "network_issues",
            FactorTag::RandomNumbersIssues => "random_numbers_issues",
            FactorTag::TestSystemIssues => "test_system_issues",
            FactorTag::Refactoring => "refactoring",
        }
    }
}

impl FromStr for FactorTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FactorTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown factor tag `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("tau must lie in (0, 1], got {0}")]
    Tau(f64),
    #[error("min_runs must be at least 2, got {0}")]
    MinRuns(usize),
}

/// Classification thresholds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    tau: f64,
    min_runs: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            tau: DEFAULT_TAU,
            min_runs: DEFAULT_MIN_RUNS,
        }
    }
}

impl Thresholds {
    pub fn new(tau: f64, min_runs: usize) -> Result<Self, ParamError> {
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(ParamError::Tau(tau));
        }
        if min_runs < 2 {
            return Err(ParamError::MinRuns(min_runs));
        }
        Ok(Thresholds { tau, min_runs })
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn min_runs(&self) -> usize {
        self.min_runs
    }

    pub fn classify_bits(&self, bits: &[Bit]) -> Classification {
        if bits.len() < self.min_runs {
            Classification::InsufficientData
        } else if !bits.contains(&Bit::F) {
            Classification::NeverFailing
        } else if score(&transition_counts(bits)).score >= self.tau {
            Classification::IntermittentlyFailing
        } else {
            Classification::ConsistentlyFailing
        }
    }
}

pub fn classify(seq: &[Verdict], thresholds: &Thresholds) -> Classification {
    thresholds.classify_bits(&binarize(seq))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermittenceReport {
    pub test_id: String,
    pub branch: String,
    /// Length of the binarized sequence.
    pub runs: usize,
    pub counts: TransitionCounts,
    pub p_pf: f64,
    pub p_fp: f64,
    pub score: f64,
    pub classification: Classification,
    #[serde(default)]
    pub factor_tags: BTreeSet<FactorTag>,
}

impl IntermittenceReport {
    pub fn from_sequence(
        test_id: &str,
        branch: &str,
        seq: &[Verdict],
        thresholds: &Thresholds,
        error_as_fail: bool,
    ) -> Self {
        let bits = binarize_with(seq, error_as_fail);
        let counts = transition_counts(&bits);
        let s = score(&counts);
        IntermittenceReport {
            test_id: test_id.to_string(),
            branch: branch.to_string(),
            runs: bits.len(),
            counts,
            p_pf: s.p_pf,
            p_fp: s.p_fp,
            score: s.score,
            classification: thresholds.classify_bits(&bits),
            factor_tags: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankParams {
    pub thresholds: Thresholds,
    pub branch: Option<String>,
    pub from_night: Option<u32>,
    pub to_night: Option<u32>,
    pub error_as_fail: bool,
}

impl Default for RankParams {
    fn default() -> Self {
        RankParams {
            thresholds: Thresholds::default(),
            branch: None,
            from_night: None,
            to_night: None,
            error_as_fail: true,
        }
    }
}

/// One report per `(test_id, branch)` with data in the window, systems merged
/// chronologically; ordered by score descending, then test and branch.
pub fn rank(snapshot: &Snapshot, params: &RankParams) -> Vec<IntermittenceReport> {
    let mut filter = OutcomeFilter::default().nights(params.from_night, params.to_night);
    filter.branch = params.branch.clone();
    let mut sequences: BTreeMap<(&str, &str), Vec<Verdict>> = BTreeMap::new();
    for r in snapshot.query(&filter) {
        sequences
            .entry((r.test_id.as_str(), r.branch.as_str()))
            .or_default()
            .push(r.verdict);
    }
    let mut reports: Vec<IntermittenceReport> = sequences
        .into_iter()
        .map(|((test, branch), seq)| {
            IntermittenceReport::from_sequence(test, branch, &seq, &params.thresholds, params.error_as_fail)
        })
        .collect();
    reports.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.test_id.cmp(&b.test_id))
            .then_with(|| a.branch.cmp(&b.branch))
    });
    reports
}
