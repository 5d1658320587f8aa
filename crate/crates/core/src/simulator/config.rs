//! Lab configuration and its flat-file form.
//!
//! ```text
//! n_systems = 3
//! n_duts_per_system = 6
//! n_tests = 50
//! n_branches = 2
//! n_nights = 120
//! mean_duration_s = 300
//! seed = 7
//! # test@branch:start[-end]; end is exclusive
//! regressions = t003@main:40, t004@feature-1:10-25
//! # test:probability[:bernoulli|flip]
//! intermittent = t010:0.3, t011:0.5:flip
//! logs = true
//! ```

use std::collections::BTreeSet;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kv::{KvConfig, KvError};

#[derive(Debug, Error, PartialEq)]
pub enum LabConfigError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("{0} must be a positive integer")]
    NotPositive(&'static str),
    #[error("cannot parse `{0}`")]
    BadEntry(String),
    #[error("`{0}` is not one of the generated tests")]
    UnknownTest(String),
    #[error("`{0}` is not one of the generated branches")]
    UnknownBranch(String),
    #[error("flip probability {0} out of range for {1}")]
    BadProbability(f64, &'static str),
    #[error("mean_duration_s must be positive")]
    BadDuration,
    #[error("test `{0}` is injected both as a regression and as intermittent")]
    Overlap(String),
    #[error("regression on `{0}` ends before it starts")]
    EmptyEpisode(String),
}

/// How an intermittent test decides each night's verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlipModel {
    /// Fails independently with the given probability on every run.
    Bernoulli,
    /// Two-state chain starting at pass that changes state with the given probability.
    Flip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionInjection {
    pub test_id: String,
    pub branch: String,
    pub start_night: u32,
    /// First night the regression is fixed again; open-ended when absent.
    pub end_night: Option<u32>,
}

impl RegressionInjection {
    pub fn active(&self, night: u32) -> bool {
        night >= self.start_night && self.end_night.is_none_or(|e| night < e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntermittentInjection {
    pub test_id: String,
    pub flip_prob: f64,
    pub model: FlipModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabConfig {
    pub n_systems: u32,
    pub n_duts_per_system: u32,
    pub n_tests: u32,
    pub n_branches: u32,
    pub n_nights: u32,
    pub regression_injections: Vec<RegressionInjection>,
    pub intermittent_tests: Vec<IntermittentInjection>,
    pub mean_duration_s: f64,
    pub seed: u64,
    /// Write log files for failing runs under `<store>/logs`.
    pub write_logs: bool,
    /// Map every test with coverage rotation each night and persist usage.
    pub record_usage: bool,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            n_systems: 2,
            n_duts_per_system: 5,
            n_tests: 20,
            n_branches: 2,
            n_nights: 30,
            regression_injections: Vec::new(),
            intermittent_tests: Vec::new(),
            mean_duration_s: 300.0,
            seed: 1,
            write_logs: false,
            record_usage: true,
        }
    }
}

impl LabConfig {
    pub fn test_id(&self, i: u32) -> String {
        let width = (self.n_tests.saturating_sub(1)).to_string().len().max(3);
        format!("t{i:0width$}")
    }

    pub fn test_ids(&self) -> Vec<String> {
        (0..self.n_tests).map(|i| self.test_id(i)).collect()
    }

    pub fn branch_name(i: u32) -> String {
        if i == 0 {
            "main".to_string()
        } else {
            format!("feature-{i}")
        }
    }

    pub fn branches(&self) -> Vec<String> {
        (0..self.n_branches).map(Self::branch_name).collect()
    }

    pub fn system_ids(&self) -> Vec<String> {
        (0..self.n_systems).map(|i| format!("sys{i}")).collect()
    }

    pub fn validate(&self) -> Result<(), LabConfigError> {
        for (name, v) in [
            ("n_systems", self.n_systems),
            ("n_duts_per_system", self.n_duts_per_system),
            ("n_tests", self.n_tests),
            ("n_branches", self.n_branches),
            ("n_nights", self.n_nights),
        ] {
            if v == 0 {
                return Err(LabConfigError::NotPositive(name));
            }
        }
        if !(self.mean_duration_s.is_finite() && self.mean_duration_s > 0.0) {
            return Err(LabConfigError::BadDuration);
        }
        let tests: BTreeSet<String> = self.test_ids().into_iter().collect();
        let branches: BTreeSet<String> = self.branches().into_iter().collect();
        let mut regressed = BTreeSet::new();
        for r in &self.regression_injections {
            if !tests.contains(&r.test_id) {
                return Err(LabConfigError::UnknownTest(r.test_id.clone()));
            }
            if !branches.contains(&r.branch) {
                return Err(LabConfigError::UnknownBranch(r.branch.clone()));
            }
            if r.end_night.is_some_and(|e| e <= r.start_night) {
                return Err(LabConfigError::EmptyEpisode(r.test_id.clone()));
            }
            regressed.insert(&r.test_id);
        }
        for t in &self.intermittent_tests {
            if !tests.contains(&t.test_id) {
                return Err(LabConfigError::UnknownTest(t.test_id.clone()));
            }
            let ok = match t.model {
                FlipModel::Bernoulli => t.flip_prob > 0.0 && t.flip_prob < 1.0,
                FlipModel::Flip => t.flip_prob > 0.0 && t.flip_prob <= 1.0,
            };
            if !ok {
                let model = match t.model {
                    FlipModel::Bernoulli => "bernoulli (0, 1)",
                    FlipModel::Flip => "flip (0, 1]",
                };
                return Err(LabConfigError::BadProbability(t.flip_prob, model));
            }
            if regressed.contains(&t.test_id) {
                return Err(LabConfigError::Overlap(t.test_id.clone()));
            }
        }
        Ok(())
    }

    pub fn from_kv(text: &str) -> Result<Self, LabConfigError> {
        let mut kv = KvConfig::parse(text)?;
        let d = LabConfig::default();
        let cfg = LabConfig {
            n_systems: kv.take("n_systems")?.unwrap_or(d.n_systems),
            n_duts_per_system: kv.take("n_duts_per_system")?.unwrap_or(d.n_duts_per_system),
            n_tests: kv.take("n_tests")?.unwrap_or(d.n_tests),
            n_branches: kv.take("n_branches")?.unwrap_or(d.n_branches),
            n_nights: kv.take("n_nights")?.unwrap_or(d.n_nights),
            mean_duration_s: kv.take("mean_duration_s")?.unwrap_or(d.mean_duration_s),
            seed: kv.take("seed")?.unwrap_or(d.seed),
            write_logs: kv.take("logs")?.unwrap_or(d.write_logs),
            record_usage: kv.take("usage")?.unwrap_or(d.record_usage),
            regression_injections: kv
                .take_list("regressions")
                .iter()
                .map(|s| parse_regression(s))
                .collect::<Result<_, _>>()?,
            intermittent_tests: kv
                .take_list("intermittent")
                .iter()
                .map(|s| parse_intermittent(s))
                .collect::<Result<_, _>>()?,
        };
        kv.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_regression(s: &str) -> Result<RegressionInjection, LabConfigError> {
    let bad = || LabConfigError::BadEntry(s.to_string());
    let (test, rest) = s.split_once('@').ok_or_else(bad)?;
    let (branch, nights) = rest.rsplit_once(':').ok_or_else(bad)?;
    let (start, end) = match nights.split_once('-') {
        Some((a, b)) => (a, Some(b)),
        None => (nights, None),
    };
    Ok(RegressionInjection {
        test_id: test.trim().to_string(),
        branch: branch.trim().to_string(),
        start_night: start.trim().parse().map_err(|_| bad())?,
        end_night: end.map(|e| e.trim().parse()).transpose().map_err(|_| bad())?,
    })
}

fn parse_intermittent(s: &str) -> Result<IntermittentInjection, LabConfigError> {
    let bad = || LabConfigError::BadEntry(s.to_string());
    let mut parts = s.split(':').map(str::trim);
    let test = parts.next().filter(|t| !t.is_empty()).ok_or_else(bad)?;
    let p = parts.next().ok_or_else(bad).and_then(|p| f64::from_str(p).map_err(|_| bad()))?;
    let model = match parts.next() {
        None | Some("bernoulli") => FlipModel::Bernoulli,
        Some("flip") => FlipModel::Flip,
        Some(_) => return Err(bad()),
    };
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok(IntermittentInjection {
        test_id: test.to_string(),
        flip_prob: p,
        model,
    })
}
