//! Prioritizer configuration.
//!
//! ```text
//! # optional; defaults to all five
//! prioritizers = recent_failure, staleness, novelty, historic_fault_rate, tag_boost
//! recent_failure.weight = 3
//! recent_failure.half_life = 3
//! staleness.horizon = 14
//! tag_boost.tests = t001, t017
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::kv::{KvConfig, KvError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrioritizerKind {
    RecentFailure,
    Staleness,
    Novelty,
    HistoricFaultRate,
    TagBoost,
}

impl PrioritizerKind {
    pub const ALL: [PrioritizerKind; 5] = [
        PrioritizerKind::RecentFailure,
        PrioritizerKind::Staleness,
        PrioritizerKind::Novelty,
        PrioritizerKind::HistoricFaultRate,
        PrioritizerKind::TagBoost,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrioritizerKind::RecentFailure => "recent_failure",
            PrioritizerKind::Staleness => "staleness",
            PrioritizerKind::Novelty => "novelty",
            PrioritizerKind::HistoricFaultRate => "historic_fault_rate",
            PrioritizerKind::TagBoost => "tag_boost",
        }
    }

    pub fn default_weight(self) -> f64 {
        match self {
            PrioritizerKind::RecentFailure => 3.0,
            PrioritizerKind::HistoricFaultRate => 2.0,
            PrioritizerKind::Staleness | PrioritizerKind::Novelty | PrioritizerKind::TagBoost => 1.0,
        }
    }

    /// Numeric parameters and their defaults.
    pub fn default_params(self) -> &'static [(&'static str, f64)] {
        match self {
            PrioritizerKind::RecentFailure => &[("half_life", 3.0)],
            PrioritizerKind::Staleness => &[("horizon", 14.0)],
            PrioritizerKind::Novelty => &[("window", 3.0)],
            PrioritizerKind::HistoricFaultRate => &[("window", 90.0)],
            PrioritizerKind::TagBoost => &[],
        }
    }
}

impl fmt::Display for PrioritizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrioritizerKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PrioritizerKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| ConfigError::UnknownPrioritizer(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrioritizerConfig {
    pub kind: PrioritizerKind,
    pub weight: f64,
    pub params: BTreeMap<String, f64>,
}

impl PrioritizerConfig {
    pub fn new(kind: PrioritizerKind) -> Self {
        PrioritizerConfig {
            kind,
            weight: kind.default_weight(),
            params: kind
                .default_params()
                .iter()
                .map(|&(k, v)| (k.to_string(), v))
                .collect(),
        }
    }

    pub fn param(&self, name: &str) -> f64 {
        self.params[name]
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("unknown prioritizer `{0}`")]
    UnknownPrioritizer(String),
    #[error("{0}: weight must be a finite non-negative number")]
    BadWeight(String),
    #[error("{0}: must be a positive number")]
    BadParam(String),
    #[error("at least one prioritizer needs a positive weight")]
    AllWeightsZero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteConfig {
    pub prioritizers: Vec<PrioritizerConfig>,
    /// Tests carrying the operator boost tag.
    pub boosted_tests: BTreeSet<String>,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            prioritizers: PrioritizerKind::ALL.into_iter().map(PrioritizerConfig::new).collect(),
            boosted_tests: BTreeSet::new(),
        }
    }
}

impl SuiteConfig {
    /// Only the given prioritizers, each with default weight and parameters.
    pub fn only(kinds: &[PrioritizerKind]) -> Self {
        SuiteConfig {
            prioritizers: kinds.iter().copied().map(PrioritizerConfig::new).collect(),
            boosted_tests: BTreeSet::new(),
        }
    }

    pub fn from_kv(text: &str) -> Result<Self, ConfigError> {
        let mut kv = KvConfig::parse(text)?;
        let listed = kv.take_list("prioritizers");
        let kinds: Vec<PrioritizerKind> = if !listed.is_empty() {
            let mut seen = BTreeSet::new();
            listed
                .iter()
                .map(|s| s.parse())
                .collect::<Result<Vec<PrioritizerKind>, _>>()?
                .into_iter()
                .filter(|k| seen.insert(*k))
                .collect()
        } else {
            PrioritizerKind::ALL.to_vec()
        };
        let mut prioritizers = Vec::new();
        for kind in kinds {
            let mut p = PrioritizerConfig::new(kind);
            if let Some(w) = kv.take::<f64>(&format!("{kind}.weight"))? {
                p.weight = w;
            }
            for (name, value) in p.params.iter_mut() {
                if let Some(v) = kv.take::<f64>(&format!("{kind}.{name}"))? {
                    *value = v;
                }
            }
            prioritizers.push(p);
        }
        let boosted_tests = kv.take_list("tag_boost.tests").into_iter().collect();
        kv.finish()?;
        let cfg = SuiteConfig {
            prioritizers,
            boosted_tests,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for p in &self.prioritizers {
            if !(p.weight.is_finite() && p.weight >= 0.0) {
                return Err(ConfigError::BadWeight(format!("{}.weight", p.kind)));
            }
            for (name, v) in &p.params {
                if !(v.is_finite() && *v > 0.0) {
                    return Err(ConfigError::BadParam(format!("{}.{name}", p.kind)));
                }
            }
        }
        if !self.prioritizers.iter().any(|p| p.weight > 0.0) {
            return Err(ConfigError::AllWeightsZero);
        }
        Ok(())
    }
}
