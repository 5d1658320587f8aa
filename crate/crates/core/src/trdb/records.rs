use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{Timestamp, Verdict};

/// One verdict of one test on one system in one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutcomeRecord {
    pub session_id: String,
    pub branch: String,
    pub system_id: String,
    pub test_id: String,
    pub verdict: Verdict,
    pub duration_s: f64,
    pub started_at: Timestamp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_ref: Option<String>,
    #[serde(default)]
    pub measurements: BTreeMap<String, f64>,
}

impl OutcomeRecord {
    pub fn key(&self) -> OutcomeKey {
        OutcomeKey {
            session_id: self.session_id.clone(),
            test_id: self.test_id.clone(),
            system_id: self.system_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct OutcomeKey {
    pub session_id: String,
    pub test_id: String,
    pub system_id: String,
}

impl fmt::Display for OutcomeKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.session_id, self.test_id, self.system_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionMeta {
    pub session_id: String,
    pub branch: String,
    pub system_id: String,
    pub night_index: u32,
    pub started_at: Timestamp,
}

/// One DUT exercised by one test in one session.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UsageRecord {
    pub test_id: String,
    pub system_id: String,
    pub dut_id: String,
    pub session_id: String,
}

/// One line of a store file or an ingest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StoreLine {
    Outcome(OutcomeRecord),
    Session(SessionMeta),
    Usage(UsageRecord),
    /// Terminates a batch; records after the last commit are not visible.
    Commit { batch: u64, count: usize },
}
