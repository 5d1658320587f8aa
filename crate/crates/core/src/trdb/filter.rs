use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::OutcomeRecord;
use crate::model::{Timestamp, Verdict};

/// Conjunctive filter over outcome records; unset fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutcomeFilter {
    pub branch: Option<String>,
    pub system_id: Option<String>,
    pub test_id: Option<String>,
    pub session_id: Option<String>,
    pub verdicts: Option<BTreeSet<Verdict>>,
    /// Inclusive lower bound on `started_at`.
    pub started_from: Option<Timestamp>,
    /// Inclusive upper bound on `started_at`.
    pub started_to: Option<Timestamp>,
    pub from_night: Option<u32>,
    pub to_night: Option<u32>,
}

impl OutcomeFilter {
    pub fn branch(mut self, branch: impl Into<String>) -> Self {
        self.branch = Some(branch.into());
        self
    }

    pub fn system(mut self, system_id: impl Into<String>) -> Self {
        self.system_id = Some(system_id.into());
        self
    }

    pub fn test(mut self, test_id: impl Into<String>) -> Self {
        self.test_id = Some(test_id.into());
        self
    }

    pub fn session(mut self, session_id: impl Into<String>) -> Self {
        self.session_id = Some(session_id.into());
        self
    }

    pub fn verdicts(mut self, verdicts: impl IntoIterator<Item = Verdict>) -> Self {
        self.verdicts = Some(verdicts.into_iter().collect());
        self
    }

    pub fn nights(mut self, from: Option<u32>, to: Option<u32>) -> Self {
        self.from_night = from;
        self.to_night = to;
        self
    }

    /// `night` is the night index of the record's session.
    pub fn matches(&self, record: &OutcomeRecord, night: u32) -> bool {
        fn eq(want: &Option<String>, have: &str) -> bool {
            want.as_deref().is_none_or(|w| w == have)
        }
        eq(&self.branch, &record.branch)
            && eq(&self.system_id, &record.system_id)
            && eq(&self.test_id, &record.test_id)
            && eq(&self.session_id, &record.session_id)
            && self
                .verdicts
                .as_ref()
                .is_none_or(|v| v.contains(&record.verdict))
            && self.started_from.is_none_or(|t| record.started_at >= t)
            && self.started_to.is_none_or(|t| record.started_at <= t)
            && self.from_night.is_none_or(|n| night >= n)
            && self.to_night.is_none_or(|n| night <= n)
    }
}
