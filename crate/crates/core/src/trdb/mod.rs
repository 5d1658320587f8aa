//! The test results database.
//!
//! A store is a directory:
//!
//! ```text
//! store/outcomes-<n>.ndjson   outcome records, rotated into numbered segments
//! store/sessions.ndjson       session metadata
//! store/usage.ndjson          DUT usage from previous mappings
//! store/LOCK                  advisory writer lock
//! ```
//!
//! Files are strictly append-only. Each `append*` call is one atomic batch.
//! The in-memory indexes are rebuilt from the files on open.

mod filter;
mod log;
mod records;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{self, File};
use std::ops::Deref;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::Verdict;

pub use filter::OutcomeFilter;
pub use records::{OutcomeKey, OutcomeRecord, SessionMeta, StoreLine, UsageRecord};

use log::{Appender, LoadedFile, SESSIONS_FILE, USAGE_FILE};

/// Number of most recent runs feeding [`Snapshot::duration_estimate`].
pub const DURATION_WINDOW: usize = 20;

#[derive(Debug, Error)]
pub enum TrdbError {
    #[error("duplicate key {key}")]
    DuplicateKey { key: String },
    #[error("storage full")]
    StorageFull,
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: corrupt line {line}")]
    Corrupt { path: String, line: usize },
    #[error("store {0} is locked by another writer")]
    Locked(String),
    #[error("store is open read-only")]
    ReadOnly,
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("unknown test `{0}`")]
    UnknownTest(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

#[derive(Debug, Clone, Copy)]
pub struct StoreOptions {
    pub segment_max_records: usize,
    /// fsync after every batch.
    pub sync: bool,
}

impl Default for StoreOptions {
    fn default() -> Self {
        StoreOptions {
            segment_max_records: 100_000,
            sync: true,
        }
    }
}

/// Immutable view of store contents with query indexes.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    outcomes: Vec<OutcomeRecord>,
    sessions: BTreeMap<String, SessionMeta>,
    usage: Vec<UsageRecord>,
    keys: HashSet<OutcomeKey>,
    by_test: HashMap<String, Vec<usize>>,
    by_session: HashMap<String, Vec<usize>>,
}

impl Snapshot {
    fn push_outcome(&mut self, record: OutcomeRecord) {
        let idx = self.outcomes.len();
        self.keys.insert(record.key());
        self.by_test.entry(record.test_id.clone()).or_default().push(idx);
        self.by_session
            .entry(record.session_id.clone())
            .or_default()
            .push(idx);
        self.outcomes.push(record);
    }

    /// All outcome records in append order.
    pub fn outcomes(&self) -> &[OutcomeRecord] {
        &self.outcomes
    }

    pub fn sessions(&self) -> impl Iterator<Item = &SessionMeta> {
        self.sessions.values()
    }

    pub fn session(&self, session_id: &str) -> Option<&SessionMeta> {
        self.sessions.get(session_id)
    }

    pub fn usage(&self) -> &[UsageRecord] {
        &self.usage
    }

    pub fn contains_key(&self, key: &OutcomeKey) -> bool {
        self.keys.contains(key)
    }

    pub fn night_of(&self, record: &OutcomeRecord) -> u32 {
        self.sessions
            .get(&record.session_id)
            .map(|s| s.night_index)
            .expect("outcomes reference known sessions")
    }

    pub fn test_ids(&self) -> BTreeSet<&str> {
        self.by_test.keys().map(String::as_str).collect()
    }

    pub fn has_test(&self, test_id: &str) -> bool {
        self.by_test.contains_key(test_id)
    }

    /// Records matching `filter`, ordered by `(started_at, test_id)` with
    /// system and session as final tie-breakers.
    pub fn query(&self, filter: &OutcomeFilter) -> Vec<&OutcomeRecord> {
        let candidates: Box<dyn Iterator<Item = &OutcomeRecord>> =
            match (&filter.test_id, &filter.session_id) {
                (_, Some(session)) => Box::new(
                    self.by_session
                        .get(session)
                        .into_iter()
                        .flatten()
                        .map(|&i| &self.outcomes[i]),
                ),
                (Some(test), None) => Box::new(
                    self.by_test
                        .get(test)
                        .into_iter()
                        .flatten()
                        .map(|&i| &self.outcomes[i]),
                ),
                (None, None) => Box::new(self.outcomes.iter()),
            };
        let mut out: Vec<&OutcomeRecord> = candidates
            .filter(|r| filter.matches(r, self.night_of(r)))
            .collect();
        out.sort_by(|a, b| chronological(a, b));
        out
    }

    /// Chronological verdicts of one test on one branch, optionally one system.
    /// Skipped runs are included.
    pub fn verdict_sequence(&self, test_id: &str, branch: &str, system_id: Option<&str>) -> Vec<Verdict> {
        let mut filter = OutcomeFilter::default().test(test_id).branch(branch);
        filter.system_id = system_id.map(str::to_string);
        self.query(&filter).into_iter().map(|r| r.verdict).collect()
    }

    /// Median duration over the latest [`DURATION_WINDOW`] runs, else `fallback`.
    pub fn duration_estimate(&self, test_id: &str, fallback: Option<f64>) -> Result<f64, TrdbError> {
        let runs = self.query(&OutcomeFilter::default().test(test_id));
        let mut recent: Vec<f64> = runs
            .iter()
            .rev()
            .take(DURATION_WINDOW)
            .map(|r| r.duration_s)
            .collect();
        if recent.is_empty() {
            return fallback.ok_or_else(|| TrdbError::UnknownTest(test_id.to_string()));
        }
        recent.sort_by(f64::total_cmp);
        let mid = recent.len() / 2;
        Ok(if !recent.len().is_multiple_of(2) {
            recent[mid]
        } else {
            (recent[mid - 1] + recent[mid]) / 2.0
        })
    }

    /// Usage counts keyed by `(test_id, dut_id)` for one system.
    pub fn dut_usage_counts(&self, system_id: &str) -> BTreeMap<(String, String), u64> {
        let mut counts = BTreeMap::new();
        for u in self.usage.iter().filter(|u| u.system_id == system_id) {
            *counts
                .entry((u.test_id.clone(), u.dut_id.clone()))
                .or_insert(0) += 1;
        }
        counts
    }
}

fn chronological(a: &OutcomeRecord, b: &OutcomeRecord) -> std::cmp::Ordering {
    (a.started_at, &a.test_id, &a.system_id, &a.session_id).cmp(&(
        b.started_at,
        &b.test_id,
        &b.system_id,
        &b.session_id,
    ))
}

fn check_record(r: &OutcomeRecord) -> Result<(), TrdbError> {
    if !(r.duration_s.is_finite() && r.duration_s >= 0.0) {
        return Err(TrdbError::InvalidRecord(format!(
            "{}: duration_s must be a non-negative number",
            r.key()
        )));
    }
    if let Some((name, _)) = r.measurements.iter().find(|(_, v)| !v.is_finite()) {
        return Err(TrdbError::InvalidRecord(format!(
            "{}: measurement `{name}` is not finite",
            r.key()
        )));
    }
    Ok(())
}

#[derive(Debug)]
struct Writer {
    _lock: File,
    outcomes: Appender,
    sessions: Appender,
    usage: Appender,
}

/// Counts of what one ingest call appended.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct IngestSummary {
    pub sessions: usize,
    pub outcomes: usize,
    pub usage: usize,
}

/// Handle on a store directory. Dereferences to its current [`Snapshot`].
#[derive(Debug)]
pub struct Trdb {
    root: PathBuf,
    snapshot: Snapshot,
    writer: Option<Writer>,
}

impl Deref for Trdb {
    type Target = Snapshot;

    fn deref(&self) -> &Snapshot {
        &self.snapshot
    }
}

fn load(root: &Path) -> Result<(Snapshot, Vec<(u32, LoadedFile)>, LoadedFile, LoadedFile), TrdbError> {
    let mut snapshot = Snapshot::default();
    let sessions = log::read_file(&root.join(SESSIONS_FILE))?;
    for line in &sessions.lines {
        if let StoreLine::Session(s) = line {
            snapshot.sessions.insert(s.session_id.clone(), s.clone());
        }
    }
    let mut segments = Vec::new();
    for (n, path) in log::outcome_segments(root)? {
        let loaded = log::read_file(&path)?;
        for line in &loaded.lines {
            if let StoreLine::Outcome(r) = line {
                if !snapshot.sessions.contains_key(&r.session_id) {
                    return Err(TrdbError::UnknownSession(r.session_id.clone()));
                }
                snapshot.push_outcome(r.clone());
            }
        }
        segments.push((n, loaded));
    }
    let usage = log::read_file(&root.join(USAGE_FILE))?;
    for line in &usage.lines {
        if let StoreLine::Usage(u) = line {
            snapshot.usage.push(u.clone());
        }
    }
    Ok((snapshot, segments, sessions, usage))
}

impl Trdb {
    /// Opens (creating if needed) a store for writing and takes the writer lock.
    pub fn open(root: impl AsRef<Path>) -> Result<Self, TrdbError> {
        Self::open_with(root, StoreOptions::default())
    }

    pub fn open_with(root: impl AsRef<Path>, options: StoreOptions) -> Result<Self, TrdbError> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(log::io_err(&root))?;
        let lock_path = root.join("LOCK");
        let lock = File::create(&lock_path).map_err(log::io_err(&lock_path))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(std::fs::TryLockError::WouldBlock) => {
                return Err(TrdbError::Locked(root.display().to_string()))
            }
            Err(std::fs::TryLockError::Error(e)) => return Err(log::io_err(&lock_path)(e)),
        }
        let (snapshot, segments, sessions, usage) = load(&root)?;
        let outcomes = match segments.last() {
            Some((n, last)) => Appender::segmented(
                &root,
                *n,
                last,
                options.segment_max_records,
                options.sync,
            )?,
            None => Appender::segmented(
                &root,
                0,
                &LoadedFile::empty(),
                options.segment_max_records,
                options.sync,
            )?,
        };
        let writer = Writer {
            _lock: lock,
            outcomes,
            sessions: Appender::fixed(&root, SESSIONS_FILE, &sessions, options.sync)?,
            usage: Appender::fixed(&root, USAGE_FILE, &usage, options.sync)?,
        };
        Ok(Trdb {
            root,
            snapshot,
            writer: Some(writer),
        })
    }

    /// Opens an existing store without locking; sees the committed prefix.
    pub fn open_read_only(root: impl AsRef<Path>) -> Result<Self, TrdbError> {
        let root = root.as_ref().to_path_buf();
        if !root.is_dir() {
            return Err(TrdbError::Io {
                path: root.display().to_string(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "store directory not found"),
            });
        }
        let (snapshot, ..) = load(&root)?;
        Ok(Trdb {
            root,
            snapshot,
            writer: None,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn snapshot(&self) -> &Snapshot {
        &self.snapshot
    }

    pub fn into_snapshot(self) -> Snapshot {
        self.snapshot
    }

    fn writer(&mut self) -> Result<&mut Writer, TrdbError> {
        self.writer.as_mut().ok_or(TrdbError::ReadOnly)
    }

    /// Appends outcome records as one atomic batch.
    pub fn append(&mut self, records: Vec<OutcomeRecord>) -> Result<usize, TrdbError> {
        let mut batch_keys = HashSet::new();
        for r in &records {
            check_record(r)?;
            if !self.snapshot.sessions.contains_key(&r.session_id) {
                return Err(TrdbError::UnknownSession(r.session_id.clone()));
            }
            let key = r.key();
            if self.snapshot.keys.contains(&key) || !batch_keys.insert(key.clone()) {
                return Err(TrdbError::DuplicateKey {
                    key: key.to_string(),
                });
            }
        }
        let n = records.len();
        self.writer()?
            .outcomes
            .write_batch(records.iter().cloned().map(StoreLine::Outcome).collect())?;
        for r in records {
            self.snapshot.push_outcome(r);
        }
        Ok(n)
    }

    pub fn append_sessions(&mut self, sessions: Vec<SessionMeta>) -> Result<usize, TrdbError> {
        let mut seen = HashSet::new();
        for s in &sessions {
            if self.snapshot.sessions.contains_key(&s.session_id) || !seen.insert(&s.session_id) {
                return Err(TrdbError::DuplicateKey {
                    key: s.session_id.clone(),
                });
            }
        }
        let n = sessions.len();
        self.writer()?
            .sessions
            .write_batch(sessions.iter().cloned().map(StoreLine::Session).collect())?;
        for s in sessions {
            self.snapshot.sessions.insert(s.session_id.clone(), s);
        }
        Ok(n)
    }

    pub fn append_usage(&mut self, usage: Vec<UsageRecord>) -> Result<usize, TrdbError> {
        if let Some(u) = usage
            .iter()
            .find(|u| !self.snapshot.sessions.contains_key(&u.session_id))
        {
            return Err(TrdbError::UnknownSession(u.session_id.clone()));
        }
        let n = usage.len();
        self.writer()?
            .usage
            .write_batch(usage.iter().cloned().map(StoreLine::Usage).collect())?;
        self.snapshot.usage.extend(usage);
        Ok(n)
    }

    /// Appends mixed lines: sessions first, then outcomes, then usage, one batch each.
    pub fn ingest(&mut self, lines: Vec<StoreLine>) -> Result<IngestSummary, TrdbError> {
        let (mut sessions, mut outcomes, mut usage) = (Vec::new(), Vec::new(), Vec::new());
        for line in lines {
            match line {
                StoreLine::Session(s) => sessions.push(s),
                StoreLine::Outcome(o) => outcomes.push(o),
                StoreLine::Usage(u) => usage.push(u),
                StoreLine::Commit { .. } => {
                    return Err(TrdbError::InvalidRecord("commit lines cannot be ingested".into()))
                }
            }
        }
        Ok(IngestSummary {
            sessions: self.append_sessions(sessions)?,
            outcomes: self.append(outcomes)?,
            usage: self.append_usage(usage)?,
        })
    }
}

/// Parses an ingest file: one tagged [`StoreLine`] per line, blank lines ignored.
pub fn parse_store_lines(text: &str) -> Result<Vec<StoreLine>, (usize, String)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| (i + 1, e.to_string())))
        .collect()
}
