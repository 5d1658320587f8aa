//! One function per endpoint, each a pure function of a store snapshot.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Component, Path, PathBuf};

use nightlab_core::intermittence::{rank, IntermittenceReport, RankParams};
use nightlab_core::model::{Timestamp, Verdict};
use nightlab_core::trdb::{OutcomeFilter, OutcomeRecord, SessionMeta, Snapshot};
use serde::{Deserialize, Serialize};

use crate::ApiError;

/// Logs up to this many lines are previewed in full.
pub const PREVIEW_FULL_LINES: usize = 100;
/// Lines kept from each end of a longer log.
pub const PREVIEW_EDGE_LINES: usize = 50;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictCounts {
    pub pass: usize,
    pub fail: usize,
    pub error: usize,
    pub skipped: usize,
}

impl VerdictCounts {
    pub fn add(&mut self, v: Verdict) {
        match v {
            Verdict::Pass => self.pass += 1,
            Verdict::Fail => self.fail += 1,
            Verdict::Error => self.error += 1,
            Verdict::Skipped => self.skipped += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.pass + self.fail + self.error + self.skipped
    }
}

// ---- start ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NightRange {
    pub first: u32,
    pub last: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub outcomes: usize,
    pub sessions: usize,
    pub tests: usize,
    pub branches: usize,
    pub systems: usize,
    pub usage_records: usize,
    pub verdicts: VerdictCounts,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StartView {
    pub branches: Vec<String>,
    pub systems: Vec<String>,
    pub night_range: Option<NightRange>,
    pub totals: Totals,
}

pub fn start(snap: &Snapshot) -> StartView {
    let mut branches = BTreeSet::new();
    let mut systems = BTreeSet::new();
    let mut nights: Option<NightRange> = None;
    for s in snap.sessions() {
        branches.insert(s.branch.clone());
        systems.insert(s.system_id.clone());
        nights = Some(match nights {
            None => NightRange { first: s.night_index, last: s.night_index },
            Some(r) => NightRange {
                first: r.first.min(s.night_index),
                last: r.last.max(s.night_index),
            },
        });
    }
    let mut verdicts = VerdictCounts::default();
    for r in snap.outcomes() {
        verdicts.add(r.verdict);
    }
    StartView {
        totals: Totals {
            outcomes: snap.outcomes().len(),
            sessions: snap.sessions().count(),
            tests: snap.test_ids().len(),
            branches: branches.len(),
            systems: systems.len(),
            usage_records: snap.usage().len(),
            verdicts,
        },
        branches: branches.into_iter().collect(),
        systems: systems.into_iter().collect(),
        night_range: nights,
    }
}

// ---- outcomes ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridQuery {
    pub filter: OutcomeFilter,
    /// Rows (tests) per page.
    pub limit: usize,
    pub offset: usize,
}

pub const DEFAULT_GRID_LIMIT: usize = 100;
pub const MAX_GRID_LIMIT: usize = 10_000;

impl Default for GridQuery {
    fn default() -> Self {
        GridQuery {
            filter: OutcomeFilter::default(),
            limit: DEFAULT_GRID_LIMIT,
            offset: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeGridCell {
    pub test_id: String,
    pub session_id: String,
    pub verdict: Verdict,
    pub duration_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub test_id: String,
    /// Chronological; a session without a cell did not run the test.
    pub cells: Vec<OutcomeGridCell>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridColumn {
    pub session_id: String,
    pub branch: String,
    pub system_id: String,
    pub night_index: u32,
    pub started_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeGrid {
    pub total_rows: usize,
    pub total_cells: usize,
    pub offset: usize,
    pub limit: usize,
    /// Sessions appearing on this page, in session start order.
    pub sessions: Vec<GridColumn>,
    pub rows: Vec<GridRow>,
}

pub fn outcomes(snap: &Snapshot, q: &GridQuery) -> OutcomeGrid {
    let records = snap.query(&q.filter);
    let total_cells = records.len();
    let mut by_test: BTreeMap<&str, Vec<&OutcomeRecord>> = BTreeMap::new();
    for r in records {
        by_test.entry(r.test_id.as_str()).or_default().push(r);
    }
    let total_rows = by_test.len();
    let rows: Vec<GridRow> = by_test
        .into_iter()
        .skip(q.offset)
        .take(q.limit)
        .map(|(test, recs)| GridRow {
            test_id: test.to_string(),
            cells: recs
                .into_iter()
                .map(|r| OutcomeGridCell {
                    test_id: r.test_id.clone(),
                    session_id: r.session_id.clone(),
                    verdict: r.verdict,
                    duration_s: r.duration_s,
                })
                .collect(),
        })
        .collect();
    let ids: BTreeSet<&str> = rows
        .iter()
        .flat_map(|row| row.cells.iter().map(|c| c.session_id.as_str()))
        .collect();
    let mut sessions: Vec<GridColumn> = ids
        .into_iter()
        .filter_map(|id| snap.session(id))
        .map(column)
        .collect();
    sessions.sort_by(|a, b| (a.started_at, &a.session_id).cmp(&(b.started_at, &b.session_id)));
    OutcomeGrid {
        total_rows,
        total_cells,
        offset: q.offset,
        limit: q.limit,
        sessions,
        rows,
    }
}

fn column(s: &SessionMeta) -> GridColumn {
    GridColumn {
        session_id: s.session_id.clone(),
        branch: s.branch.clone(),
        system_id: s.system_id.clone(),
        night_index: s.night_index,
        started_at: s.started_at,
    }
}

// ---- outcome ----

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogPreview {
    pub total_lines: usize,
    pub truncated: bool,
    /// Lines left out between `head` and `tail`.
    pub omitted_lines: usize,
    pub head: Vec<String>,
    pub tail: Vec<String>,
    pub marker: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeView {
    pub record: OutcomeRecord,
    pub night_index: u32,
    /// Absent when the record has no log or the log cannot be read.
    pub preview: Option<LogPreview>,
}

pub fn outcome(snap: &Snapshot, store_root: &Path, session_id: &str, test_id: &str) -> Result<OutcomeView, ApiError> {
    let filter = OutcomeFilter::default().session(session_id).test(test_id);
    let record = snap
        .query(&filter)
        .into_iter()
        .next()
        .cloned()
        .ok_or_else(|| ApiError::NotFound(format!("no outcome for test `{test_id}` in session `{session_id}`")))?;
    let preview = record
        .log_ref
        .as_deref()
        .and_then(|r| resolve_log(store_root, r))
        .and_then(|p| preview_file(&p));
    Ok(OutcomeView {
        night_index: snap.night_of(&record),
        record,
        preview,
    })
}

/// Resolves `log_ref` below the store root; anything that could escape it is refused.
pub fn resolve_log(root: &Path, log_ref: &str) -> Option<PathBuf> {
    let rel = Path::new(log_ref);
    if log_ref.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir)) {
        return None;
    }
    Some(root.join(rel))
}

fn preview_file(path: &Path) -> Option<LogPreview> {
    let file = File::open(path).ok()?;
    if !file.metadata().ok()?.is_file() {
        return None;
    }
    let mut head = Vec::new();
    let mut tail = VecDeque::new();
    let mut total = 0usize;
    for line in BufReader::new(file).split(b'\n') {
        let line = line.ok()?;
        let text = String::from_utf8_lossy(&line).trim_end_matches('\r').to_string();
        total += 1;
        if head.len() < PREVIEW_FULL_LINES {
            head.push(text);
        } else {
            tail.push_back(text);
            if tail.len() > PREVIEW_EDGE_LINES {
                tail.pop_front();
            }
        }
    }
    Some(preview_lines(head, tail.into(), total))
}

/// `head` holds the first min(total, 100) lines and `tail` the last lines beyond them.
fn preview_lines(mut head: Vec<String>, tail: Vec<String>, total: usize) -> LogPreview {
    if total <= PREVIEW_FULL_LINES {
        return LogPreview {
            total_lines: total,
            truncated: false,
            omitted_lines: 0,
            head,
            tail: Vec::new(),
            marker: None,
        };
    }
    // head has 100 lines; lines 50..100 may belong to the tail when total < 150
    let mut last: Vec<String> = head.split_off(PREVIEW_EDGE_LINES);
    last.extend(tail);
    let tail = last.split_off(last.len() - PREVIEW_EDGE_LINES);
    let omitted = total - 2 * PREVIEW_EDGE_LINES;
    LogPreview {
        total_lines: total,
        truncated: true,
        omitted_lines: omitted,
        head,
        tail,
        marker: Some(format!("[... {omitted} lines omitted ...]")),
    }
}

pub fn preview_text(text: &str) -> LogPreview {
    let all: Vec<String> = text.lines().map(str::to_string).collect();
    let total = all.len();
    let split = total.min(PREVIEW_FULL_LINES);
    let mut head = all;
    let rest = head.split_off(split);
    let tail = rest[rest.len().saturating_sub(PREVIEW_EDGE_LINES)..].to_vec();
    preview_lines(head, tail, total)
}

// ---- session ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session: SessionMeta,
    pub counts: VerdictCounts,
    pub outcomes: Vec<OutcomeRecord>,
}

pub fn session(snap: &Snapshot, session_id: &str) -> Result<SessionView, ApiError> {
    let meta = snap
        .session(session_id)
        .ok_or_else(|| ApiError::NotFound(format!("unknown session `{session_id}`")))?;
    let outcomes: Vec<OutcomeRecord> = snap
        .query(&OutcomeFilter::default().session(session_id))
        .into_iter()
        .cloned()
        .collect();
    let mut counts = VerdictCounts::default();
    for r in &outcomes {
        counts.add(r.verdict);
    }
    Ok(SessionView {
        session: meta.clone(),
        counts,
        outcomes,
    })
}

// ---- heatmap ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    System,
    Night,
}

impl std::str::FromStr for Axis {
    type Err = ApiError;

    fn from_str(s: &str) -> Result<Self, ApiError> {
        match s {
            "system" => Ok(Axis::System),
            "night" => Ok(Axis::Night),
            _ => Err(ApiError::BadRequest(format!("axis must be `system` or `night`, not `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColumnKey {
    Night(u32),
    System(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapCell {
    pub test_id: String,
    pub column: ColumnKey,
    pub fail_rate: f64,
    pub failures: usize,
    /// Non-skipped runs.
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapView {
    pub axis: Axis,
    pub cells: Vec<HeatmapCell>,
}

/// Filter fields other than branch and nights are honoured too.
pub fn heatmap(snap: &Snapshot, filter: &OutcomeFilter, axis: Axis) -> HeatmapView {
    let mut tally: BTreeMap<(&str, ColumnKey), (usize, usize)> = BTreeMap::new();
    for r in snap.query(filter) {
        if r.verdict == Verdict::Skipped {
            continue;
        }
        let col = match axis {
            Axis::System => ColumnKey::System(r.system_id.clone()),
            Axis::Night => ColumnKey::Night(snap.night_of(r)),
        };
        let e = tally.entry((r.test_id.as_str(), col)).or_default();
        e.1 += 1;
        if r.verdict.is_failure() {
            e.0 += 1;
        }
    }
    let cells = tally
        .into_iter()
        .map(|((test, column), (failures, runs))| HeatmapCell {
            test_id: test.to_string(),
            column,
            fail_rate: failures as f64 / runs as f64,
            failures,
            runs,
        })
        .collect();
    HeatmapView { axis, cells }
}

// ---- measurements ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPoint {
    pub night: u32,
    pub value: f64,
    pub test_id: String,
    pub session_id: String,
    pub system_id: String,
    pub branch: String,
    pub started_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSeries {
    pub metric: String,
    pub points: Vec<MeasurementPoint>,
}

pub fn measurements(snap: &Snapshot, filter: &OutcomeFilter, metric: &str) -> MeasurementSeries {
    let points = snap
        .query(filter)
        .into_iter()
        .filter_map(|r| {
            r.measurements.get(metric).map(|&value| MeasurementPoint {
                night: snap.night_of(r),
                value,
                test_id: r.test_id.clone(),
                session_id: r.session_id.clone(),
                system_id: r.system_id.clone(),
                branch: r.branch.clone(),
                started_at: r.started_at,
            })
        })
        .collect();
    MeasurementSeries {
        metric: metric.to_string(),
        points,
    }
}

// ---- compare ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delta {
    Same,
    Regressed,
    Fixed,
    OnlyA,
    OnlyB,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictSummary {
    /// Non-skipped runs in the window.
    pub runs: usize,
    pub failures: usize,
    pub latest: Verdict,
    pub latest_night: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchComparison {
    pub test_id: String,
    pub a: Option<VerdictSummary>,
    pub b: Option<VerdictSummary>,
    pub delta: Delta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompareView {
    pub branch_a: String,
    pub branch_b: String,
    pub from_night: Option<u32>,
    pub comparisons: Vec<BranchComparison>,
}

impl Delta {
    pub fn classify(a: Option<&VerdictSummary>, b: Option<&VerdictSummary>) -> Option<Delta> {
        match (a, b) {
            (None, None) => None,
            (Some(_), None) => Some(Delta::OnlyA),
            (None, Some(_)) => Some(Delta::OnlyB),
            (Some(a), Some(b)) => Some(match (a.latest.is_failure(), b.latest.is_failure()) {
                (false, true) => Delta::Regressed,
                (true, false) => Delta::Fixed,
                _ => Delta::Same,
            }),
        }
    }
}

fn summaries(snap: &Snapshot, branch: &str, from_night: Option<u32>) -> BTreeMap<String, VerdictSummary> {
    let filter = OutcomeFilter::default().branch(branch).nights(from_night, None);
    let mut out: BTreeMap<String, VerdictSummary> = BTreeMap::new();
    for r in snap.query(&filter) {
        if r.verdict == Verdict::Skipped {
            continue;
        }
        let night = snap.night_of(r);
        let s = out.entry(r.test_id.clone()).or_insert(VerdictSummary {
            runs: 0,
            failures: 0,
            latest: r.verdict,
            latest_night: night,
        });
        s.runs += 1;
        s.failures += usize::from(r.verdict.is_failure());
        // query order is chronological, so the last record seen is the latest
        s.latest = r.verdict;
        s.latest_night = night;
    }
    out
}

pub fn compare(snap: &Snapshot, branch_a: &str, branch_b: &str, from_night: Option<u32>) -> Result<CompareView, ApiError> {
    if branch_a == branch_b {
        return Err(ApiError::BadRequest("branch_a and branch_b must differ".into()));
    }
    let mut a = summaries(snap, branch_a, from_night);
    let mut b = summaries(snap, branch_b, from_night);
    let tests: BTreeSet<String> = a.keys().chain(b.keys()).cloned().collect();
    let comparisons = tests
        .into_iter()
        .map(|t| {
            let sa = a.remove(&t);
            let sb = b.remove(&t);
            let delta = Delta::classify(sa.as_ref(), sb.as_ref()).expect("test present on a side");
            BranchComparison {
                test_id: t,
                a: sa,
                b: sb,
                delta,
            }
        })
        .collect();
    Ok(CompareView {
        branch_a: branch_a.to_string(),
        branch_b: branch_b.to_string(),
        from_night,
        comparisons,
    })
}

// ---- analyze ----

pub const DEFAULT_TOP_FAILING: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailingTest {
    pub test_id: String,
    pub failures: usize,
    /// Non-skipped runs.
    pub runs: usize,
    pub fail_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeView {
    pub branch: Option<String>,
    pub tau: f64,
    pub min_runs: usize,
    pub reports: Vec<IntermittenceReport>,
    pub top_failing: Vec<FailingTest>,
}

pub fn analyze(snap: &Snapshot, params: &RankParams, top: usize) -> AnalyzeView {
    let reports = rank(snap, params);
    let mut filter = OutcomeFilter::default().nights(params.from_night, params.to_night);
    filter.branch = params.branch.clone();
    let mut tally: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in snap.query(&filter) {
        if r.verdict == Verdict::Skipped {
            continue;
        }
        let e = tally.entry(r.test_id.as_str()).or_default();
        e.1 += 1;
        e.0 += usize::from(r.verdict.is_failure());
    }
    let mut top_failing: Vec<FailingTest> = tally
        .into_iter()
        .filter(|&(_, (f, _))| f > 0)
        .map(|(t, (failures, runs))| FailingTest {
            test_id: t.to_string(),
            failures,
            runs,
            fail_rate: failures as f64 / runs as f64,
        })
        .collect();
    top_failing.sort_by(|x, y| y.failures.cmp(&x.failures).then_with(|| x.test_id.cmp(&y.test_id)));
    top_failing.truncate(top);
    AnalyzeView {
        branch: params.branch.clone(),
        tau: params.thresholds.tau(),
        min_runs: params.thresholds.min_runs(),
        reports,
        top_failing,
    }
}
