//! Naive full-scan versions of the aggregated views, used as test oracles.
//! Nothing here touches the snapshot's indexes or `OutcomeFilter::matches`.

use std::collections::BTreeMap;

use nightlab_core::model::Verdict;
use nightlab_core::trdb::{OutcomeFilter, OutcomeRecord, Snapshot};

use crate::views::{Axis, ColumnKey};

fn nights(snap: &Snapshot) -> BTreeMap<&str, u32> {
    snap.sessions().map(|s| (s.session_id.as_str(), s.night_index)).collect()
}

pub fn matches(f: &OutcomeFilter, r: &OutcomeRecord, night: u32) -> bool {
    if let Some(b) = &f.branch {
        if *b != r.branch {
            return false;
        }
    }
    if let Some(s) = &f.system_id {
        if *s != r.system_id {
            return false;
        }
    }
    if let Some(t) = &f.test_id {
        if *t != r.test_id {
            return false;
        }
    }
    if let Some(s) = &f.session_id {
        if *s != r.session_id {
            return false;
        }
    }
    if let Some(vs) = &f.verdicts {
        if !vs.iter().any(|v| *v == r.verdict) {
            return false;
        }
    }
    if f.started_from.is_some_and(|t| r.started_at < t) || f.started_to.is_some_and(|t| r.started_at > t) {
        return false;
    }
    !(f.from_night.is_some_and(|n| night < n) || f.to_night.is_some_and(|n| night > n))
}

/// Matching records with their nights, in chronological order.
pub fn scan<'a>(snap: &'a Snapshot, f: &OutcomeFilter) -> Vec<(u32, &'a OutcomeRecord)> {
    let nights = nights(snap);
    let mut out: Vec<(u32, &OutcomeRecord)> = snap
        .outcomes()
        .iter()
        .map(|r| (nights[r.session_id.as_str()], r))
        .filter(|(n, r)| matches(f, r, *n))
        .collect();
    out.sort_by(|(_, a), (_, b)| {
        a.started_at
            .cmp(&b.started_at)
            .then(a.test_id.cmp(&b.test_id))
            .then(a.system_id.cmp(&b.system_id))
            .then(a.session_id.cmp(&b.session_id))
    });
    out
}

/// test → chronological (session, verdict, duration).
pub fn grid(snap: &Snapshot, f: &OutcomeFilter) -> BTreeMap<String, Vec<(String, Verdict, f64)>> {
    let mut out: BTreeMap<String, Vec<(String, Verdict, f64)>> = BTreeMap::new();
    for (_, r) in scan(snap, f) {
        out.entry(r.test_id.clone())
            .or_default()
            .push((r.session_id.clone(), r.verdict, r.duration_s));
    }
    out
}

/// (test, column) → (failures, non-skipped runs), zero-run cells absent.
pub fn heatmap(snap: &Snapshot, f: &OutcomeFilter, axis: Axis) -> BTreeMap<(String, ColumnKey), (usize, usize)> {
    let mut out: BTreeMap<(String, ColumnKey), (usize, usize)> = BTreeMap::new();
    for (n, r) in scan(snap, f) {
        if r.verdict == Verdict::Skipped {
            continue;
        }
        let col = match axis {
            Axis::System => ColumnKey::System(r.system_id.clone()),
            Axis::Night => ColumnKey::Night(n),
        };
        let e = out.entry((r.test_id.clone(), col)).or_insert((0, 0));
        if matches!(r.verdict, Verdict::Fail | Verdict::Error) {
            e.0 += 1;
        }
        e.1 += 1;
    }
    out
}

/// Chronological (night, value, session, test).
pub fn measurements(snap: &Snapshot, f: &OutcomeFilter, metric: &str) -> Vec<(u32, f64, String, String)> {
    scan(snap, f)
        .into_iter()
        .filter_map(|(n, r)| r.measurements.get(metric).map(|v| (n, *v, r.session_id.clone(), r.test_id.clone())))
        .collect()
}

/// [pass, fail, error, skipped] for one session.
pub fn session_counts(snap: &Snapshot, session_id: &str) -> [usize; 4] {
    let mut c = [0; 4];
    for r in snap.outcomes().iter().filter(|r| r.session_id == session_id) {
        c[Verdict::ALL.iter().position(|v| *v == r.verdict).unwrap()] += 1;
    }
    c
}

/// Latest non-skipped verdict and night per test on one branch.
pub fn latest(snap: &Snapshot, branch: &str, from_night: Option<u32>) -> BTreeMap<String, (Verdict, u32)> {
    let nights = nights(snap);
    let mut out = BTreeMap::new();
    for r in snap.outcomes() {
        let n = nights[r.session_id.as_str()];
        if r.branch != branch || r.verdict == Verdict::Skipped || from_night.is_some_and(|f| n < f) {
            continue;
        }
        let key = (r.started_at, r.test_id.clone(), r.system_id.clone(), r.session_id.clone());
        let slot = out.entry(r.test_id.clone()).or_insert((key.clone(), r.verdict, n));
        if key >= slot.0 {
            *slot = (key, r.verdict, n);
        }
    }
    out.into_iter().map(|(t, (_, v, n))| (t, (v, n))).collect()
}

/// Delta class name per test, from the two latest-verdict maps.
pub fn compare(snap: &Snapshot, a: &str, b: &str, from_night: Option<u32>) -> BTreeMap<String, &'static str> {
    let la = latest(snap, a, from_night);
    let lb = latest(snap, b, from_night);
    let failing = |v: Verdict| v == Verdict::Fail || v == Verdict::Error;
    let mut out = BTreeMap::new();
    for t in la.keys().chain(lb.keys()) {
        let class = match (la.get(t), lb.get(t)) {
            (Some(_), None) => "only_a",
            (None, Some(_)) => "only_b",
            (Some((va, _)), Some((vb, _))) => {
                if !failing(*va) && failing(*vb) {
                    "regressed"
                } else if failing(*va) && !failing(*vb) {
                    "fixed"
                } else {
                    "same"
                }
            }
            (None, None) => unreachable!(),
        };
        out.insert(t.clone(), class);
    }
    out
}
