//! The `nightlab` command line.
//!
//! Exit status: 0 success, 1 negative answer (unsatisfiable, no data),
//! 2 usage or input error, 3 internal error, 4 mapper search budget exceeded.

#![forbid(unsafe_code)]

mod output;

use std::collections::BTreeSet;
use std::ffi::OsString;
use std::fmt;
use std::io::{self, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use nightlab_core::intermittence::{rank, RankParams, Thresholds};
use nightlab_core::mapper::{
    candidate_sets, dut_coverage, map_once_with, map_with_coverage_with, CoverageState, MapError, MapOutcome,
    SearchOptions, DEFAULT_EXPANSION_CAP,
};
use nightlab_core::model::{read_requirements, read_systems, ModelIoError, RequirementGraph, TestSystemGraph};
use nightlab_core::simulator::{generate_lab, run_nights, write_lab_files, LabConfig, SimError};
use nightlab_core::suitebuilder::{build_suite, score, ScoringContext, SuiteConfig, SuiteError};
use nightlab_core::trdb::{parse_store_lines, Snapshot, Trdb, TrdbError};
use nightlab_explore::StoreHandle;
use serde_json::json;

pub use output::Format;

/// Environment variable naming the default store directory.
pub const STORE_ENV: &str = "NIGHTLAB_STORE";

/// Process environment the CLI depends on.
#[derive(Debug, Clone, Default)]
pub struct Env {
    pub store: Option<PathBuf>,
}

impl Env {
    pub fn from_process() -> Self {
        Env {
            store: std::env::var_os(STORE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "nightlab", version, about = "Nightly regression testing for networked device labs")]
struct Cli {
    /// Output format for records on stdout.
    #[arg(long, global = true, value_enum, default_value_t = Format::Ndjson)]
    format: Format,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ErrorVerdicts {
    Fail,
    Ignore,
}

#[derive(Debug, Subcommand)]
enum Verb {
    /// Append sessions, outcomes and usage from NDJSON files: ingest [STORE] FILE...
    Ingest {
        #[arg(value_name = "STORE|FILE", required = true)]
        paths: Vec<PathBuf>,
    },
    /// Plan tonight's suite within a time budget.
    BuildSuite {
        store: Option<PathBuf>,
        #[arg(long, allow_negative_numbers = true)]
        budget_s: f64,
        /// Prioritizer weights and parameters (key = value file).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Requirement graphs of the candidate tests; defaults to every test in the store.
        #[arg(long)]
        tests: Option<PathBuf>,
        /// Most recent completed night; defaults to the latest night in the store.
        #[arg(long)]
        night: Option<u32>,
        #[arg(long)]
        branch: Option<String>,
        #[arg(long)]
        system: Option<String>,
    },
    /// Map test requirements onto a test system.
    Map {
        system_file: PathBuf,
        test_file: PathBuf,
        /// Prefer DUTs used least often according to this store.
        #[arg(long)]
        coverage: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only this system from the system file.
        #[arg(long)]
        system: Option<String>,
        /// Only this test from the test file.
        #[arg(long)]
        test: Option<String>,
        #[arg(long, default_value_t = DEFAULT_EXPANSION_CAP)]
        expansion_cap: u64,
    },
    /// DUT coverage per test and system: coverage [STORE] SYSTEM_FILE TEST_FILE
    Coverage {
        #[arg(value_name = "PATH", num_args = 2..=3, required = true)]
        paths: Vec<PathBuf>,
        #[arg(long)]
        system: Option<String>,
    },
    /// Rank tests by intermittence score.
    Intermittence {
        store: Option<PathBuf>,
        #[arg(long, default_value_t = Thresholds::default().tau())]
        tau: f64,
        #[arg(long, default_value_t = Thresholds::default().min_runs())]
        min_runs: usize,
        #[arg(long)]
        branch: Option<String>,
        #[arg(long)]
        from_night: Option<u32>,
        #[arg(long)]
        to_night: Option<u32>,
        /// Whether error verdicts count as failures.
        #[arg(long, value_enum, default_value_t = ErrorVerdicts::Fail)]
        errors: ErrorVerdicts,
    },
    /// Generate a synthetic lab and its history: simulate CONFIG [STORE]
    Simulate {
        #[arg(value_name = "PATH", num_args = 1..=2, required = true)]
        paths: Vec<PathBuf>,
    },
    /// Serve the read-only exploration API.
    Serve {
        store: Option<PathBuf>,
        #[arg(long)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        /// Static files for the browser UI.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Negative(String),
    Usage(String),
    Internal(anyhow::Error),
    Budget(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Negative(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Internal(_) => 3,
            Failure::Budget(_) => 4,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Negative(m) | Failure::Usage(m) | Failure::Budget(m) => f.write_str(m),
            Failure::Internal(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Internal(e.into())
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Internal(e)
    }
}

fn trdb_failure(e: TrdbError) -> Failure {
    match e {
        TrdbError::DuplicateKey { .. }
        | TrdbError::UnknownSession(_)
        | TrdbError::UnknownTest(_)
        | TrdbError::InvalidRecord(_)
        | TrdbError::Corrupt { .. } => Failure::Usage(e.to_string()),
        TrdbError::Io { ref source, .. } if source.kind() == io::ErrorKind::NotFound => Failure::Usage(e.to_string()),
        other => Failure::Internal(other.into()),
    }
}

fn model_failure(path: &Path, e: ModelIoError) -> Failure {
    Failure::Usage(format!("{}: {e}", path.display()))
}

fn map_failure(e: MapError) -> Failure {
    match e {
        MapError::SearchBudgetExceeded { .. } => Failure::Budget(e.to_string()),
        _ => Failure::Usage(e.to_string()),
    }
}

type Outcome = Result<(), Failure>;

/// Runs one invocation and returns its exit status.
pub fn run<I, T>(args: I, env: &Env, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { out.write_all(text.as_bytes()) } else { err.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = dispatch(cli, env, out, err);
    let _ = out.flush();
    match result {
        Ok(()) => 0,
        Err(f) => {
            let _ = writeln!(err, "nightlab: {f}");
            f.code()
        }
    }
}

fn dispatch(cli: Cli, env: &Env, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    let format = cli.format;
    match cli.verb {
        Verb::Ingest { paths } => ingest(paths, env, format, out),
        Verb::BuildSuite {
            store,
            budget_s,
            config,
            tests,
            night,
            branch,
            system,
        } => {
            let store = store_arg(store, env)?;
            let args = SuiteArgs {
                budget_s,
                config,
                tests,
                night,
                branch,
                system,
            };
            build_suite_verb(&store, args, format, out)
        }
        Verb::Map {
            system_file,
            test_file,
            coverage,
            seed,
            system,
            test,
            expansion_cap,
        } => {
            let args = MapArgs {
                coverage,
                seed,
                system,
                test,
                options: SearchOptions { expansion_cap },
            };
            map_verb(&system_file, &test_file, args, format, out, err)
        }
        Verb::Coverage { paths, system } => {
            let (store, rest) = split_store(paths, 2, env)?;
            coverage_verb(&store, &rest[0], &rest[1], system.as_deref(), format, out)
        }
        Verb::Intermittence {
            store,
            tau,
            min_runs,
            branch,
            from_night,
            to_night,
            errors,
        } => {
            let store = store_arg(store, env)?;
            let thresholds = Thresholds::new(tau, min_runs).map_err(|e| Failure::Usage(e.to_string()))?;
            let params = RankParams {
                thresholds,
                branch,
                from_night,
                to_night,
                error_as_fail: errors == ErrorVerdicts::Fail,
            };
            intermittence_verb(&store, &params, format, out)
        }
        Verb::Simulate { paths } => {
            let config = paths[0].clone();
            let (store, _) = split_store(paths.into_iter().skip(1).collect(), 0, env)?;
            simulate_verb(&config, &store, format, out)
        }
        Verb::Serve { store, port, host, ui } => {
            let store = store_arg(store, env)?;
            serve_verb(&store, SocketAddr::new(host, port), ui, out, err)
        }
    }
}

fn store_arg(store: Option<PathBuf>, env: &Env) -> Result<PathBuf, Failure> {
    store
        .or_else(|| env.store.clone())
        .ok_or_else(|| Failure::Usage(format!("no store given and {STORE_ENV} is not set")))
}

/// Splits `[STORE] REST...` where exactly `rest` trailing paths are required.
fn split_store(mut paths: Vec<PathBuf>, rest: usize, env: &Env) -> Result<(PathBuf, Vec<PathBuf>), Failure> {
    if paths.len() == rest + 1 {
        let store = paths.remove(0);
        Ok((store, paths))
    } else if paths.len() == rest {
        Ok((store_arg(None, env)?, paths))
    } else {
        Err(Failure::Usage(format!("expected {} or {} paths, got {}", rest, rest + 1, paths.len())))
    }
}

fn open_read(store: &Path) -> Result<Snapshot, Failure> {
    Trdb::open_read_only(store).map(Trdb::into_snapshot).map_err(trdb_failure)
}

fn ingest(mut paths: Vec<PathBuf>, env: &Env, format: Format, out: &mut dyn Write) -> Outcome {
    // with a default store, a leading regular file is an input, not the store
    let store = match &env.store {
        Some(s) if paths[0].is_file() => s.clone(),
        _ => paths.remove(0),
    };
    if paths.is_empty() {
        return Err(Failure::Usage("ingest needs at least one input file".into()));
    }
    let mut batches = Vec::new();
    for path in &paths {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        let lines =
            parse_store_lines(&text).map_err(|(line, msg)| Failure::Usage(format!("{}:{line}: {msg}", path.display())))?;
        batches.push((path, lines));
    }
    let mut db = Trdb::open(&store).map_err(trdb_failure)?;
    let mut emit = output::Emitter::new(format, out);
    for (path, lines) in batches {
        let s = db
            .ingest(lines)
            .map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        emit.emit(&json!({
            "file": path.display().to_string(),
            "sessions": s.sessions,
            "outcomes": s.outcomes,
            "usage": s.usage,
        }))?;
    }
    emit.finish()?;
    Ok(())
}

struct SuiteArgs {
    budget_s: f64,
    config: Option<PathBuf>,
    tests: Option<PathBuf>,
    night: Option<u32>,
    branch: Option<String>,
    system: Option<String>,
}

fn build_suite_verb(store: &Path, args: SuiteArgs, format: Format, out: &mut dyn Write) -> Outcome {
    if !(args.budget_s.is_finite() && args.budget_s > 0.0) {
        return Err(Failure::Usage(SuiteError::InvalidBudget(args.budget_s).to_string()));
    }
    let config = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
            SuiteConfig::from_kv(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?
        }
        None => SuiteConfig::default(),
    };
    let reqs = match &args.tests {
        Some(path) => read_requirements(path).map_err(|e| model_failure(path, e))?,
        None => Vec::new(),
    };
    let snap = open_read(store)?;
    let candidates: Vec<String> = if args.tests.is_some() {
        reqs.iter().map(|r| r.test_id.clone()).collect()
    } else {
        snap.test_ids().into_iter().map(str::to_string).collect()
    };
    if candidates.is_empty() {
        return Err(Failure::Negative("no candidate tests: the store is empty and no --tests file was given".into()));
    }
    let now = args
        .night
        .or_else(|| snap.sessions().map(|s| s.night_index).max())
        .unwrap_or(0);
    let mut ctx = ScoringContext::new(&snap, &config, now).with_requirements(&reqs);
    if let Some(b) = &args.branch {
        ctx = ctx.branch(b.clone());
    }
    if let Some(s) = &args.system {
        ctx = ctx.system(s.clone());
    }
    let plan = build_suite(&candidates, args.budget_s, &ctx).map_err(|e| Failure::Usage(e.to_string()))?;
    let mut emit = output::Emitter::new(format, out);
    for (i, e) in plan.entries.iter().enumerate() {
        let breakdown = score(&e.test_id, &ctx).map_err(|e| Failure::Internal(e.into()))?;
        emit.emit(&json!({
            "type": "entry",
            "position": i + 1,
            "test_id": e.test_id,
            "priority": e.priority,
            "est_duration_s": e.est_duration_s,
            "cumulative_s": e.cumulative_s,
            "components": breakdown.components,
        }))?;
    }
    for x in &plan.excluded {
        emit.emit(&json!({ "type": "excluded", "test_id": x.test_id, "reason": x.reason }))?;
    }
    emit.emit(&json!({
        "type": "summary",
        "budget_s": plan.budget_s,
        "duration_s": plan.duration_s(),
        "planned": plan.entries.len(),
        "excluded": plan.excluded.len(),
        "now_night": now,
    }))?;
    emit.finish()?;
    Ok(())
}

struct MapArgs {
    coverage: Option<PathBuf>,
    seed: u64,
    system: Option<String>,
    test: Option<String>,
    options: SearchOptions,
}

fn load_graphs(
    system_file: &Path,
    test_file: &Path,
    system: Option<&str>,
    test: Option<&str>,
) -> Result<(Vec<TestSystemGraph>, Vec<RequirementGraph>), Failure> {
    let mut systems = read_systems(system_file).map_err(|e| model_failure(system_file, e))?;
    let mut tests = read_requirements(test_file).map_err(|e| model_failure(test_file, e))?;
    if let Some(id) = system {
        systems.retain(|s| s.system_id == id);
        if systems.is_empty() {
            return Err(Failure::Usage(format!("system `{id}` is not in {}", system_file.display())));
        }
    }
    if let Some(id) = test {
        tests.retain(|t| t.test_id == id);
        if tests.is_empty() {
            return Err(Failure::Usage(format!("test `{id}` is not in {}", test_file.display())));
        }
    }
    Ok((systems, tests))
}

fn map_verb(
    system_file: &Path,
    test_file: &Path,
    args: MapArgs,
    format: Format,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> Outcome {
    let (systems, tests) = load_graphs(system_file, test_file, args.system.as_deref(), args.test.as_deref())?;
    let snap = args.coverage.as_deref().map(open_read).transpose()?;
    let mut emit = output::Emitter::new(format, out);
    let mut unsatisfied = Vec::new();
    let mut over_budget = Vec::new();
    for req in &tests {
        let mut reasons = Vec::new();
        let mut mapped = None;
        for sys in &systems {
            let result = match &snap {
                Some(s) => {
                    let cov = CoverageState::from_snapshot(s, &sys.system_id);
                    map_with_coverage_with(req, sys, &cov, args.seed, args.options)
                }
                None => map_once_with(req, sys, args.seed, args.options),
            };
            match result {
                Ok(MapOutcome::Mapped(m)) => {
                    mapped = Some(m);
                    break;
                }
                Ok(MapOutcome::Unsatisfiable(why)) => reasons.push(format!("{}: {why}", sys.system_id)),
                Err(e @ MapError::SearchBudgetExceeded { .. }) => {
                    reasons.push(format!("{}: {e}", sys.system_id));
                    over_budget.push(req.test_id.clone());
                }
                Err(e) => return Err(map_failure(e)),
            }
        }
        match mapped {
            Some(m) => emit.emit(&m)?,
            None => {
                writeln!(err, "{}: unsatisfiable ({})", req.test_id, reasons.join("; "))?;
                unsatisfied.push(req.test_id.clone());
            }
        }
    }
    emit.finish()?;
    if !over_budget.is_empty() {
        Err(Failure::Budget(format!(
            "search budget exceeded for {}",
            over_budget.into_iter().collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>().join(", ")
        )))
    } else if !unsatisfied.is_empty() {
        Err(Failure::Negative(format!("no mapping for {}", unsatisfied.join(", "))))
    } else {
        Ok(())
    }
}

fn coverage_verb(
    store: &Path,
    system_file: &Path,
    test_file: &Path,
    system: Option<&str>,
    format: Format,
    out: &mut dyn Write,
) -> Outcome {
    let (systems, tests) = load_graphs(system_file, test_file, system, None)?;
    let snap = open_read(store)?;
    let mut emit = output::Emitter::new(format, out);
    for sys in &systems {
        let cov = CoverageState::from_snapshot(&snap, &sys.system_id);
        for req in &tests {
            let eligible: BTreeSet<String> = candidate_sets(req, sys).into_values().flatten().collect();
            let used = eligible.iter().filter(|d| cov.count(&req.test_id, d) > 0).count();
            emit.emit(&json!({
                "test_id": req.test_id,
                "system_id": sys.system_id,
                "coverage": dut_coverage(req, sys, &cov),
                "used_duts": used,
                "eligible_duts": eligible.len(),
            }))?;
        }
    }
    emit.finish()?;
    Ok(())
}

fn intermittence_verb(store: &Path, params: &RankParams, format: Format, out: &mut dyn Write) -> Outcome {
    let snap = open_read(store)?;
    let reports = rank(&snap, params);
    if reports.is_empty() {
        return Err(Failure::Negative("no outcomes match".into()));
    }
    let mut emit = output::Emitter::new(format, out);
    for r in &reports {
        emit.emit(r)?;
    }
    emit.finish()?;
    Ok(())
}

fn simulate_verb(config: &Path, store: &Path, format: Format, out: &mut dyn Write) -> Outcome {
    let text = std::fs::read_to_string(config).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
    let cfg = LabConfig::from_kv(&text).map_err(|e| Failure::Usage(format!("{}: {e}", config.display())))?;
    let lab = generate_lab(&cfg).map_err(|e| match e {
        SimError::GenerationFailed { .. } => Failure::Negative(e.to_string()),
        other => Failure::Internal(other.into()),
    })?;
    let mut db = Trdb::open(store).map_err(trdb_failure)?;
    if !db.outcomes().is_empty() || db.sessions().next().is_some() {
        return Err(Failure::Usage(format!("store {} already holds results", store.display())));
    }
    let nights = run_nights(&lab, &cfg, &mut db).map_err(|e| match e {
        SimError::Trdb(t) => trdb_failure(t),
        other => Failure::Internal(other.into()),
    })?;
    let lab_dir = store.join("lab");
    write_lab_files(&lab, &lab_dir).context("writing lab files")?;
    let mut emit = output::Emitter::new(format, out);
    emit.emit(&json!({
        "nights": nights,
        "outcomes": db.outcomes().len(),
        "sessions": db.sessions().count(),
        "usage": db.usage().len(),
        "systems": lab.systems.len(),
        "tests": lab.tests.len(),
        "lab_dir": lab_dir.display().to_string(),
    }))?;
    emit.finish()?;
    Ok(())
}

fn serve_verb(store: &Path, addr: SocketAddr, ui: Option<PathBuf>, out: &mut dyn Write, err: &mut dyn Write) -> Outcome {
    if !store.is_dir() {
        return Err(Failure::Usage(format!("store {} does not exist", store.display())));
    }
    if let Some(dir) = &ui {
        if !dir.is_dir() {
            return Err(Failure::Usage(format!("ui directory {} does not exist", dir.display())));
        }
    }
    let handle = Arc::new(StoreHandle::new(store));
    if let Err(e) = handle.snapshot() {
        writeln!(err, "warning: {e}; requests will get 503 until the store is readable")?;
    }
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        let local = listener.local_addr()?;
        writeln!(out, "{}", json!({ "listening": format!("http://{local}") }))?;
        out.flush()?;
        nightlab_explore::serve(listener, handle, ui).await.context("serving")?;
        Ok::<(), Failure>(())
    })
}
