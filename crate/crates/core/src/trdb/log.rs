//! Append-only newline-delimited log files with batch commit markers.
//!
//! A batch is its record lines followed by one `commit` line. A reader only
//! surfaces records followed by a matching commit, so a crash mid-batch leaves
//! the whole batch invisible.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::{StoreLine, TrdbError};

pub(crate) const OUTCOMES_PREFIX: &str = "outcomes-";
pub(crate) const SESSIONS_FILE: &str = "sessions.ndjson";
pub(crate) const USAGE_FILE: &str = "usage.ndjson";

/// Committed content of one file.
#[derive(Debug)]
pub(crate) struct LoadedFile {
    pub lines: Vec<StoreLine>,
    /// Byte offset just past the last commit line.
    pub valid_len: u64,
    pub batches: u64,
}

impl LoadedFile {
    pub fn empty() -> Self {
        LoadedFile {
            lines: Vec::new(),
            valid_len: 0,
            batches: 0,
        }
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrdbError + '_ {
    move |source| {
        if source.kind() == io::ErrorKind::StorageFull {
            TrdbError::StorageFull
        } else {
            TrdbError::Io {
                path: path.display().to_string(),
                source,
            }
        }
    }
}

pub(crate) fn read_file(path: &Path) -> Result<LoadedFile, TrdbError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Ok(LoadedFile::empty())
        }
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut loaded = LoadedFile::empty();
    let mut pending = Vec::new();
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < bytes.len() {
        line_no += 1;
        let (line, next, terminated) = match bytes[offset..].iter().position(|&b| b == b'\n') {
            Some(i) => (&bytes[offset..offset + i], offset + i + 1, true),
            None => (&bytes[offset..], bytes.len(), false),
        };
        let parsed = std::str::from_utf8(line)
            .ok()
            .and_then(|s| serde_json::from_str::<StoreLine>(s).ok());
        match parsed {
            // only the unterminated final line may be torn
            None if !terminated => break,
            None => {
                return Err(TrdbError::Corrupt {
                    path: path.display().to_string(),
                    line: line_no,
                })
            }
            Some(_) if !terminated => break,
            Some(StoreLine::Commit { count, .. }) => {
                if count != pending.len() {
                    return Err(TrdbError::Corrupt {
                        path: path.display().to_string(),
                        line: line_no,
                    });
                }
                loaded.lines.append(&mut pending);
                loaded.valid_len = next as u64;
                loaded.batches += 1;
            }
            Some(record) => pending.push(record),
        }
        offset = next;
    }
    Ok(loaded)
}

/// Outcome segment files in segment order.
pub(crate) fn outcome_segments(dir: &Path) -> Result<Vec<(u32, PathBuf)>, TrdbError> {
    let mut segments = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => return Err(io_err(dir)(e)),
    };
    for entry in entries {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name();
        let Some(name) = name.to_str() else { continue };
        if let Some(n) = name
            .strip_prefix(OUTCOMES_PREFIX)
            .and_then(|rest| rest.strip_suffix(".ndjson"))
            .and_then(|n| n.parse::<u32>().ok())
        {
            segments.push((n, entry.path()));
        }
    }
    segments.sort();
    Ok(segments)
}

pub(crate) fn segment_path(dir: &Path, n: u32) -> PathBuf {
    dir.join(format!("{OUTCOMES_PREFIX}{n}.ndjson"))
}

/// Writer for one logical log; rotates segments when `segment_cap` is set.
#[derive(Debug)]
pub(crate) struct Appender {
    dir: PathBuf,
    fixed_name: Option<&'static str>,
    segment: u32,
    segment_records: usize,
    segment_cap: Option<usize>,
    next_batch: u64,
    sync: bool,
    file: File,
    path: PathBuf,
}

impl Appender {
    fn open_file(path: &Path, valid_len: u64) -> Result<File, TrdbError> {
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        // drop a torn tail before appending behind it
        if file.metadata().map_err(io_err(path))?.len() != valid_len {
            file.set_len(valid_len).map_err(io_err(path))?;
        }
        Ok(file)
    }

    pub fn fixed(dir: &Path, name: &'static str, loaded: &LoadedFile, sync: bool) -> Result<Self, TrdbError> {
        let path = dir.join(name);
        Ok(Appender {
            dir: dir.to_path_buf(),
            fixed_name: Some(name),
            segment: 0,
            segment_records: loaded.lines.len(),
            segment_cap: None,
            next_batch: loaded.batches + 1,
            sync,
            file: Self::open_file(&path, loaded.valid_len)?,
            path,
        })
    }

    pub fn segmented(
        dir: &Path,
        segment: u32,
        last: &LoadedFile,
        cap: usize,
        sync: bool,
    ) -> Result<Self, TrdbError> {
        let path = segment_path(dir, segment);
        Ok(Appender {
            dir: dir.to_path_buf(),
            fixed_name: None,
            segment,
            segment_records: last.lines.len(),
            segment_cap: Some(cap.max(1)),
            next_batch: last.batches + 1,
            sync,
            file: Self::open_file(&path, last.valid_len)?,
            path,
        })
    }

    fn rotate(&mut self) -> Result<(), TrdbError> {
        self.segment += 1;
        let path = match self.fixed_name {
            Some(name) => self.dir.join(name),
            None => segment_path(&self.dir, self.segment),
        };
        self.file = Self::open_file(&path, 0)?;
        self.path = path;
        self.segment_records = 0;
        self.next_batch = 1;
        Ok(())
    }

    /// Writes `records` plus a commit line, rolling the file back on failure.
    pub fn write_batch(&mut self, records: Vec<StoreLine>) -> Result<(), TrdbError> {
        if records.is_empty() {
            return Ok(());
        }
        if let Some(cap) = self.segment_cap {
            if self.segment_records > 0 && self.segment_records + records.len() > cap {
                self.rotate()?;
            }
        }
        let count = records.len();
        let mut buf = String::new();
        for rec in records.iter().chain(std::iter::once(&StoreLine::Commit {
            batch: self.next_batch,
            count,
        })) {
            buf.push_str(&serde_json::to_string(rec).expect("store lines serialize"));
            buf.push('\n');
        }
        let before = self.file.metadata().map_err(io_err(&self.path))?.len();
        let result = self
            .file
            .write_all(buf.as_bytes())
            .and_then(|_| self.file.flush())
            .and_then(|_| if self.sync { self.file.sync_data() } else { Ok(()) });
        if let Err(e) = result {
            let _ = self.file.set_len(before);
            return Err(io_err(&self.path)(e));
        }
        self.segment_records += count;
        self.next_batch += 1;
        Ok(())
    }
}
