use std::io::{self, Write};

use clap::ValueEnum;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// One JSON record per line.
    Ndjson,
    /// Aligned columns for reading in a terminal.
    Table,
}

/// Writes records as they come (ndjson) or buffers them into tables.
pub struct Emitter<'a> {
    format: Format,
    out: &'a mut dyn Write,
    rows: Vec<Value>,
}

impl<'a> Emitter<'a> {
    pub fn new(format: Format, out: &'a mut dyn Write) -> Self {
        Emitter {
            format,
            out,
            rows: Vec::new(),
        }
    }

    pub fn emit<T: Serialize>(&mut self, record: &T) -> io::Result<()> {
        let value = serde_json::to_value(record).map_err(io::Error::other)?;
        match self.format {
            Format::Ndjson => {
                serde_json::to_writer(&mut *self.out, &value).map_err(io::Error::other)?;
                self.out.write_all(b"\n")?;
                self.out.flush()
            }
            Format::Table => {
                self.rows.push(value);
                Ok(())
            }
        }
    }

    pub fn finish(self) -> io::Result<()> {
        if self.format == Format::Table {
            write_tables(self.out, &self.rows)?;
        }
        self.out.flush()
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Null => "-".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Consecutive records with the same keys share one table.
fn write_tables(out: &mut dyn Write, rows: &[Value]) -> io::Result<()> {
    let keys = |v: &Value| -> Vec<String> {
        match v {
            Value::Object(m) => m.keys().cloned().collect(),
            _ => vec!["value".into()],
        }
    };
    let mut start = 0;
    let mut first = true;
    while start < rows.len() {
        let header = keys(&rows[start]);
        let mut end = start + 1;
        while end < rows.len() && keys(&rows[end]) == header {
            end += 1;
        }
        let body: Vec<Vec<String>> = rows[start..end]
            .iter()
            .map(|r| match r {
                Value::Object(m) => header.iter().map(|k| cell(&m[k])).collect(),
                other => vec![cell(other)],
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|i| body.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0))
            .collect();
        if !first {
            writeln!(out)?;
        }
        first = false;
        for line in std::iter::once(&header).chain(body.iter()) {
            let text: Vec<String> = line
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            writeln!(out, "{}", text.join("  ").trim_end())?;
        }
        start = end;
    }
    Ok(())
}
