//! Line-delimited topology and requirement files.
//!
//! One JSON object per line. The first record must carry `"schema_version": 1`;
//! later records may repeat it. Unknown fields are rejected.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use super::{RequirementGraph, TestSystemGraph};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: first record must carry schema_version {SCHEMA_VERSION}")]
    MissingSchemaVersion { line: usize },
    #[error("line {line}: unsupported schema_version {found}")]
    UnsupportedSchema { line: usize, found: String },
    #[error("no records")]
    Empty,
}

pub fn parse_records<T: DeserializeOwned>(text: &str) -> Result<Vec<T>, ModelIoError> {
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let mut value: Value = serde_json::from_str(raw).map_err(|e| ModelIoError::Parse {
            line,
            message: e.to_string(),
        })?;
        let obj = value.as_object_mut().ok_or_else(|| ModelIoError::Parse {
            line,
            message: "expected a JSON object".into(),
        })?;
        match obj.remove("schema_version") {
            Some(v) if v.as_u64() == Some(SCHEMA_VERSION) => {}
            Some(v) => {
                return Err(ModelIoError::UnsupportedSchema {
                    line,
                    found: v.to_string(),
                })
            }
            None if out.is_empty() => return Err(ModelIoError::MissingSchemaVersion { line }),
            None => {}
        }
        out.push(serde_json::from_value(value).map_err(|e| ModelIoError::Parse {
            line,
            message: e.to_string(),
        })?);
    }
    if out.is_empty() {
        return Err(ModelIoError::Empty);
    }
    Ok(out)
}

pub fn parse_systems(text: &str) -> Result<Vec<TestSystemGraph>, ModelIoError> {
    parse_records(text)
}

pub fn parse_requirements(text: &str) -> Result<Vec<RequirementGraph>, ModelIoError> {
    parse_records(text)
}

fn read(path: &Path) -> Result<String, ModelIoError> {
    fs::read_to_string(path).map_err(|source| ModelIoError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_systems(path: &Path) -> Result<Vec<TestSystemGraph>, ModelIoError> {
    parse_systems(&read(path)?)
}

pub fn read_requirements(path: &Path) -> Result<Vec<RequirementGraph>, ModelIoError> {
    parse_requirements(&read(path)?)
}

/// Serializes records one per line, stamping the schema version on the first.
pub fn to_ndjson<T: Serialize>(records: &[T]) -> String {
    let mut out = String::new();
    for (i, record) in records.iter().enumerate() {
        let line = serde_json::to_string(record).expect("model types serialize");
        match line.strip_prefix('{') {
            // keys of a plain serde_json map are sorted, so stamp the version textually
            Some(rest) if i == 0 => {
                let sep = if rest.starts_with('}') { "" } else { "," };
                out.push_str(&format!("{{\"schema_version\":{SCHEMA_VERSION}{sep}{rest}"));
            }
            _ => out.push_str(&line),
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DutNode, Link, NodePredicate, RequiredLink, Role};

    fn sample() -> TestSystemGraph {
        TestSystemGraph {
            system_id: "lab1".into(),
            nodes: vec![
                DutNode {
                    dut_id: "a".into(),
                    model: "rfr-12".into(),
                    capabilities: ["firewall".to_string()].into(),
                    port_count: 2,
                },
                DutNode {
                    dut_id: "b".into(),
                    model: "rfr-12".into(),
                    capabilities: Default::default(),
                    port_count: 2,
                },
            ],
            edges: vec![Link::new("a", "b"), Link::tagged("a", "b", "fiber")],
        }
    }

    #[test]
    fn systems_round_trip() {
        let text = to_ndjson(&[sample(), sample()]);
        assert!(text.starts_with("{\"schema_version\":1,"));
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_systems(&text).unwrap(), vec![sample(), sample()]);
    }

    #[test]
    fn requirement_round_trip() {
        let req = RequirementGraph {
            test_id: "fw".into(),
            roles: vec![
                Role::new("fw", NodePredicate::requiring(["firewall"])),
                Role::any("inner"),
            ],
            links: vec![RequiredLink::tagged("fw", "inner", "fiber")],
            est_duration_s: 30.0,
        };
        let text = to_ndjson(std::slice::from_ref(&req));
        assert_eq!(parse_requirements(&text).unwrap(), vec![req]);
    }

    #[test]
    fn schema_version_mandatory_on_first_record() {
        let text = to_ndjson(&[sample()]).replace("\"schema_version\":1,", "");
        assert!(matches!(
            parse_systems(&text),
            Err(ModelIoError::MissingSchemaVersion { line: 1 })
        ));
        let text = to_ndjson(&[sample()]).replace("\"schema_version\":1", "\"schema_version\":2");
        assert!(matches!(
            parse_systems(&text),
            Err(ModelIoError::UnsupportedSchema { .. })
        ));
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = to_ndjson(&[sample()]).replace("\"system_id\"", "\"colour\":1,\"system_id\"");
        let err = parse_systems(&text).unwrap_err();
        assert!(err.to_string().contains("colour"), "{err}");
    }

    #[test]
    fn empty_input_rejected() {
        assert!(matches!(parse_systems("\n\n"), Err(ModelIoError::Empty)));
    }
}
