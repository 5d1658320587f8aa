//! Core of the nightlab toolkit: orchestration of nightly regression testing
//! for labs of networked embedded devices.
//!
//! * [`model`]: topologies, test requirements, verdicts, validation and cycle analysis.
//! * [`trdb`]: the append-only test results database.
//! * [`suitebuilder`]: multi-factor prioritization and time-budgeted suite assembly.
//! * [`mapper`]: assignment of test requirements onto lab topologies.
//! * [`intermittence`]: transition-based detection of intermittently failing tests.
//! * [`simulator`]: synthetic labs with ground truth.

#![forbid(unsafe_code)]

pub mod intermittence;
pub mod kv;
pub mod mapper;
pub mod model;
pub mod simulator;
pub mod suitebuilder;
pub mod trdb;
