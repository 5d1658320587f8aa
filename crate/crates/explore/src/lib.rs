//! Read-only HTTP views over a nightlab results store.
//!
//! Every endpoint is a thin wrapper around a pure function in [`views`], so
//! the same answers are available without a server.

#![forbid(unsafe_code)]

mod error;
mod server;
pub mod oracle;
pub mod views;

pub use error::ApiError;
pub use server::{router, serve, StoreHandle};
