//! Operator surface: run configuration, the subcommands behind the `cogail`
//! binary, and the real-time game service.

// `!(x > 0.0)` is deliberate throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;
pub mod service;

/// Errors the operator can fix by changing flags or files; exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);
