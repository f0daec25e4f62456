//! File formats, experiment pipeline and command-line plumbing around
//! `noisemia-core`.

use std::path::PathBuf;

use thiserror::Error;

pub mod config;
pub mod container;
pub mod pipeline;
pub mod store;
pub mod tables;

/// Bad invocation or configuration; the CLI exits with status 1.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Failure while running a stage; the CLI exits with status 2.
#[derive(Debug, Error)]
#[error("{0}")]
pub struct RuntimeError(pub String);

#[derive(Debug, Error)]
#[error("missing input artifact {}", .0.display())]
pub struct MissingInput(pub PathBuf);

#[derive(Debug, Error)]
#[error("config digests differ between {} and {}", first.display(), second.display())]
pub struct DigestMismatch {
    pub first: PathBuf,
    pub second: PathBuf,
}

/// Machine-readable error category.
pub fn error_kind(e: &anyhow::Error) -> &'static str {
    if e.is::<UsageError>() {
        "usage"
    } else if e.is::<MissingInput>() {
        "missing_input"
    } else if e.is::<DigestMismatch>() {
        "digest_mismatch"
    } else if e.chain().any(|c| c.is::<container::FormatError>()) {
        "format"
    } else if e.chain().any(|c| c.is::<std::io::Error>()) {
        "io"
    } else {
        "runtime"
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    if e.is::<UsageError>() {
        1
    } else {
        2
    }
}
