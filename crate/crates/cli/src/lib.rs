//! The `pidssl` command line: a staged pipeline whose artifacts are tied
//! together by content-hashed manifests.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/cli.md")]
pub struct CliChapter;

#[cfg(doctest)]
#[doc = include_str!("../../../book/src/file-formats.md")]
pub struct FileFormats;
