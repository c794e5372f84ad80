//! The coreutils subset. Each tool documents its flags in `--help`.

pub mod files;
pub mod grep;
pub mod listing;
pub mod procs;
pub mod sort;
pub mod text;
