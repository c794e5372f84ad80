//! Host front end for sandboxd: kernel flags, attached process runs and the
//! WebSocket terminal service with its frame protocol.

pub mod config;
pub mod frame;
pub mod runner;
pub mod serve;
pub mod session;

/// Exit status for command line usage errors.
pub const EX_USAGE: i32 = 64;
/// Exit status when the kernel cannot boot (bad mount or underlay).
pub const EX_OSERR: i32 = 71;
/// Exit status when the HTTP bridge finds no listener.
pub const EX_UNAVAILABLE: i32 = 69;
/// Exit status for a response that does not parse as HTTP.
pub const EX_PROTOCOL: i32 = 76;
