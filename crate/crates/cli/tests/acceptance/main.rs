//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Each criterion returns a one-line summary on success or the first
//! violated expectation on failure. Panics count as failures. The process
//! exits nonzero if any criterion fails.

use std::panic;
use std::process::ExitCode;
use std::time::Instant;

/// Fails the enclosing criterion with a formatted message unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

mod bench;
mod differential;
mod fork;
mod http;
mod overlay;
mod pipes;
mod shell;
mod sockets;
mod support;

type Verdict = Result<String, String>;

const CRITERIA: &[(&str, fn() -> Verdict)] = &[
    ("syscall-paths", differential::run),
    ("fork", fork::run),
    ("pipes", pipes::run),
    ("sockets", sockets::run),
    ("overlay-fs", overlay::run),
    ("utilities", utilities::run),
    ("shell", shell::run),
    ("benchmark", bench::run),
    ("http-bridge", http::run),
];

fn panic_message(payload: Box<dyn std::any::Any + Send>) -> String {
    payload
        .downcast_ref::<String>()
        .cloned()
        .or_else(|| payload.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "panicked".into())
}

fn main() -> ExitCode {
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    // Guest threads unwind on teardown; keep their panics off the report.
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut ran = 0;
    for (name, run) in CRITERIA {
        if !only.is_empty() && !only.iter().any(|o| name.contains(o.as_str())) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let verdict = panic::catch_unwind(run).unwrap_or_else(|p| Err(format!("panic: {}", panic_message(p))));
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(summary) => println!("PASS {name:<14} {summary} [{secs:.1}s]"),
            Err(reason) => {
                failed += 1;
                println!("FAIL {name:<14} {reason} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {ran} criteria passed", ran - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
