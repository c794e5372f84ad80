//! `forktest` under both conventions.
//!
//! The program itself asserts heap isolation, the child's zero return,
//! single reaping and ECHILD on the second wait, exiting 1 on any
//! violation. The harness checks what is visible from outside: the
//! printed pids and the kernel's process table afterwards.

use sandboxd_core::guest::MODE_ENV;
use sandboxd_core::kernel::{KernelConfig, Stdin};

use crate::support::{boot, exec, quiesce, registry};

pub fn run_async() -> Result<String, String> {
    let h = boot(KernelConfig::new(registry(|_| {})))?;
    let c = exec(&h, "/usr/bin/forktest", &["forktest"], &[], Stdin::Null)?;
    ensure!(c.status == 0, "async forktest exited {}: {}", c.status, c.err());
    let out = c.out();
    let lines: Vec<&str> = out.lines().collect();
    ensure!(lines.len() == 2, "expected two lines, got {out:?}");
    ensure!(lines[0] == "child 0", "child line {:?}", lines[0]);
    let child: u32 = lines[1]
        .strip_prefix("parent ")
        .and_then(|p| p.parse().ok())
        .ok_or_else(|| format!("parent line {:?}", lines[1]))?;
    // forktest is pid 1, so its only child is pid 2.
    ensure!(child == 2, "parent saw child pid {child}, expected 2");
    quiesce(&h)?;
    let stats = h.stats();
    ensure!(stats.exits == stats.reaped, "{} exits but {} reaped", stats.exits, stats.reaped);
    ensure!(h.pids().is_empty(), "leftover tasks {:?}", h.pids());
    Ok(format!("child 0, parent {child}, {} exits all reaped", stats.exits))
}

pub fn run_sync() -> Result<String, String> {
    let h = boot(KernelConfig::new(registry(|_| {})))?;
    let c = exec(&h, "/usr/bin/forktest", &["forktest"], &[(MODE_ENV, "sync")], Stdin::Null)?;
    ensure!(c.status == 2, "sync forktest exited {}, expected 2", c.status);
    ensure!(c.err().contains("Function not implemented"), "stderr {:?}", c.err());
    ensure!(c.stdout.is_empty(), "sync forktest printed {:?}", c.out());
    quiesce(&h)?;
    ensure!(h.stats().spawned == 1, "a child was created under the sync convention");
    Ok("fork -> ENOSYS, exit 2".into())
}

pub fn run() -> Result<String, String> {
    let a = run_async()?;
    let s = run_sync()?;
    Ok(format!("async: {a}; sync: {s}"))
}
