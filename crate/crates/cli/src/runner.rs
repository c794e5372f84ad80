//! Runs a guest process attached to the host's stdio.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::thread;

use crossbeam_channel::{bounded, select, Receiver};
use sandboxd_core::abi::Signal;
use sandboxd_core::kernel::{HostSpawn, KernelHandle, Pid, Stdin};
use sandboxd_core::Errno;

use crate::config::GUEST_PATH;

pub const NOT_FOUND: i32 = 127;
pub const CANNOT_EXECUTE: i32 = 126;

/// Where a host Ctrl-C goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterruptTarget {
    /// The process and all its descendants.
    Tree,
    /// Only the process; an interactive shell forwards it to its foreground job.
    Process,
}

/// Resolves a program name through the guest `PATH`; names with `/` are
/// used as given.
pub fn resolve(kernel: &KernelHandle, prog: &str) -> Option<String> {
    if prog.contains('/') {
        return kernel.stat(prog).is_ok().then(|| prog.to_owned());
    }
    GUEST_PATH.split(':').map(|dir| format!("{dir}/{prog}")).find(|p| kernel.stat(p).is_ok_and(|st| !st.is_dir()))
}

/// Starts `argv` with host stdin, stdout and stderr, and waits for it.
/// Each message on `interrupts` becomes a SIGINT. Returns the shell status.
pub fn run_attached(
    kernel: &KernelHandle,
    argv: &[String],
    env: BTreeMap<String, String>,
    interrupts: Receiver<()>,
    target: InterruptTarget,
) -> i32 {
    let Some(path) = resolve(kernel, &argv[0]) else {
        eprintln!("sandboxd: {}: not found", argv[0]);
        return NOT_FOUND;
    };
    let (done_tx, done) = bounded(1);
    let args: Vec<&str> = argv.iter().map(String::as_str).collect();
    let mut spec = HostSpawn::new(&path, &args);
    spec.env = env;
    spec.stdin = Stdin::Pipe;
    spec.stdout = Some(Box::new(|b: &[u8]| {
        let mut out = std::io::stdout().lock();
        let _ = out.write_all(b);
        let _ = out.flush();
    }));
    spec.stderr = Some(Box::new(|b: &[u8]| {
        let _ = std::io::stderr().write_all(b);
    }));
    spec.on_exit = Box::new(move |_, code| {
        let _ = done_tx.send(code);
    });
    let spawned = match kernel.spawn(spec) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("sandboxd: {path}: {}", e.message());
            return if e == Errno::ENOENT { NOT_FOUND } else { CANNOT_EXECUTE };
        }
    };
    if let Some(tok) = spawned.stdin {
        let k = kernel.clone();
        // Detached: a blocked host read must not hold up exit.
        thread::spawn(move || {
            let mut stdin = std::io::stdin();
            let mut buf = vec![0u8; 64 * 1024];
            loop {
                match stdin.read(&mut buf) {
                    Ok(0) | Err(_) => break,
                    Ok(n) => k.write_stdin(tok, buf[..n].to_vec()),
                }
            }
            k.close_stdin(tok);
        });
    }
    wait_forwarding(kernel, spawned.pid, &done, &interrupts, target)
}

fn wait_forwarding(kernel: &KernelHandle, pid: Pid, done: &Receiver<i32>, interrupts: &Receiver<()>, target: InterruptTarget) -> i32 {
    loop {
        select! {
            recv(done) -> code => return code.unwrap_or(1),
            recv(interrupts) -> msg => {
                if msg.is_err() {
                    return done.recv().unwrap_or(1);
                }
                let _ = match target {
                    InterruptTarget::Tree => kernel.kill_tree(pid, Signal::SIGINT),
                    InterruptTarget::Process => kernel.kill(pid, Signal::SIGINT),
                };
            }
        }
    }
}
