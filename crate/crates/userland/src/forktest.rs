//! Exercises fork: state isolation, both return values, and reaping.
//!
//! Output is `child 0` then `parent <pid>`. Exit 0 when every check holds,
//! 1 on a violation, 2 when fork is unavailable.

use sandboxd_core::abi::{wexitstatus, wifexited};
use sandboxd_core::guest::Guest;
use sandboxd_core::Errno;

const COUNTER: u64 = 41;
const RESUME_AFTER_FORK: u64 = 1;

fn encode(counter: u64) -> Vec<u8> {
    counter.to_le_bytes().to_vec()
}

fn decode(heap: &[u8]) -> Option<u64> {
    heap.try_into().ok().map(u64::from_le_bytes)
}

fn fail(g: &mut Guest, msg: &str) -> i32 {
    let _ = g.print_str(2, &format!("forktest: {msg}\n"));
    1
}

fn child(g: &mut Guest, heap: Vec<u8>, pc: u64) -> i32 {
    if pc != RESUME_AFTER_FORK {
        return fail(g, &format!("child resumed at {pc}"));
    }
    let Some(mut counter) = decode(&heap) else {
        return fail(g, "child heap has the wrong size");
    };
    if counter != COUNTER {
        return fail(g, &format!("child sees counter {counter}"));
    }
    counter += 1;
    let _ = g.print_str(1, "child 0\n");
    // Exit status carries the mutated state so the parent can check it.
    i32::from(counter != COUNTER + 1)
}

pub fn main(g: &mut Guest) -> i32 {
    match g.resume_from_fork::<Vec<u8>>() {
        Some(Ok((heap, pc))) => return child(g, heap, pc),
        Some(Err(_)) => return fail(g, "fork snapshot does not restore"),
        None => {}
    }
    let heap = encode(COUNTER);
    let pid = match g.fork_with(&heap, RESUME_AFTER_FORK) {
        Ok(p) => p,
        Err(Errno::ENOSYS) => {
            let _ = g.print_str(2, &format!("forktest: fork: {}\n", Errno::ENOSYS.message()));
            return 2;
        }
        Err(e) => return fail(g, &format!("fork: {}", e.message())),
    };
    if pid == 0 || pid == g.getpid() {
        return fail(g, &format!("parent got pid {pid}"));
    }
    let status = match g.waitpid(pid as i32) {
        Ok(s) => s,
        Err(e) => return fail(g, &format!("wait4: {}", e.message())),
    };
    let _ = g.print_str(1, &format!("parent {pid}\n"));
    if !wifexited(status) || wexitstatus(status) != 0 {
        return fail(g, &format!("child status {status:#x}"));
    }
    if decode(&heap) != Some(COUNTER) {
        return fail(g, "child mutation leaked into the parent");
    }
    match g.wait4(pid as i32, 0) {
        Err(Errno::ECHILD) => 0,
        other => fail(g, &format!("second wait4 gave {other:?}")),
    }
}
