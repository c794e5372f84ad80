//! The guest shell against the host's dash, plus background-job reaping.
//!
//! Each case runs in a fresh kernel whose /data holds a copy of a fixture
//! directory, and in dash inside another copy of it. Stdout, exit status
//! and the files left behind must all match.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use sandboxd_core::kernel::{HostSpawn, KernelConfig, KernelHandle, Stdin};

use crate::support::{boot, quiesce, registry, sh, Captured, WAIT};

const DASH: &str = "/usr/bin/dash";

/// `file.txt` variants: the pipeline must behave on each.
const FRUIT: &[&str] = &[
    "apple\nbanana\ncherry\npineapple\ncrabapple pie\n",
    "banana\ncherry\n",
    "",
    "apple",
    "Apple\nAPPLE\napple\n\napple apple\n",
    "grapefruit\napple\r\nnot an apple\n\tapple tree\n",
];

const CASES: &[&str] = &[
    "false; echo $?; true; echo $?",
    "false | true; echo $?; true | false; echo $?",
    "nosuchcmd; echo $?",
    "nosuchcmd | cat; echo $?",
    "grep apple missing.txt; echo $?",
    "grep -q kiwi file.txt; echo $?",
    "sh -c 'exit 3'; echo $?",
    "cat < missing.txt; echo $?",
    "echo a && false || echo b $?",
    "false && echo no; echo $?",
    "x=5; y=\"a  b\"; echo ${x}$x \"$y\" $y '$x'",
    "echo hi > out.txt; echo there >> out.txt; cat out.txt; wc -l < out.txt",
    "echo to-err 1>&2 | wc -c",
    "grep -c apple file.txt > count.txt; echo $?; cat count.txt",
    "sort file.txt | head -n 2 | tail -n 1",
    "exit 4",
    "echo start; exit 6; echo unreachable",
    "echo |",
    "| echo",
    "echo a &&",
    "cd /nonexistent-dir; echo $?",
    "cd /; pwd; echo $?",
    "echo bg > bg.txt & wait; cat bg.txt; echo $?",
    "sh -c 'exit 5' & wait $!; echo $?",
    "sh -c 'exit 5' & wait; echo $?",
    "false & true; echo $?",
    "wait; echo $?",
];

fn fixture(dir: &Path, fruit: &str) -> Result<(), String> {
    fs::write(dir.join("file.txt"), fruit).map_err(|e| e.to_string())?;
    fs::write(dir.join("notes.txt"), "apple notes\n").map_err(|e| e.to_string())
}

fn host_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

fn guest_files(h: &KernelHandle) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let names = h.exec(|k| k.vfs().list_dir("/data")).map_err(|e| e.message().to_string())?;
    let mut out = BTreeMap::new();
    for (name, _, _) in names.into_iter().skip(2) {
        let data = h.read_file(&format!("/data/{name}")).map_err(|e| e.message().to_string())?;
        out.insert(name, data);
    }
    Ok(out)
}

fn dash(dir: &Path, cmd: &str) -> Result<Captured, String> {
    let o = Command::new(DASH)
        .args(["-c", cmd])
        .current_dir(dir)
        .env("LC_ALL", "C")
        .env("PATH", std::env::var("PATH").unwrap_or_default())
        .output()
        .map_err(|e| format!("dash: {e}"))?;
    Ok(Captured { status: o.status.code().unwrap_or(-1), stdout: o.stdout, stderr: o.stderr })
}

/// Runs `cmd` both ways on a fixture; returns the shared exit status.
fn compare(cmd: &str, fruit: &str) -> Result<i32, String> {
    let host_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let seed_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    fixture(host_dir.path(), fruit)?;
    fixture(seed_dir.path(), fruit)?;
    let theirs = dash(host_dir.path(), cmd)?;
    let h = boot(KernelConfig::new(registry(|_| {})).with_mount(seed_dir.path(), "/data"))?;
    let ours = sh(&h, &format!("cd /data\n{cmd}"))?;
    quiesce(&h)?;
    ensure!(
        ours.stdout == theirs.stdout,
        "`{cmd}` on {fruit:?}: stdout {:?}, dash {:?}",
        ours.out(),
        theirs.out()
    );
    ensure!(ours.status == theirs.status, "`{cmd}`: status {}, dash {}", ours.status, theirs.status);
    let (mine, want) = (guest_files(&h)?, host_files(host_dir.path()));
    ensure!(mine == want, "`{cmd}` on {fruit:?}: files {:?}, dash left {:?}", mine, want);
    h.shutdown();
    Ok(ours.status)
}

/// An interactive shell idle on its input must still reap a finished
/// background job, driven only by SIGCHLD.
fn idle_reaping() -> Result<(), String> {
    let h = boot(KernelConfig::new(registry(|_| {})))?;
    let out = Arc::new(Mutex::new(Vec::new()));
    let (tx, rx) = crossbeam_channel::bounded(1);
    let mut spec = HostSpawn::new("/bin/sh", &["sh", "-i"]);
    spec.env.insert("PATH".into(), "/usr/bin:/bin".into());
    spec.stdin = Stdin::Pipe;
    let o = out.clone();
    spec.stdout = Some(Box::new(move |b: &[u8]| o.lock().unwrap().extend_from_slice(b)));
    spec.on_exit = Box::new(move |_, code| {
        let _ = tx.send(code);
    });
    let spawned = h.spawn(spec).map_err(|e| e.message().to_string())?;
    let tok = spawned.stdin.ok_or("no stdin token")?;
    h.write_stdin(tok, b"sleep 1 &\necho started\n".to_vec());

    let deadline = Instant::now() + WAIT;
    while !String::from_utf8_lossy(&out.lock().unwrap()).contains("started\n") {
        ensure!(Instant::now() < deadline, "shell never ran the input");
        thread::sleep(Duration::from_millis(5));
    }
    // The job is still sleeping, so the shell is now blocked reading input.
    let shell = spawned.pid;
    let tasks = h.pids();
    ensure!(tasks.len() == 2, "expected the shell and one job, found {tasks:?}");
    let mut saw_exit = false;
    loop {
        let (zombies, live) = h.exec(|k| (k.zombies(), k.live_tasks()));
        saw_exit |= live == 1;
        if saw_exit && zombies == 0 && h.pids() == vec![shell] {
            break;
        }
        ensure!(Instant::now() < deadline, "job not reaped: {zombies} zombies, pids {:?}", h.pids());
        thread::sleep(Duration::from_millis(5));
    }
    ensure!(rx.try_recv().is_err(), "the shell exited instead of idling");
    h.close_stdin(tok);
    let code = rx.recv_timeout(WAIT).map_err(|_| "shell ignored end of input")?;
    ensure!(code == 0, "shell exited {code} at end of input");
    quiesce(&h)?;
    let stats = h.stats();
    ensure!(stats.exits == stats.reaped, "{} exits, {} reaped", stats.exits, stats.reaped);
    Ok(())
}

pub fn run() -> Result<String, String> {
    ensure!(Path::new(DASH).exists(), "{DASH} not installed");
    let pipeline = "cat file.txt | grep apple > apples.txt";
    for fruit in FRUIT {
        compare(pipeline, fruit)?;
    }
    let mut statuses = std::collections::BTreeSet::new();
    for cmd in CASES {
        statuses.insert(compare(cmd, FRUIT[0])?);
    }
    for want in [2, 4, 6] {
        ensure!(statuses.contains(&want), "no case exited {want}; the comparison lost coverage");
    }
    idle_reaping()?;
    Ok(format!(
        "pipeline matches dash on {} fixtures; {} status/expansion/job cases match; idle SIGCHLD reaping leaves no zombies",
        FRUIT.len(),
        CASES.len()
    ))
}
