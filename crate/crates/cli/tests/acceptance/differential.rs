//! The sync and async conventions must agree on every trap.
//!
//! Each script runs once in a kernel whose probe uses the sync convention
//! and once in a fresh kernel whose probe uses the async one. Kernels are
//! deterministic for these scripts, so the per-call `(ret, errno, aux)`
//! triples and success payloads must match exactly. Timestamps taken from
//! the host clock are the only normalized field.

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sandboxd_core::abi::{
    F_OK, O_APPEND, O_CREAT, O_DIRECTORY, O_EXCL, O_RDONLY, O_RDWR, O_TRUNC, O_WRONLY, R_OK, SEEK_CUR, SEEK_END,
    SEEK_SET, SIG_DFL, SIG_IGN, SOCK_DGRAM, SOCK_STREAM, AF_INET, W_OK, WNOHANG, X_OK,
};
use sandboxd_core::guest::MODE_ENV;
use sandboxd_core::kernel::{KernelConfig, Stdin};
use sandboxd_core::wire::{pack_strvec, OutLen, StatRecord, Trap, Value, TRAP_TABLE};

use crate::support::{boot, exec, registry};

const BUDGET_SECS: f64 = 30.0;
const RANDOM_SCRIPTS: usize = 150;
const RANDOM_OPS: usize = 40;

#[derive(Clone, Debug)]
enum Arg {
    Int(i64),
    Str(String),
    StrVec(Vec<String>),
    Bytes(Vec<u8>),
    IntList(Vec<i64>),
    Out(i64),
    /// `ret` of an earlier call.
    Ret(usize),
    /// `aux` of an earlier call.
    Aux(usize),
    /// A one-entry spawn grant: child fd and the parent fd taken from an earlier call.
    Grant(i64, Box<Arg>),
}

fn s(p: &str) -> Arg {
    Arg::Str(p.into())
}

fn sv(items: &[&str]) -> Arg {
    Arg::StrVec(items.iter().map(|s| s.to_string()).collect())
}

#[derive(Clone, Debug)]
struct Call {
    trap: Trap,
    args: Vec<Arg>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
struct Record {
    trap: &'static str,
    ret: i64,
    errno: i32,
    aux: i64,
    payload: Option<Vec<u8>>,
}

#[derive(Default, Clone)]
struct Script {
    name: String,
    calls: Vec<Call>,
    exit: Option<i64>,
}

impl Script {
    fn new(name: &str) -> Self {
        Script { name: name.into(), ..Default::default() }
    }

    /// Appends a call; returns its index for `Arg::Ret`/`Arg::Aux`.
    fn call(&mut self, trap: Trap, args: Vec<Arg>) -> usize {
        self.calls.push(Call { trap, args });
        self.calls.len() - 1
    }
}

/// Wall-clock timestamps differ between runs; explicit ones do not.
fn normalize_stat(payload: &[u8]) -> Vec<u8> {
    let Some(mut st) = StatRecord::decode(payload) else { return payload.to_vec() };
    for t in [&mut st.atime_ns, &mut st.mtime_ns] {
        if *t > 1_000_000_000_000_000 {
            *t = -1;
        }
    }
    st.encode()
}

fn execute(g: &mut sandboxd_core::guest::Guest, calls: &[Call], records: &Mutex<Vec<Record>>) {
    fn value(a: &Arg, seen: &[Record]) -> Value {
        match a {
            Arg::Int(i) => Value::Int(*i),
            Arg::Str(s) => Value::Str(s.clone()),
            Arg::StrVec(v) => Value::Bytes(pack_strvec(v)),
            Arg::Bytes(b) => Value::Bytes(b.clone()),
            Arg::IntList(l) => Value::IntList(l.clone()),
            Arg::Out(cap) => Value::Int(*cap),
            Arg::Ret(i) => Value::Int(seen[*i].ret),
            Arg::Aux(i) => Value::Int(seen[*i].aux),
            Arg::Grant(child, parent) => match value(parent, seen) {
                Value::Int(p) => Value::IntList(vec![*child, p]),
                other => unreachable!("grant source {other:?}"),
            },
        }
    }
    let mut seen: Vec<Record> = Vec::new();
    for c in calls {
        let args = c.args.iter().map(|a| value(a, &seen)).collect();
        let r = g.call(c.trap, args);
        let payload = match (r.errno, c.trap.sig().out) {
            (0, OutLen::Fixed(_)) => r.payload.as_deref().map(normalize_stat),
            (0, OutLen::Ret) => r.payload.clone(),
            _ => None,
        };
        let rec = Record { trap: c.trap.name(), ret: r.ret, errno: r.errno, aux: r.aux, payload };
        records.lock().unwrap().push(rec.clone());
        seen.push(rec);
    }
}

/// Runs `script` under one convention; returns the call records and the exit status.
fn run_script(script: &Script, sync: bool) -> Result<(Vec<Record>, i32), String> {
    let records = Arc::new(Mutex::new(Vec::new()));
    let (calls, sink, exit) = (Arc::new(script.calls.clone()), records.clone(), script.exit);
    let reg = registry(move |reg| {
        reg.register("peer", peer);
        reg.register("probe", move |g| {
            execute(g, &calls, &sink);
            match exit {
                Some(code) => {
                    g.call(Trap::Exit, vec![Value::Int(code)]);
                    unreachable!("exit returned")
                }
                None => 0,
            }
        });
    });
    let h = boot(KernelConfig::new(reg))?;
    let env: &[(&str, &str)] = if sync { &[(MODE_ENV, "sync")] } else { &[] };
    let done = exec(&h, "/usr/bin/probe", &["probe"], env, Stdin::Null)?;
    h.shutdown();
    let recs = std::mem::take(&mut *records.lock().unwrap());
    Ok((recs, done.status))
}

fn file_scenario() -> Script {
    use Arg::*;
    let mut sc = Script::new("files");
    sc.call(Trap::Getpid, vec![]);
    sc.call(Trap::Getppid, vec![]);
    sc.call(Trap::Getcwd, vec![Out(256)]);
    sc.call(Trap::Getcwd, vec![Out(1)]);
    sc.call(Trap::Mkdir, vec![s("/tmp"), Int(0o755)]);
    sc.call(Trap::Chdir, vec![s("/tmp")]);
    sc.call(Trap::Getcwd, vec![Out(256)]);
    sc.call(Trap::Chdir, vec![s("/nonexistent")]);
    sc.call(Trap::Mkdir, vec![s("/d"), Int(0o755)]);
    sc.call(Trap::Mkdir, vec![s("/d"), Int(0o755)]);
    sc.call(Trap::Mkdir, vec![s("/x/y"), Int(0o755)]);
    let fd = sc.call(Trap::Open, vec![s("/d/f"), Int(O_CREAT | O_RDWR), Int(0o644)]);
    sc.call(Trap::Chdir, vec![s("/d/f")]);
    sc.call(Trap::Write, vec![Ret(fd), Bytes(b"hello world".to_vec())]);
    sc.call(Trap::Llseek, vec![Ret(fd), Int(0), Int(SEEK_SET)]);
    sc.call(Trap::Read, vec![Ret(fd), Out(5)]);
    sc.call(Trap::Llseek, vec![Ret(fd), Int(1), Int(SEEK_CUR)]);
    sc.call(Trap::Read, vec![Ret(fd), Out(64)]);
    sc.call(Trap::Read, vec![Ret(fd), Out(64)]);
    sc.call(Trap::Pread, vec![Ret(fd), Out(64), Int(6)]);
    sc.call(Trap::Pread, vec![Ret(fd), Out(64), Int(-1)]);
    sc.call(Trap::Pwrite, vec![Ret(fd), Bytes(b"HELLO".to_vec()), Int(0)]);
    sc.call(Trap::Pwrite, vec![Ret(fd), Bytes(b"!".to_vec()), Int(20)]);
    sc.call(Trap::Llseek, vec![Ret(fd), Int(0), Int(SEEK_END)]);
    sc.call(Trap::Llseek, vec![Ret(fd), Int(-100), Int(SEEK_SET)]);
    sc.call(Trap::Llseek, vec![Ret(fd), Int(0), Int(9)]);
    sc.call(Trap::Fstat, vec![Ret(fd), Out(40)]);
    sc.call(Trap::Stat, vec![s("/d/f"), Out(40)]);
    sc.call(Trap::Lstat, vec![s("/d"), Out(40)]);
    sc.call(Trap::Stat, vec![s("/d/missing"), Out(40)]);
    sc.call(Trap::Access, vec![s("/d/f"), Int(R_OK | W_OK)]);
    sc.call(Trap::Access, vec![s("/d/f"), Int(X_OK)]);
    sc.call(Trap::Access, vec![s("/usr/bin/cat"), Int(X_OK)]);
    sc.call(Trap::Access, vec![s("/missing"), Int(F_OK)]);
    sc.call(Trap::Readlink, vec![s("/d/f"), Out(64)]);
    sc.call(Trap::Readlink, vec![s("/missing"), Out(64)]);
    sc.call(Trap::Utimes, vec![s("/d/f"), Int(1000), Int(2000)]);
    sc.call(Trap::Utimes, vec![s("/missing"), Int(1), Int(2)]);
    sc.call(Trap::Stat, vec![s("/d/f"), Out(40)]);
    let g = sc.call(Trap::Open, vec![s("/d/g"), Int(O_CREAT | O_EXCL | O_WRONLY), Int(0o600)]);
    sc.call(Trap::Open, vec![s("/d/g"), Int(O_CREAT | O_EXCL | O_WRONLY), Int(0o600)]);
    sc.call(Trap::Write, vec![Ret(g), Bytes(vec![0xff; 300])]);
    sc.call(Trap::Read, vec![Ret(g), Out(8)]);
    let a = sc.call(Trap::Open, vec![s("/d/g"), Int(O_WRONLY | O_APPEND), Int(0)]);
    sc.call(Trap::Write, vec![Ret(a), Bytes(b"tail".to_vec())]);
    sc.call(Trap::Open, vec![s("/d/g"), Int(O_RDONLY | O_DIRECTORY), Int(0)]);
    let t = sc.call(Trap::Open, vec![s("/d/g"), Int(O_RDWR | O_TRUNC), Int(0)]);
    sc.call(Trap::Fstat, vec![Ret(t), Out(40)]);
    let dir = sc.call(Trap::Open, vec![s("/d"), Int(O_RDONLY), Int(0)]);
    sc.call(Trap::Getdents, vec![Ret(dir), Out(4096)]);
    sc.call(Trap::Getdents, vec![Ret(dir), Out(4096)]);
    sc.call(Trap::Getdents, vec![Ret(fd), Out(4096)]);
    let dir2 = sc.call(Trap::Open, vec![s("/d"), Int(O_RDONLY | O_DIRECTORY), Int(0)]);
    sc.call(Trap::Getdents, vec![Ret(dir2), Out(8)]);
    for _ in 0..5 {
        sc.call(Trap::Readdir, vec![Ret(dir2), Out(256)]);
    }
    sc.call(Trap::Fstat, vec![Ret(dir2), Out(40)]);
    sc.call(Trap::Read, vec![Ret(dir2), Out(16)]);
    sc.call(Trap::Open, vec![s("/d"), Int(O_WRONLY), Int(0)]);
    sc.call(Trap::Open, vec![s(""), Int(O_RDONLY), Int(0)]);
    sc.call(Trap::Open, vec![s("/d/f/sub"), Int(O_CREAT | O_WRONLY), Int(0o644)]);
    sc.call(Trap::Open, vec![s("rel"), Int(O_CREAT | O_WRONLY), Int(0o644)]);
    sc.call(Trap::Stat, vec![s("/tmp/rel"), Out(40)]);
    sc.call(Trap::Unlink, vec![s("/d")]);
    sc.call(Trap::Rmdir, vec![s("/d")]);
    sc.call(Trap::Rmdir, vec![s("/d/f")]);
    sc.call(Trap::Unlink, vec![s("/d/f")]);
    sc.call(Trap::Unlink, vec![s("/d/f")]);
    sc.call(Trap::Fstat, vec![Ret(fd), Out(40)]);
    sc.call(Trap::Pread, vec![Ret(fd), Out(64), Int(0)]);
    sc.call(Trap::Unlink, vec![s("/d/g")]);
    sc.call(Trap::Rmdir, vec![s("/d")]);
    sc.call(Trap::Rmdir, vec![s("/")]);
    sc.call(Trap::Close, vec![Ret(fd)]);
    sc.call(Trap::Close, vec![Ret(fd)]);
    sc.call(Trap::Read, vec![Int(99), Out(4)]);
    sc.call(Trap::Write, vec![Int(99), Bytes(b"x".to_vec())]);
    sc.call(Trap::Write, vec![Int(1), Bytes(b"to stdout\n".to_vec())]);
    sc.call(Trap::Read, vec![Int(0), Out(16)]);
    sc.call(Trap::Read, vec![Int(1), Out(16)]);
    sc.call(Trap::Getcwd, vec![Out(256)]);
    sc
}

fn pipe_scenario() -> Script {
    use Arg::*;
    let mut sc = Script::new("pipes");
    let p = sc.call(Trap::Pipe2, vec![Int(0)]);
    sc.call(Trap::Write, vec![Aux(p), Bytes(b"abc".to_vec())]);
    sc.call(Trap::Read, vec![Ret(p), Out(2)]);
    sc.call(Trap::Read, vec![Ret(p), Out(8)]);
    sc.call(Trap::Fstat, vec![Ret(p), Out(40)]);
    sc.call(Trap::Llseek, vec![Ret(p), Int(0), Int(SEEK_SET)]);
    sc.call(Trap::Pread, vec![Ret(p), Out(4), Int(0)]);
    sc.call(Trap::Pwrite, vec![Aux(p), Bytes(b"x".to_vec()), Int(0)]);
    sc.call(Trap::Write, vec![Ret(p), Bytes(b"x".to_vec())]);
    sc.call(Trap::Read, vec![Aux(p), Out(1)]);
    sc.call(Trap::Getdents, vec![Ret(p), Out(256)]);
    sc.call(Trap::Write, vec![Aux(p), Bytes(vec![7; 1000])]);
    sc.call(Trap::Close, vec![Aux(p)]);
    sc.call(Trap::Read, vec![Ret(p), Out(600)]);
    sc.call(Trap::Read, vec![Ret(p), Out(600)]);
    sc.call(Trap::Read, vec![Ret(p), Out(600)]);
    let q = sc.call(Trap::Pipe2, vec![Int(0)]);
    sc.call(Trap::Close, vec![Ret(q)]);
    sc.call(Trap::Write, vec![Aux(q), Bytes(b"lost".to_vec())]);
    sc.call(Trap::Pipe2, vec![Int(0o7777777)]);
    sc
}

fn process_scenario() -> Script {
    use Arg::*;
    let mut sc = Script::new("processes");
    let me = sc.call(Trap::Getpid, vec![]);
    let t = sc.call(Trap::Spawn, vec![s("/usr/bin/true"), sv(&["true"]), sv(&[]), IntList(vec![])]);
    sc.call(Trap::Wait4, vec![Ret(t), Int(0)]);
    sc.call(Trap::Wait4, vec![Int(-1), Int(WNOHANG)]);
    sc.call(Trap::Wait4, vec![Ret(t), Int(0)]);
    sc.call(Trap::Spawn, vec![s("/usr/bin/false"), sv(&["false"]), sv(&[]), IntList(vec![])]);
    sc.call(Trap::Wait4, vec![Int(-1), Int(0)]);
    sc.call(Trap::Spawn, vec![s("/nonexistent"), sv(&["x"]), sv(&[]), IntList(vec![])]);
    sc.call(Trap::Spawn, vec![s("/usr/bin"), sv(&["x"]), sv(&[]), IntList(vec![])]);
    sc.call(Trap::Spawn, vec![s("/usr/bin/true"), sv(&["true"]), sv(&[]), IntList(vec![1])]);
    sc.call(Trap::Spawn, vec![s("/usr/bin/true"), sv(&["true"]), sv(&[]), IntList(vec![0, 42])]);
    let out = sc.call(Trap::Pipe2, vec![Int(0)]);
    let echo = sc.call(
        Trap::Spawn,
        vec![s("/usr/bin/printenv"), sv(&["printenv", "GREETING"]), sv(&["GREETING=hi there"]), IntList(vec![])],
    );
    sc.call(Trap::Wait4, vec![Ret(echo), Int(0)]);
    // The child's stdout is granted explicitly; the parent then closes its copy.
    let echo = sc.call(Trap::Spawn, vec![s("/usr/bin/echo"), sv(&["echo", "via", "pipe"]), sv(&[]), Grant(1, Box::new(Aux(out)))]);
    sc.call(Trap::Close, vec![Aux(out)]);
    sc.call(Trap::Wait4, vec![Ret(echo), Int(0)]);
    sc.call(Trap::Read, vec![Ret(out), Out(64)]);
    sc.call(Trap::Read, vec![Ret(out), Out(64)]);
    let feed = sc.call(Trap::Pipe2, vec![Int(0)]);
    let cat = sc.call(Trap::Spawn, vec![s("/usr/bin/cat"), sv(&["cat"]), sv(&[]), Grant(0, Box::new(Ret(feed)))]);
    sc.call(Trap::Wait4, vec![Ret(cat), Int(WNOHANG)]);
    sc.call(Trap::Kill, vec![Ret(cat), Int(15)]);
    sc.call(Trap::Wait4, vec![Ret(cat), Int(0)]);
    sc.call(Trap::Kill, vec![Ret(cat), Int(15)]);
    sc.call(Trap::Close, vec![Ret(feed)]);
    sc.call(Trap::Close, vec![Aux(feed)]);
    sc.call(Trap::Kill, vec![Ret(me), Int(10)]);
    sc.call(Trap::Kill, vec![Ret(me), Int(99)]);
    sc.call(Trap::Kill, vec![Int(9999), Int(15)]);
    sc.call(Trap::Sigaction, vec![Int(10), Int(SIG_IGN)]);
    sc.call(Trap::Kill, vec![Ret(me), Int(10)]);
    sc.call(Trap::Sigaction, vec![Int(15), Int(SIG_IGN)]);
    sc.call(Trap::Kill, vec![Ret(me), Int(15)]);
    sc.call(Trap::Sigaction, vec![Int(15), Int(SIG_DFL)]);
    sc.call(Trap::Sigaction, vec![Int(9), Int(SIG_IGN)]);
    sc.call(Trap::Sigaction, vec![Int(99), Int(SIG_DFL)]);
    sc.call(Trap::Sigaction, vec![Int(10), Int(77)]);
    sc.call(Trap::Fork, vec![Bytes(vec![1, 2, 3]), Int(0)]);
    sc.call(Trap::Wait4, vec![Int(4242), Int(0)]);
    sc.exit = Some(7);
    sc
}

/// Connect completes only once the listener accepts, so the client side
/// lives in a separate `peer` task. It connects to the port in argv[1],
/// checks a second connect fails with EISCONN, sends "ping" and exits with
/// the length of the reply it read.
fn peer(g: &mut sandboxd_core::guest::Guest) -> i32 {
    let port: i64 = g.argv()[1].parse().unwrap();
    let fd = g.call(Trap::Socket, vec![Value::Int(AF_INET), Value::Int(SOCK_STREAM), Value::Int(0)]).ret;
    if g.call(Trap::Connect, vec![Value::Int(fd), Value::Int(port)]).ret != 0 {
        return 100;
    }
    if g.call(Trap::Connect, vec![Value::Int(fd), Value::Int(port)]).errno != 106 {
        return 101;
    }
    g.call(Trap::Write, vec![Value::Int(fd), Value::Bytes(b"ping".to_vec())]);
    let r = g.call(Trap::Read, vec![Value::Int(fd), Value::Int(16)]);
    if r.payload.as_deref() != Some(&b"pong!"[..]) {
        return 102;
    }
    r.ret as i32
}

fn socket_scenario() -> Script {
    use Arg::*;
    let mut sc = Script::new("sockets");
    let l = sc.call(Trap::Socket, vec![Int(AF_INET), Int(SOCK_STREAM), Int(0)]);
    sc.call(Trap::Socket, vec![Int(AF_INET), Int(SOCK_DGRAM), Int(0)]);
    sc.call(Trap::Socket, vec![Int(99), Int(SOCK_STREAM), Int(0)]);
    sc.call(Trap::Getsockname, vec![Ret(l)]);
    sc.call(Trap::Listen, vec![Ret(l), Int(4)]);
    sc.call(Trap::Accept, vec![Ret(l)]);
    sc.call(Trap::Bind, vec![Ret(l), Int(7000)]);
    sc.call(Trap::Getsockname, vec![Ret(l)]);
    sc.call(Trap::Bind, vec![Ret(l), Int(7001)]);
    sc.call(Trap::Listen, vec![Ret(l), Int(4)]);
    let dup = sc.call(Trap::Socket, vec![Int(AF_INET), Int(SOCK_STREAM), Int(0)]);
    sc.call(Trap::Bind, vec![Ret(dup), Int(7000)]);
    let c = sc.call(Trap::Socket, vec![Int(AF_INET), Int(SOCK_STREAM), Int(0)]);
    sc.call(Trap::Connect, vec![Ret(c), Int(7002)]);
    sc.call(Trap::Read, vec![Ret(c), Out(4)]);
    sc.call(Trap::Write, vec![Ret(c), Bytes(b"x".to_vec())]);
    sc.call(Trap::Getsockname, vec![Ret(c)]);
    let p = sc.call(Trap::Spawn, vec![s("/usr/bin/peer"), sv(&["peer", "7000"]), sv(&[]), IntList(vec![])]);
    let a = sc.call(Trap::Accept, vec![Ret(l)]);
    sc.call(Trap::Read, vec![Ret(a), Out(16)]);
    sc.call(Trap::Write, vec![Ret(a), Bytes(b"pong!".to_vec())]);
    sc.call(Trap::Wait4, vec![Ret(p), Int(0)]);
    sc.call(Trap::Fstat, vec![Ret(a), Out(40)]);
    sc.call(Trap::Llseek, vec![Ret(a), Int(0), Int(SEEK_SET)]);
    sc.call(Trap::Accept, vec![Ret(a)]);
    sc.call(Trap::Read, vec![Ret(a), Out(16)]);
    sc.call(Trap::Write, vec![Ret(a), Bytes(b"late".to_vec())]);
    sc.call(Trap::Close, vec![Ret(l)]);
    let again = sc.call(Trap::Socket, vec![Int(AF_INET), Int(SOCK_STREAM), Int(0)]);
    sc.call(Trap::Connect, vec![Ret(again), Int(7000)]);
    sc.call(Trap::Bind, vec![Ret(again), Int(0)]);
    sc.call(Trap::Getsockname, vec![Ret(again)]);
    sc.call(Trap::Getsockname, vec![Int(1)]);
    sc.call(Trap::Bind, vec![Int(1), Int(7005)]);
    sc.call(Trap::Connect, vec![Int(1), Int(7000)]);
    sc
}

const PATHS: &[&str] = &["/a", "/a/b", "/a/f", "/a/b/h", "/f", "/g", "a", "f", "b/c", "/missing/x", "/", ".", ".."];

/// A random file-system script; files never block, so any order is safe.
fn random_script(rng: &mut StdRng, n: usize) -> Script {
    use Arg::*;
    let mut sc = Script::new(&format!("random #{n}"));
    let mut fds: Vec<usize> = Vec::new();
    let pick_path = |rng: &mut StdRng| s(PATHS[rng.gen_range(0..PATHS.len())]);
    let flags = [O_RDONLY, O_WRONLY | O_CREAT, O_RDWR | O_CREAT | O_TRUNC, O_WRONLY | O_APPEND, O_RDWR, O_RDONLY | O_DIRECTORY];
    for _ in 0..RANDOM_OPS {
        let fd = |rng: &mut StdRng, fds: &[usize]| {
            if fds.is_empty() || rng.gen_bool(0.15) {
                Int(rng.gen_range(0..6))
            } else {
                Ret(fds[rng.gen_range(0..fds.len())])
            }
        };
        match rng.gen_range(0..19) {
            0 | 1 => {
                let p = pick_path(rng);
                let f = flags[rng.gen_range(0..flags.len())];
                fds.push(sc.call(Trap::Open, vec![p, Int(f), Int(0o644)]));
            }
            2 => {
                let p = pick_path(rng);
                sc.call(Trap::Mkdir, vec![p, Int(0o755)]);
            }
            3 => {
                let p = pick_path(rng);
                sc.call(Trap::Rmdir, vec![p]);
            }
            4 => {
                let p = pick_path(rng);
                sc.call(Trap::Unlink, vec![p]);
            }
            5 => {
                let f = fd(rng, &fds);
                sc.call(Trap::Close, vec![f]);
            }
            6 | 7 => {
                let f = fd(rng, &fds);
                let len = rng.gen_range(0..40);
                let data = (0..len).map(|_| rng.gen()).collect();
                sc.call(Trap::Write, vec![f, Bytes(data)]);
            }
            8 => {
                let f = fd(rng, &fds);
                sc.call(Trap::Read, vec![f, Out(rng.gen_range(0..64))]);
            }
            9 => {
                let f = fd(rng, &fds);
                sc.call(Trap::Pread, vec![f, Out(rng.gen_range(1..64)), Int(rng.gen_range(-2..50))]);
            }
            10 => {
                let f = fd(rng, &fds);
                let data = vec![b'p'; rng.gen_range(0..10)];
                sc.call(Trap::Pwrite, vec![f, Bytes(data), Int(rng.gen_range(-1..60))]);
            }
            11 => {
                let f = fd(rng, &fds);
                let whence = [SEEK_SET, SEEK_CUR, SEEK_END, 5][rng.gen_range(0..4)];
                sc.call(Trap::Llseek, vec![f, Int(rng.gen_range(-20..40)), Int(whence)]);
            }
            12 => {
                let (p, t) = (pick_path(rng), [Trap::Stat, Trap::Lstat][rng.gen_range(0..2)]);
                sc.call(t, vec![p, Out(40)]);
            }
            13 => {
                let f = fd(rng, &fds);
                sc.call(Trap::Fstat, vec![f, Out(40)]);
            }
            14 => {
                let p = pick_path(rng);
                sc.call(Trap::Access, vec![p, Int(rng.gen_range(0..8))]);
            }
            15 => {
                let p = pick_path(rng);
                sc.call(Trap::Chdir, vec![p]);
                sc.call(Trap::Getcwd, vec![Out(rng.gen_range(1..64))]);
            }
            16 => {
                let f = fd(rng, &fds);
                let t = [Trap::Getdents, Trap::Readdir][rng.gen_range(0..2)];
                sc.call(t, vec![f, Out(rng.gen_range(8..512))]);
            }
            17 => {
                let p = pick_path(rng);
                sc.call(Trap::Utimes, vec![p, Int(rng.gen_range(0..1000)), Int(rng.gen_range(0..1000))]);
            }
            _ => {
                let p = pick_path(rng);
                sc.call(Trap::Readlink, vec![p, Out(32)]);
            }
        }
    }
    sc
}

pub fn run() -> Result<String, String> {
    let start = Instant::now();
    let mut scripts = vec![file_scenario(), pipe_scenario(), process_scenario(), socket_scenario()];
    let mut rng = StdRng::seed_from_u64(0xd1ff);
    scripts.extend((0..RANDOM_SCRIPTS).map(|n| random_script(&mut rng, n)));

    let mut covered = BTreeSet::new();
    let mut calls = 0;
    for sc in &scripts {
        let (sync, sync_status) = run_script(sc, true)?;
        let (asyn, async_status) = run_script(sc, false)?;
        ensure!(sync.len() == sc.calls.len(), "{}: sync probe stopped after {} of {} calls", sc.name, sync.len(), sc.calls.len());
        ensure!(asyn.len() == sc.calls.len(), "{}: async probe stopped after {} of {} calls", sc.name, asyn.len(), sc.calls.len());
        for (i, (a, b)) in sync.iter().zip(&asyn).enumerate() {
            ensure!(a == b, "{} call {i}: sync {a:?} != async {b:?}", sc.name);
        }
        let expected_status = sc.exit.map_or(0, |c| c as i32);
        ensure!(
            sync_status == async_status && sync_status == expected_status,
            "{}: exit status sync {sync_status}, async {async_status}, expected {expected_status}",
            sc.name
        );
        calls += sc.calls.len() + usize::from(sc.exit.is_some());
        covered.extend(sc.calls.iter().map(|c| c.trap));
        if sc.exit.is_some() {
            covered.insert(Trap::Exit);
        }
    }
    let comparable: BTreeSet<Trap> = TRAP_TABLE.iter().filter(|s| !s.async_only).map(|s| s.trap).collect();
    let missing: Vec<&str> = comparable.difference(&covered).map(|t| t.name()).collect();
    ensure!(missing.is_empty(), "traps never exercised: {missing:?}");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < BUDGET_SECS, "took {secs:.1}s, budget {BUDGET_SECS}s");
    let async_only: Vec<&str> = TRAP_TABLE.iter().filter(|s| s.async_only).map(|s| s.name).collect();
    Ok(format!(
        "{} scripts, {calls} calls, {}/{} traps identical under both conventions ({} has no sync encoding); {secs:.1}s < {BUDGET_SECS}s",
        scripts.len(),
        covered.len(),
        TRAP_TABLE.len(),
        async_only.join(", ")
    ))
}
