//! Pipe backpressure: an exhaustive small-model check and a large transfer.
//!
//! The model check enumerates every operation sequence of up to
//! `MAX_OPS` steps over pipes of capacity 1..=`MAX_CAP`, with two writer
//! and two reader callers, reference duplication and closes. The pipe is
//! data-oblivious, so states are merged by their shape (fill level,
//! reference counts, parked queues); each shape is expanded again only when
//! reached with more steps remaining.

use std::collections::{HashMap, VecDeque};
use std::fs;

use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use sandboxd_core::ipc::{Outcome, Pipe};
use sandboxd_core::kernel::KernelConfig;

use crate::support::{boot, host_tool, quiesce, registry, sh};

const MAX_CAP: usize = 8;
const MAX_OPS: usize = 10;
const WRITERS: [u8; 2] = [0, 1];
const READERS: [u8; 2] = [2, 3];
/// Caller used only by the drain probe.
const PROBE: u8 = 9;
const MAX_REFS: u32 = 2;

#[derive(Clone, Copy, Debug)]
enum Op {
    Write(u8, usize),
    Read(u8, usize),
    CloseWriter,
    CloseReader,
    DupWriter,
    DupReader,
}

type Shape = (usize, u32, u32, Vec<(u8, usize)>, Vec<(u8, usize)>);

#[derive(Clone)]
struct Path {
    pipe: Pipe<u8>,
    /// Bytes issued by accepted writes and not yet read, in stream order.
    unread: VecDeque<u8>,
    next_byte: u8,
    issued: usize,
    read: usize,
    discarded: usize,
    write_len: HashMap<u8, usize>,
}

impl Path {
    fn shape(&self) -> Shape {
        let (r, w) = self.pipe.parked();
        (
            self.pipe.used(),
            self.pipe.readers(),
            self.pipe.writers(),
            r.into_iter().map(|(who, n)| (*who, n)).collect(),
            w.into_iter().map(|(who, n)| (*who, n)).collect(),
        )
    }

    fn busy(&self, who: u8) -> bool {
        self.pipe.has_parked(|w| *w == who)
    }
}

fn ops(cap: usize) -> Vec<Op> {
    let mut v = Vec::new();
    for w in WRITERS {
        let mut sizes = vec![1, 3, cap + 1];
        sizes.dedup();
        v.extend(sizes.into_iter().map(|n| Op::Write(w, n)));
    }
    for r in READERS {
        let mut sizes = vec![1, cap];
        sizes.dedup();
        v.extend(sizes.into_iter().map(|n| Op::Read(r, n)));
    }
    v.extend([Op::CloseWriter, Op::CloseReader, Op::DupWriter, Op::DupReader]);
    v
}

/// Applies `op` if it is legal in this state; returns Ok(false) when it is not.
fn step(p: &mut Path, op: Op) -> Result<bool, String> {
    let done = match op {
        Op::Write(w, n) => {
            if p.pipe.writers() == 0 || p.busy(w) {
                return Ok(false);
            }
            let data: Vec<u8> = (0..n)
                .map(|_| {
                    p.next_byte = p.next_byte.wrapping_add(1);
                    p.next_byte
                })
                .collect();
            if p.pipe.readers() > 0 {
                p.unread.extend(&data);
                p.issued += n;
            }
            p.write_len.insert(w, n);
            p.pipe.write(w, data)
        }
        Op::Read(r, n) => {
            if p.pipe.readers() == 0 || p.busy(r) {
                return Ok(false);
            }
            p.pipe.read(r, n)
        }
        Op::CloseWriter if p.pipe.writers() > 0 => p.pipe.close_writer(),
        Op::CloseReader if p.pipe.readers() > 0 => {
            if p.pipe.readers() == 1 {
                let (_, parked) = p.pipe.parked();
                p.discarded += p.pipe.used() + parked.iter().map(|(_, n)| n).sum::<usize>();
                p.unread.clear();
            }
            p.pipe.close_reader()
        }
        Op::DupWriter if p.pipe.writers() > 0 && p.pipe.writers() < MAX_REFS => {
            p.pipe.add_writer();
            Vec::new()
        }
        Op::DupReader if p.pipe.readers() > 0 && p.pipe.readers() < MAX_REFS => {
            p.pipe.add_reader();
            Vec::new()
        }
        _ => return Ok(false),
    };
    let mut finished = Vec::new();
    for c in done {
        ensure!(!finished.contains(&c.who), "{op:?}: caller {} completed twice", c.who);
        finished.push(c.who);
        match c.outcome {
            Outcome::Read(data) => {
                ensure!(READERS.contains(&c.who), "{op:?}: read completion for writer {}", c.who);
                if data.is_empty() {
                    ensure!(
                        p.pipe.writers() == 0 && p.pipe.used() == 0 && p.pipe.parked_writers() == 0,
                        "{op:?}: EOF while a writer remains"
                    );
                }
                for b in &data {
                    ensure!(p.unread.pop_front() == Some(*b), "{op:?}: byte {b} out of order");
                }
                p.read += data.len();
            }
            Outcome::Wrote(n) => {
                ensure!(Some(&n) == p.write_len.get(&c.who), "{op:?}: short write completion {n}");
            }
            Outcome::Failed(e) => {
                ensure!(e.0 == 32, "{op:?}: write failed with errno {}", e.0);
                ensure!(p.pipe.readers() == 0, "{op:?}: EPIPE with a reader open");
            }
        }
    }
    Ok(true)
}

fn check_state(p: &Path, cap: usize) -> Result<(), String> {
    let used = p.pipe.used();
    ensure!(used <= cap, "overflow: {used} bytes in a {cap}-byte pipe");
    let (readers, writers) = p.pipe.parked();
    let pending: usize = writers.iter().map(|(_, n)| n).sum();
    // A parked reader means nothing is readable and end of file is not reached.
    if !readers.is_empty() {
        ensure!(used == 0, "lost wakeup: reader parked with {used} bytes buffered");
        ensure!(p.pipe.writers() > 0 || !writers.is_empty(), "lost wakeup: reader parked at end of file");
    }
    // A parked writer means the buffer is full and someone can still read.
    if !writers.is_empty() {
        ensure!(used == cap, "lost wakeup: writer parked with {} free bytes", cap - used);
        ensure!(p.pipe.readers() > 0, "writer parked with no reader");
    }
    ensure!(
        p.read + used + pending + p.discarded == p.issued,
        "byte conservation: issued {} read {} buffered {used} pending {pending} discarded {}",
        p.issued,
        p.read,
        p.discarded
    );
    if p.pipe.readers() > 0 {
        ensure!(p.unread.len() == used + pending, "unread stream {} != buffered {used} + pending {pending}", p.unread.len());
    }
    // Liveness: a reader draining the pipe completes every parked writer.
    if p.pipe.readers() > 0 {
        let mut probe = p.pipe.clone();
        let mut drained = 0;
        for _ in 0..(pending / cap + 3) {
            for c in probe.read(PROBE, cap) {
                if let (PROBE, Outcome::Read(d)) = (c.who, &c.outcome) {
                    drained += d.len();
                }
            }
        }
        let (_, still) = probe.parked();
        ensure!(still.is_empty(), "writers stay parked after a reader drained {drained} bytes");
        ensure!(drained >= used + pending, "drained {drained} of {} bytes", used + pending);
    }
    Ok(())
}

/// Returns (distinct shapes, transitions) explored for `cap`.
fn explore(cap: usize) -> Result<(usize, usize), String> {
    let alphabet = ops(cap);
    let mut best: HashMap<Shape, usize> = HashMap::new();
    let start = Path {
        pipe: Pipe::new(cap),
        unread: VecDeque::new(),
        next_byte: 0,
        issued: 0,
        read: 0,
        discarded: 0,
        write_len: HashMap::new(),
    };
    let mut stack = vec![(start, MAX_OPS, Vec::<Op>::new())];
    let mut transitions = 0;
    while let Some((path, left, trace)) = stack.pop() {
        check_state(&path, cap).map_err(|e| format!("cap {cap}, after {trace:?}: {e}"))?;
        let shape = path.shape();
        if best.get(&shape).is_some_and(|&seen| seen >= left) {
            continue;
        }
        best.insert(shape, left);
        if left == 0 {
            continue;
        }
        for &op in &alphabet {
            let mut next = path.clone();
            let legal = step(&mut next, op).map_err(|e| format!("cap {cap}, after {trace:?}: {e}"))?;
            if legal {
                transitions += 1;
                let mut t = trace.clone();
                t.push(op);
                stack.push((next, left - 1, t));
            }
        }
    }
    Ok((best.len(), transitions))
}

/// 1 MiB through a 64 KiB pipe, compared against the host's sha1sum.
fn transfer() -> Result<String, String> {
    const SIZE: usize = 1 << 20;
    const CAP: usize = 64 * 1024;
    let mut data = vec![0u8; SIZE];
    StdRng::seed_from_u64(0x91be).fill_bytes(&mut data);
    let cfg = KernelConfig::new(registry(|_| {})).with_pipe_cap(CAP).with_file("/data/blob", data.clone(), 0o644);
    let h = boot(cfg)?;
    ensure!(h.exec(|k| k.ipc().pipe_capacity()) == CAP, "pipe capacity not applied");
    let c = sh(&h, "cat /data/blob | cat | cat > /data/copy")?;
    ensure!(c.status == 0, "copy pipeline exited {}: {}", c.status, c.err());
    let copy = h.read_file("/data/copy").map_err(|e| format!("read copy: {}", e.message()))?;
    ensure!(copy == data, "copy differs ({} bytes vs {SIZE})", copy.len());
    let c = sh(&h, "cat /data/blob | sha1sum")?;
    ensure!(c.status == 0, "sha1sum pipeline exited {}", c.status);
    let guest = c.out();
    let tool = host_tool("sha1sum").ok_or("host sha1sum not installed")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let file = dir.path().join("blob");
    fs::write(&file, &data).map_err(|e| e.to_string())?;
    let out = std::process::Command::new(tool).arg(&file).output().map_err(|e| e.to_string())?;
    let host = String::from_utf8_lossy(&out.stdout);
    let (gsum, hsum) = (guest.split_whitespace().next(), host.split_whitespace().next());
    ensure!(gsum.is_some() && gsum == hsum, "guest {guest:?} vs host {host:?}");
    quiesce(&h)?;
    Ok(format!("1 MiB via {} KiB pipes, sha1 {}", CAP / 1024, gsum.unwrap()))
}

pub fn run() -> Result<String, String> {
    let mut shapes = 0;
    let mut transitions = 0;
    for cap in 1..=MAX_CAP {
        let (s, t) = explore(cap)?;
        shapes += s;
        transitions += t;
    }
    let big = transfer()?;
    Ok(format!("model: caps 1..={MAX_CAP}, <= {MAX_OPS} ops, {shapes} shapes, {transitions} transitions clean; {big}"))
}
