//! getpid round-trip latency.
//!
//! The baseline is a bare thread that echoes messages back over the same
//! channel type the kernel uses, so it bounds what any syscall can cost.
//! The async and sync modes time `getpid` from inside a guest.

use std::fmt;
use std::hint::black_box;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded};

use crate::guest::MODE_ENV;
use crate::kernel::{HostSpawn, KernelConfig, KernelHandle};
use crate::worker::Registry;

pub const MIN_ITERS: u32 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchMode {
    Baseline,
    Async,
    Sync,
}

impl BenchMode {
    pub const ALL: [BenchMode; 3] = [BenchMode::Baseline, BenchMode::Async, BenchMode::Sync];

    pub fn name(self) -> &'static str {
        match self {
            BenchMode::Baseline => "baseline",
            BenchMode::Async => "async",
            BenchMode::Sync => "sync",
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BenchMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        BenchMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

/// Latency summary in nanoseconds over the measured (post-warmup) samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyReport {
    pub mode: BenchMode,
    pub samples: usize,
    pub min: u64,
    pub median: u64,
    pub p99: u64,
    pub mean: f64,
}

/// Nearest-rank percentile of sorted samples; `q` in (0, 1].
fn percentile(sorted: &[u64], q: f64) -> u64 {
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

impl LatencyReport {
    pub fn from_samples(mode: BenchMode, mut ns: Vec<u64>) -> Self {
        assert!(!ns.is_empty(), "no samples");
        ns.sort_unstable();
        LatencyReport {
            mode,
            samples: ns.len(),
            min: ns[0],
            median: percentile(&ns, 0.5),
            p99: percentile(&ns, 0.99),
            mean: ns.iter().sum::<u64>() as f64 / ns.len() as f64,
        }
    }

    pub fn ratio_to(&self, baseline: &LatencyReport) -> f64 {
        self.median as f64 / baseline.median.max(1) as f64
    }

    /// `mode,median_ns,ratio`
    pub fn csv_line(&self, baseline: &LatencyReport) -> String {
        format!("{},{},{:.3}", self.mode, self.median, self.ratio_to(baseline))
    }
}

impl fmt::Display for LatencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<8} n={} min={}ns median={}ns p99={}ns mean={:.0}ns",
            self.mode, self.samples, self.min, self.median, self.p99, self.mean
        )
    }
}

fn warmup(iters: u32) -> u32 {
    iters / 5
}

fn ping_pong(total: u32) -> Vec<u64> {
    let (to_echo, echo_rx) = unbounded::<u64>();
    let (echo_tx, from_echo) = unbounded::<u64>();
    let echo = thread::spawn(move || {
        while let Ok(v) = echo_rx.recv() {
            if echo_tx.send(v).is_err() {
                break;
            }
        }
    });
    let mut ns = Vec::with_capacity(total as usize);
    for i in 0..total {
        let t = Instant::now();
        to_echo.send(u64::from(i)).unwrap();
        black_box(from_echo.recv().unwrap());
        ns.push(t.elapsed().as_nanos() as u64);
    }
    drop(to_echo);
    echo.join().unwrap();
    ns
}

fn guest_getpid(mode: BenchMode, total: u32) -> Vec<u64> {
    let samples = Arc::new(Mutex::new(Vec::new()));
    let sink = samples.clone();
    let mut reg = Registry::new();
    reg.register("getpid-bench", move |g| {
        let mut ns = Vec::with_capacity(total as usize);
        for _ in 0..total {
            let t = Instant::now();
            black_box(g.getpid());
            ns.push(t.elapsed().as_nanos() as u64);
        }
        *sink.lock().unwrap() = ns;
        0
    });
    let kernel = KernelHandle::boot_blocking(KernelConfig::new(reg)).expect("empty filesystem boots");
    let (tx, rx) = bounded(1);
    let mut spec = HostSpawn::new("/usr/bin/getpid-bench", &["getpid-bench"]);
    if mode == BenchMode::Sync {
        spec.env.insert(MODE_ENV.to_owned(), "sync".to_owned());
    }
    spec.on_exit = Box::new(move |_, code| {
        let _ = tx.send(code);
    });
    kernel.spawn(spec).expect("bench program spawns");
    let code = rx.recv_timeout(Duration::from_secs(600)).expect("bench program finishes");
    kernel.shutdown();
    assert_eq!(code, 0, "bench program failed");
    let ns = std::mem::take(&mut *samples.lock().unwrap());
    ns
}

/// Runs `iters` measured round trips after discarding a 20% warmup.
pub fn bench_getpid(mode: BenchMode, iters: u32) -> LatencyReport {
    let iters = iters.max(MIN_ITERS);
    let total = iters + warmup(iters);
    let ns = match mode {
        BenchMode::Baseline => ping_pong(total),
        BenchMode::Async | BenchMode::Sync => guest_getpid(mode, total),
    };
    LatencyReport::from_samples(mode, ns[warmup(iters) as usize..].to_vec())
}
