//! getpid latency ordering across the three modes, with a ratio report.

use sandboxd_core::bench::{bench_getpid, BenchMode};

const ITERS: u32 = 10_000;

pub fn run() -> Result<String, String> {
    let baseline = bench_getpid(BenchMode::Baseline, ITERS);
    let asyn = bench_getpid(BenchMode::Async, ITERS);
    let sync = bench_getpid(BenchMode::Sync, ITERS);
    for r in [&baseline, &asyn, &sync] {
        ensure!(r.samples == ITERS as usize, "{} measured {} samples, expected {ITERS}", r.mode, r.samples);
        println!("     {r}");
    }
    ensure!(
        baseline.median <= asyn.median,
        "baseline median {}ns exceeds async median {}ns",
        baseline.median,
        asyn.median
    );
    ensure!(sync.median < asyn.median, "sync median {}ns is not below async median {}ns", sync.median, asyn.median);
    Ok(format!(
        "medians baseline {}ns <= async {}ns, sync {}ns < async; ratios to baseline: async {:.2}x, sync {:.2}x",
        baseline.median,
        asyn.median,
        sync.median,
        asyn.ratio_to(&baseline),
        sync.ratio_to(&baseline)
    ))
}
