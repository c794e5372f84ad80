use std::io::Write;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use crossbeam_channel::{unbounded, Receiver};
use sandboxd_cli::config::KernelArgs;
use sandboxd_cli::runner::{run_attached, InterruptTarget};
use sandboxd_cli::serve::{TermServer, DEFAULT_LISTEN};
use sandboxd_cli::{EX_OSERR, EX_PROTOCOL, EX_UNAVAILABLE, EX_USAGE};
use sandboxd_core::bench::{bench_getpid, BenchMode, LatencyReport};
use sandboxd_core::http::{HttpError, HttpRequest, DEFAULT_PORT};
use sandboxd_core::kernel::KernelHandle;
use sandboxd_core::Errno;

/// A user-space Unix kernel: guest programs, pipes, sockets and an overlay
/// filesystem in one host process.
#[derive(Debug, Parser)]
#[command(name = "sandboxd", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Run a guest program with the host's stdio.
    Run {
        #[command(flatten)]
        kernel: KernelArgs,
        /// Program path or name looked up in /usr/bin:/bin.
        prog: String,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        args: Vec<String>,
    },
    /// Interactive guest shell; Ctrl-C interrupts the foreground job.
    Sh {
        #[command(flatten)]
        kernel: KernelArgs,
        /// Run this command line instead of reading commands.
        #[arg(short = 'c', value_name = "COMMAND")]
        command: Option<String>,
    },
    /// Measure getpid round trips and print a latency report.
    Bench {
        /// Timed iterations per mode (at least 1000).
        #[arg(long, default_value_t = 10_000)]
        iters: u32,
        /// Modes to run; the baseline always runs for the ratio column.
        #[arg(long = "mode", value_parser = parse_mode)]
        modes: Vec<BenchMode>,
        /// Only print `mode,median_ns,ratio` lines.
        #[arg(long)]
        csv: bool,
    },
    /// Serve terminal sessions over WebSocket.
    Serve {
        #[command(flatten)]
        kernel: KernelArgs,
        #[arg(long, default_value = DEFAULT_LISTEN)]
        listen: String,
    },
    /// Send one HTTP request to a guest server over a kernel socket.
    Http {
        #[command(flatten)]
        kernel: KernelArgs,
        #[arg(short, long, default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(short = 'X', long, default_value = "GET")]
        method: String,
        /// Extra request header, `Name: value`.
        #[arg(short = 'H', long = "header", value_name = "NAME: VALUE")]
        headers: Vec<String>,
        #[arg(short = 'd', long = "data")]
        body: Option<String>,
        /// Guest command line started first, e.g. `httpd /var/www`.
        #[arg(long, value_name = "COMMAND")]
        server: Option<String>,
        /// Print the status line and headers before the body.
        #[arg(short, long)]
        include: bool,
        #[arg(default_value = "/")]
        path: String,
    },
}

fn parse_mode(s: &str) -> Result<BenchMode, String> {
    s.parse()
}

fn boot(kernel: &KernelArgs) -> Result<KernelHandle, ExitCode> {
    kernel.boot().map_err(|e| {
        eprintln!("sandboxd: boot failed: {e}");
        ExitCode::from(EX_OSERR as u8)
    })
}

fn exit(code: i32) -> ExitCode {
    ExitCode::from(code.clamp(0, 255) as u8)
}

/// Host Ctrl-C presses, one message each.
fn interrupts() -> Receiver<()> {
    let (tx, rx) = unbounded();
    if let Err(e) = ctrlc::set_handler(move || {
        let _ = tx.send(());
    }) {
        eprintln!("sandboxd: cannot catch Ctrl-C: {e}");
    }
    rx
}

fn bench(iters: u32, modes: &[BenchMode], csv: bool) -> ExitCode {
    let modes = if modes.is_empty() { BenchMode::ALL.to_vec() } else { modes.to_vec() };
    let baseline = bench_getpid(BenchMode::Baseline, iters);
    let reports: Vec<LatencyReport> = modes
        .iter()
        .map(|&m| if m == BenchMode::Baseline { baseline.clone() } else { bench_getpid(m, iters) })
        .collect();
    let mut out = std::io::stdout().lock();
    if !csv {
        for r in &reports {
            let _ = writeln!(out, "{r}");
        }
    }
    for r in &reports {
        let _ = writeln!(out, "{}", r.csv_line(&baseline));
    }
    ExitCode::SUCCESS
}

#[allow(clippy::too_many_arguments)]
fn http(
    kernel: &KernelArgs,
    port: u16,
    method: &str,
    headers: &[String],
    body: Option<&str>,
    server: Option<&str>,
    include: bool,
    path: &str,
) -> ExitCode {
    let h = match boot(kernel) {
        Ok(h) => h,
        Err(code) => return code,
    };
    if let Some(cmd) = server {
        h.system(cmd, |_, _| {}, |_| {}, |b| {
            let _ = std::io::stderr().write_all(b);
        });
        if !h.wait_for_listen(port, Duration::from_secs(10)) {
            eprintln!("sandboxd: nothing listens on port {port}");
            return exit(EX_UNAVAILABLE);
        }
    }
    let mut req = HttpRequest::new(method, path).with_port(port);
    for hdr in headers {
        let Some((name, value)) = hdr.split_once(':') else {
            eprintln!("sandboxd: header {hdr:?} is not NAME: VALUE");
            return exit(EX_USAGE);
        };
        req = req.with_header(name.trim(), value.trim());
    }
    if let Some(b) = body {
        req = req.with_body(b.as_bytes().to_vec());
    }
    match h.http_request(&req) {
        Ok(resp) => {
            let mut out = std::io::stdout().lock();
            if include {
                let _ = write!(out, "HTTP/1.1 {} {}\r\n", resp.status, resp.reason);
                for (k, v) in &resp.headers {
                    let _ = write!(out, "{k}: {v}\r\n");
                }
                let _ = write!(out, "\r\n");
            }
            let _ = out.write_all(&resp.body);
            let _ = out.flush();
            ExitCode::SUCCESS
        }
        Err(HttpError::InvalidRequest(m)) => {
            eprintln!("sandboxd: invalid request: {m}");
            exit(EX_USAGE)
        }
        Err(HttpError::Sys(e)) => {
            eprintln!("sandboxd: port {port}: {}", e.message());
            exit(if e == Errno::ECONNREFUSED { EX_UNAVAILABLE } else { EX_OSERR })
        }
        Err(HttpError::MalformedResponse(m)) => {
            eprintln!("sandboxd: malformed response: {m}");
            exit(EX_PROTOCOL)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit(EX_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match cli.command {
        Cmd::Run { kernel, prog, args } => {
            let h = match boot(&kernel) {
                Ok(h) => h,
                Err(code) => return code,
            };
            let argv: Vec<String> = std::iter::once(prog).chain(args).collect();
            exit(run_attached(&h, &argv, kernel.guest_env(), interrupts(), InterruptTarget::Tree))
        }
        Cmd::Sh { kernel, command } => {
            let h = match boot(&kernel) {
                Ok(h) => h,
                Err(code) => return code,
            };
            let (argv, target): (Vec<String>, _) = match command {
                Some(c) => (vec!["/bin/sh".into(), "-c".into(), c], InterruptTarget::Tree),
                None => (vec!["/bin/sh".into(), "-i".into()], InterruptTarget::Process),
            };
            exit(run_attached(&h, &argv, kernel.guest_env(), interrupts(), target))
        }
        Cmd::Bench { iters, modes, csv } => bench(iters, &modes, csv),
        Cmd::Serve { kernel, listen } => {
            let h = match boot(&kernel) {
                Ok(h) => h,
                Err(code) => return code,
            };
            let server = match TermServer::bind(&listen, h, "/bin/sh", kernel.guest_env()) {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("sandboxd: cannot listen on {listen}: {e}");
                    return exit(EX_OSERR);
                }
            };
            if let Ok(addr) = server.local_addr() {
                eprintln!("sandboxd: terminal service on ws://{addr}");
            }
            match server.run() {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("sandboxd: {e}");
                    exit(EX_OSERR)
                }
            }
        }
        Cmd::Http { kernel, port, method, headers, body, server, include, path } => {
            http(&kernel, port, &method, &headers, body.as_deref(), server.as_deref(), include, &path)
        }
    }
}
