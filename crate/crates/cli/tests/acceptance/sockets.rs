//! Loopback sockets: an echo round-trip property and the error contracts.
//!
//! Requests are framed as a little-endian u32 length followed by the
//! payload. The guest echo server answers each connection with the bare
//! payload and closes, which is what ends the host-side exchange.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use sandboxd_core::abi::{AF_INET, SOCK_STREAM};
use sandboxd_core::guest::Guest;
use sandboxd_core::kernel::{KernelConfig, KernelHandle, Stdin};
use sandboxd_core::Errno;

use crate::support::{boot, exec, quiesce, registry, WAIT};

const ROUNDS: usize = 1000;
const MAX_PAYLOAD: usize = 4096;
const ECHO_PORT: u16 = 7100;
const WATCH_PORT: u16 = 7200;
const IDLE_PORT: u16 = 7300;

fn arg<T: std::str::FromStr>(g: &Guest, i: usize) -> T {
    g.argv()[i].parse().ok().expect("numeric argument")
}

/// `echod PORT N`: serves N framed requests, then exits 0.
fn echod(g: &mut Guest) -> i32 {
    let (port, n): (u16, usize) = (arg(g, 1), arg(g, 2));
    let l = g.socket(AF_INET, SOCK_STREAM, 0).unwrap();
    g.bind(l, port).unwrap();
    g.listen(l, 16).unwrap();
    for _ in 0..n {
        let c = g.accept(l).unwrap();
        let mut buf = Vec::new();
        let want = loop {
            if buf.len() >= 4 {
                let len = u32::from_le_bytes(buf[..4].try_into().unwrap()) as usize;
                if buf.len() >= 4 + len {
                    break len;
                }
            }
            let chunk = g.read(c, 65536).unwrap();
            if chunk.is_empty() {
                return 3;
            }
            buf.extend(chunk);
        };
        g.write_all(c, &buf[4..4 + want]).unwrap();
        g.close(c).unwrap();
    }
    0
}

/// `binder PORT`: exits with the errno of binding PORT, 0 on success.
fn binder(g: &mut Guest) -> i32 {
    let port = arg(g, 1);
    let s = g.socket(AF_INET, SOCK_STREAM, 0).unwrap();
    g.bind(s, port).err().map_or(0, |e| e.0)
}

/// `dialer PORT`: exits with the errno of connecting to PORT, 0 on success.
fn dialer(g: &mut Guest) -> i32 {
    let port = arg(g, 1);
    let s = g.socket(AF_INET, SOCK_STREAM, 0).unwrap();
    g.connect(s, port).err().map_or(0, |e| e.0)
}

/// `relisten PORT`: listens on PORT, closes it, then listens on it again.
fn relisten(g: &mut Guest) -> i32 {
    let port = arg(g, 1);
    for _ in 0..2 {
        let s = g.socket(AF_INET, SOCK_STREAM, 0).unwrap();
        g.bind(s, port).unwrap();
        g.listen(s, 1).unwrap();
        g.close(s).unwrap();
    }
    0
}

fn status(h: &KernelHandle, argv: &[&str]) -> Result<i32, String> {
    let c = exec(h, &format!("/usr/bin/{}", argv[0]), argv, &[], Stdin::Null)?;
    Ok(c.status)
}

fn echo_property(h: &KernelHandle) -> Result<usize, String> {
    let server = {
        let h = h.clone();
        thread::spawn(move || status(&h, &["echod", &ECHO_PORT.to_string(), &ROUNDS.to_string()]))
    };
    ensure!(h.wait_for_listen(ECHO_PORT, WAIT), "echo server never listened");

    let inuse = status(h, &["binder", &ECHO_PORT.to_string()])?;
    ensure!(inuse == Errno::EADDRINUSE.0, "binding a listening port gave errno {inuse}");

    let mut rng = StdRng::seed_from_u64(0x50c7);
    let mut bytes = 0;
    for i in 0..ROUNDS {
        // Bias towards the edges: empty, tiny and full-size payloads.
        let len = match rng.gen_range(0..8) {
            0 => 0,
            1 => rng.gen_range(1..4),
            2 => MAX_PAYLOAD,
            _ => rng.gen_range(0..=MAX_PAYLOAD),
        };
        let mut payload = vec![0u8; len];
        rng.fill_bytes(&mut payload);
        let mut req = (len as u32).to_le_bytes().to_vec();
        req.extend(&payload);
        let reply = h.socket_exchange(ECHO_PORT, req).map_err(|e| format!("round {i}: {}", e.message()))?;
        ensure!(reply == payload, "round {i}: {len}-byte payload came back as {} bytes", reply.len());
        bytes += len;
    }
    let code = server.join().map_err(|_| "echo server thread panicked")??;
    ensure!(code == 0, "echo server exited {code}");
    Ok(bytes)
}

fn refused(h: &KernelHandle) -> Result<(), String> {
    let host = h.socket_exchange(IDLE_PORT, b"hello".to_vec());
    ensure!(host == Err(Errno::ECONNREFUSED), "host exchange with no listener gave {host:?}");
    let guest = status(h, &["dialer", &IDLE_PORT.to_string()])?;
    ensure!(guest == Errno::ECONNREFUSED.0, "guest connect with no listener gave errno {guest}");
    // The echo server has exited, so its port is free again.
    let rebound = status(h, &["binder", &ECHO_PORT.to_string()])?;
    ensure!(rebound == 0, "port still in use after its listener exited (errno {rebound})");
    Ok(())
}

fn notify_once(h: &KernelHandle) -> Result<(), String> {
    let hits: Vec<Arc<AtomicUsize>> = (0..3).map(|_| Arc::new(AtomicUsize::new(0))).collect();
    for hit in &hits[..2] {
        let hit = hit.clone();
        h.notify_on_listen(WATCH_PORT, move || {
            hit.fetch_add(1, Ordering::SeqCst);
        });
    }
    let code = status(h, &["relisten", &WATCH_PORT.to_string()])?;
    ensure!(code == 0, "relisten exited {code}");
    // Registered after the port closed and never listened on again.
    let late = hits[2].clone();
    h.notify_on_listen(WATCH_PORT, move || {
        late.fetch_add(1, Ordering::SeqCst);
    });
    quiesce(h)?;
    let counts: Vec<usize> = hits.iter().map(|c| c.load(Ordering::SeqCst)).collect();
    ensure!(counts == [1, 1, 0], "listen notifications fired {counts:?} times, expected [1, 1, 0]");
    Ok(())
}

pub fn run() -> Result<String, String> {
    let reg = registry(|r| {
        r.register("echod", echod);
        r.register("binder", binder);
        r.register("dialer", dialer);
        r.register("relisten", relisten);
    });
    let h = boot(KernelConfig::new(reg))?;
    let bytes = echo_property(&h)?;
    refused(&h)?;
    notify_once(&h)?;
    quiesce(&h)?;
    Ok(format!(
        "{ROUNDS} payloads ({bytes} bytes) echoed intact; EADDRINUSE, ECONNREFUSED and once-per-registration listen notify hold"
    ))
}
