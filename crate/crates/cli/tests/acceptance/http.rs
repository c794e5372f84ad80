//! HTTP bridge: static files through the in-kernel server, and chunked
//! decoding checked against an independent decoder.
//!
//! Generated chunked responses are replayed verbatim by a guest server and
//! fetched through the host bridge, so the decoder under test sees exactly
//! the bytes the reference decoder sees.

use std::thread;

use rand::rngs::StdRng;
use rand::{Rng, RngCore, SeedableRng};
use sandboxd_core::abi::{AF_INET, SOCK_STREAM};
use sandboxd_core::guest::Guest;
use sandboxd_core::http::{decode_chunked, parse_response, HttpRequest};
use sandboxd_core::kernel::{KernelConfig, KernelHandle, Stdin};

use crate::support::{boot, exec, quiesce, registry, WAIT};

const STATIC_PORT: u16 = 8080;
const CHUNKED_PORT: u16 = 8081;
const REPLAY_PORT: u16 = 8082;
const GENERATED: usize = 100;

/// Reference chunked decoder: a byte-level reading of the grammar
/// `chunk-size [ext] CRLF data CRLF ... 0 [ext] CRLF *(trailer CRLF) CRLF`.
fn reference_decode(mut b: &[u8]) -> Option<Vec<u8>> {
    fn line<'a>(b: &mut &'a [u8]) -> Option<&'a [u8]> {
        let i = b.windows(2).position(|w| w == b"\r\n")?;
        let (l, rest) = b.split_at(i);
        *b = &rest[2..];
        Some(l)
    }
    let mut out = Vec::new();
    loop {
        let l = line(&mut b)?;
        let hex: &[u8] = l.split(|&c| c == b';').next()?;
        let hex = std::str::from_utf8(hex).ok()?.trim_matches([' ', '\t']);
        if hex.is_empty() || hex.len() > 15 || !hex.chars().all(|c| c.is_ascii_hexdigit()) {
            return None;
        }
        let size = u64::from_str_radix(hex, 16).ok()? as usize;
        if size == 0 {
            break;
        }
        if b.len() < size + 2 || &b[size..size + 2] != b"\r\n" {
            return None;
        }
        out.extend_from_slice(&b[..size]);
        b = &b[size + 2..];
    }
    while !line(&mut b)?.is_empty() {}
    Some(out)
}

/// Hand-built chunked encoding with random chunking, hex case, extensions
/// and trailers.
fn encode(rng: &mut StdRng, body: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut rest = body;
    while !rest.is_empty() {
        let n = rng.gen_range(1..=rest.len().min(600));
        let hex = if rng.gen_bool(0.5) { format!("{n:x}") } else { format!("{n:X}") };
        let zeros = "0".repeat(rng.gen_range(0..3));
        out.extend_from_slice(format!("{zeros}{hex}").as_bytes());
        if rng.gen_bool(0.2) {
            out.extend_from_slice(b";name=\"v\"");
        }
        out.extend_from_slice(b"\r\n");
        out.extend_from_slice(&rest[..n]);
        out.extend_from_slice(b"\r\n");
        rest = &rest[n..];
    }
    out.extend_from_slice(b"0\r\n");
    for i in 0..rng.gen_range(0..3) {
        out.extend_from_slice(format!("X-Trailer-{i}: t{i}\r\n").as_bytes());
    }
    out.extend_from_slice(b"\r\n");
    out
}

fn generated(rng: &mut StdRng) -> (Vec<u8>, Vec<u8>) {
    let len = match rng.gen_range(0..6) {
        0 => 0,
        1 => rng.gen_range(1..8),
        _ => rng.gen_range(0..20_000),
    };
    let mut body = vec![0u8; len];
    rng.fill_bytes(&mut body);
    // CRLF pairs and hex digits inside data must not confuse a decoder.
    for _ in 0..len / 50 {
        let at = rng.gen_range(0..len);
        body[at] = b"\r\n0a"[rng.gen_range(0..4)];
    }
    let te = if rng.gen_bool(0.3) { "gzip, chunked" } else { "chunked" };
    let mut resp = format!("HTTP/1.1 200 OK\r\nTransfer-Encoding: {te}\r\nX-Case: {}\r\n\r\n", body.len()).into_bytes();
    resp.extend(encode(rng, &body));
    (body, resp)
}

/// `replay PORT N`: for each of N connections, reads a request head and
/// answers with the bytes of /replay/I.
fn replay(g: &mut Guest) -> i32 {
    let port: u16 = g.argv()[1].parse().unwrap();
    let n: usize = g.argv()[2].parse().unwrap();
    let l = g.socket(AF_INET, SOCK_STREAM, 0).unwrap();
    g.bind(l, port).unwrap();
    g.listen(l, 16).unwrap();
    for i in 0..n {
        let c = g.accept(l).unwrap();
        let mut head = Vec::new();
        while !head.windows(4).any(|w| w == b"\r\n\r\n") {
            let chunk = g.read(c, 4096).unwrap();
            if chunk.is_empty() {
                return 3;
            }
            head.extend(chunk);
        }
        let resp = g.read_file(&format!("/replay/{i}")).unwrap();
        g.write_all(c, &resp).unwrap();
        g.close(c).unwrap();
    }
    0
}

fn serve(h: &KernelHandle, path: &str, argv: Vec<String>, port: u16) -> Result<thread::JoinHandle<Result<i32, String>>, String> {
    let (h2, owned) = (h.clone(), path.to_owned());
    let t = thread::spawn(move || {
        let args: Vec<&str> = argv.iter().map(String::as_str).collect();
        exec(&h2, &owned, &args, &[], Stdin::Null).map(|c| c.status)
    });
    ensure!(h.wait_for_listen(port, WAIT), "{path} never listened on {port}");
    Ok(t)
}

fn finish(server: thread::JoinHandle<Result<i32, String>>, what: &str) -> Result<(), String> {
    let code = server.join().map_err(|_| format!("{what} thread panicked"))??;
    ensure!(code == 0, "{what} exited {code}");
    Ok(())
}

fn static_files(h: &KernelHandle) -> Result<usize, String> {
    let mut rng = StdRng::seed_from_u64(0x4770);
    let mut blob = vec![0u8; 300_000];
    rng.fill_bytes(&mut blob);
    let files: Vec<(&str, Vec<u8>)> = vec![
        ("/var/www/index.html", b"<h1>hello</h1>\n".to_vec()),
        ("/var/www/blob.bin", blob),
        ("/var/www/docs/empty.txt", Vec::new()),
        ("/var/www/docs/notes.txt", b"line one\r\nline two\n".to_vec()),
    ];
    for (p, data) in &files {
        h.write_file(p, data, 0o644).map_err(|e| e.message().to_string())?;
    }
    let requests = files.len() + 2;
    for (port, chunks) in [(STATIC_PORT, None), (CHUNKED_PORT, Some("1,7,300,4096"))] {
        let mut argv = vec!["httpd".to_string(), "-p".into(), port.to_string(), "-n".into(), requests.to_string()];
        if let Some(c) = chunks {
            argv.extend(["-c".to_string(), c.to_string()]);
        }
        let server = serve(h, "/usr/bin/httpd", argv, port)?;
        for (p, _) in &files {
            let url = p.trim_start_matches("/var/www");
            let r = h.http_request(&HttpRequest::get(url).with_port(port)).map_err(|e| format!("GET {url}: {e}"))?;
            let want = h.read_file(p).map_err(|e| e.message().to_string())?;
            ensure!(r.status == 200, "GET {url} on {port}: status {}", r.status);
            ensure!(r.body == want, "GET {url} on {port}: {} bytes, file has {}", r.body.len(), want.len());
            let chunked = r.header("transfer-encoding").is_some();
            ensure!(chunked == chunks.is_some(), "GET {url} on {port}: transfer-encoding {:?}", r.header("transfer-encoding"));
        }
        let r = h.http_request(&HttpRequest::get("/").with_port(port)).map_err(|e| e.to_string())?;
        ensure!(r.status == 200 && r.body == files[0].1, "GET / did not serve index.html");
        let r = h.http_request(&HttpRequest::get("/missing").with_port(port)).map_err(|e| e.to_string())?;
        ensure!(r.status == 404, "GET /missing: status {}", r.status);
        finish(server, "httpd")?;
    }
    Ok(files.len())
}

fn chunked_decoding(h: &KernelHandle) -> Result<usize, String> {
    let mut rng = StdRng::seed_from_u64(0xc4c4);
    let cases: Vec<(Vec<u8>, Vec<u8>)> = (0..GENERATED).map(|_| generated(&mut rng)).collect();
    for (i, (_, resp)) in cases.iter().enumerate() {
        h.write_file(&format!("/replay/{i}"), resp, 0o644).map_err(|e| e.message().to_string())?;
    }
    let server = serve(h, "/usr/bin/replay", vec!["replay".into(), REPLAY_PORT.to_string(), GENERATED.to_string()], REPLAY_PORT)?;
    let mut bytes = 0;
    for (i, (body, resp)) in cases.iter().enumerate() {
        let head_end = resp.windows(4).position(|w| w == b"\r\n\r\n").unwrap() + 4;
        let reference = reference_decode(&resp[head_end..]);
        ensure!(reference.as_deref() == Some(&body[..]), "case {i}: reference decoder disagrees with the generator");
        let direct = decode_chunked(&resp[head_end..]).map_err(|e| format!("case {i}: {e}"))?;
        ensure!(direct == *body, "case {i}: decode_chunked returned {} of {} bytes", direct.len(), body.len());
        let bridged = h.http_request(&HttpRequest::get("/").with_port(REPLAY_PORT)).map_err(|e| format!("case {i}: {e}"))?;
        ensure!(bridged.body == *body, "case {i}: bridge returned {} of {} bytes", bridged.body.len(), body.len());
        bytes += body.len();
    }
    finish(server, "replay")?;

    // Corrupted encodings: both decoders must reject each one.
    let (body, resp) = generated(&mut rng);
    let head_end = resp.windows(4).position(|w| w == b"\r\n\r\n").unwrap() + 4;
    let raw = &resp[head_end..];
    let mut bad: Vec<Vec<u8>> = vec![
        raw[..raw.len() - 1].to_vec(),
        b"zz\r\nabc\r\n0\r\n\r\n".to_vec(),
        b"5\r\nabc\r\n0\r\n\r\n".to_vec(),
        b"3\r\nabcX\r\n0\r\n\r\n".to_vec(),
        b"\r\n".to_vec(),
        b"3\r\nabc\r\n".to_vec(),
    ];
    if !body.is_empty() {
        bad.push(raw[..raw.len() / 2].to_vec());
    }
    for (i, b) in bad.iter().enumerate() {
        ensure!(reference_decode(b).is_none(), "corrupt case {i}: reference decoder accepted it");
        ensure!(decode_chunked(b).is_err(), "corrupt case {i}: decode_chunked accepted {:?}", String::from_utf8_lossy(b));
        let mut full = resp[..head_end].to_vec();
        full.extend_from_slice(b);
        ensure!(parse_response(&full).is_err(), "corrupt case {i}: parse_response accepted it");
    }
    Ok(bytes)
}

pub fn run() -> Result<String, String> {
    let h = boot(KernelConfig::new(registry(|r| {
        r.register("replay", replay);
    })))?;
    let files = static_files(&h)?;
    let bytes = chunked_decoding(&h)?;
    quiesce(&h)?;
    Ok(format!(
        "{files} files byte-identical via GET (plain and chunked); {GENERATED} generated chunked responses ({bytes} bytes) decode as the reference decoder does"
    ))
}
