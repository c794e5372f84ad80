//! A sequential static file server on an in-kernel socket.
//!
//! `httpd [-p PORT] [-n COUNT] [-c SIZES] [ROOT]` serves files under ROOT
//! (default `/var/www`) to GET requests. `-n` stops after COUNT connections;
//! `-c 3,5` sends bodies with chunked encoding in chunks cycling through the
//! given sizes. Directories serve their `index.html`.

use getopts::Options;
use sandboxd_core::abi::{AF_INET, SOCK_STREAM};
use sandboxd_core::guest::Guest;
use sandboxd_core::http::{encode_chunked, parse_request, write_response, ParsedRequest, DEFAULT_PORT};
use sandboxd_core::Errno;

use crate::rt::{join_path, parse_count, Tool};
use crate::utils::files::parse_or_return;

pub const DEFAULT_ROOT: &str = "/var/www";
const READ_CHUNK: usize = 16 * 1024;

struct Server {
    root: String,
    chunks: Option<Vec<usize>>,
}

enum Reply {
    Body(Vec<u8>),
    Error(u16, &'static str),
}

impl Server {
    /// Maps a request target under the root; `..` components are refused.
    fn resolve(&self, target: &str) -> Option<String> {
        let path = target.split(['?', '#']).next().unwrap_or_default();
        if !path.starts_with('/') {
            return None;
        }
        let mut out = self.root.trim_end_matches('/').to_owned();
        for seg in path.split('/').filter(|s| !s.is_empty() && *s != ".") {
            if seg == ".." {
                return None;
            }
            out = join_path(&out, seg);
        }
        Some(if out.is_empty() { "/".to_owned() } else { out })
    }

    fn lookup(&self, g: &mut Guest, req: &ParsedRequest) -> Reply {
        if req.method != "GET" && req.method != "HEAD" {
            return Reply::Error(405, "Method Not Allowed");
        }
        let Some(mut path) = self.resolve(&req.path) else {
            return Reply::Error(400, "Bad Request");
        };
        if matches!(g.stat(&path), Ok(st) if st.is_dir()) {
            path = join_path(&path, "index.html");
        }
        match g.read_file(&path) {
            Ok(data) => Reply::Body(data),
            Err(Errno::ENOENT | Errno::ENOTDIR | Errno::EISDIR) => Reply::Error(404, "Not Found"),
            Err(Errno::EACCES) => Reply::Error(403, "Forbidden"),
            Err(_) => Reply::Error(500, "Internal Server Error"),
        }
    }

    fn respond(&self, g: &mut Guest, req: &ParsedRequest) -> Vec<u8> {
        let head_only = req.method == "HEAD";
        match self.lookup(g, req) {
            Reply::Body(data) => match &self.chunks {
                Some(sizes) => {
                    let mut out =
                        b"HTTP/1.1 200 OK\r\nContent-Type: application/octet-stream\r\nTransfer-Encoding: chunked\r\nConnection: close\r\n\r\n"
                            .to_vec();
                    if !head_only {
                        out.extend_from_slice(&encode_chunked(&data, sizes));
                    }
                    out
                }
                None if head_only => {
                    let mut out = write_response(200, "OK", &[("Content-Type", "application/octet-stream")], &data);
                    out.truncate(out.len() - data.len());
                    out
                }
                None => write_response(200, "OK", &[("Content-Type", "application/octet-stream")], &data),
            },
            Reply::Error(status, reason) => {
                let body = format!("{status} {reason}\n");
                write_response(status, reason, &[("Content-Type", "text/plain")], body.as_bytes())
            }
        }
    }

    /// Reads one request from `conn` and answers it.
    fn serve(&self, g: &mut Guest, conn: i32) -> Result<(), Errno> {
        let mut buf = Vec::new();
        let reply = loop {
            match parse_request(&buf) {
                Ok(Some((req, _))) => break self.respond(g, &req),
                Ok(None) => {}
                Err(_) => break write_response(400, "Bad Request", &[("Content-Type", "text/plain")], b"400 Bad Request\n"),
            }
            let data = match g.read(conn, READ_CHUNK) {
                Err(Errno::EINTR) => continue,
                r => r?,
            };
            if data.is_empty() {
                return Ok(());
            }
            buf.extend_from_slice(&data);
        };
        g.write_all(conn, &reply)
    }
}

fn parse_sizes(s: &str) -> Option<Vec<usize>> {
    s.split(',').map(|n| parse_count(n).filter(|v| *v > 0).map(|v| v as usize)).collect()
}

fn listen(g: &mut Guest, port: u16) -> Result<i32, Errno> {
    let fd = g.socket(AF_INET, SOCK_STREAM, 0)?;
    g.bind(fd, port)?;
    g.listen(fd, 16)?;
    Ok(fd)
}

pub fn main(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "httpd");
    let mut o = Options::new();
    o.optopt("p", "", "listen on PORT (default 8080)", "PORT");
    o.optopt("n", "", "exit after COUNT connections", "COUNT");
    o.optopt("c", "", "use chunked encoding with these chunk sizes", "SIZES");
    let m = parse_or_return!(t, o, "[-p PORT] [-n COUNT] [-c SIZES] [ROOT]", 2);
    let port = match m.opt_str("p").map(|p| p.parse::<u16>().map_err(|_| p)) {
        None => DEFAULT_PORT,
        Some(Ok(p)) => p,
        Some(Err(p)) => {
            t.warn(format_args!("invalid port '{p}'"));
            return 2;
        }
    };
    let limit = match m.opt_str("n").map(|n| parse_count(&n).ok_or(n)) {
        None => None,
        Some(Ok(n)) => Some(n),
        Some(Err(n)) => {
            t.warn(format_args!("invalid count '{n}'"));
            return 2;
        }
    };
    let chunks = match m.opt_str("c").map(|c| parse_sizes(&c).ok_or(c)) {
        None => None,
        Some(Ok(s)) => Some(s),
        Some(Err(c)) => {
            t.warn(format_args!("invalid chunk sizes '{c}'"));
            return 2;
        }
    };
    let server = Server { root: m.free.first().cloned().unwrap_or_else(|| DEFAULT_ROOT.to_owned()), chunks };
    let listener = match listen(t.g, port) {
        Ok(fd) => fd,
        Err(e) => {
            t.warn(format_args!("port {port}: {}", e.message()));
            return 1;
        }
    };
    let mut served = 0u64;
    while limit.map_or(true, |n| served < n) {
        let conn = match t.g.accept(listener) {
            Ok(c) => c,
            Err(Errno::EINTR) => continue,
            Err(e) => {
                t.warn(format_args!("accept: {}", e.message()));
                return 1;
            }
        };
        if let Err(e) = server.serve(t.g, conn) {
            t.warn(format_args!("connection: {}", e.message()));
        }
        let _ = t.g.close(conn);
        served += 1;
    }
    let _ = t.g.close(listener);
    0
}
