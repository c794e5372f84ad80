//! HTTP/1.1 over in-kernel sockets.
//!
//! The host side serializes a request into bytes, pushes them through a
//! kernel socket with [`KernelHandle::socket_exchange`], and parses whatever
//! the guest server wrote before closing. Guest servers use the request
//! parser and response writer from the same module.

use thiserror::Error;

use crate::errno::Errno;
use crate::kernel::KernelHandle;

pub const DEFAULT_PORT: u16 = 8080;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HttpError {
    #[error("socket error: {0}")]
    Sys(Errno),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpRequest {
    pub method: String,
    pub path: String,
    /// Names are unique ignoring ASCII case.
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
    pub port: u16,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub reason: String,
    pub headers: Vec<(String, String)>,
    /// Chunked bodies are already decoded.
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn header(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }
}

fn find_header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers.iter().find(|(k, _)| k.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
}

fn is_token(s: &str) -> bool {
    !s.is_empty()
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || b"!#$%&'*+-.^_`|~".contains(&b))
}

fn is_field_value(s: &str) -> bool {
    s.bytes().all(|b| b == b'\t' || (b >= 0x20 && b != 0x7f))
}

impl HttpRequest {
    pub fn new(method: &str, path: &str) -> Self {
        HttpRequest {
            method: method.to_owned(),
            path: path.to_owned(),
            headers: Vec::new(),
            body: Vec::new(),
            port: DEFAULT_PORT,
        }
    }

    pub fn get(path: &str) -> Self {
        Self::new("GET", path)
    }

    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.to_owned(), value.to_owned()));
        self
    }

    pub fn with_body(mut self, body: impl Into<Vec<u8>>) -> Self {
        self.body = body.into();
        self
    }

    pub fn with_port(mut self, port: u16) -> Self {
        self.port = port;
        self
    }

    /// Request-line, caller headers, then Host, Connection: close and
    /// Content-Length when absent, a blank line, and the body.
    pub fn serialize(&self) -> Result<Vec<u8>, HttpError> {
        if !is_token(&self.method) {
            return Err(HttpError::InvalidRequest(format!("bad method {:?}", self.method)));
        }
        if self.path.is_empty() || self.path.bytes().any(|b| b <= b' ' || b == 0x7f) {
            return Err(HttpError::InvalidRequest(format!("bad target {:?}", self.path)));
        }
        for (i, (name, value)) in self.headers.iter().enumerate() {
            if !is_token(name) || !is_field_value(value) {
                return Err(HttpError::InvalidRequest(format!("bad header {name:?}")));
            }
            if self.headers[..i].iter().any(|(n, _)| n.eq_ignore_ascii_case(name)) {
                return Err(HttpError::InvalidRequest(format!("duplicate header {name:?}")));
            }
        }
        if find_header(&self.headers, "transfer-encoding").is_some() {
            return Err(HttpError::InvalidRequest("request bodies are sent with Content-Length".into()));
        }
        if let Some(v) = find_header(&self.headers, "content-length") {
            if v.trim().parse::<usize>().ok() != Some(self.body.len()) {
                return Err(HttpError::InvalidRequest(format!("Content-Length {v} disagrees with body")));
            }
        }
        if let Some(v) = find_header(&self.headers, "connection") {
            if !v.eq_ignore_ascii_case("close") {
                return Err(HttpError::InvalidRequest("the bridge reads to close".into()));
            }
        }

        let mut out = Vec::with_capacity(128 + self.body.len());
        out.extend_from_slice(format!("{} {} HTTP/1.1\r\n", self.method, self.path).as_bytes());
        let mut put = |k: &str, v: &str| out.extend_from_slice(format!("{k}: {v}\r\n").as_bytes());
        for (k, v) in &self.headers {
            put(k, v);
        }
        if find_header(&self.headers, "host").is_none() {
            put("Host", &format!("localhost:{}", self.port));
        }
        if find_header(&self.headers, "connection").is_none() {
            put("Connection", "close");
        }
        if find_header(&self.headers, "content-length").is_none()
            && (!self.body.is_empty() || matches!(self.method.as_str(), "POST" | "PUT" | "PATCH"))
        {
            put("Content-Length", &self.body.len().to_string());
        }
        out.extend_from_slice(b"\r\n");
        out.extend_from_slice(&self.body);
        Ok(out)
    }
}

fn malformed(msg: impl Into<String>) -> HttpError {
    HttpError::MalformedResponse(msg.into())
}

fn find_crlf(buf: &[u8], from: usize) -> Option<usize> {
    buf.get(from..)?.windows(2).position(|w| w == b"\r\n").map(|i| from + i)
}

/// Splits a head into its first line and header fields; returns the offset
/// just past the blank line.
fn parse_head(buf: &[u8]) -> Option<Result<(String, Vec<(String, String)>, usize), String>> {
    let end = buf.windows(4).position(|w| w == b"\r\n\r\n")? + 4;
    let head = match std::str::from_utf8(&buf[..end - 4]) {
        Ok(h) => h,
        Err(_) => return Some(Err("head is not UTF-8".into())),
    };
    let mut lines = head.split("\r\n");
    let first = lines.next().unwrap_or_default().to_owned();
    let mut headers = Vec::new();
    for line in lines {
        let Some((name, value)) = line.split_once(':') else {
            return Some(Err(format!("header line without colon: {line:?}")));
        };
        if !is_token(name) {
            return Some(Err(format!("bad header name {name:?}")));
        }
        headers.push((name.to_owned(), value.trim_matches([' ', '\t']).to_owned()));
    }
    Some(Ok((first, headers, end)))
}

/// Decodes a complete chunked body; trailers are read and dropped.
pub fn decode_chunked(buf: &[u8]) -> Result<Vec<u8>, HttpError> {
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        let eol = find_crlf(buf, pos).ok_or_else(|| malformed("unterminated chunk size"))?;
        let line = std::str::from_utf8(&buf[pos..eol]).map_err(|_| malformed("chunk size is not ASCII"))?;
        let digits = line.split(';').next().unwrap_or_default().trim();
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(malformed(format!("bad chunk size {line:?}")));
        }
        let size = usize::from_str_radix(digits, 16).map_err(|_| malformed("chunk size overflows"))?;
        pos = eol + 2;
        if size == 0 {
            break;
        }
        let data_end = pos.checked_add(size).filter(|&e| e <= buf.len()).ok_or_else(|| malformed("truncated chunk"))?;
        out.extend_from_slice(&buf[pos..data_end]);
        if buf.get(data_end..data_end + 2) != Some(b"\r\n") {
            return Err(malformed("chunk data not followed by CRLF"));
        }
        pos = data_end + 2;
    }
    loop {
        let eol = find_crlf(buf, pos).ok_or_else(|| malformed("unterminated trailer"))?;
        if eol == pos {
            return Ok(out);
        }
        pos = eol + 2;
    }
}

/// Parses a response read until the server closed the connection.
pub fn parse_response(buf: &[u8]) -> Result<HttpResponse, HttpError> {
    let (first, headers, body_at) = parse_head(buf).ok_or_else(|| malformed("no complete head"))?.map_err(malformed)?;
    let mut parts = first.splitn(3, ' ');
    let version = parts.next().unwrap_or_default();
    if version != "HTTP/1.1" && version != "HTTP/1.0" {
        return Err(malformed(format!("bad status line {first:?}")));
    }
    let code = parts.next().unwrap_or_default();
    if code.len() != 3 || !code.bytes().all(|b| b.is_ascii_digit()) {
        return Err(malformed(format!("bad status code {code:?}")));
    }
    let status = code.parse().expect("three digits");
    let reason = parts.next().unwrap_or_default().to_owned();
    let raw = &buf[body_at..];

    let chunked = find_header(&headers, "transfer-encoding")
        .map(|v| v.rsplit(',').next().unwrap_or_default().trim().eq_ignore_ascii_case("chunked"))
        .unwrap_or(false);
    let body = if chunked {
        decode_chunked(raw)?
    } else if let Some(len) = find_header(&headers, "content-length") {
        let len: usize = len.parse().map_err(|_| malformed(format!("bad Content-Length {len:?}")))?;
        if raw.len() < len {
            return Err(malformed(format!("body has {} of {len} bytes", raw.len())));
        }
        raw[..len].to_vec()
    } else {
        raw.to_vec()
    };
    Ok(HttpResponse { status, reason, headers, body })
}

/// A request as seen by a guest server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedRequest {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

/// Parses one request from the front of `buf`. `Ok(None)` means more bytes
/// are needed; on success the consumed length is returned too.
pub fn parse_request(buf: &[u8]) -> Result<Option<(ParsedRequest, usize)>, String> {
    let Some(head) = parse_head(buf) else {
        return Ok(None);
    };
    let (first, headers, body_at) = head?;
    let parts: Vec<&str> = first.split(' ').collect();
    let [method, path, version] = parts[..] else {
        return Err(format!("bad request line {first:?}"));
    };
    if !is_token(method) || path.is_empty() || !version.starts_with("HTTP/1.") {
        return Err(format!("bad request line {first:?}"));
    }
    let len = match find_header(&headers, "content-length") {
        Some(v) => v.parse::<usize>().map_err(|_| format!("bad Content-Length {v:?}"))?,
        None => 0,
    };
    if buf.len() < body_at + len {
        return Ok(None);
    }
    let req = ParsedRequest {
        method: method.to_owned(),
        path: path.to_owned(),
        headers,
        body: buf[body_at..body_at + len].to_vec(),
    };
    Ok(Some((req, body_at + len)))
}

/// A complete response with Content-Length framing.
pub fn write_response(status: u16, reason: &str, headers: &[(&str, &str)], body: &[u8]) -> Vec<u8> {
    let mut out = format!("HTTP/1.1 {status} {reason}\r\n").into_bytes();
    for (k, v) in headers {
        out.extend_from_slice(format!("{k}: {v}\r\n").as_bytes());
    }
    out.extend_from_slice(format!("Content-Length: {}\r\nConnection: close\r\n\r\n", body.len()).as_bytes());
    out.extend_from_slice(body);
    out
}

/// Encodes `body` as chunks of the given sizes, cycling through `sizes`.
pub fn encode_chunked(body: &[u8], sizes: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(body.len() + 16);
    let mut rest = body;
    let mut i = 0;
    while !rest.is_empty() {
        let n = sizes.get(i % sizes.len().max(1)).copied().unwrap_or(rest.len()).clamp(1, rest.len());
        out.extend_from_slice(format!("{n:x}\r\n").as_bytes());
        out.extend_from_slice(&rest[..n]);
        out.extend_from_slice(b"\r\n");
        rest = &rest[n..];
        i += 1;
    }
    out.extend_from_slice(b"0\r\n\r\n");
    out
}

impl KernelHandle {
    /// Sends `req` to whatever guest listens on `req.port` and parses the
    /// reply once the server closes its end.
    pub fn http_request(&self, req: &HttpRequest) -> Result<HttpResponse, HttpError> {
        let bytes = req.serialize()?;
        let raw = self.socket_exchange(req.port, bytes).map_err(HttpError::Sys)?;
        parse_response(&raw)
    }
}
