//! Plumbing shared by the utilities: diagnostics, option parsing, streamed
//! input and command lookup.

use std::collections::BTreeMap;
use std::fmt::Display;

use getopts::{Matches, Options, ParsingStyle};
use sandboxd_core::abi::{O_RDONLY, X_OK};
use sandboxd_core::guest::Guest;
use sandboxd_core::worker::environ_to_pairs;
use sandboxd_core::{Errno, SysResult};

pub const DEFAULT_PATH: &str = "/usr/bin:/bin";
const CHUNK: usize = 64 * 1024;

/// One running utility: its guest and the name used in diagnostics.
pub struct Tool<'g> {
    pub g: &'g mut Guest,
    pub name: &'static str,
    /// Set once stdout refuses writes; streaming loops stop on it.
    pub broken: bool,
}

impl<'g> Tool<'g> {
    pub fn new(g: &'g mut Guest, name: &'static str) -> Self {
        Tool { g, name, broken: false }
    }

    /// Parses argv[1..]. `--help` prints usage and yields `Err(0)`; a bad
    /// option prints a diagnostic and yields `Err(usage_status)`.
    pub fn parse(&mut self, opts: &Options, brief: &str, usage_status: i32) -> Result<Matches, i32> {
        let args: Vec<String> = self.g.argv().iter().skip(1).cloned().collect();
        if args.iter().take_while(|a| *a != "--").any(|a| a == "--help") {
            let text = opts.usage(&format!("Usage: {} {brief}", self.name));
            self.out(text.as_bytes());
            self.out(b"\n");
            return Err(0);
        }
        match opts.parse(&args) {
            Ok(m) => Ok(m),
            Err(e) => {
                self.warn(e);
                let name = self.name;
                self.warn(format_args!("Try '{name} --help' for more information."));
                Err(usage_status)
            }
        }
    }

    /// Options for tools whose operands may themselves look like flags.
    pub fn options_stop_at_operand() -> Options {
        let mut o = Options::new();
        o.parsing_style(ParsingStyle::StopAtFirstFree);
        o
    }

    /// `name: msg` on stderr.
    pub fn warn(&mut self, msg: impl Display) {
        let line = format!("{}: {msg}\n", self.name);
        let _ = self.g.print(2, line.as_bytes());
    }

    /// `name: what 'path': reason` on stderr.
    pub fn warn_path(&mut self, what: &str, path: &str, e: Errno) {
        if what.is_empty() {
            self.warn(format_args!("{path}: {}", e.message()));
        } else {
            self.warn(format_args!("{what} '{path}': {}", e.message()));
        }
    }

    /// Buffered stdout; false once the reader is gone.
    pub fn out(&mut self, data: &[u8]) -> bool {
        if !self.broken && self.g.print(1, data).is_err() {
            self.broken = true;
        }
        !self.broken
    }

    pub fn flush(&mut self) -> bool {
        if !self.broken && self.g.flush().is_err() {
            self.broken = true;
        }
        !self.broken
    }

    pub fn open_input(&mut self, path: &str) -> SysResult<Input> {
        if path == "-" {
            return Ok(Input::stdin());
        }
        let fd = self.g.open(path, O_RDONLY, 0)?;
        match self.g.fstat(fd) {
            Ok(st) if st.is_dir() => {
                let _ = self.g.close(fd);
                Err(Errno::EISDIR)
            }
            _ => Ok(Input { fd, owned: true, buf: Vec::new(), pos: 0, eof: false }),
        }
    }

    /// Whole contents of `path` (`-` is stdin).
    pub fn slurp(&mut self, path: &str) -> SysResult<Vec<u8>> {
        let mut input = self.open_input(path)?;
        let r = input.read_all(self.g);
        input.close(self.g);
        r
    }
}

/// A buffered reader over a guest fd.
pub struct Input {
    fd: i32,
    owned: bool,
    buf: Vec<u8>,
    pos: usize,
    eof: bool,
}

impl Input {
    pub fn stdin() -> Self {
        Input { fd: 0, owned: false, buf: Vec::new(), pos: 0, eof: false }
    }

    pub fn fd(&self) -> i32 {
        self.fd
    }

    fn fill(&mut self, g: &mut Guest) -> SysResult<bool> {
        if self.eof {
            return Ok(false);
        }
        let data = loop {
            match g.read(self.fd, CHUNK) {
                Err(Errno::EINTR) => continue,
                r => break r?,
            }
        };
        if data.is_empty() {
            self.eof = true;
            return Ok(false);
        }
        self.buf.drain(..self.pos);
        self.pos = 0;
        self.buf.extend_from_slice(&data);
        Ok(true)
    }

    /// Next chunk as it arrives; `None` at end of input.
    pub fn chunk(&mut self, g: &mut Guest) -> SysResult<Option<Vec<u8>>> {
        if self.pos < self.buf.len() {
            let rest = self.buf.split_off(self.pos);
            self.buf.clear();
            self.pos = 0;
            return Ok(Some(rest));
        }
        if !self.fill(g)? {
            return Ok(None);
        }
        self.pos = self.buf.len();
        Ok(Some(self.buf.clone()))
    }

    /// Next line including its newline, if any. `None` at end of input.
    pub fn line(&mut self, g: &mut Guest) -> SysResult<Option<Vec<u8>>> {
        loop {
            if let Some(i) = self.buf[self.pos..].iter().position(|&b| b == b'\n') {
                let line = self.buf[self.pos..self.pos + i + 1].to_vec();
                self.pos += i + 1;
                return Ok(Some(line));
            }
            if !self.fill(g)? {
                if self.pos < self.buf.len() {
                    let line = self.buf[self.pos..].to_vec();
                    self.pos = self.buf.len();
                    return Ok(Some(line));
                }
                return Ok(None);
            }
        }
    }

    pub fn read_all(&mut self, g: &mut Guest) -> SysResult<Vec<u8>> {
        while self.fill(g)? {}
        Ok(self.buf.split_off(self.pos))
    }

    pub fn close(self, g: &mut Guest) {
        if self.owned {
            let _ = g.close(self.fd);
        }
    }
}

/// Splits into lines, each keeping its terminator; a final unterminated
/// line is kept as is.
pub fn split_lines(data: &[u8]) -> Vec<&[u8]> {
    data.split_inclusive(|&b| b == b'\n').collect()
}

/// Line content without its newline.
pub fn chomp(line: &[u8]) -> &[u8] {
    line.strip_suffix(b"\n").unwrap_or(line)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LookupError {
    NotFound,
    NotExecutable,
}

impl LookupError {
    /// Exit status a shell reports for the failure.
    pub fn status(self) -> i32 {
        match self {
            LookupError::NotFound => 127,
            LookupError::NotExecutable => 126,
        }
    }
}

/// Resolves a command name through `PATH`; names containing `/` are used as given.
pub fn find_command(g: &mut Guest, name: &str, path_var: Option<&str>) -> Result<String, LookupError> {
    let check = |g: &mut Guest, p: &str| match g.stat(p) {
        Ok(st) if st.is_dir() => Err(LookupError::NotExecutable),
        Ok(_) => g.access(p, X_OK).map_err(|_| LookupError::NotExecutable),
        Err(_) => Err(LookupError::NotFound),
    };
    if name.contains('/') {
        return check(g, name).map(|_| name.to_owned());
    }
    if name.is_empty() {
        return Err(LookupError::NotFound);
    }
    let mut best = LookupError::NotFound;
    for dir in path_var.unwrap_or(DEFAULT_PATH).split(':') {
        let dir = if dir.is_empty() { "." } else { dir };
        let cand = format!("{}/{name}", dir.trim_end_matches('/'));
        match check(g, &cand) {
            Ok(()) => return Ok(cand),
            Err(LookupError::NotExecutable) => best = LookupError::NotExecutable,
            Err(LookupError::NotFound) => {}
        }
    }
    Err(best)
}

/// Looks `argv[0]` up in `PATH` and starts it with `env` and the given fd
/// grants. Reports lookup failures as `name: not found`-style diagnostics.
pub fn spawn_command(
    t: &mut Tool,
    argv: &[String],
    env: &BTreeMap<String, String>,
    grants: &[(i32, i32)],
) -> Result<u32, i32> {
    let path = match find_command(t.g, &argv[0], env.get("PATH").map(String::as_str)) {
        Ok(p) => p,
        Err(e) => {
            t.warn_path("", &argv[0], if e == LookupError::NotFound { Errno::ENOENT } else { Errno::EACCES });
            return Err(e.status());
        }
    };
    t.g.spawn(&path, argv, &environ_to_pairs(env), grants).map_err(|e| {
        t.warn_path("", &argv[0], e);
        if e == Errno::ENOENT {
            127
        } else {
            126
        }
    })
}

/// Joins a directory and a name without doubling the separator.
pub fn join_path(dir: &str, name: &str) -> String {
    if dir.ends_with('/') {
        format!("{dir}{name}")
    } else {
        format!("{dir}/{name}")
    }
}

/// Final path component, ignoring trailing slashes.
pub fn base_name(path: &str) -> &str {
    let t = path.trim_end_matches('/');
    if t.is_empty() {
        return "/";
    }
    t.rsplit('/').next().unwrap_or(t)
}

/// Parses a non-negative count the way the utilities accept them.
pub fn parse_count(s: &str) -> Option<u64> {
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}
