//! A small dash-like shell.
//!
//! Grammar: words with `'single'`, `"double"` and backslash quoting, `$NAME`,
//! `${NAME}`, `$?`, `$$`, `$!`, `$#` and `$0`..`$9` expansion, `NAME=value`
//! prefixes, redirections `<`, `>`, `>>`, `N>`, `N>>`, `N<`, `N>&M` for fds
//! 0 to 2, pipelines with `|`, `&&` and `||` lists, `;` and `&` separators,
//! and `#` comments. There are no functions, subshells, globbing or command
//! substitution; a backgrounded list with `&&` or `||` runs in a child shell.
//!
//! Builtins: `cd`, `pwd`, `exit`, `export`, `unset`, `wait`, `:`.
//!
//! Statuses: 127 for an unknown command, 126 when it cannot be executed,
//! 2 for syntax and redirection errors, 128+N for death by signal N.

pub mod ast;
pub mod parse;

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::rc::Rc;

use sandboxd_core::abi::{shell_status, Signal, O_APPEND, O_CREAT, O_RDONLY, O_TRUNC, O_WRONLY, WNOHANG};
use sandboxd_core::guest::Guest;
use sandboxd_core::worker::environ_to_pairs;
use sandboxd_core::Errno;

pub use ast::{unparse, Script};
pub use parse::{parse, ParseError};

use ast::*;

use crate::rt::{find_command, LookupError};

pub const SYNTAX_STATUS: i32 = 2;
pub const NOT_FOUND_STATUS: i32 = 127;
/// Reaped job statuses kept for a later `wait PID`.
const MAX_FINISHED: usize = 256;

#[derive(Default)]
struct Flags {
    child: Cell<bool>,
    interrupt: Cell<bool>,
}

struct Shell {
    vars: BTreeMap<String, String>,
    exported: BTreeSet<String>,
    /// `$0` then positional parameters.
    args: Vec<String>,
    status: i32,
    last_bg: Option<u32>,
    jobs: Vec<u32>,
    /// Statuses of reaped jobs not yet collected by `wait PID`, oldest first.
    finished: VecDeque<(u32, i32)>,
    interactive: bool,
    lineno: usize,
    exit: Option<i32>,
    flags: Rc<Flags>,
}

fn builtin(name: &str) -> bool {
    matches!(name, "cd" | "pwd" | "exit" | "export" | "unset" | "wait" | ":")
}

impl Shell {
    fn new(g: &Guest, args: Vec<String>, interactive: bool) -> Self {
        let vars = g.environ().clone();
        let exported = vars.keys().cloned().collect();
        Shell {
            vars,
            exported,
            args,
            status: 0,
            last_bg: None,
            jobs: Vec::new(),
            finished: VecDeque::new(),
            interactive,
            lineno: 0,
            exit: None,
            flags: Rc::new(Flags::default()),
        }
    }

    fn warn(&self, g: &mut Guest, msg: &str) {
        let name = self.args.first().map(String::as_str).unwrap_or("sh");
        let line = if self.interactive { format!("{name}: {msg}\n") } else { format!("{name}: {}: {msg}\n", self.lineno.max(1)) };
        let _ = g.write_all(2, line.as_bytes());
    }

    fn param(&self, g: &mut Guest, name: &str) -> Option<String> {
        match name {
            "?" => Some(self.status.to_string()),
            "$" => Some(g.getpid().to_string()),
            "!" => self.last_bg.map(|p| p.to_string()),
            "#" => Some(self.args.len().saturating_sub(1).to_string()),
            d if d.len() == 1 && d.as_bytes()[0].is_ascii_digit() => self.args.get(usize::from(d.as_bytes()[0] - b'0')).cloned(),
            _ => self.vars.get(name).cloned(),
        }
    }

    /// Field-splits unquoted expansions on blanks.
    fn expand_fields(&self, g: &mut Guest, w: &Word) -> Vec<String> {
        let mut fields = Vec::new();
        let mut cur = String::new();
        let mut have = false;
        for part in &w.0 {
            match part {
                Part::Lit { text, .. } => {
                    cur.push_str(text);
                    have = true;
                }
                Part::Param { name, quoted: true } => {
                    cur.push_str(&self.param(g, name).unwrap_or_default());
                    have = true;
                }
                Part::Param { name, quoted: false } => {
                    let value = self.param(g, name).unwrap_or_default();
                    let mut pieces = value.split([' ', '\t', '\n']).peekable();
                    let mut first = true;
                    while let Some(piece) = pieces.next() {
                        if !first && have {
                            fields.push(std::mem::take(&mut cur));
                            have = false;
                        }
                        first = false;
                        if !piece.is_empty() {
                            cur.push_str(piece);
                            have = true;
                        }
                        if pieces.peek().is_none() {
                            break;
                        }
                    }
                }
            }
        }
        if have {
            fields.push(cur);
        }
        fields
    }

    /// One string, no splitting: assignment values and redirection targets.
    fn expand_one(&self, g: &mut Guest, w: &Word) -> String {
        let mut s = String::new();
        for part in &w.0 {
            match part {
                Part::Lit { text, .. } => s.push_str(text),
                Part::Param { name, .. } => s.push_str(&self.param(g, name).unwrap_or_default()),
            }
        }
        s
    }

    fn child_env(&self, extra: &[(String, String)]) -> BTreeMap<String, String> {
        let mut env: BTreeMap<String, String> =
            self.exported.iter().filter_map(|k| self.vars.get(k).map(|v| (k.clone(), v.clone()))).collect();
        env.extend(extra.iter().cloned());
        env
    }

    fn set_var(&mut self, k: &str, v: String) {
        self.vars.insert(k.to_owned(), v);
    }

    /// Collects finished background jobs without blocking.
    fn reap_jobs(&mut self, g: &mut Guest) {
        self.flags.child.set(false);
        let mut done = Vec::new();
        self.jobs.retain(|&pid| match g.wait4(pid as i32, WNOHANG) {
            Ok((p, raw)) if p == pid => {
                done.push((pid, shell_status(raw)));
                false
            }
            Ok(_) => true,
            Err(e) => e == Errno::EINTR,
        });
        for job in done {
            if self.finished.len() == MAX_FINISHED {
                self.finished.pop_front();
            }
            self.finished.push_back(job);
        }
    }

    /// Waits for `pid`, forwarding SIGINT to `group` while blocked.
    fn wait_child(&mut self, g: &mut Guest, pid: u32, group: &[u32]) -> i32 {
        loop {
            match g.wait4(pid as i32, 0) {
                Ok((_, raw)) => return shell_status(raw),
                Err(Errno::EINTR) => {
                    if self.flags.interrupt.replace(false) {
                        for &p in group {
                            let _ = g.kill(p as i32, Signal::SIGINT);
                        }
                    }
                }
                Err(_) => return 0,
            }
        }
    }

    fn run_script(&mut self, g: &mut Guest, script: &Script) {
        for job in &script.jobs {
            if self.exit.is_some() {
                return;
            }
            if job.background {
                self.background(g, &job.list);
            } else {
                self.status = self.and_or(g, &job.list);
            }
            if self.flags.child.get() {
                self.reap_jobs(g);
            }
        }
    }

    fn background(&mut self, g: &mut Guest, list: &AndOr) {
        let pid = if list.rest.is_empty() {
            self.pipeline(g, &list.first, true)
        } else {
            // A child shell runs the whole list.
            let text = list.to_string();
            let cmd = Command {
                assignments: Vec::new(),
                words: ["/bin/sh", "-c", text.as_str()]
                    .iter()
                    .map(|s| Word(vec![Part::Lit { text: (*s).to_owned(), quoted: true }]))
                    .collect(),
                redirs: Vec::new(),
            };
            self.pipeline(g, &Pipeline { commands: vec![cmd] }, true)
        };
        self.status = 0;
        if pid > 0 {
            self.last_bg = Some(pid as u32);
            self.jobs.push(pid as u32);
        }
    }

    fn and_or(&mut self, g: &mut Guest, list: &AndOr) -> i32 {
        let mut status = self.pipeline(g, &list.first, false);
        for (conn, p) in &list.rest {
            if self.exit.is_some() {
                break;
            }
            let run = match conn {
                Connector::And => status == 0,
                Connector::Or => status != 0,
            };
            if run {
                self.status = status;
                status = self.pipeline(g, p, false);
            }
        }
        status
    }

    /// Runs a pipeline. In the background, returns the last pid (0 when
    /// nothing was started); otherwise the pipeline's status.
    fn pipeline(&mut self, g: &mut Guest, p: &Pipeline, background: bool) -> i32 {
        let n = p.commands.len();
        if n == 1 && !background {
            let cmd = &p.commands[0];
            if let Some(name) = cmd.words.first().map(|w| self.expand_fields(g, w)).and_then(|f| f.into_iter().next()) {
                if builtin(&name) {
                    return self.run_builtin(g, cmd);
                }
            }
        }
        let mut pids = Vec::new();
        let mut last_status = 0;
        let mut prev_read: Option<i32> = None;
        for (i, cmd) in p.commands.iter().enumerate() {
            let (next_read, write) = if i + 1 < n {
                match g.pipe() {
                    Ok((r, w)) => (Some(r), Some(w)),
                    Err(e) => {
                        self.warn(g, &format!("pipe: {}", e.message()));
                        last_status = SYNTAX_STATUS;
                        break;
                    }
                }
            } else {
                (None, None)
            };
            // Background jobs read from an empty pipe instead of the terminal.
            let mut quiet_stdin = None;
            let stdin = match prev_read {
                Some(fd) => fd,
                None if background => match g.pipe() {
                    Ok((r, w)) => {
                        let _ = g.close(w);
                        quiet_stdin = Some(r);
                        r
                    }
                    Err(_) => 0,
                },
                None => 0,
            };
            let stdio = [stdin, write.unwrap_or(1), 2];
            match self.spawn_command(g, cmd, stdio) {
                Ok(pid) => pids.push(pid),
                Err(status) => {
                    if i + 1 == n {
                        last_status = status;
                    }
                }
            }
            for fd in [prev_read, write, quiet_stdin].into_iter().flatten() {
                let _ = g.close(fd);
            }
            prev_read = next_read;
        }
        if let Some(fd) = prev_read {
            let _ = g.close(fd);
        }
        if background {
            return pids.last().map(|&p| p as i32).unwrap_or(0);
        }
        let last_spawned = p.commands.len() == pids.len();
        let mut status = last_status;
        for (i, &pid) in pids.iter().enumerate() {
            let s = self.wait_child(g, pid, &pids);
            if i + 1 == pids.len() && last_spawned {
                status = s;
            }
        }
        if self.interactive && status == 128 + Signal::SIGINT.0 as i32 {
            let _ = g.write_all(2, b"\n");
        }
        status
    }

    /// Opens redirections; returns the child's fds 0..2 and the opened fds.
    fn redirect(&self, g: &mut Guest, redirs: &[Redir], mut stdio: [i32; 3]) -> Result<([i32; 3], Vec<i32>), i32> {
        let mut opened = Vec::new();
        for r in redirs {
            match r {
                Redir::File { fd, mode, path } => {
                    let target = self.expand_one(g, path);
                    let flags = match mode {
                        FileMode::Read => O_RDONLY,
                        FileMode::Write => O_WRONLY | O_CREAT | O_TRUNC,
                        FileMode::Append => O_WRONLY | O_CREAT | O_APPEND,
                    };
                    match g.open(&target, flags, 0o644) {
                        Ok(f) => {
                            opened.push(f);
                            stdio[usize::from(*fd)] = f;
                        }
                        Err(e) => {
                            let what = if *mode == FileMode::Read { "cannot open" } else { "cannot create" };
                            self.warn(g, &format!("{what} {target}: {}", e.message()));
                            for f in opened {
                                let _ = g.close(f);
                            }
                            return Err(SYNTAX_STATUS);
                        }
                    }
                }
                Redir::Dup { fd, to } => stdio[usize::from(*fd)] = stdio[usize::from(*to)],
            }
        }
        Ok((stdio, opened))
    }

    /// Starts one command with the given stdio. `Err` carries the status of
    /// a command that did not start (or only assigned/redirected).
    fn spawn_command(&mut self, g: &mut Guest, cmd: &Command, stdio: [i32; 3]) -> Result<u32, i32> {
        let argv: Vec<String> = cmd.words.iter().flat_map(|w| self.expand_fields(g, w)).collect();
        let assigns: Vec<(String, String)> = cmd.assignments.iter().map(|(k, v)| (k.clone(), self.expand_one(g, v))).collect();
        let (stdio, opened) = self.redirect(g, &cmd.redirs, stdio)?;
        let close_all = |g: &mut Guest| {
            for f in &opened {
                let _ = g.close(*f);
            }
        };
        if argv.is_empty() {
            close_all(g);
            for (k, v) in assigns {
                self.set_var(&k, v);
            }
            return Err(0);
        }
        if builtin(&argv[0]) {
            // Builtins inside pipelines run as if in a subshell: no effects.
            close_all(g);
            return Err(0);
        }
        let env = self.child_env(&assigns);
        let path = match find_command(g, &argv[0], env.get("PATH").map(String::as_str)) {
            Ok(p) => p,
            Err(e) => {
                close_all(g);
                let why = if e == LookupError::NotFound { "not found" } else { "Permission denied" };
                self.warn(g, &format!("{}: {why}", argv[0]));
                return Err(e.status());
            }
        };
        let grants: Vec<(i32, i32)> = (0..3).map(|i| (i, stdio[i as usize])).collect();
        let r = g.spawn(&path, &argv, &environ_to_pairs(&env), &grants);
        close_all(g);
        r.map_err(|e| {
            self.warn(g, &format!("{}: {}", argv[0], e.message()));
            if e == Errno::ENOENT {
                NOT_FOUND_STATUS
            } else {
                126
            }
        })
    }

    fn run_builtin(&mut self, g: &mut Guest, cmd: &Command) -> i32 {
        let argv: Vec<String> = cmd.words.iter().flat_map(|w| self.expand_fields(g, w)).collect();
        let (stdio, opened) = match self.redirect(g, &cmd.redirs, [0, 1, 2]) {
            Ok(x) => x,
            Err(s) => return s,
        };
        let mut out = String::new();
        let status = match argv[0].as_str() {
            ":" => 0,
            "cd" => {
                let target = match argv.get(1).map(String::as_str) {
                    Some("-") => self.vars.get("OLDPWD").cloned().unwrap_or_else(|| "/".into()),
                    Some(d) => d.to_owned(),
                    None => self.vars.get("HOME").cloned().unwrap_or_else(|| "/".into()),
                };
                match g.chdir(&target) {
                    Ok(()) => {
                        let old = self.vars.get("PWD").cloned();
                        if let Ok(cwd) = g.getcwd() {
                            self.set_var("PWD", cwd);
                        }
                        if let Some(old) = old {
                            self.set_var("OLDPWD", old);
                        }
                        0
                    }
                    Err(_) => {
                        self.warn(g, &format!("cd: can't cd to {target}"));
                        2
                    }
                }
            }
            "pwd" => match g.getcwd() {
                Ok(cwd) => {
                    out = format!("{cwd}\n");
                    0
                }
                Err(e) => {
                    self.warn(g, &format!("pwd: {}", e.message()));
                    1
                }
            },
            "exit" => match argv.get(1).map(|a| a.parse::<i32>()) {
                None => {
                    self.exit = Some(self.status);
                    self.status
                }
                Some(Ok(n)) => {
                    self.exit = Some(n & 0xff);
                    n & 0xff
                }
                Some(Err(_)) => {
                    self.warn(g, &format!("exit: Illegal number: {}", argv[1]));
                    self.exit = Some(2);
                    2
                }
            },
            "export" => {
                if argv.len() == 1 {
                    for k in &self.exported {
                        if let Some(v) = self.vars.get(k) {
                            out.push_str(&format!("export {k}='{}'\n", v.replace('\'', "'\\''")));
                        }
                    }
                }
                let mut status = 0;
                for a in &argv[1..] {
                    let (k, v) = match a.split_once('=') {
                        Some((k, v)) => (k, Some(v.to_owned())),
                        None => (a.as_str(), None),
                    };
                    if !is_name(k) {
                        self.warn(g, &format!("export: {a}: bad variable name"));
                        status = 2;
                        continue;
                    }
                    if let Some(v) = v {
                        self.set_var(k, v);
                    }
                    self.exported.insert(k.to_owned());
                }
                status
            }
            "unset" => {
                for k in &argv[1..] {
                    self.vars.remove(k);
                    self.exported.remove(k);
                }
                0
            }
            "wait" => {
                if argv.len() == 1 {
                    for pid in std::mem::take(&mut self.jobs) {
                        self.wait_child(g, pid, &[pid]);
                    }
                    self.finished.clear();
                    0
                } else {
                    let mut status = 0;
                    for arg in &argv[1..] {
                        let Ok(pid) = arg.parse::<u32>() else {
                            self.warn(g, &format!("wait: illegal pid: {arg}"));
                            status = 2;
                            continue;
                        };
                        status = if self.jobs.contains(&pid) {
                            self.jobs.retain(|&p| p != pid);
                            self.wait_child(g, pid, &[pid])
                        } else if let Some(i) = self.finished.iter().position(|&(p, _)| p == pid) {
                            self.finished.remove(i).unwrap().1
                        } else {
                            NOT_FOUND_STATUS
                        };
                    }
                    status
                }
            }
            _ => unreachable!("not a builtin"),
        };
        if !out.is_empty() {
            let _ = g.write_all(stdio[1], out.as_bytes());
        }
        for f in opened {
            let _ = g.close(f);
        }
        status
    }

    /// Runs complete lines from `pending`; leaves an unfinished tail there.
    /// Returns false once the shell should stop reading input.
    fn feed(&mut self, g: &mut Guest, pending: &mut String, at_eof: bool) -> bool {
        if pending.is_empty() {
            return self.exit.is_none();
        }
        match parse(pending) {
            Ok(script) => {
                let lines = pending.matches('\n').count();
                pending.clear();
                self.lineno += 1;
                self.run_script(g, &script);
                self.lineno += lines.saturating_sub(1);
            }
            Err(ParseError::Incomplete) if !at_eof => return true,
            Err(e) => {
                self.lineno += 1;
                let msg = match e {
                    ParseError::Incomplete => "Syntax error: end of file unexpected".to_owned(),
                    ParseError::Syntax(m) => format!("Syntax error: {m}"),
                };
                self.warn(g, &msg);
                pending.clear();
                self.status = SYNTAX_STATUS;
                if !self.interactive {
                    self.exit = Some(SYNTAX_STATUS);
                }
            }
        }
        self.exit.is_none()
    }

    fn prompt(&mut self, g: &mut Guest, continuation: bool) {
        if !self.interactive {
            return;
        }
        let p = if continuation { "> ".to_owned() } else { format!("{}$ ", g.getcwd().unwrap_or_else(|_| "?".into())) };
        let _ = g.write_all(2, p.as_bytes());
    }

    /// Reads commands from stdin line by line.
    fn repl(&mut self, g: &mut Guest) {
        let mut pending = String::new();
        let mut buf: Vec<u8> = Vec::new();
        self.prompt(g, false);
        loop {
            if self.flags.child.get() {
                self.reap_jobs(g);
            }
            if let Some(i) = buf.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = buf.drain(..=i).collect();
                pending.push_str(&String::from_utf8_lossy(&line));
                if !self.feed(g, &mut pending, false) {
                    return;
                }
                self.prompt(g, !pending.is_empty());
                continue;
            }
            match g.read(0, 4096) {
                Ok(data) if data.is_empty() => {
                    pending.push_str(&String::from_utf8_lossy(&buf));
                    if !pending.is_empty() && !pending.ends_with('\n') {
                        pending.push('\n');
                    }
                    self.feed(g, &mut pending, true);
                    if self.interactive && self.exit.is_none() {
                        let _ = g.write_all(2, b"\n");
                    }
                    return;
                }
                Ok(data) => buf.extend_from_slice(&data),
                Err(Errno::EINTR) => {
                    if self.flags.interrupt.replace(false) {
                        buf.clear();
                        pending.clear();
                        self.status = 128 + Signal::SIGINT.0 as i32;
                        let _ = g.write_all(2, b"\n");
                        self.prompt(g, false);
                    }
                }
                Err(e) => {
                    self.warn(g, &format!("read error: {}", e.message()));
                    return;
                }
            }
        }
    }

    fn install_handlers(&self, g: &mut Guest) {
        let f = self.flags.clone();
        let _ = g.on_signal(Signal::SIGCHLD, move |_, _| f.child.set(true));
        if self.interactive {
            let f = self.flags.clone();
            let _ = g.on_signal(Signal::SIGINT, move |_, _| f.interrupt.set(true));
        }
    }
}

/// `sh [-i] [-c COMMAND [NAME [ARG]...] | FILE [ARG]...]`
pub fn main(g: &mut Guest) -> i32 {
    let argv = g.argv().to_vec();
    let mut i = 1;
    let mut interactive = false;
    let mut command = None;
    while let Some(a) = argv.get(i) {
        match a.as_str() {
            "-i" => interactive = true,
            "-c" => {
                let Some(c) = argv.get(i + 1) else {
                    let _ = g.write_all(2, b"sh: -c requires an argument\n");
                    return SYNTAX_STATUS;
                };
                command = Some(c.clone());
                i += 1;
            }
            "--" => {
                i += 1;
                break;
            }
            _ => break,
        }
        i += 1;
    }
    let rest: Vec<String> = argv[i.min(argv.len())..].to_vec();
    let name = argv.first().cloned().unwrap_or_else(|| "sh".into());

    if let Some(cmd) = command {
        let args = if rest.is_empty() { vec![name] } else { rest };
        let mut sh = Shell::new(g, args, false);
        sh.install_handlers(g);
        let mut text = cmd;
        text.push('\n');
        sh.feed(g, &mut text, true);
        return sh.exit.unwrap_or(sh.status);
    }
    if let Some(script) = rest.first() {
        let data = match g.read_file(script) {
            Ok(d) => d,
            Err(e) => {
                let _ = g.write_all(2, format!("{name}: 0: cannot open {script}: {}\n", e.message()).as_bytes());
                return NOT_FOUND_STATUS;
            }
        };
        let mut sh = Shell::new(g, rest.clone(), false);
        sh.install_handlers(g);
        let mut pending = String::new();
        for line in String::from_utf8_lossy(&data).split_inclusive('\n') {
            pending.push_str(line);
            if !sh.feed(g, &mut pending, false) {
                break;
            }
        }
        if sh.exit.is_none() {
            if !pending.is_empty() && !pending.ends_with('\n') {
                pending.push('\n');
            }
            sh.feed(g, &mut pending, true);
        }
        return sh.exit.unwrap_or(sh.status);
    }
    let mut sh = Shell::new(g, vec![name], interactive);
    sh.install_handlers(g);
    sh.repl(g);
    sh.exit.unwrap_or(sh.status)
}
