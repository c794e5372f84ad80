//! env, printenv, sleep, true, false and xargs.

use std::time::{Duration, Instant};

use getopts::Options;
use sandboxd_core::abi::{shell_status, wifexited};
use sandboxd_core::guest::Guest;

use super::files::parse_or_return;
use crate::rt::{parse_count, spawn_command, Input, Tool};

pub fn true_(_: &mut Guest) -> i32 {
    0
}

pub fn false_(_: &mut Guest) -> i32 {
    1
}

/// env [-i] [-u NAME]... [NAME=VALUE]... [COMMAND [ARG]...]
pub fn env(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "env");
    let mut o = Tool::options_stop_at_operand();
    o.optflag("i", "", "start with an empty environment");
    o.optmulti("u", "", "remove variable from the environment", "NAME");
    let m = parse_or_return!(t, o, "[-i] [-u NAME] [NAME=VALUE]... [COMMAND [ARG]...]", 125);
    let mut vars = if m.opt_present("i") { Default::default() } else { t.g.environ().clone() };
    for name in m.opt_strs("u") {
        vars.remove(&name);
    }
    let mut rest = m.free.as_slice();
    while let Some((k, v)) = rest.first().and_then(|a| a.split_once('=')) {
        vars.insert(k.to_owned(), v.to_owned());
        rest = &rest[1..];
    }
    if rest.is_empty() {
        let text: String = vars.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        t.out(text.as_bytes());
        return 0;
    }
    t.flush();
    let pid = match spawn_command(&mut t, rest, &vars, &[(0, 0), (1, 1), (2, 2)]) {
        Ok(p) => p,
        Err(code) => return code,
    };
    match t.g.waitpid(pid as i32) {
        Ok(status) => shell_status(status),
        Err(e) => {
            t.warn(e.message());
            125
        }
    }
}

/// printenv [NAME]...
pub fn printenv(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "printenv");
    let o = Options::new();
    let m = parse_or_return!(t, o, "[NAME]...", 2);
    if m.free.is_empty() {
        let text: String = t.g.environ().iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        t.out(text.as_bytes());
        return 0;
    }
    let mut status = 0;
    for name in &m.free {
        match t.g.env(name).map(str::to_owned) {
            Some(v) => {
                t.out(format!("{v}\n").as_bytes());
            }
            None => status = 1,
        }
    }
    status
}

/// Seconds with an optional s/m/h/d suffix.
fn parse_duration(arg: &str) -> Option<Duration> {
    let (num, mult) = match arg.chars().last()? {
        's' => (&arg[..arg.len() - 1], 1.0),
        'm' => (&arg[..arg.len() - 1], 60.0),
        'h' => (&arg[..arg.len() - 1], 3600.0),
        'd' => (&arg[..arg.len() - 1], 86400.0),
        _ => (arg, 1.0),
    };
    let secs: f64 = num.parse().ok()?;
    (secs.is_finite() && secs >= 0.0).then(|| Duration::from_secs_f64(secs * mult))
}

/// sleep NUMBER[smhd]...: total of all operands.
pub fn sleep(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "sleep");
    let o = Options::new();
    let m = parse_or_return!(t, o, "NUMBER[smhd]...", 1);
    if m.free.is_empty() {
        t.warn("missing operand");
        return 1;
    }
    let mut total = Duration::ZERO;
    for a in &m.free {
        match parse_duration(a) {
            Some(d) => total += d,
            None => {
                t.warn(format_args!("invalid time interval '{a}'"));
                return 1;
            }
        }
    }
    // Sleep in slices so a kill is noticed promptly.
    let end = Instant::now() + total;
    while !t.g.is_killed() {
        let now = Instant::now();
        if now >= end {
            break;
        }
        std::thread::sleep((end - now).min(Duration::from_millis(20)));
    }
    0
}

/// Splits xargs input into arguments: blanks separate, quotes group,
/// backslash escapes the next byte.
pub fn xargs_tokens(input: &str) -> Result<Vec<String>, String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut have = false;
    let mut chars = input.chars();
    while let Some(c) = chars.next() {
        match c {
            ' ' | '\t' | '\n' => {
                if have {
                    out.push(std::mem::take(&mut cur));
                    have = false;
                }
            }
            '\'' | '"' => {
                have = true;
                loop {
                    match chars.next() {
                        Some(q) if q == c => break,
                        Some('\n') | None => {
                            let kind = if c == '\'' { "single" } else { "double" };
                            return Err(format!("unmatched {kind} quote"));
                        }
                        Some(other) => cur.push(other),
                    }
                }
            }
            '\\' => {
                have = true;
                if let Some(n) = chars.next() {
                    cur.push(n);
                }
            }
            other => {
                have = true;
                cur.push(other);
            }
        }
    }
    if have {
        out.push(cur);
    }
    Ok(out)
}

/// xargs [-r] [-n MAX] [COMMAND [ARG]...]: runs COMMAND (default echo)
/// with arguments read from stdin.
pub fn xargs(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "xargs");
    let mut o = Tool::options_stop_at_operand();
    o.optopt("n", "", "use at most MAX arguments per command line", "MAX");
    o.optflag("r", "", "do not run COMMAND when there is no input");
    let m = parse_or_return!(t, o, "[-r] [-n MAX] [COMMAND [ARG]...]", 1);
    let max = match m.opt_str("n").map(|n| parse_count(&n).filter(|v| *v > 0).ok_or(n)) {
        None => usize::MAX,
        Some(Ok(n)) => n as usize,
        Some(Err(n)) => {
            t.warn(format_args!("invalid number \"{n}\" for -n option"));
            return 1;
        }
    };
    let base = if m.free.is_empty() { vec!["echo".to_owned()] } else { m.free.clone() };
    let mut stdin = Input::stdin();
    let raw = match stdin.read_all(t.g) {
        Ok(d) => d,
        Err(e) => {
            t.warn(e.message());
            return 1;
        }
    };
    let args = match xargs_tokens(&String::from_utf8_lossy(&raw)) {
        Ok(a) => a,
        Err(e) => {
            t.warn(e);
            return 1;
        }
    };
    if args.is_empty() && m.opt_present("r") {
        return 0;
    }
    let batches: Vec<&[String]> = if args.is_empty() { vec![&[]] } else { args.chunks(max).collect() };
    let env = t.g.environ().clone();
    t.flush();
    let mut status = 0;
    for batch in batches {
        let mut argv = base.clone();
        argv.extend_from_slice(batch);
        let pid = match spawn_command(&mut t, &argv, &env, &[(1, 1), (2, 2)]) {
            Ok(p) => p,
            Err(code) => return code,
        };
        let raw = match t.g.waitpid(pid as i32) {
            Ok(s) => s,
            Err(e) => {
                t.warn(e.message());
                return 1;
            }
        };
        match (wifexited(raw), shell_status(raw)) {
            (true, 0) => {}
            (true, 255) => {
                t.warn(format_args!("{}: exited with status 255; aborting", argv[0]));
                return 124;
            }
            (true, _) => status = 123,
            (false, s) => {
                t.warn(format_args!("{}: terminated by signal {}", argv[0], s - 128));
                return 125;
            }
        }
    }
    status
}
