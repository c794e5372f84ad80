//! grep with basic, extended and fixed-string patterns, byte-oriented as in
//! the C locale.

use getopts::Options;
use regex::bytes::{Regex, RegexBuilder};
use sandboxd_core::guest::Guest;

use super::files::parse_or_return;
use crate::rt::{chomp, Tool};

#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Syntax {
    Basic,
    Extended,
}

/// Copies a bracket expression starting at `chars[i] == '['`; returns the
/// translated class and the index after its closing `]`.
fn bracket(chars: &[char], mut i: usize) -> Result<(String, usize), String> {
    let mut out = String::from("[");
    i += 1;
    if chars.get(i) == Some(&'^') {
        out.push('^');
        i += 1;
    }
    let mut first = true;
    loop {
        let Some(&c) = chars.get(i) else {
            return Err("Unmatched [, [^, [:, [., or [=".into());
        };
        match c {
            ']' if !first => return Ok((out + "]", i + 1)),
            '[' if matches!(chars.get(i + 1), Some(':' | '.' | '=')) => {
                let kind = chars[i + 1];
                let close = (i + 2..chars.len().saturating_sub(1))
                    .find(|&j| chars[j] == kind && chars[j + 1] == ']')
                    .ok_or("Unmatched [, [^, [:, [., or [=")?;
                let name: String = chars[i + 2..close].iter().collect();
                match kind {
                    ':' => out.push_str(&format!("[:{name}:]")),
                    _ => {
                        for ch in name.chars() {
                            out.push_str(&regex::escape(&ch.to_string()));
                        }
                    }
                }
                i = close + 2;
            }
            '\\' | '[' | '&' | '~' | ']' => {
                out.push('\\');
                out.push(c);
                i += 1;
            }
            _ => {
                out.push(c);
                i += 1;
            }
        }
        first = false;
    }
}

/// Translates a POSIX pattern into the regex crate's syntax.
pub fn translate(pattern: &str, syntax: Syntax) -> Result<String, String> {
    let chars: Vec<char> = pattern.chars().collect();
    let mut out = String::new();
    let mut i = 0;
    // True where `*` would be literal and `^` is an anchor.
    let mut at_start = true;
    while i < chars.len() {
        let c = chars[i];
        let start_here = at_start;
        at_start = false;
        match c {
            '[' => {
                let (class, next) = bracket(&chars, i)?;
                out.push_str(&class);
                i = next;
                continue;
            }
            '\\' => {
                let Some(&n) = chars.get(i + 1) else {
                    return Err("Trailing backslash".into());
                };
                i += 2;
                match (syntax, n) {
                    (Syntax::Basic, '(') => {
                        out.push('(');
                        at_start = true;
                    }
                    (Syntax::Basic, ')') => out.push(')'),
                    (Syntax::Basic, '|') => {
                        out.push('|');
                        at_start = true;
                    }
                    (Syntax::Basic, '{') => out.push('{'),
                    (Syntax::Basic, '}') => out.push('}'),
                    (Syntax::Basic, '+' | '?') => out.push(n),
                    (_, '<' | '>') => out.push_str("\\b"),
                    (_, 'w' | 'W' | 's' | 'S' | 'b' | 'B') => {
                        out.push('\\');
                        out.push(n);
                    }
                    (_, d) if d.is_ascii_digit() && d != '0' => return Err("back-references are not supported".into()),
                    (_, other) => out.push_str(&regex::escape(&other.to_string())),
                }
                continue;
            }
            '^' if start_here || syntax == Syntax::Extended => {
                out.push('^');
                at_start = syntax == Syntax::Basic;
            }
            '$' => {
                let at_end = match syntax {
                    Syntax::Extended => true,
                    Syntax::Basic => {
                        let rest = &chars[i + 1..];
                        rest.is_empty() || rest.starts_with(&['\\', ')']) || rest.starts_with(&['\\', '|'])
                    }
                };
                out.push_str(if at_end { "$" } else { "\\$" });
            }
            '*' if start_here => out.push_str("\\*"),
            '*' => out.push('*'),
            '.' => out.push('.'),
            '(' | ')' | '|' | '+' | '?' | '{' | '}' if syntax == Syntax::Extended => {
                out.push(c);
                at_start = matches!(c, '(' | '|');
            }
            other => out.push_str(&regex::escape(&other.to_string())),
        }
        i += 1;
    }
    Ok(out)
}

/// Compiles the pattern list (one pattern per line) into a single matcher.
pub fn compile(patterns: &[String], syntax: Syntax, fixed: bool, icase: bool) -> Result<Regex, String> {
    let mut alts = Vec::new();
    for p in patterns.iter().flat_map(|p| p.split('\n')) {
        alts.push(if fixed { regex::escape(p) } else { translate(p, syntax)? });
    }
    let joined = alts.iter().map(|a| format!("(?:{a})")).collect::<Vec<_>>().join("|");
    RegexBuilder::new(&joined)
        .unicode(false)
        .case_insensitive(icase)
        .build()
        .map_err(|e| e.to_string())
}

/// grep [-EFvicnlqhH] [-e PATTERN]... [PATTERN] [FILE]...
pub fn grep(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "grep");
    let mut o = Options::new();
    o.optflag("E", "", "PATTERNS are extended regular expressions");
    o.optflag("F", "", "PATTERNS are strings");
    o.optflag("G", "", "PATTERNS are basic regular expressions (default)");
    o.optmulti("e", "", "use PATTERNS for matching", "PATTERNS");
    o.optflag("v", "", "select non-matching lines");
    o.optflag("i", "", "ignore case distinctions in patterns and data");
    o.optflag("c", "", "print only a count of selected lines per FILE");
    o.optflag("n", "", "print line number with output lines");
    o.optflag("l", "", "print only names of FILEs with selected lines");
    o.optflag("q", "", "suppress all normal output");
    o.optflag("s", "", "suppress error messages about unreadable files");
    o.optflag("h", "", "suppress the file name prefix on output");
    o.optflag("H", "", "print the file name for each match");
    let m = parse_or_return!(t, o, "[OPTION]... PATTERNS [FILE]...", 2);
    let mut free = m.free.clone();
    let patterns = if m.opt_present("e") {
        m.opt_strs("e")
    } else if free.is_empty() {
        t.warn("no pattern given");
        return 2;
    } else {
        vec![free.remove(0)]
    };
    let syntax = if m.opt_present("E") { Syntax::Extended } else { Syntax::Basic };
    let re = match compile(&patterns, syntax, m.opt_present("F"), m.opt_present("i")) {
        Ok(r) => r,
        Err(e) => {
            t.warn(e);
            return 2;
        }
    };
    let invert = m.opt_present("v");
    let count = m.opt_present("c");
    let numbers = m.opt_present("n");
    let list = m.opt_present("l");
    let quiet = m.opt_present("q");
    let files = if free.is_empty() { vec!["-".to_owned()] } else { free };
    let with_name = !m.opt_present("h") && (m.opt_present("H") || files.len() > 1);

    let mut matched = false;
    let mut error = false;
    'files: for f in &files {
        let shown = if f == "-" { "(standard input)" } else { f.as_str() };
        let mut input = match t.open_input(f) {
            Ok(i) => i,
            Err(e) => {
                if !m.opt_present("s") {
                    t.warn_path("", f, e);
                }
                error = true;
                continue;
            }
        };
        let mut hits = 0u64;
        let mut lineno = 0u64;
        loop {
            let line = match input.line(t.g) {
                Ok(Some(l)) => l,
                Ok(None) => break,
                Err(e) => {
                    if !m.opt_present("s") {
                        t.warn_path("", f, e);
                    }
                    error = true;
                    break;
                }
            };
            lineno += 1;
            let body = chomp(&line);
            if re.is_match(body) == invert {
                continue;
            }
            hits += 1;
            matched = true;
            if quiet {
                input.close(t.g);
                break 'files;
            }
            if list {
                break;
            }
            if count {
                continue;
            }
            let mut out = Vec::with_capacity(body.len() + 16);
            if with_name {
                out.extend_from_slice(shown.as_bytes());
                out.push(b':');
            }
            if numbers {
                out.extend_from_slice(format!("{lineno}:").as_bytes());
            }
            out.extend_from_slice(body);
            out.push(b'\n');
            if !t.out(&out) {
                input.close(t.g);
                return 2;
            }
        }
        input.close(t.g);
        if count {
            let line = if with_name { format!("{shown}:{hits}\n") } else { format!("{hits}\n") };
            t.out(line.as_bytes());
        } else if list && hits > 0 {
            t.out(format!("{shown}\n").as_bytes());
        }
        t.flush();
    }
    if error && !(quiet && matched) {
        2
    } else if matched {
        0
    } else {
        1
    }
}
