//! echo, head, tail, sha1sum and wc.

use getopts::Options;
use sandboxd_core::guest::Guest;
use sha1::{Digest, Sha1};

use super::files::parse_or_return;
use crate::rt::{parse_count, split_lines, Tool};

/// echo [-n] [STRING]...: no escape processing.
pub fn echo(g: &mut Guest) -> i32 {
    let args: Vec<String> = g.argv().iter().skip(1).cloned().collect();
    let (newline, words) = match args.first().map(String::as_str) {
        Some("-n") => (false, &args[1..]),
        _ => (true, &args[..]),
    };
    let mut line = words.join(" ");
    if newline {
        line.push('\n');
    }
    let mut t = Tool::new(g, "echo");
    if t.out(line.as_bytes()) && t.flush() {
        0
    } else {
        1
    }
}

/// Rewrites the historical `-N` form into `-n N`.
fn legacy_count(g: &Guest) -> Option<Vec<String>> {
    let argv = g.argv();
    let first = argv.get(1)?;
    let digits = first.strip_prefix('-')?;
    parse_count(digits)?;
    let mut out = vec![argv[0].clone(), "-n".to_owned(), digits.to_owned()];
    out.extend(argv[2..].iter().cloned());
    Some(out)
}

fn run_with_args(g: &mut Guest, args: Option<Vec<String>>, f: impl FnOnce(&mut Tool, Vec<String>) -> i32, name: &'static str) -> i32 {
    let argv = args.unwrap_or_else(|| g.argv().to_vec());
    let mut t = Tool::new(g, name);
    f(&mut t, argv[1..].to_vec())
}

fn header(t: &mut Tool, many: bool, first: bool, name: &str) {
    if many {
        let name = if name == "-" { "standard input" } else { name };
        let sep = if first { "" } else { "\n" };
        t.out(format!("{sep}==> {name} <==\n").as_bytes());
    }
}

/// head [-n LINES | -c BYTES] [FILE]...
pub fn head(g: &mut Guest) -> i32 {
    let rewritten = legacy_count(g);
    run_with_args(g, rewritten, head_main, "head")
}

fn head_main(t: &mut Tool, args: Vec<String>) -> i32 {
    let mut o = Options::new();
    o.optopt("n", "", "print the first LINES lines (default 10)", "LINES");
    o.optopt("c", "", "print the first BYTES bytes", "BYTES");
    if args.iter().any(|a| a == "--help") {
        let text = o.usage("Usage: head [-n LINES | -c BYTES] [FILE]...");
        t.out(text.as_bytes());
        t.out(b"\n");
        return 0;
    }
    let m = match o.parse(&args) {
        Ok(m) => m,
        Err(e) => {
            t.warn(e);
            return 1;
        }
    };
    let (by_bytes, raw) = match (m.opt_str("c"), m.opt_str("n")) {
        (Some(c), _) => (true, c),
        (None, Some(n)) => (false, n),
        (None, None) => (false, "10".to_owned()),
    };
    let Some(limit) = parse_count(&raw) else {
        t.warn(format_args!("invalid number of {}: '{raw}'", if by_bytes { "bytes" } else { "lines" }));
        return 1;
    };
    let files = if m.free.is_empty() { vec!["-".to_owned()] } else { m.free };
    let many = files.len() > 1;
    let mut status = 0;
    for (i, f) in files.iter().enumerate() {
        let mut input = match t.open_input(f) {
            Ok(x) => x,
            Err(e) => {
                t.warn(format_args!("cannot open '{f}' for reading: {}", e.message()));
                status = 1;
                continue;
            }
        };
        header(t, many, i == 0, f);
        let mut left = limit;
        while left > 0 {
            let r = if by_bytes { input.chunk(t.g) } else { input.line(t.g) };
            match r {
                Ok(Some(data)) => {
                    let take = if by_bytes { data.len().min(left as usize) } else { data.len() };
                    left -= if by_bytes { take as u64 } else { 1 };
                    if !t.out(&data[..take]) {
                        input.close(t.g);
                        return 1;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    t.warn_path("error reading", f, e);
                    status = 1;
                    break;
                }
            }
        }
        input.close(t.g);
        t.flush();
    }
    status
}

/// tail [-n [+]LINES] [FILE]...
pub fn tail(g: &mut Guest) -> i32 {
    let rewritten = legacy_count(g);
    run_with_args(g, rewritten, tail_main, "tail")
}

fn tail_main(t: &mut Tool, args: Vec<String>) -> i32 {
    let mut o = Options::new();
    o.optopt("n", "", "print the last LINES lines, or from line +LINES on", "[+]LINES");
    if args.iter().any(|a| a == "--help") {
        let text = o.usage("Usage: tail [-n [+]LINES] [FILE]...");
        t.out(text.as_bytes());
        t.out(b"\n");
        return 0;
    }
    let m = match o.parse(&args) {
        Ok(m) => m,
        Err(e) => {
            t.warn(e);
            return 1;
        }
    };
    let raw = m.opt_str("n").unwrap_or_else(|| "10".to_owned());
    let (from_start, digits) = match raw.strip_prefix('+') {
        Some(d) => (true, d),
        None => (false, raw.strip_prefix('-').unwrap_or(&raw)),
    };
    let Some(n) = parse_count(digits) else {
        t.warn(format_args!("invalid number of lines: '{raw}'"));
        return 1;
    };
    let files = if m.free.is_empty() { vec!["-".to_owned()] } else { m.free };
    let many = files.len() > 1;
    let mut status = 0;
    for (i, f) in files.iter().enumerate() {
        let data = match t.slurp(f) {
            Ok(d) => d,
            Err(e) => {
                t.warn(format_args!("cannot open '{f}' for reading: {}", e.message()));
                status = 1;
                continue;
            }
        };
        header(t, many, i == 0, f);
        let lines = split_lines(&data);
        let skip = if from_start {
            (n.max(1) - 1) as usize
        } else {
            lines.len().saturating_sub(n as usize)
        };
        for line in lines.iter().skip(skip) {
            t.out(line);
        }
    }
    status
}

/// Escapes a name the way checksum listings do; true when escaping was needed.
fn escape_name(name: &str) -> (bool, String) {
    if !name.contains(['\\', '\n']) {
        return (false, name.to_owned());
    }
    (true, name.replace('\\', "\\\\").replace('\n', "\\n"))
}

/// sha1sum [FILE]...: `HASH  NAME` per input.
pub fn sha1sum(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "sha1sum");
    let mut o = Options::new();
    o.optflag("b", "", "read in binary mode (no effect)");
    o.optflag("t", "", "read in text mode (no effect)");
    let m = parse_or_return!(t, o, "[FILE]...", 1);
    let files = if m.free.is_empty() { vec!["-".to_owned()] } else { m.free };
    let mut status = 0;
    for f in &files {
        let mut input = match t.open_input(f) {
            Ok(i) => i,
            Err(e) => {
                t.warn_path("", f, e);
                status = 1;
                continue;
            }
        };
        let mut h = Sha1::new();
        let mut failed = None;
        loop {
            match input.chunk(t.g) {
                Ok(Some(c)) => h.update(&c),
                Ok(None) => break,
                Err(e) => {
                    failed = Some(e);
                    break;
                }
            }
        }
        input.close(t.g);
        if let Some(e) = failed {
            t.warn_path("", f, e);
            status = 1;
            continue;
        }
        let hex: String = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        let (escaped, name) = escape_name(f);
        let lead = if escaped { "\\" } else { "" };
        t.out(format!("{lead}{hex}  {name}\n").as_bytes());
    }
    status
}

#[derive(Default, Clone, Copy)]
struct Counts {
    lines: u64,
    words: u64,
    bytes: u64,
}

/// Word rules of the C locale: whitespace ends a word, printable bytes
/// start one, other bytes do neither.
#[derive(Default)]
struct WordCounter {
    counts: Counts,
    in_word: bool,
}

impl WordCounter {
    fn feed(&mut self, data: &[u8]) {
        self.counts.bytes += data.len() as u64;
        for &b in data {
            match b {
                b'\n' => {
                    self.counts.lines += 1;
                    self.in_word = false;
                }
                b' ' | b'\t' | b'\x0b' | b'\x0c' | b'\r' => self.in_word = false,
                0x21..=0x7e => {
                    if !self.in_word {
                        self.counts.words += 1;
                        self.in_word = true;
                    }
                }
                _ => {}
            }
        }
    }
}

/// wc [-lwcm] [FILE]...
pub fn wc(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "wc");
    let mut o = Options::new();
    o.optflag("l", "", "print the newline counts");
    o.optflag("w", "", "print the word counts");
    o.optflag("c", "", "print the byte counts");
    o.optflag("m", "", "print the character counts (bytes in the C locale)");
    let m = parse_or_return!(t, o, "[-lwcm] [FILE]...", 1);
    let mut show = [m.opt_present("l"), m.opt_present("w"), m.opt_present("m"), m.opt_present("c")];
    if !show.iter().any(|s| *s) {
        show = [true, true, false, true];
    }
    let shown = show.iter().filter(|s| **s).count();
    let named = !m.free.is_empty();
    let files = if named { m.free } else { vec!["-".to_owned()] };

    // Column width: digits of the total regular-file size, at least 7 when
    // any input is not a regular file, and unpadded for one count of one input.
    let width = if files.len() == 1 && shown == 1 {
        1
    } else {
        let stats: Vec<_> = files
            .iter()
            .map(|f| if f == "-" { t.g.fstat(0) } else { t.g.stat(f) })
            .collect();
        if stats[0].is_err() {
            1
        } else {
            let mut min = 1;
            let mut total = 0u64;
            for st in stats.iter().flatten() {
                if st.is_file() {
                    total += st.size;
                } else {
                    min = 7;
                }
            }
            total.to_string().len().max(min)
        }
    };

    let render = |c: &Counts, name: Option<&str>| {
        let vals = [c.lines, c.words, c.bytes, c.bytes];
        let cols: Vec<String> = vals.iter().zip(show).filter(|(_, s)| *s).map(|(v, _)| format!("{v:>width$}")).collect();
        let mut line = cols.join(" ");
        if let Some(n) = name {
            line.push(' ');
            line.push_str(n);
        }
        line.push('\n');
        line
    };

    let mut status = 0;
    let mut total = Counts::default();
    for f in &files {
        let mut input = match t.open_input(f) {
            Ok(i) => i,
            Err(e) => {
                t.warn_path("", f, e);
                status = 1;
                continue;
            }
        };
        let mut wcnt = WordCounter::default();
        loop {
            match input.chunk(t.g) {
                Ok(Some(c)) => wcnt.feed(&c),
                Ok(None) => break,
                Err(e) => {
                    t.warn_path("", f, e);
                    status = 1;
                    break;
                }
            }
        }
        input.close(t.g);
        let c = wcnt.counts;
        total.lines += c.lines;
        total.words += c.words;
        total.bytes += c.bytes;
        let line = render(&c, named.then_some(f.as_str()));
        t.out(line.as_bytes());
    }
    if files.len() > 1 {
        let line = render(&total, Some("total"));
        t.out(line.as_bytes());
    }
    status
}
