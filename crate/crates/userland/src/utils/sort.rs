//! sort with C-locale byte ordering, numeric keys, reverse and unique.

use std::cmp::Ordering;

use getopts::Options;
use sandboxd_core::guest::Guest;

use super::files::parse_or_return;
use crate::rt::{chomp, split_lines, Tool};

/// Leading numeric prefix after blanks: sign, integer digits without
/// leading zeros, fraction digits without trailing zeros.
fn numeric_key(line: &[u8]) -> (bool, &[u8], &[u8]) {
    let mut i = line.iter().take_while(|&&b| b == b' ' || b == b'\t').count();
    let neg = line.get(i) == Some(&b'-');
    if neg {
        i += 1;
    }
    let int_start = i;
    while line.get(i).is_some_and(u8::is_ascii_digit) {
        i += 1;
    }
    let mut int = &line[int_start..i];
    while let [b'0', rest @ ..] = int {
        int = rest;
    }
    let mut frac: &[u8] = &[];
    if line.get(i) == Some(&b'.') {
        let s = i + 1;
        let mut e = s;
        while line.get(e).is_some_and(u8::is_ascii_digit) {
            e += 1;
        }
        frac = &line[s..e];
        while let [rest @ .., b'0'] = frac {
            frac = rest;
        }
    }
    let zero = int.is_empty() && frac.is_empty();
    (neg && !zero, int, frac)
}

fn compare_magnitude(a: (&[u8], &[u8]), b: (&[u8], &[u8])) -> Ordering {
    a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(b.0)).then_with(|| a.1.cmp(b.1))
}

pub fn compare_numeric(a: &[u8], b: &[u8]) -> Ordering {
    let (an, ai, af) = numeric_key(a);
    let (bn, bi, bf) = numeric_key(b);
    match (an, bn) {
        (false, true) => Ordering::Greater,
        (true, false) => Ordering::Less,
        (false, false) => compare_magnitude((ai, af), (bi, bf)),
        (true, true) => compare_magnitude((bi, bf), (ai, af)),
    }
}

#[derive(Clone, Copy, Default)]
pub struct SortFlags {
    pub numeric: bool,
    pub reverse: bool,
    pub unique: bool,
}

/// Sorts lines (without terminators). With `unique`, only the key decides
/// equality and the first line of each equal run is kept.
pub fn sort_lines(lines: &mut Vec<&[u8]>, f: SortFlags) {
    let key = |a: &[u8], b: &[u8]| if f.numeric { compare_numeric(a, b) } else { a.cmp(b) };
    let full = |a: &[u8], b: &[u8]| {
        let o = key(a, b);
        let o = if f.unique || !f.numeric { o } else { o.then_with(|| a.cmp(b)) };
        if f.reverse {
            o.reverse()
        } else {
            o
        }
    };
    lines.sort_by(|a, b| full(a, b));
    if f.unique {
        lines.dedup_by(|later, earlier| key(earlier, later) == Ordering::Equal);
    }
}

/// sort [-nru] [FILE]...
pub fn sort(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "sort");
    let mut o = Options::new();
    o.optflag("n", "", "compare according to string numerical value");
    o.optflag("r", "", "reverse the result of comparisons");
    o.optflag("u", "", "output only the first of an equal run");
    let m = parse_or_return!(t, o, "[-nru] [FILE]...", 2);
    let flags = SortFlags { numeric: m.opt_present("n"), reverse: m.opt_present("r"), unique: m.opt_present("u") };
    let files = if m.free.is_empty() { vec!["-".to_owned()] } else { m.free };
    let mut data = Vec::new();
    for f in &files {
        match t.slurp(f) {
            Ok(mut d) => {
                if !d.is_empty() && !d.ends_with(b"\n") {
                    d.push(b'\n');
                }
                data.extend_from_slice(&d);
            }
            Err(e) => {
                t.warn(format_args!("cannot read: {f}: {}", e.message()));
                return 2;
            }
        }
    }
    let mut lines: Vec<&[u8]> = split_lines(&data).into_iter().map(chomp).collect();
    sort_lines(&mut lines, flags);
    let mut out = Vec::with_capacity(data.len());
    for l in lines {
        out.extend_from_slice(l);
        out.push(b'\n');
    }
    if t.out(&out) {
        0
    } else {
        2
    }
}
