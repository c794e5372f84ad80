//! ls and stat.

use getopts::Options;
use sandboxd_core::abi::{S_IFDIR, S_IFIFO, S_IFMT, S_IFREG, S_IFSOCK};
use sandboxd_core::guest::Guest;
use sandboxd_core::wire::StatRecord;

use super::files::parse_or_return;
use crate::rt::{join_path, Tool};

/// `drwxr-xr-x` style mode string.
pub fn mode_string(mode: u32) -> String {
    let kind = match mode & S_IFMT {
        S_IFDIR => 'd',
        S_IFIFO => 'p',
        S_IFSOCK => 's',
        _ => '-',
    };
    let mut s = String::with_capacity(10);
    s.push(kind);
    for shift in [6, 3, 0] {
        let bits = (mode >> shift) & 7;
        s.push(if bits & 4 != 0 { 'r' } else { '-' });
        s.push(if bits & 2 != 0 { 'w' } else { '-' });
        s.push(if bits & 1 != 0 { 'x' } else { '-' });
    }
    s
}

fn type_name(mode: u32) -> &'static str {
    match mode & S_IFMT {
        S_IFDIR => "directory",
        S_IFREG => "regular file",
        S_IFIFO => "fifo",
        S_IFSOCK => "socket",
        _ => "unknown",
    }
}

fn long_line(st: &StatRecord, name: &str) -> String {
    format!("{} {} {:>8} {name}\n", mode_string(st.mode), st.nlink, st.size)
}

/// ls [-1adl] [FILE]...: names in byte order, one per line.
pub fn ls(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "ls");
    let mut o = Options::new();
    o.optflag("a", "", "do not ignore entries starting with .");
    o.optflag("d", "", "list directories themselves, not their contents");
    o.optflag("l", "", "use a long listing format: mode, links, size, name");
    o.optflag("1", "", "list one file per line (always on)");
    let m = parse_or_return!(t, o, "[-1adl] [FILE]...", 2);
    let all = m.opt_present("a");
    let long = m.opt_present("l");
    let no_descend = m.opt_present("d");
    let operands = if m.free.is_empty() { vec![".".to_owned()] } else { m.free.clone() };

    let mut status = 0;
    let mut files = Vec::new();
    let mut dirs = Vec::new();
    for op in &operands {
        match t.g.stat(op) {
            Ok(st) if st.is_dir() && !no_descend => dirs.push(op.clone()),
            Ok(st) => files.push((op.clone(), st)),
            Err(e) => {
                t.warn_path("cannot access", op, e);
                status = 2;
            }
        }
    }
    files.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    dirs.sort_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
    let headers = operands.len() > 1;

    let mut out = String::new();
    for (name, st) in &files {
        if long {
            out.push_str(&long_line(st, name));
        } else {
            out.push_str(name);
            out.push('\n');
        }
    }
    for (i, dir) in dirs.iter().enumerate() {
        if headers {
            if i > 0 || !files.is_empty() {
                out.push('\n');
            }
            out.push_str(&format!("{dir}:\n"));
        }
        let mut entries = match t.g.list_dir(dir) {
            Ok(e) => e,
            Err(e) => {
                t.warn_path("cannot open directory", dir, e);
                status = 2;
                continue;
            }
        };
        entries.retain(|e| all || !e.name.starts_with('.'));
        entries.sort_by(|a, b| a.name.as_bytes().cmp(b.name.as_bytes()));
        for ent in entries {
            if long {
                match t.g.lstat(&join_path(dir, &ent.name)) {
                    Ok(st) => out.push_str(&long_line(&st, &ent.name)),
                    Err(e) => {
                        t.warn_path("cannot access", &join_path(dir, &ent.name), e);
                        status = 1;
                    }
                }
            } else {
                out.push_str(&ent.name);
                out.push('\n');
            }
        }
    }
    t.out(out.as_bytes());
    status
}

fn expand_format(fmt: &str, name: &str, st: &StatRecord) -> String {
    let mut out = String::new();
    let mut chars = fmt.chars();
    while let Some(c) = chars.next() {
        if c != '%' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push_str(name),
            Some('s') => out.push_str(&st.size.to_string()),
            Some('a') => out.push_str(&format!("{:o}", st.perm())),
            Some('A') => out.push_str(&mode_string(st.mode)),
            Some('F') => out.push_str(type_name(st.mode)),
            Some('i') => out.push_str(&st.ino.to_string()),
            Some('h') => out.push_str(&st.nlink.to_string()),
            Some('X') => out.push_str(&st.atime_ns.div_euclid(1_000_000_000).to_string()),
            Some('Y') => out.push_str(&st.mtime_ns.div_euclid(1_000_000_000).to_string()),
            Some('%') => out.push('%'),
            Some(other) => {
                out.push('%');
                out.push(other);
            }
            None => out.push('%'),
        }
    }
    out.push('\n');
    out
}

fn fmt_time(ns: i64) -> String {
    format!("{}.{:09}", ns.div_euclid(1_000_000_000), ns.rem_euclid(1_000_000_000))
}

/// stat [-c FORMAT] FILE...
///
/// FORMAT directives: %n name, %s size, %a octal permissions, %A mode
/// string, %F file type, %i inode, %h links, %X/%Y access/modify seconds.
pub fn stat(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "stat");
    let mut o = Options::new();
    o.optopt("c", "", "use the specified FORMAT instead of the default", "FORMAT");
    let m = parse_or_return!(t, o, "[-c FORMAT] FILE...", 1);
    if m.free.is_empty() {
        t.warn("missing operand");
        return 1;
    }
    let format = m.opt_str("c");
    let mut status = 0;
    for path in &m.free {
        let st = match t.g.lstat(path) {
            Ok(st) => st,
            Err(e) => {
                t.warn_path("cannot stat", path, e);
                status = 1;
                continue;
            }
        };
        let text = match &format {
            Some(f) => expand_format(f, path, &st),
            None => format!(
                "  File: {path}\n  Size: {:<10} Type: {}\n Inode: {:<10} Links: {}\nAccess: ({:04o}/{})\nAccess: {}\nModify: {}\n",
                st.size,
                type_name(st.mode),
                st.ino,
                st.nlink,
                st.perm(),
                mode_string(st.mode),
                fmt_time(st.atime_ns),
                fmt_time(st.mtime_ns),
            ),
        };
        t.out(text.as_bytes());
    }
    status
}
