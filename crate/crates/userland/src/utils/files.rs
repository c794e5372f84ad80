//! cat, cp, mkdir, rm, rmdir, touch and tee.

use std::time::{SystemTime, UNIX_EPOCH};

use getopts::Options;
use sandboxd_core::abi::{O_APPEND, O_CREAT, O_TRUNC, O_WRONLY};
use sandboxd_core::guest::Guest;
use sandboxd_core::Errno;

use crate::rt::{base_name, join_path, Tool};

macro_rules! parse_or_return {
    ($t:expr, $o:expr, $brief:expr, $status:expr) => {
        match $t.parse(&$o, $brief, $status) {
            Ok(m) => m,
            Err(code) => return code,
        }
    };
}
pub(crate) use parse_or_return;

/// cat [FILE]...: concatenates files (`-` is stdin) to stdout, unbuffered.
pub fn cat(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "cat");
    let mut o = Options::new();
    o.optflag("u", "", "unbuffered output (always on)");
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
        loop {
            match input.chunk(t.g) {
                Ok(Some(c)) => {
                    if t.g.write_all(1, &c).is_err() {
                        input.close(t.g);
                        return 1;
                    }
                }
                Ok(None) => break,
                Err(e) => {
                    t.warn_path("", f, e);
                    status = 1;
                    break;
                }
            }
        }
        input.close(t.g);
    }
    status
}

fn copy_file(t: &mut Tool, src: &str, dst: &str, perm: u32) -> Result<(), (String, Errno)> {
    let data = t.g.read_file(src).map_err(|e| (format!("cannot open '{src}' for reading"), e))?;
    t.g.write_file(dst, &data, i64::from(perm)).map_err(|e| (format!("cannot create regular file '{dst}'"), e))
}

fn copy_tree(t: &mut Tool, src: &str, dst: &str) -> Result<(), (String, Errno)> {
    let st = t.g.stat(src).map_err(|e| (format!("cannot stat '{src}'"), e))?;
    if !st.is_dir() {
        return copy_file(t, src, dst, st.perm());
    }
    match t.g.mkdir(dst, i64::from(st.perm())) {
        Ok(()) | Err(Errno::EEXIST) => {}
        Err(e) => return Err((format!("cannot create directory '{dst}'"), e)),
    }
    let entries = t.g.list_dir(src).map_err(|e| (format!("cannot access '{src}'"), e))?;
    for ent in entries.iter().filter(|e| e.name != "." && e.name != "..") {
        copy_tree(t, &join_path(src, &ent.name), &join_path(dst, &ent.name))?;
    }
    Ok(())
}

/// cp [-r] SOURCE DEST, or cp [-r] SOURCE... DIRECTORY.
pub fn cp(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "cp");
    let mut o = Options::new();
    o.optflag("r", "", "copy directories recursively");
    o.optflag("R", "", "same as -r");
    let m = parse_or_return!(t, o, "[-r] SOURCE DEST | SOURCE... DIRECTORY", 1);
    let recursive = m.opt_present("r") || m.opt_present("R");
    let args = m.free;
    if args.len() < 2 {
        t.warn(if args.is_empty() { "missing file operand".to_owned() } else { format!("missing destination file operand after '{}'", args[0]) });
        return 1;
    }
    let (srcs, dest) = args.split_at(args.len() - 1);
    let dest = &dest[0];
    let dest_is_dir = t.g.stat(dest).map(|s| s.is_dir()).unwrap_or(false);
    if srcs.len() > 1 && !dest_is_dir {
        t.warn(format_args!("target '{dest}' is not a directory"));
        return 1;
    }
    let mut status = 0;
    for src in srcs {
        let target = if dest_is_dir { join_path(dest, base_name(src)) } else { dest.clone() };
        let st = match t.g.stat(src) {
            Ok(st) => st,
            Err(e) => {
                t.warn_path("cannot stat", src, e);
                status = 1;
                continue;
            }
        };
        let r = if st.is_dir() {
            if !recursive {
                t.warn(format_args!("-r not specified; omitting directory '{src}'"));
                status = 1;
                continue;
            }
            copy_tree(&mut t, src, &target)
        } else {
            copy_file(&mut t, src, &target, st.perm())
        };
        if let Err((what, e)) = r {
            t.warn(format_args!("{what}: {}", e.message()));
            status = 1;
        }
    }
    status
}

/// mkdir [-p] DIRECTORY...
pub fn mkdir(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "mkdir");
    let mut o = Options::new();
    o.optflag("p", "", "make parent directories as needed, no error if existing");
    let m = parse_or_return!(t, o, "[-p] DIRECTORY...", 1);
    if m.free.is_empty() {
        t.warn("missing operand");
        return 1;
    }
    let parents = m.opt_present("p");
    let mut status = 0;
    for dir in &m.free {
        let r = if parents { mkdir_parents(t.g, dir) } else { t.g.mkdir(dir, 0o755) };
        if let Err(e) = r {
            t.warn_path("cannot create directory", dir, e);
            status = 1;
        }
    }
    status
}

fn mkdir_parents(g: &mut Guest, dir: &str) -> Result<(), Errno> {
    let mut prefix = if dir.starts_with('/') { "/".to_owned() } else { String::new() };
    for part in dir.split('/').filter(|p| !p.is_empty()) {
        prefix.push_str(part);
        match g.mkdir(&prefix, 0o755) {
            Ok(()) => {}
            Err(Errno::EEXIST) => {
                if !g.stat(&prefix)?.is_dir() {
                    return Err(Errno::ENOTDIR);
                }
            }
            Err(e) => return Err(e),
        }
        prefix.push('/');
    }
    Ok(())
}

fn remove_tree(t: &mut Tool, path: &str) -> bool {
    let entries = match t.g.list_dir(path) {
        Ok(e) => e,
        Err(e) => {
            t.warn_path("cannot remove", path, e);
            return false;
        }
    };
    let mut ok = true;
    for ent in entries.iter().filter(|e| e.name != "." && e.name != "..") {
        let child = join_path(path, &ent.name);
        ok &= match t.g.lstat(&child) {
            Ok(st) if st.is_dir() => remove_tree(t, &child),
            Ok(_) => match t.g.unlink(&child) {
                Ok(()) => true,
                Err(e) => {
                    t.warn_path("cannot remove", &child, e);
                    false
                }
            },
            Err(e) => {
                t.warn_path("cannot remove", &child, e);
                false
            }
        };
    }
    if ok {
        if let Err(e) = t.g.rmdir(path) {
            t.warn_path("cannot remove", path, e);
            return false;
        }
    }
    ok
}

/// rm [-r] [-f] FILE...
pub fn rm(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "rm");
    let mut o = Options::new();
    o.optflag("r", "", "remove directories and their contents recursively");
    o.optflag("R", "", "same as -r");
    o.optflag("f", "", "ignore nonexistent files, never fail on a missing operand");
    let m = parse_or_return!(t, o, "[-rf] FILE...", 1);
    let recursive = m.opt_present("r") || m.opt_present("R");
    let force = m.opt_present("f");
    if m.free.is_empty() && !force {
        t.warn("missing operand");
        return 1;
    }
    let mut status = 0;
    for path in &m.free {
        match t.g.lstat(path) {
            Err(Errno::ENOENT) if force => {}
            Err(e) => {
                t.warn_path("cannot remove", path, e);
                status = 1;
            }
            Ok(st) if st.is_dir() => {
                if !recursive {
                    t.warn_path("cannot remove", path, Errno::EISDIR);
                    status = 1;
                } else if !remove_tree(&mut t, path) {
                    status = 1;
                }
            }
            Ok(_) => {
                if let Err(e) = t.g.unlink(path) {
                    t.warn_path("cannot remove", path, e);
                    status = 1;
                }
            }
        }
    }
    status
}

/// rmdir DIRECTORY...
pub fn rmdir(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "rmdir");
    let o = Options::new();
    let m = parse_or_return!(t, o, "DIRECTORY...", 1);
    if m.free.is_empty() {
        t.warn("missing operand");
        return 1;
    }
    let mut status = 0;
    for dir in &m.free {
        if let Err(e) = t.g.rmdir(dir) {
            t.warn_path("failed to remove", dir, e);
            status = 1;
        }
    }
    status
}

fn now_ns() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as i64).unwrap_or(0)
}

/// touch FILE...: creates missing files and sets times to now.
pub fn touch(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "touch");
    let mut o = Options::new();
    o.optflag("c", "", "do not create any files");
    let m = parse_or_return!(t, o, "[-c] FILE...", 1);
    if m.free.is_empty() {
        t.warn("missing file operand");
        return 1;
    }
    let mut status = 0;
    for path in &m.free {
        let now = now_ns();
        let r = match t.g.utimes(path, now, now) {
            Err(Errno::ENOENT) if m.opt_present("c") => Ok(()),
            Err(Errno::ENOENT) => t.g.open(path, O_WRONLY | O_CREAT, 0o644).and_then(|fd| t.g.close(fd)),
            r => r,
        };
        if let Err(e) = r {
            t.warn_path("cannot touch", path, e);
            status = 1;
        }
    }
    status
}

/// tee [-a] [FILE]...: copies stdin to stdout and every FILE.
pub fn tee(g: &mut Guest) -> i32 {
    let mut t = Tool::new(g, "tee");
    let mut o = Options::new();
    o.optflag("a", "", "append to the given files, do not overwrite");
    let m = parse_or_return!(t, o, "[-a] [FILE]...", 1);
    let mode = if m.opt_present("a") { O_APPEND } else { O_TRUNC };
    let mut status = 0;
    let mut fds = Vec::new();
    for path in &m.free {
        match t.g.open(path, O_WRONLY | O_CREAT | mode, 0o644) {
            Ok(fd) => fds.push((fd, path.clone())),
            Err(e) => {
                t.warn_path("", path, e);
                status = 1;
            }
        }
    }
    let mut input = crate::rt::Input::stdin();
    let mut stdout_ok = true;
    loop {
        match input.chunk(t.g) {
            Ok(Some(c)) => {
                if stdout_ok && t.g.write_all(1, &c).is_err() {
                    stdout_ok = false;
                    status = 1;
                }
                let mut failed = Vec::new();
                for (i, (fd, path)) in fds.iter().enumerate() {
                    if let Err(e) = t.g.write_all(*fd, &c) {
                        failed.push((i, path.clone(), e));
                    }
                }
                for (i, path, e) in failed.into_iter().rev() {
                    t.warn_path("", &path, e);
                    let (fd, _) = fds.remove(i);
                    let _ = t.g.close(fd);
                    status = 1;
                }
            }
            Ok(None) => break,
            Err(e) => {
                t.warn(format_args!("read error: {}", e.message()));
                status = 1;
                break;
            }
        }
    }
    for (fd, _) in fds {
        let _ = t.g.close(fd);
    }
    status
}
