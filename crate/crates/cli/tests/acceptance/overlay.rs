//! Overlay file system: fetch-once, whiteouts, and trace equivalence with a
//! real directory.
//!
//! Random traces run against an overlay over an in-memory underlay and,
//! in lockstep, against a host temp directory seeded with the same files.
//! Every result and errno must match, and so must the final trees. The
//! traces also feed the fetch-once check: the underlay must be asked for
//! exactly the distinct lower files whose bytes the trace needed, once each.
//!
//! Supported subset: no O_CREAT|O_DIRECTORY, no O_TRUNC on read-only
//! opens, and no copy-up of a lower file while a read-only handle to its
//! lower copy is open (that handle keeps the lower bytes by design).

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::CString;
use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom, Write};
use std::os::fd::FromRawFd;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use sandboxd_core::abi::{
    O_ACCMODE, O_APPEND, O_CREAT, O_DIRECTORY, O_EXCL, O_RDONLY, O_RDWR, O_TRUNC, O_WRONLY, SEEK_CUR, SEEK_END,
    SEEK_SET,
};
use sandboxd_core::kernel::KernelConfig;
use sandboxd_core::vfs::{MemProvider, Opened, Vfs};
use sandboxd_core::SysResult;

use crate::support::{boot, quiesce, registry, sh};

const TRACES: u64 = 20;
const TRACE_OPS: usize = 500;
const MAX_HANDLES: usize = 6;

const LOWER_DIRS: &[&str] = &["/l", "/l/sub", "/l/sub/deep"];
const PATHS: &[&str] = &[
    "/l", "/l/a", "/l/b", "/l/empty", "/l/sub", "/l/sub/c", "/l/sub/deep", "/l/sub/deep/e", "/l/sub/new", "/l/n",
    "/top", "/u", "/u/x", "/u/y", "/l/a/x", "/missing/y",
];

fn lower_files() -> Vec<(&'static str, Vec<u8>)> {
    let pattern = |n: usize, seed: u8| (0..n).map(|i| seed.wrapping_add((i * 7) as u8)).collect::<Vec<u8>>();
    vec![
        ("/l/a", pattern(300, 1)),
        ("/l/b", pattern(17, 50)),
        ("/l/empty", Vec::new()),
        ("/l/sub/c", pattern(4096, 9)),
        ("/l/sub/deep/e", pattern(70, 200)),
        ("/top", pattern(5, 77)),
    ]
}

fn provider() -> MemProvider {
    let mut p = MemProvider::new();
    for d in LOWER_DIRS {
        p = p.with_dir(d);
    }
    for (path, data) in lower_files() {
        p = p.with_file(path, data);
    }
    p
}

/// Comparable outcome of one operation.
#[derive(Debug, PartialEq, Eq)]
enum Out {
    Unit,
    Num(u64),
    Data(Vec<u8>),
    Dir,
    File(u64),
    Names(Vec<String>),
    Err(i32),
}

fn vout<T>(r: SysResult<T>, f: impl FnOnce(T) -> Out) -> Out {
    r.map_or_else(|e| Out::Err(e.0), f)
}

fn hout<T>(r: std::io::Result<T>, f: impl FnOnce(T) -> Out) -> Out {
    r.map_or_else(|e| Out::Err(e.raw_os_error().expect("host error without errno")), f)
}

struct Host {
    root: PathBuf,
}

impl Host {
    fn path(&self, p: &str) -> PathBuf {
        self.root.join(p.trim_start_matches('/'))
    }

    fn open(&self, p: &str, flags: i64) -> std::io::Result<File> {
        let mut f = match flags & O_ACCMODE {
            O_WRONLY => libc::O_WRONLY,
            O_RDWR => libc::O_RDWR,
            _ => libc::O_RDONLY,
        };
        for (ours, theirs) in [
            (O_CREAT, libc::O_CREAT),
            (O_EXCL, libc::O_EXCL),
            (O_TRUNC, libc::O_TRUNC),
            (O_APPEND, libc::O_APPEND),
            (O_DIRECTORY, libc::O_DIRECTORY),
        ] {
            if flags & ours != 0 {
                f |= theirs;
            }
        }
        let c = CString::new(self.path(p).into_os_string().into_encoded_bytes()).unwrap();
        // SAFETY: `c` is a valid NUL-terminated path; the fd is owned by the File.
        let fd = unsafe { libc::open(c.as_ptr(), f | libc::O_CLOEXEC, 0o644 as libc::c_uint) };
        if fd < 0 {
            return Err(std::io::Error::last_os_error());
        }
        Ok(unsafe { File::from_raw_fd(fd) })
    }

    fn stat(&self, p: &str) -> Out {
        hout(fs::metadata(self.path(p)), |m| if m.is_dir() { Out::Dir } else { Out::File(m.len()) })
    }

    fn list(&self, p: &str) -> Out {
        hout(fs::read_dir(self.path(p)), |rd| {
            let mut names: Vec<String> = rd.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
            names.sort();
            Out::Names(names)
        })
    }
}

struct Handle {
    vfs: Opened,
    host: File,
    /// Lower path whose bytes this handle reads, with the lower size.
    lower: Option<(String, u64)>,
}

/// Tracks which lower files are still unshadowed and which needed their bytes.
struct FetchModel {
    sizes: BTreeMap<String, u64>,
    pristine: BTreeSet<String>,
    needed: BTreeSet<String>,
}

impl FetchModel {
    fn new() -> Self {
        let sizes: BTreeMap<String, u64> = lower_files().into_iter().map(|(p, d)| (p.to_owned(), d.len() as u64)).collect();
        let mut pristine: BTreeSet<String> = sizes.keys().cloned().collect();
        pristine.extend(LOWER_DIRS.iter().map(|d| d.to_string()));
        FetchModel { sizes, pristine, needed: BTreeSet::new() }
    }

    fn lower_file(&self, p: &str) -> Option<u64> {
        self.pristine.contains(p).then(|| self.sizes.get(p).copied()).flatten()
    }
}

struct Trace {
    vfs: Vfs,
    host: Host,
    handles: Vec<Handle>,
    model: FetchModel,
    rng: StdRng,
    _dir: tempfile::TempDir,
}

impl Trace {
    fn new(seed: u64, mem: MemProvider) -> Result<Self, String> {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        let host = Host { root: dir.path().to_path_buf() };
        for d in LOWER_DIRS {
            fs::create_dir_all(host.path(d)).map_err(|e| e.to_string())?;
        }
        for (p, data) in lower_files() {
            fs::write(host.path(p), data).map_err(|e| e.to_string())?;
        }
        let vfs = Vfs::with_underlay(Box::new(mem)).map_err(|e| e.to_string())?;
        Ok(Trace { vfs, host, handles: Vec::new(), model: FetchModel::new(), rng: StdRng::seed_from_u64(seed), _dir: dir })
    }

    fn pick_path(&mut self) -> &'static str {
        PATHS[self.rng.gen_range(0..PATHS.len())]
    }

    fn lower_reader_open(&self, p: &str) -> bool {
        self.handles.iter().any(|h| h.lower.as_ref().is_some_and(|(l, _)| l == p))
    }

    fn flags(&mut self) -> i64 {
        let acc = [O_RDONLY, O_WRONLY, O_RDWR][self.rng.gen_range(0..3)];
        let mut f = acc;
        if self.rng.gen_bool(0.4) {
            f |= O_CREAT;
            if self.rng.gen_bool(0.3) {
                f |= O_EXCL;
            }
        } else if self.rng.gen_bool(0.15) {
            f |= O_DIRECTORY;
        }
        if acc != O_RDONLY && self.rng.gen_bool(0.3) {
            f |= O_TRUNC;
        }
        if acc != O_RDONLY && self.rng.gen_bool(0.2) {
            f |= O_APPEND;
        }
        f
    }

    /// Runs one random operation on both sides; returns a description and both outcomes.
    fn step(&mut self) -> (String, Out, Out) {
        let n = self.handles.len();
        let choice = self.rng.gen_range(0..16);
        let file_handle = (0..n).filter(|&i| matches!(self.handles[i].vfs, Opened::File(_))).collect::<Vec<_>>();
        match choice {
            0..=2 if n < MAX_HANDLES => self.open(),
            3 if n > 0 => {
                let h = self.handles.swap_remove(self.rng.gen_range(0..n));
                if let Opened::File(f) = h.vfs {
                    self.vfs.release(f);
                }
                ("close".into(), Out::Unit, Out::Unit)
            }
            4..=8 if !file_handle.is_empty() => {
                let i = file_handle[self.rng.gen_range(0..file_handle.len())];
                self.file_op(i)
            }
            9 => {
                let p = self.pick_path();
                (format!("mkdir {p}"), vout(self.vfs.mkdir(p, 0o755), |_| Out::Unit), hout(fs::create_dir(self.host.path(p)), |_| Out::Unit))
            }
            10 => {
                let p = self.pick_path();
                let v = vout(self.vfs.rmdir(p), |_| Out::Unit);
                if v == Out::Unit {
                    self.model.pristine.remove(p);
                }
                (format!("rmdir {p}"), v, hout(fs::remove_dir(self.host.path(p)), |_| Out::Unit))
            }
            11 => {
                let p = self.pick_path();
                let v = vout(self.vfs.unlink(p), |_| Out::Unit);
                if v == Out::Unit {
                    self.model.pristine.remove(p);
                }
                (format!("unlink {p}"), v, hout(fs::remove_file(self.host.path(p)), |_| Out::Unit))
            }
            12 => {
                let p = self.pick_path();
                let v = vout(self.vfs.stat(p), |s| if s.is_dir() { Out::Dir } else { Out::File(s.size) });
                (format!("stat {p}"), v, self.host.stat(p))
            }
            13 => {
                let p = self.pick_path();
                let v = vout(self.vfs.list_dir(p), |l| Out::Names(l.into_iter().skip(2).map(|e| e.0).collect()));
                (format!("list {p}"), v, self.host.list(p))
            }
            14 => {
                let p = self.pick_path();
                let lower = self.model.lower_file(p).is_some();
                let v = vout(self.vfs.read_file(p), Out::Data);
                if lower && matches!(v, Out::Data(_)) {
                    self.model.needed.insert(p.to_owned());
                }
                (format!("read_file {p}"), v, hout(fs::read(self.host.path(p)), Out::Data))
            }
            _ => self.open(),
        }
    }

    fn open(&mut self) -> (String, Out, Out) {
        let p = self.pick_path();
        let mut flags = self.flags();
        let copy_up = flags & O_ACCMODE != O_RDONLY || flags & O_TRUNC != 0;
        if copy_up && self.model.lower_file(p).is_some() && self.lower_reader_open(p) {
            flags = O_RDONLY;
        }
        let copy_up = flags & O_ACCMODE != O_RDONLY || flags & O_TRUNC != 0;
        let desc = format!("open {p} {flags:#o}");
        let lower = self.model.lower_file(p);
        let v = self.vfs.open(p, flags, 0o644);
        let h = self.host.open(p, flags);
        let (vo, ho) = (
            match &v {
                Ok(Opened::File(_)) => Out::File(0),
                Ok(Opened::Dir(_)) => Out::Dir,
                Err(e) => Out::Err(e.0),
            },
            match &h {
                Ok(f) => {
                    if f.metadata().map(|m| m.is_dir()).unwrap_or(false) {
                        Out::Dir
                    } else {
                        Out::File(0)
                    }
                }
                Err(e) => Out::Err(e.raw_os_error().unwrap_or(-1)),
            },
        );
        match (v, h) {
            (Ok(v), Ok(host)) => {
                let mut lower_ref = None;
                if let (Some(size), Opened::File(_)) = (lower, &v) {
                    if copy_up {
                        self.model.needed.insert(p.to_owned());
                        self.model.pristine.remove(p);
                    } else {
                        lower_ref = Some((p.to_owned(), size));
                    }
                }
                self.handles.push(Handle { vfs: v, host, lower: lower_ref });
            }
            (Ok(Opened::File(f)), Err(_)) => self.vfs.release(f),
            _ => {}
        }
        (desc, vo, ho)
    }

    fn file_op(&mut self, i: usize) -> (String, Out, Out) {
        let kind = self.rng.gen_range(0..6);
        let len = self.rng.gen_range(0..64);
        let off: u64 = self.rng.gen_range(0..400);
        let data: Vec<u8> = (0..self.rng.gen_range(0..40)).map(|_| self.rng.gen()).collect();
        let whence = [SEEK_SET, SEEK_CUR, SEEK_END][self.rng.gen_range(0..3)];
        let soff: i64 = self.rng.gen_range(-50..400);
        let h = &mut self.handles[i];
        let Opened::File(f) = &mut h.vfs else { unreachable!() };
        let needs = |pos: u64, len: usize| h.lower.as_ref().filter(|(_, size)| len > 0 && pos < *size).map(|(p, _)| p.clone());
        let (desc, v, o, fetched) = match kind {
            0 => {
                let cursor = self.vfs.seek(f, 0, SEEK_CUR).unwrap();
                let fetched = needs(cursor, len);
                let v = vout(self.vfs.read(f, len), Out::Data);
                let mut buf = vec![0; len];
                let o = hout(h.host.read(&mut buf), |n| Out::Data(buf[..n].to_vec()));
                (format!("read {len}"), v, o, fetched)
            }
            1 => {
                let fetched = needs(off, len);
                let v = vout(self.vfs.pread(f, off as i64, len), Out::Data);
                let mut buf = vec![0; len];
                let o = hout(h.host.read_at(&mut buf, off), |n| Out::Data(buf[..n].to_vec()));
                (format!("pread {len}@{off}"), v, o, fetched)
            }
            2 => {
                let v = vout(self.vfs.write(f, &data), |n| Out::Num(n as u64));
                let o = hout(h.host.write(&data), |n| Out::Num(n as u64));
                (format!("write {}", data.len()), v, o, None)
            }
            3 => {
                let v = vout(self.vfs.pwrite(f, off as i64, &data), |n| Out::Num(n as u64));
                let o = hout(h.host.write_at(&data, off), |n| Out::Num(n as u64));
                (format!("pwrite {}@{off}", data.len()), v, o, None)
            }
            4 => {
                let v = vout(self.vfs.seek(f, soff, whence), Out::Num);
                let target = match whence {
                    SEEK_SET if soff < 0 => None,
                    SEEK_SET => Some(SeekFrom::Start(soff as u64)),
                    SEEK_CUR => Some(SeekFrom::Current(soff)),
                    _ => Some(SeekFrom::End(soff)),
                };
                // A negative absolute offset is EINVAL; std cannot express it.
                let o = match target {
                    Some(t) => hout(h.host.seek(t), Out::Num),
                    None => Out::Err(libc::EINVAL),
                };
                (format!("seek {soff} whence {whence}"), v, o, None)
            }
            _ => {
                let v = Out::File(self.vfs.fstat(f).size);
                let o = hout(h.host.metadata(), |m| Out::File(m.len()));
                ("fstat".to_string(), v, o, None)
            }
        };
        if let (Some(p), Out::Data(_)) = (fetched, &v) {
            self.model.needed.insert(p);
        }
        (desc, v, o)
    }

    fn release_all(&mut self) {
        for h in self.handles.drain(..) {
            if let Opened::File(f) = h.vfs {
                self.vfs.release(f);
            }
        }
    }

    /// Every visible path with its kind and, for files, contents.
    fn vfs_tree(&mut self) -> Result<BTreeMap<String, Option<Vec<u8>>>, String> {
        let mut out = BTreeMap::new();
        let mut stack = vec!["/".to_string()];
        while let Some(d) = stack.pop() {
            for (name, _, _) in self.vfs.list_dir(&d).map_err(|e| format!("list {d}: {}", e.message()))?.into_iter().skip(2) {
                let p = if d == "/" { format!("/{name}") } else { format!("{d}/{name}") };
                if self.vfs.stat(&p).map_err(|e| e.message())?.is_dir() {
                    out.insert(p.clone(), None);
                    stack.push(p);
                } else {
                    out.insert(p.clone(), Some(self.vfs.read_file(&p).map_err(|e| e.message())?));
                }
            }
        }
        Ok(out)
    }
}

fn host_tree(root: &Path) -> BTreeMap<String, Option<Vec<u8>>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            let rel = format!("/{}", path.strip_prefix(root).unwrap().to_string_lossy());
            if path.is_dir() {
                out.insert(rel, None);
                stack.push(path);
            } else {
                out.insert(rel, Some(fs::read(&path).unwrap()));
            }
        }
    }
    out
}

/// Returns (ops compared, distinct lower files fetched).
fn trace(seed: u64) -> Result<(usize, usize), String> {
    let mem = provider();
    let counts = mem.fetch_counts();
    let mut t = Trace::new(seed, mem)?;
    let mut history = Vec::new();
    for i in 0..TRACE_OPS {
        let (desc, v, h) = t.step();
        let recent = history.len().saturating_sub(12);
        ensure!(v == h, "trace {seed} op {i} `{desc}`: overlay {v:?}, host {h:?}; preceded by {:?}", &history[recent..]);
        history.push(format!("{desc} -> {v:?}"));
        ensure!(t.vfs.locks_held() == 0, "trace {seed} op {i} `{desc}` left node locks held");
    }
    t.release_all();

    let counts = counts.lock().unwrap().clone();
    let fetched: BTreeSet<String> = counts.keys().cloned().collect();
    ensure!(counts.values().all(|&c| c == 1), "trace {seed}: a lower file was fetched twice: {counts:?}");
    ensure!(
        fetched == t.model.needed,
        "trace {seed}: fetched {fetched:?}, but the trace needed the bytes of {:?}",
        t.model.needed
    );
    ensure!(t.vfs.fetch_count() as usize == fetched.len(), "overlay fetch counter disagrees with the provider");

    let ours = t.vfs_tree()?;
    let theirs = host_tree(&t.host.root);
    ensure!(ours == theirs, "trace {seed}: final trees differ:\n overlay {:?}\n host    {:?}", ours.keys(), theirs.keys());
    Ok((TRACE_OPS, fetched.len()))
}

/// Whiteouts hide lower entries for the rest of the kernel's life.
fn whiteouts() -> Result<(), String> {
    let mem = provider();
    let counts = mem.fetch_counts();
    let cfg = KernelConfig::new(registry(|_| {})).with_underlay(Box::new(mem));
    let h = boot(cfg)?;
    let c = sh(&h, "rm /l/a && rm /l/sub/c && rm /l/sub/deep/e && rmdir /l/sub/deep && rmdir /l/sub && mkdir /l/sub")?;
    ensure!(c.status == 0, "removal script exited {}: {}", c.status, c.err());
    let c = sh(&h, "cat /l/a")?;
    ensure!(c.status == 1 && c.stdout.is_empty(), "unlinked lower file still readable: {:?}", c.out());
    let c = sh(&h, "ls /l; ls /l/sub")?;
    ensure!(c.out() == "b\nempty\nn\nsub\n" || c.out() == "b\nempty\nsub\n", "listing after removal: {:?}", c.out());
    ensure!(h.read_file("/l/sub/c").is_err(), "recreated directory exposes a lower child");
    let c = sh(&h, "touch /l/a; wc -c < /l/a")?;
    ensure!(c.out().trim() == "0", "recreated file inherited lower bytes: {:?}", c.out());
    ensure!(counts.lock().unwrap().is_empty(), "removal fetched lower bytes: {:?}", counts.lock().unwrap());
    quiesce(&h)?;
    Ok(())
}

pub fn run() -> Result<String, String> {
    let mut ops = 0;
    let mut fetched = 0;
    for seed in 0..TRACES {
        let (o, f) = trace(0x0f5 + seed)?;
        ops += o;
        fetched += f;
    }
    ensure!(ops == TRACES as usize * TRACE_OPS, "ran {ops} ops");
    whiteouts()?;
    Ok(format!(
        "{TRACES} traces x {TRACE_OPS} ops match the host directory; {fetched} lower fetches, each distinct and needed; whiteouts persist"
    ))
}
