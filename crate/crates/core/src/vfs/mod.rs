//! The shared filesystem: a writable in-memory upper layer over an optional
//! read-only underlay whose file bodies are fetched on first read.
//!
//! The visible node at a path is the upper entry when one exists, nothing when
//! the upper layer holds a whiteout there, and otherwise the underlay entry.
//! Every operation takes normalized absolute paths (see [`path::normalize`]).

pub mod path;
pub mod provider;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::abi::{
    O_ACCMODE, O_APPEND, O_CREAT, O_DIRECTORY, O_EXCL, O_RDONLY, O_TRUNC, O_WRONLY, SEEK_CUR, SEEK_END, SEEK_SET,
    S_IFDIR, S_IFREG, W_OK, X_OK,
};
use crate::errno::{Errno, SysResult};
use crate::wire::{encode_dirents_at, StatRecord, DT_DIR, DT_REG};
pub use provider::{
    provider_from_spec, DirProvider, HttpProvider, ManifestEntry, ManifestKind, MemProvider, ProviderError,
    UnderlayProvider,
};

pub type Ino = u64;

const ROOT_INO: Ino = 1;

#[derive(Debug, Error)]
pub enum FsInitError {
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error("underlay manifest entry {0:?} is not an absolute normalized path")]
    BadPath(String),
    #[error("cannot stage {path}: {reason}")]
    Stage { path: String, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Slot {
    Node(Ino),
    Whiteout,
}

#[derive(Debug)]
enum Body {
    File(Vec<u8>),
    Dir,
}

#[derive(Debug)]
struct Inode {
    body: Body,
    perm: u32,
    atime_ns: i64,
    mtime_ns: i64,
    linked: bool,
    opens: u32,
}

#[derive(Debug)]
struct LowerEntry {
    kind: ManifestKind,
    size: u64,
    ino: Ino,
    content: Option<Arc<Vec<u8>>>,
}

struct Lower {
    entries: BTreeMap<String, LowerEntry>,
    provider: Box<dyn UnderlayProvider>,
}

/// A visible node: either an upper inode or an underlay entry keyed by path.
#[derive(Clone, Debug, PartialEq, Eq)]
enum Node {
    Upper(Ino),
    Lower(String),
}

/// Open regular file. Must be returned through [`Vfs::release`].
#[derive(Debug)]
pub struct OpenFile {
    node: Node,
    flags: i64,
    cursor: u64,
}

impl OpenFile {
    pub fn flags(&self) -> i64 {
        self.flags
    }

    pub fn readable(&self) -> bool {
        self.flags & O_ACCMODE != O_WRONLY
    }

    pub fn writable(&self) -> bool {
        self.flags & O_ACCMODE != O_RDONLY
    }
}

/// Open directory with its listing cursor.
#[derive(Debug)]
pub struct OpenDir {
    path: String,
    cursor: u64,
    snapshot: Option<Vec<(String, Ino, u8)>>,
}

impl OpenDir {
    pub fn path(&self) -> &str {
        &self.path
    }
}

#[derive(Debug)]
pub enum Opened {
    File(OpenFile),
    Dir(OpenDir),
}

pub struct Vfs {
    upper: BTreeMap<String, Slot>,
    inodes: HashMap<Ino, Inode>,
    lower: Option<Lower>,
    next_ino: Ino,
    held: HashSet<String>,
    fetches: u64,
}

fn now_ns() -> i64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as i64).unwrap_or(0)
}

/// Iterates keys of `map` that are direct children of `dir`.
fn children<'a, V>(map: &'a BTreeMap<String, V>, dir: &str) -> impl Iterator<Item = (&'a str, &'a V)> + 'a {
    let prefix = if dir == "/" { "/".to_owned() } else { format!("{dir}/") };
    let plen = prefix.len();
    map.range(prefix.clone()..)
        .take_while(move |(k, _)| k.starts_with(&prefix))
        .filter(move |(k, _)| k.len() > plen && !k[plen..].contains('/'))
        .map(move |(k, v)| (&k[plen..], v))
}

impl Vfs {
    /// An empty filesystem containing only `/`.
    pub fn new() -> Self {
        let mut vfs = Vfs {
            upper: BTreeMap::new(),
            inodes: HashMap::new(),
            lower: None,
            next_ino: ROOT_INO,
            held: HashSet::new(),
            fetches: 0,
        };
        let root = vfs.alloc(Body::Dir, 0o755);
        vfs.upper.insert("/".to_owned(), Slot::Node(root));
        vfs
    }

    /// An empty upper layer over the given underlay. Reads the manifest once.
    pub fn with_underlay(provider: Box<dyn UnderlayProvider>) -> Result<Self, FsInitError> {
        let manifest = provider.manifest()?;
        let mut vfs = Vfs::new();
        let mut entries = BTreeMap::new();
        for e in manifest {
            if path::normalize("/", &e.path).ok().as_deref() != Some(e.path.as_str()) || e.path == "/" {
                return Err(FsInitError::BadPath(e.path));
            }
            for anc in path::ancestors(&e.path) {
                if !entries.contains_key(anc) {
                    let ino = vfs.fresh_ino();
                    entries.insert(
                        anc.to_owned(),
                        LowerEntry { kind: ManifestKind::Dir, size: 0, ino, content: None },
                    );
                }
            }
            let ino = vfs.fresh_ino();
            entries.insert(e.path, LowerEntry { kind: e.kind, size: e.size, ino, content: None });
        }
        vfs.lower = Some(Lower { entries, provider });
        Ok(vfs)
    }

    fn fresh_ino(&mut self) -> Ino {
        let ino = self.next_ino;
        self.next_ino += 1;
        ino
    }

    fn alloc(&mut self, body: Body, perm: u32) -> Ino {
        let ino = self.fresh_ino();
        let now = now_ns();
        self.inodes.insert(ino, Inode { body, perm, atime_ns: now, mtime_ns: now, linked: true, opens: 0 });
        ino
    }

    /// Number of underlay fetches performed so far.
    pub fn fetch_count(&self) -> u64 {
        self.fetches
    }

    /// Node locks currently held. Zero whenever no operation is in progress.
    pub fn locks_held(&self) -> usize {
        self.held.len()
    }

    /// Runs `f` holding the locks for `paths`. Re-acquiring a held lock is a bug.
    fn locked<T>(&mut self, paths: &[&str], f: impl FnOnce(&mut Self) -> T) -> T {
        let mut paths = paths.to_vec();
        paths.dedup();
        for p in &paths {
            assert!(self.held.insert((*p).to_owned()), "node lock re-entered for {p}");
        }
        let out = f(self);
        for p in &paths {
            self.held.remove(*p);
        }
        out
    }

    fn visible(&self, path: &str) -> Option<Node> {
        match self.upper.get(path) {
            Some(Slot::Node(ino)) => Some(Node::Upper(*ino)),
            Some(Slot::Whiteout) => None,
            None => self.lower.as_ref()?.entries.get(path).map(|_| Node::Lower(path.to_owned())),
        }
    }

    fn is_dir(&self, node: &Node) -> bool {
        match node {
            Node::Upper(ino) => matches!(self.inodes[ino].body, Body::Dir),
            Node::Lower(p) => self.lower_entry(p).kind == ManifestKind::Dir,
        }
    }

    fn lower_entry(&self, path: &str) -> &LowerEntry {
        &self.lower.as_ref().expect("lower node without underlay").entries[path]
    }

    /// Checks that every ancestor of `path` is a visible directory.
    fn walk_parents(&self, path: &str) -> SysResult<()> {
        for anc in path::ancestors(path) {
            match self.visible(anc) {
                Some(n) if self.is_dir(&n) => {}
                Some(_) => return Err(Errno::ENOTDIR),
                None => return Err(Errno::ENOENT),
            }
        }
        Ok(())
    }

    fn lookup(&self, path: &str) -> SysResult<Node> {
        self.walk_parents(path)?;
        self.visible(path).ok_or(Errno::ENOENT)
    }

    pub fn exists(&self, path: &str) -> bool {
        self.lookup(path).is_ok()
    }

    fn node_stat(&self, node: &Node) -> StatRecord {
        match node {
            Node::Upper(ino) => {
                let i = &self.inodes[ino];
                let (size, kind, nlink) = match &i.body {
                    Body::File(d) => (d.len() as u64, S_IFREG, 1),
                    Body::Dir => (0, S_IFDIR, 2),
                };
                StatRecord { ino: *ino, size, mode: kind | i.perm, nlink, atime_ns: i.atime_ns, mtime_ns: i.mtime_ns }
            }
            Node::Lower(p) => {
                let e = self.lower_entry(p);
                let (size, mode, nlink) = match e.kind {
                    ManifestKind::File => (e.size, S_IFREG | 0o644, 1),
                    ManifestKind::Dir => (0, S_IFDIR | 0o755, 2),
                };
                StatRecord { ino: e.ino, size, mode, nlink, atime_ns: 0, mtime_ns: 0 }
            }
        }
    }

    pub fn stat(&self, path: &str) -> SysResult<StatRecord> {
        self.lookup(path).map(|n| self.node_stat(&n))
    }

    pub fn access(&self, path: &str, mode: i64) -> SysResult<()> {
        let st = self.stat(path)?;
        if mode & X_OK != 0 && st.mode & 0o111 == 0 {
            return Err(Errno::EACCES);
        }
        if mode & W_OK != 0 && st.mode & 0o222 == 0 {
            return Err(Errno::EACCES);
        }
        Ok(())
    }

    /// There are no symbolic links, so any existing path is not one.
    pub fn readlink(&self, path: &str) -> SysResult<String> {
        self.lookup(path)?;
        Err(Errno::EINVAL)
    }

    /// Sets timestamps; negative values mean "now". Copies lower entries up.
    pub fn utimes(&mut self, path: &str, atime_ns: i64, mtime_ns: i64) -> SysResult<()> {
        self.locked(&[path], |vfs| {
            let ino = match vfs.lookup(path)? {
                Node::Upper(ino) => ino,
                Node::Lower(_) => vfs.copy_up(path)?,
            };
            let now = now_ns();
            let i = vfs.inodes.get_mut(&ino).unwrap();
            i.atime_ns = if atime_ns < 0 { now } else { atime_ns };
            i.mtime_ns = if mtime_ns < 0 { now } else { mtime_ns };
            Ok(())
        })
    }

    pub fn chmod(&mut self, path: &str, perm: u32) -> SysResult<()> {
        self.locked(&[path], |vfs| {
            let ino = match vfs.lookup(path)? {
                Node::Upper(ino) => ino,
                Node::Lower(_) => vfs.copy_up(path)?,
            };
            vfs.inodes.get_mut(&ino).unwrap().perm = perm & 0o7777;
            Ok(())
        })
    }

    fn lower_content(&mut self, path: &str) -> SysResult<Arc<Vec<u8>>> {
        let lower = self.lower.as_mut().expect("lower node without underlay");
        let entry = lower.entries.get_mut(path).ok_or(Errno::ENOENT)?;
        if let Some(c) = &entry.content {
            return Ok(c.clone());
        }
        let data = lower.provider.fetch(path).map_err(|_| Errno::EIO)?;
        let data = Arc::new(data);
        entry.content = Some(data.clone());
        self.fetches += 1;
        Ok(data)
    }

    /// Materializes a lower entry into the upper layer. The caller holds the lock.
    fn copy_up(&mut self, path: &str) -> SysResult<Ino> {
        debug_assert!(self.held.contains(path));
        let body = match self.lower_entry(path).kind {
            ManifestKind::Dir => Body::Dir,
            ManifestKind::File => Body::File(self.lower_content(path)?.as_ref().clone()),
        };
        let perm = if matches!(body, Body::Dir) { 0o755 } else { 0o644 };
        let ino = self.alloc(body, perm);
        let i = self.inodes.get_mut(&ino).unwrap();
        i.atime_ns = 0;
        i.mtime_ns = 0;
        self.upper.insert(path.to_owned(), Slot::Node(ino));
        Ok(ino)
    }

    fn touch_parent(&mut self, path: &str) {
        if let Some(Slot::Node(ino)) = self.upper.get(path::parent(path)) {
            if let Some(i) = self.inodes.get_mut(ino) {
                i.mtime_ns = now_ns();
            }
        }
    }

    pub fn open(&mut self, path: &str, flags: i64, perm: u32) -> SysResult<Opened> {
        let parent = path::parent(path).to_owned();
        self.locked(&[path, &parent], |vfs| vfs.open_locked(path, flags, perm))
    }

    fn open_locked(&mut self, path: &str, flags: i64, perm: u32) -> SysResult<Opened> {
        let writable = flags & O_ACCMODE != O_RDONLY;
        self.walk_parents(path)?;
        let node = match self.visible(path) {
            Some(_) if flags & O_CREAT != 0 && flags & O_EXCL != 0 => return Err(Errno::EEXIST),
            Some(n) => n,
            None if flags & O_CREAT != 0 => {
                if flags & O_DIRECTORY != 0 {
                    return Err(Errno::EINVAL);
                }
                let ino = self.alloc(Body::File(Vec::new()), perm & 0o7777);
                self.upper.insert(path.to_owned(), Slot::Node(ino));
                self.touch_parent(path);
                Node::Upper(ino)
            }
            None => return Err(Errno::ENOENT),
        };
        if self.is_dir(&node) {
            if writable || flags & O_CREAT != 0 {
                return Err(Errno::EISDIR);
            }
            return Ok(Opened::Dir(OpenDir { path: path.to_owned(), cursor: 0, snapshot: None }));
        }
        if flags & O_DIRECTORY != 0 {
            return Err(Errno::ENOTDIR);
        }
        let node = match node {
            Node::Lower(_) if writable || flags & O_TRUNC != 0 => Node::Upper(self.copy_up(path)?),
            n => n,
        };
        if let Node::Upper(ino) = node {
            let i = self.inodes.get_mut(&ino).unwrap();
            if flags & O_TRUNC != 0 && writable {
                if let Body::File(d) = &mut i.body {
                    d.clear();
                }
                i.mtime_ns = now_ns();
            }
            i.opens += 1;
        }
        Ok(Opened::File(OpenFile { node, flags, cursor: 0 }))
    }

    /// Drops an open file. Unlinked inodes are freed with their last handle.
    pub fn release(&mut self, file: OpenFile) {
        if let Node::Upper(ino) = file.node {
            let i = self.inodes.get_mut(&ino).expect("open inode vanished");
            i.opens -= 1;
            if i.opens == 0 && !i.linked {
                self.inodes.remove(&ino);
            }
        }
    }

    /// Duplicates a handle for fork; both copies must be released.
    pub fn dup_file(&mut self, file: &OpenFile) -> OpenFile {
        if let Node::Upper(ino) = file.node {
            self.inodes.get_mut(&ino).unwrap().opens += 1;
        }
        OpenFile { node: file.node.clone(), flags: file.flags, cursor: file.cursor }
    }

    pub fn fstat(&self, file: &OpenFile) -> StatRecord {
        self.node_stat(&file.node)
    }

    pub fn fstat_dir(&self, dir: &OpenDir) -> SysResult<StatRecord> {
        self.stat(&dir.path)
    }

    fn file_size(&self, node: &Node) -> u64 {
        self.node_stat(node).size
    }

    pub fn pread(&mut self, file: &OpenFile, offset: i64, len: usize) -> SysResult<Vec<u8>> {
        if !file.readable() {
            return Err(Errno::EBADF);
        }
        if offset < 0 {
            return Err(Errno::EINVAL);
        }
        let off = offset as u64;
        let slice = |data: &[u8]| -> Vec<u8> {
            let start = (off.min(data.len() as u64)) as usize;
            let end = start.saturating_add(len).min(data.len());
            data[start..end].to_vec()
        };
        match &file.node {
            Node::Upper(ino) => match &self.inodes[ino].body {
                Body::File(d) => Ok(slice(d)),
                Body::Dir => Err(Errno::EISDIR),
            },
            Node::Lower(p) => {
                if off >= self.lower_entry(p).size || len == 0 {
                    return Ok(Vec::new());
                }
                let p = p.clone();
                let data = self.lower_content(&p)?;
                Ok(slice(&data))
            }
        }
    }

    pub fn pwrite(&mut self, file: &OpenFile, offset: i64, data: &[u8]) -> SysResult<usize> {
        if !file.writable() {
            return Err(Errno::EBADF);
        }
        if offset < 0 {
            return Err(Errno::EINVAL);
        }
        let Node::Upper(ino) = file.node else { unreachable!("writable handles refer to upper nodes") };
        let lock = format!("#{ino}");
        self.locked(&[&lock], |vfs| {
            let i = vfs.inodes.get_mut(&ino).unwrap();
            let Body::File(buf) = &mut i.body else { return Err(Errno::EISDIR) };
            let off = if file.flags & O_APPEND != 0 { buf.len() } else { offset as usize };
            if data.is_empty() {
                return Ok(0);
            }
            let end = off.checked_add(data.len()).ok_or(Errno::EINVAL)?;
            if buf.len() < end {
                buf.resize(end, 0);
            }
            buf[off..end].copy_from_slice(data);
            i.mtime_ns = now_ns();
            Ok(data.len())
        })
    }

    /// Reads at the cursor and advances it.
    pub fn read(&mut self, file: &mut OpenFile, len: usize) -> SysResult<Vec<u8>> {
        let data = self.pread(file, file.cursor as i64, len)?;
        file.cursor += data.len() as u64;
        Ok(data)
    }

    /// Writes at the cursor (or the end, under O_APPEND) and advances it.
    pub fn write(&mut self, file: &mut OpenFile, data: &[u8]) -> SysResult<usize> {
        let off = if file.flags & O_APPEND != 0 { self.file_size(&file.node) } else { file.cursor };
        let n = self.pwrite(file, off as i64, data)?;
        file.cursor = off + n as u64;
        Ok(n)
    }

    pub fn seek(&self, file: &mut OpenFile, offset: i64, whence: i64) -> SysResult<u64> {
        let base = match whence {
            SEEK_SET => 0,
            SEEK_CUR => file.cursor as i64,
            SEEK_END => self.file_size(&file.node) as i64,
            _ => return Err(Errno::EINVAL),
        };
        let pos = base.checked_add(offset).filter(|p| *p >= 0).ok_or(Errno::EINVAL)?;
        file.cursor = pos as u64;
        Ok(file.cursor)
    }

    /// Repositions a directory cursor. Only rewinding and restoring values
    /// previously reported in dirent records are meaningful.
    pub fn seek_dir(&self, dir: &mut OpenDir, offset: i64, whence: i64) -> SysResult<u64> {
        let pos = match whence {
            SEEK_SET => offset,
            SEEK_CUR => (dir.cursor as i64).checked_add(offset).ok_or(Errno::EINVAL)?,
            _ => return Err(Errno::EINVAL),
        };
        if pos < 0 {
            return Err(Errno::EINVAL);
        }
        dir.cursor = pos as u64;
        if pos == 0 {
            dir.snapshot = None;
        }
        Ok(dir.cursor)
    }

    /// Merged listing of a directory with "." and "..", names sorted.
    pub fn list_dir(&self, dir: &str) -> SysResult<Vec<(String, Ino, u8)>> {
        let node = self.lookup(dir)?;
        if !self.is_dir(&node) {
            return Err(Errno::ENOTDIR);
        }
        let mut names: BTreeMap<String, (Ino, u8)> = BTreeMap::new();
        let mut hidden = HashSet::new();
        for (name, slot) in children(&self.upper, dir) {
            match slot {
                Slot::Node(ino) => {
                    let dt = if matches!(self.inodes[ino].body, Body::Dir) { DT_DIR } else { DT_REG };
                    names.insert(name.to_owned(), (*ino, dt));
                }
                Slot::Whiteout => {
                    hidden.insert(name.to_owned());
                }
            }
        }
        if let Some(lower) = &self.lower {
            for (name, e) in children(&lower.entries, dir) {
                if !hidden.contains(name) && !names.contains_key(name) {
                    let dt = if e.kind == ManifestKind::Dir { DT_DIR } else { DT_REG };
                    names.insert(name.to_owned(), (e.ino, dt));
                }
            }
        }
        let self_ino = self.node_stat(&node).ino;
        let parent_ino = self.stat(path::parent(dir))?.ino;
        let mut out = vec![(".".to_owned(), self_ino, DT_DIR), ("..".to_owned(), parent_ino, DT_DIR)];
        out.extend(names.into_iter().map(|(n, (ino, dt))| (n, ino, dt)));
        Ok(out)
    }

    /// Encodes as many entries as fit in `cap`, continuing from the cursor.
    /// The listing is captured on the first call after open or rewind.
    pub fn getdents(&self, dir: &mut OpenDir, cap: usize) -> SysResult<Vec<u8>> {
        if dir.snapshot.is_none() {
            dir.snapshot = Some(self.list_dir(&dir.path)?);
        }
        let snap = dir.snapshot.as_ref().unwrap();
        let start = (dir.cursor as usize).min(snap.len());
        let rest: Vec<(&str, u64, u8)> = snap[start..].iter().map(|(n, i, t)| (n.as_str(), *i, *t)).collect();
        let (buf, count) = encode_dirents_at(&rest, cap, start as u64).map_err(|_| Errno::EINVAL)?;
        dir.cursor = (start + count) as u64;
        Ok(buf)
    }

    /// Like [`getdents`](Self::getdents) but returns at most one entry.
    pub fn readdir(&self, dir: &mut OpenDir, cap: usize) -> SysResult<Vec<u8>> {
        if dir.snapshot.is_none() {
            dir.snapshot = Some(self.list_dir(&dir.path)?);
        }
        let snap = dir.snapshot.as_ref().unwrap();
        let start = (dir.cursor as usize).min(snap.len());
        let next: Vec<(&str, u64, u8)> = snap[start..].iter().take(1).map(|(n, i, t)| (n.as_str(), *i, *t)).collect();
        let (buf, count) = encode_dirents_at(&next, cap, start as u64).map_err(|_| Errno::EINVAL)?;
        dir.cursor = (start + count) as u64;
        Ok(buf)
    }

    pub fn mkdir(&mut self, path: &str, perm: u32) -> SysResult<()> {
        let parent = path::parent(path).to_owned();
        if parent == path {
            return Err(Errno::EEXIST);
        }
        self.locked(&[path, &parent], |vfs| {
            vfs.walk_parents(path)?;
            if vfs.visible(path).is_some() {
                return Err(Errno::EEXIST);
            }
            let ino = vfs.alloc(Body::Dir, perm & 0o7777);
            vfs.upper.insert(path.to_owned(), Slot::Node(ino));
            vfs.touch_parent(path);
            Ok(())
        })
    }

    /// Creates `path` and any missing ancestors. Existing directories are fine.
    pub fn mkdir_all(&mut self, path: &str) -> SysResult<()> {
        let mut all: Vec<&str> = path::ancestors(path).collect();
        all.push(path);
        for p in all {
            if p == "/" {
                continue;
            }
            match self.mkdir(p, 0o755) {
                Ok(()) => {}
                Err(Errno::EEXIST) if self.stat(p)?.is_dir() => {}
                Err(Errno::EEXIST) => return Err(Errno::ENOTDIR),
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    fn remove_entry(&mut self, path: &str) {
        if let Some(Slot::Node(ino)) = self.upper.remove(path) {
            let i = self.inodes.get_mut(&ino).unwrap();
            i.linked = false;
            if i.opens == 0 {
                self.inodes.remove(&ino);
            }
        }
        if self.lower.as_ref().is_some_and(|l| l.entries.contains_key(path)) {
            self.upper.insert(path.to_owned(), Slot::Whiteout);
        }
        self.touch_parent(path);
    }

    pub fn rmdir(&mut self, path: &str) -> SysResult<()> {
        let parent = path::parent(path).to_owned();
        if parent == path {
            return Err(Errno::EBUSY);
        }
        self.locked(&[path, &parent], |vfs| {
            if vfs.list_dir(path)?.len() > 2 {
                return Err(Errno::ENOTEMPTY);
            }
            // Whiteouts under the directory stay: they keep lower children
            // hidden if the directory is created again.
            vfs.remove_entry(path);
            Ok(())
        })
    }

    pub fn unlink(&mut self, path: &str) -> SysResult<()> {
        let parent = path::parent(path).to_owned();
        self.locked(&[path, &parent], |vfs| {
            let node = vfs.lookup(path)?;
            if vfs.is_dir(&node) {
                return Err(Errno::EISDIR);
            }
            vfs.remove_entry(path);
            Ok(())
        })
    }

    /// Reads a whole file by path.
    pub fn read_file(&mut self, path: &str) -> SysResult<Vec<u8>> {
        match self.lookup(path)? {
            Node::Upper(ino) => match &self.inodes[&ino].body {
                Body::File(d) => Ok(d.clone()),
                Body::Dir => Err(Errno::EISDIR),
            },
            Node::Lower(p) => {
                if self.lower_entry(&p).kind == ManifestKind::Dir {
                    return Err(Errno::EISDIR);
                }
                Ok(self.lower_content(&p)?.as_ref().clone())
            }
        }
    }

    /// Creates or replaces a file by path with the given permissions.
    pub fn write_file(&mut self, path: &str, data: &[u8], perm: u32) -> SysResult<()> {
        let Opened::File(f) = self.open(path, O_WRONLY | O_CREAT | O_TRUNC, perm)? else {
            return Err(Errno::EISDIR);
        };
        let r = self.pwrite(&f, 0, data);
        if let Node::Upper(ino) = f.node {
            self.inodes.get_mut(&ino).unwrap().perm = perm & 0o7777;
        }
        self.release(f);
        r.map(|_| ())
    }

    /// Inodes alive in the upper layer, including unlinked-but-open ones.
    pub fn inode_count(&self) -> usize {
        self.inodes.len()
    }
}

impl Default for Vfs {
    fn default() -> Self {
        Vfs::new()
    }
}
