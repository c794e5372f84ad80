//! Typed wrappers over [`Guest::call`], one per trap.

use super::{Guest, HeapImage, NotSnapshotable, Reply};
use crate::abi::{self, Signal, O_DIRECTORY, O_RDONLY};
use crate::errno::{Errno, SysResult};
use crate::wire::{decode_dirents, pack_strvec, DirentRecord, StatRecord, Trap, Value, STAT_SIZE};

const PATH_MAX: usize = 4096;
const DIRENT_BUF: usize = 4096;
const READ_CHUNK: usize = 64 * 1024;

fn int(v: impl Into<i64>) -> Value {
    Value::Int(v.into())
}

fn str_arg(s: &str) -> Value {
    Value::Str(s.to_owned())
}

fn unit(r: Reply) -> SysResult<()> {
    r.result().map(|_| ())
}

fn payload(r: Reply) -> SysResult<Vec<u8>> {
    r.result()?;
    Ok(r.payload.unwrap_or_default())
}

fn stat_of(r: Reply) -> SysResult<StatRecord> {
    let bytes = payload(r)?;
    StatRecord::decode(&bytes).ok_or(Errno::EIO)
}

impl Guest {
    pub fn getpid(&mut self) -> u32 {
        self.call(Trap::Getpid, vec![]).ret as u32
    }

    pub fn getppid(&mut self) -> u32 {
        self.call(Trap::Getppid, vec![]).ret as u32
    }

    pub fn getcwd(&mut self) -> SysResult<String> {
        let bytes = payload(self.call(Trap::Getcwd, vec![int(PATH_MAX as i64)]))?;
        String::from_utf8(bytes).map_err(|_| Errno::EIO)
    }

    pub fn chdir(&mut self, path: &str) -> SysResult<()> {
        unit(self.call(Trap::Chdir, vec![str_arg(path)]))
    }

    pub fn open(&mut self, path: &str, flags: i64, mode: i64) -> SysResult<i32> {
        self.call(Trap::Open, vec![str_arg(path), int(flags), int(mode)]).result().map(|fd| fd as i32)
    }

    pub fn close(&mut self, fd: i32) -> SysResult<()> {
        unit(self.call(Trap::Close, vec![int(fd)]))
    }

    /// Reads at most `cap` bytes; an empty result means end of file.
    pub fn read(&mut self, fd: i32, cap: usize) -> SysResult<Vec<u8>> {
        let cap = self.sync_capacity().map_or(cap, |c| cap.min(c));
        payload(self.call(Trap::Read, vec![int(fd), int(cap as i64)]))
    }

    pub fn pread(&mut self, fd: i32, cap: usize, offset: i64) -> SysResult<Vec<u8>> {
        let cap = self.sync_capacity().map_or(cap, |c| cap.min(c));
        payload(self.call(Trap::Pread, vec![int(fd), int(cap as i64), int(offset)]))
    }

    /// May write fewer bytes than given; see [`write_all`](Self::write_all).
    pub fn write(&mut self, fd: i32, data: &[u8]) -> SysResult<usize> {
        let data = match self.sync_capacity() {
            Some(c) if data.len() > c => &data[..c],
            _ => data,
        };
        self.call(Trap::Write, vec![int(fd), Value::Bytes(data.to_vec())]).result().map(|n| n as usize)
    }

    pub fn pwrite(&mut self, fd: i32, data: &[u8], offset: i64) -> SysResult<usize> {
        let data = match self.sync_capacity() {
            Some(c) if data.len() > c => &data[..c],
            _ => data,
        };
        self.call(Trap::Pwrite, vec![int(fd), Value::Bytes(data.to_vec()), int(offset)]).result().map(|n| n as usize)
    }

    /// Writes everything, retrying short writes and EINTR.
    pub fn write_all(&mut self, fd: i32, mut data: &[u8]) -> SysResult<()> {
        while !data.is_empty() {
            match self.write(fd, data) {
                Ok(0) => return Err(Errno::EIO),
                Ok(n) => data = &data[n..],
                Err(Errno::EINTR) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }

    /// Reads until end of file, retrying EINTR.
    pub fn read_to_end(&mut self, fd: i32) -> SysResult<Vec<u8>> {
        let mut out = Vec::new();
        loop {
            match self.read(fd, READ_CHUNK) {
                Ok(chunk) if chunk.is_empty() => return Ok(out),
                Ok(chunk) => out.extend_from_slice(&chunk),
                Err(Errno::EINTR) => {}
                Err(e) => return Err(e),
            }
        }
    }

    pub fn llseek(&mut self, fd: i32, offset: i64, whence: i64) -> SysResult<i64> {
        self.call(Trap::Llseek, vec![int(fd), int(offset), int(whence)]).result()
    }

    pub fn stat(&mut self, path: &str) -> SysResult<StatRecord> {
        stat_of(self.call(Trap::Stat, vec![str_arg(path), int(STAT_SIZE as i64)]))
    }

    pub fn lstat(&mut self, path: &str) -> SysResult<StatRecord> {
        stat_of(self.call(Trap::Lstat, vec![str_arg(path), int(STAT_SIZE as i64)]))
    }

    pub fn fstat(&mut self, fd: i32) -> SysResult<StatRecord> {
        stat_of(self.call(Trap::Fstat, vec![int(fd), int(STAT_SIZE as i64)]))
    }

    pub fn access(&mut self, path: &str, mode: i64) -> SysResult<()> {
        unit(self.call(Trap::Access, vec![str_arg(path), int(mode)]))
    }

    pub fn readlink(&mut self, path: &str) -> SysResult<String> {
        let bytes = payload(self.call(Trap::Readlink, vec![str_arg(path), int(PATH_MAX as i64)]))?;
        String::from_utf8(bytes).map_err(|_| Errno::EIO)
    }

    /// Negative times mean "now".
    pub fn utimes(&mut self, path: &str, atime_ns: i64, mtime_ns: i64) -> SysResult<()> {
        unit(self.call(Trap::Utimes, vec![str_arg(path), int(atime_ns), int(mtime_ns)]))
    }

    pub fn mkdir(&mut self, path: &str, mode: i64) -> SysResult<()> {
        unit(self.call(Trap::Mkdir, vec![str_arg(path), int(mode)]))
    }

    pub fn rmdir(&mut self, path: &str) -> SysResult<()> {
        unit(self.call(Trap::Rmdir, vec![str_arg(path)]))
    }

    pub fn unlink(&mut self, path: &str) -> SysResult<()> {
        unit(self.call(Trap::Unlink, vec![str_arg(path)]))
    }

    /// Raw `getdents` buffer; empty at end of directory.
    pub fn getdents(&mut self, fd: i32, cap: usize) -> SysResult<Vec<u8>> {
        payload(self.call(Trap::Getdents, vec![int(fd), int(cap as i64)]))
    }

    /// Next entry, or `None` at end of directory.
    pub fn readdir(&mut self, fd: i32) -> SysResult<Option<DirentRecord>> {
        let buf = payload(self.call(Trap::Readdir, vec![int(fd), int(DIRENT_BUF as i64)]))?;
        let mut recs = decode_dirents(&buf).map_err(|_| Errno::EIO)?;
        Ok(if recs.is_empty() { None } else { Some(recs.remove(0)) })
    }

    /// All entries of a directory, including `.` and `..`.
    pub fn list_dir(&mut self, path: &str) -> SysResult<Vec<DirentRecord>> {
        let fd = self.open(path, O_RDONLY | O_DIRECTORY, 0)?;
        let mut out = Vec::new();
        let r = loop {
            match self.getdents(fd, DIRENT_BUF) {
                Ok(buf) if buf.is_empty() => break Ok(()),
                Ok(buf) => match decode_dirents(&buf) {
                    Ok(recs) => out.extend(recs),
                    Err(_) => break Err(Errno::EIO),
                },
                Err(e) => break Err(e),
            }
        };
        let _ = self.close(fd);
        r.map(|_| out)
    }

    /// Returns `(read_fd, write_fd)`.
    pub fn pipe(&mut self) -> SysResult<(i32, i32)> {
        let r = self.call(Trap::Pipe2, vec![int(0)]);
        r.result()?;
        Ok((r.ret as i32, r.aux as i32))
    }

    /// Starts `path` in a new process. `grants` maps child fds to this
    /// process's fds; nothing else is inherited.
    pub fn spawn<A: AsRef<str>, E: AsRef<str>>(
        &mut self,
        path: &str,
        argv: &[A],
        env: &[E],
        grants: &[(i32, i32)],
    ) -> SysResult<u32> {
        let flat = grants.iter().flat_map(|(c, p)| [i64::from(*c), i64::from(*p)]).collect();
        let args = vec![str_arg(path), Value::Bytes(pack_strvec(argv)), Value::Bytes(pack_strvec(env)), Value::IntList(flat)];
        self.call(Trap::Spawn, args).result().map(|pid| pid as u32)
    }

    /// Returns `(pid, status)`; pid 0 means nothing was ready under WNOHANG.
    pub fn wait4(&mut self, pid: i32, options: i64) -> SysResult<(u32, i32)> {
        let r = self.call(Trap::Wait4, vec![int(pid), int(options)]);
        r.result()?;
        Ok((r.ret as u32, r.aux as i32))
    }

    /// Waits for `pid`, retrying EINTR; returns the raw status.
    pub fn waitpid(&mut self, pid: i32) -> SysResult<i32> {
        loop {
            match self.wait4(pid, 0) {
                Ok((_, status)) => return Ok(status),
                Err(Errno::EINTR) => {}
                Err(e) => return Err(e),
            }
        }
    }

    pub fn kill(&mut self, pid: i32, sig: Signal) -> SysResult<()> {
        unit(self.call(Trap::Kill, vec![int(pid), int(sig.0)]))
    }

    /// Sets the disposition (`SIG_DFL`, `SIG_IGN` or `SIG_HANDLER`).
    pub fn sigaction(&mut self, sig: Signal, disposition: i64) -> SysResult<()> {
        unit(self.call(Trap::Sigaction, vec![int(sig.0), int(disposition)]))
    }

    pub fn ignore_signal(&mut self, sig: Signal) -> SysResult<()> {
        self.handlers.remove(&sig);
        self.sigaction(sig, abi::SIG_IGN)
    }

    pub fn socket(&mut self, domain: i64, kind: i64, protocol: i64) -> SysResult<i32> {
        self.call(Trap::Socket, vec![int(domain), int(kind), int(protocol)]).result().map(|fd| fd as i32)
    }

    /// Port 0 picks a free port.
    pub fn bind(&mut self, fd: i32, port: u16) -> SysResult<()> {
        unit(self.call(Trap::Bind, vec![int(fd), int(port)]))
    }

    pub fn getsockname(&mut self, fd: i32) -> SysResult<u16> {
        self.call(Trap::Getsockname, vec![int(fd)]).result().map(|p| p as u16)
    }

    pub fn listen(&mut self, fd: i32, backlog: i64) -> SysResult<()> {
        unit(self.call(Trap::Listen, vec![int(fd), int(backlog)]))
    }

    pub fn accept(&mut self, fd: i32) -> SysResult<i32> {
        self.call(Trap::Accept, vec![int(fd)]).result().map(|fd| fd as i32)
    }

    pub fn connect(&mut self, fd: i32, port: u16) -> SysResult<()> {
        unit(self.call(Trap::Connect, vec![int(fd), int(port)]))
    }

    /// Forks with `heap` as the child's state. Returns the child pid in the
    /// parent; the child sees the snapshot through [`resume_from_fork`](Self::resume_from_fork).
    pub fn fork_with<H: HeapImage>(&mut self, heap: &H, resume_pc: u64) -> SysResult<u32> {
        let pc = i64::try_from(resume_pc).map_err(|_| Errno::EINVAL)?;
        self.call(Trap::Fork, vec![Value::Bytes(heap.snapshot()), int(pc)]).result().map(|pid| pid as u32)
    }

    /// In a forked child, the restored state and resume point.
    pub fn resume_from_fork<H: HeapImage>(&self) -> Option<Result<(H, u64), NotSnapshotable>> {
        self.fork_snapshot().map(|s| H::restore(&s.heap).map(|h| (h, s.resume_pc)))
    }

    pub fn read_file(&mut self, path: &str) -> SysResult<Vec<u8>> {
        let fd = self.open(path, O_RDONLY, 0)?;
        let r = self.read_to_end(fd);
        let _ = self.close(fd);
        r
    }

    pub fn write_file(&mut self, path: &str, data: &[u8], mode: i64) -> SysResult<()> {
        let fd = self.open(path, abi::O_WRONLY | abi::O_CREAT | abi::O_TRUNC, mode)?;
        let r = self.write_all(fd, data);
        let c = self.close(fd);
        r.and(c)
    }
}
