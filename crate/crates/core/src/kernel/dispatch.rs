//! Per-trap handlers, shared by both calling conventions.

use super::{data, ok, CallRef, Convention, Disposition, Kernel, ObjKind, Pid, Waiter};
use crate::abi::{Signal, SIG_DFL, SIG_HANDLER, SIG_IGN, SOCK_STREAM, S_IFIFO, S_IFSOCK};
use crate::errno::{Errno, SysResult};
use crate::guest::Reply;
use crate::vfs::{path, Opened};
use crate::wire::{unpack_strvec, StatRecord, Trap, Value};
use crate::worker::AttachError;

/// Typed access to call arguments.
struct Args(Vec<Value>);

impl Args {
    fn int(&self, i: usize) -> SysResult<i64> {
        match self.0.get(i) {
            Some(Value::Int(v)) => Ok(*v),
            _ => Err(Errno::EINVAL),
        }
    }

    fn fd(&self, i: usize) -> SysResult<i32> {
        i32::try_from(self.int(i)?).map_err(|_| Errno::EBADF)
    }

    fn len(&self, i: usize) -> SysResult<usize> {
        usize::try_from(self.int(i)?).map_err(|_| Errno::EINVAL)
    }

    fn str(&self, i: usize) -> SysResult<&str> {
        match self.0.get(i) {
            Some(Value::Str(s)) => Ok(s),
            _ => Err(Errno::EINVAL),
        }
    }

    fn take_bytes(&mut self, i: usize) -> SysResult<Vec<u8>> {
        match self.0.get_mut(i) {
            Some(Value::Bytes(b)) => Ok(std::mem::take(b)),
            _ => Err(Errno::EINVAL),
        }
    }

    fn strvec(&self, i: usize) -> SysResult<Vec<String>> {
        match self.0.get(i) {
            Some(Value::Bytes(b)) => match unpack_strvec(b) {
                Ok((v, used)) if used == b.len() => Ok(v),
                _ => Err(Errno::EINVAL),
            },
            _ => Err(Errno::EINVAL),
        }
    }

    fn int_list(&self, i: usize) -> SysResult<&[i64]> {
        match self.0.get(i) {
            Some(Value::IntList(l)) => Ok(l),
            _ => Err(Errno::EINVAL),
        }
    }
}

fn unit(r: SysResult<()>) -> Option<Reply> {
    Some(match r {
        Ok(()) => ok(0),
        Err(e) => Reply::err(e),
    })
}

fn stat_reply(st: StatRecord, cap: usize) -> Reply {
    let mut bytes = st.encode();
    bytes.truncate(cap);
    Reply { ret: 0, aux: 0, errno: 0, payload: Some(bytes) }
}

fn synthetic_stat(obj: u64, kind: u32) -> StatRecord {
    StatRecord { ino: 1 << 40 | obj, size: 0, mode: kind | 0o600, nlink: 1, atime_ns: 0, mtime_ns: 0 }
}

impl Kernel {
    /// Runs one call. Calls that park are answered later through [`Kernel::finish`].
    pub(super) fn dispatch(&mut self, pid: Pid, call: CallRef, trap: u32, args: Vec<Value>) {
        let r = match Trap::from_u32(trap) {
            None => Some(Reply::err(Errno::ENOSYS)),
            Some(t) if args.len() != t.sig().args.len() => Some(Reply::err(Errno::EINVAL)),
            Some(t) => match self.handle(pid, call, t, Args(args)) {
                Ok(r) => r,
                Err(e) => Some(Reply::err(e)),
            },
        };
        if let Some(r) = r {
            self.reply(pid, call, r);
        }
    }

    fn abs(&self, pid: Pid, p: &str) -> SysResult<String> {
        path::normalize(&self.tasks[&pid].cwd, p)
    }

    fn handle(&mut self, pid: Pid, call: CallRef, trap: Trap, mut a: Args) -> SysResult<Option<Reply>> {
        let who = Waiter::Task { pid, call };
        Ok(match trap {
            Trap::Exit => {
                let code = a.int(0)? as i32;
                self.exit_task(pid, crate::abi::exit_status(code));
                None
            }
            Trap::Fork => {
                let heap = a.take_bytes(0)?;
                let pc = u64::try_from(a.int(1)?).map_err(|_| Errno::EINVAL)?;
                Some(ok(i64::from(self.fork_task(pid, heap, pc)?)))
            }
            Trap::Spawn => {
                let target = a.str(0)?.to_owned();
                let argv = a.strvec(1)?;
                let env = a.strvec(2)?;
                let flat = a.int_list(3)?;
                if flat.len() % 2 != 0 {
                    return Err(Errno::EINVAL);
                }
                let grants = flat
                    .chunks_exact(2)
                    .map(|p| Ok((i32::try_from(p[0]).map_err(|_| Errno::EBADF)?, i32::try_from(p[1]).map_err(|_| Errno::EBADF)?)))
                    .collect::<SysResult<Vec<_>>>()?;
                let cwd = self.tasks[&pid].cwd.clone();
                let child = self.spawn_task(pid, &cwd, &target, argv, crate::worker::environ_from_pairs(&env), &grants)?;
                Some(ok(i64::from(child)))
            }
            Trap::Pipe2 => {
                a.int(0)?;
                let p = self.ipc.pipe_create();
                let rfd = match self.install_object(pid, ObjKind::PipeRead(p)) {
                    Ok(fd) => fd,
                    Err(e) => {
                        let done = self.ipc.pipe_close_write(p);
                        self.finish(done);
                        return Err(e);
                    }
                };
                match self.install_object(pid, ObjKind::PipeWrite(p)) {
                    Ok(wfd) => Some(Reply { ret: i64::from(rfd), aux: i64::from(wfd), errno: 0, payload: None }),
                    Err(e) => {
                        self.close_fd(pid, rfd)?;
                        return Err(e);
                    }
                }
            }
            Trap::Wait4 => self.wait4(pid, call, a.int(0)? as i32, a.int(1)?)?,
            Trap::Chdir => {
                let p = self.abs(pid, a.str(0)?)?;
                if !self.vfs.stat(&p)?.is_dir() {
                    return Err(Errno::ENOTDIR);
                }
                self.tasks.get_mut(&pid).unwrap().cwd = p;
                Some(ok(0))
            }
            Trap::Getcwd => {
                let cap = a.len(0)?;
                let cwd = self.tasks[&pid].cwd.as_bytes().to_vec();
                if cwd.len() > cap {
                    return Err(Errno::ERANGE);
                }
                Some(data(cwd))
            }
            Trap::Getpid => Some(ok(i64::from(pid))),
            Trap::Getppid => Some(ok(i64::from(self.tasks[&pid].ppid))),
            Trap::Socket => {
                let (_domain, kind, _proto) = (a.int(0)?, a.int(1)?, a.int(2)?);
                if kind & 0xf != SOCK_STREAM {
                    return Err(Errno::EOPNOTSUPP);
                }
                let s = self.ipc.socket_create();
                Some(ok(i64::from(self.install_object(pid, ObjKind::Socket(s))?)))
            }
            Trap::Bind => {
                let s = self.socket_of(pid, a.fd(0)?)?;
                let port = u16::try_from(a.int(1)?).map_err(|_| Errno::EINVAL)?;
                self.ipc.bind(s, port)?;
                Some(ok(0))
            }
            Trap::Getsockname => {
                let s = self.socket_of(pid, a.fd(0)?)?;
                Some(ok(i64::from(self.ipc.getsockname(s)?)))
            }
            Trap::Listen => {
                let s = self.socket_of(pid, a.fd(0)?)?;
                let backlog = a.len(1).unwrap_or(0);
                let port = self.ipc.listen(s, backlog)?;
                self.fire_listen(port);
                Some(ok(0))
            }
            Trap::Accept => {
                let s = self.socket_of(pid, a.fd(0)?)?;
                let done = self.ipc.accept(s, who);
                self.finish(done);
                None
            }
            Trap::Connect => {
                let s = self.socket_of(pid, a.fd(0)?)?;
                let port = u16::try_from(a.int(1)?).map_err(|_| Errno::ECONNREFUSED)?;
                let done = self.ipc.connect(s, port, who);
                self.finish(done);
                None
            }
            Trap::Readdir | Trap::Getdents => {
                let obj = self.fd_object(pid, a.fd(0)?)?;
                let cap = a.len(1)?;
                let single = trap == Trap::Readdir;
                let Kernel { objects, vfs, .. } = &mut *self;
                match &mut objects.get_mut(&obj).unwrap().kind {
                    ObjKind::Dir(d) => Some(data(if single { vfs.readdir(d, cap)? } else { vfs.getdents(d, cap)? })),
                    _ => return Err(Errno::ENOTDIR),
                }
            }
            Trap::Rmdir => {
                let p = self.abs(pid, a.str(0)?)?;
                unit(self.vfs.rmdir(&p))
            }
            Trap::Mkdir => {
                let p = self.abs(pid, a.str(0)?)?;
                unit(self.vfs.mkdir(&p, (a.int(1)? & 0o7777) as u32))
            }
            Trap::Open => {
                let p = self.abs(pid, a.str(0)?)?;
                let opened = self.vfs.open(&p, a.int(1)?, (a.int(2)? & 0o7777) as u32)?;
                let kind = match opened {
                    Opened::File(f) => ObjKind::File(f),
                    Opened::Dir(d) => ObjKind::Dir(d),
                };
                Some(ok(i64::from(self.install_object(pid, kind)?)))
            }
            Trap::Close => unit(self.close_fd(pid, a.fd(0)?)),
            Trap::Unlink => {
                let p = self.abs(pid, a.str(0)?)?;
                unit(self.vfs.unlink(&p))
            }
            Trap::Llseek => {
                let obj = self.fd_object(pid, a.fd(0)?)?;
                let (off, whence) = (a.int(1)?, a.int(2)?);
                let Kernel { objects, vfs, .. } = &mut *self;
                let pos = match &mut objects.get_mut(&obj).unwrap().kind {
                    ObjKind::File(f) => vfs.seek(f, off, whence)?,
                    ObjKind::Dir(d) => vfs.seek_dir(d, off, whence)?,
                    _ => return Err(Errno::ESPIPE),
                };
                Some(ok(pos as i64))
            }
            Trap::Pread => {
                let obj = self.fd_object(pid, a.fd(0)?)?;
                let (cap, off) = (a.len(1)?, a.int(2)?);
                let Kernel { objects, vfs, .. } = &mut *self;
                match &objects[&obj].kind {
                    ObjKind::File(f) => Some(data(vfs.pread(f, off, cap)?)),
                    ObjKind::Dir(_) => return Err(Errno::EISDIR),
                    _ => return Err(Errno::ESPIPE),
                }
            }
            Trap::Pwrite => {
                let obj = self.fd_object(pid, a.fd(0)?)?;
                let bytes = a.take_bytes(1)?;
                let off = a.int(2)?;
                let Kernel { objects, vfs, .. } = &mut *self;
                match &objects[&obj].kind {
                    ObjKind::File(f) => Some(ok(vfs.pwrite(f, off, &bytes)? as i64)),
                    ObjKind::Dir(_) => return Err(Errno::EBADF),
                    _ => return Err(Errno::ESPIPE),
                }
            }
            Trap::Access => {
                let p = self.abs(pid, a.str(0)?)?;
                unit(self.vfs.access(&p, a.int(1)?))
            }
            Trap::Fstat => {
                let obj = self.fd_object(pid, a.fd(0)?)?;
                let cap = a.len(1)?;
                let st = match &self.objects[&obj].kind {
                    ObjKind::File(f) => self.vfs.fstat(f),
                    ObjKind::Dir(d) => self.vfs.fstat_dir(d)?,
                    ObjKind::PipeRead(_) | ObjKind::PipeWrite(_) => synthetic_stat(obj, S_IFIFO),
                    ObjKind::Socket(_) => synthetic_stat(obj, S_IFSOCK),
                };
                Some(stat_reply(st, cap))
            }
            Trap::Lstat | Trap::Stat => {
                let p = self.abs(pid, a.str(0)?)?;
                Some(stat_reply(self.vfs.stat(&p)?, a.len(1)?))
            }
            Trap::Readlink => {
                let p = self.abs(pid, a.str(0)?)?;
                let target = self.vfs.readlink(&p)?;
                let cap = a.len(1)?;
                let mut bytes = target.into_bytes();
                bytes.truncate(cap);
                Some(data(bytes))
            }
            Trap::Utimes => {
                let p = self.abs(pid, a.str(0)?)?;
                unit(self.vfs.utimes(&p, a.int(1)?, a.int(2)?))
            }
            Trap::Read => {
                let obj = self.fd_object(pid, a.fd(0)?)?;
                let cap = a.len(1)?;
                let Kernel { objects, vfs, .. } = &mut *self;
                match &mut objects.get_mut(&obj).unwrap().kind {
                    ObjKind::File(f) => Some(data(vfs.read(f, cap)?)),
                    ObjKind::Dir(_) => return Err(Errno::EISDIR),
                    ObjKind::PipeRead(p) => {
                        let p = *p;
                        let done = self.ipc.pipe_read(p, who, cap);
                        self.finish(done);
                        None
                    }
                    ObjKind::PipeWrite(_) => return Err(Errno::EBADF),
                    ObjKind::Socket(s) => {
                        let s = *s;
                        let done = self.ipc.sock_read(s, who, cap);
                        self.finish(done);
                        None
                    }
                }
            }
            Trap::Write => {
                let obj = self.fd_object(pid, a.fd(0)?)?;
                let bytes = a.take_bytes(1)?;
                let Kernel { objects, vfs, .. } = &mut *self;
                match &mut objects.get_mut(&obj).unwrap().kind {
                    ObjKind::File(f) => Some(ok(vfs.write(f, &bytes)? as i64)),
                    ObjKind::Dir(_) | ObjKind::PipeRead(_) => return Err(Errno::EBADF),
                    ObjKind::PipeWrite(p) => {
                        let p = *p;
                        let done = self.ipc.pipe_write(p, who, bytes);
                        self.finish(done);
                        None
                    }
                    ObjKind::Socket(s) => {
                        let s = *s;
                        let done = self.ipc.sock_write(s, who, bytes);
                        self.finish(done);
                        None
                    }
                }
            }
            Trap::Kill => {
                let target = a.int(0)?;
                let sig = Signal::from_raw(a.int(1)?).ok_or(Errno::EINVAL)?;
                let target = Pid::try_from(target).map_err(|_| Errno::ESRCH)?;
                self.kill(target, sig)?;
                // A process that signalled itself to death gets no reply.
                if self.tasks.get(&pid).is_some_and(|t| t.state == super::TaskState::Running) {
                    Some(ok(0))
                } else {
                    None
                }
            }
            Trap::Sigaction => {
                let sig = Signal::from_raw(a.int(0)?).ok_or(Errno::EINVAL)?;
                if sig == Signal::SIGKILL {
                    return Err(Errno::EINVAL);
                }
                let disp = match a.int(1)? {
                    SIG_DFL => Disposition::Default,
                    SIG_IGN => Disposition::Ignore,
                    SIG_HANDLER => Disposition::Handler,
                    _ => return Err(Errno::EINVAL),
                };
                self.tasks.get_mut(&pid).unwrap().dispositions.insert(sig, disp);
                Some(ok(0))
            }
            Trap::AttachShm => {
                if call == CallRef::Sync {
                    return Err(Errno::EINVAL);
                }
                let (size, retval, wake) = (a.len(0)?, a.len(1)?, a.len(2)?);
                let task = self.tasks.get_mut(&pid).unwrap();
                let worker = task.worker.as_mut().ok_or(Errno::ESRCH)?;
                match worker.attach_shared_region(size, retval, wake) {
                    Ok(_) => {
                        task.convention = Convention::Sync;
                        Some(ok(0))
                    }
                    Err(AttachError::AlreadyAttached) => return Err(Errno::EBUSY),
                    Err(AttachError::BadOffset) => return Err(Errno::EINVAL),
                }
            }
        })
    }

    fn socket_of(&self, pid: Pid, fd: i32) -> SysResult<crate::ipc::SockId> {
        match &self.objects[&self.fd_object(pid, fd)?].kind {
            ObjKind::Socket(s) => Ok(*s),
            _ => Err(Errno::ENOTSOCK),
        }
    }
}
