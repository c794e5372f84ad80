//! File descriptor tables and the shared file objects they point to.

use super::{FileObject, Kernel, ObjId, ObjKind, Pid, TaskState, MAX_FDS};
use crate::errno::{Errno, SysResult};

impl Kernel {
    fn new_object(&mut self, kind: ObjKind) -> ObjId {
        let id = self.next_obj;
        self.next_obj += 1;
        self.objects.insert(id, FileObject { kind, refs: 0 });
        id
    }

    /// Lowest free descriptor of a running task.
    fn free_fd(&self, pid: Pid) -> SysResult<i32> {
        let task = self.tasks.get(&pid).filter(|t| t.state == TaskState::Running).ok_or(Errno::ESRCH)?;
        let mut fd = 0;
        for used in task.fds.keys() {
            if *used != fd {
                break;
            }
            fd += 1;
        }
        if fd >= MAX_FDS {
            Err(Errno::EMFILE)
        } else {
            Ok(fd)
        }
    }

    /// Creates an object and binds it to the lowest free fd. On failure the
    /// object is released, closing whatever it wraps.
    pub(crate) fn install_object(&mut self, pid: Pid, kind: ObjKind) -> SysResult<i32> {
        let obj = self.new_object(kind);
        match self.free_fd(pid) {
            Ok(fd) => {
                self.bind_fd(pid, fd, obj);
                Ok(fd)
            }
            Err(e) => {
                self.objects.get_mut(&obj).unwrap().refs = 1;
                self.decref(obj);
                Err(e)
            }
        }
    }

    /// Points `fd` at `obj`, closing what `fd` referred to before.
    pub(crate) fn bind_fd(&mut self, pid: Pid, fd: i32, obj: ObjId) {
        self.objects.get_mut(&obj).expect("live object").refs += 1;
        let prev = self.tasks.get_mut(&pid).expect("live task").fds.insert(fd, obj);
        if let Some(prev) = prev {
            self.decref(prev);
        }
    }

    pub(crate) fn fd_object(&self, pid: Pid, fd: i32) -> SysResult<ObjId> {
        self.tasks.get(&pid).and_then(|t| t.fds.get(&fd)).copied().ok_or(Errno::EBADF)
    }

    pub(crate) fn close_fd(&mut self, pid: Pid, fd: i32) -> SysResult<()> {
        let obj = self.tasks.get_mut(&pid).and_then(|t| t.fds.remove(&fd)).ok_or(Errno::EBADF)?;
        self.decref(obj);
        Ok(())
    }

    pub(crate) fn close_all(&mut self, pid: Pid) {
        let fds = std::mem::take(&mut self.tasks.get_mut(&pid).expect("live task").fds);
        for obj in fds.into_values() {
            self.decref(obj);
        }
    }

    /// Drops one reference; the last one releases the underlying resource.
    pub(crate) fn decref(&mut self, obj: ObjId) {
        let o = self.objects.get_mut(&obj).expect("live object");
        o.refs -= 1;
        if o.refs > 0 {
            return;
        }
        let done = match self.objects.remove(&obj).unwrap().kind {
            ObjKind::File(f) => {
                self.vfs.release(f);
                Vec::new()
            }
            ObjKind::Dir(_) => Vec::new(),
            ObjKind::PipeRead(p) => self.ipc.pipe_close_read(p),
            ObjKind::PipeWrite(p) => self.ipc.pipe_close_write(p),
            ObjKind::Socket(s) => self.ipc.sock_close(s),
        };
        self.finish(done);
    }
}
