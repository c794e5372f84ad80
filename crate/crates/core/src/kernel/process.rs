//! Process creation, exit, reaping and signal delivery.

use std::collections::{BTreeMap, HashMap};

use super::{ok, CallRef, Convention, Disposition, Kernel, Pid, Task, TaskState, WaitReq, Waiter};
use crate::abi::{shell_status, signal_status, Signal, WNOHANG};
use crate::errno::{Errno, SysResult};
use crate::guest::Reply;
use crate::vfs::path;
use crate::worker::{
    launch_worker, parse_exec_stub, Entry, ForkSnapshot, GuestImage, KernelMessage, LaunchError, WorkerHandle,
};

/// Longest interpreter line honoured in a script.
const SHEBANG_MAX: usize = 256;

impl Kernel {
    fn alloc_pid(&mut self) -> Pid {
        loop {
            let pid = self.next_pid;
            self.next_pid = if self.next_pid >= i32::MAX as Pid { 1 } else { self.next_pid + 1 };
            if !self.tasks.contains_key(&pid) {
                return pid;
            }
        }
    }

    /// Name of the registered program behind the executable at `abs`.
    fn stub_program(&mut self, abs: &str) -> SysResult<String> {
        let st = self.vfs.stat(abs)?;
        if st.is_dir() || st.perm() & 0o111 == 0 {
            return Err(Errno::EACCES);
        }
        let bytes = self.vfs.read_file(abs)?;
        let name = parse_exec_stub(&bytes).ok_or(Errno::ENOEXEC)?;
        if self.registry.get(name).is_none() {
            return Err(Errno::ENOEXEC);
        }
        Ok(name.to_owned())
    }

    /// Resolves `target` to a runnable image, following one level of `#!`.
    pub(crate) fn load_image(
        &mut self,
        cwd: &str,
        target: &str,
        mut argv: Vec<String>,
        environ: BTreeMap<String, String>,
    ) -> SysResult<GuestImage> {
        let abs = path::normalize(cwd, target)?;
        let st = self.vfs.stat(&abs)?;
        if st.is_dir() || st.perm() & 0o111 == 0 {
            return Err(Errno::EACCES);
        }
        let bytes = self.vfs.read_file(&abs)?;
        if argv.is_empty() {
            argv.push(target.to_owned());
        }
        let entry = if let Some(name) = parse_exec_stub(&bytes) {
            if self.registry.get(name).is_none() {
                return Err(Errno::ENOEXEC);
            }
            Entry::Program(name.to_owned())
        } else if let Some(rest) = bytes.strip_prefix(b"#!") {
            let line_end = rest.iter().position(|b| *b == b'\n').unwrap_or(rest.len()).min(SHEBANG_MAX);
            let line = std::str::from_utf8(&rest[..line_end]).map_err(|_| Errno::ENOEXEC)?.trim();
            let (interp, arg) = match line.split_once([' ', '\t']) {
                Some((i, a)) => (i, Some(a.trim()).filter(|a| !a.is_empty())),
                None => (line, None),
            };
            if interp.is_empty() {
                return Err(Errno::ENOEXEC);
            }
            let interp_abs = path::normalize(cwd, interp)?;
            let program = self.stub_program(&interp_abs).map_err(|e| match e {
                Errno::ENOENT => Errno::ENOENT,
                _ => Errno::ENOEXEC,
            })?;
            let mut full = vec![interp.to_owned()];
            full.extend(arg.map(str::to_owned));
            full.push(target.to_owned());
            full.extend(argv.drain(1..));
            argv = full;
            Entry::Interpreter { program, interp_path: interp_abs, script_path: abs }
        } else {
            return Err(Errno::ENOEXEC);
        };
        Ok(GuestImage { bytes, entry, argv, environ, fork_snapshot: None })
    }

    /// Creates a task for `image` and starts its worker.
    pub(super) fn start_task(
        &mut self,
        ppid: Pid,
        cwd: String,
        image: GuestImage,
        dispositions: HashMap<Signal, Disposition>,
    ) -> SysResult<Pid> {
        let worker_id = self.next_worker;
        self.next_worker += 1;
        let worker = launch_worker(worker_id, &image, &self.registry, self.guest_tx.clone()).map_err(|e| match e {
            LaunchError::UnknownExecutable(_) => Errno::ENOEXEC,
            LaunchError::LaunchFailure(_) => Errno::EAGAIN,
        })?;
        let program = image.entry.program().to_owned();
        let forkable = self.registry.get(&program).is_some_and(|p| p.forkable);
        let pid = self.alloc_pid();
        self.workers.insert(worker_id, pid);
        self.tasks.insert(
            pid,
            Task {
                pid,
                ppid,
                state: TaskState::Running,
                worker: Some(worker),
                program,
                argv: image.argv.clone(),
                environ: image.environ.clone(),
                cwd,
                fds: BTreeMap::new(),
                dispositions,
                convention: Convention::Async,
                forkable,
                waits: Vec::new(),
                sync_pending: None,
                on_exit: None,
            },
        );
        self.stats.spawned += 1;
        Ok(pid)
    }

    pub(super) fn send_init(&mut self, pid: Pid, image: &GuestImage) {
        if let Some(w) = self.tasks[&pid].worker.as_ref() {
            let _ = w.send(KernelMessage::Init(image.init_message()));
        }
    }

    /// `spawn`: runs `target` in a new child of `parent` (0 for the host).
    /// Only the granted fds are inherited.
    pub(crate) fn spawn_task(
        &mut self,
        parent: Pid,
        cwd: &str,
        target: &str,
        argv: Vec<String>,
        environ: BTreeMap<String, String>,
        grants: &[(i32, i32)],
    ) -> SysResult<Pid> {
        let mut objs = Vec::with_capacity(grants.len());
        for &(child_fd, parent_fd) in grants {
            if !(0..super::MAX_FDS).contains(&child_fd) {
                return Err(Errno::EBADF);
            }
            objs.push((child_fd, self.fd_object(parent, parent_fd)?));
        }
        let image = self.load_image(cwd, target, argv, environ)?;
        let pid = self.start_task(parent, cwd.to_owned(), image.clone(), HashMap::new())?;
        for (fd, obj) in objs {
            self.bind_fd(pid, fd, obj);
        }
        self.send_init(pid, &image);
        Ok(pid)
    }

    /// `fork`: the child gets the parent's fds, cwd and dispositions, and
    /// starts from the program entry with the heap snapshot.
    pub(crate) fn fork_task(&mut self, parent: Pid, heap: Vec<u8>, resume_pc: u64) -> SysResult<Pid> {
        let p = &self.tasks[&parent];
        if p.convention == Convention::Sync || !p.forkable {
            return Err(Errno::ENOSYS);
        }
        let image = GuestImage {
            bytes: Vec::new(),
            entry: Entry::Program(p.program.clone()),
            argv: p.argv.clone(),
            environ: p.environ.clone(),
            fork_snapshot: Some(ForkSnapshot { heap, resume_pc }),
        };
        let (cwd, disp) = (p.cwd.clone(), p.dispositions.clone());
        let fds: Vec<(i32, u64)> = p.fds.iter().map(|(f, o)| (*f, *o)).collect();
        let pid = self.start_task(parent, cwd, image.clone(), disp)?;
        for (fd, obj) in fds {
            self.bind_fd(pid, fd, obj);
        }
        self.send_init(pid, &image);
        Ok(pid)
    }

    fn reap(&mut self, pid: Pid) -> i32 {
        let t = self.tasks.remove(&pid).expect("reaping a known task");
        self.stats.reaped += 1;
        match t.state {
            TaskState::Zombie { status } => status,
            TaskState::Running => panic!("reaping running task {pid}"),
        }
    }

    /// Ends a running task with a wait status.
    pub(crate) fn exit_task(&mut self, pid: Pid, status: i32) {
        let Some(task) = self.tasks.get_mut(&pid).filter(|t| t.state == TaskState::Running) else { return };
        let worker: Option<WorkerHandle> = task.worker.take();
        task.waits.clear();
        task.sync_pending = None;
        if let Some(mut w) = worker {
            w.terminate();
            self.workers.remove(&w.id());
        }
        // Parked calls of a dead task are discarded, never answered.
        let stale = self.ipc.cancel(|w| matches!(w, Waiter::Task { pid: p, .. } if *p == pid));
        self.stats.discarded += stale.len() as u64;
        self.close_all(pid);

        let children: Vec<Pid> = self.tasks.values().filter(|t| t.ppid == pid).map(|t| t.pid).collect();
        for c in children {
            if matches!(self.tasks[&c].state, TaskState::Zombie { .. }) {
                self.reap(c);
            } else {
                self.tasks.get_mut(&c).unwrap().ppid = 0;
            }
        }

        let task = self.tasks.get_mut(&pid).unwrap();
        task.state = TaskState::Zombie { status };
        self.stats.exits += 1;
        let ppid = task.ppid;

        if let Some((hook, sinks)) = task.on_exit.take() {
            for s in sinks {
                self.flush_sink(s);
            }
            self.reap(pid);
            hook(pid, shell_status(status));
            return;
        }
        let parent_running = self.tasks.get(&ppid).is_some_and(|t| t.state == TaskState::Running);
        if !parent_running {
            self.reap(pid);
            return;
        }
        let parent = self.tasks.get_mut(&ppid).unwrap();
        let target = pid as i32;
        if let Some(i) = parent.waits.iter().position(|w| w.target == -1 || w.target == target) {
            let w = parent.waits.remove(i);
            self.reap(pid);
            self.reply(ppid, w.call, Reply { ret: i64::from(pid), aux: i64::from(status), errno: 0, payload: None });
        }
        self.deliver(ppid, Signal::SIGCHLD);
    }

    pub(crate) fn wait4(&mut self, pid: Pid, call: CallRef, target: i32, options: i64) -> SysResult<Option<Reply>> {
        // Process groups do not exist; every non-positive selector means any child.
        let target = if target <= 0 { -1 } else { target };
        let matches = |t: &Task| t.ppid == pid && (target == -1 || t.pid as i32 == target);
        if !self.tasks.values().any(matches) {
            return Err(Errno::ECHILD);
        }
        let zombie = self.tasks.values().find(|t| matches(t) && matches!(t.state, TaskState::Zombie { .. }));
        if let Some(z) = zombie.map(|t| t.pid) {
            let status = self.reap(z);
            return Ok(Some(Reply { ret: i64::from(z), aux: i64::from(status), errno: 0, payload: None }));
        }
        if options & WNOHANG != 0 {
            return Ok(Some(ok(0)));
        }
        self.tasks.get_mut(&pid).unwrap().waits.push(WaitReq { call, target });
        Ok(None)
    }

    /// `kill`: ESRCH unless `target` is running.
    pub fn kill(&mut self, target: Pid, sig: Signal) -> SysResult<()> {
        if !self.tasks.get(&target).is_some_and(|t| t.state == TaskState::Running) {
            return Err(Errno::ESRCH);
        }
        self.deliver(target, sig);
        Ok(())
    }

    /// Signals `root` and every descendant, deepest first.
    pub fn kill_tree(&mut self, root: Pid, sig: Signal) -> SysResult<()> {
        let mut order = vec![root];
        let mut i = 0;
        while i < order.len() {
            let p = order[i];
            order.extend(self.tasks.values().filter(|t| t.ppid == p && t.pid != p).map(|t| t.pid));
            i += 1;
        }
        let r = self.kill(root, sig);
        for p in order.into_iter().skip(1).rev() {
            let _ = self.kill(p, sig);
        }
        r
    }

    fn deliver(&mut self, pid: Pid, sig: Signal) {
        let Some(task) = self.tasks.get(&pid).filter(|t| t.state == TaskState::Running) else { return };
        if sig == Signal::SIGKILL {
            self.exit_task(pid, signal_status(sig));
            return;
        }
        match task.dispositions.get(&sig).copied().unwrap_or_default() {
            Disposition::Ignore => {}
            Disposition::Default => {
                if sig.default_terminates() {
                    self.exit_task(pid, signal_status(sig));
                }
            }
            Disposition::Handler => {
                if let Some(w) = task.worker.as_ref() {
                    let _ = w.send(KernelMessage::Signal(sig));
                }
                self.interrupt(pid);
            }
        }
    }

    /// Fails the task's parked calls with EINTR; writes that moved bytes
    /// report the partial count instead.
    fn interrupt(&mut self, pid: Pid) {
        let cancelled = self.ipc.cancel(|w| matches!(w, Waiter::Task { pid: p, .. } if *p == pid));
        let waits = std::mem::take(&mut self.tasks.get_mut(&pid).unwrap().waits);
        let parked = cancelled
            .into_iter()
            .filter_map(|(w, moved)| match w {
                Waiter::Task { call, .. } => Some((call, moved)),
                Waiter::Host(_) => None,
            })
            .chain(waits.into_iter().map(|w| (w.call, 0)));
        for (call, moved) in parked.collect::<Vec<_>>() {
            if moved > 0 {
                self.reply(pid, call, ok(moved as i64));
            } else if call == CallRef::Sync {
                let task = self.tasks.get_mut(&pid).unwrap();
                task.sync_pending = None;
                if let Some((region, slot)) = task.worker.as_ref().and_then(|w| w.shared()) {
                    slot.signal(region);
                }
            } else {
                self.reply(pid, call, Reply::err(Errno::EINTR));
            }
        }
    }

    /// Runs the `notify_on_listen` callbacks registered for `port`.
    pub(crate) fn fire_listen(&mut self, port: u16) {
        for cb in self.listen_watch.remove(&port).unwrap_or_default() {
            cb();
        }
    }

    /// Calls `cb` once: now if `port` is listening, else on its first `listen`.
    pub fn notify_on_listen(&mut self, port: u16, cb: impl FnOnce() + Send + 'static) {
        if self.ipc.is_listening(port) {
            cb();
        } else {
            self.listen_watch.entry(port).or_default().push(Box::new(cb));
        }
    }
}
