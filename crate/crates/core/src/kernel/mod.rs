//! The kernel: one thread that owns every task, file object, pipe and socket.
//!
//! All state changes happen inside event handlers run by [`Kernel::run_loop`]:
//! a guest message, or a closure posted by a host thread through a
//! [`KernelHandle`]. Handlers never block; calls that cannot finish park a
//! [`Waiter`] and are answered from a later event.

mod dispatch;
mod fds;
mod host;
mod process;
mod sync_args;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::Arc;

use crossbeam_channel::{select, unbounded, Receiver, Sender};

pub use host::{HostSpawn, KernelHandle, Sink, Spawned, Stdin, StdinToken};

use crate::abi::Signal;
use crate::errno::Errno;
use crate::guest::Reply;
use crate::ipc::{Done, Ipc, IpcResult, Outcome, PipeId, SockId, DEFAULT_PIPE_CAPACITY};
use crate::vfs::{FsInitError, OpenDir, OpenFile, UnderlayProvider, Vfs};
use crate::wire::{SyscallEnvelope, SyscallReply};
use crate::worker::{GuestMessage, Registry, WorkerHandle, WorkerId};

pub type Pid = u32;
pub type ObjId = u64;

/// Default location of the shell used by [`Kernel::system`].
pub const DEFAULT_SHELL: &str = "/bin/sh";
/// Highest file descriptor number plus one.
pub const MAX_FDS: i32 = 1024;

/// How a parked call is answered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CallRef {
    Async(u32),
    Sync,
}

/// Token parked on pipe and socket queues.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Waiter {
    Task { pid: Pid, call: CallRef },
    Host(u64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskState {
    Running,
    Zombie { status: i32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Disposition {
    #[default]
    Default,
    Ignore,
    Handler,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Convention {
    Async,
    Sync,
}

#[derive(Debug)]
pub(crate) enum ObjKind {
    File(OpenFile),
    Dir(OpenDir),
    PipeRead(PipeId),
    PipeWrite(PipeId),
    Socket(SockId),
}

/// An open file description shared by every fd that refers to it.
#[derive(Debug)]
pub(crate) struct FileObject {
    kind: ObjKind,
    refs: u32,
}

/// A `wait4` parked until a matching child exits.
#[derive(Clone, Copy, Debug)]
struct WaitReq {
    call: CallRef,
    target: i32,
}

/// Where a parked sync call wants its outputs written.
#[derive(Clone, Copy, Debug, Default)]
struct SyncPending {
    out: Option<(usize, usize)>,
    aux: Option<usize>,
}

type ExitHook = Box<dyn FnOnce(Pid, i32) + Send>;

struct Task {
    pid: Pid,
    ppid: Pid,
    state: TaskState,
    worker: Option<WorkerHandle>,
    program: String,
    argv: Vec<String>,
    environ: BTreeMap<String, String>,
    cwd: String,
    fds: BTreeMap<i32, ObjId>,
    dispositions: HashMap<Signal, Disposition>,
    convention: Convention,
    forkable: bool,
    waits: Vec<WaitReq>,
    sync_pending: Option<SyncPending>,
    /// Set for processes started by the host: called with the shell status.
    on_exit: Option<(ExitHook, Vec<u64>)>,
}

/// Read-only view of a task for hosts and tests.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInfo {
    pub pid: Pid,
    pub ppid: Pid,
    pub state: TaskState,
    pub program: String,
    pub argv: Vec<String>,
    pub cwd: String,
    pub convention: Convention,
    pub fds: Vec<i32>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KernelStats {
    pub calls: u64,
    pub replies: u64,
    /// Replies dropped because their task had exited.
    pub discarded: u64,
    pub exits: u64,
    pub reaped: u64,
    pub spawned: u64,
}

pub struct KernelConfig {
    pub registry: Registry,
    pub underlay: Option<Box<dyn UnderlayProvider>>,
    /// Host directories copied into the guest tree at boot: (host dir, guest path).
    pub mounts: Vec<(PathBuf, String)>,
    /// Extra files created at boot: (guest path, contents, permission bits).
    pub files: Vec<(String, Vec<u8>, u32)>,
    pub pipe_cap: usize,
    pub shell: String,
}

impl KernelConfig {
    pub fn new(registry: Registry) -> Self {
        KernelConfig {
            registry,
            underlay: None,
            mounts: Vec::new(),
            files: Vec::new(),
            pipe_cap: DEFAULT_PIPE_CAPACITY,
            shell: DEFAULT_SHELL.to_owned(),
        }
    }

    pub fn with_underlay(mut self, provider: Box<dyn UnderlayProvider>) -> Self {
        self.underlay = Some(provider);
        self
    }

    pub fn with_mount(mut self, host_dir: impl Into<PathBuf>, guest_path: &str) -> Self {
        self.mounts.push((host_dir.into(), guest_path.to_owned()));
        self
    }

    pub fn with_file(mut self, path: &str, data: impl Into<Vec<u8>>, perm: u32) -> Self {
        self.files.push((path.to_owned(), data.into(), perm));
        self
    }

    pub fn with_pipe_cap(mut self, cap: usize) -> Self {
        self.pipe_cap = cap.max(1);
        self
    }

    pub fn with_shell(mut self, path: &str) -> Self {
        self.shell = path.to_owned();
        self
    }
}

type HostWait = Box<dyn FnOnce(&mut Kernel, IpcResult)>;
pub(crate) type HostJob = Box<dyn FnOnce(&mut Kernel) + Send>;

pub(crate) enum HostMsg {
    Run(HostJob),
    Shutdown,
}

/// A kernel-held pipe read end whose bytes go to a host callback.
struct HostSink {
    pipe: PipeId,
    sink: Option<Sink>,
}

/// A kernel-held pipe write end fed by the host.
struct HostStdin {
    pipe: PipeId,
    queue: std::collections::VecDeque<Vec<u8>>,
    busy: bool,
    closing: bool,
}

pub struct Kernel {
    registry: Arc<Registry>,
    shell: String,
    pub(crate) vfs: Vfs,
    ipc: Ipc<Waiter>,
    tasks: BTreeMap<Pid, Task>,
    workers: HashMap<WorkerId, Pid>,
    objects: HashMap<ObjId, FileObject>,
    next_obj: ObjId,
    next_pid: Pid,
    next_worker: WorkerId,
    next_token: u64,
    host_waits: HashMap<u64, HostWait>,
    sinks: HashMap<u64, HostSink>,
    stdins: HashMap<u64, HostStdin>,
    listen_watch: HashMap<u16, Vec<Box<dyn FnOnce() + Send>>>,
    guest_tx: Sender<(WorkerId, GuestMessage)>,
    guest_rx: Receiver<(WorkerId, GuestMessage)>,
    stats: KernelStats,
}

fn ok(ret: i64) -> Reply {
    Reply { ret, aux: 0, errno: 0, payload: None }
}

fn data(bytes: Vec<u8>) -> Reply {
    Reply { ret: bytes.len() as i64, aux: 0, errno: 0, payload: Some(bytes) }
}

impl Kernel {
    /// Builds the filesystem and an idle kernel. Runs on the kernel thread.
    fn new(config: KernelConfig) -> Result<Kernel, FsInitError> {
        let mut vfs = match config.underlay {
            Some(p) => Vfs::with_underlay(p)?,
            None => Vfs::new(),
        };
        let stage = |path: &str, e: Errno| FsInitError::Stage { path: path.to_owned(), reason: e.name().to_owned() };
        for dir in ["/bin", "/usr/bin", "/tmp", "/home", "/dev"] {
            vfs.mkdir_all(dir).map_err(|e| stage(dir, e))?;
        }
        for (path, name) in config.registry.install_paths() {
            vfs.mkdir_all(crate::vfs::path::parent(path)).map_err(|e| stage(path, e))?;
            vfs.write_file(path, &crate::worker::exec_stub(name), 0o755).map_err(|e| stage(path, e))?;
        }
        for (host_dir, guest) in &config.mounts {
            host::copy_in(&mut vfs, host_dir, guest)?;
        }
        for (path, contents, perm) in &config.files {
            vfs.mkdir_all(crate::vfs::path::parent(path)).map_err(|e| stage(path, e))?;
            vfs.write_file(path, contents, *perm).map_err(|e| stage(path, e))?;
        }
        let (guest_tx, guest_rx) = unbounded();
        Ok(Kernel {
            registry: Arc::new(config.registry),
            shell: config.shell,
            vfs,
            ipc: Ipc::new(config.pipe_cap),
            tasks: BTreeMap::new(),
            workers: HashMap::new(),
            objects: HashMap::new(),
            next_obj: 1,
            next_pid: 1,
            next_worker: 1,
            next_token: 1,
            host_waits: HashMap::new(),
            sinks: HashMap::new(),
            stdins: HashMap::new(),
            listen_watch: HashMap::new(),
            guest_tx,
            guest_rx,
            stats: KernelStats::default(),
        })
    }

    fn run_loop(&mut self, host_rx: Receiver<HostMsg>) {
        loop {
            select! {
                recv(host_rx) -> msg => match msg {
                    Ok(HostMsg::Run(job)) => job(self),
                    Ok(HostMsg::Shutdown) | Err(_) => break,
                },
                recv(self.guest_rx) -> msg => {
                    let (worker, msg) = msg.expect("kernel holds a sender");
                    self.on_guest_message(worker, msg);
                }
            }
        }
        self.teardown();
    }

    fn teardown(&mut self) {
        for task in self.tasks.values_mut() {
            if let Some(w) = task.worker.as_mut() {
                w.terminate();
            }
        }
    }

    fn on_guest_message(&mut self, worker: WorkerId, msg: GuestMessage) {
        // Late messages from terminated workers are dropped here.
        let Some(&pid) = self.workers.get(&worker) else { return };
        self.stats.calls += 1;
        match msg {
            GuestMessage::Call(bytes) => match SyscallEnvelope::decode(&bytes) {
                Ok(env) => self.dispatch(pid, CallRef::Async(env.id), env.trap, env.args),
                Err(_) => {
                    // Without a readable id there is no continuation to answer.
                    self.stats.discarded += 1;
                }
            },
            GuestMessage::SyncCall { trap, args } => self.dispatch_sync(pid, trap, args),
        }
    }

    pub(crate) fn token(&mut self) -> u64 {
        let t = self.next_token;
        self.next_token += 1;
        t
    }

    /// Sends the result of a call, or drops it if the task has exited.
    fn reply(&mut self, pid: Pid, call: CallRef, r: Reply) {
        let Some(task) = self.tasks.get_mut(&pid).filter(|t| t.state == TaskState::Running) else {
            self.stats.discarded += 1;
            return;
        };
        let Some(worker) = task.worker.as_ref() else {
            self.stats.discarded += 1;
            return;
        };
        match call {
            CallRef::Async(id) => {
                let bytes =
                    SyscallReply { id, ret: r.ret, aux: r.aux, errno: r.errno, payload: r.payload }.encode();
                if worker.send(crate::worker::KernelMessage::Reply(bytes)).is_err() {
                    self.stats.discarded += 1;
                    return;
                }
            }
            CallRef::Sync => {
                let pending = task.sync_pending.take().unwrap_or_default();
                let Some((region, slot)) = worker.shared() else {
                    self.stats.discarded += 1;
                    return;
                };
                let mut errno = r.errno;
                if errno == 0 {
                    if let (Some(bytes), Some((off, cap))) = (&r.payload, pending.out) {
                        let n = bytes.len().min(cap);
                        if region.write(off, &bytes[..n]).is_err() {
                            errno = Errno::EFAULT.0;
                        }
                    }
                    if let Some(off) = pending.aux {
                        if region.write_i64(off, r.aux).is_err() {
                            errno = Errno::EFAULT.0;
                        }
                    }
                }
                let ret = if errno == 0 { r.ret } else { -1 };
                slot.complete(region, ret, errno);
            }
        }
        self.stats.replies += 1;
    }

    /// Answers every call an IPC operation finished.
    fn finish(&mut self, done: Vec<Done<Waiter>>) {
        for d in done {
            match d.who {
                Waiter::Host(tok) => {
                    if let Some(f) = self.host_waits.remove(&tok) {
                        f(self, d.result);
                    }
                }
                Waiter::Task { pid, call } => {
                    let r = match d.result {
                        IpcResult::Pipe(Outcome::Read(bytes)) => data(bytes),
                        IpcResult::Pipe(Outcome::Wrote(n)) => ok(n as i64),
                        IpcResult::Pipe(Outcome::Failed(e)) | IpcResult::Failed(e) => Reply::err(e),
                        IpcResult::Connected => ok(0),
                        IpcResult::Accepted(sock) => match self.install_object(pid, ObjKind::Socket(sock)) {
                            Ok(fd) => ok(i64::from(fd)),
                            Err(e) => Reply::err(e),
                        },
                    };
                    self.reply(pid, call, r);
                }
            }
        }
    }

    /// Parks a host continuation on an IPC operation.
    pub(crate) fn host_io(
        &mut self,
        op: impl FnOnce(&mut Ipc<Waiter>, Waiter) -> Vec<Done<Waiter>>,
        then: impl FnOnce(&mut Kernel, IpcResult) + 'static,
    ) {
        let tok = self.token();
        self.host_waits.insert(tok, Box::new(then));
        let done = op(&mut self.ipc, Waiter::Host(tok));
        self.finish(done);
    }

    pub fn stats(&self) -> KernelStats {
        self.stats
    }

    pub fn vfs(&self) -> &Vfs {
        &self.vfs
    }

    pub fn vfs_mut(&mut self) -> &mut Vfs {
        &mut self.vfs
    }

    pub fn ipc(&self) -> &Ipc<Waiter> {
        &self.ipc
    }

    pub fn pids(&self) -> Vec<Pid> {
        self.tasks.keys().copied().collect()
    }

    pub fn task_info(&self, pid: Pid) -> Option<TaskInfo> {
        self.tasks.get(&pid).map(|t| TaskInfo {
            pid: t.pid,
            ppid: t.ppid,
            state: t.state,
            program: t.program.clone(),
            argv: t.argv.clone(),
            cwd: t.cwd.clone(),
            convention: t.convention,
            fds: t.fds.keys().copied().collect(),
        })
    }

    pub fn live_tasks(&self) -> usize {
        self.tasks.values().filter(|t| t.state == TaskState::Running).count()
    }

    pub fn zombies(&self) -> usize {
        self.tasks.values().filter(|t| matches!(t.state, TaskState::Zombie { .. })).count()
    }

    pub fn object_count(&self) -> usize {
        self.objects.len()
    }

    /// Checks conservation invariants at a quiescent point.
    pub fn audit(&self) -> Result<(), String> {
        let zombies = self.zombies() as u64;
        if self.stats.exits != self.stats.reaped + zombies {
            return Err(format!(
                "zombie conservation: {} exits != {} reaped + {} zombies",
                self.stats.exits, self.stats.reaped, zombies
            ));
        }
        let mut refs: HashMap<ObjId, u32> = HashMap::new();
        for t in self.tasks.values() {
            if matches!(t.state, TaskState::Zombie { .. }) && (!t.fds.is_empty() || t.worker.is_some()) {
                return Err(format!("zombie {} still holds fds or a worker", t.pid));
            }
            if t.convention == Convention::Sync && t.worker.as_ref().is_some_and(|w| w.shared().is_none()) {
                return Err(format!("sync task {} has no shared region", t.pid));
            }
            for obj in t.fds.values() {
                *refs.entry(*obj).or_default() += 1;
            }
        }
        for (id, obj) in &self.objects {
            let held = refs.remove(id).unwrap_or(0);
            if held != obj.refs {
                return Err(format!("object {id}: refcount {} but {held} fds", obj.refs));
            }
        }
        if let Some(id) = refs.keys().next() {
            return Err(format!("fd refers to freed object {id}"));
        }
        if self.vfs.locks_held() != 0 {
            return Err(format!("{} vfs node locks held between events", self.vfs.locks_held()));
        }
        if self.workers.len() != self.live_tasks() {
            return Err(format!("{} workers for {} live tasks", self.workers.len(), self.live_tasks()));
        }
        Ok(())
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }
}
