//! The host embedding API.
//!
//! [`KernelHandle`] posts closures to the kernel thread and is safe to use
//! from any host thread. Callbacks given to the kernel (exit hooks, output
//! sinks, listen notifications) run on the kernel thread and must not call
//! blocking [`KernelHandle`] methods; they may use [`KernelHandle::post`].

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;
use std::sync::{Arc, Mutex};

use crossbeam_channel::{bounded, unbounded, Sender};

use super::{HostJob, HostMsg, HostSink, HostStdin, Kernel, KernelConfig, KernelStats, Pid, TaskInfo};
use crate::abi::Signal;
use crate::errno::{Errno, SysResult};
use crate::ipc::{IpcResult, Outcome, PipeId, SockId};
use crate::vfs::{path, FsInitError, Vfs};
use crate::wire::StatRecord;

/// Receives a process's output bytes on the kernel thread.
pub type Sink = Box<dyn FnMut(&[u8]) + Send>;

/// Read size used when draining output pipes and sockets for the host.
const HOST_CHUNK: usize = 64 * 1024;

pub enum Stdin {
    /// Immediate end of file.
    Null,
    /// Fixed bytes followed by end of file.
    Data(Vec<u8>),
    /// Fed through [`KernelHandle::write_stdin`].
    Pipe,
}

/// Handle to the write end of a host-fed stdin pipe.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StdinToken(u64);

pub struct HostSpawn {
    pub path: String,
    pub argv: Vec<String>,
    pub env: BTreeMap<String, String>,
    pub cwd: String,
    pub stdin: Stdin,
    pub stdout: Option<Sink>,
    pub stderr: Option<Sink>,
    /// Called once with the pid and shell-style status after output is drained.
    pub on_exit: Box<dyn FnOnce(Pid, i32) + Send>,
}

impl HostSpawn {
    pub fn new(path: &str, argv: &[&str]) -> Self {
        HostSpawn {
            path: path.to_owned(),
            argv: argv.iter().map(|s| s.to_string()).collect(),
            env: BTreeMap::new(),
            cwd: "/".to_owned(),
            stdin: Stdin::Null,
            stdout: None,
            stderr: None,
            on_exit: Box::new(|_, _| {}),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Spawned {
    pub pid: Pid,
    pub stdin: Option<StdinToken>,
}

impl Kernel {
    /// Starts a root process whose stdio is connected to host callbacks.
    pub fn host_spawn(&mut self, spec: HostSpawn) -> SysResult<Spawned> {
        let cwd = path::normalize("/", &spec.cwd)?;
        let image = self.load_image(&cwd, &spec.path, spec.argv, spec.env)?;
        let stdin_pipe = self.ipc.pipe_create();
        let out_pipe = self.ipc.pipe_create();
        let err_pipe = self.ipc.pipe_create();
        let pid = match self.start_task(0, cwd.clone(), image.clone(), Default::default()) {
            Ok(pid) => pid,
            Err(e) => {
                for p in [stdin_pipe, out_pipe, err_pipe] {
                    let mut done = self.ipc.pipe_close_read(p);
                    done.extend(self.ipc.pipe_close_write(p));
                    self.finish(done);
                }
                return Err(e);
            }
        };
        for (fd, kind) in [
            (0, super::ObjKind::PipeRead(stdin_pipe)),
            (1, super::ObjKind::PipeWrite(out_pipe)),
            (2, super::ObjKind::PipeWrite(err_pipe)),
        ] {
            let obj = self.install_object(pid, kind).expect("fresh task has free fds");
            debug_assert_eq!(obj, fd);
        }
        let out_sink = self.attach_sink(out_pipe, spec.stdout);
        let err_sink = self.attach_sink(err_pipe, spec.stderr);
        self.tasks.get_mut(&pid).unwrap().on_exit = Some((spec.on_exit, vec![out_sink, err_sink]));

        let tok = self.token();
        self.stdins.insert(tok, HostStdin { pipe: stdin_pipe, queue: VecDeque::new(), busy: false, closing: false });
        let stdin = match spec.stdin {
            Stdin::Null => {
                self.close_stdin(StdinToken(tok));
                None
            }
            Stdin::Data(bytes) => {
                self.write_stdin(StdinToken(tok), bytes);
                self.close_stdin(StdinToken(tok));
                None
            }
            Stdin::Pipe => Some(StdinToken(tok)),
        };
        self.send_init(pid, &image);
        Ok(Spawned { pid, stdin })
    }

    /// Runs `/bin/sh -c cmdline`. If the shell cannot start, `on_exit`
    /// gets pid 0 and status 127.
    pub fn system(
        &mut self,
        cmdline: &str,
        on_exit: impl FnOnce(Pid, i32) + Send + 'static,
        on_stdout: impl FnMut(&[u8]) + Send + 'static,
        on_stderr: impl FnMut(&[u8]) + Send + 'static,
    ) -> Option<Pid> {
        let shell = self.shell.clone();
        let mut spec = HostSpawn::new(&shell, &[&shell, "-c", cmdline]);
        spec.stdout = Some(Box::new(on_stdout));
        spec.stderr = Some(Box::new(on_stderr));
        let hook = Arc::new(Mutex::new(Some(on_exit)));
        let h = hook.clone();
        spec.on_exit = Box::new(move |pid, code| {
            if let Some(f) = h.lock().unwrap().take() {
                f(pid, code);
            }
        });
        match self.host_spawn(spec) {
            Ok(s) => Some(s.pid),
            Err(_) => {
                if let Some(f) = hook.lock().unwrap().take() {
                    f(0, 127);
                }
                None
            }
        }
    }

    fn attach_sink(&mut self, pipe: PipeId, sink: Option<Sink>) -> u64 {
        let id = self.token();
        self.sinks.insert(id, HostSink { pipe, sink });
        self.pump_sink(id);
        id
    }

    fn pump_sink(&mut self, id: u64) {
        let Some(pipe) = self.sinks.get(&id).map(|s| s.pipe) else { return };
        self.host_io(|ipc, w| ipc.pipe_read(pipe, w, HOST_CHUNK), move |k, r| k.on_sink_read(id, r));
    }

    fn on_sink_read(&mut self, id: u64, r: IpcResult) {
        match r {
            IpcResult::Pipe(Outcome::Read(bytes)) if !bytes.is_empty() => {
                if let Some(f) = self.sinks.get_mut(&id).and_then(|s| s.sink.as_mut()) {
                    f(&bytes);
                }
                self.pump_sink(id);
            }
            _ => {
                if let Some(s) = self.sinks.remove(&id) {
                    let done = self.ipc.pipe_close_read(s.pipe);
                    self.finish(done);
                }
            }
        }
    }

    /// Delivers whatever is buffered in a sink's pipe right now.
    pub(crate) fn flush_sink(&mut self, id: u64) {
        let Some(pipe) = self.sinks.get(&id).map(|s| s.pipe) else { return };
        let (bytes, done, _) = self.ipc.pipe_drain(pipe);
        if !bytes.is_empty() {
            if let Some(f) = self.sinks.get_mut(&id).and_then(|s| s.sink.as_mut()) {
                f(&bytes);
            }
        }
        self.finish(done);
    }

    /// Queues bytes for a host-fed stdin; writes are applied in order.
    pub fn write_stdin(&mut self, tok: StdinToken, bytes: Vec<u8>) {
        let Some(s) = self.stdins.get_mut(&tok.0) else { return };
        if s.closing {
            return;
        }
        s.queue.push_back(bytes);
        self.pump_stdin(tok.0);
    }

    /// Closes a host-fed stdin once queued bytes are written.
    pub fn close_stdin(&mut self, tok: StdinToken) {
        let Some(s) = self.stdins.get_mut(&tok.0) else { return };
        s.closing = true;
        self.pump_stdin(tok.0);
    }

    fn pump_stdin(&mut self, id: u64) {
        let Some(s) = self.stdins.get_mut(&id) else { return };
        if s.busy {
            return;
        }
        match s.queue.pop_front() {
            Some(bytes) => {
                s.busy = true;
                let pipe = s.pipe;
                self.host_io(
                    |ipc, w| ipc.pipe_write(pipe, w, bytes),
                    move |k, r| {
                        let failed = !matches!(r, IpcResult::Pipe(Outcome::Wrote(_)));
                        if let Some(s) = k.stdins.get_mut(&id) {
                            s.busy = false;
                            if failed {
                                s.queue.clear();
                            }
                        }
                        k.pump_stdin(id);
                    },
                );
            }
            None if s.closing => {
                let pipe = s.pipe;
                self.stdins.remove(&id);
                let done = self.ipc.pipe_close_write(pipe);
                self.finish(done);
            }
            None => {}
        }
    }

    /// Connects a kernel socket to `port`, sends `request`, and reads the
    /// reply until the server closes the connection.
    pub fn socket_exchange(
        &mut self,
        port: u16,
        request: Vec<u8>,
        done: impl FnOnce(SysResult<Vec<u8>>) + Send + 'static,
    ) {
        let sock = self.ipc.socket_create();
        self.host_io(
            |ipc, w| ipc.connect(sock, port, w),
            move |k, r| match r {
                IpcResult::Connected => k.host_io(
                    |ipc, w| ipc.sock_write(sock, w, request),
                    move |k, r| match r {
                        IpcResult::Pipe(Outcome::Wrote(_)) => k.read_to_close(sock, Vec::new(), Box::new(done)),
                        other => k.exchange_failed(sock, other, Box::new(done)),
                    },
                ),
                other => k.exchange_failed(sock, other, Box::new(done)),
            },
        );
    }

    fn read_to_close(&mut self, sock: SockId, mut acc: Vec<u8>, done: Box<dyn FnOnce(SysResult<Vec<u8>>) + Send>) {
        self.host_io(
            |ipc, w| ipc.sock_read(sock, w, HOST_CHUNK),
            move |k, r| match r {
                IpcResult::Pipe(Outcome::Read(bytes)) if !bytes.is_empty() => {
                    acc.extend_from_slice(&bytes);
                    k.read_to_close(sock, acc, done);
                }
                IpcResult::Pipe(Outcome::Read(_)) => {
                    let d = k.ipc.sock_close(sock);
                    k.finish(d);
                    done(Ok(acc));
                }
                other => k.exchange_failed(sock, other, done),
            },
        );
    }

    fn exchange_failed(&mut self, sock: SockId, r: IpcResult, done: Box<dyn FnOnce(SysResult<Vec<u8>>) + Send>) {
        let d = self.ipc.sock_close(sock);
        self.finish(d);
        let e = match r {
            IpcResult::Failed(e) | IpcResult::Pipe(Outcome::Failed(e)) => e,
            _ => Errno::EIO,
        };
        done(Err(e));
    }
}

/// Copies a host directory tree into the guest tree, keeping permission bits.
pub(crate) fn copy_in(vfs: &mut Vfs, host_dir: &Path, guest: &str) -> Result<(), FsInitError> {
    let fail = |p: &Path, reason: String| FsInitError::Stage { path: p.display().to_string(), reason };
    let root = path::normalize("/", guest).map_err(|e| fail(host_dir, e.name().to_owned()))?;
    if !host_dir.is_dir() {
        return Err(fail(host_dir, "not a directory".to_owned()));
    }
    vfs.mkdir_all(&root).map_err(|e| fail(host_dir, e.name().to_owned()))?;
    for entry in walkdir::WalkDir::new(host_dir).follow_links(true).min_depth(1).sort_by_file_name() {
        let entry = entry.map_err(|e| fail(host_dir, e.to_string()))?;
        let rel = entry.path().strip_prefix(host_dir).expect("walk stays under root");
        let mut target = root.clone();
        for c in rel.components() {
            target = path::join(&target, &c.as_os_str().to_string_lossy());
        }
        let meta = entry.metadata().map_err(|e| fail(entry.path(), e.to_string()))?;
        if meta.is_dir() {
            vfs.mkdir_all(&target).map_err(|e| fail(entry.path(), e.name().to_owned()))?;
        } else {
            let bytes = std::fs::read(entry.path()).map_err(|e| fail(entry.path(), e.to_string()))?;
            let perm = host_perm(&meta);
            vfs.write_file(&target, &bytes, perm).map_err(|e| fail(entry.path(), e.name().to_owned()))?;
        }
    }
    Ok(())
}

#[cfg(unix)]
fn host_perm(meta: &std::fs::Metadata) -> u32 {
    use std::os::unix::fs::PermissionsExt;
    meta.permissions().mode() & 0o777
}

#[cfg(not(unix))]
fn host_perm(_: &std::fs::Metadata) -> u32 {
    0o644
}

/// Thread-safe handle to a running kernel. Cloning shares the same kernel.
#[derive(Clone)]
pub struct KernelHandle {
    tx: Sender<HostMsg>,
}

impl KernelHandle {
    /// Starts the kernel thread. `ready` runs once the filesystem is built,
    /// before any process can be started.
    pub fn boot(config: KernelConfig, ready: impl FnOnce(Result<KernelHandle, FsInitError>) + Send + 'static) {
        let (tx, rx) = unbounded();
        let handle = KernelHandle { tx };
        let spawned = std::thread::Builder::new().name("kernel".to_owned()).spawn(move || {
            match Kernel::new(config) {
                Ok(mut k) => {
                    ready(Ok(handle));
                    k.run_loop(rx);
                }
                Err(e) => ready(Err(e)),
            }
        });
        spawned.expect("could not start the kernel thread");
    }

    pub fn boot_blocking(config: KernelConfig) -> Result<KernelHandle, FsInitError> {
        let (tx, rx) = bounded(1);
        KernelHandle::boot(config, move |r| {
            let _ = tx.send(r);
        });
        rx.recv().expect("kernel thread reports boot outcome")
    }

    /// Runs `f` on the kernel thread without waiting.
    pub fn post(&self, f: impl FnOnce(&mut Kernel) + Send + 'static) {
        let job: HostJob = Box::new(f);
        let _ = self.tx.send(HostMsg::Run(job));
    }

    /// Runs `f` on the kernel thread and returns its result.
    ///
    /// Panics if the kernel has shut down. Must not be called from kernel callbacks.
    pub fn exec<R: Send + 'static>(&self, f: impl FnOnce(&mut Kernel) -> R + Send + 'static) -> R {
        let (tx, rx) = bounded(1);
        self.post(move |k| {
            let _ = tx.send(f(k));
        });
        rx.recv().expect("kernel is running")
    }

    pub fn is_running(&self) -> bool {
        let (tx, rx) = bounded(1);
        self.post(move |_| {
            let _ = tx.send(());
        });
        rx.recv().is_ok()
    }

    pub fn system(
        &self,
        cmdline: &str,
        on_exit: impl FnOnce(Pid, i32) + Send + 'static,
        on_stdout: impl FnMut(&[u8]) + Send + 'static,
        on_stderr: impl FnMut(&[u8]) + Send + 'static,
    ) {
        let cmd = cmdline.to_owned();
        self.post(move |k| {
            k.system(&cmd, on_exit, on_stdout, on_stderr);
        });
    }

    /// Runs a command line to completion, returning (status, stdout, stderr).
    pub fn system_capture(&self, cmdline: &str) -> (i32, Vec<u8>, Vec<u8>) {
        self.spawn_capture(cmdline, Stdin::Null, BTreeMap::new())
    }

    /// Like [`system_capture`](Self::system_capture) with stdin bytes and extra environment.
    pub fn spawn_capture(&self, cmdline: &str, stdin: Stdin, env: BTreeMap<String, String>) -> (i32, Vec<u8>, Vec<u8>) {
        let (tx, rx) = bounded(1);
        let out = Arc::new(Mutex::new(Vec::new()));
        let err = Arc::new(Mutex::new(Vec::new()));
        let (o, e) = (out.clone(), err.clone());
        let cmd = cmdline.to_owned();
        self.post(move |k| {
            let shell = k.shell.clone();
            let mut spec = HostSpawn::new(&shell, &[&shell, "-c", &cmd]);
            spec.env = env;
            spec.stdin = stdin;
            spec.stdout = Some(Box::new(move |b: &[u8]| o.lock().unwrap().extend_from_slice(b)));
            spec.stderr = Some(Box::new(move |b: &[u8]| e.lock().unwrap().extend_from_slice(b)));
            let done = tx.clone();
            spec.on_exit = Box::new(move |_, code| {
                let _ = done.send(code);
            });
            if k.host_spawn(spec).is_err() {
                let _ = tx.send(127);
            }
        });
        let code = rx.recv().expect("kernel reports exit");
        let out = std::mem::take(&mut *out.lock().unwrap());
        let err = std::mem::take(&mut *err.lock().unwrap());
        (code, out, err)
    }

    pub fn spawn(&self, spec: HostSpawn) -> SysResult<Spawned> {
        self.exec(move |k| k.host_spawn(spec))
    }

    pub fn write_stdin(&self, tok: StdinToken, bytes: Vec<u8>) {
        self.post(move |k| k.write_stdin(tok, bytes));
    }

    pub fn close_stdin(&self, tok: StdinToken) {
        self.post(move |k| k.close_stdin(tok));
    }

    pub fn kill(&self, pid: Pid, sig: Signal) -> SysResult<()> {
        self.exec(move |k| k.kill(pid, sig))
    }

    pub fn kill_tree(&self, pid: Pid, sig: Signal) -> SysResult<()> {
        self.exec(move |k| k.kill_tree(pid, sig))
    }

    pub fn notify_on_listen(&self, port: u16, cb: impl FnOnce() + Send + 'static) {
        self.post(move |k| k.notify_on_listen(port, cb));
    }

    /// Blocks until some process listens on `port` or `timeout` passes.
    pub fn wait_for_listen(&self, port: u16, timeout: std::time::Duration) -> bool {
        let (tx, rx) = bounded(1);
        self.notify_on_listen(port, move || {
            let _ = tx.send(());
        });
        rx.recv_timeout(timeout).is_ok()
    }

    /// Raw request/response over a kernel socket; see [`crate::http`] for HTTP framing.
    pub fn socket_exchange(&self, port: u16, request: Vec<u8>) -> SysResult<Vec<u8>> {
        let (tx, rx) = bounded(1);
        self.post(move |k| {
            k.socket_exchange(port, request, move |r| {
                let _ = tx.send(r);
            })
        });
        rx.recv().unwrap_or(Err(Errno::EIO))
    }

    pub fn write_file(&self, path: &str, data: &[u8], perm: u32) -> SysResult<()> {
        let (p, d) = (path.to_owned(), data.to_vec());
        self.exec(move |k| {
            k.vfs.mkdir_all(crate::vfs::path::parent(&p))?;
            k.vfs.write_file(&p, &d, perm)
        })
    }

    pub fn read_file(&self, path: &str) -> SysResult<Vec<u8>> {
        let p = path.to_owned();
        self.exec(move |k| k.vfs.read_file(&p))
    }

    pub fn mkdir_all(&self, path: &str) -> SysResult<()> {
        let p = path.to_owned();
        self.exec(move |k| k.vfs.mkdir_all(&p))
    }

    pub fn stat(&self, path: &str) -> SysResult<StatRecord> {
        let p = path.to_owned();
        self.exec(move |k| k.vfs.stat(&p))
    }

    pub fn stats(&self) -> KernelStats {
        self.exec(|k| k.stats())
    }

    pub fn audit(&self) -> Result<(), String> {
        self.exec(|k| k.audit())
    }

    pub fn task_info(&self, pid: Pid) -> Option<TaskInfo> {
        self.exec(move |k| k.task_info(pid))
    }

    pub fn pids(&self) -> Vec<Pid> {
        self.exec(|k| k.pids())
    }

    /// Stops the kernel loop and terminates every guest.
    pub fn shutdown(&self) {
        let _ = self.tx.send(HostMsg::Shutdown);
    }
}
