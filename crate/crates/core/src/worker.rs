//! Guest execution contexts.
//!
//! Each worker is a host thread running one registered program. It can only
//! talk to the kernel: it receives [`KernelMessage`]s on its own channel and
//! sends [`GuestMessage`]s tagged with its [`WorkerId`] on a channel shared by
//! all workers. Payloads are owned buffers, so nothing is aliased except a
//! granted [`SharedRegion`].

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use crossbeam_channel::{Receiver, Sender};
use thiserror::Error;

use crate::abi::Signal;
use crate::guest::{self, Guest};
use crate::region::SharedRegion;
use crate::wire::SyncCallSlot;

pub type WorkerId = u64;

/// First bytes of an executable file naming a registered program.
pub const EXEC_MAGIC: &[u8] = b"\x7fSBX\n";

const GUEST_STACK: usize = 8 << 20;

/// Body of an executable file that launches the registered program `name`.
pub fn exec_stub(name: &str) -> Vec<u8> {
    let mut v = EXEC_MAGIC.to_vec();
    v.extend_from_slice(name.as_bytes());
    v.push(b'\n');
    v
}

/// The program named by an executable file body, if it is one.
pub fn parse_exec_stub(bytes: &[u8]) -> Option<&str> {
    let rest = bytes.strip_prefix(EXEC_MAGIC)?;
    let name = std::str::from_utf8(rest).ok()?.trim_end_matches('\n');
    (!name.is_empty() && !name.contains('\n')).then_some(name)
}

pub type ProgramMain = Arc<dyn Fn(&mut Guest) -> i32 + Send + Sync>;

#[derive(Clone)]
pub struct Program {
    pub main: ProgramMain,
    /// Whether the program can snapshot its state for `fork`.
    pub forkable: bool,
}

impl fmt::Debug for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Program").field("forkable", &self.forkable).finish_non_exhaustive()
    }
}

/// Programs that can be launched, and the filesystem paths they are installed at.
#[derive(Clone, Debug, Default)]
pub struct Registry {
    programs: BTreeMap<String, Program>,
    paths: BTreeMap<String, String>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    /// Registers `name`, installed at `/usr/bin/NAME`.
    pub fn register(&mut self, name: &str, main: impl Fn(&mut Guest) -> i32 + Send + Sync + 'static) -> &mut Self {
        self.insert(name, Program { main: Arc::new(main), forkable: false })
    }

    /// Registers a program that supports `fork`.
    pub fn register_forkable(
        &mut self,
        name: &str,
        main: impl Fn(&mut Guest) -> i32 + Send + Sync + 'static,
    ) -> &mut Self {
        self.insert(name, Program { main: Arc::new(main), forkable: true })
    }

    fn insert(&mut self, name: &str, program: Program) -> &mut Self {
        self.programs.insert(name.to_owned(), program);
        self.paths.insert(format!("/usr/bin/{name}"), name.to_owned());
        self
    }

    /// Installs an already registered program at another path.
    pub fn install_at(&mut self, path: &str, name: &str) -> &mut Self {
        assert!(self.programs.contains_key(name), "install of unregistered program {name}");
        self.paths.insert(path.to_owned(), name.to_owned());
        self
    }

    pub fn get(&self, name: &str) -> Option<&Program> {
        self.programs.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.programs.keys().map(String::as_str)
    }

    /// `(path, program)` pairs to materialize as executable stubs.
    pub fn install_paths(&self) -> impl Iterator<Item = (&str, &str)> {
        self.paths.iter().map(|(p, n)| (p.as_str(), n.as_str()))
    }
}

/// State handed from a forking parent to its child.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForkSnapshot {
    pub heap: Vec<u8>,
    pub resume_pc: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Entry {
    /// A registered program.
    Program(String),
    /// A script run by the program installed at `interp_path`.
    Interpreter { program: String, interp_path: String, script_path: String },
}

impl Entry {
    pub fn program(&self) -> &str {
        match self {
            Entry::Program(p) | Entry::Interpreter { program: p, .. } => p,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GuestImage {
    pub bytes: Vec<u8>,
    pub entry: Entry,
    pub argv: Vec<String>,
    pub environ: BTreeMap<String, String>,
    pub fork_snapshot: Option<ForkSnapshot>,
}

impl GuestImage {
    pub fn init_message(&self) -> InitMessage {
        InitMessage { argv: self.argv.clone(), environ: self.environ.clone(), fork_snapshot: self.fork_snapshot.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InitMessage {
    pub argv: Vec<String>,
    pub environ: BTreeMap<String, String>,
    pub fork_snapshot: Option<ForkSnapshot>,
}

#[derive(Debug)]
pub enum KernelMessage {
    Init(InitMessage),
    /// An encoded [`crate::wire::SyscallReply`].
    Reply(Vec<u8>),
    /// A handled signal; delivered before any reply it interrupted.
    Signal(Signal),
    RegionGrant(Arc<SharedRegion>, SyncCallSlot),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GuestMessage {
    /// An encoded [`crate::wire::SyscallEnvelope`].
    Call(Vec<u8>),
    /// A sync-convention call; the result lands in the shared region.
    SyncCall { trap: u32, args: [i64; 6] },
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LaunchError {
    #[error("no registered program named {0:?}")]
    UnknownExecutable(String),
    #[error("could not start guest thread: {0}")]
    LaunchFailure(String),
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("worker has been terminated")]
pub struct WorkerGone;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AttachError {
    #[error("a shared region is already attached")]
    AlreadyAttached,
    #[error("result or wake offset does not fit the region")]
    BadOffset,
}

/// The kernel-side end of a worker.
pub struct WorkerHandle {
    id: WorkerId,
    to_guest: Option<Sender<KernelMessage>>,
    killed: Arc<AtomicBool>,
    shared: Option<(Arc<SharedRegion>, SyncCallSlot)>,
    thread: Option<JoinHandle<()>>,
}

impl fmt::Debug for WorkerHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("WorkerHandle")
            .field("id", &self.id)
            .field("live", &self.to_guest.is_some())
            .field("shared", &self.shared.is_some())
            .finish()
    }
}

/// Starts a thread for `image`. The program's main body waits for the
/// [`InitMessage`] the kernel sends next.
pub fn launch_worker(
    id: WorkerId,
    image: &GuestImage,
    registry: &Registry,
    to_kernel: Sender<(WorkerId, GuestMessage)>,
) -> Result<WorkerHandle, LaunchError> {
    let name = image.entry.program();
    let program = registry.get(name).ok_or_else(|| LaunchError::UnknownExecutable(name.to_owned()))?.clone();
    let (tx, rx): (Sender<KernelMessage>, Receiver<KernelMessage>) = crossbeam_channel::unbounded();
    let killed = Arc::new(AtomicBool::new(false));
    let guest_killed = killed.clone();
    let thread = std::thread::Builder::new()
        .name(format!("guest-{id}-{name}"))
        .stack_size(GUEST_STACK)
        .spawn(move || guest::run(id, program, to_kernel, rx, guest_killed))
        .map_err(|e| LaunchError::LaunchFailure(e.to_string()))?;
    Ok(WorkerHandle { id, to_guest: Some(tx), killed, shared: None, thread: Some(thread) })
}

impl WorkerHandle {
    pub fn id(&self) -> WorkerId {
        self.id
    }

    pub fn is_live(&self) -> bool {
        self.to_guest.is_some()
    }

    pub fn send(&self, msg: KernelMessage) -> Result<(), WorkerGone> {
        let tx = self.to_guest.as_ref().ok_or(WorkerGone)?;
        tx.send(msg).map_err(|_| WorkerGone)
    }

    /// Stops the guest at its next cancellation point. Idempotent.
    pub fn terminate(&mut self) {
        if self.to_guest.is_none() {
            return;
        }
        self.killed.store(true, Ordering::SeqCst);
        if let Some((region, slot)) = &self.shared {
            slot.kill(region);
        }
        self.to_guest = None;
        // The thread unwinds on its own; joining here could stall the kernel
        // behind guest code that has not reached a cancellation point.
        self.thread.take();
    }

    /// Creates and grants a shared region for the sync convention.
    pub fn attach_shared_region(
        &mut self,
        size: usize,
        retval_off: usize,
        wake_off: usize,
    ) -> Result<Arc<SharedRegion>, AttachError> {
        if self.shared.is_some() {
            return Err(AttachError::AlreadyAttached);
        }
        let slot = SyncCallSlot::new(size, retval_off, wake_off).ok_or(AttachError::BadOffset)?;
        let region = Arc::new(SharedRegion::new(size));
        self.shared = Some((region.clone(), slot));
        // A worker that is already gone simply never sees the grant.
        let _ = self.send(KernelMessage::RegionGrant(region.clone(), slot));
        Ok(region)
    }

    pub fn shared(&self) -> Option<(&Arc<SharedRegion>, SyncCallSlot)> {
        self.shared.as_ref().map(|(r, s)| (r, *s))
    }

    /// Waits for the guest thread to finish. Only for tests and shutdown.
    pub fn join(&mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for WorkerHandle {
    fn drop(&mut self) {
        self.terminate();
    }
}

/// Builds an environment map from `KEY=VALUE` strings; entries without `=` are skipped.
pub fn environ_from_pairs<S: AsRef<str>>(pairs: &[S]) -> BTreeMap<String, String> {
    pairs
        .iter()
        .filter_map(|p| p.as_ref().split_once('=').map(|(k, v)| (k.to_owned(), v.to_owned())))
        .collect()
}

pub fn environ_to_pairs(env: &BTreeMap<String, String>) -> Vec<String> {
    env.iter().map(|(k, v)| format!("{k}={v}")).collect()
}
