//! The runtime every guest program links against.
//!
//! A [`Guest`] is created on the worker thread once the init message arrives.
//! Calls go out either as copied envelopes answered by continuations (async),
//! or as six integer slots whose results the kernel writes into the shared
//! region while the guest waits on the wake word (sync). [`Guest::call`] is a
//! blocking facade over both and returns the same [`Reply`] either way.
//!
//! Signal handlers run on the guest thread between calls, never in the middle
//! of delivering a reply.

mod facade;
mod heap;

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap, VecDeque};
use std::panic::{self, AssertUnwindSafe};
use std::rc::Rc;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use crossbeam_channel::{Receiver, Sender};

pub use heap::{HeapImage, NotSnapshotable};

use crate::abi::Signal;
use crate::errno::{Errno, SysResult};
use crate::region::SharedRegion;
use crate::wire::{
    ArgKind, CallIdAllocator, OutLen, SyncCallSlot, SyscallEnvelope, SyscallReply, Trap, TrapSig, Value, WakeState,
    SYNC_SLOTS,
};
use crate::worker::{ForkSnapshot, GuestMessage, InitMessage, KernelMessage, Program, WorkerId};

/// Environment variable selecting the calling convention (`sync` or `async`).
pub const MODE_ENV: &str = "SANDBOXD_SYSCALL_MODE";
/// Shared region geometry requested by sync-convention guests.
pub const REGION_SIZE: usize = 1 << 20;
pub const RETVAL_OFF: usize = 64;
pub const WAKE_OFF: usize = 80;
/// Start of the area used to pass strings and buffers in sync calls.
pub const SCRATCH_BASE: usize = 128;

const OUTPUT_BUFFER: usize = 64 * 1024;

/// Unwind payload used to stop a guest thread that has been terminated.
#[derive(Debug)]
pub struct GuestKilled;

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Reply {
    pub ret: i64,
    pub aux: i64,
    pub errno: i32,
    pub payload: Option<Vec<u8>>,
}

impl Reply {
    pub fn err(e: Errno) -> Reply {
        Reply { ret: -1, aux: 0, errno: e.0, payload: None }
    }

    pub fn result(&self) -> SysResult<i64> {
        if self.errno != 0 {
            Err(Errno(self.errno))
        } else {
            Ok(self.ret)
        }
    }
}

impl From<SyscallReply> for Reply {
    fn from(r: SyscallReply) -> Self {
        Reply { ret: r.ret, aux: r.aux, errno: r.errno, payload: r.payload }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Convention {
    Async,
    Sync,
}

type Continuation = Box<dyn FnOnce(&mut Guest, Reply)>;
type Handler = Rc<dyn Fn(&mut Guest, Signal)>;

struct SyncState {
    region: Arc<SharedRegion>,
    slot: SyncCallSlot,
}

/// Where a sync call's outputs were placed in the region.
#[derive(Default)]
struct SyncLayout {
    out: Option<(usize, usize)>,
    aux: Option<usize>,
}

pub struct Guest {
    worker: WorkerId,
    to_kernel: Sender<(WorkerId, GuestMessage)>,
    rx: Receiver<KernelMessage>,
    killed: Arc<AtomicBool>,
    argv: Vec<String>,
    environ: BTreeMap<String, String>,
    fork_snapshot: Option<ForkSnapshot>,
    ids: CallIdAllocator,
    outstanding: HashMap<u32, Continuation>,
    /// Replies produced locally, without a kernel round trip.
    local: VecDeque<(Continuation, Reply)>,
    handlers: HashMap<Signal, Handler>,
    sync: Option<SyncState>,
    out: [Vec<u8>; 2],
    issued: u64,
    completed: u64,
}

/// Worker thread body: wait for init, run the program, exit with its status.
pub(crate) fn run(
    worker: WorkerId,
    program: Program,
    to_kernel: Sender<(WorkerId, GuestMessage)>,
    rx: Receiver<KernelMessage>,
    killed: Arc<AtomicBool>,
) {
    let init = loop {
        match rx.recv() {
            Ok(KernelMessage::Init(m)) => break m,
            Ok(_) => continue,
            Err(_) => return,
        }
    };
    let mut g = Guest::new(worker, to_kernel, rx, killed, init);
    let outcome = panic::catch_unwind(AssertUnwindSafe(|| {
        g.start();
        let code = (program.main)(&mut g);
        g.exit(code)
    }));
    if let Err(payload) = outcome {
        if !payload.is::<GuestKilled>() && !g.is_killed() {
            // A bug in the program: report abnormal termination.
            let _ = panic::catch_unwind(AssertUnwindSafe(|| g.exit(134)));
        }
    }
}

impl Guest {
    fn new(
        worker: WorkerId,
        to_kernel: Sender<(WorkerId, GuestMessage)>,
        rx: Receiver<KernelMessage>,
        killed: Arc<AtomicBool>,
        init: InitMessage,
    ) -> Guest {
        Guest {
            worker,
            to_kernel,
            rx,
            killed,
            argv: init.argv,
            environ: init.environ,
            fork_snapshot: init.fork_snapshot,
            ids: CallIdAllocator::default(),
            outstanding: HashMap::new(),
            local: VecDeque::new(),
            handlers: HashMap::new(),
            sync: None,
            out: [Vec::new(), Vec::new()],
            issued: 0,
            completed: 0,
        }
    }

    fn start(&mut self) {
        if self.env(MODE_ENV) == Some("sync") {
            let r = self.call_blocking_async(
                Trap::AttachShm.number(),
                vec![Value::Int(REGION_SIZE as i64), Value::Int(RETVAL_OFF as i64), Value::Int(WAKE_OFF as i64)],
            );
            assert!(r.errno == 0 && self.sync.is_some(), "shared region attach failed: errno {}", r.errno);
        }
    }

    pub fn argv(&self) -> &[String] {
        &self.argv
    }

    pub fn env(&self, key: &str) -> Option<&str> {
        self.environ.get(key).map(String::as_str)
    }

    pub fn environ(&self) -> &BTreeMap<String, String> {
        &self.environ
    }

    pub fn set_env(&mut self, key: &str, value: &str) {
        self.environ.insert(key.to_owned(), value.to_owned());
    }

    pub fn remove_env(&mut self, key: &str) {
        self.environ.remove(key);
    }

    pub fn convention(&self) -> Convention {
        if self.sync.is_some() {
            Convention::Sync
        } else {
            Convention::Async
        }
    }

    pub fn is_killed(&self) -> bool {
        self.killed.load(Ordering::SeqCst)
    }

    /// `(issued, completed)` async calls, for exactly-once audits.
    pub fn call_audit(&self) -> (u64, u64) {
        (self.issued, self.completed)
    }

    pub fn outstanding_calls(&self) -> usize {
        self.outstanding.len() + self.local.len()
    }

    fn die(&self) -> ! {
        self.killed.store(true, Ordering::SeqCst);
        panic::resume_unwind(Box::new(GuestKilled))
    }

    fn check_killed(&self) {
        if self.is_killed() {
            self.die();
        }
    }

    fn send(&self, msg: GuestMessage) {
        if self.to_kernel.send((self.worker, msg)).is_err() {
            self.die();
        }
    }

    /// Issues an async call; `cont` runs exactly once on this thread with the reply.
    pub fn call_async(&mut self, trap: u32, args: Vec<Value>, cont: impl FnOnce(&mut Guest, Reply) + 'static) {
        self.check_killed();
        self.issued += 1;
        let id = self.ids.next_id(|i| self.outstanding.contains_key(&i));
        match (SyscallEnvelope { id, trap, args }).encode() {
            Ok(bytes) => {
                self.outstanding.insert(id, Box::new(cont));
                self.send(GuestMessage::Call(bytes));
            }
            Err(_) => self.local.push_back((Box::new(cont), Reply::err(Errno::EINVAL))),
        }
    }

    /// Like [`call_async`](Self::call_async), naming the trap. Unknown names
    /// complete with ENOSYS.
    pub fn call_async_named(
        &mut self,
        name: &str,
        args: Vec<Value>,
        cont: impl FnOnce(&mut Guest, Reply) + 'static,
    ) {
        match Trap::by_name(name) {
            Some(t) => self.call_async(t.number(), args, cont),
            None => {
                self.issued += 1;
                self.local.push_back((Box::new(cont), Reply::err(Errno::ENOSYS)));
            }
        }
    }

    /// Processes one pending event, blocking until one is available.
    pub fn poll(&mut self) {
        if let Some((cont, reply)) = self.local.pop_front() {
            self.completed += 1;
            cont(self, reply);
            return;
        }
        self.check_killed();
        let msg = match self.rx.recv() {
            Ok(m) => m,
            Err(_) => self.die(),
        };
        self.handle(msg);
    }

    /// Runs the event loop until no async call is outstanding.
    pub fn wait_all(&mut self) {
        while self.outstanding_calls() > 0 {
            self.poll();
        }
    }

    fn handle(&mut self, msg: KernelMessage) {
        match msg {
            KernelMessage::Reply(bytes) => {
                let reply = SyscallReply::decode(&bytes).expect("kernel sent a malformed reply");
                if let Some(cont) = self.outstanding.remove(&reply.id) {
                    self.completed += 1;
                    cont(self, reply.into());
                }
            }
            KernelMessage::Signal(sig) => {
                if let Some(h) = self.handlers.get(&sig).cloned() {
                    h(self, sig);
                }
            }
            KernelMessage::RegionGrant(region, slot) => self.sync = Some(SyncState { region, slot }),
            KernelMessage::Init(_) => {}
        }
    }

    fn drain_pending(&mut self) {
        while let Ok(msg) = self.rx.try_recv() {
            self.handle(msg);
        }
    }

    /// Blocking call through the task's convention.
    pub fn call(&mut self, trap: Trap, args: Vec<Value>) -> Reply {
        if self.sync.is_some() && !trap.sig().async_only {
            self.call_sync(trap.sig(), &args)
        } else {
            self.call_blocking_async(trap.number(), args)
        }
    }

    /// Issues an async call and pumps events until its reply arrives.
    pub fn call_blocking_async(&mut self, trap: u32, args: Vec<Value>) -> Reply {
        let slot: Rc<RefCell<Option<Reply>>> = Rc::new(RefCell::new(None));
        let fill = slot.clone();
        self.call_async(trap, args, move |_, r| *fill.borrow_mut() = Some(r));
        loop {
            if let Some(r) = slot.borrow_mut().take() {
                return r;
            }
            self.poll();
        }
    }

    /// Largest buffer a single sync call can carry.
    pub fn sync_capacity(&self) -> Option<usize> {
        self.sync.as_ref().map(|s| s.region.size() - SCRATCH_BASE - 64)
    }

    fn call_sync(&mut self, sig: &TrapSig, args: &[Value]) -> Reply {
        let (slots, layout) = match self.marshal(sig, args) {
            Ok(x) => x,
            Err(e) => return Reply::err(e),
        };
        let (ret, errno) = self.sync_wait(sig.trap.number(), slots, sig.interruptible);
        if errno != 0 {
            return Reply { ret, aux: 0, errno, payload: None };
        }
        let region = &self.sync.as_ref().expect("sync state").region;
        let payload = match (sig.out, layout.out) {
            (OutLen::Ret, Some((off, cap))) => Some(region.read_vec(off, (ret.max(0) as usize).min(cap))),
            (OutLen::Fixed(n), Some((off, cap))) => Some(region.read_vec(off, n.min(cap))),
            _ => None,
        }
        .transpose()
        .expect("output buffer lies inside the region");
        let aux = layout.aux.map(|off| region.read_i64(off).expect("aux slot inside region")).unwrap_or(0);
        Reply { ret, aux, errno, payload }
    }

    /// Places arguments in the scratch area and builds the integer slots.
    fn marshal(&self, sig: &TrapSig, args: &[Value]) -> SysResult<([i64; SYNC_SLOTS], SyncLayout)> {
        if args.len() != sig.args.len() {
            return Err(Errno::EINVAL);
        }
        let region = &self.sync.as_ref().ok_or(Errno::EINVAL)?.region;
        let mut cursor = SCRATCH_BASE;
        let mut alloc = |len: usize| -> SysResult<usize> {
            let off = cursor.next_multiple_of(8);
            let end = off.checked_add(len).filter(|e| *e <= region.size()).ok_or(Errno::EFAULT)?;
            cursor = end;
            Ok(off)
        };
        let mut slots = [0i64; SYNC_SLOTS];
        let mut n = 0;
        let mut push = |v: i64| {
            slots[n] = v;
            n += 1;
        };
        let mut layout = SyncLayout::default();
        for (kind, value) in sig.args.iter().zip(args) {
            match (kind, value) {
                (ArgKind::Int, Value::Int(i)) => push(*i),
                (ArgKind::Str, Value::Str(s)) => {
                    let off = alloc(s.len() + 1)?;
                    region.write(off, s.as_bytes()).map_err(|_| Errno::EFAULT)?;
                    region.write(off + s.len(), &[0]).map_err(|_| Errno::EFAULT)?;
                    push(off as i64);
                }
                (ArgKind::StrVec, Value::Bytes(b)) => {
                    let off = alloc(b.len())?;
                    region.write(off, b).map_err(|_| Errno::EFAULT)?;
                    push(off as i64);
                }
                (ArgKind::Bytes, Value::Bytes(b)) => {
                    let off = alloc(b.len())?;
                    region.write(off, b).map_err(|_| Errno::EFAULT)?;
                    push(off as i64);
                    push(b.len() as i64);
                }
                (ArgKind::IntList, Value::IntList(l)) => {
                    let off = alloc(l.len() * 8)?;
                    for (i, v) in l.iter().enumerate() {
                        region.write_i64(off + i * 8, *v).map_err(|_| Errno::EFAULT)?;
                    }
                    push(off as i64);
                    push(l.len() as i64);
                }
                (ArgKind::Out, Value::Int(cap)) => {
                    let cap = usize::try_from(*cap).map_err(|_| Errno::EINVAL)?;
                    let off = alloc(cap)?;
                    push(off as i64);
                    push(cap as i64);
                    layout.out = Some((off, cap));
                }
                _ => return Err(Errno::EINVAL),
            }
        }
        if sig.aux {
            let off = alloc(8)?;
            push(off as i64);
            layout.aux = Some(off);
        }
        Ok((slots, layout))
    }

    /// Raw sync call: sends the slots and waits on the wake word.
    pub fn sync_raw(&mut self, trap: u32, args: [i64; SYNC_SLOTS]) -> (i64, i32) {
        if self.sync.is_none() {
            return (-1, Errno::EINVAL.0);
        }
        let interruptible = Trap::from_u32(trap).is_some_and(|t| t.sig().interruptible);
        self.sync_wait(trap, args, interruptible)
    }

    fn sync_wait(&mut self, trap: u32, args: [i64; SYNC_SLOTS], interruptible: bool) -> (i64, i32) {
        self.check_killed();
        let (region, slot) = {
            let s = self.sync.as_ref().expect("sync state");
            (s.region.clone(), s.slot)
        };
        if !slot.arm(&region) {
            self.die();
        }
        self.send(GuestMessage::SyncCall { trap, args });
        loop {
            match slot.wait(&region) {
                WakeState::Complete => {
                    let (ret, errno, _) = slot.result(&region);
                    if !slot.consume(&region, WakeState::Complete) {
                        self.die();
                    }
                    self.drain_pending();
                    return (ret, errno);
                }
                WakeState::Signal => {
                    if !slot.consume(&region, WakeState::Signal) {
                        self.die();
                    }
                    self.drain_pending();
                    if interruptible {
                        return (-1, Errno::EINTR.0);
                    }
                }
                WakeState::Killed | WakeState::Parked => self.die(),
            }
        }
    }

    /// Registers `handler` for `sig`; a later registration replaces it.
    pub fn on_signal(&mut self, sig: Signal, handler: impl Fn(&mut Guest, Signal) + 'static) -> SysResult<()> {
        if sig == Signal::SIGKILL {
            return Err(Errno::EINVAL);
        }
        let prev = self.handlers.insert(sig, Rc::new(handler));
        let r = self.sigaction(sig, crate::abi::SIG_HANDLER);
        if r.is_err() {
            match prev {
                Some(p) => self.handlers.insert(sig, p),
                None => self.handlers.remove(&sig),
            };
        }
        r
    }

    /// Buffers output for fd 1 or 2; other fds are written directly.
    pub fn print(&mut self, fd: i32, data: &[u8]) -> SysResult<()> {
        let idx = match fd {
            1 => 0,
            2 => 1,
            _ => return self.write_all(fd, data),
        };
        self.out[idx].extend_from_slice(data);
        if self.out[idx].len() >= OUTPUT_BUFFER {
            self.flush_fd(fd)?;
        }
        Ok(())
    }

    pub fn print_str(&mut self, fd: i32, s: &str) -> SysResult<()> {
        self.print(fd, s.as_bytes())
    }

    fn flush_fd(&mut self, fd: i32) -> SysResult<()> {
        let idx = if fd == 1 { 0 } else { 1 };
        if self.out[idx].is_empty() {
            return Ok(());
        }
        let data = std::mem::take(&mut self.out[idx]);
        self.write_all(fd, &data)
    }

    pub fn flush(&mut self) -> SysResult<()> {
        let a = self.flush_fd(1);
        let b = self.flush_fd(2);
        a.and(b)
    }

    /// Flushes buffered output, issues `exit`, and waits to be torn down.
    pub fn exit(&mut self, code: i32) -> ! {
        let _ = self.flush();
        let args = vec![Value::Int(i64::from(code))];
        if self.sync.is_some() {
            self.sync_wait(Trap::Exit.number(), [i64::from(code), 0, 0, 0, 0, 0], false);
        } else {
            self.call_async(Trap::Exit.number(), args, |_, _| {});
        }
        loop {
            self.poll();
        }
    }

    /// State handed over by `fork`, present only in a forked child.
    pub fn fork_snapshot(&self) -> Option<&ForkSnapshot> {
        self.fork_snapshot.as_ref()
    }
}
