//! Syscall ABI shared by the kernel and the guest runtime.
//!
//! Two calling conventions use this table:
//!
//! * **async**: a [`SyscallEnvelope`] with a per-process call id, the trap
//!   number and a list of copied [`Value`]s is sent to the kernel; the kernel
//!   answers with a [`SyscallReply`] carrying `(ret, aux, errno)` and an
//!   optional payload.
//! * **sync**: the guest sends the trap number and six `i64` slots, then blocks
//!   on a wake word in its shared region. Strings, buffers and output areas are
//!   passed as offsets into that region (see [`ArgKind`] for the slot layout).
//!
//! The trap numbers below are this project's own stable numbering.

mod codec;
pub mod dirent;
pub mod stat;
pub mod sync;

pub use codec::{
    pack_strvec, unpack_strvec, CallIdAllocator, SyscallEnvelope, SyscallReply, Value, WireError,
};
pub use dirent::{decode_dirents, encode_dirents, encode_dirents_at, DirentError, DirentRecord, DT_DIR, DT_REG, DT_UNKNOWN};
pub use stat::{StatRecord, STAT_SIZE};
pub use sync::{SyncCallSlot, WakeState, SYNC_SLOTS};

/// How one logical argument is carried under each convention.
///
/// | kind    | async value         | sync slots                         |
/// |---------|---------------------|------------------------------------|
/// | Int     | `Value::Int`        | 1: the integer                     |
/// | Str     | `Value::Str`        | 1: offset of NUL-terminated UTF-8  |
/// | StrVec  | `Value::Bytes`      | 1: offset of a packed string block |
/// | Bytes   | `Value::Bytes`      | 2: offset, length                  |
/// | IntList | `Value::IntList`    | 2: offset, count (i64 LE each)     |
/// | Out     | `Value::Int(cap)`   | 2: offset, capacity                |
///
/// Traps that return an `aux` value take one extra trailing sync slot: the
/// offset where the kernel stores `aux` as an i64.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArgKind {
    Int,
    Str,
    StrVec,
    Bytes,
    IntList,
    Out,
}

impl ArgKind {
    pub fn sync_slots(self) -> usize {
        match self {
            ArgKind::Int | ArgKind::Str | ArgKind::StrVec => 1,
            ArgKind::Bytes | ArgKind::IntList | ArgKind::Out => 2,
        }
    }
}

/// Length of the payload a trap writes into its output buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutLen {
    /// No output buffer.
    None,
    /// `ret` bytes.
    Ret,
    /// A fixed-size record on success.
    Fixed(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct TrapSig {
    pub trap: Trap,
    pub name: &'static str,
    pub args: &'static [ArgKind],
    pub out: OutLen,
    pub aux: bool,
    /// Fails with EINTR when a handled signal arrives while the call is parked.
    pub interruptible: bool,
    /// Only meaningful under the async convention (no sync encoding exists).
    pub async_only: bool,
}

impl TrapSig {
    pub fn sync_slot_count(&self) -> usize {
        self.args.iter().map(|a| a.sync_slots()).sum::<usize>() + usize::from(self.aux)
    }
}

macro_rules! traps {
    ($( $variant:ident = $num:literal, $name:literal, [$($arg:ident),*], $out:expr, aux=$aux:literal, intr=$intr:literal, async_only=$ao:literal; )*) => {
        /// Stable trap numbers.
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
        #[repr(u32)]
        pub enum Trap {
            $( $variant = $num, )*
        }

        /// The full trap table, ordered by number.
        pub const TRAP_TABLE: &[TrapSig] = &[
            $( TrapSig {
                trap: Trap::$variant,
                name: $name,
                args: &[$(ArgKind::$arg),*],
                out: $out,
                aux: $aux,
                interruptible: $intr,
                async_only: $ao,
            }, )*
        ];
    };
}

traps! {
    Exit = 1, "exit", [Int], OutLen::None, aux=false, intr=false, async_only=false;
    Fork = 2, "fork", [Bytes, Int], OutLen::None, aux=false, intr=false, async_only=false;
    Spawn = 3, "spawn", [Str, StrVec, StrVec, IntList], OutLen::None, aux=false, intr=false, async_only=false;
    Pipe2 = 4, "pipe2", [Int], OutLen::None, aux=true, intr=false, async_only=false;
    Wait4 = 5, "wait4", [Int, Int], OutLen::None, aux=true, intr=true, async_only=false;
    Chdir = 6, "chdir", [Str], OutLen::None, aux=false, intr=false, async_only=false;
    Getcwd = 7, "getcwd", [Out], OutLen::Ret, aux=false, intr=false, async_only=false;
    Getpid = 8, "getpid", [], OutLen::None, aux=false, intr=false, async_only=false;
    Getppid = 9, "getppid", [], OutLen::None, aux=false, intr=false, async_only=false;
    Socket = 10, "socket", [Int, Int, Int], OutLen::None, aux=false, intr=false, async_only=false;
    Bind = 11, "bind", [Int, Int], OutLen::None, aux=false, intr=false, async_only=false;
    Getsockname = 12, "getsockname", [Int], OutLen::None, aux=false, intr=false, async_only=false;
    Listen = 13, "listen", [Int, Int], OutLen::None, aux=false, intr=false, async_only=false;
    Accept = 14, "accept", [Int], OutLen::None, aux=false, intr=true, async_only=false;
    Connect = 15, "connect", [Int, Int], OutLen::None, aux=false, intr=true, async_only=false;
    Readdir = 16, "readdir", [Int, Out], OutLen::Ret, aux=false, intr=false, async_only=false;
    Getdents = 17, "getdents", [Int, Out], OutLen::Ret, aux=false, intr=false, async_only=false;
    Rmdir = 18, "rmdir", [Str], OutLen::None, aux=false, intr=false, async_only=false;
    Mkdir = 19, "mkdir", [Str, Int], OutLen::None, aux=false, intr=false, async_only=false;
    Open = 20, "open", [Str, Int, Int], OutLen::None, aux=false, intr=false, async_only=false;
    Close = 21, "close", [Int], OutLen::None, aux=false, intr=false, async_only=false;
    Unlink = 22, "unlink", [Str], OutLen::None, aux=false, intr=false, async_only=false;
    Llseek = 23, "llseek", [Int, Int, Int], OutLen::None, aux=false, intr=false, async_only=false;
    Pread = 24, "pread", [Int, Out, Int], OutLen::Ret, aux=false, intr=true, async_only=false;
    Pwrite = 25, "pwrite", [Int, Bytes, Int], OutLen::None, aux=false, intr=true, async_only=false;
    Access = 26, "access", [Str, Int], OutLen::None, aux=false, intr=false, async_only=false;
    Fstat = 27, "fstat", [Int, Out], OutLen::Fixed(STAT_SIZE), aux=false, intr=false, async_only=false;
    Lstat = 28, "lstat", [Str, Out], OutLen::Fixed(STAT_SIZE), aux=false, intr=false, async_only=false;
    Stat = 29, "stat", [Str, Out], OutLen::Fixed(STAT_SIZE), aux=false, intr=false, async_only=false;
    Readlink = 30, "readlink", [Str, Out], OutLen::Ret, aux=false, intr=false, async_only=false;
    Utimes = 31, "utimes", [Str, Int, Int], OutLen::None, aux=false, intr=false, async_only=false;
    Read = 32, "read", [Int, Out], OutLen::Ret, aux=false, intr=true, async_only=false;
    Write = 33, "write", [Int, Bytes], OutLen::None, aux=false, intr=true, async_only=false;
    Kill = 34, "kill", [Int, Int], OutLen::None, aux=false, intr=false, async_only=false;
    Sigaction = 35, "sigaction", [Int, Int], OutLen::None, aux=false, intr=false, async_only=false;
    AttachShm = 36, "attach_shm", [Int, Int, Int], OutLen::None, aux=false, intr=false, async_only=true;
}

impl Trap {
    pub fn from_u32(n: u32) -> Option<Trap> {
        TRAP_TABLE.iter().find(|s| s.trap as u32 == n).map(|s| s.trap)
    }

    pub fn by_name(name: &str) -> Option<Trap> {
        TRAP_TABLE.iter().find(|s| s.name == name).map(|s| s.trap)
    }

    pub fn sig(self) -> &'static TrapSig {
        // The table is dense and ordered from 1.
        let sig = &TRAP_TABLE[self as usize - 1];
        debug_assert_eq!(sig.trap, self);
        sig
    }

    pub fn name(self) -> &'static str {
        self.sig().name
    }

    pub fn number(self) -> u32 {
        self as u32
    }
}
