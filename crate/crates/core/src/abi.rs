//! Flag values and signal numbers shared by the kernel and guest runtime.

use std::fmt;

pub const O_RDONLY: i64 = 0;
pub const O_WRONLY: i64 = 0o1;
pub const O_RDWR: i64 = 0o2;
pub const O_ACCMODE: i64 = 0o3;
pub const O_CREAT: i64 = 0o100;
pub const O_EXCL: i64 = 0o200;
pub const O_TRUNC: i64 = 0o1000;
pub const O_APPEND: i64 = 0o2000;
pub const O_DIRECTORY: i64 = 0o200000;

pub const SEEK_SET: i64 = 0;
pub const SEEK_CUR: i64 = 1;
pub const SEEK_END: i64 = 2;

pub const F_OK: i64 = 0;
pub const X_OK: i64 = 1;
pub const W_OK: i64 = 2;
pub const R_OK: i64 = 4;

pub const WNOHANG: i64 = 1;

pub const AF_INET: i64 = 2;
pub const SOCK_STREAM: i64 = 1;
pub const SOCK_DGRAM: i64 = 2;

pub const S_IFMT: u32 = 0o170000;
pub const S_IFDIR: u32 = 0o040000;
pub const S_IFREG: u32 = 0o100000;
pub const S_IFIFO: u32 = 0o010000;
pub const S_IFSOCK: u32 = 0o140000;

/// Disposition codes accepted by the `sigaction` trap.
pub const SIG_DFL: i64 = 0;
pub const SIG_IGN: i64 = 1;
pub const SIG_HANDLER: i64 = 2;

/// The standard signals the kernel knows how to route.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Signal(pub u32);

impl Signal {
    pub const SIGINT: Signal = Signal(2);
    pub const SIGKILL: Signal = Signal(9);
    pub const SIGUSR1: Signal = Signal(10);
    pub const SIGUSR2: Signal = Signal(12);
    pub const SIGTERM: Signal = Signal(15);
    pub const SIGCHLD: Signal = Signal(17);

    pub const ALL: [Signal; 6] = [
        Signal::SIGINT,
        Signal::SIGKILL,
        Signal::SIGUSR1,
        Signal::SIGUSR2,
        Signal::SIGTERM,
        Signal::SIGCHLD,
    ];

    pub fn from_raw(n: i64) -> Option<Signal> {
        Signal::ALL.iter().copied().find(|s| i64::from(s.0) == n)
    }

    pub fn name(self) -> &'static str {
        match self.0 {
            2 => "SIGINT",
            9 => "SIGKILL",
            10 => "SIGUSR1",
            12 => "SIGUSR2",
            15 => "SIGTERM",
            17 => "SIGCHLD",
            _ => "SIG?",
        }
    }

    /// Whether the default action terminates the process.
    pub fn default_terminates(self) -> bool {
        matches!(self.0, 2 | 9 | 15)
    }
}

impl fmt::Debug for Signal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Builds a `wait4` status word for a normal exit.
pub fn exit_status(code: i32) -> i32 {
    (code & 0xff) << 8
}

/// Builds a `wait4` status word for death by signal.
pub fn signal_status(sig: Signal) -> i32 {
    (sig.0 & 0x7f) as i32
}

pub fn wifexited(status: i32) -> bool {
    status & 0x7f == 0
}

pub fn wexitstatus(status: i32) -> i32 {
    (status >> 8) & 0xff
}

pub fn wtermsig(status: i32) -> i32 {
    status & 0x7f
}

/// Shell-style `$?` value for a wait status: the exit code, or 128 + signal.
pub fn shell_status(status: i32) -> i32 {
    if wifexited(status) {
        wexitstatus(status)
    } else {
        128 + wtermsig(status)
    }
}
