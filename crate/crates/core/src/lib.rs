//! A user-space Unix kernel emulator.
//!
//! Guest programs run on their own threads and talk to a single kernel loop
//! only through messages: either copied syscall envelopes, or integer
//! syscalls whose results land in a shared region the guest waits on.

pub mod abi;
pub mod bench;
pub mod errno;
pub mod guest;
pub mod http;
pub mod ipc;
pub mod kernel;
pub mod region;
pub mod vfs;
pub mod wire;
pub mod worker;

pub use errno::{Errno, SysResult};
