//! One terminal session: an interactive shell whose stdio is relayed as frames.

use std::collections::BTreeMap;

use crossbeam_channel::{unbounded, Receiver, Sender};
use sandboxd_core::abi::Signal;
use sandboxd_core::kernel::{HostSpawn, KernelHandle, Pid, Stdin, StdinToken};
use thiserror::Error;

use crate::frame::{Frame, Handshake, PROTOCOL_VERSION};

/// Byte a client sends for Ctrl-C; delivered to the shell as SIGINT.
pub const INTERRUPT: u8 = 0x03;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SessionError {
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("clients may not send {0:?} frames")]
    Direction(crate::frame::FrameKind),
    #[error("session has ended")]
    Ended,
}

pub struct Session {
    kernel: KernelHandle,
    pid: Pid,
    stdin: Option<StdinToken>,
    frames: Receiver<Frame>,
    dims: (u16, u16),
    exited: Receiver<()>,
}

impl Session {
    /// Starts `shell -i` for a client that sent `hs`.
    pub fn start(kernel: &KernelHandle, hs: &Handshake, shell: &str, mut env: BTreeMap<String, String>) -> Result<Session, StartError> {
        if hs.version != PROTOCOL_VERSION {
            return Err(StartError::Session(SessionError::Version(hs.version)));
        }
        env.insert("COLUMNS".into(), hs.cols.to_string());
        env.insert("LINES".into(), hs.rows.to_string());
        let (tx, frames) = unbounded();
        let (done_tx, exited) = unbounded();
        let mut spec = HostSpawn::new(shell, &[shell, "-i"]);
        spec.env = env;
        spec.stdin = Stdin::Pipe;
        spec.stdout = Some(sink(tx.clone(), Frame::Stdout));
        spec.stderr = Some(sink(tx.clone(), Frame::Stderr));
        spec.on_exit = Box::new(move |_, code| {
            let _ = tx.send(Frame::Exit(code));
            let _ = done_tx.send(());
        });
        let spawned = kernel.spawn(spec).map_err(StartError::Spawn)?;
        Ok(Session {
            kernel: kernel.clone(),
            pid: spawned.pid,
            stdin: spawned.stdin,
            frames,
            dims: (hs.cols, hs.rows),
            exited,
        })
    }

    pub fn pid(&self) -> Pid {
        self.pid
    }

    pub fn dims(&self) -> (u16, u16) {
        self.dims
    }

    /// Frames for the client in arrival order; [`Frame::Exit`] comes last.
    pub fn frames(&self) -> &Receiver<Frame> {
        &self.frames
    }

    pub fn has_exited(&self) -> bool {
        !self.exited.is_empty()
    }

    /// Applies a frame from the client.
    pub fn handle(&mut self, frame: Frame) -> Result<(), SessionError> {
        match frame {
            Frame::Stdin(bytes) => self.input(&bytes),
            Frame::Resize { cols, rows } => {
                self.dims = (cols, rows);
                Ok(())
            }
            other => Err(SessionError::Direction(other.kind())),
        }
    }

    fn input(&mut self, mut bytes: &[u8]) -> Result<(), SessionError> {
        let tok = self.stdin.ok_or(SessionError::Ended)?;
        while !bytes.is_empty() {
            let cut = bytes.iter().position(|&b| b == INTERRUPT).unwrap_or(bytes.len());
            if cut > 0 {
                self.kernel.write_stdin(tok, bytes[..cut].to_vec());
            }
            if cut < bytes.len() {
                self.kernel.kill(self.pid, Signal::SIGINT).map_err(|_| SessionError::Ended)?;
                bytes = &bytes[cut + 1..];
            } else {
                bytes = &[];
            }
        }
        Ok(())
    }

    /// Ends the session: the shell and everything it started are killed.
    pub fn close(self) {
        drop(self);
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Some(tok) = self.stdin.take() {
            self.kernel.close_stdin(tok);
        }
        if !self.has_exited() {
            let _ = self.kernel.kill_tree(self.pid, Signal::SIGKILL);
        }
    }
}

#[derive(Debug, Error)]
pub enum StartError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("cannot start the shell: {}", .0.message())]
    Spawn(sandboxd_core::Errno),
}

fn sink(tx: Sender<Frame>, wrap: fn(Vec<u8>) -> Frame) -> Box<dyn FnMut(&[u8]) + Send> {
    Box::new(move |b: &[u8]| {
        let _ = tx.send(wrap(b.to_vec()));
    })
}
