//! Pipes and loopback stream sockets.
//!
//! [`Ipc`] owns every pipe and socket endpoint. Like [`Pipe`], it never blocks:
//! callers are identified by an opaque token `W`, and each operation returns
//! the set of calls it finished.

pub mod pipe;
mod socket;

use std::collections::{HashMap, VecDeque};

pub use pipe::{Completion, Outcome, Pipe, DEFAULT_PIPE_CAPACITY};
pub use socket::{SockState, DEFAULT_BACKLOG, EPHEMERAL_BASE};

use crate::errno::{Errno, SysResult};

pub type PipeId = u64;
pub type SockId = u64;

#[derive(Debug, PartialEq, Eq)]
pub enum IpcResult {
    Pipe(Outcome),
    /// A `connect` was accepted.
    Connected,
    /// An `accept` produced this new connected endpoint.
    Accepted(SockId),
    Failed(Errno),
}

#[derive(Debug, PartialEq, Eq)]
pub struct Done<W> {
    pub who: W,
    pub result: IpcResult,
}

impl<W> From<Completion<W>> for Done<W> {
    fn from(c: Completion<W>) -> Self {
        Done { who: c.who, result: IpcResult::Pipe(c.outcome) }
    }
}

/// A connection queued on a listener, waiting for `accept`.
#[derive(Debug)]
pub struct PendingConn<W> {
    client: SockId,
    who: W,
    c2s: PipeId,
    s2c: PipeId,
}

#[derive(Debug)]
pub struct Ipc<W> {
    pipes: HashMap<PipeId, Pipe<W>>,
    sockets: HashMap<SockId, SockState<W>>,
    ports: HashMap<u16, SockId>,
    next_id: u64,
    pipe_cap: usize,
}

impl<W> Ipc<W> {
    pub fn new(pipe_cap: usize) -> Self {
        Ipc { pipes: HashMap::new(), sockets: HashMap::new(), ports: HashMap::new(), next_id: 1, pipe_cap }
    }

    pub fn pipe_capacity(&self) -> usize {
        self.pipe_cap
    }

    fn fresh_id(&mut self) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    pub fn pipe_create(&mut self) -> PipeId {
        let id = self.fresh_id();
        self.pipes.insert(id, Pipe::new(self.pipe_cap));
        id
    }

    pub fn pipe(&self, id: PipeId) -> Option<&Pipe<W>> {
        self.pipes.get(&id)
    }

    pub fn pipe_count(&self) -> usize {
        self.pipes.len()
    }

    pub fn socket_count(&self) -> usize {
        self.sockets.len()
    }

    pub fn pipe_read(&mut self, id: PipeId, who: W, len: usize) -> Vec<Done<W>> {
        match self.pipes.get_mut(&id) {
            Some(p) => p.read(who, len).into_iter().map(Done::from).collect(),
            None => vec![Done { who, result: IpcResult::Failed(Errno::EBADF) }],
        }
    }

    pub fn pipe_write(&mut self, id: PipeId, who: W, data: Vec<u8>) -> Vec<Done<W>> {
        match self.pipes.get_mut(&id) {
            Some(p) => p.write(who, data).into_iter().map(Done::from).collect(),
            None => vec![Done { who, result: IpcResult::Failed(Errno::EPIPE) }],
        }
    }

    /// Takes all buffered bytes of a pipe without parking. Returns the bytes,
    /// finished writers, and whether the pipe reached end of file.
    pub fn pipe_drain(&mut self, id: PipeId) -> (Vec<u8>, Vec<Done<W>>, bool) {
        match self.pipes.get_mut(&id) {
            Some(p) => {
                let (data, done) = p.drain();
                let eof = p.at_eof();
                (data, done.into_iter().map(Done::from).collect(), eof)
            }
            None => (Vec::new(), Vec::new(), true),
        }
    }

    pub fn pipe_close_read(&mut self, id: PipeId) -> Vec<Done<W>> {
        let Some(p) = self.pipes.get_mut(&id) else { return Vec::new() };
        let done = p.close_reader();
        if p.is_dead() {
            self.pipes.remove(&id);
        }
        done.into_iter().map(Done::from).collect()
    }

    pub fn pipe_close_write(&mut self, id: PipeId) -> Vec<Done<W>> {
        let Some(p) = self.pipes.get_mut(&id) else { return Vec::new() };
        let done = p.close_writer();
        if p.is_dead() {
            self.pipes.remove(&id);
        }
        done.into_iter().map(Done::from).collect()
    }

    /// Removes every parked call whose token matches, across pipes and socket
    /// queues. Returns each cancelled token with the bytes it had written.
    pub fn cancel(&mut self, mut pred: impl FnMut(&W) -> bool) -> Vec<(W, usize)> {
        let mut out = Vec::new();
        for p in self.pipes.values_mut() {
            out.extend(p.cancel(&mut pred));
        }
        let mut dropped_pipes = Vec::new();
        for s in self.sockets.values_mut() {
            if let SockState::Listening { backlog, accept_waiters, connect_waiters, .. } = s {
                let mut keep = VecDeque::new();
                for w in accept_waiters.drain(..) {
                    if pred(&w) {
                        out.push((w, 0));
                    } else {
                        keep.push_back(w);
                    }
                }
                *accept_waiters = keep;
                for q in [backlog, connect_waiters] {
                    let mut keep = VecDeque::new();
                    for c in q.drain(..) {
                        if pred(&c.who) {
                            dropped_pipes.push((c.client, c.c2s, c.s2c));
                            out.push((c.who, 0));
                        } else {
                            keep.push_back(c);
                        }
                    }
                    *q = keep;
                }
            }
        }
        for (client, c2s, s2c) in dropped_pipes {
            self.pipes.remove(&c2s);
            self.pipes.remove(&s2c);
            if let Some(s) = self.sockets.get_mut(&client) {
                *s = SockState::Fresh;
            }
        }
        out
    }

    pub fn has_parked(&self, mut pred: impl FnMut(&W) -> bool) -> bool {
        self.pipes.values().any(|p| p.has_parked(&mut pred))
            || self.sockets.values().any(|s| match s {
                SockState::Listening { backlog, accept_waiters, connect_waiters, .. } => {
                    accept_waiters.iter().any(&mut pred)
                        || backlog.iter().any(|c| pred(&c.who))
                        || connect_waiters.iter().any(|c| pred(&c.who))
                }
                _ => false,
            })
    }

    pub fn is_listening(&self, port: u16) -> bool {
        self.ports
            .get(&port)
            .and_then(|s| self.sockets.get(s))
            .is_some_and(|s| matches!(s, SockState::Listening { .. }))
    }

    pub fn socket_state(&self, id: SockId) -> Option<&SockState<W>> {
        self.sockets.get(&id)
    }

    fn connected_pipes(&self, id: SockId) -> SysResult<(PipeId, PipeId)> {
        match self.sockets.get(&id) {
            Some(SockState::Connected { rx, tx }) => Ok((*rx, *tx)),
            Some(SockState::Listening { .. }) => Err(Errno::EINVAL),
            Some(_) => Err(Errno::ENOTCONN),
            None => Err(Errno::EBADF),
        }
    }

    pub fn sock_read(&mut self, id: SockId, who: W, len: usize) -> Vec<Done<W>> {
        match self.connected_pipes(id) {
            Ok((rx, _)) => self.pipe_read(rx, who, len),
            Err(e) => vec![Done { who, result: IpcResult::Failed(e) }],
        }
    }

    pub fn sock_write(&mut self, id: SockId, who: W, data: Vec<u8>) -> Vec<Done<W>> {
        match self.connected_pipes(id) {
            Ok((_, tx)) => self.pipe_write(tx, who, data),
            Err(e) => vec![Done { who, result: IpcResult::Failed(e) }],
        }
    }

    /// The receive pipe of a connected endpoint.
    pub fn sock_rx(&self, id: SockId) -> SysResult<PipeId> {
        self.connected_pipes(id).map(|p| p.0)
    }
}
