//! Loopback stream sockets built from pairs of pipes.

use std::collections::VecDeque;

use super::{Done, Ipc, IpcResult, PendingConn, PipeId, SockId};
use crate::errno::{Errno, SysResult};

pub const DEFAULT_BACKLOG: usize = 16;
pub const EPHEMERAL_BASE: u16 = 49152;

#[derive(Debug)]
pub enum SockState<W> {
    Fresh,
    Bound(u16),
    Listening {
        port: u16,
        max_backlog: usize,
        backlog: VecDeque<PendingConn<W>>,
        accept_waiters: VecDeque<W>,
        connect_waiters: VecDeque<PendingConn<W>>,
    },
    /// `connect` issued and queued on a listener.
    Connecting,
    Connected {
        rx: PipeId,
        tx: PipeId,
    },
}

impl<W> Ipc<W> {
    pub fn socket_create(&mut self) -> SockId {
        let id = self.fresh_id();
        self.sockets.insert(id, SockState::Fresh);
        id
    }

    pub fn bind(&mut self, id: SockId, port: u16) -> SysResult<u16> {
        match self.sockets.get(&id) {
            Some(SockState::Fresh) => {}
            Some(_) => return Err(Errno::EINVAL),
            None => return Err(Errno::EBADF),
        }
        let port = if port == 0 {
            (EPHEMERAL_BASE..=u16::MAX).find(|p| !self.ports.contains_key(p)).ok_or(Errno::EADDRINUSE)?
        } else if self.ports.contains_key(&port) {
            return Err(Errno::EADDRINUSE);
        } else {
            port
        };
        self.ports.insert(port, id);
        self.sockets.insert(id, SockState::Bound(port));
        Ok(port)
    }

    pub fn listen(&mut self, id: SockId, backlog: usize) -> SysResult<u16> {
        let port = match self.sockets.get(&id) {
            Some(SockState::Bound(p)) => *p,
            Some(SockState::Listening { port, .. }) => return Ok(*port),
            Some(_) => return Err(Errno::EINVAL),
            None => return Err(Errno::EBADF),
        };
        let max_backlog = if backlog == 0 { DEFAULT_BACKLOG } else { backlog };
        self.sockets.insert(
            id,
            SockState::Listening {
                port,
                max_backlog,
                backlog: VecDeque::new(),
                accept_waiters: VecDeque::new(),
                connect_waiters: VecDeque::new(),
            },
        );
        Ok(port)
    }

    pub fn getsockname(&self, id: SockId) -> SysResult<u16> {
        match self.sockets.get(&id) {
            Some(SockState::Bound(p)) | Some(SockState::Listening { port: p, .. }) => Ok(*p),
            Some(_) => Err(Errno::EINVAL),
            None => Err(Errno::EBADF),
        }
    }

    /// Queues a connection to `port`. The caller parks until a peer accepts.
    pub fn connect(&mut self, id: SockId, port: u16, who: W) -> Vec<Done<W>> {
        let fail = |who, e| vec![Done { who, result: IpcResult::Failed(e) }];
        match self.sockets.get(&id) {
            Some(SockState::Fresh) | Some(SockState::Bound(_)) => {}
            Some(SockState::Connected { .. }) => return fail(who, Errno::EISCONN),
            Some(_) => return fail(who, Errno::EINVAL),
            None => return fail(who, Errno::EBADF),
        }
        let Some(&listener) = self.ports.get(&port) else { return fail(who, Errno::ECONNREFUSED) };
        if !matches!(self.sockets.get(&listener), Some(SockState::Listening { .. })) {
            return fail(who, Errno::ECONNREFUSED);
        }
        let c2s = self.pipe_create();
        let s2c = self.pipe_create();
        self.sockets.insert(id, SockState::Connecting);
        let conn = PendingConn { client: id, who, c2s, s2c };
        let Some(SockState::Listening { max_backlog, backlog, connect_waiters, .. }) =
            self.sockets.get_mut(&listener)
        else {
            unreachable!()
        };
        if backlog.len() < *max_backlog {
            backlog.push_back(conn);
        } else {
            connect_waiters.push_back(conn);
        }
        self.match_accepts(listener)
    }

    pub fn accept(&mut self, id: SockId, who: W) -> Vec<Done<W>> {
        match self.sockets.get_mut(&id) {
            Some(SockState::Listening { accept_waiters, .. }) => accept_waiters.push_back(who),
            Some(_) => return vec![Done { who, result: IpcResult::Failed(Errno::EINVAL) }],
            None => return vec![Done { who, result: IpcResult::Failed(Errno::EBADF) }],
        }
        self.match_accepts(id)
    }

    fn match_accepts(&mut self, listener: SockId) -> Vec<Done<W>> {
        let mut done = Vec::new();
        loop {
            let Some(SockState::Listening { max_backlog, backlog, accept_waiters, connect_waiters, .. }) =
                self.sockets.get_mut(&listener)
            else {
                break;
            };
            if backlog.is_empty() || accept_waiters.is_empty() {
                break;
            }
            let acceptor = accept_waiters.pop_front().unwrap();
            let conn = backlog.pop_front().unwrap();
            while backlog.len() < *max_backlog {
                match connect_waiters.pop_front() {
                    Some(c) => backlog.push_back(c),
                    None => break,
                }
            }
            let server = self.fresh_id();
            self.sockets.insert(server, SockState::Connected { rx: conn.c2s, tx: conn.s2c });
            self.sockets.insert(conn.client, SockState::Connected { rx: conn.s2c, tx: conn.c2s });
            done.push(Done { who: conn.who, result: IpcResult::Connected });
            done.push(Done { who: acceptor, result: IpcResult::Accepted(server) });
        }
        done
    }

    /// Releases an endpoint. Pending connectors on a closed listener are refused.
    pub fn sock_close(&mut self, id: SockId) -> Vec<Done<W>> {
        let Some(state) = self.sockets.remove(&id) else { return Vec::new() };
        let mut done = Vec::new();
        match state {
            SockState::Fresh | SockState::Connecting => {}
            SockState::Bound(port) => {
                self.ports.remove(&port);
            }
            SockState::Listening { port, backlog, accept_waiters, connect_waiters, .. } => {
                self.ports.remove(&port);
                for c in backlog.into_iter().chain(connect_waiters) {
                    self.pipes.remove(&c.c2s);
                    self.pipes.remove(&c.s2c);
                    if let Some(s) = self.sockets.get_mut(&c.client) {
                        *s = SockState::Fresh;
                    }
                    done.push(Done { who: c.who, result: IpcResult::Failed(Errno::ECONNREFUSED) });
                }
                for w in accept_waiters {
                    done.push(Done { who: w, result: IpcResult::Failed(Errno::EBADF) });
                }
            }
            SockState::Connected { rx, tx } => {
                done.extend(self.pipe_close_read(rx));
                done.extend(self.pipe_close_write(tx));
            }
        }
        done
    }
}
