//! Bounded in-memory pipe with read and write wait queues.
//!
//! The pipe never blocks a thread. Operations that cannot finish park the
//! caller's token `W` in a queue; every operation returns the list of callers
//! whose calls finished as a result (which may include the caller itself).
//!
//! Writers complete only once their whole payload has entered the buffer, so a
//! large write is drained across several reader wakeups.

use std::collections::VecDeque;

use crate::errno::Errno;

pub const DEFAULT_PIPE_CAPACITY: usize = 65536;

#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    /// Bytes read; empty means end of file.
    Read(Vec<u8>),
    /// Bytes accepted from a write.
    Wrote(usize),
    Failed(Errno),
}

#[derive(Debug, PartialEq, Eq)]
pub struct Completion<W> {
    pub who: W,
    pub outcome: Outcome,
}

#[derive(Debug, Clone)]
struct ReadWaiter<W> {
    who: W,
    len: usize,
}

#[derive(Debug, Clone)]
struct WriteWaiter<W> {
    who: W,
    data: Vec<u8>,
    done: usize,
}

#[derive(Debug, Clone)]
pub struct Pipe<W> {
    buf: VecDeque<u8>,
    cap: usize,
    readers: u32,
    writers: u32,
    read_waiters: VecDeque<ReadWaiter<W>>,
    write_waiters: VecDeque<WriteWaiter<W>>,
}

impl<W> Pipe<W> {
    /// A pipe with one reader and one writer reference.
    pub fn new(cap: usize) -> Self {
        assert!(cap > 0);
        Pipe {
            buf: VecDeque::with_capacity(cap.min(DEFAULT_PIPE_CAPACITY)),
            cap,
            readers: 1,
            writers: 1,
            read_waiters: VecDeque::new(),
            write_waiters: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.cap
    }

    pub fn used(&self) -> usize {
        self.buf.len()
    }

    pub fn readers(&self) -> u32 {
        self.readers
    }

    pub fn writers(&self) -> u32 {
        self.writers
    }

    pub fn parked_readers(&self) -> usize {
        self.read_waiters.len()
    }

    pub fn parked_writers(&self) -> usize {
        self.write_waiters.len()
    }

    /// Both ends are closed; the pipe can be dropped.
    pub fn is_dead(&self) -> bool {
        self.readers == 0 && self.writers == 0
    }

    pub fn add_reader(&mut self) {
        self.readers += 1;
    }

    pub fn add_writer(&mut self) {
        self.writers += 1;
    }

    pub fn read(&mut self, who: W, len: usize) -> Vec<Completion<W>> {
        if len == 0 {
            return vec![Completion { who, outcome: Outcome::Read(Vec::new()) }];
        }
        self.read_waiters.push_back(ReadWaiter { who, len });
        self.settle()
    }

    pub fn write(&mut self, who: W, data: Vec<u8>) -> Vec<Completion<W>> {
        if self.readers == 0 {
            return vec![Completion { who, outcome: Outcome::Failed(Errno::EPIPE) }];
        }
        if data.is_empty() {
            return vec![Completion { who, outcome: Outcome::Wrote(0) }];
        }
        self.write_waiters.push_back(WriteWaiter { who, data, done: 0 });
        self.settle()
    }

    /// Takes everything currently buffered without parking (used by host sinks).
    /// Returns the bytes and any writers that finished as a result.
    pub fn drain(&mut self) -> (Vec<u8>, Vec<Completion<W>>) {
        let mut out = Vec::new();
        let mut done = Vec::new();
        loop {
            out.extend(self.buf.drain(..));
            let before = done.len();
            done.extend(self.settle());
            if self.buf.is_empty() && done.len() == before {
                break;
            }
        }
        (out, done)
    }

    /// True when nothing is buffered and no writer remains.
    pub fn at_eof(&self) -> bool {
        self.buf.is_empty() && self.writers == 0 && self.write_waiters.is_empty()
    }

    pub fn close_reader(&mut self) -> Vec<Completion<W>> {
        assert!(self.readers > 0, "reader refcount underflow");
        self.readers -= 1;
        if self.readers > 0 {
            return Vec::new();
        }
        self.buf.clear();
        self.write_waiters
            .drain(..)
            .map(|w| Completion { who: w.who, outcome: Outcome::Failed(Errno::EPIPE) })
            .collect()
    }

    pub fn close_writer(&mut self) -> Vec<Completion<W>> {
        assert!(self.writers > 0, "writer refcount underflow");
        self.writers -= 1;
        self.settle()
    }

    /// Removes parked calls whose token matches. Writers report how many bytes
    /// of their payload had already entered the buffer.
    pub fn cancel(&mut self, mut pred: impl FnMut(&W) -> bool) -> Vec<(W, usize)> {
        let mut out = Vec::new();
        let mut keep = VecDeque::new();
        for w in self.read_waiters.drain(..) {
            if pred(&w.who) {
                out.push((w.who, 0));
            } else {
                keep.push_back(w);
            }
        }
        self.read_waiters = keep;
        let mut keep = VecDeque::new();
        for w in self.write_waiters.drain(..) {
            if pred(&w.who) {
                out.push((w.who, w.done));
            } else {
                keep.push_back(w);
            }
        }
        self.write_waiters = keep;
        out
    }

    /// Parked readers with the length they asked for, and parked writers with
    /// the bytes not yet buffered, in queue order.
    pub fn parked(&self) -> (Vec<(&W, usize)>, Vec<(&W, usize)>) {
        let readers = self.read_waiters.iter().map(|w| (&w.who, w.len)).collect();
        let writers = self.write_waiters.iter().map(|w| (&w.who, w.data.len() - w.done)).collect();
        (readers, writers)
    }

    pub fn has_parked(&self, mut pred: impl FnMut(&W) -> bool) -> bool {
        self.read_waiters.iter().any(|w| pred(&w.who)) || self.write_waiters.iter().any(|w| pred(&w.who))
    }

    /// Moves bytes from parked writers into the buffer and from the buffer to
    /// parked readers until neither side can make progress.
    fn settle(&mut self) -> Vec<Completion<W>> {
        let mut done = Vec::new();
        loop {
            let mut progress = false;

            while let Some(w) = self.write_waiters.front_mut() {
                let space = self.cap - self.buf.len();
                if space == 0 {
                    break;
                }
                let n = space.min(w.data.len() - w.done);
                self.buf.extend(&w.data[w.done..w.done + n]);
                w.done += n;
                progress |= n > 0;
                if w.done == w.data.len() {
                    let w = self.write_waiters.pop_front().unwrap();
                    done.push(Completion { who: w.who, outcome: Outcome::Wrote(w.data.len()) });
                } else {
                    break;
                }
            }

            while !self.buf.is_empty() {
                let Some(r) = self.read_waiters.pop_front() else { break };
                let n = r.len.min(self.buf.len());
                let data: Vec<u8> = self.buf.drain(..n).collect();
                done.push(Completion { who: r.who, outcome: Outcome::Read(data) });
                progress = true;
            }

            if !progress {
                break;
            }
        }
        if self.at_eof() {
            done.extend(
                self.read_waiters.drain(..).map(|r| Completion { who: r.who, outcome: Outcome::Read(Vec::new()) }),
            );
        }
        debug_assert!(self.buf.len() <= self.cap);
        debug_assert!(self.read_waiters.is_empty() || self.buf.is_empty());
        debug_assert!(self.write_waiters.is_empty() || self.buf.len() == self.cap);
        done
    }
}
