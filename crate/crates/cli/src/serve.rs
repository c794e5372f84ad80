//! Terminal service: WebSocket connections carrying terminal frames.
//!
//! A client sends a [`Handshake`] as a text message and gets an [`Accept`]
//! back; after that every binary message holds whole frames. Closing the
//! connection kills the session's shell and its descendants.

use std::collections::BTreeMap;
use std::io::{self, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::thread;
use std::time::Duration;

use crossbeam_channel::TryRecvError;
use sandboxd_core::kernel::KernelHandle;
use thiserror::Error;
use tungstenite::{Message, WebSocket};

use crate::frame::{decode_all, Accept, Frame, FrameError, Handshake, PROTOCOL_VERSION};
use crate::session::{Session, SessionError, StartError};

pub const DEFAULT_LISTEN: &str = "127.0.0.1:7681";
/// How long a relay waits for client input before checking for output.
const POLL: Duration = Duration::from_millis(5);

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("websocket: {0}")]
    Ws(#[from] tungstenite::Error),
    #[error("handshake: {0}")]
    Handshake(String),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Start(#[from] StartError),
}

pub struct TermServer {
    listener: TcpListener,
    kernel: KernelHandle,
    shell: String,
    env: BTreeMap<String, String>,
}

impl TermServer {
    pub fn bind(addr: &str, kernel: KernelHandle, shell: &str, env: BTreeMap<String, String>) -> io::Result<TermServer> {
        Ok(TermServer { listener: TcpListener::bind(addr)?, kernel, shell: shell.to_owned(), env })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections forever, one relay thread each.
    pub fn run(self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e),
            };
            let (kernel, shell, env) = (self.kernel.clone(), self.shell.clone(), self.env.clone());
            thread::spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = relay(stream, &kernel, &shell, env) {
                    eprintln!("sandboxd: session {peer:?}: {e}");
                }
            });
        }
        Ok(())
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn read_handshake(ws: &mut WebSocket<TcpStream>) -> Result<Handshake, ServeError> {
    loop {
        match ws.read()? {
            Message::Text(text) => return serde_json::from_str(&text).map_err(|e| ServeError::Handshake(e.to_string())),
            Message::Ping(_) | Message::Pong(_) => {}
            other => return Err(ServeError::Handshake(format!("expected a JSON text message, got {other:?}"))),
        }
    }
}

/// Runs one session to completion over `stream`.
pub fn relay(stream: TcpStream, kernel: &KernelHandle, shell: &str, env: BTreeMap<String, String>) -> Result<(), ServeError> {
    stream.set_nodelay(true).ok();
    let mut ws = tungstenite::accept(stream).map_err(|e| ServeError::Handshake(e.to_string()))?;
    let hs = read_handshake(&mut ws)?;
    if hs.version != PROTOCOL_VERSION {
        let _ = ws.close(None);
        return Err(SessionError::Version(hs.version).into());
    }
    let mut session = Session::start(kernel, &hs, shell, env)?;
    let accept = serde_json::to_string(&Accept { version: PROTOCOL_VERSION, pid: session.pid() }).expect("plain struct");
    ws.send(Message::Text(accept))?;
    ws.get_ref().set_read_timeout(Some(POLL)).map_err(tungstenite::Error::Io)?;
    loop {
        loop {
            match session.frames().try_recv() {
                Ok(frame) => {
                    let last = matches!(frame, Frame::Exit(_));
                    ws.send(Message::Binary(frame.encode()))?;
                    if last {
                        let _ = ws.close(None);
                        // Let the close handshake finish; errors here are moot.
                        while ws.read().is_ok() {}
                        return Ok(());
                    }
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => return Ok(()),
            }
        }
        match ws.read() {
            Ok(Message::Binary(bytes)) => {
                for frame in decode_all(&bytes)? {
                    session.handle(frame)?;
                }
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(e) if is_timeout(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e.into()),
        }
    }
}
