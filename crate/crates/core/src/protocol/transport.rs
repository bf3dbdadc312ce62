//! Ordered, reliable frame delivery: paired in-process queues or TCP.

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use thiserror::Error;

use super::{DecodeError, Frame, HEADER_LEN};

#[derive(Debug, Error)]
pub enum LinkError {
    #[error("timed out")]
    Timeout,
    #[error("peer closed the connection")]
    Closed,
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for LinkError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => LinkError::Timeout,
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe => LinkError::Closed,
            _ => LinkError::Io(e),
        }
    }
}

/// One bidirectional frame channel. `recv` returns a complete encoded frame.
pub trait Link: Send {
    fn send(&mut self, frame: &[u8]) -> Result<(), LinkError>;
    /// Blocks for at most `timeout`, or indefinitely when `None`.
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>, LinkError>;
}

/// Source of incoming node connections for the generator.
pub trait Acceptor {
    fn accept(&mut self) -> Result<Box<dyn Link>, LinkError>;
}

#[derive(Debug)]
pub struct InProcLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected in-process endpoints.
pub fn inproc_pair() -> (InProcLink, InProcLink) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (InProcLink { tx: a_tx, rx: a_rx }, InProcLink { tx: b_tx, rx: b_rx })
}

impl Link for InProcLink {
    fn send(&mut self, frame: &[u8]) -> Result<(), LinkError> {
        self.tx.send(frame.to_vec()).map_err(|_| LinkError::Closed)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>, LinkError> {
        match timeout {
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => LinkError::Timeout,
                RecvTimeoutError::Disconnected => LinkError::Closed,
            }),
            None => self.rx.recv().map_err(|_| LinkError::Closed),
        }
    }
}

/// Generator side of the in-process transport.
#[derive(Debug)]
pub struct InProcAcceptor {
    incoming: Receiver<InProcLink>,
}

/// Node side of the in-process transport; cloneable.
#[derive(Clone, Debug)]
pub struct InProcConnector {
    outgoing: Sender<InProcLink>,
}

impl InProcAcceptor {
    pub fn new() -> (InProcAcceptor, InProcConnector) {
        let (tx, rx) = mpsc::channel();
        (InProcAcceptor { incoming: rx }, InProcConnector { outgoing: tx })
    }
}

impl InProcConnector {
    pub fn connect(&self) -> Result<InProcLink, LinkError> {
        let (ours, theirs) = inproc_pair();
        self.outgoing.send(theirs).map_err(|_| LinkError::Closed)?;
        Ok(ours)
    }
}

impl Acceptor for InProcAcceptor {
    fn accept(&mut self) -> Result<Box<dyn Link>, LinkError> {
        let link = self.incoming.recv().map_err(|_| LinkError::Closed)?;
        Ok(Box::new(link))
    }
}

#[derive(Debug)]
pub struct TcpLink {
    stream: TcpStream,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        // Frames are small and strictly request/response.
        stream.set_nodelay(true)?;
        Ok(Self { stream })
    }

    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }
}

impl Link for TcpLink {
    fn send(&mut self, frame: &[u8]) -> Result<(), LinkError> {
        self.stream.write_all(frame)?;
        Ok(())
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Vec<u8>, LinkError> {
        self.stream.set_read_timeout(timeout)?;
        let mut frame = vec![0u8; HEADER_LEN];
        self.stream.read_exact(&mut frame)?;
        let (_, _, _, len) = Frame::parse_header(&frame)?;
        frame.resize(HEADER_LEN + len as usize, 0);
        self.stream.read_exact(&mut frame[HEADER_LEN..])?;
        Ok(frame)
    }
}

#[derive(Debug)]
pub struct TcpAcceptor {
    listener: TcpListener,
}

impl TcpAcceptor {
    pub fn bind<A: ToSocketAddrs>(addr: A) -> io::Result<Self> {
        Ok(Self {
            listener: TcpListener::bind(addr)?,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }
}

impl Acceptor for TcpAcceptor {
    fn accept(&mut self) -> Result<Box<dyn Link>, LinkError> {
        let (stream, _) = self.listener.accept()?;
        Ok(Box::new(TcpLink::new(stream)?))
    }
}
