use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::wire::{encode, read_frame, MessageType, ReadError, WireMessage};
use super::RuntimeError;

/// Default per-frame receive timeout.
pub const FRAME_TIMEOUT: Duration = Duration::from_secs(10);

/// Frame and byte counts seen by one endpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameStats {
    pub sent: [u64; 8],
    pub received: [u64; 8],
    pub bytes_sent: u64,
    pub bytes_received: u64,
}

impl FrameStats {
    pub fn sent_of(&self, t: MessageType) -> u64 {
        self.sent[t.index()]
    }

    pub fn received_of(&self, t: MessageType) -> u64 {
        self.received[t.index()]
    }
}

pub trait Transport {
    fn send(&mut self, msg: &WireMessage) -> Result<(), RuntimeError>;
    fn recv(&mut self) -> Result<WireMessage, RuntimeError>;
    fn stats(&self) -> &FrameStats;
}

/// Frames over any byte stream.
#[derive(Debug)]
pub struct StreamTransport<S> {
    stream: S,
    stats: FrameStats,
}

impl<S: Read + Write> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        Self {
            stream,
            stats: FrameStats::default(),
        }
    }

    pub fn into_inner(self) -> S {
        self.stream
    }

    /// Writes bytes that need not form a valid frame.
    pub fn send_raw(&mut self, bytes: &[u8]) -> Result<(), RuntimeError> {
        self.stream.write_all(bytes).map_err(io_err)?;
        self.stream.flush().map_err(io_err)
    }
}

fn io_err(e: io::Error) -> RuntimeError {
    if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) {
        RuntimeError::Timeout { partial: Vec::new() }
    } else {
        RuntimeError::Io(e.to_string())
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn send(&mut self, msg: &WireMessage) -> Result<(), RuntimeError> {
        let bytes = encode(msg)?;
        self.send_raw(&bytes)?;
        self.stats.sent[msg.kind().index()] += 1;
        self.stats.bytes_sent += bytes.len() as u64;
        Ok(())
    }

    fn recv(&mut self) -> Result<WireMessage, RuntimeError> {
        match read_frame(&mut self.stream) {
            Ok((msg, n)) => {
                self.stats.received[msg.kind().index()] += 1;
                self.stats.bytes_received += n as u64;
                Ok(msg)
            }
            Err(ReadError::Closed) => Err(RuntimeError::Closed),
            Err(ReadError::TimedOut) => Err(RuntimeError::Timeout { partial: Vec::new() }),
            Err(ReadError::Frame(e)) => Err(RuntimeError::Frame(e)),
            Err(ReadError::Io(e)) => Err(io_err(e)),
        }
    }

    fn stats(&self) -> &FrameStats {
        &self.stats
    }
}

pub type TcpTransport = StreamTransport<TcpStream>;

impl StreamTransport<TcpStream> {
    pub fn tcp(stream: TcpStream, timeout: Duration) -> Result<Self, RuntimeError> {
        stream.set_read_timeout(Some(timeout)).map_err(io_err)?;
        stream.set_nodelay(true).map_err(io_err)?;
        Ok(Self::new(stream))
    }
}

/// One end of an in-process byte pipe.
#[derive(Debug)]
pub struct PipeEnd {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    pending: Vec<u8>,
    offset: usize,
    timeout: Duration,
}

impl Read for PipeEnd {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.offset == self.pending.len() {
            match self.rx.recv_timeout(self.timeout) {
                Ok(chunk) => {
                    self.pending = chunk;
                    self.offset = 0;
                }
                Err(RecvTimeoutError::Timeout) => return Err(io::ErrorKind::TimedOut.into()),
                Err(RecvTimeoutError::Disconnected) => return Ok(0),
            }
        }
        let n = buf.len().min(self.pending.len() - self.offset);
        buf[..n].copy_from_slice(&self.pending[self.offset..self.offset + n]);
        self.offset += n;
        Ok(n)
    }
}

impl Write for PipeEnd {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::from(io::ErrorKind::BrokenPipe))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

pub type LoopbackTransport = StreamTransport<PipeEnd>;

/// Two connected in-process transports.
pub fn loopback_pair(timeout: Duration) -> (LoopbackTransport, LoopbackTransport) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    let end = |tx, rx| PipeEnd {
        tx,
        rx,
        pending: Vec::new(),
        offset: 0,
        timeout,
    };
    (
        StreamTransport::new(end(a_tx, a_rx)),
        StreamTransport::new(end(b_tx, b_rx)),
    )
}
