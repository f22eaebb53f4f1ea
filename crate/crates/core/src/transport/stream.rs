use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use super::{encode_frame, FrameDecoder, Link, Result, TransportError};

/// Read half of a byte stream.
pub trait ByteReader: Send {
    /// Read some bytes, waiting at most `timeout`. `Ok(0)` means end of
    /// stream; a timeout is reported as `TimedOut` or `WouldBlock`.
    fn read_timeout(&mut self, buf: &mut [u8], timeout: Duration) -> io::Result<usize>;
}

/// Write half of a byte stream.
pub trait ByteWriter: Send {
    fn write_all_bytes(&mut self, bytes: &[u8]) -> io::Result<()>;

    /// Unblock the peer and any pending reader.
    fn shutdown(&mut self) {}
}

impl ByteReader for TcpStream {
    fn read_timeout(&mut self, buf: &mut [u8], timeout: Duration) -> io::Result<usize> {
        self.set_read_timeout(Some(timeout.max(Duration::from_millis(1))))?;
        self.read(buf)
    }
}

impl ByteWriter for TcpStream {
    fn write_all_bytes(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.write_all(bytes)?;
        self.flush()
    }

    fn shutdown(&mut self) {
        let _ = TcpStream::shutdown(self, Shutdown::Both);
    }
}

struct ReadSide {
    reader: Box<dyn ByteReader>,
    decoder: FrameDecoder,
}

/// Length-prefixed framing over any byte stream.
///
/// A framing error closes the link for good; every later call reports
/// [`TransportError::LinkClosed`].
pub struct StreamLink {
    read: Mutex<ReadSide>,
    write: Mutex<Box<dyn ByteWriter>>,
    closed: AtomicBool,
    on_close: Option<Box<dyn Fn() + Send + Sync>>,
}

impl StreamLink {
    pub fn new(reader: Box<dyn ByteReader>, writer: Box<dyn ByteWriter>) -> Self {
        Self {
            read: Mutex::new(ReadSide {
                reader,
                decoder: FrameDecoder::new(),
            }),
            write: Mutex::new(writer),
            closed: AtomicBool::new(false),
            on_close: None,
        }
    }

    /// Run `hook` once when the link closes, from whichever thread closes it.
    pub fn with_close_hook(mut self, hook: impl Fn() + Send + Sync + 'static) -> Self {
        self.on_close = Some(Box::new(hook));
        self
    }

    pub fn from_tcp(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let control = stream.try_clone()?;
        Ok(Self::new(Box::new(reader), Box::new(stream)).with_close_hook(move || {
            let _ = control.shutdown(Shutdown::Both);
        }))
    }

    fn fail(&self, err: TransportError) -> TransportError {
        self.close();
        err
    }
}

impl Link for StreamLink {
    fn send_frame(&self, telegram: &[u8]) -> Result<()> {
        let frame = encode_frame(telegram)?;
        if self.is_closed() {
            return Err(TransportError::LinkClosed);
        }
        let mut writer = self.write.lock().unwrap();
        writer
            .write_all_bytes(&frame)
            .map_err(|_| self.fail(TransportError::LinkClosed))
    }

    fn recv_frame(&self, timeout: Duration) -> Result<Vec<u8>> {
        let deadline = Instant::now() + timeout;
        let mut side = self.read.lock().unwrap();
        let mut buf = [0u8; 256];
        loop {
            if self.is_closed() {
                return Err(TransportError::LinkClosed);
            }
            match side.decoder.next_frame() {
                Ok(Some(frame)) => return Ok(frame),
                Ok(None) => {}
                Err(e) => return Err(self.fail(e)),
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::RecvTimeout);
            }
            match side.reader.read_timeout(&mut buf, deadline - now) {
                Ok(0) => {
                    let err = if side.decoder.pending() > 0 {
                        TransportError::FramingError("stream ended mid-frame".into())
                    } else {
                        TransportError::LinkClosed
                    };
                    return Err(self.fail(err));
                }
                Ok(n) => side.decoder.push(&buf[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock) => {}
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(_) => return Err(self.fail(TransportError::LinkClosed)),
            }
        }
    }

    fn close(&self) {
        if !self.closed.swap(true, Ordering::SeqCst) {
            if let Some(hook) = &self.on_close {
                hook();
            } else if let Ok(mut writer) = self.write.try_lock() {
                // a writer blocked on a dead peer must not wedge close()
                writer.shutdown();
            }
        }
    }

    fn is_closed(&self) -> bool {
        self.closed.load(Ordering::SeqCst)
    }
}

impl Drop for StreamLink {
    fn drop(&mut self) {
        self.close();
    }
}
