//! Framed duplex links carrying telegrams.
//!
//! Every telegram travels as `[len u16 LE][telegram bytes]` with
//! `1 <= len <= 64`. A link may be a serial device (for example a paired
//! Bluetooth RFCOMM port), a TCP socket to a standalone emulator, or an
//! in-process emulator.

mod emu;
mod memory;
mod serial;
mod stream;
mod tap;

pub use emu::EmuLink;
pub use memory::memory_pair;
pub use serial::SerialSettings;
pub use stream::{ByteReader, ByteWriter, StreamLink};
pub use tap::{TapLink, TapRecord};

use std::fmt;
use std::io;
use std::net::{TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::protocol::MAX_TELEGRAM_LEN;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connect timed out")]
    ConnectTimeout,
    #[error("no such device: {0}")]
    NoSuchDevice(String),
    #[error("connection refused: {0}")]
    Refused(String),
    #[error("link closed")]
    LinkClosed,
    #[error("telegram of {0} bytes does not fit in a frame")]
    OversizeTelegram(usize),
    #[error("receive timed out")]
    RecvTimeout,
    #[error("framing error: {0}")]
    FramingError(String),
    #[error("bad endpoint `{0}`")]
    BadEndpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = TransportError> = std::result::Result<T, E>;

/// Where a link goes: `serial:<device-path>`, `tcp:<host>:<port>` or `emu:`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LinkEndpoint {
    Serial(String),
    Tcp { host: String, port: u16 },
    Emu,
}

impl FromStr for LinkEndpoint {
    type Err = TransportError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || TransportError::BadEndpoint(s.to_string());
        let (scheme, rest) = s.split_once(':').ok_or_else(bad)?;
        match scheme {
            "emu" if rest.is_empty() => Ok(LinkEndpoint::Emu),
            "serial" if !rest.is_empty() => Ok(LinkEndpoint::Serial(rest.to_string())),
            "tcp" => {
                let (host, port) = rest.rsplit_once(':').ok_or_else(bad)?;
                let host = host.trim_start_matches('[').trim_end_matches(']');
                if host.is_empty() {
                    return Err(bad());
                }
                let port = port.parse().map_err(|_| bad())?;
                Ok(LinkEndpoint::Tcp {
                    host: host.to_string(),
                    port,
                })
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for LinkEndpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LinkEndpoint::Serial(path) => write!(f, "serial:{path}"),
            LinkEndpoint::Tcp { host, port } if host.contains(':') => write!(f, "tcp:[{host}]:{port}"),
            LinkEndpoint::Tcp { host, port } => write!(f, "tcp:{host}:{port}"),
            LinkEndpoint::Emu => f.write_str("emu:"),
        }
    }
}

/// A duplex telegram link.
///
/// One sender and one receiver may use a link concurrently. Concurrent
/// senders must be serialized by the caller.
pub trait Link: Send + Sync {
    fn send_frame(&self, telegram: &[u8]) -> Result<()>;

    /// Wait up to `timeout` for the next telegram.
    fn recv_frame(&self, timeout: Duration) -> Result<Vec<u8>>;

    fn close(&self);

    fn is_closed(&self) -> bool;
}

pub type SharedLink = Arc<dyn Link>;

/// Prefix `telegram` with its length.
pub fn encode_frame(telegram: &[u8]) -> Result<Vec<u8>> {
    if telegram.is_empty() || telegram.len() > MAX_TELEGRAM_LEN {
        return Err(TransportError::OversizeTelegram(telegram.len()));
    }
    let mut out = Vec::with_capacity(telegram.len() + 2);
    out.extend_from_slice(&(telegram.len() as u16).to_le_bytes());
    out.extend_from_slice(telegram);
    Ok(out)
}

/// Incremental frame splitter over a byte stream.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Bytes buffered towards an incomplete frame.
    pub fn pending(&self) -> usize {
        self.buf.len()
    }

    /// Pop the next complete frame, if one is buffered.
    pub fn next_frame(&mut self) -> Result<Option<Vec<u8>>> {
        if self.buf.len() < 2 {
            return Ok(None);
        }
        let len = u16::from_le_bytes([self.buf[0], self.buf[1]]) as usize;
        if len == 0 || len > MAX_TELEGRAM_LEN {
            return Err(TransportError::FramingError(format!("illegal frame length {len}")));
        }
        if self.buf.len() < len + 2 {
            return Ok(None);
        }
        let frame = self.buf[2..len + 2].to_vec();
        self.buf.drain(..len + 2);
        Ok(Some(frame))
    }
}

/// Connection options beyond the endpoint itself.
#[derive(Debug, Clone, Default)]
pub struct LinkOptions {
    pub serial: SerialSettings,
}

/// Open a link with default options.
pub fn open(endpoint: &LinkEndpoint, timeout: Duration) -> Result<SharedLink> {
    open_with(endpoint, timeout, &LinkOptions::default())
}

pub fn open_with(endpoint: &LinkEndpoint, timeout: Duration, options: &LinkOptions) -> Result<SharedLink> {
    match endpoint {
        LinkEndpoint::Emu => Ok(Arc::new(EmuLink::spawn_default())),
        LinkEndpoint::Tcp { host, port } => Ok(Arc::new(open_tcp(host, *port, timeout)?)),
        LinkEndpoint::Serial(path) => Ok(Arc::new(serial::open(path, &options.serial)?)),
    }
}

fn open_tcp(host: &str, port: u16, timeout: Duration) -> Result<StreamLink> {
    let addrs: Vec<_> = (host, port)
        .to_socket_addrs()
        .map_err(|e| TransportError::NoSuchDevice(format!("{host}:{port}: {e}")))?
        .collect();
    let mut last = TransportError::NoSuchDevice(format!("{host}:{port}"));
    for addr in addrs {
        match TcpStream::connect_timeout(&addr, timeout) {
            Ok(stream) => return Ok(StreamLink::from_tcp(stream)?),
            Err(e) => {
                last = match e.kind() {
                    io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock => TransportError::ConnectTimeout,
                    io::ErrorKind::ConnectionRefused => TransportError::Refused(addr.to_string()),
                    _ => TransportError::Io(e),
                }
            }
        }
    }
    Err(last)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        assert_eq!("emu:".parse::<LinkEndpoint>().unwrap(), LinkEndpoint::Emu);
        assert_eq!(
            "tcp:127.0.0.1:5555".parse::<LinkEndpoint>().unwrap(),
            LinkEndpoint::Tcp {
                host: "127.0.0.1".into(),
                port: 5555
            }
        );
        assert_eq!(
            "serial:/dev/rfcomm0".parse::<LinkEndpoint>().unwrap(),
            LinkEndpoint::Serial("/dev/rfcomm0".into())
        );
        assert_eq!(
            "tcp:[::1]:80".parse::<LinkEndpoint>().unwrap().to_string(),
            "tcp:[::1]:80"
        );
        for bad in ["emu:x", "serial:", "tcp:host", "tcp::5", "tcp:h:99999", "usb:1", "emu"] {
            assert!(bad.parse::<LinkEndpoint>().is_err(), "{bad}");
        }
        for good in ["emu:", "tcp:localhost:1", "serial:/dev/ttyS0"] {
            assert_eq!(good.parse::<LinkEndpoint>().unwrap().to_string(), good);
        }
    }

    #[test]
    fn frame_encoding() {
        assert_eq!(encode_frame(&[0x80, 0x0D]).unwrap(), [0x02, 0x00, 0x80, 0x0D]);
        assert_eq!(&encode_frame(&[0u8; 64]).unwrap()[..2], &[0x40, 0x00]);
        assert!(matches!(encode_frame(&[0u8; 65]), Err(TransportError::OversizeTelegram(65))));
        assert!(matches!(encode_frame(&[]), Err(TransportError::OversizeTelegram(0))));
    }

    #[test]
    fn decoder_accumulates_partial_frames() {
        let mut d = FrameDecoder::new();
        for b in [0x03, 0x00, 0x02, 0x0B] {
            d.push(&[b]);
            assert_eq!(d.next_frame().unwrap(), None);
        }
        d.push(&[0x00, 0x01, 0x00]);
        assert_eq!(d.next_frame().unwrap(), Some(vec![0x02, 0x0B, 0x00]));
        assert_eq!(d.next_frame().unwrap(), None);
        assert_eq!(d.pending(), 2);

        let mut d = FrameDecoder::new();
        d.push(&[0x00, 0x00]);
        assert!(matches!(d.next_frame(), Err(TransportError::FramingError(_))));
        let mut d = FrameDecoder::new();
        d.push(&[0x41, 0x00]);
        assert!(matches!(d.next_frame(), Err(TransportError::FramingError(_))));
    }
}
