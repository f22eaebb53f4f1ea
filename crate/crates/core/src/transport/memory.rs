use std::io;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::stream::{ByteReader, ByteWriter, StreamLink};

struct PipeReader {
    rx: Receiver<Vec<u8>>,
    leftover: Vec<u8>,
    max_chunk: usize,
}

impl ByteReader for PipeReader {
    fn read_timeout(&mut self, buf: &mut [u8], timeout: Duration) -> io::Result<usize> {
        if self.leftover.is_empty() {
            match self.rx.recv_timeout(timeout) {
                Ok(bytes) => self.leftover = bytes,
                Err(RecvTimeoutError::Timeout) => return Err(io::ErrorKind::TimedOut.into()),
                Err(RecvTimeoutError::Disconnected) => return Ok(0),
            }
        }
        let n = self.leftover.len().min(buf.len()).min(self.max_chunk);
        buf[..n].copy_from_slice(&self.leftover[..n]);
        self.leftover.drain(..n);
        Ok(n)
    }
}

struct PipeWriter {
    tx: Option<Sender<Vec<u8>>>,
}

impl ByteWriter for PipeWriter {
    fn write_all_bytes(&mut self, bytes: &[u8]) -> io::Result<()> {
        let tx = self.tx.as_ref().ok_or(io::ErrorKind::BrokenPipe)?;
        tx.send(bytes.to_vec()).map_err(|_| io::ErrorKind::BrokenPipe.into())
    }

    fn shutdown(&mut self) {
        self.tx = None;
    }
}

/// Two links joined back to back in memory. Readers see at most
/// `max_chunk` bytes per read, which exercises reassembly of split frames.
pub fn memory_pair(max_chunk: usize) -> (StreamLink, StreamLink) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    let max_chunk = max_chunk.max(1);
    let end = |rx, tx| {
        StreamLink::new(
            Box::new(PipeReader {
                rx,
                leftover: Vec::new(),
                max_chunk,
            }),
            Box::new(PipeWriter { tx: Some(tx) }),
        )
    };
    (end(a_rx, a_tx), end(b_rx, b_tx))
}
