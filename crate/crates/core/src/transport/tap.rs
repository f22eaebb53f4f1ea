use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{Link, Result, SharedLink};

/// One observation on a tapped link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TapRecord {
    Sent(Vec<u8>),
    Received(Vec<u8>),
    Closed,
}

/// Records every telegram crossing a link, in order.
#[derive(Clone)]
pub struct TapLink {
    inner: SharedLink,
    log: Arc<Mutex<Vec<TapRecord>>>,
}

impl TapLink {
    pub fn new(inner: SharedLink) -> Self {
        Self {
            inner,
            log: Arc::default(),
        }
    }

    /// Append to an existing log, e.g. to follow a session across reconnects.
    pub fn with_log(inner: SharedLink, log: Arc<Mutex<Vec<TapRecord>>>) -> Self {
        Self { inner, log }
    }

    /// Shared handle to the log; stays valid after the link is dropped.
    pub fn log_handle(&self) -> Arc<Mutex<Vec<TapRecord>>> {
        self.log.clone()
    }

    pub fn records(&self) -> Vec<TapRecord> {
        self.log.lock().unwrap().clone()
    }

    /// Telegrams sent so far.
    pub fn sent(&self) -> Vec<Vec<u8>> {
        self.records()
            .into_iter()
            .filter_map(|r| match r {
                TapRecord::Sent(bytes) => Some(bytes),
                _ => None,
            })
            .collect()
    }

    pub fn clear(&self) {
        self.log.lock().unwrap().clear();
    }
}

impl Link for TapLink {
    fn send_frame(&self, telegram: &[u8]) -> Result<()> {
        // record under the lock so the log order matches the wire order
        let mut log = self.log.lock().unwrap();
        self.inner.send_frame(telegram)?;
        log.push(TapRecord::Sent(telegram.to_vec()));
        Ok(())
    }

    fn recv_frame(&self, timeout: Duration) -> Result<Vec<u8>> {
        let frame = self.inner.recv_frame(timeout)?;
        self.log.lock().unwrap().push(TapRecord::Received(frame.clone()));
        Ok(frame)
    }

    fn close(&self) {
        if !self.inner.is_closed() {
            self.log.lock().unwrap().push(TapRecord::Closed);
        }
        self.inner.close();
    }

    fn is_closed(&self) -> bool {
        self.inner.is_closed()
    }
}
