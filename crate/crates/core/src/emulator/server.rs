//! Live hosting of a virtual brick: a real-time stepping thread and a TCP
//! listener speaking the framed link protocol.

use std::io;
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use crate::transport::{Link, StreamLink, TransportError};

use super::{BrickEvent, SharedBrick};

/// Receives every brick event as it is drained from the journal.
pub type EventSink = Arc<dyn Fn(&BrickEvent) + Send + Sync>;

const STEP_CADENCE: Duration = Duration::from_millis(10);

/// Steps a brick against the wall clock until dropped.
pub struct Stepper {
    stop: Arc<AtomicBool>,
    handle: Option<JoinHandle<()>>,
}

impl Drop for Stepper {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

/// Advance `brick` by elapsed wall time every 10 ms. When `sink` is given,
/// the journal is drained into it after each step.
pub fn spawn_stepper(brick: SharedBrick, sink: Option<EventSink>) -> Stepper {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let handle = thread::Builder::new()
        .name("brick-stepper".into())
        .spawn(move || {
            let mut last = Instant::now();
            while !flag.load(Ordering::SeqCst) {
                thread::sleep(STEP_CADENCE);
                let elapsed = last.elapsed().as_millis() as u64;
                last += Duration::from_millis(elapsed);
                let events = {
                    let mut brick = brick.lock().unwrap();
                    brick.step(elapsed);
                    if sink.is_some() {
                        brick.take_events()
                    } else {
                        Vec::new()
                    }
                };
                if let Some(sink) = &sink {
                    for event in &events {
                        sink(event);
                    }
                }
            }
        })
        .expect("spawn stepper thread");
    Stepper {
        stop,
        handle: Some(handle),
    }
}

/// A virtual brick served over TCP.
pub struct EmuServer {
    addr: SocketAddr,
    brick: SharedBrick,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
    _stepper: Stepper,
}

impl EmuServer {
    pub fn bind(addr: impl ToSocketAddrs, brick: SharedBrick, sink: Option<EventSink>) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let stepper = spawn_stepper(brick.clone(), sink);
        let accept = {
            let brick = brick.clone();
            let stop = stop.clone();
            thread::Builder::new()
                .name("emu-accept".into())
                .spawn(move || accept_loop(listener, brick, stop))?
        };
        Ok(Self {
            addr,
            brick,
            stop,
            accept: Some(accept),
            _stepper: stepper,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn brick(&self) -> &SharedBrick {
        &self.brick
    }

    /// Block until the server stops (it only stops when dropped elsewhere).
    pub fn wait(mut self) {
        if let Some(handle) = self.accept.take() {
            let _ = handle.join();
        }
    }
}

impl Drop for EmuServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(handle) = self.accept.take() {
            let _ = handle.join();
        }
    }
}

fn accept_loop(listener: TcpListener, brick: SharedBrick, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                debug!("emulator: connection from {peer}");
                let _ = stream.set_nonblocking(false);
                let brick = brick.clone();
                let stop = stop.clone();
                let spawned = thread::Builder::new()
                    .name(format!("emu-conn-{peer}"))
                    .spawn(move || match StreamLink::from_tcp(stream) {
                        Ok(link) => serve_connection(&link, &brick, &stop),
                        Err(e) => warn!("emulator: {e}"),
                    });
                if let Err(e) = spawned {
                    warn!("emulator: cannot spawn connection thread: {e}");
                }
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
            Err(e) => {
                warn!("emulator: accept failed: {e}");
                thread::sleep(Duration::from_millis(20));
            }
        }
    }
}

fn serve_connection(link: &StreamLink, brick: &SharedBrick, stop: &AtomicBool) {
    brick.lock().unwrap().wake();
    while !stop.load(Ordering::SeqCst) {
        match link.recv_frame(Duration::from_millis(50)) {
            Ok(telegram) => {
                let (reply, asleep) = {
                    let mut brick = brick.lock().unwrap();
                    (brick.handle_telegram(&telegram), brick.is_asleep())
                };
                if asleep {
                    break;
                }
                if let Some(reply) = reply {
                    if link.send_frame(&reply).is_err() {
                        break;
                    }
                }
            }
            Err(TransportError::RecvTimeout) => {
                if brick.lock().unwrap().is_asleep() {
                    debug!("emulator: brick slept, closing link");
                    break;
                }
            }
            Err(e) => {
                debug!("emulator: connection ended: {e}");
                break;
            }
        }
    }
    link.close();
}
