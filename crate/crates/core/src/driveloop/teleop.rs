//! Newline-delimited JSON control/telemetry server for one remote driver.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tubstore::DriveMode;

pub const DEFAULT_TELEOP_PORT: u16 = 8887;
const EVENT_CAPACITY: usize = 256;
const TELEMETRY_CAPACITY: usize = 8;

/// Client → server messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMsg {
    Control {
        steer: f64,
        throttle: f64,
        record: bool,
    },
    Mode {
        mode: DriveMode,
    },
}

impl ClientMsg {
    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let msg: ClientMsg =
            serde_json::from_str(line).map_err(|e| format!("malformed message: {e}"))?;
        if let ClientMsg::Control {
            steer, throttle, ..
        } = msg
        {
            if !(-1.0..=1.0).contains(&steer) {
                return Err(format!("steer {steer} outside [-1, 1]"));
            }
            if !(0.0..=1.0).contains(&throttle) {
                return Err(format!("throttle {throttle} outside [0, 1]"));
            }
        }
        Ok(msg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryMsg {
    pub seq: u64,
    pub t: f64,
    pub frame_png_b64: String,
    pub steer_u: f64,
    pub throttle_pwm: i32,
    pub ultra: [u8; 4],
    pub imu: [f64; 3],
    pub mode: DriveMode,
    pub race_phase: String,
    pub fps: f64,
    pub battery_v: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub saliency_png_b64: Option<String>,
}

/// Server → client messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Telemetry(TelemetryMsg),
    Error { detail: String },
}

impl ServerMsg {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("server messages serialize");
        s.push('\n');
        s
    }
}

/// Bounded FIFO that discards its oldest entry when full.
#[derive(Debug)]
pub struct DropOldest<T> {
    inner: Mutex<(VecDeque<T>, bool)>,
    ready: Condvar,
    capacity: usize,
}

impl<T> DropOldest<T> {
    pub fn new(capacity: usize) -> Self {
        Self {
            inner: Mutex::new((VecDeque::with_capacity(capacity), false)),
            ready: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    /// Returns true when an older entry was dropped.
    pub fn push(&self, item: T) -> bool {
        let mut g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let dropped = g.0.len() >= self.capacity;
        if dropped {
            g.0.pop_front();
        }
        g.0.push_back(item);
        self.ready.notify_one();
        dropped
    }

    pub fn drain(&self) -> Vec<T> {
        self.inner
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .0
            .drain(..)
            .collect()
    }

    /// Next entry, waiting up to `timeout`; `None` on timeout or once closed and empty.
    pub fn pop_timeout(&self, timeout: Duration) -> Option<T> {
        let g = self.inner.lock().unwrap_or_else(|e| e.into_inner());
        let (mut g, _) = self
            .ready
            .wait_timeout_while(g, timeout, |(q, closed)| q.is_empty() && !*closed)
            .unwrap_or_else(|e| e.into_inner());
        g.0.pop_front()
    }

    pub fn close(&self) {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).1 = true;
        self.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.lock().unwrap_or_else(|e| e.into_inner()).1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TeleopEvent {
    Connected,
    Control {
        steer: f64,
        throttle: f64,
        record: bool,
    },
    Mode(DriveMode),
    Disconnected,
}

struct Shared {
    events: DropOldest<TeleopEvent>,
    outbox: Mutex<Option<Arc<DropOldest<String>>>>,
    shutdown: AtomicBool,
}

/// Accepts one driver at a time; further clients get a busy error and are closed.
pub struct TeleopServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept: Option<JoinHandle<()>>,
}

impl TeleopServer {
    /// Bind on localhost; port 0 picks a free port.
    pub fn bind(port: u16) -> Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", port))?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            events: DropOldest::new(EVENT_CAPACITY),
            outbox: Mutex::new(None),
            shutdown: AtomicBool::new(false),
        });
        let s = Arc::clone(&shared);
        let accept = std::thread::Builder::new()
            .name("teleop-accept".into())
            .spawn(move || accept_loop(listener, s))
            .map_err(|e| Error::Internal(format!("cannot start teleop thread: {e}")))?;
        Ok(Self {
            addr,
            shared,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn has_driver(&self) -> bool {
        self.shared
            .outbox
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .is_some()
    }

    /// Everything received since the previous call, in arrival order.
    pub fn drain_events(&self) -> Vec<TeleopEvent> {
        self.shared.events.drain()
    }

    /// Queue a message for the driver; never blocks, drops the oldest on backpressure.
    pub fn send(&self, msg: &ServerMsg) {
        if let Some(out) = self
            .shared
            .outbox
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .as_ref()
        {
            out.push(msg.to_line());
        }
    }
}

impl Drop for TeleopServer {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        if let Some(out) = self
            .shared
            .outbox
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .as_ref()
        {
            out.close();
        }
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    for stream in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let Ok(mut stream) = stream else { continue };
        let mut slot = shared.outbox.lock().unwrap_or_else(|e| e.into_inner());
        if slot.is_some() {
            drop(slot);
            let busy = ServerMsg::Error {
                detail: "busy: another driver is connected".into(),
            };
            let _ = stream.write_all(busy.to_line().as_bytes());
            continue;
        }
        let outbox = Arc::new(DropOldest::new(TELEMETRY_CAPACITY));
        *slot = Some(Arc::clone(&outbox));
        drop(slot);
        shared.events.push(TeleopEvent::Connected);
        let _ = stream.set_nodelay(true);
        let Ok(write_half) = stream.try_clone() else {
            release(&shared, &outbox);
            continue;
        };
        let w_out = Arc::clone(&outbox);
        std::thread::spawn(move || writer_loop(write_half, w_out));
        let r_shared = Arc::clone(&shared);
        std::thread::spawn(move || reader_loop(stream, r_shared, outbox));
    }
}

fn release(shared: &Shared, outbox: &Arc<DropOldest<String>>) {
    outbox.close();
    let mut slot = shared.outbox.lock().unwrap_or_else(|e| e.into_inner());
    if slot.as_ref().is_some_and(|o| Arc::ptr_eq(o, outbox)) {
        *slot = None;
    }
}

fn reader_loop(stream: TcpStream, shared: Arc<Shared>, outbox: Arc<DropOldest<String>>) {
    let reader = BufReader::new(&stream);
    for line in reader.lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        match ClientMsg::parse(&line) {
            Ok(ClientMsg::Control {
                steer,
                throttle,
                record,
            }) => {
                shared.events.push(TeleopEvent::Control {
                    steer,
                    throttle,
                    record,
                });
            }
            Ok(ClientMsg::Mode { mode }) => {
                shared.events.push(TeleopEvent::Mode(mode));
            }
            Err(detail) => {
                outbox.push(ServerMsg::Error { detail }.to_line());
            }
        }
    }
    release(&shared, &outbox);
    shared.events.push(TeleopEvent::Disconnected);
    let _ = stream.shutdown(std::net::Shutdown::Both);
}

fn writer_loop(mut stream: TcpStream, outbox: Arc<DropOldest<String>>) {
    loop {
        match outbox.pop_timeout(Duration::from_millis(100)) {
            Some(line) => {
                if stream.write_all(line.as_bytes()).is_err() {
                    break;
                }
            }
            None if outbox.is_closed() => break,
            None => {}
        }
    }
}
