//! Telemetry over TCP, one JSON object per line.
//!
//! Server to client: frame messages (`"v": 1`) and replies to control messages
//! (`"type": "ack"` or `"type": "error"`). Client to server: control messages tagged by
//! `"type"`. Each subscriber has a bounded outgoing queue; a subscriber whose queue is full
//! when a frame is published is disconnected, so every connected stream is gap-free.

use std::collections::HashSet;
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{channel, sync_channel, Receiver, Sender, SyncSender, TryRecvError, TrySendError};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{RiskFlag, TickResult};
use crate::planner::IntentionLabel;
use crate::world::World;

pub const WIRE_VERSION: u32 = 1;
pub const DEFAULT_BACKLOG_CAP: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub step: IntentionLabel,
    pub vote: IntentionLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleMessage {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub v_lon: f64,
    pub v_lat: f64,
    pub tire_angle: f64,
    pub signal_left: bool,
    pub signal_right: bool,
    /// Ground-truth raw intention.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intention: Option<IntentionLabel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prediction: Option<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameMessage {
    pub v: u32,
    pub tick: u64,
    pub time_ms: u64,
    pub vehicles: Vec<VehicleMessage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub risks: Option<Vec<RiskFlag>>,
}

impl FrameMessage {
    pub fn from_world(world: &World, tick: u64) -> FrameMessage {
        let vehicles = world
            .agents()
            .iter()
            .map(|a| VehicleMessage {
                id: a.id,
                x: a.state.x,
                y: a.state.y,
                heading: a.state.heading,
                v_lon: a.state.v_lon,
                v_lat: a.state.v_lat,
                tire_angle: a.state.tire_angle,
                signal_left: a.state.signal_left,
                signal_right: a.state.signal_right,
                intention: Some(a.label),
                prediction: None,
            })
            .collect();
        FrameMessage { v: WIRE_VERSION, tick, time_ms: world.time_ms(), vehicles, risks: None }
    }

    /// Attaches voted predictions and risk flags from an inference tick.
    pub fn annotate(&mut self, result: &TickResult) {
        for p in &result.predictions {
            if let Some(v) = self.vehicles.iter_mut().find(|v| v.id == p.agent) {
                let label = |i: usize| IntentionLabel::from_index(i).unwrap_or(IntentionLabel::LaneKeep);
                v.prediction = Some(Prediction { step: label(p.step), vote: label(p.vote) });
            }
        }
        self.risks = Some(result.flags.clone());
    }

    pub fn validate(&self) -> Result<()> {
        if self.v != WIRE_VERSION {
            return Err(Error::protocol("v", format!("unsupported version {}", self.v)));
        }
        let mut seen = HashSet::new();
        for v in &self.vehicles {
            if !seen.insert(v.id) {
                return Err(Error::protocol("vehicles.id", format!("duplicate vehicle id {}", v.id)));
            }
            for (name, x) in [("x", v.x), ("y", v.y), ("heading", v.heading), ("v_lon", v.v_lon), ("v_lat", v.v_lat)] {
                if !x.is_finite() {
                    return Err(Error::protocol(format!("vehicles.{name}"), "not finite"));
                }
            }
        }
        Ok(())
    }

    pub fn encode(&self) -> String {
        serde_json::to_string(self).expect("frame serialises")
    }

    pub fn decode(line: &str) -> Result<FrameMessage> {
        let m: FrameMessage = serde_json::from_str(line).map_err(json_error)?;
        m.validate()?;
        Ok(m)
    }
}

/// Names the offending field when serde reports one.
fn json_error(e: serde_json::Error) -> Error {
    let msg = e.to_string();
    let field = msg.split('`').nth(1).unwrap_or("json").to_string();
    Error::protocol(field, format!("parse error: {msg}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlMessage {
    Controls {
        vehicle: u32,
        throttle: f64,
        brake: f64,
        #[serde(default)]
        hand_brake: f64,
        steer: f64,
        #[serde(default)]
        signal_left: bool,
        #[serde(default)]
        signal_right: bool,
    },
    /// Returns the vehicle to its path tracker.
    Release {
        vehicle: u32,
    },
    // Empty struct variants so unknown fields are still rejected.
    Pause {},
    Resume {},
    SetIntention {
        vehicle: u32,
        intention: IntentionLabel,
    },
    Reseed {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Reply {
    Ack,
    Error { error: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerConfig {
    /// Messages queued per subscriber before it is disconnected.
    pub backlog_cap: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig { backlog_cap: DEFAULT_BACKLOG_CAP }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ServerStats {
    pub subscribers: usize,
    pub accepted: u64,
    pub disconnected_slow: u64,
    /// Largest queue length any subscriber reached.
    pub max_backlog: usize,
    pub published: u64,
}

enum Outgoing {
    Line(Arc<str>),
    Reply(String),
}

struct Subscriber {
    id: u64,
    tx: SyncSender<Outgoing>,
    backlog: Arc<AtomicUsize>,
    socket: TcpStream,
}

#[derive(Default)]
struct Shared {
    subscribers: Vec<Subscriber>,
    stats: ServerStats,
}

/// A control message and the connection it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Inbound {
    pub connection: u64,
    pub message: ControlMessage,
}

pub struct Server {
    addr: SocketAddr,
    shared: Arc<Mutex<Shared>>,
    controls: Receiver<Inbound>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, cfg: ServerConfig) -> Result<Server> {
        if cfg.backlog_cap == 0 {
            return Err(Error::config("backlog_cap", "must be at least 1"));
        }
        let listener = TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let shared = Arc::new(Mutex::new(Shared::default()));
        let stop = Arc::new(AtomicBool::new(false));
        let (ctl_tx, controls) = channel();
        let acceptor = {
            let (shared, stop) = (shared.clone(), stop.clone());
            thread::spawn(move || accept_loop(listener, shared, stop, ctl_tx, cfg))
        };
        Ok(Server { addr: local, shared, controls, stop, acceptor: Some(acceptor) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Queues `msg` for every subscriber; subscribers with a full queue are dropped.
    pub fn publish(&self, msg: &FrameMessage) {
        let line: Arc<str> = Arc::from(msg.encode());
        let mut sh = self.shared.lock().unwrap();
        let mut slow = 0;
        let mut max_backlog = sh.stats.max_backlog;
        sh.subscribers.retain(|s| {
            // Count first so the writer can never observe a negative backlog.
            let n = s.backlog.fetch_add(1, Ordering::SeqCst) + 1;
            match s.tx.try_send(Outgoing::Line(line.clone())) {
                Ok(()) => {
                    max_backlog = max_backlog.max(n);
                    true
                }
                Err(TrySendError::Full(_)) => {
                    log::warn!("subscriber {} fell {} messages behind, disconnecting", s.id, n - 1);
                    let _ = s.socket.shutdown(Shutdown::Both);
                    slow += 1;
                    false
                }
                Err(TrySendError::Disconnected(_)) => false,
            }
        });
        sh.stats.max_backlog = max_backlog;
        sh.stats.disconnected_slow += slow;
        sh.stats.published += 1;
    }

    pub fn try_control(&self) -> Option<Inbound> {
        match self.controls.try_recv() {
            Ok(m) => Some(m),
            Err(TryRecvError::Empty | TryRecvError::Disconnected) => None,
        }
    }

    pub fn stats(&self) -> ServerStats {
        let sh = self.shared.lock().unwrap();
        ServerStats { subscribers: sh.subscribers.len(), ..sh.stats }
    }

    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        let mut sh = self.shared.lock().unwrap();
        for s in sh.subscribers.drain(..) {
            let _ = s.socket.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_inner();
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Mutex<Shared>>, stop: Arc<AtomicBool>, controls: Sender<Inbound>, cfg: ServerConfig) {
    let mut next_id = 0u64;
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(socket) = conn else { continue };
        let (Ok(write_half), Ok(read_half), Ok(handle)) = (socket.try_clone(), socket.try_clone(), socket.try_clone()) else {
            continue;
        };
        let id = next_id;
        next_id += 1;
        let (tx, rx) = sync_channel(cfg.backlog_cap);
        let backlog = Arc::new(AtomicUsize::new(0));
        {
            let backlog = backlog.clone();
            thread::spawn(move || write_loop(write_half, rx, backlog));
        }
        {
            let (tx, controls) = (tx.clone(), controls.clone());
            thread::spawn(move || read_loop(id, read_half, tx, controls));
        }
        let _ = socket.set_nodelay(true);
        let mut sh = shared.lock().unwrap();
        sh.subscribers.push(Subscriber { id, tx, backlog, socket: handle });
        sh.stats.accepted += 1;
    }
}

fn write_loop(mut socket: TcpStream, rx: Receiver<Outgoing>, backlog: Arc<AtomicUsize>) {
    for item in rx {
        let res = match item {
            Outgoing::Line(line) => {
                backlog.fetch_sub(1, Ordering::SeqCst);
                socket.write_all(line.as_bytes()).and_then(|_| socket.write_all(b"\n"))
            }
            Outgoing::Reply(r) => socket.write_all(r.as_bytes()).and_then(|_| socket.write_all(b"\n")),
        };
        if res.is_err() {
            break;
        }
    }
    let _ = socket.shutdown(Shutdown::Both);
}

fn read_loop(id: u64, socket: TcpStream, tx: SyncSender<Outgoing>, controls: Sender<Inbound>) {
    for line in BufReader::new(socket).lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<ControlMessage>(&line) {
            Ok(message) => {
                if controls.send(Inbound { connection: id, message }).is_err() {
                    break;
                }
                Reply::Ack
            }
            Err(e) => Reply::Error { error: format!("parse error: {e}") },
        };
        let text = serde_json::to_string(&reply).expect("reply serialises");
        // Replies bypass the frame backlog accounting but still respect the queue bound.
        if tx.try_send(Outgoing::Reply(text)).is_err() {
            break;
        }
    }
}

/// Applies one control message to `world`. Returns the new pause state.
pub fn apply_control(world: &mut World, msg: &ControlMessage, paused: bool) -> Result<bool> {
    match *msg {
        ControlMessage::Controls { vehicle, throttle, brake, hand_brake, steer, signal_left, signal_right } => {
            let c = crate::vehicle::Controls { throttle, brake, hand_brake, steer, signal_left, signal_right };
            world.set_controls(vehicle, Some(c))?;
        }
        ControlMessage::Release { vehicle } => world.set_controls(vehicle, None)?,
        ControlMessage::Pause {} => return Ok(true),
        ControlMessage::Resume {} => return Ok(false),
        ControlMessage::SetIntention { vehicle, intention } => world.set_intention(vehicle, intention)?,
        ControlMessage::Reseed { seed } => *world = World::new(world.config().clone(), seed)?,
    }
    Ok(paused)
}

/// Reads frame messages from a line stream. Server replies are collected separately;
/// an I/O error ends the stream.
pub struct FrameReader<R> {
    lines: std::io::Lines<R>,
    replies: Vec<Reply>,
    done: bool,
}

impl<R: BufRead> FrameReader<R> {
    pub fn new(input: R) -> Self {
        FrameReader { lines: input.lines(), replies: Vec::new(), done: false }
    }

    pub fn replies(&self) -> &[Reply] {
        &self.replies
    }

    pub fn take_replies(&mut self) -> Vec<Reply> {
        std::mem::take(&mut self.replies)
    }
}

impl<R: BufRead> Iterator for FrameReader<R> {
    type Item = Result<FrameMessage>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            let line = match self.lines.next() {
                Some(Ok(l)) => l,
                Some(Err(e)) => {
                    log::debug!("stream ended: {e}");
                    self.done = true;
                    return None;
                }
                None => {
                    self.done = true;
                    return None;
                }
            };
            if line.trim().is_empty() {
                continue;
            }
            if let Ok(r) = serde_json::from_str::<Reply>(&line) {
                self.replies.push(r);
                continue;
            }
            return Some(FrameMessage::decode(&line));
        }
        None
    }
}

/// Connects to a server; returns the frame reader and a handle for sending control messages.
pub fn connect(addr: impl ToSocketAddrs) -> Result<(FrameReader<BufReader<TcpStream>>, ControlSender)> {
    let socket = TcpStream::connect(addr)?;
    let write = socket.try_clone()?;
    Ok((FrameReader::new(BufReader::new(socket)), ControlSender { socket: write }))
}

pub struct ControlSender {
    socket: TcpStream,
}

impl ControlSender {
    pub fn send(&mut self, msg: &ControlMessage) -> Result<()> {
        let mut line = serde_json::to_string(msg).expect("control serialises");
        line.push('\n');
        self.send_raw(&line)
    }

    /// Writes `line` verbatim; for protocol testing.
    pub fn send_raw(&mut self, line: &str) -> Result<()> {
        self.socket.write_all(line.as_bytes())?;
        Ok(())
    }

    pub fn close(self) {
        let _ = self.socket.shutdown(Shutdown::Both);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::WorldConfig;
    use std::io::Cursor;
    use std::time::{Duration, Instant};

    fn frames(n: u64) -> Vec<FrameMessage> {
        let mut w = World::new(WorldConfig::default(), 4).unwrap();
        (0..n)
            .map(|k| {
                w.advance_frame().unwrap();
                FrameMessage::from_world(&w, k)
            })
            .collect()
    }

    fn wait_for(mut cond: impl FnMut() -> bool) {
        let deadline = Instant::now() + Duration::from_secs(10);
        while !cond() {
            assert!(Instant::now() < deadline, "timed out");
            thread::sleep(Duration::from_millis(5));
        }
    }

    #[test]
    fn frame_roundtrip() {
        for f in frames(5) {
            assert_eq!(FrameMessage::decode(&f.encode()).unwrap(), f);
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let mut f = frames(1).remove(0);
        let dup = f.vehicles[0].clone();
        f.vehicles.push(dup);
        match FrameMessage::decode(&f.encode()) {
            Err(Error::Protocol { field, .. }) => assert_eq!(field, "vehicles.id"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_errors_name_the_field() {
        let line = r#"{"v":1,"tick":0,"time_ms":0,"vehicles":[{"id":1,"y":0,"heading":0,"v_lon":0,"v_lat":0,"tire_angle":0,"signal_left":false,"signal_right":false}]}"#;
        match FrameMessage::decode(line) {
            Err(Error::Protocol { field, .. }) => assert_eq!(field, "x"),
            other => panic!("{other:?}"),
        }
        let line = r#"{"v":1,"tick":0,"time_ms":0,"vehicles":[],"extra":1}"#;
        assert!(matches!(FrameMessage::decode(line), Err(Error::Protocol { field, .. }) if field == "extra"));
        let line = r#"{"v":2,"tick":0,"time_ms":0,"vehicles":[]}"#;
        assert!(matches!(FrameMessage::decode(line), Err(Error::Protocol { field, .. }) if field == "v"));
    }

    #[test]
    fn control_messages_parse_strictly() {
        let ok = r#"{"type":"set_intention","vehicle":3,"intention":"change_lane_left"}"#;
        assert_eq!(
            serde_json::from_str::<ControlMessage>(ok).unwrap(),
            ControlMessage::SetIntention { vehicle: 3, intention: IntentionLabel::ChangeLaneLeft }
        );
        assert!(serde_json::from_str::<ControlMessage>(r#"{"type":"pause","x":1}"#).is_err());
        assert!(serde_json::from_str::<ControlMessage>(r#"{"type":"warp"}"#).is_err());
        let c = r#"{"type":"controls","vehicle":0,"throttle":0.5,"brake":0,"steer":0.1}"#;
        assert!(matches!(serde_json::from_str::<ControlMessage>(c).unwrap(), ControlMessage::Controls { .. }));
    }

    #[test]
    fn reader_handles_empty_and_replies() {
        assert_eq!(FrameReader::new(Cursor::new("")).count(), 0);
        let f = frames(2);
        let text = format!("{}\n{{\"type\":\"ack\"}}\n\n{}\n", f[0].encode(), f[1].encode());
        let mut r = FrameReader::new(Cursor::new(text));
        let got: Vec<_> = r.by_ref().map(|m| m.unwrap()).collect();
        assert_eq!(got, f);
        assert_eq!(r.replies(), &[Reply::Ack]);
    }

    #[test]
    fn subscribers_see_identical_monotone_streams() {
        let server = Server::bind("127.0.0.1:0", ServerConfig::default()).unwrap();
        let (r1, _c1) = connect(server.local_addr()).unwrap();
        let (r2, _c2) = connect(server.local_addr()).unwrap();
        wait_for(|| server.stats().subscribers == 2);
        let sent = frames(40);
        let h1 = thread::spawn(move || r1.take(40).map(|m| m.unwrap()).collect::<Vec<_>>());
        let h2 = thread::spawn(move || r2.take(40).map(|m| m.unwrap()).collect::<Vec<_>>());
        for f in &sent {
            server.publish(f);
        }
        let (a, b) = (h1.join().unwrap(), h2.join().unwrap());
        assert_eq!(a, sent);
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[1].tick > w[0].tick));
    }

    #[test]
    fn late_subscriber_gets_no_replay() {
        let server = Server::bind("127.0.0.1:0", ServerConfig::default()).unwrap();
        let sent = frames(6);
        for f in &sent[..3] {
            server.publish(f);
        }
        let (r, _c) = connect(server.local_addr()).unwrap();
        wait_for(|| server.stats().subscribers == 1);
        for f in &sent[3..] {
            server.publish(f);
        }
        let got: Vec<_> = r.take(3).map(|m| m.unwrap().tick).collect();
        assert_eq!(got, vec![3, 4, 5]);
    }

    #[test]
    fn malformed_control_gets_error_reply() {
        let server = Server::bind("127.0.0.1:0", ServerConfig::default()).unwrap();
        let (mut r, mut c) = connect(server.local_addr()).unwrap();
        wait_for(|| server.stats().subscribers == 1);
        c.send_raw("{not json\n").unwrap();
        c.send(&ControlMessage::Pause {}).unwrap();
        let mut got = None;
        wait_for(|| {
            got = server.try_control();
            got.is_some()
        });
        assert_eq!(got.unwrap().message, ControlMessage::Pause {});
        server.publish(&frames(1)[0]);
        assert!(r.next().unwrap().is_ok());
        let replies = r.take_replies();
        assert!(matches!(&replies[0], Reply::Error { error } if error.contains("parse")));
        assert_eq!(replies[1], Reply::Ack);
    }

    #[test]
    fn stalled_subscriber_is_disconnected_within_cap() {
        let cap = 16;
        let server = Server::bind("127.0.0.1:0", ServerConfig { backlog_cap: cap }).unwrap();
        let (_stalled, _c1) = connect(server.local_addr()).unwrap();
        let (live, _c2) = connect(server.local_addr()).unwrap();
        wait_for(|| server.stats().subscribers == 2);
        let f = frames(1).remove(0);
        let seen = Arc::new(AtomicUsize::new(0));
        let reader = {
            let seen = seen.clone();
            thread::spawn(move || {
                let mut last = None;
                for m in live {
                    let m = m.unwrap();
                    if let Some(prev) = last {
                        assert!(m.tick > prev);
                    }
                    last = Some(m.tick);
                    seen.fetch_add(1, Ordering::SeqCst);
                }
                seen.load(Ordering::SeqCst)
            })
        };
        let mut tick = 0;
        while server.stats().disconnected_slow == 0 {
            assert!(tick < 1_000_000, "stalled subscriber never dropped");
            let mut m = f.clone();
            m.tick = tick as u64;
            server.publish(&m);
            tick += 1;
            // Pace on the live reader: on one core a tight loop would starve it too.
            if tick % 8 == 0 {
                wait_for(|| seen.load(Ordering::SeqCst) >= tick);
            }
        }
        let stats = server.stats();
        assert_eq!(stats.subscribers, 1);
        assert!(stats.max_backlog <= cap);
        server.shutdown();
        let received = reader.join().unwrap();
        assert_eq!(received, tick);
    }

    #[test]
    fn controls_reach_the_world() {
        let mut w = World::new(WorldConfig::default(), 9).unwrap();
        let id = w.agents()[0].id;
        let x0 = w.agent(id).unwrap().state.v_lon;
        let msg = ControlMessage::Controls {
            vehicle: id,
            throttle: 0.0,
            brake: 1.0,
            hand_brake: 0.0,
            steer: 0.0,
            signal_left: false,
            signal_right: false,
        };
        assert!(!apply_control(&mut w, &msg, false).unwrap());
        for _ in 0..5 {
            w.advance_frame().unwrap();
        }
        assert!(w.agent(id).unwrap().state.v_lon < x0 - 1.0);
        assert!(apply_control(&mut w, &ControlMessage::Pause {}, false).unwrap());
        assert!(apply_control(&mut w, &ControlMessage::Release { vehicle: 999 }, false).is_err());
    }
}
