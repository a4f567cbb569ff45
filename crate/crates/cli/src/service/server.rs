//! Threads and sockets around [`Session`].
//!
//! Each connection gets a reader context feeding a router, plus a writer
//! context draining a bounded queue. The router owns session membership and
//! forwards traffic to one game-loop thread per session. Game loops only ever
//! `try_send` to writers, so a slow client loses state frames instead of
//! stalling the tick.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender, SyncSender, TrySendError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use anyhow::Context;
use cogail_core::demos::DemoDataset;
use cogail_core::env::FetchQuest;

use super::protocol::{parse_client, ClientMsg, Role, ServerMsg, SessionMode};
use super::session::{ConnId, Outbound, PlaylistEntry, Session, SessionSettings};

/// Frames buffered per client before state frames start being dropped.
pub const OUTBOUND_QUEUE: usize = 64;
const POLL: Duration = Duration::from_millis(5);

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub tick_hz: f64,
    pub settings: SessionSettings,
    pub record_dir: Option<PathBuf>,
}

enum RouterEvent {
    Opened(ConnId, SyncSender<String>),
    Frame(ConnId, String),
    Closed(ConnId),
    SessionEnded(u64),
}

enum SessionEvent {
    Join(ConnId, Role, SyncSender<String>),
    Msg(ConnId, ClientMsg),
    Left(ConnId),
}

struct SessionHandle {
    mode: SessionMode,
    roles: [Option<ConnId>; 2],
    tx: Sender<SessionEvent>,
}

/// Counters shared with tests and the operator log.
#[derive(Debug, Default)]
pub struct Stats {
    pub dropped_frames: AtomicU64,
    pub ticks: AtomicU64,
    /// Slowest tick processing time seen, in microseconds.
    pub max_tick_us: AtomicU64,
}

pub struct Server {
    pub tcp_addr: SocketAddr,
    pub ws_addr: Option<SocketAddr>,
    pub stats: Arc<Stats>,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl Server {
    /// Binds the listeners and starts the router; returns immediately.
    pub fn start(
        env: FetchQuest,
        playlist: Vec<PlaylistEntry>,
        cfg: ServerConfig,
        tcp: &str,
        ws: Option<&str>,
    ) -> anyhow::Result<Self> {
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(Stats::default());
        let (router_tx, router_rx) = mpsc::channel();
        let next_conn = Arc::new(AtomicU64::new(1));

        let listener = TcpListener::bind(tcp).with_context(|| format!("binding {tcp}"))?;
        let tcp_addr = listener.local_addr()?;
        let mut threads = vec![spawn_acceptor(
            listener,
            Transport::Lines,
            router_tx.clone(),
            next_conn.clone(),
            stop.clone(),
        )?];
        let ws_addr = match ws {
            Some(addr) => {
                let l = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
                let a = l.local_addr()?;
                threads.push(spawn_acceptor(
                    l,
                    Transport::WebSocket,
                    router_tx.clone(),
                    next_conn,
                    stop.clone(),
                )?);
                Some(a)
            }
            None => None,
        };
        let router = Router {
            env,
            playlist: Arc::new(playlist),
            cfg,
            stats: stats.clone(),
            self_tx: router_tx,
            writers: HashMap::new(),
            conn_session: HashMap::new(),
            sessions: HashMap::new(),
            next_session: 1,
        };
        let s = stop.clone();
        threads.push(thread::spawn(move || router.run(router_rx, s)));
        Ok(Self {
            tcp_addr,
            ws_addr,
            stats,
            stop,
            threads,
        })
    }

    pub fn shutdown(self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads {
            let _ = t.join();
        }
    }

    /// Blocks until the process is killed.
    pub fn wait(self) {
        for t in self.threads {
            let _ = t.join();
        }
    }
}

#[derive(Clone, Copy)]
enum Transport {
    Lines,
    WebSocket,
}

fn spawn_acceptor(
    listener: TcpListener,
    transport: Transport,
    router: Sender<RouterEvent>,
    next_conn: Arc<AtomicU64>,
    stop: Arc<AtomicBool>,
) -> anyhow::Result<JoinHandle<()>> {
    listener.set_nonblocking(true)?;
    Ok(thread::spawn(move || {
        while !stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_nodelay(true);
                    let id = next_conn.fetch_add(1, Ordering::SeqCst);
                    match transport {
                        Transport::Lines => spawn_line_conn(id, stream, router.clone(), stop.clone()),
                        Transport::WebSocket => spawn_ws_conn(id, stream, router.clone(), stop.clone()),
                    }
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL * 4),
                Err(_) => thread::sleep(POLL * 4),
            }
        }
    }))
}

fn spawn_line_conn(id: ConnId, stream: TcpStream, router: Sender<RouterEvent>, stop: Arc<AtomicBool>) {
    let (tx, rx) = mpsc::sync_channel::<String>(OUTBOUND_QUEUE);
    if router.send(RouterEvent::Opened(id, tx)).is_err() {
        return;
    }
    let Ok(write_half) = stream.try_clone() else {
        let _ = router.send(RouterEvent::Closed(id));
        return;
    };
    thread::spawn(move || {
        let mut w = write_half;
        for line in rx {
            if w.write_all(line.as_bytes()).and_then(|_| w.write_all(b"\n")).is_err() {
                break;
            }
        }
        let _ = w.shutdown(std::net::Shutdown::Both);
    });
    thread::spawn(move || {
        let _ = stream.set_read_timeout(Some(Duration::from_millis(50)));
        let mut reader = BufReader::new(stream);
        let mut line = String::new();
        while !stop.load(Ordering::SeqCst) {
            match reader.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {
                    if !line.trim().is_empty() && router.send(RouterEvent::Frame(id, line.clone())).is_err() {
                        break;
                    }
                    line.clear();
                }
                // A timeout keeps any partial line buffered for the next read.
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(_) => break,
            }
        }
        let _ = router.send(RouterEvent::Closed(id));
    });
}

fn spawn_ws_conn(id: ConnId, stream: TcpStream, router: Sender<RouterEvent>, stop: Arc<AtomicBool>) {
    use tungstenite::{Error, Message};
    thread::spawn(move || {
        let Ok(mut ws) = tungstenite::accept(stream) else {
            return;
        };
        let (tx, rx) = mpsc::sync_channel::<String>(OUTBOUND_QUEUE);
        if router.send(RouterEvent::Opened(id, tx)).is_err() {
            return;
        }
        // Reads poll with a short timeout so one context can also write.
        let _ = ws.get_ref().set_read_timeout(Some(POLL));
        'conn: while !stop.load(Ordering::SeqCst) {
            match ws.read() {
                Ok(Message::Text(t)) => {
                    if router.send(RouterEvent::Frame(id, t.to_string())).is_err() {
                        break;
                    }
                }
                Ok(Message::Close(_)) => break,
                Ok(_) => {}
                Err(Error::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {}
                Err(_) => break,
            }
            loop {
                match rx.try_recv() {
                    Ok(line) => {
                        if ws.send(Message::text(line)).is_err() {
                            break 'conn;
                        }
                    }
                    Err(mpsc::TryRecvError::Empty) => break,
                    Err(mpsc::TryRecvError::Disconnected) => break 'conn,
                }
            }
        }
        let _ = ws.close(None);
        let _ = router.send(RouterEvent::Closed(id));
    });
}

struct Router {
    env: FetchQuest,
    playlist: Arc<Vec<PlaylistEntry>>,
    cfg: ServerConfig,
    stats: Arc<Stats>,
    self_tx: Sender<RouterEvent>,
    writers: HashMap<ConnId, SyncSender<String>>,
    conn_session: HashMap<ConnId, u64>,
    sessions: HashMap<u64, SessionHandle>,
    next_session: u64,
}

impl Router {
    fn run(mut self, rx: Receiver<RouterEvent>, stop: Arc<AtomicBool>) {
        while !stop.load(Ordering::SeqCst) {
            match rx.recv_timeout(POLL * 4) {
                Ok(ev) => self.on_event(ev),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        // Dropping the session senders ends the game loops.
        self.sessions.clear();
    }

    fn send(&self, conn: ConnId, msg: &ServerMsg) {
        if let Some(w) = self.writers.get(&conn) {
            let _ = w.try_send(msg.encode());
        }
    }

    fn on_event(&mut self, ev: RouterEvent) {
        match ev {
            RouterEvent::Opened(id, w) => {
                self.writers.insert(id, w);
            }
            RouterEvent::Closed(id) => {
                self.writers.remove(&id);
                if let Some(sid) = self.conn_session.remove(&id) {
                    if let Some(h) = self.sessions.get_mut(&sid) {
                        for r in &mut h.roles {
                            if *r == Some(id) {
                                *r = None;
                            }
                        }
                        let _ = h.tx.send(SessionEvent::Left(id));
                    }
                }
            }
            RouterEvent::SessionEnded(sid) => {
                self.sessions.remove(&sid);
            }
            RouterEvent::Frame(id, frame) => match parse_client(&frame) {
                Err(e) => self.send(id, &e),
                Ok(ClientMsg::Join { mode, role }) if !self.conn_session.contains_key(&id) => self.join(id, mode, role),
                Ok(msg) => match self.conn_session.get(&id).and_then(|s| self.sessions.get(s)) {
                    Some(h) => {
                        let _ = h.tx.send(SessionEvent::Msg(id, msg));
                    }
                    None => self.send(
                        id,
                        &ServerMsg::error(super::protocol::ErrorCode::NotJoined, "join a session first"),
                    ),
                },
            },
        }
    }

    /// Attaches to an open session of `mode` with `role` free, or opens one.
    /// Play sessions are never shared.
    fn join(&mut self, conn: ConnId, mode: SessionMode, role: Role) {
        let Some(writer) = self.writers.get(&conn).cloned() else {
            return;
        };
        let existing = (mode == SessionMode::CollectTwoHuman)
            .then(|| {
                self.sessions
                    .iter()
                    .filter(|(_, h)| h.mode == mode && h.roles[role.index()].is_none())
                    .map(|(id, _)| *id)
                    .min()
            })
            .flatten();
        let sid = match existing {
            Some(sid) => sid,
            None => {
                let sid = self.next_session;
                let session = match Session::new(sid, mode, self.env.clone(), self.cfg.settings, self.playlist.clone())
                {
                    Ok(s) => s,
                    Err(e) => return self.send(conn, &e),
                };
                if mode == SessionMode::PlayVsPolicy && role != Role::Human {
                    return self.send(
                        conn,
                        &ServerMsg::error(
                            super::protocol::ErrorCode::BadRole,
                            "play_vs_policy has only the human role",
                        ),
                    );
                }
                self.next_session += 1;
                let (tx, rx) = mpsc::channel();
                let cfg = self.cfg.clone();
                let stats = self.stats.clone();
                let router = self.self_tx.clone();
                thread::spawn(move || game_loop(session, rx, cfg, stats, router));
                self.sessions.insert(
                    sid,
                    SessionHandle {
                        mode,
                        roles: [None; 2],
                        tx,
                    },
                );
                sid
            }
        };
        let h = self.sessions.get_mut(&sid).expect("session exists");
        h.roles[role.index()] = Some(conn);
        self.conn_session.insert(conn, sid);
        let _ = h.tx.send(SessionEvent::Join(conn, role, writer));
    }
}

fn game_loop(
    mut session: Session,
    rx: Receiver<SessionEvent>,
    cfg: ServerConfig,
    stats: Arc<Stats>,
    router: Sender<RouterEvent>,
) {
    let period = Duration::from_secs_f64(1.0 / cfg.tick_hz);
    let mut writers: HashMap<ConnId, SyncSender<String>> = HashMap::new();
    let mut next_tick = Instant::now() + period;
    let mut saved_rounds = 0;
    let dispatch = |writers: &HashMap<ConnId, SyncSender<String>>, out: Vec<Outbound>| {
        for o in out {
            if let Some(w) = writers.get(&o.to) {
                if let Err(TrySendError::Full(_)) = w.try_send(o.msg.encode()) {
                    stats.dropped_frames.fetch_add(1, Ordering::Relaxed);
                }
            }
        }
    };
    loop {
        let wait = next_tick.saturating_duration_since(Instant::now());
        match rx.recv_timeout(wait) {
            Ok(SessionEvent::Join(conn, role, w)) => {
                writers.insert(conn, w);
                dispatch(&writers, session.join(conn, role));
            }
            Ok(SessionEvent::Msg(conn, msg)) => dispatch(&writers, session.handle(conn, msg)),
            Ok(SessionEvent::Left(conn)) => {
                let out = session.leave(conn);
                writers.remove(&conn);
                dispatch(&writers, out);
                if session.is_empty() {
                    save(&session, &cfg, &mut saved_rounds);
                    let _ = router.send(RouterEvent::SessionEnded(session.id));
                    return;
                }
            }
            Err(RecvTimeoutError::Timeout) => {
                let started = Instant::now();
                let out = session.tick();
                let us = started.elapsed().as_micros() as u64;
                stats.ticks.fetch_add(1, Ordering::Relaxed);
                stats.max_tick_us.fetch_max(us, Ordering::Relaxed);
                dispatch(&writers, out);
                save(&session, &cfg, &mut saved_rounds);
                next_tick += period;
                // After a stall, resume the cadence instead of bursting.
                let now = Instant::now();
                if next_tick < now {
                    next_tick = now + period;
                }
            }
            Err(RecvTimeoutError::Disconnected) => {
                save(&session, &cfg, &mut saved_rounds);
                return;
            }
        }
    }
}

/// Rewrites the session's recordings and report when a round has finished.
fn save(session: &Session, cfg: &ServerConfig, saved_rounds: &mut usize) {
    let Some(dir) = &cfg.record_dir else { return };
    let n = session.outcomes().len();
    if n == *saved_rounds {
        return;
    }
    *saved_rounds = n;
    let result = (|| -> anyhow::Result<()> {
        std::fs::create_dir_all(dir)?;
        let env = FetchQuest::default();
        let ds = DemoDataset::new(&env, session.recordings().to_vec());
        ds.save(&dir.join(format!("session-{:04}.demos", session.id)))?;
        let report = serde_json::to_string_pretty(&session.report())?;
        std::fs::write(dir.join(format!("session-{:04}.report.json", session.id)), report)?;
        Ok(())
    })();
    if let Err(e) = result {
        eprintln!("warning: could not save session {}: {e:#}", session.id);
    }
}
