//! Framed TCP transport.
//!
//! A client connects once, sends HELLO with its id and then answers every
//! GLOBAL frame with one UPDATE for the same round. The server ends the run
//! with DONE, or with ERR `Aborted` when the run fails.

use std::collections::{BTreeMap, BTreeSet};
use std::io::ErrorKind;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, warn};

use super::{decode_params, encode_params, read_message, write_message, Dtype, ErrorCode, Message, MessageKind, WireError};
use crate::federation::{ClientNode, ClientUpdate, Exchange, FedError, FederationConfig};
use crate::nn::ParamSet;

const ACCEPT_POLL: Duration = Duration::from_millis(5);
const LATE_HELLO_TIMEOUT: Duration = Duration::from_secs(2);

type Inbox = (u32, Result<Message, WireError>);

fn io_error(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> FedError {
    let context = context.into();
    move |source| FedError::Io { context, source }
}

pub struct NetServer {
    listener: TcpListener,
}

impl NetServer {
    pub fn bind(address: &str) -> Result<Self, FedError> {
        let listener = TcpListener::bind(address).map_err(io_error(format!("binding {address}")))?;
        Ok(Self { listener })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, FedError> {
        self.listener.local_addr().map_err(io_error("reading listener address"))
    }

    /// Waits until clients 1..=K have each sent HELLO.
    ///
    /// A HELLO with an id outside 1..=K or an id already registered gets an
    /// ERR frame and the connection is closed. Connections arriving after
    /// registration are answered the same way for the rest of the run.
    pub fn accept_clients(self, cfg: &FederationConfig) -> Result<NetExchange, FedError> {
        let k = cfg.clients as u32;
        let deadline = Instant::now() + cfg.round_timeout;
        self.listener
            .set_nonblocking(true)
            .map_err(io_error("configuring listener"))?;
        let mut streams: BTreeMap<u32, TcpStream> = BTreeMap::new();
        while (streams.len() as u32) < k {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    let remaining = deadline.saturating_duration_since(Instant::now()).max(Duration::from_millis(1));
                    if let Some((id, stream)) = register(stream, k, &streams, remaining) {
                        debug!("client {id} joined from {peer}");
                        streams.insert(id, stream);
                    }
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        let missing = (1..=k).filter(|id| !streams.contains_key(id)).collect();
                        return Err(FedError::RoundTimeout { round: 0, missing });
                    }
                    thread::sleep(ACCEPT_POLL);
                }
                Err(e) => return Err(io_error("accepting connection")(e)),
            }
        }

        let (tx, rx) = mpsc::channel();
        let mut writers = BTreeMap::new();
        for (&id, stream) in &streams {
            let reader = stream.try_clone().map_err(io_error("cloning client socket"))?;
            spawn_reader(id, reader, tx.clone());
            writers.insert(id, stream.try_clone().map_err(io_error("cloning client socket"))?);
        }
        let registered: BTreeSet<u32> = streams.keys().copied().collect();
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let stop = Arc::clone(&stop);
            let listener = self.listener;
            thread::spawn(move || reject_late_clients(listener, registered, k, stop))
        };
        Ok(NetExchange {
            writers,
            inbox: rx,
            dead: BTreeSet::new(),
            timeout: cfg.round_timeout,
            dtype: cfg.wire_dtype,
            local_epochs: cfg.local_epochs,
            stop,
            acceptor: Some(acceptor),
        })
    }
}

fn hello_id(stream: &mut TcpStream, timeout: Duration) -> Result<Message, WireError> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(timeout))?;
    let msg = read_message(stream)?;
    stream.set_read_timeout(None)?;
    Ok(msg)
}

fn reject(stream: &mut TcpStream, client_id: u32, code: ErrorCode, reason: &str) {
    warn!("rejecting client {client_id}: {reason}");
    let _ = write_message(stream, &Message::error(0, client_id, code, reason));
    let _ = stream.shutdown(Shutdown::Both);
}

fn register(
    mut stream: TcpStream,
    k: u32,
    registered: &BTreeMap<u32, TcpStream>,
    timeout: Duration,
) -> Option<(u32, TcpStream)> {
    let msg = match hello_id(&mut stream, timeout) {
        Ok(m) => m,
        Err(e) => {
            debug!("dropping connection without HELLO: {e}");
            return None;
        }
    };
    if msg.kind != MessageKind::Hello {
        reject(&mut stream, msg.client_id, ErrorCode::Protocol, "expected HELLO");
        return None;
    }
    let id = msg.client_id;
    if !(1..=k).contains(&id) {
        reject(&mut stream, id, ErrorCode::UnknownClient, &format!("client id must be in 1..={k}"));
        return None;
    }
    if registered.contains_key(&id) {
        reject(&mut stream, id, ErrorCode::DuplicateClient, &format!("client {id} already joined"));
        return None;
    }
    Some((id, stream))
}

fn reject_late_clients(listener: TcpListener, registered: BTreeSet<u32>, k: u32, stop: Arc<AtomicBool>) {
    while !stop.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((mut stream, _)) => match hello_id(&mut stream, LATE_HELLO_TIMEOUT) {
                Ok(msg) if msg.kind == MessageKind::Hello && registered.contains(&msg.client_id) => reject(
                    &mut stream,
                    msg.client_id,
                    ErrorCode::DuplicateClient,
                    &format!("client {} already joined", msg.client_id),
                ),
                Ok(msg) if msg.kind == MessageKind::Hello && !(1..=k).contains(&msg.client_id) => reject(
                    &mut stream,
                    msg.client_id,
                    ErrorCode::UnknownClient,
                    &format!("client id must be in 1..={k}"),
                ),
                Ok(msg) => reject(&mut stream, msg.client_id, ErrorCode::Protocol, "registration is closed"),
                Err(_) => {}
            },
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(ACCEPT_POLL),
            Err(_) => thread::sleep(ACCEPT_POLL),
        }
    }
}

fn spawn_reader(client_id: u32, mut stream: TcpStream, tx: Sender<Inbox>) {
    thread::spawn(move || loop {
        let msg = read_message(&mut stream);
        let failed = msg.is_err();
        if tx.send((client_id, msg)).is_err() || failed {
            break;
        }
    });
}

/// Server side of a running NET federation.
pub struct NetExchange {
    writers: BTreeMap<u32, TcpStream>,
    inbox: Receiver<Inbox>,
    dead: BTreeSet<u32>,
    timeout: Duration,
    dtype: Dtype,
    local_epochs: u32,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl NetExchange {
    fn send(&mut self, client_id: u32, msg: &Message) -> bool {
        let ok = match self.writers.get_mut(&client_id) {
            Some(stream) => write_message(stream, msg).is_ok(),
            None => false,
        };
        if !ok {
            self.dead.insert(client_id);
        }
        ok
    }

    fn close(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(handle) = self.acceptor.take() {
            let _ = handle.join();
        }
        for stream in self.writers.values() {
            let _ = stream.shutdown(Shutdown::Both);
        }
    }

    fn decode_update(&self, round: u32, msg: &Message) -> Result<ClientUpdate, WireError> {
        let (n_k, blob) = msg.update_parts()?;
        Ok(ClientUpdate {
            client_id: msg.client_id,
            round,
            params: decode_params(blob)?,
            n_k,
            local_epochs_run: self.local_epochs,
        })
    }
}

impl Exchange for NetExchange {
    fn exchange(&mut self, round: u32, participants: &[u32], global: &ParamSet) -> Result<Vec<ClientUpdate>, FedError> {
        let blob = encode_params(global, self.dtype)?;
        let msg = Message::global(round, blob);
        let mut pending: BTreeSet<u32> = participants.iter().copied().collect();
        for &id in participants {
            if self.dead.contains(&id) || !self.send(id, &msg) {
                return Err(FedError::RoundTimeout {
                    round,
                    missing: pending.into_iter().collect(),
                });
            }
        }

        let deadline = Instant::now() + self.timeout;
        let mut updates = Vec::with_capacity(participants.len());
        while !pending.is_empty() {
            let wait = deadline.saturating_duration_since(Instant::now());
            let (from, received) = match self.inbox.recv_timeout(wait) {
                Ok(item) => item,
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                    return Err(FedError::RoundTimeout {
                        round,
                        missing: pending.into_iter().collect(),
                    })
                }
            };
            let msg = match received {
                Ok(m) => m,
                Err(WireError::Io(e)) => {
                    debug!("client {from} disconnected: {e}");
                    self.dead.insert(from);
                    if pending.contains(&from) {
                        return Err(FedError::RoundTimeout {
                            round,
                            missing: pending.into_iter().collect(),
                        });
                    }
                    continue;
                }
                Err(e) => {
                    self.send(from, &Message::error(round, from, ErrorCode::Decode, &e.to_string()));
                    return Err(e.into());
                }
            };
            match msg.kind {
                MessageKind::Update if msg.round != round => {
                    let reason = format!("update for round {} during round {round}", msg.round);
                    self.send(from, &Message::error(round, from, ErrorCode::StaleRound, &reason));
                }
                MessageKind::Update if msg.client_id != from || !pending.contains(&from) => {
                    let reason = format!("unexpected update from client {} on connection {from}", msg.client_id);
                    self.send(from, &Message::error(round, from, ErrorCode::Protocol, &reason));
                }
                MessageKind::Update => match self.decode_update(round, &msg) {
                    Ok(update) => {
                        pending.remove(&from);
                        updates.push(update);
                    }
                    Err(e) => {
                        self.send(from, &Message::error(round, from, ErrorCode::Decode, &e.to_string()));
                        return Err(e.into());
                    }
                },
                MessageKind::Err => {
                    let (code, reason) = msg.error_parts()?;
                    return Err(FedError::Remote { code, reason });
                }
                other => {
                    let reason = format!("unexpected {other:?} frame");
                    self.send(from, &Message::error(round, from, ErrorCode::Protocol, &reason));
                }
            }
        }
        updates.sort_by_key(|u| u.client_id);
        Ok(updates)
    }

    fn finish(&mut self, rounds_done: u32, _global: &ParamSet) -> Result<(), FedError> {
        let ids: Vec<u32> = self.writers.keys().copied().collect();
        for id in ids {
            self.send(id, &Message::done(rounds_done));
        }
        self.close();
        Ok(())
    }

    fn abort(&mut self, round: u32, reason: &str) {
        let ids: Vec<u32> = self.writers.keys().copied().collect();
        for id in ids {
            self.send(id, &Message::error(round, id, ErrorCode::Aborted, reason));
        }
        self.close();
    }
}

impl Drop for NetExchange {
    fn drop(&mut self) {
        self.close();
    }
}

/// Client loop: connect, announce, then train on each GLOBAL until DONE.
pub fn join(address: &str, node: &ClientNode) -> Result<(), FedError> {
    let mut stream = TcpStream::connect(address).map_err(|source| FedError::Connect {
        address: address.to_string(),
        source,
    })?;
    let _ = stream.set_nodelay(true);
    write_message(&mut stream, &Message::hello(node.id))?;
    let dtype = node.config().wire_dtype;
    loop {
        let msg = read_message(&mut stream)?;
        match msg.kind {
            MessageKind::Global => {
                let broadcast = decode_params(&msg.payload)?;
                let update = node.handle_round(msg.round, &broadcast)?;
                let blob = encode_params(&update.params, dtype)?;
                write_message(&mut stream, &Message::update(msg.round, node.id, update.n_k, &blob))?;
            }
            MessageKind::Done => return Ok(()),
            MessageKind::Err => {
                let (code, reason) = msg.error_parts()?;
                return Err(FedError::Remote { code, reason });
            }
            other => {
                return Err(FedError::ProtocolViolation(format!("client {} received {other:?}", node.id)));
            }
        }
    }
}
