//! Synchronous federation over a [`Connection`] per client.
//!
//! Protocol, per connection:
//!
//! ```text
//! client → Hello{id}
//! repeat T times:  server → Broadcast(t)   client → Contribution(t)
//! server → RoundDone
//! ```
//!
//! The server aggregates a round only once every client has answered.
//! Any failure aborts the federation; peers still connected are sent an
//! `Error` envelope naming the cause.

use std::collections::BTreeSet;
use std::fmt;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use fedsim_core::client::Client;
use fedsim_core::server::{aggregate, GlobalState, RoundContribution, RoundReport};
use fedsim_core::trainer::Broadcast;

use crate::transport::{channel_pair, Connection, StreamConnection};
use crate::wire::{Message, RoundEnvelope};
use crate::{Error, Result};

pub type ObserverResult = std::result::Result<(), Box<dyn std::error::Error + Send + Sync>>;

/// How long the TCP server waits for all clients to connect.
pub const ACCEPT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Transport {
    InProcess,
    /// Loopback federation; the server binds `bind` (port 0 picks one).
    Tcp {
        bind: String,
    },
}

impl Transport {
    pub fn tcp_loopback() -> Self {
        Transport::Tcp {
            bind: "127.0.0.1:0".into(),
        }
    }
}

impl fmt::Display for Transport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Transport::InProcess => f.write_str("in-process"),
            Transport::Tcp { bind } => write!(f, "tcp://{bind}"),
        }
    }
}

impl FromStr for Transport {
    type Err = String;

    /// `in-process`, `tcp` (loopback, any port) or `tcp://host:port`.
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "in-process" | "inprocess" => Ok(Transport::InProcess),
            "tcp" => Ok(Transport::tcp_loopback()),
            other => match other.strip_prefix("tcp://") {
                Some(bind) if !bind.is_empty() => Ok(Transport::Tcp { bind: bind.into() }),
                _ => Err(format!("unknown transport `{other}`")),
            },
        }
    }
}

enum Command {
    Round(u32, Arc<Broadcast>),
    Finish,
    Abort(String),
}

fn observer_error(e: Box<dyn std::error::Error + Send + Sync>) -> Error {
    Error::Protocol(format!("round observer failed: {e}"))
}

fn client_error(client_id: u32, source: Error) -> Error {
    Error::Client {
        client_id,
        source: Box::new(source),
    }
}

/// Reads each connection's `Hello` and returns the client ids in order.
fn handshake<C: Connection>(connections: &mut [C]) -> Result<Vec<u32>> {
    let mut ids = Vec::with_capacity(connections.len());
    let mut seen = BTreeSet::new();
    for (slot, conn) in connections.iter_mut().enumerate() {
        let outcome = match conn.recv() {
            Ok(RoundEnvelope {
                message: Message::Hello { client_id },
                ..
            }) => {
                if seen.insert(client_id) {
                    Ok(client_id)
                } else {
                    Err(Error::Protocol(format!("client id {client_id} connected twice")))
                }
            }
            Ok(env) => Err(Error::Protocol(format!(
                "expected hello on connection {slot}, got {:?}",
                env.kind()
            ))),
            Err(e) => Err(e),
        };
        match outcome {
            Ok(id) => ids.push(id),
            Err(e) => {
                if !matches!(e, Error::Disconnected | Error::Io(_)) {
                    let _ = conn.send(&RoundEnvelope::new(0, Message::Error(e.to_string())));
                }
                for other in connections.iter_mut().take(slot) {
                    let _ = other.send(&RoundEnvelope::new(0, Message::Error("federation aborted".into())));
                }
                return Err(e);
            }
        }
    }
    Ok(ids)
}

fn handle<C: Connection>(
    conn: &mut C,
    client_id: u32,
    commands: Receiver<Command>,
    results: Sender<(u32, Result<RoundContribution>)>,
) {
    while let Ok(cmd) = commands.recv() {
        match cmd {
            Command::Round(round, broadcast) => {
                let outcome = exchange(conn, client_id, round, &broadcast);
                let failed = outcome.is_err();
                if results.send((client_id, outcome)).is_err() || failed {
                    return;
                }
            }
            Command::Finish => {
                if let Err(e) = conn.send(&RoundEnvelope::new(0, Message::RoundDone)) {
                    log::warn!("client {client_id}: could not send round_done: {e}");
                }
                return;
            }
            Command::Abort(reason) => {
                let _ = conn.send(&RoundEnvelope::new(0, Message::Error(reason)));
                return;
            }
        }
    }
}

fn exchange<C: Connection>(
    conn: &mut C,
    client_id: u32,
    round: u32,
    broadcast: &Broadcast,
) -> Result<RoundContribution> {
    conn.send(&RoundEnvelope::new(round, Message::Broadcast(broadcast.clone())))?;
    let env = conn.recv()?;
    match env.message {
        Message::Contribution(c) if env.round == round && c.client_id == client_id => Ok(c),
        Message::Contribution(c) => Err(Error::Protocol(format!(
            "expected contribution for round {round} from client {client_id}, got round {} from client {}",
            env.round, c.client_id
        ))),
        Message::Error(text) => Err(Error::Rejected(text)),
        other => Err(Error::Protocol(format!(
            "expected contribution, got {:?}",
            other.kind()
        ))),
    }
}

/// Runs `rounds` rounds as the server over already-open connections.
///
/// Each connection is serviced by its own thread; aggregation waits at a
/// barrier for every client. Contributions reach `observer` sorted by
/// client id.
pub fn serve<C, F>(mut connections: Vec<C>, mut state: GlobalState, rounds: u32, mut observer: F) -> Result<GlobalState>
where
    C: Connection,
    F: FnMut(&RoundReport<'_>) -> ObserverResult,
{
    if connections.is_empty() {
        return Err(fedsim_core::Error::Empty("client set").into());
    }
    let ids = handshake(&mut connections)?;
    log::debug!("handshake complete with clients {ids:?}");

    std::thread::scope(|scope| {
        let (result_tx, result_rx) = channel();
        let mut commands = Vec::with_capacity(ids.len());
        for (conn, &id) in connections.iter_mut().zip(&ids) {
            let (tx, rx) = channel();
            let results = result_tx.clone();
            scope.spawn(move || handle(conn, id, rx, results));
            commands.push(tx);
        }
        drop(result_tx);

        let abort = |commands: &[Sender<Command>], reason: &str| {
            for tx in commands {
                let _ = tx.send(Command::Abort(reason.to_owned()));
            }
        };

        for _ in 0..rounds {
            let round = state.round + 1;
            let broadcast = Arc::new(state.broadcast());
            for tx in &commands {
                let _ = tx.send(Command::Round(round, Arc::clone(&broadcast)));
            }
            let mut contributions = Vec::with_capacity(ids.len());
            for _ in 0..ids.len() {
                let (id, outcome) = result_rx.recv().map_err(|_| Error::Disconnected)?;
                match outcome {
                    Ok(c) => contributions.push(c),
                    Err(e) => {
                        log::error!("round {round}: client {id} failed: {e}");
                        abort(
                            &commands,
                            &format!("federation aborted: client {id} failed in round {round}"),
                        );
                        return Err(client_error(id, e));
                    }
                }
            }
            contributions.sort_by_key(|c| c.client_id);
            state = match aggregate(&state, &contributions) {
                Ok(s) => s,
                Err(e) => {
                    abort(&commands, &format!("aggregation failed in round {round}"));
                    return Err(e.into());
                }
            };
            if let Err(e) = observer(&RoundReport {
                state: &state,
                contributions: &contributions,
            }) {
                abort(&commands, "federation aborted by server");
                return Err(observer_error(e));
            }
            log::debug!("round {round} aggregated");
        }
        for tx in &commands {
            let _ = tx.send(Command::Finish);
        }
        Ok(state)
    })
}

/// Client loop: say hello, answer broadcasts until the server is done.
pub fn run_client<C: Connection>(conn: &mut C, client: &mut Client) -> Result<()> {
    conn.send(&RoundEnvelope::new(0, Message::Hello { client_id: client.id() }))?;
    loop {
        let env = conn.recv()?;
        match env.message {
            Message::Broadcast(broadcast) => match client.train_round(env.round, &broadcast) {
                Ok(update) => {
                    let reply = RoundContribution {
                        client_id: client.id(),
                        update,
                    };
                    conn.send(&RoundEnvelope::new(env.round, Message::Contribution(reply)))?;
                }
                Err(e) => {
                    let _ = conn.send(&RoundEnvelope::new(env.round, Message::Error(e.to_string())));
                    return Err(e.into());
                }
            },
            Message::RoundDone => return Ok(()),
            Message::Error(text) => return Err(Error::Rejected(text)),
            other => {
                return Err(Error::Protocol(format!("unexpected {:?} from server", other.kind())));
            }
        }
    }
}

/// Accepts `count` connections, giving up after `timeout`.
pub fn accept_clients(
    listener: &TcpListener,
    count: usize,
    timeout: Duration,
) -> Result<Vec<StreamConnection<TcpStream>>> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + timeout;
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::debug!("accepted {peer}");
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                out.push(StreamConnection::new(stream));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Protocol(format!(
                        "only {} of {count} clients connected within {timeout:?}",
                        out.len()
                    )));
                }
                std::thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
    listener.set_nonblocking(false)?;
    Ok(out)
}

pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<StreamConnection<TcpStream>> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    Ok(StreamConnection::new(stream))
}

/// Runs a whole federation with every client in this process, talking to
/// the server over `transport`.
pub fn run_federation<F>(
    transport: &Transport,
    state: GlobalState,
    clients: &mut [Client],
    rounds: u32,
    observer: F,
) -> Result<GlobalState>
where
    F: FnMut(&RoundReport<'_>) -> ObserverResult,
{
    match transport {
        Transport::InProcess => {
            let (server_ends, client_ends): (Vec<_>, Vec<_>) = clients.iter().map(|_| channel_pair()).unzip();
            federate(clients, client_ends, |_| Ok(server_ends), state, rounds, observer)
        }
        Transport::Tcp { bind } => {
            let listener = TcpListener::bind(bind.as_str())?;
            let addr: SocketAddr = listener.local_addr()?;
            log::info!("federation server listening on {addr}");
            let count = clients.len();
            federate(
                clients,
                vec![addr; count],
                move |_| accept_clients(&listener, count, ACCEPT_TIMEOUT),
                state,
                rounds,
                observer,
            )
        }
    }
}

/// Produces a client's end of the connection inside its thread.
trait ClientEnd: Send {
    type Conn: Connection;
    fn open(self) -> Result<Self::Conn>;
}

impl ClientEnd for crate::transport::ChannelConnection {
    type Conn = Self;
    fn open(self) -> Result<Self> {
        Ok(self)
    }
}

impl ClientEnd for SocketAddr {
    type Conn = StreamConnection<TcpStream>;
    fn open(self) -> Result<Self::Conn> {
        connect(self)
    }
}

fn federate<E, C, A, F>(
    clients: &mut [Client],
    ends: Vec<E>,
    accept: A,
    state: GlobalState,
    rounds: u32,
    observer: F,
) -> Result<GlobalState>
where
    E: ClientEnd,
    C: Connection,
    A: FnOnce(()) -> Result<Vec<C>>,
    F: FnMut(&RoundReport<'_>) -> ObserverResult,
{
    std::thread::scope(|scope| {
        let handles: Vec<_> = clients
            .iter_mut()
            .zip(ends)
            .map(|(client, end)| {
                scope.spawn(move || {
                    let id = client.id();
                    let mut conn = end.open().map_err(|e| client_error(id, e))?;
                    run_client(&mut conn, client).map_err(|e| client_error(id, e))
                })
            })
            .collect();

        let served = accept(()).and_then(|conns| serve(conns, state, rounds, observer));
        let client_results: Vec<Result<()>> = handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect();
        let state = served?;
        for r in client_results {
            r?;
        }
        Ok(state)
    })
}
