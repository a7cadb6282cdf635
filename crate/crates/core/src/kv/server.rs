//! TCP front end of the key-value service.
//!
//! Connection threads do the byte-level framing. Every request is then
//! parsed by a handler thread inside a guarded domain (one persistent domain
//! per handler thread), and only a successfully parsed command touches the
//! store. A request that corrupts memory while being parsed is rewound and
//! answered with `SERVER_ERROR recovered`; nothing else notices.

use std::collections::HashMap;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::dataset::load_dataset;
use super::protocol::{announced_len, parse_request, KvCommand, ParseError, Verb, MAX_LINE_LEN, MAX_VALUE_LEN};
use super::store::Store;
use crate::backend::{self, IsolationBackend};
use crate::domain::{DomainConfig, DomainContext};
use crate::guard::{DomainMode, GuardError, GuardPolicy, GuardedFunction};
use crate::stats::LatencyStats;

pub const DEFAULT_MAX_CONNS: usize = 64;
pub const DEFAULT_HANDLERS: usize = 4;
pub const DEFAULT_HANDLER_ARENA: usize = 8 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuardMode {
    Persistent,
    PerCall,
    /// Parse directly in the handler thread, for the baseline.
    Off,
}

impl FromStr for GuardMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "persistent" => Ok(GuardMode::Persistent),
            "per-call" => Ok(GuardMode::PerCall),
            "off" => Ok(GuardMode::Off),
            other => Err(format!("unknown guard mode {other:?} (persistent, per-call)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub listen: String,
    pub max_conns: usize,
    pub guard_mode: GuardMode,
    /// Handler threads, each holding one domain (and so one key).
    pub handlers: usize,
    pub arena_bytes: usize,
    /// Defaults to [`backend::default_backend`].
    pub backend: Option<Arc<dyn IsolationBackend>>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            listen: "127.0.0.1:11311".into(),
            max_conns: DEFAULT_MAX_CONNS,
            guard_mode: GuardMode::Persistent,
            handlers: DEFAULT_HANDLERS,
            arena_bytes: DEFAULT_HANDLER_ARENA,
            backend: None,
        }
    }
}

impl ServerConfig {
    pub fn ephemeral() -> Self {
        ServerConfig { listen: "127.0.0.1:0".into(), ..Default::default() }
    }
}

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot listen on {0}: {1}")]
    Bind(String, io::Error),
    #[error("cannot load dataset: {0}")]
    Dataset(io::Error),
    #[error(transparent)]
    Guard(#[from] GuardError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Service counters as reported by `STATS`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ServerStats {
    pub items: u64,
    pub bytes: u64,
    pub rewinds: u64,
    pub requests: u64,
}

/// What crosses into the handler domain: the raw command line and data
/// block exactly as the client sent them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Request {
    #[serde(with = "serde_bytes")]
    pub line: Vec<u8>,
    #[serde(with = "serde_bytes")]
    pub body: Option<Vec<u8>>,
}

/// The untrusted request path. CRASHME makes it store past the end of its
/// heap: inside a domain that lands on the arena's guard page.
pub fn handle_request(request: Request) -> Result<KvCommand, ParseError> {
    let command = parse_request(&request.line, request.body.as_deref())?;
    if command.verb == Verb::Crashme {
        let buffer = [0u8; 64];
        let distance = match DomainContext::current() {
            Some(ctx) => ctx.arena_bounds().1 - buffer.as_ptr() as usize,
            None => 1 << 40,
        };
        // SAFETY: none; this is the injected memory-safety bug.
        unsafe { (buffer.as_ptr() as *mut u8).add(distance).write_volatile(0x41) };
    }
    Ok(command)
}

struct Job {
    request: Request,
    reply: Sender<Vec<u8>>,
}

struct Shared {
    store: Arc<Store>,
    rewinds: AtomicU64,
    requests: AtomicU64,
    shutdown: AtomicBool,
    active: AtomicUsize,
    conns: Mutex<HashMap<u64, TcpStream>>,
    conn_threads: Mutex<Vec<JoinHandle<()>>>,
}

impl Shared {
    fn stats(&self) -> ServerStats {
        let state = self.store.state();
        ServerStats {
            items: state.items,
            bytes: state.bytes,
            rewinds: self.rewinds.load(Ordering::Relaxed),
            requests: self.requests.load(Ordering::Relaxed),
        }
    }
}

type Guarded = GuardedFunction<Request, Result<KvCommand, ParseError>>;

static NEXT_SERVER: AtomicU64 = AtomicU64::new(1);

/// A running server; shut down explicitly or on drop.
pub struct ServerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    config: ServerConfig,
    backend: Arc<dyn IsolationBackend>,
    accept: Option<JoinHandle<()>>,
    handlers: Vec<JoinHandle<()>>,
}

pub struct KvServer;

impl KvServer {
    /// Binds and starts serving `store` in background threads.
    pub fn start(config: ServerConfig, store: Arc<Store>) -> Result<ServerHandle, ServerError> {
        let listener = TcpListener::bind(&config.listen).map_err(|e| ServerError::Bind(config.listen.clone(), e))?;
        let addr = listener.local_addr()?;
        let backend = config.backend.clone().unwrap_or_else(backend::default_backend);
        let guard = match config.guard_mode {
            GuardMode::Off => None,
            mode => {
                let policy = GuardPolicy {
                    domain_mode: if mode == GuardMode::PerCall { DomainMode::PerCall } else { DomainMode::Persistent },
                    ..GuardPolicy::default().with_arena_bytes(config.arena_bytes)
                };
                let id = format!("kv-request-{}", NEXT_SERVER.fetch_add(1, Ordering::Relaxed));
                Some(Arc::new(
                    GuardedFunction::builder(id, handle_request as fn(Request) -> _)
                        .policy(policy)
                        .backend(backend.clone())
                        .build()?,
                ))
            }
        };
        let shared = Arc::new(Shared {
            store,
            rewinds: AtomicU64::new(0),
            requests: AtomicU64::new(0),
            shutdown: AtomicBool::new(false),
            active: AtomicUsize::new(0),
            conns: Mutex::new(HashMap::new()),
            conn_threads: Mutex::new(Vec::new()),
        });

        let (jobs_tx, jobs_rx) = bounded::<Job>(config.max_conns.max(1));
        let mut handlers = Vec::new();
        for i in 0..config.handlers.max(1) {
            let jobs = jobs_rx.clone();
            let shared = shared.clone();
            let guard = guard.clone();
            handlers.push(
                std::thread::Builder::new()
                    .name(format!("kv-handler-{i}"))
                    .spawn(move || handler_loop(jobs, shared, guard))?,
            );
        }
        let accept = {
            let shared = shared.clone();
            let max_conns = config.max_conns.max(1);
            std::thread::Builder::new()
                .name("kv-accept".into())
                .spawn(move || accept_loop(listener, shared, jobs_tx, max_conns))?
        };
        Ok(ServerHandle { addr, shared, config, backend, accept: Some(accept), handlers })
    }
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> ServerStats {
        self.shared.stats()
    }

    pub fn store(&self) -> &Arc<Store> {
        &self.shared.store
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    /// Rewind cycles on a domain configured like the handler domains, run
    /// inside this (loaded) server process.
    pub fn measure_rewind_cycle(&self, iterations: usize) -> LatencyStats {
        let config = DomainConfig::default().with_arena_bytes(self.config.arena_bytes);
        crate::snapshot::measure_rewind_cycle_with(self.backend.clone(), config, iterations)
            .expect("handler domains could be created, so can this one")
    }

    /// Stops accepting, closes every connection and joins all threads.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let Some(accept) = self.accept.take() else { return };
        self.shared.shutdown.store(true, Ordering::SeqCst);
        let mut wake = self.addr;
        if wake.ip().is_unspecified() {
            wake.set_ip([127, 0, 0, 1].into());
        }
        let _ = TcpStream::connect_timeout(&wake, Duration::from_secs(1));
        let _ = accept.join();
        for stream in self.shared.conns.lock().unwrap_or_else(|p| p.into_inner()).values() {
            let _ = stream.shutdown(Shutdown::Both);
        }
        let threads = std::mem::take(&mut *self.shared.conn_threads.lock().unwrap_or_else(|p| p.into_inner()));
        for t in threads {
            let _ = t.join();
        }
        for h in self.handlers.drain(..) {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, jobs: Sender<Job>, max_conns: usize) {
    let mut next_id = 0u64;
    for stream in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            break;
        }
        let Ok(mut stream) = stream else { continue };
        if shared.active.load(Ordering::SeqCst) >= max_conns {
            let _ = stream.write_all(b"SERVER_ERROR too many connections\r\n");
            continue;
        }
        let _ = stream.set_nodelay(true);
        let Ok(registered) = stream.try_clone() else { continue };
        next_id += 1;
        let id = next_id;
        shared.active.fetch_add(1, Ordering::SeqCst);
        shared.conns.lock().unwrap_or_else(|p| p.into_inner()).insert(id, registered);
        let conn_shared = shared.clone();
        let jobs = jobs.clone();
        let spawned = std::thread::Builder::new().name(format!("kv-conn-{id}")).spawn(move || {
            let _ = serve_connection(stream, &jobs);
            conn_shared.conns.lock().unwrap_or_else(|p| p.into_inner()).remove(&id);
            conn_shared.active.fetch_sub(1, Ordering::SeqCst);
        });
        match spawned {
            Ok(handle) => {
                let mut threads = shared.conn_threads.lock().unwrap_or_else(|p| p.into_inner());
                threads.retain(|t| !t.is_finished());
                threads.push(handle);
            }
            Err(_) => {
                shared.conns.lock().unwrap_or_else(|p| p.into_inner()).remove(&id);
                shared.active.fetch_sub(1, Ordering::SeqCst);
            }
        }
    }
}

fn serve_connection(stream: TcpStream, jobs: &Sender<Job>) -> io::Result<()> {
    let mut reader = BufReader::with_capacity(64 * 1024, stream.try_clone()?);
    let mut writer = BufWriter::with_capacity(64 * 1024, stream);
    let (reply_tx, reply_rx) = bounded::<Vec<u8>>(1);
    let mut line = Vec::with_capacity(256);
    loop {
        line.clear();
        let n = (&mut reader).take(MAX_LINE_LEN as u64 + 2).read_until(b'\n', &mut line)?;
        if n == 0 {
            return Ok(());
        }
        if !line.ends_with(b"\r\n") {
            if line.len() > MAX_LINE_LEN {
                writer.write_all(b"SERVER_ERROR line too long\r\n")?;
                writer.flush()?;
            }
            return Ok(());
        }
        line.truncate(line.len() - 2);
        let body = match announced_len(&line) {
            Some(len) if len <= MAX_VALUE_LEN => {
                let mut body = vec![0u8; len + 2];
                reader.read_exact(&mut body)?;
                if !body.ends_with(b"\r\n") {
                    writer.write_all(b"SERVER_ERROR bad data chunk\r\n")?;
                    writer.flush()?;
                    return Ok(());
                }
                body.truncate(len);
                Some(body)
            }
            Some(_) => {
                writer.write_all(b"SERVER_ERROR object too large for cache\r\n")?;
                writer.flush()?;
                return Ok(());
            }
            None => None,
        };
        let job = Job { request: Request { line: line.clone(), body }, reply: reply_tx.clone() };
        if jobs.send(job).is_err() {
            return Ok(());
        }
        let Ok(response) = reply_rx.recv() else { return Ok(()) };
        writer.write_all(&response)?;
        writer.flush()?;
    }
}

fn handler_loop(jobs: Receiver<Job>, shared: Arc<Shared>, guard: Option<Arc<Guarded>>) {
    while let Ok(job) = jobs.recv() {
        let response = process(&shared, guard.as_deref(), job.request);
        let _ = job.reply.send(response);
    }
    if let Some(guard) = guard {
        guard.release_thread_domain();
    }
}

fn process(shared: &Shared, guard: Option<&Guarded>, request: Request) -> Vec<u8> {
    shared.requests.fetch_add(1, Ordering::Relaxed);
    let parsed = match guard {
        Some(guard) => guard.invoke(request),
        None => Ok(handle_request(request)),
    };
    match parsed {
        Err(GuardError::Violation { .. }) => {
            shared.rewinds.fetch_add(1, Ordering::Relaxed);
            b"SERVER_ERROR recovered\r\n".to_vec()
        }
        Err(other) => format!("SERVER_ERROR {other}\r\n").into_bytes(),
        Ok(Err(parse)) => format!("SERVER_ERROR {parse}\r\n").into_bytes(),
        Ok(Ok(command)) => apply(shared, command),
    }
}

/// Runs a parsed command against the store. Trusted code only.
fn apply(shared: &Shared, command: KvCommand) -> Vec<u8> {
    match command.verb {
        Verb::Get => shared.store.with_value(&command.key, |value| match value {
            Some(value) => {
                let mut out = Vec::with_capacity(value.len() + command.key.len() + 32);
                out.extend_from_slice(format!("VALUE {} {}\r\n", command.key, value.len()).as_bytes());
                out.extend_from_slice(value);
                out.extend_from_slice(b"\r\nEND\r\n");
                out
            }
            None => b"END\r\n".to_vec(),
        }),
        Verb::Set => {
            shared.store.set(command.key, command.value.unwrap_or_default());
            b"STORED\r\n".to_vec()
        }
        Verb::Delete => {
            if shared.store.delete(&command.key) {
                b"DELETED\r\n".to_vec()
            } else {
                b"NOT_FOUND\r\n".to_vec()
            }
        }
        Verb::Stats => {
            let s = shared.stats();
            format!(
                "STAT items {}\r\nSTAT bytes {}\r\nSTAT rewinds {}\r\nSTAT requests {}\r\nEND\r\n",
                s.items, s.bytes, s.rewinds, s.requests
            )
            .into_bytes()
        }
        Verb::Crashme => b"SERVER_ERROR crash did not trigger\r\n".to_vec(),
    }
}

static TERMINATE: AtomicBool = AtomicBool::new(false);

extern "C" fn on_terminate(_: libc::c_int) {
    TERMINATE.store(true, Ordering::SeqCst);
}

/// Runs the service in the foreground until SIGINT or SIGTERM. Prints
/// `listening on <addr>` once the dataset is loaded and the socket is ready.
pub fn serve(config: ServerConfig, dataset: Option<&Path>) -> Result<(), ServerError> {
    let store = Arc::new(Store::new());
    if let Some(path) = dataset {
        load_dataset(path, &store).map_err(ServerError::Dataset)?;
    }
    // SAFETY: the handler only stores to an atomic.
    unsafe {
        let handler = on_terminate as extern "C" fn(libc::c_int);
        libc::signal(libc::SIGINT, handler as libc::sighandler_t);
        libc::signal(libc::SIGTERM, handler as libc::sighandler_t);
    }
    let handle = KvServer::start(config, store)?;
    let mut stdout = io::stdout();
    writeln!(stdout, "listening on {}", handle.local_addr())?;
    stdout.flush()?;
    while !TERMINATE.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(20));
    }
    handle.shutdown();
    Ok(())
}
