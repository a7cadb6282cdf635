//! Recovery and overhead benchmarks against the key-value service.

use std::io::{BufRead, BufReader};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;
use thiserror::Error;

use crate::backend::{self, BackendKind, IsolationBackend, IsolationError, BACKEND_ENV};
use crate::kv::dataset::{load_dataset, write_dataset};
use crate::kv::{ClientError, GuardMode, KvClient, KvServer, ServerConfig, ServerError, Store};
use crate::stats::LatencyStats;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("server process: {0}")]
    Spawn(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    Isolation(#[from] IsolationError),
    #[error(transparent)]
    Domain(#[from] crate::DomainError),
    #[error("workload check failed: {0}")]
    Workload(String),
}

/// One latency distribution, as emitted on a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub scenario: String,
    pub samples: usize,
    pub p50_ns: f64,
    pub p99_ns: f64,
    pub mean_ns: f64,
    pub dataset_bytes: u64,
    pub machine: String,
    pub timestamp: u64,
}

impl BenchReport {
    pub fn new(scenario: &str, stats: &LatencyStats, dataset_bytes: u64, backend: BackendKind) -> BenchReport {
        BenchReport {
            scenario: scenario.to_string(),
            samples: stats.samples,
            p50_ns: stats.p50_ns,
            p99_ns: stats.p99_ns,
            mean_ns: stats.mean_ns,
            dataset_bytes,
            machine: machine_note(backend),
            timestamp: unix_now(),
        }
    }
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Kernel, CPU count and isolation backend, for the report.
pub fn machine_note(backend: BackendKind) -> String {
    // SAFETY: uname fills the zeroed struct.
    let release = unsafe {
        let mut u: libc::utsname = std::mem::zeroed();
        if libc::uname(&mut u) == 0 {
            std::ffi::CStr::from_ptr(u.release.as_ptr()).to_string_lossy().into_owned()
        } else {
            "unknown".into()
        }
    };
    let cpus = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{} linux {release}, {cpus} cpu, {} backend", std::env::consts::ARCH, backend.name())
}

#[derive(Debug, Clone)]
pub struct RecoveryBenchConfig {
    /// The `rewind` binary, started once per restart sample.
    pub server_exe: PathBuf,
    pub dataset_bytes: u64,
    pub value_len: usize,
    pub restart_samples: usize,
    pub rewind_iterations: usize,
    pub backend: Option<BackendKind>,
}

impl RecoveryBenchConfig {
    pub fn new(server_exe: impl Into<PathBuf>, dataset_bytes: u64) -> Self {
        RecoveryBenchConfig {
            server_exe: server_exe.into(),
            dataset_bytes,
            value_len: 4096,
            restart_samples: 5,
            rewind_iterations: 10_000,
            backend: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RecoveryComparison {
    pub restart: BenchReport,
    pub rewind: BenchReport,
    /// Mean restart latency over mean rewind latency.
    pub ratio: f64,
}

/// A dataset file in the temp directory, removed on drop.
pub struct TempDataset {
    path: PathBuf,
    pub records: u64,
}

impl TempDataset {
    pub fn create(total_bytes: u64, value_len: usize) -> std::io::Result<TempDataset> {
        static NEXT: AtomicU64 = AtomicU64::new(0);
        let path = std::env::temp_dir().join(format!(
            "rewind-dataset-{}-{}.bin",
            std::process::id(),
            NEXT.fetch_add(1, Ordering::Relaxed)
        ));
        let records = write_dataset(&path, total_bytes, value_len)?;
        Ok(TempDataset { path, records })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for TempDataset {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// A `rewind serve` child process; killed on drop.
pub struct ServerProcess {
    child: Child,
    addr: SocketAddr,
}

impl ServerProcess {
    /// Starts the server and waits for its `listening on` line.
    pub fn spawn(exe: &Path, extra_args: &[&str], backend: Option<BackendKind>) -> Result<ServerProcess, BenchError> {
        let mut cmd = Command::new(exe);
        cmd.args(["serve", "--listen", "127.0.0.1:0"]).args(extra_args);
        cmd.stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::inherit());
        if let Some(kind) = backend {
            cmd.env(BACKEND_ENV, kind.name());
        }
        let mut child = cmd.spawn().map_err(|e| BenchError::Spawn(format!("{}: {e}", exe.display())))?;
        let stdout = child.stdout.take().expect("stdout is piped");
        let mut line = String::new();
        let mut reader = BufReader::new(stdout);
        loop {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                let status = child.wait()?;
                return Err(BenchError::Spawn(format!("exited with {status} before listening")));
            }
            if let Some(addr) = line.trim().strip_prefix("listening on ") {
                let addr = addr.parse().map_err(|e| BenchError::Spawn(format!("bad address {addr:?}: {e}")))?;
                return Ok(ServerProcess { child, addr });
            }
        }
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    /// `true` while the process has not exited.
    pub fn alive(&mut self) -> bool {
        matches!(self.child.try_wait(), Ok(None))
    }
}

impl Drop for ServerProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Restart: a fresh server process loads the dataset and answers its first
/// GET. Rewind: abort-and-rewind cycles inside a server holding the same
/// dataset.
pub fn bench_rewind_vs_restart(config: &RecoveryBenchConfig) -> Result<RecoveryComparison, BenchError> {
    let dataset = TempDataset::create(config.dataset_bytes, config.value_len)?;
    let probe_key = if dataset.records > 0 { "key:0" } else { "absent" };
    let path = dataset.path().to_str().ok_or_else(|| BenchError::Spawn("temp path is not UTF-8".into()))?;

    let mut restarts = Vec::with_capacity(config.restart_samples.max(1));
    for _ in 0..config.restart_samples.max(1) {
        let start = Instant::now();
        let server = ServerProcess::spawn(&config.server_exe, &["--load", path], config.backend)?;
        let value = KvClient::connect(server.addr())?.get(probe_key)?;
        let elapsed = start.elapsed();
        if (dataset.records > 0) != value.is_some() {
            return Err(BenchError::Workload(format!(
                "first GET of {probe_key} returned {:?}",
                value.map(|v| v.len())
            )));
        }
        restarts.push(elapsed);
        drop(server);
    }

    let backend = resolve_backend(config.backend)?;
    let store = Arc::new(Store::new());
    load_dataset(dataset.path(), &store)?;
    let server = KvServer::start(ServerConfig { backend: Some(backend.clone()), ..ServerConfig::ephemeral() }, store)?;
    let rewind = server.measure_rewind_cycle(config.rewind_iterations.max(1));
    server.shutdown();

    let restart = LatencyStats::from_durations(&restarts).expect("at least one restart");
    let kind = backend.kind();
    Ok(RecoveryComparison {
        ratio: restart.mean_ns / rewind.mean_ns,
        restart: BenchReport::new("restart", &restart, config.dataset_bytes, kind),
        rewind: BenchReport::new("rewind", &rewind, config.dataset_bytes, kind),
    })
}

pub fn resolve_backend(kind: Option<BackendKind>) -> Result<Arc<dyn IsolationBackend>, BenchError> {
    Ok(match kind {
        Some(kind) => backend::open(kind)?,
        None => backend::default_backend(),
    })
}

#[derive(Debug, Clone)]
pub struct OverheadConfig {
    pub guard_mode: GuardMode,
    /// What the guarded server is compared against, normally `Off`.
    pub baseline_mode: GuardMode,
    pub clients: usize,
    pub rounds: usize,
    pub requests_per_round: usize,
    /// Fraction of GETs; the rest are SETs.
    pub get_ratio: f64,
    pub keys: usize,
    pub value_len: usize,
    pub handlers: usize,
    pub backend: Option<BackendKind>,
}

impl Default for OverheadConfig {
    fn default() -> Self {
        OverheadConfig {
            guard_mode: GuardMode::Persistent,
            baseline_mode: GuardMode::Off,
            clients: 4,
            rounds: 7,
            requests_per_round: 4000,
            get_ratio: 0.9,
            keys: 1000,
            value_len: 100,
            handlers: 4,
            backend: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OverheadReport {
    pub scenario: String,
    pub guard_mode: String,
    pub baseline_mode: String,
    pub clients: usize,
    pub rounds: usize,
    pub requests_per_round: usize,
    pub get_ratio: f64,
    /// Median over rounds, requests per second.
    pub guarded_ops_per_sec: f64,
    pub baseline_ops_per_sec: f64,
    /// Median over rounds of `1 - guarded / baseline`.
    pub overhead: f64,
    pub round_overheads: Vec<f64>,
    pub machine: String,
    pub timestamp: u64,
}

fn mode_name(mode: GuardMode) -> &'static str {
    match mode {
        GuardMode::Persistent => "persistent",
        GuardMode::PerCall => "per-call",
        GuardMode::Off => "off",
    }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Drives the same seeded GET/SET mix against a guarded and a baseline
/// server, alternating which goes first each round.
pub fn bench_overhead(config: &OverheadConfig) -> Result<OverheadReport, BenchError> {
    let backend = resolve_backend(config.backend)?;
    let start = |mode: GuardMode| -> Result<_, BenchError> {
        let store = Arc::new(Store::new());
        for k in 0..config.keys {
            store.set(format!("k{k}"), vec![b'v'; config.value_len]);
        }
        let server_config = ServerConfig {
            guard_mode: mode,
            handlers: config.handlers,
            max_conns: config.clients.max(1) + 4,
            backend: Some(backend.clone()),
            ..ServerConfig::ephemeral()
        };
        Ok(KvServer::start(server_config, store)?)
    };
    let guarded = start(config.guard_mode)?;
    let baseline = start(config.baseline_mode)?;

    // Warm both servers (connections, handler domains, caches).
    run_workload(guarded.local_addr(), config, u64::MAX)?;
    run_workload(baseline.local_addr(), config, u64::MAX)?;

    let mut guarded_rates = Vec::new();
    let mut baseline_rates = Vec::new();
    let mut overheads = Vec::new();
    for round in 0..config.rounds.max(1) {
        let seed = round as u64;
        let (g, b) = if round % 2 == 0 {
            let g = run_workload(guarded.local_addr(), config, seed)?;
            (g, run_workload(baseline.local_addr(), config, seed)?)
        } else {
            let b = run_workload(baseline.local_addr(), config, seed)?;
            (run_workload(guarded.local_addr(), config, seed)?, b)
        };
        guarded_rates.push(g);
        baseline_rates.push(b);
        overheads.push(1.0 - g / b);
    }
    Ok(OverheadReport {
        scenario: "overhead".into(),
        guard_mode: mode_name(config.guard_mode).into(),
        baseline_mode: mode_name(config.baseline_mode).into(),
        clients: config.clients,
        rounds: overheads.len(),
        requests_per_round: config.requests_per_round,
        get_ratio: config.get_ratio,
        guarded_ops_per_sec: median(&guarded_rates),
        baseline_ops_per_sec: median(&baseline_rates),
        overhead: median(&overheads),
        round_overheads: overheads,
        machine: machine_note(backend.kind()),
        timestamp: unix_now(),
    })
}

/// Runs one round and returns requests per second.
fn run_workload(addr: SocketAddr, config: &OverheadConfig, seed: u64) -> Result<f64, BenchError> {
    let clients = config.clients.max(1);
    let per_client = (config.requests_per_round / clients).max(1);
    let mut connections = (0..clients).map(|_| KvClient::connect(addr)).collect::<Result<Vec<_>, _>>()?;
    let start = Instant::now();
    let results: Vec<Result<(), BenchError>> = std::thread::scope(|s| {
        let handles: Vec<_> = connections
            .iter_mut()
            .enumerate()
            .map(|(i, client)| {
                s.spawn(move || {
                    let mut rng = StdRng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(i as u64));
                    let value = vec![b'w'; config.value_len];
                    for _ in 0..per_client {
                        let key = format!("k{}", rng.gen_range(0..config.keys.max(1)));
                        if rng.gen_bool(config.get_ratio.clamp(0.0, 1.0)) {
                            client.get(&key)?.ok_or_else(|| BenchError::Workload(format!("{key} missing")))?;
                        } else {
                            client.set(&key, &value)?;
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("workload thread panicked")).collect()
    });
    let elapsed = start.elapsed().max(Duration::from_nanos(1));
    results.into_iter().collect::<Result<Vec<()>, _>>()?;
    Ok((per_client * clients) as f64 / elapsed.as_secs_f64())
}
