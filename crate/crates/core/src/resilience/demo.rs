//! The malicious-client scenario: one client keeps crashing its request
//! handler while another runs an ordinary workload.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use super::bench::{resolve_backend, unix_now, BenchError, ServerProcess};
use crate::backend::BackendKind;
use crate::kv::{GuardMode, KvClient, KvServer, ServerConfig, Store};

#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub crashme_requests: usize,
    pub honest_requests: usize,
    pub guard_mode: GuardMode,
    /// Run the server as a child process of this binary instead of in-process.
    pub server_exe: Option<PathBuf>,
    pub backend: Option<BackendKind>,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            crashme_requests: 100,
            honest_requests: 10_000,
            guard_mode: GuardMode::Persistent,
            server_exe: None,
            backend: None,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AttackReport {
    pub scenario: String,
    pub attacker_requests: usize,
    pub attacker_recovered: usize,
    pub honest_requests: usize,
    /// Failed or wrong answers seen by the honest client.
    pub honest_errors: usize,
    pub rewinds: u64,
    pub pid_before: u32,
    pub pid_after: u32,
    pub server_alive: bool,
    pub elapsed_ms: f64,
    pub timestamp: u64,
}

impl AttackReport {
    pub fn contained(&self) -> bool {
        self.honest_errors == 0
            && self.server_alive
            && self.pid_before == self.pid_after
            && self.attacker_recovered == self.attacker_requests
            && self.rewinds == self.attacker_requests as u64
    }
}

pub fn run_attack_demo(config: &AttackConfig) -> Result<AttackReport, BenchError> {
    match &config.server_exe {
        Some(exe) => {
            let mode = match config.guard_mode {
                GuardMode::PerCall => "per-call",
                _ => "persistent",
            };
            let mut server = ServerProcess::spawn(exe, &["--guard-mode", mode], config.backend)?;
            let pid_before = server.pid();
            let mut report = attack(server.addr(), config)?;
            report.server_alive = server.alive();
            report.pid_before = pid_before;
            report.pid_after = if report.server_alive { server.pid() } else { 0 };
            Ok(report)
        }
        None => {
            let backend = resolve_backend(config.backend)?;
            let server_config =
                ServerConfig { guard_mode: config.guard_mode, backend: Some(backend), ..ServerConfig::ephemeral() };
            let server = KvServer::start(server_config, Arc::new(Store::new()))?;
            let mut report = attack(server.local_addr(), config)?;
            report.server_alive = true;
            report.pid_before = std::process::id();
            report.pid_after = std::process::id();
            server.shutdown();
            Ok(report)
        }
    }
}

fn attack(addr: SocketAddr, config: &AttackConfig) -> Result<AttackReport, BenchError> {
    let start = Instant::now();
    let crashes = config.crashme_requests;
    let attacker = std::thread::spawn(move || -> Result<usize, BenchError> {
        let mut client = KvClient::connect(addr)?;
        let mut recovered = 0;
        for i in 0..crashes {
            if client.crashme(&format!("evil{i}"))? == "SERVER_ERROR recovered" {
                recovered += 1;
            }
        }
        Ok(recovered)
    });

    let mut client = KvClient::connect(addr)?;
    let mut reference: HashMap<String, Vec<u8>> = HashMap::new();
    let mut rng = StdRng::seed_from_u64(config.seed);
    let mut errors = 0;
    for _ in 0..config.honest_requests {
        let key = format!("h{}", rng.gen_range(0..256));
        let ok = match rng.gen_range(0..10) {
            0..=3 => {
                let value: Vec<u8> = (0..rng.gen_range(1..512)).map(|_| rng.gen()).collect();
                let ok = client.set(&key, &value).is_ok();
                reference.insert(key, value);
                ok
            }
            4..=8 => matches!(client.get(&key), Ok(v) if v.as_ref() == reference.get(&key)),
            _ => matches!(client.delete(&key), Ok(existed) if existed == reference.remove(&key).is_some()),
        };
        errors += usize::from(!ok);
    }
    let attacker_recovered = attacker.join().expect("attacker thread panicked")?;
    let rewinds = client.stats()?.get("rewinds").copied().unwrap_or(0);
    Ok(AttackReport {
        scenario: "attack".into(),
        attacker_requests: crashes,
        attacker_recovered,
        honest_requests: config.honest_requests,
        honest_errors: errors,
        rewinds,
        pid_before: 0,
        pid_after: 0,
        server_alive: false,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        timestamp: unix_now(),
    })
}
