use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use domain_rewind::backend::BackendKind;
use domain_rewind::kv::{self, GuardMode, ServerConfig};
use domain_rewind::resilience::{self, AttackConfig, AvailabilityModel, OverheadConfig, RecoveryBenchConfig};

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

#[derive(Parser)]
#[command(
    name = "rewind",
    version,
    about = "Rewindable isolation domains: demo service, benchmarks, availability model"
)]
struct Cli {
    /// Print a table instead of JSON lines.
    #[arg(long, global = true)]
    pretty: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Availability arithmetic.
    #[command(subcommand)]
    Calc(Calc),
    /// Recovery and overhead benchmarks.
    #[command(subcommand)]
    Bench(Bench),
    /// Scripted scenarios.
    #[command(subcommand)]
    Demo(Demo),
    /// Run the key-value service until SIGINT or SIGTERM.
    Serve(ServeArgs),
}

#[derive(Subcommand)]
enum Calc {
    /// Availability for a fault rate and recovery time.
    Availability {
        #[arg(long)]
        faults: f64,
        /// Seconds per recovery.
        #[arg(long)]
        recovery: f64,
        #[arg(long, default_value_t = 0.99999)]
        target: f64,
    },
    /// Recoveries per year that fit the downtime budget.
    Budget {
        #[arg(long, default_value_t = 0.99999)]
        target: f64,
        #[arg(long)]
        recovery: f64,
    },
    /// Replicated availability, or replicas needed for a target.
    Replicas {
        /// Single-node availability; or give --faults and --recovery.
        #[arg(long)]
        availability: Option<f64>,
        #[arg(long)]
        faults: Option<f64>,
        #[arg(long)]
        recovery: Option<f64>,
        /// Evaluate this many replicas instead of searching.
        #[arg(long)]
        replicas: Option<u32>,
        #[arg(long, default_value_t = 0.99999)]
        target: f64,
        #[arg(long, default_value_t = 64)]
        max: u32,
    },
}

#[derive(Subcommand)]
enum Bench {
    /// Process restart with a dataset vs in-process rewind.
    Recovery {
        /// Dataset size, with an optional K/M/G (binary) suffix.
        #[arg(long, default_value = "100M", value_parser = parse_size)]
        dataset: u64,
        #[arg(long, default_value_t = 4096)]
        value_len: usize,
        #[arg(long, default_value_t = 5)]
        samples: usize,
        #[arg(long, default_value_t = 10_000)]
        rewind_iterations: usize,
        /// Server binary for the restart samples; defaults to this one.
        #[arg(long)]
        server_exe: Option<PathBuf>,
        #[arg(long)]
        backend: Option<BackendKind>,
    },
    /// Throughput of a guarded server relative to an unguarded one.
    Overhead {
        #[arg(long, default_value = "persistent", value_parser = parse_mode)]
        guard_mode: GuardMode,
        /// Server the guarded one is compared against.
        #[arg(long, default_value = "off", value_parser = parse_mode)]
        baseline: GuardMode,
        #[arg(long, default_value_t = 4)]
        clients: usize,
        #[arg(long, default_value_t = 7)]
        rounds: usize,
        /// Requests per round, split across clients.
        #[arg(long, default_value_t = 4000)]
        requests: usize,
        #[arg(long, default_value_t = 0.9)]
        get_ratio: f64,
        #[arg(long, default_value_t = 1000)]
        keys: usize,
        #[arg(long, default_value_t = 100)]
        value_len: usize,
        #[arg(long)]
        backend: Option<BackendKind>,
    },
}

#[derive(Subcommand)]
enum Demo {
    /// One client sends CRASHME while another runs a checked workload.
    Attack {
        #[arg(long, default_value_t = 100)]
        crashme: usize,
        #[arg(long, default_value_t = 10_000)]
        honest: usize,
        #[arg(long, default_value = "persistent", value_parser = parse_mode)]
        guard_mode: GuardMode,
        /// Host the server in this process instead of a child process.
        #[arg(long)]
        in_process: bool,
        #[arg(long)]
        backend: Option<BackendKind>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:11311")]
    listen: String,
    #[arg(long, default_value_t = kv::server::DEFAULT_MAX_CONNS)]
    max_conns: usize,
    #[arg(long, default_value = "persistent", value_parser = parse_mode)]
    guard_mode: GuardMode,
    /// Parse requests without a domain (overhead baseline).
    #[arg(long)]
    no_guard: bool,
    #[arg(long, default_value_t = kv::server::DEFAULT_HANDLERS)]
    handlers: usize,
    #[arg(long, default_value_t = kv::server::DEFAULT_HANDLER_ARENA)]
    arena_bytes: usize,
    /// Dataset file to load before listening.
    #[arg(long)]
    load: Option<PathBuf>,
    #[arg(long)]
    backend: Option<BackendKind>,
}

fn parse_mode(s: &str) -> Result<GuardMode, String> {
    s.parse()
}

fn parse_size(s: &str) -> Result<u64, String> {
    let s = s.trim();
    let (digits, shift) = match s.char_indices().find(|(_, c)| c.is_ascii_alphabetic()) {
        Some((i, _)) => {
            let shift = match s[i..].to_ascii_uppercase().as_str() {
                "K" | "KB" | "KIB" => 10,
                "M" | "MB" | "MIB" => 20,
                "G" | "GB" | "GIB" => 30,
                other => return Err(format!("unknown size suffix {other:?}")),
            };
            (&s[..i], shift)
        }
        None => (s, 0),
    };
    let n: u64 = digits.trim().parse().map_err(|e| format!("{s:?}: {e}"))?;
    n.checked_shl(shift).filter(|v| v >> shift == n).ok_or_else(|| format!("{s:?} is too large"))
}

fn emit(pretty: bool, value: &impl Serialize) {
    let value = serde_json::to_value(value).expect("reports serialize");
    if pretty {
        let mut rows = Vec::new();
        flatten("", &value, &mut rows);
        let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in rows {
            println!("{k:<width$}  {v}");
        }
        println!();
    } else {
        println!("{value}");
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Vec<(String, String)>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::String(s) => out.push((prefix.to_string(), s.clone())),
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn verdict(meets: bool) -> &'static str {
    if meets {
        "MEETS"
    } else {
        "VIOLATES"
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let pretty = cli.pretty;
    match cli.command {
        Command::Calc(Calc::Availability { faults, recovery, target }) => {
            let model = AvailabilityModel::new(faults, recovery, target)?;
            emit(
                pretty,
                &json!({
                    "calc": "availability",
                    "faults_per_year": faults,
                    "recovery_seconds": recovery,
                    "target": target,
                    "downtime_seconds": model.downtime_seconds(),
                    "availability": model.availability(),
                    "verdict": verdict(model.meets_target()),
                }),
            );
        }
        Command::Calc(Calc::Budget { target, recovery }) => {
            let budget = resilience::recovery_budget(target, recovery)?;
            emit(
                pretty,
                &json!({
                    "calc": "budget",
                    "target": target,
                    "recovery_seconds": recovery,
                    "seconds_per_year": resilience::SECONDS_PER_YEAR,
                    "max_recoveries_per_year": budget,
                }),
            );
        }
        Command::Calc(Calc::Replicas { availability, faults, recovery, replicas, target, max }) => {
            let single = match (availability, faults, recovery) {
                (Some(a), _, _) => a,
                (None, Some(f), Some(r)) => AvailabilityModel::new(f, r, target)?.availability(),
                _ => return Err("give --availability, or --faults and --recovery".into()),
            };
            let mut report = json!({ "calc": "replicas", "single_node_availability": single, "target": target });
            match replicas {
                Some(n) => {
                    let a = resilience::replica_model(single, n)?;
                    report["replicas"] = json!(n);
                    report["system_availability"] = json!(a);
                    report["verdict"] = json!(verdict(a >= target));
                }
                None => report["replicas_needed"] = json!(resilience::replicas_needed(single, target, max)?),
            }
            emit(pretty, &report);
        }
        Command::Bench(Bench::Recovery { dataset, value_len, samples, rewind_iterations, server_exe, backend }) => {
            let exe = match server_exe {
                Some(p) => p,
                None => std::env::current_exe()?,
            };
            let config = RecoveryBenchConfig {
                value_len,
                restart_samples: samples,
                rewind_iterations,
                backend,
                ..RecoveryBenchConfig::new(exe, dataset)
            };
            let cmp = resilience::bench_rewind_vs_restart(&config)?;
            emit(pretty, &cmp.restart);
            emit(pretty, &cmp.rewind);
            emit(pretty, &json!({ "scenario": "recovery-ratio", "dataset_bytes": dataset, "ratio": cmp.ratio }));
        }
        Command::Bench(Bench::Overhead {
            guard_mode,
            baseline,
            clients,
            rounds,
            requests,
            get_ratio,
            keys,
            value_len,
            backend,
        }) => {
            let config = OverheadConfig {
                guard_mode,
                baseline_mode: baseline,
                clients,
                rounds,
                requests_per_round: requests,
                get_ratio,
                keys,
                value_len,
                backend,
                ..OverheadConfig::default()
            };
            emit(pretty, &resilience::bench_overhead(&config)?);
        }
        Command::Demo(Demo::Attack { crashme, honest, guard_mode, in_process, backend }) => {
            let config = AttackConfig {
                crashme_requests: crashme,
                honest_requests: honest,
                guard_mode,
                server_exe: if in_process { None } else { Some(std::env::current_exe()?) },
                backend,
                ..AttackConfig::default()
            };
            let report = resilience::run_attack_demo(&config)?;
            emit(pretty, &report);
            if !report.contained() {
                return Err("the attack was not contained".into());
            }
        }
        Command::Serve(args) => {
            let config = ServerConfig {
                listen: args.listen,
                max_conns: args.max_conns,
                guard_mode: if args.no_guard { GuardMode::Off } else { args.guard_mode },
                handlers: args.handlers,
                arena_bytes: args.arena_bytes,
                backend: args.backend.map(domain_rewind::backend::open).transpose()?,
            };
            kv::serve(config, args.load.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rewind: {e}");
            ExitCode::FAILURE
        }
    }
}
