use std::process::Command;

use domain_rewind::kv::GuardMode;
use domain_rewind::resilience::{bench_overhead, OverheadConfig};
use serde_json::Value;

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

fn rewind(args: &[&str]) -> (bool, Vec<Value>, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_rewind")).args(args).output().unwrap();
    let stdout = String::from_utf8(out.stdout).unwrap();
    let lines = if args.contains(&"--pretty") {
        Vec::new()
    } else {
        stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
    };
    (out.status.success(), lines, stdout + &String::from_utf8_lossy(&out.stderr))
}

#[test]
fn calc_subcommands() {
    let (ok, v, _) = rewind(&["calc", "budget", "--recovery", "3.5e-6"]);
    assert!(ok);
    assert_eq!(v[0]["max_recoveries_per_year"], 90_102_857);

    let (ok, v, _) = rewind(&["calc", "availability", "--faults", "3", "--recovery", "120"]);
    assert!(ok);
    assert_eq!(v[0]["verdict"], "VIOLATES");
    assert_eq!(v[0]["downtime_seconds"], 360.0);

    let (ok, v, _) = rewind(&["calc", "replicas", "--availability", "0.99", "--target", "0.99999"]);
    assert!(ok);
    assert_eq!(v[0]["replicas_needed"], 3);

    let (ok, _, text) = rewind(&["--pretty", "calc", "budget", "--recovery", "120"]);
    assert!(ok);
    assert!(text.lines().any(|l| l.starts_with("max_recoveries_per_year") && l.trim_end().ends_with(" 2")), "{text}");
}

#[test]
fn bad_input_exits_non_zero() {
    let (ok, _, text) = rewind(&["calc", "budget", "--recovery", "0"]);
    assert!(!ok);
    assert!(text.starts_with("rewind: "), "{text}");
    let (ok, _, _) = rewind(&["bench", "recovery", "--dataset", "3Q"]);
    assert!(!ok);
}

#[test]
fn attack_demo_in_process() {
    let (ok, v, text) = rewind(&["demo", "attack", "--in-process", "--crashme", "10", "--honest", "500"]);
    assert!(ok, "{text}");
    assert_eq!((v[0]["rewinds"].as_u64(), v[0]["honest_errors"].as_u64()), (Some(10), Some(0)));
}

fn quick(guard_mode: GuardMode, baseline_mode: GuardMode) -> f64 {
    let config =
        OverheadConfig { guard_mode, baseline_mode, rounds: 5, requests_per_round: 2000, ..OverheadConfig::default() };
    bench_overhead(&config).unwrap().overhead
}

#[test]
fn overhead_relations() {
    let same = quick(GuardMode::Off, GuardMode::Off);
    assert!(same.abs() < 0.10, "off vs off: {same}");
    let persistent = quick(GuardMode::Persistent, GuardMode::Off);
    let per_call = quick(GuardMode::PerCall, GuardMode::Off);
    assert!(per_call >= persistent, "per-call {per_call} < persistent {persistent}");
}
