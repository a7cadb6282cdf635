//! Availability arithmetic and the recovery, overhead and attack benchmarks.

pub mod availability;
pub mod bench;
pub mod demo;

pub use availability::{
    availability, recovery_budget, replica_model, replicas_needed, AvailabilityModel, ModelError, SECONDS_PER_YEAR,
};
pub use bench::{
    bench_overhead, bench_rewind_vs_restart, BenchError, BenchReport, OverheadConfig, OverheadReport,
    RecoveryBenchConfig, RecoveryComparison,
};
pub use demo::{run_attack_demo, AttackConfig, AttackReport};
