//! Times full abort-and-rewind cycles.
//!
//!     cargo run --release --example rewind_latency [iterations]

use domain_rewind::backend::{self, PortableBackend};
use domain_rewind::snapshot::measure_rewind_cycle_with;
use domain_rewind::DomainConfig;

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let iterations = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(100_000);
    let mut backends = vec![backend::default_backend()];
    if backends[0].kind() != backend::BackendKind::Portable {
        backends.push(std::sync::Arc::new(PortableBackend::new()));
    }
    for b in backends {
        let kind = b.kind();
        let stats = measure_rewind_cycle_with(b, DomainConfig::default(), iterations)?;
        println!(
            "{:>9}: mean {:.2} us, p50 {:.2} us, p99 {:.2} us over {} cycles",
            kind.name(),
            stats.mean_ns / 1e3,
            stats.p50_ns / 1e3,
            stats.p99_ns / 1e3,
            stats.samples
        );
    }
    Ok(())
}
