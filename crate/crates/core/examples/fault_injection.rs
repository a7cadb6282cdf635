//! Randomized fault injection with a containment tally.
//!
//!     cargo run --example fault_injection [count] [seed]

use std::collections::BTreeMap;

use domain_rewind::backend;
use domain_rewind::inject::FaultInjector;

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let count: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1000);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(1);
    let mut injector = FaultInjector::new(backend::default_backend(), seed)?;
    let before = injector.victim().read_arena(0, 4096)?;

    let mut tally: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for _ in 0..count {
        let plan = injector.random_plan();
        let result = injector.run(&plan)?;
        let entry = tally.entry(format!("{:?}", plan.injection.kind())).or_default();
        entry.0 += 1;
        entry.1 += result.kind_matches() as usize;
        if !result.kind_matches() {
            println!("NOT CONTAINED: {plan:?} -> {:?}", result.report);
        }
    }
    for (kind, (runs, contained)) in &tally {
        println!("{kind:<16} {contained}/{runs} contained");
    }
    let intact = injector.victim().read_arena(0, 4096)? == before;
    println!("victim domain memory intact: {intact}");
    Ok(())
}
