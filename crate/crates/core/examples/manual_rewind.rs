//! Taking a snapshot's view from inside a call and rewinding to it by hand,
//! for code that detects its own corruption.
//!
//!     cargo run --example manual_rewind

use domain_rewind::snapshot;
use domain_rewind::{Domain, DomainContext, MarshalledCall, ViolationKind, ViolationReport};

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let domain = Domain::with_defaults()?;
    let checker = |ctx: &mut DomainContext, input: &[u8]| -> Vec<u8> {
        let here = snapshot::current().expect("inside a call");
        let checksum = input.iter().fold(0u8, |a, b| a.wrapping_add(*b));
        if checksum != 0 {
            let report = ViolationReport {
                kind: ViolationKind::ExplicitAbort { reason: checksum as u32 },
                domain_id: ctx.domain_id(),
                thread_id: 0,
                timestamp_ns: 0,
            };
            let stale = snapshot::rewind_to(&here, report);
            unreachable!("live snapshots always rewind: {stale}");
        }
        input.to_vec()
    };
    for input in [vec![1u8, 255], vec![1, 2, 3]] {
        let outcome = domain.execute(&MarshalledCall::from_bytes("check", input.clone()), &checker)?;
        println!("{input:?} -> {outcome:?}");
    }
    println!("epoch after two calls: {}", domain.epoch());
    Ok(())
}
