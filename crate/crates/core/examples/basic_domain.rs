//! Run code in a domain, crash it, and keep going.
//!
//!     cargo run --example basic_domain

use domain_rewind::marshal::{marshal_return, unmarshal_out};
use domain_rewind::{Domain, DomainContext, DomainOutcome, MarshalledCall};

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

fn sum(_: &mut DomainContext, input: &[u8]) -> Vec<u8> {
    let values: Vec<u64> = unmarshal_out(input).unwrap();
    marshal_return(&values.iter().sum::<u64>())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let domain = Domain::with_defaults()?;
    let arena = domain.arena_region();
    println!(
        "domain {} on the {} backend, arena {:#x}..{:#x}",
        domain.id(),
        domain.backend().kind().name(),
        arena.base(),
        arena.end()
    );

    let call = MarshalledCall::encode("sum", &vec![1u64, 2, 3, 4])?;
    if let DomainOutcome::Completed(bytes) = domain.execute(&call, &sum)? {
        println!("sum = {}", unmarshal_out::<u64>(&bytes)?);
    }

    // One byte past the arena: a guard page.
    let end = domain.arena_region().end();
    let overflow = move |_: &mut DomainContext, _: &[u8]| -> Vec<u8> {
        unsafe { (end as *mut u8).write_volatile(0xff) };
        Vec::new()
    };
    let outcome = domain.execute(&MarshalledCall::from_bytes("overflow", Vec::new()), &overflow)?;
    println!("overflow -> {}", outcome.report().expect("the store faults"));

    // The same domain is usable again, with a fresh arena.
    let call = MarshalledCall::encode("sum", &vec![10u64, 20])?;
    if let DomainOutcome::Completed(bytes) = domain.execute(&call, &sum)? {
        println!("sum after rewind = {}", unmarshal_out::<u64>(&bytes)?);
    }
    domain.destroy()?;
    Ok(())
}
