//! Wrapping ordinary functions so that memory faults become errors,
//! fallbacks or retries.
//!
//!     cargo run --example guarded_functions

use domain_rewind::{guard, guarded, DomainContext, GuardPolicy, GuardedFunction};

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

/// Pretends to be a buggy C parser: indexes far past its buffer on input
/// it does not like.
fn parse_header(raw: Vec<u8>) -> Option<(u8, u16)> {
    let (version, len) = (*raw.first()?, u16::from_be_bytes([*raw.get(1)?, *raw.get(2)?]));
    if version > 3 {
        let buf = raw.as_ptr();
        unsafe { buf.add(1 << 40).cast_mut().write_volatile(0) };
    }
    Some((version, len))
}

#[guarded(fallback = |_| String::from("<unprintable>"))]
fn render(bytes: Vec<u8>) -> String {
    if bytes.contains(&0) {
        DomainContext::current().unwrap().abort(1);
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

fn flaky(n: u32) -> u32 {
    let ctx = DomainContext::current().unwrap();
    if ctx.attempt() < 2 {
        ctx.abort(ctx.attempt());
    }
    n * 2
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let parse = guard("parse-header", parse_header, GuardPolicy::persistent())?;
    for raw in [vec![1u8, 0, 42], vec![9, 0, 1], vec![]] {
        match parse.invoke(raw.clone()) {
            Ok(header) => println!("{raw:?} -> {header:?}"),
            Err(e) => println!("{raw:?} -> error: {e}"),
        }
    }

    println!("render -> {:?}", render(b"hello".to_vec())?);
    println!("render -> {:?}", render(b"he\0llo".to_vec())?);

    let retrying = GuardedFunction::builder("flaky", flaky).policy(GuardPolicy::default().with_retries(3)).build()?;
    let inv = retrying.invoke_detailed(21);
    println!("flaky -> {:?} after {} attempts", inv.result, inv.attempts);
    Ok(())
}
