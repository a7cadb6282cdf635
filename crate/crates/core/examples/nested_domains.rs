//! A domain calling into another domain. The inner one fails; the outer one
//! sees an ordinary return value.
//!
//!     cargo run --example nested_domains

use domain_rewind::marshal::{marshal_return, unmarshal_out};
use domain_rewind::{snapshot, Domain, DomainConfig, DomainContext, DomainOutcome, MarshalledCall};

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let outer = Domain::with_defaults()?;
    let inner = Domain::create(outer.backend().clone(), DomainConfig::default().with_arena_bytes(256 * 1024))?;

    let plugin = |ctx: &mut DomainContext, input: &[u8]| -> Vec<u8> {
        let n: u32 = unmarshal_out(input).unwrap();
        let depth = snapshot::live_snapshots().len();
        if n.is_multiple_of(3) {
            ctx.abort(n);
        }
        marshal_return(&format!("plugin handled {n} at depth {depth}"))
    };
    let host = |_: &mut DomainContext, _: &[u8]| -> Vec<u8> {
        let mut lines = Vec::new();
        for n in 1..=6u32 {
            let call = MarshalledCall::encode("plugin", &n).unwrap();
            lines.push(match inner.execute(&call, &plugin).unwrap() {
                DomainOutcome::Completed(bytes) => unmarshal_out::<String>(&bytes).unwrap(),
                DomainOutcome::Violated(report) => format!("plugin failed: {report}"),
            });
        }
        marshal_return(&lines)
    };
    match outer.execute(&MarshalledCall::from_bytes("host", Vec::new()), &host)? {
        DomainOutcome::Completed(bytes) => {
            for line in unmarshal_out::<Vec<String>>(&bytes)? {
                println!("{line}");
            }
        }
        DomainOutcome::Violated(report) => println!("host failed: {report}"),
    }
    Ok(())
}
