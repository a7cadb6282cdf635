//! Downtime budgets: how many recoveries a year fit into an availability
//! target, for a fast rewind and for a slow restart.
//!
//!     cargo run --example availability

use domain_rewind::resilience::{recovery_budget, replicas_needed, AvailabilityModel};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let target = 0.99999;
    for (label, seconds) in [("rewind", 3.5e-6), ("process restart", 5.0), ("rebuild 10 GB state", 120.0)] {
        println!("{label:>20}: {:>10} recoveries/year within {target}", recovery_budget(target, seconds)?);
    }

    let model = AvailabilityModel::new(3.0, 120.0, target)?;
    println!(
        "3 faults/year at 120 s each: availability {:.7}, {}",
        model.availability(),
        if model.meets_target() { "meets the target" } else { "misses the target" }
    );
    match replicas_needed(model.availability(), target, 16)? {
        Some(n) => println!("independent replicas needed to compensate: {n}"),
        None => println!("no replica count up to 16 reaches the target"),
    }
    Ok(())
}
