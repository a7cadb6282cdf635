//! What isolation this machine offers.
//!
//!     cargo run --example backend_probe

use domain_rewind::backend::{self, BackendKind, HardwareBackend};
use domain_rewind::domain_window;

fn main() {
    println!("hardware protection keys: {}", if HardwareBackend::available() { "yes" } else { "no" });
    println!(
        "default backend: {} (override with {}=portable)",
        backend::default_backend().kind().name(),
        backend::BACKEND_ENV
    );
    for kind in [BackendKind::Hardware, BackendKind::Portable, BackendKind::Record] {
        match backend::open(kind) {
            Ok(b) => {
                let caps = b.capabilities();
                println!("  {:<9} keys {:>3}, switch by {:?}", kind.name(), caps.max_keys, caps.switch_cost_class);
            }
            Err(e) => println!("  {:<9} unavailable: {e}", kind.name()),
        }
    }
    let w = domain_window();
    println!("domain window {:#x}..{:#x}, page size {}", w.base(), w.end(), backend::page_size());
}
