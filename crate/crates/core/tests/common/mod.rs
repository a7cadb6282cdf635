#![allow(dead_code)]

use std::sync::{Arc, Mutex, MutexGuard};

use domain_rewind::backend::{HardwareBackend, PortableBackend, RecordingBackend};
use domain_rewind::IsolationBackend;

static SERIAL: Mutex<()> = Mutex::new(());

/// Tests share the process key budget and the domain window.
pub fn serial() -> MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|p| p.into_inner())
}

pub fn hardware() -> Option<Arc<dyn IsolationBackend>> {
    HardwareBackend::shared()
}

/// Every enforcing backend available on this machine.
pub fn enforcing() -> Vec<Arc<dyn IsolationBackend>> {
    let mut out: Vec<Arc<dyn IsolationBackend>> = Vec::new();
    if let Some(hw) = hardware() {
        out.push(hw);
    }
    out.push(Arc::new(PortableBackend::new()));
    out
}

pub fn recording() -> Arc<RecordingBackend> {
    Arc::new(RecordingBackend::new())
}

/// FNV-1a, independent of anything in the crate.
pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}
