use std::os::unix::process::ExitStatusExt;
use std::process::Command;

use domain_rewind::{Domain, DomainContext, MarshalledCall};

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

const CHILD_ENV: &str = "DOMAIN_REWIND_ESCALATION_CHILD";

/// Installs the monitor by running one domain call, then faults in trusted
/// code. Only does anything when spawned by `trusted_fault_still_crashes`.
#[test]
fn child_faults_outside_domain() {
    if std::env::var_os(CHILD_ENV).is_none() {
        return;
    }
    let d = Domain::with_defaults().unwrap();
    let noop = |_: &mut DomainContext, _: &[u8]| Vec::new();
    assert!(d.execute(&MarshalledCall::from_bytes("noop", Vec::new()), &noop).unwrap().is_completed());
    assert!(domain_rewind::monitor::monitor_installed());
    let wild = std::hint::black_box(16usize);
    unsafe { (wild as *mut u64).write_volatile(1) };
    unreachable!("the store above must kill the process");
}

#[test]
fn trusted_fault_still_crashes() {
    let status = Command::new(std::env::current_exe().unwrap())
        .args(["--exact", "child_faults_outside_domain", "--test-threads=1", "--nocapture"])
        .env(CHILD_ENV, "1")
        .output()
        .unwrap();
    assert_eq!(
        status.status.signal(),
        Some(libc::SIGSEGV),
        "{:?}\n{}",
        status.status,
        String::from_utf8_lossy(&status.stderr)
    );
}
