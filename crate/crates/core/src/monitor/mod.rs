//! Detection of memory violations inside domains.
//!
//! Three sources feed the same rewind path: protection faults (SIGSEGV or
//! SIGBUS raised while a domain call is active on the faulting thread),
//! stack guard words found modified when a domain returns, and explicit
//! aborts requested by domain code. Faults on threads without an active
//! domain call are handed to whatever handler was installed before ours.

mod fault_path;

use std::fmt;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use thiserror::Error;

use crate::snapshot;

#[cfg(test)]
pub(crate) use fault_path::FAULT_PATH_SOURCE;

/// Abort reason used when domain code panics.
pub const REASON_PANIC: u32 = 0xffff_0001;
/// Abort reason used when domain code exhausts its arena.
pub const REASON_ARENA_EXHAUSTED: u32 = 0xffff_0002;
/// Abort reason used when a domain hands back a result that does not decode
/// or points outside its arena.
pub const REASON_CORRUPT_RESULT: u32 = 0xffff_0003;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ViolationKind {
    ProtectionFault { address: usize },
    CanaryMismatch,
    ExplicitAbort { reason: u32 },
}

impl ViolationKind {
    pub fn name(&self) -> &'static str {
        match self {
            ViolationKind::ProtectionFault { .. } => "protection-fault",
            ViolationKind::CanaryMismatch => "canary-mismatch",
            ViolationKind::ExplicitAbort { .. } => "explicit-abort",
        }
    }
}

/// A detected violation, attributed to the domain that was active on the
/// thread at detection time.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ViolationReport {
    pub kind: ViolationKind,
    pub domain_id: u64,
    pub thread_id: u64,
    /// Monotonic clock, nanoseconds.
    pub timestamp_ns: u64,
}

impl ViolationReport {
    pub(crate) const EMPTY: ViolationReport =
        ViolationReport { kind: ViolationKind::CanaryMismatch, domain_id: 0, thread_id: 0, timestamp_ns: 0 };

    pub(crate) fn new(kind: ViolationKind, domain_id: u64, thread_id: u64) -> Self {
        ViolationReport { kind, domain_id, thread_id, timestamp_ns: monotonic_ns() }
    }

    /// Present exactly for protection faults.
    pub fn faulting_address(&self) -> Option<usize> {
        match self.kind {
            ViolationKind::ProtectionFault { address } => Some(address),
            _ => None,
        }
    }
}

impl fmt::Display for ViolationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} in domain {} on thread {}", self.kind.name(), self.domain_id, self.thread_id)?;
        match self.kind {
            ViolationKind::ProtectionFault { address } => write!(f, " at {address:#x}"),
            ViolationKind::ExplicitAbort { reason } => write!(f, " (reason {reason:#x})"),
            ViolationKind::CanaryMismatch => Ok(()),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MonitorError {
    #[error("another SIGSEGV/SIGBUS disposition conflicts with the violation monitor")]
    HandlerConflict,
    #[error("no domain call is active on this thread")]
    NoActiveDomain,
    #[error("installing the fault handler failed: {0}")]
    Os(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccessKind {
    Read,
    Write,
    Unknown,
}

/// What the fault path knows about a fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultInfo {
    pub address: usize,
    pub access: AccessKind,
    pub thread_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Classification {
    Report(ViolationReport),
    Escalate,
}

/// Attributes a fault on the calling thread to its innermost active domain
/// call. Classification goes by the thread, not the address: the address is
/// kept for diagnostics only. Allocation-free.
pub fn classify(fault: &FaultInfo) -> Classification {
    snapshot::FRAMES.with(|frames| match frames.top() {
        // SAFETY: frames belong to the calling thread.
        Some(top) if unsafe { (*top).valid } => {
            let domain_id = unsafe { (*top).domain_id };
            let thread_id = if fault.thread_id != 0 { fault.thread_id } else { frames.tid() };
            Classification::Report(ViolationReport::new(
                ViolationKind::ProtectionFault { address: fault.address },
                domain_id,
                thread_id,
            ))
        }
        _ => Classification::Escalate,
    })
}

pub(crate) fn monotonic_ns() -> u64 {
    let mut ts = libc::timespec { tv_sec: 0, tv_nsec: 0 };
    // SAFETY: clock_gettime is async-signal-safe and writes only `ts`.
    unsafe { libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts) };
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

static INSTALL: Mutex<()> = Mutex::new(());
static INSTALLED: AtomicBool = AtomicBool::new(false);

const SIGNALS: [libc::c_int; 2] = [libc::SIGSEGV, libc::SIGBUS];

fn current_action(sig: libc::c_int) -> Result<libc::sigaction, MonitorError> {
    // SAFETY: querying a disposition writes only `old`.
    unsafe {
        let mut old: libc::sigaction = std::mem::zeroed();
        if libc::sigaction(sig, std::ptr::null(), &mut old) != 0 {
            return Err(MonitorError::Os(std::io::Error::last_os_error().to_string()));
        }
        Ok(old)
    }
}

/// Arms fault interception for the process. Idempotent. Earlier handlers
/// keep receiving faults that happen outside domains.
pub fn monitor_install() -> Result<(), MonitorError> {
    let _guard = INSTALL.lock().unwrap_or_else(|p| p.into_inner());
    let ours = fault_path::handler_address();
    if INSTALLED.load(Ordering::Acquire) {
        for sig in SIGNALS {
            if current_action(sig)?.sa_sigaction != ours {
                return Err(MonitorError::HandlerConflict);
            }
        }
        return Ok(());
    }
    let mut previous = [None; 2];
    for (i, sig) in SIGNALS.into_iter().enumerate() {
        let old = current_action(sig)?;
        if old.sa_sigaction == libc::SIG_IGN {
            return Err(MonitorError::HandlerConflict);
        }
        previous[i] = Some(old);
    }
    for (i, sig) in SIGNALS.into_iter().enumerate() {
        // SAFETY: the previous disposition is recorded before ours goes live,
        // and our handler only reads it.
        unsafe {
            fault_path::set_previous(i, previous[i].expect("queried above"));
            let mut action: libc::sigaction = std::mem::zeroed();
            action.sa_sigaction = ours;
            action.sa_flags = libc::SA_SIGINFO | libc::SA_ONSTACK;
            libc::sigemptyset(&mut action.sa_mask);
            if libc::sigaction(sig, &action, std::ptr::null_mut()) != 0 {
                return Err(MonitorError::Os(std::io::Error::last_os_error().to_string()));
            }
        }
    }
    install_panic_hook();
    INSTALLED.store(true, Ordering::Release);
    Ok(())
}

/// Silences the panic hook for panics raised on a domain stack. The hook
/// runs before unwinding reaches the domain entry, and a rewind out of the
/// middle of it (say the arena runs out while formatting a backtrace) would
/// leave the thread's panic bookkeeping inconsistent. The violation report
/// already records the panic.
fn install_panic_hook() {
    let previous = std::panic::take_hook();
    std::panic::set_hook(Box::new(move |info| {
        if crate::layout::current_control().is_none() {
            previous(info);
        }
    }));
}

pub fn monitor_installed() -> bool {
    INSTALLED.load(Ordering::Acquire)
}

/// Abandons the innermost domain call on this thread and rewinds it with an
/// explicit-abort report. Returns only when no domain call is active.
pub fn raise_abort(reason: u32) -> MonitorError {
    match snapshot::abort_innermost(reason) {
        Some(never) => match never {},
        None => MonitorError::NoActiveDomain,
    }
}

/// Process-wide violation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MonitorStats {
    pub protection_faults: u64,
    pub escalated_faults: u64,
    /// Calls brought back to their snapshot by a rewind.
    pub rewinds: u64,
    /// Calls that ended in any violation, canary mismatches included.
    pub violations: u64,
}

pub(crate) static REWINDS: AtomicU64 = AtomicU64::new(0);
pub(crate) static VIOLATIONS: AtomicU64 = AtomicU64::new(0);

pub fn stats() -> MonitorStats {
    MonitorStats {
        protection_faults: fault_path::PROTECTION_FAULTS.load(Ordering::Relaxed),
        escalated_faults: fault_path::ESCALATED.load(Ordering::Relaxed),
        rewinds: REWINDS.load(Ordering::Relaxed),
        violations: VIOLATIONS.load(Ordering::Relaxed),
    }
}

const ALTSTACK_BYTES: usize = 64 * 1024;

struct AltStack {
    base: usize,
}

impl Drop for AltStack {
    fn drop(&mut self) {
        // SAFETY: disable before unmapping so no signal lands on freed memory.
        unsafe {
            let mut disable: libc::stack_t = std::mem::zeroed();
            disable.ss_flags = libc::SS_DISABLE;
            let mut current: libc::stack_t = std::mem::zeroed();
            libc::sigaltstack(std::ptr::null(), &mut current);
            if current.ss_sp as usize == self.base + crate::layout::page_size_const() {
                libc::sigaltstack(&disable, std::ptr::null_mut());
            }
            libc::munmap(self.base as *mut libc::c_void, ALTSTACK_BYTES + crate::layout::page_size_const());
        }
    }
}

thread_local! {
    static ALTSTACK_READY: std::cell::Cell<bool> = const { std::cell::Cell::new(false) };
    static ALTSTACK: std::cell::RefCell<Option<AltStack>> = const { std::cell::RefCell::new(None) };
}

/// One-time per-thread setup before the first domain call: an alternate
/// signal stack, and with hardware keys, no kernel-maintained rseq area.
pub(crate) fn prepare_thread() {
    if ALTSTACK_READY.with(|r| r.get()) {
        return;
    }
    if crate::pkru::USABLE.load(Ordering::Relaxed) {
        unregister_rseq();
    }
    ensure_altstack();
    ALTSTACK_READY.with(|r| r.set(true));
}

/// The kernel rewrites a thread's rseq area (untagged TLS) on its way back
/// to user space, under whatever PKRU the thread holds at that moment. Inside
/// a domain that write is denied and the kernel kills the thread with a
/// SIGSEGV no handler can recover from, so threads running domains give up
/// rseq. glibc then answers `sched_getcpu` by system call.
fn unregister_rseq() {
    const RSEQ_FLAG_UNREGISTER: libc::c_int = 1;
    const RSEQ_SIG: u32 = 0x5305_3053;
    static GLIBC_RSEQ: std::sync::OnceLock<Option<(isize, u32)>> = std::sync::OnceLock::new();
    let registration = GLIBC_RSEQ.get_or_init(|| {
        // SAFETY: dlsym lookups of data symbols; the pointers are only read.
        unsafe {
            let offset = libc::dlsym(libc::RTLD_DEFAULT, c"__rseq_offset".as_ptr()) as *const isize;
            let size = libc::dlsym(libc::RTLD_DEFAULT, c"__rseq_size".as_ptr()) as *const u32;
            if offset.is_null() || size.is_null() || *size == 0 {
                return None;
            }
            Some((*offset, *size))
        }
    });
    let Some((offset, size)) = *registration else { return };
    let thread_pointer: usize;
    // SAFETY: reads the TCB self pointer, which x86-64 glibc keeps at fs:0.
    unsafe { std::arch::asm!("mov {}, fs:0", out(reg) thread_pointer, options(nostack, readonly, preserves_flags)) };
    let area = (thread_pointer as isize + offset) as usize;
    // glibc may register a larger area than the feature size it publishes.
    for len in [size.max(32), size] {
        // SAFETY: unregistering this thread's own area with glibc's signature.
        let rc = unsafe { libc::syscall(libc::SYS_rseq, area, len, RSEQ_FLAG_UNREGISTER, RSEQ_SIG) };
        if rc == 0 || std::io::Error::last_os_error().raw_os_error() != Some(libc::EINVAL) {
            break;
        }
    }
}

/// Makes sure the calling thread has an alternate signal stack large enough
/// for the fault path, so faults on an exhausted domain stack still reach it.
fn ensure_altstack() {
    // SAFETY: sigaltstack/mmap calls on memory owned by this thread.
    unsafe {
        let mut current: libc::stack_t = std::mem::zeroed();
        libc::sigaltstack(std::ptr::null(), &mut current);
        let usable = current.ss_flags & libc::SS_DISABLE == 0 && current.ss_size >= ALTSTACK_BYTES / 2;
        if !usable {
            let page = crate::layout::page_size_const();
            let base = libc::mmap(
                std::ptr::null_mut(),
                ALTSTACK_BYTES + page,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_PRIVATE | libc::MAP_ANONYMOUS,
                -1,
                0,
            );
            if base == libc::MAP_FAILED {
                return;
            }
            libc::mprotect(base, page, libc::PROT_NONE);
            let stack = libc::stack_t {
                ss_sp: (base as usize + page) as *mut libc::c_void,
                ss_flags: 0,
                ss_size: ALTSTACK_BYTES,
            };
            if libc::sigaltstack(&stack, std::ptr::null_mut()) != 0 {
                libc::munmap(base, ALTSTACK_BYTES + page);
                return;
            }
            ALTSTACK.with(|a| *a.borrow_mut() = Some(AltStack { base: base as usize }));
        }
    }
}
