//! Code that runs inside the SIGSEGV/SIGBUS handler.
//!
//! Only async-signal-safe facilities: thread-local frames with constant
//! initializers, atomics, `sigaction`, `raise` and `clock_gettime`. No heap,
//! no locks. A unit test scans this file for forbidden constructs.

use std::cell::UnsafeCell;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{classify, AccessKind, Classification, FaultInfo};
use crate::snapshot::{domain_rewind_resume, Pending, FRAMES};

#[cfg(test)]
pub(crate) const FAULT_PATH_SOURCE: &str = include_str!("fault_path.rs");

pub(super) static PROTECTION_FAULTS: AtomicU64 = AtomicU64::new(0);
pub(super) static ESCALATED: AtomicU64 = AtomicU64::new(0);

struct Previous(UnsafeCell<[libc::sigaction; 2]>);

// SAFETY: written only by `monitor_install` (serialized) before the handler
// that reads it is registered.
unsafe impl Sync for Previous {}

// SAFETY: sigaction is plain old data; all-zero is SIG_DFL.
static PREVIOUS: Previous = Previous(UnsafeCell::new(unsafe { std::mem::zeroed() }));

pub(super) unsafe fn set_previous(index: usize, action: libc::sigaction) {
    (*PREVIOUS.0.get())[index] = action;
}

pub(super) fn handler_address() -> libc::sighandler_t {
    on_fault as unsafe extern "C" fn(libc::c_int, *mut libc::siginfo_t, *mut libc::c_void) as libc::sighandler_t
}

const SEGV_ACCERR: i32 = 2;
const SEGV_PKUERR: i32 = 4;

unsafe extern "C" fn on_fault(sig: libc::c_int, info: *mut libc::siginfo_t, context: *mut libc::c_void) {
    let address = if info.is_null() { 0 } else { (*info).si_addr() as usize };
    let code = if info.is_null() { 0 } else { (*info).si_code };
    let access = if code == SEGV_PKUERR || code == SEGV_ACCERR { AccessKind::Unknown } else { AccessKind::Read };
    let fault = FaultInfo { address, access, thread_id: 0 };

    let report = match classify(&fault) {
        Classification::Report(report) => report,
        Classification::Escalate => {
            ESCALATED.fetch_add(1, Ordering::Relaxed);
            chain(sig, info, context);
            return;
        }
    };

    let target = FRAMES.with(|frames| {
        let top = frames.top()?;
        let frame = &mut *top;
        frame.pending = Pending { set: true, report };
        frame.valid = false;
        Some((frame.saved_sp, frame.use_pkru))
    });
    let Some((saved_sp, use_pkru)) = target else {
        chain(sig, info, context);
        return;
    };

    PROTECTION_FAULTS.fetch_add(1, Ordering::Relaxed);

    // Resume at the recovery trampoline on the caller's stack instead of
    // jumping out of the handler; sigreturn then restores the signal mask.
    let uc = context as *mut libc::ucontext_t;
    let gregs = &mut (*uc).uc_mcontext.gregs;
    gregs[libc::REG_RSP as usize] = saved_sp as i64;
    gregs[libc::REG_RIP as usize] = domain_rewind_resume as *const () as usize as i64;
    gregs[libc::REG_RDI as usize] = use_pkru as i64;
}

unsafe fn chain(sig: libc::c_int, info: *mut libc::siginfo_t, context: *mut libc::c_void) {
    let index = if sig == libc::SIGBUS { 1 } else { 0 };
    let previous = (*PREVIOUS.0.get())[index];
    let handler = previous.sa_sigaction;
    if handler == libc::SIG_DFL || handler == libc::SIG_IGN {
        // Restore the default action; a hardware fault re-executes and now
        // kills the process, a sent signal is raised again.
        let mut default: libc::sigaction = std::mem::zeroed();
        default.sa_sigaction = libc::SIG_DFL;
        libc::sigaction(sig, &default, std::ptr::null_mut());
        if !info.is_null() && (*info).si_code <= 0 {
            libc::raise(sig);
        }
        return;
    }
    if previous.sa_flags & libc::SA_SIGINFO != 0 {
        let f: unsafe extern "C" fn(libc::c_int, *mut libc::siginfo_t, *mut libc::c_void) =
            std::mem::transmute(handler);
        f(sig, info, context);
    } else {
        let f: unsafe extern "C" fn(libc::c_int) = std::mem::transmute(handler);
        f(sig);
    }
}
