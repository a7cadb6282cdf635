//! Execution snapshots at the domain-call boundary and the rewind back to them.
//!
//! A snapshot is the caller's callee-saved registers, pushed on the caller's
//! own stack by [`enter`], plus the stack pointer at that moment. Nothing of
//! the caller's memory is copied: the key scheme already keeps the domain
//! from touching it. Rewinding means pointing the stack back at the saved
//! registers and returning from `enter` a second time with the recovery
//! flag set. The fault path does this by editing the interrupted context,
//! `raise_abort` by jumping directly.

use std::arch::global_asm;
use std::cell::{Cell, UnsafeCell};
use std::sync::atomic::{compiler_fence, Ordering};
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;
use thiserror::Error;

use crate::backend::{EntrySwitch, IsolationBackend};
use crate::domain::{Domain, DomainConfig, DomainContext, DomainError};
use crate::marshal::MarshalledCall;
use crate::monitor::{ViolationKind, ViolationReport};
use crate::stats::LatencyStats;

/// Deepest nesting of domain calls one thread can hold.
pub const MAX_FRAMES: usize = 8;

global_asm!(
    r#"
    .text
    .p2align 4
    .globl domain_rewind_enter
    .type domain_rewind_enter,@function
domain_rewind_enter:
    push rbp
    push rbx
    push r12
    push r13
    push r14
    push r15
    mov [rdi], rsp
    mov r12, rdi
    mov r13d, r9d
    mov rbx, rsi
    mov rsp, rcx
    mov rdi, rdx
    test r13d, r13d
    jz 2f
    mov eax, r8d
    xor ecx, ecx
    xor edx, edx
    wrpkru
2:
    call rbx
    test r13d, r13d
    jz 3f
    xor eax, eax
    xor ecx, ecx
    xor edx, edx
    wrpkru
3:
    mov rsp, [r12]
    xor eax, eax
    pop r15
    pop r14
    pop r13
    pop r12
    pop rbx
    pop rbp
    ret
    .size domain_rewind_enter, .-domain_rewind_enter

    .p2align 4
    .globl domain_rewind_resume
    .type domain_rewind_resume,@function
domain_rewind_resume:
    test edi, edi
    jz 4f
    xor eax, eax
    xor ecx, ecx
    xor edx, edx
    wrpkru
4:
    mov eax, 1
    pop r15
    pop r14
    pop r13
    pop r12
    pop rbx
    pop rbp
    ret
    .size domain_rewind_resume, .-domain_rewind_resume

    .p2align 4
    .globl domain_rewind_jump
    .type domain_rewind_jump,@function
domain_rewind_jump:
    mov rsp, rdi
    mov edi, esi
    jmp domain_rewind_resume
    .size domain_rewind_jump, .-domain_rewind_jump
"#
);

extern "C" {
    /// Saves callee-saved registers and the stack pointer into `saved_sp`,
    /// switches to `stack_top`, optionally writes `pkru`, and calls
    /// `entry(arg)`. Returns 0 when `entry` returns and 1 when execution was
    /// rewound to this boundary.
    fn domain_rewind_enter(
        saved_sp: *mut usize,
        entry: unsafe extern "C" fn(*mut u8),
        arg: *mut u8,
        stack_top: usize,
        pkru: u32,
        use_pkru: u32,
    ) -> u64;

    /// Recovery landing point. Expects the stack pointer at a saved snapshot
    /// and `edi` nonzero when PKRU must be opened before touching it.
    pub(crate) fn domain_rewind_resume();

    fn domain_rewind_jump(saved_sp: usize, use_pkru: u32) -> !;
}

/// Violation recorded on the fault or abort path, picked up after the rewind.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub(crate) struct Pending {
    pub set: bool,
    pub report: ViolationReport,
}

/// One live domain call on this thread. `saved_sp` must stay the first
/// field: the entry trampoline stores into it by address.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub(crate) struct Frame {
    pub saved_sp: usize,
    pub epoch: u64,
    pub domain_id: u64,
    pub slot: u32,
    pub use_pkru: u32,
    pub valid: bool,
    pub pending: Pending,
}

impl Frame {
    const EMPTY: Frame = Frame {
        saved_sp: 0,
        epoch: 0,
        domain_id: 0,
        slot: 0,
        use_pkru: 0,
        valid: false,
        pending: Pending { set: false, report: ViolationReport::EMPTY },
    };
}

/// Per-thread registry of active domain calls. Const-initialized and free of
/// destructors, so the fault path can reach it without allocating.
pub(crate) struct ThreadFrames {
    depth: Cell<usize>,
    tid: Cell<u64>,
    frames: [UnsafeCell<Frame>; MAX_FRAMES],
}

impl ThreadFrames {
    const fn new() -> Self {
        ThreadFrames {
            depth: Cell::new(0),
            tid: Cell::new(0),
            frames: [const { UnsafeCell::new(Frame::EMPTY) }; MAX_FRAMES],
        }
    }

    pub(crate) fn depth(&self) -> usize {
        self.depth.get()
    }

    pub(crate) fn tid(&self) -> u64 {
        self.tid.get()
    }

    /// Innermost live frame.
    pub(crate) fn top(&self) -> Option<*mut Frame> {
        let depth = self.depth.get();
        (depth > 0 && depth <= MAX_FRAMES).then(|| self.frames[depth - 1].get())
    }

    pub(crate) fn frame(&self, index: usize) -> Option<Frame> {
        // SAFETY: frames are only touched by their own thread.
        (index < self.depth.get()).then(|| unsafe { *self.frames[index].get() })
    }
}

thread_local! {
    pub(crate) static FRAMES: ThreadFrames = const { ThreadFrames::new() };
}

pub(crate) fn current_tid() -> u64 {
    FRAMES.with(|f| {
        if f.tid.get() == 0 {
            // SAFETY: gettid has no preconditions.
            f.tid.set(unsafe { libc::syscall(libc::SYS_gettid) } as u64);
        }
        f.tid.get()
    })
}

pub(crate) fn depth() -> usize {
    FRAMES.with(|f| f.depth())
}

/// Domain id of the innermost active call on this thread.
pub(crate) fn active_domain() -> Option<u64> {
    FRAMES.with(|f| f.top().map(|frame| unsafe { (*frame).domain_id }))
}

/// Registers a new innermost call. Returns `None` when the thread already
/// holds [`MAX_FRAMES`] calls.
pub(crate) fn push_frame(domain_id: u64, slot: u32, epoch: u64, use_pkru: bool) -> Option<*mut Frame> {
    current_tid();
    FRAMES.with(|f| {
        let depth = f.depth.get();
        if depth >= MAX_FRAMES {
            return None;
        }
        let frame = f.frames[depth].get();
        // SAFETY: the slot above the current depth is unused.
        unsafe {
            frame.write(Frame {
                saved_sp: 0,
                epoch,
                domain_id,
                slot,
                use_pkru: use_pkru as u32,
                valid: true,
                pending: Pending { set: false, report: ViolationReport::EMPTY },
            });
        }
        compiler_fence(Ordering::SeqCst);
        f.depth.set(depth + 1);
        Some(frame)
    })
}

/// Removes the innermost call and returns its final contents.
pub(crate) fn pop_frame() -> Frame {
    FRAMES.with(|f| {
        let depth = f.depth.get();
        assert!(depth > 0, "domain frame stack underflow");
        let frame = f.frames[depth - 1].get();
        // SAFETY: the frame is owned by this thread.
        unsafe { (*frame).valid = false };
        compiler_fence(Ordering::SeqCst);
        f.depth.set(depth - 1);
        // SAFETY: as above.
        unsafe { *frame }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Path {
    Normal,
    Recovered,
}

/// Captures the snapshot into `frame` and runs `entry(arg)` on the domain
/// stack.
///
/// # Safety
/// `frame` must be the innermost live frame of this thread, `stack_top` the
/// 16-byte aligned top of a mapped domain stack, and `entry` must not unwind.
pub(crate) unsafe fn enter(
    frame: *mut Frame,
    entry: unsafe extern "C" fn(*mut u8),
    arg: *mut u8,
    stack_top: usize,
    switch: EntrySwitch,
) -> Path {
    let (pkru, use_pkru) = match switch {
        EntrySwitch::Register(value) => (value, 1),
        EntrySwitch::Applied => (0, 0),
    };
    match domain_rewind_enter(std::ptr::addr_of_mut!((*frame).saved_sp), entry, arg, stack_top, pkru, use_pkru) {
        0 => Path::Normal,
        _ => Path::Recovered,
    }
}

/// Public view of a live snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ExecutionSnapshot {
    pub domain_id: u64,
    pub epoch: u64,
    /// Position in this thread's stack of domain calls, 0 = outermost.
    pub depth: usize,
    pub valid: bool,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RewindError {
    #[error("snapshot for domain {domain_id} epoch {epoch} is not the live innermost snapshot")]
    StaleSnapshot { domain_id: u64, epoch: u64 },
}

/// Snapshots of every active domain call on this thread, outermost first.
pub fn live_snapshots() -> Vec<ExecutionSnapshot> {
    let _elevated = crate::domain::Elevation::raise();
    let frames: Vec<Frame> = FRAMES.with(|f| (0..f.depth()).filter_map(|i| f.frame(i)).collect());
    frames
        .iter()
        .enumerate()
        .map(|(depth, fr)| ExecutionSnapshot { domain_id: fr.domain_id, epoch: fr.epoch, depth, valid: fr.valid })
        .collect()
}

/// Snapshot of the innermost active domain call on this thread.
pub fn current() -> Option<ExecutionSnapshot> {
    live_snapshots().last().copied()
}

/// Transfers control back to `snapshot`, carrying `report`. Only returns if
/// the snapshot is not the live innermost one on this thread.
pub fn rewind_to(snapshot: &ExecutionSnapshot, report: ViolationReport) -> RewindError {
    let elevated = crate::domain::Elevation::raise();
    let stale = RewindError::StaleSnapshot { domain_id: snapshot.domain_id, epoch: snapshot.epoch };
    let target = FRAMES.with(|f| {
        let top = f.top()?;
        // SAFETY: frames belong to this thread.
        let frame = unsafe { &mut *top };
        let live = f.depth() == snapshot.depth + 1
            && frame.valid
            && frame.epoch == snapshot.epoch
            && frame.domain_id == snapshot.domain_id;
        if !live {
            return None;
        }
        frame.pending = Pending { set: true, report };
        frame.valid = false;
        Some((frame.saved_sp, frame.use_pkru))
    });
    match target {
        Some((sp, use_pkru)) => {
            std::mem::forget(elevated);
            // SAFETY: `sp` is the snapshot of the live innermost call of this
            // thread; everything above it on the domain stack is abandoned.
            unsafe { domain_rewind_jump(sp, use_pkru) }
        }
        None => stale,
    }
}

/// Rewinds the innermost call with an explicit-abort report. Returns `None`
/// when no domain call is active on this thread.
pub(crate) fn abort_innermost(reason: u32) -> Option<std::convert::Infallible> {
    let elevated = crate::domain::Elevation::raise();
    let target = FRAMES.with(|f| {
        let top = f.top()?;
        // SAFETY: frames belong to this thread.
        let frame = unsafe { &mut *top };
        if !frame.valid {
            return None;
        }
        let report = ViolationReport::new(ViolationKind::ExplicitAbort { reason }, frame.domain_id, f.tid());
        frame.pending = Pending { set: true, report };
        frame.valid = false;
        Some((frame.saved_sp, frame.use_pkru))
    });
    let (sp, use_pkru) = target?;
    std::mem::forget(elevated);
    // SAFETY: as in `rewind_to`.
    unsafe { domain_rewind_jump(sp, use_pkru) }
}

/// Times `iterations` full capture, abort, rewind cycles on a default domain
/// of the default backend.
pub fn measure_rewind_cycle(iterations: usize) -> Result<LatencyStats, DomainError> {
    measure_rewind_cycle_with(crate::backend::default_backend(), DomainConfig::default(), iterations)
}

/// Times `iterations` domain calls that abort immediately, each one covering
/// snapshot capture, the switch in, the abort, the rewind and the discard.
///
/// A second, idle domain stays alive during the measurement. Without it the
/// portable backend has nothing to protect and skips its switches, which
/// would flatter it.
pub fn measure_rewind_cycle_with(
    backend: Arc<dyn IsolationBackend>,
    config: DomainConfig,
    iterations: usize,
) -> Result<LatencyStats, DomainError> {
    let iterations = iterations.max(1);
    let domain = Domain::create(backend.clone(), config)?;
    let _bystander = Domain::create(backend, DomainConfig::default().with_arena_bytes(64 * 1024))?;
    let call = MarshalledCall::encode("rewind-cycle", &())?;
    let abort = |ctx: &mut DomainContext, _: &[u8]| -> Vec<u8> { ctx.abort(1) };
    let mut samples = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let start = Instant::now();
        let outcome = domain.execute(&call, &abort)?;
        samples.push(start.elapsed().as_nanos() as f64);
        debug_assert!(!outcome.is_completed());
    }
    Ok(LatencyStats::from_nanos(samples).expect("at least one sample"))
}
