//! Domain lifecycle and the execute-in-domain entry point.
//!
//! A domain is a slot of the domain window: a private stack, a bump arena,
//! and one protection key tagging both. [`Domain::execute`] copies the
//! marshalled arguments into the arena, captures a snapshot, switches to the
//! domain stack and rights, and runs the entry. Either the entry returns and
//! its result is copied out (`Completed`), or a violation is detected, the
//! arena is discarded and control comes back to the snapshot (`Violated`).

use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr::NonNull;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;

use serde::Serialize;
use thiserror::Error;

use crate::arena::{self, ArenaError, ArenaState, Scrub, DEFAULT_ARENA_BYTES};
use crate::backend::{
    self, AccessRights, EntrySwitch, IsolationBackend, IsolationError, IsolationMode, MemoryRegion, ProtectionKeyHandle,
};
use crate::layout::{self, CallPage, ControlBlock, SlotLayout, CONTROL_MAGIC};
use crate::marshal::{MarshalError, MarshalledCall, SCHEMA_TAG};
use crate::monitor::{self, MonitorError, ViolationKind, ViolationReport, REASON_CORRUPT_RESULT, REASON_PANIC};
use crate::snapshot::{self, Path, MAX_FRAMES};
use crate::{alloc, pkru};

pub const DEFAULT_STACK_BYTES: usize = 256 * 1024;
pub const DEFAULT_MAX_NESTING: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DomainError {
    #[error("invalid domain configuration: {0}")]
    ConfigError(String),
    #[error("domain {id} is {state:?}, operation needs {expected}")]
    IllegalState { id: u64, state: DomainState, expected: &'static str },
    #[error("domain {0} is already executing")]
    BusyDomain(u64),
    #[error("domain nesting limit of {0} reached")]
    NestingLimit(usize),
    #[error("no free domain slot")]
    SlotsExhausted,
    #[error("DomainAllocator is not the global allocator of this program")]
    AllocatorNotInstalled,
    #[error(transparent)]
    Isolation(#[from] IsolationError),
    #[error(transparent)]
    Monitor(#[from] MonitorError),
    #[error(transparent)]
    Arena(#[from] ArenaError),
    #[error(transparent)]
    Marshal(#[from] MarshalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[repr(u8)]
pub enum DomainState {
    Initialized = 0,
    Active = 1,
    Faulted = 2,
    Retired = 3,
}

impl DomainState {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => DomainState::Initialized,
            1 => DomainState::Active,
            2 => DomainState::Faulted,
            _ => DomainState::Retired,
        }
    }

    /// The declared lifecycle relation.
    pub fn can_transition_to(self, next: DomainState) -> bool {
        use DomainState::*;
        matches!(
            (self, next),
            (Initialized, Active)
                | (Active, Initialized)
                | (Active, Faulted)
                | (Faulted, Initialized)
                | (Initialized, Retired)
                | (Faulted, Retired)
        )
    }
}

/// Result of one domain call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DomainOutcome {
    Completed(Vec<u8>),
    Violated(ViolationReport),
}

impl DomainOutcome {
    pub fn is_completed(&self) -> bool {
        matches!(self, DomainOutcome::Completed(_))
    }

    pub fn report(&self) -> Option<&ViolationReport> {
        match self {
            DomainOutcome::Violated(report) => Some(report),
            DomainOutcome::Completed(_) => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DomainConfig {
    pub stack_bytes: usize,
    pub arena_bytes: usize,
    /// Scrub the arena whenever it is reset. On by default: it costs a
    /// memset or madvise per reset but keeps one call's data from the next.
    pub zero_fill: bool,
    pub mode: IsolationMode,
    pub max_nesting: usize,
    /// Largest argument payload accepted; `None` means half the arena.
    pub argument_quota: Option<usize>,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            stack_bytes: DEFAULT_STACK_BYTES,
            arena_bytes: DEFAULT_ARENA_BYTES,
            zero_fill: true,
            mode: IsolationMode::Integrity,
            max_nesting: DEFAULT_MAX_NESTING,
            argument_quota: None,
        }
    }
}

impl DomainConfig {
    pub fn with_mode(mut self, mode: IsolationMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_arena_bytes(mut self, bytes: usize) -> Self {
        self.arena_bytes = bytes;
        self
    }

    pub fn with_stack_bytes(mut self, bytes: usize) -> Self {
        self.stack_bytes = bytes;
        self
    }

    pub fn quota(&self) -> usize {
        self.argument_quota.unwrap_or(self.arena_bytes / 2)
    }

    fn validate(&self) -> Result<(), DomainError> {
        let page = backend::page_size();
        let err = |msg: String| Err(DomainError::ConfigError(msg));
        if self.stack_bytes == 0 || !self.stack_bytes.is_multiple_of(page) {
            return err(format!("stack_bytes must be a nonzero multiple of {page}, got {}", self.stack_bytes));
        }
        if self.arena_bytes == 0 || !self.arena_bytes.is_multiple_of(page) {
            return err(format!("arena_bytes must be a nonzero multiple of {page}, got {}", self.arena_bytes));
        }
        if self.stack_bytes + self.arena_bytes > SlotLayout::max_payload() {
            return err(format!("stack + arena must not exceed {} bytes", SlotLayout::max_payload()));
        }
        if self.max_nesting == 0 || self.max_nesting > MAX_FRAMES {
            return err(format!("max_nesting must be within 1..={MAX_FRAMES}"));
        }
        Ok(())
    }
}

/// Plain-data view of a domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DomainDescriptor {
    pub id: u64,
    pub key_id: u32,
    pub stack: (usize, usize),
    pub arena: ArenaState,
    pub state: DomainState,
    pub parent: Option<u64>,
    pub canary: u64,
    pub mode: IsolationMode,
}

impl Serialize for IsolationMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(match self {
            IsolationMode::Integrity => "integrity",
            IsolationMode::Confidentiality => "confidentiality",
        })
    }
}

/// Opens all keys for trusted library code and restores the previous rights
/// when dropped. Safe to call from inside a domain: whether PKRU is in use is
/// read from the domain's control page, never from untagged memory.
pub(crate) struct Elevation {
    saved: Option<u32>,
}

impl Elevation {
    #[inline]
    pub(crate) fn raise() -> Self {
        let pku = match layout::current_control() {
            Some(cb) => cb.pkru_usable != 0,
            None => pkru::USABLE.load(Ordering::Relaxed),
        };
        if pku {
            let saved = pkru::read();
            if saved != 0 {
                // SAFETY: opening rights can't make memory inaccessible.
                unsafe { pkru::write(0) };
                return Elevation { saved: Some(saved) };
            }
        }
        Elevation { saved: None }
    }
}

impl Drop for Elevation {
    fn drop(&mut self) {
        if let Some(saved) = self.saved {
            // SAFETY: restores the value read in `raise`.
            unsafe { pkru::write(saved) };
        }
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

struct DomainInner {
    id: u64,
    backend: Arc<dyn IsolationBackend>,
    key: ProtectionKeyHandle,
    layout: SlotLayout,
    config: DomainConfig,
    canary: u64,
    parent: Option<u64>,
    state: AtomicU8,
    epoch: AtomicU64,
}

/// The reserved address range every domain's memory lives in.
pub fn domain_window() -> MemoryRegion {
    MemoryRegion::new(layout::WINDOW_BASE, layout::WINDOW_LEN).expect("window is page aligned")
}

/// Handle to an isolation domain. Clones refer to the same domain; the
/// domain is destroyed when the last handle goes away, unless
/// [`destroy`](Domain::destroy) ran first.
#[derive(Clone)]
pub struct Domain {
    inner: Arc<DomainInner>,
}

impl fmt::Debug for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Domain")
            .field("id", &self.inner.id)
            .field("key", &self.inner.key)
            .field("state", &self.state())
            .finish()
    }
}

/// The entry's view of its own domain, available to code running inside it.
#[derive(Debug, Clone, Copy)]
pub struct DomainContext {
    domain_id: u64,
    slot: u32,
    arena_base: usize,
    arena_capacity: usize,
    stack: (usize, usize),
}

impl DomainContext {
    /// Context of the domain whose stack the caller runs on. Reads only
    /// domain memory.
    pub fn current() -> Option<DomainContext> {
        let cb = layout::current_control()?;
        Some(DomainContext {
            domain_id: cb.domain_id,
            slot: cb.slot,
            arena_base: cb.arena_base,
            arena_capacity: cb.arena_capacity,
            stack: (cb.stack_lo, cb.stack_hi),
        })
    }

    pub fn domain_id(&self) -> u64 {
        self.domain_id
    }

    fn control(&self) -> &ControlBlock {
        // SAFETY: the context only exists on the domain's own stack, where
        // the control page is mapped and readable.
        unsafe { &*(layout::slot_base(self.slot as usize) as *const ControlBlock) }
    }

    fn call_page(&self) -> *mut CallPage {
        (layout::slot_base(self.slot as usize) + layout::page_size_const()) as *mut CallPage
    }

    /// Bump-allocates from the domain arena.
    pub fn alloc(&mut self, size: usize, align: usize) -> Result<NonNull<u8>, ArenaError> {
        // SAFETY: the call page is domain memory, writable from inside.
        let addr = arena::bump(self.control(), unsafe { &mut *self.call_page() }, size, align)?;
        Ok(NonNull::new(addr as *mut u8).expect("arena addresses are nonzero"))
    }

    /// `[base, end)` of the arena.
    pub fn arena_bounds(&self) -> (usize, usize) {
        (self.arena_base, self.arena_base + self.arena_capacity)
    }

    /// `[lo, hi)` of the domain stack.
    pub fn stack_bounds(&self) -> (usize, usize) {
        self.stack
    }

    pub fn arena_state(&self) -> ArenaState {
        // SAFETY: see `alloc`.
        arena::state(self.control(), unsafe { &*self.call_page() })
    }

    /// Zero-based retry counter set by the guard layer.
    pub fn attempt(&self) -> u32 {
        // SAFETY: see `alloc`.
        unsafe { (*self.call_page()).attempt }
    }

    /// Abandons the call with an explicit-abort violation.
    pub fn abort(&self, reason: u32) -> ! {
        monitor::raise_abort(reason);
        unreachable!("a DomainContext only exists inside an active domain call")
    }
}

#[repr(C)]
struct EntryFrame<F> {
    entry: *const F,
    input_ptr: usize,
    input_len: usize,
    out_ptr: usize,
    out_len: usize,
}

unsafe extern "C" fn run_entry<F>(arg: *mut u8)
where
    F: Fn(&mut DomainContext, &[u8]) -> Vec<u8>,
{
    let frame = &mut *(arg as *mut EntryFrame<F>);
    let Some(mut ctx) = DomainContext::current() else {
        monitor::raise_abort(REASON_CORRUPT_RESULT);
        return;
    };
    let input = std::slice::from_raw_parts(frame.input_ptr as *const u8, frame.input_len);
    let entry = &*frame.entry;
    match catch_unwind(AssertUnwindSafe(|| entry(&mut ctx, input))) {
        Ok(out) => {
            frame.out_ptr = out.as_ptr() as usize;
            frame.out_len = out.len();
            std::mem::forget(out);
        }
        Err(payload) => {
            std::mem::forget(payload);
            monitor::raise_abort(REASON_PANIC);
        }
    }
}

impl Domain {
    /// Creates a domain with regions mapped, tagged and guarded; the new
    /// domain is `Initialized`.
    pub fn create(backend: Arc<dyn IsolationBackend>, config: DomainConfig) -> Result<Domain, DomainError> {
        config.validate()?;
        let _elevated = Elevation::raise();
        let _exclusive = backend.exclusive_section();
        if !monitor::monitor_installed() {
            monitor::monitor_install()?;
        }
        let depth = snapshot::depth();
        if depth + 1 > config.max_nesting {
            return Err(DomainError::NestingLimit(config.max_nesting));
        }
        let parent = snapshot::active_domain();
        layout::reserve_window()?;
        let slot = layout::claim_slot().ok_or(DomainError::SlotsExhausted)?;
        let layout = match SlotLayout::new(slot, config.stack_bytes, config.arena_bytes) {
            Ok(l) => l,
            Err(e) => {
                layout::release_slot(slot);
                return Err(e.into());
            }
        };
        let key = match backend.acquire_key() {
            Ok(key) => key,
            Err(e) => {
                layout::release_slot(slot);
                return Err(e.into());
            }
        };
        let id = NEXT_ID.fetch_add(1, Ordering::Relaxed);
        let canary = loop {
            let c: u64 = rand::random();
            if c != 0 {
                break c;
            }
        };
        let inner = DomainInner {
            id,
            backend: backend.clone(),
            key,
            layout,
            config,
            canary,
            parent,
            state: AtomicU8::new(DomainState::Initialized as u8),
            epoch: AtomicU64::new(0),
        };
        if let Err(e) = inner.map_and_tag() {
            inner.unmap_and_release();
            return Err(e);
        }
        Ok(Domain { inner: Arc::new(inner) })
    }

    /// Creates a domain on the process default backend.
    pub fn with_defaults() -> Result<Domain, DomainError> {
        Domain::create(backend::default_backend(), DomainConfig::default())
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn key(&self) -> ProtectionKeyHandle {
        self.inner.key
    }

    pub fn state(&self) -> DomainState {
        DomainState::from_u8(self.inner.state.load(Ordering::Acquire))
    }

    pub fn config(&self) -> &DomainConfig {
        &self.inner.config
    }

    pub fn backend(&self) -> &Arc<dyn IsolationBackend> {
        &self.inner.backend
    }

    pub fn stack_region(&self) -> MemoryRegion {
        self.inner.layout.stack
    }

    pub fn arena_region(&self) -> MemoryRegion {
        self.inner.layout.arena
    }

    /// Every page tagged with the domain key.
    pub fn regions(&self) -> [MemoryRegion; 4] {
        let l = &self.inner.layout;
        [l.control, l.call, l.stack, l.arena]
    }

    /// Address of the guard word at the top (`true`) or bottom edge of the
    /// domain stack.
    pub fn canary_address(&self, top: bool) -> usize {
        if top {
            self.inner.layout.top_canary() as usize
        } else {
            self.inner.layout.bottom_canary() as usize
        }
    }

    pub fn epoch(&self) -> u64 {
        self.inner.epoch.load(Ordering::Acquire)
    }

    pub fn descriptor(&self) -> DomainDescriptor {
        DomainDescriptor {
            id: self.inner.id,
            key_id: self.inner.key.key_id(),
            stack: (self.inner.layout.stack.base(), self.inner.layout.stack.end()),
            arena: self.arena_state(),
            state: self.state(),
            parent: self.inner.parent,
            canary: self.inner.canary,
            mode: self.inner.config.mode,
        }
    }

    pub fn arena_state(&self) -> ArenaState {
        let _elevated = Elevation::raise();
        let _exclusive = self.inner.backend.exclusive_section();
        if self.state() == DomainState::Retired {
            return ArenaState {
                base: self.inner.layout.arena.base(),
                capacity: self.inner.layout.arena.len(),
                watermark: 0,
                baseline: 0,
            };
        }
        // SAFETY: pages are mapped while the domain is not retired.
        unsafe { arena::state(&*self.inner.layout.control_block(), &*self.inner.layout.call_page()) }
    }

    /// Bump-allocates `size` bytes from the arena on behalf of trusted code.
    pub fn arena_alloc(&self, size: usize, align: usize) -> Result<usize, DomainError> {
        self.require_live("a live domain")?;
        let _elevated = Elevation::raise();
        let _exclusive = self.inner.backend.exclusive_section();
        // SAFETY: pages are mapped while the domain is live.
        let addr = unsafe {
            arena::bump(&*self.inner.layout.control_block(), &mut *self.inner.layout.call_page(), size, align)?
        };
        Ok(addr)
    }

    /// Rolls the arena back to its baseline, scrubbing it when configured.
    /// Refused while the domain executes.
    pub fn arena_reset(&self) -> Result<(), DomainError> {
        match self.state() {
            DomainState::Active => {
                return Err(DomainError::IllegalState {
                    id: self.inner.id,
                    state: DomainState::Active,
                    expected: "an idle domain",
                })
            }
            DomainState::Retired => return Ok(()),
            _ => {}
        }
        let _elevated = Elevation::raise();
        let _exclusive = self.inner.backend.exclusive_section();
        self.inner.reset_arena(Scrub::Whole);
        Ok(())
    }

    /// Copies `len` arena bytes starting at `offset` out of the domain.
    pub fn read_arena(&self, offset: usize, len: usize) -> Result<Vec<u8>, DomainError> {
        self.require_live("a live domain")?;
        let arena = self.inner.layout.arena;
        if !arena.contains_range(arena.base() + offset, len) {
            return Err(
                ArenaError::ArenaExhausted { requested: len, available: arena.len().saturating_sub(offset) }.into()
            );
        }
        let _elevated = Elevation::raise();
        let _exclusive = self.inner.backend.exclusive_section();
        // SAFETY: range checked against the mapped arena.
        Ok(unsafe { std::slice::from_raw_parts((arena.base() + offset) as *const u8, len).to_vec() })
    }

    /// Copies `bytes` into the arena and returns their address.
    pub fn write_arena(&self, bytes: &[u8]) -> Result<usize, DomainError> {
        let addr = self.arena_alloc(bytes.len().max(1), 16)?;
        let _elevated = Elevation::raise();
        let _exclusive = self.inner.backend.exclusive_section();
        // SAFETY: freshly bump-allocated arena range of sufficient length.
        unsafe { std::ptr::copy_nonoverlapping(bytes.as_ptr(), addr as *mut u8, bytes.len()) };
        Ok(addr)
    }

    /// Compares both stack guard words with the planted value.
    pub fn check_canary(&self) -> Result<(), ViolationReport> {
        let _elevated = Elevation::raise();
        let _exclusive = self.inner.backend.exclusive_section();
        self.inner.check_canary()
    }

    /// Runs `entry` inside the domain on a copy of `call`'s payload.
    ///
    /// The entry receives the domain context and the argument bytes and
    /// returns result bytes, which must be allocated inside the domain (the
    /// [`DomainAllocator`](crate::DomainAllocator) does that for ordinary
    /// `Vec`s). Memory outside the domain stays untouched whatever the entry
    /// does; a violation comes back as [`DomainOutcome::Violated`].
    pub fn execute<F>(&self, call: &MarshalledCall, entry: &F) -> Result<DomainOutcome, DomainError>
    where
        F: Fn(&mut DomainContext, &[u8]) -> Vec<u8>,
    {
        if call.schema_tag() != SCHEMA_TAG {
            return Err(MarshalError::SchemaMismatch { found: call.schema_tag(), expected: SCHEMA_TAG }.into());
        }
        let quota = self.inner.config.quota();
        if call.payload_len() > quota {
            return Err(MarshalError::OversizedArgument { len: call.payload_len(), quota }.into());
        }
        self.activate_and_run(|switch| self.run_switched(call, entry, switch))
    }

    /// Runs a bare function on the domain stack under the domain's rights,
    /// with `arg` in the first argument register. Nothing is staged and no
    /// result comes back: a call that returns is `Completed` with no bytes.
    ///
    /// Meant for self-contained probes. In confidentiality mode with
    /// hardware keys even an out-of-line call reads the caller's relocation
    /// table, which is untagged memory, so an ordinary closure faults before
    /// it reaches its own code.
    ///
    /// # Safety
    ///
    /// `entry` must not unwind, and must not touch trusted memory other than
    /// by faulting on it.
    pub unsafe fn execute_raw(
        &self,
        entry: unsafe extern "C" fn(*mut u8),
        arg: usize,
    ) -> Result<DomainOutcome, DomainError> {
        self.activate_and_run(|switch| {
            let (path, finished) = self.enter_stack(entry, arg as *mut u8, switch)?;
            Ok(match path {
                Path::Recovered => self.recovered(&finished),
                Path::Normal => match self.inner.check_canary() {
                    Err(report) => self.discard(report),
                    Ok(()) => {
                        self.inner.reset_arena(Scrub::Touched);
                        self.inner.transition(DomainState::Active, DomainState::Initialized);
                        DomainOutcome::Completed(Vec::new())
                    }
                },
            })
        })
    }

    /// Common entry protocol: Initialized to Active, thread preparation,
    /// rights switch around `body`, and back to Initialized on error.
    fn activate_and_run(
        &self,
        body: impl FnOnce(EntrySwitch) -> Result<DomainOutcome, DomainError>,
    ) -> Result<DomainOutcome, DomainError> {
        if !alloc::installed() {
            return Err(DomainError::AllocatorNotInstalled);
        }
        let inner = &*self.inner;
        let _elevated = Elevation::raise();
        let _exclusive = inner.backend.exclusive_section();
        if !monitor::monitor_installed() {
            monitor::monitor_install()?;
        }
        if let Err(actual) = inner.state.compare_exchange(
            DomainState::Initialized as u8,
            DomainState::Active as u8,
            Ordering::AcqRel,
            Ordering::Acquire,
        ) {
            let state = DomainState::from_u8(actual);
            return Err(if state == DomainState::Active {
                DomainError::BusyDomain(inner.id)
            } else {
                DomainError::IllegalState { id: inner.id, state, expected: "Initialized" }
            });
        }
        match self.prepare_and_run(body) {
            Ok(outcome) => Ok(outcome),
            Err(e) => {
                inner.transition(DomainState::Active, DomainState::Initialized);
                Err(e)
            }
        }
    }

    fn prepare_and_run(
        &self,
        body: impl FnOnce(EntrySwitch) -> Result<DomainOutcome, DomainError>,
    ) -> Result<DomainOutcome, DomainError> {
        let inner = &*self.inner;
        let limit = inner.config.max_nesting.min(MAX_FRAMES);
        if snapshot::depth() >= limit {
            return Err(DomainError::NestingLimit(limit));
        }
        monitor::prepare_thread();

        // Rights switch first: on the portable backend it is what makes this
        // domain's pages writable for staging when called from inside another
        // domain. Hardware keys only compute the register value here.
        let (switch, saved) = inner.backend.enter_domain(inner.key, inner.config.mode)?;
        let result = body(switch);
        inner.backend.leave_domain(&saved);
        result
    }

    /// Snapshot, switch to the domain stack, run `entry`, come back.
    fn enter_stack(
        &self,
        entry: unsafe extern "C" fn(*mut u8),
        arg: *mut u8,
        switch: EntrySwitch,
    ) -> Result<(Path, snapshot::Frame), DomainError> {
        let inner = &*self.inner;
        let epoch = inner.epoch.fetch_add(1, Ordering::AcqRel) + 1;
        let use_pkru = matches!(switch, EntrySwitch::Register(_));
        let Some(frame) = snapshot::push_frame(inner.id, inner.layout.slot as u32, epoch, use_pkru) else {
            return Err(DomainError::NestingLimit(MAX_FRAMES));
        };
        // SAFETY: `frame` is this thread's innermost frame and the stack top
        // is aligned inside the mapped domain stack; callers pass entries
        // that do not unwind.
        let path = unsafe { snapshot::enter(frame, entry, arg, inner.layout.stack_top(), switch) };
        Ok((path, snapshot::pop_frame()))
    }

    fn recovered(&self, finished: &snapshot::Frame) -> DomainOutcome {
        monitor::REWINDS.fetch_add(1, Ordering::Relaxed);
        let report = if finished.pending.set {
            finished.pending.report
        } else {
            ViolationReport::new(
                ViolationKind::ExplicitAbort { reason: REASON_CORRUPT_RESULT },
                self.inner.id,
                snapshot::current_tid(),
            )
        };
        self.discard(report)
    }

    fn run_switched<F>(
        &self,
        call: &MarshalledCall,
        entry: &F,
        switch: EntrySwitch,
    ) -> Result<DomainOutcome, DomainError>
    where
        F: Fn(&mut DomainContext, &[u8]) -> Vec<u8>,
    {
        let inner = &*self.inner;
        // SAFETY: the domain is Active for this thread only and its pages are
        // mapped; trusted code holds all rights here.
        let frame_addr = unsafe {
            let cb = &*inner.layout.control_block();
            let page = &mut *inner.layout.call_page();
            page.baseline = page.watermark.min(cb.arena_capacity);
            page.peak = page.baseline;
            let payload = call.payload();
            let oversized = |_| MarshalError::OversizedArgument { len: payload.len(), quota: inner.config.quota() };
            let input = arena::bump(cb, page, payload.len().max(1), 16).map_err(oversized)?;
            std::ptr::copy_nonoverlapping(payload.as_ptr(), input as *mut u8, payload.len());
            // When the caller's stack is unreadable from inside (confidentiality
            // mode, or a caller that is itself a domain) the entry closure
            // travels in the arena. The copy is never dropped.
            let mut entry_ptr = entry as *const F;
            let caller_hidden =
                inner.config.mode == IsolationMode::Confidentiality || layout::current_control().is_some();
            if caller_hidden && std::mem::size_of::<F>() > 0 {
                let copy =
                    arena::bump(cb, page, std::mem::size_of::<F>(), std::mem::align_of::<F>()).map_err(oversized)?;
                std::ptr::copy_nonoverlapping(entry_ptr, copy as *mut F, 1);
                entry_ptr = copy as *const F;
            }
            let frame_addr =
                arena::bump(cb, page, std::mem::size_of::<EntryFrame<F>>(), std::mem::align_of::<EntryFrame<F>>())
                    .map_err(oversized)?;
            (frame_addr as *mut EntryFrame<F>).write(EntryFrame {
                entry: entry_ptr,
                input_ptr: input,
                input_len: payload.len(),
                out_ptr: 0,
                out_len: 0,
            });
            frame_addr
        };

        // `run_entry` catches unwinding.
        let (path, finished) = self.enter_stack(run_entry::<F>, frame_addr as *mut u8, switch)?;
        match path {
            Path::Recovered => Ok(self.recovered(&finished)),
            Path::Normal => {
                if let Err(report) = inner.check_canary() {
                    return Ok(self.discard(report));
                }
                // SAFETY: the frame lives in the arena; the out range is only
                // read after checking it lies inside the arena.
                let copied = unsafe {
                    let frame = &*(frame_addr as *const EntryFrame<F>);
                    let (ptr, len) = (frame.out_ptr, frame.out_len);
                    if len == 0 {
                        Some(Vec::new())
                    } else if inner.layout.arena.contains_range(ptr, len) {
                        Some(std::slice::from_raw_parts(ptr as *const u8, len).to_vec())
                    } else {
                        None
                    }
                };
                let Some(bytes) = copied else {
                    let report = ViolationReport::new(
                        ViolationKind::ExplicitAbort { reason: REASON_CORRUPT_RESULT },
                        inner.id,
                        snapshot::current_tid(),
                    );
                    return Ok(self.discard(report));
                };
                inner.reset_arena(Scrub::Touched);
                inner.transition(DomainState::Active, DomainState::Initialized);
                Ok(DomainOutcome::Completed(bytes))
            }
        }
    }

    fn discard(&self, report: ViolationReport) -> DomainOutcome {
        let inner = &*self.inner;
        inner.transition(DomainState::Active, DomainState::Faulted);
        monitor::VIOLATIONS.fetch_add(1, Ordering::Relaxed);
        inner.reset_arena(Scrub::Whole);
        inner.plant_canaries();
        inner.transition(DomainState::Faulted, DomainState::Initialized);
        DomainOutcome::Violated(report)
    }

    /// Untags and releases the regions, frees the key; the domain becomes
    /// `Retired`.
    pub fn destroy(&self) -> Result<(), DomainError> {
        let inner = &*self.inner;
        let _elevated = Elevation::raise();
        let _exclusive = inner.backend.exclusive_section();
        loop {
            let current = DomainState::from_u8(inner.state.load(Ordering::Acquire));
            match current {
                DomainState::Initialized | DomainState::Faulted => {
                    if inner
                        .state
                        .compare_exchange(
                            current as u8,
                            DomainState::Retired as u8,
                            Ordering::AcqRel,
                            Ordering::Acquire,
                        )
                        .is_ok()
                    {
                        break;
                    }
                }
                state => {
                    return Err(DomainError::IllegalState { id: inner.id, state, expected: "Initialized or Faulted" });
                }
            }
        }
        inner.unmap_and_release();
        Ok(())
    }

    fn require_live(&self, expected: &'static str) -> Result<(), DomainError> {
        match self.state() {
            DomainState::Retired => {
                Err(DomainError::IllegalState { id: self.inner.id, state: DomainState::Retired, expected })
            }
            _ => Ok(()),
        }
    }

    /// Current rights of the calling thread for this domain's key.
    pub fn thread_access(&self) -> Result<AccessRights, DomainError> {
        Ok(self.inner.backend.thread_access(self.inner.key)?)
    }

    /// Writes the per-call attempt counter visible through
    /// [`DomainContext::attempt`].
    pub(crate) fn set_attempt(&self, attempt: u32) {
        if self.state() == DomainState::Retired {
            return;
        }
        let _elevated = Elevation::raise();
        let _exclusive = self.inner.backend.exclusive_section();
        // SAFETY: the call page is mapped while the domain is live.
        unsafe { (*self.inner.layout.call_page()).attempt = attempt };
    }
}

impl DomainInner {
    fn transition(&self, from: DomainState, to: DomainState) {
        debug_assert!(from.can_transition_to(to), "undeclared transition {from:?} -> {to:?}");
        let swapped = self.state.compare_exchange(from as u8, to as u8, Ordering::AcqRel, Ordering::Acquire);
        debug_assert!(swapped.is_ok(), "domain {} was not {from:?}", self.id);
    }

    fn map_and_tag(&self) -> Result<(), DomainError> {
        let l = &self.layout;
        for region in [l.control, l.call, l.stack, l.arena] {
            layout::map_rw(region)?;
        }
        // SAFETY: the pages were just mapped read-write and are untagged.
        unsafe {
            l.control_block().write(ControlBlock {
                magic: CONTROL_MAGIC,
                domain_id: self.id,
                slot: l.slot as u32,
                pkru_usable: pkru::USABLE.load(Ordering::Relaxed) as u32,
                arena_base: l.arena.base(),
                arena_capacity: l.arena.len(),
                stack_lo: l.stack.base(),
                stack_hi: l.stack.end(),
            });
            l.call_page().write(CallPage::default());
        }
        self.plant_canaries();
        // SAFETY: the control page is ours.
        if unsafe { libc::mprotect(l.control.as_ptr(), l.control.len(), libc::PROT_READ) } != 0 {
            return Err(IsolationError::os("mprotect").into());
        }
        self.backend.tag_region_with_ceiling(l.control, self.key, AccessRights::ReadOnly)?;
        for region in [l.call, l.stack, l.arena] {
            self.backend.tag_region(region, self.key)?;
        }
        Ok(())
    }

    fn unmap_and_release(&self) {
        let l = &self.layout;
        for region in [l.control, l.call, l.stack, l.arena] {
            let _ = self.backend.untag_region(region);
        }
        layout::unmap(l.used());
        let _ = self.backend.release_key(self.key);
        layout::release_slot(l.slot);
    }

    fn plant_canaries(&self) {
        // SAFETY: both words lie inside the mapped stack; callers hold rights.
        unsafe {
            self.layout.top_canary().write_volatile(self.canary);
            self.layout.bottom_canary().write_volatile(self.canary);
        }
    }

    fn check_canary(&self) -> Result<(), ViolationReport> {
        if DomainState::from_u8(self.state.load(Ordering::Acquire)) == DomainState::Retired {
            return Ok(());
        }
        // SAFETY: as in `plant_canaries`.
        let intact = unsafe {
            self.layout.top_canary().read_volatile() == self.canary
                && self.layout.bottom_canary().read_volatile() == self.canary
        };
        if intact {
            Ok(())
        } else {
            Err(ViolationReport::new(ViolationKind::CanaryMismatch, self.id, snapshot::current_tid()))
        }
    }

    fn reset_arena(&self, scrub: Scrub) {
        // SAFETY: pages are mapped and callers hold rights to them.
        unsafe {
            arena::reset(&*self.layout.control_block(), &mut *self.layout.call_page(), self.config.zero_fill, scrub);
        }
    }
}

impl Drop for DomainInner {
    fn drop(&mut self) {
        if DomainState::from_u8(self.state.load(Ordering::Acquire)) != DomainState::Retired {
            let _elevated = Elevation::raise();
            self.state.store(DomainState::Retired as u8, Ordering::Release);
            self.unmap_and_release();
        }
    }
}
