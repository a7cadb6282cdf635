//! Placement of domain memory.
//!
//! All domains live in one reserved window of the address space, split into
//! fixed, size-aligned slots. Code running on a domain stack finds its slot
//! by masking the stack pointer, which needs no memory access. That matters
//! in confidentiality mode, where every untagged page (statics and
//! thread-locals included) is off limits to the domain.
//!
//! Slot layout, from the slot base upwards:
//!
//! ```text
//! +0         control page   read-only for the domain, written at creation
//! +1 page    call page      arena cursor and per-call metadata
//! +2 pages   guard
//! +3 pages   stack          stack_bytes, grows down from its top
//!            guard
//!            arena          arena_bytes
//!            guard          (rest of the slot stays reserved)
//! ```

use std::arch::asm;
use std::sync::{Mutex, OnceLock};

use crate::backend::{page_size, IsolationError, MemoryRegion};

pub(crate) const WINDOW_BASE: usize = 0x3000_0000_0000;
pub(crate) const SLOT_SHIFT: u32 = 30;
pub(crate) const SLOT_SIZE: usize = 1 << SLOT_SHIFT;
pub(crate) const SLOT_COUNT: usize = 64;
pub(crate) const WINDOW_LEN: usize = SLOT_SIZE * SLOT_COUNT;

pub(crate) const CONTROL_MAGIC: u64 = 0x5245_5749_4e44_4f4d;

/// Written once by trusted code at domain creation; mapped read-only.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub(crate) struct ControlBlock {
    pub magic: u64,
    pub domain_id: u64,
    pub slot: u32,
    /// Nonzero when the process can use PKRU, so trusted entry points know
    /// whether raising rights needs a register write.
    pub pkru_usable: u32,
    pub arena_base: usize,
    pub arena_capacity: usize,
    pub stack_lo: usize,
    pub stack_hi: usize,
}

/// Mutable per-domain state that domain code itself updates.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CallPage {
    pub watermark: usize,
    pub peak: usize,
    pub baseline: usize,
    pub attempt: u32,
    pub _pad: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct SlotLayout {
    pub slot: usize,
    pub base: usize,
    pub control: MemoryRegion,
    pub call: MemoryRegion,
    pub stack: MemoryRegion,
    pub arena: MemoryRegion,
}

impl SlotLayout {
    /// Largest `stack_bytes + arena_bytes` a slot can hold.
    pub fn max_payload() -> usize {
        SLOT_SIZE - 6 * page_size()
    }

    pub fn new(slot: usize, stack_bytes: usize, arena_bytes: usize) -> Result<Self, IsolationError> {
        let page = page_size();
        let base = slot_base(slot);
        let control = MemoryRegion::new(base, page)?;
        let call = MemoryRegion::new(base + page, page)?;
        let stack = MemoryRegion::new(base + 3 * page, stack_bytes)?;
        let arena = MemoryRegion::new(stack.end() + page, arena_bytes)?;
        if arena.end() + page > base + SLOT_SIZE {
            return Err(IsolationError::OsRejected(format!(
                "stack {stack_bytes} + arena {arena_bytes} bytes exceed the {SLOT_SIZE}-byte slot"
            )));
        }
        Ok(SlotLayout { slot, base, control, call, stack, arena })
    }

    /// Everything from the slot base to the end of the arena.
    pub fn used(&self) -> MemoryRegion {
        MemoryRegion::new(self.base, self.arena.end() - self.base).expect("slot span is page aligned")
    }

    pub fn control_block(&self) -> *mut ControlBlock {
        self.control.base() as *mut ControlBlock
    }

    pub fn call_page(&self) -> *mut CallPage {
        self.call.base() as *mut CallPage
    }

    /// Initial stack pointer for domain code; the word above it is the top
    /// canary.
    pub fn stack_top(&self) -> usize {
        self.stack.end() - 16
    }

    pub fn top_canary(&self) -> *mut u64 {
        (self.stack.end() - 8) as *mut u64
    }

    pub fn bottom_canary(&self) -> *mut u64 {
        self.stack.base() as *mut u64
    }
}

pub(crate) fn slot_base(slot: usize) -> usize {
    WINDOW_BASE + (slot << SLOT_SHIFT)
}

#[inline(always)]
pub(crate) fn stack_pointer() -> usize {
    let sp: usize;
    // SAFETY: reads a register.
    unsafe { asm!("mov {}, rsp", out(reg) sp, options(nomem, nostack, preserves_flags)) };
    sp
}

#[inline(always)]
pub(crate) fn in_window(addr: usize) -> bool {
    addr.wrapping_sub(WINDOW_BASE) < WINDOW_LEN
}

/// Control block of the domain whose stack the caller is running on.
///
/// Touches no untagged memory.
#[inline(always)]
pub(crate) fn current_control() -> Option<&'static ControlBlock> {
    let sp = stack_pointer();
    if !in_window(sp) {
        return None;
    }
    let base = sp & !(SLOT_SIZE - 1);
    // SAFETY: a stack pointer inside the window means this thread runs on a
    // live domain stack, whose slot has a mapped, readable control page.
    let cb = unsafe { &*(base as *const ControlBlock) };
    (cb.magic == CONTROL_MAGIC).then_some(cb)
}

/// Page size without touching statics; only x86-64 Linux is supported and
/// its base page is 4 KiB.
#[inline(always)]
pub(crate) const fn page_size_const() -> usize {
    4096
}

struct SlotTable {
    used: u64,
}

static RESERVED: OnceLock<Result<(), IsolationError>> = OnceLock::new();
static SLOTS: Mutex<SlotTable> = Mutex::new(SlotTable { used: 0 });

/// Reserves the whole window (inaccessible, no backing memory) once per process.
pub(crate) fn reserve_window() -> Result<(), IsolationError> {
    RESERVED
        .get_or_init(|| {
            // SAFETY: MAP_FIXED_NOREPLACE fails instead of clobbering an
            // existing mapping.
            let addr = unsafe {
                libc::mmap(
                    WINDOW_BASE as *mut libc::c_void,
                    WINDOW_LEN,
                    libc::PROT_NONE,
                    libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE | libc::MAP_FIXED_NOREPLACE,
                    -1,
                    0,
                )
            };
            if addr == libc::MAP_FAILED {
                return Err(IsolationError::os("reserving the domain window"));
            }
            if addr as usize != WINDOW_BASE {
                // SAFETY: unmapping what was just mapped elsewhere.
                unsafe { libc::munmap(addr, WINDOW_LEN) };
                return Err(IsolationError::OsRejected("kernel ignored the domain window address".into()));
            }
            Ok(())
        })
        .clone()
}

pub(crate) fn claim_slot() -> Option<usize> {
    let mut table = SLOTS.lock().unwrap_or_else(|p| p.into_inner());
    let free = (!table.used).trailing_zeros() as usize;
    if free >= SLOT_COUNT {
        return None;
    }
    table.used |= 1 << free;
    Some(free)
}

pub(crate) fn release_slot(slot: usize) {
    let mut table = SLOTS.lock().unwrap_or_else(|p| p.into_inner());
    table.used &= !(1u64 << slot);
}

/// Makes `region` accessible (untagged) again after it was reserved.
pub(crate) fn map_rw(region: MemoryRegion) -> Result<(), IsolationError> {
    // SAFETY: the region lies inside our reserved window.
    let rc = unsafe { libc::mprotect(region.as_ptr(), region.len(), libc::PROT_READ | libc::PROT_WRITE) };
    if rc != 0 {
        return Err(IsolationError::os("mprotect"));
    }
    Ok(())
}

/// Returns `region` to the reserved, inaccessible state and drops its pages.
pub(crate) fn unmap(region: MemoryRegion) {
    // SAFETY: the region lies inside our reserved window; MAP_FIXED over our
    // own reservation replaces pages and key tags with a fresh reservation.
    unsafe {
        libc::mmap(
            region.as_ptr(),
            region.len(),
            libc::PROT_NONE,
            libc::MAP_PRIVATE | libc::MAP_ANONYMOUS | libc::MAP_NORESERVE | libc::MAP_FIXED,
            -1,
            0,
        );
    }
}

/// Discards the contents of `[addr, addr + len)`; the range reads back as
/// zeros. Partial pages at either end are cleared by hand.
///
/// # Safety
/// The range must be writable by the calling thread.
pub(crate) unsafe fn zero_range(addr: usize, len: usize) {
    const MADVISE_THRESHOLD: usize = 64 * 1024;
    if len == 0 {
        return;
    }
    let page = page_size_const();
    let end = addr + len;
    let first = (addr + page - 1) & !(page - 1);
    let last = end & !(page - 1);
    if len < MADVISE_THRESHOLD || first >= last {
        std::ptr::write_bytes(addr as *mut u8, 0, len);
        return;
    }
    std::ptr::write_bytes(addr as *mut u8, 0, first - addr);
    if libc::madvise(first as *mut libc::c_void, last - first, libc::MADV_DONTNEED) != 0 {
        std::ptr::write_bytes(first as *mut u8, 0, last - first);
    }
    std::ptr::write_bytes(last as *mut u8, 0, end - last);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_layout_is_disjoint_and_aligned() {
        let l = SlotLayout::new(3, 256 * 1024, 16 << 20).unwrap();
        assert_eq!(l.base % SLOT_SIZE, 0);
        assert!(!l.stack.overlaps(&l.arena));
        assert!(!l.control.overlaps(&l.stack));
        assert!(l.stack.end() < l.arena.base(), "guard page between stack and arena");
        assert_eq!(l.stack_top() % 16, 0);
        assert!(l.used().end() <= l.base + SLOT_SIZE);
    }

    #[test]
    fn oversized_slot_is_rejected() {
        assert!(SlotLayout::new(0, 4096, SLOT_SIZE).is_err());
        assert!(SlotLayout::new(0, 4096, SlotLayout::max_payload() - 4096).is_ok());
    }

    #[test]
    fn window_membership() {
        assert!(in_window(WINDOW_BASE));
        assert!(in_window(WINDOW_BASE + WINDOW_LEN - 1));
        assert!(!in_window(WINDOW_BASE - 1));
        assert!(!in_window(WINDOW_BASE + WINDOW_LEN));
        assert!(current_control().is_none());
    }
}
