//! Global allocator that keeps domain allocations inside the domain.
//!
//! Code running on a domain stack gets its heap from the domain arena, found
//! through the stack pointer; everything else goes to the system allocator.
//! Arena memory is never freed piecemeal: it is dropped wholesale when the
//! arena resets. A program that runs domains must install it:
//!
//! ```ignore
//! #[global_allocator]
//! static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;
//! ```

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicBool, Ordering};

use crate::arena;
use crate::layout::{self, CallPage};
use crate::monitor::{self, REASON_ARENA_EXHAUSTED};

#[derive(Debug, Clone, Copy, Default)]
pub struct DomainAllocator;

static INSTALLED: AtomicBool = AtomicBool::new(false);

/// True once any allocation went through [`DomainAllocator`], which in
/// practice means it is the program's global allocator.
pub fn installed() -> bool {
    if !INSTALLED.load(Ordering::Relaxed) {
        // Force one allocation through whatever allocator is installed.
        std::hint::black_box(Box::new(0u64));
    }
    INSTALLED.load(Ordering::Relaxed)
}

#[inline]
unsafe fn domain_alloc(layout: Layout) -> Option<*mut u8> {
    let cb = layout::current_control()?;
    let page = &mut *((layout::slot_base(cb.slot as usize) + layout::page_size_const()) as *mut CallPage);
    match arena::bump(cb, page, layout.size().max(1), layout.align()) {
        Ok(addr) => Some(addr as *mut u8),
        Err(_) => {
            monitor::raise_abort(REASON_ARENA_EXHAUSTED);
            Some(std::ptr::null_mut())
        }
    }
}

unsafe impl GlobalAlloc for DomainAllocator {
    #[inline]
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        if let Some(ptr) = domain_alloc(layout) {
            return ptr;
        }
        if !INSTALLED.load(Ordering::Relaxed) {
            INSTALLED.store(true, Ordering::Relaxed);
        }
        System.alloc(layout)
    }

    #[inline]
    unsafe fn alloc_zeroed(&self, layout: Layout) -> *mut u8 {
        if let Some(ptr) = domain_alloc(layout) {
            // Arena memory above the watermark is not guaranteed zero when
            // zero-fill is off.
            if !ptr.is_null() {
                std::ptr::write_bytes(ptr, 0, layout.size());
            }
            return ptr;
        }
        System.alloc_zeroed(layout)
    }

    #[inline]
    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        if !layout::in_window(ptr as usize) {
            System.dealloc(ptr, layout);
        }
    }

    #[inline]
    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        // A block from outside the window belongs to trusted code even when
        // it grows from inside a domain; moving it into the arena would hand
        // trusted state to memory that is discarded on the next violation.
        if !layout::in_window(ptr as usize) {
            return System.realloc(ptr, layout, new_size);
        }
        let new_layout = Layout::from_size_align_unchecked(new_size, layout.align());
        let fresh = self.alloc(new_layout);
        if !fresh.is_null() {
            std::ptr::copy_nonoverlapping(ptr, fresh, layout.size().min(new_size));
            self.dealloc(ptr, layout);
        }
        fresh
    }
}
