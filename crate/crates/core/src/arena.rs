//! Per-domain bump arena.
//!
//! The backing store is the arena region of the domain slot, tagged with the
//! domain key. There is no per-object free: the whole arena is discarded at
//! once, which is exactly what a rewind needs. The cursor lives in the
//! domain's own call page so code inside the domain can allocate without
//! touching untagged memory; bounds always come from the read-only control
//! page, so a corrupted cursor can never push an allocation out of the
//! arena.

use serde::Serialize;
use thiserror::Error;

use crate::layout::{CallPage, ControlBlock};

/// Default arena capacity: 16 MiB.
pub const DEFAULT_ARENA_BYTES: usize = 16 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArenaError {
    #[error("arena exhausted: {requested} bytes requested, {available} available")]
    ArenaExhausted { requested: usize, available: usize },
    #[error("allocation size must be nonzero")]
    ZeroSize,
    #[error("alignment {0} is not a power of two")]
    BadAlignment(usize),
}

/// Snapshot of an arena's bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ArenaState {
    pub base: usize,
    pub capacity: usize,
    pub watermark: usize,
    pub baseline: usize,
}

impl ArenaState {
    pub fn contains(&self, addr: usize, len: usize) -> bool {
        addr >= self.base && addr.checked_add(len).is_some_and(|end| end <= self.base + self.capacity)
    }

    pub fn remaining(&self) -> usize {
        self.capacity - self.watermark
    }
}

pub(crate) fn state(cb: &ControlBlock, page: &CallPage) -> ArenaState {
    ArenaState {
        base: cb.arena_base,
        capacity: cb.arena_capacity,
        watermark: page.watermark.min(cb.arena_capacity),
        baseline: page.baseline.min(cb.arena_capacity),
    }
}

/// Bump-allocates from the arena described by `cb`, advancing `page`.
#[inline]
pub(crate) fn bump(cb: &ControlBlock, page: &mut CallPage, size: usize, align: usize) -> Result<usize, ArenaError> {
    if size == 0 {
        return Err(ArenaError::ZeroSize);
    }
    if !align.is_power_of_two() {
        return Err(ArenaError::BadAlignment(align));
    }
    let capacity = cb.arena_capacity;
    let watermark = page.watermark.min(capacity);
    let cursor = cb.arena_base + watermark;
    let exhausted = ArenaError::ArenaExhausted { requested: size, available: capacity - watermark };
    let aligned = cursor.checked_add(align - 1).ok_or(exhausted.clone())? & !(align - 1);
    let end = aligned.checked_add(size).ok_or(exhausted.clone())?;
    if end > cb.arena_base + capacity {
        return Err(exhausted);
    }
    page.watermark = end - cb.arena_base;
    page.peak = page.peak.max(page.watermark);
    Ok(aligned)
}

/// How much of the arena a reset clears when zero-fill is on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Scrub {
    /// Everything above the baseline. Used when discarding a faulted domain,
    /// whose code may have scribbled anywhere in its own memory.
    Whole,
    /// Up to the highest watermark reached since the last reset.
    Touched,
}

/// Rolls the cursor back to the baseline.
///
/// # Safety
/// The arena must be writable by the calling thread when `zero_fill` is set.
pub(crate) unsafe fn reset(cb: &ControlBlock, page: &mut CallPage, zero_fill: bool, scrub: Scrub) {
    let capacity = cb.arena_capacity;
    let baseline = page.baseline.min(capacity);
    if zero_fill {
        let top = match scrub {
            Scrub::Whole => capacity,
            Scrub::Touched => page.peak.max(page.watermark).min(capacity),
        };
        if top > baseline {
            crate::layout::zero_range(cb.arena_base + baseline, top - baseline);
        }
    }
    page.watermark = baseline;
    page.peak = baseline;
}
