//! In-process isolation domains that rewind instead of crashing.
//!
//! Untrusted or memory-unsafe code runs inside a [`Domain`]: a private stack
//! and heap arena tagged with a protection key. When that code faults on
//! memory it has no rights to, smashes its stack canary, or aborts, the
//! domain's memory is thrown away and the caller gets
//! [`DomainOutcome::Violated`] back at the call site, in microseconds, with
//! the rest of the process untouched.
//!
//! Programs using domains must install [`DomainAllocator`] as their global
//! allocator.

pub mod alloc;
pub mod arena;
pub mod backend;
pub mod domain;
pub mod guard;
pub mod inject;
pub mod kv;
mod layout;
pub mod marshal;
pub mod monitor;
mod pkru;
pub mod resilience;
pub mod snapshot;
pub mod stats;

pub use alloc::DomainAllocator;
pub use arena::{ArenaError, ArenaState};
pub use backend::{
    AccessRights, BackendKind, Capabilities, IsolationBackend, IsolationError, IsolationMode, MemoryRegion,
    ProtectionKeyHandle, SwitchCost,
};
pub use domain::{
    domain_window, Domain, DomainConfig, DomainContext, DomainDescriptor, DomainError, DomainOutcome, DomainState,
};
pub use domain_rewind_macros::guarded;
pub use guard::{guard, DomainMode, GuardError, GuardPolicy, GuardedFunction, OnViolation};
pub use marshal::{MarshalError, MarshalledCall};
pub use monitor::{ViolationKind, ViolationReport};
pub use snapshot::ExecutionSnapshot;
pub use stats::LatencyStats;

#[cfg(test)]
#[global_allocator]
static TEST_ALLOC: DomainAllocator = DomainAllocator;
