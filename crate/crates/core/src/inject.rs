//! Randomized fault injection into domain calls.
//!
//! A [`FaultInjector`] owns an attacker domain in each isolation mode and a
//! victim domain holding data the attacker should never reach. Each planned
//! injection warms the attacker up (arena allocations, stack depth) and then
//! commits one violation: a wild store, a cross-domain read, a canary
//! overwrite or an explicit abort.

use std::sync::Arc;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::Serialize;

use crate::backend::{BackendKind, IsolationBackend, IsolationMode, MemoryRegion};
use crate::domain::{domain_window, Domain, DomainConfig, DomainContext, DomainError};
use crate::marshal::MarshalledCall;
use crate::monitor::{ViolationKind, ViolationReport};

/// Value written by wild stores, easy to spot in a memory dump.
pub const SENTINEL: u64 = 0x5afe_dead_beef_0bad;

const ATTACKER_ARENA: usize = 1 << 20;
const VICTIM_ARENA: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    WildStore,
    CrossDomainRead,
    CanaryOverwrite,
    ExplicitAbort,
}

impl FaultKind {
    pub const ALL: [FaultKind; 4] =
        [FaultKind::WildStore, FaultKind::CrossDomainRead, FaultKind::CanaryOverwrite, FaultKind::ExplicitAbort];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Injection {
    WildStore {
        target: usize,
    },
    /// Runs in the confidentiality-mode attacker.
    CrossDomainRead {
        target: usize,
    },
    CanaryOverwrite {
        top: bool,
    },
    ExplicitAbort {
        reason: u32,
    },
}

impl Injection {
    pub fn kind(&self) -> FaultKind {
        match self {
            Injection::WildStore { .. } => FaultKind::WildStore,
            Injection::CrossDomainRead { .. } => FaultKind::CrossDomainRead,
            Injection::CanaryOverwrite { .. } => FaultKind::CanaryOverwrite,
            Injection::ExplicitAbort { .. } => FaultKind::ExplicitAbort,
        }
    }

    /// The violation this injection must produce.
    pub fn expected(&self) -> ViolationKind {
        match *self {
            Injection::WildStore { target } | Injection::CrossDomainRead { target } => {
                ViolationKind::ProtectionFault { address: target }
            }
            Injection::CanaryOverwrite { .. } => ViolationKind::CanaryMismatch,
            Injection::ExplicitAbort { reason } => ViolationKind::ExplicitAbort { reason },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Plan {
    pub injection: Injection,
    /// Bytes the attacker allocates before the fault.
    pub warm_arena_bytes: usize,
    /// Recursion depth reached before the fault.
    pub warm_stack_depth: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct InjectionResult {
    pub plan: Plan,
    /// `None` if the call completed, which is always a containment failure.
    pub report: Option<ViolationReport>,
}

impl InjectionResult {
    pub fn kind_matches(&self) -> bool {
        self.report.map(|r| r.kind) == Some(self.plan.injection.expected())
    }
}

pub struct FaultInjector {
    rng: StdRng,
    integrity: Domain,
    confidential: Domain,
    victim: Domain,
    store_targets: Vec<MemoryRegion>,
    read_targets: Vec<MemoryRegion>,
}

impl FaultInjector {
    /// Targets that trap on every backend: the victim's arena, the
    /// attacker's guard page and unmapped slots of the domain window. With
    /// hardware keys, [`trusted_victims`] are added as well.
    pub fn new(backend: Arc<dyn IsolationBackend>, seed: u64) -> Result<FaultInjector, DomainError> {
        let small = DomainConfig::default().with_arena_bytes(ATTACKER_ARENA).with_stack_bytes(128 * 1024);
        let integrity = Domain::create(backend.clone(), small)?;
        let confidential = Domain::create(backend.clone(), small.with_mode(IsolationMode::Confidentiality))?;
        let victim = Domain::create(backend.clone(), DomainConfig::default().with_arena_bytes(VICTIM_ARENA))?;
        victim.write_arena(&[0xc5; 4096])?;

        let page = crate::backend::page_size();
        let window = domain_window();
        let unmapped = MemoryRegion::new(window.end() - 16 * page, 16 * page).expect("aligned");
        let guard = MemoryRegion::new(integrity.arena_region().end(), page).expect("aligned");
        let mut store_targets = vec![victim.arena_region(), guard, unmapped];
        let mut read_targets = vec![victim.arena_region(), unmapped];
        if backend.kind() == BackendKind::Hardware {
            store_targets.extend(trusted_victims());
            read_targets.extend(trusted_victims());
        }
        Ok(FaultInjector {
            rng: StdRng::seed_from_u64(seed),
            integrity,
            confidential,
            victim,
            store_targets,
            read_targets,
        })
    }

    /// Adds regions of ordinary process memory as wild-store targets. Only
    /// sound with hardware keys; the portable backend cannot revoke access
    /// to untagged memory.
    pub fn add_store_targets(&mut self, regions: impl IntoIterator<Item = MemoryRegion>) {
        self.store_targets.extend(regions);
    }

    /// Adds regions as cross-domain read targets. Same caveat as
    /// [`add_store_targets`](Self::add_store_targets).
    pub fn add_read_targets(&mut self, regions: impl IntoIterator<Item = MemoryRegion>) {
        self.read_targets.extend(regions);
    }

    pub fn store_targets(&self) -> &[MemoryRegion] {
        &self.store_targets
    }

    pub fn victim(&self) -> &Domain {
        &self.victim
    }

    /// Domains the injector itself owns, for excluding from memory checks.
    pub fn domains(&self) -> [&Domain; 3] {
        [&self.integrity, &self.confidential, &self.victim]
    }

    pub fn plan(&mut self, kind: FaultKind) -> Plan {
        let injection = match kind {
            FaultKind::WildStore => Injection::WildStore { target: pick(&mut self.rng, &self.store_targets) },
            FaultKind::CrossDomainRead => {
                Injection::CrossDomainRead { target: pick(&mut self.rng, &self.read_targets) }
            }
            FaultKind::CanaryOverwrite => Injection::CanaryOverwrite { top: self.rng.gen() },
            FaultKind::ExplicitAbort => Injection::ExplicitAbort { reason: self.rng.gen_range(0..0xffff_0000) },
        };
        // The read probe runs without a Rust runtime, so nothing to warm.
        let warm = !matches!(injection, Injection::CrossDomainRead { .. });
        Plan {
            injection,
            warm_arena_bytes: if warm { self.rng.gen_range(0..ATTACKER_ARENA / 4) } else { 0 },
            warm_stack_depth: if warm { self.rng.gen_range(0..64) } else { 0 },
        }
    }

    pub fn random_plan(&mut self) -> Plan {
        let kind = *FaultKind::ALL.choose(&mut self.rng).expect("non-empty");
        self.plan(kind)
    }

    pub fn run(&self, plan: &Plan) -> Result<InjectionResult, DomainError> {
        if let Injection::CrossDomainRead { target } = plan.injection {
            // SAFETY: the probe is self-contained and cannot unwind.
            let outcome = unsafe { self.confidential.execute_raw(probe_load, target)? };
            return Ok(InjectionResult { plan: *plan, report: outcome.report().copied() });
        }
        let call = MarshalledCall::from_bytes("inject", Vec::new());
        let p = *plan;
        let domain = &self.integrity;
        let (top_canary, bottom_canary) = (domain.canary_address(true), domain.canary_address(false));
        let entry = move |ctx: &mut DomainContext, _: &[u8]| -> Vec<u8> {
            warm_up(ctx, p.warm_arena_bytes, p.warm_stack_depth);
            // SAFETY: none of these are sound; faulting is the point.
            unsafe {
                match p.injection {
                    Injection::WildStore { target } => (target as *mut u64).write_volatile(SENTINEL),
                    Injection::CrossDomainRead { .. } => unreachable!("runs as a raw probe"),
                    Injection::CanaryOverwrite { top } => {
                        let at = if top { top_canary } else { bottom_canary };
                        (at as *mut u64).write_volatile(SENTINEL);
                    }
                    Injection::ExplicitAbort { reason } => ctx.abort(reason),
                }
            }
            Vec::new()
        };
        let outcome = domain.execute(&call, &entry)?;
        Ok(InjectionResult { plan: p, report: outcome.report().copied() })
    }
}

/// One load from the address in the first argument register, and nothing
/// else: no calls, no stack traffic.
unsafe extern "C" fn probe_load(addr: *mut u8) {
    std::arch::asm!("mov {tmp}, qword ptr [{addr}]", addr = in(reg) addr, tmp = out(reg) _, options(nostack, readonly));
}

fn pick(rng: &mut StdRng, regions: &[MemoryRegion]) -> usize {
    let region = regions.choose(rng).expect("at least one target region");
    let words = (region.len() / 8).max(1);
    region.base() + rng.gen_range(0..words) * 8
}

#[inline(never)]
fn warm_up(ctx: &mut DomainContext, arena_bytes: usize, depth: u32) {
    if arena_bytes > 0 {
        if let Ok(block) = ctx.alloc(arena_bytes, 16) {
            // SAFETY: freshly allocated block of `arena_bytes` bytes.
            unsafe { std::ptr::write_bytes(block.as_ptr(), 0x5a, arena_bytes) };
        }
    }
    recurse(depth);
}

#[inline(never)]
fn recurse(depth: u32) -> u64 {
    let frame = std::hint::black_box([depth as u64; 32]);
    if depth == 0 {
        return frame[0];
    }
    recurse(depth - 1).wrapping_add(frame[31])
}

#[repr(C, align(4096))]
struct VictimPages([u8; 4 * 4096]);

static mut STATIC_VICTIM: VictimPages = VictimPages([0x3c; 4 * 4096]);

/// Trusted memory set aside as wild-store and read targets: pages of a
/// static and of a heap block. Nothing writes them after creation.
pub fn trusted_victims() -> Vec<MemoryRegion> {
    static HEAP: std::sync::OnceLock<usize> = std::sync::OnceLock::new();
    let page = crate::backend::page_size();
    let heap = *HEAP.get_or_init(|| {
        let layout = std::alloc::Layout::from_size_align(4 * page, page).expect("valid layout");
        use std::alloc::GlobalAlloc;
        // SAFETY: non-zero size; leaked on purpose.
        let ptr = unsafe { std::alloc::System.alloc(layout) };
        assert!(!ptr.is_null(), "out of memory");
        unsafe { std::ptr::write_bytes(ptr, 0x7e, 4 * page) };
        ptr as usize
    });
    let stat = std::ptr::addr_of!(STATIC_VICTIM) as usize;
    vec![
        MemoryRegion::new(stat, 4 * 4096).expect("aligned static"),
        MemoryRegion::new(heap, 4 * page).expect("aligned heap block"),
    ]
}
