mod common;

use std::collections::BTreeMap;
use std::sync::Arc;

use domain_rewind::backend::{BackendCall, PortableBackend};
use domain_rewind::inject::{FaultInjector, FaultKind};
use domain_rewind::marshal::{marshal_return, unmarshal_out, Codec, MsgPack};
use domain_rewind::monitor::REASON_ARENA_EXHAUSTED;
use domain_rewind::resilience::{recovery_budget, replica_model, AvailabilityModel, SECONDS_PER_YEAR};
use domain_rewind::snapshot::{self, RewindError};
use domain_rewind::{
    domain_window, Domain, DomainConfig, DomainContext, DomainError, DomainOutcome, DomainState, IsolationBackend,
    MarshalledCall, ViolationKind, ViolationReport,
};
use proptest::prelude::*;
use serde::{Deserialize, Serialize};

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

fn domain(backend: &Arc<dyn IsolationBackend>, arena: usize) -> Domain {
    Domain::create(backend.clone(), DomainConfig::default().with_arena_bytes(arena)).unwrap()
}

fn call(id: &str) -> MarshalledCall {
    MarshalledCall::from_bytes(id, Vec::new())
}

fn completed(out: DomainOutcome) -> Vec<u8> {
    match out {
        DomainOutcome::Completed(bytes) => bytes,
        DomainOutcome::Violated(r) => panic!("unexpected violation: {r}"),
    }
}

// Allocator

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn arena_blocks_are_disjoint_aligned_and_contained(
        requests in prop::collection::vec((1usize..8192, 0u32..8, any::<bool>()), 1..96)
    ) {
        let _s = common::serial();
        for backend in common::enforcing() {
            let d = domain(&backend, 1 << 20);
            let input = marshal_return(&requests);
            let entry = |ctx: &mut DomainContext, input: &[u8]| -> Vec<u8> {
                let requests: Vec<(usize, u32, bool)> = unmarshal_out(input).unwrap();
                let mut blocks = Vec::new();
                for (size, align_log, via_global) in requests {
                    let align = 1usize << align_log;
                    let addr = if via_global {
                        let layout = std::alloc::Layout::from_size_align(size, align).unwrap();
                        // Leaked; the arena reset reclaims it.
                        unsafe { std::alloc::alloc(layout) as usize }
                    } else {
                        ctx.alloc(size, align).unwrap().as_ptr() as usize
                    };
                    blocks.push((addr, size, align));
                }
                let (lo, hi) = ctx.arena_bounds();
                marshal_return(&(blocks, lo, hi))
            };
            let out = d.execute(&MarshalledCall::from_bytes("alloc", input), &entry).unwrap();
            let (mut blocks, lo, hi): (Vec<(usize, usize, usize)>, usize, usize) = unmarshal_out(&completed(out)).unwrap();
            prop_assert!(d.arena_region().contains(lo) && hi <= d.arena_region().end());
            for &(addr, size, align) in &blocks {
                prop_assert_eq!(addr % align, 0);
                prop_assert!(addr >= lo && addr + size <= hi, "{:#x}+{} outside {:#x}..{:#x}", addr, size, lo, hi);
            }
            blocks.sort();
            for pair in blocks.windows(2) {
                prop_assert!(pair[0].0 + pair[0].1 <= pair[1].0, "overlap: {:?}", pair);
            }
            let state = d.arena_state();
            prop_assert_eq!(state.watermark, state.baseline, "arena resets after the call");
            d.destroy().unwrap();
        }
    }
}

#[test]
fn allocations_outside_domains_stay_out_of_the_window() {
    let boxed = Box::new([0u8; 4096]);
    assert!(!domain_window().contains(boxed.as_ptr() as usize));
}

// Marshalling

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Shape {
    Unit,
    Circle(f64),
    Rect { w: u32, h: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Record {
    id: u64,
    delta: i64,
    name: String,
    tags: Vec<String>,
    score: Option<i32>,
    #[serde(with = "serde_bytes")]
    blob: Vec<u8>,
    pairs: Vec<(u16, bool)>,
    index: BTreeMap<String, i64>,
    shape: Shape,
    ratio: f64,
}

fn record() -> impl Strategy<Value = Record> {
    let shape = prop_oneof![
        Just(Shape::Unit),
        (-1e12f64..1e12).prop_map(Shape::Circle),
        (any::<u32>(), any::<u32>()).prop_map(|(w, h)| Shape::Rect { w, h }),
    ];
    (
        (any::<u64>(), any::<i64>(), "\\PC{0,24}", prop::collection::vec("[a-z]{0,8}", 0..6)),
        (
            any::<Option<i32>>(),
            prop::collection::vec(any::<u8>(), 0..512),
            prop::collection::vec(any::<(u16, bool)>(), 0..8),
        ),
        (
            prop::collection::btree_map("[a-z]{1,6}", any::<i64>(), 0..6),
            shape,
            prop::num::f64::NORMAL | prop::num::f64::ZERO,
        ),
    )
        .prop_map(|((id, delta, name, tags), (score, blob, pairs), (index, shape, ratio))| Record {
            id,
            delta,
            name,
            tags,
            score,
            blob,
            pairs,
            index,
            shape,
            ratio,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn codec_round_trip(value in record()) {
        let bytes = MsgPack::encode(&value).unwrap();
        prop_assert_eq!(MsgPack::decode::<Record>(&bytes).unwrap(), value);
    }

    #[test]
    fn domain_echo_round_trip(value in record()) {
        static ECHO: std::sync::OnceLock<domain_rewind::GuardedFunction<Record, Record>> = std::sync::OnceLock::new();
        let echo = ECHO.get_or_init(|| {
            domain_rewind::guard("echo-record", |r: Record| r, domain_rewind::GuardPolicy::persistent()).unwrap()
        });
        prop_assert_eq!(echo.invoke(value.clone()), Ok(value));
    }
}

#[test]
fn trailing_bytes_and_wrong_types_are_decode_errors() {
    let mut bytes = MsgPack::encode(&7u32).unwrap();
    bytes.push(0);
    assert!(MsgPack::decode::<u32>(&bytes).is_err());
    assert!(MsgPack::decode::<String>(&MsgPack::encode(&7u32).unwrap()).is_err());
}

// Domain lifecycle

/// Independent statement of the lifecycle relation.
const ALLOWED: [(DomainState, DomainState); 6] = [
    (DomainState::Initialized, DomainState::Active),
    (DomainState::Active, DomainState::Initialized),
    (DomainState::Active, DomainState::Faulted),
    (DomainState::Faulted, DomainState::Initialized),
    (DomainState::Initialized, DomainState::Retired),
    (DomainState::Faulted, DomainState::Retired),
];

const STATES: [DomainState; 4] =
    [DomainState::Initialized, DomainState::Active, DomainState::Faulted, DomainState::Retired];

#[test]
fn transition_table_matches() {
    for a in STATES {
        for b in STATES {
            assert_eq!(a.can_transition_to(b), ALLOWED.contains(&(a, b)), "{a:?} -> {b:?}");
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Complete(u32),
    Abort(u32),
    WildStore,
    SmashCanary,
    Reenter,
    Destroy,
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => any::<u32>().prop_map(Op::Complete),
        2 => (0u32..0xffff_0000).prop_map(Op::Abort),
        2 => Just(Op::WildStore),
        1 => Just(Op::SmashCanary),
        1 => Just(Op::Reenter),
        1 => Just(Op::Destroy),
    ]
}

/// What the model predicts for one operation.
#[derive(Debug, PartialEq)]
enum Observed {
    Value(u32),
    Violation(&'static str),
    Retired,
    Destroyed,
}

fn apply(d: &Domain, op: Op) -> (Observed, DomainState) {
    let end = d.arena_region().end();
    let top = d.canary_address(true);
    let entry = move |ctx: &mut DomainContext, _: &[u8]| -> Vec<u8> {
        assert_eq!(d.state(), DomainState::Active);
        match op {
            Op::Complete(v) => marshal_return(&v),
            Op::Abort(r) => ctx.abort(r),
            Op::WildStore => {
                unsafe { (end as *mut u8).write_volatile(1) };
                Vec::new()
            }
            Op::SmashCanary => {
                unsafe { (top as *mut u64).write_volatile(0) };
                Vec::new()
            }
            Op::Reenter => {
                let inner = |_: &mut DomainContext, _: &[u8]| Vec::new();
                let busy = matches!(d.execute(&call("again"), &inner), Err(DomainError::BusyDomain(_)));
                marshal_return(&(busy as u32 + 1_000_000))
            }
            Op::Destroy => unreachable!(),
        }
    };
    let observed = match op {
        Op::Destroy => match d.destroy() {
            Ok(()) => Observed::Destroyed,
            Err(DomainError::IllegalState { state: DomainState::Retired, .. }) => Observed::Retired,
            Err(e) => panic!("{e}"),
        },
        _ => match d.execute(&call("op"), &entry) {
            Ok(DomainOutcome::Completed(bytes)) => Observed::Value(unmarshal_out(&bytes).unwrap()),
            Ok(DomainOutcome::Violated(r)) => Observed::Violation(r.kind.name()),
            Err(DomainError::IllegalState { state: DomainState::Retired, .. }) => Observed::Retired,
            Err(e) => panic!("{e}"),
        },
    };
    (observed, d.state())
}

fn model(retired: &mut bool, op: Op) -> (Observed, DomainState) {
    if *retired {
        return (Observed::Retired, DomainState::Retired);
    }
    let observed = match op {
        Op::Complete(v) => Observed::Value(v),
        Op::Abort(_) => Observed::Violation("explicit-abort"),
        Op::WildStore => Observed::Violation("protection-fault"),
        Op::SmashCanary => Observed::Violation("canary-mismatch"),
        Op::Reenter => Observed::Value(1_000_001),
        Op::Destroy => {
            *retired = true;
            return (Observed::Destroyed, DomainState::Retired);
        }
    };
    (observed, DomainState::Initialized)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn domain_conforms_to_lifecycle_model(ops in prop::collection::vec(op(), 1..24)) {
        let _s = common::serial();
        for backend in common::enforcing() {
            let d = domain(&backend, 256 * 1024);
            let mut retired = false;
            let mut previous = d.state();
            prop_assert_eq!(previous, DomainState::Initialized);
            for &op in &ops {
                let expected = model(&mut retired, op);
                let got = apply(&d, op);
                prop_assert_eq!(&got, &expected, "{:?} on {:?}", op, backend.kind());
                let next = got.1;
                prop_assert!(
                    next == previous || previous.can_transition_to(next)
                        || (previous.can_transition_to(DomainState::Active) && DomainState::Active.can_transition_to(next)),
                    "{:?} -> {:?}", previous, next
                );
                previous = next;
            }
            if !retired {
                d.destroy().unwrap();
            }
        }
    }
}

// Snapshots

fn report(domain_id: u64, reason: u32) -> ViolationReport {
    ViolationReport { kind: ViolationKind::ExplicitAbort { reason }, domain_id, thread_id: 0, timestamp_ns: 0 }
}

#[test]
fn rewind_outside_any_domain_is_stale() {
    let fake = domain_rewind::ExecutionSnapshot { domain_id: 1, epoch: 1, depth: 0, valid: true };
    assert_eq!(rewind_err(&fake), RewindError::StaleSnapshot { domain_id: 1, epoch: 1 });
    assert!(snapshot::current().is_none());
}

fn rewind_err(s: &domain_rewind::ExecutionSnapshot) -> RewindError {
    snapshot::rewind_to(s, report(s.domain_id, 0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Every call gets a fresh epoch; a snapshot is usable only during its
    /// own call and only once.
    #[test]
    fn snapshots_are_single_use(rewind_in in prop::collection::vec(any::<bool>(), 1..12), reason in 0u32..0xffff_0000) {
        let _s = common::serial();
        for backend in common::enforcing() {
            let d = domain(&backend, 256 * 1024);
            let mut last: Option<domain_rewind::ExecutionSnapshot> = None;
            let mut last_epoch = d.epoch();
            for &rewind in &rewind_in {
                let stale = last;
                let entry = move |_: &mut DomainContext, _: &[u8]| -> Vec<u8> {
                    let live = snapshot::current().expect("inside a call");
                    let stale_result = stale.map(|s| rewind_err(&s));
                    if rewind {
                        let _ = snapshot::rewind_to(&live, report(live.domain_id, reason));
                        unreachable!("a live snapshot always rewinds");
                    }
                    marshal_return(&(live, stale_result.map(|e| e.to_string())))
                };
                let out = d.execute(&call("snap"), &entry).unwrap();
                prop_assert!(d.epoch() > last_epoch, "epoch must increase");
                last_epoch = d.epoch();
                if rewind {
                    let r = *out.report().expect("rewound");
                    prop_assert_eq!(r.kind, ViolationKind::ExplicitAbort { reason });
                    prop_assert_eq!(r.domain_id, d.id());
                    last = Some(domain_rewind::ExecutionSnapshot { domain_id: d.id(), epoch: d.epoch(), depth: 0, valid: true });
                } else {
                    let (live, stale_result): (SnapshotView, Option<String>) = unmarshal_out(&completed(out)).unwrap();
                    prop_assert_eq!((live.domain_id, live.epoch, live.depth, live.valid), (d.id(), d.epoch(), 0, true));
                    prop_assert_eq!(stale_result.is_some(), stale.is_some());
                    if let Some(msg) = stale_result {
                        prop_assert!(msg.contains("not the live innermost"), "{}", msg);
                    }
                    last = Some(domain_rewind::ExecutionSnapshot { domain_id: live.domain_id, epoch: live.epoch, depth: 0, valid: true });
                }
            }
            d.destroy().unwrap();
        }
    }
}

#[derive(Deserialize)]
struct SnapshotView {
    domain_id: u64,
    epoch: u64,
    depth: usize,
    valid: bool,
}

#[test]
fn outer_snapshot_is_not_reachable_from_inner_call() {
    let _s = common::serial();
    for backend in common::enforcing() {
        let outer = domain(&backend, 256 * 1024);
        let inner = domain(&backend, 256 * 1024);
        let entry = |_: &mut DomainContext, _: &[u8]| -> Vec<u8> {
            let outer_snap = snapshot::current().unwrap();
            // By value: the outer stack is off limits to the inner domain.
            let nested = move |_: &mut DomainContext, _: &[u8]| -> Vec<u8> {
                let depths: Vec<usize> = snapshot::live_snapshots().iter().map(|s| s.depth).collect();
                let err = rewind_err(&outer_snap);
                marshal_return(&(depths, err.to_string()))
            };
            completed(inner.execute(&call("inner"), &nested).unwrap())
        };
        let (depths, err): (Vec<usize>, String) =
            unmarshal_out(&completed(outer.execute(&call("outer"), &entry).unwrap())).unwrap();
        assert_eq!(depths, vec![0, 1]);
        assert!(err.contains(&format!("domain {}", outer.id())), "{err}");
    }
}

// Backend equivalence

/// Runs a fixed set of scenarios and describes each outcome without
/// addresses, so that backends can be compared.
fn scenarios(backend: &Arc<dyn IsolationBackend>) -> Vec<String> {
    let d = domain(backend, 1 << 20);
    let other = domain(backend, 64 * 1024);
    let end = d.arena_region().end();
    let other_base = other.arena_region().base();
    let unmapped = domain_window().end() - 4096;
    let canary = d.canary_address(false);
    let describe = |out: DomainOutcome| -> String {
        match out {
            DomainOutcome::Completed(bytes) => format!("completed:{bytes:?}"),
            DomainOutcome::Violated(r) => match r.kind {
                ViolationKind::ProtectionFault { address } if address == end => "fault:arena-end".into(),
                ViolationKind::ProtectionFault { address } if address == other_base => "fault:other-arena".into(),
                ViolationKind::ProtectionFault { address } if address == unmapped => "fault:unmapped".into(),
                ViolationKind::ProtectionFault { address } => format!("fault:{address:#x}"),
                kind => format!("{kind:?}"),
            },
        }
    };
    let store = |at: usize| {
        move |_: &mut DomainContext, _: &[u8]| -> Vec<u8> {
            unsafe { (at as *mut u64).write_volatile(1) };
            vec![0]
        }
    };
    let mut out = Vec::new();
    let mut run = |name: &str, out_: DomainOutcome| {
        out.push(format!("{name}: {} then {:?}", describe(out_), d.state()));
    };
    run("complete", d.execute(&call("c"), &|_: &mut DomainContext, _: &[u8]| vec![1, 2, 3]).unwrap());
    run("own-arena", d.execute(&call("s"), &store(d.arena_region().base() + 64)).unwrap());
    run("arena-end", d.execute(&call("s"), &store(end)).unwrap());
    run("other-arena", d.execute(&call("s"), &store(other_base)).unwrap());
    run("unmapped", d.execute(&call("s"), &store(unmapped)).unwrap());
    run("abort", d.execute(&call("a"), &|ctx: &mut DomainContext, _: &[u8]| -> Vec<u8> { ctx.abort(42) }).unwrap());
    run("canary", d.execute(&call("k"), &store(canary)).unwrap());
    let exhaust = |_: &mut DomainContext, _: &[u8]| -> Vec<u8> { vec![7u8; 4 << 20] };
    run("exhaust", d.execute(&call("x"), &exhaust).unwrap());
    let nested = |_: &mut DomainContext, _: &[u8]| -> Vec<u8> {
        let inner = |ctx: &mut DomainContext, _: &[u8]| -> Vec<u8> { ctx.abort(3) };
        let r = other.execute(&call("inner"), &inner).unwrap();
        r.report().unwrap().kind.name().as_bytes().to_vec()
    };
    run("nested", d.execute(&call("n"), &nested).unwrap());
    out.push(format!("watermark-reset: {}", d.arena_state().watermark == d.arena_state().baseline));
    let mut injector = FaultInjector::new(backend.clone(), 99).unwrap();
    for kind in FaultKind::ALL {
        let matched = (0..8).all(|_| {
            let plan = injector.plan(kind);
            injector.run(&plan).unwrap().kind_matches()
        });
        out.push(format!("inject {kind:?}: {matched}"));
    }
    d.destroy().unwrap();
    other.destroy().unwrap();
    out
}

#[test]
fn backends_are_observationally_equivalent() {
    let _s = common::serial();
    let Some(hw) = common::hardware() else {
        eprintln!("notice: protection keys unavailable on this machine; hardware comparison skipped");
        return;
    };
    let portable: Arc<dyn IsolationBackend> = Arc::new(PortableBackend::new());
    let a = scenarios(&hw);
    let b = scenarios(&portable);
    assert_eq!(a, b);
    assert!(a.iter().any(|l| l.contains(&format!("ExplicitAbort {{ reason: {REASON_ARENA_EXHAUSTED} }}"))), "{a:#?}");
    assert!(a.iter().all(|l| !l.contains("fault:0x")), "{a:#?}");
}

#[test]
fn recording_backend_sees_the_full_lifecycle() {
    let recording = common::recording();
    let backend: Arc<dyn IsolationBackend> = recording.clone();
    let d = domain(&backend, 64 * 1024);
    let key = d.key().key_id();
    completed(d.execute(&call("c"), &|_: &mut DomainContext, _: &[u8]| Vec::new()).unwrap());
    d.destroy().unwrap();
    let calls = recording.calls();
    let pos = |pred: &dyn Fn(&BackendCall) -> bool| calls.iter().position(pred).unwrap_or_else(|| panic!("{calls:#?}"));
    let acquire = pos(&|c| *c == BackendCall::AcquireKey(Ok(key)));
    let tag = pos(&|c| matches!(c, BackendCall::TagRegion { key: k, .. } if *k == key));
    let enter = pos(&|c| matches!(c, BackendCall::EnterDomain { key: k, .. } if *k == key));
    let leave = pos(&|c| *c == BackendCall::LeaveDomain);
    let untag = pos(&|c| matches!(c, BackendCall::UntagRegion { .. }));
    let release = pos(&|c| *c == BackendCall::ReleaseKey(key));
    assert!(acquire < tag && tag < enter && enter < leave && leave < untag && untag < release, "{calls:#?}");
}

// Availability arithmetic

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn budget_is_the_largest_rate_meeting_the_target(
        nines in 1u32..7,
        recovery in prop_oneof![1e-7f64..1e-3, 1e-3f64..10.0, 10.0f64..3600.0],
    ) {
        let target = 1.0 - 10f64.powi(-(nines as i32));
        let budget = recovery_budget(target, recovery).unwrap();
        let unavailability = |n: u64| n as f64 * recovery / SECONDS_PER_YEAR;
        prop_assert!(1.0 - unavailability(budget) >= target);
        prop_assert!(1.0 - unavailability(budget + 1) < target);
        if budget > 0 {
            prop_assert!(AvailabilityModel::new(budget as f64, recovery, target).unwrap().meets_target());
        }
    }

    #[test]
    fn replication_never_hurts(a in 0.0f64..=1.0, n in 1u32..16) {
        prop_assert!((replica_model(a, 1).unwrap() - a).abs() < 1e-12);
        let an = replica_model(a, n).unwrap();
        let an1 = replica_model(a, n + 1).unwrap();
        prop_assert!(an1 >= an - 1e-15 && an1 <= 1.0);
        prop_assert!((an - (1.0 - (1.0 - a).powi(n as i32))).abs() < 1e-12);
    }
}
