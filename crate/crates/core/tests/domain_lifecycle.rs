mod common;

use std::sync::Arc;

use domain_rewind::marshal::{marshal_return, unmarshal_out};
use domain_rewind::monitor::REASON_PANIC;
use domain_rewind::{
    Domain, DomainConfig, DomainError, DomainOutcome, DomainState, IsolationBackend, MarshalledCall, ViolationKind,
};

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

fn add(_: &mut domain_rewind::DomainContext, input: &[u8]) -> Vec<u8> {
    let (a, b): (u32, u32) = unmarshal_out(input).unwrap();
    marshal_return(&(a + b))
}

fn small(backend: &Arc<dyn IsolationBackend>) -> Domain {
    let config = DomainConfig::default().with_arena_bytes(1 << 20);
    Domain::create(backend.clone(), config).unwrap()
}

#[test]
fn add_completes_on_every_backend() {
    let _s = common::serial();
    for backend in common::enforcing() {
        let d = small(&backend);
        let call = MarshalledCall::encode("add", &(3u32, 4u32)).unwrap();
        let out = d.execute(&call, &add).unwrap();
        let DomainOutcome::Completed(bytes) = out else { panic!("{:?}: {out:?}", backend.kind()) };
        assert_eq!(unmarshal_out::<u32>(&bytes).unwrap(), 7);
        assert_eq!(d.state(), DomainState::Initialized);
        d.destroy().unwrap();
        assert_eq!(d.state(), DomainState::Retired);
    }
}

#[test]
fn store_past_arena_end_is_a_protection_fault() {
    let _s = common::serial();
    for backend in common::enforcing() {
        let d = small(&backend);
        let end = d.arena_region().end();
        let wild = move |_: &mut domain_rewind::DomainContext, _: &[u8]| -> Vec<u8> {
            unsafe { (end as *mut u8).write_volatile(1) };
            Vec::new()
        };
        let out = d.execute(&MarshalledCall::encode("wild", &()).unwrap(), &wild).unwrap();
        let report = *out.report().expect("violation");
        assert_eq!(report.kind, ViolationKind::ProtectionFault { address: end });
        assert_eq!(report.domain_id, d.id());
        assert_eq!(d.arena_state().watermark, d.arena_state().baseline);
        // the domain is reusable afterwards
        let again = d.execute(&MarshalledCall::encode("add", &(1u32, 1u32)).unwrap(), &add).unwrap();
        assert!(again.is_completed(), "{again:?}");
    }
}

#[test]
fn abort_and_panic_rewind() {
    let _s = common::serial();
    for backend in common::enforcing() {
        let d = small(&backend);
        let abort = |ctx: &mut domain_rewind::DomainContext, _: &[u8]| -> Vec<u8> { ctx.abort(17) };
        let out = d.execute(&MarshalledCall::encode("abort", &()).unwrap(), &abort).unwrap();
        assert_eq!(out.report().unwrap().kind, ViolationKind::ExplicitAbort { reason: 17 });

        let boom = |_: &mut domain_rewind::DomainContext, _: &[u8]| -> Vec<u8> { panic!("inside") };
        let out = d.execute(&MarshalledCall::encode("boom", &()).unwrap(), &boom).unwrap();
        // Under hardware keys the panic runtime's first write to its global
        // counter already faults; elsewhere the unwind is caught at the entry.
        match out.report().unwrap().kind {
            ViolationKind::ExplicitAbort { reason } => assert_eq!(reason, REASON_PANIC),
            ViolationKind::ProtectionFault { .. } => assert_eq!(backend.kind(), domain_rewind::BackendKind::Hardware),
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn smashed_canary_is_reported() {
    let _s = common::serial();
    for backend in common::enforcing() {
        let d = small(&backend);
        let top = d.canary_address(true);
        let smash = move |_: &mut domain_rewind::DomainContext, _: &[u8]| -> Vec<u8> {
            unsafe { (top as *mut u64).write_volatile(0) };
            vec![1, 2, 3]
        };
        let out = d.execute(&MarshalledCall::encode("smash", &()).unwrap(), &smash).unwrap();
        assert_eq!(out.report().unwrap().kind, ViolationKind::CanaryMismatch);
        assert!(d.check_canary().is_ok(), "canaries are replanted after discard");
    }
}

#[test]
fn nested_abort_leaves_outer_running() {
    let _s = common::serial();
    for backend in common::enforcing() {
        let outer = small(&backend);
        let inner = small(&backend);
        let entry = |_: &mut domain_rewind::DomainContext, _: &[u8]| -> Vec<u8> {
            let abort = |ctx: &mut domain_rewind::DomainContext, _: &[u8]| -> Vec<u8> { ctx.abort(5) };
            let r = inner.execute(&MarshalledCall::encode("inner", &()).unwrap(), &abort).unwrap();
            let kind = r.report().map(|r| r.kind.name()).unwrap_or("none");
            marshal_return(kind)
        };
        let out = outer.execute(&MarshalledCall::encode("outer", &()).unwrap(), &entry).unwrap();
        let DomainOutcome::Completed(bytes) = out else { panic!("{out:?}") };
        assert_eq!(unmarshal_out::<String>(&bytes).unwrap(), "explicit-abort");
    }
}

#[test]
fn busy_and_illegal_states() {
    let _s = common::serial();
    let backend = common::enforcing().remove(0);
    let d = small(&backend);
    let reenter = |_: &mut domain_rewind::DomainContext, _: &[u8]| -> Vec<u8> {
        let r = d.execute(&MarshalledCall::encode("x", &()).unwrap(), &add);
        marshal_return(&matches!(r, Err(DomainError::BusyDomain(_))))
    };
    let out = d.execute(&MarshalledCall::encode("re", &()).unwrap(), &reenter).unwrap();
    let DomainOutcome::Completed(bytes) = out else { panic!("{out:?}") };
    assert!(unmarshal_out::<bool>(&bytes).unwrap());
    d.destroy().unwrap();
    assert!(matches!(
        d.execute(&MarshalledCall::encode("x", &()).unwrap(), &add),
        Err(DomainError::IllegalState { state: DomainState::Retired, .. })
    ));
}
