mod common;

use std::sync::Arc;

use domain_rewind::backend::BackendCall;
use domain_rewind::guard::is_registered;
use domain_rewind::{
    guard, guarded, DomainContext, GuardError, GuardPolicy, GuardedFunction, IsolationBackend, OnViolation,
    ViolationKind,
};
use proptest::prelude::*;

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

fn arith((a, b, shift): (u64, u64, u32)) -> Option<u64> {
    a.checked_mul(b)?.checked_add(shift as u64).map(|v| v.rotate_left(shift % 64))
}

/// `name=int` pairs separated by `;`.
fn parse_pairs(text: String) -> Parsed {
    text.split(';')
        .filter(|part| !part.is_empty())
        .map(|part| {
            let (name, value) = part.split_once('=').ok_or_else(|| format!("missing '=' in {part:?}"))?;
            let value = value.trim().parse::<i64>().map_err(|e| format!("{name}: {e}"))?;
            Ok((name.trim().to_string(), value))
        })
        .collect()
}

/// Run-length encoding as (count, byte) pairs.
fn run_length(buf: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::new();
    for &b in &buf {
        match out.len() {
            n if n >= 2 && out[n - 1] == b && out[n - 2] < u8::MAX => out[n - 2] += 1,
            _ => out.extend_from_slice(&[1, b]),
        }
    }
    out
}

fn crash_on_odd(n: u64) -> u64 {
    if n % 2 == 1 {
        let ctx = DomainContext::current().expect("runs in a domain");
        let (_, end) = ctx.arena_bounds();
        unsafe { (end as *mut u8).write_volatile(1) };
    }
    n * 10
}

fn abort_on_first_attempt(n: u64) -> u64 {
    let ctx = DomainContext::current().expect("runs in a domain");
    if ctx.attempt() == 0 {
        ctx.abort(77);
    }
    n + ctx.attempt() as u64
}

type Parsed = Result<Vec<(String, i64)>, String>;

fn unique(name: &str) -> String {
    static NEXT: std::sync::atomic::AtomicU32 = std::sync::atomic::AtomicU32::new(0);
    format!("{name}#{}", NEXT.fetch_add(1, std::sync::atomic::Ordering::Relaxed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn arithmetic_is_transparent(a in any::<u64>(), b in 0u64..1 << 20, shift in any::<u32>()) {
        static G: std::sync::OnceLock<GuardedFunction<(u64, u64, u32), Option<u64>>> = std::sync::OnceLock::new();
        let g = G.get_or_init(|| guard("transparent-arith", arith, GuardPolicy::persistent()).unwrap());
        prop_assert_eq!(g.invoke((a, b, shift)), Ok(arith((a, b, shift))));
    }

    #[test]
    fn string_parser_is_transparent(text in "([a-z]{0,6}=-?[0-9]{0,5};?){0,6}|\\PC{0,40}") {
        static G: std::sync::OnceLock<GuardedFunction<String, Parsed>> = std::sync::OnceLock::new();
        let g = G.get_or_init(|| guard("transparent-parse", parse_pairs, GuardPolicy::persistent()).unwrap());
        prop_assert_eq!(g.invoke(text.clone()), Ok(parse_pairs(text)));
    }

    #[test]
    fn buffer_transform_is_transparent(buf in prop::collection::vec(prop_oneof![Just(0u8), Just(7u8), any::<u8>()], 0..2048)) {
        static G: std::sync::OnceLock<GuardedFunction<Vec<u8>, Vec<u8>>> = std::sync::OnceLock::new();
        let g = G.get_or_init(|| guard("transparent-rle", run_length, GuardPolicy::persistent()).unwrap());
        prop_assert_eq!(g.invoke(buf.clone()), Ok(run_length(buf)));
    }
}

#[test]
fn run_length_oracle() {
    assert_eq!(run_length(vec![5, 5, 5, 1]), vec![3, 5, 1, 1]);
    assert_eq!(run_length(vec![9; 300]), vec![255, 9, 45, 9]);
    assert_eq!(parse_pairs("a=1;b = -2".into()), Ok(vec![("a".into(), 1), ("b".into(), -2)]));
}

#[test]
fn persistent_mode_reuses_one_domain() {
    let recording = common::recording();
    let backend: Arc<dyn IsolationBackend> = recording.clone();
    let g = GuardedFunction::builder(unique("persist"), |n: u64| n + 1).backend(backend).build().unwrap();
    for n in 0..100 {
        assert_eq!(g.invoke(n), Ok(n + 1));
    }
    assert_eq!(recording.acquisitions(), 1);
    g.release_thread_domain();
    assert!(recording.calls().iter().any(|c| matches!(c, BackendCall::ReleaseKey(_))));
}

#[test]
fn per_call_mode_creates_a_domain_each_time() {
    let recording = common::recording();
    let backend: Arc<dyn IsolationBackend> = recording.clone();
    let g = GuardedFunction::builder(unique("per-call"), |n: u64| n * 2)
        .policy(GuardPolicy::per_call())
        .backend(backend)
        .build()
        .unwrap();
    for n in 0..100 {
        assert_eq!(g.invoke(n), Ok(n * 2));
    }
    let calls = recording.calls();
    assert_eq!(recording.acquisitions(), 100);
    assert_eq!(calls.iter().filter(|c| matches!(c, BackendCall::ReleaseKey(_))).count(), 100);
}

#[test]
fn violation_policies() {
    let _g = common::serial();
    for backend in common::enforcing() {
        let plain = GuardedFunction::builder(unique("plain"), crash_on_odd).backend(backend.clone()).build().unwrap();
        assert_eq!(plain.invoke(2), Ok(20));
        let err = plain.invoke(3).unwrap_err();
        assert!(matches!(err.report().unwrap().kind, ViolationKind::ProtectionFault { .. }));
        assert_eq!(err.attempts(), Some(1));
        assert_eq!(plain.invoke(4), Ok(40), "the domain is reusable after a violation");

        let fallback = GuardedFunction::builder(unique("fallback"), crash_on_odd)
            .policy(GuardPolicy::default().with_fallback())
            .fallback(|n: &u64| *n)
            .backend(backend.clone())
            .build()
            .unwrap();
        let inv = fallback.invoke_detailed(5);
        assert_eq!((inv.result, inv.attempts, inv.fell_back), (Ok(5), 1, true));
        assert!(inv.last_violation.is_some());

        let retry = GuardedFunction::builder(unique("retry"), abort_on_first_attempt)
            .policy(GuardPolicy::default().with_retries(2))
            .backend(backend.clone())
            .build()
            .unwrap();
        let inv = retry.invoke_detailed(10);
        assert_eq!((inv.result, inv.attempts), (Ok(11), 2));

        let hopeless = GuardedFunction::builder(unique("hopeless"), crash_on_odd)
            .policy(GuardPolicy::per_call().with_retries(3))
            .backend(backend)
            .build()
            .unwrap();
        assert_eq!(hopeless.invoke(1).unwrap_err().attempts(), Some(4));
    }
}

#[test]
fn registry_rejects_duplicates_and_forgets_dropped_functions() {
    let id = unique("dup");
    let first = guard(id.clone(), |n: u8| n, GuardPolicy::default()).unwrap();
    assert!(is_registered(&id));
    let second = guard(id.clone(), |n: u8| n, GuardPolicy::default());
    assert!(matches!(second, Err(GuardError::DuplicateFunctionId(ref d)) if *d == id));
    drop(first);
    assert!(!is_registered(&id));
    assert!(guard(id, |n: u8| n, GuardPolicy::default()).is_ok());
}

#[test]
fn inconsistent_policies_are_rejected() {
    let no_producer = GuardPolicy { on_violation: OnViolation::FallbackValue, ..GuardPolicy::default() };
    assert!(matches!(guard(unique("bad"), |n: u8| n, no_producer), Err(GuardError::InvalidPolicy(_))));
    let stray_retries = GuardPolicy { retry_limit: 2, ..GuardPolicy::default() };
    assert!(matches!(guard(unique("bad"), |n: u8| n, stray_retries), Err(GuardError::InvalidPolicy(_))));
}

#[test]
fn guarded_call_nested_in_a_guarded_call() {
    let _g = common::serial();
    static INNER: std::sync::OnceLock<GuardedFunction<u64, u64>> = std::sync::OnceLock::new();
    let inner = INNER.get_or_init(|| guard("nested-inner", crash_on_odd, GuardPolicy::persistent()).unwrap());
    fn outer(n: u64) -> (Option<u64>, u64) {
        let inner = INNER.get().unwrap();
        (inner.invoke(n).ok(), n)
    }
    let _ = inner;
    let g = guard(unique("nested-outer"), outer, GuardPolicy::persistent()).unwrap();
    assert_eq!(g.invoke(4), Ok((Some(40), 4)));
    assert_eq!(g.invoke(5), Ok((None, 5)), "inner violation stays inside the inner domain");
}

#[guarded(fallback = |_| 0)]
fn macro_add(a: u32, b: u32) -> u32 {
    a.wrapping_add(b)
}

#[guarded(retry_limit = 2, mode = "per-call")]
fn macro_always_aborts(n: u64) -> u64 {
    if n > 0 {
        DomainContext::current().unwrap().abort(9);
    }
    n
}

#[guarded(id = "macro-crash", fallback = |args: &(u64,)| args.0)]
fn macro_crash(n: u64) -> u64 {
    crash_on_odd(n)
}

#[test]
fn attribute_macro_wraps_functions() {
    let _g = common::serial();
    assert_eq!(macro_add(2, 5), Ok(7));
    let e = macro_always_aborts(1).unwrap_err();
    assert_eq!(e.attempts(), Some(3));
    assert_eq!(e.report().unwrap().kind, ViolationKind::ExplicitAbort { reason: 9 });
    assert_eq!(macro_always_aborts(0), Ok(0));
    assert_eq!(macro_crash(3), Ok(3));
    assert_eq!(macro_crash(4), Ok(40));
    assert!(is_registered("macro-crash"));
}
