mod common;

use domain_rewind::inject::{trusted_victims, FaultInjector, FaultKind};
use domain_rewind::BackendKind;

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

fn victim_checksum() -> u64 {
    trusted_victims()
        .iter()
        .map(|r| common::checksum(unsafe { std::slice::from_raw_parts(r.base() as *const u8, r.len()) }))
        .fold(0, |acc, c| acc.rotate_left(7) ^ c)
}

#[test]
fn every_fault_kind_is_contained() {
    let _g = common::serial();
    for backend in common::enforcing() {
        let mut injector = FaultInjector::new(backend.clone(), 42).unwrap();
        let victim_before = injector.victim().read_arena(0, 4096).unwrap();
        let trusted_before = victim_checksum();
        for kind in FaultKind::ALL {
            for _ in 0..25 {
                let plan = injector.plan(kind);
                let result = injector.run(&plan).unwrap();
                assert!(result.kind_matches(), "{:?}: {plan:?} gave {:?}", backend.kind(), result.report);
            }
        }
        assert_eq!(injector.victim().read_arena(0, 4096).unwrap(), victim_before);
        assert_eq!(victim_checksum(), trusted_before);
        if backend.kind() == BackendKind::Hardware {
            let targets = injector.store_targets().len();
            assert_eq!(targets, 5, "trusted victims are targets under hardware keys");
        }
    }
}
