mod common;

use std::collections::HashMap;
use std::sync::Arc;

use domain_rewind::kv::{GuardMode, KvClient, KvServer, ServerConfig, ServerHandle, Store};
use domain_rewind::IsolationBackend;
use rand::{Rng, SeedableRng};

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

fn start(backend: Option<Arc<dyn IsolationBackend>>, mode: GuardMode) -> ServerHandle {
    let config =
        ServerConfig { guard_mode: mode, handlers: 2, arena_bytes: 4 << 20, backend, ..ServerConfig::ephemeral() };
    KvServer::start(config, Arc::new(Store::new())).unwrap()
}

#[test]
fn set_get_delete_round_trip() {
    let _g = common::serial();
    for backend in common::enforcing() {
        let server = start(Some(backend), GuardMode::Persistent);
        let mut c = KvClient::connect(server.local_addr()).unwrap();
        c.set("k", b"v\r\nwith crlf").unwrap();
        assert_eq!(c.get("k").unwrap().as_deref(), Some(&b"v\r\nwith crlf"[..]));
        assert_eq!(c.get("missing").unwrap(), None);
        assert!(c.delete("k").unwrap());
        assert!(!c.delete("k").unwrap());
        c.set("a", &[7u8; 1000]).unwrap();
        let stats = c.stats().unwrap();
        assert_eq!((stats["items"], stats["bytes"], stats["rewinds"]), (1, 1000, 0));
        assert_eq!(stats["requests"], 7, "the STATS request counts itself");
    }
}

#[test]
fn malformed_requests_get_server_errors() {
    let _g = common::serial();
    let server = start(None, GuardMode::Persistent);
    let mut c = KvClient::connect(server.local_addr()).unwrap();
    let long_key = "k".repeat(300);
    assert!(c.get(&long_key).unwrap_err().is_server_error());
    assert!(c.raw(b"FROB x\r\n").unwrap().starts_with("SERVER_ERROR"));
    assert!(c.raw(b"GET\r\n").unwrap().starts_with("SERVER_ERROR"));
    // Connection still usable after parse errors.
    c.set("ok", b"1").unwrap();
    let reply = c.raw(format!("SET big {}\r\n", 2 << 20).as_bytes()).unwrap();
    assert!(reply.starts_with("SERVER_ERROR"), "{reply}");
}

#[test]
fn crashme_is_recovered_and_counted() {
    let _g = common::serial();
    for backend in common::enforcing() {
        for mode in [GuardMode::Persistent, GuardMode::PerCall] {
            let server = start(Some(backend.clone()), mode);
            let mut c = KvClient::connect(server.local_addr()).unwrap();
            c.set("before", b"x").unwrap();
            for i in 0..5 {
                assert_eq!(c.crashme(&format!("c{i}")).unwrap(), "SERVER_ERROR recovered");
            }
            assert_eq!(c.get("before").unwrap().as_deref(), Some(&b"x"[..]));
            assert_eq!(c.stats().unwrap()["rewinds"], 5);
            assert_eq!(server.stats().rewinds, 5);
        }
    }
}

#[test]
fn honest_client_unaffected_by_attacker() {
    let _g = common::serial();
    for backend in common::enforcing() {
        let server = start(Some(backend), GuardMode::Persistent);
        let addr = server.local_addr();
        let attacker = std::thread::spawn(move || {
            let mut c = KvClient::connect(addr).unwrap();
            (0..40).filter(|i| c.crashme(&format!("evil{i}")).unwrap() == "SERVER_ERROR recovered").count()
        });
        let mut reference: HashMap<String, Vec<u8>> = HashMap::new();
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let mut c = KvClient::connect(addr).unwrap();
        let mut failures = 0;
        for _ in 0..600 {
            let key = format!("key{}", rng.gen_range(0..32));
            match rng.gen_range(0..3) {
                0 => {
                    let value: Vec<u8> = (0..rng.gen_range(0..200)).map(|_| rng.gen()).collect();
                    failures += c.set(&key, &value).is_err() as usize;
                    reference.insert(key, value);
                }
                1 => match c.get(&key) {
                    Ok(got) => failures += (got.as_ref() != reference.get(&key)) as usize,
                    Err(_) => failures += 1,
                },
                _ => match c.delete(&key) {
                    Ok(existed) => failures += (existed != reference.remove(&key).is_some()) as usize,
                    Err(_) => failures += 1,
                },
            }
        }
        assert_eq!(attacker.join().unwrap(), 40);
        assert_eq!(failures, 0);
        assert_eq!(server.stats().rewinds, 40);
        assert_eq!(server.store().snapshot(), reference);
    }
}

#[test]
fn unguarded_baseline_serves_requests() {
    let _g = common::serial();
    let server = start(None, GuardMode::Off);
    let mut c = KvClient::connect(server.local_addr()).unwrap();
    c.set("k", b"v").unwrap();
    assert_eq!(c.get("k").unwrap().as_deref(), Some(&b"v"[..]));
}
