//! The demo key-value service: a guarded request parser behind a TCP
//! listener, and a client that sends it a crashing request.
//!
//!     cargo run --example kv_server

use std::sync::Arc;

use domain_rewind::kv::{KvClient, KvServer, ServerConfig, Store};

#[global_allocator]
static ALLOC: domain_rewind::DomainAllocator = domain_rewind::DomainAllocator;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let server = KvServer::start(ServerConfig::ephemeral(), Arc::new(Store::new()))?;
    println!("listening on {}", server.local_addr());

    let mut client = KvClient::connect(server.local_addr())?;
    client.set("greeting", b"hello")?;
    println!("GET greeting -> {:?}", client.get("greeting")?.map(String::from_utf8));
    println!("CRASHME -> {}", client.crashme("greeting")?);
    println!("GET greeting -> {:?}", client.get("greeting")?.map(String::from_utf8));
    for (name, value) in client.stats()? {
        println!("STAT {name} {value}");
    }
    server.shutdown();
    Ok(())
}
