use std::collections::HashMap;

use parking_lot::RwLock;
use serde::Serialize;

/// Item and byte counts of a [`Store`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct StoreState {
    pub items: u64,
    pub bytes: u64,
}

#[derive(Debug, Default)]
struct Inner {
    map: HashMap<String, Vec<u8>>,
    bytes: u64,
}

/// The key-value map. Lives in trusted memory; domains never see it.
#[derive(Debug, Default)]
pub struct Store {
    inner: RwLock<Inner>,
}

impl Store {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: &str) -> Option<Vec<u8>> {
        self.inner.read().map.get(key).cloned()
    }

    /// Calls `f` with the value without copying it out of the lock.
    pub fn with_value<T>(&self, key: &str, f: impl FnOnce(Option<&[u8]>) -> T) -> T {
        let inner = self.inner.read();
        f(inner.map.get(key).map(Vec::as_slice))
    }

    pub fn set(&self, key: String, value: Vec<u8>) {
        let mut inner = self.inner.write();
        let added = value.len() as u64;
        if let Some(old) = inner.map.insert(key, value) {
            inner.bytes -= old.len() as u64;
        }
        inner.bytes += added;
    }

    pub fn delete(&self, key: &str) -> bool {
        let mut inner = self.inner.write();
        match inner.map.remove(key) {
            Some(old) => {
                inner.bytes -= old.len() as u64;
                true
            }
            None => false,
        }
    }

    pub fn state(&self) -> StoreState {
        let inner = self.inner.read();
        StoreState { items: inner.map.len() as u64, bytes: inner.bytes }
    }

    /// Copy of the whole map, for comparisons against a reference.
    pub fn snapshot(&self) -> HashMap<String, Vec<u8>> {
        self.inner.read().map.clone()
    }
}
