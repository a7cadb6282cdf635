use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use parking_lot::{ReentrantMutex, ReentrantMutexGuard};

use super::{
    AccessRights, BackendKind, Capabilities, EntrySwitch, IsolationBackend, IsolationError, IsolationMode,
    MemoryRegion, ProtectionKeyHandle, SavedRights, SwitchCost,
};

pub const DEFAULT_PORTABLE_KEYS: usize = 64;

/// Keys emulated with page permissions.
///
/// Rights are process wide: `set_thread_access` rewrites the protection of
/// every region carrying the key, so all threads observe the change. Domain
/// execution on this backend is therefore serialized through
/// [`exclusive_section`](IsolationBackend::exclusive_section). Untagged
/// memory cannot be restricted, and a nested domain keeps access to the
/// domains enclosing it, since the trusted code driving the inner call runs
/// on the outer domain's stack.
#[derive(Debug)]
pub struct PortableBackend {
    max_keys: usize,
    state: Mutex<PortableState>,
    exec: ReentrantMutex<()>,
}

#[derive(Debug, Default)]
struct PortableState {
    live: BTreeSet<u32>,
    regions: BTreeMap<u32, Vec<(MemoryRegion, AccessRights)>>,
    rights: BTreeMap<u32, AccessRights>,
    /// Keys of the domain calls currently in progress, outermost first.
    entered: Vec<u32>,
}

fn apply(region: MemoryRegion, rights: AccessRights) -> Result<(), IsolationError> {
    // SAFETY: the region belongs to a domain owned by this process.
    let rc = unsafe { libc::mprotect(region.as_ptr(), region.len(), rights.prot()) };
    if rc != 0 {
        return Err(IsolationError::os("mprotect"));
    }
    Ok(())
}

impl PortableState {
    fn set(&mut self, id: u32, rights: AccessRights) -> Result<(), IsolationError> {
        if self.rights.get(&id) == Some(&rights) {
            return Ok(());
        }
        for &(region, ceiling) in self.regions.get(&id).into_iter().flatten() {
            apply(region, rights.min(ceiling))?;
        }
        self.rights.insert(id, rights);
        Ok(())
    }
}

impl PortableBackend {
    pub fn new() -> Self {
        Self::with_max_keys(DEFAULT_PORTABLE_KEYS)
    }

    pub fn with_max_keys(max_keys: usize) -> Self {
        PortableBackend { max_keys, state: Mutex::new(PortableState::default()), exec: ReentrantMutex::new(()) }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, PortableState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl Default for PortableBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl IsolationBackend for PortableBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Portable
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { max_keys: self.max_keys, switch_cost_class: SwitchCost::Syscall }
    }

    fn acquire_key(&self) -> Result<ProtectionKeyHandle, IsolationError> {
        let mut state = self.lock();
        let id = (1..=self.max_keys as u32)
            .find(|k| !state.live.contains(k))
            .ok_or(IsolationError::KeyExhausted { max_keys: self.max_keys })?;
        state.live.insert(id);
        state.rights.insert(id, AccessRights::ReadWrite);
        Ok(ProtectionKeyHandle::new(id))
    }

    fn release_key(&self, key: ProtectionKeyHandle) -> Result<(), IsolationError> {
        let mut state = self.lock();
        let id = key.key_id();
        if !state.live.contains(&id) {
            return Err(IsolationError::UnknownKey(id));
        }
        if state.regions.get(&id).is_some_and(|r| !r.is_empty()) {
            return Err(IsolationError::KeyInUse(id));
        }
        state.live.remove(&id);
        state.regions.remove(&id);
        state.rights.remove(&id);
        Ok(())
    }

    fn tag_region_with_ceiling(
        &self,
        region: MemoryRegion,
        key: ProtectionKeyHandle,
        ceiling: AccessRights,
    ) -> Result<(), IsolationError> {
        let mut state = self.lock();
        let id = key.key_id();
        if !state.live.contains(&id) {
            return Err(IsolationError::UnknownKey(id));
        }
        let rights = state.rights.get(&id).copied().unwrap_or(AccessRights::ReadWrite);
        apply(region, rights.min(ceiling))?;
        for regions in state.regions.values_mut() {
            regions.retain(|(r, _)| !r.overlaps(&region));
        }
        state.regions.entry(id).or_default().push((region, ceiling));
        Ok(())
    }

    fn untag_region(&self, region: MemoryRegion) -> Result<(), IsolationError> {
        let mut state = self.lock();
        apply(region, AccessRights::NoAccess)?;
        for regions in state.regions.values_mut() {
            regions.retain(|(r, _)| !r.overlaps(&region));
        }
        Ok(())
    }

    fn set_thread_access(&self, key: ProtectionKeyHandle, rights: AccessRights) -> Result<(), IsolationError> {
        let mut state = self.lock();
        let id = key.key_id();
        if !state.live.contains(&id) {
            return Err(IsolationError::UnknownKey(id));
        }
        state.set(id, rights)
    }

    fn thread_access(&self, key: ProtectionKeyHandle) -> Result<AccessRights, IsolationError> {
        let state = self.lock();
        let id = key.key_id();
        if !state.live.contains(&id) {
            return Err(IsolationError::UnknownKey(id));
        }
        Ok(state.rights.get(&id).copied().unwrap_or(AccessRights::ReadWrite))
    }

    fn live_keys(&self) -> Vec<ProtectionKeyHandle> {
        self.lock().live.iter().map(|&k| ProtectionKeyHandle::new(k)).collect()
    }

    fn enter_domain(
        &self,
        key: ProtectionKeyHandle,
        _mode: IsolationMode,
    ) -> Result<(EntrySwitch, SavedRights), IsolationError> {
        let mut state = self.lock();
        let id = key.key_id();
        if !state.live.contains(&id) {
            return Err(IsolationError::UnknownKey(id));
        }
        let saved: Vec<_> = state
            .live
            .iter()
            .map(|&k| (ProtectionKeyHandle::new(k), state.rights.get(&k).copied().unwrap_or(AccessRights::ReadWrite)))
            .collect();
        state.entered.push(id);
        let keys: Vec<u32> = state.live.iter().copied().collect();
        for k in keys {
            let rights = if state.entered.contains(&k) { AccessRights::ReadWrite } else { AccessRights::NoAccess };
            if let Err(e) = state.set(k, rights) {
                state.entered.pop();
                return Err(e);
            }
        }
        Ok((EntrySwitch::Applied, SavedRights::Table(saved)))
    }

    fn leave_domain(&self, saved: &SavedRights) {
        if let SavedRights::Table(saved) = saved {
            let mut state = self.lock();
            state.entered.pop();
            for &(key, rights) in saved {
                if state.live.contains(&key.key_id()) {
                    // A failure here leaves the pages more restrictive than
                    // intended, which is the safe direction.
                    let _ = state.set(key.key_id(), rights);
                }
            }
        }
    }

    fn exclusive_section(&self) -> Option<ReentrantMutexGuard<'_, ()>> {
        Some(self.exec.lock())
    }
}
