use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use super::{
    AccessRights, BackendKind, Capabilities, EntrySwitch, IsolationBackend, IsolationError, IsolationMode,
    MemoryRegion, ProtectionKeyHandle, SavedRights, SwitchCost,
};

/// One call observed by a [`RecordingBackend`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BackendCall {
    AcquireKey(Result<u32, IsolationError>),
    ReleaseKey(u32),
    TagRegion { base: usize, len: usize, key: u32, ceiling: AccessRights },
    UntagRegion { base: usize, len: usize },
    SetThreadAccess { key: u32, rights: AccessRights },
    EnterDomain { key: u32, mode: IsolationMode },
    LeaveDomain,
}

/// Test double: keeps the key bookkeeping of a real backend, enforces
/// nothing, and records the exact call sequence.
#[derive(Debug)]
pub struct RecordingBackend {
    max_keys: usize,
    state: Mutex<RecordState>,
}

#[derive(Debug, Default)]
struct RecordState {
    live: BTreeSet<u32>,
    tagged: BTreeMap<u32, Vec<MemoryRegion>>,
    rights: BTreeMap<u32, AccessRights>,
    calls: Vec<BackendCall>,
}

impl RecordingBackend {
    pub fn new() -> Self {
        Self::with_max_keys(15)
    }

    pub fn with_max_keys(max_keys: usize) -> Self {
        RecordingBackend { max_keys, state: Mutex::new(RecordState::default()) }
    }

    /// Everything recorded so far.
    pub fn calls(&self) -> Vec<BackendCall> {
        self.lock().calls.clone()
    }

    pub fn take_calls(&self) -> Vec<BackendCall> {
        std::mem::take(&mut self.lock().calls)
    }

    /// Number of successful key acquisitions, i.e. domains created.
    pub fn acquisitions(&self) -> usize {
        self.lock().calls.iter().filter(|c| matches!(c, BackendCall::AcquireKey(Ok(_)))).count()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, RecordState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl Default for RecordingBackend {
    fn default() -> Self {
        Self::new()
    }
}

impl IsolationBackend for RecordingBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Record
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { max_keys: self.max_keys, switch_cost_class: SwitchCost::RegisterWrite }
    }

    fn acquire_key(&self) -> Result<ProtectionKeyHandle, IsolationError> {
        let mut state = self.lock();
        let result = (1..=self.max_keys as u32)
            .find(|k| !state.live.contains(k))
            .ok_or(IsolationError::KeyExhausted { max_keys: self.max_keys });
        if let Ok(id) = result {
            state.live.insert(id);
            state.rights.insert(id, AccessRights::ReadWrite);
        }
        state.calls.push(BackendCall::AcquireKey(result.clone()));
        result.map(ProtectionKeyHandle::new)
    }

    fn release_key(&self, key: ProtectionKeyHandle) -> Result<(), IsolationError> {
        let mut state = self.lock();
        let id = key.key_id();
        state.calls.push(BackendCall::ReleaseKey(id));
        if !state.live.contains(&id) {
            return Err(IsolationError::UnknownKey(id));
        }
        if state.tagged.get(&id).is_some_and(|r| !r.is_empty()) {
            return Err(IsolationError::KeyInUse(id));
        }
        state.live.remove(&id);
        state.tagged.remove(&id);
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
        state.calls.push(BackendCall::TagRegion { base: region.base(), len: region.len(), key: id, ceiling });
        if !state.live.contains(&id) {
            return Err(IsolationError::UnknownKey(id));
        }
        for regions in state.tagged.values_mut() {
            regions.retain(|r| !r.overlaps(&region));
        }
        state.tagged.entry(id).or_default().push(region);
        Ok(())
    }

    fn untag_region(&self, region: MemoryRegion) -> Result<(), IsolationError> {
        let mut state = self.lock();
        state.calls.push(BackendCall::UntagRegion { base: region.base(), len: region.len() });
        for regions in state.tagged.values_mut() {
            regions.retain(|r| !r.overlaps(&region));
        }
        Ok(())
    }

    fn set_thread_access(&self, key: ProtectionKeyHandle, rights: AccessRights) -> Result<(), IsolationError> {
        let mut state = self.lock();
        let id = key.key_id();
        state.calls.push(BackendCall::SetThreadAccess { key: id, rights });
        if !state.live.contains(&id) {
            return Err(IsolationError::UnknownKey(id));
        }
        state.rights.insert(id, rights);
        Ok(())
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
        mode: IsolationMode,
    ) -> Result<(EntrySwitch, SavedRights), IsolationError> {
        let mut state = self.lock();
        let id = key.key_id();
        state.calls.push(BackendCall::EnterDomain { key: id, mode });
        if !state.live.contains(&id) {
            return Err(IsolationError::UnknownKey(id));
        }
        Ok((EntrySwitch::Applied, SavedRights::Nothing))
    }

    fn leave_domain(&self, _saved: &SavedRights) {
        self.lock().calls.push(BackendCall::LeaveDomain);
    }
}
