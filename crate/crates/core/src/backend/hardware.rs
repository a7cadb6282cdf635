use std::collections::{BTreeSet, HashMap};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use super::{
    AccessRights, BackendKind, Capabilities, EntrySwitch, IsolationBackend, IsolationError, IsolationMode,
    MemoryRegion, ProtectionKeyHandle, SavedRights, SwitchCost,
};
use crate::pkru;

/// Protection keys for userspace (x86-64 PKU).
///
/// Keys are a process resource, so there is a single instance per process;
/// see [`HardwareBackend::shared`].
#[derive(Debug)]
pub struct HardwareBackend {
    max_keys: usize,
    /// Bit `k` set while key `k` is live. Read without the lock on the
    /// rights-switch path.
    live_mask: AtomicU32,
    state: Mutex<HwState>,
}

#[derive(Debug, Default)]
struct HwState {
    live: BTreeSet<u32>,
    regions: HashMap<u32, Vec<MemoryRegion>>,
}

fn sys_pkey_alloc() -> Result<u32, i32> {
    // SAFETY: plain system call with scalar arguments.
    let rc = unsafe { libc::syscall(libc::SYS_pkey_alloc, 0u64, 0u64) };
    if rc < 0 {
        Err(std::io::Error::last_os_error().raw_os_error().unwrap_or(0))
    } else {
        Ok(rc as u32)
    }
}

fn sys_pkey_free(key: u32) {
    // SAFETY: plain system call with scalar arguments.
    unsafe {
        libc::syscall(libc::SYS_pkey_free, key as u64);
    }
}

pub(crate) fn sys_pkey_mprotect(region: MemoryRegion, prot: libc::c_int, key: u32) -> Result<(), IsolationError> {
    // SAFETY: the kernel validates the range; changing protection of pages we
    // own is the whole point of the call.
    let rc = unsafe { libc::syscall(libc::SYS_pkey_mprotect, region.base(), region.len(), prot, key as u64) };
    if rc != 0 {
        return Err(IsolationError::os("pkey_mprotect"));
    }
    Ok(())
}

impl HardwareBackend {
    /// The process-wide instance, or `None` when the kernel hands out no keys.
    ///
    /// The key budget is discovered on first use by allocating keys until the
    /// kernel refuses, then releasing them all.
    pub fn shared() -> Option<Arc<dyn IsolationBackend>> {
        static SHARED: OnceLock<Option<Arc<HardwareBackend>>> = OnceLock::new();
        SHARED
            .get_or_init(|| {
                let mut probed = Vec::new();
                while let Ok(key) = sys_pkey_alloc() {
                    probed.push(key);
                    if probed.len() > 32 {
                        break;
                    }
                }
                let max_keys = probed.len();
                for key in probed {
                    sys_pkey_free(key);
                }
                (max_keys > 0).then(|| {
                    pkru::USABLE.store(true, Ordering::Release);
                    Arc::new(HardwareBackend {
                        max_keys,
                        live_mask: AtomicU32::new(0),
                        state: Mutex::new(HwState::default()),
                    })
                })
            })
            .clone()
            .map(|hw| hw as Arc<dyn IsolationBackend>)
    }

    /// True when the CPU and kernel support protection keys.
    pub fn available() -> bool {
        Self::shared().is_some()
    }

    fn check_live(&self, key: ProtectionKeyHandle) -> Result<u32, IsolationError> {
        let id = key.key_id();
        if id == 0 || id >= 16 || self.live_mask.load(Ordering::Acquire) & (1 << id) == 0 {
            return Err(IsolationError::UnknownKey(id));
        }
        Ok(id)
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, HwState> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }
}

impl IsolationBackend for HardwareBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Hardware
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { max_keys: self.max_keys, switch_cost_class: SwitchCost::RegisterWrite }
    }

    fn acquire_key(&self) -> Result<ProtectionKeyHandle, IsolationError> {
        let mut state = self.lock();
        if state.live.len() >= self.max_keys {
            return Err(IsolationError::KeyExhausted { max_keys: self.max_keys });
        }
        let id = match sys_pkey_alloc() {
            Ok(id) => id,
            Err(libc::ENOSPC) => return Err(IsolationError::KeyExhausted { max_keys: self.max_keys }),
            Err(errno) => {
                return Err(IsolationError::OsRejected(format!(
                    "pkey_alloc: {}",
                    std::io::Error::from_raw_os_error(errno)
                )))
            }
        };
        if id == 0 || id >= 16 {
            sys_pkey_free(id);
            return Err(IsolationError::OsRejected(format!("pkey_alloc returned key {id}")));
        }
        state.live.insert(id);
        self.live_mask.fetch_or(1 << id, Ordering::AcqRel);
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
        self.live_mask.fetch_and(!(1 << id), Ordering::AcqRel);
        sys_pkey_free(id);
        Ok(())
    }

    fn tag_region_with_ceiling(
        &self,
        region: MemoryRegion,
        key: ProtectionKeyHandle,
        ceiling: AccessRights,
    ) -> Result<(), IsolationError> {
        let mut state = self.lock();
        let id = self.check_live(key)?;
        sys_pkey_mprotect(region, ceiling.prot(), id)?;
        for regions in state.regions.values_mut() {
            regions.retain(|r| !r.overlaps(&region));
        }
        state.regions.entry(id).or_default().push(region);
        Ok(())
    }

    fn untag_region(&self, region: MemoryRegion) -> Result<(), IsolationError> {
        let mut state = self.lock();
        sys_pkey_mprotect(region, libc::PROT_NONE, 0)?;
        for regions in state.regions.values_mut() {
            regions.retain(|r| !r.overlaps(&region));
        }
        Ok(())
    }

    fn set_thread_access(&self, key: ProtectionKeyHandle, rights: AccessRights) -> Result<(), IsolationError> {
        let id = self.check_live(key)?;
        let mask = pkru::ad_bit(id) | pkru::wd_bit(id);
        let bits = match rights {
            AccessRights::NoAccess => pkru::ad_bit(id),
            AccessRights::ReadOnly => pkru::wd_bit(id),
            AccessRights::ReadWrite => 0,
        };
        let value = (pkru::read() & !mask) | bits;
        // SAFETY: only the rights for a live domain key change.
        unsafe { pkru::write(value) };
        Ok(())
    }

    fn thread_access(&self, key: ProtectionKeyHandle) -> Result<AccessRights, IsolationError> {
        let id = self.check_live(key)?;
        let value = pkru::read();
        Ok(if value & pkru::ad_bit(id) != 0 {
            AccessRights::NoAccess
        } else if value & pkru::wd_bit(id) != 0 {
            AccessRights::ReadOnly
        } else {
            AccessRights::ReadWrite
        })
    }

    fn live_keys(&self) -> Vec<ProtectionKeyHandle> {
        self.lock().live.iter().map(|&k| ProtectionKeyHandle::new(k)).collect()
    }

    fn enter_domain(
        &self,
        key: ProtectionKeyHandle,
        mode: IsolationMode,
    ) -> Result<(EntrySwitch, SavedRights), IsolationError> {
        let id = self.check_live(key)?;
        let untagged = match mode {
            IsolationMode::Integrity => pkru::wd_bit(0),
            IsolationMode::Confidentiality => pkru::ad_bit(0),
        };
        let value = (pkru::ALL_KEYS_DISABLED & !pkru::ad_bit(id)) | untagged;
        Ok((EntrySwitch::Register(value), SavedRights::Register(pkru::read())))
    }

    fn leave_domain(&self, saved: &SavedRights) {
        if let SavedRights::Register(value) = saved {
            // SAFETY: restores a value previously read from the register.
            unsafe { pkru::write(*value) };
        }
    }
}
