//! Per-thread memory access control behind one interface.
//!
//! Three implementations exist:
//!
//! * [`HardwareBackend`] drives x86-64 protection keys. A domain switch is a
//!   single `wrpkru` and only affects the calling thread.
//! * [`PortableBackend`] emulates keys with `mprotect`. Rights are process
//!   wide rather than per thread and every switch is a system call.
//! * [`RecordingBackend`] enforces nothing and logs every call, which makes
//!   it the oracle for tests of the layers above.
//!
//! Key 0 is never handed out. It stands for untagged memory and stays
//! `ReadWrite` outside domains.

mod hardware;
mod portable;
mod record;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use hardware::HardwareBackend;
pub use portable::PortableBackend;
pub use record::{BackendCall, RecordingBackend};

/// Environment variable selecting the process default backend.
pub const BACKEND_ENV: &str = "REWIND_BACKEND";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IsolationError {
    #[error("all {max_keys} protection keys are in use")]
    KeyExhausted { max_keys: usize },
    #[error("protection key {0} still tags a memory region")]
    KeyInUse(u32),
    #[error("unknown or released protection key {0}")]
    UnknownKey(u32),
    #[error("region {base:#x}+{len:#x} is not page aligned")]
    AlignmentError { base: usize, len: usize },
    #[error("the operating system rejected the request: {0}")]
    OsRejected(String),
    #[error("unknown backend {0:?} (expected hardware, portable or record)")]
    UnknownBackend(String),
}

impl IsolationError {
    pub(crate) fn os(what: &str) -> Self {
        IsolationError::OsRejected(format!("{what}: {}", std::io::Error::last_os_error()))
    }
}

/// Handle to one acquired protection key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ProtectionKeyHandle {
    key_id: u32,
}

impl ProtectionKeyHandle {
    pub(crate) const fn new(key_id: u32) -> Self {
        ProtectionKeyHandle { key_id }
    }

    pub fn key_id(self) -> u32 {
        self.key_id
    }
}

impl fmt::Display for ProtectionKeyHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pkey{}", self.key_id)
    }
}

/// A page-aligned, page-multiple span of the address space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MemoryRegion {
    base: usize,
    len: usize,
}

impl MemoryRegion {
    pub fn new(base: usize, len: usize) -> Result<Self, IsolationError> {
        let page = page_size();
        if len == 0 || !base.is_multiple_of(page) || !len.is_multiple_of(page) {
            return Err(IsolationError::AlignmentError { base, len });
        }
        Ok(MemoryRegion { base, len })
    }

    pub fn base(&self) -> usize {
        self.base
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn end(&self) -> usize {
        self.base + self.len
    }

    pub fn contains(&self, addr: usize) -> bool {
        addr >= self.base && addr < self.end()
    }

    pub fn contains_range(&self, addr: usize, len: usize) -> bool {
        addr >= self.base && addr.checked_add(len).is_some_and(|end| end <= self.end())
    }

    pub fn overlaps(&self, other: &MemoryRegion) -> bool {
        self.base < other.end() && other.base < self.end()
    }

    pub(crate) fn as_ptr(&self) -> *mut libc::c_void {
        self.base as *mut libc::c_void
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AccessRights {
    NoAccess,
    ReadOnly,
    ReadWrite,
}

impl AccessRights {
    pub(crate) fn prot(self) -> libc::c_int {
        match self {
            AccessRights::NoAccess => libc::PROT_NONE,
            AccessRights::ReadOnly => libc::PROT_READ,
            AccessRights::ReadWrite => libc::PROT_READ | libc::PROT_WRITE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwitchCost {
    RegisterWrite,
    Syscall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capabilities {
    pub max_keys: usize,
    pub switch_cost_class: SwitchCost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackendKind {
    Hardware,
    Portable,
    Record,
}

impl BackendKind {
    pub fn name(self) -> &'static str {
        match self {
            BackendKind::Hardware => "hardware",
            BackendKind::Portable => "portable",
            BackendKind::Record => "record",
        }
    }
}

impl std::str::FromStr for BackendKind {
    type Err = IsolationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hardware" => Ok(BackendKind::Hardware),
            "portable" => Ok(BackendKind::Portable),
            "record" => Ok(BackendKind::Record),
            other => Err(IsolationError::UnknownBackend(other.to_string())),
        }
    }
}

/// What the thread may touch while a domain runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum IsolationMode {
    /// Untagged memory is read-only inside the domain.
    #[default]
    Integrity,
    /// Untagged memory is not accessible at all inside the domain.
    Confidentiality,
}

/// Rights in force before a domain entry, handed back on exit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SavedRights {
    Register(u32),
    Table(Vec<(ProtectionKeyHandle, AccessRights)>),
    Nothing,
}

/// How the entry trampoline must switch rights once it is on the domain stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntrySwitch {
    /// Write this value to PKRU after the stack switch.
    Register(u32),
    /// The backend already changed the rights.
    Applied,
}

/// Abstract per-thread memory access control.
pub trait IsolationBackend: Send + Sync + fmt::Debug {
    fn kind(&self) -> BackendKind;

    fn capabilities(&self) -> Capabilities;

    fn acquire_key(&self) -> Result<ProtectionKeyHandle, IsolationError>;

    fn release_key(&self, key: ProtectionKeyHandle) -> Result<(), IsolationError>;

    /// Associates every page of `region` with `key`. Pages end up readable
    /// and writable, subject to the thread's rights for the key.
    fn tag_region(&self, region: MemoryRegion, key: ProtectionKeyHandle) -> Result<(), IsolationError> {
        self.tag_region_with_ceiling(region, key, AccessRights::ReadWrite)
    }

    /// Like [`tag_region`](Self::tag_region) but page permissions never
    /// exceed `ceiling`, whatever the key rights say.
    fn tag_region_with_ceiling(
        &self,
        region: MemoryRegion,
        key: ProtectionKeyHandle,
        ceiling: AccessRights,
    ) -> Result<(), IsolationError>;

    /// Drops the key association and makes the region inaccessible.
    fn untag_region(&self, region: MemoryRegion) -> Result<(), IsolationError>;

    fn set_thread_access(&self, key: ProtectionKeyHandle, rights: AccessRights) -> Result<(), IsolationError>;

    fn thread_access(&self, key: ProtectionKeyHandle) -> Result<AccessRights, IsolationError>;

    fn live_keys(&self) -> Vec<ProtectionKeyHandle>;

    /// Switches the calling thread to domain rights for `key`: the key is
    /// `ReadWrite`, every other key `NoAccess`, untagged memory per `mode`.
    fn enter_domain(
        &self,
        key: ProtectionKeyHandle,
        mode: IsolationMode,
    ) -> Result<(EntrySwitch, SavedRights), IsolationError>;

    /// Restores the rights captured by the matching [`enter_domain`](Self::enter_domain).
    fn leave_domain(&self, saved: &SavedRights);

    /// Held for the whole of a domain execution on backends whose rights are
    /// process wide rather than per thread.
    fn exclusive_section(&self) -> Option<parking_lot::ReentrantMutexGuard<'_, ()>> {
        None
    }
}

/// Opens the backend named by `REWIND_BACKEND`, defaulting to hardware keys
/// with a fallback to the portable backend when no key can be acquired.
pub fn from_env() -> Result<Arc<dyn IsolationBackend>, IsolationError> {
    match std::env::var(BACKEND_ENV) {
        Ok(name) if !name.trim().is_empty() => open(name.parse()?),
        _ => Ok(open_default()),
    }
}

/// Opens a backend of the given kind. Asking for hardware keys on a machine
/// without them falls back to the portable backend.
pub fn open(kind: BackendKind) -> Result<Arc<dyn IsolationBackend>, IsolationError> {
    Ok(match kind {
        BackendKind::Hardware => open_default(),
        BackendKind::Portable => Arc::new(PortableBackend::new()),
        BackendKind::Record => Arc::new(RecordingBackend::new()),
    })
}

fn open_default() -> Arc<dyn IsolationBackend> {
    match HardwareBackend::shared() {
        Some(hw) => hw,
        None => Arc::new(PortableBackend::new()),
    }
}

/// Process-wide default backend, resolved once from the environment.
pub fn default_backend() -> Arc<dyn IsolationBackend> {
    static DEFAULT: std::sync::OnceLock<Arc<dyn IsolationBackend>> = std::sync::OnceLock::new();
    DEFAULT.get_or_init(|| from_env().unwrap_or_else(|_| open_default())).clone()
}

pub fn page_size() -> usize {
    static PAGE: std::sync::OnceLock<usize> = std::sync::OnceLock::new();
    *PAGE.get_or_init(|| {
        // SAFETY: sysconf has no memory-safety preconditions.
        let raw = unsafe { libc::sysconf(libc::_SC_PAGESIZE) };
        if raw > 0 {
            raw as usize
        } else {
            4096
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_alignment_is_checked() {
        let page = page_size();
        assert!(MemoryRegion::new(page, page * 4).is_ok());
        assert_eq!(
            MemoryRegion::new(page + 1, page),
            Err(IsolationError::AlignmentError { base: page + 1, len: page })
        );
        assert!(MemoryRegion::new(page, page / 2).is_err());
        assert!(MemoryRegion::new(page, 0).is_err());
    }

    #[test]
    fn backend_names_parse() {
        assert_eq!("hardware".parse::<BackendKind>().unwrap(), BackendKind::Hardware);
        assert_eq!(" Portable ".parse::<BackendKind>().unwrap(), BackendKind::Portable);
        assert_eq!("record".parse::<BackendKind>().unwrap(), BackendKind::Record);
        assert!("cheri".parse::<BackendKind>().is_err());
    }
}
