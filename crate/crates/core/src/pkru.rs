//! Raw access to the protection-key rights register.

use std::arch::asm;
use std::sync::atomic::AtomicBool;

/// Set once the hardware backend found usable keys. Until then the register
/// is never touched.
pub(crate) static USABLE: AtomicBool = AtomicBool::new(false);

/// Access-disable bit for `key`.
pub(crate) const fn ad_bit(key: u32) -> u32 {
    1 << (2 * key)
}

/// Write-disable bit for `key`.
pub(crate) const fn wd_bit(key: u32) -> u32 {
    1 << (2 * key + 1)
}

/// Every key from 1 to 15 access-disabled, key 0 untouched.
pub(crate) const ALL_KEYS_DISABLED: u32 = 0x5555_5554;

#[inline(always)]
pub(crate) fn read() -> u32 {
    let value: u32;
    // SAFETY: rdpkru only reads the register; callers only reach this on
    // machines where the hardware backend initialized successfully.
    unsafe {
        asm!("rdpkru", in("ecx") 0u32, out("eax") value, out("edx") _, options(nomem, nostack, preserves_flags));
    }
    value
}

/// # Safety
/// Changing rights can make live memory (including the current stack)
/// inaccessible to the calling thread.
#[inline(always)]
pub(crate) unsafe fn write(value: u32) {
    asm!("wrpkru", in("eax") value, in("ecx") 0u32, in("edx") 0u32, options(nostack, preserves_flags));
}
