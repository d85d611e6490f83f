//! Allocator tuning for the tensor workload.

/// Makes glibc keep freed tensor buffers in the heap instead of returning
/// them to the kernel. Every op allocates fresh multi-megabyte buffers, and
/// with the default thresholds each one is a separate mmap whose pages fault
/// in again on first write. No-op on other platforms. Call once at startup.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 32 << 20);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
        libc::mallopt(libc::M_TOP_PAD, 1 << 30);
    }
}
