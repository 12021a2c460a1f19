//! Flush-to-zero around network evaluation.
//!
//! Once background pixels saturate, BCE gradients fall below the smallest
//! normal f32 and backpropagate as subnormals, which x86 GEMM kernels handle
//! several times slower. Flushing them changes nothing above 1e-38.

/// Sets FTZ and DAZ in MXCSR for the current thread; the previous mode is
/// restored on drop. A no-op off x86_64.
pub(crate) struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

#[cfg(target_arch = "x86_64")]
const FTZ_DAZ: u32 = 0x8040;

impl FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    pub fn new() -> Self {
        let saved = read_csr();
        write_csr(saved | FTZ_DAZ);
        FlushDenormals { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    pub fn new() -> Self {
        FlushDenormals {}
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        write_csr(self.saved);
    }
}

#[cfg(target_arch = "x86_64")]
fn read_csr() -> u32 {
    let mut csr = 0u32;
    // SAFETY: stores the 32-bit control register into a local.
    unsafe {
        std::arch::asm!("stmxcsr [{}]", in(reg) &mut csr as *mut u32, options(nostack, preserves_flags));
    }
    csr
}

#[cfg(target_arch = "x86_64")]
fn write_csr(csr: u32) {
    // SAFETY: only mode bits of an unmodified register value are changed, no
    // exception masks are cleared.
    unsafe {
        std::arch::asm!("ldmxcsr [{}]", in(reg) &csr as *const u32, options(nostack, readonly, preserves_flags));
    }
}
