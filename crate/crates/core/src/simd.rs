//! faer's AVX-512 kernels can return with the upper vector state dirty, after
//! which every SSE-encoded instruction (including libm `exp`) pays a
//! transition penalty. Call [`zero_upper`] after each faer routine on the
//! thread that ran it.

#[inline]
pub(crate) fn zero_upper() {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: AVX support was just detected at runtime.
            unsafe { zero_upper_avx() }
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn zero_upper_avx() {
    std::arch::x86_64::_mm256_zeroupper();
}
