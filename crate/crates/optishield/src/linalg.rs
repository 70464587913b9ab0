//! Small f32 slice kernels used by the hot convolution paths.
//!
//! Accumulation patterns are fixed (8-lane partial sums, fixed chunking) so
//! results are bit-reproducible run to run on one platform regardless of
//! thread count.

/// Number of parallel work chunks used for batch operations. Fixed, not tied
/// to the thread count, so reductions happen in a deterministic order.
pub(crate) const FIXED_PAR_CHUNKS: usize = 8;

/// Splits `n` items into at most [`FIXED_PAR_CHUNKS`] contiguous ranges.
pub(crate) fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    if n == 0 {
        return Vec::new();
    }
    let step = n.div_ceil(FIXED_PAR_CHUNKS);
    (0..n).step_by(step).map(|s| s..(s + step).min(n)).collect()
}

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ac = a.chunks_exact(8);
    let bc = b.chunks_exact(8);
    let ra = ac.remainder();
    let rb = bc.remainder();
    for (ca, cb) in ac.zip(bc) {
        for i in 0..8 {
            acc[i] = ca[i].mul_add(cb[i], acc[i]);
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s = x.mul_add(*y, s);
    }
    s
}

/// `y += alpha * x`, elementwise.
#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = alpha.mul_add(*xi, *yi);
    }
}
