//! Square 2D FFTs over row-major buffers.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub(crate) struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("n", &self.n).finish()
    }
}

impl Fft2 {
    pub(crate) fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub(crate) fn len(&self) -> usize {
        self.n
    }

    /// Unnormalized forward transform, in place.
    pub(crate) fn forward(&self, buf: &mut [Complex64]) {
        self.run(&self.fwd, buf);
    }

    /// Unnormalized inverse transform, in place (no 1/N² factor).
    pub(crate) fn inverse(&self, buf: &mut [Complex64]) {
        self.run(&self.inv, buf);
    }

    fn run(&self, plan: &Arc<dyn Fft<f64>>, buf: &mut [Complex64]) {
        debug_assert_eq!(buf.len(), self.n * self.n);
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        plan.process_with_scratch(buf, &mut scratch);
        transpose_square(buf, self.n);
        plan.process_with_scratch(buf, &mut scratch);
        transpose_square(buf, self.n);
    }
}

fn transpose_square(buf: &mut [Complex64], n: usize) {
    for r in 0..n {
        for c in (r + 1)..n {
            buf.swap(r * n + c, c * n + r);
        }
    }
}

/// Signed frequency index of bin `k` in an `n`-point transform.
pub(crate) fn signed_bin(k: usize, n: usize) -> i64 {
    if k < n.div_ceil(2) {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_matches_input() {
        let n = 12;
        let fft = Fft2::new(n);
        let orig: Vec<Complex64> = (0..n * n)
            .map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()))
            .collect();
        let mut buf = orig.clone();
        fft.forward(&mut buf);
        fft.inverse(&mut buf);
        let scale = 1.0 / (n * n) as f64;
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a * scale - b).norm() < 1e-12);
        }
    }

    #[test]
    fn delta_at_origin_is_flat() {
        let n = 8;
        let fft = Fft2::new(n);
        let mut buf = vec![Complex64::default(); n * n];
        buf[0] = Complex64::new(1.0, 0.0);
        fft.forward(&mut buf);
        assert!(buf.iter().all(|v| (v - Complex64::new(1.0, 0.0)).norm() < 1e-14));
    }

    #[test]
    fn signed_bins() {
        assert_eq!(signed_bin(0, 8), 0);
        assert_eq!(signed_bin(3, 8), 3);
        assert_eq!(signed_bin(4, 8), -4);
        assert_eq!(signed_bin(7, 8), -1);
        assert_eq!(signed_bin(4, 9), 4);
        assert_eq!(signed_bin(5, 9), -4);
    }
}
