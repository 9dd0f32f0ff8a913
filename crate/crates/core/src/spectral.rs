//! Three-dimensional FFT on `n³` grids stored x-major, `((i·n)+j)·n+k`.

use rustfft::num_complex::Complex64;
use rustfft::{FftDirection, FftPlanner};

/// Unnormalized in-place transform along all three axes.
pub(crate) fn fft3(data: &mut [Complex64], n: usize, direction: FftDirection) {
    assert_eq!(data.len(), n * n * n, "grid size mismatch");
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft(n, direction);
    // z is contiguous
    for line in data.chunks_exact_mut(n) {
        fft.process(line);
    }
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    // y
    for i in 0..n {
        for k in 0..n {
            for j in 0..n {
                buf[j] = data[(i * n + j) * n + k];
            }
            fft.process(&mut buf);
            for j in 0..n {
                data[(i * n + j) * n + k] = buf[j];
            }
        }
    }
    // x
    for j in 0..n {
        for k in 0..n {
            for i in 0..n {
                buf[i] = data[(i * n + j) * n + k];
            }
            fft.process(&mut buf);
            for i in 0..n {
                data[(i * n + j) * n + k] = buf[i];
            }
        }
    }
}

/// Signed frequency index of bin `i` on an `n`-point grid.
pub(crate) fn signed_index(i: usize, n: usize) -> i64 {
    if i <= n / 2 {
        i as i64
    } else {
        i as i64 - n as i64
    }
}
