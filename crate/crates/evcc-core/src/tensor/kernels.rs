//! Raw compute kernels shared by the forward and backward passes.
//!
//! Every reduction accumulates left to right in a fixed order; batched
//! kernels may fan out across threads (`EVCC_THREADS`) because each batch
//! slice is written by exactly one thread running the identical sequential
//! kernel, so results stay bit-identical to the single-threaded run.

use super::Scalar;

/// Thread cap from EVCC_THREADS (default 1), read once per process.
pub fn thread_cap() -> usize {
    static CAP: std::sync::OnceLock<usize> = std::sync::OnceLock::new();
    *CAP.get_or_init(|| {
        std::env::var("EVCC_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

/// out[m,n] = a[m,k] * b[k,n], accumulated in k-order.
pub fn matmul_2d<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for row in 0..m {
        let out_row = &mut out[row * n..(row + 1) * n];
        out_row.fill(T::ZERO);
        for kk in 0..k {
            let av = a[row * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] = a[m,k] * b[n,k]^T.
pub fn matmul_2d_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for row in 0..m {
        let a_row = &a[row * k..(row + 1) * k];
        for col in 0..n {
            let b_row = &b[col * k..(col + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[row * n + col] = acc;
        }
    }
}

/// out[k,n] += a[m,k]^T * c[m,n]; used by matmul backward for dB.
pub fn matmul_2d_tn_acc<T: Scalar>(a: &[T], c: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for row in 0..m {
        for kk in 0..k {
            let av = a[row * k + kk];
            let c_row = &c[row * n..(row + 1) * n];
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &cv) in out_row.iter_mut().zip(c_row) {
                *o += av * cv;
            }
        }
    }
}

/// Run `f(batch_index, out_slice)` over per-batch output slices, splitting
/// across up to `thread_cap()` threads. Each slice is written by exactly one
/// thread running the same sequential code, so the result is bit-identical
/// to the single-threaded order.
pub fn for_each_batch_slices<T, F>(slices: Vec<&mut [T]>, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    let threads = thread_cap().min(slices.len());
    if threads <= 1 {
        for (i, s) in slices.into_iter().enumerate() {
            f(i, s);
        }
        return;
    }
    let chunk = slices.len().div_ceil(threads);
    let mut iter = slices.into_iter();
    let mut start = 0;
    std::thread::scope(|scope| loop {
        let group: Vec<&mut [T]> = iter.by_ref().take(chunk).collect();
        if group.is_empty() {
            break;
        }
        let base = start;
        start += group.len();
        let f = &f;
        scope.spawn(move || {
            for (off, s) in group.into_iter().enumerate() {
                f(base + off, s);
            }
        });
    });
}

/// Logistic sigmoid, saturating smoothly at the f64 level.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    let v = x.to_f64();
    let s = if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    };
    T::from_f64(s)
}

/// Tanh-approximation GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3))) with
/// c = sqrt(2/pi) = 0.7978845608028654.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
pub const GELU_A: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let v = x.to_f64();
    let inner = GELU_C * (v + GELU_A * v * v * v);
    T::from_f64(0.5 * v * (1.0 + inner.tanh()))
}

/// d gelu / dx for the tanh approximation.
#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let v = x.to_f64();
    let u = GELU_C * (v + GELU_A * v * v * v);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * v * v);
    T::from_f64(0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn matmul_identity() {
        // [[1,0],[0,1]] * [[3,4],[5,6]] = [[3,4],[5,6]]
        let a = [1.0f64, 0.0, 0.0, 1.0];
        let b = [3.0f64, 4.0, 5.0, 6.0];
        let mut out = [0.0f64; 4];
        matmul_2d(&a, &b, &mut out, 2, 2, 2);
        assert_eq!(out, b);
    }

    #[test]
    fn matmul_row_times_col() {
        // [[1,2]] * [[3],[4]] = [[11]]
        let mut out = [0.0f64];
        matmul_2d(&[1.0, 2.0], &[3.0, 4.0], &mut out, 1, 2, 1);
        assert_eq!(out[0], 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = Rng::new(5);
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.normal()).collect();
        let mut got = vec![0.0; m * n];
        matmul_2d(&a, &b, &mut got, m, k, n);

        // Oracle: naive index-triple loop.
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for kk in 0..k {
                    acc += a[i * k + kk] * b[kk * n + j];
                }
                let rel = (got[i * n + j] - acc).abs() / acc.abs().max(1e-12);
                assert!(rel < 1e-6, "({i},{j}): {} vs {}", got[i * n + j], acc);
            }
        }
    }

    #[test]
    fn matmul_nt_matches_explicit_transpose() {
        let mut rng = Rng::new(6);
        let (m, k, n) = (4, 6, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..n * k).map(|_| rng.normal()).collect();
        let mut got = vec![0.0; m * n];
        matmul_2d_nt(&a, &b, &mut got, m, k, n);

        let mut bt = vec![0.0; k * n];
        for r in 0..n {
            for c in 0..k {
                bt[c * n + r] = b[r * k + c];
            }
        }
        let mut expect = vec![0.0; m * n];
        matmul_2d(&a, &bt, &mut expect, m, k, n);
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_odd_point_and_sigmoid_symmetry() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert_eq!(sigmoid(0.0f64), 0.5);
        // sigmoid(2) = 0.880797...
        assert!((sigmoid(2.0f64) - 0.880797).abs() < 1e-6);
        // extreme input saturates without NaN
        assert!((sigmoid(1000.0f64) - 1.0).abs() < 1e-12);
        assert!(sigmoid(-1000.0f64) >= 0.0);
    }

    #[test]
    fn gelu_grad_matches_finite_differences() {
        let h = 1e-6;
        for &x in &[-2.0f64, -0.5, 0.0, 0.3, 1.7] {
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            let ana = gelu_grad(x);
            assert!((num - ana).abs() < 1e-7, "x={x}: {num} vs {ana}");
        }
    }

    #[test]
    fn batched_dispatch_writes_each_slice_once() {
        let mut buf = vec![0usize; 24];
        let slices: Vec<&mut [usize]> = buf.chunks_mut(3).collect();
        for_each_batch_slices(slices, |i, s| {
            for (j, v) in s.iter_mut().enumerate() {
                *v = i * 10 + j;
            }
        });
        for (i, chunk) in buf.chunks(3).enumerate() {
            assert_eq!(chunk, &[i * 10, i * 10 + 1, i * 10 + 2]);
        }
    }
}
