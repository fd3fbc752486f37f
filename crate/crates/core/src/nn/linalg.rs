//! Small dense row-major matrix kernels.

use rayon::prelude::*;

use crate::real::Real;

/// Batch items per reduction chunk. Fixed so that reductions are the same
/// for any thread count.
pub const CHUNK: usize = 64;

/// `c (+)= a * b` with `a: m x k`, `b: k x n`.
pub fn gemm<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    if !accumulate {
        c[..m * n].iter_mut().for_each(|v| *v = T::zero());
    }
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c (+)= a^T * b` with `a: k x m`, `b: k x n`.
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    if !accumulate {
        c[..m * n].iter_mut().for_each(|v| *v = T::zero());
    }
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == T::zero() {
                continue;
            }
            let row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv += api * bv;
            }
        }
    }
}

/// `c (+)= a * b^T` with `a: m x k`, `b: n x k`.
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: T = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            if accumulate {
                c[i * n + j] += dot;
            } else {
                c[i * n + j] = dot;
            }
        }
    }
}

/// Sums per-chunk partial results in chunk order.
///
/// `f(range, acc)` adds the contribution of batch items `range` into `acc`
/// (length `len`). Chunks run in parallel; the merge is sequential.
pub fn chunked_sum<T: Real>(
    count: usize,
    len: usize,
    f: impl Fn(std::ops::Range<usize>, &mut [T]) + Sync,
) -> Vec<T> {
    let chunks = count.div_ceil(CHUNK);
    let partials: Vec<Vec<T>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = vec![T::zero(); len];
            f(c * CHUNK..((c + 1) * CHUNK).min(count), &mut acc);
            acc
        })
        .collect();
    let mut total = vec![T::zero(); len];
    for p in partials {
        for (t, v) in total.iter_mut().zip(p) {
            *t += v;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_with_naive_products() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.5).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3x4
        let mut c = vec![0.0; 8];
        gemm(&a, &b, &mut c, 2, 3, 4, false);
        for i in 0..2 {
            for j in 0..4 {
                let s: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert!((c[i * 4 + j] - s).abs() < 1e-14);
            }
        }
        // `a` read as 3x2; `at` is its 2x3 transpose.
        let at: Vec<f64> = vec![a[0], a[2], a[4], a[1], a[3], a[5]];
        let mut e = vec![0.0; 8];
        let mut f = vec![0.0; 8];
        gemm(&at, &b, &mut e, 2, 3, 4, false);
        gemm_tn(&a, &b, &mut f, 2, 3, 4, false);
        assert_eq!(e, f);
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect(); // 4x3
        let mut g = vec![0.0; 8];
        gemm_nt(&a, &bt, &mut g, 2, 3, 4, false);
        for (x, y) in g.iter().zip(&c) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn chunked_sum_is_order_fixed() {
        let vals: Vec<f32> = (0..1000).map(|i| (i as f32 * 0.37).sin() * 1e3).collect();
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| chunked_sum::<f32>(vals.len(), 1, |r, acc| r.for_each(|i| acc[0] += vals[i])))
        };
        assert_eq!(run(1)[0].to_bits(), run(4)[0].to_bits());
    }
}
