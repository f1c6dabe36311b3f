//! Reproducible parallel accumulation.
//!
//! Work is cut into fixed chunks independent of the thread count; chunk
//! buffers are combined by a fixed pairwise tree, so floating-point sums are
//! bit-identical for any pool size.

use std::ops::Range;

use rayon::prelude::*;

const WAVE: usize = 32;

/// Sums `len`-long buffers filled by `fill(chunk_range, buffer)` over
/// `0..n_items` in chunks of `chunk`.
pub(crate) fn chunked_sum<F>(n_items: usize, chunk: usize, len: usize, fill: F) -> Vec<f64>
where
    F: Fn(Range<usize>, &mut [f64]) + Sync,
{
    let chunk = chunk.max(1);
    let n_chunks = n_items.div_ceil(chunk);
    let mut total = vec![0.0; len];
    let mut start = 0;
    while start < n_chunks {
        let stop = (start + WAVE).min(n_chunks);
        let bufs: Vec<Vec<f64>> = (start..stop)
            .into_par_iter()
            .map(|c| {
                let mut buf = vec![0.0; len];
                fill(c * chunk..((c + 1) * chunk).min(n_items), &mut buf);
                buf
            })
            .collect();
        let wave = pairwise(bufs);
        for (t, w) in total.iter_mut().zip(&wave) {
            *t += w;
        }
        start = stop;
    }
    total
}

fn pairwise(mut bufs: Vec<Vec<f64>>) -> Vec<f64> {
    while bufs.len() > 1 {
        let mut next = Vec::with_capacity(bufs.len().div_ceil(2));
        let mut it = bufs.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        bufs = next;
    }
    bufs.pop().unwrap_or_default()
}

/// Pairwise sum of a slice in fixed order.
pub(crate) fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n => pairwise_sum(&xs[..n / 2]) + pairwise_sum(&xs[n / 2..]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_of_pool_size() {
        let fill = |r: Range<usize>, buf: &mut [f64]| {
            for i in r {
                buf[i % 7] += (i as f64).sqrt().sin() * 1e-3 + 1e10 / (i as f64 + 1.0);
            }
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| chunked_sum(100_003, 97, 7, fill))
        };
        let a = run(1);
        let b = run(3);
        assert_eq!(a, b);
        let direct: Vec<f64> = {
            let mut v = vec![0.0; 7];
            fill(0..100_003, &mut v);
            v
        };
        for (x, y) in a.iter().zip(&direct) {
            assert!((x - y).abs() <= 1e-9 * y.abs());
        }
    }
}
