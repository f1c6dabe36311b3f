//! Sums of complex exponentials on a uniform grid by Gaussian gridding.
//!
//! Evaluates g_j = sum_l a_l exp(i x_l j) for j = 0..n with |x_l| < pi,
//! by spreading onto an oversampled periodic grid, one FFT and a Gaussian
//! deconvolution.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Half-width of the spreading kernel in grid points.
const SPREAD: usize = 8;

/// Precomputed spreading stencils for a fixed set of phase rates x_l.
pub struct GriddingPlan {
    n: usize,
    grid: usize,
    /// Per line: first grid index (may wrap) and 2*SPREAD weights.
    starts: Vec<usize>,
    weights: Vec<[f64; 2 * SPREAD]>,
    /// exp(i x_l n/2), centring the output index range.
    shifts: Vec<Complex64>,
    correction: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

fn good_size(min: usize) -> usize {
    let mut m = min.max(16);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r % p == 0 {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

impl GriddingPlan {
    /// Plan for outputs j = 0..n and the given phase increments per sample.
    pub fn new(rates: &[f64], n: usize) -> Self {
        let n = n.max(2);
        let grid = good_size(2 * n + 4 * SPREAD);
        let ratio = grid as f64 / n as f64;
        let tau = PI * SPREAD as f64 / ((n * n) as f64 * ratio * (ratio - 0.5));
        let h = 2.0 * PI / grid as f64;
        let mut starts = Vec::with_capacity(rates.len());
        let mut weights = Vec::with_capacity(rates.len());
        let mut shifts = Vec::with_capacity(rates.len());
        for &x in rates {
            let x = x.rem_euclid(2.0 * PI);
            let m0 = (x / h).floor() as i64 - SPREAD as i64 + 1;
            let mut w = [0.0; 2 * SPREAD];
            for (i, wi) in w.iter_mut().enumerate() {
                let d = (m0 + i as i64) as f64 * h - x;
                *wi = (-d * d / (4.0 * tau)).exp();
            }
            starts.push(m0.rem_euclid(grid as i64) as usize);
            weights.push(w);
            shifts.push(Complex64::from_polar(1.0, x * (n / 2) as f64));
        }
        let half = (n / 2) as i64;
        let correction = (0..n)
            .map(|j| {
                let k = (j as i64 - half) as f64;
                (PI / tau).sqrt() * (k * k * tau).exp() / grid as f64
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_inverse(grid);
        GriddingPlan {
            n,
            grid,
            starts,
            weights,
            shifts,
            correction,
            fft,
        }
    }

    pub fn n_lines(&self) -> usize {
        self.starts.len()
    }

    pub fn n_out(&self) -> usize {
        self.n
    }

    /// Scratch buffer of the right size for [`GriddingPlan::execute`].
    pub fn scratch(&self) -> Vec<Complex64> {
        vec![Complex64::new(0.0, 0.0); self.grid]
    }

    /// Writes g_j for j = 0..n into `out`; `work` comes from `scratch`.
    pub fn execute(&self, amplitudes: &[Complex64], work: &mut [Complex64], out: &mut [Complex64]) {
        debug_assert_eq!(amplitudes.len(), self.n_lines());
        work.fill(Complex64::new(0.0, 0.0));
        for (l, &a) in amplitudes.iter().enumerate() {
            if a == Complex64::new(0.0, 0.0) {
                continue;
            }
            let a = a * self.shifts[l];
            let s = self.starts[l];
            let w = &self.weights[l];
            if s + 2 * SPREAD <= self.grid {
                for (c, wi) in work[s..s + 2 * SPREAD].iter_mut().zip(w) {
                    *c += a * wi;
                }
            } else {
                for (i, wi) in w.iter().enumerate() {
                    work[(s + i) % self.grid] += a * wi;
                }
            }
        }
        self.fft.process(work);
        let half = self.n / 2;
        for (j, o) in out.iter_mut().enumerate().take(self.n) {
            let k = (j as i64 - half as i64).rem_euclid(self.grid as i64) as usize;
            *o = work[k] * self.correction[j];
        }
    }
}
