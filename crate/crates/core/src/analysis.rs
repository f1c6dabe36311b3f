//! Curve post-processing: decay times, tail fits and modulation spectra.

use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// First time at which `values` falls to `level`, linearly interpolated.
pub fn first_crossing(times: &[f64], values: &[f64], level: f64) -> Option<f64> {
    for k in 1..times.len().min(values.len()) {
        let (a, b) = (values[k - 1], values[k]);
        if a >= level && b < level {
            let f = (a - level) / (a - b);
            return Some(times[k - 1] + f * (times[k] - times[k - 1]));
        }
    }
    None
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub amplitude: f64,
    /// ns
    pub t2: f64,
    pub beta: f64,
    /// Residual sum of squares of ln V.
    pub rss: f64,
}

/// ln V = ln A - (T/T2)^beta by least squares in ln V for fixed beta.
fn fit_fixed_beta(times: &[f64], logv: &[f64], beta: f64) -> Option<DecayFit> {
    let scale = times.iter().cloned().fold(0.0, f64::max);
    let xs: Vec<f64> = times.iter().map(|t| (t / scale).powf(beta)).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = logv.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return None;
    }
    let sxy: f64 = xs.iter().zip(logv).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    if !(slope < 0.0) {
        return None;
    }
    let icpt = my - slope * mx;
    let rss = xs.iter().zip(logv).map(|(x, y)| (y - icpt - slope * x).powi(2)).sum();
    Some(DecayFit {
        amplitude: icpt.exp(),
        t2: scale * (-1.0 / slope).powf(1.0 / beta),
        beta,
        rss,
    })
}

fn log_points(times: &[f64], values: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if times.len() != values.len() {
        return Err(Error::invalid("times and values differ in length"));
    }
    let (t, v): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(values)
        .filter(|(t, v)| **v > 0.0 && **t > 0.0)
        .map(|(t, v)| (*t, v.ln()))
        .unzip();
    if t.len() < 3 {
        return Err(Error::invalid("need at least three positive points to fit a decay"));
    }
    Ok((t, v))
}

/// A exp(-(T/T2)^2) on the points above `floor` x the first value.
pub fn fit_gaussian_decay(times: &[f64], values: &[f64], floor: f64) -> Result<DecayFit> {
    let first = values.first().copied().unwrap_or(0.0);
    let (t, v): (Vec<f64>, Vec<f64>) = times
        .iter()
        .zip(values)
        .filter(|(_, v)| **v > floor * first)
        .map(|(t, v)| (*t, *v))
        .unzip();
    let (t, lv) = log_points(&t, &v)?;
    fit_fixed_beta(&t, &lv, 2.0).ok_or_else(|| Error::invalid("curve does not decay"))
}

/// A exp(-(T/T2)^beta) with beta in [0.2, 5], fitted to ln V.
pub fn fit_stretched_exponential(times: &[f64], values: &[f64]) -> Result<DecayFit> {
    let (t, lv) = log_points(times, values)?;
    let rss = |b: f64| fit_fixed_beta(&t, &lv, b).map_or(f64::INFINITY, |f| f.rss);
    // coarse scan, then golden section around the best node
    let nodes: Vec<f64> = (0..=96).map(|i| 0.2 + 0.05 * i as f64).collect();
    let k = (0..nodes.len())
        .min_by(|&a, &b| rss(nodes[a]).total_cmp(&rss(nodes[b])))
        .unwrap();
    let (mut a, mut b) = (nodes[k.saturating_sub(1)], nodes[(k + 1).min(nodes.len() - 1)]);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..60 {
        let c = b - g * (b - a);
        let d = a + g * (b - a);
        if rss(c) < rss(d) {
            b = d;
        } else {
            a = c;
        }
    }
    fit_fixed_beta(&t, &lv, 0.5 * (a + b)).ok_or_else(|| Error::invalid("curve does not decay"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulationSpectrum {
    /// MHz
    pub frequencies: Vec<f64>,
    pub amplitude: Vec<f64>,
}

impl ModulationSpectrum {
    /// Largest local maximum within target x (1 +- rel_tol) that reaches
    /// `min_rel` of the global maximum; (frequency, amplitude).
    pub fn peak_near(&self, target: f64, rel_tol: f64, min_rel: f64) -> Option<(f64, f64)> {
        let top = self.amplitude.iter().cloned().fold(0.0, f64::max);
        (1..self.amplitude.len() - 1)
            .filter(|&k| (self.frequencies[k] - target).abs() <= rel_tol * target)
            .filter(|&k| self.amplitude[k] >= self.amplitude[k - 1] && self.amplitude[k] >= self.amplitude[k + 1])
            .filter(|&k| self.amplitude[k] > min_rel * top)
            .map(|k| (self.frequencies[k], self.amplitude[k]))
            .max_by(|a, b| a.1.total_cmp(&b.1))
    }
}

/// Hann-windowed, zero-padded FFT magnitude of a uniformly sampled curve
/// after removing its least-squares straight line.
pub fn residual_spectrum(times: &[f64], values: &[f64]) -> Result<ModulationSpectrum> {
    let n = times.len();
    if n < 8 || values.len() != n {
        return Err(Error::invalid("need at least 8 uniformly spaced points"));
    }
    let dt = times[1] - times[0];
    if !(dt > 0.0) || times.windows(2).any(|w| ((w[1] - w[0]) - dt).abs() > 1e-6 * dt) {
        return Err(Error::invalid("residual spectrum needs a uniform time grid"));
    }
    let nf = n as f64;
    let mx = times.iter().sum::<f64>() / nf;
    let my = values.iter().sum::<f64>() / nf;
    let sxx: f64 = times.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = times.iter().zip(values).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / sxx;
    let len = (8 * n).next_power_of_two();
    let mut buf = vec![Complex64::new(0.0, 0.0); len];
    for (k, b) in buf.iter_mut().enumerate().take(n) {
        let w = 0.5 - 0.5 * (2.0 * PI * k as f64 / (n - 1) as f64).cos();
        *b = Complex64::new((values[k] - my - slope * (times[k] - mx)) * w, 0.0);
    }
    FftPlanner::new().plan_fft_forward(len).process(&mut buf);
    // dt in ns -> frequency in MHz
    let df = 1e3 / (len as f64 * dt);
    Ok(ModulationSpectrum {
        frequencies: (0..=len / 2).map(|k| k as f64 * df).collect(),
        amplitude: buf[..=len / 2].iter().map(|z| z.norm()).collect(),
    })
}
