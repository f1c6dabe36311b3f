//! Ideal pi-pulse sequences and their filter functions.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectra::MHZ_NS;

/// Sequence family, independent of total time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequenceKind {
    Ramsey,
    Hahn,
    Cpmg(u32),
    Custom,
}

impl fmt::Display for SequenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SequenceKind::Ramsey => f.write_str("ramsey"),
            SequenceKind::Hahn => f.write_str("hahn"),
            SequenceKind::Cpmg(n) => write!(f, "cpmg:{n}"),
            SequenceKind::Custom => f.write_str("custom"),
        }
    }
}

impl FromStr for SequenceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "ramsey" => Ok(SequenceKind::Ramsey),
            "hahn" => Ok(SequenceKind::Hahn),
            other => {
                let n = other
                    .strip_prefix("cpmg:")
                    .and_then(|n| n.parse::<u32>().ok())
                    .filter(|&n| n >= 1)
                    .ok_or_else(|| {
                        Error::invalid(format!("unknown sequence `{s}` (expected ramsey, hahn or cpmg:N)"))
                    })?;
                Ok(SequenceKind::Cpmg(n))
            }
        }
    }
}

impl SequenceKind {
    /// The sequence of this family with total time `t` (ns).
    pub fn build(self, t: f64, pulse_fidelity: f64) -> Result<PulseSequence> {
        match self {
            SequenceKind::Ramsey => PulseSequence::ramsey(t, pulse_fidelity),
            SequenceKind::Hahn => PulseSequence::hahn(t, pulse_fidelity),
            SequenceKind::Cpmg(n) => PulseSequence::cpmg(n, t, pulse_fidelity),
            SequenceKind::Custom => Err(Error::invalid("custom sequences need explicit pulse times")),
        }
    }

    pub fn n_pulses(self) -> Option<usize> {
        match self {
            SequenceKind::Ramsey => Some(0),
            SequenceKind::Hahn => Some(1),
            SequenceKind::Cpmg(n) => Some(n as usize),
            SequenceKind::Custom => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub kind: SequenceKind,
    /// ns
    pub total_time: f64,
    /// Strictly inside (0, total_time), ascending, ns.
    pub pulse_times: Vec<f64>,
    pub pulse_fidelity: f64,
}

impl PulseSequence {
    pub fn ramsey(t: f64, pulse_fidelity: f64) -> Result<Self> {
        Self::new(SequenceKind::Ramsey, t, Vec::new(), pulse_fidelity)
    }

    pub fn hahn(t: f64, pulse_fidelity: f64) -> Result<Self> {
        Self::new(SequenceKind::Hahn, t, vec![t / 2.0], pulse_fidelity)
    }

    /// n pulses at t (2j - 1) / 2n.
    pub fn cpmg(n: u32, t: f64, pulse_fidelity: f64) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("CPMG needs at least one pulse"));
        }
        let times = (1..=n).map(|j| t * (2 * j - 1) as f64 / (2 * n) as f64).collect();
        Self::new(SequenceKind::Cpmg(n), t, times, pulse_fidelity)
    }

    pub fn custom(t: f64, pulse_times: Vec<f64>, pulse_fidelity: f64) -> Result<Self> {
        Self::new(SequenceKind::Custom, t, pulse_times, pulse_fidelity)
    }

    fn new(kind: SequenceKind, t: f64, pulse_times: Vec<f64>, pulse_fidelity: f64) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::invalid(format!("total time {t} ns must be > 0")));
        }
        if !(pulse_fidelity > 0.0 && pulse_fidelity <= 1.0) {
            return Err(Error::invalid(format!(
                "pulse fidelity {pulse_fidelity} outside (0, 1]"
            )));
        }
        let mut prev = 0.0;
        for &p in &pulse_times {
            if !(p > prev && p < t) {
                return Err(Error::invalid(format!(
                    "pulse times must be ascending and strictly inside (0, {t}); got {p}"
                )));
            }
            prev = p;
        }
        Ok(PulseSequence {
            kind,
            total_time: t,
            pulse_times,
            pulse_fidelity,
        })
    }

    pub fn n_pulses(&self) -> usize {
        self.pulse_times.len()
    }

    /// Fidelity prefactor: one factor per pulse plus the readout rotation.
    pub fn v0(&self) -> f64 {
        self.pulse_fidelity.powi(self.n_pulses() as i32 + 1)
    }

    /// Segment boundaries 0, t_1, ..., t_n, T.
    pub fn boundaries(&self) -> Vec<f64> {
        let mut b = Vec::with_capacity(self.n_pulses() + 2);
        b.push(0.0);
        b.extend_from_slice(&self.pulse_times);
        b.push(self.total_time);
        b
    }

    /// Switching function y(t) = +-1.
    pub fn switching(&self, t: f64) -> f64 {
        let flips = self.pulse_times.iter().take_while(|&&p| p <= t).count();
        if flips % 2 == 0 {
            1.0
        } else {
            -1.0
        }
    }

    /// f(nu) = integral_0^T y(t) e^{i 2 pi nu t} dt, ns; nu in MHz.
    pub fn filter_amplitude(&self, nu: f64) -> Complex64 {
        let w = 2.0 * PI * nu * MHZ_NS;
        let b = self.boundaries();
        let mut sum = Complex64::new(0.0, 0.0);
        let mut sign = 1.0;
        for seg in b.windows(2) {
            let dt = seg[1] - seg[0];
            let mid = 0.5 * (seg[0] + seg[1]);
            sum += Complex64::from_polar(sign * dt * sinc(0.5 * w * dt), w * mid);
            sign = -sign;
        }
        sum
    }

    /// |f(nu)|^2, ns^2.
    pub fn filter_magnitude(&self, nu: f64) -> f64 {
        self.filter_amplitude(nu).norm_sqr()
    }

    /// |f|^2 at nu_k = k dnu for k = 0..=n, by phasor recurrence.
    pub fn filter_on_grid(&self, dnu: f64, n: usize) -> Vec<f64> {
        let b = self.boundaries();
        let t = self.total_time;
        // f = (1/(i w)) [s_n e^{iwT} - 1 + sum_k 2 s_{k-1} e^{i w t_k}]
        let coeffs: Vec<(f64, f64)> = {
            let mut c = Vec::with_capacity(b.len());
            c.push((0.0, -1.0));
            let mut sign = 1.0;
            for &tk in &self.pulse_times {
                c.push((tk, 2.0 * sign));
                sign = -sign;
            }
            c.push((t, sign));
            c
        };
        let mut out = Vec::with_capacity(n + 1);
        let mut phasors: Vec<Complex64> = coeffs.iter().map(|_| Complex64::new(1.0, 0.0)).collect();
        let steps: Vec<Complex64> = coeffs
            .iter()
            .map(|&(tk, _)| Complex64::from_polar(1.0, 2.0 * PI * dnu * tk * MHZ_NS))
            .collect();
        for k in 0..=n {
            let nu = k as f64 * dnu;
            let w = 2.0 * PI * nu * MHZ_NS;
            if k % 256 == 0 {
                for (p, &(tk, _)) in phasors.iter_mut().zip(&coeffs) {
                    *p = Complex64::from_polar(1.0, w * tk);
                }
            }
            if w * t < 1e-2 {
                out.push(self.filter_magnitude(nu));
            } else {
                let s: Complex64 = phasors.iter().zip(&coeffs).map(|(p, &(_, c))| p * c).sum();
                out.push(s.norm_sqr() / (w * w));
            }
            for (p, st) in phasors.iter_mut().zip(&steps) {
                *p *= st;
            }
        }
        out
    }
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn construction_rules() {
        let h = PulseSequence::hahn(100.0, 0.97).unwrap();
        assert_eq!(h.pulse_times, vec![50.0]);
        let c = PulseSequence::cpmg(4, 80.0, 1.0).unwrap();
        assert_eq!(c.pulse_times, vec![10.0, 30.0, 50.0, 70.0]);
        assert!((c.v0() - 1.0).abs() < 1e-15);
        assert!((h.v0() - 0.97f64.powi(2)).abs() < 1e-15);
        assert!(PulseSequence::custom(10.0, vec![5.0, 3.0], 1.0).is_err());
        assert!(PulseSequence::custom(10.0, vec![10.0], 1.0).is_err());
        assert!(PulseSequence::ramsey(0.0, 1.0).is_err());
        assert!(PulseSequence::ramsey(1.0, 1.2).is_err());
        assert_eq!("cpmg:16".parse::<SequenceKind>().unwrap(), SequenceKind::Cpmg(16));
        assert!("cpmg:0".parse::<SequenceKind>().is_err());
        assert!("echo".parse::<SequenceKind>().is_err());
    }

    #[test]
    fn ramsey_closed_form() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let t = rng.random_range(1.0..2000.0);
            let nu = rng.random_range(-100.0..100.0);
            let s = PulseSequence::ramsey(t, 1.0).unwrap();
            let x = PI * nu * t * MHZ_NS;
            let expect = (x.sin() / (PI * nu * MHZ_NS)).powi(2);
            assert!((s.filter_magnitude(nu) - expect).abs() <= 1e-9 * expect.max(1e-6 * t * t));
        }
        let s = PulseSequence::ramsey(37.0, 1.0).unwrap();
        assert!((s.filter_magnitude(0.0) - 37.0 * 37.0).abs() < 1e-9);
    }

    #[test]
    fn hahn_closed_form() {
        // canonical echo filter 16 sin^4(w T/4) / w^2
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let t = rng.random_range(1.0..2000.0);
            let nu = rng.random_range(-100.0..100.0);
            let s = PulseSequence::hahn(t, 1.0).unwrap();
            let w = 2.0 * PI * nu * MHZ_NS;
            let expect = 16.0 * (w * t / 4.0).sin().powi(4) / (w * w);
            assert!((s.filter_magnitude(nu) - expect).abs() <= 1e-9 * t * t);
        }
        assert!(PulseSequence::hahn(500.0, 1.0).unwrap().filter_magnitude(0.0) < 1e-20);
    }

    #[test]
    fn cpmg_matches_quadrature() {
        let t = 400.0;
        let nu = 1.0 / (t * MHZ_NS);
        let s = PulseSequence::cpmg(2, t, 1.0).unwrap();
        // composite Simpson on each segment
        let w = 2.0 * PI * nu * MHZ_NS;
        let b = s.boundaries();
        let mut total = Complex64::new(0.0, 0.0);
        for (k, seg) in b.windows(2).enumerate() {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            let m = 2000;
            let h = (seg[1] - seg[0]) / m as f64;
            let f = |x: f64| Complex64::from_polar(sign, w * x);
            let mut acc = f(seg[0]) + f(seg[1]);
            for i in 1..m {
                acc += f(seg[0] + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            total += acc * h / 3.0;
        }
        assert!((s.filter_magnitude(nu) - total.norm_sqr()).abs() < 1e-10 * t * t);
    }

    #[test]
    fn grid_evaluation_matches_direct() {
        for s in [
            PulseSequence::ramsey(300.0, 1.0).unwrap(),
            PulseSequence::hahn(1000.0, 1.0).unwrap(),
            PulseSequence::cpmg(100, 1000.0, 1.0).unwrap(),
            PulseSequence::custom(50.0, vec![3.0, 20.0, 21.0], 1.0).unwrap(),
        ] {
            let g = s.filter_on_grid(0.01, 20_000);
            for k in (0..=20_000).step_by(97) {
                let direct = s.filter_magnitude(k as f64 * 0.01);
                let t2 = s.total_time * s.total_time;
                assert!((g[k] - direct).abs() < 1e-9 * t2, "{:?} k={k}", s.kind);
            }
        }
    }

    #[test]
    fn switching_function() {
        let s = PulseSequence::cpmg(2, 40.0, 1.0).unwrap();
        assert_eq!(s.switching(5.0), 1.0);
        assert_eq!(s.switching(15.0), -1.0);
        assert_eq!(s.switching(35.0), 1.0);
    }
}
