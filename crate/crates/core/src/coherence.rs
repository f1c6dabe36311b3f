//! Filter-function coherence: linear (zz) and quadratic (transverse) channels.
//!
//! The accumulated phase of the electron is phi = 2 pi integral y(t) dnu(t) dt
//! with dnu in MHz and t in ns; for Gaussian noise the visibility decays as
//! exp(-chi) with chi = <phi^2>/2 = (1/2) (2 pi 1e-3)^2 [integral S |f|^2 + S_0 |f(0)|^2].

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::bath::{BathConfig, Isotope};
use crate::error::{Error, Result};
use crate::sequence::{PulseSequence, SequenceKind};
use crate::spectra::{ensemble_spectra, trapezoid, BathSpectra, Component, GridSpec, NoiseSpectrum, MHZ_NS};

/// Default single-pulse rotation fidelity.
pub const DEFAULT_PULSE_FIDELITY: f64 = 0.97;

/// (1/2)(2 pi x 1 MHz x 1 ns)^2
const HALF_PHASE2: f64 = 0.5 * (2.0 * PI * MHZ_NS) * (2.0 * PI * MHZ_NS);

/// chi for a spectrum of `gain`-scaled noise: gain = gamma_e^2 turns a field
/// spectrum (mT^2/MHz) into a frequency spectrum (MHz^2/MHz).
pub fn chi_from_spectrum(seq: &PulseSequence, spectrum: &NoiseSpectrum, gain: f64) -> f64 {
    let n = spectrum.half_bins();
    let filt = seq.filter_on_grid(spectrum.grid.dnu, n);
    chi_with_filter(&filt, spectrum, gain)
}

fn chi_with_filter(filt: &[f64], spectrum: &NoiseSpectrum, gain: f64) -> f64 {
    let n = spectrum.half_bins();
    let terms: Vec<f64> = (0..=n).map(|k| spectrum.density[n + k] * filt[k]).collect();
    // twice the half-grid trapezoid equals the full symmetric trapezoid
    let dynamic = 2.0 * trapezoid(&terms, spectrum.grid.dnu);
    (HALF_PHASE2 * gain * (dynamic + spectrum.static_variance * filt[0])).max(0.0)
}

/// chi of the linearly coupled zz field; gamma_e in MHz/mT (= GHz/T).
pub fn chi_linear(seq: &PulseSequence, s_zz: &NoiseSpectrum, gamma_e: f64) -> f64 {
    chi_from_spectrum(seq, s_zz, gamma_e * gamma_e)
}

/// Spectrum of the quadratic frequency shift gamma_e (Bx^2 + By^2) / (2 B).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpectrum {
    /// MHz^2/MHz, mean removed.
    pub spectrum: NoiseSpectrum,
    /// Constant frequency offset, MHz; excluded from the spectrum.
    pub mean_shift: f64,
    /// Convolution weight beyond the grid edge, MHz^2.
    pub out_of_band: f64,
}

impl QuadraticSpectrum {
    pub fn zero(grid: GridSpec) -> Self {
        QuadraticSpectrum {
            spectrum: NoiseSpectrum::zeros(Component::Perp, grid),
            mean_shift: 0.0,
            out_of_band: 0.0,
        }
    }

    pub fn scaled(&self, k: f64) -> Self {
        QuadraticSpectrum {
            spectrum: self.spectrum.scaled(k),
            mean_shift: self.mean_shift,
            out_of_band: self.out_of_band * k,
        }
    }
}

/// Gaussian square law. Bx and By are independent, each with spectrum
/// S_perp/2 (static part included); for a zero-mean Gaussian u with spectrum
/// S_u + s0 delta, u^2 - <u^2> has spectrum 2 S_u*S_u + 4 s0 S_u + 2 s0^2 delta.
pub fn effective_quadratic_spectrum(s_perp: &NoiseSpectrum, b_ext: f64, gamma_e: f64) -> Result<QuadraticSpectrum> {
    if !(b_ext > 0.0) {
        return Err(Error::invalid(format!("b_ext = {b_ext} T must be > 0")));
    }
    let b_mt = b_ext * 1e3;
    let coef = (gamma_e / (2.0 * b_mt)).powi(2);
    let s_u: Vec<f64> = s_perp.density.iter().map(|x| 0.5 * x).collect();
    let s0 = 0.5 * s_perp.static_variance;
    let dnu = s_perp.grid.dnu;
    let n = s_perp.half_bins();

    let conv = self_convolution(&s_u, dnu);
    let mut density: Vec<f64> = (0..=2 * n)
        .map(|k| coef * 4.0 * (conv[k + n] + 2.0 * s0 * s_u[k]))
        .collect();
    // rounding in the FFT can leave tiny negative values and asymmetry
    for k in 0..=n {
        let m = 0.5 * (density[n + k] + density[n - k]).max(0.0);
        density[n + k] = m;
        density[n - k] = m;
    }
    let total_dynamic = coef * 4.0 * {
        let iu: f64 = s_u.iter().sum::<f64>() * dnu;
        iu * iu + 2.0 * s0 * iu
    };
    let mut spectrum = NoiseSpectrum::zeros(Component::Perp, s_perp.grid);
    spectrum.density = density;
    spectrum.static_variance = coef * 4.0 * s0 * s0;
    let in_band: f64 = spectrum.density.iter().sum::<f64>() * dnu;
    spectrum.out_of_band = (total_dynamic - in_band).max(0.0);
    spectrum.coarse_grid_warning = s_perp.coarse_grid_warning;
    let out_of_band = spectrum.out_of_band;
    Ok(QuadraticSpectrum {
        spectrum,
        mean_shift: gamma_e / (2.0 * b_mt) * s_perp.total_variance(),
        out_of_band,
    })
}

/// Linear self-convolution (S*S)(nu_m) = sum_j S_j S_{m-j} dnu, returned on
/// the doubled index range 0..2L-1 (index 2N is zero frequency).
fn self_convolution(s: &[f64], dnu: f64) -> Vec<f64> {
    let l = s.len();
    let m = (2 * l - 1).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(m);
    let inv = planner.plan_fft_inverse(m);
    let mut buf: Vec<Complex64> = s.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    buf.resize(m, Complex64::new(0.0, 0.0));
    fwd.process(&mut buf);
    for z in buf.iter_mut() {
        *z = *z * *z;
    }
    inv.process(&mut buf);
    let scale = dnu / m as f64;
    buf.iter().take(2 * l - 1).map(|z| z.re * scale).collect()
}

/// Which noise channels enter the visibility.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Channels {
    pub linear: bool,
    pub quadratic: bool,
}

impl Default for Channels {
    fn default() -> Self {
        Channels {
            linear: true,
            quadratic: true,
        }
    }
}

/// V = V0 exp(-chi_linear - chi_quad).
pub fn visibility(
    seq: &PulseSequence,
    s_zz: &NoiseSpectrum,
    quad: &QuadraticSpectrum,
    gamma_e: f64,
) -> f64 {
    let filt = seq.filter_on_grid(s_zz.grid.dnu, s_zz.half_bins());
    let chi_l = chi_with_filter(&filt, s_zz, gamma_e * gamma_e);
    let chi_q = chi_with_filter(&filt, &quad.spectrum, 1.0);
    seq.v0() * (-chi_l - chi_q).exp()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CurveMeta {
    pub b_ext: f64,
    pub sequence: String,
    pub engine: String,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisibilityCurve {
    /// ns
    pub times: Vec<f64>,
    pub visibility: Vec<f64>,
    pub stderr: Option<Vec<f64>>,
    pub chi_linear: Option<Vec<f64>>,
    pub chi_quad: Option<Vec<f64>>,
    pub meta: CurveMeta,
}

impl VisibilityCurve {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.times.len();
        let lens_ok = self.visibility.len() == n
            && self.stderr.as_ref().is_none_or(|s| s.len() == n)
            && self.chi_linear.as_ref().is_none_or(|s| s.len() == n)
            && self.chi_quad.as_ref().is_none_or(|s| s.len() == n);
        if !lens_ok {
            return Err(Error::Invariant("visibility curve columns differ in length".into()));
        }
        for (i, &v) in self.visibility.iter().enumerate() {
            let se = self.stderr.as_ref().map_or(0.0, |s| s[i]);
            if !v.is_finite() || v < -3.0 * se || v > 1.0 + 3.0 * se {
                return Err(Error::Invariant(format!(
                    "visibility {v} at T = {} ns outside [0, 1]",
                    self.times[i]
                )));
            }
        }
        Ok(())
    }
}

/// Per-species chi attribution on a time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesBreakdown {
    pub times: Vec<f64>,
    /// (species, chi per time) with chi = chi_linear + chi_quad from that
    /// species' spectra alone.
    pub chi: Vec<(Isotope, Vec<f64>)>,
}

impl SpeciesBreakdown {
    pub fn of(&self, name: Isotope) -> Option<&[f64]> {
        self.chi.iter().find(|(n, _)| *n == name).map(|(_, c)| c.as_slice())
    }
}

/// Spectra and couplings needed to evaluate coherence for one field.
#[derive(Clone, Debug)]
pub struct CoherenceModel {
    pub b_ext: f64,
    /// MHz/mT
    pub gamma_e: f64,
    pub pulse_fidelity: f64,
    /// Readout amplitude multiplying the fidelity prefactor.
    pub amplitude: f64,
    pub channels: Channels,
    pub zz: Arc<NoiseSpectrum>,
    pub quad: Arc<QuadraticSpectrum>,
    /// Per-species (zz, quadratic) spectra, for attribution.
    pub species: Arc<Vec<(Isotope, NoiseSpectrum, QuadraticSpectrum)>>,
}

impl CoherenceModel {
    pub fn from_spectra(spectra: &BathSpectra, b_ext: f64, gamma_e: f64, pulse_fidelity: f64) -> Result<Self> {
        let quad = effective_quadratic_spectrum(&spectra.perp, b_ext, gamma_e)?;
        let species = spectra
            .species
            .iter()
            .map(|s| {
                Ok((
                    s.name,
                    s.zz.clone(),
                    effective_quadratic_spectrum(&s.perp, b_ext, gamma_e)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CoherenceModel {
            b_ext,
            gamma_e,
            pulse_fidelity,
            amplitude: 1.0,
            channels: Channels::default(),
            zz: Arc::new(spectra.zz.clone()),
            quad: Arc::new(quad),
            species: Arc::new(species),
        })
    }

    pub fn from_config(config: &BathConfig, grid: GridSpec, n_samples: usize, pulse_fidelity: f64) -> Result<Self> {
        let spectra = ensemble_spectra(config, grid, n_samples)?;
        Self::from_spectra(&spectra, config.b_ext, config.electron_gyromagnetic, pulse_fidelity)
    }

    pub fn with_channels(mut self, channels: Channels) -> Self {
        self.channels = channels;
        self
    }

    /// Rescales the Overhauser amplitude by `r` (sigma_oh -> r sigma_oh):
    /// the linear channel scales as r^2, the quadratic one as r^4.
    pub fn with_sigma_ratio(&self, r: f64) -> Self {
        let r2 = r * r;
        CoherenceModel {
            zz: Arc::new(self.zz.scaled(r2)),
            quad: Arc::new(QuadraticSpectrum {
                mean_shift: self.quad.mean_shift * r2,
                ..self.quad.scaled(r2 * r2)
            }),
            species: Arc::new(
                self.species
                    .iter()
                    .map(|(n, z, q)| (*n, z.scaled(r2), q.scaled(r2 * r2)))
                    .collect(),
            ),
            ..self.clone()
        }
    }

    /// (chi_linear, chi_quad), honouring the channel switches.
    pub fn chis(&self, seq: &PulseSequence) -> (f64, f64) {
        let filt = seq.filter_on_grid(self.zz.grid.dnu, self.zz.half_bins());
        let l = if self.channels.linear {
            chi_with_filter(&filt, &self.zz, self.gamma_e * self.gamma_e)
        } else {
            0.0
        };
        let q = if self.channels.quadratic {
            chi_with_filter(&filt, &self.quad.spectrum, 1.0)
        } else {
            0.0
        };
        (l, q)
    }

    pub fn visibility(&self, seq: &PulseSequence) -> f64 {
        let (l, q) = self.chis(seq);
        self.amplitude * seq.v0() * (-l - q).exp()
    }

    pub fn sequence(&self, kind: SequenceKind, t: f64) -> Result<PulseSequence> {
        kind.build(t, self.pulse_fidelity)
    }

    pub fn curve(&self, kind: SequenceKind, times: &[f64]) -> Result<VisibilityCurve> {
        let rows: Vec<(f64, f64, f64)> = times
            .par_iter()
            .map(|&t| {
                let seq = self.sequence(kind, t)?;
                let (l, q) = self.chis(&seq);
                Ok((self.amplitude * seq.v0() * (-l - q).exp(), l, q))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(VisibilityCurve {
            times: times.to_vec(),
            visibility: rows.iter().map(|r| r.0).collect(),
            stderr: None,
            chi_linear: Some(rows.iter().map(|r| r.1).collect()),
            chi_quad: Some(rows.iter().map(|r| r.2).collect()),
            meta: CurveMeta {
                b_ext: self.b_ext,
                sequence: kind.to_string(),
                engine: "filter".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                ..CurveMeta::default()
            },
        })
    }

    pub fn breakdown(&self, kind: SequenceKind, times: &[f64]) -> Result<SpeciesBreakdown> {
        let per_time: Vec<Vec<f64>> = times
            .par_iter()
            .map(|&t| {
                let seq = self.sequence(kind, t)?;
                let filt = seq.filter_on_grid(self.zz.grid.dnu, self.zz.half_bins());
                Ok(self
                    .species
                    .iter()
                    .map(|(_, z, q)| {
                        let l = if self.channels.linear {
                            chi_with_filter(&filt, z, self.gamma_e * self.gamma_e)
                        } else {
                            0.0
                        };
                        let qq = if self.channels.quadratic {
                            chi_with_filter(&filt, &q.spectrum, 1.0)
                        } else {
                            0.0
                        };
                        l + qq
                    })
                    .collect())
            })
            .collect::<Result<Vec<_>>>()?;
        let chi = self
            .species
            .iter()
            .enumerate()
            .map(|(i, (name, _, _))| (*name, per_time.iter().map(|row| row[i]).collect()))
            .collect();
        Ok(SpeciesBreakdown {
            times: times.to_vec(),
            chi,
        })
    }

    /// Spectrum of the total electron frequency noise gamma_e^2 S_zz + S_quad
    /// (MHz^2/MHz), static parts included.
    pub fn effective_spectrum(&self) -> NoiseSpectrum {
        let g2 = self.gamma_e * self.gamma_e;
        let mut s = self.zz.scaled(g2);
        // grids match by construction
        let _ = s.add(&self.quad.spectrum);
        s
    }
}
