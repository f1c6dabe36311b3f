//! Overhauser-field noise spectra from per-nucleus transition lines.
//!
//! Conventions: linear frequency in MHz, time in ns, two-sided densities with
//! C(t) = static + integral S(nu) exp(i 2 pi nu t) d nu.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bath::{hamiltonian_with_ops, BathConfig, Isotope};
use crate::error::{Error, Result};
use crate::par::chunked_sum;
use crate::rng::{substream, Domain};
use crate::spin::{eigendecompose, CMatrix, SpinOperators};

/// 1 MHz x 1 ns, in cycles.
pub const MHZ_NS: f64 = 1e-3;

/// Kernel half-width in bins.
const KERNEL_REACH: i64 = 10;
/// Kernel standard deviation in bins.
const KERNEL_SIGMA_BINS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Line {
    /// MHz, signed.
    pub frequency: f64,
    /// mT^2
    pub weight: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionLines {
    pub lines: Vec<Line>,
    /// mT^2
    pub static_weight: f64,
}

impl TransitionLines {
    pub fn total_weight(&self) -> f64 {
        self.static_weight + self.lines.iter().map(|l| l.weight).sum::<f64>()
    }

    /// C(t) = static + sum_lines w cos(2 pi f t), t in ns.
    pub fn correlation(&self, t: f64) -> f64 {
        self.static_weight
            + self
                .lines
                .iter()
                .map(|l| l.weight * (2.0 * PI * l.frequency * t * MHZ_NS).cos())
                .sum::<f64>()
    }
}

/// Infinite-temperature line decomposition of <O(t) O> for a nucleus with
/// Hamiltonian `h` (MHz) and coupling `a` (mT).
pub fn transition_lines(h: &CMatrix, o: &CMatrix, a: f64) -> Result<TransitionLines> {
    if h.shape() != o.shape() {
        return Err(Error::invalid(format!(
            "Hamiltonian is {:?} but observable is {:?}",
            h.shape(),
            o.shape()
        )));
    }
    let es = eigendecompose(h)?;
    let ob = es.to_eigenbasis(o);
    let d = h.nrows();
    let df = d as f64;
    let a2 = a * a;
    let mut lines = Vec::with_capacity(d * (d - 1));
    for m in 0..d {
        for n in 0..d {
            if m != n {
                lines.push(Line {
                    frequency: es.eigenvalues[m] - es.eigenvalues[n],
                    weight: a2 * ob[(m, n)].norm_sqr() / df,
                });
            }
        }
    }
    let diag_sq: f64 = (0..d).map(|m| ob[(m, m)].norm_sqr()).sum::<f64>() / df;
    let mean: f64 = (0..d).map(|m| ob[(m, m)].re).sum::<f64>() / df;
    Ok(TransitionLines {
        lines,
        static_weight: a2 * (diag_sq - mean * mean).max(0.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Component {
    /// Along the external field.
    Zz,
    /// Sum of the two transverse components.
    Perp,
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Component::Zz => "zz",
            Component::Perp => "perp",
        })
    }
}

/// Laboratory-frame observables of a field component: [iz] or [ix, iy].
pub fn component_observable(component: Component, ops: &SpinOperators) -> Vec<CMatrix> {
    match component {
        Component::Zz => vec![ops.iz.clone()],
        Component::Perp => vec![ops.ix.clone(), ops.iy.clone()],
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// MHz
    pub nu_max: f64,
    /// MHz
    pub dnu: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            nu_max: 200.0,
            dnu: 0.01,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dnu > 0.0) || !self.dnu.is_finite() {
            return Err(Error::invalid(format!("grid spacing {} must be > 0", self.dnu)));
        }
        if !(self.nu_max >= 10.0 * self.dnu) || !self.nu_max.is_finite() {
            return Err(Error::invalid(format!(
                "grid half-width {} must cover at least 10 bins of {}",
                self.nu_max, self.dnu
            )));
        }
        if self.half_bins() > 50_000_000 {
            return Err(Error::invalid("frequency grid too large"));
        }
        Ok(())
    }

    /// N in nu_j = j dnu, j = -N..=N.
    pub fn half_bins(&self) -> usize {
        (self.nu_max / self.dnu).round() as usize
    }

    pub fn len(&self) -> usize {
        2 * self.half_bins() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn refined(&self) -> GridSpec {
        GridSpec {
            nu_max: self.nu_max,
            dnu: self.dnu / 2.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpectrum {
    pub component: Component,
    pub grid: GridSpec,
    /// Length 2N+1, index N is zero frequency. Units: field^2 per MHz.
    pub density: Vec<f64>,
    /// Zero-frequency delta weight, field^2.
    pub static_variance: f64,
    /// Line weight that fell outside the grid.
    pub out_of_band: f64,
    /// Set when the grid cannot resolve the slowest Larmor line.
    pub coarse_grid_warning: bool,
}

impl NoiseSpectrum {
    pub fn zeros(component: Component, grid: GridSpec) -> Self {
        NoiseSpectrum {
            component,
            density: vec![0.0; grid.len()],
            grid,
            static_variance: 0.0,
            out_of_band: 0.0,
            coarse_grid_warning: false,
        }
    }

    pub fn static_only(component: Component, grid: GridSpec, variance: f64) -> Self {
        NoiseSpectrum {
            static_variance: variance,
            ..NoiseSpectrum::zeros(component, grid)
        }
    }

    /// Broadens `lines` onto the grid with the standard kernel.
    pub fn from_lines(component: Component, grid: GridSpec, lines: &TransitionLines) -> Self {
        let mut s = NoiseSpectrum::zeros(component, grid);
        s.static_variance = lines.static_weight;
        let mut acc = Accumulator::new(grid);
        for l in &lines.lines {
            acc.deposit_signed(l.frequency, l.weight);
        }
        acc.finish_into(&mut s);
        s
    }

    pub fn half_bins(&self) -> usize {
        self.grid.half_bins()
    }

    pub fn frequency(&self, j: usize) -> f64 {
        (j as f64 - self.half_bins() as f64) * self.grid.dnu
    }

    pub fn frequencies(&self) -> Vec<f64> {
        (0..self.density.len()).map(|j| self.frequency(j)).collect()
    }

    /// Density at index `k >= 0` above zero frequency.
    pub fn positive(&self, k: usize) -> f64 {
        self.density[self.half_bins() + k]
    }

    /// Trapezoidal integral of the density.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.density, self.grid.dnu)
    }

    pub fn total_variance(&self) -> f64 {
        self.static_variance + self.integral()
    }

    pub fn scaled(&self, k: f64) -> NoiseSpectrum {
        NoiseSpectrum {
            density: self.density.iter().map(|x| x * k).collect(),
            static_variance: self.static_variance * k,
            out_of_band: self.out_of_band * k,
            ..self.clone()
        }
    }

    pub fn add(&mut self, other: &NoiseSpectrum) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::invalid("spectra on different grids"));
        }
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += b;
        }
        self.static_variance += other.static_variance;
        self.out_of_band += other.out_of_band;
        self.coarse_grid_warning |= other.coarse_grid_warning;
        Ok(())
    }

    /// Frequency of the largest density at nu > 0 within [lo, hi] MHz.
    pub fn peak_in(&self, lo: f64, hi: f64) -> Option<f64> {
        let n = self.half_bins();
        let (mut best, mut arg) = (f64::NEG_INFINITY, None);
        for k in 1..=n {
            let f = k as f64 * self.grid.dnu;
            if f >= lo && f <= hi && self.density[n + k] > best {
                best = self.density[n + k];
                arg = Some(f);
            }
        }
        arg
    }

    pub fn check_invariants(&self) -> Result<()> {
        let n = self.half_bins();
        if self.density.len() != 2 * n + 1 {
            return Err(Error::Invariant("density length does not match grid".into()));
        }
        let scale = self.density.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for k in 0..=n {
            let (a, b) = (self.density[n + k], self.density[n - k]);
            if !a.is_finite() || a < 0.0 || b < 0.0 {
                return Err(Error::Invariant(format!(
                    "density negative or non-finite at {} MHz",
                    k as f64 * self.grid.dnu
                )));
            }
            if (a - b).abs() > 1e-9 * scale {
                return Err(Error::Invariant("density is not symmetric".into()));
            }
        }
        if !(self.static_variance >= 0.0) {
            return Err(Error::Invariant("negative static variance".into()));
        }
        Ok(())
    }
}

pub(crate) fn trapezoid(values: &[f64], step: f64) -> f64 {
    match values.len() {
        0 | 1 => 0.0,
        n => {
            let inner: f64 = crate::par::pairwise_sum(&values[1..n - 1]);
            step * (inner + 0.5 * (values[0] + values[n - 1]))
        }
    }
}

const KERNEL_LEN: usize = (2 * KERNEL_REACH + 1) as usize;
/// Fractional-offset resolution of the kernel table, per bin.
const KERNEL_TABLE_STEPS: usize = 1024;

/// Normalised kernel weights for line offsets -0.5..=0.5 bins from the
/// nearest bin centre.
fn kernel_table() -> &'static [[f64; KERNEL_LEN]] {
    static TABLE: std::sync::OnceLock<Vec<[f64; KERNEL_LEN]>> = std::sync::OnceLock::new();
    TABLE.get_or_init(|| {
        let inv = 1.0 / (2.0 * KERNEL_SIGMA_BINS * KERNEL_SIGMA_BINS);
        (0..=KERNEL_TABLE_STEPS)
            .map(|i| {
                let off = i as f64 / KERNEL_TABLE_STEPS as f64 - 0.5;
                let mut w = [0.0; KERNEL_LEN];
                for (k, wk) in w.iter_mut().enumerate() {
                    let x = (k as i64 - KERNEL_REACH) as f64 - off;
                    *wk = (-x * x * inv).exp();
                }
                let sum: f64 = w.iter().sum();
                w.map(|x| x / sum)
            })
            .collect()
    })
}

/// Gaussian broadening weights for a line at `f >= dnu/2`: first bin index
/// (relative to zero frequency) and weights summing to one.
fn kernel(f: f64, dnu: f64) -> (i64, &'static [f64; KERNEL_LEN]) {
    let c = f / dnu;
    let j0 = c.round();
    let slot = ((c - j0 + 0.5) * KERNEL_TABLE_STEPS as f64).round() as usize;
    (j0 as i64 - KERNEL_REACH, &kernel_table()[slot.min(KERNEL_TABLE_STEPS)])
}

/// Positive-frequency accumulator; mirrored on completion so the density is
/// exactly symmetric.
struct Accumulator<'a> {
    n: usize,
    dnu: f64,
    /// index n + j for j in -n..=n
    acc: AccBuf<'a>,
    static_weight: f64,
    out_of_band: f64,
}

enum AccBuf<'a> {
    Owned(Vec<f64>),
    Borrowed(&'a mut [f64]),
}

impl AccBuf<'_> {
    fn as_mut(&mut self) -> &mut [f64] {
        match self {
            AccBuf::Owned(v) => v,
            AccBuf::Borrowed(s) => s,
        }
    }
}

impl<'a> Accumulator<'a> {
    fn new(grid: GridSpec) -> Self {
        Accumulator {
            n: grid.half_bins(),
            dnu: grid.dnu,
            acc: AccBuf::Owned(vec![0.0; grid.len()]),
            static_weight: 0.0,
            out_of_band: 0.0,
        }
    }

    fn over(grid: GridSpec, buf: &'a mut [f64]) -> Self {
        Accumulator {
            n: grid.half_bins(),
            dnu: grid.dnu,
            acc: AccBuf::Borrowed(buf),
            static_weight: 0.0,
            out_of_band: 0.0,
        }
    }

    fn deposit_signed(&mut self, f: f64, w: f64) {
        // the mirror image supplies the other sign; halve to keep weight
        self.deposit_pair(f.abs(), 0.5 * w);
    }

    fn is_point(&self, f: f64) -> bool {
        f < 0.5 * self.dnu || (f / self.dnu).round() as i64 - KERNEL_REACH > self.n as i64
    }

    /// Adds a line of weight `w` at +f and its mirror at -f.
    fn deposit_pair(&mut self, f: f64, w: f64) {
        if f < 0.5 * self.dnu {
            self.static_weight += 2.0 * w;
        } else if self.is_point(f) {
            self.out_of_band += 2.0 * w;
        } else {
            let (start, k) = kernel(f, self.dnu);
            self.add_kernel(start, k, w);
        }
    }

    fn add_kernel(&mut self, start: i64, k: &[f64], w: f64) {
        let n = self.n as i64;
        let scale = w / self.dnu;
        let acc = self.acc.as_mut();
        for (i, gk) in k.iter().enumerate() {
            let j = start + i as i64;
            if j > n {
                self.out_of_band += 2.0 * gk * w;
            } else {
                // j >= -n holds since f >= 0 and n >= 10
                acc[(j + n) as usize] += gk * scale;
            }
        }
    }

    fn finish_into(mut self, s: &mut NoiseSpectrum) {
        let n = self.n;
        let acc = self.acc.as_mut();
        s.density = (0..=2 * n).map(|i| acc[i] + acc[2 * n - i]).collect();
        s.static_variance += self.static_weight;
        s.out_of_band += self.out_of_band;
    }
}

/// Deposits the same line into two accumulators with different weights.
fn deposit_both(a: &mut Accumulator, b: &mut Accumulator, f: f64, wa: f64, wb: f64) {
    if a.is_point(f) {
        a.deposit_pair(f, wa);
        b.deposit_pair(f, wb);
    } else {
        let (start, k) = kernel(f, a.dnu);
        a.add_kernel(start, k, wa);
        b.add_kernel(start, k, wb);
    }
}

/// Both field components, in total and per species.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BathSpectra {
    pub zz: NoiseSpectrum,
    pub perp: NoiseSpectrum,
    pub species: Vec<SpeciesSpectra>,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesSpectra {
    pub name: Isotope,
    pub zz: NoiseSpectrum,
    pub perp: NoiseSpectrum,
}

impl BathSpectra {
    pub fn component(&self, c: Component) -> &NoiseSpectrum {
        match c {
            Component::Zz => &self.zz,
            Component::Perp => &self.perp,
        }
    }
}

/// Default number of quadrupole draws per species.
pub const DEFAULT_SAMPLES: usize = 10_000;
const TILT_CHUNK: usize = 4;
/// Lines weaker than this (relative to a unit matrix element) are not
/// interpolated across cells.
const NEGLIGIBLE_LINE: f64 = 1e-4;
const MAX_CELL_POINTS: usize = 128;

/// Stratified ensemble average: each species gets `n_samples` draws of its
/// quadrupole parameters, weighted by its share of the Overhauser variance.
/// Draws follow a randomly shifted lattice, so different seeds give
/// independent estimates.
pub fn ensemble_spectra(config: &BathConfig, grid: GridSpec, n_samples: usize) -> Result<BathSpectra> {
    config.validate()?;
    grid.validate()?;
    if n_samples < 1000 {
        return Err(Error::invalid(format!("n_samples = {n_samples} must be >= 1000")));
    }
    let min_larmor = config
        .species
        .iter()
        .map(|b| b.species.larmor(config.b_ext))
        .fold(f64::INFINITY, f64::min);
    let coarse = grid.dnu > min_larmor / 10.0;

    let mut zz = NoiseSpectrum::zeros(Component::Zz, grid);
    let mut perp = NoiseSpectrum::zeros(Component::Perp, grid);
    let mut species = Vec::with_capacity(config.species.len());
    for idx in 0..config.species.len() {
        let (z, p) = species_spectra(config, idx, grid, n_samples)?;
        zz.add(&z)?;
        perp.add(&p)?;
        species.push(SpeciesSpectra {
            name: config.species[idx].species.name,
            zz: z,
            perp: p,
        });
    }
    zz.coarse_grid_warning = coarse;
    perp.coarse_grid_warning = coarse;
    Ok(BathSpectra {
        zz,
        perp,
        species,
        n_samples,
    })
}

pub fn ensemble_psd(
    config: &BathConfig,
    component: Component,
    grid: GridSpec,
    n_samples: usize,
) -> Result<NoiseSpectrum> {
    Ok(ensemble_spectra(config, grid, n_samples)?.component(component).clone())
}

/// One species' spectra. The (nu_q, tilt) quantile square is covered by a
/// randomly shifted n x n node grid with n = floor(sqrt(n_samples)). Every
/// transition is spread bilinearly in frequency and weight over the cells
/// between nodes (sorted eigenvalues are continuous in both parameters), so
/// the broadened density carries no point-sample noise. Eigenvalues and the
/// zz and summed transverse matrix elements are invariant under rotation
/// about the field, so the azimuth is held fixed.
fn species_spectra(
    config: &BathConfig,
    idx: usize,
    grid: GridSpec,
    n_samples: usize,
) -> Result<(NoiseSpectrum, NoiseSpectrum)> {
    let sp = &config.species[idx].species;
    let ops = SpinOperators::new(sp.spin);
    let d = ops.dim();
    let n = ((n_samples as f64).sqrt().floor() as usize).max(2);
    let scale = config.species_power(idx) / d as f64;
    let len = grid.len();
    // sub-point spacing of one kernel sigma leaves a ripple below 1e-8
    let step = KERNEL_SIGMA_BINS * grid.dnu;
    let negligible = NEGLIGIBLE_LINE * scale;
    // layout: [zz density | perp density | zz static, zz oob, perp static, perp oob]
    let total_len = 2 * len + 4;
    let failed = std::sync::atomic::AtomicBool::new(false);
    let shift: [f64; 2] = {
        let mut rng = substream(config.seed, Domain::Spectrum, idx as u64);
        [rng.random(), rng.random()]
    };
    let segments = |s: f64| interpolation_segments(n, s);
    let q_segments = segments(shift[0]);
    let t_segments = segments(shift[1]);
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|m| (m + 1..d).map(move |k| (m, k))).collect();
    let n_pairs = pairs.len();

    // per node: static (zz, perp) then (frequency, zz weight, perp weight) per pair
    let node_row = |t: usize, out: &mut Vec<NodeData>| -> bool {
        out.clear();
        let u_tilt = (t as f64 + shift[1]) / n as f64;
        for j in 0..n {
            let u_q = (j as f64 + shift[0]) / n as f64;
            let qp = config.quadrupole_at(idx, [u_q, u_tilt, 0.0]);
            let h = hamiltonian_with_ops(&ops, sp.gamma_n, config.b_ext, &qp);
            let Ok(es) = eigendecompose(&h) else {
                return false;
            };
            let z = es.to_eigenbasis(&ops.iz);
            let x = es.to_eigenbasis(&ops.ix);
            let y = es.to_eigenbasis(&ops.iy);
            let mut node = NodeData {
                static_zz: 0.0,
                static_perp: 0.0,
                lines: Vec::with_capacity(n_pairs),
            };
            for m in 0..d {
                node.static_zz += scale * z[(m, m)].norm_sqr();
                node.static_perp += scale * (x[(m, m)].norm_sqr() + y[(m, m)].norm_sqr());
            }
            node.lines.extend(pairs.iter().map(|&(m, k)| {
                [
                    es.eigenvalues[k] - es.eigenvalues[m],
                    scale * z[(m, k)].norm_sqr(),
                    scale * (x[(m, k)].norm_sqr() + y[(m, k)].norm_sqr()),
                ]
            }));
            out.push(node);
        }
        true
    };

    let buf = chunked_sum(t_segments.len(), TILT_CHUNK, total_len, |range, buf| {
        let (zz_buf, rest) = buf.split_at_mut(len);
        let (perp_buf, tail) = rest.split_at_mut(len);
        let mut zz_acc = Accumulator::over(grid, zz_buf);
        let mut perp_acc = Accumulator::over(grid, perp_buf);
        let mut rows: Vec<(usize, Vec<NodeData>)> = Vec::new();
        for ts in &t_segments[range] {
            // fetch (or reuse) the two node rows this segment spans
            for t in [ts.lo, ts.lo + 1] {
                if !rows.iter().any(|(r, _)| *r == t) {
                    let mut row = Vec::new();
                    if !node_row(t, &mut row) {
                        failed.store(true, std::sync::atomic::Ordering::Relaxed);
                        return;
                    }
                    rows.push((t, row));
                }
            }
            rows.retain(|(r, _)| *r >= ts.lo);
            let row_lo = &rows.iter().find(|(r, _)| *r == ts.lo).unwrap().1;
            let row_hi = &rows.iter().find(|(r, _)| *r == ts.lo + 1).unwrap().1;
            for qs in &q_segments {
                let c = [&row_lo[qs.lo], &row_lo[qs.lo + 1], &row_hi[qs.lo], &row_hi[qs.lo + 1]];
                let area = qs.width * ts.width;
                // static weights: cell mean of the clamped bilinear interpolant
                let corner_w = |a: f64, b: f64| {
                    let (a, b) = (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
                    [(1.0 - a) * (1.0 - b), a * (1.0 - b), (1.0 - a) * b, a * b]
                };
                let cw = corner_w(0.5 * (qs.a0 + qs.a1), 0.5 * (ts.a0 + ts.a1));
                zz_acc.static_weight += area * (0..4).map(|k| cw[k] * c[k].static_zz).sum::<f64>();
                perp_acc.static_weight += area * (0..4).map(|k| cw[k] * c[k].static_perp).sum::<f64>();
                for p in 0..n_pairs {
                    let v = [c[0].lines[p], c[1].lines[p], c[2].lines[p], c[3].lines[p]];
                    deposit_cell(&mut zz_acc, &mut perp_acc, &v, qs, ts, step, negligible);
                }
            }
        }
        tail[0] += zz_acc.static_weight;
        tail[1] += zz_acc.out_of_band;
        tail[2] += perp_acc.static_weight;
        tail[3] += perp_acc.out_of_band;
    });
    if failed.load(std::sync::atomic::Ordering::Relaxed) {
        return Err(Error::Invariant(format!("eigensolver failed for {}", sp.name)));
    }
    let (zz_buf, rest) = buf.split_at(len);
    let (perp_buf, tail) = rest.split_at(len);
    let mirror = |acc: &[f64]| -> Vec<f64> {
        let n = grid.half_bins();
        (0..=2 * n).map(|i| acc[i] + acc[2 * n - i]).collect()
    };
    let mut zz = NoiseSpectrum::zeros(Component::Zz, grid);
    zz.density = mirror(zz_buf);
    zz.static_variance = tail[0];
    zz.out_of_band = tail[1];
    let mut perp = NoiseSpectrum::zeros(Component::Perp, grid);
    perp.density = mirror(perp_buf);
    perp.static_variance = tail[2];
    perp.out_of_band = tail[3];
    Ok((zz, perp))
}

struct NodeData {
    static_zz: f64,
    static_perp: f64,
    /// [frequency, zz weight, perp weight] per level pair
    lines: Vec<[f64; 3]>,
}

/// A piece of the unit interval, as the parameter range [a0, a1] along the
/// line through nodes `lo` and `lo + 1` (0 at `lo`, 1 at `lo + 1`). The two
/// boundary pieces lie outside [0, 1]: frequencies are extrapolated there,
/// weights held at the end node.
#[derive(Clone, Copy, Debug)]
struct Segment {
    lo: usize,
    a0: f64,
    a1: f64,
    width: f64,
}

/// Nodes sit at (j + s)/n; pieces cover [0, 1] exactly.
fn interpolation_segments(n: usize, s: f64) -> Vec<Segment> {
    let w = 1.0 / n as f64;
    let mut v = Vec::with_capacity(n + 1);
    v.push(Segment { lo: 0, a0: -s, a1: 0.0, width: s * w });
    for j in 0..n - 1 {
        v.push(Segment { lo: j, a0: 0.0, a1: 1.0, width: w });
    }
    v.push(Segment { lo: n - 2, a0: 1.0, a1: 2.0 - s, width: (1.0 - s) * w });
    v
}

/// Spreads one line over a cell. `v` holds the corners (q0 t0, q1 t0, q0 t1,
/// q1 t1) as [frequency, zz weight, perp weight]; frequency is bilinear over
/// the parameter ranges, weights bilinear over the ranges clamped to [0, 1].
#[allow(clippy::too_many_arguments)]
fn deposit_cell(
    zz: &mut Accumulator,
    perp: &mut Accumulator,
    v: &[[f64; 3]; 4],
    qs: &Segment,
    ts: &Segment,
    step: f64,
    negligible: f64,
) {
    let area = qs.width * ts.width;
    if area == 0.0 {
        return;
    }
    let at = |k: usize, a: f64, b: f64| {
        let lo = v[0][k] + b * (v[2][k] - v[0][k]);
        let hi = v[1][k] + b * (v[3][k] - v[1][k]);
        lo + a * (hi - lo)
    };
    let weights = |a: f64, b: f64| {
        let (a, b) = (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
        (at(1, a, b), at(2, a, b))
    };
    if v.iter().all(|c| c[1] < negligible && c[2] < negligible) {
        // weak lines: one broadened point at the cell centre keeps the weight
        let (a, b) = (0.5 * (qs.a0 + qs.a1), 0.5 * (ts.a0 + ts.a1));
        let (wz, wp) = weights(a, b);
        deposit_both(zz, perp, at(0, a, b), area * wz, area * wp);
        return;
    }
    let da = qs.a1 - qs.a0;
    let db = ts.a1 - ts.a0;
    let span_a = (at(0, qs.a1, ts.a0) - at(0, qs.a0, ts.a0))
        .abs()
        .max((at(0, qs.a1, ts.a1) - at(0, qs.a0, ts.a1)).abs());
    let span_b = (at(0, qs.a0, ts.a1) - at(0, qs.a0, ts.a0))
        .abs()
        .max((at(0, qs.a1, ts.a1) - at(0, qs.a1, ts.a0)).abs());
    let mut na = ((span_a / step).ceil() as usize).max(1);
    let mut nb = ((span_b / step).ceil() as usize).max(1);
    // cells far in the parameter tails can span many MHz; thin them out
    if na * nb > MAX_CELL_POINTS {
        let shrink = (MAX_CELL_POINTS as f64 / (na * nb) as f64).sqrt();
        na = ((na as f64 * shrink).ceil() as usize).max(1);
        nb = ((nb as f64 * shrink).ceil() as usize).max(1);
    }
    let inv = area / (na * nb) as f64;
    for ib in 0..nb {
        let b = ts.a0 + db * (ib as f64 + 0.5) / nb as f64;
        for ia in 0..na {
            let a = qs.a0 + da * (ia as f64 + 0.5) / na as f64;
            let (wz, wp) = weights(a, b);
            deposit_both(zz, perp, at(0, a, b), inv * wz, inv * wp);
        }
    }
}

/// C(t) = integral S(nu) cos(2 pi nu t) d nu at each `times` (ns); the static
/// part is excluded.
pub fn autocorrelation(spectrum: &NoiseSpectrum, times: &[f64]) -> Vec<f64> {
    let n = spectrum.half_bins();
    let dnu = spectrum.grid.dnu;
    times
        .iter()
        .map(|&t| {
            let step = Complex64::from_polar(1.0, 2.0 * PI * dnu * t * MHZ_NS);
            let mut phase = Complex64::new(1.0, 0.0);
            let mut terms = Vec::with_capacity(n + 1);
            for k in 0..=n {
                terms.push(spectrum.density[n + k] * phase.re);
                phase *= step;
                if k % 1024 == 1023 {
                    // re-anchor the recurrence to keep rounding bounded
                    phase = Complex64::from_polar(1.0, 2.0 * PI * dnu * (k + 1) as f64 * t * MHZ_NS);
                }
            }
            // symmetric density: full integral is twice the half, minus the shared zero bin
            2.0 * trapezoid(&terms, dnu)
        })
        .collect()
}

/// Magnitude of the analytic correlation |integral_{nu>0} 2 S(nu) e^{i 2 pi nu t}|.
/// For band-pass noise this is the envelope of C(t).
pub fn correlation_envelope(spectrum: &NoiseSpectrum, t: f64) -> f64 {
    let n = spectrum.half_bins();
    let dnu = spectrum.grid.dnu;
    let mut terms_re = Vec::with_capacity(n + 1);
    let mut terms_im = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let s = spectrum.density[n + k];
        let ph = 2.0 * PI * k as f64 * dnu * t * MHZ_NS;
        terms_re.push(s * ph.cos());
        terms_im.push(s * ph.sin());
    }
    let re = 2.0 * trapezoid(&terms_re, dnu);
    let im = 2.0 * trapezoid(&terms_im, dnu);
    re.hypot(im)
}

/// First time (ns) at which the correlation envelope falls to 1/e of its
/// zero-time value. `None` if it stays above within `t_max`.
pub fn decorrelation_time(spectrum: &NoiseSpectrum, t_max: f64) -> Option<f64> {
    let e0 = correlation_envelope(spectrum, 0.0);
    if !(e0 > 0.0) {
        return None;
    }
    let target = e0 / std::f64::consts::E;
    let step = 0.25;
    let mut lo = 0.0;
    let mut t = step;
    while t <= t_max {
        if correlation_envelope(spectrum, t) < target {
            let mut hi = t;
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if correlation_envelope(spectrum, mid) < target {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Some(0.5 * (lo + hi));
        }
        lo = t;
        t += step;
    }
    None
}
