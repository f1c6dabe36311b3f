//! Semiclassical time-domain simulation of the electron phase.
//!
//! Each realisation gives every nucleus an independent Haar-random pure
//! state, evolves the expectation values <I(t)> in closed form, builds the
//! Overhauser field on a uniform time grid and integrates the phase through
//! the switching function of each sequence.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::{hamiltonian_with_ops, sample_bath, BathConfig, BathSample, QuadrupoleParams};
use crate::coherence::{Channels, CoherenceModel, CurveMeta, VisibilityCurve};
use crate::error::{Error, Result};
use crate::nufft::GriddingPlan;
use crate::rng::{substream, Domain};
use crate::sequence::{PulseSequence, SequenceKind};
use crate::spectra::{GridSpec, MHZ_NS};
use crate::spin::{eigendecompose, CMatrix, SpinOperators};

pub const DEFAULT_REALIZATIONS: usize = 20_000;
pub const DEFAULT_SUBSAMPLE: usize = 2_000;
pub const BATCHES: usize = 20;
/// Transitions with sum_a |<n|I_a|m>|^2 below this fraction of I(I+1) are
/// not simulated and do not constrain the time step.
pub const ACTIVE_WEIGHT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryConfig {
    pub n_realizations: usize,
    /// ns; `None` uses 1/(10 nu_max_active).
    pub time_step: Option<f64>,
    pub seed: u64,
    /// Representative nuclei kept from the full bath.
    pub subsample: usize,
    pub channels: Channels,
    /// Multiplies every normalised coupling; 0 decouples the bath.
    pub coupling_scale: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            n_realizations: DEFAULT_REALIZATIONS,
            time_step: None,
            seed: 1,
            subsample: DEFAULT_SUBSAMPLE,
            channels: Channels::default(),
            coupling_scale: 1.0,
        }
    }
}

impl TrajectoryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_realizations < BATCHES {
            return Err(Error::invalid(format!(
                "n_realizations = {} must be at least {BATCHES}",
                self.n_realizations
            )));
        }
        if self.subsample == 0 {
            return Err(Error::invalid("subsample must be positive"));
        }
        if !(self.coupling_scale >= 0.0 && self.coupling_scale.is_finite()) {
            return Err(Error::invalid(format!("coupling_scale = {} must be >= 0", self.coupling_scale)));
        }
        if let Some(dt) = self.time_step {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::invalid(format!("time_step = {dt} ns must be > 0")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub visibility: f64,
    pub stderr: f64,
}

/// Eigenbasis data of one nucleus.
#[derive(Clone, Debug)]
pub struct NucleusLines {
    pub spin: f64,
    pub eigenvectors: CMatrix,
    /// Diagonal <m|I_a|m>, a = x, y, z.
    pub diagonal: Vec<[f64; 3]>,
    /// (upper n, lower m, E_n - E_m in MHz, <n|I_a|m>)
    pub lines: Vec<(usize, usize, f64, [Complex64; 3])>,
}

impl NucleusLines {
    pub fn new(ops: &SpinOperators, gamma_n: f64, b_ext: f64, qp: &QuadrupoleParams) -> Result<Self> {
        let eig = eigendecompose(&hamiltonian_with_ops(ops, gamma_n, b_ext, qp))?;
        let mats = [
            eig.to_eigenbasis(&ops.ix),
            eig.to_eigenbasis(&ops.iy),
            eig.to_eigenbasis(&ops.iz),
        ];
        let d = ops.dim();
        let diagonal = (0..d).map(|m| [mats[0][(m, m)].re, mats[1][(m, m)].re, mats[2][(m, m)].re]).collect();
        let mut lines = Vec::new();
        for n in 0..d {
            for m in 0..n {
                let x = [mats[0][(n, m)], mats[1][(n, m)], mats[2][(n, m)]];
                lines.push((n, m, eig.eigenvalues[n] - eig.eigenvalues[m], x));
            }
        }
        Ok(NucleusLines {
            spin: ops.spin.value(),
            eigenvectors: eig.eigenvectors,
            diagonal,
            lines,
        })
    }

    /// Eigenbasis amplitudes of a laboratory-basis state.
    pub fn amplitudes(&self, psi: &[Complex64]) -> Vec<Complex64> {
        let d = psi.len();
        (0..d)
            .map(|k| (0..d).map(|j| self.eigenvectors[(j, k)].conj() * psi[j]).sum())
            .collect()
    }

    /// <I(t)> for the state with eigenbasis amplitudes `c`, by direct summation.
    pub fn expectation(&self, c: &[Complex64], t: f64) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (m, dg) in self.diagonal.iter().enumerate() {
            for a in 0..3 {
                out[a] += c[m].norm_sqr() * dg[a];
            }
        }
        for &(n, m, nu, x) in &self.lines {
            let ph = c[n].conj() * c[m] * Complex64::from_polar(1.0, 2.0 * PI * nu * t * MHZ_NS);
            for a in 0..3 {
                out[a] += 2.0 * (ph * x[a]).re;
            }
        }
        out
    }
}

/// Haar-random pure state of dimension d.
pub fn haar_state<R: Rng>(d: usize, rng: &mut R) -> Vec<Complex64> {
    let mut v: Vec<Complex64> = (0..d)
        .map(|_| Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    for z in &mut v {
        *z /= norm;
    }
    v
}

struct SimLine {
    nucleus: usize,
    n: usize,
    m: usize,
    x: [Complex64; 3],
}

/// A bath prepared for trajectory simulation at one field.
pub struct TrajectorySimulator {
    nuclei: Vec<NucleusLines>,
    /// a_k sqrt(d_k + 1): Haar second moments are 1/(d+1) of the
    /// infinite-temperature ones.
    scaled_coupling: Vec<f64>,
    lines: Vec<SimLine>,
    frequencies: Vec<f64>,
    nu_max_active: f64,
    b_ext: f64,
    gamma_e: f64,
    tc: TrajectoryConfig,
}

impl TrajectorySimulator {
    pub fn new(bath: &BathSample, b_ext: f64, gamma_e: f64, tc: &TrajectoryConfig) -> Result<Self> {
        tc.validate()?;
        if !(b_ext > 0.0) {
            return Err(Error::invalid(format!("b_ext = {b_ext} T must be > 0")));
        }
        let ops: Vec<SpinOperators> = bath.species.iter().map(|s| SpinOperators::new(s.spin)).collect();
        let nuclei = bath
            .nuclei
            .par_iter()
            .map(|n| {
                let s = &bath.species[n.species];
                NucleusLines::new(&ops[n.species], s.gamma_n, b_ext, &n.quad)
            })
            .collect::<Result<Vec<_>>>()?;
        let scaled_coupling = bath
            .nuclei
            .iter()
            .map(|n| n.coupling * ((bath.species[n.species].spin.dim() + 1) as f64).sqrt())
            .collect();
        let used = [tc.channels.quadratic, tc.channels.quadratic, tc.channels.linear];
        let mut lines = Vec::new();
        let mut frequencies = Vec::new();
        let mut nu_max_active: f64 = 0.0;
        for (k, nl) in nuclei.iter().enumerate() {
            let casimir = nl.spin * (nl.spin + 1.0);
            for &(n, m, nu, x) in &nl.lines {
                let w: f64 = (0..3).filter(|&a| used[a]).map(|a| x[a].norm_sqr()).sum();
                if w < ACTIVE_WEIGHT * casimir {
                    continue;
                }
                nu_max_active = nu_max_active.max(nu);
                frequencies.push(nu);
                lines.push(SimLine { nucleus: k, n, m, x });
            }
        }
        if let Some(dt) = tc.time_step {
            if nu_max_active > 0.0 && dt > 1.0 / (10.0 * nu_max_active * MHZ_NS) {
                return Err(Error::invalid(format!(
                    "time_step = {dt} ns does not resolve the {nu_max_active:.3} MHz transition \
                     (needs <= {:.4} ns)",
                    1.0 / (10.0 * nu_max_active * MHZ_NS)
                )));
            }
        }
        Ok(TrajectorySimulator {
            nuclei,
            scaled_coupling,
            lines,
            frequencies,
            nu_max_active,
            b_ext,
            gamma_e,
            tc: tc.clone(),
        })
    }

    /// Largest simulated transition frequency, MHz.
    pub fn nu_max_active(&self) -> f64 {
        self.nu_max_active
    }

    pub fn time_step(&self) -> f64 {
        self.tc.time_step.unwrap_or_else(|| {
            if self.nu_max_active > 0.0 {
                1.0 / (10.0 * self.nu_max_active * MHZ_NS)
            } else {
                1.0
            }
        })
    }

    /// Visibility and batch standard error for each sequence; all sequences
    /// share the same trajectories.
    pub fn simulate(&self, seqs: &[PulseSequence]) -> Vec<McEstimate> {
        if seqs.is_empty() {
            return Vec::new();
        }
        let t_max = seqs.iter().map(|s| s.total_time).fold(0.0, f64::max);
        let dt = self.time_step();
        let n_t = (t_max / dt).ceil() as usize + 2;
        let rates: Vec<f64> = self.frequencies.iter().map(|nu| 2.0 * PI * nu * MHZ_NS * dt).collect();
        let plan = GriddingPlan::new(&rates, n_t);
        let bounds: Vec<(Vec<f64>, f64)> = seqs.iter().map(|s| (s.boundaries(), s.v0())).collect();

        let r = self.tc.n_realizations;
        let batch_sums: Vec<Vec<Complex64>> = (0..BATCHES)
            .into_par_iter()
            .map(|b| {
                let mut work = Work::new(&plan, self.lines.len());
                let mut acc = vec![Complex64::new(0.0, 0.0); seqs.len()];
                for i in b * r / BATCHES..(b + 1) * r / BATCHES {
                    self.realization(i as u64, &plan, dt, &bounds, &mut work, &mut acc);
                }
                acc
            })
            .collect();
        (0..seqs.len())
            .map(|s| {
                let batch: Vec<Complex64> = (0..BATCHES)
                    .map(|b| batch_sums[b][s] / ((b + 1) * r / BATCHES - b * r / BATCHES) as f64)
                    .collect();
                let mean = batch_sums.iter().map(|v| v[s]).sum::<Complex64>() / r as f64;
                let v0 = bounds[s].1;
                // spread of the batch means along the direction of the mean
                let dir = if mean.norm() > 1e-12 { mean / mean.norm() } else { Complex64::new(1.0, 0.0) };
                let proj: Vec<f64> = batch.iter().map(|z| (z * dir.conj()).re).collect();
                let pm = proj.iter().sum::<f64>() / BATCHES as f64;
                let var = proj.iter().map(|p| (p - pm).powi(2)).sum::<f64>() / (BATCHES * (BATCHES - 1)) as f64;
                McEstimate {
                    visibility: v0 * mean.norm(),
                    stderr: v0 * var.sqrt(),
                }
            })
            .collect()
    }

    fn realization(
        &self,
        index: u64,
        plan: &GriddingPlan,
        dt: f64,
        bounds: &[(Vec<f64>, f64)],
        work: &mut Work,
        acc: &mut [Complex64],
    ) {
        let mut rng = substream(self.tc.seed, Domain::Trajectory, index);
        let mut statics = [0.0; 3];
        work.coeffs.clear();
        for (k, nl) in self.nuclei.iter().enumerate() {
            let psi = haar_state(nl.eigenvectors.nrows(), &mut rng);
            let c = nl.amplitudes(&psi);
            let a = self.scaled_coupling[k];
            for (m, dg) in nl.diagonal.iter().enumerate() {
                let p = c[m].norm_sqr() * a;
                for q in 0..3 {
                    statics[q] += p * dg[q];
                }
            }
            work.coeffs.push(c);
        }
        let comps: &[usize] = match (self.tc.channels.linear, self.tc.channels.quadratic) {
            (true, true) => &[0, 1, 2],
            (true, false) => &[2],
            (false, true) => &[0, 1],
            (false, false) => &[],
        };
        for &q in comps {
            for (amp, line) in work.amps.iter_mut().zip(&self.lines) {
                let c = &work.coeffs[line.nucleus];
                *amp = self.scaled_coupling[line.nucleus] * c[line.n].conj() * c[line.m] * line.x[q];
            }
            plan.execute(&work.amps, &mut work.grid, &mut work.field[q]);
        }
        let n_t = plan.n_out();
        let b_mt = self.b_ext * 1e3;
        let mut prev = 0.0;
        let mut total = 0.0;
        for j in 0..n_t {
            let field = |q: usize| statics[q] + 2.0 * work.field[q][j].re;
            let mut w = 0.0;
            if self.tc.channels.linear {
                w += self.gamma_e * field(2);
            }
            if self.tc.channels.quadratic {
                let (bx, by) = (field(0), field(1));
                w += self.gamma_e * (bx * bx + by * by) / (2.0 * b_mt);
            }
            if j > 0 {
                total += 0.5 * (prev + w) * dt;
            }
            work.prefix[j] = total;
            prev = w;
        }
        let at = |t: f64| -> f64 {
            let x = t / dt;
            let j = (x.floor() as usize).min(n_t - 2);
            let f = x - j as f64;
            work.prefix[j] * (1.0 - f) + work.prefix[j + 1] * f
        };
        for (s, (b, _)) in bounds.iter().enumerate() {
            let mut phase = 0.0;
            let mut sign = 1.0;
            for w in b.windows(2) {
                phase += sign * (at(w[1]) - at(w[0]));
                sign = -sign;
            }
            acc[s] += Complex64::from_polar(1.0, 2.0 * PI * MHZ_NS * phase);
        }
    }
}

struct Work {
    coeffs: Vec<Vec<Complex64>>,
    amps: Vec<Complex64>,
    grid: Vec<Complex64>,
    field: [Vec<Complex64>; 3],
    prefix: Vec<f64>,
}

impl Work {
    fn new(plan: &GriddingPlan, n_lines: usize) -> Self {
        let zero = Complex64::new(0.0, 0.0);
        Work {
            coeffs: Vec::new(),
            amps: vec![zero; n_lines],
            grid: plan.scratch(),
            field: std::array::from_fn(|_| vec![zero; plan.n_out()]),
            prefix: vec![0.0; plan.n_out()],
        }
    }
}

/// One sequence on an explicit bath sample.
pub fn simulate_sequence(
    bath: &BathSample,
    b_ext: f64,
    gamma_e: f64,
    seq: &PulseSequence,
    tc: &TrajectoryConfig,
) -> Result<McEstimate> {
    let sim = TrajectorySimulator::new(bath, b_ext, gamma_e, tc)?;
    Ok(sim.simulate(std::slice::from_ref(seq))[0])
}

/// The representative subsample used by the Monte-Carlo engine.
pub fn representative_bath(config: &BathConfig, subsample: usize) -> Result<BathSample> {
    let full = sample_bath(config)?;
    full.subsample(subsample, config.sigma_oh)
}

pub fn simulate_curve(
    config: &BathConfig,
    kind: SequenceKind,
    times: &[f64],
    pulse_fidelity: f64,
    tc: &TrajectoryConfig,
) -> Result<VisibilityCurve> {
    let mut bath = representative_bath(config, tc.subsample)?;
    for n in &mut bath.nuclei {
        n.coupling *= tc.coupling_scale;
    }
    let sim = TrajectorySimulator::new(&bath, config.b_ext, config.electron_gyromagnetic, tc)?;
    let seqs = times
        .iter()
        .map(|&t| kind.build(t, pulse_fidelity))
        .collect::<Result<Vec<_>>>()?;
    let est = sim.simulate(&seqs);
    Ok(VisibilityCurve {
        times: times.to_vec(),
        visibility: est.iter().map(|e| e.visibility).collect(),
        stderr: Some(est.iter().map(|e| e.stderr).collect()),
        chi_linear: None,
        chi_quad: None,
        meta: CurveMeta {
            b_ext: config.b_ext,
            sequence: kind.to_string(),
            engine: "mc".into(),
            seed: Some(tc.seed),
            version: env!("CARGO_PKG_VERSION").into(),
            ..CurveMeta::default()
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub times: Vec<f64>,
    pub monte_carlo: Vec<f64>,
    pub stderr: Vec<f64>,
    pub filter: Vec<f64>,
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
}

/// Both engines on the same configuration and channel selection.
pub fn compare_to_filter(
    config: &BathConfig,
    kind: SequenceKind,
    times: &[f64],
    pulse_fidelity: f64,
    tc: &TrajectoryConfig,
    grid: GridSpec,
    n_samples: usize,
) -> Result<Comparison> {
    let mc = simulate_curve(config, kind, times, pulse_fidelity, tc)?;
    let model = CoherenceModel::from_config(config, grid, n_samples, pulse_fidelity)?.with_channels(tc.channels);
    let ff = model.curve(kind, times)?;
    let diffs: Vec<f64> = mc.visibility.iter().zip(&ff.visibility).map(|(a, b)| (a - b).abs()).collect();
    Ok(Comparison {
        times: times.to_vec(),
        max_abs_diff: diffs.iter().copied().fold(0.0, f64::max),
        mean_abs_diff: diffs.iter().sum::<f64>() / diffs.len().max(1) as f64,
        monte_carlo: mc.visibility,
        stderr: mc.stderr.unwrap_or_default(),
        filter: ff.visibility,
    })
}
