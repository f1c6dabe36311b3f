//! Bounded derivative-free least squares for bath parameters.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bath::BathConfig;
use crate::coherence::{Channels, CoherenceModel, CurveMeta, VisibilityCurve};
use crate::error::{Error, Result};
use crate::rng::{substream, Domain};
use crate::sequence::SequenceKind;
use crate::spectra::{GridSpec, DEFAULT_SAMPLES};

pub const RESTARTS: usize = 5;
pub const MAX_EVALS: usize = 2_000;
pub const DEFAULT_BOOTSTRAP: usize = 200;
pub const MIN_POINTS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitParam {
    SigmaOh,
    NuQScale,
    TiltSigma,
    /// Readout amplitude multiplying the pulse-fidelity prefactor.
    V0,
}

impl FitParam {
    pub const ALL: [FitParam; 4] = [FitParam::SigmaOh, FitParam::NuQScale, FitParam::TiltSigma, FitParam::V0];

    pub fn unit(self) -> &'static str {
        match self {
            FitParam::SigmaOh => "mT",
            FitParam::NuQScale => "1",
            FitParam::TiltSigma => "rad",
            FitParam::V0 => "1",
        }
    }

    pub fn default_bounds(self) -> (f64, f64) {
        match self {
            FitParam::SigmaOh => (5.0, 80.0),
            FitParam::NuQScale => (0.2, 3.0),
            FitParam::TiltSigma => (0.01, 0.8),
            FitParam::V0 => (0.2, 1.5),
        }
    }
}

impl fmt::Display for FitParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FitParam::SigmaOh => "sigma_oh",
            FitParam::NuQScale => "nu_q_scale",
            FitParam::TiltSigma => "tilt_sigma",
            FitParam::V0 => "v0",
        })
    }
}

impl FromStr for FitParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FitParam::ALL
            .into_iter()
            .find(|p| p.to_string() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fit parameter `{s}` (sigma_oh, nu_q_scale, tilt_sigma, v0)")))
    }
}

/// Values of all four parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamValues {
    pub sigma_oh: f64,
    pub nu_q_scale: f64,
    pub tilt_sigma: f64,
    pub v0: f64,
}

impl ParamValues {
    pub fn from_config(config: &BathConfig) -> Self {
        ParamValues {
            sigma_oh: config.sigma_oh,
            nu_q_scale: config.nu_q_scale,
            tilt_sigma: config.tilt_sigma,
            v0: 1.0,
        }
    }

    pub fn get(&self, p: FitParam) -> f64 {
        match p {
            FitParam::SigmaOh => self.sigma_oh,
            FitParam::NuQScale => self.nu_q_scale,
            FitParam::TiltSigma => self.tilt_sigma,
            FitParam::V0 => self.v0,
        }
    }

    pub fn set(&mut self, p: FitParam, v: f64) {
        match p {
            FitParam::SigmaOh => self.sigma_oh = v,
            FitParam::NuQScale => self.nu_q_scale = v,
            FitParam::TiltSigma => self.tilt_sigma = v,
            FitParam::V0 => self.v0 = v,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitProblem {
    /// Each curve carries its field and sequence in `meta`.
    pub datasets: Vec<VisibilityCurve>,
    pub free: Vec<FitParam>,
    /// Bounds for the free parameters; missing ones use the defaults.
    pub bounds: Vec<(FitParam, f64, f64)>,
    /// Source of the fixed parameters and of everything else in the model.
    pub template: BathConfig,
    /// Readout amplitude when `v0` is not free.
    pub v0: f64,
    pub pulse_fidelity: f64,
    pub channels: Channels,
    pub grid: GridSpec,
    pub n_samples: usize,
    pub n_bootstrap: usize,
    pub seed: u64,
}

impl FitProblem {
    pub fn new(datasets: Vec<VisibilityCurve>, free: Vec<FitParam>, template: BathConfig) -> Self {
        FitProblem {
            datasets,
            free,
            bounds: Vec::new(),
            seed: template.seed,
            template,
            v0: 1.0,
            pulse_fidelity: crate::coherence::DEFAULT_PULSE_FIDELITY,
            channels: Channels::default(),
            grid: GridSpec::default(),
            n_samples: DEFAULT_SAMPLES,
            n_bootstrap: DEFAULT_BOOTSTRAP,
        }
    }

    pub fn bounds_of(&self, p: FitParam) -> (f64, f64) {
        self.bounds
            .iter()
            .find(|b| b.0 == p)
            .map(|b| (b.1, b.2))
            .unwrap_or_else(|| p.default_bounds())
    }

    pub fn validate(&self) -> Result<()> {
        if self.free.is_empty() {
            return Err(Error::invalid("at least one free parameter is required"));
        }
        for (i, p) in self.free.iter().enumerate() {
            if self.free[..i].contains(p) {
                return Err(Error::invalid(format!("parameter {p} listed twice")));
            }
            let (lo, hi) = self.bounds_of(*p);
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::invalid(format!("bounds for {p} must be finite with lower < upper, got [{lo}, {hi}]")));
            }
        }
        if self.datasets.is_empty() {
            return Err(Error::invalid("no datasets"));
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if d.len() < MIN_POINTS {
                return Err(Error::invalid(format!(
                    "dataset {i} has {} points; at least {MIN_POINTS} are needed",
                    d.len()
                )));
            }
            if d.visibility.len() != d.len() || d.stderr.as_ref().is_some_and(|s| s.len() != d.len()) {
                return Err(Error::invalid(format!("dataset {i} has columns of different lengths")));
            }
            if d.stderr.as_ref().is_some_and(|s| s.iter().any(|&e| !(e > 0.0))) {
                return Err(Error::invalid(format!("dataset {i} has non-positive stderr")));
            }
            if !(d.meta.b_ext > 0.0) {
                return Err(Error::invalid(format!("dataset {i} has no field (b_ext = {})", d.meta.b_ext)));
            }
            d.meta.sequence.parse::<SequenceKind>()?;
        }
        self.template.validate()
    }

    fn start_values(&self) -> ParamValues {
        let mut v = ParamValues::from_config(&self.template);
        v.v0 = self.v0;
        v
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub param: FitParam,
    pub value: f64,
    pub unit: String,
    /// 15.9-84.1 percentile of the bootstrap refits, widened to contain the estimate.
    pub interval_1sigma: (f64, f64),
    /// 2.5-97.5 percentile, likewise.
    pub interval_95: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartDiagnostics {
    pub start: Vec<f64>,
    pub start_objective: f64,
    pub end: Vec<f64>,
    pub objective: f64,
    pub evaluations: usize,
    pub iterations: usize,
    /// Simplex diameter in units of the box width.
    pub simplex_size: f64,
    pub converged: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: Option<String>,
    pub data_hashes: Vec<String>,
    pub seed: u64,
    pub version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub estimates: Vec<Estimate>,
    /// Weighted residual sum of squares at the estimate.
    pub objective: f64,
    pub n_points: usize,
    pub restarts: Vec<RestartDiagnostics>,
    pub n_bootstrap: usize,
    /// Correlation of the free parameters across bootstrap refits, in the
    /// order of `estimates`.
    pub correlation: Option<Vec<Vec<f64>>>,
    pub provenance: Provenance,
}

impl FitResult {
    pub fn estimate(&self, p: FitParam) -> Option<&Estimate> {
        self.estimates.iter().find(|e| e.param == p)
    }
}

/// chi curves at the template sigma_oh for one dataset, keyed by the
/// spectral parameters; sigma_oh and v0 then enter analytically.
type ChiCurve = Arc<Vec<(f64, f64, f64)>>;

struct Evaluator<'a> {
    problem: &'a FitProblem,
    datasets: Vec<&'a VisibilityCurve>,
    kinds: Vec<SequenceKind>,
    cache: Mutex<HashMap<(u64, u64, u64), Arc<Vec<ChiCurve>>>>,
}

impl<'a> Evaluator<'a> {
    fn new(problem: &'a FitProblem) -> Result<Self> {
        // canonical order makes the objective independent of input order
        let mut datasets: Vec<&VisibilityCurve> = problem.datasets.iter().collect();
        datasets.sort_by(|a, b| dataset_key(a).cmp(&dataset_key(b)));
        let kinds = datasets
            .iter()
            .map(|d| d.meta.sequence.parse::<SequenceKind>())
            .collect::<Result<Vec<_>>>()?;
        Ok(Evaluator {
            problem,
            datasets,
            kinds,
            cache: Mutex::new(HashMap::new()),
        })
    }

    fn chi_curves(&self, v: &ParamValues) -> Result<Arc<Vec<ChiCurve>>> {
        let key = (self.problem.template.b_ext.to_bits(), v.nu_q_scale.to_bits(), v.tilt_sigma.to_bits());
        if let Some(c) = self.cache.lock().unwrap().get(&key) {
            return Ok(c.clone());
        }
        let mut by_field: HashMap<u64, CoherenceModel> = HashMap::new();
        let mut out = Vec::with_capacity(self.datasets.len());
        for (d, kind) in self.datasets.iter().zip(&self.kinds) {
            let b = d.meta.b_ext;
            if !by_field.contains_key(&b.to_bits()) {
                let mut cfg = self.problem.template.with_field(b);
                cfg.nu_q_scale = v.nu_q_scale;
                cfg.tilt_sigma = v.tilt_sigma;
                let m = CoherenceModel::from_config(&cfg, self.problem.grid, self.problem.n_samples, self.problem.pulse_fidelity)?
                    .with_channels(self.problem.channels);
                by_field.insert(b.to_bits(), m);
            }
            let m = &by_field[&b.to_bits()];
            let rows = d
                .times
                .iter()
                .map(|&t| {
                    let seq = m.sequence(*kind, t)?;
                    let (l, q) = m.chis(&seq);
                    Ok((seq.v0(), l, q))
                })
                .collect::<Result<Vec<_>>>()?;
            out.push(Arc::new(rows));
        }
        let out = Arc::new(out);
        self.cache.lock().unwrap().insert(key, out.clone());
        Ok(out)
    }

    /// Model visibilities for every dataset, canonical order.
    fn model(&self, v: &ParamValues) -> Result<Vec<Vec<f64>>> {
        let curves = self.chi_curves(v)?;
        let r2 = (v.sigma_oh / self.problem.template.sigma_oh).powi(2);
        Ok(curves
            .iter()
            .map(|rows| rows.iter().map(|&(v0, l, q)| v.v0 * v0 * (-r2 * l - r2 * r2 * q).exp()).collect())
            .collect())
    }

    fn objective_with(&self, v: &ParamValues, data: &[Vec<f64>]) -> Result<f64> {
        let model = self.model(v)?;
        let mut total = 0.0;
        for ((m, d), ds) in model.iter().zip(data).zip(&self.datasets) {
            for (i, (mi, di)) in m.iter().zip(d).enumerate() {
                let w = ds.stderr.as_ref().map_or(1.0, |s| s[i]);
                total += ((mi - di) / w).powi(2);
            }
        }
        if !total.is_finite() {
            return Err(Error::NonFinite {
                params: FitParam::ALL.iter().map(|p| (p.to_string(), v.get(*p))).collect(),
            });
        }
        Ok(total)
    }

    fn data(&self) -> Vec<Vec<f64>> {
        self.datasets.iter().map(|d| d.visibility.clone()).collect()
    }
}

fn dataset_key(d: &VisibilityCurve) -> (u64, String, Vec<u64>, Vec<u64>) {
    (
        d.meta.b_ext.to_bits(),
        d.meta.sequence.clone(),
        d.times.iter().map(|t| t.to_bits()).collect(),
        d.visibility.iter().map(|t| t.to_bits()).collect(),
    )
}

/// Maps the unit box of the free parameters to full parameter values.
struct Space {
    free: Vec<FitParam>,
    bounds: Vec<(f64, f64)>,
    base: ParamValues,
}

impl Space {
    fn values(&self, u: &[f64]) -> ParamValues {
        let mut v = self.base;
        for ((p, (lo, hi)), x) in self.free.iter().zip(&self.bounds).zip(u) {
            v.set(*p, lo + (hi - lo) * x.clamp(0.0, 1.0));
        }
        v
    }

    fn unit(&self, v: &ParamValues) -> Vec<f64> {
        self.free
            .iter()
            .zip(&self.bounds)
            .map(|(p, (lo, hi))| ((v.get(*p) - lo) / (hi - lo)).clamp(0.0, 1.0))
            .collect()
    }
}

struct Minimum {
    x: Vec<f64>,
    f: f64,
    evaluations: usize,
    iterations: usize,
    size: f64,
    converged: bool,
}

/// Nelder-Mead on [0, 1]^n with trial points clamped into the box.
fn nelder_mead<F>(f: F, start: &[f64], step: f64) -> Result<Minimum>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let n = start.len();
    let clamp = |x: Vec<f64>| -> Vec<f64> { x.into_iter().map(|v| v.clamp(0.0, 1.0)).collect() };
    let counter = std::cell::Cell::new(0usize);
    let eval = |x: &[f64]| -> Result<f64> {
        counter.set(counter.get() + 1);
        f(x)
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    let x0 = clamp(start.to_vec());
    simplex.push((x0.clone(), eval(&x0)?));
    for i in 0..n {
        let mut x = x0.clone();
        x[i] = if x[i] + step <= 1.0 { x[i] + step } else { x[i] - step };
        let fx = eval(&x)?;
        simplex.push((x, fx));
    }
    let size = |s: &[(Vec<f64>, f64)]| -> f64 {
        let mut d: f64 = 0.0;
        for a in s {
            for b in s {
                let dist = a.0.iter().zip(&b.0).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
                d = d.max(dist);
            }
        }
        d
    };
    let mut iterations = 0;
    let mut converged = false;
    while counter.get() < MAX_EVALS {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (fb, fw) = (simplex[0].1, simplex[n].1);
        if (fw - fb).abs() <= 1e-8 * fb.abs() + 1e-12 && size(&simplex) < 1e-4 {
            converged = true;
            break;
        }
        iterations += 1;
        let centroid: Vec<f64> = (0..n).map(|i| simplex[..n].iter().map(|s| s.0[i]).sum::<f64>() / n as f64).collect();
        let toward = |t: f64| -> Vec<f64> {
            clamp(centroid.iter().zip(&simplex[n].0).map(|(c, w)| c + t * (w - c)).collect())
        };
        let xr = toward(-1.0);
        let fr = eval(&xr)?;
        if fr < simplex[0].1 {
            let xe = toward(-2.0);
            let fe = eval(&xe)?;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
        } else if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
        } else {
            let (xc, fc) = if fr < simplex[n].1 {
                let x = toward(-0.5);
                let fx = eval(&x)?;
                (x, fx)
            } else {
                let x = toward(0.5);
                let fx = eval(&x)?;
                (x, fx)
            };
            if fc < simplex[n].1.min(fr) {
                simplex[n] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for s in simplex.iter_mut().skip(1) {
                    s.0 = clamp(best.iter().zip(&s.0).map(|(b, x)| b + 0.5 * (x - b)).collect());
                    s.1 = eval(&s.0)?;
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let sz = size(&simplex);
    let (x, f) = simplex.swap_remove(0);
    Ok(Minimum {
        x,
        f,
        evaluations: counter.get(),
        iterations,
        size: sz,
        converged,
    })
}

/// Latin-hypercube points in [0, 1]^dim.
fn latin_hypercube(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = substream(seed, Domain::FitStart, 0);
    let mut pts = vec![vec![0.0; dim]; n];
    for d in 0..dim {
        let mut strata: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            strata.swap(i, j);
        }
        for (i, p) in pts.iter_mut().enumerate() {
            p[d] = (strata[i] as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    pts
}

/// Parameters that need new spectra when they change; the others enter the
/// cached chi curves analytically.
fn is_spectral(p: FitParam) -> bool {
    matches!(p, FitParam::NuQScale | FitParam::TiltSigma)
}

/// Nelder-Mead over the spectral coordinates of `start`, each trial point
/// scored by an inner Nelder-Mead over the remaining ones. Falls back to a
/// single search when either group is empty.
fn nested_nelder_mead<F>(f: F, start: &[f64], spectral: &[bool]) -> Result<Minimum>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    let outer_idx: Vec<usize> = (0..start.len()).filter(|&i| spectral[i]).collect();
    let inner_idx: Vec<usize> = (0..start.len()).filter(|&i| !spectral[i]).collect();
    if outer_idx.is_empty() || inner_idx.is_empty() {
        return nelder_mead(f, start, 0.1);
    }
    let merge = |uo: &[f64], ui: &[f64]| -> Vec<f64> {
        let mut x = start.to_vec();
        for (k, &i) in outer_idx.iter().enumerate() {
            x[i] = uo[k];
        }
        for (k, &i) in inner_idx.iter().enumerate() {
            x[i] = ui[k];
        }
        x
    };
    let inner_start: Vec<f64> = inner_idx.iter().map(|&i| start[i]).collect();
    let total = std::cell::Cell::new(0usize);
    let inner = |uo: &[f64]| -> Result<Minimum> {
        let m = nelder_mead(|ui: &[f64]| f(&merge(uo, ui)), &inner_start, 0.1)?;
        total.set(total.get() + m.evaluations);
        Ok(m)
    };
    let outer_start: Vec<f64> = outer_idx.iter().map(|&i| start[i]).collect();
    let outer = nelder_mead(|uo: &[f64]| inner(uo).map(|m| m.f), &outer_start, 0.1)?;
    let last = inner(&outer.x)?;
    Ok(Minimum {
        x: merge(&outer.x, &last.x),
        f: last.f,
        evaluations: total.get(),
        iterations: outer.iterations,
        size: outer.size.max(last.size),
        converged: outer.converged && last.converged,
    })
}

fn minimise(ev: &Evaluator, space: &Space, data: &[Vec<f64>], starts: &[Vec<f64>]) -> Result<Vec<RestartDiagnostics>> {
    let spectral: Vec<bool> = space.free.iter().map(|p| is_spectral(*p)).collect();
    starts
        .iter()
        .map(|s| {
            let f = |u: &[f64]| ev.objective_with(&space.values(u), data);
            let f0 = f(s)?;
            let m = nested_nelder_mead(f, s, &spectral)?;
            Ok(RestartDiagnostics {
                start: space.free.iter().map(|p| space.values(s).get(*p)).collect(),
                start_objective: f0,
                end: space.free.iter().map(|p| space.values(&m.x).get(*p)).collect(),
                objective: m.f,
                evaluations: m.evaluations + 1,
                iterations: m.iterations,
                simplex_size: m.size,
                converged: m.converged,
            })
        })
        .collect()
}

fn best(restarts: &[RestartDiagnostics]) -> &RestartDiagnostics {
    restarts
        .iter()
        .min_by(|a, b| a.objective.total_cmp(&b.objective))
        .expect("at least one restart")
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let f = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] * (1.0 - f) + sorted[i + 1] * f
    } else {
        sorted[i]
    }
}

pub fn fit(problem: &FitProblem) -> Result<FitResult> {
    problem.validate()?;
    let ev = Evaluator::new(problem)?;
    let space = Space {
        free: problem.free.clone(),
        bounds: problem.free.iter().map(|p| problem.bounds_of(*p)).collect(),
        base: problem.start_values(),
    };
    let data = ev.data();
    let starts = latin_hypercube(RESTARTS, space.free.len(), problem.seed);
    let restarts = minimise(&ev, &space, &data, &starts)?;
    let top = best(&restarts).clone();
    let mut best_values = space.base;
    for (p, v) in space.free.iter().zip(&top.end) {
        best_values.set(*p, *v);
    }

    // residual bootstrap: resample standardised residuals within each dataset
    let model = ev.model(&best_values)?;
    let start = space.unit(&best_values);
    let refits: Vec<Vec<f64>> = (0..problem.n_bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng = substream(problem.seed, Domain::Bootstrap, b as u64);
            let resampled: Vec<Vec<f64>> = model
                .iter()
                .zip(&data)
                .zip(&ev.datasets)
                .map(|((m, d), ds)| {
                    let w = |i: usize| ds.stderr.as_ref().map_or(1.0, |s| s[i]);
                    let z: Vec<f64> = (0..m.len()).map(|i| (d[i] - m[i]) / w(i)).collect();
                    (0..m.len()).map(|i| m[i] + w(i) * z[rng.random_range(0..z.len())]).collect()
                })
                .collect();
            let r = minimise(&ev, &space, &resampled, std::slice::from_ref(&start))?;
            Ok(r[0].end.clone())
        })
        .collect::<Result<Vec<_>>>()?;

    let estimates = space
        .free
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let value = top.end[k];
            let (i1, i95) = if refits.is_empty() {
                ((value, value), (value, value))
            } else {
                let mut xs: Vec<f64> = refits.iter().map(|r| r[k]).collect();
                xs.sort_by(f64::total_cmp);
                let widen = |lo: f64, hi: f64| (lo.min(value), hi.max(value));
                (
                    widen(percentile(&xs, 0.158_655), percentile(&xs, 0.841_345)),
                    widen(percentile(&xs, 0.025), percentile(&xs, 0.975)),
                )
            };
            Estimate {
                param: *p,
                value,
                unit: p.unit().into(),
                interval_1sigma: i1,
                interval_95: i95,
            }
        })
        .collect();
    let correlation = (refits.len() >= 3).then(|| correlation_matrix(&refits, space.free.len()));
    Ok(FitResult {
        estimates,
        objective: top.objective,
        n_points: data.iter().map(|d| d.len()).sum(),
        restarts,
        n_bootstrap: problem.n_bootstrap,
        correlation,
        provenance: Provenance {
            seed: problem.seed,
            version: env!("CARGO_PKG_VERSION").into(),
            ..Provenance::default()
        },
    })
}

fn correlation_matrix(rows: &[Vec<f64>], dim: usize) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..dim).map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n).collect();
    let cov = |a: usize, b: usize| rows.iter().map(|r| (r[a] - mean[a]) * (r[b] - mean[b])).sum::<f64>() / n;
    (0..dim)
        .map(|a| {
            (0..dim)
                .map(|b| {
                    let d = (cov(a, a) * cov(b, b)).sqrt();
                    if d > 0.0 {
                        cov(a, b) / d
                    } else if a == b {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Best objective with `param` pinned at each grid value, refitting the
/// other free parameters.
pub fn profile(problem: &FitProblem, param: FitParam, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    let mut base = problem.clone();
    base.n_bootstrap = 0;
    if !base.free.contains(&param) {
        base.free.push(param);
    }
    base.validate()?;
    let ev = Evaluator::new(&base)?;
    let data = ev.data();
    let others: Vec<FitParam> = base.free.iter().copied().filter(|p| *p != param).collect();
    grid.iter()
        .map(|&x| {
            let mut fixed = base.start_values();
            fixed.set(param, x);
            if others.is_empty() {
                return Ok((x, ev.objective_with(&fixed, &data)?));
            }
            let space = Space {
                bounds: others.iter().map(|p| base.bounds_of(*p)).collect(),
                free: others.clone(),
                base: fixed,
            };
            let starts = latin_hypercube(RESTARTS, others.len(), base.seed);
            let r = minimise(&ev, &space, &data, &starts)?;
            Ok((x, best(&r).objective))
        })
        .collect()
}

/// Model curve with additive Gaussian noise of standard deviation `noise`.
pub fn synthetic_curve(
    config: &BathConfig,
    kind: SequenceKind,
    times: &[f64],
    pulse_fidelity: f64,
    noise: f64,
    seed: u64,
    grid: GridSpec,
    n_samples: usize,
) -> Result<VisibilityCurve> {
    let model = CoherenceModel::from_config(config, grid, n_samples, pulse_fidelity)?;
    synthetic_from_model(&model, kind, times, noise, seed)
}

pub fn synthetic_from_model(
    model: &CoherenceModel,
    kind: SequenceKind,
    times: &[f64],
    noise: f64,
    seed: u64,
) -> Result<VisibilityCurve> {
    let clean = model.curve(kind, times)?;
    let mut rng = substream(seed, Domain::Synthetic, 0);
    let visibility = clean
        .visibility
        .iter()
        .map(|v| v + noise * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok(VisibilityCurve {
        times: times.to_vec(),
        visibility,
        stderr: Some(vec![noise; times.len()]),
        chi_linear: None,
        chi_quad: None,
        meta: CurveMeta {
            engine: "synthetic".into(),
            seed: Some(seed),
            ..clean.meta
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nelder_mead_finds_quadratic_minimum() {
        let f = |x: &[f64]| Ok((x[0] - 0.3).powi(2) + 4.0 * (x[1] - 0.7).powi(2) + 1.0);
        let m = nelder_mead(f, &[0.9, 0.1], 0.1).unwrap();
        assert!(m.converged);
        assert!((m.x[0] - 0.3).abs() < 1e-4 && (m.x[1] - 0.7).abs() < 1e-4);
        assert!(m.evaluations <= MAX_EVALS);
    }

    #[test]
    fn nelder_mead_respects_bounds() {
        let f = |x: &[f64]| Ok((x[0] + 1.0).powi(2));
        let m = nelder_mead(f, &[0.5], 0.1).unwrap();
        assert!(m.x[0] >= 0.0 && m.x[0] < 1e-4);
    }

    #[test]
    fn latin_hypercube_strata() {
        let pts = latin_hypercube(5, 3, 9);
        for d in 0..3 {
            let mut s: Vec<usize> = pts.iter().map(|p| (p[d] * 5.0).floor() as usize).collect();
            s.sort();
            assert_eq!(s, vec![0, 1, 2, 3, 4]);
        }
        assert_eq!(pts, latin_hypercube(5, 3, 9));
    }

    #[test]
    fn param_names_round_trip() {
        for p in FitParam::ALL {
            assert_eq!(p.to_string().parse::<FitParam>().unwrap(), p);
        }
        assert!("sigma".parse::<FitParam>().is_err());
    }

    #[test]
    fn percentiles() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(percentile(&xs, 0.5), 3.0);
        assert_eq!(percentile(&xs, 0.0), 1.0);
        assert_eq!(percentile(&xs, 1.0), 5.0);
        assert!((percentile(&xs, 0.125) - 1.5).abs() < 1e-12);
    }
}
