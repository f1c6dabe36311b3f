//! Nuclear species, quadrupolar + Zeeman Hamiltonians, and seeded bath sampling.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::{substream, Domain};
use crate::spin::{CMatrix, Spin, SpinOperators};

/// The isotope table shipped with the crate.
pub const DEFAULT_ISOTOPE_TABLE: &str = include_str!("../data/isotopes.tsv");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Isotope {
    Ga69,
    Ga71,
    As75,
    In115,
}

impl Isotope {
    pub const ALL: [Isotope; 4] = [Isotope::Ga69, Isotope::Ga71, Isotope::As75, Isotope::In115];

    pub fn element(self) -> Element {
        match self {
            Isotope::Ga69 | Isotope::Ga71 => Element::Ga,
            Isotope::As75 => Element::As,
            Isotope::In115 => Element::In,
        }
    }
}

impl fmt::Display for Isotope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Isotope::Ga69 => "Ga69",
            Isotope::Ga71 => "Ga71",
            Isotope::As75 => "As75",
            Isotope::In115 => "In115",
        };
        f.write_str(s)
    }
}

impl FromStr for Isotope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Ga69" => Ok(Isotope::Ga69),
            "Ga71" => Ok(Isotope::Ga71),
            "As75" => Ok(Isotope::As75),
            "In115" => Ok(Isotope::In115),
            other => Err(Error::invalid(format!("unknown isotope `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Element {
    Ga,
    As,
    In,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuclearSpecies {
    pub name: Isotope,
    pub spin: Spin,
    /// MHz/T, linear frequency.
    pub gamma_n: f64,
    pub natural_abundance: f64,
    /// Fraction of all bath nuclei.
    pub abundance_fraction: f64,
    /// Relative per-nucleus contact coupling.
    pub hyperfine_weight: f64,
}

impl NuclearSpecies {
    pub fn larmor(&self, b_ext: f64) -> f64 {
        self.gamma_n * b_ext
    }
}

/// Row of the isotope data file.
#[derive(Clone, Debug, PartialEq)]
pub struct IsotopeRecord {
    pub name: Isotope,
    pub spin: Spin,
    pub gamma_n: f64,
    pub natural_abundance: f64,
    pub hyperfine_weight: f64,
}

/// Parses the whitespace-separated isotope table. `#` starts a comment.
pub fn parse_isotope_table(text: &str) -> Result<Vec<IsotopeRecord>> {
    let mut out: Vec<IsotopeRecord> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        let bad = |what: &str| Error::Config(format!("isotope table line {}: {what}", lineno + 1));
        if cols.len() != 5 {
            return Err(bad(&format!("expected 5 columns, found {}", cols.len())));
        }
        let num = |k: usize| -> Result<f64> {
            cols[k]
                .parse::<f64>()
                .map_err(|_| bad(&format!("column {} is not a number: `{}`", k + 1, cols[k])))
        };
        let name: Isotope = cols[0].parse().map_err(|_| bad(&format!("unknown isotope `{}`", cols[0])))?;
        let spin = Spin::new(num(1)?).map_err(|e| bad(&e.to_string()))?;
        let rec = IsotopeRecord {
            name,
            spin,
            gamma_n: num(2)?,
            natural_abundance: num(3)?,
            hyperfine_weight: num(4)?,
        };
        if !(rec.gamma_n > 0.0) {
            return Err(bad("gamma_n must be positive"));
        }
        if !(0.0..=1.0).contains(&rec.natural_abundance) {
            return Err(bad("natural abundance must lie in [0, 1]"));
        }
        if !(rec.hyperfine_weight >= 0.0) {
            return Err(bad("hyperfine weight must be non-negative"));
        }
        if out.iter().any(|r| r.name == rec.name) {
            return Err(bad(&format!("duplicate isotope {}", rec.name)));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Species table for In(x)Ga(1-x)As. Cation sites are shared between In and
/// Ga, anion sites are As. Within an element, abundances are renormalised
/// over the isotopes present in the table (In113 is folded into In115).
pub fn ingaas_species(records: &[IsotopeRecord], indium_fraction: f64) -> Result<Vec<NuclearSpecies>> {
    if !(0.0..=1.0).contains(&indium_fraction) {
        return Err(Error::invalid(format!(
            "indium fraction {indium_fraction} outside [0, 1]"
        )));
    }
    let site_share = |e: Element| match e {
        Element::In => 0.5 * indium_fraction,
        Element::Ga => 0.5 * (1.0 - indium_fraction),
        Element::As => 0.5,
    };
    let element_total = |e: Element| -> f64 {
        records
            .iter()
            .filter(|r| r.name.element() == e)
            .map(|r| r.natural_abundance)
            .sum()
    };
    let mut species = Vec::with_capacity(records.len());
    for r in records {
        let e = r.name.element();
        let total = element_total(e);
        let frac = if total > 0.0 {
            site_share(e) * r.natural_abundance / total
        } else {
            0.0
        };
        species.push(NuclearSpecies {
            name: r.name,
            spin: r.spin,
            gamma_n: r.gamma_n,
            natural_abundance: r.natural_abundance,
            abundance_fraction: frac,
            hyperfine_weight: r.hyperfine_weight,
        });
    }
    let sum: f64 = species.iter().map(|s| s.abundance_fraction).sum();
    if sum <= 0.0 {
        return Err(Error::Config("isotope table leaves no bath nuclei".into()));
    }
    // elements missing from the table would leave the sum below one
    for s in &mut species {
        s.abundance_fraction /= sum;
    }
    Ok(species)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrupoleParams {
    /// MHz
    pub nu_q: f64,
    pub eta: f64,
    /// Polar angle of the EFG principal axis from the field (lab z) axis, rad.
    pub theta: f64,
    /// Azimuth of the EFG principal axis, rad.
    pub phi: f64,
}

impl QuadrupoleParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu_q >= 0.0) || !self.nu_q.is_finite() {
            return Err(Error::invalid(format!("nu_q = {} must be >= 0", self.nu_q)));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::invalid(format!("eta = {} outside [0, 1)", self.eta)));
        }
        Ok(())
    }
}

/// Per-species parameters of the quadrupolar inhomogeneity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BathSpecies {
    pub species: NuclearSpecies,
    /// MHz
    pub nu_q_mean: f64,
    /// MHz
    pub nu_q_sigma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BathConfig {
    /// External field, T. Defines the laboratory z axis.
    pub b_ext: f64,
    /// Total-vector Overhauser standard deviation, mT.
    pub sigma_oh: f64,
    pub species: Vec<BathSpecies>,
    /// Common multiplier on every nu_q_mean and nu_q_sigma.
    pub nu_q_scale: f64,
    /// Std of the EFG-axis polar tilt about the growth axis, rad.
    pub tilt_sigma: f64,
    pub eta: f64,
    pub n_nuclei: usize,
    /// GHz/T (numerically MHz/mT).
    pub electron_gyromagnetic: f64,
    pub seed: u64,
}

/// Defaults shared by the config loader and the library constructors.
pub mod defaults {
    pub const SIGMA_OH_MT: f64 = 33.0;
    pub const INDIUM_FRACTION: f64 = 0.5;
    /// nu_q_mean = gamma_n x this field.
    pub const QUAD_FIELD_EQUIV_T: f64 = 0.8;
    pub const NU_Q_REL_SIGMA: f64 = 0.5;
    pub const TILT_SIGMA_DEG: f64 = 15.0;
    pub const ETA: f64 = 0.8;
    pub const N_NUCLEI: usize = 50_000;
    pub const ELECTRON_GYROMAGNETIC: f64 = 6.3;
    pub const SEED: u64 = 1;
}

impl BathConfig {
    /// In0.5Ga0.5As defaults from the shipped isotope table.
    pub fn default_at(b_ext: f64) -> Self {
        let records = parse_isotope_table(DEFAULT_ISOTOPE_TABLE).expect("shipped table parses");
        let species = ingaas_species(&records, defaults::INDIUM_FRACTION).expect("valid composition");
        BathConfig::from_species(b_ext, species)
    }

    pub fn from_species(b_ext: f64, species: Vec<NuclearSpecies>) -> Self {
        let species = species
            .into_iter()
            .map(|s| {
                let mean = s.gamma_n * defaults::QUAD_FIELD_EQUIV_T;
                BathSpecies {
                    nu_q_mean: mean,
                    nu_q_sigma: defaults::NU_Q_REL_SIGMA * mean,
                    species: s,
                }
            })
            .collect();
        BathConfig {
            b_ext,
            sigma_oh: defaults::SIGMA_OH_MT,
            species,
            nu_q_scale: 1.0,
            tilt_sigma: defaults::TILT_SIGMA_DEG.to_radians(),
            eta: defaults::ETA,
            n_nuclei: defaults::N_NUCLEI,
            electron_gyromagnetic: defaults::ELECTRON_GYROMAGNETIC,
            seed: defaults::SEED,
        }
    }

    pub fn with_field(&self, b_ext: f64) -> Self {
        BathConfig { b_ext, ..self.clone() }
    }

    /// Keeps only one species (abundance renormalised to 1).
    pub fn single_species(&self, name: Isotope) -> Result<Self> {
        let mut s: Vec<BathSpecies> = self
            .species
            .iter()
            .filter(|b| b.species.name == name)
            .cloned()
            .collect();
        if s.is_empty() {
            return Err(Error::invalid(format!("species {name} not in config")));
        }
        s[0].species.abundance_fraction = 1.0;
        Ok(BathConfig {
            species: s,
            ..self.clone()
        })
    }

    pub fn species_index(&self, name: Isotope) -> Option<usize> {
        self.species.iter().position(|b| b.species.name == name)
    }

    /// Per-component Overhauser standard deviation, mT (isotropic split).
    pub fn sigma_component(&self) -> f64 {
        self.sigma_oh / 3f64.sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.b_ext > 0.0) || !self.b_ext.is_finite() {
            return bad(format!("b_ext = {} T must be > 0", self.b_ext));
        }
        if !(self.sigma_oh > 0.0) || !self.sigma_oh.is_finite() {
            return bad(format!("sigma_oh = {} mT must be > 0", self.sigma_oh));
        }
        if self.n_nuclei < 100 {
            return bad(format!("n_nuclei = {} must be >= 100", self.n_nuclei));
        }
        if self.species.is_empty() {
            return bad("no species configured".into());
        }
        let sum: f64 = self.species.iter().map(|b| b.species.abundance_fraction).sum();
        if (sum - 1.0).abs() > 1e-9 {
            return bad(format!("abundance fractions sum to {sum}, expected 1"));
        }
        for b in &self.species {
            let s = &b.species;
            if s.spin.twice() != 3 && s.spin.twice() != 9 {
                return bad(format!("{}: spin {} not in {{3/2, 9/2}}", s.name, s.spin));
            }
            if !(s.gamma_n > 0.0) {
                return bad(format!("{}: gamma_n must be > 0", s.name));
            }
            if !(b.nu_q_mean >= 0.0) || !(b.nu_q_sigma >= 0.0) {
                return bad(format!("{}: nu_q mean/sigma must be >= 0", s.name));
            }
        }
        if !(self.nu_q_scale > 0.0) || !self.nu_q_scale.is_finite() {
            return bad(format!("nu_q_scale = {} must be > 0", self.nu_q_scale));
        }
        if !(self.tilt_sigma >= 0.0) || !self.tilt_sigma.is_finite() {
            return bad(format!("tilt_sigma = {} must be >= 0", self.tilt_sigma));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return bad(format!("eta = {} outside [0, 1)", self.eta));
        }
        if !(self.electron_gyromagnetic > 0.0) {
            return bad("electron gyromagnetic ratio must be > 0".into());
        }
        Ok(())
    }

    /// Scalar g such that a_k = g * hyperfine_weight gives the target
    /// per-component variance in expectation over the composition, for a
    /// bath of `n` nuclei.
    pub(crate) fn expected_weight_norm(&self) -> f64 {
        self.species
            .iter()
            .map(|b| {
                let s = &b.species;
                s.abundance_fraction * s.hyperfine_weight.powi(2) * s.spin.casimir() / 3.0
            })
            .sum()
    }

    /// Summed squared coupling of one species per unit abundance, i.e. the
    /// weight W_s with  sum_s W_s I_s(I_s+1)/3 = sigma_component^2.
    pub fn species_power(&self, index: usize) -> f64 {
        let norm = self.expected_weight_norm();
        let s = &self.species[index].species;
        self.sigma_component().powi(2) * s.abundance_fraction * s.hyperfine_weight.powi(2) / norm
    }

    /// Draws one realisation of the quadrupole parameters of species `index`.
    pub(crate) fn draw_quadrupole<R: Rng>(&self, index: usize, rng: &mut R) -> QuadrupoleParams {
        let u: [f64; 3] = [rng.random(), rng.random(), rng.random()];
        self.quadrupole_at(index, u)
    }

    /// Maps a point of the unit cube to quadrupole parameters: nu_q through
    /// the inverse CDF of the zero-truncated Gaussian, the polar tilt through
    /// the Gaussian inverse CDF, phi uniformly.
    pub(crate) fn quadrupole_at(&self, index: usize, u: [f64; 3]) -> QuadrupoleParams {
        let b = &self.species[index];
        let nu_q = self.nu_q_scale * truncated_normal_quantile(b.nu_q_mean, b.nu_q_sigma, u[0]);
        let theta = FRAC_PI_2 + self.tilt_sigma * standard_normal_quantile(u[1]);
        QuadrupoleParams {
            nu_q,
            eta: self.eta,
            theta,
            phi: u[2] * 2.0 * PI,
        }
    }
}

fn standard_normal_quantile(u: f64) -> f64 {
    // keep away from the endpoints where the quantile diverges
    let u = u.clamp(1e-300, 1.0 - f64::EPSILON / 2.0);
    Normal::standard().inverse_cdf(u)
}

/// Quantile of N(mean, sigma) conditioned on x >= 0.
fn truncated_normal_quantile(mean: f64, sigma: f64, u: f64) -> f64 {
    if sigma == 0.0 {
        return mean.max(0.0);
    }
    let n = Normal::standard();
    let p0 = n.cdf(-mean / sigma);
    let x = mean + sigma * standard_normal_quantile(p0 + u * (1.0 - p0));
    x.max(0.0)
}

/// H = -gamma_n b_ext iz + (nu_q/6) [3 iz'^2 - I(I+1) + eta (ix'^2 - iy'^2)], MHz.
pub fn nuclear_hamiltonian(species: &NuclearSpecies, b_ext: f64, qp: &QuadrupoleParams) -> CMatrix {
    let ops = SpinOperators::new(species.spin);
    hamiltonian_with_ops(&ops, species.gamma_n, b_ext, qp)
}

pub(crate) fn hamiltonian_with_ops(
    ops: &SpinOperators,
    gamma_n: f64,
    b_ext: f64,
    qp: &QuadrupoleParams,
) -> CMatrix {
    let zeeman = ops.iz.map(|z| z * (-gamma_n * b_ext));
    if qp.nu_q == 0.0 {
        return zeeman;
    }
    let frame = ops.principal_frame(qp.theta, qp.phi);
    let casimir = ops.spin.casimir();
    let quad = (&frame.iz * &frame.iz).map(|z| z * 3.0) - ops.identity().map(|z| z * casimir)
        + (&frame.ix * &frame.ix - &frame.iy * &frame.iy).map(|z| z * qp.eta);
    let h = zeeman + quad.map(|z| z * (qp.nu_q / 6.0));
    // remove rounding-level anti-Hermitian parts
    (&h + h.adjoint()).map(|z| z * 0.5)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NucleusRealization {
    /// Index into `BathSample::species`.
    pub species: usize,
    pub quad: QuadrupoleParams,
    /// mT per unit spin projection.
    pub coupling: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BathSample {
    pub species: Vec<NuclearSpecies>,
    pub nuclei: Vec<NucleusRealization>,
    pub seed: u64,
}

impl BathSample {
    /// sum_k a_k^2 I_k(I_k+1)/3, the static variance of one field component.
    pub fn component_variance(&self) -> f64 {
        self.nuclei
            .iter()
            .map(|n| n.coupling.powi(2) * self.species[n.species].spin.casimir() / 3.0)
            .sum()
    }

    /// First `m` nuclei with couplings renormalised to `sigma_oh`. Nuclei
    /// are i.i.d., so a prefix is an unbiased subsample.
    pub fn subsample(&self, m: usize, sigma_oh: f64) -> Result<BathSample> {
        let take = m.min(self.nuclei.len());
        let sub = BathSample {
            species: self.species.clone(),
            nuclei: self.nuclei[..take].to_vec(),
            seed: self.seed,
        };
        normalize_couplings(sub, sigma_oh)
    }
}

pub fn sample_bath(config: &BathConfig) -> Result<BathSample> {
    config.validate()?;
    let cumulative: Vec<f64> = config
        .species
        .iter()
        .scan(0.0, |acc, b| {
            *acc += b.species.abundance_fraction;
            Some(*acc)
        })
        .collect();
    let nuclei: Vec<NucleusRealization> = (0..config.n_nuclei as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = substream(config.seed, Domain::Bath, k);
            let u: f64 = rng.random();
            let species = cumulative
                .iter()
                .position(|&c| u < c)
                .unwrap_or(config.species.len() - 1);
            let quad = config.draw_quadrupole(species, &mut rng);
            NucleusRealization {
                species,
                quad,
                coupling: config.species[species].species.hyperfine_weight,
            }
        })
        .collect();
    let sample = BathSample {
        species: config.species.iter().map(|b| b.species.clone()).collect(),
        nuclei,
        seed: config.seed,
    };
    normalize_couplings(sample, config.sigma_oh)
}

/// Sets a_k = g * hyperfine_weight(species_k) with g fixed by
/// sum_k a_k^2 I_k(I_k+1)/3 = (sigma_oh / sqrt 3)^2.
pub fn normalize_couplings(mut sample: BathSample, sigma_oh: f64) -> Result<BathSample> {
    if sample.nuclei.is_empty() {
        return Err(Error::invalid("cannot normalise an empty bath"));
    }
    if !(sigma_oh > 0.0) {
        return Err(Error::invalid(format!("sigma_oh = {sigma_oh} must be > 0")));
    }
    let raw: f64 = sample
        .nuclei
        .iter()
        .map(|n| {
            let s = &sample.species[n.species];
            s.hyperfine_weight.powi(2) * s.spin.casimir() / 3.0
        })
        .sum();
    if !(raw > 0.0) {
        return Err(Error::invalid("all hyperfine weights are zero"));
    }
    let target = sigma_oh.powi(2) / 3.0;
    let g = (target / raw).sqrt();
    for n in &mut sample.nuclei {
        n.coupling = g * sample.species[n.species].hyperfine_weight;
    }
    Ok(sample)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin::{eigendecompose, max_abs, rotate_operator};

    fn species(name: Isotope) -> NuclearSpecies {
        let cfg = BathConfig::default_at(4.0);
        cfg.species[cfg.species_index(name).unwrap()].species.clone()
    }

    #[test]
    fn shipped_table_and_composition() {
        let cfg = BathConfig::default_at(4.0);
        cfg.validate().unwrap();
        let frac = |n| cfg.species[cfg.species_index(n).unwrap()].species.abundance_fraction;
        assert!((frac(Isotope::In115) - 0.25).abs() < 1e-12);
        assert!((frac(Isotope::Ga69) - 0.5 * 0.5 * 0.601).abs() < 1e-12);
        assert!((frac(Isotope::Ga71) - 0.5 * 0.5 * 0.399).abs() < 1e-12);
        assert!((frac(Isotope::As75) - 0.5).abs() < 1e-12);
        let sum: f64 = cfg.species.iter().map(|b| b.species.abundance_fraction).sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert_eq!(species(Isotope::In115).spin.twice(), 9);
        assert!((species(Isotope::As75).gamma_n - 7.3150).abs() < 1e-12);
    }

    #[test]
    fn table_parse_errors() {
        assert!(parse_isotope_table("Ga69 1.5 10.0 0.6").is_err());
        assert!(parse_isotope_table("Xx1 1.5 10.0 0.6 1").is_err());
        assert!(parse_isotope_table("Ga69 0.7 10.0 0.6 1").is_err());
        assert!(parse_isotope_table("Ga69 1.5 -1 0.6 1").is_err());
        assert!(parse_isotope_table("Ga69 1.5 1 0.6 1\nGa69 1.5 1 0.6 1").is_err());
    }

    #[test]
    fn pure_zeeman_ladder() {
        let s = species(Isotope::In115);
        let qp = QuadrupoleParams { nu_q: 0.0, eta: 0.0, theta: 0.3, phi: 0.1 };
        let es = eigendecompose(&nuclear_hamiltonian(&s, 3.0, &qp)).unwrap();
        for w in es.eigenvalues.windows(2) {
            assert!((w[1] - w[0] - s.gamma_n * 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_field_quadrupole_doublets() {
        // closed form: (nu_q/6)(3m^2 - 15/4) -> +nu_q/2 for |m|=3/2, -nu_q/2 for |m|=1/2
        let s = species(Isotope::Ga69);
        let qp = QuadrupoleParams { nu_q: 4.0, eta: 0.0, theta: 0.7, phi: 1.1 };
        let es = eigendecompose(&nuclear_hamiltonian(&s, 0.0, &qp)).unwrap();
        let expected = [-2.0, -2.0, 2.0, 2.0];
        for (e, x) in es.eigenvalues.iter().zip(expected) {
            assert!((e - x).abs() < 1e-9, "{:?}", es.eigenvalues);
        }
    }

    #[test]
    fn first_order_perturbation_theory() {
        // oracle: <m|H_Q|m> from the closed-form first-order expression
        // (nu_q/12)(3cos^2 b - 1 + eta sin^2 b cos 2a)(3m^2 - I(I+1)), with
        // (b, a) the field direction in the EFG frame; here b = theta, a = pi
        let s = species(Isotope::As75);
        let b = 3.0;
        let nu_q = 0.01 * s.gamma_n * b;
        for (theta, phi, eta) in [(FRAC_PI_2, 0.0, 0.0), (FRAC_PI_2, 0.4, 0.5), (1.0, 2.0, 0.3)] {
            let qp = QuadrupoleParams { nu_q, eta, theta, phi };
            let es = eigendecompose(&nuclear_hamiltonian(&s, b, &qp)).unwrap();
            let geom = 3.0 * theta.cos().powi(2) - 1.0 + eta * theta.sin().powi(2);
            for (k, m) in [-1.5f64, -0.5, 0.5, 1.5].iter().enumerate() {
                // ascending energies: -gamma b m is smallest for m = +3/2
                let m = -m;
                let zeeman = -s.gamma_n * b * m;
                let shift_pt = nu_q / 12.0 * geom * (3.0 * m * m - s.spin.casimir());
                let shift = es.eigenvalues[k] - zeeman;
                // at general angles second order is O(nu_q^2 / larmor) = 0.01 nu_q
                if theta != FRAC_PI_2 || eta != 0.0 {
                    assert!((shift - shift_pt).abs() < 0.02 * nu_q);
                } else if shift_pt.abs() > 1e-3 * nu_q {
                    assert!(((shift - shift_pt) / shift_pt).abs() < 0.01, "m={m}: {shift} vs {shift_pt}");
                } else {
                    assert!((shift - shift_pt).abs() < 0.01 * nu_q);
                }
            }
        }
    }

    #[test]
    fn principal_frame_matches_rotations() {
        let ops = SpinOperators::new(Spin::new(4.5).unwrap());
        let (theta, phi) = (1.2, 2.3);
        let frame = ops.principal_frame(theta, phi);
        // the second rotation acts about the already-rotated axes (intrinsic)
        let r = rotate_operator(&ops, [0.0, 0.0, 1.0], phi).unwrap();
        let r = rotate_operator(&r, [0.0, 1.0, 0.0], theta).unwrap();
        assert!(max_abs(&(frame.ix - r.ix)) < 1e-10);
        assert!(max_abs(&(frame.iy - r.iy)) < 1e-10);
        assert!(max_abs(&(frame.iz - r.iz)) < 1e-10);
    }

    #[test]
    fn hamiltonian_trace_and_phi_invariance() {
        let s = species(Isotope::In115);
        for b in [0.0, 2.0, 5.0] {
            let base = QuadrupoleParams { nu_q: 7.0, eta: 0.0, theta: 1.3, phi: 0.0 };
            let h = nuclear_hamiltonian(&s, b, &base);
            assert!(h.trace().norm() < 1e-9);
            let e0 = eigendecompose(&h).unwrap().eigenvalues;
            for phi in [0.5, 2.0, 4.0] {
                let qp = QuadrupoleParams { phi, ..base };
                let e = eigendecompose(&nuclear_hamiltonian(&s, b, &qp)).unwrap().eigenvalues;
                for (a, c) in e0.iter().zip(&e) {
                    assert!((a - c).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let mut cfg = BathConfig::default_at(4.0);
        cfg.n_nuclei = 2000;
        let a = sample_bath(&cfg).unwrap();
        let b = sample_bath(&cfg).unwrap();
        assert_eq!(a, b);
        cfg.seed += 1;
        let c = sample_bath(&cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sampled_species_fraction_binomial() {
        let mut cfg = BathConfig::default_at(4.0);
        cfg.n_nuclei = 100_000;
        let sample = sample_bath(&cfg).unwrap();
        let idx = cfg.species_index(Isotope::In115).unwrap();
        let count = sample.nuclei.iter().filter(|n| n.species == idx).count() as f64;
        let n = cfg.n_nuclei as f64;
        let p = 0.25;
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((count - n * p).abs() < 3.0 * sigma, "count {count}");
    }

    #[test]
    fn sampled_nu_q_statistics() {
        let mut cfg = BathConfig::default_at(4.0);
        cfg.n_nuclei = 40_000;
        let idx = cfg.species_index(Isotope::In115).unwrap();
        cfg.species[idx].nu_q_mean = 9.4;
        cfg.species[idx].nu_q_sigma = 4.7;
        let sample = sample_bath(&cfg).unwrap();
        let v: Vec<f64> = sample
            .nuclei
            .iter()
            .filter(|n| n.species == idx)
            .map(|n| n.quad.nu_q)
            .collect();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        // oracle: moments of N(9.4, 4.7) truncated at 0 (alpha = -2)
        let alpha: f64 = -9.4 / 4.7;
        let pdf = (-0.5 * alpha * alpha).exp() / (2.0 * PI).sqrt();
        let z = 1.0 - 0.022_750_131_948_179_2; // 1 - Phi(-2)
        let lambda = pdf / z;
        let t_mean = 9.4 + 4.7 * lambda;
        let t_var = 4.7f64.powi(2) * (1.0 + alpha * lambda - lambda * lambda);
        let se_mean = (t_var / n).sqrt();
        assert!((mean - t_mean).abs() < 3.0 * se_mean, "mean {mean} vs {t_mean}");
        // standard error of the sample variance, using the 4th moment bound 3 sigma^4
        let se_var = (2.0 * t_var * t_var / (n - 1.0)).sqrt() * 1.2;
        assert!((var - t_var).abs() < 3.0 * se_var, "var {var} vs {t_var}");
        assert!(v.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn coupling_normalisation() {
        let mut cfg = BathConfig::default_at(4.0);
        cfg.n_nuclei = 5000;
        let s = sample_bath(&cfg).unwrap();
        let sc = 33.0 / 3f64.sqrt();
        assert!((s.component_variance() - 19.05f64.powi(2)).abs() / 19.05f64.powi(2) < 0.005);
        assert!((s.component_variance() - sc * sc).abs() < 1e-9);

        // single species with equal weights: closed form
        let single = cfg.single_species(Isotope::As75).unwrap();
        let s1 = sample_bath(&single).unwrap();
        let n = s1.nuclei.len() as f64;
        let expected = sc / (n * 1.5 * 2.5 / 3.0).sqrt();
        assert!(s1.nuclei.iter().all(|k| (k.coupling - expected).abs() < 1e-12));

        // doubling the bath scales couplings by 1/sqrt2
        let mut big = single.clone();
        big.n_nuclei = 2 * single.n_nuclei;
        let s2 = sample_bath(&big).unwrap();
        assert!((s2.nuclei[0].coupling * 2f64.sqrt() - s1.nuclei[0].coupling).abs() < 1e-12);
        assert!((s2.component_variance() - s1.component_variance()).abs() < 1e-9);
    }

    #[test]
    fn normalisation_errors() {
        let mut cfg = BathConfig::default_at(4.0);
        cfg.n_nuclei = 200;
        let mut s = sample_bath(&cfg).unwrap();
        for sp in &mut s.species {
            sp.hyperfine_weight = 0.0;
        }
        assert!(normalize_couplings(s.clone(), 33.0).is_err());
        s.nuclei.clear();
        assert!(normalize_couplings(s, 33.0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = BathConfig::default_at(4.0);
        cfg.n_nuclei = 10;
        assert!(cfg.validate().is_err());
        let mut cfg = BathConfig::default_at(4.0);
        cfg.b_ext = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = BathConfig::default_at(4.0);
        cfg.eta = 1.0;
        assert!(cfg.validate().is_err());
    }
}
