//! File-backed run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bath::{defaults, ingaas_species, parse_isotope_table, BathConfig, BathSpecies, Isotope, DEFAULT_ISOTOPE_TABLE};
use crate::coherence::{Channels, DEFAULT_PULSE_FIDELITY};
use crate::error::{Error, Result};
use crate::fit::{FitParam, DEFAULT_BOOTSTRAP};
use crate::montecarlo::{TrajectoryConfig, DEFAULT_REALIZATIONS, DEFAULT_SUBSAMPLE};
use crate::sequence::SequenceKind;
use crate::spectra::{GridSpec, DEFAULT_SAMPLES};

/// The configuration shipped with the crate; equal to the built-in defaults.
pub const DEFAULT_CONFIG: &str = include_str!("../configs/default.toml");

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BathSection {
    /// T
    pub b_ext: f64,
    /// mT, total vector
    pub sigma_oh: f64,
    pub indium_fraction: f64,
    /// Isotope table path, relative to the config file. Empty uses the
    /// shipped table.
    pub isotope_table: String,
    /// nu_q_mean = gamma_n x this field (T) unless overridden per species.
    pub quad_field_equiv: f64,
    /// nu_q_sigma / nu_q_mean unless overridden per species.
    pub nu_q_rel_sigma: f64,
    pub nu_q_scale: f64,
    /// rad
    pub tilt_sigma: f64,
    pub eta: f64,
    pub n_nuclei: usize,
    /// GHz/T
    pub electron_gyromagnetic: f64,
    pub seed: u64,
    pub species: BTreeMap<String, SpeciesOverride>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesOverride {
    /// MHz
    pub nu_q_mean: Option<f64>,
    /// MHz
    pub nu_q_sigma: Option<f64>,
    pub hyperfine_weight: Option<f64>,
}

impl Default for BathSection {
    fn default() -> Self {
        BathSection {
            b_ext: 4.0,
            sigma_oh: defaults::SIGMA_OH_MT,
            indium_fraction: defaults::INDIUM_FRACTION,
            isotope_table: String::new(),
            quad_field_equiv: defaults::QUAD_FIELD_EQUIV_T,
            nu_q_rel_sigma: defaults::NU_Q_REL_SIGMA,
            nu_q_scale: 1.0,
            tilt_sigma: defaults::TILT_SIGMA_DEG.to_radians(),
            eta: defaults::ETA,
            n_nuclei: defaults::N_NUCLEI,
            electron_gyromagnetic: defaults::ELECTRON_GYROMAGNETIC,
            seed: defaults::SEED,
            species: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    /// MHz
    pub nu_max: f64,
    /// MHz
    pub dnu: f64,
    pub n_samples: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridSpec::default();
        GridSection {
            nu_max: g.nu_max,
            dnu: g.dnu,
            n_samples: DEFAULT_SAMPLES,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SequenceSection {
    /// ramsey, hahn or cpmg:N
    pub kind: String,
    pub pulse_fidelity: f64,
    /// start:stop:count with an ns or us suffix
    pub tgrid: String,
    pub linear: bool,
    pub quadratic: bool,
}

impl Default for SequenceSection {
    fn default() -> Self {
        SequenceSection {
            kind: "hahn".into(),
            pulse_fidelity: DEFAULT_PULSE_FIDELITY,
            tgrid: "10:1300:50ns".into(),
            linear: true,
            quadratic: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub n_realizations: usize,
    /// ns; 0 picks 1/(10 nu_max_active)
    pub time_step: f64,
    pub subsample: usize,
    pub seed: u64,
    /// Scales all couplings in the simulated bath; 0 gives the decoupled
    /// control.
    pub coupling_scale: f64,
}

impl Default for McSection {
    fn default() -> Self {
        McSection {
            n_realizations: DEFAULT_REALIZATIONS,
            time_step: 0.0,
            subsample: DEFAULT_SUBSAMPLE,
            seed: defaults::SEED,
            coupling_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub free: Vec<String>,
    pub n_bootstrap: usize,
    pub v0: f64,
    pub seed: u64,
    /// param -> [lower, upper]
    pub bounds: BTreeMap<String, [f64; 2]>,
}

impl Default for FitSection {
    fn default() -> Self {
        FitSection {
            free: vec!["sigma_oh".into(), "v0".into()],
            n_bootstrap: DEFAULT_BOOTSTRAP,
            v0: 1.0,
            seed: defaults::SEED,
            bounds: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub bath: BathSection,
    pub grid: GridSection,
    pub sequence: SequenceSection,
    pub mc: McSection,
    pub fit: FitSection,
    /// Directory that relative paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    /// Validates every section; run again after command-line overrides.
    pub fn check(&self) -> Result<()> {
        self.bath_config()?;
        self.grid_spec()?;
        self.sequence_kind()?;
        self.time_grid()?;
        self.trajectory_config()?;
        self.fit_free()?;
        self.fit_bounds()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        // the isotope table is resolved now that the base directory is known
        cfg.bath_config()?;
        Ok(cfg)
    }

    pub fn bath_config(&self) -> Result<BathConfig> {
        let b = &self.bath;
        let table = if b.isotope_table.is_empty() {
            DEFAULT_ISOTOPE_TABLE.to_string()
        } else {
            let p = match &self.base_dir {
                Some(d) => d.join(&b.isotope_table),
                None => PathBuf::from(&b.isotope_table),
            };
            std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?
        };
        let records = parse_isotope_table(&table)?;
        let species = ingaas_species(&records, b.indium_fraction).map_err(cfg_err("bath.indium_fraction"))?;
        for key in b.species.keys() {
            let iso: Isotope = key
                .parse()
                .map_err(|_| Error::Config(format!("bath.species: unknown isotope `{key}`")))?;
            if !species.iter().any(|s| s.name == iso) {
                return Err(Error::Config(format!("bath.species.{key}: not in the isotope table")));
            }
        }
        if !(b.quad_field_equiv >= 0.0 && b.nu_q_rel_sigma >= 0.0) {
            return Err(Error::Config("bath.quad_field_equiv and bath.nu_q_rel_sigma must be >= 0".into()));
        }
        let species = species
            .into_iter()
            .map(|mut s| {
                let o = b.species.get(&s.name.to_string()).cloned().unwrap_or_default();
                if let Some(w) = o.hyperfine_weight {
                    s.hyperfine_weight = w;
                }
                let mean = o.nu_q_mean.unwrap_or(s.gamma_n * b.quad_field_equiv);
                BathSpecies {
                    nu_q_mean: mean,
                    nu_q_sigma: o.nu_q_sigma.unwrap_or(b.nu_q_rel_sigma * mean),
                    species: s,
                }
            })
            .collect();
        let cfg = BathConfig {
            b_ext: b.b_ext,
            sigma_oh: b.sigma_oh,
            species,
            nu_q_scale: b.nu_q_scale,
            tilt_sigma: b.tilt_sigma,
            eta: b.eta,
            n_nuclei: b.n_nuclei,
            electron_gyromagnetic: b.electron_gyromagnetic,
            seed: b.seed,
        };
        cfg.validate().map_err(cfg_err("bath"))?;
        Ok(cfg)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let g = GridSpec {
            nu_max: self.grid.nu_max,
            dnu: self.grid.dnu,
        };
        g.validate().map_err(cfg_err("grid"))?;
        if self.grid.n_samples < 1000 {
            return Err(Error::Config(format!("grid.n_samples = {} must be >= 1000", self.grid.n_samples)));
        }
        Ok(g)
    }

    pub fn sequence_kind(&self) -> Result<SequenceKind> {
        self.sequence.kind.parse().map_err(cfg_err("sequence.kind"))
    }

    pub fn time_grid(&self) -> Result<Vec<f64>> {
        parse_tgrid(&self.sequence.tgrid).map_err(cfg_err("sequence.tgrid"))
    }

    pub fn channels(&self) -> Channels {
        Channels {
            linear: self.sequence.linear,
            quadratic: self.sequence.quadratic,
        }
    }

    pub fn trajectory_config(&self) -> Result<TrajectoryConfig> {
        let tc = TrajectoryConfig {
            n_realizations: self.mc.n_realizations,
            time_step: (self.mc.time_step > 0.0).then_some(self.mc.time_step),
            seed: self.mc.seed,
            subsample: self.mc.subsample,
            channels: self.channels(),
            coupling_scale: self.mc.coupling_scale,
        };
        tc.validate().map_err(cfg_err("mc"))?;
        Ok(tc)
    }

    pub fn fit_free(&self) -> Result<Vec<FitParam>> {
        for k in self.fit.bounds.keys() {
            k.parse::<FitParam>().map_err(cfg_err("fit.bounds"))?;
        }
        self.fit
            .free
            .iter()
            .map(|s| s.parse::<FitParam>().map_err(cfg_err("fit.free")))
            .collect()
    }

    pub fn fit_bounds(&self) -> Result<Vec<(FitParam, f64, f64)>> {
        self.fit
            .bounds
            .iter()
            .map(|(k, [lo, hi])| Ok((k.parse::<FitParam>().map_err(cfg_err("fit.bounds"))?, *lo, *hi)))
            .collect()
    }

    /// SHA-256 of the canonical JSON form, so equal effective configurations
    /// hash equally whatever their formatting.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(canonical.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn cfg_err(key: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::InvalidArgument(m) | Error::Config(m) => Error::Config(format!("{key}: {m}")),
        other => other,
    }
}

/// `start:stop:count` with an `ns` or `us` suffix; returns ns.
pub fn parse_tgrid(spec: &str) -> Result<Vec<f64>> {
    let s = spec.trim();
    let (body, scale) = if let Some(b) = s.strip_suffix("ns") {
        (b, 1.0)
    } else if let Some(b) = s.strip_suffix("us") {
        (b, 1e3)
    } else {
        return Err(Error::invalid(format!("time grid `{spec}` needs an ns or us suffix")));
    };
    let parts: Vec<&str> = body.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::invalid(format!("time grid `{spec}` is not start:stop:count")));
    }
    let num = |p: &str| p.trim().parse::<f64>().map_err(|_| Error::invalid(format!("`{p}` in time grid is not a number")));
    let (start, stop) = (num(parts[0])?, num(parts[1])?);
    let count: usize = parts[2]
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("count `{}` in time grid is not an integer", parts[2])))?;
    if !(start > 0.0 && stop >= start && count >= 1) || (count == 1 && stop != start) {
        return Err(Error::invalid(format!(
            "time grid `{spec}` needs 0 < start <= stop and count >= 1"
        )));
    }
    if count == 1 {
        return Ok(vec![start * scale]);
    }
    let step = (stop - start) / (count - 1) as f64;
    Ok((0..count).map(|k| (start + step * k as f64) * scale).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_config_equals_defaults() {
        let shipped = RunConfig::parse(DEFAULT_CONFIG).unwrap();
        assert_eq!(shipped, RunConfig::default());
        assert_eq!(shipped.hash(), RunConfig::default().hash());
        let b = shipped.bath_config().unwrap();
        assert_eq!(b, BathConfig::default_at(4.0));
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::parse("[bath]\nsigmaoh = 30\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let msg = err.to_string();
        assert!(msg.contains("sigmaoh"), "{msg}");
        assert!(msg.contains("line 2"), "{msg}");
        assert!(RunConfig::parse("[bathh]\n").unwrap_err().to_string().contains("bathh"));
    }

    #[test]
    fn invalid_values_name_their_section() {
        let msg = RunConfig::parse("[bath]\nsigma_oh = -1\n").unwrap_err().to_string();
        assert!(msg.contains("bath") && msg.contains("sigma_oh"), "{msg}");
        let msg = RunConfig::parse("[sequence]\nkind = \"echo\"\n").unwrap_err().to_string();
        assert!(msg.contains("sequence.kind"), "{msg}");
        let msg = RunConfig::parse("[fit]\nfree = [\"sigma\"]\n").unwrap_err().to_string();
        assert!(msg.contains("fit.free"), "{msg}");
        let msg = RunConfig::parse("[bath.species.In113]\nnu_q_mean = 3\n").unwrap_err().to_string();
        assert!(msg.contains("In113"), "{msg}");
    }

    #[test]
    fn species_overrides_apply() {
        let cfg = RunConfig::parse("[bath.species.In115]\nnu_q_mean = 5.0\nnu_q_sigma = 1.0\n").unwrap();
        let b = cfg.bath_config().unwrap();
        let i = b.species_index(Isotope::In115).unwrap();
        assert_eq!((b.species[i].nu_q_mean, b.species[i].nu_q_sigma), (5.0, 1.0));
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn tgrid_syntax() {
        let t = parse_tgrid("10:1300:50ns").unwrap();
        assert_eq!(t.len(), 50);
        assert_eq!(t[0], 10.0);
        assert!((t[49] - 1300.0).abs() < 1e-9);
        assert_eq!(parse_tgrid("0.1:1:10us").unwrap()[9], 1000.0);
        assert_eq!(parse_tgrid("5:5:1ns").unwrap(), vec![5.0]);
        for bad in ["10:1300:50", "10:1300ns", "0:10:5ns", "10:5:3ns", "a:b:cns", "1:2:0ns"] {
            assert!(parse_tgrid(bad).is_err(), "{bad}");
        }
    }
}
