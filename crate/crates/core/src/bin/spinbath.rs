use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use spinbath::coherence::CoherenceModel;
use spinbath::config::{parse_tgrid, RunConfig, DEFAULT_CONFIG};
use spinbath::fit::{fit, FitParam, FitProblem};
use spinbath::io;
use spinbath::montecarlo::simulate_curve;
use spinbath::sequence::SequenceKind;
use spinbath::spectra::ensemble_spectra;
use spinbath::{Error, Result};

const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Electron-spin coherence in a quadrupolar nuclear-spin bath.
#[derive(Parser)]
#[command(name = "spinbath", version)]
struct Cli {
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, env = "SPINBATH_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ensemble noise spectra as CSV plus a JSON summary.
    Spectrum {
        #[command(flatten)]
        common: Common,
    },
    /// Filter-function visibility curve.
    Coherence {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seq: SequenceArgs,
        /// Also write per-species chi to <stem>_species.csv.
        #[arg(long)]
        breakdown: bool,
    },
    /// Monte-Carlo visibility curve.
    Mc {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        seq: SequenceArgs,
        #[arg(long)]
        realizations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit bath parameters to measured visibility curves.
    Fit {
        #[command(flatten)]
        common: Common,
        /// Visibility CSV; repeat for several datasets.
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        /// Comma-separated subset of sigma_oh, nu_q_scale, tilt_sigma, v0.
        #[arg(long, value_delimiter = ',')]
        free: Option<Vec<String>>,
        /// Field (T) for datasets without a sidecar.
        #[arg(long)]
        field: Option<f64>,
        /// Sequence for datasets without a sidecar.
        #[arg(long)]
        sequence: Option<String>,
        #[arg(long)]
        bootstrap: Option<usize>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; the shipped defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file; a JSON sidecar is written next to it.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args)]
struct SequenceArgs {
    /// ramsey, hahn or cpmg:N
    #[arg(long)]
    sequence: Option<String>,
    /// External field, T.
    #[arg(long)]
    field: Option<f64>,
    /// start:stop:count with an ns or us suffix.
    #[arg(long)]
    tgrid: Option<String>,
}

fn load(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => RunConfig::parse(DEFAULT_CONFIG),
    }
}

fn apply(cfg: &mut RunConfig, seq: &SequenceArgs) -> Result<()> {
    if let Some(s) = &seq.sequence {
        s.parse::<SequenceKind>()?;
        cfg.sequence.kind = s.clone();
    }
    if let Some(b) = seq.field {
        cfg.bath.b_ext = b;
    }
    if let Some(t) = &seq.tgrid {
        parse_tgrid(t)?;
        cfg.sequence.tgrid = t.clone();
    }
    cfg.check()
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Config(_) => 2,
        Error::Invariant(_) | Error::NonFinite { .. } => 3,
        Error::Io { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("spinbath: cannot start {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("spinbath: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Spectrum { common } => spectrum(&common),
        Command::Coherence { common, seq, breakdown } => coherence(&common, &seq, breakdown),
        Command::Mc {
            common,
            seq,
            realizations,
            seed,
        } => mc(&common, &seq, realizations, seed),
        Command::Fit {
            common,
            data,
            free,
            field,
            sequence,
            bootstrap,
        } => fit_cmd(&common, &data, free, field, sequence, bootstrap),
    }
}

fn spectrum(common: &Common) -> Result<()> {
    let cfg = load(common)?;
    let bath = cfg.bath_config()?;
    let spectra = ensemble_spectra(&bath, cfg.grid_spec()?, cfg.grid.n_samples)?;
    spectra.zz.check_invariants()?;
    spectra.perp.check_invariants()?;
    io::write_atomic(&common.out, &io::spectrum_csv(&spectra)?)?;
    let (zz, perp) = (&spectra.zz, &spectra.perp);
    let total = zz.total_variance() + perp.total_variance();
    let species: Vec<_> = spectra
        .species
        .iter()
        .map(|s| {
            json!({
                "name": s.name.to_string(),
                "zz_total_variance_mT2": s.zz.total_variance(),
                "perp_total_variance_mT2": s.perp.total_variance(),
            })
        })
        .collect();
    let summary = json!({
        "b_ext": bath.b_ext,
        "sigma_oh": bath.sigma_oh,
        "zz_static_variance_mT2": zz.static_variance,
        "zz_dynamic_variance_mT2": zz.integral(),
        "perp_static_variance_mT2": perp.static_variance,
        "perp_dynamic_variance_mT2": perp.integral(),
        "total_variance_mT2": total,
        "sum_rule_ratio": total / bath.sigma_oh.powi(2),
        "out_of_band_mT2": zz.out_of_band + perp.out_of_band,
        "coarse_grid_warning": zz.coarse_grid_warning || perp.coarse_grid_warning,
        "n_samples": spectra.n_samples,
        "species": species,
        "config_hash": cfg.hash(),
        "seed": bath.seed,
        "version": VERSION,
    });
    io::write_json(&io::sidecar_path(&common.out), &summary)
}

fn coherence(common: &Common, seq: &SequenceArgs, breakdown: bool) -> Result<()> {
    let mut cfg = load(common)?;
    apply(&mut cfg, seq)?;
    let bath = cfg.bath_config()?;
    let kind = cfg.sequence_kind()?;
    let times = cfg.time_grid()?;
    let model = CoherenceModel::from_config(&bath, cfg.grid_spec()?, cfg.grid.n_samples, cfg.sequence.pulse_fidelity)?
        .with_channels(cfg.channels());
    let mut curve = model.curve(kind, &times)?;
    curve.meta.config_hash = Some(cfg.hash());
    curve.meta.seed = Some(bath.seed);
    io::write_atomic(&common.out, &io::curve_csv(&curve)?)?;
    if breakdown {
        let b = model.breakdown(kind, &times)?;
        io::write_atomic(&io::sibling_path(&common.out, "_species"), &io::breakdown_csv(&b)?)?;
    }
    write_curve_sidecar(&common.out, &curve.meta, &cfg)
}

fn write_curve_sidecar(out: &Path, meta: &spinbath::coherence::CurveMeta, cfg: &RunConfig) -> Result<()> {
    let side = json!({
        "b_ext": meta.b_ext,
        "sequence": meta.sequence,
        "engine": meta.engine,
        "pulse_fidelity": cfg.sequence.pulse_fidelity,
        "linear": cfg.sequence.linear,
        "quadratic": cfg.sequence.quadratic,
        "config_hash": meta.config_hash,
        "seed": meta.seed,
        "version": VERSION,
    });
    io::write_json(&io::sidecar_path(out), &side)
}

fn mc(common: &Common, seq: &SequenceArgs, realizations: Option<usize>, seed: Option<u64>) -> Result<()> {
    let mut cfg = load(common)?;
    if let Some(n) = realizations {
        cfg.mc.n_realizations = n;
    }
    if let Some(s) = seed {
        cfg.mc.seed = s;
    }
    apply(&mut cfg, seq)?;
    let bath = cfg.bath_config()?;
    let tc = cfg.trajectory_config()?;
    let mut curve = simulate_curve(
        &bath,
        cfg.sequence_kind()?,
        &cfg.time_grid()?,
        cfg.sequence.pulse_fidelity,
        &tc,
    )?;
    curve.meta.config_hash = Some(cfg.hash());
    io::write_atomic(&common.out, &io::curve_csv(&curve)?)?;
    write_curve_sidecar(&common.out, &curve.meta, &cfg)
}

fn fit_cmd(
    common: &Common,
    data: &[PathBuf],
    free: Option<Vec<String>>,
    field: Option<f64>,
    sequence: Option<String>,
    bootstrap: Option<usize>,
) -> Result<()> {
    let mut cfg = load(common)?;
    if let Some(f) = free {
        cfg.fit.free = f;
    }
    if let Some(b) = bootstrap {
        cfg.fit.n_bootstrap = b;
    }
    cfg.check()?;
    if let Some(s) = &sequence {
        s.parse::<SequenceKind>()?;
    }
    let mut datasets = Vec::new();
    let mut hashes = Vec::new();
    for path in data {
        let (mut curve, hash) = io::read_curve(path)?;
        if !(curve.meta.b_ext > 0.0) {
            curve.meta.b_ext = field.ok_or_else(|| {
                Error::InvalidArgument(format!("{}: no sidecar gives the field; pass --field", path.display()))
            })?;
        }
        if curve.meta.sequence.is_empty() {
            curve.meta.sequence = sequence.clone().ok_or_else(|| {
                Error::InvalidArgument(format!("{}: no sidecar gives the sequence; pass --sequence", path.display()))
            })?;
        }
        datasets.push(curve);
        hashes.push(hash);
    }
    let free: Vec<FitParam> = cfg.fit_free()?;
    let mut problem = FitProblem::new(datasets, free, cfg.bath_config()?);
    problem.bounds = cfg.fit_bounds()?;
    problem.v0 = cfg.fit.v0;
    problem.pulse_fidelity = cfg.sequence.pulse_fidelity;
    problem.channels = cfg.channels();
    problem.grid = cfg.grid_spec()?;
    problem.n_samples = cfg.grid.n_samples;
    problem.n_bootstrap = cfg.fit.n_bootstrap;
    problem.seed = cfg.fit.seed;
    let mut result = fit(&problem)?;
    result.provenance.config_hash = Some(cfg.hash());
    result.provenance.data_hashes = hashes;
    io::write_json(&common.out, &result)
}
