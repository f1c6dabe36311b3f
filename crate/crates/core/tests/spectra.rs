use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spinbath::bath::{BathConfig, Isotope};
use spinbath::coherence::CoherenceModel;
use spinbath::spectra::{autocorrelation, decorrelation_time, ensemble_spectra, GridSpec, NoiseSpectrum};

fn coarse() -> GridSpec {
    GridSpec { nu_max: 200.0, dnu: 0.05 }
}

#[test]
fn variance_sum_rule_random_configs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let mut cfg = BathConfig::default_at(rng.random_range(1.5..7.0));
        cfg.sigma_oh = rng.random_range(10.0..50.0);
        cfg.nu_q_scale = rng.random_range(0.3..3.0);
        cfg.tilt_sigma = rng.random_range(0.0..0.6);
        cfg.eta = rng.random_range(0.0..0.95);
        cfg.seed = rng.random();
        let s = ensemble_spectra(&cfg, coarse(), 1000).unwrap();
        let total = s.zz.total_variance() + s.perp.total_variance();
        let rel = total / cfg.sigma_oh.powi(2) - 1.0;
        assert!(rel.abs() < 0.015, "{cfg:?}: relative error {rel}");
    }
}

/// True when some bin within `rel` of `nu` is the largest over +-`half` MHz.
fn local_peak_near(s: &NoiseSpectrum, nu: f64, rel: f64, half: f64) -> bool {
    let n = s.half_bins();
    let w = (half / s.grid.dnu).round() as usize;
    (1..=n).any(|k| {
        let f = k as f64 * s.grid.dnu;
        (f - nu).abs() <= rel * nu
            && k > w
            && k + w <= n
            && (k - w..=k + w).all(|j| s.density[n + j] <= s.density[n + k])
    })
}

#[test]
fn transverse_peaks_at_larmor_frequencies() {
    let cfg = BathConfig::default_at(4.0);
    let s = ensemble_spectra(&cfg, GridSpec::default(), 2000).unwrap();
    for b in &cfg.species {
        let nu = b.species.larmor(4.0);
        // the quadrupolar shoulders of neighbouring species overlap, so a
        // local maximum is required rather than the window maximum
        assert!(local_peak_near(&s.perp, nu, 0.05, 0.2), "{}: no peak near {nu}", b.species.name);
        let own = s.species.iter().find(|x| x.name == b.species.name).unwrap();
        let p = own.perp.peak_in(0.5 * nu, 1.5 * nu).unwrap();
        assert!((p - nu).abs() < 0.05 * nu, "{}: own peak {p} vs {nu}", b.species.name);
    }
}

#[test]
fn independent_runs_converge_in_l2() {
    let mut cfg = BathConfig::default_at(4.0);
    let grid = GridSpec::default();
    let a = ensemble_spectra(&cfg, grid, 10_000).unwrap();
    cfg.seed = 2;
    let b = ensemble_spectra(&cfg, grid, 10_000).unwrap();
    for (x, y) in [(&a.zz, &b.zz), (&a.perp, &b.perp)] {
        let diff: f64 = x.density.iter().zip(&y.density).map(|(p, q)| (p - q).powi(2)).sum();
        let norm: f64 = x.density.iter().map(|p| p * p).sum();
        let rel = (diff / norm).sqrt();
        assert!(rel < 0.05, "{:?}: L2 relative difference {rel}", x.component);
        assert!((x.static_variance - y.static_variance).abs() < 0.02 * x.static_variance);
    }
}

#[test]
fn dynamic_zz_power_falls_with_field() {
    let base = BathConfig::default_at(2.0);
    let powers: Vec<f64> = [2.0, 3.0, 4.0, 5.0]
        .iter()
        .map(|&b| ensemble_spectra(&base.with_field(b), coarse(), 2000).unwrap().zz.integral())
        .collect();
    for w in powers.windows(2) {
        assert!(w[1] < w[0], "{powers:?}");
    }
}

#[test]
fn spectra_are_symmetric() {
    let s = ensemble_spectra(&BathConfig::default_at(3.0), coarse(), 1000).unwrap();
    for sp in [&s.zz, &s.perp] {
        let d = &sp.density;
        for j in 0..d.len() {
            assert_eq!(d[j], d[d.len() - 1 - j]);
        }
        assert_eq!(sp.frequency(0), -sp.frequency(d.len() - 1));
    }
}

#[test]
fn commuting_limit_is_static() {
    let mut cfg = BathConfig::default_at(4.0).single_species(Isotope::As75).unwrap();
    cfg.species[0].nu_q_sigma = 0.0;
    cfg.tilt_sigma = 0.0;
    let s = ensemble_spectra(&cfg, coarse(), 1000).unwrap();
    assert!(s.zz.integral() < 0.01 * s.zz.total_variance());
}

#[test]
fn correlation_at_zero_is_dynamic_variance() {
    let s = ensemble_spectra(&BathConfig::default_at(4.0), coarse(), 1000).unwrap();
    for sp in [&s.zz, &s.perp] {
        let c0 = autocorrelation(sp, &[0.0])[0];
        assert!((c0 - sp.integral()).abs() < 1e-6 * sp.integral());
    }
}

#[test]
fn electron_splitting_decorrelates_in_tens_of_ns_at_3t() {
    let model = CoherenceModel::from_config(&BathConfig::default_at(3.0), GridSpec::default(), 10_000, 0.97).unwrap();
    let tau = decorrelation_time(&model.effective_spectrum(), 500.0).unwrap();
    assert!((10.0..=40.0).contains(&tau), "decorrelation time {tau} ns");
}
