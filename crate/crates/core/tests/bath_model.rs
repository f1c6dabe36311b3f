use spinbath::bath::{sample_bath, BathConfig, Isotope};

fn ks_statistic(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

fn nu_q_draws(seed: u64) -> Vec<f64> {
    let mut cfg = BathConfig::default_at(4.0);
    cfg.n_nuclei = 4000;
    cfg.seed = seed;
    let idx = cfg.species_index(Isotope::In115).unwrap();
    sample_bath(&cfg)
        .unwrap()
        .nuclei
        .into_iter()
        .filter(|n| n.species == idx)
        .map(|n| n.quad.nu_q)
        .collect()
}

#[test]
fn nu_q_law_is_seed_invariant() {
    let mut rejections = 0;
    for run in 0..10u64 {
        let mut a = nu_q_draws(100 + 2 * run);
        let mut b = nu_q_draws(101 + 2 * run);
        let (n, m) = (a.len() as f64, b.len() as f64);
        let critical = 1.628 * ((n + m) / (n * m)).sqrt();
        if ks_statistic(&mut a, &mut b) > critical {
            rejections += 1;
        }
    }
    // 1% level over 10 runs: more than one rejection has probability < 0.5%
    assert!(rejections <= 1, "{rejections} KS rejections");
}

#[test]
fn theta_and_phi_laws() {
    let mut cfg = BathConfig::default_at(4.0);
    cfg.n_nuclei = 20_000;
    let s = sample_bath(&cfg).unwrap();
    let n = s.nuclei.len() as f64;
    let mean_theta = s.nuclei.iter().map(|k| k.quad.theta).sum::<f64>() / n;
    let sd = cfg.tilt_sigma;
    assert!((mean_theta - std::f64::consts::FRAC_PI_2).abs() < 4.0 * sd / n.sqrt());
    assert!(s
        .nuclei
        .iter()
        .all(|k| (0.0..std::f64::consts::TAU).contains(&k.quad.phi)));
}
