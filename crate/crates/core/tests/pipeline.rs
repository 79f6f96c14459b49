use exlgm::config::{GridConfig, RunConfig, SimulateConfig, SimulateMode};
use exlgm::data::{read_draws, read_fits, write_draws, write_fits};
use exlgm::maxstep::{fit_all_sites, fit_site_with, FitOptions};
use exlgm::workflow;
use proptest::prelude::*;

fn config(n_times: usize, seed: u64) -> (RunConfig, SimulateConfig) {
    let mut cfg = RunConfig::default();
    cfg.chain.n_iterations = 300;
    cfg.chain.n_burnin = 100;
    cfg.chain.seed = seed;
    let sim = SimulateConfig {
        grid: GridConfig { nx: 3, ny: 3, spacing: 1.0, lon0: 0.0, lat0: 0.0 },
        n_times,
        seed,
        truth: SimulateMode::Fixed { mu: 10.0, sigma: 1.5, xi: 0.1 },
    };
    cfg.simulate = Some(sim.clone());
    (cfg, sim)
}

#[test]
fn fits_and_draws_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, sim) = config(400, 1);
    let (data, _) = workflow::simulate_from_config(&sim, &cfg).unwrap();
    let fits: Vec<_> = workflow::max_step(&data, &cfg).unwrap().fits.iter().map(|f| f.record()).collect();
    assert_eq!(fits.len(), 9);

    let path = dir.path().join("fits.csv");
    write_fits(&path, &fits).unwrap();
    assert_eq!(read_fits(&path).unwrap(), fits);

    let (_, samples) = workflow::smooth_step(&fits, &cfg).unwrap();
    assert_eq!(samples.n_draws(), 200);
    let path = dir.path().join("draws.bin");
    write_draws(&path, &samples).unwrap();
    let back = read_draws(&path).unwrap();
    assert_eq!(back.theta_draws.as_slice(), samples.theta_draws.as_slice());
    assert_eq!(back.latent_draws.as_slice(), samples.latent_draws.as_slice());
}

#[test]
fn site_order_does_not_change_fits() {
    let (cfg, sim) = config(400, 2);
    let (data, _) = workflow::simulate_from_config(&sim, &cfg).unwrap();
    let opts = FitOptions::new(0.75, 400.0 / 365.25, 15);
    let mut series = data.series();
    let forward = fit_all_sites(&series, &opts).unwrap();
    series.reverse();
    let backward = fit_all_sites(&series, &opts).unwrap();
    for f in &forward.fits {
        let g = backward.fits.iter().find(|g| g.site_id == f.site_id).unwrap();
        assert_eq!(f.record(), g.record());
    }
}

#[test]
fn smooth_is_reproducible_for_a_seed() {
    let (cfg, sim) = config(400, 3);
    let (data, _) = workflow::simulate_from_config(&sim, &cfg).unwrap();
    let fits: Vec<_> = workflow::max_step(&data, &cfg).unwrap().fits.iter().map(|f| f.record()).collect();
    let (_, a) = workflow::smooth_step(&fits, &cfg).unwrap();
    let (_, b) = workflow::smooth_step(&fits, &cfg).unwrap();
    assert_eq!(a.theta_draws.as_slice(), b.theta_draws.as_slice());
    assert_eq!(a.latent_draws.as_slice(), b.latent_draws.as_slice());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn zero_padding_leaves_estimates_unchanged(seed in 0u64..1000, pad in 1usize..500) {
        let (cfg, sim) = config(300, seed);
        let (data, _) = workflow::simulate_from_config(&sim, &cfg).unwrap();
        let site = data.series().swap_remove(0);
        let opts = FitOptions::new(0.75, 1.0, 15);
        let base = fit_site_with(&site, &opts).unwrap();
        let mut padded = site.clone();
        padded.values.extend(std::iter::repeat(0.0).take(pad));
        let fit = fit_site_with(&padded, &opts).unwrap();
        prop_assert_eq!(fit.n_exceedances, base.n_exceedances);
        for (a, b) in fit.eta_hat.to_array().iter().zip(base.eta_hat.to_array()) {
            prop_assert!((a - b).abs() < 1e-6, "{} vs {}", a, b);
        }
    }

    #[test]
    fn fitted_information_is_positive_definite(seed in 0u64..1000) {
        let (cfg, sim) = config(200, seed);
        let (data, _) = workflow::simulate_from_config(&sim, &cfg).unwrap();
        for f in workflow::max_step(&data, &cfg).unwrap().fits {
            let q = f.info;
            prop_assert!((q - q.transpose()).abs().max() < 1e-10);
            prop_assert!(q.cholesky().is_some());
        }
    }
}
