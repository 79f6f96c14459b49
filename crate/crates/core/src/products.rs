//! Posterior products: return-level surfaces, posterior predictive draws
//! above the threshold, and binned empirical variograms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distributions::Open01;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evt::{gev_quantile_from_neglog, gev_return_level, ppp_log_intensity, PpParameters};
use crate::link::{link_inverse, TransformedParameters};
use crate::smooth::PosteriorSamples;
use crate::stats::summarize;

/// Posterior summary of the `M`-block return level at one site.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnLevel {
    pub site: usize,
    pub period: f64,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReturnLevelSurface {
    pub period: f64,
    pub sites: Vec<ReturnLevel>,
}

fn site_params(samples: &PosteriorSamples, k: usize, site: usize) -> Result<PpParameters> {
    let [psi, tau, phi] = samples.site_eta(k, site);
    link_inverse(&TransformedParameters::new(psi, tau, phi))
}

/// Return level `G^{-1}(1 - 1/M)` at `site` for every posterior draw.
pub fn return_level_draws(samples: &PosteriorSamples, site: usize, period: f64) -> Result<Vec<f64>> {
    if !(period > 1.0 && period.is_finite()) {
        return Err(Error::invalid(format!("return period must exceed 1, got {period}")));
    }
    if site >= samples.n_sites {
        return Err(Error::invalid(format!("site index {site} out of range")));
    }
    (0..samples.n_draws()).map(|k| gev_return_level(1.0 / period, &site_params(samples, k, site)?)).collect()
}

pub fn return_level_surface(samples: &PosteriorSamples, period: f64) -> Result<ReturnLevelSurface> {
    if samples.n_draws() == 0 {
        return Err(Error::invalid("no posterior draws"));
    }
    let sites = (0..samples.n_sites)
        .into_par_iter()
        .map(|site| {
            let s = summarize(&return_level_draws(samples, site, period)?);
            Ok(ReturnLevel { site, period, mean: s.mean, sd: s.sd, q025: s.q025, q975: s.q975 })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ReturnLevelSurface { period, sites })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictConfig {
    /// Block size `B`: daily values follow `G^{1/B}`.
    pub block_size: f64,
    pub n_draws: usize,
}

impl Default for PredictConfig {
    fn default() -> Self {
        Self { block_size: 365.25, n_draws: 1000 }
    }
}

/// `-log G(u)`, the GEV neg-log distribution function (`+inf` below the
/// lower endpoint, 0 above the upper endpoint).
fn neglog_cdf(u: f64, p: &PpParameters) -> f64 {
    let t = (u - p.mu) / p.sigma;
    if p.xi.abs() < crate::evt::XI_ZERO_TOL {
        return (-t).exp();
    }
    let s = 1.0 + p.xi * t;
    if s <= 0.0 {
        return if p.xi > 0.0 { f64::INFINITY } else { 0.0 };
    }
    (-s.ln() / p.xi).exp()
}

/// One draw of `Y | Y > u` with `Y ~ G^{1/B}`, by inverse transform in
/// `-log` space: `q ~ U(F(u), 1)`, `Y = G^{-1}(q^B)`.
fn conditional_draw<R: Rng + ?Sized>(p: &PpParameters, u: f64, block: f64, site: u64, rng: &mut R) -> Result<f64> {
    // 1 - F(u), computed without cancellation
    let tail = -(-neglog_cdf(u, p) / block).exp_m1();
    if !(tail > 0.0) {
        return Err(Error::DegenerateSite { site, reason: format!("threshold {u} is at or above the upper endpoint") });
    }
    loop {
        let v: f64 = rng.sample(Open01);
        // q = 1 - v (1 - F(u)); -log G(Y) = -B log q
        let y = gev_quantile_from_neglog(-block * (-v * tail).ln_1p(), p);
        if y > u && y.is_finite() {
            return Ok(y);
        }
    }
}

/// Posterior predictive draws above `threshold` at `site`, cycling through
/// the stored posterior draws.
pub fn posterior_predictive_draws<R: Rng + ?Sized>(
    samples: &PosteriorSamples,
    site: usize,
    threshold: f64,
    cfg: &PredictConfig,
    rng: &mut R,
) -> Result<Vec<f64>> {
    if !(cfg.block_size > 0.0 && cfg.block_size.is_finite()) {
        return Err(Error::invalid(format!("block size must be positive, got {}", cfg.block_size)));
    }
    if !threshold.is_finite() {
        return Err(Error::invalid("threshold must be finite"));
    }
    if site >= samples.n_sites || samples.n_draws() == 0 {
        return Err(Error::invalid(format!("site index {site} out of range or no draws")));
    }
    let params: Vec<PpParameters> = (0..samples.n_draws()).map(|k| site_params(samples, k, site)).collect::<Result<_>>()?;
    (0..cfg.n_draws)
        .map(|j| conditional_draw(&params[j % params.len()], threshold, cfg.block_size, site as u64, rng))
        .collect()
}

/// Predictive draws for every site, each with its own ChaCha stream
/// (`stream = site index`) derived from `seed`.
pub fn posterior_predictive_all(samples: &PosteriorSamples, thresholds: &[f64], cfg: &PredictConfig, seed: u64) -> Result<Vec<Vec<f64>>> {
    if thresholds.len() != samples.n_sites {
        return Err(Error::invalid(format!("{} thresholds for {} sites", thresholds.len(), samples.n_sites)));
    }
    (0..samples.n_sites)
        .into_par_iter()
        .map(|site| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(site as u64);
            posterior_predictive_draws(samples, site, thresholds[site], cfg, &mut rng)
        })
        .collect()
}

/// Posterior predictive density of `Y | Y > u` at `y`, averaging the
/// conditional density over the stored draws.
pub fn posterior_predictive_density(samples: &PosteriorSamples, site: usize, threshold: f64, y: f64, block_size: f64) -> Result<f64> {
    if y <= threshold {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for k in 0..samples.n_draws() {
        let p = site_params(samples, k, site)?;
        let tail = -(-neglog_cdf(threshold, &p) / block_size).exp_m1();
        if !(tail > 0.0) {
            return Err(Error::DegenerateSite { site: site as u64, reason: "threshold above the upper endpoint".into() });
        }
        let log_f = -neglog_cdf(y, &p) / block_size;
        let li = ppp_log_intensity(y, &p);
        if li.is_finite() {
            acc += (log_f + li).exp() / block_size / tail;
        }
    }
    Ok(acc / samples.n_draws() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariogramBin {
    pub center: f64,
    /// `None` for empty bins.
    pub semivariance: Option<f64>,
    pub count: usize,
}

/// Half the largest pairwise distance.
pub fn default_max_distance(coords: &[[f64; 2]]) -> f64 {
    let mut d: f64 = 0.0;
    for (a, p) in coords.iter().enumerate() {
        for q in &coords[a + 1..] {
            d = d.max((p[0] - q[0]).hypot(p[1] - q[1]));
        }
    }
    0.5 * d
}

/// Matheron estimator on `n_bins` equal-width distance bins over `[0, max_dist]`.
pub fn empirical_variogram(values: &[f64], coords: &[[f64; 2]], n_bins: usize, max_dist: f64) -> Result<Vec<VariogramBin>> {
    if values.len() != coords.len() {
        return Err(Error::invalid("values and coordinates differ in length"));
    }
    if values.len() < 2 {
        return Err(Error::invalid("a variogram needs at least 2 sites"));
    }
    if n_bins == 0 || !(max_dist > 0.0 && max_dist.is_finite()) {
        return Err(Error::invalid("need at least one bin and a positive maximum distance"));
    }
    let width = max_dist / n_bins as f64;
    let mut sum = vec![0.0; n_bins];
    let mut count = vec![0usize; n_bins];
    for i in 0..values.len() {
        for j in i + 1..values.len() {
            let d = (coords[i][0] - coords[j][0]).hypot(coords[i][1] - coords[j][1]);
            if d > max_dist {
                continue;
            }
            let b = ((d / width) as usize).min(n_bins - 1);
            sum[b] += (values[i] - values[j]).powi(2);
            count[b] += 1;
        }
    }
    Ok((0..n_bins)
        .map(|b| VariogramBin {
            center: (b as f64 + 0.5) * width,
            semivariance: (count[b] > 0).then(|| 0.5 * sum[b] / count[b] as f64),
            count: count[b],
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evt::gev_cdf;
    use crate::link::link_forward;
    use crate::smooth::DrawMatrix;
    use crate::stats::ks_test;
    use rand_distr::{Distribution, Normal};

    fn degenerate_chain(p: PpParameters, n: usize) -> PosteriorSamples {
        // mu = 0 is outside the link's domain; shift to a positive location when needed
        let eta = link_forward(&p).unwrap().to_array();
        let mut latent = Vec::new();
        for _ in 0..n {
            latent.extend_from_slice(&[eta[0], eta[1], eta[2], 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        }
        PosteriorSamples {
            n_sites: 1,
            n_nodes: 2,
            theta_draws: DrawMatrix::new(n, 7, vec![1.0; 7 * n]).unwrap(),
            latent_draws: DrawMatrix::new(n, 9, latent).unwrap(),
            acceptance_rate: 0.0,
            seed: 0,
            warnings: vec![],
        }
    }

    // The link needs mu > 0, so the (0, 1, 0) examples are run with mu = 10
    // and compared after removing the shift.
    const SHIFT: f64 = 10.0;

    #[test]
    fn single_draw_return_level() {
        let s = degenerate_chain(PpParameters::new(SHIFT, 1.0, 0.0).unwrap(), 5);
        let surf = return_level_surface(&s, 100.0).unwrap();
        let r = surf.sites[0];
        assert!((r.mean - SHIFT - 4.600149226776579).abs() < 1e-9);
        assert!(r.sd.abs() < 1e-9);
        assert!(return_level_surface(&s, 1.0).is_err());
    }

    #[test]
    fn return_levels_increase_with_period() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut latent = Vec::new();
        for _ in 0..50 {
            for _ in 0..3 {
                latent.push(2.3 + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal));
            }
            for _ in 0..3 {
                latent.push(-0.7 + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal));
            }
            for _ in 0..3 {
                latent.push(0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal));
            }
            latent.extend_from_slice(&[0.0; 5]);
        }
        let s = PosteriorSamples {
            n_sites: 3,
            n_nodes: 1,
            theta_draws: DrawMatrix::new(50, 7, vec![1.0; 350]).unwrap(),
            latent_draws: DrawMatrix::new(50, 14, latent).unwrap(),
            acceptance_rate: 0.0,
            seed: 0,
            warnings: vec![],
        };
        let a = return_level_surface(&s, 20.0).unwrap();
        let b = return_level_surface(&s, 50.0).unwrap();
        let c = return_level_surface(&s, 100.0).unwrap();
        for i in 0..3 {
            assert!(a.sites[i].mean < b.sites[i].mean && b.sites[i].mean < c.sites[i].mean);
        }
        for site in 0..3 {
            let d20 = return_level_draws(&s, site, 20.0).unwrap();
            let d100 = return_level_draws(&s, site, 100.0).unwrap();
            assert!(d20.iter().zip(&d100).all(|(x, y)| x < y));
        }
    }

    #[test]
    fn predictive_median_matches_closed_form() {
        let p = PpParameters::new(SHIFT, 1.0, 0.0).unwrap();
        let s = degenerate_chain(p, 1);
        let (b, u) = (365.25, SHIFT + 3.0);
        let cfg = PredictConfig { block_size: b, n_draws: 200_000 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut draws = posterior_predictive_draws(&s, 0, u, &cfg, &mut rng).unwrap();
        assert!(draws.iter().all(|&y| y > u));
        draws.sort_by(f64::total_cmp);
        let median = crate::stats::quantile_sorted(&draws, 0.5);
        // F = G^{1/B}; F^{-1}((F(u) + 1) / 2) through -log G
        let fu = (-(-(3.0f64)).exp() / b).exp();
        let target_q = 0.5 * (fu + 1.0);
        let analytic = SHIFT - (-b * target_q.ln()).ln();
        // density of the conditional law at the median for the standard error
        let dens = posterior_predictive_density(&s, 0, u, analytic, b).unwrap();
        let se = 0.5 / (dens * (draws.len() as f64).sqrt());
        assert!((median - analytic).abs() < 3.0 * se, "{median} vs {analytic} (se {se})");
    }

    #[test]
    fn unit_block_is_gev_conditional() {
        let p = PpParameters::new(SHIFT, 1.0, 0.15).unwrap();
        let s = degenerate_chain(p, 3);
        let u = SHIFT + 0.5;
        let cfg = PredictConfig { block_size: 1.0, n_draws: 5000 };
        let draws = posterior_predictive_draws(&s, 0, u, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let gu = gev_cdf(u, &p).unwrap();
        let (_, pval) = ks_test(&draws, |y| (gev_cdf(y, &p).unwrap() - gu) / (1.0 - gu));
        assert!(pval > 0.01);
    }

    #[test]
    fn exceedance_probability_of_higher_level() {
        let p = PpParameters::new(SHIFT, 2.0, 0.1).unwrap();
        let s = degenerate_chain(p, 1);
        let (b, u, v) = (365.25, SHIFT + 4.0, SHIFT + 8.0);
        let cfg = PredictConfig { block_size: b, n_draws: 100_000 };
        let draws = posterior_predictive_draws(&s, 0, u, &cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let emp = draws.iter().filter(|&&y| y > v).count() as f64 / draws.len() as f64;
        let f = |y: f64| gev_cdf(y, &p).unwrap().powf(1.0 / b);
        let exact = (1.0 - f(v)) / (1.0 - f(u));
        let se = (exact * (1.0 - exact) / draws.len() as f64).sqrt();
        assert!((emp - exact).abs() < 4.0 * se);
    }

    #[test]
    fn threshold_above_endpoint_is_degenerate() {
        let p = PpParameters::new(SHIFT, 1.0, -0.4).unwrap();
        let s = degenerate_chain(p, 1);
        let err = posterior_predictive_draws(&s, 0, SHIFT + 3.0, &PredictConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(err, Err(Error::DegenerateSite { .. })));
    }

    #[test]
    fn per_site_streams_are_deterministic() {
        let s = degenerate_chain(PpParameters::new(SHIFT, 1.0, 0.1).unwrap(), 4);
        let cfg = PredictConfig { block_size: 365.25, n_draws: 10 };
        let a = posterior_predictive_all(&s, &[SHIFT + 2.0], &cfg, 9).unwrap();
        let b = posterior_predictive_all(&s, &[SHIFT + 2.0], &cfg, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn thinning_leaves_return_levels_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 4000;
        let mut latent = Vec::new();
        for _ in 0..n {
            latent.push(2.3 + 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal));
            latent.push(-0.7 + 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal));
            latent.push(0.1 + 0.05 * rng.sample::<f64, _>(rand_distr::StandardNormal));
            latent.extend_from_slice(&[0.0; 5]);
        }
        let full = PosteriorSamples {
            n_sites: 1,
            n_nodes: 1,
            theta_draws: DrawMatrix::new(n, 7, vec![1.0; 7 * n]).unwrap(),
            latent_draws: DrawMatrix::new(n, 8, latent.clone()).unwrap(),
            acceptance_rate: 0.0,
            seed: 0,
            warnings: vec![],
        };
        let thin_latent: Vec<f64> = latent.chunks(8).step_by(2).flatten().copied().collect();
        let thin = PosteriorSamples {
            theta_draws: DrawMatrix::new(n / 2, 7, vec![1.0; 7 * n / 2]).unwrap(),
            latent_draws: DrawMatrix::new(n / 2, 8, thin_latent).unwrap(),
            ..full.clone()
        };
        let a = return_level_surface(&full, 100.0).unwrap().sites[0];
        let b = return_level_surface(&thin, 100.0).unwrap().sites[0];
        assert!((a.mean - b.mean).abs() < 3.0 * a.sd / ((n / 2) as f64).sqrt());
    }

    #[test]
    fn constant_field_has_zero_semivariance() {
        let coords: Vec<[f64; 2]> = (0..30).map(|i| [(i % 6) as f64, (i / 6) as f64]).collect();
        let v = empirical_variogram(&[3.0; 30], &coords, 5, default_max_distance(&coords)).unwrap();
        assert!(v.iter().filter(|b| b.count > 0).all(|b| b.semivariance == Some(0.0)));
    }

    #[test]
    fn pair_counts_cover_all_pairs() {
        let coords: Vec<[f64; 2]> = (0..40).map(|i| [(i % 8) as f64 * 0.7, (i / 8) as f64 * 1.3]).collect();
        let max = 2.0 * default_max_distance(&coords);
        let v = empirical_variogram(&vec![1.0; 40], &coords, 7, max).unwrap();
        assert_eq!(v.iter().map(|b| b.count).sum::<usize>(), 40 * 39 / 2);
        let sparse = empirical_variogram(&[1.0, 2.0], &[[0.0, 0.0], [5.0, 0.0]], 4, 6.0).unwrap();
        assert_eq!(sparse[0].semivariance, None);
        assert_eq!(sparse[0].count, 0);
    }

    #[test]
    fn white_noise_semivariance_is_the_variance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 300;
        let coords: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen::<f64>() * 10.0, rng.gen::<f64>() * 10.0]).collect();
        let normal = Normal::new(0.0, 2.0).unwrap();
        let values: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let max = 7.0;
        let n_bins = 6;
        let bins = empirical_variogram(&values, &coords, n_bins, max).unwrap();
        // exact standard error: each pair term has variance 32, pairs sharing
        // a site have covariance 8
        let width = max / n_bins as f64;
        for (b, bin) in bins.iter().enumerate() {
            let mut per_site = vec![0usize; n];
            for i in 0..n {
                for j in i + 1..n {
                    let d = (coords[i][0] - coords[j][0]).hypot(coords[i][1] - coords[j][1]);
                    if d <= max && ((d / width) as usize).min(n_bins - 1) == b {
                        per_site[i] += 1;
                        per_site[j] += 1;
                    }
                }
            }
            let c = bin.count as f64;
            let shared: f64 = per_site.iter().map(|&k| (k * k.saturating_sub(1)) as f64).sum();
            let se = ((32.0 * c + 8.0 * shared) / (c * c)).sqrt();
            assert!((bin.semivariance.unwrap() - 4.0).abs() < 4.0 * se, "bin {b}");
        }
    }

    #[test]
    fn gmrf_variogram_rises_to_the_sill() {
        use crate::spde::{build_precision, gmrf_sample_with_factor, Mesh};
        let mesh = Mesh { x0: 0.0, y0: 0.0, nx: 30, ny: 30, spacing: 1.0 };
        let q = build_precision(&mesh, 3.0).unwrap();
        let f = q.cholesky().unwrap();
        let s = 1.5;
        let inner: Vec<usize> = (0..mesh.n_nodes())
            .filter(|&k| {
                let [x, y] = mesh.node(k);
                (6.0..=23.0).contains(&x) && (6.0..=23.0).contains(&y)
            })
            .collect();
        let coords: Vec<[f64; 2]> = inner.iter().map(|&k| mesh.node(k)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n_rep = 30;
        let n_bins = 8;
        let mut acc = vec![0.0; n_bins];
        for _ in 0..n_rep {
            let x = gmrf_sample_with_factor(&f, s, &mut rng);
            let vals: Vec<f64> = inner.iter().map(|&k| x[k]).collect();
            for (a, b) in acc.iter_mut().zip(empirical_variogram(&vals, &coords, n_bins, 16.0).unwrap()) {
                *a += b.semivariance.unwrap() / n_rep as f64;
            }
        }
        assert!(acc[0] < acc[2] && acc[2] < acc[4], "{acc:?}");
        let sill = acc[n_bins - 1];
        assert!((sill - s * s).abs() < 0.2 * s * s, "{acc:?}");
    }
}
