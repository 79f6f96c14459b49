//! The "Max" step: sitewise penalized maximum likelihood in transformed
//! coordinates `(psi, tau, phi)` and the observed information at the optimum.
//!
//! The sitewise objective is the point process log-likelihood evaluated at
//! `link_inverse(eta)` plus the shifted Beta(4,4) log prior at `xi`. Its
//! negative Hessian at the maximum is the precision of the Gaussian
//! approximation consumed by the Smooth step, so no Jacobian correction is
//! needed.

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::evt::{ppp_log_likelihood, ppp_log_likelihood_grad, ExceedanceSet, PpParameters};
use crate::link::{h_inverse_derivative, link_forward, link_inverse, TransformedParameters};
use crate::optim::{fd_hessian, maximize, Objective, OptimOptions};
use crate::priors::{beta_shape_log_prior, beta_shape_log_prior_derivative};
use crate::stats::quantile_sorted;

/// One site's time series.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteSeries {
    pub site_id: u64,
    pub lon: f64,
    pub lat: f64,
    pub values: Vec<f64>,
}

/// Result of a sitewise fit.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteFit {
    pub site_id: u64,
    pub lon: f64,
    pub lat: f64,
    pub eta_hat: TransformedParameters,
    /// Observed information in `(psi, tau, phi)`; symmetric positive definite.
    pub info: Matrix3<f64>,
    pub n_exceedances: usize,
    pub threshold: f64,
    pub n_block: f64,
    pub log_likelihood: f64,
    pub hessian_repaired: bool,
    pub start_disagreement: bool,
}

impl SiteFit {
    pub fn record(&self) -> FitRecord {
        FitRecord {
            site_id: self.site_id,
            lon: self.lon,
            lat: self.lat,
            threshold: self.threshold,
            n_exceedances: self.n_exceedances,
            eta_hat: self.eta_hat,
            info: self.info,
        }
    }

    /// Standard errors from the diagonal of `info^{-1}`.
    pub fn standard_errors(&self) -> [f64; 3] {
        let cov = self.info.try_inverse().unwrap_or_else(Matrix3::zeros);
        [cov[(0, 0)].sqrt(), cov[(1, 1)].sqrt(), cov[(2, 2)].sqrt()]
    }
}

/// The part of a [`SiteFit`] that is written to disk and consumed by the
/// Smooth step.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRecord {
    pub site_id: u64,
    pub lon: f64,
    pub lat: f64,
    pub threshold: f64,
    pub n_exceedances: usize,
    pub eta_hat: TransformedParameters,
    pub info: Matrix3<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub threshold_quantile: f64,
    pub n_block: f64,
    pub min_exceedances: usize,
    /// Extra jittered starts used to check that the optimum does not depend
    /// on initialization; disagreement beyond 1e-4 sets `start_disagreement`.
    pub jitter_starts: usize,
}

impl FitOptions {
    pub fn new(threshold_quantile: f64, n_block: f64, min_exceedances: usize) -> Self {
        Self { threshold_quantile, n_block, min_exceedances, jitter_starts: 0 }
    }
}

/// Empirical `q`-quantile (type 7) of the strictly positive values.
pub fn select_threshold(series: &SiteSeries, q: f64) -> Result<f64> {
    if !(q > 0.0 && q < 1.0) {
        return Err(Error::invalid(format!("threshold quantile must lie in (0,1), got {q}")));
    }
    let mut pos: Vec<f64> = series.values.iter().copied().filter(|&v| v > 0.0).collect();
    if pos.is_empty() {
        return Err(Error::DegenerateSite { site: series.site_id, reason: "no positive values".into() });
    }
    pos.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&pos, q))
}

/// Sitewise objective in transformed coordinates.
#[derive(Debug, Clone)]
pub struct SiteObjective {
    exceedances: ExceedanceSet,
}

impl SiteObjective {
    pub fn new(exceedances: ExceedanceSet) -> Self {
        Self { exceedances }
    }

    pub fn exceedances(&self) -> &ExceedanceSet {
        &self.exceedances
    }

    fn params(x: &[f64]) -> Option<PpParameters> {
        link_inverse(&TransformedParameters::new(x[0], x[1], x[2])).ok().filter(|p| p.sigma > 0.0 && p.mu > 0.0)
    }
}

impl Objective for SiteObjective {
    fn value(&self, x: &[f64]) -> f64 {
        match Self::params(x) {
            Some(p) => {
                let ll = ppp_log_likelihood(&self.exceedances, &p);
                if ll == f64::NEG_INFINITY {
                    ll
                } else {
                    ll + beta_shape_log_prior(p.xi)
                }
            }
            None => f64::NEG_INFINITY,
        }
    }

    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        let p = Self::params(x)?;
        let [gm, gs, gx] = ppp_log_likelihood_grad(&self.exceedances, &p)?;
        Some(vec![
            p.mu * gm + p.sigma * gs,
            p.sigma * gs,
            h_inverse_derivative(x[2]) * (gx + beta_shape_log_prior_derivative(p.xi)),
        ])
    }
}

/// Starting values: GP mean-excess moment match with `xi = 0.05`, mapped
/// through the point process parametrization and the link.
fn initial_point(e: &ExceedanceSet) -> [f64; 3] {
    let xi0 = 0.05;
    let u = e.threshold();
    let mean_excess = e.exceedances().iter().map(|y| y - u).sum::<f64>() / e.len() as f64;
    let kappa = (mean_excess * (1.0 - xi0)).max(1e-8);
    let rate = e.len() as f64 / e.n_block();
    let sigma = kappa * rate.powf(xi0);
    let mut mu = u - (kappa - sigma) / xi0;
    if !(mu > 0.0) {
        mu = 0.5 * u.max(1e-8);
    }
    link_forward(&PpParameters { mu, sigma, xi: xi0 })
        .map(|t| t.to_array())
        .unwrap_or([mu.max(1e-8).ln(), (sigma / mu.max(1e-8)).ln(), 0.05])
}

const JITTER: [[f64; 3]; 6] = [
    [0.15, -0.2, 0.1],
    [-0.15, 0.2, -0.1],
    [0.1, 0.1, 0.15],
    [-0.1, -0.25, -0.15],
    [0.25, 0.0, 0.05],
    [-0.2, 0.15, 0.0],
];

/// Fit one site with default options.
pub fn fit_site(series: &SiteSeries, q: f64, n_block: f64, min_exceedances: usize) -> Result<SiteFit> {
    fit_site_with(series, &FitOptions::new(q, n_block, min_exceedances))
}

pub fn fit_site_with(series: &SiteSeries, opts: &FitOptions) -> Result<SiteFit> {
    if series.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("site {} has non-finite values", series.site_id)));
    }
    let threshold = select_threshold(series, opts.threshold_quantile)?;
    let exc = ExceedanceSet::from_series(&series.values, threshold, opts.n_block)?;
    if exc.len() < opts.min_exceedances {
        return Err(Error::TooFewExceedances { site: series.site_id, count: exc.len(), min: opts.min_exceedances });
    }
    let obj = SiteObjective::new(exc);
    let x0 = initial_point(obj.exceedances());
    let optim = OptimOptions::default();

    let mut best = maximize(&obj, &x0, &optim);
    let mut attempt = 0;
    while !best.converged && attempt < JITTER.len() {
        let start: Vec<f64> = x0.iter().zip(JITTER[attempt]).map(|(a, d)| a + d).collect();
        let r = maximize(&obj, &start, &optim);
        if r.converged || r.value > best.value {
            best = r;
        }
        attempt += 1;
    }
    if !best.converged {
        return Err(Error::ConvergenceFailure(format!(
            "site {}: scaled gradient {:e} after restarts",
            series.site_id, best.scaled_gradient
        )));
    }

    let mut start_disagreement = false;
    for k in 0..opts.jitter_starts.min(JITTER.len()) {
        let start: Vec<f64> = x0.iter().zip(JITTER[k]).map(|(a, d)| a + d).collect();
        let r = maximize(&obj, &start, &optim);
        let diff = r.x.iter().zip(&best.x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        if !r.converged || diff > 1e-4 {
            start_disagreement = true;
        }
    }

    let (info, repaired) = observed_information(|x| obj.value(x), &best.x)?;
    Ok(SiteFit {
        site_id: series.site_id,
        lon: series.lon,
        lat: series.lat,
        eta_hat: TransformedParameters::from_array([best.x[0], best.x[1], best.x[2]]),
        info: Matrix3::from_iterator(info.iter().copied()),
        n_exceedances: obj.exceedances().len(),
        threshold,
        n_block: opts.n_block,
        log_likelihood: best.value,
        hessian_repaired: repaired,
        start_disagreement,
    })
}

/// Negative finite-difference Hessian at `x` (relative step 1e-4), with
/// eigenvalues floored at `1e-8` times the largest when not positive definite.
/// The flag reports whether flooring happened.
pub fn observed_information<F: Fn(&[f64]) -> f64>(f: F, x: &[f64]) -> Result<(DMatrix<f64>, bool)> {
    let info = -fd_hessian(f, x, 1e-4);
    if info.iter().any(|v| !v.is_finite()) {
        return Err(Error::ConvergenceFailure("non-finite curvature at the optimum".into()));
    }
    let eig = SymmetricEigen::new(info.clone());
    let max_ev = eig.eigenvalues.max();
    if !(max_ev > 0.0) {
        return Err(Error::ConvergenceFailure("curvature has no positive direction".into()));
    }
    if eig.eigenvalues.min() > 0.0 {
        return Ok((info, false));
    }
    let floor = 1e-8 * max_ev;
    let d = eig.eigenvalues.map(|v| v.max(floor));
    let repaired = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    Ok(((&repaired + repaired.transpose()) * 0.5, true))
}

/// Sup-distance, per coordinate, between the normalized likelihood slice and
/// the Gaussian approximation, relative to the Gaussian peak height.
///
/// Each coordinate is varied over `mode ± halfwidth` conditional standard
/// deviations (`1 / sqrt(info_jj)`) with the others held at the mode; both
/// curves are normalized by trapezoidal quadrature on the same grid.
pub fn gaussian_approximation_discrepancy<F: Fn(&[f64]) -> f64>(
    f: F,
    mode: &[f64],
    info: &DMatrix<f64>,
    halfwidth: f64,
) -> Vec<f64> {
    const N_GRID: usize = 801;
    let f0 = f(mode);
    let mut out = Vec::with_capacity(mode.len());
    let mut x = mode.to_vec();
    for j in 0..mode.len() {
        let sd = 1.0 / info[(j, j)].sqrt();
        let step = 2.0 * halfwidth * sd / (N_GRID - 1) as f64;
        let mut like = Vec::with_capacity(N_GRID);
        let mut gauss = Vec::with_capacity(N_GRID);
        for k in 0..N_GRID {
            let d = -halfwidth * sd + k as f64 * step;
            x[j] = mode[j] + d;
            let v = f(&x) - f0;
            like.push(if v.is_finite() { v.exp() } else { 0.0 });
            gauss.push((-0.5 * d * d / (sd * sd)).exp());
        }
        x[j] = mode[j];
        let trap = |v: &[f64]| step * (v.iter().sum::<f64>() - 0.5 * (v[0] + v[N_GRID - 1]));
        let (zl, zg) = (trap(&like), trap(&gauss));
        let peak = gauss.iter().fold(0.0f64, |m, v| m.max(*v)) / zg;
        let sup = like.iter().zip(&gauss).fold(0.0f64, |m, (l, g)| m.max((l / zl - g / zg).abs()));
        out.push(sup / peak);
    }
    out
}

/// Gaussian-approximation diagnostic for a fitted site.
pub fn gaussian_likelihood_check(series: &SiteSeries, fit: &SiteFit, grid_halfwidth: f64) -> Result<[f64; 3]> {
    let exc = ExceedanceSet::from_series(&series.values, fit.threshold, fit.n_block)?;
    let obj = SiteObjective::new(exc);
    let info = DMatrix::from_iterator(3, 3, fit.info.iter().copied());
    let d = gaussian_approximation_discrepancy(|x| obj.value(x), &fit.eta_hat.to_array(), &info, grid_halfwidth);
    Ok([d[0], d[1], d[2]])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Exclusion {
    pub site_id: u64,
    pub lon: f64,
    pub lat: f64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct MaxStepResult {
    /// Successful fits, ordered by `site_id`.
    pub fits: Vec<SiteFit>,
    /// Sites that could not be fitted, ordered by `site_id`.
    pub exclusions: Vec<Exclusion>,
}

/// Fit every site independently (in parallel). Fails only when no site fits.
pub fn fit_all_sites(sites: &[SiteSeries], opts: &FitOptions) -> Result<MaxStepResult> {
    if sites.is_empty() {
        return Err(Error::invalid("dataset has no sites"));
    }
    let results: Vec<(usize, Result<SiteFit>)> = sites.par_iter().enumerate().map(|(i, s)| (i, fit_site_with(s, opts))).collect();
    let mut fits = Vec::new();
    let mut exclusions = Vec::new();
    for (i, r) in results {
        match r {
            Ok(f) => fits.push(f),
            Err(e) => exclusions.push(Exclusion {
                site_id: sites[i].site_id,
                lon: sites[i].lon,
                lat: sites[i].lat,
                reason: e.to_string(),
            }),
        }
    }
    if fits.is_empty() {
        return Err(Error::AllSitesFailed(sites.len()));
    }
    fits.sort_by_key(|f| f.site_id);
    exclusions.sort_by_key(|e| e.site_id);
    Ok(MaxStepResult { fits, exclusions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::simulate_series;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn series(values: Vec<f64>) -> SiteSeries {
        SiteSeries { site_id: 7, lon: 0.0, lat: 0.0, values }
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(select_threshold(&series(vec![0.0, 0.0, 1.0, 2.0, 3.0, 4.0]), 0.75).unwrap(), 3.25);
        assert_eq!(select_threshold(&series(vec![2.5; 9]), 0.3).unwrap(), 2.5);
        assert_eq!(select_threshold(&series(vec![0.0, 0.0, 0.0, 5.0]), 0.9).unwrap(), 5.0);
        assert!(matches!(select_threshold(&series(vec![0.0; 4]), 0.5), Err(Error::DegenerateSite { .. })));
        assert!(select_threshold(&series(vec![1.0]), 1.0).is_err());
    }

    #[test]
    fn too_few_exceedances_is_reported() {
        let mut v = vec![0.0; 100];
        for (k, x) in [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0].iter().enumerate() {
            v[k] = *x;
        }
        let err = fit_site(&series(v), 0.75, 1.0, 10).unwrap_err();
        assert!(matches!(err, Error::TooFewExceedances { count: 3, min: 10, .. }));
    }

    #[test]
    fn toy_normal_information_equals_sample_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &m in &[10usize, 100, 1000] {
            let w: Vec<f64> = (0..m).map(|_| Normal::new(1.3, 1.0).unwrap().sample(&mut rng)).collect();
            let ll = |g: &[f64]| -0.5 * w.iter().map(|x| (x - g[0]).powi(2)).sum::<f64>();
            let r = maximize(&ll, &[0.0], &OptimOptions::default());
            let mean = w.iter().sum::<f64>() / m as f64;
            assert!((r.x[0] - mean).abs() < 1e-8);
            let (info, repaired) = observed_information(ll, &r.x).unwrap();
            assert!(!repaired);
            assert!((info[(0, 0)] - m as f64).abs() / (m as f64) < 1e-6);
        }
    }

    #[test]
    fn gaussian_toy_has_zero_discrepancy() {
        let q = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let mode = [0.3, -1.0, 0.1];
        let f = |x: &[f64]| {
            let d = nalgebra::DVector::from_iterator(3, x.iter().zip(&mode).map(|(a, b)| a - b));
            -0.5 * (d.transpose() * &q * &d)[0]
        };
        let dist = gaussian_approximation_discrepancy(f, &mode, &q, 4.0);
        assert!(dist.iter().all(|&d| d < 1e-10), "{dist:?}");
    }

    #[test]
    fn non_pd_curvature_is_repaired() {
        // saddle: curvature -1 along one axis
        let f = |x: &[f64]| -(x[0] * x[0]) + 0.5 * x[1] * x[1];
        let (info, repaired) = observed_information(f, &[0.0, 0.0]).unwrap();
        assert!(repaired);
        let eig = SymmetricEigen::new(info);
        assert!(eig.eigenvalues.min() > 0.0);
    }

    #[test]
    fn simulated_site_recovers_truth() {
        let truth = PpParameters::new(10.0, 5.0, 0.1).unwrap();
        let eta = link_forward(&truth).unwrap().to_array();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let values = simulate_series(&truth, 7305, 365.25, &mut rng).into_iter().map(|v| v.max(0.0)).collect();
        let s = SiteSeries { site_id: 1, lon: 0.0, lat: 0.0, values };
        let mut opts = FitOptions::new(0.75, 20.0, 15);
        opts.jitter_starts = 5;
        let fit = fit_site_with(&s, &opts).unwrap();
        assert!(!fit.start_disagreement);
        assert!(!fit.hessian_repaired);
        let se = fit.standard_errors();
        let est = fit.eta_hat.to_array();
        for j in 0..3 {
            assert!((est[j] - eta[j]).abs() < 3.0 * se[j], "coord {j}: {} vs {} (se {})", est[j], eta[j], se[j]);
        }
        let info = fit.info;
        assert!((info - info.transpose()).abs().max() < 1e-10);
        assert!(info.cholesky().is_some());
    }

    #[test]
    fn zeros_do_not_change_the_fit() {
        let truth = PpParameters::new(10.0, 5.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let raw: Vec<f64> = simulate_series(&truth, 7305, 365.25, &mut rng).into_iter().map(|v| v.max(0.0)).collect();
        let a = fit_site(&SiteSeries { site_id: 1, lon: 0.0, lat: 0.0, values: raw.clone() }, 0.75, 20.0, 15).unwrap();
        let mut padded = raw;
        padded.extend(std::iter::repeat(0.0).take(500));
        let b = fit_site(&SiteSeries { site_id: 1, lon: 0.0, lat: 0.0, values: padded }, 0.75, 20.0, 15).unwrap();
        assert_eq!(a.threshold, b.threshold);
        assert_eq!(a.eta_hat, b.eta_hat);
    }

    #[test]
    fn fit_all_sites_excludes_and_is_order_independent() {
        let truth = PpParameters::new(10.0, 5.0, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let good: Vec<f64> = simulate_series(&truth, 7305, 365.25, &mut rng).into_iter().map(|v| v.max(0.0)).collect();
        let sites = vec![
            SiteSeries { site_id: 3, lon: 0.0, lat: 0.0, values: good.clone() },
            SiteSeries { site_id: 1, lon: 1.0, lat: 0.0, values: vec![0.0; 7305] },
        ];
        let opts = FitOptions::new(0.75, 20.0, 15);
        let r = fit_all_sites(&sites, &opts).unwrap();
        assert_eq!(r.fits.len(), 1);
        assert_eq!(r.exclusions.len(), 1);
        assert_eq!(r.exclusions[0].site_id, 1);

        let more: Vec<SiteSeries> = (0..4u64)
            .map(|k| {
                let v = simulate_series(&truth, 7305, 365.25, &mut rng).into_iter().map(|v| v.max(0.0)).collect();
                SiteSeries { site_id: 10 + k, lon: k as f64, lat: 0.0, values: v }
            })
            .collect();
        let mut rev = more.clone();
        rev.reverse();
        let a = fit_all_sites(&more, &opts).unwrap();
        let b = fit_all_sites(&rev, &opts).unwrap();
        assert_eq!(a.fits, b.fits);

        let all_bad = vec![SiteSeries { site_id: 1, lon: 0.0, lat: 0.0, values: vec![0.0; 10] }];
        assert!(matches!(fit_all_sites(&all_bad, &opts), Err(Error::AllSitesFailed(1))));
    }
}
