//! Univariate extreme-value distributions and the Poisson point process
//! likelihood for threshold exceedances.
//!
//! All three families share the bracket `1 + xi * (y - mu) / sigma`, which has
//! a removable singularity at `xi = 0`. Below [`XI_ZERO_TOL`] the Gumbel /
//! exponential branch is used; for `|xi| < 1e-8` the ratio
//! `log(1 + xi * z) / xi` is evaluated from its Taylor series.

use crate::error::{Error, Result};
use crate::priors::beta_shape_log_prior;

/// Shape values with `|xi|` below this use the `xi = 0` limit.
pub const XI_ZERO_TOL: f64 = 1e-12;

const XI_SERIES_TOL: f64 = 1e-8;

/// Location, scale and shape of a GEV distribution (equivalently, of the
/// limiting Poisson point process).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpParameters {
    pub mu: f64,
    pub sigma: f64,
    pub xi: f64,
}

impl PpParameters {
    pub fn new(mu: f64, sigma: f64, xi: f64) -> Result<Self> {
        let p = Self { mu, sigma, xi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mu.is_finite() && self.sigma.is_finite() && self.xi.is_finite()) {
            return Err(Error::invalid(format!("non-finite GEV parameters {self:?}")));
        }
        if self.sigma <= 0.0 {
            return Err(Error::invalid(format!("GEV scale must be positive, got {}", self.sigma)));
        }
        Ok(())
    }

    /// `1 + xi * (y - mu) / sigma`, the bracket whose positivity defines the support.
    #[inline]
    fn bracket(&self, y: f64) -> f64 {
        1.0 + self.xi * (y - self.mu) / self.sigma
    }
}

/// `log(1 + xi * z) / xi`, continuous through `xi = 0` where it equals `z`.
#[inline]
pub(crate) fn log1p_ratio(xi: f64, z: f64) -> f64 {
    if xi.abs() < XI_ZERO_TOL {
        z
    } else if xi.abs() < XI_SERIES_TOL {
        let v = xi * z;
        z * (1.0 - v / 2.0 + v * v / 3.0)
    } else {
        (xi * z).ln_1p() / xi
    }
}

/// Derivative of [`log1p_ratio`] with respect to `xi`.
#[inline]
fn log1p_ratio_dxi(xi: f64, z: f64) -> f64 {
    let v = xi * z;
    if v.abs() < 1e-3 {
        // z^2 * sum_j (-1)^{j+1} (j+1) v^j / (j+2)
        let mut acc = 0.0;
        let mut pow = 1.0;
        for j in 0..8 {
            let sign = if j % 2 == 0 { -1.0 } else { 1.0 };
            acc += sign * (j as f64 + 1.0) * pow / (j as f64 + 2.0);
            pow *= v;
        }
        z * z * acc
    } else {
        (v / (1.0 + v) - v.ln_1p()) / (xi * xi)
    }
}

/// GEV distribution function `G(z)`.
///
/// Returns 0 below the lower endpoint (`xi > 0`) and 1 above the upper
/// endpoint (`xi < 0`).
pub fn gev_cdf(z: f64, p: &PpParameters) -> Result<f64> {
    p.validate()?;
    if !z.is_finite() {
        return Err(Error::invalid(format!("non-finite GEV argument {z}")));
    }
    let t = (z - p.mu) / p.sigma;
    if p.xi.abs() >= XI_ZERO_TOL && p.bracket(z) <= 0.0 {
        return Ok(if p.xi > 0.0 { 0.0 } else { 1.0 });
    }
    Ok((-(-log1p_ratio(p.xi, t)).exp()).exp())
}

/// Inverse of the GEV distribution function given `y = -log G(z) > 0`.
pub(crate) fn gev_quantile_from_neglog(y: f64, p: &PpParameters) -> f64 {
    if p.xi.abs() < XI_ZERO_TOL {
        p.mu - p.sigma * y.ln()
    } else {
        p.mu + p.sigma * (-p.xi * y.ln()).exp_m1() / p.xi
    }
}

/// Return level `z` with `G(z) = 1 - p_exc`, i.e. the level exceeded once
/// every `1 / p_exc` blocks on average.
pub fn gev_return_level(p_exc: f64, p: &PpParameters) -> Result<f64> {
    p.validate()?;
    if !(p_exc > 0.0 && p_exc < 1.0) {
        return Err(Error::invalid(format!("exceedance probability must lie in (0,1), got {p_exc}")));
    }
    Ok(gev_quantile_from_neglog(-(-p_exc).ln_1p(), p))
}

/// Generalized Pareto distribution function `H(y)` of the excess `y >= 0`.
pub fn gp_cdf(y: f64, kappa_u: f64, xi: f64) -> Result<f64> {
    if !(y.is_finite() && kappa_u.is_finite() && xi.is_finite()) {
        return Err(Error::invalid("non-finite GP argument"));
    }
    if y < 0.0 {
        return Err(Error::invalid(format!("GP excess must be nonnegative, got {y}")));
    }
    if kappa_u <= 0.0 {
        return Err(Error::invalid(format!("GP scale must be positive, got {kappa_u}")));
    }
    let t = y / kappa_u;
    if xi.abs() >= XI_ZERO_TOL && 1.0 + xi * t <= 0.0 {
        return Ok(1.0);
    }
    Ok(-(-log1p_ratio(xi, t)).exp_m1())
}

/// Log intensity `log lambda(y)` of the limiting point process. The intensity
/// is homogeneous in time, so the time coordinate does not enter.
///
/// Returns `-inf` outside the support `1 + xi (y - mu) / sigma > 0`.
pub fn ppp_log_intensity(y: f64, p: &PpParameters) -> f64 {
    let t = (y - p.mu) / p.sigma;
    if p.xi.abs() < XI_ZERO_TOL {
        return -p.sigma.ln() - t;
    }
    let w = p.bracket(y);
    if !(w > 0.0) {
        return f64::NEG_INFINITY;
    }
    -p.sigma.ln() - log1p_ratio(p.xi, t) - (p.xi * t).ln_1p()
}

/// Threshold exceedances at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct ExceedanceSet {
    threshold: f64,
    exceedances: Vec<f64>,
    n_total: usize,
    n_block: f64,
}

impl ExceedanceSet {
    pub fn new(threshold: f64, exceedances: Vec<f64>, n_total: usize, n_block: f64) -> Result<Self> {
        if !threshold.is_finite() {
            return Err(Error::invalid("threshold must be finite"));
        }
        if let Some(bad) = exceedances.iter().find(|&&y| !(y > threshold) || !y.is_finite()) {
            return Err(Error::invalid(format!(
                "exceedance {bad} is not strictly above the threshold {threshold}"
            )));
        }
        if n_total == 0 || exceedances.len() > n_total {
            return Err(Error::invalid(format!(
                "{} exceedances inconsistent with {n_total} total replicates",
                exceedances.len()
            )));
        }
        if !(n_block > 0.0 && n_block.is_finite()) {
            return Err(Error::invalid(format!("n_block must be positive, got {n_block}")));
        }
        Ok(Self { threshold, exceedances, n_total, n_block })
    }

    /// Exceedances of `threshold` among `values`.
    pub fn from_series(values: &[f64], threshold: f64, n_block: f64) -> Result<Self> {
        let exc = values.iter().copied().filter(|&v| v > threshold).collect();
        Self::new(threshold, exc, values.len(), n_block)
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
    pub fn exceedances(&self) -> &[f64] {
        &self.exceedances
    }
    pub fn len(&self) -> usize {
        self.exceedances.len()
    }
    pub fn is_empty(&self) -> bool {
        self.exceedances.is_empty()
    }
    pub fn n_total(&self) -> usize {
        self.n_total
    }
    pub fn n_block(&self) -> f64 {
        self.n_block
    }
}

/// Poisson point process log-likelihood of exceedances above `u`:
///
/// `-n_block * (1 + xi (u - mu) / sigma)^(-1/xi) + sum_j log lambda(y_j)`.
///
/// Returns `-inf` when the threshold or any exceedance falls outside the support.
pub fn ppp_log_likelihood(e: &ExceedanceSet, p: &PpParameters) -> f64 {
    let tu = (e.threshold - p.mu) / p.sigma;
    if p.xi.abs() >= XI_ZERO_TOL && !(p.bracket(e.threshold) > 0.0) {
        return f64::NEG_INFINITY;
    }
    let mut ll = -e.n_block * (-log1p_ratio(p.xi, tu)).exp();
    for &y in &e.exceedances {
        let li = ppp_log_intensity(y, p);
        if li == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        ll += li;
    }
    ll
}

/// Analytic gradient of [`ppp_log_likelihood`] with respect to `(mu, sigma, xi)`.
///
/// `None` outside the support.
pub fn ppp_log_likelihood_grad(e: &ExceedanceSet, p: &PpParameters) -> Option<[f64; 3]> {
    let (mu, sigma, xi) = (p.mu, p.sigma, p.xi);
    let zu = (e.threshold - mu) / sigma;
    let wu = 1.0 + xi * zu;
    if !(wu > 0.0) && xi.abs() >= XI_ZERO_TOL {
        return None;
    }
    let wu = if xi.abs() < XI_ZERO_TOL { 1.0 } else { wu };
    let t = (-log1p_ratio(xi, zu)).exp();
    let n = e.n_block;
    let mut g = [
        -n * t / (sigma * wu),
        -n * t * zu / (sigma * wu),
        n * t * log1p_ratio_dxi(xi, zu),
    ];
    for &y in &e.exceedances {
        let z = (y - mu) / sigma;
        let w = if xi.abs() < XI_ZERO_TOL { 1.0 } else { 1.0 + xi * z };
        if !(w > 0.0) {
            return None;
        }
        g[0] += (1.0 + xi) / (sigma * w);
        g[1] += -1.0 / sigma + (1.0 + xi) * z / (sigma * w);
        g[2] += -log1p_ratio_dxi(xi, z) - z / w;
    }
    Some(g)
}

/// Point process log-likelihood plus the shifted Beta(4,4) log prior on `xi`.
pub fn generalized_log_likelihood(e: &ExceedanceSet, p: &PpParameters) -> f64 {
    let prior = beta_shape_log_prior(p.xi);
    if prior == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    ppp_log_likelihood(e, p) + prior
}
