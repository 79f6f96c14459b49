//! Prior densities: the shifted Beta(4,4) on the GEV shape and its pushforward
//! onto `phi`, penalized-complexity priors for nugget standard deviations and
//! Matérn `(s, rho)` pairs, and the Gaussian intercept prior.
//!
//! All functions return log densities and `-inf` outside their support.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::link::{log_one_minus_x_of_phi, log_x_of_phi, LINK};

/// `log(1 / B(4,4)) = log 140`.
const LOG_INV_BETA_4_4: f64 = 4.941642422609304;

/// Rate parameters of the hyperparameter priors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub lambda_sigma_psi: f64,
    pub lambda_sigma_tau: f64,
    pub lambda_sigma_phi: f64,
    pub lambda_s_psi: f64,
    pub lambda_rho_psi: f64,
    pub lambda_s_tau: f64,
    pub lambda_rho_tau: f64,
    /// Variance of the Gaussian intercept priors.
    pub sigma_beta_sq: f64,
}

impl PriorConfig {
    /// Weakly informative defaults: `P(sigma > 1) = 0.05` for each nugget,
    /// `P(s > 2) = 0.05`, and `P(rho < diameter / 10) = 0.05`.
    pub fn default_for_domain(diameter: f64) -> Self {
        let lambda_sigma = exponential_rate_for_upper_tail(1.0, 0.05).expect("valid constants");
        let lambda_s = exponential_rate_for_upper_tail(2.0, 0.05).expect("valid constants");
        let lambda_rho = range_rate_for_lower_tail(diameter / 10.0, 0.05).unwrap_or(1.0);
        Self {
            lambda_sigma_psi: lambda_sigma,
            lambda_sigma_tau: lambda_sigma,
            lambda_sigma_phi: lambda_sigma,
            lambda_s_psi: lambda_s,
            lambda_rho_psi: lambda_rho,
            lambda_s_tau: lambda_s,
            lambda_rho_tau: lambda_rho,
            sigma_beta_sq: 100.0 * 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rates = [
            self.lambda_sigma_psi,
            self.lambda_sigma_tau,
            self.lambda_sigma_phi,
            self.lambda_s_psi,
            self.lambda_rho_psi,
            self.lambda_s_tau,
            self.lambda_rho_tau,
            self.sigma_beta_sq,
        ];
        if rates.iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::invalid(format!("prior rates must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Log density of the Beta(4,4) distribution shifted to `(-0.5, 0.5)`.
pub fn beta_shape_log_prior(xi: f64) -> f64 {
    if !(xi > -0.5 && xi < 0.5) {
        return f64::NEG_INFINITY;
    }
    LOG_INV_BETA_4_4 + 3.0 * ((0.5 + xi).ln() + (0.5 - xi).ln())
}

/// Derivative of [`beta_shape_log_prior`] with respect to `xi`.
pub fn beta_shape_log_prior_derivative(xi: f64) -> f64 {
    3.0 / (0.5 + xi) - 3.0 / (0.5 - xi)
}

/// Log density of `phi = h(xi)` when `xi` has the shifted Beta(4,4) prior.
///
/// Evaluated in closed form with the tails of `h^{-1}` computed on the log
/// scale, so the result is finite across the practical real line.
pub fn phi_log_prior(phi: f64) -> f64 {
    if !phi.is_finite() {
        return f64::NEG_INFINITY;
    }
    let (a, b, c) = (LINK.a_phi, LINK.b_phi, LINK.c_phi);
    let w = (phi - a) / b;
    LOG_INV_BETA_4_4 - (b * c).ln() + (4.0 - c) * log_x_of_phi(phi) + 3.0 * log_one_minus_x_of_phi(phi) + w
        - w.exp()
}

/// Derivative of [`phi_log_prior`] with respect to `phi`.
pub fn phi_log_prior_derivative(phi: f64) -> f64 {
    let (a, b, c) = (LINK.a_phi, LINK.b_phi, LINK.c_phi);
    let w = (phi - a) / b;
    let lx = log_x_of_phi(phi);
    let l1x = log_one_minus_x_of_phi(phi);
    // d/dphi [(4-c) log x + 3 log(1-x)] = [(4-c)/x - 3/(1-x)] dx/dphi,
    // with dx/dphi = x^{1-c} exp(w - e^w) / (b c)
    let log_dx = (1.0 - c) * lx + w - w.exp() - (b * c).ln();
    (4.0 - c) * (log_dx - lx).exp() - 3.0 * (log_dx - l1x).exp() + (1.0 - w.exp()) / b
}

/// Exponential PC prior on a nugget standard deviation: `log(lambda) - lambda * sigma`.
pub fn pc_prior_nugget_log(sigma: f64, lambda: f64) -> f64 {
    if !(sigma > 0.0) || !(lambda > 0.0) {
        return f64::NEG_INFINITY;
    }
    lambda.ln() - lambda * sigma
}

/// Joint PC prior on Matérn marginal SD and range:
/// `lambda_s lambda_rho rho^{-2} exp(-lambda_s s - lambda_rho / rho)`.
pub fn pc_prior_matern_log(s: f64, rho: f64, lambda_s: f64, lambda_rho: f64) -> f64 {
    if !(s > 0.0 && rho > 0.0 && lambda_s > 0.0 && lambda_rho > 0.0) {
        return f64::NEG_INFINITY;
    }
    lambda_s.ln() + lambda_rho.ln() - 2.0 * rho.ln() - lambda_s * s - lambda_rho / rho
}

/// Log density of the Gaussian intercept prior `Normal(0, var)`.
pub fn intercept_log_prior(beta: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + beta * beta / var)
}

/// Rate `lambda` of an exponential variable with `P(X > u0) = alpha`.
pub fn exponential_rate_for_upper_tail(u0: f64, alpha: f64) -> Result<f64> {
    check_tail(u0, alpha)?;
    Ok(-alpha.ln() / u0)
}

/// Rate `lambda_rho` of the range prior with `P(rho < rho0) = alpha`.
pub fn range_rate_for_lower_tail(rho0: f64, alpha: f64) -> Result<f64> {
    check_tail(rho0, alpha)?;
    Ok(-alpha.ln() * rho0)
}

fn check_tail(u0: f64, alpha: f64) -> Result<()> {
    if !(u0 > 0.0 && u0.is_finite()) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::invalid(format!("tail calibration needs u0 > 0 and alpha in (0,1), got {u0}, {alpha}")));
    }
    Ok(())
}
