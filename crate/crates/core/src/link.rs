//! The multivariate link `g(mu, sigma, xi) = (log mu, log(sigma / mu), h(xi))`.

use crate::error::{Error, Result};
use crate::evt::PpParameters;

/// Fixed constants of the shape transform `h`, as published (rounded).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConstants {
    pub c_phi: f64,
    pub b_phi: f64,
    pub a_phi: f64,
}

pub const LINK: LinkConstants = LinkConstants { c_phi: 0.8, b_phi: 0.39563, a_phi: 0.062376 };

/// Latent-scale parameters `(psi, tau, phi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformedParameters {
    pub psi: f64,
    pub tau: f64,
    pub phi: f64,
}

impl TransformedParameters {
    pub fn new(psi: f64, tau: f64, phi: f64) -> Self {
        Self { psi, tau, phi }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.psi, self.tau, self.phi]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self { psi: a[0], tau: a[1], phi: a[2] }
    }
}

/// `phi = a + b log(-log(1 - (xi + 0.5)^c))`, strictly increasing on `(-0.5, 0.5)`.
pub fn h(xi: f64) -> Result<f64> {
    if !(xi > -0.5 && xi < 0.5) {
        return Err(Error::invalid(format!("shape {xi} outside (-0.5, 0.5)")));
    }
    let LinkConstants { c_phi, b_phi, a_phi } = LINK;
    let x = xi + 0.5;
    let xc = x.powf(c_phi);
    // -log(1 - x^c), computed from whichever side is accurate
    let inner = if xc > 0.5 { -(-(c_phi * x.ln()).exp_m1()).ln() } else { -(-xc).ln_1p() };
    Ok(a_phi + b_phi * inner.ln())
}

/// `xi = (1 - exp(-exp((phi - a) / b)))^(1/c) - 0.5`.
///
/// The result saturates at `0.5` in floating point for `phi` beyond roughly 1.5.
pub fn h_inverse(phi: f64) -> Result<f64> {
    if !phi.is_finite() {
        return Err(Error::invalid(format!("non-finite transformed shape {phi}")));
    }
    Ok(log_x_of_phi(phi).exp() - 0.5)
}

/// `log(h^{-1}(phi) + 0.5)`.
pub(crate) fn log_x_of_phi(phi: f64) -> f64 {
    let LinkConstants { c_phi, b_phi, a_phi } = LINK;
    let w = (phi - a_phi) / b_phi;
    let lg = if w < -30.0 {
        // log(1 - exp(-e^w)) = w - e^w / 2 + O(e^{2w})
        w - 0.5 * w.exp()
    } else {
        (-(-w.exp()).exp_m1()).ln()
    };
    lg / c_phi
}

/// `log(0.5 - h^{-1}(phi))`, accurate for large `phi` where the difference underflows.
pub(crate) fn log_one_minus_x_of_phi(phi: f64) -> f64 {
    let LinkConstants { c_phi, b_phi, a_phi } = LINK;
    let w = (phi - a_phi) / b_phi;
    let ew = w.exp();
    let lp = -ew; // log p, p = exp(-e^w)
    if lp < -30.0 {
        // 1 - (1 - p)^(1/c) = p / c + O(p^2)
        lp - c_phi.ln()
    } else {
        let p = lp.exp();
        (-((-p).ln_1p() / c_phi).exp_m1()).ln()
    }
}

/// Derivative `d h^{-1} / d phi`.
pub fn h_inverse_derivative(phi: f64) -> f64 {
    let LinkConstants { c_phi, b_phi, a_phi } = LINK;
    let w = (phi - a_phi) / b_phi;
    // (1/(b c)) x^{1-c} exp(w - e^w)
    ((1.0 - c_phi) * log_x_of_phi(phi) + w - w.exp()).exp() / (b_phi * c_phi)
}

pub fn link_forward(p: &PpParameters) -> Result<TransformedParameters> {
    if !(p.mu > 0.0) || !(p.sigma > 0.0) {
        return Err(Error::invalid(format!(
            "link requires positive location and scale, got mu={} sigma={}",
            p.mu, p.sigma
        )));
    }
    Ok(TransformedParameters { psi: p.mu.ln(), tau: (p.sigma / p.mu).ln(), phi: h(p.xi)? })
}

pub fn link_inverse(t: &TransformedParameters) -> Result<PpParameters> {
    if !(t.psi.is_finite() && t.tau.is_finite()) {
        return Err(Error::invalid(format!("non-finite transformed parameters {t:?}")));
    }
    Ok(PpParameters { mu: t.psi.exp(), sigma: (t.psi + t.tau).exp(), xi: h_inverse(t.phi)? })
}
