//! Synthetic data. Daily values are iid draws from `G^{1/B}`, so block maxima
//! over `B` days follow the GEV `G` and the point process likelihood with
//! `n_block = T / B` targets the generating parameters.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Dataset, SiteInfo};
use crate::error::{Error, Result};
use crate::evt::{gev_quantile_from_neglog, PpParameters};
use crate::link::{link_forward, link_inverse, TransformedParameters};
use crate::smooth::HyperParameters;
use crate::spde::{build_precision, build_projection, gmrf_sample, Mesh};

/// `n_times` raw draws from `G^{1/B}` (not censored).
pub fn simulate_series<R: Rng + ?Sized>(p: &PpParameters, n_times: usize, block: f64, rng: &mut R) -> Vec<f64> {
    // F(y) = U  <=>  -log G(y) = B * E with E ~ Exp(1)
    (0..n_times)
        .map(|_| {
            let e: f64 = rng.sample(Exp1);
            gev_quantile_from_neglog(block * e, p)
        })
        .collect()
}

/// Regular grid of sites with ids `1..=nx*ny`, row by row.
pub fn grid_sites(nx: usize, ny: usize, spacing: f64, lon0: f64, lat0: f64) -> Vec<SiteInfo> {
    (0..ny)
        .flat_map(|j| (0..nx).map(move |i| (i, j)))
        .enumerate()
        .map(|(k, (i, j))| SiteInfo { site_id: k as u64 + 1, lon: lon0 + i as f64 * spacing, lat: lat0 + j as f64 * spacing })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    /// Per-site parameters (one entry is broadcast to all sites).
    Fixed(Vec<PpParameters>),
    /// Latent model with hyperparameters `theta` and intercepts
    /// `(beta_psi, beta_tau, beta_phi)` on `mesh`.
    Generative { theta: HyperParameters, intercepts: [f64; 3], mesh: Mesh },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTruth {
    pub params: Vec<PpParameters>,
    pub eta: Vec<TransformedParameters>,
    /// `(beta_psi, u_psi, beta_tau, u_tau, beta_phi)` in generative mode.
    pub nu: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub n_times: usize,
    pub block_size: f64,
    pub seed: u64,
}

/// Simulate a dataset. Negative daily values are censored at 0 (they never
/// reach a positive threshold). The latent draw uses ChaCha stream 0 and
/// site `k` uses stream `k + 1`, so results do not depend on scheduling.
pub fn simulate_dataset(sites: &[SiteInfo], truth: &Truth, spec: &SimulationSpec) -> Result<(Dataset, SimulationTruth)> {
    if spec.n_times == 0 {
        return Err(Error::invalid("n_times must be at least 1"));
    }
    if !(spec.block_size > 0.0 && spec.block_size.is_finite()) {
        return Err(Error::invalid("block size must be positive"));
    }
    if sites.is_empty() {
        return Err(Error::invalid("no sites to simulate"));
    }
    let (eta, params, nu) = match truth {
        Truth::Fixed(ps) => {
            if ps.len() != 1 && ps.len() != sites.len() {
                return Err(Error::invalid(format!("{} parameter triples for {} sites", ps.len(), sites.len())));
            }
            let params: Vec<PpParameters> = (0..sites.len()).map(|i| ps[i.min(ps.len() - 1)]).collect();
            for p in &params {
                p.validate()?;
            }
            let eta = params.iter().map(link_forward).collect::<Result<Vec<_>>>()?;
            (eta, params, None)
        }
        Truth::Generative { theta, intercepts, mesh } => {
            theta.validate()?;
            let (eta, nu) = draw_latent(sites, theta, intercepts, mesh, spec.seed)?;
            let params = eta.iter().map(link_inverse).collect::<Result<Vec<_>>>()?;
            (eta, params, Some(nu))
        }
    };
    let values = params
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(k as u64 + 1);
            simulate_series(p, spec.n_times, spec.block_size, &mut rng).into_iter().map(|v| v.max(0.0)).collect()
        })
        .collect();
    Ok((Dataset::new(sites.to_vec(), values)?, SimulationTruth { params, eta, nu }))
}

fn draw_latent(
    sites: &[SiteInfo],
    theta: &HyperParameters,
    intercepts: &[f64; 3],
    mesh: &Mesh,
    seed: u64,
) -> Result<(Vec<TransformedParameters>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let coords: Vec<[f64; 2]> = sites.iter().map(|s| [s.lon, s.lat]).collect();
    let a = build_projection(mesh, &coords)?;
    let u_psi = gmrf_sample(&build_precision(mesh, theta.rho_psi)?, theta.s_psi, &mut rng)?;
    let u_tau = gmrf_sample(&build_precision(mesh, theta.rho_tau)?, theta.s_tau, &mut rng)?;
    let f_psi = a.matrix().mul_vec(&u_psi);
    let f_tau = a.matrix().mul_vec(&u_tau);
    let mut eps = |s: f64| s * rng.sample::<f64, _>(StandardNormal);
    let eta = (0..sites.len())
        .map(|i| {
            let psi = intercepts[0] + f_psi[i] + eps(theta.sigma_psi);
            let tau = intercepts[1] + f_tau[i] + eps(theta.sigma_tau);
            let phi = intercepts[2] + eps(theta.sigma_phi);
            TransformedParameters::new(psi, tau, phi)
        })
        .collect();
    let mut nu = vec![intercepts[0]];
    nu.extend_from_slice(&u_psi);
    nu.push(intercepts[1]);
    nu.extend_from_slice(&u_tau);
    nu.push(intercepts[2]);
    Ok((eta, nu))
}

/// Truth table `site_id, lon, lat, mu, sigma, xi, psi, tau, phi`.
pub fn write_truth(path: &Path, sites: &[SiteInfo], truth: &SimulationTruth) -> Result<()> {
    let mut w = std::fs::File::create(path).map(std::io::BufWriter::new).map_err(|e| Error::io(path, e))?;
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "site_id,lon,lat,mu,sigma,xi,psi,tau,phi")?;
        for ((s, p), e) in sites.iter().zip(&truth.params).zip(&truth.eta) {
            let nums: Vec<String> = [s.lon, s.lat, p.mu, p.sigma, p.xi, e.psi, e.tau, e.phi].iter().map(|v| fmt_f64(*v)).collect();
            writeln!(w, "{},{}", s.site_id, nums.join(","))?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}
