//! End-to-end steps shared by the command line, benchmarks and tests.

use crate::config::{RunConfig, SimulateConfig, SimulateMode};
use crate::data::{Dataset, SiteInfo};
use crate::error::{Error, Result};
use crate::evt::PpParameters;
use crate::maxstep::{fit_all_sites, FitOptions, FitRecord, MaxStepResult};
use crate::priors::PriorConfig;
use crate::simulate::{grid_sites, simulate_dataset, SimulationSpec, SimulationTruth, Truth};
use crate::smooth::{data_precision, run_chain, PosteriorSamples, PseudoModel};
use crate::spde::{build_projection, default_mesh, BBox, Mesh};

pub fn coords_of(sites: &[SiteInfo]) -> Vec<[f64; 2]> {
    sites.iter().map(|s| [s.lon, s.lat]).collect()
}

pub fn fit_coords(fits: &[FitRecord]) -> Vec<[f64; 2]> {
    fits.iter().map(|f| [f.lon, f.lat]).collect()
}

/// Mesh for a set of site coordinates under the configured spacing and margin.
pub fn mesh_for(coords: &[[f64; 2]], cfg: &RunConfig) -> Result<Mesh> {
    default_mesh(coords, cfg.mesh.spacing, cfg.mesh.margin)
}

/// Sites and truth for the configured simulation.
pub fn simulate_from_config(sim: &SimulateConfig, cfg: &RunConfig) -> Result<(Dataset, SimulationTruth)> {
    let g = &sim.grid;
    let sites = grid_sites(g.nx, g.ny, g.spacing, g.lon0, g.lat0);
    let truth = match &sim.truth {
        SimulateMode::Fixed { mu, sigma, xi } => Truth::Fixed(vec![PpParameters::new(*mu, *sigma, *xi)?]),
        SimulateMode::Generative { theta, intercepts } => {
            let mesh = mesh_for(&coords_of(&sites), cfg)?;
            Truth::Generative { theta: *theta, intercepts: *intercepts, mesh }
        }
    };
    let spec = SimulationSpec { n_times: sim.n_times, block_size: cfg.block_size, seed: sim.seed };
    simulate_dataset(&sites, &truth, &spec)
}

/// The Max step over a whole dataset.
pub fn max_step(d: &Dataset, cfg: &RunConfig) -> Result<MaxStepResult> {
    let opts = FitOptions::new(cfg.threshold_quantile, cfg.n_block_for(d.n_times()), cfg.min_exceedances);
    fit_all_sites(&d.series(), &opts)
}

/// Pseudo model for the fitted sites on `mesh`.
pub fn build_model(fits: &[FitRecord], mesh: &Mesh, prior: PriorConfig) -> Result<PseudoModel> {
    let (eta_hat, q_data) = data_precision(fits)?;
    let projection = build_projection(mesh, &fit_coords(fits))?;
    PseudoModel::new(eta_hat, &q_data, &projection, mesh, prior)
}

/// The Smooth step with the configured mesh, prior and chain.
pub fn smooth_step(fits: &[FitRecord], cfg: &RunConfig) -> Result<(Mesh, PosteriorSamples)> {
    if fits.is_empty() {
        return Err(Error::invalid("no sitewise fits to smooth"));
    }
    let coords = fit_coords(fits);
    let mesh = mesh_for(&coords, cfg)?;
    let diameter = BBox::of_points(&coords)?.diameter();
    let model = build_model(fits, &mesh, cfg.prior_for(diameter))?;
    let samples = run_chain(&model, &cfg.chain, diameter)?;
    Ok((mesh, samples))
}
