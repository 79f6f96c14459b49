//! The `exlgm` command line: `simulate`, `maxfit`, `smooth`, `returnlevels`,
//! `predict` and `variogram`, each driven by a JSON run configuration plus
//! flags. Exit status is 0 on success, 1 for invalid input or usage and 2 for
//! numerical failures.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use exlgm::config::{RunConfig, VariogramParameter};
use exlgm::data::{self, SiteInfo};
use exlgm::maxstep::FitRecord;
use exlgm::products::{self, PredictConfig};
use exlgm::simulate::write_truth;
use exlgm::spde::Mesh;
use exlgm::workflow;
use exlgm::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "exlgm", version, about = "Max-and-Smooth inference for spatial extremes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset from the `simulate` section of the configuration.
    Simulate(SimulateArgs),
    /// Fit the point process model at every site.
    Maxfit(MaxfitArgs),
    /// Run the latent Gaussian model on the sitewise fits.
    Smooth(SmoothArgs),
    /// Posterior return levels at every site.
    Returnlevels(ReturnLevelArgs),
    /// Posterior predictive draws above each site's threshold.
    Predict(PredictArgs),
    /// Empirical variogram of one transformed parameter estimate.
    Variogram(VariogramArgs),
}

#[derive(Debug, Args)]
struct ConfigArg {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output data CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the generating parameters per site.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct MaxfitArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Input data CSV.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output fits CSV; exclusions go to `<stem>.exclusions.csv` next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SmoothArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Fits CSV written by `maxfit`.
    #[arg(long)]
    fits: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Proceed even if sites inside the mesh were excluded by `maxfit`.
    #[arg(long)]
    allow_exclusions: bool,
    /// Also write the draws as CSV.
    #[arg(long)]
    csv: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct ReturnLevelArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Directory written by `smooth`.
    #[arg(long)]
    posterior: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Return period in blocks; repeatable, overrides the configuration.
    #[arg(long = "period")]
    periods: Vec<f64>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Directory written by `smooth`.
    #[arg(long)]
    posterior: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_draws: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct VariogramArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Fits CSV written by `maxfit`.
    #[arg(long)]
    fits: Option<PathBuf>,
    /// Output CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// One of psi, tau, phi.
    #[arg(long, value_parser = parse_parameter)]
    parameter: Option<VariogramParameter>,
}

fn parse_parameter(s: &str) -> std::result::Result<VariogramParameter, String> {
    match s {
        "psi" => Ok(VariogramParameter::Psi),
        "tau" => Ok(VariogramParameter::Tau),
        "phi" => Ok(VariogramParameter::Phi),
        _ => Err(format!("expected psi, tau or phi, got {s}")),
    }
}

/// Contents of `meta.json` in a posterior directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorMeta {
    pub n_sites: usize,
    pub n_nodes: usize,
    pub n_draws: usize,
    pub seed: u64,
    pub acceptance_rate: f64,
    pub mesh: Mesh,
}

pub const DRAWS_FILE: &str = "draws.bin";
pub const DRAWS_CSV_FILE: &str = "draws.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const META_FILE: &str = "meta.json";
pub const MESH_FILE: &str = "mesh.csv";
pub const FITS_FILE: &str = "fits.csv";

/// `fits.csv` -> `fits.exclusions.csv`.
pub fn exclusions_path(fits: &Path) -> PathBuf {
    let stem = fits.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "fits".into());
    fits.with_file_name(format!("{stem}.exclusions.csv"))
}

/// Parse `argv` (including the program name), run, and return the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate(a) => simulate(a),
        Command::Maxfit(a) => maxfit(a),
        Command::Smooth(a) => smooth(a),
        Command::Returnlevels(a) => returnlevels(a),
        Command::Predict(a) => predict(a),
        Command::Variogram(a) => variogram(a),
    }
}

fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn required(flag: Option<PathBuf>, configured: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| Error::InvalidInput(format!("missing --{name} (or paths.{name} in the configuration)")))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("{}: {e}", path.display())))
}

fn sites_of(fits: &[FitRecord]) -> Vec<SiteInfo> {
    fits.iter().map(|f| SiteInfo { site_id: f.site_id, lon: f.lon, lat: f.lat }).collect()
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let mut sim = cfg.simulate.clone().ok_or_else(|| Error::InvalidInput("configuration has no simulate section".into()))?;
    if let Some(s) = a.seed {
        sim.seed = s;
    }
    let out = required(a.out, &cfg.paths.data, "out")?;
    let (dataset, truth) = workflow::simulate_from_config(&sim, &cfg)?;
    data::write_dataset(&out, &dataset)?;
    if let Some(t) = a.truth {
        write_truth(&t, &dataset.sites, &truth)?;
    }
    Ok(())
}

fn maxfit(a: MaxfitArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let input = required(a.data, &cfg.paths.data, "data")?;
    let out = required(a.out, &cfg.paths.fits, "out")?;
    let dataset = data::load_dataset(&input)?;
    let result = workflow::max_step(&dataset, &cfg)?;
    let records: Vec<FitRecord> = result.fits.iter().map(|f| f.record()).collect();
    data::write_fits(&out, &records)?;
    data::write_exclusions(&exclusions_path(&out), &result.exclusions)?;
    for e in &result.exclusions {
        eprintln!("excluded site {}: {}", e.site_id, e.reason);
    }
    Ok(())
}

fn smooth(a: SmoothArgs) -> Result<()> {
    let mut cfg = load_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.chain.seed = s;
    }
    let fits_path = required(a.fits, &cfg.paths.fits, "fits")?;
    let out = required(a.out, &cfg.paths.posterior, "out")?;
    let fits = data::read_fits(&fits_path)?;
    let mesh = workflow::mesh_for(&workflow::fit_coords(&fits), &cfg)?;

    let excl_path = exclusions_path(&fits_path);
    let exclusions = if excl_path.exists() { data::read_exclusions(&excl_path)? } else { Vec::new() };
    let ext = mesh.extent();
    let inside: Vec<u64> = exclusions
        .iter()
        .filter(|e| e.lon >= ext.xmin && e.lon <= ext.xmax && e.lat >= ext.ymin && e.lat <= ext.ymax)
        .map(|e| e.site_id)
        .collect();
    if !inside.is_empty() && !a.allow_exclusions {
        return Err(Error::InvalidInput(format!(
            "sites {inside:?} inside the mesh were excluded by maxfit; rerun with --allow-exclusions to proceed without them"
        )));
    }

    let (mesh, samples) = workflow::smooth_step(&fits, &cfg)?;
    for w in &samples.warnings {
        eprintln!("warning: {w}");
    }
    create_dir(&out)?;
    data::write_draws(&out.join(DRAWS_FILE), &samples)?;
    if a.csv {
        data::write_draws_csv(&out.join(DRAWS_CSV_FILE), &samples)?;
    }
    write_json(&out.join(SUMMARY_FILE), &samples.summary())?;
    let meta = PosteriorMeta {
        n_sites: samples.n_sites,
        n_nodes: samples.n_nodes,
        n_draws: samples.n_draws(),
        seed: samples.seed,
        acceptance_rate: samples.acceptance_rate,
        mesh: mesh.clone(),
    };
    write_json(&out.join(META_FILE), &meta)?;
    data::write_mesh(&out.join(MESH_FILE), &mesh)?;
    data::write_fits(&out.join(FITS_FILE), &fits)?;
    Ok(())
}

/// Draws and site table of a posterior directory.
fn load_posterior(dir: &Path) -> Result<(exlgm::PosteriorSamples, Vec<FitRecord>)> {
    let samples = data::read_draws(&dir.join(DRAWS_FILE))?;
    let fits = data::read_fits(&dir.join(FITS_FILE))?;
    let meta: PosteriorMeta = read_json(&dir.join(META_FILE))?;
    if fits.len() != samples.n_sites || meta.n_sites != samples.n_sites || meta.n_nodes != samples.n_nodes {
        return Err(Error::InvalidInput(format!("{}: draws, fits and meta.json disagree", dir.display())));
    }
    Ok((samples, fits))
}

fn returnlevels(a: ReturnLevelArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let dir = required(a.posterior, &cfg.paths.posterior, "posterior")?;
    let out = required(a.out, &cfg.paths.out, "out")?;
    let periods = if a.periods.is_empty() { cfg.return_periods.clone() } else { a.periods };
    let (samples, fits) = load_posterior(&dir)?;
    let mut levels = Vec::new();
    for m in periods {
        levels.extend(products::return_level_surface(&samples, m)?.sites);
    }
    data::write_return_levels(&out, &sites_of(&fits), &levels)
}

fn predict(a: PredictArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let dir = required(a.posterior, &cfg.paths.posterior, "posterior")?;
    let out = required(a.out, &cfg.paths.out, "out")?;
    let (samples, fits) = load_posterior(&dir)?;
    let pc = PredictConfig { block_size: cfg.block_size, n_draws: a.n_draws.unwrap_or(cfg.predict.n_draws) };
    let thresholds: Vec<f64> = fits.iter().map(|f| f.threshold).collect();
    let draws = products::posterior_predictive_all(&samples, &thresholds, &pc, a.seed.unwrap_or(cfg.predict.seed))?;
    data::write_predictive(&out, &sites_of(&fits), &draws)
}

fn variogram(a: VariogramArgs) -> Result<()> {
    let cfg = load_config(&a.config)?;
    let fits_path = required(a.fits, &cfg.paths.fits, "fits")?;
    let out = required(a.out, &cfg.paths.out, "out")?;
    let fits = data::read_fits(&fits_path)?;
    let coords = workflow::fit_coords(&fits);
    let values: Vec<f64> = fits
        .iter()
        .map(|f| match a.parameter.unwrap_or(cfg.variogram.parameter) {
            VariogramParameter::Psi => f.eta_hat.psi,
            VariogramParameter::Tau => f.eta_hat.tau,
            VariogramParameter::Phi => f.eta_hat.phi,
        })
        .collect();
    let max_dist = cfg.variogram.max_dist.unwrap_or_else(|| products::default_max_distance(&coords));
    let bins = products::empirical_variogram(&values, &coords, cfg.variogram.n_bins, max_dist)?;
    data::write_variogram(&out, &bins)
}
