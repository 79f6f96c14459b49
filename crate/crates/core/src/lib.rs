//! Extended latent Gaussian models for spatial peaks-over-threshold extremes.
//!
//! The crate implements the two-step Max-and-Smooth workflow:
//!
//! 1. **Max** ([`maxstep`]): at every site, fit the Poisson point process
//!    likelihood for threshold exceedances (penalized by a Beta(4,4) prior on
//!    the shape) in transformed coordinates `(psi, tau, phi)` and record the
//!    observed information matrix.
//! 2. **Smooth** ([`smooth`]): treat the sitewise estimates as Gaussian
//!    "data" with known precision and fit a conjugate Gaussian-Gaussian latent
//!    model with SPDE/GMRF spatial effects ([`spde`]) by marginal
//!    Metropolis-Hastings on the hyperparameters plus exact Gibbs draws of the
//!    latent vector.
//!
//! Return levels, posterior predictive draws and variograms are produced by
//! [`products`]. [`data`], [`simulate`] and [`config`] cover file formats,
//! synthetic data and run configuration.

pub mod config;
pub mod data;
pub mod error;
pub mod evt;
pub mod link;
pub mod maxstep;
pub mod optim;
pub mod priors;
pub mod products;
pub mod simulate;
pub mod smooth;
pub mod sparse;
pub mod spde;
pub mod stats;
pub mod workflow;

pub use error::{Error, Result};
pub use evt::{ExceedanceSet, PpParameters};
pub use link::TransformedParameters;
pub use maxstep::{SiteFit, SiteSeries};
pub use priors::PriorConfig;
pub use smooth::{ChainConfig, HyperParameters, LatentState, PosteriorSamples};
pub use sparse::{CscMatrix, SparsePrecision};
pub use spde::{Mesh, ProjectionMatrix};
