//! The "Smooth" step: the Gaussian-Gaussian pseudo model
//!
//! ```text
//! eta_hat | eta    ~ N(eta, Q_data^{-1})
//! eta     | nu, th ~ N(Z nu, Q_eps^{-1})
//! nu      | th     ~ N(0, Q_nu^{-1})
//! ```
//!
//! with `x = (eta, nu)`, `nu = (beta_psi, u_psi, beta_tau, u_tau, beta_phi)`
//! and `th` the seven hyperparameters. The latent vector is integrated out
//! analytically, the hyperparameters are sampled by random-walk
//! Metropolis-Hastings on the log scale, and the latent vector is drawn
//! exactly from its Gaussian full conditional at every kept iteration.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maxstep::FitRecord;
use crate::optim::{central_gradient, fd_hessian, maximize, OptimOptions};
use crate::priors::{pc_prior_matern_log, pc_prior_nugget_log, PriorConfig};
use crate::sparse::{CholeskyFactor, CscMatrix, SparseCombination, SparsePrecision, SymbolicCholesky};
use crate::spde::{precision_coefficients, Mesh, ProjectionMatrix, SpdeOperators};
use crate::stats::{summarize, Summary};

/// `theta = (sigma_psi, s_psi, rho_psi, sigma_tau, s_tau, rho_tau, sigma_phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParameters {
    pub sigma_psi: f64,
    pub s_psi: f64,
    pub rho_psi: f64,
    pub sigma_tau: f64,
    pub s_tau: f64,
    pub rho_tau: f64,
    pub sigma_phi: f64,
}

impl HyperParameters {
    pub const NAMES: [&'static str; 7] = ["sigma_psi", "s_psi", "rho_psi", "sigma_tau", "s_tau", "rho_tau", "sigma_phi"];

    pub fn to_array(self) -> [f64; 7] {
        [self.sigma_psi, self.s_psi, self.rho_psi, self.sigma_tau, self.s_tau, self.rho_tau, self.sigma_phi]
    }

    pub fn from_array(a: [f64; 7]) -> Self {
        Self { sigma_psi: a[0], s_psi: a[1], rho_psi: a[2], sigma_tau: a[3], s_tau: a[4], rho_tau: a[5], sigma_phi: a[6] }
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid(format!("hyperparameters must be positive and finite: {self:?}")))
        }
    }
}

/// `x = (eta, nu)` split into its two blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    /// `(psi_1..psi_N, tau_1..tau_N, phi_1..phi_N)`.
    pub eta: Vec<f64>,
    /// `(beta_psi, u_psi, beta_tau, u_tau, beta_phi)`.
    pub nu: Vec<f64>,
}

impl LatentState {
    pub fn from_stacked(x: &[f64], n_sites: usize) -> Self {
        Self { eta: x[..3 * n_sites].to_vec(), nu: x[3 * n_sites..].to_vec() }
    }

    /// Intercepts `(beta_psi, beta_tau, beta_phi)`.
    pub fn intercepts(&self) -> [f64; 3] {
        let m = (self.nu.len() - 3) / 2;
        [self.nu[0], self.nu[m + 1], self.nu[2 * m + 2]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub n_iterations: usize,
    pub n_burnin: usize,
    pub thin: usize,
    pub seed: u64,
    /// Per-component random-walk scales on `log theta`. When absent the
    /// proposal covariance is the inverse curvature at the posterior mode.
    pub proposal_scales: Option<[f64; 7]>,
    pub adapt: bool,
    /// Starting value; the posterior mode when absent.
    pub initial: Option<HyperParameters>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { n_iterations: 10_000, n_burnin: 2_000, thin: 1, seed: 1, proposal_scales: None, adapt: true, initial: None }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_burnin >= self.n_iterations {
            return Err(Error::invalid("n_burnin must be smaller than n_iterations"));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thin must be at least 1"));
        }
        if let Some(s) = &self.proposal_scales {
            if s.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::invalid("proposal scales must be nonnegative"));
            }
        }
        if let Some(t) = &self.initial {
            t.validate()?;
        }
        Ok(())
    }

    /// Number of stored draws: `ceil((n_iterations - n_burnin) / thin)`.
    pub fn n_kept(&self) -> usize {
        (self.n_iterations - self.n_burnin).div_ceil(self.thin)
    }
}

/// Dense row-major matrix of draws.
#[derive(Debug, Clone, PartialEq)]
pub struct DrawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DrawMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!("{} values for a {rows} x {cols} draw matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    fn with_capacity(cols: usize, rows: usize) -> Self {
        Self { rows: 0, cols, data: Vec::with_capacity(rows * cols) }
    }

    fn push_row(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn nrows(&self) -> usize {
        self.rows
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSamples {
    pub n_sites: usize,
    pub n_nodes: usize,
    /// Kept iterations x 7.
    pub theta_draws: DrawMatrix,
    /// Kept iterations x `(3N + 3 + 2|mesh|)`, stacked as `(eta, nu)`.
    pub latent_draws: DrawMatrix,
    /// Post-burn-in acceptance rate.
    pub acceptance_rate: f64,
    pub seed: u64,
    pub warnings: Vec<String>,
}

impl PosteriorSamples {
    pub fn n_draws(&self) -> usize {
        self.theta_draws.nrows()
    }

    /// Transformed parameters `[psi, tau, phi]` of `site` in draw `k`.
    pub fn site_eta(&self, k: usize, site: usize) -> [f64; 3] {
        let row = self.latent_draws.row(k);
        [row[site], row[self.n_sites + site], row[2 * self.n_sites + site]]
    }

    pub fn summary(&self) -> PosteriorSummary {
        let hyper = HyperParameters::NAMES
            .iter()
            .enumerate()
            .map(|(j, name)| ParameterSummary::new(name, &self.theta_draws.column(j)))
            .collect();
        let base = 3 * self.n_sites;
        let m = self.n_nodes;
        let intercepts = [("beta_psi", base), ("beta_tau", base + m + 1), ("beta_phi", base + 2 * m + 2)]
            .iter()
            .map(|(name, j)| ParameterSummary::new(name, &self.latent_draws.column(*j)))
            .collect();
        PosteriorSummary {
            hyperparameters: hyper,
            intercepts,
            acceptance_rate: self.acceptance_rate,
            n_draws: self.n_draws(),
            seed: self.seed,
            warnings: self.warnings.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q50: f64,
    pub q975: f64,
}

impl ParameterSummary {
    fn new(name: &str, values: &[f64]) -> Self {
        let Summary { mean, sd, q025, q50, q975 } = summarize(values);
        Self { name: name.to_string(), mean, sd, q025, q50, q975 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub hyperparameters: Vec<ParameterSummary>,
    pub intercepts: Vec<ParameterSummary>,
    pub acceptance_rate: f64,
    pub n_draws: usize,
    pub seed: u64,
    pub warnings: Vec<String>,
}

/// `Z = [1, A, 0, 0, 0; 0, 0, 1, A, 0; 0, 0, 0, 0, 1]`, of size `3N x (3 + 2|mesh|)`.
pub fn assemble_design(n_sites: usize, a: &ProjectionMatrix) -> Result<CscMatrix> {
    if a.n_sites() != n_sites {
        return Err(Error::invalid(format!("projection has {} rows for {n_sites} sites", a.n_sites())));
    }
    let m = a.n_nodes();
    let mut trip = Vec::with_capacity(3 * n_sites + 2 * a.matrix().nnz());
    for i in 0..n_sites {
        trip.push((i, 0, 1.0));
        trip.push((n_sites + i, m + 1, 1.0));
        trip.push((2 * n_sites + i, 2 * m + 2, 1.0));
    }
    for (i, j, w) in a.matrix().triplets() {
        trip.push((i, 1 + j, w));
        trip.push((n_sites + i, m + 2 + j, w));
    }
    CscMatrix::from_triplets(3 * n_sites, 3 + 2 * m, &trip)
}

/// Stacked estimates `eta_hat` and the block precision `Q_data` built from
/// the sitewise fits, in the `(psi.., tau.., phi..)` ordering.
pub fn data_precision(fits: &[FitRecord]) -> Result<(Vec<f64>, SparsePrecision)> {
    let n = fits.len();
    if n == 0 {
        return Err(Error::invalid("no sitewise fits"));
    }
    let mut eta = vec![0.0; 3 * n];
    let mut trip = Vec::with_capacity(9 * n);
    for (i, f) in fits.iter().enumerate() {
        let e = f.eta_hat.to_array();
        for l in 0..3 {
            eta[l * n + i] = e[l];
            for k in 0..3 {
                // average the two triangles so the assembled matrix is exactly symmetric
                let v = 0.5 * (f.info[(l, k)] + f.info[(k, l)]);
                trip.push((l * n + i, k * n + i, v));
            }
        }
    }
    Ok((eta, SparsePrecision::new(CscMatrix::from_triplets(3 * n, 3 * n, &trip)?)?))
}

/// Gaussian full conditional of `x = (eta, nu)`.
#[derive(Debug, Clone)]
pub struct FullConditional {
    pub mean: Vec<f64>,
    pub precision: SparsePrecision,
    pub factor: CholeskyFactor,
}

fn check_dims(eta_hat: &[f64], q_data: &SparsePrecision, z: &CscMatrix) -> Result<()> {
    if eta_hat.len() % 3 != 0 || eta_hat.len() != q_data.dim() || z.nrows() != eta_hat.len() {
        return Err(Error::invalid(format!(
            "inconsistent dimensions: eta_hat {}, Q_data {}, Z {}x{}",
            eta_hat.len(),
            q_data.dim(),
            z.nrows(),
            z.ncols()
        )));
    }
    if (z.ncols() - 3) % 2 != 0 {
        return Err(Error::invalid("design matrix has the wrong number of columns"));
    }
    Ok(())
}

fn nu_precision(theta: &HyperParameters, q_rho_psi: &CscMatrix, q_rho_tau: &CscMatrix, sigma_beta_sq: f64) -> Result<CscMatrix> {
    let m = q_rho_psi.nrows();
    let d = 3 + 2 * m;
    let ib = 1.0 / sigma_beta_sq;
    let beta = CscMatrix::from_triplets(d, d, &[(0, 0, ib), (m + 1, m + 1, ib), (2 * m + 2, 2 * m + 2, ib)])?;
    beta.add(&q_rho_psi.scale(theta.s_psi.powi(-2)).embed(d, d, 1, 1))?
        .add(&q_rho_tau.scale(theta.s_tau.powi(-2)).embed(d, d, m + 2, m + 2))
}

/// Full conditional of `x` assembled block by block with sparse products.
/// [`PseudoModel`] computes the same matrix through a precomputed linear
/// combination and is what the sampler uses.
pub fn latent_full_conditional(
    eta_hat: &[f64],
    q_data: &SparsePrecision,
    theta: &HyperParameters,
    z: &CscMatrix,
    q_rho_psi: &SparsePrecision,
    q_rho_tau: &SparsePrecision,
    prior: &PriorConfig,
) -> Result<FullConditional> {
    check_dims(eta_hat, q_data, z)?;
    theta.validate()?;
    let n = eta_hat.len() / 3;
    let p = z.ncols();
    let d = 3 * n + p;
    let eps: Vec<f64> = [theta.sigma_psi, theta.sigma_tau, theta.sigma_phi]
        .iter()
        .flat_map(|s| std::iter::repeat(s.powi(-2)).take(n))
        .collect();
    let q_eps = CscMatrix::diagonal(&eps);
    let q_eps_z = q_eps.matmul(z)?;
    let ztqz = z.transpose().matmul(&q_eps_z)?;
    let q_nu = nu_precision(theta, q_rho_psi.matrix(), q_rho_tau.matrix(), prior.sigma_beta_sq)?;
    let q = q_eps
        .add(q_data.matrix())?
        .embed(d, d, 0, 0)
        .add(&q_eps_z.scale(-1.0).embed(d, d, 0, 3 * n))?
        .add(&q_eps_z.transpose().scale(-1.0).embed(d, d, 3 * n, 0))?
        .add(&ztqz.add(&q_nu)?.embed(d, d, 3 * n, 3 * n))?;
    let q = SparsePrecision::new(q.add(&q.transpose())?.scale(0.5))?;
    let factor = q.cholesky().map_err(|e| not_pd(e, theta))?;
    let mut rhs = q_data.matrix().mul_vec(eta_hat);
    rhs.resize(d, 0.0);
    let mean = factor.solve(&rhs);
    Ok(FullConditional { mean, precision: q, factor })
}

fn not_pd(e: Error, theta: &HyperParameters) -> Error {
    match e {
        Error::NotPositiveDefinite(msg) => Error::NotPositiveDefinite(format!("{msg} at theta = {theta:?}")),
        other => other,
    }
}

/// Exact draw `m + P' L^{-T} z` from the full conditional with `z ~ N(0, I)`.
pub fn gibbs_draw_latent<R: Rng + ?Sized>(fc: &FullConditional, n_sites: usize, rng: &mut R) -> LatentState {
    let z: Vec<f64> = (0..fc.mean.len()).map(|_| rng.sample(StandardNormal)).collect();
    gibbs_draw_latent_with_noise(fc, n_sites, &z)
}

/// As [`gibbs_draw_latent`] with the standard normal vector supplied.
pub fn gibbs_draw_latent_with_noise(fc: &FullConditional, n_sites: usize, z: &[f64]) -> LatentState {
    let x = draw_from_factor(&fc.factor, &fc.mean, z);
    LatentState::from_stacked(&x, n_sites)
}

fn draw_from_factor(factor: &CholeskyFactor, mean: &[f64], z: &[f64]) -> Vec<f64> {
    let mut x = factor.apply_inverse_upper(z);
    x.iter_mut().zip(mean).for_each(|(a, m)| *a += m);
    x
}

/// Evaluation of the pseudo model at one `theta`.
#[derive(Debug, Clone)]
pub struct HyperState {
    pub theta: HyperParameters,
    /// `log pi(theta) + log pi(eta_hat | theta)`.
    pub log_posterior: f64,
    pub mean: Vec<f64>,
    pub factor: CholeskyFactor,
}

const N_TERMS: usize = 11;

/// Smallest admissible `sigma^2 * q` for a nugget variance `sigma^2` and a
/// diagonal data precision `q`. Below it the elimination of the nugget
/// coupling cancels to fewer than eight significant digits.
pub const NUGGET_CONDITION_FLOOR: f64 = 1e-8;

/// The pseudo model with everything that does not depend on `theta`
/// precomputed: the fixed sparsity pattern of the posterior precision, its
/// decomposition into 11 fixed matrices, and one symbolic factorization.
#[derive(Debug, Clone)]
pub struct PseudoModel {
    n_sites: usize,
    n_nodes: usize,
    eta_hat: Vec<f64>,
    q_data: CscMatrix,
    q_data_logdet: f64,
    min_data_precision: f64,
    spacing: f64,
    prior: PriorConfig,
    post: SparseCombination,
    post_symbolic: Arc<SymbolicCholesky>,
    spde: SparseCombination,
    spde_symbolic: Arc<SymbolicCholesky>,
    rhs: Vec<f64>,
}

impl PseudoModel {
    pub fn new(eta_hat: Vec<f64>, q_data: &SparsePrecision, projection: &ProjectionMatrix, mesh: &Mesh, prior: PriorConfig) -> Result<Self> {
        prior.validate()?;
        let n = eta_hat.len() / 3;
        let z = assemble_design(n, projection)?;
        check_dims(&eta_hat, q_data, &z)?;
        let m = mesh.n_nodes();
        if projection.n_nodes() != m {
            return Err(Error::invalid("projection and mesh disagree on the node count"));
        }
        let ops = SpdeOperators::new(mesh)?;
        let d = 3 * n + 3 + 2 * m;

        let mut terms = Vec::with_capacity(N_TERMS);
        terms.push(q_data.matrix().embed(d, d, 0, 0));
        let zt = z.transpose();
        for l in 0..3 {
            // D_l = [S_l | -Z_l] with S_l selecting block l of eta
            let mut trip: Vec<_> = (0..n).map(|r| (r, l * n + r, 1.0)).collect();
            for (c, r, v) in zt.triplets() {
                if r >= l * n && r < (l + 1) * n {
                    trip.push((r - l * n, 3 * n + c, -v));
                }
            }
            let dl = CscMatrix::from_triplets(n, d, &trip)?;
            terms.push(dl.transpose().matmul(&dl)?);
        }
        let b0 = 3 * n;
        terms.push(CscMatrix::from_triplets(d, d, &[(b0, b0, 1.0), (b0 + m + 1, b0 + m + 1, 1.0), (b0 + 2 * m + 2, b0 + 2 * m + 2, 1.0)])?);
        for off in [b0 + 1, b0 + m + 2] {
            for op in [&ops.c, &ops.g, &ops.gcg] {
                terms.push(op.embed(d, d, off, off));
            }
        }
        let post = SparseCombination::new(&terms)?;
        let post_symbolic = SymbolicCholesky::analyze(post.pattern())?;
        let spde = SparseCombination::new(&[ops.c.clone(), ops.g.clone(), ops.gcg.clone()])?;
        let spde_symbolic = SymbolicCholesky::analyze(spde.pattern())?;
        let q_data_logdet = q_data.cholesky()?.log_det();
        let min_data_precision = (0..3 * n).map(|i| q_data.matrix().get(i, i)).fold(f64::INFINITY, f64::min);
        let mut rhs = q_data.matrix().mul_vec(&eta_hat);
        rhs.resize(d, 0.0);
        Ok(Self {
            n_sites: n,
            n_nodes: m,
            eta_hat,
            q_data: q_data.matrix().clone(),
            q_data_logdet,
            min_data_precision,
            spacing: mesh.spacing,
            prior,
            post,
            post_symbolic,
            spde,
            spde_symbolic,
            rhs,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.n_sites
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn latent_dim(&self) -> usize {
        3 * self.n_sites + 3 + 2 * self.n_nodes
    }

    pub fn eta_hat(&self) -> &[f64] {
        &self.eta_hat
    }

    pub fn prior(&self) -> &PriorConfig {
        &self.prior
    }

    /// Structural nonzeros of the posterior precision (before fill-in).
    pub fn posterior_nnz(&self) -> usize {
        self.post.pattern().nnz()
    }

    fn coefficients(&self, t: &HyperParameters, with_data: bool) -> Result<[f64; N_TERMS]> {
        let p = precision_coefficients(t.rho_psi, self.spacing)?;
        let q = precision_coefficients(t.rho_tau, self.spacing)?;
        let (ip, it) = (t.s_psi.powi(-2), t.s_tau.powi(-2));
        Ok([
            if with_data { 1.0 } else { 0.0 },
            t.sigma_psi.powi(-2),
            t.sigma_tau.powi(-2),
            t.sigma_phi.powi(-2),
            1.0 / self.prior.sigma_beta_sq,
            p[0] * ip,
            p[1] * ip,
            p[2] * ip,
            q[0] * it,
            q[1] * it,
            q[2] * it,
        ])
    }

    /// Posterior precision of `x` at `theta`.
    pub fn posterior_precision(&self, theta: &HyperParameters) -> Result<SparsePrecision> {
        theta.validate()?;
        SparsePrecision::new(self.post.combine(&self.coefficients(theta, true)?))
    }

    /// Prior precision of `x = (eta, nu)` at `theta`.
    pub fn prior_precision(&self, theta: &HyperParameters) -> Result<SparsePrecision> {
        theta.validate()?;
        SparsePrecision::new(self.post.combine(&self.coefficients(theta, false)?))
    }

    pub fn full_conditional(&self, theta: &HyperParameters) -> Result<FullConditional> {
        let precision = self.posterior_precision(theta)?;
        let factor = self.post_symbolic.factor(precision.matrix()).map_err(|e| not_pd(e, theta))?;
        let mean = factor.solve(&self.rhs);
        Ok(FullConditional { mean, precision, factor })
    }

    fn spde_log_det(&self, rho: f64) -> Result<f64> {
        let c = precision_coefficients(rho, self.spacing)?;
        let mut v = vec![0.0; self.spde.pattern().nnz()];
        self.spde.combine_into(&c, &mut v);
        Ok(self.spde_symbolic.factor_values(&v)?.log_det())
    }

    fn prior_log_det(&self, t: &HyperParameters) -> Result<f64> {
        let (n, m) = (self.n_sites as f64, self.n_nodes as f64);
        Ok(-2.0 * n * (t.sigma_psi.ln() + t.sigma_tau.ln() + t.sigma_phi.ln()) - 3.0 * self.prior.sigma_beta_sq.ln()
            + self.spde_log_det(t.rho_psi)?
            - 2.0 * m * t.s_psi.ln()
            + self.spde_log_det(t.rho_tau)?
            - 2.0 * m * t.s_tau.ln())
    }

    /// `log pi(theta)`: PC priors on the three nuggets and the two Matérn pairs.
    pub fn log_prior(&self, t: &HyperParameters) -> f64 {
        let p = &self.prior;
        pc_prior_nugget_log(t.sigma_psi, p.lambda_sigma_psi)
            + pc_prior_nugget_log(t.sigma_tau, p.lambda_sigma_tau)
            + pc_prior_nugget_log(t.sigma_phi, p.lambda_sigma_phi)
            + pc_prior_matern_log(t.s_psi, t.rho_psi, p.lambda_s_psi, p.lambda_rho_psi)
            + pc_prior_matern_log(t.s_tau, t.rho_tau, p.lambda_s_tau, p.lambda_rho_tau)
    }

    fn data_term(&self, eta: &[f64]) -> f64 {
        let r: Vec<f64> = self.eta_hat.iter().zip(eta).map(|(a, b)| a - b).collect();
        let k = self.eta_hat.len() as f64;
        -0.5 * k * (2.0 * PI).ln() + 0.5 * self.q_data_logdet - 0.5 * self.q_data.quad_form(&r)
    }

    /// Evaluate the marginal posterior at `theta`. `None` when `theta` is
    /// outside the support, a precision fails to factorize, or a nugget is so
    /// small that `1 / sigma^2` swamps the data precision in double precision.
    pub fn evaluate(&self, theta: &HyperParameters) -> Option<HyperState> {
        let lp = self.log_prior(theta);
        if !lp.is_finite() {
            return None;
        }
        let floor = NUGGET_CONDITION_FLOOR / self.min_data_precision;
        if [theta.sigma_psi, theta.sigma_tau, theta.sigma_phi].iter().any(|s| s * s < floor) {
            return None;
        }
        let fc = self.full_conditional(theta).ok()?;
        let prior_logdet = self.prior_log_det(theta).ok()?;
        let m = &fc.mean;
        let k = 3 * self.n_sites;
        // m' Q_prior m = m' b - eta_m' Q_data eta_m since Q_post m = b
        let mb: f64 = m.iter().zip(&self.rhs).map(|(a, b)| a * b).sum();
        let prior_quad = mb - self.q_data.quad_form(&m[..k]);
        let d = m.len() as f64;
        let log_prior_x = -0.5 * d * (2.0 * PI).ln() + 0.5 * prior_logdet - 0.5 * prior_quad;
        let log_post_x = -0.5 * d * (2.0 * PI).ln() + 0.5 * fc.factor.log_det();
        let value = lp + log_prior_x + self.data_term(&m[..k]) - log_post_x;
        value.is_finite().then(|| HyperState { theta: *theta, log_posterior: value, mean: fc.mean, factor: fc.factor })
    }

    /// `log pi(theta) + log pi(eta_hat | theta)` up to a constant; `-inf` on failure.
    pub fn log_marginal_hyper(&self, theta: &HyperParameters) -> f64 {
        self.evaluate(theta).map_or(f64::NEG_INFINITY, |s| s.log_posterior)
    }

    /// The same quantity through the Gaussian identity evaluated at an
    /// arbitrary latent point `x_star`.
    pub fn log_marginal_hyper_at(&self, theta: &HyperParameters, x_star: &[f64]) -> Result<f64> {
        if x_star.len() != self.latent_dim() {
            return Err(Error::invalid("latent point has the wrong length"));
        }
        let lp = self.log_prior(theta);
        let fc = self.full_conditional(theta)?;
        let q_prior = self.prior_precision(theta)?;
        let d = x_star.len() as f64;
        let k = 3 * self.n_sites;
        let log_prior_x = -0.5 * d * (2.0 * PI).ln() + 0.5 * self.prior_log_det(theta)? - 0.5 * q_prior.matrix().quad_form(x_star);
        let dev: Vec<f64> = x_star.iter().zip(&fc.mean).map(|(a, b)| a - b).collect();
        let log_post_x = -0.5 * d * (2.0 * PI).ln() + 0.5 * fc.factor.log_det() - 0.5 * fc.precision.matrix().quad_form(&dev);
        Ok(lp + log_prior_x + self.data_term(&x_star[..k]) - log_post_x)
    }

    /// Crude starting point from the spread of the estimates.
    fn heuristic_theta(&self, domain_diameter: f64) -> HyperParameters {
        let n = self.n_sites;
        let sd = |l: usize| crate::stats::sd(&self.eta_hat[l * n..(l + 1) * n]).max(1e-3);
        HyperParameters {
            sigma_psi: 0.5 * sd(0),
            s_psi: sd(0),
            rho_psi: 0.3 * domain_diameter,
            sigma_tau: 0.5 * sd(1),
            s_tau: sd(1),
            rho_tau: 0.3 * domain_diameter,
            sigma_phi: sd(2),
        }
    }

    /// Mode of the log-scale marginal posterior of `theta` and the inverse
    /// negative curvature there (when positive definite).
    pub fn posterior_mode(&self, start: HyperParameters) -> (HyperParameters, Option<DMatrix<f64>>) {
        let target = |u: &[f64]| {
            let t = HyperParameters::from_array(std::array::from_fn(|j| u[j].exp()));
            self.log_marginal_hyper(&t) + u.iter().sum::<f64>()
        };
        struct Fd<F>(F);
        impl<F: Fn(&[f64]) -> f64> crate::optim::Objective for Fd<F> {
            fn value(&self, x: &[f64]) -> f64 {
                (self.0)(x)
            }
            fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
                central_gradient(&self.0, x)
            }
        }
        let u0: Vec<f64> = start.to_array().iter().map(|v| v.ln()).collect();
        let opts = OptimOptions { max_iter: 200, grad_tol: 1e-8, accept_tol: 1e-3 };
        let r = maximize(&Fd(&target), &u0, &opts);
        let u = if r.value.is_finite() && r.value >= target(&u0) { r.x } else { u0 };
        let theta = HyperParameters::from_array(std::array::from_fn(|j| u[j].exp()));
        let neg_h = -fd_hessian(target, &u, 1e-3);
        let cov = if neg_h.iter().all(|v| v.is_finite()) {
            let eig = SymmetricEigen::new(neg_h);
            (eig.eigenvalues.min() > 0.0).then(|| {
                let inv = eig.eigenvalues.map(|v| 1.0 / v);
                &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
            })
        } else {
            None
        };
        (theta, cov)
    }
}

const TARGET_ACCEPTANCE: f64 = 0.23;

/// Run the sampler. `domain_diameter` only seeds the mode search when no
/// initial value is configured.
pub fn run_chain(model: &PseudoModel, cfg: &ChainConfig, domain_diameter: f64) -> Result<PosteriorSamples> {
    cfg.validate()?;
    let start = cfg.initial.unwrap_or_else(|| model.heuristic_theta(domain_diameter));

    // proposal: log theta' = log theta + exp(log_scale) * L z
    let (init, chol, mut log_scale) = match (&cfg.proposal_scales, cfg.initial) {
        (Some(s), _) => {
            let theta = if cfg.initial.is_some() { start } else { model.posterior_mode(start).0 };
            (theta, DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(s)), 0.0)
        }
        (None, _) => {
            let (theta, cov) = model.posterior_mode(start);
            let theta = cfg.initial.unwrap_or(theta);
            let l = cov
                .and_then(|c| c.cholesky().map(|c| c.l()))
                .unwrap_or_else(|| DMatrix::from_diagonal_element(7, 7, 0.1));
            (theta, l, (2.38 / 7f64.sqrt()).ln())
        }
    };

    let mut current = model.evaluate(&init).ok_or_else(|| {
        Error::NotPositiveDefinite(format!("marginal posterior is not finite at the initial value {init:?}"))
    })?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = model.latent_dim();
    let kept = cfg.n_kept();
    let mut theta_draws = DrawMatrix::with_capacity(7, kept);
    let mut latent_draws = DrawMatrix::with_capacity(d, kept);
    let mut accepted_after_burnin = 0usize;
    let mut z_latent = vec![0.0; d];

    for it in 0..cfg.n_iterations {
        let z: [f64; 7] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let step = &chol * nalgebra::DVector::from_column_slice(&z) * log_scale.exp();
        let cur = current.theta.to_array();
        let prop = HyperParameters::from_array(std::array::from_fn(|j| cur[j] * step[j].exp()));
        let u: f64 = rng.gen();
        let mut alpha = 0.0;
        if prop == current.theta {
            alpha = 1.0;
        } else if let Some(next) = model.evaluate(&prop) {
            let log_jac: f64 = step.iter().sum();
            let log_ratio = next.log_posterior - current.log_posterior + log_jac;
            alpha = log_ratio.min(0.0).exp();
            if u.ln() < log_ratio {
                current = next;
                if it >= cfg.n_burnin {
                    accepted_after_burnin += 1;
                }
            }
        }
        if it < cfg.n_burnin && cfg.adapt {
            log_scale += (alpha - TARGET_ACCEPTANCE) * ((it + 1) as f64).powf(-0.6);
        }
        if it >= cfg.n_burnin && (it - cfg.n_burnin) % cfg.thin == 0 {
            z_latent.iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
            theta_draws.push_row(&current.theta.to_array());
            latent_draws.push_row(&draw_from_factor(&current.factor, &current.mean, &z_latent));
        }
    }
    let acceptance_rate = accepted_after_burnin as f64 / (cfg.n_iterations - cfg.n_burnin) as f64;
    let fixed = cfg.proposal_scales.is_some_and(|s| s.iter().all(|v| *v == 0.0));
    let mut warnings = Vec::new();
    if acceptance_rate < 0.01 && !fixed {
        warnings.push(format!("low Metropolis-Hastings acceptance rate {acceptance_rate:.4}"));
    }
    Ok(PosteriorSamples {
        n_sites: model.n_sites(),
        n_nodes: model.n_nodes(),
        theta_draws,
        latent_draws,
        acceptance_rate,
        seed: cfg.seed,
        warnings,
    })
}
