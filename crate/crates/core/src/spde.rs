//! Regular lattice meshes, Matérn (smoothness 1) SPDE precisions, bilinear
//! projection matrices and GMRF sampling / log-density.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::{CholeskyFactor, CscMatrix, SparsePrecision};

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub xmin: f64,
    pub xmax: f64,
    pub ymin: f64,
    pub ymax: f64,
}

impl BBox {
    pub fn new(xmin: f64, xmax: f64, ymin: f64, ymax: f64) -> Self {
        Self { xmin, xmax, ymin, ymax }
    }

    /// Smallest box containing all points.
    pub fn of_points(points: &[[f64; 2]]) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::invalid("bounding box of an empty point set"));
        }
        let mut b = Self::new(f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            b.xmin = b.xmin.min(p[0]);
            b.xmax = b.xmax.max(p[0]);
            b.ymin = b.ymin.min(p[1]);
            b.ymax = b.ymax.max(p[1]);
        }
        Ok(b)
    }

    pub fn diameter(&self) -> f64 {
        (self.xmax - self.xmin).hypot(self.ymax - self.ymin)
    }
}

/// Regular rectangular lattice. Node `(i, j)` sits at
/// `(x0 + i * spacing, y0 + j * spacing)` and has index `j * nx + i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mesh {
    pub x0: f64,
    pub y0: f64,
    pub nx: usize,
    pub ny: usize,
    pub spacing: f64,
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny
    }

    pub fn node(&self, k: usize) -> [f64; 2] {
        let (i, j) = (k % self.nx, k / self.nx);
        [self.x0 + i as f64 * self.spacing, self.y0 + j as f64 * self.spacing]
    }

    pub fn nodes(&self) -> Vec<[f64; 2]> {
        (0..self.n_nodes()).map(|k| self.node(k)).collect()
    }

    pub fn index(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn extent(&self) -> BBox {
        BBox::new(
            self.x0,
            self.x0 + (self.nx - 1) as f64 * self.spacing,
            self.y0,
            self.y0 + (self.ny - 1) as f64 * self.spacing,
        )
    }
}

/// Lattice covering `bbox` expanded by `margin` on every side.
pub fn build_mesh(bbox: BBox, spacing: f64, margin: f64) -> Result<Mesh> {
    let (w, h) = (bbox.xmax - bbox.xmin, bbox.ymax - bbox.ymin);
    if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
        return Err(Error::invalid("mesh bounding box is degenerate"));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::invalid(format!("mesh spacing must be positive, got {spacing}")));
    }
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::invalid(format!("mesh margin must be nonnegative, got {margin}")));
    }
    if spacing > w || spacing > h {
        return Err(Error::invalid(format!("mesh spacing {spacing} exceeds the bounding box extent ({w} x {h})")));
    }
    let count = |len: f64| ((len + 2.0 * margin) / spacing - 1e-9).ceil() as usize + 1;
    Ok(Mesh { x0: bbox.xmin - margin, y0: bbox.ymin - margin, nx: count(w), ny: count(h), spacing })
}

/// Smallest distance between two distinct points (brute force).
pub fn min_neighbour_distance(points: &[[f64; 2]]) -> Option<f64> {
    let mut best = f64::INFINITY;
    for (a, p) in points.iter().enumerate() {
        for q in &points[a + 1..] {
            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
            if d > 0.0 {
                best = best.min(d);
            }
        }
    }
    best.is_finite().then_some(best)
}

/// Mesh for a set of sites: spacing defaults to 1.5 times the smallest
/// site separation and the margin to twice the spacing.
pub fn default_mesh(sites: &[[f64; 2]], spacing: Option<f64>, margin: Option<f64>) -> Result<Mesh> {
    let spacing = match spacing {
        Some(s) => s,
        None => 1.5 * min_neighbour_distance(sites).ok_or_else(|| Error::invalid("need at least two distinct sites"))?,
    };
    build_mesh(BBox::of_points(sites)?, spacing, margin.unwrap_or(2.0 * spacing))
}

/// The three fixed matrices of the lattice SPDE discretization: the lumped
/// mass matrix `C`, the Neumann stiffness matrix `G` and `G C^{-1} G`.
#[derive(Debug, Clone)]
pub struct SpdeOperators {
    pub c: CscMatrix,
    pub g: CscMatrix,
    pub gcg: CscMatrix,
    pub spacing: f64,
}

impl SpdeOperators {
    pub fn new(mesh: &Mesh) -> Result<Self> {
        let (nx, ny, h) = (mesh.nx, mesh.ny, mesh.spacing);
        if nx < 2 || ny < 2 {
            return Err(Error::invalid("mesh needs at least 2 x 2 nodes"));
        }
        let n = mesh.n_nodes();
        let mut area = vec![0.0; n];
        for j in 0..ny {
            for i in 0..nx {
                let fx = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
                let fy = if j == 0 || j == ny - 1 { 0.5 } else { 1.0 };
                area[mesh.index(i, j)] = fx * fy * h * h;
            }
        }
        // Dual-cell face length over node distance: 1 inside, 1/2 along the boundary.
        let mut trip = Vec::new();
        let mut diag = vec![0.0; n];
        let mut edge = |a: usize, b: usize, w: f64, trip: &mut Vec<(usize, usize, f64)>| {
            trip.push((a, b, -w));
            trip.push((b, a, -w));
            diag[a] += w;
            diag[b] += w;
        };
        for j in 0..ny {
            for i in 0..nx {
                let k = mesh.index(i, j);
                if i + 1 < nx {
                    let w = if j == 0 || j == ny - 1 { 0.5 } else { 1.0 };
                    edge(k, mesh.index(i + 1, j), w, &mut trip);
                }
                if j + 1 < ny {
                    let w = if i == 0 || i == nx - 1 { 0.5 } else { 1.0 };
                    edge(k, mesh.index(i, j + 1), w, &mut trip);
                }
            }
        }
        trip.extend(diag.iter().enumerate().map(|(k, &d)| (k, k, d)));
        let g = CscMatrix::from_triplets(n, n, &trip)?;
        let c = CscMatrix::diagonal(&area);
        let cinv = CscMatrix::diagonal(&area.iter().map(|a| 1.0 / a).collect::<Vec<_>>());
        let gcg = symmetrize(&g.matmul(&cinv)?.matmul(&g)?)?;
        Ok(Self { c, g, gcg, spacing: h })
    }

    pub fn dim(&self) -> usize {
        self.c.nrows()
    }

    /// Unit-variance precision for range `rho`.
    pub fn precision(&self, rho: f64) -> Result<SparsePrecision> {
        let [a, b, c] = precision_coefficients(rho, self.spacing)?;
        let q = self.c.scale(a).add(&self.g.scale(b))?.add(&self.gcg.scale(c))?;
        SparsePrecision::new(q)
    }
}

/// Coefficients of `(C, G, G C^{-1} G)` in the precision for range `rho` on
/// a lattice of the given spacing: `tau^2 (kappa^4, 2 kappa^2, 1)` with
/// `kappa = sqrt(8) / rho` and `tau^2` giving unit marginal variance at
/// nodes far from the boundary of the lattice.
pub fn precision_coefficients(rho: f64, spacing: f64) -> Result<[f64; 3]> {
    if !(rho > 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("range must be positive, got {rho}")));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::invalid(format!("spacing must be positive, got {spacing}")));
    }
    let k2 = 8.0 / (rho * rho);
    // continuum normalization 1 / (4 pi kappa^2), corrected by the lattice variance
    let t2 = lattice_variance(k2 * spacing * spacing) / (4.0 * PI * k2);
    Ok([t2 * k2 * k2, 2.0 * t2 * k2, t2])
}

/// Marginal variance of the infinite-lattice field with the continuum
/// normalization, as a function of `a = kappa^2 h^2`. With the stencil symbol
/// `(a + 4 - 2 cos wx - 2 cos wy)^2 / h^2` the variance reduces through the
/// square-lattice Green's function to `E(k) / (1 + a / 8)`, `k = 4 / (4 + a)`,
/// which tends to 1 as `a -> 0`.
pub fn lattice_variance(a: f64) -> f64 {
    // complementary modulus from 1 - k = a / (4 + a) without cancellation
    let kc = ((a / (4.0 + a)) * ((8.0 + a) / (4.0 + a))).sqrt();
    elliptic_e(kc) / (1.0 + a / 8.0)
}

/// Complete elliptic integral of the second kind `E(k)` from the
/// complementary modulus `k' = sqrt(1 - k^2)`, by the arithmetic-geometric mean.
fn elliptic_e(kc: f64) -> f64 {
    let (mut a, mut b) = (1.0f64, kc);
    let mut c = (1.0 - kc * kc).sqrt();
    let mut sum = 0.5 * c * c;
    let mut pow = 0.5;
    for _ in 0..64 {
        if c <= 1e-17 * a {
            break;
        }
        let an = 0.5 * (a + b);
        // c_{n+1} = (a_n - b_n) / 2 = c_n^2 / (4 a_{n+1}), free of cancellation
        c = c * c / (4.0 * an);
        b = (a * b).sqrt();
        a = an;
        pow *= 2.0;
        sum += pow * c * c;
    }
    PI / (2.0 * a) * (1.0 - sum)
}

/// Averages a matrix with its transpose so rounding cannot break exact symmetry.
fn symmetrize(m: &CscMatrix) -> Result<CscMatrix> {
    Ok(m.add(&m.transpose())?.scale(0.5))
}

pub fn build_precision(mesh: &Mesh, rho: f64) -> Result<SparsePrecision> {
    precision_coefficients(rho, mesh.spacing)?;
    SpdeOperators::new(mesh)?.precision(rho)
}

/// Sparse interpolation from mesh nodes to sites (`N x |mesh|`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    matrix: CscMatrix,
}

impl ProjectionMatrix {
    pub fn from_matrix(matrix: CscMatrix) -> Self {
        Self { matrix }
    }

    pub fn matrix(&self) -> &CscMatrix {
        &self.matrix
    }

    pub fn n_sites(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_nodes(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.n_sites()];
        for (i, _, v) in self.matrix.triplets() {
            s[i] += v;
        }
        s
    }
}

/// Bilinear weights of each site in its enclosing lattice cell. Exact zero
/// weights are dropped, so a site on a node has a single entry.
pub fn build_projection(mesh: &Mesh, sites: &[[f64; 2]]) -> Result<ProjectionMatrix> {
    let ext = mesh.extent();
    let tol = 1e-9 * mesh.spacing;
    let mut outside = Vec::new();
    let mut trip = Vec::with_capacity(4 * sites.len());
    for (r, s) in sites.iter().enumerate() {
        let inside = s[0] >= ext.xmin - tol && s[0] <= ext.xmax + tol && s[1] >= ext.ymin - tol && s[1] <= ext.ymax + tol;
        if !inside || !s[0].is_finite() || !s[1].is_finite() {
            outside.push(r);
            continue;
        }
        let locate = |v: f64, v0: f64, n: usize| {
            let t = ((v - v0) / mesh.spacing).clamp(0.0, (n - 1) as f64);
            let i = (t.floor() as usize).min(n - 2);
            (i, t - i as f64)
        };
        let (i, fx) = locate(s[0], mesh.x0, mesh.nx);
        let (j, fy) = locate(s[1], mesh.y0, mesh.ny);
        for (di, dj, w) in [
            (0, 0, (1.0 - fx) * (1.0 - fy)),
            (1, 0, fx * (1.0 - fy)),
            (0, 1, (1.0 - fx) * fy),
            (1, 1, fx * fy),
        ] {
            if w > 0.0 {
                trip.push((r, mesh.index(i + di, j + dj), w));
            }
        }
    }
    if !outside.is_empty() {
        return Err(Error::OutOfHull { sites: outside });
    }
    Ok(ProjectionMatrix { matrix: CscMatrix::from_triplets(sites.len(), mesh.n_nodes(), &trip)? })
}

/// Draw from `Normal(0, s^2 Q^{-1})` given a factor of `Q`.
pub fn gmrf_sample_with_factor<R: Rng + ?Sized>(factor: &CholeskyFactor, s: f64, rng: &mut R) -> Vec<f64> {
    let z: Vec<f64> = (0..factor.dim()).map(|_| rng.sample(StandardNormal)).collect();
    factor.apply_inverse_upper(&z).into_iter().map(|v| s * v).collect()
}

pub fn gmrf_sample<R: Rng + ?Sized>(q: &SparsePrecision, s: f64, rng: &mut R) -> Result<Vec<f64>> {
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("GMRF scale must be positive, got {s}")));
    }
    Ok(gmrf_sample_with_factor(&q.cholesky()?, s, rng))
}

/// `log N(x; 0, s^2 Q^{-1})`.
pub fn gmrf_log_density(x: &[f64], q: &SparsePrecision, s: f64) -> Result<f64> {
    if x.len() != q.dim() {
        return Err(Error::invalid(format!("vector of length {} for a precision of dimension {}", x.len(), q.dim())));
    }
    if !(s > 0.0 && s.is_finite()) {
        return Err(Error::invalid(format!("GMRF scale must be positive, got {s}")));
    }
    let f = q.cholesky()?;
    Ok(gmrf_log_density_with_factor(x, q.matrix(), &f, s))
}

pub fn gmrf_log_density_with_factor(x: &[f64], q: &CscMatrix, factor: &CholeskyFactor, s: f64) -> f64 {
    let d = x.len() as f64;
    -0.5 * d * (2.0 * PI).ln() + 0.5 * factor.log_det() - d * s.ln() - 0.5 * q.quad_form(x) / (s * s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn lattice(n: usize) -> Mesh {
        Mesh { x0: 0.0, y0: 0.0, nx: n, ny: n, spacing: 1.0 }
    }

    fn dense_cov(q: &SparsePrecision) -> DMatrix<f64> {
        q.matrix().to_dense().try_inverse().unwrap()
    }

    fn corr(cov: &DMatrix<f64>, a: usize, b: usize) -> f64 {
        cov[(a, b)] / (cov[(a, a)] * cov[(b, b)]).sqrt()
    }

    #[test]
    fn mesh_counts() {
        let unit = BBox::new(0.0, 1.0, 0.0, 1.0);
        assert_eq!(build_mesh(unit, 0.5, 0.0).unwrap().n_nodes(), 9);
        assert_eq!(build_mesh(unit, 0.5, 1.0).unwrap().n_nodes(), 49);
        assert!(build_mesh(unit, 1.5, 0.0).is_err());
        assert!(build_mesh(BBox::new(0.0, 0.0, 0.0, 1.0), 0.1, 0.0).is_err());
        let m = build_mesh(BBox::new(0.0, 1.1, 0.0, 1.0), 0.5, 0.0).unwrap();
        assert!(m.extent().xmax >= 1.1);
    }

    #[test]
    fn coarse_mesh_has_fewer_nodes_than_sites() {
        let sites: Vec<[f64; 2]> = (0..30).flat_map(|i| (0..30).map(move |j| [i as f64 * 0.25, j as f64 * 0.25])).collect();
        let spacing = 1.5 * min_neighbour_distance(&sites).unwrap();
        let mesh = build_mesh(BBox::of_points(&sites).unwrap(), spacing, 0.0).unwrap();
        assert!(mesh.n_nodes() < sites.len());
    }

    #[test]
    fn precision_is_symmetric_pd() {
        for (n, rho) in [(5, 1.0), (8, 3.0), (4, 10.0)] {
            let q = build_precision(&lattice(n), rho).unwrap();
            assert!(q.matrix().is_symmetric());
            assert!(q.cholesky().is_ok());
        }
        assert!(build_precision(&lattice(4), 0.0).is_err());
    }

    #[test]
    fn correlation_at_range() {
        let m = lattice(10);
        let cov = dense_cov(&build_precision(&m, 3.0).unwrap());
        let c = corr(&cov, m.index(3, 5), m.index(6, 5));
        assert!((0.08..=0.18).contains(&c), "{c}");
    }

    #[test]
    fn correlation_increases_with_range() {
        let m = lattice(10);
        let (a, b) = (m.index(3, 4), m.index(6, 4));
        let c2 = corr(&dense_cov(&build_precision(&m, 2.0).unwrap()), a, b);
        let c6 = corr(&dense_cov(&build_precision(&m, 6.0).unwrap()), a, b);
        assert!(c6 > c2);
    }

    #[test]
    fn lattice_variance_matches_double_sum() {
        for &a in &[0.05, 0.4, 3.0] {
            // midpoint rule on the full 2-d symbol
            let n = 1200;
            let w = 2.0 * PI / n as f64;
            let mut acc = 0.0;
            for i in 0..n {
                let cx = (-PI + (i as f64 + 0.5) * w).cos();
                for j in 0..n {
                    let g = 4.0 - 2.0 * cx - 2.0 * (-PI + (j as f64 + 0.5) * w).cos();
                    acc += 1.0 / ((a + g) * (a + g));
                }
            }
            let want = a * acc * w * w / PI;
            assert!((lattice_variance(a) - want).abs() < 1e-6 * want, "a={a}");
        }
        assert!((lattice_variance(1e-8) - 1.0).abs() < 1e-6);
        // E(0) = pi / 2, E(1/sqrt 2) = 1.3506438810476755
        assert!((elliptic_e(1.0) - PI / 2.0).abs() < 1e-15);
        let e = elliptic_e(0.5f64.sqrt());
        assert!((e - 1.3506438810476755).abs() < 1e-14, "{e}");
    }

    #[test]
    fn interior_variance_is_near_one() {
        let m = lattice(30);
        let rho = 6.0;
        let cov = dense_cov(&build_precision(&m, rho).unwrap());
        for j in 6..24 {
            for i in 6..24 {
                let v = cov[(m.index(i, j), m.index(i, j))];
                assert!((v - 1.0).abs() < 0.1, "node ({i},{j}) variance {v}");
            }
        }
    }

    #[test]
    fn interior_sign_pattern() {
        let m = lattice(9);
        let q = build_precision(&m, 3.0).unwrap();
        let qd = q.matrix().to_dense();
        for j in 2..7 {
            for i in 2..7 {
                let k = m.index(i, j);
                let row_sum: f64 = qd.row(k).iter().sum();
                assert!(row_sum > 0.0);
                for (di, dj) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
                    let nb = m.index((i as i64 + di) as usize, (j as i64 + dj) as usize);
                    assert!(qd[(k, nb)] < 0.0);
                }
            }
        }
    }

    #[test]
    fn projection_weights() {
        let m = lattice(4);
        let p = build_projection(&m, &[[1.0, 2.0], [1.5, 1.5], [3.0, 3.0]]).unwrap();
        let d = p.matrix().to_dense();
        assert_eq!(d[(0, m.index(1, 2))], 1.0);
        assert_eq!(d.row(0).iter().filter(|v| **v != 0.0).count(), 1);
        for (i, j) in [(1, 1), (2, 1), (1, 2), (2, 2)] {
            assert_eq!(d[(1, m.index(i, j))], 0.25);
        }
        assert_eq!(d[(2, m.index(3, 3))], 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sites: Vec<[f64; 2]> = (0..200).map(|_| [rng.gen::<f64>() * 3.0, rng.gen::<f64>() * 3.0]).collect();
        let p = build_projection(&m, &sites).unwrap();
        assert!(p.row_sums().iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert!(p.matrix().values().iter().all(|&w| w >= 0.0));
        for r in 0..sites.len() {
            assert!(p.matrix().triplets().iter().filter(|t| t.0 == r).count() <= 4);
        }
    }

    #[test]
    fn out_of_hull_sites_are_listed() {
        let err = build_projection(&lattice(3), &[[0.5, 0.5], [2.5, 0.5], [-1.0, 1.0]]).unwrap_err();
        assert!(matches!(err, Error::OutOfHull { sites } if sites == vec![1, 2]));
    }

    #[test]
    fn log_density_oracles() {
        let eye = SparsePrecision::new(CscMatrix::identity(5)).unwrap();
        let v = gmrf_log_density(&[0.0; 5], &eye, 1.0).unwrap();
        assert!((v + 2.5 * (2.0 * PI).ln()).abs() < 1e-14);

        let m = lattice(5);
        let q = build_precision(&m, 2.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f64> = (0..25).map(|_| rng.sample(StandardNormal)).collect();
        let s = 1.7;
        let qd = q.matrix().to_dense() / (s * s);
        let xv = DVector::from_vec(x.clone());
        let dense = -12.5 * (2.0 * PI).ln() + 0.5 * qd.clone().cholesky().unwrap().determinant().ln() - 0.5 * (xv.transpose() * &qd * &xv)[0];
        assert!((gmrf_log_density(&x, &q, s).unwrap() - dense).abs() < 1e-8);

        let scaled: Vec<f64> = x.iter().map(|v| v / s).collect();
        let lhs = gmrf_log_density(&x, &q, s).unwrap();
        let rhs = gmrf_log_density(&scaled, &q, 1.0).unwrap() - 25.0 * s.ln();
        assert!((lhs - rhs).abs() < 1e-10);
        assert!(gmrf_log_density(&x[..3], &q, 1.0).is_err());
    }

    #[test]
    fn identity_sampler_covariance_and_determinism() {
        let eye = SparsePrecision::new(CscMatrix::identity(5)).unwrap();
        let f = eye.cholesky().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(5, 5);
        for _ in 0..n {
            let x = DVector::from_vec(gmrf_sample_with_factor(&f, 1.0, &mut rng));
            acc += &x * x.transpose();
        }
        acc /= n as f64;
        assert!((acc - DMatrix::identity(5, 5)).abs().max() < 0.02);

        let a = gmrf_sample(&eye, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = gmrf_sample(&eye, 1.0, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn quadratic_form_expectation() {
        let m = lattice(6);
        let q = build_precision(&m, 2.0).unwrap();
        let f = q.cholesky().unwrap();
        let s = 0.8;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 4000;
        let mean = (0..n).map(|_| q.matrix().quad_form(&gmrf_sample_with_factor(&f, s, &mut rng)) / (s * s)).sum::<f64>() / n as f64;
        // chi-square with 36 degrees of freedom: sd of the mean is sqrt(72 / n)
        assert!((mean - 36.0).abs() < 4.0 * (72.0 / n as f64).sqrt());
    }
}
