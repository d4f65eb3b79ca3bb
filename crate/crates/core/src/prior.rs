//! Finite-element discretization of the Laplace-type SPDE prior
//! `(gamma - Laplacian)^(beta/2) u = white noise`.
//!
//! With lumped mass `M` and stiffness `K` the precision is `gamma M + K` in 1D
//! and `(gamma M + K) M^-1 (gamma M + K)` in 2D. The spectrum `chi` of
//! `M^-1 K` is computed once, which makes `log det P_gamma` an `O(n)` sum.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::grid::DiscretizationGrid;
use crate::linalg::{BandedCholesky, BandedSym};

const EIGEN_CLAMP_TOL: f64 = 1e-10;

/// Order `beta` of the SPDE operator; tied to the spatial dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpdeOrder {
    One,
    Two,
}

#[derive(Clone, Debug)]
pub struct PriorOperators {
    grid: Option<DiscretizationGrid>,
    lumped_mass: Vec<f64>,
    stiffness: BandedSym,
    eigenvalues: Vec<f64>,
    order: SpdeOrder,
}

impl PriorOperators {
    /// Assembles lumped mass, stiffness and the spectrum of `M^-1 K`.
    ///
    /// Natural boundary conditions: constants lie in the null space of `K`.
    pub fn assemble(grid: &DiscretizationGrid) -> Result<Self> {
        let (lumped_mass, stiffness) = match grid {
            DiscretizationGrid::Interval { nodes } => assemble_interval(nodes)?,
            DiscretizationGrid::Rect { nx, ny, .. } => {
                let (hx, hy) = grid.cell_size().unwrap();
                assemble_rect(*nx, *ny, hx, hy)
            }
        };
        let raw = if grid.is_uniform() {
            closed_form_spectrum(grid)
        } else {
            dense_spectrum(&lumped_mass, &stiffness)
        };
        let eigenvalues = clamp_spectrum(raw)?;
        let order = match grid.dim() {
            1 => SpdeOrder::One,
            _ => SpdeOrder::Two,
        };
        Ok(Self {
            grid: Some(grid.clone()),
            lumped_mass,
            stiffness,
            eigenvalues,
            order,
        })
    }

    /// Operators from explicit matrices; the spectrum comes from a dense
    /// eigen-solve. Useful for small or non-geometric hierarchies.
    pub fn from_parts(lumped_mass: Vec<f64>, stiffness: BandedSym, order: SpdeOrder) -> Result<Self> {
        if lumped_mass.is_empty() || stiffness.dim() != lumped_mass.len() {
            return Err(Error::Dimension {
                what: "stiffness matrix",
                expected: lumped_mass.len(),
                got: stiffness.dim(),
            });
        }
        if let Some(m) = lumped_mass.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(Error::Grid(format!("lumped mass entry {m} is not positive")));
        }
        let eigenvalues = clamp_spectrum(dense_spectrum(&lumped_mass, &stiffness))?;
        Ok(Self {
            grid: None,
            lumped_mass,
            stiffness,
            eigenvalues,
            order,
        })
    }

    pub fn grid(&self) -> Option<&DiscretizationGrid> {
        self.grid.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.lumped_mass.len()
    }

    pub fn order(&self) -> SpdeOrder {
        self.order
    }

    pub fn lumped_mass(&self) -> &[f64] {
        &self.lumped_mass
    }

    pub fn stiffness(&self) -> &BandedSym {
        &self.stiffness
    }

    /// Ascending eigenvalues of `M^-1 K`, clamped at zero.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn precision(&self, gamma: f64) -> Result<BandedSym> {
        check_gamma(gamma)?;
        let mass = BandedSym::from_diagonal(&self.lumped_mass);
        let shifted = BandedSym::linear_combination(&[(gamma, &mass), (1.0, &self.stiffness)]);
        Ok(match self.order {
            SpdeOrder::One => shifted,
            SpdeOrder::Two => {
                let inv: Vec<f64> = self.lumped_mass.iter().map(|m| 1.0 / m).collect();
                shifted.sandwich_diag(&inv)
            }
        })
    }

    /// `log det P_gamma` from the precomputed spectrum.
    pub fn log_det(&self, gamma: f64) -> Result<f64> {
        check_gamma(gamma)?;
        let log_mass: f64 = self.lumped_mass.iter().map(|m| m.ln()).sum();
        Ok(log_mass + self.power() * self.log_shifted_spectrum(gamma)?)
    }

    /// `sum_i log(chi_i + gamma)`.
    pub fn log_shifted_spectrum(&self, gamma: f64) -> Result<f64> {
        let mut s = 0.0;
        for chi in &self.eigenvalues {
            let v = chi + gamma;
            if !(v > 0.0) {
                return Err(Error::domain(format!(
                    "chi + gamma = {v} is not positive (gamma = {gamma})"
                )));
            }
            s += v.ln();
        }
        Ok(s)
    }

    /// Exponent of `prod (chi_i + gamma)` in `det P_gamma`: 1 in 1D, 2 in 2D.
    pub fn power(&self) -> f64 {
        match self.order {
            SpdeOrder::One => 1.0,
            SpdeOrder::Two => 2.0,
        }
    }

    /// `||v||^2_M` with the lumped mass.
    pub fn mass_norm_sq(&self, v: &DVector<f64>) -> f64 {
        v.iter().zip(&self.lumped_mass).map(|(x, m)| m * x * x).sum()
    }

    /// `||v||^2_K`.
    pub fn stiffness_norm_sq(&self, v: &DVector<f64>) -> f64 {
        self.stiffness.quad_form(v)
    }

    /// `||v||^2_{P_gamma}` without assembling the precision.
    pub fn precision_norm_sq(&self, gamma: f64, v: &DVector<f64>) -> f64 {
        match self.order {
            SpdeOrder::One => gamma * self.mass_norm_sq(v) + self.stiffness_norm_sq(v),
            SpdeOrder::Two => {
                // (gM + K) v, then weighted by M^-1
                let kv = self.stiffness.mul_vec(v);
                kv.iter()
                    .zip(v.iter())
                    .zip(&self.lumped_mass)
                    .map(|((k, x), m)| {
                        let w = gamma * m * x + k;
                        w * w / m
                    })
                    .sum()
            }
        }
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("gamma must be positive and finite, got {gamma}")))
    }
}

fn assemble_interval(nodes: &[f64]) -> Result<(Vec<f64>, BandedSym)> {
    let n = nodes.len();
    let mut mass = vec![0.0; n];
    let mut k = BandedSym::zeros(n, 1);
    for e in 0..n - 1 {
        let h = nodes[e + 1] - nodes[e];
        if !(h > 0.0) {
            return Err(Error::Grid(format!("degenerate element {e} (length {h})")));
        }
        mass[e] += 0.5 * h;
        mass[e + 1] += 0.5 * h;
        k.add(e, e, 1.0 / h);
        k.add(e + 1, e + 1, 1.0 / h);
        k.add(e + 1, e, -1.0 / h);
    }
    Ok((mass, k))
}

/// Bilinear elements between cell centres; the element stiffness is
/// `k_x (x) m_y + m_x (x) k_y` with consistent 1D factors.
fn assemble_rect(nx: usize, ny: usize, hx: f64, hy: f64) -> (Vec<f64>, BandedSym) {
    let n = nx * ny;
    let mut mass = vec![0.0; n];
    let mut k = BandedSym::zeros(n, nx + 1);
    let k1 = |h: f64, a: usize, b: usize| if a == b { 1.0 / h } else { -1.0 / h };
    let m1 = |h: f64, a: usize, b: usize| if a == b { h / 3.0 } else { h / 6.0 };
    for ey in 0..ny - 1 {
        for ex in 0..nx - 1 {
            let local = |a: usize| (a & 1, a >> 1);
            let node = |a: usize| {
                let (dx, dy) = local(a);
                ex + dx + nx * (ey + dy)
            };
            for a in 0..4 {
                mass[node(a)] += 0.25 * hx * hy;
                for b in 0..=a {
                    let (ax, ay) = local(a);
                    let (bx, by) = local(b);
                    let v = k1(hx, ax, bx) * m1(hy, ay, by) + m1(hx, ax, bx) * k1(hy, ay, by);
                    k.add(node(a), node(b), v);
                }
            }
        }
    }
    (mass, k)
}

/// Spectrum of `M^-1 K` for one uniform axis with natural boundaries:
/// `(2 - 2 cos(k pi / (n - 1))) / h^2`.
fn axis_spectrum(n: usize, h: f64) -> Vec<f64> {
    (0..n)
        .map(|k| (2.0 - 2.0 * (k as f64 * PI / (n - 1) as f64).cos()) / (h * h))
        .collect()
}

fn closed_form_spectrum(grid: &DiscretizationGrid) -> Vec<f64> {
    let mut chi = match grid {
        DiscretizationGrid::Interval { nodes } => {
            let n = nodes.len();
            axis_spectrum(n, (nodes[n - 1] - nodes[0]) / (n - 1) as f64)
        }
        DiscretizationGrid::Rect { nx, ny, .. } => {
            let (hx, hy) = grid.cell_size().unwrap();
            let mx = axis_spectrum(*nx, hx);
            let my = axis_spectrum(*ny, hy);
            // consistent mass satisfies M_c = M_lumped - (h^2 / 6) K per axis
            let mut out = Vec::with_capacity(nx * ny);
            for a in &mx {
                for b in &my {
                    out.push(a * (1.0 - hy * hy * b / 6.0) + (1.0 - hx * hx * a / 6.0) * b);
                }
            }
            out
        }
    };
    chi.sort_by(|a, b| a.partial_cmp(b).unwrap());
    chi
}

/// Eigenvalues of `M^-1/2 K M^-1/2` by a dense symmetric eigen-solve.
pub fn dense_spectrum(lumped_mass: &[f64], stiffness: &BandedSym) -> Vec<f64> {
    let n = lumped_mass.len();
    let s: Vec<f64> = lumped_mass.iter().map(|m| 1.0 / m.sqrt()).collect();
    let k = stiffness.to_dense();
    let a = DMatrix::from_fn(n, n, |i, j| s[i] * k[(i, j)] * s[j]);
    let mut chi: Vec<f64> = a.symmetric_eigenvalues().iter().copied().collect();
    chi.sort_by(|a, b| a.partial_cmp(b).unwrap());
    chi
}

fn clamp_spectrum(raw: Vec<f64>) -> Result<Vec<f64>> {
    let scale = raw.iter().fold(1.0f64, |a, b| a.max(b.abs()));
    raw.into_iter()
        .map(|chi| {
            if chi >= 0.0 {
                Ok(chi)
            } else if chi >= -EIGEN_CLAMP_TOL * scale {
                Ok(0.0)
            } else {
                Err(Error::Factorization(format!(
                    "stiffness spectrum has negative eigenvalue {chi}"
                )))
            }
        })
        .collect()
}

/// Gaussian prior `N(m, (delta P_gamma)^-1)` with its precision factorized.
#[derive(Clone, Debug)]
pub struct PriorModel {
    ops: Arc<PriorOperators>,
    mean: DVector<f64>,
    delta: f64,
    gamma: f64,
    precision: BandedSym,
    factor: BandedCholesky,
}

impl PriorModel {
    pub fn new(ops: Arc<PriorOperators>, mean: DVector<f64>, delta: f64, gamma: f64) -> Result<Self> {
        if mean.len() != ops.dim() {
            return Err(Error::Dimension {
                what: "prior mean",
                expected: ops.dim(),
                got: mean.len(),
            });
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(Error::domain(format!("delta must be positive and finite, got {delta}")));
        }
        let precision = ops.precision(gamma)?;
        let factor = precision
            .cholesky()
            .map_err(|e| Error::Factorization(format!("prior precision at gamma = {gamma}: {e}")))?;
        Ok(Self {
            ops,
            mean,
            delta,
            gamma,
            precision,
            factor,
        })
    }

    pub fn operators(&self) -> &Arc<PriorOperators> {
        &self.ops
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `P_gamma` (without the `delta` scale).
    pub fn precision(&self) -> &BandedSym {
        &self.precision
    }

    /// Cholesky factor `L` of `P_gamma`; `delta P_gamma = (sqrt(delta) L)(sqrt(delta) L)^T`.
    pub fn factor(&self) -> &BandedCholesky {
        &self.factor
    }

    pub fn log_det_precision(&self) -> f64 {
        self.factor.log_det()
    }

    /// `||u - m||^2_{P_gamma}`.
    pub fn misfit_sq(&self, u: &DVector<f64>) -> f64 {
        self.precision.quad_form(&(u - &self.mean))
    }

    pub fn logpdf(&self, u: &DVector<f64>) -> Result<f64> {
        if u.len() != self.dim() {
            return Err(Error::Dimension {
                what: "prior argument",
                expected: self.dim(),
                got: u.len(),
            });
        }
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prior argument"));
        }
        let n = self.dim() as f64;
        Ok(-0.5 * n * (2.0 * PI).ln() + 0.5 * n * self.delta.ln() + 0.5 * self.log_det_precision()
            - 0.5 * self.delta * self.misfit_sq(u))
    }

    /// Draws `m + z`, `z ~ N(0, (delta P_gamma)^-1)`, via `L^T z = w / sqrt(delta)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        &self.mean + self.sample_centered(rng)
    }

    pub fn sample_centered<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let w = DVector::from_fn(self.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
        self.factor.solve_upper(&w) / self.delta.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn two_node() -> PriorOperators {
        PriorOperators::assemble(&DiscretizationGrid::unit_interval(2).unwrap()).unwrap()
    }

    fn dense_logdet(a: &DMatrix<f64>) -> f64 {
        let c = a.clone().cholesky().unwrap();
        2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    #[test]
    fn two_node_assembly() {
        let ops = two_node();
        assert_eq!(ops.lumped_mass(), &[0.5, 0.5]);
        let k = ops.stiffness().to_dense();
        assert_eq!(k, DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]));
        assert!((ops.eigenvalues()[0]).abs() < 1e-14);
        assert!((ops.eigenvalues()[1] - 4.0).abs() < 1e-12);
        let p = ops.precision(2.0).unwrap().to_dense();
        assert!((p - DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0])).amax() < 1e-14);
        assert!((ops.log_det(2.0).unwrap() - 3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn stiffness_annihilates_constants() {
        for grid in [
            DiscretizationGrid::interval(vec![0.0, 0.1, 0.35, 0.4, 1.0]).unwrap(),
            DiscretizationGrid::rect(5, 4, [0.0, 0.0], [1.0, 2.0]).unwrap(),
        ] {
            let ops = PriorOperators::assemble(&grid).unwrap();
            let ones = DVector::from_element(ops.dim(), 1.0);
            assert!(ops.stiffness().mul_vec(&ones).amax() < 1e-12);
        }
    }

    #[test]
    fn scalar_operators_from_parts() {
        let ops = PriorOperators::from_parts(vec![1.0], BandedSym::zeros(1, 0), SpdeOrder::One).unwrap();
        assert_eq!(ops.eigenvalues(), &[0.0]);
        assert!((ops.log_det(2.5).unwrap() - 2.5f64.ln()).abs() < 1e-15);
        assert!(PriorOperators::from_parts(vec![0.0], BandedSym::zeros(1, 0), SpdeOrder::One).is_err());
    }

    #[test]
    fn gamma_must_be_positive() {
        let ops = two_node();
        assert!(matches!(ops.precision(0.0), Err(Error::Domain(_))));
        assert!(matches!(ops.log_det(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn closed_form_spectrum_matches_dense_eigensolve() {
        for grid in [
            DiscretizationGrid::unit_interval(17).unwrap(),
            DiscretizationGrid::rect(5, 4, [-1.0, 0.0], [1.0, 3.0]).unwrap(),
        ] {
            let ops = PriorOperators::assemble(&grid).unwrap();
            let dense = dense_spectrum(ops.lumped_mass(), ops.stiffness());
            for (a, b) in ops.eigenvalues().iter().zip(&dense) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn factored_and_expanded_2d_precision_agree() {
        let grid = DiscretizationGrid::rect(4, 4, [-15.0, -15.0], [15.0, 15.0]).unwrap();
        let ops = PriorOperators::assemble(&grid).unwrap();
        let gamma = 0.7;
        let m = DMatrix::from_diagonal(&DVector::from_column_slice(ops.lumped_mass()));
        let minv = m.map(|v| if v != 0.0 { 1.0 / v } else { 0.0 });
        let k = ops.stiffness().to_dense();
        let shifted = &m * gamma + &k;
        let factored = &shifted * &minv * &shifted;
        let expanded = ops.precision(gamma).unwrap().to_dense();
        assert!((&factored - &expanded).amax() < 1e-12 * factored.amax());
        let direct = &m * gamma * gamma + &k * (2.0 * gamma) + &k * &minv * &k;
        assert!((direct - expanded).amax() < 1e-12 * factored.amax());
    }

    #[test]
    fn logdet_matches_dense_on_random_interval() {
        let mut nodes: Vec<f64> = vec![0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..63 {
            nodes.push(nodes.last().unwrap() + 0.2 + rng.random::<f64>());
        }
        let grid = DiscretizationGrid::interval(nodes).unwrap();
        let ops = PriorOperators::assemble(&grid).unwrap();
        for gamma in [1e-3, 0.5, 20.0] {
            let dense = dense_logdet(&ops.precision(gamma).unwrap().to_dense());
            let fast = ops.log_det(gamma).unwrap();
            assert!((dense - fast).abs() <= 1e-8 * dense.abs().max(1.0), "{dense} vs {fast}");
        }
    }

    #[test]
    fn logpdf_at_mean_and_quadratic_term() {
        let ops = Arc::new(two_node());
        let prior = PriorModel::new(ops, DVector::zeros(2), 1.0, 2.0).unwrap();
        let at_mean = prior.logpdf(&DVector::zeros(2)).unwrap();
        let expected = -(2.0 * PI).ln() + 0.5 * 3f64.ln();
        assert!((at_mean - expected).abs() < 1e-14);
        let off = prior.logpdf(&DVector::from_vec(vec![1.0, 0.0])).unwrap();
        assert!((off - at_mean + 1.0).abs() < 1e-14);
        assert!(matches!(
            prior.logpdf(&DVector::from_vec(vec![f64::NAN, 0.0])),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn precision_norm_matches_assembled_matrix() {
        let grid = DiscretizationGrid::rect(5, 3, [0.0, 0.0], [2.0, 1.0]).unwrap();
        let ops = PriorOperators::assemble(&grid).unwrap();
        let v = DVector::from_fn(ops.dim(), |i, _| (i as f64 * 0.7).cos());
        let p = ops.precision(1.3).unwrap();
        assert!((p.quad_form(&v) - ops.precision_norm_sq(1.3, &v)).abs() < 1e-10);
    }

    #[test]
    fn repeat_draw_is_bit_identical() {
        let ops = Arc::new(two_node());
        let prior = PriorModel::new(ops, DVector::from_vec(vec![1.0, -1.0]), 2.0, 2.0).unwrap();
        let a = prior.sample(&mut ChaCha8Rng::seed_from_u64(11));
        let b = prior.sample(&mut ChaCha8Rng::seed_from_u64(11));
        assert_eq!(a, b);
    }

    #[test]
    fn sample_moments_match_covariance() {
        let ops = Arc::new(two_node());
        let mean = DVector::from_vec(vec![0.3, -0.2]);
        let prior = PriorModel::new(ops, mean.clone(), 1.5, 2.0).unwrap();
        let cov = (prior.precision().to_dense() * 1.5).try_inverse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let draws: Vec<DVector<f64>> = (0..10_000).map(|_| prior.sample(&mut rng)).collect();
        let n = draws.len() as f64;
        let avg = draws.iter().fold(DVector::zeros(2), |a, d| a + d) / n;
        for i in 0..2 {
            let se = (cov[(i, i)] / n).sqrt();
            assert!((avg[i] - mean[i]).abs() < 3.0 * se);
        }
        let mut emp = DMatrix::zeros(2, 2);
        for d in &draws {
            let c = d - &avg;
            emp += &c * c.transpose();
        }
        emp /= n - 1.0;
        for i in 0..2 {
            for j in 0..2 {
                assert!((emp[(i, j)] - cov[(i, j)]).abs() < 0.05 * cov[(i, j)].abs(), "{emp} vs {cov}");
            }
        }
    }

    #[test]
    fn whitened_draws_look_standard_normal() {
        let grid = DiscretizationGrid::rect(5, 4, [0.0, 0.0], [1.0, 1.0]).unwrap();
        let ops = Arc::new(PriorOperators::assemble(&grid).unwrap());
        let prior = PriorModel::new(ops, DVector::zeros(20), 3.0, 0.8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut pooled = Vec::with_capacity(100_000);
        while pooled.len() < 100_000 {
            let z = prior.factor().mul_upper(&prior.sample(&mut rng)) * 3f64.sqrt();
            pooled.extend(z.iter());
        }
        let n = pooled.len() as f64;
        let mean = pooled.iter().sum::<f64>() / n;
        let m2 = pooled.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let m3 = pooled.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
        let m4 = pooled.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
        assert!((m2 - 1.0).abs() < 0.02);
        assert!((m3 / m2.powf(1.5)).abs() < 0.1);
        assert!((m4 / (m2 * m2) - 3.0).abs() < 0.2);
    }

    #[test]
    fn precision_is_symmetric_positive_definite_with_shifted_spectrum() {
        let grid = DiscretizationGrid::interval(vec![0.0, 0.2, 0.3, 0.7, 0.75, 1.0]).unwrap();
        let ops = PriorOperators::assemble(&grid).unwrap();
        let gamma = 0.4;
        let p = ops.precision(gamma).unwrap().to_dense();
        assert!((&p - p.transpose()).amax() < 1e-12);
        assert!(p.clone().symmetric_eigenvalues().min() > 0.0);
        let s: Vec<f64> = ops.lumped_mass().iter().map(|m| 1.0 / m.sqrt()).collect();
        let sym = DMatrix::from_fn(6, 6, |i, j| s[i] * p[(i, j)] * s[j]);
        let mut eig: Vec<f64> = sym.symmetric_eigenvalues().iter().copied().collect();
        eig.sort_by(f64::total_cmp);
        for (e, chi) in eig.iter().zip(ops.eigenvalues()) {
            assert!((e - chi - gamma).abs() < 1e-10);
        }
    }

    #[test]
    fn large_gamma_is_dominated_by_mass() {
        let ops = PriorOperators::assemble(&DiscretizationGrid::unit_interval(9).unwrap()).unwrap();
        let gamma = 1e6;
        let p = ops.precision(gamma).unwrap();
        // relative gap K_ii / (gamma M_ii) is bounded by chi_max / gamma
        let chi_max = ops.eigenvalues().last().unwrap();
        for (i, m) in ops.lumped_mass().iter().enumerate() {
            assert!((p.get(i, i) - gamma * m).abs() <= chi_max / gamma * gamma * m);
            if i > 0 {
                assert!(p.get(i, i - 1).abs() <= chi_max / gamma * gamma * m);
            }
        }
    }

    #[test]
    fn delta_scaling_changes_logpdf_by_formula() {
        let ops = Arc::new(two_node());
        let u = DVector::from_vec(vec![0.4, 1.1]);
        let a = PriorModel::new(ops.clone(), DVector::zeros(2), 0.5, 2.0).unwrap();
        let b = PriorModel::new(ops, DVector::zeros(2), 2.0, 2.0).unwrap();
        let q = a.misfit_sq(&u);
        let expected = 4f64.ln() - 0.5 * (2.0 - 0.5) * q;
        assert!((b.logpdf(&u).unwrap() - a.logpdf(&u).unwrap() - expected).abs() < 1e-12);
    }
}
