//! Hyperparameters, hyper-priors, likelihoods and joint posterior densities.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::forward::{ForwardModel, ObservationKind};
use crate::prior::{PriorModel, PriorOperators};

/// Count substituted for zero Poisson counts in the surrogate data `log(y / lambda)`.
pub const ZERO_COUNT_CLAMP: f64 = 0.5;

/// `theta = (lambda, delta, gamma)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub lambda: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl HyperParams {
    pub fn new(lambda: f64, delta: f64, gamma: f64) -> Self {
        Self { lambda, delta, gamma }
    }

    pub fn is_valid(&self) -> bool {
        [self.lambda, self.delta, self.gamma]
            .iter()
            .all(|v| *v > 0.0 && v.is_finite())
    }
}

/// Gamma priors (shape/rate) on `lambda` and `delta`; a Beta-type prior
/// `(gamma - gamma_lo)^alpha (gamma_hi - gamma)^beta` on `[gamma_lo, gamma_hi]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperPrior {
    pub alpha_lambda: f64,
    pub beta_lambda: f64,
    pub alpha_delta: f64,
    pub beta_delta: f64,
    pub alpha_gamma: f64,
    pub beta_gamma: f64,
    pub gamma_lo: f64,
    pub gamma_hi: f64,
}

impl HyperPrior {
    pub fn elliptic() -> Self {
        Self::with_support(1e-5, 10.0)
    }

    pub fn pet() -> Self {
        Self::with_support(1e-3, 1e2)
    }

    fn with_support(gamma_lo: f64, gamma_hi: f64) -> Self {
        Self {
            alpha_lambda: 1.0,
            beta_lambda: 1e-4,
            alpha_delta: 1.0,
            beta_delta: 1e-4,
            alpha_gamma: 0.0,
            beta_gamma: 4.0,
            gamma_lo,
            gamma_hi,
        }
    }

    /// Every violated constraint, not just the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (name, v) in [
            ("alpha_lambda", self.alpha_lambda),
            ("alpha_delta", self.alpha_delta),
            ("alpha_gamma", self.alpha_gamma),
            ("beta_gamma", self.beta_gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name} must be non-negative, got {v}"));
            }
        }
        for (name, v) in [("beta_lambda", self.beta_lambda), ("beta_delta", self.beta_delta)] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.gamma_lo > 0.0 && self.gamma_lo < self.gamma_hi && self.gamma_hi.is_finite()) {
            out.push(format!(
                "gamma support must satisfy 0 < gamma_lo < gamma_hi, got [{}, {}]",
                self.gamma_lo, self.gamma_hi
            ));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p))
        }
    }

    pub fn in_support(&self, gamma: f64) -> bool {
        gamma >= self.gamma_lo && gamma <= self.gamma_hi
    }

    pub fn log_lambda(&self, lambda: f64) -> f64 {
        gamma_kernel(lambda, self.alpha_lambda, self.beta_lambda)
    }

    pub fn log_delta(&self, delta: f64) -> f64 {
        gamma_kernel(delta, self.alpha_delta, self.beta_delta)
    }

    pub fn log_gamma(&self, gamma: f64) -> f64 {
        if !self.in_support(gamma) {
            return f64::NEG_INFINITY;
        }
        power_term(gamma - self.gamma_lo, self.alpha_gamma)
            + power_term(self.gamma_hi - gamma, self.beta_gamma)
    }

    /// Unnormalized log hyper-prior; `-inf` outside the support.
    pub fn logpdf(&self, theta: &HyperParams) -> f64 {
        self.log_lambda(theta.lambda) + self.log_delta(theta.delta) + self.log_gamma(theta.gamma)
    }
}

fn power_term(base: f64, exponent: f64) -> f64 {
    if exponent == 0.0 {
        0.0
    } else {
        exponent * base.ln()
    }
}

fn gamma_kernel(x: f64, alpha: f64, beta: f64) -> f64 {
    if !(x > 0.0 && x.is_finite()) {
        return f64::NEG_INFINITY;
    }
    power_term(x, alpha - 1.0) - beta * x
}

/// Observation model with its data.
#[derive(Clone, Debug)]
pub enum Likelihood {
    /// `y ~ N(F(u), Sigma / lambda)`, `Sigma` diagonal.
    Gaussian {
        y: DVector<f64>,
        sigma: DVector<f64>,
        log_det_sigma: f64,
    },
    /// `y_i ~ Poisson(lambda F_i(u))`.
    Poisson {
        y: DVector<f64>,
        log_factorial_sum: f64,
        count_sum: f64,
    },
}

impl Likelihood {
    pub fn gaussian(y: DVector<f64>) -> Result<Self> {
        let m = y.len();
        Self::gaussian_diag(y, DVector::from_element(m, 1.0))
    }

    pub fn gaussian_diag(y: DVector<f64>, sigma: DVector<f64>) -> Result<Self> {
        if y.len() != sigma.len() {
            return Err(Error::Dimension {
                what: "noise covariance diagonal",
                expected: y.len(),
                got: sigma.len(),
            });
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Gaussian data"));
        }
        if sigma.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Data("noise covariance must be positive".into()));
        }
        let log_det_sigma = sigma.iter().map(|s| s.ln()).sum();
        Ok(Self::Gaussian {
            y,
            sigma,
            log_det_sigma,
        })
    }

    pub fn poisson(y: DVector<f64>) -> Result<Self> {
        if let Some(v) = y.iter().find(|v| !(**v >= 0.0 && v.fract() == 0.0 && v.is_finite())) {
            return Err(Error::Data(format!("Poisson counts must be non-negative integers, got {v}")));
        }
        let log_factorial_sum = y.iter().map(|&v| ln_gamma(v + 1.0)).sum();
        let count_sum = y.sum();
        Ok(Self::Poisson {
            y,
            log_factorial_sum,
            count_sum,
        })
    }

    pub fn kind(&self) -> ObservationKind {
        match self {
            Self::Gaussian { .. } => ObservationKind::Gaussian,
            Self::Poisson { .. } => ObservationKind::Poisson,
        }
    }

    pub fn data(&self) -> &DVector<f64> {
        match self {
            Self::Gaussian { y, .. } | Self::Poisson { y, .. } => y,
        }
    }

    pub fn len(&self) -> usize {
        self.data().len()
    }

    pub fn is_empty(&self) -> bool {
        self.data().is_empty()
    }

    /// `log L(y | eta, lambda)` with all normalizing constants.
    pub fn log_likelihood(&self, eta: &DVector<f64>, lambda: f64) -> Result<f64> {
        if eta.len() != self.len() {
            return Err(Error::Dimension {
                what: "forward model output",
                expected: self.len(),
                got: eta.len(),
            });
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::domain(format!("lambda must be positive, got {lambda}")));
        }
        match self {
            Self::Gaussian {
                y,
                sigma,
                log_det_sigma,
            } => {
                let m = y.len() as f64;
                let misfit: f64 = eta
                    .iter()
                    .zip(y.iter())
                    .zip(sigma.iter())
                    .map(|((e, d), s)| (e - d).powi(2) / s)
                    .sum();
                Ok(-0.5 * m * (2.0 * PI).ln() + 0.5 * m * lambda.ln() - 0.5 * log_det_sigma
                    - 0.5 * lambda * misfit)
            }
            Self::Poisson {
                y,
                log_factorial_sum,
                count_sum,
            } => {
                let mut s = count_sum * lambda.ln() - log_factorial_sum;
                for (&e, &c) in eta.iter().zip(y.iter()) {
                    if !(e > 0.0) {
                        return Err(Error::domain(format!(
                            "Poisson likelihood needs positive model output, got {e}"
                        )));
                    }
                    s += if c > 0.0 { c * e.ln() } else { 0.0 } - lambda * e;
                }
                Ok(s)
            }
        }
    }
}

/// Whether the Gaussian (or Gaussian surrogate) misfit is taken on `F` or `log F`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObsTransform {
    Identity,
    Log,
}

impl ObsTransform {
    /// `G(u)` and `grad G(u)` from `F(u)` and `J(u)`.
    pub fn apply(
        self,
        eta: DVector<f64>,
        jac: DMatrix<f64>,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match self {
            Self::Identity => Ok((eta, jac)),
            Self::Log => {
                if let Some(v) = eta.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::domain(format!("log transform of non-positive output {v}")));
                }
                let mut j = jac;
                for (r, mut row) in j.row_iter_mut().enumerate() {
                    row /= eta[r];
                }
                Ok((eta.map(f64::ln), j))
            }
        }
    }

    pub fn apply_value(self, eta: DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Self::Identity => Ok(eta),
            Self::Log => {
                if let Some(v) = eta.iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::domain(format!("log transform of non-positive output {v}")));
                }
                Ok(eta.map(f64::ln))
            }
        }
    }
}

/// Gaussian misfit `(1/2) ||G(u) - data||^2_W`, `W = diag(weights)`, that the
/// RTO map is built from.
#[derive(Clone, Debug)]
pub struct GaussianTerms {
    pub data: DVector<f64>,
    pub weights: DVector<f64>,
    pub transform: ObsTransform,
}

/// Surrogate data `y* = log(y / lambda)` and diagonal weight `F(u*)`.
///
/// Zero counts are replaced by [`ZERO_COUNT_CLAMP`] here only; the exact
/// likelihood keeps the true counts.
pub fn surrogate_gaussian_terms(
    y: &DVector<f64>,
    eta_star: &DVector<f64>,
    lambda: f64,
) -> Result<(DVector<f64>, DVector<f64>)> {
    if y.len() != eta_star.len() {
        return Err(Error::Dimension {
            what: "surrogate linearization point",
            expected: y.len(),
            got: eta_star.len(),
        });
    }
    if let Some(v) = eta_star.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::domain(format!("surrogate weight needs positive output, got {v}")));
    }
    let y_star = y.map(|c| (c.max(ZERO_COUNT_CLAMP) / lambda).ln());
    Ok((y_star, eta_star.clone()))
}

/// A hierarchical inverse problem: forward map, SPDE prior, hyper-prior and data.
#[derive(Clone, Debug)]
pub struct BayesProblem {
    pub model: Arc<dyn ForwardModel>,
    pub operators: Arc<PriorOperators>,
    pub prior_mean: DVector<f64>,
    pub hyper: HyperPrior,
    pub likelihood: Likelihood,
}

impl BayesProblem {
    pub fn new(
        model: Arc<dyn ForwardModel>,
        operators: Arc<PriorOperators>,
        prior_mean: DVector<f64>,
        hyper: HyperPrior,
        likelihood: Likelihood,
    ) -> Result<Self> {
        hyper.validate()?;
        let n = model.input_dim();
        if operators.dim() != n || prior_mean.len() != n {
            return Err(Error::Dimension {
                what: "prior dimension",
                expected: n,
                got: if operators.dim() != n { operators.dim() } else { prior_mean.len() },
            });
        }
        if likelihood.len() != model.output_dim() {
            return Err(Error::Dimension {
                what: "data",
                expected: model.output_dim(),
                got: likelihood.len(),
            });
        }
        if likelihood.kind() == ObservationKind::Poisson && !model.positive_output() {
            return Err(Error::Data("Poisson data need a model with positive output".into()));
        }
        Ok(Self {
            model,
            operators,
            prior_mean,
            hyper,
            likelihood,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.prior_mean.len()
    }

    pub fn output_dim(&self) -> usize {
        self.likelihood.len()
    }

    pub fn kind(&self) -> ObservationKind {
        self.likelihood.kind()
    }

    pub fn prior(&self, delta: f64, gamma: f64) -> Result<PriorModel> {
        PriorModel::new(self.operators.clone(), self.prior_mean.clone(), delta, gamma)
    }

    pub fn log_likelihood(&self, u: &DVector<f64>, lambda: f64) -> Result<f64> {
        self.likelihood.log_likelihood(&self.model.evaluate(u)?, lambda)
    }

    /// `log N(u; m, (delta P_gamma)^-1)` using the O(n) determinant.
    pub fn prior_logpdf(&self, u: &DVector<f64>, delta: f64, gamma: f64) -> Result<f64> {
        let n = self.input_dim() as f64;
        let r = u - &self.prior_mean;
        Ok(-0.5 * n * (2.0 * PI).ln() + 0.5 * n * delta.ln() + 0.5 * self.operators.log_det(gamma)?
            - 0.5 * delta * self.operators.precision_norm_sq(gamma, &r))
    }

    pub fn hyperprior_logpdf(&self, theta: &HyperParams) -> f64 {
        self.hyper.logpdf(theta)
    }

    /// `log p(u, theta | y) + log p(y)`.
    pub fn joint_log_posterior(&self, u: &DVector<f64>, theta: &HyperParams) -> Result<f64> {
        let hp = self.hyperprior_logpdf(theta);
        if hp == f64::NEG_INFINITY {
            return Ok(hp);
        }
        Ok(self.log_likelihood(u, theta.lambda)? + self.prior_logpdf(u, theta.delta, theta.gamma)? + hp)
    }

    /// The Gaussian misfit the RTO map is built on. For Poisson data the
    /// surrogate is linearized at `eta_star = F(u*)`.
    pub fn gaussian_terms(&self, lambda: f64, eta_star: &DVector<f64>) -> Result<GaussianTerms> {
        match &self.likelihood {
            Likelihood::Gaussian { y, sigma, .. } => Ok(GaussianTerms {
                data: y.clone(),
                weights: sigma.map(|s| lambda / s),
                transform: ObsTransform::Identity,
            }),
            Likelihood::Poisson { y, .. } => {
                let (data, w) = surrogate_gaussian_terms(y, eta_star, lambda)?;
                Ok(GaussianTerms {
                    data,
                    weights: w * lambda,
                    transform: ObsTransform::Log,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::LinearModel;
    use crate::grid::DiscretizationGrid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gaussian_zero_residual() {
        let lik = Likelihood::gaussian(DVector::from_element(1, 2.5)).unwrap();
        let v = lik.log_likelihood(&DVector::from_element(1, 2.5), 1.0).unwrap();
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn gaussian_is_quadratic_in_residual() {
        let y = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let lik = Likelihood::gaussian(y.clone()).unwrap();
        let r = DVector::from_vec(vec![0.3, 0.1, -0.7]);
        let lambda = 3.0;
        let one = lik.log_likelihood(&(&y + &r), lambda).unwrap();
        let two = lik.log_likelihood(&(&y + &r * 2.0), lambda).unwrap();
        assert!((two - one + 1.5 * lambda * r.norm_squared()).abs() < 1e-12);
    }

    #[test]
    fn poisson_direct_substitution() {
        let lik = Likelihood::poisson(DVector::from_element(1, 1.0)).unwrap();
        let v = lik.log_likelihood(&DVector::from_element(1, 1.0), 1.0).unwrap();
        assert!((v + 1.0).abs() < 1e-15);
        assert!(matches!(
            lik.log_likelihood(&DVector::from_element(1, 0.0), 1.0),
            Err(Error::Domain(_))
        ));
        assert!(Likelihood::poisson(DVector::from_element(1, 1.5)).is_err());
    }

    #[test]
    fn poisson_lambda_argmax() {
        let y = DVector::from_vec(vec![3.0, 0.0, 7.0, 12.0]);
        let eta = DVector::from_vec(vec![0.2, 0.05, 0.4, 0.9]);
        let lik = Likelihood::poisson(y.clone()).unwrap();
        let f = |l: f64| lik.log_likelihood(&eta, l).unwrap();
        // golden-section search as an independent maximizer
        let (mut a, mut b) = (1e-3, 200.0);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let c = b - g * (b - a);
            let d = a + g * (b - a);
            if f(c) > f(d) {
                b = d;
            } else {
                a = c;
            }
        }
        let closed = y.sum() / eta.sum();
        assert!(((a + b) / 2.0 - closed).abs() < 1e-6 * closed);
        // strict concavity along lambda
        for l in [1.0, 10.0, 50.0] {
            let h = 1e-3;
            assert!(f(l + h) - 2.0 * f(l) + f(l - h) < 0.0);
        }
    }

    #[test]
    fn hyperprior_terms() {
        let hp = HyperPrior::elliptic();
        assert!((hp.log_lambda(3.0) + hp.beta_lambda * 3.0).abs() < 1e-15);
        let at_lo = hp.log_gamma(hp.gamma_lo);
        assert!((at_lo - hp.beta_gamma * (hp.gamma_hi - hp.gamma_lo).ln()).abs() < 1e-12);
        assert_eq!(hp.log_gamma(hp.gamma_hi * 1.01), f64::NEG_INFINITY);
        assert_eq!(hp.log_gamma(hp.gamma_lo * 0.5), f64::NEG_INFINITY);
        assert_eq!(hp.log_lambda(-1.0), f64::NEG_INFINITY);
    }

    #[test]
    fn hyperprior_reports_all_problems() {
        let mut hp = HyperPrior::pet();
        hp.beta_lambda = 0.0;
        hp.gamma_lo = 5.0;
        hp.gamma_hi = 1.0;
        let Err(Error::Config(list)) = hp.validate() else {
            panic!("expected config error");
        };
        assert_eq!(list.len(), 2);
    }

    fn small_problem(seed: u64) -> BayesProblem {
        let grid = DiscretizationGrid::unit_interval(6).unwrap();
        let ops = Arc::new(PriorOperators::assemble(&grid).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(4, 6, |_, _| rng.random::<f64>() - 0.5);
        let y = DVector::from_fn(4, |_, _| rng.random::<f64>());
        BayesProblem::new(
            Arc::new(LinearModel::new(a)),
            ops,
            DVector::zeros(6),
            HyperPrior::elliptic(),
            Likelihood::gaussian(y).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn prior_logpdf_matches_factorized_prior() {
        let p = small_problem(1);
        let u = DVector::from_fn(6, |i, _| (i as f64).sin());
        let via_model = p.prior(2.5, 0.3).unwrap().logpdf(&u).unwrap();
        let fast = p.prior_logpdf(&u, 2.5, 0.3).unwrap();
        assert!((via_model - fast).abs() < 1e-10);
    }

    #[test]
    fn joint_decomposes_and_delta_differences_cancel() {
        let p = small_problem(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut gaps = Vec::new();
        for _ in 0..100 {
            let u = DVector::from_fn(6, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let th = HyperParams::new(rng.random::<f64>() * 10.0 + 0.1, rng.random::<f64>() * 5.0 + 0.1, rng.random::<f64>() * 9.0 + 0.01);
            let joint = p.joint_log_posterior(&u, &th).unwrap();
            let parts = p.log_likelihood(&u, th.lambda).unwrap()
                + p.prior(th.delta, th.gamma).unwrap().logpdf(&u).unwrap()
                + p.hyperprior_logpdf(&th);
            gaps.push(joint - parts);
        }
        let spread = gaps.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - gaps.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 1e-10);

        let u = DVector::from_fn(6, |i, _| 0.1 * i as f64);
        let (d1, d2) = (3.0, 0.7);
        let a = p.joint_log_posterior(&u, &HyperParams::new(2.0, d1, 1.0)).unwrap();
        let b = p.joint_log_posterior(&u, &HyperParams::new(2.0, d2, 1.0)).unwrap();
        let q = p.operators.precision_norm_sq(1.0, &u);
        let expected = 3.0 * (d1 / d2).ln() - (d1 - d2) * (0.5 * q + p.hyper.beta_delta);
        assert!((a - b - expected).abs() < 1e-10);
    }

    #[test]
    fn scalar_joint_by_hand() {
        // n = m = 1 needs a 2-node grid; use a 2-input model observing the first node
        let grid = DiscretizationGrid::unit_interval(2).unwrap();
        let ops = Arc::new(PriorOperators::assemble(&grid).unwrap());
        let model = LinearModel::new(DMatrix::from_row_slice(1, 2, &[2.0, 0.0]));
        let p = BayesProblem::new(
            Arc::new(model),
            ops,
            DVector::zeros(2),
            HyperPrior::elliptic(),
            Likelihood::gaussian(DVector::from_element(1, 1.0)).unwrap(),
        )
        .unwrap();
        let u = DVector::from_vec(vec![1.0, 0.0]);
        let th = HyperParams::new(4.0, 1.0, 2.0);
        // lik: -0.5 ln 2pi + 0.5 ln 4 - 2 (2 - 1)^2
        let lik = -0.5 * (2.0 * PI).ln() + 0.5 * 4f64.ln() - 2.0;
        // prior with P = [[2,-1],[-1,2]]: -ln 2pi + 0.5 ln 3 - 0.5 * 2
        let prior = -(2.0 * PI).ln() + 0.5 * 3f64.ln() - 1.0;
        // hyper: -1e-4 * 4 - 1e-4 * 1 + 4 ln(10 - 2)
        let hyper = -5e-4 + 4.0 * (10.0f64 - 2.0).ln();
        let v = p.joint_log_posterior(&u, &th).unwrap();
        assert!((v - (lik + prior + hyper)).abs() < 1e-12);
    }

    #[test]
    fn surrogate_values() {
        let (ys, w) = surrogate_gaussian_terms(&DVector::from_element(1, 1.0), &DVector::from_element(1, 1.0), 1.0).unwrap();
        assert_eq!((ys[0], w[0]), (0.0, 1.0));
        let (ys, _) = surrogate_gaussian_terms(&DVector::from_element(1, 1f64.exp()), &DVector::from_element(1, 1.0), 1.0).unwrap();
        assert!((ys[0] - 1.0).abs() < 1e-15);
        let (ys, _) = surrogate_gaussian_terms(&DVector::from_element(1, 0.0), &DVector::from_element(1, 1.0), 2.0).unwrap();
        assert!((ys[0] - 0.25f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn surrogate_matches_poisson_in_log_space() {
        // counts equal to the expected values at the linearization point
        let lambda = 7.0;
        let f_star = DVector::from_vec(vec![0.3, 1.2, 2.0]);
        let y = &f_star * lambda;
        let (ys, w) = surrogate_gaussian_terms(&y, &f_star, lambda).unwrap();
        let xi_star = f_star.map(f64::ln);
        let true_ll = |xi: &DVector<f64>| -> f64 {
            xi.iter().zip(y.iter()).map(|(x, c)| c * x - lambda * x.exp()).sum()
        };
        let sur_ll = |xi: &DVector<f64>| -> f64 {
            -0.5 * lambda * xi.iter().zip(ys.iter()).zip(w.iter()).map(|((x, d), w)| w * (x - d).powi(2)).sum::<f64>()
        };
        let h = 1e-5;
        for i in 0..3 {
            let mut e = DVector::zeros(3);
            e[i] = h;
            let g_true = (true_ll(&(&xi_star + &e)) - true_ll(&(&xi_star - &e))) / (2.0 * h);
            let g_sur = (sur_ll(&(&xi_star + &e)) - sur_ll(&(&xi_star - &e))) / (2.0 * h);
            assert!((g_true - g_sur).abs() < 1e-8 * (1.0 + g_true.abs()), "{g_true} vs {g_sur}");
            let hh = 1e-4;
            let mut e2 = DVector::zeros(3);
            e2[i] = hh;
            let curv = (sur_ll(&(&xi_star + &e2)) - 2.0 * sur_ll(&xi_star) + sur_ll(&(&xi_star - &e2))) / (hh * hh);
            assert!((curv + lambda * f_star[i]).abs() < 1e-4 * lambda * f_star[i]);
        }
    }
}
