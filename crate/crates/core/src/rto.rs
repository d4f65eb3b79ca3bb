//! Randomize-then-optimize: coupling map, inner solves, density and weights.
//!
//! With `W = lambda Sigma^-1` (or the Poisson surrogate weight) and
//! `delta P = L_d L_d^T`, the whitened Jacobian `W^1/2 grad G(u*) L_d^-T`
//! has thin SVD `Phi_L S Phi_R^T`; then `X = L_d^-T Phi_R` and
//! `Y = W^1/2 Phi_L` are the generalized singular vectors.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::signed_log_det;
use crate::parallel::{batch_seed, substream, Workers};
use crate::posterior::{BayesProblem, GaussianTerms, HyperParams, Likelihood, ObsTransform};
use crate::prior::PriorModel;

const RANK_TOL: f64 = 1e-10;
const SOLVE_TOL: f64 = 1e-10;
const LM_MAX_ITER: usize = 100;
const LM_DAMPING: f64 = 1e-3;

/// Smooth warp of the reduced coordinates into a ball around `m_r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrustRegion {
    pub enabled: bool,
    /// Ball radius; `None` uses `5 sqrt(r)`.
    pub radius: Option<f64>,
    pub tau: f64,
}

impl Default for TrustRegion {
    fn default() -> Self {
        Self {
            enabled: false,
            radius: None,
            tau: 0.1,
        }
    }
}

impl TrustRegion {
    pub fn enabled() -> Self {
        Self {
            enabled: true,
            ..Self::default()
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.tau > 0.0 && self.tau < 1.0) {
            out.push(format!("trust region tau must lie in (0, 1), got {}", self.tau));
        }
        if let Some(r) = self.radius {
            if !(r > 0.0 && r.is_finite()) {
                out.push(format!("trust region radius must be positive, got {r}"));
            }
        }
        out
    }
}

/// Radial profile: identity inside `eps (1 - tau)`, constant `eps` beyond
/// `eps (1 + tau)`, quadratic blend between.
pub fn trust_region_psi(r: f64, eps: f64, tau: f64) -> f64 {
    if r < eps * (1.0 - tau) {
        r
    } else if r < eps * (1.0 + tau) {
        let d = r - eps;
        eps - 0.25 * tau * eps + 0.5 * d - d * d / (4.0 * tau * eps)
    } else {
        eps
    }
}

pub fn trust_region_psi_derivative(r: f64, eps: f64, tau: f64) -> f64 {
    if r < eps * (1.0 - tau) {
        1.0
    } else if r < eps * (1.0 + tau) {
        0.5 - (r - eps) / (2.0 * tau * eps)
    } else {
        0.0
    }
}

pub fn trust_region_transform(u_r: &DVector<f64>, m_r: &DVector<f64>, eps: f64, tau: f64) -> DVector<f64> {
    let w = u_r - m_r;
    let rho = w.norm();
    if rho == 0.0 {
        return u_r.clone();
    }
    m_r + w * (trust_region_psi(rho, eps, tau) / rho)
}

pub fn trust_region_jacobian(u_r: &DVector<f64>, m_r: &DVector<f64>, eps: f64, tau: f64) -> DMatrix<f64> {
    let w = u_r - m_r;
    let rho = w.norm();
    let k = w.len();
    if rho == 0.0 {
        return DMatrix::identity(k, k);
    }
    let ratio = trust_region_psi(rho, eps, tau) / rho;
    let radial = trust_region_psi_derivative(rho, eps, tau) - ratio;
    let mut jac = &w * w.transpose() * (radial / (rho * rho));
    for i in 0..k {
        jac[(i, i)] += ratio;
    }
    jac
}

// ---------------------------------------------------------------------------
// MAP point
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct MapEstimate {
    pub u: DVector<f64>,
    pub objective: f64,
    /// Gradient norm in prior-whitened coordinates.
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after every accepted iterate, starting point first.
    pub history: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct MapOptions {
    pub max_iter: usize,
    pub grad_tol: f64,
    /// Also stop once an iteration lowers the objective by less than
    /// `stall_tol (1 + |f|)`. Gauss-Newton converges only linearly on
    /// large-residual problems, and the remaining gap is then negligible.
    pub stall_tol: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        Self {
            max_iter: 200,
            grad_tol: 1e-8,
            stall_tol: 1e-10,
        }
    }
}

/// Negative log-likelihood up to constants, in terms of `G` (either `F` or
/// `log F`): value, gradient and Gauss-Newton weight with respect to `G`.
fn data_misfit(lik: &Likelihood, lambda: f64, eta: &DVector<f64>) -> Result<(f64, DVector<f64>, DVector<f64>)> {
    match lik {
        Likelihood::Gaussian { y, sigma, .. } => {
            let w = sigma.map(|s| lambda / s);
            let r = eta - y;
            let value = 0.5 * r.iter().zip(w.iter()).map(|(r, w)| w * r * r).sum::<f64>();
            Ok((value, r.component_mul(&w), w))
        }
        Likelihood::Poisson { y, .. } => {
            if let Some(v) = eta.iter().find(|v| !(**v > 0.0)) {
                return Err(Error::domain(format!("Poisson misfit needs positive output, got {v}")));
            }
            let value = eta
                .iter()
                .zip(y.iter())
                .map(|(f, c)| lambda * f - if *c > 0.0 { c * f.ln() } else { 0.0 })
                .sum();
            let grad = DVector::from_fn(eta.len(), |i, _| lambda * eta[i] - y[i]);
            Ok((value, grad, eta * lambda))
        }
    }
}

fn transform_of(lik: &Likelihood) -> ObsTransform {
    match lik {
        Likelihood::Gaussian { .. } => ObsTransform::Identity,
        Likelihood::Poisson { .. } => ObsTransform::Log,
    }
}

struct Objective<'a> {
    problem: &'a BayesProblem,
    prior: &'a PriorModel,
    lambda: f64,
}

impl Objective<'_> {
    fn value(&self, u: &DVector<f64>) -> f64 {
        let Ok(eta) = self.problem.model.evaluate(u) else {
            return f64::INFINITY;
        };
        match data_misfit(&self.problem.likelihood, self.lambda, &eta) {
            Ok((v, _, _)) => v + 0.5 * self.prior.delta() * self.prior.misfit_sq(u),
            Err(_) => f64::INFINITY,
        }
    }
}

/// Maximizes the conditional posterior of `u` at fixed `theta` by
/// Gauss-Newton (Fisher scoring for Poisson data) with Armijo backtracking.
/// The step solves `(I + A^T A) dv = -g` in whitened coordinates through the
/// `m x m` system `I + A A^T`.
pub fn find_map(problem: &BayesProblem, theta: &HyperParams, u0: &DVector<f64>) -> Result<MapEstimate> {
    find_map_with(problem, theta, u0, MapOptions::default())
}

pub fn find_map_with(
    problem: &BayesProblem,
    theta: &HyperParams,
    u0: &DVector<f64>,
    opts: MapOptions,
) -> Result<MapEstimate> {
    if u0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("MAP starting point"));
    }
    let prior = problem.prior(theta.delta, theta.gamma)?;
    let obj = Objective {
        problem,
        prior: &prior,
        lambda: theta.lambda,
    };
    let transform = transform_of(&problem.likelihood);
    let sqrt_delta = theta.delta.sqrt();
    let factor = prior.factor();
    let mut u = u0.clone();
    let mut history = Vec::new();
    let mut iterations = 0;
    loop {
        let (eta, jac) = problem.model.eval_and_jacobian(&u)?;
        let (misfit, grad_g, weight_g) = data_misfit(&problem.likelihood, theta.lambda, &eta)?;
        let (_, jac_g) = transform.apply(eta, jac)?;
        let v = factor.mul_upper(&(&u - prior.mean())) * sqrt_delta;
        let objective = misfit + 0.5 * v.norm_squared();
        if history.is_empty() {
            history.push(objective);
        }
        // B = L_d^-1 (grad G)^T, n x m
        let bt = factor.solve_lower_mat(&jac_g.transpose()) / sqrt_delta;
        let g_v = &bt * &grad_g + &v;
        let grad_norm = g_v.norm();
        let scale = 1.0 + objective.abs();
        let stalled = match history.len() {
            0 | 1 => false,
            k => history[k - 2] - history[k - 1] <= opts.stall_tol * scale,
        };
        let converged = grad_norm <= opts.grad_tol * scale || stalled;
        if converged || iterations >= opts.max_iter {
            return Ok(MapEstimate {
                converged,
                u,
                objective,
                grad_norm,
                iterations,
                history,
            });
        }
        let sw = weight_g.map(f64::sqrt);
        let mut a_t = bt;
        for (c, mut col) in a_t.column_iter_mut().enumerate() {
            col *= sw[c];
        }
        let a = a_t.transpose();
        let ag = &a * &g_v;
        let mut small = &a * &a_t;
        for i in 0..small.nrows() {
            small[(i, i)] += 1.0;
        }
        let chol = small
            .cholesky()
            .ok_or_else(|| Error::Factorization("Gauss-Newton system".into()))?;
        let dv = -(&g_v - &a_t * chol.solve(&ag));
        let du = factor.solve_upper(&dv) / sqrt_delta;
        let slope = g_v.dot(&dv);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial = &u + &du * t;
            let f = obj.value(&trial);
            if f <= objective + 1e-4 * t * slope {
                accepted = Some((trial, f));
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((trial, f)) => {
                u = trial;
                history.push(f);
            }
            None => {
                // no decrease found: fine if Gauss-Newton predicted none either
                return Ok(MapEstimate {
                    u,
                    objective,
                    grad_norm,
                    iterations,
                    converged: -0.5 * slope <= opts.stall_tol * scale,
                    history,
                })
            }
        }
    }
}

// ---------------------------------------------------------------------------
// RTO map
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    NotConverged,
    NotDiffeomorphic,
}

/// One RTO draw with its weight and solver diagnostics.
#[derive(Clone, Debug)]
pub struct RtoSample {
    pub u: DVector<f64>,
    pub u_r: DVector<f64>,
    pub u_perp: DVector<f64>,
    /// Value of the (possibly modified) coupling map at `u_r`.
    pub theta: DVector<f64>,
    /// `log det` of the reduced coupling Jacobian.
    pub log_det: f64,
    /// `log L(y | u) + log prior - log p_RTO`, i.e. `log` of the importance weight.
    pub log_weight: f64,
    pub log_likelihood: f64,
    pub status: SolveStatus,
    pub residual: f64,
    pub iterations: usize,
}

impl RtoSample {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

struct ThetaEval {
    value: DVector<f64>,
    jac: DMatrix<f64>,
}

/// The coupling map for fixed `theta`, linearized at `u*`.
#[derive(Clone, Debug)]
pub struct RtoMap {
    problem: BayesProblem,
    theta: HyperParams,
    prior: PriorModel,
    u_star: DVector<f64>,
    terms: GaussianTerms,
    g_star: DVector<f64>,
    phi_r: DMatrix<f64>,
    x: DMatrix<f64>,
    y: DMatrix<f64>,
    /// `Y^T`, kept so the per-iteration products run as plain gemm
    yt: DMatrix<f64>,
    s: DVector<f64>,
    /// `sqrt(1 + s^2)`
    scale: DVector<f64>,
    m_r: DVector<f64>,
    /// `Y^T (G(u*) - data)`
    c_star: DVector<f64>,
    trust: TrustRegion,
    radius: f64,
    /// `log det(delta P_gamma)`
    log_det_prior: f64,
}

impl RtoMap {
    pub fn build(problem: &BayesProblem, theta: &HyperParams, u_star: &DVector<f64>, trust: TrustRegion) -> Result<Self> {
        if !theta.is_valid() {
            return Err(Error::domain(format!("invalid hyperparameters {theta:?}")));
        }
        let prior = problem.prior(theta.delta, theta.gamma)?;
        let (eta, jac) = problem.model.eval_and_jacobian(u_star)?;
        let terms = problem.gaussian_terms(theta.lambda, &eta)?;
        let (g_star, jac_g) = terms.transform.apply(eta, jac)?;
        let sqrt_delta = theta.delta.sqrt();
        let sw = terms.weights.map(f64::sqrt);
        // whitened Jacobian, transposed: L_d^-1 grad G^T W^1/2 (n x m)
        let mut jt = prior.factor().solve_lower_mat(&jac_g.transpose()) / sqrt_delta;
        for (c, mut col) in jt.column_iter_mut().enumerate() {
            col *= sw[c];
        }
        let (phi_r, s, phi_l) = thin_svd(jt);
        let s_max = s.iter().copied().fold(0.0, f64::max);
        let r = s.iter().take_while(|&&v| s_max > 0.0 && v >= RANK_TOL * s_max).count();
        let phi_r = phi_r.columns(0, r).into_owned();
        let phi_l = phi_l.columns(0, r).into_owned();
        let s = s.rows(0, r).into_owned();
        let x = prior.factor().solve_upper_mat(&phi_r) / sqrt_delta;
        let mut y = phi_l;
        for (i, mut row) in y.row_iter_mut().enumerate() {
            row *= sw[i];
        }
        let m_r = phi_r.tr_mul(&(prior.factor().mul_upper(&(u_star - prior.mean())) * sqrt_delta));
        let c_star = y.tr_mul(&(&g_star - &terms.data));
        let scale = s.map(|v| (1.0 + v * v).sqrt());
        let n = u_star.len() as f64;
        let log_det_prior = n * theta.delta.ln() + prior.log_det_precision();
        let radius = trust.radius.unwrap_or(5.0 * (r as f64).sqrt());
        Ok(Self {
            problem: problem.clone(),
            theta: *theta,
            prior,
            u_star: u_star.clone(),
            terms,
            g_star,
            phi_r,
            x,
            yt: y.transpose(),
            y,
            s,
            scale,
            m_r,
            c_star,
            trust,
            radius,
            log_det_prior,
        })
    }

    pub fn problem(&self) -> &BayesProblem {
        &self.problem
    }

    pub fn theta_params(&self) -> &HyperParams {
        &self.theta
    }

    pub fn prior(&self) -> &PriorModel {
        &self.prior
    }

    pub fn u_star(&self) -> &DVector<f64> {
        &self.u_star
    }

    pub fn rank(&self) -> usize {
        self.s.len()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn s(&self) -> &DVector<f64> {
        &self.s
    }

    pub fn m_r(&self) -> &DVector<f64> {
        &self.m_r
    }

    pub fn gaussian_terms(&self) -> &GaussianTerms {
        &self.terms
    }

    pub fn trust_region(&self) -> TrustRegion {
        self.trust
    }

    /// Effective trust-region radius.
    pub fn trust_radius(&self) -> f64 {
        self.radius
    }

    fn sqrt_delta(&self) -> f64 {
        self.theta.delta.sqrt()
    }

    /// `X^T (delta P) v`.
    pub fn reduce(&self, v: &DVector<f64>) -> DVector<f64> {
        self.phi_r
            .tr_mul(&(self.prior.factor().mul_upper(v) * self.sqrt_delta()))
    }

    /// Splits `u - m` into `X u_r` and the `(delta P)`-orthogonal complement.
    pub fn decompose(&self, u: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let centred = u - self.prior.mean();
        let u_r = self.reduce(&centred);
        let u_perp = centred - &self.x * &u_r;
        (u_r, u_perp)
    }

    pub fn assemble(&self, u_r: &DVector<f64>, u_perp: &DVector<f64>) -> DVector<f64> {
        self.prior.mean() + &self.x * u_r + u_perp
    }

    fn warp(&self, u_r: &DVector<f64>) -> (DVector<f64>, Option<DMatrix<f64>>) {
        if !self.trust.enabled {
            return (u_r.clone(), None);
        }
        let w_norm = (u_r - &self.m_r).norm();
        if w_norm < self.radius * (1.0 - self.trust.tau) {
            return (u_r.clone(), None);
        }
        (
            trust_region_transform(u_r, &self.m_r, self.radius, self.trust.tau),
            Some(trust_region_jacobian(u_r, &self.m_r, self.radius, self.trust.tau)),
        )
    }

    fn observe(&self, u: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let (eta, jx) = self.problem.model.eval_and_jvp(u, &self.x)?;
        self.terms.transform.apply(eta, jx)
    }

    /// `Theta_L`: the part of the map that is linear in `u_r`.
    pub fn theta_linear(&self, u_r: &DVector<f64>) -> DVector<f64> {
        let mut out = u_r.clone();
        for i in 0..out.len() {
            let s = self.s[i];
            out[i] = (u_r[i] + s * (self.c_star[i] + s * (u_r[i] - self.m_r[i]))) / self.scale[i];
        }
        out
    }

    /// `Theta_R(z; u_perp)`: the Taylor remainder of the data term at `u*`.
    pub fn theta_remainder(&self, z: &DVector<f64>, u_perp: &DVector<f64>) -> Result<DVector<f64>> {
        let u = self.assemble(z, u_perp);
        let g = self
            .terms
            .transform
            .apply_value(self.problem.model.evaluate(&u)?)?;
        let proj = self.y.tr_mul(&(g - &self.g_star));
        Ok(DVector::from_fn(z.len(), |i, _| {
            let s = self.s[i];
            (s * proj[i] - s * s * (z[i] - self.m_r[i])) / self.scale[i]
        }))
    }

    /// Unmodified map `(S^2 + I)^-1/2 (u_r + S Y^T (G(u) - data))`.
    pub fn theta_original(&self, u_r: &DVector<f64>, u_perp: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.theta_linear(u_r) + self.theta_remainder(u_r, u_perp)?)
    }

    /// The map actually inverted: `Theta_L(u_r) + Theta_R(Psi(u_r))`.
    pub fn theta_modified(&self, u_r: &DVector<f64>, u_perp: &DVector<f64>) -> Result<DVector<f64>> {
        let (z, _) = self.warp(u_r);
        Ok(self.theta_linear(u_r) + self.theta_remainder(&z, u_perp)?)
    }

    fn eval(&self, u_r: &DVector<f64>, u_perp: &DVector<f64>) -> Result<ThetaEval> {
        let r = u_r.len();
        let (z, dpsi) = self.warp(u_r);
        let (g, gx) = self.observe(&self.assemble(&z, u_perp))?;
        let proj = &self.yt * (g - &self.g_star);
        let mut ygx = &self.yt * gx;
        let mut value = self.theta_linear(u_r);
        for i in 0..r {
            let s = self.s[i];
            value[i] += (s * proj[i] - s * s * (z[i] - self.m_r[i])) / self.scale[i];
            ygx[(i, i)] -= s;
        }
        // (S^2+I)^-1/2 [ (I + S^2) + S (Y^T grad G X - S) dPsi ]
        let mut jac = match dpsi {
            Some(d) => ygx * d,
            None => ygx,
        };
        for i in 0..r {
            let s = self.s[i];
            for j in 0..r {
                jac[(i, j)] *= s / self.scale[i];
            }
            jac[(i, i)] += self.scale[i];
        }
        Ok(ThetaEval { value, jac })
    }

    /// Draws `zeta ~ N(0, (delta P)^-1)`.
    pub fn draw_reference<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        self.prior.sample_centered(rng)
    }

    /// Solves `Theta(u_r; u_perp) = X^T (delta P) zeta` by Levenberg-Marquardt
    /// starting at `m_r`, with `u_perp` the complement of `zeta`.
    pub fn solve(&self, zeta: &DVector<f64>) -> Result<RtoSample> {
        let rhs = self.reduce(zeta);
        let u_perp = zeta - &self.x * &rhs;
        let tol = SOLVE_TOL * rhs.norm().max(1.0);
        let mut u_r = self.m_r.clone();
        let mut current = self.eval(&u_r, &u_perp)?;
        let mut res = &current.value - &rhs;
        let mut cost = res.norm_squared();
        let mut mu = LM_DAMPING;
        let mut iterations = 0;
        while res.norm() > tol && iterations < LM_MAX_ITER {
            iterations += 1;
            let jt = current.jac.transpose();
            let jtj = &jt * &current.jac;
            let jtr = &jt * &res;
            let mut sys = jtj.clone();
            for i in 0..sys.nrows() {
                sys[(i, i)] += mu * jtj[(i, i)].max(1e-12);
            }
            let Some(step) = sys.lu().solve(&(-jtr)) else {
                mu *= 10.0;
                continue;
            };
            let trial = &u_r + &step;
            let accepted = match self.eval(&trial, &u_perp) {
                Ok(e) => {
                    let r = &e.value - &rhs;
                    let c = r.norm_squared();
                    if c < cost {
                        Some((e, r, c))
                    } else {
                        None
                    }
                }
                Err(_) => None,
            };
            match accepted {
                Some((e, r, c)) => {
                    u_r = trial;
                    current = e;
                    res = r;
                    cost = c;
                    mu = (mu / 10.0).max(1e-16);
                }
                None => {
                    mu *= 10.0;
                    if mu > 1e16 {
                        break;
                    }
                }
            }
        }
        let residual = res.norm();
        let status = if residual <= tol {
            SolveStatus::Converged
        } else {
            SolveStatus::NotConverged
        };
        self.finish(u_r, u_perp, current, status, residual, iterations)
    }

    /// Scores a given `u` under this map (no solve), e.g. the current chain state.
    pub fn assess(&self, u: &DVector<f64>) -> Result<RtoSample> {
        let (u_r, u_perp) = self.decompose(u);
        let e = self.eval(&u_r, &u_perp)?;
        self.finish(u_r, u_perp, e, SolveStatus::Converged, 0.0, 0)
    }

    fn finish(
        &self,
        u_r: DVector<f64>,
        u_perp: DVector<f64>,
        e: ThetaEval,
        status: SolveStatus,
        residual: f64,
        iterations: usize,
    ) -> Result<RtoSample> {
        let (sign, log_det) = signed_log_det(e.jac);
        if !(sign > 0.0) {
            return Err(Error::Diffeomorphism { sign });
        }
        let u = self.assemble(&u_r, &u_perp);
        let log_likelihood = self.problem.log_likelihood(&u, self.theta.lambda)?;
        let log_weight = if status == SolveStatus::Converged {
            log_likelihood - log_det - 0.5 * u_r.norm_squared() + 0.5 * e.value.norm_squared()
        } else {
            f64::NEG_INFINITY
        };
        Ok(RtoSample {
            u,
            u_r,
            u_perp,
            theta: e.value,
            log_det,
            log_weight,
            log_likelihood,
            status,
            residual,
            iterations,
        })
    }

    /// `log p_RTO(u)` for a sample produced or scored by this map.
    pub fn log_density(&self, sample: &RtoSample) -> f64 {
        let n = sample.u.len() as f64;
        let perp = self.theta.delta * self.prior.precision().quad_form(&sample.u_perp);
        -0.5 * n * (2.0 * PI).ln() + 0.5 * self.log_det_prior + sample.log_det
            - 0.5 * sample.theta.norm_squared()
            - 0.5 * perp
    }

    /// Log importance weight; recomputed from the sample's stored terms.
    pub fn log_weight(&self, sample: &RtoSample) -> f64 {
        sample.log_weight
    }

    /// Draws and solves, mapping per-sample failures to flagged samples.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RtoSample {
        let zeta = self.draw_reference(rng);
        match self.solve(&zeta) {
            Ok(s) => s,
            Err(e) => self.failed(&zeta, &e),
        }
    }

    fn failed(&self, zeta: &DVector<f64>, err: &Error) -> RtoSample {
        let status = match err {
            Error::Diffeomorphism { .. } => SolveStatus::NotDiffeomorphic,
            _ => SolveStatus::NotConverged,
        };
        RtoSample {
            u: self.prior.mean() + zeta,
            u_r: DVector::zeros(self.rank()),
            u_perp: DVector::zeros(zeta.len()),
            theta: DVector::zeros(self.rank()),
            log_det: f64::NAN,
            log_weight: f64::NEG_INFINITY,
            log_likelihood: f64::NAN,
            status,
            residual: f64::NAN,
            iterations: 0,
        }
    }

    /// `count` independent draws; sample `i` uses substream `i` of a seed
    /// taken from `rng`, so output is independent of the worker count.
    pub fn sample_batch<R: Rng + ?Sized>(&self, count: usize, rng: &mut R, workers: &Workers) -> Vec<RtoSample> {
        let base = batch_seed(rng);
        workers.map(count, |i| self.sample(&mut substream(base, i)))
    }
}

/// Thin SVD `A = U diag(s) V^T` with singular values sorted descending.
fn thin_svd(a: DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (rows, cols) = a.shape();
    let k = rows.min(cols);
    if k == 0 {
        return (DMatrix::zeros(rows, 0), DVector::zeros(0), DMatrix::zeros(cols, 0));
    }
    let svd = a.svd(true, true);
    let u = svd.u.unwrap();
    let v_t = svd.v_t.unwrap();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let s = DVector::from_iterator(k, order.iter().map(|&i| svd.singular_values[i]));
    let u_sorted = DMatrix::from_fn(rows, k, |r, c| u[(r, order[c])]);
    let v_sorted = DMatrix::from_fn(cols, k, |r, c| v_t[(order[c], r)]);
    (u_sorted, s, v_sorted)
}

/// Draws a standard normal vector; convenience for oracles and tests.
pub fn standard_normal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}
