//! Samplers built on the RTO map: independence Metropolis-Hastings,
//! importance-sampled marginal likelihoods, RTO-within-Gibbs and the
//! RTO pseudo-marginal chain on the hyperparameters.

use std::time::Instant;

use nalgebra::{DVector, Matrix3, Vector3};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::{Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_mean_exp;
use crate::parallel::Workers;
use crate::posterior::{BayesProblem, HyperParams, HyperPrior, Likelihood};
use crate::prior::SpdeOrder;
use crate::rto::{find_map, RtoMap, RtoSample, TrustRegion};

/// Grid size for the inverse-CDF `gamma` proposal.
pub const GAMMA_GRID_POINTS: usize = 1000;
/// Adaptive Metropolis scale for a three-dimensional target.
pub const AM_SCALE: f64 = 2.38 * 2.38 / 3.0;
pub const AM_JITTER: f64 = 1e-10;

/// Metropolis test on a log ratio. `NaN` (both states impossible) rejects.
pub fn mh_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

/// Value of `u` at the domain midpoint (node `n / 2` without a grid).
pub fn probe_value(problem: &BayesProblem, u: &DVector<f64>) -> f64 {
    match problem.operators.grid() {
        Some(grid) => grid.interpolate(u.as_slice(), grid.centre()),
        None => u[u.len() / 2],
    }
}

#[derive(Clone, Debug)]
pub struct MhOutcome {
    pub states: Vec<DVector<f64>>,
    pub log_weights: Vec<f64>,
    /// Whether each recorded step accepted its proposal.
    pub moves: Vec<bool>,
    pub accepted: usize,
    pub proposals: usize,
    /// Proposals whose solve failed; these are always rejected.
    pub failed: usize,
}

impl MhOutcome {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            return f64::NAN;
        }
        self.accepted as f64 / self.proposals as f64
    }
}

/// Independence MH over pre-drawn proposals, `alpha = w(prop) / w(cur)`.
/// A current state of weight zero is left at the first valid proposal.
pub fn independence_mh<R: Rng + ?Sized>(
    start: (DVector<f64>, f64),
    proposals: &[RtoSample],
    rng: &mut R,
    record: bool,
) -> MhOutcome {
    let (mut u, mut lw) = start;
    let mut out = MhOutcome {
        states: Vec::new(),
        log_weights: Vec::new(),
        moves: Vec::new(),
        accepted: 0,
        proposals: proposals.len(),
        failed: 0,
    };
    for p in proposals {
        if !p.converged() {
            out.failed += 1;
        }
        let moved = mh_accept(p.log_weight - lw, rng);
        if moved {
            u.clone_from(&p.u);
            lw = p.log_weight;
            out.accepted += 1;
        }
        if record {
            out.states.push(u.clone());
            out.log_weights.push(lw);
            out.moves.push(moved);
        }
    }
    if !record {
        out.states.push(u);
        out.log_weights.push(lw);
    }
    out
}

/// Log weight of `u` under `map`; zero weight if the map folds there.
pub fn current_log_weight(map: &RtoMap, u: &DVector<f64>) -> f64 {
    map.assess(u).map_or(f64::NEG_INFINITY, |s| s.log_weight)
}

/// RTO-MH at fixed hyperparameters: one map at the MAP point, `n` proposals
/// solved in parallel, then a serial accept sweep. The chain starts at the
/// first converged proposal, so it has `n` states of which the first is free.
pub fn rto_mh<R: Rng + ?Sized>(
    problem: &BayesProblem,
    theta: &HyperParams,
    n: usize,
    trust: TrustRegion,
    rng: &mut R,
    workers: &Workers,
) -> Result<MhOutcome> {
    let est = find_map(problem, theta, &problem.prior_mean)?;
    let map = RtoMap::build(problem, theta, &est.u, trust)?;
    let proposals = map.sample_batch(n, rng, workers);
    let first = proposals
        .iter()
        .position(RtoSample::converged)
        .ok_or(Error::TooManyFailures { failed: n, total: n })?;
    let start = (proposals[first].u.clone(), proposals[first].log_weight);
    let mut out = independence_mh(start.clone(), &proposals[first + 1..], rng, true);
    out.states.insert(0, start.0);
    out.log_weights.insert(0, start.1);
    out.moves.insert(0, true);
    out.failed += first;
    Ok(out)
}

/// [`rto_mh`] packaged as a chain record with constant `theta`.
pub fn rto_mh_chain<R: Rng + ?Sized>(
    problem: &BayesProblem,
    theta: &HyperParams,
    n: usize,
    thin: usize,
    trust: TrustRegion,
    rng: &mut R,
    workers: &Workers,
) -> Result<ChainRecord> {
    let clock = Instant::now();
    let out = rto_mh(problem, theta, n, trust, rng, workers)?;
    let mut rec = ChainRecord::new("rto_mh", &["u"], thin);
    for (u, moved) in out.states.iter().zip(&out.moves) {
        rec.push(*theta, vec![if *moved { 1.0 } else { 0.0 }], f64::NAN, probe_value(problem, u), u);
    }
    rec.failures = out.failed;
    rec.elapsed_secs = clock.elapsed().as_secs_f64();
    Ok(rec)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MarginalEstimate {
    pub log_value: f64,
    /// Delta-method standard error of `log_value`; `NaN` with one sample.
    pub std_error: f64,
    pub used: usize,
    pub failed: usize,
}

/// Log of the mean weight over the finite entries; failures shrink the divisor.
pub fn mean_weight(log_weights: &[f64]) -> Result<MarginalEstimate> {
    let finite: Vec<f64> = log_weights.iter().copied().filter(|w| w.is_finite()).collect();
    let failed = log_weights.len() - finite.len();
    if finite.is_empty() {
        return Err(Error::TooManyFailures {
            failed,
            total: log_weights.len(),
        });
    }
    let log_value = log_mean_exp(&finite);
    let k = finite.len() as f64;
    let std_error = if finite.len() < 2 {
        f64::NAN
    } else {
        // relative spread of w / mean(w)
        let var = finite.iter().map(|w| ((w - log_value).exp() - 1.0).powi(2)).sum::<f64>() / (k - 1.0);
        (var / k).sqrt()
    };
    Ok(MarginalEstimate {
        log_value,
        std_error,
        used: finite.len(),
        failed,
    })
}

/// Importance-sampling estimate of `log p(y | theta)` from `n` RTO draws.
pub fn estimate_marginal_likelihood<R: Rng + ?Sized>(
    problem: &BayesProblem,
    theta: &HyperParams,
    n: usize,
    trust: TrustRegion,
    rng: &mut R,
    workers: &Workers,
) -> Result<MarginalEstimate> {
    if n == 0 {
        return Err(Error::domain("need at least one sample"));
    }
    let est = find_map(problem, theta, &problem.prior_mean)?;
    let map = RtoMap::build(problem, theta, &est.u, trust)?;
    let w: Vec<f64> = map.sample_batch(n, rng, workers).iter().map(|s| s.log_weight).collect();
    mean_weight(&w)
}

/// Gamma distribution in the shape/rate convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaParams {
    pub shape: f64,
    pub rate: f64,
}

impl GammaParams {
    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn variance(&self) -> f64 {
        self.shape / (self.rate * self.rate)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        let g = Gamma::new(self.shape, 1.0 / self.rate)
            .map_err(|e| Error::domain(format!("Gamma({}, {}): {e}", self.shape, self.rate)))?;
        Ok(g.sample(rng))
    }
}

/// Conditional of `lambda` given the forward output `eta = F(u)`.
pub fn lambda_conditional(prior: &HyperPrior, likelihood: &Likelihood, eta: &DVector<f64>) -> GammaParams {
    match likelihood {
        Likelihood::Gaussian { y, sigma, .. } => {
            let misfit: f64 = eta.iter().zip(y.iter()).zip(sigma.iter()).map(|((e, d), s)| (e - d).powi(2) / s).sum();
            GammaParams {
                shape: prior.alpha_lambda + 0.5 * y.len() as f64,
                rate: prior.beta_lambda + 0.5 * misfit,
            }
        }
        Likelihood::Poisson { count_sum, .. } => GammaParams {
            shape: prior.alpha_lambda + count_sum,
            rate: prior.beta_lambda + eta.sum(),
        },
    }
}

/// Conditional of `delta` given `u` and `gamma`.
pub fn delta_conditional(problem: &BayesProblem, u: &DVector<f64>, gamma: f64) -> GammaParams {
    let centred = u - &problem.prior_mean;
    GammaParams {
        shape: problem.hyper.alpha_delta + 0.5 * u.len() as f64,
        rate: problem.hyper.beta_delta + 0.5 * problem.operators.precision_norm_sq(gamma, &centred),
    }
}

/// Joint conjugate draw of `(lambda, delta)` given `u` and `gamma`.
pub fn sample_lambda_delta<R: Rng + ?Sized>(
    problem: &BayesProblem,
    u: &DVector<f64>,
    gamma: f64,
    rng: &mut R,
) -> Result<(f64, f64)> {
    let eta = problem.model.evaluate(u)?;
    let lambda = lambda_conditional(&problem.hyper, &problem.likelihood, &eta).sample(rng)?;
    let delta = delta_conditional(problem, u, gamma).sample(rng)?;
    Ok((lambda, delta))
}

/// `log p(gamma | u, delta)` up to a constant, with the quadratic forms of
/// `u - m` cached so each evaluation is a single pass over the spectrum.
#[derive(Clone, Debug)]
pub struct GammaConditional<'a> {
    problem: &'a BayesProblem,
    delta: f64,
    mass_sq: f64,
    stiffness_sq: f64,
}

impl<'a> GammaConditional<'a> {
    pub fn new(problem: &'a BayesProblem, u: &DVector<f64>, delta: f64) -> Self {
        let centred = u - &problem.prior_mean;
        let ops = &problem.operators;
        Self {
            problem,
            delta,
            mass_sq: ops.mass_norm_sq(&centred),
            stiffness_sq: ops.stiffness_norm_sq(&centred),
        }
    }

    pub fn logpdf(&self, gamma: f64) -> f64 {
        let hyper = &self.problem.hyper;
        let ops = &self.problem.operators;
        let lp = hyper.log_gamma(gamma);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        match ops.log_shifted_spectrum(gamma) {
            Ok(spec) => self.logpdf_with_spectrum(gamma, spec),
            Err(_) => f64::NEG_INFINITY,
        }
    }

    /// [`Self::logpdf`] with the log-determinant term supplied by the caller.
    fn logpdf_with_spectrum(&self, gamma: f64, spec: f64) -> f64 {
        let lp = self.problem.hyper.log_gamma(gamma);
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        let d = self.delta;
        match self.problem.operators.order() {
            SpdeOrder::One => lp + 0.5 * spec - 0.5 * d * gamma * self.mass_sq,
            SpdeOrder::Two => {
                lp + spec - 0.5 * d * gamma * gamma * self.mass_sq - d * gamma * self.stiffness_sq
            }
        }
    }

    /// `log g(rho) = rho + log p(e^rho | .)`, the density of `rho = log gamma`.
    pub fn log_rho_density(&self, rho: f64) -> f64 {
        rho + self.logpdf(rho.exp())
    }
}

pub fn gamma_conditional_logpdf(problem: &BayesProblem, gamma: f64, u: &DVector<f64>, delta: f64) -> f64 {
    GammaConditional::new(problem, u, delta).logpdf(gamma)
}

/// Log-determinant terms at the knots of the `log gamma` grid. They depend
/// only on `gamma`, so one table serves every step of a chain.
#[derive(Clone, Debug)]
pub struct SpectrumTable {
    lo: f64,
    hi: f64,
    spectrum: Vec<f64>,
}

impl SpectrumTable {
    pub fn new(problem: &BayesProblem, points: usize) -> Self {
        let (lo, hi) = (problem.hyper.gamma_lo.ln(), problem.hyper.gamma_hi.ln());
        let h = (hi - lo) / (points.max(2) - 1) as f64;
        let spectrum = (0..points)
            .map(|i| {
                let rho = if i + 1 == points { hi } else { lo + i as f64 * h };
                problem.operators.log_shifted_spectrum(rho.exp()).unwrap_or(f64::NAN)
            })
            .collect();
        Self { lo, hi, spectrum }
    }
}

/// Piecewise-linear density on a uniform grid with its exact
/// piecewise-quadratic CDF, normalized to integrate to one.
#[derive(Clone, Debug)]
pub struct InverseCdfGrid {
    lo: f64,
    h: f64,
    /// Density values scaled so the largest is 1.
    g: Vec<f64>,
    /// Normalized CDF at the knots.
    cdf: Vec<f64>,
    /// `log` of the scale turning `g` into a normalized density.
    log_norm: f64,
}

impl InverseCdfGrid {
    /// `log_g` is called once per knot, in increasing order.
    pub fn new(lo: f64, hi: f64, points: usize, mut log_g: impl FnMut(f64) -> f64) -> Result<Self> {
        if points < 2 || !(hi > lo) {
            return Err(Error::domain(format!("bad inverse-CDF grid [{lo}, {hi}] with {points} points")));
        }
        let h = (hi - lo) / (points - 1) as f64;
        let logs: Vec<f64> = (0..points).map(|i| log_g(if i + 1 == points { hi } else { lo + i as f64 * h })).collect();
        let max = logs.iter().copied().filter(|v| !v.is_nan()).fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::domain("inverse-CDF grid density vanishes everywhere"));
        }
        let g: Vec<f64> = logs.iter().map(|v| if v.is_nan() { 0.0 } else { (v - max).exp() }).collect();
        let mut cdf = Vec::with_capacity(points);
        cdf.push(0.0);
        for w in g.windows(2) {
            cdf.push(cdf.last().unwrap() + 0.5 * h * (w[0] + w[1]));
        }
        let total = *cdf.last().unwrap();
        if !(total > 0.0) {
            return Err(Error::domain("inverse-CDF grid has zero mass"));
        }
        cdf.iter_mut().for_each(|c| *c /= total);
        Ok(Self {
            lo,
            h,
            g,
            cdf,
            log_norm: -total.ln(),
        })
    }

    /// Grid for `rho = log gamma` over the hyper-prior support.
    pub fn for_gamma(cond: &GammaConditional<'_>, points: usize) -> Result<Self> {
        let hyper = &cond.problem.hyper;
        Self::new(hyper.gamma_lo.ln(), hyper.gamma_hi.ln(), points, |rho| cond.log_rho_density(rho))
    }

    /// Same as [`Self::for_gamma`] with the log-determinants read from `table`.
    pub fn for_gamma_cached(cond: &GammaConditional<'_>, table: &SpectrumTable) -> Result<Self> {
        let mut k = 0;
        Self::new(table.lo, table.hi, table.spectrum.len(), |rho| {
            let spec = table.spectrum[k];
            k += 1;
            rho + cond.logpdf_with_spectrum(rho.exp(), spec)
        })
    }

    pub fn lo(&self) -> f64 {
        self.lo
    }

    pub fn hi(&self) -> f64 {
        self.lo + self.h * (self.g.len() - 1) as f64
    }

    pub fn knots(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.g.len()).map(|i| self.lo + i as f64 * self.h)
    }

    /// Normalized approximate density; `-inf` outside the grid.
    pub fn log_density(&self, x: f64) -> f64 {
        if !(x >= self.lo && x <= self.hi()) {
            return f64::NEG_INFINITY;
        }
        let (i, t) = self.locate(x);
        let v = self.g[i] + (self.g[i + 1] - self.g[i]) * t / self.h;
        v.ln() + self.log_norm
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.lo {
            return 0.0;
        }
        if x >= self.hi() {
            return 1.0;
        }
        let (i, t) = self.locate(x);
        let slope = (self.g[i + 1] - self.g[i]) / self.h;
        self.cdf[i] + (self.g[i] * t + 0.5 * slope * t * t) * self.log_norm.exp()
    }

    /// Exact inverse of the piecewise-quadratic CDF.
    pub fn quantile(&self, xi: f64) -> f64 {
        let xi = xi.clamp(0.0, 1.0);
        let seg = match self.cdf.partition_point(|&c| c < xi) {
            0 => 0,
            k => (k - 1).min(self.g.len() - 2),
        };
        let rem = (xi - self.cdf[seg]) / self.log_norm.exp();
        let (g0, g1) = (self.g[seg], self.g[seg + 1]);
        let a = 0.5 * (g1 - g0) / self.h;
        // stable root of a t^2 + g0 t - rem = 0
        let disc = (g0 * g0 + 4.0 * a * rem).max(0.0);
        let denom = g0 + disc.sqrt();
        let t = if denom > 0.0 { 2.0 * rem / denom } else { 0.0 };
        self.lo + seg as f64 * self.h + t.clamp(0.0, self.h)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random::<f64>())
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let i = (((x - self.lo) / self.h).floor() as usize).min(self.g.len() - 2);
        (i, x - self.lo - i as f64 * self.h)
    }
}

/// Independence MH step for `rho = log gamma` with the grid proposal.
/// Returns the new `gamma` and whether it moved. A current state the grid
/// cannot propose (zero approximate density) is always left.
pub fn gamma_step<R: Rng + ?Sized>(
    cond: &GammaConditional<'_>,
    grid: &InverseCdfGrid,
    gamma: f64,
    rng: &mut R,
) -> (f64, bool) {
    let rho = gamma.ln();
    let prop = grid.sample(rng);
    let cur_q = grid.log_density(rho);
    let log_ratio = if cur_q == f64::NEG_INFINITY {
        f64::INFINITY
    } else {
        gamma_log_ratio(cond, grid, rho, prop)
    };
    if mh_accept(log_ratio, rng) {
        (prop.exp(), true)
    } else {
        (gamma, false)
    }
}

/// `log [g(b) q(a) / (g(a) q(b))]` for a move `a -> b` in `rho`.
pub fn gamma_log_ratio(cond: &GammaConditional<'_>, grid: &InverseCdfGrid, a: f64, b: f64) -> f64 {
    (cond.log_rho_density(b) - grid.log_density(b)) - (cond.log_rho_density(a) - grid.log_density(a))
}

/// Output of a hyperparameter chain.
#[derive(Clone, Debug, Default, Serialize)]
pub struct ChainRecord {
    pub sampler: String,
    /// Names of the blocks whose acceptance is tracked per step.
    pub blocks: Vec<String>,
    pub theta: Vec<HyperParams>,
    pub acceptance: Vec<Vec<f64>>,
    /// `log L_K` of the current state; `NaN` for samplers without one.
    pub log_marginal: Vec<f64>,
    /// `u` at the domain midpoint.
    pub u_mid: Vec<f64>,
    #[serde(skip)]
    pub u_draws: Vec<DVector<f64>>,
    pub u_draw_steps: Vec<usize>,
    pub thin: usize,
    pub failures: usize,
    pub seed: Option<u64>,
    pub elapsed_secs: f64,
}

impl ChainRecord {
    fn new(sampler: &str, blocks: &[&str], thin: usize) -> Self {
        Self {
            sampler: sampler.into(),
            blocks: blocks.iter().map(|b| b.to_string()).collect(),
            thin: thin.max(1),
            ..Default::default()
        }
    }

    fn push(&mut self, theta: HyperParams, acceptance: Vec<f64>, log_marginal: f64, u_mid: f64, u: &DVector<f64>) {
        let step = self.theta.len();
        self.theta.push(theta);
        self.acceptance.push(acceptance);
        self.log_marginal.push(log_marginal);
        self.u_mid.push(u_mid);
        if step.is_multiple_of(self.thin) {
            self.u_draws.push(u.clone());
            self.u_draw_steps.push(step);
        }
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn lambda(&self) -> Vec<f64> {
        self.theta.iter().map(|t| t.lambda).collect()
    }

    pub fn delta(&self) -> Vec<f64> {
        self.theta.iter().map(|t| t.delta).collect()
    }

    pub fn gamma(&self) -> Vec<f64> {
        self.theta.iter().map(|t| t.gamma).collect()
    }

    /// Mean acceptance of `block` over steps `from..`.
    pub fn acceptance_rate(&self, block: &str, from: usize) -> Option<f64> {
        let j = self.blocks.iter().position(|b| b == block)?;
        let rows = self.acceptance.get(from..)?;
        if rows.is_empty() {
            return None;
        }
        Some(rows.iter().map(|a| a[j]).sum::<f64>() / rows.len() as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsOptions {
    pub steps: usize,
    /// RTO-MH updates of `u` per outer step.
    pub inner_steps: usize,
    pub grid_points: usize,
    /// Keep every `thin`-th `u` draw.
    pub thin: usize,
    pub trust: TrustRegion,
}

impl Default for GibbsOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            inner_steps: 1,
            grid_points: GAMMA_GRID_POINTS,
            thin: 10,
            trust: TrustRegion::default(),
        }
    }
}

fn build_map_with_retry(
    problem: &BayesProblem,
    theta: &HyperParams,
    warm: &DVector<f64>,
    trust: TrustRegion,
    step: usize,
) -> Result<RtoMap> {
    let attempt = |start: &DVector<f64>| -> Result<RtoMap> {
        let est = find_map(problem, theta, start)?;
        RtoMap::build(problem, theta, &est.u, trust)
    };
    attempt(warm).or_else(|_| attempt(&problem.prior_mean)).map_err(|e| Error::Aborted {
        step,
        state: format!("lambda={:e}, delta={:e}, gamma={:e}", theta.lambda, theta.delta, theta.gamma),
        reason: e.to_string(),
    })
}

/// RTO-within-Gibbs. Each step rebuilds the map at the current `theta`
/// (warm-started from the previous MAP point), runs `inner_steps` RTO-MH
/// updates of `u`, draws `(lambda, delta)` from their Gamma conditionals and
/// updates `gamma` by the grid proposal with an MH correction.
pub fn rto_within_gibbs<R: Rng + ?Sized>(
    problem: &BayesProblem,
    theta0: HyperParams,
    u0: Option<&DVector<f64>>,
    opts: &GibbsOptions,
    rng: &mut R,
    workers: &Workers,
) -> Result<ChainRecord> {
    if opts.steps == 0 || opts.inner_steps == 0 {
        return Err(Error::Config(vec!["Gibbs steps and inner steps must be at least 1".into()]));
    }
    let clock = Instant::now();
    let mut rec = ChainRecord::new("gibbs", &["u", "gamma"], opts.thin);
    let mut theta = theta0;
    let mut warm = problem.prior_mean.clone();
    let table = SpectrumTable::new(problem, opts.grid_points);
    let mut u = match u0 {
        Some(u) => u.clone(),
        None => find_map(problem, &theta, &warm)?.u,
    };
    for step in 0..opts.steps {
        let map = build_map_with_retry(problem, &theta, &warm, opts.trust, step)?;
        warm.clone_from(map.u_star());
        let proposals = map.sample_batch(opts.inner_steps, rng, workers);
        let lw = current_log_weight(&map, &u);
        let mut sweep = independence_mh((u, lw), &proposals, rng, false);
        u = sweep.states.pop().expect("sweep keeps its final state");
        rec.failures += sweep.failed;

        let (lambda, delta) = sample_lambda_delta(problem, &u, theta.gamma, rng)?;
        theta.lambda = lambda;
        theta.delta = delta;

        let cond = GammaConditional::new(problem, &u, delta);
        let grid = InverseCdfGrid::for_gamma_cached(&cond, &table).map_err(|e| Error::Aborted {
            step,
            state: format!("lambda={lambda:e}, delta={delta:e}"),
            reason: e.to_string(),
        })?;
        let (gamma, moved) = gamma_step(&cond, &grid, theta.gamma, rng);
        theta.gamma = gamma;
        rec.push(
            theta,
            vec![sweep.acceptance_rate(), if moved { 1.0 } else { 0.0 }],
            f64::NAN,
            probe_value(problem, &u),
            &u,
        );
    }
    rec.elapsed_secs = clock.elapsed().as_secs_f64();
    Ok(rec)
}

/// `(1, 1, sqrt(gamma_lo gamma_hi))`: unit precisions and the geometric
/// centre of the `gamma` support.
pub fn default_start(prior: &HyperPrior) -> HyperParams {
    HyperParams::new(1.0, 1.0, (prior.gamma_lo * prior.gamma_hi).sqrt())
}

/// Short Gibbs run from [`default_start`]. Returns the componentwise median
/// of the second half of the chain and the last `u`, a posterior-typical
/// state to start other samplers from.
pub fn gibbs_warm_start<R: Rng + ?Sized>(
    problem: &BayesProblem,
    steps: usize,
    trust: TrustRegion,
    rng: &mut R,
    workers: &Workers,
) -> Result<(HyperParams, DVector<f64>)> {
    let opts = GibbsOptions {
        steps: steps.max(2),
        thin: 1,
        trust,
        ..Default::default()
    };
    let mut rec = rto_within_gibbs(problem, default_start(&problem.hyper), None, &opts, rng, workers)?;
    let half = rec.len() / 2;
    let median = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        crate::diagnostics::quantile_sorted(&v, 0.5)
    };
    let theta = HyperParams::new(
        median(rec.lambda()[half..].to_vec()),
        median(rec.delta()[half..].to_vec()),
        median(rec.gamma()[half..].to_vec()),
    );
    let u = rec.u_draws.pop().expect("thin 1 keeps every state");
    Ok((theta, u))
}

/// Unconstrained coordinates `(log lambda, log delta, logit gamma)` with
/// `gamma` rescaled to the unit interval over its support.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HyperTransform {
    pub gamma_lo: f64,
    pub gamma_hi: f64,
}

impl HyperTransform {
    pub fn new(prior: &HyperPrior) -> Self {
        Self {
            gamma_lo: prior.gamma_lo,
            gamma_hi: prior.gamma_hi,
        }
    }

    pub fn forward(&self, theta: &HyperParams) -> Vector3<f64> {
        let t = (theta.gamma - self.gamma_lo) / (self.gamma_hi - self.gamma_lo);
        Vector3::new(theta.lambda.ln(), theta.delta.ln(), (t / (1.0 - t)).ln())
    }

    pub fn inverse(&self, phi: &Vector3<f64>) -> HyperParams {
        let t = 1.0 / (1.0 + (-phi[2]).exp());
        HyperParams::new(phi[0].exp(), phi[1].exp(), self.gamma_lo + t * (self.gamma_hi - self.gamma_lo))
    }

    /// `log |d theta / d phi|`.
    pub fn log_jacobian(&self, theta: &HyperParams) -> f64 {
        let width = self.gamma_hi - self.gamma_lo;
        theta.lambda.ln()
            + theta.delta.ln()
            + ((theta.gamma - self.gamma_lo) * (self.gamma_hi - theta.gamma) / width).ln()
    }
}

/// Adaptive Metropolis random walk: Gaussian steps whose covariance tracks
/// the running covariance of the visited states until frozen.
#[derive(Clone, Debug)]
pub struct AdaptiveProposal {
    mean: Vector3<f64>,
    /// Sum of outer products of deviations (Welford).
    scatter: Matrix3<f64>,
    count: usize,
    adapt_start: usize,
    scale: f64,
    jitter: f64,
    frozen: bool,
    factor: Matrix3<f64>,
}

impl AdaptiveProposal {
    /// Starts from independent steps of standard deviation `initial_sd`;
    /// the empirical covariance is used once `adapt_start` states are seen.
    pub fn new(initial_sd: [f64; 3], adapt_start: usize) -> Self {
        Self {
            mean: Vector3::zeros(),
            scatter: Matrix3::zeros(),
            count: 0,
            adapt_start: adapt_start.max(4),
            scale: AM_SCALE,
            jitter: AM_JITTER,
            frozen: false,
            factor: Matrix3::from_diagonal(&Vector3::from(initial_sd)),
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Proposal covariance currently in use.
    pub fn covariance(&self) -> Matrix3<f64> {
        self.factor * self.factor.transpose()
    }

    pub fn observe(&mut self, phi: &Vector3<f64>) {
        if self.frozen {
            return;
        }
        self.count += 1;
        let d = phi - self.mean;
        self.mean += d / self.count as f64;
        self.scatter += d * (phi - self.mean).transpose();
        if self.count >= self.adapt_start {
            let cov = self.scatter / (self.count - 1) as f64;
            let reg = (cov + Matrix3::identity() * self.jitter) * self.scale;
            let sym = (reg + reg.transpose()) * 0.5;
            if let Some(chol) = sym.cholesky() {
                self.factor = chol.l();
            }
        }
    }

    pub fn propose<R: Rng + ?Sized>(&self, phi: &Vector3<f64>, rng: &mut R) -> Vector3<f64> {
        let z = Vector3::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
        phi + self.factor * z
    }
}

/// Importance-sampling state at one `theta`: the converged draws, their
/// log weights and `log L_K + log p0(theta)`.
#[derive(Clone, Debug)]
pub struct PmState {
    pub theta: HyperParams,
    pub u_star: DVector<f64>,
    pub samples: Vec<DVector<f64>>,
    pub log_weights: Vec<f64>,
    pub log_estimate: f64,
    pub log_target: f64,
    pub requested: usize,
}

impl PmState {
    pub fn failed(&self) -> usize {
        self.requested - self.samples.len()
    }

    /// Draws one stored sample with probability proportional to its weight.
    pub fn pick<R: Rng + ?Sized>(&self, rng: &mut R) -> &DVector<f64> {
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = self.log_weights.iter().map(|l| (l - max).exp()).collect();
        let idx = WeightedIndex::new(&w).map_or(0, |d| d.sample(rng));
        &self.samples[idx]
    }
}

/// `K` weighted draws from an existing map.
pub fn pm_estimate<R: Rng + ?Sized>(map: &RtoMap, k: usize, rng: &mut R, workers: &Workers) -> Result<PmState> {
    let batch = map.sample_batch(k, rng, workers);
    let mut samples = Vec::with_capacity(k);
    let mut log_weights = Vec::with_capacity(k);
    for s in batch {
        if s.converged() && s.log_weight.is_finite() {
            samples.push(s.u);
            log_weights.push(s.log_weight);
        }
    }
    let failed = k - samples.len();
    if samples.is_empty() || 2 * failed > k {
        return Err(Error::TooManyFailures { failed, total: k });
    }
    let theta = *map.theta_params();
    let log_estimate = log_mean_exp(&log_weights);
    let log_target = log_estimate + map_hyper_logpdf(map, &theta);
    Ok(PmState {
        theta,
        u_star: map.u_star().clone(),
        samples,
        log_weights,
        log_estimate,
        log_target,
        requested: k,
    })
}

fn map_hyper_logpdf(map: &RtoMap, theta: &HyperParams) -> f64 {
    map.problem().hyperprior_logpdf(theta)
}

/// Builds the map at `u*(theta)` (warm-started) and estimates the
/// pseudo-marginal density from `K` RTO draws.
pub fn pseudo_marginal_logdensity<R: Rng + ?Sized>(
    problem: &BayesProblem,
    theta: &HyperParams,
    k: usize,
    trust: TrustRegion,
    warm: Option<&DVector<f64>>,
    rng: &mut R,
    workers: &Workers,
) -> Result<PmState> {
    if k == 0 {
        return Err(Error::Config(vec!["K must be at least 1".into()]));
    }
    let est = find_map(problem, theta, warm.unwrap_or(&problem.prior_mean))?;
    let map = RtoMap::build(problem, theta, &est.u, trust)?;
    pm_estimate(&map, k, rng, workers)
}

/// `log alpha_K` for a move between two states under a random walk in the
/// unconstrained coordinates.
pub fn pm_log_acceptance(transform: &HyperTransform, current: &PmState, proposal: &PmState) -> f64 {
    (proposal.log_target + transform.log_jacobian(&proposal.theta))
        - (current.log_target + transform.log_jacobian(&current.theta))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmOptions {
    pub steps: usize,
    /// Samples per marginal-likelihood estimate (`K`).
    pub samples: usize,
    /// Adaptation stops here; `None` is 10% of `steps`.
    pub burn_in: Option<usize>,
    /// Initial random-walk standard deviations in the unconstrained coordinates.
    pub initial_sd: [f64; 3],
    pub adapt_start: usize,
    pub thin: usize,
    pub trust: TrustRegion,
}

impl Default for PmOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            samples: 1,
            burn_in: None,
            initial_sd: [0.1, 0.1, 0.3],
            adapt_start: 50,
            thin: 10,
            trust: TrustRegion::default(),
        }
    }
}

impl PmOptions {
    pub fn burn_in(&self) -> usize {
        self.burn_in.unwrap_or(self.steps / 10)
    }
}

/// RTO pseudo-marginal chain on `theta`. Each step emits one `u` drawn from
/// the current sample set in proportion to the weights.
pub fn rto_pm<R: Rng + ?Sized>(
    problem: &BayesProblem,
    theta0: HyperParams,
    opts: &PmOptions,
    rng: &mut R,
    workers: &Workers,
) -> Result<ChainRecord> {
    if opts.steps == 0 || opts.samples == 0 {
        return Err(Error::Config(vec!["pseudo-marginal steps and K must be at least 1".into()]));
    }
    let clock = Instant::now();
    let transform = HyperTransform::new(&problem.hyper);
    if !problem.hyperprior_logpdf(&theta0).is_finite() {
        return Err(Error::domain("initial hyperparameters outside the hyper-prior support"));
    }
    let mut state = pseudo_marginal_logdensity(problem, &theta0, opts.samples, opts.trust, None, rng, workers)
        .map_err(|e| Error::Aborted {
            step: 0,
            state: format!("{theta0:?}"),
            reason: e.to_string(),
        })?;
    let mut phi = transform.forward(&state.theta);
    let mut walk = AdaptiveProposal::new(opts.initial_sd, opts.adapt_start.min(opts.burn_in().max(1)));
    let burn = opts.burn_in();
    let mut rec = ChainRecord::new("pm", &["theta"], opts.thin);
    for step in 0..opts.steps {
        if step == burn {
            walk.freeze();
        }
        let phi_new = walk.propose(&phi, rng);
        let theta_new = transform.inverse(&phi_new);
        let mut moved = false;
        if problem.hyperprior_logpdf(&theta_new).is_finite() && theta_new.is_valid() {
            match pseudo_marginal_logdensity(
                problem,
                &theta_new,
                opts.samples,
                opts.trust,
                Some(&state.u_star),
                rng,
                workers,
            ) {
                Ok(prop) => {
                    rec.failures += prop.failed();
                    if mh_accept(pm_log_acceptance(&transform, &state, &prop), rng) {
                        state = prop;
                        phi = phi_new;
                        moved = true;
                    }
                }
                Err(_) => rec.failures += 1,
            }
        }
        walk.observe(&phi);
        let u = state.pick(rng).clone();
        rec.push(
            state.theta,
            vec![if moved { 1.0 } else { 0.0 }],
            state.log_estimate,
            probe_value(problem, &u),
            &u,
        );
    }
    rec.elapsed_secs = clock.elapsed().as_secs_f64();
    Ok(rec)
}

/// Sample standard deviation of `log L_K` over `reps` independent estimates
/// at fixed `theta`, all sharing one map.
pub fn log_pm_std<R: Rng + ?Sized>(
    problem: &BayesProblem,
    theta: &HyperParams,
    k: usize,
    reps: usize,
    trust: TrustRegion,
    rng: &mut R,
    workers: &Workers,
) -> Result<f64> {
    if reps < 2 {
        return Err(Error::domain("need at least two replications"));
    }
    let est = find_map(problem, theta, &problem.prior_mean)?;
    let map = RtoMap::build(problem, theta, &est.u, trust)?;
    log_pm_std_with(&map, k, reps, rng, workers)
}

/// As [`log_pm_std`] for a prebuilt map.
pub fn log_pm_std_with<R: Rng + ?Sized>(
    map: &RtoMap,
    k: usize,
    reps: usize,
    rng: &mut R,
    workers: &Workers,
) -> Result<f64> {
    let batch = map.sample_batch(k * reps, rng, workers);
    let mut values = Vec::with_capacity(reps);
    for chunk in batch.chunks(k) {
        let w: Vec<f64> = chunk.iter().map(|s| s.log_weight).collect();
        values.push(mean_weight(&w)?.log_value);
    }
    let mean = values.iter().sum::<f64>() / reps as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    Ok(var.sqrt())
}
