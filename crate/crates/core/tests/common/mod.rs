//! Oracles shared by the integration tests.

#![allow(dead_code)]

use std::sync::Arc;

use hibrto::diagnostics::iact;
use hibrto::forward::LinearModel;
use hibrto::linalg::BandedSym;
use hibrto::posterior::{BayesProblem, HyperPrior, Likelihood};
use hibrto::prior::{PriorOperators, SpdeOrder};
use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// `y_i = u + e_i` with `u ~ N(0, (delta gamma)^-1)` and `e_i ~ N(0, 1 / lambda)`.
/// Informative hyper-priors keep the marginal of `lambda` compact enough to
/// integrate on a grid.
pub struct ScalarHierarchy {
    pub y: Vec<f64>,
    pub hyper: HyperPrior,
}

impl ScalarHierarchy {
    pub fn new() -> Self {
        Self {
            y: vec![0.9, 1.4, 0.2, 1.1, 0.6, -0.3],
            hyper: HyperPrior {
                alpha_lambda: 3.0,
                beta_lambda: 2.0,
                alpha_delta: 3.0,
                beta_delta: 2.0,
                alpha_gamma: 0.0,
                beta_gamma: 0.0,
                gamma_lo: 0.5,
                gamma_hi: 2.0,
            },
        }
    }

    pub fn problem(&self) -> BayesProblem {
        let m = self.y.len();
        let ops = PriorOperators::from_parts(vec![1.0], BandedSym::zeros(1, 0), SpdeOrder::One).unwrap();
        BayesProblem::new(
            Arc::new(LinearModel::new(DMatrix::from_element(m, 1, 1.0))),
            Arc::new(ops),
            DVector::zeros(1),
            self.hyper,
            Likelihood::gaussian(DVector::from_vec(self.y.clone())).unwrap(),
        )
        .unwrap()
    }

    /// `log p(y | lambda, delta, gamma)` with `u` integrated out:
    /// `y ~ N(0, a I + b 1 1^T)`, `a = 1 / lambda`, `b = 1 / (delta gamma)`.
    pub fn log_evidence(&self, lambda: f64, delta: f64, gamma: f64) -> f64 {
        let m = self.y.len() as f64;
        let s1: f64 = self.y.iter().sum();
        let s2: f64 = self.y.iter().map(|v| v * v).sum();
        let (a, b) = (1.0 / lambda, 1.0 / (delta * gamma));
        let quad = (s2 - b / (a + m * b) * s1 * s1) / a;
        let log_det = (m - 1.0) * a.ln() + (a + m * b).ln();
        -0.5 * (m * (2.0 * std::f64::consts::PI).ln() + log_det + quad)
    }

    /// Unnormalized `log p(lambda, delta, gamma | y)` inside the `gamma` support.
    pub fn log_posterior(&self, lambda: f64, delta: f64, gamma: f64) -> f64 {
        let h = &self.hyper;
        let kernel = |x: f64, alpha: f64, beta: f64| (alpha - 1.0) * x.ln() - beta * x;
        self.log_evidence(lambda, delta, gamma)
            + kernel(lambda, h.alpha_lambda, h.beta_lambda)
            + kernel(delta, h.alpha_delta, h.beta_delta)
    }

    /// Marginal of `log lambda` on a midpoint grid, `log delta` and `gamma`
    /// integrated by the midpoint rule.
    pub fn log_lambda_marginal(&self) -> GridCdf {
        let (lo, hi, nl) = (1e-4f64.ln(), 1e3f64.ln(), 800);
        let (dlo, dhi, nd) = (1e-4f64.ln(), 1e3f64.ln(), 400);
        let ng = 60;
        let hd = (dhi - dlo) / nd as f64;
        let hg = (self.hyper.gamma_hi - self.hyper.gamma_lo) / ng as f64;
        GridCdf::from_log_density(lo, hi, nl, |l| {
            let mut terms = Vec::with_capacity(nd * ng);
            for j in 0..nd {
                let d = dlo + (j as f64 + 0.5) * hd;
                for k in 0..ng {
                    let g = self.hyper.gamma_lo + (k as f64 + 0.5) * hg;
                    // Jacobian of (log lambda, log delta)
                    terms.push(self.log_posterior(l.exp(), d.exp(), g) + l + d);
                }
            }
            log_sum_exp(&terms)
        })
    }
}

pub fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// A density tabulated at cell midpoints, constant on each cell.
pub struct GridCdf {
    lo: f64,
    h: f64,
    /// CDF at the upper edge of each cell.
    cdf: Vec<f64>,
}

impl GridCdf {
    pub fn from_log_density(lo: f64, hi: f64, cells: usize, mut log_f: impl FnMut(f64) -> f64) -> Self {
        let h = (hi - lo) / cells as f64;
        let logs: Vec<f64> = (0..cells).map(|i| log_f(lo + (i as f64 + 0.5) * h)).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mass: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = mass.iter().sum();
        let mut acc = 0.0;
        let cdf = mass
            .iter()
            .map(|m| {
                acc += m / total;
                acc
            })
            .collect();
        Self { lo, h, cdf }
    }

    pub fn quantile(&self, q: f64) -> f64 {
        let i = self.cdf.partition_point(|c| *c < q).min(self.cdf.len() - 1);
        let below = if i == 0 { 0.0 } else { self.cdf[i - 1] };
        let frac = ((q - below) / (self.cdf[i] - below)).clamp(0.0, 1.0);
        self.lo + (i as f64 + frac) * self.h
    }

    /// Interior edges of `bins` equal-probability bins.
    pub fn equal_mass_edges(&self, bins: usize) -> Vec<f64> {
        (1..bins).map(|b| self.quantile(b as f64 / bins as f64)).collect()
    }
}

/// Pearson statistic of `samples` against equal-probability bins.
pub fn chi_square(samples: &[f64], edges: &[f64]) -> f64 {
    let bins = edges.len() + 1;
    let mut counts = vec![0usize; bins];
    for s in samples {
        counts[edges.partition_point(|e| e < s)] += 1;
    }
    let expected = samples.len() as f64 / bins as f64;
    counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
}

/// Upper 1% point of the chi-square distribution for `bins` bins.
pub fn chi_square_critical(bins: usize) -> f64 {
    ChiSquared::new((bins - 1) as f64).unwrap().inverse_cdf(0.99)
}

/// Every `ceil(2 tau)`-th entry, `tau` the IACT, so that the kept draws
/// are close to independent.
pub fn thin_by_iact(chain: &[f64]) -> (Vec<f64>, f64) {
    let tau = iact(chain).unwrap();
    let step = (2.0 * tau).ceil().max(1.0) as usize;
    (chain.iter().step_by(step).copied().collect(), tau)
}
