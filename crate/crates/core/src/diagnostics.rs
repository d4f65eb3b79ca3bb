//! Chain summaries: autocorrelation, integrated autocorrelation time and
//! empirical quantiles.

use serde::Serialize;

use crate::error::{Error, Result};

/// Autocorrelations stop contributing to the IACT once they drop below this.
pub const IACT_CUTOFF: f64 = 0.05;
/// The IACT sum never runs past `N / IACT_MAX_LAG_DIVISOR`.
pub const IACT_MAX_LAG_DIVISOR: usize = 50;

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// `rho(j) = C(j) / C(0)` for `j = 0..=max_lag`, where
/// `C(j) = (N - j)^-1 sum_k (x_k - mean)(x_{k+j} - mean)`.
pub fn acf(chain: &[f64], max_lag: usize) -> Result<Vec<f64>> {
    let n = chain.len();
    if max_lag == 0 || n <= max_lag {
        return Err(Error::domain(format!("need chain length {n} > max lag {max_lag} >= 1")));
    }
    let m = mean(chain);
    let d: Vec<f64> = chain.iter().map(|x| x - m).collect();
    let c0 = d.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if !(c0 > 0.0) || !c0.is_finite() {
        return Err(Error::ZeroVariance);
    }
    let mut out = Vec::with_capacity(max_lag + 1);
    out.push(1.0);
    for j in 1..=max_lag {
        let c: f64 = d[..n - j].iter().zip(&d[j..]).map(|(a, b)| a * b).sum::<f64>() / (n - j) as f64;
        out.push(c / c0);
    }
    Ok(out)
}

/// Largest lag considered by [`iact`].
pub fn iact_max_lag(n: usize) -> usize {
    (n / IACT_MAX_LAG_DIVISOR).max(1)
}

/// `1 + 2 sum_{j=1}^{M} rho(j)`, truncated at the first lag whose
/// autocorrelation is below [`IACT_CUTOFF`] (that lag is included) or at
/// [`iact_max_lag`], whichever comes first.
pub fn iact(chain: &[f64]) -> Result<f64> {
    let rho = acf(chain, iact_max_lag(chain.len()))?;
    Ok(iact_from_acf(&rho))
}

pub fn iact_from_acf(rho: &[f64]) -> f64 {
    let mut tau = 1.0;
    for &r in &rho[1..] {
        tau += 2.0 * r;
        if r < IACT_CUTOFF {
            break;
        }
    }
    tau
}

/// Quantile of sorted data by linear interpolation between order
/// statistics at position `p (N - 1)`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CredibleInterval {
    pub lo: f64,
    pub median: f64,
    pub hi: f64,
}

/// Central interval holding `level` of the mass, with the median.
pub fn credible_interval(samples: &[f64], level: f64) -> Result<CredibleInterval> {
    if samples.len() < 2 {
        return Err(Error::domain("need at least two samples for an interval"));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::domain(format!("credible level {level} not in (0, 1)")));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(CredibleInterval {
        lo: quantile_sorted(&s, 0.5 * (1.0 - level)),
        median: quantile_sorted(&s, 0.5),
        hi: quantile_sorted(&s, 0.5 * (1.0 + level)),
    })
}

/// Per-component intervals for a set of vector draws.
pub fn credible_band(draws: &[Vec<f64>], level: f64) -> Result<Vec<CredibleInterval>> {
    let Some(first) = draws.first() else {
        return Err(Error::domain("no draws"));
    };
    (0..first.len())
        .map(|i| {
            let col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
            credible_interval(&col, level)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ChainStats {
    pub len: usize,
    pub mean: f64,
    pub variance: f64,
    pub acf: Vec<f64>,
    pub iact: f64,
    pub ess: f64,
    pub interval_95: CredibleInterval,
}

impl ChainStats {
    /// Summaries with the ACF kept up to `max_lag` (defaults to the IACT window).
    pub fn compute(chain: &[f64], max_lag: Option<usize>) -> Result<Self> {
        let n = chain.len();
        let window = iact_max_lag(n);
        let lag = max_lag.unwrap_or(window).max(window).min(n.saturating_sub(1));
        let rho = acf(chain, lag)?;
        let tau = iact_from_acf(&rho[..=window.min(lag)]);
        let m = mean(chain);
        let variance = chain.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let keep = max_lag.unwrap_or(window).min(lag);
        Ok(Self {
            len: n,
            mean: m,
            variance,
            acf: rho[..=keep].to_vec(),
            iact: tau,
            ess: n as f64 / tau.max(1e-300),
            interval_95: credible_interval(chain, 0.95)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn white(n: usize, seed: u64) -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| r.sample(StandardNormal)).collect()
    }

    fn ar1(n: usize, phi: f64, seed: u64) -> Vec<f64> {
        let e = white(n, seed);
        let mut x = vec![0.0; n];
        for k in 1..n {
            x[k] = phi * x[k - 1] + e[k];
        }
        x
    }

    #[test]
    fn alternating_chain_is_anticorrelated() {
        let x: Vec<f64> = (0..1000).map(|k| if k % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let rho = acf(&x, 3).unwrap();
        assert_eq!(rho[0], 1.0);
        assert!((rho[1] + 1.0).abs() < 1e-2);
        assert!(iact(&x).unwrap() < 1.0);
    }

    #[test]
    fn constant_chain_is_an_error() {
        let mut x = vec![2.0; 100];
        assert!(matches!(acf(&x, 2), Err(Error::ZeroVariance)));
        x[0] = 1.0;
        assert!(acf(&x, 2).is_ok());
        assert!(acf(&x, 100).is_err());
        assert!(acf(&x, 0).is_err());
    }

    #[test]
    fn white_noise_has_small_autocorrelation() {
        let n = 20_000;
        let x = white(n, 1);
        let rho = acf(&x, 20).unwrap();
        for r in &rho[1..] {
            assert!(r.abs() < 3.0 / (n as f64).sqrt());
        }
        let tau = iact(&x).unwrap();
        assert!((0.8..=1.3).contains(&tau), "{tau}");
    }

    #[test]
    fn ar1_iact_matches_closed_form() {
        let tau = iact(&ar1(200_000, 0.9, 2)).unwrap();
        assert!((tau - 19.0).abs() < 0.25 * 19.0, "{tau}");
    }

    #[test]
    fn iact_is_affine_invariant() {
        let x = ar1(5000, 0.7, 3);
        let y: Vec<f64> = x.iter().map(|v| -3.5 * v + 10.0).collect();
        assert!((iact(&x).unwrap() - iact(&y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn quantiles_of_one_to_hundred() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        let ci = credible_interval(&s, 0.95).unwrap();
        assert!((ci.lo - 3.475).abs() < 1e-12);
        assert!((ci.median - 50.5).abs() < 1e-12);
        assert!((ci.hi - 97.525).abs() < 1e-12);
        let narrow = credible_interval(&s, 0.5).unwrap();
        assert!(narrow.lo >= ci.lo && narrow.hi <= ci.hi);
    }

    #[test]
    fn normal_upper_quantile() {
        let ci = credible_interval(&white(100_000, 4), 0.95).unwrap();
        assert!((ci.hi - 1.96).abs() < 0.05);
        assert!(ci.median.abs() < 0.02);
    }

    #[test]
    fn chain_stats_fields() {
        let x = ar1(10_000, 0.5, 5);
        let s = ChainStats::compute(&x, Some(30)).unwrap();
        assert_eq!(s.acf.len(), 31);
        assert_eq!(s.acf[0], 1.0);
        assert!(s.acf.iter().all(|r| r.abs() <= 1.0 + 1e-12));
        assert!((s.ess - 10_000.0 / s.iact).abs() < 1e-9);
        assert!((s.iact - 3.0).abs() < 0.6, "{}", s.iact);
    }
}
