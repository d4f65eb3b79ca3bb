//! Experiment configuration files.
//!
//! Configs are JSON. Unknown keys are rejected so that typos do not silently
//! fall back to defaults, and validation reports every problem at once.

use std::path::{Path, PathBuf};

use hibrto::posterior::{HyperParams, HyperPrior};
use hibrto::rto::TrustRegion;
use hibrto::samplers::{GibbsOptions, PmOptions};
use hibrto::setup::ProblemSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Shipped presets, by name.
pub const PRESETS: &[(&str, &str)] = &[
    ("elliptic-gibbs", include_str!("../presets/elliptic-gibbs.json")),
    ("elliptic-pm", include_str!("../presets/elliptic-pm.json")),
    ("elliptic-rto-mh", include_str!("../presets/elliptic-rto-mh.json")),
    ("pet-gibbs", include_str!("../presets/pet-gibbs.json")),
    ("pet-pm", include_str!("../presets/pet-pm.json")),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub data: DataSource,
    /// Defaults to the problem's standard hyper-prior.
    #[serde(default)]
    pub hyperprior: Option<HyperPrior>,
    pub sampler: SamplerConfig,
    /// Starting hyperparameters. Without them the pseudo-marginal and
    /// fixed-`theta` samplers start from a short Gibbs run.
    #[serde(default)]
    pub initial: Option<HyperParams>,
    #[serde(default = "default_warm_start_steps")]
    pub warm_start_steps: usize,
    #[serde(default)]
    pub trust_region: TrustRegion,
    /// Seed of the sampler's random stream.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

fn default_warm_start_steps() -> usize {
    100
}

fn one() -> usize {
    1
}

fn ten() -> usize {
    10
}

fn fifty() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Synthetic data from the true field; `lambda_true` defaults per problem.
    Generate {
        #[serde(default = "default_data_seed")]
        seed: u64,
        #[serde(default)]
        lambda_true: Option<f64>,
    },
    /// A data CSV with `id,value` columns. Relative paths are resolved
    /// against the config file's directory.
    File { path: PathBuf },
}

fn default_data_seed() -> u64 {
    1
}

impl Default for DataSource {
    fn default() -> Self {
        Self::Generate {
            seed: default_data_seed(),
            lambda_true: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplerConfig {
    Gibbs {
        steps: usize,
        #[serde(default = "one")]
        inner_steps: usize,
        /// Keep every `thin`-th `u` draw.
        #[serde(default = "ten")]
        thin: usize,
    },
    Pm {
        steps: usize,
        /// Samples per marginal-likelihood estimate.
        samples: usize,
        #[serde(default)]
        burn_in: Option<usize>,
        #[serde(default = "fifty")]
        adapt_start: usize,
        #[serde(default = "ten")]
        thin: usize,
    },
    RtoMh {
        steps: usize,
        /// Fixed hyperparameters; falls back to `initial`.
        #[serde(default)]
        theta: Option<HyperParams>,
        #[serde(default = "ten")]
        thin: usize,
    },
}

impl SamplerConfig {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gibbs { .. } => "gibbs",
            Self::Pm { .. } => "pm",
            Self::RtoMh { .. } => "rto_mh",
        }
    }

    pub fn steps(&self) -> usize {
        match self {
            Self::Gibbs { steps, .. } | Self::Pm { steps, .. } | Self::RtoMh { steps, .. } => *steps,
        }
    }

    pub fn thin(&self) -> usize {
        match self {
            Self::Gibbs { thin, .. } | Self::Pm { thin, .. } | Self::RtoMh { thin, .. } => *thin,
        }
    }

    /// Burn-in used for summaries: the adaptation period for the
    /// pseudo-marginal sampler, else 10% of the chain.
    pub fn burn_in(&self) -> usize {
        match self {
            Self::Pm { steps, burn_in, .. } => burn_in.unwrap_or(steps / 10),
            _ => self.steps() / 10,
        }
    }

    fn problems(&self, out: &mut Vec<String>) {
        let mut at_least_one = |field: &str, v: usize| {
            if v == 0 {
                out.push(format!("sampler.{field} must be at least 1, got 0"));
            }
        };
        at_least_one("steps", self.steps());
        at_least_one("thin", self.thin());
        match self {
            Self::Gibbs { inner_steps, .. } => at_least_one("inner_steps", *inner_steps),
            Self::Pm {
                samples,
                burn_in,
                steps,
                ..
            } => {
                at_least_one("samples", *samples);
                if let Some(b) = burn_in {
                    if *b >= *steps && *steps > 0 {
                        out.push(format!("sampler.burn_in ({b}) must be below sampler.steps ({steps})"));
                    }
                }
            }
            Self::RtoMh { .. } => {}
        }
    }

    pub fn gibbs_options(&self, trust: TrustRegion) -> Option<GibbsOptions> {
        match self {
            Self::Gibbs {
                steps,
                inner_steps,
                thin,
            } => Some(GibbsOptions {
                steps: *steps,
                inner_steps: *inner_steps,
                thin: *thin,
                trust,
                ..Default::default()
            }),
            _ => None,
        }
    }

    pub fn pm_options(&self, trust: TrustRegion) -> Option<PmOptions> {
        match self {
            Self::Pm {
                steps,
                samples,
                burn_in,
                adapt_start,
                thin,
            } => Some(PmOptions {
                steps: *steps,
                samples: *samples,
                burn_in: *burn_in,
                adapt_start: *adapt_start,
                thin: *thin,
                trust,
                ..Default::default()
            }),
            _ => None,
        }
    }
}

fn theta_problems(field: &str, theta: &HyperParams, prior: &HyperPrior, out: &mut Vec<String>) {
    if !theta.is_valid() {
        out.push(format!("{field}: lambda, delta and gamma must be positive and finite, got {theta:?}"));
    } else if !(theta.gamma > prior.gamma_lo && theta.gamma < prior.gamma_hi) {
        out.push(format!(
            "{field}.gamma = {} lies outside the hyper-prior support ({}, {})",
            theta.gamma, prior.gamma_lo, prior.gamma_hi
        ));
    }
}

impl ExperimentConfig {
    /// Parses a config, resolving a relative data path against `base`.
    pub fn from_json(text: &str, base: Option<&Path>) -> CliResult<Self> {
        let mut cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(vec![e.to_string()]))?;
        if let (DataSource::File { path }, Some(base)) = (&mut cfg.data, base) {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        Ok(cfg)
    }

    /// Reads `spec`, which is a file path or `preset:NAME`.
    pub fn load(spec: &str) -> CliResult<Self> {
        if let Some(name) = spec.strip_prefix("preset:") {
            return preset(name);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text, path.parent())
    }

    pub fn hyperprior(&self) -> HyperPrior {
        self.hyperprior.unwrap_or_else(|| self.problem.default_hyperprior())
    }

    /// Every validation failure, each naming the offending field.
    pub fn problems(&self) -> Vec<String> {
        let mut out = self.problem.problems();
        let prior = self.hyperprior();
        out.extend(prior.problems().into_iter().map(|p| format!("hyperprior: {p}")));
        self.sampler.problems(&mut out);
        out.extend(self.trust_region.problems().into_iter().map(|p| format!("trust_region: {p}")));
        match &self.data {
            DataSource::Generate {
                lambda_true: Some(l), ..
            } if !(*l > 0.0 && l.is_finite()) => {
                out.push(format!("data.lambda_true must be positive, got {l}"));
            }
            DataSource::File { path } if !path.is_file() => {
                out.push(format!("data.path: {} does not exist", path.display()));
            }
            _ => {}
        }
        if let Some(theta) = &self.initial {
            theta_problems("initial", theta, &prior, &mut out);
        }
        if let SamplerConfig::RtoMh { theta: Some(theta), .. } = &self.sampler {
            theta_problems("sampler.theta", theta, &prior, &mut out);
        }
        if self.warm_start_steps < 2 && self.initial.is_none() && !matches!(self.sampler, SamplerConfig::Gibbs { .. }) {
            out.push(format!("warm_start_steps must be at least 2, got {}", self.warm_start_steps));
        }
        out
    }

    pub fn validate(&self) -> CliResult<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems))
        }
    }

    /// Canonical JSON without the output directory, the input to the
    /// manifest hash: the same experiment hashes the same wherever it is written.
    pub fn canonical_json(&self) -> String {
        let experiment = Self { out: None, ..self.clone() };
        serde_json::to_string(&experiment).expect("configs always serialize")
    }
}

pub fn preset(name: &str) -> CliResult<ExperimentConfig> {
    let text = PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            let names: Vec<&str> = PRESETS.iter().map(|(n, _)| *n).collect();
            CliError::Config(vec![format!("unknown preset {name:?}; available: {}", names.join(", "))])
        })?;
    ExperimentConfig::from_json(text, None)
}
