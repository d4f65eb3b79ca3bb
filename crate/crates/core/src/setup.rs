//! Ready-made benchmark problems with synthetic data.
//!
//! Data are always generated on a fine grid, independent of the grid used
//! for inversion, so runs at different resolutions see identical data.

use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{
    elliptic_true_field, generate_synthetic_data, pet_true_field, precision_for_snr, EllipticModel1D,
    ForwardModel, ObservationKind, PetGeometry, PetModel2D,
};
use crate::grid::DiscretizationGrid;
use crate::posterior::{BayesProblem, HyperPrior, Likelihood};
use crate::prior::PriorOperators;

/// Nodes of the grid the elliptic data are generated on.
pub const ELLIPTIC_DATA_NODES: usize = 8192;
/// Cells per side of the grid the PET data are generated on.
pub const PET_DATA_SIDE: usize = 80;
pub const ELLIPTIC_SNR: f64 = 100.0;
/// Scale of the expected PET counts; the reference does not report one.
pub const PET_LAMBDA_TRUE: f64 = 1000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Elliptic1d {
        n: usize,
    },
    /// `n` must be a perfect square; the grid is `sqrt(n) x sqrt(n)`.
    Pet2d {
        n: usize,
        #[serde(default)]
        geometry: PetGeometry,
    },
}

impl ProblemSpec {
    pub fn n(&self) -> usize {
        match self {
            Self::Elliptic1d { n } | Self::Pet2d { n, .. } => *n,
        }
    }

    pub fn observation_kind(&self) -> ObservationKind {
        match self {
            Self::Elliptic1d { .. } => ObservationKind::Gaussian,
            Self::Pet2d { .. } => ObservationKind::Poisson,
        }
    }

    pub fn default_hyperprior(&self) -> HyperPrior {
        match self {
            Self::Elliptic1d { .. } => HyperPrior::elliptic(),
            Self::Pet2d { .. } => HyperPrior::pet(),
        }
    }

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self {
            Self::Elliptic1d { n } => {
                if *n < 3 {
                    out.push(format!("problem.n: elliptic grid needs at least 3 nodes, got {n}"));
                }
            }
            Self::Pet2d { n, geometry } => {
                let side = isqrt(*n);
                if side < 2 || side * side != *n {
                    out.push(format!("problem.n: PET grid size must be a square of at least 4, got {n}"));
                } else if let Err(e) = self.grid().and_then(|g| geometry.validate(&g)) {
                    out.push(format!("problem.geometry: {e}"));
                }
            }
        }
        out
    }

    pub fn grid(&self) -> Result<DiscretizationGrid> {
        match self {
            Self::Elliptic1d { n } => DiscretizationGrid::unit_interval(*n),
            Self::Pet2d { n, .. } => {
                let side = isqrt(*n);
                if side * side != *n {
                    return Err(Error::Grid(format!("{n} is not a perfect square")));
                }
                DiscretizationGrid::pet_square(side)
            }
        }
    }

    pub fn model(&self, grid: &DiscretizationGrid) -> Result<Arc<dyn ForwardModel>> {
        Ok(match self {
            Self::Elliptic1d { .. } => Arc::new(EllipticModel1D::new(grid)?),
            Self::Pet2d { geometry, .. } => Arc::new(PetModel2D::new(grid, geometry.clone())?),
        })
    }

    /// Same problem on the data-generation grid.
    pub fn fine(&self) -> Self {
        match self {
            Self::Elliptic1d { .. } => Self::Elliptic1d {
                n: ELLIPTIC_DATA_NODES,
            },
            Self::Pet2d { geometry, .. } => Self::Pet2d {
                n: PET_DATA_SIDE * PET_DATA_SIDE,
                geometry: geometry.clone(),
            },
        }
    }

    pub fn true_field(&self, grid: &DiscretizationGrid) -> DVector<f64> {
        match self {
            Self::Elliptic1d { .. } => elliptic_true_field(grid),
            Self::Pet2d { .. } => pet_true_field(grid),
        }
    }

    /// Posterior problem for observed `data` with a zero prior mean.
    pub fn problem(&self, data: DVector<f64>, hyper: HyperPrior) -> Result<BayesProblem> {
        let grid = self.grid()?;
        let model = self.model(&grid)?;
        if data.len() != model.output_dim() {
            return Err(Error::Dimension {
                what: "observations",
                expected: model.output_dim(),
                got: data.len(),
            });
        }
        let likelihood = match self.observation_kind() {
            ObservationKind::Gaussian => Likelihood::gaussian(data)?,
            ObservationKind::Poisson => Likelihood::poisson(data)?,
        };
        let n = grid.len();
        BayesProblem::new(model, Arc::new(PriorOperators::assemble(&grid)?), DVector::zeros(n), hyper, likelihood)
    }
}

fn isqrt(n: usize) -> usize {
    let mut r = (n as f64).sqrt() as usize;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub y: Vec<f64>,
    pub lambda_true: f64,
    pub seed: u64,
    /// Size of the grid the data were generated on.
    pub generated_on: usize,
}

/// Data from the true field on the fine grid. `lambda_true` defaults to
/// SNR 100 (elliptic) or [`PET_LAMBDA_TRUE`].
pub fn synthesize(spec: &ProblemSpec, lambda_true: Option<f64>, seed: u64) -> Result<SyntheticData> {
    let fine = spec.fine();
    let grid = fine.grid()?;
    let model = fine.model(&grid)?;
    let truth = fine.true_field(&grid);
    let lambda = match (lambda_true, spec) {
        (Some(l), _) => l,
        (None, ProblemSpec::Elliptic1d { .. }) => precision_for_snr(&model.evaluate(&truth)?, ELLIPTIC_SNR),
        (None, ProblemSpec::Pet2d { .. }) => PET_LAMBDA_TRUE,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = generate_synthetic_data(model.as_ref(), &truth, lambda, spec.observation_kind(), &mut rng)?;
    Ok(SyntheticData {
        y: y.as_slice().to_vec(),
        lambda_true: lambda,
        seed,
        generated_on: grid.len(),
    })
}

/// Problem at `spec`'s resolution with freshly synthesized data.
pub fn synthetic_problem(spec: &ProblemSpec, lambda_true: Option<f64>, seed: u64) -> Result<(BayesProblem, SyntheticData)> {
    let data = synthesize(spec, lambda_true, seed)?;
    let problem = spec.problem(DVector::from_column_slice(&data.y), spec.default_hyperprior())?;
    Ok((problem, data))
}
