//! The subcommands, as library functions so they can be tested in-process.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hibrto::diagnostics::{credible_band, ChainStats, IACT_CUTOFF, IACT_MAX_LAG_DIVISOR};
use hibrto::grid::DiscretizationGrid;
use hibrto::parallel::Workers;
use hibrto::posterior::{BayesProblem, HyperParams};
use hibrto::prior::{PriorModel, PriorOperators};
use hibrto::samplers::{default_start, gibbs_warm_start, rto_mh_chain, rto_pm, rto_within_gibbs, ChainRecord};
use hibrto::setup::{synthesize, ProblemSpec};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig, SamplerConfig};
use crate::error::{CliError, CliResult};
use crate::io::{chain_table, data_table, read_data, sha256_hex, write_json, Table, UMatrix};

pub const DATA_CSV: &str = "data.csv";
pub const DATA_JSON: &str = "data.json";
pub const CHAINS_CSV: &str = "chains.csv";
pub const U_DRAWS_BIN: &str = "u_draws.bin";
pub const RUN_JSON: &str = "run.json";
pub const DIAGNOSTICS_JSON: &str = "diagnostics.json";
pub const ACF_CSV: &str = "acf.csv";
pub const BAND_CSV: &str = "band.csv";
pub const MANIFEST_JSON: &str = "manifest.json";
pub const PRIOR_BIN: &str = "prior_samples.bin";
pub const PRIOR_JSON: &str = "prior_samples.json";

/// Sidecar describing a data file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSidecar {
    /// Problem and geometry the data were generated for.
    pub problem: ProblemSpec,
    pub seed: u64,
    pub lambda_true: f64,
    /// Size of the grid the data were generated on.
    pub generated_on: usize,
    pub observations: usize,
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Generates synthetic data for `spec` and writes `data.csv` and `data.json`.
pub fn generate_data(spec: &ProblemSpec, seed: u64, lambda_true: Option<f64>, out: &Path) -> CliResult<Vec<f64>> {
    let data = synthesize(spec, lambda_true, seed)?;
    create_dir(out)?;
    data_table(&data.y).write(&out.join(DATA_CSV))?;
    write_json(
        &out.join(DATA_JSON),
        &DataSidecar {
            problem: spec.clone(),
            seed,
            lambda_true: data.lambda_true,
            generated_on: data.generated_on,
            observations: data.y.len(),
        },
    )?;
    Ok(data.y)
}

/// `gen-data`: the config's data block, with an optional seed override.
pub fn gen_data(cfg: &ExperimentConfig, seed: Option<u64>, out: &Path) -> CliResult<Vec<f64>> {
    let problems = cfg.problem.problems();
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    match &cfg.data {
        DataSource::Generate { seed: s, lambda_true } => generate_data(&cfg.problem, seed.unwrap_or(*s), *lambda_true, out),
        DataSource::File { .. } => Err(CliError::Config(vec![
            "data.source must be \"generate\" for gen-data".into(),
        ])),
    }
}

/// Per-column summaries of a chain table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub rows: usize,
    pub burn_in: usize,
    pub iact_cutoff: f64,
    pub iact_max_lag_divisor: usize,
    /// Mean of each `accept_*` column after burn-in.
    pub acceptance: BTreeMap<String, f64>,
    pub columns: Vec<ColumnReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ColumnReport {
    pub name: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stats: Option<ChainStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl DiagnosticsReport {
    pub fn column(&self, name: &str) -> Option<&ColumnReport> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn iact(&self, name: &str) -> Option<f64> {
        self.column(name)?.stats.as_ref().map(|s| s.iact)
    }

    /// `lag` followed by the ACF of every column that has one.
    pub fn acf_table(&self) -> Table {
        let ok: Vec<(&str, &[f64])> = self
            .columns
            .iter()
            .filter_map(|c| c.stats.as_ref().map(|s| (c.name.as_str(), s.acf.as_slice())))
            .collect();
        let lags = ok.iter().map(|(_, a)| a.len()).max().unwrap_or(0);
        let mut columns = vec!["lag".to_string()];
        columns.extend(ok.iter().map(|(n, _)| n.to_string()));
        let rows = (0..lags)
            .map(|j| {
                let mut row = vec![j as f64];
                row.extend(ok.iter().map(|(_, a)| a.get(j).copied().unwrap_or(f64::NAN)));
                row
            })
            .collect();
        Table { columns, rows }
    }
}

/// Summaries of every column except `step` and the acceptance flags. A column
/// that cannot be summarized (constant, non-finite) gets an error entry and
/// does not stop the others.
pub fn diagnose_table(table: &Table, burn_in: usize, max_lag: Option<usize>) -> CliResult<DiagnosticsReport> {
    if burn_in >= table.rows.len() {
        return Err(CliError::Config(vec![format!(
            "burn-in {burn_in} leaves nothing of a {}-row chain",
            table.rows.len()
        )]));
    }
    let mut acceptance = BTreeMap::new();
    let mut columns = Vec::new();
    for name in &table.columns {
        let values = &table.column(name).expect("column exists")[burn_in..];
        if name == "step" {
            continue;
        }
        if let Some(block) = name.strip_prefix("accept_") {
            acceptance.insert(block.to_string(), values.iter().sum::<f64>() / values.len() as f64);
            continue;
        }
        let result = if values.iter().any(|v| !v.is_finite()) {
            Err("column has non-finite values".to_string())
        } else {
            ChainStats::compute(values, max_lag).map_err(|e| e.to_string())
        };
        columns.push(match result {
            Ok(stats) => ColumnReport {
                name: name.clone(),
                stats: Some(stats),
                error: None,
            },
            Err(e) => ColumnReport {
                name: name.clone(),
                stats: None,
                error: Some(e),
            },
        });
    }
    Ok(DiagnosticsReport {
        rows: table.rows.len(),
        burn_in,
        iact_cutoff: IACT_CUTOFF,
        iact_max_lag_divisor: IACT_MAX_LAG_DIVISOR,
        acceptance,
        columns,
    })
}

/// Where to read off a credible band.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    /// Every node of a 1D grid on `[0, 1]`.
    Line,
    /// The diagonal cells of a square 2D grid.
    Diagonal,
}

impl Slice {
    pub fn for_problem(spec: &ProblemSpec) -> Self {
        match spec {
            ProblemSpec::Elliptic1d { .. } => Self::Line,
            ProblemSpec::Pet2d { .. } => Self::Diagonal,
        }
    }
}

/// 95% band with median of `u` along `slice`, skipping the first `skip` draws.
pub fn band_table(draws: &UMatrix, skip: usize, slice: Slice) -> CliResult<Table> {
    if draws.rows < skip + 2 {
        return Err(CliError::Config(vec![format!(
            "need at least two u draws after skipping {skip}, have {}",
            draws.rows
        )]));
    }
    let (grid, nodes): (DiscretizationGrid, Vec<usize>) = match slice {
        Slice::Line => (DiscretizationGrid::unit_interval(draws.cols)?, (0..draws.cols).collect()),
        Slice::Diagonal => {
            let side = (draws.cols as f64).sqrt().round() as usize;
            if side * side != draws.cols {
                return Err(CliError::Config(vec![format!(
                    "diagonal slice needs a square grid, draws have {} entries",
                    draws.cols
                )]));
            }
            (DiscretizationGrid::pet_square(side)?, (0..side).map(|i| i * side + i).collect())
        }
    };
    let rows: Vec<Vec<f64>> = (skip..draws.rows)
        .map(|r| nodes.iter().map(|&k| draws.row(r)[k]).collect())
        .collect();
    let band = credible_band(&rows, 0.95)?;
    Ok(Table {
        columns: ["node", "x", "y", "lo", "median", "hi"].map(String::from).to_vec(),
        rows: nodes
            .iter()
            .zip(&band)
            .map(|(&k, b)| {
                let [x, y] = grid.coord(k);
                vec![k as f64, x, y, b.lo, b.median, b.hi]
            })
            .collect(),
    })
}

#[derive(Clone, Debug, Default)]
pub struct DiagnoseOptions {
    pub burn_in: usize,
    pub max_lag: Option<usize>,
    pub u_draws: Option<PathBuf>,
    /// Draws of the u-matrix to skip.
    pub u_skip: usize,
    pub slice: Option<Slice>,
}

/// `diagnose`: `diagnostics.json` and `acf.csv`, plus `band.csv` when a
/// u-matrix is given.
pub fn diagnose(chains: &Path, opts: &DiagnoseOptions, out: &Path) -> CliResult<DiagnosticsReport> {
    let table = Table::read(chains)?;
    let report = diagnose_table(&table, opts.burn_in, opts.max_lag)?;
    create_dir(out)?;
    write_json(&out.join(DIAGNOSTICS_JSON), &report)?;
    report.acf_table().write(&out.join(ACF_CSV))?;
    if let Some(path) = &opts.u_draws {
        let draws = UMatrix::read(path)?;
        let slice = opts.slice.unwrap_or(if draws.cols.isqrt().pow(2) == draws.cols && draws.cols > 1 {
            Slice::Diagonal
        } else {
            Slice::Line
        });
        band_table(&draws, opts.u_skip, slice)?.write(&out.join(BAND_CSV))?;
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct RunMetadata {
    pub sampler: String,
    pub seed: u64,
    pub workers: usize,
    pub n: usize,
    pub observations: usize,
    pub steps: usize,
    /// `K` for the pseudo-marginal sampler.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_steps: Option<usize>,
    pub thin: usize,
    pub burn_in: usize,
    pub initial: HyperParams,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_true: Option<f64>,
    pub failures: usize,
    pub acceptance: BTreeMap<String, f64>,
    pub u_draw_steps: Vec<usize>,
    pub sampler_secs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub config_sha256: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub workers: usize,
    pub versions: BTreeMap<String, String>,
    pub wall_time_secs: f64,
    /// SHA-256 of each deterministic output.
    pub outputs: BTreeMap<String, String>,
}

pub struct RunOutput {
    pub record: ChainRecord,
    pub report: DiagnosticsReport,
    pub manifest: Manifest,
}

fn load_observations(cfg: &ExperimentConfig, out: &Path) -> CliResult<(Vec<f64>, Option<f64>)> {
    match &cfg.data {
        DataSource::Generate { seed, lambda_true } => {
            let y = generate_data(&cfg.problem, *seed, *lambda_true, out)?;
            let sidecar: DataSidecar = serde_json::from_slice(
                &fs::read(out.join(DATA_JSON)).map_err(|e| CliError::io(&out.join(DATA_JSON), e))?,
            )
            .map_err(|e| CliError::parse(&out.join(DATA_JSON), e.line(), e.to_string()))?;
            Ok((y, Some(sidecar.lambda_true)))
        }
        DataSource::File { path } => Ok((read_data(path)?, None)),
    }
}

fn starting_point(
    cfg: &ExperimentConfig,
    problem: &BayesProblem,
    rng: &mut ChaCha8Rng,
    workers: &Workers,
) -> CliResult<HyperParams> {
    let given = match &cfg.sampler {
        SamplerConfig::RtoMh { theta: Some(t), .. } => Some(*t),
        _ => cfg.initial,
    };
    Ok(match (given, &cfg.sampler) {
        (Some(t), _) => t,
        (None, SamplerConfig::Gibbs { .. }) => default_start(&problem.hyper),
        (None, _) => gibbs_warm_start(problem, cfg.warm_start_steps, cfg.trust_region, rng, workers)?.0,
    })
}

/// `run`: data, sampler, chains, diagnostics and manifest in `out`.
pub fn run(cfg: &ExperimentConfig, workers: &Workers, out: &Path) -> CliResult<RunOutput> {
    let clock = Instant::now();
    cfg.validate()?;
    create_dir(out)?;
    let (y, lambda_true) = load_observations(cfg, out)?;
    let observations = y.len();
    let problem = cfg.problem.problem(DVector::from_vec(y), cfg.hyperprior())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = starting_point(cfg, &problem, &mut rng, workers)?;
    let trust = cfg.trust_region;
    let mut record = match &cfg.sampler {
        SamplerConfig::Gibbs { .. } => {
            let opts = cfg.sampler.gibbs_options(trust).expect("gibbs sampler");
            rto_within_gibbs(&problem, initial, None, &opts, &mut rng, workers)?
        }
        SamplerConfig::Pm { .. } => {
            let opts = cfg.sampler.pm_options(trust).expect("pm sampler");
            rto_pm(&problem, initial, &opts, &mut rng, workers)?
        }
        SamplerConfig::RtoMh { steps, thin, .. } => {
            rto_mh_chain(&problem, &initial, *steps, *thin, trust, &mut rng, workers)?
        }
    };
    record.seed = Some(cfg.seed);

    let table = chain_table(&record);
    let chains = table.to_csv()?;
    write_bytes(&out.join(CHAINS_CSV), &chains)?;
    let draws = UMatrix::from_rows(&record.u_draws)?.encode();
    write_bytes(&out.join(U_DRAWS_BIN), &draws)?;

    let burn_in = cfg.sampler.burn_in().min(record.len().saturating_sub(2));
    let report = diagnose_table(&table, burn_in, None)?;
    write_json(&out.join(DIAGNOSTICS_JSON), &report)?;
    let acf = report.acf_table().to_csv()?;
    write_bytes(&out.join(ACF_CSV), &acf)?;
    let mut outputs = BTreeMap::from([
        (CHAINS_CSV.to_string(), sha256_hex(&chains)),
        (U_DRAWS_BIN.to_string(), sha256_hex(&draws)),
        (ACF_CSV.to_string(), sha256_hex(&acf)),
    ]);
    let u_skip = record.u_draw_steps.iter().take_while(|&&s| s < burn_in).count();
    if let Ok(band) = band_table(
        &UMatrix::decode(&draws).expect("just encoded"),
        u_skip,
        Slice::for_problem(&cfg.problem),
    ) {
        let band = band.to_csv()?;
        write_bytes(&out.join(BAND_CSV), &band)?;
        outputs.insert(BAND_CSV.to_string(), sha256_hex(&band));
    }

    let (samples, inner_steps) = match &cfg.sampler {
        SamplerConfig::Pm { samples, .. } => (Some(*samples), None),
        SamplerConfig::Gibbs { inner_steps, .. } => (None, Some(*inner_steps)),
        SamplerConfig::RtoMh { .. } => (None, None),
    };
    write_json(
        &out.join(RUN_JSON),
        &RunMetadata {
            sampler: record.sampler.clone(),
            seed: cfg.seed,
            workers: workers.count(),
            n: cfg.problem.n(),
            observations,
            steps: record.len(),
            samples,
            inner_steps,
            thin: record.thin,
            burn_in,
            initial,
            lambda_true,
            failures: record.failures,
            acceptance: report.acceptance.clone(),
            u_draw_steps: record.u_draw_steps.clone(),
            sampler_secs: record.elapsed_secs,
        },
    )?;
    let config_json = cfg.canonical_json();
    let manifest = Manifest {
        config_sha256: sha256_hex(config_json.as_bytes()),
        config: cfg.clone(),
        seed: cfg.seed,
        workers: workers.count(),
        versions: BTreeMap::from([
            ("hibrto".to_string(), hibrto::VERSION.to_string()),
            ("hibrto-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]),
        wall_time_secs: clock.elapsed().as_secs_f64(),
        outputs,
    };
    write_json(&out.join(MANIFEST_JSON), &manifest)?;
    Ok(RunOutput {
        record,
        report,
        manifest,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PriorSampleInfo {
    pub problem: ProblemSpec,
    pub seed: u64,
    pub count: usize,
    pub delta: f64,
    pub gamma: f64,
}

/// `prior-sample`: `count` draws from `N(0, (delta P_gamma)^-1)` on the
/// config's grid. `delta` and `gamma` default to the config's initial values,
/// else to `1` and the geometric centre of the `gamma` support.
pub fn prior_sample(
    cfg: &ExperimentConfig,
    count: usize,
    delta: Option<f64>,
    gamma: Option<f64>,
    seed: u64,
    out: &Path,
) -> CliResult<UMatrix> {
    let mut problems = cfg.problem.problems();
    if count == 0 {
        problems.push("count must be at least 1".into());
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let start = cfg.initial.unwrap_or_else(|| default_start(&cfg.hyperprior()));
    let (delta, gamma) = (delta.unwrap_or(start.delta), gamma.unwrap_or(start.gamma));
    let grid = cfg.problem.grid()?;
    let ops = PriorOperators::assemble(&grid)?;
    let prior = PriorModel::new(std::sync::Arc::new(ops), DVector::zeros(grid.len()), delta, gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<DVector<f64>> = (0..count).map(|_| prior.sample(&mut rng)).collect();
    let matrix = UMatrix::from_rows(&draws)?;
    create_dir(out)?;
    matrix.write(&out.join(PRIOR_BIN))?;
    write_json(
        &out.join(PRIOR_JSON),
        &PriorSampleInfo {
            problem: cfg.problem.clone(),
            seed,
            count,
            delta,
            gamma,
        },
    )?;
    Ok(matrix)
}
