//! JSON experiment specification and its resolution into engine inputs.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use fedsim::counterexample::Counterexample;
use fedsim::datasets::{self, FederatedDataset, SizeMode};
use fedsim::engine::{BatchMode, DecayClock, LrSchedule, RunConfig};
use fedsim::objectives::{GlobalObjective, ParamVector};
use fedsim::sampling::Scheme;
use fedsim::theory::{estimate_constants, EstimateOptions, ProblemConstants};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::CliError;

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub problem: Option<ProblemSpec>,
    /// Runs of the `run` and `validate` subcommands.
    #[serde(default)]
    pub runs: Vec<RunSpec>,
    /// Template run of the sweeps.
    pub base: Option<RunSpec>,
    #[serde(default)]
    pub e_grid: Vec<usize>,
    #[serde(default)]
    pub k_grid: Vec<usize>,
    /// Run seeds; `--seed` replaces the list by a single seed.
    #[serde(default)]
    pub seeds: Vec<u64>,
    pub target: Option<Target>,
    /// End each run at the first round that reaches the target.
    #[serde(default)]
    pub stop_at_target: bool,
    pub counterexample: Option<CounterexampleSpec>,
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Synthetic {
        alpha: f64,
        beta: f64,
        devices: usize,
        sizes: SizeSpec,
        #[serde(default)]
        data_seed: u64,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    /// A dataset file written by `gen-data`.
    File {
        path: PathBuf,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    /// Headerless `features...,label` CSV split by label.
    Corpus {
        path: PathBuf,
        classes: usize,
        devices: usize,
        #[serde(default = "default_labels_per_device")]
        labels_per_device: usize,
        sizes: SizeSpec,
        #[serde(default)]
        data_seed: u64,
        #[serde(default = "default_lambda")]
        lambda: f64,
    },
    Counterexample {
        devices: usize,
        block: usize,
        #[serde(default)]
        mu: f64,
    },
}

fn default_lambda() -> f64 {
    1e-4
}

fn default_labels_per_device() -> usize {
    2
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum SizeSpec {
    /// Synthetic: `per_device` samples each. Corpus: equal shards, the
    /// remainder dropped (`per_device` must be absent).
    Balanced {
        per_device: Option<usize>,
    },
    Explicit {
        sizes: Vec<usize>,
    },
    PowerLaw {
        total: Option<usize>,
        #[serde(default = "default_exponent")]
        exponent: f64,
        #[serde(default = "default_min_size")]
        min_size: usize,
    },
}

fn default_exponent() -> f64 {
    1.5
}

fn default_min_size() -> usize {
    1
}

#[derive(Clone, Copy, Debug, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Target {
    /// Absolute loss value.
    Loss(f64),
    /// Offset above the numerically computed minimum `F*`.
    Gap(f64),
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub label: Option<String>,
    pub scheme: String,
    pub local_steps: usize,
    /// Devices per round; every device when absent.
    pub participants: Option<usize>,
    pub rounds: usize,
    /// Minibatch size; full local gradients when absent.
    pub batch: Option<usize>,
    pub schedule: ScheduleSpec,
}

#[derive(Clone, Copy, Debug, Default, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ClockSpec {
    #[default]
    Step,
    Round,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Constant {
        eta: f64,
    },
    Inverse {
        eta0: f64,
        #[serde(default)]
        clock: ClockSpec,
    },
    Annealed {
        eta0: f64,
        offset: f64,
        rate: f64,
        #[serde(default)]
        clock: ClockSpec,
    },
    /// `2/(μ(γ+t))` from the problem's estimated `μ` and `L`.
    Theoretical {
        #[serde(default)]
        unshifted: bool,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CounterexampleSpec {
    pub devices: usize,
    pub block: usize,
    #[serde(default)]
    pub mu: f64,
    pub eta_grid: Vec<f64>,
    pub e_grid: Vec<usize>,
    #[serde(default = "default_step_tol")]
    pub step_tol: f64,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    pub anneal: Option<AnnealSpec>,
}

fn default_step_tol() -> f64 {
    1e-13
}

fn default_max_rounds() -> usize {
    1_000_000
}

/// Decayed-rate companion runs `η_t = eta0/(offset + rate·t)`.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnealSpec {
    pub local_steps: usize,
    pub rounds: usize,
    pub eta0: f64,
    pub offset: f64,
    pub rates: Vec<f64>,
    #[serde(default)]
    pub clock: ClockSpec,
}

impl ExperimentSpec {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Seeds to run: the override, else the configured list, else `[0]`.
    pub fn seeds(&self, over: Option<u64>) -> Vec<u64> {
        match over {
            Some(s) => vec![s],
            None if self.seeds.is_empty() => vec![0],
            None => self.seeds.clone(),
        }
    }

    pub fn problem(&self) -> Result<&ProblemSpec, CliError> {
        self.problem
            .as_ref()
            .ok_or_else(|| CliError::Config("missing `problem`".into()))
    }

    pub fn base(&self) -> Result<&RunSpec, CliError> {
        self.base
            .as_ref()
            .ok_or_else(|| CliError::Config("missing `base` run".into()))
    }
}

impl From<ClockSpec> for DecayClock {
    fn from(c: ClockSpec) -> Self {
        match c {
            ClockSpec::Step => DecayClock::Step,
            ClockSpec::Round => DecayClock::Round,
        }
    }
}

/// A problem ready for the engine.
pub struct Problem {
    pub objective: GlobalObjective<f64>,
    /// Known minimizer, recorded as `dist_opt` when present.
    pub optimum: Option<ParamVector<f64>>,
    constants: std::sync::OnceLock<Result<ProblemConstants, String>>,
    f_star: std::sync::OnceLock<Result<f64, String>>,
}

impl Problem {
    fn new(objective: GlobalObjective<f64>, optimum: Option<ParamVector<f64>>) -> Self {
        Self {
            objective,
            optimum,
            constants: Default::default(),
            f_star: Default::default(),
        }
    }

    pub fn num_devices(&self) -> usize {
        self.objective.num_devices()
    }

    /// `L`, `μ`, `G`, `σ_k`, `Γ` under full gradients, cached.
    pub fn constants(&self) -> Result<&ProblemConstants, CliError> {
        self.constants
            .get_or_init(|| estimate_constants(&self.objective, &EstimateOptions::default()).map_err(|e| e.to_string()))
            .as_ref()
            .map_err(|e| CliError::Numeric(e.clone()))
    }

    /// Constants for a run's batch size, participation and local steps.
    pub fn constants_for(&self, run: &ResolvedRun) -> Result<ProblemConstants, CliError> {
        let opts = EstimateOptions {
            batch: run.config.batch,
            participants: run.config.participants,
            local_steps: run.config.local_steps,
            ..EstimateOptions::default()
        };
        if run.config.batch == BatchMode::Full {
            return Ok(self
                .constants()?
                .clone()
                .with_participation(run.config.participants, run.config.local_steps));
        }
        estimate_constants(&self.objective, &opts).map_err(|e| CliError::Numeric(e.to_string()))
    }

    pub fn f_star(&self) -> Result<f64, CliError> {
        self.f_star
            .get_or_init(|| self.objective.minimum().map(|m| m.value).map_err(|e| e.to_string()))
            .clone()
            .map_err(CliError::Numeric)
    }

    pub fn target_loss(&self, target: Option<Target>) -> Result<Option<f64>, CliError> {
        match target {
            None => Ok(None),
            Some(Target::Loss(v)) if v.is_finite() => Ok(Some(v)),
            Some(Target::Gap(g)) if g.is_finite() && g >= 0.0 => Ok(Some(self.f_star()? + g)),
            Some(t) => Err(CliError::Config(format!("invalid target {t:?}"))),
        }
    }
}

fn synthetic_sizes(devices: usize, sizes: &SizeSpec, seed: u64) -> Result<Vec<usize>, CliError> {
    match sizes {
        SizeSpec::Balanced { per_device: Some(n) } => Ok(vec![*n; devices]),
        SizeSpec::Balanced { per_device: None } => {
            Err(CliError::Config("synthetic balanced sizes need `per_device`".into()))
        }
        SizeSpec::Explicit { sizes } => Ok(sizes.clone()),
        SizeSpec::PowerLaw {
            total: Some(total),
            exponent,
            min_size,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(datasets::power_law_sizes(
                devices, *total, *exponent, *min_size, &mut rng,
            )?)
        }
        SizeSpec::PowerLaw { total: None, .. } => {
            Err(CliError::Config("synthetic power-law sizes need `total`".into()))
        }
    }
}

/// Builds (or loads) the dataset of a data-backed problem spec.
pub fn build_dataset(spec: &ProblemSpec) -> Result<FederatedDataset<f64>, CliError> {
    match spec {
        ProblemSpec::Synthetic {
            alpha,
            beta,
            devices,
            sizes,
            data_seed,
            ..
        } => {
            let sizes = synthetic_sizes(*devices, sizes, *data_seed)?;
            Ok(datasets::generate_synthetic(
                *alpha, *beta, *devices, &sizes, *data_seed,
            )?)
        }
        ProblemSpec::File { path, .. } => Ok(datasets::load(path)?),
        ProblemSpec::Corpus {
            path,
            classes,
            devices,
            labels_per_device,
            sizes,
            data_seed,
            ..
        } => {
            let file = std::fs::File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
            let (x, y, f) = datasets::read_corpus::<f64, _>(std::io::BufReader::new(file))?;
            let mode = match sizes {
                SizeSpec::Balanced { per_device: None } => SizeMode::Balanced,
                SizeSpec::PowerLaw {
                    total,
                    exponent,
                    min_size,
                } => SizeMode::PowerLaw {
                    exponent: *exponent,
                    min_size: *min_size,
                    total: *total,
                },
                other => {
                    return Err(CliError::Config(format!(
                        "corpus sizes must be balanced or power_law, got {other:?}"
                    )))
                }
            };
            Ok(datasets::partition_by_label(
                &x,
                &y,
                f,
                *classes,
                *devices,
                *labels_per_device,
                mode,
                *data_seed,
            )?)
        }
        ProblemSpec::Counterexample { .. } => Err(CliError::Config("the counterexample problem has no dataset".into())),
    }
}

pub fn build_problem(spec: &ProblemSpec) -> Result<Problem, CliError> {
    match spec {
        ProblemSpec::Counterexample { devices, block, mu } => {
            let ce = Counterexample::build(*devices, *block, *mu).map_err(|e| CliError::Config(e.to_string()))?;
            let opt = ce.optimum().map_err(|e| CliError::Numeric(e.to_string()))?;
            Ok(Problem::new(ce.objective().clone(), Some(opt)))
        }
        ProblemSpec::Synthetic { lambda, .. }
        | ProblemSpec::File { lambda, .. }
        | ProblemSpec::Corpus { lambda, .. } => {
            let ds = build_dataset(spec)?;
            let objective = ds.logistic_objective(*lambda)?;
            Ok(Problem::new(objective, None))
        }
    }
}

/// A run spec bound to a problem.
#[derive(Clone, Debug)]
pub struct ResolvedRun {
    pub label: String,
    pub config: RunConfig<f64>,
}

impl RunSpec {
    pub fn resolve(&self, problem: &Problem, default_label: String) -> Result<ResolvedRun, CliError> {
        let scheme = Scheme::from_str(&self.scheme).map_err(CliError::Config)?;
        let n = problem.num_devices();
        let e = self.local_steps;
        if e == 0 || self.rounds == 0 {
            return Err(CliError::Config("`local_steps` and `rounds` must be >= 1".into()));
        }
        let schedule = match &self.schedule {
            ScheduleSpec::Constant { eta } => LrSchedule::constant(*eta),
            ScheduleSpec::Inverse { eta0, clock } => LrSchedule {
                clock: (*clock).into(),
                ..LrSchedule::inverse(*eta0)
            },
            ScheduleSpec::Annealed {
                eta0,
                offset,
                rate,
                clock,
            } => LrSchedule {
                clock: (*clock).into(),
                ..LrSchedule::annealed(*eta0, *offset, *rate)
            },
            ScheduleSpec::Theoretical { unshifted } => {
                let c = problem.constants()?;
                if *unshifted {
                    LrSchedule::theoretical_unshifted(c.mu.value, c.l.value, e)
                } else {
                    LrSchedule::theoretical(c.mu.value, c.l.value, e)
                }
            }
        };
        let participants = match scheme {
            Scheme::Full => n,
            _ => self.participants.unwrap_or(n),
        };
        let mut config = RunConfig::new(scheme, e, participants, self.rounds * e, schedule);
        config.batch = self.batch.map_or(BatchMode::Full, BatchMode::MiniBatch);
        config.optimum = problem.optimum.clone();
        config.validate(n).map_err(|e| CliError::Config(e.to_string()))?;
        let label = sanitize(self.label.as_deref().unwrap_or(&default_label));
        Ok(ResolvedRun { label, config })
    }
}

/// Keeps labels usable as file-name parts.
fn sanitize(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
