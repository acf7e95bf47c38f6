use std::path::{Path, PathBuf};

use fedsim::counterexample::Counterexample;
use fedsim::engine::{run_fedavg, validate_schedule, EngineError, RoundRecord};
use fedsim::experiment::{anneal_search, counterexample_cell, CounterexampleCell};
use fedsim::sampling::Scheme;
use fedsim::theory::predict_comm_rounds;
use log::{info, warn};
use rayon::prelude::*;

use crate::config::{build_dataset, build_problem, ExperimentSpec, Problem, ResolvedRun, RunSpec};
use crate::error::CliError;
use crate::output::{self, num, opt_num, TRAJECTORY_HEADER};

pub struct Ctx {
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub pool: rayon::ThreadPool,
}

/// One run of a grid.
struct Job {
    run: ResolvedRun,
    seed: u64,
}

struct Outcome {
    records: Vec<RoundRecord>,
    /// `(round, step)` of a numeric blow-up.
    diverged: Option<(usize, usize)>,
}

impl Outcome {
    fn final_loss(&self) -> f64 {
        match (self.diverged, self.records.last()) {
            (Some(_), _) | (None, None) => f64::NAN,
            (None, Some(r)) => r.loss,
        }
    }

    fn rounds_to(&self, eps: Option<f64>) -> i64 {
        eps.and_then(|e| self.records.iter().find(|r| r.loss <= e))
            .map_or(-1, |r| r.round as i64)
    }

    fn status(&self) -> &'static str {
        if self.diverged.is_some() {
            "diverged"
        } else {
            "ok"
        }
    }
}

fn execute(
    problem: &Problem,
    jobs: &[Job],
    eps: Option<f64>,
    stop: bool,
    pool: &rayon::ThreadPool,
) -> Result<Vec<Outcome>, CliError> {
    pool.install(|| {
        jobs.par_iter()
            .map(|job| {
                let mut cfg = job.run.config.clone();
                cfg.seed = job.seed;
                if stop {
                    cfg.stop_at_loss = eps;
                }
                info!("run {} seed {}", job.run.label, job.seed);
                match run_fedavg(&problem.objective, &cfg) {
                    Ok(res) => Ok(Outcome {
                        records: res.records,
                        diverged: None,
                    }),
                    Err(EngineError::Diverged { round, step, partial }) => {
                        warn!("run {} seed {} diverged at step {step}", job.run.label, job.seed);
                        Ok(Outcome {
                            records: partial.records,
                            diverged: Some((round, step)),
                        })
                    }
                    Err(EngineError::Config(m)) => Err(CliError::Config(m)),
                    Err(e) => Err(CliError::Numeric(e.to_string())),
                }
            })
            .collect()
    })
}

fn trajectory_path(out: &Path, index: usize, job: &Job) -> PathBuf {
    out.join("trajectories")
        .join(format!("run{index:03}_{}_seed{}.csv", job.run.label, job.seed))
}

fn write_trajectory(path: &Path, o: &Outcome) -> Result<(), CliError> {
    let mut w = output::create(path, &TRAJECTORY_HEADER)?;
    for r in &o.records {
        output::row(&mut w, output::trajectory_row(r))?;
    }
    if let Some((round, step)) = o.diverged {
        let f = [
            round.to_string(),
            step.to_string(),
            String::new(),
            num(f64::NAN),
            String::new(),
            String::new(),
            "diverged".into(),
        ];
        output::row(&mut w, f)?;
    }
    output::finish(w)
}

const SUMMARY_HEADER: [&str; 12] = [
    "run",
    "label",
    "scheme",
    "E",
    "K",
    "batch",
    "seed",
    "eps",
    "rounds_run",
    "rounds_to_eps",
    "final_loss",
    "status",
];

/// Runs every job, writes one trajectory per job plus `summary.csv`.
fn run_grid(
    problem: &Problem,
    jobs: &[Job],
    spec: &ExperimentSpec,
    ctx: &Ctx,
) -> Result<(Vec<Outcome>, Option<f64>), CliError> {
    let eps = problem.target_loss(spec.target)?;
    let outcomes = execute(problem, jobs, eps, spec.stop_at_target, &ctx.pool)?;
    let mut w = output::create(&ctx.out.join("summary.csv"), &SUMMARY_HEADER)?;
    for (i, (job, o)) in jobs.iter().zip(&outcomes).enumerate() {
        write_trajectory(&trajectory_path(&ctx.out, i, job), o)?;
        let cfg = &job.run.config;
        let batch = match cfg.batch {
            fedsim::engine::BatchMode::Full => "full".to_string(),
            fedsim::engine::BatchMode::MiniBatch(b) => b.to_string(),
        };
        output::row(
            &mut w,
            [
                i.to_string(),
                job.run.label.clone(),
                cfg.scheme.name().to_string(),
                cfg.local_steps.to_string(),
                cfg.participants.to_string(),
                batch,
                job.seed.to_string(),
                opt_num(eps),
                o.records.len().to_string(),
                o.rounds_to(eps).to_string(),
                num(o.final_loss()),
                o.status().to_string(),
            ],
        )?;
    }
    output::finish(w)?;
    Ok((outcomes, eps))
}

fn jobs_for(runs: &[ResolvedRun], seeds: &[u64]) -> Vec<Job> {
    runs.iter()
        .flat_map(|r| seeds.iter().map(|&seed| Job { run: r.clone(), seed }))
        .collect()
}

pub fn run(spec: &ExperimentSpec, ctx: &Ctx) -> Result<(), CliError> {
    if spec.runs.is_empty() {
        return Err(CliError::Config("`runs` is empty".into()));
    }
    let problem = build_problem(spec.problem()?)?;
    let runs = spec
        .runs
        .iter()
        .enumerate()
        .map(|(i, r)| r.resolve(&problem, format!("{}_{}", r.scheme, i)))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs = jobs_for(&runs, &spec.seeds(ctx.seed));
    let (outcomes, eps) = run_grid(&problem, &jobs, spec, ctx)?;
    for (job, o) in jobs.iter().zip(&outcomes) {
        println!(
            "{} seed {}: final loss {}, rounds to target {}, {}",
            job.run.label,
            job.seed,
            num(o.final_loss()),
            o.rounds_to(eps),
            o.status()
        );
    }
    match outcomes.iter().filter(|o| o.diverged.is_some()).count() {
        0 => Ok(()),
        n => Err(CliError::Diverged(n)),
    }
}

/// Sorted, deduplicated, nonempty grid.
fn grid(values: &[usize], name: &str) -> Result<Vec<usize>, CliError> {
    let mut v = values.to_vec();
    v.sort_unstable();
    v.dedup();
    if v.is_empty() || v[0] == 0 {
        return Err(CliError::Config(format!(
            "`{name}` must be a nonempty list of positive integers"
        )));
    }
    Ok(v)
}

fn sweep_setup(spec: &ExperimentSpec) -> Result<(Problem, &RunSpec), CliError> {
    if spec.target.is_none() {
        return Err(CliError::Config("sweeps need a `target`".into()));
    }
    let base = spec.base()?;
    Ok((build_problem(spec.problem()?)?, base))
}

pub fn sweep_e(spec: &ExperimentSpec, ctx: &Ctx) -> Result<(), CliError> {
    let es = grid(&spec.e_grid, "e_grid")?;
    let (problem, base) = sweep_setup(spec)?;
    let runs = es
        .iter()
        .map(|&e| {
            let r = RunSpec {
                local_steps: e,
                label: None,
                ..base.clone()
            };
            r.resolve(&problem, format!("E{e}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let predicted = runs
        .iter()
        .map(|r| {
            let c = problem.constants_for(r)?;
            Ok(predict_comm_rounds(
                &c,
                r.config.participants,
                r.config.local_steps as f64,
            ))
        })
        .collect::<Result<Vec<f64>, CliError>>()?;
    let seeds = spec.seeds(ctx.seed);
    let jobs = jobs_for(&runs, &seeds);
    let (outcomes, eps) = run_grid(&problem, &jobs, spec, ctx)?;
    let mut w = output::create(
        &ctx.out.join("sweep_e.csv"),
        &[
            "E",
            "seed",
            "rounds_to_eps",
            "final_loss",
            "predicted_bracket",
            "status",
        ],
    )?;
    for (i, (job, o)) in jobs.iter().zip(&outcomes).enumerate() {
        let p = predicted[i / seeds.len()];
        output::row(
            &mut w,
            [
                job.run.config.local_steps.to_string(),
                job.seed.to_string(),
                o.rounds_to(eps).to_string(),
                num(o.final_loss()),
                num(p),
                o.status().to_string(),
            ],
        )?;
        println!(
            "E={} seed {}: rounds to target {}, predicted {}",
            job.run.config.local_steps,
            job.seed,
            o.rounds_to(eps),
            num(p)
        );
    }
    output::finish(w)
}

pub fn sweep_k(spec: &ExperimentSpec, ctx: &Ctx) -> Result<(), CliError> {
    let ks = grid(&spec.k_grid, "k_grid")?;
    let (problem, base) = sweep_setup(spec)?;
    if base.scheme.parse::<Scheme>().map_err(CliError::Config)? == Scheme::Full {
        return Err(CliError::Config("sweep-k needs a partial-participation scheme".into()));
    }
    let runs = ks
        .iter()
        .map(|&k| {
            let r = RunSpec {
                participants: Some(k),
                label: None,
                ..base.clone()
            };
            r.resolve(&problem, format!("K{k}"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let jobs = jobs_for(&runs, &spec.seeds(ctx.seed));
    let (outcomes, eps) = run_grid(&problem, &jobs, spec, ctx)?;
    let mut w = output::create(
        &ctx.out.join("sweep_k.csv"),
        &["K", "seed", "rounds_to_eps", "final_loss", "status"],
    )?;
    for (job, o) in jobs.iter().zip(&outcomes) {
        let k = job.run.config.participants;
        output::row(
            &mut w,
            [
                k.to_string(),
                job.seed.to_string(),
                o.rounds_to(eps).to_string(),
                num(o.final_loss()),
                o.status().to_string(),
            ],
        )?;
        println!("K={k} seed {}: rounds to target {}", job.seed, o.rounds_to(eps));
    }
    output::finish(w)
}

pub fn counterexample(spec: &ExperimentSpec, ctx: &Ctx) -> Result<(), CliError> {
    let cs = spec
        .counterexample
        .as_ref()
        .ok_or_else(|| CliError::Config("missing `counterexample` section".into()))?;
    let ce = Counterexample::<f64>::build(cs.devices, cs.block, cs.mu).map_err(|e| CliError::Config(e.to_string()))?;
    let es = grid(&cs.e_grid, "counterexample.e_grid")?;
    let mut etas = cs.eta_grid.clone();
    if etas.is_empty() || etas.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Config(
            "`counterexample.eta_grid` must be a nonempty list of numbers".into(),
        ));
    }
    etas.sort_by(f64::total_cmp);
    etas.dedup();
    let cells: Vec<(f64, usize)> = etas.iter().flat_map(|&eta| es.iter().map(move |&e| (eta, e))).collect();
    let limit = ce.step_limit();
    let results: Vec<(f64, usize, Option<CounterexampleCell>, &str)> = ctx.pool.install(|| {
        cells
            .par_iter()
            .map(|&(eta, e)| {
                if !(eta > 0.0 && eta < limit) {
                    return (eta, e, None, "eta_out_of_range");
                }
                match counterexample_cell(&ce, eta, e, cs.step_tol, cs.max_rounds) {
                    Ok(c) if c.converged => (eta, e, Some(c), "ok"),
                    Ok(c) => (eta, e, Some(c), "not_converged"),
                    Err(_) => (eta, e, None, "eta_out_of_range"),
                }
            })
            .collect()
    });
    let mut w = output::create(
        &ctx.out.join("counterexample.csv"),
        &[
            "eta",
            "E",
            "gap_actual",
            "gap_bound",
            "fixed_point_residual",
            "rounds",
            "flag",
        ],
    )?;
    for (eta, e, cell, flag) in &results {
        let (gap, bound, resid, rounds) = match cell {
            Some(c) => (
                num(c.gap_actual),
                num(c.gap_bound),
                num(c.fixed_point_residual),
                c.rounds.to_string(),
            ),
            None => (num(f64::NAN), num(f64::NAN), num(f64::NAN), String::new()),
        };
        println!(
            "eta={} E={e}: gap {gap} bound {bound} residual {resid} [{flag}]",
            num(*eta)
        );
        output::row(
            &mut w,
            [num(*eta), e.to_string(), gap, bound, resid, rounds, flag.to_string()],
        )?;
    }
    output::finish(w)?;

    if let Some(a) = &cs.anneal {
        if a.rates.is_empty() {
            return Err(CliError::Config("`counterexample.anneal.rates` is empty".into()));
        }
        let mut rates = a.rates.clone();
        rates.sort_by(f64::total_cmp);
        let outcomes: Vec<_> = ctx.pool.install(|| {
            rates
                .par_iter()
                .map(|&r| anneal_search(&ce, a.local_steps, a.rounds, a.eta0, a.offset, &[r], a.clock.into()))
                .collect()
        });
        let mut w = output::create(&ctx.out.join("anneal.csv"), &["rate", "final_gap", "min_gap"])?;
        for o in outcomes {
            let o = o.map_err(|e| match e {
                EngineError::Config(m) => CliError::Config(m),
                other => CliError::Numeric(other.to_string()),
            })?;
            let o = &o[0];
            println!("anneal rate {}: final gap {}", num(o.rate), num(o.final_gap));
            output::row(&mut w, [num(o.rate), num(o.final_gap), num(o.min_gap)])?;
        }
        output::finish(w)?;
    }
    Ok(())
}

pub fn validate(spec: &ExperimentSpec, ctx: &Ctx) -> Result<(), CliError> {
    let problem = build_problem(spec.problem()?)?;
    let specs: Vec<&RunSpec> = if spec.runs.is_empty() {
        vec![spec.base()?]
    } else {
        spec.runs.iter().collect()
    };
    let c = problem.constants()?;
    println!(
        "L={} ({}) mu={} ({}) G={} ({}) Gamma={} ({}) kappa={}",
        num(c.l.value),
        c.l.tag.name(),
        num(c.mu.value),
        c.mu.tag.name(),
        num(c.g.value),
        c.g.tag.name(),
        num(c.gamma.value),
        c.gamma.tag.name(),
        num(c.kappa())
    );
    let mut w = output::create(
        &ctx.out.join("validate.csv"),
        &[
            "run",
            "label",
            "scheme",
            "E",
            "eta_first",
            "limit_first",
            "positive",
            "non_increasing",
            "doubling",
            "first_step_bounded",
            "passes",
            "L",
            "mu",
            "G",
            "Gamma",
        ],
    )?;
    for (i, s) in specs.iter().enumerate() {
        let run = s.resolve(&problem, format!("{}_{}", s.scheme, i))?;
        let e = run.config.local_steps;
        let report = validate_schedule(&run.config.schedule, c.l.value, e, run.config.total_steps);
        println!(
            "{}: {} (eta_0 {} vs 1/(4L) {})",
            run.label,
            if report.passes() { "pass" } else { "FLAGGED" },
            num(report.eta_first),
            num(report.limit_first)
        );
        output::row(
            &mut w,
            [
                i.to_string(),
                run.label.clone(),
                run.config.scheme.name().to_string(),
                e.to_string(),
                num(report.eta_first),
                num(report.limit_first),
                report.positive.to_string(),
                report.non_increasing.to_string(),
                report.doubling.to_string(),
                report.first_step_bounded.to_string(),
                report.passes().to_string(),
                num(c.l.value),
                num(c.mu.value),
                num(c.g.value),
                num(c.gamma.value),
            ],
        )?;
    }
    output::finish(w)
}

pub fn gen_data(spec: &ExperimentSpec, ctx: &Ctx) -> Result<(), CliError> {
    let ds = build_dataset(spec.problem()?)?;
    std::fs::create_dir_all(&ctx.out)?;
    let path = ctx.out.join("dataset.csv");
    fedsim::datasets::save(&ds, &path)?;
    let (mean, std) = ds.size_stats();
    println!(
        "wrote {}: {} devices, {} samples, size mean {} std {}",
        path.display(),
        ds.num_devices(),
        ds.total_samples(),
        num(mean),
        num(std)
    );
    Ok(())
}
