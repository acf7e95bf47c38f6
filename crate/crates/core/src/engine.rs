//! The FedAvg round loop.
//!
//! Each round broadcasts the global model, runs `E` local gradient steps on
//! every participating device and aggregates according to the sampling
//! scheme. Only participating devices are computed; under the
//! "every device trains, only the sampled ones are averaged" formulation
//! the discarded work never affects the result.
//!
//! Step indices are 0-based: step `s` maps iterate `s` to iterate `s + 1`
//! with learning rate `schedule.eta(s)`, and round `r` (1-based) ends at
//! iterate `rE`.

use std::time::Instant;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::sq_dist;
use crate::objectives::{GlobalObjective, LocalObjective, ObjectiveError, ParamVector};
use crate::sampling::{self, SamplingError, Scheme, SelectionResult};
use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("diverged at step {step} (round {round})")]
    Diverged {
        round: usize,
        step: usize,
        /// Everything recorded before the blow-up.
        partial: Box<RunResult<f64>>,
    },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
}

/// How a schedule's step counter advances.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayClock {
    /// `t` is the global step index.
    Step,
    /// `t` is the number of completed rounds (the rate changes only at
    /// synchronization).
    Round,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScheduleKind<T> {
    Constant {
        eta: T,
    },
    /// `η₀ / (1 + t)`
    Inverse {
        eta0: T,
    },
    /// `η₀ / (offset + rate·t)`
    Annealed {
        eta0: T,
        offset: T,
        rate: T,
    },
    /// `2 / (μ(γ + t + 1))`, i.e. `2/(μ(γ + t))` with 1-based `t`.
    Theoretical {
        mu: T,
        gamma: T,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule<T> {
    pub kind: ScheduleKind<T>,
    pub clock: DecayClock,
}

impl<T: Scalar> LrSchedule<T> {
    pub fn constant(eta: T) -> Self {
        Self {
            kind: ScheduleKind::Constant { eta },
            clock: DecayClock::Step,
        }
    }

    pub fn inverse(eta0: T) -> Self {
        Self {
            kind: ScheduleKind::Inverse { eta0 },
            clock: DecayClock::Step,
        }
    }

    pub fn annealed(eta0: T, offset: T, rate: T) -> Self {
        Self {
            kind: ScheduleKind::Annealed { eta0, offset, rate },
            clock: DecayClock::Step,
        }
    }

    /// `γ = max{8L/μ, E} − 1`, so that the first rate is at most `1/(4L)`.
    pub fn theoretical(mu: T, l: T, local_steps: usize) -> Self {
        Self::theoretical_with_gamma(mu, theoretical_gamma(mu, l, local_steps))
    }

    /// `γ = max{8L/μ, E}`, one larger than [`LrSchedule::theoretical`].
    pub fn theoretical_unshifted(mu: T, l: T, local_steps: usize) -> Self {
        Self::theoretical_with_gamma(mu, theoretical_gamma(mu, l, local_steps) + T::one())
    }

    pub fn theoretical_with_gamma(mu: T, gamma: T) -> Self {
        Self {
            kind: ScheduleKind::Theoretical { mu, gamma },
            clock: DecayClock::Step,
        }
    }

    pub fn per_round(mut self) -> Self {
        self.clock = DecayClock::Round;
        self
    }

    pub fn gamma(&self) -> Option<T> {
        match self.kind {
            ScheduleKind::Theoretical { gamma, .. } => Some(gamma),
            _ => None,
        }
    }

    fn check(&self) -> Result<(), EngineError> {
        let pos = |v: T| v > T::zero() && v.is_finite();
        let ok = match self.kind {
            ScheduleKind::Constant { eta } => pos(eta),
            ScheduleKind::Inverse { eta0 } => pos(eta0),
            ScheduleKind::Annealed { eta0, offset, rate } => {
                pos(eta0) && pos(offset) && rate >= T::zero() && rate.is_finite()
            }
            ScheduleKind::Theoretical { mu, gamma } => pos(mu) && gamma >= T::zero() && gamma.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(EngineError::Config(format!(
                "invalid learning-rate schedule {:?}",
                self.kind
            )))
        }
    }

    /// Learning rate of step `step` (0-based).
    pub fn eta(&self, step: usize, local_steps: usize) -> T {
        let t = T::from_count(match self.clock {
            DecayClock::Step => step,
            DecayClock::Round => step / local_steps.max(1),
        });
        match self.kind {
            ScheduleKind::Constant { eta } => eta,
            ScheduleKind::Inverse { eta0 } => eta0 / (T::one() + t),
            ScheduleKind::Annealed { eta0, offset, rate } => eta0 / (offset + rate * t),
            ScheduleKind::Theoretical { mu, gamma } => T::lit(2.0) / (mu * (gamma + t + T::one())),
        }
    }
}

pub fn theoretical_gamma<T: Scalar>(mu: T, l: T, local_steps: usize) -> T {
    (T::lit(8.0) * l / mu).max(T::from_count(local_steps)) - T::one()
}

/// Which step-size conditions hold over a horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleReport {
    pub positive: bool,
    pub non_increasing: bool,
    /// `η_s ≤ 2 η_{s+E}` for every step in the horizon.
    pub doubling: bool,
    /// `η_0 ≤ 1/(4L)`.
    pub first_step_bounded: bool,
    pub first_increase: Option<usize>,
    pub first_doubling_violation: Option<usize>,
    pub eta_first: f64,
    pub limit_first: f64,
}

impl ScheduleReport {
    pub fn passes(&self) -> bool {
        self.positive && self.non_increasing && self.doubling && self.first_step_bounded
    }
}

/// Scans steps `0..horizon` for the conditions required by the divergence
/// and convergence bounds.
pub fn validate_schedule<T: Scalar>(
    schedule: &LrSchedule<T>,
    l: T,
    local_steps: usize,
    horizon: usize,
) -> ScheduleReport {
    let e = local_steps.max(1);
    let two = T::lit(2.0);
    let mut positive = true;
    let mut first_increase = None;
    let mut first_doubling_violation = None;
    for s in 0..horizon {
        let cur = schedule.eta(s, e);
        positive &= cur > T::zero() && cur.is_finite();
        if first_increase.is_none() && schedule.eta(s + 1, e) > cur {
            first_increase = Some(s);
        }
        if first_doubling_violation.is_none() && cur > two * schedule.eta(s + e, e) {
            first_doubling_violation = Some(s);
        }
    }
    let eta_first = schedule.eta(0, e);
    let limit = T::one() / (T::lit(4.0) * l);
    ScheduleReport {
        positive,
        non_increasing: first_increase.is_none(),
        doubling: first_doubling_violation.is_none(),
        first_step_bounded: eta_first <= limit,
        first_increase,
        first_doubling_violation,
        eta_first: eta_first.to_f64_lossy(),
        limit_first: limit.to_f64_lossy(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Exact local gradients.
    Full,
    /// Minibatch of the given size drawn uniformly with replacement (capped
    /// at the device's sample count).
    MiniBatch(usize),
}

#[derive(Clone, Debug)]
pub struct RunConfig<T> {
    pub scheme: Scheme,
    /// Local steps per round `E`.
    pub local_steps: usize,
    /// Participating devices per round (ignored under full participation).
    pub participants: usize,
    /// Total local-step budget `T`, a multiple of `E`.
    pub total_steps: usize,
    pub batch: BatchMode,
    pub schedule: LrSchedule<T>,
    pub seed: u64,
    /// Starting model; zeros when `None`.
    pub init: Option<ParamVector<T>>,
    /// Records `‖w̄ − w*‖` each round when set.
    pub optimum: Option<ParamVector<T>>,
    /// Records the per-step device divergence (full participation only).
    pub record_divergence: bool,
    /// Stops after the first round whose loss is at or below this value.
    pub stop_at_loss: Option<f64>,
}

impl<T: Scalar> RunConfig<T> {
    pub fn new(
        scheme: Scheme,
        local_steps: usize,
        participants: usize,
        total_steps: usize,
        schedule: LrSchedule<T>,
    ) -> Self {
        Self {
            scheme,
            local_steps,
            participants,
            total_steps,
            batch: BatchMode::Full,
            schedule,
            seed: 0,
            init: None,
            optimum: None,
            record_divergence: false,
            stop_at_loss: None,
        }
    }

    pub fn rounds(&self) -> usize {
        self.total_steps / self.local_steps.max(1)
    }

    pub fn validate(&self, n_devices: usize) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Config(m));
        if self.local_steps == 0 {
            return bad("E must be >= 1".into());
        }
        if self.total_steps == 0 || self.total_steps % self.local_steps != 0 {
            return bad(format!(
                "total steps {} must be a positive multiple of E={}",
                self.total_steps, self.local_steps
            ));
        }
        if self.scheme.is_partial() && (self.participants == 0 || self.participants > n_devices) {
            return bad(format!("K={} must be in [1, {n_devices}]", self.participants));
        }
        if self.batch == BatchMode::MiniBatch(0) {
            return bad("batch size must be >= 1".into());
        }
        if self.record_divergence && self.scheme != Scheme::Full {
            return bad("divergence recording needs full participation".into());
        }
        self.schedule.check()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    /// 1-based round index.
    pub round: usize,
    /// Local steps completed, `round · E`.
    pub step: usize,
    /// Learning rate of the round's first local step.
    pub eta: f64,
    /// Global objective at the aggregated model.
    pub loss: f64,
    pub dist_opt: Option<f64>,
    pub selected: Vec<usize>,
    pub wall_secs: f64,
}

/// Per-step record of `Σ p_k ‖w̄_s − w_s^k‖²` for iterates `s = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceTrace {
    pub stats: Vec<f64>,
    /// `η_s` for each recorded iterate.
    pub etas: Vec<f64>,
    /// Largest local gradient norm seen during the run.
    pub g_max: f64,
    pub local_steps: usize,
}

impl DivergenceTrace {
    /// `4 η_s² (E−1)² G²` with the run's own `G`.
    pub fn bound(&self, s: usize) -> f64 {
        let e1 = self.local_steps.saturating_sub(1) as f64;
        4.0 * self.etas[s] * self.etas[s] * e1 * e1 * self.g_max * self.g_max
    }

    /// Iterates where the statistic exceeds the bound.
    pub fn violations(&self) -> Vec<usize> {
        (0..self.stats.len())
            .filter(|&s| self.stats[s] > self.bound(s))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct RunResult<T> {
    pub records: Vec<RoundRecord>,
    pub initial_loss: f64,
    pub final_w: ParamVector<T>,
    pub divergence: Option<DivergenceTrace>,
    pub stopped_early: bool,
}

impl<T: Scalar> RunResult<T> {
    fn to_f64(&self) -> RunResult<f64> {
        RunResult {
            records: self.records.clone(),
            initial_loss: self.initial_loss,
            final_w: ParamVector::from_raw(
                self.final_w.shape(),
                self.final_w.values().iter().map(|v| v.to_f64_lossy()).collect(),
            ),
            divergence: self.divergence.clone(),
            stopped_early: self.stopped_early,
        }
    }

    pub fn final_loss(&self) -> f64 {
        self.records.last().map_or(self.initial_loss, |r| r.loss)
    }

    /// First round whose loss is at or below `eps`.
    pub fn rounds_to(&self, eps: f64) -> Option<usize> {
        self.records.iter().find(|r| r.loss <= eps).map(|r| r.round)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for device `device` in round `round`.
pub fn device_rng(seed: u64, round: usize, device: usize) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ round as u64) ^ (device as u64).wrapping_add(1));
    ChaCha8Rng::seed_from_u64(key)
}

/// Stream used for device selection in round `round`.
pub fn selection_rng(seed: u64, round: usize) -> ChaCha8Rng {
    device_rng(seed, round, usize::MAX)
}

fn local_step<T: Scalar, R: Rng + ?Sized>(
    device: &LocalObjective<T>,
    w: &mut ParamVector<T>,
    eta: T,
    batch: BatchMode,
    rng: &mut R,
) -> Result<T, ObjectiveError> {
    let g = match batch {
        BatchMode::Full => device.grad(w)?,
        BatchMode::MiniBatch(b) => device.stochastic_grad(w, b.min(device.num_samples()), rng)?,
    };
    for (wi, &gi) in w.values_mut().iter_mut().zip(g.values()) {
        *wi = *wi - eta * gi;
    }
    if !w.is_finite() {
        return Err(ObjectiveError::NonFinite("local model"));
    }
    Ok(g.norm())
}

/// Runs `E` local steps from `w_start` with rates `η_{t0}, …, η_{t0+E−1}`.
/// A non-finite model is reported with the failing global step index.
pub fn local_update<T: Scalar, R: Rng + ?Sized>(
    device: &LocalObjective<T>,
    w_start: &ParamVector<T>,
    local_steps: usize,
    schedule: &LrSchedule<T>,
    t0: usize,
    batch: BatchMode,
    rng: &mut R,
) -> Result<ParamVector<T>, (usize, ObjectiveError)> {
    let mut w = w_start.clone();
    for i in 0..local_steps {
        let s = t0 + i;
        local_step(device, &mut w, schedule.eta(s, local_steps), batch, rng).map_err(|e| (s, e))?;
    }
    Ok(w)
}

/// Rescales device objectives to `F̃_k = p_k N F_k` with uniform weights, so
/// that `(1/N) Σ F̃_k = Σ p_k F_k`. Also returns `ν = N max p_k` and
/// `ς = N min p_k`.
pub fn transform_problem<T: Scalar>(
    problem: &GlobalObjective<T>,
) -> Result<(GlobalObjective<T>, T, T), ObjectiveError> {
    let n = T::from_count(problem.num_devices());
    let locals = problem
        .locals()
        .iter()
        .zip(problem.weights())
        .map(|(l, &p)| l.scaled(p * n))
        .collect();
    let pmax = problem.weights().iter().fold(T::zero(), |m, &p| m.max(p));
    let pmin = problem.weights().iter().fold(T::infinity(), |m, &p| m.min(p));
    Ok((GlobalObjective::uniform(locals)?, n * pmax, n * pmin))
}

fn is_divergence(e: &ObjectiveError) -> bool {
    matches!(e, ObjectiveError::NonFinite(_))
}

/// Runs FedAvg for `T/E` rounds and records one [`RoundRecord`] per round.
pub fn run_fedavg<T: Scalar>(problem: &GlobalObjective<T>, cfg: &RunConfig<T>) -> Result<RunResult<T>, EngineError> {
    let n = problem.num_devices();
    cfg.validate(n)?;
    let shape = problem.shape();
    let init = match &cfg.init {
        Some(w) if w.shape() != shape => {
            return Err(EngineError::Config("initial model has the wrong shape".into()));
        }
        Some(w) => w.clone(),
        None => ParamVector::zeros(shape),
    };
    if let Some(opt) = &cfg.optimum {
        if opt.shape() != shape {
            return Err(EngineError::Config("reference optimum has the wrong shape".into()));
        }
    }
    if cfg.scheme == Scheme::SchemeII && !problem.is_balanced() {
        warn!("scheme_ii on unbalanced weights: the aggregate is unbiased but may be unstable");
    }
    let transformed;
    let train = if cfg.scheme == Scheme::SchemeIITransformed {
        transformed = transform_problem(problem)?.0;
        &transformed
    } else {
        problem
    };

    let start = Instant::now();
    let e = cfg.local_steps;
    let rounds = cfg.rounds();
    let mut result = RunResult {
        records: Vec::with_capacity(rounds),
        initial_loss: problem.loss(&init)?.to_f64_lossy(),
        final_w: init,
        divergence: None,
        stopped_early: false,
    };
    let mut trace = cfg.record_divergence.then(|| DivergenceTrace {
        stats: vec![0.0],
        etas: vec![cfg.schedule.eta(0, e).to_f64_lossy()],
        g_max: 0.0,
        local_steps: e,
    });

    let diverged = |result: &RunResult<T>, trace: &Option<DivergenceTrace>, round: usize, step: usize| {
        let mut partial = result.to_f64();
        partial.divergence = trace.clone();
        EngineError::Diverged {
            round,
            step,
            partial: Box::new(partial),
        }
    };

    for round in 1..=rounds {
        let t0 = (round - 1) * e;
        let global = &result.final_w;
        let selection = sampling::select(
            cfg.scheme,
            train.weights(),
            cfg.participants,
            &mut selection_rng(cfg.seed, round),
        )?;
        let distinct: Vec<usize> = selection.counts().into_iter().map(|(k, _)| k).collect();

        let mut models: Vec<Option<ParamVector<T>>> = vec![None; n];
        if let Some(tr) = trace.as_mut() {
            match lockstep_round(train, global, &distinct, cfg, t0, round, tr) {
                Ok(done) => {
                    for (k, w) in distinct.iter().zip(done) {
                        models[*k] = Some(w);
                    }
                }
                Err((s, err)) if is_divergence(&err) => return Err(diverged(&result, &trace, round, s)),
                Err((_, err)) => return Err(err.into()),
            }
        } else {
            for &k in &distinct {
                let mut rng = device_rng(cfg.seed, round, k);
                match local_update(&train.locals()[k], global, e, &cfg.schedule, t0, cfg.batch, &mut rng) {
                    Ok(w) => models[k] = Some(w),
                    Err((s, err)) if is_divergence(&err) => return Err(diverged(&result, &trace, round, s)),
                    Err((_, err)) => return Err(err.into()),
                }
            }
        }

        let next = aggregate_models(&selection, &models, global, train.weights());
        if !next.is_finite() {
            return Err(diverged(&result, &trace, round, round * e));
        }
        let loss = match problem.loss(&next) {
            Ok(v) => v.to_f64_lossy(),
            Err(err) if is_divergence(&err) => return Err(diverged(&result, &trace, round, round * e)),
            Err(err) => return Err(err.into()),
        };
        if let Some(tr) = trace.as_mut() {
            // all devices now hold the aggregate exactly
            if let Some(last) = tr.stats.last_mut() {
                *last = 0.0;
            }
        }
        let dist_opt = cfg.optimum.as_ref().map(|o| next.distance(o).to_f64_lossy());
        result.records.push(RoundRecord {
            round,
            step: round * e,
            eta: cfg.schedule.eta(t0, e).to_f64_lossy(),
            loss,
            dist_opt,
            selected: selection.indices.clone(),
            wall_secs: start.elapsed().as_secs_f64(),
        });
        result.final_w = next;
        if cfg.stop_at_loss.is_some_and(|eps| loss <= eps) {
            result.stopped_early = round < rounds;
            break;
        }
    }
    result.divergence = trace;
    Ok(result)
}

fn aggregate_models<T: Scalar>(
    selection: &SelectionResult,
    models: &[Option<ParamVector<T>>],
    global: &ParamVector<T>,
    weights: &[T],
) -> ParamVector<T> {
    let coef = sampling::coefficients(selection, weights);
    let out = sampling::combine(&coef, global.values(), |k| {
        models[k].as_ref().expect("selected device was updated").values()
    });
    ParamVector::from_raw(global.shape(), out)
}

/// Runs all devices step by step so the spread around the virtual average
/// can be recorded after every step. Uses the same per-device streams as
/// the lazy path, so the trajectory is identical.
fn lockstep_round<T: Scalar>(
    problem: &GlobalObjective<T>,
    global: &ParamVector<T>,
    devices: &[usize],
    cfg: &RunConfig<T>,
    t0: usize,
    round: usize,
    trace: &mut DivergenceTrace,
) -> Result<Vec<ParamVector<T>>, (usize, ObjectiveError)> {
    let e = cfg.local_steps;
    let mut rngs: Vec<ChaCha8Rng> = devices.iter().map(|&k| device_rng(cfg.seed, round, k)).collect();
    let mut ws: Vec<ParamVector<T>> = devices.iter().map(|_| global.clone()).collect();
    let weights = problem.weights();
    for i in 0..e {
        let s = t0 + i;
        let eta = cfg.schedule.eta(s, e);
        for ((w, &k), rng) in ws.iter_mut().zip(devices).zip(rngs.iter_mut()) {
            let gnorm = local_step(&problem.locals()[k], w, eta, cfg.batch, rng).map_err(|err| (s, err))?;
            trace.g_max = trace.g_max.max(gnorm.to_f64_lossy());
        }
        let mut avg = vec![T::zero(); global.len()];
        for (w, &k) in ws.iter().zip(devices) {
            for (a, &v) in avg.iter_mut().zip(w.values()) {
                *a = *a + weights[k] * v;
            }
        }
        let stat: T = ws
            .iter()
            .zip(devices)
            .map(|(w, &k)| weights[k] * sq_dist(&avg, w.values()))
            .sum();
        trace.stats.push(stat.to_f64_lossy());
        trace.etas.push(cfg.schedule.eta(s + 1, e).to_f64_lossy());
    }
    Ok(ws)
}
