//! Multi-run studies built on the engine: rounds-to-target summaries, the
//! counterexample grid and the learning-rate annealing search.
//!
//! Runs here are sequential; callers that want grid parallelism (the CLI)
//! fan out over [`run_seeded`] themselves.

use crate::counterexample::{Counterexample, CounterexampleError};
use crate::engine::{run_fedavg, DecayClock, EngineError, LrSchedule, RunConfig, RunResult};
use crate::linalg::dist2;
use crate::objectives::GlobalObjective;
use crate::scalar::Scalar;

/// Summary of one run for rounds-to-target studies.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub seed: u64,
    /// First round with loss `<= eps`; `None` when never reached.
    pub rounds_to_eps: Option<usize>,
    pub final_loss: f64,
    pub rounds_run: usize,
}

impl RunSummary {
    pub fn from_result<T: Scalar>(seed: u64, result: &RunResult<T>, eps: f64) -> Self {
        Self {
            seed,
            rounds_to_eps: result.rounds_to(eps),
            final_loss: result.final_loss(),
            rounds_run: result.records.len(),
        }
    }

    /// `rounds_to_eps` with the `-1` sentinel used in CSV output.
    pub fn rounds_or_sentinel(&self) -> i64 {
        self.rounds_to_eps.map_or(-1, |r| r as i64)
    }
}

/// Runs `cfg` with its seed replaced by `seed`.
pub fn run_seeded<T: Scalar>(
    problem: &GlobalObjective<T>,
    cfg: &RunConfig<T>,
    seed: u64,
) -> Result<RunResult<T>, EngineError> {
    let mut cfg = cfg.clone();
    cfg.seed = seed;
    run_fedavg(problem, &cfg)
}

/// Orders rounds-to-target counts with "never reached" above every count.
fn reach_key(r: Option<usize>) -> usize {
    r.unwrap_or(usize::MAX)
}

/// True when the smallest interior entry is strictly below both endpoints.
/// Unreached entries count as infinitely many rounds, so an unreached
/// interior never wins.
pub fn interior_minimum_below_ends(rounds: &[Option<usize>]) -> bool {
    if rounds.len() < 3 {
        return false;
    }
    let last = rounds.len() - 1;
    let interior = rounds[1..last]
        .iter()
        .map(|&r| reach_key(r))
        .min()
        .unwrap_or(usize::MAX);
    interior != usize::MAX && interior < reach_key(rounds[0]) && interior < reach_key(rounds[last])
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    })
}

/// Unbiased sample variance; zero for fewer than two values.
pub fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

/// Every entry reached the target and lies within `rel_tol` of the median.
pub fn within_median(rounds: &[Option<usize>], rel_tol: f64) -> bool {
    let Some(reached) = rounds.iter().map(|r| r.map(|v| v as f64)).collect::<Option<Vec<_>>>() else {
        return false;
    };
    match median(&reached) {
        Some(med) => reached.iter().all(|&r| (r - med).abs() <= rel_tol * med),
        None => false,
    }
}

/// One cell of the counterexample grid.
#[derive(Clone, Debug, PartialEq)]
pub struct CounterexampleCell {
    pub eta: f64,
    pub local_steps: usize,
    /// `‖w̃* − w*‖` with `w̃*` the closed-form FedAvg fixed point.
    pub gap_actual: f64,
    pub gap_bound: f64,
    /// `‖w_iter − w̃*‖` for the iterated run.
    pub fixed_point_residual: f64,
    /// `‖w_{t+1} − w_t‖` at the last round of the iterated run.
    pub last_step: f64,
    pub rounds: usize,
    pub converged: bool,
}

/// Computes the closed-form fixed point and gap bound, then iterates the
/// round map until consecutive iterates move by at most `step_tol`.
///
/// The iteration starts at the optimum `w*`: the fixed point lies within
/// the gap of it, so far fewer rounds are needed than from zero.
pub fn counterexample_cell<T: Scalar>(
    ce: &Counterexample<T>,
    eta: T,
    local_steps: usize,
    step_tol: T,
    max_rounds: usize,
) -> Result<CounterexampleCell, CounterexampleError> {
    let w_opt = ce.optimum()?;
    let w_fix = ce.fedavg_fixed_point(eta, local_steps)?;
    let bound = ce.gap_lower_bound(eta, local_steps)?;
    let it = ce.iterate_to_fixed_point(&w_opt, eta, local_steps, step_tol, max_rounds)?;
    Ok(CounterexampleCell {
        eta: eta.to_f64_lossy(),
        local_steps,
        gap_actual: dist2(w_fix.values(), w_opt.values()).to_f64_lossy(),
        gap_bound: bound.to_f64_lossy(),
        fixed_point_residual: dist2(it.w.values(), w_fix.values()).to_f64_lossy(),
        last_step: it.last_step.to_f64_lossy(),
        rounds: it.rounds,
        converged: it.converged,
    })
}

/// Outcome of one decayed-rate run on the counterexample.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnealOutcome {
    pub rate: f64,
    pub final_gap: f64,
    pub min_gap: f64,
}

/// Full-batch, full-participation FedAvg on the counterexample from zero
/// with `η_t = eta0 / (offset + rate·t)`; reports `‖w̄ − w*‖` after `rounds`
/// rounds.
pub fn anneal_run<T: Scalar>(
    ce: &Counterexample<T>,
    local_steps: usize,
    rounds: usize,
    eta0: T,
    offset: T,
    rate: T,
    clock: DecayClock,
) -> Result<AnnealOutcome, EngineError> {
    let mut schedule = LrSchedule::annealed(eta0, offset, rate);
    schedule.clock = clock;
    let mut cfg = RunConfig::new(
        crate::sampling::Scheme::Full,
        local_steps,
        ce.num_devices(),
        rounds * local_steps,
        schedule,
    );
    cfg.optimum = Some(ce.optimum().map_err(|e| EngineError::Config(e.to_string()))?);
    let res = run_fedavg(ce.objective(), &cfg)?;
    let gaps: Vec<f64> = res.records.iter().filter_map(|r| r.dist_opt).collect();
    Ok(AnnealOutcome {
        rate: rate.to_f64_lossy(),
        final_gap: gaps.last().copied().unwrap_or(f64::NAN),
        min_gap: gaps.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Runs [`anneal_run`] for every rate and returns the outcomes in grid order.
pub fn anneal_search<T: Scalar>(
    ce: &Counterexample<T>,
    local_steps: usize,
    rounds: usize,
    eta0: T,
    offset: T,
    rates: &[T],
    clock: DecayClock,
) -> Result<Vec<AnnealOutcome>, EngineError> {
    rates
        .iter()
        .map(|&a| anneal_run(ce, local_steps, rounds, eta0, offset, a, clock))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_minimum() {
        assert!(interior_minimum_below_ends(&[None, Some(30), Some(20), Some(40)]));
        assert!(!interior_minimum_below_ends(&[Some(10), Some(30), Some(20), Some(40)]));
        assert!(!interior_minimum_below_ends(&[None, None, None]));
        assert!(!interior_minimum_below_ends(&[Some(5), Some(5), Some(6)]));
        assert!(!interior_minimum_below_ends(&[Some(5), Some(4)]));
    }

    #[test]
    fn median_and_spread() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
        assert!(within_median(&[Some(100), Some(120), Some(80)], 0.25));
        assert!(!within_median(&[Some(100), Some(130), Some(80)], 0.25));
        assert!(!within_median(&[Some(100), None, Some(100)], 0.25));
        assert_eq!(sample_variance(&[1.0, 3.0]), 2.0);
        assert_eq!(sample_variance(&[1.0]), 0.0);
    }

    #[test]
    fn cell_matches_closed_form() {
        let ce = Counterexample::<f64>::build(5, 4, 2e-4).unwrap();
        let cell = counterexample_cell(&ce, 1e-2, 2, 1e-14, 200_000).unwrap();
        assert!(cell.converged);
        assert!(cell.fixed_point_residual < 1e-8, "{cell:?}");
        assert!(cell.gap_actual >= cell.gap_bound && cell.gap_bound > 0.0);
    }
}
