use std::sync::Arc;

use fedsim::datasets::{generate_synthetic, DeviceData};
use fedsim::engine::{device_rng, run_fedavg, BatchMode, EngineError, LrSchedule, RunConfig};
use fedsim::objectives::{GlobalObjective, LocalObjective, ParamVector};
use fedsim::sampling::Scheme;
use proptest::prelude::*;

fn small_synthetic(seed: u64) -> GlobalObjective<f64> {
    let ds = generate_synthetic::<f64>(0.5, 0.5, 4, &[12, 30, 7, 18], seed).unwrap();
    ds.logistic_objective(1e-3).unwrap()
}

#[test]
fn identical_devices_match_centralized_sgd() {
    let x: Vec<f64> = (0..40).map(|i| ((i * 7) % 11) as f64 / 5.0 - 1.0).collect();
    let y: Vec<usize> = (0..20).map(|i| (i * 3) % 3).collect();
    let data = Arc::new(DeviceData::new(x, y, 2).unwrap());
    let local = LocalObjective::logistic(data, 3, 1e-2).unwrap();
    let n = 4;
    let problem = GlobalObjective::uniform(vec![local.clone(); n]).unwrap();
    let eta = 0.3;
    let rounds = 15;
    let mut cfg = RunConfig::new(Scheme::Full, 1, n, rounds, LrSchedule::constant(eta));
    cfg.batch = BatchMode::MiniBatch(5);
    cfg.seed = 17;
    let res = run_fedavg(&problem, &cfg).unwrap();

    // Centralized SGD on the pooled draws of every device stream.
    let mut w = ParamVector::zeros(local.shape());
    for round in 1..=rounds {
        let mut step = vec![0.0; w.len()];
        for k in 0..n {
            let g = local.stochastic_grad(&w, 5, &mut device_rng(17, round, k)).unwrap();
            for (s, gi) in step.iter_mut().zip(g.values()) {
                *s += gi / n as f64;
            }
        }
        for (wi, s) in w.values_mut().iter_mut().zip(&step) {
            *wi -= eta * s;
        }
    }
    for (a, b) in res.final_w.values().iter().zip(w.values()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
    }
}

#[test]
fn full_batch_divergence_stays_under_bound() {
    let problem = small_synthetic(4);
    for e in [2, 5, 10] {
        let mut cfg = RunConfig::new(Scheme::Full, e, 4, 20 * e, LrSchedule::inverse(0.5));
        cfg.record_divergence = true;
        let res = run_fedavg(&problem, &cfg).unwrap();
        let trace = res.divergence.unwrap();
        assert_eq!(trace.stats.len(), 20 * e + 1);
        assert!(trace.violations().is_empty(), "E={e}: {:?}", trace.violations());
        assert!(trace.stats.iter().step_by(e).all(|&s| s == 0.0));
    }
}

#[test]
fn stochastic_divergence_holds_on_average() {
    let problem = small_synthetic(6);
    let e = 5;
    let runs: Vec<_> = (0..10)
        .map(|seed| {
            let mut cfg = RunConfig::new(Scheme::Full, e, 4, 30 * e, LrSchedule::inverse(0.5));
            cfg.record_divergence = true;
            cfg.batch = BatchMode::MiniBatch(4);
            cfg.seed = seed;
            run_fedavg(&problem, &cfg).unwrap().divergence.unwrap()
        })
        .collect();
    let g = runs.iter().map(|t| t.g_max).fold(0.0, f64::max);
    let steps = runs[0].stats.len();
    for s in 0..steps {
        let vals: Vec<f64> = runs.iter().map(|t| t.stats[s]).collect();
        let mean = vals.iter().sum::<f64>() / 10.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0;
        let bound = 4.0 * runs[0].etas[s].powi(2) * ((e - 1) as f64).powi(2) * g * g;
        assert!(mean <= bound + 2.0 * (var / 10.0).sqrt(), "step {s}");
    }
}

#[test]
fn full_subset_of_scheme_ii_is_full_participation() {
    let problem = GlobalObjective::uniform(small_synthetic(2).locals().to_vec()).unwrap();
    let mut cfg = RunConfig::new(Scheme::Full, 3, 4, 30, LrSchedule::constant(0.2));
    cfg.batch = BatchMode::MiniBatch(3);
    let full = run_fedavg(&problem, &cfg).unwrap();
    cfg.scheme = Scheme::SchemeII;
    let sub = run_fedavg(&problem, &cfg).unwrap();
    assert_eq!(full.final_w.values(), sub.final_w.values());
}

#[test]
fn round_records_are_consistent() {
    let problem = small_synthetic(3);
    let mut cfg = RunConfig::new(Scheme::SchemeI, 4, 2, 80, LrSchedule::inverse(0.4).per_round());
    cfg.batch = BatchMode::MiniBatch(6);
    cfg.seed = 9;
    let res = run_fedavg(&problem, &cfg).unwrap();
    assert_eq!(res.records.len(), 20);
    for (i, r) in res.records.iter().enumerate() {
        assert_eq!(r.round, i + 1);
        assert_eq!(r.step, (i + 1) * 4);
        assert_eq!(r.selected.len(), 2);
        assert!((r.eta - 0.4 / (1.0 + i as f64)).abs() <= 1e-15);
    }
    let last = res.records.last().unwrap();
    assert_eq!(last.loss, problem.loss(&res.final_w).unwrap());

    let eps = res.records[10].loss;
    let first = res.rounds_to(eps).unwrap();
    assert!(first <= 11 && res.records[first - 1].loss <= eps);
    cfg.stop_at_loss = Some(eps);
    let stopped = run_fedavg(&problem, &cfg).unwrap();
    assert_eq!(stopped.records.len(), first);
    assert!(stopped.stopped_early);
    let strip = |r: &fedsim::engine::RoundRecord| (r.round, r.loss.to_bits(), r.selected.clone());
    assert_eq!(
        stopped.records.iter().map(strip).collect::<Vec<_>>(),
        res.records[..first].iter().map(strip).collect::<Vec<_>>()
    );
}

#[test]
fn divergence_is_an_error_with_partial_records() {
    let problem = small_synthetic(1);
    let cfg = RunConfig::new(Scheme::Full, 2, 4, 400, LrSchedule::constant(1e6));
    match run_fedavg(&problem, &cfg) {
        Err(EngineError::Diverged { round, partial, .. }) => assert_eq!(partial.records.len(), round - 1),
        other => panic!("expected divergence, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn runs_are_seed_deterministic(
        seed in any::<u64>(),
        scheme in prop_oneof![
            Just(Scheme::Full),
            Just(Scheme::SchemeI),
            Just(Scheme::SchemeII),
            Just(Scheme::SchemeIITransformed),
            Just(Scheme::Original),
        ],
        e in 1usize..5,
    ) {
        let problem = small_synthetic(5);
        let mut cfg = RunConfig::new(scheme, e, 2, 6 * e, LrSchedule::inverse(0.3));
        cfg.batch = BatchMode::MiniBatch(4);
        cfg.seed = seed;
        let a = run_fedavg(&problem, &cfg).unwrap();
        let b = run_fedavg(&problem, &cfg).unwrap();
        prop_assert_eq!(a.final_w.values(), b.final_w.values());
        let strip = |r: &fedsim::engine::RoundRecord| (r.round, r.eta.to_bits(), r.loss.to_bits(), r.selected.clone());
        prop_assert_eq!(
            a.records.iter().map(strip).collect::<Vec<_>>(),
            b.records.iter().map(strip).collect::<Vec<_>>()
        );
        cfg.seed = seed.wrapping_add(1);
        let c = run_fedavg(&problem, &cfg).unwrap();
        prop_assert_ne!(a.final_w.values(), c.final_w.values());
    }
}
