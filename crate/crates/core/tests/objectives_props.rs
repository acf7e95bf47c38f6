use std::sync::Arc;

use fedsim::datasets::DeviceData;
use fedsim::linalg::Matrix;
use fedsim::objectives::{gamma_heterogeneity, GlobalObjective, LocalObjective, ParamVector, Shape};
use proptest::prelude::*;

fn central_difference(f: impl Fn(&[f64]) -> f64, w: &[f64], h: f64) -> Vec<f64> {
    (0..w.len())
        .map(|i| {
            let mut up = w.to_vec();
            let mut dn = w.to_vec();
            up[i] += h;
            dn[i] -= h;
            (f(&up) - f(&dn)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

/// `M Mᵀ` from an arbitrary square factor.
fn psd(d: usize, entries: &[f64]) -> Matrix<f64> {
    let m = Matrix::from_fn(d, d, |i, j| entries[i * d + j]);
    m.matmul(&m.transpose())
}

fn quadratic_strategy() -> impl Strategy<Value = (LocalObjective<f64>, usize)> {
    (2usize..6).prop_flat_map(|d| {
        (
            prop::collection::vec(-1.0f64..1.0, d * d),
            prop::collection::vec(-2.0f64..2.0, d),
            0.01f64..1.0,
        )
            .prop_map(move |(m, b, mu)| (LocalObjective::quadratic(psd(d, &m), b, mu).unwrap(), d))
    })
}

fn logistic_strategy() -> impl Strategy<Value = LocalObjective<f64>> {
    (2usize..4, 2usize..5, 3usize..12).prop_flat_map(|(c, f, n)| {
        (
            prop::collection::vec(-2.0f64..2.0, n * f),
            prop::collection::vec(0..c, n),
            1e-4f64..1e-1,
        )
            .prop_map(move |(x, y, lambda)| {
                let data = DeviceData::new(x, y, f).unwrap();
                LocalObjective::logistic(Arc::new(data), c, lambda).unwrap()
            })
    })
}

fn point(obj: &LocalObjective<f64>, seed_vals: &[f64]) -> ParamVector<f64> {
    let n = obj.shape().len();
    let vals: Vec<f64> = (0..n)
        .map(|i| seed_vals[i % seed_vals.len()] * (1.0 + i as f64 * 0.1))
        .collect();
    ParamVector::new(obj.shape(), vals).unwrap()
}

fn fd_grad(obj: &LocalObjective<f64>, w: &ParamVector<f64>) -> Vec<f64> {
    let shape = obj.shape();
    central_difference(
        |v| obj.loss(&ParamVector::new(shape, v.to_vec()).unwrap()).unwrap(),
        w.values(),
        1e-5,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn quadratic_gradient_matches_finite_differences(
        (obj, _d) in quadratic_strategy(),
        w in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let w = point(&obj, &w);
        let g = obj.grad(&w).unwrap();
        prop_assert!(rel_err(&fd_grad(&obj, &w), g.values()) <= 1e-5);
    }

    #[test]
    fn logistic_gradient_matches_finite_differences(
        obj in logistic_strategy(),
        w in prop::collection::vec(-1.0f64..1.0, 7),
    ) {
        let w = point(&obj, &w);
        let g = obj.grad(&w).unwrap();
        prop_assert!(rel_err(&fd_grad(&obj, &w), g.values()) <= 1e-5);
    }

    #[test]
    fn logistic_loss_is_midpoint_convex(
        obj in logistic_strategy(),
        a in prop::collection::vec(-2.0f64..2.0, 5),
        b in prop::collection::vec(-2.0f64..2.0, 5),
    ) {
        let wa = point(&obj, &a);
        let wb = point(&obj, &b);
        let mid: Vec<f64> = wa.values().iter().zip(wb.values()).map(|(x, y)| 0.5 * (x + y)).collect();
        let wm = ParamVector::new(obj.shape(), mid).unwrap();
        let lhs = obj.loss(&wm).unwrap();
        let rhs = 0.5 * (obj.loss(&wa).unwrap() + obj.loss(&wb).unwrap());
        prop_assert!(lhs <= rhs + 1e-10);
    }

    #[test]
    fn quadratic_loss_is_midpoint_convex(
        (obj, _d) in quadratic_strategy(),
        a in prop::collection::vec(-3.0f64..3.0, 5),
        b in prop::collection::vec(-3.0f64..3.0, 5),
    ) {
        let wa = point(&obj, &a);
        let wb = point(&obj, &b);
        let mid: Vec<f64> = wa.values().iter().zip(wb.values()).map(|(x, y)| 0.5 * (x + y)).collect();
        let lhs = obj.loss(&ParamVector::flat(mid)).unwrap();
        let rhs = 0.5 * (obj.loss(&wa).unwrap() + obj.loss(&wb).unwrap());
        prop_assert!(lhs <= rhs + 1e-10);
    }

    #[test]
    fn quadratic_strong_convexity_around_minimum(
        (obj, _d) in quadratic_strategy(),
        w in prop::collection::vec(-3.0f64..3.0, 5),
    ) {
        let mu = match obj.kind() {
            fedsim::objectives::ObjectiveKind::Quadratic { mu, .. } => *mu,
            _ => unreachable!(),
        };
        let min = obj.local_minimum().unwrap();
        let w = point(&obj, &w);
        let gap = obj.loss(&w).unwrap() - min.value;
        let d2 = w.distance(&min.w).powi(2);
        prop_assert!(gap >= 0.5 * mu * d2 - 1e-10 * (1.0 + gap.abs()));
    }

    #[test]
    fn local_minimum_is_below_random_probes(
        obj in logistic_strategy(),
        probes in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 100),
    ) {
        let min = obj.local_minimum().unwrap();
        for p in &probes {
            let w = point(&obj, p);
            prop_assert!(min.value <= obj.loss(&w).unwrap() + 1e-12);
        }
    }

    #[test]
    fn heterogeneity_nonnegative_and_permutation_invariant(
        devices in prop::collection::vec(quadratic_fixed_dim(), 2..5),
    ) {
        let global = GlobalObjective::uniform(devices.clone()).unwrap();
        let gamma = gamma_heterogeneity(&global).unwrap();
        prop_assert!(gamma >= 0.0);
        let mut rev = devices;
        rev.reverse();
        let gamma_rev = gamma_heterogeneity(&GlobalObjective::uniform(rev).unwrap()).unwrap();
        prop_assert!((gamma - gamma_rev).abs() <= 1e-9 * (1.0 + gamma.abs()));
    }
}

fn quadratic_fixed_dim() -> impl Strategy<Value = LocalObjective<f64>> {
    (
        prop::collection::vec(-1.0f64..1.0, 9),
        prop::collection::vec(-2.0f64..2.0, 3),
        0.05f64..1.0,
    )
        .prop_map(|(m, b, mu)| LocalObjective::quadratic(psd(3, &m), b, mu).unwrap())
}

#[test]
fn quadratic_loss_two_evaluation_paths() {
    // Smallest counterexample device with w = (1,1,1): direct matrix form vs
    // an elementwise double sum.
    let ce = fedsim::counterexample::Counterexample::<f64>::build(2, 1, 0.0).unwrap();
    let dev = &ce.objective().locals()[0];
    let w = ParamVector::flat(vec![1.0; 3]);
    let a = &ce.parts()[0];
    let b = &ce.b_parts()[0];
    let mut quad = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            quad += w.values()[i] * a.row(i)[j] * w.values()[j];
        }
    }
    let lin: f64 = (0..3).map(|i| b[i] * w.values()[i]).sum();
    let manual = 0.5 * (quad - 2.0 * lin);
    // The device's objective may carry the 1/p_k scaling of the transformed
    // problem; compare on the unscaled value.
    let got = dev.loss(&w).unwrap() / dev.scale();
    assert!((got - manual).abs() <= 1e-12, "{got} vs {manual}");
}

#[test]
fn counterexample_first_device_minimum_value() {
    let ce = fedsim::counterexample::Counterexample::<f64>::build(3, 2, 0.0).unwrap();
    let dev = &ce.objective().locals()[0];
    let mut w = vec![0.0; ce.dim()];
    for v in w.iter_mut().take(3) {
        *v = 1.0;
    }
    let w = ParamVector::flat(w);
    let value = dev.loss(&w).unwrap() / dev.scale();
    assert!((value + 0.5).abs() <= 1e-12);
    let min = dev.local_minimum().unwrap();
    assert!((min.value / dev.scale() + 0.5).abs() <= 1e-9);
    let g = dev.grad(&w).unwrap();
    assert!(g.norm() <= 1e-12);
}

#[test]
fn stochastic_gradient_monte_carlo_mean() {
    use rand::SeedableRng;
    let x = vec![0.5, -1.0, 1.5, 0.2, -0.7, 0.9, 2.0, -1.2, 0.1, 0.3];
    let y = vec![0, 1, 2, 1, 0];
    let data = DeviceData::new(x, y, 2).unwrap();
    let obj = LocalObjective::logistic(Arc::new(data), 3, 1e-2).unwrap();
    let w = ParamVector::new(
        Shape::Logistic {
            classes: 3,
            features: 2,
        },
        (0..9).map(|i| 0.1 * i as f64 - 0.4).collect(),
    )
    .unwrap();
    let exact = obj.grad(&w).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let draws = 100_000;
    let d = exact.len();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for _ in 0..draws {
        let g = obj.stochastic_grad(&w, 1, &mut rng).unwrap();
        for i in 0..d {
            sum[i] += g.values()[i];
            sum_sq[i] += g.values()[i] * g.values()[i];
        }
    }
    let n = draws as f64;
    for i in 0..d {
        let mean = sum[i] / n;
        let sd = (sum_sq[i] / n - mean * mean).max(0.0).sqrt();
        assert!(
            (mean - exact.values()[i]).abs() <= 4.0 * sd / n.sqrt() + 1e-12,
            "coord {i}"
        );
    }
}
