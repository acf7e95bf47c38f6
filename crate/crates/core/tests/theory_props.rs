use fedsim::counterexample::Counterexample;
use fedsim::sampling::Scheme;
use fedsim::theory::{
    compute_b, compute_c, estimate_constants, optimal_local_steps, predict_comm_rounds, theorem_rhs, EstimateOptions,
    ProblemConstants,
};
use proptest::prelude::*;

fn constants() -> impl Strategy<Value = ProblemConstants> {
    (
        0.1f64..10.0,
        1.0f64..50.0,
        0.0f64..5.0,
        prop::collection::vec(0.0f64..3.0, 2..8),
        0.0f64..2.0,
        1usize..20,
    )
        .prop_map(|(mu, kappa, g, sigma, gamma, e)| {
            let n = sigma.len();
            ProblemConstants::new(mu * kappa, mu, g, sigma, gamma, vec![1.0 / n as f64; n], 1, e).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn predictor_is_u_shaped(c in constants(), k in 1usize..20) {
        prop_assume!(c.g.value > 1e-3);
        let e_star = optimal_local_steps(&c, k);
        let f = |e: f64| predict_comm_rounds(&c, k, e);
        let below: Vec<f64> = (1..=8).map(|i| e_star * i as f64 / 8.0).collect();
        let above: Vec<f64> = (0..8).map(|i| e_star * (1.0 + i as f64 / 2.0)).collect();
        prop_assert!(below.windows(2).all(|w| f(w[0]) >= f(w[1])));
        prop_assert!(above.windows(2).all(|w| f(w[0]) <= f(w[1])));
        // Stationarity by central difference.
        let h = 1e-6 * e_star;
        let slope = (f(e_star + h) - f(e_star - h)) / (2.0 * h);
        prop_assert!(slope.abs() <= 1e-5 * f(e_star) / e_star);
    }

    #[test]
    fn heterogeneity_raises_the_bound(c in constants(), extra in 0.01f64..3.0, t in 1usize..100_000, delta in 0.0f64..10.0) {
        let mut worse = c.clone();
        worse.gamma.value += extra;
        prop_assert!(theorem_rhs(t, &worse, 0.0, delta) > theorem_rhs(t, &c, 0.0, delta));
    }

    #[test]
    fn scheme_i_variance_is_inverse_in_k(c in constants()) {
        let ck: Vec<f64> = (1..=c.n)
            .map(|k| k as f64 * compute_c(Scheme::SchemeI, &c.clone().with_participation(k, c.e)).unwrap())
            .collect();
        prop_assert!(ck.iter().all(|v| (v - ck[0]).abs() <= 1e-12 * ck[0].abs().max(1e-300)));
        let full_ii = compute_c(Scheme::SchemeII, &c.clone().with_participation(c.n, c.e)).unwrap();
        prop_assert_eq!(full_ii, 0.0);
    }

    #[test]
    fn gradient_bound_terms_scale_quadratically(c in constants(), s in 0.1f64..10.0) {
        let g = c.g.value;
        let zero = compute_b(&c.clone().with_g(0.0));
        let b1 = compute_b(&c) - zero;
        let bs = compute_b(&c.clone().with_g(s * g)) - zero;
        prop_assert!((bs - s * s * b1).abs() <= 1e-10 * (bs.abs() + zero.abs() + 1e-300));
        let c1 = compute_c(Scheme::SchemeI, &c).unwrap();
        let cs = compute_c(Scheme::SchemeI, &c.clone().with_g(s * g)).unwrap();
        prop_assert!((cs - s * s * c1).abs() <= 1e-12 * cs.abs().max(1e-300));
    }

    #[test]
    fn b_matches_its_definition(c in constants()) {
        let noise: f64 = c.p.iter().zip(&c.sigma).map(|(p, s)| (p * s.value).powi(2)).sum();
        let e1 = (c.e - 1) as f64;
        let want = noise + 6.0 * c.l.value * c.gamma.value + 8.0 * (e1 * c.g.value).powi(2);
        prop_assert!((compute_b(&c) - want).abs() <= 1e-12 * want.max(1e-300));
    }
}

#[test]
fn quadratic_constants_are_exact() {
    let ce = Counterexample::<f64>::build(3, 2, 1e-2).unwrap();
    let c = estimate_constants(ce.objective(), &EstimateOptions::default()).unwrap();
    let mut l = 0.0f64;
    let mut mu = f64::INFINITY;
    for a in ce.parts() {
        let eig = a.symmetric_eigen().unwrap();
        l = l.max(eig.max() + 1e-2);
        mu = mu.min(eig.min() + 1e-2);
    }
    assert!((c.l.value - l).abs() <= 1e-10, "{} vs {l}", c.l.value);
    assert!((c.mu.value - mu).abs() <= 1e-10, "{} vs {mu}", c.mu.value);
    assert!(c.gamma.value >= 0.0);
    assert!(compute_c(Scheme::Original, &c).is_err());
}
