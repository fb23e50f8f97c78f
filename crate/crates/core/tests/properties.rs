use ldc_core::diffnet::{init_net, GradBundle, InitScheme};
use ldc_core::linstats::{estimate_mean_cov, sample_gaussian, update_shared_cov};
use ldc_core::pcu::PcuState;
use ldc_core::protocol::make_plan;
use ldc_core::{GaussianStats, Matrix, SampleSet, SharedCovariance};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn shared_cov_is_order_free(seed in any::<u64>(), d in 1usize..5, classes in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let groups: Vec<Matrix> = (0..classes).map(|_| random_rows(rng.random_range(2..9), d, &mut rng)).collect();
        let batched = update_shared_cov(&SharedCovariance::empty(d), &groups).unwrap();
        let mut running = SharedCovariance::empty(d);
        for g in &groups {
            running = update_shared_cov(&running, std::slice::from_ref(g)).unwrap();
        }
        prop_assert_eq!(running.n_classes, batched.n_classes);
        prop_assert!(running.sigma.max_abs_diff(&batched.sigma) < 1e-10);
    }

    #[test]
    fn plans_are_disjoint_and_grow_by_n_way(seed in any::<u64>(), n_base in 1usize..30, n_way in 1usize..6, sessions in 1usize..8) {
        let n = n_base + n_way * sessions;
        let plan = make_plan(n, n_base, n_way, 5, seed).unwrap();
        let mut order = plan.order();
        order.sort_unstable();
        prop_assert_eq!(order, (0..n).collect::<Vec<_>>());
        prop_assert_eq!(plan.n_sessions(), sessions);
        for t in 0..=sessions {
            prop_assert_eq!(plan.seen_after(t), n_base + t * n_way);
        }
    }

    #[test]
    fn network_forward_is_pure_and_sgd_keeps_shapes(seed in any::<u64>(), d in 1usize..6, residual in any::<bool>()) {
        let net = init_net::<f64>(&[d, 4 * d, d], InitScheme::He, residual, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let x = random_rows(5, d, &mut rng);
        let a = net.predict(&x).unwrap();
        let b = net.predict(&x).unwrap();
        prop_assert!(a.as_slice().iter().zip(b.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));

        let (_, cache) = net.forward(&x).unwrap();
        let (grads, _) = net.backward(&cache, &random_rows(5, d, &mut rng)).unwrap();
        let mut stepped = net.clone();
        stepped.sgd_step(&grads, 0.1).unwrap();
        let shapes = |n: &ldc_core::Net| n.layers().iter().map(|l| (l.in_dim(), l.out_dim())).collect::<Vec<_>>();
        prop_assert_eq!(shapes(&stepped), shapes(&net));
        prop_assert_eq!(stepped.param_count(), net.param_count());
        prop_assert_eq!(GradBundle::zeros_like(&stepped).flat().len(), net.param_count());
    }

    #[test]
    fn calibration_preserves_rows_and_labels(seed in any::<u64>(), d in 1usize..6, n in 1usize..40, recur in 0usize..5) {
        let shared = SharedCovariance { sigma: Matrix::identity(d), n_classes: 1 };
        let mut pcu = PcuState::new(shared, 4, recur, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in 0..pcu.calib_net.param_count() {
            *pcu.calib_net.param_mut(i) += rng.random_range(-0.3..0.3);
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..9)).collect();
        let set = SampleSet::new(random_rows(n, d, &mut rng), labels.clone()).unwrap();
        let out = pcu.calibrate(&set).unwrap();
        prop_assert_eq!(out.len(), n);
        prop_assert_eq!(out.labels, labels);
    }
}

#[test]
fn sampler_covariance_converges_in_eight_dimensions() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for trial in 0..3 {
        let a = random_rows(8, 8, &mut rng);
        let cov = a.matmul_t(&a).unwrap().scale(0.25);
        let stats = GaussianStats::new(vec![0.5; 8], cov.clone()).unwrap();
        let drawn = sample_gaussian(&stats, 100_000, 0, 1000 + trial).unwrap();
        let fit = estimate_mean_cov(&drawn.features).unwrap();
        let err = fit.cov.sub(&cov).unwrap().frobenius_norm();
        assert!(err < 0.05 * cov.frobenius_norm(), "trial {trial}: {err}");
    }
}
