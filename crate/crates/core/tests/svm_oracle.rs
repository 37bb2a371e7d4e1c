mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cfdiag_core::svm::train_l2_svm;

/// Expands the model's support set back to a full α vector.
fn full_alpha(x: &[Vec<f64>], sv: &[Vec<f64>], alphas: &[f64]) -> Vec<f64> {
    let mut used = vec![false; sv.len()];
    x.iter()
        .map(|row| match (0..sv.len()).find(|&k| !used[k] && sv[k] == *row) {
            Some(k) => {
                used[k] = true;
                alphas[k]
            }
            None => 0.0,
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn solver_matches_enumerated_dual(seed in any::<u64>()) {
        let (x, y, c, k) = common::random_svm_problem(&mut ChaCha8Rng::seed_from_u64(seed));
        let model = train_l2_svm(&x, &y, c, k).unwrap();
        let (best, _) = common::brute_force_dual(&x, &y, c, &k);
        prop_assert!((model.dual_objective - best).abs() <= 1e-6,
            "solver {} oracle {}", model.dual_objective, best);

        let alpha = full_alpha(&x, &model.support_vectors, &model.alphas);
        let q = common::dual_hessian(&x, &y, c, &k);
        // the reported objective is the objective of the returned α
        prop_assert!((common::dual_value(&q, &alpha) - model.dual_objective).abs() < 1e-9);
        let eq: f64 = alpha.iter().zip(&y).map(|(a, l)| a * l).sum();
        prop_assert!(eq.abs() < 1e-9);
        prop_assert!(common::kkt_violation(&x, &y, c, &k, &alpha, model.bias) <= 1e-3);
    }
}

#[test]
fn oracle_reproduces_two_point_closed_form() {
    for c in [0.1, 1.0, 10.0] {
        let (d, alpha) = common::brute_force_dual(
            &[vec![0.0], vec![1.0]],
            &[-1.0, 1.0],
            c,
            &cfdiag_core::svm::KernelSpec::Linear,
        );
        let a = 2.0 * c / (c + 1.0);
        assert!((alpha[0] - a).abs() < 1e-12 && (alpha[1] - a).abs() < 1e-12);
        // D = 2α − ½ α²(1 + 1/C)
        assert!((d - (2.0 * a - 0.5 * a * a * (1.0 + 1.0 / c))).abs() < 1e-12);
    }
}
