//! Property tests over randomly generated layer fixtures.

use evoprune::fitness::{compute_hessian, direct_error, taylor_error, volume_set_from_rows};
use evoprune::genetic::Chromosome;
use evoprune::net::LayerId;
use evoprune::Tensor;
use proptest::prelude::*;

fn arb_fixture() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<Vec<f64>>)> {
    // (channels, k^2, weights for 2 filters, 40 volume rows)
    (2usize..6, 1usize..5).prop_flat_map(|(c, k2)| {
        let d = c * k2;
        (
            Just(c),
            Just(k2),
            prop::collection::vec(-1.0f64..1.0, 2 * d),
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d), 40),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The exact layer error equals twice the second-order estimate when the
    /// quadratic form is built from the same volumes, for any mask.
    #[test]
    fn direct_error_is_twice_taylor((c, _k2, w, rows) in arb_fixture(), mask_bits in prop::collection::vec(any::<bool>(), 2..6)) {
        let d = rows[0].len();
        let weights = Tensor::from_vec(&[2, d], w).unwrap();
        let vs = volume_set_from_rows(LayerId::from("l"), rows, &weights, None).unwrap();
        let h = compute_hessian(&vs).unwrap();
        let bits: Vec<bool> = (0..c).map(|i| *mask_bits.get(i % mask_bits.len()).unwrap()).collect();
        let mask = Chromosome::from_bits(bits);
        let e = direct_error(&vs, &weights, None, &mask).unwrap();
        let de = taylor_error(&h, &weights, &mask).unwrap();
        let scale = e.abs().max(2.0 * de.abs()).max(1e-12);
        prop_assert!((e - 2.0 * de).abs() / scale < 1e-6);
    }

    /// Ordering masks by the exact error equals ordering by the estimate.
    #[test]
    fn rankings_agree((c, _k2, w, rows) in arb_fixture(), seed in 0u64..1000) {
        let d = rows[0].len();
        let weights = Tensor::from_vec(&[2, d], w).unwrap();
        let vs = volume_set_from_rows(LayerId::from("l"), rows, &weights, None).unwrap();
        let h = compute_hessian(&vs).unwrap();

        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let masks: Vec<Chromosome> = (0..6)
            .map(|_| Chromosome::from_bits((0..c).map(|_| rng.gen_bool(0.5)).collect()))
            .collect();
        let mut by_direct: Vec<usize> = (0..masks.len()).collect();
        let mut by_taylor = by_direct.clone();
        let direct: Vec<f64> = masks.iter().map(|m| direct_error(&vs, &weights, None, m).unwrap()).collect();
        let taylor: Vec<f64> = masks.iter().map(|m| taylor_error(&h, &weights, m).unwrap()).collect();
        by_direct.sort_by(|&a, &b| direct[a].partial_cmp(&direct[b]).unwrap().then(a.cmp(&b)));
        by_taylor.sort_by(|&a, &b| taylor[a].partial_cmp(&taylor[b]).unwrap().then(a.cmp(&b)));
        // Identical up to exact ties, which the index tiebreak resolves the
        // same way on both sides thanks to the 2x identity.
        prop_assert_eq!(by_direct, by_taylor);
    }
}
