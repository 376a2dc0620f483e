use gradmask::rnnt::{rnnt_loss, rnnt_loss_bruteforce, LogitLattice};
use proptest::prelude::*;

/// Random lattice of raw logits with `U` targets over `classes - 1` labels.
fn instance() -> impl Strategy<Value = (usize, usize, Vec<usize>, Vec<f64>)> {
    (1usize..=5, 0usize..=4, 2usize..=5).prop_flat_map(|(t, u, k)| {
        (
            Just(t),
            Just(k),
            proptest::collection::vec(0..k - 1, u),
            proptest::collection::vec(-3.0f64..3.0, t * (u + 1) * k),
        )
    })
}

fn binomial(n: u64, k: u64) -> u64 {
    (1..=k).fold(1, |acc, i| acc * (n + 1 - i) / i)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn dp_matches_path_enumeration((t, k, targets, logits) in instance()) {
        let lat = LogitLattice::from_logits(t, targets.len() + 1, k, logits).unwrap();
        let fast = rnnt_loss(&lat, &targets).unwrap().loss;
        let (slow, paths) = rnnt_loss_bruteforce(&lat, &targets).unwrap();
        prop_assert!((fast - slow).abs() <= 1e-10 * slow.abs().max(1e-300), "{} vs {}", fast, slow);
        prop_assert_eq!(paths, binomial((t - 1 + targets.len()) as u64, targets.len() as u64));
    }

    #[test]
    fn loss_is_a_negative_log_probability((t, k, targets, logits) in instance()) {
        let lat = LogitLattice::from_logits(t, targets.len() + 1, k, logits).unwrap();
        let res = rnnt_loss(&lat, &targets).unwrap();
        prop_assert!(res.loss > 0.0 && res.loss.is_finite());
        prop_assert!(lat.normalization_error() < 1e-12);
    }

    #[test]
    fn occupancies_are_consistent((t, k, targets, logits) in instance()) {
        let lat = LogitLattice::from_logits(t, targets.len() + 1, k, logits).unwrap();
        let res = rnnt_loss(&lat, &targets).unwrap();
        prop_assert!(res.occupancy_error(&lat) < 1e-9);
    }

    #[test]
    fn softmax_gradient_rows_sum_to_zero((t, k, targets, logits) in instance()) {
        let lat = LogitLattice::from_logits(t, targets.len() + 1, k, logits).unwrap();
        let g = rnnt_loss(&lat, &targets).unwrap().grad_raw_logits(&lat);
        for row in g.chunks(k) {
            prop_assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn empty_target_is_all_blanks(t in 1usize..=6, k in 2usize..=5, seed in proptest::collection::vec(-3.0f64..3.0, 30)) {
        let logits: Vec<f64> = seed.into_iter().cycle().take(t * k).collect();
        let lat = LogitLattice::from_logits(t, 1, k, logits).unwrap();
        let direct: f64 = -(0..t).map(|ti| lat.at(ti, 0, k - 1)).sum::<f64>();
        let res = rnnt_loss(&lat, &[]).unwrap();
        prop_assert!((res.loss - direct).abs() < 1e-12);
    }
}

#[test]
fn enumeration_guard() {
    let lat = LogitLattice::from_logits(10, 4, 3, vec![0.0; 120]).unwrap();
    assert!(rnnt_loss_bruteforce(&lat, &[0, 1, 0]).is_err());
    assert!(rnnt_loss(&lat, &[0, 1, 0]).is_ok());
}
