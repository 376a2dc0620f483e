use gradmask::decode::{edit_distance, error_rate, ErrorTally};
use proptest::prelude::*;

/// Textbook two-row Levenshtein distance.
fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for (i, x) in a.iter().enumerate() {
        let mut cur = vec![i + 1; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = (prev[j] + usize::from(x != y))
                .min(prev[j + 1] + 1)
                .min(cur[j] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

fn seq() -> impl Strategy<Value = Vec<u8>> {
    proptest::collection::vec(0u8..4, 0..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn distance_matches_oracle(a in seq(), b in seq()) {
        prop_assert_eq!(edit_distance(&a, &b).distance, levenshtein(&a, &b));
    }

    #[test]
    fn breakdown_is_consistent(a in seq(), b in seq()) {
        let e = edit_distance(&a, &b);
        prop_assert_eq!(e.substitutions + e.insertions + e.deletions, e.distance);
        prop_assert_eq!(b.len() as isize - a.len() as isize, e.insertions as isize - e.deletions as isize);
        prop_assert!(e.distance >= a.len().abs_diff(b.len()));
        prop_assert!(e.distance <= a.len().max(b.len()));
    }

    #[test]
    fn symmetric_up_to_insert_delete_swap(a in seq(), b in seq()) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a).swapped());
    }

    #[test]
    fn triangle_inequality(a in seq(), b in seq(), c in seq()) {
        let d = |x: &[u8], y: &[u8]| edit_distance(x, y).distance;
        prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c));
    }

    #[test]
    fn identity(a in seq()) {
        prop_assert_eq!(edit_distance(&a, &a).distance, 0);
        prop_assert_eq!(error_rate(&a, &a), 0.0);
    }
}

#[test]
fn corpus_rate_pools_tokens() {
    let mut t = ErrorTally::default();
    t.add(&[1, 2, 3, 4], &[1, 2, 3, 4]);
    t.add(&[1], &[2]);
    assert_eq!(t.rate(), 0.2);
    assert_eq!(t.utterances, 2);
    assert_eq!(ErrorTally::default().rate(), 0.0);
}
