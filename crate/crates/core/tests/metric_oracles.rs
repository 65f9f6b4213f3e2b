mod common;

use taxonnet::evaluation::prob_dendrogram_purity;

#[test]
fn purities_match_brute_force() {
    let (dp, lp) = common::metric_sweep(50);
    assert!(dp <= 1e-10, "dendrogram purity off by {dp:e}");
    assert!(lp <= 1e-10, "leaf purity off by {lp:e}");
}

#[test]
fn one_hot_leaf_rows_reduce_to_classical_purity() {
    assert_eq!(common::hard_reduction_mismatches(50), 0);
}

#[test]
fn subsampled_dendrogram_purity_is_exact_when_budget_covers_all_pairs() {
    for seed in 0..10 {
        let (table, _) = common::metric_instance(seed);
        let exact = prob_dendrogram_purity(&table, 0, 0).unwrap();
        let covered = prob_dendrogram_purity(&table, 1000, 5).unwrap();
        assert!((exact - covered).abs() <= 1e-12);
    }
}
