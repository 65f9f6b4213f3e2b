mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use taxonnet::evaluation::{build_annotation_matrix, classify, prob_dendrogram_purity, prob_leaf_purity};
use taxonnet::model::Architecture;
use taxonnet::objective::{elbo_terms, ntxent, r_dkl, r_ent, LossConfig};
use taxonnet::taxonomy::{self, cluster_posterior, kl_diag_gaussians};
use taxonnet::{AssignmentTable, Likelihood, Model, ModelSpec, NodeParams, TaxonomyTree, Tensor, VarianceMode};

fn arb_tree() -> impl Strategy<Value = TaxonomyTree> {
    (1usize..=4, 1usize..=3, any::<bool>()).prop_flat_map(|(depth, d, iso)| {
        let leaves = taxonomy::leaf_count(depth);
        let mode = if iso { VarianceMode::Isotropic } else { VarianceMode::Diagonal };
        let w = mode.width(d);
        (
            prop::collection::vec(-20.0..20.0f64, leaves * d),
            prop::collection::vec(-10.0..10.0f64, leaves * w),
            prop::collection::vec(-30.0..30.0f64, leaves - 1),
        )
            .prop_map(move |(m, lv, b)| {
                TaxonomyTree::from_parts(
                    depth,
                    mode,
                    Tensor::from_vec(leaves, d, m),
                    Tensor::from_vec(leaves, w, lv),
                    Tensor::from_vec(leaves - 1, 1, b),
                )
                .unwrap()
            })
    })
}

fn arb_node(d: usize) -> impl Strategy<Value = NodeParams> {
    (prop::collection::vec(-5.0..5.0f64, d), prop::collection::vec(-3.0..3.0f64, d))
        .prop_map(|(m, lv)| NodeParams::new(m, lv))
}

/// Soft assignment table with labels; at least one same-class pair.
fn arb_table() -> impl Strategy<Value = (AssignmentTable, usize)> {
    (1usize..=3, 1usize..=4, 0u64..u64::MAX).prop_flat_map(|(depth, y, seed)| {
        (Just(depth), y + 1..=24usize, Just(y), Just(seed))
    })
    .prop_map(|(depth, n, y, seed)| {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = common::random_soft_rows(&mut rng, n, taxonomy::node_count(depth));
        // every class present at least once
        let labels = (0..n).map(|i| if i < y { i } else { rng.random_range(0..y) }).collect();
        (AssignmentTable::new(common::to_tensor(&rows), Some(labels)).unwrap(), depth)
    })
}

fn permuted(table: &AssignmentTable, perm: &[usize]) -> AssignmentTable {
    let labels = table.labels().unwrap();
    AssignmentTable::new(
        table.probs().select_rows(perm),
        Some(perm.iter().map(|&i| labels[i]).collect()),
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn heap_parent_inverts_children(i in 0usize..100_000) {
        let (l, r) = taxonomy::children(i);
        prop_assert_eq!(taxonomy::parent(l), Some(i));
        prop_assert_eq!(taxonomy::parent(r), Some(i));
    }

    #[test]
    fn derived_nodes_stay_valid(tree in arb_tree()) {
        for a in tree.alphas() {
            prop_assert!(a > 0.0 && a < 1.0);
        }
        let nodes = tree.derive_all_node_params();
        prop_assert_eq!(nodes.len(), (1 << (tree.depth() + 1)) - 1);
        for n in &nodes {
            for &lv in &n.log_var {
                prop_assert!(lv.is_finite() && lv.exp() > 0.0);
            }
        }
        // leaves are stored verbatim
        let first = taxonomy::first_leaf(tree.depth());
        for (k, n) in nodes[first..].iter().enumerate() {
            prop_assert_eq!(&n.mean[..], tree.leaf_means.row(k));
        }
    }

    #[test]
    fn posterior_normalizes_even_far_from_the_prior(tree in arb_tree(), scale in 0.0..1000.0f64, dir in -1.0..1.0f64) {
        let nodes = tree.derive_all_node_params();
        let z: Vec<f64> = (0..tree.latent_dim()).map(|k| scale * if k % 2 == 0 { dir } else { -dir }).collect();
        let post = cluster_posterior(&z, &nodes, &tree.uniform_prior());
        prop_assert!(post.probs.iter().all(|&p| p >= 0.0));
        prop_assert!((post.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_equal_arguments(q in arb_node(3), p in arb_node(3)) {
        prop_assert!(kl_diag_gaussians(&q, &p) >= -1e-12);
        prop_assert!(kl_diag_gaussians(&q, &q).abs() < 1e-12);
    }

    #[test]
    fn tree_regularizers_have_their_sign(tree in arb_tree()) {
        prop_assert!(r_dkl(&tree, &LossConfig::default()) >= 0.0);
        prop_assert!(r_ent(&tree, 0.01).is_finite());
    }

    #[test]
    fn ntxent_ignores_row_scale(seed in 0u64..1000, k in 0usize..8, s in 0.1..10.0f64) {
        let mut proj = taxonnet::objective::gaussian_noise(8, 4, seed);
        let base = ntxent(&proj, 0.5).unwrap();
        for v in proj.row_mut(k) {
            *v *= s;
        }
        prop_assert!((ntxent(&proj, 0.5).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn classify_rows_sum_to_one((train, _) in arb_table(), seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.random_range(1..10);
        let rows = common::random_soft_rows(&mut rng, n, train.node_count());
        let test = AssignmentTable::new(common::to_tensor(&rows), None).unwrap();
        let ann = build_annotation_matrix(&train).unwrap();
        let pred = classify(&test, &ann).unwrap();
        for r in 0..pred.rows() {
            prop_assert!((pred.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn purities_lie_in_the_unit_interval((table, depth) in arb_table(), budget in 0usize..40) {
        let dp = prob_dendrogram_purity(&table, budget, 3).unwrap();
        let lp = prob_leaf_purity(&table, depth).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&dp));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&lp));
    }

    #[test]
    fn metrics_ignore_sample_order((table, depth) in arb_table(), seed in 0u64..1000, budget in 0usize..40) {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..table.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = permuted(&table, &perm);
        let a = prob_dendrogram_purity(&table, budget, 9).unwrap();
        let b = prob_dendrogram_purity(&shuffled, budget, 9).unwrap();
        prop_assert!((a - b).abs() < 1e-12, "dp {} vs {}", a, b);
        let a = prob_leaf_purity(&table, depth).unwrap();
        let b = prob_leaf_purity(&shuffled, depth).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn checkpoints_round_trip(tree in arb_tree(), seed in 0u64..1000) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tree.json");
        tree.save(&path).unwrap();
        prop_assert_eq!(TaxonomyTree::load(&path).unwrap(), tree.clone());

        let spec = ModelSpec {
            input_shape: [1, 1, 3],
            latent_dim: tree.latent_dim(),
            architecture: Architecture::Mlp,
            hidden: vec![4],
            likelihood: Likelihood::GaussianUnitVariance,
            projection_nodes: 0,
        };
        let model = Model::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let path = dir.path().join("model.json");
        model.save(&path).unwrap();
        prop_assert_eq!(Model::load(&path).unwrap(), model);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn elbo_kl_terms_are_nonnegative(tree in arb_tree(), seed in 0u64..1000) {
        let spec = ModelSpec {
            input_shape: [1, 1, 4],
            latent_dim: tree.latent_dim(),
            architecture: Architecture::Mlp,
            hidden: vec![6],
            likelihood: Likelihood::GaussianUnitVariance,
            projection_nodes: 0,
        };
        let model = Model::new(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let x = taxonnet::objective::gaussian_noise(5, 4, seed + 1);
        let t = elbo_terms(&x, &model, &tree, seed).unwrap();
        prop_assert!(t.kl_cluster >= 0.0);
        prop_assert!(t.kl_assign >= -1e-12);
    }
}
