mod common;

use common::{exhaustive_best_partition, planted_two_block, rng, same_partition};
use efftt::backward::{unique_aggregate, EmbGradBatch};
use efftt::data::ZipfSampler;
use efftt::model::sgd_rows;
use efftt::reorder::{
    apply_bijection, count_frequencies, detect_communities, hot_threshold, learn_bijection, modularity,
    IndexBijection,
};
use efftt::tt::DenseTable;
use proptest::prelude::*;
use rand::Rng;

fn zipf_batches(seed: u64, rows: usize, batches: usize, len: usize) -> Vec<Vec<usize>> {
    let z = ZipfSampler::new(rows, 1.05).unwrap();
    let mut r = rng(seed);
    (0..batches).map(|_| (0..len).map(|_| z.sample(&mut r)).collect()).collect()
}

#[test]
fn greedy_finds_the_exhaustive_optimum_on_planted_graphs() {
    for (seed, n) in [(1, 6), (2, 8), (3, 8), (4, 10), (5, 10), (6, 10)] {
        let (g, planted) = planted_two_block(seed, n, 0.9, 0.05);
        let (best, q_best) = exhaustive_best_partition(&g);
        let greedy = detect_communities(&g);
        assert!(same_partition(&best, &planted), "seed {seed}: optimum is not the planted split");
        assert!(same_partition(&greedy.community_of, &best), "seed {seed}: greedy missed the optimum");
        assert!((greedy.q - q_best).abs() < 1e-12);
    }
}

#[test]
fn greedy_recovers_planted_blocks_up_to_forty_nodes() {
    for n in [12, 20, 30, 40] {
        for seed in 0..5 {
            let (g, planted) = planted_two_block(100 * n as u64 + seed, n, 0.8, 0.02);
            let a = detect_communities(&g);
            assert!(same_partition(&a.community_of, &planted), "n={n} seed={seed}: {:?}", a.community_of);
        }
    }
}

#[test]
fn relabeled_training_is_equivalent() {
    let rows = 300;
    let cols = 4;
    let batches = zipf_batches(9, rows, 40, 16);
    let r = learn_bijection(&batches, rows, 0.05).unwrap();
    let fwd = &r.bijection.forward;
    let relabeled = apply_bijection(&r.bijection, &batches).unwrap();

    let init = DenseTable::<f64>::init_random(rows, cols, 3, 0.1).unwrap();
    let mut permuted = DenseTable::<f64>::zeros(rows, cols);
    for (i, &f) in fwd.iter().enumerate() {
        permuted.row_mut(f).copy_from_slice(init.row(i));
    }

    // loss per occurrence: 0.5 * |row - target(position)|^2
    let train = |table: &mut DenseTable<f64>, batches: &[Vec<usize>]| {
        for b in batches {
            let mut grads = Vec::with_capacity(b.len() * cols);
            for (p, &i) in b.iter().enumerate() {
                for j in 0..cols {
                    grads.push(table.row(i)[j] - (p * cols + j) as f64 * 0.01);
                }
            }
            let agg = unique_aggregate(&EmbGradBatch::new(b.clone(), grads, cols).unwrap()).unwrap();
            sgd_rows(table, &agg, 0.1).unwrap();
        }
    };
    let mut a = init.clone();
    train(&mut a, &batches);
    let mut b = permuted;
    train(&mut b, &relabeled);
    for (i, &f) in fwd.iter().enumerate() {
        assert_eq!(a.row(i), b.row(f), "row {i}");
    }
}

#[test]
fn reordering_reduces_prefixes_on_clustered_batches() {
    // clusters of 8 ids scattered over the table, each batch drawing from one
    let rows = 4096;
    let mut r = rng(11);
    let clusters: Vec<Vec<usize>> = (0..32).map(|_| (0..8).map(|_| r.random_range(0..rows)).collect()).collect();
    let batches: Vec<Vec<usize>> = (0..400)
        .map(|k| {
            let c = &clusters[k % clusters.len()];
            (0..12).map(|_| c[r.random_range(0..c.len())]).collect()
        })
        .collect();
    let shape = efftt::tt::TtShape::with_rank(vec![16, 16, 16], vec![2, 2, 2], 4).unwrap();
    let before = efftt::reorder::mean_distinct_prefixes(&batches, &shape).unwrap();
    let res = learn_bijection(&batches, rows, 0.01).unwrap();
    let after = efftt::reorder::mean_distinct_prefixes(&apply_bijection(&res.bijection, &batches).unwrap(), &shape).unwrap();
    assert!(after < before, "{before} -> {after}");
    assert!(res.clusters() >= 16);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn bijection_is_a_permutation_fixing_hot_rows(seed in any::<u64>(), ratio in 0.01f64..0.3) {
        let rows = 200;
        let batches = zipf_batches(seed, rows, 30, 10);
        let res = learn_bijection(&batches, rows, ratio).unwrap();
        let b = &res.bijection;
        let mut sorted = b.forward.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, (0..rows).collect::<Vec<_>>());
        for (old, &new) in b.forward.iter().enumerate() {
            prop_assert_eq!(b.inverse[new], old);
        }
        let freq = count_frequencies(&batches, rows).unwrap();
        let threshold = hot_threshold(rows, ratio).unwrap();
        prop_assert_eq!(res.threshold, threshold);
        for rank in 0..threshold {
            let i = freq.index_at[rank];
            prop_assert_eq!(b.forward[i], i);
        }
        let back = IndexBijection::from_text(&b.to_text()).unwrap();
        prop_assert_eq!(&back, b);
    }

    #[test]
    fn greedy_modularity_is_consistent(seed in any::<u64>(), n in 4usize..30) {
        let (g, _) = planted_two_block(seed, n, 0.5, 0.1);
        prop_assume!(g.m_total > 0);
        let a = detect_communities(&g);
        let q = modularity(&g, &a.community_of).unwrap();
        prop_assert!((q - a.q).abs() < 1e-12);
        prop_assert!(q >= modularity(&g, &vec![0; n]).unwrap() - 1e-12);
        prop_assert!(q <= 1.0);
        // ids are dense and ordered by smallest member
        let firsts: Vec<usize> = a.members().iter().map(|m| m[0]).collect();
        prop_assert!(firsts.windows(2).all(|w| w[0] < w[1]));
    }
}
