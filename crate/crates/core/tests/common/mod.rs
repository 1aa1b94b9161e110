//! Fixtures and independent oracles shared by the integration tests.
#![allow(dead_code)]

use efftt::data::{gen_synthetic, normalize_dense, Dataset, DatasetSpec, Sample};
use efftt::lookup::IndexBag;
use efftt::model::{DlrmModel, LossKind, MiniBatch, ModelConfig};
use efftt::reorder::IndexGraph;
use efftt::tt::{DenseTable, TtShape, TtTable};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// d in {2, 3}, padded row count at most 512, n_k <= 3, ranks <= `max_rank`.
pub fn random_shape(r: &mut ChaCha8Rng, max_rank: usize) -> TtShape {
    let d = r.random_range(2..=3);
    let max_m = if d == 3 { 8 } else { 22 };
    let m: Vec<usize> = (0..d).map(|_| r.random_range(1..=max_m)).collect();
    let n: Vec<usize> = (0..d).map(|_| r.random_range(1..=3)).collect();
    let mut ranks = vec![1];
    ranks.extend((1..d).map(|_| r.random_range(1..=max_rank)));
    ranks.push(1);
    TtShape::new(m, n, ranks).expect("valid random shape")
}

pub fn random_table(seed: u64) -> TtTable<f64> {
    let mut r = rng(seed);
    let shape = random_shape(&mut r, 8);
    TtTable::init_random(shape, seed, 1.0).unwrap()
}

pub fn random_batch(r: &mut ChaCha8Rng, rows: usize, bags: usize, max_bag: usize) -> Vec<IndexBag> {
    (0..bags)
        .map(|_| {
            let len = r.random_range(1..=max_bag);
            IndexBag::new((0..len).map(|_| r.random_range(0..rows)).collect()).unwrap()
        })
        .collect()
}

/// Sum pooling straight from a materialized table.
pub fn dense_pooled(dense: &DenseTable<f64>, batch: &[IndexBag]) -> Vec<f64> {
    let cols = dense.cols();
    let mut out = Vec::with_capacity(batch.len() * cols);
    for bag in batch {
        let mut acc = vec![0.0; cols];
        for &i in bag.indices() {
            for (a, v) in acc.iter_mut().zip(dense.row(i)) {
                *a += v;
            }
        }
        out.extend(acc);
    }
    out
}

/// Largest `|a - b| / max(1, |b|)`.
pub fn max_scaled_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / y.abs().max(1.0)).fold(0.0, f64::max)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// A tiny all-TT model and a matching batch. Row and column factors stay
/// at most 3 and ranks at most 4.
pub fn tiny_case(seed: u64) -> (DlrmModel<f64>, MiniBatch<f64>) {
    let mut r = rng(seed);
    let d = r.random_range(2..=3);
    let n_dense = r.random_range(1..=3);
    let fields = r.random_range(1..=2);
    let max_rows = if d == 3 { 27 } else { 9 };
    let rows: Vec<usize> = (0..fields).map(|_| r.random_range(4..=max_rows)).collect();
    let embed_dim = if d == 3 { [4, 6, 8][r.random_range(0..3)] } else { [4, 6, 9][r.random_range(0..3)] };
    let config = ModelConfig {
        n_dense,
        rows_per_field: rows.clone(),
        embed_dim,
        bottom_hidden: vec![r.random_range(2..=4)],
        top_hidden: vec![r.random_range(2..=4)],
        tt_cores: d,
        tt_rank: r.random_range(1..=4),
        tt_min_rows: 1,
        loss: if seed.is_multiple_of(2) { LossKind::Bce } else { LossKind::Mse },
        seed,
        init_std: 0.5,
    };
    let samples: Vec<Sample> = (0..r.random_range(2..=5))
        .map(|_| Sample {
            label: r.random_range(0..2) as f64,
            dense: (0..n_dense).map(|_| r.random_range(-1.0..1.0)).collect(),
            sparse: rows
                .iter()
                .map(|&n| (0..r.random_range(1..=3)).map(|_| r.random_range(0..n)).collect())
                .collect(),
        })
        .collect();
    let ds = Dataset { n_dense, rows_per_field: rows, samples };
    let ids: Vec<usize> = (0..ds.len()).collect();
    let mut model = DlrmModel::new(config).unwrap();
    // zero biases can park every unit exactly on a ReLU kink
    for p in model.params_mut() {
        *p += r.random_range(-0.1..0.1);
    }
    (model, MiniBatch::from_dataset(&ds, &ids).unwrap())
}

/// Worst relative error between analytic gradients and central differences
/// over every parameter; the denominator is floored at 1e-3.
pub fn gradcheck(model: &DlrmModel<f64>, batch: &MiniBatch<f64>) -> f64 {
    let mut m = model.clone();
    let (_, grads, _) = m.loss_and_grads(batch, true).unwrap();
    let analytic = m.flatten_grads(&grads);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (p, &an) in analytic.iter().enumerate() {
        let orig = *m.params_mut()[p];
        *m.params_mut()[p] = orig + h;
        let lp = m.loss_and_grads(batch, false).unwrap().0.loss;
        *m.params_mut()[p] = orig - h;
        let lm = m.loss_and_grads(batch, false).unwrap().0.loss;
        *m.params_mut()[p] = orig;
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-3));
    }
    worst
}

pub fn flat_params(model: &DlrmModel<f64>) -> Vec<f64> {
    model.clone().params_mut().into_iter().map(|p| *p).collect()
}

/// A small normalized dataset with one TT field and two host-resident dense
/// fields; the 30-row field makes consecutive batches share rows.
pub fn pipeline_fixture(seed: u64) -> (DlrmModel<f64>, Dataset) {
    let spec = DatasetSpec {
        n_samples: 2000,
        n_dense: 3,
        n_sparse: 3,
        rows_per_field: vec![1500, 200, 30],
        zipf_s: 1.05,
        attack_fraction: 0.2,
        seed,
        clusters: 0,
    };
    let (ds, _) = normalize_dense(&gen_synthetic(&spec).unwrap());
    let mut c = ModelConfig::new(3, spec.rows_per_field.clone());
    c.embed_dim = 4;
    c.tt_rank = 4;
    c.seed = seed;
    (DlrmModel::new(c).unwrap(), ds)
}

/// Two equal blocks with dense intra-block and sparse inter-block edges.
/// Returns the graph and the planted block of each node.
pub fn planted_two_block(seed: u64, n: usize, p_in: f64, p_out: f64) -> (IndexGraph, Vec<usize>) {
    let mut r = rng(seed);
    let block: Vec<usize> = (0..n).map(|v| usize::from(v >= n / 2)).collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if block[u] == block[v] { p_in } else { p_out };
            if r.random_bool(p) {
                edges.push((u, v, 1));
            }
        }
    }
    (IndexGraph::from_edges(0, n, edges).unwrap(), block)
}

/// Maximum modularity over all set partitions, by restricted growth strings.
pub fn exhaustive_best_partition(graph: &IndexGraph) -> (Vec<usize>, f64) {
    let n = graph.nodes;
    let mut labels = vec![0usize; n];
    let mut best = (labels.clone(), f64::NEG_INFINITY);
    loop {
        let q = efftt::reorder::modularity(graph, &labels).unwrap();
        if q > best.1 + 1e-12 {
            best = (labels.clone(), q);
        }
        // next restricted growth string
        let mut i = n;
        loop {
            if i <= 1 {
                return best;
            }
            i -= 1;
            let cap = labels[..i].iter().max().copied().unwrap_or(0) + 1;
            if labels[i] < cap {
                labels[i] += 1;
                for l in &mut labels[i + 1..] {
                    *l = 0;
                }
                break;
            }
        }
    }
}

/// Equal as set partitions, ignoring label names.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    a.len() == b.len()
        && (0..a.len()).all(|u| (u + 1..a.len()).all(|v| (a[u] == a[v]) == (b[u] == b[v])))
}
