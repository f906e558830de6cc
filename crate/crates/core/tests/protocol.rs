use std::collections::BTreeSet;
use std::path::PathBuf;

use proptest::prelude::*;
use rand::Rng;

use fedgnn::data::{
    build_local_graphs, load_ratings, low_rank_matrix, split_dataset, synth_low_rank,
    DatasetFormat, LocalGraph,
};
use fedgnn::model::{gnn_forward, init_params, GnnVariant};
use fedgnn::rng::stream;
use fedgnn::server::{train, Simulator, TrainConfig};

fn ml100k_path() -> PathBuf {
    std::env::var_os("FEDGNN_ML100K").map(PathBuf::from).unwrap_or_else(|| {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k/u.data")
    })
}

#[test]
fn ml100k_loads_splits_and_builds_graphs() {
    let path = ml100k_path();
    let ds = load_ratings(&path, DatasetFormat::Ml100k)
        .unwrap_or_else(|e| panic!("{}: {e} (see README for fetching ML-100K)", path.display()));
    assert_eq!((ds.user_count, ds.item_count, ds.len()), (943, 1682, 100_000));
    for seed in [0, 1, 2] {
        let (tr, va, te) = split_dataset(&ds, 0.8, 0.1, seed).unwrap();
        assert_eq!(tr.len() + va.len() + te.len(), 100_000);
        let users: BTreeSet<usize> = tr.ratings.iter().map(|r| r.user).collect();
        assert_eq!(users.len(), 943);
        assert_eq!(build_local_graphs(&tr).unwrap().len(), 943);
    }
}

/// Rank by Gaussian elimination with partial pivoting.
fn numerical_rank(mut m: Vec<Vec<f64>>, tol: f64) -> usize {
    let (rows, cols) = (m.len(), m[0].len());
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows)
            .max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))
            .unwrap();
        if m[pivot][c].abs() <= tol {
            continue;
        }
        m.swap(rank, pivot);
        for r in rank + 1..rows {
            let f = m[r][c] / m[rank][c];
            for k in c..cols {
                m[r][k] -= f * m[rank][k];
            }
        }
        rank += 1;
    }
    rank
}

#[test]
fn noiseless_synthetic_matrix_has_the_requested_rank() {
    for rank in [1, 2, 4] {
        let m = low_rank_matrix(40, 30, rank, 0.0, &mut stream(rank as u64, &[]));
        assert_eq!(numerical_rank(m, 1e-8), rank);
    }
    let noisy = low_rank_matrix(40, 30, 4, 0.05, &mut stream(1, &[]));
    assert_eq!(numerical_rank(noisy, 1e-8), 30);
}

fn random_graph(rng: &mut impl Rng, items: usize, dim: usize) -> LocalGraph {
    let k = rng.random_range(1..=6);
    let mut ids = BTreeSet::new();
    while ids.len() < k {
        ids.insert(rng.random_range(0..items));
    }
    let mut g = LocalGraph::new(0, ids.into_iter().map(|i| (i, rng.random())).collect());
    g.neighbor_users = (0..rng.random_range(0..3))
        .map(|_| (0..dim).map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect();
    g
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn forward_is_permutation_equivariant(seed in 0u64..10_000, variant in 0usize..3, rot in 1usize..6) {
        let variant = GnnVariant::ALL[variant];
        let dim = 5;
        let params = init_params(2, 15, dim, variant, seed).unwrap();
        let mut rng = stream(seed, &[]);
        let graph = random_graph(&mut rng, 15, dim);
        let mut permuted = graph.clone();
        let k = permuted.interacted_items.len();
        permuted.interacted_items.rotate_left(rot % k);

        let a = gnn_forward(&params, &graph, false, 0.0, &mut stream(0, &[])).unwrap();
        let b = gnn_forward(&params, &permuted, false, 0.0, &mut stream(0, &[])).unwrap();
        for (x, y) in a.h_user.iter().zip(&b.h_user) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        for j in 0..k {
            prop_assert_eq!(&a.h_items[(j + rot % k) % k], &b.h_items[j]);
        }
    }
}

fn small_config() -> TrainConfig {
    TrainConfig {
        round_size: 6,
        epochs: 3,
        epoch_threshold: 1,
        dim: 8,
        pseudo_items: 4,
        neighbor_cap: 5,
        learning_rate: 0.1,
        ..TrainConfig::default()
    }
}

#[test]
fn serial_and_concurrent_clients_agree() {
    let ds = synth_low_rank(40, 30, 3, 0.3, 0.05, 4).unwrap();
    let serial = TrainConfig {
        threads: Some(1),
        ..small_config()
    };
    let parallel = TrainConfig {
        threads: Some(4),
        ..small_config()
    };
    let a = train(&serial, &ds, Some(&ds)).unwrap();
    let b = train(&parallel, &ds, Some(&ds)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    assert_eq!(a.graphs, b.graphs);
}

#[test]
fn fixed_seed_runs_are_bit_identical() {
    let ds = synth_low_rank(40, 30, 3, 0.3, 0.05, 4).unwrap();
    let a = train(&small_config(), &ds, Some(&ds)).unwrap();
    let b = train(&small_config(), &ds, Some(&ds)).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.params, b.params);
    let other = TrainConfig {
        seed: 1,
        ..small_config()
    };
    assert_ne!(train(&other, &ds, None).unwrap().params, a.params);
}

#[test]
fn neighbor_snapshots_stay_fixed_after_expansion() {
    let ds = synth_low_rank(40, 30, 3, 0.3, 0.05, 6).unwrap();
    let mut sim = Simulator::new(small_config(), &ds).unwrap();
    while !sim.has_expanded() {
        sim.step().unwrap();
    }
    let snapshot = sim.graphs();
    assert!(snapshot.values().any(|g| !g.neighbor_users.is_empty()));
    let users_before = sim.params().user_embeddings.clone();
    while sim.round() < sim.total_rounds() {
        sim.step().unwrap();
    }
    assert_ne!(sim.params().user_embeddings, users_before);
    for (u, g) in sim.graphs() {
        assert_eq!(g.neighbor_users, snapshot[&u].neighbor_users);
        assert!(g.neighbor_users.len() <= 5);
    }
}

#[test]
fn training_reduces_loss_without_privacy() {
    let ds = synth_low_rank(60, 40, 2, 0.5, 0.0, 2).unwrap();
    let (tr, va, _) = split_dataset(&ds, 0.8, 0.1, 2).unwrap();
    let config = TrainConfig {
        round_size: 1,
        epochs: 20,
        dim: 8,
        pseudo_items: 0,
        ldp: fedgnn::privacy::LdpConfig::disabled(),
        dropout: 0.0,
        expansion: false,
        learning_rate: 0.5,
        ..TrainConfig::default()
    };
    let out = train(&config, &tr, Some(&va)).unwrap();
    let losses: Vec<f64> = out.history.rounds.iter().map(|r| r.train_loss).collect();
    let n = losses.len() / 10;
    let head = losses[..n].iter().sum::<f64>() / n as f64;
    let tail = losses[losses.len() - n..].iter().sum::<f64>() / n as f64;
    assert!(tail < 0.5 * head, "head {head}, tail {tail}");
    assert!(out.params.is_finite());
}
