use ccp::ccp::{cluster_step, select_neighborhood};
use ccp::graph::{build_random_isomorphic, DEGREE_EPS};
use ccp::optim::{AdamConfig, AdamState};
use ccp::train::{evaluate_indices, train_step};
use ccp::{
    build_network, evaluate, gen_grid_shapes, train, CcpError, Checkpoint, GraphDataset, LayerSpec, Network,
    NetworkConfig, Tape, TrainMode, TrainOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config(seed: u64) -> NetworkConfig {
    let mut cfg = NetworkConfig::new(
        vec![LayerSpec::new(16, 8, 8), LayerSpec::new(4, 8, 4), LayerSpec::new(1, 8, 4)],
        16,
        4,
    );
    cfg.learning_rate = 1e-2;
    cfg.dropout = 0.2;
    cfg.seed = seed;
    cfg
}

fn opts(epochs: usize) -> TrainOptions {
    TrainOptions {
        epochs,
        batch_size: 8,
        noise_injection: false,
    }
}

fn data() -> GraphDataset {
    gen_grid_shapes(8, 12, 3).unwrap()
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let ds = data();
    let mut cfg = small_config(1);
    cfg.learning_rate = 0.0;
    let ckpt = train(&cfg, &opts(2), &ds.graph, &ds).unwrap();
    let fresh = build_network(&cfg, &ds.graph, 1).unwrap();
    assert_eq!(ckpt.network.params(), fresh.params());
}

#[test]
fn frozen_memberships_stay_bit_identical() {
    let ds = data();
    let mut cfg = small_config(2);
    cfg.mode = TrainMode::TaskOnlyFrozenU;
    let ckpt = train(&cfg, &opts(3), &ds.graph, &ds).unwrap();
    let fresh = build_network(&cfg, &ds.graph, 1).unwrap();
    for (trained, init) in ckpt.network.layers.iter().zip(&fresh.layers) {
        let bits = |t: &ccp::Tensor| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&trained.u), bits(&init.u));
        assert_ne!(trained.w, init.w);
    }
}

/// Pooled neighborhoods of every cluster at every level.
fn selection(net: &Network) -> Vec<Vec<usize>> {
    let mut a = net.graph.weights().clone();
    let mut out = Vec::new();
    for layer in &net.layers {
        let res = cluster_step(&a, layer, DEGREE_EPS).unwrap();
        for c in 0..layer.k_out {
            out.push(select_neighborhood(&a, &res.k, c, layer.l).unwrap().members);
        }
        a = res.a_norm;
    }
    out
}

/// Total loss and selection after each of ten steps on one fixed desk batch.
fn fixed_batch_trace(mode: TrainMode, seed: u64) -> Vec<(f64, Vec<Vec<usize>>)> {
    let ds = gen_grid_shapes(16, 200, 0).unwrap();
    let batch: Vec<usize> = ds.train[..16].to_vec();
    let (x, labels) = ds.batch(&batch);
    let mut cfg = NetworkConfig::desk_grid();
    cfg.learning_rate = 1e-3;
    cfg.dropout = 0.0;
    cfg.mode = mode;
    cfg.seed = seed;
    let mut net = build_network(&cfg, &ds.graph, 1).unwrap();
    let sizes: Vec<usize> = net.params().iter().map(|t| t.len()).collect();
    let mut adam = AdamState::new(AdamConfig { lr: 1e-3, ..AdamConfig::default() }, &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = |net: &Network| {
        let mut tape = Tape::new();
        let rec = net.record(&mut tape, &x, &labels, None).unwrap();
        (tape.scalar(rec.total), selection(net))
    };
    let mut trace = vec![probe(&net)];
    for _ in 0..10 {
        train_step(&mut net, &mut adam, &ds, &batch, &mut rng, false).unwrap();
        trace.push(probe(&net));
    }
    trace
}

#[test]
fn loss_on_a_fixed_batch_decreases_with_fixed_selection() {
    let monotone = (0..5)
        .filter(|&seed| {
            let trace = fixed_batch_trace(TrainMode::TaskOnlyFrozenU, seed);
            trace.windows(2).all(|w| w[1].0 <= w[0].0)
        })
        .count();
    assert!(monotone >= 4, "monotone in {} of 5 seeds", monotone);
}

/// Selection is piecewise constant in U, so with trainable memberships the
/// loss may jump up, but only on a step that re-pooled some neighborhood.
#[test]
fn loss_rises_only_when_the_selection_changes() {
    for seed in 0..3 {
        let trace = fixed_batch_trace(TrainMode::Joint, seed);
        for (step, w) in trace.windows(2).enumerate() {
            if w[1].0 > w[0].0 {
                assert_ne!(w[1].1, w[0].1, "seed {} step {}: loss rose with the selection unchanged", seed, step + 1);
            }
        }
    }
}

#[test]
fn untrained_accuracy_is_near_chance() {
    let ds = gen_grid_shapes(8, 50, 4).unwrap();
    let mean: f64 = (0..5)
        .map(|seed| {
            let net = build_network(&small_config(seed), &ds.graph, 1).unwrap();
            evaluate_indices(&net, &ds, &ds.test).unwrap().accuracy
        })
        .sum::<f64>()
        / 5.0;
    assert!((mean - 0.25).abs() <= 0.15, "untrained accuracy {}", mean);
}

#[test]
fn single_sample_is_memorised() {
    let mut ds = data();
    ds.train = vec![ds.train[0]];
    let mut cfg = small_config(5);
    cfg.dropout = 0.0;
    let ckpt = train(&cfg, &opts(60), &ds.graph, &ds).unwrap();
    let report = evaluate_indices(&ckpt.network, &ds, &ds.train).unwrap();
    assert_eq!(report.accuracy, 1.0);
    assert_eq!(ckpt.history.last().unwrap().train_acc, 1.0);
}

#[test]
fn evaluation_survives_save_and_load() {
    let ds = data();
    let ckpt = train(&small_config(6), &opts(4), &ds.graph, &ds).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ckpt.save(dir.path()).unwrap();
    let back = Checkpoint::load(dir.path()).unwrap();
    assert_eq!(evaluate(&back, &ds).unwrap(), evaluate(&ckpt, &ds).unwrap());
}

#[test]
fn joint_training_raises_the_cluster_objective_over_task_only() {
    let ds = data();
    for seed in 0..5 {
        let final_lk = |mode: TrainMode| {
            let mut cfg = small_config(seed);
            cfg.mode = mode;
            train(&cfg, &opts(10), &ds.graph, &ds).unwrap().history.last().unwrap().lk
        };
        let (joint, task) = (final_lk(TrainMode::Joint), final_lk(TrainMode::TaskOnly));
        assert!(joint >= task, "seed {}: joint {} task-only {}", seed, joint, task);
    }
}

#[test]
fn non_finite_input_reports_divergence_with_the_op() {
    let mut ds = data();
    let first = ds.train[0];
    ds.samples[first].signal.values.data_mut().fill(f64::NAN);
    let err = train(&small_config(7), &opts(1), &ds.graph, &ds).unwrap_err();
    match err {
        CcpError::Divergence { name } => {
            assert!(name.contains("output") || name.contains("gradient"), "{}", name);
            assert!(name.contains("epoch 1"), "{}", name);
        }
        other => panic!("expected divergence, got {}", other),
    }
}

#[test]
fn mismatched_graphs_are_rejected() {
    let ds = data();
    let other = gen_grid_shapes(9, 2, 0).unwrap();
    let err = train(&small_config(8), &opts(1), &other.graph, &ds).unwrap_err();
    assert!(matches!(err, CcpError::Graph(_)), "{}", err);

    let ckpt = train(&small_config(8), &opts(1), &ds.graph, &ds).unwrap();
    let shuffled = ds.with_graph(build_random_isomorphic(&ds.graph, 1).unwrap()).unwrap();
    assert!(matches!(evaluate(&ckpt, &shuffled), Err(CcpError::Graph(_))));
}
