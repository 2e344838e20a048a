use ccp::datasets::{gen_grid_shapes, gen_skeleton_motion};
use ccp::{train, GraphDataset, LayerSpec, NetworkConfig, TrainOptions};
use nalgebra::DMatrix;

fn features(ds: &GraphDataset, i: usize) -> Vec<f64> {
    let mut v = ds.samples[i].signal.values.data().to_vec();
    v.push(1.0);
    v
}

fn argmax(xs: impl Iterator<Item = f64>) -> usize {
    xs.enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0
}

/// One-vs-all ridge regression on raw node values, solved by Cholesky.
fn least_squares_accuracy(ds: &GraphDataset) -> f64 {
    let d = features(ds, 0).len();
    let x = DMatrix::from_fn(ds.train.len(), d, |r, j| features(ds, ds.train[r])[j]);
    let y = DMatrix::from_fn(ds.train.len(), ds.classes(), |r, c| {
        if ds.samples[ds.train[r]].label == c {
            1.0
        } else {
            0.0
        }
    });
    let gram = x.transpose() * &x + DMatrix::identity(d, d) * 1e-3;
    let w = gram.cholesky().expect("ridge system is positive definite").solve(&(x.transpose() * y));
    let hits = ds
        .test
        .iter()
        .filter(|&&i| {
            let scores = DMatrix::from_row_slice(1, d, &features(ds, i)) * &w;
            argmax(scores.row(0).iter().copied()) == ds.samples[i].label
        })
        .count();
    hits as f64 / ds.test.len() as f64
}

/// Majority vote of the `k` nearest training signals; ties go to the lower class.
fn knn_accuracy(ds: &GraphDataset, k: usize) -> f64 {
    let hits = ds
        .test
        .iter()
        .filter(|&&i| {
            let a = ds.samples[i].signal.values.data();
            let mut near: Vec<(f64, usize)> = ds
                .train
                .iter()
                .map(|&j| {
                    let b = ds.samples[j].signal.values.data();
                    let dist: f64 = a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum();
                    (dist, ds.samples[j].label)
                })
                .collect();
            near.sort_by(|p, q| p.0.total_cmp(&q.0));
            let mut votes = vec![0usize; ds.classes()];
            for &(_, label) in &near[..k] {
                votes[label] += 1;
            }
            let best = votes.iter().enumerate().max_by_key(|(c, v)| (**v, std::cmp::Reverse(*c))).unwrap().0;
            best == ds.samples[i].label
        })
        .count();
    hits as f64 / ds.test.len() as f64
}

fn final_test_acc(cfg: &NetworkConfig, opts: &TrainOptions, ds: &GraphDataset) -> f64 {
    train(cfg, opts, &ds.graph, ds).unwrap().history.last().unwrap().test_acc
}

#[test]
fn linear_classifier_on_pixels_is_beaten_by_cluster_pooling() {
    let ds = gen_grid_shapes(12, 100, 0).unwrap();
    let linear = least_squares_accuracy(&ds);
    assert!(linear < 1.0, "linear {}", linear);

    let mut cfg = NetworkConfig::new(
        vec![LayerSpec::new(36, 16, 8), LayerSpec::new(9, 32, 8), LayerSpec::new(1, 64, 9)],
        64,
        4,
    );
    cfg.learning_rate = 1e-2;
    cfg.dropout = 0.2;
    let opts = TrainOptions {
        epochs: 30,
        batch_size: 16,
        noise_injection: false,
    };
    let ccp = final_test_acc(&cfg, &opts, &ds);
    assert!(ccp > linear, "cluster pooling {} vs linear {}", ccp, linear);
}

#[test]
fn nearest_neighbor_on_motion_is_above_chance_and_below_cluster_pooling() {
    let seeds: Vec<u64> = (0..8).collect();
    let runs: Vec<(f64, f64)> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .iter()
            .map(|&seed| {
                scope.spawn(move || {
                    let ds = gen_skeleton_motion(5, 8, 100, seed).unwrap();
                    let mut cfg = NetworkConfig::new(vec![LayerSpec::new(20, 32, 4), LayerSpec::new(1, 64, 20)], 32, 3);
                    cfg.dropout = 0.2;
                    cfg.seed = seed;
                    let opts = TrainOptions {
                        epochs: 150,
                        batch_size: 16,
                        noise_injection: false,
                    };
                    (knn_accuracy(&ds, 5), final_test_acc(&cfg, &opts, &ds))
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let mean = |f: fn(&(f64, f64)) -> f64| runs.iter().map(f).sum::<f64>() / runs.len() as f64;
    let (knn, ccp) = (mean(|r| r.0), mean(|r| r.1));
    assert!(knn > 1.0 / 3.0 + 0.1, "knn {} vs chance", knn);
    assert!(ccp > knn, "cluster pooling {} vs knn {} per seed {:?}", ccp, knn, runs);
}
