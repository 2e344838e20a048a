use ccp::ccp::{record_cluster_step, record_normalize};
use ccp::gradcheck::{grad_check, grad_check_many, network_grad_check, GradCheckReport};
use ccp::network::{build_network, record_cluster_levels, Network};
use ccp::objectives::{record_cluster_loss, record_cross_entropy, record_objective_c, VOLUME_EPS};
use ccp::{AffinityGraph, LayerSpec, NetworkConfig, Tape, Tensor, TrainMode, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-5;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

fn weights(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in i + 1..n {
            let w = rng.random_range(0.1..1.5);
            a.set(i, j, w);
            a.set(j, i, w);
        }
    }
    a
}

fn assert_passes(what: &str, report: GradCheckReport) {
    assert!(report.passed, "{}: max rel err {:.3e}", what, report.max_rel_err);
}

/// Reduces any output to a scalar through fixed random weights so every
/// entry contributes a distinct gradient.
fn weighted_sum(tape: &mut Tape, x: Var) -> ccp::Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    let w = tape.constant(random(&shape, -1.0, 1.0, 99));
    let y = tape.mul(x, w)?;
    tape.sum_all(y)
}

#[test]
fn unary_ops() {
    let x = random(&[3, 4], -2.0, 2.0, 1);
    let pos = random(&[3, 4], 0.3, 2.0, 2);
    type Unary = fn(&mut Tape, Var) -> ccp::Result<Var>;
    let cases: [(&str, Unary, &Tensor); 9] = [
        ("sigmoid", |t, a| t.sigmoid(a), &x),
        ("elu", |t, a| t.elu(a), &x),
        ("exp", |t, a| t.exp(a), &x),
        ("log", |t, a| t.log(a), &pos),
        ("pow_neg_half", |t, a| t.pow_neg_half(a), &pos),
        ("row_softmax", |t, a| t.row_softmax(a), &x),
        ("row_log_softmax", |t, a| t.row_log_softmax(a), &x),
        ("transpose", |t, a| t.transpose(a), &x),
        ("sum_rows", |t, a| t.sum_rows(a), &x),
    ];
    for (name, op, at) in cases {
        let report = grad_check(|t, a| { let y = op(t, a)?; weighted_sum(t, y) }, at, STEP, TOL).unwrap();
        assert_passes(name, report);
    }
}

#[test]
fn clamp_passes_gradient_only_above_floor() {
    let x = Tensor::new(vec![4], vec![-1.0, 0.5, 2.0, -0.2]).unwrap();
    let report = grad_check(|t, a| { let y = t.clamp_min(a, 0.0)?; weighted_sum(t, y) }, &x, STEP, TOL).unwrap();
    assert_passes("clamp_min", report);
}

#[test]
fn structural_ops() {
    let sq = random(&[4, 4], -1.0, 1.0, 3);
    let tall = random(&[5, 3], -1.0, 1.0, 4);
    let report = grad_check(|t, a| { let y = t.zero_diagonal(a)?; weighted_sum(t, y) }, &sq, STEP, TOL).unwrap();
    assert_passes("zero_diagonal", report);
    let report = grad_check(|t, a| { let y = t.diagonal(a)?; weighted_sum(t, y) }, &sq, STEP, TOL).unwrap();
    assert_passes("diagonal", report);
    let report = grad_check(|t, a| { let y = t.tile_rows(a, 3)?; weighted_sum(t, y) }, &tall, STEP, TOL).unwrap();
    assert_passes("tile_rows", report);
    let report = grad_check(|t, a| { let y = t.gather_rows(a, vec![4, 0, 4, 2])?; weighted_sum(t, y) }, &tall, STEP, TOL).unwrap();
    assert_passes("gather_rows", report);
    let report = grad_check(
        |t, a| { let y = t.gather_elements(a, vec![14, 3, 3, 7])?; weighted_sum(t, y) },
        &tall,
        STEP,
        TOL,
    )
    .unwrap();
    assert_passes("gather_elements", report);
    let report = grad_check(|t, a| { let y = t.reshape(a, &[3, 5])?; weighted_sum(t, y) }, &tall, STEP, TOL).unwrap();
    assert_passes("reshape", report);
    let report = grad_check(|t, a| { let y = t.scale(a, -2.5)?; weighted_sum(t, y) }, &tall, STEP, TOL).unwrap();
    assert_passes("scale", report);
    let report = grad_check(|t, a| { let y = t.shift(a, 0.7)?; weighted_sum(t, y) }, &tall, STEP, TOL).unwrap();
    assert_passes("shift", report);
}

#[test]
fn binary_ops() {
    let a = random(&[3, 4], -1.0, 1.0, 5);
    let b = random(&[3, 4], 0.5, 1.5, 6);
    let m = random(&[4, 2], -1.0, 1.0, 7);
    let col = random(&[3, 1], -1.0, 1.0, 8);
    let row = random(&[1, 4], -1.0, 1.0, 9);
    let s = Tensor::scalar(0.8);
    type Binary = fn(&mut Tape, &[Var]) -> ccp::Result<Var>;
    let cases: [(&str, Binary, [&Tensor; 2]); 9] = [
        ("add", |t, v| t.add(v[0], v[1]), [&a, &b]),
        ("sub", |t, v| t.sub(v[0], v[1]), [&a, &b]),
        ("mul", |t, v| t.mul(v[0], v[1]), [&a, &b]),
        ("div", |t, v| t.div(v[0], v[1]), [&a, &b]),
        ("matmul", |t, v| t.matmul(v[0], v[1]), [&a, &m]),
        ("mul_column", |t, v| t.mul_column(v[0], v[1]), [&a, &col]),
        ("add_row", |t, v| t.add_row(v[0], v[1]), [&a, &row]),
        ("mul_scalar", |t, v| t.mul_scalar(v[0], v[1]), [&a, &s]),
        ("add_scalar", |t, v| t.add_scalar(v[0], v[1]), [&a, &s]),
    ];
    for (name, op, [x, y]) in cases {
        let at = [x.clone(), y.clone()];
        let report = grad_check_many(|t, v| { let y = op(t, v)?; weighted_sum(t, y) }, &at, STEP, TOL).unwrap();
        assert_passes(name, report);
    }
    let parts = [a.clone(), random(&[2, 4], -1.0, 1.0, 10)];
    let report = grad_check_many(|t, v| { let y = t.concat_rows(v)?; weighted_sum(t, y) }, &parts, STEP, TOL).unwrap();
    assert_passes("concat_rows", report);
}

#[test]
fn cross_entropy_gradient() {
    let logits = random(&[4, 3], -2.0, 2.0, 11);
    let report = grad_check(|t, z| record_cross_entropy(t, z, &[0, 2, 1, 2]), &logits, STEP, TOL).unwrap();
    assert_passes("cross_entropy", report);
}

#[test]
fn cluster_step_and_normalization_gradients() {
    for seed in 0..5 {
        let a = weights(6, seed);
        let u = random(&[6, 3], -2.0, 2.0, 100 + seed);
        let report = grad_check(
            |t, u| {
                let a = t.constant(a.clone());
                let cv = record_cluster_step(t, a, u, 1e-8)?;
                let k = weighted_sum(t, cv.k)?;
                let a_out = weighted_sum(t, cv.a_out)?;
                let a_norm = weighted_sum(t, cv.a_norm)?;
                let ka = t.add(k, a_out)?;
                t.add(ka, a_norm)
            },
            &u,
            STEP,
            TOL,
        )
        .unwrap();
        assert_passes("cluster step", report);
        let report = grad_check(|t, a| { let y = record_normalize(t, a, 1e-8)?; weighted_sum(t, y) }, &a, STEP, TOL).unwrap();
        assert_passes("normalize", report);
    }
}

#[test]
fn objective_gradient_in_both_arguments() {
    for seed in 0..5 {
        let a = weights(7, seed);
        let k = random(&[7, 3], -1.5, 1.5, 200 + seed).row_softmax();
        let report = grad_check_many(
            |t, v| record_objective_c(t, v[0], v[1], VOLUME_EPS),
            &[a, k],
            STEP,
            TOL,
        )
        .unwrap();
        assert_passes("objective", report);
    }
}

fn path_and_ring(n: usize) -> AffinityGraph {
    let mut edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
    edges.push((0, n - 1));
    edges.push((0, n / 2));
    edges.push((1, n - 2));
    AffinityGraph::from_edges(n, &edges).unwrap()
}

/// A small network with untied selection, so finite differences never
/// cross a reordering.
fn untied_network(mode: TrainMode, seed: u64) -> (Network, Tensor, Vec<usize>) {
    let graph = path_and_ring(10);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let mut cfg = NetworkConfig::new(vec![LayerSpec::new(4, 3, 3), LayerSpec::new(1, 3, 4)], 4, 3);
        cfg.mode = mode;
        cfg.seed = rng.random();
        let mut net = build_network(&cfg, &graph, 2).unwrap();
        for layer in &mut net.layers {
            layer.u.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-2.0..2.0));
            layer.b.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-0.2..0.2));
        }
        net.refresh_frozen().unwrap();
        if net.rank_margin().unwrap() < 1e-3 {
            continue;
        }
        let signals = Tensor::new(vec![20, 2], (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        return (net, signals, vec![0, 2]);
    }
}

/// With memberships frozen on the task path, the total-loss derivative in U
/// is not what the tape computes by design; that gradient is checked
/// separately below.
#[test]
fn network_gradients_in_every_mode() {
    for mode in TrainMode::ALL {
        for seed in 0..3 {
            let (net, signals, labels) = untied_network(mode, seed);
            let report = network_grad_check(&net, &signals, &labels, STEP, 1e-4).unwrap();
            let skip_u = mode == TrainMode::JointFrozenUFromTask;
            for (name, err) in net.param_names().iter().zip(&report.per_input) {
                if skip_u && name.ends_with(".U") {
                    continue;
                }
                assert!(*err < 1e-4, "{} seed {}: {} rel err {:.3e}", mode.name(), seed, name, err);
            }
        }
    }
}

#[test]
fn frozen_memberships_receive_no_gradient() {
    let (net, signals, labels) = untied_network(TrainMode::TaskOnlyFrozenU, 0);
    let mut tape = Tape::new();
    let rec = net.record(&mut tape, &signals, &labels, None).unwrap();
    for (name, v) in net.param_names().iter().zip(&rec.params) {
        assert_eq!(name.ends_with(".U"), v.is_none(), "{}", name);
    }
}

#[test]
fn memberships_learn_only_from_cluster_loss_when_task_path_is_frozen() {
    for seed in 0..3 {
        let (net, signals, labels) = untied_network(TrainMode::JointFrozenUFromTask, seed);
        let mut tape = Tape::new();
        let rec = net.record(&mut tape, &signals, &labels, None).unwrap();
        let grads = tape.backward(rec.total).unwrap();

        let mut reference = Tape::new();
        let us: Vec<Var> = net.layers.iter().map(|l| reference.param(l.u.clone())).collect();
        let graph = reference.constant(net.graph.weights().clone());
        let levels = record_cluster_levels(&mut reference, graph, &us).unwrap();
        let (lk, _) = record_cluster_loss(&mut reference, &levels, VOLUME_EPS).unwrap();
        let objective = reference.scale(lk, -net.config.lambda_k).unwrap();
        let expected = reference.backward(objective).unwrap();

        for (m, u) in us.iter().enumerate() {
            let got = grads.get(rec.params[5 * m].unwrap()).unwrap();
            let want = expected.get(*u).unwrap();
            assert!(got.max_abs_diff(want) < 1e-12, "layer {} seed {}", m + 1, seed);
        }
    }
}
