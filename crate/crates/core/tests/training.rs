//! Losses, ADAM and the training loop against scalar oracles and contract
//! checks.

mod support;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::adam_oracle;
use svsr::kspace::{make_training_pair, DegradeConfig, PairConfig};
use svsr::net::{NetworkConfig, NetworkWeights};
use svsr::phantom::{cardiac_spec, generate, CardiacOptions};
use svsr::train::{adam_step, loss_l1, loss_l2, train, LossKind, OptimizerState, TrainConfig, TrainOutputs, TrainingPair};
use svsr::Volume;

fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64]) {
    let h = 1e-6;
    let mut num = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += h;
        xm[i] -= h;
        num.push((f(&xp) - f(&xm)) / (2.0 * h));
    }
    let diff: f64 = grad.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = num.iter().map(|b| b * b).sum::<f64>().sqrt().max(1e-12);
    assert!(diff / norm < 1e-6, "relative error {}", diff / norm);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    for _ in 0..10 {
        let n = rng.random_range(2..40);
        let pred: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (_, g2) = loss_l2(&pred, &target).unwrap();
        fd_check(|p| loss_l2(p, &target).unwrap().0, &pred, &g2);
        // Random points are almost surely off the l1 kinks.
        let (_, g1) = loss_l1(&pred, &target).unwrap();
        fd_check(|p| loss_l1(p, &target).unwrap().0, &pred, &g1);
    }
}

#[test]
fn l1_subgradient_is_zero_at_ties() {
    let pred = [0.5, 0.2, -0.3];
    let target = [0.5, 0.0, -0.3];
    let (_, g) = loss_l1(&pred, &target).unwrap();
    assert_eq!(g[0], 0.0);
    assert_eq!(g[2], 0.0);
    // Away from the tie the derivative is the symmetric difference.
    let h = 1e-6;
    let f = |d: f64| loss_l1(&[0.2 + d], &[0.0]).unwrap().0;
    assert!(((f(h) - f(-h)) / (2.0 * h) - loss_l1(&[0.2], &[0.0]).unwrap().1[0]).abs() < 1e-6);
    // The symmetric difference at the tie is also zero.
    let t = |d: f64| loss_l1(&[0.5 + d], &[0.5]).unwrap().0;
    assert!(((t(h) - t(-h)) / (2.0 * h)).abs() < 1e-9);
}

#[test]
fn hand_computed_losses() {
    assert!((loss_l1(&[1.0, 3.0], &[0.0, 1.0]).unwrap().0 - 1.5).abs() < 1e-15);
    assert!((loss_l2(&[1.0, 3.0], &[0.0, 1.0]).unwrap().0 - 2.5).abs() < 1e-15);
    let (v, g) = loss_l2(&[0.3, 0.4], &[0.3, 0.4]).unwrap();
    assert_eq!(v, 0.0);
    assert!(g.iter().all(|&x| x == 0.0));
}

#[test]
fn losses_reject_mismatched_lengths() {
    assert!(loss_l1(&[1.0, 2.0], &[1.0]).is_err());
    assert!(loss_l2::<f64>(&[], &[]).is_err());
}

#[test]
fn adam_first_step_by_hand() {
    let mut p = [0.0f64];
    let mut s = OptimizerState::new(1);
    adam_step(&mut p, &[1.0], &mut s, 1e-3).unwrap();
    let expected = -1e-3 / (1.0 + 1e-8);
    assert!((p[0] - expected).abs() < 1e-15, "{}", p[0]);
    assert!((p[0] + 9.99999e-4).abs() < 1e-9);
}

#[test]
fn adam_matches_scalar_oracle_over_ten_steps() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for constant in [true, false] {
        let grads: Vec<f64> = (0..10)
            .map(|_| if constant { 0.7 } else { rng.random_range(-2.0..2.0) })
            .collect();
        let expected = adam_oracle(&grads, 1e-3);
        let mut p = [0.0f64];
        let mut s = OptimizerState::new(1);
        let mut prev = 0.0;
        for (g, want) in grads.iter().zip(&expected) {
            adam_step(&mut p, &[*g], &mut s, 1e-3).unwrap();
            assert!((p[0] - want).abs() < 1e-12, "{} vs {want}", p[0]);
            assert!(s.second_moment()[0] >= 0.0);
            assert!((p[0] - prev).abs() <= 10.0 * 1e-3);
            if constant {
                assert!(p[0] < prev, "constant positive gradient must move theta down");
            }
            prev = p[0];
        }
        assert_eq!(s.step_count(), 10);
    }
}

#[test]
fn adam_update_bound_and_nonnegative_second_moment() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let n = 64;
    let lr = 1e-2;
    let mut p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut s = OptimizerState::new(n);
    for _ in 0..50 {
        let scale = 10f64.powf(rng.random_range(-6.0..3.0));
        let g: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
        let before = p.clone();
        adam_step(&mut p, &g, &mut s, lr).unwrap();
        for (a, b) in p.iter().zip(&before) {
            assert!((a - b).abs() <= 10.0 * lr);
        }
        assert!(s.second_moment().iter().all(|&v| v >= 0.0));
    }
}

fn phantom_pairs(count: usize, dims: [usize; 3]) -> Vec<TrainingPair<f64>> {
    let opts = CardiacOptions {
        dims,
        spacing: [3.2 * 32.0 / dims[0] as f64, 3.2 * 32.0 / dims[1] as f64, 3.2 * 32.0 / dims[2] as f64],
        noise: 0.0,
        ..CardiacOptions::default()
    };
    let pair = PairConfig {
        degrade: DegradeConfig::uniform(0.5, 0.75),
        grid: dims,
        window: [dims[0], dims[1]],
    };
    (0..count)
        .map(|i| {
            let (hr, _) = generate::<f64>(&cardiac_spec(&opts, 100 + i as u64)).unwrap();
            let (input, target) = make_training_pair(&hr, &pair).unwrap();
            TrainingPair {
                id: format!("p{i}"),
                input,
                target,
            }
        })
        .collect()
}

fn config(loss: LossKind, batch_size: usize, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        loss,
        learning_rate: 1e-3,
        batch_size,
        epochs,
        seed,
        checkpoint_every: 0,
    }
}

#[test]
fn batch_size_changes_the_trajectory() {
    let corpus = phantom_pairs(2, [16, 16, 8]);
    let net = NetworkConfig::new(2, 2);
    let a = train(&corpus, NetworkWeights::init(net, 5).unwrap(), &config(LossKind::L1, 1, 1, 5), &TrainOutputs::default()).unwrap();
    let b = train(&corpus, NetworkWeights::init(net, 5).unwrap(), &config(LossKind::L1, 2, 1, 5), &TrainOutputs::default()).unwrap();
    assert_eq!(a.history.len(), 2);
    assert_eq!(b.history.len(), 1);
    assert!(a.history.iter().chain(&b.history).all(|r| r.batch_loss.is_finite()));
    assert_ne!(a.weights.params(), b.weights.params());
}

#[test]
fn training_is_bit_reproducible() {
    let corpus = phantom_pairs(3, [16, 16, 8]);
    let net = NetworkConfig::new(2, 2);
    let run = || {
        train(&corpus, NetworkWeights::init(net, 9).unwrap(), &config(LossKind::L2, 2, 2, 9), &TrainOutputs::default()).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.weights.params(), b.weights.params());
    assert_eq!(a.history, b.history);
}

#[test]
fn loss_log_has_the_documented_columns() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("loss.csv");
    let corpus = phantom_pairs(2, [16, 16, 8]);
    let outputs = TrainOutputs {
        loss_log: Some(log.clone()),
        checkpoint_dir: None,
    };
    let res = train(&corpus, NetworkWeights::init(NetworkConfig::new(2, 2), 1).unwrap(), &config(LossKind::L1, 1, 2, 1), &outputs).unwrap();
    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("step,epoch,batch_loss,epoch_mean_loss"));
    assert_eq!(lines.count(), res.history.len());
}

/// With input equal to target, the residual net starts near the identity and
/// learns to push its correction towards zero.
#[test]
fn residual_net_on_identity_corpus() {
    let corpus: Vec<TrainingPair<f64>> = phantom_pairs(4, [16, 16, 8])
        .into_iter()
        .map(|p| TrainingPair {
            id: p.id,
            input: p.target.clone(),
            target: p.target,
        })
        .collect();
    let net = NetworkConfig::new(2, 4);
    let res = train(&corpus, NetworkWeights::init(net, 3).unwrap(), &config(LossKind::L1, 2, 30, 3), &TrainOutputs::default()).unwrap();
    let first = res.epoch_losses[0];
    let last = *res.epoch_losses.last().unwrap();
    assert!(first < 0.2, "initial loss {first}");
    assert!(last < 0.5 * first, "loss {first} -> {last}");
}

#[test]
fn zero_weights_give_relu_of_input() {
    let w = NetworkWeights::<f64>::zeros(NetworkConfig::new(2, 2)).unwrap();
    let v = Volume::from_fn([8, 8, 4], [1.0; 3], |i, j, k| (i as f64 - 3.0) * 0.1 + (j + k) as f64 * 0.01).unwrap();
    let out = svsr::net::unet_forward(&v, &w).unwrap();
    for (a, b) in out.data().iter().zip(v.data()) {
        assert_eq!(*a, b.max(0.0));
    }
}
