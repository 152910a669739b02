mod common;

use common::{gradient_suite, input_gradient_error, rand_tensor, GRAD_EPS as EPS};
use crowdledger::classifiers::{ActionClassifier, StoryClassifier, TrainingConfig};
use crowdledger::engine::ActionQuadruple;
use crowdledger::neural::{gradient_check, net_rng, LayerSpec, Mode, Model, Sequential, Tensor};
use rand::Rng;

const SEEDS: u64 = 20;
const TOL: f64 = 1e-4;

/// Checks parameter and input gradients of a stack over [`SEEDS`] seeds.
fn check_stack(name: &str, specs: &[LayerSpec], input_shape: &[usize], output: usize, check_input: bool) {
    for seed in 0..SEEDS {
        let mut rng = net_rng(1000 + seed);
        let mut model = Sequential::from_specs(specs, &mut rng);
        let x = rand_tensor(input_shape.to_vec(), &mut rng);
        let target = rand_tensor(vec![output], &mut rng);
        let err = gradient_check(&mut model, &x, &target, EPS).unwrap();
        assert!(err < TOL, "{name} seed {seed}: parameter gradient error {err}");
        if check_input {
            let err = input_gradient_error(&mut model, &x, &target);
            assert!(err < TOL, "{name} seed {seed}: input gradient error {err}");
        }
    }
}

#[test]
fn dense_gradients() {
    check_stack("dense", &[LayerSpec::Dense { input: 6, output: 4 }], &[6], 4, true);
}

#[test]
fn conv1d_gradients() {
    let specs = [
        LayerSpec::Conv1d { in_channels: 3, out_channels: 4, kernel: 3 },
        LayerSpec::Dense { input: 6 * 4, output: 2 },
    ];
    check_stack("conv1d", &specs, &[8, 3], 2, true);
}

#[test]
fn maxpool_gradients() {
    let specs = [
        LayerSpec::Conv1d { in_channels: 2, out_channels: 3, kernel: 2 },
        LayerSpec::MaxPool1d { width: 2 },
        LayerSpec::Dense { input: 4 * 3, output: 2 },
    ];
    check_stack("maxpool1d", &specs, &[9, 2], 2, true);
    let mut rng = net_rng(3);
    for seed in 0..SEEDS {
        let mut model = Sequential::from_specs(&[LayerSpec::MaxPool1d { width: 3 }], &mut rng);
        let x = rand_tensor(vec![9, 2], &mut rng);
        let target = rand_tensor(vec![3, 2], &mut rng);
        let err = input_gradient_error(&mut model, &x, &target);
        assert!(err < TOL, "maxpool1d seed {seed}: input gradient error {err}");
    }
}

#[test]
fn activation_gradients() {
    for (name, act) in [("tanh", LayerSpec::Tanh), ("sigmoid", LayerSpec::Sigmoid)] {
        let specs = [LayerSpec::Dense { input: 5, output: 4 }, act, LayerSpec::Dense { input: 4, output: 3 }];
        check_stack(name, &specs, &[5], 3, true);
    }
}

#[test]
fn dropout_eval_gradients() {
    let specs = [
        LayerSpec::Dense { input: 5, output: 4 },
        LayerSpec::Dropout { rate: 0.5 },
        LayerSpec::Dense { input: 4, output: 2 },
    ];
    check_stack("dropout", &specs, &[5], 2, true);
}

#[test]
fn lstm_gradients() {
    let seq =
        [LayerSpec::Lstm { input: 3, hidden: 4, return_sequences: true }, LayerSpec::Dense { input: 5 * 4, output: 2 }];
    check_stack("lstm (sequences)", &seq, &[5, 3], 2, true);
    let last = [LayerSpec::Lstm { input: 3, hidden: 4, return_sequences: false }];
    check_stack("lstm (last)", &last, &[6, 3], 4, true);
}

#[test]
fn embedding_gradients() {
    for seed in 0..SEEDS {
        let mut rng = net_rng(2000 + seed);
        let specs = [LayerSpec::Embedding { vocab: 7, dim: 3 }, LayerSpec::Dense { input: 4 * 3, output: 2 }];
        let mut model = Sequential::from_specs(&specs, &mut rng);
        let ids = Tensor::new(vec![4], (0..4).map(|_| rng.random_range(0..7) as f64).collect());
        let target = rand_tensor(vec![2], &mut rng);
        let err = gradient_check(&mut model, &ids, &target, EPS).unwrap();
        assert!(err < TOL, "embedding seed {seed}: {err}");
    }
}

fn small_config() -> TrainingConfig {
    TrainingConfig { window: 6, conv_channels: 4, lstm_hidden: 3, ..TrainingConfig::default() }
}

#[test]
fn action_stack_gradients() {
    let cfg = small_config();
    for seed in 0..SEEDS {
        let mut rng = net_rng(3000 + seed);
        let mut model = ActionClassifier::new(9, 12, &cfg, &mut rng);
        let n = rng.random_range(1..=8);
        let events: Vec<ActionQuadruple> = (0..n)
            .map(|i| ActionQuadruple {
                user: rng.random_range(0..9),
                story: 4,
                kind: (i > 0) as u8,
                vote: if i == 0 || rng.random_bool(0.5) { 1 } else { -1 },
            })
            .collect();
        let target = Tensor::vector(vec![rng.random_range(-0.9..0.9)]);
        let err = gradient_check(&mut model, &events, &target, EPS).unwrap();
        assert!(err < TOL, "action stack seed {seed}: {err}");
    }
}

#[test]
fn story_stack_gradients() {
    let cfg = small_config();
    for seed in 0..SEEDS {
        let mut rng = net_rng(4000 + seed);
        let mut model = StoryClassifier::new(&cfg, &mut rng);
        let n = rng.random_range(1..=10);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = Tensor::vector(vec![if rng.random_bool(0.5) { 1.0 } else { -1.0 }]);
        let err = gradient_check(&mut model, &scores[..], &target, EPS).unwrap();
        assert!(err < TOL, "story stack seed {seed}: {err}");
    }
}

#[test]
fn default_stacks_pass_one_check() {
    let cfg = TrainingConfig::default();
    let mut rng = net_rng(77);
    let mut action = ActionClassifier::new(100, 200, &cfg, &mut rng);
    let events: Vec<ActionQuadruple> = (0..20)
        .map(|i| ActionQuadruple {
            user: (i * 7) % 100,
            story: 13,
            kind: (i > 0) as u8,
            vote: if i % 3 == 0 { -1 } else { 1 },
        })
        .collect();
    let err = gradient_check(&mut action, &events, &Tensor::vector(vec![0.4]), EPS).unwrap();
    assert!(err < TOL, "default action stack: {err}");
    let mut story = StoryClassifier::new(&cfg, &mut rng);
    let scores: Vec<f64> = (0..12).map(|i| ((i as f64) * 0.7).sin()).collect();
    let err = gradient_check(&mut story, &scores[..], &Tensor::vector(vec![-1.0]), EPS).unwrap();
    assert!(err < TOL, "default story stack: {err}");
}

/// Inverted dropout keeps the expected activation: mean output ≈ input and
/// the dropped fraction ≈ rate.
#[test]
fn dropout_preserves_expectation() {
    let n = 200_000;
    for rate in [0.2, 0.5] {
        let mut model = Sequential::from_specs(&[LayerSpec::Dropout { rate }], &mut net_rng(0));
        let mut rng = net_rng(11);
        let out = model.forward(&Tensor::new(vec![n], vec![1.0; n]), &mut Mode::Train(&mut rng)).unwrap();
        let mean = out.data().iter().sum::<f64>() / n as f64;
        let dropped = out.data().iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        // Binomial 4-sigma bounds.
        let sd = (rate * (1.0 - rate) / n as f64).sqrt();
        assert!((dropped - rate).abs() < 4.0 * sd, "rate {rate}: dropped {dropped}");
        assert!((mean - 1.0).abs() < 4.0 * sd / (1.0 - rate), "rate {rate}: mean {mean}");
    }
}

#[test]
fn outputs_stay_in_open_interval() {
    let cfg = TrainingConfig::default();
    let mut rng = net_rng(5);
    let mut action = ActionClassifier::new(10, 10, &cfg, &mut rng);
    let mut story = StoryClassifier::new(&cfg, &mut rng);
    for _ in 0..50 {
        let events: Vec<ActionQuadruple> = (0..rng.random_range(1..30))
            .map(|i| ActionQuadruple {
                user: rng.random_range(0..10),
                story: 3,
                kind: (i > 0) as u8,
                vote: if rng.random_bool(0.5) { 1 } else { -1 },
            })
            .collect();
        let scores = action.score_actions(&events).unwrap();
        assert_eq!(scores.len(), events.len());
        assert!(scores.iter().all(|s| *s > -1.0 && *s < 1.0));
        assert_eq!(action.score_actions(&events).unwrap(), scores);
        let p = story.predict(&scores).unwrap();
        assert!(p > -1.0 && p < 1.0);
    }
}

#[test]
fn shared_suite_is_clean() {
    for (name, err) in gradient_suite(3) {
        assert!(err < TOL, "{name}: {err}");
    }
}
