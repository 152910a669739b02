//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use std::collections::BTreeMap;

use crowdledger::classifiers::{ActionClassifier, StoryClassifier, TrainingConfig};
use crowdledger::engine::ActionQuadruple;
use crowdledger::ledger::Chain;
use crowdledger::neural::{
    gradient_check, mse, net_rng, LayerSpec, Mode, Model, NetRng, Sequential, Tensor, GRADIENT_FLOOR,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const GRAD_EPS: f64 = 1e-5;

/// A chain of `blocks` blocks (genesis included) holding posts, votes and
/// settlements drawn from `seed`.
pub fn random_chain(blocks: usize, seed: u64) -> Chain {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chain = Chain::new();
    let mut step = 0u64;
    let mut story = 0u64;
    while chain.len() < blocks {
        let poster = rng.random_range(0..20u64);
        chain.post_story(poster, story, step).unwrap();
        let mut deltas = BTreeMap::new();
        for voter in 0..20u64 {
            if voter != poster && rng.random_bool(0.3) {
                step += 1;
                let v = if rng.random_bool(0.5) { 1 } else { -1 };
                chain.submit_vote(voter, story, v, step).unwrap();
                deltas.insert(voter, if v == 1 { 1 } else { -2 });
            }
        }
        chain.settle_story(story, 1, &deltas, step).unwrap();
        chain.commit();
        story += 1;
        step += 1;
    }
    chain
}

pub fn rand_tensor(shape: Vec<usize>, rng: &mut NetRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Largest relative error between the analytic input gradient and central
/// differences of the MSE loss.
pub fn input_gradient_error(model: &mut Sequential, x: &Tensor, target: &Tensor) -> f64 {
    let out = model.forward(x, &mut Mode::Eval).unwrap();
    let (_, grad) = mse(&out, target).unwrap();
    let analytic = model.backward_input(&grad).unwrap();
    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += GRAD_EPS;
        let mut minus = x.clone();
        minus.data_mut()[i] -= GRAD_EPS;
        let lp = mse(&model.forward(&plus, &mut Mode::Eval).unwrap(), target).unwrap().0;
        let lm = mse(&model.forward(&minus, &mut Mode::Eval).unwrap(), target).unwrap().0;
        let numeric = (lp - lm) / (2.0 * GRAD_EPS);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADIENT_FLOOR));
    }
    worst
}

/// Small stacks that exercise every layer kind: (name, layers, input shape,
/// output width, whether the input is continuous).
pub fn layer_stacks() -> Vec<(&'static str, Vec<LayerSpec>, Vec<usize>, usize, bool)> {
    vec![
        ("dense", vec![LayerSpec::Dense { input: 6, output: 4 }], vec![6], 4, true),
        (
            "conv1d",
            vec![
                LayerSpec::Conv1d { in_channels: 3, out_channels: 4, kernel: 3 },
                LayerSpec::Dense { input: 24, output: 2 },
            ],
            vec![8, 3],
            2,
            true,
        ),
        (
            "maxpool1d",
            vec![
                LayerSpec::Conv1d { in_channels: 2, out_channels: 3, kernel: 2 },
                LayerSpec::MaxPool1d { width: 2 },
                LayerSpec::Dense { input: 12, output: 2 },
            ],
            vec![9, 2],
            2,
            true,
        ),
        (
            "tanh",
            vec![LayerSpec::Dense { input: 5, output: 4 }, LayerSpec::Tanh, LayerSpec::Dense { input: 4, output: 3 }],
            vec![5],
            3,
            true,
        ),
        (
            "sigmoid",
            vec![
                LayerSpec::Dense { input: 5, output: 4 },
                LayerSpec::Sigmoid,
                LayerSpec::Dense { input: 4, output: 3 },
            ],
            vec![5],
            3,
            true,
        ),
        (
            "dropout",
            vec![
                LayerSpec::Dense { input: 5, output: 4 },
                LayerSpec::Dropout { rate: 0.5 },
                LayerSpec::Dense { input: 4, output: 2 },
            ],
            vec![5],
            2,
            true,
        ),
        (
            "lstm",
            vec![
                LayerSpec::Lstm { input: 3, hidden: 4, return_sequences: true },
                LayerSpec::Lstm { input: 4, hidden: 3, return_sequences: false },
            ],
            vec![5, 3],
            3,
            true,
        ),
        (
            "embedding",
            vec![LayerSpec::Embedding { vocab: 7, dim: 3 }, LayerSpec::Dense { input: 12, output: 2 }],
            vec![4],
            2,
            false,
        ),
    ]
}

/// Worst gradient-check error per layer stack and per classifier stack over
/// `seeds` random initializations and inputs.
pub fn gradient_suite(seeds: u64) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    for (name, specs, shape, width, continuous) in layer_stacks() {
        let mut worst = 0.0f64;
        for seed in 0..seeds {
            let mut rng = net_rng(10_000 + seed);
            let mut model = Sequential::from_specs(&specs, &mut rng);
            let x = if continuous {
                rand_tensor(shape.clone(), &mut rng)
            } else {
                Tensor::new(shape.clone(), (0..shape[0]).map(|_| rng.random_range(0..7) as f64).collect())
            };
            let target = rand_tensor(vec![width], &mut rng);
            worst = worst.max(gradient_check(&mut model, &x, &target, GRAD_EPS).unwrap());
            if continuous {
                worst = worst.max(input_gradient_error(&mut model, &x, &target));
            }
        }
        out.push((name, worst));
    }

    let cfg = TrainingConfig { window: 6, conv_channels: 4, lstm_hidden: 3, ..TrainingConfig::default() };
    let (mut action_worst, mut story_worst) = (0.0f64, 0.0f64);
    for seed in 0..seeds {
        let mut rng = net_rng(20_000 + seed);
        let mut action = ActionClassifier::new(9, 12, &cfg, &mut rng);
        let events: Vec<ActionQuadruple> = (0..rng.random_range(1..=8))
            .map(|i| ActionQuadruple {
                user: rng.random_range(0..9),
                story: 4,
                kind: (i > 0) as u8,
                vote: if i == 0 || rng.random_bool(0.5) { 1 } else { -1 },
            })
            .collect();
        let target = Tensor::vector(vec![rng.random_range(-0.9..0.9)]);
        action_worst = action_worst.max(gradient_check(&mut action, &events, &target, GRAD_EPS).unwrap());

        let mut story = StoryClassifier::new(&cfg, &mut rng);
        let scores: Vec<f64> = (0..rng.random_range(1..=10)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let target = Tensor::vector(vec![if rng.random_bool(0.5) { 1.0 } else { -1.0 }]);
        story_worst = story_worst.max(gradient_check(&mut story, &scores[..], &target, GRAD_EPS).unwrap());
    }
    out.push(("action classifier", action_worst));
    out.push(("story classifier", story_worst));
    out
}
