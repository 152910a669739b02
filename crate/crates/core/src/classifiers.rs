//! The two-stage behavioral model.
//!
//! The action classifier embeds each `(user, story, type, vote)` event,
//! convolves over a trailing window of the story's events and emits a score in
//! (-1, 1). The story classifier runs two stacked LSTMs over a story's
//! sequence of action scores and predicts the story's truth.

use std::borrow::Borrow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{ActionQuadruple, Event, StoryScorer};
use crate::ledger::StoryId;
use crate::neural::{
    flatten_params, load_params, mse, net_rng, Adam, Checkpoint, Embedding, LayerSpec, Mode, Model, NetRng,
    NeuralError, Param, Sequential, Tensor,
};

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("{what} id {id} out of range for table of {size}")]
    IdOutOfRange { what: &'static str, id: u64, size: usize },
    #[error("insufficient training data: need at least {needed}, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("training data lacks annotations: {0}")]
    MissingAnnotations(&'static str),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// What the action classifier is trained to predict per event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionTarget {
    /// `vote` for benign events, `-vote` for malicious ones.
    #[default]
    EffectiveTruth,
    /// `+1` benign, `-1` malicious.
    Malice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub window: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub pool: usize,
    pub dropout: f64,
    /// Probability of hiding the story embedding from a training window, so
    /// the action model cannot lean on memorized story identities.
    pub story_dropout: f64,
    /// Weight action-classifier samples so malicious and benign events
    /// contribute equally to the loss.
    pub balance_malice: bool,
    pub lstm_hidden: usize,
    pub max_sequence: usize,
    pub action_epochs: usize,
    pub story_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub validation_fraction: f64,
    /// Fraction of stories used for training in the simulation pipeline.
    pub train_fraction: f64,
    pub action_target: ActionTarget,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            window: 16,
            conv_channels: 32,
            kernel: 3,
            pool: 2,
            dropout: 0.2,
            story_dropout: 0.5,
            balance_malice: true,
            lstm_hidden: 32,
            max_sequence: 64,
            action_epochs: 20,
            story_epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            validation_fraction: 0.1,
            train_fraction: 0.8,
            action_target: ActionTarget::EffectiveTruth,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.kernel == 0 || self.pool == 0 || self.window < self.kernel + self.pool - 1 {
            return Err("window must fit at least one convolution and pooling step".into());
        }
        if self.conv_channels == 0 || self.lstm_hidden == 0 || self.max_sequence == 0 || self.batch_size == 0 {
            return Err("layer sizes, max_sequence and batch_size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err("dropout must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.story_dropout) {
            return Err("story_dropout must lie in [0, 1]".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err("learning_rate must be positive".into());
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err("validation_fraction must lie in [0, 0.5)".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err("train_fraction must lie in (0, 1)".into());
        }
        Ok(())
    }
}

/// `⌈log₂ n⌉`, at least 1.
pub fn embedding_dim(n: usize) -> usize {
    if n <= 2 {
        1
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as usize
    }
}

/// Loss history of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRun {
    pub epochs: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub train_loss: Vec<f64>,
    pub validation_loss: Vec<f64>,
    /// Epoch (0-based) whose parameters were kept: lowest validation loss,
    /// or the last epoch when there is no validation split.
    pub best_epoch: usize,
    pub seed: u64,
}

fn snapshot<M: Model + ?Sized>(model: &mut M) -> Vec<f64> {
    model.params_mut().iter().flat_map(|p| p.value.data().iter().copied()).collect()
}

/// Mini-batch Adam on MSE. Per-epoch training loss is the mean loss seen
/// during the epoch (dropout active); validation loss is evaluated after it.
/// Samples sharing a group key land on the same side of the validation split.
/// The parameters of the best validation epoch are restored at the end.
fn fit<M, I>(
    model: &mut M,
    samples: &[(I, f64)],
    weights: &[f64],
    groups: &[u64],
    config: &TrainingConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainingRun, NeuralError>
where
    M: Model + ?Sized,
    I: Borrow<M::Input>,
{
    debug_assert_eq!(samples.len(), groups.len());
    let mut rng = net_rng(seed);
    let mut keys: Vec<u64> = groups.to_vec();
    keys.sort_unstable();
    keys.dedup();
    keys.shuffle(&mut rng);
    let n_val_groups = ((keys.len() as f64) * config.validation_fraction).floor() as usize;
    let val_keys: std::collections::BTreeSet<u64> = keys[..n_val_groups].iter().copied().collect();
    let (val_idx, mut train_idx): (Vec<usize>, Vec<usize>) =
        (0..samples.len()).partition(|&i| val_keys.contains(&groups[i]));

    let mut adam = Adam::new(config.learning_rate);
    let mut run = TrainingRun {
        epochs,
        batch_size: config.batch_size,
        train_samples: train_idx.len(),
        validation_samples: val_idx.len(),
        train_loss: Vec::with_capacity(epochs),
        validation_loss: Vec::with_capacity(epochs),
        best_epoch: epochs.saturating_sub(1),
        seed,
    };
    let mut best: Option<(f64, Vec<f64>)> = None;
    for epoch in 0..epochs {
        train_idx.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train_idx.chunks(config.batch_size) {
            for &i in batch {
                let scale = weights[i] / batch.len() as f64;
                let (input, target) = &samples[i];
                let out = model.forward(input.borrow(), &mut Mode::Train(&mut rng))?;
                let (loss, grad) = mse(&out, &Tensor::vector(vec![*target]))?;
                if !loss.is_finite() {
                    return Err(NeuralError::NonFiniteLoss);
                }
                total += loss * weights[i];
                let grad = Tensor::new(grad.shape().to_vec(), grad.data().iter().map(|g| g * scale).collect());
                model.backward(&grad)?;
            }
            adam.step(model.params_mut());
        }
        let weight_sum: f64 = train_idx.iter().map(|&i| weights[i]).sum();
        run.train_loss.push(total / weight_sum.max(f64::MIN_POSITIVE));
        if !val_idx.is_empty() {
            let (mut v, mut w) = (0.0, 0.0);
            for &i in &val_idx {
                let (input, target) = &samples[i];
                let out = model.forward(input.borrow(), &mut Mode::Eval)?;
                v += weights[i] * mse(&out, &Tensor::vector(vec![*target]))?.0;
                w += weights[i];
            }
            let v = v / w.max(f64::MIN_POSITIVE);
            run.validation_loss.push(v);
            if best.as_ref().is_none_or(|(b, _)| v < *b) {
                best = Some((v, snapshot(model)));
                run.best_epoch = epoch;
            }
        }
    }
    if let Some((_, params)) = best {
        load_params(model.params_mut(), &params)?;
    }
    Ok(run)
}

fn check_id(what: &'static str, id: u64, size: usize) -> Result<usize, ClassifierError> {
    if (id as usize) < size && id < usize::MAX as u64 {
        Ok(id as usize)
    } else {
        Err(ClassifierError::IdOutOfRange { what, id, size })
    }
}

pub struct ActionClassifier {
    n_users: usize,
    n_stories: usize,
    window: usize,
    story_dropout: f64,
    pub user_embedding: Embedding,
    pub story_embedding: Embedding,
    body: Sequential,
    /// `(row, user, story)` of the real (unpadded) rows of the last forward
    /// pass, and whether the story embedding was hidden.
    cache: Option<(Vec<(usize, usize, usize)>, bool)>,
}

impl ActionClassifier {
    pub fn new(n_users: usize, n_stories: usize, config: &TrainingConfig, rng: &mut NetRng) -> Self {
        let du = embedding_dim(n_users);
        let ds = embedding_dim(n_stories);
        let user_embedding = Embedding::new(n_users, du, rng);
        let story_embedding = Embedding::new(n_stories, ds, rng);
        let conv_len = config.window - config.kernel + 1;
        let pooled = conv_len / config.pool;
        let specs = [
            LayerSpec::Conv1d { in_channels: du + ds + 2, out_channels: config.conv_channels, kernel: config.kernel },
            LayerSpec::Tanh,
            LayerSpec::MaxPool1d { width: config.pool },
            LayerSpec::Dropout { rate: config.dropout },
            LayerSpec::Dense { input: pooled * config.conv_channels, output: 1 },
            LayerSpec::Tanh,
        ];
        let body = Sequential::from_specs(&specs, rng);
        ActionClassifier {
            n_users,
            n_stories,
            window: config.window,
            story_dropout: config.story_dropout,
            user_embedding,
            story_embedding,
            body,
            cache: None,
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_stories(&self) -> usize {
        self.n_stories
    }

    pub fn row_width(&self) -> usize {
        self.user_embedding.dim() + self.story_embedding.dim() + 2
    }

    /// Encodes up to the last `W` events as a `[W, row_width]` tensor, left
    /// padded with zero rows.
    pub fn encode_window(&self, events: &[ActionQuadruple]) -> Result<Tensor, ClassifierError> {
        Ok(self.encode(events)?.0)
    }

    #[allow(clippy::type_complexity)]
    fn encode(&self, events: &[ActionQuadruple]) -> Result<(Tensor, Vec<(usize, usize, usize)>), ClassifierError> {
        let w = self.window;
        let width = self.row_width();
        let recent = &events[events.len().saturating_sub(w)..];
        let pad = w - recent.len();
        let mut data = vec![0.0; w * width];
        let mut rows = Vec::with_capacity(recent.len());
        for (k, e) in recent.iter().enumerate() {
            let u = check_id("user", e.user, self.n_users)?;
            let s = check_id("story", e.story, self.n_stories)?;
            let row = pad + k;
            let out = &mut data[row * width..(row + 1) * width];
            let du = self.user_embedding.dim();
            out[..du].copy_from_slice(self.user_embedding.lookup(u));
            out[du..width - 2].copy_from_slice(self.story_embedding.lookup(s));
            out[width - 2] = e.kind as f64;
            out[width - 1] = e.vote as f64;
            rows.push((row, u, s));
        }
        Ok((Tensor::new(vec![w, width], data), rows))
    }

    /// One score per event, each computed on the trailing window ending at it.
    pub fn score_actions(&mut self, story_events: &[ActionQuadruple]) -> Result<Vec<f64>, ClassifierError> {
        (1..=story_events.len()).map(|end| Ok(self.forward(&story_events[..end], &mut Mode::Eval)?.data()[0])).collect()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let manifest = serde_json::json!({
            "model": "action_classifier",
            "n_users": self.n_users,
            "n_stories": self.n_stories,
            "window": self.window,
            "user_dim": self.user_embedding.dim(),
            "story_dim": self.story_embedding.dim(),
            "layers": self.body.specs(),
        });
        let mut params = vec![&self.user_embedding.table, &self.story_embedding.table];
        params.extend(self.body.params());
        Checkpoint { manifest, params: flatten_params(&params) }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ClassifierError> {
        let m = &ck.manifest;
        if m["model"] != "action_classifier" {
            return Err(ClassifierError::Checkpoint("not an action classifier checkpoint".into()));
        }
        let field = |k: &str| {
            m[k].as_u64().map(|v| v as usize).ok_or_else(|| ClassifierError::Checkpoint(format!("missing `{k}`")))
        };
        let (n_users, n_stories, window) = (field("n_users")?, field("n_stories")?, field("window")?);
        let specs: Vec<LayerSpec> =
            serde_json::from_value(m["layers"].clone()).map_err(|e| ClassifierError::Checkpoint(e.to_string()))?;
        let mut rng = net_rng(0);
        let mut model = ActionClassifier {
            n_users,
            n_stories,
            window,
            story_dropout: 0.0,
            user_embedding: Embedding::new(n_users, field("user_dim")?, &mut rng),
            story_embedding: Embedding::new(n_stories, field("story_dim")?, &mut rng),
            body: Sequential::from_specs(&specs, &mut rng),
            cache: None,
        };
        load_params(model.params_mut(), &ck.params)?;
        Ok(model)
    }
}

impl Model for ActionClassifier {
    type Input = [ActionQuadruple];

    fn forward(&mut self, input: &[ActionQuadruple], mode: &mut Mode<'_>) -> Result<Tensor, NeuralError> {
        let (mut x, rows) = self.encode(input).map_err(|e| match e {
            ClassifierError::IdOutOfRange { id, size, .. } => {
                NeuralError::IndexOutOfRange { index: id as f64, vocab: size }
            }
            other => NeuralError::Checkpoint(other.to_string()),
        })?;
        let hide_story = match mode {
            Mode::Train(rng) if self.story_dropout > 0.0 => rng.random::<f64>() < self.story_dropout,
            _ => false,
        };
        if hide_story {
            let (width, du) = (self.row_width(), self.user_embedding.dim());
            for row in x.data_mut().chunks_mut(width) {
                row[du..width - 2].fill(0.0);
            }
        }
        self.cache = Some((rows, hide_story));
        self.body.forward(&x, mode)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<(), NeuralError> {
        let (rows, hide_story) = self.cache.take().ok_or(NeuralError::NoForwardCache("action_classifier"))?;
        let dx = self.body.backward_input(upstream)?;
        let width = self.row_width();
        let du = self.user_embedding.dim();
        for &(row, u, s) in &rows {
            let g = &dx.data()[row * width..(row + 1) * width];
            self.user_embedding.accumulate(u, &g[..du]);
            if !hide_story {
                self.story_embedding.accumulate(s, &g[du..width - 2]);
            }
        }
        self.cache = Some((rows, hide_story));
        Ok(())
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.user_embedding.table, &mut self.story_embedding.table];
        p.extend(<Sequential as Model>::params_mut(&mut self.body));
        p
    }
}

fn action_target(event: &Event, target: ActionTarget) -> Result<f64, ClassifierError> {
    let malicious = event.malicious.ok_or(ClassifierError::MissingAnnotations("malicious"))?;
    let b = if malicious { -1.0 } else { 1.0 };
    Ok(match target {
        ActionTarget::EffectiveTruth => event.vote as f64 * b,
        ActionTarget::Malice => b,
    })
}

/// Training samples for the action classifier: one trailing window per event
/// of each story, stories in the given order.
pub fn action_samples<'a>(
    stories: impl IntoIterator<Item = &'a [Event]>,
    window: usize,
    target: ActionTarget,
) -> Result<Vec<(Vec<ActionQuadruple>, f64)>, ClassifierError> {
    let mut samples = Vec::new();
    for events in stories {
        let quads: Vec<ActionQuadruple> = events.iter().map(Event::quadruple).collect();
        for (i, e) in events.iter().enumerate() {
            let start = (i + 1).saturating_sub(window);
            samples.push((quads[start..=i].to_vec(), action_target(e, target)?));
        }
    }
    Ok(samples)
}

/// Inverse-frequency weights giving malicious and benign events equal total
/// weight, normalized to mean 1.
pub fn malice_weights(malicious: &[bool]) -> Vec<f64> {
    let n = malicious.len() as f64;
    let bad = malicious.iter().filter(|m| **m).count() as f64;
    if bad == 0.0 || bad == n {
        return vec![1.0; malicious.len()];
    }
    malicious.iter().map(|&m| if m { n / (2.0 * bad) } else { n / (2.0 * (n - bad)) }).collect()
}

fn story_key(window: &[ActionQuadruple]) -> u64 {
    window.last().map_or(0, |q| q.story)
}

/// Trains an action classifier on annotated per-story event groups.
pub fn train_action_classifier<'a>(
    stories: impl IntoIterator<Item = &'a [Event]>,
    n_users: usize,
    n_stories: usize,
    config: &TrainingConfig,
    seed: u64,
) -> Result<(ActionClassifier, TrainingRun), ClassifierError> {
    let stories: Vec<&[Event]> = stories.into_iter().collect();
    let samples = action_samples(stories.iter().copied(), config.window, config.action_target)?;
    let malicious: Vec<bool> = stories.iter().flat_map(|s| s.iter().map(|e| e.malicious == Some(true))).collect();
    let needed = 10 * config.window;
    if samples.len() < needed {
        return Err(ClassifierError::InsufficientData { needed, got: samples.len() });
    }
    let mut rng = net_rng(seed);
    let mut model = ActionClassifier::new(n_users, n_stories, config, &mut rng);
    let groups: Vec<u64> = samples.iter().map(|(w, _)| story_key(w)).collect();
    let weights = if config.balance_malice { malice_weights(&malicious) } else { vec![1.0; samples.len()] };
    let run = fit(&mut model, &samples, &weights, &groups, config, config.action_epochs, seed.wrapping_add(1))?;
    Ok((model, run))
}

pub const MIN_STORIES: usize = 20;

pub struct StoryClassifier {
    max_sequence: usize,
    body: Sequential,
}

impl StoryClassifier {
    pub fn new(config: &TrainingConfig, rng: &mut NetRng) -> Self {
        let h = config.lstm_hidden;
        let specs = [
            LayerSpec::Lstm { input: 1, hidden: h, return_sequences: true },
            LayerSpec::Dropout { rate: config.dropout },
            LayerSpec::Lstm { input: h, hidden: h, return_sequences: false },
            LayerSpec::Dropout { rate: config.dropout },
            LayerSpec::Dense { input: h, output: 1 },
            LayerSpec::Tanh,
        ];
        StoryClassifier { max_sequence: config.max_sequence, body: Sequential::from_specs(&specs, rng) }
    }

    /// Prediction in (-1, 1) for one score sequence.
    pub fn predict(&mut self, scores: &[f64]) -> Result<f64, ClassifierError> {
        Ok(self.forward(scores, &mut Mode::Eval)?.data()[0])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let manifest = serde_json::json!({
            "model": "story_classifier",
            "max_sequence": self.max_sequence,
            "layers": self.body.specs(),
        });
        Checkpoint { manifest, params: flatten_params(&self.body.params()) }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ClassifierError> {
        let m = &ck.manifest;
        if m["model"] != "story_classifier" {
            return Err(ClassifierError::Checkpoint("not a story classifier checkpoint".into()));
        }
        let max_sequence =
            m["max_sequence"].as_u64().ok_or_else(|| ClassifierError::Checkpoint("missing `max_sequence`".into()))?
                as usize;
        let specs: Vec<LayerSpec> =
            serde_json::from_value(m["layers"].clone()).map_err(|e| ClassifierError::Checkpoint(e.to_string()))?;
        let mut model = StoryClassifier { max_sequence, body: Sequential::from_specs(&specs, &mut net_rng(0)) };
        load_params(model.params_mut(), &ck.params)?;
        Ok(model)
    }
}

impl Model for StoryClassifier {
    type Input = [f64];

    /// Sequences longer than the cap keep their most recent entries. Shorter
    /// ones run unpadded, which is what masked left padding computes.
    fn forward(&mut self, input: &[f64], mode: &mut Mode<'_>) -> Result<Tensor, NeuralError> {
        let recent = &input[input.len().saturating_sub(self.max_sequence)..];
        self.body.forward(&Tensor::new(vec![recent.len(), 1], recent.to_vec()), mode)
    }

    fn backward(&mut self, upstream: &Tensor) -> Result<(), NeuralError> {
        self.body.backward_input(upstream).map(|_| ())
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        <Sequential as Model>::params_mut(&mut self.body)
    }
}

/// Trains the story classifier on `(score sequence, ±1 truth)` pairs.
pub fn train_story_classifier(
    data: &[(Vec<f64>, i64)],
    config: &TrainingConfig,
    seed: u64,
) -> Result<(StoryClassifier, TrainingRun), ClassifierError> {
    if data.len() < MIN_STORIES {
        return Err(ClassifierError::InsufficientData { needed: MIN_STORIES, got: data.len() });
    }
    let samples: Vec<(&[f64], f64)> = data.iter().map(|(s, l)| (s.as_slice(), *l as f64)).collect();
    let mut rng = net_rng(seed);
    let mut model = StoryClassifier::new(config, &mut rng);
    let groups: Vec<u64> = (0..samples.len() as u64).collect();
    let run = fit(
        &mut model,
        &samples,
        &vec![1.0; samples.len()],
        &groups,
        config,
        config.story_epochs,
        seed.wrapping_add(1),
    )?;
    Ok((model, run))
}

/// Both stages together; usable by the engine as the classifier score.
pub struct ClassifierPair {
    pub action: ActionClassifier,
    pub story: StoryClassifier,
}

impl ClassifierPair {
    pub fn classify_story(&mut self, story_events: &[ActionQuadruple]) -> Result<f64, ClassifierError> {
        let scores = self.action.score_actions(story_events)?;
        self.story.predict(&scores)
    }

    pub fn save(&self, action_path: &Path, story_path: &Path) -> Result<(), ClassifierError> {
        std::fs::write(action_path, self.action.to_checkpoint().to_bytes())?;
        std::fs::write(story_path, self.story.to_checkpoint().to_bytes())?;
        Ok(())
    }

    pub fn load(action_path: &Path, story_path: &Path) -> Result<Self, ClassifierError> {
        let action = ActionClassifier::from_checkpoint(&Checkpoint::from_bytes(&std::fs::read(action_path)?)?)?;
        let story = StoryClassifier::from_checkpoint(&Checkpoint::from_bytes(&std::fs::read(story_path)?)?)?;
        Ok(ClassifierPair { action, story })
    }
}

impl StoryScorer for ClassifierPair {
    fn score_story(&mut self, events: &[ActionQuadruple]) -> f64 {
        // Ids were validated when the events were created by the engine.
        self.classify_story(events).unwrap_or(0.0)
    }
}

/// Per-story action-score sequences for a set of event groups.
pub fn score_sequences<'a>(
    model: &mut ActionClassifier,
    stories: impl IntoIterator<Item = (StoryId, &'a [Event])>,
) -> Result<Vec<(StoryId, Vec<f64>)>, ClassifierError> {
    stories
        .into_iter()
        .map(|(id, events)| {
            let quads: Vec<ActionQuadruple> = events.iter().map(Event::quadruple).collect();
            Ok((id, model.score_actions(&quads)?))
        })
        .collect()
}

/// `-score·vote`: positive when the model reads the vote as malicious.
pub fn malice_evidence(score: f64, event: &ActionQuadruple) -> f64 {
    -score * event.vote as f64
}
