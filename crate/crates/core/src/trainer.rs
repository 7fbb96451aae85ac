//! Training regimes, staged unfreezing, temperature annealing and the
//! per-utterance optimization loop.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, StMode, Tape};
use crate::config::{ExperimentConfig, ExtractorInit};
use crate::downstream::{
    classify, embed_ids, insert_downstream, joint_loss, record_joint_loss, LayerMode, PipelineSpec, TokenizerMode,
    CENTROIDS, EMBEDDING,
};
use crate::error::{Error, Result};
use crate::math::{argmax, Matrix, SeededRng};
use crate::optim::Adam;
use crate::tokenizer::{gumbel_noise, init_codebook, tokenize_inference, Codebook, KMeansFit, TokenSequence};
use crate::upstream::{
    insert_extractor, upstream_forward, weighted_sum, Dataset, LayerWeights, SynthWorld, LAYER_LOGITS,
};

/// Which parameter groups learn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Regime {
    /// Only the classifier.
    Baseline,
    /// Classifier, centroids and (multi-layer) layer weights.
    FreezeSsl,
    /// Everything, including the extractor.
    #[default]
    FullFinetune,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Baseline, Regime::FreezeSsl, Regime::FullFinetune];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Baseline => "BASELINE",
            Regime::FreezeSsl => "FREEZE_SSL",
            Regime::FullFinetune => "FULL_FINETUNE",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == norm)
            .ok_or_else(|| Error::config("regime", format!("unknown regime {s:?}; expected baseline, freeze_ssl or full_finetune")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    #[default]
    Exponential,
    Linear,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub total_epochs: usize,
    /// Epochs during which only the classifier trains.
    pub warmup_epochs: usize,
    /// First epoch the extractor trains in multi-layer full finetuning.
    pub ssl_unfreeze_epoch: usize,
    pub tau_start: f64,
    pub tau_end: f64,
    pub decay: Decay,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_epochs: 45,
            warmup_epochs: 15,
            ssl_unfreeze_epoch: 30,
            tau_start: 2.0,
            tau_end: 0.5,
            decay: Decay::Exponential,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::config("schedule.total_epochs", "must be >= 1"));
        }
        if self.warmup_epochs > self.ssl_unfreeze_epoch {
            return Err(Error::config("schedule.warmup_epochs", "must not exceed ssl_unfreeze_epoch"));
        }
        if self.ssl_unfreeze_epoch > self.total_epochs {
            return Err(Error::config("schedule.ssl_unfreeze_epoch", "must not exceed total_epochs"));
        }
        if !(self.tau_start.is_finite() && self.tau_start > 0.0) {
            return Err(Error::config("schedule.tau_start", "must be finite and > 0"));
        }
        if !(self.tau_end.is_finite() && self.tau_end > 0.0 && self.tau_end <= self.tau_start) {
            return Err(Error::config("schedule.tau_end", "must be finite, > 0 and <= tau_start"));
        }
        Ok(())
    }
}

/// Gumbel-Softmax temperature for `epoch`, interpolated from `tau_start`
/// (first epoch) to `tau_end` (last epoch, returned exactly).
pub fn temperature_at(schedule: &Schedule, epoch: usize) -> Result<f64> {
    let e = schedule.total_epochs;
    if epoch >= e {
        return Err(Error::invalid("temperature_at", format!("epoch {epoch} out of range for {e} epochs")));
    }
    if epoch == 0 {
        return Ok(schedule.tau_start);
    }
    if epoch == e - 1 {
        return Ok(schedule.tau_end);
    }
    let frac = epoch as f64 / (e - 1) as f64;
    let (a, b) = (schedule.tau_start, schedule.tau_end);
    Ok(match schedule.decay {
        Decay::Exponential => a * (b / a).powf(frac),
        Decay::Linear => a + (b - a) * frac,
    })
}

/// Coarse parameter groups that regimes switch on and off.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Asr,
    Codebook,
    LayerWeights,
    Ssl,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Asr, ParamGroup::Codebook, ParamGroup::LayerWeights, ParamGroup::Ssl];

    pub fn of(name: &str) -> Self {
        if name.starts_with("ssl.") {
            ParamGroup::Ssl
        } else if name == CENTROIDS {
            ParamGroup::Codebook
        } else if name == LAYER_LOGITS {
            ParamGroup::LayerWeights
        } else {
            ParamGroup::Asr
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Asr => "asr",
            ParamGroup::Codebook => "codebook",
            ParamGroup::LayerWeights => "layer_weights",
            ParamGroup::Ssl => "ssl",
        }
    }
}

/// Groups that train during `epoch`.
pub fn trainable_groups(regime: Regime, mode: LayerMode, schedule: &Schedule, epoch: usize) -> Vec<ParamGroup> {
    let mut groups = vec![ParamGroup::Asr];
    let past_warmup = epoch >= schedule.warmup_epochs;
    if regime != Regime::Baseline && past_warmup {
        groups.push(ParamGroup::Codebook);
        if mode == LayerMode::MultiLayer {
            groups.push(ParamGroup::LayerWeights);
        }
    }
    if regime == Regime::FullFinetune {
        let ssl_from = match mode {
            LayerMode::MultiLayer => schedule.ssl_unfreeze_epoch,
            LayerMode::SingleLayer(_) => schedule.warmup_epochs,
        };
        if epoch >= ssl_from {
            groups.push(ParamGroup::Ssl);
        }
    }
    groups
}

/// Parameters, optimizer state and the RNG driving shuffles and Gumbel noise.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: ExperimentConfig,
    pub params: ParamSet,
    pub optimizer: Adam,
    /// Number of completed epochs.
    pub epoch: usize,
    pub spec: PipelineSpec,
    pub rng: SeededRng,
    /// The k-means fit the codebook was initialized from (discrete mode only).
    pub init_fit: Option<KMeansFit>,
}

/// One row of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total_loss: f64,
    pub asr_loss: f64,
    pub km_loss: f64,
    pub tau: f64,
    /// Training-pass accuracy, with sampled tokens.
    pub frame_acc: f64,
    pub regime: Regime,
    pub trainable_set: Vec<ParamGroup>,
    /// Mean per-step gradient L2 norm of each group, in [`ParamGroup::ALL`] order.
    pub grad_norms: [f64; 4],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub frame_accuracy: f64,
    pub mean_asr_loss: f64,
    pub frames: usize,
}

impl TrainState {
    pub fn regime(&self) -> Regime {
        self.config.regime
    }

    pub fn schedule(&self) -> &Schedule {
        &self.config.schedule
    }

    pub fn is_discrete(&self) -> bool {
        self.spec.tokenizer == TokenizerMode::Discrete
    }

    pub fn codebook(&self) -> Result<Codebook> {
        Codebook::new(self.params.value(CENTROIDS)?.clone(), self.spec.sigma_sq)
    }

    /// Features handed to the tokenizer, via the plain (untaped) forward pass.
    pub fn features(&self, frames: &Matrix) -> Result<Matrix> {
        features_of(&self.params, self.spec.layer_mode, frames)
    }

    /// Inference tokens: nearest centroid, no noise.
    pub fn tokenize(&self, dataset: &Dataset) -> Result<Vec<TokenSequence>> {
        let codebook = self.codebook()?;
        dataset
            .utterances
            .iter()
            .map(|u| Ok(TokenSequence::new(u.utt_id.clone(), tokenize_inference(&self.features(&u.frames)?, &codebook)?)))
            .collect()
    }

    /// Hard tokens of the taped training forward pass for the given temperature and noise.
    pub fn training_tokens(&self, frames: &Matrix, tau: f64, noise: &Matrix) -> Result<Vec<usize>> {
        let labels = vec![0; frames.rows()];
        let mut tape = Tape::new(&self.params, StMode::Hard);
        let vars = record_joint_loss(&mut tape, &self.spec, frames, &labels, tau, noise)?;
        let hard = vars
            .hard
            .ok_or_else(|| Error::invalid("training_tokens", "continuous mode has no tokens"))?;
        Ok(tape.value(hard).row_iter().map(argmax).collect())
    }

    /// Sets trainable flags for `epoch`; parameters that become trainable get
    /// fresh optimizer moments.
    fn apply_trainable(&mut self, epoch: usize) -> Vec<ParamGroup> {
        let groups = trainable_groups(self.config.regime, self.spec.layer_mode, &self.config.schedule, epoch);
        let names: Vec<String> = self.params.names().map(str::to_owned).collect();
        for name in names {
            let on = groups.contains(&ParamGroup::of(&name));
            if on && !self.params.is_trainable(&name) {
                self.optimizer.reset(&name);
            }
            self.params.set_trainable(&name, on).expect("name came from the set");
        }
        let mut present: Vec<ParamGroup> = groups
            .into_iter()
            .filter(|g| self.params.names().any(|n| ParamGroup::of(n) == *g))
            .collect();
        present.sort();
        present
    }
}

fn features_of(params: &ParamSet, mode: LayerMode, frames: &Matrix) -> Result<Matrix> {
    let stack = upstream_forward(frames, params)?;
    match mode {
        LayerMode::SingleLayer(idx) => stack
            .layers
            .into_iter()
            .nth(idx)
            .ok_or_else(|| Error::invalid("features", format!("layer {idx} out of range"))),
        LayerMode::MultiLayer => {
            let logits = params.value(LAYER_LOGITS)?.as_slice().to_vec();
            weighted_sum(&stack, &LayerWeights { logits })
        }
    }
}

/// Builds the initial state: extractor, flat layer weights, k-means codebook
/// over the frozen features, and a Gaussian classifier.
pub fn init_training(config: &ExperimentConfig, dataset: &Dataset) -> Result<TrainState> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::invalid("init_training", "empty dataset"));
    }
    let synth = &config.synth;
    let depth = synth.layer_count();
    let root = SeededRng::new(config.seed);
    let mut params = ParamSet::new();
    let extractor = match config.extractor_init {
        ExtractorInit::Pretrained => SynthWorld::new(synth)?.pretrained_extractor(synth),
        ExtractorInit::Random => {
            let mut rng = root.fork(4);
            let std = config.downstream.init_std;
            (0..depth)
                .map(|l| {
                    let input = if l == 0 { synth.input_dim } else { synth.feature_dim };
                    (rng.normal_matrix(input, synth.feature_dim, std), Matrix::zeros(1, synth.feature_dim))
                })
                .collect()
        }
    };
    insert_extractor(&mut params, extractor, false);
    if config.mode == LayerMode::MultiLayer {
        params.insert(LAYER_LOGITS, Matrix::zeros(1, depth), false);
    }

    let tokenizer = config.tokenizer.mode();
    let init_fit = match tokenizer {
        TokenizerMode::Discrete => {
            let mut data = Vec::with_capacity(dataset.frame_count() * synth.feature_dim);
            for u in &dataset.utterances {
                data.extend_from_slice(features_of(&params, config.mode, &u.frames)?.as_slice());
            }
            let all = Matrix::from_vec(dataset.frame_count(), synth.feature_dim, data)?;
            let fit = init_codebook(&all, config.tokenizer.k, config.tokenizer.sigma_sq, &mut root.fork(1))?;
            params.insert(CENTROIDS, fit.codebook.centroids.clone(), false);
            Some(fit)
        }
        TokenizerMode::Continuous => None,
    };
    let (k, input_dim) = match tokenizer {
        TokenizerMode::Discrete => (Some(config.tokenizer.k), config.downstream.embedding_dim),
        TokenizerMode::Continuous => (None, synth.feature_dim),
    };
    insert_downstream(&mut params, &config.downstream, k, input_dim, synth.phone_count, &mut root.fork(2));

    let mut state = TrainState {
        config: config.clone(),
        params,
        optimizer: Adam::new(config.optimizer),
        epoch: 0,
        spec: PipelineSpec {
            layer_mode: config.mode,
            tokenizer,
            depth,
            sigma_sq: config.tokenizer.sigma_sq,
            alpha: config.alpha,
        },
        rng: root.fork(3),
        init_fit,
    };
    state.apply_trainable(0);
    Ok(state)
}

/// Rebuilds an evaluation-ready state from a saved parameter set.
pub fn restore(config: &ExperimentConfig, params: ParamSet) -> Result<TrainState> {
    config.validate()?;
    let depth = crate::upstream::extractor_depth(&params);
    if depth != config.synth.layer_count() {
        return Err(Error::invalid(
            "restore",
            format!("parameters hold {depth} extractor layers, config expects {}", config.synth.layer_count()),
        ));
    }
    let tokenizer = config.tokenizer.mode();
    if tokenizer == TokenizerMode::Discrete && !params.contains(CENTROIDS) {
        return Err(Error::invalid("restore", "parameters have no codebook"));
    }
    Ok(TrainState {
        config: config.clone(),
        params,
        optimizer: Adam::new(config.optimizer),
        epoch: config.schedule.total_epochs,
        spec: PipelineSpec {
            layer_mode: config.mode,
            tokenizer,
            depth,
            sigma_sq: config.tokenizer.sigma_sq,
            alpha: config.alpha,
        },
        rng: SeededRng::new(config.seed).fork(3),
        init_fit: None,
    })
}

fn abort(term: impl Into<String>, epoch: usize, step: usize) -> Error {
    Error::NumericalAbort {
        term: term.into(),
        epoch,
        step,
    }
}

/// Runs the next epoch: shuffled single-utterance Adam steps.
pub fn train_epoch(state: &mut TrainState, dataset: &Dataset) -> Result<EpochRecord> {
    let epoch = state.epoch;
    if epoch >= state.config.schedule.total_epochs {
        return Err(Error::invalid("train_epoch", "all scheduled epochs already ran"));
    }
    if dataset.is_empty() {
        return Err(Error::invalid("train_epoch", "empty dataset"));
    }
    let trainable_set = state.apply_trainable(epoch);
    let tau = temperature_at(&state.config.schedule, epoch)?;
    let k = state.config.tokenizer.k;

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    state.rng.shuffle(&mut order);

    let (mut total, mut asr, mut km) = (0.0, 0.0, 0.0);
    let mut correct = 0usize;
    let mut frames = 0usize;
    let mut grad_norms = [0.0; 4];
    for (step, &u) in order.iter().enumerate() {
        let utt = &dataset.utterances[u];
        let t = utt.frames.rows();
        let noise = match state.spec.tokenizer {
            TokenizerMode::Discrete => gumbel_noise(&mut state.rng, t, k),
            TokenizerMode::Continuous => Matrix::zeros(1, 1),
        };
        let (breakdown, vars, mut tape) =
            joint_loss(&state.params, &state.spec, &utt.frames, &utt.phones, tau, &noise, StMode::Hard)?;
        if let Some(term) = breakdown.first_non_finite() {
            return Err(abort(term, epoch, step));
        }
        debug_assert!(breakdown.is_additive());
        total += breakdown.total;
        asr += breakdown.asr_term;
        km += breakdown.km_term;
        correct += tape
            .value(vars.logits)
            .row_iter()
            .zip(&utt.phones)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        frames += t;

        let grads = tape.backward()?;
        drop(tape);
        for (slot, group) in grad_norms.iter_mut().zip(ParamGroup::ALL) {
            let sq: f64 = grads
                .iter()
                .filter(|(n, _)| ParamGroup::of(n) == group)
                .map(|(_, g)| g.frobenius_sq())
                .sum();
            *slot += sq.sqrt();
        }
        state.optimizer.step(&mut state.params, &grads)?;
        if let Some((name, _)) = state.params.iter().find(|(_, p)| !p.value.is_finite()) {
            return Err(abort(format!("parameter {name}"), epoch, step));
        }
    }

    let n = dataset.len() as f64;
    state.epoch += 1;
    Ok(EpochRecord {
        epoch,
        total_loss: total / n,
        asr_loss: asr / n,
        km_loss: km / n,
        tau,
        frame_acc: correct as f64 / frames as f64,
        regime: state.config.regime,
        trainable_set,
        grad_norms: grad_norms.map(|g| g / n),
    })
}

/// Trains every remaining scheduled epoch.
pub fn train(state: &mut TrainState, dataset: &Dataset) -> Result<Vec<EpochRecord>> {
    let remaining = state.config.schedule.total_epochs.saturating_sub(state.epoch);
    let mut history = Vec::with_capacity(remaining);
    for _ in 0..remaining {
        let record = train_epoch(state, dataset)?;
        log::debug!(
            "epoch {} loss {:.4} acc {:.4} tau {:.3}",
            record.epoch,
            record.total_loss,
            record.frame_acc,
            record.tau
        );
        history.push(record);
    }
    Ok(history)
}

/// Deterministic evaluation: nearest-centroid tokens, argmax predictions.
pub fn evaluate(state: &TrainState, dataset: &Dataset) -> Result<EvalResult> {
    let codebook = match state.spec.tokenizer {
        TokenizerMode::Discrete => Some(state.codebook()?),
        TokenizerMode::Continuous => None,
    };
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    let mut frames = 0usize;
    for u in &dataset.utterances {
        let feats = state.features(&u.frames)?;
        let input = match &codebook {
            Some(cb) => embed_ids(&tokenize_inference(&feats, cb)?, state.params.value(EMBEDDING)?)?,
            None => feats,
        };
        let logits = classify(&input, &state.params)?;
        loss_sum += crate::downstream::asr_loss(&logits, &u.phones)? * u.phones.len() as f64;
        correct += logits
            .row_iter()
            .zip(&u.phones)
            .filter(|(row, &label)| argmax(row) == label)
            .count();
        frames += u.phones.len();
    }
    if frames == 0 {
        return Err(Error::invalid("evaluate", "empty dataset"));
    }
    Ok(EvalResult {
        frame_accuracy: correct as f64 / frames as f64,
        mean_asr_loss: loss_sum / frames as f64,
        frames,
    })
}
