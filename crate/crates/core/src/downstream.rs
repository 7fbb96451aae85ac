//! Token embedding, the frame classifier standing in for the recognizer, and
//! the joint objective `L = L_asr + α · L_km / T`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{cross_entropy_mean, ParamSet, StMode, Tape, Var};
use crate::error::{Error, Result};
use crate::math::{Matrix, SeededRng};
use crate::tokenizer::{record_diffkm, record_kmeans_loss};
use crate::upstream::{record_upstream, record_weighted_sum, LAYER_LOGITS};

pub const EMBEDDING: &str = "asr.embedding";
pub const HIDDEN_WEIGHT: &str = "asr.hidden.weight";
pub const HIDDEN_BIAS: &str = "asr.hidden.bias";
pub const OUTPUT_WEIGHT: &str = "asr.output.weight";
pub const OUTPUT_BIAS: &str = "asr.output.bias";
pub const CENTROIDS: &str = "codebook.centroids";

/// Which upstream output feeds the tokenizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerMode {
    /// One fixed layer (0-based index).
    SingleLayer(usize),
    /// Softmax-weighted sum of all layers.
    MultiLayer,
}

/// Discrete tokens, or the continuous features passed straight through.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerMode {
    #[default]
    Discrete,
    Continuous,
}

/// Static description of the recorded graph.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PipelineSpec {
    pub layer_mode: LayerMode,
    pub tokenizer: TokenizerMode,
    pub depth: usize,
    pub sigma_sq: f64,
    pub alpha: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub embedding_dim: usize,
    pub hidden_dim: usize,
    pub init_std: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 16,
            hidden_dim: 32,
            init_std: 0.1,
        }
    }
}

/// Adds θ_asr to `params`. `input_dim` is the embedding width for discrete
/// tokens, or the feature width in continuous mode (no embedding table).
pub fn insert_downstream(
    params: &mut ParamSet,
    config: &DownstreamConfig,
    k: Option<usize>,
    input_dim: usize,
    classes: usize,
    rng: &mut SeededRng,
) {
    let std = config.init_std;
    if let Some(k) = k {
        params.insert(EMBEDDING, rng.normal_matrix(k, input_dim, std), true);
    }
    params.insert(HIDDEN_WEIGHT, rng.normal_matrix(input_dim, config.hidden_dim, std), true);
    params.insert(HIDDEN_BIAS, Matrix::zeros(1, config.hidden_dim), true);
    params.insert(OUTPUT_WEIGHT, rng.normal_matrix(config.hidden_dim, classes, std), true);
    params.insert(OUTPUT_BIAS, Matrix::zeros(1, classes), true);
}

/// `h̃ · E`: the embedding row of each frame's token.
pub fn embed(hard_onehot: &Matrix, embedding: &Matrix) -> Result<Matrix> {
    if hard_onehot.cols() != embedding.rows() {
        return Err(Error::dims("embed", format!("{} tokens", embedding.rows()), hard_onehot.cols()));
    }
    hard_onehot.matmul(embedding)
}

/// Embedding lookup by id, identical to [`embed`] on the one-hot rows.
pub fn embed_ids(ids: &[usize], embedding: &Matrix) -> Result<Matrix> {
    let mut out = Matrix::zeros(ids.len(), embedding.cols());
    for (i, &id) in ids.iter().enumerate() {
        if id >= embedding.rows() {
            return Err(Error::invalid("embed_ids", format!("token {id} out of range")));
        }
        out.row_mut(i).copy_from_slice(embedding.row(id));
    }
    Ok(out)
}

/// Frame logits of the two-layer classifier.
pub fn classify(input: &Matrix, params: &ParamSet) -> Result<Matrix> {
    let affine = |x: &Matrix, w: &str, b: &str| -> Result<Matrix> {
        let mut z = x.matmul(params.value(w)?)?;
        let bias = params.value(b)?;
        for i in 0..z.rows() {
            for (v, bv) in z.row_mut(i).iter_mut().zip(bias.as_slice()) {
                *v += bv;
            }
        }
        Ok(z)
    };
    let hidden = affine(input, HIDDEN_WEIGHT, HIDDEN_BIAS)?.map(f64::tanh);
    affine(&hidden, OUTPUT_WEIGHT, OUTPUT_BIAS)
}

pub fn record_classifier(tape: &mut Tape<'_>, input: Var) -> Result<Var> {
    let w1 = tape.param(HIDDEN_WEIGHT)?;
    let b1 = tape.param(HIDDEN_BIAS)?;
    let z = tape.matmul(input, w1)?;
    let z = tape.add_row(z, b1)?;
    let h = tape.tanh(z);
    let w2 = tape.param(OUTPUT_WEIGHT)?;
    let b2 = tape.param(OUTPUT_BIAS)?;
    let z = tape.matmul(h, w2)?;
    tape.add_row(z, b2)
}

/// Mean frame cross-entropy.
pub fn asr_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    if logits.rows() != labels.len() {
        return Err(Error::dims("asr_loss", logits.rows(), labels.len()));
    }
    if labels.is_empty() {
        return Err(Error::invalid("asr_loss", "no frames"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= logits.cols()) {
        return Err(Error::invalid("asr_loss", format!("label {bad} out of range for {} classes", logits.cols())));
    }
    Ok(cross_entropy_mean(logits, labels).0)
}

/// The three terms of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub asr_term: f64,
    pub km_term: f64,
    pub alpha: f64,
}

impl LossBreakdown {
    pub fn is_additive(&self) -> bool {
        (self.total - (self.asr_term + self.alpha * self.km_term)).abs() <= 1e-12 * self.total.abs().max(1.0)
    }

    pub fn first_non_finite(&self) -> Option<&'static str> {
        [("total", self.total), ("asr_term", self.asr_term), ("km_term", self.km_term)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
    }
}

/// Handles into one recorded joint-loss graph.
#[derive(Clone, Copy, Debug)]
pub struct JointVars {
    pub total: Var,
    pub asr: Var,
    pub km: Option<Var>,
    pub features: Var,
    pub hard: Option<Var>,
    pub logits: Var,
}

/// Records upstream → (weighted sum) → differentiable k-means → embedding →
/// classifier → losses. `noise` is the Gumbel noise for this pass.
pub fn record_joint_loss(
    tape: &mut Tape<'_>,
    spec: &PipelineSpec,
    frames: &Matrix,
    labels: &[usize],
    tau: f64,
    noise: &Matrix,
) -> Result<JointVars> {
    let t = frames.rows();
    let layers = record_upstream(tape, frames, spec.depth)?;
    let features = match spec.layer_mode {
        LayerMode::SingleLayer(idx) => *layers
            .get(idx)
            .ok_or_else(|| Error::invalid("joint_loss", format!("layer {idx} out of range")))?,
        LayerMode::MultiLayer => {
            let logits = tape.param(LAYER_LOGITS)?;
            record_weighted_sum(tape, &layers, logits)?
        }
    };
    match spec.tokenizer {
        TokenizerMode::Continuous => {
            let logits = record_classifier(tape, features)?;
            let asr = tape.cross_entropy(logits, labels)?;
            Ok(JointVars {
                total: asr,
                asr,
                km: None,
                features,
                hard: None,
                logits,
            })
        }
        TokenizerMode::Discrete => {
            let centroids = tape.param(CENTROIDS)?;
            let km_vars = record_diffkm(tape, features, centroids, spec.sigma_sq, tau, noise)?;
            let emb_table = tape.param(EMBEDDING)?;
            let embedded = tape.matmul(km_vars.hard, emb_table)?;
            let logits = record_classifier(tape, embedded)?;
            let asr = tape.cross_entropy(logits, labels)?;
            let km_sum = record_kmeans_loss(tape, features, km_vars.hard, centroids)?;
            let km = tape.scale(km_sum, 1.0 / t as f64);
            let weighted = tape.scale(km, spec.alpha);
            let total = tape.add(asr, weighted)?;
            Ok(JointVars {
                total,
                asr,
                km: Some(km),
                features,
                hard: Some(km_vars.hard),
                logits,
            })
        }
    }
}

/// Records the joint loss for one utterance and returns its breakdown with
/// the tape, ready for [`Tape::backward`].
pub fn joint_loss<'p>(
    params: &'p ParamSet,
    spec: &PipelineSpec,
    frames: &Matrix,
    labels: &[usize],
    tau: f64,
    noise: &Matrix,
    mode: StMode,
) -> Result<(LossBreakdown, JointVars, Tape<'p>)> {
    let mut tape = Tape::new(params, mode);
    let vars = record_joint_loss(&mut tape, spec, frames, labels, tau, noise)?;
    let total = tape.set_loss(vars.total)?;
    let asr_term = tape.value(vars.asr)[(0, 0)];
    let km_term = vars.km.map_or(0.0, |v| tape.value(v)[(0, 0)]);
    Ok((
        LossBreakdown {
            total,
            asr_term,
            km_term,
            alpha: spec.alpha,
        },
        vars,
        tape,
    ))
}
