//! Synthetic speech-like data and the toy multi-layer feature extractor.
//!
//! A seeded "world" fixes an orthonormal basis of the input space, a phone
//! codebook living in one subspace, speaker offsets living in another, and a
//! first-order Markov chain over phones. Raw frames are
//! `phone_code + speaker_offset + noise` expressed in that basis.
//!
//! The extractor is a chain of tanh layers, `h_ℓ = tanh(h_{ℓ−1} W_ℓ + b_ℓ)`.
//! Its initial weights play the role of a pretrained model: each layer
//! rescales the phone and speaker subspaces so that layer ℓ carries roughly
//! `layer_mix[ℓ].phone` of the phone signal and `layer_mix[ℓ].speaker` of the
//! speaker signal.

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamSet, Tape, Var};
use crate::error::{Error, Result};
use crate::math::{softmax_t, Matrix, SeededRng};

/// How much phone and speaker signal a layer carries, relative to the input.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMix {
    pub phone: f64,
    pub speaker: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub phone_count: usize,
    pub speaker_count: usize,
    pub frames_per_utterance: usize,
    pub utterance_count: usize,
    /// Size of the held-out split generated from the same world.
    pub eval_utterance_count: usize,
    pub input_dim: usize,
    pub feature_dim: usize,
    pub layer_mix: Vec<LayerMix>,
    pub noise_std: f64,
    /// Norm scale of phone codes.
    pub phone_scale: f64,
    /// Norm scale of speaker offsets.
    pub speaker_scale: f64,
    /// Gain applied by every layer to directions carrying neither phone nor speaker signal.
    pub nuisance_gain: f64,
    pub self_loop: f64,
    /// Fraction of utterances whose transcript is read by several speakers.
    pub shared_fraction: f64,
    pub readers_per_transcript: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            phone_count: 12,
            speaker_count: 8,
            frames_per_utterance: 60,
            utterance_count: 600,
            eval_utterance_count: 200,
            input_dim: 16,
            feature_dim: 16,
            layer_mix: vec![
                LayerMix { phone: 0.6, speaker: 0.9 },
                LayerMix { phone: 1.0, speaker: 0.5 },
                LayerMix { phone: 0.7, speaker: 1.0 },
            ],
            noise_std: 0.3,
            phone_scale: 2.0,
            speaker_scale: 1.0,
            nuisance_gain: 0.5,
            self_loop: 0.6,
            shared_fraction: 0.5,
            readers_per_transcript: 4,
            seed: 1234,
        }
    }
}

impl SynthConfig {
    pub fn layer_count(&self) -> usize {
        self.layer_mix.len()
    }

    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("synth.{name}");
        if self.phone_count < 2 {
            return Err(Error::config(f("phone_count"), "must be >= 2"));
        }
        if self.speaker_count < 1 {
            return Err(Error::config(f("speaker_count"), "must be >= 1"));
        }
        if self.frames_per_utterance < 1 {
            return Err(Error::config(f("frames_per_utterance"), "must be >= 1"));
        }
        if self.utterance_count < 1 {
            return Err(Error::config(f("utterance_count"), "must be >= 1"));
        }
        if self.input_dim < 2 {
            return Err(Error::config(f("input_dim"), "must be >= 2"));
        }
        if self.feature_dim < 2 {
            return Err(Error::config(f("feature_dim"), "must be >= 2"));
        }
        if self.layer_mix.is_empty() {
            return Err(Error::config(f("layer_mix"), "need at least one layer"));
        }
        for (i, m) in self.layer_mix.iter().enumerate() {
            if !(0.0..=1.0).contains(&m.phone) || !(0.0..=1.0).contains(&m.speaker) {
                return Err(Error::config(format!("synth.layer_mix[{i}]"), "coefficients must lie in [0, 1]"));
            }
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("phone_scale", self.phone_scale),
            ("speaker_scale", self.speaker_scale),
            ("nuisance_gain", self.nuisance_gain),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(f(name), "must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.self_loop) {
            return Err(Error::config(f("self_loop"), "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return Err(Error::config(f("shared_fraction"), "must lie in [0, 1]"));
        }
        if self.shared_fraction > 0.0
            && (self.readers_per_transcript < 2 || self.readers_per_transcript > self.speaker_count)
        {
            return Err(Error::config(
                f("readers_per_transcript"),
                "must be between 2 and speaker_count when transcripts are shared",
            ));
        }
        Ok(())
    }

    /// Dimensions of the (phone, speaker) subspaces.
    fn subspace_dims(&self) -> (usize, usize) {
        let d = self.input_dim.min(self.feature_dim);
        let phone = (d / 2).max(1);
        let speaker = (d / 4).max(1).min(d - phone);
        (phone, speaker)
    }
}

/// Which part of the generated data an utterance belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub transcript_id: String,
    pub speaker_id: usize,
    pub phones: Vec<usize>,
    /// `T x D_in` raw frames.
    pub frames: Matrix,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn frame_count(&self) -> usize {
        self.utterances.iter().map(|u| u.phones.len()).sum()
    }

    /// Utterance indices grouped by transcript id, in first-seen order.
    pub fn transcript_groups(&self) -> Vec<Vec<usize>> {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: std::collections::HashMap<&str, Vec<usize>> = Default::default();
        for (i, u) in self.utterances.iter().enumerate() {
            let entry = groups.entry(u.transcript_id.as_str()).or_default();
            if entry.is_empty() {
                order.push(u.transcript_id.as_str());
            }
            entry.push(i);
        }
        order.into_iter().map(|t| groups.remove(t).unwrap()).collect()
    }
}

/// Markov chain over phone labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PhoneChain {
    pub transition: Matrix,
}

impl PhoneChain {
    fn generate(phone_count: usize, self_loop: f64, rng: &mut SeededRng) -> Self {
        let mut transition = Matrix::zeros(phone_count, phone_count);
        for i in 0..phone_count {
            let weights: Vec<f64> = (0..phone_count)
                .map(|j| if i == j { 0.0 } else { 0.2 + rng.uniform() })
                .collect();
            let total: f64 = weights.iter().sum();
            for (j, w) in weights.iter().enumerate() {
                transition[(i, j)] = if i == j { self_loop } else { (1.0 - self_loop) * w / total };
            }
        }
        Self { transition }
    }

    fn sample(&self, len: usize, rng: &mut SeededRng) -> Vec<usize> {
        let n = self.transition.rows();
        let mut out = Vec::with_capacity(len);
        let mut state = rng.below(n);
        out.push(state);
        for _ in 1..len {
            state = rng.categorical(self.transition.row(state));
            out.push(state);
        }
        out
    }
}

/// Everything a seed fixes about the synthetic domain.
#[derive(Clone, Debug)]
pub struct SynthWorld {
    pub input_basis: Matrix,
    pub feature_basis: Matrix,
    pub phone_codes: Matrix,
    pub speaker_codes: Matrix,
    pub chain: PhoneChain,
    phone_dims: usize,
    speaker_dims: usize,
}

/// Random orthonormal `n x n` basis (columns) via Gram–Schmidt.
fn orthonormal_basis(n: usize, rng: &mut SeededRng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for c in &cols {
                let proj = crate::math::dot(&v, c);
                for (vi, ci) in v.iter_mut().zip(c) {
                    *vi -= proj * ci;
                }
            }
        }
        let norm = crate::math::dot(&v, &v).sqrt();
        if norm > 1e-6 {
            cols.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let mut m = Matrix::zeros(n, n);
    for (j, c) in cols.iter().enumerate() {
        for (i, &v) in c.iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    m
}

impl SynthWorld {
    pub fn new(config: &SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::new(config.seed).fork(0);
        let input_basis = orthonormal_basis(config.input_dim, &mut rng);
        let feature_basis = orthonormal_basis(config.feature_dim, &mut rng);
        let (dp, ds) = config.subspace_dims();
        let phone_codes = rng.normal_matrix(config.phone_count, dp, config.phone_scale / (dp as f64).sqrt());
        let speaker_codes = rng.normal_matrix(config.speaker_count, ds, config.speaker_scale / (ds as f64).sqrt());
        let chain = PhoneChain::generate(config.phone_count, config.self_loop, &mut rng);
        Ok(Self {
            input_basis,
            feature_basis,
            phone_codes,
            speaker_codes,
            chain,
            phone_dims: dp,
            speaker_dims: ds,
        })
    }

    /// Raw frame for one (phone, speaker) pair before noise.
    fn clean_frame(&self, phone: usize, speaker: usize) -> Vec<f64> {
        let n = self.input_basis.rows();
        let mut out = vec![0.0; n];
        let p = self.phone_codes.row(phone);
        let s = self.speaker_codes.row(speaker);
        for (a, &c) in p.iter().enumerate() {
            for (i, o) in out.iter_mut().enumerate() {
                *o += c * self.input_basis[(i, a)];
            }
        }
        for (b, &c) in s.iter().enumerate() {
            let col = self.phone_dims + b;
            for (i, o) in out.iter_mut().enumerate() {
                *o += c * self.input_basis[(i, col)];
            }
        }
        out
    }

    /// Initial extractor weights: layer ℓ maps the phone/speaker/nuisance
    /// directions of its input onto those of its output with gains chosen
    /// from `layer_mix`.
    pub fn pretrained_extractor(&self, config: &SynthConfig) -> Vec<(Matrix, Matrix)> {
        let d = config.feature_dim;
        let r = config.input_dim.min(d);
        let mut layers = Vec::with_capacity(config.layer_count());
        let mut prev = LayerMix { phone: 1.0, speaker: 1.0 };
        for (l, mix) in config.layer_mix.iter().enumerate() {
            let ratio = |now: f64, before: f64| if before > 1e-9 { now / before } else { 0.0 };
            let gains: Vec<f64> = (0..r)
                .map(|a| {
                    if a < self.phone_dims {
                        ratio(mix.phone, prev.phone)
                    } else if a < self.phone_dims + self.speaker_dims {
                        ratio(mix.speaker, prev.speaker)
                    } else {
                        config.nuisance_gain
                    }
                })
                .collect();
            let in_basis = if l == 0 { &self.input_basis } else { &self.feature_basis };
            let in_dim = in_basis.rows();
            // W = Q_in[:, :r] · diag(g) · Q_out[:, :r]ᵀ so that h W maps basis directions across.
            let mut w = Matrix::zeros(in_dim, d);
            for i in 0..in_dim {
                for j in 0..d {
                    w[(i, j)] = (0..r)
                        .map(|a| in_basis[(i, a)] * gains[a] * self.feature_basis[(j, a)])
                        .sum();
                }
            }
            layers.push((w, Matrix::zeros(1, d)));
            prev = *mix;
        }
        layers
    }
}

/// Generates one split of the dataset. Both splits share the world fixed by
/// `config.seed`; each split draws utterances from its own stream.
pub fn synth_generate_split(config: &SynthConfig, split: Split) -> Result<Dataset> {
    let world = SynthWorld::new(config)?;
    let (count, stream, prefix) = match split {
        Split::Train => (config.utterance_count, 1, "train"),
        Split::Eval => (config.eval_utterance_count, 2, "eval"),
    };
    let mut rng = SeededRng::new(config.seed).fork(stream);
    let t = config.frames_per_utterance;

    // (transcript index, speaker) for every utterance
    let mut plan: Vec<(usize, usize)> = Vec::with_capacity(count);
    let readers = config.readers_per_transcript;
    let shared_groups = if config.shared_fraction > 0.0 {
        ((config.shared_fraction * count as f64) / readers as f64).round() as usize
    } else {
        0
    };
    let mut transcript = 0;
    for _ in 0..shared_groups {
        if plan.len() + readers > count {
            break;
        }
        let mut speakers: Vec<usize> = (0..config.speaker_count).collect();
        rng.shuffle(&mut speakers);
        for &s in &speakers[..readers] {
            plan.push((transcript, s));
        }
        transcript += 1;
    }
    while plan.len() < count {
        plan.push((transcript, rng.below(config.speaker_count)));
        transcript += 1;
    }

    let mut scripts: Vec<Option<Vec<usize>>> = vec![None; transcript];
    let mut utterances = Vec::with_capacity(count);
    for (n, &(tr, speaker)) in plan.iter().enumerate() {
        let phones = scripts[tr]
            .get_or_insert_with(|| world.chain.sample(t, &mut rng))
            .clone();
        let mut frames = Matrix::zeros(t, config.input_dim);
        for (i, &p) in phones.iter().enumerate() {
            let clean = world.clean_frame(p, speaker);
            for (o, c) in frames.row_mut(i).iter_mut().zip(clean) {
                *o = c + config.noise_std * rng.normal();
            }
        }
        utterances.push(Utterance {
            utt_id: format!("{prefix}{n:05}"),
            transcript_id: format!("{prefix}-tr{tr:05}"),
            speaker_id: speaker,
            phones,
            frames,
        });
    }
    Ok(Dataset { utterances })
}

/// Training split.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    synth_generate_split(config, Split::Train)
}

/// Per-layer features, `L` matrices of shape `T x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub layers: Vec<Matrix>,
}

impl FeatureStack {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }
}

pub fn layer_weight_name(layer: usize) -> String {
    format!("ssl.layer{}.weight", layer + 1)
}

pub fn layer_bias_name(layer: usize) -> String {
    format!("ssl.layer{}.bias", layer + 1)
}

pub const LAYER_LOGITS: &str = "layer_weights.logits";

/// Adds the extractor parameters to `params`.
pub fn insert_extractor(params: &mut ParamSet, layers: Vec<(Matrix, Matrix)>, trainable: bool) {
    for (l, (w, b)) in layers.into_iter().enumerate() {
        params.insert(layer_weight_name(l), w, trainable);
        params.insert(layer_bias_name(l), b, trainable);
    }
}

pub fn extractor_depth(params: &ParamSet) -> usize {
    (0..).take_while(|&l| params.contains(&layer_weight_name(l))).count()
}

/// Plain forward pass of the extractor.
pub fn upstream_forward(frames: &Matrix, params: &ParamSet) -> Result<FeatureStack> {
    let depth = extractor_depth(params);
    if depth == 0 {
        return Err(Error::invalid("upstream_forward", "no extractor layers in parameter set"));
    }
    let mut layers = Vec::with_capacity(depth);
    let mut h = frames.clone();
    for l in 0..depth {
        let w = params.value(&layer_weight_name(l))?;
        let b = params.value(&layer_bias_name(l))?;
        if b.shape() != (1, w.cols()) {
            return Err(Error::dims("upstream_forward", format!("1x{}", w.cols()), crate::math::fmt_shape(b.shape())));
        }
        let mut z = h.matmul(w)?;
        for i in 0..z.rows() {
            for (v, bv) in z.row_mut(i).iter_mut().zip(b.as_slice()) {
                *v = (*v + bv).tanh();
            }
        }
        layers.push(z.clone());
        h = z;
    }
    Ok(FeatureStack { layers })
}

/// Records the extractor; returns one handle per layer.
pub fn record_upstream(tape: &mut Tape<'_>, frames: &Matrix, depth: usize) -> Result<Vec<Var>> {
    let mut h = tape.constant(frames.clone());
    let mut out = Vec::with_capacity(depth);
    for l in 0..depth {
        let w = tape.param(&layer_weight_name(l))?;
        let b = tape.param(&layer_bias_name(l))?;
        let z = tape.matmul(h, w)?;
        let z = tape.add_row(z, b)?;
        h = tape.tanh(z);
        out.push(h);
    }
    Ok(out)
}

/// Softmax-parameterized layer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub logits: Vec<f64>,
}

impl LayerWeights {
    /// Flat weights (all-zero logits).
    pub fn flat(layers: usize) -> Self {
        Self {
            logits: vec![0.0; layers],
        }
    }

    pub fn effective(&self) -> Result<Vec<f64>> {
        softmax_t(&self.logits, 1.0)
    }
}

/// `Σ_ℓ w_ℓ · layer_ℓ`.
pub fn weighted_sum(stack: &FeatureStack, weights: &LayerWeights) -> Result<Matrix> {
    if stack.layer_count() != weights.logits.len() {
        return Err(Error::dims("weighted_sum", weights.logits.len(), stack.layer_count()));
    }
    let w = weights.effective()?;
    let mut out = stack.layers[0].scale(w[0]);
    for (layer, &wl) in stack.layers.iter().zip(&w).skip(1) {
        out.axpy(wl, layer)?;
    }
    Ok(out)
}

/// Records `Σ_ℓ softmax(logits)_ℓ · layer_ℓ`.
pub fn record_weighted_sum(tape: &mut Tape<'_>, layers: &[Var], logits: Var) -> Result<Var> {
    let (_, n) = tape.value(logits).shape();
    if n != layers.len() {
        return Err(Error::dims("weighted_sum", n, layers.len()));
    }
    let w = tape.softmax_rows(logits, 1.0)?;
    let mut acc = tape.scale_by_entry(layers[0], w, 0)?;
    for (l, &layer) in layers.iter().enumerate().skip(1) {
        let term = tape.scale_by_entry(layer, w, l)?;
        acc = tape.add(acc, term)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradcheck, StMode};

    fn small_config() -> SynthConfig {
        SynthConfig {
            utterance_count: 40,
            eval_utterance_count: 12,
            frames_per_utterance: 20,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn noiseless_single_speaker_frames_repeat() {
        let cfg = SynthConfig {
            noise_std: 0.0,
            speaker_count: 1,
            shared_fraction: 0.0,
            ..small_config()
        };
        let ds = synth_generate(&cfg).unwrap();
        let mut seen: Vec<Option<Vec<f64>>> = vec![None; cfg.phone_count];
        for u in &ds.utterances {
            for (i, &p) in u.phones.iter().enumerate() {
                let row = u.frames.row(i).to_vec();
                match &seen[p] {
                    Some(prev) => assert_eq!(prev, &row),
                    None => seen[p] = Some(row),
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_splits_differ() {
        let cfg = small_config();
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a, b);
        let e = synth_generate_split(&cfg, Split::Eval).unwrap();
        assert_eq!(e.len(), 12);
        assert_ne!(a.utterances[0].frames, e.utterances[0].frames);
    }

    #[test]
    fn shared_transcripts_have_equal_phones_and_distinct_speakers() {
        let ds = synth_generate(&SynthConfig::default()).unwrap();
        let groups = ds.transcript_groups();
        let multi: Vec<_> = groups.iter().filter(|g| g.len() > 1).collect();
        assert_eq!(multi.len(), 75);
        for g in groups {
            let first = &ds.utterances[g[0]];
            let mut speakers = std::collections::BTreeSet::new();
            for &i in &g {
                assert_eq!(ds.utterances[i].phones, first.phones);
                assert!(speakers.insert(ds.utterances[i].speaker_id));
            }
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        let bad = SynthConfig { phone_count: 1, ..small_config() };
        assert!(matches!(synth_generate(&bad), Err(Error::Config { field, .. }) if field == "synth.phone_count"));
        let bad = SynthConfig {
            layer_mix: vec![LayerMix { phone: 1.5, speaker: 0.0 }],
            ..small_config()
        };
        assert!(synth_generate(&bad).is_err());
        let bad = SynthConfig { feature_dim: 1, ..small_config() };
        assert!(synth_generate(&bad).is_err());
    }

    #[test]
    fn phone_marginals_match_stationary_distribution() {
        let cfg = SynthConfig {
            utterance_count: 200,
            frames_per_utterance: 60,
            shared_fraction: 0.0,
            ..SynthConfig::default()
        };
        let world = SynthWorld::new(&cfg).unwrap();
        let ds = synth_generate(&cfg).unwrap();
        // Oracle: power iteration on the transition matrix.
        let n = cfg.phone_count;
        let mut pi = vec![1.0 / n as f64; n];
        for _ in 0..2000 {
            let mut next = vec![0.0; n];
            for i in 0..n {
                for j in 0..n {
                    next[j] += pi[i] * world.chain.transition[(i, j)];
                }
            }
            pi = next;
        }
        let mut counts = vec![0.0; n];
        for u in &ds.utterances {
            for &p in &u.phones {
                counts[p] += 1.0;
            }
        }
        let total = ds.frame_count() as f64;
        assert!(total >= 1e4);
        for (c, p) in counts.iter().zip(&pi) {
            assert!((c / total - p).abs() < 0.02, "{c} {p}");
        }
        assert!(pi.iter().any(|p| (p - 1.0 / n as f64).abs() > 0.005), "stationary law should not be uniform");
    }

    fn extractor_params(cfg: &SynthConfig) -> ParamSet {
        let world = SynthWorld::new(cfg).unwrap();
        let mut p = ParamSet::new();
        insert_extractor(&mut p, world.pretrained_extractor(cfg), true);
        p
    }

    #[test]
    fn zero_extractor_gives_zero_stack() {
        let mut p = ParamSet::new();
        insert_extractor(
            &mut p,
            vec![(Matrix::zeros(4, 3), Matrix::zeros(1, 3)), (Matrix::zeros(3, 3), Matrix::zeros(1, 3))],
            false,
        );
        let x = SeededRng::new(1).normal_matrix(5, 4, 1.0);
        let stack = upstream_forward(&x, &p).unwrap();
        assert_eq!(stack.layer_count(), 2);
        assert!(stack.layers.iter().all(|l| l.as_slice().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn identity_layer_is_near_identity_for_small_inputs() {
        let mut p = ParamSet::new();
        insert_extractor(&mut p, vec![(Matrix::identity(3), Matrix::zeros(1, 3))], false);
        let x = SeededRng::new(2).normal_matrix(6, 3, 0.01);
        let stack = upstream_forward(&x, &p).unwrap();
        for (a, b) in stack.layers[0].as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() <= b.abs().powi(3) / 3.0 + 1e-18);
        }
    }

    #[test]
    fn upstream_shape_mismatch() {
        let p = extractor_params(&small_config());
        assert!(upstream_forward(&Matrix::zeros(4, 7), &p).is_err());
    }

    #[test]
    fn recorded_upstream_matches_plain_and_gradchecks() {
        let cfg = SynthConfig {
            input_dim: 4,
            feature_dim: 4,
            layer_mix: vec![LayerMix { phone: 0.8, speaker: 0.6 }, LayerMix { phone: 1.0, speaker: 0.3 }],
            ..small_config()
        };
        let mut params = extractor_params(&cfg);
        let mut rng = SeededRng::new(4);
        for l in 0..2 {
            let w = params.get_mut(&layer_weight_name(l)).unwrap();
            w.value.axpy(1.0, &rng.normal_matrix(4, 4, 0.3)).unwrap();
        }
        let x = rng.normal_matrix(6, 4, 0.7);
        let plain = upstream_forward(&x, &params).unwrap();
        let mut tape = Tape::new(&params, StMode::Hard);
        let vars = record_upstream(&mut tape, &x, 2).unwrap();
        for (v, l) in vars.iter().zip(&plain.layers) {
            assert_eq!(tape.value(*v), l);
        }
        let readout = rng.normal_matrix(6, 4, 1.0);
        let report = gradcheck(&params, 1e-5, |t| {
            let layers = record_upstream(t, &x, 2)?;
            let r = t.constant(readout.clone());
            let m = t.mul(layers[1], r)?;
            Ok(t.sum_all(m))
        })
        .unwrap();
        let w1 = &report.params[&layer_weight_name(0)];
        assert!(w1.max_rel_err < 1e-5, "{report:?}");
    }

    #[test]
    fn weighted_sum_examples() {
        let mut rng = SeededRng::new(5);
        let a = rng.normal_matrix(4, 3, 1.0);
        let b = rng.normal_matrix(4, 3, 1.0);
        let one = FeatureStack { layers: vec![a.clone()] };
        assert_eq!(weighted_sum(&one, &LayerWeights::flat(1)).unwrap(), a);

        let twin = FeatureStack { layers: vec![a.clone(), a.clone()] };
        let out = weighted_sum(&twin, &LayerWeights::flat(2)).unwrap();
        for (x, y) in out.as_slice().iter().zip(a.as_slice()) {
            assert!((x - y).abs() < 1e-15);
        }

        let pair = FeatureStack { layers: vec![a.clone(), b.clone()] };
        let picked = weighted_sum(&pair, &LayerWeights { logits: vec![0.0, 40.0] }).unwrap();
        for (x, y) in picked.as_slice().iter().zip(b.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(weighted_sum(&pair, &LayerWeights::flat(3)).is_err());
    }

    #[test]
    fn flat_weights_give_layer_mean() {
        let mut rng = SeededRng::new(6);
        let layers: Vec<Matrix> = (0..3).map(|_| rng.normal_matrix(5, 2, 1.0)).collect();
        let stack = FeatureStack { layers: layers.clone() };
        let w = LayerWeights::flat(3).effective().unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let out = weighted_sum(&stack, &LayerWeights::flat(3)).unwrap();
        for i in 0..out.len() {
            let mean = layers.iter().map(|l| l.as_slice()[i]).sum::<f64>() / 3.0;
            assert!((out.as_slice()[i] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn recorded_weighted_sum_gradchecks() {
        let mut rng = SeededRng::new(7);
        let mut params = ParamSet::new();
        params.insert(LAYER_LOGITS, rng.normal_matrix(1, 3, 0.5), true);
        let layers: Vec<Matrix> = (0..3).map(|_| rng.normal_matrix(4, 2, 1.0)).collect();
        let readout = rng.normal_matrix(4, 2, 1.0);
        let report = gradcheck(&params, 1e-5, |t| {
            let vars: Vec<Var> = layers.iter().map(|l| t.constant(l.clone())).collect();
            let logits = t.param(LAYER_LOGITS)?;
            let ws = record_weighted_sum(t, &vars, logits)?;
            let r = t.constant(readout.clone());
            let m = t.mul(ws, r)?;
            Ok(t.sum_all(m))
        })
        .unwrap();
        assert!(report.params[LAYER_LOGITS].max_rel_err < 1e-6, "{report:?}");
    }

    #[test]
    fn middle_layer_is_most_phone_informative() {
        let cfg = SynthConfig::default();
        let world = SynthWorld::new(&cfg).unwrap();
        let params = extractor_params(&cfg);
        // Every (phone, speaker) pair as one noise-free frame.
        let (np, ns) = (cfg.phone_count, cfg.speaker_count);
        let rows: Vec<Vec<f64>> = (0..np)
            .flat_map(|p| (0..ns).map(move |s| (p, s)))
            .map(|(p, s)| world.clean_frame(p, s))
            .collect();
        let stack = upstream_forward(&Matrix::from_rows(&rows).unwrap(), &params).unwrap();
        let ratio = |layer: &Matrix| {
            let d = layer.cols();
            let mean_over = |pick: &dyn Fn(usize, usize) -> bool, count: usize| {
                let mut m = vec![0.0; d];
                for (idx, r) in layer.row_iter().enumerate() {
                    if pick(idx / ns, idx % ns) {
                        for (a, v) in m.iter_mut().zip(r) {
                            *a += v / count as f64;
                        }
                    }
                }
                m
            };
            let grand = mean_over(&|_, _| true, np * ns);
            let spread = |means: Vec<Vec<f64>>| {
                means.iter().map(|m| crate::math::sq_dist_unchecked(m, &grand)).sum::<f64>() / means.len() as f64
            };
            let phone = spread((0..np).map(|p| mean_over(&|q, _| q == p, ns)).collect());
            let speaker = spread((0..ns).map(|s| mean_over(&|_, t| t == s, np)).collect());
            phone / speaker
        };
        let r: Vec<f64> = stack.layers.iter().map(ratio).collect();
        assert!(r[1] > r[0] && r[1] > r[2], "{r:?}");
    }
}
