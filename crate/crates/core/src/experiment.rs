//! End-to-end runs: generate both splits, train, evaluate on the held-out
//! split, compute token metrics, and compare regimes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autodiff::{gradcheck_with_fault, GradcheckReport, ParamSet, Primitive};
use crate::config::ExperimentConfig;
use crate::downstream::{
    insert_downstream, record_joint_loss, DownstreamConfig, LayerMode, PipelineSpec, TokenizerMode, CENTROIDS,
};
use crate::error::{Error, Result};
use crate::io::{self, MetricsFile, Provenance};
use crate::math::{Matrix, SeededRng};
use crate::metrics::{mean_mter, pnmi, tsl, MetricReport, NqeAccumulator};
use crate::tokenizer::{gumbel_noise, Codebook, TokenSequence};
use crate::trainer::{evaluate, init_training, train, EpochRecord, EvalResult, Regime, TrainState};
use crate::upstream::{
    insert_extractor, synth_generate_split, Dataset, LayerMix, Split, SynthConfig, SynthWorld, LAYER_LOGITS,
};

/// Everything one run produces, before anything touches the disk.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub config_hash: String,
    pub history: Vec<EpochRecord>,
    pub eval: EvalResult,
    /// Token metrics on the held-out split; `None` in continuous mode.
    pub report: Option<MetricReport>,
    /// Held-out inference tokens; empty in continuous mode.
    pub tokens: Vec<TokenSequence>,
    pub init_codebook: Option<Codebook>,
    pub state: TrainState,
}

pub fn generate_splits(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    Ok((
        synth_generate_split(&config.synth, Split::Train)?,
        synth_generate_split(&config.synth, Split::Eval)?,
    ))
}

/// PNMI, NQE, TSL and MTER of the state's inference tokens on `dataset`.
pub fn metric_report(state: &TrainState, dataset: &Dataset, config_hash: &str) -> Result<(MetricReport, Vec<TokenSequence>)> {
    let codebook = state.codebook()?;
    let tokens = state.tokenize(dataset)?;
    let mut nqe = NqeAccumulator::default();
    let mut all_phones = Vec::with_capacity(dataset.frame_count());
    let mut all_tokens = Vec::with_capacity(dataset.frame_count());
    for (u, seq) in dataset.utterances.iter().zip(&tokens) {
        nqe.add(&state.features(&u.frames)?, &seq.ids, &codebook)?;
        all_phones.extend_from_slice(&u.phones);
        all_tokens.extend_from_slice(&seq.ids);
    }
    let groups: Vec<Vec<&[usize]>> = dataset
        .transcript_groups()
        .into_iter()
        .filter(|g| g.len() >= 2)
        .map(|g| g.into_iter().map(|i| tokens[i].ids.as_slice()).collect())
        .collect();
    let report = MetricReport {
        pnmi: pnmi(&all_phones, &all_tokens)?.value,
        nqe: nqe.finish()?,
        tsl: tsl(&tokens.iter().map(|t| t.ids.as_slice()).collect::<Vec<_>>(), true)?,
        mter_pct: mean_mter(&groups, true)?,
        n_frames: all_phones.len(),
        n_groups: groups.len(),
        config_hash: config_hash.to_owned(),
    };
    Ok((report, tokens))
}

/// Trains on the training split and scores the held-out split.
pub fn run_in_memory(config: &ExperimentConfig) -> Result<RunOutcome> {
    config.validate()?;
    let (train_set, eval_set) = generate_splits(config)?;
    run_with_data(config, &train_set, &eval_set)
}

/// [`run_in_memory`] on datasets the caller already has.
pub fn run_with_data(config: &ExperimentConfig, train_set: &Dataset, eval_set: &Dataset) -> Result<RunOutcome> {
    config.validate()?;
    let config_hash = config.hash();
    let mut state = init_training(config, train_set)?;
    let init_codebook = state.is_discrete().then(|| state.codebook()).transpose()?;
    let history = train(&mut state, train_set)?;
    let eval = evaluate(&state, eval_set)?;
    let (report, tokens) = if state.is_discrete() {
        let (r, t) = metric_report(&state, eval_set, &config_hash)?;
        (Some(r), t)
    } else {
        (None, Vec::new())
    };
    Ok(RunOutcome {
        config_hash,
        history,
        eval,
        report,
        tokens,
        init_codebook,
        state,
    })
}

/// One row of a regime comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub regime: Regime,
    pub frame_accuracy: f64,
    pub pnmi: f64,
    pub nqe: f64,
    pub tsl: f64,
    pub mter_pct: f64,
    pub config_hash: String,
}

impl ComparisonRow {
    pub fn from_outcome(outcome: &RunOutcome) -> Result<Self> {
        let r = outcome
            .report
            .as_ref()
            .ok_or_else(|| Error::invalid("compare_regimes", "continuous mode has no token metrics"))?;
        Ok(Self {
            regime: outcome.state.regime(),
            frame_accuracy: outcome.eval.frame_accuracy,
            pnmi: r.pnmi,
            nqe: r.nqe,
            tsl: r.tsl,
            mter_pct: r.mter_pct,
            config_hash: outcome.config_hash.clone(),
        })
    }
}

/// Runs `base` once per regime. Up to `threads` runs execute concurrently;
/// rows come back in the order of `regimes` regardless.
pub fn compare_regimes(base: &ExperimentConfig, regimes: &[Regime], threads: usize) -> Result<Vec<(ComparisonRow, RunOutcome)>> {
    if regimes.len() < 2 {
        return Err(Error::invalid("compare_regimes", format!("need at least 2 regimes, got {}", regimes.len())));
    }
    let configs: Vec<ExperimentConfig> = regimes
        .iter()
        .map(|&regime| ExperimentConfig { regime, ..base.clone() })
        .collect();
    let threads = threads.clamp(1, configs.len());
    let mut results: Vec<Option<Result<RunOutcome>>> = (0..configs.len()).map(|_| None).collect();
    for (chunk_cfg, chunk_out) in configs.chunks(threads).zip(results.chunks_mut(threads)) {
        std::thread::scope(|s| {
            for (cfg, slot) in chunk_cfg.iter().zip(chunk_out.iter_mut()) {
                s.spawn(move || *slot = Some(run_in_memory(cfg)));
            }
        });
    }
    results
        .into_iter()
        .map(|r| {
            let outcome = r.expect("every slot is filled")?;
            Ok((ComparisonRow::from_outcome(&outcome)?, outcome))
        })
        .collect()
}

impl RunOutcome {
    pub fn provenance(&self) -> Provenance {
        Provenance {
            config_hash: self.config_hash.clone(),
            seed: self.state.config.seed,
        }
    }

    pub fn metrics_file(&self) -> MetricsFile {
        let r = self.report.as_ref();
        MetricsFile {
            regime: self.state.regime(),
            frame_accuracy: self.eval.frame_accuracy,
            mean_asr_loss: self.eval.mean_asr_loss,
            pnmi: r.map(|r| r.pnmi),
            nqe: r.map(|r| r.nqe),
            tsl: r.map(|r| r.tsl),
            mter_pct: r.map(|r| r.mter_pct),
            n_frames: self.eval.frames,
            n_groups: r.map_or(0, |r| r.n_groups),
            config_hash: self.config_hash.clone(),
            seed: self.state.config.seed,
        }
    }
}

/// File names inside a run directory.
pub mod files {
    pub const CONFIG: &str = "config.json";
    pub const TRAIN_DATA: &str = "train.jsonl";
    pub const EVAL_DATA: &str = "eval.jsonl";
    pub const HISTORY: &str = "history.csv";
    pub const PARAMS: &str = "params.json";
    pub const CODEBOOK_INIT: &str = "codebook_init.json";
    pub const CODEBOOK: &str = "codebook.json";
    pub const TOKENS: &str = "tokens.txt";
    pub const METRICS: &str = "metrics.json";
}

/// Loads `path` if it holds the dataset for `data_hash`, otherwise generates
/// and saves it.
fn load_or_generate(path: &Path, synth: &SynthConfig, split: Split, data_hash: &str, prov: &Provenance) -> Result<Dataset> {
    if path.exists() {
        match io::load_dataset(path) {
            Ok((data, hash)) if hash == data_hash => {
                log::info!("reusing {}", path.display());
                return Ok(data);
            }
            Ok(_) => log::info!("{} was generated from a different config; regenerating", path.display()),
            Err(e) => log::warn!("{} unreadable ({e}); regenerating", path.display()),
        }
    }
    let data = synth_generate_split(synth, split)?;
    io::save_dataset(path, &data, data_hash, prov)?;
    Ok(data)
}

/// Writes both dataset splits into `dir` (reusing matching files).
pub fn generate_data(config: &ExperimentConfig, dir: &Path) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let prov = Provenance {
        config_hash: config.hash(),
        seed: config.seed,
    };
    let data_hash = io::data_hash(&config.synth);
    let train_set = load_or_generate(&dir.join(files::TRAIN_DATA), &config.synth, Split::Train, &data_hash, &prov)?;
    let eval_set = load_or_generate(&dir.join(files::EVAL_DATA), &config.synth, Split::Eval, &data_hash, &prov)?;
    Ok((train_set, eval_set))
}

/// Full run with every artifact written under `config.out_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<(RunOutcome, PathBuf)> {
    config.validate()?;
    let dir = config
        .out_dir
        .clone()
        .ok_or_else(|| Error::config("out_dir", "an output directory is required"))?;
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    io::save_json(&dir.join(files::CONFIG), config)?;
    let (train_set, eval_set) = generate_data(config, &dir)?;
    let outcome = run_with_data(config, &train_set, &eval_set)?;
    write_outcome(&outcome, &dir)?;
    Ok((outcome, dir))
}

/// Writes history, parameters, codebooks, tokens and metrics of a finished run.
pub fn write_outcome(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    let prov = outcome.provenance();
    io::save_history(&dir.join(files::HISTORY), &outcome.history, &prov)?;
    io::save_params(&dir.join(files::PARAMS), &outcome.state.params, &prov)?;
    if let Some(init) = &outcome.init_codebook {
        io::save_codebook(&dir.join(files::CODEBOOK_INIT), init, &prov)?;
        io::save_codebook(&dir.join(files::CODEBOOK), &outcome.state.codebook()?, &prov)?;
        io::save_tokens(&dir.join(files::TOKENS), &outcome.tokens, &prov)?;
    }
    io::save_metrics(&dir.join(files::METRICS), &outcome.metrics_file())
}

pub const COMPARISON_HEADER: &str = "regime,frame_accuracy,pnmi,nqe,tsl,mter_pct,config_hash";

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = format!("{COMPARISON_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.regime,
            io::fmt_f64(r.frame_accuracy),
            io::fmt_f64(r.pnmi),
            io::fmt_f64(r.nqe),
            io::fmt_f64(r.tsl),
            io::fmt_f64(r.mter_pct),
            r.config_hash
        ));
    }
    out
}

/// Size of the synthetic instance a gradient check runs on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub frames: usize,
    pub dim: usize,
    pub k: usize,
    pub layers: usize,
    pub classes: usize,
    pub alpha: f64,
    pub mode: LayerMode,
    pub tau: f64,
    pub eps: f64,
    pub tolerance: f64,
    pub seed: u64,
    /// Freeze every parameter; the check then passes vacuously.
    pub freeze_all: bool,
    /// Test hook: corrupt the backward rule of one primitive.
    pub fault: Option<Primitive>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            dim: 4,
            k: 3,
            layers: 2,
            classes: 3,
            alpha: 0.5,
            mode: LayerMode::MultiLayer,
            tau: 1.3,
            eps: 1e-5,
            tolerance: 1e-4,
            seed: 17,
            freeze_all: false,
            fault: None,
        }
    }
}

pub const GRADCHECK_MAX_FRAMES: usize = 16;
pub const GRADCHECK_MAX_K: usize = 8;
pub const GRADCHECK_MAX_LAYERS: usize = 4;

impl GradcheckConfig {
    pub fn validate(&self) -> Result<()> {
        let bound = |field: &str, v: usize, lo: usize, hi: usize| {
            if v < lo || v > hi {
                Err(Error::config(format!("gradcheck.{field}"), format!("must lie in [{lo}, {hi}], got {v}")))
            } else {
                Ok(())
            }
        };
        bound("frames", self.frames, 1, GRADCHECK_MAX_FRAMES)?;
        bound("k", self.k, 2, GRADCHECK_MAX_K)?;
        bound("layers", self.layers, 1, GRADCHECK_MAX_LAYERS)?;
        bound("dim", self.dim, 4, 16)?;
        bound("classes", self.classes, 2, 16)?;
        if let LayerMode::SingleLayer(i) = self.mode {
            if i >= self.layers {
                return Err(Error::config("gradcheck.mode.single_layer", format!("layer {i} out of range")));
            }
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::config("gradcheck.alpha", "must be finite and >= 0"));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::config("gradcheck.tau", "must be finite and > 0"));
        }
        Ok(())
    }
}

/// Parameters, graph description and one utterance for a gradient check.
pub struct GradcheckInstance {
    pub params: ParamSet,
    pub spec: PipelineSpec,
    pub frames: Matrix,
    pub labels: Vec<usize>,
    pub noise: Matrix,
}

/// Builds a small random instance of the full joint loss. Weights start at
/// the world-matched extractor plus jitter so no tanh sits exactly at zero.
pub fn gradcheck_instance(cfg: &GradcheckConfig) -> Result<GradcheckInstance> {
    cfg.validate()?;
    let synth = SynthConfig {
        input_dim: cfg.dim,
        feature_dim: cfg.dim,
        phone_count: cfg.classes,
        speaker_count: 2,
        readers_per_transcript: 2,
        layer_mix: (0..cfg.layers)
            .map(|l| LayerMix {
                phone: 0.8 + 0.2 * (l % 2) as f64,
                speaker: 0.4 + 0.1 * l as f64,
            })
            .collect(),
        frames_per_utterance: cfg.frames,
        utterance_count: 2,
        eval_utterance_count: 2,
        seed: cfg.seed,
        ..SynthConfig::default()
    };
    let world = SynthWorld::new(&synth)?;
    let data = synth_generate_split(&synth, Split::Train)?;
    let mut rng = SeededRng::new(cfg.seed).fork(5);
    let mut layers = world.pretrained_extractor(&synth);
    for (w, b) in layers.iter_mut() {
        w.axpy(1.0, &rng.normal_matrix(w.rows(), w.cols(), 0.2))?;
        b.axpy(1.0, &rng.normal_matrix(1, b.cols(), 0.1))?;
    }
    let trainable = !cfg.freeze_all;
    let mut params = ParamSet::new();
    insert_extractor(&mut params, layers, trainable);
    params.insert(CENTROIDS, rng.normal_matrix(cfg.k, cfg.dim, 0.5), trainable);
    if cfg.mode == LayerMode::MultiLayer {
        params.insert(LAYER_LOGITS, rng.normal_matrix(1, cfg.layers, 0.3), trainable);
    }
    let head = DownstreamConfig {
        embedding_dim: cfg.dim,
        hidden_dim: 5,
        init_std: 0.5,
    };
    insert_downstream(&mut params, &head, Some(cfg.k), cfg.dim, cfg.classes, &mut rng);
    if cfg.freeze_all {
        params.freeze_all();
    }
    let u = &data.utterances[0];
    Ok(GradcheckInstance {
        params,
        spec: PipelineSpec {
            layer_mode: cfg.mode,
            tokenizer: TokenizerMode::Discrete,
            depth: cfg.layers,
            sigma_sq: 1.0,
            alpha: cfg.alpha,
        },
        frames: u.frames.clone(),
        labels: u.phones.clone(),
        noise: gumbel_noise(&mut rng, cfg.frames, cfg.k),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckOutcome {
    pub passed: bool,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub worst_param: Option<String>,
    /// Trainable parameters only.
    pub report: GradcheckReport,
    pub elapsed_secs: f64,
}

impl GradcheckOutcome {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "passed": self.passed,
            "tolerance": self.tolerance,
            "max_rel_err": self.max_rel_err,
            "worst_param": self.worst_param,
            "params": self.report.to_json(),
        })
    }
}

/// Gradient check of the full joint loss against central differences.
pub fn cmd_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckOutcome> {
    let start = Instant::now();
    let inst = gradcheck_instance(cfg)?;
    let full = gradcheck_with_fault(&inst.params, cfg.eps, cfg.fault, |t| {
        Ok(record_joint_loss(t, &inst.spec, &inst.frames, &inst.labels, cfg.tau, &inst.noise)?.total)
    })?;
    let report = full.trainable_only();
    let worst = report.worst().map(|(n, e)| (n.to_owned(), e));
    Ok(GradcheckOutcome {
        passed: report.passes(cfg.tolerance),
        tolerance: cfg.tolerance,
        max_rel_err: worst.as_ref().map_or(0.0, |w| w.1),
        worst_param: worst.map(|w| w.0),
        report,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}
