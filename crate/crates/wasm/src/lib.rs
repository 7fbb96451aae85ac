//! Browser bindings for three small interactive views of the tokenizer:
//! the soft/Gumbel assignment of one point, the temperature schedule, and a
//! tiny BASELINE vs FULL_FINETUNE training run.
//!
//! Every export returns a JSON string. The plain-Rust functions in [`demo`]
//! do the work so they can be tested without a JS host.

use wasm_bindgen::prelude::*;

pub mod demo {
    use difftok::config::{ExperimentConfig, TokenizerConfig};
    use difftok::experiment::run_in_memory;
    use difftok::math::{Matrix, SeededRng};
    use difftok::tokenizer::{assign_soft, gumbel_noise, gumbel_sample_with_noise, harden, Codebook};
    use difftok::trainer::{temperature_at, Decay, Regime, Schedule};
    use difftok::upstream::SynthConfig;
    use serde_json::{json, Value};

    pub type DemoResult = Result<Value, String>;

    fn err(e: impl std::fmt::Display) -> String {
        e.to_string()
    }

    /// Four fixed centroids on the corners of a square in the plane.
    pub fn demo_codebook(sigma_sq: f64) -> Result<Codebook, String> {
        let c = Matrix::from_rows(&[[-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0], [1.0, 1.0]]).map_err(err)?;
        Codebook::new(c, sigma_sq).map_err(err)
    }

    /// Soft assignment, one Gumbel-Softmax draw and its hard token for the
    /// point `(x, y)` against [`demo_codebook`].
    pub fn soft_assignment(x: f64, y: f64, sigma_sq: f64, tau: f64, seed: u64) -> DemoResult {
        let codebook = demo_codebook(sigma_sq)?;
        let point = Matrix::from_rows(&[[x, y]]).map_err(err)?;
        let probs = assign_soft(&point, &codebook).map_err(err)?;
        let noise = gumbel_noise(&mut SeededRng::new(seed), 1, codebook.k());
        let relaxed = gumbel_sample_with_noise(&probs, tau, &noise).map_err(err)?;
        let (ids, _) = harden(&relaxed);
        let nearest = difftok::tokenizer::tokenize_inference(&point, &codebook).map_err(err)?;
        let centroids: Vec<&[f64]> = (0..codebook.k()).map(|j| codebook.centroid(j)).collect();
        Ok(json!({
            "centroids": centroids,
            "soft": probs.row(0),
            "relaxed": relaxed.row(0),
            "token": ids[0],
            "nearest": nearest[0],
        }))
    }

    /// Temperature for every epoch of a schedule.
    pub fn temperature_schedule(tau_start: f64, tau_end: f64, epochs: usize, linear: bool) -> DemoResult {
        let schedule = Schedule {
            total_epochs: epochs,
            warmup_epochs: 0,
            ssl_unfreeze_epoch: 0,
            tau_start,
            tau_end,
            decay: if linear { Decay::Linear } else { Decay::Exponential },
        };
        schedule.validate().map_err(err)?;
        let taus = (0..epochs)
            .map(|e| temperature_at(&schedule, e))
            .collect::<difftok::Result<Vec<f64>>>()
            .map_err(err)?;
        Ok(json!(taus))
    }

    /// Largest world the page lets a user train in one click.
    pub const MAX_UTTERANCES: usize = 120;
    pub const MAX_EPOCHS: usize = 30;

    /// A small config sized for interactive use.
    pub fn small_config(k: usize, phone_scale: f64, epochs: usize, seed: u64) -> Result<ExperimentConfig, String> {
        if !(3..=MAX_EPOCHS).contains(&epochs) {
            return Err(format!("epochs must be in 3..={MAX_EPOCHS}"));
        }
        let mut config = ExperimentConfig {
            synth: SynthConfig {
                utterance_count: MAX_UTTERANCES,
                eval_utterance_count: 40,
                frames_per_utterance: 30,
                phone_scale,
                ..SynthConfig::default()
            },
            tokenizer: TokenizerConfig { k, ..TokenizerConfig::default() },
            ..ExperimentConfig::default()
        }
        .with_seed(seed);
        config.schedule.total_epochs = epochs;
        config.schedule.warmup_epochs = epochs / 3;
        config.schedule.ssl_unfreeze_epoch = 2 * epochs / 3;
        config.validate().map_err(err)?;
        Ok(config)
    }

    /// Trains BASELINE and FULL_FINETUNE on the same small world and reports
    /// held-out accuracy, token metrics and the per-epoch loss curves.
    pub fn train_pair(k: usize, phone_scale: f64, epochs: usize, seed: u64) -> DemoResult {
        let base = small_config(k, phone_scale, epochs, seed)?;
        let mut rows = Vec::new();
        for regime in [Regime::Baseline, Regime::FullFinetune] {
            let outcome = run_in_memory(&ExperimentConfig { regime, ..base.clone() }).map_err(err)?;
            let report = outcome.report.as_ref().ok_or("discrete run produced no token report")?;
            rows.push(json!({
                "regime": regime.as_str(),
                "frame_accuracy": outcome.eval.frame_accuracy,
                "pnmi": report.pnmi,
                "nqe": report.nqe,
                "tsl": report.tsl,
                "mter_pct": report.mter_pct,
                "loss": outcome.history.iter().map(|h| h.total_loss).collect::<Vec<_>>(),
                "tau": outcome.history.iter().map(|h| h.tau).collect::<Vec<_>>(),
            }));
        }
        Ok(Value::Array(rows))
    }
}

fn to_js(result: demo::DemoResult) -> Result<String, JsError> {
    result.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = softAssignment)]
pub fn soft_assignment(x: f64, y: f64, sigma_sq: f64, tau: f64, seed: u32) -> Result<String, JsError> {
    to_js(demo::soft_assignment(x, y, sigma_sq, tau, seed as u64))
}

#[wasm_bindgen(js_name = temperatureSchedule)]
pub fn temperature_schedule(tau_start: f64, tau_end: f64, epochs: u32, linear: bool) -> Result<String, JsError> {
    to_js(demo::temperature_schedule(tau_start, tau_end, epochs as usize, linear))
}

#[wasm_bindgen(js_name = trainPair)]
pub fn train_pair(k: u32, phone_scale: f64, epochs: u32, seed: u32) -> Result<String, JsError> {
    to_js(demo::train_pair(k as usize, phone_scale, epochs as usize, seed as u64))
}
