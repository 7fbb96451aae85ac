use std::path::Path;

use difftok::autodiff::ParamSet;
use difftok::config::{ExperimentConfig, TokenizerConfig};
use difftok::downstream::LayerMode;
use difftok::experiment::{self, files, run_experiment, run_in_memory, GradcheckConfig};
use difftok::io::{self, Provenance};
use difftok::math::Matrix;
use difftok::trainer::{Regime, Schedule};
use difftok::upstream::SynthConfig;
use difftok::Error;

fn small(regime: Regime) -> ExperimentConfig {
    ExperimentConfig {
        synth: SynthConfig { utterance_count: 30, eval_utterance_count: 16, frames_per_utterance: 20, ..SynthConfig::default() },
        tokenizer: TokenizerConfig { k: 6, ..TokenizerConfig::default() },
        regime,
        schedule: Schedule { total_epochs: 5, warmup_epochs: 2, ssl_unfreeze_epoch: 3, ..Schedule::default() },
        ..ExperimentConfig::default()
    }
}

fn bits(m: &Matrix) -> Vec<u64> {
    m.as_slice().iter().map(|v| v.to_bits()).collect()
}

fn params_bits(p: &ParamSet) -> Vec<(String, bool, (usize, usize), Vec<u64>)> {
    p.iter().map(|(n, q)| (n.to_owned(), q.trainable, q.value.shape(), bits(&q.value))).collect()
}

fn in_dir(config: &ExperimentConfig, dir: &Path) -> ExperimentConfig {
    ExperimentConfig { out_dir: Some(dir.to_path_buf()), ..config.clone() }
}

#[test]
fn artifacts_round_trip_bit_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small(Regime::FullFinetune);
    let (outcome, dir) = run_experiment(&in_dir(&config, tmp.path())).unwrap();
    let prov = outcome.provenance();

    let (train_set, _) = experiment::generate_splits(&config).unwrap();
    let (loaded, hash) = io::load_dataset(&dir.join(files::TRAIN_DATA)).unwrap();
    assert_eq!(hash, io::data_hash(&config.synth));
    assert_eq!(loaded.utterances.len(), train_set.utterances.len());
    for (a, b) in loaded.utterances.iter().zip(&train_set.utterances) {
        assert_eq!((&a.utt_id, &a.transcript_id, a.speaker_id, &a.phones), (&b.utt_id, &b.transcript_id, b.speaker_id, &b.phones));
        assert_eq!(bits(&a.frames), bits(&b.frames));
    }

    let (params, p2) = io::load_params(&dir.join(files::PARAMS)).unwrap();
    assert_eq!(p2, prov);
    assert_eq!(params_bits(&params), params_bits(&outcome.state.params));

    let (codebook, _) = io::load_codebook(&dir.join(files::CODEBOOK)).unwrap();
    let trained = outcome.state.codebook().unwrap();
    assert_eq!(bits(&codebook.centroids), bits(&trained.centroids));
    assert_eq!(codebook.sigma_sq.to_bits(), trained.sigma_sq.to_bits());

    assert_eq!(io::load_tokens(&dir.join(files::TOKENS)).unwrap(), outcome.tokens);
    let history = io::load_history(&dir.join(files::HISTORY)).unwrap();
    assert_eq!(history, outcome.history);
    assert_eq!(io::load_metrics(&dir.join(files::METRICS)).unwrap(), outcome.metrics_file());

    // Saving what was loaded reproduces the same bytes.
    let again = tmp.path().join("again.json");
    io::save_params(&again, &params, &prov).unwrap();
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(dir.join(files::PARAMS)).unwrap());
}

#[test]
fn every_artifact_carries_hash_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small(Regime::FreezeSsl).with_seed(31);
    let (outcome, dir) = run_experiment(&in_dir(&config, tmp.path())).unwrap();
    let hash = outcome.config_hash.clone();
    assert_eq!(hash, config.hash());
    for f in [files::TRAIN_DATA, files::EVAL_DATA, files::HISTORY, files::PARAMS, files::CODEBOOK, files::CODEBOOK_INIT, files::TOKENS, files::METRICS] {
        let text = std::fs::read_to_string(dir.join(f)).unwrap();
        assert!(text.contains(&hash), "{f} lacks the config hash");
        assert!(text.contains("31"), "{f} lacks the seed");
    }
}

#[test]
fn baseline_codebook_equals_its_initialization() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, dir) = run_experiment(&in_dir(&small(Regime::Baseline), tmp.path())).unwrap();
    let init = std::fs::read(dir.join(files::CODEBOOK_INIT)).unwrap();
    let last = std::fs::read(dir.join(files::CODEBOOK)).unwrap();
    assert_eq!(init, last);

    let tmp = tempfile::tempdir().unwrap();
    let (_, dir) = run_experiment(&in_dir(&small(Regime::FullFinetune), tmp.path())).unwrap();
    assert_ne!(std::fs::read(dir.join(files::CODEBOOK_INIT)).unwrap(), std::fs::read(dir.join(files::CODEBOOK)).unwrap());
}

#[test]
fn rerun_is_byte_identical_and_reuses_data() {
    let tmp = tempfile::tempdir().unwrap();
    let config = in_dir(&small(Regime::FullFinetune), tmp.path());
    let (_, dir) = run_experiment(&config).unwrap();
    let read_all = |d: &Path| {
        [files::HISTORY, files::METRICS, files::PARAMS, files::TOKENS].map(|f| std::fs::read(d.join(f)).unwrap())
    };
    let first = read_all(&dir);
    let data_mtime = std::fs::metadata(dir.join(files::TRAIN_DATA)).unwrap().modified().unwrap();
    run_experiment(&config).unwrap();
    assert_eq!(first, read_all(&dir));
    assert_eq!(std::fs::metadata(dir.join(files::TRAIN_DATA)).unwrap().modified().unwrap(), data_mtime);
}

#[test]
fn invalid_layer_index_names_its_field() {
    let config = ExperimentConfig { mode: LayerMode::SingleLayer(3), ..small(Regime::Baseline) };
    match run_in_memory(&config) {
        Err(Error::Config { field, .. }) => assert_eq!(field, "mode.single_layer"),
        other => panic!("expected a config error, got {other:?}"),
    }
    let text = r#"{"mode": {"single_layer": 5}}"#;
    assert!(matches!(ExperimentConfig::from_json_str(text), Err(Error::Config { field, .. }) if field == "mode.single_layer"));
}

#[test]
fn run_experiment_requires_out_dir() {
    assert!(matches!(run_experiment(&small(Regime::Baseline)), Err(Error::Config { field, .. }) if field == "out_dir"));
}

#[test]
fn unwritable_directory_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let blocker = tmp.path().join("file");
    std::fs::write(&blocker, "not a directory").unwrap();
    let config = in_dir(&small(Regime::Baseline), &blocker.join("run"));
    assert!(matches!(run_experiment(&config), Err(Error::Io { .. })));
}

#[test]
fn comparison_preconditions_and_duplicates() {
    let config = small(Regime::Baseline);
    assert!(experiment::compare_regimes(&config, &[Regime::Baseline], 2).is_err());
    let rows = experiment::compare_regimes(&config, &[Regime::FullFinetune, Regime::FullFinetune, Regime::Baseline], 2).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0].0, rows[1].0);
    assert_eq!(rows[2].0.regime, Regime::Baseline);

    let csv = experiment::comparison_csv(&rows.iter().map(|r| r.0.clone()).collect::<Vec<_>>());
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], experiment::COMPARISON_HEADER);
    assert_eq!(lines[1], lines[2]);
}

#[test]
fn comparison_matches_sequential_runs() {
    let config = small(Regime::Baseline);
    let rows = experiment::compare_regimes(&config, &[Regime::Baseline, Regime::FreezeSsl], 2).unwrap();
    let solo = run_in_memory(&ExperimentConfig { regime: Regime::FreezeSsl, ..config }).unwrap();
    assert_eq!(rows[1].1.history, solo.history);
}

#[test]
fn gradcheck_command_cases() {
    let ok = experiment::cmd_gradcheck(&GradcheckConfig::default()).unwrap();
    assert!(ok.passed, "{:?}", ok.report);
    assert!(ok.max_rel_err < 1e-4);

    let broken = experiment::cmd_gradcheck(&GradcheckConfig {
        fault: Some(difftok::autodiff::Primitive::PairwiseSqDist),
        ..GradcheckConfig::default()
    })
    .unwrap();
    assert!(!broken.passed);
    let worst = broken.worst_param.unwrap();
    assert!(!worst.is_empty());
    assert!(broken.report.params.iter().any(|(n, c)| *n == worst && c.max_rel_err >= 1e-4));

    let frozen = experiment::cmd_gradcheck(&GradcheckConfig { freeze_all: true, ..GradcheckConfig::default() }).unwrap();
    assert!(frozen.passed);
    assert!(frozen.report.params.is_empty());

    for bad in [
        GradcheckConfig { frames: 17, ..GradcheckConfig::default() },
        GradcheckConfig { k: 9, ..GradcheckConfig::default() },
        GradcheckConfig { layers: 5, ..GradcheckConfig::default() },
    ] {
        assert!(matches!(experiment::cmd_gradcheck(&bad), Err(Error::Config { .. })));
    }
}

#[test]
fn continuous_topline_is_not_worse() {
    let discrete = run_in_memory(&small(Regime::FullFinetune)).unwrap();
    let mut cfg = small(Regime::FullFinetune);
    cfg.tokenizer.continuous = true;
    let continuous = run_in_memory(&cfg).unwrap();
    assert!(continuous.report.is_none());
    assert!(continuous.tokens.is_empty());
    let (c, d) = (continuous.eval.frame_accuracy, discrete.eval.frame_accuracy);
    assert!(c >= d || d - c < 0.02, "continuous {c} vs discrete {d}");
}

#[test]
fn metrics_report_is_consistent() {
    let outcome = run_in_memory(&small(Regime::FullFinetune)).unwrap();
    let r = outcome.report.as_ref().unwrap();
    assert!((0.0..=1.0).contains(&r.pnmi));
    assert!(r.nqe > 0.0 && r.tsl > 0.0 && r.mter_pct >= 0.0);
    assert_eq!(r.n_frames, 16 * 20);
    assert_eq!(outcome.tokens.len(), 16);
    let m = outcome.metrics_file();
    assert_eq!(m.pnmi, Some(r.pnmi));
    assert_eq!(m.n_frames, outcome.eval.frames);
}

#[test]
fn dataset_with_wrong_hash_is_regenerated() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small(Regime::Baseline);
    let other = ExperimentConfig { synth: SynthConfig { seed: 99, ..config.synth.clone() }, ..config.clone() };
    experiment::generate_data(&other, tmp.path()).unwrap();
    let stale = std::fs::read(tmp.path().join(files::TRAIN_DATA)).unwrap();
    experiment::generate_data(&config, tmp.path()).unwrap();
    let (_, hash) = io::load_dataset(&tmp.path().join(files::TRAIN_DATA)).unwrap();
    assert_eq!(hash, io::data_hash(&config.synth));
    assert_ne!(stale, std::fs::read(tmp.path().join(files::TRAIN_DATA)).unwrap());
}

#[test]
fn provenance_survives_token_file() {
    let tmp = tempfile::tempdir().unwrap();
    let prov = Provenance { config_hash: "abc".into(), seed: 4 };
    let toks = vec![difftok::tokenizer::TokenSequence::new("u0", vec![1, 1, 0]), difftok::tokenizer::TokenSequence::new("u1", vec![])];
    let path = tmp.path().join("t.txt");
    io::save_tokens(&path, &toks, &prov).unwrap();
    assert_eq!(io::load_tokens(&path).unwrap(), toks);
}
