//! On-disk artifacts. Floats are written with 17 significant digits so every
//! file reloads bit-exactly, and every artifact carries the config hash and
//! seed of the run that produced it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::ser::{CompactFormatter, Formatter, PrettyFormatter};
use sha2::{Digest, Sha256};

use crate::autodiff::ParamSet;
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::tokenizer::{Codebook, TokenSequence};
use crate::trainer::{EpochRecord, ParamGroup, Regime};
use crate::upstream::{Dataset, SynthConfig, Utterance};

/// `%.17g`-style rendering that always reads back as a float: integral
/// values keep a trailing `.0`, negative zero keeps its sign.
pub fn fmt_f64(x: f64) -> String {
    if !x.is_finite() {
        return if x.is_nan() { "NaN".into() } else if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0.0".into() } else { "0.0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_owned()
        } else {
            s.to_owned()
        }
    };
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp).max(0) as usize;
        let mut s = trim(&format!("{x:.decimals$}"));
        if !s.contains('.') {
            s.push_str(".0");
        }
        s
    } else {
        format!("{}e{exp}", trim(mantissa))
    }
}

/// JSON formatter wrapper that writes floats through [`fmt_f64`].
struct Sig17<F>(F);

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(fn $name<W: ?Sized + io::Write>(&mut self, w: &mut W $(, $arg: $ty)*) -> io::Result<()> {
            self.0.$name(w $(, $arg)*)
        })*
    };
}

impl<F: Formatter> Formatter for Sig17<F> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        if value.is_finite() {
            w.write_all(fmt_f64(value).as_bytes())
        } else {
            w.write_all(b"null")
        }
    }

    delegate!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        end_object_key(),
        begin_object_value(),
        end_object_value(),
    );
}

fn to_json_with<T: Serialize, F: Formatter>(value: &T, formatter: F) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(formatter));
    value.serialize(&mut ser).map_err(|e| Error::json("serialize", e))?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Single-line JSON with 17-digit floats.
pub fn to_json_compact<T: Serialize>(value: &T) -> Result<String> {
    to_json_with(value, CompactFormatter)
}

/// Indented JSON with 17-digit floats.
pub fn to_json_pretty<T: Serialize>(value: &T) -> Result<String> {
    to_json_with(value, PrettyFormatter::new())
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Provenance stamped on every artifact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

/// Hash identifying a generated dataset: the SHA-256 of its canonical
/// generator config.
pub fn data_hash(config: &SynthConfig) -> String {
    let value = serde_json::to_value(config).expect("synth config is serializable");
    hex::encode(Sha256::digest(value.to_string().as_bytes()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    kind: String,
    data_hash: String,
    config_hash: String,
    seed: u64,
    utterances: usize,
}

#[derive(Serialize, Deserialize)]
struct UtteranceLine {
    utt_id: String,
    transcript_id: String,
    speaker_id: usize,
    phones: Vec<usize>,
    frames: Vec<Vec<f64>>,
}

const DATASET_KIND: &str = "difftok-dataset";

/// Writes a header line followed by one utterance per line.
pub fn save_dataset(path: &Path, dataset: &Dataset, data_hash: &str, prov: &Provenance) -> Result<()> {
    let header = DatasetHeader {
        kind: DATASET_KIND.into(),
        data_hash: data_hash.into(),
        config_hash: prov.config_hash.clone(),
        seed: prov.seed,
        utterances: dataset.len(),
    };
    let mut out = to_json_compact(&header)?;
    out.push('\n');
    for u in &dataset.utterances {
        let line = UtteranceLine {
            utt_id: u.utt_id.clone(),
            transcript_id: u.transcript_id.clone(),
            speaker_id: u.speaker_id,
            phones: u.phones.clone(),
            frames: u.frames.row_iter().map(<[f64]>::to_vec).collect(),
        };
        out.push_str(&to_json_compact(&line)?);
        out.push('\n');
    }
    write_file(path, &out)
}

/// Loads a dataset file; returns it with the data hash recorded in its header.
pub fn load_dataset(path: &Path) -> Result<(Dataset, String)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let ctx = |n: usize| format!("{} line {}", path.display(), n + 1);
    let first = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty dataset file", path.display())))?
        .map_err(|e| Error::io(path, e))?;
    let header: DatasetHeader = serde_json::from_str(&first).map_err(|e| Error::json(ctx(0), e))?;
    if header.kind != DATASET_KIND {
        return Err(Error::Format(format!("{}: not a dataset file", path.display())));
    }
    let mut utterances = Vec::with_capacity(header.utterances);
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let u: UtteranceLine = serde_json::from_str(&line).map_err(|e| Error::json(ctx(n + 1), e))?;
        if u.frames.len() != u.phones.len() {
            return Err(Error::Format(format!("{}: {} frames but {} phones", ctx(n + 1), u.frames.len(), u.phones.len())));
        }
        utterances.push(Utterance {
            utt_id: u.utt_id,
            transcript_id: u.transcript_id,
            speaker_id: u.speaker_id,
            phones: u.phones,
            frames: Matrix::from_rows(&u.frames)?,
        });
    }
    if utterances.len() != header.utterances {
        return Err(Error::Format(format!(
            "{}: header promises {} utterances, found {}",
            path.display(),
            header.utterances,
            utterances.len()
        )));
    }
    Ok((Dataset { utterances }, header.data_hash))
}

#[derive(Serialize, Deserialize)]
struct CodebookFile {
    k: usize,
    dim: usize,
    sigma_sq: f64,
    centroids: Vec<Vec<f64>>,
    config_hash: String,
    seed: u64,
}

pub fn save_codebook(path: &Path, codebook: &Codebook, prov: &Provenance) -> Result<()> {
    let file = CodebookFile {
        k: codebook.k(),
        dim: codebook.dim(),
        sigma_sq: codebook.sigma_sq,
        centroids: codebook.centroids.row_iter().map(<[f64]>::to_vec).collect(),
        config_hash: prov.config_hash.clone(),
        seed: prov.seed,
    };
    write_file(path, &(to_json_pretty(&file)? + "\n"))
}

pub fn load_codebook(path: &Path) -> Result<(Codebook, Provenance)> {
    let f: CodebookFile = read_json(path)?;
    let codebook = Codebook::new(Matrix::from_rows(&f.centroids)?, f.sigma_sq)?;
    if (codebook.k(), codebook.dim()) != (f.k, f.dim) {
        return Err(Error::Format(format!("{}: k/dim disagree with centroids", path.display())));
    }
    Ok((
        codebook,
        Provenance {
            config_hash: f.config_hash,
            seed: f.seed,
        },
    ))
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    rows: usize,
    cols: usize,
    trainable: bool,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ParamFile {
    config_hash: String,
    seed: u64,
    params: BTreeMap<String, ParamEntry>,
}

pub fn save_params(path: &Path, params: &ParamSet, prov: &Provenance) -> Result<()> {
    let file = ParamFile {
        config_hash: prov.config_hash.clone(),
        seed: prov.seed,
        params: params
            .iter()
            .map(|(name, p)| {
                (
                    name.to_owned(),
                    ParamEntry {
                        rows: p.value.rows(),
                        cols: p.value.cols(),
                        trainable: p.trainable,
                        data: p.value.as_slice().to_vec(),
                    },
                )
            })
            .collect(),
    };
    write_file(path, &(to_json_pretty(&file)? + "\n"))
}

pub fn load_params(path: &Path) -> Result<(ParamSet, Provenance)> {
    let f: ParamFile = read_json(path)?;
    let mut params = ParamSet::new();
    for (name, e) in f.params {
        params.insert(name, Matrix::from_vec(e.rows, e.cols, e.data)?, e.trainable);
    }
    Ok((
        params,
        Provenance {
            config_hash: f.config_hash,
            seed: f.seed,
        },
    ))
}

/// `utt_id<TAB>id id id`, after a `#` provenance line.
pub fn save_tokens(path: &Path, tokens: &[TokenSequence], prov: &Provenance) -> Result<()> {
    let mut out = format!("# config_hash={} seed={}\n", prov.config_hash, prov.seed);
    for t in tokens {
        out.push_str(&t.utt_id);
        out.push('\t');
        let ids: Vec<String> = t.ids.iter().map(usize::to_string).collect();
        out.push_str(&ids.join(" "));
        out.push('\n');
    }
    write_file(path, &out)
}

pub fn load_tokens(path: &Path) -> Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.trim().is_empty())
        .map(|(n, line)| {
            let (utt, ids) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("{} line {}: missing tab", path.display(), n + 1)))?;
            let ids = ids
                .split_whitespace()
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), n + 1)))?;
            Ok(TokenSequence::new(utt, ids))
        })
        .collect()
}

pub const HISTORY_HEADER: &str = "epoch,total_loss,asr_loss,km_loss,tau,frame_acc,regime,trainable_set,\
grad_norm_asr,grad_norm_codebook,grad_norm_layer_weights,grad_norm_ssl,config_hash,seed";

pub fn history_csv(history: &[EpochRecord], prov: &Provenance) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let set: Vec<&str> = r.trainable_set.iter().map(|g| g.as_str()).collect();
        let _ = write!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.epoch,
            fmt_f64(r.total_loss),
            fmt_f64(r.asr_loss),
            fmt_f64(r.km_loss),
            fmt_f64(r.tau),
            fmt_f64(r.frame_acc),
            r.regime,
            set.join("+"),
        );
        for g in r.grad_norms {
            let _ = write!(out, ",{}", fmt_f64(g));
        }
        let _ = writeln!(out, ",{},{}", prov.config_hash, prov.seed);
    }
    out
}

pub fn save_history(path: &Path, history: &[EpochRecord], prov: &Provenance) -> Result<()> {
    write_file(path, &history_csv(history, prov))
}

/// Parses a history CSV written by [`save_history`].
pub fn load_history(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |n: usize, what: &str| Error::Format(format!("{} line {}: {what}", path.display(), n + 1));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == HISTORY_HEADER => {}
        _ => return Err(bad(0, "unexpected header")),
    }
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 14 {
                return Err(bad(n, "expected 14 fields"));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(n, "bad number"));
            let trainable_set = f[7]
                .split('+')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    ParamGroup::ALL
                        .into_iter()
                        .find(|g| g.as_str() == s)
                        .ok_or_else(|| bad(n, "unknown parameter group"))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad(n, "bad epoch"))?,
                total_loss: num(1)?,
                asr_loss: num(2)?,
                km_loss: num(3)?,
                tau: num(4)?,
                frame_acc: num(5)?,
                regime: f[6].parse::<Regime>()?,
                trainable_set,
                grad_norms: [num(8)?, num(9)?, num(10)?, num(11)?],
            })
        })
        .collect()
}

/// Contents of `metrics.json`. Token metrics are absent in continuous mode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub regime: Regime,
    pub frame_accuracy: f64,
    pub mean_asr_loss: f64,
    pub pnmi: Option<f64>,
    pub nqe: Option<f64>,
    pub tsl: Option<f64>,
    pub mter_pct: Option<f64>,
    pub n_frames: usize,
    pub n_groups: usize,
    pub config_hash: String,
    pub seed: u64,
}

pub fn save_metrics(path: &Path, metrics: &MetricsFile) -> Result<()> {
    write_file(path, &(to_json_pretty(metrics)? + "\n"))
}

pub fn load_metrics(path: &Path) -> Result<MetricsFile> {
    read_json(path)
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_file(path, &(to_json_pretty(value)? + "\n"))
}

/// Writes CSV text through a buffered file handle.
pub fn save_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}
