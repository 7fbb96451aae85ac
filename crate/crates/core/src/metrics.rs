//! Token-quality metrics: PNMI, NQE, TSL and MTER, plus the deduplication and
//! edit-distance primitives under them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{sq_dist_unchecked, Matrix};
use crate::tokenizer::Codebook;

/// Collapses runs of equal consecutive ids.
pub fn dedup(tokens: &[usize]) -> Vec<usize> {
    let mut out = tokens.to_vec();
    out.dedup();
    out
}

/// Mean sequence length, after deduplication when `deduplicate` is set.
pub fn tsl<S: AsRef<[usize]>>(sequences: &[S], deduplicate: bool) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::Metric("tsl needs at least one sequence".into()));
    }
    let total: usize = sequences
        .iter()
        .map(|s| if deduplicate { dedup(s.as_ref()).len() } else { s.as_ref().len() })
        .sum();
    Ok(total as f64 / sequences.len() as f64)
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Mean token error rate of one group of same-transcript sequences, in
/// percent: every ordered pair (ref, hyp) contributes `ed(ref, hyp) / |ref|`.
pub fn mter<S: AsRef<[usize]>>(group: &[S], deduplicate: bool) -> Result<f64> {
    if group.len() < 2 {
        return Err(Error::Metric(format!("mter needs a group of at least 2, got {}", group.len())));
    }
    let seqs: Vec<Vec<usize>> = group
        .iter()
        .map(|s| if deduplicate { dedup(s.as_ref()) } else { s.as_ref().to_vec() })
        .collect();
    if seqs.iter().any(Vec::is_empty) {
        return Err(Error::Metric("mter reference sequence is empty".into()));
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for (i, reference) in seqs.iter().enumerate() {
        for (j, hyp) in seqs.iter().enumerate() {
            if i != j {
                sum += edit_distance(reference, hyp) as f64 / reference.len() as f64;
                pairs += 1;
            }
        }
    }
    Ok(100.0 * sum / pairs as f64)
}

/// Unweighted mean of [`mter`] over groups.
pub fn mean_mter<S: AsRef<[usize]>>(groups: &[Vec<S>], deduplicate: bool) -> Result<f64> {
    if groups.is_empty() {
        return Err(Error::Metric("no groups with a shared transcript".into()));
    }
    let mut sum = 0.0;
    for g in groups {
        sum += mter(g, deduplicate)?;
    }
    Ok(sum / groups.len() as f64)
}

/// Co-occurrence counts of aligned phone labels and token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContingencyTable {
    /// `counts[phone][token]`.
    pub counts: Vec<Vec<u64>>,
}

impl ContingencyTable {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let width = counts.first().map_or(0, Vec::len);
        if counts.iter().any(|r| r.len() != width) {
            return Err(Error::Metric("ragged contingency table".into()));
        }
        Ok(Self { counts })
    }

    pub fn from_pairs(phones: &[usize], tokens: &[usize]) -> Result<Self> {
        if phones.len() != tokens.len() {
            return Err(Error::dims("contingency", phones.len(), tokens.len()));
        }
        let rows = phones.iter().max().map_or(0, |m| m + 1);
        let cols = tokens.iter().max().map_or(0, |m| m + 1);
        let mut counts = vec![vec![0u64; cols]; rows];
        for (&p, &t) in phones.iter().zip(tokens) {
            counts[p][t] += 1;
        }
        Ok(Self { counts })
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn phone_marginal(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn token_marginal(&self) -> Vec<u64> {
        let width = self.counts.first().map_or(0, Vec::len);
        (0..width).map(|j| self.counts.iter().map(|r| r[j]).sum()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pnmi {
    pub value: f64,
    /// I(phone; token), nats.
    pub mutual_information: f64,
    /// H(phone), nats.
    pub phone_entropy: f64,
    /// Set when H(phone) = 0; `value` is then defined as 0.
    pub degenerate: bool,
}

pub fn pnmi_from_table(table: &ContingencyTable) -> Result<Pnmi> {
    let n = table.total();
    if n == 0 {
        return Err(Error::Metric("pnmi of an empty table".into()));
    }
    let n = n as f64;
    let px = table.phone_marginal();
    let py = table.token_marginal();
    let h: f64 = px
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    let mut mi = 0.0;
    for (i, row) in table.counts.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (px[i] as f64 * py[j] as f64)).ln();
            }
        }
    }
    if h == 0.0 {
        log::warn!("pnmi: phone labels are constant, reporting 0");
        return Ok(Pnmi {
            value: 0.0,
            mutual_information: mi,
            phone_entropy: 0.0,
            degenerate: true,
        });
    }
    Ok(Pnmi {
        value: (mi / h).clamp(0.0, 1.0),
        mutual_information: mi,
        phone_entropy: h,
        degenerate: false,
    })
}

/// Phone-normalized mutual information, `I(phone; token) / H(phone)`.
pub fn pnmi(phones: &[usize], tokens: &[usize]) -> Result<Pnmi> {
    if phones.is_empty() {
        return Err(Error::Metric("pnmi of empty input".into()));
    }
    pnmi_from_table(&ContingencyTable::from_pairs(phones, tokens)?)
}

/// Pooled normalized quantization error over any number of utterances:
/// mean distance to the assigned centroid over mean feature norm.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NqeAccumulator {
    dist_sum: f64,
    norm_sum: f64,
    frames: usize,
}

impl NqeAccumulator {
    pub fn add(&mut self, features: &Matrix, tokens: &[usize], codebook: &Codebook) -> Result<()> {
        if features.rows() != tokens.len() {
            return Err(Error::dims("nqe", features.rows(), tokens.len()));
        }
        if features.cols() != codebook.dim() {
            return Err(Error::dims("nqe", codebook.dim(), features.cols()));
        }
        for (row, &z) in features.row_iter().zip(tokens) {
            if z >= codebook.k() {
                return Err(Error::Metric(format!("token {z} out of range for k = {}", codebook.k())));
            }
            self.dist_sum += sq_dist_unchecked(row, codebook.centroid(z)).sqrt();
            self.norm_sum += row.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        self.frames += tokens.len();
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn finish(&self) -> Result<f64> {
        if self.frames == 0 || self.norm_sum == 0.0 {
            return Err(Error::Metric("nqe undefined: mean feature norm is zero".into()));
        }
        Ok(self.dist_sum / self.norm_sum)
    }
}

pub fn nqe(features: &Matrix, tokens: &[usize], codebook: &Codebook) -> Result<f64> {
    let mut acc = NqeAccumulator::default();
    acc.add(features, tokens, codebook)?;
    acc.finish()
}

/// All four token metrics for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub pnmi: f64,
    pub nqe: f64,
    pub tsl: f64,
    pub mter_pct: f64,
    pub n_frames: usize,
    pub n_groups: usize,
    pub config_hash: String,
}
