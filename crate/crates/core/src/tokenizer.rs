//! Differentiable k-means tokenizer.
//!
//! Frames `s_i` are softly assigned to centroids with
//! `p(j | s_i) ∝ exp(−σ² ‖s_i − μ_j‖²)`, perturbed with Gumbel noise and
//! sharpened at temperature τ, then hardened to a one-hot row whose gradient
//! is routed through the soft row (straight-through). Evaluation uses the
//! noise-free nearest-centroid path.

use serde::{Deserialize, Serialize};

use crate::autodiff::{one_hot_argmax, pairwise_sq_dist, Tape, Var};
use crate::error::{Error, Result};
use crate::math::{argmax, argmin, sq_dist_unchecked, softmax_into, Matrix, SeededRng};

/// Probabilities are floored here before taking logs for the Gumbel step.
pub const PROB_FLOOR: f64 = 1e-30;

/// Lloyd stops once every centroid moves less than this.
pub const LLOYD_TOLERANCE: f64 = 1e-6;
pub const LLOYD_MAX_ITERS: usize = 300;

/// `k x D` centroid matrix plus the fixed precision σ².
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub centroids: Matrix,
    pub sigma_sq: f64,
}

impl Codebook {
    pub fn new(centroids: Matrix, sigma_sq: f64) -> Result<Self> {
        if centroids.rows() < 2 {
            return Err(Error::invalid("Codebook::new", format!("need k >= 2, got {}", centroids.rows())));
        }
        if !centroids.is_finite() {
            return Err(Error::invalid("Codebook::new", "non-finite centroid entry"));
        }
        if !(sigma_sq >= 0.0) || !sigma_sq.is_finite() {
            return Err(Error::invalid("Codebook::new", format!("sigma_sq must be >= 0, got {sigma_sq}")));
        }
        Ok(Self { centroids, sigma_sq })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        self.centroids.row(j)
    }

    /// Smallest distance between two distinct centroids.
    pub fn min_pairwise_distance(&self) -> f64 {
        let mut best = f64::INFINITY;
        for a in 0..self.k() {
            for b in a + 1..self.k() {
                best = best.min(sq_dist_unchecked(self.centroid(a), self.centroid(b)).sqrt());
            }
        }
        best
    }

    fn check_features(&self, features: &Matrix, op: &'static str) -> Result<()> {
        if features.cols() != self.dim() {
            return Err(Error::dims(op, format!("feature dim {}", self.dim()), features.cols()));
        }
        Ok(())
    }
}

/// Soft, relaxed and hard assignments for one utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentMatrix {
    pub probs: Matrix,
    pub relaxed: Matrix,
    pub hard_ids: Vec<usize>,
    pub hard_onehot: Matrix,
}

/// Token ids of one utterance.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub utt_id: String,
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(utt_id: impl Into<String>, ids: Vec<usize>) -> Self {
        Self {
            utt_id: utt_id.into(),
            ids,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Result of k-means initialization.
#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub codebook: Codebook,
    /// Inertia of each Lloyd iteration's assignment step, in order.
    pub inertia_history: Vec<f64>,
    /// Nearest-centroid inertia of the returned centroids.
    pub inertia: f64,
    pub iterations: usize,
}

fn distinct_rows(features: &Matrix) -> usize {
    let mut keys: Vec<Vec<u64>> = features
        .row_iter()
        .map(|r| r.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    keys.sort_unstable();
    keys.dedup();
    keys.len()
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centroids.rows() {
        let d = sq_dist_unchecked(point, centroids.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Standard k-means: k-means++ seeding then Lloyd iterations.
pub fn init_codebook(features: &Matrix, k: usize, sigma_sq: f64, rng: &mut SeededRng) -> Result<KMeansFit> {
    if k < 2 {
        return Err(Error::invalid("init_codebook", format!("need k >= 2, got {k}")));
    }
    if !features.is_finite() {
        return Err(Error::invalid("init_codebook", "non-finite feature"));
    }
    let distinct = distinct_rows(features);
    if distinct < k {
        return Err(Error::InsufficientDistinctPoints { needed: k, found: distinct });
    }
    let (n, dim) = features.shape();

    // k-means++ seeding
    let mut centroids = Matrix::zeros(k, dim);
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(features.row(first));
    let mut d2: Vec<f64> = features
        .row_iter()
        .map(|r| sq_dist_unchecked(r, centroids.row(0)))
        .collect();
    for c in 1..k {
        let pick = rng.categorical(&d2);
        centroids.row_mut(c).copy_from_slice(features.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist_unchecked(features.row(i), centroids.row(c)));
        }
    }

    let mut assign = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut history = Vec::new();
    let mut iterations = 0;
    while iterations < LLOYD_MAX_ITERS {
        iterations += 1;
        let mut inertia = 0.0;
        for i in 0..n {
            let (j, d) = nearest(features.row(i), &centroids);
            assign[i] = j;
            dists[i] = d;
            inertia += d;
        }
        history.push(inertia);

        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (i, &j) in assign.iter().enumerate() {
            counts[j] += 1;
            for (s, v) in sums.row_mut(j).iter_mut().zip(features.row(i)) {
                *s += v;
            }
        }
        let mut next = Matrix::zeros(k, dim);
        for j in 0..k {
            if counts[j] > 0 {
                let inv = 1.0 / counts[j] as f64;
                for (o, s) in next.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *o = s * inv;
                }
            }
        }
        // Empty clusters: reseed at the point farthest from its own centroid.
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("n >= k >= 2");
                next.row_mut(j).copy_from_slice(features.row(far));
                dists[far] = 0.0;
            }
        }
        let shift = (0..k)
            .map(|j| sq_dist_unchecked(next.row(j), centroids.row(j)).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < LLOYD_TOLERANCE {
            break;
        }
    }

    let inertia = features.row_iter().map(|r| nearest(r, &centroids).1).sum();
    Ok(KMeansFit {
        codebook: Codebook::new(centroids, sigma_sq)?,
        inertia_history: history,
        inertia,
        iterations,
    })
}

/// `p(j | s_i)` for every frame: softmax of `−σ² ‖s_i − μ_j‖²` at τ = 1.
pub fn assign_soft(features: &Matrix, codebook: &Codebook) -> Result<Matrix> {
    codebook.check_features(features, "assign_soft")?;
    let mut logits = pairwise_sq_dist(features, &codebook.centroids);
    let mut probs = Matrix::zeros(logits.rows(), logits.cols());
    for v in logits.as_mut_slice() {
        *v *= -codebook.sigma_sq;
    }
    for i in 0..logits.rows() {
        softmax_into(logits.row(i), 1.0, probs.row_mut(i));
    }
    Ok(probs)
}

/// `T x k` matrix of independent standard Gumbel samples.
pub fn gumbel_noise(rng: &mut SeededRng, rows: usize, k: usize) -> Matrix {
    Matrix::from_vec(rows, k, rng.sample_gumbel(rows * k)).expect("positive shape")
}

/// Relaxed sample `softmax((log p + G) / τ)` per row with the given noise.
pub fn gumbel_sample_with_noise(probs: &Matrix, tau: f64, noise: &Matrix) -> Result<Matrix> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid("gumbel_sample", format!("temperature must be positive, got {tau}")));
    }
    if noise.shape() != probs.shape() {
        return Err(Error::dims(
            "gumbel_sample",
            crate::math::fmt_shape(probs.shape()),
            crate::math::fmt_shape(noise.shape()),
        ));
    }
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    let mut z = vec![0.0; probs.cols()];
    for i in 0..probs.rows() {
        for ((zj, &p), &g) in z.iter_mut().zip(probs.row(i)).zip(noise.row(i)) {
            *zj = p.max(PROB_FLOOR).ln() + g;
        }
        softmax_into(&z, tau, out.row_mut(i));
    }
    Ok(out)
}

/// Relaxed sample with fresh Gumbel noise per row.
pub fn gumbel_sample(probs: &Matrix, tau: f64, rng: &mut SeededRng) -> Result<Matrix> {
    let noise = gumbel_noise(rng, probs.rows(), probs.cols());
    gumbel_sample_with_noise(probs, tau, &noise)
}

/// Row-wise argmax (ties to the smallest index) and its one-hot matrix.
pub fn harden(relaxed: &Matrix) -> (Vec<usize>, Matrix) {
    let ids = relaxed.row_iter().map(argmax).collect();
    (ids, one_hot_argmax(relaxed))
}

pub fn assign(features: &Matrix, codebook: &Codebook, tau: f64, noise: &Matrix) -> Result<AssignmentMatrix> {
    let probs = assign_soft(features, codebook)?;
    let relaxed = gumbel_sample_with_noise(&probs, tau, noise)?;
    let (hard_ids, hard_onehot) = harden(&relaxed);
    Ok(AssignmentMatrix {
        probs,
        relaxed,
        hard_ids,
        hard_onehot,
    })
}

/// `Σ_i ‖s_i − h̃_i M‖²`, summed (not averaged) over frames.
pub fn kmeans_loss(features: &Matrix, hard_onehot: &Matrix, codebook: &Codebook) -> Result<f64> {
    codebook.check_features(features, "kmeans_loss")?;
    if hard_onehot.shape() != (features.rows(), codebook.k()) {
        return Err(Error::dims(
            "kmeans_loss",
            crate::math::fmt_shape((features.rows(), codebook.k())),
            crate::math::fmt_shape(hard_onehot.shape()),
        ));
    }
    let recon = hard_onehot.matmul(&codebook.centroids)?;
    Ok(features.sub(&recon)?.frobenius_sq())
}

/// Noise-free tokenization: nearest centroid per frame.
pub fn tokenize_inference(features: &Matrix, codebook: &Codebook) -> Result<Vec<usize>> {
    codebook.check_features(features, "tokenize_inference")?;
    Ok(features
        .row_iter()
        .map(|r| {
            let d: Vec<f64> = (0..codebook.k())
                .map(|j| sq_dist_unchecked(r, codebook.centroid(j)))
                .collect();
            argmin(&d)
        })
        .collect())
}

/// Tape handles for one recorded differentiable k-means pass.
#[derive(Clone, Copy, Debug)]
pub struct DiffKmVars {
    pub probs: Var,
    pub relaxed: Var,
    pub hard: Var,
}

/// Records the differentiable k-means operator on `tape`.
pub fn record_diffkm(
    tape: &mut Tape<'_>,
    features: Var,
    centroids: Var,
    sigma_sq: f64,
    tau: f64,
    noise: &Matrix,
) -> Result<DiffKmVars> {
    let dist = tape.pairwise_sq_dist(features, centroids)?;
    let logits = tape.scale(dist, -sigma_sq);
    let probs = tape.softmax_rows(logits, 1.0)?;
    let log_probs = tape.log_floor(probs, PROB_FLOOR);
    let perturbed = tape.add_const(log_probs, noise)?;
    let relaxed = tape.softmax_rows(perturbed, tau)?;
    let hard = tape.straight_through(relaxed);
    Ok(DiffKmVars { probs, relaxed, hard })
}

/// Records `Σ_i ‖s_i − h_i M‖²`.
pub fn record_kmeans_loss(tape: &mut Tape<'_>, features: Var, hard: Var, centroids: Var) -> Result<Var> {
    let recon = tape.matmul(hard, centroids)?;
    let resid = tape.sub(features, recon)?;
    Ok(tape.sum_squares(resid))
}
