//! Reward model trained by pairwise negative log-likelihood.
//!
//! The model is linear in the same sparse (bucket, bigram) feature space as
//! the world's latent reward, but it is trained from its own initialization on
//! finite, intrinsically noisy preference data, so its errors concentrate on
//! small-gap pairs.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::world::{phi, PreferencePair, TokenSeq, NUM_BUCKETS};
use crate::{Error, Result};

/// Numerically stable `log(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Numerically stable logistic sigmoid.
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Linear scorer over (prompt-bucket, completion-bigram) features.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    vocab_size: u32,
    weights: Vec<f64>,
}

impl RewardModel {
    pub fn zeros(vocab_size: u32) -> RewardModel {
        let dim = NUM_BUCKETS * vocab_size as usize * vocab_size as usize;
        RewardModel {
            vocab_size,
            weights: vec![0.0; dim],
        }
    }

    /// Random `N(0, std^2)` initialization.
    pub fn random(vocab_size: u32, std: f64, rng: &mut impl Rng) -> RewardModel {
        let mut rm = Self::zeros(vocab_size);
        for w in &mut rm.weights {
            let z: f64 = StandardNormal.sample(rng);
            *w = std * z;
        }
        rm
    }

    pub fn from_weights(vocab_size: u32, weights: Vec<f64>) -> Result<RewardModel> {
        let dim = NUM_BUCKETS * vocab_size as usize * vocab_size as usize;
        if weights.len() != dim {
            return Err(Error::Config(format!(
                "expected {dim} weights, got {}",
                weights.len()
            )));
        }
        Ok(RewardModel { vocab_size, weights })
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// `r_phi(x, y) = <weights, phi(x, y)>`.
    pub fn score(&self, x: &TokenSeq, y: &TokenSeq) -> Result<f64> {
        let feats = phi(x, y, self.vocab_size)?;
        Ok(feats
            .iter()
            .map(|&(id, count)| self.weights[id] * count)
            .sum())
    }

    /// Returns copies of the pairs with both scores filled in from this model,
    /// for the scored-dataset export.
    pub fn rescore_pairs(&self, pairs: &[PreferencePair]) -> Result<Vec<PreferencePair>> {
        pairs
            .iter()
            .map(|p| {
                Ok(PreferencePair {
                    chosen_score: Some(self.score(&p.prompt, &p.chosen)?),
                    rejected_score: Some(self.score(&p.prompt, &p.rejected)?),
                    ..p.clone()
                })
            })
            .collect()
    }

    /// Writes a text checkpoint; floats round-trip bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "mpo-reward v1")?;
        writeln!(w, "vocab_size={} dim={}", self.vocab_size, self.weights.len())?;
        for weight in &self.weights {
            writeln!(w, "{weight}")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<RewardModel> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some("mpo-reward v1") => {}
            other => return Err(Error::Format(format!("bad reward checkpoint magic {other:?}"))),
        }
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("missing reward checkpoint header".into()))?;
        let mut vocab_size: Option<u32> = None;
        let mut dim: Option<usize> = None;
        for field in header.split_whitespace() {
            let (k, val) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
            match k {
                "vocab_size" => vocab_size = val.parse().ok(),
                "dim" => dim = val.parse().ok(),
                _ => return Err(Error::Format(format!("unknown header field {k:?}"))),
            }
        }
        let vocab_size = vocab_size.ok_or_else(|| Error::Format("header missing vocab_size".into()))?;
        let dim = dim.ok_or_else(|| Error::Format("header missing dim".into()))?;
        let mut weights = Vec::with_capacity(dim);
        for line in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            weights.push(
                line.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad weight {line:?}")))?,
            );
        }
        if weights.len() != dim {
            return Err(Error::Format(format!(
                "expected {dim} weights, got {}",
                weights.len()
            )));
        }
        RewardModel::from_weights(vocab_size, weights)
    }
}

/// Mean pairwise negative log-likelihood `-log sigma(score_w - score_l)`.
pub fn rm_loss(rm: &RewardModel, batch: &[PreferencePair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("rm_loss requires a nonempty batch".into()));
    }
    let mut total = 0.0;
    for p in batch {
        let delta = rm.score(&p.prompt, &p.chosen)? - rm.score(&p.prompt, &p.rejected)?;
        total += softplus(-delta);
    }
    Ok(total / batch.len() as f64)
}

/// Exact gradient of [`rm_loss`] with respect to the weights.
pub fn rm_grad(rm: &RewardModel, batch: &[PreferencePair]) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Input("rm_grad requires a nonempty batch".into()));
    }
    let mut grad = vec![0.0; rm.weights.len()];
    let scale = 1.0 / batch.len() as f64;
    for p in batch {
        let fw = phi(&p.prompt, &p.chosen, rm.vocab_size)?;
        let fl = phi(&p.prompt, &p.rejected, rm.vocab_size)?;
        let score = |feats: &[(usize, f64)]| -> f64 {
            feats.iter().map(|&(id, c)| rm.weights[id] * c).sum()
        };
        let delta = score(&fw) - score(&fl);
        let coef = -sigmoid(-delta) * scale;
        for &(id, c) in &fw {
            grad[id] += coef * c;
        }
        for &(id, c) in &fl {
            grad[id] -= coef * c;
        }
    }
    Ok(grad)
}

/// Reward-model training hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RmConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the dataset held out for validation (the last slice of a
    /// seeded shuffle).
    pub validation_fraction: f64,
    pub clip_norm: Option<f64>,
}

impl Default for RmConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.2,
            steps: 600,
            batch_size: 0,
            seed: 0,
            validation_fraction: 0.05,
            clip_norm: Some(10.0),
        }
    }
}

/// Diagnostics from a reward-model training run.
#[derive(Debug, Clone)]
pub struct RmTrainReport {
    /// Training loss before each step.
    pub train_trace: Vec<f64>,
    /// Validation loss before each step (training loss when no split).
    pub val_trace: Vec<f64>,
    /// Step whose weights were returned.
    pub best_step: usize,
    pub best_val_loss: f64,
    /// True when every pair has identical feature vectors (no signal at all).
    pub degenerate: bool,
    /// Number of validation pairs (0 when the dataset is too small to split).
    pub n_validation: usize,
}

/// Sparse chosen-minus-rejected feature difference of one pair.
fn pair_delta(rm: &RewardModel, pair: &PreferencePair) -> Result<Vec<(usize, f64)>> {
    let fw = phi(&pair.prompt, &pair.chosen, rm.vocab_size)?;
    let fl = phi(&pair.prompt, &pair.rejected, rm.vocab_size)?;
    let mut delta: Vec<(usize, f64)> = fw;
    for (id, c) in fl {
        match delta.iter_mut().find(|(i, _)| *i == id) {
            Some((_, dc)) => *dc -= c,
            None => delta.push((id, -c)),
        }
    }
    delta.retain(|&(_, c)| c != 0.0);
    delta.sort_unstable_by_key(|&(id, _)| id);
    Ok(delta)
}

fn delta_loss(weights: &[f64], deltas: &[Vec<(usize, f64)>]) -> f64 {
    let mut total = 0.0;
    for d in deltas {
        let margin: f64 = d.iter().map(|&(id, c)| weights[id] * c).sum();
        total += softplus(-margin);
    }
    total / deltas.len() as f64
}

/// Trains the reward model by gradient descent on the pairwise NLL and returns
/// the weights with the best validation loss over the step budget.
///
/// Feature differences are extracted once up front; the loss and gradient only
/// touch the sparse entries after that.
pub fn train_reward_model(
    rm: &RewardModel,
    dataset: &[PreferencePair],
    config: &RmConfig,
) -> Result<(RewardModel, RmTrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Input("train_reward_model requires a nonempty dataset".into()));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::Config(format!(
            "learning_rate must be > 0, got {}",
            config.learning_rate
        )));
    }
    if !(0.0..1.0).contains(&config.validation_fraction) {
        return Err(Error::Config(format!(
            "validation_fraction must be in [0, 1), got {}",
            config.validation_fraction
        )));
    }

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    order.shuffle(&mut rng);
    let mut n_val = (dataset.len() as f64 * config.validation_fraction).round() as usize;
    if n_val >= dataset.len() {
        n_val = dataset.len() - 1;
    }
    let split = dataset.len() - n_val;
    let train: Vec<Vec<(usize, f64)>> = order[..split]
        .iter()
        .map(|&i| pair_delta(rm, &dataset[i]))
        .collect::<Result<_>>()?;
    let val: Vec<Vec<(usize, f64)>> = order[split..]
        .iter()
        .map(|&i| pair_delta(rm, &dataset[i]))
        .collect::<Result<_>>()?;

    let degenerate = train.iter().chain(&val).all(|d| d.is_empty());

    let mut weights = rm.weights.clone();
    let mut grad = vec![0.0; weights.len()];
    let mut best_weights = weights.clone();
    let mut best_val = f64::INFINITY;
    let mut best_step = 0;
    let mut train_trace = Vec::with_capacity(config.steps);
    let mut val_trace = Vec::with_capacity(config.steps);
    let full_batch = config.batch_size == 0 || config.batch_size >= train.len();
    let mut batch_order: Vec<usize> = (0..train.len()).collect();
    let mut cursor = 0usize;

    for step in 0..=config.steps {
        let train_loss = delta_loss(&weights, &train);
        let val_loss = if val.is_empty() {
            train_loss
        } else {
            delta_loss(&weights, &val)
        };
        if val_loss < best_val {
            best_val = val_loss;
            best_weights = weights.clone();
            best_step = step;
        }
        if step == config.steps {
            break;
        }
        train_trace.push(train_loss);
        val_trace.push(val_loss);

        let batch: Vec<usize> = if full_batch {
            (0..train.len()).collect()
        } else {
            if cursor == 0 {
                batch_order.shuffle(&mut rng);
            }
            let end = (cursor + config.batch_size).min(train.len());
            let b = batch_order[cursor..end].to_vec();
            cursor = if end == train.len() { 0 } else { end };
            b
        };
        for g in &mut grad {
            *g = 0.0;
        }
        let scale = 1.0 / batch.len() as f64;
        for &i in &batch {
            let d = &train[i];
            let margin: f64 = d.iter().map(|&(id, c)| weights[id] * c).sum();
            let coef = -sigmoid(-margin) * scale;
            for &(id, c) in d {
                grad[id] += coef * c;
            }
        }
        if let Some(c) = config.clip_norm {
            let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > c {
                let s = c / norm;
                for g in &mut grad {
                    *g *= s;
                }
            }
        }
        for (w, g) in weights.iter_mut().zip(&grad) {
            *w -= config.learning_rate * g;
        }
    }

    Ok((
        RewardModel {
            vocab_size: rm.vocab_size,
            weights: best_weights,
        },
        RmTrainReport {
            train_trace,
            val_trace,
            best_step,
            best_val_loss: best_val,
            degenerate,
            n_validation: n_val,
        },
    ))
}

/// Fraction of pairs whose labeled-preferred completion gets the higher score
/// (ties count as misses).
pub fn pairwise_accuracy(rm: &RewardModel, pairs: &[PreferencePair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Input("pairwise_accuracy requires pairs".into()));
    }
    let mut correct = 0usize;
    for p in pairs {
        if rm.score(&p.prompt, &p.chosen)? > rm.score(&p.prompt, &p.rejected)? {
            correct += 1;
        }
    }
    Ok(correct as f64 / pairs.len() as f64)
}

/// Accuracy within one score-gap bin; `accuracy()` is `None` for empty bins.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GapBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
    pub correct: u64,
}

impl GapBin {
    pub fn accuracy(&self) -> Option<f64> {
        if self.count == 0 {
            None
        } else {
            Some(self.correct as f64 / self.count as f64)
        }
    }
}

/// Stratifies test accuracy by the model's own absolute score gap, in bins of
/// `bin_width` starting at 0. Every pair lands in exactly one bin, so the
/// count-weighted mean over bins equals the overall accuracy exactly.
pub fn accuracy_by_gap(
    rm: &RewardModel,
    testset: &[PreferencePair],
    bin_width: f64,
) -> Result<Vec<GapBin>> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(Error::Input(format!("bin_width must be > 0, got {bin_width}")));
    }
    let mut bins: Vec<GapBin> = Vec::new();
    for p in testset {
        let sc = rm.score(&p.prompt, &p.chosen)?;
        let sr = rm.score(&p.prompt, &p.rejected)?;
        let gap = (sc - sr).abs();
        let idx = (gap / bin_width).floor() as usize;
        while bins.len() <= idx {
            let i = bins.len() as f64;
            bins.push(GapBin {
                lo: i * bin_width,
                hi: (i + 1.0) * bin_width,
                count: 0,
                correct: 0,
            });
        }
        bins[idx].count += 1;
        if sc > sr {
            bins[idx].correct += 1;
        }
    }
    Ok(bins)
}
