//! Synthetic preference environment.
//!
//! A [`World`] holds the hidden parameters of a latent reward `r*(x, y)` over
//! (prompt, completion) pairs of fixed-length token sequences. Preferences
//! between two completions are sampled from the Bradley-Terry model on their
//! latent rewards, so label noise is intrinsic: the smaller the true reward
//! gap, the closer the annotation is to a coin flip.
//!
//! The latent reward is linear in a sparse feature map `phi(x, y)` counting
//! completion bigrams crossed with a prompt bucket (a hash of the prompt's
//! first and last token into [`NUM_BUCKETS`] buckets). The same feature space
//! is shared by the learned reward model.

use std::collections::HashSet;
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::policy::Policy;
use crate::{Error, Result};

/// Number of prompt buckets in the feature map and the policy context space.
pub const NUM_BUCKETS: usize = 8;

/// Dimensions and seeding of a synthetic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Vocabulary size (tokens are integers in `[0, vocab_size)`).
    pub vocab_size: u32,
    /// Fixed prompt length in tokens.
    pub prompt_len: usize,
    /// Fixed completion length in tokens.
    pub completion_len: usize,
    /// Seed fully determining the latent reward weights.
    pub feature_seed: u64,
    /// Multiplier on the latent reward; 0 yields a pure-noise world.
    pub reward_scale: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            prompt_len: 8,
            completion_len: 8,
            feature_seed: 7,
            reward_scale: 1.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::Config(format!(
                "vocab_size must be >= 2, got {}",
                self.vocab_size
            )));
        }
        if self.prompt_len < 1 {
            return Err(Error::Config("prompt_len must be >= 1".into()));
        }
        if self.completion_len < 1 {
            return Err(Error::Config("completion_len must be >= 1".into()));
        }
        if !(self.reward_scale.is_finite() && self.reward_scale >= 0.0) {
            return Err(Error::Config(format!(
                "reward_scale must be finite and >= 0, got {}",
                self.reward_scale
            )));
        }
        Ok(())
    }

    /// Dimension of the feature space: one slot per (bucket, bigram).
    pub fn feature_dim(&self) -> usize {
        NUM_BUCKETS * (self.vocab_size as usize) * (self.vocab_size as usize)
    }
}

/// A prompt or completion as a fixed-length token sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    /// Checks every token against the vocabulary bound.
    pub fn check_vocab(&self, vocab_size: u32) -> Result<()> {
        match self.0.iter().find(|&&t| t >= vocab_size) {
            Some(&t) => Err(Error::Input(format!(
                "token {t} out of vocabulary (vocab_size {vocab_size})"
            ))),
            None => Ok(()),
        }
    }
}

/// A labeled comparison: `chosen` was preferred over `rejected` for `prompt`.
///
/// Scores, when present, all come from one scorer per dataset (the latent
/// reward for offline data, the reward model for resampled data).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    pub chosen_score: Option<f64>,
    pub rejected_score: Option<f64>,
}

impl PreferencePair {
    /// Absolute score gap, if both scores are present.
    pub fn gap(&self) -> Option<f64> {
        match (self.chosen_score, self.rejected_score) {
            (Some(c), Some(r)) => Some((c - r).abs()),
            _ => None,
        }
    }
}

/// Maps a prompt to its feature/context bucket from its first and last token.
pub fn prompt_bucket(prompt: &TokenSeq) -> usize {
    let first = *prompt.0.first().expect("prompt must be nonempty") as usize;
    let last = *prompt.0.last().expect("prompt must be nonempty") as usize;
    (first * 5 + last * 3) % NUM_BUCKETS
}

/// Sparse feature counts of (prompt-bucket, completion-bigram) co-occurrences.
///
/// Feature id = `bucket * vocab^2 + y[t] * vocab + y[t+1]` for each of the
/// `completion_len - 1` consecutive token pairs of the completion. Entries are
/// sorted by feature id with counts merged.
pub fn phi(x: &TokenSeq, y: &TokenSeq, vocab_size: u32) -> Result<Vec<(usize, f64)>> {
    x.check_vocab(vocab_size)?;
    y.check_vocab(vocab_size)?;
    if x.is_empty() {
        return Err(Error::Input("prompt must be nonempty".into()));
    }
    let v = vocab_size as usize;
    let bucket = prompt_bucket(x);
    let mut ids: Vec<usize> = y
        .0
        .windows(2)
        .map(|w| bucket * v * v + (w[0] as usize) * v + w[1] as usize)
        .collect();
    ids.sort_unstable();
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(ids.len());
    for id in ids {
        match out.last_mut() {
            Some((last, count)) if *last == id => *count += 1.0,
            _ => out.push((id, 1.0)),
        }
    }
    Ok(out)
}

/// Synthetic environment with a known latent reward.
#[derive(Debug, Clone)]
pub struct World {
    config: WorldConfig,
    true_weights: Vec<f64>,
}

/// Builds a world whose latent weights are fully determined by
/// `config.feature_seed` (standard normal entries).
pub fn build_world(config: WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.feature_seed);
    let true_weights = (0..config.feature_dim())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Ok(World {
        config,
        true_weights,
    })
}

impl World {
    /// Builds a world with explicitly given latent weights (hand-built worlds).
    pub fn with_weights(config: WorldConfig, true_weights: Vec<f64>) -> Result<World> {
        config.validate()?;
        if true_weights.len() != config.feature_dim() {
            return Err(Error::Config(format!(
                "expected {} weights, got {}",
                config.feature_dim(),
                true_weights.len()
            )));
        }
        Ok(World {
            config,
            true_weights,
        })
    }

    pub fn config(&self) -> &WorldConfig {
        &self.config
    }

    pub fn true_weights(&self) -> &[f64] {
        &self.true_weights
    }

    fn check_shapes(&self, x: &TokenSeq, y: &TokenSeq) -> Result<()> {
        if x.len() != self.config.prompt_len {
            return Err(Error::Input(format!(
                "prompt length {} != configured {}",
                x.len(),
                self.config.prompt_len
            )));
        }
        if y.len() != self.config.completion_len {
            return Err(Error::Input(format!(
                "completion length {} != configured {}",
                y.len(),
                self.config.completion_len
            )));
        }
        Ok(())
    }

    /// The latent reward `r*(x, y) = reward_scale * <true_weights, phi(x, y)>`.
    pub fn true_reward(&self, x: &TokenSeq, y: &TokenSeq) -> Result<f64> {
        self.check_shapes(x, y)?;
        let feats = phi(x, y, self.config.vocab_size)?;
        let dot: f64 = feats
            .iter()
            .map(|&(id, count)| self.true_weights[id] * count)
            .sum();
        Ok(self.config.reward_scale * dot)
    }

    /// Samples one uniform random prompt.
    pub fn sample_prompt(&self, rng: &mut impl Rng) -> TokenSeq {
        TokenSeq(
            (0..self.config.prompt_len)
                .map(|_| rng.random_range(0..self.config.vocab_size))
                .collect(),
        )
    }

    /// Samples `n` distinct uniform random prompts.
    pub fn sample_distinct_prompts(&self, n: usize, rng: &mut impl Rng) -> Vec<TokenSeq> {
        let mut seen = HashSet::with_capacity(n);
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let p = self.sample_prompt(rng);
            if seen.insert(p.clone()) {
                out.push(p);
            }
        }
        out
    }

    /// Labels a completion pair by a Bradley-Terry draw on the latent rewards.
    ///
    /// `y1` is chosen with probability `bt_prob(r*(x,y1), r*(x,y2))`; both
    /// latent scores are recorded on the returned pair.
    pub fn sample_preference(
        &self,
        x: &TokenSeq,
        y1: &TokenSeq,
        y2: &TokenSeq,
        rng: &mut impl Rng,
    ) -> Result<PreferencePair> {
        if y1 == y2 {
            return Err(Error::DegeneratePair);
        }
        let r1 = self.true_reward(x, y1)?;
        let r2 = self.true_reward(x, y2)?;
        let p1 = bt_prob(r1, r2)?;
        let first_chosen = rng.random::<f64>() < p1;
        let (chosen, rejected, cs, rs) = if first_chosen {
            (y1, y2, r1, r2)
        } else {
            (y2, y1, r2, r1)
        };
        Ok(PreferencePair {
            prompt: x.clone(),
            chosen: chosen.clone(),
            rejected: rejected.clone(),
            chosen_score: Some(cs),
            rejected_score: Some(rs),
        })
    }
}

/// Bradley-Terry preference probability `exp(r1) / (exp(r1) + exp(r2))`.
///
/// Computed via the sigmoid of the reward difference with the small branch
/// evaluated directly, so `bt_prob(a, b) + bt_prob(b, a)` sums to exactly 1.0
/// and the value stays stable for any finite inputs. The mathematical value
/// lies strictly inside (0, 1); in f64 it saturates at 0 or 1 once the reward
/// gap exceeds about 37 (1 - e^-37 has no representation below 1.0).
pub fn bt_prob(r1: f64, r2: f64) -> Result<f64> {
    if !(r1.is_finite() && r2.is_finite()) {
        return Err(Error::Input(format!("non-finite rewards ({r1}, {r2})")));
    }
    // sigma(-d) for d >= 0, in (0, 0.5].
    fn losing_prob(d: f64) -> f64 {
        let e = (-d).exp();
        e / (1.0 + e)
    }
    let d = r1 - r2;
    if d >= 0.0 {
        Ok(1.0 - losing_prob(d))
    } else {
        Ok(losing_prob(-d))
    }
}

/// Builds an offline preference dataset: for each of `n_prompts` fresh random
/// prompts, two completions are drawn from `sampler_policy` and labeled by a
/// Bradley-Terry draw on the latent rewards. Identical draws are resampled so
/// every pair is distinct.
pub fn build_offline_dataset(
    world: &World,
    n_prompts: usize,
    sampler_policy: &Policy,
    rng: &mut impl Rng,
) -> Result<Vec<PreferencePair>> {
    if n_prompts == 0 {
        return Err(Error::Input("n_prompts must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(n_prompts);
    for _ in 0..n_prompts {
        let x = world.sample_prompt(rng);
        let y1 = sampler_policy.sample(&x, rng)?;
        let mut y2 = sampler_policy.sample(&x, rng)?;
        // Retry identical draws; under a near-deterministic sampler give up
        // and perturb one token to keep the pair well-formed.
        let mut attempts = 0;
        while y2 == y1 && attempts < 16 {
            y2 = sampler_policy.sample(&x, rng)?;
            attempts += 1;
        }
        if y2 == y1 {
            let pos = rng.random_range(0..y2.len());
            let shift = rng.random_range(1..world.config.vocab_size);
            y2.0[pos] = (y2.0[pos] + shift) % world.config.vocab_size;
        }
        out.push(world.sample_preference(&x, &y1, &y2, rng)?);
    }
    Ok(out)
}

/// Histogram of absolute score gaps with fixed-width bins starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    /// `counts[i]` covers gaps in `[i * bin_width, (i+1) * bin_width)`.
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Histogram of `|chosen_score - rejected_score|` over scored pairs.
pub fn gap_histogram(pairs: &[PreferencePair], bin_width: f64) -> Result<Histogram> {
    if !(bin_width.is_finite() && bin_width > 0.0) {
        return Err(Error::Input(format!("bin_width must be > 0, got {bin_width}")));
    }
    let mut counts: Vec<u64> = Vec::new();
    for (i, pair) in pairs.iter().enumerate() {
        let gap = pair
            .gap()
            .ok_or_else(|| Error::Input(format!("pair {i} is unscored")))?;
        if !gap.is_finite() {
            return Err(Error::Input(format!("pair {i} has non-finite gap")));
        }
        let bin = (gap / bin_width).floor() as usize;
        if counts.len() <= bin {
            counts.resize(bin + 1, 0);
        }
        counts[bin] += 1;
    }
    Ok(Histogram { bin_width, counts })
}

// --- external interfaces: dataset records and world config files ---

/// One line of the line-delimited dataset format. Hard-set records carry the
/// prompt only.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PairRecord {
    pub prompt: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chosen_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected_score: Option<f64>,
}

impl From<&PreferencePair> for PairRecord {
    fn from(p: &PreferencePair) -> Self {
        PairRecord {
            prompt: p.prompt.0.clone(),
            chosen: Some(p.chosen.0.clone()),
            rejected: Some(p.rejected.0.clone()),
            chosen_score: p.chosen_score,
            rejected_score: p.rejected_score,
        }
    }
}

impl TryFrom<PairRecord> for PreferencePair {
    type Error = Error;

    fn try_from(r: PairRecord) -> Result<PreferencePair> {
        match (r.chosen, r.rejected) {
            (Some(c), Some(rj)) => Ok(PreferencePair {
                prompt: TokenSeq(r.prompt),
                chosen: TokenSeq(c),
                rejected: TokenSeq(rj),
                chosen_score: r.chosen_score,
                rejected_score: r.rejected_score,
            }),
            _ => Err(Error::Format(
                "record carries a prompt only; expected a full preference pair".into(),
            )),
        }
    }
}

/// Serializes pairs as line-delimited JSON records.
pub fn dataset_to_string(pairs: &[PreferencePair]) -> String {
    let mut s = String::new();
    for p in pairs {
        s.push_str(&serde_json::to_string(&PairRecord::from(p)).expect("serializable record"));
        s.push('\n');
    }
    s
}

pub fn write_dataset(path: &Path, pairs: &[PreferencePair]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(dataset_to_string(pairs).as_bytes())?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<PreferencePair>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("dataset line {}: {e}", i + 1)))?;
        out.push(PreferencePair::try_from(rec)?);
    }
    Ok(out)
}

/// Writes prompt-only records (the hard-set export).
pub fn write_prompts(path: &Path, prompts: &[TokenSeq]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in prompts {
        let rec = PairRecord {
            prompt: p.0.clone(),
            chosen: None,
            rejected: None,
            chosen_score: None,
            rejected_score: None,
        };
        serde_json::to_writer(&mut w, &rec).expect("serializable record");
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_prompts(path: &Path) -> Result<Vec<TokenSeq>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("prompt file line {}: {e}", i + 1)))?;
        out.push(TokenSeq(rec.prompt));
    }
    Ok(out)
}

/// Writes a world config as a plain-text key=value file.
pub fn write_world_config(path: &Path, config: &WorldConfig) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "vocab_size={}", config.vocab_size)?;
    writeln!(w, "prompt_len={}", config.prompt_len)?;
    writeln!(w, "completion_len={}", config.completion_len)?;
    writeln!(w, "feature_seed={}", config.feature_seed)?;
    writeln!(w, "reward_scale={}", config.reward_scale)?;
    Ok(())
}

pub fn read_world_config(path: &Path) -> Result<WorldConfig> {
    let text = std::fs::read_to_string(path)?;
    let mut config = WorldConfig::default();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("world config line {}: missing '='", i + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |e: String| Error::Format(format!("world config line {}: {e}", i + 1));
        match key {
            "vocab_size" => config.vocab_size = value.parse().map_err(|_| bad(format!("bad u32 {value:?}")))?,
            "prompt_len" => config.prompt_len = value.parse().map_err(|_| bad(format!("bad usize {value:?}")))?,
            "completion_len" => config.completion_len = value.parse().map_err(|_| bad(format!("bad usize {value:?}")))?,
            "feature_seed" => config.feature_seed = value.parse().map_err(|_| bad(format!("bad u64 {value:?}")))?,
            "reward_scale" => config.reward_scale = value.parse().map_err(|_| bad(format!("bad f64 {value:?}")))?,
            other => return Err(bad(format!("unknown key {other:?}"))),
        }
    }
    config.validate()?;
    Ok(config)
}
