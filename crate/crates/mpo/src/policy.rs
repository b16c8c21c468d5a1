//! Tabular-softmax autoregressive policy.
//!
//! A [`Policy`] maps a context id to a categorical distribution over the next
//! token via a logits table. The context of a completion position is the
//! prompt bucket crossed with the previous token and the position parity, so
//! the table has `8 * vocab_size * 2` rows. Everything downstream needs exact
//! quantities, so log-probabilities, gradients and per-token KL are computed
//! in closed form rather than estimated.

use std::io::{BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::world::{prompt_bucket, TokenSeq, NUM_BUCKETS};
use crate::{Error, Result};

/// Identifier of the context hashing scheme, stored in checkpoints.
pub const CONTEXT_FN_ID: &str = "bucket-prev-parity";

/// Gradient (or update direction) with the same shape as the logits table.
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub data: Vec<f64>,
}

impl GradVector {
    pub fn zeros(len: usize) -> Self {
        GradVector {
            data: vec![0.0; len],
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.data {
            *g *= s;
        }
    }

    /// Rescales in place so the L2 norm does not exceed `max_norm`.
    pub fn clip_to_norm(&mut self, max_norm: f64) {
        let n = self.l2_norm();
        if n > max_norm {
            self.scale(max_norm / n);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|g| g.is_finite())
    }
}

/// Autoregressive policy over fixed-length completions.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    vocab_size: u32,
    completion_len: usize,
    /// Row-major `[n_contexts x vocab_size]`.
    logits: Vec<f64>,
}

impl Policy {
    /// The uniform policy (all-zero logits).
    pub fn uniform(vocab_size: u32, completion_len: usize) -> Policy {
        let n = Self::context_count(vocab_size) * vocab_size as usize;
        Policy {
            vocab_size,
            completion_len,
            logits: vec![0.0; n],
        }
    }

    /// A policy with independent `N(0, std^2)` logits, for tests and studies.
    pub fn random(vocab_size: u32, completion_len: usize, std: f64, rng: &mut impl Rng) -> Policy {
        let mut p = Self::uniform(vocab_size, completion_len);
        for l in &mut p.logits {
            let z: f64 = StandardNormal.sample(rng);
            *l = std * z;
        }
        p
    }

    /// Builds a policy from an explicit logits table.
    pub fn from_logits(vocab_size: u32, completion_len: usize, logits: Vec<f64>) -> Result<Policy> {
        let expected = Self::context_count(vocab_size) * vocab_size as usize;
        if logits.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} logits, got {}",
                logits.len()
            )));
        }
        Ok(Policy {
            vocab_size,
            completion_len,
            logits,
        })
    }

    pub fn context_count(vocab_size: u32) -> usize {
        NUM_BUCKETS * vocab_size as usize * 2
    }

    pub fn n_contexts(&self) -> usize {
        Self::context_count(self.vocab_size)
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    pub fn completion_len(&self) -> usize {
        self.completion_len
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Context id for generating the token at `pos`, given the previous token
    /// (the last prompt token when `pos == 0`).
    pub fn context_id(&self, x: &TokenSeq, prev: u32, pos: usize) -> usize {
        let v = self.vocab_size as usize;
        (prompt_bucket(x) * v + prev as usize) * 2 + (pos & 1)
    }

    /// The contexts visited when emitting `y` after `x`, one per position.
    pub fn visited_contexts(&self, x: &TokenSeq, y: &TokenSeq) -> Result<Vec<usize>> {
        self.check_inputs(x, y)?;
        let mut prev = *x.0.last().expect("nonempty prompt");
        let mut out = Vec::with_capacity(y.len());
        for (pos, &tok) in y.0.iter().enumerate() {
            out.push(self.context_id(x, prev, pos));
            prev = tok;
        }
        Ok(out)
    }

    fn check_inputs(&self, x: &TokenSeq, y: &TokenSeq) -> Result<()> {
        if x.is_empty() {
            return Err(Error::Input("prompt must be nonempty".into()));
        }
        x.check_vocab(self.vocab_size)?;
        y.check_vocab(self.vocab_size)?;
        if y.len() != self.completion_len {
            return Err(Error::Input(format!(
                "completion length {} != policy completion_len {}",
                y.len(),
                self.completion_len
            )));
        }
        Ok(())
    }

    fn row(&self, ctx: usize) -> &[f64] {
        let v = self.vocab_size as usize;
        &self.logits[ctx * v..(ctx + 1) * v]
    }

    /// Log-softmax of one context row.
    pub fn log_probs_row(&self, ctx: usize) -> Vec<f64> {
        let row = self.row(ctx);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|l| (l - m).exp()).sum();
        let lse = m + sum.ln();
        row.iter().map(|l| l - lse).collect()
    }

    /// Softmax of one context row.
    pub fn probs_row(&self, ctx: usize) -> Vec<f64> {
        let row = self.row(ctx);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / sum).collect()
    }

    /// Exact sequence log-probability `log pi(y | x)`.
    pub fn logprob(&self, x: &TokenSeq, y: &TokenSeq) -> Result<f64> {
        let contexts = self.visited_contexts(x, y)?;
        let mut total = 0.0;
        for (&ctx, &tok) in contexts.iter().zip(&y.0) {
            total += self.log_probs_row(ctx)[tok as usize];
        }
        Ok(total)
    }

    /// Ancestral sampling of one completion.
    pub fn sample(&self, x: &TokenSeq, rng: &mut impl Rng) -> Result<TokenSeq> {
        if x.is_empty() {
            return Err(Error::Input("prompt must be nonempty".into()));
        }
        x.check_vocab(self.vocab_size)?;
        let mut prev = *x.0.last().expect("nonempty prompt");
        let mut out = Vec::with_capacity(self.completion_len);
        for pos in 0..self.completion_len {
            let ctx = self.context_id(x, prev, pos);
            let probs = self.probs_row(ctx);
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut tok = self.vocab_size - 1;
            for (t, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    tok = t as u32;
                    break;
                }
            }
            out.push(tok);
            prev = tok;
        }
        Ok(TokenSeq(out))
    }

    /// Argmax decoding (first max wins on ties).
    pub fn greedy(&self, x: &TokenSeq) -> Result<TokenSeq> {
        if x.is_empty() {
            return Err(Error::Input("prompt must be nonempty".into()));
        }
        x.check_vocab(self.vocab_size)?;
        let mut prev = *x.0.last().expect("nonempty prompt");
        let mut out = Vec::with_capacity(self.completion_len);
        for pos in 0..self.completion_len {
            let ctx = self.context_id(x, prev, pos);
            let row = self.row(ctx);
            let mut best = 0u32;
            let mut best_l = f64::NEG_INFINITY;
            for (t, &l) in row.iter().enumerate() {
                if l > best_l {
                    best_l = l;
                    best = t as u32;
                }
            }
            out.push(best);
            prev = best;
        }
        Ok(TokenSeq(out))
    }

    /// Exact gradient of `logprob(x, y)` with respect to the logits table:
    /// one-hot minus softmax, accumulated at each visited context.
    pub fn grad_logprob(&self, x: &TokenSeq, y: &TokenSeq) -> Result<GradVector> {
        let mut g = GradVector::zeros(self.logits.len());
        self.accumulate_grad_logprob(x, y, 1.0, &mut g)?;
        Ok(g)
    }

    /// Adds `scale * grad logprob(x, y)` into an existing gradient buffer.
    pub fn accumulate_grad_logprob(
        &self,
        x: &TokenSeq,
        y: &TokenSeq,
        scale: f64,
        grad: &mut GradVector,
    ) -> Result<()> {
        let contexts = self.visited_contexts(x, y)?;
        let v = self.vocab_size as usize;
        for (&ctx, &tok) in contexts.iter().zip(&y.0) {
            let probs = self.probs_row(ctx);
            let base = ctx * v;
            for (t, p) in probs.iter().enumerate() {
                grad.data[base + t] -= scale * p;
            }
            grad.data[base + tok as usize] += scale;
        }
        Ok(())
    }

    /// In-place gradient-ascent step `logits += lr * grad`.
    pub fn apply_ascent(&mut self, grad: &GradVector, lr: f64) {
        debug_assert_eq!(grad.data.len(), self.logits.len());
        for (l, g) in self.logits.iter_mut().zip(&grad.data) {
            *l += lr * g;
        }
    }

    /// Exact token-level KL to a reference policy along the contexts visited
    /// by `y_sampled`: `sum_t KL(pi(.|ctx_t) || ref(.|ctx_t))`.
    pub fn kl_exact(&self, reference: &Policy, x: &TokenSeq, y_sampled: &TokenSeq) -> Result<f64> {
        if self.vocab_size != reference.vocab_size {
            return Err(Error::Input(format!(
                "vocabulary mismatch: {} vs {}",
                self.vocab_size, reference.vocab_size
            )));
        }
        let contexts = self.visited_contexts(x, y_sampled)?;
        let mut total = 0.0;
        for ctx in contexts {
            total += self.kl_row(reference, ctx);
        }
        Ok(total)
    }

    /// Exact categorical KL at one context, clamped at 0 against rounding.
    pub fn kl_row(&self, reference: &Policy, ctx: usize) -> f64 {
        let p = self.probs_row(ctx);
        let lp = self.log_probs_row(ctx);
        let lq = reference.log_probs_row(ctx);
        let kl: f64 = p
            .iter()
            .zip(lp.iter().zip(&lq))
            .map(|(pi, (lpi, lqi))| pi * (lpi - lqi))
            .sum();
        kl.max(0.0)
    }

    // --- checkpoint format ---

    /// Writes a versioned text checkpoint; floats round-trip bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        writeln!(w, "mpo-policy v1")?;
        writeln!(
            w,
            "vocab_size={} n_contexts={} completion_len={} context_fn={}",
            self.vocab_size,
            self.n_contexts(),
            self.completion_len,
            CONTEXT_FN_ID
        )?;
        let v = self.vocab_size as usize;
        for ctx in 0..self.n_contexts() {
            let row = &self.logits[ctx * v..(ctx + 1) * v];
            let line: Vec<String> = row.iter().map(|l| format!("{l}")).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Policy> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let magic = lines
            .next()
            .ok_or_else(|| Error::Format("empty checkpoint".into()))?;
        if magic.trim() != "mpo-policy v1" {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let header = lines
            .next()
            .ok_or_else(|| Error::Format("missing checkpoint header".into()))?;
        let mut vocab_size: Option<u32> = None;
        let mut n_contexts: Option<usize> = None;
        let mut completion_len: Option<usize> = None;
        let mut context_fn: Option<String> = None;
        for field in header.split_whitespace() {
            let (k, val) = field
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad header field {field:?}")))?;
            match k {
                "vocab_size" => vocab_size = val.parse().ok(),
                "n_contexts" => n_contexts = val.parse().ok(),
                "completion_len" => completion_len = val.parse().ok(),
                "context_fn" => context_fn = Some(val.to_string()),
                _ => return Err(Error::Format(format!("unknown header field {k:?}"))),
            }
        }
        let vocab_size =
            vocab_size.ok_or_else(|| Error::Format("header missing vocab_size".into()))?;
        let n_contexts =
            n_contexts.ok_or_else(|| Error::Format("header missing n_contexts".into()))?;
        let completion_len =
            completion_len.ok_or_else(|| Error::Format("header missing completion_len".into()))?;
        let context_fn = context_fn.ok_or_else(|| Error::Format("header missing context_fn".into()))?;
        if context_fn != CONTEXT_FN_ID {
            return Err(Error::Format(format!(
                "unsupported context_fn {context_fn:?} (expected {CONTEXT_FN_ID:?})"
            )));
        }
        if n_contexts != Self::context_count(vocab_size) {
            return Err(Error::Format(format!(
                "n_contexts {n_contexts} inconsistent with vocab_size {vocab_size}"
            )));
        }
        let v = vocab_size as usize;
        let mut logits = Vec::with_capacity(n_contexts * v);
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            for tok in line.split_whitespace() {
                let x: f64 = tok
                    .parse()
                    .map_err(|_| Error::Format(format!("row {}: bad float {tok:?}", i + 1)))?;
                logits.push(x);
            }
        }
        if logits.len() != n_contexts * v {
            return Err(Error::Format(format!(
                "expected {} logits, got {}",
                n_contexts * v,
                logits.len()
            )));
        }
        Ok(Policy {
            vocab_size,
            completion_len,
            logits,
        })
    }
}

/// Supervised fine-tuning hyperparameters (plain gradient ascent on the mean
/// demo log-probability).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub steps: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: Option<f64>,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1.0,
            steps: 800,
            batch_size: 0,
            seed: 0,
            clip_norm: Some(10.0),
        }
    }
}

/// Trains a copy of `policy` by gradient ascent on the mean log-probability of
/// the demonstrations. Returns the trained policy and the per-step loss trace
/// (negative mean batch log-probability, recorded before each update).
pub fn sft_train(
    policy: &Policy,
    demos: &[(TokenSeq, TokenSeq)],
    config: &SftConfig,
) -> Result<(Policy, Vec<f64>)> {
    if demos.is_empty() {
        return Err(Error::Input("sft_train requires nonempty demos".into()));
    }
    if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
        return Err(Error::Config(format!(
            "learning_rate must be > 0, got {}",
            config.learning_rate
        )));
    }
    let mut trained = policy.clone();
    let mut trace = Vec::with_capacity(config.steps);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let full_batch = config.batch_size == 0 || config.batch_size >= demos.len();
    let mut order: Vec<usize> = (0..demos.len()).collect();
    let mut cursor = 0usize;

    for _ in 0..config.steps {
        let batch: Vec<usize> = if full_batch {
            order.clone()
        } else {
            if cursor == 0 {
                use rand::seq::SliceRandom;
                order.shuffle(&mut rng);
            }
            let end = (cursor + config.batch_size).min(demos.len());
            let b = order[cursor..end].to_vec();
            cursor = if end == demos.len() { 0 } else { end };
            b
        };
        let scale = 1.0 / batch.len() as f64;
        let mut grad = GradVector::zeros(trained.logits.len());
        let mut loss = 0.0;
        for &i in &batch {
            let (x, y) = &demos[i];
            loss -= trained.logprob(x, y)? * scale;
            trained.accumulate_grad_logprob(x, y, scale, &mut grad)?;
        }
        if let Some(c) = config.clip_norm {
            grad.clip_to_norm(c);
        }
        trace.push(loss);
        trained.apply_ascent(&grad, config.learning_rate);
    }
    Ok((trained, trace))
}
