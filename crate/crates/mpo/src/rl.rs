//! KL-constrained PPO against a configurable reference policy.
//!
//! Rollouts sample completions from the current policy on a prompt pool,
//! score them with the reward model, and record the exact per-token KL to the
//! reference. The KL penalty is applied as per-token reward shaping, the
//! terminal reward-model score lands on the last token, advantages come from
//! GAE over a tabular value baseline, and the actor update is the clipped
//! surrogate.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{GradVector, Policy};
use crate::reward::RewardModel;
use crate::world::{TokenSeq, World};
use crate::{Error, Result};

/// PPO hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    /// Weight of the per-token KL penalty against the reference.
    pub kl_coef: f64,
    /// Clipping half-width for the importance ratio.
    pub clip_eps: f64,
    pub gae_lambda: f64,
    pub discount: f64,
    pub rollouts_per_iter: usize,
    /// Update passes over each freshly collected batch.
    pub ppo_epochs: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Number of rollout-update iterations.
    pub steps: usize,
    pub seed: u64,
    pub normalize_advantages: bool,
    pub clip_norm: Option<f64>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            kl_coef: 0.4,
            clip_eps: 0.2,
            gae_lambda: 0.95,
            discount: 1.0,
            rollouts_per_iter: 128,
            ppo_epochs: 4,
            actor_lr: 10.0,
            critic_lr: 2.0,
            steps: 300,
            seed: 0,
            normalize_advantages: true,
            clip_norm: Some(10.0),
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kl_coef.is_finite() && self.kl_coef > 0.0) {
            return Err(Error::Config(format!("kl_coef must be > 0, got {}", self.kl_coef)));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::Config(format!(
                "clip_eps must be in (0, 1), got {}",
                self.clip_eps
            )));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config(format!(
                "gae_lambda must be in [0, 1], got {}",
                self.gae_lambda
            )));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::Config(format!(
                "discount must be in (0, 1], got {}",
                self.discount
            )));
        }
        if self.rollouts_per_iter == 0 {
            return Err(Error::Config("rollouts_per_iter must be >= 1".into()));
        }
        if self.ppo_epochs == 0 {
            return Err(Error::Config("ppo_epochs must be >= 1".into()));
        }
        for (name, lr) in [("actor_lr", self.actor_lr), ("critic_lr", self.critic_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        Ok(())
    }
}

/// One sampled completion with everything the update needs frozen in.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: TokenSeq,
    pub completion: TokenSeq,
    /// Context visited at each completion position.
    pub contexts: Vec<usize>,
    /// Log-probability of each sampled token under the rollout policy.
    pub per_token_logprob: Vec<f64>,
    /// Log-probability of each sampled token under the reference.
    pub per_token_ref_logprob: Vec<f64>,
    /// Exact categorical KL policy||reference at each visited context.
    pub per_token_kl: Vec<f64>,
    /// Reward-model score of the full completion.
    pub terminal_reward: f64,
    /// Filled by [`shaped_rewards`] via the caller.
    pub shaped: Vec<f64>,
    /// Filled by [`gae`].
    pub advantages: Vec<f64>,
    /// Filled by [`gae`].
    pub returns: Vec<f64>,
}

/// Tabular state-value baseline over the policy's context space.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueModel {
    pub values: Vec<f64>,
}

impl ValueModel {
    pub fn zeros(n_contexts: usize) -> Self {
        ValueModel {
            values: vec![0.0; n_contexts],
        }
    }
}

/// Collects `n` trajectories from `policy` on prompts drawn uniformly from the
/// pool, scored by `rm`, with per-token KL against `reference`.
pub fn rollout(
    policy: &Policy,
    reference: &Policy,
    rm: &RewardModel,
    prompts: &[TokenSeq],
    rng: &mut impl Rng,
    n: usize,
) -> Result<Vec<Trajectory>> {
    if prompts.is_empty() {
        return Err(Error::Input("rollout requires a nonempty prompt pool".into()));
    }
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let x = &prompts[rng.random_range(0..prompts.len())];
        let y = policy.sample(x, rng)?;
        let contexts = policy.visited_contexts(x, &y)?;
        let mut per_token_logprob = Vec::with_capacity(contexts.len());
        let mut per_token_ref_logprob = Vec::with_capacity(contexts.len());
        let mut per_token_kl = Vec::with_capacity(contexts.len());
        for (&ctx, &tok) in contexts.iter().zip(&y.0) {
            per_token_logprob.push(policy.log_probs_row(ctx)[tok as usize]);
            per_token_ref_logprob.push(reference.log_probs_row(ctx)[tok as usize]);
            per_token_kl.push(policy.kl_row(reference, ctx));
        }
        let terminal_reward = rm.score(x, &y)?;
        out.push(Trajectory {
            prompt: x.clone(),
            completion: y,
            contexts,
            per_token_logprob,
            per_token_ref_logprob,
            per_token_kl,
            terminal_reward,
            shaped: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
        });
    }
    Ok(out)
}

/// Per-token shaped rewards: `-kl_coef * kl[t]` everywhere, plus the terminal
/// reward-model score on the last token.
pub fn shaped_rewards(traj: &Trajectory, kl_coef: f64) -> Vec<f64> {
    let mut r: Vec<f64> = traj.per_token_kl.iter().map(|k| -kl_coef * k).collect();
    if let Some(last) = r.last_mut() {
        *last += traj.terminal_reward;
    }
    r
}

/// Generalized advantage estimation over the trajectory's shaped rewards,
/// filling `advantages` and `returns` (returns = advantage + baseline).
pub fn gae(
    traj: &mut Trajectory,
    value_model: &ValueModel,
    gae_lambda: f64,
    discount: f64,
) -> Result<()> {
    let n = traj.contexts.len();
    if traj.shaped.len() != n {
        return Err(Error::Input(format!(
            "shaped rewards not computed (have {}, need {n})",
            traj.shaped.len()
        )));
    }
    let values: Vec<f64> = traj
        .contexts
        .iter()
        .map(|&c| value_model.values[c])
        .collect();
    let mut advantages = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next_value = if t + 1 < n { values[t + 1] } else { 0.0 };
        let delta = traj.shaped[t] + discount * next_value - values[t];
        acc = delta + discount * gae_lambda * acc;
        advantages[t] = acc;
    }
    traj.returns = advantages.iter().zip(&values).map(|(a, v)| a + v).collect();
    traj.advantages = advantages;
    Ok(())
}

/// Statistics of one clipped-surrogate update pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoUpdateStats {
    pub mean_ratio: f64,
    pub min_ratio: f64,
    pub max_ratio: f64,
    /// Fraction of tokens with ratio outside the clip band.
    pub clip_fraction: f64,
    /// Mean of `old_logprob - new_logprob`.
    pub approx_kl: f64,
    pub critic_loss: f64,
}

/// One full-batch clipped-surrogate step on the actor and one squared-error
/// regression step on the critic. Old log-probabilities stay frozen in the
/// trajectories, so calling this repeatedly realizes multiple PPO epochs.
pub fn ppo_update(
    policy: &mut Policy,
    value_model: &mut ValueModel,
    batch: &[Trajectory],
    config: &PpoConfig,
) -> Result<PpoUpdateStats> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::Input("ppo_update requires trajectories".into()));
    }
    let n_tokens: usize = batch.iter().map(|t| t.contexts.len()).sum();
    if n_tokens == 0 {
        return Err(Error::Input("ppo_update requires nonempty completions".into()));
    }
    for (i, t) in batch.iter().enumerate() {
        if t.advantages.len() != t.contexts.len() {
            return Err(Error::Input(format!(
                "trajectory {i}: advantages not computed"
            )));
        }
    }

    // Optional batch-wide advantage normalization.
    let mut adv: Vec<Vec<f64>> = batch.iter().map(|t| t.advantages.clone()).collect();
    if config.normalize_advantages {
        let flat: Vec<f64> = adv.iter().flatten().copied().collect();
        let mean = flat.iter().sum::<f64>() / flat.len() as f64;
        let var = flat.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / flat.len() as f64;
        let std = var.sqrt();
        if std > 1e-12 {
            for row in &mut adv {
                for a in row {
                    *a = (*a - mean) / std;
                }
            }
        }
    }

    let v = policy.vocab_size() as usize;
    let lo = 1.0 - config.clip_eps;
    let hi = 1.0 + config.clip_eps;
    let mut grad = GradVector::zeros(policy.logits().len());
    let mut critic_grad = vec![0.0; value_model.values.len()];
    let mut sum_ratio = 0.0;
    let mut min_ratio = f64::INFINITY;
    let mut max_ratio = f64::NEG_INFINITY;
    let mut clipped = 0usize;
    let mut approx_kl = 0.0;
    let mut critic_loss = 0.0;
    let scale = 1.0 / n_tokens as f64;

    for (t_idx, traj) in batch.iter().enumerate() {
        for (pos, (&ctx, &tok)) in traj.contexts.iter().zip(&traj.completion.0).enumerate() {
            let new_lp = policy.log_probs_row(ctx)[tok as usize];
            let old_lp = traj.per_token_logprob[pos];
            let ratio = (new_lp - old_lp).exp();
            if !ratio.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite ratio at trajectory {t_idx} pos {pos}: new_lp={new_lp} old_lp={old_lp}"
                )));
            }
            sum_ratio += ratio;
            min_ratio = min_ratio.min(ratio);
            max_ratio = max_ratio.max(ratio);
            if ratio < lo || ratio > hi {
                clipped += 1;
            }
            approx_kl += (old_lp - new_lp) * scale;

            let a = adv[t_idx][pos];
            let unclipped = ratio * a;
            let clipped_obj = ratio.clamp(lo, hi) * a;
            // The clipped branch has zero gradient whenever it is the active
            // minimum, so only the unclipped branch contributes.
            if unclipped <= clipped_obj {
                let probs = policy.probs_row(ctx);
                let coef = scale * a * ratio;
                let base = ctx * v;
                for (token, p) in probs.iter().enumerate() {
                    grad.data[base + token] -= coef * p;
                }
                grad.data[base + tok as usize] += coef;
            }

            // Critic regression toward the returns.
            let value = value_model.values[ctx];
            let err = value - traj.returns[pos];
            critic_loss += err * err * scale;
            critic_grad[ctx] += 2.0 * err * scale;
        }
    }

    if !grad.is_finite() || !critic_loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite PPO update (critic_loss={critic_loss}, mean_ratio={})",
            sum_ratio / n_tokens as f64
        )));
    }
    if let Some(c) = config.clip_norm {
        grad.clip_to_norm(c);
    }
    policy.apply_ascent(&grad, config.actor_lr);
    for (value, g) in value_model.values.iter_mut().zip(&critic_grad) {
        *value -= config.critic_lr * g;
    }

    Ok(PpoUpdateStats {
        mean_ratio: sum_ratio / n_tokens as f64,
        min_ratio,
        max_ratio,
        clip_fraction: clipped as f64 / n_tokens as f64,
        approx_kl,
        critic_loss,
    })
}

/// Per-iteration metrics of a PPO run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PpoIterStats {
    pub iter: usize,
    /// Mean reward-model score of the iteration's rollouts.
    pub mean_reward_rm: f64,
    /// Mean latent reward, when a world oracle is available.
    pub mean_reward_true: Option<f64>,
    /// Mean per-trajectory exact KL to the reference.
    pub mean_kl: f64,
    /// Clip fraction of the last update epoch.
    pub clip_fraction: f64,
    pub mean_ratio: f64,
    pub critic_loss: f64,
}

/// Runs the full PPO loop from `policy_init` with a frozen reference: rollout,
/// shaping, GAE, then `ppo_epochs` clipped-surrogate passes, for
/// `config.steps` iterations. `oracle` is used only to log the latent reward.
pub fn ppo_train(
    policy_init: &Policy,
    reference: &Policy,
    rm: &RewardModel,
    prompt_pool: &[TokenSeq],
    config: &PpoConfig,
    oracle: Option<&World>,
) -> Result<(Policy, ValueModel, Vec<PpoIterStats>)> {
    config.validate()?;
    if prompt_pool.is_empty() && config.steps > 0 {
        return Err(Error::Input("ppo_train requires a nonempty prompt pool".into()));
    }
    let mut policy = policy_init.clone();
    let mut value_model = ValueModel::zeros(policy.n_contexts());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut trace = Vec::with_capacity(config.steps);

    for iter in 0..config.steps {
        let mut batch = rollout(
            &policy,
            reference,
            rm,
            prompt_pool,
            &mut rng,
            config.rollouts_per_iter,
        )?;
        let mut mean_kl = 0.0;
        let mut mean_rm = 0.0;
        let mut mean_true = oracle.map(|_| 0.0);
        for traj in &mut batch {
            traj.shaped = shaped_rewards(traj, config.kl_coef);
            gae(traj, &value_model, config.gae_lambda, config.discount)?;
            mean_kl += traj.per_token_kl.iter().sum::<f64>();
            mean_rm += traj.terminal_reward;
            if let (Some(acc), Some(world)) = (mean_true.as_mut(), oracle) {
                *acc += world.true_reward(&traj.prompt, &traj.completion)?;
            }
        }
        let n = batch.len() as f64;
        mean_kl /= n;
        mean_rm /= n;
        if let Some(acc) = mean_true.as_mut() {
            *acc /= n;
        }

        let mut last_stats = None;
        for _ in 0..config.ppo_epochs {
            last_stats = Some(ppo_update(&mut policy, &mut value_model, &batch, config)?);
        }
        let stats = last_stats.expect("ppo_epochs >= 1");
        trace.push(PpoIterStats {
            iter,
            mean_reward_rm: mean_rm,
            mean_reward_true: mean_true,
            mean_kl,
            clip_fraction: stats.clip_fraction,
            mean_ratio: stats.mean_ratio,
            critic_loss: stats.critic_loss,
        });
    }
    Ok((policy, value_model, trace))
}
