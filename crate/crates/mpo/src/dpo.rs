//! Direct preference optimization on the easy set.
//!
//! The loss contrasts the policy's implicit reward (scaled log-probability
//! ratio against a frozen reference) between chosen and rejected completions.
//! The module also carries the closed-form gradients of the loss with respect
//! to the two probability-ratio variables and their beta-free ratio identity,
//! which explain why near-identical pairs contribute no useful signal.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::policy::{GradVector, Policy};
use crate::reward::{sigmoid, softplus};
use crate::world::{PreferencePair, TokenSeq};
use crate::{Error, Result};

/// DPO training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoConfig {
    /// Implicit-reward scale.
    pub beta: f64,
    pub learning_rate: f64,
    pub steps: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
    /// Probability of flipping each training label (noise-robustness studies).
    pub label_flip_prob: f64,
    pub clip_norm: Option<f64>,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self {
            beta: 0.1,
            learning_rate: 4.0,
            steps: 400,
            batch_size: 0,
            seed: 0,
            label_flip_prob: 0.0,
            clip_norm: Some(10.0),
        }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::Config(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.label_flip_prob) {
            return Err(Error::Config(format!(
                "label_flip_prob must be in [0, 1], got {}",
                self.label_flip_prob
            )));
        }
        Ok(())
    }
}

/// Implicit reward `beta * (log pi(y|x) - log pi_ref(y|x))`.
pub fn implicit_reward(
    policy: &Policy,
    reference: &Policy,
    x: &TokenSeq,
    y: &TokenSeq,
    beta: f64,
) -> Result<f64> {
    Ok(beta * (policy.logprob(x, y)? - reference.logprob(x, y)?))
}

/// Implicit-reward margin of one pair: chosen minus rejected.
pub fn pair_margin(
    policy: &Policy,
    reference: &Policy,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    let w = implicit_reward(policy, reference, &pair.prompt, &pair.chosen, beta)?;
    let l = implicit_reward(policy, reference, &pair.prompt, &pair.rejected, beta)?;
    Ok(w - l)
}

/// Mean `-log sigma(margin)` over the batch.
pub fn dpo_loss(
    policy: &Policy,
    reference: &Policy,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("dpo_loss requires a nonempty batch".into()));
    }
    let mut total = 0.0;
    for pair in batch {
        total += softplus(-pair_margin(policy, reference, pair, beta)?);
    }
    Ok(total / batch.len() as f64)
}

/// Exact gradient of [`dpo_loss`] with respect to the policy logits.
pub fn dpo_grad(
    policy: &Policy,
    reference: &Policy,
    batch: &[PreferencePair],
    beta: f64,
) -> Result<GradVector> {
    if batch.is_empty() {
        return Err(Error::Input("dpo_grad requires a nonempty batch".into()));
    }
    let mut grad = GradVector::zeros(policy.logits().len());
    let scale = 1.0 / batch.len() as f64;
    for pair in batch {
        let margin = pair_margin(policy, reference, pair, beta)?;
        // d/d_margin of -log sigma(margin) is -sigma(-margin).
        let coef = -sigmoid(-margin) * beta * scale;
        policy.accumulate_grad_logprob(&pair.prompt, &pair.chosen, coef, &mut grad)?;
        policy.accumulate_grad_logprob(&pair.prompt, &pair.rejected, -coef, &mut grad)?;
    }
    Ok(grad)
}

/// One row of the DPO training trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoTraceRow {
    pub step: usize,
    /// Batch loss before the update.
    pub loss: f64,
    /// Mean implicit-reward margin of the batch before the update.
    pub mean_margin: f64,
}

/// Trains a copy of `policy_init` against the frozen `reference` on the easy
/// set. Deterministic given the config seed.
pub fn dpo_train(
    policy_init: &Policy,
    reference: &Policy,
    easy_set: &[PreferencePair],
    config: &DpoConfig,
) -> Result<(Policy, Vec<DpoTraceRow>)> {
    config.validate()?;
    if easy_set.is_empty() {
        return Err(Error::Config(
            "easy set is empty; lower the selection threshold".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut data: Vec<PreferencePair> = easy_set.to_vec();
    if config.label_flip_prob > 0.0 {
        for pair in &mut data {
            if rng.random::<f64>() < config.label_flip_prob {
                std::mem::swap(&mut pair.chosen, &mut pair.rejected);
                std::mem::swap(&mut pair.chosen_score, &mut pair.rejected_score);
            }
        }
    }

    // Reference log-probabilities never change; cache the per-pair difference.
    let ref_diff: Vec<f64> = data
        .iter()
        .map(|p| {
            Ok(reference.logprob(&p.prompt, &p.chosen)?
                - reference.logprob(&p.prompt, &p.rejected)?)
        })
        .collect::<Result<_>>()?;

    let mut policy = policy_init.clone();
    let mut trace = Vec::with_capacity(config.steps);
    let full_batch = config.batch_size == 0 || config.batch_size >= data.len();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = 0usize;

    for step in 0..config.steps {
        let batch: Vec<usize> = if full_batch {
            (0..data.len()).collect()
        } else {
            if cursor == 0 {
                order.shuffle(&mut rng);
            }
            let end = (cursor + config.batch_size).min(data.len());
            let b = order[cursor..end].to_vec();
            cursor = if end == data.len() { 0 } else { end };
            b
        };
        let scale = 1.0 / batch.len() as f64;
        let mut grad = GradVector::zeros(policy.logits().len());
        let mut loss = 0.0;
        let mut margin_sum = 0.0;
        for &i in &batch {
            let pair = &data[i];
            let lp_w = policy.logprob(&pair.prompt, &pair.chosen)?;
            let lp_l = policy.logprob(&pair.prompt, &pair.rejected)?;
            let margin = config.beta * ((lp_w - lp_l) - ref_diff[i]);
            loss += softplus(-margin) * scale;
            margin_sum += margin;
            let coef = -sigmoid(-margin) * config.beta * scale;
            policy.accumulate_grad_logprob(&pair.prompt, &pair.chosen, coef, &mut grad)?;
            policy.accumulate_grad_logprob(&pair.prompt, &pair.rejected, -coef, &mut grad)?;
        }
        trace.push(DpoTraceRow {
            step,
            loss,
            mean_margin: margin_sum / batch.len() as f64,
        });
        if !grad.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite DPO gradient at step {step} (loss {loss})"
            )));
        }
        if let Some(c) = config.clip_norm {
            grad.clip_to_norm(c);
        }
        // Descent on the loss.
        policy.apply_ascent(&grad, -config.learning_rate);
    }
    Ok((policy, trace))
}

/// The two probability-ratio variables `x_w = pi(y_w|x)/pi_ref(y_w|x)` and
/// `x_l = pi(y_l|x)/pi_ref(y_l|x)` treated as free coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbRatioPoint {
    pub x_w: f64,
    pub x_l: f64,
}

impl ProbRatioPoint {
    pub fn new(x_w: f64, x_l: f64) -> Result<Self> {
        if !(x_w.is_finite() && x_w > 0.0 && x_l.is_finite() && x_l > 0.0) {
            return Err(Error::Input(format!(
                "probability ratios must be finite and > 0, got ({x_w}, {x_l})"
            )));
        }
        Ok(Self { x_w, x_l })
    }
}

/// The per-pair DPO loss as a function of the ratio variables:
/// `-log sigma(beta ln x_w - beta ln x_l)`.
pub fn ratio_loss(p: ProbRatioPoint, beta: f64) -> f64 {
    softplus(-(beta * p.x_w.ln() - beta * p.x_l.ln()))
}

/// Closed-form gradients of [`ratio_loss`] with respect to `x_w` and `x_l`:
///
/// `g_w = -beta * x_l^beta / (x_w * (x_w^beta + x_l^beta))`
/// `g_l =  beta * x_l^(beta-1) / (x_w^beta + x_l^beta)`
pub fn theorem1_grads(p: ProbRatioPoint, beta: f64) -> Result<(f64, f64)> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::Input(format!("beta must be > 0, got {beta}")));
    }
    ProbRatioPoint::new(p.x_w, p.x_l)?;
    let denom = p.x_w.powf(beta) + p.x_l.powf(beta);
    let g_w = -beta * p.x_l.powf(beta) / (p.x_w * denom);
    let g_l = beta * p.x_l.powf(beta - 1.0) / denom;
    if !(g_w.is_finite() && g_l.is_finite()) {
        return Err(Error::Numeric(format!(
            "gradients overflow at x_w={}, x_l={}, beta={beta}",
            p.x_w, p.x_l
        )));
    }
    Ok((g_w, g_l))
}

/// `|g_w / g_l|`, which equals `x_l / x_w` for every beta; the identity is
/// checked to 1e-12 relative tolerance before returning.
pub fn gradient_ratio(p: ProbRatioPoint, beta: f64) -> Result<f64> {
    let (g_w, g_l) = theorem1_grads(p, beta)?;
    let ratio = (g_w / g_l).abs();
    let expected = p.x_l / p.x_w;
    let rel = (ratio - expected).abs() / expected.abs().max(1e-300);
    if rel > 1e-12 {
        return Err(Error::Numeric(format!(
            "gradient ratio {ratio} deviates from x_l/x_w = {expected} (rel {rel})"
        )));
    }
    Ok(ratio)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;
    use crate::world::{build_offline_dataset, build_world, WorldConfig};

    #[test]
    fn implicit_reward_identity_and_beta_linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = Policy::random(4, 3, 1.0, &mut rng);
        let x = TokenSeq(vec![0, 2]);
        let y = TokenSeq(vec![1, 3, 0]);
        assert_eq!(implicit_reward(&p, &p, &x, &y, 0.1).unwrap(), 0.0);

        let q = Policy::random(4, 3, 1.0, &mut rng);
        let a = implicit_reward(&p, &q, &x, &y, 0.1).unwrap();
        let b = implicit_reward(&p, &q, &x, &y, 0.2).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
    }

    #[test]
    fn implicit_reward_hand_case() {
        // Reference uniform over vocab 4 (per-token prob 1/4); policy puts
        // prob 1/2 on token 0 at every context. For y = 0^8 the per-token log
        // ratio is ln 2, so with beta = 0.1 the implicit reward is 0.8 ln 2.
        let reference = Policy::uniform(4, 8);
        let mut policy = Policy::uniform(4, 8);
        for ctx in 0..policy.n_contexts() {
            policy.logits_mut()[ctx * 4] = 3.0f64.ln();
        }
        let x = TokenSeq(vec![0, 0]);
        let y = TokenSeq(vec![0; 8]);
        let ir = implicit_reward(&policy, &reference, &x, &y, 0.1).unwrap();
        assert!((ir - 0.8 * std::f64::consts::LN_2).abs() < 1e-12, "ir={ir}");
    }

    #[test]
    fn dpo_loss_at_reference_is_ln2() {
        let world = build_world(WorldConfig::default()).unwrap();
        let uniform = Policy::uniform(16, 8);
        let batch =
            build_offline_dataset(&world, 30, &uniform, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = Policy::random(16, 8, 0.7, &mut rng);
        let loss = dpo_loss(&p, &p, &batch, 0.1).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(dpo_loss(&p, &p, &[], 0.1).is_err());
    }

    #[test]
    fn dpo_grad_matches_finite_differences() {
        let config = WorldConfig {
            vocab_size: 3,
            prompt_len: 2,
            completion_len: 2,
            feature_seed: 4,
            reward_scale: 1.0,
        };
        let world = build_world(config).unwrap();
        let uniform = Policy::uniform(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let batch = build_offline_dataset(&world, 4, &uniform, &mut rng).unwrap();
            let policy = Policy::random(3, 2, 0.8, &mut rng);
            let reference = Policy::random(3, 2, 0.8, &mut rng);
            let beta = 0.1 + 0.4 * rng.random::<f64>();
            let analytic = dpo_grad(&policy, &reference, &batch, beta).unwrap();
            let numeric = gradcheck::grad_central_diff(
                policy.logits(),
                |params| {
                    let p = Policy::from_logits(3, 2, params.to_vec()).unwrap();
                    dpo_loss(&p, &reference, &batch, beta).unwrap()
                },
                1e-5,
            );
            let err = gradcheck::rel_l2_err(&analytic.data, &numeric);
            assert!(err <= 1e-5, "trial {trial}: rel err {err}");
        }
    }

    #[test]
    fn degenerate_pair_has_exactly_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let policy = Policy::random(4, 3, 0.6, &mut rng);
        let reference = Policy::random(4, 3, 0.6, &mut rng);
        let y = TokenSeq(vec![1, 2, 3]);
        let pair = PreferencePair {
            prompt: TokenSeq(vec![0, 1]),
            chosen: y.clone(),
            rejected: y,
            chosen_score: None,
            rejected_score: None,
        };
        let g = dpo_grad(&policy, &reference, &[pair], 0.1).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn swapping_labels_negates_margin() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let policy = Policy::random(4, 3, 0.6, &mut rng);
        let reference = Policy::random(4, 3, 0.6, &mut rng);
        let pair = PreferencePair {
            prompt: TokenSeq(vec![2, 3]),
            chosen: TokenSeq(vec![0, 1, 2]),
            rejected: TokenSeq(vec![3, 3, 1]),
            chosen_score: None,
            rejected_score: None,
        };
        let swapped = PreferencePair {
            prompt: pair.prompt.clone(),
            chosen: pair.rejected.clone(),
            rejected: pair.chosen.clone(),
            chosen_score: None,
            rejected_score: None,
        };
        let m = pair_margin(&policy, &reference, &pair, 0.1).unwrap();
        let ms = pair_margin(&policy, &reference, &swapped, 0.1).unwrap();
        assert_eq!(m, -ms);
    }

    #[test]
    fn training_zero_steps_is_identity_and_margin_grows() {
        let world = build_world(WorldConfig {
            reward_scale: 5.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let uniform = Policy::uniform(16, 8);
        let easy =
            build_offline_dataset(&world, 80, &uniform, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let sft = Policy::uniform(16, 8);

        let mut config = DpoConfig::default();
        config.steps = 0;
        let (unchanged, trace) = dpo_train(&sft, &sft, &easy, &config).unwrap();
        assert_eq!(unchanged, sft);
        assert!(trace.is_empty());

        let config = DpoConfig {
            steps: 150,
            ..DpoConfig::default()
        };
        let (trained, trace) = dpo_train(&sft, &sft, &easy, &config).unwrap();
        assert_eq!(trace.len(), 150);
        let mut margin_sum = 0.0;
        for pair in &easy {
            margin_sum += pair_margin(&trained, &sft, pair, config.beta).unwrap();
        }
        assert!(margin_sum / easy.len() as f64 > 0.0);
        assert!(trace.last().unwrap().loss < trace.first().unwrap().loss);

        assert!(matches!(
            dpo_train(&sft, &sft, &[], &config),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dpo_train_is_deterministic() {
        let world = build_world(WorldConfig::default()).unwrap();
        let uniform = Policy::uniform(16, 8);
        let easy =
            build_offline_dataset(&world, 40, &uniform, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let sft = Policy::uniform(16, 8);
        let config = DpoConfig {
            steps: 30,
            batch_size: 16,
            ..DpoConfig::default()
        };
        let (a, ta) = dpo_train(&sft, &sft, &easy, &config).unwrap();
        let (b, tb) = dpo_train(&sft, &sft, &easy, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
    }

    #[test]
    fn theorem1_symmetric_point_and_signs() {
        let p = ProbRatioPoint::new(1.0, 1.0).unwrap();
        let (g_w, g_l) = theorem1_grads(p, 1.0).unwrap();
        assert_eq!(g_w, -0.5);
        assert_eq!(g_l, 0.5);

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..200 {
            let p = ProbRatioPoint::new(
                0.05 + 10.0 * rng.random::<f64>(),
                0.05 + 10.0 * rng.random::<f64>(),
            )
            .unwrap();
            let beta = 0.05 + 1.95 * rng.random::<f64>();
            let (g_w, g_l) = theorem1_grads(p, beta).unwrap();
            assert!(g_w < 0.0 && g_l > 0.0);
        }
        assert!(theorem1_grads(ProbRatioPoint { x_w: 0.0, x_l: 1.0 }, 1.0).is_err());
        assert!(ProbRatioPoint::new(-1.0, 1.0).is_err());
    }

    #[test]
    fn theorem1_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = ProbRatioPoint::new(
                0.05 + 15.0 * rng.random::<f64>(),
                0.05 + 15.0 * rng.random::<f64>(),
            )
            .unwrap();
            let beta = 0.05 + 1.95 * rng.random::<f64>();
            let (g_w, g_l) = theorem1_grads(p, beta).unwrap();
            let fd_w = gradcheck::central_diff(
                |xw| ratio_loss(ProbRatioPoint { x_w: xw, ..p }, beta),
                p.x_w,
                1e-6 * p.x_w,
            );
            let fd_l = gradcheck::central_diff(
                |xl| ratio_loss(ProbRatioPoint { x_l: xl, ..p }, beta),
                p.x_l,
                1e-6 * p.x_l,
            );
            assert!(gradcheck::rel_err(g_w, fd_w) <= 1e-8);
            assert!(gradcheck::rel_err(g_l, fd_l) <= 1e-8);
        }
    }

    #[test]
    fn gradient_ratio_identity() {
        assert_eq!(
            gradient_ratio(ProbRatioPoint::new(3.0, 3.0).unwrap(), 0.7).unwrap(),
            1.0
        );
        for beta in [0.1, 0.5, 1.0, 1.7] {
            let r = gradient_ratio(ProbRatioPoint::new(4.0, 2.0).unwrap(), beta).unwrap();
            assert!((r - 0.5).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..1000 {
            let p = ProbRatioPoint::new(
                0.01 + 20.0 * rng.random::<f64>(),
                0.01 + 20.0 * rng.random::<f64>(),
            )
            .unwrap();
            let beta = 2.0 * rng.random::<f64>().max(1e-3);
            let ratio = gradient_ratio(p, beta).unwrap();
            let expected = p.x_l / p.x_w;
            assert!((ratio - expected).abs() <= 1e-12 * expected.max(1.0));
        }
    }

    #[test]
    fn label_flips_are_seeded_and_degrade_margin() {
        let world = build_world(WorldConfig {
            reward_scale: 5.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let uniform = Policy::uniform(16, 8);
        let easy =
            build_offline_dataset(&world, 60, &uniform, &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let sft = Policy::uniform(16, 8);
        let clean = DpoConfig {
            steps: 100,
            ..DpoConfig::default()
        };
        let noisy = DpoConfig {
            label_flip_prob: 0.5,
            ..clean.clone()
        };
        let (pc, _) = dpo_train(&sft, &sft, &easy, &clean).unwrap();
        let (pn, _) = dpo_train(&sft, &sft, &easy, &noisy).unwrap();
        let margin = |p: &Policy| -> f64 {
            easy.iter()
                .map(|pair| pair_margin(p, &sft, pair, 0.1).unwrap())
                .sum::<f64>()
                / easy.len() as f64
        };
        // Half-flipped labels carry almost no net signal.
        assert!(margin(&pc) > margin(&pn).abs());
    }
}
