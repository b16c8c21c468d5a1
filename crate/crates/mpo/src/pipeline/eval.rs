//! Evaluation: reward-based metrics and the oracle win/tie/lose judge.
//!
//! Policies are evaluated on held-out prompts under both the reward model
//! (the only metric available when the latent reward is unknown) and the
//! latent reward itself. The judge replaces an external grader: it samples one
//! completion per policy per prompt and compares latent rewards within a tie
//! band.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::policy::Policy;
use crate::reward::RewardModel;
use crate::world::{TokenSeq, World};
use crate::{Error, Result};

/// Median of a slice (mean of the two middle values on even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Reward statistics of one policy on held-out prompts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    /// Mean latent reward over all (prompt, sample) pairs.
    pub mean_true: f64,
    /// Median over prompts of the per-prompt mean latent reward.
    pub median_true: f64,
    pub mean_rm: f64,
    pub median_rm: f64,
    pub n_prompts: usize,
    pub samples_per_prompt: usize,
}

/// Evaluates a frozen policy: `n_samples_per_prompt` completions per held-out
/// prompt, scored by both the reward model and the latent reward.
pub fn evaluate(
    policy: &Policy,
    world: &World,
    rm: &RewardModel,
    heldout_prompts: &[TokenSeq],
    n_samples_per_prompt: usize,
    seed: u64,
) -> Result<PolicyEval> {
    if heldout_prompts.is_empty() {
        return Err(Error::Input("evaluate requires held-out prompts".into()));
    }
    if n_samples_per_prompt == 0 {
        return Err(Error::Input("n_samples_per_prompt must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_prompt_true = Vec::with_capacity(heldout_prompts.len());
    let mut per_prompt_rm = Vec::with_capacity(heldout_prompts.len());
    for x in heldout_prompts {
        let mut t = 0.0;
        let mut r = 0.0;
        for _ in 0..n_samples_per_prompt {
            let y = policy.sample(x, &mut rng)?;
            t += world.true_reward(x, &y)?;
            r += rm.score(x, &y)?;
        }
        per_prompt_true.push(t / n_samples_per_prompt as f64);
        per_prompt_rm.push(r / n_samples_per_prompt as f64);
    }
    let n = heldout_prompts.len() as f64;
    Ok(PolicyEval {
        mean_true: per_prompt_true.iter().sum::<f64>() / n,
        median_true: median(&per_prompt_true),
        mean_rm: per_prompt_rm.iter().sum::<f64>() / n,
        median_rm: median(&per_prompt_rm),
        n_prompts: heldout_prompts.len(),
        samples_per_prompt: n_samples_per_prompt,
    })
}

/// Win/tie/lose counts of policy A against policy B.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    pub win: usize,
    pub tie: usize,
    pub lose: usize,
    /// Tie band actually used.
    pub delta: f64,
}

impl JudgeReport {
    pub fn total(&self) -> usize {
        self.win + self.tie + self.lose
    }

    pub fn win_rate(&self) -> f64 {
        self.win as f64 / self.total() as f64
    }

    pub fn tie_rate(&self) -> f64 {
        self.tie as f64 / self.total() as f64
    }

    pub fn lose_rate(&self) -> f64 {
        self.lose as f64 / self.total() as f64
    }
}

/// Judges policy A against policy B on the latent reward: one completion from
/// each per prompt; A wins when its reward exceeds B's by more than the tie
/// band. With `tie_band: None` the band defaults to 0.1 times the standard
/// deviation of all sampled latent rewards.
pub fn judge(
    policy_a: &Policy,
    policy_b: &Policy,
    world: &World,
    heldout_prompts: &[TokenSeq],
    tie_band: Option<f64>,
    rng: &mut impl Rng,
) -> Result<JudgeReport> {
    if heldout_prompts.is_empty() {
        return Err(Error::Input("judge requires held-out prompts".into()));
    }
    if let Some(d) = tie_band {
        if !(d.is_finite() && d >= 0.0) {
            return Err(Error::Input(format!("tie band must be >= 0, got {d}")));
        }
    }
    let mut rewards_a = Vec::with_capacity(heldout_prompts.len());
    let mut rewards_b = Vec::with_capacity(heldout_prompts.len());
    for x in heldout_prompts {
        let ya = policy_a.sample(x, rng)?;
        let yb = policy_b.sample(x, rng)?;
        rewards_a.push(world.true_reward(x, &ya)?);
        rewards_b.push(world.true_reward(x, &yb)?);
    }
    let delta = match tie_band {
        Some(d) => d,
        None => {
            let pooled: Vec<f64> = rewards_a.iter().chain(&rewards_b).copied().collect();
            let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
            let var =
                pooled.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / pooled.len() as f64;
            0.1 * var.sqrt()
        }
    };
    let mut report = JudgeReport {
        win: 0,
        tie: 0,
        lose: 0,
        delta,
    };
    for (ra, rb) in rewards_a.iter().zip(&rewards_b) {
        let diff = ra - rb;
        if diff > delta {
            report.win += 1;
        } else if diff < -delta {
            report.lose += 1;
        } else {
            report.tie += 1;
        }
    }
    Ok(report)
}

/// Evaluation of one stage's policy within a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageEval {
    pub stage: String,
    pub eval: PolicyEval,
}

/// Full evaluation payload of one seeded variant run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    pub seed: u64,
    pub stages: Vec<StageEval>,
    pub final_stage: String,
}

impl EvalReport {
    pub fn final_eval(&self) -> &PolicyEval {
        self.stages
            .iter()
            .find(|s| s.stage == self.final_stage)
            .map(|s| &s.eval)
            .expect("final stage present in report")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{build_world, WorldConfig};

    fn setup() -> (World, RewardModel, Vec<TokenSeq>) {
        let world = build_world(WorldConfig::default()).unwrap();
        let rm = RewardModel::from_weights(16, world.true_weights().to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prompts = world.sample_distinct_prompts(60, &mut rng);
        (world, rm, prompts)
    }

    #[test]
    fn evaluate_is_deterministic_and_zero_scale_world_gives_zero() {
        let (world, rm, prompts) = setup();
        let policy = Policy::uniform(16, 8);
        let a = evaluate(&policy, &world, &rm, &prompts, 3, 42).unwrap();
        let b = evaluate(&policy, &world, &rm, &prompts, 3, 42).unwrap();
        assert_eq!(a, b);

        let flat = build_world(WorldConfig {
            reward_scale: 0.0,
            ..WorldConfig::default()
        })
        .unwrap();
        let e = evaluate(&policy, &flat, &rm, &prompts, 2, 7).unwrap();
        assert_eq!(e.mean_true, 0.0);
        assert_eq!(e.median_true, 0.0);
    }

    #[test]
    fn judge_self_play_is_mostly_ties_and_conserves() {
        let (world, _, prompts) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let policy = Policy::random(16, 8, 0.4, &mut rng);
        let rep = judge(
            &policy,
            &policy,
            &world,
            &prompts,
            None,
            &mut ChaCha8Rng::seed_from_u64(3),
        )
        .unwrap();
        assert_eq!(rep.total(), prompts.len());
        assert!(rep.delta > 0.0);

        // Giant band: everything ties.
        let all_tie = judge(
            &policy,
            &policy,
            &world,
            &prompts,
            Some(1e18),
            &mut ChaCha8Rng::seed_from_u64(4),
        )
        .unwrap();
        assert_eq!(all_tie.tie, prompts.len());
        assert!(judge(&policy, &policy, &world, &prompts, Some(-0.5), &mut rng).is_err());
    }

    #[test]
    fn judge_tie_count_monotone_in_band() {
        let (world, _, prompts) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Policy::random(16, 8, 0.4, &mut rng);
        let b = Policy::random(16, 8, 0.4, &mut rng);
        let mut last_ties = 0;
        for delta in [0.0, 0.5, 1.0, 2.0, 4.0] {
            // Same seed: identical samples, only the band changes.
            let rep =
                judge(&a, &b, &world, &prompts, Some(delta), &mut ChaCha8Rng::seed_from_u64(6))
                    .unwrap();
            assert!(rep.tie >= last_ties, "ties must not decrease");
            last_ties = rep.tie;
        }
    }

    #[test]
    fn median_mid_cases() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
