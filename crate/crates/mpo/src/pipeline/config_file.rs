//! Plain-text key=value experiment configs with section prefixes.
//!
//! ```text
//! variant=mpo
//! seeds=1,2,3,4,5
//! threshold=1.0
//! world.vocab_size=16
//! dpo.beta=0.1
//! rl.kl_coef=0.4
//! ```
//!
//! Unset keys keep their defaults. Per-stage RNG seeds are derived from the
//! run seed and are not part of the file format.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::{Error, Result};

use super::ExperimentConfig;

pub fn parse_experiment_config(text: &str) -> Result<ExperimentConfig> {
    let mut config = ExperimentConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Format(format!("config line {}: missing '='", lineno + 1))
        })?;
        let key = key.trim();
        let value = value.trim();
        apply_key(&mut config, key, value)
            .map_err(|e| Error::Format(format!("config line {}: {e}", lineno + 1)))?;
    }
    config.validate()?;
    Ok(config)
}

fn apply_key(config: &mut ExperimentConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Format(format!("bad value {value:?} for {key}")))
    }
    match key {
        "variant" => config.variant = value.parse()?,
        "seeds" => {
            config.seeds = value
                .split(',')
                .map(|s| num::<u64>("seeds", s.trim()))
                .collect::<Result<_>>()?;
        }
        "output_dir" => config.output_dir = PathBuf::from(value),
        "threshold" => config.threshold = num(key, value)?,

        "world.vocab_size" => config.world.vocab_size = num(key, value)?,
        "world.prompt_len" => config.world.prompt_len = num(key, value)?,
        "world.completion_len" => config.world.completion_len = num(key, value)?,
        "world.feature_seed" => config.world.feature_seed = num(key, value)?,
        "world.reward_scale" => config.world.reward_scale = num(key, value)?,

        "data.n_train_prompts" => config.data.n_train_prompts = num(key, value)?,
        "data.n_heldout_prompts" => config.data.n_heldout_prompts = num(key, value)?,
        "data.eval_samples_per_prompt" => config.data.eval_samples_per_prompt = num(key, value)?,

        "sft.learning_rate" => config.sft.learning_rate = num(key, value)?,
        "sft.steps" => config.sft.steps = num(key, value)?,
        "sft.batch_size" => config.sft.batch_size = num(key, value)?,

        "rm.learning_rate" => config.rm.learning_rate = num(key, value)?,
        "rm.steps" => config.rm.steps = num(key, value)?,
        "rm.batch_size" => config.rm.batch_size = num(key, value)?,
        "rm.validation_fraction" => config.rm.validation_fraction = num(key, value)?,

        "dpo.beta" => config.dpo.beta = num(key, value)?,
        "dpo.learning_rate" => config.dpo.learning_rate = num(key, value)?,
        "dpo.steps" => config.dpo.steps = num(key, value)?,
        "dpo.batch_size" => config.dpo.batch_size = num(key, value)?,
        "dpo.label_flip_prob" => config.dpo.label_flip_prob = num(key, value)?,

        "rl.kl_coef" => config.rl.kl_coef = num(key, value)?,
        "rl.clip_eps" => config.rl.clip_eps = num(key, value)?,
        "rl.gae_lambda" => config.rl.gae_lambda = num(key, value)?,
        "rl.discount" => config.rl.discount = num(key, value)?,
        "rl.rollouts_per_iter" => config.rl.rollouts_per_iter = num(key, value)?,
        "rl.ppo_epochs" => config.rl.ppo_epochs = num(key, value)?,
        "rl.actor_lr" => config.rl.actor_lr = num(key, value)?,
        "rl.critic_lr" => config.rl.critic_lr = num(key, value)?,
        "rl.steps" => config.rl.steps = num(key, value)?,

        other => return Err(Error::Format(format!("unknown key {other:?}"))),
    }
    Ok(())
}

pub fn read_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    parse_experiment_config(&std::fs::read_to_string(path)?)
}

pub fn experiment_config_to_string(config: &ExperimentConfig) -> String {
    let seeds: Vec<String> = config.seeds.iter().map(|s| s.to_string()).collect();
    let mut out = String::new();
    let _ = writeln!(out, "variant={}", config.variant);
    let _ = writeln!(out, "seeds={}", seeds.join(","));
    let _ = writeln!(out, "output_dir={}", config.output_dir.display());
    let _ = writeln!(out, "threshold={}", config.threshold);
    let _ = writeln!(out, "world.vocab_size={}", config.world.vocab_size);
    let _ = writeln!(out, "world.prompt_len={}", config.world.prompt_len);
    let _ = writeln!(out, "world.completion_len={}", config.world.completion_len);
    let _ = writeln!(out, "world.feature_seed={}", config.world.feature_seed);
    let _ = writeln!(out, "world.reward_scale={}", config.world.reward_scale);
    let _ = writeln!(out, "data.n_train_prompts={}", config.data.n_train_prompts);
    let _ = writeln!(out, "data.n_heldout_prompts={}", config.data.n_heldout_prompts);
    let _ = writeln!(
        out,
        "data.eval_samples_per_prompt={}",
        config.data.eval_samples_per_prompt
    );
    let _ = writeln!(out, "sft.learning_rate={}", config.sft.learning_rate);
    let _ = writeln!(out, "sft.steps={}", config.sft.steps);
    let _ = writeln!(out, "sft.batch_size={}", config.sft.batch_size);
    let _ = writeln!(out, "rm.learning_rate={}", config.rm.learning_rate);
    let _ = writeln!(out, "rm.steps={}", config.rm.steps);
    let _ = writeln!(out, "rm.batch_size={}", config.rm.batch_size);
    let _ = writeln!(out, "rm.validation_fraction={}", config.rm.validation_fraction);
    let _ = writeln!(out, "dpo.beta={}", config.dpo.beta);
    let _ = writeln!(out, "dpo.learning_rate={}", config.dpo.learning_rate);
    let _ = writeln!(out, "dpo.steps={}", config.dpo.steps);
    let _ = writeln!(out, "dpo.batch_size={}", config.dpo.batch_size);
    let _ = writeln!(out, "dpo.label_flip_prob={}", config.dpo.label_flip_prob);
    let _ = writeln!(out, "rl.kl_coef={}", config.rl.kl_coef);
    let _ = writeln!(out, "rl.clip_eps={}", config.rl.clip_eps);
    let _ = writeln!(out, "rl.gae_lambda={}", config.rl.gae_lambda);
    let _ = writeln!(out, "rl.discount={}", config.rl.discount);
    let _ = writeln!(out, "rl.rollouts_per_iter={}", config.rl.rollouts_per_iter);
    let _ = writeln!(out, "rl.ppo_epochs={}", config.rl.ppo_epochs);
    let _ = writeln!(out, "rl.actor_lr={}", config.rl.actor_lr);
    let _ = writeln!(out, "rl.critic_lr={}", config.rl.critic_lr);
    let _ = writeln!(out, "rl.steps={}", config.rl.steps);
    out
}

pub fn write_experiment_config(path: &Path, config: &ExperimentConfig) -> Result<()> {
    std::fs::write(path, experiment_config_to_string(config))?;
    Ok(())
}
