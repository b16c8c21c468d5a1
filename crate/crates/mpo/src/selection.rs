//! Reward-based data resampling and selection.
//!
//! Completion pairs are resampled from the SFT policy, scored by the reward
//! model, and split by the absolute score gap against a threshold: pairs with
//! gap strictly above the threshold enter the easy set (relabeled so the
//! higher-scored completion is chosen), everything else contributes its prompt
//! to the hard set.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::policy::Policy;
use crate::reward::RewardModel;
use crate::world::{write_dataset, write_prompts, PreferencePair, TokenSeq};
use crate::{Error, Result};

/// A prompt with two completions drawn from the SFT policy, not yet labeled.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampledPair {
    pub prompt: TokenSeq,
    pub out1: TokenSeq,
    pub out2: TokenSeq,
}

/// The easy/hard split produced by the selection rule.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedData {
    /// Pairs with score gap strictly above the threshold, reward-model scores
    /// retained and the higher-scored completion as `chosen`.
    pub easy: Vec<PreferencePair>,
    /// Prompts of the remaining pairs.
    pub hard: Vec<TokenSeq>,
    pub threshold: f64,
}

/// Draws two independent completions from the SFT policy for every prompt.
pub fn resample_pairs(
    sft: &Policy,
    prompts: &[TokenSeq],
    rng: &mut impl Rng,
) -> Result<Vec<ResampledPair>> {
    if prompts.is_empty() {
        return Err(Error::Input("resample_pairs requires prompts".into()));
    }
    prompts
        .iter()
        .map(|x| {
            Ok(ResampledPair {
                prompt: x.clone(),
                out1: sft.sample(x, rng)?,
                out2: sft.sample(x, rng)?,
            })
        })
        .collect()
}

/// Splits scored pairs by `|score1 - score2| > threshold` (strict: a gap
/// exactly equal to the threshold goes to the hard set).
pub fn select(
    pairs: &[ResampledPair],
    rm: &RewardModel,
    threshold: f64,
) -> Result<PartitionedData> {
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(Error::Input(format!(
            "threshold must be finite and >= 0, got {threshold}"
        )));
    }
    let mut easy = Vec::new();
    let mut hard = Vec::new();
    for p in pairs {
        let s1 = rm.score(&p.prompt, &p.out1)?;
        let s2 = rm.score(&p.prompt, &p.out2)?;
        if !(s1.is_finite() && s2.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite reward scores ({s1}, {s2})"
            )));
        }
        if (s1 - s2).abs() > threshold {
            let (chosen, rejected, cs, rs) = if s1 > s2 {
                (&p.out1, &p.out2, s1, s2)
            } else {
                (&p.out2, &p.out1, s2, s1)
            };
            easy.push(PreferencePair {
                prompt: p.prompt.clone(),
                chosen: chosen.clone(),
                rejected: rejected.clone(),
                chosen_score: Some(cs),
                rejected_score: Some(rs),
            });
        } else {
            hard.push(p.prompt.clone());
        }
    }
    Ok(PartitionedData {
        easy,
        hard,
        threshold,
    })
}

/// Quantiles of the easy-set score gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapQuantiles {
    pub min: f64,
    pub p25: f64,
    pub p50: f64,
    pub p75: f64,
    pub max: f64,
}

/// Serializable summary of a partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionReport {
    pub threshold: f64,
    pub easy_count: usize,
    pub hard_count: usize,
    /// Absent when the easy set is empty.
    pub gap_quantiles: Option<GapQuantiles>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = q * (sorted.len() - 1) as f64;
    let lo = idx.floor() as usize;
    let hi = idx.ceil() as usize;
    let frac = idx - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

pub fn partition_report(partition: &PartitionedData) -> PartitionReport {
    let mut gaps: Vec<f64> = partition
        .easy
        .iter()
        .filter_map(|p| p.gap())
        .collect();
    gaps.sort_by(|a, b| a.partial_cmp(b).expect("finite gaps"));
    let gap_quantiles = if gaps.is_empty() {
        None
    } else {
        Some(GapQuantiles {
            min: gaps[0],
            p25: quantile(&gaps, 0.25),
            p50: quantile(&gaps, 0.5),
            p75: quantile(&gaps, 0.75),
            max: gaps[gaps.len() - 1],
        })
    };
    PartitionReport {
        threshold: partition.threshold,
        easy_count: partition.easy.len(),
        hard_count: partition.hard.len(),
        gap_quantiles,
    }
}

/// Writes `easy.jsonl`, `hard.jsonl` and `partition_report.json` under `dir`.
pub fn export_partition(dir: &Path, partition: &PartitionedData) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_dataset(&dir.join("easy.jsonl"), &partition.easy)?;
    write_prompts(&dir.join("hard.jsonl"), &partition.hard)?;
    let report = partition_report(partition);
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Format(format!("report serialization: {e}")))?;
    std::fs::write(dir.join("partition_report.json"), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::NUM_BUCKETS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Reward model over vocab 2 with hand-set weights for bucket 0 bigrams:
    /// completions [0,0] score w00 and [1,1] score w11 under prompt [0,0].
    fn two_token_rm(w00: f64, w11: f64) -> RewardModel {
        let mut weights = vec![0.0; NUM_BUCKETS * 4];
        weights[0] = w00; // bucket 0, bigram (0,0)
        weights[3] = w11; // bucket 0, bigram (1,1)
        RewardModel::from_weights(2, weights).unwrap()
    }

    fn pair(out1: Vec<u32>, out2: Vec<u32>) -> ResampledPair {
        ResampledPair {
            prompt: TokenSeq(vec![0, 0]),
            out1: TokenSeq(out1),
            out2: TokenSeq(out2),
        }
    }

    #[test]
    fn strict_threshold_boundary() {
        // Scores (5.1, 2.0): gap 3.1 > 2 -> easy with out1 chosen.
        let rm = two_token_rm(5.1, 2.0);
        let pairs = vec![pair(vec![0, 0], vec![1, 1])];
        let part = select(&pairs, &rm, 2.0).unwrap();
        assert_eq!(part.easy.len(), 1);
        assert_eq!(part.easy[0].chosen, TokenSeq(vec![0, 0]));
        assert_eq!(part.easy[0].chosen_score, Some(5.1));
        assert!(part.hard.is_empty());

        // Scores (3.0, 1.0): gap exactly 2 -> hard (strict inequality).
        let rm = two_token_rm(3.0, 1.0);
        let part = select(&pairs, &rm, 2.0).unwrap();
        assert!(part.easy.is_empty());
        assert_eq!(part.hard, vec![TokenSeq(vec![0, 0])]);
    }

    #[test]
    fn threshold_extremes() {
        let rm = two_token_rm(1.0, 0.0);
        let pairs = vec![pair(vec![0, 0], vec![1, 1]); 5];
        let zero = select(&pairs, &rm, 0.0).unwrap();
        assert!(zero.hard.is_empty());
        let huge = select(&pairs, &rm, 1e18).unwrap();
        assert!(huge.easy.is_empty());
        assert!(select(&pairs, &rm, -1.0).is_err());
        assert!(select(&pairs, &rm, f64::NAN).is_err());
    }

    #[test]
    fn identical_completions_land_in_hard() {
        let rm = two_token_rm(1.0, 0.0);
        let pairs = vec![pair(vec![0, 0], vec![0, 0])];
        let part = select(&pairs, &rm, 0.0).unwrap();
        assert_eq!(part.hard.len(), 1);
    }

    #[test]
    fn partition_is_disjoint_exhaustive_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sft = Policy::random(4, 4, 0.5, &mut rng);
        let rm = RewardModel::random(4, 0.5, &mut rng);
        let prompts: Vec<TokenSeq> = (0..300)
            .map(|_| TokenSeq((0..3).map(|_| rng.random_range(0..4)).collect()))
            .collect();
        let pairs = resample_pairs(&sft, &prompts, &mut rng).unwrap();
        assert_eq!(pairs.len(), 300);

        let mut last_easy = usize::MAX;
        for threshold in [0.0, 0.5, 1.0, 2.0] {
            let part = select(&pairs, &rm, threshold).unwrap();
            assert_eq!(part.easy.len() + part.hard.len(), prompts.len());
            for p in &part.easy {
                let gap = p.gap().unwrap();
                assert!(gap > threshold);
                assert!(p.chosen_score.unwrap() > p.rejected_score.unwrap());
            }
            assert!(part.easy.len() <= last_easy, "easy set must shrink with threshold");
            last_easy = part.easy.len();
        }

        // Determinism.
        let a = select(&pairs, &rm, 1.0).unwrap();
        let b = select(&pairs, &rm, 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn resample_is_deterministic_and_near_deterministic_sft_forces_hard() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let prompts: Vec<TokenSeq> = (0..20)
            .map(|_| TokenSeq((0..3).map(|_| rng.random_range(0..4)).collect()))
            .collect();
        let sft = Policy::random(4, 4, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
        let a = resample_pairs(&sft, &prompts, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = resample_pairs(&sft, &prompts, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);

        // A near-deterministic policy emits identical pairs, which must all
        // land in the hard set under any positive threshold.
        let mut det = Policy::uniform(4, 4);
        for ctx in 0..det.n_contexts() {
            det.logits_mut()[ctx * 4 + 1] = 1e6;
        }
        let pairs = resample_pairs(&det, &prompts, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert!(pairs.iter().all(|p| p.out1 == p.out2));
        let rm = RewardModel::random(4, 0.5, &mut ChaCha8Rng::seed_from_u64(6));
        let part = select(&pairs, &rm, 0.5).unwrap();
        assert_eq!(part.hard.len(), pairs.len());
    }

    #[test]
    fn report_counts_quantiles_and_roundtrip() {
        let empty = PartitionedData {
            easy: vec![],
            hard: vec![TokenSeq(vec![0, 0])],
            threshold: 1.0,
        };
        let rep = partition_report(&empty);
        assert_eq!(rep.easy_count, 0);
        assert!(rep.gap_quantiles.is_none());

        let rm = two_token_rm(4.0, 1.0);
        let pairs = vec![pair(vec![0, 0], vec![1, 1]); 8];
        let part = select(&pairs, &rm, 1.0).unwrap();
        let rep = partition_report(&part);
        assert_eq!(rep.easy_count, 8);
        assert_eq!(rep.gap_quantiles.as_ref().unwrap().p50, 3.0);

        // Bit-exact serialization round-trip.
        let json = serde_json::to_string(&rep).unwrap();
        let back: PartitionReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    #[test]
    fn export_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let rm = two_token_rm(4.0, 1.0);
        let pairs = vec![
            pair(vec![0, 0], vec![1, 1]),
            pair(vec![0, 1], vec![0, 1]),
        ];
        let part = select(&pairs, &rm, 1.0).unwrap();
        export_partition(dir.path(), &part).unwrap();
        assert!(dir.path().join("easy.jsonl").exists());
        assert!(dir.path().join("hard.jsonl").exists());
        assert!(dir.path().join("partition_report.json").exists());
        let easy = crate::world::read_dataset(&dir.path().join("easy.jsonl")).unwrap();
        assert_eq!(easy, part.easy);
        let hard = crate::world::read_prompts(&dir.path().join("hard.jsonl")).unwrap();
        assert_eq!(hard, part.hard);
    }
}
