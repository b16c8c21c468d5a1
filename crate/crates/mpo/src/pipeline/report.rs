//! Report emission: evaluation JSON, CSV tables and plot series.
//!
//! Every emitter is deterministic in its inputs, so re-emission is
//! byte-identical.

use std::fmt::Write as _;
use std::path::Path;

use crate::dpo::DpoTraceRow;
use crate::reward::{GapBin, RmTrainReport};
use crate::rl::PpoIterStats;
use crate::world::Histogram;
use crate::{Error, Result};

use super::eval::{median, EvalReport, JudgeReport};
use super::EasyHardStudy;

pub fn write_eval_report(path: &Path, report: &EvalReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("eval report serialization: {e}")))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn read_eval_report(path: &Path) -> Result<EvalReport> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("eval report parse: {e}")))
}

/// One row per (variant, seed, stage) with both reward metrics.
pub fn summary_csv(reports: &[EvalReport]) -> String {
    let mut rows: Vec<&EvalReport> = reports.iter().collect();
    rows.sort_by(|a, b| (&a.variant, a.seed).cmp(&(&b.variant, b.seed)));
    let mut out = String::from("variant,seed,stage,mean_rm,median_rm,mean_true,median_true\n");
    for r in rows {
        for s in &r.stages {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.variant,
                r.seed,
                s.stage,
                s.eval.mean_rm,
                s.eval.median_rm,
                s.eval.mean_true,
                s.eval.median_true
            );
        }
    }
    out
}

pub fn write_summary_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    std::fs::write(path, summary_csv(reports))?;
    Ok(())
}

/// Medians over seeds of each variant's final-stage rewards.
pub fn medians_csv(reports: &[EvalReport]) -> String {
    let mut variants: Vec<&str> = reports.iter().map(|r| r.variant.as_str()).collect();
    variants.sort_unstable();
    variants.dedup();
    let mut out = String::from("variant,n_seeds,median_mean_rm,median_mean_true\n");
    for v in variants {
        let rms: Vec<f64> = reports
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| r.final_eval().mean_rm)
            .collect();
        let trues: Vec<f64> = reports
            .iter()
            .filter(|r| r.variant == v)
            .map(|r| r.final_eval().mean_true)
            .collect();
        let _ = writeln!(out, "{v},{},{},{}", rms.len(), median(&rms), median(&trues));
    }
    out
}

pub fn write_medians_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    std::fs::write(path, medians_csv(reports))?;
    Ok(())
}

/// Win/tie/lose rows of one pairwise comparison, one row per seed.
pub fn winrates_csv(comparison: &str, rows: &[(u64, JudgeReport)]) -> String {
    let mut sorted: Vec<&(u64, JudgeReport)> = rows.iter().collect();
    sorted.sort_by_key(|(seed, _)| *seed);
    let mut out =
        String::from("comparison,seed,win,tie,lose,win_rate,tie_rate,lose_rate,delta\n");
    for (seed, r) in sorted {
        let _ = writeln!(
            out,
            "{comparison},{seed},{},{},{},{},{},{},{}",
            r.win,
            r.tie,
            r.lose,
            r.win_rate(),
            r.tie_rate(),
            r.lose_rate(),
            r.delta
        );
    }
    out
}

pub fn write_winrates_csv(path: &Path, comparison: &str, rows: &[(u64, JudgeReport)]) -> Result<()> {
    std::fs::write(path, winrates_csv(comparison, rows))?;
    Ok(())
}

/// Easy-versus-hard study rows, one per seed.
pub fn easy_hard_csv(studies: &[EasyHardStudy]) -> String {
    let mut sorted: Vec<&EasyHardStudy> = studies.iter().collect();
    sorted.sort_by_key(|s| s.seed);
    let mut out = String::from(
        "seed,easy_pairs,hard_pairs,easy_mean_true,hard_mean_true,easy_mean_rm,hard_mean_rm\n",
    );
    for s in sorted {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            s.seed,
            s.easy_pairs,
            s.hard_pairs,
            s.easy_eval.mean_true,
            s.hard_eval.mean_true,
            s.easy_eval.mean_rm,
            s.hard_eval.mean_rm
        );
    }
    out
}

pub fn write_easy_hard_csv(path: &Path, studies: &[EasyHardStudy]) -> Result<()> {
    std::fs::write(path, easy_hard_csv(studies))?;
    Ok(())
}

pub fn write_loss_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(out, "{i},{l}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_rm_trace_csv(path: &Path, report: &RmTrainReport) -> Result<()> {
    let mut out = String::from("step,train_loss,val_loss\n");
    for (i, (t, v)) in report.train_trace.iter().zip(&report.val_trace).enumerate() {
        let _ = writeln!(out, "{i},{t},{v}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_dpo_trace_csv(path: &Path, trace: &[DpoTraceRow]) -> Result<()> {
    let mut out = String::from("step,loss,mean_margin\n");
    for row in trace {
        let _ = writeln!(out, "{},{},{}", row.step, row.loss, row.mean_margin);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_ppo_trace_csv(path: &Path, trace: &[PpoIterStats]) -> Result<()> {
    let mut out = String::from("iter,mean_reward_rm,mean_reward_true,mean_kl,clip_fraction,mean_ratio,critic_loss\n");
    for row in trace {
        let true_part = match row.mean_reward_true {
            Some(t) => format!("{t}"),
            None => String::new(),
        };
        let _ = writeln!(
            out,
            "{},{},{true_part},{},{},{},{}",
            row.iter, row.mean_reward_rm, row.mean_kl, row.clip_fraction, row.mean_ratio, row.critic_loss
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_histogram_csv(path: &Path, hist: &Histogram) -> Result<()> {
    let mut out = String::from("bin_lo,bin_hi,count\n");
    for (i, c) in hist.counts.iter().enumerate() {
        let lo = i as f64 * hist.bin_width;
        let hi = (i + 1) as f64 * hist.bin_width;
        let _ = writeln!(out, "{lo},{hi},{c}");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_accuracy_by_gap_csv(path: &Path, bins: &[GapBin]) -> Result<()> {
    let mut out = String::from("bin_lo,bin_hi,count,correct,accuracy\n");
    for b in bins {
        let acc = match b.accuracy() {
            Some(a) => format!("{a}"),
            None => String::new(),
        };
        let _ = writeln!(out, "{},{},{},{},{acc}", b.lo, b.hi, b.count, b.correct);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Human-readable tables over the ablation artifacts.
pub fn write_text_tables(
    path: &Path,
    reports: &[EvalReport],
    studies: &[EasyHardStudy],
    judges: &[(u64, JudgeReport)],
) -> Result<()> {
    let mut out = String::new();
    out.push_str("== Final reward by variant (medians over seeds) ==\n");
    out.push_str(&medians_csv(reports).replace(',', "\t"));
    out.push('\n');
    if !studies.is_empty() {
        out.push_str("== DPO on easy vs hard pairs (held-out true reward) ==\n");
        out.push_str(&easy_hard_csv(studies).replace(',', "\t"));
        out.push('\n');
    }
    if !judges.is_empty() {
        out.push_str("== Oracle judge: mpo vs ppo ==\n");
        out.push_str(&winrates_csv("mpo_vs_ppo", judges).replace(',', "\t"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
