//! Tuning procedures: candidate-length selection, SD-matched threshold
//! selection, and the dev-set-size error study for threshold tuning.

use fsd_core::decoding::{compute_metrics, decode, AcceptancePolicy};
use fsd_core::rng::RngStream;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ModelPair, PolicyConfig};
use crate::corpus::PromptRecord;
use crate::sweep::proxy_speed;
use crate::{LabError, Result};

/// Pooled counters for one policy over one prompt set.
#[derive(Debug, Clone, Copy, Default)]
pub struct PooledMetrics {
    pub tokens: usize,
    pub accepted: usize,
    pub proposed: usize,
    pub target_calls: usize,
    pub draft_calls: usize,
}

impl PooledMetrics {
    pub fn target_calls_per_token(&self) -> f64 {
        if self.tokens == 0 {
            0.0
        } else {
            self.target_calls as f64 / self.tokens as f64
        }
    }

    pub fn acceptance_pct(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            100.0 * self.accepted as f64 / self.proposed as f64
        }
    }

    pub fn proxy_speed(&self, cost_ratio: f64) -> f64 {
        proxy_speed(self.tokens, self.target_calls, self.draft_calls, cost_ratio)
    }
}

/// Decodes every prompt under `policy` with candidate length `l`,
/// pooling counters. Each prompt gets an rng stream derived from its
/// content, so pooled results do not depend on prompt order.
pub fn measure(
    cfg: &ExperimentConfig,
    models: &ModelPair,
    prompts: &[&PromptRecord],
    policy: &AcceptancePolicy,
    l: usize,
    seed: u64,
) -> Result<PooledMetrics> {
    let drafting = cfg.drafting.to_core(l);
    let root = RngStream::new(seed);
    let mut pooled = PooledMetrics::default();
    for prompt in prompts {
        let mut rng = root.derive(prompt.stream_id());
        let (_, trace) = decode(
            models.target.as_ref(),
            models.draft.as_ref(),
            &prompt.token_ids(),
            policy,
            &drafting,
            cfg.max_new_tokens,
            &mut rng,
        )?;
        let m = compute_metrics(&trace);
        pooled.tokens += m.tokens;
        pooled.accepted += trace.blocks.iter().map(|b| b.accepted()).sum::<usize>();
        pooled.proposed += trace.blocks.iter().map(|b| b.proposed).sum::<usize>();
        pooled.target_calls += m.target_calls;
        pooled.draft_calls += m.draft_calls;
    }
    Ok(pooled)
}

#[derive(Debug, Serialize)]
pub struct LengthChoice {
    pub candidate_length: usize,
    pub target_calls_per_token: f64,
    pub proxy_speed: f64,
}

/// Picks the grid L minimizing target calls per emitted token on the dev
/// prompts; ties go to the smaller L.
pub fn select_candidate_length(
    cfg: &ExperimentConfig,
    models: &ModelPair,
    dev: &[&PromptRecord],
    policy: &AcceptancePolicy,
    seed: u64,
) -> Result<(usize, Vec<LengthChoice>)> {
    if dev.is_empty() {
        return Err(LabError::InsufficientCorpus {
            needed: 1,
            have: 0,
            split: "train".into(),
        });
    }
    let mut grid = cfg.sweep.l_grid.clone();
    grid.sort_unstable();
    grid.dedup();
    let mut table = Vec::new();
    for l in grid {
        let pooled = measure(cfg, models, dev, policy, l, seed)?;
        table.push(LengthChoice {
            candidate_length: l,
            target_calls_per_token: pooled.target_calls_per_token(),
            proxy_speed: pooled.proxy_speed(cfg.cost_ratio),
        });
    }
    let mut best = &table[0];
    for choice in &table[1..] {
        if choice.target_calls_per_token < best.target_calls_per_token {
            best = choice;
        }
    }
    Ok((best.candidate_length, table))
}

#[derive(Debug, Serialize)]
pub struct ThresholdMatch {
    pub sd_acceptance_pct: f64,
    pub matched_threshold: f64,
    pub matched_acceptance_pct: f64,
    pub grid: Vec<(f64, f64)>,
}

/// Runs SD once on the dev prompts, then returns the grid threshold whose
/// fuzzy acceptance percentage is closest to SD's; ties go to the smaller
/// threshold.
pub fn match_sd_threshold(
    cfg: &ExperimentConfig,
    models: &ModelPair,
    dev: &[&PromptRecord],
    policy: &PolicyConfig,
    l: usize,
    seed: u64,
) -> Result<ThresholdMatch> {
    if dev.is_empty() {
        return Err(LabError::InsufficientCorpus {
            needed: 1,
            have: 0,
            split: "train".into(),
        });
    }
    let sd_pct = measure(cfg, models, dev, &AcceptancePolicy::Sd, l, seed)?.acceptance_pct();
    let mut grid = cfg.sweep.t_grid.clone();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite thresholds"));
    grid.dedup();

    let mut rows = Vec::new();
    for &t in &grid {
        let pct = measure(cfg, models, dev, &policy.instantiate(t), l, seed)?.acceptance_pct();
        rows.push((t, pct));
    }
    let mut best = rows[0];
    for &(t, pct) in &rows[1..] {
        if (pct - sd_pct).abs() < (best.1 - sd_pct).abs() {
            best = (t, pct);
        }
    }
    Ok(ThresholdMatch {
        sd_acceptance_pct: sd_pct,
        matched_threshold: best.0,
        matched_acceptance_pct: best.1,
        grid: rows,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct DevErrorRow {
    pub threshold: f64,
    pub dev_size: usize,
    pub trials: usize,
    /// Mean over trials of |dev − test| / test proxy speed, in percent.
    pub mean_abs_pct_error: f64,
}

fn sample_without_replacement<'a>(
    items: &[&'a PromptRecord],
    n: usize,
    rng: &mut RngStream,
) -> Vec<&'a PromptRecord> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    for i in 0..n {
        let j = i + (rng.next_u64() as usize) % (idx.len() - i);
        idx.swap(i, j);
    }
    idx[..n].iter().map(|&i| items[i]).collect()
}

/// For each threshold and dev-set size, samples `trials` seeded dev sets
/// from the train split and reports how far the dev proxy speed lands
/// from the proxy speed measured on the full test split.
pub fn tune_threshold_on_dev(
    cfg: &ExperimentConfig,
    models: &ModelPair,
    train: &[&PromptRecord],
    test: &[&PromptRecord],
    policy: &PolicyConfig,
    dev_sizes: &[usize],
    trials: usize,
    seed: u64,
) -> Result<Vec<DevErrorRow>> {
    let max_size = dev_sizes.iter().copied().max().unwrap_or(0);
    if train.len() < max_size {
        return Err(LabError::InsufficientCorpus {
            needed: max_size,
            have: train.len(),
            split: "train".into(),
        });
    }
    if test.is_empty() {
        return Err(LabError::InsufficientCorpus {
            needed: 1,
            have: 0,
            split: "test".into(),
        });
    }
    let l = cfg.drafting.candidate_length;
    let root = RngStream::new(seed);

    let jobs: Vec<(f64, usize)> = cfg
        .sweep
        .t_grid
        .iter()
        .flat_map(|&t| dev_sizes.iter().map(move |&n| (t, n)))
        .collect();
    jobs.par_iter()
        .map(|&(threshold, dev_size)| {
            let acceptance = policy.instantiate(threshold);
            let test_speed =
                measure(cfg, models, test, &acceptance, l, seed)?.proxy_speed(cfg.cost_ratio);
            let mut total = 0.0;
            for trial in 0..trials {
                let mut sample_rng = root
                    .derive(dev_size as u64)
                    .derive(trial as u64)
                    .derive((threshold * 1e6) as u64);
                let dev = sample_without_replacement(train, dev_size, &mut sample_rng);
                let dev_speed =
                    measure(cfg, models, &dev, &acceptance, l, seed)?.proxy_speed(cfg.cost_ratio);
                total += 100.0 * ((dev_speed - test_speed) / test_speed).abs();
            }
            Ok(DevErrorRow {
                threshold,
                dev_size,
                trials,
                mean_abs_pct_error: total / trials.max(1) as f64,
            })
        })
        .collect()
}
