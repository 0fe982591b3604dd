//! Sweep execution and report emission.
//!
//! A sweep point is one (policy, threshold, candidate length, seed)
//! combination; each point decodes every prompt in the set and its row
//! aggregates the traces. Rows run in parallel but are emitted in grid
//! order, so reports are byte-deterministic for a given config.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use fsd_core::decoding::{decode, DecodeTrace, TokenSource};
use fsd_core::rng::RngStream;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ModelPair, PolicyConfig};
use crate::corpus::PromptRecord;
use crate::{LabError, Result};

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub policy: String,
    /// Divergence name for threshold policies, "-" otherwise.
    pub kind: String,
    pub threshold: f64,
    pub candidate_length: usize,
    pub seed: u64,
    pub tokens: usize,
    pub alen: f64,
    pub accept_pct: f64,
    pub pct_md: f64,
    pub target_calls: usize,
    pub draft_calls: usize,
    pub proxy_speed: f64,
}

#[derive(Debug, Default)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// One entry per failed sweep point; the sweep itself continues.
    pub errors: Vec<String>,
}

struct SweepPoint<'a> {
    policy: &'a PolicyConfig,
    threshold: f64,
    candidate_length: usize,
    seed: u64,
}

/// Counters pooled across the prompts of one sweep point.
#[derive(Default)]
struct Totals {
    tokens: usize,
    blocks: usize,
    accepted: usize,
    proposed: usize,
    from_draft: usize,
    target_calls: usize,
    draft_calls: usize,
}

impl Totals {
    fn add(&mut self, trace: &DecodeTrace) {
        self.tokens += trace.sources.len();
        self.blocks += trace.blocks.len();
        self.accepted += trace.blocks.iter().map(|b| b.accepted()).sum::<usize>();
        self.proposed += trace.blocks.iter().map(|b| b.proposed).sum::<usize>();
        self.from_draft += trace
            .sources
            .iter()
            .filter(|&&s| s == TokenSource::Draft)
            .count();
        self.target_calls += trace.target_calls;
        self.draft_calls += trace.draft_calls;
    }
}

pub fn proxy_speed(tokens: usize, target_calls: usize, draft_calls: usize, cost_ratio: f64) -> f64 {
    let cost = target_calls as f64 + cost_ratio * draft_calls as f64;
    if cost == 0.0 {
        0.0
    } else {
        tokens as f64 / cost
    }
}

fn run_point(
    cfg: &ExperimentConfig,
    models: &ModelPair,
    prompts: &[&PromptRecord],
    point: &SweepPoint<'_>,
) -> Result<SweepRow> {
    let policy = point.policy.instantiate(point.threshold);
    let drafting = cfg.drafting.to_core(point.candidate_length);
    let root = RngStream::new(point.seed);
    let mut totals = Totals::default();
    for prompt in prompts {
        let mut rng = root.derive(prompt.stream_id());
        let (_, trace) = decode(
            models.target.as_ref(),
            models.draft.as_ref(),
            &prompt.token_ids(),
            &policy,
            &drafting,
            cfg.max_new_tokens,
            &mut rng,
        )?;
        totals.add(&trace);
    }
    Ok(SweepRow {
        policy: point.policy.kind.name().to_string(),
        kind: point
            .policy
            .divergence
            .map(|d| fsd_core::divergence::DivergenceKind::from(d).name().to_string())
            .unwrap_or_else(|| "-".to_string()),
        threshold: point.threshold,
        candidate_length: point.candidate_length,
        seed: point.seed,
        tokens: totals.tokens,
        alen: ratio(totals.accepted, totals.blocks),
        accept_pct: 100.0 * ratio(totals.accepted, totals.proposed),
        pct_md: ratio(totals.from_draft, totals.tokens),
        target_calls: totals.target_calls,
        draft_calls: totals.draft_calls,
        proxy_speed: proxy_speed(
            totals.tokens,
            totals.target_calls,
            totals.draft_calls,
            cfg.cost_ratio,
        ),
    })
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Runs the full (policy × T × L × seed) grid over `prompts`. Threshold
/// grids apply only to threshold policies; every other policy contributes
/// one row per (L, seed) at T = 0.
pub fn run_sweep(
    cfg: &ExperimentConfig,
    models: &ModelPair,
    prompts: &[&PromptRecord],
) -> SweepResult {
    let mut points = Vec::new();
    for policy in &cfg.sweep.policies {
        let thresholds: &[f64] = if policy.kind.uses_threshold() {
            &cfg.sweep.t_grid
        } else {
            &[0.0]
        };
        for &threshold in thresholds {
            for &candidate_length in &cfg.sweep.l_grid {
                for &seed in &cfg.seeds {
                    points.push(SweepPoint {
                        policy,
                        threshold,
                        candidate_length,
                        seed,
                    });
                }
            }
        }
    }
    let outcomes: Vec<_> = points
        .par_iter()
        .map(|point| run_point(cfg, models, prompts, point))
        .collect();

    let mut result = SweepResult::default();
    for (point, outcome) in points.iter().zip(outcomes) {
        match outcome {
            Ok(row) => result.rows.push(row),
            Err(e) => result.errors.push(format!(
                "policy={} T={} L={} seed={}: {e}",
                point.policy.kind.name(),
                point.threshold,
                point.candidate_length,
                point.seed
            )),
        }
    }
    result
}

#[derive(Debug, Serialize)]
struct PointSummary {
    rows: usize,
    mean_proxy_speed: f64,
    mean_accept_pct: f64,
    mean_alen: f64,
    mean_pct_md: f64,
}

#[derive(Debug, Serialize)]
struct Summary {
    rows: usize,
    errors: usize,
    /// Keyed by "policy/kind/T=../L=..", aggregated over seeds.
    points: BTreeMap<String, PointSummary>,
}

fn fmt_float(x: f64) -> String {
    // Shortest round-trip representation; deterministic across runs.
    format!("{x}")
}

/// Writes `metrics.csv`, `summary.json`, and (when the sweep had failed
/// points) `errors.log` into `outdir`.
pub fn emit_reports(result: &SweepResult, outdir: &Path) -> Result<()> {
    if result.rows.is_empty() {
        return Err(LabError::Config("sweep produced no rows".into()));
    }
    std::fs::create_dir_all(outdir)?;

    let mut csv = csv::Writer::from_path(outdir.join("metrics.csv"))?;
    csv.write_record([
        "policy",
        "kind",
        "T",
        "L",
        "seed",
        "tokens",
        "ALen",
        "accept_pct",
        "pct_md",
        "target_calls",
        "draft_calls",
        "proxy_speed",
    ])
    ?;
    for row in &result.rows {
        csv.write_record([
            row.policy.clone(),
            row.kind.clone(),
            fmt_float(row.threshold),
            row.candidate_length.to_string(),
            row.seed.to_string(),
            row.tokens.to_string(),
            fmt_float(row.alen),
            fmt_float(row.accept_pct),
            fmt_float(row.pct_md),
            row.target_calls.to_string(),
            row.draft_calls.to_string(),
            fmt_float(row.proxy_speed),
        ])
        ?;
    }
    csv.flush()?;

    let mut grouped: BTreeMap<String, Vec<&SweepRow>> = BTreeMap::new();
    for row in &result.rows {
        let key = format!(
            "{}/{}/T={}/L={}",
            row.policy,
            row.kind,
            fmt_float(row.threshold),
            row.candidate_length
        );
        grouped.entry(key).or_default().push(row);
    }
    let points = grouped
        .into_iter()
        .map(|(key, rows)| {
            let n = rows.len() as f64;
            (
                key,
                PointSummary {
                    rows: rows.len(),
                    mean_proxy_speed: rows.iter().map(|r| r.proxy_speed).sum::<f64>() / n,
                    mean_accept_pct: rows.iter().map(|r| r.accept_pct).sum::<f64>() / n,
                    mean_alen: rows.iter().map(|r| r.alen).sum::<f64>() / n,
                    mean_pct_md: rows.iter().map(|r| r.pct_md).sum::<f64>() / n,
                },
            )
        })
        .collect();
    let summary = Summary {
        rows: result.rows.len(),
        errors: result.errors.len(),
        points,
    };
    let mut summary_text = serde_json::to_string_pretty(&summary)?;
    summary_text.push('\n');
    std::fs::write(outdir.join("summary.json"), summary_text)?;

    if !result.errors.is_empty() {
        let mut log = std::io::BufWriter::new(std::fs::File::create(outdir.join("errors.log"))?);
        for e in &result.errors {
            writeln!(log, "{e}")?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::build_models;
    use crate::corpus::{PromptRecord, Split};

    fn test_config() -> ExperimentConfig {
        toml::from_str(
            r#"
max_new_tokens = 12
seeds = [1, 2]

[models]
kind = "synthetic"
seed = 3
vocab_size = 5
order = 1
alpha = 0.6

[sweep]
policies = [
    { kind = "sd" },
    { kind = "fsd", divergence = "js" },
    { kind = "target-only" },
]
t_grid = [0.1, 0.3]
l_grid = [2, 4]
"#,
        )
        .unwrap()
    }

    fn prompts() -> Vec<PromptRecord> {
        (0..3)
            .map(|i| PromptRecord {
                id: format!("p{i}"),
                tokens: vec![i as u32],
                split: Split::Test,
            })
            .collect()
    }

    #[test]
    fn grid_coverage() {
        let cfg = test_config();
        let models = build_models(&cfg.models, Path::new(".")).unwrap();
        let prompts = prompts();
        let refs: Vec<&PromptRecord> = prompts.iter().collect();
        let result = run_sweep(&cfg, &models, &refs);
        assert!(result.errors.is_empty(), "{:?}", result.errors);
        // sd: 1×2×2, fsd: 2×2×2, target-only: 1×2×2.
        assert_eq!(result.rows.len(), 4 + 8 + 4);
    }

    #[test]
    fn reports_are_byte_deterministic() {
        let cfg = test_config();
        let models = build_models(&cfg.models, Path::new(".")).unwrap();
        let prompts = prompts();
        let refs: Vec<&PromptRecord> = prompts.iter().collect();
        let mut outputs = Vec::new();
        for run in 0..2 {
            let result = run_sweep(&cfg, &models, &refs);
            let dir = std::env::temp_dir().join(format!("fsd-lab-sweep-det-{run}"));
            let _ = std::fs::remove_dir_all(&dir);
            emit_reports(&result, &dir).unwrap();
            outputs.push((
                std::fs::read(dir.join("metrics.csv")).unwrap(),
                std::fs::read(dir.join("summary.json")).unwrap(),
            ));
        }
        assert_eq!(outputs[0], outputs[1]);
    }

    #[test]
    fn empty_result_is_an_error() {
        let dir = std::env::temp_dir().join("fsd-lab-sweep-empty");
        assert!(emit_reports(&SweepResult::default(), &dir).is_err());
    }
}
