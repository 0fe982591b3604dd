//! The draft-propose / target-verify decode loop.
//!
//! One block: the draft model proposes a run of candidate tokens, a single
//! batched target evaluation scores every candidate position, and
//! candidates are accepted sequentially until the first rejection. A
//! rejection emits a terminator token from the policy's fallback
//! distribution; full acceptance optionally emits a bonus token from the
//! target's next distribution, which the verification pass already
//! produced.
//!
//! Uniform-draw protocol (pinned so cross-policy seed-equivalence is well
//! defined): probabilistic policies consume exactly one draw per candidate
//! considered, in order, and one draw per sampled emission event. Plain
//! fuzzy acceptance consumes none.

use alloc::string::ToString;
use alloc::vec::Vec;

use crate::divergence::{below_threshold, DivergenceKind};
use crate::models::ModelBackend;
use crate::prob::{ProbDist, TokenId};
use crate::rng::RngStream;
use crate::{Error, Result};

/// Candidate acceptance rule for the decode loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AcceptancePolicy {
    /// Speculative decoding: accept with probability `min(1, pT/pD)`,
    /// resample rejections from the residual distribution.
    Sd,
    /// Fuzzy speculative decoding: accept iff the divergence between the
    /// target and draft distributions is strictly below `threshold`;
    /// rejections fall back to the target distribution.
    Fsd {
        kind: DivergenceKind,
        threshold: f64,
    },
    /// Reducible FSD: accept if the divergence test passes or the SD
    /// probabilistic test passes; collapses exactly to SD at threshold 0.
    Rfsd {
        kind: DivergenceKind,
        threshold: f64,
    },
    /// Content-independent acceptance with fixed probability `rate`;
    /// rejections fall back to the target distribution.
    Random { rate: f64 },
    /// Ancestral generation from the target model only.
    TargetOnly,
    /// Ancestral generation from the draft model only.
    DraftOnly,
}

impl AcceptancePolicy {
    pub fn divergence_kind(&self) -> Option<DivergenceKind> {
        match self {
            AcceptancePolicy::Fsd { kind, .. } | AcceptancePolicy::Rfsd { kind, .. } => Some(*kind),
            _ => None,
        }
    }
}

/// How a token is drawn from a distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingMode {
    Greedy,
    Sampled { temperature: f64 },
}

impl SamplingMode {
    fn emit(&self, dist: &ProbDist, rng: &mut RngStream) -> Result<TokenId> {
        match self {
            SamplingMode::Greedy => Ok(dist.argmax()),
            SamplingMode::Sampled { temperature } => {
                Ok(dist.apply_temperature(*temperature)?.sample(rng))
            }
        }
    }
}

/// Candidate-length schedule across blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LengthSchedule {
    Fixed,
    /// +2 after a fully accepted block, -1 after a rejection, clamped to
    /// `[1, 32]`.
    Dynamic,
}

pub const DYNAMIC_MIN_LEN: usize = 1;
pub const DYNAMIC_MAX_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct DraftingConfig {
    pub candidate_length: usize,
    pub length_schedule: LengthSchedule,
    pub draft_mode: SamplingMode,
    /// Mode for every target-side emission: rejection fallback, residual
    /// resample, and the bonus token.
    pub rejection_sampling: SamplingMode,
    pub bonus_token: bool,
    pub stop_token: Option<TokenId>,
}

impl Default for DraftingConfig {
    fn default() -> Self {
        DraftingConfig {
            candidate_length: 5,
            length_schedule: LengthSchedule::Fixed,
            draft_mode: SamplingMode::Greedy,
            rejection_sampling: SamplingMode::Sampled { temperature: 1.0 },
            bonus_token: true,
            stop_token: None,
        }
    }
}

/// Where a rejected candidate's replacement is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleSource {
    /// The target's distribution at the rejected position.
    Target,
    /// The normalized positive part of `pT - pD`.
    Residual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Accept,
    Reject { resample_from: ResampleSource },
}

/// Origin of an emitted token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenSource {
    Draft,
    TargetResample,
    TargetBonus,
}

/// Per-candidate record within a block.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRecord {
    pub token: TokenId,
    /// Divergence at this position under the policy's kind, when the
    /// policy has one.
    pub divergence: Option<f64>,
    /// SD acceptance probability `min(1, pT[x]/pD[x])`, when defined.
    pub sd_accept_prob: Option<f64>,
    pub accepted: bool,
}

/// How a block ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockEnd {
    /// First rejection: a terminator token was emitted from the fallback
    /// distribution.
    Resampled { token: TokenId },
    /// Full acceptance followed by a bonus token from the target.
    Bonus { token: TokenId },
    /// Full acceptance with bonus tokens disabled.
    FullAcceptNoBonus,
    /// Generation hit `max_new_tokens` or the stop token mid-block.
    GenerationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockRecord {
    pub context_len: usize,
    /// Candidates drafted this block (one draft forward pass each).
    pub proposed: usize,
    /// Acceptance decisions actually made, in order.
    pub candidates: Vec<CandidateRecord>,
    pub first_rejection: Option<usize>,
    pub end: BlockEnd,
}

impl BlockRecord {
    pub fn accepted(&self) -> usize {
        self.candidates.iter().filter(|c| c.accepted).count()
    }
}

/// Full record of a decode session.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeTrace {
    pub blocks: Vec<BlockRecord>,
    /// Source tag per emitted token.
    pub sources: Vec<TokenSource>,
    pub draft_calls: usize,
    pub target_calls: usize,
}

/// Aggregated run metrics.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RunMetrics {
    pub tokens: usize,
    /// Mean accepted candidates per block.
    pub acceptance_length: f64,
    /// Accepted candidates / proposed candidates, in percent.
    pub acceptance_pct: f64,
    /// Fraction of emitted tokens sourced from the draft model.
    pub pct_from_draft: f64,
    pub draft_calls: usize,
    pub target_calls: usize,
    pub target_calls_per_token: f64,
}

/// SD acceptance probability `min(1, pT(x)/pD(x))` for a candidate with
/// target likelihood `p_target` and draft likelihood `p_draft`.
pub fn sd_accept_prob(p_target: f64, p_draft: f64) -> Result<f64> {
    if p_draft <= 0.0 {
        return Err(Error::ZeroDraftProbability { token: u32::MAX });
    }
    Ok(if p_target >= p_draft {
        1.0
    } else {
        p_target / p_draft
    })
}

/// Residual distribution `normalize(max(0, pT - pD))` sampled on SD
/// rejection. The positive part (rather than the raw difference) is what
/// makes the per-step output law equal the target exactly.
pub fn residual_dist(p_target: &ProbDist, p_draft: &ProbDist) -> Result<ProbDist> {
    p_target.check_same_vocab(p_draft)?;
    let weights: Vec<f64> = p_target
        .probs()
        .iter()
        .zip(p_draft.probs())
        .map(|(&t, &d)| (t - d).max(0.0))
        .collect();
    ProbDist::normalize(&weights).map_err(|e| match e {
        Error::AllZero => Error::DegenerateResidual,
        other => other,
    })
}

/// One acceptance decision for a candidate token.
///
/// Consumes exactly one uniform draw for SD, rFSD, and Random, and none
/// for plain FSD or the single-model baselines.
pub fn decide_acceptance(
    policy: &AcceptancePolicy,
    p_target: &ProbDist,
    p_draft: &ProbDist,
    candidate: TokenId,
    rng: &mut RngStream,
) -> Result<Decision> {
    if candidate.index() >= p_target.vocab_size() {
        return Err(Error::TokenOutOfRange {
            token: candidate.0,
            vocab_size: p_target.vocab_size(),
        });
    }
    match policy {
        AcceptancePolicy::Sd => {
            let u = rng.next_f64();
            let prob = sd_accept_prob(p_target.prob(candidate), p_draft.prob(candidate))
                .map_err(|_| Error::ZeroDraftProbability { token: candidate.0 })?;
            if prob > u {
                Ok(Decision::Accept)
            } else {
                Ok(Decision::Reject {
                    resample_from: ResampleSource::Residual,
                })
            }
        }
        AcceptancePolicy::Fsd { kind, threshold } => {
            if below_threshold(*kind, p_target, p_draft, *threshold)? {
                Ok(Decision::Accept)
            } else {
                Ok(Decision::Reject {
                    resample_from: ResampleSource::Target,
                })
            }
        }
        AcceptancePolicy::Rfsd { kind, threshold } => {
            let u = rng.next_f64();
            if below_threshold(*kind, p_target, p_draft, *threshold)? {
                return Ok(Decision::Accept);
            }
            let prob = sd_accept_prob(p_target.prob(candidate), p_draft.prob(candidate))
                .map_err(|_| Error::ZeroDraftProbability { token: candidate.0 })?;
            if prob > u {
                Ok(Decision::Accept)
            } else {
                Ok(Decision::Reject {
                    resample_from: ResampleSource::Residual,
                })
            }
        }
        AcceptancePolicy::Random { rate } => {
            let u = rng.next_f64();
            if u < *rate {
                Ok(Decision::Accept)
            } else {
                Ok(Decision::Reject {
                    resample_from: ResampleSource::Target,
                })
            }
        }
        // The single-model baselines never inspect candidates.
        AcceptancePolicy::TargetOnly => Ok(Decision::Reject {
            resample_from: ResampleSource::Target,
        }),
        AcceptancePolicy::DraftOnly => Ok(Decision::Accept),
    }
}

fn backend_err(block: usize, e: Error) -> Error {
    match e {
        Error::Backend { message, .. } => Error::Backend { block, message },
        other => Error::Backend {
            block,
            message: other.to_string(),
        },
    }
}

/// Ancestral generation from a single model; one forward pass per token.
fn decode_single(
    model: &dyn ModelBackend,
    prompt: &[TokenId],
    mode: SamplingMode,
    source: TokenSource,
    cfg: &DraftingConfig,
    max_new_tokens: usize,
    rng: &mut RngStream,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    let mut ctx = prompt.to_vec();
    let mut trace = DecodeTrace::default();
    for step in 0..max_new_tokens {
        let dist = model.next_dist(&ctx).map_err(|e| backend_err(step, e))?;
        match source {
            TokenSource::Draft => trace.draft_calls += 1,
            _ => trace.target_calls += 1,
        }
        let token = mode.emit(&dist, rng)?;
        ctx.push(token);
        trace.sources.push(source);
        trace.blocks.push(BlockRecord {
            context_len: ctx.len() - 1,
            proposed: 0,
            candidates: Vec::new(),
            first_rejection: None,
            end: BlockEnd::Resampled { token },
        });
        if cfg.stop_token == Some(token) {
            break;
        }
    }
    Ok((ctx[prompt.len()..].to_vec(), trace))
}

/// Runs the block loop until `max_new_tokens` tokens are emitted or the
/// stop token appears. Returns the emitted tokens and the full trace.
pub fn decode(
    target: &dyn ModelBackend,
    draft: &dyn ModelBackend,
    prompt: &[TokenId],
    policy: &AcceptancePolicy,
    cfg: &DraftingConfig,
    max_new_tokens: usize,
    rng: &mut RngStream,
) -> Result<(Vec<TokenId>, DecodeTrace)> {
    if target.vocab_size() != draft.vocab_size() {
        return Err(Error::VocabMismatch {
            left: target.vocab_size(),
            right: draft.vocab_size(),
        });
    }
    match policy {
        AcceptancePolicy::TargetOnly => {
            return decode_single(
                target,
                prompt,
                cfg.rejection_sampling,
                TokenSource::TargetResample,
                cfg,
                max_new_tokens,
                rng,
            );
        }
        AcceptancePolicy::DraftOnly => {
            return decode_single(
                draft,
                prompt,
                cfg.draft_mode,
                TokenSource::Draft,
                cfg,
                max_new_tokens,
                rng,
            );
        }
        _ => {}
    }

    let mut ctx = prompt.to_vec();
    let mut trace = DecodeTrace::default();
    let mut block_len = cfg.candidate_length.max(1);
    let mut stopped = false;

    while trace.sources.len() < max_new_tokens && !stopped {
        let block_idx = trace.blocks.len();
        let context_len = ctx.len();

        // (a) Draft proposes the block sequentially.
        let mut candidates = Vec::with_capacity(block_len);
        let mut draft_dists = Vec::with_capacity(block_len);
        for _ in 0..block_len {
            let dist = draft
                .next_dist(&ctx)
                .map_err(|e| backend_err(block_idx, e))?;
            let token = cfg.draft_mode.emit(&dist, rng)?;
            ctx.push(token);
            candidates.push(token);
            draft_dists.push(dist);
        }
        trace.draft_calls += block_len;

        // (b) One batched target evaluation covering every candidate
        // position plus the bonus position. The padding token is never
        // conditioned on.
        ctx.push(candidates[block_len - 1]);
        let verify = target
            .next_dists(&ctx, context_len)
            .map_err(|e| backend_err(block_idx, e))?;
        ctx.truncate(context_len);
        trace.target_calls += 1;
        debug_assert_eq!(verify.len(), block_len + 1);

        // (c) Sequential acceptance decisions, truncating at the first
        // rejection or the generation limit.
        let mut records = Vec::new();
        let mut first_rejection = None;
        let mut end = None;
        for (i, &cand) in candidates.iter().enumerate() {
            if trace.sources.len() >= max_new_tokens {
                end = Some(BlockEnd::GenerationLimit);
                break;
            }
            let p_t = &verify[i];
            let p_d = &draft_dists[i];
            let divergence = match policy.divergence_kind() {
                Some(kind) => Some(kind.evaluate(p_t, p_d)?),
                None => None,
            };
            let sd_prob = if p_d.prob(cand) > 0.0 {
                Some(sd_accept_prob(p_t.prob(cand), p_d.prob(cand))?)
            } else {
                None
            };
            match decide_acceptance(policy, p_t, p_d, cand, rng)? {
                Decision::Accept => {
                    records.push(CandidateRecord {
                        token: cand,
                        divergence,
                        sd_accept_prob: sd_prob,
                        accepted: true,
                    });
                    ctx.push(cand);
                    trace.sources.push(TokenSource::Draft);
                    if cfg.stop_token == Some(cand) {
                        stopped = true;
                        end = Some(BlockEnd::GenerationLimit);
                        break;
                    }
                }
                Decision::Reject { resample_from } => {
                    records.push(CandidateRecord {
                        token: cand,
                        divergence,
                        sd_accept_prob: sd_prob,
                        accepted: false,
                    });
                    first_rejection = Some(i);
                    let fallback = match resample_from {
                        ResampleSource::Target => p_t.clone(),
                        ResampleSource::Residual => residual_dist(p_t, p_d)?,
                    };
                    let token = cfg.rejection_sampling.emit(&fallback, rng)?;
                    ctx.push(token);
                    trace.sources.push(TokenSource::TargetResample);
                    if cfg.stop_token == Some(token) {
                        stopped = true;
                    }
                    end = Some(BlockEnd::Resampled { token });
                    break;
                }
            }
        }

        // (d) Bonus token after full acceptance.
        let end = match end {
            Some(e) => e,
            None => {
                if cfg.bonus_token && trace.sources.len() < max_new_tokens {
                    let token = cfg.rejection_sampling.emit(&verify[block_len], rng)?;
                    ctx.push(token);
                    trace.sources.push(TokenSource::TargetBonus);
                    if cfg.stop_token == Some(token) {
                        stopped = true;
                    }
                    BlockEnd::Bonus { token }
                } else if cfg.bonus_token {
                    BlockEnd::GenerationLimit
                } else {
                    BlockEnd::FullAcceptNoBonus
                }
            }
        };

        // (e) Dynamic length schedule.
        if cfg.length_schedule == LengthSchedule::Dynamic {
            block_len = if first_rejection.is_some() {
                (block_len - 1).max(DYNAMIC_MIN_LEN)
            } else {
                (block_len + 2).min(DYNAMIC_MAX_LEN)
            };
        }

        trace.blocks.push(BlockRecord {
            context_len,
            proposed: candidates.len(),
            candidates: records,
            first_rejection,
            end,
        });
    }

    Ok((ctx[prompt.len()..].to_vec(), trace))
}

/// Aggregates a trace into run metrics.
pub fn compute_metrics(trace: &DecodeTrace) -> RunMetrics {
    let tokens = trace.sources.len();
    let blocks = trace.blocks.len();
    let accepted: usize = trace.blocks.iter().map(BlockRecord::accepted).sum();
    let proposed: usize = trace.blocks.iter().map(|b| b.proposed).sum();
    let from_draft = trace
        .sources
        .iter()
        .filter(|&&s| s == TokenSource::Draft)
        .count();
    RunMetrics {
        tokens,
        acceptance_length: if blocks == 0 {
            0.0
        } else {
            accepted as f64 / blocks as f64
        },
        acceptance_pct: if proposed == 0 {
            0.0
        } else {
            100.0 * accepted as f64 / proposed as f64
        },
        pct_from_draft: if tokens == 0 {
            0.0
        } else {
            from_draft as f64 / tokens as f64
        },
        draft_calls: trace.draft_calls,
        target_calls: trace.target_calls,
        target_calls_per_token: if tokens == 0 {
            0.0
        } else {
            trace.target_calls as f64 / tokens as f64
        },
    }
}
