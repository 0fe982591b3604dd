//! Exact enumeration of sequence-level output distributions.
//!
//! For small vocabularies and short horizons the full distribution over
//! length-N generations is computable by depth-first products of
//! next-token laws. Fuzzy acceptance is deterministic given the prefix,
//! so the fuzzy decoder's process distribution is exact as well; the SD
//! process integrates its uniform acceptance draws analytically. These
//! oracles are what the decode loop and the divergence bounds are checked
//! against.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::divergence::{below_threshold, DivergenceKind};
use crate::models::ModelBackend;
use crate::prob::{ProbDist, TokenId};
use crate::rng::RngStream;
use crate::{Error, Result};

/// Hard cap on enumerated sequences; larger instances are refused rather
/// than sampled.
pub const ENUMERATION_CAP: u64 = 1_000_000;

/// Exact categorical distribution over token sequences of a fixed length.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDist {
    vocab_size: usize,
    len: usize,
    probs: BTreeMap<Vec<TokenId>, f64>,
}

impl SequenceDist {
    fn from_map(vocab_size: usize, len: usize, probs: BTreeMap<Vec<TokenId>, f64>) -> Result<Self> {
        let sum: f64 = probs.values().sum();
        if len > 0 && (sum - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized { sum });
        }
        Ok(SequenceDist {
            vocab_size,
            len,
            probs,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, seq: &[TokenId]) -> f64 {
        self.probs.get(seq).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<TokenId>, f64)> {
        self.probs.iter().map(|(k, &v)| (k, v))
    }

    pub fn support_size(&self) -> usize {
        self.probs.len()
    }
}

fn check_cap(vocab_size: usize, n: usize) -> Result<()> {
    let mut total: u64 = 1;
    for _ in 0..n {
        total = total.saturating_mul(vocab_size as u64);
        if total > ENUMERATION_CAP {
            return Err(Error::EnumerationTooLarge {
                sequences: total,
                cap: ENUMERATION_CAP,
            });
        }
    }
    Ok(())
}

/// Exact ancestral distribution of `n` tokens from a single model.
pub fn enumerate_target_dist(
    model: &dyn ModelBackend,
    prompt: &[TokenId],
    n: usize,
) -> Result<SequenceDist> {
    check_cap(model.vocab_size(), n)?;
    let mut probs = BTreeMap::new();
    let mut ctx = prompt.to_vec();
    let mut seq = Vec::with_capacity(n);
    ancestral_dfs(model, &mut ctx, &mut seq, 1.0, n, &mut probs)?;
    SequenceDist::from_map(model.vocab_size(), n, probs)
}

fn ancestral_dfs(
    model: &dyn ModelBackend,
    ctx: &mut Vec<TokenId>,
    seq: &mut Vec<TokenId>,
    mass: f64,
    n: usize,
    out: &mut BTreeMap<Vec<TokenId>, f64>,
) -> Result<()> {
    if seq.len() == n {
        *out.entry(seq.clone()).or_insert(0.0) += mass;
        return Ok(());
    }
    let dist = model.next_dist(ctx)?;
    for (i, &p) in dist.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let t = TokenId(i as u32);
        ctx.push(t);
        seq.push(t);
        ancestral_dfs(model, ctx, seq, mass * p, n, out)?;
        ctx.pop();
        seq.pop();
    }
    Ok(())
}

/// Block-machine slot state: candidate index within the block, or the
/// bonus slot after a fully accepted block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Candidate(usize),
    Bonus,
}

struct BlockMachine {
    block_len: usize,
    bonus: bool,
}

impl BlockMachine {
    fn start(&self) -> Slot {
        Slot::Candidate(0)
    }

    /// Slot after an accepted candidate.
    fn after_accept(&self, idx: usize) -> Slot {
        if idx + 1 == self.block_len {
            if self.bonus {
                Slot::Bonus
            } else {
                Slot::Candidate(0)
            }
        } else {
            Slot::Candidate(idx + 1)
        }
    }

    /// Rejection or bonus emission resets the block.
    fn reset(&self) -> Slot {
        Slot::Candidate(0)
    }
}

/// Exact process distribution of a decoder whose acceptance decision is a
/// deterministic function of the prefix (fuzzy acceptance, or a fixed
/// acceptance mask). Drafting is sampled at temperature 1, so the
/// effective law at an accepted candidate slot is the full draft
/// distribution.
fn enumerate_deterministic_policy(
    target: &dyn ModelBackend,
    draft: &dyn ModelBackend,
    prompt: &[TokenId],
    n: usize,
    machine: &BlockMachine,
    accept: &dyn Fn(&[TokenId], usize) -> Result<bool>,
) -> Result<SequenceDist> {
    check_cap(target.vocab_size(), n)?;
    let mut probs = BTreeMap::new();
    let mut ctx = prompt.to_vec();
    let mut seq = Vec::with_capacity(n);
    det_dfs(
        target,
        draft,
        machine,
        accept,
        &mut ctx,
        &mut seq,
        machine.start(),
        1.0,
        n,
        &mut probs,
    )?;
    SequenceDist::from_map(target.vocab_size(), n, probs)
}

#[allow(clippy::too_many_arguments)]
fn det_dfs(
    target: &dyn ModelBackend,
    draft: &dyn ModelBackend,
    machine: &BlockMachine,
    accept: &dyn Fn(&[TokenId], usize) -> Result<bool>,
    ctx: &mut Vec<TokenId>,
    seq: &mut Vec<TokenId>,
    slot: Slot,
    mass: f64,
    n: usize,
    out: &mut BTreeMap<Vec<TokenId>, f64>,
) -> Result<()> {
    if seq.len() == n {
        *out.entry(seq.clone()).or_insert(0.0) += mass;
        return Ok(());
    }
    let (law, next) = match slot {
        Slot::Bonus => (target.next_dist(ctx)?, machine.reset()),
        Slot::Candidate(idx) => {
            if accept(ctx, seq.len())? {
                (draft.next_dist(ctx)?, machine.after_accept(idx))
            } else {
                (target.next_dist(ctx)?, machine.reset())
            }
        }
    };
    for (i, &p) in law.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        let t = TokenId(i as u32);
        ctx.push(t);
        seq.push(t);
        det_dfs(target, draft, machine, accept, ctx, seq, next, mass * p, n, out)?;
        ctx.pop();
        seq.pop();
    }
    Ok(())
}

/// Exact FSD process distribution with sampled drafting, block length
/// `block_len`, divergence `kind`, and threshold `threshold`.
pub fn enumerate_fsd_dist(
    target: &dyn ModelBackend,
    draft: &dyn ModelBackend,
    prompt: &[TokenId],
    n: usize,
    kind: DivergenceKind,
    threshold: f64,
    block_len: usize,
    bonus: bool,
) -> Result<SequenceDist> {
    let machine = BlockMachine { block_len, bonus };
    let accept = |ctx: &[TokenId], _pos: usize| -> Result<bool> {
        below_threshold(kind, &target.next_dist(ctx)?, &draft.next_dist(ctx)?, threshold)
    };
    enumerate_deterministic_policy(target, draft, prompt, n, &machine, &accept)
}

/// Exact SD process distribution, integrating the uniform acceptance
/// draws analytically per position. Serves as an independent check that
/// the block-structured process reproduces the target distribution.
pub fn enumerate_sd_dist(
    target: &dyn ModelBackend,
    draft: &dyn ModelBackend,
    prompt: &[TokenId],
    n: usize,
    block_len: usize,
) -> Result<SequenceDist> {
    check_cap(target.vocab_size().saturating_mul(2), n)?;
    let machine = BlockMachine {
        block_len,
        bonus: true,
    };
    let mut probs = BTreeMap::new();
    let mut ctx = prompt.to_vec();
    let mut seq = Vec::with_capacity(n);
    sd_dfs(
        target,
        draft,
        &machine,
        &mut ctx,
        &mut seq,
        machine.start(),
        1.0,
        n,
        &mut probs,
    )?;
    SequenceDist::from_map(target.vocab_size(), n, probs)
}

#[allow(clippy::too_many_arguments)]
fn sd_dfs(
    target: &dyn ModelBackend,
    draft: &dyn ModelBackend,
    machine: &BlockMachine,
    ctx: &mut Vec<TokenId>,
    seq: &mut Vec<TokenId>,
    slot: Slot,
    mass: f64,
    n: usize,
    out: &mut BTreeMap<Vec<TokenId>, f64>,
) -> Result<()> {
    if seq.len() == n {
        *out.entry(seq.clone()).or_insert(0.0) += mass;
        return Ok(());
    }
    match slot {
        Slot::Bonus => {
            let law = target.next_dist(ctx)?;
            for (i, &p) in law.probs().iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let t = TokenId(i as u32);
                ctx.push(t);
                seq.push(t);
                sd_dfs(target, draft, machine, ctx, seq, machine.reset(), mass * p, n, out)?;
                ctx.pop();
                seq.pop();
            }
        }
        Slot::Candidate(idx) => {
            let p_t = target.next_dist(ctx)?;
            let p_d = draft.next_dist(ctx)?;
            // P(candidate = x and accepted) = pD[x] * min(1, pT[x]/pD[x])
            //                               = min(pD[x], pT[x]).
            // P(rejected) = sum_y max(0, pD[y] - pT[y]); rejected mass is
            // redistributed over the normalized positive part of pT - pD.
            let accept_next = machine.after_accept(idx);
            let mut reject_mass = 0.0;
            let mut residual_norm = 0.0;
            for (&t, &d) in p_t.probs().iter().zip(p_d.probs()) {
                reject_mass += (d - t).max(0.0);
                residual_norm += (t - d).max(0.0);
            }
            for (i, (&t, &d)) in p_t.probs().iter().zip(p_d.probs()).enumerate() {
                let tok = TokenId(i as u32);
                let accepted = t.min(d);
                if accepted > 0.0 {
                    ctx.push(tok);
                    seq.push(tok);
                    sd_dfs(target, draft, machine, ctx, seq, accept_next, mass * accepted, n, out)?;
                    ctx.pop();
                    seq.pop();
                }
                if reject_mass > 0.0 && residual_norm > 0.0 {
                    let resampled = reject_mass * ((t - d).max(0.0) / residual_norm);
                    if resampled > 0.0 {
                        ctx.push(tok);
                        seq.push(tok);
                        sd_dfs(
                            target,
                            draft,
                            machine,
                            ctx,
                            seq,
                            machine.reset(),
                            mass * resampled,
                            n,
                            out,
                        )?;
                        ctx.pop();
                        seq.pop();
                    }
                }
            }
        }
    }
    Ok(())
}

/// Divergence between two sequence-level distributions, treating each
/// full sequence as one categorical outcome.
pub fn sequence_divergence(
    kind: DivergenceKind,
    a: &SequenceDist,
    b: &SequenceDist,
) -> Result<f64> {
    if a.vocab_size != b.vocab_size || a.len != b.len {
        return Err(Error::DomainMismatch);
    }
    let mut keys: Vec<&Vec<TokenId>> = a.probs.keys().collect();
    for k in b.probs.keys() {
        if !a.probs.contains_key(k) {
            keys.push(k);
        }
    }
    let pa: Vec<f64> = keys.iter().map(|k| a.prob(k)).collect();
    let pb: Vec<f64> = keys.iter().map(|k| b.prob(k)).collect();
    let da = ProbDist::new(pa)?;
    let db = ProbDist::new(pb)?;
    kind.evaluate(&da, &db)
}

/// Verification record for the sequence-level divergence bound
/// `Div(P_target, P_fsd) <= N * p_use * T`.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub kind: DivergenceKind,
    pub threshold: f64,
    pub n: usize,
    /// Exact sequence-level divergence between the target and FSD
    /// process distributions.
    pub exact_divergence: f64,
    /// Per-position probability (under the target measure over prefixes)
    /// that the draft law governs the position.
    pub p_use: Vec<f64>,
    /// Mean of `p_use` across positions.
    pub p_use_mean: f64,
    /// Realized draft-use fraction under the FSD process measure.
    pub realized_use_fraction: f64,
    /// `N * p_use_mean * threshold`.
    pub bound: f64,
    /// `bound - exact_divergence`.
    pub slack: f64,
    /// Per-step decomposition terms
    /// `E_{P_target(prefix)}[Div(p_target | prefix, effective | prefix)]`.
    /// For KL these sum to the exact sequence divergence.
    pub per_step_terms: Vec<f64>,
}

/// Walks all prefixes, weighting by `measure` laws, and accumulates the
/// per-position draft-use probability and decomposition terms of the FSD
/// machine. `measure` selects the prefix distribution: the target model
/// for the expected draft-use probability, or the FSD effective law for
/// realized fractions.
#[allow(clippy::too_many_arguments)]
fn fsd_prefix_walk(
    target: &dyn ModelBackend,
    draft: &dyn ModelBackend,
    kind: DivergenceKind,
    threshold: f64,
    machine: &BlockMachine,
    ctx: &mut Vec<TokenId>,
    slot: Slot,
    mass: f64,
    depth: usize,
    n: usize,
    under_fsd_measure: bool,
    p_use: &mut [f64],
    terms: &mut [f64],
) -> Result<()> {
    if depth == n {
        return Ok(());
    }
    let p_t = target.next_dist(ctx)?;
    let p_d = draft.next_dist(ctx)?;
    let (draft_used, next) = match slot {
        Slot::Bonus => (false, machine.reset()),
        Slot::Candidate(idx) => {
            if below_threshold(kind, &p_t, &p_d, threshold)? {
                (true, machine.after_accept(idx))
            } else {
                (false, machine.reset())
            }
        }
    };
    if draft_used {
        p_use[depth] += mass;
        terms[depth] += mass * kind.evaluate(&p_t, &p_d)?;
    }
    let law = if under_fsd_measure && draft_used {
        &p_d
    } else {
        &p_t
    };
    let law = law.clone();
    for (i, &p) in law.probs().iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        ctx.push(TokenId(i as u32));
        fsd_prefix_walk(
            target,
            draft,
            kind,
            threshold,
            machine,
            ctx,
            next,
            mass * p,
            depth + 1,
            n,
            under_fsd_measure,
            p_use,
            terms,
        )?;
        ctx.pop();
    }
    Ok(())
}

/// Computes the exact FSD sequence divergence, the target-measure
/// expected draft-use probabilities, and the resulting bound check.
#[allow(clippy::too_many_arguments)]
pub fn check_bound(
    target: &dyn ModelBackend,
    draft: &dyn ModelBackend,
    prompt: &[TokenId],
    n: usize,
    kind: DivergenceKind,
    threshold: f64,
    block_len: usize,
    bonus: bool,
) -> Result<BoundReport> {
    let machine = BlockMachine { block_len, bonus };
    let target_dist = enumerate_target_dist(target, prompt, n)?;
    let fsd_dist = enumerate_fsd_dist(target, draft, prompt, n, kind, threshold, block_len, bonus)?;
    let exact = sequence_divergence(kind, &target_dist, &fsd_dist)?;

    let mut p_use = alloc::vec![0.0; n];
    let mut terms = alloc::vec![0.0; n];
    let mut ctx = prompt.to_vec();
    fsd_prefix_walk(
        target, draft, kind, threshold, &machine, &mut ctx, machine.start(), 1.0, 0, n, false,
        &mut p_use, &mut terms,
    )?;

    let mut realized = alloc::vec![0.0; n];
    let mut realized_terms = alloc::vec![0.0; n];
    let mut ctx = prompt.to_vec();
    fsd_prefix_walk(
        target, draft, kind, threshold, &machine, &mut ctx, machine.start(), 1.0, 0, n, true,
        &mut realized, &mut realized_terms,
    )?;

    let p_use_mean = p_use.iter().sum::<f64>() / n as f64;
    let realized_use_fraction = realized.iter().sum::<f64>() / n as f64;
    let bound = n as f64 * p_use_mean * threshold;
    Ok(BoundReport {
        kind,
        threshold,
        n,
        exact_divergence: exact,
        p_use,
        p_use_mean,
        realized_use_fraction,
        bound,
        slack: bound - exact,
        per_step_terms: terms,
    })
}

/// Comparison of FSD against content-blind acceptance at a matched
/// draft-use rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomBaselineReport {
    pub kind: DivergenceKind,
    pub threshold: f64,
    /// Exact FSD sequence divergence from the target.
    pub fsd_divergence: f64,
    /// FSD's per-candidate-slot acceptance rate under its own process
    /// measure; the random policy accepts at this rate.
    pub matched_accept_rate: f64,
    /// Expected sequence divergence of the random policy, averaged over
    /// seeded acceptance masks.
    pub random_expected_divergence: f64,
    pub masks: usize,
}

/// Expected fraction of candidate slots accepted, and the fraction of
/// positions that are candidate slots, under the FSD process measure.
fn fsd_slot_rates(
    target: &dyn ModelBackend,
    draft: &dyn ModelBackend,
    prompt: &[TokenId],
    n: usize,
    kind: DivergenceKind,
    threshold: f64,
    machine: &BlockMachine,
) -> Result<(f64, f64)> {
    fn walk(
        target: &dyn ModelBackend,
        draft: &dyn ModelBackend,
        kind: DivergenceKind,
        threshold: f64,
        machine: &BlockMachine,
        ctx: &mut Vec<TokenId>,
        slot: Slot,
        mass: f64,
        depth: usize,
        n: usize,
        acc: &mut (f64, f64),
    ) -> Result<()> {
        if depth == n {
            return Ok(());
        }
        let p_t = target.next_dist(ctx)?;
        let p_d = draft.next_dist(ctx)?;
        let (law, next) = match slot {
            Slot::Bonus => (p_t.clone(), machine.reset()),
            Slot::Candidate(idx) => {
                acc.1 += mass;
                if below_threshold(kind, &p_t, &p_d, threshold)? {
                    acc.0 += mass;
                    (p_d.clone(), machine.after_accept(idx))
                } else {
                    (p_t.clone(), machine.reset())
                }
            }
        };
        for (i, &p) in law.probs().iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            ctx.push(TokenId(i as u32));
            walk(target, draft, kind, threshold, machine, ctx, next, mass * p, depth + 1, n, acc)?;
            ctx.pop();
        }
        Ok(())
    }
    let mut acc = (0.0, 0.0);
    let mut ctx = prompt.to_vec();
    walk(
        target, draft, kind, threshold, machine, &mut ctx, machine.start(), 1.0, 0, n, &mut acc,
    )?;
    Ok(acc)
}

/// Compares FSD's exact sequence divergence at `threshold` against the
/// expected divergence of a policy that accepts candidate slots blindly
/// at FSD's own acceptance rate, averaged over `masks` seeded acceptance
/// masks (one pre-drawn uniform per position).
#[allow(clippy::too_many_arguments)]
pub fn compare_random_baseline(
    target: &dyn ModelBackend,
    draft: &dyn ModelBackend,
    prompt: &[TokenId],
    n: usize,
    kind: DivergenceKind,
    threshold: f64,
    block_len: usize,
    bonus: bool,
    masks: usize,
    seed: u64,
) -> Result<RandomBaselineReport> {
    let machine = BlockMachine { block_len, bonus };
    let target_dist = enumerate_target_dist(target, prompt, n)?;
    let fsd_dist = enumerate_fsd_dist(target, draft, prompt, n, kind, threshold, block_len, bonus)?;
    let fsd_divergence = sequence_divergence(kind, &target_dist, &fsd_dist)?;

    let (accepted_mass, candidate_mass) =
        fsd_slot_rates(target, draft, prompt, n, kind, threshold, &machine)?;
    let rate = if candidate_mass > 0.0 {
        accepted_mass / candidate_mass
    } else {
        0.0
    };

    let root = RngStream::new(seed);
    let mut total = 0.0;
    for m in 0..masks {
        let mut mask_rng = root.derive(m as u64);
        let uniforms: Vec<f64> = (0..n).map(|_| mask_rng.next_f64()).collect();
        let accept = |_ctx: &[TokenId], pos: usize| -> Result<bool> { Ok(uniforms[pos] < rate) };
        let mask_machine = BlockMachine { block_len, bonus };
        let dist = enumerate_deterministic_policy(target, draft, prompt, n, &mask_machine, &accept)?;
        total += sequence_divergence(kind, &target_dist, &dist)?;
    }
    Ok(RandomBaselineReport {
        kind,
        threshold,
        fsd_divergence,
        matched_accept_rate: rate,
        random_expected_divergence: if masks > 0 { total / masks as f64 } else { 0.0 },
        masks,
    })
}
