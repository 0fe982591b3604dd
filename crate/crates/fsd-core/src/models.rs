//! Autoregressive model backends.
//!
//! Markov table models are the workhorse: they are exact, immutable, and
//! small enough for the oracle module to enumerate sequence distributions
//! over them. `generate_pair` builds a (target, draft) pair whose
//! alignment is controlled by a single knob, standing in for the
//! draft/target alignment differences seen across real model pairs.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::prob::{ProbDist, TokenId};
use crate::rng::RngStream;
use crate::{Error, Result};

/// Provider of next-token distributions over a fixed vocabulary.
///
/// `next_dists(ctx, s)[j]` must equal `next_dist(&ctx[..s + j])`; the
/// final token of `ctx` is never conditioned on by the batched form.
pub trait ModelBackend {
    fn vocab_size(&self) -> usize;

    /// Next-token distribution after the full `context`.
    fn next_dist(&self, context: &[TokenId]) -> Result<ProbDist>;

    /// Distributions after each prefix of `context` with length in
    /// `[start, context.len())`. Empty when `start == context.len()`.
    fn next_dists(&self, context: &[TokenId], start: usize) -> Result<Vec<ProbDist>> {
        (start..context.len())
            .map(|end| self.next_dist(&context[..end]))
            .collect()
    }

    fn max_context_length(&self) -> Option<usize> {
        None
    }
}

/// Exact Markov model of bounded order backed by a context table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableModel {
    vocab_size: usize,
    order: usize,
    table: BTreeMap<Vec<TokenId>, ProbDist>,
    default_dist: ProbDist,
}

impl TableModel {
    pub fn new(
        vocab_size: usize,
        order: usize,
        table: BTreeMap<Vec<TokenId>, ProbDist>,
        default_dist: ProbDist,
    ) -> Result<Self> {
        if default_dist.vocab_size() != vocab_size {
            return Err(Error::VocabMismatch {
                left: vocab_size,
                right: default_dist.vocab_size(),
            });
        }
        for (ctx, dist) in &table {
            if dist.vocab_size() != vocab_size {
                return Err(Error::VocabMismatch {
                    left: vocab_size,
                    right: dist.vocab_size(),
                });
            }
            for &t in ctx {
                if t.index() >= vocab_size {
                    return Err(Error::TokenOutOfRange {
                        token: t.0,
                        vocab_size,
                    });
                }
            }
        }
        Ok(TableModel {
            vocab_size,
            order,
            table,
            default_dist,
        })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn default_dist(&self) -> &ProbDist {
        &self.default_dist
    }

    pub fn table(&self) -> &BTreeMap<Vec<TokenId>, ProbDist> {
        &self.table
    }

    /// Longest-suffix lookup: the longest suffix of `context` of length at
    /// most `order` present in the table, falling back to the default.
    pub fn lookup(&self, context: &[TokenId]) -> Result<&ProbDist> {
        for &t in context {
            if t.index() >= self.vocab_size {
                return Err(Error::TokenOutOfRange {
                    token: t.0,
                    vocab_size: self.vocab_size,
                });
            }
        }
        let max_len = self.order.min(context.len());
        for k in (0..=max_len).rev() {
            if let Some(dist) = self.table.get(&context[context.len() - k..]) {
                return Ok(dist);
            }
        }
        Ok(&self.default_dist)
    }
}

impl ModelBackend for TableModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_dist(&self, context: &[TokenId]) -> Result<ProbDist> {
        self.lookup(context).map(Clone::clone)
    }
}

/// Specification of a seeded synthetic (target, draft) table-model pair.
///
/// `alpha` in `[0, 1]` mixes the draft toward the target: 1 yields an
/// identical pair, 0 a draft built purely from independent noise. The
/// noise distribution is sharpened by `noise_temperature` before mixing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticPairSpec {
    pub seed: u64,
    pub vocab_size: usize,
    pub order: usize,
    pub alpha: f64,
    pub noise_temperature: f64,
}

fn all_contexts(vocab_size: usize, max_len: usize) -> Vec<Vec<TokenId>> {
    let mut out = Vec::new();
    let mut frontier: Vec<Vec<TokenId>> = alloc::vec![Vec::new()];
    out.push(Vec::new());
    for _ in 0..max_len {
        let mut next = Vec::new();
        for ctx in &frontier {
            for t in 0..vocab_size {
                let mut c = ctx.clone();
                c.push(TokenId(t as u32));
                out.push(c.clone());
                next.push(c);
            }
        }
        frontier = next;
    }
    out
}

/// Builds a deterministic (target, draft) pair from the spec. Every
/// context of length up to `order` gets a table entry; the draft entry is
/// `alpha * target + (1 - alpha) * noise` with seeded, tempered noise.
pub fn generate_pair(spec: &SyntheticPairSpec) -> Result<(TableModel, TableModel)> {
    if !(0.0..=1.0).contains(&spec.alpha) {
        return Err(Error::Backend {
            block: 0,
            message: "alpha outside [0, 1]".to_string(),
        });
    }
    let root = RngStream::new(spec.seed);
    let mut target_rng = root.derive(1);
    let mut noise_rng = root.derive(2);

    let mut target_table = BTreeMap::new();
    let mut draft_table = BTreeMap::new();
    // Contexts are enumerated in a fixed order so draws line up run to run.
    for ctx in all_contexts(spec.vocab_size, spec.order) {
        let target_weights: Vec<f64> = (0..spec.vocab_size)
            .map(|_| 0.05 + target_rng.next_f64())
            .collect();
        let target_dist = ProbDist::normalize(&target_weights)?;

        let noise_weights: Vec<f64> = (0..spec.vocab_size)
            .map(|_| 0.05 + noise_rng.next_f64())
            .collect();
        let noise_dist =
            ProbDist::normalize(&noise_weights)?.apply_temperature(spec.noise_temperature)?;

        let draft_dist = if spec.alpha == 1.0 {
            target_dist.clone()
        } else {
            let draft_probs: Vec<f64> = target_dist
                .probs()
                .iter()
                .zip(noise_dist.probs())
                .map(|(&t, &n)| spec.alpha * t + (1.0 - spec.alpha) * n)
                .collect();
            ProbDist::normalize(&draft_probs)?
        };

        draft_table.insert(ctx.clone(), draft_dist);
        target_table.insert(ctx, target_dist);
    }

    let target_default = target_table.get(&Vec::new() as &Vec<TokenId>).unwrap().clone();
    let draft_default = draft_table.get(&Vec::new() as &Vec<TokenId>).unwrap().clone();
    Ok((
        TableModel::new(spec.vocab_size, spec.order, target_table, target_default)?,
        TableModel::new(spec.vocab_size, spec.order, draft_table, draft_default)?,
    ))
}

/// Mean JS divergence between target and draft over all table contexts.
pub fn mean_context_js(target: &TableModel, draft: &TableModel) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (ctx, t_dist) in target.table() {
        let d_dist = draft.lookup(ctx)?;
        sum += crate::divergence::js(t_dist, d_dist)?;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}
