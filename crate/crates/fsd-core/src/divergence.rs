//! KL, Jensen-Shannon, and total-variation divergences between two
//! categorical distributions, and the threshold test used by fuzzy
//! acceptance.
//!
//! All values are in nats. No epsilon smoothing is applied: KL with a
//! zero-probability denominator on the support of `p` is `+inf`, and the
//! strict threshold test then rejects. Terms with `p[t] = 0` contribute 0
//! by continuity.

use crate::prob::ProbDist;
use crate::Result;

/// Which divergence drives the fuzzy acceptance test.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DivergenceKind {
    Kl,
    Js,
    Tv,
}

impl DivergenceKind {
    pub fn evaluate(self, p: &ProbDist, q: &ProbDist) -> Result<f64> {
        match self {
            DivergenceKind::Kl => kl(p, q),
            DivergenceKind::Js => js(p, q),
            DivergenceKind::Tv => tv(p, q),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DivergenceKind::Kl => "kl",
            DivergenceKind::Js => "js",
            DivergenceKind::Tv => "tv",
        }
    }
}

fn ln(x: f64) -> f64 {
    libm::log(x)
}

/// `KL(p ‖ q) = Σ_t p[t]·ln(p[t]/q[t])` over `t` with `p[t] > 0`.
/// Returns `+inf` if some `t` has `p[t] > 0` and `q[t] = 0`.
pub fn kl(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    p.check_same_vocab(q)?;
    let mut sum = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        if pi > 0.0 {
            if qi == 0.0 {
                return Ok(f64::INFINITY);
            }
            sum += pi * ln(pi / qi);
        }
    }
    Ok(sum.max(0.0))
}

/// Jensen-Shannon divergence: `½·KL(p‖m) + ½·KL(q‖m)` with `m = (p+q)/2`.
/// Always finite; symmetric; at most `ln 2`.
pub fn js(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    p.check_same_vocab(q)?;
    let mut sum = 0.0;
    for (&pi, &qi) in p.probs().iter().zip(q.probs()) {
        let m = 0.5 * (pi + qi);
        let a = if pi > 0.0 { 0.5 * pi * ln(pi / m) } else { 0.0 };
        let b = if qi > 0.0 { 0.5 * qi * ln(qi / m) } else { 0.0 };
        // One term per index keeps js(p, q) bitwise symmetric.
        sum += a + b;
    }
    Ok(sum.max(0.0))
}

/// Total variation distance: `½·Σ_t |p[t] − q[t]|`.
pub fn tv(p: &ProbDist, q: &ProbDist) -> Result<f64> {
    p.check_same_vocab(q)?;
    let sum: f64 = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&pi, &qi)| libm::fabs(pi - qi))
        .sum();
    Ok(0.5 * sum)
}

/// The fuzzy acceptance test: true iff `Div(p, q) < threshold`, strict.
/// `+inf` is never below any threshold, and nothing is below `0`.
pub fn below_threshold(
    kind: DivergenceKind,
    p: &ProbDist,
    q: &ProbDist,
    threshold: f64,
) -> Result<bool> {
    Ok(kind.evaluate(p, q)? < threshold)
}
