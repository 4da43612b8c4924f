//! Linear opinion pool over agent beliefs, agent weighting schemes, and
//! margin-based robustness diagnostics for the pooled winner.

use std::borrow::Borrow;

use serde::Serialize;
use thiserror::Error;

use crate::domain::{Distribution, DomainError, WeightVector, Weighting, SUM_TOLERANCE};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoolError {
    #[error("{beliefs} beliefs but {weights} weights")]
    ArityMismatch { beliefs: usize, weights: usize },
    #[error("no agents to pool")]
    ZeroAgents,
    #[error("beliefs disagree on the label space size ({0} vs {1})")]
    LabelSpaceMismatch(usize, usize),
    #[error("lambda must be a finite non-negative number, got {0}")]
    InvalidLambda(f64),
    #[error("perturbation radius {0} is negative or not finite")]
    InvalidEpsilon(f64),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

/// Pooled belief for one record and round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SocialBelief {
    pub dist: Distribution,
    pub round: usize,
    pub weighting: Weighting,
    pub weights_used: WeightVector,
}

/// `P(y) = Σ_i w_i · π_i(y)`.
pub fn linear_pool<D: Borrow<Distribution>>(beliefs: &[D], weights: &WeightVector) -> Result<Distribution, PoolError> {
    if beliefs.len() != weights.len() {
        return Err(PoolError::ArityMismatch { beliefs: beliefs.len(), weights: weights.len() });
    }
    let first = beliefs.first().ok_or(PoolError::ZeroAgents)?.borrow();
    let k = first.len();
    let mut pooled = vec![0.0; k];
    for (belief, &w) in beliefs.iter().zip(weights.weights()) {
        let belief = belief.borrow();
        if belief.len() != k {
            return Err(PoolError::LabelSpaceMismatch(k, belief.len()));
        }
        for (acc, &p) in pooled.iter_mut().zip(belief.probs()) {
            *acc += w * p;
        }
    }
    // Inputs may each sit at the edge of the tolerance; only then is the sum rescaled.
    let sum: f64 = pooled.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        pooled.iter_mut().for_each(|p| *p /= sum);
    }
    Ok(Distribution::validate(pooled, k)?)
}

pub fn uniform_weights(n: usize) -> Result<WeightVector, PoolError> {
    if n == 0 {
        return Err(PoolError::ZeroAgents);
    }
    Ok(WeightVector::from_unnormalized(vec![1.0 / n as f64; n], 1.0))
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn shannon_entropy(dist: &Distribution) -> f64 {
    -dist.probs().iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// Weights `w_i ∝ exp(-λ H(π_i))`: lower-entropy (more confident) agents count more.
pub fn entropy_weights<D: Borrow<Distribution>>(beliefs: &[D], lambda: f64) -> Result<WeightVector, PoolError> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(PoolError::InvalidLambda(lambda));
    }
    if beliefs.is_empty() {
        return Err(PoolError::ZeroAgents);
    }
    let entropies: Vec<f64> = beliefs.iter().map(|b| shannon_entropy(b.borrow())).collect();
    let h_min = entropies.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = entropies.iter().map(|h| (-lambda * (h - h_min)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    Ok(WeightVector::from_unnormalized(raw, sum))
}

pub fn weights_for<D: Borrow<Distribution>>(beliefs: &[D], weighting: Weighting) -> Result<WeightVector, PoolError> {
    match weighting {
        Weighting::Uniform => uniform_weights(beliefs.len()),
        Weighting::Entropy { lambda } => entropy_weights(beliefs, lambda),
    }
}

/// Pools one round of beliefs under the given weighting scheme.
pub fn social_belief<D: Borrow<Distribution>>(
    beliefs: &[D],
    round: usize,
    weighting: Weighting,
) -> Result<SocialBelief, PoolError> {
    let weights = weights_for(beliefs, weighting)?;
    let dist = linear_pool(beliefs, &weights)?;
    Ok(SocialBelief { dist, round, weighting, weights_used: weights })
}

/// Top-1 minus top-2 probability.
pub fn margin(dist: &Distribution) -> f64 {
    let (p1, p2) = dist.top_two();
    p1 - p2
}

/// Sufficient condition for the pooled winner to survive agent perturbations
/// bounded by `eps[i]` in sup-norm: `Δ > 2 Σ_i w_i ε_i`.
///
/// `false` does not mean the winner can flip.
pub fn winner_stable(dist: &Distribution, weights: &WeightVector, eps: &[f64]) -> Result<bool, PoolError> {
    if eps.len() != weights.len() {
        return Err(PoolError::ArityMismatch { beliefs: eps.len(), weights: weights.len() });
    }
    if let Some(&e) = eps.iter().find(|e| !(**e >= 0.0 && e.is_finite())) {
        return Err(PoolError::InvalidEpsilon(e));
    }
    Ok(margin(dist) > 2.0 * perturbation_bound(weights, eps))
}

/// `Σ_i w_i ε_i`, the sup-norm bound on how far the pool can move.
pub fn perturbation_bound(weights: &WeightVector, eps: &[f64]) -> f64 {
    weights.weights().iter().zip(eps).map(|(w, e)| w * e).sum()
}
