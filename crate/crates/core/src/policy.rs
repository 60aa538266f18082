//! Policies over a finite action set and importance-weight arithmetic.
//!
//! A [`Distribution`] is a dense probability vector. It houses action
//! distributions `pi(a|x)`, embedding distributions `p(e|x,a)`, their
//! policy-induced marginals `p(e|x,pi)`, and action posteriors
//! `pi0(a|x,e)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stats::kahan_sum;

/// Tolerance on `sum(probs) == 1`.
pub const SUM_TOLERANCE: f64 = 1e-9;

/// Probabilities below this are clamped to zero by [`softmax_policy`].
const DENORMAL_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Distribution {
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidDistribution(
                "empty probability vector".into(),
            ));
        }
        if let Some((i, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0)
        {
            return Err(Error::InvalidDistribution(format!(
                "entry {i} is {p}, expected a finite non-negative value"
            )));
        }
        let total = kahan_sum(probs.iter().copied());
        if (total - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {total}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let total = kahan_sum(weights.iter().copied());
        if !total.is_finite() || total <= 0.0 {
            return Err(Error::InvalidDistribution(format!(
                "weights sum to {total}, cannot normalize"
            )));
        }
        Self::new(weights.into_iter().map(|w| w / total).collect())
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0, "uniform distribution needs at least one outcome");
        Self {
            probs: vec![1.0 / len as f64; len],
        }
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        assert!(index < len);
        let mut probs = vec![0.0; len];
        probs[index] = 1.0;
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob(&self, index: usize) -> f64 {
        self.probs[index]
    }

    /// Expectation of `values` under this distribution.
    pub fn expect(&self, values: &[f64]) -> f64 {
        debug_assert_eq!(values.len(), self.probs.len());
        kahan_sum(self.probs.iter().zip(values).map(|(p, v)| p * v))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.probs
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.probs, rng)
    }
}

impl TryFrom<Vec<f64>> for Distribution {
    type Error = Error;

    fn try_from(probs: Vec<f64>) -> Result<Self> {
        Self::new(probs)
    }
}

impl From<Distribution> for Vec<f64> {
    fn from(d: Distribution) -> Self {
        d.probs
    }
}

/// A stochastic policy `pi(.|x)` over a finite action set.
pub trait Policy: Sync {
    fn num_actions(&self) -> usize;

    fn distribution(&self, context: &[f64]) -> Result<Distribution>;
}

/// Softmax of `beta * scores` with max-subtraction.
///
/// Probabilities below `1e-300` are set to zero and the remainder
/// renormalized, so downstream propensities are never denormal.
pub fn softmax_policy(scores: &[f64], beta: f64) -> Result<Distribution> {
    if let Some((index, &value)) = scores.iter().enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFiniteScore { index, value });
    }
    if !beta.is_finite() {
        return Err(Error::OutOfRange {
            name: "beta",
            value: beta,
            range: "finite reals",
        });
    }
    let scaled: Vec<f64> = scores.iter().map(|s| beta * s).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
    let total = kahan_sum(exps.iter().copied());
    let mut clamped = false;
    for e in exps.iter_mut() {
        *e /= total;
        if *e < DENORMAL_FLOOR {
            *e = 0.0;
            clamped = true;
        }
    }
    if clamped {
        return Distribution::from_weights(exps);
    }
    Distribution::new(exps)
}

/// Draws an index from a probability vector by inversion. Rounding slack
/// at the top end falls back to the last index with positive mass, so a
/// zero-probability index is never returned.
pub fn sample_categorical<R: rand::Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last_positive = i;
            if u < cum {
                return i;
            }
        }
    }
    last_positive
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `(1 - eps) * 1{a = argmax q} + eps / |A|`.
pub fn epsilon_greedy_policy(q_values: &[f64], epsilon: f64) -> Result<Distribution> {
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::OutOfRange {
            name: "epsilon",
            value: epsilon,
            range: "[0, 1]",
        });
    }
    if q_values.is_empty() {
        return Err(Error::InvalidDistribution("no actions".into()));
    }
    if let Some((index, &value)) = q_values.iter().enumerate().find(|(_, s)| !s.is_finite()) {
        return Err(Error::NonFiniteScore { index, value });
    }
    let k = q_values.len();
    let best = argmax(q_values);
    let floor = epsilon / k as f64;
    let mut probs = vec![floor; k];
    probs[best] += 1.0 - epsilon;
    Distribution::new(probs)
}

/// Vanilla importance weight `pi(a|x) / pi0(a|x)`.
pub fn vanilla_weight(target: &Distribution, logging: &Distribution, action: usize) -> Result<f64> {
    let p0 = logging.prob(action);
    if p0 <= 0.0 {
        return Err(Error::ZeroPropensity { action });
    }
    Ok(target.prob(action) / p0)
}

/// Marginal distribution over embeddings induced by an action distribution:
/// `p(e|x,pi) = sum_a pi(a|x) p(e|x,a)`.
pub fn embedding_marginal(
    policy: &Distribution,
    embed_model: &[Distribution],
) -> Result<Distribution> {
    check_embed_model(policy, embed_model)?;
    let num_embeddings = embed_model[0].len();
    let probs = (0..num_embeddings)
        .map(|e| {
            kahan_sum(
                policy
                    .probs()
                    .iter()
                    .zip(embed_model)
                    .map(|(p, m)| p * m.prob(e)),
            )
        })
        .collect();
    Distribution::new(probs)
}

fn check_embed_model(policy: &Distribution, embed_model: &[Distribution]) -> Result<()> {
    if embed_model.len() != policy.len() {
        return Err(Error::InvalidInput(format!(
            "embedding model has {} actions, policy has {}",
            embed_model.len(),
            policy.len()
        )));
    }
    let width = embed_model[0].len();
    if embed_model.iter().any(|m| m.len() != width) {
        return Err(Error::InvalidInput(
            "embedding distributions have inconsistent support sizes".into(),
        ));
    }
    Ok(())
}

/// Marginal importance weight `p(e|x,pi) / p(e|x,pi0)`, both marginals
/// computed by exact summation over the action set.
pub fn marginal_weight_true(
    target: &Distribution,
    logging: &Distribution,
    embed_model: &[Distribution],
    embedding: usize,
) -> Result<f64> {
    check_embed_model(target, embed_model)?;
    check_embed_model(logging, embed_model)?;
    if embedding >= embed_model[0].len() {
        return Err(Error::InvalidInput(format!(
            "embedding {embedding} outside support of size {}",
            embed_model[0].len()
        )));
    }
    let likelihood: Vec<f64> = embed_model.iter().map(|m| m.prob(embedding)).collect();
    marginal_weight_from_likelihood(target.probs(), logging.probs(), &likelihood)
        .map_err(|_| Error::DeficientEmbeddingSupport { embedding })
}

/// `sum_a pi(a) l(a) / sum_a pi0(a) l(a)` where `l(a) = p(e|x,a)` for the
/// observed embedding.
pub fn marginal_weight_from_likelihood(
    target: &[f64],
    logging: &[f64],
    likelihood: &[f64],
) -> Result<f64> {
    let num = kahan_sum(target.iter().zip(likelihood).map(|(p, l)| p * l));
    let den = kahan_sum(logging.iter().zip(likelihood).map(|(p, l)| p * l));
    if den <= 0.0 {
        return Err(Error::DeficientEmbeddingSupport {
            embedding: usize::MAX,
        });
    }
    Ok(num / den)
}

/// Action posterior `pi0(a|x,e) = p(e|x,a) pi0(a|x) / p(e|x,pi0)` by Bayes rule.
pub fn action_posterior(
    logging: &Distribution,
    embed_model: &[Distribution],
    embedding: usize,
) -> Result<Distribution> {
    check_embed_model(logging, embed_model)?;
    let joint: Vec<f64> = logging
        .probs()
        .iter()
        .zip(embed_model)
        .map(|(p, m)| p * m.prob(embedding))
        .collect();
    if kahan_sum(joint.iter().copied()) <= 0.0 {
        return Err(Error::DeficientEmbeddingSupport { embedding });
    }
    Distribution::from_weights(joint)
}

/// Context-independent factorized embedding model
/// `p(e|a) = prod_k p(e_k|a)` over categorical dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedEmbedModel {
    cardinalities: Vec<usize>,
    /// `[a][k]` distribution over the categories of dimension `k`.
    probs: Vec<Vec<Distribution>>,
}

impl FactorizedEmbedModel {
    pub fn new(probs: Vec<Vec<Distribution>>) -> Result<Self> {
        let first = probs.first().ok_or_else(|| {
            Error::InvalidInput("embedding model needs at least one action".into())
        })?;
        let cardinalities: Vec<usize> = first.iter().map(Distribution::len).collect();
        for (a, dims) in probs.iter().enumerate() {
            let card: Vec<usize> = dims.iter().map(Distribution::len).collect();
            if card != cardinalities {
                return Err(Error::InvalidInput(format!(
                    "action {a} has cardinalities {card:?}, expected {cardinalities:?}"
                )));
            }
        }
        Ok(Self {
            cardinalities,
            probs,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.probs.len()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cardinalities
    }

    /// `p(e_k = . | a)`.
    pub fn dim(&self, action: usize, dim: usize) -> &Distribution {
        &self.probs[action][dim]
    }

    /// `prod_{k in dims} p(e_k | a)` for every action.
    pub fn likelihood(&self, embedding: &[usize], dims: &[usize]) -> Vec<f64> {
        self.probs
            .iter()
            .map(|per_dim| {
                dims.iter()
                    .map(|&k| per_dim[k].prob(embedding[k]))
                    .product()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new(p.to_vec()).unwrap()
    }

    /// The three-action, three-embedding toy instance with one context.
    fn toy() -> (Distribution, Distribution, Vec<Distribution>) {
        let logging = dist(&[0.0, 0.2, 0.8]);
        let target = dist(&[0.2, 0.8, 0.0]);
        let embed = vec![
            dist(&[0.25, 0.25, 0.5]),
            dist(&[0.5, 0.25, 0.25]),
            dist(&[0.25, 0.5, 0.25]),
        ];
        (target, logging, embed)
    }

    #[test]
    fn distribution_validation() {
        assert!(Distribution::new(vec![]).is_err());
        assert!(Distribution::new(vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![-0.1, 1.1]).is_err());
        assert!(Distribution::new(vec![f64::NAN, 1.0]).is_err());
        assert!(Distribution::new(vec![0.5, 0.5 + 5e-10]).is_ok());
    }

    #[test]
    fn softmax_examples() {
        let d = softmax_policy(&[1.0, 2.0, 3.0], 0.0).unwrap();
        for p in d.probs() {
            assert_relative_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let d = softmax_policy(&[0.0, 0.0], 5.0).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5]);

        let e1 = 1.0_f64.exp();
        let e2 = 2.0_f64.exp();
        let d = softmax_policy(&[1.0, 2.0], 1.0).unwrap();
        assert_relative_eq!(d.prob(0), e1 / (e1 + e2), epsilon = 1e-15);
        assert_relative_eq!(d.prob(1), e2 / (e1 + e2), epsilon = 1e-15);
    }

    #[test]
    fn softmax_rejects_non_finite_and_clamps_tiny() {
        assert!(matches!(
            softmax_policy(&[1.0, f64::INFINITY], 1.0),
            Err(Error::NonFiniteScore { index: 1, .. })
        ));
        let d = softmax_policy(&[0.0, -800.0, 0.0], 1.0).unwrap();
        assert_eq!(d.prob(1), 0.0);
        assert_eq!(d.prob(0), 0.5);
    }

    #[test]
    fn epsilon_greedy_examples() {
        let q = [1.0, 3.0, 2.0];
        assert_eq!(
            epsilon_greedy_policy(&q, 0.0).unwrap().probs(),
            &[0.0, 1.0, 0.0]
        );
        for p in epsilon_greedy_policy(&q, 1.0).unwrap().probs() {
            assert_relative_eq!(*p, 1.0 / 3.0, epsilon = 1e-15);
        }
        let d = epsilon_greedy_policy(&q, 0.3).unwrap();
        assert_relative_eq!(d.prob(0), 0.1, epsilon = 1e-15);
        assert_relative_eq!(d.prob(1), 0.8, epsilon = 1e-15);
        assert_relative_eq!(d.prob(2), 0.1, epsilon = 1e-15);
        assert!(epsilon_greedy_policy(&q, 1.5).is_err());
        assert!(epsilon_greedy_policy(&q, -0.1).is_err());
    }

    #[test]
    fn argmax_ties_go_to_lowest_index() {
        assert_eq!(argmax(&[2.0, 5.0, 5.0, 1.0]), 1);
        let d = epsilon_greedy_policy(&[4.0, 4.0], 0.0).unwrap();
        assert_eq!(d.probs(), &[1.0, 0.0]);
    }

    #[test]
    fn vanilla_weight_examples() {
        let (target, logging, _) = toy();
        assert_relative_eq!(
            vanilla_weight(&target, &logging, 1).unwrap(),
            4.0,
            epsilon = 1e-15
        );
        assert_eq!(vanilla_weight(&target, &logging, 2).unwrap(), 0.0);
        assert!(matches!(
            vanilla_weight(&target, &logging, 0),
            Err(Error::ZeroPropensity { action: 0 })
        ));
        for a in 1..3 {
            assert_eq!(vanilla_weight(&logging, &logging, a).unwrap(), 1.0);
        }
    }

    #[test]
    fn marginal_weight_examples() {
        let (target, logging, embed) = toy();
        let w: Vec<f64> = (0..3)
            .map(|e| marginal_weight_true(&target, &logging, &embed, e).unwrap())
            .collect();
        assert_relative_eq!(w[0], 1.5, epsilon = 1e-12);
        assert_relative_eq!(w[1], 0.25 / 0.45, epsilon = 1e-12);
        assert_relative_eq!(w[2], 1.2, epsilon = 1e-12);
        assert!(w[0] < 4.0);
        for e in 0..3 {
            assert_relative_eq!(
                marginal_weight_true(&logging, &logging, &embed, e).unwrap(),
                1.0,
                epsilon = 1e-15
            );
        }
    }

    #[test]
    fn marginal_weight_flags_deficient_embedding() {
        let logging = dist(&[1.0, 0.0]);
        let target = dist(&[0.0, 1.0]);
        let embed = vec![dist(&[1.0, 0.0]), dist(&[0.0, 1.0])];
        assert!(matches!(
            marginal_weight_true(&target, &logging, &embed, 1),
            Err(Error::DeficientEmbeddingSupport { embedding: 1 })
        ));
    }
}
