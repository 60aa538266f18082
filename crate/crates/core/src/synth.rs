//! Synthetic bandit environments with factorized categorical action
//! embeddings.
//!
//! Each action `a` induces independent categorical distributions over the
//! `d_e` embedding dimensions, `p(e_k = v | a) = softmax(alpha[a, k, .])_v`.
//! The expected reward depends on the action only through its embedding:
//!
//! ```text
//! q(x, e) = sum_k eta_k * (x' M x_{e_k} + theta_x' x + theta_e' x_{e_k})
//! ```
//!
//! where `x_{e_k}` is a latent vector attached to category `e_k` of
//! dimension `k`. Since the reward is additive over dimensions and the
//! embedding distribution factorizes, `q(x, a) = E_{p(e|a)}[q(x, e)]` is
//! computed in closed form without enumerating the embedding product space.
//!
//! The logging policy is a softmax over `q(x, .)` with inverse temperature
//! `beta`, with a global set of deficient actions zeroed out. The target
//! policy is epsilon-greedy over `q(x, .)`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LoggedDataset, LoggedRecord, PolicyProbs};
use crate::error::{Error, Result};
use crate::policy::{
    argmax, epsilon_greedy_policy, sample_categorical, softmax_policy, Distribution,
    FactorizedEmbedModel, Policy,
};
use crate::rng::{stream_rng, Rng, Stream};
use crate::stats::kahan_sum;

/// Contexts processed per matrix product when scoring many contexts.
const BATCH: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_actions: usize,
    pub context_dim: usize,
    pub embed_dims: usize,
    /// Cardinality of every embedding dimension.
    pub embed_cardinality: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub reward_noise: f64,
    pub num_deficient_actions: usize,
    /// Dimensions present in the data but hidden from estimators.
    pub withheld_dims: Vec<usize>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_actions: 1000,
            context_dim: 10,
            embed_dims: 3,
            embed_cardinality: 10,
            beta: -1.0,
            epsilon: 0.05,
            reward_noise: 2.5,
            num_deficient_actions: 0,
            withheld_dims: Vec::new(),
            seed: 12345,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_actions < 2 {
            return Err(Error::Config("num_actions must be at least 2".into()));
        }
        if self.context_dim == 0 {
            return Err(Error::Config("context_dim must be at least 1".into()));
        }
        if self.embed_dims == 0 {
            return Err(Error::Config("embed_dims must be at least 1".into()));
        }
        if self.embed_cardinality == 0 {
            return Err(Error::Config("embed_cardinality must be at least 1".into()));
        }
        if !self.beta.is_finite() {
            return Err(Error::Config(format!(
                "beta must be finite, got {}",
                self.beta
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!(
                "epsilon must lie in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.reward_noise.is_finite() && self.reward_noise >= 0.0) {
            return Err(Error::Config(format!(
                "reward_noise must be finite and non-negative, got {}",
                self.reward_noise
            )));
        }
        if self.num_deficient_actions >= self.num_actions {
            return Err(Error::Config(format!(
                "num_deficient_actions ({}) must be below num_actions ({})",
                self.num_deficient_actions, self.num_actions
            )));
        }
        if let Some(k) = self.withheld_dims.iter().find(|&&k| k >= self.embed_dims) {
            return Err(Error::Config(format!(
                "withheld dim {k} outside [0, {})",
                self.embed_dims
            )));
        }
        Ok(())
    }

    /// Withholds the last `count` embedding dimensions.
    pub fn withhold_last(&mut self, count: usize) -> Result<()> {
        if count >= self.embed_dims {
            return Err(Error::Config(format!(
                "cannot withhold {count} of {} embedding dims",
                self.embed_dims
            )));
        }
        self.withheld_dims = (self.embed_dims - count..self.embed_dims).collect();
        Ok(())
    }

    pub fn visible_dims(&self) -> Vec<usize> {
        (0..self.embed_dims)
            .filter(|k| !self.withheld_dims.contains(k))
            .collect()
    }
}

/// Frozen environment parameters. Identical configurations produce
/// bit-identical environments.
#[derive(Debug, Clone)]
pub struct SyntheticEnvironment {
    config: SyntheticConfig,
    /// `[a][k][v]` logits, flattened.
    alpha: Vec<f64>,
    /// `[a][k][v]` probabilities, flattened; row `a` of this matrix is the
    /// concatenation of the per-dimension distributions of action `a`.
    embed_probs: DMatrix<f64>,
    /// Row-major `d_x x d_x`.
    m: Vec<f64>,
    theta_x: Vec<f64>,
    theta_e: Vec<f64>,
    eta: Vec<f64>,
    /// `[k][v][j]` latent vectors, flattened.
    latent: Vec<f64>,
    deficient: Vec<bool>,
}

/// Context-dependent pieces of the reward model shared by all actions.
struct ContextTerms {
    /// `theta_x' x`.
    base: f64,
    /// `(M' x + theta_e)' x_{k,v}` at `[k * C + v]`.
    s: Vec<f64>,
}

impl SyntheticEnvironment {
    pub fn config(&self) -> &SyntheticConfig {
        &self.config
    }

    pub fn num_actions(&self) -> usize {
        self.config.num_actions
    }

    pub fn context_dim(&self) -> usize {
        self.config.context_dim
    }

    pub fn embed_dims(&self) -> usize {
        self.config.embed_dims
    }

    pub fn cardinality(&self) -> usize {
        self.config.embed_cardinality
    }

    pub fn alpha(&self, action: usize, dim: usize) -> &[f64] {
        let c = self.cardinality();
        let start = (action * self.embed_dims() + dim) * c;
        &self.alpha[start..start + c]
    }

    pub fn m_matrix(&self) -> &[f64] {
        &self.m
    }

    pub fn theta_x(&self) -> &[f64] {
        &self.theta_x
    }

    pub fn theta_e(&self) -> &[f64] {
        &self.theta_e
    }

    pub fn eta(&self) -> &[f64] {
        &self.eta
    }

    /// Latent vector `x_{k,v}`.
    pub fn latent(&self, dim: usize, category: usize) -> &[f64] {
        let dx = self.context_dim();
        let start = (dim * self.cardinality() + category) * dx;
        &self.latent[start..start + dx]
    }

    pub fn deficient_actions(&self) -> Vec<usize> {
        (0..self.num_actions())
            .filter(|&a| self.deficient[a])
            .collect()
    }

    pub fn is_deficient(&self, action: usize) -> bool {
        self.deficient[action]
    }

    /// `p(e_k = v | a)` for `v` in `[0, |E_k|)`.
    pub fn embed_probs(&self, action: usize, dim: usize) -> Vec<f64> {
        let c = self.cardinality();
        (0..c)
            .map(|v| self.embed_probs[(action, dim * c + v)])
            .collect()
    }

    pub fn embed_prob(&self, action: usize, dim: usize, category: usize) -> f64 {
        self.embed_probs[(action, dim * self.cardinality() + category)]
    }

    /// Per-dimension embedding distributions of `action`.
    pub fn embed_distribution(&self, action: usize) -> Result<Vec<Distribution>> {
        (0..self.embed_dims())
            .map(|k| Distribution::new(self.embed_probs(action, k)))
            .collect()
    }

    pub fn embed_model(&self) -> Result<FactorizedEmbedModel> {
        let probs = (0..self.num_actions())
            .map(|a| self.embed_distribution(a))
            .collect::<Result<Vec<_>>>()?;
        FactorizedEmbedModel::new(probs)
    }

    /// Probability of the embedding restricted to `dims` for every action:
    /// `prod_{k in dims} p(e_k | a)`.
    pub fn embedding_likelihood(&self, embedding: &[usize], dims: &[usize]) -> Vec<f64> {
        let c = self.cardinality();
        (0..self.num_actions())
            .map(|a| {
                dims.iter()
                    .map(|&k| self.embed_probs[(a, k * c + embedding[k])])
                    .product()
            })
            .collect()
    }

    fn context_terms(&self, x: &[f64]) -> ContextTerms {
        let dx = self.context_dim();
        // u = M' x + theta_e
        let mut u = self.theta_e.clone();
        for (i, xi) in x.iter().enumerate() {
            let row = &self.m[i * dx..(i + 1) * dx];
            for (uj, mij) in u.iter_mut().zip(row) {
                *uj += xi * mij;
            }
        }
        let s = self
            .latent
            .chunks_exact(dx)
            .map(|lat| lat.iter().zip(&u).map(|(l, u)| l * u).sum())
            .collect();
        ContextTerms {
            base: self.theta_x.iter().zip(x).map(|(t, x)| t * x).sum(),
            s,
        }
    }

    /// Expected reward `q(x, e)` for a full embedding vector.
    pub fn q_xe(&self, x: &[f64], embedding: &[usize]) -> f64 {
        let t = self.context_terms(x);
        let c = self.cardinality();
        self.eta
            .iter()
            .enumerate()
            .map(|(k, eta)| eta * (t.base + t.s[k * c + embedding[k]]))
            .sum()
    }

    /// Expected reward `q(x, a) = E_{p(e|a)}[q(x, e)]`.
    pub fn q_xa(&self, x: &[f64], action: usize) -> f64 {
        self.q_all_actions(x)[action]
    }

    /// `q(x, a)` for every action.
    pub fn q_all_actions(&self, x: &[f64]) -> Vec<f64> {
        let q = self.q_batch(&[x]);
        q.column(0).iter().copied().collect()
    }

    /// `|A| x B` matrix of `q(x_b, a)`.
    fn q_batch(&self, xs: &[&[f64]]) -> DMatrix<f64> {
        let c = self.cardinality();
        let width = self.embed_dims() * c;
        let eta_sum: f64 = self.eta.iter().sum();
        let mut z = DMatrix::<f64>::zeros(width, xs.len());
        let mut base = Vec::with_capacity(xs.len());
        for (b, x) in xs.iter().enumerate() {
            let t = self.context_terms(x);
            for (j, s) in t.s.iter().enumerate() {
                z[(j, b)] = self.eta[j / c] * s;
            }
            base.push(t.base * eta_sum);
        }
        let mut q = &self.embed_probs * z;
        for (b, mut col) in q.column_iter_mut().enumerate() {
            col.add_scalar_mut(base[b]);
        }
        q
    }

    fn logging_from_q(&self, q: &[f64]) -> Result<Distribution> {
        let soft = softmax_policy(q, self.config.beta)?;
        if self.config.num_deficient_actions == 0 {
            return Ok(soft);
        }
        let mut probs = soft.into_inner();
        for (p, &d) in probs.iter_mut().zip(&self.deficient) {
            if d {
                *p = 0.0;
            }
        }
        Distribution::from_weights(probs)
    }

    fn target_from_q(&self, q: &[f64]) -> Result<Distribution> {
        epsilon_greedy_policy(q, self.config.epsilon)
    }

    pub fn logging_policy(&self, x: &[f64]) -> Result<Distribution> {
        self.logging_from_q(&self.q_all_actions(x))
    }

    pub fn target_policy(&self, x: &[f64]) -> Result<Distribution> {
        self.target_from_q(&self.q_all_actions(x))
    }

    pub fn logging(&self) -> LoggingPolicy<'_> {
        LoggingPolicy(self)
    }

    pub fn target(&self) -> TargetPolicy<'_> {
        TargetPolicy(self)
    }

    fn sample_context(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.context_dim())
            .map(|_| rng.sample(StandardNormal))
            .collect()
    }

    fn sample_embedding(&self, action: usize, rng: &mut Rng) -> Vec<usize> {
        let c = self.cardinality();
        let row = self.embed_probs.row(action);
        (0..self.embed_dims())
            .map(|k| {
                let probs: Vec<f64> = (0..c).map(|v| row[k * c + v]).collect();
                sample_categorical(&probs, rng)
            })
            .collect()
    }

    fn sample_records(
        &self,
        n: usize,
        on_policy: bool,
        rng: &mut Rng,
    ) -> Result<Vec<LoggedRecord>> {
        let contexts: Vec<Vec<f64>> = (0..n).map(|_| self.sample_context(rng)).collect();
        let sigma = self.config.reward_noise;
        let mut records = Vec::with_capacity(n);
        for chunk in contexts.chunks(BATCH) {
            let refs: Vec<&[f64]> = chunk.iter().map(Vec::as_slice).collect();
            let q = self.q_batch(&refs);
            for (b, x) in chunk.iter().enumerate() {
                let qx: Vec<f64> = q.column(b).iter().copied().collect();
                let policy = if on_policy {
                    self.target_from_q(&qx)?
                } else {
                    self.logging_from_q(&qx)?
                };
                let action = policy.sample(rng);
                let embedding = self.sample_embedding(action, rng);
                let noise: f64 = rng.sample(StandardNormal);
                let reward = self.q_xe(x, &embedding) + sigma * noise;
                records.push(LoggedRecord {
                    context: x.clone(),
                    action,
                    embedding,
                    reward,
                    logging_propensity: policy.prob(action),
                });
            }
        }
        Ok(records)
    }

    fn dataset(&self, records: Vec<LoggedRecord>) -> Result<LoggedDataset> {
        LoggedDataset::new(
            records,
            self.num_actions(),
            vec![self.cardinality(); self.embed_dims()],
        )?
        .with_hidden_dims(&self.config.withheld_dims)
    }

    /// Draws `n` logged records from the logging policy. Withheld dimensions
    /// stay in the records and are masked in the returned dataset.
    pub fn sample_logged_data(&self, n: usize, rng: &mut Rng) -> Result<LoggedDataset> {
        if n == 0 {
            return Err(Error::InvalidInput("n must be at least 1".into()));
        }
        let records = self.sample_records(n, false, rng)?;
        self.dataset(records)
    }

    /// Draws `n` records from the target policy; `logging_propensity` holds
    /// the target's probability of the chosen action.
    pub fn sample_on_policy(&self, n: usize, rng: &mut Rng) -> Result<LoggedDataset> {
        if n == 0 {
            return Err(Error::InvalidInput("n must be at least 1".into()));
        }
        let records = self.sample_records(n, true, rng)?;
        self.dataset(records)
    }

    /// Target and logging action distributions at every record's context.
    pub fn policy_probs(&self, data: &LoggedDataset) -> Result<(PolicyProbs, PolicyProbs)> {
        let a = self.num_actions();
        let mut target = Vec::with_capacity(data.len() * a);
        let mut logging = Vec::with_capacity(data.len() * a);
        for chunk in data.records().chunks(BATCH) {
            let refs: Vec<&[f64]> = chunk.iter().map(|r| r.context.as_slice()).collect();
            let q = self.q_batch(&refs);
            for b in 0..chunk.len() {
                let qx: Vec<f64> = q.column(b).iter().copied().collect();
                target.extend(self.target_from_q(&qx)?.into_inner());
                logging.extend(self.logging_from_q(&qx)?.into_inner());
            }
        }
        Ok((PolicyProbs::new(a, target)?, PolicyProbs::new(a, logging)?))
    }

    /// Exact marginal importance weights `p(e_S|x,pi)/p(e_S|x,pi0)` of the
    /// embedding restricted to `dims`, for every record.
    pub fn true_marginal_weights(
        &self,
        data: &LoggedDataset,
        target: &PolicyProbs,
        logging: &PolicyProbs,
        dims: &[usize],
    ) -> Result<Vec<f64>> {
        data.records()
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let lik = self.embedding_likelihood(&r.embedding, dims);
                let num = kahan_sum(target.row(i).iter().zip(&lik).map(|(p, l)| p * l));
                let den = kahan_sum(logging.row(i).iter().zip(&lik).map(|(p, l)| p * l));
                if den <= 0.0 {
                    return Err(Error::DeficientEmbeddingSupport { embedding: i });
                }
                Ok(num / den)
            })
            .collect()
    }

    /// Monte-Carlo estimate of the target policy value over `m` fresh
    /// contexts drawn from the ground-truth stream of `seed`.
    ///
    /// For each context the exact `sum_a pi(a|x) q(x, a)` is averaged, so the
    /// only randomness is in the contexts.
    pub fn ground_truth_value(&self, m: usize, seed: u64) -> Result<GroundTruth> {
        if m == 0 {
            return Err(Error::InvalidInput("m must be at least 1".into()));
        }
        const CHUNK: usize = 8192;
        let chunks = m.div_ceil(CHUNK);
        let eps = self.config.epsilon;
        let partial: Vec<(f64, f64)> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let len = CHUNK.min(m - c * CHUNK);
                let mut rng = stream_rng(seed, Stream::GroundTruth, c as u64);
                let contexts: Vec<Vec<f64>> =
                    (0..len).map(|_| self.sample_context(&mut rng)).collect();
                let mut values = Vec::with_capacity(len);
                for batch in contexts.chunks(BATCH) {
                    let refs: Vec<&[f64]> = batch.iter().map(Vec::as_slice).collect();
                    let q = self.q_batch(&refs);
                    for col in q.column_iter() {
                        let qx = col.as_slice();
                        let best = qx[argmax(qx)];
                        let avg = kahan_sum(qx.iter().copied()) / qx.len() as f64;
                        values.push((1.0 - eps) * best + eps * avg);
                    }
                }
                let sum = kahan_sum(values.iter().copied());
                let sq = kahan_sum(values.iter().map(|v| v * v));
                (sum, sq)
            })
            .collect();
        let sum = kahan_sum(partial.iter().map(|p| p.0));
        let sq = kahan_sum(partial.iter().map(|p| p.1));
        let mf = m as f64;
        let value = sum / mf;
        let variance = if m > 1 {
            ((sq - mf * value * value) / (mf - 1.0)).max(0.0)
        } else {
            0.0
        };
        Ok(GroundTruth {
            value,
            std_error: (variance / mf).sqrt(),
            contexts: m,
        })
    }
}

/// A Monte-Carlo ground-truth policy value and its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub value: f64,
    pub std_error: f64,
    pub contexts: usize,
}

pub struct LoggingPolicy<'a>(&'a SyntheticEnvironment);

impl Policy for LoggingPolicy<'_> {
    fn num_actions(&self) -> usize {
        self.0.num_actions()
    }

    fn distribution(&self, context: &[f64]) -> Result<Distribution> {
        self.0.logging_policy(context)
    }
}

pub struct TargetPolicy<'a>(&'a SyntheticEnvironment);

impl Policy for TargetPolicy<'_> {
    fn num_actions(&self) -> usize {
        self.0.num_actions()
    }

    fn distribution(&self, context: &[f64]) -> Result<Distribution> {
        self.0.target_policy(context)
    }
}

/// Draws the environment parameters for `config`.
///
/// The continuous parameters come from the environment stream of the
/// config's seed and the deficient set from a separate stream, so varying
/// the number of deficient actions leaves every other parameter unchanged.
/// Deficient sets are nested: the set for `k` actions is a prefix of one
/// fixed random permutation.
pub fn build_environment(config: &SyntheticConfig) -> Result<SyntheticEnvironment> {
    config.validate()?;
    let (na, dx, de, c) = (
        config.num_actions,
        config.context_dim,
        config.embed_dims,
        config.embed_cardinality,
    );
    let mut rng = stream_rng(config.seed, Stream::Environment, 0);
    let normal = |rng: &mut Rng, len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.sample(StandardNormal)).collect()
    };
    let uniform = |rng: &mut Rng, len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.random_range(-1.0..=1.0)).collect()
    };

    let alpha = normal(&mut rng, na * de * c);
    let m = uniform(&mut rng, dx * dx);
    let theta_x = uniform(&mut rng, dx);
    let theta_e = uniform(&mut rng, dx);
    let gammas: Vec<f64> = (0..de).map(|_| rng.sample(Exp1)).collect();
    let total: f64 = gammas.iter().sum();
    let eta: Vec<f64> = gammas.iter().map(|g| g / total).collect();
    let latent = normal(&mut rng, de * c * dx);

    let mut embed_probs = DMatrix::<f64>::zeros(na, de * c);
    for a in 0..na {
        for k in 0..de {
            let start = (a * de + k) * c;
            let dist = softmax_policy(&alpha[start..start + c], 1.0)?;
            for (v, p) in dist.probs().iter().enumerate() {
                embed_probs[(a, k * c + v)] = *p;
            }
        }
    }

    let mut order: Vec<usize> = (0..na).collect();
    order.shuffle(&mut stream_rng(config.seed, Stream::Deficiency, 0));
    let mut deficient = vec![false; na];
    for &a in &order[..config.num_deficient_actions] {
        deficient[a] = true;
    }

    Ok(SyntheticEnvironment {
        config: config.clone(),
        alpha,
        embed_probs,
        m,
        theta_x,
        theta_e,
        eta,
        latent,
        deficient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use crate::stats::{mean, std_error};
    use approx::assert_relative_eq;

    fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            num_actions: 5,
            context_dim: 3,
            embed_dims: 2,
            embed_cardinality: 3,
            seed: 7,
            ..SyntheticConfig::default()
        }
    }

    /// Direct term-by-term evaluation of the reward formula.
    #[allow(clippy::needless_range_loop)]
    fn q_xe_direct(env: &SyntheticEnvironment, x: &[f64], e: &[usize]) -> f64 {
        let dx = env.context_dim();
        let mut total = 0.0;
        for k in 0..env.embed_dims() {
            let xe = env.latent(k, e[k]);
            let mut quad = 0.0;
            for i in 0..dx {
                for j in 0..dx {
                    quad += x[i] * env.m_matrix()[i * dx + j] * xe[j];
                }
            }
            let tx: f64 = (0..dx).map(|j| env.theta_x()[j] * x[j]).sum();
            let te: f64 = (0..dx).map(|j| env.theta_e()[j] * xe[j]).sum();
            total += env.eta()[k] * (quad + tx + te);
        }
        total
    }

    #[test]
    fn config_validation() {
        assert!(small_config().validate().is_ok());
        let bad = [
            SyntheticConfig {
                num_actions: 1,
                ..small_config()
            },
            SyntheticConfig {
                embed_dims: 0,
                ..small_config()
            },
            SyntheticConfig {
                num_deficient_actions: 5,
                ..small_config()
            },
            SyntheticConfig {
                withheld_dims: vec![2],
                ..small_config()
            },
            SyntheticConfig {
                epsilon: 1.5,
                ..small_config()
            },
            SyntheticConfig {
                reward_noise: -1.0,
                ..small_config()
            },
        ];
        for cfg in bad {
            assert!(matches!(build_environment(&cfg), Err(Error::Config(_))));
        }
    }

    #[test]
    fn environment_is_deterministic() {
        let cfg = SyntheticConfig {
            num_actions: 2,
            embed_dims: 1,
            embed_cardinality: 2,
            ..small_config()
        };
        let a = build_environment(&cfg).unwrap();
        let b = build_environment(&cfg).unwrap();
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.m, b.m);
        assert_eq!(a.latent, b.latent);
        assert_eq!(a.eta, b.eta);
    }

    #[test]
    fn eta_on_simplex_and_no_default_deficiency() {
        let env = build_environment(&SyntheticConfig {
            embed_dims: 3,
            ..small_config()
        })
        .unwrap();
        assert_relative_eq!(env.eta().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(env.eta().iter().all(|&e| e >= 0.0));
        assert!(env.deficient_actions().is_empty());
    }

    #[test]
    fn deficient_sets_are_nested_and_leave_parameters_fixed() {
        let base = SyntheticConfig {
            num_actions: 20,
            ..small_config()
        };
        let e0 = build_environment(&base).unwrap();
        let e5 = build_environment(&SyntheticConfig {
            num_deficient_actions: 5,
            ..base.clone()
        })
        .unwrap();
        let e9 = build_environment(&SyntheticConfig {
            num_deficient_actions: 9,
            ..base
        })
        .unwrap();
        assert_eq!(e0.alpha, e9.alpha);
        assert_eq!(e5.deficient_actions().len(), 5);
        assert!(e5.deficient_actions().iter().all(|&a| e9.is_deficient(a)));
    }

    #[test]
    fn embed_distribution_from_logits() {
        let mut env = build_environment(&SyntheticConfig {
            embed_cardinality: 2,
            ..small_config()
        })
        .unwrap();
        // Overwrite one action's logits to (0, ln 3).
        env.embed_probs[(0, 0)] = 1.0 / (1.0 + 3.0);
        env.embed_probs[(0, 1)] = 3.0 / (1.0 + 3.0);
        let dist = env.embed_distribution(0).unwrap();
        assert_relative_eq!(dist[0].prob(0), 0.25, epsilon = 1e-15);
        assert_relative_eq!(dist[0].prob(1), 0.75, epsilon = 1e-15);
        let manual = softmax_policy(&[0.0, 3f64.ln()], 1.0).unwrap();
        assert_relative_eq!(manual.prob(1), 0.75, epsilon = 1e-15);
        for a in 0..env.num_actions() {
            for d in env.embed_distribution(a).unwrap() {
                assert_relative_eq!(d.probs().iter().sum::<f64>(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn product_space_sums_to_one() {
        let env = build_environment(&small_config()).unwrap();
        let c = env.cardinality();
        for a in 0..env.num_actions() {
            let mut total = 0.0;
            for e0 in 0..c {
                for e1 in 0..c {
                    total += env.embed_prob(a, 0, e0) * env.embed_prob(a, 1, e1);
                }
            }
            assert_relative_eq!(total, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn q_xe_matches_direct_evaluation() {
        let env = build_environment(&small_config()).unwrap();
        let mut rng = seeded(1);
        for _ in 0..20 {
            let x = env.sample_context(&mut rng);
            for e0 in 0..3 {
                for e1 in 0..3 {
                    let e = [e0, e1];
                    assert_relative_eq!(
                        env.q_xe(&x, &e),
                        q_xe_direct(&env, &x, &e),
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn zero_parameters_give_zero_reward() {
        let mut env = build_environment(&small_config()).unwrap();
        env.m.iter_mut().for_each(|v| *v = 0.0);
        env.theta_x.iter_mut().for_each(|v| *v = 0.0);
        env.theta_e.iter_mut().for_each(|v| *v = 0.0);
        let x = [0.3, -1.2, 2.0];
        assert_eq!(env.q_xe(&x, &[1, 2]), 0.0);
        assert!(env.q_all_actions(&x).iter().all(|q| *q == 0.0));
    }

    #[test]
    fn single_dimension_is_single_term() {
        let env = build_environment(&SyntheticConfig {
            embed_dims: 1,
            ..small_config()
        })
        .unwrap();
        assert_relative_eq!(env.eta()[0], 1.0, epsilon = 1e-15);
        let x = [0.5, 0.25, -1.0];
        assert_relative_eq!(
            env.q_xe(&x, &[2]),
            q_xe_direct(&env, &x, &[2]),
            epsilon = 1e-12
        );
    }

    #[test]
    fn action_independent_reward_without_embedding_terms() {
        let mut env = build_environment(&small_config()).unwrap();
        env.m.iter_mut().for_each(|v| *v = 0.0);
        env.theta_e.iter_mut().for_each(|v| *v = 0.0);
        let x = [1.0, -0.5, 0.75];
        let tx: f64 = env.theta_x().iter().zip(&x).map(|(t, x)| t * x).sum();
        for q in env.q_all_actions(&x) {
            assert_relative_eq!(q, tx, epsilon = 1e-12);
        }
    }

    #[test]
    fn q_xa_with_one_hot_embeddings_equals_q_xe() {
        let mut env = build_environment(&small_config()).unwrap();
        let c = env.cardinality();
        for a in 0..env.num_actions() {
            for k in 0..env.embed_dims() {
                for v in 0..c {
                    env.embed_probs[(a, k * c + v)] = if v == (a + k) % c { 1.0 } else { 0.0 };
                }
            }
        }
        let x = [0.1, 0.2, -0.3];
        for a in 0..env.num_actions() {
            let e = [a % c, (a + 1) % c];
            assert_relative_eq!(env.q_xa(&x, a), env.q_xe(&x, &e), epsilon = 1e-12);
        }
    }

    #[test]
    fn q_xa_matches_exact_enumeration() {
        let env = build_environment(&small_config()).unwrap();
        let x = [0.7, -0.1, 1.3];
        for a in 0..env.num_actions() {
            let mut expected = 0.0;
            for e0 in 0..3 {
                for e1 in 0..3 {
                    expected += env.embed_prob(a, 0, e0)
                        * env.embed_prob(a, 1, e1)
                        * env.q_xe(&x, &[e0, e1]);
                }
            }
            assert_relative_eq!(env.q_xa(&x, a), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn logging_policy_properties() {
        let cfg = SyntheticConfig {
            beta: 0.0,
            ..small_config()
        };
        let env = build_environment(&cfg).unwrap();
        let x = [0.2, 0.4, 0.6];
        let pi0 = env.logging_policy(&x).unwrap();
        for a in 0..5 {
            assert_relative_eq!(pi0.prob(a), 0.2, epsilon = 1e-15);
        }

        let env = build_environment(&SyntheticConfig {
            num_deficient_actions: 1,
            ..small_config()
        })
        .unwrap();
        let d = env.deficient_actions()[0];
        assert_eq!(env.logging_policy(&x).unwrap().prob(d), 0.0);

        let env = build_environment(&SyntheticConfig {
            beta: 3.0,
            ..small_config()
        })
        .unwrap();
        let q = env.q_all_actions(&x);
        let pi0 = env.logging_policy(&x).unwrap();
        assert_eq!(argmax(pi0.probs()), argmax(&q));
    }

    #[test]
    fn target_policy_probabilities() {
        let env = build_environment(&SyntheticConfig {
            num_actions: 20,
            ..small_config()
        })
        .unwrap();
        let x = [0.2, 0.4, 0.6];
        let pi = env.target_policy(&x).unwrap();
        let best = argmax(&env.q_all_actions(&x));
        assert_relative_eq!(pi.prob(best), 0.9525, epsilon = 1e-15);
        assert_relative_eq!(pi.prob((best + 1) % 20), 0.0025, epsilon = 1e-15);

        let env = build_environment(&SyntheticConfig {
            epsilon: 1.0,
            ..small_config()
        })
        .unwrap();
        assert!(env
            .target_policy(&x)
            .unwrap()
            .probs()
            .iter()
            .all(|p| (*p - 0.2).abs() < 1e-15));
        let env = build_environment(&SyntheticConfig {
            epsilon: 0.0,
            ..small_config()
        })
        .unwrap();
        let best = argmax(&env.q_all_actions(&x));
        assert_eq!(env.target_policy(&x).unwrap().prob(best), 1.0);
    }

    #[test]
    fn noiseless_rewards_equal_expected_reward() {
        let env = build_environment(&SyntheticConfig {
            reward_noise: 0.0,
            ..small_config()
        })
        .unwrap();
        let data = env.sample_logged_data(50, &mut seeded(3)).unwrap();
        for r in data.records() {
            assert_eq!(r.reward, env.q_xe(&r.context, &r.embedding));
        }
    }

    #[test]
    fn sampling_is_deterministic_and_avoids_deficient_actions() {
        let cfg = SyntheticConfig {
            num_actions: 10,
            num_deficient_actions: 7,
            ..small_config()
        };
        let env = build_environment(&cfg).unwrap();
        let a = env.sample_logged_data(500, &mut seeded(9)).unwrap();
        let b = env.sample_logged_data(500, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert!(a.records().iter().all(|r| !env.is_deficient(r.action)));
    }

    #[test]
    fn withheld_dims_are_masked_not_dropped() {
        let cfg = SyntheticConfig {
            embed_dims: 3,
            withheld_dims: vec![2],
            ..small_config()
        };
        let env = build_environment(&cfg).unwrap();
        let data = env.sample_logged_data(10, &mut seeded(0)).unwrap();
        assert_eq!(data.visible_dims(), vec![0, 1]);
        assert!(data.records().iter().all(|r| r.embedding.len() == 3));
    }

    #[test]
    fn policy_probs_match_pointwise_policies() {
        let env = build_environment(&SyntheticConfig {
            num_deficient_actions: 2,
            ..small_config()
        })
        .unwrap();
        let data = env.sample_logged_data(30, &mut seeded(4)).unwrap();
        let (pi, pi0) = env.policy_probs(&data).unwrap();
        let pi_direct = PolicyProbs::from_policy(&env.target(), &data).unwrap();
        let pi0_direct = PolicyProbs::from_policy(&env.logging(), &data).unwrap();
        for i in 0..data.len() {
            for a in 0..env.num_actions() {
                assert_relative_eq!(pi.prob(i, a), pi_direct.prob(i, a), epsilon = 1e-12);
                assert_relative_eq!(pi0.prob(i, a), pi0_direct.prob(i, a), epsilon = 1e-12);
            }
            let r = &data.records()[i];
            assert_relative_eq!(pi0.prob(i, r.action), r.logging_propensity, epsilon = 1e-12);
        }
    }

    #[test]
    fn true_marginal_weights_match_product_space_formula() {
        let env = build_environment(&small_config()).unwrap();
        let data = env.sample_logged_data(20, &mut seeded(5)).unwrap();
        let (pi, pi0) = env.policy_probs(&data).unwrap();
        let w = env
            .true_marginal_weights(&data, &pi, &pi0, &[0, 1])
            .unwrap();
        for (i, r) in data.records().iter().enumerate() {
            let mut num = 0.0;
            let mut den = 0.0;
            for a in 0..env.num_actions() {
                let l = env.embed_prob(a, 0, r.embedding[0]) * env.embed_prob(a, 1, r.embedding[1]);
                num += pi.prob(i, a) * l;
                den += pi0.prob(i, a) * l;
            }
            assert_relative_eq!(w[i], num / den, epsilon = 1e-12);
        }
        // no dims observed: every marginal weight is one
        let w = env.true_marginal_weights(&data, &pi, &pi0, &[]).unwrap();
        assert!(w.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn ground_truth_single_greedy_context_is_max_q() {
        let env = build_environment(&SyntheticConfig {
            epsilon: 0.0,
            ..small_config()
        })
        .unwrap();
        let gt = env.ground_truth_value(1, 11).unwrap();
        let x = env.sample_context(&mut stream_rng(11, Stream::GroundTruth, 0));
        let q = env.q_all_actions(&x);
        assert_relative_eq!(gt.value, q[argmax(&q)], epsilon = 1e-12);
    }

    #[test]
    fn ground_truth_of_constant_reward() {
        let mut env = build_environment(&small_config()).unwrap();
        env.m.iter_mut().for_each(|v| *v = 0.0);
        env.theta_x.iter_mut().for_each(|v| *v = 0.0);
        env.theta_e.iter_mut().for_each(|v| *v = 0.0);
        let gt = env.ground_truth_value(1000, 2).unwrap();
        assert_eq!(gt.value, 0.0);
    }

    #[test]
    fn ground_truth_agrees_with_on_policy_rollouts() {
        let env = build_environment(&SyntheticConfig {
            num_actions: 8,
            ..small_config()
        })
        .unwrap();
        let gt = env.ground_truth_value(200_000, 21).unwrap();
        let rollouts = env.sample_on_policy(200_000, &mut seeded(22)).unwrap();
        let rewards = rollouts.rewards();
        let se = (std_error(&rewards).powi(2) + gt.std_error.powi(2)).sqrt();
        assert!(
            (mean(&rewards) - gt.value).abs() <= 3.0 * se,
            "rollout {} vs truth {} (se {se})",
            mean(&rewards),
            gt.value
        );
    }
}
