//! Off-policy value estimators.
//!
//! Every estimator here is a sample mean of per-record terms. The terms are
//! kept in the returned [`EstimateRecord`] so confidence widths can be built
//! without recomputation, and the mean is taken with an order-independent
//! compensated sum so that permuting records leaves the estimate unchanged.
//!
//! MRDR is not a separate function: it is [`dr`] fed with terms from a
//! reward model trained on the weighted loss (see [`crate::models`]).

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{LoggedDataset, PolicyProbs};
use crate::error::{Error, Result};
use crate::stats::stable_mean;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub estimator: String,
    pub estimate: f64,
    pub per_sample_terms: Vec<f64>,
    /// Identifies the configuration that produced the data.
    #[serde(default)]
    pub fingerprint: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl EstimateRecord {
    pub fn from_terms(estimator: impl Into<String>, per_sample_terms: Vec<f64>) -> Self {
        Self {
            estimator: estimator.into(),
            estimate: stable_mean(&per_sample_terms),
            per_sample_terms,
            fingerprint: String::new(),
            seed: None,
        }
    }

    pub fn tagged(mut self, fingerprint: impl Into<String>, seed: u64) -> Self {
        self.fingerprint = fingerprint.into();
        self.seed = Some(seed);
        self
    }

    pub fn renamed(mut self, estimator: impl Into<String>) -> Self {
        self.estimator = estimator.into();
        self
    }
}

/// Reward-model outputs needed by DM and the DR family, per record:
/// `E_{pi(a|x_i)}[q_hat(x_i, a)]` and `q_hat(x_i, a_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardTerms {
    pub expected: Vec<f64>,
    pub logged: Vec<f64>,
}

impl RewardTerms {
    pub fn zeros(n: usize) -> Self {
        Self {
            expected: vec![0.0; n],
            logged: vec![0.0; n],
        }
    }

    /// Builds the terms from a per-record action-value function
    /// `q(i, a) = q_hat(x_i, a)`.
    pub fn from_action_values<F>(data: &LoggedDataset, target: &PolicyProbs, q: F) -> Result<Self>
    where
        F: Fn(usize, usize) -> f64,
    {
        check_policy(data, target)?;
        let mut expected = Vec::with_capacity(data.len());
        let mut logged = Vec::with_capacity(data.len());
        for (i, r) in data.records().iter().enumerate() {
            let values: Vec<f64> = target
                .row(i)
                .iter()
                .enumerate()
                .filter(|(_, p)| **p > 0.0)
                .map(|(a, p)| p * q(i, a))
                .collect();
            expected.push(crate::stats::kahan_sum(values));
            logged.push(q(i, r.action));
        }
        Ok(Self { expected, logged })
    }

    pub fn len(&self) -> usize {
        self.logged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logged.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            expected: indices.iter().map(|&i| self.expected[i]).collect(),
            logged: indices.iter().map(|&i| self.logged[i]).collect(),
        }
    }
}

/// Weight shrinkage applied inside DR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shrinkage {
    /// `w * 1{w <= lambda}`.
    Switch,
    /// `lambda * w / (w^2 + lambda)`.
    Os,
    /// `w / (1 - lambda + lambda * w)`, `lambda` in `[0, 1]`.
    Lambda,
}

impl Shrinkage {
    pub fn validate(self, lam: f64) -> Result<()> {
        let ok = match self {
            Shrinkage::Switch | Shrinkage::Os => lam >= 0.0,
            Shrinkage::Lambda => (0.0..=1.0).contains(&lam),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfRange {
                name: "lambda",
                value: lam,
                range: match self {
                    Shrinkage::Lambda => "[0, 1]",
                    _ => "[0, inf]",
                },
            })
        }
    }

    /// The shrunk weight. `lambda = inf` leaves `w` unchanged for switch and
    /// os. For the lambda kind at `lambda = 1` every weight maps to 1,
    /// including `w = 0` where the formula is `0 / 0`.
    pub fn shrink(self, w: f64, lam: f64) -> f64 {
        match self {
            Shrinkage::Switch => {
                if w <= lam {
                    w
                } else {
                    0.0
                }
            }
            Shrinkage::Os => {
                if lam.is_infinite() {
                    w
                } else if w == 0.0 {
                    0.0
                } else {
                    lam * w / (w * w + lam)
                }
            }
            Shrinkage::Lambda => {
                if lam == 1.0 {
                    1.0
                } else {
                    w / (1.0 - lam + lam * w)
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Shrinkage::Switch => "switch-dr",
            Shrinkage::Os => "dr-os",
            Shrinkage::Lambda => "dr-lambda",
        }
    }
}

impl fmt::Display for Shrinkage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shrinkage::Switch => "switch",
            Shrinkage::Os => "os",
            Shrinkage::Lambda => "lambda",
        })
    }
}

impl FromStr for Shrinkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "switch" => Ok(Shrinkage::Switch),
            "os" => Ok(Shrinkage::Os),
            "lambda" => Ok(Shrinkage::Lambda),
            other => Err(Error::InvalidInput(format!(
                "unknown shrinkage kind {other:?}"
            ))),
        }
    }
}

fn check_policy(data: &LoggedDataset, target: &PolicyProbs) -> Result<()> {
    if target.len() != data.len() || target.num_actions() != data.num_actions() {
        return Err(Error::InvalidInput(format!(
            "policy matrix is {}x{}, dataset has {} records over {} actions",
            target.len(),
            target.num_actions(),
            data.len(),
            data.num_actions()
        )));
    }
    Ok(())
}

fn check_terms(data: &LoggedDataset, q: &RewardTerms) -> Result<()> {
    if q.len() != data.len() || q.expected.len() != data.len() {
        return Err(Error::InvalidInput(format!(
            "reward terms cover {} records, dataset has {}",
            q.len(),
            data.len()
        )));
    }
    Ok(())
}

/// Vanilla importance weights `pi(a_i|x_i) / pi0(a_i|x_i)` of the logged
/// actions.
pub fn vanilla_weights(data: &LoggedDataset, target: &PolicyProbs) -> Result<Vec<f64>> {
    check_policy(data, target)?;
    Ok(data
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| target.prob(i, r.action) / r.logging_propensity)
        .collect())
}

pub fn ips(data: &LoggedDataset, target: &PolicyProbs) -> Result<EstimateRecord> {
    let w = vanilla_weights(data, target)?;
    let terms = w
        .iter()
        .zip(data.records())
        .map(|(w, r)| w * r.reward)
        .collect();
    Ok(EstimateRecord::from_terms("ips", terms))
}

pub fn dm(data: &LoggedDataset, target: &PolicyProbs, q: &RewardTerms) -> Result<EstimateRecord> {
    check_policy(data, target)?;
    check_terms(data, q)?;
    Ok(EstimateRecord::from_terms("dm", q.expected.clone()))
}

pub fn dr(data: &LoggedDataset, target: &PolicyProbs, q: &RewardTerms) -> Result<EstimateRecord> {
    let w = vanilla_weights(data, target)?;
    check_terms(data, q)?;
    Ok(EstimateRecord::from_terms(
        "dr",
        dr_terms(data, q, w.into_iter()),
    ))
}

fn dr_terms(data: &LoggedDataset, q: &RewardTerms, weights: impl Iterator<Item = f64>) -> Vec<f64> {
    weights
        .zip(data.records())
        .enumerate()
        .map(|(i, (w, r))| q.expected[i] + w * (r.reward - q.logged[i]))
        .collect()
}

/// DR with the importance weight replaced by its shrunk version.
pub fn shrunk_dr(
    data: &LoggedDataset,
    target: &PolicyProbs,
    q: &RewardTerms,
    kind: Shrinkage,
    lam: f64,
) -> Result<EstimateRecord> {
    kind.validate(lam)?;
    let w = vanilla_weights(data, target)?;
    check_terms(data, q)?;
    let terms = dr_terms(data, q, w.into_iter().map(|w| kind.shrink(w, lam)));
    Ok(EstimateRecord::from_terms(kind.name(), terms))
}

/// MIPS with caller-supplied marginal weights, true or estimated.
pub fn mips(data: &LoggedDataset, weights: &[f64]) -> Result<EstimateRecord> {
    if weights.len() != data.len() {
        return Err(Error::InvalidInput(format!(
            "{} weights for {} records",
            weights.len(),
            data.len()
        )));
    }
    if let Some((i, w)) = weights
        .iter()
        .enumerate()
        .find(|(_, w)| !(w.is_finite() && **w >= 0.0))
    {
        return Err(Error::InvalidInput(format!("weight {i} is {w}")));
    }
    let terms = weights
        .iter()
        .zip(data.records())
        .map(|(w, r)| w * r.reward)
        .collect();
    Ok(EstimateRecord::from_terms("mips", terms))
}
