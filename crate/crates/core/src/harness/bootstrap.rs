//! Bootstrap distribution of squared error relative to IPS.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::roster::{EstimationOptions, EstimatorKind, Evaluator};
use crate::data::LoggedDataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::stats::stable_mean;
use crate::synth::SyntheticEnvironment;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSpec {
    pub roster: Vec<EstimatorKind>,
    /// Resample size.
    pub n: usize,
    /// Number of resamples.
    pub reps: usize,
    pub seed: u64,
    #[serde(default)]
    pub estimation: EstimationOptions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorCdf {
    pub estimator: EstimatorKind,
    /// Sorted relative squared errors over the kept resamples.
    pub rel_se: Vec<f64>,
    /// `(resample, reason)` for resamples where this estimator failed.
    pub failures: Vec<(usize, String)>,
}

impl EstimatorCdf {
    /// Empirical CDF `F(z) = #{rel_se <= z} / len`.
    pub fn cdf(&self, z: f64) -> f64 {
        if self.rel_se.is_empty() {
            return f64::NAN;
        }
        self.rel_se.partition_point(|&v| v <= z) as f64 / self.rel_se.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCdf {
    /// Mean reward of the on-policy data.
    pub on_policy_value: f64,
    /// Resamples dropped for every estimator because IPS had zero error
    /// (or failed), so the ratio is undefined.
    pub excluded: Vec<usize>,
    pub estimators: Vec<EstimatorCdf>,
}

/// Draws `spec.reps` resamples of size `spec.n` from `logging_data` with
/// replacement and records `(V_on - V_hat)^2 / (V_on - V_hat_ips)^2` for
/// every estimator, where `V_on` is the mean reward of `on_policy_data`.
pub fn bootstrap_cdf(
    env: &SyntheticEnvironment,
    on_policy_data: &LoggedDataset,
    logging_data: &LoggedDataset,
    spec: &BootstrapSpec,
) -> Result<BootstrapCdf> {
    if on_policy_data.is_empty() || logging_data.is_empty() {
        return Err(Error::InvalidInput("both datasets must be nonempty".into()));
    }
    if spec.n == 0 || spec.reps == 0 {
        return Err(Error::Config("n and reps must be at least 1".into()));
    }
    if spec.roster.is_empty() {
        return Err(Error::Config("the estimator roster is empty".into()));
    }
    spec.estimation.validate()?;
    let on_policy_value = stable_mean(&on_policy_data.rewards());
    let embed = env.embed_model()?;
    let mut cdfs: Vec<EstimatorCdf> = spec
        .roster
        .iter()
        .map(|&estimator| EstimatorCdf {
            estimator,
            rel_se: Vec::new(),
            failures: Vec::new(),
        })
        .collect();
    let mut excluded = Vec::new();
    for t in 0..spec.reps {
        let mut rng = stream_rng(spec.seed, Stream::Bootstrap, t as u64);
        let idx: Vec<usize> = (0..spec.n)
            .map(|_| rng.random_range(0..logging_data.len()))
            .collect();
        let sample = logging_data.select(&idx)?;
        let model_seed = derive_seed(spec.seed, Stream::Model, t as u64);
        let mut eval = Evaluator::new(env, &embed, &sample, &spec.estimation, model_seed)?;
        let ips_error = match eval.evaluate(EstimatorKind::Ips) {
            Ok(r) => (on_policy_value - r.estimate).powi(2),
            Err(e) => {
                log::warn!("resample {t}: IPS failed: {e}");
                excluded.push(t);
                continue;
            }
        };
        if ips_error == 0.0 || !ips_error.is_finite() {
            log::warn!("resample {t}: IPS squared error is {ips_error}; resample excluded");
            excluded.push(t);
            continue;
        }
        for cdf in &mut cdfs {
            match eval.evaluate(cdf.estimator) {
                Ok(r) if r.estimate.is_finite() => cdf
                    .rel_se
                    .push((on_policy_value - r.estimate).powi(2) / ips_error),
                Ok(r) => cdf
                    .failures
                    .push((t, format!("non-finite estimate {}", r.estimate))),
                Err(e) => cdf.failures.push((t, e.to_string())),
            }
        }
    }
    for cdf in &mut cdfs {
        cdf.rel_se.sort_by(f64::total_cmp);
    }
    Ok(BootstrapCdf {
        on_policy_value,
        excluded,
        estimators: cdfs,
    })
}
