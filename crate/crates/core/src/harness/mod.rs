//! Replications, parameter sweeps, bootstrap CDFs, and result reports.
//!
//! A sweep builds one synthetic environment per swept value and draws `T`
//! logged datasets from it, one per seed. Seed `t` owns its own data and
//! model streams, so raising `T` never changes the first seeds' estimates,
//! and the same `t` reuses the same data stream across swept values.

mod bootstrap;
mod report;
mod roster;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::stats::stable_mean;
use crate::synth::{build_environment, GroundTruth, SyntheticConfig};

pub use bootstrap::{bootstrap_cdf, BootstrapCdf, BootstrapSpec, EstimatorCdf};
pub use report::{emit_report, read_results_csv, Manifest, ResultRow, CSV_HEADER};
pub use roster::{EstimationOptions, EstimatorKind, Evaluator};

/// The environment or sampling knob varied by a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    NumActions,
    /// Logged sample size.
    N,
    NumDeficient,
    /// Number of embedding dims hidden from estimators (the last ones).
    WithheldCount,
    Beta,
    Epsilon,
    /// Reward noise standard deviation.
    Sigma,
}

impl SweepParam {
    pub const ALL: [SweepParam; 7] = [
        SweepParam::NumActions,
        SweepParam::N,
        SweepParam::NumDeficient,
        SweepParam::WithheldCount,
        SweepParam::Beta,
        SweepParam::Epsilon,
        SweepParam::Sigma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::NumActions => "num_actions",
            SweepParam::N => "n",
            SweepParam::NumDeficient => "num_deficient",
            SweepParam::WithheldCount => "withheld_count",
            SweepParam::Beta => "beta",
            SweepParam::Epsilon => "epsilon",
            SweepParam::Sigma => "sigma",
        }
    }

    /// Applies `value` to a copy of the base configuration and sample size.
    pub fn apply(
        self,
        base: &SyntheticConfig,
        n: usize,
        value: f64,
    ) -> Result<(SyntheticConfig, usize)> {
        let mut cfg = base.clone();
        let mut n = n;
        let count = || -> Result<usize> {
            if value.is_finite() && value >= 0.0 && value.fract() == 0.0 && value <= u32::MAX as f64
            {
                Ok(value as usize)
            } else {
                Err(Error::Config(format!(
                    "{} needs a non-negative integer, got {value}",
                    self.name()
                )))
            }
        };
        match self {
            SweepParam::NumActions => cfg.num_actions = count()?,
            SweepParam::N => n = count()?,
            SweepParam::NumDeficient => cfg.num_deficient_actions = count()?,
            SweepParam::WithheldCount => cfg.withhold_last(count()?)?,
            SweepParam::Beta => cfg.beta = value,
            SweepParam::Epsilon => cfg.epsilon = value,
            SweepParam::Sigma => cfg.reward_noise = value,
        }
        cfg.validate()
            .map_err(|e| Error::Config(format!("{}={value}: {e}", self.name())))?;
        if n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        Ok((cfg, n))
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepParam::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep parameter '{s}'")))
    }
}

fn default_reps() -> usize {
    100
}

fn default_n() -> usize {
    10_000
}

fn default_ground_truth_contexts() -> usize {
    1_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(default)]
    pub base: SyntheticConfig,
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub roster: Vec<EstimatorKind>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    /// Logged sample size unless `n` is the swept parameter.
    #[serde(default = "default_n")]
    pub n: usize,
    /// Contexts used for the Monte-Carlo ground truth.
    #[serde(default = "default_ground_truth_contexts")]
    pub ground_truth_contexts: usize,
    /// Draw a fresh environment for every seed instead of fixing it per value.
    #[serde(default)]
    pub resample_environment: bool,
    #[serde(default)]
    pub estimation: EstimationOptions,
}

impl SweepSpec {
    pub fn new(
        base: SyntheticConfig,
        param: SweepParam,
        values: Vec<f64>,
        roster: Vec<EstimatorKind>,
    ) -> Self {
        Self {
            base,
            param,
            values,
            roster,
            reps: default_reps(),
            n: default_n(),
            ground_truth_contexts: default_ground_truth_contexts(),
            resample_environment: false,
            estimation: EstimationOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("the value list is empty".into()));
        }
        if self.roster.is_empty() {
            return Err(Error::Config("the estimator roster is empty".into()));
        }
        if self.reps == 0 {
            return Err(Error::Config("reps must be at least 1".into()));
        }
        if self.ground_truth_contexts == 0 {
            return Err(Error::Config(
                "ground_truth_contexts must be at least 1".into(),
            ));
        }
        self.estimation.validate()?;
        for &v in &self.values {
            self.param.apply(&self.base, self.n, v)?;
        }
        Ok(())
    }

    /// Short stable hash of the sweep settings, attached to every estimate.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json)[..8]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub estimate: Option<f64>,
    /// Ground truth this seed is scored against.
    pub ground_truth: f64,
    pub failure: Option<String>,
}

/// One (estimator, swept value) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub estimator: EstimatorKind,
    pub param: SweepParam,
    pub value: f64,
    pub ground_truth: f64,
    pub ground_truth_std_error: f64,
    pub seeds: Vec<SeedOutcome>,
    /// Aggregates over successful seeds; `None` when every seed failed.
    pub mse: Option<f64>,
    pub squared_bias: Option<f64>,
    pub variance: Option<f64>,
    pub mean_estimate: Option<f64>,
}

impl CellReport {
    fn new(
        estimator: EstimatorKind,
        param: SweepParam,
        value: f64,
        truth: &GroundTruth,
        seeds: Vec<SeedOutcome>,
    ) -> Self {
        let ok: Vec<(f64, f64)> = seeds
            .iter()
            .filter_map(|s| s.estimate.map(|e| (e, s.ground_truth)))
            .collect();
        let (mse, squared_bias, variance, mean_estimate) = if ok.is_empty() {
            (None, None, None, None)
        } else {
            let errors: Vec<f64> = ok.iter().map(|(e, g)| e - g).collect();
            let bias = stable_mean(&errors);
            let mse = stable_mean(&errors.iter().map(|d| d * d).collect::<Vec<_>>());
            let var = stable_mean(
                &errors
                    .iter()
                    .map(|d| (d - bias).powi(2))
                    .collect::<Vec<_>>(),
            );
            let est: Vec<f64> = ok.iter().map(|p| p.0).collect();
            (
                Some(mse),
                Some(bias * bias),
                Some(var),
                Some(stable_mean(&est)),
            )
        };
        Self {
            estimator,
            param,
            value,
            ground_truth: truth.value,
            ground_truth_std_error: truth.std_error,
            seeds,
            mse,
            squared_bias,
            variance,
            mean_estimate,
        }
    }

    pub fn failed(&self) -> usize {
        self.seeds.iter().filter(|s| s.estimate.is_none()).count()
    }

    /// More than half of the seeds failed.
    pub fn exceeds_failure_threshold(&self) -> bool {
        2 * self.failed() > self.seeds.len()
    }

    pub fn estimates(&self) -> Vec<f64> {
        self.seeds.iter().filter_map(|s| s.estimate).collect()
    }

    /// Standard error of `squared_bias`, by the delta method on the mean
    /// error; includes the ground truth's Monte-Carlo error.
    pub fn squared_bias_std_error(&self) -> Option<f64> {
        let ok: Vec<f64> = self
            .seeds
            .iter()
            .filter_map(|s| s.estimate.map(|e| e - s.ground_truth))
            .collect();
        if ok.len() < 2 {
            return None;
        }
        let bias = stable_mean(&ok);
        let se = crate::stats::std_error(&ok).hypot(self.ground_truth_std_error);
        Some(2.0 * bias.abs() * se)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub spec: SweepSpec,
    pub fingerprint: String,
    /// Ordered by swept value, then roster order.
    pub cells: Vec<CellReport>,
}

impl ExperimentReport {
    pub fn cell(&self, estimator: EstimatorKind, value: f64) -> Option<&CellReport> {
        self.cells
            .iter()
            .find(|c| c.estimator == estimator && c.value == value)
    }

    pub fn exceeds_failure_threshold(&self) -> bool {
        self.cells.iter().any(CellReport::exceeds_failure_threshold)
    }
}

/// Data-stream seed of replication `t`, reported in the manifest.
pub fn data_seed(master: u64, t: usize) -> u64 {
    derive_seed(master, Stream::Data, t as u64)
}

struct SeedRun {
    ground_truth: GroundTruth,
    results: Vec<std::result::Result<f64, String>>,
}

fn run_seed(
    spec: &SweepSpec,
    cfg: &SyntheticConfig,
    n: usize,
    shared: Option<&SharedEnv>,
    t: usize,
) -> Result<SeedRun> {
    let master = spec.base.seed;
    let owned;
    let env_pair = match shared {
        Some(s) => s,
        None => {
            let mut local = cfg.clone();
            local.seed = derive_seed(master, Stream::Environment, t as u64);
            let env = build_environment(&local)?;
            let truth = env.ground_truth_value(spec.ground_truth_contexts, local.seed)?;
            let embed = env.embed_model()?;
            owned = SharedEnv { env, embed, truth };
            &owned
        }
    };
    let mut rng = stream_rng(master, Stream::Data, t as u64);
    let data = env_pair.env.sample_logged_data(n, &mut rng)?;
    let model_seed = derive_seed(master, Stream::Model, t as u64);
    let mut eval = Evaluator::new(
        &env_pair.env,
        &env_pair.embed,
        &data,
        &spec.estimation,
        model_seed,
    )?;
    let results = spec
        .roster
        .iter()
        .map(|&k| match eval.evaluate(k) {
            Ok(r) if r.estimate.is_finite() => Ok(r.estimate),
            Ok(r) => Err(format!("non-finite estimate {}", r.estimate)),
            Err(e) => Err(e.to_string()),
        })
        .collect();
    Ok(SeedRun {
        ground_truth: env_pair.truth,
        results,
    })
}

struct SharedEnv {
    env: crate::synth::SyntheticEnvironment,
    embed: crate::policy::FactorizedEmbedModel,
    truth: GroundTruth,
}

/// Runs every (swept value, seed) replication and aggregates per estimator.
///
/// A failure while sampling data or fitting shared models marks that seed
/// failed for every estimator; a failure inside one estimator affects only
/// that estimator. Failed seeds are excluded from the aggregates.
pub fn run_replications(spec: &SweepSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut cells = Vec::with_capacity(spec.values.len() * spec.roster.len());
    for &value in &spec.values {
        let (cfg, n) = spec.param.apply(&spec.base, spec.n, value)?;
        let shared = if spec.resample_environment {
            None
        } else {
            let env = build_environment(&cfg)?;
            let truth = env.ground_truth_value(spec.ground_truth_contexts, cfg.seed)?;
            let embed = env.embed_model()?;
            Some(SharedEnv { env, embed, truth })
        };
        let runs: Vec<Result<SeedRun>> = (0..spec.reps)
            .into_par_iter()
            .map(|t| run_seed(spec, &cfg, n, shared.as_ref(), t))
            .collect();
        let truth = match &shared {
            Some(s) => s.truth,
            None => {
                let ok: Vec<&GroundTruth> = runs
                    .iter()
                    .filter_map(|r| r.as_ref().ok().map(|s| &s.ground_truth))
                    .collect();
                let values: Vec<f64> = ok.iter().map(|g| g.value).collect();
                let k = ok.len().max(1) as f64;
                GroundTruth {
                    value: if ok.is_empty() {
                        f64::NAN
                    } else {
                        stable_mean(&values)
                    },
                    std_error: ok.iter().map(|g| g.std_error.powi(2)).sum::<f64>().sqrt() / k,
                    contexts: spec.ground_truth_contexts,
                }
            }
        };
        for (j, &kind) in spec.roster.iter().enumerate() {
            let seeds = runs
                .iter()
                .enumerate()
                .map(|(t, run)| {
                    let seed = data_seed(spec.base.seed, t);
                    match run {
                        Ok(r) => SeedOutcome {
                            seed,
                            estimate: r.results[j].as_ref().ok().copied(),
                            ground_truth: r.ground_truth.value,
                            failure: r.results[j].as_ref().err().cloned(),
                        },
                        Err(e) => SeedOutcome {
                            seed,
                            estimate: None,
                            ground_truth: truth.value,
                            failure: Some(e.to_string()),
                        },
                    }
                })
                .collect();
            cells.push(CellReport::new(kind, spec.param, value, &truth, seeds));
        }
    }
    Ok(ExperimentReport {
        fingerprint: spec.fingerprint(),
        spec: spec.clone(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SweepSpec {
        let base = SyntheticConfig {
            num_actions: 20,
            context_dim: 3,
            embed_dims: 2,
            embed_cardinality: 4,
            seed: 7,
            ..SyntheticConfig::default()
        };
        let mut spec = SweepSpec::new(
            base,
            SweepParam::NumActions,
            vec![10.0, 20.0],
            vec![EstimatorKind::Ips, EstimatorKind::MipsTrue],
        );
        spec.reps = 4;
        spec.n = 200;
        spec.ground_truth_contexts = 2000;
        spec
    }

    #[test]
    fn param_names_round_trip() {
        for p in SweepParam::ALL {
            assert_eq!(p.name().parse::<SweepParam>().unwrap(), p);
            assert_eq!(
                serde_json::to_string(&p).unwrap(),
                format!("\"{}\"", p.name())
            );
        }
    }

    #[test]
    fn apply_rejects_fractional_counts() {
        let base = SyntheticConfig::default();
        assert!(SweepParam::NumActions.apply(&base, 10, 2.5).is_err());
        assert!(SweepParam::N.apply(&base, 10, 0.0).is_err());
        let (cfg, _) = SweepParam::WithheldCount.apply(&base, 10, 2.0).unwrap();
        assert_eq!(cfg.withheld_dims, vec![1, 2]);
        let (cfg, n) = SweepParam::Sigma.apply(&base, 10, 1.0).unwrap();
        assert_eq!((cfg.reward_noise, n), (1.0, 10));
    }

    #[test]
    fn validation() {
        let mut spec = small_spec();
        assert!(spec.validate().is_ok());
        spec.roster.clear();
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.values.clear();
        assert!(spec.validate().is_err());
        let mut spec = small_spec();
        spec.values = vec![-3.0];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn cells_follow_value_then_roster_order() {
        let report = run_replications(&small_spec()).unwrap();
        let order: Vec<(f64, EstimatorKind)> = report
            .cells
            .iter()
            .map(|c| (c.value, c.estimator))
            .collect();
        assert_eq!(
            order,
            vec![
                (10.0, EstimatorKind::Ips),
                (10.0, EstimatorKind::MipsTrue),
                (20.0, EstimatorKind::Ips),
                (20.0, EstimatorKind::MipsTrue)
            ]
        );
        for c in &report.cells {
            assert_eq!(c.seeds.len(), 4);
            assert_eq!(c.failed(), 0);
            let gap = c.mse.unwrap() - c.squared_bias.unwrap() - c.variance.unwrap();
            assert!(gap.abs() <= 1e-9 * c.mse.unwrap().max(1.0));
        }
    }

    #[test]
    fn resampled_environments_differ_per_seed() {
        let mut spec = small_spec();
        spec.values = vec![10.0];
        spec.resample_environment = true;
        let report = run_replications(&spec).unwrap();
        let truths: Vec<f64> = report.cells[0]
            .seeds
            .iter()
            .map(|s| s.ground_truth)
            .collect();
        assert!(truths.windows(2).any(|w| w[0] != w[1]));
    }
}
