//! Estimator roster and per-dataset evaluation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{LoggedDataset, PolicyProbs};
use crate::error::{Error, Result};
use crate::estimators::{dm, dr, ips, mips, EstimateRecord, RewardTerms, Shrinkage};
use crate::models::{
    estimate_marginal_weights, fit_action_posterior, fit_action_posterior_from,
    fit_mrdr_reward_model, fit_reward_model, ActionPosteriorModel, CrossFitPlan, PosteriorHyper,
    RidgeHyper,
};
use crate::policy::FactorizedEmbedModel;
use crate::slope::{select_embedding_dims, tune_lambda_default, SearchSpace, DEFAULT_DELTA};
use crate::synth::SyntheticEnvironment;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EstimatorKind {
    Dm,
    Ips,
    Dr,
    /// DR with the reward model fitted on the `w^2`-weighted loss.
    Mrdr,
    /// Shrunk DR variants, each tuned with SLOPE over its default grid.
    SwitchDr,
    DrOs,
    DrLambda,
    /// MIPS with weights from the fitted action posterior on all observed dims.
    Mips,
    /// MIPS with exact marginal weights on all observed dims.
    MipsTrue,
    /// MIPS on SLOPE-selected dims, estimated weights.
    MipsSlope,
    /// MIPS on SLOPE-selected dims, exact weights.
    MipsTrueSlope,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 11] = [
        EstimatorKind::Dm,
        EstimatorKind::Ips,
        EstimatorKind::Dr,
        EstimatorKind::Mrdr,
        EstimatorKind::SwitchDr,
        EstimatorKind::DrOs,
        EstimatorKind::DrLambda,
        EstimatorKind::Mips,
        EstimatorKind::MipsTrue,
        EstimatorKind::MipsSlope,
        EstimatorKind::MipsTrueSlope,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::Dm => "dm",
            EstimatorKind::Ips => "ips",
            EstimatorKind::Dr => "dr",
            EstimatorKind::Mrdr => "mrdr",
            EstimatorKind::SwitchDr => "switch-dr",
            EstimatorKind::DrOs => "dr-os",
            EstimatorKind::DrLambda => "dr-lambda",
            EstimatorKind::Mips => "mips",
            EstimatorKind::MipsTrue => "mips-true",
            EstimatorKind::MipsSlope => "mips-slope",
            EstimatorKind::MipsTrueSlope => "mips-true-slope",
        }
    }

    fn shrinkage(self) -> Option<Shrinkage> {
        match self {
            EstimatorKind::SwitchDr => Some(Shrinkage::Switch),
            EstimatorKind::DrOs => Some(Shrinkage::Os),
            EstimatorKind::DrLambda => Some(Shrinkage::Lambda),
            _ => None,
        }
    }

    /// Parses a comma-separated list such as `"ips,dr,mips-true"`.
    pub fn parse_list(s: &str) -> Result<Vec<EstimatorKind>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = EstimatorKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown estimator '{s}' (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

impl TryFrom<String> for EstimatorKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<EstimatorKind> for String {
    fn from(k: EstimatorKind) -> String {
        k.name().to_string()
    }
}

/// Nuisance-model and selection settings shared by every replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationOptions {
    pub posterior: PosteriorHyper,
    pub ridge: RidgeHyper,
    pub folds: usize,
    pub delta: f64,
    pub search: SearchSpace,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        Self {
            posterior: PosteriorHyper::default(),
            ridge: RidgeHyper::default(),
            folds: 2,
            delta: DEFAULT_DELTA,
            search: SearchSpace::Greedy,
        }
    }
}

impl EstimationOptions {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "folds must be at least 2, got {}",
                self.folds
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Evaluates estimators on one logged dataset, fitting each nuisance model
/// at most once and only when some estimator needs it.
pub struct Evaluator<'a> {
    env: &'a SyntheticEnvironment,
    embed: &'a FactorizedEmbedModel,
    data: &'a LoggedDataset,
    options: &'a EstimationOptions,
    model_seed: u64,
    target: PolicyProbs,
    logging: PolicyProbs,
    plan: Option<CrossFitPlan>,
    plain: Option<RewardTerms>,
    mrdr: Option<RewardTerms>,
    posterior: Option<ActionPosteriorModel>,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        env: &'a SyntheticEnvironment,
        embed: &'a FactorizedEmbedModel,
        data: &'a LoggedDataset,
        options: &'a EstimationOptions,
        model_seed: u64,
    ) -> Result<Self> {
        let (target, logging) = env.policy_probs(data)?;
        Ok(Self {
            env,
            embed,
            data,
            options,
            model_seed,
            target,
            logging,
            plan: None,
            plain: None,
            mrdr: None,
            posterior: None,
        })
    }

    pub fn target(&self) -> &PolicyProbs {
        &self.target
    }

    fn plan(&mut self) -> Result<CrossFitPlan> {
        if self.plan.is_none() {
            self.plan = Some(CrossFitPlan::new(
                self.data.len(),
                self.options.folds,
                self.model_seed,
            )?);
        }
        Ok(self.plan.clone().expect("just set"))
    }

    fn plain_terms(&mut self) -> Result<RewardTerms> {
        if self.plain.is_none() {
            let plan = self.plan()?;
            let model = fit_reward_model(self.data, &plan, &self.options.ridge, Some(self.embed))?;
            self.plain = Some(model.terms(self.data, &self.target)?);
        }
        Ok(self.plain.clone().expect("just set"))
    }

    fn mrdr_terms(&mut self) -> Result<RewardTerms> {
        if self.mrdr.is_none() {
            let plan = self.plan()?;
            let model = fit_mrdr_reward_model(
                self.data,
                &self.target,
                &plan,
                &self.options.ridge,
                Some(self.embed),
            )?;
            self.mrdr = Some(model.terms(self.data, &self.target)?);
        }
        Ok(self.mrdr.clone().expect("just set"))
    }

    fn posterior(&mut self) -> Result<&ActionPosteriorModel> {
        if self.posterior.is_none() {
            let model = fit_action_posterior(
                self.data,
                &self.data.visible_dims(),
                &self.options.posterior,
            )?;
            if let Some(w) = &model.warning {
                log::warn!("{w}");
            }
            self.posterior = Some(model);
        }
        Ok(self.posterior.as_ref().expect("just set"))
    }

    fn estimated_weights(&self, model: &ActionPosteriorModel) -> Result<Vec<f64>> {
        let est = estimate_marginal_weights(self.data, &self.target, &self.logging, model)?;
        if est.any_skipped() {
            log::debug!("posterior put mass on actions the logging policy never takes");
        }
        Ok(est.weights)
    }

    /// Exact marginal weights on the given observed dims.
    pub fn true_weights(&self, dims: &[usize]) -> Result<Vec<f64>> {
        self.env
            .true_marginal_weights(self.data, &self.target, &self.logging, dims)
    }

    pub fn evaluate(&mut self, kind: EstimatorKind) -> Result<EstimateRecord> {
        let data = self.data;
        let record = match kind {
            EstimatorKind::Ips => ips(data, &self.target)?,
            EstimatorKind::Dm => {
                let q = self.plain_terms()?;
                dm(data, &self.target, &q)?
            }
            EstimatorKind::Dr => {
                let q = self.plain_terms()?;
                dr(data, &self.target, &q)?
            }
            EstimatorKind::Mrdr => {
                let q = self.mrdr_terms()?;
                dr(data, &self.target, &q)?
            }
            EstimatorKind::SwitchDr | EstimatorKind::DrOs | EstimatorKind::DrLambda => {
                let q = self.plain_terms()?;
                let shrink = kind.shrinkage().expect("shrunk variant");
                tune_lambda_default(data, &self.target, &q, shrink, self.options.delta)?.record
            }
            EstimatorKind::Mips => {
                let model = self.posterior()?.clone();
                mips(data, &self.estimated_weights(&model)?)?
            }
            EstimatorKind::MipsTrue => mips(data, &self.true_weights(&data.visible_dims())?)?,
            EstimatorKind::MipsSlope => {
                let hyper = self.options.posterior;
                let mut previous: Option<ActionPosteriorModel> = None;
                let this = &*self;
                select_embedding_dims(data, self.options.delta, self.options.search, |dims| {
                    let model = fit_action_posterior_from(data, dims, &hyper, previous.as_ref())?;
                    let w = this.estimated_weights(&model)?;
                    previous = Some(model);
                    Ok(w)
                })?
                .record
            }
            EstimatorKind::MipsTrueSlope => {
                let this = &*self;
                select_embedding_dims(data, self.options.delta, self.options.search, |dims| {
                    this.true_weights(dims)
                })?
                .record
            }
        };
        Ok(record.renamed(kind.name()))
    }

    /// Evaluates every estimator; failures are kept per estimator.
    pub fn evaluate_all(
        &mut self,
        roster: &[EstimatorKind],
    ) -> Vec<(EstimatorKind, Result<EstimateRecord>)> {
        roster.iter().map(|&k| (k, self.evaluate(k))).collect()
    }
}
