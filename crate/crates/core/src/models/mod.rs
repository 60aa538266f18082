//! Learned nuisance components: the action posterior used to estimate
//! marginal importance weights, and cross-fitted reward regressors.

pub mod posterior;
pub mod reward;

pub use posterior::{
    fit_action_posterior, fit_action_posterior_from, ActionPosteriorModel, FeatureMap,
    PosteriorHyper, PosteriorProblem,
};
pub use reward::{
    fit_mrdr_reward_model, fit_reward_model, CrossFitPlan, Provenance, RewardModel, RidgeHyper,
};

use crate::data::{LoggedDataset, PolicyProbs};
use crate::error::{Error, Result};

/// Estimated marginal weights and, per record, the posterior mass that fell
/// on actions the logging policy never takes (skipped in the sum).
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatedWeights {
    pub weights: Vec<f64>,
    pub skipped_mass: Vec<f64>,
}

impl EstimatedWeights {
    pub fn any_skipped(&self) -> bool {
        self.skipped_mass.iter().any(|m| *m > 0.0)
    }
}

/// `w_hat(x_i, e_i) = sum_a pi0_hat(a|x_i,e_i) pi(a|x_i) / pi0(a|x_i)` over
/// actions with `pi0(a|x_i) > 0`, from a row-per-record posterior.
pub fn marginal_weights_from_posterior<'a, I>(
    posterior_rows: I,
    target: &PolicyProbs,
    logging: &PolicyProbs,
) -> Result<EstimatedWeights>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    if target.len() != logging.len() || target.num_actions() != logging.num_actions() {
        return Err(Error::InvalidInput(
            "target and logging matrices differ in shape".into(),
        ));
    }
    let mut weights = Vec::with_capacity(target.len());
    let mut skipped_mass = Vec::with_capacity(target.len());
    for (i, post) in posterior_rows.into_iter().enumerate() {
        if i >= target.len() || post.len() != target.num_actions() {
            return Err(Error::InvalidInput(
                "posterior rows do not match the policies".into(),
            ));
        }
        let (pi, pi0) = (target.row(i), logging.row(i));
        let mut w = 0.0;
        let mut skipped = 0.0;
        for a in 0..post.len() {
            if pi0[a] > 0.0 {
                w += post[a] * pi[a] / pi0[a];
            } else {
                skipped += post[a];
            }
        }
        weights.push(w);
        skipped_mass.push(skipped);
    }
    if weights.len() != target.len() {
        return Err(Error::InvalidInput(
            "posterior rows do not cover every record".into(),
        ));
    }
    Ok(EstimatedWeights {
        weights,
        skipped_mass,
    })
}

/// Marginal weights from a fitted posterior model.
pub fn estimate_marginal_weights(
    data: &LoggedDataset,
    target: &PolicyProbs,
    logging: &PolicyProbs,
    posterior: &ActionPosteriorModel,
) -> Result<EstimatedWeights> {
    if target.len() != data.len() {
        return Err(Error::InvalidInput(
            "policy matrix does not match the dataset".into(),
        ));
    }
    let probs = posterior.predict_data(data);
    let rows = (0..probs.ncols()).map(|i| {
        let start = i * probs.nrows();
        &probs.as_slice()[start..start + probs.nrows()]
    });
    marginal_weights_from_posterior(rows, target, logging)
}
