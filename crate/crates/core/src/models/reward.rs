//! Cross-fitted ridge reward regressors `q_hat(x, e)` and their
//! action-marginalized form `q_hat(x, a)`.
//!
//! The feature map is context, one one-hot block per visible embedding
//! dimension, and a constant, with no interactions. Because the model is
//! additive across blocks, `q_hat(x, a) = E_{p(e|a)}[q_hat(x, e)]` is obtained
//! exactly by replacing each one-hot block with the probability vector
//! `p(e_k|a)`. Those vectors come from a known [`FactorizedEmbedModel`] when
//! one is available, and otherwise from per-action empirical frequencies in
//! the training folds.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{LoggedDataset, PolicyProbs};
use crate::error::{Error, Result};
use crate::estimators::{vanilla_weights, RewardTerms};
use crate::models::posterior::FeatureMap;
use crate::policy::FactorizedEmbedModel;
use crate::rng::{stream_rng, Stream};

/// Smallest ridge penalty used, which keeps the normal equations solvable
/// when one-hot blocks are collinear with the intercept.
pub const L2_FLOOR: f64 = 1e-6;

/// Record-to-fold assignment for cross-fitting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossFitPlan {
    folds: usize,
    assignment: Vec<usize>,
}

impl CrossFitPlan {
    /// Balanced random assignment of `n` records to `folds` folds.
    pub fn new(n: usize, folds: usize, seed: u64) -> Result<Self> {
        if folds < 2 {
            return Err(Error::Config(format!(
                "cross-fitting needs at least 2 folds, got {folds}"
            )));
        }
        if n < 2 * folds {
            return Err(Error::InvalidInput(format!(
                "{n} records are too few for {folds}-fold cross-fitting"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, Stream::Model, 0));
        let mut assignment = vec![0; n];
        for (rank, &i) in order.iter().enumerate() {
            assignment[i] = rank % folds;
        }
        Ok(Self { folds, assignment })
    }

    pub fn from_assignment(assignment: Vec<usize>) -> Result<Self> {
        let folds = assignment.iter().copied().max().map_or(0, |m| m + 1);
        if folds < 2 || (0..folds).any(|f| !assignment.contains(&f)) {
            return Err(Error::InvalidInput(
                "every fold must be nonempty and there must be at least 2".into(),
            ));
        }
        Ok(Self { folds, assignment })
    }

    pub fn folds(&self) -> usize {
        self.folds
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn fold_of(&self, i: usize) -> usize {
        self.assignment[i]
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.assignment[i] != fold)
            .collect()
    }

    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.assignment[i] == fold)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeHyper {
    pub l2: f64,
}

impl Default for RidgeHyper {
    fn default() -> Self {
        Self { l2: 1e-3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Plain,
    Mrdr,
}

#[derive(Debug, Clone)]
struct FoldModel {
    coef: DVector<f64>,
    /// Embedding part of `q_hat(x, a)` for every action.
    action_offsets: Vec<f64>,
}

/// A cross-fitted reward model over one dataset: record `i` is always scored
/// by the fold model that did not see it.
#[derive(Debug, Clone)]
pub struct RewardModel {
    provenance: Provenance,
    plan: CrossFitPlan,
    features: FeatureMap,
    folds: Vec<FoldModel>,
}

impl RewardModel {
    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn plan(&self) -> &CrossFitPlan {
        &self.plan
    }

    pub fn dims(&self) -> &[usize] {
        self.features.dims()
    }

    fn context_part(&self, fold: usize, context: &[f64]) -> f64 {
        let coef = &self.folds[fold].coef;
        let linear: f64 = context.iter().enumerate().map(|(j, x)| coef[j] * x).sum();
        linear + coef[self.features.intercept()]
    }

    /// Cross-fitted `q_hat(x_i, e_i)` for record `i` of the fitted dataset.
    pub fn q_xe(&self, i: usize, context: &[f64], embedding: &[usize]) -> f64 {
        let fold = self.plan.fold_of(i);
        let phi = DVector::from_vec(self.features.features(context, embedding));
        self.folds[fold].coef.dot(&phi)
    }

    /// Cross-fitted `q_hat(x_i, a)` for every action.
    pub fn q_xa(&self, i: usize, context: &[f64]) -> Vec<f64> {
        let fold = self.plan.fold_of(i);
        let c = self.context_part(fold, context);
        self.folds[fold]
            .action_offsets
            .iter()
            .map(|g| c + g)
            .collect()
    }

    /// Terms consumed by DM and the DR family for `target`.
    pub fn terms(&self, data: &LoggedDataset, target: &PolicyProbs) -> Result<RewardTerms> {
        if data.len() != self.plan.len() {
            return Err(Error::InvalidInput(format!(
                "model was fitted on {} records, dataset has {}",
                self.plan.len(),
                data.len()
            )));
        }
        let ctx: Vec<f64> = data
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| self.context_part(self.plan.fold_of(i), &r.context))
            .collect();
        RewardTerms::from_action_values(data, target, |i, a| {
            ctx[i] + self.folds[self.plan.fold_of(i)].action_offsets[a]
        })
    }
}

/// Weighted ridge: minimizes `sum_i s_i (r_i - beta' phi_i)^2 + l2 ||beta||^2`.
pub fn weighted_ridge(
    phi: &DMatrix<f64>,
    y: &[f64],
    sample_weight: &[f64],
    l2: f64,
) -> Result<DVector<f64>> {
    let f = phi.ncols();
    let mut gram = DMatrix::<f64>::zeros(f, f);
    let mut rhs = DVector::<f64>::zeros(f);
    for (i, row) in phi.row_iter().enumerate() {
        let s = sample_weight[i];
        if s == 0.0 {
            continue;
        }
        let row = row.transpose();
        gram.ger(s, &row, &row, 1.0);
        rhs.axpy(s * y[i], &row, 1.0);
    }
    let l2 = l2.max(L2_FLOOR);
    for j in 0..f {
        gram[(j, j)] += l2;
    }
    let chol = gram.cholesky().ok_or_else(|| {
        Error::InvalidInput("ridge normal equations are not positive definite".into())
    })?;
    Ok(chol.solve(&rhs))
}

/// Weighted ridge objective, used to compare fitted models.
pub fn weighted_ridge_objective(
    phi: &DMatrix<f64>,
    y: &[f64],
    sample_weight: &[f64],
    l2: f64,
    coef: &DVector<f64>,
) -> f64 {
    let pred = phi * coef;
    let fit: f64 = (0..y.len())
        .map(|i| sample_weight[i] * (y[i] - pred[i]).powi(2))
        .sum();
    fit + l2.max(L2_FLOOR) * coef.norm_squared()
}

fn empirical_embed_probs(
    data: &LoggedDataset,
    indices: &[usize],
    features: &FeatureMap,
) -> Vec<Vec<Vec<f64>>> {
    let num_actions = data.num_actions();
    let dims = features.dims();
    let mut counts = vec![vec![Vec::new(); dims.len()]; num_actions];
    let mut overall: Vec<Vec<f64>> = (0..dims.len())
        .map(|s| vec![0.0; features.cardinality(s)])
        .collect();
    for per_action in counts.iter_mut() {
        for (slot, c) in per_action.iter_mut().enumerate() {
            *c = vec![0.0; features.cardinality(slot)];
        }
    }
    for &i in indices {
        let r = &data.records()[i];
        for (slot, &k) in dims.iter().enumerate() {
            counts[r.action][slot][r.embedding[k]] += 1.0;
            overall[slot][r.embedding[k]] += 1.0;
        }
    }
    for per_action in counts.iter_mut() {
        for (slot, c) in per_action.iter_mut().enumerate() {
            let total: f64 = c.iter().sum();
            if total > 0.0 {
                c.iter_mut().for_each(|v| *v /= total);
            } else {
                let all: f64 = overall[slot].iter().sum();
                *c = overall[slot].iter().map(|v| v / all).collect();
            }
        }
    }
    counts
}

fn fit(
    data: &LoggedDataset,
    plan: &CrossFitPlan,
    hyper: &RidgeHyper,
    embed: Option<&FactorizedEmbedModel>,
    sample_weight: &[f64],
    provenance: Provenance,
) -> Result<RewardModel> {
    if plan.len() != data.len() {
        return Err(Error::InvalidInput(format!(
            "plan covers {} records, dataset has {}",
            plan.len(),
            data.len()
        )));
    }
    if let Some(m) = embed {
        if m.num_actions() != data.num_actions()
            || m.cardinalities() != data.embedding_cardinalities()
        {
            return Err(Error::InvalidInput(
                "embedding model does not match the dataset".into(),
            ));
        }
    }
    let dims = data.visible_dims();
    let features = FeatureMap::new(data.context_dim(), data.embedding_cardinalities(), &dims)?;
    let phi = features.design(data.records());
    let rewards = data.rewards();
    let mut folds = Vec::with_capacity(plan.folds());
    for fold in 0..plan.folds() {
        let train = plan.train_indices(fold);
        let mut weight = vec![0.0; data.len()];
        for &i in &train {
            weight[i] = sample_weight[i];
        }
        let coef = weighted_ridge(&phi, &rewards, &weight, hyper.l2)?;
        let probs = match embed {
            Some(_) => None,
            None => Some(empirical_embed_probs(data, &train, &features)),
        };
        let action_offsets = (0..data.num_actions())
            .map(|a| {
                let mut g = 0.0;
                for (slot, &k) in dims.iter().enumerate() {
                    for v in 0..features.cardinality(slot) {
                        let p = match (embed, &probs) {
                            (Some(m), _) => m.dim(a, k).prob(v),
                            (None, Some(p)) => p[a][slot][v],
                            (None, None) => unreachable!(),
                        };
                        g += p * coef[features.category_column(slot, v)];
                    }
                }
                g
            })
            .collect();
        folds.push(FoldModel {
            coef,
            action_offsets,
        });
    }
    Ok(RewardModel {
        provenance,
        plan: plan.clone(),
        features,
        folds,
    })
}

/// Cross-fitted ridge regression of reward on context and visible embedding.
pub fn fit_reward_model(
    data: &LoggedDataset,
    plan: &CrossFitPlan,
    hyper: &RidgeHyper,
    embed: Option<&FactorizedEmbedModel>,
) -> Result<RewardModel> {
    fit(
        data,
        plan,
        hyper,
        embed,
        &vec![1.0; data.len()],
        Provenance::Plain,
    )
}

/// As [`fit_reward_model`] with per-sample weight `w(x_i, a_i)^2`.
pub fn fit_mrdr_reward_model(
    data: &LoggedDataset,
    target: &PolicyProbs,
    plan: &CrossFitPlan,
    hyper: &RidgeHyper,
    embed: Option<&FactorizedEmbedModel>,
) -> Result<RewardModel> {
    let w: Vec<f64> = vanilla_weights(data, target)?
        .iter()
        .map(|w| w * w)
        .collect();
    fit(data, plan, hyper, embed, &w, Provenance::Mrdr)
}
