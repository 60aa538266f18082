//! Multinomial logistic regression of the logged action on context and
//! embedding, used as the action posterior `pi0_hat(a|x,e)`.
//!
//! Features are the context, a one-hot block per selected embedding
//! dimension, and a constant. The objective is the mean cross-entropy plus
//! `l2/2 * ||W||^2` over every non-intercept coefficient. It is minimized by
//! full-batch gradient descent with a fixed per-column scaling (an upper
//! bound on each column's curvature): each iteration proposes a
//! Barzilai-Borwein step and backtracks until the Armijo condition holds, so
//! the accepted loss sequence is monotone.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data::{LoggedDataset, LoggedRecord};
use crate::error::{Error, Result};
use crate::policy::Distribution;

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorHyper {
    pub l2: f64,
    pub max_iters: usize,
    /// Stop once the gradient's Frobenius norm falls to this level.
    pub tol: f64,
}

impl Default for PosteriorHyper {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            max_iters: 500,
            tol: 1e-6,
        }
    }
}

/// Maps a record to its dense feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    context_dim: usize,
    dims: Vec<usize>,
    cardinalities: Vec<usize>,
    /// Offset of each selected dimension's one-hot block.
    offsets: Vec<usize>,
    width: usize,
}

impl FeatureMap {
    pub fn new(context_dim: usize, cardinalities: &[usize], dims: &[usize]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut width = context_dim;
        for (i, &k) in dims.iter().enumerate() {
            if k >= cardinalities.len() || dims[..i].contains(&k) {
                return Err(Error::InvalidInput(format!(
                    "bad embedding dim {k} in {dims:?}"
                )));
            }
            offsets.push(width);
            width += cardinalities[k];
        }
        Ok(Self {
            context_dim,
            dims: dims.to_vec(),
            cardinalities: cardinalities.to_vec(),
            offsets,
            width: width + 1,
        })
    }

    /// Number of features including the intercept.
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    pub fn intercept(&self) -> usize {
        self.width - 1
    }

    /// Column of category `v` of dimension `self.dims()[slot]`.
    pub fn category_column(&self, slot: usize, v: usize) -> usize {
        self.offsets[slot] + v
    }

    pub fn cardinality(&self, slot: usize) -> usize {
        self.cardinalities[self.dims[slot]]
    }

    pub fn write(&self, context: &[f64], embedding: &[usize], out: &mut [f64]) {
        out.fill(0.0);
        out[..self.context_dim].copy_from_slice(context);
        for (slot, &k) in self.dims.iter().enumerate() {
            out[self.offsets[slot] + embedding[k]] = 1.0;
        }
        out[self.width - 1] = 1.0;
    }

    pub fn features(&self, context: &[f64], embedding: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.width];
        self.write(context, embedding, &mut out);
        out
    }

    /// `n x F` design matrix.
    pub fn design(&self, records: &[LoggedRecord]) -> DMatrix<f64> {
        let mut phi = DMatrix::zeros(records.len(), self.width);
        let mut row = vec![0.0; self.width];
        for (i, r) in records.iter().enumerate() {
            self.write(&r.context, &r.embedding, &mut row);
            for (j, v) in row.iter().enumerate() {
                phi[(i, j)] = *v;
            }
        }
        phi
    }
}

/// The regularized cross-entropy objective on a fixed design.
pub struct PosteriorProblem {
    num_actions: usize,
    phi: DMatrix<f64>,
    phi_t: DMatrix<f64>,
    labels: Vec<usize>,
    l2: f64,
    intercept: usize,
}

impl PosteriorProblem {
    pub fn new(phi: DMatrix<f64>, labels: Vec<usize>, num_actions: usize, l2: f64) -> Result<Self> {
        if phi.nrows() != labels.len() || labels.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{} labels for {} design rows",
                labels.len(),
                phi.nrows()
            )));
        }
        if labels.iter().any(|&a| a >= num_actions) {
            return Err(Error::InvalidInput("label outside the action set".into()));
        }
        if !(l2.is_finite() && l2 >= 0.0) {
            return Err(Error::OutOfRange {
                name: "l2",
                value: l2,
                range: "[0, inf)",
            });
        }
        let intercept = phi.ncols() - 1;
        Ok(Self {
            num_actions,
            phi_t: phi.transpose(),
            phi,
            labels,
            l2,
            intercept,
        })
    }

    pub fn num_params(&self) -> (usize, usize) {
        (self.num_actions, self.phi.ncols())
    }

    /// Per-column inverse curvature bound used to scale gradient steps:
    /// `1 / (mean_i phi_ij^2 / 2 + l2)` (no `l2` for the intercept).
    fn column_scaling(&self) -> Vec<f64> {
        let n = self.labels.len() as f64;
        (0..self.phi.ncols())
            .map(|j| {
                let curv = 0.5 * self.phi.column(j).norm_squared() / n;
                let pen = if j == self.intercept { 0.0 } else { self.l2 };
                1.0 / (curv + pen).max(1e-12)
            })
            .collect()
    }

    fn penalty(&self, w: &DMatrix<f64>) -> f64 {
        let mut total = 0.0;
        for j in 0..w.ncols() {
            if j != self.intercept {
                total += w.column(j).norm_squared();
            }
        }
        0.5 * self.l2 * total
    }

    /// Logits `W phi_i` as the columns of an `|A| x n` matrix.
    fn logits(&self, w: &DMatrix<f64>) -> DMatrix<f64> {
        w * &self.phi_t
    }

    pub fn loss(&self, w: &DMatrix<f64>) -> f64 {
        let z = self.logits(w);
        let mut total = 0.0;
        for (i, col) in z.column_iter().enumerate() {
            total += log_sum_exp(col.as_slice()) - col[self.labels[i]];
        }
        total / self.labels.len() as f64 + self.penalty(w)
    }

    /// Objective value and its gradient with respect to `W` (`|A| x F`).
    pub fn loss_and_gradient(&self, w: &DMatrix<f64>) -> (f64, DMatrix<f64>) {
        let n = self.labels.len() as f64;
        let mut z = self.logits(w);
        let mut total = 0.0;
        for (i, mut col) in z.column_iter_mut().enumerate() {
            let lse = log_sum_exp(col.as_slice());
            let y = self.labels[i];
            total += lse - col[y];
            for v in col.iter_mut() {
                *v = (*v - lse).exp() / n;
            }
            col[y] -= 1.0 / n;
        }
        let mut grad = z * &self.phi;
        for j in 0..grad.ncols() {
            if j != self.intercept {
                grad.column_mut(j).axpy(self.l2, &w.column(j), 1.0);
            }
        }
        (total / n + self.penalty(w), grad)
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

#[derive(Debug, Clone)]
pub struct ActionPosteriorModel {
    features: FeatureMap,
    num_actions: usize,
    /// `|A| x F` coefficients.
    weights: DMatrix<f64>,
    /// Set when the training labels contain a single action; the model then
    /// predicts that action with probability one.
    constant: Option<usize>,
    pub iterations: usize,
    pub final_loss: f64,
    pub converged: bool,
    /// Objective after every accepted step, starting from the initial point.
    pub loss_trace: Vec<f64>,
    pub warning: Option<String>,
}

impl ActionPosteriorModel {
    pub fn dims(&self) -> &[usize] {
        self.features.dims()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn is_constant(&self) -> bool {
        self.constant.is_some()
    }

    pub fn predict(&self, context: &[f64], embedding: &[usize]) -> Result<Distribution> {
        if let Some(a) = self.constant {
            return Ok(Distribution::one_hot(self.num_actions, a));
        }
        let phi = nalgebra::DVector::from_vec(self.features.features(context, embedding));
        let z = &self.weights * phi;
        softmax_column(z.as_slice())
    }

    /// Posterior rows for every record, as an `|A| x n` matrix of
    /// probabilities.
    pub fn predict_data(&self, data: &LoggedDataset) -> DMatrix<f64> {
        let n = data.len();
        if let Some(a) = self.constant {
            let mut out = DMatrix::zeros(self.num_actions, n);
            out.row_mut(a).fill(1.0);
            return out;
        }
        let phi_t = self.features.design(data.records()).transpose();
        let mut z = &self.weights * phi_t;
        for mut col in z.column_iter_mut() {
            let lse = log_sum_exp(col.as_slice());
            for v in col.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        z
    }
}

fn softmax_column(z: &[f64]) -> Result<Distribution> {
    let lse = log_sum_exp(z);
    Distribution::from_weights(z.iter().map(|v| (v - lse).exp()).collect())
}

/// Fits `pi0_hat(a|x,e)` on the embedding dimensions `dims`.
pub fn fit_action_posterior(
    data: &LoggedDataset,
    dims: &[usize],
    hyper: &PosteriorHyper,
) -> Result<ActionPosteriorModel> {
    fit_action_posterior_from(data, dims, hyper, None)
}

/// As [`fit_action_posterior`], starting from the coefficients of `init` for
/// every feature the two models share (context, intercept, and common
/// embedding dimensions); new features start at zero.
pub fn fit_action_posterior_from(
    data: &LoggedDataset,
    dims: &[usize],
    hyper: &PosteriorHyper,
    init: Option<&ActionPosteriorModel>,
) -> Result<ActionPosteriorModel> {
    let visible = data.visible_dims();
    if let Some(k) = dims.iter().find(|k| !visible.contains(k)) {
        return Err(Error::InvalidInput(format!(
            "embedding dim {k} is not observed"
        )));
    }
    if hyper.tol.is_nan() || hyper.tol < 0.0 {
        return Err(Error::OutOfRange {
            name: "tol",
            value: hyper.tol,
            range: "[0, inf)",
        });
    }
    let num_actions = data.num_actions();
    if data.len() < num_actions {
        warn!(
            "fitting an action posterior with {} records for {} actions",
            data.len(),
            num_actions
        );
    }
    let features = FeatureMap::new(data.context_dim(), data.embedding_cardinalities(), dims)?;
    let labels: Vec<usize> = data.records().iter().map(|r| r.action).collect();
    let f = features.width();

    if labels.iter().all(|&a| a == labels[0]) {
        let msg = format!(
            "all {} records share action {}; using a constant model",
            labels.len(),
            labels[0]
        );
        warn!("{msg}");
        return Ok(ActionPosteriorModel {
            features,
            num_actions,
            weights: DMatrix::zeros(num_actions, f),
            constant: Some(labels[0]),
            iterations: 0,
            final_loss: 0.0,
            converged: true,
            loss_trace: vec![0.0],
            warning: Some(msg),
        });
    }

    let problem = PosteriorProblem::new(
        features.design(data.records()),
        labels,
        num_actions,
        hyper.l2,
    )?;
    let mut w = match init {
        Some(prev) if prev.constant.is_none() => transfer_weights(prev, &features, num_actions),
        _ => DMatrix::zeros(num_actions, f),
    };

    let scaling = problem.column_scaling();
    let scaled = |g: &DMatrix<f64>| {
        let mut d = g.clone();
        for (j, c) in scaling.iter().enumerate() {
            d.column_mut(j).scale_mut(*c);
        }
        d
    };
    let (mut loss, mut grad) = problem.loss_and_gradient(&w);
    let mut trace = vec![loss];
    let mut step = 1.0;
    let mut prev: Option<(DMatrix<f64>, DMatrix<f64>)> = None;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < hyper.max_iters {
        if grad.norm() <= hyper.tol {
            converged = true;
            break;
        }
        let direction = scaled(&grad);
        let decrease = grad.dot(&direction);
        if let Some((w_old, g_old)) = &prev {
            // Barzilai-Borwein step in the scaled metric
            let s = &w - w_old;
            let y = &grad - g_old;
            let sy = s.dot(&y);
            let ss: f64 = (0..s.ncols())
                .map(|j| s.column(j).norm_squared() / scaling[j])
                .sum();
            if sy > 0.0 {
                step = (ss / sy).clamp(1e-10, 1e10);
            } else {
                step *= 2.0;
            }
        }
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let candidate = &w - step * &direction;
            let cand_loss = problem.loss(&candidate);
            if cand_loss <= loss - ARMIJO * step * decrease {
                accepted = Some(candidate);
                break;
            }
            step *= 0.5;
        }
        let Some(w_new) = accepted else {
            break;
        };
        let (new_loss, new_grad) = problem.loss_and_gradient(&w_new);
        prev = Some((
            std::mem::replace(&mut w, w_new),
            std::mem::replace(&mut grad, new_grad),
        ));
        loss = new_loss;
        trace.push(loss);
        iterations += 1;
    }
    if !converged && grad.norm() <= hyper.tol {
        converged = true;
    }

    Ok(ActionPosteriorModel {
        features,
        num_actions,
        weights: w,
        constant: None,
        iterations,
        final_loss: loss,
        converged,
        loss_trace: trace,
        warning: None,
    })
}

fn transfer_weights(
    prev: &ActionPosteriorModel,
    features: &FeatureMap,
    num_actions: usize,
) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(num_actions, features.width());
    let old = &prev.features;
    for j in 0..features.context_dim().min(old.context_dim()) {
        w.set_column(j, &prev.weights.column(j));
    }
    w.set_column(features.intercept(), &prev.weights.column(old.intercept()));
    for (slot, k) in features.dims().iter().enumerate() {
        if let Some(old_slot) = old.dims().iter().position(|d| d == k) {
            for v in 0..features.cardinality(slot) {
                w.set_column(
                    features.category_column(slot, v),
                    &prev.weights.column(old.category_column(old_slot, v)),
                );
            }
        }
    }
    w
}
