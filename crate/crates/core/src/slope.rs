//! Lepski-style estimator selection (SLOPE++).
//!
//! Candidates are ordered by non-increasing confidence half-width `CNF`.
//! The selected candidate is the last one whose estimate stays within
//! `CNF(m) + (sqrt(6) - 1) CNF(j)` of every earlier candidate `j`. The
//! half-widths are Student-t intervals on the per-sample terms.

use serde::{Deserialize, Serialize};

use crate::data::{LoggedDataset, PolicyProbs};
use crate::error::{Error, Result};
use crate::estimators::{mips, shrunk_dr, vanilla_weights, EstimateRecord, RewardTerms, Shrinkage};
use crate::stats::{sample_std, student_t_quantile};

pub const DEFAULT_DELTA: f64 = 0.05;

/// `sqrt(6) - 1`.
pub const SLOPE_CONSTANT: f64 = 1.449_489_742_783_178;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEstimate {
    pub label: String,
    pub estimate: f64,
    pub cnf: f64,
    pub per_sample_terms: Vec<f64>,
}

impl CandidateEstimate {
    pub fn from_record(
        label: impl Into<String>,
        record: &EstimateRecord,
        delta: f64,
    ) -> Result<Self> {
        Ok(Self {
            label: label.into(),
            estimate: record.estimate,
            cnf: cnf(&record.per_sample_terms, delta)?,
            per_sample_terms: record.per_sample_terms.clone(),
        })
    }
}

/// `t_{1 - delta/2, n-1} * sd(terms) / sqrt(n)`.
pub fn cnf(terms: &[f64], delta: f64) -> Result<f64> {
    if terms.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "a confidence width needs at least 2 terms, got {}",
            terms.len()
        )));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::OutOfRange {
            name: "delta",
            value: delta,
            range: "(0, 1)",
        });
    }
    let sd = sample_std(terms);
    if sd == 0.0 {
        return Ok(0.0);
    }
    let n = terms.len() as f64;
    Ok(student_t_quantile(1.0 - delta / 2.0, n - 1.0) * sd / n.sqrt())
}

/// Index (into `candidates`) chosen by the SLOPE++ rule.
///
/// If the candidates are not already ordered by non-increasing `cnf` they
/// are stably reordered first; the returned index refers to the caller's
/// order.
pub fn slope_select(candidates: &[CandidateEstimate]) -> Result<usize> {
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if let Some(c) = candidates
        .iter()
        .find(|c| !(c.cnf.is_finite() && c.cnf >= 0.0))
    {
        return Err(Error::InvalidInput(format!(
            "candidate {} has cnf {}",
            c.label, c.cnf
        )));
    }
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    order.sort_by(|&a, &b| candidates[b].cnf.total_cmp(&candidates[a].cnf));
    let mut best = 0;
    for m in 1..order.len() {
        let cm = &candidates[order[m]];
        let compatible = order[..m].iter().all(|&j| {
            let cj = &candidates[j];
            (cm.estimate - cj.estimate).abs() <= cm.cnf + SLOPE_CONSTANT * cj.cnf
        });
        if compatible {
            best = m;
        }
    }
    Ok(order[best])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingSelection {
    pub dims: Vec<usize>,
    pub record: EstimateRecord,
    /// Candidate subsets in the order they were built.
    pub candidates: Vec<(Vec<usize>, CandidateEstimate)>,
    pub chosen: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SearchSpace {
    /// Nested subsets built from a single-dimension ranking.
    Greedy,
    /// Every nonempty subset; limited to at most 10 dimensions.
    Exhaustive,
}

fn label(dims: &[usize]) -> String {
    let parts: Vec<String> = dims.iter().map(usize::to_string).collect();
    format!("dims[{}]", parts.join(" "))
}

/// Selects the embedding dimensions used by MIPS.
///
/// `weights(dims)` returns the per-record marginal weights for the embedding
/// restricted to `dims` (estimated or exact). In greedy mode, each visible
/// dimension is first scored by the `cnf` of MIPS using it alone; nested
/// subsets are then grown by adding dimensions from the smallest to the
/// largest score, ending with the full visible set.
pub fn select_embedding_dims<F>(
    data: &LoggedDataset,
    delta: f64,
    space: SearchSpace,
    mut weights: F,
) -> Result<EmbeddingSelection>
where
    F: FnMut(&[usize]) -> Result<Vec<f64>>,
{
    let visible = data.visible_dims();
    if visible.is_empty() {
        return Err(Error::InvalidInput(
            "no observed embedding dimension".into(),
        ));
    }
    let mut evaluate = |dims: &[usize]| -> Result<CandidateEstimate> {
        let record = mips(data, &weights(dims)?)?;
        CandidateEstimate::from_record(label(dims), &record, delta)
    };

    let mut candidates = Vec::new();
    match space {
        SearchSpace::Greedy => {
            let mut scored = Vec::with_capacity(visible.len());
            for &k in &visible {
                let cand = evaluate(&[k])?;
                scored.push((k, cand));
            }
            scored.sort_by(|a, b| a.1.cnf.total_cmp(&b.1.cnf).then(a.0.cmp(&b.0)));
            let mut dims = Vec::new();
            for (k, single) in scored {
                dims.push(k);
                let cand = if dims.len() == 1 {
                    single
                } else {
                    evaluate(&dims)?
                };
                let mut sorted = dims.clone();
                sorted.sort_unstable();
                candidates.push((sorted, cand));
            }
        }
        SearchSpace::Exhaustive => {
            if visible.len() > 10 {
                return Err(Error::Config(format!(
                    "exhaustive search over {} dimensions is limited to 10",
                    visible.len()
                )));
            }
            for mask in 1u32..(1 << visible.len()) {
                let dims: Vec<usize> = (0..visible.len())
                    .filter(|b| mask & (1 << b) != 0)
                    .map(|b| visible[b])
                    .collect();
                let cand = evaluate(&dims)?;
                candidates.push((dims, cand));
            }
        }
    }
    let pool: Vec<CandidateEstimate> = candidates.iter().map(|(_, c)| c.clone()).collect();
    let chosen = slope_select(&pool)?;
    let (dims, cand) = &candidates[chosen];
    let record = EstimateRecord::from_terms("mips-slope", cand.per_sample_terms.clone());
    Ok(EmbeddingSelection {
        dims: dims.clone(),
        record,
        candidates,
        chosen,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub record: EstimateRecord,
    pub candidates: Vec<(f64, CandidateEstimate)>,
    pub chosen: usize,
}

/// Default hyperparameter grid for a shrinkage kind. The switch grid uses
/// the observed vanilla weights' deciles plus infinity.
pub fn default_grid(kind: Shrinkage, observed_weights: &[f64]) -> Vec<f64> {
    match kind {
        Shrinkage::Switch => {
            let mut sorted = observed_weights.to_vec();
            sorted.sort_by(f64::total_cmp);
            let mut grid: Vec<f64> = (1..=10)
                .filter_map(|d| {
                    if sorted.is_empty() {
                        return None;
                    }
                    let rank = ((d as f64 / 10.0) * sorted.len() as f64).ceil() as usize;
                    Some(sorted[rank.clamp(1, sorted.len()) - 1])
                })
                .collect();
            grid.push(f64::INFINITY);
            grid.dedup();
            grid
        }
        Shrinkage::Os => (-2..=4).map(|p| 10f64.powi(p)).collect(),
        Shrinkage::Lambda => (0..=10).map(|i| i as f64 / 10.0).collect(),
    }
}

/// Tunes the shrinkage hyperparameter of a DR variant with SLOPE++.
pub fn tune_lambda(
    data: &LoggedDataset,
    target: &PolicyProbs,
    q: &RewardTerms,
    kind: Shrinkage,
    grid: &[f64],
    delta: f64,
) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let mut candidates = Vec::with_capacity(grid.len());
    for &lam in grid {
        let record = shrunk_dr(data, target, q, kind, lam)?;
        let cand = CandidateEstimate::from_record(format!("{kind}:{lam}"), &record, delta)?;
        candidates.push((lam, cand));
    }
    let pool: Vec<CandidateEstimate> = candidates.iter().map(|(_, c)| c.clone()).collect();
    let chosen = slope_select(&pool)?;
    let (lambda, cand) = &candidates[chosen];
    let record = EstimateRecord::from_terms(
        format!("{}-slope", kind.name()),
        cand.per_sample_terms.clone(),
    );
    Ok(LambdaSelection {
        lambda: *lambda,
        record,
        candidates,
        chosen,
    })
}

/// [`tune_lambda`] over [`default_grid`].
pub fn tune_lambda_default(
    data: &LoggedDataset,
    target: &PolicyProbs,
    q: &RewardTerms,
    kind: Shrinkage,
    delta: f64,
) -> Result<LambdaSelection> {
    let w = vanilla_weights(data, target)?;
    tune_lambda(data, target, q, kind, &default_grid(kind, &w), delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cand(estimate: f64, cnf: f64) -> CandidateEstimate {
        CandidateEstimate {
            label: String::new(),
            estimate,
            cnf,
            per_sample_terms: Vec::new(),
        }
    }

    #[test]
    fn cnf_examples() {
        assert_eq!(cnf(&[3.0; 5], 0.05).unwrap(), 0.0);
        let w = cnf(&[0.0, 0.0, 2.0, 2.0], 0.05).unwrap();
        let expected = 3.182_446_305_284_263 * (4.0_f64 / 3.0).sqrt() / 2.0;
        assert_relative_eq!(w, expected, epsilon = 1e-9);
        assert_relative_eq!(w, 1.8373, epsilon = 1e-4);
        let doubled = cnf(&[0.0, 0.0, 4.0, 4.0], 0.05).unwrap();
        assert_relative_eq!(doubled, 2.0 * w, epsilon = 1e-12);
        assert!(cnf(&[1.0], 0.05).is_err());
        assert!(cnf(&[1.0, 2.0], 1.0).is_err());
    }

    #[test]
    fn selection_examples() {
        assert_eq!(slope_select(&[cand(1.0, 1.0)]).unwrap(), 0);
        assert_eq!(
            slope_select(&[cand(1.0, 3.0), cand(1.0, 2.0), cand(1.0, 1.0)]).unwrap(),
            2
        );
        let three = [cand(0.0, 1.0), cand(0.1, 0.5), cand(5.0, 0.1)];
        assert_eq!(slope_select(&three).unwrap(), 1);
        assert!(matches!(slope_select(&[]), Err(Error::EmptyCandidates)));
    }

    #[test]
    fn unordered_input_maps_index_back() {
        let shuffled = [cand(5.0, 0.1), cand(0.0, 1.0), cand(0.1, 0.5)];
        assert_eq!(slope_select(&shuffled).unwrap(), 2);
    }

    #[test]
    fn lambda_grids() {
        let g = default_grid(Shrinkage::Switch, &[5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(g.last(), Some(&f64::INFINITY));
        assert!(g.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(g[g.len() - 2], 5.0);
        assert_eq!(default_grid(Shrinkage::Os, &[]).len(), 7);
        assert_eq!(
            default_grid(Shrinkage::Lambda, &[]),
            vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
        );
    }
}
