//! Monte-Carlo draws of single-record estimator terms on a tabular instance.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::instance::{RewardFamily, TabularInstance};
use crate::error::{Error, Result};
use crate::policy::sample_categorical;
use crate::rng::Rng;
use crate::stats::stable_mean;

#[derive(Debug, Clone, PartialEq)]
pub enum TermKind {
    /// `w(x,a) r`
    Ips,
    /// `w(x,e) r` with the true marginal weights.
    Mips,
    /// `w_hat(x,e) r` for a `[x][e]` weight table.
    MipsWith(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTerms {
    pub reps: usize,
    pub mean: f64,
    pub std_error: f64,
    pub variance: f64,
    /// Large-sample standard error of `variance`.
    pub variance_std_error: f64,
}

/// Draws `reps` logged records `(x, a, e, r)` and summarizes the chosen
/// estimator term. Each draw is a one-record dataset, so `mean` estimates
/// the estimator's expectation and `variance` its single-sample variance.
pub fn simulate_terms(
    inst: &TabularInstance,
    kind: &TermKind,
    reps: usize,
    rng: &mut Rng,
) -> Result<SimulatedTerms> {
    if reps < 2 {
        return Err(Error::InvalidInput(
            "at least two replications are needed".into(),
        ));
    }
    let marginal = match kind {
        TermKind::Ips => None,
        TermKind::Mips => Some(inst.marginal_weight_table()),
        TermKind::MipsWith(table) => {
            if table.len() != inst.num_contexts()
                || table.iter().any(|r| r.len() != inst.num_embeddings())
            {
                return Err(Error::InvalidInput(
                    "weight table must be contexts x embeddings".into(),
                ));
            }
            Some(table.clone())
        }
    };
    let mut terms = Vec::with_capacity(reps);
    for _ in 0..reps {
        let x = sample_categorical(&inst.context_probs, rng);
        let a = sample_categorical(&inst.logging[x], rng);
        let e = sample_categorical(&inst.embedding[x][a], rng);
        let q = inst.q[x][a][e];
        let sd = (inst.second_moment[x][a][e] - q * q).max(0.0).sqrt();
        let r = match inst.family {
            RewardFamily::TwoPoint => {
                if rng.random::<bool>() {
                    q + sd
                } else {
                    q - sd
                }
            }
            RewardFamily::Gaussian => q + sd * rng.sample::<f64, _>(StandardNormal),
        };
        let w = match &marginal {
            None => inst
                .vanilla_weight(x, a)
                .expect("logged actions have positive propensity"),
            Some(table) => table[x][e],
        };
        terms.push(w * r);
    }
    let n = reps as f64;
    let mean = stable_mean(&terms);
    let m2 = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let m4 = terms.iter().map(|t| (t - mean).powi(4)).sum::<f64>() / n;
    Ok(SimulatedTerms {
        reps,
        mean,
        std_error: (m2 * n / (n - 1.0) / n).sqrt(),
        variance: m2 * n / (n - 1.0),
        variance_std_error: ((m4 - m2 * m2).max(0.0) / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{exact_value, ips_moments, random_instance, InstanceShape};
    use crate::rng::seeded;

    #[test]
    fn simulated_ips_matches_enumeration() {
        let mut rng = seeded(21);
        let mut shape = InstanceShape::new(3, 3, 3);
        shape.family = RewardFamily::Gaussian;
        let inst = random_instance(&mut rng, &shape).unwrap();
        let sim = simulate_terms(&inst, &TermKind::Ips, 200_000, &mut rng).unwrap();
        let exact = ips_moments(&inst);
        assert!((sim.mean - exact_value(&inst, &inst.target)).abs() <= 4.0 * sim.std_error);
        assert!((sim.variance - exact.variance).abs() <= 4.0 * sim.variance_std_error);
    }

    #[test]
    fn rejects_bad_tables() {
        let inst = TabularInstance::table1();
        let mut rng = seeded(1);
        assert!(simulate_terms(&inst, &TermKind::MipsWith(vec![vec![1.0]]), 10, &mut rng).is_err());
        assert!(simulate_terms(&inst, &TermKind::Mips, 1, &mut rng).is_err());
    }
}
