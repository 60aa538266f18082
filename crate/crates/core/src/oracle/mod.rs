//! Exact bias, variance and MSE of IPS and MIPS on finite tabular instances,
//! computed by enumeration, plus Monte-Carlo cross-checks.
//!
//! Variances are single-sample quantities: for an estimator averaging `n`
//! i.i.d. terms, `n * V[estimate]` equals the variance of one term.

mod checks;
mod instance;
mod simulate;

pub use checks::{
    allowed_exceedances, run_oracle_checks, variance_reduction_counterexample, CheckOutcome,
    CheckVerdict, OracleCheckConfig,
};
pub use instance::{
    random_instance, InstanceShape, RewardFamily, TabularInstance, EFFECT_TOL, PROB_FLOOR,
};
pub use simulate::{simulate_terms, SimulatedTerms, TermKind};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use instance::dot;

/// `V(policy) = sum_x p(x) sum_a policy(a|x) sum_e p(e|x,a) q(x,a,e)`.
pub fn exact_value(inst: &TabularInstance, policy: &[Vec<f64>]) -> f64 {
    (0..inst.num_contexts())
        .map(|x| inst.context_probs[x] * dot(&policy[x], &q_row(inst, x)))
        .sum()
}

fn q_row(inst: &TabularInstance, x: usize) -> Vec<f64> {
    (0..inst.num_actions()).map(|a| inst.q_xa(x, a)).collect()
}

/// Enumerates `E[f(x,a,e)]` over `x ~ p(x)`, `a ~ pi0(a|x)`, `e ~ p(e|x,a)`.
fn logged_expectation(
    inst: &TabularInstance,
    mut f: impl FnMut(usize, usize, usize) -> f64,
) -> f64 {
    let mut total = 0.0;
    for x in 0..inst.num_contexts() {
        for a in 0..inst.num_actions() {
            let pa = inst.context_probs[x] * inst.logging[x][a];
            if pa == 0.0 {
                continue;
            }
            for e in 0..inst.num_embeddings() {
                let p = pa * inst.embedding[x][a][e];
                if p > 0.0 {
                    total += p * f(x, a, e);
                }
            }
        }
    }
    total
}

fn vanilla_table(inst: &TabularInstance) -> Vec<Vec<f64>> {
    (0..inst.num_contexts())
        .map(|x| {
            (0..inst.num_actions())
                .map(|a| inst.vanilla_weight(x, a).unwrap_or(0.0))
                .collect()
        })
        .collect()
}

/// Mean and single-sample variance of an estimator's per-record term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermMoments {
    pub mean: f64,
    pub variance: f64,
}

/// Moments of `w(x,a) r` under the logging distribution.
pub fn ips_moments(inst: &TabularInstance) -> TermMoments {
    let w = vanilla_table(inst);
    term_moments(inst, |x, a, _| w[x][a])
}

/// Moments of `w_hat(x,e) r` for a `[x][e]` weight table.
pub fn mips_moments(inst: &TabularInstance, weights: &[Vec<f64>]) -> TermMoments {
    term_moments(inst, |x, _, e| weights[x][e])
}

fn term_moments(
    inst: &TabularInstance,
    weight: impl Fn(usize, usize, usize) -> f64,
) -> TermMoments {
    let mean = logged_expectation(inst, |x, a, e| weight(x, a, e) * inst.q[x][a][e]);
    let second = logged_expectation(inst, |x, a, e| {
        weight(x, a, e).powi(2) * inst.second_moment[x][a][e]
    });
    TermMoments {
        mean,
        variance: second - mean * mean,
    }
}

/// Magnitude of the IPS bias caused by deficient actions:
/// `E_x[sum_{a: pi0(a|x)=0} pi(a|x) q(x,a)]`. IPS underestimates by this
/// amount.
pub fn exact_ips_deficiency_bias(inst: &TabularInstance) -> f64 {
    (0..inst.num_contexts())
        .map(|x| {
            let s: f64 = (0..inst.num_actions())
                .filter(|&a| inst.logging[x][a] == 0.0)
                .map(|a| inst.target[x][a] * inst.q_xa(x, a))
                .sum();
            inst.context_probs[x] * s
        })
        .sum()
}

/// `E_D[MIPS with true weights] - V(pi)`, by direct enumeration. Valid with
/// or without any of the support and no-direct-effect assumptions.
pub fn direct_mips_bias(inst: &TabularInstance) -> f64 {
    mips_moments(inst, &inst.marginal_weight_table()).mean - exact_value(inst, &inst.target)
}

/// MIPS bias from the pairwise-covariance form
/// `E_{x, e ~ pi0}[sum_{a<b} pi0(a|x,e) pi0(b|x,e) (q(x,a,e) - q(x,b,e)) (w(x,b) - w(x,a))]`.
///
/// Requires both common support and common embedding support: without
/// common support the pairwise form omits the mass of deficient actions
/// and no longer equals the bias (see [`direct_mips_bias`]).
pub fn exact_mips_bias(inst: &TabularInstance) -> Result<f64> {
    if !inst.common_embedding_support() {
        return Err(Error::AssumptionViolated(
            "common embedding support fails; use exact_bias_deficient_embedding".into(),
        ));
    }
    if !inst.common_support() {
        return Err(Error::AssumptionViolated(
            "common support fails; the pairwise form omits deficient actions, use direct_mips_bias"
                .into(),
        ));
    }
    let na = inst.num_actions();
    let mut total = 0.0;
    for x in 0..inst.num_contexts() {
        let p0 = inst.embedding_marginal(x, &inst.logging);
        for (e, pe) in p0.iter().enumerate() {
            let Some(post) = inst.posterior(x, e) else {
                continue;
            };
            let w: Vec<f64> = (0..na)
                .map(|a| inst.vanilla_weight(x, a).unwrap_or(0.0))
                .collect();
            let mut pairs = 0.0;
            for a in 0..na {
                for b in a + 1..na {
                    pairs +=
                        post[a] * post[b] * (inst.q[x][a][e] - inst.q[x][b][e]) * (w[b] - w[a]);
                }
            }
            total += inst.context_probs[x] * pe * pairs;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceReduction {
    /// `E_{x, e ~ pi0}[E[r^2|x,e] V_{pi0(a|x,e)}[w(x,a)]]`.
    pub value: f64,
    /// Single-sample variance of the IPS term, from first principles.
    pub ips_variance: f64,
    /// Single-sample variance of the MIPS term, from first principles.
    pub mips_variance: f64,
}

/// Variance reduction of MIPS over IPS. Requires common support, common
/// embedding support and no direct effect.
pub fn exact_variance_reduction(inst: &TabularInstance) -> Result<VarianceReduction> {
    require_all_assumptions(inst)?;
    let na = inst.num_actions();
    let mut value = 0.0;
    for x in 0..inst.num_contexts() {
        let w: Vec<f64> = (0..na)
            .map(|a| inst.vanilla_weight(x, a).unwrap_or(0.0))
            .collect();
        let p0 = inst.embedding_marginal(x, &inst.logging);
        for (e, pe) in p0.iter().enumerate() {
            let Some(post) = inst.posterior(x, e) else {
                continue;
            };
            let r2: f64 = (0..na).map(|a| post[a] * inst.second_moment[x][a][e]).sum();
            let mean_w = dot(&post, &w);
            let var_w: f64 = (0..na).map(|a| post[a] * (w[a] - mean_w).powi(2)).sum();
            value += inst.context_probs[x] * pe * r2 * var_w;
        }
    }
    Ok(VarianceReduction {
        value,
        ips_variance: ips_moments(inst).variance,
        mips_variance: mips_moments(inst, &inst.marginal_weight_table()).variance,
    })
}

fn require_all_assumptions(inst: &TabularInstance) -> Result<()> {
    if !inst.common_support() {
        return Err(Error::AssumptionViolated("common support fails".into()));
    }
    if !inst.common_embedding_support() {
        return Err(Error::AssumptionViolated(
            "common embedding support fails".into(),
        ));
    }
    if !inst.no_direct_effect() {
        return Err(Error::AssumptionViolated(
            "the action has a direct effect on the reward".into(),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MseGain {
    /// `E_{pi0}[(w(x,a)^2 - w(x,e)^2) E[r^2|x,a,e]] + 2 V(pi) B + (1 - n) B^2`.
    pub value: f64,
    /// `n (MSE(IPS) - MSE(MIPS))` from the exact biases and variances.
    pub direct: f64,
}

/// `n (MSE(IPS) - MSE(MIPS))` for datasets of size `n`. Requires common
/// support and common embedding support.
pub fn exact_mse_gain(inst: &TabularInstance, n: usize) -> Result<MseGain> {
    if n == 0 {
        return Err(Error::InvalidInput("sample size must be positive".into()));
    }
    let bias = exact_mips_bias(inst)?;
    let v = exact_value(inst, &inst.target);
    let wa = vanilla_table(inst);
    let we = inst.marginal_weight_table();
    let first = logged_expectation(inst, |x, a, e| {
        (wa[x][a].powi(2) - we[x][e].powi(2)) * inst.second_moment[x][a][e]
    });
    let nf = n as f64;
    let value = first + 2.0 * v * bias + (1.0 - nf) * bias * bias;

    let ips = ips_moments(inst);
    let mips = mips_moments(inst, &we);
    let ips_bias = ips.mean - v;
    let mips_bias = mips.mean - v;
    let mse_ips = ips_bias * ips_bias + ips.variance / nf;
    let mse_mips = mips_bias * mips_bias + mips.variance / nf;
    Ok(MseGain {
        value,
        direct: nf * (mse_ips - mse_mips),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatedWeightMoments {
    /// `Bias(MIPS) - E_{x, e ~ pi}[delta(x,e) q(x,pi0,e)]`.
    pub bias: f64,
    /// The three-term decomposition of the single-sample variance.
    pub variance: f64,
    /// Bias of `w_hat(x,e) r` by direct enumeration.
    pub direct_bias: f64,
    /// Single-sample variance of `w_hat(x,e) r` by direct enumeration.
    pub direct_variance: f64,
}

/// Bias and variance of MIPS when the weights are `w_hat = (1 - delta) w`,
/// for a `[x][e]` table of relative errors `delta`. Requires common
/// embedding support.
pub fn exact_estimated_weight_bias_variance(
    inst: &TabularInstance,
    delta: &[Vec<f64>],
) -> Result<EstimatedWeightMoments> {
    if !inst.common_embedding_support() {
        return Err(Error::AssumptionViolated(
            "common embedding support fails".into(),
        ));
    }
    let (nx, na, ne) = (
        inst.num_contexts(),
        inst.num_actions(),
        inst.num_embeddings(),
    );
    if delta.len() != nx || delta.iter().any(|row| row.len() != ne) {
        return Err(Error::InvalidInput(
            "delta table must be contexts x embeddings".into(),
        ));
    }
    let w = inst.marginal_weight_table();
    let w_hat: Vec<Vec<f64>> = (0..nx)
        .map(|x| (0..ne).map(|e| (1.0 - delta[x][e]) * w[x][e]).collect())
        .collect();

    let mut correction = 0.0;
    let mut noise_term = 0.0;
    let mut within = 0.0;
    let mut outer = Vec::with_capacity(nx);
    for x in 0..nx {
        let pe = inst.embedding_marginal(x, &inst.target);
        let mut inner_mean = 0.0;
        for e in 0..ne {
            let Some(post) = inst.posterior(x, e) else {
                continue;
            };
            let q_pi0: f64 = (0..na).map(|a| post[a] * inst.q[x][a][e]).sum();
            let sigma2: f64 = (0..na)
                .map(|a| post[a] * (inst.second_moment[x][a][e] - inst.q[x][a][e].powi(2)))
                .sum();
            let keep = 1.0 - delta[x][e];
            correction += inst.context_probs[x] * pe[e] * delta[x][e] * q_pi0;
            noise_term += inst.context_probs[x] * pe[e] * keep * keep * w[x][e] * sigma2;
            inner_mean += pe[e] * keep * q_pi0;
        }
        // V_{pi0(a|x) p(e|x,a)}[w_hat(x,e) q(x,a,e)]
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for a in 0..na {
            for (e, wh) in w_hat[x].iter().enumerate() {
                let p = inst.logging[x][a] * inst.embedding[x][a][e];
                let v = wh * inst.q[x][a][e];
                m1 += p * v;
                m2 += p * v * v;
            }
        }
        within += inst.context_probs[x] * (m2 - m1 * m1);
        outer.push(inner_mean);
    }
    let outer_mean = dot(&inst.context_probs, &outer);
    let between: f64 = inst
        .context_probs
        .iter()
        .zip(&outer)
        .map(|(p, m)| p * (m - outer_mean).powi(2))
        .sum();

    let direct = mips_moments(inst, &w_hat);
    let v = exact_value(inst, &inst.target);
    Ok(EstimatedWeightMoments {
        bias: direct_mips_bias(inst) - correction,
        variance: noise_term + within + between,
        direct_bias: direct.mean - v,
        direct_variance: direct.variance,
    })
}

/// Magnitude of the MIPS bias caused by embeddings the logging policy never
/// produces: `E_x[sum_{e: p(e|x,pi0)=0} p(e|x,pi) q(x,e)]`. MIPS
/// underestimates by this amount (the signed bias is its negative).
/// Requires no direct effect.
pub fn exact_bias_deficient_embedding(inst: &TabularInstance) -> Result<f64> {
    if !inst.no_direct_effect() {
        return Err(Error::AssumptionViolated(
            "the action has a direct effect on the reward".into(),
        ));
    }
    let mut total = 0.0;
    for x in 0..inst.num_contexts() {
        let p0 = inst.embedding_marginal(x, &inst.logging);
        let p = inst.embedding_marginal(x, &inst.target);
        for e in 0..inst.num_embeddings() {
            if p0[e] > 0.0 || p[e] == 0.0 {
                continue;
            }
            // q(x,e) is the same for every action producing e
            let post = inst
                .posterior_under(x, e, &inst.target)
                .expect("p(e|x,pi) > 0");
            let q: f64 = (0..inst.num_actions())
                .map(|a| post[a] * inst.q[x][a][e])
                .sum();
            total += inst.context_probs[x] * p[e] * q;
        }
    }
    Ok(total)
}

/// Both sides of the covariance identity
/// `sum_a f(a) g(a) (h(a) - sum_b g(b) h(b)) = sum_{a<b} g(a) g(b) (h(a) - h(b)) (f(a) - f(b))`
/// for `g` on the simplex.
pub fn covariance_identity(f: &[f64], g: &[f64], h: &[f64]) -> Result<(f64, f64)> {
    if f.is_empty() || f.len() != g.len() || f.len() != h.len() {
        return Err(Error::InvalidInput(
            "f, g and h must have the same positive length".into(),
        ));
    }
    if g.iter().any(|v| *v < 0.0) || (g.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(
            "g must lie on the simplex".into(),
        ));
    }
    let gh = dot(g, h);
    let lhs: f64 = (0..f.len()).map(|a| f[a] * g[a] * (h[a] - gh)).sum();
    let mut rhs = 0.0;
    for a in 0..f.len() {
        for b in a + 1..f.len() {
            rhs += g[a] * g[b] * (h[a] - h[b]) * (f[a] - f[b]);
        }
    }
    Ok((lhs, rhs))
}
