//! Finite tabular bandit instances and their derived quantities.

use std::path::Path;

use rand::Rng as _;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

const TOL: f64 = 1e-9;
/// Equality tolerance used when checking for no direct effect.
pub const EFFECT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RewardFamily {
    /// `q +- sqrt(s - q^2)` with equal probability.
    #[default]
    TwoPoint,
    Gaussian,
}

/// `p(x)`, `pi(a|x)`, `pi0(a|x)`, `p(e|x,a)`, `q(x,a,e)` and `E[r^2|x,a,e]`
/// over finite context, action and embedding sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularInstance {
    pub context_probs: Vec<f64>,
    /// `[x][a]`
    pub target: Vec<Vec<f64>>,
    /// `[x][a]`
    pub logging: Vec<Vec<f64>>,
    /// `[x][a][e]`
    pub embedding: Vec<Vec<Vec<f64>>>,
    /// `[x][a][e]`
    pub q: Vec<Vec<Vec<f64>>>,
    /// `[x][a][e]`
    pub second_moment: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub family: RewardFamily,
}

fn check_simplex(what: &str, p: &[f64]) -> Result<()> {
    if p.is_empty() || p.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "{what}: entries must be finite and nonnegative"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > TOL {
        return Err(Error::InvalidDistribution(format!("{what}: sums to {s}")));
    }
    Ok(())
}

impl TabularInstance {
    pub fn validate(&self) -> Result<()> {
        let nx = self.context_probs.len();
        check_simplex("p(x)", &self.context_probs)?;
        if self.target.len() != nx
            || self.logging.len() != nx
            || self.embedding.len() != nx
            || self.q.len() != nx
            || self.second_moment.len() != nx
        {
            return Err(Error::InvalidInput(
                "tables disagree on the number of contexts".into(),
            ));
        }
        let na = self.target[0].len();
        let ne = self.embedding[0].first().map_or(0, Vec::len);
        if na == 0 || ne == 0 {
            return Err(Error::InvalidInput("empty action or embedding set".into()));
        }
        if (nx as u128) * (na as u128) * (ne as u128) > 1_000_000 {
            return Err(Error::InvalidInput(
                "instance too large to enumerate".into(),
            ));
        }
        for x in 0..nx {
            check_simplex(&format!("pi(.|x{x})"), &self.target[x])?;
            check_simplex(&format!("pi0(.|x{x})"), &self.logging[x])?;
            if self.target[x].len() != na || self.logging[x].len() != na {
                return Err(Error::InvalidInput(format!(
                    "context {x}: action count differs"
                )));
            }
            for table in [&self.embedding[x], &self.q[x], &self.second_moment[x]] {
                if table.len() != na || table.iter().any(|row| row.len() != ne) {
                    return Err(Error::InvalidInput(format!(
                        "context {x}: table shape differs"
                    )));
                }
            }
            for a in 0..na {
                check_simplex(&format!("p(.|x{x},a{a})"), &self.embedding[x][a])?;
                for e in 0..ne {
                    let (q, s) = (self.q[x][a][e], self.second_moment[x][a][e]);
                    if !q.is_finite() || !s.is_finite() || s < q * q - TOL * (1.0 + q * q) {
                        return Err(Error::InvalidInput(format!(
                            "(x{x},a{a},e{e}): second moment {s} below q^2 = {}",
                            q * q
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let inst: Self =
            serde_json::from_str(text).map_err(|e| Error::InvalidInput(e.to_string()))?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let inst: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        inst.validate()?;
        Ok(inst)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn num_contexts(&self) -> usize {
        self.context_probs.len()
    }

    pub fn num_actions(&self) -> usize {
        self.target[0].len()
    }

    pub fn num_embeddings(&self) -> usize {
        self.embedding[0][0].len()
    }

    /// `q(x,a) = sum_e p(e|x,a) q(x,a,e)`.
    pub fn q_xa(&self, x: usize, a: usize) -> f64 {
        dot(&self.embedding[x][a], &self.q[x][a])
    }

    /// `p(e|x,policy)` for a `[x][a]` policy table.
    pub fn embedding_marginal(&self, x: usize, policy: &[Vec<f64>]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_embeddings()];
        for (a, pa) in policy[x].iter().enumerate() {
            for (o, pe) in out.iter_mut().zip(&self.embedding[x][a]) {
                *o += pa * pe;
            }
        }
        out
    }

    /// `pi(a|x) / pi0(a|x)`, `None` for deficient actions.
    pub fn vanilla_weight(&self, x: usize, a: usize) -> Option<f64> {
        let p0 = self.logging[x][a];
        (p0 > 0.0).then(|| self.target[x][a] / p0)
    }

    /// `p(e|x,pi) / p(e|x,pi0)`, `None` for unsupported embeddings.
    pub fn marginal_weight(&self, x: usize, e: usize) -> Option<f64> {
        let p0 = self.embedding_marginal(x, &self.logging)[e];
        (p0 > 0.0).then(|| self.embedding_marginal(x, &self.target)[e] / p0)
    }

    /// Marginal weights `w(x,e)` as a `[x][e]` table; zero where undefined.
    pub fn marginal_weight_table(&self) -> Vec<Vec<f64>> {
        (0..self.num_contexts())
            .map(|x| {
                let p = self.embedding_marginal(x, &self.target);
                let p0 = self.embedding_marginal(x, &self.logging);
                p.iter()
                    .zip(&p0)
                    .map(|(a, b)| if *b > 0.0 { a / b } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Bayes posterior `pi0(a|x,e)`, `None` when `p(e|x,pi0) = 0`.
    pub fn posterior(&self, x: usize, e: usize) -> Option<Vec<f64>> {
        self.posterior_under(x, e, &self.logging)
    }

    /// `policy(a|x) p(e|x,a) / p(e|x,policy)`.
    pub fn posterior_under(&self, x: usize, e: usize, policy: &[Vec<f64>]) -> Option<Vec<f64>> {
        let joint: Vec<f64> = (0..self.num_actions())
            .map(|a| policy[x][a] * self.embedding[x][a][e])
            .collect();
        let total: f64 = joint.iter().sum();
        (total > 0.0).then(|| joint.into_iter().map(|j| j / total).collect())
    }

    /// Common support: `pi(a|x) > 0` implies `pi0(a|x) > 0`.
    pub fn common_support(&self) -> bool {
        self.target
            .iter()
            .zip(&self.logging)
            .all(|(pi, pi0)| pi.iter().zip(pi0).all(|(p, p0)| *p == 0.0 || *p0 > 0.0))
    }

    /// Common embedding support: `p(e|x,pi) > 0` implies `p(e|x,pi0) > 0`.
    pub fn common_embedding_support(&self) -> bool {
        (0..self.num_contexts()).all(|x| {
            let p = self.embedding_marginal(x, &self.target);
            let p0 = self.embedding_marginal(x, &self.logging);
            p.iter().zip(&p0).all(|(a, b)| *a == 0.0 || *b > 0.0)
        })
    }

    /// No direct effect: for each `(x,e)`, the reward mean and second moment
    /// agree across every action that can produce `e`.
    pub fn no_direct_effect(&self) -> bool {
        (0..self.num_contexts()).all(|x| {
            (0..self.num_embeddings()).all(|e| {
                let mut reference: Option<(f64, f64)> = None;
                (0..self.num_actions()).all(|a| {
                    if self.embedding[x][a][e] == 0.0 {
                        return true;
                    }
                    let cur = (self.q[x][a][e], self.second_moment[x][a][e]);
                    match reference {
                        None => {
                            reference = Some(cur);
                            true
                        }
                        Some((q, s)) => {
                            (q - cur.0).abs() <= EFFECT_TOL * (1.0 + q.abs())
                                && (s - cur.1).abs() <= EFFECT_TOL * (1.0 + s.abs())
                        }
                    }
                })
            })
        })
    }

    /// The toy instance with one context, three actions and three
    /// embeddings in which action `a1` is never logged but every embedding
    /// is. Rewards are deterministic and equal to one.
    pub fn table1() -> Self {
        let embedding = vec![vec![
            vec![0.25, 0.25, 0.5],
            vec![0.5, 0.25, 0.25],
            vec![0.25, 0.5, 0.25],
        ]];
        Self {
            context_probs: vec![1.0],
            target: vec![vec![0.2, 0.8, 0.0]],
            logging: vec![vec![0.0, 0.2, 0.8]],
            embedding,
            q: vec![vec![vec![1.0; 3]; 3]],
            second_moment: vec![vec![vec![1.0; 3]; 3]],
            family: RewardFamily::TwoPoint,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Which assumptions a generated instance should satisfy or violate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InstanceShape {
    pub contexts: usize,
    pub actions: usize,
    pub embeddings: usize,
    pub no_direct_effect: bool,
    /// Give some actions zero logging probability (breaks common support).
    pub deficient_actions: bool,
    /// Make the last embedding reachable only through deficient actions
    /// (breaks common embedding support; implies `deficient_actions`).
    pub deficient_embedding: bool,
    pub family: RewardFamily,
}

impl InstanceShape {
    pub fn new(contexts: usize, actions: usize, embeddings: usize) -> Self {
        Self {
            contexts,
            actions,
            embeddings,
            no_direct_effect: true,
            deficient_actions: false,
            deficient_embedding: false,
            family: RewardFamily::TwoPoint,
        }
    }
}

/// Smallest probability assigned by [`random_instance`] to a supported
/// entry.
pub const PROB_FLOOR: f64 = 1e-3;

fn random_simplex(rng: &mut Rng, len: usize, support: &[bool]) -> Vec<f64> {
    let raw: Vec<f64> = (0..len)
        .map(|i| {
            if !support[i] {
                return 0.0;
            }
            let v: f64 = rng.sample(Exp1);
            // occasionally push an entry down to the floor
            if rng.random::<f64>() < 0.15 {
                v * 1e-4
            } else {
                v
            }
        })
        .collect();
    let k = support.iter().filter(|s| **s).count() as f64;
    let total: f64 = raw.iter().sum();
    raw.iter()
        .zip(support)
        .map(|(v, s)| {
            if *s {
                PROB_FLOOR + (1.0 - k * PROB_FLOOR) * v / total
            } else {
                0.0
            }
        })
        .collect()
}

/// Draws a random instance. Supported probabilities are at least
/// [`PROB_FLOOR`], so weights can be large without becoming infinite.
pub fn random_instance(rng: &mut Rng, shape: &InstanceShape) -> Result<TabularInstance> {
    let InstanceShape {
        contexts: nx,
        actions: na,
        embeddings: ne,
        ..
    } = *shape;
    if nx == 0 || na == 0 || ne == 0 {
        return Err(Error::InvalidInput(
            "instance dimensions must be positive".into(),
        ));
    }
    let deficient_actions = shape.deficient_actions || shape.deficient_embedding;
    if deficient_actions && na < 2 {
        return Err(Error::InvalidInput(
            "deficiency needs at least two actions".into(),
        ));
    }
    if shape.deficient_embedding && ne < 2 {
        return Err(Error::InvalidInput(
            "embedding deficiency needs at least two embeddings".into(),
        ));
    }
    if (na.max(ne) as f64) * PROB_FLOOR >= 0.5 {
        return Err(Error::InvalidInput(
            "too many actions or embeddings for the probability floor".into(),
        ));
    }
    let all_a = vec![true; na];
    let all_e = vec![true; ne];
    let context_probs = random_simplex(rng, nx, &vec![true; nx]);
    let mut target = Vec::with_capacity(nx);
    let mut logging = Vec::with_capacity(nx);
    let mut embedding = Vec::with_capacity(nx);
    for _ in 0..nx {
        target.push(random_simplex(rng, na, &all_a));
        let logged: Vec<bool> = if deficient_actions {
            // action 0 is always deficient; the rest at random, keeping one
            let mut s: Vec<bool> = (0..na)
                .map(|a| a > 0 && rng.random::<f64>() < 0.7)
                .collect();
            if !s.iter().any(|v| *v) {
                s[na - 1] = true;
            }
            s
        } else {
            all_a.clone()
        };
        logging.push(random_simplex(rng, na, &logged));
        let rows: Vec<Vec<f64>> = (0..na)
            .map(|a| {
                if shape.deficient_embedding {
                    let mut support = all_e.clone();
                    support[ne - 1] = !logged[a];
                    random_simplex(rng, ne, &support)
                } else {
                    random_simplex(rng, ne, &all_e)
                }
            })
            .collect();
        embedding.push(rows);
    }
    let mut q = vec![vec![vec![0.0; ne]; na]; nx];
    let mut second_moment = vec![vec![vec![0.0; ne]; na]; nx];
    for x in 0..nx {
        let shared: Vec<(f64, f64)> = (0..ne).map(|_| draw_reward(rng)).collect();
        for a in 0..na {
            for e in 0..ne {
                let (m, v) = if shape.no_direct_effect {
                    shared[e]
                } else {
                    draw_reward(rng)
                };
                q[x][a][e] = m;
                second_moment[x][a][e] = m * m + v;
            }
        }
    }
    let inst = TabularInstance {
        context_probs,
        target,
        logging,
        embedding,
        q,
        second_moment,
        family: shape.family,
    };
    inst.validate()?;
    Ok(inst)
}

fn draw_reward(rng: &mut Rng) -> (f64, f64) {
    let m: f64 = rng.sample(StandardNormal);
    let v: f64 = rng.sample(Exp1);
    (m, v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn table1_support_relations() {
        let t = TabularInstance::table1();
        t.validate().unwrap();
        assert!(!t.common_support());
        assert!(t.common_embedding_support());
        assert_eq!(t.vanilla_weight(0, 0), None);
        assert_eq!(t.vanilla_weight(0, 1), Some(4.0));
        assert_eq!(t.vanilla_weight(0, 2), Some(0.0));
    }

    #[test]
    fn generated_instances_respect_the_requested_shape() {
        let mut rng = seeded(3);
        for _ in 0..20 {
            let mut shape = InstanceShape::new(2, 4, 3);
            let inst = random_instance(&mut rng, &shape).unwrap();
            assert!(
                inst.common_support() && inst.common_embedding_support() && inst.no_direct_effect()
            );
            let min = inst
                .logging
                .iter()
                .flatten()
                .fold(f64::INFINITY, |m, v| m.min(*v));
            assert!(min >= PROB_FLOOR * (1.0 - 1e-12));

            shape.no_direct_effect = false;
            assert!(!random_instance(&mut rng, &shape)
                .unwrap()
                .no_direct_effect());

            shape.deficient_actions = true;
            let inst = random_instance(&mut rng, &shape).unwrap();
            assert!(!inst.common_support() && inst.common_embedding_support());

            shape.deficient_embedding = true;
            let inst = random_instance(&mut rng, &shape).unwrap();
            assert!(!inst.common_embedding_support());
        }
    }

    #[test]
    fn validation_rejects_bad_moments() {
        let mut t = TabularInstance::table1();
        t.second_moment[0][1][1] = 0.5;
        assert!(t.validate().is_err());
        let mut t = TabularInstance::table1();
        t.logging[0][1] = 0.3;
        assert!(t.validate().is_err());
    }

    #[test]
    fn json_text_round_trip() {
        let mut rng = seeded(9);
        let inst = random_instance(&mut rng, &InstanceShape::new(2, 3, 2)).unwrap();
        let text = serde_json::to_string(&inst).unwrap();
        assert_eq!(TabularInstance::from_json_str(&text).unwrap(), inst);
    }
}
