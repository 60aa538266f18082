//! Estimators on data drawn from tabular instances, checked against exact
//! enumeration.

use mips_core::data::{LoggedDataset, LoggedRecord, PolicyProbs};
use mips_core::estimators::{
    dm, dr, ips, mips, shrunk_dr, vanilla_weights, RewardTerms, Shrinkage,
};
use mips_core::oracle::{exact_value, random_instance, InstanceShape, TabularInstance};
use mips_core::policy::sample_categorical;
use mips_core::rng::{seeded, Rng};
use mips_core::stats::{mean, sample_variance};
use proptest::prelude::*;
use rand::Rng as _;

/// `n` logged records from `inst`; contexts are encoded as a single feature.
fn draw(inst: &TabularInstance, n: usize, rng: &mut Rng) -> (LoggedDataset, PolicyProbs, Vec<f64>) {
    let mut records = Vec::with_capacity(n);
    let mut target = Vec::with_capacity(n * inst.num_actions());
    let mut marginal = Vec::with_capacity(n);
    for _ in 0..n {
        let x = sample_categorical(&inst.context_probs, rng);
        let a = sample_categorical(&inst.logging[x], rng);
        let e = sample_categorical(&inst.embedding[x][a], rng);
        let q = inst.q[x][a][e];
        let sd = (inst.second_moment[x][a][e] - q * q).max(0.0).sqrt();
        let reward = if rng.random::<bool>() { q + sd } else { q - sd };
        records.push(LoggedRecord {
            context: vec![x as f64],
            action: a,
            embedding: vec![e],
            reward,
            logging_propensity: inst.logging[x][a],
        });
        target.extend_from_slice(&inst.target[x]);
        marginal.push(inst.marginal_weight(x, e).unwrap_or(0.0));
    }
    let data =
        LoggedDataset::new(records, inst.num_actions(), vec![inst.num_embeddings()]).unwrap();
    (
        data,
        PolicyProbs::new(inst.num_actions(), target).unwrap(),
        marginal,
    )
}

fn instance(seed: u64, shape: InstanceShape) -> TabularInstance {
    random_instance(&mut seeded(seed), &shape).unwrap()
}

#[test]
fn ips_and_mips_are_unbiased_under_their_assumptions() {
    let reps = 2000;
    let n = 500;
    for seed in 0..3u64 {
        let mut shape = InstanceShape::new(3, 5, 4);
        shape.no_direct_effect = true;
        let inst = instance(100 + seed, shape);
        assert!(
            inst.common_support() && inst.common_embedding_support() && inst.no_direct_effect()
        );
        let truth = exact_value(&inst, &inst.target);
        let mut rng = seeded(200 + seed);
        let mut ips_est = Vec::with_capacity(reps);
        let mut mips_est = Vec::with_capacity(reps);
        for _ in 0..reps {
            let (data, target, w) = draw(&inst, n, &mut rng);
            ips_est.push(ips(&data, &target).unwrap().estimate);
            mips_est.push(mips(&data, &w).unwrap().estimate);
        }
        for (name, est) in [("ips", &ips_est), ("mips", &mips_est)] {
            let se = (sample_variance(est) / reps as f64).sqrt();
            let gap = (mean(est) - truth).abs();
            assert!(gap <= 3.0 * se, "{name} seed {seed}: gap {gap} se {se}");
        }
    }
}

#[test]
fn mips_is_unbiased_with_deficient_actions_but_supported_embeddings() {
    let mut shape = InstanceShape::new(2, 6, 3);
    shape.no_direct_effect = true;
    shape.deficient_actions = true;
    let inst = instance(7, shape);
    assert!(!inst.common_support());
    assert!(inst.common_embedding_support());
    let truth = exact_value(&inst, &inst.target);
    let mut rng = seeded(8);
    let est: Vec<f64> = (0..2000)
        .map(|_| {
            let (data, _, w) = draw(&inst, 500, &mut rng);
            mips(&data, &w).unwrap().estimate
        })
        .collect();
    let se = (sample_variance(&est) / est.len() as f64).sqrt();
    assert!((mean(&est) - truth).abs() <= 3.0 * se);
}

/// Sample variance and its large-sample standard error.
fn variance_with_se(terms: &[f64]) -> (f64, f64) {
    let n = terms.len() as f64;
    let m = mean(terms);
    let m2 = terms.iter().map(|t| (t - m).powi(2)).sum::<f64>() / n;
    let m4 = terms.iter().map(|t| (t - m).powi(4)).sum::<f64>() / n;
    (m2, ((m4 - m2 * m2).max(0.0) / n).sqrt())
}

#[test]
fn mips_terms_vary_less_than_ips_terms() {
    for seed in 0..20u64 {
        let mut shape = InstanceShape::new(2, 6, 3);
        shape.no_direct_effect = true;
        let inst = instance(300 + seed, shape);
        let (data, target, w) = draw(&inst, 20_000, &mut seeded(400 + seed));
        let (v_ips, se_ips) = variance_with_se(&ips(&data, &target).unwrap().per_sample_terms);
        let (v_mips, se_mips) = variance_with_se(&mips(&data, &w).unwrap().per_sample_terms);
        let slack = 3.0 * (se_ips * se_ips + se_mips * se_mips).sqrt();
        assert!(
            v_mips <= v_ips + slack,
            "seed {seed}: {v_mips} vs {v_ips} + {slack}"
        );
    }
}

fn random_terms(data: &LoggedDataset, rng: &mut Rng) -> RewardTerms {
    let n = data.len();
    RewardTerms {
        expected: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        logged: (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

#[test]
fn shrinkage_endpoints_match_plain_estimators() {
    for seed in 0..20u64 {
        let mut rng = seeded(500 + seed);
        let inst = instance(600 + seed, InstanceShape::new(3, 5, 3));
        let (data, target, _) = draw(&inst, 200, &mut rng);
        let q = random_terms(&data, &mut rng);
        let dm_v = dm(&data, &target, &q).unwrap().estimate;
        let dr_v = dr(&data, &target, &q).unwrap().estimate;
        let at = |kind, lam| shrunk_dr(&data, &target, &q, kind, lam).unwrap().estimate;
        assert!((at(Shrinkage::Switch, 0.0) - dm_v).abs() <= 1e-12);
        assert!((at(Shrinkage::Os, 0.0) - dm_v).abs() <= 1e-12);
        assert!((at(Shrinkage::Lambda, 0.0) - dr_v).abs() <= 1e-12);
        let unit: Vec<f64> = data
            .records()
            .iter()
            .enumerate()
            .map(|(i, r)| q.expected[i] + (r.reward - q.logged[i]))
            .collect();
        assert!((at(Shrinkage::Lambda, 1.0) - mean(&unit)).abs() <= 1e-12);
        let zero = RewardTerms::zeros(data.len());
        let ips_v = ips(&data, &target).unwrap().estimate;
        assert!((dr(&data, &target, &zero).unwrap().estimate - ips_v).abs() <= 1e-12);
        let max_w = vanilla_weights(&data, &target)
            .unwrap()
            .into_iter()
            .fold(0.0, f64::max);
        assert_eq!(at(Shrinkage::Switch, max_w), dr_v);
        assert_eq!(at(Shrinkage::Switch, f64::INFINITY), dr_v);
        assert_eq!(at(Shrinkage::Os, f64::INFINITY), dr_v);
        assert!((at(Shrinkage::Os, 1e12) - dr_v).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn estimates_ignore_record_order(seed in any::<u64>(), n in 2usize..80) {
        let mut rng = seeded(seed);
        let inst = random_instance(&mut rng, &InstanceShape::new(3, 4, 3)).unwrap();
        let (data, target, w) = draw(&inst, n, &mut rng);
        let q = random_terms(&data, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let pdata = data.select(&perm).unwrap();
        let ptarget = target.select(&perm);
        let pq = q.select(&perm);
        let pw: Vec<f64> = perm.iter().map(|&i| w[i]).collect();
        let pairs = [
            (ips(&data, &target).unwrap().estimate, ips(&pdata, &ptarget).unwrap().estimate),
            (dm(&data, &target, &q).unwrap().estimate, dm(&pdata, &ptarget, &pq).unwrap().estimate),
            (dr(&data, &target, &q).unwrap().estimate, dr(&pdata, &ptarget, &pq).unwrap().estimate),
            (
                shrunk_dr(&data, &target, &q, Shrinkage::Os, 3.0).unwrap().estimate,
                shrunk_dr(&pdata, &ptarget, &pq, Shrinkage::Os, 3.0).unwrap().estimate,
            ),
            (mips(&data, &w).unwrap().estimate, mips(&pdata, &pw).unwrap().estimate),
        ];
        for (a, b) in pairs {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }
}
