//! Server-side privacy: utility scoring of uploaded models, exponential
//! mechanism selection, and the privacy budget ledger.

use serde::{Deserialize, Serialize};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::metrics::{classification_hits, regression_predictions, ClassDecision};
use crate::model::{Featurizer, ModelParams, Task};
use crate::numerics::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtilityScore {
    pub participant: usize,
    pub score: f64,
}

/// Per-sample regression utility `1 - |min(z, 3y) - y| / y`, in `[-1, 1]`.
pub fn regression_score_term(z: f64, y: f64) -> f64 {
    let clipped = z.min(3.0 * y);
    1.0 - (clipped - y).abs() / y
}

/// Mean clipped relative accuracy of `params` on the validation set.
pub fn score_regression(params: &ModelParams, featurizer: &Featurizer, validation: &Dataset) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let z = regression_predictions(params, featurizer, validation)?;
    let mut total = 0.0;
    for (i, &zi) in z.iter().enumerate() {
        let y = validation.label(i);
        if !(y > 0.0) {
            return Err(Error::Data(format!("validation label {y} at row {i} is not positive")));
        }
        total += regression_score_term(zi, y);
    }
    Ok(total / z.len() as f64)
}

/// Fraction of validation rows classified correctly.
pub fn score_classification(
    params: &ModelParams,
    featurizer: &Featurizer,
    validation: &Dataset,
    decision: ClassDecision,
) -> Result<f64> {
    if validation.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let hits = classification_hits(params, featurizer, validation, decision)?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

pub fn score(
    task: Task,
    params: &ModelParams,
    featurizer: &Featurizer,
    validation: &Dataset,
    decision: ClassDecision,
) -> Result<f64> {
    match task {
        Task::Regression => score_regression(params, featurizer, validation),
        Task::Classification => score_classification(params, featurizer, validation, decision),
    }
}

/// Sensitivity of the utility score.
pub fn utility_sensitivity(task: Task) -> f64 {
    match task {
        Task::Regression => 1.0,
        Task::Classification => 0.5,
    }
}

fn check_selection(m: usize, k: usize, epsilon1: f64, du: f64) -> Result<()> {
    if k == 0 {
        return Err(Error::param("k", "must select at least one participant"));
    }
    if k > m {
        return Err(Error::param("k", format!("cannot select {k} of {m} uploads")));
    }
    if !(epsilon1 > 0.0) || !epsilon1.is_finite() {
        return Err(Error::param("epsilon1", format!("must be > 0, got {epsilon1}")));
    }
    if !(du > 0.0) || !du.is_finite() {
        return Err(Error::param("utility_sensitivity", format!("must be > 0, got {du}")));
    }
    Ok(())
}

/// Probabilities of a single draw among `scores`, each proportional to
/// `exp(epsilon1 u / (2 k du))`.
pub fn selection_probabilities(scores: &[f64], k: usize, epsilon1: f64, du: f64) -> Vec<f64> {
    let factor = epsilon1 / (2.0 * k as f64 * du);
    let logits: Vec<f64> = scores.iter().map(|u| factor * u).collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

/// Draws `k` distinct participants, one at a time, renormalizing over the
/// ones still available. Returns participant ids in draw order.
pub fn exp_sample(scores: &[UtilityScore], k: usize, epsilon1: f64, du: f64, rng: &mut RngState) -> Result<Vec<usize>> {
    check_selection(scores.len(), k, epsilon1, du)?;
    let mut remaining: Vec<UtilityScore> = scores.to_vec();
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let u: Vec<f64> = remaining.iter().map(|s| s.score).collect();
        let probs = selection_probabilities(&u, k, epsilon1, du);
        let r = rng.next_f64();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if r < acc {
                pick = i;
                break;
            }
        }
        chosen.push(remaining.remove(pick).participant);
    }
    Ok(chosen)
}

/// `k` distinct participants uniformly at random, ignoring scores.
pub fn uniform_sample(scores: &[UtilityScore], k: usize, rng: &mut RngState) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::param(
            "k",
            format!("cannot select {k} of {} uploads", scores.len()),
        ));
    }
    Ok(rng
        .sample_indices(scores.len(), k)
        .into_iter()
        .map(|i| scores[i].participant)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    Sampling,
    Objective,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub epoch: u64,
    pub mechanism: Mechanism,
    pub epsilon: f64,
}

/// Log of budget charges, keyed by local epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub entries: Vec<LedgerEntry>,
}

impl BudgetLedger {
    pub fn new(epsilon1: f64, epsilon2: f64) -> Self {
        BudgetLedger {
            epsilon1,
            epsilon2,
            entries: Vec::new(),
        }
    }

    /// One selection of `k` uploads: `k` draws at `epsilon1 / k` each.
    pub fn charge_sampling(&mut self, epoch: u64, k: usize) {
        let each = self.epsilon1 / k as f64;
        for _ in 0..k {
            self.entries.push(LedgerEntry {
                epoch,
                mechanism: Mechanism::Sampling,
                epsilon: each,
            });
        }
    }

    /// A perturbed objective released within `epoch`. Batches of one epoch
    /// are disjoint, so repeated charges within an epoch do not add up.
    pub fn charge_objective(&mut self, epoch: u64) {
        let seen = self
            .entries
            .iter()
            .any(|e| e.epoch == epoch && e.mechanism == Mechanism::Objective);
        if !seen {
            self.entries.push(LedgerEntry {
                epoch,
                mechanism: Mechanism::Objective,
                epsilon: self.epsilon2,
            });
        }
    }

    /// Number of distinct epochs with any charge.
    pub fn epochs(&self) -> u64 {
        let mut seen: Vec<u64> = self.entries.iter().map(|e| e.epoch).collect();
        seen.sort_unstable();
        seen.dedup();
        seen.len() as u64
    }

    /// Sum of recorded charges of `mechanism` in `epoch`.
    pub fn charged(&self, epoch: u64, mechanism: Mechanism) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.epoch == epoch && e.mechanism == mechanism)
            .map(|e| e.epsilon)
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivacyReport {
    pub epsilon1: f64,
    pub epsilon2: f64,
    pub epochs: u64,
    pub per_epoch: f64,
    pub cumulative: f64,
}

/// Per-epoch guarantee `max(epsilon1, epsilon2)` and its sequential sum
/// over `epochs`.
pub fn ledger_report(ledger: &BudgetLedger, epochs: u64) -> PrivacyReport {
    let per_epoch = ledger.epsilon1.max(ledger.epsilon2);
    PrivacyReport {
        epsilon1: ledger.epsilon1,
        epsilon2: ledger.epsilon2,
        epochs,
        per_epoch,
        cumulative: epochs as f64 * per_epoch,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Architecture, FeaturizerSpec};
    use crate::numerics::Matrix;
    use proptest::prelude::*;

    fn scores(u: &[f64]) -> Vec<UtilityScore> {
        u.iter()
            .enumerate()
            .map(|(participant, &score)| UtilityScore { participant, score })
            .collect()
    }

    #[test]
    fn score_terms() {
        assert_eq!(regression_score_term(0.5, 0.5), 1.0);
        assert!((regression_score_term(2.0, 0.5) + 1.0).abs() < 1e-15);
        assert!((regression_score_term(0.6, 0.5) - 0.8).abs() < 1e-12);
    }

    #[test]
    fn perfect_model_scores_one() {
        // one hidden unit equal to x, output weight 0 -> z = 0.5 everywhere
        let arch = Architecture::regression(1, 1);
        let mut params = init_params(&arch, 0);
        params.layers[0] = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        params.layers[1] = Matrix::zeros(1, 1);
        let val = Dataset::new(
            Matrix::from_vec(3, 1, vec![0.1, 0.4, 0.9]).unwrap(),
            Matrix::from_vec(3, 1, vec![0.5; 3]).unwrap(),
            vec!["x".into()],
        )
        .unwrap();
        let u = score_regression(&params, &Featurizer::Identity, &val).unwrap();
        assert!((u - 1.0).abs() < 1e-15);
    }

    #[test]
    fn empty_validation_is_error() {
        let arch = Architecture::regression(2, 2);
        let params = init_params(&arch, 0);
        let val = Dataset {
            features: Matrix::zeros(0, 2),
            labels: Matrix::zeros(0, 1),
            feature_names: vec!["a".into(), "b".into()],
        };
        assert!(score_regression(&params, &Featurizer::Identity, &val).is_err());
        assert!(score_classification(&params, &Featurizer::Identity, &val, ClassDecision::Argmax).is_err());
    }

    #[test]
    fn classification_counts() {
        // identity hidden (weights large enough to saturate) and a 2-class head
        let arch = Architecture::classification(2, 2, 2, FeaturizerSpec::Identity);
        let mut params = init_params(&arch, 0);
        params.layers[0] = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        params.layers[1] = Matrix::from_vec(2, 2, vec![4.0, -4.0, -4.0, 4.0]).unwrap();
        let features = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let right = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let names = vec!["a".to_string(), "b".to_string()];
        let ds = Dataset::new(features.clone(), right.clone(), names.clone()).unwrap();
        for decision in [ClassDecision::Argmax, ClassDecision::Threshold] {
            assert_eq!(
                score_classification(&params, &Featurizer::Identity, &ds, decision).unwrap(),
                1.0
            );
        }
        let wrong = right.map(|v| 1.0 - v);
        let ds = Dataset::new(features.clone(), wrong, names.clone()).unwrap();
        assert_eq!(
            score_classification(&params, &Featurizer::Identity, &ds, ClassDecision::Argmax).unwrap(),
            0.0
        );
        let mut three = right.clone();
        three.row_mut(3).copy_from_slice(&[1.0, 0.0]);
        let ds = Dataset::new(features, three, names).unwrap();
        assert_eq!(
            score_classification(&params, &Featurizer::Identity, &ds, ClassDecision::Argmax).unwrap(),
            0.75
        );
    }

    #[test]
    fn utility_sensitivities() {
        assert_eq!(utility_sensitivity(Task::Regression), 1.0);
        assert_eq!(utility_sensitivity(Task::Classification), 0.5);
        // one validation row, accuracy flips between 0 and 1; the score
        // enters the mechanism halved, which the 1/2 accounts for
        let (n, m) = (1.0, 0.0);
        assert_eq!(((m + 1.0) / n - m / n) / 2.0, 0.5);
    }

    #[test]
    fn two_way_probability() {
        let e = std::f64::consts::E;
        let p = selection_probabilities(&[1.0, 0.0], 1, 2.0, 1.0);
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        let mut rng = RngState::from_seed(11);
        let s = scores(&[1.0, 0.0]);
        let trials = 100_000;
        let mut first = 0;
        for _ in 0..trials {
            if exp_sample(&s, 1, 2.0, 1.0, &mut rng).unwrap()[0] == 0 {
                first += 1;
            }
        }
        let freq = first as f64 / trials as f64;
        assert!((freq - 0.7311).abs() < 0.01, "{freq}");
    }

    #[test]
    fn k_equals_m_selects_all() {
        let mut rng = RngState::from_seed(3);
        let s = scores(&[0.3, -0.2, 0.9, 0.1]);
        let mut got = exp_sample(&s, 4, 1.0, 1.0, &mut rng).unwrap();
        got.sort_unstable();
        assert_eq!(got, vec![0, 1, 2, 3]);
    }

    #[test]
    fn vanishing_budget_is_uniform() {
        let mut rng = RngState::from_seed(4);
        let s = scores(&[1.0, 0.0, -1.0, 0.5]);
        let trials = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..trials {
            counts[exp_sample(&s, 1, 1e-12, 1.0, &mut rng).unwrap()[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / trials as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn higher_scores_win_more_often() {
        let mut rng = RngState::from_seed(5);
        let s = scores(&[0.9, 0.2, 0.5, -0.4]);
        let mut counts = [0usize; 4];
        for _ in 0..100_000 {
            counts[exp_sample(&s, 2, 4.0, 1.0, &mut rng).unwrap()[0]] += 1;
        }
        assert!(counts[0] >= counts[2] && counts[2] >= counts[1] && counts[1] >= counts[3]);
    }

    #[test]
    fn rejects_bad_requests() {
        let mut rng = RngState::from_seed(6);
        let s = scores(&[0.1, 0.2]);
        assert!(exp_sample(&s, 3, 1.0, 1.0, &mut rng).is_err());
        assert!(exp_sample(&s, 0, 1.0, 1.0, &mut rng).is_err());
        assert!(exp_sample(&s, 1, 0.0, 1.0, &mut rng).is_err());
        assert!(uniform_sample(&s, 3, &mut rng).is_err());
    }

    #[test]
    fn huge_budget_does_not_overflow() {
        let p = selection_probabilities(&[1.0, 0.99, -1.0], 1, 1e6, 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ledger_examples() {
        let mut l = BudgetLedger::new(1.0, 1.0);
        l.charge_sampling(0, 5);
        l.charge_objective(0);
        l.charge_objective(0);
        assert_eq!(l.epochs(), 1);
        assert!((l.charged(0, Mechanism::Sampling) - 1.0).abs() < 1e-12);
        assert_eq!(l.charged(0, Mechanism::Objective), 1.0);
        assert_eq!(ledger_report(&l, 1).per_epoch, 1.0);

        let l = BudgetLedger::new(0.5, 1.0);
        assert_eq!(ledger_report(&l, 1).per_epoch, 1.0);

        let l = BudgetLedger::new(1.0, 0.25);
        let r = ledger_report(&l, 10);
        assert_eq!((r.per_epoch, r.cumulative), (1.0, 10.0));
    }

    proptest! {
        #[test]
        fn shift_leaves_probabilities(u in prop::collection::vec(-1.0f64..1.0, 2..8), c in -5.0f64..5.0, eps in 0.01f64..20.0) {
            let shifted: Vec<f64> = u.iter().map(|v| v + c).collect();
            let a = selection_probabilities(&u, 1, eps, 1.0);
            let b = selection_probabilities(&shifted, 1, eps, 1.0);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn distinct_ids(seed in any::<u64>(), m in 1usize..12, kfrac in 0.0f64..1.0) {
            let k = 1 + ((m - 1) as f64 * kfrac) as usize;
            let mut rng = RngState::from_seed(seed);
            let u: Vec<f64> = (0..m).map(|_| rng.uniform(-1.0, 1.0).unwrap()).collect();
            let mut got = exp_sample(&scores(&u), k, 1.0, 1.0, &mut rng).unwrap();
            prop_assert_eq!(got.len(), k);
            got.sort_unstable();
            got.dedup();
            prop_assert_eq!(got.len(), k);
        }

        #[test]
        fn score_terms_bounded(z in 0.0f64..1e6, y in 0.01f64..1.0) {
            let t = regression_score_term(z, y);
            prop_assert!((-1.0 - 1e-12..=1.0).contains(&t));
        }
    }
}
