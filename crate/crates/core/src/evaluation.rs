//! Attack-side evaluation: Top-k accuracy of an attacker trained with or
//! without defended traces, and the multi-round intersection attack.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{stratified_fold_indices, DatasetError, LabeledDataset};
use crate::detector::{train, DetectorError, DetectorModel, TrainConfig};
use crate::scalar::Scalar;
use crate::trace::BurstTrace;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Largest k reported in Top-k curves.
pub const DEFAULT_K_MAX: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("label spaces differ: {0}")]
    LabelMismatch(String),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("k = {k} must be between 1 and {classes}")]
    BadK { k: usize, classes: usize },
    #[error("intersection rounds carry different labels")]
    MixedLabels,
    #[error("intersection attack needs at least one round")]
    NoRounds,
    #[error("no intersection results to summarize")]
    NoResults,
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    WithoutAdvTraining,
    WithAdvTraining,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub scenario: Scenario,
    pub top_k_accuracy: BTreeMap<usize, f64>,
    pub mean_overhead: Option<f64>,
    pub n_test: usize,
}

impl EvalReport {
    pub fn top1(&self) -> f64 {
        self.top_k_accuracy[&1]
    }

    /// `k,accuracy` rows for plotting.
    pub fn top_k_csv(&self) -> String {
        let mut out = String::from("k,accuracy\n");
        for (k, acc) in &self.top_k_accuracy {
            writeln!(out, "{k},{acc}").unwrap();
        }
        out
    }
}

/// For each `k` in `1..=k_max`, the fraction of traces whose label is among the
/// model's `k` most probable classes.
pub fn top_k_accuracy<S: Scalar>(
    model: &DetectorModel<S>,
    test: &LabeledDataset<BurstTrace<S>>,
    k_max: usize,
) -> Result<BTreeMap<usize, f64>, EvalError> {
    if k_max == 0 || k_max > model.classes() {
        return Err(EvalError::BadK {
            k: k_max,
            classes: model.classes(),
        });
    }
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    // rank of the true label for each trace; None if beyond k_max
    let ranks: Vec<Option<usize>> = test
        .traces
        .par_iter()
        .map(|t| {
            let top = model.top_k_labels(t, k_max)?;
            Ok(top.iter().position(|&c| c == t.label))
        })
        .collect::<Result<_, DetectorError>>()?;
    let n = test.len() as f64;
    Ok((1..=k_max)
        .map(|k| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r < k)).count();
            (k, hits as f64 / n)
        })
        .collect())
}

fn check_labels<S>(
    train: &LabeledDataset<BurstTrace<S>>,
    test: &LabeledDataset<BurstTrace<S>>,
) -> Result<(), EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    if train.classes != test.classes {
        return Err(EvalError::LabelMismatch(format!(
            "training set has {} classes, test set {}",
            train.classes, test.classes
        )));
    }
    Ok(())
}

fn report<S: Scalar>(
    scenario: Scenario,
    model: &DetectorModel<S>,
    test: &LabeledDataset<BurstTrace<S>>,
    mean_overhead: Option<f64>,
) -> Result<EvalReport, EvalError> {
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario,
        top_k_accuracy: top_k_accuracy(model, test, DEFAULT_K_MAX.min(model.classes()))?,
        mean_overhead,
        n_test: test.len(),
    })
}

/// Attacker trained on undefended traces, tested on defended ones.
pub fn eval_without_adv_training<S: Scalar>(
    attacker_train: &LabeledDataset<BurstTrace<S>>,
    defended_test: &LabeledDataset<BurstTrace<S>>,
    config: &TrainConfig,
    mean_overhead: Option<f64>,
) -> Result<(EvalReport, DetectorModel<S>), EvalError> {
    check_labels(attacker_train, defended_test)?;
    let model = train(attacker_train, config)?;
    let r = report(
        Scenario::WithoutAdvTraining,
        &model,
        defended_test,
        mean_overhead,
    )?;
    Ok((r, model))
}

/// Attacker trained on defended traces from its own generation run, tested on
/// defended traces of disjoint sources.
pub fn eval_with_adv_training<S: Scalar>(
    defended_train: &LabeledDataset<BurstTrace<S>>,
    defended_test: &LabeledDataset<BurstTrace<S>>,
    config: &TrainConfig,
    mean_overhead: Option<f64>,
) -> Result<(EvalReport, DetectorModel<S>), EvalError> {
    check_labels(defended_train, defended_test)?;
    let model = train(defended_train, config)?;
    let r = report(
        Scenario::WithAdvTraining,
        &model,
        defended_test,
        mean_overhead,
    )?;
    Ok((r, model))
}

/// Adversarial training under stratified k-fold cross-validation.
///
/// `train_run` and `test_run` are two independent defended versions of the
/// same sources, index-aligned. Fold `f` trains on `train_run` outside fold `f`
/// and tests on `test_run` inside it, so no source is seen on both sides.
/// Accuracies are pooled over all test traces.
pub fn eval_with_adv_training_cv<S: Scalar>(
    train_run: &LabeledDataset<BurstTrace<S>>,
    test_run: &LabeledDataset<BurstTrace<S>>,
    folds: usize,
    seed: u64,
    config: &TrainConfig,
    mean_overhead: Option<f64>,
) -> Result<EvalReport, EvalError> {
    check_labels(train_run, test_run)?;
    if train_run.len() != test_run.len()
        || train_run
            .traces
            .iter()
            .zip(&test_run.traces)
            .any(|(a, b)| a.label != b.label)
    {
        return Err(EvalError::LabelMismatch(
            "runs are not index-aligned".into(),
        ));
    }
    let mut hits: BTreeMap<usize, f64> = BTreeMap::new();
    let mut n_test = 0;
    for fold in 0..folds {
        let (tr, te) = stratified_fold_indices(train_run, folds, fold, seed)?;
        let (r, _) =
            eval_with_adv_training(&train_run.subset(&tr), &test_run.subset(&te), config, None)?;
        for (k, acc) in r.top_k_accuracy {
            *hits.entry(k).or_insert(0.0) += acc * r.n_test as f64;
        }
        n_test += r.n_test;
    }
    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        scenario: Scenario::WithAdvTraining,
        top_k_accuracy: hits
            .into_iter()
            .map(|(k, h)| (k, h / n_test as f64))
            .collect(),
        mean_overhead,
        n_test,
    })
}

/// Candidate set of an intersection attack after some number of rounds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntersectionState {
    pub l_int: BTreeSet<usize>,
    pub round: usize,
    pub true_label: usize,
}

impl IntersectionState {
    pub fn start(true_label: usize, first_top_k: &[usize]) -> Self {
        Self {
            l_int: first_top_k.iter().copied().collect(),
            round: 1,
            true_label,
        }
    }

    pub fn observe(&mut self, top_k: &[usize]) {
        let seen: BTreeSet<usize> = top_k.iter().copied().collect();
        self.l_int = self.l_int.intersection(&seen).copied().collect();
        self.round += 1;
    }

    pub fn outcome(&self) -> IntersectionOutcome {
        if !self.l_int.contains(&self.true_label) {
            IntersectionOutcome::AbsoluteFailure
        } else if self.l_int.len() == 1 {
            IntersectionOutcome::AbsoluteSuccess
        } else {
            IntersectionOutcome::Intersection(self.l_int.len())
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntersectionOutcome {
    /// Only the true site survives.
    AbsoluteSuccess,
    /// The true site dropped out (or nothing survived).
    AbsoluteFailure,
    /// The true site survives among this many candidates.
    Intersection(usize),
}

/// Folds the attacker's Top-k sets over rounds of the same site. Returns the
/// outcome and the candidate-set size after each round.
pub fn intersection_attack<S: Scalar>(
    model: &DetectorModel<S>,
    per_round_traces: &[BurstTrace<S>],
    k: usize,
) -> Result<(IntersectionOutcome, Vec<usize>), EvalError> {
    let first = per_round_traces.first().ok_or(EvalError::NoRounds)?;
    if per_round_traces.iter().any(|t| t.label != first.label) {
        return Err(EvalError::MixedLabels);
    }
    if k == 0 || k > model.classes() {
        return Err(EvalError::BadK {
            k,
            classes: model.classes(),
        });
    }
    let mut state = IntersectionState::start(first.label, &model.top_k_labels(first, k)?);
    let mut sizes = vec![state.l_int.len()];
    for t in &per_round_traces[1..] {
        state.observe(&model.top_k_labels(t, k)?);
        sizes.push(state.l_int.len());
    }
    Ok((state.outcome(), sizes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntersectionSummary {
    pub users: usize,
    pub success_rate: f64,
    pub failure_rate: f64,
    /// Share of users left with several candidates including the true site.
    pub partial_rate: f64,
    /// Mean candidate-set size over the partial bucket; absent if it is empty.
    pub mean_intersection: Option<f64>,
}

pub fn summarize_intersection(
    results: &[IntersectionOutcome],
) -> Result<IntersectionSummary, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoResults);
    }
    let n = results.len() as f64;
    let mut success = 0usize;
    let mut failure = 0usize;
    let mut sizes = Vec::new();
    for r in results {
        match r {
            IntersectionOutcome::AbsoluteSuccess => success += 1,
            IntersectionOutcome::AbsoluteFailure => failure += 1,
            IntersectionOutcome::Intersection(m) => sizes.push(*m as f64),
        }
    }
    Ok(IntersectionSummary {
        users: results.len(),
        success_rate: success as f64 / n,
        failure_rate: failure as f64 / n,
        partial_rate: sizes.len() as f64 / n,
        mean_intersection: (!sizes.is_empty())
            .then(|| sizes.iter().sum::<f64>() / sizes.len() as f64),
    })
}
