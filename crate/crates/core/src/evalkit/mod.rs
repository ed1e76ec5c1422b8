//! Measurement: errors corrected on transformed images, hyperparameter
//! selection under a clean-accuracy gate, rule discovery and sweeps.

mod discover;
mod report;
pub(crate) mod select;
mod sweep;

pub use discover::{discover_rules, DiscoveryThresholds, QualifiedRule, SensitivityReport, SensitivityRow};
pub use report::{write_correction_csv, write_sensitivity_csv, write_sweep_csv};
pub use select::{
    choose_candidate, run_candidates, select_hyperparameters, selection_from_runs, CandidateResult, CandidateRun,
    FinetuneConfig, MethodConfig, Selection,
};
pub use sweep::{sweep, SweepAxes, SweepCell, SweepContext, SweepMethod, SweepReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{predict_all, Model};
use crate::synthbench::{BenchmarkCase, Dataset, EvalItem, Split};
use crate::tensor::Tensor;

/// Counts behind one errors-corrected figure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Correction {
    /// Size of `D`, the images whose clean version the pre-edit model gets right.
    pub d_size: usize,
    /// Transformed images in `D` misclassified before the rewrite.
    pub n_pre: usize,
    /// Transformed images in `D` misclassified after the rewrite.
    pub n_post: usize,
}

impl Correction {
    /// `100 (N_pre - N_post) / N_pre`, or `None` when `N_pre = 0`.
    pub fn percent(&self) -> Option<f64> {
        (self.n_pre > 0).then(|| 100.0 * (self.n_pre as f64 - self.n_post as f64) / self.n_pre as f64)
    }
}

/// Errors corrected over `D`. `pre` and `post` are predictions on the
/// transformed images before and after the rewrite; `in_d[i]` says whether
/// image `i` belongs to `D`.
pub fn percent_errors_corrected(pre: &[usize], post: &[usize], labels: &[usize], in_d: &[bool]) -> Result<Correction> {
    let n = labels.len();
    if pre.len() != n || post.len() != n || in_d.len() != n {
        return Err(Error::dim("prediction, label and filter lengths differ"));
    }
    let mut c = Correction { d_size: 0, n_pre: 0, n_post: 0 };
    for i in (0..n).filter(|&i| in_d[i]) {
        c.d_size += 1;
        c.n_pre += usize::from(pre[i] != labels[i]);
        c.n_post += usize::from(post[i] != labels[i]);
    }
    Ok(c)
}

/// The four populations a rewrite is judged on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    TargetSameStyle,
    TargetHeldOutStyle,
    NonTargetSameStyle,
    NonTargetHeldOutStyle,
}

impl Group {
    pub const ALL: [Group; 4] =
        [Group::TargetSameStyle, Group::TargetHeldOutStyle, Group::NonTargetSameStyle, Group::NonTargetHeldOutStyle];

    pub fn as_str(self) -> &'static str {
        match self {
            Group::TargetSameStyle => "target_same_style",
            Group::TargetHeldOutStyle => "target_held_out_style",
            Group::NonTargetSameStyle => "non_target_same_style",
            Group::NonTargetHeldOutStyle => "non_target_held_out_style",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub group: Group,
    /// Transformed images in the group, in or out of `D`.
    pub images: usize,
    pub correction: Correction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub method: String,
    pub config_id: String,
    pub groups: Vec<GroupStats>,
    pub clean_images: usize,
    pub clean_correct_before: usize,
    pub clean_correct_after: usize,
}

impl CorrectionReport {
    pub fn group(&self, g: Group) -> &GroupStats {
        self.groups.iter().find(|s| s.group == g).expect("all groups present")
    }

    pub fn clean_accuracy_before(&self) -> f64 {
        100.0 * self.clean_correct_before as f64 / self.clean_images as f64
    }

    pub fn clean_accuracy_after(&self) -> f64 {
        100.0 * self.clean_correct_after as f64 / self.clean_images as f64
    }

    /// Percentage-point drop in clean accuracy.
    pub fn accuracy_drop(&self) -> f64 {
        accuracy_drop(self.clean_correct_before, self.clean_correct_after, self.clean_images)
    }
}

pub(crate) fn accuracy_drop(before: usize, after: usize, total: usize) -> f64 {
    100.0 * (before as f64 - after as f64) / total as f64
}

/// Clean labeled images used for the accuracy gate.
#[derive(Clone, Debug)]
pub struct CleanSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl CleanSet {
    pub fn test_split(dataset: &Dataset) -> Self {
        let idx = dataset.indices(Split::Test);
        Self { images: dataset.tensors(&idx), labels: dataset.labels(&idx) }
    }

    pub fn correct(&self, model: &Model) -> Result<usize> {
        if self.images.is_empty() {
            return Err(Error::Empty("clean evaluation set".into()));
        }
        let preds = predict_all(model, &self.images)?;
        Ok(preds.iter().zip(&self.labels).filter(|(p, l)| p == l).count())
    }
}

/// Pre-rewrite predictions on one list of evaluation items.
#[derive(Clone, Debug)]
struct ItemBaseline {
    labels: Vec<usize>,
    in_d: Vec<bool>,
    pre: Vec<usize>,
    transformed: Vec<Tensor>,
}

impl ItemBaseline {
    fn new(before: &Model, items: &[EvalItem]) -> Result<Self> {
        let clean: Vec<Tensor> = items.iter().map(|i| i.clean.to_tensor()).collect();
        let transformed: Vec<Tensor> = items.iter().map(|i| i.transformed.to_tensor()).collect();
        let labels: Vec<usize> = items.iter().map(|i| i.label).collect();
        let clean_pred = predict_all(before, &clean)?;
        let in_d = clean_pred.iter().zip(&labels).map(|(p, l)| p == l).collect();
        Ok(Self { pre: predict_all(before, &transformed)?, labels, in_d, transformed })
    }

    fn post(&self, after: &Model) -> Result<Vec<usize>> {
        predict_all(after, &self.transformed)
    }

    fn correction(&self, post: &[usize], keep: impl Fn(usize) -> bool) -> Result<Correction> {
        let in_d: Vec<bool> = (0..self.labels.len()).map(|i| self.in_d[i] && keep(i)).collect();
        percent_errors_corrected(&self.pre, post, &self.labels, &in_d)
    }
}

/// Everything about a case that depends only on the pre-rewrite model, so
/// many candidate rewrites can be scored without recomputing it.
#[derive(Clone, Debug)]
pub struct CaseBaseline {
    target: usize,
    validation: ItemBaseline,
    test: ItemBaseline,
    held_out: ItemBaseline,
    clean: CleanSet,
    clean_correct: usize,
}

impl CaseBaseline {
    pub fn new(before: &Model, case: &BenchmarkCase, clean: &CleanSet) -> Result<Self> {
        Ok(Self {
            target: case.target_class,
            validation: ItemBaseline::new(before, &case.validation)?,
            test: ItemBaseline::new(before, &case.test)?,
            held_out: ItemBaseline::new(before, &case.held_out)?,
            clean: clean.clone(),
            clean_correct: clean.correct(before)?,
        })
    }

    pub fn clean_correct(&self) -> usize {
        self.clean_correct
    }

    pub fn clean_images(&self) -> usize {
        self.clean.images.len()
    }

    /// Errors corrected over the whole validation split.
    pub fn validation_score(&self, after: &Model) -> Result<Correction> {
        let post = self.validation.post(after)?;
        self.validation.correction(&post, |_| true)
    }

    pub fn clean_correct_after(&self, after: &Model) -> Result<usize> {
        self.clean.correct(after)
    }

    /// Full four-group report on the test and held-out splits.
    pub fn report(&self, after: &Model, method: &str, config_id: &str) -> Result<CorrectionReport> {
        let mut groups = Vec::with_capacity(4);
        for (base, same) in [(&self.test, true), (&self.held_out, false)] {
            let post = base.post(after)?;
            for target in [true, false] {
                let keep = |i: usize| (base.labels[i] == self.target) == target;
                let group = match (target, same) {
                    (true, true) => Group::TargetSameStyle,
                    (true, false) => Group::TargetHeldOutStyle,
                    (false, true) => Group::NonTargetSameStyle,
                    (false, false) => Group::NonTargetHeldOutStyle,
                };
                let images = (0..base.labels.len()).filter(|&i| keep(i)).count();
                groups.push(GroupStats { group, images, correction: base.correction(&post, keep)? });
            }
        }
        groups.sort_by_key(|g| g.group);
        Ok(CorrectionReport {
            method: method.to_string(),
            config_id: config_id.to_string(),
            groups,
            clean_images: self.clean_images(),
            clean_correct_before: self.clean_correct,
            clean_correct_after: self.clean_correct_after(after)?,
        })
    }
}

/// Four-group report for a rewrite of `before` into `after`.
pub fn evaluate_case(
    before: &Model,
    after: &Model,
    case: &BenchmarkCase,
    clean: &CleanSet,
    method: &str,
    config_id: &str,
) -> Result<CorrectionReport> {
    CaseBaseline::new(before, case, clean)?.report(after, method, config_id)
}
