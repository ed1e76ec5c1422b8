use serde::{Deserialize, Serialize};

use super::{accuracy_drop, CaseBaseline, CleanSet, Correction};
use crate::error::Result;
use crate::nets::Model;
use crate::rewrite::{finetune, EditConfig, EditProblem, FinetuneScope, GridPoint, DEFAULT_FINETUNE_GRID};
use crate::synthbench::BenchmarkCase;
use crate::tensor::Tensor;

fn default_ft_grid() -> Vec<GridPoint> {
    DEFAULT_FINETUNE_GRID.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub layer: usize,
    pub scope: FinetuneScope,
    #[serde(default = "default_ft_grid")]
    pub grid: Vec<GridPoint>,
}

/// A rewrite method at a fixed layer, with the grid it is tuned over.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MethodConfig {
    Edit(EditConfig),
    Finetune(FinetuneConfig),
}

impl MethodConfig {
    pub fn grid(&self) -> &[GridPoint] {
        match self {
            MethodConfig::Edit(c) => &c.grid,
            MethodConfig::Finetune(c) => &c.grid,
        }
    }

    pub fn layer(&self) -> usize {
        match self {
            MethodConfig::Edit(c) => c.layer,
            MethodConfig::Finetune(c) => c.layer,
        }
    }

    /// Short method name: `edit`, `edit-mask`, `edit-proj`, `edit-mask-proj`,
    /// `finetune_local`, `finetune_global`.
    pub fn name(&self) -> String {
        match self {
            MethodConfig::Edit(c) => {
                let mut s = String::from("edit");
                if !c.use_mask {
                    s.push_str("-mask");
                }
                if !c.rank_one {
                    s.push_str("-proj");
                }
                s
            }
            MethodConfig::Finetune(c) => match c.scope {
                FinetuneScope::Local => "finetune_local".into(),
                FinetuneScope::Global => "finetune_global".into(),
            },
        }
    }

    /// Name plus layer, unique per method within an experiment: `edit_L4`.
    pub fn id(&self) -> String {
        format!("{}_L{}", self.name(), self.layer())
    }

    /// Same method with every grid step count divided by `divisor`.
    pub fn scaled(&self, divisor: usize) -> Self {
        let mut out = self.clone();
        let grid = match &mut out {
            MethodConfig::Edit(c) => &mut c.grid,
            MethodConfig::Finetune(c) => &mut c.grid,
        };
        grid.iter_mut().for_each(|p| *p = p.scaled(divisor));
        out
    }
}

/// Scores of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub method: String,
    pub layer: usize,
    pub point: GridPoint,
    /// Errors corrected on the validation split; absent when the run failed.
    pub validation: Option<Correction>,
    pub clean_correct: usize,
    /// Percentage-point drop in clean accuracy.
    pub accuracy_drop: f64,
    /// Objective (edit) or exemplar loss (fine-tuning) before the first step.
    pub initial_loss: f64,
    /// The same quantity after the last step.
    pub final_loss: f64,
    pub error: Option<String>,
}

impl CandidateResult {
    /// Validation score used for ranking; failed and undefined scores rank last.
    fn score(&self) -> f64 {
        self.validation.and_then(|c| c.percent()).unwrap_or(f64::NEG_INFINITY)
    }

    pub fn admissible(&self, threshold: f64) -> bool {
        self.error.is_none() && self.accuracy_drop <= threshold
    }
}

#[derive(Clone, Debug)]
pub struct CandidateRun {
    pub result: CandidateResult,
    pub model: Option<Model>,
}

/// Runs every grid point of every method and scores it on the validation
/// split and the clean accuracy set. Failures are recorded, not raised.
pub fn run_candidates(
    model: &Model,
    case: &BenchmarkCase,
    baseline: &CaseBaseline,
    methods: &[MethodConfig],
) -> Result<Vec<CandidateRun>> {
    let exemplars = &case.exemplars;
    let reference: Vec<Tensor> = case.covariance_ref.iter().map(|i| i.to_tensor()).collect();
    let mut runs = Vec::new();
    for method in methods {
        let problem = match method {
            MethodConfig::Edit(cfg) => Some(EditProblem::prepare(model, exemplars, &reference, cfg)),
            MethodConfig::Finetune(_) => None,
        };
        for &point in method.grid() {
            let outcome: std::result::Result<(Model, f64, f64), String> = match (method, &problem) {
                (MethodConfig::Edit(_), Some(Ok(p))) => {
                    p.run(model, point).map(|o| (o.model, o.initial_loss, o.final_loss)).map_err(|e| e.to_string())
                }
                (MethodConfig::Edit(_), Some(Err(e))) => Err(e.to_string()),
                (MethodConfig::Finetune(c), _) => finetune(model, exemplars, c.layer, c.scope, point)
                    .map(|o| (o.model, o.initial_loss, o.final_loss))
                    .map_err(|e| e.to_string()),
                (MethodConfig::Edit(_), None) => unreachable!("edit problems are always prepared"),
            };
            let mut result = CandidateResult {
                method: method.name(),
                layer: method.layer(),
                point,
                validation: None,
                clean_correct: 0,
                accuracy_drop: f64::INFINITY,
                initial_loss: f64::NAN,
                final_loss: f64::NAN,
                error: None,
            };
            let scored = outcome.and_then(|(m, start, loss)| {
                let val = baseline.validation_score(&m).map_err(|e| e.to_string())?;
                let correct = baseline.clean_correct_after(&m).map_err(|e| e.to_string())?;
                Ok((m, start, loss, val, correct))
            });
            match scored {
                Ok((m, start, loss, val, correct)) => {
                    result.validation = Some(val);
                    result.clean_correct = correct;
                    result.accuracy_drop = accuracy_drop(baseline.clean_correct(), correct, baseline.clean_images());
                    result.initial_loss = start;
                    result.final_loss = loss;
                    runs.push(CandidateRun { result, model: Some(m) });
                }
                Err(e) => {
                    result.error = Some(e);
                    runs.push(CandidateRun { result, model: None });
                }
            }
        }
    }
    Ok(runs)
}

/// Index of the admissible candidate with the best validation score; ties
/// go to the earlier candidate. `None` means no edit is performed.
pub fn choose_candidate(results: &[CandidateResult], threshold: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in results.iter().enumerate() {
        if !r.admissible(threshold) {
            continue;
        }
        if best.is_none_or(|b| r.score() > results[b].score()) {
            best = Some(i);
        }
    }
    best
}

/// Outcome of hyperparameter selection.
#[derive(Clone, Debug)]
pub struct Selection {
    pub candidates: Vec<CandidateResult>,
    /// Index into `candidates`; `None` is the no-edit outcome.
    pub chosen: Option<usize>,
    /// The chosen rewritten model, or an untouched copy of the input.
    pub model: Model,
}

impl Selection {
    pub fn is_no_edit(&self) -> bool {
        self.chosen.is_none()
    }
}

/// Tries every candidate, drops those whose clean-accuracy drop exceeds
/// `threshold` percentage points, and keeps the best validation score.
pub fn select_hyperparameters(
    model: &Model,
    case: &BenchmarkCase,
    clean: &CleanSet,
    methods: &[MethodConfig],
    threshold: f64,
) -> Result<Selection> {
    let baseline = CaseBaseline::new(model, case, clean)?;
    select_with_baseline(model, case, &baseline, methods, threshold)
}

pub(crate) fn select_with_baseline(
    model: &Model,
    case: &BenchmarkCase,
    baseline: &CaseBaseline,
    methods: &[MethodConfig],
    threshold: f64,
) -> Result<Selection> {
    let runs = run_candidates(model, case, baseline, methods)?;
    Ok(selection_from_runs(model, runs, threshold))
}

/// Applies the gate and argmax to already scored runs.
pub fn selection_from_runs(model: &Model, runs: Vec<CandidateRun>, threshold: f64) -> Selection {
    let candidates: Vec<CandidateResult> = runs.iter().map(|r| r.result.clone()).collect();
    let chosen = choose_candidate(&candidates, threshold);
    let model = match chosen {
        Some(i) => runs[i].model.clone().expect("admissible candidates carry a model"),
        None => model.clone(),
    };
    Selection { candidates, chosen, model }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(score: Option<(usize, usize)>, drop: f64, error: bool) -> CandidateResult {
        CandidateResult {
            method: "edit".into(),
            layer: 0,
            point: GridPoint::new(1e-3, 1),
            validation: score.map(|(p, q)| Correction { d_size: 100, n_pre: p, n_post: q }),
            clean_correct: 0,
            accuracy_drop: drop,
            initial_loss: 0.0,
            final_loss: 0.0,
            error: error.then(|| "boom".to_string()),
        }
    }

    #[test]
    fn gate_and_argmax() {
        let all_bad = [cand(Some((10, 2)), 1.0, false), cand(Some((10, 0)), 1.0, false)];
        assert_eq!(choose_candidate(&all_bad, 0.25), None);
        assert_eq!(choose_candidate(&[cand(Some((10, 5)), 0.1, false)], 0.25), Some(0));
        let two = [cand(Some((10, 6)), 0.0, false), cand(Some((10, 4)), 0.25, false)];
        assert_eq!(choose_candidate(&two, 0.25), Some(1));
        let tie = [cand(Some((10, 5)), 0.0, false), cand(Some((10, 5)), 0.0, false)];
        assert_eq!(choose_candidate(&tie, 0.25), Some(0));
        // undefined scores rank below everything, failures are never chosen
        let mixed = [cand(Some((0, 0)), 0.0, false), cand(Some((10, 12)), 0.0, false), cand(None, 0.0, true)];
        assert_eq!(choose_candidate(&mixed, 0.25), Some(1));
        assert_eq!(choose_candidate(&[cand(Some((10, 5)), 50.0, false)], f64::INFINITY), Some(0));
    }

    #[test]
    fn method_names() {
        let mut e = EditConfig::new(2);
        assert_eq!(MethodConfig::Edit(e.clone()).name(), "edit");
        e.use_mask = false;
        e.rank_one = false;
        assert_eq!(MethodConfig::Edit(e).name(), "edit-mask-proj");
        let f = FinetuneConfig { layer: 2, scope: FinetuneScope::Global, grid: default_ft_grid() };
        let f = MethodConfig::Finetune(f).scaled(100);
        assert_eq!(f.grid()[3].steps, 8);
        assert_eq!(f.name(), "finetune_global");
    }
}
