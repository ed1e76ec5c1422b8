use serde::{Deserialize, Serialize};

use super::select::{run_candidates, selection_from_runs};
use super::{CandidateResult, CaseBaseline, CleanSet, CorrectionReport, FinetuneConfig, MethodConfig};
use crate::error::Result;
use crate::nets::Model;
use crate::rewrite::{EditConfig, FinetuneScope, GridPoint};
use crate::synthbench::{build_benchmark_case_with, Dataset, ReferenceSet, StyleBank};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepMethod {
    Edit,
    FinetuneLocal,
    FinetuneGlobal,
}

/// Axes of an ablation sweep. The mask and rank axes only apply to edits;
/// fine-tuning cells span the remaining axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    pub methods: Vec<SweepMethod>,
    pub layers: Vec<usize>,
    pub exemplars: Vec<usize>,
    #[serde(default = "one_true")]
    pub use_mask: Vec<bool>,
    #[serde(default = "one_true")]
    pub rank_one: Vec<bool>,
    #[serde(default = "one_threshold")]
    pub thresholds: Vec<f64>,
}

fn one_true() -> Vec<bool> {
    vec![true]
}
fn one_threshold() -> Vec<f64> {
    vec![0.25]
}

/// One sweep run and what came of it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub method: String,
    pub layer: usize,
    pub exemplars: usize,
    pub use_mask: Option<bool>,
    pub rank_one: Option<bool>,
    pub threshold: f64,
    /// The selected grid point; `None` with a report means no edit was made.
    pub chosen: Option<CandidateResult>,
    pub report: Option<CorrectionReport>,
    pub error: Option<String>,
}

impl SweepCell {
    pub fn id(&self) -> String {
        let flag = |v: Option<bool>| v.map_or("na".to_string(), |b| b.to_string());
        format!(
            "{}/L{}/N{}/mask={}/rank1={}/thr={}",
            self.method,
            self.layer,
            self.exemplars,
            flag(self.use_mask),
            flag(self.rank_one),
            self.threshold
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
}

/// Everything a sweep needs besides its axes.
pub struct SweepContext<'a> {
    pub model: &'a Model,
    pub dataset: &'a Dataset,
    pub bank: &'a StyleBank,
    pub clean: &'a CleanSet,
    pub concept: &'a str,
    pub style: &'a str,
    pub target_class: usize,
    pub case_seed: u64,
    pub reference: ReferenceSet,
    /// Template for edit cells; layer, mask and rank flags are overridden.
    pub edit: &'a EditConfig,
    pub finetune_grid: &'a [GridPoint],
}

/// Runs the cross product of the axes. Per-cell failures are recorded in the
/// cell; the sweep itself only fails on a broken context.
pub fn sweep(ctx: &SweepContext<'_>, axes: &SweepAxes) -> Result<SweepReport> {
    let mut cells = Vec::new();
    for &n in &axes.exemplars {
        let case = build_benchmark_case_with(
            ctx.dataset,
            ctx.bank,
            ctx.concept,
            ctx.style,
            ctx.target_class,
            n,
            ctx.case_seed,
            ctx.reference,
        );
        let prepared = case.and_then(|c| CaseBaseline::new(ctx.model, &c, ctx.clean).map(|b| (c, b)));
        for &method in &axes.methods {
            for &layer in &axes.layers {
                let variants: Vec<(Option<bool>, Option<bool>)> = match method {
                    SweepMethod::Edit => axes
                        .use_mask
                        .iter()
                        .flat_map(|&m| axes.rank_one.iter().map(move |&r| (Some(m), Some(r))))
                        .collect(),
                    _ => vec![(None, None)],
                };
                for (use_mask, rank_one) in variants {
                    let config = match method {
                        SweepMethod::Edit => MethodConfig::Edit(EditConfig {
                            layer,
                            use_mask: use_mask.unwrap_or(true),
                            rank_one: rank_one.unwrap_or(true),
                            ..ctx.edit.clone()
                        }),
                        SweepMethod::FinetuneLocal | SweepMethod::FinetuneGlobal => {
                            MethodConfig::Finetune(FinetuneConfig {
                                layer,
                                scope: if method == SweepMethod::FinetuneLocal {
                                    FinetuneScope::Local
                                } else {
                                    FinetuneScope::Global
                                },
                                grid: ctx.finetune_grid.to_vec(),
                            })
                        }
                    };
                    let runs = match &prepared {
                        Ok((case, base)) => run_candidates(ctx.model, case, base, std::slice::from_ref(&config))
                            .map_err(|e| e.to_string()),
                        Err(e) => Err(e.to_string()),
                    };
                    for &threshold in &axes.thresholds {
                        let mut cell = SweepCell {
                            method: config.name(),
                            layer,
                            exemplars: n,
                            use_mask,
                            rank_one,
                            threshold,
                            chosen: None,
                            report: None,
                            error: None,
                        };
                        match (&runs, &prepared) {
                            (Ok(runs), Ok((_, base))) => {
                                let sel = selection_from_runs(ctx.model, runs.clone(), threshold);
                                cell.chosen = sel.chosen.map(|i| sel.candidates[i].clone());
                                match base.report(&sel.model, &cell.method, &cell.id()) {
                                    Ok(r) => cell.report = Some(r),
                                    Err(e) => cell.error = Some(e.to_string()),
                                }
                            }
                            (Err(e), _) => cell.error = Some(e.clone()),
                            (_, Err(e)) => cell.error = Some(e.to_string()),
                        }
                        cells.push(cell);
                    }
                }
            }
        }
    }
    Ok(SweepReport { cells })
}
