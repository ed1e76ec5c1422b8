use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{ExperimentConfig, Workspace};
use crate::error::{Error, Result};
use crate::evalkit::select::select_with_baseline;
use crate::evalkit::{
    discover_rules, sweep as run_sweep, write_correction_csv, write_sensitivity_csv, write_sweep_csv, CandidateResult,
    CaseBaseline, CleanSet, CorrectionReport, MethodConfig, QualifiedRule, SensitivityReport, SweepContext,
    SweepReport,
};
use crate::nets::{load_checkpoint, save_checkpoint, train_base, CheckpointMeta, ModelCheckpoint};
use crate::rewrite::{weight_change_spectrum, EditConfig, DEFAULT_FINETUNE_GRID};
use crate::synthbench::{
    build_benchmark_case_with, gen_texture_bank, generate_dataset, load_case, load_dataset, save_case, save_dataset,
    BenchmarkCase, Dataset, Split,
};

fn workspace(cfg: &ExperimentConfig) -> Workspace {
    Workspace::new(&cfg.output_dir)
}

fn require(path: &Path, what: &str, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact { what: what.into(), path: path.to_path_buf(), stage })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value).map_err(|e| Error::Serde(e.to_string()))
}

fn load_data(ws: &Workspace) -> Result<Dataset> {
    require(&ws.dataset_manifest(), "dataset", "gen-data")?;
    load_dataset(&ws.data_dir())
}

fn load_base(ws: &Workspace) -> Result<ModelCheckpoint> {
    require(&ws.base_checkpoint(), "base checkpoint", "train")?;
    load_checkpoint(&ws.base_checkpoint())
}

fn load_named_case(ws: &Workspace, name: &str) -> Result<BenchmarkCase> {
    require(&ws.case_manifest(name), &format!("case '{name}'"), "gen-data")?;
    load_case(&ws.case_data(name))
}

/// Renders the dataset and builds every configured case.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ws = workspace(cfg);
    let dataset = generate_dataset(&cfg.dataset)?;
    save_dataset(&dataset, &ws.data_dir())?;
    let bank = gen_texture_bank(cfg.styles.seed);
    for spec in &cfg.cases {
        let mut case = build_benchmark_case_with(
            &dataset,
            &bank,
            &spec.concept,
            &spec.style,
            spec.target_class,
            spec.exemplars,
            spec.seed,
            spec.reference,
        )?;
        if spec.identity_exemplars {
            case.exemplars.iter_mut().for_each(|e| e.x_prime = e.x.clone());
        }
        save_case(&case, &ws.case_data(&spec.name))?;
    }
    Ok(dataset)
}

/// Trains the base network on the training split.
pub fn train(cfg: &ExperimentConfig) -> Result<ModelCheckpoint> {
    let ws = workspace(cfg);
    let dataset = load_data(&ws)?;
    let idx = dataset.indices(Split::Train);
    let ckpt =
        train_base(cfg.model.arch, &dataset.tensors(&idx), &dataset.labels(&idx), &cfg.train, &dataset.fingerprint())?;
    save_checkpoint(&ckpt, &ws.base_checkpoint())?;
    Ok(ckpt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MethodFamily {
    Edit,
    Finetune,
}

impl MethodFamily {
    fn of(m: &MethodConfig) -> Self {
        match m {
            MethodConfig::Edit(_) => Self::Edit,
            MethodConfig::Finetune(_) => Self::Finetune,
        }
    }

    fn stage(self) -> &'static str {
        match self {
            Self::Edit => "edit",
            Self::Finetune => "finetune",
        }
    }
}

/// What hyperparameter selection did for one case and method; written next
/// to the chosen checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewriteSummary {
    pub case: String,
    pub method: String,
    pub layer: usize,
    pub threshold: f64,
    pub steps_divisor: usize,
    pub no_edit: bool,
    pub chosen: Option<CandidateResult>,
    /// Two largest singular values of the weight change at the edited layer.
    pub sigma: [f64; 2],
    pub candidates: Vec<CandidateResult>,
}

/// Runs hyperparameter selection for every case and every method of
/// `family` (optionally one case only) and writes the chosen checkpoints,
/// or untouched copies of the base model when no candidate passes the gate.
pub fn rewrite(cfg: &ExperimentConfig, family: MethodFamily, only_case: Option<&str>) -> Result<Vec<RewriteSummary>> {
    let ws = workspace(cfg);
    if let Some(name) = only_case {
        if cfg.case(name).is_none() {
            return Err(Error::Config(format!("no case named '{name}'")));
        }
    }
    let base = load_base(&ws)?;
    let dataset = load_data(&ws)?;
    let clean = CleanSet::test_split(&dataset);
    let methods: Vec<MethodConfig> =
        cfg.scaled_methods().into_iter().filter(|m| MethodFamily::of(m) == family).collect();
    let mut out = Vec::new();
    for spec in cfg.cases.iter().filter(|c| only_case.is_none_or(|n| n == c.name)) {
        let case = load_named_case(&ws, &spec.name)?;
        let baseline = CaseBaseline::new(&base.model, &case, &clean)?;
        for method in &methods {
            let sel = select_with_baseline(
                &base.model,
                &case,
                &baseline,
                std::slice::from_ref(method),
                cfg.selection.threshold,
            )?;
            let id = method.id();
            let summary = RewriteSummary {
                case: spec.name.clone(),
                method: id.clone(),
                layer: method.layer(),
                threshold: cfg.selection.threshold,
                steps_divisor: cfg.steps_divisor,
                no_edit: sel.is_no_edit(),
                chosen: sel.chosen.map(|i| sel.candidates[i].clone()),
                sigma: weight_change_spectrum(&base.model, &sel.model, method.layer())?,
                candidates: sel.candidates,
            };
            // an unchanged model keeps the base metadata so the file is byte-identical to the base
            let meta = if sel.model == base.model {
                base.meta.clone()
            } else {
                CheckpointMeta { note: format!("{}/{id}", spec.name), ..base.meta.clone() }
            };
            save_checkpoint(&ModelCheckpoint { model: sel.model, meta }, &ws.method_checkpoint(&spec.name, &id))?;
            write_text(&ws.method_summary(&spec.name, &id), &to_toml(&summary)?)?;
            out.push(summary);
        }
    }
    Ok(out)
}

/// Scores every rewritten checkpoint on its case and writes the
/// corrections report.
pub fn evaluate(cfg: &ExperimentConfig) -> Result<Vec<CorrectionReport>> {
    let ws = workspace(cfg);
    let base = load_base(&ws)?;
    let dataset = load_data(&ws)?;
    let clean = CleanSet::test_split(&dataset);
    let mut reports = Vec::new();
    for spec in &cfg.cases {
        let case = load_named_case(&ws, &spec.name)?;
        let baseline = CaseBaseline::new(&base.model, &case, &clean)?;
        for method in &cfg.methods {
            let path = ws.method_checkpoint(&spec.name, &method.id());
            require(&path, &format!("{} checkpoint", method.id()), MethodFamily::of(method).stage())?;
            let after = load_checkpoint(&path)?;
            reports.push(baseline.report(&after.model, &method.id(), &spec.name)?);
        }
    }
    write_correction_csv(&ws.corrections_csv(), &reports)?;
    Ok(reports)
}

#[derive(Serialize)]
struct DiscoverySummary<'a> {
    qualifying: &'a [QualifiedRule],
    skipped: &'a [String],
}

/// Measures concept sensitivity of the base model for every configured
/// style family and writes the sensitivity table and qualifying rules.
pub fn discover(cfg: &ExperimentConfig) -> Result<SensitivityReport> {
    let ws = workspace(cfg);
    let base = load_base(&ws)?;
    let dataset = load_data(&ws)?;
    let bank = gen_texture_bank(cfg.styles.seed);
    let report = discover_rules(&base.model, &dataset, &bank, &cfg.styles.families, cfg.discovery)?;
    write_sensitivity_csv(&ws.sensitivity_csv(), &report)?;
    let summary = DiscoverySummary { qualifying: &report.qualifying, skipped: &report.skipped };
    write_text(&ws.discovery_summary(), &to_toml(&summary)?)?;
    Ok(report)
}

/// Runs the configured ablation sweep. Edit cells start from the first
/// configured edit method, fine-tuning cells use the first configured
/// fine-tuning grid.
pub fn sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    let ws = workspace(cfg);
    let spec = cfg.sweep.as_ref().ok_or_else(|| Error::Config("config has no [sweep] table".into()))?;
    let case = cfg.case(&spec.case).ok_or_else(|| Error::Config(format!("no case named '{}'", spec.case)))?;
    let base = load_base(&ws)?;
    let dataset = load_data(&ws)?;
    let clean = CleanSet::test_split(&dataset);
    let bank = gen_texture_bank(cfg.styles.seed);
    let methods = cfg.scaled_methods();
    let edit = methods
        .iter()
        .find_map(|m| match m {
            MethodConfig::Edit(e) => Some(e.clone()),
            MethodConfig::Finetune(_) => None,
        })
        .unwrap_or_else(|| match MethodConfig::Edit(EditConfig::new(0)).scaled(cfg.steps_divisor) {
            MethodConfig::Edit(e) => e,
            MethodConfig::Finetune(_) => unreachable!(),
        });
    let finetune_grid = methods
        .iter()
        .find_map(|m| match m {
            MethodConfig::Finetune(f) => Some(f.grid.clone()),
            MethodConfig::Edit(_) => None,
        })
        .unwrap_or_else(|| DEFAULT_FINETUNE_GRID.iter().map(|p| p.scaled(cfg.steps_divisor)).collect());
    let ctx = SweepContext {
        model: &base.model,
        dataset: &dataset,
        bank: &bank,
        clean: &clean,
        concept: &case.concept,
        style: &case.style,
        target_class: case.target_class,
        case_seed: case.seed,
        reference: case.reference,
        edit: &edit,
        finetune_grid: &finetune_grid,
    };
    let report = run_sweep(&ctx, &spec.axes)?;
    write_sweep_csv(&ws.sweep_csv(), &report)?;
    Ok(report)
}

/// Every stage in order; the sweep only when configured.
pub fn run_all(cfg: &ExperimentConfig) -> Result<()> {
    gen_data(cfg)?;
    train(cfg)?;
    rewrite(cfg, MethodFamily::Edit, None)?;
    rewrite(cfg, MethodFamily::Finetune, None)?;
    evaluate(cfg)?;
    discover(cfg)?;
    if cfg.sweep.is_some() {
        sweep(cfg)?;
    }
    Ok(())
}
