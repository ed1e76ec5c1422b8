use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalkit::{DiscoveryThresholds, MethodConfig, SweepAxes};
use crate::nets::{Architecture, TrainConfig};
use crate::synthbench::{DatasetConfig, ReferenceSet, STYLE_FAMILIES};

fn one() -> usize {
    1
}
fn all_families() -> Vec<String> {
    STYLE_FAMILIES.iter().map(|s| s.to_string()).collect()
}
fn default_threshold() -> f64 {
    0.25
}

/// Texture bank seed and the style families used for discovery.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleSpec {
    pub seed: u64,
    #[serde(default = "all_families")]
    pub families: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Architecture,
}

/// One benchmark case, named so its artifacts get their own directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    pub name: String,
    pub concept: String,
    pub style: String,
    pub target_class: usize,
    pub exemplars: usize,
    pub seed: u64,
    #[serde(default)]
    pub reference: ReferenceSet,
    /// Replace every transformed exemplar by its original image, a no-op
    /// control whose rewrites must leave the model unchanged.
    #[serde(default)]
    pub identity_exemplars: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionSpec {
    /// Largest admissible clean-accuracy drop, in percentage points.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl Default for SelectionSpec {
    fn default() -> Self {
        Self { threshold: default_threshold() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    /// Name of the case the sweep varies.
    pub case: String,
    pub axes: SweepAxes,
}

/// Everything one experiment needs, read from a single TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Divides every optimizer step count (1 keeps the grids verbatim).
    #[serde(default = "one")]
    pub steps_divisor: usize,
    pub dataset: DatasetConfig,
    pub styles: StyleSpec,
    pub model: ModelSpec,
    pub train: TrainConfig,
    #[serde(default)]
    pub cases: Vec<CaseSpec>,
    #[serde(default)]
    pub methods: Vec<MethodConfig>,
    #[serde(default)]
    pub selection: SelectionSpec,
    #[serde(default)]
    pub discovery: DiscoveryThresholds,
    pub sweep: Option<SweepSpec>,
}

/// A validation problem and the config key it is about, e.g. `cases[1].style`.
struct Issue {
    key: String,
    message: String,
}

fn issue(key: impl Into<String>, message: impl Into<String>) -> Issue {
    Issue { key: key.into(), message: message.into() }
}

impl ExperimentConfig {
    /// Reads and validates a config file. Errors point at the offending line.
    pub fn load(path: &Path) -> Result<Self> {
        let src = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&src, path)
    }

    /// Parses and validates config text; `origin` only labels error messages.
    pub fn parse(src: &str, origin: &Path) -> Result<Self> {
        let at = |line: usize, message: String| Error::ConfigAt { path: origin.to_path_buf(), line, message };
        let cfg: Self = toml::from_str(src).map_err(|e| {
            let line = e.span().map_or(1, |s| line_of(src, s.start));
            at(line, e.message().trim().to_string())
        })?;
        if let Some(i) = cfg.issues().into_iter().next() {
            return Err(at(locate(src, &i.key), format!("{}: {}", i.key, i.message)));
        }
        Ok(cfg)
    }

    pub fn case(&self, name: &str) -> Option<&CaseSpec> {
        self.cases.iter().find(|c| c.name == name)
    }

    /// Methods with every step count divided by `steps_divisor`.
    pub fn scaled_methods(&self) -> Vec<MethodConfig> {
        self.methods.iter().map(|m| m.scaled(self.steps_divisor)).collect()
    }

    fn issues(&self) -> Vec<Issue> {
        let mut out = Vec::new();
        if self.steps_divisor == 0 {
            out.push(issue("steps_divisor", "must be at least 1"));
        }
        if let Err(e) = self.dataset.validate() {
            out.push(issue("dataset", e.to_string()));
        }
        let classes = self.dataset.num_classes();
        let model = self.model.arch.build(0);
        if classes != model.num_classes {
            out.push(issue(
                "dataset.background_probs",
                format!("{classes} classes given, the network has {}", model.num_classes),
            ));
        }
        for (i, f) in self.styles.families.iter().enumerate() {
            if !STYLE_FAMILIES.contains(&f.as_str()) {
                out.push(issue(format!("styles.families[{i}]"), format!("unknown style family '{f}'")));
            }
        }
        let t = &self.train;
        if !(t.lr.is_finite() && t.lr >= 0.0) {
            out.push(issue("train.lr", "must be finite and non-negative"));
        }
        if t.batch_size == 0 {
            out.push(issue("train.batch_size", "must be at least 1"));
        }
        if t.calibration_images == 0 {
            out.push(issue("train.calibration_images", "must be at least 1"));
        }

        let concepts = self.dataset.concepts();
        let mut names = BTreeSet::new();
        for (i, c) in self.cases.iter().enumerate() {
            let key = |k: &str| format!("cases[{i}].{k}");
            let safe = |ch: char| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-';
            if c.name.is_empty() || !c.name.chars().all(safe) {
                out.push(issue(key("name"), "use letters, digits, '_' or '-'"));
            }
            if !names.insert(c.name.as_str()) {
                out.push(issue(key("name"), format!("duplicate case name '{}'", c.name)));
            }
            if !concepts.contains(&c.concept) {
                out.push(issue(key("concept"), format!("concept '{}' is not generated by the dataset", c.concept)));
            }
            if !STYLE_FAMILIES.contains(&c.style.as_str()) {
                out.push(issue(key("style"), format!("unknown style family '{}'", c.style)));
            }
            if c.target_class >= classes {
                out.push(issue(key("target_class"), format!("class {} out of range for {classes}", c.target_class)));
            }
            if c.exemplars == 0 {
                out.push(issue(key("exemplars"), "must be at least 1"));
            }
            if c.reference == (ReferenceSet::Training { count: 0 }) {
                out.push(issue(key("reference"), "count must be at least 1"));
            }
        }

        let mut ids = BTreeSet::new();
        for (i, m) in self.methods.iter().enumerate() {
            let key = |k: &str| format!("methods[{i}].{k}");
            if !ids.insert(m.id()) {
                out.push(issue(key("kind"), format!("duplicate method '{}'", m.id())));
            }
            if !model.editable.contains(&m.layer()) {
                out.push(issue(
                    key("layer"),
                    format!("layer {} is not editable (editable: {:?})", m.layer(), model.editable),
                ));
            }
            if m.grid().is_empty() {
                out.push(issue(key("grid"), "grid is empty"));
            }
            if m.grid().iter().any(|p| !(p.lr.is_finite() && p.lr >= 0.0)) {
                out.push(issue(key("grid"), "learning rates must be finite and non-negative"));
            }
            if let MethodConfig::Edit(e) = m {
                if !(e.damping.is_finite() && e.damping >= 0.0) {
                    out.push(issue(key("damping"), "must be finite and non-negative"));
                }
            }
        }

        if self.selection.threshold.is_nan() || self.selection.threshold < 0.0 {
            out.push(issue("selection.threshold", "must be non-negative"));
        }
        let d = &self.discovery;
        if !(0.0..=1.0).contains(&d.min_presence) {
            out.push(issue("discovery.min_presence", "must lie in [0, 1]"));
        }
        if !d.min_drop.is_finite() {
            out.push(issue("discovery.min_drop", "must be finite"));
        }
        if d.min_classes == 0 {
            out.push(issue("discovery.min_classes", "must be at least 1"));
        }

        if let Some(s) = &self.sweep {
            if self.case(&s.case).is_none() {
                out.push(issue("sweep.case", format!("no case named '{}'", s.case)));
            }
            let a = &s.axes;
            for (name, empty) in [
                ("methods", a.methods.is_empty()),
                ("layers", a.layers.is_empty()),
                ("exemplars", a.exemplars.is_empty()),
                ("use_mask", a.use_mask.is_empty()),
                ("rank_one", a.rank_one.is_empty()),
                ("thresholds", a.thresholds.is_empty()),
            ] {
                if empty {
                    out.push(issue(format!("sweep.axes.{name}"), "axis is empty"));
                }
            }
            for (i, l) in a.layers.iter().enumerate() {
                if !model.editable.contains(l) {
                    out.push(issue(format!("sweep.axes.layers[{i}]"), format!("layer {l} is not editable")));
                }
            }
            if a.exemplars.contains(&0) {
                out.push(issue("sweep.axes.exemplars", "exemplar counts must be at least 1"));
            }
            if a.thresholds.iter().any(|t| t.is_nan() || *t < 0.0) {
                out.push(issue("sweep.axes.thresholds", "thresholds must be non-negative"));
            }
        }
        out
    }
}

fn line_of(src: &str, offset: usize) -> usize {
    src[..offset.min(src.len())].bytes().filter(|&b| b == b'\n').count() + 1
}

enum Seg<'a> {
    Key(&'a str),
    Index(usize),
}

fn segments(key: &str) -> Vec<Seg<'_>> {
    let mut out = Vec::new();
    for part in key.split('.') {
        let (name, rest) = part.split_once('[').unwrap_or((part, ""));
        out.push(Seg::Key(name));
        for idx in rest.split('[') {
            if let Ok(i) = idx.trim_end_matches(']').parse() {
                out.push(Seg::Index(i));
            }
        }
    }
    out
}

/// Line of the deepest part of `key` present in `src` (1 if none is).
fn locate(src: &str, key: &str) -> usize {
    use toml::de::{DeTable, DeValue};
    let Ok(root) = DeTable::parse(src) else { return 1 };
    let mut line = 1;
    let mut table = Some(root.get_ref());
    let mut value: Option<&DeValue<'_>> = None;
    for seg in segments(key) {
        match seg {
            Seg::Key(k) => {
                let Some(t) = table.or(match value {
                    Some(DeValue::Table(t)) => Some(t),
                    _ => None,
                }) else {
                    break;
                };
                let Some((name, v)) = t.iter().find(|(name, _)| name.get_ref().as_ref() == k) else { break };
                line = line_of(src, name.span().start);
                table = None;
                value = Some(v.get_ref());
            }
            Seg::Index(i) => {
                let Some(DeValue::Array(a)) = value else { break };
                let Some(v) = a.get(i) else { break };
                line = line_of(src, v.span().start);
                table = None;
                value = Some(v.get_ref());
            }
        }
    }
    line
}
