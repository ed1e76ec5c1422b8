//! Config-driven pipeline: every stage reads its inputs from and writes its
//! outputs under one output directory.

mod config;
mod stages;

pub use config::{CaseSpec, ExperimentConfig, ModelSpec, SelectionSpec, StyleSpec, SweepSpec};
pub use stages::{discover, evaluate, gen_data, rewrite, run_all, sweep, train, MethodFamily, RewriteSummary};

use std::path::{Path, PathBuf};

use crate::synthbench::{CASE_MANIFEST, DATASET_MANIFEST};

/// Artifact layout under an output directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn dataset_manifest(&self) -> PathBuf {
        self.data_dir().join(DATASET_MANIFEST)
    }

    pub fn base_checkpoint(&self) -> PathBuf {
        self.root.join("model").join("base.ckpt")
    }

    pub fn case_dir(&self, case: &str) -> PathBuf {
        self.root.join("cases").join(case)
    }

    pub fn case_data(&self, case: &str) -> PathBuf {
        self.case_dir(case).join("case")
    }

    pub fn case_manifest(&self, case: &str) -> PathBuf {
        self.case_data(case).join(CASE_MANIFEST)
    }

    pub fn method_checkpoint(&self, case: &str, method_id: &str) -> PathBuf {
        self.case_dir(case).join(format!("{method_id}.ckpt"))
    }

    pub fn method_summary(&self, case: &str, method_id: &str) -> PathBuf {
        self.case_dir(case).join(format!("{method_id}.toml"))
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn corrections_csv(&self) -> PathBuf {
        self.reports_dir().join("corrections.csv")
    }

    pub fn sensitivity_csv(&self) -> PathBuf {
        self.reports_dir().join("sensitivity.csv")
    }

    pub fn discovery_summary(&self) -> PathBuf {
        self.reports_dir().join("discovery.toml")
    }

    pub fn sweep_csv(&self) -> PathBuf {
        self.reports_dir().join("sweep.csv")
    }
}
