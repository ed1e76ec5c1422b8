use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nets::{predict_all, Model};
use crate::synthbench::{transform_concept, Dataset, Split, StyleBank, VARIANTS_PER_FAMILY};
use crate::tensor::Tensor;

/// Selection rule for concept-style pairs worth rewriting.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscoveryThresholds {
    /// Minimum number of classes a pair must affect.
    pub min_classes: usize,
    /// Minimum fraction of a class's test images that carry the concept.
    pub min_presence: f64,
    /// Minimum accuracy drop, in percentage points.
    pub min_drop: f64,
}

impl Default for DiscoveryThresholds {
    fn default() -> Self {
        Self { min_classes: 3, min_presence: 0.2, min_drop: 15.0 }
    }
}

/// Accuracy of one class's concept-bearing test images, clean and with the
/// concept transformed (all variants of the style pooled).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub concept: String,
    pub class: usize,
    pub style: String,
    pub images: usize,
    pub presence: f64,
    pub accuracy_clean: f64,
    pub accuracy_transformed: f64,
}

impl SensitivityRow {
    /// Percentage-point accuracy drop caused by the transformation.
    pub fn drop(&self) -> f64 {
        100.0 * (self.accuracy_clean - self.accuracy_transformed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualifiedRule {
    pub concept: String,
    pub style: String,
    /// Classes that carry the concept often enough and lose enough accuracy.
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub thresholds: DiscoveryThresholds,
    pub rows: Vec<SensitivityRow>,
    /// `(concept, class, presence fraction)` over the test split.
    pub presence: Vec<(String, usize, f64)>,
    pub qualifying: Vec<QualifiedRule>,
    /// Concepts configured but never present.
    pub skipped: Vec<String>,
}

impl SensitivityReport {
    pub fn flags(&self, concept: &str) -> bool {
        self.qualifying.iter().any(|q| q.concept == concept)
    }

    /// Classes affected by `(concept, style)` under the thresholds.
    pub fn affected_classes(&self, concept: &str, style: &str) -> Vec<usize> {
        self.rows
            .iter()
            .filter(|r| r.concept == concept && r.style == style)
            .filter(|r| r.presence >= self.thresholds.min_presence && r.drop() >= self.thresholds.min_drop)
            .map(|r| r.class)
            .collect()
    }
}

fn fraction(preds: &[usize], label: usize) -> f64 {
    preds.iter().filter(|&&p| p == label).count() as f64 / preds.len() as f64
}

/// Measures, for every concept, class and style family, how much the
/// model's accuracy on the class's concept-bearing test images drops when
/// the concept is re-textured, and flags the concept-style pairs that pass
/// all three thresholds.
pub fn discover_rules(
    model: &Model,
    dataset: &Dataset,
    bank: &StyleBank,
    styles: &[String],
    thresholds: DiscoveryThresholds,
) -> Result<SensitivityReport> {
    let test = dataset.indices(Split::Test);
    let classes = dataset.config.num_classes();
    let mut rows = Vec::new();
    let mut presence = Vec::new();
    let mut skipped = Vec::new();
    for concept in dataset.config.concepts() {
        if !test.iter().any(|&i| dataset.samples[i].masks.contains_key(&concept)) {
            skipped.push(concept.clone());
            continue;
        }
        for class in 0..classes {
            let of_class: Vec<usize> = test.iter().copied().filter(|&i| dataset.samples[i].label == class).collect();
            let with: Vec<usize> =
                of_class.iter().copied().filter(|&i| dataset.samples[i].masks.contains_key(&concept)).collect();
            let frac = if of_class.is_empty() { 0.0 } else { with.len() as f64 / of_class.len() as f64 };
            presence.push((concept.clone(), class, frac));
            if with.is_empty() {
                continue;
            }
            let clean = predict_all(model, &dataset.tensors(&with))?;
            let acc_clean = fraction(&clean, class);
            for style in styles {
                let mut images: Vec<Tensor> = Vec::with_capacity(with.len() * VARIANTS_PER_FAMILY);
                for v in 0..VARIANTS_PER_FAMILY {
                    let variant = bank.variant(style, v)?;
                    for &i in &with {
                        let s = &dataset.samples[i];
                        images.push(transform_concept(&s.image, &s.masks[&concept], variant)?.to_tensor());
                    }
                }
                let preds = predict_all(model, &images)?;
                rows.push(SensitivityRow {
                    concept: concept.clone(),
                    class,
                    style: style.clone(),
                    images: with.len(),
                    presence: frac,
                    accuracy_clean: acc_clean,
                    accuracy_transformed: fraction(&preds, class),
                });
            }
        }
    }
    let mut report = SensitivityReport { thresholds, rows, presence, qualifying: Vec::new(), skipped };
    for concept in dataset.config.concepts() {
        for style in styles {
            let affected = report.affected_classes(&concept, style);
            if affected.len() >= thresholds.min_classes {
                report.qualifying.push(QualifiedRule {
                    concept: concept.clone(),
                    style: style.clone(),
                    classes: affected,
                });
            }
        }
    }
    Ok(report)
}
