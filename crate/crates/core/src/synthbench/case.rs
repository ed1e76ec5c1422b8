use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::styles::{transform_concept, StyleBank, VARIANTS_PER_FAMILY};
use super::{Dataset, Mask, RgbImage, Split};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;

/// One `(x, x', m)` triple used to specify an edit.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Exemplar {
    pub x: RgbImage,
    pub x_prime: RgbImage,
    pub mask: Mask,
    pub label: usize,
    pub concept: String,
    pub style: String,
    pub variant: usize,
}

/// A concept-bearing evaluation image, clean and transformed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalItem {
    /// Index of the source sample in the dataset.
    pub source: usize,
    pub label: usize,
    pub variant: usize,
    pub clean: RgbImage,
    pub transformed: RgbImage,
}

/// One concept-style editing task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BenchmarkCase {
    pub concept: String,
    pub style: String,
    pub train_variant: usize,
    pub target_class: usize,
    pub exemplars: Vec<Exemplar>,
    pub validation: Vec<EvalItem>,
    pub test: Vec<EvalItem>,
    /// Test images transformed with each of the two variants not used by the exemplars.
    pub held_out: Vec<EvalItem>,
    /// Clean training images the key covariance is computed over.
    pub covariance_ref: Vec<RgbImage>,
}

impl BenchmarkCase {
    pub fn held_out_variants(&self) -> Vec<usize> {
        (0..VARIANTS_PER_FAMILY).filter(|&v| v != self.train_variant).collect()
    }

    /// Checks the structural contract of a case.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Manifest(m.to_string()));
        if self.exemplars.is_empty() {
            return bad("case has no exemplars");
        }
        if self.exemplars.iter().any(|e| e.label != self.target_class || e.mask.is_empty()) {
            return bad("exemplars must carry the target label and a nonempty mask");
        }
        if self.validation.iter().chain(&self.test).any(|i| i.variant != self.train_variant) {
            return bad("validation/test items must use the exemplar variant");
        }
        if self.held_out.iter().any(|i| i.variant == self.train_variant || i.variant >= VARIANTS_PER_FAMILY) {
            return bad("held-out items must use only the other variants");
        }
        Ok(())
    }
}

/// Which clean training images form a case's covariance reference set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReferenceSet {
    /// Every training image containing the concept.
    #[default]
    Concept,
    /// `count` training images taken at an even stride over the whole split,
    /// with or without the concept (all of them if the split is smaller).
    Training { count: usize },
}

/// Size of the validation share of `m` items: `round(0.3 m)`.
pub fn validation_count(m: usize) -> usize {
    (0.3 * m as f64).round() as usize
}

/// Assembles a case from the test split: `n` exemplars of `target_class`
/// carrying `concept`, a randomly chosen training variant, the remaining
/// concept-bearing images split 30/70 into validation and test, a held-out
/// copy of the test images under the other two variants, and the clean
/// training images that contain the concept as covariance reference.
pub fn build_benchmark_case(
    dataset: &Dataset,
    bank: &StyleBank,
    concept: &str,
    style: &str,
    target_class: usize,
    n: usize,
    seed: u64,
) -> Result<BenchmarkCase> {
    build_benchmark_case_with(dataset, bank, concept, style, target_class, n, seed, ReferenceSet::Concept)
}

/// [`build_benchmark_case`] with a choice of covariance reference set.
#[allow(clippy::too_many_arguments)]
pub fn build_benchmark_case_with(
    dataset: &Dataset,
    bank: &StyleBank,
    concept: &str,
    style: &str,
    target_class: usize,
    n: usize,
    seed: u64,
    reference: ReferenceSet,
) -> Result<BenchmarkCase> {
    if !bank.contains(style) {
        return Err(Error::Config(format!("unknown style family '{style}'")));
    }
    if n == 0 {
        return Err(Error::CaseConstruction("at least one exemplar is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["case", concept, style, &target_class.to_string()]));
    let train_variant = rng.random_range(0..VARIANTS_PER_FAMILY);

    let has = |i: usize| dataset.samples[i].masks.contains_key(concept);
    let pool: Vec<usize> = dataset.indices(Split::Test).into_iter().filter(|&i| has(i)).collect();
    let mut targets: Vec<usize> = pool.iter().copied().filter(|&i| dataset.samples[i].label == target_class).collect();
    if targets.len() < n {
        return Err(Error::CaseConstruction(format!(
            "class {target_class} has {} test images containing '{concept}', need {n}",
            targets.len()
        )));
    }
    targets.shuffle(&mut rng);
    let mut chosen: Vec<usize> = targets[..n].to_vec();
    chosen.sort_unstable();

    let mut rest: Vec<usize> = pool.iter().copied().filter(|i| !chosen.contains(i)).collect();
    rest.shuffle(&mut rng);
    let n_val = validation_count(rest.len());
    let mut val_idx = rest[..n_val].to_vec();
    let mut test_idx = rest[n_val..].to_vec();
    val_idx.sort_unstable();
    test_idx.sort_unstable();

    let item = |i: usize, variant: usize| -> Result<EvalItem> {
        let s = &dataset.samples[i];
        Ok(EvalItem {
            source: i,
            label: s.label,
            variant,
            clean: s.image.clone(),
            transformed: transform_concept(&s.image, &s.masks[concept], bank.variant(style, variant)?)?,
        })
    };
    let exemplars = chosen
        .iter()
        .map(|&i| {
            let s = &dataset.samples[i];
            let v = bank.variant(style, train_variant)?;
            Ok(Exemplar {
                x: s.image.clone(),
                x_prime: transform_concept(&s.image, &s.masks[concept], v)?,
                mask: s.masks[concept].clone(),
                label: s.label,
                concept: concept.to_string(),
                style: style.to_string(),
                variant: train_variant,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let validation = val_idx.iter().map(|&i| item(i, train_variant)).collect::<Result<Vec<_>>>()?;
    let test = test_idx.iter().map(|&i| item(i, train_variant)).collect::<Result<Vec<_>>>()?;
    let held_variants: Vec<usize> = (0..VARIANTS_PER_FAMILY).filter(|&v| v != train_variant).collect();
    let held_out = test_idx
        .iter()
        .flat_map(|&i| held_variants.iter().map(move |&v| (i, v)))
        .map(|(i, v)| item(i, v))
        .collect::<Result<Vec<_>>>()?;
    let train = dataset.indices(Split::Train);
    let ref_idx: Vec<usize> = match reference {
        ReferenceSet::Concept => train.into_iter().filter(|&i| has(i)).collect(),
        ReferenceSet::Training { count } if count >= train.len() => train,
        ReferenceSet::Training { count } => (0..count).map(|k| train[k * train.len() / count]).collect(),
    };
    if ref_idx.is_empty() {
        return Err(Error::CaseConstruction("covariance reference set is empty".into()));
    }
    let covariance_ref = ref_idx.iter().map(|&i| dataset.samples[i].image.clone()).collect();

    let case = BenchmarkCase {
        concept: concept.to_string(),
        style: style.to_string(),
        train_variant,
        target_class,
        exemplars,
        validation,
        test,
        held_out,
        covariance_ref,
    };
    case.validate()?;
    Ok(case)
}
