use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::render::{render_scene, SceneLayout, BACKGROUND_CONCEPTS, PART_CONCEPTS};
use super::{Mask, RgbImage, MIN_CONCEPT_PIXELS};
use crate::error::{Error, Result};
use crate::seeds::derive_seed;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Generator parameters. Row `c` of `background_probs` is the categorical
/// distribution of background concepts for class `c`; `part_probs[c][p]` is
/// the independent probability that class `c` scenes carry part `p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub seed: u64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub backgrounds: Vec<String>,
    pub background_probs: Vec<Vec<f64>>,
    #[serde(default)]
    pub parts: Vec<String>,
    #[serde(default)]
    pub part_probs: Vec<Vec<f64>>,
    /// Per-pixel uniform noise amplitude, in 8-bit levels.
    #[serde(default = "default_noise")]
    pub noise: f64,
}

fn default_noise() -> f64 {
    8.0
}

impl DatasetConfig {
    pub fn num_classes(&self) -> usize {
        self.background_probs.len()
    }

    pub fn concepts(&self) -> Vec<String> {
        self.backgrounds.iter().chain(&self.parts).cloned().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes() == 0 {
            return bad("dataset.background_probs has no rows".into());
        }
        for b in &self.backgrounds {
            if !BACKGROUND_CONCEPTS.contains(&b.as_str()) {
                return bad(format!("dataset.backgrounds: unknown concept '{b}'"));
            }
        }
        for p in &self.parts {
            if !PART_CONCEPTS.contains(&p.as_str()) {
                return bad(format!("dataset.parts: unknown concept '{p}'"));
            }
        }
        for (c, row) in self.background_probs.iter().enumerate() {
            if row.len() != self.backgrounds.len() {
                return bad(format!("dataset.background_probs[{c}] needs {} entries", self.backgrounds.len()));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("dataset.background_probs[{c}] must be probabilities summing to 1"));
            }
        }
        if !self.parts.is_empty() && self.part_probs.len() != self.num_classes() {
            return bad("dataset.part_probs needs one row per class".into());
        }
        for (c, row) in self.part_probs.iter().enumerate() {
            if row.len() != self.parts.len() || row.iter().any(|p| !(0.0..=1.0).contains(p)) {
                return bad(format!("dataset.part_probs[{c}] must hold one probability per part"));
            }
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return bad("dataset: per-class counts must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub label: usize,
    pub split: Split,
    /// Masks of the concepts present (at least [`MIN_CONCEPT_PIXELS`] pixels).
    pub masks: BTreeMap<String, Mask>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    pub fn tensors(&self, idx: &[usize]) -> Vec<Tensor> {
        idx.par_iter().map(|&i| self.samples[i].image.to_tensor()).collect()
    }

    pub fn labels(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.samples[i].label).collect()
    }

    /// Content hash over labels, splits, images and masks, in sample order.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for s in &self.samples {
            h.update((s.label as u64).to_le_bytes());
            h.update(s.split.as_str().as_bytes());
            h.update(s.image.bytes());
            for (name, m) in &s.masks {
                h.update(name.as_bytes());
                h.update(m.to_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

fn draw_layout(cfg: &DatasetConfig, class: usize, rng: &mut ChaCha8Rng) -> SceneLayout {
    let u: f64 = rng.random();
    let row = &cfg.background_probs[class];
    let mut acc = 0.0;
    let mut bg = cfg.backgrounds.len() - 1;
    for (k, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            bg = k;
            break;
        }
    }
    let parts = cfg
        .parts
        .iter()
        .enumerate()
        .filter(|&(p, _)| rng.random::<f64>() < cfg.part_probs[class][p])
        .map(|(_, name)| name.clone())
        .collect();
    SceneLayout { background: cfg.backgrounds[bg].clone(), parts }
}

/// Renders the whole dataset: training images first (class-major), then
/// test images. Each scene's seed is derived from `(seed, split, class, k)`.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for (split, count) in [(Split::Train, cfg.train_per_class), (Split::Test, cfg.test_per_class)] {
        for class in 0..cfg.num_classes() {
            for k in 0..count {
                jobs.push((split, class, k));
            }
        }
    }
    let samples = jobs
        .par_iter()
        .map(|&(split, class, k)| {
            let s = derive_seed(cfg.seed, &["scene", split.as_str(), &class.to_string(), &k.to_string()]);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let layout = draw_layout(cfg, class, &mut rng);
            let scene = render_scene(class, &layout, derive_seed(s, &["render"]), cfg.noise)?;
            let masks = scene.masks.into_iter().filter(|(_, m)| m.count() >= MIN_CONCEPT_PIXELS).collect();
            Ok(Sample { image: scene.image, label: class, split, masks })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { config: cfg.clone(), samples })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn small_config(per_class: usize) -> DatasetConfig {
        let mut probs = vec![vec![0.0, 0.5, 0.5]; 8];
        probs[0] = vec![1.0, 0.0, 0.0];
        probs[1] = vec![0.9, 0.05, 0.05];
        DatasetConfig {
            seed: 3,
            train_per_class: per_class,
            test_per_class: per_class,
            backgrounds: vec!["grass".into(), "sand".into(), "water".into()],
            background_probs: probs,
            parts: vec!["wheel".into()],
            part_probs: vec![vec![0.3]; 8],
            noise: 8.0,
        }
    }

    #[test]
    fn degenerate_correlation_is_respected() {
        let ds = generate_dataset(&small_config(20)).unwrap();
        for s in ds.samples.iter().filter(|s| s.label == 0) {
            assert!(s.masks.contains_key("grass"));
        }
        for s in ds.samples.iter().filter(|s| s.label >= 2) {
            assert!(!s.masks.contains_key("grass"));
        }
    }

    #[test]
    fn presence_matches_configured_correlation() {
        let mut cfg = small_config(1100);
        cfg.background_probs = vec![vec![0.9, 0.05, 0.05]; 8];
        cfg.part_probs = vec![vec![0.0]; 8];
        cfg.part_probs[1] = vec![0.35];
        let ds = generate_dataset(&cfg).unwrap();
        let class1: Vec<&Sample> = ds.samples.iter().filter(|s| s.label == 1).collect();
        assert!(class1.len() >= 2000);
        let frac = |c: &str| class1.iter().filter(|s| s.masks.contains_key(c)).count() as f64 / class1.len() as f64;
        assert!((frac("grass") - 0.9).abs() < 0.02, "grass {}", frac("grass"));
        assert!((frac("wheel") - 0.35).abs() < 0.02, "wheel {}", frac("wheel"));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small_config(3)).unwrap();
        let b = generate_dataset(&small_config(3)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.indices(Split::Train).len(), 24);
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(2);
        c.background_probs[3] = vec![0.5, 0.4, 0.0];
        assert!(c.validate().is_err());
        let mut c = small_config(2);
        c.backgrounds[0] = "lava".into();
        assert!(c.validate().is_err());
    }
}
