//! Procedural benchmark: labeled scenes with exact concept masks,
//! concept-level texture transformations, and editing benchmark cases.

mod case;
mod dataset;
mod manifest;
mod render;
mod styles;

pub use case::{build_benchmark_case, build_benchmark_case_with, BenchmarkCase, EvalItem, Exemplar, ReferenceSet};
pub use dataset::{generate_dataset, Dataset, DatasetConfig, Sample, Split};
pub use manifest::{load_case, load_dataset, save_case, save_dataset, CASE_MANIFEST, DATASET_MANIFEST};
pub use render::{render_scene, SceneLayout, BACKGROUND_CONCEPTS, PART_CONCEPTS};
pub use styles::{gen_texture_bank, transform_concept, StyleBank, StyleVariant, STYLE_FAMILIES, VARIANTS_PER_FAMILY};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SIDE: usize = 32;
pub const CHANNELS: usize = 3;
pub const PIXELS: usize = SIDE * SIDE;

/// A concept is "present" in an image when its mask covers at least this many pixels.
pub const MIN_CONCEPT_PIXELS: usize = 16;

/// 8-bit RGB image, channel-major (`[3, 32, 32]`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RgbImage {
    data: Vec<u8>,
}

impl RgbImage {
    pub fn from_bytes(data: Vec<u8>) -> Result<Self> {
        if data.len() != CHANNELS * PIXELS {
            return Err(Error::dim(format!("image needs {} bytes, got {}", CHANNELS * PIXELS, data.len())));
        }
        Ok(Self { data })
    }

    pub(crate) fn blank() -> Self {
        Self { data: vec![0; CHANNELS * PIXELS] }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, pixel: usize) -> u8 {
        self.data[c * PIXELS + pixel]
    }

    pub(crate) fn set(&mut self, pixel: usize, rgb: [u8; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.data[c * PIXELS + pixel] = v;
        }
    }

    /// Network input: bytes scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_parts(vec![CHANNELS, SIDE, SIDE], self.data.iter().map(|&b| f64::from(b) / 255.0).collect())
    }
}

/// Binary 32x32 concept mask.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty() -> Self {
        Self { bits: vec![false; PIXELS] }
    }

    pub fn full() -> Self {
        Self { bits: vec![true; PIXELS] }
    }

    pub fn from_fn(f: impl Fn(usize, usize) -> bool) -> Self {
        Self { bits: (0..PIXELS).map(|p| f(p / SIDE, p % SIDE)).collect() }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() != PIXELS || bytes.iter().any(|&b| b > 1) {
            return Err(Error::dim("mask must be 1024 bytes of 0/1"));
        }
        Ok(Self { bits: bytes.iter().map(|&b| b == 1).collect() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits.iter().map(|&b| u8::from(b)).collect()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * SIDE + col]
    }

    pub fn contains(&self, pixel: usize) -> bool {
        self.bits[pixel]
    }

    pub(crate) fn set(&mut self, pixel: usize, on: bool) {
        self.bits[pixel] = on;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn side(&self) -> usize {
        SIDE
    }
}
