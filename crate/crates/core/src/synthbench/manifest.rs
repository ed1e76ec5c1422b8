//! On-disk layout for datasets and benchmark cases: raw image bytes
//! (`.rgb`, 3x32x32 u8) and masks (`.mask`, 1024 bytes of 0/1) next to a
//! TOML manifest that records a SHA-256 per file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BenchmarkCase, Dataset, DatasetConfig, EvalItem, Exemplar, Mask, RgbImage, Sample, Split};
use crate::error::{Error, Result};
use crate::seeds::sha256_hex;

pub const DATASET_MANIFEST: &str = "manifest.toml";
pub const CASE_MANIFEST: &str = "case.toml";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FileRef {
    file: String,
    sha256: String,
}

fn write_blob(root: &Path, rel: &str, bytes: &[u8]) -> Result<FileRef> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(FileRef { file: rel.to_string(), sha256: sha256_hex(bytes) })
}

fn read_blob(root: &Path, r: &FileRef) -> Result<Vec<u8>> {
    let path = root.join(&r.file);
    let bytes = match fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path)),
        Err(e) => return Err(Error::io(path, e)),
    };
    let actual = sha256_hex(&bytes);
    if actual != r.sha256 {
        return Err(Error::HashMismatch { path, expected: r.sha256.clone(), actual });
    }
    Ok(bytes)
}

fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingFile(path.to_path_buf())),
        Err(e) => return Err(Error::io(path, e)),
    };
    toml::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))
}

fn write_manifest<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Serialize, Deserialize)]
struct SampleEntry {
    label: usize,
    split: Split,
    image: FileRef,
    masks: BTreeMap<String, FileRef>,
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    fingerprint: String,
    config: DatasetConfig,
    samples: Vec<SampleEntry>,
}

/// Writes `dir/manifest.toml`, `dir/images/*.rgb` and `dir/masks/*.mask`.
pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let samples = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let image = write_blob(dir, &format!("images/{i:05}.rgb"), s.image.bytes())?;
            let masks = s
                .masks
                .iter()
                .map(|(c, m)| Ok((c.clone(), write_blob(dir, &format!("masks/{i:05}_{c}.mask"), &m.to_bytes())?)))
                .collect::<Result<_>>()?;
            Ok(SampleEntry { label: s.label, split: s.split, image, masks })
        })
        .collect::<Result<Vec<_>>>()?;
    let m = DatasetManifest { fingerprint: dataset.fingerprint(), config: dataset.config.clone(), samples };
    write_manifest(&dir.join(DATASET_MANIFEST), &m)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m: DatasetManifest = read_manifest(&dir.join(DATASET_MANIFEST))?;
    m.config.validate()?;
    let samples = m
        .samples
        .iter()
        .map(|e| {
            if e.label >= m.config.num_classes() {
                return Err(Error::LabelOutOfRange { label: e.label, classes: m.config.num_classes() });
            }
            let masks = e
                .masks
                .iter()
                .map(|(c, r)| Ok((c.clone(), Mask::from_bytes(&read_blob(dir, r)?)?)))
                .collect::<Result<_>>()?;
            Ok(Sample {
                image: RgbImage::from_bytes(read_blob(dir, &e.image)?)?,
                label: e.label,
                split: e.split,
                masks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ds = Dataset { config: m.config, samples };
    if ds.fingerprint() != m.fingerprint {
        return Err(Error::HashMismatch {
            path: dir.join(DATASET_MANIFEST),
            expected: m.fingerprint,
            actual: ds.fingerprint(),
        });
    }
    Ok(ds)
}

#[derive(Serialize, Deserialize)]
struct ExemplarEntry {
    label: usize,
    variant: usize,
    x: FileRef,
    x_prime: FileRef,
    mask: FileRef,
}

#[derive(Serialize, Deserialize)]
struct ItemEntry {
    source: usize,
    label: usize,
    variant: usize,
    clean: FileRef,
    transformed: FileRef,
}

#[derive(Serialize, Deserialize)]
struct CaseManifest {
    concept: String,
    style: String,
    train_variant: usize,
    target_class: usize,
    exemplars: Vec<ExemplarEntry>,
    validation: Vec<ItemEntry>,
    test: Vec<ItemEntry>,
    held_out: Option<Vec<ItemEntry>>,
    covariance_ref: Vec<FileRef>,
}

fn save_items(dir: &Path, group: &str, items: &[EvalItem]) -> Result<Vec<ItemEntry>> {
    items
        .iter()
        .enumerate()
        .map(|(k, it)| {
            Ok(ItemEntry {
                source: it.source,
                label: it.label,
                variant: it.variant,
                clean: write_blob(dir, &format!("{group}/{k:05}_clean.rgb"), it.clean.bytes())?,
                transformed: write_blob(dir, &format!("{group}/{k:05}_v{}.rgb", it.variant), it.transformed.bytes())?,
            })
        })
        .collect()
}

fn load_items(dir: &Path, entries: &[ItemEntry]) -> Result<Vec<EvalItem>> {
    entries
        .iter()
        .map(|e| {
            Ok(EvalItem {
                source: e.source,
                label: e.label,
                variant: e.variant,
                clean: RgbImage::from_bytes(read_blob(dir, &e.clean)?)?,
                transformed: RgbImage::from_bytes(read_blob(dir, &e.transformed)?)?,
            })
        })
        .collect()
}

/// Writes `dir/case.toml` with all case images beside it.
pub fn save_case(case: &BenchmarkCase, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let exemplars = case
        .exemplars
        .iter()
        .enumerate()
        .map(|(k, e)| {
            Ok(ExemplarEntry {
                label: e.label,
                variant: e.variant,
                x: write_blob(dir, &format!("exemplars/{k:03}_x.rgb"), e.x.bytes())?,
                x_prime: write_blob(dir, &format!("exemplars/{k:03}_xprime.rgb"), e.x_prime.bytes())?,
                mask: write_blob(dir, &format!("exemplars/{k:03}.mask"), &e.mask.to_bytes())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let covariance_ref = case
        .covariance_ref
        .iter()
        .enumerate()
        .map(|(k, img)| write_blob(dir, &format!("covariance/{k:05}.rgb"), img.bytes()))
        .collect::<Result<Vec<_>>>()?;
    let m = CaseManifest {
        concept: case.concept.clone(),
        style: case.style.clone(),
        train_variant: case.train_variant,
        target_class: case.target_class,
        exemplars,
        validation: save_items(dir, "validation", &case.validation)?,
        test: save_items(dir, "test", &case.test)?,
        held_out: Some(save_items(dir, "held_out", &case.held_out)?),
        covariance_ref,
    };
    write_manifest(&dir.join(CASE_MANIFEST), &m)
}

pub fn load_case(dir: &Path) -> Result<BenchmarkCase> {
    let path: PathBuf = dir.join(CASE_MANIFEST);
    let m: CaseManifest = read_manifest(&path)?;
    let held =
        m.held_out.as_ref().ok_or_else(|| Error::Manifest(format!("{}: missing held_out section", path.display())))?;
    let exemplars = m
        .exemplars
        .iter()
        .map(|e| {
            Ok(Exemplar {
                x: RgbImage::from_bytes(read_blob(dir, &e.x)?)?,
                x_prime: RgbImage::from_bytes(read_blob(dir, &e.x_prime)?)?,
                mask: Mask::from_bytes(&read_blob(dir, &e.mask)?)?,
                label: e.label,
                concept: m.concept.clone(),
                style: m.style.clone(),
                variant: e.variant,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let case = BenchmarkCase {
        concept: m.concept.clone(),
        style: m.style.clone(),
        train_variant: m.train_variant,
        target_class: m.target_class,
        exemplars,
        validation: load_items(dir, &m.validation)?,
        test: load_items(dir, &m.test)?,
        held_out: load_items(dir, held)?,
        covariance_ref: m
            .covariance_ref
            .iter()
            .map(|r| RgbImage::from_bytes(read_blob(dir, r)?))
            .collect::<Result<Vec<_>>>()?,
    };
    case.validate()?;
    Ok(case)
}
