//! Dataset types and on-disk layout.
//!
//! The unsupervised contract is enforced twice over: target training
//! images carry no label field at all, and every target label that exists
//! (for evaluation) is wrapped in a [`SealedLabel`] that counts how often
//! it was opened, so a test can prove training never touched one.
//!
//! On disk a dataset is a directory of binary PGMs plus plain-text
//! manifests (`path,domain,has_label` per line). Each image `foo.pgm` has
//! its FOV mask at `foo_mask.pgm`; labels live at `foo_label.pgm` next to
//! the image or sealed away in an `eval_only/` sibling directory.

pub mod patches;
pub mod pgm;
pub mod preprocess;
pub mod synth;

use std::cell::Cell;
use std::fmt;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Domain;

/// A ground-truth label with a tamper-evident read counter.
pub struct SealedLabel {
    data: Tensor,
    reads: Cell<u64>,
}

impl SealedLabel {
    pub fn new(data: Tensor) -> Self {
        Self { data, reads: Cell::new(0) }
    }

    /// Opens the label for evaluation; every call is counted.
    pub fn unseal(&self) -> &Tensor {
        self.reads.set(self.reads.get() + 1);
        &self.data
    }

    pub fn read_count(&self) -> u64 {
        self.reads.get()
    }
}

impl fmt::Debug for SealedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SealedLabel(reads={})", self.reads.get())
    }
}

/// A labeled source-domain image.
#[derive(Debug, Clone)]
pub struct SourceImage {
    pub id: String,
    /// `[H, W]` intensities in `[0, 255]`.
    pub pixels: Tensor,
    /// `[H, W]` binary field-of-view mask.
    pub fov: Tensor,
    /// `[H, W]` binary vessel map.
    pub label: Tensor,
}

/// A target-domain image. Training never sees a label here; evaluation
/// images carry one sealed.
#[derive(Debug)]
pub struct TargetImage {
    pub id: String,
    pub pixels: Tensor,
    pub fov: Tensor,
    pub sealed_label: Option<SealedLabel>,
}

/// The three splits of an adaptation task.
#[derive(Debug, Default)]
pub struct Dataset {
    pub source: Vec<SourceImage>,
    pub target_train: Vec<TargetImage>,
    pub target_test: Vec<TargetImage>,
}

impl Dataset {
    /// Total reads of any sealed target label, across all splits.
    pub fn sealed_label_reads(&self) -> u64 {
        self.target_train
            .iter()
            .chain(&self.target_test)
            .filter_map(|t| t.sealed_label.as_ref())
            .map(|l| l.read_count())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub domain: Domain,
    pub has_label: bool,
}

/// Parses a `path,domain,has_label` manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Manifest(format!(
                "{}:{}: expected `path,domain,has_label`",
                path.display(),
                lineno + 1
            )));
        }
        let domain: Domain = parts[1].trim().parse()?;
        let has_label = match parts[2].trim() {
            "0" | "false" => false,
            "1" | "true" => true,
            other => {
                return Err(Error::Manifest(format!(
                    "{}:{}: bad has_label `{other}`",
                    path.display(),
                    lineno + 1
                )))
            }
        };
        entries.push(ManifestEntry { path: PathBuf::from(parts[0].trim()), domain, has_label });
    }
    if entries.is_empty() {
        return Err(Error::Manifest(format!("{}: no entries", path.display())));
    }
    Ok(entries)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!(
            "{},{},{}\n",
            e.path.display(),
            e.domain,
            u8::from(e.has_label)
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn mask_path(img: &Path) -> PathBuf {
    with_suffix(img, "_mask")
}

fn with_suffix(img: &Path, suffix: &str) -> PathBuf {
    let stem = img.file_stem().unwrap_or_default().to_string_lossy();
    img.with_file_name(format!("{stem}{suffix}.pgm"))
}

/// Label lookup: next to the image, else in `eval_only/` beside it.
fn find_label(root: &Path, img_rel: &Path) -> Result<PathBuf> {
    let sibling = root.join(with_suffix(img_rel, "_label"));
    if sibling.exists() {
        return Ok(sibling);
    }
    let dir = img_rel.parent().unwrap_or_else(|| Path::new(""));
    let name = with_suffix(Path::new(img_rel.file_name().unwrap_or_default()), "_label");
    let sealed = root.join(dir).join("eval_only").join(name);
    if sealed.exists() {
        return Ok(sealed);
    }
    Err(Error::Manifest(format!(
        "no label found for {} (looked next to it and in eval_only/)",
        img_rel.display()
    )))
}

fn to_binary(t: &Tensor) -> Tensor {
    t.map(|v| f64::from(v > 127.0))
}

/// Loads the standard dataset layout rooted at `dir`: `source_train.txt`,
/// `target_train.txt`, `target_test.txt`. Contract checks happen here:
/// source entries must be labeled, target-train entries must not be.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let source = load_source_split(dir, &dir.join("source_train.txt"))?;
    let target_train = load_target_split(dir, &dir.join("target_train.txt"), false)?;
    let target_test = load_target_split(dir, &dir.join("target_test.txt"), true)?;
    Ok(Dataset { source, target_train, target_test })
}

pub fn load_source_split(root: &Path, manifest: &Path) -> Result<Vec<SourceImage>> {
    let entries = read_manifest(manifest)?;
    let mut images = Vec::with_capacity(entries.len());
    for e in &entries {
        if e.domain != Domain::Source {
            return Err(Error::Manifest(format!(
                "{}: source split contains a {} entry",
                manifest.display(),
                e.domain
            )));
        }
        if !e.has_label {
            return Err(Error::Manifest(format!(
                "{}: source entry {} lacks a label",
                manifest.display(),
                e.path.display()
            )));
        }
        let pixels = pgm::read_pgm(&root.join(&e.path))?;
        let fov = to_binary(&pgm::read_pgm(&root.join(mask_path(&e.path)))?);
        let label = to_binary(&pgm::read_pgm(&find_label(root, &e.path)?)?);
        let id = e.path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        images.push(SourceImage { id, pixels, fov, label });
    }
    Ok(images)
}

pub fn load_target_split(
    root: &Path,
    manifest: &Path,
    labels_expected: bool,
) -> Result<Vec<TargetImage>> {
    let entries = read_manifest(manifest)?;
    let mut images = Vec::with_capacity(entries.len());
    for e in &entries {
        if e.domain != Domain::Target {
            return Err(Error::Manifest(format!(
                "{}: target split contains a {} entry",
                manifest.display(),
                e.domain
            )));
        }
        if e.has_label != labels_expected {
            return Err(Error::Manifest(format!(
                "{}: entry {} has_label={} but this split requires {}",
                manifest.display(),
                e.path.display(),
                u8::from(e.has_label),
                u8::from(labels_expected)
            )));
        }
        let pixels = pgm::read_pgm(&root.join(&e.path))?;
        let fov = to_binary(&pgm::read_pgm(&root.join(mask_path(&e.path)))?);
        let sealed_label = if e.has_label {
            let label = to_binary(&pgm::read_pgm(&find_label(root, &e.path)?)?);
            Some(SealedLabel::new(label))
        } else {
            None
        };
        let id = e.path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        images.push(TargetImage { id, pixels, fov, sealed_label });
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sealed_labels_count_reads() {
        let l = SealedLabel::new(Tensor::zeros(&[2, 2]));
        assert_eq!(l.read_count(), 0);
        l.unseal();
        l.unseal();
        assert_eq!(l.read_count(), 2);
    }

    #[test]
    fn manifest_roundtrip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        let entries = vec![
            ManifestEntry { path: "source/a.pgm".into(), domain: Domain::Source, has_label: true },
            ManifestEntry { path: "target/b.pgm".into(), domain: Domain::Target, has_label: false },
        ];
        write_manifest(&path, &entries).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), entries);

        std::fs::write(&path, "a.pgm,source\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(Error::Manifest(_))));
        std::fs::write(&path, "a.pgm,moon,1\n").unwrap();
        assert!(read_manifest(&path).is_err());
    }
}
