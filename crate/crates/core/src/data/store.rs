//! Dataset directory layout.
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/train/<id>.png          8-bit RGB
//! <dir>/train/<id>_label.png    8-bit grey, class index per pixel, 255 = ignore
//! <dir>/val/...
//! <dir>/partial/<id>_label.png  sparse labels (partial-labels partition only)
//! ```

use std::fs;
use std::path::Path;

use image::{GrayImage, RgbImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use super::partition::{ClassReveal, PartitionSpec, PdflStep};
use super::synth::{Sample, SynthDataset, SynthSpec};
use crate::{Error, Result};

pub const MANIFEST_FORMAT: &str = "reco-lab-dataset";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    pub image: String,
    pub label: String,
    pub drawn: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionRecord {
    pub spec: PartitionSpec,
    pub seed: u64,
    /// Train ids with (full or partial) labels, in selection order.
    pub labelled: Vec<String>,
    pub unlabelled: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pdfl_audit: Option<Vec<PdflStep>>,
    /// Per train image: id, sparse label file and the reveal trail.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plfd: Option<Vec<PartialLabelEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartialLabelEntry {
    pub id: String,
    pub label: String,
    pub reveals: Vec<ClassReveal>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub spec: SynthSpec,
    pub num_classes: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<PartitionRecord>,
}

impl DatasetManifest {
    pub fn ids(&self, split: &str) -> Vec<String> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.id.clone())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct StoredDataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    /// Sparse train labels, aligned with `train`, when partitioned by pixels.
    pub partial_train: Option<Vec<Array2<u8>>>,
}

impl StoredDataset {
    pub fn train_index(&self, id: &str) -> Option<usize> {
        self.manifest
            .entries
            .iter()
            .filter(|e| e.split == "train")
            .position(|e| e.id == id)
    }
}

pub(crate) fn image_id(split: &str, i: usize) -> String {
    format!("{split}_{i:05}")
}

pub(crate) fn write_rgb(path: &Path, image: &Array3<u8>) -> Result<()> {
    let (h, w, _) = image.dim();
    let buf = RgbImage::from_raw(w as u32, h as u32, image.as_standard_layout().iter().copied().collect())
        .ok_or_else(|| Error::InvalidData("rgb buffer size".into()))?;
    buf.save(path)?;
    Ok(())
}

pub(crate) fn write_gray(path: &Path, label: &Array2<u8>) -> Result<()> {
    let (h, w) = label.dim();
    let buf = GrayImage::from_raw(w as u32, h as u32, label.as_standard_layout().iter().copied().collect())
        .ok_or_else(|| Error::InvalidData("label buffer size".into()))?;
    buf.save(path)?;
    Ok(())
}

fn read_rgb(path: &Path) -> Result<Array3<u8>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Array3::from_shape_vec((h as usize, w as usize, 3), img.into_raw())
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))
}

pub(crate) fn read_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Array2::from_shape_vec((h as usize, w as usize), img.into_raw())
        .map_err(|e| Error::InvalidData(format!("{}: {e}", path.display())))
}

/// Writes images, labels and `manifest.json` under `dir` (created if missing).
pub fn save_dataset(dir: &Path, dataset: &SynthDataset) -> Result<DatasetManifest> {
    let mut entries = Vec::new();
    for (split, samples) in [("train", &dataset.train), ("val", &dataset.val)] {
        fs::create_dir_all(dir.join(split))?;
        for (i, sample) in samples.iter().enumerate() {
            let id = image_id(split, i);
            let image = format!("{split}/{id}.png");
            let label = format!("{split}/{id}_label.png");
            write_rgb(&dir.join(&image), &sample.image)?;
            write_gray(&dir.join(&label), &sample.label)?;
            entries.push(ManifestEntry {
                id,
                split: split.to_string(),
                image,
                label,
                drawn: sample.drawn.clone(),
            });
        }
    }
    let manifest = DatasetManifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        spec: dataset.spec.clone(),
        num_classes: dataset.spec.num_classes,
        entries,
        partition: None,
    };
    write_manifest(dir, &manifest)?;
    Ok(manifest)
}

pub fn write_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_string_pretty(manifest)?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

/// Records a partition in the manifest and writes any sparse label maps.
pub fn save_partition(
    dir: &Path,
    manifest: &mut DatasetManifest,
    record: PartitionRecord,
    partial: Option<&[Array2<u8>]>,
) -> Result<()> {
    if let (Some(entries), Some(labels)) = (&record.plfd, partial) {
        fs::create_dir_all(dir.join("partial"))?;
        for (entry, label) in entries.iter().zip(labels) {
            write_gray(&dir.join(&entry.label), label)?;
        }
    }
    manifest.partition = Some(record);
    write_manifest(dir, manifest)
}

pub fn load_dataset(dir: &Path) -> Result<StoredDataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::InvalidData(format!(
            "unexpected manifest format `{}`",
            manifest.format
        )));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for entry in &manifest.entries {
        let sample = Sample {
            image: read_rgb(&dir.join(&entry.image))?,
            label: read_gray(&dir.join(&entry.label))?,
            drawn: entry.drawn.clone(),
        };
        if sample.label.iter().any(|&v| usize::from(v) >= manifest.num_classes && v != crate::IGNORE_LABEL) {
            return Err(Error::InvalidData(format!("{}: label out of range", entry.label)));
        }
        match entry.split.as_str() {
            "train" => train.push(sample),
            "val" => val.push(sample),
            other => return Err(Error::InvalidData(format!("unknown split `{other}`"))),
        }
    }
    let partial_train = match manifest.partition.as_ref().and_then(|p| p.plfd.as_ref()) {
        Some(entries) => {
            let mut labels = vec![None; train.len()];
            for entry in entries {
                let idx = manifest
                    .entries
                    .iter()
                    .filter(|e| e.split == "train")
                    .position(|e| e.id == entry.id)
                    .ok_or_else(|| Error::InvalidData(format!("unknown id {}", entry.id)))?;
                labels[idx] = Some(read_gray(&dir.join(&entry.label))?);
            }
            Some(
                labels
                    .into_iter()
                    .enumerate()
                    .map(|(i, l)| l.ok_or_else(|| Error::InvalidData(format!("missing sparse label for train image {i}"))))
                    .collect::<Result<Vec<_>>>()?,
            )
        }
        None => None,
    };
    Ok(StoredDataset {
        manifest,
        train,
        val,
        partial_train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::rng::stream;

    #[test]
    fn save_and_load_round_trip() {
        let spec = SynthSpec {
            height: 16,
            width: 20,
            train_count: 3,
            val_count: 2,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec, &mut stream(1, 1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(dir.path(), &ds).unwrap();
        assert_eq!(manifest.ids("train").len(), 3);
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.train, ds.train);
        assert_eq!(loaded.val, ds.val);
        assert!(loaded.partial_train.is_none());
    }
}
