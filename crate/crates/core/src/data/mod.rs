//! Synthetic segmentation data, benchmark partitions and mixing augmentations.

mod augment;
mod partition;
pub(crate) mod store;
mod synth;

pub use augment::{
    apply_mask2, apply_mask3, classmix, classmix_mask, cutmix, cutmix_with, cutout, cutout_with,
    patch_mask, random_patch, Augmentation, Patch,
};
pub use partition::{
    dilate5x5, partition_pdfl, partition_plfd, present_classes, top_up_labelled, ClassReveal, LabelBudget,
    PartialLabels, PartitionSpec, PdflPartition, PdflStep, RevealSeed,
};
pub use store::{
    load_dataset, save_dataset, save_partition, write_manifest, DatasetManifest, ManifestEntry,
    PartialLabelEntry, PartitionRecord, StoredDataset,
};
pub use synth::{generate_synthetic, image_to_f64, Sample, ShapeKind, SynthDataset, SynthSpec};
