//! CutOut, CutMix and ClassMix on `H×W×3` float images with `H×W` labels.
//!
//! Mixing is expressed as a boolean mask (`true` = take from the first
//! source) so that the trainer can mix confidence maps with the same mask.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::partition::present_classes;
use crate::rng::RngStream;
use crate::IGNORE_LABEL;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augmentation {
    #[default]
    None,
    Cutout,
    Cutmix,
    Classmix,
}

/// Axis-aligned rectangle `[y0, y0+h) × [x0, x0+w)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Patch {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Patch {
    pub fn full(h: usize, w: usize) -> Self {
        Patch { y0: 0, x0: 0, h, w }
    }

    pub fn empty() -> Self {
        Patch { y0: 0, x0: 0, h: 0, w: 0 }
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y0 + self.h && x >= self.x0 && x < self.x0 + self.w
    }
}

/// Patch covering a uniform fraction in `[0.25, 0.5]` of the image area, with
/// the image's aspect ratio, at a uniform position.
pub fn random_patch(h: usize, w: usize, rng: &mut RngStream) -> Patch {
    let area = rng.gen_range(0.25..=0.5_f64);
    let side = area.sqrt();
    let ph = ((h as f64 * side).round() as usize).clamp(1, h);
    let pw = ((w as f64 * side).round() as usize).clamp(1, w);
    let y0 = rng.gen_range(0..=h - ph);
    let x0 = rng.gen_range(0..=w - pw);
    Patch { y0, x0, h: ph, w: pw }
}

pub fn patch_mask(h: usize, w: usize, patch: Patch) -> Array2<bool> {
    Array2::from_shape_fn((h, w), |(y, x)| patch.contains(y, x))
}

/// Per pixel: `a` where `mask`, else `b`.
pub fn apply_mask2<T: Copy>(mask: &Array2<bool>, a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Array2<T> {
    Array2::from_shape_fn(mask.dim(), |(y, x)| if mask[[y, x]] { a[[y, x]] } else { b[[y, x]] })
}

/// Channel-wise [`apply_mask2`] for `H×W×C` arrays.
pub fn apply_mask3<T: Copy>(mask: &Array2<bool>, a: ArrayView3<'_, T>, b: ArrayView3<'_, T>) -> Array3<T> {
    Array3::from_shape_fn(a.dim(), |(y, x, c)| if mask[[y, x]] { a[[y, x, c]] } else { b[[y, x, c]] })
}

/// Fills `patch` with the image's mean colour and marks it unlabelled.
pub fn cutout_with(image: ArrayView3<'_, f64>, label: ArrayView2<'_, u8>, patch: Patch) -> (Array3<f64>, Array2<u8>) {
    let mean = image
        .mean_axis(Axis(0))
        .and_then(|m| m.mean_axis(Axis(0)))
        .expect("non-empty image");
    let mut img = image.to_owned();
    let mut lab = label.to_owned();
    for ((y, x), v) in lab.indexed_iter_mut() {
        if patch.contains(y, x) {
            *v = IGNORE_LABEL;
            for c in 0..img.dim().2 {
                img[[y, x, c]] = mean[c];
            }
        }
    }
    (img, lab)
}

pub fn cutout(image: ArrayView3<'_, f64>, label: ArrayView2<'_, u8>, rng: &mut RngStream) -> (Array3<f64>, Array2<u8>) {
    let (h, w) = label.dim();
    cutout_with(image, label, random_patch(h, w, rng))
}

/// Pastes `patch` of A onto B.
pub fn cutmix_with(
    image_a: ArrayView3<'_, f64>,
    label_a: ArrayView2<'_, u8>,
    image_b: ArrayView3<'_, f64>,
    label_b: ArrayView2<'_, u8>,
    patch: Patch,
) -> (Array3<f64>, Array2<u8>) {
    let (h, w) = label_a.dim();
    let mask = patch_mask(h, w, patch);
    (apply_mask3(&mask, image_a, image_b), apply_mask2(&mask, label_a, label_b))
}

pub fn cutmix(
    image_a: ArrayView3<'_, f64>,
    label_a: ArrayView2<'_, u8>,
    image_b: ArrayView3<'_, f64>,
    label_b: ArrayView2<'_, u8>,
    rng: &mut RngStream,
) -> (Array3<f64>, Array2<u8>) {
    let (h, w) = label_a.dim();
    cutmix_with(image_a, label_a, image_b, label_b, random_patch(h, w, rng))
}

/// Mask of the pixels of `⌈k/2⌉` classes drawn uniformly from the `k`
/// classes present in `label_a`. All-false if `label_a` has no class.
pub fn classmix_mask(label_a: ArrayView2<'_, u8>, rng: &mut RngStream) -> Array2<bool> {
    let classes = present_classes(label_a);
    let k = classes.len();
    let mut chosen = [false; 256];
    for i in index::sample(rng, k, k.div_ceil(2)) {
        chosen[classes[i]] = true;
    }
    label_a.mapv(|v| v != IGNORE_LABEL && chosen[usize::from(v)])
}

/// Pastes the pixels of half of A's classes onto B.
pub fn classmix(
    image_a: ArrayView3<'_, f64>,
    label_a: ArrayView2<'_, u8>,
    image_b: ArrayView3<'_, f64>,
    label_b: ArrayView2<'_, u8>,
    rng: &mut RngStream,
) -> (Array3<f64>, Array2<u8>) {
    let mask = classmix_mask(label_a, rng);
    (apply_mask3(&mask, image_a, image_b), apply_mask2(&mask, label_a, label_b))
}
