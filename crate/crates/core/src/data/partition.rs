//! The two semi-supervised benchmark partitions.
//!
//! * Partial dataset, full labels: a few fully labelled images picked greedily
//!   so that every class is covered.
//! * Partial labels, full dataset: every image keeps a few labelled pixels
//!   per class, grown from a random seed by 5×5 dilation.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::{Error, Result, IGNORE_LABEL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelBudget {
    OnePixel,
    /// Fraction of each class's pixels to reveal, in `(0, 1]`.
    Fraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum PartitionSpec {
    PartialDatasetFullLabels {
        min_images_per_class: usize,
        min_distinct_classes: usize,
        /// Tops the greedy selection up to this many images, drawn uniformly.
        #[serde(default)]
        labelled_total: Option<usize>,
    },
    PartialLabelsFullDataset {
        label_budget: LabelBudget,
    },
}

impl PartitionSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            PartitionSpec::PartialDatasetFullLabels {
                min_images_per_class,
                labelled_total,
                ..
            } => {
                if *min_images_per_class == 0 {
                    return Err(Error::config("min_images_per_class", "must be at least 1"));
                }
                if *labelled_total == Some(0) {
                    return Err(Error::config("labelled_total", "must be at least 1"));
                }
            }
            PartitionSpec::PartialLabelsFullDataset { label_budget } => {
                if let LabelBudget::Fraction(f) = label_budget {
                    if !(*f > 0.0 && *f <= 1.0) {
                        return Err(Error::config("label_budget", "fraction must lie in (0, 1]"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Sorted distinct classes in a label map, ignoring the ignore value.
pub fn present_classes(label: ArrayView2<'_, u8>) -> Vec<usize> {
    let mut seen = [false; 256];
    for &v in label.iter() {
        seen[usize::from(v)] = true;
    }
    seen[usize::from(IGNORE_LABEL)] = false;
    (0..256).filter(|&c| seen[c]).collect()
}

/// One greedy selection, recorded for auditing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdflStep {
    pub image: usize,
    /// Labelled-image count per class before this image was added.
    pub coverage_before: Vec<usize>,
    /// Classes sharing the minimum coverage before this step.
    pub least_sampled: Vec<usize>,
    pub distinct_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdflPartition {
    /// In selection order.
    pub labelled: Vec<usize>,
    pub unlabelled: Vec<usize>,
    pub audit: Vec<PdflStep>,
}

/// Greedy labelled-subset selection.
///
/// Until every class appears in `min_images_per_class` selected images, pick
/// uniformly among unselected images that (i) contain at least
/// `min_distinct_classes` classes and (ii) contain a class with the currently
/// smallest coverage.
pub fn partition_pdfl(
    labels: &[ArrayView2<'_, u8>],
    num_classes: usize,
    min_images_per_class: usize,
    min_distinct_classes: usize,
    rng: &mut RngStream,
) -> Result<PdflPartition> {
    if labels.is_empty() {
        return Err(Error::Unsatisfiable("dataset is empty".into()));
    }
    let classes: Vec<Vec<usize>> = labels.iter().map(|l| present_classes(*l)).collect();
    if let Some(bad) = classes.iter().flatten().find(|&&c| c >= num_classes) {
        return Err(Error::InvalidData(format!("label {bad} outside 0..{num_classes}")));
    }
    let mut coverage = vec![0usize; num_classes];
    let mut selected = vec![false; labels.len()];
    let mut labelled = Vec::new();
    let mut audit = Vec::new();

    while coverage.iter().any(|&n| n < min_images_per_class) {
        let min_cov = *coverage.iter().min().expect("num_classes > 0");
        let least: Vec<usize> = (0..num_classes).filter(|&c| coverage[c] == min_cov).collect();
        let eligible: Vec<usize> = (0..labels.len())
            .filter(|&i| {
                !selected[i]
                    && classes[i].len() >= min_distinct_classes
                    && classes[i].iter().any(|c| least.contains(c))
            })
            .collect();
        let Some(&pick) = eligible.choose(rng) else {
            return Err(Error::Unsatisfiable(format!(
                "no unselected image with ≥{min_distinct_classes} classes contains any of {least:?}"
            )));
        };
        audit.push(PdflStep {
            image: pick,
            coverage_before: coverage.clone(),
            least_sampled: least,
            distinct_classes: classes[pick].len(),
        });
        for &c in &classes[pick] {
            coverage[c] += 1;
        }
        selected[pick] = true;
        labelled.push(pick);
    }
    let unlabelled = (0..labels.len()).filter(|&i| !selected[i]).collect();
    Ok(PdflPartition {
        labelled,
        unlabelled,
        audit,
    })
}

/// Moves uniformly drawn unlabelled images into the labelled set until it
/// holds `total` images. Fails if the greedy pass already exceeded `total`
/// or there are too few images.
pub fn top_up_labelled(partition: &mut PdflPartition, total: usize, rng: &mut RngStream) -> Result<()> {
    let have = partition.labelled.len();
    if have > total {
        return Err(Error::Unsatisfiable(format!(
            "coverage needs {have} labelled images, more than the requested {total}"
        )));
    }
    let need = total - have;
    if need > partition.unlabelled.len() {
        return Err(Error::Unsatisfiable(format!("only {} images available", have + partition.unlabelled.len())));
    }
    let picks: Vec<usize> = partition.unlabelled.choose_multiple(rng, need).copied().collect();
    partition.unlabelled.retain(|i| !picks.contains(i));
    partition.labelled.extend(picks);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RevealSeed {
    /// Growth step at which the seed was planted; 0 for the initial seed.
    pub step: usize,
    pub y: usize,
    pub x: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReveal {
    pub class: usize,
    pub seeds: Vec<RevealSeed>,
    /// Number of growth steps performed.
    pub steps: usize,
    pub revealed: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialLabels {
    pub label: Array2<u8>,
    pub reveals: Vec<ClassReveal>,
}

/// Binary dilation with a 5×5 square structuring element.
pub fn dilate5x5(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    let mut rows = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let lo = x.saturating_sub(2);
            let hi = (x + 2).min(w - 1);
            rows[[y, x]] = (lo..=hi).any(|xx| mask[[y, xx]]);
        }
    }
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        let lo = y.saturating_sub(2);
        let hi = (y + 2).min(h - 1);
        for x in 0..w {
            out[[y, x]] = (lo..=hi).any(|yy| rows[[yy, x]]);
        }
    }
    out
}

/// Sparse labels for one image.
///
/// Each present class gets one uniformly drawn seed pixel. Under a fractional
/// budget the revealed region is dilated (5×5) and clipped to the class's true
/// region until the revealed fraction first reaches the budget. If the region
/// stops growing (the class occupies several disconnected blobs), the step
/// plants a fresh seed among the unrevealed class pixels instead.
pub fn partition_plfd(label: ArrayView2<'_, u8>, budget: LabelBudget, rng: &mut RngStream) -> PartialLabels {
    let (h, w) = label.dim();
    let mut out = Array2::from_elem((h, w), IGNORE_LABEL);
    let mut reveals = Vec::new();
    for class in present_classes(label) {
        let region = label.mapv(|v| usize::from(v) == class);
        let members: Vec<(usize, usize)> = region
            .indexed_iter()
            .filter(|(_, &m)| m)
            .map(|((y, x), _)| (y, x))
            .collect();
        let total = members.len();
        let (sy, sx) = members[rng.gen_range(0..total)];
        let mut seeds = vec![RevealSeed { step: 0, y: sy, x: sx }];
        let mut revealed = Array2::from_elem((h, w), false);
        revealed[[sy, sx]] = true;
        let mut count = 1usize;
        let mut steps = 0usize;
        if let LabelBudget::Fraction(f) = budget {
            while (count as f64) / (total as f64) < f {
                steps += 1;
                let mut grown = dilate5x5(&revealed);
                ndarray::Zip::from(&mut grown).and(&region).for_each(|g, &r| *g &= r);
                let grown_count = grown.iter().filter(|&&v| v).count();
                if grown_count > count {
                    revealed = grown;
                    count = grown_count;
                } else {
                    let hidden: Vec<(usize, usize)> =
                        members.iter().copied().filter(|&(y, x)| !revealed[[y, x]]).collect();
                    let (y, x) = hidden[rng.gen_range(0..hidden.len())];
                    revealed[[y, x]] = true;
                    count += 1;
                    seeds.push(RevealSeed { step: steps, y, x });
                }
            }
        }
        for ((y, x), &r) in revealed.indexed_iter() {
            if r {
                out[[y, x]] = class as u8;
            }
        }
        reveals.push(ClassReveal {
            class,
            seeds,
            steps,
            revealed: count,
            total,
        });
    }
    PartialLabels { label: out, reveals }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn all_classes_everywhere_needs_one_image() {
        let img = Array2::from_shape_vec((2, 2), vec![0u8, 1, 2, 2]).unwrap();
        let labels = vec![img.view(); 5];
        let part = partition_pdfl(&labels, 3, 1, 3, &mut stream(0, 2)).unwrap();
        assert_eq!(part.labelled.len(), 1);
        assert_eq!(part.unlabelled.len(), 4);
    }

    #[test]
    fn infeasible_distinct_threshold() {
        let img = Array2::from_shape_vec((2, 2), vec![0u8, 1, 1, 1]).unwrap();
        let labels = vec![img.view(); 3];
        assert!(matches!(
            partition_pdfl(&labels, 2, 1, 3, &mut stream(0, 2)),
            Err(Error::Unsatisfiable(_))
        ));
    }

    #[test]
    fn missing_class_is_unsatisfiable() {
        let img = Array2::from_elem((2, 2), 0u8);
        let labels = vec![img.view(); 3];
        assert!(partition_pdfl(&labels, 2, 1, 1, &mut stream(0, 2)).is_err());
    }

    #[test]
    fn one_pixel_per_class() {
        let label = Array2::from_shape_fn((10, 10), |(y, x)| if x < 4 { 0u8 } else if y < 5 { 1 } else { 3 });
        let part = partition_plfd(label.view(), LabelBudget::OnePixel, &mut stream(1, 2));
        for class in [0usize, 1, 3] {
            let n = part.label.iter().filter(|&&v| usize::from(v) == class).count();
            assert_eq!(n, 1);
        }
        assert_eq!(part.label.iter().filter(|&&v| v != IGNORE_LABEL).count(), 3);
        for ((y, x), &v) in part.label.indexed_iter() {
            if v != IGNORE_LABEL {
                assert_eq!(v, label[[y, x]]);
            }
        }
    }

    #[test]
    fn single_dilation_reveals_at_most_25() {
        let label = Array2::from_elem((20, 20), 1u8);
        // f chosen so that one step always suffices: 25/400 > 0.05 > 1/400
        let part = partition_plfd(label.view(), LabelBudget::Fraction(0.02), &mut stream(4, 2));
        let r = &part.reveals[0];
        assert_eq!(r.steps, 1);
        assert!(r.revealed <= 25);
        assert!(r.revealed >= 9);
    }

    #[test]
    fn disconnected_class_reseeds() {
        let label = Array2::from_shape_fn((12, 12), |(_, x)| if x < 2 || x > 9 { 1u8 } else { 0 });
        let part = partition_plfd(label.view(), LabelBudget::Fraction(1.0), &mut stream(5, 2));
        let r = part.reveals.iter().find(|r| r.class == 1).unwrap();
        assert_eq!(r.revealed, r.total);
        assert!(r.seeds.len() >= 2);
    }

    #[test]
    fn dilation_square() {
        let mut m = Array2::from_elem((7, 7), false);
        m[[3, 3]] = true;
        let d = dilate5x5(&m);
        assert_eq!(d.iter().filter(|&&v| v).count(), 25);
        assert!(d[[1, 1]] && d[[5, 5]] && !d[[0, 3]]);
    }
}
