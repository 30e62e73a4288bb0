use ndarray::{Array2, Array3, ArrayView3};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::{self, RngStream};
use crate::{Error, Result};

/// Shape drawn for each non-background class, in class order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Circle,
    Triangle,
    Diamond,
    Ring,
    Cross,
    Ellipse,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 7] = [
        ShapeKind::Rectangle,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Diamond,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Ellipse,
    ];

    pub fn for_class(class: usize) -> Option<ShapeKind> {
        class.checked_sub(1).and_then(|i| Self::ALL.get(i).copied())
    }

    /// Whether `(dy, dx)` relative to the centre lies inside a shape of
    /// half-extent `r`.
    fn contains(self, dy: f64, dx: f64, r: f64) -> bool {
        match self {
            ShapeKind::Rectangle => dy.abs() <= r * 0.75 && dx.abs() <= r,
            ShapeKind::Circle => dy * dy + dx * dx <= r * r,
            ShapeKind::Triangle => {
                // apex up, base at dy = r
                dy <= r && dy >= -r && dx.abs() <= (dy + r) * 0.5
            }
            ShapeKind::Diamond => dy.abs() + dx.abs() <= r,
            ShapeKind::Ring => {
                let d2 = dy * dy + dx * dx;
                d2 <= r * r && d2 >= (0.5 * r) * (0.5 * r)
            }
            ShapeKind::Cross => {
                (dy.abs() <= r * 0.3 && dx.abs() <= r) || (dx.abs() <= r * 0.3 && dy.abs() <= r)
            }
            ShapeKind::Ellipse => (dy / (0.55 * r)).powi(2) + (dx / r).powi(2) <= 1.0,
        }
    }
}

const PALETTE: [[f64; 3]; 7] = [
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.85],
    [0.85, 0.80, 0.20],
    [0.75, 0.25, 0.80],
    [0.20, 0.80, 0.80],
    [0.95, 0.55, 0.15],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub height: usize,
    pub width: usize,
    /// Background plus `num_classes − 1` shape classes.
    pub num_classes: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub train_count: usize,
    pub val_count: usize,
    /// Per-channel uniform jitter of each shape's colour around its class colour.
    pub color_jitter: f64,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_std: f64,
    /// Per-image colour cast: each channel is scaled by `exp(u)`,
    /// `u ~ U[−a, a]`.
    pub illumination: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            height: 64,
            width: 64,
            num_classes: 4,
            min_shapes: 2,
            max_shapes: 5,
            train_count: 100,
            val_count: 40,
            color_jitter: 0.2,
            noise_std: 0.05,
            illumination: 0.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 3 || self.num_classes > ShapeKind::ALL.len() + 1 {
            return Err(Error::config(
                "num_classes",
                format!("must lie in 3..={}", ShapeKind::ALL.len() + 1),
            ));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("height", "images must be at least 8×8"));
        }
        if self.min_shapes > self.max_shapes {
            return Err(Error::config("min_shapes", "must not exceed max_shapes"));
        }
        if !(self.color_jitter >= 0.0) {
            return Err(Error::config("color_jitter", "must be non-negative"));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::config("noise_std", "must be non-negative"));
        }
        if !(self.illumination >= 0.0) {
            return Err(Error::config("illumination", "must be non-negative"));
        }
        Ok(())
    }
}

/// One generated image with its full label map.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `H×W×3` 8-bit RGB.
    pub image: Array3<u8>,
    /// `H×W` class indices; never the ignore value.
    pub label: Array2<u8>,
    /// Class of every shape drawn, in drawing order.
    pub drawn: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Converts an 8-bit image to `[0, 1]` floats.
pub fn image_to_f64(image: ArrayView3<'_, u8>) -> Array3<f64> {
    image.mapv(|v| f64::from(v) / 255.0)
}

/// Generates train and validation splits. Each image draws its randomness
/// from its own stream, keyed by a base seed taken from `rng`.
pub fn generate_synthetic(spec: &SynthSpec, rng: &mut RngStream) -> Result<SynthDataset> {
    spec.validate()?;
    let base = rng.next_u64();
    let total = spec.train_count + spec.val_count;
    let mut samples: Vec<Sample> = (0..total)
        .into_par_iter()
        .map(|i| {
            let mut image_rng = rng::stream(base, i as u64);
            generate_one(spec, &mut image_rng)
        })
        .collect();
    let val = samples.split_off(spec.train_count);
    Ok(SynthDataset {
        spec: spec.clone(),
        train: samples,
        val,
    })
}

fn generate_one(spec: &SynthSpec, rng: &mut RngStream) -> Sample {
    let (h, w) = (spec.height, spec.width);
    let grey = rng.gen_range(0.15..0.85);
    let background = [0; 3].map(|_| (grey + rng.gen_range(-0.08..0.08_f64)).clamp(0.0, 1.0));
    let mut canvas = Array3::<f64>::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                canvas[[y, x, ch]] = background[ch];
            }
        }
    }
    let mut label = Array2::<u8>::zeros((h, w));
    let count = rng.gen_range(spec.min_shapes..=spec.max_shapes);
    let mut drawn = Vec::with_capacity(count);
    let short = h.min(w) as f64;
    for _ in 0..count {
        let class = rng.gen_range(1..spec.num_classes);
        let kind = ShapeKind::for_class(class).expect("validated class count");
        let r = rng.gen_range(short / 9.0..short / 4.5);
        let cy = rng.gen_range(r * 0.5..h as f64 - r * 0.5);
        let cx = rng.gen_range(r * 0.5..w as f64 - r * 0.5);
        let jitter = spec.color_jitter;
        let color = PALETTE[class - 1].map(|v| {
            let j = if jitter > 0.0 { rng.gen_range(-jitter..jitter) } else { 0.0 };
            (v + j).clamp(0.0, 1.0)
        });
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if kind.contains(dy, dx, r) {
                    label[[y, x]] = class as u8;
                    for ch in 0..3 {
                        canvas[[y, x, ch]] = color[ch];
                    }
                }
            }
        }
        drawn.push(class as u8);
    }
    if spec.illumination > 0.0 {
        let a = spec.illumination;
        let gain = [0; 3].map(|_| rng.gen_range(-a..a).exp());
        for ((_, _, ch), v) in canvas.indexed_iter_mut() {
            *v *= gain[ch];
        }
    }
    let noise = Normal::new(0.0, spec.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let image = canvas.mapv(|v| {
        let n = if spec.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
        ((v + n).clamp(0.0, 1.0) * 255.0).round() as u8
    });
    Sample { image, label, drawn }
}
