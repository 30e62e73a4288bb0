//! A small fully-convolutional segmenter with a hand-written backward pass.
//!
//! ```text
//! image ─ conv3×3(3→16) ─ relu ─ conv3×3(16→32) ─ relu ─┬─ conv1×1(32→C)  logits
//!                                                       └─ conv1×1(32→m)  ─ l2-normalise  R
//! ```
//!
//! All convolutions are stride 1 with zero padding, so logits and the dense
//! representation share the input resolution. Tensors are NHWC. Parameters
//! live in one flat buffer so that the optimiser, the EMA teacher and
//! checkpoints treat them uniformly.

use ndarray::{s, Array1, Array2, Array3, Array4, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::{DenseRepresentation, MIN_NORM};
use crate::rng::RngStream;
use crate::{Error, Result};

pub const IN_CHANNELS: usize = 3;
const KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub num_classes: usize,
    pub embed_dim: usize,
    #[serde(default = "default_hidden1")]
    pub hidden1: usize,
    #[serde(default = "default_hidden2")]
    pub hidden2: usize,
}

fn default_hidden1() -> usize {
    16
}

fn default_hidden2() -> usize {
    32
}

impl ModelShape {
    pub fn new(num_classes: usize, embed_dim: usize) -> Self {
        ModelShape {
            num_classes,
            embed_dim,
            hidden1: default_hidden1(),
            hidden2: default_hidden2(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "need at least 2 classes"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        if self.hidden1 == 0 || self.hidden2 == 0 {
            return Err(Error::config("hidden1", "hidden widths must be positive"));
        }
        Ok(())
    }

    /// `(rows, cols)` of each group; biases are `1×n`.
    pub fn group_dims(&self, group: ParamGroup) -> (usize, usize) {
        let k = KERNEL * KERNEL;
        match group {
            ParamGroup::Conv1Weight => (k * IN_CHANNELS, self.hidden1),
            ParamGroup::Conv1Bias => (1, self.hidden1),
            ParamGroup::Conv2Weight => (k * self.hidden1, self.hidden2),
            ParamGroup::Conv2Bias => (1, self.hidden2),
            ParamGroup::ClassifierWeight => (self.hidden2, self.num_classes),
            ParamGroup::ClassifierBias => (1, self.num_classes),
            ParamGroup::RepresentationWeight => (self.hidden2, self.embed_dim),
            ParamGroup::RepresentationBias => (1, self.embed_dim),
        }
    }

    fn offset(&self, group: ParamGroup) -> usize {
        ParamGroup::ALL
            .iter()
            .take_while(|&&g| g != group)
            .map(|&g| {
                let (r, c) = self.group_dims(g);
                r * c
            })
            .sum()
    }

    pub fn num_params(&self) -> usize {
        ParamGroup::ALL
            .iter()
            .map(|&g| {
                let (r, c) = self.group_dims(g);
                r * c
            })
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Conv1Weight,
    Conv1Bias,
    Conv2Weight,
    Conv2Bias,
    ClassifierWeight,
    ClassifierBias,
    RepresentationWeight,
    RepresentationBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::Conv1Weight,
        ParamGroup::Conv1Bias,
        ParamGroup::Conv2Weight,
        ParamGroup::Conv2Bias,
        ParamGroup::ClassifierWeight,
        ParamGroup::ClassifierBias,
        ParamGroup::RepresentationWeight,
        ParamGroup::RepresentationBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Conv1Weight => "conv1.weight",
            ParamGroup::Conv1Bias => "conv1.bias",
            ParamGroup::Conv2Weight => "conv2.weight",
            ParamGroup::Conv2Bias => "conv2.bias",
            ParamGroup::ClassifierWeight => "classifier.weight",
            ParamGroup::ClassifierBias => "classifier.bias",
            ParamGroup::RepresentationWeight => "representation.weight",
            ParamGroup::RepresentationBias => "representation.bias",
        }
    }

    fn fan_in(self, shape: &ModelShape) -> usize {
        match self {
            ParamGroup::Conv1Weight | ParamGroup::Conv1Bias => KERNEL * KERNEL * IN_CHANNELS,
            ParamGroup::Conv2Weight | ParamGroup::Conv2Bias => KERNEL * KERNEL * shape.hidden1,
            _ => shape.hidden2,
        }
    }

    fn is_bias(self) -> bool {
        matches!(
            self,
            ParamGroup::Conv1Bias
                | ParamGroup::Conv2Bias
                | ParamGroup::ClassifierBias
                | ParamGroup::RepresentationBias
        )
    }
}

/// Network parameters (also used as the gradient container).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelParams {
    pub shape: ModelShape,
    pub data: Vec<f64>,
}

pub type Gradients = ToyModelParams;

impl ToyModelParams {
    pub fn zeros(shape: ModelShape) -> Self {
        ToyModelParams {
            shape,
            data: vec![0.0; shape.num_params()],
        }
    }

    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn init(shape: ModelShape, rng: &mut RngStream) -> Self {
        let mut params = Self::zeros(shape);
        for group in ParamGroup::ALL {
            if group.is_bias() {
                continue;
            }
            let bound = 1.0 / (group.fan_in(&shape) as f64).sqrt();
            for v in params.group_slice_mut(group) {
                *v = rng.gen_range(-bound..bound);
            }
        }
        params
    }

    pub fn from_data(shape: ModelShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters for a model needing {}",
                data.len(),
                shape.num_params()
            )));
        }
        Ok(ToyModelParams { shape, data })
    }

    pub fn group_slice(&self, group: ParamGroup) -> &[f64] {
        let (r, c) = self.shape.group_dims(group);
        let start = self.shape.offset(group);
        &self.data[start..start + r * c]
    }

    pub fn group_slice_mut(&mut self, group: ParamGroup) -> &mut [f64] {
        let (r, c) = self.shape.group_dims(group);
        let start = self.shape.offset(group);
        &mut self.data[start..start + r * c]
    }

    pub fn matrix(&self, group: ParamGroup) -> ArrayView2<'_, f64> {
        let dims = self.shape.group_dims(group);
        ArrayView2::from_shape(dims, self.group_slice(group)).expect("group dims")
    }

    pub fn vector(&self, group: ParamGroup) -> ArrayView1<'_, f64> {
        ArrayView1::from(self.group_slice(group))
    }

    fn add_matrix(&mut self, group: ParamGroup, delta: &Array2<f64>) {
        for (p, d) in self.group_slice_mut(group).iter_mut().zip(delta.iter()) {
            *p += d;
        }
    }

    fn add_vector(&mut self, group: ParamGroup, delta: &Array1<f64>) {
        for (p, d) in self.group_slice_mut(group).iter_mut().zip(delta.iter()) {
            *p += d;
        }
    }

    /// Group owning flat index `i`.
    pub fn group_of(&self, i: usize) -> ParamGroup {
        let mut start = 0;
        for group in ParamGroup::ALL {
            let (r, c) = self.shape.group_dims(group);
            if i < start + r * c {
                return group;
            }
            start += r * c;
        }
        panic!("parameter index {i} out of range")
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape || self.data.len() != other.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "parameter shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Computes the representation head and keeps activations for backward.
    Train,
    /// Logits only.
    Eval,
}

/// Activations of one image kept for the backward pass.
#[derive(Debug, Clone)]
struct ImageCache {
    patches1: Array2<f64>,
    hidden1: Array2<f64>,
    patches2: Array2<f64>,
    features: Array2<f64>,
    rep_norms: Array1<f64>,
    rep: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    height: usize,
    width: usize,
    images: Vec<ImageCache>,
}

impl ForwardCache {
    /// Encoder output `B×H×W×hidden2`.
    pub fn features(&self) -> Array4<f64> {
        let c = self.images.first().map_or(0, |im| im.features.ncols());
        let mut out = Array4::zeros((self.images.len(), self.height, self.width, c));
        for (b, im) in self.images.iter().enumerate() {
            out.slice_mut(s![b, .., .., ..])
                .assign(&im.features.view().into_shape_with_order((self.height, self.width, c)).unwrap());
        }
        out
    }

    /// Which hidden units are active and which representation pixels are
    /// clamped to zero, for every image. Two passes with equal patterns lie
    /// on the same smooth piece of the network.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.images
            .iter()
            .flat_map(|im| {
                im.hidden1
                    .iter()
                    .chain(im.features.iter())
                    .map(|&v| v > 0.0)
                    .chain(im.rep_norms.iter().map(|&n| n < MIN_NORM))
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `B×H×W×C`, unnormalised.
    pub logits: Array4<f64>,
    /// Unit-norm `B×H×W×m` (zero where the raw head output vanishes);
    /// `None` in eval mode.
    pub representation: Option<DenseRepresentation>,
    /// `None` in eval mode.
    pub cache: Option<ForwardCache>,
}

/// Gathers 3×3 neighbourhoods (zero padded) into rows ordered `(ky, kx, c)`.
fn im2col(input: ArrayView3<'_, f64>) -> Array2<f64> {
    let (h, w, c) = input.dim();
    let mut cols = Array2::<f64>::zeros((h * w, KERNEL * KERNEL * c));
    let input = input.as_standard_layout();
    let src = input.as_slice().expect("standard layout");
    let dst = cols.as_slice_mut().expect("fresh array");
    let row_len = KERNEL * KERNEL * c;
    for y in 0..h {
        for x in 0..w {
            let row = &mut dst[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for ky in 0..KERNEL {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let from = (sy as usize * w + sx as usize) * c;
                    let to = (ky * KERNEL + kx) * c;
                    row[to..to + c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input grid.
fn col2im(cols: ArrayView2<'_, f64>, h: usize, w: usize, c: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((h * w, c));
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let dst = out.as_slice_mut().expect("fresh array");
    let row_len = KERNEL * KERNEL * c;
    for y in 0..h {
        for x in 0..w {
            let row = &src[(y * w + x) * row_len..(y * w + x + 1) * row_len];
            for ky in 0..KERNEL {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..KERNEL {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let to = (sy as usize * w + sx as usize) * c;
                    let from = (ky * KERNEL + kx) * c;
                    for (d, s) in dst[to..to + c].iter_mut().zip(&row[from..from + c]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

fn affine(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Array2<f64> {
    let mut out = x.dot(&w);
    out += &b;
    out
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

/// Runs the network on a `B×H×W×3` batch.
pub fn forward(params: &ToyModelParams, images: ArrayView4<'_, f64>, mode: ForwardMode) -> Result<ForwardOutput> {
    let (batch, h, w, channels) = images.dim();
    if channels != IN_CHANNELS {
        return Err(Error::ShapeMismatch(format!(
            "expected {IN_CHANNELS} input channels, got {channels}"
        )));
    }
    if h == 0 || w == 0 {
        return Err(Error::ShapeMismatch("empty image".into()));
    }
    let shape = params.shape;
    let n_cls = shape.num_classes;
    let m = shape.embed_dim;
    let mut logits = Array4::<f64>::zeros((batch, h, w, n_cls));
    let mut rep_out = match mode {
        ForwardMode::Train => Some(Array4::<f64>::zeros((batch, h, w, m))),
        ForwardMode::Eval => None,
    };
    let mut caches = Vec::new();

    for b in 0..batch {
        let image = images.slice(s![b, .., .., ..]);
        let patches1 = im2col(image);
        let mut hidden1 = affine(
            patches1.view(),
            params.matrix(ParamGroup::Conv1Weight),
            params.vector(ParamGroup::Conv1Bias),
        );
        relu_inplace(&mut hidden1);
        let hidden1_grid = hidden1.view().into_shape_with_order((h, w, shape.hidden1)).unwrap();
        let patches2 = im2col(hidden1_grid);
        let mut features = affine(
            patches2.view(),
            params.matrix(ParamGroup::Conv2Weight),
            params.vector(ParamGroup::Conv2Bias),
        );
        relu_inplace(&mut features);
        let cls = affine(
            features.view(),
            params.matrix(ParamGroup::ClassifierWeight),
            params.vector(ParamGroup::ClassifierBias),
        );
        logits
            .slice_mut(s![b, .., .., ..])
            .assign(&cls.into_shape_with_order((h, w, n_cls)).unwrap());

        if let Some(rep_out) = rep_out.as_mut() {
            let mut rep = affine(
                features.view(),
                params.matrix(ParamGroup::RepresentationWeight),
                params.vector(ParamGroup::RepresentationBias),
            );
            let mut norms = Array1::<f64>::zeros(h * w);
            for (mut row, norm) in rep.axis_iter_mut(Axis(0)).zip(norms.iter_mut()) {
                let n = row.dot(&row).sqrt();
                *norm = n;
                if n < MIN_NORM {
                    // fully dead pixel: maps to the zero vector
                    row.fill(0.0);
                } else {
                    row.mapv_inplace(|v| v / n);
                }
            }
            rep_out
                .slice_mut(s![b, .., .., ..])
                .assign(&rep.view().into_shape_with_order((h, w, m)).unwrap());
            caches.push(ImageCache {
                patches1,
                hidden1,
                patches2,
                features,
                rep_norms: norms,
                rep,
            });
        }
    }

    Ok(ForwardOutput {
        logits,
        representation: rep_out.map(DenseRepresentation::from_normalized),
        cache: match mode {
            ForwardMode::Train => Some(ForwardCache {
                height: h,
                width: w,
                images: caches,
            }),
            ForwardMode::Eval => None,
        },
    })
}

/// Backpropagates gradients of a scalar loss with respect to the logits and
/// (optionally) the normalised representation.
///
/// Images listed in `skip` are assumed to carry zero upstream gradient and are
/// not visited.
pub fn backward(
    params: &ToyModelParams,
    cache: &ForwardCache,
    grad_logits: ArrayView4<'_, f64>,
    grad_rep: Option<ArrayView4<'_, f64>>,
    skip: &[bool],
) -> Result<Gradients> {
    let shape = params.shape;
    let (h, w) = (cache.height, cache.width);
    let hw = h * w;
    let batch = cache.images.len();
    if grad_logits.dim() != (batch, h, w, shape.num_classes) {
        return Err(Error::ShapeMismatch(format!(
            "logit gradient {:?} for batch {batch}×{h}×{w}×{}",
            grad_logits.dim(),
            shape.num_classes
        )));
    }
    if let Some(g) = &grad_rep {
        if g.dim() != (batch, h, w, shape.embed_dim) {
            return Err(Error::ShapeMismatch(format!(
                "representation gradient {:?}",
                g.dim()
            )));
        }
    }
    let mut grads = ToyModelParams::zeros(shape);
    let w_cls = params.matrix(ParamGroup::ClassifierWeight);
    let w_rep = params.matrix(ParamGroup::RepresentationWeight);
    let w2 = params.matrix(ParamGroup::Conv2Weight);

    for (b, im) in cache.images.iter().enumerate() {
        if skip.get(b).copied().unwrap_or(false) {
            continue;
        }
        let d_logits = grad_logits
            .slice(s![b, .., .., ..])
            .to_owned()
            .into_shape_with_order((hw, shape.num_classes))
            .unwrap();
        grads.add_matrix(ParamGroup::ClassifierWeight, &im.features.t().dot(&d_logits));
        grads.add_vector(ParamGroup::ClassifierBias, &d_logits.sum_axis(Axis(0)));
        let mut d_features = d_logits.dot(&w_cls.t());

        if let Some(grad_rep) = &grad_rep {
            let d_rep = grad_rep
                .slice(s![b, .., .., ..])
                .to_owned()
                .into_shape_with_order((hw, shape.embed_dim))
                .unwrap();
            // through r = u/‖u‖:  du = (dr − r (r·dr)) / ‖u‖
            let mut d_raw = d_rep;
            for ((mut row, r), &norm) in d_raw
                .axis_iter_mut(Axis(0))
                .zip(im.rep.axis_iter(Axis(0)))
                .zip(im.rep_norms.iter())
            {
                if norm < MIN_NORM {
                    row.fill(0.0);
                    continue;
                }
                let proj = row.dot(&r);
                row.scaled_add(-proj, &r);
                row.mapv_inplace(|v| v / norm);
            }
            grads.add_matrix(ParamGroup::RepresentationWeight, &im.features.t().dot(&d_raw));
            grads.add_vector(ParamGroup::RepresentationBias, &d_raw.sum_axis(Axis(0)));
            d_features += &d_raw.dot(&w_rep.t());
        }

        ndarray::Zip::from(&mut d_features)
            .and(&im.features)
            .for_each(|d, &f| {
                if f <= 0.0 {
                    *d = 0.0;
                }
            });
        grads.add_matrix(ParamGroup::Conv2Weight, &im.patches2.t().dot(&d_features));
        grads.add_vector(ParamGroup::Conv2Bias, &d_features.sum_axis(Axis(0)));

        let d_patches2 = d_features.dot(&w2.t());
        let mut d_hidden1 = col2im(d_patches2.view(), h, w, shape.hidden1);
        ndarray::Zip::from(&mut d_hidden1)
            .and(&im.hidden1)
            .for_each(|d, &a| {
                if a <= 0.0 {
                    *d = 0.0;
                }
            });
        grads.add_matrix(ParamGroup::Conv1Weight, &im.patches1.t().dot(&d_hidden1));
        grads.add_vector(ParamGroup::Conv1Bias, &d_hidden1.sum_axis(Axis(0)));
    }
    Ok(grads)
}

/// Per-pixel softmax over the class axis.
pub fn softmax(logits: ArrayView4<'_, f64>) -> Array4<f64> {
    let mut probs = logits.to_owned();
    for mut lane in probs.lanes_mut(Axis(3)) {
        let max = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        lane.mapv_inplace(|v| (v - max).exp());
        let total = lane.sum();
        lane.mapv_inplace(|v| v / total);
    }
    probs
}

/// Argmax label (lowest index on ties) and its softmax probability per pixel.
pub fn confidence_and_pseudo(logits: ArrayView4<'_, f64>) -> (Array3<u8>, Array3<f64>) {
    let (b, h, w, _) = logits.dim();
    let probs = softmax(logits);
    let mut labels = Array3::<u8>::zeros((b, h, w));
    let mut conf = Array3::<f64>::zeros((b, h, w));
    for (((lane, label), c), _) in probs
        .lanes(Axis(3))
        .into_iter()
        .zip(labels.iter_mut())
        .zip(conf.iter_mut())
        .zip(0..)
    {
        let mut best = 0;
        for (k, &p) in lane.iter().enumerate() {
            if p > lane[best] {
                best = k;
            }
        }
        *label = best as u8;
        *c = lane[best];
    }
    (labels, conf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub power: f64,
    pub total_iters: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            base_lr: 2.5e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            power: 0.9,
            total_iters: 40_000,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::config("base_lr", "must be positive"));
        }
        if !(self.power > 0.0) {
            return Err(Error::config("power", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum", "must lie in [0, 1)"));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay", "must be non-negative"));
        }
        if self.total_iters == 0 {
            return Err(Error::config("total_iters", "must be positive"));
        }
        Ok(())
    }

    /// Polynomially annealed learning rate at `iter`.
    pub fn lr(&self, iter: usize) -> f64 {
        let progress = (iter as f64 / self.total_iters as f64).min(1.0);
        self.base_lr * (1.0 - progress).powf(self.power)
    }
}

/// Momentum SGD with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sgd {
    pub config: OptimConfig,
    pub velocity: ToyModelParams,
}

impl Sgd {
    pub fn new(config: OptimConfig, shape: ModelShape) -> Self {
        Sgd {
            config,
            velocity: ToyModelParams::zeros(shape),
        }
    }

    /// Applies one update at iteration `iter` and returns the learning rate used.
    pub fn step(&mut self, params: &mut ToyModelParams, grads: &Gradients, iter: usize) -> Result<f64> {
        params.check_same_shape(grads)?;
        params.check_same_shape(&self.velocity)?;
        let lr = self.config.lr(iter);
        let mu = self.config.momentum;
        let wd = self.config.weight_decay;
        for ((p, &g), v) in params
            .data
            .iter_mut()
            .zip(&grads.data)
            .zip(self.velocity.data.iter_mut())
        {
            let d = g + wd * *p;
            *v = mu * *v + d;
            *p -= lr * *v;
        }
        Ok(lr)
    }
}

/// Exponential moving average of the student parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherState {
    pub params: ToyModelParams,
    pub decay: f64,
}

impl TeacherState {
    pub fn new(params: ToyModelParams, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::config("ema_decay", "must lie in [0, 1]"));
        }
        Ok(TeacherState { params, decay })
    }

    /// `θ′ ← λθ′ + (1−λ)θ`.
    pub fn ema_update(&mut self, student: &ToyModelParams) -> Result<()> {
        self.params.check_same_shape(student)?;
        let keep = self.decay;
        let take = 1.0 - self.decay;
        for (t, &s) in self.params.data.iter_mut().zip(&student.data) {
            *t = keep * *t + take * s;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array4;

    fn small_shape() -> ModelShape {
        ModelShape {
            num_classes: 3,
            embed_dim: 4,
            hidden1: 4,
            hidden2: 5,
        }
    }

    fn random_images(rng: &mut RngStream, b: usize, h: usize, w: usize) -> Array4<f64> {
        Array4::from_shape_fn((b, h, w, 3), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let shape = ModelShape::new(4, 8);
        let mut params = ToyModelParams::zeros(shape);
        params
            .group_slice_mut(ParamGroup::ClassifierBias)
            .copy_from_slice(&[0.5, -1.0, 2.0, 0.0]);
        params.group_slice_mut(ParamGroup::RepresentationBias)[0] = 1.0;
        let mut rng = stream(0, 0);
        let images = random_images(&mut rng, 2, 5, 6);
        let out = forward(&params, images.view(), ForwardMode::Train).unwrap();
        for lane in out.logits.lanes(Axis(3)) {
            assert_eq!(lane.to_vec(), vec![0.5, -1.0, 2.0, 0.0]);
        }
    }

    #[test]
    fn representation_is_unit_norm_and_eval_matches_train() {
        let mut rng = stream(1, 0);
        let params = ToyModelParams::init(ModelShape::new(4, 8), &mut rng);
        let images = random_images(&mut rng, 2, 7, 5);
        let train = forward(&params, images.view(), ForwardMode::Train).unwrap();
        for row in train.representation.as_ref().unwrap().pixels().rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        let eval = forward(&params, images.view(), ForwardMode::Eval).unwrap();
        assert!(eval.representation.is_none());
        assert_eq!(eval.logits, train.logits);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let params = ToyModelParams::zeros(small_shape());
        let images = Array4::<f64>::zeros((1, 3, 3, 2));
        assert!(matches!(
            forward(&params, images.view(), ForwardMode::Eval),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = stream(2, 0);
        let x = Array3::from_shape_fn((4, 5, 3), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((20, 27), |_| rng.gen_range(-1.0..1.0));
        let lhs = (&im2col(x.view()) * &y).sum();
        let back = col2im(y.view(), 4, 5, 3);
        let rhs = (&x.into_shape_with_order((20, 3)).unwrap() * &back).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    /// Scalar loss `Σ a·logits + Σ b·R` for fixed random `a`, `b`.
    fn probe_loss(params: &ToyModelParams, images: &Array4<f64>, a: &Array4<f64>, b: &Array4<f64>) -> f64 {
        let out = forward(params, images.view(), ForwardMode::Train).unwrap();
        (&out.logits * a).sum() + (out.representation.unwrap().tensor() * b).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = stream(3, 0);
        let shape = small_shape();
        let mut params = ToyModelParams::init(shape, &mut rng);
        for v in params.data.iter_mut() {
            *v += rng.gen_range(-0.05..0.05);
        }
        let images = random_images(&mut rng, 2, 5, 4);
        let a = Array4::from_shape_fn((2, 5, 4, 3), |_| rng.gen_range(-1.0..1.0));
        let b = Array4::from_shape_fn((2, 5, 4, 4), |_| rng.gen_range(-1.0..1.0));
        let out = forward(&params, images.view(), ForwardMode::Train).unwrap();
        let grads = backward(&params, out.cache.as_ref().unwrap(), a.view(), Some(b.view()), &[]).unwrap();
        let h = 1e-5;
        for i in 0..params.data.len() {
            let mut plus = params.clone();
            plus.data[i] += h;
            let mut minus = params.clone();
            minus.data[i] -= h;
            let fd = (probe_loss(&plus, &images, &a, &b) - probe_loss(&minus, &images, &a, &b)) / (2.0 * h);
            let an = grads.data[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(err < 1e-4, "param {i} ({:?}): fd {fd} vs analytic {an}", params.group_of(i));
        }
    }

    #[test]
    fn confidence_tie_and_saturation() {
        let logits = Array4::from_shape_vec((1, 1, 2, 3), vec![0.0, 0.0, 0.0, 10.0, 0.0, 0.0]).unwrap();
        let (labels, conf) = confidence_and_pseudo(logits.view());
        assert_eq!(labels[[0, 0, 0]], 0);
        assert!((conf[[0, 0, 0]] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(labels[[0, 0, 1]], 0);
        assert!(conf[[0, 0, 1]] > 0.9999);
    }

    #[test]
    fn confidence_matches_loop_oracle() {
        let mut rng = stream(4, 0);
        let logits = Array4::from_shape_fn((2, 3, 3, 5), |_| rng.gen_range(-3.0..3.0));
        let (labels, conf) = confidence_and_pseudo(logits.view());
        for b in 0..2 {
            for y in 0..3 {
                for x in 0..3 {
                    let mut best = 0;
                    for k in 1..5 {
                        if logits[[b, y, x, k]] > logits[[b, y, x, best]] {
                            best = k;
                        }
                    }
                    let z: f64 = (0..5).map(|k| logits[[b, y, x, k]].exp()).sum();
                    assert_eq!(labels[[b, y, x]] as usize, best);
                    assert!((conf[[b, y, x]] - logits[[b, y, x, best]].exp() / z).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn poly_schedule_values() {
        let cfg = OptimConfig {
            total_iters: 1000,
            ..Default::default()
        };
        assert_eq!(cfg.lr(0), 2.5e-3);
        assert!((cfg.lr(500) - 2.5e-3 * 0.5f64.powf(0.9)).abs() < 1e-18);
        assert!((cfg.lr(500) - 1.3397e-3).abs() < 1e-7);
        assert!(cfg.lr(999) < 1.5e-5);
        assert_eq!(cfg.lr(1000), 0.0);
    }

    #[test]
    fn sgd_zero_grad_zero_decay_is_identity() {
        let mut rng = stream(5, 0);
        let shape = small_shape();
        let mut params = ToyModelParams::init(shape, &mut rng);
        let before = params.clone();
        let cfg = OptimConfig {
            weight_decay: 0.0,
            total_iters: 10,
            ..Default::default()
        };
        let mut sgd = Sgd::new(cfg, shape);
        for it in 0..5 {
            sgd.step(&mut params, &ToyModelParams::zeros(shape), it).unwrap();
        }
        assert_eq!(params, before);
    }

    #[test]
    fn sgd_momentum_matches_hand_computation() {
        let shape = small_shape();
        let mut params = ToyModelParams::zeros(shape);
        params.data[0] = 1.0;
        let mut grads = ToyModelParams::zeros(shape);
        grads.data[0] = 0.5;
        let cfg = OptimConfig {
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.01,
            power: 1.0,
            total_iters: 10,
        };
        let mut sgd = Sgd::new(cfg, shape);
        sgd.step(&mut params, &grads, 0).unwrap();
        // v = 0.5 + 0.01·1 = 0.51; p = 1 − 0.1·0.51
        assert!((params.data[0] - 0.949).abs() < 1e-15);
        sgd.step(&mut params, &grads, 5).unwrap();
        let v = 0.9 * 0.51 + 0.5 + 0.01 * 0.949;
        assert!((params.data[0] - (0.949 - 0.05 * v)).abs() < 1e-15);
    }

    #[test]
    fn ema_examples() {
        let shape = small_shape();
        let mut teacher = TeacherState::new(ToyModelParams::zeros(shape), 0.99).unwrap();
        let mut student = ToyModelParams::zeros(shape);
        student.data.iter_mut().for_each(|v| *v = 1.0);
        teacher.ema_update(&student).unwrap();
        assert!(teacher.params.data.iter().all(|&v| (v - 0.01).abs() < 1e-15));

        let mut fixed = TeacherState::new(student.clone(), 0.99).unwrap();
        fixed.ema_update(&student).unwrap();
        assert_eq!(fixed.params, student);

        let mut t = TeacherState::new(ToyModelParams::zeros(shape), 0.99).unwrap();
        for _ in 0..1000 {
            t.ema_update(&student).unwrap();
        }
        let gap = t.params.data.iter().map(|v| (1.0 - v).abs()).fold(0.0, f64::max);
        assert!(gap <= 0.99f64.powi(1000) * (1.0 + 1e-9));
        assert!((0.99f64.powi(1000) - 4.3e-5).abs() < 1e-6);
    }

    #[test]
    fn ema_rejects_shape_mismatch() {
        let mut t = TeacherState::new(ToyModelParams::zeros(small_shape()), 0.99).unwrap();
        let other = ToyModelParams::zeros(ModelShape::new(5, 4));
        assert!(matches!(t.ema_update(&other), Err(Error::ShapeMismatch(_))));
    }
}
