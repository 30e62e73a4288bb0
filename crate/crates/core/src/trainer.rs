//! Supervised and mean-teacher training with the regional contrastive term.
//!
//! A step is split into three stages so that each can be tested alone:
//!
//! 1. [`prepare_supervised`] / [`prepare_semi_supervised`] build the student's
//!    input batch and targets (teacher pseudo-labels, η, mixing). Nothing here
//!    depends on the student.
//! 2. [`build_reco_plan`] samples queries and keys from the student's
//!    representation. Positive and negative keys are frozen into the plan.
//! 3. [`objective`] evaluates the loss and its gradient for a given plan.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, Array4, ArrayView3, ArrayView4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::{
    mean_of_rows, negative_class_distribution, relation_graph, reco_loss, DenseRepresentation, LossConfig,
    QueryBundle,
};
use crate::data::{apply_mask2, apply_mask3, classmix_mask, cutout_with, patch_mask, random_patch, Augmentation};
use crate::model::{
    backward, confidence_and_pseudo, forward, softmax, ForwardMode, ForwardOutput, Gradients, ModelShape,
    OptimConfig, Sgd, TeacherState, ToyModelParams,
};
use crate::rng::{self, RngStream};
use crate::sampling::{
    gate_pseudo_pixels, labelled_pixels, sample_negative_keys, sample_queries, PixelCandidateSet, SamplerConfig,
    SamplingStrategy,
};
use crate::{Error, Result, IGNORE_LABEL};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    #[default]
    Supervised,
    SemiSupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub augmentation: Augmentation,
    /// Adds the regional contrastive term.
    pub reco: bool,
    pub loss: LossConfig,
    pub strategy: SamplingStrategy,
    pub optim: OptimConfig,
    pub embed_dim: usize,
    pub ema_decay: f64,
    pub labelled_batch: usize,
    pub unlabelled_batch: usize,
    /// Random horizontal flips of every sampled image.
    pub flip: bool,
    /// Replaces the confidence-derived η when set.
    pub eta_override: Option<f64>,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: TrainMode::Supervised,
            augmentation: Augmentation::None,
            reco: true,
            loss: LossConfig::default(),
            strategy: SamplingStrategy::Active,
            optim: OptimConfig::default(),
            embed_dim: 256,
            ema_decay: 0.99,
            labelled_batch: 2,
            unlabelled_batch: 2,
            flip: true,
            eta_override: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.optim.validate()?;
        if self.embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay", "must lie in [0, 1]"));
        }
        if self.labelled_batch == 0 {
            return Err(Error::config("labelled_batch", "must be at least 1"));
        }
        if self.mode == TrainMode::SemiSupervised && self.unlabelled_batch == 0 {
            return Err(Error::config(
                "unlabelled_batch",
                "semi-supervised training needs at least 1 unlabelled image",
            ));
        }
        if let Some(eta) = self.eta_override {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::config("eta_override", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig::from_loss(&self.loss, self.strategy, 0)
    }
}

/// Loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub supervised: f64,
    pub unsupervised: f64,
    pub reco: f64,
    pub eta: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn compose(supervised: f64, unsupervised: f64, reco: f64, eta: f64) -> Self {
        LossBreakdown {
            supervised,
            unsupervised,
            reco,
            eta,
            total: supervised + eta * unsupervised + reco,
        }
    }
}

/// Images `B×H×W×3` with ground truth `B×H×W` (255 = ignore).
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledBatch {
    pub images: Array4<f64>,
    pub labels: Array3<u8>,
}

/// Student inputs and targets for one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTargets {
    /// Labelled images first, then (augmented) unlabelled ones.
    pub images: Array4<f64>,
    /// Ground truth for the labelled part, pseudo-labels for the rest.
    pub labels: Array3<u8>,
    pub num_labelled: usize,
    /// Weight of the unsupervised term.
    pub eta: f64,
    /// Pixels admitted to the contrastive loss.
    pub candidates: PixelCandidateSet,
}

/// Frozen samples for one evaluation of the contrastive term.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoPlan {
    /// Query pixels per class.
    pub queries: Vec<(usize, Vec<usize>)>,
    pub confidences: Vec<Vec<f64>>,
    pub positives: BTreeMap<usize, Vec<f64>>,
    pub negatives: BTreeMap<usize, Array2<f64>>,
    /// Number of sampled key rows, summed over classes.
    pub num_keys: usize,
}

impl RecoPlan {
    pub fn num_queries(&self) -> usize {
        self.queries.iter().map(|(_, q)| q.len()).sum()
    }

    pub fn bundles(&self, rep: &DenseRepresentation) -> Vec<QueryBundle> {
        let pixels = rep.pixels();
        self.queries
            .iter()
            .zip(&self.confidences)
            .map(|((class, px), conf)| {
                let mut queries = Array2::zeros((px.len(), pixels.ncols()));
                for (row, &p) in px.iter().enumerate() {
                    queries.row_mut(row).assign(&pixels.row(p));
                }
                QueryBundle {
                    class_id: *class,
                    queries,
                    confidences: conf.clone(),
                    pixels: px.clone(),
                }
            })
            .collect()
    }
}

fn flip_horizontal(image: ArrayView3<'_, f64>) -> Array3<f64> {
    image.slice(s![.., ..;-1, ..]).to_owned()
}

/// Inputs for a supervised step.
pub fn prepare_supervised(batch: &LabelledBatch) -> Result<StepTargets> {
    check_labelled(batch)?;
    let offset = 0;
    Ok(StepTargets {
        images: batch.images.clone(),
        labels: batch.labels.clone(),
        num_labelled: batch.images.dim().0,
        eta: 0.0,
        candidates: labelled_pixels(batch.labels.view(), offset),
    })
}

fn check_labelled(batch: &LabelledBatch) -> Result<()> {
    let (b, h, w, _) = batch.images.dim();
    if batch.labels.dim() != (b, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "labels {:?} for images {:?}",
            batch.labels.dim(),
            batch.images.dim()
        )));
    }
    if batch.labels.iter().all(|&v| v == IGNORE_LABEL) {
        return Err(Error::AllIgnored);
    }
    Ok(())
}

/// Fraction of pixels whose confidence exceeds `strong_threshold`.
pub fn compute_eta(confidence: ArrayView3<'_, f64>, strong_threshold: f64) -> f64 {
    if confidence.is_empty() {
        return 0.0;
    }
    let above = confidence.iter().filter(|&&c| c > strong_threshold).count();
    above as f64 / confidence.len() as f64
}

/// Inputs for a mean-teacher step: teacher pseudo-labels and confidences on
/// the raw unlabelled images, η from those confidences, then mixing of
/// (image, pseudo-label, confidence) triples.
pub fn prepare_semi_supervised(
    teacher: &ToyModelParams,
    labelled: &LabelledBatch,
    unlabelled: ArrayView4<'_, f64>,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<StepTargets> {
    check_labelled(labelled)?;
    let (nl, h, w, _) = labelled.images.dim();
    let (nu, hu, wu, _) = unlabelled.dim();
    if (hu, wu) != (h, w) {
        return Err(Error::ShapeMismatch(format!(
            "unlabelled images {hu}×{wu} vs labelled {h}×{w}"
        )));
    }
    let teacher_out = forward(teacher, unlabelled, ForwardMode::Eval)?;
    let (pseudo, conf) = confidence_and_pseudo(teacher_out.logits.view());
    let eta = cfg
        .eta_override
        .unwrap_or_else(|| compute_eta(conf.view(), cfg.loss.strong_threshold));

    let mut aug_images = unlabelled.to_owned();
    let mut aug_labels = pseudo.clone();
    let mut aug_conf = conf.clone();
    for i in 0..nu {
        let j = (i + 1) % nu;
        let mask = match cfg.augmentation {
            Augmentation::None => continue,
            Augmentation::Cutout => {
                let patch = random_patch(h, w, rng);
                let (img, lab) = cutout_with(unlabelled.slice(s![i, .., .., ..]), pseudo.slice(s![i, .., ..]), patch);
                aug_images.slice_mut(s![i, .., .., ..]).assign(&img);
                aug_labels.slice_mut(s![i, .., ..]).assign(&lab);
                let cut = patch_mask(h, w, patch);
                aug_conf
                    .slice_mut(s![i, .., ..])
                    .zip_mut_with(&cut, |c, &m| if m { *c = 0.0 });
                continue;
            }
            Augmentation::Cutmix => patch_mask(h, w, random_patch(h, w, rng)),
            Augmentation::Classmix => classmix_mask(pseudo.slice(s![i, .., ..]), rng),
        };
        aug_images.slice_mut(s![i, .., .., ..]).assign(&apply_mask3(
            &mask,
            unlabelled.slice(s![i, .., .., ..]),
            unlabelled.slice(s![j, .., .., ..]),
        ));
        aug_labels
            .slice_mut(s![i, .., ..])
            .assign(&apply_mask2(&mask, pseudo.slice(s![i, .., ..]), pseudo.slice(s![j, .., ..])));
        aug_conf
            .slice_mut(s![i, .., ..])
            .assign(&apply_mask2(&mask, conf.slice(s![i, .., ..]), conf.slice(s![j, .., ..])));
    }

    let mut images = Array4::zeros((nl + nu, h, w, 3));
    images.slice_mut(s![..nl, .., .., ..]).assign(&labelled.images);
    images.slice_mut(s![nl.., .., .., ..]).assign(&aug_images);
    let mut labels = Array3::zeros((nl + nu, h, w));
    labels.slice_mut(s![..nl, .., ..]).assign(&labelled.labels);
    labels.slice_mut(s![nl.., .., ..]).assign(&aug_labels);

    let mut candidates = labelled_pixels(labelled.labels.view(), 0);
    candidates.extend(gate_pseudo_pixels(
        aug_conf.view(),
        aug_labels.view(),
        cfg.loss.weak_threshold,
        nl * h * w,
    )?);
    Ok(StepTargets {
        images,
        labels,
        num_labelled: nl,
        eta,
        candidates,
    })
}

/// Samples queries and negative keys from the student's representation.
///
/// Returns `None` when fewer than two classes have candidates.
pub fn build_reco_plan(
    rep: &DenseRepresentation,
    class_probs: &Array4<f64>,
    candidates: &PixelCandidateSet,
    cfg: &TrainConfig,
    rng: &mut RngStream,
) -> Result<Option<RecoPlan>> {
    let active = candidates.active_classes();
    if active.len() < 2 {
        return Ok(None);
    }
    let num_classes = class_probs.dim().3;
    let pixels = rep.pixels();
    let probs = class_probs
        .view()
        .into_shape_with_order((pixels.nrows(), num_classes))
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    let means = active
        .iter()
        .map(|&c| mean_of_rows(pixels, &candidates.pixels_of(c), c))
        .collect::<Result<Vec<_>>>()?;
    let graph = relation_graph(&means, num_classes)?;
    let pool = candidates.key_pool();
    let sampler = cfg.sampler();

    let mut plan = RecoPlan {
        queries: Vec::new(),
        confidences: Vec::new(),
        positives: means.iter().map(|m| (m.class_id, m.vector.clone())).collect(),
        negatives: BTreeMap::new(),
        num_keys: 0,
    };
    for &c in &active {
        let dist = negative_class_distribution(&graph, c)?;
        let bundle = sample_queries(candidates, c, pixels, probs, &sampler, rng)?;
        let keys = sample_negative_keys(&pool, c, &dist, &sampler, rng)?;
        plan.num_keys += keys.sources.len();
        plan.negatives.insert(c, keys.gather(pixels));
        plan.queries.push((c, bundle.pixels));
        plan.confidences.push(bundle.confidences);
    }
    Ok(Some(plan))
}

/// Loss terms and their gradient for an already computed student forward pass.
pub fn objective_from_forward(
    params: &ToyModelParams,
    fwd: &ForwardOutput,
    targets: &StepTargets,
    plan: Option<&RecoPlan>,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let (batch, h, w, num_classes) = fwd.logits.dim();
    let nl = targets.num_labelled;
    let probs = softmax(fwd.logits.view());
    let mut grad_logits = Array4::<f64>::zeros(fwd.logits.raw_dim());

    let supervised = cross_entropy(
        probs.slice(s![..nl, .., .., ..]),
        targets.labels.slice(s![..nl, .., ..]),
        grad_logits.slice_mut(s![..nl, .., .., ..]),
        1.0,
    )
    .ok_or(Error::AllIgnored)?;

    let eta = targets.eta;
    let mut skip = vec![false; batch];
    let mut unsupervised = 0.0;
    if batch > nl {
        let mut scratch = Array4::<f64>::zeros((batch - nl, h, w, num_classes));
        unsupervised = cross_entropy(
            probs.slice(s![nl.., .., .., ..]),
            targets.labels.slice(s![nl.., .., ..]),
            scratch.view_mut(),
            eta,
        )
        .unwrap_or(0.0);
        if eta != 0.0 {
            grad_logits.slice_mut(s![nl.., .., .., ..]).assign(&scratch);
        } else {
            skip[nl..].iter_mut().for_each(|s| *s = true);
        }
    }

    let rep = fwd
        .representation
        .as_ref()
        .ok_or_else(|| Error::InvalidData("objective needs a train-mode forward pass".into()))?;
    let mut reco = 0.0;
    let mut grad_rep = None;
    if let Some(plan) = plan {
        let bundles = plan.bundles(rep);
        let out = reco_loss(&bundles, &plan.positives, &plan.negatives, loss_cfg)?;
        reco = out.loss;
        let m = rep.dim();
        let mut g = Array2::<f64>::zeros((rep.num_pixels(), m));
        for (bundle, grads) in bundles.iter().zip(&out.query_grads) {
            for (row, &p) in bundle.pixels.iter().enumerate() {
                let mut dst = g.row_mut(p);
                dst += &grads.row(row);
                skip[p / (h * w)] = false;
            }
        }
        grad_rep = Some(g.into_shape_with_order((batch, h, w, m)).expect("pixel count"));
    }

    let cache = fwd
        .cache
        .as_ref()
        .ok_or_else(|| Error::InvalidData("objective needs a train-mode forward pass".into()))?;
    let grads = backward(params, cache, grad_logits.view(), grad_rep.as_ref().map(|g| g.view()), &skip)?;
    Ok((LossBreakdown::compose(supervised, unsupervised, reco, eta), grads))
}

/// Runs the student forward pass and [`objective_from_forward`].
pub fn objective(
    params: &ToyModelParams,
    targets: &StepTargets,
    plan: Option<&RecoPlan>,
    loss_cfg: &LossConfig,
) -> Result<(LossBreakdown, Gradients)> {
    let fwd = forward(params, targets.images.view(), ForwardMode::Train)?;
    objective_from_forward(params, &fwd, targets, plan, loss_cfg)
}

/// Pixel-mean cross-entropy over non-ignored pixels. Writes
/// `scale · ∂loss/∂logits` into `grad`. `None` if every pixel is ignored.
fn cross_entropy(
    probs: ArrayView4<'_, f64>,
    labels: ArrayView3<'_, u8>,
    mut grad: ndarray::ArrayViewMut4<'_, f64>,
    scale: f64,
) -> Option<f64> {
    let count = labels.iter().filter(|&&v| v != IGNORE_LABEL).count();
    if count == 0 {
        return None;
    }
    let inv = 1.0 / count as f64;
    let mut loss = 0.0;
    for ((p_lane, mut g_lane), &label) in probs
        .lanes(Axis(3))
        .into_iter()
        .zip(grad.lanes_mut(Axis(3)))
        .zip(labels.iter())
    {
        if label == IGNORE_LABEL {
            continue;
        }
        let k = usize::from(label);
        loss -= p_lane[k].max(f64::MIN_POSITIVE).ln();
        for (j, (g, &p)) in g_lane.iter_mut().zip(p_lane.iter()).enumerate() {
            let onehot = if j == k { 1.0 } else { 0.0 };
            *g = scale * inv * (p - onehot);
        }
    }
    Some(loss * inv)
}

/// Model, optimiser, teacher and random streams owned by one training run.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub student: ToyModelParams,
    pub teacher: TeacherState,
    pub sgd: Sgd,
    /// Number of completed iterations.
    pub iter: usize,
    /// Batches, flips and mixing masks.
    pub rng: RngStream,
    /// Query and key sampling only, so that switching the contrastive term
    /// on or off leaves the batch sequence unchanged.
    pub contrast_rng: RngStream,
}

impl TrainerState {
    pub fn new(shape: ModelShape, cfg: &TrainConfig, seed: u64) -> Result<Self> {
        shape.validate()?;
        let student = ToyModelParams::init(shape, &mut rng::stream(seed, rng::streams::INIT));
        Ok(TrainerState {
            teacher: TeacherState::new(student.clone(), cfg.ema_decay)?,
            sgd: Sgd::new(cfg.optim.clone(), shape),
            student,
            iter: 0,
            rng: rng::stream(seed, rng::streams::TRAIN),
            contrast_rng: rng::stream(seed, rng::streams::CONTRAST),
        })
    }
}

/// One supervised update; returns the loss terms and the learning rate used.
pub fn supervised_step(state: &mut TrainerState, cfg: &TrainConfig, batch: &LabelledBatch) -> Result<(LossBreakdown, f64)> {
    let targets = prepare_supervised(batch)?;
    finish_step(state, cfg, &targets, false)
}

/// One mean-teacher update (SGD on the student, then EMA into the teacher).
pub fn semi_supervised_step(
    state: &mut TrainerState,
    cfg: &TrainConfig,
    labelled: &LabelledBatch,
    unlabelled: ArrayView4<'_, f64>,
) -> Result<(LossBreakdown, f64)> {
    let targets = prepare_semi_supervised(&state.teacher.params, labelled, unlabelled, cfg, &mut state.rng)?;
    finish_step(state, cfg, &targets, true)
}

fn finish_step(
    state: &mut TrainerState,
    cfg: &TrainConfig,
    targets: &StepTargets,
    update_teacher: bool,
) -> Result<(LossBreakdown, f64)> {
    let fwd = forward(&state.student, targets.images.view(), ForwardMode::Train)?;
    let plan = if cfg.reco {
        let probs = softmax(fwd.logits.view());
        let rep = fwd.representation.as_ref().expect("train mode");
        build_reco_plan(rep, &probs, &targets.candidates, cfg, &mut state.contrast_rng)?
    } else {
        None
    };
    let (breakdown, grads) = objective_from_forward(&state.student, &fwd, targets, plan.as_ref(), &cfg.loss)?;
    let lr = state.sgd.step(&mut state.student, &grads, state.iter)?;
    if update_teacher {
        state.teacher.ema_update(&state.student)?;
    }
    state.iter += 1;
    Ok((breakdown, lr))
}

/// Training images held in memory as floats.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub labelled_images: Vec<Array3<f64>>,
    pub labelled_labels: Vec<Array2<u8>>,
    pub unlabelled_images: Vec<Array3<f64>>,
}

impl TrainData {
    fn image_dims(&self) -> Result<(usize, usize)> {
        let first = self
            .labelled_images
            .first()
            .ok_or_else(|| Error::InvalidData("no labelled images".into()))?;
        let (h, w, _) = first.dim();
        Ok((h, w))
    }
}

fn draw_images(
    pool: &[Array3<f64>],
    count: usize,
    flip: bool,
    rng: &mut RngStream,
    labels: Option<&[Array2<u8>]>,
) -> (Array4<f64>, Option<Array3<u8>>) {
    let (h, w, c) = pool[0].dim();
    let mut images = Array4::zeros((count, h, w, c));
    let mut out_labels = labels.map(|_| Array3::zeros((count, h, w)));
    for b in 0..count {
        let i = rng.gen_range(0..pool.len());
        let mirrored = flip && rng.gen_bool(0.5);
        if mirrored {
            images.slice_mut(s![b, .., .., ..]).assign(&flip_horizontal(pool[i].view()));
        } else {
            images.slice_mut(s![b, .., .., ..]).assign(&pool[i]);
        }
        if let (Some(out), Some(src)) = (out_labels.as_mut(), labels) {
            let label = if mirrored {
                src[i].slice(s![.., ..;-1]).to_owned()
            } else {
                src[i].clone()
            };
            out.slice_mut(s![b, .., ..]).assign(&label);
        }
    }
    (images, out_labels)
}

/// One logged iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
}

impl IterRecord {
    pub const CSV_HEADER: &'static str = "iter,lr,supervised,unsupervised,eta,reco,total";

    pub fn csv_line(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{}",
            self.iter, self.lr, l.supervised, l.unsupervised, l.eta, l.reco, l.total
        )
    }
}

/// Draws a batch from `data` and applies one step of the configured mode.
pub fn train_iteration(state: &mut TrainerState, cfg: &TrainConfig, data: &TrainData) -> Result<IterRecord> {
    data.image_dims()?;
    let iter = state.iter;
    let (images, labels) = draw_images(
        &data.labelled_images,
        cfg.labelled_batch,
        cfg.flip,
        &mut state.rng,
        Some(&data.labelled_labels),
    );
    let batch = LabelledBatch {
        images,
        labels: labels.expect("labels requested"),
    };
    let (loss, lr) = match cfg.mode {
        TrainMode::Supervised => supervised_step(state, cfg, &batch)?,
        TrainMode::SemiSupervised => {
            if data.unlabelled_images.is_empty() {
                return Err(Error::InvalidData("semi-supervised training without unlabelled images".into()));
            }
            let (unlabelled, _) = draw_images(&data.unlabelled_images, cfg.unlabelled_batch, cfg.flip, &mut state.rng, None);
            semi_supervised_step(state, cfg, &batch, unlabelled.view())?
        }
    };
    Ok(IterRecord { iter, lr, loss })
}

/// Trains until `state.iter` reaches `until`, calling `on_iter` after each step.
pub fn train(
    state: &mut TrainerState,
    cfg: &TrainConfig,
    data: &TrainData,
    until: usize,
    mut on_iter: impl FnMut(&IterRecord, &TrainerState) -> Result<()>,
) -> Result<()> {
    while state.iter < until {
        let record = train_iteration(state, cfg, data)?;
        on_iter(&record, state)?;
    }
    Ok(())
}
