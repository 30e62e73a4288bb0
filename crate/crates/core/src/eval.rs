//! Segmentation metrics and class-relationship analysis.

use std::fmt::Write as _;

use ndarray::{s, Array2, ArrayView2, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrast::{ClassMean, RelationGraph};
use crate::model::{forward, ForwardMode, ToyModelParams};
use crate::{Error, Result, IGNORE_LABEL};

/// Pixel counts: rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Array2<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            counts: Array2::zeros((num_classes, num_classes)),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    /// Adds one label map pair. Ignore-labelled truth pixels are skipped.
    pub fn accumulate(&mut self, truth: ArrayView2<'_, u8>, pred: ArrayView2<'_, u8>) -> Result<()> {
        if truth.dim() != pred.dim() {
            return Err(Error::ShapeMismatch(format!(
                "truth {:?} vs prediction {:?}",
                truth.dim(),
                pred.dim()
            )));
        }
        let c = self.num_classes();
        for (&t, &p) in truth.iter().zip(pred.iter()) {
            if t == IGNORE_LABEL {
                continue;
            }
            let (t, p) = (usize::from(t), usize::from(p));
            if t >= c || p >= c {
                return Err(Error::InvalidData(format!("label pair ({t}, {p}) outside 0..{c}")));
            }
            self.counts[[t, p]] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes() != self.num_classes() {
            return Err(Error::ShapeMismatch("confusion matrices differ in size".into()));
        }
        self.counts += &other.counts;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.sum()
    }
}

/// Accumulates a confusion matrix over many images in parallel.
pub fn confusion_over(
    num_classes: usize,
    truths: &[ArrayView2<'_, u8>],
    preds: &[ArrayView2<'_, u8>],
) -> Result<ConfusionMatrix> {
    if truths.len() != preds.len() {
        return Err(Error::ShapeMismatch("truth and prediction counts differ".into()));
    }
    truths
        .par_iter()
        .zip(preds.par_iter())
        .map(|(t, p)| {
            let mut cm = ConfusionMatrix::new(num_classes);
            cm.accumulate(*t, *p)?;
            Ok(cm)
        })
        .try_reduce(
            || ConfusionMatrix::new(num_classes),
            |mut a, b| {
                a.merge(&b)?;
                Ok(a)
            },
        )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

impl IouReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => writeln!(out, "{c},{v}").unwrap(),
                None => writeln!(out, "{c},").unwrap(),
            }
        }
        writeln!(out, "mean,{}", self.mean).unwrap();
        out
    }
}

/// `TP / (TP + FP + FN)` per class; the mean skips zero-denominator classes.
pub fn mean_iou(cm: &ConfusionMatrix) -> IouReport {
    let c = cm.num_classes();
    let per_class: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let tp = cm.counts[[k, k]];
            let fn_ = cm.counts.row(k).sum() - tp;
            let fp = cm.counts.column(k).sum() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        0.0
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    IouReport { per_class, mean }
}

/// Argmax predictions for a set of `H×W×3` images, processed in chunks.
pub fn predict(params: &ToyModelParams, images: &[ndarray::Array3<f64>]) -> Result<Vec<Array2<u8>>> {
    images
        .par_iter()
        .map(|img| {
            let batch = img.view().insert_axis(Axis(0));
            let out = forward(params, batch, ForwardMode::Eval)?;
            let (labels, _) = crate::model::confidence_and_pseudo(out.logits.view());
            Ok(labels.index_axis(Axis(0), 0).to_owned())
        })
        .collect()
}

/// Validation mIoU of `params`.
pub fn evaluate(params: &ToyModelParams, images: &[ndarray::Array3<f64>], labels: &[Array2<u8>]) -> Result<(ConfusionMatrix, IouReport)> {
    let preds = predict(params, images)?;
    let truths: Vec<_> = labels.iter().map(|l| l.view()).collect();
    let pred_views: Vec<_> = preds.iter().map(|p| p.view()).collect();
    let cm = confusion_over(params.shape.num_classes, &truths, &pred_views)?;
    let report = mean_iou(&cm);
    Ok((cm, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Encoder output.
    Features,
    /// Normalised representation head output.
    Representation,
}

/// Per-class mean embedding over every labelled pixel of the given images.
/// Classes that never occur are omitted.
pub fn class_embeddings(
    params: &ToyModelParams,
    images: &[ndarray::Array3<f64>],
    labels: &[ArrayView2<'_, u8>],
    kind: EmbeddingKind,
) -> Result<Vec<ClassMean>> {
    if images.is_empty() {
        return Err(Error::InvalidData("no images for class embeddings".into()));
    }
    if images.len() != labels.len() {
        return Err(Error::ShapeMismatch("image and label counts differ".into()));
    }
    let num_classes = params.shape.num_classes;
    let dim = match kind {
        EmbeddingKind::Features => params.shape.hidden2,
        EmbeddingKind::Representation => params.shape.embed_dim,
    };
    let mut sums = Array2::<f64>::zeros((num_classes, dim));
    let mut support = vec![0usize; num_classes];
    for (img, label) in images.iter().zip(labels) {
        let out = forward(params, img.view().insert_axis(Axis(0)), ForwardMode::Train)?;
        let emb = match kind {
            EmbeddingKind::Features => out.cache.expect("train mode").features(),
            EmbeddingKind::Representation => out.representation.expect("train mode").into_tensor(),
        };
        let emb = emb.slice(s![0, .., .., ..]).to_owned();
        accumulate_class_sums(emb.view(), *label, &mut sums, &mut support)?;
    }
    Ok((0..num_classes)
        .filter(|&c| support[c] > 0)
        .map(|c| ClassMean {
            class_id: c,
            vector: sums.row(c).mapv(|v| v / support[c] as f64).to_vec(),
            support: support[c],
        })
        .collect())
}

fn accumulate_class_sums(
    emb: ArrayView3<'_, f64>,
    label: ArrayView2<'_, u8>,
    sums: &mut Array2<f64>,
    support: &mut [usize],
) -> Result<()> {
    let (h, w, _) = emb.dim();
    if label.dim() != (h, w) {
        return Err(Error::ShapeMismatch(format!("label {:?} vs embedding {h}×{w}", label.dim())));
    }
    for ((y, x), &l) in label.indexed_iter() {
        if l == IGNORE_LABEL || usize::from(l) >= support.len() {
            continue;
        }
        let c = usize::from(l);
        let mut row = sums.row_mut(c);
        row += &emb.slice(s![y, x, ..]);
        support[c] += 1;
    }
    Ok(())
}

/// Binary merge tree over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DendrogramNode {
    Leaf { class: usize },
    Merge {
        left: Box<DendrogramNode>,
        right: Box<DendrogramNode>,
        height: f64,
    },
}

impl DendrogramNode {
    pub fn height(&self) -> f64 {
        match self {
            DendrogramNode::Leaf { .. } => 0.0,
            DendrogramNode::Merge { height, .. } => *height,
        }
    }

    pub fn leaves(&self) -> Vec<usize> {
        match self {
            DendrogramNode::Leaf { class } => vec![*class],
            DendrogramNode::Merge { left, right, .. } => {
                let mut v = left.leaves();
                v.extend(right.leaves());
                v
            }
        }
    }

    /// Newick text with branch lengths; leaves are named by `name`.
    pub fn to_newick(&self, name: &dyn Fn(usize) -> String) -> String {
        fn walk(node: &DendrogramNode, parent: f64, name: &dyn Fn(usize) -> String, out: &mut String) {
            match node {
                DendrogramNode::Leaf { class } => {
                    write!(out, "{}:{}", name(*class), parent).unwrap();
                }
                DendrogramNode::Merge { left, right, height } => {
                    out.push('(');
                    walk(left, *height, name, out);
                    out.push(',');
                    walk(right, *height, name, out);
                    write!(out, "):{}", parent - height).unwrap();
                }
            }
        }
        match self {
            DendrogramNode::Leaf { class } => format!("{};", name(*class)),
            DendrogramNode::Merge { left, right, height } => {
                let mut out = String::from("(");
                walk(left, *height, name, &mut out);
                out.push(',');
                walk(right, *height, name, &mut out);
                out.push_str(");");
                out
            }
        }
    }
}

/// One agglomeration step: the smallest class id of each merged cluster.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    pub left: usize,
    pub right: usize,
    pub height: f64,
}

/// `1 − a·b / (‖a‖‖b‖)`.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Average-linkage agglomerative clustering on cosine distance.
///
/// Clusters are named by their smallest class id; among equally close pairs
/// the lexicographically smallest `(id, id)` merges first. Heights are the
/// mean pairwise distance between members of the two merged clusters.
pub fn dendrogram(means: &[ClassMean]) -> Result<(DendrogramNode, Vec<MergeStep>)> {
    if means.len() < 2 {
        return Err(Error::InvalidData("dendrogram needs at least 2 classes".into()));
    }
    let n = means.len();
    let mut dist = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let d = cosine_distance(&means[i].vector, &means[j].vector);
            dist[[i, j]] = d;
            dist[[j, i]] = d;
        }
    }
    // slot-indexed clusters; `None` once merged away
    let mut clusters: Vec<Option<(usize, usize, DendrogramNode)>> = means
        .iter()
        .map(|m| Some((m.class_id, 1, DendrogramNode::Leaf { class: m.class_id })))
        .collect();
    let mut steps = Vec::with_capacity(n - 1);
    for _ in 1..n {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for i in 0..n {
            let Some((id_i, _, _)) = &clusters[i] else { continue };
            for j in i + 1..n {
                let Some((id_j, _, _)) = &clusters[j] else { continue };
                let key = ((*id_i).min(*id_j), (*id_i).max(*id_j));
                let d = dist[[i, j]];
                let better = match &best {
                    None => true,
                    Some((bd, bkey, _, _)) => d < *bd || (d == *bd && key < *bkey),
                };
                if better {
                    best = Some((d, key, i, j));
                }
            }
        }
        let (height, _, i, j) = best.expect("at least two clusters remain");
        let (id_i, n_i, node_i) = clusters[i].take().unwrap();
        let (id_j, n_j, node_j) = clusters[j].take().unwrap();
        for k in 0..n {
            if clusters[k].is_some() {
                let d = (n_i as f64 * dist[[i, k]] + n_j as f64 * dist[[j, k]]) / (n_i + n_j) as f64;
                dist[[i, k]] = d;
                dist[[k, i]] = d;
            }
        }
        let (left, right) = if id_i <= id_j { (node_i, node_j) } else { (node_j, node_i) };
        steps.push(MergeStep {
            left: id_i.min(id_j),
            right: id_i.max(id_j),
            height,
        });
        clusters[i] = Some((
            id_i.min(id_j),
            n_i + n_j,
            DendrogramNode::Merge {
                left: Box::new(left),
                right: Box::new(right),
                height,
            },
        ));
    }
    let root = clusters.into_iter().flatten().next().expect("root").2;
    Ok((root, steps))
}

/// `C×C` CSV with a header row; unused entries are empty cells.
pub fn relation_graph_csv(graph: &RelationGraph) -> String {
    let c = graph.num_classes();
    let mut out = String::from("class");
    for j in 0..c {
        write!(out, ",{j}").unwrap();
    }
    out.push('\n');
    for i in 0..c {
        write!(out, "{i}").unwrap();
        for j in 0..c {
            let v = graph.g[[i, j]];
            if v.is_nan() {
                out.push(',');
            } else {
                write!(out, ",{v}").unwrap();
            }
        }
        out.push('\n');
    }
    out
}

/// Undirected weighted graph over the active classes.
pub fn relation_graph_dot(graph: &RelationGraph) -> String {
    let mut out = String::from("graph relation {\n");
    for &c in &graph.active_classes {
        writeln!(out, "  c{c} [label=\"{c}\"];").unwrap();
    }
    for (a, &p) in graph.active_classes.iter().enumerate() {
        for &q in &graph.active_classes[a + 1..] {
            writeln!(out, "  c{p} -- c{q} [weight={}];", graph.g[[p, q]]).unwrap();
        }
    }
    out.push_str("}\n");
    out
}
