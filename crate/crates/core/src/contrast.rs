//! Regional contrastive loss and the class statistics it is built from.
//!
//! Pixels are addressed by flat index `b·H·W + y·W + x`, so a
//! `B×H×W×m` representation is also an `N×m` matrix of pixel vectors.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, Array4, ArrayView2, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Norm below which a pixel vector cannot be normalised.
pub const MIN_NORM: f64 = 1e-12;

/// Per-pixel embedding tensor `B×H×W×m`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseRepresentation {
    data: Array4<f64>,
    normalized: bool,
}

impl DenseRepresentation {
    /// Wraps a raw tensor without normalising it.
    pub fn raw(data: Array4<f64>) -> Result<Self> {
        if data.shape()[3] == 0 {
            return Err(Error::ShapeMismatch("embedding dimension is zero".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("non-finite representation entry".into()));
        }
        let data = data.as_standard_layout().into_owned();
        Ok(DenseRepresentation {
            data,
            normalized: false,
        })
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn num_pixels(&self) -> usize {
        self.data.len() / self.dim()
    }

    pub fn tensor(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_tensor(self) -> Array4<f64> {
        self.data
    }

    /// The representation as an `N×m` matrix, one row per pixel.
    pub fn pixels(&self) -> ArrayView2<'_, f64> {
        let m = self.dim();
        self.data
            .view()
            .into_shape_with_order((self.num_pixels(), m))
            .expect("standard layout")
    }

    /// Builds from an already unit-norm `N×m`-compatible tensor.
    pub(crate) fn from_normalized(data: Array4<f64>) -> Self {
        DenseRepresentation {
            data,
            normalized: true,
        }
    }
}

/// Scales every pixel vector to unit Euclidean norm.
pub fn normalize_pixels(raw: Array4<f64>) -> Result<DenseRepresentation> {
    let mut rep = DenseRepresentation::raw(raw)?;
    let m = rep.dim();
    let n = rep.num_pixels();
    let mut flat = rep
        .data
        .view_mut()
        .into_shape_with_order((n, m))
        .expect("standard layout");
    for (index, mut row) in flat.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm < MIN_NORM {
            return Err(Error::ZeroVector { index, norm });
        }
        row.mapv_inplace(|v| v / norm);
    }
    rep.normalized = true;
    Ok(rep)
}

/// Mean embedding of one class: the positive key of that class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMean {
    pub class_id: usize,
    pub vector: Vec<f64>,
    pub support: usize,
}

/// Arithmetic mean of all pixel vectors labelled `c`. Pixels labelled
/// anything else (including the ignore value) do not contribute.
pub fn class_mean(rep: &DenseRepresentation, labels: ArrayView3<'_, u8>, c: usize) -> Result<ClassMean> {
    let shape = rep.tensor().shape();
    if labels.shape() != &shape[..3] {
        return Err(Error::ShapeMismatch(format!(
            "labels {:?} vs representation {:?}",
            labels.shape(),
            &shape[..3]
        )));
    }
    let pixels = rep.pixels();
    let mut sum = Array1::<f64>::zeros(rep.dim());
    let mut support = 0usize;
    for (row, &label) in pixels.axis_iter(Axis(0)).zip(labels.iter()) {
        if usize::from(label) == c {
            sum += &row;
            support += 1;
        }
    }
    if support == 0 {
        return Err(Error::EmptyClass(c));
    }
    sum /= support as f64;
    Ok(ClassMean {
        class_id: c,
        vector: sum.to_vec(),
        support,
    })
}

/// Mean over the rows of `pixels` selected by `indices`.
pub fn mean_of_rows(pixels: ArrayView2<'_, f64>, indices: &[usize], class_id: usize) -> Result<ClassMean> {
    if indices.is_empty() {
        return Err(Error::EmptyClass(class_id));
    }
    let mut sum = Array1::<f64>::zeros(pixels.ncols());
    for &i in indices {
        sum += &pixels.row(i);
    }
    sum /= indices.len() as f64;
    Ok(ClassMean {
        class_id,
        vector: sum.to_vec(),
        support: indices.len(),
    })
}

/// Pairwise dot products between class means.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationGraph {
    /// `C×C`; entries on the diagonal or touching an inactive class are NaN.
    pub g: Array2<f64>,
    /// Sorted ids of classes present in the batch.
    pub active_classes: Vec<usize>,
}

impl RelationGraph {
    pub fn num_classes(&self) -> usize {
        self.g.nrows()
    }

    pub fn is_active(&self, c: usize) -> bool {
        self.active_classes.binary_search(&c).is_ok()
    }
}

/// Builds the relation graph over `num_classes` classes from the means of the
/// active ones.
pub fn relation_graph(means: &[ClassMean], num_classes: usize) -> Result<RelationGraph> {
    if means.len() < 2 {
        return Err(Error::InvalidData(format!(
            "relation graph needs at least 2 class means, got {}",
            means.len()
        )));
    }
    let dim = means[0].vector.len();
    for mean in means {
        if mean.vector.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: mean.vector.len(),
            });
        }
        if mean.class_id >= num_classes {
            return Err(Error::InvalidData(format!(
                "class {} outside 0..{num_classes}",
                mean.class_id
            )));
        }
    }
    let mut g = Array2::from_elem((num_classes, num_classes), f64::NAN);
    for (i, a) in means.iter().enumerate() {
        for b in &means[i + 1..] {
            if a.class_id == b.class_id {
                return Err(Error::InvalidData(format!("duplicate class {}", a.class_id)));
            }
            let dot = dot(&a.vector, &b.vector);
            g[[a.class_id, b.class_id]] = dot;
            g[[b.class_id, a.class_id]] = dot;
        }
    }
    let mut active_classes: Vec<usize> = means.iter().map(|m| m.class_id).collect();
    active_classes.sort_unstable();
    Ok(RelationGraph { g, active_classes })
}

/// Softmax of `G[c, ·]` over the other active classes, as `(class, probability)`
/// pairs in ascending class order.
pub fn negative_class_distribution(graph: &RelationGraph, c: usize) -> Result<Vec<(usize, f64)>> {
    if !graph.is_active(c) {
        return Err(Error::EmptyClass(c));
    }
    let others: Vec<usize> = graph.active_classes.iter().copied().filter(|&j| j != c).collect();
    if others.is_empty() {
        return Err(Error::SingleClass(c));
    }
    let max = others
        .iter()
        .map(|&j| graph.g[[c, j]])
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = others.iter().map(|&j| (graph.g[[c, j]] - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(others
        .into_iter()
        .zip(weights)
        .map(|(j, w)| (j, w / total))
        .collect())
}

/// Sampled queries of one class.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBundle {
    pub class_id: usize,
    /// `n_q×m`, unit rows.
    pub queries: Array2<f64>,
    /// Predicted probability of `class_id` at each query pixel.
    pub confidences: Vec<f64>,
    /// Source pixel of each query, when drawn from a representation.
    pub pixels: Vec<usize>,
}

/// Negative key candidates, grouped by the class they belong to.
///
/// Keys for query class `c` are drawn from every group except `c`'s own.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyPool {
    pub per_class: BTreeMap<usize, Vec<usize>>,
}

impl KeyPool {
    /// Candidate pixels usable as negatives for `c`, per class.
    pub fn negatives_for(&self, c: usize) -> impl Iterator<Item = (usize, &[usize])> {
        self.per_class
            .iter()
            .filter(move |(&k, _)| k != c)
            .map(|(&k, v)| (k, v.as_slice()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    pub num_queries: usize,
    pub num_keys: usize,
    pub strong_threshold: f64,
    pub weak_threshold: f64,
    /// Rescale positive keys to unit norm before use. Off by default.
    pub renormalize_positive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.5,
            num_queries: 256,
            num_keys: 512,
            strong_threshold: 0.97,
            weak_threshold: 0.7,
            renormalize_positive: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature", "must be positive"));
        }
        if self.num_queries == 0 {
            return Err(Error::config("num_queries", "must be at least 1"));
        }
        if self.num_keys == 0 {
            return Err(Error::config("num_keys", "must be at least 1"));
        }
        if !(self.weak_threshold > 0.0 && self.weak_threshold <= 1.0) {
            return Err(Error::config("weak_threshold", "must lie in (0, 1]"));
        }
        if !(self.strong_threshold > 0.0 && self.strong_threshold <= 1.0) {
            return Err(Error::config("strong_threshold", "must lie in (0, 1]"));
        }
        if self.weak_threshold > self.strong_threshold {
            return Err(Error::config(
                "weak_threshold",
                "must not exceed strong_threshold",
            ));
        }
        Ok(())
    }
}

/// Loss value and the gradient for each bundle's query matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RecoOutput {
    pub loss: f64,
    /// Same order and shape as the input bundles' `queries`.
    pub query_grads: Vec<Array2<f64>>,
}

/// Regional contrastive loss, averaged over queries within a class and then
/// over classes.
///
/// Positive and negative keys are constants: only the queries receive a
/// gradient. `cfg.renormalize_positive` is honoured here.
pub fn reco_loss(
    bundles: &[QueryBundle],
    positives: &BTreeMap<usize, Vec<f64>>,
    negatives: &BTreeMap<usize, Array2<f64>>,
    cfg: &LossConfig,
) -> Result<RecoOutput> {
    let inv_tau = 1.0 / cfg.temperature;
    let active: Vec<&QueryBundle> = bundles.iter().filter(|b| b.queries.nrows() > 0).collect();
    let mut query_grads: Vec<Array2<f64>> = bundles
        .iter()
        .map(|b| Array2::zeros(b.queries.raw_dim()))
        .collect();
    if active.is_empty() {
        return Ok(RecoOutput {
            loss: 0.0,
            query_grads,
        });
    }
    let class_weight = 1.0 / active.len() as f64;
    let mut loss = 0.0;

    for (bundle, grad) in bundles.iter().zip(query_grads.iter_mut()) {
        let n_q = bundle.queries.nrows();
        if n_q == 0 {
            continue;
        }
        let m = bundle.queries.ncols();
        let c = bundle.class_id;
        let positive = positives.get(&c).ok_or(Error::EmptyClass(c))?;
        if positive.len() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: positive.len(),
            });
        }
        let mut positive = Array1::from(positive.clone());
        if cfg.renormalize_positive {
            let norm = positive.dot(&positive).sqrt();
            if norm < MIN_NORM {
                return Err(Error::ZeroVector { index: c, norm });
            }
            positive /= norm;
        }
        let keys = negatives.get(&c).ok_or(Error::EmptyNegatives(c))?;
        if keys.nrows() == 0 {
            return Err(Error::EmptyNegatives(c));
        }
        if keys.ncols() != m {
            return Err(Error::DimensionMismatch {
                expected: m,
                got: keys.ncols(),
            });
        }
        if bundle.confidences.len() != n_q {
            return Err(Error::DimensionMismatch {
                expected: n_q,
                got: bundle.confidences.len(),
            });
        }

        // logits[i] = [q·p, q·k_1, …, q·k_K] / τ
        let pos_logits = bundle.queries.dot(&positive) * inv_tau;
        let neg_logits = bundle.queries.dot(&keys.t()) * inv_tau;
        let weight = class_weight / n_q as f64;
        let mut class_loss = 0.0;
        for i in 0..n_q {
            let l0 = pos_logits[i];
            let row = neg_logits.row(i);
            let max = row.iter().fold(l0, |a, &b| a.max(b));
            let e0 = (l0 - max).exp();
            let mut total = e0;
            let mut softmax = row.mapv(|l| (l - max).exp());
            total += softmax.sum();
            class_loss += max + total.ln() - l0;

            // d/dq = (Σ_j s_j k_j + (s_0 − 1) p) / τ
            softmax /= total;
            let s0 = e0 / total;
            let mut g = keys.t().dot(&softmax);
            g.scaled_add(s0 - 1.0, &positive);
            g *= inv_tau * weight;
            grad.row_mut(i).assign(&g);
        }
        loss += class_loss * weight;
    }
    Ok(RecoOutput { loss, query_grads })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_random(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn normalize_three_four() {
        let raw = Array4::from_shape_vec((1, 1, 1, 2), vec![3.0, 4.0]).unwrap();
        let rep = normalize_pixels(raw).unwrap();
        assert!(rep.is_normalized());
        assert!((rep.tensor()[[0, 0, 0, 0]] - 0.6).abs() < 1e-15);
        assert!((rep.tensor()[[0, 0, 0, 1]] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let raw = Array4::from_shape_fn((2, 2, 2, 4), |_| rng.gen_range(-2.0..2.0));
        let once = normalize_pixels(raw).unwrap();
        for row in once.pixels().rows() {
            let n = row.dot(&row).sqrt();
            assert!((n - 1.0).abs() <= 1e-6);
        }
        let twice = normalize_pixels(once.tensor().clone()).unwrap();
        for (a, b) in once.tensor().iter().zip(twice.tensor().iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn normalize_rejects_zero_pixel() {
        let raw = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            normalize_pixels(raw),
            Err(Error::ZeroVector { index: 1, .. })
        ));
    }

    #[test]
    fn class_mean_two_points() {
        let raw = Array4::from_shape_vec((1, 1, 2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let rep = normalize_pixels(raw).unwrap();
        let labels = Array3::from_elem((1, 1, 2), 3u8);
        let mean = class_mean(&rep, labels.view(), 3).unwrap();
        assert_eq!(mean.vector, vec![0.5, 0.5]);
        assert_eq!(mean.support, 2);
        assert!(matches!(
            class_mean(&rep, labels.view(), 0),
            Err(Error::EmptyClass(0))
        ));
    }

    #[test]
    fn class_mean_matches_accumulate_and_divide() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vecs: Vec<Vec<f64>> = (0..10).map(|_| unit_random(&mut rng, 5)).collect();
        let raw = Array4::from_shape_vec((1, 2, 5, 5), vecs.concat()).unwrap();
        let rep = normalize_pixels(raw).unwrap();
        let labels = Array3::zeros((1, 2, 5));
        let mean = class_mean(&rep, labels.view(), 0).unwrap();
        let mut oracle = [0.0; 5];
        for v in &vecs {
            for (o, x) in oracle.iter_mut().zip(v) {
                *o += x;
            }
        }
        for (o, x) in oracle.iter().zip(&mean.vector) {
            assert!((o / 10.0 - x).abs() < 1e-12);
        }
    }

    #[test]
    fn relation_graph_basic_values() {
        let means = vec![
            ClassMean { class_id: 0, vector: vec![1.0, 0.0], support: 1 },
            ClassMean { class_id: 1, vector: vec![1.0, 0.0], support: 1 },
            ClassMean { class_id: 3, vector: vec![0.0, 1.0], support: 1 },
        ];
        let g = relation_graph(&means, 4).unwrap();
        assert_eq!(g.g[[0, 1]], 1.0);
        assert_eq!(g.g[[0, 3]], 0.0);
        assert_eq!(g.g[[3, 1]], 0.0);
        assert!(g.g[[2, 0]].is_nan());
        assert!(g.g[[1, 1]].is_nan());
        assert_eq!(g.active_classes, vec![0, 1, 3]);
    }

    #[test]
    fn distribution_hand_values() {
        let means = vec![
            ClassMean { class_id: 0, vector: vec![1.0], support: 1 },
            ClassMean { class_id: 1, vector: vec![0.0], support: 1 },
            ClassMean { class_id: 2, vector: vec![3f64.ln()], support: 1 },
        ];
        let g = relation_graph(&means, 3).unwrap();
        // G[0,·] = (0, ln 3)
        let dist = negative_class_distribution(&g, 0).unwrap();
        assert_eq!(dist.len(), 2);
        assert!((dist[0].1 - 0.25).abs() < 1e-15);
        assert!((dist[1].1 - 0.75).abs() < 1e-15);

        let single = relation_graph(&means[..2], 3).unwrap();
        let equal = RelationGraph {
            g: array![[f64::NAN, 0.3, 0.3], [0.3, f64::NAN, 0.0], [0.3, 0.0, f64::NAN]],
            active_classes: vec![0, 1, 2],
        };
        let d = negative_class_distribution(&equal, 0).unwrap();
        assert_eq!(d[0].1, 0.5);
        assert_eq!(d[1].1, 0.5);
        let d = negative_class_distribution(&single, 1).unwrap();
        assert_eq!(d, vec![(0, 1.0)]);
    }

    #[test]
    fn distribution_single_class_errors() {
        let g = RelationGraph {
            g: Array2::from_elem((2, 2), f64::NAN),
            active_classes: vec![1],
        };
        assert!(matches!(
            negative_class_distribution(&g, 1),
            Err(Error::SingleClass(1))
        ));
    }

    fn single_bundle(q: Vec<f64>) -> QueryBundle {
        let m = q.len();
        QueryBundle {
            class_id: 0,
            queries: Array2::from_shape_vec((1, m), q).unwrap(),
            confidences: vec![0.5],
            pixels: vec![0],
        }
    }

    #[test]
    fn loss_closed_form_softplus() {
        let bundle = single_bundle(vec![1.0, 0.0]);
        let positives = BTreeMap::from([(0, vec![1.0, 0.0])]);
        let negatives = BTreeMap::from([(0, array![[0.0, 1.0]])]);
        let out = reco_loss(&[bundle], &positives, &negatives, &LossConfig::default()).unwrap();
        let expected = (1.0 + (-2.0f64).exp()).ln();
        assert!((out.loss - expected).abs() < 1e-15);
        assert!((out.loss - 0.126928).abs() < 1e-6);
    }

    #[test]
    fn loss_indistinguishable_keys_is_ln2() {
        let bundle = single_bundle(vec![0.6, 0.8]);
        let positives = BTreeMap::from([(0, vec![0.0, 1.0])]);
        let negatives = BTreeMap::from([(0, array![[0.0, 1.0]])]);
        let out = reco_loss(&[bundle], &positives, &negatives, &LossConfig::default()).unwrap();
        assert!((out.loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn loss_errors() {
        let bundle = single_bundle(vec![1.0, 0.0]);
        let positives = BTreeMap::from([(0, vec![1.0, 0.0])]);
        let cfg = LossConfig::default();
        let empty = BTreeMap::from([(0, Array2::zeros((0, 2)))]);
        assert!(matches!(
            reco_loss(&[bundle.clone()], &positives, &empty, &cfg),
            Err(Error::EmptyNegatives(0))
        ));
        let wrong = BTreeMap::from([(0, Array2::zeros((2, 3)))]);
        assert!(matches!(
            reco_loss(&[bundle], &positives, &wrong, &cfg),
            Err(Error::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn loss_config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig { weak_threshold: 0.99, ..Default::default() };
        assert!(matches!(bad.validate(), Err(Error::InvalidConfig { key, .. }) if key == "weak_threshold"));
        let bad = LossConfig { temperature: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}
