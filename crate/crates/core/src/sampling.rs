//! Active query and key sampling within a fixed per-class budget.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, ArrayView3};
use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contrast::{KeyPool, LossConfig, QueryBundle};
use crate::rng::RngStream;
use crate::{Error, Result, IGNORE_LABEL};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    /// Hard queries first, keys weighted by the relation graph.
    #[default]
    Active,
    RandomQueryRandomKey,
    ActiveQueryRandomKey,
    EasyQueryActiveKey,
    /// Every candidate is a query and every negative pixel a key; the
    /// budgets are ignored.
    Exhaustive,
}

impl SamplingStrategy {
    fn query_preference(self) -> QueryPreference {
        match self {
            SamplingStrategy::Active | SamplingStrategy::ActiveQueryRandomKey => QueryPreference::Hard,
            SamplingStrategy::EasyQueryActiveKey => QueryPreference::Easy,
            SamplingStrategy::RandomQueryRandomKey => QueryPreference::Uniform,
            SamplingStrategy::Exhaustive => QueryPreference::All,
        }
    }

    pub fn uses_relation_graph(self) -> bool {
        matches!(
            self,
            SamplingStrategy::Active | SamplingStrategy::EasyQueryActiveKey
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum QueryPreference {
    Hard,
    Easy,
    Uniform,
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub num_queries: usize,
    pub num_keys: usize,
    pub strong_threshold: f64,
    pub weak_threshold: f64,
    pub rng_seed: u64,
    pub strategy: SamplingStrategy,
}

impl SamplerConfig {
    pub fn from_loss(loss: &LossConfig, strategy: SamplingStrategy, rng_seed: u64) -> Self {
        SamplerConfig {
            num_queries: loss.num_queries,
            num_keys: loss.num_keys,
            strong_threshold: loss.strong_threshold,
            weak_threshold: loss.weak_threshold,
            rng_seed,
            strategy,
        }
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig::from_loss(&LossConfig::default(), SamplingStrategy::Active, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PixelSource {
    Labelled,
    Pseudo,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    /// Flat pixel index into the batch representation.
    pub pixel: usize,
    /// Confidence that admitted the pixel: 1.0 for ground truth, the
    /// teacher's max probability for pseudo-labels.
    pub confidence: f64,
    pub source: PixelSource,
}

/// Pixels eligible for the contrastive loss, grouped by (pseudo-)label.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PixelCandidateSet {
    pub per_class: BTreeMap<usize, Vec<Candidate>>,
}

impl PixelCandidateSet {
    pub fn push(&mut self, class: usize, candidate: Candidate) {
        self.per_class.entry(class).or_default().push(candidate);
    }

    pub fn extend(&mut self, other: PixelCandidateSet) {
        for (class, list) in other.per_class {
            self.per_class.entry(class).or_default().extend(list);
        }
    }

    /// Classes holding at least one candidate.
    pub fn active_classes(&self) -> Vec<usize> {
        self.per_class
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(&c, _)| c)
            .collect()
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels_of(&self, c: usize) -> Vec<usize> {
        self.per_class
            .get(&c)
            .map(|v| v.iter().map(|cand| cand.pixel).collect())
            .unwrap_or_default()
    }

    pub fn key_pool(&self) -> KeyPool {
        KeyPool {
            per_class: self
                .per_class
                .iter()
                .filter(|(_, v)| !v.is_empty())
                .map(|(&c, v)| (c, v.iter().map(|cand| cand.pixel).collect()))
                .collect(),
        }
    }
}

/// Indices with confidence above `strong_threshold` (easy) and at or below it
/// (hard).
pub fn split_easy_hard(confidences: &[f64], strong_threshold: f64) -> (Vec<usize>, Vec<usize>) {
    let mut easy = Vec::new();
    let mut hard = Vec::new();
    for (i, &conf) in confidences.iter().enumerate() {
        if conf > strong_threshold {
            easy.push(i);
        } else {
            hard.push(i);
        }
    }
    (easy, hard)
}

/// Candidate positions (indices into the class's candidate list) chosen as
/// queries: up to `num_queries`, preferred group first, topped up from the
/// other group when the preferred one runs short.
pub fn select_query_indices(
    confidences: &[f64],
    cfg: &SamplerConfig,
    rng: &mut RngStream,
) -> Vec<usize> {
    let want = cfg.num_queries.min(confidences.len());
    match cfg.strategy.query_preference() {
        QueryPreference::All => (0..confidences.len()).collect(),
        QueryPreference::Uniform => index::sample(rng, confidences.len(), want).into_vec(),
        pref => {
            let (easy, hard) = split_easy_hard(confidences, cfg.strong_threshold);
            let (first, second) = match pref {
                QueryPreference::Hard => (hard, easy),
                _ => (easy, hard),
            };
            let from_first = want.min(first.len());
            let mut chosen: Vec<usize> = index::sample(rng, first.len(), from_first)
                .into_iter()
                .map(|i| first[i])
                .collect();
            let rest = want - from_first;
            if rest > 0 {
                chosen.extend(
                    index::sample(rng, second.len(), rest)
                        .into_iter()
                        .map(|i| second[i]),
                );
            }
            chosen
        }
    }
}

/// Draws queries of class `c` from the candidate set.
///
/// `pixels` is the `N×m` representation and `class_probs` the `N×C` predicted
/// probabilities; the query confidence is the probability of `c`.
pub fn sample_queries(
    candidates: &PixelCandidateSet,
    c: usize,
    pixels: ArrayView2<'_, f64>,
    class_probs: ArrayView2<'_, f64>,
    cfg: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<QueryBundle> {
    let list = candidates
        .per_class
        .get(&c)
        .filter(|v| !v.is_empty())
        .ok_or(Error::EmptyClass(c))?;
    if c >= class_probs.ncols() {
        return Err(Error::DimensionMismatch {
            expected: class_probs.ncols(),
            got: c + 1,
        });
    }
    let confidences: Vec<f64> = list.iter().map(|cand| class_probs[[cand.pixel, c]]).collect();
    let chosen = select_query_indices(&confidences, cfg, rng);
    let m = pixels.ncols();
    let mut queries = Array2::zeros((chosen.len(), m));
    let mut picked_pixels = Vec::with_capacity(chosen.len());
    let mut picked_conf = Vec::with_capacity(chosen.len());
    for (row, &i) in chosen.iter().enumerate() {
        let pixel = list[i].pixel;
        queries.row_mut(row).assign(&pixels.row(pixel));
        picked_pixels.push(pixel);
        picked_conf.push(confidences[i]);
    }
    Ok(QueryBundle {
        class_id: c,
        queries,
        confidences: picked_conf,
        pixels: picked_pixels,
    })
}

/// Negative keys drawn for one query class.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySample {
    /// `(class, pixel)` of each drawn key.
    pub sources: Vec<(usize, usize)>,
}

impl KeySample {
    pub fn gather(&self, pixels: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut keys = Array2::zeros((self.sources.len(), pixels.ncols()));
        for (row, &(_, p)) in self.sources.iter().enumerate() {
            keys.row_mut(row).assign(&pixels.row(p));
        }
        keys
    }

    pub fn counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for &(c, _) in &self.sources {
            *counts.entry(c).or_insert(0) += 1;
        }
        counts
    }
}

/// Draws `num_keys` negatives for query class `c`.
///
/// With a relation-graph strategy each key's class follows `dist` (classes
/// with an empty pool get zero mass, the rest is renormalised); otherwise
/// keys are uniform over all negative pixels. Within a class, pixels are
/// drawn uniformly with replacement.
pub fn sample_negative_keys(
    pool: &KeyPool,
    c: usize,
    dist: &[(usize, f64)],
    cfg: &SamplerConfig,
    rng: &mut RngStream,
) -> Result<KeySample> {
    let groups: Vec<(usize, &[usize])> = pool.negatives_for(c).filter(|(_, v)| !v.is_empty()).collect();
    if groups.is_empty() {
        return Err(Error::EmptyPool(c));
    }
    if cfg.strategy == SamplingStrategy::Exhaustive {
        let sources = groups
            .iter()
            .flat_map(|&(class, members)| members.iter().map(move |&p| (class, p)))
            .collect();
        return Ok(KeySample { sources });
    }
    let weights: Vec<f64> = if cfg.strategy.uses_relation_graph() {
        groups
            .iter()
            .map(|(k, _)| {
                dist.iter()
                    .find(|(j, _)| j == k)
                    .map(|&(_, p)| p)
                    .unwrap_or(0.0)
            })
            .collect()
    } else {
        groups.iter().map(|(_, v)| v.len() as f64).collect()
    };
    let chooser = WeightedIndex::new(&weights).map_err(|_| Error::EmptyPool(c))?;
    let sources = (0..cfg.num_keys)
        .map(|_| {
            let (class, members) = groups[chooser.sample(rng)];
            (class, members[rng.gen_range(0..members.len())])
        })
        .collect();
    Ok(KeySample { sources })
}

/// Pseudo-labelled pixels whose confidence strictly exceeds `weak_threshold`.
///
/// `pixel_offset` shifts flat indices when the unlabelled images follow the
/// labelled ones in a combined batch. Ignore-valued pseudo labels (e.g. cut
/// out regions) never enter.
pub fn gate_pseudo_pixels(
    confidence: ArrayView3<'_, f64>,
    pseudo_labels: ArrayView3<'_, u8>,
    weak_threshold: f64,
    pixel_offset: usize,
) -> Result<PixelCandidateSet> {
    if confidence.shape() != pseudo_labels.shape() {
        return Err(Error::ShapeMismatch(format!(
            "confidence {:?} vs labels {:?}",
            confidence.shape(),
            pseudo_labels.shape()
        )));
    }
    let mut set = PixelCandidateSet::default();
    for (i, (&conf, &label)) in confidence.iter().zip(pseudo_labels.iter()).enumerate() {
        if label != IGNORE_LABEL && conf > weak_threshold {
            set.push(
                usize::from(label),
                Candidate {
                    pixel: pixel_offset + i,
                    confidence: conf,
                    source: PixelSource::Pseudo,
                },
            );
        }
    }
    Ok(set)
}

/// Every pixel with a ground-truth label; these bypass the confidence gate.
pub fn labelled_pixels(labels: ArrayView3<'_, u8>, pixel_offset: usize) -> PixelCandidateSet {
    let mut set = PixelCandidateSet::default();
    for (i, &label) in labels.iter().enumerate() {
        if label != IGNORE_LABEL {
            set.push(
                usize::from(label),
                Candidate {
                    pixel: pixel_offset + i,
                    confidence: 1.0,
                    source: PixelSource::Labelled,
                },
            );
        }
    }
    set
}

/// Upper bound on vectors sampled per batch: queries and keys for every
/// active class.
pub fn sampling_budget(active_classes: usize, cfg: &SamplerConfig) -> usize {
    active_classes * (cfg.num_queries + cfg.num_keys)
}
