//! Run configuration and the `generate`, `partition`, `train` and `eval`
//! commands. Every command is a function of the config and the files it
//! reads; randomness comes from named streams of the global seed.
//!
//! Output layout under `output_dir`:
//!
//! ```text
//! dataset/               images, labels, manifest.json (see data::store)
//! train/metrics.csv      one line per iteration
//! train/iter_NNNNNN.json periodic checkpoints
//! train/final.json       checkpoint after the last iteration
//! eval/<split>_iou.csv   per-class IoU and the mean
//! eval/<split>_iou.json
//! eval/relation_graph.csv, relation_graph.dot, dendrogram.nwk, dendrogram.json
//! ```

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::contrast::relation_graph;
use crate::data::{
    generate_synthetic, image_to_f64, load_dataset, partition_pdfl, partition_plfd, save_dataset,
    save_partition, top_up_labelled, PartialLabelEntry, PartitionRecord, PartitionSpec, Sample,
    SynthDataset, SynthSpec,
};
use crate::data::store::image_id;
use crate::eval::{
    class_embeddings, dendrogram, evaluate, relation_graph_csv, relation_graph_dot, EmbeddingKind, IouReport,
};
use crate::model::{ModelShape, ToyModelParams};
use crate::rng::{stream, streams};
use crate::trainer::{train, IterRecord, TrainConfig, TrainData, TrainerState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    #[default]
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::config("split", format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub split: Split,
    /// Also export the relation graph and dendrogram.
    pub relate: bool,
    pub embedding: EmbeddingKind,
    /// Checkpoint to evaluate; `train/final.json` when unset.
    pub checkpoint: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            split: Split::Val,
            relate: false,
            embedding: EmbeddingKind::Representation,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// `synth.seed` is replaced by the global seed.
    pub synth: SynthSpec,
    pub partition: PartitionSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("run"),
            synth: SynthSpec::default(),
            partition: PartitionSpec::PartialDatasetFullLabels {
                min_images_per_class: 1,
                min_distinct_classes: 3,
                labelled_total: Some(5),
            },
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
        }
    }
}

impl RunConfig {
    /// Parses JSON; errors name the dotted path of the offending key.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::config(path, inner.to_string())
        })?;
        cfg.synth.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.partition.validate()?;
        self.train.validate()?;
        if let PartitionSpec::PartialDatasetFullLabels {
            labelled_total: Some(n), ..
        } = self.partition
        {
            if n > self.synth.train_count {
                return Err(Error::config("partition.labelled_total", "exceeds synth.train_count"));
            }
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.output_dir.join("dataset")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.output_dir.join("train")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.output_dir.join("eval")
    }

    pub fn model_shape(&self) -> ModelShape {
        ModelShape::new(self.synth.num_classes, self.train.embed_dim)
    }
}

/// Process exit status for an error: 1 config, 2 data, 3 runtime.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidConfig { .. } => 1,
        Error::InvalidData(_) | Error::Io(_) | Error::Image(_) | Error::Json(_) | Error::Unsatisfiable(_) => 2,
        _ => 3,
    }
}

/// Sizes the global worker pool from `RECO_LAB_THREADS` when set.
pub fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("RECO_LAB_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config("RECO_LAB_THREADS", format!("expected a positive integer, got `{value}`")))?;
    // a pool may already exist when called twice in one process
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

/// Synthetic splits for the config's seed.
pub fn generate_in_memory(cfg: &RunConfig) -> Result<SynthDataset> {
    let mut spec = cfg.synth.clone();
    spec.seed = cfg.seed;
    generate_synthetic(&spec, &mut stream(cfg.seed, streams::DATA))
}

pub fn cmd_generate(cfg: &RunConfig) -> Result<SynthDataset> {
    let dataset = generate_in_memory(cfg)?;
    let dir = cfg.dataset_dir();
    fs::create_dir_all(&dir)?;
    save_dataset(&dir, &dataset)?;
    Ok(dataset)
}

/// Partition of the train split plus sparse labels for the pixel-budget mode.
pub fn partition_in_memory(cfg: &RunConfig, train: &[Sample]) -> Result<(PartitionRecord, Option<Vec<Array2<u8>>>)> {
    let mut rng = stream(cfg.seed, streams::PARTITION);
    let ids: Vec<String> = (0..train.len()).map(|i| image_id("train", i)).collect();
    match &cfg.partition {
        PartitionSpec::PartialDatasetFullLabels {
            min_images_per_class,
            min_distinct_classes,
            labelled_total,
        } => {
            let labels: Vec<ArrayView2<'_, u8>> = train.iter().map(|s| s.label.view()).collect();
            let mut part = partition_pdfl(
                &labels,
                cfg.synth.num_classes,
                *min_images_per_class,
                *min_distinct_classes,
                &mut rng,
            )?;
            if let Some(total) = labelled_total {
                top_up_labelled(&mut part, *total, &mut rng)?;
            }
            let record = PartitionRecord {
                spec: cfg.partition.clone(),
                seed: cfg.seed,
                labelled: part.labelled.iter().map(|&i| ids[i].clone()).collect(),
                unlabelled: part.unlabelled.iter().map(|&i| ids[i].clone()).collect(),
                pdfl_audit: Some(part.audit),
                plfd: None,
            };
            Ok((record, None))
        }
        PartitionSpec::PartialLabelsFullDataset { label_budget } => {
            let mut entries = Vec::with_capacity(train.len());
            let mut partial = Vec::with_capacity(train.len());
            for (sample, id) in train.iter().zip(&ids) {
                let p = partition_plfd(sample.label.view(), *label_budget, &mut rng);
                entries.push(PartialLabelEntry {
                    id: id.clone(),
                    label: format!("partial/{id}_label.png"),
                    reveals: p.reveals,
                });
                partial.push(p.label);
            }
            let record = PartitionRecord {
                spec: cfg.partition.clone(),
                seed: cfg.seed,
                labelled: ids.clone(),
                unlabelled: Vec::new(),
                pdfl_audit: None,
                plfd: Some(entries),
            };
            Ok((record, Some(partial)))
        }
    }
}

pub fn cmd_partition(cfg: &RunConfig) -> Result<PartitionRecord> {
    let dir = cfg.dataset_dir();
    let mut stored = load_dataset(&dir)?;
    if stored.manifest.num_classes != cfg.synth.num_classes {
        return Err(Error::InvalidData(format!(
            "dataset has {} classes, config {}",
            stored.manifest.num_classes, cfg.synth.num_classes
        )));
    }
    let (record, partial) = partition_in_memory(cfg, &stored.train)?;
    save_partition(&dir, &mut stored.manifest, record.clone(), partial.as_deref())?;
    Ok(record)
}

/// Training tensors for a partition. With sparse labels every train image is
/// both labelled (sparsely) and unlabelled.
pub fn train_data(train: &[Sample], record: &PartitionRecord, partial: Option<&[Array2<u8>]>) -> Result<TrainData> {
    let index = |id: &String| -> Result<usize> {
        (0..train.len())
            .find(|&i| image_id("train", i) == *id)
            .ok_or_else(|| Error::InvalidData(format!("partition names unknown image {id}")))
    };
    let floats = |i: usize| -> Array3<f64> { image_to_f64(train[i].image.view()) };
    let mut data = TrainData::default();
    match partial {
        Some(labels) => {
            for id in &record.labelled {
                let i = index(id)?;
                data.labelled_images.push(floats(i));
                data.labelled_labels.push(labels[i].clone());
            }
            data.unlabelled_images = data.labelled_images.clone();
        }
        None => {
            for id in &record.labelled {
                let i = index(id)?;
                data.labelled_images.push(floats(i));
                data.labelled_labels.push(train[i].label.clone());
            }
            for id in &record.unlabelled {
                data.unlabelled_images.push(floats(index(id)?));
            }
        }
    }
    if data.labelled_images.is_empty() {
        return Err(Error::InvalidData("partition has no labelled images".into()));
    }
    Ok(data)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Omit the `# started` line so logs compare byte for byte.
    pub no_timestamp: bool,
    /// Continue from this checkpoint instead of a fresh initialisation.
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub iterations: usize,
    pub last: Option<IterRecord>,
    pub final_checkpoint: PathBuf,
}

pub fn checkpoint_path(dir: &Path, iter: usize) -> PathBuf {
    dir.join(format!("iter_{iter:06}.json"))
}

pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    let stored = load_dataset(&cfg.dataset_dir())?;
    let record = stored
        .manifest
        .partition
        .as_ref()
        .ok_or_else(|| Error::InvalidData("dataset is not partitioned; run `partition` first".into()))?;
    let data = train_data(&stored.train, record, stored.partial_train.as_deref())?;
    let shape = cfg.model_shape();
    let mut state = match &opts.resume {
        Some(path) => {
            let state = Checkpoint::load(path)?.restore()?;
            if state.student.shape != shape {
                return Err(Error::InvalidData(format!(
                    "checkpoint shape {:?} differs from config {:?}",
                    state.student.shape, shape
                )));
            }
            state
        }
        None => TrainerState::new(shape, &cfg.train, cfg.seed)?,
    };

    let dir = cfg.train_dir();
    fs::create_dir_all(&dir)?;
    let metrics_path = dir.join("metrics.csv");
    let kept = if opts.resume.is_some() {
        previous_lines(&metrics_path, state.iter)?
    } else {
        Vec::new()
    };
    let mut log = BufWriter::new(fs::File::create(&metrics_path)?);
    if !opts.no_timestamp {
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        writeln!(log, "# started {secs}")?;
    }
    writeln!(log, "{}", IterRecord::CSV_HEADER)?;
    for line in kept {
        writeln!(log, "{line}")?;
    }

    let total = cfg.train.optim.total_iters;
    let every = cfg.train.checkpoint_every;
    let mut last = None;
    train(&mut state, &cfg.train, &data, total, |rec, st| {
        if !rec.loss.total.is_finite() {
            return Err(Error::InvalidData(format!("non-finite loss at iteration {}", rec.iter)));
        }
        writeln!(log, "{}", rec.csv_line())?;
        if every > 0 && st.iter % every == 0 && st.iter < total {
            log.flush()?;
            Checkpoint::capture(st).save(&checkpoint_path(&dir, st.iter))?;
        }
        last = Some(*rec);
        Ok(())
    })?;
    log.flush()?;
    let final_checkpoint = dir.join("final.json");
    Checkpoint::capture(&state).save(&final_checkpoint)?;
    Ok(TrainSummary {
        iterations: state.iter,
        last,
        final_checkpoint,
    })
}

/// Metric lines of an earlier run for iterations before `iter`.
fn previous_lines(path: &Path, iter: usize) -> Result<Vec<String>> {
    if iter == 0 {
        return Ok(Vec::new());
    }
    let text = fs::read_to_string(path)
        .map_err(|e| Error::InvalidData(format!("cannot resume without {}: {e}", path.display())))?;
    let lines: Vec<String> = text
        .lines()
        .filter(|l| !l.starts_with('#') && *l != IterRecord::CSV_HEADER)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|v| v.parse::<usize>().ok())
                .is_some_and(|i| i < iter)
        })
        .map(str::to_string)
        .collect();
    if lines.len() != iter {
        return Err(Error::InvalidData(format!(
            "{} holds {} lines before iteration {iter}",
            path.display(),
            lines.len()
        )));
    }
    Ok(lines)
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub report: IouReport,
    pub written: Vec<PathBuf>,
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalSummary> {
    let opts = &cfg.eval;
    let stored = load_dataset(&cfg.dataset_dir())?;
    let ckpt_path = opts.checkpoint.clone().unwrap_or_else(|| cfg.train_dir().join("final.json"));
    let params = Checkpoint::load(&ckpt_path)?.student;
    if params.shape.num_classes != stored.manifest.num_classes {
        return Err(Error::InvalidData("checkpoint and dataset class counts differ".into()));
    }
    let samples = match opts.split {
        Split::Train => &stored.train,
        Split::Val => &stored.val,
    };
    let dir = cfg.eval_dir();
    fs::create_dir_all(&dir)?;
    let (report, written) = evaluate_samples(&params, samples, opts, &dir)?;
    Ok(EvalSummary { report, written })
}

fn evaluate_samples(
    params: &ToyModelParams,
    samples: &[Sample],
    opts: &EvalOptions,
    dir: &Path,
) -> Result<(IouReport, Vec<PathBuf>)> {
    if samples.is_empty() {
        return Err(Error::InvalidData(format!("split `{}` is empty", opts.split.name())));
    }
    let images: Vec<Array3<f64>> = samples.iter().map(|s| image_to_f64(s.image.view())).collect();
    let labels: Vec<Array2<u8>> = samples.iter().map(|s| s.label.clone()).collect();
    let (_, report) = evaluate(params, &images, &labels)?;
    let split = opts.split.name();
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    put(format!("{split}_iou.csv"), report.to_csv())?;
    put(format!("{split}_iou.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    if opts.relate {
        let views: Vec<ArrayView2<'_, u8>> = labels.iter().map(|l| l.view()).collect();
        let means = class_embeddings(params, &images, &views, opts.embedding)?;
        let graph = relation_graph(&means, params.shape.num_classes)?;
        put("relation_graph.csv".into(), relation_graph_csv(&graph))?;
        put("relation_graph.dot".into(), relation_graph_dot(&graph))?;
        let (tree, _) = dendrogram(&means)?;
        put("dendrogram.nwk".into(), tree.to_newick(&|c| format!("class{c}")) + "\n")?;
        put("dendrogram.json".into(), serde_json::to_string_pretty(&tree)? + "\n")?;
    }
    Ok((report, written))
}

/// Generate, partition, train and evaluate without touching the disk.
/// Uses the same seeds and streams as the individual commands.
pub fn run_in_memory(
    cfg: &RunConfig,
    on_iter: impl FnMut(&IterRecord, &TrainerState) -> Result<()>,
) -> Result<(TrainerState, IouReport)> {
    cfg.validate()?;
    let dataset = generate_in_memory(cfg)?;
    let (record, partial) = partition_in_memory(cfg, &dataset.train)?;
    let data = train_data(&dataset.train, &record, partial.as_deref())?;
    let mut state = TrainerState::new(cfg.model_shape(), &cfg.train, cfg.seed)?;
    train(&mut state, &cfg.train, &data, cfg.train.optim.total_iters, on_iter)?;
    let images: Vec<Array3<f64>> = dataset.val.iter().map(|s| image_to_f64(s.image.view())).collect();
    let labels: Vec<Array2<u8>> = dataset.val.iter().map(|s| s.label.clone()).collect();
    let (_, report) = evaluate(&state.student, &images, &labels)?;
    Ok((state, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_json(r#"{"train": {"loss": {"temprature": 0.5}}}"#).unwrap_err();
        match err {
            Error::InvalidConfig { key, .. } => assert_eq!(key, "train.loss.temprature"),
            other => panic!("{other}"),
        }
        assert_eq!(exit_code(&RunConfig::from_json("{\"sed\": 1}").unwrap_err()), 1);
    }

    #[test]
    fn wrong_type_is_named() {
        let err = RunConfig::from_json(r#"{"synth": {"height": "tall"}}"#).unwrap_err();
        match err {
            Error::InvalidConfig { key, .. } => assert_eq!(key, "synth.height"),
            other => panic!("{other}"),
        }
    }

    #[test]
    fn validation_errors_name_keys() {
        let err = RunConfig::from_json(r#"{"train": {"loss": {"weak_threshold": 0.99}}}"#).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { .. }), "{err}");
        assert!(err.to_string().contains("threshold"), "{err}");
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn sparse_partition_feeds_every_image_twice() {
        let cfg = RunConfig {
            synth: SynthSpec {
                height: 16,
                width: 16,
                train_count: 4,
                val_count: 1,
                ..Default::default()
            },
            partition: PartitionSpec::PartialLabelsFullDataset {
                label_budget: crate::data::LabelBudget::OnePixel,
            },
            ..Default::default()
        };
        let ds = generate_in_memory(&cfg).unwrap();
        let (record, partial) = partition_in_memory(&cfg, &ds.train).unwrap();
        let data = train_data(&ds.train, &record, partial.as_deref()).unwrap();
        assert_eq!(data.labelled_images.len(), 4);
        assert_eq!(data.unlabelled_images.len(), 4);
        for (sparse, full) in data.labelled_labels.iter().zip(&ds.train) {
            for (&s, &f) in sparse.iter().zip(full.label.iter()) {
                assert!(s == crate::IGNORE_LABEL || s == f);
            }
        }
    }
}
