//! Full training runs: sampling, periodic evaluation, outputs.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classbalance::{pixel_frequency_with, rcs_distribution, RareClassSampler};
use crate::error::{Error, Result};
use crate::metrics::{iou_per_class, precision_recall, ConfusionMatrix, PrecisionRecall};
use crate::tensor::{ImageTensor, LabelMap};
use crate::toybench::{scene_for, DatasetManifest, Domain, Split};
use crate::{derive_seed, HEAD, NUM_CLASSES};

use super::checkpoint::Checkpoint;
use super::model::TinySegModel;
use super::step::{train_step, StepLosses, TrainState};
use super::teacher::predict;
use super::TrainConfig;

/// In-memory training data. Target-train labels are used only to score
/// pseudo-labels in the log, never by the optimisation.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub source: Vec<(ImageTensor, LabelMap)>,
    pub source_seeds: Vec<u64>,
    pub target: Vec<ImageTensor>,
    pub target_seeds: Vec<u64>,
    pub target_labels: Vec<Option<LabelMap>>,
    pub test: Vec<(ImageTensor, LabelMap)>,
}

impl TrainData {
    /// Loads every entry of a validated manifest from disk.
    pub fn from_manifest(manifest: &DatasetManifest, base: &Path) -> Result<Self> {
        Self::build(manifest, |entry| {
            let image = crate::io::load_image(&base.join(&entry.image))?;
            let label = match &entry.label {
                Some(p) => Some(crate::io::load_label(&base.join(p))?),
                None => None,
            };
            Ok((image, label))
        })
    }

    /// Re-renders a toy manifest procedurally from its entry seeds.
    pub fn render(manifest: &DatasetManifest) -> Result<Self> {
        Self::build(manifest, |entry| {
            let (image, label) = scene_for(entry, manifest.canvas)?;
            Ok((image, Some(label)))
        })
    }

    fn build<F>(manifest: &DatasetManifest, load: F) -> Result<Self>
    where
        F: Fn(&crate::toybench::ManifestEntry) -> Result<(ImageTensor, Option<LabelMap>)> + Sync,
    {
        let loaded = manifest.entries.par_iter().map(&load).collect::<Result<Vec<_>>>()?;
        let mut data = TrainData::default();
        for (entry, (image, label)) in manifest.entries.iter().zip(loaded) {
            match (entry.domain, entry.split) {
                (Domain::Source, _) => {
                    let label = label.ok_or_else(|| {
                        Error::InvalidInput(format!("source entry {} has no label", entry.image))
                    })?;
                    data.source.push((image, label));
                    data.source_seeds.push(entry.seed);
                }
                (Domain::Target, Split::Train) => {
                    data.target.push(image);
                    data.target_labels.push(label);
                    data.target_seeds.push(entry.seed);
                }
                (Domain::Target, Split::Test) => {
                    let label = label.ok_or_else(|| {
                        Error::InvalidInput(format!("test entry {} has no label", entry.image))
                    })?;
                    data.test.push((image, label));
                }
            }
        }
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: Option<f64>,
    /// Mean step losses since the previous record; absent for the initial one.
    pub losses: Option<StepLosses>,
    /// Teacher pseudo-labels against target-train ground truth, per class.
    pub pseudo_label: Vec<PrecisionRecall>,
    pub head_precision: Option<f64>,
    pub head_recall: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<MetricsRecord>,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            iteration: self.state.iteration as u64,
            student: self.state.student.clone(),
            teacher: self.state.teacher.clone(),
        }
    }

    /// Writes `checkpoint.bin` and `metrics.json` into `out_dir`.
    pub fn write(&self, out_dir: &Path) -> Result<()> {
        self.checkpoint().save(&out_dir.join("checkpoint.bin"))?;
        crate::io::write_json(&out_dir.join("metrics.json"), &self.metrics)
    }
}

/// Confusion matrix of `model` over labeled pairs.
pub fn evaluate(model: &TinySegModel, pairs: &[(&ImageTensor, &LabelMap)]) -> Result<ConfusionMatrix> {
    pairs
        .par_iter()
        .map(|(img, gt)| {
            let mut cm = ConfusionMatrix::new(model.config.num_classes);
            cm.accumulate(&predict(model, img)?.label, gt)?;
            Ok(cm)
        })
        .try_reduce(|| ConfusionMatrix::new(model.config.num_classes), |a, b| a.merge(&b))
}

/// The model whose predictions are reported on held-out data.
pub fn eval_model<'a>(state: &'a TrainState, cfg: &TrainConfig) -> &'a TinySegModel {
    if cfg.eval_teacher {
        &state.teacher.model
    } else {
        &state.student
    }
}

fn record(
    state: &TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    losses: Option<StepLosses>,
) -> Result<MetricsRecord> {
    let test: Vec<_> = data.test.iter().map(|(i, l)| (i, l)).collect();
    let report = iou_per_class(&evaluate(eval_model(state, cfg), &test)?);
    let labeled_targets: Vec<_> = data
        .target
        .iter()
        .zip(&data.target_labels)
        .filter_map(|(img, lbl)| lbl.as_ref().map(|l| (img, l)))
        .take(cfg.pseudo_eval_images)
        .collect();
    let pseudo_label = precision_recall(&evaluate(&state.teacher.model, &labeled_targets)?);
    let head = pseudo_label.get(HEAD as usize).copied().unwrap_or_default();
    Ok(MetricsRecord {
        iteration: state.iteration,
        per_class_iou: report.per_class,
        miou: report.miou,
        losses,
        pseudo_label,
        head_precision: head.precision,
        head_recall: head.recall,
    })
}

/// Runs `cfg.iterations` steps, recording metrics at iteration 0, every
/// `eval_interval` steps and at the end. Deterministic for a given config.
pub fn train(cfg: &TrainConfig, data: &TrainData) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.source.is_empty() || data.target.is_empty() {
        return Err(Error::InvalidInput("training needs source and target images".into()));
    }
    let labels: Vec<LabelMap> = data.source.iter().map(|(_, l)| l.clone()).collect();
    let stats = pixel_frequency_with(&labels, NUM_CLASSES, cfg.rcs_presence_threshold)?;
    let sampler = if cfg.use_rcs {
        Some(RareClassSampler::new(&stats, &rcs_distribution(&stats, cfg.rcs_temperature)?)?)
    } else {
        None
    };

    let mut state = TrainState::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
    let step_root = derive_seed(cfg.seed, 2);
    let mut metrics = vec![record(&state, data, cfg, None)?];
    let mut running = StepLosses::default();
    let mut since = 0usize;

    for it in 1..=cfg.iterations {
        let mut src = Vec::with_capacity(cfg.batch_size);
        let mut tgt = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let s = match &sampler {
                Some(sampler) => sampler.sample(&mut rng)?,
                None => rng.random_range(0..data.source.len()),
            };
            src.push(s);
            tgt.push(rng.random_range(0..data.target.len()));
        }
        let source_batch: Vec<_> = src.iter().map(|&i| (&data.source[i].0, &data.source[i].1)).collect();
        let target_batch: Vec<_> = tgt.iter().map(|&i| &data.target[i]).collect();
        let step_seed = derive_seed(step_root, it as u64);
        let losses = train_step(&mut state, &source_batch, &target_batch, cfg, step_seed).map_err(|e| match e {
            Error::Numerical(msg) => {
                let src_seeds: Vec<u64> = src.iter().filter_map(|&i| data.source_seeds.get(i).copied()).collect();
                let tgt_seeds: Vec<u64> = tgt.iter().filter_map(|&i| data.target_seeds.get(i).copied()).collect();
                Error::Numerical(format!(
                    "{msg}; source indices {src:?} seeds {src_seeds:?}, target indices {tgt:?} seeds {tgt_seeds:?}"
                ))
            }
            other => other,
        })?;
        running.source += losses.source;
        running.mixed += losses.mixed;
        running.total += losses.total;
        running.pseudo_quality += losses.pseudo_quality;
        since += 1;

        if it % cfg.eval_interval == 0 || it == cfg.iterations {
            let n = since as f64;
            let mean = StepLosses {
                source: running.source / n,
                mixed: running.mixed / n,
                total: running.total / n,
                pseudo_quality: running.pseudo_quality / n,
            };
            metrics.push(record(&state, data, cfg, Some(mean))?);
            running = StepLosses::default();
            since = 0;
        }
    }
    Ok(TrainOutcome { state, metrics })
}
