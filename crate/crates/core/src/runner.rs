//! Training loop over in-memory datasets, loss-trace logging, periodic
//! checkpoints and evaluation.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::checkpoint::save_checkpoint;
use crate::data::{normalize_images, LabelMap, RasterImage};
use crate::error::{shape_err, Error, Result};
use crate::metrics::ConfusionCounts;
use crate::tensor::{Element, Tensor};
use crate::trainer::{predict, train_step, LossRecord, SourceBatch, TrainConfig, TrainState};

pub const LOSS_TRACE: &str = "losses.jsonl";

/// Normalized images, each `[1, 3, H, W]`, with optional labels.
#[derive(Clone, Debug)]
pub struct TensorSet<T> {
    pub images: Vec<Tensor<T>>,
    pub labels: Vec<Vec<u8>>,
}

impl<T: Element> TensorSet<T> {
    pub fn from_images(images: &[&RasterImage]) -> Result<Self> {
        Ok(TensorSet {
            images: images.iter().map(|i| normalize_images(&[*i])).collect::<Result<_>>()?,
            labels: Vec::new(),
        })
    }

    pub fn from_labeled(samples: &[(&RasterImage, &LabelMap)], num_classes: usize) -> Result<Self> {
        let mut set = Self::from_images(&samples.iter().map(|(i, _)| *i).collect::<Vec<_>>())?;
        for (img, label) in samples {
            if (label.height, label.width) != (img.height, img.width) {
                return Err(shape_err!("label does not match its image"));
            }
            label.check_classes(num_classes)?;
            set.labels.push(label.classes.clone());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let parts: Vec<&Tensor<T>> = indices.iter().map(|&i| &self.images[i]).collect();
        Tensor::cat_batch(&parts)
    }

    pub fn labeled_batch(&self, indices: &[usize]) -> Result<SourceBatch<T>> {
        if self.labels.len() != self.images.len() {
            return Err(Error::InvalidArgument("source set has no labels".into()));
        }
        Ok(SourceBatch {
            images: self.batch(indices)?,
            labels: indices.iter().flat_map(|&i| self.labels[i].iter().copied()).collect(),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory receiving the loss trace and checkpoints.
    pub out_dir: Option<PathBuf>,
    /// Save `checkpoint` every this many steps (and at the end).
    pub checkpoint_every: Option<usize>,
    /// Stop after this step instead of `cfg.steps`.
    pub stop_at: Option<u64>,
}

pub const CHECKPOINT_DIR: &str = "checkpoint";

fn open_trace(dir: &Path, resume: bool) -> Result<BufWriter<File>> {
    let path = dir.join(LOSS_TRACE);
    let file = if resume {
        OpenOptions::new().create(true).append(true).open(&path)
    } else {
        File::create(&path)
    };
    Ok(BufWriter::new(file.map_err(|e| Error::io(path, e))?))
}

/// Runs train steps from `state.step` up to the configured budget.
pub fn run_training<T: Element>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    source: &TensorSet<T>,
    target: &TensorSet<T>,
    opts: &RunOptions,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if source.is_empty() || target.is_empty() {
        return Err(Error::InvalidArgument("both domains need at least one training image".into()));
    }
    let mut trace = match &opts.out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(open_trace(dir, state.step > 0)?)
        }
        None => None,
    };
    let end = opts.stop_at.unwrap_or(cfg.steps as u64).min(cfg.steps as u64);
    let mut records = Vec::new();
    while state.step < end {
        let (si, ti) = state.sample_indices(cfg.batch_size, source.len(), target.len());
        let src = source.labeled_batch(&si)?;
        let tgt = target.batch(&ti)?;
        let (record, _, _) = train_step(state, cfg, &src, &tgt)?;
        if let Some(w) = trace.as_mut() {
            let path = opts.out_dir.as_ref().expect("trace implies out dir").join(LOSS_TRACE);
            writeln!(w, "{}", record.to_json()).map_err(|e| Error::io(&path, e))?;
        }
        on_step(&record);
        records.push(record);
        if let (Some(dir), Some(every)) = (&opts.out_dir, opts.checkpoint_every) {
            if every > 0 && state.step % every as u64 == 0 && state.step < end {
                save_checkpoint(state, cfg, &dir.join(CHECKPOINT_DIR))?;
            }
        }
    }
    if let (Some(w), Some(dir)) = (trace.as_mut(), &opts.out_dir) {
        w.flush().map_err(|e| Error::io(dir.join(LOSS_TRACE), e))?;
        save_checkpoint(state, cfg, &dir.join(CHECKPOINT_DIR))?;
    }
    Ok(records)
}

/// Confusion counts of the full prediction pipeline over a labeled set.
pub fn evaluate<T: Element>(
    state: &TrainState<T>,
    cfg: &TrainConfig,
    set: &TensorSet<T>,
    batch_size: usize,
) -> Result<ConfusionCounts> {
    let mut counts = ConfusionCounts::new(cfg.num_classes);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let pred = predict(state, cfg, &set.batch(chunk)?)?;
        let gt: Vec<u8> = chunk.iter().flat_map(|&i| set.labels[i].iter().copied()).collect();
        counts.accumulate(&pred.classes, &gt)?;
    }
    Ok(counts)
}
