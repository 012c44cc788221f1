//! End-to-end training run on a dataset directory.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::augment::LabeledImage;
use crate::config::RunConfig;
use crate::data_io::{load_dataset, split, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::model::{save_checkpoint, Model, ModelConfig};
use crate::resample::{resample, KernelSpec};

use super::{train, EpochRecord};

pub const HISTORY_FILE: &str = "history.jsonl";
pub const EFFECTIVE_CONFIG_FILE: &str = "effective.cfg";

/// Dataset split into labelled train/val/test sets at the model's input
/// size.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
    pub num_classes: usize,
    pub split: SplitAssignment,
}

impl PreparedData {
    pub fn part(&self, which: Split) -> &[LabeledImage] {
        match which {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Brings an image to `size x size` (Lanczos-5) and the expected channel
/// count.
pub fn fit_image(img: &ImageBuffer, size: usize, channels: usize) -> Result<ImageBuffer> {
    let img = match (img.channels(), channels) {
        (c, want) if c == want => img.clone(),
        (1, 3) => img.to_rgb(),
        (c, want) => {
            return Err(Error::Data(format!(
                "image has {c} channels but the model expects {want}"
            )))
        }
    };
    if img.height() == size && img.width() == size {
        Ok(img)
    } else {
        let mut out = resample(&img, size, size, KernelSpec::Lanczos(5))?;
        out.clamp_unit();
        Ok(out)
    }
}

/// Loads `dir`, fits images to `model`'s input and splits with `seed`.
pub fn prepare_data(dir: &Path, model: &ModelConfig, seed: u64) -> Result<PreparedData> {
    let ds = load_dataset(dir)?;
    let k = ds.manifest.num_classes();
    let images = ds
        .images
        .par_iter()
        .map(|img| fit_image(img, model.image_size, model.channels))
        .collect::<Result<Vec<_>>>()?;
    let assignment = split(&ds.manifest, seed);
    let part = |which| {
        assignment
            .indices(which)
            .into_iter()
            .map(|i| LabeledImage {
                image: images[i].clone(),
                label: ds.manifest.label(i),
            })
            .collect()
    };
    Ok(PreparedData {
        train: part(Split::Train),
        val: part(Split::Val),
        test: part(Split::Test),
        num_classes: k,
        split: assignment,
    })
}

#[derive(Clone, Debug)]
pub struct RunOutputs {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub history_path: PathBuf,
    pub effective_config: PathBuf,
    pub warnings: Vec<String>,
}

/// `<dir>/<stem>.best.ckpt` next to the final checkpoint path.
pub fn best_checkpoint_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    out.with_file_name(format!("{stem}.best.ckpt"))
}

/// Trains on `data_dir` and writes, next to `out`: the final checkpoint
/// (`out`), the best-validation checkpoint, `history.jsonl` and
/// `effective.cfg`. Each history line is also passed to `on_line`.
pub fn run_training(
    cfg: &RunConfig,
    data_dir: &Path,
    out: &Path,
    mut on_line: impl FnMut(&str),
) -> Result<RunOutputs> {
    cfg.validate()?;
    let data = prepare_data(data_dir, &cfg.model, cfg.train.seed)?;
    if data.num_classes < 2 {
        return Err(Error::Data(format!(
            "need at least 2 classes to train, found {}",
            data.num_classes
        )));
    }
    let mut cfg = cfg.clone();
    cfg.model.num_classes = data.num_classes;
    cfg.validate()?;

    let dir = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let effective_config = dir.join(EFFECTIVE_CONFIG_FILE);
    std::fs::write(&effective_config, cfg.to_text()).map_err(|e| Error::io(&effective_config, e))?;
    let history_path = dir.join(HISTORY_FILE);
    let mut history_file =
        BufWriter::new(File::create(&history_path).map_err(|e| Error::io(&history_path, e))?);
    let best_checkpoint = best_checkpoint_path(out);
    let extra = [("seed", cfg.train.seed.to_string())];

    let mut model = Model::<f32>::new(cfg.model.clone(), cfg.train.seed)?;
    let outcome = train(&mut model, &data.train, &data.val, &cfg.train, |rec, m, is_best| {
        let line = rec.to_json();
        writeln!(history_file, "{line}")
            .and_then(|_| history_file.flush())
            .map_err(|e| Error::io(&history_path, e))?;
        on_line(&line);
        if is_best {
            save_checkpoint(&best_checkpoint, m, &extra)?;
        }
        Ok(())
    })?;
    save_checkpoint(out, &model, &extra)?;
    Ok(RunOutputs {
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        best_val_acc: outcome.best_val_acc,
        last_checkpoint: out.to_path_buf(),
        best_checkpoint,
        history_path,
        effective_config,
        warnings: data.split.warnings,
    })
}
