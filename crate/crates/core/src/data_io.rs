//! Dataset directories, stratified splits and a synthetic generator.
//!
//! A dataset is a directory holding `labels.csv` (header `path,label`, paths
//! relative to the directory) and the image files it names. Extra columns
//! after `label` are read as a soft label vector, one probability per class.
//! An optional `classes.txt` names the classes, one per line.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::augment::LabeledImage;
use crate::error::{Error, Result};
use crate::image::{read_image, write_image, ImageBuffer};
use crate::rng;

pub const LABELS_FILE: &str = "labels.csv";
pub const CLASSES_FILE: &str = "classes.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub path: String,
    pub class: usize,
    /// Probability vector from extra CSV columns, when present.
    pub soft_label: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<Entry>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.class).collect()
    }

    /// Label vector of entry `i`: its soft label or a one-hot vector.
    pub fn label(&self, i: usize) -> Vec<f64> {
        let e = &self.entries[i];
        e.soft_label.clone().unwrap_or_else(|| {
            let mut v = vec![0.0; self.num_classes()];
            v[e.class] = 1.0;
            v
        })
    }
}

/// Reads `labels.csv` (and `classes.txt` if present) without decoding
/// images. Entry order follows the file.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let labels = dir.join(LABELS_FILE);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(&labels)
        .map_err(|e| csv_error(&labels, e))?;
    let header = reader.headers().map_err(|e| csv_error(&labels, e))?.clone();
    if header.len() < 2 || &header[0] != "path" || &header[1] != "label" {
        return Err(Error::decode(&labels, "header must start with `path,label`"));
    }
    let soft_columns = header.len() - 2;
    let mut entries = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_error(&labels, e))?;
        let line = i + 2;
        if rec.len() != header.len() {
            return Err(Error::decode(&labels, format!("line {line}: expected {} fields", header.len())));
        }
        let class: usize = rec[1]
            .parse()
            .map_err(|_| Error::decode(&labels, format!("line {line}: bad label `{}`", &rec[1])))?;
        let soft_label = if soft_columns > 0 {
            let v = (2..rec.len())
                .map(|j| rec[j].parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::decode(&labels, format!("line {line}: bad soft label")))?;
            if v.iter().any(|&p| !(p >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::decode(&labels, format!("line {line}: soft label is not a distribution")));
            }
            Some(v)
        } else {
            None
        };
        entries.push(Entry {
            path: rec[0].to_string(),
            class,
            soft_label,
        });
    }

    let classes_path = dir.join(CLASSES_FILE);
    let class_names: Vec<String> = if classes_path.exists() {
        std::fs::read_to_string(&classes_path)
            .map_err(|e| Error::io(&classes_path, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect()
    } else {
        let k = if soft_columns > 0 {
            soft_columns
        } else {
            entries.iter().map(|e| e.class + 1).max().unwrap_or(0)
        };
        (0..k).map(|c| c.to_string()).collect()
    };
    let k = class_names.len();
    for (i, e) in entries.iter().enumerate() {
        if e.class >= k {
            return Err(Error::decode(
                &labels,
                format!("line {}: label {} out of range for {k} classes ({})", i + 2, e.class, e.path),
            ));
        }
        if soft_columns > 0 && soft_columns != k {
            return Err(Error::decode(&labels, format!("{soft_columns} soft label columns for {k} classes")));
        }
    }
    Ok(DatasetManifest {
        root: dir.to_path_buf(),
        entries,
        class_names,
    })
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::decode(path, format!("{other:?}")),
    }
}

/// Decoded dataset. Grayscale images are replicated to three channels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub images: Vec<ImageBuffer>,
}

impl Dataset {
    pub fn labeled(&self, i: usize) -> LabeledImage {
        LabeledImage {
            image: self.images[i].clone(),
            label: self.manifest.label(i),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Vec<LabeledImage> {
        indices.iter().map(|&i| self.labeled(i)).collect()
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = read_manifest(dir)?;
    let images = manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = dir.join(&e.path);
            if !path.is_file() {
                return Err(Error::Data(format!("missing image {}", path.display())));
            }
            let img = read_image(&path)?;
            Ok(if img.channels() == 1 { img.to_rgb() } else { img })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { manifest, images })
}

/// Writes `labels.csv` with hard labels, or soft label columns when any
/// entry carries one.
pub fn write_labels(dir: &Path, entries: &[Entry], num_classes: usize) -> Result<()> {
    let path = dir.join(LABELS_FILE);
    let soft = entries.iter().any(|e| e.soft_label.is_some());
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&path)
        .map_err(|e| csv_error(&path, e))?;
    let mut header = vec!["path".to_string(), "label".to_string()];
    if soft {
        header.extend((0..num_classes).map(|c| format!("p{c}")));
    }
    w.write_record(&header).map_err(|e| csv_error(&path, e))?;
    for e in entries {
        let mut rec = vec![e.path.clone(), e.class.to_string()];
        if soft {
            let v = e.soft_label.clone().unwrap_or_else(|| {
                let mut v = vec![0.0; num_classes];
                v[e.class] = 1.0;
                v
            });
            rec.extend(v.iter().map(|p| p.to_string()));
        }
        w.write_record(&rec).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitAssignment {
    pub tags: Vec<Split>,
    pub seed: u64,
    /// Classes too small to split, kept entirely in train.
    pub warnings: Vec<String>,
}

impl SplitAssignment {
    pub fn indices(&self, which: Split) -> Vec<usize> {
        (0..self.tags.len()).filter(|&i| self.tags[i] == which).collect()
    }

    pub fn counts(&self) -> (usize, usize, usize) {
        let c = |s| self.tags.iter().filter(|&&t| t == s).count();
        (c(Split::Train), c(Split::Val), c(Split::Test))
    }
}

/// Stratified 0.80/0.10/0.10 split. Within each class the entries are ranked
/// by a hash of `(seed, path)`; the first `round(n/10)` go to validation, the
/// next `round(n/10)` to test and the rest to train, which keeps every part
/// within one sample of its target.
pub fn split(manifest: &DatasetManifest, seed: u64) -> SplitAssignment {
    let mut tags = vec![Split::Train; manifest.len()];
    let mut warnings = Vec::new();
    for class in 0..manifest.num_classes() {
        let mut members: Vec<(u64, usize)> = manifest
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.class == class)
            .map(|(i, e)| (rng::derive_seed(seed, "split", rng::fnv1a(e.path.as_bytes())), i))
            .collect();
        if members.len() < 3 {
            if !members.is_empty() {
                warnings.push(format!(
                    "class {class} has {} sample(s); kept in train only",
                    members.len()
                ));
            }
            continue;
        }
        members.sort_unstable();
        let held = (members.len() as f64 / 10.0).round() as usize;
        for (rank, &(_, i)) in members.iter().enumerate() {
            tags[i] = if rank < held {
                Split::Val
            } else if rank < 2 * held {
                Split::Test
            } else {
                Split::Train
            };
        }
    }
    SplitAssignment { tags, seed, warnings }
}

/// Class template of the synthetic generator: blob centre (fractions of the
/// image side) and width.
fn blob_template(class: usize, classes: usize) -> (f64, f64, f64) {
    let angle = 2.0 * PI * class as f64 / classes as f64;
    let cy = 0.5 + 0.28 * angle.sin();
    let cx = 0.5 + 0.28 * angle.cos();
    let sigma = 0.07 + 0.03 * (class % 3) as f64;
    (cy, cx, sigma)
}

/// One synthetic grayscale image of `class`: a Gaussian blob at the class
/// position with jittered centre, width and brightness over a noisy
/// background.
pub fn synth_image(class: usize, classes: usize, size: usize, rng: &mut impl Rng) -> Result<ImageBuffer> {
    let (cy, cx, sigma) = blob_template(class, classes);
    let s = size as f64;
    let cy = (cy + rng.random_range(-0.05..0.05)) * s;
    let cx = (cx + rng.random_range(-0.05..0.05)) * s;
    let sigma = sigma * rng.random_range(0.85..1.15) * s;
    let amp = rng.random_range(0.6..0.9);
    let background = rng.random_range(0.05..0.2);
    let noise = Normal::new(0.0, 0.05).expect("valid normal");
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let dy = y as f64 + 0.5 - cy;
            let dx = x as f64 + 0.5 - cx;
            let v = background + amp * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp() + noise.sample(rng);
            pixels.push(v.clamp(0.0, 1.0) as f32);
        }
    }
    ImageBuffer::new(size, size, 1, pixels)
}

/// Writes `classes * per_class` PNG images and `labels.csv` to `out`.
/// Output bytes depend only on the arguments.
pub fn synth_dataset(out: &Path, classes: usize, per_class: usize, size: usize, seed: u64) -> Result<DatasetManifest> {
    if classes < 2 {
        return Err(Error::InvalidArgument(format!("synthetic data needs at least 2 classes, got {classes}")));
    }
    if size == 0 {
        return Err(Error::InvalidArgument("image size must be positive".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut order: Vec<(usize, usize)> = (0..classes).flat_map(|c| (0..per_class).map(move |i| (c, i))).collect();
    order.shuffle(&mut rng::substream(seed, "synth-order", 0));
    let entries: Vec<Entry> = order
        .par_iter()
        .map(|&(c, i)| {
            let mut r = rng::substream(seed, "synth", (c * per_class + i) as u64);
            let img = synth_image(c, classes, size, &mut r)?;
            let name = format!("c{c}_{i:05}.png");
            write_image(&out.join(&name), &img)?;
            Ok(Entry {
                path: name,
                class: c,
                soft_label: None,
            })
        })
        .collect::<Result<_>>()?;
    write_labels(out, &entries, classes)?;
    let names: String = (0..classes).map(|c| format!("class{c}\n")).collect();
    let classes_path = out.join(CLASSES_FILE);
    std::fs::write(&classes_path, names).map_err(|e| Error::io(&classes_path, e))?;
    read_manifest(out)
}

/// Nearest-class-mean accuracy on raw pixels: fit on `train`, score `test`.
pub fn nearest_centroid_accuracy(train: &[LabeledImage], test: &[LabeledImage]) -> f64 {
    let Some(first) = train.first() else { return 0.0 };
    let k = first.label.len();
    let n = first.image.pixels().len();
    let mut sums = vec![vec![0.0f64; n]; k];
    let mut counts = vec![0usize; k];
    for s in train {
        let c = s.dominant_class();
        counts[c] += 1;
        sums[c].iter_mut().zip(s.image.pixels()).for_each(|(a, &b)| *a += f64::from(b));
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= c.max(1) as f64);
    }
    let correct = test
        .iter()
        .filter(|s| {
            let dist = |m: &Vec<f64>| -> f64 {
                m.iter().zip(s.image.pixels()).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum()
            };
            let best = (0..k)
                .filter(|&c| counts[c] > 0)
                .min_by(|&a, &b| dist(&sums[a]).total_cmp(&dist(&sums[b])))
                .unwrap_or(0);
            best == s.dominant_class()
        })
        .count();
    correct as f64 / test.len().max(1) as f64
}
