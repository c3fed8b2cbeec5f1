//! Dataset loading: CIFAR binary batches, TinyImageNet directories and a
//! synthetic blob set for smoke runs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::checkpoint::{read_tensor_file, write_tensor_file};
use crate::error::{Result, SnnError};
use crate::tensor::Tensor;

pub const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const STD: [f32; 3] = [0.229, 0.224, 0.225];
pub const IMAGE_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = SnnError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(SnnError::Config(format!("unknown split `{s}` (valid: train, val, test)"))),
        }
    }
}

/// Images `[N, 3, H, W]` with one label per image.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(SnnError::invalid(
                "dataset",
                format!("{} labels for images of shape {:?}", labels.len(), images.shape()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(SnnError::invalid(
                "dataset",
                format!("label {bad} outside [0, {class_count})"),
            ));
        }
        Ok(Dataset {
            images,
            labels,
            class_count,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select_batch(rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            class_count: self.class_count,
            split: self.split,
        }
    }

    /// First `n` images, or all of them when `n` exceeds the length.
    pub fn take(&self, n: usize) -> Dataset {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&rows)
    }

    /// Stores images and labels in the checkpoint tensor format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let labels = Tensor::new(vec![self.len()], self.labels.iter().map(|&l| l as f32).collect())?;
        let header = format!("dataset classes={} split={}", self.class_count, self.split);
        write_tensor_file(path, &header, &[&self.images, &labels])
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let (header, tensors) = read_tensor_file(path)?;
        let bad = |reason: &str| SnnError::format(path, reason);
        let mut classes = None;
        let mut split = None;
        for part in header.split_whitespace().skip(1) {
            match part.split_once('=') {
                Some(("classes", v)) => classes = v.parse::<usize>().ok(),
                Some(("split", v)) => split = v.parse::<Split>().ok(),
                _ => {}
            }
        }
        if !header.starts_with("dataset ") || tensors.len() != 2 {
            return Err(bad("not a dataset file"));
        }
        let (Some(classes), Some(split)) = (classes, split) else {
            return Err(bad("dataset header lacks classes or split"));
        };
        let mut it = tensors.into_iter();
        let images = it.next().unwrap();
        let labels = it.next().unwrap().data().iter().map(|&l| l as usize).collect();
        Dataset::new(images, labels, classes, split).map_err(|e| bad(&e.to_string()))
    }
}

/// CIFAR binary batch: one label byte (two for CIFAR-100, fine label
/// second) followed by 3072 pixel bytes in R, G, B planes.
pub fn load_cifar_bin(path: &Path, variant: usize, split: Split) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    parse_cifar(&bytes, variant, split).map_err(|reason| SnnError::format(path, reason))
}

fn parse_cifar(bytes: &[u8], variant: usize, split: Split) -> std::result::Result<Dataset, String> {
    let label_bytes = match variant {
        10 => 1,
        100 => 2,
        _ => return Err(format!("CIFAR variant must be 10 or 100, got {variant}")),
    };
    let pixels = 3 * IMAGE_SIZE * IMAGE_SIZE;
    let record = label_bytes + pixels;
    if bytes.is_empty() || bytes.len() % record != 0 {
        return Err(format!(
            "size {} is not a positive multiple of the {record}-byte CIFAR-{variant} record",
            bytes.len()
        ));
    }
    let n = bytes.len() / record;
    let mut data = Vec::with_capacity(n * pixels);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(record) {
        let label = rec[label_bytes - 1] as usize;
        if label >= variant {
            return Err(format!("label {label} out of range for CIFAR-{variant}"));
        }
        labels.push(label);
        data.extend(rec[label_bytes..].iter().map(|&b| b as f32 / 255.0));
    }
    let images = Tensor::new(vec![n, 3, IMAGE_SIZE, IMAGE_SIZE], data).map_err(|e| e.to_string())?;
    Dataset::new(images, labels, variant, split).map_err(|e| e.to_string())
}

/// Bilinear resize of one `[C, H, W]` image with half-pixel centres and
/// edge clamping.
pub fn resize_bilinear(src: &[f32], channels: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let scale = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let pos = ((o as f32 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f32);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, pos - lo as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

fn load_image(path: &Path) -> Result<Vec<f32>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut planar = vec![0.0; 3 * h * w];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            planar[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    if h == IMAGE_SIZE && w == IMAGE_SIZE {
        Ok(planar)
    } else {
        Ok(resize_bilinear(&planar, 3, h, w, IMAGE_SIZE, IMAGE_SIZE))
    }
}

fn sorted_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.is_file());
    files.sort();
    Ok(files)
}

/// TinyImageNet directory: `wnids.txt`, `train/<wnid>/images/*` and
/// `val/images/*` labelled by `val/val_annotations.txt`. Images are resized
/// to 32x32. The public test split has no labels and is not loadable here.
pub fn load_tinyimagenet(dir: &Path, split: Split) -> Result<Dataset> {
    let wnids_path = dir.join("wnids.txt");
    let mut wnids: Vec<String> = fs::read_to_string(&wnids_path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    wnids.sort();
    wnids.dedup();
    if wnids.is_empty() {
        return Err(SnnError::format(&wnids_path, "no class ids"));
    }
    let index: BTreeMap<&str, usize> = wnids.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();

    let mut samples: Vec<(PathBuf, usize)> = Vec::new();
    match split {
        Split::Train => {
            for (wnid, &label) in &index {
                for file in sorted_files(&dir.join("train").join(wnid).join("images"))? {
                    samples.push((file, label));
                }
            }
        }
        Split::Val => {
            let ann = dir.join("val").join("val_annotations.txt");
            if !ann.is_file() {
                return Err(SnnError::format(&ann, "missing validation annotations"));
            }
            for (lineno, line) in fs::read_to_string(&ann)?.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let mut cols = line.split('\t');
                let (Some(file), Some(wnid)) = (cols.next(), cols.next()) else {
                    return Err(SnnError::format(&ann, format!("line {}: expected <file>\\t<wnid>", lineno + 1)));
                };
                let Some(&label) = index.get(wnid) else {
                    return Err(SnnError::format(&ann, format!("line {}: unknown class id `{wnid}`", lineno + 1)));
                };
                samples.push((dir.join("val").join("images").join(file), label));
            }
        }
        Split::Test => {
            return Err(SnnError::invalid("load_tinyimagenet", "the test split is unlabelled"));
        }
    }

    let mut data = Vec::with_capacity(samples.len() * 3 * IMAGE_SIZE * IMAGE_SIZE);
    let mut labels = Vec::with_capacity(samples.len());
    for (path, label) in samples {
        data.extend(load_image(&path)?);
        labels.push(label);
    }
    let images = Tensor::new(vec![labels.len(), 3, IMAGE_SIZE, IMAGE_SIZE], data)?;
    Dataset::new(images, labels, wnids.len(), split)
}

fn channel_affine(images: &Tensor, f: impl Fn(f32, usize) -> f32) -> Result<Tensor> {
    let [_, c, h, w] = images.dims4("normalize")?;
    if c != 3 {
        return Err(SnnError::invalid("normalize", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let data = images
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, (i / plane) % 3))
        .collect();
    Tensor::new(images.shape().to_vec(), data)
}

pub fn normalize(images: &Tensor) -> Result<Tensor> {
    channel_affine(images, |x, c| (x - MEAN[c]) / STD[c])
}

pub fn denormalize(images: &Tensor) -> Result<Tensor> {
    channel_affine(images, |x, c| x * STD[c] + MEAN[c])
}

/// Deterministic class-conditioned Gaussian blobs. Each class has its own
/// blob position and colour; samples add position jitter and pixel noise.
/// Labels cycle `0, 1, .., classes-1, 0, ..`.
pub fn synth_blobs(seed: u64, classes: usize, per_class: usize, size: usize) -> Result<Dataset> {
    if classes < 2 {
        return Err(SnnError::invalid("synth_blobs", format!("need at least 2 classes, got {classes}")));
    }
    if size < 4 {
        return Err(SnnError::invalid("synth_blobs", format!("image size {size} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.05).expect("valid normal");
    let half = size as f32 / 2.0;
    let radius = size as f32 * 0.3;
    let sigma = size as f32 * 0.15;
    let protos: Vec<([f32; 2], [f32; 3])> = (0..classes)
        .map(|k| {
            let angle = std::f32::consts::TAU * k as f32 / classes as f32;
            let center = [half + radius * angle.sin(), half + radius * angle.cos()];
            let hue = angle;
            let color = [
                0.5 + 0.5 * hue.cos(),
                0.5 + 0.5 * (hue + 2.1).cos(),
                0.5 + 0.5 * (hue + 4.2).cos(),
            ];
            (center, color)
        })
        .collect();

    let n = classes * per_class;
    let plane = size * size;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let (center, color) = protos[label];
        let cy = center[0] + rng.random_range(-1.0f32..1.0);
        let cx = center[1] + rng.random_range(-1.0f32..1.0);
        for &channel_color in &color {
            for p in 0..plane {
                let (y, x) = ((p / size) as f32 + 0.5, (p % size) as f32 + 0.5);
                let d2 = (y - cy).powi(2) + (x - cx).powi(2);
                let blob = (-d2 / (2.0 * sigma * sigma)).exp();
                let v = 0.1 + blob * channel_color + noise.sample(&mut rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
        labels.push(label);
    }
    let images = Tensor::new(vec![n, 3, size, size], data)?;
    Dataset::new(images, labels, classes, Split::Train)
}

/// Seeded shuffle, then the first `round(fraction * N)` rows become the
/// validation set. Both parts keep the original row order.
pub fn train_val_split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(SnnError::invalid("train_val_split", format!("fraction must lie in (0, 1), got {fraction}")));
    }
    let (train, val) = split_indices(dataset.len(), fraction, seed);
    let mut t = dataset.subset(&train);
    let mut v = dataset.subset(&val);
    t.split = Split::Train;
    v.split = Split::Val;
    Ok((t, v))
}

pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = (n as f64 * fraction).round() as usize;
    let mut val = idx[..k].to_vec();
    let mut train = idx[k..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    (train, val)
}
