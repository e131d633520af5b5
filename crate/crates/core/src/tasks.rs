//! Synthetic tasks, client sharding and evaluation metrics.
//!
//! Two task families stand in for real image data:
//!
//! * **classification**: each class is a stripe pattern with its own
//!   orientation in a centred patch, with a random phase, pixel noise and a
//!   per-sample brightness offset;
//! * **segmentation**: bright blobs on a dark textured background, predicted
//!   per pixel from the zero-padded 3x3 neighbourhood.

use std::borrow::Cow;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::nn::{Batch, ModelParams};
use crate::rng::StreamKey;

pub const NEIGHBOURHOOD: usize = 9;

/// Stripe period in pixels; half the period is bright.
const STRIPE_PERIOD: f64 = 4.0;
const BRIGHTNESS_JITTER: f64 = 0.1;

const STRIPE_LOW: f64 = 0.05;
const STRIPE_HIGH: f64 = 0.35;
/// Side of the centred square carrying the stripes by default.
pub const DEFAULT_STRIPE_PATCH: usize = 7;

const SEG_BACKGROUND: f64 = 0.15;
const SEG_TEXTURE: f64 = 0.06;
const SEG_BLOB: f64 = 0.7;
const SEG_BLOB_NOISE: f64 = 0.06;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classification,
    Segmentation,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classification => "classification",
            TaskKind::Segmentation => "segmentation",
        }
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "segmentation" => Ok(TaskKind::Segmentation),
            other => Err(Error::InvalidConfig(format!("unknown task kind `{other}`"))),
        }
    }
}

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Image {
            height,
            width,
            pixels: vec![value; height * width],
        }
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|p| (0.0..=1.0).contains(p))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Class(usize),
    /// Binary mask, same layout as the image; entries are 0 or 1.
    Mask(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Index in generation order; keys per-sample corruption streams.
    pub id: u64,
    pub image: Image,
    pub target: Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub kind: TaskKind,
    pub height: usize,
    pub width: usize,
    /// Number of classes; 2 (background/foreground) for segmentation.
    pub num_classes: usize,
    pub gen_seed: u64,
    pub samples: Vec<Sample>,
}

fn check_size(h: usize, w: usize) -> Result<()> {
    if h < 8 || w < 8 {
        return Err(Error::InvalidConfig(format!(
            "image size must be at least 8x8, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Balanced stripe-orientation dataset; sample `i` has class `i % k`.
pub fn gen_classification(
    n: usize,
    h: usize,
    w: usize,
    k: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<TaskDataset> {
    gen_classification_patched(n, h, w, k, noise_sigma, seed, DEFAULT_STRIPE_PATCH)
}

/// Like [`gen_classification`] with the stripes confined to a centred
/// `patch x patch` square (0 or anything at least the image size covers all of it).
/// Outside the square pixels sit at the mid stripe level.
pub fn gen_classification_patched(
    n: usize,
    h: usize,
    w: usize,
    k: usize,
    noise_sigma: f64,
    seed: u64,
    patch: usize,
) -> Result<TaskDataset> {
    check_size(h, w)?;
    if k < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 classes, got {k}")));
    }
    if n == 0 || !n.is_multiple_of(k) {
        return Err(Error::InvalidConfig(format!(
            "sample count {n} must be a positive multiple of the class count {k}"
        )));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "noise_sigma must be >= 0, got {noise_sigma}"
        )));
    }
    let root = StreamKey::root(seed).child("classification", 0);
    let samples = (0..n)
        .map(|i| {
            let class = i % k;
            let mut rng = root.child("sample", i as u64).rng();
            let theta = std::f64::consts::PI * class as f64 / k as f64;
            let (cos, sin) = (theta.cos(), theta.sin());
            let phase = rng.random_range(0.0..STRIPE_PERIOD);
            let offset = rng.random_range(-BRIGHTNESS_JITTER..=BRIGHTNESS_JITTER);
            let (pr, pc) = if patch == 0 {
                (0..h, 0..w)
            } else {
                let (ph, pw) = (patch.min(h), patch.min(w));
                ((h - ph) / 2..(h - ph) / 2 + ph, (w - pw) / 2..(w - pw) / 2 + pw)
            };
            let mut pixels = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    let p = (c as f64 * cos + r as f64 * sin + phase).rem_euclid(STRIPE_PERIOD);
                    let inside = pr.contains(&r) && pc.contains(&c);
                    let base = if !inside {
                        0.5 * (STRIPE_LOW + STRIPE_HIGH)
                    } else if p < STRIPE_PERIOD / 2.0 {
                        STRIPE_HIGH
                    } else {
                        STRIPE_LOW
                    };
                    let noise: f64 = rng.sample(StandardNormal);
                    pixels.push((base + offset + noise_sigma * noise).clamp(0.0, 1.0));
                }
            }
            Sample {
                id: i as u64,
                image: Image {
                    height: h,
                    width: w,
                    pixels,
                },
                target: Target::Class(class),
            }
        })
        .collect();
    Ok(TaskDataset {
        kind: TaskKind::Classification,
        height: h,
        width: w,
        num_classes: k,
        gen_seed: seed,
        samples,
    })
}

/// Blob segmentation dataset: 1-3 bright discs per image, mask = disc support.
pub fn gen_segmentation(n: usize, h: usize, w: usize, seed: u64) -> Result<TaskDataset> {
    check_size(h, w)?;
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be positive".into()));
    }
    let root = StreamKey::root(seed).child("segmentation", 0);
    let samples = (0..n)
        .map(|i| {
            let mut rng = root.child("sample", i as u64).rng();
            let blobs = rng.random_range(1..=3usize);
            let discs: Vec<(f64, f64, f64)> = (0..blobs)
                .map(|_| {
                    let radius = rng.random_range(1.5..3.5);
                    let cy = rng.random_range(radius..h as f64 - radius);
                    let cx = rng.random_range(radius..w as f64 - radius);
                    (cy, cx, radius)
                })
                .collect();
            let mut pixels = Vec::with_capacity(h * w);
            let mut mask = Vec::with_capacity(h * w);
            for r in 0..h {
                for c in 0..w {
                    let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                    let inside = discs
                        .iter()
                        .any(|&(cy, cx, rad)| (y - cy).powi(2) + (x - cx).powi(2) <= rad * rad);
                    let noise: f64 = rng.sample(StandardNormal);
                    let v = if inside {
                        SEG_BLOB + SEG_BLOB_NOISE * noise
                    } else {
                        SEG_BACKGROUND + SEG_TEXTURE * noise
                    };
                    pixels.push(v.clamp(0.0, 1.0));
                    mask.push(u8::from(inside));
                }
            }
            Sample {
                id: i as u64,
                image: Image {
                    height: h,
                    width: w,
                    pixels,
                },
                target: Target::Mask(mask),
            }
        })
        .collect();
    Ok(TaskDataset {
        kind: TaskKind::Segmentation,
        height: h,
        width: w,
        num_classes: 2,
        gen_seed: seed,
        samples,
    })
}

impl TaskDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Model input dimension for this task.
    pub fn input_dim(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.height * self.width,
            TaskKind::Segmentation => NEIGHBOURHOOD,
        }
    }

    /// Splits off the last `round(fraction * n)` samples as a held-out test set.
    pub fn split_holdout(mut self, fraction: f64) -> Result<(TaskDataset, TaskDataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidConfig(format!(
                "test fraction must be in [0, 1), got {fraction}"
            )));
        }
        let n_test = (fraction * self.len() as f64).round() as usize;
        let tail = self.samples.split_off(self.len() - n_test);
        let test = TaskDataset {
            samples: tail,
            ..self.clone_header()
        };
        Ok((self, test))
    }

    fn clone_header(&self) -> TaskDataset {
        TaskDataset {
            kind: self.kind,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            gen_seed: self.gen_seed,
            samples: Vec::new(),
        }
    }

    /// Appends the model rows for one (possibly corrupted) image.
    pub fn encode_into(&self, image: &Image, target: &Target, inputs: &mut Vec<f64>, labels: &mut Vec<usize>) {
        match (self.kind, target) {
            (TaskKind::Classification, Target::Class(c)) => {
                inputs.extend_from_slice(&image.pixels);
                labels.push(*c);
            }
            (TaskKind::Segmentation, Target::Mask(mask)) => {
                neighbourhoods_into(image, inputs);
                labels.extend(mask.iter().map(|&m| m as usize));
            }
            (kind, _) => unreachable!("target does not match task kind {kind:?}"),
        }
    }

    pub fn batch<'a>(&self, items: impl IntoIterator<Item = (Cow<'a, Image>, &'a Target)>) -> Result<Batch> {
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (image, target) in items {
            self.encode_into(&image, target, &mut inputs, &mut labels);
        }
        Batch::new(inputs, labels, self.input_dim())
    }

    /// Task metric (accuracy or mean per-image dice) with each sample passed
    /// through `view` before prediction.
    pub fn evaluate_with<'a, F>(&'a self, params: &ModelParams, view: F) -> Result<f64>
    where
        F: Fn(&'a Sample) -> Result<Cow<'a, Image>>,
    {
        if self.is_empty() {
            return Err(Error::InvalidInput("cannot evaluate on an empty dataset".into()));
        }
        match self.kind {
            TaskKind::Classification => {
                let mut inputs = Vec::with_capacity(self.len() * self.input_dim());
                let mut labels = Vec::with_capacity(self.len());
                for s in &self.samples {
                    let image = view(s)?;
                    self.encode_into(&image, &s.target, &mut inputs, &mut labels);
                }
                let preds = params.predict(&inputs)?;
                accuracy(&preds, &labels)
            }
            TaskKind::Segmentation => {
                let mut total = 0.0;
                let mut inputs = Vec::new();
                for s in &self.samples {
                    let image = view(s)?;
                    inputs.clear();
                    neighbourhoods_into(&image, &mut inputs);
                    let pred: Vec<u8> = params.predict(&inputs)?.into_iter().map(|p| p as u8).collect();
                    let Target::Mask(mask) = &s.target else {
                        unreachable!("segmentation sample without mask")
                    };
                    total += dice(&pred, mask)?;
                }
                Ok(total / self.len() as f64)
            }
        }
    }

    pub fn evaluate(&self, params: &ModelParams) -> Result<f64> {
        self.evaluate_with(params, |s| Ok(Cow::Borrowed(&s.image)))
    }

    /// Writes a flat text dump: a `#` header line, then one line per sample with
    /// id, target and row-major pixels.
    pub fn write_dump(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        let mut out = BufWriter::new(file);
        let mut line = format!(
            "# kind={} height={} width={} classes={} seed={}\n",
            self.kind.as_str(),
            self.height,
            self.width,
            self.num_classes,
            self.gen_seed
        );
        out.write_all(line.as_bytes()).map_err(io_err(path))?;
        for s in &self.samples {
            line.clear();
            let target = match &s.target {
                Target::Class(c) => c.to_string(),
                Target::Mask(m) => m.iter().map(|b| char::from(b'0' + b)).collect(),
            };
            write!(line, "{},{}", s.id, target).unwrap();
            for p in &s.image.pixels {
                write!(line, ",{}", crate::io::fmt_f64(*p)).unwrap();
            }
            line.push('\n');
            out.write_all(line.as_bytes()).map_err(io_err(path))?;
        }
        out.flush().map_err(io_err(path))
    }

    pub fn read_dump(path: &Path) -> Result<TaskDataset> {
        let bad = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines
            .next()
            .ok_or_else(|| bad("empty file".into()))?
            .map_err(io_err(path))?;
        let header = header
            .strip_prefix("# ")
            .ok_or_else(|| bad("missing header".into()))?;
        let mut ds = TaskDataset {
            kind: TaskKind::Classification,
            height: 0,
            width: 0,
            num_classes: 0,
            gen_seed: 0,
            samples: Vec::new(),
        };
        for field in header.split_whitespace() {
            let (key, value) = field
                .split_once('=')
                .ok_or_else(|| bad(format!("bad header field `{field}`")))?;
            let num = || value.parse::<u64>().map_err(|e| bad(format!("{key}: {e}")));
            match key {
                "kind" => ds.kind = value.parse()?,
                "height" => ds.height = num()? as usize,
                "width" => ds.width = num()? as usize,
                "classes" => ds.num_classes = num()? as usize,
                "seed" => ds.gen_seed = num()?,
                other => return Err(bad(format!("unknown header key `{other}`"))),
            }
        }
        for line in lines {
            let line = line.map_err(io_err(path))?;
            let mut fields = line.split(',');
            let id = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| bad(format!("bad id in `{line}`")))?;
            let target_field = fields.next().ok_or_else(|| bad("missing target".into()))?;
            let target = match ds.kind {
                TaskKind::Classification => Target::Class(
                    target_field
                        .parse()
                        .map_err(|e| bad(format!("target: {e}")))?,
                ),
                TaskKind::Segmentation => Target::Mask(
                    target_field
                        .bytes()
                        .map(|b| match b {
                            b'0' | b'1' => Ok(b - b'0'),
                            _ => Err(bad("mask must be 0/1".into())),
                        })
                        .collect::<Result<_>>()?,
                ),
            };
            let pixels = fields
                .map(|f| f.parse::<f64>().map_err(|e| bad(format!("pixel: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let image = Image::new(ds.height, ds.width, pixels)?;
            ds.samples.push(Sample { id, image, target });
        }
        Ok(ds)
    }
}

/// Zero-padded 3x3 neighbourhood of every pixel, row-major, 9 values per pixel.
pub fn neighbourhoods_into(image: &Image, out: &mut Vec<f64>) {
    let (h, w) = (image.height as isize, image.width as isize);
    out.reserve(image.pixels.len() * NEIGHBOURHOOD);
    for r in 0..h {
        for c in 0..w {
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (rr, cc) = (r + dr, c + dc);
                    let v = if rr < 0 || cc < 0 || rr >= h || cc >= w {
                        0.0
                    } else {
                        image.pixels[(rr * w + cc) as usize]
                    };
                    out.push(v);
                }
            }
        }
    }
}

/// One client's slice of the training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientShard {
    pub client_id: usize,
    /// Indices into the training dataset.
    pub train_samples: Vec<usize>,
    /// Sorted subset of `train_samples` that is always served clean.
    pub rehearsal_buffer: Vec<usize>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.train_samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.train_samples.is_empty()
    }

    pub fn is_rehearsal(&self, sample: usize) -> bool {
        self.rehearsal_buffer.binary_search(&sample).is_ok()
    }

    /// Marks `round(fraction * len)` seeded samples as the clean rehearsal buffer.
    pub fn with_rehearsal(mut self, fraction: f64, key: StreamKey) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::InvalidConfig(format!(
                "rehearsal_fraction must be in [0, 1), got {fraction}"
            )));
        }
        let count = (fraction * self.len() as f64).round() as usize;
        let mut rng = key.child("rehearsal", self.client_id as u64).rng();
        let mut picked: Vec<usize> = self
            .train_samples
            .choose_multiple(&mut rng, count)
            .copied()
            .collect();
        picked.sort_unstable();
        self.rehearsal_buffer = picked;
        Ok(self)
    }
}

/// Seeded shuffle, then contiguous split; the first `n % c` clients get one extra sample.
pub fn shard_clients(ds: &TaskDataset, c: usize, seed: u64) -> Result<Vec<ClientShard>> {
    if c == 0 {
        return Err(Error::InvalidConfig("need at least one client".into()));
    }
    if c > ds.len() {
        return Err(Error::InvalidConfig(format!(
            "cannot split {} samples across {c} clients",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut StreamKey::root(seed).child("shard", 0).rng());
    let (base, extra) = (ds.len() / c, ds.len() % c);
    let mut start = 0;
    Ok((0..c)
        .map(|client_id| {
            let size = base + usize::from(client_id < extra);
            let train_samples = order[start..start + size].to_vec();
            start += size;
            ClientShard {
                client_id,
                train_samples,
                rehearsal_buffer: Vec::new(),
            }
        })
        .collect())
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks agree perfectly.
pub fn dice(pred_mask: &[u8], true_mask: &[u8]) -> Result<f64> {
    if pred_mask.len() != true_mask.len() {
        return Err(Error::Shape(format!(
            "mask sizes differ: {} vs {}",
            pred_mask.len(),
            true_mask.len()
        )));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred_mask.iter().zip(true_mask) {
        let (p, t) = (p != 0, t != 0);
        a += usize::from(p);
        b += usize::from(t);
        inter += usize::from(p && t);
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    #[test]
    fn classification_is_balanced_and_in_range() {
        let ds = gen_classification(200, 16, 16, 2, 0.05, 1).unwrap();
        let mut counts = [0; 2];
        for s in &ds.samples {
            let Target::Class(c) = s.target else { panic!() };
            counts[c] += 1;
            assert!(s.image.in_unit_range());
        }
        assert_eq!(counts, [100, 100]);
        assert_eq!(ds, gen_classification(200, 16, 16, 2, 0.05, 1).unwrap());
        assert_ne!(ds, gen_classification(200, 16, 16, 2, 0.05, 2).unwrap());
    }

    #[test]
    fn classification_config_errors() {
        assert!(matches!(
            gen_classification(201, 16, 16, 2, 0.05, 1),
            Err(Error::InvalidConfig(_))
        ));
        assert!(matches!(
            gen_classification(200, 4, 16, 2, 0.05, 1),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn segmentation_masks_are_binary_and_seeded() {
        let ds = gen_segmentation(20, 16, 16, 3).unwrap();
        for s in &ds.samples {
            let Target::Mask(m) = &s.target else { panic!() };
            assert!(m.iter().all(|&v| v <= 1));
            assert!(m.contains(&1));
            assert!(s.image.in_unit_range());
        }
        assert_eq!(ds, gen_segmentation(20, 16, 16, 3).unwrap());
    }

    #[test]
    fn neighbourhood_is_zero_padded() {
        let img = Image::new(2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let mut out = Vec::new();
        neighbourhoods_into(&img, &mut out);
        assert_eq!(out.len(), 4 * 9);
        assert_eq!(&out[..9], &[0.0, 0.0, 0.0, 0.0, 0.1, 0.2, 0.0, 0.3, 0.4]);
    }

    #[test]
    fn shards_even_split() {
        let ds = gen_classification(1000, 8, 8, 2, 0.0, 1).unwrap();
        let shards = shard_clients(&ds, 10, 4).unwrap();
        assert!(shards.iter().all(|s| s.len() == 100));
        let all: BTreeSet<usize> = shards.iter().flat_map(|s| s.train_samples.clone()).collect();
        assert_eq!(all.len(), 1000);
    }

    #[test]
    fn shards_remainder_goes_to_low_ids() {
        let ds = gen_classification(10, 8, 8, 2, 0.0, 1).unwrap();
        let sizes: Vec<usize> = shard_clients(&ds, 3, 0).unwrap().iter().map(|s| s.len()).collect();
        assert_eq!(sizes, vec![4, 3, 3]);
        assert!(matches!(shard_clients(&ds, 11, 0), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn shards_seeded() {
        let ds = gen_classification(100, 8, 8, 2, 0.0, 1).unwrap();
        assert_eq!(shard_clients(&ds, 5, 9).unwrap(), shard_clients(&ds, 5, 9).unwrap());
        assert_ne!(shard_clients(&ds, 5, 9).unwrap(), shard_clients(&ds, 5, 10).unwrap());
    }

    #[test]
    fn rehearsal_buffer_size() {
        let ds = gen_classification(100, 8, 8, 2, 0.0, 1).unwrap();
        let shard = shard_clients(&ds, 4, 0).unwrap().remove(1);
        let shard = shard.with_rehearsal(0.2, StreamKey::root(5)).unwrap();
        assert_eq!(shard.rehearsal_buffer.len(), 5);
        assert!(shard.rehearsal_buffer.iter().all(|i| shard.train_samples.contains(i)));
        assert!(shard.clone().with_rehearsal(1.0, StreamKey::root(5)).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[0, 1, 1], &[0, 1, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 1, 0], &[0, 1, 1, 1]).unwrap(), 0.75);
        assert!(matches!(accuracy(&[0], &[0, 1]), Err(Error::Shape(_))));
    }

    #[test]
    fn dice_examples() {
        assert_eq!(dice(&[1, 1, 0], &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(dice(&[1, 0], &[0, 1]).unwrap(), 0.0);
        assert_eq!(dice(&[0, 0], &[0, 0]).unwrap(), 1.0);
        // |A| = 4, |B| = 6, |A∩B| = 3
        let a = [1, 1, 1, 1, 0, 0, 0, 0];
        let b = [1, 1, 1, 0, 1, 1, 1, 0];
        assert!((dice(&a, &b).unwrap() - 0.6).abs() < 1e-15);
        assert!(matches!(dice(&[1], &[1, 0]), Err(Error::Shape(_))));
    }

    #[test]
    fn dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        for ds in [
            gen_classification(6, 8, 8, 3, 0.1, 2).unwrap(),
            gen_segmentation(3, 8, 9, 2).unwrap(),
        ] {
            let path = dir.path().join("ds.txt");
            ds.write_dump(&path).unwrap();
            assert_eq!(TaskDataset::read_dump(&path).unwrap(), ds);
        }
    }

    proptest! {
        #[test]
        fn dice_symmetric_and_bounded(a in proptest::collection::vec(0u8..2, 1..40), seed in any::<u64>()) {
            let b: Vec<u8> = a.iter().enumerate().map(|(i, v)| if (seed >> (i % 64)) & 1 == 1 { 1 - v } else { *v }).collect();
            let d = dice(&a, &b).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert_eq!(d.to_bits(), dice(&b, &a).unwrap().to_bits());
        }

        #[test]
        fn shards_partition_the_split(n in 1usize..200, c in 1usize..20, seed in any::<u64>()) {
            prop_assume!(c <= n);
            let ds = gen_classification(n * 2, 8, 8, 2, 0.0, 0).unwrap();
            let shards = shard_clients(&ds, c, seed).unwrap();
            let mut all: Vec<usize> = shards.iter().flat_map(|s| s.train_samples.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
            let sizes: Vec<usize> = shards.iter().map(|s| s.len()).collect();
            prop_assert!(sizes.windows(2).all(|p| p[0] >= p[1] && p[0] - p[1] <= 1));
        }
    }
}
